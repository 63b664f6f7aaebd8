//! Reconstruction, Gram-correlation and classification losses, and their
//! weighted fusion.
//!
//! Feature maps are batched `[B, M, H, Z]` tensors. Per-example losses are
//! normalized by that example's map size and then averaged over the batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Weights of the correlation (`alpha`) and classification (`beta`) terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.001,
            beta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha >= 0.0 && beta >= 0.0 && alpha.is_finite() && beta.is_finite()) {
            return Err(Error::Config(format!(
                "loss weights must be finite and nonnegative (alpha={alpha}, beta={beta})"
            )));
        }
        Ok(Self { alpha, beta })
    }
}

/// Which of the three loss terms participate in the joint objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LossSet {
    pub reconstruction: bool,
    pub correlation: bool,
    pub classification: bool,
}

impl LossSet {
    pub const ALL: LossSet = LossSet {
        reconstruction: true,
        correlation: true,
        classification: true,
    };

    /// The seven non-empty combinations, in ablation-table order:
    /// r, s, c, r+s, r+c, s+c, r+s+c.
    pub fn combinations() -> [LossSet; 7] {
        let l = |r, s, c| LossSet {
            reconstruction: r,
            correlation: s,
            classification: c,
        };
        [
            l(true, false, false),
            l(false, true, false),
            l(false, false, true),
            l(true, true, false),
            l(true, false, true),
            l(false, true, true),
            l(true, true, true),
        ]
    }

    pub fn is_empty(&self) -> bool {
        !(self.reconstruction || self.correlation || self.classification)
    }

    /// Parses a comma list such as `r,s,c`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut set = LossSet {
            reconstruction: false,
            correlation: false,
            classification: false,
        };
        for tok in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match tok {
                "r" => set.reconstruction = true,
                "s" => set.correlation = true,
                "c" => set.classification = true,
                other => return Err(Error::Config(format!("unknown loss term '{other}' (use r, s, c)"))),
            }
        }
        if set.is_empty() {
            return Err(Error::NoLossEnabled);
        }
        Ok(set)
    }

    /// Short label, e.g. `L_r+L_c`.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.reconstruction {
            parts.push("L_r");
        }
        if self.correlation {
            parts.push("L_s");
        }
        if self.classification {
            parts.push("L_c");
        }
        parts.join("+")
    }

    pub fn code(&self) -> String {
        let mut parts = Vec::new();
        if self.reconstruction {
            parts.push("r");
        }
        if self.correlation {
            parts.push("s");
        }
        if self.classification {
            parts.push("c");
        }
        parts.join(",")
    }
}

impl Default for LossSet {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_r: f64,
    pub l_s: f64,
    pub l_c: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.l_r += other.l_r;
        self.l_s += other.l_s;
        self.l_c += other.l_c;
        self.total += other.total;
    }

    pub fn scaled(self, c: f64) -> Self {
        Self {
            l_r: self.l_r * c,
            l_s: self.l_s * c,
            l_c: self.l_c * c,
            total: self.total * c,
        }
    }
}

fn check_maps(tape: &Tape, op: &'static str, base: Var, pruned: Var) -> Result<[usize; 4]> {
    let bs = tape.try_value(base)?.shape();
    let ps = tape.try_value(pruned)?.shape();
    if bs != ps {
        return Err(Error::shape(op, format!("baseline map {bs:?} vs pruned map {ps:?}")));
    }
    match *bs {
        [b, m, h, z] => Ok([b, m, h, z]),
        [m, h, z] => Ok([1, m, h, z]),
        _ => Err(Error::shape(op, format!("expected [B, M, H, Z] or [M, H, Z], got {bs:?}"))),
    }
}

/// `(1 / 2T) * ||F_base - F_pruned||^2` with `T = M*H*Z`, averaged over the
/// batch.
pub fn reconstruction_loss(tape: &mut Tape, base: Var, pruned: Var) -> Result<Var> {
    let [b, m, h, z] = check_maps(tape, "reconstruction_loss", base, pruned)?;
    let t = (m * h * z) as f64;
    let diff = tape.sub(base, pruned)?;
    let sq = tape.sum_squares(diff)?;
    tape.scale(sq, 1.0 / (2.0 * t * b as f64))
}

/// `(1 / 4 N^2 M^2) * (||G^f - G^f_P||^2 + ||G^s - G^s_P||^2)` with
/// `N = H*Z`, averaged over the batch. Both Gram terms share the one
/// normalizer.
pub fn correlation_loss(tape: &mut Tape, base: Var, pruned: Var) -> Result<Var> {
    let [b, m, h, z] = check_maps(tape, "correlation_loss", base, pruned)?;
    let n = h * z;
    let fb = tape.reshape(base, &[b, m, n])?;
    let fp = tape.reshape(pruned, &[b, m, n])?;

    let gf_b = tape.gram_feature(fb)?;
    let gf_p = tape.gram_feature(fp)?;
    let df = tape.sub(gf_b, gf_p)?;
    let ef = tape.sum_squares(df)?;

    let gs_b = tape.gram_spatial(fb)?;
    let gs_p = tape.gram_spatial(fp)?;
    let ds = tape.sub(gs_b, gs_p)?;
    let es = tape.sum_squares(ds)?;

    let sum = tape.add(ef, es)?;
    let (n, m) = (n as f64, m as f64);
    tape.scale(sum, 1.0 / (4.0 * n * n * m * m * b as f64))
}

/// Mean softmax cross-entropy of `logits` against `labels`.
pub fn classification_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.softmax_cross_entropy(logits, labels)
}

/// Combines scalar loss values: `total = l_r + alpha*l_s + beta*l_c` over the
/// enabled terms. Disabled terms are reported as zero.
pub fn joint_loss(l_r: f64, l_s: f64, l_c: f64, w: LossWeights, enabled: LossSet) -> Result<LossBreakdown> {
    if enabled.is_empty() {
        return Err(Error::NoLossEnabled);
    }
    if !(l_r.is_finite() && l_s.is_finite() && l_c.is_finite()) {
        return Err(Error::NonFinite("joint_loss"));
    }
    let l_r = if enabled.reconstruction { l_r } else { 0.0 };
    let l_s = if enabled.correlation { l_s } else { 0.0 };
    let l_c = if enabled.classification { l_c } else { 0.0 };
    Ok(LossBreakdown {
        l_r,
        l_s,
        l_c,
        total: l_r + w.alpha * l_s + w.beta * l_c,
    })
}

/// Differentiable joint loss recorded on the tape.
///
/// `pruned_logits` is only consulted when the classification term is
/// enabled.
pub fn joint_loss_tape(
    tape: &mut Tape,
    base_map: Var,
    pruned_map: Var,
    pruned_logits: Var,
    labels: &[usize],
    w: LossWeights,
    enabled: LossSet,
) -> Result<(Var, LossBreakdown)> {
    if enabled.is_empty() {
        return Err(Error::NoLossEnabled);
    }
    let mut terms: Vec<Var> = Vec::with_capacity(3);
    let (mut l_r, mut l_s, mut l_c) = (0.0, 0.0, 0.0);
    if enabled.reconstruction {
        let v = reconstruction_loss(tape, base_map, pruned_map)?;
        l_r = tape.value(v).data()[0];
        terms.push(v);
    }
    if enabled.correlation {
        let v = correlation_loss(tape, base_map, pruned_map)?;
        l_s = tape.value(v).data()[0];
        terms.push(tape.scale(v, w.alpha)?);
    }
    if enabled.classification {
        let v = classification_loss(tape, pruned_logits, labels)?;
        l_c = tape.value(v).data()[0];
        terms.push(tape.scale(v, w.beta)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    let breakdown = LossBreakdown {
        l_r,
        l_s,
        l_c,
        total: tape.value(total).data()[0],
    };
    Ok((total, breakdown))
}
