//! Straight-loop reference implementations used as test oracles.
#![allow(dead_code)]

use chanprune::losses;
use chanprune::pruner::{channel_sensitivity, select_channels};
use chanprune::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Six-loop cross-correlation with zero padding. `w` is `[M, C, kh, kw]`.
pub fn naive_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let [n, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [m, _, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let xv = |bi: usize, ci: usize, y: isize, xx: isize| -> f64 {
        if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
            0.0
        } else {
            x.data()[((bi * c + ci) * h + y as usize) * wd + xx as usize]
        }
    };
    let mut out = vec![0.0; n * m * oh * ow];
    for bi in 0..n {
        for mi in 0..m {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[mi]);
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let y = (oy * stride + ky) as isize - pad as isize;
                                let xx = (ox * stride + kx) as isize - pad as isize;
                                acc += w.data()[((mi * c + ci) * kh + ky) * kw + kx] * xv(bi, ci, y, xx);
                            }
                        }
                    }
                    out[((bi * m + mi) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new([n, m, oh, ow], out).unwrap()
}

/// `x [B, in] · w [in, out] + b`.
pub fn naive_dense(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (n, i_n, o_n) = (x.shape()[0], w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0; n * o_n];
    for r in 0..n {
        for o in 0..o_n {
            let mut acc = b.data()[o];
            for i in 0..i_n {
                acc += x.data()[r * i_n + i] * w.data()[i * o_n + o];
            }
            out[r * o_n + o] = acc;
        }
    }
    Tensor::new([n, o_n], out).unwrap()
}

/// Per output channel: sum over (c, i, j) of (g * w)^2.
pub fn naive_sensitivity(w: &Tensor, g: &Tensor) -> Vec<f64> {
    let s = w.shape();
    let (m, c, kh, kw) = (s[0], s[1], s[2], s[3]);
    let mut delta = vec![0.0; m];
    for (k, d) in delta.iter_mut().enumerate() {
        for ci in 0..c {
            for i in 0..kh {
                for j in 0..kw {
                    let at = ((k * c + ci) * kh + i) * kw + j;
                    let p = g.data()[at] * w.data()[at];
                    *d += p * p;
                }
            }
        }
    }
    delta
}

/// Exhaustive search over all K-subsets for the largest multiset of
/// sensitivities; ties go to the lexicographically smallest index set.
pub fn brute_top_k(delta: &[f64], k: usize) -> Vec<usize> {
    let m = delta.len();
    // Compare sorted-descending value vectors so float summation order
    // cannot decide ties.
    let key = |set: &[usize]| {
        let mut v: Vec<f64> = set.iter().map(|&i| delta[i]).collect();
        v.sort_by(|a, b| b.total_cmp(a));
        v
    };
    let mut best: Option<(Vec<f64>, Vec<usize>)> = None;
    for bits in 0u32..(1 << m) {
        if bits.count_ones() as usize != k {
            continue;
        }
        let set: Vec<usize> = (0..m).filter(|i| bits & (1 << i) != 0).collect();
        let kv = key(&set);
        let better = match &best {
            None => true,
            Some((bk, bs)) => match kv.partial_cmp(bk).unwrap() {
                std::cmp::Ordering::Greater => true,
                std::cmp::Ordering::Equal => set < *bs,
                std::cmp::Ordering::Less => false,
            },
        };
        if better {
            best = Some((kv, set));
        }
    }
    best.unwrap().1
}

fn dims(t: &Tensor) -> (usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2] * s[3])
}

/// Flat-loop reconstruction loss over `[B, M, H, Z]` maps.
pub fn naive_reconstruction(base: &Tensor, pruned: &Tensor) -> f64 {
    let (b, m, n) = dims(base);
    let mut total = 0.0;
    for e in 0..b {
        let mut acc = 0.0;
        for i in 0..m * n {
            let d = base.data()[e * m * n + i] - pruned.data()[e * m * n + i];
            acc += d * d;
        }
        total += acc / (2.0 * (m * n) as f64);
    }
    total / b as f64
}

/// Explicit Gram matrices of one example's `[M, N]` map.
pub fn naive_grams(f: &[f64], m: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gf = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            gf[i * m + j] = (0..n).map(|p| f[i * n + p] * f[j * n + p]).sum();
        }
    }
    let mut gs = vec![0.0; n * n];
    for p in 0..n {
        for q in 0..n {
            gs[p * n + q] = (0..m).map(|i| f[i * n + p] * f[i * n + q]).sum();
        }
    }
    (gf, gs)
}

/// Explicit-Gram correlation loss.
pub fn naive_correlation(base: &Tensor, pruned: &Tensor) -> f64 {
    let (b, m, n) = dims(base);
    let mut total = 0.0;
    for e in 0..b {
        let fb = &base.data()[e * m * n..(e + 1) * m * n];
        let fp = &pruned.data()[e * m * n..(e + 1) * m * n];
        let (gfb, gsb) = naive_grams(fb, m, n);
        let (gfp, gsp) = naive_grams(fp, m, n);
        let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        let norm = 4.0 * (n * n) as f64 * (m * m) as f64;
        total += (sq(&gfb, &gfp) + sq(&gsb, &gsp)) / norm;
    }
    total / b as f64
}

/// Mean cross-entropy via an explicit log-sum-exp.
pub fn naive_cross_entropy(logits: &Tensor, labels: &[usize]) -> f64 {
    let k = logits.shape()[1];
    let mut total = 0.0;
    for (row, &y) in logits.data().chunks_exact(k).zip(labels) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / labels.len() as f64
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Worst relative deviation of the tape convolution from [`naive_conv`]
/// over random shapes, strides and paddings.
pub fn conv_oracle_error(cases: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..cases {
        let mut r = rng(seed);
        let (n, c, m) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..5));
        let k = [1, 3, 5][r.random_range(0..3)];
        let stride = r.random_range(1..3);
        let pad = r.random_range(0..=k / 2);
        let h = k + r.random_range(0..5) * stride;
        let w = k + r.random_range(0..5) * stride;
        let x = Tensor::randn([n, c, h, w], 1.0, &mut r);
        let wt = Tensor::randn([m, c, k, k], 1.0, &mut r);
        let b = Tensor::randn([m], 1.0, &mut r);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(wt.clone()), tape.constant(b.clone()));
        let y = tape.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        let expect = naive_conv(&x, &wt, Some(&b), stride, pad);
        assert_eq!(tape.value(y).shape(), expect.shape());
        worst = worst.max(rel_err(tape.value(y).data(), expect.data()));
    }
    worst
}

pub fn dense_oracle_error(cases: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..cases {
        let mut r = rng(100 + seed);
        let (n, i, o) = (r.random_range(1..5), r.random_range(1..20), r.random_range(1..8));
        let x = Tensor::randn([n, i], 1.0, &mut r);
        let w = Tensor::randn([i, o], 1.0, &mut r);
        let b = Tensor::randn([o], 1.0, &mut r);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
        let y = tape.dense(xv, wv, Some(bv)).unwrap();
        worst = worst.max(rel_err(tape.value(y).data(), naive_dense(&x, &w, &b).data()));
    }
    worst
}

pub fn sensitivity_oracle_error(cases: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..cases {
        let mut r = rng(200 + seed);
        let shape = [r.random_range(1..6), r.random_range(1..5), 3, 3];
        let w = Tensor::randn(shape, 1.0, &mut r);
        let g = Tensor::randn(shape, 1.0, &mut r);
        let got = channel_sensitivity(&w, &g).unwrap();
        worst = worst.max(rel_err(&got, &naive_sensitivity(&w, &g)));
    }
    worst
}

/// Number of random cases (M <= 12, with deliberate ties) where
/// `select_channels` disagrees with [`brute_top_k`].
pub fn selection_oracle_mismatches(cases: u64) -> usize {
    let mut bad = 0;
    for seed in 0..cases {
        let mut r = rng(300 + seed);
        let m = r.random_range(1..=12);
        let k = r.random_range(1..=m);
        let delta: Vec<f64> = if seed % 2 == 0 {
            (0..m).map(|_| r.random_range(0..4) as f64).collect()
        } else {
            (0..m).map(|_| r.random::<f64>()).collect()
        };
        if select_channels(&delta, k).unwrap().retained != brute_top_k(&delta, k) {
            bad += 1;
        }
    }
    bad
}

/// Worst relative deviation of the three losses from their loop oracles.
pub fn loss_oracle_errors(cases: u64) -> [f64; 3] {
    let mut worst = [0.0f64; 3];
    for seed in 0..cases {
        let mut r = rng(400 + seed);
        let shape = [r.random_range(1..4), r.random_range(1..6), r.random_range(1..6), r.random_range(1..6)];
        let base = Tensor::randn(shape, 1.0, &mut r);
        let pruned = Tensor::randn(shape, 1.0, &mut r);
        let classes = r.random_range(2..6);
        let logits = Tensor::randn([shape[0], classes], 3.0, &mut r);
        let labels: Vec<usize> = (0..shape[0]).map(|_| r.random_range(0..classes)).collect();
        let mut tape = Tape::new();
        let (b, p, z) = (tape.constant(base.clone()), tape.constant(pruned.clone()), tape.constant(logits.clone()));
        let lr = losses::reconstruction_loss(&mut tape, b, p).unwrap();
        let ls = losses::correlation_loss(&mut tape, b, p).unwrap();
        let lc = losses::classification_loss(&mut tape, z, &labels).unwrap();
        let got = [lr, ls, lc].map(|v| tape.value(v).data()[0]);
        let want = [
            naive_reconstruction(&base, &pruned),
            naive_correlation(&base, &pruned),
            naive_cross_entropy(&logits, &labels),
        ];
        for i in 0..3 {
            worst[i] = worst[i].max((got[i] - want[i]).abs() / got[i].abs().max(want[i].abs()).max(1e-300));
        }
    }
    worst
}
