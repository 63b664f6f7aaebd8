mod common;

use chanprune::format;
use chanprune::losses::{correlation_loss, reconstruction_loss};
use chanprune::pruner::{budget, channel_sensitivity, select_channels};
use chanprune::{ChannelMask, Network, Tape, Tensor};
use proptest::prelude::*;

fn tensor(shape: [usize; 3], seed: u64, std: f64) -> Tensor {
    Tensor::randn(shape, std, &mut common::rng(seed))
}

fn maps(shape: [usize; 4], seed: u64) -> (Tensor, Tensor) {
    let mut r = common::rng(seed);
    (Tensor::randn(shape, 1.0, &mut r), Tensor::randn(shape, 1.0, &mut r))
}

fn scaled(t: &Tensor, c: f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect()).unwrap()
}

fn grams(f: &Tensor) -> (Tensor, Tensor) {
    let mut tape = Tape::new();
    let v = tape.constant(f.clone());
    let gf = tape.gram_feature(v).unwrap();
    let gs = tape.gram_spatial(v).unwrap();
    (tape.value(gf).clone(), tape.value(gs).clone())
}

fn losses_of(base: &Tensor, pruned: &Tensor) -> (f64, f64) {
    let mut tape = Tape::new();
    let (b, p) = (tape.constant(base.clone()), tape.constant(pruned.clone()));
    let r = reconstruction_loss(&mut tape, b, p).unwrap();
    let s = correlation_loss(&mut tape, b, p).unwrap();
    (tape.value(r).data()[0], tape.value(s).data()[0])
}

/// Permutes axis 1 of a `[B, M, H, Z]` tensor.
fn permute_channels(t: &Tensor, perm: &[usize]) -> Tensor {
    let s = t.shape();
    let plane = s[2] * s[3];
    let mut out = t.clone();
    for b in 0..s[0] {
        for (dst, &src) in perm.iter().enumerate() {
            let from = (b * s[1] + src) * plane;
            let to = (b * s[1] + dst) * plane;
            out.data_mut()[to..to + plane].copy_from_slice(&t.data()[from..from + plane]);
        }
    }
    out
}

fn symmetric_psd(g: &Tensor, probe_seed: u64) -> bool {
    let s = g.shape();
    let (b, n) = (s[0], s[1]);
    let mut r = common::rng(probe_seed);
    (0..b).all(|e| {
        let m = &g.data()[e * n * n..(e + 1) * n * n];
        let sym = (0..n).all(|i| (0..n).all(|j| m[i * n + j] == m[j * n + i]));
        let x = Tensor::randn([n], 1.0, &mut r);
        let quad: f64 = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| x.data()[i] * m[i * n + j] * x.data()[j])
            .sum();
        let scale = m.iter().map(|v| v.abs()).sum::<f64>().max(1.0);
        sym && quad >= -1e-10 * scale
    })
}

fn small_net(widths: [usize; 4], seed: u64) -> Network {
    Network::reference([3, 8, 8], 3, widths, &mut common::rng(seed)).unwrap()
}

fn random_masks(net: &Network, seed: u64) -> Vec<ChannelMask> {
    use rand::Rng;
    let mut r = common::rng(seed);
    net.conv_layers()
        .into_iter()
        .map(|l| {
            let m = net.out_channels(l).unwrap();
            let mut keep: Vec<bool> = (0..m).map(|_| r.random_bool(0.5)).collect();
            let forced = r.random_range(0..m);
            keep[forced] = true;
            ChannelMask::new(l, keep).unwrap()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gram_matrices_are_symmetric_psd(b in 1usize..3, m in 1usize..6, n in 1usize..9, seed: u64) {
        let f = tensor([b, m, n], seed, 1.0);
        let (gf, gs) = grams(&f);
        prop_assert!(symmetric_psd(&gf, seed ^ 1));
        prop_assert!(symmetric_psd(&gs, seed ^ 2));
    }

    #[test]
    fn gram_scales_quadratically(m in 1usize..5, n in 1usize..7, c in -3.0f64..3.0, seed: u64) {
        let f = tensor([1, m, n], seed, 1.0);
        let (gf, gs) = grams(&f);
        let (gf_c, gs_c) = grams(&scaled(&f, c));
        prop_assert!(scaled(&gf, c * c).max_abs_diff(&gf_c) <= 1e-9 * (1.0 + gf_c.sum_squares().sqrt()));
        prop_assert!(scaled(&gs, c * c).max_abs_diff(&gs_c) <= 1e-9 * (1.0 + gs_c.sum_squares().sqrt()));
    }

    #[test]
    fn losses_scale_as_c2_and_c4(
        b in 1usize..3, m in 1usize..5, h in 1usize..5, z in 1usize..5,
        c in 0.1f64..4.0, seed: u64,
    ) {
        let (base, pruned) = maps([b, m, h, z], seed);
        let (lr, ls) = losses_of(&base, &pruned);
        let (lr_c, ls_c) = losses_of(&scaled(&base, c), &scaled(&pruned, c));
        prop_assert!(common::rel_close(lr_c, c.powi(2) * lr, 1e-10));
        prop_assert!((ls_c - c.powi(4) * ls).abs() <= 1e-10 * ls_c.abs().max(1e-12));
    }

    #[test]
    fn losses_are_channel_permutation_invariant(m in 1usize..6, h in 1usize..5, seed: u64) {
        use rand::seq::SliceRandom;
        let (base, pruned) = maps([2, m, h, h + 1], seed);
        let mut perm: Vec<usize> = (0..m).collect();
        perm.shuffle(&mut common::rng(seed ^ 7));
        let (lr, ls) = losses_of(&base, &pruned);
        let (lr_p, ls_p) = losses_of(&permute_channels(&base, &perm), &permute_channels(&pruned, &perm));
        prop_assert!(common::rel_close(lr, lr_p, 1e-12));
        prop_assert!((ls - ls_p).abs() <= 1e-10 * ls.abs().max(1e-12));
    }

    #[test]
    fn identical_maps_have_zero_loss(m in 1usize..5, h in 1usize..5, seed: u64) {
        let (base, _) = maps([2, m, h, h], seed);
        prop_assert_eq!(losses_of(&base, &base), (0.0, 0.0));
    }

    #[test]
    fn sensitivity_scales_by_c2_and_keeps_selection(
        m in 1usize..10, c_in in 1usize..4, scale in 0.01f64..50.0, seed: u64,
    ) {
        let mut r = common::rng(seed);
        let w = Tensor::randn([m, c_in, 3, 3], 1.0, &mut r);
        let g = Tensor::randn([m, c_in, 3, 3], 1.0, &mut r);
        let d = channel_sensitivity(&w, &g).unwrap();
        let d_c = channel_sensitivity(&w, &scaled(&g, scale)).unwrap();
        for (a, b) in d.iter().zip(&d_c) {
            prop_assert!((a * scale * scale - b).abs() <= 1e-9 * b.abs().max(1e-300));
        }
        prop_assert!(d.iter().all(|&v| v >= 0.0));
        let k = budget(0.5, m);
        prop_assert_eq!(select_channels(&d, k).unwrap().retained, select_channels(&d_c, k).unwrap().retained);
    }

    #[test]
    fn selection_is_a_sorted_top_k(delta in prop::collection::vec(0.0f64..10.0, 1..30), frac in 0.0f64..1.0) {
        let k = ((delta.len() as f64 * frac) as usize).max(1);
        let sel = select_channels(&delta, k).unwrap();
        prop_assert_eq!(sel.retained.len(), k);
        prop_assert!(sel.retained.windows(2).all(|w| w[0] < w[1]));
        let min_kept = sel.retained.iter().map(|&i| delta[i]).fold(f64::INFINITY, f64::min);
        for i in (0..delta.len()).filter(|i| !sel.retained.contains(i)) {
            prop_assert!(delta[i] <= min_kept);
        }
    }

    #[test]
    fn budget_stays_in_range(rate in 0.0001f64..0.9999, m in 1usize..512) {
        let k = budget(rate, m);
        prop_assert!((1..=m).contains(&k));
        prop_assert_eq!(k, (((1.0 - rate) * m as f64).round() as usize).max(1));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn materialized_logits_match_masked(w0 in 2usize..6, w1 in 2usize..6, w2 in 2usize..6, w3 in 2usize..6, seed: u64) {
        let net = small_net([w0, w1, w2, w3], seed);
        let mut masked = net.clone();
        for m in random_masks(&net, seed ^ 3) {
            masked.set_mask(&m).unwrap();
        }
        let physical = masked.materialize(&[]).unwrap();
        prop_assert!(physical.masks().is_empty());
        let x = Tensor::randn([4, 3, 8, 8], 1.0, &mut common::rng(seed ^ 5));
        let a = masked.forward(&x).unwrap();
        let b = physical.forward(&x).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-9);
    }

    #[test]
    fn model_bytes_round_trip(w0 in 1usize..5, w1 in 1usize..5, trained: bool, masked: bool, seed: u64) {
        let mut net = small_net([w0, w1, 3, 2], seed);
        net.set_trained(trained);
        if masked {
            for m in random_masks(&net, seed) {
                net.set_mask(&m).unwrap();
            }
        }
        let bytes = format::to_bytes(&net);
        let back = format::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &net);
        prop_assert_eq!(format::to_bytes(&back), bytes);
    }
}
