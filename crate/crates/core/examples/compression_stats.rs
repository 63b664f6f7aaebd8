//! Parameter and FLOP counts of the reference network when the first
//! channels of every convolution are kept at several pruning rates.

use chanprune::metrics::{layer_flops, CompressionStats};
use chanprune::pruner::budget;
use chanprune::{ChannelMask, Network};
use rand::SeedableRng;

fn main() -> chanprune::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let shape = [3, 12, 12];
    let net = Network::reference(shape, 3, Network::REFERENCE_WIDTHS, &mut rng)?;
    println!("per-layer FLOPs: {:?}", layer_flops(&net, shape)?);
    for rate in [0.3, 0.5, 0.7] {
        let masks = net
            .conv_layers()
            .into_iter()
            .map(|l| {
                let m = net.out_channels(l)?;
                ChannelMask::from_retained(l, m, &(0..budget(rate, m)).collect::<Vec<_>>())
            })
            .collect::<chanprune::Result<Vec<_>>>()?;
        let small = net.materialize(&masks)?;
        let s = CompressionStats::between(&net, &small)?;
        println!(
            "rate {rate}: params {} -> {} ({:.2}x), FLOPs {} -> {} ({:.2}x)",
            s.params_before, s.params_after, s.param_ratio, s.flops_before, s.flops_after, s.flops_ratio
        );
    }
    Ok(())
}
