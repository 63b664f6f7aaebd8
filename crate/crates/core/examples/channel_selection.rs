//! Scores the channels of one convolution of a trained network and shows
//! which survive a 50% budget.

use chanprune::config::ExperimentConfig;
use chanprune::experiment::train_baseline;
use chanprune::pruner::{score_layer, select_channels, selection_split, LayerTargets};
use chanprune::PruneConfig;

fn main() -> chanprune::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.train.epochs = 5;
    let (data, net, _) = train_baseline(&cfg)?;
    let prune = PruneConfig { rate: 0.5, ..cfg.prune };
    let layer = net.conv_layers()[1];
    let index = selection_split(&data, &prune);
    let targets = LayerTargets::collect(&net, &net, layer, &data, &index, 64)?;
    let delta = score_layer(&net, &targets, &prune)?;
    let k = prune.budget(delta.len());
    let sel = select_channels(&delta, k)?;
    for (c, d) in delta.iter().enumerate() {
        println!("channel {c:2}  sensitivity {d:.3e}  {}", if sel.retained.contains(&c) { "kept" } else { "" });
    }
    Ok(())
}
