//! Full pipeline with the default configuration: 30% of every convolution's
//! channels removed under the joint loss, then fine-tuned.

use chanprune::cli::render_report;
use chanprune::config::ExperimentConfig;
use chanprune::experiment::train_baseline;
use chanprune::prune_model;

fn main() -> chanprune::Result<()> {
    let cfg = ExperimentConfig::default();
    let (data, base, _) = train_baseline(&cfg)?;
    let (pruned, report) = prune_model(&base, &cfg.prune, &data)?;
    println!("{}", render_report(&report));
    for l in pruned.conv_layers() {
        println!("layer {l}: {} channels", pruned.out_channels(l)?);
    }
    Ok(())
}
