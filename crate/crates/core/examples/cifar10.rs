//! Loads a capped CIFAR-10 subset from the standard binary batches and
//! prunes a briefly trained reference network on it.
//!
//!     cargo run --release --example cifar10 -- /path/to/cifar-10-batches-bin

use chanprune::data::{load_cifar10, Split};
use chanprune::metrics::evaluate;
use chanprune::training::{train, TrainConfig};
use chanprune::{prune_model, Network, PruneConfig};
use rand::SeedableRng;

fn main() -> chanprune::Result<()> {
    let Some(dir) = std::env::args().nth(1) else {
        eprintln!("usage: cifar10 <cifar-10-batches-bin directory>");
        std::process::exit(2);
    };
    let data = load_cifar10(&dir, Some(5000), Some(1000))?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut net = Network::reference(data.image_shape(), data.classes, Network::REFERENCE_WIDTHS, &mut rng)?;
    train(&mut net, &data, &TrainConfig { epochs: 10, ..TrainConfig::default() })?;
    println!("baseline test error {:.2}%", 100.0 * evaluate(&net, &data, Split::Test)?);
    let (_, report) = prune_model(&net, &PruneConfig::default(), &data)?;
    println!(
        "pruned test error {:.2}% at {:.2}x fewer FLOPs",
        100.0 * report.pruned_test_error,
        report.compression.flops_ratio
    );
    Ok(())
}
