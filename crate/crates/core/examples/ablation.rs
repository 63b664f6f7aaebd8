//! Prunes one baseline under each of the seven loss combinations (30%,
//! masked, no fine-tuning) and prints the error table.
//!
//!     cargo run --release --example ablation -- [seed]

use chanprune::config::ExperimentConfig;
use chanprune::experiment::{ablation_for_seed, ablation_table};
use chanprune::LossSet;

fn main() -> chanprune::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let result = ablation_for_seed(&ExperimentConfig::default(), seed, &LossSet::combinations())?;
    println!("baseline test error {:.2}%\n", 100.0 * result.baseline_test_error);
    print!("{}", ablation_table(&[result]).render());
    Ok(())
}
