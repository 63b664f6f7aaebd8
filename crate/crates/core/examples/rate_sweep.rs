//! Test error and compression at 30%, 50% and 70% pruning for one seed.

use chanprune::config::ExperimentConfig;
use chanprune::experiment::{rate_sweep_for_seed, rate_table};

fn main() -> chanprune::Result<()> {
    let sweep = rate_sweep_for_seed(&ExperimentConfig::default(), 0, &[0.3, 0.5, 0.7])?;
    println!("baseline test error {:.2}%\n", 100.0 * sweep.baseline_test_error);
    print!("{}", rate_table(&[sweep]).render());
    Ok(())
}
