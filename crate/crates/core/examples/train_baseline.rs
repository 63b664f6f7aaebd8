//! Trains the reference CNN on the synthetic benchmark and saves it.
//!
//!     cargo run --release --example train_baseline -- out/baseline.prnk

use chanprune::config::ExperimentConfig;
use chanprune::data::Split;
use chanprune::experiment::train_baseline;
use chanprune::format;
use chanprune::metrics::{count_flops, count_params, evaluate};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "baseline.prnk".into());
    let cfg = ExperimentConfig::default();
    let (data, net, log) = train_baseline(&cfg)?;
    for e in &log {
        println!("epoch {:2}  lr {:.4}  loss {:.4}  train err {:.2}%", e.epoch, e.lr, e.loss, 100.0 * e.train_error);
    }
    println!(
        "test error {:.2}%, {} params, {} FLOPs",
        100.0 * evaluate(&net, &data, Split::Test)?,
        count_params(&net),
        count_flops(&net, net.input_shape())?
    );
    if let Some(dir) = std::path::Path::new(&path).parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    format::save(&net, &path)?;
    println!("saved {path}");
    Ok(())
}
