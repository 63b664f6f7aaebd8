//! Finite-difference check of every differentiable operation.

use chanprune::gradcheck;

fn main() -> chanprune::Result<()> {
    let checks = gradcheck::run_suite(gradcheck::CASES)?;
    for c in &checks {
        println!("{:<24} {:>3} cases  max rel err {:.2e}  {}", c.op, c.cases, c.max_rel_error, if c.passed { "ok" } else { "FAIL" });
    }
    if checks.iter().any(|c| !c.passed) {
        std::process::exit(1);
    }
    Ok(())
}
