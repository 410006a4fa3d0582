//! Finite-difference check of every tape op and of the full three-term
//! loss on a 16-token model.

use std::time::Instant;

use dualmim::gradcheck::run_suite;

fn main() -> dualmim::Result<()> {
    let start = Instant::now();
    let reports = run_suite(0)?;
    for r in &reports {
        println!("{r}");
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    println!("{} checks, {failed} failed, {:.1}s", reports.len(), start.elapsed().as_secs_f64());
    Ok(())
}
