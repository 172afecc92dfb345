//! Audits every autodiff op and the composite losses against central finite
//! differences.
//!
//! Run with `cargo run --release --example gradient_check`.

use iiht::tensor::gradcheck::TOLERANCE;
use iiht::verify::gradient_suite;

fn main() -> iiht::Result<()> {
    let start = std::time::Instant::now();
    let entries = gradient_suite(1)?;
    for e in &entries {
        println!(
            "{:<22} {:>4} instances  max rel error {:.2e}{}",
            e.name,
            e.instances,
            e.report.max_rel_error,
            if e.report.passed(TOLERANCE) { "" } else { "  FAIL" }
        );
    }
    let instances: usize = entries.iter().map(|e| e.instances).sum();
    println!("{instances} instances in {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
