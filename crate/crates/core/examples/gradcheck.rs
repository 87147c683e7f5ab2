//! Finite-difference check of the full network gradients for both routing
//! methods, with and without shortcuts.

use capsnet::tensor::gradcheck::GradcheckConfig;
use capsnet::verify::check_all_modes;

fn main() -> capsnet::Result<()> {
    let cfg = GradcheckConfig::default();
    for check in check_all_modes(&cfg, 0, false)? {
        let r = &check.report;
        println!(
            "{:<22} {:>2} samples  max rel error {:.2e}  {}",
            check.label(),
            r.samples.len(),
            r.max_rel_error(),
            if r.passed() { "ok" } else { "FAILED" }
        );
    }
    Ok(())
}
