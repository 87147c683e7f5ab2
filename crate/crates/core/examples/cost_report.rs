//! Prints parameter counts, voting-tensor volumes and routing FLOPs for the
//! shortcut and sequential variants of a preset.
//!
//! cargo run --example cost_report -- [baseline|expanded]

use capsnet::caps::ArchitectureSpec;
use capsnet::cost::CostReport;

fn main() -> capsnet::Result<()> {
    let preset = std::env::args().nth(1).unwrap_or_else(|| "baseline".into());
    let spec = ArchitectureSpec::preset(&preset)?;
    let shortcut = CostReport::new(&spec.clone().with_shortcut(true))?;
    let sequential = CostReport::new(&spec.with_shortcut(false))?;
    print!("{}", shortcut.render_table(Some(&sequential)));
    Ok(())
}
