//! Parses a layer string and prints the shape of every layer plus the
//! parameter breakdown.
//!
//! cargo run --example architecture_parse -- "Conv1: (64, 5, 2) - PrimaryCaps: (8, 1, 1) - Capsconv1: (16, 3, 2) - Classcaps: (10, 5, 1)"

use capsnet::caps::ArchitectureSpec;
use capsnet::cost::param_breakdown;

fn main() {
    let layers = std::env::args().nth(1).unwrap_or_else(|| ArchitectureSpec::baseline().layer_string());
    let spec = match ArchitectureSpec::from_layers(&layers) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("{e}");
            std::process::exit(e.exit_code());
        }
    };
    println!("{}", spec.layer_string());
    for shape in spec.shape_trace().expect("validated above") {
        println!("  {shape}");
    }
    let mut total = 0;
    for line in param_breakdown(&spec) {
        println!("{:>28} {:>8}", line.layer, line.count);
        total += line.count;
    }
    println!("{:>28} {:>8}", "total", total);
}
