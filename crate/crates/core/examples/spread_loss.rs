//! Margin schedule and spread loss for a few activation vectors.

use capsnet::objectives::{spread_loss_value, MarginSchedule};

fn main() -> capsnet::Result<()> {
    let schedule = MarginSchedule::default();
    let margins: Vec<String> = (0..12).map(|e| format!("{:.2}", schedule.margin_at(e))).collect();
    println!("margin by epoch: {}", margins.join(" "));

    let cases: [(&str, [f64; 4]); 3] = [
        ("confident", [0.95, 0.05, 0.05, 0.05]),
        ("ambiguous", [0.55, 0.50, 0.10, 0.10]),
        ("wrong", [0.20, 0.80, 0.10, 0.10]),
    ];
    for (name, prob) in cases {
        let early = spread_loss_value(&prob, 0, schedule.margin_at(0))?;
        let late = spread_loss_value(&prob, 0, schedule.margin_at(10))?;
        println!("{name:>10}: loss {early:.4} at margin 0.2, {late:.4} at margin 0.9");
    }
    Ok(())
}
