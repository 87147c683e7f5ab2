//! Routes a small random voting tensor with attention and with fuzzy
//! clustering and prints the coefficients each method assigns.

use capsnet::caps::RoutingMethod;
use capsnet::routing::{route, FuzzyConfig, RouteConfig};
use capsnet::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> capsnet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // one example, three receiving capsules, four senders of 2x2 poses at one site
    let (b, m, s, d, p) = (1, 3, 4, 4, 1);
    let votes = Tensor::rand_uniform(&[b, m, s, d, p], -1.0, 1.0, &mut rng);
    let start = Tensor::rand_uniform(&[b, m, d, 1], -1.0, 1.0, &mut rng);

    for method in [RoutingMethod::Attention, RoutingMethod::Fuzzy] {
        let graph = Graph::inference();
        let cfg = RouteConfig {
            method,
            iterations: 2,
            fuzzy: FuzzyConfig::default(),
        };
        let g0 = graph.constant(start.clone());
        let state = route(graph.constant(votes.clone()), g0, g0, &cfg)?;
        let r = state.coefficients.value();
        println!("{method}: coefficients r[m, s] after {} iterations", cfg.iterations);
        for mi in 0..m {
            let row: Vec<String> = (0..s).map(|si| format!("{:.4}", r.at(&[0, mi, si, 0]))).collect();
            println!("  m={mi}  {}", row.join("  "));
        }
        if let Some(f) = state.memberships {
            let f = f.value();
            let col: Vec<String> = (0..s).map(|si| format!("{:.4}", (0..m).map(|mi| f.at(&[0, mi, si, 0])).sum::<f64>())).collect();
            println!("  membership sums over m: {}", col.join("  "));
        }
    }
    Ok(())
}
