//! Reverse-mode differentiation on the tape: the gradient of a squashed
//! vector's norm, checked against the closed form.

use capsnet::{Graph, Tensor};

fn main() -> capsnet::Result<()> {
    let graph = Graph::new();
    let x = graph.param(Tensor::new(&[1, 3], vec![3.0, 0.0, 4.0])?);
    // |squash(x)| = n / (1 + n) with n = |x|
    let y = x.squash(1)?;
    let loss = y.mul(y)?.sum();
    let grads = graph.backward(loss)?;

    let n: f64 = 5.0;
    let scale = 2.0 * n / (1.0 + n).powi(3) / n;
    println!("loss      {:.6}  (closed form {:.6})", loss.value().item(), (n / (1.0 + n)).powi(2));
    println!("gradient  {:?}", grads.wrt(x).data());
    println!("expected  {:?}", [3.0 * scale, 0.0, 4.0 * scale]);
    Ok(())
}
