//! Directional finite-difference checks of graph gradients.

use super::{Graph, Tensor, Var};
use crate::rng::RandomStream;

/// A graph-building closure over one parameter leaf per input.
pub type GraphOp<'a> = &'a dyn Fn(&mut Graph, &[Var]) -> Var;

/// Builds `sum(op(inputs) ⊙ R)` for a fixed projection `R`.
fn projected_loss(inputs: &[Tensor], proj: &Tensor, op: GraphOp<'_>) -> (Graph, Vec<Var>, Var) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = op(&mut g, &vars);
    let r = g.constant(proj.clone());
    let m = g
        .mul(out, r)
        .expect("projection matches the op output shape");
    let loss = g.sum(m);
    (g, vars, loss)
}

fn loss_at(inputs: &[Tensor], proj: &Tensor, op: GraphOp<'_>) -> f64 {
    let (g, _, l) = projected_loss(inputs, proj, op);
    g.value(l).data()[0]
}

fn shifted(inputs: &[Tensor], dir: &[Tensor], h: f64) -> Vec<Tensor> {
    inputs
        .iter()
        .zip(dir)
        .map(|(x, d)| x.zip_map(d, |a, b| a + h * b).expect("same shape"))
        .collect()
}

fn relative(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Worst relative error between the analytic directional derivative of a
/// random projection of `op` and its central difference with step `eps`,
/// over `probes` random directions.
pub fn directional_error(
    inputs: &[Tensor],
    op: GraphOp<'_>,
    probes: usize,
    eps: f64,
    rng: &mut RandomStream,
) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = op(&mut g, &vars);
    let proj = Tensor::randn(g.value(out).shape().to_vec(), 1.0, rng);

    let (g, vars, loss) = projected_loss(inputs, &proj, op);
    let grads = g.backward(loss).expect("scalar loss");
    let grads: Vec<Tensor> = vars
        .iter()
        .map(|&v| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.value(v).shape().to_vec()))
        })
        .collect();
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let dir: Vec<Tensor> = inputs
            .iter()
            .map(|x| Tensor::randn(x.shape().to_vec(), 1.0, rng))
            .collect();
        let analytic: f64 = grads
            .iter()
            .zip(&dir)
            .map(|(g, d)| {
                g.data()
                    .iter()
                    .zip(d.data())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .sum();
        let numeric = (loss_at(&shifted(inputs, &dir, eps), &proj, op)
            - loss_at(&shifted(inputs, &dir, -eps), &proj, op))
            / (2.0 * eps);
        worst = worst.max(relative(analytic, numeric));
    }
    worst
}
