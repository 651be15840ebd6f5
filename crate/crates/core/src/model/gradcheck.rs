//! Central finite-difference checks of the analytic backward pass.

use ndarray::Array2;
use rand::Rng;

use super::{GraphInput, InputEdge, Network};
use crate::features::{CATEGORICAL_COUNT, DENSE_WIDTH};
use crate::graph::EdgeType;

/// Worst agreement between analytic and numeric gradients within one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub max_abs_error: f64,
    /// `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// `‖analytic - numeric‖ / max(‖analytic‖, ‖numeric‖, floor)` over the tensor.
    pub group_rel_error: f64,
}

/// Loss as a function of the head output, returning the loss and its gradient.
pub type HeadLoss<'a> = dyn Fn(&Array2<f64>) -> (f64, Array2<f64>) + 'a;

/// Compare every parameter's analytic gradient against a central difference
/// with step `h`. Differences of magnitude below `floor` count as absolute.
pub fn check_gradients(
    net: &Network,
    inp: &GraphInput,
    loss: &HeadLoss<'_>,
    h: f64,
    floor: f64,
) -> Vec<TensorCheck> {
    let fwd = net.forward(inp).expect("finite forward");
    let (_, d_out) = loss(&fwd.output);
    let mut grads = net.zeros_like();
    net.backward(inp, &fwd, &d_out, &mut grads);
    let analytic: Vec<(String, Vec<f64>)> = grads
        .tensors()
        .into_iter()
        .map(|t| (t.name, t.data.to_vec()))
        .collect();

    let eval = |n: &Network| loss(&n.forward(inp).expect("finite forward").output).0;
    let mut probe = net.clone();
    let mut out = Vec::new();
    for (ti, (name, a)) in analytic.iter().enumerate() {
        let mut check = TensorCheck {
            name: name.clone(),
            entries: a.len(),
            max_abs_error: 0.0,
            max_rel_error: 0.0,
            group_rel_error: 0.0,
        };
        let (mut diff_sq, mut a_sq, mut n_sq) = (0.0, 0.0, 0.0);
        for (j, &aj) in a.iter().enumerate() {
            let orig = probe.tensors_mut()[ti][j];
            probe.tensors_mut()[ti][j] = orig + h;
            let up = eval(&probe);
            probe.tensors_mut()[ti][j] = orig - h;
            let down = eval(&probe);
            probe.tensors_mut()[ti][j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let abs = (aj - numeric).abs();
            let rel = abs / aj.abs().max(numeric.abs()).max(floor);
            check.max_abs_error = check.max_abs_error.max(abs);
            check.max_rel_error = check.max_rel_error.max(rel);
            diff_sq += abs * abs;
            a_sq += aj * aj;
            n_sq += numeric * numeric;
        }
        check.group_rel_error = diff_sq.sqrt() / a_sq.sqrt().max(n_sq.sqrt()).max(floor);
        out.push(check);
    }
    out
}

/// Random input graph with `nodes` nodes and roughly `2 * nodes` edges,
/// every node a target. Categorical indices stay below `sizes`.
pub fn random_input<R: Rng>(
    rng: &mut R,
    nodes: usize,
    sizes: [usize; CATEGORICAL_COUNT],
) -> GraphInput {
    let dense = Array2::from_shape_fn((nodes, DENSE_WIDTH), |_| rng.gen_range(-1.5..1.5));
    let cats = (0..nodes)
        .map(|_| {
            let mut c = [0; CATEGORICAL_COUNT];
            for (slot, size) in c.iter_mut().zip(sizes) {
                *slot = rng.gen_range(0..size);
            }
            c
        })
        .collect();
    let mut edges = Vec::new();
    for dst in 1..nodes {
        for _ in 0..rng.gen_range(1..=3) {
            edges.push(InputEdge {
                src: rng.gen_range(0..dst),
                dst,
                edge_type: EdgeType::ALL[rng.gen_range(0..3)],
                scaled_duration: rng.gen_range(-2.0..2.0),
            });
        }
    }
    GraphInput::new(dense, cats, &edges, (0..nodes).collect()).expect("valid random input")
}
