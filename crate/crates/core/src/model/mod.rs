//! GATv2 hurdle model and the one-shot GCN baseline.
//!
//! A network embeds categorical inputs, projects `[dense ‖ embeddings]` to the
//! hidden width, applies a stack of message-passing layers and a linear head
//! on the target rows. Classifier and regressor are separate networks; the
//! regressor's head output is bounded by `5·tanh`.

mod adam;
mod checkpoint;
pub mod gradcheck;
mod layers;
mod loss;

use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{CATEGORICAL_COUNT, DENSE_WIDTH};
use crate::graph::{EdgeType, SubgraphView};

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT};
pub use layers::{GatLayer, GcnLayer, HeadCombination, LayerNorm};
pub use loss::{bce_with_logits, masked_mse, StepLoss};

use layers::{gat_backward, gat_forward, gcn_backward, gcn_forward, GatCache, GcnCache};

/// Edge input width: scaled duration, then one-hot Run, Dwell, Headway, self-loop.
pub const EDGE_FEATURES: usize = 5;

/// Bound of the regressor's log-space output.
pub const LOG_DELAY_BOUND: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GatBodyConfig {
    pub layers: usize,
    pub hidden_channels: usize,
    pub attention_heads: usize,
    pub leaky_relu_slope: f64,
    /// Embedding width per categorical input, in slot order.
    pub embedding_dims: [usize; CATEGORICAL_COUNT],
    pub head_combination: HeadCombination,
}

impl Default for GatBodyConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            hidden_channels: 32,
            attention_heads: 32,
            leaky_relu_slope: 0.2,
            embedding_dims: [4; CATEGORICAL_COUNT],
            head_combination: HeadCombination::Average,
        }
    }
}

impl GatBodyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden_channels == 0 || self.attention_heads == 0 {
            return Err(Error::Config(
                "layers, hidden_channels and attention_heads must be >= 1".into(),
            ));
        }
        if !(self.leaky_relu_slope.is_finite() && self.leaky_relu_slope >= 0.0) {
            return Err(Error::Config(
                "leaky_relu_slope must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Gatv2,
    Gcn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Classifier,
    Regressor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub stage: Stage,
    pub body: GatBodyConfig,
    /// Head width: 1 for GATv2 stages, k for the one-shot GCN.
    pub outputs: usize,
    pub categorical_sizes: [usize; CATEGORICAL_COUNT],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Array2::zeros((input, output)),
            b: Array1::zeros(output),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Gat(GatLayer),
    Gcn(GcnLayer),
}

#[derive(Debug, Default)]
struct CallCounter(AtomicUsize);

impl Clone for CallCounter {
    fn clone(&self) -> Self {
        Self(AtomicUsize::new(self.0.load(Ordering::Relaxed)))
    }
}

/// Inputs of one forward pass. Self-loops are appended after the real edges.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphInput {
    pub dense: Array2<f64>,
    pub cats: Vec<[usize; CATEGORICAL_COUNT]>,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub edge_attr: Array2<f64>,
    /// `None` marks a self-loop.
    pub edge_type: Vec<Option<EdgeType>>,
    pub targets: Vec<usize>,
    in_ptr: Vec<usize>,
    in_idx: Vec<usize>,
    degree: Vec<f64>,
}

/// One real edge handed to [`GraphInput::new`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputEdge {
    pub src: usize,
    pub dst: usize,
    pub edge_type: EdgeType,
    pub scaled_duration: f64,
}

impl GraphInput {
    pub fn new(
        dense: Array2<f64>,
        cats: Vec<[usize; CATEGORICAL_COUNT]>,
        edges: &[InputEdge],
        targets: Vec<usize>,
    ) -> Result<Self> {
        let n = dense.nrows();
        if dense.ncols() != DENSE_WIDTH || cats.len() != n {
            return Err(Error::Graph(format!(
                "input shape mismatch: dense {:?}, {} categorical rows",
                dense.dim(),
                cats.len()
            )));
        }
        if let Some(e) = edges.iter().find(|e| e.src >= n || e.dst >= n) {
            return Err(Error::Graph(format!(
                "edge {} -> {} outside {n} nodes",
                e.src, e.dst
            )));
        }
        if let Some(t) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::Graph(format!("target {t} outside {n} nodes")));
        }
        let m = edges.len() + n;
        let mut src = Vec::with_capacity(m);
        let mut dst = Vec::with_capacity(m);
        let mut edge_type = Vec::with_capacity(m);
        let mut edge_attr = Array2::zeros((m, EDGE_FEATURES));
        for (k, e) in edges.iter().enumerate() {
            src.push(e.src);
            dst.push(e.dst);
            edge_type.push(Some(e.edge_type));
            edge_attr[[k, 0]] = e.scaled_duration;
            edge_attr[[k, 1 + e.edge_type.index()]] = 1.0;
        }
        for v in 0..n {
            edge_attr[[src.len(), EDGE_FEATURES - 1]] = 1.0;
            src.push(v);
            dst.push(v);
            edge_type.push(None);
        }
        let mut degree = vec![1.0; n];
        for e in edges {
            degree[e.dst] += 1.0;
        }
        let mut in_idx: Vec<usize> = (0..m).collect();
        in_idx.sort_by_key(|&k| (dst[k], k));
        let mut in_ptr = vec![0; n + 1];
        for &d in &dst {
            in_ptr[d + 1] += 1;
        }
        for i in 0..n {
            in_ptr[i + 1] += in_ptr[i];
        }
        Ok(Self {
            dense,
            cats,
            src,
            dst,
            edge_attr,
            edge_type,
            targets,
            in_ptr,
            in_idx,
            degree,
        })
    }

    /// Model input for a subgraph view; targets are the view's anchors.
    pub fn from_view(view: &SubgraphView) -> Result<Self> {
        let edges: Vec<InputEdge> = view
            .edges
            .iter()
            .map(|e| InputEdge {
                src: e.src,
                dst: e.dst,
                edge_type: e.edge_type,
                scaled_duration: e.scaled_duration,
            })
            .collect();
        Self::new(
            view.dense.clone(),
            view.cats.clone(),
            &edges,
            view.anchors.clone(),
        )
    }

    pub fn node_count(&self) -> usize {
        self.dense.nrows()
    }

    pub fn real_edge_count(&self) -> usize {
        self.src.len() - self.node_count()
    }

    /// Edge indices entering node `i`, self-loop included.
    pub fn incoming(&self, i: usize) -> &[usize] {
        &self.in_idx[self.in_ptr[i]..self.in_ptr[i + 1]]
    }

    pub(crate) fn gcn_norm(&self, k: usize) -> f64 {
        1.0 / (self.degree[self.src[k]] * self.degree[self.dst[k]]).sqrt()
    }
}

#[derive(Debug, Clone)]
enum LayerCache {
    Gat(GatCache),
    Gcn(GcnCache),
}

/// Head output plus everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Targets x outputs: logits for a classifier, pre-activations for a regressor.
    pub output: Array2<f64>,
    x0: Array2<f64>,
    hs: Vec<Array2<f64>>,
    caches: Vec<LayerCache>,
}

impl Forward {
    /// Normalized attention per GAT layer, edges x heads.
    pub fn attention(&self) -> Vec<&Array2<f64>> {
        self.caches
            .iter()
            .filter_map(|c| match c {
                LayerCache::Gat(g) => Some(&g.alpha),
                LayerCache::Gcn(_) => None,
            })
            .collect()
    }

    /// Final node embeddings (all nodes).
    pub fn embeddings(&self) -> &Array2<f64> {
        self.hs.last().expect("at least the input projection")
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    pub spec: ModelSpec,
    pub embeddings: Vec<Array2<f64>>,
    pub input: Linear,
    pub layers: Vec<Layer>,
    pub head: Linear,
    calls: CallCounter,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.embeddings == other.embeddings
            && self.input == other.input
            && self.layers == other.layers
            && self.head == other.head
    }
}

/// A parameter array as stored in checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

impl Network {
    /// All-zero parameters of the right shapes (layer-norm gains included).
    pub fn zeros(spec: ModelSpec) -> Result<Self> {
        spec.body.validate()?;
        if spec.outputs == 0 {
            return Err(Error::Config("model needs at least one output".into()));
        }
        let b = &spec.body;
        let c = b.hidden_channels;
        let hc = c * b.attention_heads;
        let embeddings = spec
            .categorical_sizes
            .iter()
            .zip(&b.embedding_dims)
            .map(|(&n, &d)| Array2::zeros((n, d)))
            .collect();
        let input_width = DENSE_WIDTH + b.embedding_dims.iter().sum::<usize>();
        let layers = (0..b.layers)
            .map(|_| match spec.architecture {
                Architecture::Gatv2 => Layer::Gat(GatLayer {
                    w_src: Array2::zeros((c, hc)),
                    w_dst: Array2::zeros((c, hc)),
                    w_edge: Array2::zeros((EDGE_FEATURES, hc)),
                    att: Array2::zeros((b.attention_heads, c)),
                    project: (b.head_combination == HeadCombination::ConcatProject)
                        .then(|| Array2::zeros((hc, c))),
                    bias: Array1::zeros(c),
                    norm: LayerNorm {
                        gamma: Array1::zeros(c),
                        beta: Array1::zeros(c),
                    },
                }),
                Architecture::Gcn => Layer::Gcn(GcnLayer {
                    w: Array2::zeros((c, c)),
                    w_edge: Array2::zeros((EDGE_FEATURES, c)),
                    bias: Array1::zeros(c),
                    norm: LayerNorm {
                        gamma: Array1::zeros(c),
                        beta: Array1::zeros(c),
                    },
                }),
            })
            .collect();
        Ok(Self {
            input: Linear::zeros(input_width, c),
            head: Linear::zeros(c, spec.outputs),
            spec,
            embeddings,
            layers,
            calls: CallCounter::default(),
        })
    }

    /// Seeded initialization: weights uniform in ±1/sqrt(fan_in), biases zero,
    /// identity layer norms.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |a: &mut Array2<f64>, fan_in: usize| {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            a.mapv_inplace(|_| rng.gen_range(-bound..bound));
        };
        for e in &mut net.embeddings {
            fill(e, 1);
        }
        let fan = net.input.w.nrows();
        fill(&mut net.input.w, fan);
        for layer in &mut net.layers {
            match layer {
                Layer::Gat(l) => {
                    let c = l.w_src.nrows();
                    fill(&mut l.w_src, c);
                    fill(&mut l.w_dst, c);
                    fill(&mut l.w_edge, EDGE_FEATURES);
                    fill(&mut l.att, c);
                    if let Some(p) = &mut l.project {
                        let fan = p.nrows();
                        fill(p, fan);
                    }
                    l.norm = LayerNorm::identity(c);
                }
                Layer::Gcn(l) => {
                    let c = l.w.nrows();
                    fill(&mut l.w, c);
                    fill(&mut l.w_edge, EDGE_FEATURES);
                    l.norm = LayerNorm::identity(c);
                }
            }
        }
        let fan = net.head.w.nrows();
        fill(&mut net.head.w, fan);
        Ok(net)
    }

    /// Same shapes, all zeros; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.spec.clone()).expect("spec already validated")
    }

    /// Number of forward passes run so far.
    pub fn forward_calls(&self) -> usize {
        self.calls.0.load(Ordering::Relaxed)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn forward(&self, inp: &GraphInput) -> Result<Forward> {
        self.calls.0.fetch_add(1, Ordering::Relaxed);
        let n = inp.node_count();
        let widths: usize = self.embeddings.iter().map(|e| e.ncols()).sum();
        let mut x0 = Array2::<f64>::zeros((n, DENSE_WIDTH + widths));
        x0.slice_mut(s![.., ..DENSE_WIDTH]).assign(&inp.dense);
        for (v, cats) in inp.cats.iter().enumerate() {
            let mut col = DENSE_WIDTH;
            for (slot, table) in self.embeddings.iter().enumerate() {
                let idx = cats[slot];
                if idx >= table.nrows() {
                    return Err(Error::Numeric {
                        layer: 0,
                        message: format!("category {idx} out of range for slot {slot}"),
                    });
                }
                x0.slice_mut(s![v, col..col + table.ncols()])
                    .assign(&table.row(idx));
                col += table.ncols();
            }
        }
        let h0 = x0.dot(&self.input.w) + &self.input.b;
        check_finite(&h0, 0)?;
        let mut hs = vec![h0];
        let mut caches = Vec::with_capacity(self.layers.len());
        let body = &self.spec.body;
        for (li, layer) in self.layers.iter().enumerate() {
            let h = hs.last().expect("non-empty");
            let (y, cache) = match layer {
                Layer::Gat(l) => {
                    let (y, c) =
                        gat_forward(l, body.attention_heads, body.leaky_relu_slope, h, inp);
                    (y, LayerCache::Gat(c))
                }
                Layer::Gcn(l) => {
                    let (y, c) = gcn_forward(l, h, inp);
                    (y, LayerCache::Gcn(c))
                }
            };
            check_finite(&y, li + 1)?;
            hs.push(y);
            caches.push(cache);
        }
        let last = hs.last().expect("non-empty");
        let rows = last.select(Axis(0), &inp.targets);
        let output = rows.dot(&self.head.w) + &self.head.b;
        check_finite(&output, self.layers.len() + 1)?;
        Ok(Forward {
            output,
            x0,
            hs,
            caches,
        })
    }

    /// Accumulate parameter gradients of a loss whose gradient w.r.t. the head
    /// output is `d_out` into `grads`.
    pub fn backward(
        &self,
        inp: &GraphInput,
        fwd: &Forward,
        d_out: &Array2<f64>,
        grads: &mut Network,
    ) {
        let last = fwd.hs.last().expect("non-empty");
        let rows = last.select(Axis(0), &inp.targets);
        grads.head.w += &rows.t().dot(d_out);
        grads.head.b += &d_out.sum_axis(Axis(0));
        let d_rows = d_out.dot(&self.head.w.t());
        let mut dh = Array2::<f64>::zeros(last.raw_dim());
        for (r, &t) in inp.targets.iter().enumerate() {
            let mut row = dh.row_mut(t);
            row += &d_rows.row(r);
        }
        let body = &self.spec.body;
        for li in (0..self.layers.len()).rev() {
            let h = &fwd.hs[li];
            dh = match (&self.layers[li], &fwd.caches[li], &mut grads.layers[li]) {
                (Layer::Gat(l), LayerCache::Gat(c), Layer::Gat(g)) => gat_backward(
                    l,
                    body.attention_heads,
                    body.leaky_relu_slope,
                    h,
                    inp,
                    c,
                    &dh,
                    g,
                ),
                (Layer::Gcn(l), LayerCache::Gcn(c), Layer::Gcn(g)) => {
                    gcn_backward(l, h, inp, c, &dh, g)
                }
                _ => unreachable!("gradient accumulator shaped like the network"),
            };
        }
        grads.input.w += &fwd.x0.t().dot(&dh);
        grads.input.b += &dh.sum_axis(Axis(0));
        let dx0 = dh.dot(&self.input.w.t());
        for (v, cats) in inp.cats.iter().enumerate() {
            let mut col = DENSE_WIDTH;
            for (slot, table) in grads.embeddings.iter_mut().enumerate() {
                let w = table.ncols();
                let mut row = table.row_mut(cats[slot]);
                row += &dx0.slice(s![v, col..col + w]);
                col += w;
            }
        }
    }

    pub fn tensors(&self) -> Vec<NamedTensor<'_>> {
        fn t2(name: String, a: &Array2<f64>) -> NamedTensor<'_> {
            NamedTensor {
                name,
                shape: a.shape().to_vec(),
                data: a.as_slice().expect("standard layout"),
            }
        }
        fn t1(name: String, a: &Array1<f64>) -> NamedTensor<'_> {
            NamedTensor {
                name,
                shape: vec![a.len()],
                data: a.as_slice().expect("standard layout"),
            }
        }
        let mut out = Vec::new();
        for (i, e) in self.embeddings.iter().enumerate() {
            out.push(t2(format!("embed.{i}"), e));
        }
        out.push(t2("input.w".into(), &self.input.w));
        out.push(t1("input.b".into(), &self.input.b));
        for (li, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Gat(l) => {
                    out.push(t2(format!("layer{li}.w_src"), &l.w_src));
                    out.push(t2(format!("layer{li}.w_dst"), &l.w_dst));
                    out.push(t2(format!("layer{li}.w_edge"), &l.w_edge));
                    out.push(t2(format!("layer{li}.att"), &l.att));
                    if let Some(p) = &l.project {
                        out.push(t2(format!("layer{li}.project"), p));
                    }
                    out.push(t1(format!("layer{li}.bias"), &l.bias));
                    out.push(t1(format!("layer{li}.ln_gamma"), &l.norm.gamma));
                    out.push(t1(format!("layer{li}.ln_beta"), &l.norm.beta));
                }
                Layer::Gcn(l) => {
                    out.push(t2(format!("layer{li}.w"), &l.w));
                    out.push(t2(format!("layer{li}.w_edge"), &l.w_edge));
                    out.push(t1(format!("layer{li}.bias"), &l.bias));
                    out.push(t1(format!("layer{li}.ln_gamma"), &l.norm.gamma));
                    out.push(t1(format!("layer{li}.ln_beta"), &l.norm.beta));
                }
            }
        }
        out.push(t2("head.w".into(), &self.head.w));
        out.push(t1("head.b".into(), &self.head.b));
        out
    }

    /// Mutable views in the same order as [`Network::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        fn m2(a: &mut Array2<f64>) -> &mut [f64] {
            a.as_slice_mut().expect("standard layout")
        }
        fn m1(a: &mut Array1<f64>) -> &mut [f64] {
            a.as_slice_mut().expect("standard layout")
        }
        let mut out: Vec<&mut [f64]> = Vec::new();
        for e in &mut self.embeddings {
            out.push(m2(e));
        }
        out.push(m2(&mut self.input.w));
        out.push(m1(&mut self.input.b));
        for layer in &mut self.layers {
            match layer {
                Layer::Gat(l) => {
                    out.push(m2(&mut l.w_src));
                    out.push(m2(&mut l.w_dst));
                    out.push(m2(&mut l.w_edge));
                    out.push(m2(&mut l.att));
                    if let Some(p) = &mut l.project {
                        out.push(m2(p));
                    }
                    out.push(m1(&mut l.bias));
                    out.push(m1(&mut l.norm.gamma));
                    out.push(m1(&mut l.norm.beta));
                }
                Layer::Gcn(l) => {
                    out.push(m2(&mut l.w));
                    out.push(m2(&mut l.w_edge));
                    out.push(m1(&mut l.bias));
                    out.push(m1(&mut l.norm.gamma));
                    out.push(m1(&mut l.norm.beta));
                }
            }
        }
        out.push(m2(&mut self.head.w));
        out.push(m1(&mut self.head.b));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

fn check_finite(a: &Array2<f64>, layer: usize) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric {
            layer,
            message: "non-finite activation".into(),
        })
    }
}

/// Log-space regressor output.
pub fn bounded_log_delay(pre_activation: f64) -> f64 {
    LOG_DELAY_BOUND * pre_activation.tanh()
}

/// Real-scale delay in minutes from a log-space output.
pub fn decode_delay(log_delay: f64) -> f64 {
    log_delay.max(0.0).exp_m1()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gate regressor outputs by classifier probability; both arrays are
/// targets x outputs of the respective heads.
pub fn hurdle_combine(
    logits: &Array2<f64>,
    regressor_pre: &Array2<f64>,
    threshold: f64,
) -> Array2<f64> {
    let mut out = regressor_pre.mapv(|p| decode_delay(bounded_log_delay(p)));
    out.zip_mut_with(logits, |o, &l| {
        if sigmoid(l) < threshold {
            *o = 0.0;
        }
    });
    out
}

/// Delay minutes per target (and per output head).
pub fn hurdle_predict(
    classifier: &Network,
    regressor: &Network,
    inp: &GraphInput,
    threshold: f64,
) -> Result<Array2<f64>> {
    let logits = classifier.forward(inp)?.output;
    let pre = regressor.forward(inp)?.output;
    Ok(hurdle_combine(&logits, &pre, threshold))
}
