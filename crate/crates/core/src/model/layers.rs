//! Message-passing layers with explicit backward passes.
//!
//! Every layer computes `y = LayerNorm(h + ELU(aggregate(h)))`. Gradients are
//! accumulated into a parameter struct of the same shape.

use ndarray::{Array1, Array2, Axis};

use super::GraphInput;

pub(crate) const LN_EPS: f64 = 1e-5;

#[inline]
pub(crate) fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

#[inline]
fn leaky_grad(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        slope
    }
}

#[inline]
fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

#[inline]
fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl LayerNorm {
    pub fn identity(width: usize) -> Self {
        Self {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LnCache {
    xhat: Array2<f64>,
    rstd: Vec<f64>,
}

pub(crate) fn layer_norm(ln: &LayerNorm, r: &Array2<f64>) -> (Array2<f64>, LnCache) {
    let c = r.ncols() as f64;
    let mut xhat = r.clone();
    let mut rstd = Vec::with_capacity(r.nrows());
    for mut row in xhat.rows_mut() {
        let mean = row.sum() / c;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
        let s = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * s);
        rstd.push(s);
    }
    let y = &xhat * &ln.gamma + &ln.beta;
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward(
    ln: &LayerNorm,
    cache: &LnCache,
    dy: &Array2<f64>,
    grad: &mut LayerNorm,
) -> Array2<f64> {
    grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
    grad.beta += &dy.sum_axis(Axis(0));
    let c = dy.ncols() as f64;
    let mut dx = dy * &ln.gamma;
    for ((mut row, xh), &s) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(&cache.rstd)
    {
        let m1 = row.sum() / c;
        let m2 = row.iter().zip(xh).map(|(d, x)| d * x).sum::<f64>() / c;
        for (d, x) in row.iter_mut().zip(xh) {
            *d = s * (*d - m1 - x * m2);
        }
    }
    dx
}

/// How the per-head aggregates become one layer output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadCombination {
    #[default]
    Average,
    ConcatProject,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatLayer {
    /// C x HC, applied to the neighbor (source) state.
    pub w_src: Array2<f64>,
    /// C x HC, applied to the target state.
    pub w_dst: Array2<f64>,
    /// E x HC, applied to the edge features.
    pub w_edge: Array2<f64>,
    /// H x C attention vectors.
    pub att: Array2<f64>,
    /// HC x C, only with [`HeadCombination::ConcatProject`].
    pub project: Option<Array2<f64>>,
    pub bias: Array1<f64>,
    pub norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub(crate) struct GatCache {
    xs: Array2<f64>,
    z: Array2<f64>,
    pub(crate) alpha: Array2<f64>,
    agg: Array2<f64>,
    o: Array2<f64>,
    ln: LnCache,
}

pub(crate) fn gat_forward(
    l: &GatLayer,
    heads: usize,
    slope: f64,
    h: &Array2<f64>,
    inp: &GraphInput,
) -> (Array2<f64>, GatCache) {
    let n = h.nrows();
    let c = l.bias.len();
    let hc = heads * c;
    let m = inp.src.len();
    let xs = h.dot(&l.w_src);
    let xd = h.dot(&l.w_dst);
    let ee = inp.edge_attr.dot(&l.w_edge);

    let mut z = Array2::<f64>::zeros((m, hc));
    let mut score = vec![0.0; m * heads];
    {
        let (xs_s, xd_s, ee_s) = (slice(&xs), slice(&xd), slice(&ee));
        let att = slice(&l.att);
        let z_s = z.as_slice_mut().expect("standard layout");
        for k in 0..m {
            let (j, i) = (inp.src[k], inp.dst[k]);
            let zr = &mut z_s[k * hc..(k + 1) * hc];
            let (a, b, e) = (
                &xs_s[j * hc..(j + 1) * hc],
                &xd_s[i * hc..(i + 1) * hc],
                &ee_s[k * hc..(k + 1) * hc],
            );
            for t in 0..hc {
                zr[t] = a[t] + b[t] + e[t];
            }
            for head in 0..heads {
                let r = head * c..(head + 1) * c;
                score[k * heads + head] = zr[r.clone()]
                    .iter()
                    .zip(&att[r])
                    .map(|(&v, &w)| w * leaky(v, slope))
                    .sum();
            }
        }
    }

    let mut alpha = Array2::<f64>::zeros((m, heads));
    {
        let al = alpha.as_slice_mut().expect("standard layout");
        for i in 0..n {
            let edges = inp.incoming(i);
            for head in 0..heads {
                let max = edges
                    .iter()
                    .map(|&k| score[k * heads + head])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for &k in edges {
                    let e = (score[k * heads + head] - max).exp();
                    al[k * heads + head] = e;
                    sum += e;
                }
                for &k in edges {
                    al[k * heads + head] /= sum;
                }
            }
        }
    }

    let mut agg = Array2::<f64>::zeros((n, hc));
    {
        let (xs_s, al) = (slice(&xs), slice(&alpha));
        let ag = agg.as_slice_mut().expect("standard layout");
        for i in 0..n {
            let out = &mut ag[i * hc..(i + 1) * hc];
            for &k in inp.incoming(i) {
                let j = inp.src[k];
                let src = &xs_s[j * hc..(j + 1) * hc];
                for head in 0..heads {
                    let a = al[k * heads + head];
                    for t in head * c..(head + 1) * c {
                        out[t] += a * src[t];
                    }
                }
            }
        }
    }

    let mut o = match &l.project {
        Some(p) => agg.dot(p),
        None => {
            let mut o = Array2::<f64>::zeros((n, c));
            for (mut orow, arow) in o.rows_mut().into_iter().zip(agg.rows()) {
                for head in 0..heads {
                    for cc in 0..c {
                        orow[cc] += arow[head * c + cc];
                    }
                }
            }
            o /= heads as f64;
            o
        }
    };
    o += &l.bias;
    let r = h + &o.mapv(elu);
    let (y, ln) = layer_norm(&l.norm, &r);
    (
        y,
        GatCache {
            xs,
            z,
            alpha,
            agg,
            o,
            ln,
        },
    )
}

pub(crate) fn gat_backward(
    l: &GatLayer,
    heads: usize,
    slope: f64,
    h: &Array2<f64>,
    inp: &GraphInput,
    cache: &GatCache,
    dy: &Array2<f64>,
    g: &mut GatLayer,
) -> Array2<f64> {
    let n = h.nrows();
    let c = l.bias.len();
    let hc = heads * c;
    let m = inp.src.len();

    let dr = layer_norm_backward(&l.norm, &cache.ln, dy, &mut g.norm);
    let mut d_o = dr.clone();
    d_o.zip_mut_with(&cache.o, |d, &x| *d *= elu_grad(x));
    g.bias += &d_o.sum_axis(Axis(0));

    let dagg = match (&l.project, g.project.as_mut()) {
        (Some(p), Some(gp)) => {
            *gp += &cache.agg.t().dot(&d_o);
            d_o.dot(&p.t())
        }
        _ => {
            let mut dagg = Array2::<f64>::zeros((n, hc));
            let inv = 1.0 / heads as f64;
            for (mut drow, orow) in dagg.rows_mut().into_iter().zip(d_o.rows()) {
                for head in 0..heads {
                    for cc in 0..c {
                        drow[head * c + cc] = orow[cc] * inv;
                    }
                }
            }
            dagg
        }
    };

    let mut dxs = Array2::<f64>::zeros((n, hc));
    let mut dxd = Array2::<f64>::zeros((n, hc));
    let mut dz = Array2::<f64>::zeros((m, hc));
    {
        let (xs_s, al, da, z_s, att) = (
            slice(&cache.xs),
            slice(&cache.alpha),
            slice(&dagg),
            slice(&cache.z),
            slice(&l.att),
        );
        let dxs_s = dxs.as_slice_mut().expect("standard layout");
        let mut dalpha = vec![0.0; m * heads];
        for i in 0..n {
            let up = &da[i * hc..(i + 1) * hc];
            for &k in inp.incoming(i) {
                let j = inp.src[k];
                for head in 0..heads {
                    let r = head * c..(head + 1) * c;
                    let a = al[k * heads + head];
                    let mut dot = 0.0;
                    for t in r {
                        dot += up[t] * xs_s[j * hc + t];
                        dxs_s[j * hc + t] += a * up[t];
                    }
                    dalpha[k * heads + head] = dot;
                }
            }
        }
        let mut dscore = vec![0.0; m * heads];
        for i in 0..n {
            let edges = inp.incoming(i);
            for head in 0..heads {
                let s: f64 = edges
                    .iter()
                    .map(|&k| al[k * heads + head] * dalpha[k * heads + head])
                    .sum();
                for &k in edges {
                    dscore[k * heads + head] =
                        al[k * heads + head] * (dalpha[k * heads + head] - s);
                }
            }
        }
        let gatt = g.att.as_slice_mut().expect("standard layout");
        let dz_s = dz.as_slice_mut().expect("standard layout");
        for k in 0..m {
            for head in 0..heads {
                let ds = dscore[k * heads + head];
                for cc in 0..c {
                    let t = head * c + cc;
                    let v = z_s[k * hc + t];
                    gatt[t] += ds * leaky(v, slope);
                    dz_s[k * hc + t] = ds * att[t] * leaky_grad(v, slope);
                }
            }
        }
        let dxd_s = dxd.as_slice_mut().expect("standard layout");
        for k in 0..m {
            let (j, i) = (inp.src[k], inp.dst[k]);
            for t in 0..hc {
                let d = dz_s[k * hc + t];
                dxs_s[j * hc + t] += d;
                dxd_s[i * hc + t] += d;
            }
        }
    }
    g.w_src += &h.t().dot(&dxs);
    g.w_dst += &h.t().dot(&dxd);
    g.w_edge += &inp.edge_attr.t().dot(&dz);
    dr + dxs.dot(&l.w_src.t()) + dxd.dot(&l.w_dst.t())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnLayer {
    /// C x C node transform.
    pub w: Array2<f64>,
    /// E x C edge-feature transform added to each message.
    pub w_edge: Array2<f64>,
    pub bias: Array1<f64>,
    pub norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub(crate) struct GcnCache {
    o: Array2<f64>,
    ln: LnCache,
}

/// Symmetric-normalized sum of messages `xw[src] + ee[edge]`, with degree
/// counted as one plus the number of real in-edges.
pub(crate) fn gcn_propagate(inp: &GraphInput, xw: &Array2<f64>, ee: &Array2<f64>) -> Array2<f64> {
    let n = xw.nrows();
    let c = xw.ncols();
    let mut agg = Array2::<f64>::zeros((n, c));
    for i in 0..n {
        for &k in inp.incoming(i) {
            let w = inp.gcn_norm(k);
            let j = inp.src[k];
            let mut row = agg.row_mut(i);
            row.scaled_add(w, &xw.row(j));
            row.scaled_add(w, &ee.row(k));
        }
    }
    agg
}

pub(crate) fn gcn_forward(
    l: &GcnLayer,
    h: &Array2<f64>,
    inp: &GraphInput,
) -> (Array2<f64>, GcnCache) {
    let xw = h.dot(&l.w);
    let ee = inp.edge_attr.dot(&l.w_edge);
    let mut o = gcn_propagate(inp, &xw, &ee);
    o += &l.bias;
    let r = h + &o.mapv(elu);
    let (y, ln) = layer_norm(&l.norm, &r);
    (y, GcnCache { o, ln })
}

pub(crate) fn gcn_backward(
    l: &GcnLayer,
    h: &Array2<f64>,
    inp: &GraphInput,
    cache: &GcnCache,
    dy: &Array2<f64>,
    g: &mut GcnLayer,
) -> Array2<f64> {
    let dr = layer_norm_backward(&l.norm, &cache.ln, dy, &mut g.norm);
    let mut d_o = dr.clone();
    d_o.zip_mut_with(&cache.o, |d, &x| *d *= elu_grad(x));
    g.bias += &d_o.sum_axis(Axis(0));
    let mut dxw = Array2::<f64>::zeros(d_o.raw_dim());
    let mut dee = Array2::<f64>::zeros((inp.src.len(), d_o.ncols()));
    for i in 0..h.nrows() {
        for &k in inp.incoming(i) {
            let w = inp.gcn_norm(k);
            let j = inp.src[k];
            dxw.row_mut(j).scaled_add(w, &d_o.row(i));
            dee.row_mut(k).scaled_add(w, &d_o.row(i));
        }
    }
    g.w += &h.t().dot(&dxw);
    g.w_edge += &inp.edge_attr.t().dot(&dee);
    dr + dxw.dot(&l.w.t())
}

fn slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}
