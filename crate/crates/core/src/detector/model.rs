//! Forward and backward passes of the detection head over a flat `f64`
//! parameter buffer.
//!
//! ```text
//! X (T x D) -> X Wp + bp -> + PE -> [MHA -> drop -> add&norm -> FFN -> drop -> add&norm] x blocks
//!           -> masked mean over valid rows -> W_out -> logits (2)
//! ```

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::RngCore;

use super::DetectorConfig;
use crate::augment::unit_draw;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Location of one parameter tensor inside the flat buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn view<'a>(&self, data: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.rows, self.cols), &data[self.offset..self.offset + self.len()])
            .expect("slot within buffer")
    }

    pub fn view_mut<'a>(&self, data: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
        ArrayViewMut2::from_shape((self.rows, self.cols), &mut data[self.offset..self.offset + self.len()])
            .expect("slot within buffer")
    }

    fn row<'a>(&self, data: &'a [f64]) -> ArrayView1<'a, f64> {
        debug_assert_eq!(self.rows, 1);
        ArrayView1::from(&data[self.offset..self.offset + self.cols])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinearSlots {
    pub w: Slot,
    pub b: Slot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSlots {
    pub q: LinearSlots,
    pub k: LinearSlots,
    pub v: LinearSlots,
    pub o: LinearSlots,
    pub ln1_gamma: Slot,
    pub ln1_beta: Slot,
    pub ff1: LinearSlots,
    pub ff2: LinearSlots,
    pub ln2_gamma: Slot,
    pub ln2_beta: Slot,
}

/// Offsets of every tensor, in serialization order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub projection: LinearSlots,
    pub blocks: Vec<BlockSlots>,
    pub output: LinearSlots,
    pub total: usize,
}

struct SlotAlloc(usize);

impl SlotAlloc {
    fn slot(&mut self, rows: usize, cols: usize) -> Slot {
        let s = Slot {
            offset: self.0,
            rows,
            cols,
        };
        self.0 += rows * cols;
        s
    }

    fn linear(&mut self, inp: usize, out: usize) -> LinearSlots {
        LinearSlots {
            w: self.slot(inp, out),
            b: self.slot(1, out),
        }
    }
}

impl Layout {
    pub fn new(cfg: &DetectorConfig) -> Self {
        let (m, f) = (cfg.model_dim, cfg.ffn_dim);
        let mut a = SlotAlloc(0);
        let projection = a.linear(cfg.input_dim, m);
        let blocks = (0..cfg.blocks)
            .map(|_| BlockSlots {
                q: a.linear(m, m),
                k: a.linear(m, m),
                v: a.linear(m, m),
                o: a.linear(m, m),
                ln1_gamma: a.slot(1, m),
                ln1_beta: a.slot(1, m),
                ff1: a.linear(m, f),
                ff2: a.linear(f, m),
                ln2_gamma: a.slot(1, m),
                ln2_beta: a.slot(1, m),
            })
            .collect();
        let output = a.linear(m, 2);
        Layout {
            projection,
            blocks,
            output,
            total: a.0,
        }
    }

    /// Parameters outside the input projection.
    pub fn head_param_count(&self) -> usize {
        self.total - self.projection.w.len() - self.projection.b.len()
    }

    /// Every weight matrix (as opposed to biases and norm parameters).
    pub(crate) fn weight_slots(&self) -> Vec<Slot> {
        let mut v = vec![self.projection.w];
        for b in &self.blocks {
            v.extend([b.q.w, b.k.w, b.v.w, b.o.w, b.ff1.w, b.ff2.w]);
        }
        v.push(self.output.w);
        v
    }

    pub(crate) fn gain_slots(&self) -> Vec<Slot> {
        self.blocks.iter().flat_map(|b| [b.ln1_gamma, b.ln2_gamma]).collect()
    }
}

/// Sinusoidal positional table, `max_len x dim`.
pub fn positional_table(max_len: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((max_len, dim), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

fn linear(x: &ArrayView2<f64>, slots: &LinearSlots, p: &[f64]) -> Array2<f64> {
    x.dot(&slots.w.view(p)) + &slots.b.row(p)
}

fn accumulate_linear(x: &ArrayView2<f64>, dy: &Array2<f64>, slots: &LinearSlots, grad: &mut [f64]) {
    let mut gw = slots.w.view_mut(grad);
    ndarray::linalg::general_mat_mul(1.0, &x.t(), dy, 1.0, &mut gw);
    let mut gb = slots.b.view_mut(grad);
    gb.row_mut(0).zip_mut_with(&dy.sum_axis(Axis(0)), |g, d| *g += d);
}

struct NormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(z: &Array2<f64>, gamma: ArrayView1<f64>, beta: ArrayView1<f64>) -> (Array2<f64>, NormCache) {
    let (t, m) = z.dim();
    let mut xhat = Array2::zeros((t, m));
    let mut inv_std = Array1::zeros(t);
    for (i, row) in z.rows().into_iter().enumerate() {
        let mean = row.sum() / m as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = is;
        xhat.row_mut(i).assign(&row.mapv(|v| (v - mean) * is));
    }
    let y = &xhat * &gamma + &beta;
    (y, NormCache { xhat, inv_std })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &NormCache,
    gamma_slot: Slot,
    beta_slot: Slot,
    params: &[f64],
    grad: &mut [f64],
) -> Array2<f64> {
    let gamma = gamma_slot.row(params);
    {
        let mut gg = gamma_slot.view_mut(grad);
        gg.row_mut(0).zip_mut_with(&(dy * &cache.xhat).sum_axis(Axis(0)), |g, d| *g += d);
    }
    {
        let mut gb = beta_slot.view_mut(grad);
        gb.row_mut(0).zip_mut_with(&dy.sum_axis(Axis(0)), |g, d| *g += d);
    }
    let dxhat = dy * &gamma;
    let m = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.dim());
    for i in 0..dy.nrows() {
        let dh = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let mean_dh = dh.sum() / m;
        let mean_dh_xh = dh.dot(&xh) / m;
        let is = cache.inv_std[i];
        dx.row_mut(i)
            .assign(&((&dh - mean_dh - &xh * mean_dh_xh) * is));
    }
    dx
}

fn dropout_mask(shape: (usize, usize), p: f64, rng: &mut dyn RngCore) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_simple_fn(shape, || if unit_draw(rng.next_u64()) < p { 0.0 } else { keep })
}

struct BlockCache {
    input: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    concat: Array2<f64>,
    drop_attn: Option<Array2<f64>>,
    norm1: NormCache,
    h1: Array2<f64>,
    ff_pre: Array2<f64>,
    ff_act: Array2<f64>,
    drop_ff: Option<Array2<f64>>,
    norm2: NormCache,
}

/// Intermediates needed by [`backward`].
pub struct ForwardCache {
    x: Array2<f64>,
    valid: Vec<bool>,
    n_valid: usize,
    blocks: Vec<BlockCache>,
    pooled: Array1<f64>,
}

/// Dropout configuration for a training-mode forward pass.
pub struct Dropout<'a> {
    pub p: f64,
    pub rng: &'a mut dyn RngCore,
}

/// Runs the head on one sequence. `padding[t] == true` marks row `t` as padding;
/// padded rows are excluded from attention keys and from the readout mean.
pub fn forward(
    cfg: &DetectorConfig,
    layout: &Layout,
    params: &[f64],
    pe: Option<&Array2<f64>>,
    x: ArrayView2<f64>,
    padding: Option<&[bool]>,
    mut dropout: Option<Dropout<'_>>,
) -> Result<(Array1<f64>, ForwardCache)> {
    let (t, d) = x.dim();
    if t == 0 {
        return Err(Error::Validation("empty input sequence".into()));
    }
    if d != cfg.input_dim {
        return Err(Error::Alignment(format!("input has dim {d}, detector expects {}", cfg.input_dim)));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite detector input".into()));
    }
    let valid: Vec<bool> = match padding {
        Some(p) if p.len() != t => {
            return Err(Error::Alignment(format!("padding mask has {} entries for {t} rows", p.len())))
        }
        Some(p) => p.iter().map(|&pad| !pad).collect(),
        None => vec![true; t],
    };
    let n_valid = valid.iter().filter(|&&v| v).count();
    if n_valid == 0 {
        return Err(Error::Validation("every row is padding".into()));
    }

    let m = cfg.model_dim;
    let dh = m / cfg.heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut h = linear(&x, &layout.projection, params);
    if let Some(pe) = pe {
        if t > pe.nrows() {
            return Err(Error::Config(format!(
                "sequence length {t} exceeds positional horizon {}",
                pe.nrows()
            )));
        }
        h += &pe.slice(s![..t, ..]);
    }

    let mut caches = Vec::with_capacity(layout.blocks.len());
    for b in &layout.blocks {
        let input = h;
        let q = linear(&input.view(), &b.q, params);
        let k = linear(&input.view(), &b.k, params);
        let v = linear(&input.view(), &b.v, params);
        let mut concat = Array2::zeros((t, m));
        let mut probs = Vec::with_capacity(cfg.heads);
        for head in 0..cfg.heads {
            let cols = s![.., head * dh..(head + 1) * dh];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            for mut row in scores.rows_mut() {
                let max = row
                    .iter()
                    .zip(&valid)
                    .filter(|(_, &ok)| ok)
                    .map(|(s, _)| *s)
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for (s, &ok) in row.iter_mut().zip(&valid) {
                    *s = if ok { (*s - max).exp() } else { 0.0 };
                    sum += *s;
                }
                row.mapv_inplace(|s| s / sum);
            }
            concat.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            probs.push(scores);
        }
        let mut attn = linear(&concat.view(), &b.o, params);
        let drop_attn = dropout.as_mut().filter(|d| d.p > 0.0).map(|d| dropout_mask((t, m), d.p, &mut *d.rng));
        if let Some(mask) = &drop_attn {
            attn *= mask;
        }
        let (h1, norm1) = layer_norm(&(&input + &attn), b.ln1_gamma.row(params), b.ln1_beta.row(params));

        let ff_pre = linear(&h1.view(), &b.ff1, params);
        let ff_act = ff_pre.mapv(|v| v.max(0.0));
        let mut ff = linear(&ff_act.view(), &b.ff2, params);
        let drop_ff = dropout.as_mut().filter(|d| d.p > 0.0).map(|d| dropout_mask((t, m), d.p, &mut *d.rng));
        if let Some(mask) = &drop_ff {
            ff *= mask;
        }
        let (h2, norm2) = layer_norm(&(&h1 + &ff), b.ln2_gamma.row(params), b.ln2_beta.row(params));
        caches.push(BlockCache {
            input,
            q,
            k,
            v,
            probs,
            concat,
            drop_attn,
            norm1,
            h1,
            ff_pre,
            ff_act,
            drop_ff,
            norm2,
        });
        h = h2;
    }

    let mut pooled = Array1::zeros(m);
    for (row, &ok) in h.rows().into_iter().zip(&valid) {
        if ok {
            pooled += &row;
        }
    }
    pooled /= n_valid as f64;
    let logits = pooled.dot(&layout.output.w.view(params)) + layout.output.b.row(params);

    Ok((
        logits,
        ForwardCache {
            x: x.to_owned(),
            valid,
            n_valid,
            blocks: caches,
            pooled,
        },
    ))
}

/// Accumulates `d loss / d params` into `grad` given `d loss / d logits`.
pub fn backward(
    cfg: &DetectorConfig,
    layout: &Layout,
    params: &[f64],
    cache: &ForwardCache,
    dlogits: ArrayView1<f64>,
    grad: &mut [f64],
) {
    let m = cfg.model_dim;
    let dh = m / cfg.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let t = cache.x.nrows();

    {
        let mut gw = layout.output.w.view_mut(grad);
        for i in 0..m {
            for j in 0..2 {
                gw[[i, j]] += cache.pooled[i] * dlogits[j];
            }
        }
        let mut gb = layout.output.b.view_mut(grad);
        gb[[0, 0]] += dlogits[0];
        gb[[0, 1]] += dlogits[1];
    }
    let dpooled = layout.output.w.view(params).dot(&dlogits) / cache.n_valid as f64;
    let mut dh_out = Array2::zeros((t, m));
    for (mut row, &ok) in dh_out.rows_mut().into_iter().zip(&cache.valid) {
        if ok {
            row.assign(&dpooled);
        }
    }

    for (b, c) in layout.blocks.iter().zip(&cache.blocks).rev() {
        let dz2 = layer_norm_backward(&dh_out, &c.norm2, b.ln2_gamma, b.ln2_beta, params, grad);
        let mut dff = dz2.clone();
        if let Some(mask) = &c.drop_ff {
            dff *= mask;
        }
        accumulate_linear(&c.ff_act.view(), &dff, &b.ff2, grad);
        let mut dpre = dff.dot(&b.ff2.w.view(params).t());
        dpre.zip_mut_with(&c.ff_pre, |d, &pre| {
            if pre <= 0.0 {
                *d = 0.0
            }
        });
        accumulate_linear(&c.h1.view(), &dpre, &b.ff1, grad);
        let dh1 = dz2 + dpre.dot(&b.ff1.w.view(params).t());

        let dz1 = layer_norm_backward(&dh1, &c.norm1, b.ln1_gamma, b.ln1_beta, params, grad);
        let mut dattn = dz1.clone();
        if let Some(mask) = &c.drop_attn {
            dattn *= mask;
        }
        accumulate_linear(&c.concat.view(), &dattn, &b.o, grad);
        let dconcat = dattn.dot(&b.o.w.view(params).t());

        let mut dq = Array2::zeros((t, m));
        let mut dk = Array2::zeros((t, m));
        let mut dv = Array2::zeros((t, m));
        for (head, probs) in c.probs.iter().enumerate() {
            let cols = s![.., head * dh..(head + 1) * dh];
            let dout = dconcat.slice(cols);
            let dprobs = dout.dot(&c.v.slice(cols).t());
            dv.slice_mut(cols).assign(&probs.t().dot(&dout));
            let mut dscores = Array2::zeros((t, t));
            for i in 0..t {
                let p = probs.row(i);
                let dp = dprobs.row(i);
                let inner = p.dot(&dp);
                dscores
                    .row_mut(i)
                    .assign(&(&p * &(&dp - inner) * scale));
            }
            dq.slice_mut(cols).assign(&dscores.dot(&c.k.slice(cols)));
            dk.slice_mut(cols).assign(&dscores.t().dot(&c.q.slice(cols)));
        }
        let input = c.input.view();
        accumulate_linear(&input, &dq, &b.q, grad);
        accumulate_linear(&input, &dk, &b.k, grad);
        accumulate_linear(&input, &dv, &b.v, grad);
        dh_out = dz1
            + dq.dot(&b.q.w.view(params).t())
            + dk.dot(&b.k.w.view(params).t())
            + dv.dot(&b.v.w.view(params).t());
    }

    accumulate_linear(&cache.x.view(), &dh_out, &layout.projection, grad);
}

/// Numerically stable `log(sum(exp(z)))`.
pub fn log_sum_exp(z: ArrayView1<f64>) -> f64 {
    let max = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax(z: ArrayView1<f64>) -> Array1<f64> {
    let lse = log_sum_exp(z);
    z.mapv(|v| (v - lse).exp())
}

/// Two-class cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: ArrayView1<f64>, target: usize) -> (f64, Array1<f64>) {
    let lse = log_sum_exp(logits);
    let loss = lse - logits[target];
    let mut d = logits.mapv(|v| (v - lse).exp());
    d[target] -= 1.0;
    (loss, d)
}
