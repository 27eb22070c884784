//! Layers with hand-written backward passes over a flat parameter buffer.
//!
//! Every layer stores `Slot`s (offset and shape into the buffer). Forward
//! passes return the activations needed by the matching backward pass, and
//! backward passes accumulate into a gradient buffer of the same layout.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, Zip};
use serde::{Deserialize, Serialize};

const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn view<'a>(&self, p: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape(
            (self.rows, self.cols),
            &p[self.offset..self.offset + self.len()],
        )
        .expect("slot within buffer")
    }

    pub fn view_mut<'a>(&self, p: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
        ArrayViewMut2::from_shape(
            (self.rows, self.cols),
            &mut p[self.offset..self.offset + self.len()],
        )
        .expect("slot within buffer")
    }

    fn vector<'a>(&self, p: &'a [f64]) -> ArrayView1<'a, f64> {
        ArrayView1::from(&p[self.offset..self.offset + self.len()])
    }

    fn vector_mut<'a>(&self, p: &'a mut [f64]) -> ArrayViewMut1<'a, f64> {
        ArrayViewMut1::from(&mut p[self.offset..self.offset + self.len()])
    }
}

/// Name, shape and position of one parameter tensor in the flat buffer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    Normal(f64),
    Zeros,
    Ones,
    Values(&'static [f64]),
}

#[derive(Debug, Default)]
pub(crate) struct Builder {
    pub tensors: Vec<TensorInfo>,
    pub inits: Vec<Init>,
    pub len: usize,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> Slot {
        let (rows, cols) = match shape[..] {
            [n] => (1, n),
            [r, c] => (r, c),
            _ => unreachable!("tensors are vectors or matrices"),
        };
        let slot = Slot {
            offset: self.len,
            rows,
            cols,
        };
        self.len += rows * cols;
        self.tensors.push(TensorInfo {
            name,
            shape,
            offset: slot.offset,
        });
        self.inits.push(init);
        slot
    }

    pub fn matrix(&mut self, name: String, rows: usize, cols: usize, init: Init) -> Slot {
        self.push(name, vec![rows, cols], init)
    }

    pub fn vector(&mut self, name: String, n: usize, init: Init) -> Slot {
        self.push(name, vec![n], init)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    w: Slot,
    b: Slot,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, input: usize, output: usize) -> Self {
        Self::with_bias(b, name, input, output, Init::Zeros)
    }

    pub fn with_bias(b: &mut Builder, name: &str, input: usize, output: usize, bias: Init) -> Self {
        let std = (1.0 / input as f64).sqrt();
        Self {
            w: b.matrix(format!("{name}.weight"), input, output, Init::Normal(std)),
            b: b.vector(format!("{name}.bias"), output, bias),
        }
    }

    pub fn forward(&self, p: &[f64], x: &ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w.view(p));
        y += &self.b.vector(p);
        y
    }

    pub fn backward(
        &self,
        p: &[f64],
        g: &mut [f64],
        x: &ArrayView2<f64>,
        dy: &ArrayView2<f64>,
    ) -> Array2<f64> {
        {
            let mut gw = self.w.view_mut(g);
            gw += &x.t().dot(dy);
        }
        {
            let mut gb = self.b.vector_mut(g);
            gb += &dy.sum_axis(Axis(0));
        }
        dy.dot(&self.w.view(p).t())
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerNorm {
    gamma: Slot,
    beta: Slot,
}

pub(crate) struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, name: &str, d: usize) -> Self {
        Self {
            gamma: b.vector(format!("{name}.gamma"), d, Init::Ones),
            beta: b.vector(format!("{name}.beta"), d, Init::Zeros),
        }
    }

    pub fn forward(&self, p: &[f64], x: &ArrayView2<f64>) -> (Array2<f64>, LnCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row -= mean;
            let var = row.dot(&row) / d;
            *inv = 1.0 / (var + LN_EPS).sqrt();
            row *= *inv;
        }
        let mut y = &xhat * &self.gamma.vector(p);
        y += &self.beta.vector(p);
        (y, LnCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        p: &[f64],
        g: &mut [f64],
        cache: &LnCache,
        dy: &ArrayView2<f64>,
    ) -> Array2<f64> {
        {
            let mut gg = self.gamma.vector_mut(g);
            gg += &(dy * &cache.xhat).sum_axis(Axis(0));
        }
        {
            let mut gb = self.beta.vector_mut(g);
            gb += &dy.sum_axis(Axis(0));
        }
        let mut dx = dy * &self.gamma.vector(p);
        let d = dx.ncols() as f64;
        for ((mut row, xhat), inv) in dx
            .rows_mut()
            .into_iter()
            .zip(cache.xhat.rows())
            .zip(cache.inv_std.iter())
        {
            let mean = row.sum() / d;
            let proj = row.dot(&xhat) / d;
            Zip::from(&mut row)
                .and(&xhat)
                .for_each(|v, &h| *v = inv * (*v - mean - h * proj));
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[derive(Debug, Clone)]
pub(crate) struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

pub(crate) struct MlpCache {
    x: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

impl Mlp {
    pub fn new(b: &mut Builder, name: &str, d: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(b, &format!("{name}.fc1"), d, hidden),
            fc2: Linear::new(b, &format!("{name}.fc2"), hidden, d),
        }
    }

    pub fn forward(&self, p: &[f64], x: Array2<f64>) -> (Array2<f64>, MlpCache) {
        let pre = self.fc1.forward(p, &x.view());
        let act = pre.mapv(gelu);
        let y = self.fc2.forward(p, &act.view());
        (y, MlpCache { x, pre, act })
    }

    pub fn backward(
        &self,
        p: &[f64],
        g: &mut [f64],
        cache: &MlpCache,
        dy: &ArrayView2<f64>,
    ) -> Array2<f64> {
        let mut dact = self.fc2.backward(p, g, &cache.act.view(), dy);
        Zip::from(&mut dact)
            .and(&cache.pre)
            .for_each(|d, &x| *d *= gelu_grad(x));
        self.fc1.backward(p, g, &cache.x.view(), &dact.view())
    }
}

/// 2D rotary position embedding, applied in place.
///
/// Within each head the first half of the channels is rotated by
/// row-dependent phases and the second half by column-dependent phases.
/// Channels are rotated in adjacent pairs with frequencies `base^(-2j/half)`.
/// `sign = -1` applies the inverse (transpose) rotation.
pub fn rope_apply(
    x: &mut Array2<f64>,
    positions: &[(usize, usize)],
    heads: usize,
    base: f64,
    sign: f64,
) {
    let head_dim = x.ncols() / heads;
    let half = head_dim / 2;
    let freqs: Vec<f64> = (0..half / 2)
        .map(|j| base.powf(-((2 * j) as f64) / half as f64))
        .collect();
    for (mut row, &(r, c)) in x.rows_mut().into_iter().zip(positions) {
        for h in 0..heads {
            for (axis, coord) in [(0, r), (1, c)] {
                let start = h * head_dim + axis * half;
                for (j, f) in freqs.iter().enumerate() {
                    let (sn, cs) = (sign * coord as f64 * f).sin_cos();
                    let i = start + 2 * j;
                    let (a, b) = (row[i], row[i + 1]);
                    row[i] = a * cs - b * sn;
                    row[i + 1] = a * sn + b * cs;
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    rope_base: f64,
}

pub(crate) struct AttnCache {
    xq: Array2<f64>,
    xkv: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

impl Attention {
    pub fn new(b: &mut Builder, name: &str, d: usize, heads: usize, rope_base: f64) -> Self {
        Self {
            q: Linear::new(b, &format!("{name}.q"), d, d),
            k: Linear::new(b, &format!("{name}.k"), d, d),
            v: Linear::new(b, &format!("{name}.v"), d, d),
            o: Linear::new(b, &format!("{name}.o"), d, d),
            heads,
            rope_base,
        }
    }

    pub fn forward(
        &self,
        p: &[f64],
        xq: Array2<f64>,
        pos_q: &[(usize, usize)],
        xkv: Array2<f64>,
        pos_kv: &[(usize, usize)],
    ) -> (Array2<f64>, AttnCache) {
        let mut q = self.q.forward(p, &xq.view());
        let mut k = self.k.forward(p, &xkv.view());
        let v = self.v.forward(p, &xkv.view());
        rope_apply(&mut q, pos_q, self.heads, self.rope_base, 1.0);
        rope_apply(&mut k, pos_kv, self.heads, self.rope_base, 1.0);
        let dh = q.ncols() / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut ctx = Array2::zeros(q.raw_dim());
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut a = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            softmax_rows(&mut a);
            ctx.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
            probs.push(a);
        }
        let out = self.o.forward(p, &ctx.view());
        (
            out,
            AttnCache {
                xq,
                xkv,
                q,
                k,
                v,
                probs,
                ctx,
            },
        )
    }

    /// Returns gradients for the query-side and key/value-side inputs.
    pub fn backward(
        &self,
        p: &[f64],
        g: &mut [f64],
        c: &AttnCache,
        pos_q: &[(usize, usize)],
        pos_kv: &[(usize, usize)],
        dout: &ArrayView2<f64>,
    ) -> (Array2<f64>, Array2<f64>) {
        let dctx = self.o.backward(p, g, &c.ctx.view(), dout);
        let dh = c.q.ncols() / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Array2::zeros(c.q.raw_dim());
        let mut dk = Array2::zeros(c.k.raw_dim());
        let mut dv = Array2::zeros(c.v.raw_dim());
        for (h, a) in c.probs.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let dctx_h = dctx.slice(cols);
            let da = dctx_h.dot(&c.v.slice(cols).t());
            dv.slice_mut(cols).assign(&a.t().dot(&dctx_h));
            let mut ds = &da * a;
            let row_dot = ds.sum_axis(Axis(1));
            for ((mut row, prow), rd) in ds.rows_mut().into_iter().zip(a.rows()).zip(row_dot.iter())
            {
                Zip::from(&mut row)
                    .and(&prow)
                    .for_each(|v, &pa| *v -= pa * rd);
            }
            ds *= scale;
            dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
        }
        rope_apply(&mut dq, pos_q, self.heads, self.rope_base, -1.0);
        rope_apply(&mut dk, pos_kv, self.heads, self.rope_base, -1.0);
        let dxq = self.q.backward(p, g, &c.xq.view(), &dq.view());
        let mut dxkv = self.k.backward(p, g, &c.xkv.view(), &dk.view());
        dxkv += &self.v.backward(p, g, &c.xkv.view(), &dv.view());
        (dxq, dxkv)
    }
}
