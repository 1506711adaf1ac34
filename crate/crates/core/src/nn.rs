//! Flat parameter storage and layers with hand-written backward passes.
//!
//! Every layer is generic over [`Real`] so the same code trains in `f32` and
//! is gradient-checked in `f64`. Layers hold [`ParamId`]s into a shared
//! [`ParamLayout`]; values and gradients live in [`ParamBuf`]s with that
//! layout.

use std::fmt::Debug;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

/// Scalar type usable by the layers.
pub trait Real:
    Float + FromPrimitive + LinalgScalar + ScalarOperand + Debug + Default + Send + Sync + std::iter::Sum + std::ops::AddAssign + 'static
{
    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}

fn c<F: Real>(x: f64) -> F {
    F::from_f64_lossy(x)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub init: Init,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered table of named parameter tensors packed into one flat vector.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamLayout {
    specs: Vec<ParamSpec>,
    len: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        let spec = ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.len,
            init,
        };
        self.len += spec.len();
        self.specs.push(spec);
        ParamId(self.specs.len() - 1)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    /// Total number of scalars.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Number of scalars in tensors whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.specs
            .iter()
            .filter(|s| s.name.starts_with(prefix))
            .map(|s| s.len())
            .sum()
    }
}

/// Values (or gradients) for every tensor of a layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBuf<F> {
    layout: Arc<ParamLayout>,
    pub data: Vec<F>,
}

impl<F: Real> ParamBuf<F> {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let n = layout.len();
        Self {
            layout,
            data: vec![F::zero(); n],
        }
    }

    /// Draws initial values following each tensor's [`Init`], in layout order.
    pub fn init<R: Rng + ?Sized>(layout: Arc<ParamLayout>, rng: &mut R) -> Self {
        let mut buf = Self::zeros(layout);
        let specs = buf.layout.specs.clone();
        for s in &specs {
            let slot = &mut buf.data[s.offset..s.offset + s.len()];
            match s.init {
                Init::Zeros => slot.fill(F::zero()),
                Init::Ones => slot.fill(F::one()),
                Init::Uniform(b) => {
                    let u = Uniform::new_inclusive(-b, b).expect("finite bound");
                    for x in slot.iter_mut() {
                        *x = c(u.sample(rng));
                    }
                }
            }
        }
        buf
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn slice(&self, id: ParamId) -> &[F] {
        let s = self.layout.spec(id);
        &self.data[s.offset..s.offset + s.len()]
    }

    pub fn slice_mut(&mut self, id: ParamId) -> &mut [F] {
        let s = self.layout.spec(id);
        let (o, n) = (s.offset, s.len());
        &mut self.data[o..o + n]
    }

    pub fn mat(&self, id: ParamId) -> ArrayView2<'_, F> {
        let s = self.layout.spec(id);
        ArrayView2::from_shape((s.shape[0], s.shape[1]), self.slice(id)).expect("2-d parameter")
    }

    pub fn mat_mut(&mut self, id: ParamId) -> ArrayViewMut2<'_, F> {
        let shape = self.layout.spec(id).shape.clone();
        ArrayViewMut2::from_shape((shape[0], shape[1]), self.slice_mut(id)).expect("2-d parameter")
    }

    pub fn vec(&self, id: ParamId) -> ArrayView1<'_, F> {
        ArrayView1::from(self.slice(id))
    }

    pub fn vec_mut(&mut self, id: ParamId) -> ArrayViewMut1<'_, F> {
        ArrayViewMut1::from(self.slice_mut(id))
    }

    pub fn add_assign(&mut self, other: &ParamBuf<F>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, k: F) {
        for a in self.data.iter_mut() {
            *a = *a * k;
        }
    }

    pub fn fill_zero(&mut self) {
        self.data.fill(F::zero());
    }

    /// Converts element type, e.g. for `f64` gradient checks.
    pub fn cast<G: Real>(&self) -> ParamBuf<G> {
        ParamBuf {
            layout: self.layout.clone(),
            data: self
                .data
                .iter()
                .map(|x| G::from_f64_lossy(x.to_f64().expect("finite")))
                .collect(),
        }
    }
}

/// tanh approximation of GELU.
pub fn gelu<F: Real>(x: &Array2<F>) -> Array2<F> {
    let k: F = c((2.0 / std::f64::consts::PI).sqrt());
    let a: F = c(0.044715);
    let half: F = c(0.5);
    x.mapv(|v| half * v * (F::one() + (k * (v + a * v * v * v)).tanh()))
}

pub fn gelu_backward<F: Real>(x: &Array2<F>, dy: &Array2<F>) -> Array2<F> {
    let k: F = c((2.0 / std::f64::consts::PI).sqrt());
    let a: F = c(0.044715);
    let three: F = c(3.0);
    let half: F = c(0.5);
    let mut out = dy.clone();
    ndarray::Zip::from(&mut out).and(x).for_each(|g, &v| {
        let u = k * (v + a * v * v * v);
        let th = u.tanh();
        let du = k * (F::one() + three * a * v * v);
        let d = half * (F::one() + th) + half * v * (F::one() - th * th) * du;
        *g = *g * d;
    });
    out
}

/// `y = x W + b` with `W` of shape `(d_in, d_out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(layout: &mut ParamLayout, name: &str, d_in: usize, d_out: usize) -> Self {
        let bound = (1.0 / d_in as f64).sqrt();
        Self {
            w: layout.add(format!("{name}.weight"), &[d_in, d_out], Init::Uniform(bound)),
            b: layout.add(format!("{name}.bias"), &[d_out], Init::Zeros),
            d_in,
            d_out,
        }
    }

    pub fn forward<F: Real>(&self, p: &ParamBuf<F>, x: ArrayView2<F>) -> Array2<F> {
        let mut y = x.dot(&p.mat(self.w));
        y += &p.vec(self.b);
        y
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward<F: Real>(&self, p: &ParamBuf<F>, x: ArrayView2<F>, dy: &Array2<F>, g: &mut ParamBuf<F>) -> Array2<F> {
        ndarray::linalg::general_mat_mul(F::one(), &x.t(), dy, F::one(), &mut g.mat_mut(self.w));
        g.vec_mut(self.b).scaled_add(F::one(), &dy.sum_axis(Axis(0)));
        dy.dot(&p.mat(self.w).t())
    }
}

/// Affine, GELU, affine.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct MlpCache<F> {
    x: Array2<F>,
    pre: Array2<F>,
    act: Array2<F>,
}

impl Mlp {
    pub fn new(layout: &mut ParamLayout, name: &str, d_in: usize, hidden: usize, d_out: usize) -> Self {
        Self {
            fc1: Linear::new(layout, &format!("{name}.fc1"), d_in, hidden),
            fc2: Linear::new(layout, &format!("{name}.fc2"), hidden, d_out),
        }
    }

    pub fn forward<F: Real>(&self, p: &ParamBuf<F>, x: ArrayView2<F>) -> (Array2<F>, MlpCache<F>) {
        let pre = self.fc1.forward(p, x);
        let act = gelu(&pre);
        let y = self.fc2.forward(p, act.view());
        (
            y,
            MlpCache {
                x: x.to_owned(),
                pre,
                act,
            },
        )
    }

    pub fn backward<F: Real>(&self, p: &ParamBuf<F>, cache: &MlpCache<F>, dy: &Array2<F>, g: &mut ParamBuf<F>) -> Array2<F> {
        let dact = self.fc2.backward(p, cache.act.view(), dy, g);
        let dpre = gelu_backward(&cache.pre, &dact);
        self.fc1.backward(p, cache.x.view(), &dpre, g)
    }
}

const LN_EPS: f64 = 1e-5;

/// Row-wise layer normalization with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<F> {
    xhat: Array2<F>,
    inv_std: Array1<F>,
}

impl LayerNorm {
    pub fn new(layout: &mut ParamLayout, name: &str, d: usize) -> Self {
        Self {
            gain: layout.add(format!("{name}.gain"), &[d], Init::Ones),
            bias: layout.add(format!("{name}.bias"), &[d], Init::Zeros),
        }
    }

    pub fn forward<F: Real>(&self, p: &ParamBuf<F>, x: ArrayView2<F>) -> (Array2<F>, LayerNormCache<F>) {
        let (n, d) = x.dim();
        let dn: F = c(d as f64);
        let eps: F = c(LN_EPS);
        let mut xhat = Array2::zeros((n, d));
        let mut inv_std = Array1::zeros(n);
        for i in 0..n {
            let row = x.row(i);
            let mean = row.sum() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
            let is = F::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                xhat[[i, j]] = (row[j] - mean) * is;
            }
        }
        let mut y = &xhat * &p.vec(self.gain);
        y += &p.vec(self.bias);
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward<F: Real>(&self, p: &ParamBuf<F>, cache: &LayerNormCache<F>, dy: &Array2<F>, g: &mut ParamBuf<F>) -> Array2<F> {
        let (n, d) = dy.dim();
        let dn: F = c(d as f64);
        g.vec_mut(self.gain)
            .scaled_add(F::one(), &(dy * &cache.xhat).sum_axis(Axis(0)));
        g.vec_mut(self.bias).scaled_add(F::one(), &dy.sum_axis(Axis(0)));
        let dxhat = dy * &p.vec(self.gain);
        let mut dx = Array2::zeros((n, d));
        for i in 0..n {
            let dh = dxhat.row(i);
            let xh = cache.xhat.row(i);
            let m1 = dh.sum() / dn;
            let m2 = dh.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<F>() / dn;
            for j in 0..d {
                dx[[i, j]] = cache.inv_std[i] * (dh[j] - m1 - xh[j] * m2);
            }
        }
        dx
    }
}

/// Multi-head self-attention over a token array.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub n_heads: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<F> {
    x: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    probs: Vec<Array2<F>>,
    mixed: Array2<F>,
}

impl SelfAttention {
    pub fn new(layout: &mut ParamLayout, name: &str, d: usize, n_heads: usize) -> Self {
        Self {
            q: Linear::new(layout, &format!("{name}.q"), d, d),
            k: Linear::new(layout, &format!("{name}.k"), d, d),
            v: Linear::new(layout, &format!("{name}.v"), d, d),
            o: Linear::new(layout, &format!("{name}.o"), d, d),
            n_heads,
        }
    }

    pub fn forward<F: Real>(&self, p: &ParamBuf<F>, x: ArrayView2<F>) -> (Array2<F>, AttentionCache<F>) {
        let (n, d) = x.dim();
        let dh = d / self.n_heads;
        let scale: F = c(1.0 / (dh as f64).sqrt());
        let q = self.q.forward(p, x);
        let k = self.k.forward(p, x);
        let v = self.v.forward(p, x);
        let mut mixed = Array2::zeros((n, d));
        let mut probs = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let cols = ndarray::s![.., h * dh..(h + 1) * dh];
            let mut s = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            for mut row in s.rows_mut() {
                let m = row.iter().copied().fold(F::neg_infinity(), F::max);
                row.mapv_inplace(|z| (z - m).exp());
                let sum = row.sum();
                row.mapv_inplace(|z| z / sum);
            }
            mixed.slice_mut(cols).assign(&s.dot(&v.slice(cols)));
            probs.push(s);
        }
        let y = self.o.forward(p, mixed.view());
        (
            y,
            AttentionCache {
                x: x.to_owned(),
                q,
                k,
                v,
                probs,
                mixed,
            },
        )
    }

    pub fn backward<F: Real>(&self, p: &ParamBuf<F>, cache: &AttentionCache<F>, dy: &Array2<F>, g: &mut ParamBuf<F>) -> Array2<F> {
        let (n, d) = cache.x.dim();
        let dh = d / self.n_heads;
        let scale: F = c(1.0 / (dh as f64).sqrt());
        let dmixed = self.o.backward(p, cache.mixed.view(), dy, g);
        let mut dq = Array2::zeros((n, d));
        let mut dk = Array2::zeros((n, d));
        let mut dv = Array2::zeros((n, d));
        for h in 0..self.n_heads {
            let cols = ndarray::s![.., h * dh..(h + 1) * dh];
            let pr = &cache.probs[h];
            let dmh = dmixed.slice(cols);
            dv.slice_mut(cols).assign(&pr.t().dot(&dmh));
            let dp = dmh.dot(&cache.v.slice(cols).t());
            let mut ds = Array2::zeros((n, n));
            for i in 0..n {
                let dot: F = (0..n).map(|j| dp[[i, j]] * pr[[i, j]]).sum();
                for j in 0..n {
                    ds[[i, j]] = pr[[i, j]] * (dp[[i, j]] - dot) * scale;
                }
            }
            dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
        }
        let mut dx = self.q.backward(p, cache.x.view(), &dq, g);
        dx += &self.k.backward(p, cache.x.view(), &dk, g);
        dx += &self.v.backward(p, cache.x.view(), &dv, g);
        dx
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + ffn(ln(x))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: SelfAttention,
    pub ln2: LayerNorm,
    pub ffn: Mlp,
}

#[derive(Debug, Clone)]
pub struct BlockCache<F> {
    ln1: LayerNormCache<F>,
    attn: AttentionCache<F>,
    ln2: LayerNormCache<F>,
    ffn: MlpCache<F>,
}

impl TransformerBlock {
    pub fn new(layout: &mut ParamLayout, name: &str, d: usize, n_heads: usize, ffn_mult: usize) -> Self {
        Self {
            ln1: LayerNorm::new(layout, &format!("{name}.ln1"), d),
            attn: SelfAttention::new(layout, &format!("{name}.attn"), d, n_heads),
            ln2: LayerNorm::new(layout, &format!("{name}.ln2"), d),
            ffn: Mlp::new(layout, &format!("{name}.ffn"), d, d * ffn_mult, d),
        }
    }

    pub fn forward<F: Real>(&self, p: &ParamBuf<F>, x: ArrayView2<F>) -> (Array2<F>, BlockCache<F>) {
        let (a, ln1) = self.ln1.forward(p, x);
        let (att, attn) = self.attn.forward(p, a.view());
        let x1 = &x + &att;
        let (b, ln2) = self.ln2.forward(p, x1.view());
        let (f, ffn) = self.ffn.forward(p, b.view());
        (x1 + f, BlockCache { ln1, attn, ln2, ffn })
    }

    pub fn backward<F: Real>(&self, p: &ParamBuf<F>, cache: &BlockCache<F>, dy: &Array2<F>, g: &mut ParamBuf<F>) -> Array2<F> {
        let db = self.ffn.backward(p, &cache.ffn, dy, g);
        let dx1 = dy + &self.ln2.backward(p, &cache.ln2, &db, g);
        let da = self.attn.backward(p, &cache.attn, &dx1, g);
        &dx1 + &self.ln1.backward(p, &cache.ln1, &da, g)
    }
}
