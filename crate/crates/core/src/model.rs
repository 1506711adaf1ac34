//! Modality embeddings, embedding fusion, the shared two-stream encoder and
//! projector heads.
//!
//! Per sample the model computes, for each stream (temporal over frame
//! tokens, spatial over joint tokens):
//!
//! - `h^k = embed_k(x^k)` for every modality and the fused `h~ = fuse(h^k)`;
//! - `y^k = encode(h^k)` and `y~ = encode(h~)` with one encoder per stream
//!   shared by all modalities and the fused path;
//! - projections `z^k = head_k(y^k)`, `z~^k = head_k(y~)`,
//!   `z = head_mm(mean_k y^k)` and `z~ = head_mm(y~)`.
//!
//! The baseline objective instead uses one global head per modality on
//! `[y_t^k, y_s^k]` and `[y~_t, y~_s]`.

use std::sync::Arc;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Modality, ModalityBundle, ModalitySet, CHANNELS};
use crate::error::{Error, Result};
use crate::losses::{GlobalProjection, ModalityProjections, ProjectedFeatures, StreamPair};
use crate::nn::{Init, Linear, Mlp, MlpCache, ParamBuf, ParamId, ParamLayout, Real, TransformerBlock, BlockCache};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    Average,
    Linear,
}

/// Which pretraining objective the heads are built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Stream-wise decomposition, composition and VC on all 4M+4 matrices.
    Full,
    /// Global decomposition with VC on unimodal global features only.
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Embedding and hidden width `D`.
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub t_out: usize,
    pub n_joints: usize,
    pub channels: usize,
    pub modalities: ModalitySet,
    pub fusion: Fusion,
    pub projector_hidden_mult: usize,
    pub objective: Objective,
}

impl ModelConfig {
    /// Small configuration that trains in minutes on a CPU.
    pub fn desk() -> Self {
        Self {
            d_model: 64,
            n_layers: 1,
            n_heads: 1,
            ffn_mult: 4,
            t_out: 16,
            n_joints: 11,
            channels: CHANNELS,
            modalities: ModalitySet::all(),
            fusion: Fusion::Average,
            projector_hidden_mult: 1,
            objective: Objective::Full,
        }
    }

    /// Width 1024, one layer, one head, 64 frames of 25 joints.
    pub fn full_scale() -> Self {
        Self {
            d_model: 1024,
            t_out: 64,
            n_joints: 25,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.ffn_mult == 0 || self.projector_hidden_mult == 0 {
            return Err(Error::config("n_layers, ffn_mult and projector_hidden_mult must be >= 1"));
        }
        if self.t_out < 2 || self.n_joints < 2 || self.channels == 0 {
            return Err(Error::config("t_out >= 2, n_joints >= 2 and channels >= 1 required"));
        }
        Ok(())
    }

    fn n_tokens(&self, stream: Stream) -> usize {
        match stream {
            Stream::Temporal => self.t_out,
            Stream::Spatial => self.n_joints,
        }
    }

    fn token_width(&self, stream: Stream) -> usize {
        match stream {
            Stream::Temporal => self.n_joints * self.channels,
            Stream::Spatial => self.t_out * self.channels,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Temporal,
    Spatial,
}

impl Stream {
    pub const BOTH: [Stream; 2] = [Stream::Temporal, Stream::Spatial];

    fn idx(self) -> usize {
        self as usize
    }

    fn name(self) -> &'static str {
        match self {
            Stream::Temporal => "temporal",
            Stream::Spatial => "spatial",
        }
    }
}

/// Per-token affine, GELU, affine, plus a learned positional table.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub mlp: Mlp,
    pub pos: ParamId,
}

impl Embedding {
    fn forward<F: Real>(&self, p: &ParamBuf<F>, x: ArrayView2<F>) -> (Array2<F>, MlpCache<F>) {
        let (mut h, cache) = self.mlp.forward(p, x);
        h += &p.mat(self.pos);
        (h, cache)
    }

    fn backward<F: Real>(&self, p: &ParamBuf<F>, cache: &MlpCache<F>, dh: &Array2<F>, g: &mut ParamBuf<F>) {
        g.mat_mut(self.pos).scaled_add(F::one(), dh);
        self.mlp.backward(p, cache, dh, g);
    }
}

/// Transformer stack followed by mean pooling over tokens.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub blocks: Vec<TransformerBlock>,
}

#[derive(Debug, Clone)]
pub struct EncoderCache<F> {
    blocks: Vec<BlockCache<F>>,
    n_tokens: usize,
}

impl Encoder {
    pub fn forward<F: Real>(&self, p: &ParamBuf<F>, h: ArrayView2<F>) -> (Array1<F>, EncoderCache<F>) {
        let mut x = h.to_owned();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(p, x.view());
            caches.push(c);
            x = y;
        }
        let pooled = x.mean_axis(Axis(0)).expect("at least one token");
        (
            pooled,
            EncoderCache {
                blocks: caches,
                n_tokens: h.nrows(),
            },
        )
    }

    pub fn backward<F: Real>(&self, p: &ParamBuf<F>, cache: &EncoderCache<F>, dy: ArrayView1<F>, g: &mut ParamBuf<F>) -> Array2<F> {
        let n = cache.n_tokens;
        let scale = F::one() / F::from_f64_lossy(n as f64);
        let row = dy.mapv(|v| v * scale);
        let mut dx = row.broadcast((n, row.len())).expect("broadcast").to_owned();
        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            dx = b.backward(p, c, &dx, g);
        }
        dx
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadTarget {
    Modality(Modality),
    Multimodal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadStream {
    Temporal,
    Spatial,
    Global,
}

impl From<Stream> for HeadStream {
    fn from(s: Stream) -> Self {
        match s {
            Stream::Temporal => HeadStream::Temporal,
            Stream::Spatial => HeadStream::Spatial,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct HeadKey {
    pub target: HeadTarget,
    pub stream: HeadStream,
}

/// Module structure and parameter layout; holds no values.
#[derive(Debug, Clone)]
pub struct Architecture {
    cfg: ModelConfig,
    layout: Arc<ParamLayout>,
    /// `[temporal, spatial]` embedding for each configured modality.
    embeddings: Vec<[Embedding; 2]>,
    fusion: Option<[Linear; 2]>,
    encoders: [Encoder; 2],
    heads: Vec<(HeadKey, Mlp)>,
}

impl Architecture {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut layout = ParamLayout::new();
        let mods = cfg.modalities.as_slice();

        let embeddings = mods
            .iter()
            .map(|m| {
                Stream::BOTH.map(|st| {
                    let name = format!("embed.{}.{}", m.name(), st.name());
                    let mlp = Mlp::new(&mut layout, &name, cfg.token_width(st), d, d);
                    let pos = layout.add(format!("{name}.pos"), &[cfg.n_tokens(st), d], Init::Uniform(0.02));
                    Embedding { mlp, pos }
                })
            })
            .collect();

        let fusion = match cfg.fusion {
            Fusion::Average => None,
            Fusion::Linear => Some(Stream::BOTH.map(|st| {
                Linear::new(&mut layout, &format!("fusion.{}", st.name()), mods.len() * d, d)
            })),
        };

        let encoders = Stream::BOTH.map(|st| Encoder {
            blocks: (0..cfg.n_layers)
                .map(|l| {
                    TransformerBlock::new(&mut layout, &format!("encoder.{}.block{l}", st.name()), d, cfg.n_heads, cfg.ffn_mult)
                })
                .collect(),
        });

        let hidden = d * cfg.projector_hidden_mult;
        let mut heads = Vec::new();
        match cfg.objective {
            Objective::Full => {
                let targets = mods
                    .iter()
                    .map(|&m| HeadTarget::Modality(m))
                    .chain(std::iter::once(HeadTarget::Multimodal));
                for target in targets {
                    for st in Stream::BOTH {
                        let tname = match target {
                            HeadTarget::Modality(m) => m.name(),
                            HeadTarget::Multimodal => "multimodal",
                        };
                        let mlp = Mlp::new(&mut layout, &format!("head.{tname}.{}", st.name()), d, hidden, d);
                        heads.push((
                            HeadKey {
                                target,
                                stream: st.into(),
                            },
                            mlp,
                        ));
                    }
                }
            }
            Objective::Baseline => {
                for &m in mods {
                    let mlp = Mlp::new(&mut layout, &format!("head.{}.global", m.name()), 2 * d, hidden, d);
                    heads.push((
                        HeadKey {
                            target: HeadTarget::Modality(m),
                            stream: HeadStream::Global,
                        },
                        mlp,
                    ));
                }
            }
        }

        Ok(Self {
            cfg: cfg.clone(),
            layout: Arc::new(layout),
            embeddings,
            fusion,
            encoders,
            heads,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn encoder_param_count(&self) -> usize {
        self.layout.count_prefix("encoder.")
    }

    pub fn embedding_param_count(&self) -> usize {
        self.layout.count_prefix("embed.")
    }

    pub fn head_param_count(&self) -> usize {
        self.layout.count_prefix("head.")
    }

    pub fn fusion_param_count(&self) -> usize {
        self.layout.count_prefix("fusion.")
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn head(&self, key: HeadKey) -> Result<&Mlp> {
        self.heads
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, h)| h)
            .ok_or_else(|| Error::config(format!("no projector head {key:?}")))
    }

    pub fn encoder(&self, stream: Stream) -> &Encoder {
        &self.encoders[stream.idx()]
    }

    fn modality_index(&self, m: Modality) -> Result<usize> {
        self.cfg
            .modalities
            .as_slice()
            .iter()
            .position(|&x| x == m)
            .ok_or_else(|| Error::config(format!("model has no {} embedding", m.name())))
    }

    fn stream_input<'a>(&self, bundle: &'a ModalityBundle, m: Modality, st: Stream) -> Result<&'a Array2<f32>> {
        let views = bundle
            .get(m)
            .ok_or_else(|| Error::shape(format!("bundle lacks the {} modality", m.name())))?;
        let x = match st {
            Stream::Temporal => &views.temporal,
            Stream::Spatial => &views.spatial,
        };
        let want = (self.cfg.n_tokens(st), self.cfg.token_width(st));
        if x.dim() != want {
            return Err(Error::shape(format!(
                "{} {} view has shape {:?}, expected {want:?}",
                m.name(),
                st.name(),
                x.dim()
            )));
        }
        Ok(x)
    }

    /// Token array of one modality and stream.
    pub fn embed<F: Real>(&self, p: &ParamBuf<F>, x: ArrayView2<F>, m: Modality, st: Stream) -> Result<Array2<F>> {
        let want = (self.cfg.n_tokens(st), self.cfg.token_width(st));
        if x.dim() != want {
            return Err(Error::shape(format!("input shape {:?}, expected {want:?}", x.dim())));
        }
        let e = &self.embeddings[self.modality_index(m)?][st.idx()];
        Ok(e.forward(p, x).0)
    }

    /// Fuses token arrays given as `(modality index, tokens)`.
    fn fuse<F: Real>(&self, p: &ParamBuf<F>, st: Stream, parts: &[(usize, &Array2<F>)]) -> (Array2<F>, Option<Array2<F>>) {
        match &self.fusion {
            None => {
                let mut acc = parts[0].1.clone();
                for (_, h) in &parts[1..] {
                    acc += *h;
                }
                let k = F::one() / F::from_f64_lossy(parts.len() as f64);
                (acc * k, None)
            }
            Some(lin) => {
                let (n, d) = parts[0].1.dim();
                let m = self.cfg.modalities.len();
                let mut cat = Array2::zeros((n, m * d));
                for (i, h) in parts {
                    cat.slice_mut(s![.., i * d..(i + 1) * d]).assign(*h);
                }
                let out = lin[st.idx()].forward(p, cat.view());
                (out, Some(cat))
            }
        }
    }

    fn fuse_backward<F: Real>(
        &self,
        p: &ParamBuf<F>,
        st: Stream,
        parts: &[usize],
        cat: Option<&Array2<F>>,
        dh: &Array2<F>,
        g: &mut ParamBuf<F>,
    ) -> Vec<Array2<F>> {
        match (&self.fusion, cat) {
            (Some(lin), Some(cat)) => {
                let d = dh.ncols();
                let dcat = lin[st.idx()].backward(p, cat.view(), dh, g);
                parts
                    .iter()
                    .map(|i| dcat.slice(s![.., i * d..(i + 1) * d]).to_owned())
                    .collect()
            }
            _ => {
                let k = F::one() / F::from_f64_lossy(parts.len() as f64);
                let share = dh * k;
                parts.iter().map(|_| share.clone()).collect()
            }
        }
    }

    /// Public fusion entry point over equally shaped token arrays in
    /// configured-modality order.
    pub fn fuse_tokens<F: Real>(&self, p: &ParamBuf<F>, st: Stream, h: &[Array2<F>]) -> Result<Array2<F>> {
        if h.is_empty() {
            return Err(Error::shape("fusion needs at least one token array"));
        }
        if h.iter().any(|x| x.dim() != h[0].dim()) {
            return Err(Error::shape("fusion inputs differ in shape"));
        }
        if self.fusion.is_some() && h.len() != self.cfg.modalities.len() {
            return Err(Error::shape("linear fusion needs one token array per configured modality"));
        }
        let parts: Vec<(usize, &Array2<F>)> = h.iter().enumerate().collect();
        Ok(self.fuse(p, st, &parts).0)
    }

    /// Encodes and mean-pools a token array.
    pub fn encode<F: Real>(&self, p: &ParamBuf<F>, st: Stream, h: ArrayView2<F>) -> Result<Array1<F>> {
        if h.ncols() != self.cfg.d_model || h.nrows() == 0 {
            return Err(Error::shape(format!("token array {:?} has wrong width", h.dim())));
        }
        if h.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("non-finite encoder input".into()));
        }
        Ok(self.encoders[st.idx()].forward(p, h).0)
    }

    pub fn project<F: Real>(&self, p: &ParamBuf<F>, key: HeadKey, y: ArrayView1<F>) -> Result<Array1<F>> {
        let head = self.head(key)?;
        if y.len() != head.fc1.d_in {
            return Err(Error::shape(format!("head input width {}, expected {}", y.len(), head.fc1.d_in)));
        }
        let x = y.insert_axis(Axis(0));
        Ok(head.forward(p, x).0.row(0).to_owned())
    }
}

/// Architecture together with parameter values.
#[derive(Debug, Clone)]
pub struct Model<F> {
    pub arch: Arc<Architecture>,
    pub params: ParamBuf<F>,
}

fn to_real<F: Real>(x: &Array2<f32>) -> Array2<F> {
    x.mapv(|v| F::from_f64_lossy(v as f64))
}

fn row<F: Real>(y: &Array1<F>) -> ArrayView2<'_, F> {
    y.view().insert_axis(Axis(0))
}

struct HeadEval<F> {
    out: Array1<F>,
    cache: MlpCache<F>,
}

fn run_head<F: Real>(head: &Mlp, p: &ParamBuf<F>, y: &Array1<F>) -> HeadEval<F> {
    let (out, cache) = head.forward(p, row(y));
    HeadEval {
        out: out.row(0).to_owned(),
        cache,
    }
}

fn head_backward<F: Real>(head: &Mlp, p: &ParamBuf<F>, h: &HeadEval<F>, dz: &Array1<F>, g: &mut ParamBuf<F>) -> Array1<F> {
    let dz2 = dz.clone().insert_axis(Axis(0));
    head.backward(p, &h.cache, &dz2, g).row(0).to_owned()
}

struct StreamState<F> {
    embed: Vec<MlpCache<F>>,
    fuse_cat: Option<Array2<F>>,
    enc_uni: Vec<EncoderCache<F>>,
    y_uni: Vec<Array1<F>>,
    enc_fused: EncoderCache<F>,
    y_fused: Array1<F>,
}

struct StreamHeads<F> {
    uni: Vec<HeadEval<F>>,
    dec: Vec<HeadEval<F>>,
    comp: HeadEval<F>,
    fused: HeadEval<F>,
}

enum HeadState<F> {
    Full([StreamHeads<F>; 2]),
    Baseline {
        uni: Vec<HeadEval<F>>,
        dec: Vec<HeadEval<F>>,
    },
}

/// Forward state of one sample, kept for the backward pass.
pub struct SampleForward<F> {
    streams: [StreamState<F>; 2],
    heads: HeadState<F>,
}

/// Per-sample projector outputs (or gradients with the same layout).
#[derive(Debug, Clone, PartialEq)]
pub enum SampleProjections<F> {
    Full {
        /// `[temporal, spatial]`, one vector per modality.
        unimodal: [Vec<Array1<F>>; 2],
        decomposed: [Vec<Array1<F>>; 2],
        composed: [Array1<F>; 2],
        fused: [Array1<F>; 2],
    },
    Baseline {
        unimodal: Vec<Array1<F>>,
        decomposed: Vec<Array1<F>>,
    },
}

/// Stream features of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRepresentation<F> {
    /// `y_t^k, y_s^k` per modality.
    pub unimodal: [Vec<Array1<F>>; 2],
    /// `y~_t, y~_s`.
    pub fused: [Array1<F>; 2],
}

impl<F: Real> SampleForward<F> {
    pub fn representation(&self) -> SampleRepresentation<F> {
        SampleRepresentation {
            unimodal: [self.streams[0].y_uni.clone(), self.streams[1].y_uni.clone()],
            fused: [self.streams[0].y_fused.clone(), self.streams[1].y_fused.clone()],
        }
    }

    pub fn projections(&self) -> SampleProjections<F> {
        match &self.heads {
            HeadState::Full(sh) => SampleProjections::Full {
                unimodal: [0, 1].map(|i| sh[i].uni.iter().map(|h| h.out.clone()).collect()),
                decomposed: [0, 1].map(|i| sh[i].dec.iter().map(|h| h.out.clone()).collect()),
                composed: [0, 1].map(|i| sh[i].comp.out.clone()),
                fused: [0, 1].map(|i| sh[i].fused.out.clone()),
            },
            HeadState::Baseline { uni, dec, .. } => SampleProjections::Baseline {
                unimodal: uni.iter().map(|h| h.out.clone()).collect(),
                decomposed: dec.iter().map(|h| h.out.clone()).collect(),
            },
        }
    }
}

fn stack<F: Real>(rows: &[&Array1<F>]) -> Array2<f64> {
    let d = rows[0].len();
    Array2::from_shape_fn((rows.len(), d), |(i, j)| rows[i][j].to_f64().expect("finite"))
}

fn unstack<F: Real>(m: &Array2<f64>, i: usize) -> Array1<F> {
    m.row(i).mapv(F::from_f64_lossy)
}

/// Batch projector outputs in loss form.
#[derive(Debug, Clone, PartialEq)]
pub enum BatchProjections {
    Full(ProjectedFeatures),
    Baseline(Vec<GlobalProjection>),
}

/// Stacks per-sample projections into batch matrices.
pub fn assemble_projections<F: Real>(modalities: &ModalitySet, samples: &[SampleProjections<F>]) -> Result<BatchProjections> {
    if samples.is_empty() {
        return Err(Error::shape("empty batch"));
    }
    let mods = modalities.as_slice();
    match &samples[0] {
        SampleProjections::Full { .. } => {
            let pick = |f: &dyn Fn(&SampleProjections<F>) -> &Array1<F>| -> Array2<f64> {
                let rows: Vec<&Array1<F>> = samples.iter().map(f).collect();
                stack(&rows)
            };
            let modalities = mods
                .iter()
                .enumerate()
                .map(|(k, &m)| {
                    let get = |which: usize, st: usize| {
                        pick(&|s: &SampleProjections<F>| match s {
                            SampleProjections::Full { unimodal, decomposed, .. } => {
                                if which == 0 {
                                    &unimodal[st][k]
                                } else {
                                    &decomposed[st][k]
                                }
                            }
                            _ => unreachable!("mixed projection kinds"),
                        })
                    };
                    ModalityProjections {
                        modality: m,
                        unimodal: StreamPair {
                            temporal: get(0, 0),
                            spatial: get(0, 1),
                        },
                        decomposed: StreamPair {
                            temporal: get(1, 0),
                            spatial: get(1, 1),
                        },
                    }
                })
                .collect();
            let get2 = |which: usize, st: usize| {
                pick(&|s: &SampleProjections<F>| match s {
                    SampleProjections::Full { composed, fused, .. } => {
                        if which == 0 {
                            &composed[st]
                        } else {
                            &fused[st]
                        }
                    }
                    _ => unreachable!("mixed projection kinds"),
                })
            };
            Ok(BatchProjections::Full(ProjectedFeatures {
                modalities,
                composed: StreamPair {
                    temporal: get2(0, 0),
                    spatial: get2(0, 1),
                },
                fused: StreamPair {
                    temporal: get2(1, 0),
                    spatial: get2(1, 1),
                },
            }))
        }
        SampleProjections::Baseline { .. } => {
            let out = mods
                .iter()
                .enumerate()
                .map(|(k, &m)| {
                    let get = |which: usize| {
                        let rows: Vec<&Array1<F>> = samples
                            .iter()
                            .map(|s| match s {
                                SampleProjections::Baseline { unimodal, decomposed } => {
                                    if which == 0 {
                                        &unimodal[k]
                                    } else {
                                        &decomposed[k]
                                    }
                                }
                                _ => unreachable!("mixed projection kinds"),
                            })
                            .collect();
                        stack(&rows)
                    };
                    GlobalProjection {
                        modality: m,
                        unimodal: get(0),
                        decomposed: get(1),
                    }
                })
                .collect();
            Ok(BatchProjections::Baseline(out))
        }
    }
}

/// Row `i` of batch gradients, in per-sample form.
pub fn sample_gradient<F: Real>(g: &BatchProjections, i: usize) -> SampleProjections<F> {
    match g {
        BatchProjections::Full(p) => SampleProjections::Full {
            unimodal: [
                p.modalities.iter().map(|m| unstack(&m.unimodal.temporal, i)).collect(),
                p.modalities.iter().map(|m| unstack(&m.unimodal.spatial, i)).collect(),
            ],
            decomposed: [
                p.modalities.iter().map(|m| unstack(&m.decomposed.temporal, i)).collect(),
                p.modalities.iter().map(|m| unstack(&m.decomposed.spatial, i)).collect(),
            ],
            composed: [unstack(&p.composed.temporal, i), unstack(&p.composed.spatial, i)],
            fused: [unstack(&p.fused.temporal, i), unstack(&p.fused.spatial, i)],
        },
        BatchProjections::Baseline(v) => SampleProjections::Baseline {
            unimodal: v.iter().map(|m| unstack(&m.unimodal, i)).collect(),
            decomposed: v.iter().map(|m| unstack(&m.decomposed, i)).collect(),
        },
    }
}

/// Cache for the inference/fine-tuning path through fused features only.
pub struct UnifiedCache<F> {
    parts: Vec<usize>,
    embed: [Vec<MlpCache<F>>; 2],
    fuse_cat: [Option<Array2<F>>; 2],
    enc: [EncoderCache<F>; 2],
}

impl<F: Real> Model<F> {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let arch = Arc::new(Architecture::new(cfg)?);
        let params = ParamBuf::init(arch.layout().clone(), rng);
        Ok(Self { arch, params })
    }

    pub fn config(&self) -> &ModelConfig {
        self.arch.config()
    }

    pub fn zero_grads(&self) -> ParamBuf<F> {
        ParamBuf::zeros(self.arch.layout().clone())
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            arch: self.arch.clone(),
            params: self.params.cast(),
        }
    }

    fn stream_forward(&self, bundle: &ModalityBundle, st: Stream) -> Result<StreamState<F>> {
        let a = &self.arch;
        let p = &self.params;
        let mut embed = Vec::new();
        let mut tokens = Vec::new();
        for (k, m) in a.cfg.modalities.iter().enumerate() {
            let x: Array2<F> = to_real(a.stream_input(bundle, m, st)?);
            let (h, c) = a.embeddings[k][st.idx()].forward(p, x.view());
            embed.push(c);
            tokens.push(h);
        }
        let parts: Vec<(usize, &Array2<F>)> = tokens.iter().enumerate().collect();
        let (fused, fuse_cat) = a.fuse(p, st, &parts);
        let enc = &a.encoders[st.idx()];
        let mut enc_uni = Vec::new();
        let mut y_uni = Vec::new();
        for h in &tokens {
            let (y, c) = enc.forward(p, h.view());
            y_uni.push(y);
            enc_uni.push(c);
        }
        let (y_fused, enc_fused) = enc.forward(p, fused.view());
        Ok(StreamState {
            embed,
            fuse_cat,
            enc_uni,
            y_uni,
            enc_fused,
            y_fused,
        })
    }

    /// Full training forward pass for one sample.
    pub fn forward_sample(&self, bundle: &ModalityBundle) -> Result<SampleForward<F>> {
        let a = &self.arch;
        let p = &self.params;
        let streams = [
            self.stream_forward(bundle, Stream::Temporal)?,
            self.stream_forward(bundle, Stream::Spatial)?,
        ];
        let mods = a.cfg.modalities.as_slice();
        let heads = match a.cfg.objective {
            Objective::Full => {
                let mut per = Vec::with_capacity(2);
                for st in Stream::BOTH {
                    let s = &streams[st.idx()];
                    let key = |t| HeadKey {
                        target: t,
                        stream: st.into(),
                    };
                    let mut uni = Vec::new();
                    let mut dec = Vec::new();
                    for (k, &m) in mods.iter().enumerate() {
                        let h = a.head(key(HeadTarget::Modality(m)))?;
                        uni.push(run_head(h, p, &s.y_uni[k]));
                        dec.push(run_head(h, p, &s.y_fused));
                    }
                    let mm = a.head(key(HeadTarget::Multimodal))?;
                    let mut mean = s.y_uni[0].clone();
                    for y in &s.y_uni[1..] {
                        mean += y;
                    }
                    mean.mapv_inplace(|v| v / F::from_f64_lossy(mods.len() as f64));
                    per.push(StreamHeads {
                        uni,
                        dec,
                        comp: run_head(mm, p, &mean),
                        fused: run_head(mm, p, &s.y_fused),
                    });
                }
                let spatial = per.pop().unwrap();
                let temporal = per.pop().unwrap();
                HeadState::Full([temporal, spatial])
            }
            Objective::Baseline => {
                let fused_global = concatenate![Axis(0), streams[0].y_fused, streams[1].y_fused];
                let mut uni = Vec::new();
                let mut dec = Vec::new();
                for (k, &m) in mods.iter().enumerate() {
                    let h = a.head(HeadKey {
                        target: HeadTarget::Modality(m),
                        stream: HeadStream::Global,
                    })?;
                    let y = concatenate![Axis(0), streams[0].y_uni[k], streams[1].y_uni[k]];
                    uni.push(run_head(h, p, &y));
                    dec.push(run_head(h, p, &fused_global));
                }
                HeadState::Baseline { uni, dec }
            }
        };
        Ok(SampleForward { streams, heads })
    }

    /// Accumulates parameter gradients of one sample given gradients of its
    /// projector outputs.
    pub fn backward_sample(&self, fwd: &SampleForward<F>, dz: &SampleProjections<F>, g: &mut ParamBuf<F>) -> Result<()> {
        let a = &self.arch;
        let p = &self.params;
        let mods = a.cfg.modalities.as_slice();
        let m = mods.len();
        let d = a.cfg.d_model;
        let mut dy_uni: [Vec<Array1<F>>; 2] = [0, 1].map(|_| vec![Array1::zeros(d); m]);
        let mut dy_fused: [Array1<F>; 2] = [0, 1].map(|_| Array1::zeros(d));

        match (&fwd.heads, dz) {
            (
                HeadState::Full(sh),
                SampleProjections::Full {
                    unimodal,
                    decomposed,
                    composed,
                    fused,
                },
            ) => {
                for st in Stream::BOTH {
                    let i = st.idx();
                    let key = |t| HeadKey {
                        target: t,
                        stream: st.into(),
                    };
                    for (k, &md) in mods.iter().enumerate() {
                        let h = a.head(key(HeadTarget::Modality(md)))?;
                        dy_uni[i][k] += &head_backward(h, p, &sh[i].uni[k], &unimodal[i][k], g);
                        dy_fused[i] += &head_backward(h, p, &sh[i].dec[k], &decomposed[i][k], g);
                    }
                    let mm = a.head(key(HeadTarget::Multimodal))?;
                    let dmean = head_backward(mm, p, &sh[i].comp, &composed[i], g);
                    let share = dmean.mapv(|v| v / F::from_f64_lossy(m as f64));
                    for dy in dy_uni[i].iter_mut() {
                        *dy += &share;
                    }
                    dy_fused[i] += &head_backward(mm, p, &sh[i].fused, &fused[i], g);
                }
            }
            (HeadState::Baseline { uni, dec, .. }, SampleProjections::Baseline { unimodal, decomposed }) => {
                for (k, &md) in mods.iter().enumerate() {
                    let h = a.head(HeadKey {
                        target: HeadTarget::Modality(md),
                        stream: HeadStream::Global,
                    })?;
                    let du = head_backward(h, p, &uni[k], &unimodal[k], g);
                    let dd = head_backward(h, p, &dec[k], &decomposed[k], g);
                    dy_uni[0][k] += &du.slice(s![..d]);
                    dy_uni[1][k] += &du.slice(s![d..]);
                    dy_fused[0] += &dd.slice(s![..d]);
                    dy_fused[1] += &dd.slice(s![d..]);
                }
            }
            _ => return Err(Error::shape("projection gradient kind does not match the objective")),
        }

        let parts: Vec<usize> = (0..m).collect();
        for st in Stream::BOTH {
            let i = st.idx();
            let s = &fwd.streams[i];
            let enc = &a.encoders[i];
            let mut dh: Vec<Array2<F>> = s
                .enc_uni
                .iter()
                .zip(&dy_uni[i])
                .map(|(c, dy)| enc.backward(p, c, dy.view(), g))
                .collect();
            let dfused = enc.backward(p, &s.enc_fused, dy_fused[i].view(), g);
            let shares = a.fuse_backward(p, st, &parts, s.fuse_cat.as_ref(), &dfused, g);
            for (k, sh) in shares.into_iter().enumerate() {
                dh[k] += &sh;
            }
            for (k, dhk) in dh.iter().enumerate() {
                a.embeddings[k][i].backward(p, &s.embed[k], dhk, g);
            }
        }
        Ok(())
    }

    /// Inference feature `[y~_t, y~_s]` from the fused embeddings of `subset`.
    pub fn extract_unified(&self, bundle: &ModalityBundle, subset: &ModalitySet) -> Result<Array1<F>> {
        Ok(self.unified_forward(bundle, subset)?.0)
    }

    pub fn unified_forward(&self, bundle: &ModalityBundle, subset: &ModalitySet) -> Result<(Array1<F>, UnifiedCache<F>)> {
        let a = &self.arch;
        let p = &self.params;
        let parts: Vec<usize> = subset.iter().map(|m| a.modality_index(m)).collect::<Result<_>>()?;
        let mut embed: [Vec<MlpCache<F>>; 2] = [Vec::new(), Vec::new()];
        let mut fuse_cat: [Option<Array2<F>>; 2] = [None, None];
        let mut pooled = Vec::with_capacity(2);
        let mut enc_caches = Vec::with_capacity(2);
        for st in Stream::BOTH {
            let i = st.idx();
            let mut tokens = Vec::with_capacity(parts.len());
            for (&k, m) in parts.iter().zip(subset.iter()) {
                let x: Array2<F> = to_real(a.stream_input(bundle, m, st)?);
                let (h, c) = a.embeddings[k][i].forward(p, x.view());
                embed[i].push(c);
                tokens.push((k, h));
            }
            let refs: Vec<(usize, &Array2<F>)> = tokens.iter().map(|(k, h)| (*k, h)).collect();
            let (fused, cat) = a.fuse(p, st, &refs);
            fuse_cat[i] = cat;
            let (y, c) = a.encoders[i].forward(p, fused.view());
            pooled.push(y);
            enc_caches.push(c);
        }
        let feat = concatenate![Axis(0), pooled[0], pooled[1]];
        let spatial = enc_caches.pop().unwrap();
        let temporal = enc_caches.pop().unwrap();
        Ok((
            feat,
            UnifiedCache {
                parts,
                embed,
                fuse_cat,
                enc: [temporal, spatial],
            },
        ))
    }

    pub fn unified_backward(&self, cache: &UnifiedCache<F>, dfeat: ArrayView1<F>, g: &mut ParamBuf<F>) {
        let a = &self.arch;
        let p = &self.params;
        let d = a.cfg.d_model;
        for st in Stream::BOTH {
            let i = st.idx();
            let dy = dfeat.slice(s![i * d..(i + 1) * d]);
            let dfused = a.encoders[i].backward(p, &cache.enc[i], dy, g);
            let shares = a.fuse_backward(p, st, &cache.parts, cache.fuse_cat[i].as_ref(), &dfused, g);
            for (j, (&k, dh)) in cache.parts.iter().zip(shares.iter()).enumerate() {
                a.embeddings[k][i].backward(p, &cache.embed[i][j], dh, g);
            }
        }
    }
}

impl Model<f32> {
    /// Forward pass over a batch, returning per-sample features and the
    /// stacked projections.
    pub fn forward_batch(&self, bundles: &[ModalityBundle]) -> Result<(Vec<SampleRepresentation<f32>>, BatchProjections)> {
        if bundles.is_empty() {
            return Err(Error::shape("empty batch"));
        }
        let fwd: Vec<SampleForward<f32>> = crate::exec::Execution::default()
            .map(bundles, |b| self.forward_sample(b))
            .into_iter()
            .collect::<Result<_>>()?;
        let reps = fwd.iter().map(|f| f.representation()).collect();
        let projs: Vec<SampleProjections<f32>> = fwd.iter().map(|f| f.projections()).collect();
        Ok((reps, assemble_projections(&self.arch.cfg.modalities, &projs)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, ModalityBundle, SynthConfig};
    use crate::losses::{baseline_loss_grad, total_loss_grad, LossConfig};
    use crate::nn::gradcheck::{max_rel_err, numeric_grad};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            t_out: 6,
            n_joints: 5,
            ffn_mult: 2,
            n_heads: 2,
            ..ModelConfig::desk()
        }
    }

    fn bundles(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<ModalityBundle> {
        let ds = synth_generate(&SynthConfig {
            n_classes: 2,
            n_performances: n,
            n_views: 1,
            n_joints: cfg.n_joints,
            n_frames: cfg.t_out,
            seed,
            ..Default::default()
        })
        .unwrap();
        ds.sequences
            .iter()
            .map(|s| ModalityBundle::from_joints(s.coords.view(), &ds.topology, &cfg.modalities).unwrap())
            .collect()
    }

    #[test]
    fn embed_shapes_and_modality_specificity() {
        let cfg = ModelConfig::desk();
        let model = Model::<f32>::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let a = &model.arch;
        let x = Array2::from_elem((16, 33), 0.3f32);
        let hj = a.embed(&model.params, x.view(), Modality::Joint, Stream::Temporal).unwrap();
        let hb = a.embed(&model.params, x.view(), Modality::Bone, Stream::Temporal).unwrap();
        assert_eq!(hj.dim(), (16, 64));
        assert_ne!(hj, hb);
        assert!(a.embed(&model.params, x.view(), Modality::Joint, Stream::Spatial).is_err());

        // Zero input: output is the bias path plus the positional table.
        let z = Array2::<f32>::zeros((16, 33));
        let e = &a.embeddings[0][0];
        let h = a.embed(&model.params, z.view(), Modality::Joint, Stream::Temporal).unwrap();
        let b1 = model.params.vec(e.mlp.fc1.b).insert_axis(Axis(0)).to_owned();
        let bias_path = e.mlp.fc2.forward(&model.params, crate::nn::gelu(&b1).view());
        let want = &model.params.mat(e.pos) + &bias_path;
        assert_eq!(h, want);
    }

    #[test]
    fn fuse_average_cases() {
        let cfg = ModelConfig::desk();
        let model = Model::<f64>::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mk = |rng: &mut ChaCha8Rng| Array2::from_shape_fn((4, 64), |_| rng.random_range(-1.0..1.0));
        let h = mk(&mut rng);
        let same = model.arch.fuse_tokens(&model.params, Stream::Temporal, &[h.clone(), h.clone(), h.clone()]).unwrap();
        assert!(same.iter().zip(h.iter()).all(|(a, b)| (a - b).abs() <= 1e-15));
        let neg = model.arch.fuse_tokens(&model.params, Stream::Temporal, &[h.clone(), -&h]).unwrap();
        assert!(neg.iter().all(|v| *v == 0.0));
        let (a, b, c) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let f = model.arch.fuse_tokens(&model.params, Stream::Spatial, &[a.clone(), b.clone(), c.clone()]).unwrap();
        for i in 0..4 {
            for j in 0..64 {
                assert!((f[[i, j]] - (a[[i, j]] + b[[i, j]] + c[[i, j]]) / 3.0).abs() <= 1e-7);
            }
        }
        assert!(model.arch.fuse_tokens::<f64>(&model.params, Stream::Spatial, &[]).is_err());
        assert!(model.arch.fuse_tokens(&model.params, Stream::Spatial, &[a, Array2::zeros((3, 64))]).is_err());
    }

    #[test]
    fn encoder_parameters_shared_across_modalities() {
        let one = Architecture::new(&ModelConfig {
            modalities: ModalitySet::single(Modality::Joint),
            ..ModelConfig::desk()
        })
        .unwrap();
        let three = Architecture::new(&ModelConfig::desk()).unwrap();
        assert_eq!(one.encoder_param_count(), three.encoder_param_count());
        assert!(one.embedding_param_count() < three.embedding_param_count());
        assert_eq!(three.n_heads(), 8);
        assert_eq!(one.n_heads(), 4);
        assert_eq!(
            three.layout().len(),
            three.encoder_param_count() + three.embedding_param_count() + three.head_param_count()
        );
        let lin = Architecture::new(&ModelConfig {
            fusion: Fusion::Linear,
            ..ModelConfig::desk()
        })
        .unwrap();
        assert_eq!(lin.fusion_param_count(), 2 * (3 * 64 * 64 + 64));
    }

    #[test]
    fn token_duplication_leaves_pooled_output_unchanged() {
        let cfg = ModelConfig::desk();
        let model = Model::<f64>::new(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = Array2::from_shape_fn((2, 64), |_| rng.random_range(-1.0..1.0));
        let dup = concatenate![Axis(0), h, h];
        for st in Stream::BOTH {
            let a = model.arch.encode(&model.params, st, h.view()).unwrap();
            let b = model.arch.encode(&model.params, st, dup.view()).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() <= 1e-5);
            }
        }
        let single = model.arch.encode(&model.params, Stream::Temporal, h.slice(s![0..1, ..])).unwrap();
        assert_eq!(single.len(), 64);
        assert!(single.iter().all(|v| v.is_finite()));
        let mut bad = h.clone();
        bad[[0, 0]] = f64::NAN;
        assert!(matches!(model.arch.encode(&model.params, Stream::Temporal, bad.view()), Err(Error::Numerical(_))));
    }

    #[test]
    fn heads_are_independent() {
        let model = Model::<f32>::new(&ModelConfig::desk(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let y = Array1::from_shape_fn(64, |i| (i as f32 * 0.1).sin());
        let key = |t, s| HeadKey { target: t, stream: s };
        let a = model.arch.project(&model.params, key(HeadTarget::Modality(Modality::Joint), HeadStream::Temporal), y.view()).unwrap();
        let b = model.arch.project(&model.params, key(HeadTarget::Modality(Modality::Bone), HeadStream::Temporal), y.view()).unwrap();
        let c = model.arch.project(&model.params, key(HeadTarget::Multimodal, HeadStream::Spatial), y.view()).unwrap();
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 64);
        let again = model.arch.project(&model.params, key(HeadTarget::Modality(Modality::Joint), HeadStream::Temporal), y.view()).unwrap();
        assert_eq!(a, again);
        assert!(model.arch.project(&model.params, key(HeadTarget::Multimodal, HeadStream::Global), y.view()).is_err());
    }

    #[test]
    fn batch_forward_shapes_and_composed_target() {
        let cfg = ModelConfig::desk();
        let model = Model::<f32>::new(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = bundles(&cfg, 5, 1);
        let (reps, proj) = model.forward_batch(&b).unwrap();
        let BatchProjections::Full(p) = proj else { panic!() };
        assert_eq!(p.composed.temporal.nrows(), 5);
        assert_eq!(p.modalities.len(), 3);
        // Recompute z_t from the returned y_t^k.
        for (i, r) in reps.iter().enumerate() {
            let mut mean = Array1::<f32>::zeros(64);
            for y in &r.unimodal[0] {
                mean += y;
            }
            mean /= 3.0;
            let key = HeadKey {
                target: HeadTarget::Multimodal,
                stream: HeadStream::Temporal,
            };
            let z = model.arch.project(&model.params, key, mean.view()).unwrap();
            for j in 0..64 {
                assert!((z[j] as f64 - p.composed.temporal[[i, j]]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn shared_embedding_fusion_identity() {
        let cfg = ModelConfig::desk();
        let mut model = Model::<f32>::new(&cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        // Force every modality's embedding parameters equal to the joint ones
        // and feed identical inputs.
        let specs = model.arch.layout().specs().to_vec();
        for s in specs.iter().filter(|s| s.name.starts_with("embed.joint.")) {
            let src = model.params.data[s.offset..s.offset + s.len()].to_vec();
            for other in ["bone", "motion"] {
                let name = s.name.replace("joint", other);
                let t = specs.iter().find(|x| x.name == name).unwrap();
                model.params.data[t.offset..t.offset + t.len()].copy_from_slice(&src);
            }
        }
        let mut b = bundles(&cfg, 2, 2).remove(0);
        let joint = b.views[0].clone();
        b.views = vec![joint.clone(), joint.clone(), joint];
        let fwd = model.forward_sample(&b).unwrap();
        let r = fwd.representation();
        for st in 0..2 {
            for y in &r.unimodal[st] {
                for (a, c) in y.iter().zip(r.fused[st].iter()) {
                    assert!((a - c).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn unified_extraction() {
        let cfg = ModelConfig::desk();
        let model = Model::<f32>::new(&cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = bundles(&cfg, 1, 3).remove(0);
        let j = ModalitySet::single(Modality::Joint);
        let fj = model.extract_unified(&b, &j).unwrap();
        let r = model.forward_sample(&b).unwrap().representation();
        let global_j = concatenate![Axis(0), r.unimodal[0][0], r.unimodal[1][0]];
        assert_eq!(fj, global_j);
        let fjb = model.extract_unified(&b, &"J,B".parse().unwrap()).unwrap();
        let fall = model.extract_unified(&b, &ModalitySet::all()).unwrap();
        assert_eq!(fjb.len(), 128);
        assert_eq!(fall.len(), 128);
        assert_ne!(fj, fjb);
        assert_ne!(fjb, fall);
        assert_ne!(fj, fall);
    }

    /// Whole-model gradient check through the pretraining loss in f64.
    fn check_model_gradient(cfg: ModelConfig) {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model32 = Model::<f32>::new(&cfg, &mut rng).unwrap();
        let model = model32.cast::<f64>();
        let batch = bundles(&cfg, 4, 4);
        let lcfg = LossConfig::default();
        let loss_and_grads = |m: &Model<f64>| {
            let fwd: Vec<_> = batch.iter().map(|b| m.forward_sample(b).unwrap()).collect();
            let projs: Vec<_> = fwd.iter().map(|f| f.projections()).collect();
            let bp = assemble_projections(&cfg.modalities, &projs).unwrap();
            let (total, g) = match &bp {
                BatchProjections::Full(p) => {
                    let (b, g) = total_loss_grad(p, &lcfg).unwrap();
                    (b.total, BatchProjections::Full(g))
                }
                BatchProjections::Baseline(p) => {
                    let (b, g) = baseline_loss_grad(p, &lcfg).unwrap();
                    let g = p
                        .iter()
                        .zip(g)
                        .map(|(m, (u, d))| GlobalProjection {
                            modality: m.modality,
                            unimodal: u,
                            decomposed: d,
                        })
                        .collect();
                    (b.total, BatchProjections::Baseline(g))
                }
            };
            (total, fwd, g)
        };
        let (_, fwd, g) = loss_and_grads(&model);
        let mut grads = model.zero_grads();
        for (i, f) in fwd.iter().enumerate() {
            model.backward_sample(f, &sample_gradient(&g, i), &mut grads).unwrap();
        }
        let num = numeric_grad(
            &model.params,
            |q| {
                let m = Model {
                    arch: model.arch.clone(),
                    params: q.clone(),
                };
                loss_and_grads(&m).0
            },
            1e-6,
        );
        let e = max_rel_err(&grads.data, &num);
        assert!(e < 1e-5, "model gradient error {e}");
        // Every tensor receives some gradient.
        for s in model.arch.layout().specs() {
            let any = grads.data[s.offset..s.offset + s.len()].iter().any(|v| *v != 0.0);
            assert!(any, "{} received no gradient", s.name);
        }
    }

    #[test]
    fn full_model_gradient_matches_finite_differences() {
        check_model_gradient(tiny_cfg());
    }

    #[test]
    fn linear_fusion_gradient_matches_finite_differences() {
        check_model_gradient(ModelConfig {
            fusion: Fusion::Linear,
            ..tiny_cfg()
        });
    }

    #[test]
    fn baseline_gradient_matches_finite_differences() {
        check_model_gradient(ModelConfig {
            objective: Objective::Baseline,
            ..tiny_cfg()
        });
    }

    #[test]
    fn unified_gradient_matches_finite_differences() {
        let cfg = tiny_cfg();
        let model = Model::<f32>::new(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap().cast::<f64>();
        let b = bundles(&cfg, 1, 5).remove(0);
        let subset: ModalitySet = "J,M".parse().unwrap();
        let w = Array1::from_shape_fn(2 * cfg.d_model, |i| ((i * 7) as f64).cos());
        let (_, cache) = model.unified_forward(&b, &subset).unwrap();
        let mut g = model.zero_grads();
        model.unified_backward(&cache, w.view(), &mut g);
        let num = numeric_grad(
            &model.params,
            |q| {
                let m = Model {
                    arch: model.arch.clone(),
                    params: q.clone(),
                };
                m.extract_unified(&b, &subset).unwrap().dot(&w)
            },
            1e-6,
        );
        assert!(max_rel_err(&g.data, &num) < 1e-5);
    }
}
