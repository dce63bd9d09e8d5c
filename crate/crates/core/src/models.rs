//! Toy forward-only architectures with per-layer feature taps and a
//! registry of normalization affine parameters.
//!
//! Two architectures are provided: a small vision transformer (`TinyVit`)
//! and a small group-normalized CNN (`TinyCnn`). Both are written once,
//! generically over [`Ops`](crate::graph::Ops), so the forward-only engine
//! and any reverse-mode implementation evaluate the same computation.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{multi_head_attention, AttentionWeights, Eager, Ops};
use crate::tensor::{self, Tensor};
use crate::util::seeded_rng;
use rand_distr::{Distribution, Normal};

/// Epsilon inside every normalization square root.
pub const NORM_EPS: f64 = 1e-5;
/// Number of classes in the toy task.
pub const NUM_CLASSES: usize = 8;
/// Input images are 1x16x16.
pub const IMAGE_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    TinyVit,
    TinyCnn,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::TinyVit => "tiny_vit",
            Architecture::TinyCnn => "tiny_cnn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tiny_vit" | "vit" => Ok(Architecture::TinyVit),
            "tiny_cnn" | "cnn" => Ok(Architecture::TinyCnn),
            other => Err(Error::Config(format!("unknown architecture '{other}'"))),
        }
    }
}

/// TinyViT: 4 transformer blocks, 16 4x4 patches plus a class token
/// (M = 17), width 32, two heads, MLP hidden 64.
pub const VIT_BLOCKS: usize = 4;
pub const VIT_DIM: usize = 32;
pub const VIT_HEADS: usize = 2;
pub const VIT_PATCH: usize = 4;
pub const VIT_TOKENS: usize = 17;
pub const VIT_MLP_HIDDEN: usize = 64;

/// TinyCNN: 4 conv stages with GroupNorm(groups=4).
pub const CNN_CHANNELS: [usize; 4] = [8, 16, 16, 32];
pub const CNN_STRIDES: [usize; 4] = [1, 2, 1, 2];
pub const CNN_GROUPS: usize = 4;

// ---------------------------------------------------------------------------
// Parameter store
// ---------------------------------------------------------------------------

/// Weight tensor stored as int8 with one symmetric per-tensor scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantTensor {
    pub shape: Vec<usize>,
    pub scale: f64,
    pub values: Vec<i8>,
}

impl QuantTensor {
    /// Symmetric per-tensor quantization: scale = max|w|/127, with the
    /// all-zero tensor given scale 1.0 by convention.
    pub fn quantize(t: &Tensor) -> Self {
        let max = t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = if max == 0.0 { 1.0 } else { max / 127.0 };
        let values = t
            .data()
            .iter()
            .map(|v| (v / scale).round().clamp(-127.0, 127.0) as i8)
            .collect();
        Self {
            shape: t.shape().to_vec(),
            scale,
            values,
        }
    }

    pub fn dequantize(&self) -> Tensor {
        let data = self.values.iter().map(|&q| q as f64 * self.scale).collect();
        Tensor::new(self.shape.clone(), data).expect("shape preserved")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ParamValue {
    Float(Tensor),
    Quant(QuantTensor),
}

/// Whether a parameter is a linear/conv weight (quantization target) or
/// anything else (bias, norm affine, embedding); the latter stay float.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Other,
}

/// Named parameter store with stable insertion order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    kinds: Vec<ParamKind>,
    values: Vec<ParamValue>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn insert(&mut self, name: &str, kind: ParamKind, value: Tensor) {
        debug_assert!(!self.index.contains_key(name), "duplicate param {name}");
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.kinds.push(kind);
        self.values.push(ParamValue::Float(value));
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    fn idx(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Input(format!("unknown parameter '{name}'")))
    }

    pub fn kind(&self, name: &str) -> Result<ParamKind> {
        Ok(self.kinds[self.idx(name)?])
    }

    pub fn value(&self, name: &str) -> Result<&ParamValue> {
        Ok(&self.values[self.idx(name)?])
    }

    pub fn set_value(&mut self, name: &str, value: ParamValue) -> Result<()> {
        let i = self.idx(name)?;
        self.values[i] = value;
        Ok(())
    }

    /// Materialized tensor; int8 weights are dequantized on the fly.
    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        Ok(match self.value(name)? {
            ParamValue::Float(t) => t.clone(),
            ParamValue::Quant(q) => q.dequantize(),
        })
    }

    /// Float parameter reference; errors if the parameter is quantized.
    pub fn float(&self, name: &str) -> Result<&Tensor> {
        match self.value(name)? {
            ParamValue::Float(t) => Ok(t),
            ParamValue::Quant(_) => Err(Error::Input(format!(
                "parameter '{name}' is quantized and cannot be accessed as float"
            ))),
        }
    }

    pub fn float_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let i = self.idx(name)?;
        match &mut self.values[i] {
            ParamValue::Float(t) => Ok(t),
            ParamValue::Quant(_) => Err(Error::Input(format!(
                "parameter '{name}' is quantized and cannot be accessed as float"
            ))),
        }
    }

    /// Total scalar count over all parameters.
    pub fn numel(&self) -> usize {
        self.values
            .iter()
            .map(|v| match v {
                ParamValue::Float(t) => t.numel(),
                ParamValue::Quant(q) => q.values.len(),
            })
            .sum()
    }
}

// ---------------------------------------------------------------------------
// Model graph
// ---------------------------------------------------------------------------

/// One normalization instance in the registry: its owning layer index and
/// the names of its gamma/beta parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormInstance {
    pub layer: usize,
    pub gamma: String,
    pub beta: String,
    pub dim: usize,
}

/// Per-layer captured features for one forward pass.
///
/// ViT layers yield one token matrix `[M×d]` per sample; CNN layers yield
/// one batched spatial map `[N×C×H×W]`.
#[derive(Debug, Clone)]
pub enum Features<V> {
    Tokens(Vec<V>),
    Spatial(V),
}

pub type LayerFeatures = Features<Tensor>;

impl LayerFeatures {
    pub fn num_samples(&self) -> usize {
        match self {
            Features::Tokens(v) => v.len(),
            Features::Spatial(t) => t.shape()[0],
        }
    }

    /// Number of token/spatial positions `m` per sample.
    pub fn num_positions(&self) -> usize {
        match self {
            Features::Tokens(v) => v[0].shape()[0],
            Features::Spatial(t) => t.shape()[2] * t.shape()[3],
        }
    }

    /// Feature dimension `d` of one position vector.
    pub fn dim(&self) -> usize {
        match self {
            Features::Tokens(v) => v[0].shape()[1],
            Features::Spatial(t) => t.shape()[1],
        }
    }

    /// The d-dimensional vector at position `m` of sample `i`.
    pub fn position_vector(&self, i: usize, m: usize) -> Vec<f64> {
        match self {
            Features::Tokens(v) => {
                let d = v[i].shape()[1];
                v[i].data()[m * d..(m + 1) * d].to_vec()
            }
            Features::Spatial(t) => {
                let (_, c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]);
                let (hi, wi) = (m / w, m % w);
                (0..c)
                    .map(|ci| t.data()[((i * c + ci) * h + hi) * w + wi])
                    .collect()
            }
        }
    }
}

/// Forward output in op space: logits plus whatever layers were captured.
pub struct ForwardOut<V> {
    pub logits: V,
    pub features: BTreeMap<usize, Features<V>>,
}

/// A forward-only network: architecture tag plus named parameters.
#[derive(Debug, Clone)]
pub struct ModelGraph {
    arch: Architecture,
    store: ParamStore,
    quantized: bool,
}

impl ModelGraph {
    /// Fresh model with seeded initialization.
    pub fn new(arch: Architecture, seed: u64) -> Self {
        let mut store = ParamStore::default();
        let mut rng = seeded_rng(seed);
        let normal = |std: f64, shape: Vec<usize>, rng: &mut rand_chacha::ChaCha8Rng| {
            let dist = Normal::new(0.0, std).expect("std > 0");
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| dist.sample(rng)).collect();
            Tensor::new(shape, data).expect("consistent shape")
        };
        let xavier = |fan_in: usize, fan_out: usize| (2.0 / (fan_in + fan_out) as f64).sqrt();

        match arch {
            Architecture::TinyVit => {
                let d = VIT_DIM;
                let patch_dim = VIT_PATCH * VIT_PATCH;
                store.insert(
                    "embed.w",
                    ParamKind::Weight,
                    normal(xavier(patch_dim, d), vec![patch_dim, d], &mut rng),
                );
                store.insert("embed.b", ParamKind::Other, Tensor::zeros(vec![d]));
                store.insert("cls", ParamKind::Other, normal(0.02, vec![1, d], &mut rng));
                store.insert(
                    "pos",
                    ParamKind::Other,
                    normal(0.02, vec![VIT_TOKENS, d], &mut rng),
                );
                for b in 0..VIT_BLOCKS {
                    store.insert(&format!("blk{b}.ln1.g"), ParamKind::Other, Tensor::full(vec![d], 1.0));
                    store.insert(&format!("blk{b}.ln1.b"), ParamKind::Other, Tensor::zeros(vec![d]));
                    for proj in ["wq", "wk", "wv", "wo"] {
                        store.insert(
                            &format!("blk{b}.attn.{proj}"),
                            ParamKind::Weight,
                            normal(xavier(d, d), vec![d, d], &mut rng),
                        );
                        let bias = format!("blk{b}.attn.b{}", &proj[1..]);
                        store.insert(&bias, ParamKind::Other, Tensor::zeros(vec![d]));
                    }
                    store.insert(&format!("blk{b}.ln2.g"), ParamKind::Other, Tensor::full(vec![d], 1.0));
                    store.insert(&format!("blk{b}.ln2.b"), ParamKind::Other, Tensor::zeros(vec![d]));
                    store.insert(
                        &format!("blk{b}.mlp.w1"),
                        ParamKind::Weight,
                        normal(xavier(d, VIT_MLP_HIDDEN), vec![d, VIT_MLP_HIDDEN], &mut rng),
                    );
                    store.insert(&format!("blk{b}.mlp.b1"), ParamKind::Other, Tensor::zeros(vec![VIT_MLP_HIDDEN]));
                    store.insert(
                        &format!("blk{b}.mlp.w2"),
                        ParamKind::Weight,
                        normal(xavier(VIT_MLP_HIDDEN, d), vec![VIT_MLP_HIDDEN, d], &mut rng),
                    );
                    store.insert(&format!("blk{b}.mlp.b2"), ParamKind::Other, Tensor::zeros(vec![d]));
                }
                store.insert("final_ln.g", ParamKind::Other, Tensor::full(vec![d], 1.0));
                store.insert("final_ln.b", ParamKind::Other, Tensor::zeros(vec![d]));
                store.insert(
                    "head.w",
                    ParamKind::Weight,
                    normal(xavier(d, NUM_CLASSES), vec![d, NUM_CLASSES], &mut rng),
                );
                store.insert("head.b", ParamKind::Other, Tensor::zeros(vec![NUM_CLASSES]));
            }
            Architecture::TinyCnn => {
                let mut c_in = 1;
                for (s, (&c_out, _)) in CNN_CHANNELS.iter().zip(CNN_STRIDES.iter()).enumerate() {
                    let fan_in = c_in * 9;
                    let fan_out = c_out * 9;
                    store.insert(
                        &format!("stage{s}.conv.w"),
                        ParamKind::Weight,
                        normal(xavier(fan_in, fan_out), vec![c_out, c_in, 3, 3], &mut rng),
                    );
                    store.insert(&format!("stage{s}.conv.b"), ParamKind::Other, Tensor::zeros(vec![c_out]));
                    store.insert(&format!("stage{s}.gn.g"), ParamKind::Other, Tensor::full(vec![c_out], 1.0));
                    store.insert(&format!("stage{s}.gn.b"), ParamKind::Other, Tensor::zeros(vec![c_out]));
                    c_in = c_out;
                }
                let feat = *CNN_CHANNELS.last().expect("stages nonempty");
                store.insert(
                    "head.w",
                    ParamKind::Weight,
                    normal(xavier(feat, NUM_CLASSES), vec![feat, NUM_CLASSES], &mut rng),
                );
                store.insert("head.b", ParamKind::Other, Tensor::zeros(vec![NUM_CLASSES]));
            }
        }
        Self {
            arch,
            store,
            quantized: false,
        }
    }

    pub fn from_parts(arch: Architecture, store: ParamStore, quantized: bool) -> Self {
        Self {
            arch,
            store,
            quantized,
        }
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn is_quantized(&self) -> bool {
        self.quantized
    }

    pub fn num_classes(&self) -> usize {
        NUM_CLASSES
    }

    /// Number of selectable layers (contiguous indices from 0).
    ///
    /// For the ViT these are the transformer blocks plus the final
    /// layer-norm as the output-adjacent layer; for the CNN, the stages.
    pub fn num_layers(&self) -> usize {
        match self.arch {
            Architecture::TinyVit => VIT_BLOCKS + 1,
            Architecture::TinyCnn => CNN_CHANNELS.len(),
        }
    }

    /// All normalization instances, in layer order.
    pub fn norm_registry(&self) -> Vec<NormInstance> {
        let mut reg = Vec::new();
        match self.arch {
            Architecture::TinyVit => {
                for b in 0..VIT_BLOCKS {
                    for ln in ["ln1", "ln2"] {
                        reg.push(NormInstance {
                            layer: b,
                            gamma: format!("blk{b}.{ln}.g"),
                            beta: format!("blk{b}.{ln}.b"),
                            dim: VIT_DIM,
                        });
                    }
                }
                reg.push(NormInstance {
                    layer: VIT_BLOCKS,
                    gamma: "final_ln.g".into(),
                    beta: "final_ln.b".into(),
                    dim: VIT_DIM,
                });
            }
            Architecture::TinyCnn => {
                for (s, &c) in CNN_CHANNELS.iter().enumerate() {
                    reg.push(NormInstance {
                        layer: s,
                        gamma: format!("stage{s}.gn.g"),
                        beta: format!("stage{s}.gn.b"),
                        dim: c,
                    });
                }
            }
        }
        reg
    }

    /// Convert all linear/conv weights to int8 with per-tensor scales.
    /// Normalization affines and biases stay 64-bit floats.
    pub fn quantize(&mut self) -> Result<()> {
        if self.quantized {
            return Err(Error::AlreadyQuantized);
        }
        let names: Vec<String> = self.store.names().to_vec();
        for name in names {
            if self.store.kind(&name)? == ParamKind::Weight {
                let t = self.store.tensor(&name)?;
                self.store
                    .set_value(&name, ParamValue::Quant(QuantTensor::quantize(&t)))?;
            }
        }
        self.quantized = true;
        Ok(())
    }

    fn check_input(&self, batch: &Tensor) -> Result<usize> {
        let (n, c, h, w) = batch.dims4("forward input")?;
        if c != 1 || h != IMAGE_SIZE || w != IMAGE_SIZE {
            return Err(Error::ShapeMismatch {
                op: "forward input",
                left: batch.shape().to_vec(),
                right: vec![n, 1, IMAGE_SIZE, IMAGE_SIZE],
            });
        }
        Ok(n)
    }

    /// Forward pass in op space. Capturing features never changes logits;
    /// it only records intermediate values.
    pub fn forward_generic<O: Ops>(
        &self,
        ops: &mut O,
        batch: &Tensor,
        capture: &BTreeSet<usize>,
    ) -> Result<ForwardOut<O::V>> {
        let n = self.check_input(batch)?;
        for &l in capture {
            if l >= self.num_layers() {
                return Err(Error::Input(format!(
                    "capture layer {l} out of range (model has {} layers)",
                    self.num_layers()
                )));
            }
        }
        match self.arch {
            Architecture::TinyVit => self.forward_vit(ops, batch, n, capture),
            Architecture::TinyCnn => self.forward_cnn(ops, batch, capture),
        }
    }

    fn leaf<O: Ops>(&self, ops: &mut O, name: &str) -> Result<O::V> {
        Ok(ops.leaf(name, &self.store.tensor(name)?))
    }

    fn forward_vit<O: Ops>(
        &self,
        ops: &mut O,
        batch: &Tensor,
        n: usize,
        capture: &BTreeSet<usize>,
    ) -> Result<ForwardOut<O::V>> {
        let d = VIT_DIM;
        let embed_w = self.leaf(ops, "embed.w")?;
        let embed_b = self.leaf(ops, "embed.b")?;
        let cls = self.leaf(ops, "cls")?;
        let pos = self.leaf(ops, "pos")?;
        let final_g = self.leaf(ops, "final_ln.g")?;
        let final_b = self.leaf(ops, "final_ln.b")?;
        let head_w = self.leaf(ops, "head.w")?;
        let head_b = self.leaf(ops, "head.b")?;

        struct BlockWeights<V> {
            ln1_g: V,
            ln1_b: V,
            attn: AttentionWeights<V>,
            ln2_g: V,
            ln2_b: V,
            w1: V,
            b1: V,
            w2: V,
            b2: V,
        }
        let mut blocks = Vec::with_capacity(VIT_BLOCKS);
        for b in 0..VIT_BLOCKS {
            blocks.push(BlockWeights {
                ln1_g: self.leaf(ops, &format!("blk{b}.ln1.g"))?,
                ln1_b: self.leaf(ops, &format!("blk{b}.ln1.b"))?,
                attn: AttentionWeights {
                    wq: self.leaf(ops, &format!("blk{b}.attn.wq"))?,
                    bq: self.leaf(ops, &format!("blk{b}.attn.bq"))?,
                    wk: self.leaf(ops, &format!("blk{b}.attn.wk"))?,
                    bk: self.leaf(ops, &format!("blk{b}.attn.bk"))?,
                    wv: self.leaf(ops, &format!("blk{b}.attn.wv"))?,
                    bv: self.leaf(ops, &format!("blk{b}.attn.bv"))?,
                    wo: self.leaf(ops, &format!("blk{b}.attn.wo"))?,
                    bo: self.leaf(ops, &format!("blk{b}.attn.bo"))?,
                },
                ln2_g: self.leaf(ops, &format!("blk{b}.ln2.g"))?,
                ln2_b: self.leaf(ops, &format!("blk{b}.ln2.b"))?,
                w1: self.leaf(ops, &format!("blk{b}.mlp.w1"))?,
                b1: self.leaf(ops, &format!("blk{b}.mlp.b1"))?,
                w2: self.leaf(ops, &format!("blk{b}.mlp.w2"))?,
                b2: self.leaf(ops, &format!("blk{b}.mlp.b2"))?,
            });
        }

        let mut captured: BTreeMap<usize, Vec<O::V>> = BTreeMap::new();
        let mut logit_rows = Vec::with_capacity(n);
        let (_, c, h, w) = batch.dims4("forward input")?;
        for s in 0..n {
            // patch extraction on raw input data is constant wrt parameters
            let start = s * c * h * w;
            let img = Tensor::new(vec![c, h, w], batch.data()[start..start + c * h * w].to_vec())?;
            let patches = tensor::patchify(&img, VIT_PATCH)?;
            let xp = ops.constant(&patches);
            let emb0 = ops.matmul(&xp, &embed_w)?;
            let emb = ops.add_bias_row(&emb0, &embed_b)?;
            let mut x = ops.concat_rows(&[cls.clone(), emb])?;
            x = ops.add(&x, &pos)?;
            for (b, bw) in blocks.iter().enumerate() {
                let h1 = ops.layer_norm(&x, &bw.ln1_g, &bw.ln1_b, NORM_EPS)?;
                let a = multi_head_attention(ops, &h1, &bw.attn, VIT_HEADS, d)?;
                x = ops.add(&x, &a)?;
                let h2 = ops.layer_norm(&x, &bw.ln2_g, &bw.ln2_b, NORM_EPS)?;
                let m0 = ops.matmul(&h2, &bw.w1)?;
                let m0b = ops.add_bias_row(&m0, &bw.b1)?;
                let m1 = ops.gelu(&m0b)?;
                let m2a = ops.matmul(&m1, &bw.w2)?;
                let m2 = ops.add_bias_row(&m2a, &bw.b2)?;
                x = ops.add(&x, &m2)?;
                if capture.contains(&b) {
                    captured.entry(b).or_default().push(x.clone());
                }
            }
            let xf = ops.layer_norm(&x, &final_g, &final_b, NORM_EPS)?;
            if capture.contains(&VIT_BLOCKS) {
                captured.entry(VIT_BLOCKS).or_default().push(xf.clone());
            }
            let cls_tok = ops.slice_rows(&xf, 0, 1)?;
            let row0 = ops.matmul(&cls_tok, &head_w)?;
            logit_rows.push(ops.add_bias_row(&row0, &head_b)?);
        }
        let logits = ops.concat_rows(&logit_rows)?;
        let features = captured
            .into_iter()
            .map(|(l, v)| (l, Features::Tokens(v)))
            .collect();
        Ok(ForwardOut { logits, features })
    }

    fn forward_cnn<O: Ops>(
        &self,
        ops: &mut O,
        batch: &Tensor,
        capture: &BTreeSet<usize>,
    ) -> Result<ForwardOut<O::V>> {
        let mut x = ops.constant(batch);
        let mut features = BTreeMap::new();
        for (s, (&_c_out, &stride)) in CNN_CHANNELS.iter().zip(CNN_STRIDES.iter()).enumerate() {
            let w = self.leaf(ops, &format!("stage{s}.conv.w"))?;
            let b = self.leaf(ops, &format!("stage{s}.conv.b"))?;
            let g = self.leaf(ops, &format!("stage{s}.gn.g"))?;
            let be = self.leaf(ops, &format!("stage{s}.gn.b"))?;
            x = ops.conv2d(&x, &w, stride, 1)?;
            x = ops.add_bias_chan(&x, &b)?;
            x = ops.group_norm(&x, CNN_GROUPS, &g, &be, NORM_EPS)?;
            x = ops.relu(&x)?;
            if capture.contains(&s) {
                features.insert(s, Features::Spatial(x.clone()));
            }
        }
        let pooled = ops.global_avg_pool(&x)?;
        let head_w = self.leaf(ops, "head.w")?;
        let head_b = self.leaf(ops, "head.b")?;
        let raw = ops.matmul(&pooled, &head_w)?;
        let logits = ops.add_bias_row(&raw, &head_b)?;
        Ok(ForwardOut { logits, features })
    }

    /// Plain forward pass: logits `[N×C]` plus captured per-layer features.
    pub fn forward(
        &self,
        batch: &Tensor,
        capture: &BTreeSet<usize>,
    ) -> Result<(Tensor, BTreeMap<usize, LayerFeatures>)> {
        let out = self.forward_generic(&mut Eager, batch, capture)?;
        Ok((out.logits, out.features))
    }

    /// Logits only.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.forward(batch, &BTreeSet::new())?.0)
    }
}

/// Argmax class index per row of a logits matrix.
pub fn predictions(logits: &Tensor) -> Vec<usize> {
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    (0..n)
        .map(|i| {
            let row = &logits.data()[i * c..(i + 1) * c];
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .map(|(j, _)| j)
                .expect("nonempty row")
        })
        .collect()
}

// ---------------------------------------------------------------------------
// ParamSelection: flat read/write view over the norm affines of a layer set
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SelEntry {
    name: String,
    offset: usize,
    len: usize,
}

/// Flat view over the concatenated (gamma, beta) parameters of a sorted
/// layer set. Reading then writing round-trips bitwise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamSelection {
    layers: Vec<usize>,
    entries: Vec<SelEntry>,
    dim: usize,
}

impl ParamSelection {
    pub fn for_layers(model: &ModelGraph, layers: &[usize]) -> Result<Self> {
        let mut sorted: Vec<usize> = layers.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.is_empty() {
            return Err(Error::Input("empty layer set for selection".into()));
        }
        if let Some(&bad) = sorted.iter().find(|&&l| l >= model.num_layers()) {
            return Err(Error::Input(format!(
                "layer {bad} out of range (model has {} layers)",
                model.num_layers()
            )));
        }
        let mut entries = Vec::new();
        let mut offset = 0;
        for inst in model.norm_registry() {
            if sorted.binary_search(&inst.layer).is_ok() {
                for name in [inst.gamma, inst.beta] {
                    let len = model.store().float(&name)?.numel();
                    entries.push(SelEntry {
                        name,
                        offset,
                        len,
                    });
                    offset += len;
                }
            }
        }
        Ok(Self {
            layers: sorted,
            entries,
            dim: offset,
        })
    }

    /// Every selectable layer of the model.
    pub fn all_layers(model: &ModelGraph) -> Self {
        let layers: Vec<usize> = (0..model.num_layers()).collect();
        Self::for_layers(model, &layers).expect("full layer set is valid")
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    /// Dimensionality of the flat view (the ZOO optimization space).
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn read(&self, model: &ModelGraph) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        for e in &self.entries {
            let t = model.store().float(&e.name)?;
            out[e.offset..e.offset + e.len].copy_from_slice(t.data());
        }
        Ok(out)
    }

    pub fn write(&self, model: &mut ModelGraph, flat: &[f64]) -> Result<()> {
        if flat.len() != self.dim {
            return Err(Error::ShapeMismatch {
                op: "ParamSelection::write",
                left: vec![self.dim],
                right: vec![flat.len()],
            });
        }
        for e in &self.entries {
            let t = model.store_mut().float_mut(&e.name)?;
            t.data_mut()
                .copy_from_slice(&flat[e.offset..e.offset + e.len]);
        }
        Ok(())
    }
}
