//! Concrete architectures for the arithmetic tasks.
//!
//! A model is `rho(pool(f(embed(x))))`:
//!
//! * `embed` is a frozen random table, `floor(100/k)` wide for k-ary models
//!   and 100 wide for full-sequence ones.
//! * `f` is a one-hidden-layer tanh MLP with 30 units over the concatenated
//!   `k` embeddings, or an LSTM(50) / GRU(80) returning its last hidden state.
//!   Recurrent cells carry two bias vectors per gate block (input side and
//!   hidden side).
//! * `rho` is linear or a tanh MLP with 100 hidden units.
//!
//! Weights are stored `[fan_in, fan_out]` so a batch `[B, fan_in]` multiplies
//! on the left.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, NodeId, Tensor};
use crate::pooling::{self, Head, PoolError, SequenceFunction};
use crate::seed;

pub const BASE_EMBED_DIM: usize = 100;
pub const MLP_F_HIDDEN: usize = 30;
pub const LSTM_HIDDEN: usize = 50;
pub const GRU_HIDDEN: usize = 80;
pub const RHO_HIDDEN: usize = 100;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error("digit {digit} is outside the vocabulary 0..{vocab}")]
    OutOfVocab { digit: usize, vocab: usize },
    #[error("recurrent f needs a non-empty sequence")]
    EmptySequence,
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<crate::perm::PermError> for NetError {
    fn from(e: crate::perm::PermError) -> Self {
        NetError::Pool(e.into())
    }
}

pub type Result<T> = std::result::Result<T, NetError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FArch {
    Mlp30,
    Lstm50,
    Gru80,
}

impl FArch {
    pub fn output_dim(self) -> usize {
        match self {
            FArch::Mlp30 => MLP_F_HIDDEN,
            FArch::Lstm50 => LSTM_HIDDEN,
            FArch::Gru80 => GRU_HIDDEN,
        }
    }

    pub fn is_recurrent(self) -> bool {
        !matches!(self, FArch::Mlp30)
    }

    pub fn label(self) -> &'static str {
        match self {
            FArch::Mlp30 => "MLP(30)",
            FArch::Lstm50 => "LSTM(50)",
            FArch::Gru80 => "GRU(80)",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhoArch {
    Linear,
    Mlp100,
}

impl RhoArch {
    pub fn label(self) -> &'static str {
        match self {
            RhoArch::Linear => "Linear",
            RhoArch::Mlp100 => "MLP(100)",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub vocab: usize,
    /// Arity of `f`; `None` for full-sequence (recurrent) models.
    pub k: Option<usize>,
    pub embed_dim: usize,
    pub f_arch: FArch,
    pub rho_arch: RhoArch,
    #[serde(default = "default_output_dim")]
    pub output_dim: usize,
    /// `rho` reads its input multiplied by this. Setting it to `|h|` with
    /// `k = 1` turns the pooled mean into the DeepSets sum.
    #[serde(default = "default_rho_input_scale")]
    pub rho_input_scale: f64,
}

fn default_output_dim() -> usize {
    1
}

fn default_rho_input_scale() -> f64 {
    1.0
}

impl ModelSpec {
    /// MLP(30) over `k` concatenated embeddings of width `floor(100/k)`.
    pub fn kary(vocab: usize, k: usize, rho_arch: RhoArch) -> Self {
        ModelSpec {
            vocab,
            k: Some(k),
            embed_dim: BASE_EMBED_DIM / k.max(1),
            f_arch: FArch::Mlp30,
            rho_arch,
            output_dim: 1,
            rho_input_scale: 1.0,
        }
    }

    /// Recurrent `f` over the whole sequence with 100-wide embeddings.
    pub fn full(vocab: usize, f_arch: FArch, rho_arch: RhoArch) -> Self {
        ModelSpec {
            vocab,
            k: None,
            embed_dim: BASE_EMBED_DIM,
            f_arch,
            rho_arch,
            output_dim: 1,
            rho_input_scale: 1.0,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.vocab == 0 {
            return Err("vocab must be positive".into());
        }
        if self.embed_dim == 0 {
            return Err("embed_dim must be at least 1".into());
        }
        if self.output_dim == 0 {
            return Err("output_dim must be positive".into());
        }
        if !(self.rho_input_scale > 0.0 && self.rho_input_scale.is_finite()) {
            return Err("rho_input_scale must be a positive finite number".into());
        }
        match (self.f_arch, self.k) {
            (FArch::Mlp30, None) => Err("an MLP f needs an arity k".into()),
            (FArch::Mlp30, Some(0)) => Err("k must be at least 1".into()),
            (FArch::Lstm50 | FArch::Gru80, Some(_)) => Err("recurrent f reads the full sequence; leave k unset".into()),
            _ => Ok(()),
        }
    }

    fn f_input_dim(&self) -> usize {
        match self.f_arch {
            FArch::Mlp30 => self.k.unwrap_or(1) * self.embed_dim,
            _ => self.embed_dim,
        }
    }
}

/// Closed-form number of trainable parameters (the embedding is frozen).
pub fn trainable_param_count(spec: &ModelSpec) -> usize {
    let e = spec.embed_dim;
    let f = match spec.f_arch {
        FArch::Mlp30 => spec.k.unwrap_or(1) * e * MLP_F_HIDDEN + MLP_F_HIDDEN,
        FArch::Lstm50 => 4 * LSTM_HIDDEN * (e + LSTM_HIDDEN) + 2 * 4 * LSTM_HIDDEN,
        FArch::Gru80 => 3 * GRU_HIDDEN * (e + GRU_HIDDEN) + 2 * 3 * GRU_HIDDEN,
    };
    let d = spec.f_arch.output_dim();
    let out = spec.output_dim;
    let rho = match spec.rho_arch {
        RhoArch::Linear => d * out + out,
        RhoArch::Mlp100 => d * RHO_HIDDEN + RHO_HIDDEN + RHO_HIDDEN * out + out,
    };
    f + rho
}

/// Frozen lookup table, `N(0, 1/embed_dim)` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    vocab: usize,
    dim: usize,
    table: Vec<f64>,
}

impl Embedding {
    pub fn generate(vocab: usize, dim: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        let scale = 1.0 / (dim as f64).sqrt();
        let table = (0..vocab * dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        Embedding { vocab, dim, table }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn lookup(&self, digit: usize) -> Result<&[f64]> {
        if digit >= self.vocab {
            return Err(NetError::OutOfVocab {
                digit,
                vocab: self.vocab,
            });
        }
        Ok(&self.table[digit * self.dim..(digit + 1) * self.dim])
    }

    pub fn embed(&self, digit: usize) -> Result<Tensor> {
        Ok(Tensor::vector(self.lookup(digit)?.to_vec()))
    }

    /// `[B, dim]` rows for one digit per example.
    pub fn embed_batch(&self, digits: impl IntoIterator<Item = usize>) -> Result<Tensor> {
        let mut data = Vec::new();
        let mut rows = 0;
        for d in digits {
            data.extend_from_slice(self.lookup(d)?);
            rows += 1;
        }
        Ok(Tensor::matrix(rows, self.dim, data)?)
    }
}

/// Named trainable tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<NamedTensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push(NamedTensor {
            name: name.into(),
            tensor: tensor.with_requires_grad(true),
        });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedTensor> {
        self.entries.iter()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|e| &mut e.tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Registers every tensor as a trainable leaf, in order.
    pub fn bind(&self, g: &mut Graph) -> Vec<NodeId> {
        self.entries.iter().map(|e| g.param(e.tensor.clone())).collect()
    }

    /// Registers every tensor as a constant (no gradient bookkeeping).
    pub fn bind_frozen(&self, g: &mut Graph) -> Vec<NodeId> {
        self.entries.iter().map(|e| g.constant(e.tensor.clone())).collect()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.entries
            .iter()
            .flat_map(|e| e.tensor.data().iter().copied())
            .collect()
    }

    /// FNV-1a over the bit patterns of every parameter, as hex.
    pub fn checksum(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for e in &self.entries {
            for v in e.tensor.data() {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        format!("{h:016x}")
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        ParamSet::new()
    }
}

/// Gradients aligned with a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Gradients(params.iter().map(|e| vec![0.0; e.tensor.numel()]).collect())
    }

    pub fn from_graph(g: &Graph, ids: &[NodeId], params: &ParamSet) -> Self {
        Gradients(
            ids.iter()
                .zip(params.iter())
                .map(|(&id, e)| g.grad(id).map_or_else(|| vec![0.0; e.tensor.numel()], <[f64]>::to_vec))
                .collect(),
        )
    }

    pub fn add_scaled(&mut self, other: &Gradients, factor: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += factor * y);
        }
    }

    pub fn max_abs_diff(&self, other: &Gradients) -> f64 {
        self.0
            .iter()
            .flatten()
            .zip(other.0.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().flatten().map(|v| v.abs()).fold(0.0, f64::max)
    }
}

fn uniform_tensor<R: Rng>(rng: &mut R, shape: Vec<usize>, bound: f64) -> Tensor {
    let n = shape.iter().product();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape product")
}

/// Fresh parameters: uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamSet {
    let mut rng = seed::rng(seed);
    let mut p = ParamSet::new();
    let input = spec.f_input_dim();
    let bound = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
    match spec.f_arch {
        FArch::Mlp30 => {
            p.push("f.w", uniform_tensor(&mut rng, vec![input, MLP_F_HIDDEN], bound(input)));
            p.push("f.b", uniform_tensor(&mut rng, vec![MLP_F_HIDDEN], bound(input)));
        }
        FArch::Lstm50 | FArch::Gru80 => {
            let h = spec.f_arch.output_dim();
            let gates = if spec.f_arch == FArch::Lstm50 { 4 } else { 3 };
            let b = bound(h);
            p.push("f.w_ih", uniform_tensor(&mut rng, vec![input, gates * h], bound(input)));
            p.push("f.b_ih", uniform_tensor(&mut rng, vec![gates * h], b));
            p.push("f.w_hh", uniform_tensor(&mut rng, vec![h, gates * h], b));
            p.push("f.b_hh", uniform_tensor(&mut rng, vec![gates * h], b));
        }
    }
    let d = spec.f_arch.output_dim();
    let out = spec.output_dim;
    match spec.rho_arch {
        RhoArch::Linear => {
            p.push("rho.w", uniform_tensor(&mut rng, vec![d, out], bound(d)));
            p.push("rho.b", uniform_tensor(&mut rng, vec![out], bound(d)));
        }
        RhoArch::Mlp100 => {
            p.push("rho.w1", uniform_tensor(&mut rng, vec![d, RHO_HIDDEN], bound(d)));
            p.push("rho.b1", uniform_tensor(&mut rng, vec![RHO_HIDDEN], bound(d)));
            p.push(
                "rho.w2",
                uniform_tensor(&mut rng, vec![RHO_HIDDEN, out], bound(RHO_HIDDEN)),
            );
            p.push("rho.b2", uniform_tensor(&mut rng, vec![out], bound(RHO_HIDDEN)));
        }
    }
    p
}

/// `tanh(x W + b)` for `x: [B, k*e]`.
pub fn mlp_f_forward(g: &mut Graph, w: NodeId, b: NodeId, x: NodeId) -> Result<NodeId> {
    let pre = g.matmul(x, w)?;
    let pre = g.add_bias(pre, b)?;
    Ok(g.tanh(pre)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RnnKind {
    Lstm,
    Gru,
}

/// Graph handles of one recurrent cell's parameters.
#[derive(Debug, Clone, Copy)]
pub struct RnnParams {
    pub w_ih: NodeId,
    pub b_ih: NodeId,
    pub w_hh: NodeId,
    pub b_hh: NodeId,
}

/// Runs the cell over `seq` (each `[B, input]`) from zero state and returns
/// the last hidden state `[B, hidden]`.
pub fn rnn_forward(g: &mut Graph, kind: RnnKind, p: RnnParams, seq: &[NodeId]) -> Result<NodeId> {
    let first = *seq.first().ok_or(NetError::EmptySequence)?;
    let batch = g.value(first).shape()[0];
    let gates = g.value(p.b_ih).numel();
    let hidden = match kind {
        RnnKind::Lstm => gates / 4,
        RnnKind::Gru => gates / 3,
    };
    let mut h = g.constant(Tensor::zeros(vec![batch, hidden]));
    let mut c = g.constant(Tensor::zeros(vec![batch, hidden]));
    for &x in seq {
        let xi = g.matmul(x, p.w_ih)?;
        let xi = g.add_bias(xi, p.b_ih)?;
        let hh = g.matmul(h, p.w_hh)?;
        let hh = g.add_bias(hh, p.b_hh)?;
        match kind {
            RnnKind::Lstm => {
                let pre = g.add(xi, hh)?;
                let i = g.slice(pre, 0, hidden)?;
                let f = g.slice(pre, hidden, 2 * hidden)?;
                let cand = g.slice(pre, 2 * hidden, 3 * hidden)?;
                let o = g.slice(pre, 3 * hidden, 4 * hidden)?;
                let i = g.sigmoid(i)?;
                let f = g.sigmoid(f)?;
                let cand = g.tanh(cand)?;
                let o = g.sigmoid(o)?;
                let keep = g.mul(f, c)?;
                let write = g.mul(i, cand)?;
                c = g.add(keep, write)?;
                let tc = g.tanh(c)?;
                h = g.mul(o, tc)?;
            }
            RnnKind::Gru => {
                // gate blocks: reset | update | new
                let xr = g.slice(xi, 0, hidden)?;
                let xz = g.slice(xi, hidden, 2 * hidden)?;
                let xn = g.slice(xi, 2 * hidden, 3 * hidden)?;
                let hr = g.slice(hh, 0, hidden)?;
                let hz = g.slice(hh, hidden, 2 * hidden)?;
                let hn = g.slice(hh, 2 * hidden, 3 * hidden)?;
                let r = g.add(xr, hr)?;
                let r = g.sigmoid(r)?;
                let z = g.add(xz, hz)?;
                let z = g.sigmoid(z)?;
                let rh = g.mul(r, hn)?;
                let n = g.add(xn, rh)?;
                let n = g.tanh(n)?;
                // h' = (1 - z) * n + z * h = n + z * (h - n)
                let diff = g.sub(h, n)?;
                let zd = g.mul(z, diff)?;
                h = g.add(n, zd)?;
            }
        }
    }
    Ok(h)
}

/// `x w + b`, or `tanh(x w1 + b1) w2 + b2`.
pub fn rho_forward(g: &mut Graph, arch: RhoArch, p: &[NodeId], x: NodeId) -> Result<NodeId> {
    match arch {
        RhoArch::Linear => {
            let y = g.matmul(x, p[0])?;
            Ok(g.add_bias(y, p[1])?)
        }
        RhoArch::Mlp100 => {
            let hdn = g.matmul(x, p[0])?;
            let hdn = g.add_bias(hdn, p[1])?;
            let hdn = g.tanh(hdn)?;
            let y = g.matmul(hdn, p[2])?;
            Ok(g.add_bias(y, p[3])?)
        }
    }
}

/// Affine map from network output to target units, fixed before training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutputScale {
    pub shift: f64,
    pub scale: f64,
}

impl Default for OutputScale {
    fn default() -> Self {
        OutputScale { shift: 0.0, scale: 1.0 }
    }
}

impl OutputScale {
    /// Mean and population standard deviation of `targets` (scale 1 when
    /// the targets are constant).
    pub fn fit(targets: &[f64]) -> Self {
        if targets.is_empty() {
            return OutputScale::default();
        }
        let n = targets.len() as f64;
        let mean = targets.iter().sum::<f64>() / n;
        let var = targets.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        OutputScale {
            shift: mean,
            scale: if sd > 0.0 { sd } else { 1.0 },
        }
    }
}

/// Parameters plus the frozen embedding.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub seed: u64,
    pub embedding: Embedding,
    pub params: ParamSet,
    pub output: OutputScale,
}

impl Model {
    /// Embedding and weights both derive from `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate().map_err(NetError::InvalidSpec)?;
        let embedding = Embedding::generate(
            spec.vocab,
            spec.embed_dim,
            seed::derive(seed, seed::stream::EMBEDDING, 0),
        );
        let params = init_params(&spec, seed::derive(seed, seed::stream::INIT, 0));
        Ok(Model {
            spec,
            seed,
            embedding,
            params,
            output: OutputScale::default(),
        })
    }

    pub fn with_output_scale(mut self, output: OutputScale) -> Self {
        self.output = output;
        self
    }

    fn f_param_count(&self) -> usize {
        if self.spec.f_arch.is_recurrent() {
            4
        } else {
            2
        }
    }

    /// The `f` and `rho` networks over bound parameter leaves.
    pub fn bind<'a>(&'a self, ids: &'a [NodeId]) -> (FNet<'a>, RhoNet<'a>) {
        let split = self.f_param_count();
        (
            FNet {
                spec: &self.spec,
                params: &ids[..split],
            },
            RhoNet {
                arch: self.spec.rho_arch,
                params: &ids[split..],
                input_scale: self.spec.rho_input_scale,
                output: self.output,
            },
        )
    }

    /// `[B, embed_dim]` constants, one per sequence position.
    pub fn embed_positions(&self, g: &mut Graph, xs: &[Vec<usize>]) -> Result<Vec<NodeId>> {
        let len = xs.first().map_or(0, Vec::len);
        if xs.iter().any(|x| x.len() != len) {
            return Err(NetError::InvalidSpec("batch sequences must share one length".into()));
        }
        (0..len)
            .map(|pos| {
                let t = self.embedding.embed_batch(xs.iter().map(|x| x[pos]))?;
                Ok(g.constant(t))
            })
            .collect()
    }
}

impl Model {
    /// Mean of the MLP `f` over index tuples into each sequence, `[B, 30]`.
    ///
    /// The first layer splits by slot, `[e_1 .. e_k] W = sum_j e_j W_j`, so
    /// each slot's projection of the whole vocabulary is one row block of a
    /// `[k V, 30]` table and a tuple is a sum of gathered rows. Tuple entries
    /// at or past the sequence length stand for zero padding.
    pub fn mlp_tuple_mean(
        &self,
        g: &mut Graph,
        ids: &[NodeId],
        xs: &[Vec<usize>],
        tuples: &[Vec<usize>],
    ) -> Result<NodeId> {
        if self.spec.f_arch != FArch::Mlp30 {
            return Err(NetError::InvalidSpec("tuple pooling needs an MLP f".into()));
        }
        let k = self.spec.k.unwrap_or(1);
        let (v, e) = (self.spec.vocab, self.spec.embed_dim);
        let len = xs.first().map_or(0, Vec::len);
        if xs.iter().any(|x| x.len() != len) {
            return Err(NetError::InvalidSpec("batch sequences must share one length".into()));
        }
        if tuples.is_empty() || tuples.iter().any(|t| t.len() > k) {
            return Err(NetError::InvalidSpec(format!(
                "need one or more tuples of at most {k} indices"
            )));
        }
        if let Some(&digit) = xs.iter().flatten().find(|&&d| d >= v) {
            return Err(NetError::OutOfVocab { digit, vocab: v });
        }
        let mut stacked = vec![0.0; k * v * k * e];
        for j in 0..k {
            for d in 0..v {
                let at = (j * v + d) * k * e + j * e;
                stacked[at..at + e].copy_from_slice(self.embedding.lookup(d)?);
            }
        }
        let stacked = g.constant(Tensor::matrix(k * v, k * e, stacked)?);
        let table = g.matmul(stacked, ids[0])?;
        let mut rows: HashMap<(usize, usize), NodeId> = HashMap::new();
        let mut acc: Option<NodeId> = None;
        for t in tuples {
            let mut pre: Option<NodeId> = None;
            for (j, &pos) in t.iter().enumerate().filter(|&(_, &pos)| pos < len) {
                let part = match rows.get(&(j, pos)) {
                    Some(&id) => id,
                    None => {
                        let idx: Vec<usize> = xs.iter().map(|x| j * v + x[pos]).collect();
                        let id = g.gather_rows(table, &idx)?;
                        rows.insert((j, pos), id);
                        id
                    }
                };
                pre = Some(match pre {
                    Some(a) => g.add(a, part)?,
                    None => part,
                });
            }
            let pre = match pre {
                Some(p) => p,
                None => g.constant(Tensor::zeros(vec![xs.len(), MLP_F_HIDDEN])),
            };
            let z = g.add_bias(pre, ids[1])?;
            let h = g.tanh(z)?;
            acc = Some(match acc {
                Some(a) => g.add(a, h)?,
                None => h,
            });
        }
        let sum = acc.expect("at least one tuple");
        Ok(g.scale(sum, 1.0 / tuples.len() as f64)?)
    }
}

/// The permutation-sensitive `f` as a [`SequenceFunction`] over batched
/// `[B, embed_dim]` element nodes.
pub struct FNet<'a> {
    spec: &'a ModelSpec,
    params: &'a [NodeId],
}

impl SequenceFunction for FNet<'_> {
    fn prefix_arity(&self) -> Option<usize> {
        self.spec.k
    }

    fn eval(&self, g: &mut Graph, _n: usize, seq: &[NodeId]) -> pooling::Result<NodeId> {
        let out = match self.spec.f_arch {
            FArch::Mlp30 => {
                let k = self.spec.k.unwrap_or(1);
                let selected = pooling::project_nodes(g, seq, k)?;
                let x = if k == 1 { selected[0] } else { g.concat(&selected)? };
                mlp_f_forward(g, self.params[0], self.params[1], x)
            }
            FArch::Lstm50 | FArch::Gru80 => {
                let kind = if self.spec.f_arch == FArch::Lstm50 {
                    RnnKind::Lstm
                } else {
                    RnnKind::Gru
                };
                let p = RnnParams {
                    w_ih: self.params[0],
                    b_ih: self.params[1],
                    w_hh: self.params[2],
                    b_hh: self.params[3],
                };
                rnn_forward(g, kind, p, seq)
            }
        };
        out.map_err(|e| match e {
            NetError::Autodiff(a) => PoolError::Autodiff(a),
            NetError::Pool(p) => p,
            other => PoolError::Autodiff(AutodiffError::InvalidArgument {
                op: "f",
                msg: other.to_string(),
            }),
        })
    }
}

/// `rho` followed by the fixed output affine map.
pub struct RhoNet<'a> {
    arch: RhoArch,
    params: &'a [NodeId],
    input_scale: f64,
    output: OutputScale,
}

impl Head for RhoNet<'_> {
    fn forward(&self, g: &mut Graph, x: NodeId) -> pooling::Result<NodeId> {
        let x = if self.input_scale == 1.0 {
            x
        } else {
            g.scale(x, self.input_scale)?
        };
        let y = rho_forward(g, self.arch, self.params, x).map_err(|e| match e {
            NetError::Autodiff(a) => PoolError::Autodiff(a),
            NetError::Pool(p) => p,
            other => PoolError::Autodiff(AutodiffError::InvalidArgument {
                op: "rho",
                msg: other.to_string(),
            }),
        })?;
        if self.output == OutputScale::default() {
            return Ok(y);
        }
        let y = g.scale(y, self.output.scale)?;
        let shift = g.scalar(self.output.shift);
        Ok(g.add(y, shift)?)
    }
}

/// On-disk model: spec, seed, output map and flat parameter arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub spec: ModelSpec,
    pub seed: u64,
    pub output: OutputScale,
    pub params: Vec<FlatParam>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            spec: model.spec.clone(),
            seed: model.seed,
            output: model.output,
            params: model
                .params
                .iter()
                .map(|e| FlatParam {
                    name: e.name.clone(),
                    shape: e.tensor.shape().to_vec(),
                    data: e.tensor.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn into_model(self) -> Result<Model> {
        if self.format_version != CHECKPOINT_VERSION {
            return Err(NetError::Checkpoint(format!(
                "unsupported format version {} (expected {CHECKPOINT_VERSION})",
                self.format_version
            )));
        }
        let mut model = Model::new(self.spec, self.seed)?.with_output_scale(self.output);
        if model.params.len() != self.params.len() {
            return Err(NetError::Checkpoint(format!(
                "expected {} parameter blocks, found {}",
                model.params.len(),
                self.params.len()
            )));
        }
        let mut params = ParamSet::new();
        for (expected, flat) in model.params.iter().zip(self.params) {
            if expected.name != flat.name || expected.tensor.shape() != flat.shape.as_slice() {
                return Err(NetError::Checkpoint(format!(
                    "block {} {:?} does not match {} {:?}",
                    flat.name,
                    flat.shape,
                    expected.name,
                    expected.tensor.shape()
                )));
            }
            params.push(flat.name, Tensor::new(flat.shape, flat.data)?);
        }
        model.params = params;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embed_dims() {
        assert_eq!(ModelSpec::kary(100, 1, RhoArch::Linear).embed_dim, 100);
        assert_eq!(ModelSpec::kary(100, 2, RhoArch::Linear).embed_dim, 50);
        assert_eq!(ModelSpec::kary(100, 3, RhoArch::Linear).embed_dim, 33);
        assert_eq!(ModelSpec::full(10, FArch::Gru80, RhoArch::Linear).embed_dim, 100);
    }

    #[test]
    fn parameter_table() {
        use FArch::*;
        use RhoArch::*;
        let rows = [
            (ModelSpec::kary(100, 1, Linear), 3061),
            (ModelSpec::kary(100, 2, Linear), 3061),
            (ModelSpec::kary(100, 3, Linear), 3031),
            (ModelSpec::kary(100, 1, Mlp100), 6231),
            (ModelSpec::kary(100, 2, Mlp100), 6231),
            (ModelSpec::kary(100, 3, Mlp100), 6201),
            (ModelSpec::full(100, Lstm50, Linear), 30451),
            (ModelSpec::full(100, Gru80, Linear), 43761),
            (ModelSpec::full(100, Lstm50, Mlp100), 35601),
            (ModelSpec::full(100, Gru80, Mlp100), 51881),
        ];
        for (spec, expected) in rows {
            assert_eq!(trainable_param_count(&spec), expected, "{spec:?}");
            assert_eq!(init_params(&spec, 1).numel(), expected, "{spec:?}");
        }
    }

    #[test]
    fn embedding_lookup() {
        let e = Embedding::generate(10, 4, 9);
        assert_eq!(e.lookup(3).unwrap(), e.lookup(3).unwrap());
        assert_ne!(e.lookup(3).unwrap(), e.lookup(4).unwrap());
        assert!(matches!(
            e.lookup(10),
            Err(NetError::OutOfVocab { digit: 10, vocab: 10 })
        ));
        assert_eq!(Embedding::generate(10, 4, 9), e);
    }

    #[test]
    fn zero_mlp_gives_zero() {
        let mut g = Graph::new();
        let w = g.param(Tensor::zeros(vec![6, 30]));
        let b = g.param(Tensor::zeros(vec![30]));
        let x = g.constant(Tensor::zeros(vec![1, 6]));
        let y = mlp_f_forward(&mut g, w, b, x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        assert_eq!(g.value(y).shape(), &[1, 30]);
    }

    #[test]
    fn mlp_rejects_wrong_input_width() {
        let mut g = Graph::new();
        let w = g.param(Tensor::zeros(vec![6, 30]));
        let b = g.param(Tensor::zeros(vec![30]));
        let x = g.constant(Tensor::zeros(vec![1, 5]));
        assert!(mlp_f_forward(&mut g, w, b, x).is_err());
    }

    fn bound_rnn(g: &mut Graph, params: &ParamSet) -> RnnParams {
        let ids = params.bind(g);
        RnnParams {
            w_ih: ids[0],
            b_ih: ids[1],
            w_hh: ids[2],
            b_hh: ids[3],
        }
    }

    #[test]
    fn single_step_gru_matches_hand_computation() {
        let spec = ModelSpec {
            vocab: 4,
            k: None,
            embed_dim: 3,
            f_arch: FArch::Gru80,
            rho_arch: RhoArch::Linear,
            output_dim: 1,
            rho_input_scale: 1.0,
        };
        let params = init_params(&spec, 5);
        let mut g = Graph::new();
        let p = bound_rnn(&mut g, &params);
        let x = [0.2, -0.4, 0.9];
        let xn = g.constant(Tensor::matrix(1, 3, x.to_vec()).unwrap());
        let h = rnn_forward(&mut g, RnnKind::Gru, p, &[xn]).unwrap();

        let hd = GRU_HIDDEN;
        let w_ih = params.get("f.w_ih").unwrap().data();
        let b_ih = params.get("f.b_ih").unwrap().data();
        let b_hh = params.get("f.b_hh").unwrap().data();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        for j in 0..hd {
            let xw = |gate: usize| -> f64 {
                (0..3).map(|i| x[i] * w_ih[i * 3 * hd + gate * hd + j]).sum::<f64>() + b_ih[gate * hd + j]
            };
            // zero previous state: the hidden-side products vanish, biases remain
            let r = sig(xw(0) + b_hh[j]);
            let z = sig(xw(1) + b_hh[hd + j]);
            let n = (xw(2) + r * b_hh[2 * hd + j]).tanh();
            let expected = (1.0 - z) * n;
            assert!((g.value(h).data()[j] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn single_step_lstm_matches_hand_computation() {
        let spec = ModelSpec {
            vocab: 4,
            k: None,
            embed_dim: 2,
            f_arch: FArch::Lstm50,
            rho_arch: RhoArch::Linear,
            output_dim: 1,
            rho_input_scale: 1.0,
        };
        let params = init_params(&spec, 8);
        let mut g = Graph::new();
        let p = bound_rnn(&mut g, &params);
        let x = [0.5, -1.5];
        let xn = g.constant(Tensor::matrix(1, 2, x.to_vec()).unwrap());
        let h = rnn_forward(&mut g, RnnKind::Lstm, p, &[xn]).unwrap();
        let hd = LSTM_HIDDEN;
        let w_ih = params.get("f.w_ih").unwrap().data();
        let b_ih = params.get("f.b_ih").unwrap().data();
        let b_hh = params.get("f.b_hh").unwrap().data();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        for j in 0..hd {
            let pre = |gate: usize| -> f64 {
                (0..2).map(|i| x[i] * w_ih[i * 4 * hd + gate * hd + j]).sum::<f64>()
                    + b_ih[gate * hd + j]
                    + b_hh[gate * hd + j]
            };
            let c = sig(pre(0)) * pre(2).tanh();
            let expected = sig(pre(3)) * c.tanh();
            assert!((g.value(h).data()[j] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn rnn_rejects_empty_sequence() {
        let spec = ModelSpec::full(10, FArch::Gru80, RhoArch::Linear);
        let params = init_params(&spec, 1);
        let mut g = Graph::new();
        let p = bound_rnn(&mut g, &params);
        assert!(matches!(
            rnn_forward(&mut g, RnnKind::Gru, p, &[]),
            Err(NetError::EmptySequence)
        ));
    }

    #[test]
    fn rnn_is_order_sensitive() {
        let model = Model::new(ModelSpec::full(10, FArch::Lstm50, RhoArch::Linear), 3).unwrap();
        let run = |xs: Vec<usize>| {
            let mut g = Graph::new();
            let ids = model.params.bind_frozen(&mut g);
            let (f, _) = model.bind(&ids);
            let seq = model.embed_positions(&mut g, &[xs]).unwrap();
            let out = f.eval(&mut g, seq.len(), &seq).unwrap();
            g.value(out).data().to_vec()
        };
        assert_ne!(run(vec![1, 2, 3]), run(vec![3, 2, 1]));
    }

    #[test]
    fn spec_validation() {
        let mut s = ModelSpec::kary(100, 2, RhoArch::Linear);
        assert!(s.validate().is_ok());
        s.k = None;
        assert!(s.validate().is_err());
        let mut r = ModelSpec::full(100, FArch::Gru80, RhoArch::Linear);
        r.k = Some(2);
        assert!(r.validate().is_err());
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let model = Model::new(ModelSpec::full(10, FArch::Gru80, RhoArch::Mlp100), 77)
            .unwrap()
            .with_output_scale(OutputScale {
                shift: 0.1 + 0.2,
                scale: 1.0 / 3.0,
            });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        Checkpoint::from_model(&model).save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap().into_model().unwrap();
        assert_eq!(back.params, model.params);
        assert_eq!(back.embedding, model.embedding);
        assert_eq!(back.output.shift.to_bits(), model.output.shift.to_bits());
        assert_eq!(back.params.checksum(), model.params.checksum());
    }

    #[test]
    fn checkpoint_version_checked() {
        let model = Model::new(ModelSpec::kary(10, 1, RhoArch::Linear), 1).unwrap();
        let mut ck = Checkpoint::from_model(&model);
        ck.format_version = 99;
        assert!(matches!(ck.into_model(), Err(NetError::Checkpoint(_))));
    }
}
