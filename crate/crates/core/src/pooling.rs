//! Janossy pooling strategies.
//!
//! Every strategy turns a permutation-sensitive [`SequenceFunction`] into a
//! permutation-invariant one (or an unbiased estimate of one):
//!
//! * [`janossy_exact`] averages `f` over all `n!` orderings.
//! * [`janossy_kary`] averages over the `n!/(n-k)!` ordered `k`-selections,
//!   which is the full average of an `f` that only reads its first `k`
//!   arguments, with each distinct prefix counted once instead of `(n-k)!`
//!   times.
//! * [`janossy_sampled`] averages over `m` uniformly sampled orderings.
//! * [`canonical_pool`] sorts the input and applies `f` once.
//!
//! Pooled outputs are means. A sum differs by the fixed factor `n` for unary
//! pooling, which a downstream head absorbs.
//!
//! Terms are always summed in lexicographic order of the enumerated
//! permutations, so reruns are bit-identical.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, NodeId, Tensor};
use crate::perm::{self, PermError, DEFAULT_ENUMERATION_CAP, DEFAULT_TERM_CAP};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PoolError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Perm(#[from] PermError),
    #[error("sample count must be at least 1")]
    ZeroSamples,
}

pub type Result<T> = std::result::Result<T, PoolError>;

/// A permutation-sensitive function of a sequence, `f(n, seq)`.
///
/// `n` is the length of the original (unprojected) input.
pub trait SequenceFunction {
    /// The `k` beyond which the function ignores its input, if any.
    fn prefix_arity(&self) -> Option<usize> {
        None
    }

    fn eval(&self, g: &mut Graph, n: usize, seq: &[NodeId]) -> Result<NodeId>;
}

impl<T: SequenceFunction + ?Sized> SequenceFunction for &T {
    fn prefix_arity(&self) -> Option<usize> {
        (**self).prefix_arity()
    }

    fn eval(&self, g: &mut Graph, n: usize, seq: &[NodeId]) -> Result<NodeId> {
        (**self).eval(g, n, seq)
    }
}

/// Closure-backed [`SequenceFunction`].
pub struct FnSequence<F> {
    f: F,
    arity: Option<usize>,
}

pub fn seq_fn<F>(f: F) -> FnSequence<F>
where
    F: Fn(&mut Graph, usize, &[NodeId]) -> Result<NodeId>,
{
    FnSequence { f, arity: None }
}

impl<F> FnSequence<F> {
    pub fn with_prefix_arity(mut self, k: usize) -> Self {
        self.arity = Some(k);
        self
    }
}

impl<F> SequenceFunction for FnSequence<F>
where
    F: Fn(&mut Graph, usize, &[NodeId]) -> Result<NodeId>,
{
    fn prefix_arity(&self) -> Option<usize> {
        self.arity
    }

    fn eval(&self, g: &mut Graph, n: usize, seq: &[NodeId]) -> Result<NodeId> {
        (self.f)(g, n, seq)
    }
}

/// `seq -> f(n, project_k(seq))`: a full-sequence function built from a
/// `k`-ary one, padding with zeros when the sequence is shorter than `k`.
pub struct ProjectK<F> {
    pub inner: F,
    pub k: usize,
}

impl<F: SequenceFunction> SequenceFunction for ProjectK<F> {
    fn prefix_arity(&self) -> Option<usize> {
        Some(self.k)
    }

    fn eval(&self, g: &mut Graph, n: usize, seq: &[NodeId]) -> Result<NodeId> {
        let projected = project_nodes(g, seq, self.k)?;
        self.inner.eval(g, n, &projected)
    }
}

/// Zero-pads (or truncates) graph nodes to length `k`; padding takes the
/// shape of the first element.
pub fn project_nodes(g: &mut Graph, seq: &[NodeId], k: usize) -> Result<Vec<NodeId>> {
    let shape = seq.first().map(|&id| g.value(id).shape().to_vec());
    perm::project_k_with(seq, k, || match &shape {
        Some(s) => Ok(g.constant(Tensor::zeros(s.clone()))),
        None => Err(PoolError::Perm(PermError::UnknownElementShape)),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Exact,
    Kary,
    Sampled,
    Canonical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CanonicalKey {
    #[default]
    Ascending,
    Descending,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolingSpec {
    pub strategy: Strategy,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default = "one")]
    pub train_samples: usize,
    #[serde(default = "one")]
    pub infer_samples: usize,
    #[serde(default)]
    pub canonical_key: CanonicalKey,
    /// k-ary only: sort each input first and pool over increasing index
    /// tuples. Defaults to on for `k >= 2`.
    #[serde(default)]
    pub sort_inputs: Option<bool>,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl PoolingSpec {
    pub fn exact() -> Self {
        PoolingSpec {
            strategy: Strategy::Exact,
            k: None,
            train_samples: 1,
            infer_samples: 1,
            canonical_key: CanonicalKey::Ascending,
            sort_inputs: None,
            seed: 0,
        }
    }

    pub fn kary(k: usize) -> Self {
        PoolingSpec {
            strategy: Strategy::Kary,
            k: Some(k),
            ..PoolingSpec::exact()
        }
    }

    pub fn sampled(train_samples: usize, infer_samples: usize) -> Self {
        PoolingSpec {
            strategy: Strategy::Sampled,
            train_samples,
            infer_samples,
            ..PoolingSpec::exact()
        }
    }

    pub fn canonical(key: CanonicalKey) -> Self {
        PoolingSpec {
            strategy: Strategy::Canonical,
            canonical_key: key,
            ..PoolingSpec::exact()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Whether k-ary pooling runs over sorted inputs and index combinations.
    pub fn sorts_inputs(&self) -> bool {
        self.strategy == Strategy::Kary && self.sort_inputs.unwrap_or(self.k.unwrap_or(1) >= 2)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.strategy == Strategy::Kary {
            match self.k {
                None => return Err("k-ary pooling requires k".into()),
                Some(0) => return Err("k must be at least 1".into()),
                Some(_) => {}
            }
        }
        if self.train_samples == 0 || self.infer_samples == 0 {
            return Err("train_samples and infer_samples must be at least 1".into());
        }
        Ok(())
    }
}

/// Mean of `count` terms, summed left to right.
fn mean_of_terms(
    g: &mut Graph,
    count: usize,
    mut term: impl FnMut(&mut Graph, usize) -> Result<NodeId>,
) -> Result<NodeId> {
    let mut acc: Option<NodeId> = None;
    for i in 0..count {
        let t = term(g, i)?;
        acc = Some(match acc {
            Some(a) => g.add(a, t)?,
            None => t,
        });
    }
    let sum = acc.ok_or(PoolError::ZeroSamples)?;
    Ok(g.scale(sum, 1.0 / count as f64)?)
}

/// Full Janossy pooling under the default enumeration cap.
pub fn janossy_exact<F: SequenceFunction>(g: &mut Graph, f: &F, h: &[NodeId]) -> Result<NodeId> {
    janossy_exact_capped(g, f, h, DEFAULT_ENUMERATION_CAP)
}

pub fn janossy_exact_capped<F: SequenceFunction>(g: &mut Graph, f: &F, h: &[NodeId], cap: usize) -> Result<NodeId> {
    let n = h.len();
    let perms = perm::enumerate_permutations_capped(n, cap)?;
    let count = perms.len();
    let terms: Vec<_> = perms.iter().map(|p| p.apply(h)).collect();
    mean_of_terms(g, count, |g, i| f.eval(g, n, &terms[i]))
}

/// Exact k-ary pooling: the mean of `f(n, h[i1], .., h[ik])` over all
/// ordered selections of `k` distinct positions. Inputs shorter than `k` are
/// zero-padded first, and the padded sequence is what gets enumerated.
pub fn janossy_kary<F: SequenceFunction>(g: &mut Graph, f: &F, h: &[NodeId], k: usize) -> Result<NodeId> {
    janossy_kary_capped(g, f, h, k, DEFAULT_TERM_CAP)
}

pub fn janossy_kary_capped<F: SequenceFunction>(
    g: &mut Graph,
    f: &F,
    h: &[NodeId],
    k: usize,
    term_cap: u64,
) -> Result<NodeId> {
    if k == 0 {
        return Err(PermError::ZeroK.into());
    }
    let n = h.len();
    let padded = if n < k { project_nodes(g, h, k)? } else { h.to_vec() };
    let selections = perm::enumerate_k_permutations_capped(padded.len(), k, term_cap)?;
    let count = selections.len();
    mean_of_terms(g, count, |g, i| f.eval(g, n, &selections[i].select(&padded)))
}

/// k-ary pooling over increasing index tuples of an already sorted input.
///
/// For `h` sorted under the canonical key this equals [`janossy_kary`] of
/// `f` composed with sorting its `k` arguments, at `k!` times fewer terms.
pub fn janossy_kary_combinations<F: SequenceFunction>(
    g: &mut Graph,
    f: &F,
    h_sorted: &[NodeId],
    k: usize,
) -> Result<NodeId> {
    if k == 0 {
        return Err(PermError::ZeroK.into());
    }
    let n = h_sorted.len();
    let padded = if n < k {
        project_nodes(g, h_sorted, k)?
    } else {
        h_sorted.to_vec()
    };
    let selections = perm::enumerate_k_combinations(padded.len(), k, DEFAULT_TERM_CAP)?;
    let count = selections.len();
    mean_of_terms(g, count, |g, i| f.eval(g, n, &selections[i].select(&padded)))
}

/// Mean of `f` over `m` independent uniformly sampled orderings.
pub fn janossy_sampled<F: SequenceFunction, R: Rng + ?Sized>(
    g: &mut Graph,
    f: &F,
    h: &[NodeId],
    m: usize,
    rng: &mut R,
) -> Result<NodeId> {
    if m == 0 {
        return Err(PoolError::ZeroSamples);
    }
    let n = h.len();
    let seqs: Vec<Vec<NodeId>> = (0..m).map(|_| perm::sample_permutation(n, rng).apply(h)).collect();
    mean_of_terms(g, m, |g, i| f.eval(g, n, &seqs[i]))
}

/// Compares flattened tensor data lexicographically (first coordinate, then
/// the next, ...).
pub fn canonical_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or_else(|| a.len().cmp(&b.len()))
}

/// Stable sort order of `h` under `key`.
pub fn canonical_order(g: &Graph, h: &[NodeId], key: CanonicalKey) -> Vec<NodeId> {
    let mut sorted = h.to_vec();
    sorted.sort_by(|&a, &b| {
        let o = canonical_cmp(g.value(a).data(), g.value(b).data());
        match key {
            CanonicalKey::Ascending => o,
            CanonicalKey::Descending => o.reverse(),
        }
    });
    sorted
}

/// `f(n, sort(h))`.
pub fn canonical_pool<F: SequenceFunction>(g: &mut Graph, f: &F, h: &[NodeId], key: CanonicalKey) -> Result<NodeId> {
    let sorted = canonical_order(g, h, key);
    f.eval(g, h.len(), &sorted)
}

/// Upper network applied after (or, for sampled training, inside) pooling.
pub trait Head {
    fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId>;
}

impl<F> Head for F
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        self(g, x)
    }
}

/// `rho(pooled)`.
pub fn composed_forward<H: Head + ?Sized>(g: &mut Graph, pooled: NodeId, rho: &H) -> Result<NodeId> {
    rho.forward(g, pooled)
}

/// `f' = rho . f` as a sequence function, for placing `rho` inside the
/// per-permutation term.
pub struct Composed<'a, F, H: ?Sized> {
    pub f: F,
    pub rho: &'a H,
}

impl<F: SequenceFunction, H: Head + ?Sized> SequenceFunction for Composed<'_, F, H> {
    fn prefix_arity(&self) -> Option<usize> {
        self.f.prefix_arity()
    }

    fn eval(&self, g: &mut Graph, n: usize, seq: &[NodeId]) -> Result<NodeId> {
        let inner = self.f.eval(g, n, seq)?;
        self.rho.forward(g, inner)
    }
}

/// Pooling followed by `rho`, dispatched on the spec. For the sampled
/// strategy `rho` sits inside each sampled term and `m` terms are averaged.
pub fn pool_with_head<F, H, R>(
    g: &mut Graph,
    spec: &PoolingSpec,
    f: &F,
    rho: &H,
    h: &[NodeId],
    m: usize,
    rng: &mut R,
) -> Result<NodeId>
where
    F: SequenceFunction,
    H: Head + ?Sized,
    R: Rng + ?Sized,
{
    match spec.strategy {
        Strategy::Exact => {
            let pooled = janossy_exact(g, f, h)?;
            composed_forward(g, pooled, rho)
        }
        Strategy::Kary => {
            let k = spec.k.ok_or(PermError::ZeroK)?;
            let pooled = if spec.sorts_inputs() {
                let sorted = canonical_order(g, h, spec.canonical_key);
                janossy_kary_combinations(g, f, &sorted, k)?
            } else {
                janossy_kary(g, f, h, k)?
            };
            composed_forward(g, pooled, rho)
        }
        Strategy::Canonical => {
            let pooled = canonical_pool(g, f, h, spec.canonical_key)?;
            composed_forward(g, pooled, rho)
        }
        Strategy::Sampled => {
            let inner = Composed { f, rho };
            janossy_sampled(g, &inner, h, m, rng)
        }
    }
}
