//! Permutations, k-permutations and the prefix projection used by every
//! pooling strategy.
//!
//! Indices are 0-based. A permutation `p` applied to a sequence `h` yields
//! `h_p` with `h_p[i] = h[p[i]]`.

use rand::Rng;
use thiserror::Error;

use crate::autodiff::Tensor;

/// Largest `n` for which all `n!` orderings are enumerated without an override.
pub const DEFAULT_ENUMERATION_CAP: usize = 8;

/// Largest number of `n!/(n-k)!` terms a k-ary enumeration may produce.
pub const DEFAULT_TERM_CAP: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PermError {
    #[error("n = {n} exceeds the enumeration cap of {cap}; use k-ary or sampled pooling, or raise the cap")]
    Capacity { n: usize, cap: usize },
    #[error("{n}!/({n}-{k})! terms exceed the term cap of {cap}; use sampled pooling with k-ary projection instead")]
    TermCap { n: usize, k: usize, cap: u64 },
    #[error("k = {k} exceeds n = {n}; zero-pad the sequence to length k first")]
    KExceedsN { k: usize, n: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("not a valid index arrangement: {0:?}")]
    NotBijection(Vec<usize>),
    #[error("cannot zero-pad an empty sequence without an element shape")]
    UnknownElementShape,
}

pub type Result<T> = std::result::Result<T, PermError>;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(mapping: Vec<usize>) -> Result<Self> {
        if is_bijection(&mapping) {
            Ok(Permutation(mapping))
        } else {
            Err(PermError::NotBijection(mapping))
        }
    }

    pub fn identity(n: usize) -> Self {
        Permutation((0..n).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<usize> {
        self.0
    }

    /// `h_p`, with `out[i] = items[p[i]]`.
    pub fn apply<T: Clone>(&self, items: &[T]) -> Vec<T> {
        assert_eq!(items.len(), self.0.len(), "permutation length mismatch");
        self.0.iter().map(|&i| items[i].clone()).collect()
    }

    /// Advances to the lexicographic successor; `false` at the last ordering.
    fn advance(&mut self) -> bool {
        let p = &mut self.0;
        if p.len() < 2 {
            return false;
        }
        let Some(i) = (0..p.len() - 1).rev().find(|&i| p[i] < p[i + 1]) else {
            return false;
        };
        let j = (i + 1..p.len()).rev().find(|&j| p[j] > p[i]).unwrap();
        p.swap(i, j);
        p[i + 1..].reverse();
        true
    }
}

pub fn is_bijection(mapping: &[usize]) -> bool {
    let mut seen = vec![false; mapping.len()];
    mapping
        .iter()
        .all(|&v| v < seen.len() && !std::mem::replace(&mut seen[v], true))
}

/// Distinct, in-range indices selected from a length-`n` source.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KIndexSequence {
    indices: Vec<usize>,
    n: usize,
}

impl KIndexSequence {
    pub fn new(indices: Vec<usize>, n: usize) -> Result<Self> {
        let mut seen = vec![false; n];
        let valid = indices.len() <= n && indices.iter().all(|&i| i < n && !std::mem::replace(&mut seen[i], true));
        if valid {
            Ok(KIndexSequence { indices, n })
        } else {
            Err(PermError::NotBijection(indices))
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn source_len(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.indices.len()
    }

    pub fn select<T: Clone>(&self, items: &[T]) -> Vec<T> {
        self.indices.iter().map(|&i| items[i].clone()).collect()
    }
}

/// `n!/(n-k)!`, or `None` on overflow or `k > n`.
pub fn k_permutation_count(n: usize, k: usize) -> Option<u64> {
    if k > n {
        return None;
    }
    (n - k + 1..=n).try_fold(1u64, |acc, v| acc.checked_mul(v as u64))
}

/// `n choose k`, or `None` on overflow or `k > n`.
pub fn combination_count(n: usize, k: usize) -> Option<u64> {
    if k > n {
        return None;
    }
    let k = k.min(n - k);
    (0..k).try_fold(1u64, |acc, i| {
        acc.checked_mul((n - i) as u64).map(|v| v / (i as u64 + 1))
    })
}

/// All `n!` permutations in lexicographic order, under the default cap.
pub fn enumerate_permutations(n: usize) -> Result<Vec<Permutation>> {
    enumerate_permutations_capped(n, DEFAULT_ENUMERATION_CAP)
}

pub fn enumerate_permutations_capped(n: usize, cap: usize) -> Result<Vec<Permutation>> {
    if n > cap {
        return Err(PermError::Capacity { n, cap });
    }
    let mut current = Permutation::identity(n);
    let mut out = Vec::with_capacity((1..=n).product());
    loop {
        out.push(current.clone());
        if !current.advance() {
            return Ok(out);
        }
    }
}

/// All `n!/(n-k)!` ordered selections of `k` distinct indices, lexicographic.
pub fn enumerate_k_permutations(n: usize, k: usize) -> Result<Vec<KIndexSequence>> {
    enumerate_k_permutations_capped(n, k, DEFAULT_TERM_CAP)
}

pub fn enumerate_k_permutations_capped(n: usize, k: usize, term_cap: u64) -> Result<Vec<KIndexSequence>> {
    if k > n {
        return Err(PermError::KExceedsN { k, n });
    }
    let count = k_permutation_count(n, k)
        .filter(|&c| c <= term_cap)
        .ok_or(PermError::TermCap { n, k, cap: term_cap })?;
    let mut out = Vec::with_capacity(count as usize);
    let mut prefix = Vec::with_capacity(k);
    let mut used = vec![false; n];
    extend_k_permutations(n, k, &mut prefix, &mut used, &mut out);
    Ok(out)
}

fn extend_k_permutations(
    n: usize,
    k: usize,
    prefix: &mut Vec<usize>,
    used: &mut [bool],
    out: &mut Vec<KIndexSequence>,
) {
    if prefix.len() == k {
        out.push(KIndexSequence {
            indices: prefix.clone(),
            n,
        });
        return;
    }
    for i in 0..n {
        if !used[i] {
            used[i] = true;
            prefix.push(i);
            extend_k_permutations(n, k, prefix, used, out);
            prefix.pop();
            used[i] = false;
        }
    }
}

/// Strictly increasing `k`-index selections, lexicographic.
pub fn enumerate_k_combinations(n: usize, k: usize, term_cap: u64) -> Result<Vec<KIndexSequence>> {
    if k > n {
        return Err(PermError::KExceedsN { k, n });
    }
    let count = combination_count(n, k)
        .filter(|&c| c <= term_cap)
        .ok_or(PermError::TermCap { n, k, cap: term_cap })?;
    let mut out = Vec::with_capacity(count as usize);
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(KIndexSequence {
            indices: idx.clone(),
            n,
        });
        // rightmost slot that can still move
        let Some(i) = (0..k).rev().find(|&i| idx[i] < n - k + i) else {
            return Ok(out);
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Uniform draw from all `n!` permutations (Fisher-Yates).
pub fn sample_permutation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Permutation {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        p.swap(i, j);
    }
    Permutation(p)
}

/// Keeps the first `k` items, or appends `k - len` padding items.
pub fn project_k_with<T: Clone, E>(
    h: &[T],
    k: usize,
    mut pad: impl FnMut() -> std::result::Result<T, E>,
) -> std::result::Result<Vec<T>, E>
where
    E: From<PermError>,
{
    if k == 0 {
        return Err(PermError::ZeroK.into());
    }
    if h.len() >= k {
        return Ok(h[..k].to_vec());
    }
    let mut out = h.to_vec();
    while out.len() < k {
        out.push(pad()?);
    }
    Ok(out)
}

/// Prefix projection of a tensor sequence with zero padding shaped like the
/// existing elements (or `element_shape` when `h` is empty).
pub fn project_k(h: &[Tensor], k: usize, element_shape: Option<&[usize]>) -> Result<Vec<Tensor>> {
    let shape = match (h.first(), element_shape) {
        (Some(first), _) => Some(first.shape().to_vec()),
        (None, Some(s)) => Some(s.to_vec()),
        (None, None) => None,
    };
    project_k_with(h, k, || {
        shape.clone().map(Tensor::zeros).ok_or(PermError::UnknownElementShape)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    #[test]
    fn zero_length_has_one_permutation() {
        let ps = enumerate_permutations(0).unwrap();
        assert_eq!(ps, vec![Permutation::identity(0)]);
    }

    #[test]
    fn three_in_lexicographic_order() {
        let ps = enumerate_permutations(3).unwrap();
        assert_eq!(ps.len(), 6);
        assert_eq!(ps[0].as_slice(), &[0, 1, 2]);
        assert_eq!(ps[5].as_slice(), &[2, 1, 0]);
        assert!(ps.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn five_gives_120_distinct() {
        let ps = enumerate_permutations(5).unwrap();
        let set: HashSet<_> = ps.iter().collect();
        assert_eq!(set.len(), 120);
    }

    #[test]
    fn cap_is_enforced() {
        assert_eq!(
            enumerate_permutations(9).unwrap_err(),
            PermError::Capacity { n: 9, cap: 8 }
        );
        assert_eq!(enumerate_permutations_capped(9, 9).unwrap().len(), 362_880);
    }

    #[test]
    fn k_permutation_examples() {
        assert_eq!(enumerate_k_permutations(5, 2).unwrap().len(), 20);
        let ones: Vec<Vec<usize>> = enumerate_k_permutations(4, 1)
            .unwrap()
            .into_iter()
            .map(|s| s.indices().to_vec())
            .collect();
        assert_eq!(ones, vec![vec![0], vec![1], vec![2], vec![3]]);
        let full: Vec<Vec<usize>> = enumerate_k_permutations(3, 3)
            .unwrap()
            .into_iter()
            .map(|s| s.indices().to_vec())
            .collect();
        let perms: Vec<Vec<usize>> = enumerate_permutations(3)
            .unwrap()
            .into_iter()
            .map(Permutation::into_inner)
            .collect();
        assert_eq!(full, perms);
    }

    #[test]
    fn k_above_n_is_an_error() {
        assert_eq!(
            enumerate_k_permutations(2, 3).unwrap_err(),
            PermError::KExceedsN { k: 3, n: 2 }
        );
    }

    #[test]
    fn term_cap() {
        assert!(matches!(
            enumerate_k_permutations_capped(10, 3, 100),
            Err(PermError::TermCap { .. })
        ));
        assert_eq!(enumerate_k_permutations_capped(10, 3, 720).unwrap().len(), 720);
    }

    #[test]
    fn combinations_are_increasing() {
        let cs = enumerate_k_combinations(5, 3, DEFAULT_TERM_CAP).unwrap();
        assert_eq!(cs.len(), 10);
        assert_eq!(cs[0].indices(), &[0, 1, 2]);
        assert_eq!(cs[9].indices(), &[2, 3, 4]);
        assert!(cs.iter().all(|c| c.indices().windows(2).all(|w| w[0] < w[1])));
        assert_eq!(enumerate_k_combinations(4, 0, 10).unwrap().len(), 1);
    }

    #[test]
    fn single_element_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            assert_eq!(sample_permutation(1, &mut rng).as_slice(), &[0]);
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let a = sample_permutation(9, &mut ChaCha8Rng::seed_from_u64(42));
        let b = sample_permutation(9, &mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(a, b);
        assert!(is_bijection(a.as_slice()));
    }

    #[test]
    fn projection_truncates_and_pads() {
        let a = Tensor::vector(vec![1.0, 2.0]);
        let b = Tensor::vector(vec![3.0, 4.0]);
        let c = Tensor::vector(vec![5.0, 6.0]);
        let h = vec![a.clone(), b.clone(), c];
        assert_eq!(project_k(&h, 2, None).unwrap(), vec![a.clone(), b.clone()]);
        assert_eq!(project_k(&h[..2], 2, None).unwrap(), vec![a.clone(), b]);
        let padded = project_k(&h[..1], 3, None).unwrap();
        assert_eq!(padded, vec![a, Tensor::zeros(vec![2]), Tensor::zeros(vec![2])]);
    }

    #[test]
    fn projection_of_empty_needs_a_shape() {
        assert_eq!(project_k(&[], 2, None).unwrap_err(), PermError::UnknownElementShape);
        let padded = project_k(&[], 2, Some(&[3])).unwrap();
        assert_eq!(padded, vec![Tensor::zeros(vec![3]); 2]);
        assert_eq!(project_k(&[], 0, Some(&[3])).unwrap_err(), PermError::ZeroK);
    }

    #[test]
    fn counts() {
        assert_eq!(k_permutation_count(10, 3), Some(720));
        assert_eq!(k_permutation_count(3, 4), None);
        assert_eq!(combination_count(10, 3), Some(120));
        assert_eq!(combination_count(10, 0), Some(1));
    }
}
