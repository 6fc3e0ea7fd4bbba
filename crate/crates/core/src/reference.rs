//! Scalar-loop forward pass of the model zoo, generic over the number type.
//!
//! This is a second implementation of the networks that shares nothing with
//! the tape: plain nested loops over row-major `[in, out]` weights. It runs in
//! `f64` or in double-double ([`Dd`]), which lets finite
//! differences at a tiny step resolve gradients far below the `f64`
//! cancellation floor.

use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::nets::{FArch, Gradients, Model, RhoArch};
use crate::perm::Permutation;
use crate::pooling::{PoolingSpec, Strategy};
use crate::training;

pub trait Real:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self>
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn tanh(self) -> Self;
    fn exp(self) -> Self;

    fn sigmoid(self) -> Self {
        let one = Self::from_f64(1.0);
        if self.to_f64() >= 0.0 {
            one / (one + (-self).exp())
        } else {
            let e = self.exp();
            e / (one + e)
        }
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
}

/// Double-double number: an unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

impl Dd {
    pub const fn new(hi: f64, lo: f64) -> Self {
        Dd { hi, lo }
    }

    fn norm(hi: f64, lo: f64) -> Self {
        let (hi, lo) = quick_two_sum(hi, lo);
        Dd { hi, lo }
    }

    fn div_f64(self, b: f64) -> Self {
        let q1 = self.hi / b;
        let p = q1 * b;
        let e = q1.mul_add(b, -p);
        let (s, t) = two_sum(self.hi, -p);
        let q2 = (s + (t - e + self.lo)) / b;
        Dd::norm(q1, q2)
    }

    fn ldexp(self, e: i32) -> Self {
        let f = f64::powi(2.0, e);
        Dd::new(self.hi * f, self.lo * f)
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = quick_two_sum(s, e + t);
        Dd::norm(s, e + f)
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd::new(-self.hi, -self.lo)
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, o: Dd) -> Dd {
        self + (-o)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, o: Dd) -> Dd {
        let p = self.hi * o.hi;
        let e = self.hi.mul_add(o.hi, -p);
        Dd::norm(p, e + (self.hi * o.lo + self.lo * o.hi))
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self - o * Dd::from_f64(q1);
        let q2 = r.hi / o.hi;
        let r = r - o * Dd::from_f64(q2);
        let q3 = r.hi / o.hi;
        Dd::norm(q1, q2) + Dd::from_f64(q3)
    }
}

impl Real for Dd {
    fn from_f64(x: f64) -> Self {
        Dd::new(x, 0.0)
    }
    fn to_f64(self) -> f64 {
        self.hi + self.lo
    }
    fn tanh(self) -> Self {
        // tanh x = m / (m + 2) with m = expm1(2x), mirrored for x < 0
        if self.hi < 0.0 {
            return -Real::tanh(-self);
        }
        let m = dd_expm1(self.ldexp(1));
        m / (m + Dd::from_f64(2.0))
    }
    fn exp(self) -> Self {
        dd_expm1(self) + Dd::from_f64(1.0)
    }
}

/// `exp(x) - 1` to roughly double-double precision.
fn dd_expm1(x: Dd) -> Dd {
    const LN2: Dd = Dd::new(std::f64::consts::LN_2, 2.319_046_813_846_299_6e-17);
    const HALVINGS: i32 = 8;
    let k = (x.hi / LN2.hi).round();
    let r = (x - LN2 * Dd::from_f64(k)).ldexp(-HALVINGS);
    // Taylor series for |r| < 2e-3
    let mut term = r;
    let mut m = r;
    for n in 2..=14 {
        term = (term * r).div_f64(n as f64);
        m = m + term;
    }
    for _ in 0..HALVINGS {
        m = m * (m + Dd::from_f64(2.0));
    }
    if k == 0.0 {
        m
    } else {
        (m + Dd::from_f64(1.0)).ldexp(k as i32) - Dd::from_f64(1.0)
    }
}

/// Parameter blocks in [`crate::nets::ParamSet`] order.
pub fn params_as<T: Real>(model: &Model) -> Vec<Vec<T>> {
    model
        .params
        .iter()
        .map(|e| e.tensor.data().iter().map(|&x| T::from_f64(x)).collect())
        .collect()
}

/// `y = x W + b` with `W` stored `[in, out]` row-major.
fn affine<T: Real>(x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let out = b.len();
    let mut y = b.to_vec();
    for (i, &xi) in x.iter().enumerate() {
        for (j, yj) in y.iter_mut().enumerate() {
            *yj = *yj + xi * w[i * out + j];
        }
    }
    y
}

fn embed<T: Real>(model: &Model, digit: usize) -> Vec<T> {
    model
        .embedding
        .lookup(digit)
        .expect("digit inside the vocabulary")
        .iter()
        .map(|&x| T::from_f64(x))
        .collect()
}

/// `f` on one ordered sequence of digits.
pub fn f_forward<T: Real>(model: &Model, p: &[Vec<T>], seq: &[usize]) -> Vec<T> {
    let e = model.spec.embed_dim;
    match model.spec.f_arch {
        FArch::Mlp30 => {
            let k = model.spec.k.unwrap_or(1);
            let mut x = Vec::with_capacity(k * e);
            for pos in 0..k {
                match seq.get(pos) {
                    Some(&d) => x.extend(embed::<T>(model, d)),
                    None => x.extend(std::iter::repeat_n(T::from_f64(0.0), e)),
                }
            }
            affine(&x, &p[0], &p[1]).into_iter().map(Real::tanh).collect()
        }
        FArch::Lstm50 | FArch::Gru80 => {
            let hidden = model.spec.f_arch.output_dim();
            let zero = T::from_f64(0.0);
            let one = T::from_f64(1.0);
            let mut h = vec![zero; hidden];
            let mut c = vec![zero; hidden];
            for &d in seq {
                let x = embed::<T>(model, d);
                let xi = affine(&x, &p[0], &p[1]);
                let hh = affine(&h, &p[2], &p[3]);
                if model.spec.f_arch == FArch::Lstm50 {
                    for j in 0..hidden {
                        let at = |blk: usize| xi[blk * hidden + j] + hh[blk * hidden + j];
                        let i = at(0).sigmoid();
                        let f = at(1).sigmoid();
                        let g = at(2).tanh();
                        let o = at(3).sigmoid();
                        c[j] = f * c[j] + i * g;
                        h[j] = o * c[j].tanh();
                    }
                } else {
                    for j in 0..hidden {
                        let r = (xi[j] + hh[j]).sigmoid();
                        let z = (xi[hidden + j] + hh[hidden + j]).sigmoid();
                        let n = (xi[2 * hidden + j] + r * hh[2 * hidden + j]).tanh();
                        h[j] = (one - z) * n + z * h[j];
                    }
                }
            }
            h
        }
    }
}

/// `rho` and the output affine map.
pub fn rho_forward<T: Real>(model: &Model, p: &[Vec<T>], x: &[T]) -> T {
    let base = rho_base(model);
    let c = T::from_f64(model.spec.rho_input_scale);
    let scaled: Vec<T> = x.iter().map(|&v| v * c).collect();
    let x = scaled.as_slice();
    let y = match model.spec.rho_arch {
        RhoArch::Linear => affine(x, &p[base], &p[base + 1]),
        RhoArch::Mlp100 => {
            let hdn: Vec<T> = affine(x, &p[base], &p[base + 1]).into_iter().map(Real::tanh).collect();
            affine(&hdn, &p[base + 2], &p[base + 3])
        }
    };
    y[0] * T::from_f64(model.output.scale) + T::from_f64(model.output.shift)
}

fn ordered_selections(n: usize, k: usize, increasing: bool) -> Vec<Vec<usize>> {
    fn go(n: usize, k: usize, increasing: bool, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        let start = if increasing {
            cur.last().map_or(0, |&l| l + 1)
        } else {
            0
        };
        for i in start..n {
            if !cur.contains(&i) {
                cur.push(i);
                go(n, k, increasing, cur, out);
                cur.pop();
            }
        }
    }
    let mut out = Vec::new();
    go(n, k, increasing, &mut Vec::new(), &mut out);
    out
}

fn mean<T: Real>(vs: Vec<Vec<T>>) -> Vec<T> {
    let count = T::from_f64(vs.len() as f64);
    let mut acc = vs[0].clone();
    for v in &vs[1..] {
        acc.iter_mut().zip(v).for_each(|(a, &b)| *a = *a + b);
    }
    acc.into_iter().map(|a| a / count).collect()
}

/// Deterministic pooled prediction for one example.
pub fn pooled_prediction<T: Real>(model: &Model, p: &[Vec<T>], pooling: &PoolingSpec, x: &[usize]) -> T {
    rho_forward(model, p, &pooled_features(model, p, pooling, x))
}

/// Pooled `f` output for one example, before `rho`.
pub fn pooled_features<T: Real>(model: &Model, p: &[Vec<T>], pooling: &PoolingSpec, x: &[usize]) -> Vec<T> {
    match pooling.strategy {
        Strategy::Exact => {
            let orders = ordered_selections(x.len(), x.len(), false);
            mean(orders.iter().map(|o| f_forward(model, p, &pick(x, o))).collect())
        }
        Strategy::Kary => {
            let k = pooling.k.expect("k-ary pooling has k");
            let sorted = pooling.sorts_inputs();
            let mut xs = x.to_vec();
            if sorted {
                xs.sort_unstable();
                if pooling.canonical_key == crate::pooling::CanonicalKey::Descending {
                    xs.reverse();
                }
            }
            let sels = ordered_selections(xs.len(), k.min(xs.len()), sorted);
            mean(sels.iter().map(|s| f_forward(model, p, &pick(&xs, s))).collect())
        }
        Strategy::Canonical => {
            let mut xs = x.to_vec();
            xs.sort_unstable();
            if pooling.canonical_key == crate::pooling::CanonicalKey::Descending {
                xs.reverse();
            }
            f_forward(model, p, &xs)
        }
        Strategy::Sampled => panic!("sampled pooling has no deterministic prediction"),
    }
}

fn pick(x: &[usize], idx: &[usize]) -> Vec<usize> {
    idx.iter().map(|&i| x[i]).collect()
}

/// How each example of a check batch is fed to the model.
#[derive(Debug, Clone)]
pub enum Feed<'a> {
    /// Deterministic pooling.
    Pooled(&'a PoolingSpec),
    /// `rho(f(x_s))` with one fixed ordering per example.
    Ordered(&'a [Permutation]),
}

/// Mean squared error of the batch.
pub fn batch_mse<T: Real>(model: &Model, p: &[Vec<T>], xs: &[Vec<usize>], ys: &[f64], feed: &Feed<'_>) -> T {
    mse_from_features(model, p, &batch_features(model, p, xs, feed), ys)
}

/// What `rho` sees for each example of the batch.
pub fn batch_features<T: Real>(model: &Model, p: &[Vec<T>], xs: &[Vec<usize>], feed: &Feed<'_>) -> Vec<Vec<T>> {
    xs.iter()
        .enumerate()
        .map(|(i, x)| match feed {
            Feed::Pooled(spec) => pooled_features(model, p, spec, x),
            Feed::Ordered(perms) => f_forward(model, p, &perms[i].apply(x)),
        })
        .collect()
}

fn mse_from_features<T: Real>(model: &Model, p: &[Vec<T>], features: &[Vec<T>], ys: &[f64]) -> T {
    let mut total = T::from_f64(0.0);
    for (fx, &y) in features.iter().zip(ys) {
        let d = rho_forward(model, p, fx) - T::from_f64(y);
        total = total + d * d;
    }
    total / T::from_f64(ys.len() as f64)
}

/// Index of the first `rho` parameter block.
fn rho_base(model: &Model) -> usize {
    if model.spec.f_arch.is_recurrent() {
        4
    } else {
        2
    }
}

/// Tape gradient of the same batch loss.
pub fn tape_gradient(model: &Model, xs: &[Vec<usize>], ys: &[f64], feed: &Feed<'_>) -> Gradients {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = model.params.bind(&mut g);
    let pred = match feed {
        Feed::Pooled(spec) => training::pooled_forward(&mut g, model, &ids, spec, xs),
        Feed::Ordered(perms) => training::permuted_forward(&mut g, model, &ids, xs, perms),
    }
    .expect("forward");
    let y = g.constant(Tensor::matrix(ys.len(), 1, ys.to_vec()).expect("shape"));
    let d = g.sub(pred, y).expect("shape");
    let sq = g.square(d).expect("square");
    let loss = g.mean(sq).expect("mean");
    g.backward(loss).expect("scalar loss");
    Gradients::from_graph(&g, &ids, &model.params)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    /// Max over entries of `|tape - fd| / max(1e-12, |fd|)`.
    pub max_rel: f64,
    pub entries: usize,
    /// Entries whose central difference was re-evaluated in double-double.
    pub refined: usize,
    /// Max difference between the tape loss and the reference loss.
    pub forward_gap: f64,
}

/// Compares tape gradients with central differences of the reference loss
/// at `step`. Each difference is first taken in `f64`; entries that miss
/// `refine_above` are recomputed in double-double at the same step.
pub fn fd_check(
    model: &Model,
    xs: &[Vec<usize>],
    ys: &[f64],
    feed: &Feed<'_>,
    step: f64,
    refine_above: f64,
) -> FdReport {
    let tape = tape_gradient(model, xs, ys, feed);
    let mut p64 = params_as::<f64>(model);
    let mut pdd = params_as::<Dd>(model);
    let forward_gap = {
        let mut g = Graph::new();
        let ids = model.params.bind_frozen(&mut g);
        let pred = match feed {
            Feed::Pooled(spec) => training::pooled_forward(&mut g, model, &ids, spec, xs),
            Feed::Ordered(perms) => training::permuted_forward(&mut g, model, &ids, xs, perms),
        }
        .expect("forward");
        let tape_loss = g
            .value(pred)
            .data()
            .iter()
            .zip(ys)
            .map(|(p, y)| (p - y).powi(2))
            .sum::<f64>()
            / ys.len() as f64;
        (tape_loss - batch_mse(model, &p64, xs, ys, feed)).abs()
    };
    let h64 = step;
    let hdd = Dd::from_f64(step);
    let mut report = FdReport {
        max_rel: 0.0,
        entries: 0,
        refined: 0,
        forward_gap,
    };
    // rho parameters leave the features alone
    let feat64 = batch_features(model, &p64, xs, feed);
    let featdd = batch_features(model, &pdd, xs, feed);
    fn loss<T: Real>(
        model: &Model,
        p: &[Vec<T>],
        cached: Option<&[Vec<T>]>,
        xs: &[Vec<usize>],
        ys: &[f64],
        feed: &Feed<'_>,
    ) -> T {
        match cached {
            Some(f) => mse_from_features(model, p, f, ys),
            None => batch_mse(model, p, xs, ys, feed),
        }
    }
    for (b, block) in tape.0.iter().enumerate() {
        let head = b >= rho_base(model);
        let c64 = head.then_some(feat64.as_slice());
        let cdd = head.then_some(featdd.as_slice());
        for (j, &a) in block.iter().enumerate() {
            let orig = p64[b][j];
            p64[b][j] = orig + h64;
            let plus = loss(model, &p64, c64, xs, ys, feed);
            p64[b][j] = orig - h64;
            let minus = loss(model, &p64, c64, xs, ys, feed);
            p64[b][j] = orig;
            let fd = (plus - minus) / (2.0 * h64);
            let mut rel = (a - fd).abs() / fd.abs().max(1e-12);
            if rel > refine_above {
                let o = pdd[b][j];
                pdd[b][j] = o + hdd;
                let plus = loss(model, &pdd, cdd, xs, ys, feed);
                pdd[b][j] = o - hdd;
                let minus = loss(model, &pdd, cdd, xs, ys, feed);
                pdd[b][j] = o;
                let fd = ((plus - minus) / (hdd + hdd)).to_f64();
                rel = (a - fd).abs() / fd.abs().max(1e-12);
                report.refined += 1;
            }
            report.max_rel = report.max_rel.max(rel);
            report.entries += 1;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::ModelSpec;

    #[test]
    fn double_double_arithmetic() {
        let third = Dd::from_f64(1.0) / Dd::from_f64(3.0);
        let back = third * Dd::from_f64(3.0) - Dd::from_f64(1.0);
        assert!(back.to_f64().abs() < 1e-31);
        // e to 32 digits
        let e = Real::exp(Dd::from_f64(1.0)) - Dd::new(std::f64::consts::E, 1.4456468917292502e-16);
        assert!(e.to_f64().abs() < 1e-30, "{e:?}");
        let e10 = Real::exp(Dd::from_f64(-10.0)) - Dd::new(4.5399929762484854e-5, -2.637554055327531e-21);
        assert!(e10.to_f64().abs() < 1e-33, "{e10:?}");
    }

    #[test]
    fn double_double_tanh_is_accurate() {
        for &x in &[-3.0, -0.7, -1e-3, 0.0, 2e-4, 0.3, 0.49, 0.51, 1.7, 9.0] {
            let t = Real::tanh(Dd::from_f64(x));
            assert!(
                (t.to_f64() - x.tanh()).abs() <= 2.0 * f64::EPSILON * x.tanh().abs().max(1e-300),
                "{x}"
            );
            // derivative identity through the double-double path
            let h = Dd::from_f64(1e-9);
            let d = ((Real::tanh(Dd::from_f64(x) + h) - Real::tanh(Dd::from_f64(x) - h)) / (h + h)).to_f64();
            let want = 1.0 - x.tanh().powi(2);
            assert!((d - want).abs() < 1e-12, "{x}: {d} vs {want}");
        }
    }

    #[test]
    fn reference_matches_tape_forward() {
        let xs = vec![vec![1, 3, 0], vec![2, 2, 4]];
        for (spec, pooling) in [
            (ModelSpec::kary(5, 2, RhoArch::Mlp100), PoolingSpec::kary(2)),
            (
                ModelSpec::kary(5, 3, RhoArch::Linear),
                PoolingSpec::kary(3).with_seed(0),
            ),
            (ModelSpec::kary(5, 1, RhoArch::Linear), PoolingSpec::exact()),
            (
                ModelSpec {
                    rho_input_scale: 3.0,
                    ..ModelSpec::kary(5, 1, RhoArch::Mlp100)
                },
                PoolingSpec::kary(1),
            ),
        ] {
            let model = Model::new(spec, 3).unwrap();
            let p = params_as::<f64>(&model);
            let mut g = Graph::new();
            let ids = model.params.bind_frozen(&mut g);
            let out = training::pooled_forward(&mut g, &model, &ids, &pooling, &xs).unwrap();
            for (i, x) in xs.iter().enumerate() {
                let r = pooled_prediction(&model, &p, &pooling, x);
                assert!((r - g.value(out).data()[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scaled_rho_input_passes_gradient_check() {
        let mut spec = ModelSpec::kary(6, 1, RhoArch::Mlp100);
        spec.embed_dim = 3;
        spec.rho_input_scale = 3.0;
        let model = Model::new(spec, 9).unwrap();
        let pooling = PoolingSpec::kary(1);
        let report = fd_check(
            &model,
            &[vec![1, 4, 2], vec![5, 0, 3]],
            &[0.7, -1.3],
            &Feed::Pooled(&pooling),
            1e-6,
            5e-6,
        );
        assert!(report.forward_gap < 1e-12 && report.max_rel < 1e-5, "{report:?}");
    }
}
