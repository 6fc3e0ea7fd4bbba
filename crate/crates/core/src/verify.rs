//! Executable invariant suite behind the `verify` subcommand.
//!
//! `Fast` keeps sequences at five elements or fewer and skips the
//! statistical tests; `Full` runs everything.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::nets::{self, Checkpoint, FArch, Model, ModelSpec, RhoArch};
use crate::perm::{self, Permutation};
use crate::pooling::{self, CanonicalKey, ProjectK, SequenceFunction};
use crate::reference;
use crate::seed::{self, Rng as SeedRng};
use crate::tasks::{self, TaskName, TaskSpec};
use crate::training::{self, Batch, LossKind, SgdSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Fast,
    Full,
}

/// Deliberate defects for checking that the suite notices them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Mutations {
    /// Scale the k-ary pooled value by `(n-k)!`, as if it were normalised
    /// by `1/n!` instead of `(n-k)!/n!`.
    pub kary_prefactor: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

/// Random one-layer tanh network read off the first `k` elements, with a
/// scalar linear readout.
pub struct RandomMlp {
    pub w: Tensor,
    pub b: Tensor,
    pub v: Tensor,
    pub k: usize,
}

impl RandomMlp {
    pub fn new<R: Rng + ?Sized>(d: usize, k: usize, hidden: usize, rng: &mut R) -> Self {
        let mut normal = |len: usize| -> Vec<f64> { (0..len).map(|_| StandardNormal.sample(rng)).collect() };
        let scale = 1.0 / ((k * d) as f64).sqrt();
        RandomMlp {
            w: Tensor::matrix(
                k * d,
                hidden,
                normal(k * d * hidden).into_iter().map(|x| x * scale).collect(),
            )
            .expect("shape"),
            b: Tensor::vector(normal(hidden)),
            v: Tensor::matrix(hidden, 1, normal(hidden)).expect("shape"),
            k,
        }
    }
}

impl SequenceFunction for RandomMlp {
    fn prefix_arity(&self) -> Option<usize> {
        Some(self.k)
    }

    fn eval(&self, g: &mut Graph, _n: usize, seq: &[NodeId]) -> pooling::Result<NodeId> {
        let x = g.concat(&seq[..self.k])?;
        let w = g.constant(self.w.clone());
        let b = g.constant(self.b.clone());
        let v = g.constant(self.v.clone());
        let z = g.matmul(x, w)?;
        let z = g.add_bias(z, b)?;
        let a = g.tanh(z)?;
        Ok(g.matmul(a, v)?)
    }
}

fn random_inputs<R: Rng + ?Sized>(g: &mut Graph, n: usize, d: usize, rng: &mut R) -> Vec<NodeId> {
    (0..n)
        .map(|_| {
            let data: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            g.constant(Tensor::matrix(1, d, data).expect("shape"))
        })
        .collect()
}

fn scalar(g: &Graph, id: NodeId) -> f64 {
    g.value(id).data()[0]
}

fn max_n(level: Level) -> usize {
    match level {
        Level::Fast => 5,
        Level::Full => 6,
    }
}

fn check_perm_enumeration(level: Level) -> Outcome {
    for n in 0..=max_n(level) + 1 {
        let perms = perm::enumerate_permutations(n).map_err(|e| e.to_string())?;
        ensure(perms.len() as f64 == factorial(n), || {
            format!("n={n}: {} permutations", perms.len())
        })?;
        ensure(perms.windows(2).all(|w| w[0].as_slice() < w[1].as_slice()), || {
            format!("n={n}: not strictly lexicographic")
        })?;
        ensure(perms.iter().all(|p| perm::is_bijection(p.as_slice())), || {
            format!("n={n}: non-bijection")
        })?;
        for k in 1..=n {
            let sel = perm::enumerate_k_permutations(n, k).map_err(|e| e.to_string())?;
            let want = factorial(n) / factorial(n - k);
            ensure(sel.len() as f64 == want, || {
                format!("n={n}, k={k}: {} selections", sel.len())
            })?;
            ensure(sel.windows(2).all(|w| w[0].indices() < w[1].indices()), || {
                format!("n={n}, k={k}: selections not strictly increasing")
            })?;
            let comb = perm::enumerate_k_combinations(n, k, perm::DEFAULT_TERM_CAP).map_err(|e| e.to_string())?;
            ensure(comb.len() as f64 == want / factorial(k), || {
                format!("n={n}, k={k}: {} combinations", comb.len())
            })?;
        }
    }
    ensure(
        perm::enumerate_permutations(perm::DEFAULT_ENUMERATION_CAP + 1).is_err(),
        || "enumeration above the cap succeeded".into(),
    )?;
    Ok(format!("n <= {}", max_n(level) + 1))
}

fn check_projection() -> Outcome {
    let h = vec![1, 2, 3];
    let short =
        perm::project_k_with(&h, 5, || Ok::<_, perm::PermError>(0)).map_err(|_| "padding failed".to_string())?;
    ensure(short == vec![1, 2, 3, 0, 0], || format!("padded: {short:?}"))?;
    let long =
        perm::project_k_with(&h, 2, || Ok::<_, perm::PermError>(0)).map_err(|_| "truncation failed".to_string())?;
    ensure(long == vec![1, 2], || format!("truncated: {long:?}"))?;
    Ok("pad and truncate".into())
}

fn check_exact_invariance(level: Level, rng: &mut SeedRng) -> Outcome {
    let mut worst: f64 = 0.0;
    for n in 1..=max_n(level) {
        for _ in 0..3 {
            let f = RandomMlp::new(3, n, 6, rng);
            let mut g = Graph::new();
            let h = random_inputs(&mut g, n, 3, rng);
            let base = pooling::janossy_exact(&mut g, &f, &h).map_err(|e| e.to_string())?;
            let shuffled = perm::sample_permutation(n, rng).apply(&h);
            let other = pooling::janossy_exact(&mut g, &f, &shuffled).map_err(|e| e.to_string())?;
            worst = worst.max(rel_err(scalar(&g, other), scalar(&g, base)));
        }
    }
    ensure(worst <= 1e-9, || format!("relative error {worst:e}"))?;
    Ok(format!("max relative error {worst:.2e}"))
}

fn check_kary_equivalence(level: Level, mutations: Mutations, rng: &mut SeedRng) -> Outcome {
    let mut worst: f64 = 0.0;
    for n in 1..=max_n(level) {
        for k in 1..=n {
            let f = RandomMlp::new(2, k, 5, rng);
            let mut g = Graph::new();
            let h = random_inputs(&mut g, n, 2, rng);
            let fast = pooling::janossy_kary(&mut g, &f, &h, k).map_err(|e| e.to_string())?;
            let mut fast = scalar(&g, fast);
            if mutations.kary_prefactor {
                fast *= factorial(n - k);
            }
            let lifted = ProjectK { inner: &f, k };
            let naive = pooling::janossy_exact(&mut g, &lifted, &h).map_err(|e| e.to_string())?;
            worst = worst.max(rel_err(fast, scalar(&g, naive)));
        }
    }
    ensure(worst <= 1e-10, || format!("relative error {worst:e}"))?;
    Ok(format!("max relative error {worst:.2e}"))
}

fn check_sorted_combinations(level: Level, rng: &mut SeedRng) -> Outcome {
    let mut worst: f64 = 0.0;
    for n in 2..=max_n(level) {
        for k in 1..=n {
            let f = RandomMlp::new(2, k, 5, rng);
            let mut g = Graph::new();
            let h = random_inputs(&mut g, n, 2, rng);
            let sorted = pooling::canonical_order(&g, &h, CanonicalKey::Ascending);
            let comb = pooling::janossy_kary_combinations(&mut g, &f, &sorted, k).map_err(|e| e.to_string())?;
            let f_sorted = pooling::seq_fn(|g: &mut Graph, n, s: &[NodeId]| {
                let s = pooling::canonical_order(g, s, CanonicalKey::Ascending);
                f.eval(g, n, &s)
            })
            .with_prefix_arity(k);
            let full = pooling::janossy_kary(&mut g, &f_sorted, &h, k).map_err(|e| e.to_string())?;
            worst = worst.max(rel_err(scalar(&g, comb), scalar(&g, full)));
        }
    }
    ensure(worst <= 1e-10, || format!("relative error {worst:e}"))?;
    Ok(format!("max relative error {worst:.2e}"))
}

fn check_staircase(level: Level, rng: &mut SeedRng) -> Outcome {
    let mut worst: f64 = 0.0;
    for n in 2..=max_n(level) {
        for k in 2..=n.min(4) {
            let f = RandomMlp::new(2, k - 1, 5, rng);
            let mut g = Graph::new();
            let h = random_inputs(&mut g, n, 2, rng);
            let low = pooling::janossy_kary(&mut g, &f, &h, k - 1).map_err(|e| e.to_string())?;
            let lifted =
                pooling::seq_fn(|g: &mut Graph, n, s: &[NodeId]| f.eval(g, n, &s[..k - 1])).with_prefix_arity(k);
            let high = pooling::janossy_kary(&mut g, &lifted, &h, k).map_err(|e| e.to_string())?;
            worst = worst.max(rel_err(scalar(&g, high), scalar(&g, low)));
        }
    }
    ensure(worst <= 1e-10, || format!("relative error {worst:e}"))?;
    Ok(format!("max relative error {worst:.2e}"))
}

fn check_unary_is_mean(rng: &mut SeedRng) -> Outcome {
    let f = RandomMlp::new(4, 1, 7, rng);
    let mut g = Graph::new();
    let h = random_inputs(&mut g, 5, 4, rng);
    let pooled = pooling::janossy_kary(&mut g, &f, &h, 1).map_err(|e| e.to_string())?;
    let mut direct = 0.0;
    for &x in &h {
        let y = f.eval(&mut g, 5, &[x]).map_err(|e| e.to_string())?;
        direct += scalar(&g, y) / 5.0;
    }
    let err = rel_err(scalar(&g, pooled), direct);
    ensure(err <= 1e-12, || format!("relative error {err:e}"))?;
    Ok(format!("relative error {err:.2e}"))
}

fn check_canonical(rng: &mut SeedRng) -> Outcome {
    let f = RandomMlp::new(2, 4, 5, rng);
    let mut g = Graph::new();
    let h = random_inputs(&mut g, 4, 2, rng);
    for key in [CanonicalKey::Ascending, CanonicalKey::Descending] {
        let a = pooling::canonical_pool(&mut g, &f, &h, key).map_err(|e| e.to_string())?;
        let shuffled = perm::sample_permutation(4, rng).apply(&h);
        let b = pooling::canonical_pool(&mut g, &f, &shuffled, key).map_err(|e| e.to_string())?;
        ensure(scalar(&g, a) == scalar(&g, b), || {
            format!("{key:?} ordering is not invariant")
        })?;
    }
    Ok("ascending and descending".into())
}

/// `rho = tanh` outside the pool differs from averaging `tanh . f`.
fn check_rho_placement(rng: &mut SeedRng) -> Outcome {
    let f = RandomMlp::new(2, 3, 5, rng);
    let mut g = Graph::new();
    let h = random_inputs(&mut g, 3, 2, rng);
    let pooled = pooling::janossy_exact(&mut g, &f, &h).map_err(|e| e.to_string())?;
    let outside = g.tanh(pooled).map_err(|e| e.to_string())?;
    let rho = |g: &mut Graph, x: NodeId| -> pooling::Result<NodeId> { Ok(g.tanh(x)?) };
    let inside = pooling::Composed { f: &f, rho: &rho };
    let inside = pooling::janossy_exact(&mut g, &inside, &h).map_err(|e| e.to_string())?;
    let gap = (scalar(&g, outside) - scalar(&g, inside)).abs();
    ensure(gap > 1e-9, || {
        format!("gap {gap:e} too small to witness the difference")
    })?;
    Ok(format!("gap {gap:.3e}"))
}

const PARAM_TABLE: [(Option<usize>, FArch, RhoArch, usize); 10] = [
    (Some(1), FArch::Mlp30, RhoArch::Linear, 3061),
    (Some(2), FArch::Mlp30, RhoArch::Linear, 3061),
    (Some(3), FArch::Mlp30, RhoArch::Linear, 3031),
    (Some(1), FArch::Mlp30, RhoArch::Mlp100, 6231),
    (Some(2), FArch::Mlp30, RhoArch::Mlp100, 6231),
    (Some(3), FArch::Mlp30, RhoArch::Mlp100, 6201),
    (None, FArch::Lstm50, RhoArch::Linear, 30451),
    (None, FArch::Lstm50, RhoArch::Mlp100, 35601),
    (None, FArch::Gru80, RhoArch::Linear, 43761),
    (None, FArch::Gru80, RhoArch::Mlp100, 51881),
];

fn spec_for(k: Option<usize>, f: FArch, rho: RhoArch, vocab: usize) -> ModelSpec {
    match k {
        Some(k) => ModelSpec::kary(vocab, k, rho),
        None => ModelSpec::full(vocab, f, rho),
    }
}

fn check_param_table() -> Outcome {
    for (k, f, rho, want) in PARAM_TABLE {
        let spec = spec_for(k, f, rho, 100);
        let got = nets::trainable_param_count(&spec);
        let built = nets::init_params(&spec, 0).numel();
        ensure(got == want && built == want, || {
            format!(
                "{} {:?} k={k:?}: counted {got}, built {built}, expected {want}",
                f.label(),
                rho
            )
        })?;
    }
    Ok("10 rows exact".into())
}

fn check_gradients(level: Level) -> Outcome {
    let mut worst: f64 = 0.0;
    let combos: &[(Option<usize>, FArch)] = match level {
        Level::Fast => &[(Some(2), FArch::Mlp30), (None, FArch::Lstm50), (None, FArch::Gru80)],
        Level::Full => &[
            (Some(1), FArch::Mlp30),
            (Some(2), FArch::Mlp30),
            (Some(3), FArch::Mlp30),
            (None, FArch::Lstm50),
            (None, FArch::Gru80),
        ],
    };
    for &(k, f) in combos {
        for rho in [RhoArch::Linear, RhoArch::Mlp100] {
            let mut spec = spec_for(k, f, rho, 6);
            spec.embed_dim = 3;
            let model = Model::new(spec, 5).map_err(|e| e.to_string())?;
            let err = model_grad_check(&model, 1e-6)?;
            worst = worst.max(err);
        }
    }
    ensure(worst < 1e-5, || format!("max relative error {worst:e}"))?;
    Ok(format!("max relative error {worst:.2e}"))
}

/// Finite-difference check of the full-model loss on a fixed two-example
/// batch against the scalar reference forward. Exact (k-ary) pooling for
/// MLP `f`, a fixed ordering per example for recurrent `f`.
pub fn model_grad_check(model: &Model, step: f64) -> Result<f64, String> {
    let xs = vec![vec![1, 4, 2], vec![5, 0, 3]];
    let ys = [0.7, -1.3];
    let perms = [Permutation::new(vec![2, 0, 1]).expect("perm"), Permutation::identity(3)];
    let pooling_spec = model.spec.k.map(pooling::PoolingSpec::kary);
    let feed = match &pooling_spec {
        Some(p) => reference::Feed::Pooled(p),
        None => reference::Feed::Ordered(&perms),
    };
    let report = reference::fd_check(model, &xs, &ys, &feed, step, 5e-6);
    if report.forward_gap > 1e-12 {
        return Err(format!("reference forward differs by {:.2e}", report.forward_gap));
    }
    Ok(report.max_rel)
}

fn check_checkpoint() -> Outcome {
    let model = Model::new(ModelSpec::full(10, FArch::Lstm50, RhoArch::Mlp100), 3).map_err(|e| e.to_string())?;
    let dir = std::env::temp_dir().join(format!("janossy-verify-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let path = dir.join("ckpt.json");
    Checkpoint::from_model(&model).save(&path).map_err(|e| e.to_string())?;
    let back = Checkpoint::load(&path)
        .and_then(Checkpoint::into_model)
        .map_err(|e| e.to_string());
    let _ = std::fs::remove_dir_all(&dir);
    let back = back?;
    ensure(back.params.flat() == model.params.flat(), || {
        "parameters changed".into()
    })?;
    ensure(back.embedding == model.embedding, || "embedding changed".into())?;
    Ok("bit-exact".into())
}

fn check_frozen_embedding() -> Outcome {
    let mut model = Model::new(ModelSpec::kary(8, 2, RhoArch::Mlp100), 9).map_err(|e| e.to_string())?;
    let before = model.embedding.clone();
    let xs = vec![vec![1, 2, 3], vec![7, 7, 0]];
    let mut rng = seed::rng(1);
    training::pi_sgd_step(&mut model, Batch::new(&xs, &[1.0, 2.0]), &mut rng, 0.1).map_err(|e| e.to_string())?;
    training::exact_kary_step(
        &mut model,
        &pooling::PoolingSpec::kary(2),
        Batch::new(&xs, &[1.0, 2.0]),
        0.1,
    )
    .map_err(|e| e.to_string())?;
    ensure(model.embedding == before, || "embedding moved".into())?;
    Ok("unchanged after updates".into())
}

fn check_targets(rng: &mut SeedRng) -> Outcome {
    for name in TaskName::ALL {
        for _ in 0..20 {
            let x: Vec<usize> = (0..6).map(|_| rng.random_range(0..10)).collect();
            let y = tasks::target_fn(name, &x);
            let shuffled = perm::sample_permutation(6, rng).apply(&x);
            ensure(tasks::target_fn(name, &shuffled) == y, || {
                format!("{name} changed under permutation")
            })?;
        }
    }
    ensure(tasks::target_fn(TaskName::Variance, &[1, 3]) == 1.0, || {
        "variance([1,3])".into()
    })?;
    ensure(tasks::target_fn(TaskName::Range, &[10, 3, 7, 3, 9]) == 7.0, || {
        "range".into()
    })?;
    let spec = TaskSpec::desk(TaskName::UniqueSum, 4).with_sizes(300, 30);
    ensure(tasks::generate(&spec) == tasks::generate(&spec), || {
        "regeneration differs".into()
    })?;
    let m = tasks::Metrics::compute(&[1.4, 2.0], &[1.0, 2.0]).map_err(|e| e.to_string())?;
    ensure(m.accuracy == 1.0, || "0.4 offsets should round back".into())?;
    Ok("five tasks".into())
}

fn toy_model(rho: RhoArch) -> Model {
    let mut spec = ModelSpec::full(6, FArch::Gru80, rho);
    spec.embed_dim = 4;
    Model::new(spec, 21).expect("valid toy model")
}

/// Mean over all orderings of the per-ordering gradient equals the gradient
/// of the permuted-loss objective.
fn check_gradient_identity() -> Outcome {
    let model = toy_model(RhoArch::Mlp100);
    let xs = [vec![1, 4, 2], vec![3, 3, 5]];
    let ys = [0.4, -0.2];
    let perms = perm::enumerate_permutations(3).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for (x, &y) in xs.iter().zip(&ys) {
        let mut avg = nets::Gradients::zeros_like(&model.params);
        for p in &perms {
            let out = training::pi_sgd_gradient_with(
                &model,
                Batch::new(std::slice::from_ref(x), &[y]),
                std::slice::from_ref(p),
                LossKind::Mse,
            )
            .map_err(|e| e.to_string())?;
            avg.add_scaled(&out.grads, 1.0 / perms.len() as f64);
        }
        let mut g = Graph::new();
        let ids = model.params.bind(&mut g);
        let mut terms = Vec::new();
        for p in &perms {
            let pred =
                training::permuted_forward(&mut g, &model, &ids, std::slice::from_ref(x), std::slice::from_ref(p))
                    .map_err(|e| e.to_string())?;
            terms.push(training::loss_node(&mut g, LossKind::Mse, pred, &[y]).map_err(|e| e.to_string())?);
        }
        let total = g.add_all(&terms).map_err(|e| e.to_string())?;
        let jbar = g.scale(total, 1.0 / perms.len() as f64).map_err(|e| e.to_string())?;
        g.backward(jbar).map_err(|e| e.to_string())?;
        let exact = nets::Gradients::from_graph(&g, &ids, &model.params);
        worst = worst.max(avg.max_abs_diff(&exact));
    }
    ensure(worst <= 1e-10, || format!("max difference {worst:e}"))?;
    Ok(format!("max difference {worst:.2e}"))
}

/// `J >= L` for convex loss and affine `rho`.
fn check_jensen(level: Level) -> Outcome {
    let model = toy_model(RhoArch::Linear);
    let mut min_gap = f64::INFINITY;
    let max = if level == Level::Fast { 3 } else { 4 };
    let mut rng = seed::rng(17);
    for n in 1..=max {
        for _ in 0..4 {
            let x: Vec<usize> = (0..n).map(|_| rng.random_range(0..6)).collect();
            let y: f64 = StandardNormal.sample(&mut rng);
            let perms = perm::enumerate_permutations(n).map_err(|e| e.to_string())?;
            let mut g = Graph::new();
            let ids = model.params.bind_frozen(&mut g);
            let mut j = 0.0;
            for p in &perms {
                let pred =
                    training::permuted_forward(&mut g, &model, &ids, std::slice::from_ref(&x), std::slice::from_ref(p))
                        .map_err(|e| e.to_string())?;
                j += training::loss(LossKind::Mse, scalar(&g, pred), y) / perms.len() as f64;
            }
            let pooled = training::pooled_forward(&mut g, &model, &ids, &pooling::PoolingSpec::exact(), &[x])
                .map_err(|e| e.to_string())?;
            let l = training::loss(LossKind::Mse, scalar(&g, pooled), y);
            ensure(j >= l - 1e-12, || format!("J {j} < L {l}"))?;
            min_gap = min_gap.min(j - l);
        }
    }
    Ok(format!("smallest gap {min_gap:.2e}"))
}

fn check_inference_averaging() -> Outcome {
    let model = toy_model(RhoArch::Mlp100);
    let mut worst: f64 = 0.0;
    for n in 1..=5 {
        let x: Vec<usize> = (0..n).map(|i| (i * 7 + 1) % 6).collect();
        let got = training::predict_exhaustive(&model, std::slice::from_ref(&x)).map_err(|e| e.to_string())?[0];
        let mut g = Graph::new();
        let ids = model.params.bind_frozen(&mut g);
        let (f, rho) = model.bind(&ids);
        let h = model
            .embed_positions(&mut g, std::slice::from_ref(&x))
            .map_err(|e| e.to_string())?;
        let composed = pooling::Composed { f, rho: &rho };
        let want = pooling::janossy_exact(&mut g, &composed, &h).map_err(|e| e.to_string())?;
        worst = worst.max(rel_err(got, scalar(&g, want)));
    }
    ensure(worst <= 1e-9, || format!("relative error {worst:e}"))?;
    Ok(format!("max relative error {worst:.2e}"))
}

fn check_schedule() -> Outcome {
    let s = SgdSchedule {
        base_lr: 0.5,
        decay: 1e-3,
    };
    ensure((0..100_000).all(|t| s.rate(t) > 0.0 && s.rate(t) < 1.0), || {
        "rate outside (0, 1)".into()
    })?;
    let mut sum = 0.0;
    let mut sq = 0.0;
    let mut sq_at_half = 0.0;
    for t in 0..2_000_000u64 {
        let r = s.rate(t);
        sum += r;
        sq += r * r;
        if t == 999_999 {
            sq_at_half = sq;
        }
    }
    ensure(sum > 3000.0, || format!("rate sum only {sum}"))?;
    ensure(sq - sq_at_half < 1e-3 * sq, || "squared rates still growing".into())?;
    Ok(format!("sum {sum:.0}, squared sum {sq:.3}"))
}

fn check_variance_penalty(rng: &mut SeedRng) -> Outcome {
    let x = [1, 2, 5];
    let rnn = toy_model(RhoArch::Linear);
    for _ in 0..10 {
        let p = training::variance_regularizer(&rnn, &x, rng).map_err(|e| e.to_string())?;
        ensure(p >= 0.0, || format!("negative penalty {p}"))?;
    }
    ensure(
        training::variance_regularizer(&rnn, &[4], rng).map_err(|e| e.to_string())? == 0.0,
        || "single element should give 0".into(),
    )?;
    ensure(
        training::variance_regularizer(&rnn, &[2, 2, 2], rng).map_err(|e| e.to_string())? == 0.0,
        || "repeated elements should give 0".into(),
    )?;
    Ok("non-negative, zero when orderings coincide".into())
}

fn chi_square_p(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).expect("dof > 0");
    1.0 - dist.cdf(stat)
}

fn check_sampler_uniformity() -> Outcome {
    let perms = perm::enumerate_permutations(4).map_err(|e| e.to_string())?;
    let mut counts = vec![0u64; perms.len()];
    let mut rng = SeedRng::seed_from_u64(seed::derive(2024, seed::stream::PERM, 0));
    for _ in 0..120_000 {
        let p = perm::sample_permutation(4, &mut rng);
        let idx = perms.iter().position(|q| *q == p).ok_or("sampled a non-permutation")?;
        counts[idx] += 1;
    }
    let p = chi_square_p(&counts);
    ensure(p > 0.001, || format!("chi-square p = {p:.2e}"))?;
    Ok(format!("p = {p:.3}"))
}

fn check_digit_uniformity() -> Outcome {
    let spec = TaskSpec::standard(TaskName::Sum, 3).with_sizes(20_000, 0);
    let data = tasks::generate(&spec);
    let mut counts = vec![0u64; spec.vocab];
    for x in &data.train.inputs {
        for &d in x {
            counts[d] += 1;
        }
    }
    let p = chi_square_p(&counts);
    ensure(p > 0.001, || format!("chi-square p = {p:.2e}"))?;
    Ok(format!("p = {p:.3} over 100,000 digits"))
}

fn check_unbiasedness(rng: &mut SeedRng) -> Outcome {
    let draws = 100_000;
    let mut worst: f64 = 0.0;
    for _ in 0..3 {
        let f = RandomMlp::new(2, 4, 5, rng);
        let mut g = Graph::new();
        let h = random_inputs(&mut g, 4, 2, rng);
        let exact = pooling::janossy_exact(&mut g, &f, &h).map_err(|e| e.to_string())?;
        let exact = scalar(&g, exact);
        // every ordering's value, then draw indices
        let perms = perm::enumerate_permutations(4).map_err(|e| e.to_string())?;
        let mut values = Vec::with_capacity(perms.len());
        for p in &perms {
            let y = f.eval(&mut g, 4, &p.apply(&h)).map_err(|e| e.to_string())?;
            values.push(scalar(&g, y));
        }
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..draws {
            let p = perm::sample_permutation(4, rng);
            let idx = perms.iter().position(|q| *q == p).expect("enumerated");
            s += values[idx];
            s2 += values[idx] * values[idx];
        }
        let mean = s / draws as f64;
        let var = (s2 / draws as f64 - mean * mean).max(0.0);
        let se = (var / draws as f64).sqrt();
        let z = (mean - exact).abs() / se.max(1e-300);
        worst = worst.max(z);
    }
    ensure(worst <= 4.0, || format!("{worst:.2} standard errors"))?;
    Ok(format!("max {worst:.2} standard errors"))
}

fn check_averaging_variance() -> Outcome {
    let model = toy_model(RhoArch::Mlp100);
    let x = vec![vec![0, 1, 2, 3, 4]];
    let pooling_spec = pooling::PoolingSpec::sampled(1, 1);
    let spread = |m: usize| -> Result<f64, String> {
        let vals: Vec<f64> = (0..200)
            .map(|s| {
                let mut rng = seed::rng(seed::derive(s, seed::stream::EVAL, m as u64));
                training::predict_averaged(&model, &pooling_spec, &x, m, &mut rng).map(|v| v[0])
            })
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        Ok(crate::experiment::mean_std(&vals).1.powi(2))
    };
    let (v1, v5, v20) = (spread(1)?, spread(5)?, spread(20)?);
    ensure(v1 > v5 && v5 > v20, || format!("variances {v1:e}, {v5:e}, {v20:e}"))?;
    Ok(format!("variance {v1:.2e} -> {v5:.2e} -> {v20:.2e}"))
}

/// Runs the suite.
pub fn verify(level: Level, mutations: Mutations) -> VerifyReport {
    let mut rng = SeedRng::seed_from_u64(0x5eed);
    let mut checks = Vec::new();
    let mut run = |name: &'static str, f: &mut dyn FnMut(&mut SeedRng) -> Outcome| {
        let start = Instant::now();
        let outcome = f(&mut rng);
        let (passed, detail) = match outcome {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        checks.push(CheckResult {
            name,
            passed,
            detail,
            seconds: start.elapsed().as_secs_f64(),
        });
    };
    run("perm.enumeration", &mut |_| check_perm_enumeration(level));
    run("perm.projection", &mut |_| check_projection());
    run("pooling.exact_invariance", &mut |r| check_exact_invariance(level, r));
    run("pooling.kary_equivalence", &mut |r| {
        check_kary_equivalence(level, mutations, r)
    });
    run("pooling.sorted_combinations", &mut |r| {
        check_sorted_combinations(level, r)
    });
    run("pooling.staircase", &mut |r| check_staircase(level, r));
    run("pooling.unary_mean", &mut |r| check_unary_is_mean(r));
    run("pooling.canonical_invariance", &mut |r| check_canonical(r));
    run("pooling.rho_placement", &mut |r| check_rho_placement(r));
    run("nets.param_table", &mut |_| check_param_table());
    run("nets.gradient_check", &mut |_| check_gradients(level));
    run("nets.checkpoint_roundtrip", &mut |_| check_checkpoint());
    run("nets.frozen_embedding", &mut |_| check_frozen_embedding());
    run("tasks.targets", &mut |r| check_targets(r));
    run("training.gradient_identity", &mut |_| check_gradient_identity());
    run("training.jensen_bound", &mut |_| check_jensen(level));
    run("training.inference_averaging", &mut |_| check_inference_averaging());
    run("training.schedule", &mut |_| check_schedule());
    run("training.variance_penalty", &mut |r| check_variance_penalty(r));
    if level == Level::Full {
        run("perm.sampler_chi_square", &mut |_| check_sampler_uniformity());
        run("tasks.digit_uniformity", &mut |_| check_digit_uniformity());
        run("pooling.unbiasedness", &mut |r| check_unbiasedness(r));
        run("training.averaging_variance", &mut |_| check_averaging_variance());
    }
    VerifyReport { checks }
}
