use janossy::autodiff::{Graph, NodeId, Tensor};
use janossy::perm::sample_permutation;
use janossy::pooling::{
    canonical_pool, janossy_exact, janossy_kary, janossy_sampled, CanonicalKey, ProjectK, Result, SequenceFunction,
};
use janossy::seed;
use proptest::prelude::*;

const D: usize = 2;

/// Order-sensitive recurrence `s <- tanh(a * s + w * x + c)` over the
/// first `arity` elements (or all of them).
#[derive(Debug, Clone)]
struct Fold {
    a: Vec<f64>,
    w: Vec<f64>,
    c: Vec<f64>,
    arity: Option<usize>,
}

impl SequenceFunction for Fold {
    fn prefix_arity(&self) -> Option<usize> {
        self.arity
    }

    fn eval(&self, g: &mut Graph, _n: usize, seq: &[NodeId]) -> Result<NodeId> {
        let a = g.constant(Tensor::matrix(1, D, self.a.clone()).unwrap());
        let w = g.constant(Tensor::matrix(1, D, self.w.clone()).unwrap());
        let c = g.constant(Tensor::matrix(1, D, self.c.clone()).unwrap());
        let take = self.arity.unwrap_or(seq.len()).min(seq.len());
        let mut s = g.constant(Tensor::matrix(1, D, vec![0.0; D]).unwrap());
        for &x in &seq[..take] {
            let carried = g.mul(a, s)?;
            let read = g.mul(w, x)?;
            let z = g.add(carried, read)?;
            let z = g.add(z, c)?;
            s = g.tanh(z)?;
        }
        Ok(s)
    }
}

fn fold() -> impl Strategy<Value = Fold> {
    let v = || prop::collection::vec(-1.5f64..1.5, D);
    (v(), v(), v()).prop_map(|(a, w, c)| Fold { a, w, c, arity: None })
}

fn set(max: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-2.0f64..2.0, D), 1..=max)
}

fn nodes(g: &mut Graph, h: &[Vec<f64>]) -> Vec<NodeId> {
    h.iter()
        .map(|v| g.constant(Tensor::matrix(1, D, v.clone()).unwrap()))
        .collect()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter()
        .zip(b)
        .all(|(x, y)| (x - y).abs() <= tol * x.abs().max(y.abs()).max(1e-300))
}

fn run(h: &[Vec<f64>], body: impl FnOnce(&mut Graph, &[NodeId]) -> Result<NodeId>) -> Vec<f64> {
    let mut g = Graph::new();
    let ids = nodes(&mut g, h);
    let out = body(&mut g, &ids).unwrap();
    g.value(out).data().to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn deterministic_strategies_are_invariant(f in fold(), h in set(5), k in 1usize..4, s in any::<u64>()) {
        let p = sample_permutation(h.len(), &mut seed::rng(s));
        let hp = p.apply(&h);
        let pairs = [
            (run(&h, |g, x| janossy_exact(g, &f, x)), run(&hp, |g, x| janossy_exact(g, &f, x))),
            (run(&h, |g, x| janossy_kary(g, &f, x, k)), run(&hp, |g, x| janossy_kary(g, &f, x, k))),
            (
                run(&h, |g, x| canonical_pool(g, &f, x, CanonicalKey::Ascending)),
                run(&hp, |g, x| canonical_pool(g, &f, x, CanonicalKey::Ascending)),
            ),
        ];
        for (a, b) in &pairs {
            prop_assert!(close(a, b, 1e-9), "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn kary_is_exact_pooling_of_the_projection(f in fold(), h in set(6), k in 1usize..7) {
        prop_assume!(k <= h.len());
        let fast = run(&h, |g, x| janossy_kary(g, &f, x, k));
        let projected = ProjectK { inner: f.clone(), k };
        let slow = run(&h, |g, x| janossy_exact(g, &projected, x));
        prop_assert!(close(&fast, &slow, 1e-10), "{fast:?} vs {slow:?}");
    }

    #[test]
    fn lifting_the_arity_changes_nothing(f in fold(), h in set(6), k in 2usize..7) {
        prop_assume!(k <= h.len());
        let lower = Fold { arity: Some(k - 1), ..f.clone() };
        let lifted = ProjectK { inner: lower.clone(), k };
        let a = run(&h, |g, x| janossy_kary(g, &lower, x, k - 1));
        let b = run(&h, |g, x| janossy_kary(g, &lifted, x, k));
        prop_assert!(close(&a, &b, 1e-10), "{a:?} vs {b:?}");
    }

    #[test]
    fn unary_pooling_is_the_elementwise_mean(f in fold(), h in set(8)) {
        let pooled = run(&h, |g, x| janossy_kary(g, &f, x, 1));
        let mean = run(&h, |g, x| {
            let mut acc = f.eval(g, x.len(), &x[..1])?;
            for &xi in &x[1..] {
                let term = f.eval(g, x.len(), &[xi])?;
                acc = g.add(acc, term)?;
            }
            Ok(g.scale(acc, 1.0 / x.len() as f64)?)
        });
        prop_assert_eq!(pooled, mean);
    }

    #[test]
    fn sampled_single_draw_is_one_ordering(f in fold(), h in set(5), s in any::<u64>()) {
        let sampled = run(&h, |g, x| janossy_sampled(g, &f, x, 1, &mut seed::rng(s)));
        let p = sample_permutation(h.len(), &mut seed::rng(s));
        let direct = run(&p.apply(&h), |g, x| f.eval(g, x.len(), x));
        prop_assert_eq!(sampled, direct);
    }
}
