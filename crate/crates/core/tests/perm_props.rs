use std::collections::BTreeSet;

use janossy::autodiff::Tensor;
use janossy::perm::*;
use janossy::seed;
use proptest::prelude::*;

fn factorial(n: usize) -> u64 {
    (1..=n as u64).product()
}

#[test]
fn enumeration_sizes() {
    for n in 0..=7 {
        assert_eq!(enumerate_permutations(n).unwrap().len() as u64, factorial(n));
        for k in 1..=n {
            let got = enumerate_k_permutations(n, k).unwrap();
            assert_eq!(got.len() as u64, factorial(n) / factorial(n - k), "n={n} k={k}");
            assert_eq!(k_permutation_count(n, k), Some(factorial(n) / factorial(n - k)));
            let distinct: BTreeSet<_> = got.iter().map(|s| s.indices().to_vec()).collect();
            assert_eq!(distinct.len(), got.len());
        }
    }
}

#[test]
fn full_arity_selections_are_the_permutations() {
    for n in 1..=6 {
        let perms: BTreeSet<Vec<usize>> = enumerate_permutations(n)
            .unwrap()
            .into_iter()
            .map(Permutation::into_inner)
            .collect();
        let sels: BTreeSet<Vec<usize>> = enumerate_k_permutations(n, n)
            .unwrap()
            .iter()
            .map(|s| s.indices().to_vec())
            .collect();
        assert_eq!(perms, sels);
    }
}

proptest! {
    #[test]
    fn sampled_permutations_are_bijections(n in 0usize..40, s in any::<u64>()) {
        let mut rng = seed::rng(s);
        for _ in 0..20 {
            let p = sample_permutation(n, &mut rng);
            prop_assert_eq!(p.len(), n);
            prop_assert!(is_bijection(p.as_slice()));
        }
    }

    #[test]
    fn apply_then_inverse_order_restores(v in prop::collection::vec(any::<i32>(), 0..12), s in any::<u64>()) {
        let p = sample_permutation(v.len(), &mut seed::rng(s));
        let moved = p.apply(&v);
        let mut restored = vec![0; v.len()];
        for (i, &j) in p.as_slice().iter().enumerate() {
            restored[j] = moved[i];
        }
        prop_assert_eq!(restored, v);
    }

    #[test]
    fn projection_reads_only_the_prefix(
        h in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..8),
        k in 1usize..8,
        noise in -5.0f64..5.0,
    ) {
        let tensors: Vec<Tensor> = h.iter().map(|v| Tensor::vector(v.clone())).collect();
        let base = project_k(&tensors, k, None).unwrap();
        let mut changed = tensors.clone();
        for t in changed.iter_mut().skip(k) {
            for x in t.data_mut() {
                *x += noise;
            }
        }
        let after = project_k(&changed, k, None).unwrap();
        prop_assert_eq!(base.len(), k);
        for (a, b) in base.iter().zip(&after) {
            prop_assert_eq!(a.data(), b.data());
        }
        for pad in base.iter().skip(h.len()) {
            prop_assert!(pad.data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn combinations_are_increasing_and_counted(n in 1usize..9, k in 1usize..9) {
        prop_assume!(k <= n);
        let combos = enumerate_k_combinations(n, k, DEFAULT_TERM_CAP).unwrap();
        prop_assert_eq!(Some(combos.len() as u64), combination_count(n, k));
        for c in &combos {
            prop_assert!(c.indices().windows(2).all(|w| w[0] < w[1]));
        }
    }
}
