use biofuse::stats::*;
use proptest::prelude::*;

/// Direct pair count: #{(i, j): x_i > y_j} + ½ #{x_i = y_j}.
fn pair_u(x: &[f64], y: &[f64]) -> f64 {
    let mut u = 0.0;
    for a in x {
        for b in y {
            if a > b {
                u += 1.0;
            } else if a == b {
                u += 0.5;
            }
        }
    }
    u
}

/// Two-sided p by enumerating every way to label `m` of the pooled values as x.
fn permutation_p(x: &[f64], y: &[f64]) -> f64 {
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let (m, n) = (x.len(), pooled.len());
    let u_obs = pair_u(x, y);
    let (mut total, mut le, mut ge) = (0u64, 0u64, 0u64);
    for bits in 0u32..(1 << n) {
        if bits.count_ones() as usize != m {
            continue;
        }
        let (xs, ys): (Vec<f64>, Vec<f64>) = {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for (i, v) in pooled.iter().enumerate() {
                if bits & (1 << i) != 0 {
                    xs.push(*v)
                } else {
                    ys.push(*v)
                }
            }
            (xs, ys)
        };
        let u = pair_u(&xs, &ys);
        total += 1;
        le += (u <= u_obs) as u64;
        ge += (u >= u_obs) as u64;
    }
    (2.0 * le.min(ge) as f64 / total as f64).min(1.0)
}

#[test]
fn exact_branch_matches_enumeration_for_every_rank_pattern() {
    for big_n in 2..=10usize {
        for bits in 0u32..(1 << big_n) {
            let m = bits.count_ones() as usize;
            if m == 0 || m == big_n {
                continue;
            }
            let x: Vec<f64> = (0..big_n).filter(|i| bits & (1 << i) != 0).map(|i| i as f64).collect();
            let y: Vec<f64> = (0..big_n).filter(|i| bits & (1 << i) == 0).map(|i| i as f64).collect();
            let r = mann_whitney_u(&x, &y).unwrap();
            assert_eq!(r.method, Method::Exact);
            assert_eq!(r.u, pair_u(&x, &y));
            let want = permutation_p(&x, &y);
            assert!((r.p_raw - want).abs() < 1e-15, "{x:?} vs {y:?}: {} vs {want}", r.p_raw);
        }
    }
}

#[test]
fn large_samples_use_normal_approximation() {
    let x: Vec<f64> = (0..40).map(|i| i as f64 * 0.01).collect();
    let y: Vec<f64> = (0..40).map(|i| 0.3 + i as f64 * 0.01).collect();
    let r = mann_whitney_u(&x, &y).unwrap();
    assert_eq!(r.method, Method::NormalApprox);
    assert!(r.p_raw < 1e-4);
}

#[test]
fn normal_branch_reference_value() {
    // m = n = 7, no ties, U = 12: z = (|12 − 24.5| − 0.5) / √(49·15/12)
    let x: Vec<f64> = vec![1.0, 2.0, 3.0, 4.0, 9.0, 10.0, 11.0];
    let y: Vec<f64> = vec![5.0, 6.0, 7.0, 8.0, 12.0, 13.0, 14.0];
    let r = mann_whitney_u(&x, &y).unwrap();
    assert_eq!(r.u, 12.0);
    let z = 12.0 / (49.0f64 * 15.0 / 12.0).sqrt();
    // erfc(z/√2) from a 30-digit reference
    assert!((z - 1.533303755999856).abs() < 1e-14);
    assert!((r.p_raw - 0.12520102961031544).abs() < 1e-12, "{}", r.p_raw);
}

#[test]
fn symbol_sweep() {
    let expect = [(1e-5, "****"), (5e-4, "***"), (5e-3, "**"), (0.03, "*"), (0.05, "ns"), (0.3, "ns")];
    for (p, s) in expect {
        assert_eq!(significance_symbol(p).unwrap().as_str(), s, "p = {p}");
    }
}

fn distinct(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::btree_set(-1000i32..1000, n).prop_map(|s| s.into_iter().map(|v| v as f64 / 7.0).collect())
}

proptest! {
    #[test]
    fn u_statistics_are_complementary(x in prop::collection::vec(0i32..6, 1..15), y in prop::collection::vec(0i32..6, 1..15)) {
        let (x, y): (Vec<f64>, Vec<f64>) = (x.iter().map(|&v| v as f64).collect(), y.iter().map(|&v| v as f64).collect());
        let a = mann_whitney_u(&x, &y).unwrap();
        let b = mann_whitney_u(&y, &x).unwrap();
        prop_assert_eq!(a.u + b.u, (x.len() * y.len()) as f64);
        prop_assert_eq!(a.u, pair_u(&x, &y));
        prop_assert!((a.p_raw - b.p_raw).abs() < 1e-12);
    }

    #[test]
    fn p_is_invariant_under_monotone_maps(pooled in distinct(16), split in 1usize..15, k in 0.1f64..3.0) {
        let (x, y) = pooled.split_at(split);
        let f = |v: &f64| (k * v).exp() + v.powi(3);
        let fx: Vec<f64> = x.iter().map(f).collect();
        let fy: Vec<f64> = y.iter().map(f).collect();
        let a = mann_whitney_u(x, y).unwrap();
        let b = mann_whitney_u(&fx, &fy).unwrap();
        prop_assert_eq!(a.u, b.u);
        prop_assert_eq!(a.p_raw, b.p_raw);
    }

    #[test]
    fn exact_and_normal_agree_for_six_versus_six(pooled in distinct(12).prop_shuffle()) {
        let (x, y) = pooled.split_at(6);
        let exact = mann_whitney_u(x, y).unwrap();
        prop_assert_eq!(exact.method, Method::Exact);
        let approx = mann_whitney_u_with(x, y, Some(Method::NormalApprox)).unwrap();
        prop_assert_eq!(approx.u, exact.u);
        prop_assert!((exact.p_raw - approx.p_raw).abs() <= 0.02, "{} vs {}", exact.p_raw, approx.p_raw);
    }

    #[test]
    fn symbols_get_weaker_as_p_grows(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(significance_symbol(lo).unwrap() <= significance_symbol(hi).unwrap());
    }

    #[test]
    fn bonferroni_caps_at_one(p in 0.0f64..=1.0, factor in 1usize..100) {
        let c = bonferroni(p, factor);
        prop_assert!(c <= 1.0 && c >= p);
    }
}
