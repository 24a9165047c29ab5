use gmerf::mixedmodel::{blup, estimate_sigma2, gll, log_likelihood, GroupedData, VarianceComponents};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Instance {
    y_l: Vec<f64>,
    offset: Vec<f64>,
    w: Vec<f64>,
    area: Vec<usize>,
    d: usize,
}

impl Instance {
    fn random(rng: &mut ChaCha8Rng, max_d: usize, max_n: usize) -> Self {
        let d = rng.random_range(1..=max_d);
        let mut inst = Instance { y_l: vec![], offset: vec![], w: vec![], area: vec![], d };
        for a in 0..d {
            for _ in 0..rng.random_range(1..=max_n) {
                inst.y_l.push(rng.random_range(-3.0..3.0));
                inst.offset.push(rng.random_range(-1.0..1.0));
                inst.w.push(rng.random_range(0.01..=0.25));
                inst.area.push(a);
            }
        }
        inst
    }

    fn data(&self) -> GroupedData<'_> {
        GroupedData::new(&self.y_l, &self.offset, &self.w, &self.area, self.d).unwrap()
    }

    fn z(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.y_l.len(), self.d, |j, a| f64::from(u8::from(self.area[j] == a)))
    }

    fn residual(&self) -> DVector<f64> {
        DVector::from_iterator(self.y_l.len(), self.y_l.iter().zip(&self.offset).map(|(y, f)| y - f))
    }

    fn covariance(&self, sigma2: f64) -> DMatrix<f64> {
        let z = self.z();
        let w_inv = DMatrix::from_diagonal(&DVector::from_iterator(self.w.len(), self.w.iter().map(|w| 1.0 / w)));
        &z * z.transpose() * sigma2 + w_inv
    }

    /// `σ² Z' V⁻¹ r` by explicit inversion.
    fn dense_blup(&self, sigma2: f64) -> Vec<f64> {
        let v_inv = self.covariance(sigma2).try_inverse().unwrap();
        let nu = self.z().transpose() * v_inv * self.residual() * sigma2;
        nu.iter().copied().collect()
    }

    fn dense_loglik(&self, sigma2: f64) -> f64 {
        let v = self.covariance(sigma2);
        let n = v.nrows() as f64;
        let chol = v.cholesky().unwrap();
        let log_det = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        let r = self.residual();
        let quad = r.dot(&chol.solve(&r));
        -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + log_det + quad)
    }
}

#[test]
fn blup_matches_dense_matrix_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let inst = Instance::random(&mut rng, 6, 5);
        let sigma2 = rng.random_range(0.0..5.0);
        let closed = blup(&inst.data(), &VarianceComponents { sigma2_nu: sigma2 });
        for (a, b) in closed.iter().zip(inst.dense_blup(sigma2)) {
            assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()), "closed {a} dense {b}");
        }
    }
}

#[test]
fn profiled_likelihood_matches_dense_density() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let inst = Instance::random(&mut rng, 5, 4);
        for k in 0..50 {
            let sigma2 = 10f64.powf(-4.0 + 6.0 * k as f64 / 49.0);
            let fast = log_likelihood(&inst.data(), sigma2);
            let dense = inst.dense_loglik(sigma2);
            assert!((fast - dense).abs() <= 1e-8 * (1.0 + dense.abs()), "σ² {sigma2}: {fast} vs {dense}");
        }
    }
}

#[test]
fn symmetric_two_area_optimum_matches_dense_grid() {
    let a = 1.5;
    let inst = Instance {
        y_l: vec![a, a, -a, -a],
        offset: vec![0.0; 4],
        w: vec![0.25; 4],
        area: vec![0, 0, 1, 1],
        d: 2,
    };
    let est = estimate_sigma2(&inst.data()).unwrap().sigma2_nu;
    assert!(est > 0.0);
    let grid_best = (0..=200_000)
        .map(|k| k as f64 * 1e-4)
        .max_by(|x, y| inst.dense_loglik(*x).total_cmp(&inst.dense_loglik(*y)))
        .unwrap();
    assert!((est - grid_best).abs() < 2e-4, "optimizer {est}, grid {grid_best}");
    assert!(inst.dense_loglik(est) >= inst.dense_loglik(grid_best) - 1e-9);
}

#[test]
fn single_area_two_unit_blup() {
    let inst = Instance { y_l: vec![2.0, 2.0], offset: vec![0.0; 2], w: vec![0.25; 2], area: vec![0, 0], d: 1 };
    let nu = blup(&inst.data(), &VarianceComponents { sigma2_nu: 1.0 });
    assert!((nu[0] - 2.0 / 3.0).abs() < 1e-15);
    assert!((inst.dense_blup(1.0)[0] - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn gll_term_by_term() {
    let inst = Instance { y_l: vec![0.3; 4], offset: vec![0.3; 4], w: vec![0.25; 4], area: vec![0; 4], d: 1 };
    let v = gll(&inst.data(), &[0.0], &VarianceComponents { sigma2_nu: 1.0 });
    assert!((v - 4.0 * 4f64.ln()).abs() < 1e-12);
    assert!((v - 5.5452).abs() < 1e-4);
}

fn instance_strategy() -> impl Strategy<Value = (u64, f64)> {
    (any::<u64>(), 0.0f64..20.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shrinkage_is_bounded_monotone_and_sign_preserving((seed, s2) in instance_strategy(), bump in 0.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = Instance::random(&mut rng, 6, 5);
        let data = inst.data();
        let lo = blup(&data, &VarianceComponents { sigma2_nu: s2 });
        let hi = blup(&data, &VarianceComponents { sigma2_nu: s2 + bump });
        for a in 0..inst.d {
            let (mut s, mut t) = (0.0, 0.0);
            for j in (0..inst.area.len()).filter(|&j| inst.area[j] == a) {
                s += inst.w[j] * (inst.y_l[j] - inst.offset[j]);
                t += inst.w[j];
            }
            prop_assert!(lo[a].abs() <= s.abs() / t + 1e-12);
            prop_assert!(hi[a].abs() + 1e-12 >= lo[a].abs());
            prop_assert!(lo[a] == 0.0 || lo[a].signum() == s.signum());
        }
    }

    #[test]
    fn blup_minimizes_gll_for_fixed_variance((seed, s2) in instance_strategy(), step in 1e-3f64..0.5) {
        let s2 = s2.max(1e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = Instance::random(&mut rng, 6, 5);
        let data = inst.data();
        let vc = VarianceComponents { sigma2_nu: s2 };
        let nu = blup(&data, &vc);
        let base = gll(&data, &nu, &vc);
        for a in 0..inst.d {
            for dir in [-1.0, 1.0] {
                let mut moved = nu.clone();
                moved[a] += dir * step;
                prop_assert!(gll(&data, &moved, &vc) > base);
            }
        }
    }

    #[test]
    fn gll_ignores_common_shift(seed in any::<u64>(), c in -10.0f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = Instance::random(&mut rng, 6, 5);
        let vc = VarianceComponents { sigma2_nu: 0.7 };
        let nu: Vec<f64> = (0..inst.d).map(|a| a as f64 * 0.1).collect();
        let base = gll(&inst.data(), &nu, &vc);
        let y2: Vec<f64> = inst.y_l.iter().map(|v| v + c).collect();
        let o2: Vec<f64> = inst.offset.iter().map(|v| v + c).collect();
        let shifted = GroupedData::new(&y2, &o2, &inst.w, &inst.area, inst.d).unwrap();
        prop_assert!((gll(&shifted, &nu, &vc) - base).abs() <= 1e-9 * (1.0 + base.abs()));
    }

    #[test]
    fn variance_estimate_ignores_labels_and_row_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = Instance::random(&mut rng, 6, 5);
        let base = estimate_sigma2(&inst.data()).unwrap().sigma2_nu;
        let n = inst.y_l.len();
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let relabel = |a: usize| inst.d - 1 - a;
        let pick = |v: &[f64]| order.iter().map(|&j| v[j]).collect::<Vec<_>>();
        let (y, o, w) = (pick(&inst.y_l), pick(&inst.offset), pick(&inst.w));
        let area: Vec<usize> = order.iter().map(|&j| relabel(inst.area[j])).collect();
        let permuted = GroupedData::new(&y, &o, &w, &area, inst.d).unwrap();
        let other = estimate_sigma2(&permuted).unwrap().sigma2_nu;
        prop_assert!((base - other).abs() <= 1e-6 * (1.0 + base), "{} vs {}", base, other);
    }
}
