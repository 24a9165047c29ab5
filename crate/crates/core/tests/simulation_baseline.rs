use gmerf::area::AreaId;
use gmerf::baseline::{cep_area_proportions, fit_glmm_pql, GlmmModel};
use gmerf::gmerf::{FitTrace, PqlControl};
use gmerf::link::expit;
use gmerf::predict::CensusFrame;
use gmerf::simulation::{
    area_metrics, draw_sample, generate_population, run_study, vpc, MethodOutput, Predictor, Scenario, StudyMethod,
    StudyReplicate, Term,
};
use ndarray::{Array2, Axis};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_scenario(name: &str, predictor: Predictor, sigma2: f64) -> Scenario {
    let mut s = Scenario::normal_small();
    s.name = name.into();
    s.predictor = predictor;
    s.sigma2_nu = sigma2;
    s.n_areas = 10;
    s.area_size = 200;
    s.allocation = vec![5; 10];
    s
}

#[test]
fn null_scenario_has_half_probabilities() {
    let s = small_scenario("null", Predictor::new(&[]), 0.0);
    let pop = generate_population(&s, 1).unwrap();
    assert!(pop.mu.iter().all(|&m| m == 0.5));
    let n = pop.n() as f64;
    let share = pop.y.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    assert!((share - 0.5).abs() < 3.0 * (0.25 / n).sqrt());
}

#[test]
fn normal_small_random_effects_give_small_vpc() {
    let s = Scenario::normal_small();
    let mut nu = Vec::new();
    for seed in 0..20 {
        nu.extend(generate_population(&s, seed).unwrap().nu);
    }
    let mean = nu.iter().sum::<f64>() / nu.len() as f64;
    let var = nu.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nu.len() - 1) as f64;
    assert_eq!((vpc(var) * 100.0).round() / 100.0, 0.03, "empirical variance {var}");
}

#[test]
fn population_latents_are_consistent() {
    let s = Scenario::interaction_small();
    let pop = generate_population(&s, 2).unwrap();
    assert_eq!(pop.n(), 50_000);
    for j in (0..pop.n()).step_by(997) {
        let (x1, x2) = (pop.x[[j, 0]], pop.x[[j, 1]]);
        let eta = s.predictor.eval(x1, x2) + pop.nu[pop.area[j]];
        assert!((pop.eta[j] - eta).abs() < 1e-12);
        assert_eq!(pop.mu[j], expit(pop.eta[j]));
    }
    for (i, rows) in pop.rows_by_area().iter().enumerate() {
        let share = rows.iter().map(|&j| f64::from(pop.y[j])).sum::<f64>() / rows.len() as f64;
        assert_eq!(share, pop.truth[i]);
    }
}

#[test]
fn sampling_design_properties() {
    let s = small_scenario("tiny", Predictor::new(&[(Term::X1, 1.0)]), 0.2);
    let pop = generate_population(&s, 3).unwrap();
    let full = draw_sample(&pop, &[200; 10], 4).unwrap();
    assert_eq!(full.rows, (0..pop.n()).collect::<Vec<_>>());
    let a = draw_sample(&pop, &s.allocation, 5).unwrap();
    let b = draw_sample(&pop, &s.allocation, 5).unwrap();
    let c = draw_sample(&pop, &s.allocation, 6).unwrap();
    assert_eq!(a.rows, b.rows);
    assert_ne!(a.rows, c.rows);
    for (i, id) in pop.area_ids.iter().enumerate() {
        assert_eq!(a.area.iter().filter(|&x| x == id).count(), s.allocation[i]);
    }
}

struct Stub {
    shift: f64,
    exact_mse: Option<Vec<f64>>,
}

impl StudyMethod for Stub {
    fn name(&self) -> &str {
        "stub"
    }

    fn run(&self, rep: &StudyReplicate<'_>) -> gmerf::Result<MethodOutput> {
        Ok(MethodOutput {
            estimates: rep.population.truth.iter().map(|t| t + self.shift).collect(),
            mse: self.exact_mse.clone(),
        })
    }
}

#[test]
fn study_with_truth_stub_has_zero_error() {
    let s = small_scenario("stub", Predictor::new(&[(Term::Intercept, 0.2)]), 0.3);
    let table = run_study(&s, 3, &[&Stub { shift: 0.0, exact_mse: None }], 8).unwrap();
    let m = table.method("stub").unwrap();
    assert!(m.areas.iter().all(|a| a.rb == 0.0 && a.rrmse == 0.0));
    assert!(m.rb_rmse().is_none());
}

#[test]
fn exact_mse_stub_has_zero_rmse_bias() {
    let s = small_scenario("stub", Predictor::new(&[]), 0.0);
    let shift = 0.01;
    let stub = Stub { shift, exact_mse: Some(vec![shift * shift; 10]) };
    let table = run_study(&s, 4, &[&stub], 9).unwrap();
    for a in &table.method("stub").unwrap().areas {
        assert!(a.rb_rmse.unwrap().abs() < 1e-12);
        assert!(a.rrmse_rmse.unwrap().abs() < 1e-12);
    }
}

#[test]
fn single_replicate_metrics_by_hand() {
    let areas = vec![AreaId::from("a"), AreaId::from("b")];
    let m = area_metrics(&areas, &[vec![0.3, 0.5]], &[vec![0.2, 0.4]], Some(&[vec![0.04, 0.0025]]));
    assert!((m[0].rb - 0.5).abs() < 1e-12);
    assert!((m[0].rrmse - 0.5).abs() < 1e-12);
    assert!((m[1].rb - 0.25).abs() < 1e-12);
    assert!((m[0].rb_rmse.unwrap() - 1.0).abs() < 1e-12);
    assert!((m[1].rb_rmse.unwrap() + 0.5).abs() < 1e-12);
}

proptest! {
    #[test]
    fn rrmse_bounds_relative_bias_for_fixed_truth(
        truth in 0.05f64..0.95,
        est in prop::collection::vec(0.0f64..1.0, 1..40),
    ) {
        let areas = vec![AreaId::from("a")];
        let e: Vec<Vec<f64>> = est.iter().map(|&v| vec![v]).collect();
        let t = vec![vec![truth]; est.len()];
        let m = area_metrics(&areas, &e, &t, None);
        prop_assert!(m[0].rrmse + 1e-12 >= m[0].rb.abs());
    }
}

fn logistic_sample(n: usize, d: usize, beta: &[f64], seed: u64) -> (Vec<u8>, Array2<f64>, Vec<AreaId>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = beta.len() - 1;
    let x = Array2::from_shape_fn((n, p), |_| rng.random_range(-2.0..2.0));
    let y = (0..n)
        .map(|i| {
            let eta = beta[0] + (0..p).map(|k| beta[k + 1] * x[[i, k]]).sum::<f64>();
            u8::from(rng.random::<f64>() < expit(eta))
        })
        .collect();
    let area = (0..n).map(|i| AreaId::numbered(i % d)).collect();
    (y, x, area)
}

#[test]
fn glmm_intercept_is_consistent() {
    let (y, x, area) = logistic_sample(5000, 25, &[0.0, 0.0], 31);
    let m = fit_glmm_pql(&y, x.view(), &area, &PqlControl::default()).unwrap();
    assert!(m.beta[0].abs() < 0.15, "β̂₀ = {}", m.beta[0]);
}

#[test]
fn balanced_orthogonal_design_gives_flat_slopes() {
    let n = 4000;
    let x = Array2::from_shape_fn((n, 2), |(i, k)| if (i >> k) & 1 == 0 { -1.0 } else { 1.0 });
    let y: Vec<u8> = (0..n).map(|i| u8::from((i / 4) % 2 == 0)).collect();
    let area: Vec<AreaId> = (0..n).map(|i| AreaId::numbered(i % 20)).collect();
    let m = fit_glmm_pql(&y, x.view(), &area, &PqlControl::default()).unwrap();
    assert!(m.beta[1].abs() < 0.05 && m.beta[2].abs() < 0.05, "β̂ = {:?}", m.beta);
}

#[test]
fn normal_small_signs_recovered() {
    let s = Scenario::normal_small();
    let pop = generate_population(&s, 11).unwrap();
    let sample = draw_sample(&pop, &s.allocation, 12).unwrap();
    let m = fit_glmm_pql(&sample.y, sample.x.view(), &sample.area, &PqlControl::default()).unwrap();
    assert!(m.beta[1] < 0.0 && m.beta[2] < 0.0, "β̂ = {:?}", m.beta);
}

#[test]
fn cep_single_unit_areas_use_their_linear_predictor() {
    let area: Vec<AreaId> = vec!["a".into(), "b".into()];
    let census = CensusFrame::new(&area, Array2::from_shape_vec((2, 1), vec![0.4, -1.3]).unwrap()).unwrap();
    let model = GlmmModel {
        beta: vec![0.2, 1.5],
        nu_hat: [(AreaId::from("a"), 0.1)].into_iter().collect(),
        sigma2_nu: 0.5,
        sample_sizes: [(AreaId::from("a"), 4)].into_iter().collect(),
        trace: FitTrace::default(),
    };
    let est = cep_area_proportions(&model, &census).unwrap();
    assert_eq!(est[0].mu_hat, expit(0.2 + 1.5 * 0.4 + 0.1));
    assert_eq!(est[1].mu_hat, expit(0.2 + 1.5 * -1.3));
    assert!(!est[1].in_sample);
}

#[test]
fn cep_is_equivariant_under_affine_recoding() {
    for seed in 0..3 {
        let (y, x, area) = logistic_sample(300, 6, &[0.3, -0.8, 0.5], 40 + seed);
        let census_area: Vec<AreaId> = (0..600).map(|i| AreaId::numbered(i % 7)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let census_x = Array2::from_shape_fn((600, 2), |_| rng.random_range(-2.0..2.0));
        let recode = |m: &Array2<f64>| {
            let mut r = m.clone();
            r.index_axis_mut(Axis(1), 0).mapv_inplace(|v| 3.0 * v - 7.0);
            r.index_axis_mut(Axis(1), 1).mapv_inplace(|v| -0.5 * v + 2.0);
            r
        };
        let control = PqlControl::default();
        let base = fit_glmm_pql(&y, x.view(), &area, &control).unwrap();
        let moved = fit_glmm_pql(&y, recode(&x).view(), &area, &control).unwrap();
        let a = cep_area_proportions(&base, &CensusFrame::new(&census_area, census_x.clone()).unwrap()).unwrap();
        let b = cep_area_proportions(&moved, &CensusFrame::new(&census_area, recode(&census_x)).unwrap()).unwrap();
        for (ea, eb) in a.iter().zip(&b) {
            assert!((ea.mu_hat - eb.mu_hat).abs() < 1e-6, "{} vs {}", ea.mu_hat, eb.mu_hat);
        }
    }
}
