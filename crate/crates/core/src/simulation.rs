//! Model-based Monte Carlo studies of area proportion estimators.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use log::warn;
use ndarray::Array2;
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::area::AreaId;
use crate::baseline::{cep_area_proportions_raw, fit_glmm_pql};
use crate::bootstrap::{mse_parametric, BootstrapConfig, SampleDesign};
use crate::error::{Error, Result};
use crate::gmerf::{fit, GmerfConfig, PqlControl};
use crate::link::expit;
use crate::predict::{area_proportions_raw, CensusFrame};
use crate::seed;

const DEFAULT_ALLOCATION: &str = include_str!("../data/allocation_default.json");

/// Variance partition coefficient `σ²/(σ² + π²/3)` on the latent logistic scale.
pub fn vpc(sigma2_nu: f64) -> f64 {
    sigma2_nu / (sigma2_nu + PI * PI / 3.0)
}

/// Shipped per-area sample sizes for 50 areas (total 687).
pub fn default_allocation() -> Vec<usize> {
    serde_json::from_str(DEFAULT_ALLOCATION).expect("bundled allocation is valid JSON")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Term {
    #[serde(rename = "1")]
    Intercept,
    #[serde(rename = "x1")]
    X1,
    #[serde(rename = "x2")]
    X2,
    #[serde(rename = "x1:x2", alias = "x2:x1")]
    X1X2,
    #[serde(rename = "x1^2", alias = "x1²")]
    X1Sq,
    #[serde(rename = "x2^2", alias = "x2²")]
    X2Sq,
}

impl Term {
    pub fn eval(self, x1: f64, x2: f64) -> f64 {
        match self {
            Term::Intercept => 1.0,
            Term::X1 => x1,
            Term::X2 => x2,
            Term::X1X2 => x1 * x2,
            Term::X1Sq => x1 * x1,
            Term::X2Sq => x2 * x2,
        }
    }
}

/// Linear predictor as coefficients over polynomial terms in `(x1, x2)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Predictor(pub BTreeMap<Term, f64>);

impl Predictor {
    pub fn new(terms: &[(Term, f64)]) -> Self {
        Predictor(terms.iter().copied().collect())
    }

    pub fn eval(&self, x1: f64, x2: f64) -> f64 {
        self.0.iter().map(|(t, c)| c * t.eval(x1, x2)).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalLaw {
    pub mean: f64,
    pub sd: f64,
}

impl NormalLaw {
    fn law(&self) -> Result<Normal<f64>> {
        Normal::new(self.mean, self.sd).map_err(|e| Error::InvalidInput(format!("covariate law: {e}")))
    }
}

/// Data-generating recipe of a simulation study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub predictor: Predictor,
    pub x1_law: NormalLaw,
    pub x2_law: NormalLaw,
    pub sigma2_nu: f64,
    #[serde(alias = "D")]
    pub n_areas: usize,
    #[serde(alias = "N_i")]
    pub area_size: usize,
    pub allocation: Vec<usize>,
}

impl Scenario {
    fn builtin(name: &str, predictor: Predictor, sigma2_nu: f64) -> Self {
        Scenario {
            name: name.to_owned(),
            predictor,
            x1_law: NormalLaw { mean: 0.0, sd: 2.0 },
            x2_law: NormalLaw { mean: 0.0, sd: 3.0 },
            sigma2_nu,
            n_areas: 50,
            area_size: 1000,
            allocation: default_allocation(),
        }
    }

    fn linear(b1: f64, b2: f64) -> Predictor {
        Predictor::new(&[(Term::Intercept, 0.5), (Term::X1, b1), (Term::X2, b2)])
    }

    fn interaction() -> Predictor {
        Predictor::new(&[(Term::Intercept, 1.0), (Term::X1X2, -1.0), (Term::X1Sq, -0.6)])
    }

    pub fn normal_small() -> Self {
        Self::builtin("normal-small", Self::linear(-0.8, -0.6), 0.1)
    }

    pub fn interaction_small() -> Self {
        Self::builtin("interaction-small", Self::interaction(), 0.1)
    }

    pub fn normal_large() -> Self {
        Self::builtin("normal-large", Self::linear(-0.1, -0.2), 1.0)
    }

    pub fn interaction_large() -> Self {
        Self::builtin("interaction-large", Self::interaction(), 1.0)
    }

    /// Builtin scenario by name.
    pub fn by_name(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().replace('_', "-").as_str() {
            "normal-small" => Some(Self::normal_small()),
            "interaction-small" => Some(Self::interaction_small()),
            "normal-large" => Some(Self::normal_large()),
            "interaction-large" => Some(Self::interaction_large()),
            _ => None,
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let s: Scenario = serde_json::from_str(&text)
            .map_err(|e| Error::Parse { path: path.display().to_string(), message: e.to_string() })?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_areas == 0 || self.area_size == 0 {
            return Err(Error::InvalidInput("scenario needs at least one area and unit".into()));
        }
        if self.allocation.len() != self.n_areas {
            return Err(Error::InvalidInput(format!(
                "allocation has {} entries for {} areas",
                self.allocation.len(),
                self.n_areas
            )));
        }
        if let Some(n) = self.allocation.iter().find(|&&n| n == 0 || n > self.area_size) {
            return Err(Error::InvalidInput(format!("allocation entry {n} outside [1, {}]", self.area_size)));
        }
        if !(self.sigma2_nu.is_finite() && self.sigma2_nu >= 0.0) {
            return Err(Error::InvalidInput("sigma2_nu must be finite and nonnegative".into()));
        }
        if self.predictor.0.values().any(|c| !c.is_finite()) {
            return Err(Error::InvalidInput("non-finite predictor coefficient".into()));
        }
        self.x1_law.law()?;
        self.x2_law.law()?;
        Ok(())
    }

    pub fn sample_size(&self) -> usize {
        self.allocation.iter().sum()
    }

    pub fn area_ids(&self) -> Vec<AreaId> {
        (1..=self.n_areas).map(AreaId::numbered).collect()
    }
}

/// Synthetic population with its latent quantities.
#[derive(Clone, Debug)]
pub struct Population {
    pub area_ids: Vec<AreaId>,
    /// Dense area index of every unit; units are stored area by area.
    pub area: Vec<usize>,
    pub x: Array2<f64>,
    pub nu: Vec<f64>,
    pub eta: Vec<f64>,
    pub mu: Vec<f64>,
    pub y: Vec<u8>,
    /// Realized share of `y = 1` per area.
    pub truth: Vec<f64>,
}

impl Population {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn census(&self) -> Result<CensusFrame> {
        let labels: Vec<AreaId> = self.area.iter().map(|&a| self.area_ids[a].clone()).collect();
        CensusFrame::new(&labels, self.x.clone())
    }

    /// Row indices of every area.
    pub fn rows_by_area(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.area_ids.len()];
        for (j, &a) in self.area.iter().enumerate() {
            out[a].push(j);
        }
        out
    }
}

pub fn generate_population(s: &Scenario, seed: u64) -> Result<Population> {
    s.validate()?;
    let mut rng = seed::rng(seed);
    let nu_law = Normal::new(0.0, s.sigma2_nu.sqrt()).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let (l1, l2) = (s.x1_law.law()?, s.x2_law.law()?);
    let n = s.n_areas * s.area_size;
    let mut x = Array2::zeros((n, 2));
    let mut area = Vec::with_capacity(n);
    let mut nu = Vec::with_capacity(s.n_areas);
    let mut eta = Vec::with_capacity(n);
    let mut mu = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(s.n_areas);
    for i in 0..s.n_areas {
        let v = nu_law.sample(&mut rng);
        nu.push(v);
        let mut ones = 0usize;
        for _ in 0..s.area_size {
            let j = area.len();
            let (x1, x2) = (l1.sample(&mut rng), l2.sample(&mut rng));
            x[[j, 0]] = x1;
            x[[j, 1]] = x2;
            let e = s.predictor.eval(x1, x2) + v;
            let m = expit(e);
            let draw = u8::from(rng.random::<f64>() < m);
            ones += usize::from(draw);
            area.push(i);
            eta.push(e);
            mu.push(m);
            y.push(draw);
        }
        truth.push(ones as f64 / s.area_size as f64);
    }
    if eta.iter().any(|e| !e.is_finite()) {
        return Err(Error::InvalidInput("predictor produced a non-finite value".into()));
    }
    Ok(Population { area_ids: s.area_ids(), area, x, nu, eta, mu, y, truth })
}

/// Stratified survey drawn from a population.
#[derive(Clone, Debug)]
pub struct Sample {
    /// Population rows, ascending.
    pub rows: Vec<usize>,
    pub y: Vec<u8>,
    pub x: Array2<f64>,
    pub area: Vec<AreaId>,
}

/// Simple random sampling without replacement of `allocation[i]` units in area `i`.
pub fn draw_sample(pop: &Population, allocation: &[usize], seed: u64) -> Result<Sample> {
    let by_area = pop.rows_by_area();
    if allocation.len() != by_area.len() {
        return Err(Error::InvalidInput("allocation does not match the number of areas".into()));
    }
    let mut rng = seed::rng(seed);
    let mut rows = Vec::with_capacity(allocation.iter().sum());
    for (members, &n) in by_area.iter().zip(allocation) {
        if n > members.len() {
            return Err(Error::InvalidInput(format!("sample size {n} exceeds area size {}", members.len())));
        }
        rows.extend(sample_indices(&mut rng, members.len(), n).into_iter().map(|k| members[k]));
    }
    rows.sort_unstable();
    let x = Array2::from_shape_fn((rows.len(), pop.x.ncols()), |(i, j)| pop.x[[rows[i], j]]);
    let y = rows.iter().map(|&j| pop.y[j]).collect();
    let area = rows.iter().map(|&j| pop.area_ids[pop.area[j]].clone()).collect();
    Ok(Sample { rows, y, x, area })
}

/// Inputs available to a method in one Monte Carlo replicate.
pub struct StudyReplicate<'a> {
    pub index: usize,
    pub population: &'a Population,
    pub census: &'a CensusFrame,
    pub sample: &'a Sample,
    /// Seed reserved for this method in this replicate.
    pub seed: u64,
}

/// Area estimates of one method in one replicate, aligned with the population areas.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodOutput {
    pub estimates: Vec<f64>,
    pub mse: Option<Vec<f64>>,
}

pub trait StudyMethod: Sync {
    fn name(&self) -> &str;
    fn run(&self, rep: &StudyReplicate<'_>) -> Result<MethodOutput>;
}

pub struct GmerfMethod {
    pub config: GmerfConfig,
    pub bootstrap: Option<BootstrapConfig>,
}

impl StudyMethod for GmerfMethod {
    fn name(&self) -> &str {
        "GMERF"
    }

    fn run(&self, rep: &StudyReplicate<'_>) -> Result<MethodOutput> {
        let mut cfg = self.config.clone();
        cfg.forest.seed = seed::derive(rep.seed, 0);
        let model = fit(&rep.sample.y, rep.sample.x.view(), &rep.sample.area, &cfg)?;
        let estimates = area_proportions_raw(&model, rep.census)?;
        let mse = match &self.bootstrap {
            Some(b) => {
                let bcfg = BootstrapConfig { seed: seed::derive(rep.seed, 1), ..b.clone() };
                Some(mse_parametric(&model, rep.census, &SampleDesign::from_model(&model), &bcfg)?.mse)
            }
            None => None,
        };
        Ok(MethodOutput { estimates, mse })
    }
}

pub struct CepMethod {
    pub control: PqlControl,
}

impl StudyMethod for CepMethod {
    fn name(&self) -> &str {
        "CEP"
    }

    fn run(&self, rep: &StudyReplicate<'_>) -> Result<MethodOutput> {
        let model = fit_glmm_pql(&rep.sample.y, rep.sample.x.view(), &rep.sample.area, &self.control)?;
        Ok(MethodOutput { estimates: cep_area_proportions_raw(&model, rep.census)?, mse: None })
    }
}

/// Area sample means; areas without sample get NaN and fail the replicate.
pub struct DirectMethod;

impl StudyMethod for DirectMethod {
    fn name(&self) -> &str {
        "Direct"
    }

    fn run(&self, rep: &StudyReplicate<'_>) -> Result<MethodOutput> {
        let d = rep.population.area_ids.len();
        let mut sums = vec![0.0; d];
        let mut counts = vec![0usize; d];
        for (&j, &y) in rep.sample.rows.iter().zip(&rep.sample.y) {
            let a = rep.population.area[j];
            sums[a] += f64::from(y);
            counts[a] += 1;
        }
        if counts.contains(&0) {
            return Err(Error::InsufficientData("direct estimator needs a sample in every area".into()));
        }
        Ok(MethodOutput {
            estimates: sums.iter().zip(&counts).map(|(s, &n)| s / n as f64).collect(),
            mse: None,
        })
    }
}

/// Per-area Monte Carlo metrics, as fractions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AreaMetrics {
    pub area: AreaId,
    pub rb: f64,
    pub rrmse: f64,
    pub rb_rmse: Option<f64>,
    pub rrmse_rmse: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let k = v.len();
        let median = if k % 2 == 1 { v[k / 2] } else { 0.5 * (v[k / 2 - 1] + v[k / 2]) };
        Some(Summary { mean: v.iter().sum::<f64>() / k as f64, median })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub method: String,
    pub replicates: usize,
    pub failures: usize,
    pub areas: Vec<AreaMetrics>,
}

impl MethodMetrics {
    fn collect(&self, f: impl Fn(&AreaMetrics) -> Option<f64>) -> Vec<f64> {
        self.areas.iter().filter_map(f).collect()
    }

    pub fn rb(&self) -> Summary {
        Summary::of(&self.collect(|a| Some(a.rb))).expect("at least one area")
    }

    pub fn rrmse(&self) -> Summary {
        Summary::of(&self.collect(|a| Some(a.rrmse))).expect("at least one area")
    }

    pub fn rb_rmse(&self) -> Option<Summary> {
        Summary::of(&self.collect(|a| a.rb_rmse))
    }

    pub fn rrmse_rmse(&self) -> Option<Summary> {
        Summary::of(&self.collect(|a| a.rrmse_rmse))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub scenario: String,
    pub replicates: usize,
    pub seed: u64,
    pub methods: Vec<MethodMetrics>,
}

impl MetricsTable {
    pub fn method(&self, name: &str) -> Option<&MethodMetrics> {
        self.methods.iter().find(|m| m.method == name)
    }
}

/// Per-area metrics from replicate-by-area matrices of estimates, truths and optional MSE estimates.
pub fn area_metrics(
    areas: &[AreaId],
    estimates: &[Vec<f64>],
    truths: &[Vec<f64>],
    mse: Option<&[Vec<f64>]>,
) -> Vec<AreaMetrics> {
    let m = estimates.len() as f64;
    areas
        .iter()
        .enumerate()
        .map(|(i, area)| {
            let rb = estimates.iter().zip(truths).map(|(e, t)| (e[i] - t[i]) / t[i]).sum::<f64>() / m;
            let mean_sq = estimates.iter().zip(truths).map(|(e, t)| (e[i] - t[i]).powi(2)).sum::<f64>() / m;
            let rmse_emp = mean_sq.sqrt();
            let mean_truth = truths.iter().map(|t| t[i]).sum::<f64>() / m;
            let (rb_rmse, rrmse_rmse) = match mse {
                Some(mse) => {
                    let mean_mse = mse.iter().map(|v| v[i]).sum::<f64>() / m;
                    let dev = mse.iter().map(|v| (v[i].sqrt() - rmse_emp).powi(2)).sum::<f64>() / m;
                    (Some((mean_mse.sqrt() - rmse_emp) / rmse_emp), Some(dev.sqrt() / rmse_emp))
                }
                None => (None, None),
            };
            AreaMetrics { area: area.clone(), rb, rrmse: rmse_emp / mean_truth, rb_rmse, rrmse_rmse }
        })
        .collect()
}

/// Largest tolerated share of failed replicates per method.
pub const MAX_FAILURE_SHARE: f64 = 0.05;

type ReplicateOutcome = (Vec<f64>, Vec<Result<MethodOutput>>);

/// Monte Carlo study over `m` replicates with the given methods.
///
/// Every replicate regenerates the population and redraws the sample from
/// seeds derived from `seed` and the replicate index.
pub fn run_study(
    s: &Scenario,
    m: usize,
    methods: &[&dyn StudyMethod],
    seed: u64,
) -> Result<MetricsTable> {
    s.validate()?;
    if m == 0 {
        return Err(Error::InvalidInput("at least one replicate is required".into()));
    }
    let outcomes: Vec<Result<ReplicateOutcome>> = (0..m)
        .into_par_iter()
        .map(|r| {
            let rep_seed = seed::derive(seed, r as u64);
            let pop = generate_population(s, seed::derive(rep_seed, 0))?;
            let sample = draw_sample(&pop, &s.allocation, seed::derive(rep_seed, 1))?;
            let census = pop.census()?;
            let outputs = methods
                .iter()
                .enumerate()
                .map(|(k, method)| {
                    let rep = StudyReplicate {
                        index: r,
                        population: &pop,
                        census: &census,
                        sample: &sample,
                        seed: seed::derive(rep_seed, 2 + k as u64),
                    };
                    let out = method.run(&rep)?;
                    if out.estimates.len() != pop.area_ids.len() {
                        return Err(Error::InvalidInput(format!("{} returned wrong area count", method.name())));
                    }
                    Ok(out)
                })
                .collect();
            Ok((pop.truth, outputs))
        })
        .collect();
    let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;

    let areas = s.area_ids();
    let mut table = MetricsTable { scenario: s.name.clone(), replicates: m, seed, methods: Vec::new() };
    for (k, method) in methods.iter().enumerate() {
        let mut est = Vec::new();
        let mut truth = Vec::new();
        let mut mse = Vec::new();
        let mut failures = 0;
        for (r, (t, outputs)) in outcomes.iter().enumerate() {
            match &outputs[k] {
                Ok(out) => {
                    est.push(out.estimates.clone());
                    truth.push(t.clone());
                    if let Some(v) = &out.mse {
                        mse.push(v.clone());
                    }
                }
                Err(e) => {
                    warn!("{} failed in replicate {r}: {e}", method.name());
                    failures += 1;
                }
            }
        }
        if failures as f64 > MAX_FAILURE_SHARE * m as f64 || est.is_empty() {
            return Err(Error::MethodFailed { method: method.name().to_owned(), failed: failures, replicates: m });
        }
        let mse = (mse.len() == est.len()).then_some(mse.as_slice());
        table.methods.push(MethodMetrics {
            method: method.name().to_owned(),
            replicates: est.len(),
            failures,
            areas: area_metrics(&areas, &est, &truth, mse),
        });
    }
    Ok(table)
}
