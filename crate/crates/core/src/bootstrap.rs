//! Parametric bootstrap MSE of GMERF area proportions.
//!
//! Every replicate draws area effects `ν_i ~ N(0, σ̂²)` for all census areas,
//! a Bernoulli census population from `expit(f̂(x) + ν_i)`, and a stratified
//! SRS with the original per-area sample sizes. The model is refitted on the
//! sample and its area proportions are compared with the population shares.

use std::collections::BTreeMap;

use log::warn;
use ndarray::Array2;
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::area::AreaId;
use crate::error::{Error, Result};
use crate::forest::ForestConfig;
use crate::gmerf::{fit, GmerfModel};
use crate::link::expit;
use crate::predict::{area_proportions_raw, AreaEstimate, CensusFrame};
use crate::seed;

/// Minimum share of replicates that must succeed.
pub const MIN_SUCCESS_SHARE: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    #[serde(alias = "B")]
    pub replicates: usize,
    pub seed: u64,
    /// Forest settings for the refits; the original model's settings when absent.
    pub refit_forest: Option<ForestConfig>,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig { replicates: 200, seed: 0, refit_forest: None }
    }
}

impl BootstrapConfig {
    /// Seeds of all replicates, in replicate order.
    pub fn replicate_seeds(&self) -> Vec<u64> {
        (0..self.replicates as u64).map(|b| seed::derive(self.seed, b)).collect()
    }
}

/// Per-area survey sample sizes to reproduce in every replicate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleDesign {
    pub sizes: BTreeMap<AreaId, usize>,
}

impl SampleDesign {
    pub fn from_sizes(sizes: BTreeMap<AreaId, usize>) -> Self {
        SampleDesign { sizes }
    }

    /// Design of the sample a model was fitted on.
    pub fn from_model(model: &GmerfModel) -> Self {
        SampleDesign { sizes: model.sample_sizes.clone() }
    }

    /// Design from the census rows that form the original sample of each area.
    pub fn from_indices(census: &CensusFrame, rows: &BTreeMap<AreaId, Vec<usize>>) -> Result<Self> {
        let mut sizes = BTreeMap::new();
        let mut used = vec![false; census.n()];
        for (area, idx) in rows {
            let Some(a) = census.area_ids().iter().position(|c| c == area) else {
                return Err(Error::InvalidInput(format!("sampled area {area} is not in the census")));
            };
            for &j in idx {
                if j >= census.n() || census.rows()[j] != a {
                    return Err(Error::InvalidInput(format!("row {j} does not belong to area {area}")));
                }
                if std::mem::replace(&mut used[j], true) {
                    return Err(Error::InvalidInput(format!("row {j} sampled twice")));
                }
            }
            if !idx.is_empty() {
                sizes.insert(area.clone(), idx.len());
            }
        }
        Ok(SampleDesign { sizes })
    }

    /// `n_i` per census area (zero when unsampled), aligned with the census area order.
    fn per_census_area(&self, census: &CensusFrame) -> Result<Vec<usize>> {
        let index: BTreeMap<&AreaId, usize> =
            census.area_ids().iter().enumerate().map(|(i, a)| (a, i)).collect();
        let sizes = census.sizes();
        let mut out = vec![0; sizes.len()];
        for (area, &n) in &self.sizes {
            let &i = index
                .get(area)
                .ok_or_else(|| Error::InvalidInput(format!("sampled area {area} is not in the census")))?;
            if n > sizes[i] {
                return Err(Error::InvalidInput(format!(
                    "area {area}: sample size {n} exceeds population size {}",
                    sizes[i]
                )));
            }
            out[i] = n;
        }
        Ok(out)
    }
}

/// One bootstrap population and its stratified sample.
pub struct BootstrapSample<'a> {
    pub census: &'a CensusFrame,
    /// Area effects, aligned with the census area order.
    pub nu: &'a [f64],
    pub population_y: &'a [u8],
    /// Population share of `y = 1` per census area.
    pub truth: &'a [f64],
    /// Sampled census rows, ascending.
    pub rows: &'a [usize],
    pub y: Vec<u8>,
    pub x: Array2<f64>,
    pub area: Vec<AreaId>,
    /// Seed reserved for the estimator of this replicate.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFailure {
    pub replicate: usize,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    /// Census area order.
    pub areas: Vec<AreaId>,
    pub mse: Vec<f64>,
    /// Indices of the successful replicates.
    pub replicates: Vec<usize>,
    /// Per successful replicate: estimate per area.
    pub estimates: Vec<Vec<f64>>,
    /// Per successful replicate: population share per area.
    pub truths: Vec<Vec<f64>>,
    /// Per successful replicate: area effects.
    pub nu: Vec<Vec<f64>>,
    pub failures: Vec<ReplicateFailure>,
}

impl BootstrapResult {
    pub fn mse_map(&self) -> BTreeMap<AreaId, f64> {
        self.areas.iter().cloned().zip(self.mse.iter().copied()).collect()
    }

    /// Attach MSE and CV to matching estimates.
    pub fn apply(&self, estimates: &mut [AreaEstimate]) {
        let map = self.mse_map();
        for e in estimates.iter_mut() {
            if let Some(&m) = map.get(&e.area) {
                e.set_mse(m);
            }
        }
    }
}

struct Replicate {
    estimates: Vec<f64>,
    truth: Vec<f64>,
    nu: Vec<f64>,
}

fn run_replicate<F>(
    census: &CensusFrame,
    fixed: &[f64],
    sigma2_nu: f64,
    n_i: &[usize],
    rows_by_area: &[Vec<usize>],
    rep_seed: u64,
    estimator: &F,
) -> Result<Replicate>
where
    F: Fn(&BootstrapSample<'_>) -> Result<Vec<f64>>,
{
    let d = census.area_ids().len();
    let mut rng = seed::rng(seed::derive(rep_seed, 0));
    let nu: Vec<f64> = if sigma2_nu > 0.0 {
        let law = Normal::new(0.0, sigma2_nu.sqrt())
            .map_err(|e| Error::InvalidInput(format!("random effect law: {e}")))?;
        (0..d).map(|_| law.sample(&mut rng)).collect()
    } else {
        vec![0.0; d]
    };
    let population_y: Vec<u8> = fixed
        .iter()
        .zip(census.rows())
        .map(|(f, &a)| u8::from(rng.random::<f64>() < expit(f + nu[a])))
        .collect();
    let ones: Vec<f64> = population_y.iter().map(|&v| f64::from(v)).collect();
    let truth = census.area_means(&ones);

    let mut srs = seed::rng(seed::derive(rep_seed, 1));
    let mut rows = Vec::with_capacity(n_i.iter().sum());
    for (members, &n) in rows_by_area.iter().zip(n_i) {
        if n > 0 {
            rows.extend(sample_indices(&mut srs, members.len(), n).into_iter().map(|k| members[k]));
        }
    }
    rows.sort_unstable();
    let feats = census.features();
    let x = Array2::from_shape_fn((rows.len(), feats.ncols()), |(i, j)| feats[[rows[i], j]]);
    let y: Vec<u8> = rows.iter().map(|&j| population_y[j]).collect();
    let area: Vec<AreaId> = rows.iter().map(|&j| census.area_ids()[census.rows()[j]].clone()).collect();

    let sample = BootstrapSample {
        census,
        nu: &nu,
        population_y: &population_y,
        truth: &truth,
        rows: &rows,
        y,
        x,
        area,
        seed: seed::derive(rep_seed, 2),
    };
    let estimates = estimator(&sample)?;
    if estimates.len() != d || estimates.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("estimator returned malformed area estimates".into()));
    }
    Ok(Replicate { estimates, truth, nu })
}

/// Bootstrap with an arbitrary estimator and explicit replicate seeds.
///
/// `fixed` holds the fixed-part prediction of every census unit. Replicate
/// `b` depends only on `seeds[b]`, so permuting the seeds permutes the
/// replicates and leaves the MSE unchanged.
pub fn mse_parametric_with<F>(
    census: &CensusFrame,
    fixed: &[f64],
    sigma2_nu: f64,
    design: &SampleDesign,
    seeds: &[u64],
    estimator: F,
) -> Result<BootstrapResult>
where
    F: Fn(&BootstrapSample<'_>) -> Result<Vec<f64>> + Sync,
{
    if seeds.len() < 2 {
        return Err(Error::InvalidInput("at least 2 bootstrap replicates are required".into()));
    }
    if fixed.len() != census.n() {
        return Err(Error::InvalidInput("fixed-part predictions do not match the census".into()));
    }
    if !(sigma2_nu.is_finite() && sigma2_nu >= 0.0) {
        return Err(Error::InvalidInput(format!("invalid random effect variance {sigma2_nu}")));
    }
    let n_i = design.per_census_area(census)?;
    let rows_by_area = census.rows_by_area();
    let outcomes: Vec<Result<Replicate>> = seeds
        .par_iter()
        .map(|&s| run_replicate(census, fixed, sigma2_nu, &n_i, &rows_by_area, s, &estimator))
        .collect();

    let d = census.area_ids().len();
    let mut result = BootstrapResult {
        areas: census.area_ids().to_vec(),
        mse: vec![0.0; d],
        replicates: Vec::new(),
        estimates: Vec::new(),
        truths: Vec::new(),
        nu: Vec::new(),
        failures: Vec::new(),
    };
    for (b, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(rep) => {
                result.replicates.push(b);
                result.estimates.push(rep.estimates);
                result.truths.push(rep.truth);
                result.nu.push(rep.nu);
            }
            Err(e) => {
                warn!("bootstrap replicate {b} failed: {e}");
                result.failures.push(ReplicateFailure { replicate: b, message: e.to_string() });
            }
        }
    }
    let succeeded = result.replicates.len();
    if (succeeded as f64) < MIN_SUCCESS_SHARE * seeds.len() as f64 {
        return Err(Error::BootstrapFailed { succeeded, requested: seeds.len() });
    }
    for i in 0..d {
        let mut sq: Vec<f64> = result
            .estimates
            .iter()
            .zip(&result.truths)
            .map(|(e, t)| (e[i] - t[i]).powi(2))
            .collect();
        // Summing in sorted order makes the MSE independent of replicate order.
        sq.sort_by(f64::total_cmp);
        result.mse[i] = sq.iter().sum::<f64>() / succeeded as f64;
    }
    Ok(result)
}

/// Refit the GMERF on a bootstrap sample and predict every census area.
pub fn refit_estimator(model: &GmerfModel, cfg: &BootstrapConfig, sample: &BootstrapSample<'_>) -> Result<Vec<f64>> {
    let mut gcfg = model.config.clone();
    if let Some(f) = &cfg.refit_forest {
        gcfg.forest = f.clone();
    }
    gcfg.forest.seed = sample.seed;
    let refit = fit(&sample.y, sample.x.view(), &sample.area, &gcfg)?;
    area_proportions_raw(&refit, sample.census)
}

/// Parametric bootstrap MSE of the GMERF area proportions over `census`.
pub fn mse_parametric(
    model: &GmerfModel,
    census: &CensusFrame,
    design: &SampleDesign,
    cfg: &BootstrapConfig,
) -> Result<BootstrapResult> {
    let fixed = model.forest.predict(census.features())?;
    mse_parametric_with(census, &fixed, model.sigma2_nu, design, &cfg.replicate_seeds(), |s| {
        refit_estimator(model, cfg, s)
    })
}
