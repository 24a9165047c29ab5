//! Area-level proportions and unit-level diagnostics.

use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::area::{AreaId, AreaIndex};
use crate::error::{Error, Result};
use crate::gmerf::{Aggregation, GmerfModel};
use crate::link::expit;

/// Census covariates for every population unit, with their areas.
#[derive(Clone, Debug)]
pub struct CensusFrame {
    features: Array2<f64>,
    areas: AreaIndex,
}

impl CensusFrame {
    pub fn new(area: &[AreaId], features: Array2<f64>) -> Result<Self> {
        if area.len() != features.nrows() {
            return Err(Error::InvalidInput(format!(
                "{} area labels for {} census rows",
                area.len(),
                features.nrows()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite census covariate".into()));
        }
        Ok(CensusFrame { features, areas: AreaIndex::from_labels(area) })
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    /// Distinct areas in order of first appearance.
    pub fn area_ids(&self) -> &[AreaId] {
        self.areas.ids()
    }

    /// Dense area index (into [`Self::area_ids`]) of every row.
    pub fn rows(&self) -> &[usize] {
        self.areas.rows()
    }

    /// Population size `N_i` per area, aligned with [`Self::area_ids`].
    pub fn sizes(&self) -> Vec<usize> {
        self.areas.counts()
    }

    pub fn size_map(&self) -> BTreeMap<AreaId, usize> {
        self.area_ids().iter().cloned().zip(self.sizes()).collect()
    }

    /// Row indices of every area, aligned with [`Self::area_ids`].
    pub fn rows_by_area(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.areas.n_areas()];
        for (j, &a) in self.rows().iter().enumerate() {
            out[a].push(j);
        }
        out
    }

    /// Mean of `unit_values` within each area, aligned with [`Self::area_ids`].
    pub fn area_means(&self, unit_values: &[f64]) -> Vec<f64> {
        let mut sums = vec![0.0; self.areas.n_areas()];
        for (v, &a) in unit_values.iter().zip(self.rows()) {
            sums[a] += v;
        }
        sums.iter().zip(self.sizes()).map(|(s, n)| s / n as f64).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AreaEstimate {
    pub area: AreaId,
    pub mu_hat: f64,
    pub n_i: usize,
    #[serde(rename = "N_i")]
    pub big_n_i: usize,
    pub in_sample: bool,
    pub mse: Option<f64>,
    pub cv: Option<f64>,
    #[serde(default)]
    pub flags: Vec<String>,
}

impl AreaEstimate {
    /// Attach an MSE and the matching coefficient of variation `sqrt(mse)/μ̂`.
    pub fn set_mse(&mut self, mse: f64) {
        self.mse = Some(mse);
        if self.mu_hat > 0.0 {
            self.cv = Some(mse.sqrt() / self.mu_hat);
        } else {
            warn!("area {}: CV undefined for a zero estimate", self.area);
            self.cv = None;
            self.flags.push("cv_undefined".to_owned());
        }
    }
}

fn warn_missing_areas(sampled: &BTreeMap<AreaId, usize>, census: &CensusFrame) {
    let present: BTreeSet<&AreaId> = census.area_ids().iter().collect();
    for area in sampled.keys().filter(|a| !present.contains(a)) {
        warn!("sampled area {area} has no census rows; skipped");
    }
}

/// Assemble estimates from per-area proportions in census order, sorted by area id.
fn assemble(
    census: &CensusFrame,
    mu_hat: Vec<f64>,
    sample_sizes: &BTreeMap<AreaId, usize>,
) -> Vec<AreaEstimate> {
    let mut out: Vec<AreaEstimate> = census
        .area_ids()
        .iter()
        .zip(census.sizes())
        .zip(mu_hat)
        .map(|((area, big_n), mu)| {
            let n_i = sample_sizes.get(area).copied().unwrap_or(0);
            AreaEstimate {
                area: area.clone(),
                mu_hat: mu,
                n_i,
                big_n_i: big_n,
                in_sample: n_i > 0,
                mse: None,
                cv: None,
                flags: Vec::new(),
            }
        })
        .collect();
    out.sort_by(|a, b| a.area.cmp(&b.area));
    out
}

/// Area proportions from the full-forest census predictions and `ν̂_i`, with
/// `ν̂_i = 0` for unsampled areas, combined per [`Aggregation`].
///
/// Results follow the census area order of [`CensusFrame::area_ids`].
pub fn area_proportions_raw(model: &GmerfModel, census: &CensusFrame) -> Result<Vec<f64>> {
    let fixed = model.forest.predict(census.features())?;
    let nu: Vec<f64> = census.area_ids().iter().map(|a| model.nu(a)).collect();
    Ok(match model.config.aggregation {
        Aggregation::Probability => {
            let probs: Vec<f64> = fixed.iter().zip(census.rows()).map(|(f, &a)| expit(f + nu[a])).collect();
            census.area_means(&probs)
        }
        Aggregation::Link => census
            .area_means(&fixed)
            .iter()
            .zip(&nu)
            .map(|(f_bar, v)| expit(f_bar + v))
            .collect(),
    })
}

/// GMERF area proportion estimates over the census, sorted by area id.
pub fn area_proportions(model: &GmerfModel, census: &CensusFrame) -> Result<Vec<AreaEstimate>> {
    warn_missing_areas(&model.sample_sizes, census);
    let mu = area_proportions_raw(model, census)?;
    Ok(assemble(census, mu, &model.sample_sizes))
}

/// Unit-level probabilities `expit(f̂(x) + ν̂_area)`.
pub fn unit_probabilities(
    model: &GmerfModel,
    features: ArrayView2<'_, f64>,
    area: &[AreaId],
) -> Result<Vec<f64>> {
    if area.len() != features.nrows() {
        return Err(Error::InvalidInput("area labels and feature rows differ in length".into()));
    }
    let fixed = model.forest.predict(features)?;
    Ok(fixed.iter().zip(area).map(|(f, a)| expit(f + model.nu(a))).collect())
}

/// Sample mean of `y` per sampled area, sorted by area id.
///
/// `population_sizes` supplies `N_i` where known; missing areas get 0.
pub fn direct_estimates(
    y: &[u8],
    area: &[AreaId],
    population_sizes: &BTreeMap<AreaId, usize>,
) -> Result<Vec<AreaEstimate>> {
    if y.len() != area.len() {
        return Err(Error::InvalidInput("responses and area labels differ in length".into()));
    }
    let mut tally: BTreeMap<&AreaId, (usize, usize)> = BTreeMap::new();
    for (&v, a) in y.iter().zip(area) {
        if v > 1 {
            return Err(Error::InvalidInput(format!("response value {v} is not 0 or 1")));
        }
        let e = tally.entry(a).or_default();
        e.0 += v as usize;
        e.1 += 1;
    }
    Ok(tally
        .into_iter()
        .map(|(a, (ones, n))| AreaEstimate {
            area: a.clone(),
            mu_hat: ones as f64 / n as f64,
            n_i: n,
            big_n_i: population_sizes.get(a).copied().unwrap_or(0),
            in_sample: true,
            mse: None,
            cv: None,
            flags: Vec::new(),
        })
        .collect())
}

/// Population-weighted aggregation of area estimates to coarser units.
pub fn aggregate(
    estimates: &[AreaEstimate],
    mapping: &BTreeMap<AreaId, AreaId>,
) -> Result<Vec<AreaEstimate>> {
    let mut groups: BTreeMap<&AreaId, (f64, usize, usize, bool)> = BTreeMap::new();
    for e in estimates {
        let district = mapping
            .get(&e.area)
            .ok_or_else(|| Error::InvalidInput(format!("area {} has no district mapping", e.area)))?;
        let g = groups.entry(district).or_insert((0.0, 0, 0, false));
        g.0 += e.big_n_i as f64 * e.mu_hat;
        g.1 += e.n_i;
        g.2 += e.big_n_i;
        g.3 |= e.in_sample;
    }
    groups
        .into_iter()
        .map(|(district, (weighted, n, big_n, in_sample))| {
            if big_n == 0 {
                return Err(Error::InvalidInput(format!(
                    "district {district} has zero population size"
                )));
            }
            Ok(AreaEstimate {
                area: district.clone(),
                mu_hat: weighted / big_n as f64,
                n_i: n,
                big_n_i: big_n,
                in_sample,
                mse: None,
                cv: None,
                flags: Vec::new(),
            })
        })
        .collect()
}

fn check_labels(labels: &[u8], scores: &[f64]) -> Result<()> {
    if labels.len() != scores.len() {
        return Err(Error::InvalidInput("labels and scores differ in length".into()));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::InvalidInput("labels must be 0 or 1".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidInput("non-finite score".into()));
    }
    Ok(())
}

/// Area under the ROC curve in Mann–Whitney form, ties counting one half.
pub fn roc_auc(labels: &[u8], scores: &[f64]) -> Result<f64> {
    check_labels(labels, scores)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidInput("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of mid-ranks of the positives.
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let mid_rank = (start + end + 1) as f64 / 2.0;
        let pos = order[start..end].iter().filter(|&&i| labels[i] == 1).count();
        rank_sum += mid_rank * pos as f64;
        start = end;
    }
    let (np, nn) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub mean_score: f64,
    pub mean_label: f64,
    pub count: usize,
}

/// Reliability table over `n_bins` equal-count score quantile bins.
pub fn calibration_bins(labels: &[u8], scores: &[f64], n_bins: usize) -> Result<Vec<CalibrationBin>> {
    check_labels(labels, scores)?;
    let n = labels.len();
    if n_bins == 0 || n_bins > n {
        return Err(Error::InvalidInput(format!("{n_bins} bins for {n} observations")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    Ok((0..n_bins)
        .map(|k| {
            let bin = &order[k * n / n_bins..(k + 1) * n / n_bins];
            let count = bin.len();
            let score: f64 = bin.iter().map(|&i| scores[i]).sum();
            let label: usize = bin.iter().map(|&i| labels[i] as usize).sum();
            CalibrationBin {
                mean_score: score / count as f64,
                mean_label: label as f64 / count as f64,
                count,
            }
        })
        .collect())
}
