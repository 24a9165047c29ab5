//! Penalized quasi-likelihood fitting of the GMERF.
//!
//! Macro iterations linearize the binary response around the current mean
//! estimate, giving a working response `y_l` and weights `w = μ(1 − μ)`.
//! Inside each macro iteration the weights are frozen and micro iterations
//! alternate between the fixed part (fitted to `y_l − Zν̂`) and the random
//! intercepts (variance estimate plus BLUP on the fixed part's in-sample
//! predictions) until the GLL criterion settles. The macro loop stops once
//! the in-sample linear predictor stops moving.
//!
//! The loop is generic over the fixed-part learner: the forest uses its
//! out-of-bag predictions, the linear baseline its fitted values.

use std::collections::BTreeMap;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::area::{AreaId, AreaIndex};
use crate::error::{Error, Result};
use crate::forest::{fit_forest, Forest, ForestConfig, TrainingSet};
use crate::link::{expit, logit};
use crate::mixedmodel::{blup, estimate_sigma2, gll, GroupedData};

/// Tolerances and caps of the doubly iterative fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PqlControl {
    /// Relative GLL change that ends the micro iterations.
    pub gll_rel_tol: f64,
    /// Mean relative change of η̂ that ends the macro iterations.
    pub eta_rel_tol: f64,
    pub max_micro: usize,
    pub max_macro: usize,
    /// μ̂ is kept inside `[eps, 1 − eps]`.
    pub mu_clamp_eps: f64,
    /// Summary of the η̂ change compared with `eta_rel_tol`.
    pub eta_norm: EtaNorm,
    /// Longest GLL cycle recognised as micro convergence; 0 or 1 disables the check.
    pub cycle_lags: usize,
}

/// How the change between successive η̂ vectors is summarized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaNorm {
    /// `|mean(η̂_new) − mean(η̂_old)| / (|mean(η̂_old)| + 1)`.
    #[default]
    MeanLevel,
    /// `mean_i |η̂_new,i − η̂_old,i| / (|η̂_old,i| + 1)`.
    UnitMean,
}

impl EtaNorm {
    pub fn change(self, new: &[f64], old: &[f64]) -> f64 {
        match self {
            EtaNorm::MeanLevel => {
                let n = new.len() as f64;
                let (a, b) = (new.iter().sum::<f64>() / n, old.iter().sum::<f64>() / n);
                (a - b).abs() / (b.abs() + 1.0)
            }
            EtaNorm::UnitMean => {
                new.iter().zip(old).map(|(a, b)| (a - b).abs() / (b.abs() + 1.0)).sum::<f64>()
                    / new.len() as f64
            }
        }
    }
}

impl Default for PqlControl {
    fn default() -> Self {
        PqlControl {
            gll_rel_tol: 1e-5,
            eta_rel_tol: 0.01,
            max_micro: 100,
            max_macro: 50,
            mu_clamp_eps: 1e-6,
            eta_norm: EtaNorm::MeanLevel,
            cycle_lags: 8,
        }
    }
}

impl PqlControl {
    fn validate(&self) -> Result<()> {
        if !(self.gll_rel_tol > 0.0 && self.eta_rel_tol > 0.0) {
            return Err(Error::InvalidInput("tolerances must be positive".into()));
        }
        if self.max_micro == 0 || self.max_macro == 0 {
            return Err(Error::InvalidInput("iteration caps must be at least 1".into()));
        }
        if !(self.mu_clamp_eps > 0.0 && self.mu_clamp_eps < 0.5) {
            return Err(Error::InvalidInput("mu_clamp_eps must lie in (0, 0.5)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GmerfConfig {
    #[serde(flatten)]
    pub control: PqlControl,
    #[serde(default)]
    pub forest: ForestConfig,
    /// Scale on which census units are averaged into area proportions.
    #[serde(default)]
    pub aggregation: Aggregation,
}

/// How unit-level predictions are combined into an area proportion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// `mean_j expit(f̂(x_ij) + ν̂_i)`.
    #[default]
    Probability,
    /// `expit(mean_j f̂(x_ij) + ν̂_i)`.
    Link,
}

/// Per-macro-iteration record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroStep {
    /// GLL after every micro iteration.
    pub gll: Vec<f64>,
    /// Micro loop ended on the iteration cap rather than the tolerance.
    pub micro_cap_hit: bool,
    /// Period of the GLL cycle that ended the micro loop, if any.
    pub micro_cycle: Option<usize>,
    pub sigma2_nu: f64,
    /// Change of η̂ against the previous macro iteration, under the configured norm.
    pub eta_change: f64,
    /// Mean unit-level relative change of η̂, recorded for diagnostics.
    pub eta_change_unit: f64,
    /// Training rows whose in-sample prediction had to fall back to the full fit.
    pub n_degenerate: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitTrace {
    pub steps: Vec<MacroStep>,
    /// η̂ tolerance reached; false means the macro cap ended the fit.
    pub converged: bool,
}

impl FitTrace {
    pub fn macro_iterations(&self) -> usize {
        self.steps.len()
    }

    pub fn micro_iterations(&self) -> usize {
        self.steps.iter().map(|s| s.gll.len()).sum()
    }

    pub fn macro_cap_hit(&self) -> bool {
        !self.converged
    }

    pub fn micro_cap_hits(&self) -> usize {
        self.steps.iter().filter(|s| s.micro_cap_hit).count()
    }

    /// Short labels describing non-standard termination, for reports.
    pub fn flags(&self) -> Vec<String> {
        let mut flags = Vec::new();
        if self.macro_cap_hit() {
            flags.push("macro_cap".to_owned());
        }
        if self.micro_cap_hits() > 0 {
            flags.push("micro_cap".to_owned());
        }
        if self.steps.last().is_some_and(|s| s.n_degenerate > 0) {
            flags.push("oob_degenerate".to_owned());
        }
        flags
    }
}

/// Fitted fixed part together with its in-sample predictions on the training rows.
pub struct FixedFit<M> {
    pub model: M,
    pub in_sample: Vec<f64>,
    pub n_degenerate: usize,
}

/// Learner for the fixed part `f(x)` of the working model.
pub trait FixedPartLearner {
    type Model;

    fn fit(&self, x: ArrayView2<'_, f64>, y: &[f64], w: &[f64]) -> Result<FixedFit<Self::Model>>;
}

/// Random forest fixed part with out-of-bag in-sample predictions.
pub struct ForestLearner<'a>(pub &'a ForestConfig);

impl FixedPartLearner for ForestLearner<'_> {
    type Model = Forest;

    fn fit(&self, x: ArrayView2<'_, f64>, y: &[f64], w: &[f64]) -> Result<FixedFit<Forest>> {
        let set = TrainingSet::new(x, y, w)?;
        let forest = fit_forest(&set, self.0)?;
        let oob = forest.oob_predict(&set)?;
        let n_degenerate = oob.n_degenerate();
        Ok(FixedFit { model: forest, in_sample: oob.values, n_degenerate })
    }
}

/// Starting means: 0.75 for y = 1, 0.25 for y = 0.
pub fn initialize_mu(y: &[u8]) -> Result<Vec<f64>> {
    check_binary(y)?;
    Ok(y.iter().map(|&v| if v == 1 { 0.75 } else { 0.25 }).collect())
}

fn check_binary(y: &[u8]) -> Result<()> {
    match y.iter().find(|&&v| v > 1) {
        Some(v) => Err(Error::InvalidInput(format!("response value {v} is not 0 or 1"))),
        None => Ok(()),
    }
}

/// Working response `logit(μ) + (y − μ)/(μ(1 − μ))` and weights `μ(1 − μ)`, with μ
/// clamped into `[eps, 1 − eps]` first.
pub fn linearize(y: &[u8], mu: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>) {
    y.iter()
        .zip(mu)
        .map(|(&yi, &m)| {
            let m = m.clamp(eps, 1.0 - eps);
            (working_response(yi as f64, m), m * (1.0 - m))
        })
        .unzip()
}

/// First-order expansion `logit(μ) + (y − μ)/(μ(1 − μ))` for a real `y`, μ in (0, 1).
pub fn working_response(y: f64, mu: f64) -> f64 {
    logit(mu) + (y - mu) / (mu * (1.0 - mu))
}

/// Result of one micro loop.
pub struct MicroFit<M> {
    pub fixed: M,
    /// In-sample (OOB or fitted) fixed-part predictions.
    pub in_sample: Vec<f64>,
    /// BLUP per dense area index.
    pub nu: Vec<f64>,
    pub sigma2_nu: f64,
    pub gll_trace: Vec<f64>,
    pub cap_hit: bool,
    pub cycle: Option<usize>,
    pub n_degenerate: usize,
}

/// Micro iterations at fixed working response and weights.
pub fn fit_micro<L: FixedPartLearner>(
    learner: &L,
    y_l: &[f64],
    w: &[f64],
    x: ArrayView2<'_, f64>,
    area: &[usize],
    n_areas: usize,
    control: &PqlControl,
) -> Result<MicroFit<L::Model>> {
    let mut nu = vec![0.0; n_areas];
    let mut gll_trace = Vec::new();
    let mut last = None;
    for _ in 0..control.max_micro {
        let y_star: Vec<f64> = y_l.iter().zip(area).map(|(y, &a)| y - nu[a]).collect();
        let fixed = learner.fit(x, &y_star, w)?;
        let data = GroupedData::new(y_l, &fixed.in_sample, w, area, n_areas)?;
        let vc = estimate_sigma2(&data)?;
        nu = blup(&data, &vc);
        let g = gll(&data, &nu, &vc);
        let close = |prev: f64| {
            let diff = (g - prev).abs();
            diff == 0.0 || diff < control.gll_rel_tol * prev.abs()
        };
        let settled = gll_trace.last().is_some_and(|&prev| close(prev));
        // A GLL value revisited after k > 1 steps marks a periodic orbit of the
        // (deterministic) micro map; iterating further only repeats it.
        let cycle = if settled {
            None
        } else {
            (2..=control.cycle_lags.min(gll_trace.len())).find(|&k| close(gll_trace[gll_trace.len() - k]))
        };
        gll_trace.push(g);
        last = Some((fixed, vc.sigma2_nu));
        if settled || cycle.is_some() {
            let (fixed, sigma2_nu) = last.take().expect("just set");
            return Ok(MicroFit {
                fixed: fixed.model,
                in_sample: fixed.in_sample,
                nu,
                sigma2_nu,
                gll_trace,
                cap_hit: false,
                cycle,
                n_degenerate: fixed.n_degenerate,
            });
        }
    }
    let (fixed, sigma2_nu) = last.expect("max_micro >= 1");
    Ok(MicroFit {
        fixed: fixed.model,
        in_sample: fixed.in_sample,
        nu,
        sigma2_nu,
        gll_trace,
        cap_hit: true,
        cycle: None,
        n_degenerate: fixed.n_degenerate,
    })
}

/// Outcome of the full doubly iterative fit with dense area indexing.
pub struct PqlFit<M> {
    pub fixed: M,
    pub nu: Vec<f64>,
    pub sigma2_nu: f64,
    pub areas: AreaIndex,
    pub trace: FitTrace,
}

impl<M> PqlFit<M> {
    pub fn nu_map(&self) -> BTreeMap<AreaId, f64> {
        self.areas.ids().iter().cloned().zip(self.nu.iter().copied()).collect()
    }

    pub fn sample_sizes(&self) -> BTreeMap<AreaId, usize> {
        self.areas.ids().iter().cloned().zip(self.areas.counts()).collect()
    }
}

fn check_inputs(y: &[u8], x: &ArrayView2<'_, f64>, area: &[AreaId]) -> Result<()> {
    if x.nrows() != y.len() || area.len() != y.len() {
        return Err(Error::InvalidInput(format!(
            "{} responses, {} feature rows, {} area labels",
            y.len(),
            x.nrows(),
            area.len()
        )));
    }
    check_binary(y)?;
    let ones = y.iter().filter(|&&v| v == 1).count();
    if ones == 0 || ones == y.len() {
        return Err(Error::DegenerateResponse(format!(
            "all {} responses equal {}",
            y.len(),
            y.first().copied().unwrap_or(0)
        )));
    }
    Ok(())
}

/// Doubly iterative PQL fit with an arbitrary fixed-part learner.
pub fn fit_pql<L: FixedPartLearner>(
    learner: &L,
    y: &[u8],
    x: ArrayView2<'_, f64>,
    area: &[AreaId],
    control: &PqlControl,
) -> Result<PqlFit<L::Model>> {
    control.validate()?;
    check_inputs(y, &x, area)?;
    let areas = AreaIndex::from_labels(area);
    let rows = areas.rows();
    let eps = control.mu_clamp_eps;

    let mut mu = initialize_mu(y)?;
    let mut eta_old: Vec<f64> = mu.iter().map(|&m| logit(m)).collect();
    let mut trace = FitTrace::default();
    let mut fit = None;
    for _ in 0..control.max_macro {
        let (y_l, w) = linearize(y, &mu, eps);
        let micro = fit_micro(learner, &y_l, &w, x, rows, areas.n_areas(), control)?;
        let eta_new: Vec<f64> = micro
            .in_sample
            .iter()
            .zip(rows)
            .map(|(f, &a)| f + micro.nu[a])
            .collect();
        let eta_change = control.eta_norm.change(&eta_new, &eta_old);
        trace.steps.push(MacroStep {
            gll: micro.gll_trace.clone(),
            micro_cap_hit: micro.cap_hit,
            micro_cycle: micro.cycle,
            sigma2_nu: micro.sigma2_nu,
            eta_change,
            eta_change_unit: EtaNorm::UnitMean.change(&eta_new, &eta_old),
            n_degenerate: micro.n_degenerate,
        });
        mu = eta_new.iter().map(|&e| expit(e).clamp(eps, 1.0 - eps)).collect();
        eta_old = eta_new;
        fit = Some(micro);
        if eta_change < control.eta_rel_tol {
            trace.converged = true;
            break;
        }
    }
    let micro = fit.expect("max_macro >= 1");
    Ok(PqlFit {
        fixed: micro.fixed,
        nu: micro.nu,
        sigma2_nu: micro.sigma2_nu,
        areas,
        trace,
    })
}

/// Fitted GMERF.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmerfModel {
    pub forest: Forest,
    /// Random-intercept predictions for the sampled areas.
    pub nu_hat: BTreeMap<AreaId, f64>,
    pub sigma2_nu: f64,
    /// Survey sample size of every sampled area.
    pub sample_sizes: BTreeMap<AreaId, usize>,
    pub trace: FitTrace,
    pub config: GmerfConfig,
}

impl GmerfModel {
    /// ν̂ for `area`, zero for areas without sample.
    pub fn nu(&self, area: &AreaId) -> f64 {
        self.nu_hat.get(area).copied().unwrap_or(0.0)
    }

    pub fn is_sampled(&self, area: &AreaId) -> bool {
        self.nu_hat.contains_key(area)
    }
}

/// Fit a GMERF to binary responses `y` with covariates `x` and area labels.
pub fn fit(y: &[u8], x: ArrayView2<'_, f64>, area: &[AreaId], cfg: &GmerfConfig) -> Result<GmerfModel> {
    let learner = ForestLearner(&cfg.forest);
    let pql = fit_pql(&learner, y, x, area, &cfg.control)?;
    let nu_hat = pql.nu_map();
    let sample_sizes = pql.sample_sizes();
    Ok(GmerfModel {
        forest: pql.fixed,
        nu_hat,
        sigma2_nu: pql.sigma2_nu,
        sample_sizes,
        trace: pql.trace,
        config: cfg.clone(),
    })
}
