//! GLMM baseline fitted by PQL with a linear fixed part.
//!
//! Runs the same macro/micro loop as the GMERF with weighted least squares
//! on `(1, x)` in place of the forest and fitted values in place of OOB
//! predictions. Area proportions use the unit-level plug-in
//! `mean_j expit(x_ij'β̂ + ν̂_i)` (the conditional expectation predictor).

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::area::AreaId;
use crate::error::{Error, Result};
use crate::gmerf::{fit_pql, FitTrace, FixedFit, FixedPartLearner, PqlControl};
use crate::link::expit;
use crate::predict::{AreaEstimate, CensusFrame};

/// Linear predictor `β₀ + x'β`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    /// Intercept first.
    pub beta: Vec<f64>,
}

impl LinearFit {
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        if x.ncols() + 1 != self.beta.len() {
            return Err(Error::ColumnMismatch { expected: self.beta.len() - 1, found: x.ncols() });
        }
        Ok(x.rows()
            .into_iter()
            .map(|row| self.beta[0] + row.iter().zip(&self.beta[1..]).map(|(a, b)| a * b).sum::<f64>())
            .collect())
    }
}

/// Weighted least squares on `(1, x)`.
pub struct LinearLearner;

impl FixedPartLearner for LinearLearner {
    type Model = LinearFit;

    fn fit(&self, x: ArrayView2<'_, f64>, y: &[f64], w: &[f64]) -> Result<FixedFit<LinearFit>> {
        let fit = weighted_least_squares(x, y, w)?;
        let in_sample = fit.predict(x)?;
        Ok(FixedFit { model: fit, in_sample, n_degenerate: 0 })
    }
}

fn design_column(x: &ArrayView2<'_, f64>, j: usize, i: usize) -> f64 {
    if j == 0 {
        1.0
    } else {
        x[[i, j - 1]]
    }
}

/// Columns of `(1, x)` that are linearly dependent on earlier columns (0 = intercept).
pub fn dependent_columns(x: ArrayView2<'_, f64>) -> Vec<usize> {
    let n = x.nrows();
    let k = x.ncols() + 1;
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut dependent = Vec::new();
    for j in 0..k {
        let mut v: Vec<f64> = (0..n).map(|i| design_column(&x, j, i)).collect();
        let norm0 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        // Two Gram-Schmidt passes keep the residual accurate.
        for _ in 0..2 {
            for q in &basis {
                let dot: f64 = q.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm0 == 0.0 || norm <= 1e-9 * norm0 {
            dependent.push(j);
        } else {
            v.iter_mut().for_each(|a| *a /= norm);
            basis.push(v);
        }
    }
    dependent
}

/// Weighted least squares with intercept via the normal equations.
pub fn weighted_least_squares(x: ArrayView2<'_, f64>, y: &[f64], w: &[f64]) -> Result<LinearFit> {
    let n = x.nrows();
    let k = x.ncols() + 1;
    if y.len() != n || w.len() != n {
        return Err(Error::InvalidInput("WLS inputs differ in length".into()));
    }
    let mut xtwx = DMatrix::<f64>::zeros(k, k);
    let mut xtwy = DVector::<f64>::zeros(k);
    let mut row = vec![0.0; k];
    for i in 0..n {
        for (j, r) in row.iter_mut().enumerate() {
            *r = design_column(&x, j, i);
        }
        for a in 0..k {
            xtwy[a] += w[i] * row[a] * y[i];
            for b in 0..=a {
                xtwx[(a, b)] += w[i] * row[a] * row[b];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            xtwx[(b, a)] = xtwx[(a, b)];
        }
    }
    let chol = xtwx.cholesky().ok_or_else(|| Error::RankDeficient {
        columns: dependent_columns(x),
    })?;
    let beta = chol.solve(&xtwy);
    Ok(LinearFit { beta: beta.iter().copied().collect() })
}

/// Fitted GLMM baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlmmModel {
    pub beta: Vec<f64>,
    pub nu_hat: BTreeMap<AreaId, f64>,
    pub sigma2_nu: f64,
    pub sample_sizes: BTreeMap<AreaId, usize>,
    pub trace: FitTrace,
}

impl GlmmModel {
    pub fn nu(&self, area: &AreaId) -> f64 {
        self.nu_hat.get(area).copied().unwrap_or(0.0)
    }

    pub fn linear(&self) -> LinearFit {
        LinearFit { beta: self.beta.clone() }
    }
}

/// Logistic random-intercept model fitted by PQL.
pub fn fit_glmm_pql(
    y: &[u8],
    x: ArrayView2<'_, f64>,
    area: &[AreaId],
    control: &PqlControl,
) -> Result<GlmmModel> {
    let dependent = dependent_columns(x);
    if !dependent.is_empty() {
        return Err(Error::RankDeficient { columns: dependent });
    }
    let pql = fit_pql(&LinearLearner, y, x, area, control)?;
    if pql.fixed.beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::InvalidInput("non-finite regression coefficients".into()));
    }
    Ok(GlmmModel {
        nu_hat: pql.nu_map(),
        sample_sizes: pql.sample_sizes(),
        beta: pql.fixed.beta,
        sigma2_nu: pql.sigma2_nu,
        trace: pql.trace,
    })
}

/// Per-area `mean_j expit(x_ij'β̂ + ν̂_i)` in census area order; unsampled areas use ν̂ = 0.
pub fn cep_area_proportions_raw(model: &GlmmModel, census: &CensusFrame) -> Result<Vec<f64>> {
    let eta = model.linear().predict(census.features())?;
    let nu: Vec<f64> = census.area_ids().iter().map(|a| model.nu(a)).collect();
    let probs: Vec<f64> = eta
        .iter()
        .zip(census.rows())
        .map(|(e, &a)| expit(e + nu[a]))
        .collect();
    Ok(census.area_means(&probs))
}

/// CEP area proportion estimates, sorted by area id.
pub fn cep_area_proportions(model: &GlmmModel, census: &CensusFrame) -> Result<Vec<AreaEstimate>> {
    let mu = cep_area_proportions_raw(model, census)?;
    let mut out: Vec<AreaEstimate> = census
        .area_ids()
        .iter()
        .zip(census.sizes())
        .zip(mu)
        .map(|((area, big_n), mu_hat)| {
            let n_i = model.sample_sizes.get(area).copied().unwrap_or(0);
            AreaEstimate {
                area: area.clone(),
                mu_hat,
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
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn wls_recovers_exact_line() {
        let x = array![[0.0], [1.0], [2.0], [3.0]];
        let y = [1.0, 3.0, 5.0, 7.0];
        let fit = weighted_least_squares(x.view(), &y, &[0.1, 0.2, 0.25, 0.05]).unwrap();
        assert!((fit.beta[0] - 1.0).abs() < 1e-12);
        assert!((fit.beta[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rank_deficiency_names_columns() {
        let x = array![[1.0, 2.0, 5.0], [2.0, 4.0, 5.0], [3.0, 6.0, 5.0], [4.0, 8.0, 5.0]];
        assert_eq!(dependent_columns(x.view()), vec![2, 3]);
        let area: Vec<AreaId> = vec!["a".into(); 4];
        let err = fit_glmm_pql(&[0, 1, 0, 1], x.view(), &area, &PqlControl::default()).unwrap_err();
        assert!(matches!(err, Error::RankDeficient { ref columns } if columns == &vec![2, 3]));
    }

    #[test]
    fn plug_in_hand_cases() {
        let census = CensusFrame::new(
            &["a".into(), "b".into()],
            Array2::from_shape_vec((2, 1), vec![0.0, 3f64.ln()]).unwrap(),
        )
        .unwrap();
        let model = GlmmModel {
            beta: vec![0.0, 1.0],
            nu_hat: BTreeMap::new(),
            sigma2_nu: 0.0,
            sample_sizes: BTreeMap::new(),
            trace: FitTrace::default(),
        };
        let out = cep_area_proportions(&model, &census).unwrap();
        assert_eq!(out[0].mu_hat, 0.5);
        assert!((out[1].mu_hat - 0.75).abs() < 1e-12);

        let flat = GlmmModel { beta: vec![0.0, 0.0], ..model };
        for e in cep_area_proportions(&flat, &census).unwrap() {
            assert_eq!(e.mu_hat, 0.5);
        }
    }
}
