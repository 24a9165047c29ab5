//! Weighted random-intercept linear mixed model with a fixed offset.
//!
//! The working model is `y_l = offset + ν_area + ε` with `ν ~ N(0, σ²)` and
//! `ε_ij ~ N(0, 1/w_ij)`. Under a single random intercept per area the
//! marginal covariance of an area block is `σ² J + W⁻¹`, which is a rank-one
//! update of a diagonal matrix. Every quantity below is therefore computed
//! from four per-area sums, never from an explicit n × n matrix.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper end of the σ² search interval.
pub const SIGMA2_MAX: f64 = 100.0;
/// Floor applied to σ² inside [`gll`] so that `log σ²` stays finite.
pub const GLL_SIGMA2_FLOOR: f64 = 1e-8;

const OPT_TOL: f64 = 1e-8;
const OPT_MAX_ITER: usize = 200;
const GRID_POINTS: usize = 60;

/// Linearized response, offset, and PQL weights grouped by area.
#[derive(Clone, Copy, Debug)]
pub struct GroupedData<'a> {
    y_l: &'a [f64],
    offset: &'a [f64],
    weights: &'a [f64],
    area: &'a [usize],
    n_areas: usize,
}

impl<'a> GroupedData<'a> {
    /// `area[j]` is the dense index (`< n_areas`) of row `j`; every area needs a row.
    pub fn new(
        y_l: &'a [f64],
        offset: &'a [f64],
        weights: &'a [f64],
        area: &'a [usize],
        n_areas: usize,
    ) -> Result<Self> {
        let n = y_l.len();
        if offset.len() != n || weights.len() != n || area.len() != n {
            return Err(Error::InvalidInput(format!(
                "grouped data lengths differ: y_l {n}, offset {}, weights {}, area {}",
                offset.len(),
                weights.len(),
                area.len()
            )));
        }
        if y_l.iter().chain(offset).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite response or offset".into()));
        }
        if weights.iter().any(|&w| !(w > 0.0 && w <= 0.25)) {
            return Err(Error::InvalidInput("weights must lie in (0, 0.25]".into()));
        }
        let mut seen = vec![false; n_areas];
        for &a in area {
            if a >= n_areas {
                return Err(Error::InvalidInput(format!("area index {a} >= {n_areas}")));
            }
            seen[a] = true;
        }
        if let Some(empty) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidInput(format!("area index {empty} has no rows")));
        }
        Ok(GroupedData { y_l, offset, weights, area, n_areas })
    }

    pub fn n_areas(&self) -> usize {
        self.n_areas
    }

    pub fn area(&self) -> &'a [usize] {
        self.area
    }

    pub fn weights(&self) -> &'a [f64] {
        self.weights
    }

    pub fn residuals(&self) -> impl Iterator<Item = f64> + '_ {
        self.y_l.iter().zip(self.offset).map(|(y, f)| y - f)
    }

    fn sums(&self) -> Vec<AreaSums> {
        let mut sums = vec![AreaSums::default(); self.n_areas];
        for (j, r) in self.residuals().enumerate() {
            let w = self.weights[j];
            let s = &mut sums[self.area[j]];
            s.rows += 1;
            s.t += w;
            s.s += w * r;
            s.q += w * r * r;
            s.log_inv_w -= w.ln();
        }
        sums
    }
}

/// Per-area sums `T = Σw`, `S = Σw·r`, `Q = Σw·r²`, `Σ log(1/w)`.
#[derive(Clone, Copy, Debug, Default)]
struct AreaSums {
    rows: usize,
    t: f64,
    s: f64,
    q: f64,
    log_inv_w: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    pub sigma2_nu: f64,
}

/// Gaussian log-likelihood of the residuals `y_l − offset` at random-effect variance `sigma2`.
pub fn log_likelihood(data: &GroupedData<'_>, sigma2: f64) -> f64 {
    loglik_from_sums(&data.sums(), sigma2)
}

fn loglik_from_sums(sums: &[AreaSums], sigma2: f64) -> f64 {
    let ln_2pi = (2.0 * PI).ln();
    let mut total = 0.0;
    for a in sums {
        let denom = 1.0 + sigma2 * a.t;
        let log_det = a.log_inv_w + denom.ln();
        let quad = a.q - sigma2 * a.s * a.s / denom;
        total += a.rows as f64 * ln_2pi + log_det + quad;
    }
    -0.5 * total
}

/// Maximum-likelihood σ² over `[0, SIGMA2_MAX]`.
///
/// A log-spaced grid locates the best basin, Brent's method refines it, and the
/// boundary value 0 is kept when it scores at least as well.
pub fn estimate_sigma2(data: &GroupedData<'_>) -> Result<VarianceComponents> {
    let sums = data.sums();
    let objective = |s2: f64| -loglik_from_sums(&sums, s2);

    let mut grid = Vec::with_capacity(GRID_POINTS + 1);
    grid.push(0.0);
    let (lo, hi) = (1e-6f64.ln(), SIGMA2_MAX.ln());
    for k in 0..GRID_POINTS {
        grid.push((lo + (hi - lo) * k as f64 / (GRID_POINTS - 1) as f64).exp());
    }
    let values: Vec<f64> = grid.iter().map(|&s2| objective(s2)).collect();
    let best = (0..grid.len())
        .min_by(|&a, &b| values[a].total_cmp(&values[b]))
        .unwrap_or(0);

    let lower = grid[best.saturating_sub(1)];
    let upper = grid[(best + 1).min(grid.len() - 1)];
    let (mut sigma2, mut value) = (grid[best], values[best]);
    if upper > lower {
        let (x, fx) = brent_minimize(objective, lower, upper, OPT_TOL, OPT_MAX_ITER)?;
        if fx < value {
            sigma2 = x;
            value = fx;
        }
    }
    if values[0] <= value {
        sigma2 = 0.0;
    }
    Ok(VarianceComponents { sigma2_nu: sigma2 })
}

/// Best linear unbiased predictor of the area intercepts, `σ² S_i / (1 + σ² T_i)`.
pub fn blup(data: &GroupedData<'_>, vc: &VarianceComponents) -> Vec<f64> {
    let s2 = vc.sigma2_nu;
    data.sums()
        .iter()
        .map(|a| s2 * a.s / (1.0 + s2 * a.t))
        .collect()
}

/// Generalized log-likelihood criterion used to monitor the fitting iterations.
///
/// Per area: `Σ w (r − ν)² + ν²/σ² + log σ² + Σ log(1/w)`, where `r = y_l − offset`.
pub fn gll(data: &GroupedData<'_>, nu: &[f64], vc: &VarianceComponents) -> f64 {
    let s2 = vc.sigma2_nu.max(GLL_SIGMA2_FLOOR);
    let mut per_area = vec![0.0; data.n_areas];
    for (j, r) in data.residuals().enumerate() {
        let a = data.area[j];
        let w = data.weights[j];
        let e = r - nu[a];
        per_area[a] += w * e * e - w.ln();
    }
    per_area
        .iter()
        .zip(nu)
        .map(|(fit, v)| fit + v * v / s2 + s2.ln())
        .sum()
}

/// Brent's parabolic-interpolation minimizer on `[a, b]`.
fn brent_minimize<F: Fn(f64) -> f64>(
    f: F,
    mut a: f64,
    mut b: f64,
    tol: f64,
    max_iter: usize,
) -> Result<(f64, f64)> {
    const CGOLD: f64 = 0.381_966_011_250_105;
    let mut x = a + CGOLD * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = f(x);
    let (mut fw, mut fv) = (fx, fx);
    let (mut d, mut e) = (0.0f64, 0.0f64);
    for _ in 0..max_iter {
        let xm = 0.5 * (a + b);
        let tol1 = tol * x.abs() + 1e-12;
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (b - a) {
            return Ok((x, fx));
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            } else {
                q = -q;
            }
            let e_prev = e;
            if p.abs() < (0.5 * q * e_prev).abs() && p > q * (a - x) && p < q * (b - x) {
                e = d;
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = tol1.copysign(xm - x);
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= xm { a - x } else { b - x };
            d = CGOLD * e;
        }
        let u = if d.abs() >= tol1 { x + d } else { x + tol1.copysign(d) };
        let fu = f(u);
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    Err(Error::NoConvergence { iterations: max_iter, lower: a, upper: b })
}
