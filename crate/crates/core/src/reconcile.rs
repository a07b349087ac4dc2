//! Post-hoc reconciliation: `y_tilde = S P y_hat` for bottom-up, GLS, MinT
//! and ERM choices of `P`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::SummingMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Base,
    Bu,
    Gls,
    MintSam,
    MintShr,
    MintOls,
    Erm,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Base,
        Method::Bu,
        Method::Gls,
        Method::MintSam,
        Method::MintShr,
        Method::MintOls,
        Method::Erm,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Base => "base",
            Method::Bu => "bu",
            Method::Gls => "gls",
            Method::MintSam => "mint-sam",
            Method::MintShr => "mint-shr",
            Method::MintOls => "mint-ols",
            Method::Erm => "erm",
        }
    }

    /// Methods whose map satisfies `P S = I`.
    pub fn is_unbiased(&self) -> bool {
        matches!(
            self,
            Method::Bu | Method::Gls | Method::MintSam | Method::MintShr | Method::MintOls
        )
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown reconciliation method `{s}`")))
    }
}

/// A fitted `P` together with the summing matrix it reconciles through.
/// `p` is `None` for the unreconciled base forecasts.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconciliationMap {
    pub method: Method,
    pub s: DMatrix<f64>,
    pub p: Option<DMatrix<f64>>,
    /// `W` (MinT) or `Sigma` (GLS).
    pub weight: Option<DMatrix<f64>>,
    /// Shrinkage intensity (mint-shr only).
    pub alpha: Option<f64>,
}

impl ReconciliationMap {
    pub fn base(s: &SummingMatrix) -> Self {
        ReconciliationMap {
            method: Method::Base,
            s: s.matrix().clone(),
            p: None,
            weight: None,
            alpha: None,
        }
    }

    pub fn n(&self) -> usize {
        self.s.nrows()
    }

    pub fn m(&self) -> usize {
        self.s.ncols()
    }

    /// The `n x n` linear map `S P` (identity for base).
    pub fn combined(&self) -> DMatrix<f64> {
        match &self.p {
            Some(p) => &self.s * p,
            None => DMatrix::identity(self.n(), self.n()),
        }
    }

    pub fn write_p_csv<W: std::io::Write>(&self, writer: W, node_ids: &[String]) -> Result<()> {
        let p = self
            .p
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("base forecasts have no P matrix".into()))?;
        if node_ids.len() != p.ncols() {
            return Err(Error::mismatch(p.ncols(), node_ids.len(), "P column labels"));
        }
        let bottoms = &node_ids[node_ids.len() - p.nrows()..];
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["bottom".to_string()];
        header.extend(node_ids.iter().cloned());
        w.write_record(&header)?;
        for (r, id) in bottoms.iter().enumerate() {
            let mut rec = vec![id.clone()];
            rec.extend((0..p.ncols()).map(|c| p[(r, c)].to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One-step in-sample base errors, `n x T`, rows in graph node order.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseForecastErrors {
    pub residuals: DMatrix<f64>,
    pub source: String,
}

impl BaseForecastErrors {
    /// `rows[i][t]` is the error of node `i` at time `t`.
    pub fn from_rows(rows: &[Vec<f64>], source: impl Into<String>) -> Result<Self> {
        let n = rows.len();
        let t = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().find(|r| r.len() != t) {
            return Err(Error::mismatch(t, r.len(), "residual row length"));
        }
        Ok(BaseForecastErrors {
            residuals: DMatrix::from_fn(n, t, |i, j| rows[i][j]),
            source: source.into(),
        })
    }

    pub fn n(&self) -> usize {
        self.residuals.nrows()
    }

    pub fn len(&self) -> usize {
        self.residuals.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(1/T) sum_t e_t e_t'` (not mean-centred).
    pub fn sample_covariance(&self) -> DMatrix<f64> {
        let e = &self.residuals;
        (e * e.transpose()) / e.ncols() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shrinkage {
    /// Intensity estimated from the residuals.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MintWeighting {
    Sample,
    Shrinkage(Shrinkage),
    Ols,
}

pub fn bottom_up_map(s: &SummingMatrix) -> ReconciliationMap {
    let (n, m) = (s.n(), s.m());
    let p = DMatrix::from_fn(m, n, |r, c| if c == n - m + r { 1.0 } else { 0.0 });
    ReconciliationMap {
        method: Method::Bu,
        s: s.matrix().clone(),
        p: Some(p),
        weight: None,
        alpha: None,
    }
}

fn jittered_cholesky(a: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = a.clone().cholesky() {
        return Ok(c);
    }
    let n = a.nrows();
    let mean_diag = a.diagonal().mean().abs();
    let jitter = 1e-8 * if mean_diag > 0.0 { mean_diag } else { 1.0 };
    log::warn!("{what} is not positive definite; adding jitter {jitter:e} to its diagonal");
    let mut b = a.clone();
    for i in 0..n {
        b[(i, i)] += jitter;
    }
    b.cholesky()
        .ok_or_else(|| Error::Singular(format!("{what} after jitter {jitter:e}")))
}

/// `P = (S' W^-1 S)^-1 S' W^-1` through two Cholesky solves.
fn projection(s: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = s.nrows();
    if w.nrows() != n || w.ncols() != n {
        return Err(Error::mismatch(n, w.nrows(), "weight matrix dimension"));
    }
    let w_chol = jittered_cholesky(w, "weight matrix")?;
    let w_inv_s = w_chol.solve(s);
    let gram = s.transpose() * &w_inv_s;
    let g_chol = jittered_cholesky(&gram, "S' W^-1 S")?;
    Ok(g_chol.solve(&w_inv_s.transpose()))
}

/// Generalised least squares with coherency-error covariance `sigma`.
pub fn gls_map(s: &SummingMatrix, sigma: &DMatrix<f64>) -> Result<ReconciliationMap> {
    let p = projection(s.matrix(), sigma)?;
    Ok(ReconciliationMap {
        method: Method::Gls,
        s: s.matrix().clone(),
        p: Some(p),
        weight: Some(sigma.clone()),
        alpha: None,
    })
}

/// `W` and the intensity used, shrinking the sample covariance towards its
/// diagonal.
pub fn shrinkage_covariance(errors: &BaseForecastErrors, shrinkage: Shrinkage) -> Result<(DMatrix<f64>, f64)> {
    let ws = errors.sample_covariance();
    let alpha = match shrinkage {
        Shrinkage::Fixed(a) => {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::InvalidParameter(format!("shrinkage intensity {a} outside (0, 1]")));
            }
            a
        }
        Shrinkage::Auto => auto_shrinkage(errors, &ws),
    };
    let n = ws.nrows();
    let w = DMatrix::from_fn(n, n, |i, j| if i == j { ws[(i, i)] } else { (1.0 - alpha) * ws[(i, j)] });
    Ok((w, alpha))
}

/// Ratio of the estimated variance of the sample correlations to their
/// squared size (diagonal target), clamped to `[0, 1]`.
fn auto_shrinkage(errors: &BaseForecastErrors, ws: &DMatrix<f64>) -> f64 {
    let e = &errors.residuals;
    let (n, t) = (e.nrows(), e.ncols());
    if t < 2 {
        return 1.0;
    }
    let sd: Vec<f64> = (0..n).map(|i| ws[(i, i)].sqrt()).collect();
    // standardised residuals, one row per series
    let xs = DMatrix::from_fn(n, t, |i, k| if sd[i] > 0.0 { e[(i, k)] / sd[i] } else { 0.0 });
    let tf = t as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let mut s1 = 0.0;
            let mut s2 = 0.0;
            for k in 0..t {
                let w = xs[(i, k)] * xs[(j, k)];
                s1 += w;
                s2 += w * w;
            }
            num += (s2 - s1 * s1 / tf) / (tf * (tf - 1.0));
            let r = s1 / tf;
            den += r * r;
        }
    }
    if den <= 0.0 {
        return 1.0;
    }
    (num / den).clamp(0.0, 1.0)
}

pub fn mint_map(s: &SummingMatrix, errors: Option<&BaseForecastErrors>, weighting: MintWeighting) -> Result<ReconciliationMap> {
    let n = s.n();
    let (method, w, alpha) = match weighting {
        MintWeighting::Ols => (Method::MintOls, DMatrix::identity(n, n), None),
        MintWeighting::Sample | MintWeighting::Shrinkage(_) => {
            let e = errors.ok_or_else(|| Error::InvalidParameter("MinT needs base forecast residuals".into()))?;
            if e.n() != n {
                return Err(Error::mismatch(n, e.n(), "residual rows"));
            }
            if e.len() < 2 {
                return Err(Error::InvalidParameter(format!(
                    "{} residual columns; at least 2 needed",
                    e.len()
                )));
            }
            if e.len() < n {
                log::warn!("{} residual columns for {n} series; the sample covariance is singular", e.len());
            }
            match weighting {
                MintWeighting::Sample => (Method::MintSam, e.sample_covariance(), None),
                MintWeighting::Shrinkage(sh) => {
                    let (w, a) = shrinkage_covariance(e, sh)?;
                    (Method::MintShr, w, Some(a))
                }
                MintWeighting::Ols => unreachable!(),
            }
        }
    };
    let p = projection(s.matrix(), &w)?;
    Ok(ReconciliationMap {
        method,
        s: s.matrix().clone(),
        p: Some(p),
        weight: Some(w),
        alpha,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErmSolver {
    /// Eigendecomposition of the two Gram factors.
    Direct,
    /// Conjugate gradients on the normal equations.
    Iterative { max_iter: usize, tol: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErmConfig {
    pub ridge: f64,
    pub solver: ErmSolver,
}

impl Default for ErmConfig {
    fn default() -> Self {
        ErmConfig {
            ridge: 1e-6,
            solver: ErmSolver::Direct,
        }
    }
}

/// `argmin_P sum_t ||y_t - S P x_t||^2 + ridge ||P||_F^2` with base forecasts
/// `x` and targets `y` as `n x N` column-per-sample matrices.
pub fn erm_map(s: &SummingMatrix, forecasts: &DMatrix<f64>, targets: &DMatrix<f64>, config: ErmConfig) -> Result<ReconciliationMap> {
    let sm = s.matrix();
    let n = sm.nrows();
    if forecasts.nrows() != n || targets.nrows() != n {
        return Err(Error::mismatch(n, forecasts.nrows().min(targets.nrows()), "ERM rows"));
    }
    if forecasts.ncols() != targets.ncols() || forecasts.ncols() == 0 {
        return Err(Error::mismatch(forecasts.ncols(), targets.ncols(), "ERM samples"));
    }
    if !(config.ridge >= 0.0) {
        return Err(Error::InvalidParameter(format!("ridge {}", config.ridge)));
    }
    if forecasts.ncols() < n {
        log::warn!("ERM fitted on {} samples for {n} series", forecasts.ncols());
    }
    let a = sm.transpose() * sm;
    let b = forecasts * forecasts.transpose();
    let c = sm.transpose() * targets * forecasts.transpose();
    let p = match config.solver {
        ErmSolver::Direct => erm_direct(&a, &b, &c, config.ridge)?,
        ErmSolver::Iterative { max_iter, tol } => erm_cg(&a, &b, &c, config.ridge, max_iter, tol)?,
    };
    Ok(ReconciliationMap {
        method: Method::Erm,
        s: sm.clone(),
        p: Some(p),
        weight: None,
        alpha: None,
    })
}

/// Solves `A P B + r P = C` for symmetric PSD `A`, `B`.
fn erm_direct(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>, r: f64) -> Result<DMatrix<f64>> {
    let ea = SymmetricEigen::new(a.clone());
    let eb = SymmetricEigen::new(b.clone());
    let (u, v) = (&ea.eigenvectors, &eb.eigenvectors);
    let mut pt = u.transpose() * c * v;
    let amax = ea.eigenvalues.amax();
    let bmax = eb.eigenvalues.amax();
    let floor = 1e-12 * amax * bmax;
    for i in 0..pt.nrows() {
        for j in 0..pt.ncols() {
            let d = ea.eigenvalues[i].max(0.0) * eb.eigenvalues[j].max(0.0) + r;
            if d <= floor {
                return Err(Error::Singular(
                    "ERM normal equations are rank deficient; use a positive ridge".into(),
                ));
            }
            pt[(i, j)] /= d;
        }
    }
    Ok(u * pt * v.transpose())
}

fn erm_cg(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>, r: f64, max_iter: usize, tol: f64) -> Result<DMatrix<f64>> {
    let op = |p: &DMatrix<f64>| a * p * b + p * r;
    let dot = |x: &DMatrix<f64>, y: &DMatrix<f64>| x.dot(y);
    let mut p = DMatrix::zeros(c.nrows(), c.ncols());
    let mut res = c.clone();
    let mut dir = res.clone();
    let mut rr = dot(&res, &res);
    let target = tol * tol * rr.max(f64::MIN_POSITIVE);
    for _ in 0..max_iter {
        if rr <= target {
            return Ok(p);
        }
        let q = op(&dir);
        let curv = dot(&dir, &q);
        if !(curv > 0.0) {
            return Err(Error::Singular(
                "ERM normal equations are rank deficient; use a positive ridge".into(),
            ));
        }
        let step = rr / curv;
        p += &dir * step;
        res -= &q * step;
        let rr_new = dot(&res, &res);
        dir = &res + &dir * (rr_new / rr);
        rr = rr_new;
    }
    if rr <= target {
        Ok(p)
    } else {
        Err(Error::InvalidParameter(format!(
            "ERM iterative solver did not converge in {max_iter} iterations"
        )))
    }
}

/// `S (P y_hat)`; base maps return `y_hat` unchanged.
pub fn apply_map(map: &ReconciliationMap, y_hat: &[f64]) -> Result<Vec<f64>> {
    if y_hat.len() != map.n() {
        return Err(Error::mismatch(map.n(), y_hat.len(), "base forecast length"));
    }
    match &map.p {
        None => Ok(y_hat.to_vec()),
        Some(p) => {
            let b = p * DVector::from_column_slice(y_hat);
            Ok((&map.s * b).as_slice().to_vec())
        }
    }
}

/// [`apply_map`] over every horizon of `y_hat[node][h]`.
pub fn apply_map_horizons(map: &ReconciliationMap, y_hat: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if y_hat.len() != map.n() {
        return Err(Error::mismatch(map.n(), y_hat.len(), "base forecast rows"));
    }
    let h = y_hat.first().map_or(0, Vec::len);
    let x = DMatrix::from_fn(map.n(), h, |i, j| y_hat[i][j]);
    let out = map.combined() * x;
    Ok((0..map.n()).map(|i| out.row(i).iter().copied().collect()).collect())
}
