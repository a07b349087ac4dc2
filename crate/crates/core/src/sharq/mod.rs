//! Coherency-regularized training: the median coherency losses, the quantile
//! spread-matching objective, per-level penalty weights and the bottom-up
//! trainer.

mod trainer;

pub use trainer::{
    coherency_objective, train_base, train_sharq, BaseModels, JointConfig, MedianCoherence, SharqConfig, SharqState,
    SpreadMatching, Stage, StageRecord,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{pinball, pinball_grad, validate_grid, Forecast};

/// Penalty weight per hierarchy level (level 1 is the root).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaSchedule {
    /// Same weight at every aggregate level.
    Constant(f64),
    /// `bottom` on the level just above the deepest one, multiplied by
    /// `decay` for every level further up.
    Profile { bottom: f64, decay: f64 },
    /// Explicit weights, root level first. Levels past the end reuse the last
    /// entry.
    PerLevel(Vec<f64>),
}

impl Default for LambdaSchedule {
    fn default() -> Self {
        LambdaSchedule::Profile {
            bottom: 3.0,
            decay: 0.5,
        }
    }
}

impl LambdaSchedule {
    pub fn zero() -> Self {
        LambdaSchedule::Constant(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |v: f64| !(v >= 0.0) || !v.is_finite();
        let ok = match self {
            LambdaSchedule::Constant(v) => !bad(*v),
            LambdaSchedule::Profile { bottom, decay } => !bad(*bottom) && !bad(*decay),
            LambdaSchedule::PerLevel(v) => !v.is_empty() && !v.iter().any(|&x| bad(x)),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid lambda schedule {self}")))
        }
    }

    /// Weight of `level` in a hierarchy whose deepest level is `depth`.
    pub fn at(&self, level: usize, depth: usize) -> f64 {
        match self {
            LambdaSchedule::Constant(v) => *v,
            LambdaSchedule::Profile { bottom, decay } => {
                let above = depth.saturating_sub(1).saturating_sub(level);
                bottom * decay.powi(above as i32)
            }
            LambdaSchedule::PerLevel(v) => v[(level.max(1) - 1).min(v.len() - 1)],
        }
    }
}

impl fmt::Display for LambdaSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LambdaSchedule::Constant(v) => write!(f, "{v}"),
            LambdaSchedule::Profile { bottom, decay } => write!(f, "bottom={bottom},decay={decay}"),
            LambdaSchedule::PerLevel(v) => {
                let parts: Vec<String> = v.iter().map(|x| x.to_string()).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

impl FromStr for LambdaSchedule {
    type Err = Error;

    /// `3.0`, `1.5,3.0` (root first) or `bottom=3.0,decay=0.5`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidParameter(format!("cannot parse lambda profile `{s}`"));
        let s = s.trim();
        let sched = if s.contains('=') {
            let (mut bottom, mut decay) = (None, None);
            for part in s.split(',') {
                let (k, v) = part.split_once('=').ok_or_else(bad)?;
                let v: f64 = v.trim().parse().map_err(|_| bad())?;
                match k.trim() {
                    "bottom" => bottom = Some(v),
                    "decay" => decay = Some(v),
                    _ => return Err(bad()),
                }
            }
            LambdaSchedule::Profile {
                bottom: bottom.ok_or_else(bad)?,
                decay: decay.unwrap_or(0.5),
            }
        } else {
            let vals = s
                .split(',')
                .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()?;
            match vals.as_slice() {
                [v] => LambdaSchedule::Constant(*v),
                _ => LambdaSchedule::PerLevel(vals),
            }
        };
        sched.validate()?;
        Ok(sched)
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidParameter(format!("lambda {lambda} must be a finite non-negative number")));
    }
    Ok(())
}

fn children_sum(children: &[&[f64]], signs: &[i8], h: usize) -> Result<Vec<f64>> {
    if children.len() != signs.len() {
        return Err(Error::mismatch(children.len(), signs.len(), "child signs"));
    }
    let mut sum = vec![0.0; h];
    for (c, &sg) in children.iter().zip(signs) {
        if c.len() != h {
            return Err(Error::mismatch(h, c.len(), "child forecast horizon"));
        }
        for (s, v) in sum.iter_mut().zip(c.iter()) {
            *s += sg as f64 * v;
        }
    }
    Ok(sum)
}

/// `sum_h (g_h - y_h)^2 + lambda sum_h (g_h - sum_k sign_k g_kh)^2` and its
/// gradient in the parent forecast `g`.
pub fn constrained_mean_loss_with_grad(
    parent: &[f64],
    target: &[f64],
    children: &[&[f64]],
    signs: &[i8],
    lambda: f64,
) -> Result<(f64, Vec<f64>)> {
    check_lambda(lambda)?;
    let h = parent.len();
    if target.len() != h {
        return Err(Error::mismatch(h, target.len(), "target horizon"));
    }
    let c = children_sum(children, signs, h)?;
    let mut value = 0.0;
    let mut grad = vec![0.0; h];
    for j in 0..h {
        let e = parent[j] - target[j];
        let d = parent[j] - c[j];
        value += e * e + lambda * d * d;
        grad[j] = 2.0 * e + 2.0 * lambda * d;
    }
    Ok((value, grad))
}

pub fn constrained_mean_loss(
    parent: &[f64],
    target: &[f64],
    children: &[&[f64]],
    signs: &[i8],
    lambda: f64,
) -> Result<f64> {
    constrained_mean_loss_with_grad(parent, target, children, signs, lambda).map(|(v, _)| v)
}

/// Multi-quantile pinball loss of `parent` (`|taus| x h`) plus
/// `lambda ||Q50 - sum_k sign_k Q50_k||^2`, with the gradient in `parent`.
pub fn constrained_quantile_loss_with_grad(
    parent: &Forecast,
    taus: &[f64],
    target: &[f64],
    children_medians: &[&[f64]],
    signs: &[i8],
    lambda: f64,
) -> Result<(f64, Forecast)> {
    check_lambda(lambda)?;
    validate_grid(taus)?;
    if parent.rows != taus.len() {
        return Err(Error::mismatch(taus.len(), parent.rows, "quantile rows"));
    }
    let h = parent.horizon;
    if target.len() != h {
        return Err(Error::mismatch(h, target.len(), "target horizon"));
    }
    let center = taus.iter().position(|&t| t == 0.5).ok_or(Error::MissingMedian)?;
    let c = children_sum(children_medians, signs, h)?;
    let mut grad = Forecast::zeros(parent.rows, h);
    let mut value = 0.0;
    for (r, &tau) in taus.iter().enumerate() {
        for j in 0..h {
            let q = parent.get(r, j);
            value += pinball(target[j], q, tau);
            *grad.get_mut(r, j) += pinball_grad(target[j], q, tau);
        }
    }
    for j in 0..h {
        let d = parent.get(center, j) - c[j];
        value += lambda * d * d;
        *grad.get_mut(center, j) += 2.0 * lambda * d;
    }
    Ok((value, grad))
}

pub fn constrained_quantile_loss(
    parent: &Forecast,
    taus: &[f64],
    target: &[f64],
    children_medians: &[&[f64]],
    signs: &[i8],
    lambda: f64,
) -> Result<f64> {
    constrained_quantile_loss_with_grad(parent, taus, target, children_medians, signs, lambda).map(|(v, _)| v)
}

/// Gradient of [`quantile_reconciliation_loss`] in the parent's quantile and
/// median forecasts.
#[derive(Debug, Clone, PartialEq)]
pub struct SpreadGrad {
    pub d_quantile: Vec<f64>,
    pub d_median: Vec<f64>,
}

/// `sum_h [ (Q_h - M_h)^2 - sum_k sign_k (Q_kh - M_kh)^2 + var_eps ]^2`.
pub fn quantile_reconciliation_loss_with_grad(
    parent_q: &[f64],
    parent_median: &[f64],
    children_q: &[&[f64]],
    children_median: &[&[f64]],
    signs: &[i8],
    var_eps: f64,
) -> Result<(f64, SpreadGrad)> {
    let h = parent_q.len();
    if parent_median.len() != h {
        return Err(Error::mismatch(h, parent_median.len(), "parent median horizon"));
    }
    if children_q.len() != signs.len() || children_median.len() != signs.len() {
        return Err(Error::mismatch(signs.len(), children_q.len(), "children"));
    }
    let mut child = vec![0.0; h];
    for ((q, m), &sg) in children_q.iter().zip(children_median).zip(signs) {
        if q.len() != h || m.len() != h {
            return Err(Error::mismatch(h, q.len().min(m.len()), "child horizon"));
        }
        for j in 0..h {
            child[j] += sg as f64 * (q[j] - m[j]).powi(2);
        }
    }
    let mut value = 0.0;
    let mut d_quantile = vec![0.0; h];
    let mut d_median = vec![0.0; h];
    for j in 0..h {
        let spread = parent_q[j] - parent_median[j];
        let inner = spread * spread - child[j] + var_eps;
        value += inner * inner;
        let g = 4.0 * inner * spread;
        d_quantile[j] = g;
        d_median[j] = -g;
    }
    Ok((value, SpreadGrad { d_quantile, d_median }))
}

pub fn quantile_reconciliation_loss(
    parent_q: &[f64],
    parent_median: &[f64],
    children_q: &[&[f64]],
    children_median: &[&[f64]],
    signs: &[i8],
    var_eps: f64,
) -> Result<f64> {
    quantile_reconciliation_loss_with_grad(parent_q, parent_median, children_q, children_median, signs, var_eps)
        .map(|(v, _)| v)
}

/// Minimiser of `(g - y)^2 + lambda (g - children_sum)^2`.
pub fn variance_reduction_closed_form(y: f64, children_sum: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok((y + lambda * children_sum) / (lambda + 1.0))
}

/// Per-node quantile forecasts on a shared grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileForecastSet {
    pub taus: Vec<f64>,
    /// `values[node][r][h]`.
    pub values: Vec<Vec<Vec<f64>>>,
}

impl QuantileForecastSet {
    pub fn new(taus: Vec<f64>, values: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        validate_grid(&taus)?;
        for node in &values {
            if node.len() != taus.len() {
                return Err(Error::mismatch(taus.len(), node.len(), "quantile rows"));
            }
        }
        Ok(QuantileForecastSet { taus, values })
    }

    pub fn from_forecasts(taus: Vec<f64>, forecasts: &[Forecast]) -> Result<Self> {
        let values = forecasts
            .iter()
            .map(|f| (0..f.rows).map(|r| f.row(r).to_vec()).collect())
            .collect();
        Self::new(taus, values)
    }

    pub fn center_row(&self) -> usize {
        self.taus.iter().position(|&t| t == 0.5).unwrap_or(0)
    }

    /// `medians[node][h]`.
    pub fn medians(&self) -> Vec<Vec<f64>> {
        let c = self.center_row();
        self.values.iter().map(|v| v[c].clone()).collect()
    }

    pub fn is_non_crossing(&self) -> bool {
        self.values.iter().all(|node| {
            let h = node.first().map_or(0, Vec::len);
            (0..h).all(|j| node.windows(2).all(|w| w[0][j] <= w[1][j]))
        })
    }
}

/// Sorts each node's quantiles per horizon so they increase with `tau`.
pub fn calibrate_non_crossing(set: &QuantileForecastSet) -> QuantileForecastSet {
    let mut out = set.clone();
    for node in out.values.iter_mut() {
        let h = node.first().map_or(0, Vec::len);
        let mut col = Vec::with_capacity(node.len());
        for j in 0..h {
            col.clear();
            col.extend(node.iter().map(|row| row[j]));
            col.sort_by(f64::total_cmp);
            for (row, &v) in node.iter_mut().zip(&col) {
                row[j] = v;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_parsing() {
        let p: LambdaSchedule = "bottom=3.0,decay=0.5".parse().unwrap();
        assert_eq!(p.at(2, 3), 3.0);
        assert_eq!(p.at(1, 3), 1.5);
        assert_eq!(p.at(1, 4), 0.75);
        let l: LambdaSchedule = "1.5, 3".parse().unwrap();
        assert_eq!(l, LambdaSchedule::PerLevel(vec![1.5, 3.0]));
        assert_eq!(l.at(1, 3), 1.5);
        assert_eq!(l.at(5, 7), 3.0);
        assert_eq!("0".parse::<LambdaSchedule>().unwrap().at(1, 2), 0.0);
        assert!("-1".parse::<LambdaSchedule>().is_err());
        assert!("bottom=x".parse::<LambdaSchedule>().is_err());
        assert!("top=1".parse::<LambdaSchedule>().is_err());
        assert_eq!(LambdaSchedule::default().to_string().parse::<LambdaSchedule>().unwrap(), LambdaSchedule::default());
    }

    #[test]
    fn mean_loss_examples() {
        let coherent = constrained_mean_loss(&[3.0], &[2.0], &[&[1.0], &[2.0]], &[1, 1], 5.0).unwrap();
        assert_eq!(coherent, 1.0);
        let off = constrained_mean_loss(&[3.0], &[2.0], &[&[1.0]], &[1], 0.0).unwrap();
        assert_eq!(off, 1.0);
        assert!(constrained_mean_loss(&[3.0], &[2.0], &[&[1.0]], &[1], -1.0).is_err());
        // minimiser of the scalar case y=2, sum=4, lambda=1
        let (_, g) = constrained_mean_loss_with_grad(&[3.0], &[2.0], &[&[4.0]], &[1], 1.0).unwrap();
        assert_eq!(g, vec![0.0]);
    }

    #[test]
    fn quantile_loss_examples() {
        let taus = [0.05, 0.5, 0.95];
        let at_target = Forecast {
            rows: 3,
            horizon: 1,
            values: vec![4.0, 4.0, 4.0],
        };
        assert_eq!(
            constrained_quantile_loss(&at_target, &taus, &[4.0], &[&[1.0], &[3.0]], &[1, 1], 9.0).unwrap(),
            0.0
        );
        let f = Forecast {
            rows: 3,
            horizon: 1,
            values: vec![5.0, 5.0, 5.0],
        };
        let base = constrained_quantile_loss(&f, &taus, &[5.0], &[&[4.0]], &[1], 0.0).unwrap();
        let pen = constrained_quantile_loss(&f, &taus, &[5.0], &[&[4.0]], &[1], 2.0).unwrap();
        assert_eq!(base, 0.0);
        assert_eq!(pen - base, 2.0);
        assert!(matches!(
            constrained_quantile_loss(&f, &[0.1, 0.4, 0.9], &[5.0], &[&[4.0]], &[1], 2.0),
            Err(Error::MissingMedian)
        ));
    }

    #[test]
    fn spread_loss_examples() {
        let single = quantile_reconciliation_loss(&[3.0], &[0.0], &[&[3.0]], &[&[0.0]], &[1], 0.0).unwrap();
        assert_eq!(single, 0.0);
        let two = quantile_reconciliation_loss(&[2.0], &[0.0], &[&[1.0], &[1.0]], &[&[0.0], &[0.0]], &[1, 1], 0.0)
            .unwrap();
        assert_eq!(two, 4.0);
    }

    #[test]
    fn closed_form_examples() {
        assert_eq!(variance_reduction_closed_form(2.0, 4.0, 0.0).unwrap(), 2.0);
        assert!((variance_reduction_closed_form(0.0, 1.0, 1e6).unwrap() - 1.0).abs() < 1e-5);
        assert_eq!(variance_reduction_closed_form(2.0, 4.0, 1.0).unwrap(), 3.0);
    }

    #[test]
    fn calibration_sorts() {
        let set = QuantileForecastSet::new(
            vec![0.05, 0.5, 0.95],
            vec![vec![vec![3.0, 1.0], vec![2.0, 1.0], vec![1.0, 2.0]]],
        )
        .unwrap();
        assert!(!set.is_non_crossing());
        let c = calibrate_non_crossing(&set);
        assert_eq!(c.values[0], vec![vec![1.0, 1.0], vec![2.0, 1.0], vec![3.0, 2.0]]);
        assert!(c.is_non_crossing());
        assert_eq!(calibrate_non_crossing(&c), c);
    }
}
