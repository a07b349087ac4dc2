use serde::{Deserialize, Serialize};

use super::{Forecast, Forecaster, OutputSpec};
use crate::data::WindowedDataset;
use crate::error::{Error, Result};

/// `rho_tau(y, q) = (y - q) * (tau - 1[y < q])`.
pub fn pinball_loss(y: f64, q: f64, tau: f64) -> Result<f64> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidQuantile(tau));
    }
    Ok(pinball(y, q, tau))
}

pub fn pinball(y: f64, q: f64, tau: f64) -> f64 {
    let ind = if y < q { 1.0 } else { 0.0 };
    (y - q) * (tau - ind)
}

/// `d rho / d q`; at the kink `y == q` the indicator is 0, giving `-tau`.
pub fn pinball_grad(y: f64, q: f64, tau: f64) -> f64 {
    let ind = if y < q { 1.0 } else { 0.0 };
    -(tau - ind)
}

/// Per-sample data-fit term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataLoss {
    /// Squared error of the center row, summed over horizons. Other rows of a
    /// quantile model keep their pinball terms.
    MseMean,
    /// Pinball loss summed over every quantile row and horizon.
    PinballGrid,
}

/// Extra per-sample objective terms. `sample` indexes the dataset passed to
/// [`loss_and_gradient`]; implementations add `d(penalty)/d(output)` into
/// `d_out` and return the penalty value.
pub trait Regularizer: Sync {
    fn penalty(&self, sample: usize, output: &Forecast, d_out: &mut Forecast) -> f64;

    /// Quadratic pull of the center row towards fixed targets, when the whole
    /// regularizer has that form; lets linear models be solved exactly.
    fn quadratic_pull(&self) -> Option<QuadraticPull<'_>> {
        None
    }
}

/// `weight * sum_h (g_h - targets[sample][h])^2` on the center row.
pub struct QuadraticPull<'a> {
    pub weight: f64,
    pub targets: &'a [Vec<f64>],
}

fn data_term(
    outputs: &OutputSpec,
    loss: DataLoss,
    out: &Forecast,
    y: &[f64],
    d_out: &mut Forecast,
) -> Result<f64> {
    let center = outputs.center_row();
    let mut total = 0.0;
    match (loss, outputs) {
        (DataLoss::PinballGrid, OutputSpec::Mean) => {
            return Err(Error::InvalidParameter("pinball loss needs a quantile model".into()))
        }
        (DataLoss::MseMean, OutputSpec::Mean) => {
            for (j, &yj) in y.iter().enumerate() {
                let e = out.get(0, j) - yj;
                total += e * e;
                *d_out.get_mut(0, j) += 2.0 * e;
            }
        }
        (_, OutputSpec::Quantiles(taus)) => {
            for (r, &tau) in taus.iter().enumerate() {
                for (j, &yj) in y.iter().enumerate() {
                    let q = out.get(r, j);
                    if loss == DataLoss::MseMean && r == center {
                        let e = q - yj;
                        total += e * e;
                        *d_out.get_mut(r, j) += 2.0 * e;
                    } else {
                        total += pinball(yj, q, tau);
                        *d_out.get_mut(r, j) += pinball_grad(yj, q, tau);
                    }
                }
            }
        }
    }
    Ok(total)
}

/// Data-fit loss of a single forecast against its target.
pub fn sample_loss(outputs: &OutputSpec, loss: DataLoss, out: &Forecast, y: &[f64]) -> Result<f64> {
    let mut scratch = Forecast::zeros(out.rows, out.horizon);
    data_term(outputs, loss, out, y, &mut scratch)
}

/// Mean over `batch` of data-fit plus regularizer, and its gradient in the
/// model parameters.
pub fn loss_and_gradient(
    model: &Forecaster,
    data: &WindowedDataset,
    batch: &[usize],
    loss: DataLoss,
    regularizer: Option<&dyn Regularizer>,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::InvalidParameter("empty batch".into()));
    }
    if data.n_features != model.spec.n_features || data.horizon != model.spec.horizon {
        return Err(Error::mismatch(
            model.spec.n_features * 1000 + model.spec.horizon,
            data.n_features * 1000 + data.horizon,
            "dataset shape (features*1000 + horizon)",
        ));
    }
    let rows = model.spec.rows();
    let h = model.spec.horizon;
    let mut grad = vec![0.0; model.n_params()];
    let mut total = 0.0;
    let mut d_out = Forecast::zeros(rows, h);
    for &s in batch {
        let x = &data.inputs[s];
        let out = model.forward_unchecked(x);
        d_out.values.iter_mut().for_each(|v| *v = 0.0);
        total += data_term(&model.spec.outputs, loss, &out, &data.targets[s], &mut d_out)?;
        if let Some(reg) = regularizer {
            total += reg.penalty(s, &out, &mut d_out);
        }
        model.accumulate_gradient(x, &d_out, &mut grad);
    }
    let scale = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    let value = total * scale;
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { loss: value, epoch: 0 });
    }
    Ok((value, grad))
}
