//! Central-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Deviations below this magnitude are measured absolutely rather than
/// relative to the (near-zero) gradient.
const DEVIATION_FLOOR: f64 = 1e-6;

/// One-sided slopes of a smooth function differ by O(eps * curvature);
/// beyond this relative gap the probe straddled a kink such as ReLU at 0.
const KINK_DEVIATION: f64 = 1e-2;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_deviation: f64,
    /// (input index, coordinate) of the largest deviation.
    pub worst: (usize, usize),
    pub checked: usize,
    /// Coordinates that failed only because `x +- eps` straddled a kink;
    /// they are excluded from `max_deviation`.
    pub kinks: usize,
    pub rtol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_deviation <= self.rtol
    }
}

fn deviation(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DEVIATION_FLOOR)
}

fn eval_scalar(f: &impl Fn(&[Tensor]) -> Result<Tensor>, inputs: &[Tensor], at: (usize, usize)) -> Result<f64> {
    let y = f(inputs)?;
    if y.numel() != 1 {
        return Err(Error::NonScalarLoss(y.shape().to_vec()));
    }
    let v = y.item();
    if !v.is_finite() {
        return Err(Error::NonFinite {
            context: format!("grad_check input {} coordinate", at.0),
            index: at.1,
            value: v,
        });
    }
    Ok(v)
}

/// Checks d f / d inputs[i] for every input against
/// `(f(x + eps) - f(x - eps)) / (2 eps)`, one coordinate at a time.
/// A failing coordinate whose forward and backward one-sided slopes
/// disagree sharply sits on a kink and is counted in `kinks` instead.
pub fn grad_check_many(
    f: impl Fn(&[Tensor]) -> Result<Tensor>,
    inputs: &[Tensor],
    eps: f64,
    rtol: f64,
) -> Result<GradCheckReport> {
    let leaves: Vec<Tensor> = inputs.iter().map(|t| t.leaf_with_grad(true)).collect();
    let y = f(&leaves)?;
    y.check_finite("grad_check output")?;
    let y0 = y.item();
    y.backward()?;

    let mut report = GradCheckReport {
        max_deviation: 0.0,
        worst: (0, 0),
        checked: 0,
        kinks: 0,
        rtol,
    };
    for (which, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        for i in 0..leaf.numel() {
            let probe = |delta: f64| -> Result<f64> {
                let mut shifted: Vec<Tensor> = inputs.iter().map(Tensor::detach).collect();
                let mut data = inputs[which].to_vec();
                data[i] += delta;
                shifted[which] = Tensor::new(inputs[which].shape(), data)?;
                eval_scalar(&f, &shifted, (which, i))
            };
            let (up, down) = (probe(eps)?, probe(-eps)?);
            let numeric = (up - down) / (2.0 * eps);
            let d = deviation(analytic[i], numeric);
            if !analytic[i].is_finite() {
                return Err(Error::NonFinite {
                    context: format!("analytic gradient of input {which}"),
                    index: i,
                    value: analytic[i],
                });
            }
            let one_sided = deviation((up - y0) / eps, (y0 - down) / eps);
            // a kink only excuses an error no larger than the slope change
            if d > rtol && one_sided > KINK_DEVIATION && one_sided >= d {
                report.kinks += 1;
                continue;
            }
            if d > report.max_deviation {
                report.max_deviation = d;
                report.worst = (which, i);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check(
    f: impl Fn(&Tensor) -> Result<Tensor>,
    x: &Tensor,
    eps: f64,
    rtol: f64,
) -> Result<GradCheckReport> {
    grad_check_many(|xs| f(&xs[0]), std::slice::from_ref(x), eps, rtol)
}
