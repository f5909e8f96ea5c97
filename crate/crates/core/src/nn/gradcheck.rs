//! Central finite-difference gradient checker.

use crate::error::{Error, Result};
use crate::nn::params::{GradMap, ParamRegistry};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which coordinates of each parameter tensor are probed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoordSample {
    All,
    /// At most this many coordinates per tensor, evenly spaced through the
    /// flattened index range (first and last included).
    Strided(usize),
}

impl CoordSample {
    fn indices(self, numel: usize) -> Vec<usize> {
        match self {
            CoordSample::Strided(k) if k > 0 && k < numel => {
                if k == 1 {
                    return vec![0];
                }
                let mut out: Vec<usize> = (0..k).map(|i| i * (numel - 1) / (k - 1)).collect();
                out.dedup();
                out
            }
            _ => (0..numel).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

/// Relative error `|a - n| / max(1e-12, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

/// Compares `analytic` against central differences of `loss` for every
/// trainable entry of `registry`. Missing analytic entries count as zero.
pub fn finite_diff_check<T, F>(
    registry: &ParamRegistry<T>,
    analytic: &GradMap<T>,
    eps: f64,
    sample: CoordSample,
    mut loss: F,
) -> Result<GradCheck>
where
    T: Scalar,
    F: FnMut(&ParamRegistry<T>) -> Result<Tensor<T>>,
{
    if eps <= 0.0 {
        return Err(Error::Config(format!("finite difference step must be positive, got {eps}")));
    }
    let mut eval = |r: &ParamRegistry<T>| -> Result<f64> {
        let out = loss(r)?;
        if out.numel() != 1 {
            return Err(Error::NonScalar(out.numel()));
        }
        Ok(out.data()[0].as_f64())
    };
    // The output must be scalar even when there is nothing to perturb.
    eval(registry)?;

    let names: Vec<String> = registry.trainable_names().map(str::to_string).collect();
    let mut work = registry.clone();
    let mut report = GradCheck { max_rel_error: 0.0, worst: None, coords_checked: 0 };
    for name in names {
        let numel = registry.get(&name)?.numel();
        let grad = analytic.get(&name);
        for idx in sample.indices(numel) {
            let orig = registry.get(&name)?.data()[idx];
            work.entry_mut(&name)?.value.data_mut()[idx] = T::of(orig.as_f64() + eps);
            let up = eval(&work)?;
            work.entry_mut(&name)?.value.data_mut()[idx] = T::of(orig.as_f64() - eps);
            let down = eval(&work)?;
            work.entry_mut(&name)?.value.data_mut()[idx] = orig;

            let numeric = (up - down) / (2.0 * eps);
            let a = grad.map_or(0.0, |g| g.data()[idx].as_f64());
            let err = relative_error(a, numeric);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    Ok(report)
}
