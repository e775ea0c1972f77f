//! Depth-estimation metrics: RMSE, MAE, and threshold accuracy.

use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::real::Real;
use crate::tensor::NdArray;

/// delta_1 convention: ratio threshold 1.25.
pub const DELTA_1: f64 = 1.25;
/// Stricter threshold used alongside delta_1.
pub const DELTA_105: f64 = 1.05;
/// Ratio guard for non-positive predictions; such pixels fail the threshold.
pub const RATIO_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub rmse: f64,
    pub mae: f64,
    /// (threshold, percentage of masked pixels passing).
    pub delta: Vec<(f64, f64)>,
    pub n_samples: usize,
}

/// Pixel-weighted accumulator over samples; aggregation is a plain sum, so
/// it is order-independent.
#[derive(Debug, Clone)]
pub struct MetricsAccum {
    sq_sum: f64,
    abs_sum: f64,
    n_pixels: u64,
    n_samples: usize,
    thresholds: Vec<f64>,
    pass_counts: Vec<u64>,
}

impl MetricsAccum {
    pub fn new(thresholds: &[f64]) -> Self {
        MetricsAccum {
            sq_sum: 0.0,
            abs_sum: 0.0,
            n_pixels: 0,
            n_samples: 0,
            thresholds: thresholds.to_vec(),
            pass_counts: alloc::vec![0; thresholds.len()],
        }
    }

    pub fn add_sample<R: Real>(&mut self, y: &NdArray<R>, z: &NdArray<R>) -> Result<()> {
        if y.shape != z.shape {
            return Err(CoreError::ShapeMismatch(alloc::format!(
                "metrics operands {:?} vs {:?}",
                y.shape,
                z.shape
            )));
        }
        let mut any = false;
        for (yv, zv) in y.data.iter().zip(z.data.iter()) {
            let zf = zv.to_f64();
            if zf <= 0.0 {
                continue;
            }
            any = true;
            let yf = yv.to_f64();
            let e = yf - zf;
            self.sq_sum += e * e;
            self.abs_sum += libm::fabs(e);
            self.n_pixels += 1;
            let yg = yf.max(RATIO_EPS);
            let ratio = (yg / zf).max(zf / yg);
            for (i, &t) in self.thresholds.iter().enumerate() {
                if ratio < t {
                    self.pass_counts[i] += 1;
                }
            }
        }
        if !any {
            return Err(CoreError::InvalidArgument(alloc::string::String::from(
                "no valid (positive ground truth) pixels in sample",
            )));
        }
        self.n_samples += 1;
        Ok(())
    }

    pub fn finalize(&self) -> Result<MetricsReport> {
        if self.n_pixels == 0 {
            return Err(CoreError::InvalidArgument(alloc::string::String::from(
                "empty metrics accumulator",
            )));
        }
        let n = self.n_pixels as f64;
        Ok(MetricsReport {
            rmse: libm::sqrt(self.sq_sum / n),
            mae: self.abs_sum / n,
            delta: self
                .thresholds
                .iter()
                .zip(self.pass_counts.iter())
                .map(|(&t, &c)| (t, 100.0 * c as f64 / n))
                .collect(),
            n_samples: self.n_samples,
        })
    }
}

fn single<R: Real>(y: &NdArray<R>, z: &NdArray<R>, thresholds: &[f64]) -> Result<MetricsReport> {
    let mut acc = MetricsAccum::new(thresholds);
    acc.add_sample(y, z)?;
    acc.finalize()
}

pub fn metric_rmse<R: Real>(y: &NdArray<R>, z: &NdArray<R>) -> Result<f64> {
    Ok(single(y, z, &[])?.rmse)
}

pub fn metric_mae<R: Real>(y: &NdArray<R>, z: &NdArray<R>) -> Result<f64> {
    Ok(single(y, z, &[])?.mae)
}

/// Percentage of valid pixels with max(Y/Z, Z/Y) < threshold.
pub fn metric_delta<R: Real>(y: &NdArray<R>, z: &NdArray<R>, threshold: f64) -> Result<f64> {
    Ok(single(y, z, &[threshold])?.delta[0].1)
}
