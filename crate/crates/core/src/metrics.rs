//! Depth map error metrics with a deterministic reduction order, so repeated
//! runs produce bit-identical reports.

use ndarray::Array2;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::{real, Real};

/// Depth values with a validity mask. Valid pixels must be finite; masked
/// pixels may hold anything.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap<T: Real> {
    depth: Array2<T>,
    valid: Array2<bool>,
}

impl<T: Real> DepthMap<T> {
    pub fn new(depth: Array2<T>, valid: Array2<bool>) -> Result<Self> {
        if depth.dim() != valid.dim() {
            return Err(Error::DimensionMismatch {
                context: "depth map mask",
                expected: format!("{:?}", depth.dim()),
                got: format!("{:?}", valid.dim()),
            });
        }
        for (d, &ok) in depth.iter().zip(valid.iter()) {
            if ok && !d.is_finite() {
                return Err(Error::NonFinite("depth map"));
            }
        }
        Ok(Self { depth, valid })
    }

    /// All pixels valid; every value must be finite.
    pub fn from_depth(depth: Array2<T>) -> Result<Self> {
        let valid = Array2::from_elem(depth.dim(), true);
        Self::new(depth, valid)
    }

    pub fn depth(&self) -> &Array2<T> {
        &self.depth
    }

    pub fn valid(&self) -> &Array2<bool> {
        &self.valid
    }

    pub fn dim(&self) -> (usize, usize) {
        self.depth.dim()
    }
}

/// Aggregate depth errors over the jointly valid, strictly positive pixels.
///
/// `l1` is mean absolute depth error, `l1_rel` divides each error by the
/// reference depth, `l1_inv` is the mean absolute inverse-depth error, and
/// `sc_inv` is the scale-invariant log error (standard deviation of the
/// per-pixel log ratio). `n_nonpositive` counts pixels both masks accept but
/// a nonpositive depth on either side excludes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsReport<T: Real> {
    pub l1: T,
    pub l1_rel: T,
    pub l1_inv: T,
    pub sc_inv: T,
    pub n_valid: usize,
    pub n_nonpositive: usize,
}

/// Binary-tree sum over the slice, splitting at the midpoint down to single
/// elements. The reduction order depends only on the length.
pub(crate) fn pairwise_sum<T: Real>(values: &[T]) -> T {
    match values.len() {
        0 => T::zero(),
        1 => values[0],
        n => {
            let mid = n / 2;
            pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
        }
    }
}

/// Streams (prediction, reference) pairs and reduces every retained pixel in
/// a fixed order at `finish`, so a multi-map aggregate equals the result of
/// evaluating one concatenated map.
#[derive(Debug, Clone, Default)]
pub struct MetricsAccumulator<T: Real> {
    abs_err: Vec<T>,
    rel_err: Vec<T>,
    inv_err: Vec<T>,
    log_ratio: Vec<T>,
    n_nonpositive: usize,
}

impl<T: Real> MetricsAccumulator<T> {
    pub fn new() -> Self {
        Self {
            abs_err: Vec::new(),
            rel_err: Vec::new(),
            inv_err: Vec::new(),
            log_ratio: Vec::new(),
            n_nonpositive: 0,
        }
    }

    /// Adds one prediction/reference pair; pixels enter in row-major order.
    pub fn push(&mut self, pred: &DepthMap<T>, reference: &DepthMap<T>) -> Result<()> {
        if pred.dim() != reference.dim() {
            return Err(Error::DimensionMismatch {
                context: "metrics input",
                expected: format!("{:?}", reference.dim()),
                got: format!("{:?}", pred.dim()),
            });
        }
        let one = T::one();
        for ((p, g), (&pv, &gv)) in pred
            .depth
            .iter()
            .zip(reference.depth.iter())
            .zip(pred.valid.iter().zip(reference.valid.iter()))
        {
            if !(pv && gv) {
                continue;
            }
            let (p, g) = (*p, *g);
            if p <= T::zero() || g <= T::zero() {
                self.n_nonpositive += 1;
                continue;
            }
            self.abs_err.push((p - g).abs());
            self.rel_err.push((p - g).abs() / g);
            self.inv_err.push((one / p - one / g).abs());
            self.log_ratio.push(p.ln() - g.ln());
        }
        Ok(())
    }

    pub fn n_pixels(&self) -> usize {
        self.abs_err.len()
    }

    pub fn finish(&self) -> Result<MetricsReport<T>> {
        let n = self.abs_err.len();
        if n == 0 {
            return Err(Error::NoValidPixels);
        }
        let count = real::<T>(n as f64);
        let mean = |v: &[T]| pairwise_sum(v) / count;
        let z_sq: Vec<T> = self.log_ratio.iter().map(|z| *z * *z).collect();
        let mean_z = mean(&self.log_ratio);
        let variance = mean(&z_sq) - mean_z * mean_z;
        Ok(MetricsReport {
            l1: mean(&self.abs_err),
            l1_rel: mean(&self.rel_err),
            l1_inv: mean(&self.inv_err),
            sc_inv: variance.max(T::zero()).sqrt(),
            n_valid: n,
            n_nonpositive: self.n_nonpositive,
        })
    }
}

/// Metrics for a single prediction against a single reference map.
pub fn evaluate<T: Real>(pred: &DepthMap<T>, reference: &DepthMap<T>) -> Result<MetricsReport<T>> {
    let mut acc = MetricsAccumulator::new();
    acc.push(pred, reference)?;
    acc.finish()
}
