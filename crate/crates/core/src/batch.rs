//! Batch fusion: the joint GP posterior over a whole frame sequence.
//!
//! For latents `Y` (N frames x M dims) and Gram matrix `C`, the posterior
//! over noise-free latents has mean `C (C + sigma_sq I)^-1 Y` and per-frame
//! variance `diag(C - C (C + sigma_sq I)^-1 C)`. A single Cholesky
//! factorization serves every latent dimension; the variance never depends
//! on `Y`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::kernels::GramMatrix;
use crate::scalar::{real, to_f64, Real};

/// Default ceiling on frames per batch solve; beyond it the cubic cost and
/// memory stop paying for themselves against the online form.
pub const DEFAULT_FRAME_CAP: usize = 512;

/// Relative jitter ladder applied to the noise-augmented Gram diagonal when
/// factorization fails: each entry scales `gamma_sq`.
const JITTER_LADDER: [f64; 5] = [0.0, 1e-10, 1e-9, 1e-8, 1e-7];

/// Frame latents, one row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMatrix<T: Real> {
    data: DMatrix<T>,
}

impl<T: Real> LatentMatrix<T> {
    pub fn new(data: DMatrix<T>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::DimensionMismatch {
                context: "latent matrix",
                expected: "at least 1x1".into(),
                got: format!("{}x{}", data.nrows(), data.ncols()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent matrix"));
        }
        Ok(Self { data })
    }

    pub fn from_rows(rows: &[DVector<T>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::DimensionMismatch {
                context: "latent rows",
                expected: format!("uniform length {m}"),
                got: "ragged rows".into(),
            });
        }
        let mut data = DMatrix::zeros(n, m);
        for (i, row) in rows.iter().enumerate() {
            data.row_mut(i).tr_copy_from(row);
        }
        Self::new(data)
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.data
    }

    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn dims(&self) -> usize {
        self.data.ncols()
    }
}

/// Posterior mean (one row per frame) and per-frame variance.
#[derive(Debug, Clone)]
pub struct BatchPosterior<T: Real> {
    pub mean: DMatrix<T>,
    pub variance: DVector<T>,
}

/// Rejects sequences too long for a batch solve.
pub fn ensure_frame_cap(frames: usize, cap: usize) -> Result<()> {
    if frames > cap {
        return Err(Error::BatchCapExceeded { frames, cap });
    }
    Ok(())
}

/// GP posterior over all frames given `latents` observed with noise
/// `sigma_sq` at the poses behind `gram`.
pub fn batch_posterior<T: Real>(
    gram: &GramMatrix<T>,
    latents: &LatentMatrix<T>,
    sigma_sq: T,
) -> Result<BatchPosterior<T>> {
    let n = gram.n();
    if latents.frames() != n {
        return Err(Error::DimensionMismatch {
            context: "batch_posterior",
            expected: format!("{n} latent rows"),
            got: latents.frames().to_string(),
        });
    }
    check_noise(sigma_sq)?;
    let chol = factor(gram, sigma_sq)?;

    let solved = chol.solve(latents.matrix());
    let mean = gram.matrix() * solved;

    // diag(C A^-1 C) without materializing the full product.
    let back = chol.solve(gram.matrix());
    let mut variance = DVector::zeros(n);
    for i in 0..n {
        let mut acc = T::zero();
        for k in 0..n {
            acc += gram.matrix()[(i, k)] * back[(k, i)];
        }
        variance[i] = gram.gamma_sq() - acc;
    }
    Ok(BatchPosterior { mean, variance })
}

/// Total log marginal likelihood of `latents` under the GP, summed over
/// latent dimensions:
/// `sum_j [-1/2 y_j' A^-1 y_j] - M/2 log det A - N M / 2 log(2 pi)`.
pub fn log_marginal_likelihood<T: Real>(
    gram: &GramMatrix<T>,
    latents: &LatentMatrix<T>,
    sigma_sq: T,
) -> Result<T> {
    let n = gram.n();
    if latents.frames() != n {
        return Err(Error::DimensionMismatch {
            context: "log_marginal_likelihood",
            expected: format!("{n} latent rows"),
            got: latents.frames().to_string(),
        });
    }
    check_noise(sigma_sq)?;
    let chol = factor(gram, sigma_sq)?;

    let y = latents.matrix();
    let solved = chol.solve(y);
    let mut quad = T::zero();
    for (a, b) in y.iter().zip(solved.iter()) {
        quad += *a * *b;
    }
    let mut log_det = T::zero();
    for v in chol.l_dirty().diagonal().iter() {
        log_det += v.ln();
    }
    log_det *= real::<T>(2.0);

    let m = real::<T>(latents.dims() as f64);
    let nm = real::<T>((n * latents.dims()) as f64);
    let half = real::<T>(0.5);
    Ok(-half * quad - half * m * log_det - half * nm * real::<T>(std::f64::consts::TAU).ln())
}

fn check_noise<T: Real>(sigma_sq: T) -> Result<()> {
    if !sigma_sq.is_finite() || sigma_sq < T::zero() {
        return Err(Error::InvalidKernel(format!(
            "sigma_sq must be finite and nonnegative, got {}",
            to_f64(sigma_sq)
        )));
    }
    Ok(())
}

/// Factors `C + sigma_sq I (+ jitter I)`, escalating jitter through
/// [`JITTER_LADDER`] before giving up.
fn factor<T: Real>(gram: &GramMatrix<T>, sigma_sq: T) -> Result<Cholesky<T, Dyn>> {
    let n = gram.n();
    for jitter in JITTER_LADDER {
        let bump = sigma_sq + real::<T>(jitter) * gram.gamma_sq();
        let mut a = gram.matrix().clone();
        for i in 0..n {
            a[(i, i)] += bump;
        }
        if let Some(chol) = Cholesky::new(a) {
            return Ok(chol);
        }
    }
    Err(Error::FactorizationFailure {
        size: n,
        max_jitter: JITTER_LADDER[JITTER_LADDER.len() - 1] * to_f64(gram.gamma_sq()),
    })
}
