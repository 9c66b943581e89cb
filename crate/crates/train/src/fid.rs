//! Fréchet distance between the embedding distributions of real and
//! generated frames, computed with a shrinkage-regularized covariance.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use uwm_core::parallel::pmap;
use uwm_core::params::ParamStore;
use uwm_model::gen_fm::SemanticEncoder;
use uwm_model::ModelError;

use crate::eval::FrameRollout;
use crate::trainer::Pipeline;

#[derive(Debug, Error)]
pub enum FidError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Sample mean and shrinkage-regularized covariance `S + λI`.
pub fn mean_and_cov(
    samples: &[Vec<f64>],
    shrinkage: f64,
) -> Result<(DVector<f64>, DMatrix<f64>), FidError> {
    let n = samples.len();
    if n == 0 {
        return Err(FidError::Shape("no samples".into()));
    }
    let d = samples[0].len();
    if d == 0 || samples.iter().any(|s| s.len() != d) {
        return Err(FidError::Shape("inconsistent embedding widths".into()));
    }
    let mut mu = DVector::zeros(d);
    for s in samples {
        for (i, &v) in s.iter().enumerate() {
            mu[i] += v;
        }
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    if n > 1 {
        for s in samples {
            let x = DVector::from_column_slice(s) - &mu;
            cov.syger(1.0 / (n - 1) as f64, &x, &x, 1.0);
        }
        cov.fill_upper_triangle_with_lower_triangle();
    }
    for i in 0..d {
        cov[(i, i)] += shrinkage;
    }
    Ok((mu, cov))
}

/// Symmetric PSD square root by eigendecomposition. Eigenvalues below the
/// scale-relative tolerance fail; tiny negatives clamp to zero.
fn sqrt_psd(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>, FidError> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, &v| a.max(v.abs()));
    let tol = 1e-9 * scale;
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < -tol {
            return Err(FidError::Numerical(format!(
                "{what} is not positive semi-definite (eigenvalue {v})"
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    let d = DMatrix::from_diagonal(&roots);
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Squared Fréchet (2-Wasserstein) distance between two Gaussians given by
/// their moments.
pub fn frechet_from_moments(
    mu_r: &DVector<f64>,
    cov_r: &DMatrix<f64>,
    mu_g: &DVector<f64>,
    cov_g: &DMatrix<f64>,
) -> Result<f64, FidError> {
    if mu_r.len() != mu_g.len() || cov_r.shape() != cov_g.shape() {
        return Err(FidError::Shape("moment dimensions differ".into()));
    }
    let diff = (mu_r - mu_g).norm_squared();
    let root_r = sqrt_psd(cov_r, "real covariance")?;
    let inner = &root_r * cov_g * &root_r;
    let sym = (&inner + inner.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, &v| a.max(v.abs()));
    let tol = 1e-9 * scale;
    let mut cross = 0.0;
    for &v in eig.eigenvalues.iter() {
        if v < -tol {
            return Err(FidError::Numerical(format!(
                "covariance product is not positive semi-definite (eigenvalue {v})"
            )));
        }
        cross += v.max(0.0).sqrt();
    }
    let fid = diff + cov_r.trace() + cov_g.trace() - 2.0 * cross;
    if fid < -1e-6 * scale.max(1.0) {
        return Err(FidError::Numerical(format!("distance collapsed below zero ({fid})")));
    }
    Ok(fid.max(0.0))
}

/// Squared Fréchet distance between two sample sets.
pub fn frechet_distance(
    real: &[Vec<f64>],
    generated: &[Vec<f64>],
    shrinkage: f64,
) -> Result<f64, FidError> {
    let (mu_r, cov_r) = mean_and_cov(real, shrinkage)?;
    let (mu_g, cov_g) = mean_and_cov(generated, shrinkage)?;
    frechet_from_moments(&mu_r, &cov_r, &mu_g, &cov_g)
}

/// Embedding-space distance between two frame sets (flat `(3,h,w)` rasters)
/// through a frozen semantic encoder. Each set needs at least two frames.
pub fn fid_frames(
    enc: &SemanticEncoder,
    store: &ParamStore,
    real: &[(Vec<f32>, usize, usize)],
    generated: &[(Vec<f32>, usize, usize)],
    shrinkage: f64,
) -> Result<f64, FidError> {
    if real.len() < 2 || generated.len() < 2 {
        return Err(FidError::Shape(format!(
            "need at least two frames per set, got {} real and {} generated",
            real.len(),
            generated.len()
        )));
    }
    let embed = |frames: &[(Vec<f32>, usize, usize)]| {
        pmap(frames.to_vec(), |(px, h, w)| enc.embed_value(store, &px, h, w))
            .into_iter()
            .collect::<Result<Vec<_>, ModelError>>()
    };
    frechet_distance(&embed(real)?, &embed(generated)?, shrinkage)
}

/// Distance between the generated frames of a rollout set and the matching
/// ground-truth frames, through the pipeline's frozen semantic encoder.
/// `None` when generation is disabled.
pub fn fid_proxy(pipe: &Pipeline, rollouts: &[FrameRollout]) -> Result<Option<f64>, FidError> {
    if rollouts.iter().any(|r| r.gen.is_none()) {
        return Ok(None);
    }
    let real: Vec<_> = rollouts.iter().map(|r| r.real.clone()).collect();
    let generated: Vec<_> = rollouts.iter().map(|r| r.gen.clone().unwrap()).collect();
    fid_frames(
        &pipe.models.enc,
        &pipe.store,
        &real,
        &generated,
        pipe.cfg.eval.fid_shrinkage,
    )
    .map(Some)
}
