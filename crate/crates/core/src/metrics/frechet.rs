//! Fréchet distance between Gaussian summaries.
//!
//! d^2 = |mu_a - mu_b|^2 + tr(Sig_a + Sig_b - 2 (Sig_a Sig_b)^{1/2}).
//! The cross term is evaluated as tr of the square root of the symmetric
//! product A^{1/2} Sig_b A^{1/2}, whose eigenvalues are computed with a
//! cyclic Jacobi sweep; sampling noise can push eigenvalues slightly
//! negative, so values above -1e-8 are clipped to zero and anything below
//! that is a hard error.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2};

const PSD_TOL: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GaussianSummary {
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
}

impl GaussianSummary {
    /// Sample mean and unbiased covariance of row vectors.
    pub fn from_samples(samples: &Array2<f64>) -> Result<Self> {
        let (n, d) = samples.dim();
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "gaussian summary needs at least 2 samples, got {n}"
            )));
        }
        let mean = samples.mean_axis(ndarray::Axis(0)).unwrap();
        let centered = samples - &mean.view().insert_axis(ndarray::Axis(0));
        let cov = centered.t().dot(&centered) / (n - 1) as f64;
        debug_assert_eq!(cov.dim(), (d, d));
        Ok(GaussianSummary { mean, cov })
    }
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues, eigenvectors as columns); A V = V diag(lambda).
pub fn jacobi_eigh(a: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "eigh: matrix must be square");
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[[p, q]] * m[[p, q]];
            }
        }
        if off.sqrt() < 1e-13 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let tau = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[[k, p]], m[[k, q]]);
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[[p, k]], m[[q, k]]);
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[[k, p]], v[[k, q]]);
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eig = Array1::from_shape_fn(n, |i| m[[i, i]]);
    (eig, v)
}

fn check_symmetric(a: &Array2<f64>, what: &str) -> Result<()> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::ShapeMismatch(format!("{what}: covariance not square")));
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[[i, j]] - a[[j, i]]).abs() > PSD_TOL {
                return Err(Error::InvalidArgument(format!(
                    "{what}: covariance not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    Ok(())
}

/// Eigenvalues with the PSD clip applied; errors on eigenvalues below the
/// tolerance.
fn psd_eigenvalues(a: &Array2<f64>, what: &str) -> Result<(Array1<f64>, Array2<f64>)> {
    let (mut eig, v) = jacobi_eigh(a);
    for e in eig.iter_mut() {
        if *e < -PSD_TOL {
            return Err(Error::InvalidArgument(format!(
                "{what}: eigenvalue {e} below PSD tolerance"
            )));
        }
        if *e < 0.0 {
            *e = 0.0;
        }
    }
    Ok((eig, v))
}

/// Symmetric PSD square root via eigendecomposition.
pub fn sqrtm_psd(a: &Array2<f64>) -> Result<Array2<f64>> {
    check_symmetric(a, "sqrtm")?;
    let (eig, v) = psd_eigenvalues(a, "sqrtm")?;
    let sqrt_diag = Array2::from_diag(&eig.mapv(f64::sqrt));
    Ok(v.dot(&sqrt_diag).dot(&v.t()))
}

pub fn frechet_distance(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::ShapeMismatch(format!(
            "frechet: dimension {} vs {}",
            a.mean.len(),
            b.mean.len()
        )));
    }
    check_symmetric(&a.cov, "frechet lhs")?;
    check_symmetric(&b.cov, "frechet rhs")?;
    psd_eigenvalues(&a.cov, "frechet lhs")?;
    psd_eigenvalues(&b.cov, "frechet rhs")?;

    let a_half = sqrtm_psd(&a.cov)?;
    let m = a_half.dot(&b.cov).dot(&a_half);
    let m_sym = (&m + &m.t()) * 0.5;
    let (eig, _) = psd_eigenvalues(&m_sym, "frechet cross term")?;
    let tr_sqrt: f64 = eig.mapv(f64::sqrt).sum();

    let dmu = (&a.mean - &b.mean).mapv(|x| x * x).sum();
    let tr_a = a.cov.diag().sum();
    let tr_b = b.cov.diag().sum();
    Ok((dmu + tr_a + tr_b - 2.0 * tr_sqrt).max(0.0))
}
