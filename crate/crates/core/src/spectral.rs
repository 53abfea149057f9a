//! Dense symmetric eigensolver (cyclic Jacobi rotations) and the diffusion
//! contraction factor λ*.

use crate::error::{Error, Result};
use crate::linalg::Mat;

pub const MAX_DIM: usize = 2048;
pub const SYMMETRY_TOLERANCE: f64 = 1e-9;
pub const DEFAULT_ZERO_TOLERANCE: f64 = 1e-8;
const RELATIVE_OFF_DIAGONAL: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    pub zero_tolerance: f64,
}

impl Spectrum {
    pub fn new(mut eigenvalues: Vec<f64>, zero_tolerance: f64) -> Self {
        eigenvalues.sort_by(f64::total_cmp);
        Spectrum {
            eigenvalues,
            zero_tolerance,
        }
    }

    pub fn min(&self) -> Option<f64> {
        self.eigenvalues.first().copied()
    }

    pub fn max(&self) -> Option<f64> {
        self.eigenvalues.last().copied()
    }
}

fn check_input(m: &Mat) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Shape(format!(
            "eigensolver needs a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    if m.rows() > MAX_DIM {
        return Err(Error::TooLarge(m.rows()));
    }
    let (row, col, gap) = m.asymmetry();
    if gap > SYMMETRY_TOLERANCE || gap.is_nan() {
        return Err(Error::NotSymmetric { row, col, gap });
    }
    Ok(())
}

/// Eigen-decomposition `M = Q·diag(λ)·Qᵀ` of a symmetric matrix.
///
/// Returns ascending eigenvalues and the matching eigenvectors as the columns
/// of `Q`. Sweeps stop once the off-diagonal Frobenius norm falls below
/// `1e-12·‖M‖_F`.
pub fn symmetric_eigen(m: &Mat) -> Result<(Vec<f64>, Mat)> {
    check_input(m)?;
    let n = m.rows();
    let mut a = m.clone();
    // mirror the upper triangle so rotations act on an exactly symmetric matrix
    for i in 0..n {
        for j in (i + 1)..n {
            a[(j, i)] = a[(i, j)];
        }
    }
    let mut q = Mat::identity(n);
    let scale = a.frobenius();
    if scale == 0.0 {
        return Ok((vec![0.0; n], q));
    }
    let target = RELATIVE_OFF_DIAGONAL * scale;

    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off < target {
            break;
        }
        for p in 0..n.saturating_sub(1) {
            for r in (p + 1)..n {
                let apq = a[(p, r)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(r, r)] - a[(p, p)]) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, r)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, r)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(r, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(r, k)] = s * apk + c * aqk;
                }
                a[(p, r)] = 0.0;
                a[(r, p)] = 0.0;
                for k in 0..n {
                    let vkp = q[(k, p)];
                    let vkq = q[(k, r)];
                    q[(k, p)] = c * vkp - s * vkq;
                    q[(k, r)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vectors = Mat::zeros(n, n);
    for (new, &old) in order.iter().enumerate() {
        for k in 0..n {
            vectors[(k, new)] = q[(k, old)];
        }
    }
    Ok((values, vectors))
}

pub fn eigenvalues_sym(m: &Mat) -> Result<Spectrum> {
    eigenvalues_sym_with_tolerance(m, DEFAULT_ZERO_TOLERANCE)
}

pub fn eigenvalues_sym_with_tolerance(m: &Mat, zero_tolerance: f64) -> Result<Spectrum> {
    let (values, _) = symmetric_eigen(m)?;
    Ok(Spectrum::new(values, zero_tolerance))
}

/// `max (1 − λ)²` over eigenvalues above the zero tolerance.
pub fn lambda_star(spectrum: &Spectrum) -> Result<f64> {
    spectrum
        .eigenvalues
        .iter()
        .filter(|&&l| l > spectrum.zero_tolerance)
        .map(|&l| (1.0 - l) * (1.0 - l))
        .reduce(f64::max)
        .ok_or(Error::AllZeroSpectrum)
}

/// Applies a scalar function to the spectrum of a symmetric matrix:
/// `Q·diag(f(λ))·Qᵀ`, mirrored so the result is exactly symmetric.
pub fn spectral_map(values: &[f64], vectors: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    let n = values.len();
    let fv: Vec<f64> = values.iter().map(|&l| f(l)).collect();
    let mut out = Mat::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += vectors[(i, k)] * fv[k] * vectors[(j, k)];
            }
            out[(i, j)] = acc;
            out[(j, i)] = acc;
        }
    }
    out
}
