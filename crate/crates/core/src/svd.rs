//! Error-truncated SVD: the smallest orthonormal left basis whose discarded
//! part stays within an absolute Frobenius tolerance.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{HtError, Result};
use crate::tensor::{unfold, DenseTensor};

/// Left singular basis kept by a truncated SVD.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedBasis {
    /// Orthonormal columns, one per retained singular value.
    pub u: DMatrix<f64>,
    /// Retained singular values, descending.
    pub singular_values: Vec<f64>,
    /// Frobenius norm of the discarded part `m - u u^T m`.
    pub discarded_norm: f64,
}

impl TruncatedBasis {
    pub fn rank(&self) -> usize {
        self.u.ncols()
    }
}

/// Truncated SVD with the rank floored at one.
///
/// The rank is the smallest `r` with `sqrt(sum_{i>r} s_i^2) <= eps_abs`.
/// Singular values at the level of round-off (`max(m, n) * eps * s_max`) are
/// treated as zero, so `eps_abs = 0` yields the numerical rank. A zero matrix
/// returns the first canonical vector.
pub fn truncated_svd(m: &DMatrix<f64>, eps_abs: f64) -> Result<TruncatedBasis> {
    truncated_svd_with_min_rank(m, eps_abs, 1)
}

/// Same rule as [`truncated_svd`] with an explicit rank floor; a floor of zero
/// may return an empty basis (used for residual bases during updates).
pub fn truncated_svd_with_min_rank(
    m: &DMatrix<f64>,
    eps_abs: f64,
    min_rank: usize,
) -> Result<TruncatedBasis> {
    if !eps_abs.is_finite() || eps_abs < 0.0 {
        return Err(HtError::InvalidArgument(format!(
            "tolerance must be finite and non-negative, got {eps_abs}"
        )));
    }
    if m.is_empty() {
        return Err(HtError::InvalidArgument("empty matrix".into()));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(HtError::NonFinite);
    }
    let (rows, cols) = m.shape();
    let (u_full, sigma) = left_singular_pairs(m)?;
    let k = sigma.len();

    let s_max = sigma.first().copied().unwrap_or(0.0);
    let noise = rows.max(cols) as f64 * f64::EPSILON * s_max;

    // tail[r] = || s_r, s_{r+1}, ... ||
    let mut tail = vec![0.0; k + 1];
    for r in (0..k).rev() {
        tail[r] = (tail[r + 1] * tail[r + 1] + sigma[r] * sigma[r]).sqrt();
    }
    let mut rank = (0..=k)
        .find(|&r| tail[r] <= eps_abs || r == k || sigma[r] <= noise)
        .unwrap_or(k);
    rank = rank.max(min_rank.min(k));

    if s_max == 0.0 {
        if rank == 0 {
            return Ok(TruncatedBasis {
                u: DMatrix::zeros(rows, 0),
                singular_values: Vec::new(),
                discarded_norm: 0.0,
            });
        }
        // Deterministic canonical basis for an all-zero input.
        return Ok(TruncatedBasis {
            u: DMatrix::identity(rows, rank),
            singular_values: vec![0.0; rank],
            discarded_norm: 0.0,
        });
    }

    Ok(TruncatedBasis {
        u: u_full.columns(0, rank).into_owned(),
        singular_values: sigma[..rank].to_vec(),
        discarded_norm: tail[rank],
    })
}

/// Left singular vectors and singular values, sorted descending (stable on ties).
///
/// The decomposition itself runs in faer: nalgebra 0.35's bidiagonal SVD
/// returns wrong factors for some exactly rank-deficient inputs.
fn left_singular_pairs(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let (rows, cols) = m.shape();
    // Wide inputs: m = R^T Q^T, so the left factor of R^T (rows x rows) is the
    // left factor of m.
    let reduced = if cols > 2 * rows {
        let qr = m.transpose().qr();
        qr.r().transpose()
    } else {
        m.clone()
    };
    let (r, c) = reduced.shape();
    let svd = faer::Mat::<f64>::from_fn(r, c, |i, j| reduced[(i, j)])
        .thin_svd()
        .map_err(|_| HtError::SvdFailed)?;
    let (u, values) = (svd.U(), svd.S().column_vector());
    let k = r.min(c);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let sorted_u = DMatrix::from_fn(rows, k, |i, j| u[(i, order[j])]);
    let sorted_s = order.iter().map(|&i| values[i]).collect();
    Ok((sorted_u, sorted_s))
}

/// Independent truncated SVDs of the mode unfoldings of `c` for each mode in
/// `modes`, all against the same tensor. Bases come back in `modes` order.
pub fn hosvd_layer(c: &DenseTensor, modes: &[usize], eps_nw: f64) -> Result<Vec<TruncatedBasis>> {
    let mut seen = modes.to_vec();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() != modes.len() {
        return Err(HtError::InvalidArgument(format!(
            "duplicate modes in {modes:?}"
        )));
    }
    modes
        .par_iter()
        .map(|&mode| truncated_svd(&unfold(c, mode)?, eps_nw))
        .collect()
}
