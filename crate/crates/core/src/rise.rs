//! Incremental updates: project a new batch onto the existing cores, and if
//! the projection is not accurate enough, grow each core by an orthonormal
//! basis of its residual before appending the batch's latent slices.

use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::bht::{
    check_batch, check_eps, core_matrix, encode, nodewise_tolerance, svd_count, Budget,
    HtRepresentation, LatentBatch,
};
use crate::error::{HtError, Result};
use crate::svd::truncated_svd_with_min_rank;
use crate::tensor::{pad_zeros, unfold, DenseTensor};
use crate::tree::{update_index_set, IndexSet, IndexTarget, NodeId, Ranks, Slot};

pub use crate::bht::adaptive_budget;

/// Overlap allowed between an existing basis and the columns added to it.
pub const EXPANSION_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateReport {
    /// True when the batch was already represented well enough and only the
    /// root grew.
    pub skipped: bool,
    /// Error of the batch projected onto the cores before the update.
    pub proj_error: f64,
    /// Absolute error target `eps_rel * |y|`.
    pub eps_des: f64,
    /// Number of tensors in the batch.
    pub n_tensors: usize,
    /// Columns added to each node.
    pub added_ranks: Ranks,
    /// Ranks after the update.
    pub ranks: Ranks,
    pub seconds: f64,
}

pub fn ht_rise_update(
    h: &HtRepresentation,
    y: &DenseTensor,
    eps_rel: f64,
) -> Result<(HtRepresentation, UpdateReport)> {
    ht_rise_update_with(h, y, eps_rel, Budget::Uniform)
}

/// Folds the batch `y` (`n_1 x ... x n_d x N`) into `h`, returning the
/// updated representation. `h` itself is never modified.
pub fn ht_rise_update_with(
    h: &HtRepresentation,
    y: &DenseTensor,
    eps_rel: f64,
    budget: Budget,
) -> Result<(HtRepresentation, UpdateReport)> {
    let start = Instant::now();
    check_eps(eps_rel)?;
    check_batch(&h.tree, Some(&h.extents), y)?;
    let norm_y = y.frobenius_norm();
    let eps_des = eps_rel * norm_y;
    let n_tensors = *y.shape().last().expect("batch axis");

    let (latent, proj_error) = encode(h, y)?;
    if proj_error <= eps_des {
        let mut out = h.clone();
        out.append_root(&latent)?;
        let report = UpdateReport {
            skipped: true,
            proj_error,
            eps_des,
            n_tensors,
            added_ranks: Ranks::uniform(&h.tree, 0),
            ranks: out.ranks.clone(),
            seconds: start.elapsed().as_secs_f64(),
        };
        return Ok((out, report));
    }

    let tree = h.tree.clone();
    let d = tree.order();
    let mut work = h.clone();
    let mut added = Ranks::uniform(&tree, 0);
    let mut eps_nw = nodewise_tolerance(eps_des, d);
    let mut svd_remaining = svd_count(d);
    let mut c = y.clone();

    for layer in (1..=tree.depth()).rev() {
        let targets: Vec<(usize, NodeId)> = tree
            .frontier(layer)
            .into_iter()
            .enumerate()
            .filter(|(_, id)| id.layer == layer)
            .collect();
        let snapshot = &work;
        let c_ref = &c;
        let new_bases = targets
            .par_iter()
            .map(|&(m, id)| {
                let cm = unfold(c_ref, m)?;
                let r = compute_residual(snapshot, id, &cm)?;
                residual_basis(snapshot, id, &r, c_ref.frobenius_norm(), eps_nw)
            })
            .collect::<Result<Vec<_>>>()?;

        for (&(_, id), u_new) in targets.iter().zip(&new_bases) {
            let k = u_new.ncols();
            if k == 0 {
                continue;
            }
            let (core, sets) =
                expand_core(id, &work.index_sets, &work.cores[id.layer][id.position], u_new)?;
            work.cores[id.layer][id.position] = core;
            work.index_sets = sets;
            work.ranks.set(id, work.ranks.get(id) + k);
            added.set(id, k);

            let (parent, slot) = tree.slot(id)?;
            let padded = pad_with_zeros(&work.cores[parent.layer][parent.position], slot, k)?;
            work.cores[parent.layer][parent.position] = padded;
            work.index_sets = update_index_set(
                &work.index_sets,
                IndexTarget::Node(parent),
                &tree,
                &work.extents,
                &work.ranks,
                work.accumulated,
            )?;
        }
        work.index_sets = update_index_set(
            &work.index_sets,
            IndexTarget::Layer(layer - 1),
            &tree,
            &work.extents,
            &work.ranks,
            work.accumulated,
        )?;
        c = work.project_layer(&c, layer)?;

        svd_remaining -= targets.len();
        if budget == Budget::Adaptive && svd_remaining > 0 {
            let achieved = (norm_y * norm_y - c.norm_sq()).max(0.0);
            eps_nw = adaptive_budget(eps_des, norm_y, achieved, svd_remaining)?;
        }
    }

    work.append_root(&LatentBatch::new(c)?)?;
    let report = UpdateReport {
        skipped: false,
        proj_error,
        eps_des,
        n_tensors,
        added_ranks: added,
        ranks: work.ranks.clone(),
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((work, report))
}

/// `R = C - U (U^T C)` where `U` is the node's core viewed as `alpha x r`.
/// The rows of `c` must match `alpha` from the node's index set.
pub fn compute_residual(h: &HtRepresentation, id: NodeId, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let core = h.core(id)?;
    let entry = h.index_sets.node(id);
    let alpha: usize = entry[..entry.len() - 1].iter().product();
    if c.nrows() != alpha {
        return Err(HtError::ExtentMismatch {
            left: alpha,
            right: c.nrows(),
        });
    }
    let u = core_matrix(core);
    Ok(c - &u * u.tr_mul(c))
}

/// Orthonormal columns spanning the part of the residual that must be kept,
/// re-orthogonalised against the existing basis.
fn residual_basis(
    h: &HtRepresentation,
    id: NodeId,
    r: &DMatrix<f64>,
    c_norm: f64,
    eps_nw: f64,
) -> Result<DMatrix<f64>> {
    let u = core_matrix(h.core(id)?);
    let room = u.nrows() - u.ncols();
    let basis = truncated_svd_with_min_rank(r, eps_nw, 0)?;
    // Directions at round-off level of the working tensor carry no signal.
    let floor = 16.0 * r.nrows().max(r.ncols()) as f64 * f64::EPSILON * c_norm;
    let keep = basis
        .singular_values
        .iter()
        .take_while(|&&s| s > floor)
        .count()
        .min(room);
    if keep == 0 {
        return Ok(DMatrix::zeros(u.nrows(), 0));
    }
    let mut q = basis.u.columns(0, keep).into_owned();
    q -= &u * u.tr_mul(&q);
    Ok(q.qr().q())
}

/// Appends orthonormal columns `u_new` to a node's basis. Leaves grow by
/// columns; transfer cores are viewed as `alpha x r`, extended and folded
/// back. Returns the new core and index set.
pub fn expand_core(
    id: NodeId,
    sets: &IndexSet,
    core: &DenseTensor,
    u_new: &DMatrix<f64>,
) -> Result<(DenseTensor, IndexSet)> {
    let entry = sets.nodes
        .get(id.layer)
        .and_then(|l| l.get(id.position))
        .ok_or(HtError::UnknownNode {
            layer: id.layer,
            position: id.position,
        })?;
    if core.shape() != entry.as_slice() || entry.len() < 2 {
        return Err(HtError::ShapeMismatch(format!(
            "core {:?} does not match its index set {entry:?}",
            core.shape()
        )));
    }
    if u_new.ncols() == 0 {
        return Ok((core.clone(), sets.clone()));
    }
    let u = core_matrix(core);
    if u_new.nrows() != u.nrows() {
        return Err(HtError::ExtentMismatch {
            left: u.nrows(),
            right: u_new.nrows(),
        });
    }
    let overlap = u.tr_mul(u_new).amax();
    let k = u_new.ncols();
    let self_defect = (u_new.tr_mul(u_new) - DMatrix::identity(k, k)).amax();
    if overlap > EXPANSION_TOL || self_defect > EXPANSION_TOL {
        return Err(HtError::NonOrthogonal(overlap.max(self_defect)));
    }
    let mut data = core.data().to_vec();
    data.extend_from_slice(u_new.as_slice());
    let mut shape = entry.clone();
    *shape.last_mut().expect("non-empty") += k;
    let mut out = sets.clone();
    out.nodes[id.layer][id.position] = shape.clone();
    Ok((DenseTensor::new(shape, data)?, out))
}

/// Zero-pads the axis of a 3-way core that couples to the successor in `slot`.
pub fn pad_with_zeros(core: &DenseTensor, slot: Slot, r_extra: usize) -> Result<DenseTensor> {
    if core.order() != 3 {
        return Err(HtError::ShapeMismatch(format!(
            "only 3-way cores have successors, got {:?}",
            core.shape()
        )));
    }
    pad_zeros(core, slot.axis(), r_extra)
}
