//! Batch hierarchical Tucker representation: construction from a full batch,
//! projection into the latent root space and reconstruction from it.
//!
//! The batch axis is always last. It is carried by the third axis of the root
//! core, so each tensor in the accumulation owns one `r_left x r_right` root
//! slice.

use nalgebra::DMatrix;

use crate::error::{HtError, Result};
use crate::svd::{hosvd_layer, TruncatedBasis};
use crate::tensor::{concat, mode_product, slice_mode, DenseTensor};
use crate::tree::{
    layer_input_shape, layer_projected_shape, DimensionTree, IndexSet, NodeId, NodeKind, Ranks,
};

/// Orthonormality tolerance for stored cores.
pub const ORTHO_TOL: f64 = 1e-10;

/// How the absolute error budget is split across the truncated SVDs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Budget {
    /// Every SVD gets `eps_abs / sqrt(2d - 2)`.
    #[default]
    Uniform,
    /// After each layer, the unspent budget is redistributed over the
    /// remaining SVDs.
    Adaptive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HtRepresentation {
    pub(crate) tree: DimensionTree,
    pub(crate) extents: Vec<usize>,
    pub(crate) ranks: Ranks,
    /// `cores[layer][position]`; leaves `[n, r]`, transfer `[r_l, r_r, r]`,
    /// root `[r_l, r_r, accumulated]`.
    pub(crate) cores: Vec<Vec<DenseTensor>>,
    pub(crate) index_sets: IndexSet,
    pub(crate) accumulated: usize,
    pub(crate) epsilon_rel: f64,
}

/// Root slices encoding a batch of tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch {
    /// `r_left x r_right x N`.
    pub slices: DenseTensor,
}

impl LatentBatch {
    pub fn new(slices: DenseTensor) -> Result<Self> {
        if slices.order() != 3 {
            return Err(HtError::ShapeMismatch(format!(
                "latent slices must be 3-way, got {:?}",
                slices.shape()
            )));
        }
        if !slices.is_finite() {
            return Err(HtError::NonFinite);
        }
        Ok(Self { slices })
    }

    pub fn ranks(&self) -> (usize, usize) {
        (self.slices.shape()[0], self.slices.shape()[1])
    }

    pub fn len(&self) -> usize {
        self.slices.shape()[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn norm(&self) -> f64 {
        self.slices.frobenius_norm()
    }

    /// Zero-pads the first two axes up to the given ranks. Latents encoded
    /// before an update decode identically after padding.
    pub fn pad_to(&self, ranks: (usize, usize)) -> Result<Self> {
        let (a, b) = self.ranks();
        if ranks.0 < a || ranks.1 < b {
            return Err(HtError::RankMismatch {
                expected: ranks,
                actual: (a, b),
            });
        }
        let s = crate::tensor::pad_zeros(&self.slices, 0, ranks.0 - a)?;
        let s = crate::tensor::pad_zeros(&s, 1, ranks.1 - b)?;
        Ok(Self { slices: s })
    }
}

/// Norms recorded while sweeping one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub layer: usize,
    /// Truncation tolerance used for every SVD on this layer.
    pub tolerance: f64,
    /// Norm of the working tensor entering the layer.
    pub input_norm: f64,
    /// Norm after projecting onto the layer's cores.
    pub projected_norm: f64,
    /// Discarded Frobenius norm per node, in position order.
    pub discarded: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildTrace {
    pub eps_abs: f64,
    /// Deepest layer first.
    pub layers: Vec<LayerTrace>,
}

pub(crate) fn check_eps(eps_rel: f64) -> Result<()> {
    if !eps_rel.is_finite() || eps_rel < 0.0 {
        return Err(HtError::InvalidArgument(format!(
            "relative tolerance must be finite and non-negative, got {eps_rel}"
        )));
    }
    Ok(())
}

pub(crate) fn check_batch(tree: &DimensionTree, extents: Option<&[usize]>, y: &DenseTensor) -> Result<()> {
    let d = tree.order();
    if y.order() != d + 1 {
        return Err(HtError::ShapeMismatch(format!(
            "expected {} modes (batch last) for a tree of order {d}, got {:?}",
            d + 1,
            y.shape()
        )));
    }
    if let Some(extents) = extents {
        if &y.shape()[..d] != extents {
            return Err(HtError::ShapeMismatch(format!(
                "tensor extents {:?} do not match representation extents {extents:?}",
                &y.shape()[..d]
            )));
        }
    }
    if !y.is_finite() {
        return Err(HtError::NonFinite);
    }
    Ok(())
}

/// Number of truncated SVDs in one sweep over an order-`d` tree.
pub fn svd_count(d: usize) -> usize {
    2 * d - 2
}

/// Per-SVD tolerance under the uniform split.
pub fn nodewise_tolerance(eps_abs: f64, d: usize) -> f64 {
    eps_abs / (svd_count(d) as f64).sqrt()
}

/// Leaves-to-root decomposition with the uniform budget.
pub fn bht_l2r(y: &DenseTensor, tree: &DimensionTree, eps_rel: f64) -> Result<HtRepresentation> {
    Ok(bht_l2r_with(y, tree, eps_rel, Budget::Uniform)?.0)
}

/// Leaves-to-root decomposition of a batch `n_1 x ... x n_d x N`.
///
/// Each layer runs one truncated SVD per node on the unfoldings of the same
/// working tensor, projects onto the kept bases, and merges sibling modes for
/// the next layer. The last working tensor becomes the root.
pub fn bht_l2r_with(
    y: &DenseTensor,
    tree: &DimensionTree,
    eps_rel: f64,
    budget: Budget,
) -> Result<(HtRepresentation, BuildTrace)> {
    check_eps(eps_rel)?;
    check_batch(tree, None, y)?;
    let d = tree.order();
    let extents = y.shape()[..d].to_vec();
    let batch = y.shape()[d];
    let norm_y = y.frobenius_norm();
    let eps_abs = eps_rel * norm_y;
    let mut eps_nw = nodewise_tolerance(eps_abs, d);
    let mut svd_remaining = svd_count(d);

    let mut ranks = Ranks::uniform(tree, 0);
    let mut cores: Vec<Vec<DenseTensor>> = tree.layers().iter().map(|_| Vec::new()).collect();
    let mut trace = Vec::with_capacity(tree.depth());
    let mut c = y.clone();

    for layer in (1..=tree.depth()).rev() {
        let frontier = tree.frontier(layer);
        let modes: Vec<usize> = (0..frontier.len())
            .filter(|&m| frontier[m].layer == layer)
            .collect();
        let bases = hosvd_layer(&c, &modes, eps_nw)?;
        let input_norm = c.frobenius_norm();
        let mut layer_cores = Vec::with_capacity(modes.len());
        for (&m, basis) in modes.iter().zip(&bases) {
            let id = frontier[m];
            ranks.set(id, basis.rank());
            c = mode_product(&c, m, &basis.u)?;
            layer_cores.push(core_from_basis(tree, &ranks, &extents, id, basis)?);
        }
        cores[layer] = layer_cores;
        let projected_norm = c.frobenius_norm();
        trace.push(LayerTrace {
            layer,
            tolerance: eps_nw,
            input_norm,
            projected_norm,
            discarded: bases.iter().map(|b| b.discarded_norm).collect(),
        });
        c = c.into_shape(next_shape(tree, &extents, &ranks, layer, batch)?)?;

        svd_remaining -= modes.len();
        if budget == Budget::Adaptive && svd_remaining > 0 {
            let achieved = (norm_y * norm_y - projected_norm * projected_norm).max(0.0);
            eps_nw = adaptive_budget(eps_abs, norm_y, achieved, svd_remaining)?;
        }
    }
    cores[0] = vec![c];
    let index_sets = IndexSet::build(tree, &extents, &ranks, batch)?;
    let h = HtRepresentation {
        tree: tree.clone(),
        extents,
        ranks,
        cores,
        index_sets,
        accumulated: batch,
        epsilon_rel: eps_rel,
    };
    Ok((
        h,
        BuildTrace {
            eps_abs,
            layers: trace,
        },
    ))
}

/// Tolerance for the next SVDs given what has already been spent:
/// `sqrt(eps_abs^2 - achieved) / sqrt(svd_remaining)`.
///
/// `achieved_err_sq` may exceed `eps_abs^2` by round-off relative to
/// `norm_y^2`; beyond that the budget is exhausted.
pub fn adaptive_budget(
    eps_abs: f64,
    norm_y: f64,
    achieved_err_sq: f64,
    svd_remaining: usize,
) -> Result<f64> {
    if svd_remaining == 0 {
        return Err(HtError::InvalidArgument("no SVDs remaining".into()));
    }
    let budget_sq = eps_abs * eps_abs;
    let slack = 64.0 * f64::EPSILON * norm_y * norm_y;
    if achieved_err_sq > budget_sq + slack {
        return Err(HtError::BudgetExhausted {
            achieved: achieved_err_sq.sqrt(),
            budget: eps_abs,
        });
    }
    let remaining = (budget_sq - achieved_err_sq).max(0.0).sqrt();
    Ok(remaining / (svd_remaining as f64).sqrt())
}

fn core_from_basis(
    tree: &DimensionTree,
    ranks: &Ranks,
    extents: &[usize],
    id: NodeId,
    basis: &TruncatedBasis,
) -> Result<DenseTensor> {
    let node = tree.node(id)?;
    let shape = match node.leaf_dim {
        Some(dim) => vec![extents[dim], basis.rank()],
        None => {
            let [a, b] = node.children.expect("transfer nodes have children");
            vec![ranks.get(a), ranks.get(b), basis.rank()]
        }
    };
    DenseTensor::new(shape, basis.u.as_slice().to_vec())
}

/// Shape of the working tensor after a layer has been projected and its
/// sibling modes merged.
pub(crate) fn next_shape(
    tree: &DimensionTree,
    extents: &[usize],
    ranks: &Ranks,
    layer: usize,
    batch: usize,
) -> Result<Vec<usize>> {
    if layer == 1 {
        let [a, b] = root_children(tree);
        Ok(vec![ranks.get(a), ranks.get(b), batch])
    } else {
        layer_input_shape(tree, extents, ranks, layer - 1, batch)
    }
}

fn root_children(tree: &DimensionTree) -> [NodeId; 2] {
    tree.layer(0)[0].children.expect("root has two successors")
}

/// `alpha x r` view of a non-root core as a matrix.
pub(crate) fn core_matrix(core: &DenseTensor) -> DMatrix<f64> {
    let r = *core.shape().last().expect("cores are never scalars");
    let alpha = core.len() / r.max(1);
    DMatrix::from_column_slice(alpha, r, core.data())
}

impl HtRepresentation {
    /// Assembles a representation from stored cores, deriving ranks from the
    /// core shapes and checking shapes and orthonormality.
    pub fn from_parts(
        tree: DimensionTree,
        extents: Vec<usize>,
        cores: Vec<Vec<DenseTensor>>,
        epsilon_rel: f64,
    ) -> Result<Self> {
        check_eps(epsilon_rel)?;
        if extents.len() != tree.order() || extents.contains(&0) {
            return Err(HtError::ShapeMismatch(format!(
                "extents {extents:?} do not fit a tree of order {}",
                tree.order()
            )));
        }
        if cores.len() != tree.layers().len()
            || cores.iter().zip(tree.layers()).any(|(c, l)| c.len() != l.len())
        {
            return Err(HtError::Format("core layout does not match the tree".into()));
        }
        let mut ranks = Ranks::uniform(&tree, 0);
        for node in tree.nodes().filter(|n| n.kind != NodeKind::Root) {
            let core = &cores[node.id.layer][node.id.position];
            ranks.set(node.id, *core.shape().last().unwrap_or(&0));
        }
        let root = &cores[0][0];
        if root.order() != 3 {
            return Err(HtError::Format(format!("root core has shape {:?}", root.shape())));
        }
        let accumulated = root.shape()[2];
        let index_sets = IndexSet::build(&tree, &extents, &ranks, accumulated)?;
        for node in tree.nodes() {
            let core = &cores[node.id.layer][node.id.position];
            if core.shape() != index_sets.node(node.id) {
                return Err(HtError::Format(format!(
                    "core {:?} has shape {:?}, expected {:?}",
                    node.id,
                    core.shape(),
                    index_sets.node(node.id)
                )));
            }
            if !core.is_finite() {
                return Err(HtError::NonFinite);
            }
        }
        let h = Self {
            tree,
            extents,
            ranks,
            cores,
            index_sets,
            accumulated,
            epsilon_rel,
        };
        h.validate(ORTHO_TOL)?;
        Ok(h)
    }

    pub fn tree(&self) -> &DimensionTree {
        &self.tree
    }

    /// Extents `n_1 .. n_d` of a single tensor.
    pub fn extents(&self) -> &[usize] {
        &self.extents
    }

    pub fn ranks(&self) -> &Ranks {
        &self.ranks
    }

    pub fn rank(&self, id: NodeId) -> usize {
        self.ranks.get(id)
    }

    pub fn core(&self, id: NodeId) -> Result<&DenseTensor> {
        self.tree.node(id)?;
        Ok(&self.cores[id.layer][id.position])
    }

    pub fn cores(&self) -> &[Vec<DenseTensor>] {
        &self.cores
    }

    pub fn root(&self) -> &DenseTensor {
        &self.cores[0][0]
    }

    pub fn index_sets(&self) -> &IndexSet {
        &self.index_sets
    }

    /// Number of tensors accumulated so far.
    pub fn accumulated(&self) -> usize {
        self.accumulated
    }

    pub fn epsilon_rel(&self) -> f64 {
        self.epsilon_rel
    }

    /// Ranks of the two root successors.
    pub fn root_ranks(&self) -> (usize, usize) {
        let [a, b] = root_children(&self.tree);
        (self.ranks.get(a), self.ranks.get(b))
    }

    /// Total number of stored floating point values.
    pub fn parameter_count(&self) -> usize {
        self.cores.iter().flatten().map(DenseTensor::len).sum()
    }

    /// Largest `max |U^T U - I|` over all non-root cores.
    pub fn orthonormality_defect(&self) -> f64 {
        self.tree
            .nodes()
            .filter(|n| n.kind != NodeKind::Root)
            .map(|n| gram_defect(&self.cores[n.id.layer][n.id.position]))
            .fold(0.0, f64::max)
    }

    /// Checks that every leaf and reshaped transfer core has orthonormal columns.
    pub fn validate(&self, tol: f64) -> Result<()> {
        for node in self.tree.nodes().filter(|n| n.kind != NodeKind::Root) {
            let deviation = gram_defect(&self.cores[node.id.layer][node.id.position]);
            if deviation.is_nan() || deviation > tol {
                return Err(HtError::CoreNotOrthonormal {
                    layer: node.id.layer,
                    position: node.id.position,
                    deviation,
                });
            }
        }
        Ok(())
    }

    /// Root slices `[start, end)` as a latent batch.
    pub fn latents(&self, start: usize, end: usize) -> Result<LatentBatch> {
        if end > self.accumulated || start >= end {
            return Err(HtError::IndexOutOfRange {
                index: end.max(start),
                len: self.accumulated,
            });
        }
        LatentBatch::new(slice_mode(self.root(), 2, start, end)?)
    }

    pub(crate) fn append_root(&mut self, latent: &LatentBatch) -> Result<()> {
        let root = concat(&self.cores[0][0], &latent.slices, 2)?;
        self.accumulated = root.shape()[2];
        self.cores[0][0] = root;
        self.index_sets = IndexSet::build(&self.tree, &self.extents, &self.ranks, self.accumulated)?;
        Ok(())
    }

    /// Projects the working tensor of `layer` onto that layer's current cores
    /// and merges sibling modes for the layer above.
    pub(crate) fn project_layer(&self, c: &DenseTensor, layer: usize) -> Result<DenseTensor> {
        let batch = *c.shape().last().expect("working tensors carry the batch axis");
        let mut out = c.clone();
        for (m, id) in self.tree.frontier(layer).into_iter().enumerate() {
            if id.layer == layer {
                out = mode_product(&out, m, &core_matrix(&self.cores[layer][id.position]))?;
            }
        }
        out.into_shape(next_shape(&self.tree, &self.extents, &self.ranks, layer, batch)?)
    }
}

fn gram_defect(core: &DenseTensor) -> f64 {
    let u = core_matrix(core);
    let gram = u.tr_mul(&u);
    let n = gram.nrows();
    (gram - DMatrix::identity(n, n)).amax()
}

/// Projects a batch onto the representation's cores.
///
/// Returns the latent slices and the projection error
/// `sqrt(max(0, |y|^2 - |latent|^2))`.
///
/// The difference of squares loses all digits once the error drops below
/// about `sqrt(eps) |y|`; there the residual is formed explicitly instead.
pub fn encode(h: &HtRepresentation, y: &DenseTensor) -> Result<(LatentBatch, f64)> {
    check_batch(&h.tree, Some(&h.extents), y)?;
    let mut c = y.clone();
    for layer in (1..=h.tree.depth()).rev() {
        c = h.project_layer(&c, layer)?;
    }
    let latent = LatentBatch::new(c)?;
    let norm_sq = y.norm_sq();
    let err_sq = (norm_sq - latent.slices.norm_sq()).max(0.0);
    let err = if err_sq < f64::EPSILON.sqrt() * norm_sq {
        decode(h, &latent)?.sub(y)?.frobenius_norm()
    } else {
        err_sq.sqrt()
    };
    Ok((latent, err))
}

/// Root-to-leaves contraction of latent slices to full tensors
/// `n_1 x ... x n_d x N`.
pub fn decode(h: &HtRepresentation, latent: &LatentBatch) -> Result<DenseTensor> {
    let expected = h.root_ranks();
    if latent.ranks() != expected {
        return Err(HtError::RankMismatch {
            expected,
            actual: latent.ranks(),
        });
    }
    let batch = latent.len();
    let depth = h.tree.depth();
    let mut c = latent.slices.clone();
    for layer in 1..=depth {
        for (m, id) in h.tree.frontier(layer).into_iter().enumerate() {
            if id.layer == layer {
                let u = core_matrix(&h.cores[layer][id.position]);
                c = mode_product(&c, m, &u.transpose())?;
            }
        }
        if layer < depth {
            c = c.into_shape(layer_projected_shape(
                &h.tree,
                &h.extents,
                &h.ranks,
                layer + 1,
                batch,
            )?)?;
        }
    }
    Ok(c)
}

/// Reconstructs the `m`-th accumulated tensor (zero-based), shape `n_1 x ... x n_d`.
pub fn reconstruct_slice(h: &HtRepresentation, m: usize) -> Result<DenseTensor> {
    if m >= h.accumulated {
        return Err(HtError::IndexOutOfRange {
            index: m,
            len: h.accumulated,
        });
    }
    let full = decode(h, &h.latents(m, m + 1)?)?;
    full.into_shape(h.extents.clone())
}
