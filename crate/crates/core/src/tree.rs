//! Binary dimension trees and the index-set bookkeeping that drives every
//! reshape between layers.
//!
//! Nodes are addressed by `(layer, position)`, both zero-based; layer 0 holds
//! the root. Within a layer, nodes are ordered left to right, and every node
//! covers a contiguous range of tensor dimensions. The children of the
//! transfer node at position `i` sit at positions `2(i - b)` and `2(i - b) + 1`
//! of the next layer, where `b` counts the leaves at or before `i` in its
//! layer.

use serde::{Deserialize, Serialize};

use crate::error::{HtError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId {
    pub layer: usize,
    pub position: usize,
}

impl NodeId {
    pub const ROOT: NodeId = NodeId {
        layer: 0,
        position: 0,
    };

    pub fn new(layer: usize, position: usize) -> Self {
        Self { layer, position }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Root,
    Transfer,
    Leaf,
}

/// Which successor of its parent a node is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Left,
    Right,
}

impl Slot {
    /// Axis of the parent core that contracts with this successor.
    pub fn axis(self) -> usize {
        match self {
            Slot::Left => 0,
            Slot::Right => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: NodeId,
    pub kind: NodeKind,
    pub children: Option<[NodeId; 2]>,
    pub parent: Option<NodeId>,
    /// Tensor dimension (zero-based) for leaves.
    pub leaf_dim: Option<usize>,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.kind == NodeKind::Leaf
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DimensionTree {
    order: usize,
    layers: Vec<Vec<TreeNode>>,
    /// Half-open dimension range covered by each node.
    spans: Vec<Vec<(usize, usize)>>,
}

impl DimensionTree {
    /// The canonical balanced tree for an order-`d` tensor: a node covering
    /// `len` dimensions gives the first `ceil(len / 2)` to its left child.
    pub fn balanced(d: usize) -> Result<Self> {
        if d < 2 {
            return Err(HtError::InvalidTree(format!(
                "need at least two dimensions, got {d}"
            )));
        }
        let mut layers: Vec<Vec<TreeNode>> = Vec::new();
        let mut current: Vec<(usize, usize)> = vec![(0, d)];
        let mut layer = 0;
        let mut parents: Vec<Option<NodeId>> = vec![None];
        while !current.is_empty() {
            let mut next = Vec::new();
            let mut next_parents = Vec::new();
            let mut nodes = Vec::with_capacity(current.len());
            for (position, (&(start, end), parent)) in current.iter().zip(&parents).enumerate() {
                let id = NodeId::new(layer, position);
                if end - start == 1 {
                    nodes.push(TreeNode {
                        id,
                        kind: NodeKind::Leaf,
                        children: None,
                        parent: *parent,
                        leaf_dim: Some(start),
                    });
                    continue;
                }
                let mid = start + (end - start).div_ceil(2);
                let left = NodeId::new(layer + 1, next.len());
                let right = NodeId::new(layer + 1, next.len() + 1);
                next.push((start, mid));
                next.push((mid, end));
                next_parents.push(Some(id));
                next_parents.push(Some(id));
                nodes.push(TreeNode {
                    id,
                    kind: if layer == 0 {
                        NodeKind::Root
                    } else {
                        NodeKind::Transfer
                    },
                    children: Some([left, right]),
                    parent: *parent,
                    leaf_dim: None,
                });
            }
            layers.push(nodes);
            current = next;
            parents = next_parents;
            layer += 1;
        }
        Self::new(d, layers)
    }

    /// Validates an explicitly constructed tree. Every node must cover a
    /// contiguous range of dimensions, ranges must increase left to right,
    /// and positions must follow the successor rule in the module docs.
    pub fn new(order: usize, layers: Vec<Vec<TreeNode>>) -> Result<Self> {
        let bad = |msg: String| Err(HtError::InvalidTree(msg));
        if order < 2 {
            return bad(format!("need at least two dimensions, got {order}"));
        }
        if layers.len() < 2 || layers[0].len() != 1 {
            return bad("the first layer must hold exactly the root".into());
        }
        for (l, nodes) in layers.iter().enumerate() {
            if nodes.is_empty() {
                return bad(format!("layer {l} is empty"));
            }
            for (i, node) in nodes.iter().enumerate() {
                if node.id != NodeId::new(l, i) {
                    return bad(format!("node at ({l}, {i}) carries id {:?}", node.id));
                }
                let expected_kind = match (l, node.children.is_some()) {
                    (0, _) => NodeKind::Root,
                    (_, true) => NodeKind::Transfer,
                    (_, false) => NodeKind::Leaf,
                };
                if node.kind != expected_kind {
                    return bad(format!("node ({l}, {i}) has kind {:?}", node.kind));
                }
                if node.is_leaf() != node.leaf_dim.is_some() {
                    return bad(format!("node ({l}, {i}): leaf_dim iff leaf"));
                }
                if (l == 0) != node.parent.is_none() {
                    return bad(format!("node ({l}, {i}): parent iff not root"));
                }
            }
        }
        // Successor rule and parent round trip.
        for (l, nodes) in layers.iter().enumerate() {
            let mut leaves_so_far = 0;
            let mut expected_children = 0;
            for node in nodes {
                let Some([a, b]) = node.children else {
                    leaves_so_far += 1;
                    continue;
                };
                let alpha = 2 * (node.id.position - leaves_so_far);
                if a != NodeId::new(l + 1, alpha) || b != NodeId::new(l + 1, alpha + 1) {
                    return bad(format!("children of {:?} out of order", node.id));
                }
                for child in [a, b] {
                    let Some(c) = layers.get(child.layer).and_then(|n| n.get(child.position))
                    else {
                        return bad(format!("missing child {child:?}"));
                    };
                    if c.parent != Some(node.id) {
                        return bad(format!("parent of {child:?} does not round-trip"));
                    }
                }
                expected_children += 2;
            }
            let next_len = layers.get(l + 1).map_or(0, Vec::len);
            if expected_children != next_len {
                return bad(format!("layer {} has orphan nodes", l + 1));
            }
        }
        // Spans, bottom-up.
        let mut spans: Vec<Vec<(usize, usize)>> =
            layers.iter().map(|n| vec![(0, 0); n.len()]).collect();
        let mut dims_seen = vec![false; order];
        for l in (0..layers.len()).rev() {
            for (i, node) in layers[l].iter().enumerate() {
                spans[l][i] = match (node.leaf_dim, node.children) {
                    (Some(dim), _) => {
                        if dim >= order || dims_seen[dim] {
                            return bad(format!("leaf dimension {dim} invalid or repeated"));
                        }
                        dims_seen[dim] = true;
                        (dim, dim + 1)
                    }
                    (None, Some([a, b])) => {
                        let left = spans[a.layer][a.position];
                        let right = spans[b.layer][b.position];
                        if left.1 != right.0 {
                            return bad(format!("children of {:?} are not adjacent", node.id));
                        }
                        (left.0, right.1)
                    }
                    (None, None) => unreachable!(),
                };
            }
            if spans[l].windows(2).any(|w| w[0].1 > w[1].0) {
                return bad(format!("layer {l} is not ordered by dimension"));
            }
        }
        if dims_seen.iter().any(|s| !s) || spans[0][0] != (0, order) {
            return bad("leaves do not cover every dimension".into());
        }
        Ok(Self {
            order,
            layers,
            spans,
        })
    }

    /// Number of tensor dimensions (batch excluded).
    pub fn order(&self) -> usize {
        self.order
    }

    /// Index of the deepest layer.
    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn layers(&self) -> &[Vec<TreeNode>] {
        &self.layers
    }

    pub fn layer(&self, layer: usize) -> &[TreeNode] {
        &self.layers[layer]
    }

    pub fn node(&self, id: NodeId) -> Result<&TreeNode> {
        self.layers
            .get(id.layer)
            .and_then(|l| l.get(id.position))
            .ok_or(HtError::UnknownNode {
                layer: id.layer,
                position: id.position,
            })
    }

    pub fn nodes(&self) -> impl Iterator<Item = &TreeNode> {
        self.layers.iter().flatten()
    }

    pub fn node_count(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    /// Dimensions covered by a node, as a half-open range.
    pub fn span(&self, id: NodeId) -> (usize, usize) {
        self.spans[id.layer][id.position]
    }

    /// Number of truncated SVDs one leaves-to-root sweep performs.
    pub fn svd_count(&self) -> usize {
        self.node_count() - 1
    }

    /// Count of leaf nodes at or before `position` within `layer`.
    pub fn leaves_up_to(&self, layer: usize, position: usize) -> usize {
        self.layers[layer][..=position]
            .iter()
            .filter(|n| n.is_leaf())
            .count()
    }

    /// Which successor of its parent `id` is.
    pub fn slot(&self, id: NodeId) -> Result<(NodeId, Slot)> {
        let node = self.node(id)?;
        let parent = node.parent.ok_or_else(|| {
            HtError::InvalidArgument("the root has no parent".into())
        })?;
        let [left, _] = self.node(parent)?.children.expect("parents have children");
        Ok((parent, if left == id { Slot::Left } else { Slot::Right }))
    }

    /// Modes of the working tensor at `layer`: the layer's own nodes plus any
    /// leaves that sit higher in the tree, ordered by dimension. For the
    /// deepest layer this is one entry per tensor dimension.
    pub fn frontier(&self, layer: usize) -> Vec<NodeId> {
        let mut ids: Vec<NodeId> = self.layers[layer].iter().map(|n| n.id).collect();
        for upper in &self.layers[1..layer.max(1)] {
            ids.extend(upper.iter().filter(|n| n.is_leaf()).map(|n| n.id));
        }
        ids.sort_by_key(|&id| self.span(id).0);
        ids
    }

    /// Position of `id` among the modes of the working tensor at its layer.
    pub fn mode_of(&self, id: NodeId) -> usize {
        self.frontier(id.layer)
            .iter()
            .position(|&x| x == id)
            .expect("a node belongs to its own layer's frontier")
    }
}

/// HT ranks: the extent of the edge from each non-root node to its parent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ranks {
    /// `layers[l][i]` is the rank of node `(l, i)`; the root entry is unused (0).
    pub layers: Vec<Vec<usize>>,
}

impl Ranks {
    pub fn uniform(tree: &DimensionTree, r: usize) -> Self {
        let layers = tree
            .layers()
            .iter()
            .enumerate()
            .map(|(l, nodes)| vec![if l == 0 { 0 } else { r }; nodes.len()])
            .collect();
        Self { layers }
    }

    pub fn get(&self, id: NodeId) -> usize {
        self.layers[id.layer][id.position]
    }

    pub fn set(&mut self, id: NodeId, r: usize) {
        self.layers[id.layer][id.position] = r;
    }

    pub fn max(&self) -> usize {
        self.layers.iter().flatten().copied().max().unwrap_or(0)
    }
}

fn children_ranks(tree: &DimensionTree, ranks: &Ranks, id: NodeId) -> Result<[usize; 2]> {
    let node = tree.node(id)?;
    let [a, b] = node
        .children
        .ok_or_else(|| HtError::InvalidArgument(format!("{id:?} has no successors")))?;
    Ok([ranks.get(a), ranks.get(b)])
}

/// Extent of a frontier mode before projection: `n` for a leaf, the product
/// of the successor ranks otherwise.
pub fn input_extent(
    tree: &DimensionTree,
    extents: &[usize],
    ranks: &Ranks,
    id: NodeId,
) -> Result<usize> {
    let node = tree.node(id)?;
    match node.leaf_dim {
        Some(dim) => Ok(extents[dim]),
        None => Ok(children_ranks(tree, ranks, id)?.iter().product()),
    }
}

/// Shape of the working tensor entering `layer` (batch extent appended).
pub fn layer_input_shape(
    tree: &DimensionTree,
    extents: &[usize],
    ranks: &Ranks,
    layer: usize,
    batch: usize,
) -> Result<Vec<usize>> {
    let mut shape = tree
        .frontier(layer)
        .into_iter()
        .map(|id| input_extent(tree, extents, ranks, id))
        .collect::<Result<Vec<_>>>()?;
    shape.push(batch);
    Ok(shape)
}

/// Shape of the working tensor after projecting `layer` onto its cores:
/// the layer's own modes carry ranks, leaves from higher layers keep `n`.
pub fn layer_projected_shape(
    tree: &DimensionTree,
    extents: &[usize],
    ranks: &Ranks,
    layer: usize,
    batch: usize,
) -> Result<Vec<usize>> {
    let mut shape = tree
        .frontier(layer)
        .into_iter()
        .map(|id| {
            if id.layer == layer {
                Ok(ranks.get(id))
            } else {
                input_extent(tree, extents, ranks, id)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    shape.push(batch);
    Ok(shape)
}

/// Extents of the core at a node: `[n, r]` for leaves, `[r_left, r_right, r]`
/// for transfer nodes and `[r_left, r_right, batch]` for the root.
pub fn node_extents(
    tree: &DimensionTree,
    extents: &[usize],
    ranks: &Ranks,
    id: NodeId,
    batch: usize,
) -> Result<Vec<usize>> {
    let node = tree.node(id)?;
    Ok(match node.kind {
        NodeKind::Leaf => vec![extents[node.leaf_dim.expect("leaf")], ranks.get(id)],
        NodeKind::Transfer => {
            let [a, b] = children_ranks(tree, ranks, id)?;
            vec![a, b, ranks.get(id)]
        }
        NodeKind::Root => {
            let [a, b] = children_ranks(tree, ranks, id)?;
            vec![a, b, batch]
        }
    })
}

/// Per-layer and per-node extent lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexSet {
    /// Input extents of each layer's working tensor, batch extent last.
    pub layers: Vec<Vec<usize>>,
    /// Core extents of every node, indexed `[layer][position]`.
    pub nodes: Vec<Vec<Vec<usize>>>,
}

/// What [`update_index_set`] recomputes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexTarget {
    Node(NodeId),
    Layer(usize),
}

impl IndexSet {
    pub fn build(
        tree: &DimensionTree,
        extents: &[usize],
        ranks: &Ranks,
        batch: usize,
    ) -> Result<Self> {
        check_extents(tree, extents)?;
        let layers = (0..tree.layers().len())
            .map(|l| layer_input_shape(tree, extents, ranks, l, batch))
            .collect::<Result<Vec<_>>>()?;
        let nodes = tree
            .layers()
            .iter()
            .map(|nodes| {
                nodes
                    .iter()
                    .map(|n| node_extents(tree, extents, ranks, n.id, batch))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers, nodes })
    }

    pub fn node(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.layer][id.position]
    }
}

fn check_extents(tree: &DimensionTree, extents: &[usize]) -> Result<()> {
    if extents.len() != tree.order() {
        return Err(HtError::ShapeMismatch(format!(
            "tree of order {} given {} extents",
            tree.order(),
            extents.len()
        )));
    }
    Ok(())
}

/// Returns a copy of `sets` with the target node or layer recomputed from
/// the current ranks.
pub fn update_index_set(
    sets: &IndexSet,
    target: IndexTarget,
    tree: &DimensionTree,
    extents: &[usize],
    ranks: &Ranks,
    batch: usize,
) -> Result<IndexSet> {
    check_extents(tree, extents)?;
    let mut out = sets.clone();
    match target {
        IndexTarget::Node(id) => {
            let entry = node_extents(tree, extents, ranks, id, batch)?;
            out.nodes[id.layer][id.position] = entry;
        }
        IndexTarget::Layer(layer) => {
            if layer >= tree.layers().len() {
                return Err(HtError::UnknownNode {
                    layer,
                    position: 0,
                });
            }
            out.layers[layer] = layer_input_shape(tree, extents, ranks, layer, batch)?;
        }
    }
    Ok(out)
}
