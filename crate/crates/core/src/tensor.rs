//! Dense d-way tensors and the exact algebra the decompositions are built from.
//!
//! Storage is canonical first-index-fastest (column-major), so a tensor of
//! shape `[a, b, c]` read as a matrix of `a*b` rows and `c` columns is the
//! same buffer nalgebra uses for a `DMatrix`. Every unfolding, reshape and
//! contraction below relies on that convention.

use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut};

use crate::error::{HtError, Result};

/// A dense tensor of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn product(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_extents(shape: &[usize]) -> Result<()> {
    if shape.contains(&0) {
        return Err(HtError::ShapeMismatch(format!(
            "all extents must be positive, got {shape:?}"
        )));
    }
    Ok(())
}

impl DenseTensor {
    /// Wraps `data` (first index fastest) under `shape`.
    ///
    /// An empty shape denotes a scalar and holds exactly one value.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_extents(&shape)?;
        if product(&shape) != data.len() {
            return Err(HtError::ShapeMismatch(format!(
                "shape {shape:?} needs {} values, got {}",
                product(&shape),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        check_extents(&shape)?;
        let len = product(&shape);
        Ok(Self {
            shape,
            data: vec![0.0; len],
        })
    }

    /// Builds a tensor by evaluating `f` at every multi-index.
    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        check_extents(&shape)?;
        let len = product(&shape);
        let mut data = Vec::with_capacity(len);
        let mut index = vec![0usize; shape.len()];
        for _ in 0..len {
            data.push(f(&index));
            increment(&mut index, &shape);
        }
        Ok(Self { shape, data })
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        Self {
            shape: vec![m.nrows(), m.ncols()],
            data: m.as_slice().to_vec(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn order(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut offset = 0;
        let mut stride = 1;
        for (&i, &n) in index.iter().zip(&self.shape) {
            debug_assert!(i < n);
            offset += i * stride;
            stride *= n;
        }
        offset
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let offset = self.offset(index);
        self.data[offset] = value;
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Reads the buffer as a `rows x (len / rows)` column-major matrix.
    pub fn as_matrix(&self, rows: usize) -> Result<DMatrixView<'_, f64>> {
        if rows == 0 || !self.data.len().is_multiple_of(rows) {
            return Err(HtError::ShapeMismatch(format!(
                "cannot view {} values as {rows} rows",
                self.data.len()
            )));
        }
        Ok(DMatrixView::from_slice(
            &self.data,
            rows,
            self.data.len() / rows,
        ))
    }

    /// Consumes the tensor and reinterprets its buffer under `shape`.
    pub fn into_shape(self, shape: Vec<usize>) -> Result<Self> {
        check_extents(&shape)?;
        if product(&shape) != self.data.len() {
            return Err(HtError::ShapeMismatch(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    /// Element-wise difference.
    pub fn sub(&self, other: &DenseTensor) -> Result<DenseTensor> {
        if self.shape != other.shape {
            return Err(HtError::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(DenseTensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn map_inplace(&mut self, f: impl Fn(f64) -> f64) {
        for x in &mut self.data {
            *x = f(*x);
        }
    }
}

/// Advances a first-index-fastest multi-index; wraps to zero after the last one.
pub(crate) fn increment(index: &mut [usize], shape: &[usize]) {
    for (i, n) in index.iter_mut().zip(shape) {
        *i += 1;
        if *i < *n {
            return;
        }
        *i = 0;
    }
}

fn check_mode(t: &DenseTensor, mode: usize) -> Result<()> {
    if mode >= t.order() {
        return Err(HtError::ModeOutOfRange {
            mode,
            order: t.order(),
        });
    }
    Ok(())
}

/// Splits the shape around `mode` into (product before, extent, product after).
fn split_at_mode(shape: &[usize], mode: usize) -> (usize, usize, usize) {
    (
        product(&shape[..mode]),
        shape[mode],
        product(&shape[mode + 1..]),
    )
}

/// Mode-`mode` matricization: `n_mode` rows, remaining indices (canonical
/// order, `mode` removed) enumerate the columns.
pub fn unfold(t: &DenseTensor, mode: usize) -> Result<DMatrix<f64>> {
    check_mode(t, mode)?;
    let (left, n, right) = split_at_mode(&t.shape, mode);
    if left == 1 {
        return Ok(DMatrix::from_column_slice(n, right, &t.data));
    }
    let mut m = DMatrix::zeros(n, left * right);
    for r in 0..right {
        for j in 0..n {
            let src = &t.data[left * (j + n * r)..left * (j + n * r + 1)];
            for (l, &v) in src.iter().enumerate() {
                m[(j, l + left * r)] = v;
            }
        }
    }
    Ok(m)
}

/// Inverse of [`unfold`].
pub fn fold(m: &DMatrix<f64>, shape: &[usize], mode: usize) -> Result<DenseTensor> {
    check_extents(shape)?;
    if mode >= shape.len() {
        return Err(HtError::ModeOutOfRange {
            mode,
            order: shape.len(),
        });
    }
    let (left, n, right) = split_at_mode(shape, mode);
    if m.nrows() != n || m.ncols() != left * right {
        return Err(HtError::ShapeMismatch(format!(
            "{}x{} matrix cannot fold into {shape:?} along mode {mode}",
            m.nrows(),
            m.ncols()
        )));
    }
    let mut data = vec![0.0; left * n * right];
    for r in 0..right {
        for j in 0..n {
            let dst = &mut data[left * (j + n * r)..left * (j + n * r + 1)];
            for (l, v) in dst.iter_mut().enumerate() {
                *v = m[(j, l + left * r)];
            }
        }
    }
    Ok(DenseTensor {
        shape: shape.to_vec(),
        data,
    })
}

/// Reinterprets the buffer under a new list of extents with the same product.
pub fn reshape(t: &DenseTensor, shape: &[usize]) -> Result<DenseTensor> {
    t.clone().into_shape(shape.to_vec())
}

/// Contracts mode `da` of `a` with mode `db` of `b`.
///
/// The result carries the remaining modes of `a` followed by the remaining
/// modes of `b`. Contracting two vectors gives a scalar (empty shape).
pub fn contract(a: &DenseTensor, da: usize, b: &DenseTensor, db: usize) -> Result<DenseTensor> {
    check_mode(a, da)?;
    check_mode(b, db)?;
    if a.shape[da] != b.shape[db] {
        return Err(HtError::ExtentMismatch {
            left: a.shape[da],
            right: b.shape[db],
        });
    }
    let ua = unfold(a, da)?;
    let ub = unfold(b, db)?;
    let c = ua.tr_mul(&ub);
    let shape: Vec<usize> = a
        .shape
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != da)
        .chain(b.shape.iter().enumerate().filter(|&(i, _)| i != db))
        .map(|(_, &n)| n)
        .collect();
    DenseTensor::new(shape, c.as_slice().to_vec())
}

/// Replaces mode `mode` (extent `n`) by the columns of `b` (an `n x m`
/// matrix): `out[.., k, ..] = sum_j t[.., j, ..] * b[j, k]`.
pub fn mode_product(t: &DenseTensor, mode: usize, b: &DMatrix<f64>) -> Result<DenseTensor> {
    check_mode(t, mode)?;
    let (left, n, right) = split_at_mode(&t.shape, mode);
    if b.nrows() != n {
        return Err(HtError::ExtentMismatch {
            left: n,
            right: b.nrows(),
        });
    }
    let m = b.ncols();
    let mut data = vec![0.0; left * m * right];
    if left == 1 {
        let src = DMatrixView::from_slice(&t.data, n, right);
        let mut dst = DMatrixViewMut::from_slice(&mut data, m, right);
        dst.gemm_tr(1.0, b, &src, 0.0);
    } else {
        for r in 0..right {
            let src = DMatrixView::from_slice(&t.data[r * left * n..(r + 1) * left * n], left, n);
            let mut dst =
                DMatrixViewMut::from_slice(&mut data[r * left * m..(r + 1) * left * m], left, m);
            dst.gemm(1.0, &src, b, 0.0);
        }
    }
    let mut shape = t.shape.clone();
    shape[mode] = m;
    DenseTensor::new(shape, data)
}

/// One factor of a [`multi_contract`]: `axis` of `tensor` is summed against
/// mode `target` of the contracted tensor.
#[derive(Debug, Clone, Copy)]
pub struct Factor<'a> {
    pub tensor: &'a DenseTensor,
    pub target: usize,
    pub axis: usize,
}

impl<'a> Factor<'a> {
    /// A matrix factor contracted along its second axis (`m x n` acting on extent `n`).
    pub fn matrix(tensor: &'a DenseTensor, target: usize) -> Self {
        Self {
            tensor,
            target,
            axis: 1,
        }
    }

    /// A factor contracted along its last axis.
    pub fn last_axis(tensor: &'a DenseTensor, target: usize) -> Self {
        Self {
            tensor,
            target,
            axis: tensor.order().saturating_sub(1),
        }
    }
}

/// Multi-index contraction: each factor's designated axis is summed against
/// its target mode, and the target mode is replaced in place by the factor's
/// remaining axes (in their order). Factors are applied in ascending target
/// order; targets refer to modes of the input tensor.
pub fn multi_contract(t: &DenseTensor, factors: &[Factor<'_>]) -> Result<DenseTensor> {
    let mut sorted: Vec<&Factor<'_>> = factors.iter().collect();
    sorted.sort_by_key(|f| f.target);
    for pair in sorted.windows(2) {
        if pair[0].target == pair[1].target {
            return Err(HtError::InvalidArgument(format!(
                "duplicate contraction mode {}",
                pair[0].target
            )));
        }
    }
    let mut out = t.clone();
    // Modes before the current target may have been split by earlier factors.
    let mut shift: isize = 0;
    for f in sorted {
        check_mode(t, f.target)?;
        check_mode(f.tensor, f.axis)?;
        let mode = (f.target as isize + shift) as usize;
        let n = f.tensor.shape[f.axis];
        if n != out.shape[mode] {
            return Err(HtError::ExtentMismatch {
                left: out.shape[mode],
                right: n,
            });
        }
        let rest: Vec<usize> = f
            .tensor
            .shape
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != f.axis)
            .map(|(_, &e)| e)
            .collect();
        // unfold puts the contracted axis in the rows, the rest in the columns.
        let b = unfold(f.tensor, f.axis)?;
        let applied = mode_product(&out, mode, &b)?;
        let mut shape = out.shape[..mode].to_vec();
        shape.extend_from_slice(&rest);
        shape.extend_from_slice(&out.shape[mode + 1..]);
        out = applied.into_shape(shape)?;
        shift += rest.len() as isize - 1;
    }
    Ok(out)
}

/// Concatenates `a` and `b` along mode `k`.
pub fn concat(a: &DenseTensor, b: &DenseTensor, k: usize) -> Result<DenseTensor> {
    check_mode(a, k)?;
    check_mode(b, k)?;
    let off_mode_equal = a.order() == b.order()
        && a
            .shape
            .iter()
            .zip(&b.shape)
            .enumerate()
            .all(|(i, (x, y))| i == k || x == y);
    if !off_mode_equal {
        return Err(HtError::ShapeMismatch(format!(
            "cannot concatenate {:?} and {:?} along mode {k}",
            a.shape, b.shape
        )));
    }
    let (left, na, right) = split_at_mode(&a.shape, k);
    let nb = b.shape[k];
    let mut data = Vec::with_capacity(a.len() + b.len());
    for r in 0..right {
        data.extend_from_slice(&a.data[r * left * na..(r + 1) * left * na]);
        data.extend_from_slice(&b.data[r * left * nb..(r + 1) * left * nb]);
    }
    let mut shape = a.shape.clone();
    shape[k] = na + nb;
    DenseTensor::new(shape, data)
}

/// Appends `extra` zero slices along mode `k`.
pub fn pad_zeros(t: &DenseTensor, k: usize, extra: usize) -> Result<DenseTensor> {
    check_mode(t, k)?;
    if extra == 0 {
        return Ok(t.clone());
    }
    let mut shape = t.shape.clone();
    shape[k] = extra;
    concat(t, &DenseTensor::zeros(shape)?, k)
}

/// Copies the index range `[start, end)` of mode `k`.
pub fn slice_mode(t: &DenseTensor, k: usize, start: usize, end: usize) -> Result<DenseTensor> {
    check_mode(t, k)?;
    let (left, n, right) = split_at_mode(&t.shape, k);
    if start >= end || end > n {
        return Err(HtError::IndexOutOfRange {
            index: end.max(start),
            len: n,
        });
    }
    let mut data = Vec::with_capacity(left * (end - start) * right);
    for r in 0..right {
        data.extend_from_slice(&t.data[left * (start + n * r)..left * (end + n * r)]);
    }
    let mut shape = t.shape.clone();
    shape[k] = end - start;
    DenseTensor::new(shape, data)
}

pub fn frobenius_norm(t: &DenseTensor) -> f64 {
    t.frobenius_norm()
}

fn check_permutation(perm: &[usize], order: usize) -> Result<()> {
    let mut seen = vec![false; order];
    if perm.len() != order {
        return Err(HtError::InvalidPermutation(perm.to_vec()));
    }
    for &p in perm {
        if p >= order || seen[p] {
            return Err(HtError::InvalidPermutation(perm.to_vec()));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Reorders axes so that axis `k` of the result is axis `perm[k]` of `t`.
pub fn permute_axes(t: &DenseTensor, perm: &[usize]) -> Result<DenseTensor> {
    check_permutation(perm, t.order())?;
    let shape: Vec<usize> = perm.iter().map(|&p| t.shape[p]).collect();
    let mut in_strides = vec![1usize; t.order()];
    for i in 1..t.order() {
        in_strides[i] = in_strides[i - 1] * t.shape[i - 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut data = Vec::with_capacity(t.len());
    let mut index = vec![0usize; shape.len()];
    for _ in 0..t.len() {
        let offset: usize = index.iter().zip(&strides).map(|(i, s)| i * s).sum();
        data.push(t.data[offset]);
        increment(&mut index, &shape);
    }
    DenseTensor::new(shape, data)
}

/// The permutation that undoes `perm`.
pub fn inverse_permutation(perm: &[usize]) -> Result<Vec<usize>> {
    check_permutation(perm, perm.len())?;
    let mut inv = vec![0; perm.len()];
    for (k, &p) in perm.iter().enumerate() {
        inv[p] = k;
    }
    Ok(inv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(shape: &[usize]) -> DenseTensor {
        let len = product(shape);
        DenseTensor::new(
            shape.to_vec(),
            (0..len).map(|i| (i as f64 * 0.37).sin()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn unfold_of_identity_is_identity() {
        let eye = DenseTensor::from_matrix(&DMatrix::identity(2, 2));
        assert_eq!(unfold(&eye, 0).unwrap(), DMatrix::<f64>::identity(2, 2));
    }

    #[test]
    fn unfold_places_mode_index_in_rows() {
        let t = seq(&[2, 3, 4]);
        let m = unfold(&t, 1).unwrap();
        assert_eq!((m.nrows(), m.ncols()), (3, 8));
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(m[(b, a + 2 * c)], t.get(&[a, b, c]));
                }
            }
        }
    }

    #[test]
    fn unfold_rejects_bad_mode() {
        assert!(matches!(
            unfold(&seq(&[2, 2]), 2),
            Err(HtError::ModeOutOfRange { .. })
        ));
    }

    #[test]
    fn fold_round_trips_every_mode() {
        let t = seq(&[3, 3, 3]);
        for mode in 0..3 {
            let back = fold(&unfold(&t, mode).unwrap(), t.shape(), mode).unwrap();
            assert_eq!(back, t);
        }
    }

    #[test]
    fn fold_scalar_and_errors() {
        let m = DMatrix::from_element(1, 1, 5.0);
        let s = fold(&m, &[1], 0).unwrap();
        assert_eq!(s.data(), &[5.0]);
        let wrong = DMatrix::zeros(2, 3);
        assert!(fold(&wrong, &[2, 2], 0).is_err());
    }

    #[test]
    fn reshape_keeps_order_and_checks_product() {
        let t = seq(&[2, 2]);
        let flat = reshape(&t, &[4]).unwrap();
        assert_eq!(flat.data(), t.data());
        assert!(reshape(&t, &[3]).is_err());
    }

    #[test]
    fn reshape_groups_adjacent_pairs() {
        let t = seq(&[2, 2, 2, 2, 2]);
        let g = reshape(&t, &[4, 4, 2]).unwrap();
        for i1 in 0..2 {
            for i2 in 0..2 {
                for i3 in 0..2 {
                    for i4 in 0..2 {
                        for n in 0..2 {
                            assert_eq!(
                                g.get(&[i1 + 2 * i2, i3 + 2 * i4, n]),
                                t.get(&[i1, i2, i3, i4, n])
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn contract_with_identity_and_vectors() {
        let eye = DenseTensor::from_matrix(&DMatrix::identity(2, 2));
        let b = seq(&[2, 3]);
        assert_eq!(contract(&eye, 1, &b, 0).unwrap(), b);

        let u = DenseTensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let v = DenseTensor::new(vec![3], vec![4.0, 5.0, 6.0]).unwrap();
        let s = contract(&u, 0, &v, 0).unwrap();
        assert_eq!(s.shape(), &[] as &[usize]);
        assert_eq!(s.data(), &[32.0]);

        assert!(contract(&u, 0, &b, 0).is_err());
    }

    #[test]
    fn multi_contract_identity_factors_is_noop() {
        let t = seq(&[2, 3, 4]);
        let eyes: Vec<DenseTensor> = t
            .shape()
            .iter()
            .map(|&n| DenseTensor::from_matrix(&DMatrix::identity(n, n)))
            .collect();
        let factors: Vec<Factor> = eyes
            .iter()
            .enumerate()
            .map(|(i, e)| Factor::matrix(e, i))
            .collect();
        let out = multi_contract(&t, &factors).unwrap();
        assert!(out.sub(&t).unwrap().frobenius_norm() < 1e-15);
    }

    #[test]
    fn multi_contract_rejects_duplicate_modes() {
        let t = seq(&[2, 2]);
        let e = DenseTensor::from_matrix(&DMatrix::identity(2, 2));
        let factors = [Factor::matrix(&e, 0), Factor::matrix(&e, 0)];
        assert!(multi_contract(&t, &factors).is_err());
    }

    #[test]
    fn concat_basics() {
        let a = DenseTensor::new(vec![1], vec![1.0]).unwrap();
        let b = DenseTensor::new(vec![1], vec![2.0]).unwrap();
        assert_eq!(concat(&a, &b, 0).unwrap().data(), &[1.0, 2.0]);

        let t = seq(&[2, 3, 2]);
        let padded = pad_zeros(&t, 1, 3).unwrap();
        assert_eq!(padded.shape(), &[2, 6, 2]);
        assert_eq!(slice_mode(&padded, 1, 0, 3).unwrap(), t);
        assert_eq!(slice_mode(&padded, 1, 3, 6).unwrap().norm_sq(), 0.0);

        let c = seq(&[2, 2, 3]);
        assert!(concat(&t, &c, 1).is_err());
    }

    #[test]
    fn norms() {
        assert_eq!(DenseTensor::zeros(vec![3, 2]).unwrap().frobenius_norm(), 0.0);
        let mut e = DenseTensor::zeros(vec![4]).unwrap();
        e.set(&[2], 1.0);
        assert_eq!(frobenius_norm(&e), 1.0);
    }

    #[test]
    fn permutation_round_trip_and_validation() {
        let t = seq(&[2, 3, 4]);
        let perm = [2, 0, 1];
        let p = permute_axes(&t, &perm).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.get(&[3, 1, 2]), t.get(&[1, 2, 3]));
        let back = permute_axes(&p, &inverse_permutation(&perm).unwrap()).unwrap();
        assert_eq!(back, t);
        assert!(permute_axes(&t, &[0, 0, 1]).is_err());
        assert!(permute_axes(&t, &[0, 1]).is_err());
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(DenseTensor::zeros(vec![2, 0]).is_err());
        assert!(DenseTensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }
}
