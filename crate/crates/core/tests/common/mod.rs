//! Test-only reference implementations. Everything here is written with
//! plain index loops so it shares no code paths with the library kernels.

#![allow(dead_code)]

use htrise::bht::HtRepresentation;
use htrise::tensor::DenseTensor;
use htrise::tree::NodeId;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> DenseTensor {
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    DenseTensor::new(shape.to_vec(), data).unwrap()
}

/// Column-major linear offset of a multi-index.
pub fn offset(shape: &[usize], index: &[usize]) -> usize {
    let mut off = 0;
    let mut stride = 1;
    for (i, n) in index.iter().zip(shape) {
        off += i * stride;
        stride *= n;
    }
    off
}

/// Multi-index of a linear offset.
pub fn multi_index(shape: &[usize], mut off: usize) -> Vec<usize> {
    shape
        .iter()
        .map(|&n| {
            let i = off % n;
            off /= n;
            i
        })
        .collect()
}

/// Matricization with the dimensions in `rows` (in that order, first
/// fastest) indexing rows and all other dimensions indexing columns.
pub fn matricize(t: &DenseTensor, rows: &[usize]) -> DMatrix<f64> {
    let shape = t.shape();
    let cols: Vec<usize> = (0..shape.len()).filter(|k| !rows.contains(k)).collect();
    let row_shape: Vec<usize> = rows.iter().map(|&k| shape[k]).collect();
    let col_shape: Vec<usize> = cols.iter().map(|&k| shape[k]).collect();
    let nr: usize = row_shape.iter().product();
    let nc: usize = col_shape.iter().product();
    let mut m = DMatrix::zeros(nr, nc);
    for off in 0..t.len() {
        let idx = multi_index(shape, off);
        let ri: Vec<usize> = rows.iter().map(|&k| idx[k]).collect();
        let ci: Vec<usize> = cols.iter().map(|&k| idx[k]).collect();
        m[(offset(&row_shape, &ri), offset(&col_shape, &ci))] = t.data()[off];
    }
    m
}

pub fn naive_unfold(t: &DenseTensor, mode: usize) -> DMatrix<f64> {
    matricize(t, &[mode])
}

/// Contraction of `a` mode `da` with `b` mode `db` by brute force.
pub fn naive_contract(a: &DenseTensor, da: usize, b: &DenseTensor, db: usize) -> DenseTensor {
    let ra: Vec<usize> = (0..a.order()).filter(|&k| k != da).collect();
    let rb: Vec<usize> = (0..b.order()).filter(|&k| k != db).collect();
    let mut shape: Vec<usize> = ra.iter().map(|&k| a.shape()[k]).collect();
    shape.extend(rb.iter().map(|&k| b.shape()[k]));
    let len: usize = shape.iter().product();
    let mut data = vec![0.0; len];
    for (off, slot) in data.iter_mut().enumerate() {
        let idx = multi_index(&shape, off);
        let mut ia = vec![0; a.order()];
        let mut ib = vec![0; b.order()];
        for (p, &k) in ra.iter().enumerate() {
            ia[k] = idx[p];
        }
        for (p, &k) in rb.iter().enumerate() {
            ib[k] = idx[ra.len() + p];
        }
        let mut s = 0.0;
        for j in 0..a.shape()[da] {
            ia[da] = j;
            ib[db] = j;
            s += a.get(&ia) * b.get(&ib);
        }
        *slot = s;
    }
    DenseTensor::new(shape, data).unwrap()
}

/// `out[.., k, ..] = sum_j t[.., j, ..] * m[j, k]` by brute force.
pub fn naive_mode_product(t: &DenseTensor, mode: usize, m: &DMatrix<f64>) -> DenseTensor {
    let mut shape = t.shape().to_vec();
    shape[mode] = m.ncols();
    let len: usize = shape.iter().product();
    let mut data = vec![0.0; len];
    for (off, slot) in data.iter_mut().enumerate() {
        let mut idx = multi_index(&shape, off);
        let k = idx[mode];
        let mut s = 0.0;
        for j in 0..m.nrows() {
            idx[mode] = j;
            s += t.get(&idx) * m[(j, k)];
        }
        *slot = s;
    }
    DenseTensor::new(shape, data).unwrap()
}

/// Singular values by one-sided Jacobi rotations, descending.
pub fn jacobi_singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    // Work on the orientation with fewer columns.
    let mut a = if m.ncols() > m.nrows() {
        m.transpose()
    } else {
        m.clone()
    };
    let n = a.ncols();
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha: f64 = a.column(p).iter().map(|x| x * x).sum();
                let beta: f64 = a.column(q).iter().map(|x| x * x).sum();
                let gamma: f64 = a.column(p).iter().zip(a.column(q).iter()).map(|(x, y)| x * y).sum();
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..a.nrows() {
                    let x = a[(i, p)];
                    let y = a[(i, q)];
                    a[(i, p)] = c * x - s * y;
                    a[(i, q)] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = (0..n).map(|j| a.column(j).norm()).collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    sv
}

/// Exact-arithmetic style rank: singular values above a relative cut.
pub fn numerical_rank(sv: &[f64], rel: f64) -> usize {
    let top = sv.first().copied().unwrap_or(0.0);
    sv.iter().filter(|&&s| s > rel * top).count()
}

/// Smallest rank whose discarded tail is within `eps`, floored at one.
pub fn tail_rank(sv: &[f64], eps: f64) -> usize {
    for r in 0..=sv.len() {
        let tail: f64 = sv[r..].iter().map(|s| s * s).sum::<f64>().sqrt();
        if tail <= eps {
            return r.max(1);
        }
    }
    sv.len()
}

/// Orthonormal columns from arbitrary ones by modified Gram-Schmidt (twice).
pub fn gram_schmidt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut q = m.clone();
    for _ in 0..2 {
        for j in 0..q.ncols() {
            for k in 0..j {
                let proj = q.column(k).dot(&q.column(j));
                let qk = q.column(k).into_owned();
                q.column_mut(j).axpy(-proj, &qk, 1.0);
            }
            let n = q.column(j).norm();
            q.column_mut(j).scale_mut(1.0 / n);
        }
    }
    q
}

pub fn random_orthonormal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let m = DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
    gram_schmidt(&m)
}

/// Fixed multilinear-rank family: `core x_k U_k` with given bases and a
/// fresh random core per call.
pub struct TuckerFamily {
    pub bases: Vec<DMatrix<f64>>,
}

impl TuckerFamily {
    pub fn new(rng: &mut ChaCha8Rng, extents: &[usize], ranks: &[usize]) -> Self {
        let bases = extents
            .iter()
            .zip(ranks)
            .map(|(&n, &r)| random_orthonormal(rng, n, r))
            .collect();
        Self { bases }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng, batch: usize) -> DenseTensor {
        let mut shape: Vec<usize> = self.bases.iter().map(|b| b.ncols()).collect();
        shape.push(batch);
        let mut t = random_tensor(rng, &shape);
        for (k, b) in self.bases.iter().enumerate() {
            t = naive_mode_product(&t, k, &b.transpose());
        }
        t
    }
}

/// Core of a node viewed as `alpha x r`.
pub fn core_as_matrix(core: &DenseTensor) -> DMatrix<f64> {
    let r = *core.shape().last().unwrap();
    DMatrix::from_column_slice(core.len() / r, r, core.data())
}

pub fn gram_defect(core: &DenseTensor) -> f64 {
    let u = core_as_matrix(core);
    let g = u.transpose() * &u;
    let n = g.nrows();
    (g - DMatrix::identity(n, n)).amax()
}

/// Largest orthonormality defect over every leaf and transfer core.
pub fn max_core_defect(h: &HtRepresentation) -> f64 {
    h.tree()
        .nodes()
        .filter(|n| n.parent.is_some())
        .map(|n| gram_defect(h.core(n.id).unwrap()))
        .fold(0.0, f64::max)
}

/// Frame of a node: a matrix whose rows run over the node's dimensions
/// (first fastest) and whose columns are the node's basis vectors, built by
/// explicit sums over the cores.
pub fn frame(h: &HtRepresentation, id: NodeId) -> DMatrix<f64> {
    let node = h.tree().node(id).unwrap();
    let core = h.core(id).unwrap();
    if node.leaf_dim.is_some() {
        return core_as_matrix(core);
    }
    let [a, b] = node.children.unwrap();
    let fa = frame(h, a);
    let fb = frame(h, b);
    let r = core.shape()[2];
    let mut out = DMatrix::zeros(fa.nrows() * fb.nrows(), r);
    for k in 0..r {
        for ib in 0..fb.nrows() {
            for ia in 0..fa.nrows() {
                let mut s = 0.0;
                for q in 0..fb.ncols() {
                    for p in 0..fa.ncols() {
                        s += fa[(ia, p)] * fb[(ib, q)] * core.get(&[p, q, k]);
                    }
                }
                out[(ia + fa.nrows() * ib, k)] = s;
            }
        }
    }
    out
}

/// Dense reconstruction of latent slices `r_l x r_r x N` through the frames
/// of the root's successors.
pub fn dense_decode(h: &HtRepresentation, latent: &DenseTensor) -> DenseTensor {
    let [a, b] = h.tree().layer(0)[0].children.unwrap();
    let fa = frame(h, a);
    let fb = frame(h, b);
    let batch = latent.shape()[2];
    let mut shape = h.extents().to_vec();
    shape.push(batch);
    let mut data = vec![0.0; fa.nrows() * fb.nrows() * batch];
    for m in 0..batch {
        for ib in 0..fb.nrows() {
            for ia in 0..fa.nrows() {
                let mut s = 0.0;
                for q in 0..fb.ncols() {
                    for p in 0..fa.ncols() {
                        s += fa[(ia, p)] * fb[(ib, q)] * latent.get(&[p, q, m]);
                    }
                }
                data[ia + fa.nrows() * (ib + fb.nrows() * m)] = s;
            }
        }
    }
    DenseTensor::new(shape, data).unwrap()
}

pub fn rel_diff(a: &DenseTensor, b: &DenseTensor) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = b.frobenius_norm();
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Sum of squares by a plain loop.
pub fn norm_sq(t: &DenseTensor) -> f64 {
    t.data().iter().map(|x| x * x).sum()
}

/// The `m`-th slice along the last axis, as a tensor with the batch axis kept.
pub fn batch_slice(t: &DenseTensor, m: usize) -> DenseTensor {
    let last = t.order() - 1;
    htrise::tensor::slice_mode(t, last, m, m + 1).unwrap()
}

/// Runs the `htrise` binary; returns (success, stderr).
pub fn htrise(args: &[&str]) -> (bool, String) {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_htrise"))
        .args(args)
        .output()
        .expect("spawn htrise");
    (out.status.success(), String::from_utf8_lossy(&out.stderr).into_owned())
}

/// Writes `batches` as `batch_000.bin`, `batch_001.bin`, ... under `dir`.
pub fn write_stream(dir: &std::path::Path, batches: &[DenseTensor]) -> Vec<std::path::PathBuf> {
    std::fs::create_dir_all(dir).unwrap();
    batches
        .iter()
        .enumerate()
        .map(|(k, b)| {
            let p = dir.join(format!("batch_{k:03}.bin"));
            htrise::io::write_batch(b, &p).unwrap();
            p
        })
        .collect()
}

/// Parses a stats CSV into rows of fields, header excluded.
pub fn csv_rows(path: &std::path::Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect()
}
