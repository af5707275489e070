mod common;

use common::*;
use htrise::bht::{
    bht_l2r, bht_l2r_with, decode, encode, nodewise_tolerance, reconstruct_slice, Budget,
    LatentBatch,
};
use htrise::tensor::DenseTensor;
use htrise::tree::{layer_input_shape, DimensionTree};
use nalgebra::DMatrix;
use proptest::prelude::*;

#[test]
fn per_node_truncation_matches_dense_svd() {
    let mut r = rng(20);
    let y = random_tensor(&mut r, &[3, 3, 3, 3, 4]);
    let tree = DimensionTree::balanced(4).unwrap();
    let eps = 0.2;
    let (h, trace) = bht_l2r_with(&y, &tree, eps, Budget::Uniform).unwrap();
    let eps_nw = nodewise_tolerance(eps * y.frobenius_norm(), 4);

    // Replay the sweep with loop kernels and Jacobi SVDs.
    let mut c = y.clone();
    for (step, layer) in (1..=tree.depth()).rev().enumerate() {
        let frontier = tree.frontier(layer);
        let mut k = 0;
        for (m, id) in frontier.iter().enumerate() {
            if id.layer != layer {
                continue;
            }
            let sv = jacobi_singular_values(&naive_unfold(&c, m));
            assert_eq!(h.rank(*id), tail_rank(&sv, eps_nw), "rank of {id:?}");
            let tail: f64 = sv[h.rank(*id)..].iter().map(|s| s * s).sum::<f64>().sqrt();
            assert!((tail - trace.layers[step].discarded[k]).abs() <= 1e-10 * y.frobenius_norm());
            k += 1;
        }
        for (m, id) in frontier.iter().enumerate() {
            if id.layer == layer {
                c = naive_mode_product(&c, m, &core_as_matrix(h.core(*id).unwrap()));
            }
        }
        let next = if layer == 1 {
            let (a, b) = h.root_ranks();
            vec![a, b, 4]
        } else {
            layer_input_shape(&tree, h.extents(), h.ranks(), layer - 1, 4).unwrap()
        };
        c = c.into_shape(next).unwrap();
    }
    assert!(rel_diff(h.root(), &c) <= 1e-12);
    let (latent, _) = encode(&h, &y).unwrap();
    let err = rel_diff(&decode(&h, &latent).unwrap(), &y);
    assert!(err <= eps);
}

#[test]
fn replicated_rank_one_tensor() {
    let vs = [
        vec![1.0, -2.0, 0.5],
        vec![0.3, 1.0],
        vec![2.0, 1.0, -1.0, 0.25],
        vec![1.5, -0.5, 0.7],
        vec![-1.0, 2.0],
    ];
    let y = DenseTensor::from_fn(vec![3, 2, 4, 3, 2, 6], |i| {
        (0..5).map(|k| vs[k][i[k]]).product::<f64>()
    })
    .unwrap();
    let tree = DimensionTree::balanced(5).unwrap();
    let h = bht_l2r(&y, &tree, 1e-3).unwrap();
    assert_eq!(h.ranks().max(), 1);
    let (latent, err) = encode(&h, &y).unwrap();
    assert!(rel_diff(&decode(&h, &latent).unwrap(), &y) <= 1e-12);
    assert!(err <= 1e-10 * y.frobenius_norm());
}

#[test]
fn decode_matches_dense_oracle_and_preserves_norm() {
    let mut r = rng(21);
    let family = TuckerFamily::new(&mut r, &[4, 3, 5, 3], &[2, 2, 3, 2]);
    let y = family.sample(&mut r, 6);
    let tree = DimensionTree::balanced(4).unwrap();
    let h = bht_l2r(&y, &tree, 0.05).unwrap();
    let (a, b) = h.root_ranks();
    for seed in 0..5 {
        let mut rr = rng(100 + seed);
        let latent = random_tensor(&mut rr, &[a, b, 3]);
        let fast = decode(&h, &LatentBatch::new(latent.clone()).unwrap()).unwrap();
        let slow = dense_decode(&h, &latent);
        assert!(rel_diff(&fast, &slow) <= 1e-12);
        let ratio = fast.frobenius_norm() / latent.frobenius_norm();
        assert!((ratio - 1.0).abs() <= 1e-10);
    }
}

#[test]
fn orthogonal_input_encodes_to_nothing() {
    let mut r = rng(22);
    let family = TuckerFamily::new(&mut r, &[5, 4, 4], &[2, 2, 2]);
    let tree = DimensionTree::balanced(3).unwrap();
    let h = bht_l2r(&family.sample(&mut r, 4), &tree, 1e-8).unwrap();
    // Leaf 0 spans family.bases[0]; build its orthogonal complement.
    let leaf = tree
        .nodes()
        .find(|n| n.leaf_dim == Some(0))
        .map(|n| n.id)
        .unwrap();
    let u = core_as_matrix(h.core(leaf).unwrap());
    assert_eq!(u.ncols(), 2);
    let mut stacked = DMatrix::zeros(5, 7);
    stacked.columns_mut(0, 2).copy_from(&u);
    stacked.columns_mut(2, 5).copy_from(&DMatrix::identity(5, 5));
    let q = gram_schmidt(&stacked.columns(0, 5).into_owned());
    let complement = q.columns(2, 3).into_owned();
    let mut y = random_tensor(&mut r, &[3, 4, 4, 2]);
    y = naive_mode_product(&y, 0, &complement.transpose());
    let (latent, err) = encode(&h, &y).unwrap();
    assert!(latent.norm() <= 1e-12 * y.frobenius_norm());
    assert!((err - y.frobenius_norm()).abs() <= 1e-10 * y.frobenius_norm());
}

#[test]
fn exact_representation_projects_without_loss() {
    let mut r = rng(23);
    let family = TuckerFamily::new(&mut r, &[4, 4, 3, 3], &[2, 1, 2, 2]);
    let y = family.sample(&mut r, 5);
    let tree = DimensionTree::balanced(4).unwrap();
    let h = bht_l2r(&y, &tree, 1e-12).unwrap();
    let (_, err) = encode(&h, &y).unwrap();
    assert!(err <= 1e-10 * y.frobenius_norm());
    for m in 0..5 {
        let s = reconstruct_slice(&h, m).unwrap();
        let original = batch_slice(&y, m).into_shape(vec![4, 4, 3, 3]).unwrap();
        assert!(rel_diff(&s, &original) <= 1e-10);
    }
}

#[test]
fn tiny_projection_errors_are_resolved() {
    // Members of the spanned family must report round-off level errors, far
    // below what a difference of squared norms can resolve.
    let mut r = rng(24);
    let family = TuckerFamily::new(&mut r, &[5, 6, 5, 6], &[2, 2, 2, 2]);
    let tree = DimensionTree::balanced(4).unwrap();
    let h = bht_l2r(&family.sample(&mut r, 3), &tree, 1e-10).unwrap();
    for _ in 0..20 {
        let mut y = family.sample(&mut r, 3);
        y.map_inplace(|x| 50.0 * x);
        let (_, err) = encode(&h, &y).unwrap();
        assert!(err <= 1e-12 * y.frobenius_norm(), "{err:e}");
    }
}

fn batch_strategy() -> impl Strategy<Value = (DenseTensor, f64)> {
    (
        proptest::collection::vec(1usize..5, 2..6),
        1usize..5,
        prop_oneof![Just(0.3), Just(0.1), Just(0.01)],
        any::<u64>(),
    )
        .prop_map(|(mut shape, n, eps, seed)| {
            shape.push(n);
            let mut r = rng(seed);
            (random_tensor(&mut r, &shape), eps)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn error_bound_and_norm_identity((y, eps) in batch_strategy(), adaptive in any::<bool>()) {
        let tree = DimensionTree::balanced(y.order() - 1).unwrap();
        let budget = if adaptive { Budget::Adaptive } else { Budget::Uniform };
        let (h, trace) = bht_l2r_with(&y, &tree, eps, budget).unwrap();
        let (latent, proj) = encode(&h, &y).unwrap();
        let back = decode(&h, &latent).unwrap();
        let diff = norm_sq(&back.sub(&y).unwrap());
        let ny = norm_sq(&y);
        prop_assert!(diff.sqrt() <= eps * ny.sqrt() + 1e-9);
        prop_assert!((ny - norm_sq(&latent.slices) - diff).abs() <= 1e-9 * ny);
        prop_assert!((proj * proj - diff).abs() <= 1e-9 * ny);
        prop_assert!(max_core_defect(&h) <= 1e-10);
        for l in &trace.layers {
            let lost = l.input_norm.powi(2) - l.projected_norm.powi(2);
            let bound: f64 = l.discarded.iter().map(|e| e * e).sum();
            prop_assert!(lost <= bound + 1e-12 * l.input_norm.powi(2));
        }
    }
}
