use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use orthocl::config::RunConfig;
use orthocl::data::{make_stream, RawDataset, Split, SplitSpec};
use orthocl::ebv::{self, BasisVectorSet, ClassRegistry};
use orthocl::hsic::{center, gaussian_gram, hsic, hsic_grad_wrt_a, median_bandwidth};
use orthocl::projector::{AlphaSchedule, ProjectorState};
use orthocl::Error;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn permute_rows(m: &Array2<f64>, perm: &[usize]) -> Array2<f64> {
    m.select(Axis(0), perm)
}

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hsic_is_symmetric(a in matrix(9, 4), b in matrix(9, 3), sa in 0.3f64..4.0, sb in 0.3f64..4.0) {
        let ka = gaussian_gram(a.view(), sa).unwrap();
        let kb = gaussian_gram(b.view(), sb).unwrap();
        let ab = hsic(&ka, &kb).unwrap();
        let ba = hsic(&kb, &ka).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12 * (1.0 + ab.abs()));
        prop_assert!(ab >= -1e-12);
    }

    #[test]
    fn hsic_invariant_under_joint_permutation(a in matrix(8, 3), b in matrix(8, 5), perm in permutation(8)) {
        let sa = median_bandwidth(a.view()).unwrap();
        let sb = median_bandwidth(b.view()).unwrap();
        let base = hsic(&gaussian_gram(a.view(), sa).unwrap(), &gaussian_gram(b.view(), sb).unwrap()).unwrap();
        let pa = permute_rows(&a, &perm);
        let pb = permute_rows(&b, &perm);
        let moved = hsic(&gaussian_gram(pa.view(), sa).unwrap(), &gaussian_gram(pb.view(), sb).unwrap()).unwrap();
        prop_assert!((base - moved).abs() <= 1e-12 * (1.0 + base.abs()));
    }

    #[test]
    fn hsic_vanishes_for_constant_batch(a in matrix(7, 3), row in prop::collection::vec(-2.0f64..2.0, 4)) {
        let constant = Array2::from_shape_fn((7, 4), |(_, j)| row[j]);
        let ka = gaussian_gram(a.view(), 1.0).unwrap();
        let kc = gaussian_gram(constant.view(), 1.0).unwrap();
        prop_assert_eq!(hsic(&ka, &kc).unwrap(), 0.0);
        prop_assert_eq!(hsic(&kc, &ka).unwrap(), 0.0);
    }

    #[test]
    fn hsic_gradient_is_permutation_equivariant(a in matrix(8, 3), b in matrix(8, 2), perm in permutation(8)) {
        let gb = center(gaussian_gram(b.view(), 1.0).unwrap().entries().view());
        let grad = hsic_grad_wrt_a(a.view(), gb.view(), 1.3).unwrap();
        let pa = permute_rows(&a, &perm);
        let pb = permute_rows(&b, &perm);
        let pgb = center(gaussian_gram(pb.view(), 1.0).unwrap().entries().view());
        let pgrad = hsic_grad_wrt_a(pa.view(), pgb.view(), 1.3).unwrap();
        let expect = permute_rows(&grad, &perm);
        for (x, y) in pgrad.iter().zip(expect.iter()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn projector_spectrum_stays_in_unit_interval(
        updates in prop::collection::vec(prop::collection::vec(-4.0f64..4.0, 6), 1..25),
        alpha in 1e-3f64..10.0,
    ) {
        let mut p = ProjectorState::new(6, alpha, AlphaSchedule::Constant).unwrap();
        for z in &updates {
            p.update(ArrayView1::from(&z[..])).unwrap();
        }
        let m = p.matrix();
        for i in 0..6 {
            for j in 0..6 {
                prop_assert_eq!(m[[i, j]], m[[j, i]]);
            }
        }
        for ev in p.eigenvalues() {
            prop_assert!(ev > 0.0 && ev <= 1.0 + 1e-9, "eigenvalue {}", ev);
        }
    }

    #[test]
    fn rank_never_grows_under_constant_alpha(
        updates in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 5), 1..40),
        alpha in 1e-3f64..1.0,
        threshold in 0.01f64..0.9,
    ) {
        let mut p = ProjectorState::new(5, alpha, AlphaSchedule::Constant).unwrap();
        let mut last = p.numerical_rank(threshold).unwrap();
        prop_assert_eq!(last, 5);
        for z in &updates {
            p.update(ArrayView1::from(&z[..])).unwrap();
            let rank = p.numerical_rank(threshold).unwrap();
            prop_assert!(rank <= last, "rank rose from {} to {}", last, rank);
            last = rank;
        }
    }

    #[test]
    fn projector_apply_is_linear(
        z in prop::collection::vec(-2.0f64..2.0, 5),
        g1 in matrix(5, 3),
        g2 in matrix(5, 3),
        c in -3.0f64..3.0,
    ) {
        let mut p = ProjectorState::new(5, 0.1, AlphaSchedule::Constant).unwrap();
        p.update(ArrayView1::from(&z[..])).unwrap();
        let combined = &g1 + &(&g2 * c);
        let lhs = p.apply(combined.view()).unwrap();
        let rhs = p.apply(g1.view()).unwrap() + p.apply(g2.view()).unwrap() * c;
        for (x, y) in lhs.iter().zip(rhs.iter()) {
            prop_assert!((x - y).abs() <= 1e-10);
        }
    }

    #[test]
    fn projector_annihilates_learned_direction(z in prop::collection::vec(0.5f64..3.0, 4)) {
        let mut p = ProjectorState::new(4, 1e-6, AlphaSchedule::Constant).unwrap();
        p.update(ArrayView1::from(&z[..])).unwrap();
        let pz = p.matrix().dot(&Array1::from(z.clone()));
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(pz.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1e-5 * norm);
    }

    #[test]
    fn prediction_is_scale_invariant(emb in matrix(6, 5), scale in 1e-3f64..1e3, seed in 0u64..1000) {
        let set = ebv::generate_basis(5, 4, 0.6, seed).unwrap();
        let mut registry = ClassRegistry::new(4);
        registry.bind_classes(&[7, 3, 1]).unwrap();
        let base = ebv::predict(emb.view(), &set, &registry).unwrap();
        let scaled = ebv::predict((&emb * scale).view(), &set, &registry).unwrap();
        prop_assert_eq!(base, scaled);
    }

    #[test]
    fn bound_classes_have_distinct_columns(labels in prop::collection::btree_set(0u32..50, 1..8)) {
        let labels: Vec<u32> = labels.into_iter().collect();
        let mut registry = ClassRegistry::new(8);
        registry.bind_classes(&labels).unwrap();
        let mut cols: Vec<usize> = labels.iter().map(|l| registry.column_of(*l).unwrap()).collect();
        cols.sort();
        cols.dedup();
        prop_assert_eq!(cols.len(), labels.len());
        prop_assert!(matches!(registry.bind_classes(&labels[..1]), Err(Error::AlreadyBound(_))));
    }

    #[test]
    fn config_survives_toml_round_trip(
        seed in 0..=i64::MAX as u64,
        lr in 1e-4f64..1.0,
        mu in 0.0f64..5.0,
        hidden in prop::collection::vec(1usize..600, 1..4),
        alpha in 1e-4f64..100.0,
    ) {
        let mut cfg = RunConfig { seed, ..RunConfig::default() };
        cfg.train.lr = lr;
        cfg.train.mu = mu;
        cfg.model.hidden = hidden;
        cfg.projector.alpha0 = alpha;
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml_with_overrides(&text, &[]).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn seeds_beyond_toml_range_are_rejected(seed in (i64::MAX as u64 + 1)..=u64::MAX) {
        let cfg = RunConfig { seed, ..RunConfig::default() };
        let rejected = matches!(cfg.validate(), Err(Error::Config(_)));
        prop_assert!(rejected);
        prop_assert!(cfg.to_toml().is_err());
    }

    #[test]
    fn earlier_tasks_are_sealed(tasks in 2usize..5, open in 1usize..5, seed in any::<u64>()) {
        let open = open.min(tasks - 1);
        let per_class = 3;
        let classes = (tasks * 2) as u32;
        let n = classes as usize * per_class;
        let make = |split| RawDataset {
            images: Array2::from_shape_fn((n, 4), |(i, j)| (i * 4 + j) as f64),
            labels: (0..n).map(|i| (i / per_class) as u32).collect(),
            split,
            image_shape: (2, 2),
        };
        let spec = SplitSpec { groups: (0..tasks as u32).map(|t| vec![2 * t, 2 * t + 1]).collect() };
        let mut stream = make_stream(Arc::new(make(Split::Train)), Arc::new(make(Split::Test)), &spec, 2, seed).unwrap();
        stream.open_task(open).unwrap();
        for t in 0..tasks {
            let read = stream.epoch_indices(t, 0);
            if t < open {
                let sealed_error = matches!(read, Err(Error::Sealed { .. }));
                prop_assert!(sealed_error);
                prop_assert!(stream.is_sealed(t));
            } else {
                prop_assert!(read.is_ok());
            }
        }
        prop_assert!(stream.open_task(open - 1).is_err() || open == 0);
    }
}

#[test]
fn basis_vectors_have_unit_norm() {
    let set: BasisVectorSet = ebv::generate_basis(16, 24, 0.5, 9).unwrap();
    for col in set.vectors().columns() {
        assert!((col.dot(&col) - 1.0).abs() < 1e-12);
    }
}
