use graphsh::data::{batch_iter, Normalizer, PoseDataset, PoseSample, JOINTS};
use graphsh::evaluation::{evaluate_poses, mpjpe, Pose};
use graphsh::skeleton::build_default_skeleton;
use graphsh::{Graph, Tensor};
use proptest::prelude::*;

fn coarse(k: usize, c: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-1e3..1e3f64, k * c)
        .prop_map(move |d| Tensor::new(vec![k, c], d).unwrap())
}

fn pose() -> impl Strategy<Value = Pose> {
    prop::array::uniform16(prop::array::uniform3(-2e3..2e3f64))
}

fn sample() -> impl Strategy<Value = PoseSample> {
    (
        prop::array::uniform16(prop::array::uniform2(0.0..1000.0f64)),
        pose(),
        prop::option::of(0u16..4),
    )
        .prop_map(|(input2d, target3d, action)| PoseSample {
            input2d,
            target3d,
            action,
        })
}

proptest! {
    #[test]
    fn pool_after_unpool_is_identity(y8 in coarse(8, 3), y4 in coarse(4, 2)) {
        let sk = build_default_skeleton();
        for (map, y) in sk.pool_maps.iter().zip([y8, y4]) {
            let mut g = Graph::new();
            let v = g.constant(y.clone());
            let up = g.duplicate_expand(v, &map.pairs).unwrap();
            let back = g.group_max(up, &map.pairs).unwrap();
            prop_assert_eq!(g.value(back), &y);
        }
    }

    #[test]
    fn unpool_after_pool_is_idempotent(x in coarse(16, 4)) {
        let pairs = build_default_skeleton().pool_maps[0].pairs.clone();
        let mut g = Graph::new();
        let v = g.constant(x);
        let p = g.group_max(v, &pairs).unwrap();
        let once = g.duplicate_expand(p, &pairs).unwrap();
        let p2 = g.group_max(once, &pairs).unwrap();
        let twice = g.duplicate_expand(p2, &pairs).unwrap();
        prop_assert_eq!(g.value(once), g.value(twice));
    }

    #[test]
    fn concat_slices_recover_inputs(a in coarse(16, 3), b in coarse(16, 5)) {
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let cat = g.concat_channels(&[va, vb]).unwrap();
        let out = g.value(cat);
        prop_assert_eq!(out.shape(), &[16, 8]);
        for k in 0..16 {
            for c in 0..3 {
                prop_assert_eq!(out.at(&[k, c]), a.at(&[k, c]));
            }
            for c in 0..5 {
                prop_assert_eq!(out.at(&[k, 3 + c]), b.at(&[k, c]));
            }
        }
    }

    #[test]
    fn mpjpe_is_a_translation_invariant_symmetric_distance(
        p in pose(),
        q in pose(),
        t in prop::array::uniform3(-1e4..1e4f64),
    ) {
        let e = mpjpe(&p, &q).unwrap();
        prop_assert!(e >= 0.0);
        prop_assert!((e - mpjpe(&q, &p).unwrap()).abs() < 1e-9);
        let shift = |x: &Pose| x.map(|j| [j[0] + t[0], j[1] + t[1], j[2] + t[2]]);
        prop_assert!((e - mpjpe(&shift(&p), &shift(&q)).unwrap()).abs() < 1e-9);
        prop_assert_eq!(mpjpe(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn normalizer_round_trips(samples in prop::collection::vec(sample(), 2..20)) {
        let ds = PoseDataset::new(samples);
        let norm = Normalizer::fit(&ds).unwrap();
        let refs: Vec<&PoseSample> = ds.samples.iter().collect();
        let inputs = norm.denormalize_inputs(&norm.inputs(&refs)).unwrap();
        let targets = norm.denormalize_targets(&norm.targets(&refs)).unwrap();
        for (i, s) in ds.samples.iter().enumerate() {
            let aligned = s.root_aligned_target();
            for j in 0..JOINTS {
                for c in 0..2 {
                    prop_assert!((inputs.at(&[i, j, c]) - s.input2d[j][c]).abs() < 1e-9);
                }
                for c in 0..3 {
                    prop_assert!((targets.at(&[i, j, c]) - aligned[j][c]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn each_epoch_visits_every_sample_once(n in 1usize..200, batch in 1usize..64, seed in any::<u64>()) {
        let batches: Vec<Vec<usize>> = batch_iter(n, batch, seed, 2).unwrap().collect();
        let per_epoch = n.div_ceil(batch);
        prop_assert_eq!(batches.len(), 2 * per_epoch);
        for epoch in batches.chunks(per_epoch) {
            let mut seen: Vec<usize> = epoch.iter().flatten().copied().collect();
            prop_assert!(epoch.iter().all(|b| b.len() <= batch && !b.is_empty()));
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn evaluation_ignores_sample_order(
        pairs in prop::collection::vec((sample(), pose()), 1..30),
        rot in 0usize..30,
    ) {
        let (samples, preds): (Vec<PoseSample>, Vec<Pose>) = pairs.into_iter().unzip();
        let a = evaluate_poses(&preds, &PoseDataset::new(samples.clone())).unwrap();
        let k = rot % samples.len();
        let (mut s2, mut p2) = (samples, preds);
        s2.rotate_left(k);
        p2.rotate_left(k);
        let b = evaluate_poses(&p2, &PoseDataset::new(s2)).unwrap();
        prop_assert!((a.overall_mpjpe_mm - b.overall_mpjpe_mm).abs() < 1e-9);
        prop_assert_eq!(a.per_action.len(), b.per_action.len());
        for (x, y) in a.per_action.iter().zip(&b.per_action) {
            prop_assert_eq!(x.count, y.count);
            prop_assert!((x.mpjpe_mm - y.mpjpe_mm).abs() < 1e-9);
        }
    }
}
