mod common;

use objdisc::bbox::BBox;
use objdisc::discovery::{check_feasible, objective, run, DiscoveryConfig};
use objdisc::evaluation::{corloc, detection_rate, Averaging, GroundTruth, ImageTruth, Predictions};
use objdisc::largescale::plan_budget;
use objdisc::matching::{score_all_pairs, sparsify_top_k, CosineKernel, NeighborSets};
use objdisc::proposals::{generate, ProposalParams};
use objdisc::region_features::{roi_pool, RegionDescriptor};
use objdisc::saliency::compute_persistence;
use objdisc::tensor_store::{load_array, save_array, FeatureTensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0f32..100.0, 0.0f32..100.0, 0.5f32..50.0, 0.5f32..50.0).prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
}

fn tensor(max_side: usize) -> impl Strategy<Value = FeatureTensor> {
    (1..=max_side, 1..=max_side, 1usize..=4).prop_flat_map(|(h, w, d)| {
        prop::collection::vec(prop_oneof![3 => Just(0.0f32), 7 => 0.0f32..5.0], h * w * d)
            .prop_map(move |v| FeatureTensor::new(h, w, d, v, "t").unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let (ab, ba) = (a.iou(&b), b.iou(&a));
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((a.iou(&a) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn npy_round_trips(shape in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let values: Vec<f32> = (0..n).map(|_| rng.gen_range(-1e6f32..1e6)).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.npy");
        save_array(&path, &shape, &values).unwrap();
        let (s, v) = load_array(&path).unwrap();
        prop_assert_eq!(s, shape);
        prop_assert_eq!(v, values);
    }

    #[test]
    fn persistence_matches_oracle(h in 1usize..9, w in 1usize..9, seed in any::<u64>(), floor in 0u32..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map = random_map(&mut rng, h, w, 6);
        let want = persistence_oracle(&map, floor as f32);
        let got = compute_persistence(&map, floor as f32).map(|m| {
            let mut v: Vec<_> = m.iter().map(|x| (x.row * w + x.col, x.saliency, x.death)).collect();
            v.sort_by_key(|e| e.0);
            v
        });
        match got {
            Ok(v) => prop_assert_eq!(v, want),
            Err(_) => prop_assert!(want.is_empty()),
        }
    }

    #[test]
    fn persistence_ranks_follow_order(h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map = random_map(&mut rng, h, w, 6);
        let maxima = compute_persistence(&map, 0.0).unwrap();
        for (i, m) in maxima.iter().enumerate() {
            prop_assert_eq!(m.rank, i);
            prop_assert!(m.persistence >= 0.0);
        }
        for p in maxima.windows(2) {
            prop_assert!(p[0].persistence >= p[1].persistence);
        }
    }

    #[test]
    fn proposals_satisfy_invariants(t in tensor(10), side in 16u32..300) {
        let params = ProposalParams { threshold_count: 8, max_maxima: 5, ..Default::default() };
        let Ok(set) = generate(&[t], &params, "im", (side, side)) else { return Ok(()) };
        prop_assert!(set.check_invariants().is_ok());
        prop_assert!(set.group_count() <= params.max_maxima);
        for p in &set.proposals {
            prop_assert!(p.bbox.is_valid());
            prop_assert!(p.bbox.is_within(side as f32, side as f32));
        }
    }

    #[test]
    fn sparsify_matches_full_sort(
        rows in 1usize..8,
        cols in 1usize..8,
        budget in 0usize..70,
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Few distinct values so ties are common.
        let dense: Vec<f32> = (0..rows * cols).map(|_| rng.gen_range(-2..4) as f32 * 0.25).collect();
        let got = sparsify_top_k(&dense, rows, cols, budget);
        prop_assert_eq!(got.entries, top_k_oracle(&dense, cols, budget));
    }

    #[test]
    fn pooled_values_come_from_the_box(t in tensor(8), grid in 1usize..4) {
        let (h, w, d) = t.shape();
        let size = ((w * 16) as u32, (h * 16) as u32);
        let whole = BBox::new(0.0, 0.0, size.0 as f32, size.1 as f32);
        // One bin over the whole image is the channelwise maximum.
        let pooled = roi_pool(&t, &whole, size, 1);
        for (c, &v) in pooled.iter().enumerate() {
            let max = (0..h * w).map(|p| t.at(p / w, p % w)[c]).fold(f32::NEG_INFINITY, f32::max);
            prop_assert_eq!(v, max);
        }
        let pooled = roi_pool(&t, &whole, size, grid);
        prop_assert_eq!(pooled.len(), grid * grid * d);
        for (i, &v) in pooled.iter().enumerate() {
            let c = i % d;
            prop_assert!((0..h * w).any(|p| t.at(p / w, p % w)[c] == v));
        }
    }

    #[test]
    fn sparse_objective_matches_dense(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng, 5, (1, 7), 3, 0.5);
        let a = random_assignment(&mut rng, &inst.problem);
        prop_assert_eq!(objective(&inst.problem, &a), dense_objective(&inst, &a));
    }

    #[test]
    fn discovery_is_feasible_and_ascending(
        seed in any::<u64>(),
        nu in 1usize..5,
        tau in 1usize..5,
        use_groups in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng, 7, (1, 10), 4, 0.4);
        let config = DiscoveryConfig { nu, tau, use_groups, seed, ..Default::default() };
        let sol = run(&inst.problem, &config).unwrap();
        prop_assert!(check_feasible(&inst.problem, &sol, &config).is_ok());
        for w in sol.objective_trace.windows(2) {
            prop_assert!(w[1] >= w[0]);
        }
        prop_assert_eq!(sol.objective, dense_objective(&inst, &sol.assignment(&inst.problem)));
        prop_assert_eq!(run(&inst.problem, &config).unwrap(), sol);
    }

    #[test]
    fn detection_rate_falls_with_threshold(
        truth in prop::collection::vec(prop::collection::vec(bbox(), 1..4), 1..5),
        preds in prop::collection::vec(prop::collection::vec(bbox(), 0..4), 1..5),
        z1 in 0.0f64..1.0,
        z2 in 0.0f64..1.0,
    ) {
        let (gt, p) = fixture(truth, preds);
        let (lo, hi) = (z1.min(z2), z1.max(z2));
        let at = |z| detection_rate(&p, &gt, z, Averaging::Pooled).unwrap().overall;
        prop_assert!(at(lo) >= at(hi));
    }

    #[test]
    fn corloc_grows_with_predictions(
        truth in prop::collection::vec(prop::collection::vec(bbox(), 1..4), 1..5),
        preds in prop::collection::vec(prop::collection::vec(bbox(), 0..4), 1..5),
        extra in prop::collection::vec(bbox(), 1..4),
    ) {
        let (gt, p) = fixture(truth, preds);
        let mut more = p.clone();
        for (k, b) in extra.into_iter().enumerate() {
            more.entry(format!("i{}", k % gt.len())).or_default().push(b);
        }
        let c = |p: &Predictions| corloc(p, &gt, 0.5, Averaging::Pooled).unwrap().overall;
        prop_assert!(c(&more) >= c(&p));
    }

    #[test]
    fn partition_is_balanced(n in 1usize..200, k in 1usize..12, seed in any::<u64>()) {
        prop_assume!(n >= k);
        let ids: Vec<String> = (0..n).map(|i| format!("im{i:04}")).collect();
        let plan = plan_budget(&ids, k, 5, u64::MAX / 2, seed).unwrap();
        let mut sizes = vec![0usize; k];
        for &p in plan.part_assignment.values() {
            sizes[p] += 1;
        }
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert_eq!(plan_budget(&ids, k, 5, u64::MAX / 2, seed).unwrap(), plan);
    }
}

fn fixture(truth: Vec<Vec<BBox>>, preds: Vec<Vec<BBox>>) -> (GroundTruth, Predictions) {
    let gt = truth
        .into_iter()
        .enumerate()
        .map(|(i, boxes)| {
            (
                format!("i{i}"),
                ImageTruth {
                    boxes,
                    class_label: None,
                },
            )
        })
        .collect();
    let p = preds
        .into_iter()
        .enumerate()
        .map(|(i, b)| (format!("i{i}"), b))
        .collect();
    (gt, p)
}

#[test]
fn scores_do_not_depend_on_thread_count() {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let regions: Vec<Vec<RegionDescriptor>> = (0..12)
        .map(|i| {
            (0..rng.gen_range(1..9))
                .map(|k| {
                    RegionDescriptor::new(
                        format!("im{i}"),
                        k,
                        (0..6).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
                    )
                })
                .collect()
        })
        .collect();
    let neighbors = NeighborSets {
        image_ids: (0..12).map(|i| format!("im{i}")).collect(),
        neighbors: (0..12)
            .map(|i| (0..12).filter(|&j| j != i && (i + j) % 3 != 0).collect())
            .collect(),
    };
    let one = score_all_pairs(&CosineKernel, &regions, &neighbors, 7, Some(1));
    for workers in [2, 4, 8] {
        assert_eq!(
            score_all_pairs(&CosineKernel, &regions, &neighbors, 7, Some(workers)),
            one
        );
    }
}
