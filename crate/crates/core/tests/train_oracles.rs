mod common;

use std::collections::{BTreeMap, HashSet};

use lmscnet::model::*;
use lmscnet::tensor::{self, Tensor};
use lmscnet::train::*;
use lmscnet::voxel::synthetic::{generate_scene, ScanParams};
use lmscnet::voxel::{
    flip_labels, ClassTable, ClassWeights, FlipPlan, GridDims, LabelGrid, OccupancyGrid, UNKNOWN,
};
use lmscnet::Error;
use proptest::prelude::*;
use rand::Rng;

fn scene(n: usize, seed: u64) -> (OccupancyGrid, LabelGrid) {
    let dims = GridDims::new(n, n, 8, 0.2).unwrap();
    let s = generate_scene(dims, &ClassTable::street(), &ScanParams::default(), seed, 0).unwrap();
    (s.occupancy, s.labels)
}

fn pairs(scenes: &[(OccupancyGrid, LabelGrid)]) -> Vec<Pair<'_>> {
    scenes.iter().map(|(o, l)| (o, l)).collect()
}

#[test]
fn level_loss_matches_softmax_oracle_on_four_voxels() {
    // 2x1x2 grid at level 0, three classes; one voxel unknown.
    let dims = GridDims::new(2, 1, 2, 0.2).unwrap();
    let gt = LabelGrid::from_vec(dims, vec![0, 2, UNKNOWN, 1]).unwrap();
    let logits = vec![
        0.5, -1.0, 2.0, 0.0, // class 0
        1.5, 0.25, -0.5, 3.0, // class 1
        -2.0, 1.0, 0.0, 0.5, // class 2
    ];
    let t = Tensor::<f64>::new(logits.clone(), &[1, 3, 2, 1, 2]).unwrap();
    let w = [0.5, 2.0, 1.25];
    let got = level_loss(&t, &[&gt], &w, 0).unwrap().item();
    let want = common::cross_entropy_oracle(
        &logits,
        1,
        3,
        4,
        &[0, 2, 0, 1],
        &w,
        &[true, true, false, true],
    );
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

#[test]
fn level_loss_uses_majority_pooled_targets() {
    let mut rng = common::rng(3);
    let dims = GridDims::new(4, 4, 2, 0.2).unwrap();
    let labels: Vec<u16> = (0..32)
        .map(|_| [0, 1, 2, UNKNOWN][rng.gen_range(0..4)])
        .collect();
    let gt = LabelGrid::from_vec(dims, labels.clone()).unwrap();
    let pooled = common::majority_pool_oracle(&labels, [4, 4, 2], 2);
    let logits = common::random_vec(&mut rng, 3 * 4);
    let t = Tensor::<f64>::new(logits.clone(), &[1, 3, 2, 2, 1]).unwrap();
    let got = level_loss(&t, &[&gt], &[1.0; 3], 1).unwrap().item();
    let mask: Vec<bool> = pooled.iter().map(|&l| l != UNKNOWN).collect();
    let targets: Vec<u16> = pooled
        .iter()
        .map(|&l| if l == UNKNOWN { 0 } else { l })
        .collect();
    let want = common::cross_entropy_oracle(&logits, 1, 3, 4, &targets, &[1.0; 3], &mask);
    assert!((got - want).abs() < 1e-12);

    let wrong = Tensor::<f64>::zeros(&[1, 3, 4, 4, 2]);
    assert!(matches!(
        level_loss(&wrong, &[&gt], &[1.0; 3], 1),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn saturated_logits_and_unknown_targets() {
    let dims = GridDims::new(2, 2, 2, 0.2).unwrap();
    let gt = LabelGrid::from_vec(dims, vec![0, 1, 1, 0, 2, 2, 0, 1]).unwrap();
    let mut logits = vec![0.0; 3 * 8];
    for (v, &l) in gt.labels().iter().enumerate() {
        logits[l as usize * 8 + v] = 30.0;
    }
    let t = Tensor::<f64>::new(logits, &[1, 3, 2, 2, 2]).unwrap();
    assert!(level_loss(&t, &[&gt], &[1.0; 3], 0).unwrap().item() < 1e-3);

    let unknown = LabelGrid::filled(dims, UNKNOWN);
    assert_eq!(
        level_loss(&t, &[&unknown], &[1.0; 3], 0).unwrap().item(),
        0.0
    );
}

#[test]
fn total_loss_weights_levels() {
    let l: BTreeMap<usize, Tensor<f64>> = (0..4)
        .map(|i| (i, Tensor::scalar(1.0 + i as f64)))
        .collect();
    assert_eq!(total_loss(&l, [1.0; 4]).unwrap().item(), 10.0);
    assert_eq!(total_loss(&l, [1.0, 0.0, 0.0, 0.0]).unwrap().item(), 1.0);
    assert_eq!(
        total_loss(&l, [0.5, 0.0, 2.0, 0.0]).unwrap().item(),
        0.5 + 6.0
    );
    let only0: BTreeMap<_, _> = [(0, Tensor::scalar(2.0))].into_iter().collect();
    assert!(total_loss(&only0, [1.0; 4]).is_err());
    assert!(total_loss(&only0, [0.0; 4]).is_err());
}

/// Tiny f64 network on an 8x8x8 grid with two semantic classes.
fn tiny_model() -> LmscNet<f64> {
    let cfg = ModelConfig {
        head_width: 2,
        aspp_dilations: vec![1, 2],
        ..ModelConfig::for_grid(8, 8, 8, 2)
    };
    LmscNet::new(cfg).unwrap()
}

fn tiny_batch() -> (OccupancyGrid, LabelGrid) {
    let mut rng = common::rng(11);
    let dims = GridDims::new(8, 8, 8, 0.2).unwrap();
    let mut occ = OccupancyGrid::empty(dims);
    let labels = (0..512)
        .map(|v| {
            let l = [0u16, 0, 1, 2, UNKNOWN][rng.gen_range(0..5)];
            if l == 1 || l == 2 {
                occ.set_linear(v, rng.gen_bool(0.5));
            }
            l
        })
        .collect();
    (occ, LabelGrid::from_vec(dims, labels).unwrap())
}

fn losses_of(
    model: &LmscNet<f64>,
    occ: &OccupancyGrid,
    gt: &LabelGrid,
) -> BTreeMap<usize, Tensor<f64>> {
    let x = lmscnet::voxel::grids_to_input::<f64>(&[occ]).unwrap();
    let out = model.forward(&x, &ScaleSelection::all()).unwrap();
    out.iter()
        .map(|(&l, t)| (l, level_loss(t, &[gt], &[1.0, 2.0, 3.0], l).unwrap()))
        .collect()
}

#[test]
fn total_gradient_is_sum_of_level_gradients_and_matches_differences() {
    let model = tiny_model();
    let (occ, gt) = tiny_batch();
    let alpha = [1.0, 0.5, 2.0, 1.0];

    let tot = total_loss(&losses_of(&model, &occ, &gt), alpha).unwrap();
    tot.backward().unwrap();
    let total_grads: Vec<Vec<f64>> = model
        .parameters()
        .iter()
        .map(|p| p.value.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let mut summed: Vec<Vec<f64>> = model
        .parameters()
        .iter()
        .map(|p| vec![0.0; p.numel()])
        .collect();
    for l in 0..4 {
        let fresh = tiny_model();
        let loss = losses_of(&fresh, &occ, &gt).remove(&l).unwrap();
        tensor::scale(&loss, alpha[l]).backward().unwrap();
        for (acc, p) in summed.iter_mut().zip(fresh.parameters()) {
            if let Some(g) = p.value.grad() {
                acc.iter_mut().zip(g).for_each(|(a, g)| *a += g);
            }
        }
    }
    for (a, b) in total_grads.iter().zip(&summed) {
        assert!(common::max_abs_diff(a, b) < 1e-12);
    }

    // Central differences on a few entries of every fifth parameter.
    let h = 1e-5;
    let objective = |m: &LmscNet<f64>| total_loss(&losses_of(m, &occ, &gt), alpha).unwrap().item();
    for pi in (0..model.parameters().len()).step_by(5) {
        for ei in [0, model.parameters()[pi].numel() - 1] {
            let bump = |d: f64| {
                let mut m = model.clone();
                let p = &mut m.parameters_mut()[pi];
                let mut data = p.value.data().to_vec();
                data[ei] += d;
                p.set_data(data).unwrap();
                objective(&m)
            };
            let numeric = (bump(h) - bump(-h)) / (2.0 * h);
            let analytic = total_grads[pi][ei];
            let denom = numeric.abs().max(analytic.abs()).max(1e-6);
            assert!(
                (numeric - analytic).abs() / denom < 1e-4,
                "{}[{ei}]: {analytic} vs {numeric}",
                model.parameters()[pi].name
            );
        }
    }
}

#[test]
fn completion_set_arithmetic_case() {
    // Ten occupied GT voxels; the prediction hits six of them and adds two.
    let n = 40;
    let mut truth = vec![0u16; n];
    let mut pred = vec![0u16; n];
    for v in 0..10 {
        truth[v] = 1 + (v % 3) as u16;
    }
    for v in 0..6 {
        pred[v] = truth[v];
    }
    pred[20] = 2;
    pred[21] = 1;
    let occ = |xs: &[u16]| {
        xs.iter()
            .enumerate()
            .filter(|(_, &l)| l != 0)
            .map(|(i, _)| i)
            .collect::<HashSet<_>>()
    };
    let (p, t) = (occ(&pred), occ(&truth));
    let inter = p.intersection(&t).count() as f64;
    let union = p.union(&t).count() as f64;

    let mut cm = ConfusionMatrix::new(4);
    cm.accumulate(&pred, &truth, &vec![true; n]).unwrap();
    let (iou, prec, rec) = cm.completion();
    assert_eq!(
        (iou, prec, rec),
        (
            inter / union,
            inter / p.len() as f64,
            inter / t.len() as f64
        )
    );
    assert_eq!((iou, prec, rec), (0.5, 0.75, 0.6));
    assert_eq!(cm.total(), n as u64);

    let mut perfect = ConfusionMatrix::new(4);
    perfect.accumulate(&truth, &truth, &vec![true; n]).unwrap();
    let m = ScaleMetrics::from_confusion(0, &perfect, IouAbsent::Exclude);
    assert_eq!(
        (m.completion_iou, m.precision, m.recall, m.miou),
        (1.0, 1.0, 1.0, 1.0)
    );
    assert!(m.class_iou.iter().all(|v| *v == Some(1.0)));

    let mut none = ConfusionMatrix::new(4);
    none.accumulate(&vec![0; n], &truth, &vec![true; n])
        .unwrap();
    assert_eq!(none.completion(), (0.0, 0.0, 0.0));
}

#[test]
fn per_class_iou_by_hand() {
    let truth = [1u16, 1, 2, 2, 0, 0];
    let pred = [1u16, 2, 2, 2, 1, 0];
    let mut cm = ConfusionMatrix::new(4);
    cm.accumulate(&pred, &truth, &[true; 6]).unwrap();
    // class 1: TP 1, FP 1 (voxel 4), FN 1 (voxel 1); class 2: TP 2, FP 1.
    assert_eq!(cm.class_iou(1), Some(1.0 / 3.0));
    assert_eq!(cm.class_iou(2), Some(2.0 / 3.0));
    assert_eq!(cm.class_iou(3), None);
    let ex = ScaleMetrics::from_confusion(0, &cm, IouAbsent::Exclude);
    let zero = ScaleMetrics::from_confusion(0, &cm, IouAbsent::Zero);
    assert!((ex.miou - 0.5).abs() < 1e-15);
    assert!((zero.miou - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn evaluation_against_own_predictions_is_perfect() {
    let classes = ClassTable::street();
    let cfg = ModelConfig::for_grid(32, 32, 8, 4);
    let model = LmscNet::<f32>::new(cfg).unwrap();
    let (occ, mut gt) = scene(32, 4);
    let x = lmscnet::voxel::grid_to_input::<f32>(&occ);
    let pred = argmax_labels(
        &model
            .predict(&x, &ScaleSelection::single(0).unwrap())
            .unwrap()[&0],
    )
    .unwrap();
    // Keep the unknown mask of the scene, take labels from the model.
    for (g, p) in gt.labels_mut().iter_mut().zip(pred) {
        if *g != UNKNOWN {
            *g = p;
        }
    }
    let rep = evaluate(
        &model,
        &[(&occ, &gt)],
        &ScaleSelection::single(0).unwrap(),
        &classes,
        IouAbsent::Exclude,
    )
    .unwrap();
    let s = &rep.scales[0];
    assert_eq!(s.voxels, gt.known_count() as u64);
    assert!(s.class_iou.iter().flatten().all(|&v| v == 1.0));
    if s.class_iou.iter().any(Option::is_some) {
        assert_eq!(
            (s.completion_iou, s.precision, s.recall, s.miou),
            (1.0, 1.0, 1.0, 1.0)
        );
    }
}

#[test]
fn confusion_total_is_known_voxels_per_scale() {
    let classes = ClassTable::street();
    let model = LmscNet::<f32>::new(ModelConfig::for_grid(32, 32, 8, 4)).unwrap();
    let data = [scene(32, 1), scene(32, 2)];
    let rep = evaluate(
        &model,
        &pairs(&data),
        &ScaleSelection::all(),
        &classes,
        IouAbsent::Exclude,
    )
    .unwrap();
    for s in &rep.scales {
        let known: usize = data
            .iter()
            .map(|(_, g)| {
                lmscnet::voxel::majority_pool(g, 1 << s.level)
                    .unwrap()
                    .known_count()
            })
            .sum();
        assert_eq!(s.voxels, known as u64, "level {}", s.level);
    }
    let again = evaluate(
        &model,
        &pairs(&data),
        &ScaleSelection::all(),
        &classes,
        IouAbsent::Exclude,
    )
    .unwrap();
    assert_eq!(rep, again);
}

#[test]
fn flipped_evaluation_has_identical_counts() {
    let classes = 5;
    let mut rng = common::rng(21);
    let dims = GridDims::new(8, 6, 4, 0.2).unwrap();
    let random_grid = |rng: &mut rand_chacha::ChaCha8Rng| {
        let v = (0..dims.num_voxels())
            .map(|_| [0, 1, 2, 3, 4, UNKNOWN][rng.gen_range(0..6)])
            .collect();
        LabelGrid::from_vec(dims, v).unwrap()
    };
    let (pred, truth) = (random_grid(&mut rng), random_grid(&mut rng));
    let count = |p: &LabelGrid, t: &LabelGrid| {
        let mask: Vec<bool> = t.labels().iter().map(|&l| l != UNKNOWN).collect();
        let p: Vec<u16> = p
            .labels()
            .iter()
            .map(|&l| if l == UNKNOWN { 0 } else { l })
            .collect();
        let mut cm = ConfusionMatrix::new(classes);
        cm.accumulate(&p, t.labels(), &mask).unwrap();
        cm
    };
    let base = count(&pred, &truth);
    for plan in [
        FlipPlan {
            flip_x: true,
            flip_y: false,
        },
        FlipPlan {
            flip_x: false,
            flip_y: true,
        },
        FlipPlan {
            flip_x: true,
            flip_y: true,
        },
    ] {
        assert_eq!(
            count(&flip_labels(&pred, plan), &flip_labels(&truth, plan)),
            base
        );
    }
}

#[test]
fn report_table_and_json_twin() {
    let mut cm = ConfusionMatrix::new(3);
    cm.accumulate(&[1, 1, 1, 0], &[1, 1, 2, 0], &[true; 4])
        .unwrap();
    let report = MetricsReport {
        class_names: vec!["road".into(), "car".into()],
        iou_absent: IouAbsent::Exclude,
        scales: vec![ScaleMetrics::from_confusion(0, &cm, IouAbsent::Exclude)],
    };
    let mut out = Vec::new();
    report_metrics(&report, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert!(text.lines().next().unwrap().contains("1:1"));
    assert!(text.contains(" 0.00"), "{text}");
    assert!(text.contains("66.67"), "{text}");
    assert_eq!(MetricsReport::from_json(&report.to_json()).unwrap(), report);

    let empty = MetricsReport {
        scales: vec![],
        ..report
    };
    let mut out = Vec::new();
    report_metrics(&empty, &mut out).unwrap();
    assert_eq!(String::from_utf8(out).unwrap().lines().count(), 1);
}

#[test]
fn benchmark_contract() {
    let model = LmscNet::<f32>::new(ModelConfig::for_grid(16, 16, 8, 4)).unwrap();
    let s = ScaleSelection::all();
    assert!(matches!(
        benchmark(&model, &s, 9, 3, 0),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        benchmark(&model, &s, 10, 2, 0),
        Err(Error::Config(_))
    ));
    let r = benchmark(&model, &s, 10, 3, 0).unwrap();
    assert_eq!(r.params, model.count_params());
    assert_eq!(r.scales.len(), 4);
    for st in &r.scales {
        assert_eq!(st.fps, 1e3 / st.mean_ms);
        assert!(st.min_ms <= st.median_ms && st.median_ms <= st.max_ms);
        assert_eq!(
            st.flops,
            model.count_flops(&ScaleSelection::single(st.level).unwrap())
        );
    }
}

#[test]
fn training_is_deterministic_and_logs_epochs() {
    let data = [scene(32, 1), scene(32, 2), scene(32, 3)];
    let weights = ClassWeights::from_grids(data.iter().map(|d| &d.1), 5);
    let cfg = TrainConfig {
        batch_size: 2,
        epochs: 2,
        seed: 9,
        ..Default::default()
    };
    let model = LmscNet::<f32>::new(ModelConfig::for_grid(32, 32, 8, 4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = train(
        model.clone(),
        &pairs(&data),
        &weights,
        &cfg,
        Some(dir.path()),
    )
    .unwrap();
    let b = train(model, &pairs(&data), &weights, &cfg, None).unwrap();
    let losses = |o: &TrainOutcome<f32>| o.log.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(losses(&a), losses(&b));
    assert_eq!(
        save_checkpoint(&a.model, Some(&a.adam)),
        save_checkpoint(&b.model, Some(&b.adam))
    );
    assert_eq!(a.log[0].batches, 1);
    assert_eq!(a.log[1].lr, 0.001 * 0.98);

    let log = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let rec: EpochRecord = serde_json::from_str(log.lines().nth(1).unwrap()).unwrap();
    assert_eq!(rec.epoch, 1);
    for f in ["epoch_000.ckpt", "epoch_001.ckpt", "final.ckpt"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let saved = read_checkpoint::<f32>(&dir.path().join("final.ckpt")).unwrap();
    assert_eq!(saved.adam.unwrap(), a.adam);
}

#[test]
fn singlescale_leaves_coarse_heads_untouched() {
    let data = [scene(32, 5)];
    let weights = ClassWeights::from_grids([&data[0].1], 5);
    let cfg = TrainConfig {
        batch_size: 1,
        singlescale: true,
        ..Default::default()
    };
    let model = LmscNet::<f32>::new(ModelConfig::for_grid(32, 32, 8, 4)).unwrap();
    let before = model.clone();
    let mut tr = Trainer::new(model, cfg, &weights).unwrap();
    for _ in 0..3 {
        let r = tr.step(&pairs(&data), 0.01).unwrap();
        assert_eq!(r.levels.keys().copied().collect::<Vec<_>>(), vec![0]);
    }
    for (a, b) in before.parameters().iter().zip(tr.model().parameters()) {
        if ["head.l1.", "head.l2.", "head.l3."]
            .iter()
            .any(|p| a.name.starts_with(p))
        {
            assert_eq!(a.value.data(), b.value.data(), "{}", a.name);
        }
        if a.name == "head.l0.classifier.bias" {
            assert_ne!(a.value.data(), b.value.data());
        }
    }
}

#[test]
fn exploding_run_aborts_with_position() {
    let data = [scene(32, 6)];
    let weights = ClassWeights::from_grids([&data[0].1], 5);
    let cfg = TrainConfig {
        lr0: 1e37,
        batch_size: 1,
        epochs: 3,
        ..Default::default()
    };
    let model = LmscNet::<f32>::new(ModelConfig::for_grid(32, 32, 8, 4)).unwrap();
    match train(model, &pairs(&data), &weights, &cfg, None) {
        Err(Error::NonFinite { epoch, batch, loss }) => {
            assert!(!loss.is_finite());
            assert_eq!(batch, 0);
            assert!(epoch >= 1);
        }
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("training with lr 1e37 stayed finite"),
    }
}

#[test]
fn batch_larger_than_dataset_is_a_config_error() {
    let data = [scene(16, 1)];
    let weights = ClassWeights::uniform(5);
    let model = LmscNet::<f32>::new(ModelConfig::for_grid(16, 16, 8, 4)).unwrap();
    let err = train(
        model,
        &pairs(&data),
        &weights,
        &TrainConfig::default(),
        None,
    )
    .err()
    .expect("batch of 4 from 1 sample");
    assert!(matches!(err, Error::Config(_)), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn argmax_ignores_per_voxel_shifts(
        logits in proptest::collection::vec(-80i32..80, 4 * 6),
        shifts in proptest::collection::vec(-1600i32..1600, 6),
    ) {
        // Values on a 1/16 grid so every addition is exact.
        let logits: Vec<f64> = logits.iter().map(|&v| v as f64 / 16.0).collect();
        let shifts: Vec<f64> = shifts.iter().map(|&v| v as f64 / 16.0).collect();
        let base = Tensor::<f64>::new(logits.clone(), &[1, 4, 6, 1, 1]).unwrap();
        let moved: Vec<f64> = logits.iter().enumerate().map(|(i, &v)| v + shifts[i % 6]).collect();
        let moved = Tensor::<f64>::new(moved, &[1, 4, 6, 1, 1]).unwrap();
        prop_assert_eq!(argmax_labels(&base).unwrap(), argmax_labels(&moved).unwrap());
    }

    #[test]
    fn unknown_voxels_change_neither_loss_nor_gradient(
        labels in proptest::collection::vec(0u16..4, 8),
        unknown in proptest::collection::vec(any::<bool>(), 8),
        logits in proptest::collection::vec(-4.0f64..4.0, 32),
        noise in proptest::collection::vec(-4.0f64..4.0, 32),
    ) {
        let dims = GridDims::new(2, 2, 2, 0.2).unwrap();
        let gt: Vec<u16> = labels.iter().zip(&unknown).map(|(&l, &u)| if u { UNKNOWN } else { l }).collect();
        let gt = LabelGrid::from_vec(dims, gt).unwrap();
        let run = |data: Vec<f64>| {
            let t = Tensor::<f64>::param(data, &[1, 4, 2, 2, 2]).unwrap();
            let l = level_loss(&t, &[&gt], &[1.0, 0.5, 2.0, 1.5], 0).unwrap();
            l.backward().unwrap();
            (l.item(), t.grad().unwrap())
        };
        let perturbed: Vec<f64> = logits
            .iter()
            .enumerate()
            .map(|(i, &v)| if unknown[i % 8] { v + noise[i] } else { v })
            .collect();
        let (a, ga) = run(logits);
        let (b, gb) = run(perturbed);
        prop_assert!(a >= 0.0);
        prop_assert_eq!(a, b);
        prop_assert_eq!(ga, gb);
    }
}
