//! One line per acceptance criterion, written straight to stdout so it shows
//! up without `--nocapture`.

use std::io::Write;
use std::time::Instant;

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use essd_core::anchors::{decode, encode, iou, match_anchors, AnchorLabel, BBox, GroundTruth, Variances};
use essd_core::depth::{self, Depth};
use essd_core::eval::{self, average_precision, nms, ApMode, Detection, EvalConfig, EvalReport, GtBox};
use essd_core::gradcheck::{op_suite, SUITE_OPS};
use essd_core::graph::{validate, Fusion, LayerKind, NetGraph};
use essd_core::model::{ModelSpec, Variant, ESSD300_SUM_DESCRIPTOR, SSD300_DESCRIPTOR};
use essd_core::train::{self, heldout_seed, synth_dataset, write_weights, DatasetConfig, TrainConfig};

mod common;
use common::{ap_reference, match_reference, nms_reference};

fn report(n: usize, status: &str, detail: &str) {
    let line = format!("criterion {n:>2}: {status:<9} {detail}\n");
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn verdict(n: usize, ok: bool, detail: &str) {
    report(n, if ok { "PASS" } else { "FAIL" }, detail);
    assert!(ok, "criterion {n} failed: {detail}");
}

fn ints(xs: &[f64]) -> Vec<Depth> {
    xs.iter().map(|&x| Ratio::approximate_float(x).unwrap()).collect()
}

fn canonical_reports() -> (depth::DepthReport, depth::DepthReport) {
    let ssd = depth::analyze(&NetGraph::from_json(SSD300_DESCRIPTOR).unwrap()).unwrap();
    let essd = depth::analyze(&NetGraph::from_json(ESSD300_SUM_DESCRIPTOR).unwrap()).unwrap();
    (ssd, essd)
}

#[test]
fn criterion_01_depth_table() {
    let start = Instant::now();
    let (ssd, essd) = canonical_reports();
    let secs = start.elapsed().as_secs_f64();
    let ok = ssd.exact_depths() == ints(&[10.0, 15.0, 17.0, 19.0, 21.0, 23.0])
        && essd.exact_depths() == ints(&[14.5, 18.0, 20.0, 19.0, 21.0, 23.0])
        && secs < 1.0;
    let show = |r: &depth::DepthReport| r.exact_depths().iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
    verdict(1, ok, &format!("SSD300 [{}], ESSD300-sum [{}] in {:.3} s", show(&ssd), show(&essd), secs));
}

#[test]
fn criterion_02_coefficient_of_variation() {
    let (ssd, essd) = canonical_reports();
    let round = |v: f64| (v * 100.0).round() / 100.0;
    let ok = round(ssd.cv_percent) == 24.19 && round(essd.cv_percent) == 13.72;
    verdict(2, ok, &format!("CV SSD {:.2}%, ESSD {:.2}%", ssd.cv_percent, essd.cv_percent));
}

#[test]
fn criterion_03_gradient_suite() {
    let start = Instant::now();
    let rows = op_suite(&[0, 1, 2, 3, 4]).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let worst = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.op.as_str()).collect();
    let ok = failed.is_empty() && rows.len() == SUITE_OPS.len() && secs < 60.0;
    verdict(3, ok, &format!("{} ops x 5 seeds, worst rel err {worst:.2e}, failed {failed:?}, {secs:.2} s", rows.len()));
}

#[test]
fn criterion_04_structure() {
    let mut checked = 0;
    let mut problems = Vec::new();
    for fusion in Fusion::ALL {
        for extra in [true, false] {
            let spec = ModelSpec { variant: Variant::Essd, fusion, extra_pred_conv: extra, ..Default::default() };
            let g = spec.graph().unwrap();
            if let Err(v) = validate(&g.to_descriptor()) {
                problems.push(format!("{}: {v:?}", spec.name()));
            }
            for layer in g.layers().iter().filter(|l| l.name.ends_with("_ext_up_deconv")) {
                checked += 1;
                let fused_name = layer.name.trim_end_matches("_up_deconv");
                let low = fused_name.trim_end_matches("_ext");
                let high = &layer.inputs[0];
                let fused = g.layer(fused_name).unwrap();
                let (up, lo, deconv) = (g.shape(&fused.inputs[1]).unwrap(), g.shape(low).unwrap(), g.shape(&layer.name).unwrap());
                let branch = g.shape(&fused.inputs[0]).unwrap();
                if fused.kind != LayerKind::Concat && branch != up {
                    problems.push(format!("{fused_name}: branches {branch} vs {up}"));
                }
                if (deconv.height, deconv.width) != (lo.height, lo.width) {
                    problems.push(format!("{}: {deconv} vs {low} {lo}", layer.name));
                }
                for donor in [low, high.as_str()] {
                    if g.consumers(donor).len() < 2 {
                        problems.push(format!("donor {donor} has {:?}", g.consumers(donor)));
                    }
                }
            }
        }
    }
    let ok = problems.is_empty() && checked == 18;
    verdict(4, ok, &format!("6 toy ESSD graphs, {checked} extension modules checked, problems {problems:?}"));
}

fn train_and_eval(spec: &ModelSpec, config: &TrainConfig, data: &[train::SynthSample]) -> (Vec<u8>, EvalReport) {
    let outcome = train::train(spec, config, &[1, 2, 3], None).unwrap();
    let mut bytes = Vec::new();
    write_weights(&mut bytes, &outcome.weights).unwrap();
    let report = eval::evaluate(&spec.graph().unwrap(), &outcome.weights, &spec.anchors().unwrap(), data, &EvalConfig::default(), 1).unwrap();
    (bytes, report)
}

#[test]
fn criterion_05_learning_smoke_and_09_determinism() {
    let spec = ModelSpec::toy("ESSD-sum").unwrap();
    let config = TrainConfig::default();
    let iters = config.plan.total_iters();
    let data = train::synth_dataset_with(config.seed, &config.dataset, spec.input_size());
    let start = Instant::now();
    let (w1, r1) = train_and_eval(&spec, &config, &data);
    let secs = start.elapsed().as_secs_f64();
    let (w2, r2) = train_and_eval(&spec, &config, &data);

    let ok5 = config.dataset.n_images == 16 && config.batch_size == 8 && iters <= 2000 && r1.map >= 0.9 && secs < 1800.0;
    report(
        5,
        if ok5 { "PASS" } else { "FAIL" },
        &format!("ESSD-sum, 16 images, {iters} iterations: train mAP@0.5 {:.4} in {secs:.1} s", r1.map),
    );
    let ok9 = w1 == w2 && r1.to_json() == r2.to_json();
    report(9, if ok9 { "PASS" } else { "FAIL" }, &format!("two runs: weight files identical {}, eval reports identical {}", w1 == w2, r1 == r2));
    assert!(ok5 && ok9);
}

#[test]
fn criterion_06_directional_variants() {
    const TRAIN_IMAGES: usize = 128;
    const HELDOUT: usize = 200;
    let names = ["SSD", "ESSD-less", "ESSD-sum"];
    let mut means = [0.0; 3];
    for seed in 0..3u64 {
        let config = TrainConfig { seed, dataset: DatasetConfig { n_images: TRAIN_IMAGES, ..Default::default() }, ..Default::default() };
        let heldout = synth_dataset(heldout_seed(seed), HELDOUT, 64);
        for (k, name) in names.iter().enumerate() {
            let (_, r) = train_and_eval(&ModelSpec::toy(name).unwrap(), &config, &heldout);
            means[k] += r.map / 3.0;
        }
    }
    let (ssd, less, sum) = (means[0], means[1], means[2]);
    let ok = sum >= ssd && sum >= less;
    report(
        6,
        if ok { "PASS" } else { "SOFT-FAIL" },
        &format!("held-out mAP over 3 seeds: SSD {ssd:.4}, ESSD-less {less:.4}, ESSD-sum {sum:.4} (sum>=SSD {}, sum>=less {})", sum >= ssd, sum >= less),
    );
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let q = |rng: &mut ChaCha8Rng, n: u32| rng.gen_range(0..n) as f64 / 10.0;
    let (x, y) = (q(rng, 8), q(rng, 8));
    BBox::from_corners(x, y, (x + 0.1 + q(rng, 4)).min(1.0), (y + 0.1 + q(rng, 4)).min(1.0))
}

/// Every anchor list of length 1..=5 and gt list of length 0..=3 drawn from a
/// small universe of boxes with shared edges and equal overlaps.
fn exhaustive_matcher_mismatches() -> (usize, usize) {
    let universe = [
        BBox::from_corners(0.0, 0.0, 0.5, 0.5),
        BBox::from_corners(0.25, 0.0, 0.75, 0.5),
        BBox::from_corners(0.0, 0.25, 0.5, 0.75),
        BBox::from_corners(0.5, 0.5, 1.0, 1.0),
        BBox::from_corners(0.0, 0.0, 1.0, 1.0),
    ];
    fn sequences(n: usize, max_len: usize, min_len: usize) -> Vec<Vec<usize>> {
        let mut all: Vec<Vec<usize>> = vec![vec![]];
        let mut frontier = all.clone();
        for _ in 0..max_len {
            frontier = frontier.iter().flat_map(|s| (0..n).map(move |i| [s.as_slice(), &[i]].concat())).collect();
            all.extend(frontier.iter().cloned());
        }
        all.into_iter().filter(|s| s.len() >= min_len).collect()
    }
    let anchor_lists = sequences(universe.len(), 5, 1);
    let gt_lists = sequences(universe.len(), 3, 0);
    let (mut cases, mut bad) = (0, 0);
    for a in &anchor_lists {
        let anchors: Vec<BBox> = a.iter().map(|&i| universe[i]).collect();
        for g in &gt_lists {
            let gts: Vec<GroundTruth> = g.iter().enumerate().map(|(k, &i)| GroundTruth { bbox: universe[i], class: k }).collect();
            let m = match_anchors(&anchors, &gts, 0.5, Variances::default()).unwrap();
            let expected = match_reference(&anchors, &gts, 0.5);
            let got: Vec<Option<usize>> = m
                .labels
                .iter()
                .map(|l| match l {
                    AnchorLabel::Background => None,
                    AnchorLabel::Object { gt, .. } => Some(*gt),
                })
                .collect();
            cases += 1;
            bad += (got != expected) as usize;
        }
    }
    (cases, bad)
}

#[test]
fn criterion_07_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut nms_bad = 0;
    for _ in 0..200 {
        let n = rng.gen_range(0..30);
        let dets: Vec<Detection> =
            (0..n).map(|_| Detection { image_id: 0, class: 0, score: rng.gen_range(0..6) as f64 / 5.0, bbox: random_box(&mut rng) }).collect();
        nms_bad += (nms(&dets, 0.45) != nms_reference(&dets, 0.45)) as usize;
    }
    let mut ap_worst: f64 = 0.0;
    for _ in 0..100 {
        let dets: Vec<Detection> = (0..rng.gen_range(0..15))
            .map(|_| Detection { image_id: rng.gen_range(0..3), class: 0, score: rng.gen_range(0..6) as f64 / 5.0, bbox: random_box(&mut rng) })
            .collect();
        let gts: Vec<GtBox> = (0..rng.gen_range(1..8)).map(|_| GtBox { image_id: rng.gen_range(0..3), bbox: random_box(&mut rng) }).collect();
        ap_worst = ap_worst.max((average_precision(&dets, &gts, 0.5, ApMode::Voc2007) - ap_reference(&dets, &gts, 0.5)).abs());
    }
    let (cases, match_bad) = exhaustive_matcher_mismatches();
    let ok = nms_bad == 0 && ap_worst <= 1e-9 && match_bad == 0;
    verdict(
        7,
        ok,
        &format!("NMS 200 instances, {nms_bad} mismatches; AP 100 instances, max diff {ap_worst:.1e}; matcher {cases} exhaustive instances, {match_bad} mismatches"),
    );
}

#[test]
fn criterion_08_geometry() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let mut b = || BBox::new(rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.01..1.0), rng.gen_range(0.01..1.0));
        let (gt, anchor) = (b(), b());
        let back = decode(&encode(&gt, &anchor, Variances::default()).unwrap(), &anchor, Variances::default()).unwrap();
        for (x, y) in back.corners().iter().zip(gt.corners()) {
            worst = worst.max((x - y).abs());
        }
    }
    let i = iou(&BBox::from_corners(0.0, 0.0, 2.0, 2.0), &BBox::from_corners(1.0, 1.0, 3.0, 3.0));
    let ok = worst <= 1e-6 && (i - 1.0 / 7.0).abs() <= 1e-12;
    verdict(8, ok, &format!("roundtrip max err {worst:.1e} over 10^4 pairs; iou = {i:.15} (1/7 = {:.15})", 1.0 / 7.0));
}

#[test]
fn criterion_10_bench() {
    let spec = ModelSpec::toy("ESSD-sum").unwrap();
    let g = spec.graph().unwrap();
    let w = essd_core::graph::WeightStore::init(&g, &mut ChaCha8Rng::seed_from_u64(0));
    let image = synth_dataset(0, 1, spec.input_size()).remove(0).image;
    let r = eval::bench(&g, &w, &spec.anchors().unwrap(), &image, &Default::default(), 3, 20).unwrap();
    let json: serde_json::Value = serde_json::to_value(&r).unwrap();
    let fields = ["batch_size", "input_resolution", "n_warmup", "n_timed", "mean_ms", "median_ms", "fps"];
    let ok = r.batch_size == 1
        && r.input_resolution == "64x64"
        && fields.iter().all(|f| !json[f].is_null())
        && (r.fps - 1000.0 / r.mean_ms).abs() < 1e-9;
    verdict(10, ok, &format!("batch_size {}, input {}, mean {:.3} ms, median {:.3} ms, {:.1} FPS", r.batch_size, r.input_resolution, r.mean_ms, r.median_ms, r.fps));
}
