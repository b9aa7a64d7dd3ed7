//! Acceptance criteria A1–A10. Runs as a plain binary so every criterion
//! prints one PASS/FAIL line; exits nonzero when any criterion fails.
//!
//! `cargo test --test acceptance -- A3 A7` runs a subset.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use rgbtvg_core::ama::{build_asymmetric_adapters, AmaConfig, Stream};
use rgbtvg_core::annotation::{parse_response, PromptKind};
use rgbtvg_core::backbone::{build_toy_encoder, FrozenEncoder, Image, Role, TokenSequence};
use rgbtvg_core::dataset::{classify_size, percent_of, DatasetManifest, SizeClass, Split};
use rgbtvg_core::geometry::{acc_at_threshold, iou, to_norm, to_pixel, ImageDims, NormBox, PixelBox};
use rgbtvg_core::harness::oracles::*;
use rgbtvg_core::harness::selfcheck::{gradient_check_toy, overfit, GRADCHECK_PER_TENSOR};
use rgbtvg_core::harness::synthetic::{
    generate_pair, generate_synthetic_corpus, COLORS, LANDMARKS, MANIFEST_FILE, RELATIONS, SHAPES,
};
use rgbtvg_core::harness::SyntheticCorpusSpec;
use rgbtvg_core::lavs::{text_queried_enhance, EnhanceParams};
use rgbtvg_core::params::named_rng;
use rgbtvg_core::tensor::Matrix;
use rgbtvg_core::train_eval::*;
use rgbtvg_core::vgnet::{ModalityMode, ModelConfig, VgNet};

type Outcome = Result<String, String>;

macro_rules! check {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

struct Criterion {
    id: &'static str,
    title: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

const CRITERIA: &[Criterion] = &[
    Criterion { id: "A1", title: "identity at init", budget: Duration::from_secs(30), run: a1_identity_at_init },
    Criterion { id: "A2", title: "gradient correctness", budget: Duration::from_secs(300), run: a2_gradients },
    Criterion { id: "A3", title: "freezing", budget: Duration::from_secs(60), run: a3_freezing },
    Criterion { id: "A4", title: "shape and normalization", budget: Duration::from_secs(10), run: a4_shapes },
    Criterion { id: "A5", title: "oracle equivalence", budget: Duration::from_secs(60), run: a5_oracles },
    Criterion { id: "A6", title: "overfit sanity", budget: Duration::from_secs(600), run: a6_overfit },
    Criterion { id: "A7", title: "asymmetry audit", budget: Duration::from_secs(10), run: a7_asymmetry },
    Criterion { id: "A8", title: "pipeline fidelity", budget: Duration::from_secs(10), run: a8_pipeline },
    Criterion { id: "A9", title: "split predicates", budget: Duration::from_secs(10), run: a9_splits },
    Criterion { id: "A10", title: "determinism", budget: Duration::from_secs(600), run: a10_determinism },
];

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for c in CRITERIA {
        if !filters.is_empty() && !filters.iter().any(|f| f == c.id) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed();
        let r = match r {
            Ok(d) if secs > c.budget => Err(format!("{d}; over the {}s budget", c.budget.as_secs())),
            other => other,
        };
        let (tag, detail) = match &r {
            Ok(d) => ("PASS", d),
            Err(e) => ("FAIL", e),
        };
        println!("{:<4} {tag}  {:<24} {:>7.2}s  {detail}", c.id, c.title, secs.as_secs_f64());
        failed += usize::from(r.is_err());
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn random_image(rng: &mut ChaCha8Rng, size: usize) -> Image {
    let data: Vec<f64> = (0..size * size * 3).map(|_| rng.random_range(0.0..1.0)).collect();
    Image::new(size, data).expect("image")
}

fn random_expression(rng: &mut ChaCha8Rng) -> String {
    format!(
        "the {} {} {} the {}",
        COLORS[rng.random_range(0..COLORS.len())].0,
        SHAPES[rng.random_range(0..SHAPES.len())],
        RELATIONS[rng.random_range(0..RELATIONS.len())],
        LANDMARKS[rng.random_range(0..LANDMARKS.len())]
    )
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

fn a1_identity_at_init() -> Outcome {
    let mut adapted = ModelConfig::toy();
    adapted.lavs.enabled = false;
    let frozen_cfg = ModelConfig {
        use_ama: false,
        ..adapted.clone()
    };
    let model = ok(VgNet::new(adapted.clone()))?;
    let frozen = ok(VgNet::new(frozen_cfg))?;
    let enc = model.encoder();
    let (rgb_ad, tir_ad) = ok(build_asymmetric_adapters(&adapted.ama, enc, adapted.seed))?;
    check!(
        rgb_ad.iter().chain(&tir_ad).all(|a| a.b.data().iter().all(|&v| v == 0.0)),
        "adapter B factors are not zero at init"
    );
    let size = enc.config().image_size;
    let mut rng = named_rng(1, "a1");
    let (mut worst_tower, mut worst_box): (f64, f64) = (0.0, 0.0);
    for _ in 0..50 {
        let (rgb, tir) = (random_image(&mut rng, size), random_image(&mut rng, size));
        let expr = random_expression(&mut rng);
        for (img, ads) in [(&rgb, &rgb_ad), (&tir, &tir_ad)] {
            let mut x = ok(enc.embed(img, Role::VisualRgb))?;
            let mut y = x.clone();
            for l in 1..=enc.config().num_layers {
                let here: Vec<_> = ads.iter().filter(|a| a.layer == l).cloned().collect();
                x = ok(enc.vision_layer(l, &x, &here))?;
                y = ok(enc.vision_layer(l, &y, &[]))?;
            }
            for (a, b) in x.data.data().iter().zip(y.data.data()) {
                worst_tower = worst_tower.max(rel_err(*a, *b));
            }
        }
        let p = ok(model.forward(&rgb, &tir, &expr))?.bbox.to_array();
        let q = ok(frozen.forward(&rgb, &tir, &expr))?.bbox.to_array();
        for (a, b) in p.iter().zip(q) {
            worst_box = worst_box.max(rel_err(*a, b));
        }
    }
    check!(
        worst_tower < 1e-6 && worst_box < 1e-6,
        "max relative error: tower {worst_tower:.2e}, box {worst_box:.2e}"
    );
    Ok(format!("50 inputs; max relative error tower {worst_tower:.1e}, box {worst_box:.1e}"))
}

fn a2_gradients() -> Outcome {
    let report = ok(gradient_check_toy(GradCheckOptions {
        per_tensor: Some(GRADCHECK_PER_TENSOR),
        ..GradCheckOptions::default()
    }))?;
    let groups = report.by_group();
    let want = [
        "AMA adapters",
        "LAVS enhancement",
        "LAVS synergy",
        "RGB projection",
        "TIR projection",
        "text projection",
        "VL positions",
        "VL transformer",
        "regression token",
        "head",
    ];
    let missing: Vec<&str> = want.iter().copied().filter(|g| !groups.contains_key(*g)).collect();
    check!(missing.is_empty(), "parameter groups not covered: {missing:?}");
    let max = report.max_rel_error();
    check!(max < 1e-4, "max relative error {max:.2e} at {:?}", report.worst());
    let summary: Vec<String> = groups.iter().map(|(g, (n, e))| format!("{g} {n}@{e:.0e}")).collect();
    Ok(format!("{} entries, max {max:.1e} [{}]", report.entries.len(), summary.join(", ")))
}

fn small_corpus(dir: &Path, n: usize, seed: u64) -> Result<DatasetManifest, String> {
    let spec = SyntheticCorpusSpec {
        num_records: n,
        seed,
        ..SyntheticCorpusSpec::default()
    };
    ok(generate_synthetic_corpus(&spec, dir))
}

fn a3_freezing() -> Outcome {
    let dir = ok(tempfile::tempdir())?;
    let manifest = small_corpus(dir.path(), 24, 2)?;
    let cfg = ModelConfig::toy();
    let model = ok(VgNet::new(cfg.clone()))?;
    let before = model.encoder().checksum();
    let trainable_before = model.trainable_parameters().checksum();
    let train_cfg = TrainConfig {
        batch_size: 2,
        learning_rate: 1e-3,
        max_steps: Some(100),
        ..TrainConfig::default()
    };
    let out = ok(train_model(model, &train_cfg, &manifest))?;
    check!(out.log.step_losses.len() == 100, "{} steps ran", out.log.step_losses.len());
    let fresh = ok(build_toy_encoder(&cfg.encoder))?.checksum();
    for (name, m) in [("last", &out.last), ("best", &out.best)] {
        let after = m.encoder().checksum();
        check!(after == before && after == fresh, "{name}: frozen checksum changed: {before} → {after}");
    }
    check!(out.log.frozen_checksum == before, "log records {}", out.log.frozen_checksum);
    check!(
        out.last.trainable_parameters().checksum() != trainable_before,
        "trainable parameters did not move"
    );
    Ok(format!("frozen checksum {} unchanged after 100 steps", &before[..16]))
}

fn a4_shapes() -> Outcome {
    let mut rng = named_rng(4, "a4");
    let mut worst_row: f64 = 0.0;
    let mut cases = 0;
    for t in [1, 3, 8, 16] {
        for n in [1, 5, 17, 65] {
            for d in [2, 8, 32] {
                let dt = d + 3;
                let mut m = |r, c| Matrix::random_normal(r, c, 1.0, &mut rng);
                let (f, text) = (m(n, d), m(t, dt));
                let params = EnhanceParams {
                    q: m(dt, d),
                    k: m(d, d),
                    v: m(d, d),
                };
                let (out, a) = ok(text_queried_enhance(
                    &ok(TokenSequence::new(f, Role::VisualTir))?,
                    &ok(TokenSequence::new(text, Role::Text))?,
                    &params,
                ))?;
                check!(out.data.shape() == (n, d), "(T, N, d) = ({t}, {n}, {d}): output {:?}", out.data.shape());
                check!(a.matrix().shape() == (t, n), "attention {:?}", a.matrix().shape());
                worst_row = worst_row.max(a.max_row_sum_error());
                cases += 1;
            }
        }
    }
    check!(worst_row < 1e-6, "attention row sum error {worst_row:.2e}");

    let model = ok(VgNet::new(ModelConfig::toy()))?;
    let size = model.encoder().config().image_size;
    let mut boxes = 0;
    let extremes = [Image::filled(size, 0.0), Image::filled(size, 1.0)];
    for i in 0..12 {
        let (rgb, tir) = if i < 2 {
            (extremes[i].clone(), extremes[1 - i].clone())
        } else {
            (random_image(&mut rng, size), random_image(&mut rng, size))
        };
        let expr = random_expression(&mut rng);
        let p = ok(model.forward(&rgb, &tir, &expr))?;
        let b = p.bbox.to_array();
        check!(b.iter().all(|v| *v > 0.0 && *v < 1.0), "prediction {b:?} outside (0, 1)");
        for (_, _, a) in &p.attention {
            worst_row = worst_row.max(a.max_row_sum_error());
        }
        boxes += 1;
    }
    check!(worst_row < 1e-6, "model attention row sum error {worst_row:.2e}");
    Ok(format!("{cases} (T, N, d) shapes; {boxes} boxes in (0, 1)⁴; row sum error {worst_row:.1e}"))
}

fn a5_oracles() -> Outcome {
    let mut rng = named_rng(5, "a5");
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let scale = rng.random_range(1..=4);
        let (a, b) = (random_grid_box(&mut rng, 16, scale), random_grid_box(&mut rng, 16, scale));
        let r = ok(oracle_iou_rasterized(&a, &b, scale))?;
        let err = (iou(&a, &b) - r.iou).abs();
        check!(err <= 2.0 / r.union_cells as f64, "{a:?} vs {b:?}: |Δ| = {err:.3e}");
        worst = worst.max(err);
    }

    let dir = ok(tempfile::tempdir())?;
    let manifest = small_corpus(dir.path(), 160, 9)?;
    // Jittered ground truth puts IoUs on both sides of the threshold.
    let jitter: Vec<PredictionDump> = manifest
        .records
        .iter()
        .filter(|r| r.split != Split::Train)
        .map(|r| {
            let g = to_norm(&r.bbox, r.dims)?;
            let mut j = |v: f64, s: f64| (v + rng.random_range(-s..s)).clamp(0.01, 0.99);
            let p = NormBox::new(j(g.cx, 0.3 * g.w), j(g.cy, 0.3 * g.h), j(g.w, 0.3 * g.w), j(g.h, 0.3 * g.h))?;
            dump_entry(r, &p)
        })
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let model = ok(VgNet::new(ModelConfig::toy()))?;
    let model_dump = ok(evaluate(&model, &manifest, "init"))?.predictions;

    let mut cells = 0;
    let mut hits = BTreeSet::new();
    for (name, dump) in [("jitter", jitter), ("model", model_dump)] {
        let path = dir.path().join(format!("{name}.jsonl"));
        ok(write_predictions(&path, &dump))?;
        let dump = ok(read_predictions(&path))?;
        let report = ok(report_from_predictions(&manifest, &dump, ReportMeta::for_model(name, &model)))?;
        let brute = brute_force_cells(&manifest.records, &dump);
        for c in &report.splits {
            let want = brute.get(&("split".to_string(), c.key.clone())).copied().unwrap_or((0, 0));
            check!(want == (c.count, c.correct), "{name} split {}: {want:?} vs {}/{}", c.key, c.count, c.correct);
            cells += 1;
        }
        for b in &report.breakdowns {
            for c in &b.cells {
                let want = brute.get(&(b.axis.name().to_string(), c.key.clone())).copied().unwrap_or((0, 0));
                check!(want == (c.count, c.correct), "{name} {} {}: {want:?} vs {}/{}", b.axis, c.key, c.count, c.correct);
                cells += 1;
            }
        }
        let test: Vec<&PredictionDump> = dump
            .iter()
            .filter(|p| manifest.get(&p.id).is_some_and(|r| r.split == Split::Test))
            .collect();
        let to_box = |c: [f64; 4]| PixelBox::new(c[0], c[1], c[2] - c[0], c[3] - c[1]);
        let preds: Vec<PixelBox> = test.iter().map(|p| to_box(p.pred_bbox)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
        let gts: Vec<PixelBox> = test.iter().map(|p| to_box(p.gt_bbox)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
        let acc = ok(acc_at_threshold(&preds, &gts, 0.5))?;
        let cell = report.split("test").ok_or("no test row")?;
        check!(
            cell.accuracy == Some(acc) && (acc * test.len() as f64).round() as usize == cell.correct,
            "{name}: Acc@0.5 {acc} vs report {:?}",
            cell.accuracy
        );
        hits.insert((name, cell.correct, cell.count));
    }
    Ok(format!("1000 IoU pairs (max |Δ| {worst:.1e}); {cells} cells exact; test hits {hits:?}"))
}

fn a6_overfit() -> Outcome {
    let mut parts = Vec::new();
    for mode in [ModalityMode::Rgbt, ModalityMode::Rgb, ModalityMode::Tir] {
        let dir = ok(tempfile::tempdir())?;
        let (acc, log) = ok(overfit(mode, dir.path(), 500))?;
        let hits = (acc * 16.0).round() as usize;
        check!(log.step_losses.len() <= 500, "{mode}: {} steps", log.step_losses.len());
        check!(hits >= 15, "{mode}: train Acc@0.5 {hits}/16");
        parts.push(format!("{mode} {hits}/16"));
    }
    Ok(format!("{} within 500 steps", parts.join(", ")))
}

fn trainable_count(cfg: &ModelConfig) -> Result<usize, String> {
    Ok(ok(VgNet::new(cfg.clone()))?.trainable_parameters().num_scalars())
}

fn a7_asymmetry() -> Outcome {
    let base = ModelConfig {
        use_ama: false,
        lavs: rgbtvg_core::lavs::LavsConfig {
            enabled: false,
            ..ModelConfig::toy().lavs
        },
        ..ModelConfig::toy()
    };
    let (d, layers) = (base.encoder.dim, base.encoder.num_layers);
    let frozen_only = trainable_count(&base)?;
    let mut rows = Vec::new();
    for (r_v, r_t) in [(4, 4), (4, 8), (8, 32)] {
        let cfg = ModelConfig {
            use_ama: true,
            ama: AmaConfig::with_ranks(r_v, r_t),
            ..base.clone()
        };
        let model = ok(VgNet::new(cfg.clone()))?;
        let p = model.trainable_parameters();
        let (rgb, tir) = (adapter_param_formula(d, layers, 2, r_v), adapter_param_formula(d, layers, 2, r_t));
        check!(
            p.num_scalars_with_prefix("ama.rgb.") == rgb && p.num_scalars_with_prefix("ama.tir.") == tir,
            "({r_v}, {r_t}): adapter counts {} / {}",
            p.num_scalars_with_prefix("ama.rgb."),
            p.num_scalars_with_prefix("ama.tir.")
        );
        check!(
            p.num_scalars() - frozen_only == rgb + tir,
            "({r_v}, {r_t}): model adds {} over no adapters, formula {}",
            p.num_scalars() - frozen_only,
            rgb + tir
        );
        check!(
            cfg.ama.param_count(d, layers, Stream::Rgb) == rgb && cfg.ama.param_count(d, layers, Stream::Tir) == tir,
            "({r_v}, {r_t}): config count differs"
        );
        rows.push(format!("({r_v},{r_t}) {}", rgb + tir));
    }
    let mut bad = ModelConfig::toy();
    bad.ama = AmaConfig::with_ranks(16, 8);
    let e1 = bad.validate().err().map(|e| e.to_string()).unwrap_or_default();
    check!(e1.contains("r_v <= r_t"), "r_v > r_t accepted or unnamed: {e1:?}");
    let bad = ModelConfig {
        use_ama: false,
        ..ModelConfig::toy()
    };
    let e2 = bad.validate().err().map(|e| e.to_string()).unwrap_or_default();
    check!(e2.contains("use_lavs requires use_ama"), "LAVS without AMA: {e2:?}");
    check!(VgNet::new(bad).is_err(), "model built with LAVS and no AMA");
    let grid = ablation_settings(&ModelConfig::toy(), &[ModalityMode::Rgbt]);
    let labels: Vec<_> = grid.iter().map(|s| s.label).collect();
    check!(labels == ["Baseline", "+AMA", "+AMA+LAVS"], "RGBT ablation rows {labels:?}");
    check!(grid.iter().all(|s| s.config.validate().is_ok()), "an ablation row is invalid");
    Ok(format!("{}; r_v > r_t and LAVS without AMA rejected; 3 RGBT rows", rows.join(", ")))
}

fn a8_pipeline() -> Outcome {
    let dims = ok(ImageDims::new(100, 100))?;
    let size = |w, h| -> Result<SizeClass, String> { ok(classify_size(&ok(PixelBox::new(0.0, 0.0, w, h))?, dims)) };
    check!(size(10.0, 10.0)? == SizeClass::Normal, "ratio 0.01 must be NS");
    check!(size(10.0, 9.999)? == SizeClass::Small, "ratio just under 0.01 must be SS");
    let big = ok(ImageDims::new(640, 512))?;
    let at = ok(to_pixel(&ok(NormBox::new(0.5, 0.5, 0.1, 0.1))?, big))?;
    check!(ok(classify_size(&at, big))? == SizeClass::Normal, "640×512 box at ratio 0.01 must be NS");

    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    for kind in PromptKind::ALL {
        let want = ok(std::fs::read(golden.join(format!("{}.txt", kind.name()))))?;
        check!(kind.template().as_bytes() == want.as_slice(), "{kind} template differs from the golden file");
    }

    let mut accepted = 0;
    for s in 0..=13u8 {
        for w in 0..=4u8 {
            let ok_code = s <= 12 && w <= 3;
            let r = parse_response(PromptKind::SceneWeather, &format!("{s} {w}"));
            check!(r.is_ok() == ok_code, "scene/weather {s} {w}: {r:?}");
            accepted += usize::from(ok_code);
        }
    }
    for (kind, max) in [(PromptKind::Lighting, 3u8), (PromptKind::Occlusion, 2)] {
        for c in 0..=max + 1 {
            let r = parse_response(kind, &c.to_string());
            check!(r.is_ok() == (c <= max), "{kind} {c}: {r:?}");
            accepted += usize::from(c <= max);
        }
        for junk in ["", "x", "-1", "1 2", "1.0"] {
            check!(parse_response(kind, junk).is_err(), "{kind} accepted {junk:?}");
        }
    }
    for junk in ["7", "7 3 1", "7,3", "a b"] {
        check!(parse_response(PromptKind::SceneWeather, junk).is_err(), "scene/weather accepted {junk:?}");
    }

    let total: usize = LIGHT_WEATHER_COUNTS.iter().flatten().sum();
    check!(total == BENCHMARK_PAIRS, "published counts sum to {total}");
    let wl_fy = percent_of(2754, total);
    check!((wl_fy - 12.79).abs() <= 0.005, "2754/21535 = {wl_fy:.4}%");
    let mism = light_weather_mismatches();
    check!(
        mism.len() == 1 && (mism[0].0, mism[0].1) == (2, 2),
        "printed percentages not reproduced: {mism:?}"
    );
    Ok(format!(
        "size boundary exact; 4 golden prompts; {accepted} codes accepted; 15/16 table cells reproduce, \
         NL×SY prints {:.2} for {:.3}",
        mism[0].3, mism[0].2
    ))
}

fn a9_splits() -> Outcome {
    let spec = SyntheticCorpusSpec {
        num_records: 400,
        seed: 12,
        ..SyntheticCorpusSpec::default()
    };
    let records = (0..spec.num_records)
        .map(|i| generate_pair(&spec, i).map(|p| p.record))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let m = ok(DatasetManifest::new(records))?;
    let got = m.assign_eval_subsets();
    check!(got == brute_force_subsets(&m.records), "subsets differ from predicate filtering");
    let (a, b, c) = (&got["testA"], &got["testB"], &got["testC"]);
    check!(a.intersection(b).count() == 0, "testA ∩ testB non-empty");
    check!(a.intersection(c).count() == 0, "testA ∩ testC non-empty");

    let mut overlap = spec.clone();
    overlap.num_records = 8;
    overlap.weights.size = vec![0.0, 1.0];
    overlap.weights.illumination = vec![0.5, 0.5, 0.0, 0.0];
    overlap.weights.split = vec![0.0, 0.0, 1.0];
    let records = (0..overlap.num_records)
        .map(|i| generate_pair(&overlap, i).map(|p| p.record))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let built = ok(DatasetManifest::new(records))?.assign_eval_subsets();
    let both = built["testB"].intersection(&built["testC"]).count();
    check!(both == 8, "constructed corpus: testB ∩ testC has {both} of 8");
    Ok(format!(
        "test {}, A {}, B {}, C {}, B∩C {}; constructed B∩C = 8/8",
        got["test"].len(),
        a.len(),
        b.len(),
        c.len(),
        b.intersection(c).count()
    ))
}

struct RunArtifacts {
    manifest: Vec<u8>,
    weights: Vec<u8>,
    predictions: Vec<u8>,
    reports: Vec<Vec<u8>>,
}

fn end_to_end(root: &Path) -> Result<RunArtifacts, String> {
    let corpus = root.join("corpus");
    let spec = SyntheticCorpusSpec {
        num_records: 48,
        seed: 7,
        ..SyntheticCorpusSpec::default()
    };
    ok(generate_synthetic_corpus(&spec, &corpus))?;
    let manifest_path = corpus.join(MANIFEST_FILE);
    let manifest = ok(DatasetManifest::load(&manifest_path))?;
    let train_cfg = TrainConfig {
        max_steps: Some(50),
        seed: 7,
        ..TrainConfig::default()
    };
    let model_cfg = ModelConfig {
        seed: 7,
        ..ModelConfig::toy()
    };
    let out = ok(train(&model_cfg, &train_cfg, &manifest))?;
    let ckpt = root.join("ckpt");
    ok(save_checkpoint(&ckpt, &out.best, &train_cfg, Some(&out.log)))?;
    let (model, _) = ok(load_checkpoint(&ckpt))?;
    let e = ok(evaluate(&model, &manifest, "run"))?;
    let mut reports = Vec::new();
    for name in ["report.json", "report.md", "report.csv"] {
        let path = root.join(name);
        ok(write_report(&e.report, ok(ReportFormat::from_path(&path))?, &path))?;
        reports.push(ok(std::fs::read(&path))?);
    }
    let converted = ok(emit_report(&ok(read_report(&root.join("report.json")))?, ReportFormat::Csv))?;
    check!(converted.as_bytes() == reports[2].as_slice(), "JSON → CSV conversion differs from direct CSV");
    let pred_path = root.join("predictions.jsonl");
    ok(write_predictions(&pred_path, &e.predictions))?;
    Ok(RunArtifacts {
        manifest: ok(std::fs::read(&manifest_path))?,
        weights: ok(std::fs::read(ckpt.join(WEIGHTS_FILE)))?,
        predictions: ok(std::fs::read(&pred_path))?,
        reports,
    })
}

fn a10_determinism() -> Outcome {
    let (d1, d2) = (ok(tempfile::tempdir())?, ok(tempfile::tempdir())?);
    let a = end_to_end(d1.path())?;
    let b = end_to_end(d2.path())?;
    check!(a.manifest == b.manifest, "manifests differ");
    check!(a.weights == b.weights, "checkpoint weights differ");
    check!(a.predictions == b.predictions, "prediction dumps differ");
    for (i, name) in ["json", "md", "csv"].iter().enumerate() {
        check!(a.reports[i] == b.reports[i], "{name} reports differ");
    }
    Ok(format!(
        "manifest, weights, predictions and 3 reports byte-identical ({} report bytes)",
        a.reports.iter().map(Vec::len).sum::<usize>()
    ))
}
