//! Named invariant checks, each runnable on its own. The default suite is
//! the fast one; training-heavy checks run only when asked for by name.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use rand::Rng;

use super::oracles::*;
use super::synthetic::{
    draw_attributes, generate_pair, generate_synthetic_corpus, pair_images, SyntheticCorpusSpec,
};
use crate::ama::{adapt_weight, AmaConfig, LowRankAdapter, Stream};
use crate::annotation::{
    build_manifest, filter_records, select_largest_instance, BuildConfig, FilterConfig, PromptKind,
    RawDetectionRecord, StubClient,
};
use crate::backbone::{EncoderConfig, Projection, Role, TokenSequence};
use crate::dataset::{Axis, DatasetManifest, Illumination, SizeClass, Source, Split};
use crate::error::{Error, Result};
use crate::geometry::{acc_at_threshold, giou, iou, to_norm, to_pixel, ImageDims, NormBox, PixelBox};
use crate::lavs::{text_queried_enhance, EnhanceParams};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::named_rng;
use crate::tensor::Matrix;
use crate::train_eval::{
    dump_entry, hit_rate, predict_splits, report_from_predictions, train, Augmentation, ReportMeta, TrainConfig,
    TrainLog,
};
use crate::vgnet::{LossWeights, ModalityMode, ModelConfig, VgNet};

type CheckFn = fn() -> Result<String>;

/// Fast checks: `(name, routine)`.
pub const FAST_CHECKS: &[(&str, CheckFn)] = &[
    ("iou-raster", check_iou_raster),
    ("accuracy-examples", check_accuracy_examples),
    ("norm-roundtrip", check_norm_roundtrip),
    ("giou-example", check_giou_example),
    ("attribute-groups", check_attribute_groups),
    ("split-subsets", check_split_subsets),
    ("category-share", check_category_share),
    ("largest-instance", check_largest_instance),
    ("stub-retry", check_stub_retry),
    ("light-weather-table", check_light_weather_table),
    ("encoder-golden", check_encoder_golden),
    ("visual-tokens", check_visual_tokens),
    ("adapter-hand", check_adapter_hand),
    ("adapter-count", check_adapter_count),
    ("lavs-hand", check_lavs_hand),
    ("lavs-dense", check_lavs_dense),
    ("head-golden", check_head_golden),
    ("config-validation", check_config_validation),
    ("eval-bruteforce", check_eval_bruteforce),
    ("illumination-distribution", check_illumination_distribution),
    ("synthetic-small", check_synthetic_small),
    ("loss-descent", check_loss_descent),
];

/// Checks that train models; run by name only.
pub const SLOW_CHECKS: &[(&str, CheckFn)] = &[
    ("gradient-check", || check_gradients(Some(GRADCHECK_PER_TENSOR))),
    ("gradient-check-full", || check_gradients(None)),
    ("overfit-rgbt", || check_overfit(ModalityMode::Rgbt)),
    ("overfit-rgb", || check_overfit(ModalityMode::Rgb)),
    ("overfit-tir", || check_overfit(ModalityMode::Tir)),
];

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

/// Runs the fast suite, or the named checks from either suite.
pub fn run_checks(only: &[String]) -> Result<Vec<CheckOutcome>> {
    let all: Vec<&(&str, CheckFn)> = FAST_CHECKS.iter().chain(SLOW_CHECKS).collect();
    let selected: Vec<&(&str, CheckFn)> = if only.is_empty() {
        FAST_CHECKS.iter().collect()
    } else {
        only.iter()
            .map(|n| {
                all.iter()
                    .find(|(name, _)| name == n)
                    .copied()
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown check `{n}`")))
            })
            .collect::<Result<_>>()?
    };
    Ok(selected
        .into_iter()
        .map(|(name, f)| {
            let t = Instant::now();
            let (passed, detail) = match f() {
                Ok(d) => (true, d),
                Err(e) => (false, e.to_string()),
            };
            CheckOutcome {
                name,
                passed,
                detail,
                seconds: t.elapsed().as_secs_f64(),
            }
        })
        .collect())
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Numeric(msg()))
    }
}

fn pbox(x: f64, y: f64, w: f64, h: f64) -> PixelBox {
    PixelBox::new(x, y, w, h).expect("valid literal box")
}

fn check_iou_raster() -> Result<String> {
    let a = pbox(0.0, 0.0, 2.0, 2.0);
    let b = pbox(1.0, 1.0, 2.0, 2.0);
    let r = oracle_iou_rasterized(&a, &b, 100)?;
    ensure((r.iou - 1.0 / 7.0).abs() < 1e-3, || format!("raster IoU {} vs 1/7", r.iou))?;
    ensure((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12, || "analytic IoU is not 1/7".into())?;
    let mut rng = named_rng(11, "iou-raster");
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let scale = rng.random_range(1..=4);
        let (p, q) = (random_grid_box(&mut rng, 12, scale), random_grid_box(&mut rng, 12, scale));
        let r = oracle_iou_rasterized(&p, &q, scale)?;
        let err = (iou(&p, &q) - r.iou).abs();
        let tol = 2.0 / r.union_cells as f64;
        ensure(err <= tol, || format!("{p:?} vs {q:?}: |Δ| = {err} > {tol}"))?;
        worst = worst.max(err * r.union_cells as f64);
    }
    Ok(format!("1000 pairs, worst error {worst:.2e} union cells"))
}

fn check_accuracy_examples() -> Result<String> {
    let a = pbox(0.0, 0.0, 2.0, 2.0);
    let b = pbox(1.0, 1.0, 2.0, 2.0);
    ensure(acc_at_threshold(&[a], &[b], 0.5)? == 0.0, || "1/7 pair should miss".into())?;
    let gt = pbox(0.0, 0.0, 10.0, 10.0);
    let preds = [gt, pbox(0.0, 0.0, 6.0, 10.0), pbox(0.0, 0.0, 4.0, 10.0)];
    let ious: Vec<f64> = preds.iter().map(|p| corner_iou(corners(p), corners(&gt))).collect();
    ensure(
        ious.iter().zip([1.0, 0.6, 0.4]).all(|(x, w)| (x - w).abs() < 1e-12),
        || format!("constructed IoUs {ious:?}"),
    )?;
    let brute = ious.iter().filter(|&&x| x > 0.5).count() as f64 / 3.0;
    let acc = acc_at_threshold(&preds, &[gt; 3], 0.5)?;
    ensure(acc == brute && (acc - 2.0 / 3.0).abs() < 1e-15, || format!("accuracy {acc}"))?;
    Ok("1/7 → 0.0, {1.0, 0.6, 0.4} → 2/3".into())
}

fn corners(b: &PixelBox) -> [f64; 4] {
    [b.x(), b.y(), b.x() + b.w(), b.y() + b.h()]
}

fn check_norm_roundtrip() -> Result<String> {
    let dims = ImageDims::new(640, 512)?;
    let n = to_norm(&pbox(160.0, 128.0, 320.0, 256.0), dims)?;
    ensure(n.to_array() == [0.5; 4], || format!("{n:?}"))?;
    let mut rng = named_rng(5, "roundtrip");
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let x = rng.random_range(0.0..600.0);
        let y = rng.random_range(0.0..480.0);
        let b = pbox(x, y, rng.random_range(1.0..640.0 - x), rng.random_range(1.0..512.0 - y));
        let back = to_pixel(&to_norm(&b, dims)?, dims)?;
        for (u, v) in b.to_array().iter().zip(back.to_array()) {
            worst = worst.max((u - v).abs() / u.abs().max(1.0));
        }
    }
    ensure(worst < 1e-9, || format!("round-trip error {worst}"))?;
    Ok(format!("worst relative error {worst:.1e}"))
}

fn check_giou_example() -> Result<String> {
    let a = pbox(0.0, 0.0, 2.0, 2.0);
    let b = pbox(1.0, 1.0, 2.0, 2.0);
    let r = oracle_giou_rasterized(&a, &b, 20)?;
    let g = giou(&a, &b);
    ensure((g + 5.0 / 63.0).abs() < 1e-12 && (r - g).abs() < 1e-9, || format!("GIoU {g}, raster {r}"))?;
    Ok(format!("GIoU = {g:.6} = −5/63"))
}

fn synthetic_manifest(n: usize, seed: u64) -> Result<DatasetManifest> {
    let spec = SyntheticCorpusSpec {
        num_records: n,
        seed,
        ..SyntheticCorpusSpec::default()
    };
    let records = (0..n).map(|i| generate_pair(&spec, i).map(|p| p.record)).collect::<Result<Vec<_>>>()?;
    DatasetManifest::new(records)
}

fn check_attribute_groups() -> Result<String> {
    let m = synthetic_manifest(150, 4)?;
    for axis in Axis::ALL {
        let groups = m.group_by_attribute(axis);
        for (code, ids) in &groups {
            let brute: BTreeSet<String> = m
                .records
                .iter()
                .filter(|r| r.attribute(axis) == *code)
                .map(|r| r.id.clone())
                .collect();
            ensure(&brute == ids, || format!("{axis} {code}: group differs from filter"))?;
        }
        ensure(groups.values().map(BTreeSet::len).sum::<usize>() == m.len(), || {
            format!("{axis}: groups do not partition the corpus")
        })?;
    }
    Ok("5 axes over 150 records".into())
}

fn check_split_subsets() -> Result<String> {
    let m = synthetic_manifest(300, 8)?;
    let got = m.assign_eval_subsets();
    let want = brute_force_subsets(&m.records);
    ensure(got == want, || "subsets differ from the brute-force predicates".into())?;
    let (a, b, c) = (&got["testA"], &got["testB"], &got["testC"]);
    ensure(a.is_disjoint(b) && a.is_disjoint(c), || "testA overlaps testB or testC".into())?;
    Ok(format!(
        "test {}, testA {}, testB {}, testC {}, testB∩testC {}",
        got["test"].len(),
        a.len(),
        b.len(),
        c.len(),
        b.intersection(c).count()
    ))
}

fn raw_record(stem: &str, category: &str) -> RawDetectionRecord {
    RawDetectionRecord {
        rgb_path: format!("rgb/{stem}.png"),
        tir_path: format!("tir/{stem}.png"),
        width: 640,
        height: 512,
        category: category.into(),
        boxes: vec![pbox(10.0, 10.0, 100.0, 100.0)],
        alignment_offset: None,
        source: Source::RefFlir,
        split: Split::Train,
    }
}

fn check_category_share() -> Result<String> {
    let mut raw = Vec::new();
    for (cat, n) in [("car", 900), ("person", 95), ("bus", 5)] {
        raw.extend((0..n).map(|i| raw_record(&format!("{cat}{i}"), cat)));
    }
    let out = filter_records(&raw, &FilterConfig::default());
    let kept: BTreeSet<&str> = out.kept.iter().map(|r| r.category.as_str()).collect();
    let shares: Vec<(&str, f64)> = ["car", "person", "bus"]
        .iter()
        .map(|c| (*c, raw.iter().filter(|r| r.category == *c).count() as f64 / raw.len() as f64))
        .collect();
    let want: BTreeSet<&str> = shares.iter().filter(|(_, s)| *s >= 0.01).map(|(c, _)| *c).collect();
    ensure(kept == want && !kept.contains("bus"), || format!("kept {kept:?}"))?;
    Ok(format!("shares {shares:?}; bus dropped"))
}

fn check_largest_instance() -> Result<String> {
    let picked = select_largest_instance(&[pbox(5.0, 20.0, 10.0, 10.0), pbox(10.0, 10.0, 10.0, 10.0)])?;
    ensure(picked.to_array() == [10.0, 10.0, 10.0, 10.0], || format!("picked {picked:?}"))?;
    Ok("equal areas: y = 10 wins over y = 20".into())
}

fn check_stub_retry() -> Result<String> {
    let r = RawDetectionRecord {
        split: Split::Test,
        ..raw_record("0001", "car")
    };
    let id = r.instance_id();
    let mut stub = StubClient::new();
    stub.script(&id, PromptKind::SceneWeather, ["not a code", "7 3"])
        .script(&id, PromptKind::Lighting, ["2"])
        .script(&id, PromptKind::ObjectExpression, ["the car near the pole"])
        .script(&id, PromptKind::Occlusion, ["0"]);
    let (m, stats) = build_manifest(&[r], &BuildConfig::default(), &stub, None)?;
    ensure(m.len() == 1 && stats.retries == 1, || format!("kept {}, retries {}", m.len(), stats.retries))?;
    Ok("malformed then valid: kept, 1 retry".into())
}

fn check_light_weather_table() -> Result<String> {
    let total: usize = LIGHT_WEATHER_COUNTS.iter().flatten().sum();
    ensure(total == BENCHMARK_PAIRS, || format!("counts sum to {total}"))?;
    let wl_fy = crate::dataset::percent_of(LIGHT_WEATHER_COUNTS[1][0], total);
    ensure((wl_fy - 12.79).abs() < 0.005, || format!("2754/21535 = {wl_fy}"))?;
    let mism = light_weather_mismatches();
    ensure(mism.len() == 1 && (mism[0].0, mism[0].1) == (2, 2), || format!("mismatches {mism:?}"))?;
    Ok(format!(
        "15/16 cells reproduce; NL×SY recomputes to {:.2} (printed {:.2})",
        mism[0].2, mism[0].3
    ))
}

fn check_encoder_golden() -> Result<String> {
    let d = vision_layer_digest()?;
    ensure(d == VISION_LAYER_GOLDEN, || format!("digest {d}"))?;
    Ok(d[..16].to_string())
}

fn check_visual_tokens() -> Result<String> {
    let c = EncoderConfig::toy();
    let n = c.num_visual_tokens();
    ensure(n == visual_token_formula(64, 16) && n == 17, || format!("{n} tokens"))?;
    Ok("(64/16)² + 1 = 17".into())
}

fn check_adapter_hand() -> Result<String> {
    let a = Matrix::from_rows(&[vec![1.0], vec![0.0]])?;
    let b = Matrix::from_rows(&[vec![0.0, 2.0]])?;
    let ad = LowRankAdapter::new(a.clone(), b.clone(), 3.0, Projection::Query, 1)?;
    let w = Matrix::identity(2);
    let got = adapt_weight(&w, &ad)?;
    let want = Matrix::from_rows(&[vec![1.0, 6.0], vec![0.0, 1.0]])?;
    ensure(got == want && dense_adapted_weight(&w, &a, &b, 3.0) == want, || format!("{got:?}"))?;
    Ok("[[1, 6], [0, 1]]".into())
}

fn check_adapter_count() -> Result<String> {
    let cfg = AmaConfig::with_ranks(4, 8);
    let rgb = cfg.param_count(64, 2, Stream::Rgb);
    let tir = cfg.param_count(64, 2, Stream::Tir);
    ensure(
        rgb == 2048 && tir == 4096 && rgb == adapter_param_formula(64, 2, 2, 4) && tir == adapter_param_formula(64, 2, 2, 8),
        || format!("counts {rgb}, {tir}"),
    )?;
    let count = |rv, rt| -> Result<usize> {
        let mut c = ModelConfig::toy();
        c.ama = AmaConfig::with_ranks(rv, rt);
        Ok(VgNet::new(c)?.trainable_parameters().num_scalars())
    };
    let d = EncoderConfig::toy().dim;
    let diff = count(4, 8)? - count(4, 4)?;
    let want = adapter_param_formula(d, 2, 2, 8) - adapter_param_formula(d, 2, 2, 4);
    ensure(diff == want, || format!("difference {diff} vs formula {want}"))?;
    Ok(format!("2048 / 4096; model difference {diff}"))
}

fn check_lavs_hand() -> Result<String> {
    let f = Matrix::identity(2);
    let text = Matrix::from_rows(&[vec![0.0, 0.0]])?;
    let (q, k, v) = (Matrix::identity(2), Matrix::identity(2), Matrix::identity(2));
    let (got, a) = text_queried_enhance(
        &TokenSequence::new(f.clone(), Role::VisualRgb)?,
        &TokenSequence::new(text.clone(), Role::Text)?,
        &EnhanceParams {
            q: q.clone(),
            k: k.clone(),
            v: v.clone(),
        },
    )?;
    let (want, wa) = dense_enhance_oracle(&f, &text, &q, &k, &v);
    let hand = Matrix::from_rows(&[vec![1.25, 0.25], vec![0.25, 1.25]])?;
    ensure(
        got.data.max_abs_diff(&hand) < 1e-15 && want.max_abs_diff(&hand) < 1e-15 && a.0.max_abs_diff(&wa) < 1e-15,
        || format!("{:?}", got.data),
    )?;
    Ok("A = [0.5, 0.5]; F = f + [[0.25, 0.25], [0.25, 0.25]]".into())
}

fn check_lavs_dense() -> Result<String> {
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let mut rng = named_rng(seed, "lavs-dense");
        let (t, n, d, dt) = (rng.random_range(1..6), rng.random_range(1..9), rng.random_range(1..7), rng.random_range(1..7));
        let mut m = |r, c| Matrix::random_normal(r, c, 1.0, &mut rng);
        let (f, text, q, k, v) = (m(n, d), m(t, dt), m(dt, d), m(d, d), m(d, d));
        let (got, a) = text_queried_enhance(
            &TokenSequence::new(f.clone(), Role::VisualTir)?,
            &TokenSequence::new(text.clone(), Role::Text)?,
            &EnhanceParams {
                q: q.clone(),
                k: k.clone(),
                v: v.clone(),
            },
        )?;
        let (want, wa) = dense_enhance_oracle(&f, &text, &q, &k, &v);
        worst = worst.max(got.data.max_abs_diff(&want)).max(a.0.max_abs_diff(&wa));
    }
    ensure(worst < 1e-10, || format!("max deviation {worst}"))?;
    Ok(format!("20 random cases, max deviation {worst:.1e}"))
}

fn check_head_golden() -> Result<String> {
    let got = head_golden_output()?;
    ensure(got.iter().zip(HEAD_GOLDEN).all(|(g, w)| (g - w).abs() < 1e-12), || format!("{got:?}"))?;
    ensure(got.iter().all(|v| *v > 0.0 && *v < 1.0), || "head output outside (0, 1)".into())?;
    Ok(format!("{got:.6?}"))
}

fn check_config_validation() -> Result<String> {
    let mut c = ModelConfig::toy();
    c.ama = AmaConfig::with_ranks(16, 8);
    let e1 = c.validate().err().map(|e| e.to_string()).unwrap_or_default();
    let c = ModelConfig {
        use_ama: false,
        ..ModelConfig::toy()
    };
    let e2 = c.validate().err().map(|e| e.to_string()).unwrap_or_default();
    let c = ModelConfig {
        modality: ModalityMode::Rgb,
        ..ModelConfig::toy()
    };
    let e3 = c.validate().err().map(|e| e.to_string()).unwrap_or_default();
    ensure(
        e1.contains("r_v <= r_t") && e2.contains("use_lavs requires use_ama") && e3.contains("requires modality RGBT"),
        || format!("messages: {e1:?}, {e2:?}, {e3:?}"),
    )?;
    Ok("r_v > r_t, LAVS without AMA and LAVS outside RGBT rejected".into())
}

fn constant_center_dump(m: &DatasetManifest) -> Result<Vec<crate::train_eval::PredictionDump>> {
    let center = NormBox::new(0.5, 0.5, 0.3, 0.3)?;
    m.records
        .iter()
        .filter(|r| r.split != Split::Train)
        .map(|r| dump_entry(r, &center))
        .collect()
}

fn check_eval_bruteforce() -> Result<String> {
    let mut spec_m = synthetic_manifest(200, 21)?;
    spec_m.canonicalize();
    let dump = constant_center_dump(&spec_m)?;
    let meta = ReportMeta {
        label: "constant-center".into(),
        modality: ModalityMode::Rgbt,
        use_ama: false,
        use_lavs: false,
        r_v: 0,
        r_t: 0,
        seed: 0,
        trainable_params: 0,
        frozen_checksum: String::new(),
    };
    let report = report_from_predictions(&spec_m, &dump, meta)?;
    let brute = brute_force_cells(&spec_m.records, &dump);
    let mut compared = 0;
    for c in &report.splits {
        let (n, k) = brute[&("split".to_string(), c.key.clone())];
        ensure((n, k) == (c.count, c.correct), || format!("split {}: {n}/{k} vs {}/{}", c.key, c.count, c.correct))?;
        compared += 1;
    }
    for b in &report.breakdowns {
        let mut hits = 0;
        for c in &b.cells {
            let (n, k) = brute
                .get(&(b.axis.name().to_string(), c.key.clone()))
                .copied()
                .unwrap_or((0, 0));
            ensure((n, k) == (c.count, c.correct), || format!("{} {}: mismatch", b.axis, c.key))?;
            hits += c.correct;
            compared += 1;
        }
        let test = report.split("test").expect("test row");
        ensure(hits == test.correct, || format!("{} cells do not recompose the test split", b.axis))?;
    }
    Ok(format!("{compared} cells equal to the brute-force recount"))
}

fn check_illumination_distribution() -> Result<String> {
    let spec = SyntheticCorpusSpec::default();
    let n = 1000;
    let mut counts = [0usize; 4];
    for i in 0..n {
        counts[draw_attributes(&spec, i).illumination.index() as usize] += 1;
    }
    for (i, &c) in counts.iter().enumerate() {
        let (lo, hi) = binomial_band(n, spec.weights.illumination[i], 3.0);
        ensure((lo..=hi).contains(&(c as f64)), || {
            format!("{}: {c} outside [{lo:.1}, {hi:.1}]", Illumination::ALL[i].code())
        })?;
    }
    Ok(format!("counts {counts:?} within 3σ"))
}

fn check_synthetic_small() -> Result<String> {
    let mut spec = SyntheticCorpusSpec {
        num_records: 30,
        ..SyntheticCorpusSpec::default()
    };
    spec.weights.size = vec![0.0, 1.0];
    for i in 0..spec.num_records {
        let p = generate_pair(&spec, i)?;
        ensure(crate::dataset::classify_size(&p.record.bbox, p.record.dims)? == SizeClass::Small, || {
            format!("{} not small", p.record.id)
        })?;
    }
    Ok("30/30 classified SS".into())
}

/// Loss on one fixed sample before and after `steps` AdamW updates.
pub fn loss_descent(steps: usize, lr: f64) -> Result<(f64, f64)> {
    let pair = generate_pair(&SyntheticCorpusSpec::default(), 0)?;
    let (rgb, tir) = pair_images(&pair)?;
    let mut model = VgNet::new(ModelConfig::toy())?;
    let input = model.prepare(Some(&rgb), Some(&tir), &pair.record.expression)?;
    let gt = to_norm(&pair.record.bbox, pair.record.dims)?;
    let w = LossWeights::default();
    let first = model.loss(&input, &gt, w)?;
    let mut opt = AdamW::new(AdamWConfig::default(), model.trainable_parameters());
    for _ in 0..steps {
        let (_, grads) = model.loss_and_grads(&input, &gt, w)?;
        opt.step(model.trainable_parameters_mut(), &grads, lr);
    }
    Ok((first, model.loss(&input, &gt, w)?))
}

fn check_loss_descent() -> Result<String> {
    let (first, last) = loss_descent(200, 1e-3)?;
    ensure(last < 0.1 * first, || format!("loss {first:.4} → {last:.4}"))?;
    Ok(format!("loss {first:.4} → {last:.4} after 200 steps"))
}

/// Runs the finite-difference comparison on one synthetic sample of the
/// toy model, with every `B` factor randomized so that adapter gradients
/// are non-trivial.
pub fn gradient_check_toy(opts: GradCheckOptions) -> Result<GradCheckReport> {
    let pair = generate_pair(&SyntheticCorpusSpec::default(), 1)?;
    let (rgb, tir) = pair_images(&pair)?;
    let mut model = VgNet::new(ModelConfig::toy())?;
    let ids: Vec<_> = model
        .trainable_parameters()
        .iter()
        .filter(|(_, n, _)| n.starts_with("ama.") && n.ends_with(".b"))
        .map(|(id, n, m)| (id, n.to_string(), m.shape()))
        .collect();
    for (id, name, (r, c)) in ids {
        *model.trainable_parameters_mut().get_mut(id) = Matrix::random_normal(r, c, 0.05, &mut named_rng(opts.seed, &name));
    }
    let input = model.prepare(Some(&rgb), Some(&tir), &pair.record.expression)?;
    let gt = to_norm(&pair.record.bbox, pair.record.dims)?;
    gradient_check(&model, &input, &gt, LossWeights::default(), opts)
}

/// Entries per tensor in the sampled gradient check; the largest-gradient
/// entry of each tensor is always among them.
pub const GRADCHECK_PER_TENSOR: usize = 32;

fn check_gradients(per_tensor: Option<usize>) -> Result<String> {
    let report = gradient_check_toy(GradCheckOptions {
        per_tensor,
        ..GradCheckOptions::default()
    })?;
    let worst = report.worst().cloned();
    ensure(report.max_rel_error() < 1e-4, || format!("worst entry {worst:?}"))?;
    Ok(format!("{} entries, max relative error {:.2e}", report.entries.len(), report.max_rel_error()))
}

/// Train-set accuracy after overfitting a 16-record corpus.
pub fn overfit(mode: ModalityMode, dir: &Path, max_steps: usize) -> Result<(f64, TrainLog)> {
    let mut spec = SyntheticCorpusSpec {
        num_records: 16,
        seed: 3,
        ..SyntheticCorpusSpec::default()
    };
    spec.weights.split = vec![1.0, 0.0, 0.0];
    let manifest = generate_synthetic_corpus(&spec, dir)?;
    let mut cfg = ModelConfig::toy();
    cfg.modality = mode;
    cfg.lavs.enabled = mode == ModalityMode::Rgbt;
    let train_cfg = overfit_train_config(max_steps);
    let out = train(&cfg, &train_cfg, &manifest)?;
    let preds = predict_splits(&out.last, &manifest, &[Split::Train])?;
    Ok((hit_rate(&preds).unwrap_or(0.0), out.log))
}

pub fn overfit_train_config(max_steps: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        learning_rate: 2e-3,
        epochs: max_steps,
        max_steps: Some(max_steps),
        augment: Augmentation {
            flip: false,
            color_jitter: 0.0,
        },
        ..TrainConfig::default()
    }
}

fn check_overfit(mode: ModalityMode) -> Result<String> {
    let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
    let (acc, log) = overfit(mode, dir.path(), 500)?;
    ensure(acc * 16.0 >= 15.0 - 1e-9, || format!("{mode}: train Acc@0.5 {}/16", acc * 16.0))?;
    Ok(format!(
        "{mode}: {}/16 after {} steps (loss {:.4})",
        acc * 16.0,
        log.step_losses.len(),
        log.step_losses.last().copied().unwrap_or(f64::NAN)
    ))
}
