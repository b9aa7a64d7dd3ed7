//! Independent reference computations: brute-force loops and counts that
//! share no code with the routines they check.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::backbone::{build_toy_encoder, EncoderConfig, FrozenEncoder, Image, Role};
use crate::dataset::GroundingRecord;
use crate::error::{Error, Result};
use crate::geometry::{NormBox, PixelBox};
use crate::params::named_rng;
use crate::tensor::Matrix;
use crate::train_eval::PredictionDump;
use crate::vgnet::{LossWeights, PreparedInput, VgNet};

/// Cell counts behind a rasterized IoU.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RasterIou {
    pub iou: f64,
    pub inter_cells: u64,
    pub union_cells: u64,
}

/// IoU by counting the `1/grid_scale`-sized cells whose centres fall in
/// each box.
pub fn oracle_iou_rasterized(a: &PixelBox, b: &PixelBox, grid_scale: u32) -> Result<RasterIou> {
    if grid_scale == 0 {
        return Err(Error::InvalidArgument("grid_scale must be at least 1".into()));
    }
    let s = f64::from(grid_scale);
    let inside = |p: &PixelBox, cx: f64, cy: f64| cx >= p.x() && cx < p.x() + p.w() && cy >= p.y() && cy < p.y() + p.h();
    let x0 = (a.x().min(b.x()) * s).floor() as i64;
    let y0 = (a.y().min(b.y()) * s).floor() as i64;
    let x1 = ((a.x() + a.w()).max(b.x() + b.w()) * s).ceil() as i64;
    let y1 = ((a.y() + a.h()).max(b.y() + b.h()) * s).ceil() as i64;
    let (mut inter, mut union) = (0u64, 0u64);
    for j in y0..y1 {
        let cy = (j as f64 + 0.5) / s;
        for i in x0..x1 {
            let cx = (i as f64 + 0.5) / s;
            let (ia, ib) = (inside(a, cx, cy), inside(b, cx, cy));
            inter += u64::from(ia && ib);
            union += u64::from(ia || ib);
        }
    }
    Ok(RasterIou {
        iou: if union == 0 { 0.0 } else { inter as f64 / union as f64 },
        inter_cells: inter,
        union_cells: union,
    })
}

/// GIoU from rasterized areas: `IoU − (enclosing − union)/enclosing`.
pub fn oracle_giou_rasterized(a: &PixelBox, b: &PixelBox, grid_scale: u32) -> Result<f64> {
    let r = oracle_iou_rasterized(a, b, grid_scale)?;
    let ex = (a.x() + a.w()).max(b.x() + b.w()) - a.x().min(b.x());
    let ey = (a.y() + a.h()).max(b.y() + b.h()) - a.y().min(b.y());
    let enclosing = (ex * ey * f64::from(grid_scale).powi(2)).round();
    Ok(r.iou - (enclosing - r.union_cells as f64) / enclosing)
}

/// Random grid-aligned box with coordinates in `[0, extent)`.
pub fn random_grid_box(rng: &mut impl Rng, extent: u32, grid_scale: u32) -> PixelBox {
    let cells = i64::from(extent * grid_scale);
    let s = f64::from(grid_scale);
    let x = rng.random_range(0..cells - 1);
    let y = rng.random_range(0..cells - 1);
    let w = rng.random_range(1..=cells - x);
    let h = rng.random_range(1..=cells - y);
    PixelBox::new(x as f64 / s, y as f64 / s, w as f64 / s, h as f64 / s).expect("positive extent")
}

/// Textbook triple loop.
pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.rows());
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a[(i, k)] * b[(k, j)];
            }
            out[(i, j)] = s;
        }
    }
    out
}

fn naive_transpose(a: &Matrix) -> Matrix {
    let mut t = Matrix::zeros(a.cols(), a.rows());
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            t[(j, i)] = a[(i, j)];
        }
    }
    t
}

/// Step-by-step dense form of the text-queried enhancement. Returns the
/// enhanced tokens and the `[T × N]` attention.
pub fn dense_enhance_oracle(f: &Matrix, text: &Matrix, q: &Matrix, k: &Matrix, v: &Matrix) -> (Matrix, Matrix) {
    let d = f.cols();
    let qs = naive_matmul(text, q);
    let keys = naive_matmul(f, k);
    let values = naive_matmul(f, v);
    let (t, n) = (text.rows(), f.rows());
    let mut a = Matrix::zeros(t, n);
    for i in 0..t {
        let logits: Vec<f64> = (0..n)
            .map(|j| (0..d).map(|c| qs[(i, c)] * keys[(j, c)]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for j in 0..n {
            a[(i, j)] = (logits[j] - m).exp() / z;
        }
    }
    let av = naive_matmul(&a, &values);
    let back = naive_matmul(&naive_transpose(&a), &av);
    let mut out = f.clone();
    for i in 0..n {
        for c in 0..d {
            out[(i, c)] += back[(i, c)];
        }
    }
    (out, a)
}

/// `alpha · A·B` added to `W`, by loops.
pub fn dense_adapted_weight(w: &Matrix, a: &Matrix, b: &Matrix, alpha: f64) -> Matrix {
    let ab = naive_matmul(a, b);
    let mut out = w.clone();
    for i in 0..w.rows() {
        for j in 0..w.cols() {
            out[(i, j)] += alpha * ab[(i, j)];
        }
    }
    out
}

/// Adapter scalars of one stream: `2·d·r` per adapted layer and target.
pub fn adapter_param_formula(d: usize, layers: usize, targets: usize, rank: usize) -> usize {
    layers * targets * 2 * d * rank
}

/// Visual tokens of a ViT-style tower with a class token.
pub fn visual_token_formula(image_size: usize, patch: usize) -> usize {
    (image_size / patch) * (image_size / patch) + 1
}

/// Subset membership by direct comparison of the attribute codes.
pub fn brute_force_subsets(records: &[GroundingRecord]) -> BTreeMap<String, BTreeSet<String>> {
    let mut out: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for key in ["test", "testA", "testB", "testC"] {
        out.insert(key.into(), BTreeSet::new());
    }
    for r in records {
        if r.split.code() != "test" {
            continue;
        }
        let size = r.size.code();
        let light = r.illumination.code();
        out.get_mut("test").unwrap().insert(r.id.clone());
        if size == "NS" && (light == "NL" || light == "SL") {
            out.get_mut("testA").unwrap().insert(r.id.clone());
        }
        if light == "WL" || light == "VL" {
            out.get_mut("testB").unwrap().insert(r.id.clone());
        }
        if size == "SS" {
            out.get_mut("testC").unwrap().insert(r.id.clone());
        }
    }
    out
}

/// Intersection-over-union from corner arrays, written out longhand.
pub fn corner_iou(p: [f64; 4], g: [f64; 4]) -> f64 {
    let iw = (p[2].min(g[2]) - p[0].max(g[0])).max(0.0);
    let ih = (p[3].min(g[3]) - p[1].max(g[1])).max(0.0);
    let inter = iw * ih;
    let union = (p[2] - p[0]) * (p[3] - p[1]) + (g[2] - g[0]) * (g[3] - g[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// `(count, correct)` over `ids`, recomputing every IoU from the dumped
/// corners.
pub fn brute_force_accuracy(dump: &[PredictionDump], ids: &BTreeSet<String>) -> (usize, usize) {
    let mut count = 0;
    let mut correct = 0;
    for p in dump {
        if ids.contains(&p.id) {
            count += 1;
            if corner_iou(p.pred_bbox, p.gt_bbox) > 0.5 {
                correct += 1;
            }
        }
    }
    (count, correct)
}

/// `(section, key) → (count, correct)` for every split and test-split
/// attribute cell, from the records and the dump alone.
pub fn brute_force_cells(
    records: &[GroundingRecord],
    dump: &[PredictionDump],
) -> BTreeMap<(String, String), (usize, usize)> {
    let mut out = BTreeMap::new();
    let val: BTreeSet<String> = records
        .iter()
        .filter(|r| r.split.code() == "val")
        .map(|r| r.id.clone())
        .collect();
    out.insert(("split".into(), "val".into()), brute_force_accuracy(dump, &val));
    for (k, ids) in brute_force_subsets(records) {
        out.insert(("split".into(), k), brute_force_accuracy(dump, &ids));
    }
    let test: Vec<&GroundingRecord> = records.iter().filter(|r| r.split.code() == "test").collect();
    let axes: [(&str, fn(&GroundingRecord) -> String); 5] = [
        ("scene", |r| r.scene.code().into()),
        ("weather", |r| r.weather.code().into()),
        ("illumination", |r| r.illumination.code().into()),
        ("size", |r| r.size.code().into()),
        ("occlusion", |r| if r.occlusion.raw() == 2 { "HO".into() } else { "PO".into() }),
    ];
    for (axis, attr) in axes {
        let mut cells: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for r in &test {
            cells.entry(attr(r)).or_default().insert(r.id.clone());
        }
        for (code, ids) in cells {
            out.insert((axis.into(), code), brute_force_accuracy(dump, &ids));
        }
    }
    out
}

/// Parameter group of a trainable tensor, for reporting.
pub fn param_group(name: &str) -> &'static str {
    let groups: [(&str, &str); 10] = [
        ("ama.", "AMA adapters"),
        ("lavs.syn.", "LAVS synergy"),
        ("lavs.", "LAVS enhancement"),
        ("proj.text.", "text projection"),
        ("proj.rgb.", "RGB projection"),
        ("proj.tir.", "TIR projection"),
        ("vl.pos.", "VL positions"),
        ("vl.", "VL transformer"),
        ("reg", "regression token"),
        ("head.", "head"),
    ];
    groups
        .iter()
        .find(|(p, _)| name.starts_with(p))
        .map(|(_, g)| *g)
        .unwrap_or("other")
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    /// Worst relative error per parameter group.
    pub fn by_group(&self) -> BTreeMap<&'static str, (usize, f64)> {
        let mut out: BTreeMap<&'static str, (usize, f64)> = BTreeMap::new();
        for e in &self.entries {
            let g = out.entry(param_group(&e.name)).or_default();
            g.0 += 1;
            g.1 = g.1.max(e.rel_error);
        }
        out
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Base step of the central difference.
    pub step: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Entries checked per tensor; every entry when `None`.
    pub per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            floor: 1e-6,
            per_tensor: None,
            seed: 0,
        }
    }
}

/// Compares analytic gradients with Richardson-extrapolated central
/// differences, `(4·D(h/2) − D(h))/3`, which cancels the `h²` term.
pub fn gradient_check(
    model: &VgNet,
    input: &PreparedInput,
    gt: &NormBox,
    weights: LossWeights,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let (_, grads) = model.loss_and_grads(input, gt, weights)?;
    let params = model.trainable_parameters();
    let mut targets = Vec::new();
    for (id, g) in &grads {
        let name = params.name(*id).to_string();
        let n = g.len();
        let picks: Vec<usize> = match opts.per_tensor {
            Some(k) if k < n => {
                let mut rng = named_rng(opts.seed, &format!("gradcheck.{name}"));
                let mut idx: BTreeSet<usize> = BTreeSet::new();
                let argmax = (0..n)
                    .max_by(|&a, &b| g.data()[a].abs().total_cmp(&g.data()[b].abs()))
                    .unwrap_or(0);
                idx.insert(argmax);
                while idx.len() < k {
                    idx.insert(rng.random_range(0..n));
                }
                idx.into_iter().collect()
            }
            _ => (0..n).collect(),
        };
        for i in picks {
            targets.push((*id, name.clone(), i, g.data()[i]));
        }
    }
    let entries = targets
        .par_iter()
        .map_init(
            || model.clone(),
            |m, (id, name, i, analytic)| -> Result<GradCheckEntry> {
                let orig = m.trainable_parameters().get(*id).data()[*i];
                let at = |m: &mut VgNet, x: f64| -> Result<f64> {
                    m.trainable_parameters_mut().get_mut(*id).data_mut()[*i] = x;
                    m.loss(input, gt, weights)
                };
                let h = opts.step;
                let d1 = (at(m, orig + h)? - at(m, orig - h)?) / (2.0 * h);
                let d2 = (at(m, orig + h / 2.0)? - at(m, orig - h / 2.0)?) / h;
                m.trainable_parameters_mut().get_mut(*id).data_mut()[*i] = orig;
                let numeric = (4.0 * d2 - d1) / 3.0;
                let denom = analytic.abs().max(numeric.abs()).max(opts.floor);
                Ok(GradCheckEntry {
                    name: name.clone(),
                    index: *i,
                    analytic: *analytic,
                    numeric,
                    rel_error: (analytic - numeric).abs() / denom,
                })
            },
        )
        .collect::<Result<Vec<_>>>()?;
    Ok(GradCheckReport { entries })
}

/// Test image of the frozen-tower golden digest.
pub fn golden_test_image(seed: u64) -> Image {
    Image::from_fn(64, |x, y, c| ((x * 7 + y * 13 + c * 5 + seed as usize) % 17) as f64 / 16.0)
}

/// SHA-256 of the first toy vision block on the golden image.
pub fn vision_layer_digest() -> Result<String> {
    let enc = build_toy_encoder(&EncoderConfig::toy())?;
    let x = enc.embed(&golden_test_image(3), Role::VisualRgb)?;
    let y = enc.vision_layer(1, &x, &[])?;
    Ok(hex::encode(Sha256::digest(y.data.to_le_bytes())))
}

pub const VISION_LAYER_GOLDEN: &str = "5b87a09f945019f11ce53e2ce125236a8cb4f4f5e9aa6fa6c827526d7496d634";

/// Head output of the seed-0 toy model on the token `[0.1·sin(i)]`.
pub fn head_golden_output() -> Result<[f64; 4]> {
    let m = VgNet::new(crate::vgnet::ModelConfig::toy())?;
    let d = m.config().ground_dim();
    let token = Matrix::from_vec(1, d, (0..d).map(|i| 0.1 * (i as f64).sin()).collect())?;
    Ok(m.regression_head(&token)?.to_array())
}

pub const HEAD_GOLDEN: [f64; 4] = [0.48668430044512334, 0.5147568439959173, 0.5137181052286541, 0.5058261747490048];

/// Published lighting × weather counts of the benchmark statistics
/// table, rows VL, WL, NL, SL and columns FY, RY, SY, CY.
pub const LIGHT_WEATHER_COUNTS: [[usize; 4]; 4] = [
    [71, 29, 0, 101],
    [2754, 1298, 14, 4704],
    [521, 150, 2191, 6157],
    [4, 0, 3152, 389],
];

/// Percentages printed next to those counts.
pub const LIGHT_WEATHER_PRINTED: [[f64; 4]; 4] = [
    [0.33, 0.13, 0.00, 0.47],
    [12.79, 6.03, 0.07, 21.84],
    [2.42, 0.70, 10.19, 28.59],
    [0.02, 0.00, 14.64, 1.81],
];

/// Image pairs in the benchmark.
pub const BENCHMARK_PAIRS: usize = 21_535;

/// Cells whose printed percentage differs from the count by more than
/// rounding: `(row, col, recomputed, printed)`.
pub fn light_weather_mismatches() -> Vec<(usize, usize, f64, f64)> {
    let total: usize = LIGHT_WEATHER_COUNTS.iter().flatten().sum();
    let mut out = Vec::new();
    for (i, row) in LIGHT_WEATHER_COUNTS.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            let pct = 100.0 * c as f64 / total as f64;
            let printed = LIGHT_WEATHER_PRINTED[i][j];
            if (pct - printed).abs() > 0.005 + 1e-9 {
                out.push((i, j, pct, printed));
            }
        }
    }
    out
}

/// Binomial `k·σ` band for `n` draws at probability `p`.
pub fn binomial_band(n: usize, p: f64, k: f64) -> (f64, f64) {
    let mean = n as f64 * p;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    (mean - k * sd, mean + k * sd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::iou;

    #[test]
    fn raster_converges_on_the_hand_example() {
        let a = PixelBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
        let b = PixelBox::new(1.0, 1.0, 2.0, 2.0).unwrap();
        let r = oracle_iou_rasterized(&a, &b, 100).unwrap();
        assert!((r.iou - 1.0 / 7.0).abs() < 1e-3);
        assert_eq!(oracle_iou_rasterized(&a, &a, 3).unwrap().iou, 1.0);
        assert!((oracle_giou_rasterized(&a, &b, 10).unwrap() + 5.0 / 63.0).abs() < 1e-3);
        assert!(oracle_iou_rasterized(&a, &b, 0).is_err());
        assert!((iou(&a, &b) - r.iou).abs() < 1e-12);
    }

    #[test]
    fn only_the_known_cell_disagrees() {
        let m = light_weather_mismatches();
        assert_eq!(m.len(), 1);
        assert_eq!((m[0].0, m[0].1), (2, 2));
        let total: usize = LIGHT_WEATHER_COUNTS.iter().flatten().sum();
        assert_eq!(total, BENCHMARK_PAIRS);
    }

    #[test]
    fn vision_digest_matches_pin() {
        assert_eq!(vision_layer_digest().unwrap(), VISION_LAYER_GOLDEN);
    }

    #[test]
    fn head_golden_is_pinned() {
        let got = head_golden_output().unwrap();
        for (g, w) in got.iter().zip(HEAD_GOLDEN) {
            assert!((g - w).abs() < 1e-12, "{got:?}");
        }
    }
}
