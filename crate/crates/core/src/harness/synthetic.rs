//! Seeded generator of aligned RGB/thermal image pairs with exact boxes,
//! attribute tags and uniquely referring expressions.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::Image;
use crate::dataset::{
    classify_size, DatasetManifest, GroundingRecord, Illumination, OcclusionClass, OcclusionLevel, Provenance,
    SceneType, SizeClass, Source, Split, Weather, SMALL_OBJECT_RATIO,
};
use crate::error::{Error, Result};
use crate::geometry::{ImageDims, PixelBox};
use crate::params::named_rng;

pub const COLORS: [(&str, [f64; 3]); 9] = [
    ("red", [0.9, 0.1, 0.1]),
    ("green", [0.1, 0.8, 0.2]),
    ("blue", [0.15, 0.25, 0.95]),
    ("yellow", [0.95, 0.9, 0.1]),
    ("cyan", [0.1, 0.9, 0.9]),
    ("magenta", [0.9, 0.1, 0.9]),
    ("orange", [1.0, 0.55, 0.05]),
    ("purple", [0.5, 0.1, 0.7]),
    ("white", [0.97, 0.97, 0.97]),
];

pub const SHAPES: [&str; 4] = ["rectangle", "circle", "diamond", "triangle"];

pub const LANDMARKS: [&str; 6] = ["tree", "pole", "building", "sign", "wall", "house"];

pub const RELATIONS: [&str; 4] = ["left of", "right of", "above", "below"];

/// Sampling weights per attribute axis, in the axis' declaration order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributeWeights {
    pub scene: Vec<f64>,
    pub weather: Vec<f64>,
    pub illumination: Vec<f64>,
    pub size: Vec<f64>,
    pub occlusion: Vec<f64>,
    pub split: Vec<f64>,
}

impl Default for AttributeWeights {
    fn default() -> Self {
        Self {
            scene: vec![1.0 / SceneType::ALL.len() as f64; SceneType::ALL.len()],
            weather: vec![0.1, 0.15, 0.45, 0.3],
            illumination: vec![0.1, 0.2, 0.5, 0.2],
            size: vec![0.75, 0.25],
            occlusion: vec![0.8, 0.2],
            split: vec![0.7, 0.15, 0.15],
        }
    }
}

impl AttributeWeights {
    pub fn validate(&self) -> Result<()> {
        let axes: [(&str, &Vec<f64>, usize); 6] = [
            ("scene", &self.scene, SceneType::ALL.len()),
            ("weather", &self.weather, Weather::ALL.len()),
            ("illumination", &self.illumination, Illumination::ALL.len()),
            ("size", &self.size, SizeClass::ALL.len()),
            ("occlusion", &self.occlusion, OcclusionClass::ALL.len()),
            ("split", &self.split, Split::ALL.len()),
        ];
        for (name, w, n) in axes {
            if w.len() != n {
                return Err(Error::Config(format!("{name} weights need {n} entries, got {}", w.len())));
            }
            if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(Error::Config(format!("{name} weights must be finite and non-negative")));
            }
            let s: f64 = w.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("{name} weights sum to {s}, not 1")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticCorpusSpec {
    pub num_records: usize,
    /// Side of the square images in pixels.
    pub image_size: u32,
    pub weights: AttributeWeights,
    /// Other objects per image, each with a colour/shape pair different
    /// from the target's.
    pub distractors: usize,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            num_records: 64,
            image_size: 64,
            weights: AttributeWeights::default(),
            distractors: 2,
            seed: 0,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_records == 0 {
            return Err(Error::Config("num_records must be positive".into()));
        }
        if self.image_size < 48 {
            return Err(Error::Config("image_size must be at least 48".into()));
        }
        if self.distractors > 6 {
            return Err(Error::Config("at most 6 distractors fit the layout".into()));
        }
        self.weights.validate()
    }
}

/// Attribute tags of one record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DrawnAttributes {
    pub scene: SceneType,
    pub weather: Weather,
    pub illumination: Illumination,
    pub size: SizeClass,
    pub occlusion: OcclusionLevel,
    pub source: Source,
    pub split: Split,
}

fn pick(rng: &mut ChaCha8Rng, w: &[f64]) -> usize {
    WeightedIndex::new(w).expect("validated weights").sample(rng)
}

/// Attribute draw of record `index`; independent of every other record.
pub fn draw_attributes(spec: &SyntheticCorpusSpec, index: usize) -> DrawnAttributes {
    let mut rng = named_rng(spec.seed, &format!("synthetic.attr.{index}"));
    let w = &spec.weights;
    let scene = SceneType::ALL[pick(&mut rng, &w.scene)];
    let weather = Weather::ALL[pick(&mut rng, &w.weather)];
    let illumination = Illumination::ALL[pick(&mut rng, &w.illumination)];
    let size = SizeClass::ALL[pick(&mut rng, &w.size)];
    let occ_class = OcclusionClass::ALL[pick(&mut rng, &w.occlusion)];
    let raw = match occ_class {
        OcclusionClass::Heavy => 2,
        OcclusionClass::NoneOrPartial => rng.random_range(0..=1),
    };
    let source = Source::ALL[rng.random_range(0..Source::ALL.len())];
    let split = Split::ALL[pick(&mut rng, &w.split)];
    DrawnAttributes {
        scene,
        weather,
        illumination,
        size,
        occlusion: OcclusionLevel::new(raw).expect("level in range"),
        source,
        split,
    }
}

#[derive(Clone, Copy, Debug)]
struct Rect {
    x: i64,
    y: i64,
    w: i64,
    h: i64,
}

impl Rect {
    fn right(&self) -> i64 {
        self.x + self.w
    }
    fn bottom(&self) -> i64 {
        self.y + self.h
    }
    fn overlaps(&self, o: &Rect, gap: i64) -> bool {
        self.x < o.right() + gap && o.x < self.right() + gap && self.y < o.bottom() + gap && o.y < self.bottom() + gap
    }
    fn contains_center(&self, px: i64, py: i64) -> bool {
        px >= self.x && px < self.right() && py >= self.y && py < self.bottom()
    }
}

#[derive(Clone, Copy, Debug)]
struct Object {
    rect: Rect,
    shape: usize,
    color: [f64; 3],
    heat: f64,
}

impl Object {
    /// Whether the shape covers the pixel whose top-left corner is `(px, py)`.
    fn covers(&self, px: i64, py: i64) -> bool {
        let r = &self.rect;
        if !r.contains_center(px, py) {
            return false;
        }
        let (w, h) = (r.w as f64, r.h as f64);
        let u = (px - r.x) as f64 + 0.5;
        let v = (py - r.y) as f64 + 0.5;
        let (dx, dy) = ((u - w / 2.0).abs() / (w / 2.0), (v - h / 2.0).abs() / (h / 2.0));
        match SHAPES[self.shape] {
            "circle" => dx * dx + dy * dy <= 1.0,
            "diamond" => dx + dy <= 1.0,
            "triangle" => dx <= v / h,
            _ => true,
        }
    }
}

/// Image pair, record and expression of one generated instance.
pub struct GeneratedPair {
    pub record: GroundingRecord,
    pub rgb: RgbImage,
    pub tir: GrayImage,
}

fn scene_tint(scene: SceneType) -> [f64; 3] {
    let i = scene.index() as f64;
    let t = i / SceneType::ALL.len() as f64;
    [
        0.30 + 0.25 * (t * std::f64::consts::TAU).cos().abs(),
        0.35 + 0.20 * (t * 3.1).sin().abs(),
        0.30 + 0.25 * ((1.0 - t) * 4.7).sin().abs(),
    ]
}

fn light_gain(i: Illumination) -> f64 {
    match i {
        Illumination::VeryWeak => 0.12,
        Illumination::Weak => 0.3,
        Illumination::Normal => 0.75,
        Illumination::Strong => 1.0,
    }
}

fn draw_extent(rng: &mut ChaCha8Rng, size: SizeClass, s: i64) -> (i64, i64) {
    let area = (s * s) as f64;
    match size {
        SizeClass::Small => {
            let hi = ((SMALL_OBJECT_RATIO * area).sqrt().ceil() as i64 - 1).max(3);
            let lo = (hi / 2).max(2);
            loop {
                let (w, h) = (rng.random_range(lo..=hi), rng.random_range(lo..=hi));
                if ((w * h) as f64) < SMALL_OBJECT_RATIO * area {
                    return (w, h);
                }
            }
        }
        SizeClass::Normal => {
            let lo = ((2.0 * SMALL_OBJECT_RATIO * area).sqrt().ceil() as i64).max(4);
            let hi = (s * 2 / 5).max(lo);
            (rng.random_range(lo..=hi), rng.random_range(lo..=hi))
        }
    }
}

/// Builds one instance in memory.
pub fn generate_pair(spec: &SyntheticCorpusSpec, index: usize) -> Result<GeneratedPair> {
    let attrs = draw_attributes(spec, index);
    let mut rng = named_rng(spec.seed, &format!("synthetic.layout.{index}"));
    let s = i64::from(spec.image_size);
    let gap = 2;

    let (tw, th) = draw_extent(&mut rng, attrs.size, s);
    let target_rect = Rect {
        x: rng.random_range(0..=s - tw),
        y: rng.random_range(0..=s - th),
        w: tw,
        h: th,
    };
    let (lw, lh) = (rng.random_range(6..=10), rng.random_range(10..=16));
    let t = target_rect;
    // Landmark placements that realize each relation, when there is room.
    let options: Vec<(usize, Rect)> = RELATIONS
        .iter()
        .enumerate()
        .filter_map(|(k, rel)| {
            let (x_lo, x_hi, y_lo, y_hi) = match *rel {
                "left of" => (t.right() + gap, s - lw, 0, s - lh),
                "right of" => (0, t.x - gap - lw, 0, s - lh),
                "above" => (0, s - lw, t.bottom() + gap, s - lh),
                _ => (0, s - lw, 0, t.y - gap - lh),
            };
            (x_lo <= x_hi && y_lo <= y_hi).then(|| {
                let r = Rect {
                    x: rng.random_range(x_lo..=x_hi),
                    y: rng.random_range(y_lo..=y_hi),
                    w: lw,
                    h: lh,
                };
                (k, r)
            })
        })
        .collect();
    let (relation, landmark) = *options
        .get(rng.random_range(0..options.len().max(1)))
        .ok_or_else(|| Error::Numeric(format!("record {index}: no room for a landmark")))?;
    let landmark_name = LANDMARKS[rng.random_range(0..LANDMARKS.len())];

    let color = rng.random_range(0..COLORS.len());
    let shape = rng.random_range(0..SHAPES.len());
    let target = Object {
        rect: t,
        shape,
        color: COLORS[color].1,
        heat: rng.random_range(0.75..0.95),
    };

    let mut objects = Vec::new();
    for _ in 0..spec.distractors {
        for _attempt in 0..40 {
            let (dw, dh) = draw_extent(&mut rng, SizeClass::Normal, s);
            let r = Rect {
                x: rng.random_range(0..=s - dw),
                y: rng.random_range(0..=s - dh),
                w: dw,
                h: dh,
            };
            let (c, sh) = (rng.random_range(0..COLORS.len()), rng.random_range(0..SHAPES.len()));
            if (c, sh) == (color, shape) || r.overlaps(&t, gap) || r.overlaps(&landmark, 0) {
                continue;
            }
            objects.push(Object {
                rect: r,
                shape: sh,
                color: COLORS[c].1,
                heat: rng.random_range(0.35..0.8),
            });
            break;
        }
    }

    let occluder = match attrs.occlusion.raw() {
        0 => None,
        level => {
            let frac = if level == 2 { 0.45 } else { 0.2 };
            let ow = ((t.w as f64 * frac).ceil() as i64).max(1);
            Some(Rect {
                x: t.x + t.w - ow,
                y: t.y,
                w: ow,
                h: t.h,
            })
        }
    };

    let tint = scene_tint(attrs.scene);
    let gain = light_gain(attrs.illumination);
    let size = spec.image_size;
    let mut rgb = RgbImage::new(size, size);
    let mut tir = GrayImage::new(size, size);
    for py in 0..s {
        for px in 0..s {
            let noise: f64 = rng.random_range(-0.03..0.03);
            let mut c = tint.map(|v| v + noise + 0.1 * (py as f64 / s as f64));
            let mut heat = 0.08 + noise.abs();
            if landmark.contains_center(px, py) {
                c = [0.35, 0.3, 0.25];
                heat = 0.3;
            }
            for o in objects.iter().chain(std::iter::once(&target)) {
                if o.covers(px, py) {
                    c = o.color;
                    heat = o.heat;
                }
            }
            if occluder.is_some_and(|r| r.contains_center(px, py)) {
                c = [0.5, 0.5, 0.5];
                heat = 0.2;
            }
            match attrs.weather {
                Weather::Foggy => c = c.map(|v| 0.55 * v + 0.45 * 0.75),
                Weather::Rainy if (px + py * 3) % 11 == 0 => c = c.map(|v| 0.5 * v + 0.4),
                Weather::Sunny => c = c.map(|v| v * 1.1),
                Weather::Cloudy => c = c.map(|v| v * 0.85),
                Weather::Rainy => {}
            }
            let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            rgb.put_pixel(px as u32, py as u32, Rgb(c.map(|v| to_u8(v * gain))));
            tir.put_pixel(px as u32, py as u32, Luma([to_u8(heat)]));
        }
    }

    let id = format!("syn-{index:05}");
    let dims = ImageDims::new(size, size)?;
    let bbox = PixelBox::new(t.x as f64, t.y as f64, t.w as f64, t.h as f64)?;
    if classify_size(&bbox, dims)? != attrs.size {
        return Err(Error::Numeric(format!("record {id}: drawn size disagrees with classifier")));
    }
    let expression = format!(
        "the {} {} {} the {}",
        COLORS[color].0, SHAPES[shape], RELATIONS[relation], landmark_name
    );
    let record = GroundingRecord {
        rgb_path: format!("rgb/{id}.png"),
        tir_path: format!("tir/{id}.png"),
        id,
        dims,
        category: SHAPES[shape].to_string(),
        bbox,
        expression,
        scene: attrs.scene,
        weather: attrs.weather,
        illumination: attrs.illumination,
        occlusion: attrs.occlusion,
        size: attrs.size,
        source: attrs.source,
        split: attrs.split,
    };
    record.validate()?;
    Ok(GeneratedPair { record, rgb, tir })
}

/// The pair as encoder inputs, without a round trip through files.
pub fn pair_images(p: &GeneratedPair) -> Result<(Image, Image)> {
    let size = p.rgb.width() as usize;
    let rgb = Image::new(size, p.rgb.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect())?;
    let tir = Image::new(
        size,
        p.tir.as_raw().iter().flat_map(|&v| [f64::from(v) / 255.0; 3]).collect(),
    )?;
    Ok((rgb, tir))
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Writes `rgb/*.png`, `tir/*.png` and `manifest.jsonl` under `out_dir`.
pub fn generate_synthetic_corpus(spec: &SyntheticCorpusSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    for sub in ["rgb", "tir"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let records = (0..spec.num_records)
        .into_par_iter()
        .map(|i| {
            let p = generate_pair(spec, i)?;
            let save = |path: &Path, r: image::ImageResult<()>| {
                r.map_err(|e| Error::Image {
                    path: path.to_path_buf(),
                    reason: e.to_string(),
                })
            };
            let rgb_path = out_dir.join(&p.record.rgb_path);
            save(&rgb_path, p.rgb.save(&rgb_path))?;
            let tir_path = out_dir.join(&p.record.tir_path);
            save(&tir_path, p.tir.save(&tir_path))?;
            Ok(p.record)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut manifest = DatasetManifest::new(records)?;
    manifest.canonicalize();
    manifest.provenance = Provenance {
        generator: "gen-synthetic".into(),
        seed: Some(spec.seed),
        source_counts: manifest.source_counts(),
        generated_at: None,
    };
    manifest.base_dir = Some(out_dir.to_path_buf());
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
