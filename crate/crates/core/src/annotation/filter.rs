//! Detection-record filtering and instance selection.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Source, Split};
use crate::error::{Error, Result};
use crate::geometry::{ImageDims, PixelBox};

/// One image pair with every box of one category, as found in a
/// detection dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawDetectionRecord {
    pub rgb_path: String,
    pub tir_path: String,
    pub width: u32,
    pub height: u32,
    pub category: String,
    pub boxes: Vec<PixelBox>,
    /// Largest known RGB/TIR displacement in pixels, when measured.
    #[serde(default)]
    pub alignment_offset: Option<f64>,
    pub source: Source,
    pub split: Split,
}

impl RawDetectionRecord {
    pub fn dims(&self) -> Result<ImageDims> {
        ImageDims::new(self.width, self.height)
    }

    /// Instance id: image-pair stem plus category.
    pub fn instance_id(&self) -> String {
        let stem = Path::new(&self.rgb_path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.rgb_path.clone());
        format!("{stem}:{}", self.category)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub min_area_ratio: f64,
    pub min_side_px: f64,
    pub max_alignment_offset_px: f64,
    pub min_category_share: f64,
    pub excluded_categories: BTreeSet<String>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_area_ratio: 0.0005,
            min_side_px: 8.0,
            max_alignment_offset_px: 10.0,
            min_category_share: 0.01,
            excluded_categories: ["dog", "lamp"].into_iter().map(String::from).collect(),
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("filter.min_area_ratio", self.min_area_ratio),
            ("filter.min_side_px", self.min_side_px),
            ("filter.max_alignment_offset_px", self.max_alignment_offset_px),
            ("filter.min_category_share", self.min_category_share),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.min_area_ratio >= 1.0 || self.min_category_share >= 1.0 {
            return Err(Error::Config(
                "filter.min_area_ratio and filter.min_category_share must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// The rule that rejected a record. Each rejected record is charged to the
/// first rule it fails, in this order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectRule {
    ExcludedCategory,
    Visibility,
    Alignment,
    CategoryShare,
    Malformed,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub kept: Vec<RawDetectionRecord>,
    pub rejected: BTreeMap<RejectRule, usize>,
}

impl FilterOutcome {
    pub fn rejected_total(&self) -> usize {
        self.rejected.values().sum()
    }
}

/// Largest box by area; ties go to the smallest `y`, then smallest `x`.
pub fn select_largest_instance(boxes: &[PixelBox]) -> Result<PixelBox> {
    boxes
        .iter()
        .copied()
        .min_by(|a, b| {
            b.area()
                .total_cmp(&a.area())
                .then(a.y().total_cmp(&b.y()))
                .then(a.x().total_cmp(&b.x()))
        })
        .ok_or_else(|| Error::EmptyInput("record has no boxes".into()))
}

/// Applies the visibility, alignment, exclusion and category-balance
/// rules.
///
/// Category shares are measured over the records that pass the per-record
/// rules, which makes the filter idempotent: dropping whole categories can
/// only raise the share of the ones that remain.
pub fn filter_records(raw: &[RawDetectionRecord], cfg: &FilterConfig) -> FilterOutcome {
    let mut rejected: BTreeMap<RejectRule, usize> = BTreeMap::new();
    let mut survivors = Vec::new();
    for r in raw {
        match per_record_rule(r, cfg) {
            Some(rule) => *rejected.entry(rule).or_default() += 1,
            None => survivors.push(r),
        }
    }

    let mut per_category: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &survivors {
        *per_category.entry(r.category.as_str()).or_default() += 1;
    }
    let total = survivors.len();
    let mut kept = Vec::new();
    for r in survivors {
        let share = per_category[r.category.as_str()] as f64 / total as f64;
        if share >= cfg.min_category_share {
            kept.push(r.clone());
        } else {
            *rejected.entry(RejectRule::CategoryShare).or_default() += 1;
        }
    }
    FilterOutcome { kept, rejected }
}

fn per_record_rule(r: &RawDetectionRecord, cfg: &FilterConfig) -> Option<RejectRule> {
    if cfg.excluded_categories.contains(&r.category) {
        return Some(RejectRule::ExcludedCategory);
    }
    let (Ok(dims), Ok(largest)) = (r.dims(), select_largest_instance(&r.boxes)) else {
        return Some(RejectRule::Malformed);
    };
    if !largest.fits(dims) {
        return Some(RejectRule::Malformed);
    }
    let ratio = largest.area() / dims.area();
    if ratio < cfg.min_area_ratio || largest.w().min(largest.h()) < cfg.min_side_px {
        return Some(RejectRule::Visibility);
    }
    if let Some(offset) = r.alignment_offset {
        if !(offset <= cfg.max_alignment_offset_px) {
            return Some(RejectRule::Alignment);
        }
    }
    None
}
