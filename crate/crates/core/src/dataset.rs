//! Benchmark instances, attribute vocabularies, manifests and evaluation
//! subsets.
//!
//! A manifest is line-delimited JSON, one [`GroundingRecord`] per line.
//! Attribute values are written as their two-letter codes. Provenance
//! metadata lives in a sidecar file next to the manifest
//! (`<stem>.meta.json`).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ImageDims, PixelBox};

/// Objects covering less than this fraction of the image are small.
pub const SMALL_OBJECT_RATIO: f64 = 0.01;

macro_rules! coded_enum {
    (
        $(#[$meta:meta])*
        $name:ident, $field:literal {
            $( $variant:ident = $num:literal, $code:literal, $label:literal; )+
        }
        $( aliases { $( $alias:literal => $target:ident ),+ } )?
    ) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name {
            $( $variant, )+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[ $( $name::$variant, )+ ];

            /// Integer code used in the annotation prompts.
            pub fn index(self) -> u8 {
                match self { $( $name::$variant => $num, )+ }
            }

            pub fn from_index(i: u8) -> Option<Self> {
                match i { $( $num => Some($name::$variant), )+ _ => None }
            }

            /// Two-letter code used in manifests and reports.
            pub fn code(self) -> &'static str {
                match self { $( $name::$variant => $code, )+ }
            }

            pub fn label(self) -> &'static str {
                match self { $( $name::$variant => $label, )+ }
            }

            pub fn from_code(code: &str) -> Result<Self> {
                match code {
                    $( $code => Ok($name::$variant), )+
                    $( $( $alias => Ok($name::$target), )+ )?
                    other => Err(Error::UnknownCode { field: $field, code: other.to_string() }),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.code())
            }
        }

        impl Serialize for $name {
            fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                s.serialize_str(self.code())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                $name::from_code(&s).map_err(serde::de::Error::custom)
            }
        }
    };
}

coded_enum! {
    /// Scene category. Integer codes follow the scene annotation prompt.
    SceneType, "scene" {
        Urban = 0, "UB", "Urban";
        Suburban = 1, "SU", "Suburban";
        Rural = 2, "RR", "Rural";
        Highway = 3, "HW", "Highway";
        Residential = 4, "RS", "Residential";
        Industrial = 5, "ID", "Industrial";
        ParkingLot = 6, "PL", "Parking Lot";
        Intersection = 7, "IT", "Intersection";
        Tunnel = 8, "TN", "Tunnel";
        Bridge = 9, "BG", "Bridge";
        Campus = 10, "CP", "Campus";
        Market = 11, "MK", "Market/Shopping Area";
        Waterfront = 12, "WF", "Waterfront";
    }
}

coded_enum! {
    Weather, "weather" {
        Foggy = 0, "FY", "Foggy";
        Rainy = 1, "RY", "Rainy";
        Sunny = 2, "SY", "Sunny";
        Cloudy = 3, "CY", "Cloudy";
    }
}

coded_enum! {
    /// Global lighting level. `VWL` is accepted as a spelling of `VL`.
    Illumination, "illumination" {
        VeryWeak = 0, "VL", "Very Weak Light";
        Weak = 1, "WL", "Weak Light";
        Normal = 2, "NL", "Normal Light";
        Strong = 3, "SL", "Strong Light";
    }
    aliases { "VWL" => VeryWeak }
}

coded_enum! {
    /// Binary occlusion grade derived from the raw 0–2 level.
    OcclusionClass, "occlusion" {
        NoneOrPartial = 0, "PO", "No-or-Partial";
        Heavy = 1, "HO", "Heavy";
    }
}

coded_enum! {
    SizeClass, "size" {
        Normal = 0, "NS", "Normal Size";
        Small = 1, "SS", "Small Size";
    }
}

coded_enum! {
    Source, "source" {
        RefFlir = 0, "RefFLIR", "FLIR";
        RefM3fd = 1, "RefM3FD", "M3FD";
        RefMfad = 2, "RefMFAD", "MFAD";
    }
}

coded_enum! {
    Split, "split" {
        Train = 0, "train", "train";
        Val = 1, "val", "val";
        Test = 2, "test", "test";
    }
}

/// Raw occlusion level 0 (none), 1 (partial) or 2 (heavy).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct OcclusionLevel(u8);

impl OcclusionLevel {
    pub fn new(raw: u8) -> Result<Self> {
        if raw > 2 {
            return Err(Error::UnknownCode {
                field: "occlusion_raw",
                code: raw.to_string(),
            });
        }
        Ok(Self(raw))
    }

    pub fn raw(self) -> u8 {
        self.0
    }

    pub fn binary(self) -> OcclusionClass {
        if self.0 == 2 {
            OcclusionClass::Heavy
        } else {
            OcclusionClass::NoneOrPartial
        }
    }
}

impl TryFrom<u8> for OcclusionLevel {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        Self::new(v)
    }
}

impl From<OcclusionLevel> for u8 {
    fn from(o: OcclusionLevel) -> u8 {
        o.0
    }
}

/// `SS` iff the box covers strictly less than 1% of the image.
pub fn classify_size(b: &PixelBox, dims: ImageDims) -> Result<SizeClass> {
    if dims.width == 0 || dims.height == 0 {
        return Err(Error::InvalidDims(format!("{}x{}", dims.width, dims.height)));
    }
    let ratio = b.area() / dims.area();
    Ok(if ratio < SMALL_OBJECT_RATIO {
        SizeClass::Small
    } else {
        SizeClass::Normal
    })
}

/// One benchmark instance: an aligned RGB/TIR pair, a referring expression
/// and the referred box, with its scene-, environment- and object-level
/// attributes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ManifestLine", into = "ManifestLine")]
pub struct GroundingRecord {
    pub id: String,
    pub rgb_path: String,
    pub tir_path: String,
    pub dims: ImageDims,
    pub category: String,
    pub bbox: PixelBox,
    pub expression: String,
    pub scene: SceneType,
    pub weather: Weather,
    pub illumination: Illumination,
    pub occlusion: OcclusionLevel,
    pub size: SizeClass,
    pub source: Source,
    pub split: Split,
}

/// On-disk field layout of a manifest line.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    id: String,
    rgb_path: String,
    tir_path: String,
    width: u32,
    height: u32,
    category: String,
    bbox: [f64; 4],
    expression: String,
    scene: SceneType,
    weather: Weather,
    illumination: Illumination,
    occlusion_raw: OcclusionLevel,
    size: SizeClass,
    source: Source,
    split: Split,
}

impl TryFrom<ManifestLine> for GroundingRecord {
    type Error = Error;
    fn try_from(l: ManifestLine) -> Result<Self> {
        let record_err = |reason: String| Error::Record {
            id: l.id.clone(),
            reason,
        };
        let dims = ImageDims::new(l.width, l.height).map_err(|e| record_err(e.to_string()))?;
        let bbox = PixelBox::try_from(l.bbox).map_err(|e| record_err(e.to_string()))?;
        let rec = GroundingRecord {
            id: l.id,
            rgb_path: l.rgb_path,
            tir_path: l.tir_path,
            dims,
            category: l.category,
            bbox,
            expression: l.expression,
            scene: l.scene,
            weather: l.weather,
            illumination: l.illumination,
            occlusion: l.occlusion_raw,
            size: l.size,
            source: l.source,
            split: l.split,
        };
        rec.validate()?;
        Ok(rec)
    }
}

impl From<GroundingRecord> for ManifestLine {
    fn from(r: GroundingRecord) -> Self {
        ManifestLine {
            id: r.id,
            rgb_path: r.rgb_path,
            tir_path: r.tir_path,
            width: r.dims.width,
            height: r.dims.height,
            category: r.category,
            bbox: r.bbox.to_array(),
            expression: r.expression,
            scene: r.scene,
            weather: r.weather,
            illumination: r.illumination,
            occlusion_raw: r.occlusion,
            size: r.size,
            source: r.source,
            split: r.split,
        }
    }
}

impl GroundingRecord {
    /// Checks the record invariants: nonempty expression, box inside the
    /// image, and a size tag that agrees with [`classify_size`].
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| {
            Err(Error::Record {
                id: self.id.clone(),
                reason,
            })
        };
        if self.id.is_empty() {
            return fail("empty id".into());
        }
        if self.expression.trim().is_empty() {
            return fail("empty expression".into());
        }
        if !self.bbox.fits(self.dims) {
            return fail(format!(
                "box {:?} exceeds {}x{} image",
                self.bbox.to_array(),
                self.dims.width,
                self.dims.height
            ));
        }
        let expected = classify_size(&self.bbox, self.dims)?;
        if expected != self.size {
            return fail(format!(
                "size tag {} disagrees with box area ratio (expected {})",
                self.size, expected
            ));
        }
        Ok(())
    }

    pub fn attribute(&self, axis: Axis) -> &'static str {
        match axis {
            Axis::Scene => self.scene.code(),
            Axis::Weather => self.weather.code(),
            Axis::Illumination => self.illumination.code(),
            Axis::Size => self.size.code(),
            Axis::Occlusion => self.occlusion.binary().code(),
        }
    }
}

/// Attribute axes usable for breakdowns and cross tabulation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Scene,
    Weather,
    Illumination,
    Size,
    Occlusion,
}

impl Axis {
    pub const ALL: [Axis; 5] = [
        Axis::Scene,
        Axis::Weather,
        Axis::Illumination,
        Axis::Size,
        Axis::Occlusion,
    ];

    /// Codes of every value on this axis, in table order.
    pub fn codes(self) -> Vec<&'static str> {
        match self {
            Axis::Scene => SceneType::ALL.iter().map(|v| v.code()).collect(),
            Axis::Weather => Weather::ALL.iter().map(|v| v.code()).collect(),
            Axis::Illumination => Illumination::ALL.iter().map(|v| v.code()).collect(),
            Axis::Size => SizeClass::ALL.iter().map(|v| v.code()).collect(),
            Axis::Occlusion => OcclusionClass::ALL.iter().map(|v| v.code()).collect(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::Scene => "scene",
            Axis::Weather => "weather",
            Axis::Illumination => "illumination",
            Axis::Size => "size",
            Axis::Occlusion => "occlusion",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::UnknownCode {
                field: "axis",
                code: s.into(),
            })
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub source_counts: BTreeMap<String, usize>,
    #[serde(default)]
    pub generated_at: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<GroundingRecord>,
    pub provenance: Provenance,
    /// Directory that relative image paths resolve against.
    pub base_dir: Option<PathBuf>,
}

pub const SUBSET_TEST: &str = "test";
pub const SUBSET_TEST_A: &str = "testA";
pub const SUBSET_TEST_B: &str = "testB";
pub const SUBSET_TEST_C: &str = "testC";

/// Normal-size targets under normal or strong light.
pub fn in_test_a(r: &GroundingRecord) -> bool {
    r.split == Split::Test
        && r.size == SizeClass::Normal
        && matches!(r.illumination, Illumination::Normal | Illumination::Strong)
}

/// Weak or very weak light.
pub fn in_test_b(r: &GroundingRecord) -> bool {
    r.split == Split::Test && matches!(r.illumination, Illumination::Weak | Illumination::VeryWeak)
}

/// Small targets.
pub fn in_test_c(r: &GroundingRecord) -> bool {
    r.split == Split::Test && r.size == SizeClass::Small
}

impl DatasetManifest {
    pub fn new(records: Vec<GroundingRecord>) -> Result<Self> {
        let m = Self {
            records,
            provenance: Provenance::default(),
            base_dir: None,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for r in &self.records {
            r.validate()?;
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Record {
                    id: r.id.clone(),
                    reason: "duplicate id".into(),
                });
            }
        }
        Ok(())
    }

    /// Sorts records by id.
    pub fn canonicalize(&mut self) {
        self.records.sort_by(|a, b| a.id.cmp(&b.id));
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &GroundingRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn get(&self, id: &str) -> Option<&GroundingRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn resolve(&self, path: &str) -> PathBuf {
        let p = Path::new(path);
        match &self.base_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.to_path_buf(),
        }
    }

    pub fn source_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.source.code().to_string()).or_insert(0) += 1;
        }
        counts
    }

    /// The `test` split and its `testA`/`testB`/`testC` subsets, as id sets.
    pub fn assign_eval_subsets(&self) -> BTreeMap<String, BTreeSet<String>> {
        let mut out: BTreeMap<String, BTreeSet<String>> = [
            SUBSET_TEST,
            SUBSET_TEST_A,
            SUBSET_TEST_B,
            SUBSET_TEST_C,
        ]
        .into_iter()
        .map(|k| (k.to_string(), BTreeSet::new()))
        .collect();
        for r in self.split(Split::Test) {
            out.get_mut(SUBSET_TEST).unwrap().insert(r.id.clone());
            if in_test_a(r) {
                out.get_mut(SUBSET_TEST_A).unwrap().insert(r.id.clone());
            }
            if in_test_b(r) {
                out.get_mut(SUBSET_TEST_B).unwrap().insert(r.id.clone());
            }
            if in_test_c(r) {
                out.get_mut(SUBSET_TEST_C).unwrap().insert(r.id.clone());
            }
        }
        out
    }

    /// Partition of the records by one attribute. Every value of the axis
    /// has an entry, possibly empty.
    pub fn group_by_attribute(&self, axis: Axis) -> BTreeMap<&'static str, BTreeSet<String>> {
        group_records(self.records.iter(), axis)
    }

    pub fn cross_tab(&self, rows: Axis, cols: Axis) -> Result<CrossTab> {
        CrossTab::build(&self.records, rows, cols)
    }

    /// Writes the manifest and its provenance sidecar. The manifest is
    /// written to a temporary file and renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
        tmp.write_all(&self.to_jsonl()?)
            .map_err(|e| Error::io(path, e))?;
        tmp.persist(path).map_err(|e| Error::io(path, e.error))?;

        let mut prov = self.provenance.clone();
        prov.source_counts = self.source_counts();
        let meta = meta_path(path);
        let mut text = serde_json::to_string_pretty(&prov)?;
        text.push('\n');
        std::fs::write(&meta, text).map_err(|e| Error::io(&meta, e))?;
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(reader: impl BufRead) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::ManifestParse {
                line: i + 1,
                reason: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: GroundingRecord =
                serde_json::from_str(&line).map_err(|e| Error::ManifestParse {
                    line: i + 1,
                    reason: e.to_string(),
                })?;
            records.push(rec);
        }
        Self::new(records)
    }

    /// Loads a manifest; relative image paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut m = Self::from_jsonl(BufReader::new(file))?;
        let meta = meta_path(path);
        if meta.exists() {
            let text = std::fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
            m.provenance = serde_json::from_str(&text)?;
        }
        m.base_dir = path.parent().map(Path::to_path_buf);
        Ok(m)
    }
}

/// `dir/manifest.jsonl` → `dir/manifest.meta.json`.
pub fn meta_path(manifest: &Path) -> PathBuf {
    let stem = manifest
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "manifest".into());
    manifest.with_file_name(format!("{stem}.meta.json"))
}

pub fn group_records<'a>(
    records: impl Iterator<Item = &'a GroundingRecord>,
    axis: Axis,
) -> BTreeMap<&'static str, BTreeSet<String>> {
    let mut groups: BTreeMap<&'static str, BTreeSet<String>> =
        axis.codes().into_iter().map(|c| (c, BTreeSet::new())).collect();
    for r in records {
        groups
            .get_mut(r.attribute(axis))
            .expect("every attribute code is pre-seeded")
            .insert(r.id.clone());
    }
    groups
}

/// Percentage of `count` in `total`.
pub fn percent_of(count: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    100.0 * count as f64 / total as f64
}

/// Two-way count table over two distinct axes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossTab {
    pub row_axis: Axis,
    pub col_axis: Axis,
    pub row_codes: Vec<String>,
    pub col_codes: Vec<String>,
    pub counts: Vec<Vec<usize>>,
    pub total: usize,
}

impl CrossTab {
    pub fn build(records: &[GroundingRecord], rows: Axis, cols: Axis) -> Result<Self> {
        if rows == cols {
            return Err(Error::InvalidArgument(format!(
                "cross tabulation needs two distinct axes, got {rows} twice"
            )));
        }
        let row_codes: Vec<String> = rows.codes().into_iter().map(String::from).collect();
        let col_codes: Vec<String> = cols.codes().into_iter().map(String::from).collect();
        let mut counts = vec![vec![0usize; col_codes.len()]; row_codes.len()];
        for r in records {
            let i = row_codes.iter().position(|c| c == r.attribute(rows)).unwrap();
            let j = col_codes.iter().position(|c| c == r.attribute(cols)).unwrap();
            counts[i][j] += 1;
        }
        Ok(Self {
            row_axis: rows,
            col_axis: cols,
            row_codes,
            col_codes,
            counts,
            total: records.len(),
        })
    }

    /// Table built from published counts, for checking reported
    /// percentages.
    pub fn from_counts(
        row_axis: Axis,
        col_axis: Axis,
        counts: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let row_codes: Vec<String> = row_axis.codes().into_iter().map(String::from).collect();
        let col_codes: Vec<String> = col_axis.codes().into_iter().map(String::from).collect();
        if counts.len() != row_codes.len() || counts.iter().any(|r| r.len() != col_codes.len()) {
            return Err(Error::Shape("count table does not match the axes".into()));
        }
        let total = counts.iter().flatten().sum();
        Ok(Self {
            row_axis,
            col_axis,
            row_codes,
            col_codes,
            counts,
            total,
        })
    }

    pub fn percentages(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| row.iter().map(|&c| percent_of(c, self.total)).collect())
            .collect()
    }

    pub fn row_totals(&self) -> Vec<usize> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_totals(&self) -> Vec<usize> {
        (0..self.col_codes.len())
            .map(|j| self.counts.iter().map(|r| r[j]).sum())
            .collect()
    }

    pub fn count(&self, row: &str, col: &str) -> Option<usize> {
        let i = self.row_codes.iter().position(|c| c == row)?;
        let j = self.col_codes.iter().position(|c| c == col)?;
        Some(self.counts[i][j])
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn record(id: &str, size: SizeClass, illum: Illumination, split: Split) -> GroundingRecord {
        let dims = ImageDims::new(100, 100).unwrap();
        let bbox = match size {
            SizeClass::Normal => PixelBox::new(10.0, 10.0, 20.0, 20.0).unwrap(),
            SizeClass::Small => PixelBox::new(10.0, 10.0, 5.0, 5.0).unwrap(),
        };
        GroundingRecord {
            id: id.into(),
            rgb_path: format!("{id}_rgb.png"),
            tir_path: format!("{id}_tir.png"),
            dims,
            category: "car".into(),
            bbox,
            expression: "the car".into(),
            scene: SceneType::Urban,
            weather: Weather::Cloudy,
            illumination: illum,
            occlusion: OcclusionLevel::new(0).unwrap(),
            size,
            source: Source::RefFlir,
            split,
        }
    }

    #[test]
    fn scene_codes_follow_prompt_order() {
        assert_eq!(SceneType::from_index(0), Some(SceneType::Urban));
        assert_eq!(SceneType::from_index(7).unwrap().code(), "IT");
        assert_eq!(SceneType::from_index(12).unwrap().code(), "WF");
        assert_eq!(SceneType::from_index(13), None);
        assert_eq!(SceneType::ALL.len(), 13);
        let codes: BTreeSet<_> = SceneType::ALL.iter().map(|s| s.code()).collect();
        assert_eq!(codes.len(), 13);
        assert_eq!(Weather::from_index(3), Some(Weather::Cloudy));
        assert_eq!(Illumination::from_index(2), Some(Illumination::Normal));
    }

    #[test]
    fn very_weak_light_accepts_both_spellings() {
        assert_eq!(Illumination::from_code("VWL").unwrap(), Illumination::VeryWeak);
        assert_eq!(Illumination::from_code("VL").unwrap(), Illumination::VeryWeak);
        assert_eq!(Illumination::VeryWeak.code(), "VL");
        assert!(Illumination::from_code("XL").is_err());
    }

    #[test]
    fn occlusion_binary_mapping() {
        assert_eq!(OcclusionLevel::new(0).unwrap().binary(), OcclusionClass::NoneOrPartial);
        assert_eq!(OcclusionLevel::new(1).unwrap().binary(), OcclusionClass::NoneOrPartial);
        assert_eq!(OcclusionLevel::new(2).unwrap().binary(), OcclusionClass::Heavy);
        assert!(OcclusionLevel::new(3).is_err());
    }

    #[test]
    fn size_boundary() {
        let dims = ImageDims::new(100, 100).unwrap();
        // 9 x 10 = 90 px of 10 000 → 0.009
        let small = PixelBox::new(0., 0., 9., 10.).unwrap();
        assert_eq!(classify_size(&small, dims).unwrap(), SizeClass::Small);
        // 10 x 10 = exactly 1%
        let edge = PixelBox::new(0., 0., 10., 10.).unwrap();
        assert_eq!(classify_size(&edge, dims).unwrap(), SizeClass::Normal);
        let full = PixelBox::new(0., 0., 100., 100.).unwrap();
        assert_eq!(classify_size(&full, dims).unwrap(), SizeClass::Normal);
        let zero = ImageDims { width: 0, height: 10 };
        assert!(classify_size(&edge, zero).is_err());
    }

    #[test]
    fn subset_examples() {
        let m = DatasetManifest::new(vec![
            record("a", SizeClass::Normal, Illumination::Normal, Split::Test),
            record("b", SizeClass::Small, Illumination::Weak, Split::Test),
            record("c", SizeClass::Normal, Illumination::Normal, Split::Train),
        ])
        .unwrap();
        let s = m.assign_eval_subsets();
        let ids = |k: &str| s[k].iter().cloned().collect::<Vec<_>>();
        assert_eq!(ids("test"), ["a", "b"]);
        assert_eq!(ids("testA"), ["a"]);
        assert_eq!(ids("testB"), ["b"]);
        assert_eq!(ids("testC"), ["b"]);
    }

    #[test]
    fn weather_grouping_includes_empty_groups() {
        let weathers = [Weather::Foggy, Weather::Foggy, Weather::Sunny, Weather::Cloudy];
        let records = weathers
            .iter()
            .enumerate()
            .map(|(i, w)| GroundingRecord {
                weather: *w,
                ..record(&format!("r{i}"), SizeClass::Normal, Illumination::Normal, Split::Test)
            })
            .collect();
        let m = DatasetManifest::new(records).unwrap();
        let g = m.group_by_attribute(Axis::Weather);
        let sizes: Vec<(&str, usize)> = g.iter().map(|(k, v)| (*k, v.len())).collect();
        assert_eq!(sizes, [("CY", 1), ("FY", 2), ("RY", 0), ("SY", 1)]);
        let union: BTreeSet<String> = g.values().flatten().cloned().collect();
        assert_eq!(union.len(), 4);
    }

    #[test]
    fn cross_tab_single_record() {
        let r = GroundingRecord {
            weather: Weather::Cloudy,
            ..record("x", SizeClass::Normal, Illumination::Weak, Split::Val)
        };
        let t = CrossTab::build(&[r], Axis::Illumination, Axis::Weather).unwrap();
        assert_eq!(t.count("WL", "CY"), Some(1));
        assert_eq!(t.percentages()[1][3], 100.0);
        assert_eq!(t.counts.iter().flatten().sum::<usize>(), 1);
        assert!(CrossTab::build(&[], Axis::Size, Axis::Size).is_err());
    }

    #[test]
    fn loader_rejects_inconsistent_size_and_duplicates() {
        let mut r = record("x", SizeClass::Normal, Illumination::Weak, Split::Val);
        r.size = SizeClass::Small;
        assert!(DatasetManifest::new(vec![r]).is_err());
        let a = record("x", SizeClass::Normal, Illumination::Weak, Split::Val);
        assert!(DatasetManifest::new(vec![a.clone(), a]).is_err());
    }

    #[test]
    fn manifest_line_field_names() {
        let r = record("x", SizeClass::Small, Illumination::VeryWeak, Split::Test);
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        let mut want = vec![
            "id", "rgb_path", "tir_path", "width", "height", "category", "bbox", "expression",
            "scene", "weather", "illumination", "occlusion_raw", "size", "source", "split",
        ];
        want.sort_unstable();
        let mut keys_sorted = keys.clone();
        keys_sorted.sort_unstable();
        assert_eq!(keys_sorted, want);
        assert_eq!(v["illumination"], "VL");
        assert_eq!(v["bbox"], serde_json::json!([10.0, 10.0, 5.0, 5.0]));
        let line = serde_json::to_string(&r).unwrap().replace("\"VL\"", "\"VWL\"");
        let back: GroundingRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back, r);
    }
}
