//! Filter, annotate and assemble raw detection records into a manifest.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::client::{image_for, AnnotationClient, AnnotationRequest};
use super::filter::{filter_records, select_largest_instance, FilterConfig, RawDetectionRecord, RejectRule};
use super::prompts::{parse_response, render_prompt, Annotation, PromptBindings, PromptKind};
use crate::dataset::{classify_size, DatasetManifest, GroundingRecord, Provenance};
use crate::error::{Error, Result};

/// File inside a raw corpus directory listing its detection records.
pub const RAW_RECORDS_FILE: &str = "records.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildConfig {
    pub filter: FilterConfig,
    /// Extra attempts per prompt after a failed call or parse.
    pub max_retries: usize,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            filter: FilterConfig::default(),
            max_retries: 2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildStats {
    pub raw_records: usize,
    pub rejected: BTreeMap<RejectRule, usize>,
    pub annotated: usize,
    pub retries: usize,
    pub dropped: usize,
    /// Dropped instance id → reason of the last failure.
    pub failures: BTreeMap<String, String>,
}

/// Reads `records.jsonl` from a raw corpus directory. Image paths in the
/// records are relative to that directory.
pub fn load_raw_corpus(dir: &Path) -> Result<Vec<RawDetectionRecord>> {
    let path = dir.join(RAW_RECORDS_FILE);
    let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::ManifestParse {
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

struct Annotated {
    record: Option<GroundingRecord>,
    retries: usize,
    failure: Option<String>,
}

/// Runs filtering, instance selection, the four prompts, response parsing
/// and local size classification. Instances are annotated in parallel;
/// the result is sorted by id. Nothing is written to disk.
///
/// `image_root` is the directory raw image paths resolve against.
pub fn build_manifest(
    raw: &[RawDetectionRecord],
    cfg: &BuildConfig,
    client: &dyn AnnotationClient,
    image_root: Option<&Path>,
) -> Result<(DatasetManifest, BuildStats)> {
    cfg.filter.validate()?;
    let filtered = filter_records(raw, &cfg.filter);
    let results: Vec<(String, Annotated)> = filtered
        .kept
        .par_iter()
        .map(|r| (r.instance_id(), annotate_one(r, cfg, client, image_root)))
        .collect();

    let mut stats = BuildStats {
        raw_records: raw.len(),
        rejected: filtered.rejected,
        ..BuildStats::default()
    };
    let mut records = Vec::new();
    for (id, a) in results {
        stats.retries += a.retries;
        match a.record {
            Some(rec) => records.push(rec),
            None => {
                stats.dropped += 1;
                stats
                    .failures
                    .insert(id, a.failure.unwrap_or_else(|| "unknown".into()));
            }
        }
    }
    stats.annotated = records.len();
    let mut manifest = DatasetManifest::new(records)?;
    manifest.canonicalize();
    manifest.provenance = Provenance {
        generator: "build-dataset".into(),
        seed: None,
        source_counts: manifest.source_counts(),
        generated_at: None,
    };
    Ok((manifest, stats))
}

fn annotate_one(
    r: &RawDetectionRecord,
    cfg: &BuildConfig,
    client: &dyn AnnotationClient,
    image_root: Option<&Path>,
) -> Annotated {
    let id = r.instance_id();
    let mut retries = 0;
    let fail = |retries, reason: String| Annotated {
        record: None,
        retries,
        failure: Some(reason),
    };
    let (bbox, dims) = match (select_largest_instance(&r.boxes), r.dims()) {
        (Ok(b), Ok(d)) => (b, d),
        (Err(e), _) | (_, Err(e)) => return fail(0, e.to_string()),
    };
    let image = image_for(image_root, &r.rgb_path);
    let bindings = PromptBindings::object(r.category.clone(), bbox);

    let mut answers = Vec::with_capacity(PromptKind::ALL.len());
    for kind in PromptKind::ALL {
        let prompt = match render_prompt(kind, &bindings) {
            Ok(p) => p,
            Err(e) => return fail(retries, e.to_string()),
        };
        let req = AnnotationRequest {
            instance_id: &id,
            kind,
            image: &image,
            prompt: &prompt,
        };
        let mut last_err = String::new();
        let mut parsed = None;
        for attempt in 0..=cfg.max_retries {
            if attempt > 0 {
                retries += 1;
            }
            match client.send(&req).and_then(|raw| parse_response(kind, &raw)) {
                Ok(a) => {
                    parsed = Some(a);
                    break;
                }
                Err(e) => {
                    log::debug!("{id}: {kind} attempt {} failed: {e}", attempt + 1);
                    last_err = e.to_string();
                }
            }
        }
        match parsed {
            Some(a) => answers.push(a),
            None => {
                log::warn!("{id}: dropping instance after {kind} failed: {last_err}");
                return fail(retries, format!("{kind}: {last_err}"));
            }
        }
    }

    let (mut scene, mut weather, mut illumination, mut occlusion, mut expression) =
        (None, None, None, None, None);
    for a in answers {
        match a {
            Annotation::SceneWeather(s, w) => {
                scene = Some(s);
                weather = Some(w);
            }
            Annotation::Lighting(l) => illumination = Some(l),
            Annotation::Occlusion(o) => occlusion = Some(o),
            Annotation::Expression(e) => expression = Some(e),
        }
    }
    let size = match classify_size(&bbox, dims) {
        Ok(s) => s,
        Err(e) => return fail(retries, e.to_string()),
    };
    let record = GroundingRecord {
        id: id.clone(),
        rgb_path: r.rgb_path.clone(),
        tir_path: r.tir_path.clone(),
        dims,
        category: r.category.clone(),
        bbox,
        expression: expression.expect("expression prompt answered"),
        scene: scene.expect("scene prompt answered"),
        weather: weather.expect("scene prompt answered"),
        illumination: illumination.expect("lighting prompt answered"),
        occlusion: occlusion.expect("occlusion prompt answered"),
        size,
        source: r.source,
        split: r.split,
    };
    if let Err(e) = record.validate() {
        return fail(retries, e.to_string());
    }
    Annotated {
        record: Some(record),
        retries,
        failure: None,
    }
}

/// Draws up to `per_stratum` records from every (source, category) stratum
/// for manual review. Deterministic for a given seed; ids are returned
/// sorted.
pub fn stratified_sample(manifest: &DatasetManifest, per_stratum: usize, seed: u64) -> Vec<String> {
    let mut strata: BTreeMap<(String, String), Vec<&str>> = BTreeMap::new();
    for r in &manifest.records {
        strata
            .entry((r.source.code().to_string(), r.category.clone()))
            .or_default()
            .push(&r.id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (_, mut ids) in strata {
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        out.extend(ids.into_iter().take(per_stratum).map(String::from));
    }
    out.sort();
    out
}

/// Writes the sampled records as manifest lines to `path`.
pub fn export_review_sample(
    manifest: &DatasetManifest,
    per_stratum: usize,
    seed: u64,
    path: &Path,
) -> Result<usize> {
    let ids = stratified_sample(manifest, per_stratum, seed);
    let records: Vec<GroundingRecord> = ids
        .iter()
        .filter_map(|id| manifest.get(id).cloned())
        .collect();
    let sample = DatasetManifest::new(records)?;
    std::fs::write(path, sample.to_jsonl()?).map_err(|e| Error::io(path, e))?;
    Ok(ids.len())
}

/// Rewrites raw image paths so they resolve from `manifest_dir`.
pub fn rebase_paths(raw: &mut [RawDetectionRecord], raw_dir: &Path, manifest_dir: &Path) {
    let rebase = |p: &str| -> String {
        let full: PathBuf = raw_dir.join(p);
        match full.strip_prefix(manifest_dir) {
            Ok(rel) => rel.to_string_lossy().into_owned(),
            Err(_) => std::path::absolute(&full)
                .unwrap_or(full)
                .to_string_lossy()
                .into_owned(),
        }
    };
    for r in raw {
        r.rgb_path = rebase(&r.rgb_path);
        r.tir_path = rebase(&r.tir_path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::client::StubClient;
    use crate::dataset::{Illumination, SceneType, SizeClass, Source, Split, Weather};
    use crate::geometry::PixelBox;

    fn raw(stem: &str, category: &str, b: (f64, f64, f64, f64)) -> RawDetectionRecord {
        RawDetectionRecord {
            rgb_path: format!("rgb/{stem}.png"),
            tir_path: format!("tir/{stem}.png"),
            width: 640,
            height: 512,
            category: category.into(),
            boxes: vec![PixelBox::new(b.0, b.1, b.2, b.3).unwrap()],
            alignment_offset: None,
            source: Source::RefM3fd,
            split: Split::Test,
        }
    }

    fn full_script(stub: &mut StubClient, id: &str) {
        stub.script(id, PromptKind::SceneWeather, ["7 3"])
            .script(id, PromptKind::Lighting, ["1"])
            .script(id, PromptKind::ObjectExpression, ["the car near the crossing"])
            .script(id, PromptKind::Occlusion, ["2"]);
    }

    #[test]
    fn empty_corpus_gives_empty_manifest() {
        let (m, stats) =
            build_manifest(&[], &BuildConfig::default(), &StubClient::new(), None).unwrap();
        assert!(m.is_empty());
        assert_eq!(stats, BuildStats::default());
    }

    #[test]
    fn canned_responses_fill_every_field() {
        let r = raw("0001", "car", (100., 100., 50., 40.));
        let mut stub = StubClient::new();
        full_script(&mut stub, &r.instance_id());
        let (m, stats) = build_manifest(&[r], &BuildConfig::default(), &stub, None).unwrap();
        assert_eq!(m.len(), 1);
        let rec = &m.records[0];
        assert_eq!(rec.id, "0001:car");
        assert_eq!(rec.scene, SceneType::Intersection);
        assert_eq!(rec.weather, Weather::Cloudy);
        assert_eq!(rec.illumination, Illumination::Weak);
        assert_eq!(rec.occlusion.raw(), 2);
        assert_eq!(rec.expression, "the car near the crossing");
        assert_eq!(rec.size, SizeClass::Small);
        assert_eq!(stats.annotated, 1);
        assert_eq!(stats.retries, 0);
    }

    #[test]
    fn malformed_then_valid_counts_one_retry() {
        let r = raw("0002", "person", (10., 10., 200., 300.));
        let id = r.instance_id();
        let mut stub = StubClient::new();
        full_script(&mut stub, &id);
        stub.script(&id, PromptKind::Lighting, ["bright", "3"]);
        let (m, stats) = build_manifest(&[r], &BuildConfig::default(), &stub, None).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.records[0].illumination, Illumination::Strong);
        assert_eq!(m.records[0].size, SizeClass::Normal);
        assert_eq!(stats.retries, 1);
        assert_eq!(stub.calls(&id, PromptKind::Lighting), 2);
    }

    #[test]
    fn persistent_failure_drops_instance() {
        let good = raw("0003", "car", (10., 10., 100., 100.));
        let bad = raw("0004", "car", (10., 10., 100., 100.));
        let mut stub = StubClient::new();
        full_script(&mut stub, &good.instance_id());
        full_script(&mut stub, &bad.instance_id());
        stub.script(bad.instance_id(), PromptKind::Occlusion, ["5"]);
        let (m, stats) =
            build_manifest(&[good, bad.clone()], &BuildConfig::default(), &stub, None).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(stats.dropped, 1);
        assert_eq!(stats.retries, 2);
        assert_eq!(stub.calls(&bad.instance_id(), PromptKind::Occlusion), 3);
        assert!(stats.failures.contains_key("0004:car"));
    }

    #[test]
    fn output_is_sorted_regardless_of_input_order() {
        let a = raw("b", "car", (10., 10., 100., 100.));
        let b = raw("a", "car", (10., 10., 100., 100.));
        let mut stub = StubClient::new();
        full_script(&mut stub, &a.instance_id());
        full_script(&mut stub, &b.instance_id());
        let (m, _) = build_manifest(&[a, b], &BuildConfig::default(), &stub, None).unwrap();
        let ids: Vec<_> = m.records.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["a:car", "b:car"]);
    }

    #[test]
    fn stratified_sample_is_deterministic_and_bounded() {
        let mut stub = StubClient::new();
        let mut corpus = Vec::new();
        for i in 0..12 {
            let r = raw(&format!("{i:04}"), if i % 3 == 0 { "person" } else { "car" }, (0., 0., 100., 100.));
            full_script(&mut stub, &r.instance_id());
            corpus.push(r);
        }
        let (m, _) = build_manifest(&corpus, &BuildConfig::default(), &stub, None).unwrap();
        let s1 = stratified_sample(&m, 2, 9);
        assert_eq!(s1, stratified_sample(&m, 2, 9));
        assert_eq!(s1.len(), 4);
    }
}
