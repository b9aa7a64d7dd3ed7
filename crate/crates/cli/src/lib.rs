//! Command-line front end: dataset building, synthetic corpora, training,
//! evaluation, ablations, report conversion and the self-check suite.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use rgbtvg_core::annotation::{build_manifest, load_raw_corpus, rebase_paths, AnnotationClient, HttpClient, StubClient};
use rgbtvg_core::dataset::DatasetManifest;
use rgbtvg_core::harness::selfcheck::{FAST_CHECKS, SLOW_CHECKS};
use rgbtvg_core::harness::synthetic::MANIFEST_FILE;
use rgbtvg_core::harness::{generate_synthetic_corpus, run_checks, RunConfig, SyntheticCorpusSpec};
use rgbtvg_core::train_eval::{
    emit_ablation, emit_report, evaluate, load_checkpoint, read_report, run_ablation, save_checkpoint, train,
    write_predictions, write_report, ReportFormat,
};
use rgbtvg_core::vgnet::ModalityMode;

#[derive(Parser, Debug)]
#[command(name = "rgbtvg", version, about = "RGB-thermal referring-expression grounding")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Filter a raw detection corpus and annotate it into a manifest.
    BuildDataset(BuildDatasetArgs),
    /// Write a synthetic paired RGB/TIR corpus and its manifest.
    GenSynthetic(GenSyntheticArgs),
    /// Train a model and save the best checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Train and evaluate the modality × module grid.
    Ablate(AblateArgs),
    /// Convert a JSON report to another format.
    Report(ReportArgs),
    /// Run the invariant checks.
    Selfcheck(SelfcheckArgs),
}

#[derive(Args, Debug)]
struct BuildDatasetArgs {
    /// Raw corpus directory holding records.jsonl and the images.
    #[arg(long)]
    raw: PathBuf,
    /// Run config; only the [filter] and [annotation] sections are used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Canned responses instead of the HTTP service.
    #[arg(long)]
    stub: Option<PathBuf>,
    /// Also write build statistics as JSON.
    #[arg(long)]
    stats: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenSyntheticArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    num_records: usize,
    #[arg(long, default_value_t = 64)]
    image_size: u32,
    #[arg(long, default_value_t = 2)]
    distractors: usize,
    /// Train/val/test weights, comma separated.
    #[arg(long, value_delimiter = ',')]
    split_weights: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides `train.max_steps`.
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Output path; the extension (.md, .csv, .json) picks the format.
    #[arg(long)]
    report: PathBuf,
    /// Prediction dump (JSON lines).
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long, default_value = "eval")]
    label: String,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Ablation spec (TOML); relative paths resolve against its directory.
    #[arg(long)]
    spec: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// md, csv or json.
    #[arg(long)]
    format: String,
    /// Defaults to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SelfcheckArgs {
    /// Run only these checks; slow checks are available by name.
    #[arg(long = "only", value_delimiter = ',')]
    only: Vec<String>,
    /// Run the fast suite and then every slow check.
    #[arg(long, conflicts_with = "only")]
    all: bool,
    /// Print the check names and exit.
    #[arg(long)]
    list: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AblationSpec {
    base_config: PathBuf,
    manifest: PathBuf,
    out_dir: PathBuf,
    #[serde(default = "all_modes")]
    modality_modes: Vec<ModalityMode>,
    /// Summary file names written into `out_dir`.
    #[serde(default = "default_summaries")]
    summaries: Vec<String>,
}

fn all_modes() -> Vec<ModalityMode> {
    ModalityMode::ALL.to_vec()
}

fn default_summaries() -> Vec<String> {
    vec!["ablation.md".into(), "ablation.json".into()]
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code: 0 on success, 1 on a failed command or check, 2 on
/// a usage error.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            for cause in e.chain().skip(1) {
                eprintln!("  caused by: {cause}");
            }
            1
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::BuildDataset(a) => build_dataset(a),
        Command::GenSynthetic(a) => gen_synthetic(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate(a),
        Command::Report(a) => report(a),
        Command::Selfcheck(a) => selfcheck(a),
    }
}

fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    DatasetManifest::load(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("loading run config {}", path.display()))
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn build_dataset(a: BuildDatasetArgs) -> Result<i32> {
    let cfg = match &a.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    let mut raw = load_raw_corpus(&a.raw).with_context(|| format!("reading raw corpus {}", a.raw.display()))?;
    let out_dir = parent_dir(&a.out);
    std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let out_dir = std::path::absolute(&out_dir)?;
    rebase_paths(&mut raw, &std::path::absolute(&a.raw)?, &out_dir);
    let client: Box<dyn AnnotationClient> = match &a.stub {
        Some(p) => Box::new(StubClient::from_file(p).with_context(|| format!("loading fixtures {}", p.display()))?),
        None => Box::new(HttpClient::from_env().context("configuring the annotation service")?),
    };
    let (manifest, stats) = build_manifest(&raw, &cfg.build_config(), client.as_ref(), Some(&out_dir))?;
    manifest.save(&a.out)?;
    if let Some(p) = &a.stats {
        std::fs::write(p, serde_json::to_string_pretty(&stats)? + "\n")
            .with_context(|| format!("writing {}", p.display()))?;
    }
    eprintln!(
        "build-dataset: {} raw, {} annotated, {} dropped, {} retries → {}",
        stats.raw_records,
        manifest.len(),
        stats.dropped,
        stats.retries,
        a.out.display()
    );
    for (id, reason) in &stats.failures {
        eprintln!("  dropped {id}: {reason}");
    }
    Ok(0)
}

fn gen_synthetic(a: GenSyntheticArgs) -> Result<i32> {
    let mut spec = SyntheticCorpusSpec {
        num_records: a.num_records,
        image_size: a.image_size,
        distractors: a.distractors,
        seed: a.seed,
        ..SyntheticCorpusSpec::default()
    };
    if let Some(w) = a.split_weights {
        spec.weights.split = w;
    }
    let m = generate_synthetic_corpus(&spec, &a.out)?;
    eprintln!("gen-synthetic: {} records → {}", m.len(), a.out.join(MANIFEST_FILE).display());
    Ok(0)
}

fn train_cmd(a: TrainArgs) -> Result<i32> {
    let cfg = load_config(&a.config)?;
    let manifest = load_manifest(&a.manifest)?;
    let mut train_cfg = cfg.train_config();
    if a.max_steps.is_some() {
        train_cfg.max_steps = a.max_steps;
    }
    train_cfg.validate()?;
    let t = Instant::now();
    let out = train(&cfg.model_config(), &train_cfg, &manifest)?;
    save_checkpoint(&a.out, &out.best, &train_cfg, Some(&out.log))?;
    eprintln!(
        "train: {} steps in {:.1}s, final loss {:.5}, best epoch {:?} → {}",
        out.log.step_losses.len(),
        t.elapsed().as_secs_f64(),
        out.log.step_losses.last().copied().unwrap_or(f64::NAN),
        out.log.best_epoch,
        a.out.display()
    );
    Ok(0)
}

fn eval_cmd(a: EvalArgs) -> Result<i32> {
    let (model, _) = load_checkpoint(&a.ckpt).with_context(|| format!("loading checkpoint {}", a.ckpt.display()))?;
    let manifest = load_manifest(&a.manifest)?;
    let format = ReportFormat::from_path(&a.report)?;
    let e = evaluate(&model, &manifest, &a.label)?;
    write_report(&e.report, format, &a.report)?;
    if let Some(p) = &a.predictions {
        write_predictions(p, &e.predictions)?;
    }
    if let Some(c) = e.report.split("test") {
        eprintln!("eval: test {}/{} → {}", c.correct, c.count, a.report.display());
    }
    Ok(0)
}

fn ablate(a: AblateArgs) -> Result<i32> {
    let text = std::fs::read_to_string(&a.spec).with_context(|| format!("reading {}", a.spec.display()))?;
    let spec: AblationSpec = toml::from_str(&text).with_context(|| format!("parsing {}", a.spec.display()))?;
    let root = parent_dir(&a.spec);
    let cfg = load_config(&root.join(&spec.base_config))?;
    let manifest = load_manifest(&root.join(&spec.manifest))?;
    let out_dir = root.join(&spec.out_dir);
    std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let formats = spec
        .summaries
        .iter()
        .map(|f| Ok((ReportFormat::from_path(Path::new(f))?, out_dir.join(f))))
        .collect::<Result<Vec<_>>>()?;
    let rows = run_ablation(
        &cfg.model_config(),
        &cfg.train_config(),
        &manifest,
        &spec.modality_modes,
        Some(&out_dir),
    )?;
    for (format, path) in formats {
        std::fs::write(&path, emit_ablation(&rows, format)?).with_context(|| format!("writing {}", path.display()))?;
    }
    eprintln!("ablate: {} settings → {}", rows.len(), out_dir.display());
    Ok(0)
}

/// Writes to stdout; a closed pipe ends output quietly.
fn emit(text: &str) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn report(a: ReportArgs) -> Result<i32> {
    let r = read_report(&a.input).with_context(|| format!("reading report {}", a.input.display()))?;
    let text = emit_report(&r, ReportFormat::parse(&a.format)?)?;
    match &a.out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => emit(&text)?,
    }
    Ok(0)
}

fn selfcheck(a: SelfcheckArgs) -> Result<i32> {
    if a.list {
        let mut text = String::new();
        for (name, _) in FAST_CHECKS {
            text += &format!("{name}\n");
        }
        for (name, _) in SLOW_CHECKS {
            text += &format!("{name} (slow)\n");
        }
        emit(&text)?;
        return Ok(0);
    }
    let only: Vec<String> = if a.all {
        FAST_CHECKS.iter().chain(SLOW_CHECKS).map(|(n, _)| n.to_string()).collect()
    } else {
        a.only
    };
    let outcomes = run_checks(&only)?;
    if outcomes.is_empty() {
        bail!("no checks selected");
    }
    let mut failed = 0;
    for o in &outcomes {
        let tag = if o.passed { "PASS" } else { "FAIL" };
        emit(&format!("{tag} {:<26} {:>7.2}s  {}\n", o.name, o.seconds, o.detail))?;
        failed += usize::from(!o.passed);
    }
    emit(&format!("{} passed, {failed} failed\n", outcomes.len() - failed))?;
    Ok(if failed == 0 { 0 } else { 1 })
}
