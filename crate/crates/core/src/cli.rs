//! The `clasp` command line.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::diagnostics::report;
use crate::encoders::{OracleEncoder, StageShape, ORACLE_DIM};
use crate::error::{ClaspError, Result};
use crate::pseudo_labels::{AttributeRecord, AttributeSchema, GranularitySet, PartOutcome, PartVocabulary, PseudoLabeler};
use crate::trainer::{build_training_set, run_training, RunStart, TrainConfig};
use crate::workbench::checkpoint::{load_checkpoint, load_checkpoint_for, read_manifest, save_checkpoint};
use crate::workbench::io::{read_ppm, write_pgm, write_ppm};
use crate::workbench::metrics::export_metrics;
use crate::workbench::synthetic::{generate_synthetic_dataset, SyntheticPersonSpec};
use crate::workbench::trace::{read_trace, write_trace, TraceFile};

pub const SEED_ENV: &str = "CLASP_SEED";

#[derive(Debug, Parser)]
#[command(name = "clasp", version, about = "Prompt-routed mixture-of-experts pre-training on pseudo-labeled person images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render synthetic person images with ground-truth part and attribute labels.
    GenData(GenDataArgs),
    /// Cluster, filter and label a directory of PPM images.
    PseudoLabel(PseudoLabelArgs),
    /// Run teacher-student pre-training.
    Pretrain(PretrainArgs),
    /// Compute conflict diagnostics from a trace file.
    Diagnose(DiagnoseArgs),
    /// Dump a checkpoint as JSON.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Number of images.
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides CLASP_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub background_fraction: Option<f64>,
    /// Seed of the oracle embedding basis.
    #[arg(long, default_value_t = 0)]
    pub oracle_seed: u64,
}

#[derive(Debug, Args)]
pub struct PseudoLabelArgs {
    /// Directory of `.ppm` images.
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Candidate cluster counts, e.g. `2,3,4`.
    #[arg(long, default_value = "2,3,4")]
    pub granularity: String,
    /// Overrides CLASP_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub oracle_seed: u64,
    /// Token grid rows of the feature extractor.
    #[arg(long, default_value_t = 8)]
    pub grid_height: usize,
    #[arg(long, default_value_t = 4)]
    pub grid_width: usize,
    /// JSON part vocabulary; defaults to the built-in parts.
    #[arg(long)]
    pub vocabulary: Option<PathBuf>,
    /// JSON attribute schema; defaults to the built-in schema.
    #[arg(long)]
    pub schema: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// JSON training config; missing keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Output directory for checkpoint, metrics and trace.
    #[arg(long, default_value = "clasp-run")]
    pub out: PathBuf,
    /// Continue a run from its checkpoint, keeping optimizer state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Start the multi-task stage from a DINO-only checkpoint.
    #[arg(long)]
    pub warm_start: Option<PathBuf>,
    /// Disable gate noise and zero the wall-time column.
    #[arg(long)]
    pub deterministic: bool,
    /// Overrides CLASP_SEED and the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Flag, then `CLASP_SEED`, then `fallback`.
pub fn resolve_seed(flag: Option<u64>, fallback: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| ClaspError::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(fallback),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let mut spec = SyntheticPersonSpec {
        seed: resolve_seed(a.seed, 0)?,
        ..SyntheticPersonSpec::default()
    };
    if let Some(f) = a.background_fraction {
        spec.background_fraction = f;
    }
    let oracle = OracleEncoder::person_default(a.oracle_seed);
    let vocab = PartVocabulary::default_parts();
    let schema = AttributeSchema::default_schema();
    let samples = generate_synthetic_dataset(a.n, &spec, &oracle, &vocab, &schema)?;
    let (img_dir, gt_dir) = (a.out.join("images"), a.out.join("ground_truth"));
    fs::create_dir_all(&img_dir)?;
    fs::create_dir_all(&gt_dir)?;
    let mut attrs = Vec::with_capacity(samples.len());
    for s in &samples {
        write_ppm(&img_dir.join(format!("{}.ppm", s.image.id)), &s.image)?;
        write_pgm(&gt_dir.join(format!("{}.pgm", s.image.id)), &s.parts)?;
        attrs.push(AttributeRecord::new(&s.image.id, &schema, &s.attribute_labels(&schema)?));
    }
    write_jsonl(&a.out.join("ground_truth_attributes.jsonl"), &attrs)?;
    write_json(&a.out.join("spec.json"), &spec)?;
    Ok(())
}

#[derive(Serialize)]
struct LabelOutcome {
    image: String,
    accepted: bool,
    reason: Option<crate::pseudo_labels::RejectReason>,
    granularity: Option<usize>,
}

fn pseudo_label(a: &PseudoLabelArgs) -> Result<()> {
    let vocab = match &a.vocabulary {
        Some(p) => PartVocabulary::load(p)?,
        None => PartVocabulary::default_parts(),
    };
    let schema = match &a.schema {
        Some(p) => AttributeSchema::load(p)?,
        None => AttributeSchema::default_schema(),
    };
    let gran = GranularitySet::parse(&a.granularity)?;
    let mut paths: Vec<PathBuf> = fs::read_dir(&a.images)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "ppm"));
    paths.sort();
    if paths.is_empty() {
        return Err(ClaspError::Usage(format!("no .ppm images in {}", a.images.display())));
    }
    let oracle = OracleEncoder::person_default(a.oracle_seed);
    let grid = StageShape::new(ORACLE_DIM, a.grid_height, a.grid_width);
    let labeler = PseudoLabeler::new(&oracle, &oracle, grid, vocab, schema.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(resolve_seed(a.seed, 0)?);
    let label_dir = a.out.join("labels");
    fs::create_dir_all(&label_dir)?;
    let mut outcomes = Vec::with_capacity(paths.len());
    let mut attrs = Vec::new();
    for p in &paths {
        let image = read_ppm(p)?;
        match labeler.generate_part_labels(&image, &gran, &mut rng)? {
            PartOutcome::Accepted(res) => {
                write_pgm(&label_dir.join(format!("{}.pgm", image.id)), &res.map)?;
                attrs.push(AttributeRecord::new(&image.id, &schema, &labeler.assign_attribute_labels(&image)?));
                outcomes.push(LabelOutcome {
                    image: image.id.clone(),
                    accepted: true,
                    reason: None,
                    granularity: Some(res.granularity),
                });
            }
            PartOutcome::Rejected(r) => outcomes.push(LabelOutcome {
                image: image.id.clone(),
                accepted: false,
                reason: Some(r),
                granularity: None,
            }),
        }
    }
    write_jsonl(&a.out.join("attributes.jsonl"), &attrs)?;
    write_json(&a.out.join("outcomes.json"), &outcomes)?;
    Ok(())
}

fn pretrain(a: &PretrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    cfg.seed = resolve_seed(a.seed, cfg.seed)?;
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(w) = &a.warm_start {
        cfg.warm_start_checkpoint = Some(w.clone());
    }
    if a.deterministic {
        cfg.model.moe.noise_enabled = false;
    }
    if a.resume.is_some() && a.warm_start.is_some() {
        return Err(ClaspError::Usage("--resume and --warm-start are exclusive".into()));
    }
    cfg.validate()?;
    // checkpoints are read before any data is built or step taken
    let start = match (&a.resume, &cfg.warm_start_checkpoint) {
        (Some(p), _) => RunStart::Resume(load_checkpoint_for(&cfg, p)?),
        (None, Some(p)) => RunStart::WarmStart(load_checkpoint_for(&cfg, p)?),
        (None, None) => RunStart::Fresh,
    };
    let data = build_training_set(&cfg)?;
    let out = run_training(&cfg, &data, start, a.deterministic, None)?;
    fs::create_dir_all(&a.out)?;
    save_checkpoint(&out.state, &cfg, &a.out.join("checkpoint.ckpt"))?;
    if !out.history.is_empty() {
        export_metrics(&out.history, &a.out, "metrics")?;
    }
    if let Some(t) = out.trace {
        write_trace(
            &TraceFile {
                step: t.step,
                trace: t.trace,
                profiles: Some(t.profiles),
            },
            &a.out.join("trace.json"),
        )?;
    }
    write_json(
        &a.out.join("held_out.json"),
        &serde_json::json!({ "start": out.start_eval, "end": out.end_eval }),
    )?;
    write_json(&a.out.join("config.json"), &cfg)?;
    Ok(())
}

fn diagnose(a: &DiagnoseArgs) -> Result<()> {
    let t = read_trace(&a.trace)?;
    let r = report(&t.trace, t.profiles.as_deref())?;
    write_json(&a.out, &r)
}

#[derive(Serialize)]
struct ExportedTensor<'a> {
    name: &'a str,
    shape: &'a [usize],
    values: &'a [f64],
}

fn export(a: &ExportArgs) -> Result<()> {
    let (state, cfg) = load_checkpoint(&a.checkpoint)?;
    let bytes = fs::read(&a.checkpoint)?;
    let (manifest, _) = read_manifest(&bytes, &a.checkpoint)?;
    let named = state.named_state();
    let tensors: Vec<ExportedTensor<'_>> = named
        .iter()
        .map(|(n, t)| ExportedTensor {
            name: n,
            shape: t.shape(),
            values: t.data(),
        })
        .collect();
    write_json(
        &a.out,
        &serde_json::json!({
            "step": manifest.step,
            "config": cfg,
            "dino": manifest.dino,
            "optimizer": manifest.optimizer,
            "tensors": tensors,
        }),
    )
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::PseudoLabel(a) => pseudo_label(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Diagnose(a) => diagnose(a),
        Command::Export(a) => export(a),
    }
}

/// Parses `args`, runs the command and returns the process exit code:
/// 0 on success, 2 on usage errors, 1 on runtime failures.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                ClaspError::Usage(_) => 2,
                _ => 1,
            }
        }
    }
}
