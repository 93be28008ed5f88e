//! The `clfusion` command line.
//!
//! Subcommands share a working directory (`--dir`, default `.`) with fixed
//! file names, so `gen-data`, `train` and `eval` chain without extra flags:
//!
//! | file                 | written by | read by          |
//! |----------------------|------------|------------------|
//! | `config.toml`        | gen-data   |                  |
//! | `train.clfd`         | gen-data   | train, eval      |
//! | `heldout.clfd`       | gen-data   | eval, sample     |
//! | `checkpoint.json`    | train      | eval, sample     |
//! | `train_log.ndjson`   | train      |                  |
//! | `eval_report.json`   | eval       |                  |
//! | `eval_report.csv`    | eval       |                  |
//!
//! Exit codes: 0 on success, 1 for config or runtime errors, 2 for usage
//! errors such as an unknown subcommand.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::{Preset, RunConfig};
use crate::data::{generate_dataset, Backend, CameraPose, Dataset, SyntheticWorld};
use crate::error::{Error, Result};
use crate::eval::{
    ablation_suite, clip_score, inter_identity_baseline, load_prompts, recovery_views, score_model, AblationReport,
    ModelScores,
};
use crate::latents::LatentFile;
use crate::sampler::{sample_batch, SamplerConfig};
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::trainer::{train_loop, LoopOutputs, Trainer};

#[derive(Debug, Parser)]
#[command(name = "clfusion", version, about = "Contrastive latent diffusion prior")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate training and held-out datasets from the synthetic world.
    GenData(GenDataArgs),
    /// Train the prior; writes a log and a checkpoint.
    Train(TrainArgs),
    /// Sample latents from a checkpoint.
    Sample(SampleArgs),
    /// Score a checkpoint and run the loss ablations.
    Eval(EvalArgs),
    /// Print a noise schedule as CSV.
    InspectSchedule(ScheduleArgs),
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// TOML config file (JSON if the name ends in `.json`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Start from a named preset: desk (default) or full.
    #[arg(long)]
    pub preset: Option<Preset>,
    /// `key=value` override, repeatable; keys are dotted paths or unique leaf names.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Working directory for inputs and outputs.
    #[arg(long, default_value = ".")]
    pub dir: PathBuf,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        RunConfig::resolve(self.preset, self.config.as_deref(), &self.overrides)
    }

    fn path(&self, explicit: &Option<PathBuf>, default: &str) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.dir.join(default))
    }
}

impl clap::builder::ValueParserFactory for Preset {
    type Parser = clap::builder::ValueParser;

    fn value_parser() -> Self::Parser {
        clap::builder::ValueParser::new(|s: &str| s.parse::<Preset>().map_err(|e| e.to_string()))
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    /// Training data (default `<dir>/train.clfd`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output checkpoint (default `<dir>/checkpoint.json`).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output log (default `<dir>/train_log.ndjson`).
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Continue from this checkpoint. Its training config is kept except
    /// for `iterations`, which comes from the resolved config.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    /// Checkpoint (default `<dir>/checkpoint.json`).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Text file with one embedding per line (comma or space separated).
    #[arg(long, conflicts_with_all = ["prompt", "data"])]
    pub embeddings: Option<PathBuf>,
    /// Text prompt; needs a backend with a text encoder.
    #[arg(long, conflicts_with = "data")]
    pub prompt: Option<String>,
    /// Dataset whose identities are sampled from one view each.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Guidance scale (overrides `eval.sampler.guidance_scale`).
    #[arg(long)]
    pub guidance: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output latent file (default `<dir>/latents.clfl`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    /// Checkpoint to score (default `<dir>/checkpoint.json` when it exists).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub heldout: Option<PathBuf>,
    /// Skip the ablation training runs.
    #[arg(long)]
    pub no_ablation: bool,
    /// Prompt list for the frontal-view text/image score.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    #[arg(long, default_value = "linear")]
    pub kind: ScheduleKind,
    #[arg(long = "T", default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub beta_start: f64,
    #[arg(long, default_value_t = 0.02)]
    pub beta_end: f64,
}

impl clap::builder::ValueParserFactory for ScheduleKind {
    type Parser = clap::builder::ValueParser;

    fn value_parser() -> Self::Parser {
        clap::builder::ValueParser::new(|s: &str| s.parse::<ScheduleKind>().map_err(|e| e.to_string()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn dataset_hash(ds: &Dataset) -> Result<String> {
    Ok(sha256_hex(&ds.to_bytes()?))
}

fn world(cfg: &RunConfig) -> Result<SyntheticWorld> {
    SyntheticWorld::new(cfg.world)
}

fn provenance(cfg: &RunConfig, command: &str) -> Result<serde_json::Value> {
    Ok(serde_json::json!({
        "command": command,
        "crate_version": env!("CARGO_PKG_VERSION"),
        "config": serde_json::to_value(cfg)?,
    }))
}

pub fn gen_data(args: &GenDataArgs) -> Result<()> {
    let cfg = args.common.resolve()?;
    let dir = &args.common.dir;
    std::fs::create_dir_all(dir)?;
    let w = world(&cfg)?;
    let meta = provenance(&cfg, "gen-data")?;
    let train = generate_dataset(&w, cfg.data.n_identities, cfg.data.views, cfg.data.seed, meta.clone())?;
    train.write(dir.join("train.clfd"))?;
    if cfg.data.heldout_identities > 0 {
        let heldout = generate_dataset(&w, cfg.data.heldout_identities, cfg.data.views, cfg.data.heldout_seed, meta)?;
        heldout.write(dir.join("heldout.clfd"))?;
    }
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    log::info!(
        "wrote {} training and {} held-out identities to {}",
        cfg.data.n_identities,
        cfg.data.heldout_identities,
        dir.display()
    );
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let cfg = args.common.resolve()?;
    let c = &args.common;
    let data_path = c.path(&args.data, "train.clfd");
    let dataset = Dataset::read(&data_path)?;
    let mut trainer = match &args.resume {
        Some(path) => {
            let mut t = Trainer::from_checkpoint(Checkpoint::load(path)?)?;
            t.set_iterations(cfg.train.iterations);
            t
        }
        None => Trainer::new(cfg.train.clone())?,
    };
    let outputs = LoopOutputs {
        log: Some(c.path(&args.log, "train_log.ndjson")),
        checkpoint: Some(c.path(&args.checkpoint, "checkpoint.json")),
    };
    if let Some(parent) = outputs.log.as_ref().and_then(|p| p.parent()) {
        std::fs::create_dir_all(parent)?;
    }
    let reports = train_loop(&mut trainer, &dataset, &outputs)?;
    let run_record = provenance(&cfg, "train")?;
    std::fs::write(
        c.dir.join("train_run.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "run": run_record,
            "data": data_path,
            "data_sha256": dataset_hash(&dataset)?,
            "steps": trainer.step_index(),
            "final": reports.last(),
        }))?,
    )?;
    log::info!("trained to step {}", trainer.step_index());
    Ok(())
}

/// One embedding per non-empty line; values separated by commas or spaces.
pub fn read_embeddings(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|e| Error::Format(format!("{}:{}: `{s}`: {e}", path.display(), i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(row);
    }
    if out.is_empty() {
        return Err(Error::Format(format!("{} holds no embeddings", path.display())));
    }
    Ok(out)
}

pub fn sample(args: &SampleArgs) -> Result<()> {
    let cfg = args.common.resolve()?;
    let c = &args.common;
    let ckpt_path = c.path(&args.checkpoint, "checkpoint.json");
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let sched = ckpt.schedule.build()?;
    let net = ckpt.network()?;
    let sampler = SamplerConfig {
        guidance_scale: args.guidance.unwrap_or(cfg.eval.sampler.guidance_scale),
        ..cfg.eval.sampler
    };
    let (embeddings, source) = if let Some(path) = &args.embeddings {
        (read_embeddings(path)?, serde_json::json!({ "embeddings": path }))
    } else if let Some(prompt) = &args.prompt {
        let e = world(&cfg)?.embed_text(prompt)?;
        (vec![e.values], serde_json::json!({ "prompt": prompt }))
    } else {
        let path = c.path(&args.data, "heldout.clfd");
        let ds = Dataset::read(&path)?;
        let views = recovery_views(&ds, args.seed);
        let embs = ds
            .identities
            .iter()
            .zip(&views)
            .map(|(i, &v)| i.views[v].embedding.values.clone())
            .collect();
        (embs, serde_json::json!({ "data": path, "views": views }))
    };
    let (latents, timing) = sample_batch(&net, &embeddings, &sched, &sampler, args.seed)?;
    let mut meta = provenance(&cfg, "sample")?;
    meta["checkpoint"] = serde_json::json!(ckpt_path);
    meta["checkpoint_step"] = ckpt.step.into();
    meta["sampler"] = serde_json::to_value(sampler)?;
    meta["source"] = source;
    meta["timing"] = serde_json::to_value(&timing)?;
    let file = LatentFile {
        dim: net.config().io_dim(),
        seed: args.seed,
        guidance_scale: sampler.guidance_scale,
        meta,
        latents,
    };
    let out = c.path(&args.out, "latents.clfl");
    file.write(&out)?;
    log::info!(
        "wrote {} latents to {} ({:.3}s per sample)",
        file.latents.len(),
        out.display(),
        timing.mean_s()
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEval {
    pub path: PathBuf,
    pub step: usize,
    pub scores: ModelScores,
    pub inter_identity_baseline: f64,
    pub clip_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub provenance: serde_json::Value,
    pub train_data_sha256: String,
    pub heldout_data_sha256: String,
    pub checkpoint: Option<CheckpointEval>,
    pub ablation: Option<AblationReport>,
    /// Hash of each seed's ablation results.
    pub seed_hashes: BTreeMap<u64, String>,
    /// Hash of the whole report with timing fields zeroed.
    pub report_hash: String,
}

impl EvalReport {
    pub fn compute_hash(&self) -> String {
        let mut stripped = self.clone();
        stripped.report_hash.clear();
        if let Some(c) = stripped.checkpoint.as_mut() {
            c.scores.recovery.mean_sample_s = 0.0;
            c.path = PathBuf::new();
        }
        if let Some(a) = stripped.ablation.as_mut() {
            for r in &mut a.results {
                if let Some(s) = r.scores.as_mut() {
                    s.recovery.mean_sample_s = 0.0;
                }
            }
        }
        // Paths in the provenance depend on where the pipeline ran.
        stripped.provenance["dir"] = serde_json::Value::Null;
        sha256_hex(&serde_json::to_vec(&stripped).expect("report serializes"))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,seed,view_invariance,recovery_cosine,recovery_l2,final_loss,status\n");
        let num = |x: Option<f64>| x.map(|v| format!("{v:.10e}")).unwrap_or_default();
        if let Some(c) = &self.checkpoint {
            out.push_str(&format!(
                "checkpoint,,{},{},{},,ok\n",
                num(Some(c.scores.view_invariance)),
                num(Some(c.scores.recovery.cosine_mean)),
                num(Some(c.scores.recovery.l2_mean)),
            ));
        }
        if let Some(a) = &self.ablation {
            for r in &a.results {
                let s = r.scores.as_ref();
                let status = match &r.failure {
                    Some(f) => format!("\"failed: {}\"", f.replace('"', "'")),
                    None => "ok".into(),
                };
                out.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    r.variant.name(),
                    r.seed,
                    num(s.map(|s| s.view_invariance)),
                    num(s.map(|s| s.recovery.cosine_mean)),
                    num(s.map(|s| s.recovery.l2_mean)),
                    num(r.final_loss),
                    status
                ));
            }
        }
        out
    }
}

fn seed_hashes(report: &AblationReport) -> BTreeMap<u64, String> {
    let mut out = BTreeMap::new();
    for ranking in &report.rankings {
        let mut results: Vec<_> = report.results.iter().filter(|r| r.seed == ranking.seed).cloned().collect();
        for r in &mut results {
            if let Some(s) = r.scores.as_mut() {
                s.recovery.mean_sample_s = 0.0;
            }
        }
        let bytes = serde_json::to_vec(&(&results, ranking)).expect("results serialize");
        out.insert(ranking.seed, sha256_hex(&bytes));
    }
    out
}

pub fn evaluate(args: &EvalArgs) -> Result<EvalReport> {
    let cfg = args.common.resolve()?;
    let c = &args.common;
    let train = Dataset::read(c.path(&args.data, "train.clfd"))?;
    let heldout = Dataset::read(c.path(&args.heldout, "heldout.clfd"))?;

    let ckpt_path = c.path(&args.checkpoint, "checkpoint.json");
    let checkpoint = if args.checkpoint.is_some() || ckpt_path.exists() {
        let ckpt = Checkpoint::load(&ckpt_path)?;
        let sched: NoiseSchedule = ckpt.schedule.build()?;
        let net = ckpt.network()?;
        let scores = score_model(&net, &heldout, &sched, &cfg.eval)?;
        let baseline = inter_identity_baseline(&net, &heldout, &sched, cfg.eval.n_probes, cfg.eval.seed)?;
        let clip = match &args.prompts {
            Some(p) => {
                let prompts = load_prompts(p)?;
                let w = world(&cfg)?;
                let embs: Vec<Vec<f64>> = prompts
                    .iter()
                    .map(|p| w.embed_text(p).map(|e| e.values))
                    .collect::<Result<_>>()?;
                let (latents, _) = sample_batch(&net, &embs, &sched, &cfg.eval.sampler, cfg.eval.seed)?;
                Some(clip_score(&w, &prompts, &latents, CameraPose::FRONTAL)?)
            }
            None => None,
        };
        Some(CheckpointEval {
            path: ckpt_path,
            step: ckpt.step,
            scores,
            inter_identity_baseline: baseline,
            clip_score: clip,
        })
    } else {
        None
    };

    let ablation = if args.no_ablation {
        None
    } else {
        Some(ablation_suite(
            &cfg.train,
            &cfg.ablation.variants,
            &cfg.ablation.seeds,
            &train,
            &heldout,
            &cfg.eval,
        )?)
    };

    let mut provenance = provenance(&cfg, "eval")?;
    provenance["dir"] = serde_json::json!(c.dir);
    let mut report = EvalReport {
        provenance,
        train_data_sha256: dataset_hash(&train)?,
        heldout_data_sha256: dataset_hash(&heldout)?,
        seed_hashes: ablation.as_ref().map(seed_hashes).unwrap_or_default(),
        checkpoint,
        ablation,
        report_hash: String::new(),
    };
    report.report_hash = report.compute_hash();

    std::fs::write(c.path(&args.out, "eval_report.json"), serde_json::to_string_pretty(&report)?)?;
    std::fs::write(c.path(&args.csv, "eval_report.csv"), report.to_csv())?;
    Ok(report)
}

pub fn inspect_schedule(args: &ScheduleArgs) -> Result<String> {
    Ok(NoiseSchedule::new(args.kind, args.steps, args.beta_start, args.beta_end)?.to_csv())
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let outcome = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::Eval(a) => evaluate(a).map(|r| {
            println!("report hash {}", r.report_hash);
            for (seed, h) in &r.seed_hashes {
                println!("seed {seed} hash {h}");
            }
        }),
        Command::InspectSchedule(a) => inspect_schedule(a).map(|csv| print!("{csv}")),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            let category = match &e {
                Error::Config { .. } | Error::Param { .. } => "config error",
                Error::Io(_) => "i/o error",
                Error::Format(_) | Error::Json(_) => "format error",
                Error::Integration(_) => "integration error",
                _ => "runtime error",
            };
            eprintln!("clfusion: {category}: {e}");
            1
        }
    }
}
