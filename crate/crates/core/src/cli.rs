//! Command-line front end: `synth`, `train`, `eval`, `analyze`.
//!
//! Every option can also come from a TOML file passed with `--config`, whose
//! keys are the long flag names. Flags win over file values.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::blob::write_json;
use crate::error::{Error, Result};
use crate::evaluation::{
    gap_stats, inter_run_analysis, mean_gap, mi_accuracy_analysis, pearson_permutation_p, window_means,
    write_eval_artifacts, MiAccuracy,
};
use crate::feature_io::{generate_synthetic, split_seen_unseen, FeaturePack, SynthConfig};
use crate::prototypes::Deviation;
use crate::training::{fit, BackboneKind, History, Mode, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "vesdn", version, about = "Semantic/domain decoupling and zero-shot decoding of paired embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic feature pack.
    Synth(SynthArgs),
    /// Train on the seen classes of a pack.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the unseen classes of a pack.
    Eval(EvalArgs),
    /// MI/accuracy correlations and gap statistics from training histories.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Default, Clone, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct SynthArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub k_seen: Option<usize>,
    #[arg(long)]
    pub k_unseen: Option<usize>,
    #[arg(long)]
    pub n_per_class: Option<usize>,
    #[arg(long)]
    pub d_sem: Option<usize>,
    #[arg(long)]
    pub d_dom: Option<usize>,
    #[arg(long)]
    pub d_v: Option<usize>,
    #[arg(long)]
    pub d_b: Option<usize>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Clone, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub pack: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Checkpoint directory (default: `<out>/checkpoint`).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Intra-class consistency term (`--intra false` disables it).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub intra: Option<bool>,
    /// Supervised contrastive loss instead of InfoNCE.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub supcon: Option<bool>,
    #[arg(long)]
    pub n_logli: Option<usize>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub lambda3: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub d_joint: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long, value_enum)]
    pub backbone: Option<BackboneKind>,
    #[arg(long)]
    pub backbone_dim: Option<usize>,
    #[arg(long)]
    pub q_hidden: Option<usize>,
    #[arg(long, value_enum)]
    pub deviation: Option<Deviation>,
    #[arg(long)]
    pub probe_steps: Option<usize>,
    #[arg(long)]
    pub probe_lr: Option<f64>,
}

#[derive(Debug, Default, Clone, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct EvalArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub pack: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Clone, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct AnalyzeArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// `history.json` files or training output directories.
    #[arg(long, num_args = 1..)]
    pub history: Option<Vec<PathBuf>>,
    /// Trailing epochs averaged per run for the inter-run correlation.
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub permutations: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// With `--pack`, also writes per-class gap statistics of this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub pack: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Fills every `None` in `flags` from the same-named key of the config file.
fn overlay<T>(flags: T, config: Option<&Path>) -> Result<T>
where
    T: Serialize + for<'de> Deserialize<'de>,
{
    let Some(path) = config else {
        return Ok(flags);
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: toml::Table = toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    let mut merged = serde_json::to_value(file).map_err(|e| Error::config(e.to_string()))?;
    let given = serde_json::to_value(&flags).map_err(|e| Error::config(e.to_string()))?;
    if let (Some(m), Some(g)) = (merged.as_object_mut(), given.as_object()) {
        for (k, v) in g {
            if !v.is_null() {
                m.insert(k.clone(), v.clone());
            }
        }
    }
    serde_json::from_value(merged).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

fn required(value: Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    value.ok_or_else(|| Error::config(format!("--{flag} is required")))
}

impl SynthArgs {
    pub fn to_config(&self) -> SynthConfig {
        let d = SynthConfig::default();
        SynthConfig {
            k_seen: self.k_seen.unwrap_or(d.k_seen),
            k_unseen: self.k_unseen.unwrap_or(d.k_unseen),
            n_per_class: self.n_per_class.unwrap_or(d.n_per_class),
            d_sem: self.d_sem.unwrap_or(d.d_sem),
            d_dom: self.d_dom.unwrap_or(d.d_dom),
            d_v: self.d_v.unwrap_or(d.d_v),
            d_b: self.d_b.unwrap_or(d.d_b),
            noise_sigma: self.noise_sigma.unwrap_or(d.noise_sigma),
            seed: self.seed.unwrap_or(d.seed),
        }
    }
}

impl TrainArgs {
    pub fn to_config(&self) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            mode: self.mode.unwrap_or(d.mode),
            intra: self.intra.unwrap_or(d.intra),
            supcon: self.supcon.unwrap_or(d.supcon),
            lambda1: self.lambda1.unwrap_or(d.lambda1),
            lambda2: self.lambda2.unwrap_or(d.lambda2),
            lambda3: self.lambda3.unwrap_or(d.lambda3),
            alpha: self.alpha.unwrap_or(d.alpha),
            tau_init: self.tau.unwrap_or(d.tau_init),
            lr: self.lr.unwrap_or(d.lr),
            weight_decay: self.weight_decay.unwrap_or(d.weight_decay),
            batch_size: self.batch.unwrap_or(d.batch_size),
            epochs: self.epochs.unwrap_or(d.epochs),
            n_logli: self.n_logli.unwrap_or(d.n_logli),
            seed: self.seed.unwrap_or(d.seed),
            d_joint: self.d_joint.unwrap_or(d.d_joint),
            hidden: self.hidden.or(d.hidden),
            backbone: self.backbone.unwrap_or(d.backbone),
            backbone_dim: self.backbone_dim.or(d.backbone_dim),
            q_hidden: self.q_hidden.or(d.q_hidden),
            deviation: self.deviation.unwrap_or(d.deviation),
            probe_steps: self.probe_steps.unwrap_or(d.probe_steps),
            probe_lr: self.probe_lr.unwrap_or(d.probe_lr),
        }
    }
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let args = overlay(args.clone(), args.config.as_deref())?;
    let out = required(args.out.clone(), "out")?;
    let pack = generate_synthetic(&args.to_config())?;
    pack.save(&out)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let args = overlay(args.clone(), args.config.as_deref())?;
    let pack_dir = required(args.pack.clone(), "pack")?;
    let out = required(args.out.clone(), "out")?;
    let cfg = args.to_config();
    cfg.validate()?;
    let pack = FeaturePack::load(&pack_dir)?;
    let ckpt = args.checkpoint.clone().unwrap_or_else(|| out.join("checkpoint"));
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_json(&out.join("config.json"), &cfg)?;
    let (_, history) = fit(&cfg, &pack, Some(&ckpt))?;
    history.save(&out)
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let args = overlay(args.clone(), args.config.as_deref())?;
    let ckpt = required(args.checkpoint.clone(), "checkpoint")?;
    let pack_dir = required(args.pack.clone(), "pack")?;
    let out = required(args.out.clone(), "out")?;
    let state = crate::checkpoint::load(&ckpt)?;
    let pack = FeaturePack::load(&pack_dir)?;
    write_eval_artifacts(&state, &pack, &out)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct RunAnalysis {
    source: String,
    epochs: usize,
    intra: Option<MiAccuracy>,
    intra_error: Option<String>,
    p_top1: Option<f64>,
    p_top5: Option<f64>,
    window_probe_mi: f64,
    window_top1: f64,
    window_top5: f64,
    final_gap_mean: Option<f64>,
    final_gap_std: Option<f64>,
}

#[derive(Debug, Serialize)]
struct Analysis {
    window: usize,
    permutations: usize,
    runs: Vec<RunAnalysis>,
    inter: Option<MiAccuracy>,
    inter_error: Option<String>,
    checkpoint_gap_mean: Option<f64>,
    checkpoint_gap_std: Option<f64>,
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<()> {
    let args = overlay(args.clone(), args.config.as_deref())?;
    let sources = args.history.clone().unwrap_or_default();
    let window = args.window.unwrap_or(10);
    let permutations = args.permutations.unwrap_or(9999);
    let seed = args.seed.unwrap_or(0);
    if sources.is_empty() && args.checkpoint.is_none() {
        return Err(Error::config("nothing to analyze: pass --history and/or --checkpoint with --pack"));
    }

    let mut histories = Vec::new();
    let mut runs = Vec::new();
    for src in &sources {
        let file = if src.is_dir() { src.join("history.json") } else { src.clone() };
        let h = History::load(&file)?;
        let (window_probe_mi, window_top1, window_top5) = window_means(&h, window)?;
        let mi: Vec<f64> = h.epochs.iter().map(|e| e.probe_mi).collect();
        let top1: Vec<f64> = h.epochs.iter().map(|e| e.top1).collect();
        let top5: Vec<f64> = h.epochs.iter().map(|e| e.top5).collect();
        let (intra, intra_error, p_top1, p_top5) = match mi_accuracy_analysis(&h) {
            Ok(r) => (
                Some(r),
                None,
                Some(pearson_permutation_p(&mi, &top1, permutations, seed)?),
                Some(pearson_permutation_p(&mi, &top5, permutations, seed)?),
            ),
            Err(e) => (None, Some(e.to_string()), None, None),
        };
        runs.push(RunAnalysis {
            source: file.display().to_string(),
            epochs: h.epochs.len(),
            intra,
            intra_error,
            p_top1,
            p_top5,
            window_probe_mi,
            window_top1,
            window_top5,
            final_gap_mean: h.epochs.last().map(|e| e.gap_mean),
            final_gap_std: h.epochs.last().map(|e| e.gap_std),
        });
        histories.push(h);
    }
    let (inter, inter_error) = if histories.len() >= 2 {
        match inter_run_analysis(&histories, window) {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e.to_string())),
        }
    } else {
        (None, None)
    };

    let mut analysis = Analysis {
        window,
        permutations,
        runs,
        inter,
        inter_error,
        checkpoint_gap_mean: None,
        checkpoint_gap_std: None,
    };
    if let Some(ckpt) = &args.checkpoint {
        let pack_dir = required(args.pack.clone(), "pack")?;
        let state = crate::checkpoint::load(ckpt)?;
        let pack = FeaturePack::load(&pack_dir)?;
        let (train, _) = split_seen_unseen(&pack)?;
        let batch = train.to_batch();
        let z = state.net.encode_visual(batch.h_v.view())?;
        let gaps = gap_stats(z.view(), &batch.y, &state.bank)?;
        let (m, s) = mean_gap(&gaps);
        analysis.checkpoint_gap_mean = Some(m);
        analysis.checkpoint_gap_std = Some(s);
        if let Some(out) = &args.out {
            std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            let mut csv = String::from("class,mean,std,count\n");
            for (c, g) in &gaps {
                csv.push_str(&format!("{c},{},{},{}\n", g.mean, g.std, g.count));
            }
            let p = out.join("gaps.csv");
            std::fs::write(&p, csv).map_err(|e| Error::io(p, e))?;
        }
    }
    match &args.out {
        Some(out) => {
            std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            write_json(&out.join("analysis.json"), &analysis)
        }
        None => {
            let text = serde_json::to_string_pretty(&analysis).map_err(|e| Error::config(e.to_string()))?;
            println!("{text}");
            Ok(())
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Analyze(a) => cmd_analyze(a),
    }
}

fn error_line(kind: &str, code: i32, message: &str) -> String {
    serde_json::json!({ "error": kind, "code": code, "message": message }).to_string()
}

/// Parses `argv` and runs the command; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", 1, first));
            return 1;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let code = e.exit_code();
            eprintln!("{}", error_line(e.kind(), code, &e.to_string()));
            code
        }
    }
}
