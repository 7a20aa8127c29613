use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use sentimoe::ablate::{depth_variants, expert_variants, run_variants, variants, AblationData};
use sentimoe::checkpoint::Checkpoint;
use sentimoe::config::RunConfig;
use sentimoe::data::{load_manifest, read_feature_file, synth_dataset, LabelScale, Manifest, Split, SynthSpec};
use sentimoe::explain::{fetch_explanations, ExplanationProvider, HttpProvider, RetryPolicy, StubProvider};
use sentimoe::model::ModelInput;
use sentimoe::train::{evaluate, train_with};

#[derive(Parser)]
#[command(name = "sentimoe", version, about = "Explanation-aligned multimodal sentiment regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Score a split with a checkpoint.
    Eval(EvalArgs),
    /// Run the ablation table or a sweep.
    Ablate(AblateArgs),
    /// Score one record.
    Predict(PredictArgs),
    /// Write a synthetic dataset.
    Synth(SynthArgs),
    /// Request explanations for records that lack them.
    FetchExplanations(FetchArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Run config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest; overrides the config's.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl DataArgs {
    fn load(&self) -> Result<(RunConfig, Manifest)> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(m) = &self.manifest {
            cfg.manifest = Some(m.clone());
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        let path = cfg
            .manifest
            .clone()
            .context("no dataset: pass --manifest or set `manifest` in the config")?;
        let manifest = load_manifest(&path).with_context(|| format!("loading manifest {}", path.display()))?;
        Ok((cfg, manifest))
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint path; the epoch log is written next to it.
    #[arg(long, default_value = "model.txck")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to the manifest stored in the checkpoint's config.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Metric report path (JSON).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-record predictions path (JSON).
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Sweep {
    Table,
    Depth,
    Experts,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Comma-separated seeds; `--seed` alone runs a single seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long, value_enum, default_value = "table")]
    sweep: Sweep,
    /// Comma-separated sweep values.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
    values: Vec<usize>,
    /// Split the table reports on.
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Output directory for `ablation.json` and `ablation.txt`.
    #[arg(long, default_value = "ablation")]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A TXF1 record file.
    #[arg(long, conflicts_with = "id")]
    record: Option<PathBuf>,
    /// A record id, loaded through `--manifest`.
    #[arg(long, requires = "manifest")]
    id: Option<String>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Clamp the score to the label range.
    #[arg(long)]
    clamp: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Three,
    One,
}

#[derive(Args)]
struct SynthArgs {
    /// Generator settings (JSON); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long, value_enum)]
    scale: Option<ScaleArg>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProviderArg {
    Stub,
    Http,
}

#[derive(Args)]
struct FetchArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value = "stub")]
    provider: ProviderArg,
    /// Provider endpoint for `--provider http`.
    #[arg(long)]
    url: Option<String>,
    /// Stub provider seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sidecar directory; defaults to `explanations/` next to the manifest.
    #[arg(long)]
    sidecars: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    attempts: u32,
    #[arg(long, default_value_t = 200)]
    backoff_ms: u64,
    #[arg(long, default_value_t = 30)]
    timeout_secs: u64,
    /// Updated manifest path; defaults to rewriting `--manifest`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn log_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".log.json");
    out.with_file_name(name)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let (cfg, manifest) = args.data.load()?;
    let train = manifest.load_split(Split::Train)?;
    let val = manifest.load_split(Split::Val)?;
    let out = train_with(&cfg, &train, &val, |e| {
        let val = e.val_mae.map_or("-".to_string(), |v| format!("{v:.4}"));
        eprintln!("epoch {:>4}  loss {:.5}  train_mae {:.4}  val_mae {val}", e.epoch, e.loss, e.train_mae);
    })?;
    Checkpoint::from_outcome(&cfg, &out, manifest.scale).save(&args.out)?;
    write_json(&log_path(&args.out), &out.log)?;
    println!("wrote {} (epoch {})", args.out.display(), out.epoch);
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let path = args
        .manifest
        .or_else(|| ck.config.manifest.clone())
        .context("no dataset: pass --manifest")?;
    let manifest = load_manifest(&path)?;
    let records = manifest.load_split(args.split.into())?;
    let (model, params) = ck.restore()?;
    let (report, preds) = evaluate(&model, &params, &records, ck.scale)?;
    if let Some(p) = &args.predictions {
        let rows: Vec<_> = records
            .iter()
            .zip(&preds)
            .map(|(r, s)| json!({"id": r.id, "score": s, "label": r.label}))
            .collect();
        write_json(p, &rows)?;
    }
    if let Some(p) = &args.out {
        write_json(p, &report)?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let (cfg, manifest) = args.data.load()?;
    let seeds = if !args.seeds.is_empty() {
        args.seeds.clone()
    } else if let Some(s) = args.data.seed {
        vec![s]
    } else {
        vec![0, 1, 2, 3, 4]
    };
    let train = manifest.load_split(Split::Train)?;
    let val = manifest.load_split(Split::Val)?;
    let eval = manifest.load_split(args.split.into())?;
    if eval.is_empty() {
        bail!("the evaluation split is empty");
    }
    let rows = match args.sweep {
        Sweep::Table => variants(&cfg),
        Sweep::Depth => depth_variants(&cfg, &args.values),
        Sweep::Experts => expert_variants(&cfg, &args.values),
    };
    let data = AblationData {
        train: &train,
        val: &val,
        eval: &eval,
        scale: manifest.scale,
    };
    let table = run_variants(&rows, &seeds, &data);
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    fs::write(args.out.join("ablation.json"), table.to_json()? + "\n")?;
    let text = table.to_text();
    fs::write(args.out.join("ablation.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let record = match (&args.record, &args.id) {
        (Some(p), _) => read_feature_file(p)?,
        (None, Some(id)) => load_manifest(args.manifest.as_ref().expect("clap requires it"))?.load_record(id)?,
        (None, None) => bail!("pass --record or --id with --manifest"),
    };
    let (model, params) = ck.restore()?;
    let input = ModelInput::from_record(&record, &model.config)?;
    let (raw, trace) = model.predict(&params, &input)?;
    let bound = ck.scale.bound();
    let score = if args.clamp { raw.clamp(-bound, bound) } else { raw };
    let out = json!({
        "id": record.id,
        "score": score,
        "raw_score": raw,
        "clamped": args.clamp,
        "trace": trace,
    });
    if let Some(p) = &args.out {
        write_json(p, &out)?;
    }
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let mut spec: SynthSpec = match &args.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => SynthSpec::default(),
    };
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    spec.n_train = args.n_train.unwrap_or(spec.n_train);
    spec.n_val = args.n_val.unwrap_or(spec.n_val);
    spec.n_test = args.n_test.unwrap_or(spec.n_test);
    if let Some(s) = args.scale {
        spec.scale = match s {
            ScaleArg::Three => LabelScale::Three,
            ScaleArg::One => LabelScale::One,
        };
    }
    let mut ds = synth_dataset(&spec)?;
    let path = ds.write(&args.out)?;
    println!("wrote {} records to {}", ds.records.len(), path.display());
    Ok(())
}

fn cmd_fetch(args: FetchArgs) -> Result<()> {
    let mut manifest = load_manifest(&args.manifest)?;
    let provider: Box<dyn ExplanationProvider> = match args.provider {
        ProviderArg::Stub => Box::new(StubProvider { seed: args.seed }),
        ProviderArg::Http => {
            let url = args.url.clone().context("--provider http needs --url")?;
            Box::new(HttpProvider::new(url, Duration::from_secs(args.timeout_secs))?)
        }
    };
    let dir = args.sidecars.clone().unwrap_or_else(|| manifest.root.join("explanations"));
    let policy = RetryPolicy {
        max_attempts: args.attempts,
        base_delay: Duration::from_millis(args.backoff_ms),
    };
    let summary = fetch_explanations(provider.as_ref(), &mut manifest, &dir, policy)?;
    let out = args.out.unwrap_or(args.manifest);
    manifest.save(&out)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Synth(a) => cmd_synth(a),
        Command::FetchExplanations(a) => cmd_fetch(a),
    }
}
