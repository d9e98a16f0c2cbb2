mod store;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use whisperfuse::ablation::Ablation;
use whisperfuse::exec::Exec;
use whisperfuse::io::checkpoint::{save_acoustic, save_lm};
use whisperfuse::io::manifest::save_manifest;
use whisperfuse::io::{read_json, read_loss_csv, write_json, write_loss_csv};
use whisperfuse::lm::ToyLm;
use whisperfuse::metrics::EvalReport;
use whisperfuse::pipeline::{hypgen, run, ExperimentConfig, PipelineError, RunResult, SPLITS};
use whisperfuse::synth::Mode;
use whisperfuse::train::{evaluate, prepare_examples, report_records, TrainError, LEARNING_RATES};

use store::Store;

#[derive(Parser)]
#[command(name = "whisperfuse", version, about = "Toy acoustic fusion for generative ASR error correction")]
struct Cli {
    /// Data root holding corpora, models, hypotheses and runs.
    #[arg(long, env = "WL_DATA_ROOT", default_value = "wl-data", global = true)]
    root: PathBuf,
    /// Overrides the seed stored in the root's config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Source {
    Weak,
    Strong,
}

impl Source {
    fn name(self) -> &'static str {
        match self {
            Source::Weak => "weak",
            Source::Strong => "strong",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/val/test corpora and write the root's config.
    Synth(SynthArgs),
    /// Pretrain the toy language model and both acoustic models.
    Pretrain,
    /// Sample, rank and strip n-best lists from an acoustic model.
    Hypgen {
        #[arg(long, value_enum, default_value = "weak")]
        source: Source,
        /// Hypotheses kept per utterance.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train fusion adapters and evaluate them on the test split.
    Train(TrainArgs),
    /// Score a trained run, or a plain-text predictions file, on the test split.
    Eval {
        #[arg(long, value_enum, default_value = "weak")]
        source: Source,
        /// One prediction per line, in test-manifest order.
        #[arg(long, conflicts_with = "run")]
        predictions: Option<PathBuf>,
        /// Label of a trained run.
        #[arg(long)]
        run: Option<String>,
        /// Where to write the JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one run per ablation.
    Ablate {
        /// Ablations to run; all of them when omitted.
        #[arg(long = "name")]
        names: Vec<String>,
        #[command(flatten)]
        budget: Budget,
    },
    /// Train on weak and on strong n-best lists and compare their WERR.
    CompareStrong {
        #[command(flatten)]
        budget: Budget,
    },
    /// Print every run's metrics and loss curve summary.
    Report {
        /// Also print the mean loss of every epoch.
        #[arg(long)]
        curves: bool,
    },
}

#[derive(Args)]
struct SynthArgs {
    /// Start from this experiment config (JSON) instead of the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    val: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
}

#[derive(Args, Clone, Default)]
struct Budget {
    /// Single learning rate instead of the sweep.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Accept values outside the standard recipe.
    #[arg(long = "override")]
    allow_override: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum, default_value = "weak")]
    source: Source,
    /// Run label; defaults to the ablation name or `standard`.
    #[arg(long)]
    label: Option<String>,
    #[arg(long, conflicts_with_all = ["no_init", "no_masking"])]
    ablation: Option<String>,
    /// Shorthand for `--ablation no-init`.
    #[arg(long)]
    no_init: bool,
    /// Shorthand for `--ablation no-masking`.
    #[arg(long, conflicts_with = "no_init")]
    no_masking: bool,
    #[command(flatten)]
    budget: Budget,
}

struct Ctx {
    store: Store,
    seed: Option<u64>,
    exec: Exec,
}

impl Ctx {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut c = self.store.config()?;
        if let Some(s) = self.seed {
            c.seed = s;
        }
        Ok(c)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    let ctx = Ctx { store: Store::new(cli.root), seed: cli.seed, exec };
    match dispatch(&ctx, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(ctx: &Ctx, command: Command) -> Result<()> {
    match command {
        Command::Synth(args) => synth(ctx, args),
        Command::Pretrain => pretrain(ctx),
        Command::Hypgen { source, n } => hypgen_cmd(ctx, source, n),
        Command::Train(args) => {
            let ablation = match (&args.ablation, args.no_init, args.no_masking) {
                (Some(name), _, _) => Some(Ablation::parse(name)?),
                (None, true, _) => Some(Ablation::NoInit),
                (None, _, true) => Some(Ablation::NoMasking),
                _ => None,
            };
            let label = args.label.unwrap_or_else(|| ablation.map_or("standard".into(), |a| a.name().into()));
            let result = train_run(ctx, args.source, &label, ablation, &args.budget)?;
            println!("{}", result.report.table());
            Ok(())
        }
        Command::Eval { source, predictions, run, out } => eval(ctx, source, predictions, run, out),
        Command::Ablate { names, budget } => {
            let ablations = if names.is_empty() {
                Ablation::ALL.to_vec()
            } else {
                names.iter().map(|n| Ablation::parse(n)).collect::<Result<_, _>>()?
            };
            let mut lines = Vec::new();
            for a in ablations {
                let r = train_run(ctx, Source::Weak, a.name(), Some(a), &budget)?;
                lines.push(format!("{}  final loss {:.4}", r.report.table(), r.outcome.final_loss(10)));
            }
            println!("{}", lines.join("\n"));
            Ok(())
        }
        Command::CompareStrong { budget } => compare_strong(ctx, &budget),
        Command::Report { curves } => report(ctx, curves),
    }
}

fn synth(ctx: &Ctx, args: SynthArgs) -> Result<()> {
    let mut config: ExperimentConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = ctx.seed {
        config.seed = s;
    }
    if let Some(m) = &args.mode {
        config.synth.mode = Mode::parse(m).with_context(|| format!("unknown mode {m:?}; expected structured or diverse"))?;
    }
    if let Some(s) = args.noise_sigma {
        if !(s >= 0.0 && s.is_finite()) {
            bail!("noise sigma must be a non-negative number, got {s}");
        }
        config.synth.noise_sigma = s;
    }
    config.splits.train = args.train.unwrap_or(config.splits.train);
    config.splits.val = args.val.unwrap_or(config.splits.val);
    config.splits.test = args.test.unwrap_or(config.splits.test);
    config.model.validate()?;
    for split in SPLITS {
        let utts = config.corpus(split);
        ctx.store.save_utterances(split, &utts)?;
        log::info!("{split}: {} utterances", utts.len());
    }
    ctx.store.save_config(&config)
}

fn pretrain(ctx: &Ctx) -> Result<()> {
    let config = ctx.config()?;
    let p = config.pretrain(ctx.exec)?;
    save_lm(&ctx.store.model("lm"), &p.lm)?;
    save_acoustic(&ctx.store.model("weak"), &p.weak)?;
    save_acoustic(&ctx.store.model("strong"), &p.strong)?;
    #[derive(Serialize)]
    struct Losses<'a> {
        lm: &'a [f64],
        weak: &'a [f64],
        strong: &'a [f64],
    }
    write_json(
        &ctx.store.root.join("models").join("pretrain_losses.json"),
        &Losses { lm: &p.lm_losses, weak: &p.weak_losses, strong: &p.strong_losses },
    )?;
    let last = |l: &[f64]| l.last().copied().unwrap_or(f64::NAN);
    println!("lm loss {:.4}  weak loss {:.4}  strong loss {:.4}", last(&p.lm_losses), last(&p.weak_losses), last(&p.strong_losses));
    Ok(())
}

fn hypgen_cmd(ctx: &Ctx, source: Source, n: Option<usize>) -> Result<()> {
    let config = ctx.config()?;
    let mut sampling = config.sampling.clone();
    if let Some(n) = n {
        if n == 0 {
            bail!("--n must be positive");
        }
        sampling.n_select = n;
    }
    let model = ctx.store.acoustic(source.name())?;
    for split in SPLITS {
        let utts = ctx.store.load_utterances(split)?;
        let s = hypgen(&model, &utts, &sampling, config.seed, "../../features", ctx.exec)?;
        save_manifest(&ctx.store.hyps(source.name(), split), &s.records)?;
        let excluded = s.records.iter().filter(|r| r.train_excluded).count();
        log::info!("{} {split}: {} records, {excluded} excluded from training", source.name(), s.records.len());
    }
    Ok(())
}

fn train_run(ctx: &Ctx, source: Source, label: &str, ablation: Option<Ablation>, budget: &Budget) -> Result<RunResult> {
    let mut config = ctx.config()?;
    if let Some(e) = budget.epochs {
        config.train.epochs = e;
    }
    if let Some(b) = budget.batch_size {
        config.train.batch_size = b;
    }
    config.train.allow_override |= budget.allow_override;
    let base = ctx.store.lm(&ctx.store.model("lm"))?;
    let strong = ctx.store.acoustic("strong")?;
    let sets = ctx.store.load_sets(source.name())?;
    let dir = ctx.store.run_dir(label);
    let rates: Vec<f64> = budget.lr.map_or(LEARNING_RATES.to_vec(), |lr| vec![lr]);
    let mut best: Option<RunResult> = None;
    for lr in rates {
        config.train.learning_rate = lr;
        log::info!("{label}: learning rate {lr}");
        let result = match run(label, &base, &strong, &sets, &config, ablation, ctx.exec) {
            Err(PipelineError::Train(TrainError::Divergent(d))) => {
                let path = dir.join("divergence.json");
                write_json(&path, &d)?;
                bail!("{label}: training diverged at epoch {} step {}; state written to {}", d.epoch, d.step, path.display());
            }
            r => r?,
        };
        if best.as_ref().is_none_or(|b| result.outcome.best_val_wer < b.outcome.best_val_wer) {
            best = Some(result);
        }
    }
    let best = best.expect("at least one learning rate");
    save_lm(&dir.join("adapter.ckpt"), &best.lm)?;
    write_loss_csv(&dir.join("loss.csv"), &best.outcome.loss_curve)?;
    write_json(&dir.join("outcome.json"), &best.outcome)?;
    write_json(&dir.join("report.json"), &best.report)?;
    #[derive(Serialize)]
    struct RunInfo<'a> {
        label: &'a str,
        source: &'a str,
        ablation: Option<Ablation>,
        config: &'a ExperimentConfig,
    }
    config.train.learning_rate = best.outcome.learning_rate;
    write_json(&dir.join("run.json"), &RunInfo { label, source: source.name(), ablation, config: &config })?;
    Ok(best)
}

fn eval(ctx: &Ctx, source: Source, predictions: Option<PathBuf>, run: Option<String>, out: Option<PathBuf>) -> Result<()> {
    let config = ctx.config()?;
    let test = ctx.store.load_split(source.name(), "test")?;
    let (report, default_out) = match (predictions, run) {
        (Some(p), _) => {
            let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            let preds: Vec<String> = text.lines().map(str::to_string).collect();
            if preds.len() != test.records.len() {
                bail!("{} has {} lines but the test manifest has {} records", p.display(), preds.len(), test.records.len());
            }
            let records: Vec<_> = test.records.iter().collect();
            let label = p.file_stem().map_or("predictions".into(), |s| s.to_string_lossy().into_owned());
            let report = report_records(&label, &records, &preds, config.train.pooling)?;
            (report, ctx.store.root.join("eval").join(format!("{label}.json")))
        }
        (None, Some(label)) => {
            let dir = ctx.store.run_dir(&label);
            let lm: ToyLm = ctx.store.lm(&dir.join("adapter.ckpt"))?;
            let strong = ctx.store.acoustic("strong")?;
            let examples = prepare_examples(&strong, &test.records, &test.features, config.train.features, config.seed, ctx.exec)?;
            (evaluate(&lm, &examples, &config.train, &label, ctx.exec)?, dir.join("report.json"))
        }
        (None, None) => bail!("pass --predictions FILE or --run LABEL"),
    };
    write_json(out.as_deref().unwrap_or(&default_out), &report)?;
    println!("{}", report.table());
    Ok(())
}

#[derive(Serialize)]
struct Side {
    oracle_wer: f64,
    one_best_wer: f64,
    wer: f64,
    werr: f64,
}

impl From<&EvalReport> for Side {
    fn from(r: &EvalReport) -> Self {
        Self { oracle_wer: r.oracle_wer, one_best_wer: r.one_best_wer, wer: r.wer_raw, werr: r.werr }
    }
}

fn compare_strong(ctx: &Ctx, budget: &Budget) -> Result<()> {
    if !ctx.store.hyps("strong", "test").exists() {
        hypgen_cmd(ctx, Source::Strong, None)?;
    }
    let weak = train_run(ctx, Source::Weak, "weak-lists", None, budget)?;
    let strong = train_run(ctx, Source::Strong, "strong-lists", None, budget)?;
    #[derive(Serialize)]
    struct Comparison {
        weak: Side,
        strong: Side,
    }
    let cmp = Comparison { weak: (&weak.report).into(), strong: (&strong.report).into() };
    write_json(&ctx.store.root.join("runs").join("compare-strong.json"), &cmp)?;
    println!("{:<8} {:>8} {:>8} {:>8} {:>8}", "lists", "oracle", "1best", "wer", "werr");
    for (name, s) in [("weak", &cmp.weak), ("strong", &cmp.strong)] {
        println!("{name:<8} {:>8.2} {:>8.2} {:>8.2} {:>8.2}", s.oracle_wer, s.one_best_wer, s.wer, s.werr);
    }
    Ok(())
}

fn report(ctx: &Ctx, curves: bool) -> Result<()> {
    let runs = ctx.store.root.join("runs");
    let mut labels: Vec<String> = match fs::read_dir(&runs) {
        Ok(rd) => rd
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join("report.json").exists())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect(),
        Err(_) => Vec::new(),
    };
    if labels.is_empty() {
        bail!("no runs under {}", runs.display());
    }
    labels.sort();
    for label in labels {
        let dir = runs.join(&label);
        let r: EvalReport = read_json(&dir.join("report.json"))?;
        let loss = read_loss_csv(&dir.join("loss.csv"))?;
        let tail = &loss[loss.len().saturating_sub(10)..];
        let final_loss = tail.iter().map(|p| p.loss).sum::<f64>() / tail.len().max(1) as f64;
        println!("{}  steps {:>5}  final loss {final_loss:.4}", r.table(), loss.len());
        if curves {
            let epochs = loss.iter().map(|p| p.epoch).max().unwrap_or(0);
            for e in 1..=epochs {
                let pts: Vec<f64> = loss.iter().filter(|p| p.epoch == e).map(|p| p.loss).collect();
                println!("    epoch {e:>3}  mean loss {:.4}", pts.iter().sum::<f64>() / pts.len().max(1) as f64);
            }
        }
    }
    Ok(())
}
