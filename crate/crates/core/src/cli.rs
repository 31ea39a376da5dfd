//! Command-line front end. Each subcommand reads a dataset directory and a
//! run directory laid out as
//!
//! ```text
//! <run>/config.json      resolved configuration
//! <run>/checkpoints/     pretrain.json, latest.json (per epoch), stage2.json
//! <run>/metrics.csv      stage-2 step log
//! <run>/reports/         JSON + CSV reports
//! ```

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::autodiff::OpKind;
use crate::checkpoint::Checkpoint;
use crate::config::{Overrides, RunConfig};
use crate::data::Dataset;
use crate::error::{MistError, Result};
use crate::eval::{self, ProbeSource, SweepRow};
use crate::io;
use crate::selftest;
use crate::train::{self, SynthesisModel};

pub const PRETRAIN_CHECKPOINT: &str = "checkpoints/pretrain.json";
pub const LATEST_CHECKPOINT: &str = "checkpoints/latest.json";
pub const STAGE2_CHECKPOINT: &str = "checkpoints/stage2.json";
pub const SWEEP_SUMMARY: &str = "sweep_summary.csv";

#[derive(Parser, Debug)]
#[command(name = "mist", version, about = "Style/content disentanglement by MI minimization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Stage 1: fit and freeze the content encoder.
    Pretrain(RunArgs),
    /// Stage 2: adversarial training against the MI estimate.
    Train(RunArgs),
    /// Content-leakage evaluation on the eval pairs.
    Eval(RunArgs),
    /// Train a fresh statistics network against the frozen model.
    MiProbe {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value_t = SourceArg::Model)]
        source: SourceArg,
    },
    /// One stage-2 run per λ, sharing the pretraining checkpoint.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        lambda_list: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Fast invariant suite.
    Selftest {
        /// Corrupts the gradient rule of one op (fixture for the suite itself).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, env = "MIST_RUN_ROOT")]
    pub run: PathBuf,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub tokens: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SourceArg {
    Model,
    Noise,
    Copy,
}

impl From<SourceArg> for ProbeSource {
    fn from(s: SourceArg) -> Self {
        match s {
            SourceArg::Model => ProbeSource::Model,
            SourceArg::Noise => ProbeSource::IndependentNoise,
            SourceArg::Copy => ProbeSource::Copy,
        }
    }
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            lambda: self.lambda,
            tokens: self.tokens,
            seed: self.seed,
        }
    }
}

/// Parses `args`, runs the command and maps the outcome to an exit code:
/// 0 success, 1 usage error, 2 runtime failure.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                MistError::Config(_) => 1,
                _ => 2,
            })
        }
    }
}

pub fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::GenData { config, out, seed } => gen_data(config.as_deref(), &out, seed),
        Command::Pretrain(a) => pretrain(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::MiProbe { run, source } => mi_probe(&run, source.into()),
        Command::Sweep {
            run,
            lambda_list,
            jobs,
        } => sweep(&run, &lambda_list, jobs),
        Command::Selftest { inject_fault } => selftest_cmd(inject_fault.as_deref()),
    }
}

fn gen_data(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<ExitCode> {
    let cfg = RunConfig::resolve(
        config,
        &Overrides {
            seed,
            ..Overrides::default()
        },
    )?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        if !parent.is_dir() {
            return Err(MistError::io(
                parent,
                std::io::Error::new(std::io::ErrorKind::NotFound, "output parent directory does not exist"),
            ));
        }
    }
    io::create_dir_all(out)?;
    let ds = Dataset::generate(&cfg.dataset)?;
    ds.save(out)?;
    println!(
        "wrote {} (separability {}, min distance {:.4}, threshold {:.4})",
        out.display(),
        if ds.separability.passed { "passed" } else { "failed" },
        ds.separability.min_distance,
        ds.separability.threshold
    );
    Ok(ExitCode::SUCCESS)
}

/// Resolved configuration and dataset of a run; writes `config.json`.
struct RunContext {
    cfg: RunConfig,
    data: Dataset,
    dir: PathBuf,
}

impl RunContext {
    fn open(a: &RunArgs) -> Result<Self> {
        let mut cfg = RunConfig::resolve(a.config.as_deref(), &a.overrides())?;
        let data = Dataset::load(&a.data)?;
        cfg.dataset = data.config.clone();
        cfg.validate()?;
        Self::create(cfg, data, a.run.clone())
    }

    fn create(cfg: RunConfig, data: Dataset, dir: PathBuf) -> Result<Self> {
        io::create_dir_all(&dir.join("checkpoints"))?;
        io::create_dir_all(&dir.join("reports"))?;
        io::write_atomic(&dir.join("config.json"), &io::to_json_pretty(&cfg)?)?;
        Ok(RunContext { cfg, data, dir })
    }

    fn echo(&self) -> serde_json::Value {
        self.cfg.to_value()
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn require(&self, rel: &str, what: &str) -> Result<Checkpoint> {
        let p = self.path(rel);
        if !p.is_file() {
            return Err(MistError::Checkpoint(format!("{what} required: expected {}", p.display())));
        }
        Checkpoint::load(&p)
    }

    fn report<T: serde::Serialize>(&self, stem: &str, report: &T, csv: &str) -> Result<PathBuf> {
        let (json, _) = eval::write_report(
            &self.path("reports"),
            stem,
            &self.echo(),
            self.cfg.train.train_seed,
            report,
            csv,
        )?;
        Ok(json)
    }
}

#[derive(serde::Serialize)]
struct PretrainReport<'a> {
    epoch_losses: &'a [f64],
    heldout_l1: f64,
    threshold: f64,
    converged: bool,
}

fn pretrain(a: &RunArgs) -> Result<ExitCode> {
    let ctx = RunContext::open(a)?;
    let out = train::pretrain(
        &ctx.data.splits.pretrain,
        &ctx.data.splits.pretrain_heldout,
        &ctx.cfg.model,
        &ctx.cfg.train,
        ctx.echo(),
    )?;
    out.checkpoint.save(&ctx.path(PRETRAIN_CHECKPOINT))?;
    let rep = PretrainReport {
        epoch_losses: &out.epoch_losses,
        heldout_l1: out.heldout_l1,
        threshold: ctx.cfg.train.pretrain_threshold,
        converged: out.converged,
    };
    let csv: String = std::iter::once("epoch,l1\n".to_string())
        .chain(out.epoch_losses.iter().enumerate().map(|(i, l)| format!("{},{l}\n", i + 1)))
        .collect();
    ctx.report("pretrain", &rep, &csv)?;
    println!("heldout_l1={}", out.heldout_l1);
    if !out.converged {
        eprintln!(
            "warning: held-out L1 {} is above the threshold {}",
            out.heldout_l1, ctx.cfg.train.pretrain_threshold
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn train_in(ctx: &RunContext) -> Result<SynthesisModel> {
    let pre = ctx.require(PRETRAIN_CHECKPOINT, "pretrained content encoder")?;
    let content = train::content_from_checkpoint(&pre, &ctx.cfg.model)?;
    let metrics_path = ctx.path("metrics.csv");
    let latest = ctx.path(LATEST_CHECKPOINT);
    let out = train::train_mist(
        &ctx.data.splits.train,
        &content,
        &ctx.cfg.model,
        &ctx.cfg.train,
        ctx.echo(),
        |t| {
            t.checkpoint(ctx.echo()).save(&latest)?;
            io::write_atomic(&metrics_path, &train::metrics_csv(&t.metrics))
        },
    )?;
    io::write_atomic(&metrics_path, &train::metrics_csv(&out.metrics))?;
    out.checkpoint.save(&ctx.path(STAGE2_CHECKPOINT))?;
    Ok(out.model)
}

fn train_cmd(a: &RunArgs) -> Result<ExitCode> {
    let ctx = RunContext::open(a)?;
    train_in(&ctx)?;
    println!("wrote {}", ctx.path(STAGE2_CHECKPOINT).display());
    Ok(ExitCode::SUCCESS)
}

fn evaluate_in(ctx: &RunContext, model: &SynthesisModel) -> Result<eval::LeakageReport> {
    let rep = eval::evaluate_leakage(model, &ctx.data.world, &ctx.data.splits.eval_pairs, ctx.echo())?;
    ctx.report("leakage", &rep, &rep.csv())?;
    Ok(rep)
}

fn load_model(ctx: &RunContext) -> Result<SynthesisModel> {
    let ck = ctx.require(STAGE2_CHECKPOINT, "trained model checkpoint")?;
    SynthesisModel::from_checkpoint(&ck, &ctx.cfg.model)
}

fn eval_cmd(a: &RunArgs) -> Result<ExitCode> {
    let ctx = RunContext::open(a)?;
    let model = load_model(&ctx)?;
    let rep = evaluate_in(&ctx, &model)?;
    println!("mean_ter={}", rep.mean_ter);
    println!("style_match_rate={}", rep.style_match_rate);
    Ok(ExitCode::SUCCESS)
}

fn mi_probe(a: &RunArgs, source: ProbeSource) -> Result<ExitCode> {
    let ctx = RunContext::open(a)?;
    let model = load_model(&ctx)?;
    let curve = eval::mi_probe(
        &model.content,
        Some(&model.style),
        &ctx.data.splits.train,
        &ctx.cfg.probe,
        source,
    )?;
    let stem = match source {
        ProbeSource::Model => "mi_probe",
        ProbeSource::IndependentNoise => "mi_probe_noise",
        ProbeSource::Copy => "mi_probe_copy",
    };
    ctx.report(stem, &curve, &curve.csv())?;
    if let Some(last) = curve.epochs.last() {
        println!("final_mi={last}");
    }
    Ok(ExitCode::SUCCESS)
}

fn lambda_dir(lambda: f64) -> String {
    format!("lambda_{lambda}")
}

fn sweep(a: &RunArgs, lambdas: &[f64], jobs: usize) -> Result<ExitCode> {
    if let Some(l) = lambdas.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
        return Err(MistError::Config(format!("sweep λ must be positive, got {l}")));
    }
    let root = RunContext::open(a)?;
    if !root.path(PRETRAIN_CHECKPOINT).is_file() {
        let out = train::pretrain(
            &root.data.splits.pretrain,
            &root.data.splits.pretrain_heldout,
            &root.cfg.model,
            &root.cfg.train,
            root.echo(),
        )?;
        out.checkpoint.save(&root.path(PRETRAIN_CHECKPOINT))?;
    }
    let pretrain_text = io::read_to_string(&root.path(PRETRAIN_CHECKPOINT))?;

    let next = AtomicUsize::new(0);
    let rows: Mutex<Vec<Result<SweepRow>>> = Mutex::new(Vec::new());
    let arm = |lambda: f64| -> Result<SweepRow> {
        let mut cfg = root.cfg.clone();
        cfg.train.lambda = lambda;
        let ctx = RunContext::create(cfg, root.data.clone(), root.dir.join(lambda_dir(lambda)))?;
        io::write_atomic(&ctx.path(PRETRAIN_CHECKPOINT), &pretrain_text)?;
        let model = train_in(&ctx)?;
        let rep = evaluate_in(&ctx, &model)?;
        Ok(SweepRow {
            lambda,
            mean_ter: rep.mean_ter,
            style_match_rate: rep.style_match_rate,
        })
    };
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, lambdas.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&lambda) = lambdas.get(i) else { break };
                let r = arm(lambda);
                rows.lock().expect("no poisoned workers").push(r);
            });
        }
    });
    let rows: Vec<SweepRow> = rows
        .into_inner()
        .expect("no poisoned workers")
        .into_iter()
        .collect::<Result<_>>()?;
    let csv = eval::sweep_csv(&rows);
    io::write_atomic(&root.path(SWEEP_SUMMARY), &csv)?;
    print!("{csv}");
    Ok(ExitCode::SUCCESS)
}

fn selftest_cmd(fault: Option<&str>) -> Result<ExitCode> {
    let fault = fault
        .map(|s| s.parse::<OpKind>())
        .transpose()
        .map_err(|e| MistError::Config(e.to_string()))?;
    let checks = selftest::run(fault);
    let mut failed = Vec::new();
    for c in &checks {
        println!("{c}");
        if !c.passed {
            failed.push(c.name.clone());
        }
    }
    if failed.is_empty() {
        println!("selftest: all {} checks passed", checks.len());
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("selftest: {} failed: {}", failed.len(), failed.join(", "));
        Ok(ExitCode::from(2))
    }
}
