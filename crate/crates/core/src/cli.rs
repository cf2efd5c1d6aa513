//! The `seqmatch` command line.
//!
//! Exit codes: 0 success, 1 internal error, 2 usage or input error,
//! 3 numerical failure (non-finite loss, failed gradient or closed-form
//! check).

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::dataio::{load_checkpoint, resolve_dataset, DatasetFormat};
use crate::divergence::PhiKind;
use crate::error::{Error, Result};
use crate::evalx::{chain_experiment, evaluate, EvalConfig};
use crate::objective::gradcheck_random;
use crate::policy::{sample_many, stream_rng, SampleConfig};
use crate::preprocess::{augment_trajectory, encode_trajectory, write_batches};
use crate::seq_mdp::SeqState;
use crate::trainer::{run_training, ObjectiveKind, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "seqmatch", version, about = "Occupancy-matching training for sequence models with backspace")]
pub struct Cli {
    /// Worker threads for sampling; results do not depend on this.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Augment a dataset with noise and write encoded batches.
    Preprocess(PreprocessArgs),
    /// Train a tabular policy from a TOML config.
    Train(TrainArgs),
    /// Sample sequences from a checkpoint.
    Sample(SampleArgs),
    /// Evaluate a checkpoint against a dataset.
    Eval(EvalArgs),
    /// Chain experiment: enumerated against closed-form divergences.
    ToyChain(ChainArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset path, or `builtin:toy`.
    #[arg(long)]
    pub input: String,
    #[arg(long, default_value = "text")]
    pub format: DatasetFormat,
    #[arg(long, default_value_t = crate::toy::CONTEXT_LEN)]
    pub context_len: usize,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 0.0)]
    pub eta: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output file for the batches (JSON lines).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print the masks of the first N records.
    #[arg(long, default_value_t = 0)]
    pub inspect: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub objective: Option<ObjectiveKind>,
    #[arg(long)]
    pub divergence: Option<PhiKind>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SamplingArgs {
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 1.0)]
    pub top_p: f64,
    #[arg(long, default_value_t = 10)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Probability of replacing a sampled action by a random symbol.
    #[arg(long, default_value_t = 0.0)]
    pub inject_prob: f64,
    #[arg(long, default_value_t = 256)]
    pub max_steps: usize,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    /// Print every edit, including backspaces. Injected symbols are marked
    /// with `*`; inserts at a full context show as the forced `<eos>`.
    #[arg(long)]
    pub trace: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset path, or `builtin:toy`.
    #[arg(long)]
    pub input: String,
    #[arg(long, default_value = "text")]
    pub format: DatasetFormat,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    #[arg(long, default_value_t = 0.5)]
    pub prompt_frac: f64,
    /// Discount for the exact occupancy divergences; defaults to T/(T+1).
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ChainArgs {
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    #[arg(long, default_value_t = 0.1)]
    pub eps: f64,
    #[arg(long, default_value_t = 0.9)]
    pub gamma: f64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "chi2")]
    pub divergence: PhiKind,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Failure of a command: an error, or a check that ran and did not pass.
enum Failure {
    Error(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Error(Error::Io(e))
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn cmd_preprocess(a: &PreprocessArgs, out: &mut dyn Write) -> CmdResult {
    if !(0.0..=1.0).contains(&a.eta) {
        return Err(Error::InvalidArgument(format!("eta must lie in [0, 1], got {}", a.eta)).into());
    }
    let t = a.data.context_len;
    let ds = resolve_dataset(&a.data.input, a.data.format, t)?;
    let trajs = ds.trajectories(t)?;
    let batches = trajs
        .iter()
        .enumerate()
        .map(|(i, tr)| {
            let mut rng = stream_rng(a.seed, i as u64);
            let aug = augment_trajectory(&ds.vocab, tr, a.eta, &mut rng, t);
            encode_trajectory(&ds.vocab, &aug, t)
        })
        .collect::<Result<Vec<_>>>()?;
    for (i, b) in batches.iter().take(a.inspect).enumerate() {
        writeln!(out, "record {i}")?;
        write!(out, "{}", b.render(&ds.vocab))?;
    }
    if let Some(path) = &a.out {
        let f = std::io::BufWriter::new(fs::File::create(path)?);
        write_batches(f, &ds.vocab, t, &batches)?;
    }
    let copies: usize = batches.iter().map(|b| b.actions.iter().filter(|&&x| x == ds.vocab.backspace_id()).count()).sum();
    writeln!(out, "records {}  rows {}  backspaces {}", batches.len(), batches.iter().map(|b| b.len()).sum::<usize>(), copies)?;
    Ok(())
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> CmdResult {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_toml(&fs::read_to_string(p)?)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.objective {
        cfg.objective = v;
    }
    if let Some(v) = a.divergence {
        cfg.divergence = v;
    }
    if let Some(v) = a.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = a.eta {
        cfg.eta = v;
    }
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    let (outcome, files) = run_training(&cfg, &a.out_dir)?;
    let s = &outcome.summary;
    let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.6}"));
    writeln!(out, "steps              {}", s.steps)?;
    writeln!(out, "buffer_rounds      {}", s.buffer_rounds)?;
    writeln!(out, "final_loss         {:.6}", s.final_row.loss_total)?;
    writeln!(out, "kl_exact           {}", opt(s.kl_exact_final))?;
    writeln!(out, "chi2_mixture_exact {}", opt(s.chi2_mixture_final))?;
    writeln!(out, "metrics            {}", files.metrics.display())?;
    writeln!(out, "checkpoint         {}", files.checkpoint.display())?;
    Ok(())
}

fn sample_config(s: &SamplingArgs) -> SampleConfig {
    SampleConfig {
        temperature: s.temperature,
        top_p: s.top_p,
        max_steps: s.max_steps,
        seed: s.seed,
        inject_prob: s.inject_prob,
    }
}

fn cmd_sample(a: &SampleArgs, out: &mut dyn Write) -> CmdResult {
    let policy = load_checkpoint(&a.checkpoint)?;
    let cfg = sample_config(&a.sampling);
    let prompts = vec![SeqState::root(); a.sampling.samples];
    let trajs = sample_many(&policy, &prompts, &cfg, a.sampling.seed)?;
    let vocab = policy.space().vocab();
    for t in &trajs {
        let fin = t.final_state().cloned().unwrap_or_else(SeqState::root);
        if a.trace {
            writeln!(out, "{}\t{}", vocab.render(&fin), vocab.render_edits(t))?;
        } else {
            writeln!(out, "{}", vocab.render(&fin))?;
        }
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> CmdResult {
    let policy = load_checkpoint(&a.checkpoint)?;
    let t = policy.space().context_len();
    let ds = resolve_dataset(&a.input, a.format, t)?;
    if ds.vocab != *policy.space().vocab() {
        return Err(Error::Mismatch("dataset vocabulary differs from the checkpoint".into()).into());
    }
    let s = &a.sampling;
    let cfg = EvalConfig {
        samples: s.samples,
        temperature: s.temperature,
        top_p: s.top_p,
        prompt_frac: a.prompt_frac,
        inject_prob: s.inject_prob,
        gamma: a.gamma.unwrap_or(t as f64 / (t as f64 + 1.0)),
        max_steps: s.max_steps,
        seed: s.seed,
    };
    let report = evaluate(&policy, &ds.weighted(), &cfg)?;
    if a.json {
        writeln!(out, "{}", serde_json::to_string_pretty(&report).map_err(Error::from)?)?;
    } else {
        write!(out, "{}", report.to_table())?;
    }
    Ok(())
}

fn cmd_toy_chain(a: &ChainArgs, out: &mut dyn Write) -> CmdResult {
    let r = chain_experiment(a.n, a.eps, a.gamma)?;
    writeln!(out, "chain n={} eps={} gamma={}", r.n, r.eps, r.gamma)?;
    writeln!(out, "{:<28}{:>18}{:>18}", "quantity", "enumerated", "closed form")?;
    // adding 0.0 turns -0.0 into 0.0
    let mut line = |name: &str, x: f64, y: f64| writeln!(out, "{name:<28}{:>18.10}{:>18.10}", x + 0.0, y + 0.0);
    line("completion probability", r.completion_prob, r.closed_completion_prob)?;
    for (scope, e, c) in [("sequence", r.joint, r.closed_joint), ("occupancy", r.occupancy, r.closed_occupancy)] {
        line(&format!("{scope} kl"), e.kl, c.kl)?;
        line(&format!("{scope} reverse kl"), e.reverse_kl, c.reverse_kl)?;
        line(&format!("{scope} chi2"), e.chi2, c.chi2)?;
        line(&format!("{scope} chi2-mixture"), e.chi2_mixture, c.chi2_mixture)?;
    }
    let gap = r.max_disagreement();
    writeln!(out, "max disagreement {gap:.3e}")?;
    if !(gap <= 1e-9) {
        return Err(Failure::Check(format!("enumeration disagrees with closed forms by {gap:e}")));
    }
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> CmdResult {
    if a.trials == 0 {
        return Err(Error::InvalidArgument("trials must be positive".into()).into());
    }
    let mut worst = 0.0f64;
    for i in 0..a.trials {
        let r = gradcheck_random(a.divergence, a.seed.wrapping_add(i as u64))?;
        worst = worst.max(r.rel_error);
    }
    writeln!(out, "divergence {}  trials {}  max relative error {worst:.3e}  tol {:e}", a.divergence, a.trials, a.tol)?;
    if !(worst <= a.tol) {
        return Err(Failure::Check(format!("max relative error {worst:e} exceeds {:e}", a.tol)));
    }
    Ok(())
}

/// Parses `args` and runs the command, writing results to `out` and
/// diagnostics to `err`. Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = if code == 0 { write!(out, "{e}") } else { write!(err, "{e}") };
            return code;
        }
    };
    if cli.threads == 0 {
        let _ = writeln!(err, "error: --threads must be positive");
        return 2;
    }
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(p) => p,
        Err(e) => {
            let _ = writeln!(err, "error: thread pool: {e}");
            return 1;
        }
    };
    let mut buf = Vec::new();
    let result = pool.install(|| match &cli.command {
        Command::Preprocess(a) => cmd_preprocess(a, &mut buf),
        Command::Train(a) => cmd_train(a, &mut buf),
        Command::Sample(a) => cmd_sample(a, &mut buf),
        Command::Eval(a) => cmd_eval(a, &mut buf),
        Command::ToyChain(a) => cmd_toy_chain(a, &mut buf),
        Command::Gradcheck(a) => cmd_gradcheck(a, &mut buf),
    });
    if let Err(e) = out.write_all(&buf).and_then(|_| out.flush()) {
        let _ = writeln!(err, "error: {e}");
        return 1;
    }
    match result {
        Ok(()) => 0,
        Err(Failure::Check(msg)) => {
            let _ = writeln!(err, "check failed: {msg}");
            3
        }
        Err(Failure::Error(e)) => {
            let _ = writeln!(err, "error: {e}");
            if let Error::NonFinite { dump, .. } = &e {
                let _ = writeln!(err, "{dump}");
            }
            e.exit_code()
        }
    }
}
