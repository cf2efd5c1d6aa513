//! The training loop: replay buffer, sampling cadence, BC warmup with an
//! annealed mixing weight, and AdamW on the logit table.
//!
//! Each step draws `batch_size` dataset records, re-augments them with
//! noise rate `eta`, draws `batch_size` model trajectories from the buffer,
//! and minimizes `β·L_BC + (1−β)·L_SM`. Buffer rounds start at
//! `bc_warmup_steps` and repeat every [`sampling_cadence`] steps; each round
//! samples continuations of random-length data prompts and evicts the same
//! number of oldest trajectories once the buffer is full.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{resolve_dataset, save_checkpoint, DatasetFile, DatasetFormat};
use crate::divergence::{PhiKind, PhiSpec};
use crate::error::{Error, Result};
use crate::evalx::{evaluate, EvalConfig, EvalReport};
use crate::objective::{grad_mle_loss, grad_sm_loss_indexed, IndexedTrajectory, LossBreakdown, ObjectiveConfig};
use crate::policy::{prompt_transitions, sample_many, SampleConfig, TabularPolicy};
use crate::preprocess::augment_trajectory;
use crate::seq_mdp::{SeqSpace, SeqState, Source, Trajectory, DEFAULT_STATE_BUDGET};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    /// SequenceMatch, mixed with BC through the annealed β.
    Sm,
    /// Maximum likelihood on noise-augmented data (backspace labels included).
    Bc,
    /// Maximum likelihood on clean data.
    Mle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: ObjectiveKind,
    /// A file path, or `builtin:toy`.
    pub dataset: String,
    pub dataset_format: DatasetFormat,
    pub context_len: usize,
    /// Defaults to `T/(T+1)`.
    pub gamma: Option<f64>,
    pub alpha: f64,
    pub eta: f64,
    pub divergence: PhiKind,
    pub mixture_c: f64,
    pub mixture_beta: f64,
    pub include_model_term: bool,
    pub length_match_model: bool,
    pub buffer_capacity: usize,
    pub reuse_factor: f64,
    /// Trajectories sampled per buffer round; defaults to `4·batch_size`,
    /// capped at the buffer capacity.
    pub gen_batch: Option<usize>,
    pub bc_warmup_steps: usize,
    pub anneal_start: usize,
    pub anneal_end: usize,
    pub beta_final: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub prompt_len_max_frac: f64,
    pub max_sample_steps: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub eval_samples: usize,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl std::str::FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sm" => Ok(ObjectiveKind::Sm),
            "bc" => Ok(ObjectiveKind::Bc),
            "mle" => Ok(ObjectiveKind::Mle),
            _ => Err(Error::InvalidArgument(format!("unknown objective {s:?} (expected sm, bc or mle)"))),
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: ObjectiveKind::Sm,
            dataset: "builtin:toy".into(),
            dataset_format: DatasetFormat::TextLines,
            context_len: crate::toy::CONTEXT_LEN,
            gamma: None,
            alpha: 0.01,
            eta: 0.001,
            divergence: PhiKind::Chi2Mixture,
            mixture_c: 0.5,
            mixture_beta: 0.5,
            include_model_term: true,
            length_match_model: false,
            buffer_capacity: 1000,
            reuse_factor: 8.0,
            gen_batch: None,
            bc_warmup_steps: 100,
            anneal_start: 100,
            anneal_end: 500,
            beta_final: 0.2,
            steps: 2000,
            batch_size: 32,
            lr: 1e-2,
            warmup: 50,
            weight_decay: 0.0,
            prompt_len_max_frac: 0.5,
            max_sample_steps: 64,
            seed: 0,
            eval_every: 100,
            eval_samples: 256,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn gamma(&self) -> f64 {
        self.gamma.unwrap_or(self.context_len as f64 / (self.context_len as f64 + 1.0))
    }

    pub fn gen_batch(&self) -> usize {
        self.gen_batch.unwrap_or(4 * self.batch_size).min(self.buffer_capacity).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.context_len < 2 {
            return bad(format!("context_len must be at least 2, got {}", self.context_len));
        }
        let g = self.gamma();
        if !(g > 0.0 && g < 1.0) {
            return bad(format!("gamma must lie in (0, 1), got {g}"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return bad(format!("eta must lie in [0, 1], got {}", self.eta));
        }
        if !(0.0..=1.0).contains(&self.beta_final) {
            return bad(format!("beta_final must lie in [0, 1], got {}", self.beta_final));
        }
        if self.anneal_start > self.anneal_end {
            return bad("anneal_start must not exceed anneal_end".into());
        }
        if self.bc_warmup_steps > self.anneal_start {
            return bad("bc_warmup_steps must not exceed anneal_start".into());
        }
        if !(self.reuse_factor >= 1.0) {
            return bad(format!("reuse_factor must be at least 1, got {}", self.reuse_factor));
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 {
            return bad("batch_size and buffer_capacity must be positive".into());
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return bad("lr must be positive and weight_decay non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.prompt_len_max_frac) {
            return bad("prompt_len_max_frac must lie in [0, 1]".into());
        }
        if self.eval_every == 0 || self.eval_samples == 0 || self.max_sample_steps == 0 {
            return bad("eval_every, eval_samples and max_sample_steps must be positive".into());
        }
        self.phi_spec()?;
        Ok(())
    }

    pub fn phi_spec(&self) -> Result<PhiSpec> {
        let mut spec = PhiSpec::new(self.divergence, self.alpha)?;
        spec.mixture_c = self.mixture_c;
        spec.mixture_beta = self.mixture_beta;
        spec.validate()?;
        Ok(spec)
    }

    pub fn objective_config(&self) -> Result<ObjectiveConfig> {
        let mut c = ObjectiveConfig::new(self.phi_spec()?, self.gamma())?;
        c.include_model_term = self.include_model_term;
        c.length_match_model = self.length_match_model;
        Ok(c)
    }

    fn uses_buffer(&self) -> bool {
        self.objective == ObjectiveKind::Sm && self.include_model_term
    }
}

/// BC weight: 1 before `anneal_start`, linear to `beta_final` at
/// `anneal_end`, constant afterwards.
pub fn mixing_beta(step: usize, cfg: &TrainConfig) -> f64 {
    if step < cfg.anneal_start {
        1.0
    } else if step >= cfg.anneal_end {
        cfg.beta_final
    } else {
        let t = (step - cfg.anneal_start) as f64 / (cfg.anneal_end - cfg.anneal_start) as f64;
        1.0 + t * (cfg.beta_final - 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cadence {
    /// Steps between buffer rounds.
    pub every: usize,
    /// Trajectories sampled per round.
    pub round: usize,
}

/// Steps per buffer round such that, at `batch_size` draws per step, each
/// sampled trajectory is drawn `reuse_factor` times in expectation.
pub fn sampling_cadence(cfg: &TrainConfig) -> Cadence {
    let round = cfg.gen_batch();
    let exact = cfg.reuse_factor * round as f64 / cfg.batch_size as f64;
    let every = exact.round() as usize;
    if every < 1 {
        warn!("sampling cadence {exact:.3} is below one step; sampling every step");
    }
    Cadence {
        every: every.max(1),
        round,
    }
}

/// Model trajectories in insertion order.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    entries: VecDeque<(usize, Trajectory)>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            entries: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Adds a round, evicting the oldest entries to stay within capacity.
    pub fn insert_round(&mut self, step: usize, round: Vec<Trajectory>) -> usize {
        let mut evicted = 0;
        for t in round {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
                evicted += 1;
            }
            self.entries.push_back((step, t));
        }
        evicted
    }

    pub fn draw<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Trajectory> {
        if self.entries.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| self.entries[rng.gen_range(0..self.entries.len())].1.clone()).collect()
    }

    pub fn insertion_steps(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|(s, _)| *s)
    }
}

/// A buffer shared between a sampler and the trainer. Inserting a round and
/// drawing a batch each hold the lock for the whole operation.
#[derive(Clone, Debug)]
pub struct SharedBuffer(Arc<Mutex<ReplayBuffer>>);

impl SharedBuffer {
    pub fn new(capacity: usize) -> Self {
        Self(Arc::new(Mutex::new(ReplayBuffer::new(capacity))))
    }

    pub fn insert_round(&self, step: usize, round: Vec<Trajectory>) -> usize {
        self.0.lock().expect("buffer lock").insert_round(step, round)
    }

    pub fn draw<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Trajectory> {
        self.0.lock().expect("buffer lock").draw(n, rng)
    }

    pub fn len(&self) -> usize {
        self.0.lock().expect("buffer lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// AdamW with linear warmup and cosine decay to a tenth of the peak rate.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup: usize,
    pub total_steps: usize,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(n: usize, lr: f64, weight_decay: f64, warmup: usize, total_steps: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay,
            warmup,
            total_steps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn rate(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup).max(1) as f64;
        let progress = ((step - self.warmup) as f64 / span).min(1.0);
        let floor = self.lr / 10.0;
        floor + 0.5 * (self.lr - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    pub fn step(&mut self, step: usize, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let lr = self.rate(step);
        let b1c = 1.0 - self.beta1.powi(self.t);
        let b2c = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / b1c;
            let vhat = self.v[i] / b2c;
            params[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
    }
}

/// One CSV row. Evaluation columns are present only at evaluation steps.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub beta: f64,
    pub loss_total: f64,
    pub loss_bc: Option<f64>,
    pub loss_sm: Option<f64>,
    pub data_phi_term: Option<f64>,
    pub eos_term: Option<f64>,
    pub kl_exact: Option<f64>,
    pub chi2_mixture_exact: Option<f64>,
    pub backspace_rate: Option<f64>,
    pub valid_rate: Option<f64>,
    pub diversity: Option<f64>,
}

pub const CSV_HEADER: &str =
    "step,beta,loss_total,loss_bc,loss_sm,data_phi_term,eos_term,kl_exact,chi2_mixture_exact,backspace_rate,valid_rate,diversity";

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let o = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.beta,
            self.loss_total,
            o(self.loss_bc),
            o(self.loss_sm),
            o(self.data_phi_term),
            o(self.eos_term),
            o(self.kl_exact),
            o(self.chi2_mixture_exact),
            o(self.backspace_rate),
            o(self.valid_rate),
            o(self.diversity)
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub cadence: Cadence,
    pub buffer_rounds: usize,
    pub final_row: MetricsRow,
    pub final_eval: Option<EvalReport>,
    /// Exact χ²-mixture divergence at `anneal_end`, when it was reached.
    pub chi2_mixture_at_anneal_end: Option<f64>,
    pub chi2_mixture_final: Option<f64>,
    pub kl_exact_final: Option<f64>,
    pub elapsed_seconds: f64,
}

pub struct TrainOutcome {
    pub policy: TabularPolicy,
    pub rows: Vec<MetricsRow>,
    pub summary: TrainSummary,
}

/// Resolves `cfg.dataset` to records.
pub fn load_train_dataset(cfg: &TrainConfig) -> Result<DatasetFile> {
    resolve_dataset(&cfg.dataset, cfg.dataset_format, cfg.context_len)
}

fn sample_prompts<R: Rng + ?Sized>(records: &[Trajectory], cfg: &TrainConfig, n: usize, rng: &mut R) -> Vec<SeqState> {
    let t = cfg.context_len;
    let max_len = ((cfg.prompt_len_max_frac * t as f64).floor() as usize).min(t.saturating_sub(2));
    (0..n)
        .map(|_| {
            let rec = &records[rng.gen_range(0..records.len())];
            let fin = rec.final_state().cloned().unwrap_or_else(SeqState::root);
            let body = fin.payload().len().saturating_sub(1);
            let len = rng.gen_range(0..=max_len).min(body);
            SeqState::from_payload(&fin.payload()[..len]).expect("data prefix")
        })
        .collect()
}

fn sample_round(policy: &TabularPolicy, records: &[Trajectory], cfg: &TrainConfig, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Trajectory>> {
    let prompts = sample_prompts(records, cfg, n, rng);
    let sample = SampleConfig {
        max_steps: cfg.max_sample_steps,
        ..Default::default()
    };
    let conts = sample_many(policy, &prompts, &sample, rng.gen())?;
    Ok(prompts
        .iter()
        .zip(conts)
        .map(|(p, c)| {
            let mut t = prompt_transitions(p, Source::Model);
            t.transitions.extend(c.transitions);
            t
        })
        .collect())
}

fn dump_batch(space: &SeqSpace, data: &[Trajectory], model: &[Trajectory], loss: &LossBreakdown) -> String {
    let mut s = format!("{loss:?}\n");
    let render = |t: &Trajectory| {
        t.transitions
            .iter()
            .map(|x| format!("{}->{}", space.vocab().render(&x.state), space.vocab().action_str(x.action)))
            .collect::<Vec<_>>()
            .join(" ")
    };
    for t in data {
        let _ = writeln!(s, "data: {}", render(t));
    }
    for t in model {
        let _ = writeln!(s, "model: {}", render(t));
    }
    s
}

/// Runs the loop, calling `on_row` with the updated policy after every step.
pub fn train(
    dataset: &DatasetFile,
    cfg: &TrainConfig,
    mut on_row: impl FnMut(&MetricsRow, &TabularPolicy) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let start = Instant::now();
    let space = Arc::new(SeqSpace::new(dataset.vocab.clone(), cfg.context_len, DEFAULT_STATE_BUDGET)?);
    let vocab = space.vocab().clone();
    let records: Vec<Trajectory> = dataset.trajectories(cfg.context_len)?;
    let weighted = dataset.weighted();
    let obj = cfg.objective_config()?;
    let mut policy = TabularPolicy::zeros(space.clone());
    let mut opt = AdamW::new(policy.params().len(), cfg.lr, cfg.weight_decay, cfg.warmup, cfg.steps);
    let buffer = SharedBuffer::new(cfg.buffer_capacity);
    let cadence = sampling_cadence(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::with_capacity(cfg.steps);
    let mut rounds = 0;
    let mut last_backspace_rate = None;
    let mut at_anneal_end = None;
    let mut final_eval = None;
    info!(
        "training {:?} on {} records, {} states, cadence {:?}",
        cfg.objective,
        records.len(),
        space.num_states(),
        cadence
    );

    for step in 0..cfg.steps {
        let beta = match cfg.objective {
            ObjectiveKind::Sm => mixing_beta(step, cfg),
            _ => 1.0,
        };
        if cfg.uses_buffer() && step >= cfg.bc_warmup_steps && (step - cfg.bc_warmup_steps) % cadence.every == 0 {
            let round = sample_round(&policy, &records, cfg, cadence.round, &mut rng)?;
            let (bs, total) = round.iter().fold((0, 0), |(b, n), t| {
                (b + t.transitions.iter().filter(|x| x.action.is_backspace()).count(), n + t.len())
            });
            last_backspace_rate = Some(if total == 0 { 0.0 } else { bs as f64 / total as f64 });
            buffer.insert_round(step, round);
            rounds += 1;
        }

        let picks: Vec<&Trajectory> = (0..cfg.batch_size).map(|_| &records[rng.gen_range(0..records.len())]).collect();
        let eta = if cfg.objective == ObjectiveKind::Mle { 0.0 } else { cfg.eta };
        let data: Vec<Trajectory> = picks.iter().map(|t| augment_trajectory(&vocab, t, eta, &mut rng, cfg.context_len)).collect();
        let data_idx = data.iter().map(|t| IndexedTrajectory::new(&space, t)).collect::<Result<Vec<_>>>()?;

        let mut grad = vec![0.0; policy.params().len()];
        let mut row = MetricsRow {
            step,
            beta,
            ..Default::default()
        };
        let mut total = 0.0;
        let mut model = Vec::new();
        let mut breakdown = LossBreakdown::default();
        if beta > 0.0 {
            let (l, g) = grad_mle_loss(&policy, &data_idx)?;
            row.loss_bc = Some(l);
            total += beta * l;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += beta * b);
        }
        if beta < 1.0 {
            model = buffer.draw(cfg.batch_size, &mut rng);
            let model_idx = model.iter().map(|t| IndexedTrajectory::new(&space, t)).collect::<Result<Vec<_>>>()?;
            let (l, g) = grad_sm_loss_indexed(&policy, &data_idx, &model_idx, &obj).map_err(|e| match e {
                Error::NonFinite { .. } => Error::NonFinite {
                    step,
                    dump: dump_batch(&space, &data, &model, &breakdown),
                },
                other => other,
            })?;
            breakdown = l;
            row.loss_sm = Some(l.total);
            row.data_phi_term = Some(l.data_phi_term);
            row.eos_term = Some(l.eos_term);
            total += (1.0 - beta) * l.total;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += (1.0 - beta) * b);
        }
        row.loss_total = total;
        if !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                step,
                dump: dump_batch(&space, &data, &model, &breakdown),
            });
        }
        opt.step(step, policy.params_mut(), &grad);

        let is_last = step + 1 == cfg.steps;
        if step % cfg.eval_every == 0 || step == cfg.anneal_end || is_last {
            let ecfg = EvalConfig {
                samples: cfg.eval_samples,
                gamma: cfg.gamma(),
                max_steps: cfg.max_sample_steps,
                seed: cfg.seed ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
                ..Default::default()
            };
            let report = evaluate(&policy, &weighted, &ecfg)?;
            row.kl_exact = report.kl_exact;
            row.chi2_mixture_exact = report.chi2_mixture_exact;
            row.valid_rate = Some(report.valid_rate);
            row.diversity = Some(report.diversity);
            row.backspace_rate = Some(last_backspace_rate.unwrap_or(report.backspace_rate));
            if step == cfg.anneal_end {
                at_anneal_end = report.chi2_mixture_exact;
            }
            if is_last {
                final_eval = Some(report);
            }
        }
        on_row(&row, &policy)?;
        rows.push(row);
    }

    let final_row = rows.last().cloned().unwrap_or_default();
    let summary = TrainSummary {
        steps: cfg.steps,
        cadence,
        buffer_rounds: rounds,
        chi2_mixture_at_anneal_end: at_anneal_end,
        chi2_mixture_final: final_row.chi2_mixture_exact,
        kl_exact_final: final_row.kl_exact,
        final_row,
        final_eval,
        elapsed_seconds: start.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome { policy, rows, summary })
}

/// Paths written by [`run_training`].
#[derive(Clone, Debug)]
pub struct RunFiles {
    pub metrics: PathBuf,
    pub summary: PathBuf,
    pub checkpoint: PathBuf,
}

/// Trains and writes `metrics.csv`, `summary.json`, `final.sqmc` and, when
/// `checkpoint_every > 0`, `step-<n>.sqmc` files into `out_dir`.
pub fn run_training(cfg: &TrainConfig, out_dir: &Path) -> Result<(TrainOutcome, RunFiles)> {
    cfg.validate()?;
    let dataset = load_train_dataset(cfg)?;
    fs::create_dir_all(out_dir)?;
    let files = RunFiles {
        metrics: out_dir.join("metrics.csv"),
        summary: out_dir.join("summary.json"),
        checkpoint: out_dir.join("final.sqmc"),
    };
    let mut csv = std::io::BufWriter::new(fs::File::create(&files.metrics)?);
    writeln!(csv, "{CSV_HEADER}")?;
    let cfg_json = serde_json::to_value(cfg)?;
    let every = cfg.checkpoint_every;
    let outcome = train(&dataset, cfg, |row, policy| {
        writeln!(csv, "{}", row.to_csv())?;
        let done = row.step + 1;
        if every > 0 && done % every == 0 && done < cfg.steps {
            save_checkpoint(policy, &cfg_json, &out_dir.join(format!("step-{done}.sqmc")))?;
        }
        Ok(())
    });
    csv.flush()?;
    let outcome = outcome?;
    save_checkpoint(&outcome.policy, &cfg_json, &files.checkpoint)?;
    fs::write(&files.summary, serde_json::to_string_pretty(&outcome.summary)?)?;
    Ok((outcome, files))
}
