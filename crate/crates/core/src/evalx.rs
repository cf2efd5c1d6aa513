//! Generation metrics and the ε-error chain experiment.
//!
//! `rep_n` is `100·(1 − unique/total)` over the n-grams of a continuation
//! with `<eos>` removed, and `diversity` multiplies `1 − rep_n/100` over
//! n = 2, 3, 4. Over a set of continuations, `rep_n` is the mean over the
//! continuations that are long enough to hold one n-gram.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{index_all, weighted_nll};
use crate::occupancy::{
    data_policy, distribution_divergence, exact_occupancy, occupancy_divergence, DivergenceKind, ExactOccupancy, FiniteMdp, FinitePolicy,
};
use crate::policy::{sample_many, to_finite_policy, SampleConfig, TabularPolicy};
use crate::preprocess::truncate_to_context;
use crate::seq_mdp::{SeqSpace, SeqState, Source, Token, Vocab, DEFAULT_STATE_BUDGET};

/// Percentage of repeated n-grams, plus whether the sequence was too short
/// to contain any (in which case the value is 0).
pub fn rep_n(continuation: &[Token], n: usize) -> (f64, bool) {
    assert!(n >= 1, "gram size must be positive");
    let toks: Vec<Token> = continuation.iter().copied().filter(|t| matches!(t, Token::Sym(_))).collect();
    if toks.len() < n {
        return (0.0, true);
    }
    let grams: Vec<&[Token]> = toks.windows(n).collect();
    let unique: HashSet<&[Token]> = grams.iter().copied().collect();
    (100.0 * (1.0 - unique.len() as f64 / grams.len() as f64), false)
}

pub fn diversity(continuation: &[Token]) -> f64 {
    (2..=4).map(|n| 1.0 - rep_n(continuation, n).0 / 100.0).product()
}

/// Mean `rep_n` for n = 2..4 over the continuations long enough for each n.
pub fn rep_n_set(continuations: &[Vec<Token>]) -> BTreeMap<usize, f64> {
    (2..=4)
        .map(|n| {
            let vals: Vec<f64> = continuations
                .iter()
                .map(|c| rep_n(c, n))
                .filter(|(_, short)| !short)
                .map(|(v, _)| v)
                .collect();
            let mean = if vals.is_empty() { 0.0 } else { vals.iter().sum::<f64>() / vals.len() as f64 };
            (n, mean)
        })
        .collect()
}

pub fn diversity_from_rep(rep: &BTreeMap<usize, f64>) -> f64 {
    (2..=4).map(|n| 1.0 - rep.get(&n).copied().unwrap_or(0.0) / 100.0).product()
}

/// Terminal states reached by a weighted dataset.
pub fn data_support(dataset: &[(Vec<Token>, f64)], context_len: usize) -> Result<BTreeSet<SeqState>> {
    let mut out = BTreeSet::new();
    for (seq, w) in dataset {
        if *w > 0.0 {
            let tr = truncate_to_context(seq, context_len)?;
            out.insert(tr.final_state().cloned().unwrap_or_else(SeqState::root));
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub samples: usize,
    pub completed: usize,
    pub valid: usize,
    pub backspaces: usize,
    pub actions: usize,
    pub total_length: usize,
}

impl RateReport {
    /// Valid fraction of completed samples (0 when none completed).
    pub fn valid_rate(&self) -> f64 {
        ratio(self.valid, self.completed)
    }

    pub fn completed_rate(&self) -> f64 {
        ratio(self.completed, self.samples)
    }

    pub fn backspace_rate(&self) -> f64 {
        ratio(self.backspaces, self.actions)
    }

    /// Mean payload length of completed samples, `<eos>` included.
    pub fn mean_length(&self) -> f64 {
        if self.completed == 0 {
            0.0
        } else {
            self.total_length as f64 / self.completed as f64
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Samples from `[bos]` and counts completed, in-support and backspace
/// outcomes. Injected symbols count as actions but never as backspaces.
pub fn sample_rates(policy: &TabularPolicy, support: &BTreeSet<SeqState>, samples: usize, cfg: &SampleConfig, seed: u64) -> Result<RateReport> {
    let root = vec![SeqState::root(); samples];
    let trajs = sample_many(policy, &root, cfg, seed)?;
    let mut r = RateReport {
        samples,
        ..Default::default()
    };
    for t in &trajs {
        r.actions += t.len();
        r.backspaces += t
            .transitions
            .iter()
            .filter(|x| x.action.is_backspace() && x.kind != crate::seq_mdp::TransitionKind::Noise)
            .count();
        if let Some(last) = t.final_state().filter(|s| s.is_terminal()) {
            r.completed += 1;
            r.total_length += last.payload().len();
            if support.contains(last) {
                r.valid += 1;
            }
        }
    }
    Ok(r)
}

pub fn valid_rate(policy: &TabularPolicy, support: &BTreeSet<SeqState>, samples: usize, seed: u64) -> Result<f64> {
    let cfg = SampleConfig {
        max_steps: 1024,
        ..Default::default()
    };
    Ok(sample_rates(policy, support, samples, &cfg, seed)?.valid_rate())
}

/// Exact occupancy of the data distribution and of a policy on its space.
pub fn exact_pair(policy: &TabularPolicy, dataset: &[(Vec<Token>, f64)], gamma: f64) -> Result<(ExactOccupancy, ExactOccupancy)> {
    let space = policy.space();
    let mdp = FiniteMdp::from_space(space);
    let truncated = truncate_dataset(dataset, space.context_len())?;
    let rho_d = exact_occupancy(&mdp, &data_policy(space, &truncated)?, gamma)?;
    let rho_m = exact_occupancy(&mdp, &to_finite_policy(policy, 1.0, 1.0), gamma)?;
    Ok((rho_d, rho_m))
}

/// Payloads after the forced-eos cut.
pub fn truncate_dataset(dataset: &[(Vec<Token>, f64)], context_len: usize) -> Result<Vec<(Vec<Token>, f64)>> {
    dataset
        .iter()
        .map(|(seq, w)| {
            let tr = truncate_to_context(seq, context_len)?;
            let payload = tr.final_state().map(|s| s.payload().to_vec()).unwrap_or_default();
            Ok((payload, *w))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExactDivergences {
    pub kl: f64,
    pub chi2_mixture: f64,
}

pub fn exact_divergences(policy: &TabularPolicy, dataset: &[(Vec<Token>, f64)], gamma: f64) -> Result<ExactDivergences> {
    let (d, m) = exact_pair(policy, dataset, gamma)?;
    Ok(ExactDivergences {
        kl: occupancy_divergence(&d, &m, DivergenceKind::Kl)?,
        chi2_mixture: occupancy_divergence(&d, &m, DivergenceKind::Chi2Mixture)?,
    })
}

/// `exp` of the mean per-action negative log-likelihood of the data.
pub fn perplexity(policy: &TabularPolicy, dataset: &[(Vec<Token>, f64)]) -> Result<f64> {
    let space = policy.space();
    let trajs = dataset
        .iter()
        .map(|(s, _)| truncate_to_context(s, space.context_len()))
        .collect::<Result<Vec<_>>>()?;
    let idx = index_all(space, &trajs, Source::Data)?;
    let steps: usize = idx.iter().map(|t| t.steps.len()).sum();
    let nll = weighted_nll(policy, &idx, 1.0)? * idx.len() as f64;
    Ok((nll / steps.max(1) as f64).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub samples: usize,
    pub temperature: f64,
    pub top_p: f64,
    /// Prompt length for the diversity continuations, as a fraction of the
    /// context length.
    pub prompt_frac: f64,
    pub inject_prob: f64,
    pub gamma: f64,
    pub max_steps: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 1000,
            temperature: 1.0,
            top_p: 1.0,
            prompt_frac: 0.5,
            inject_prob: 0.0,
            gamma: 0.9,
            max_steps: 1024,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub diversity: f64,
    pub rep_n: BTreeMap<usize, f64>,
    pub backspace_rate: f64,
    pub valid_rate: f64,
    pub completed_rate: f64,
    pub mean_length: f64,
    pub perplexity: f64,
    pub kl_exact: Option<f64>,
    pub chi2_mixture_exact: Option<f64>,
}

impl EvalReport {
    /// Fixed-order text table.
    pub fn to_table(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.6}"));
        let mut s = String::new();
        s.push_str(&format!("{:<20}{}\n", "samples", self.samples));
        s.push_str(&format!("{:<20}{:.6}\n", "diversity", self.diversity));
        for (n, v) in &self.rep_n {
            s.push_str(&format!("{:<20}{:.4}\n", format!("rep-{n}"), v));
        }
        s.push_str(&format!("{:<20}{:.6}\n", "backspace_rate", self.backspace_rate));
        s.push_str(&format!("{:<20}{:.6}\n", "valid_rate", self.valid_rate));
        s.push_str(&format!("{:<20}{:.6}\n", "completed_rate", self.completed_rate));
        s.push_str(&format!("{:<20}{:.4}\n", "mean_length", self.mean_length));
        s.push_str(&format!("{:<20}{:.6}\n", "perplexity", self.perplexity));
        s.push_str(&format!("{:<20}{}\n", "kl_exact", opt(self.kl_exact)));
        s.push_str(&format!("{:<20}{}\n", "chi2_mixture_exact", opt(self.chi2_mixture_exact)));
        s
    }
}

/// Rates from `[bos]` samples, diversity from continuations of data
/// prompts, perplexity of the data, and exact occupancy divergences.
pub fn evaluate(policy: &TabularPolicy, dataset: &[(Vec<Token>, f64)], cfg: &EvalConfig) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.samples == 0 {
        return Err(Error::InvalidArgument("samples must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.prompt_frac) {
        return Err(Error::InvalidArgument(format!("prompt_frac must lie in [0, 1], got {}", cfg.prompt_frac)));
    }
    let space = policy.space();
    let t = space.context_len();
    let sample = SampleConfig {
        temperature: cfg.temperature,
        top_p: cfg.top_p,
        max_steps: cfg.max_steps,
        seed: cfg.seed,
        inject_prob: cfg.inject_prob,
    };
    let support = data_support(dataset, t)?;
    let rates = sample_rates(policy, &support, cfg.samples, &sample, cfg.seed)?;

    let truncated = truncate_dataset(dataset, t)?;
    let want = (cfg.prompt_frac * t as f64).floor() as usize;
    let prompts: Vec<SeqState> = (0..cfg.samples)
        .map(|i| {
            let (payload, _) = &truncated[i % truncated.len()];
            let body = &payload[..payload.len() - 1];
            // the prompt must leave room for at least one generated action
            let len = want.min(body.len()).min(t.saturating_sub(2));
            SeqState::from_payload(&body[..len])
        })
        .collect::<Result<_>>()?;
    let conts = sample_many(policy, &prompts, &sample, cfg.seed ^ 0x5eed)?;
    let continuations: Vec<Vec<Token>> = conts
        .iter()
        .zip(&prompts)
        .map(|(tr, p)| {
            let fin = tr.final_state().cloned().unwrap_or_else(|| p.clone());
            let common = fin.payload().iter().zip(p.payload()).take_while(|(a, b)| a == b).count();
            fin.payload()[common..].to_vec()
        })
        .collect();
    let rep = rep_n_set(&continuations);

    let exact = exact_divergences(policy, dataset, cfg.gamma)?;
    Ok(EvalReport {
        samples: cfg.samples,
        diversity: diversity_from_rep(&rep),
        rep_n: rep,
        backspace_rate: rates.backspace_rate(),
        valid_rate: rates.valid_rate(),
        completed_rate: rates.completed_rate(),
        mean_length: rates.mean_length(),
        perplexity: perplexity(policy, dataset)?,
        kl_exact: Some(exact.kl),
        chi2_mixture_exact: Some(exact.chi2_mixture),
    })
}

/// Divergences between data and model, oriented `D(data ‖ model)` except
/// `reverse_kl = KL(model ‖ data)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceSet {
    pub kl: f64,
    pub reverse_kl: f64,
    pub chi2: f64,
    pub chi2_mixture: f64,
}

impl DivergenceSet {
    fn from_fn(f: impl Fn(DivergenceKind) -> Result<f64>) -> Result<Self> {
        Ok(Self {
            kl: f(DivergenceKind::Kl)?,
            reverse_kl: f(DivergenceKind::ReverseKl)?,
            chi2: f(DivergenceKind::Chi2)?,
            chi2_mixture: f(DivergenceKind::Chi2Mixture)?,
        })
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let d = |a: f64, b: f64| {
            if a == b {
                0.0
            } else {
                (a - b).abs()
            }
        };
        d(self.kl, other.kl)
            .max(d(self.reverse_kl, other.reverse_kl))
            .max(d(self.chi2, other.chi2))
            .max(d(self.chi2_mixture, other.chi2_mixture))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainReport {
    pub n: usize,
    pub eps: f64,
    pub gamma: f64,
    pub completion_prob: f64,
    pub joint: DivergenceSet,
    pub occupancy: DivergenceSet,
    pub closed_completion_prob: f64,
    pub closed_joint: DivergenceSet,
    pub closed_occupancy: DivergenceSet,
}

impl ChainReport {
    /// Largest disagreement between enumerated and closed-form values.
    pub fn max_disagreement(&self) -> f64 {
        self.joint
            .max_abs_diff(&self.closed_joint)
            .max(self.occupancy.max_abs_diff(&self.closed_occupancy))
            .max((self.completion_prob - self.closed_completion_prob).abs())
    }
}

/// Space, data distribution and ε-error model of the length-`n` chain over a
/// single symbol. The model continues with probability `1−ε` and stops
/// early otherwise; at length `n` it always stops.
pub fn chain_setup(n: usize, eps: f64) -> Result<(Arc<SeqSpace>, Vec<(Vec<Token>, f64)>, TabularPolicy)> {
    if n == 0 {
        return Err(Error::InvalidArgument("chain length must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::InvalidArgument(format!("eps must lie in [0, 1), got {eps}")));
    }
    let vocab = Vocab::new(["c"])?;
    let space = Arc::new(SeqSpace::new(vocab.clone(), n + 2, DEFAULT_STATE_BUDGET)?);
    let mut data = vec![Token::Sym(0); n];
    data.push(Token::Eos);
    let na = space.num_actions();
    let never = -1e3;
    let log = |p: f64| if p > 0.0 { p.ln() } else { never };
    let mut logits = vec![never; space.num_states() * na];
    let (c, e) = (vocab.action_index(crate::seq_mdp::EditAction::Insert(0)), vocab.eos_index());
    for s in 0..space.num_states() {
        let st = space.state(s);
        let row = &mut logits[s * na..(s + 1) * na];
        if st.is_terminal() {
            row.iter_mut().for_each(|l| *l = 0.0);
        } else if st.payload().len() < n {
            row[c] = log(1.0 - eps);
            row[e] = log(eps);
        } else {
            row[e] = 0.0;
        }
    }
    Ok((space.clone(), vec![(data, 1.0)], TabularPolicy::from_logits(space, logits)?))
}

/// Probability of each terminal state, by forward propagation over a
/// policy that never backspaces.
pub fn terminal_distribution(space: &SeqSpace, policy: &FinitePolicy) -> Result<Vec<f64>> {
    let ns = space.num_states();
    let bs = space.vocab().backspace_index();
    let mut mass = vec![0.0; ns];
    mass[space.root()] = 1.0;
    let mut out = vec![0.0; ns];
    // successors of inserts are strictly longer, so ascending length order
    // is a topological order
    let mut order: Vec<usize> = (0..ns).collect();
    order.sort_by_key(|&s| space.state(s).len());
    for s in order {
        if mass[s] == 0.0 {
            continue;
        }
        if space.is_terminal(s) {
            out[s] += mass[s];
            continue;
        }
        if policy.prob(s, bs) > 0.0 {
            return Err(Error::InvalidArgument("terminal distribution needs a backspace-free policy".into()));
        }
        for a in 0..space.num_actions() {
            let p = policy.prob(s, a);
            if p > 0.0 {
                mass[space.successor(s, a)] += mass[s] * p;
            }
        }
    }
    Ok(out)
}

/// Closed forms for the chain, with `q = (1−ε)^n`.
pub fn chain_closed_forms(n: usize, eps: f64, gamma: f64) -> (f64, DivergenceSet, DivergenceSet) {
    let q = (1.0 - eps).powi(n as i32);
    let stop_mass = 1.0 - q;
    let joint = DivergenceSet {
        kl: -(n as f64) * (1.0 - eps).ln(),
        reverse_kl: if eps > 0.0 { f64::INFINITY } else { 0.0 },
        chi2: (1.0 - q) / q,
        chi2_mixture: (1.0 - q).powi(2) / (1.0 + q) + stop_mass,
    };
    let g = gamma;
    let mut occ_kl_weight = 0.0;
    let mut chi2 = 0.0;
    let mut mix = 0.0;
    for k in 0..n {
        let pk = (1.0 - g) * g.powi(k as i32);
        let r = (1.0 - eps).powi(k as i32 + 1);
        occ_kl_weight += pk * (k as f64 + 1.0);
        chi2 += pk * (1.0 - r).powi(2) / r;
        mix += pk * (1.0 - r).powi(2) / (1.0 + r);
        // early-stop pair and its terminal state carry model mass only
        let early = (1.0 - eps).powi(k as i32) * eps;
        let only_model = pk * early + g.powi(k as i32 + 1) * early;
        chi2 += only_model;
        mix += only_model;
    }
    let last = (1.0 - g) * g.powi(n as i32) + g.powi(n as i32 + 1);
    let occupancy = DivergenceSet {
        kl: -(1.0 - eps).ln() * (occ_kl_weight + n as f64 * g.powi(n as i32)),
        reverse_kl: if eps > 0.0 { f64::INFINITY } else { 0.0 },
        chi2: chi2 + last * (1.0 - q).powi(2) / q,
        chi2_mixture: mix + last * (1.0 - q).powi(2) / (1.0 + q),
    };
    (q, joint, occupancy)
}

/// Enumerated divergences for the chain next to their closed forms.
pub fn chain_experiment(n: usize, eps: f64, gamma: f64) -> Result<ChainReport> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidDiscount(gamma));
    }
    let (space, data, model) = chain_setup(n, eps)?;
    let mdp = FiniteMdp::from_space(&space);
    let pd = data_policy(&space, &data)?;
    let pm = to_finite_policy(&model, 1.0, 1.0);

    let td = terminal_distribution(&space, &pd)?;
    let tm = terminal_distribution(&space, &pm)?;
    let joint = DivergenceSet::from_fn(|k| distribution_divergence(&td, &tm, k))?;
    let data_state = space.require(&SeqState::from_payload(&data[0].0)?)?;
    let completion_prob = tm[data_state];

    let rd = exact_occupancy(&mdp, &pd, gamma)?;
    let rm = exact_occupancy(&mdp, &pm, gamma)?;
    let occupancy = DivergenceSet::from_fn(|k| occupancy_divergence(&rd, &rm, k))?;

    let (closed_completion_prob, closed_joint, closed_occupancy) = chain_closed_forms(n, eps, gamma);
    Ok(ChainReport {
        n,
        eps,
        gamma,
        completion_prob,
        joint,
        occupancy,
        closed_completion_prob,
        closed_joint,
        closed_occupancy,
    })
}
