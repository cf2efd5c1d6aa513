//! Tabular logit policies and autoregressive sampling with backspace.
//!
//! A [`TabularPolicy`] stores one logit row per enumerated state. The logits
//! are the Q-values of the soft-RL view: `log p(a|s) = ℓ(a|s) − V(s)` with
//! `V(s) = log Σ_a exp ℓ(a|s)`. Terminal states keep a row too; it is never
//! sampled from but its log-sum-exp is the terminal value used by the
//! objective.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{log_softmax, logsumexp, softmax_into};
use crate::occupancy::{ExactOccupancy, FinitePolicy};
use crate::seq_mdp::{EditAction, SeqSpace, SeqState, Source, Token, Trajectory, Transition, TransitionKind};

#[derive(Clone, Debug)]
pub struct TabularPolicy {
    space: Arc<SeqSpace>,
    logits: Vec<f64>,
}

impl TabularPolicy {
    /// All-zero logits: the uniform policy.
    pub fn zeros(space: Arc<SeqSpace>) -> Self {
        let n = space.num_states() * space.num_actions();
        Self {
            space,
            logits: vec![0.0; n],
        }
    }

    pub fn from_logits(space: Arc<SeqSpace>, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != space.num_states() * space.num_actions() {
            return Err(Error::Mismatch(format!(
                "{} logits for {} states x {} actions",
                logits.len(),
                space.num_states(),
                space.num_actions()
            )));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite logit".into()));
        }
        Ok(Self { space, logits })
    }

    pub fn space(&self) -> &Arc<SeqSpace> {
        &self.space
    }

    pub fn num_actions(&self) -> usize {
        self.space.num_actions()
    }

    pub fn params(&self) -> &[f64] {
        &self.logits
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn row(&self, s: usize) -> &[f64] {
        let na = self.num_actions();
        &self.logits[s * na..(s + 1) * na]
    }

    pub fn row_mut(&mut self, s: usize) -> &mut [f64] {
        let na = self.num_actions();
        &mut self.logits[s * na..(s + 1) * na]
    }

    pub fn logits(&self, s: &SeqState) -> Result<&[f64]> {
        Ok(self.row(self.space.require(s)?))
    }

    pub fn set_logits(&mut self, s: &SeqState, v: &[f64]) -> Result<()> {
        if v.len() != self.num_actions() {
            return Err(Error::Mismatch(format!("{} logits for {} actions", v.len(), self.num_actions())));
        }
        let i = self.space.require(s)?;
        self.row_mut(i).copy_from_slice(v);
        Ok(())
    }

    pub fn log_probs(&self, s: &SeqState) -> Result<Vec<f64>> {
        Ok(log_softmax(self.logits(s)?))
    }

    /// `V(s) = log Σ_a exp ℓ(a|s)`
    pub fn value(&self, s: usize) -> f64 {
        logsumexp(self.row(s))
    }
}

/// Free-function accessor for a state's logit row.
pub fn logits<'a>(p: &'a TabularPolicy, s: &SeqState) -> Result<&'a [f64]> {
    p.logits(s)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub max_steps: usize,
    pub seed: u64,
    /// Probability that the environment replaces the sampled action by a
    /// uniformly random symbol insert.
    pub inject_prob: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 1.0,
            max_steps: 256,
            seed: 0,
            inject_prob: 0.0,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::InvalidArgument(format!("top_p must lie in (0, 1], got {}", self.top_p)));
        }
        if !(0.0..=1.0).contains(&self.inject_prob) {
            return Err(Error::InvalidArgument(format!("inject_prob must lie in [0, 1], got {}", self.inject_prob)));
        }
        Ok(())
    }
}

/// Temperature-scaled softmax followed by nucleus truncation.
///
/// The nucleus is the shortest prefix of actions, sorted by probability
/// (ties by action index), whose mass reaches `top_p`.
pub fn sampling_distribution(row: &[f64], temperature: f64, top_p: f64) -> Vec<f64> {
    let scaled: Vec<f64> = row.iter().map(|&l| l / temperature).collect();
    let mut p = vec![0.0; row.len()];
    softmax_into(&scaled, &mut p);
    if top_p >= 1.0 {
        return p;
    }
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    let mut keep = vec![false; p.len()];
    let mut mass = 0.0;
    for &a in &order {
        keep[a] = true;
        mass += p[a];
        if mass >= top_p {
            break;
        }
    }
    let total: f64 = p.iter().zip(&keep).filter(|(_, &k)| k).map(|(v, _)| v).sum();
    for (v, k) in p.iter_mut().zip(keep) {
        *v = if k { *v / total } else { 0.0 };
    }
    p
}

fn categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > 0.0 {
            acc += v;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Samples from `prompt` until a terminal state or `cfg.max_steps` actions.
///
/// State tracking is incremental over the precomputed successor table, so a
/// backspace simply rolls the state back. Inserts that would fill the
/// context without `<eos>` become forced-eos transitions.
pub fn sample_trajectory_with<R: Rng + ?Sized>(
    p: &TabularPolicy,
    prompt: &SeqState,
    cfg: &SampleConfig,
    rng: &mut R,
) -> Result<Trajectory> {
    let space = p.space();
    let vocab = space.vocab();
    let mut s = space.require(prompt)?;
    let mut traj = Trajectory::new(Source::Model);
    for _ in 0..cfg.max_steps {
        if space.is_terminal(s) {
            break;
        }
        let dist = sampling_distribution(p.row(s), cfg.temperature, cfg.top_p);
        let a = categorical(&dist, rng);
        let state = space.state(s).clone();
        let (next, kind) = if cfg.inject_prob > 0.0
            && !vocab.is_empty()
            && state.len() + 2 <= space.context_len()
            && rng.gen_bool(cfg.inject_prob)
        {
            let x = Token::Sym(rng.gen_range(0..vocab.len() as u32));
            (space.require(&state.push(x))?, TransitionKind::Noise)
        } else {
            (space.successor(s, a), space.transition_kind(s, a))
        };
        traj.transitions.push(Transition {
            state,
            action: vocab.action(a),
            next: space.state(next).clone(),
            kind,
        });
        s = next;
    }
    Ok(traj)
}

pub fn sample_trajectory(p: &TabularPolicy, prompt: &SeqState, cfg: &SampleConfig) -> Result<Trajectory> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    sample_trajectory_with(p, prompt, cfg, &mut rng)
}

/// Independent stream `index` of the generator seeded by `seed`.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// One trajectory per prompt, each drawn from its own random stream, so the
/// result does not depend on the rayon thread count.
pub fn sample_many(p: &TabularPolicy, prompts: &[SeqState], cfg: &SampleConfig, seed: u64) -> Result<Vec<Trajectory>> {
    cfg.validate()?;
    prompts
        .par_iter()
        .enumerate()
        .map(|(i, prompt)| {
            let mut rng = stream_rng(seed, i as u64);
            sample_trajectory_with(p, prompt, cfg, &mut rng)
        })
        .collect()
}

/// Exact per-state sampling distributions as a [`FinitePolicy`].
pub fn to_finite_policy(p: &TabularPolicy, temperature: f64, top_p: f64) -> FinitePolicy {
    let na = p.num_actions();
    let mut probs = Vec::with_capacity(p.params().len());
    for s in 0..p.space().num_states() {
        probs.extend(sampling_distribution(p.row(s), temperature, top_p));
    }
    FinitePolicy::new(na, probs).expect("softmax rows are distributions")
}

/// Monte Carlo occupancy from `n` trajectories started at `[bos]`: step `t`
/// adds `(1−γ)γ^t` to its pair and reaching a terminal state at step `N`
/// adds `γ^N` to that state, spread over actions by the policy row.
pub fn monte_carlo_occupancy(p: &TabularPolicy, gamma: f64, n: usize, max_steps: usize, seed: u64) -> Result<ExactOccupancy> {
    let space = p.space();
    let na = space.num_actions();
    let fin = to_finite_policy(p, 1.0, 1.0);
    let cfg = SampleConfig {
        max_steps,
        ..SampleConfig::default()
    };
    let root = space.state(space.root()).clone();
    let prompts = vec![root; n];
    let trajs = sample_many(p, &prompts, &cfg, seed)?;
    let mut pair = vec![0.0; space.num_states() * na];
    let w = 1.0 / n as f64;
    for tr in &trajs {
        let mut g = 1.0;
        for t in &tr.transitions {
            let s = space.require(&t.state)?;
            pair[s * na + space.vocab().action_index(t.action)] += w * (1.0 - gamma) * g;
            g *= gamma;
        }
        if let Some(last) = tr.final_state() {
            if last.is_terminal() {
                let s = space.require(last)?;
                for a in 0..na {
                    pair[s * na + a] += w * g * fin.prob(s, a);
                }
            }
        }
    }
    let absorbing = (0..space.num_states()).map(|s| space.is_terminal(s)).collect();
    ExactOccupancy::from_masses(gamma, na, pair, absorbing)
}

/// Transitions that spell `prompt` from `[bos]` by plain inserts.
pub fn prompt_transitions(prompt: &SeqState, source: Source) -> Trajectory {
    let mut traj = Trajectory::new(source);
    let mut s = SeqState::root();
    for &t in prompt.payload() {
        let a = EditAction::from_token(t).expect("payload has no <bos>");
        let next = s.push(t);
        traj.transitions.push(Transition {
            state: s,
            action: a,
            next: next.clone(),
            kind: TransitionKind::Plain,
        });
        s = next;
    }
    traj
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::occupancy::{exact_occupancy, FiniteMdp};
    use crate::seq_mdp::{apply_actions, Vocab, DEFAULT_STATE_BUDGET};

    fn space(t: usize) -> Arc<SeqSpace> {
        Arc::new(SeqSpace::new(Vocab::new(["x", "y"]).unwrap(), t, DEFAULT_STATE_BUDGET).unwrap())
    }

    fn st(p: &[Token]) -> SeqState {
        SeqState::from_payload(p).unwrap()
    }

    const X: Token = Token::Sym(0);

    #[test]
    fn fresh_policy_is_uniform() {
        let p = TabularPolicy::zeros(space(4));
        let root = SeqState::root();
        assert!(p.logits(&root).unwrap().iter().all(|&v| v == 0.0));
        let lp = p.log_probs(&root).unwrap();
        let total: f64 = lp.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let f = to_finite_policy(&p, 1.0, 1.0);
        assert!(f.row(0).iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn set_and_get_logits() {
        let mut p = TabularPolicy::zeros(space(4));
        let s = st(&[X]);
        p.set_logits(&s, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(p.logits(&s).unwrap(), &[1.0, 2.0, 3.0, 4.0]);
        let far = st(&[X, X, X, X, X]);
        assert!(matches!(p.logits(&far), Err(Error::UnknownState(_))));
    }

    fn point_mass(p: &mut TabularPolicy, s: &SeqState, a: usize) {
        let mut row = vec![-50.0; p.num_actions()];
        row[a] = 50.0;
        p.set_logits(s, &row).unwrap();
    }

    #[test]
    fn deterministic_policy_samples_one_path() {
        let mut p = TabularPolicy::zeros(space(4));
        point_mass(&mut p, &SeqState::root(), 0);
        point_mass(&mut p, &st(&[X]), 2);
        for seed in 0..20 {
            let cfg = SampleConfig { seed, ..SampleConfig::default() };
            let tr = sample_trajectory(&p, &SeqState::root(), &cfg).unwrap();
            let states: Vec<SeqState> = std::iter::once(tr.start().unwrap().clone())
                .chain(tr.transitions.iter().map(|t| t.next.clone()))
                .collect();
            assert_eq!(states, vec![SeqState::root(), st(&[X]), st(&[X, Token::Eos])]);
        }
    }

    #[test]
    fn backspace_rolls_back() {
        let mut p = TabularPolicy::zeros(space(4));
        point_mass(&mut p, &SeqState::root(), 0);
        point_mass(&mut p, &st(&[X]), 3);
        let cfg = SampleConfig { max_steps: 4, ..SampleConfig::default() };
        let tr = sample_trajectory(&p, &SeqState::root(), &cfg).unwrap();
        assert_eq!(tr.transitions[1].next, SeqState::root());
        assert_eq!(tr.len(), 4);
    }

    #[test]
    fn sampler_matches_exact_distribution_at_root() {
        let mut p = TabularPolicy::zeros(space(3));
        p.set_logits(&SeqState::root(), &[0.3, -1.2, 0.9, 0.0]).unwrap();
        let want = to_finite_policy(&p, 1.0, 1.0);
        let cfg = SampleConfig { max_steps: 1, ..SampleConfig::default() };
        let prompts = vec![SeqState::root(); 100_000];
        let trajs = sample_many(&p, &prompts, &cfg, 9).unwrap();
        let mut counts = [0.0; 4];
        for t in &trajs {
            counts[p.space().vocab().action_index(t.transitions[0].action)] += 1.0;
        }
        let tv: f64 = counts
            .iter()
            .enumerate()
            .map(|(a, c)| (c / 1e5 - want.prob(0, a)).abs())
            .sum::<f64>()
            * 0.5;
        assert!(tv < 1e-2, "tv {tv}");
    }

    #[test]
    fn nucleus_truncation() {
        let row = [2f64.ln() + 1.0, 1.0, 1.0, f64::ln(0.5) + 1.0];
        // probabilities 4/11, 2/11, 2/11, 1/11
        let full = sampling_distribution(&row, 1.0, 1.0);
        let p = sampling_distribution(&row, 1.0, 0.5);
        // 4/11 < 0.5, so the tied pair {1, 2} is broken by index and only 1 joins
        assert!(p[0] > 0.0 && p[1] > 0.0 && p[2] == 0.0 && p[3] == 0.0);
        assert!((p[0] - full[0] / (full[0] + full[1])).abs() < 1e-15);
        let cold = sampling_distribution(&row, 0.01, 1.0);
        assert!(cold[0] > 0.999);
    }

    #[test]
    fn shift_invariance() {
        let mut a = TabularPolicy::zeros(space(3));
        let row = [0.1, -0.4, 2.0, 0.3];
        a.set_logits(&SeqState::root(), &row).unwrap();
        let mut b = a.clone();
        let shifted: Vec<f64> = row.iter().map(|v| v + 17.5).collect();
        b.set_logits(&SeqState::root(), &shifted).unwrap();
        let fa = to_finite_policy(&a, 0.7, 0.9);
        let fb = to_finite_policy(&b, 0.7, 0.9);
        for (x, y) in fa.table().iter().zip(fb.table()) {
            assert!((x - y).abs() < 1e-12);
        }
        let cfg = SampleConfig { seed: 4, ..SampleConfig::default() };
        assert_eq!(
            sample_trajectory(&a, &SeqState::root(), &cfg).unwrap(),
            sample_trajectory(&b, &SeqState::root(), &cfg).unwrap()
        );
    }

    #[test]
    fn rollback_matches_replay_and_seeds_are_deterministic() {
        let sp = space(5);
        let mut p = TabularPolicy::zeros(sp.clone());
        for s in 0..sp.num_states() {
            p.row_mut(s)[3] = 0.8;
        }
        for seed in 0..200 {
            let cfg = SampleConfig { seed, max_steps: 40, ..SampleConfig::default() };
            let tr = sample_trajectory(&p, &SeqState::root(), &cfg).unwrap();
            assert_eq!(tr, sample_trajectory(&p, &SeqState::root(), &cfg).unwrap());
            let acts: Vec<EditAction> = tr.actions().collect();
            let replay = apply_actions(&SeqState::root(), &acts);
            for (t, r) in tr.transitions.iter().zip(&replay[1..]) {
                if t.kind == TransitionKind::Plain {
                    assert_eq!(&t.next, r);
                }
            }
            assert!(tr.is_consistent());
        }
    }

    #[test]
    fn injection_inserts_symbols() {
        let p = TabularPolicy::zeros(space(6));
        let cfg = SampleConfig { inject_prob: 1.0, max_steps: 3, ..SampleConfig::default() };
        let tr = sample_trajectory(&p, &SeqState::root(), &cfg).unwrap();
        assert!(tr.transitions.iter().all(|t| t.kind == TransitionKind::Noise));
        assert!(tr.is_consistent());
    }

    #[test]
    fn monte_carlo_matches_exact_occupancy() {
        let sp = space(4);
        let mut p = TabularPolicy::zeros(sp.clone());
        for s in 0..sp.num_states() {
            p.row_mut(s)[2] = 0.5;
            p.row_mut(s)[3] = -0.5;
        }
        let g = 0.8;
        let exact = exact_occupancy(&FiniteMdp::from_space(&sp), &to_finite_policy(&p, 1.0, 1.0), g).unwrap();
        let mc = monte_carlo_occupancy(&p, g, 100_000, 200, 1).unwrap();
        let dev = exact
            .pair_masses()
            .iter()
            .zip(mc.pair_masses())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(dev < 5e-3, "{dev}");
    }

    #[test]
    fn prompt_transitions_spell_the_prompt() {
        let prompt = st(&[X, Token::Sym(1)]);
        let tr = prompt_transitions(&prompt, Source::Model);
        assert_eq!(tr.len(), 2);
        assert_eq!(tr.final_state().unwrap(), &prompt);
        assert!(prompt_transitions(&SeqState::root(), Source::Data).is_empty());
    }
}
