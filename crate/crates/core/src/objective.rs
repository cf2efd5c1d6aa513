//! The SequenceMatch estimator, its baselines, and exact gradients.
//!
//! The code minimizes `L = −Ĵ`. With `x_k = ℓ(a_k|s_k) − γV(s_{k+1})`,
//! `φc(x) = (φ(αx) − φ(0))/α` and `V = log Σ exp ℓ`, one data trajectory of
//! `N` steps ending in a terminal state contributes
//!
//! ```text
//!   Σ_k γ^k [ −φc(x_k) + w·(V(s_k) − γV(s_{k+1})) ]              data_phi_term, data_value_diff
//! + γ^N [ −φc((1−γ)V(s_N))/(1−γ) + w·V(s_N) ]                   eos_term
//! ```
//!
//! and one model trajectory of `M` steps contributes
//!
//! ```text
//!   Σ_k γ^k (1/2)(V(u_k) − γV(u_{k+1}))                              model_value_diff
//! + γ^M (1/2)V(u_M)                                                 eos_term
//! ```
//!
//! The terminal pieces are the closed-form sums over the absorbing
//! self-loops, where the terminal state's action logit is its value. `w` is 1
//! when the model term is disabled (the value differences are then taken
//! under the data occupancy alone) and 1/2 otherwise. For `chi2-mixture`
//! each data step adds `αβc·γ^k·x_k²` and each model step `α(1−β)c·γ^k·x_k²`
//! (with matching terminal tails) as `regularizer`.
//!
//! Batch values are per-trajectory means over data plus over model
//! trajectories.

use serde::{Deserialize, Serialize};

use crate::divergence::{scaled_phi, scaled_phi_prime, PhiKind, PhiSpec};
use crate::error::{Error, Result};
use crate::math::{logsumexp, softmax_into};
use crate::occupancy::ExactOccupancy;
use crate::policy::TabularPolicy;
use crate::seq_mdp::{SeqSpace, Source, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub phi: PhiSpec,
    pub gamma: f64,
    pub include_model_term: bool,
    pub eos_handling: bool,
    /// Cut each model trajectory to the length of the data trajectory it is
    /// paired with (by index, cycling over the data batch).
    pub length_match_model: bool,
}

impl ObjectiveConfig {
    pub fn new(phi: PhiSpec, gamma: f64) -> Result<Self> {
        let cfg = Self {
            phi,
            gamma,
            include_model_term: true,
            eos_handling: true,
            length_match_model: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidDiscount(self.gamma));
        }
        self.phi.validate()
    }

    fn data_value_weight(&self) -> f64 {
        if self.include_model_term {
            0.5
        } else {
            1.0
        }
    }
}

/// Terms of the minimized loss; `total` is their sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub data_phi_term: f64,
    pub data_value_diff: f64,
    pub model_value_diff: f64,
    pub eos_term: f64,
    pub regularizer: f64,
}

impl LossBreakdown {
    fn finish(mut self) -> Self {
        self.total = self.data_phi_term + self.data_value_diff + self.model_value_diff + self.eos_term + self.regularizer;
        self
    }

    pub fn is_finite(&self) -> bool {
        [
            self.total,
            self.data_phi_term,
            self.data_value_diff,
            self.model_value_diff,
            self.eos_term,
            self.regularizer,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// `V = log Σ exp ℓ`, max-shifted.
pub fn value(logits: &[f64]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::EmptyActions);
    }
    Ok(logsumexp(logits))
}

/// A trajectory as state/action indices, cut at the first terminal state.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexedTrajectory {
    pub steps: Vec<(usize, usize, usize)>,
    pub terminal: Option<usize>,
    pub source: Source,
}

impl IndexedTrajectory {
    pub fn new(space: &SeqSpace, traj: &Trajectory) -> Result<Self> {
        let vocab = space.vocab();
        let mut steps = Vec::with_capacity(traj.len());
        let mut terminal = None;
        for t in &traj.transitions {
            let s = space.require(&t.state)?;
            if space.is_terminal(s) {
                terminal = Some(s);
                break;
            }
            let n = space.require(&t.next)?;
            steps.push((s, vocab.action_index(t.action), n));
            if space.is_terminal(n) {
                terminal = Some(n);
                break;
            }
        }
        Ok(Self {
            steps,
            terminal,
            source: traj.source,
        })
    }

    fn truncated(&self, len: usize) -> Self {
        if len >= self.steps.len() {
            return self.clone();
        }
        Self {
            steps: self.steps[..len].to_vec(),
            terminal: None,
            source: self.source,
        }
    }
}

pub fn index_all(space: &SeqSpace, trajs: &[Trajectory], source: Source) -> Result<Vec<IndexedTrajectory>> {
    trajs
        .iter()
        .map(|t| {
            if t.source != source {
                return Err(Error::Mismatch(format!("expected {source:?} trajectory, got {:?}", t.source)));
            }
            IndexedTrajectory::new(space, t)
        })
        .collect()
}

/// Per-state values and softmax rows, computed once per evaluation.
struct Tables<'a> {
    logits: &'a [f64],
    na: usize,
    v: Vec<f64>,
}

impl<'a> Tables<'a> {
    fn new(policy: &'a TabularPolicy) -> Self {
        let na = policy.num_actions();
        let logits = policy.params();
        let v = logits.chunks(na).map(logsumexp).collect();
        Self { logits, na, v }
    }

    fn l(&self, s: usize, a: usize) -> f64 {
        self.logits[s * self.na + a]
    }
}

/// Gradient accumulators: direct logit partials plus value partials that are
/// pushed through the softmax at the end.
struct Grad {
    na: usize,
    dl: Vec<f64>,
    dv: Vec<f64>,
}

impl Grad {
    fn new(policy: &TabularPolicy) -> Self {
        let na = policy.num_actions();
        Self {
            na,
            dl: vec![0.0; policy.params().len()],
            dv: vec![0.0; policy.params().len() / na],
        }
    }

    fn finish(mut self, policy: &TabularPolicy) -> Vec<f64> {
        let mut p = vec![0.0; self.na];
        for (s, &dv) in self.dv.iter().enumerate() {
            if dv != 0.0 {
                softmax_into(policy.row(s), &mut p);
                for a in 0..self.na {
                    self.dl[s * self.na + a] += dv * p[a];
                }
            }
        }
        self.dl
    }
}

fn pairing_lengths(cfg: &ObjectiveConfig, data: &[(IndexedTrajectory, f64)], model: &[(IndexedTrajectory, f64)]) -> Vec<Option<usize>> {
    model
        .iter()
        .enumerate()
        .map(|(j, _)| {
            if cfg.length_match_model && !data.is_empty() {
                Some(data[j % data.len()].0.steps.len())
            } else {
                None
            }
        })
        .collect()
}

fn accumulate(
    policy: &TabularPolicy,
    data: &[(IndexedTrajectory, f64)],
    model: &[(IndexedTrajectory, f64)],
    cfg: &ObjectiveConfig,
    mut grad: Option<&mut Grad>,
) -> LossBreakdown {
    let t = Tables::new(policy);
    let spec = &cfg.phi;
    let g = cfg.gamma;
    let w = cfg.data_value_weight();
    let mix = spec.is_mixture();
    let reg_d = spec.alpha * spec.mixture_beta * spec.mixture_c;
    let reg_m = spec.alpha * (1.0 - spec.mixture_beta) * spec.mixture_c;
    let mut out = LossBreakdown::default();

    for (traj, weight) in data {
        let mut disc = *weight;
        for &(s, a, n) in &traj.steps {
            let x = t.l(s, a) - g * t.v[n];
            out.data_phi_term -= disc * scaled_phi(spec, x);
            out.data_value_diff += disc * w * (t.v[s] - g * t.v[n]);
            let mut dx = -disc * scaled_phi_prime(spec, x);
            if mix {
                out.regularizer += disc * reg_d * x * x;
                dx += 2.0 * disc * reg_d * x;
            }
            if let Some(gr) = grad.as_deref_mut() {
                gr.dl[s * gr.na + a] += dx;
                gr.dv[n] -= g * dx;
                gr.dv[s] += disc * w;
                gr.dv[n] -= disc * w * g;
            }
            disc *= g;
        }
        if let (Some(s), true) = (traj.terminal, cfg.eos_handling) {
            let y = (1.0 - g) * t.v[s];
            out.eos_term += disc * (-scaled_phi(spec, y) / (1.0 - g) + w * t.v[s]);
            let mut dv = disc * (-scaled_phi_prime(spec, y) + w);
            if mix {
                out.regularizer += disc * reg_d * y * y / (1.0 - g);
                dv += 2.0 * disc * reg_d * y;
            }
            if let Some(gr) = grad.as_deref_mut() {
                gr.dv[s] += dv;
            }
        }
    }

    if cfg.include_model_term {
        let lens = pairing_lengths(cfg, data, model);
        for ((traj, weight), len) in model.iter().zip(lens) {
            let cut;
            let traj = match len {
                Some(l) => {
                    cut = traj.truncated(l);
                    &cut
                }
                None => traj,
            };
            let mut disc = *weight;
            for &(s, a, n) in &traj.steps {
                out.model_value_diff += disc * 0.5 * (t.v[s] - g * t.v[n]);
                if let Some(gr) = grad.as_deref_mut() {
                    gr.dv[s] += disc * 0.5;
                    gr.dv[n] -= disc * 0.5 * g;
                }
                if mix {
                    let x = t.l(s, a) - g * t.v[n];
                    out.regularizer += disc * reg_m * x * x;
                    if let Some(gr) = grad.as_deref_mut() {
                        let dx = 2.0 * disc * reg_m * x;
                        gr.dl[s * gr.na + a] += dx;
                        gr.dv[n] -= g * dx;
                    }
                }
                disc *= g;
            }
            if let (Some(s), true) = (traj.terminal, cfg.eos_handling) {
                out.eos_term += disc * 0.5 * t.v[s];
                let mut dv = disc * 0.5;
                if mix {
                    let y = (1.0 - g) * t.v[s];
                    out.regularizer += disc * reg_m * y * y / (1.0 - g);
                    dv += 2.0 * disc * reg_m * y;
                }
                if let Some(gr) = grad.as_deref_mut() {
                    gr.dv[s] += dv;
                }
            }
        }
    }
    out.finish()
}

fn uniform(trajs: &[IndexedTrajectory]) -> Vec<(IndexedTrajectory, f64)> {
    let w = 1.0 / trajs.len().max(1) as f64;
    trajs.iter().map(|t| (t.clone(), w)).collect()
}

fn check_batch(data: &[IndexedTrajectory], model: &[IndexedTrajectory]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if data.iter().any(|t| t.source != Source::Data) || model.iter().any(|t| t.source != Source::Model) {
        return Err(Error::Mismatch("trajectory sources are mixed".into()));
    }
    Ok(())
}

/// Loss over pre-indexed trajectories with explicit per-trajectory weights.
pub fn sm_loss_weighted(
    policy: &TabularPolicy,
    data: &[(IndexedTrajectory, f64)],
    model: &[(IndexedTrajectory, f64)],
    cfg: &ObjectiveConfig,
) -> LossBreakdown {
    accumulate(policy, data, model, cfg, None)
}

pub fn grad_sm_loss_weighted(
    policy: &TabularPolicy,
    data: &[(IndexedTrajectory, f64)],
    model: &[(IndexedTrajectory, f64)],
    cfg: &ObjectiveConfig,
) -> (LossBreakdown, Vec<f64>) {
    let mut g = Grad::new(policy);
    let loss = accumulate(policy, data, model, cfg, Some(&mut g));
    (loss, g.finish(policy))
}

pub fn sm_loss_indexed(
    policy: &TabularPolicy,
    data: &[IndexedTrajectory],
    model: &[IndexedTrajectory],
    cfg: &ObjectiveConfig,
) -> Result<LossBreakdown> {
    check_batch(data, model)?;
    Ok(accumulate(policy, &uniform(data), &uniform(model), cfg, None))
}

pub fn grad_sm_loss_indexed(
    policy: &TabularPolicy,
    data: &[IndexedTrajectory],
    model: &[IndexedTrajectory],
    cfg: &ObjectiveConfig,
) -> Result<(LossBreakdown, Vec<f64>)> {
    check_batch(data, model)?;
    let (loss, grad) = grad_sm_loss_weighted(policy, &uniform(data), &uniform(model), cfg);
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            step: 0,
            dump: format!("{loss:?}"),
        });
    }
    Ok((loss, grad))
}

pub fn sm_loss(
    policy: &TabularPolicy,
    data_traj: &[Trajectory],
    model_traj: &[Trajectory],
    cfg: &ObjectiveConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    let space = policy.space();
    let d = index_all(space, data_traj, Source::Data)?;
    let m = index_all(space, model_traj, Source::Model)?;
    sm_loss_indexed(policy, &d, &m, cfg)
}

pub fn grad_sm_loss(
    policy: &TabularPolicy,
    data_traj: &[Trajectory],
    model_traj: &[Trajectory],
    cfg: &ObjectiveConfig,
) -> Result<(LossBreakdown, Vec<f64>)> {
    cfg.validate()?;
    let space = policy.space();
    let d = index_all(space, data_traj, Source::Data)?;
    let m = index_all(space, model_traj, Source::Model)?;
    grad_sm_loss_indexed(policy, &d, &m, cfg)
}

/// Mean over trajectories of `Σ_k γ^k (V(s_k) − ℓ(a_k|s_k))`; `gamma = 1`
/// gives the plain negative log-likelihood. Terminal self-loops are ignored.
pub fn weighted_nll(policy: &TabularPolicy, trajs: &[IndexedTrajectory], gamma: f64) -> Result<f64> {
    Ok(weighted_nll_grad(policy, trajs, gamma, false)?.0)
}

fn weighted_nll_grad(policy: &TabularPolicy, trajs: &[IndexedTrajectory], gamma: f64, want_grad: bool) -> Result<(f64, Vec<f64>)> {
    if trajs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let t = Tables::new(policy);
    let na = t.na;
    let w = 1.0 / trajs.len() as f64;
    let mut loss = 0.0;
    let mut grad = if want_grad { vec![0.0; t.logits.len()] } else { Vec::new() };
    let mut p = vec![0.0; na];
    for traj in trajs {
        let mut disc = w;
        for &(s, a, _) in &traj.steps {
            loss += disc * (t.v[s] - t.l(s, a));
            if want_grad {
                softmax_into(policy.row(s), &mut p);
                for b in 0..na {
                    grad[s * na + b] += disc * p[b];
                }
                grad[s * na + a] -= disc;
            }
            disc *= gamma;
        }
    }
    Ok((loss, grad))
}

/// Mean per-sequence negative log-likelihood of the recorded actions.
pub fn mle_loss(policy: &TabularPolicy, sequences: &[Trajectory]) -> Result<f64> {
    let idx = index_all(policy.space(), sequences, Source::Data)?;
    weighted_nll(policy, &idx, 1.0)
}

/// [`mle_loss`] with its gradient (softmax minus one-hot per step).
pub fn grad_mle_loss(policy: &TabularPolicy, sequences: &[IndexedTrajectory]) -> Result<(f64, Vec<f64>)> {
    weighted_nll_grad(policy, sequences, 1.0, true)
}

/// Behavioral cloning: maximum likelihood over noise-augmented trajectories,
/// including the backspace labels that follow each corruption.
pub fn bc_loss(policy: &TabularPolicy, augmented_traj: &[Trajectory]) -> Result<f64> {
    mle_loss(policy, augmented_traj)
}

/// Central differences `(f(p+h) − f(p−h)) / 2h` per parameter.
pub fn fd_gradient_oracle(loss_fn: impl Fn(&[f64]) -> f64, params: &[f64], h: f64) -> Vec<f64> {
    assert!(h > 0.0, "step must be positive");
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = loss_fn(&p);
            p[i] = orig - h;
            let down = loss_fn(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖g − fd‖ / max(‖g‖, ‖fd‖)`, zero when both vanish.
pub fn relative_error(g: &[f64], fd: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = g.iter().zip(fd).map(|(a, b)| a - b).collect();
    let scale = norm(g).max(norm(fd));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// The loss in expectation: data trajectories drawn so that their occupancy
/// is `rho_data`, model trajectories started at `[bos]` with occupancy
/// `rho_model`. Step terms are scaled by `1/(1−γ)` to trajectory units and
/// terminal tails are weighted by the terminal state masses.
pub fn exact_sm_objective(
    policy: &TabularPolicy,
    rho_data: &ExactOccupancy,
    rho_model: &ExactOccupancy,
    cfg: &ObjectiveConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    let space = policy.space();
    let ns = space.num_states();
    let na = space.num_actions();
    for rho in [rho_data, rho_model] {
        if rho.gamma() != cfg.gamma || rho.num_states() != ns || rho.num_actions() != na {
            return Err(Error::Mismatch("occupancy does not match policy or discount".into()));
        }
    }
    let t = Tables::new(policy);
    let spec = &cfg.phi;
    let g = cfg.gamma;
    let w = cfg.data_value_weight();
    let mix = spec.is_mixture();
    let reg_d = spec.alpha * spec.mixture_beta * spec.mixture_c;
    let reg_m = spec.alpha * (1.0 - spec.mixture_beta) * spec.mixture_c;
    let unit = 1.0 / (1.0 - g);
    let mut out = LossBreakdown::default();

    for s in 0..ns {
        if space.is_terminal(s) {
            let y = (1.0 - g) * t.v[s];
            let md = rho_data.state_mass(s);
            out.eos_term += md * (-scaled_phi(spec, y) * unit + w * t.v[s]);
            if mix {
                out.regularizer += md * reg_d * y * y * unit;
            }
            if cfg.include_model_term {
                let mm = rho_model.state_mass(s);
                out.eos_term += mm * 0.5 * t.v[s];
                if mix {
                    out.regularizer += mm * reg_m * y * y * unit;
                }
            }
            continue;
        }
        for a in 0..na {
            let n = space.successor(s, a);
            let x = t.l(s, a) - g * t.v[n];
            let diff = t.v[s] - g * t.v[n];
            let md = rho_data.mass(s, a) * unit;
            if md > 0.0 {
                out.data_phi_term -= md * scaled_phi(spec, x);
                out.data_value_diff += md * w * diff;
                if mix {
                    out.regularizer += md * reg_d * x * x;
                }
            }
            if cfg.include_model_term {
                let mm = rho_model.mass(s, a) * unit;
                if mm > 0.0 {
                    out.model_value_diff += mm * 0.5 * diff;
                    if mix {
                        out.regularizer += mm * reg_m * x * x;
                    }
                }
            }
        }
    }
    if !cfg.eos_handling {
        out.eos_term = 0.0;
    }
    Ok(out.finish())
}

/// Outcome of one analytic-versus-finite-difference comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub kind: PhiKind,
    pub alpha: f64,
    pub gamma: f64,
    pub num_params: usize,
    pub rel_error: f64,
}

/// Compares [`grad_sm_loss`] against central differences on a random
/// instance: two symbols, context 5, random logits, noise-augmented data and
/// sampled model trajectories.
pub fn gradcheck_random(kind: PhiKind, seed: u64) -> Result<GradcheckReport> {
    use crate::preprocess::augment_noise_at;
    use crate::seq_mdp::{SeqState, Token, Vocab, DEFAULT_STATE_BUDGET};
    use rand::{Rng, SeedableRng};
    use std::sync::Arc;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let vocab = Vocab::new(["x", "y"])?;
    let space = Arc::new(SeqSpace::new(vocab.clone(), 5, DEFAULT_STATE_BUDGET)?);
    let n = space.num_states() * space.num_actions();
    let policy = TabularPolicy::from_logits(space.clone(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect())?;
    let mut data = Vec::new();
    for _ in 0..3 {
        let len = rng.gen_range(0..=4);
        let mut seq: Vec<Token> = (0..len).map(|_| Token::Sym(rng.gen_range(0..2))).collect();
        seq.push(Token::Eos);
        let pos = [rng.gen_range(0..seq.len())];
        data.push(augment_noise_at(&vocab, &seq, &pos, &mut rng, 5)?);
    }
    let sample = crate::policy::SampleConfig {
        max_steps: 12,
        ..Default::default()
    };
    let model = crate::policy::sample_many(&policy, &vec![SeqState::root(); 3], &sample, rng.gen())?;
    let alpha = rng.gen_range(0.05..1.0);
    let gamma = rng.gen_range(0.5..0.99);
    let cfg = ObjectiveConfig::new(PhiSpec::new(kind, alpha)?, gamma)?;
    let d = index_all(&space, &data, Source::Data)?;
    let m = index_all(&space, &model, Source::Model)?;
    let (_, grad) = grad_sm_loss_indexed(&policy, &d, &m, &cfg)?;
    let fd = fd_gradient_oracle(
        |params| {
            let q = TabularPolicy::from_logits(space.clone(), params.to_vec()).expect("same shape");
            sm_loss_indexed(&q, &d, &m, &cfg).map(|l| l.total).unwrap_or(f64::NAN)
        },
        policy.params(),
        1e-5,
    );
    Ok(GradcheckReport {
        kind,
        alpha,
        gamma,
        num_params: n,
        rel_error: relative_error(&grad, &fd),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::occupancy::{data_policy, exact_occupancy, FiniteMdp};
    use crate::policy::{prompt_transitions, sample_many, to_finite_policy, SampleConfig};
    use crate::preprocess::{augment_noise_at, truncate_to_context};
    use crate::seq_mdp::{SeqState, Token, Vocab, DEFAULT_STATE_BUDGET};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn space(k: usize, t: usize) -> Arc<SeqSpace> {
        let v = Vocab::new((0..k).map(|i| format!("t{i}"))).unwrap();
        Arc::new(SeqSpace::new(v, t, DEFAULT_STATE_BUDGET).unwrap())
    }

    fn random_policy(sp: &Arc<SeqSpace>, rng: &mut ChaCha8Rng, scale: f64) -> TabularPolicy {
        let n = sp.num_states() * sp.num_actions();
        TabularPolicy::from_logits(sp.clone(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
    }

    fn random_seq(rng: &mut ChaCha8Rng, k: usize, max: usize) -> Vec<Token> {
        let len = rng.gen_range(0..=max);
        let mut s: Vec<Token> = (0..len).map(|_| Token::Sym(rng.gen_range(0..k as u32))).collect();
        s.push(Token::Eos);
        s
    }

    fn cfg(kind: PhiKind, alpha: f64, gamma: f64) -> ObjectiveConfig {
        ObjectiveConfig::new(PhiSpec::new(kind, alpha).unwrap(), gamma).unwrap()
    }

    #[test]
    fn value_examples() {
        assert!((value(&[0.0, 0.0]).unwrap() - 0.693_147_180_559_945_3).abs() < 1e-15);
        assert_eq!(value(&[2.5]).unwrap(), 2.5);
        assert!((value(&[1000.0, 1000.0]).unwrap() - 1000.0 - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(matches!(value(&[]), Err(Error::EmptyActions)));
    }

    #[test]
    fn mle_examples() {
        let sp = space(3, 4);
        let p = TabularPolicy::zeros(sp.clone());
        let one = truncate_to_context(&[Token::Eos], 4).unwrap();
        assert!((mle_loss(&p, &[one]).unwrap() - 5f64.ln()).abs() < 1e-15);

        let seq = truncate_to_context(&[Token::Sym(1), Token::Eos], 4).unwrap();
        let mut sharp = p.clone();
        for t in &seq.transitions {
            let mut row = vec![-800.0; 5];
            row[sp.vocab().action_index(t.action)] = 0.0;
            sharp.set_logits(&t.state, &row).unwrap();
        }
        assert!(mle_loss(&sharp, &[seq.clone()]).unwrap().abs() < 1e-12);
        let a = mle_loss(&p, &[seq.clone()]).unwrap();
        let b = mle_loss(&p, &[seq.clone(), seq.clone()]).unwrap();
        assert_eq!(a, b);
        assert!(matches!(mle_loss(&p, &[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn bc_examples() {
        let sp = space(3, 6);
        let v = sp.vocab().clone();
        let p = TabularPolicy::zeros(sp.clone());
        let seq = [Token::Sym(0), Token::Sym(2), Token::Eos];
        let plain = truncate_to_context(&seq, 6).unwrap();
        assert_eq!(bc_loss(&p, &[plain.clone()]).unwrap(), mle_loss(&p, &[plain]).unwrap());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let aug = augment_noise_at(&v, &seq, &[1], &mut rng, 6).unwrap();
        let per_action = bc_loss(&p, &[aug.clone()]).unwrap() / aug.len() as f64;
        assert!((per_action - 5f64.ln()).abs() < 1e-12);

        let mut sharp = p.clone();
        for t in &aug.transitions {
            let mut row = vec![-800.0; 5];
            row[v.action_index(t.action)] = 0.0;
            sharp.set_logits(&t.state, &row).unwrap();
        }
        assert!(bc_loss(&sharp, &[aug]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn mle_gradient_is_softmax_minus_onehot() {
        let sp = space(2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_policy(&sp, &mut rng, 1.0);
        let tr = truncate_to_context(&[Token::Sym(0), Token::Eos], 4).unwrap();
        let idx = index_all(&sp, &[tr], Source::Data).unwrap();
        let (_, g) = grad_mle_loss(&p, &idx).unwrap();
        let (s, a, _) = idx[0].steps[0];
        let probs = crate::math::softmax(p.row(s));
        for b in 0..4 {
            let want = probs[b] - if b == a { 1.0 } else { 0.0 };
            assert!((g[s * 4 + b] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn chi2_zero_residual_has_zero_phi_term() {
        let sp = space(2, 4);
        let mut p = TabularPolicy::zeros(sp.clone());
        let g = 0.9;
        let tr = truncate_to_context(&[Token::Sym(0), Token::Eos], 4).unwrap();
        let s0 = SeqState::root();
        let s1 = tr.transitions[0].next.clone();
        // ℓ(a|s0) = γ V(s1), with V(s1) = ln 4 under zero logits
        let mut row = vec![0.0; 4];
        row[0] = g * 4f64.ln();
        p.set_logits(&s0, &row).unwrap();
        let single = Trajectory {
            transitions: vec![tr.transitions[0].clone()],
            source: Source::Data,
        };
        let c = cfg(PhiKind::Chi2, 0.3, g);
        let loss = sm_loss(&p, &[single], &[], &c).unwrap();
        assert!(loss.data_phi_term.abs() < 1e-15);
        assert_eq!(s1, tr.transitions[1].state);
    }

    #[test]
    fn breakdown_sums_to_total() {
        let sp = space(2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_policy(&sp, &mut rng, 1.0);
        let data: Vec<Trajectory> = (0..4).map(|_| truncate_to_context(&random_seq(&mut rng, 2, 5), 5).unwrap()).collect();
        let model = sample_many(&p, &vec![SeqState::root(); 3], &SampleConfig::default(), 5).unwrap();
        for k in PhiKind::ALL {
            let l = sm_loss(&p, &data, &model, &cfg(k, 0.5, 0.8)).unwrap();
            let sum = l.data_phi_term + l.data_value_diff + l.model_value_diff + l.eos_term + l.regularizer;
            assert!((l.total - sum).abs() < 1e-12);
            assert_eq!(l.regularizer == 0.0, k != PhiKind::Chi2Mixture);
        }
        assert!(matches!(sm_loss(&p, &model, &[], &cfg(PhiKind::Kl, 0.5, 0.8)), Err(Error::Mismatch(_))));
        assert!(matches!(sm_loss(&p, &[], &model, &cfg(PhiKind::Kl, 0.5, 0.8)), Err(Error::EmptyBatch)));
    }

    #[test]
    fn model_value_differences_telescope() {
        let sp = space(2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_policy(&sp, &mut rng, 1.0);
        let data = vec![truncate_to_context(&[Token::Eos], 5).unwrap()];
        let model = sample_many(&p, &vec![SeqState::root(); 20], &SampleConfig { max_steps: 10_000, ..Default::default() }, 6).unwrap();
        assert!(model.iter().all(|t| t.terminated()));
        let c = cfg(PhiKind::Kl, 0.5, 0.9);
        let with = sm_loss(&p, &data, &model, &c).unwrap();
        let without = sm_loss(&p, &data, &[], &c).unwrap();
        let model_part = with.model_value_diff + with.eos_term - without.eos_term;
        assert!((model_part - 0.5 * p.value(0)).abs() < 1e-9);
    }

    #[test]
    fn next_state_normalization_differs_from_mle() {
        let sp = space(2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = random_policy(&sp, &mut rng, 1.0);
        let data = vec![truncate_to_context(&[Token::Sym(1), Token::Sym(0), Token::Eos], 5).unwrap()];
        let c = cfg(PhiKind::Kl, 1.0, 0.99);
        let sm = sm_loss(&p, &data, &[], &c).unwrap().total;
        let mle = mle_loss(&p, &data).unwrap();
        assert!((sm - mle).abs() > 1e-3);
    }

    #[test]
    fn small_alpha_kl_is_weighted_mle() {
        let sp = space(3, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = random_policy(&sp, &mut rng, 1.0);
        let data: Vec<Trajectory> = (0..6).map(|_| truncate_to_context(&random_seq(&mut rng, 3, 6), 6).unwrap()).collect();
        let idx = index_all(&sp, &data, Source::Data).unwrap();
        let g = 0.95;
        let target = weighted_nll(&p, &idx, g).unwrap();
        let mut prev = f64::INFINITY;
        for alpha in [1e-2, 5e-3, 2.5e-3, 1.25e-3] {
            let mut c = cfg(PhiKind::Kl, alpha, g);
            c.include_model_term = false;
            let err = (sm_loss(&p, &data, &[], &c).unwrap().total - target).abs();
            let ratio = err / prev;
            assert!(prev.is_infinite() || (0.4..0.6).contains(&ratio), "ratio {ratio}");
            prev = err;
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for trial in 0..12 {
            let sp = space(2, 5);
            let v = sp.vocab().clone();
            let p = random_policy(&sp, &mut rng, 1.5);
            let data: Vec<Trajectory> = (0..3)
                .map(|_| {
                    let s = random_seq(&mut rng, 2, 5);
                    let pos = vec![rng.gen_range(0..s.len())];
                    augment_noise_at(&v, &s, &pos, &mut rng, 5).unwrap()
                })
                .collect();
            let model = sample_many(&p, &vec![SeqState::root(); 3], &SampleConfig { max_steps: 12, ..Default::default() }, trial).unwrap();
            let kind = PhiKind::ALL[trial as usize % 4];
            let mut c = cfg(kind, rng.gen_range(0.05..1.0), rng.gen_range(0.5..0.99));
            c.include_model_term = trial % 3 != 0;
            let (_, g) = grad_sm_loss(&p, &data, &model, &c).unwrap();
            let fd = fd_gradient_oracle(
                |params| {
                    let q = TabularPolicy::from_logits(sp.clone(), params.to_vec()).unwrap();
                    sm_loss(&q, &data, &model, &c).unwrap().total
                },
                p.params(),
                1e-5,
            );
            assert!(relative_error(&g, &fd) < 1e-5, "{kind}: {}", relative_error(&g, &fd));
        }
    }

    #[test]
    fn fd_oracle_examples() {
        let g = fd_gradient_oracle(|p| p[0] * p[0], &[3.0], 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-8);
        for h in [1e-3, 0.5, 2.0] {
            let g = fd_gradient_oracle(|p| 4.0 * p[0] - 2.0 * p[1], &[1.0, -7.0], h);
            assert!((g[0] - 4.0).abs() < 1e-10 && (g[1] + 2.0).abs() < 1e-10);
        }
    }

    #[test]
    fn eos_tail_matches_long_horizon() {
        let sp = space(2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = random_policy(&sp, &mut rng, 1.0);
        let data = vec![truncate_to_context(&[Token::Sym(0), Token::Sym(1), Token::Eos], 5).unwrap()];
        let idx = index_all(&sp, &data, Source::Data).unwrap();
        for (g, horizon) in [(0.5, 10_000usize), (0.9, 10_000), (0.99, 10_000), (0.999, 100_000)] {
            for kind in PhiKind::ALL {
                let c = cfg(kind, 0.3, g);
                let l = sm_loss(&p, &data, &[], &c).unwrap();
                let spec = &c.phi;
                let reg = spec.alpha * spec.mixture_beta * spec.mixture_c;
                let mut step_reg = 0.0;
                let mut d = 1.0;
                for &(s, a, n) in &idx[0].steps {
                    let x = p.row(s)[a] - g * p.value(n);
                    step_reg += d * reg * x * x;
                    d *= g;
                }
                let closed = l.eos_term + if spec.is_mixture() { l.regularizer - step_reg } else { 0.0 };
                let s = idx[0].terminal.unwrap();
                let v = p.value(s);
                let x = v - g * v;
                let n = idx[0].steps.len() as i32;
                let mut explicit = 0.0;
                let mut disc = g.powi(n);
                for _ in 0..horizon {
                    let w = 0.5;
                    let mut term = -scaled_phi(spec, x) + w * x;
                    if spec.is_mixture() {
                        term += reg * x * x;
                    }
                    explicit += disc * term;
                    disc *= g;
                }
                assert!((closed - explicit).abs() < 1e-8, "{kind} γ={g}: {closed} vs {explicit}");
            }
        }
    }

    #[test]
    fn estimator_is_consistent_with_exact_objective() {
        let sp = space(2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = random_policy(&sp, &mut rng, 0.7);
        let dataset = vec![
            (vec![Token::Sym(0), Token::Eos], 0.5),
            (vec![Token::Sym(1), Token::Sym(0), Token::Eos], 0.3),
            (vec![Token::Eos], 0.2),
        ];
        let mdp = FiniteMdp::from_space(&sp);
        let g = 0.8;
        let rho_d = exact_occupancy(&mdp, &data_policy(&sp, &dataset).unwrap(), g).unwrap();
        let rho_m = exact_occupancy(&mdp, &to_finite_policy(&p, 1.0, 1.0), g).unwrap();
        let n = 10_000;
        // data drawn in exact proportions; the model side is sampled
        let data: Vec<Trajectory> = dataset
            .iter()
            .flat_map(|(seq, w)| std::iter::repeat(truncate_to_context(seq, 4).unwrap()).take((w * n as f64).round() as usize))
            .collect();
        let model = sample_many(&p, &vec![SeqState::root(); n], &SampleConfig { max_steps: 400, ..Default::default() }, 14).unwrap();
        for kind in PhiKind::ALL {
            let c = cfg(kind, 0.5, g);
            let mc = sm_loss(&p, &data, &model, &c).unwrap().total;
            let exact = exact_sm_objective(&p, &rho_d, &rho_m, &c).unwrap().total;
            assert!((mc - exact).abs() < 1e-2, "{kind}: {mc} vs {exact}");
        }
    }

    #[test]
    fn model_prompt_prefix_counts_from_bos() {
        let sp = space(2, 5);
        let prompt = SeqState::from_payload(&[Token::Sym(1)]).unwrap();
        let tr = prompt_transitions(&prompt, Source::Model);
        let idx = IndexedTrajectory::new(&sp, &tr).unwrap();
        assert_eq!(idx.steps.len(), 1);
        assert_eq!(idx.terminal, None);
    }

    #[test]
    fn gradient_vanishes_at_maxent_optimum() {
        let v = Vocab::from_chars("abc".chars()).unwrap();
        let t = 7;
        let sp = Arc::new(SeqSpace::new(v.clone(), t, DEFAULT_STATE_BUDGET).unwrap());
        let strings = ["ab", "abc", "acba", "bca", "cabab"];
        let seqs: Vec<Vec<Token>> = strings
            .iter()
            .map(|w| {
                let mut s: Vec<Token> = w.chars().map(|c| Token::Sym(v.symbol_index(&c.to_string()).unwrap() as u32)).collect();
                s.push(Token::Eos);
                s
            })
            .collect();
        let g = 0.9;
        let na = sp.num_actions();
        // support tree: state index -> supported actions
        let mut children: std::collections::BTreeMap<usize, std::collections::BTreeSet<usize>> = Default::default();
        for s in &seqs {
            let tr = truncate_to_context(s, t).unwrap();
            for x in &tr.transitions {
                children.entry(sp.index_of(&x.state).unwrap()).or_default().insert(v.action_index(x.action));
            }
        }
        // values bottom-up: longer states first
        let mut val = vec![0.0; sp.num_states()];
        let mut order: Vec<usize> = children.keys().copied().collect();
        order.sort_by_key(|&s| std::cmp::Reverse(sp.state(s).len()));
        for &s in &order {
            let terms: Vec<f64> = children[&s].iter().map(|&a| g * val[sp.successor(s, a)]).collect();
            val[s] = crate::math::logsumexp(&terms);
        }
        let mut logits = vec![0.0; sp.num_states() * na];
        for s in 0..sp.num_states() {
            for a in 0..na {
                logits[s * na + a] = if sp.is_terminal(s) {
                    -(na as f64).ln()
                } else if children.get(&s).is_some_and(|c| c.contains(&a)) {
                    g * val[sp.successor(s, a)]
                } else {
                    -40.0
                };
            }
        }
        let p = TabularPolicy::from_logits(sp.clone(), logits).unwrap();
        let weighted: Vec<(IndexedTrajectory, f64)> = seqs
            .iter()
            .map(|s| {
                let tr = IndexedTrajectory::new(&sp, &truncate_to_context(s, t).unwrap()).unwrap();
                let lp: f64 = tr.steps.iter().map(|&(s, a, _)| p.row(s)[a] - p.value(s)).sum();
                (tr, lp.exp())
            })
            .collect();
        let total: f64 = weighted.iter().map(|w| w.1).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let model: Vec<(IndexedTrajectory, f64)> = weighted
            .iter()
            .map(|(t, w)| (IndexedTrajectory { source: Source::Model, ..t.clone() }, *w))
            .collect();
        for kind in PhiKind::ALL {
            let c = cfg(kind, 0.5, g);
            let (_, grad) = grad_sm_loss_weighted(&p, &weighted, &model, &c);
            let gmax = grad.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            assert!(gmax < 1e-6, "{kind}: {gmax}");
            let fd = fd_gradient_oracle(|q| sm_loss_weighted(&TabularPolicy::from_logits(sp.clone(), q.to_vec()).unwrap(), &weighted, &model, &c).total, p.params(), 1e-5);
            let fmax = fd.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            assert!(fmax < 1e-6, "{kind}: fd {fmax}");
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(16))]
        #[test]
        fn random_gradchecks(seed in 0u64..1_000_000, k in 0usize..4) {
            let r = gradcheck_random(PhiKind::ALL[k], seed).unwrap();
            proptest::prop_assert!(r.rel_error < 1e-5, "{:?}", r);
        }
    }
}
