//! Exact discounted occupancy measures on enumerable MDPs.
//!
//! ρ(s,a) = (1−γ)·p(a|s)·Σ_t γ^t P(s_t = s)
//!
//! Everything here works on a [`FiniteMdp`]: a tabular MDP with stochastic
//! transitions and an initial distribution. The sequence MDP is the special
//! case built by [`FiniteMdp::from_space`].

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::math::{logsumexp, softmax_into, xlogy_ratio};
use crate::seq_mdp::{SeqSpace, Token};

pub const DEFAULT_TOL: f64 = 1e-12;
pub const DEFAULT_MAX_ITERS: usize = 100_000;

/// Tabular MDP. Transitions are stored per (state, action) as a list of
/// `(next_state, probability)` pairs.
#[derive(Clone, Debug)]
pub struct FiniteMdp {
    num_states: usize,
    num_actions: usize,
    offsets: Vec<usize>,
    edges: Vec<(usize, f64)>,
    init: Vec<(usize, f64)>,
}

impl FiniteMdp {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        transitions: Vec<Vec<(usize, f64)>>,
        init: Vec<(usize, f64)>,
    ) -> Result<Self> {
        if num_actions == 0 {
            return Err(Error::EmptyActions);
        }
        if transitions.len() != num_states * num_actions {
            return Err(Error::Mismatch(format!(
                "{} transition rows for {num_states} states x {num_actions} actions",
                transitions.len()
            )));
        }
        let check = |row: &[(usize, f64)], what: &str| -> Result<()> {
            let total: f64 = row.iter().map(|e| e.1).sum();
            if row.iter().any(|&(s, p)| s >= num_states || !(p >= 0.0)) || (total - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidArgument(format!("{what} is not a distribution over states")));
            }
            Ok(())
        };
        check(&init, "initial distribution")?;
        let mut offsets = Vec::with_capacity(transitions.len() + 1);
        let mut edges = Vec::new();
        offsets.push(0);
        for row in &transitions {
            check(row, "transition row")?;
            edges.extend_from_slice(row);
            offsets.push(edges.len());
        }
        Ok(Self {
            num_states,
            num_actions,
            offsets,
            edges,
            init,
        })
    }

    /// The context-capped sequence MDP, started at `[bos]`.
    pub fn from_space(space: &SeqSpace) -> Self {
        let ns = space.num_states();
        let na = space.num_actions();
        let mut offsets = Vec::with_capacity(ns * na + 1);
        let mut edges = Vec::with_capacity(ns * na);
        offsets.push(0);
        for s in 0..ns {
            for a in 0..na {
                edges.push((space.successor(s, a), 1.0));
                offsets.push(edges.len());
            }
        }
        Self {
            num_states: ns,
            num_actions: na,
            offsets,
            edges,
            init: vec![(space.root(), 1.0)],
        }
    }

    /// A random MDP with up to three successors per pair; the last
    /// `num_absorbing` states self-loop under every action.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, num_states: usize, num_actions: usize, num_absorbing: usize) -> Self {
        assert!(num_states > 0 && num_actions > 0 && num_absorbing < num_states);
        let mut rows = Vec::with_capacity(num_states * num_actions);
        for s in 0..num_states {
            for _ in 0..num_actions {
                if s >= num_states - num_absorbing {
                    rows.push(vec![(s, 1.0)]);
                    continue;
                }
                let k = rng.gen_range(1..=3);
                let mut row: Vec<(usize, f64)> = (0..k)
                    .map(|_| (rng.gen_range(0..num_states), rng.gen_range(0.05..1.0)))
                    .collect();
                let total: f64 = row.iter().map(|e| e.1).sum();
                for e in &mut row {
                    e.1 /= total;
                }
                rows.push(row);
            }
        }
        let k = rng.gen_range(1..=num_states.min(2));
        let mut init: Vec<(usize, f64)> = (0..k).map(|i| (i, rng.gen_range(0.1..1.0))).collect();
        let total: f64 = init.iter().map(|e| e.1).sum();
        for e in &mut init {
            e.1 /= total;
        }
        Self::new(num_states, num_actions, rows, init).expect("valid random MDP")
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn successors(&self, s: usize, a: usize) -> &[(usize, f64)] {
        let i = s * self.num_actions + a;
        &self.edges[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn init(&self) -> &[(usize, f64)] {
        &self.init
    }

    /// True when every action returns to `s` with probability one.
    pub fn is_absorbing(&self, s: usize) -> bool {
        (0..self.num_actions).all(|a| {
            self.successors(s, a)
                .iter()
                .filter(|e| e.0 == s)
                .map(|e| e.1)
                .sum::<f64>()
                >= 1.0 - 1e-15
        })
    }

    /// `E_{s'~P(·|s,a)}[v(s')]`
    pub fn expect(&self, s: usize, a: usize, v: &[f64]) -> f64 {
        self.successors(s, a).iter().map(|&(n, p)| p * v[n]).sum()
    }
}

/// A stochastic policy as a row-major table of action probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct FinitePolicy {
    num_actions: usize,
    probs: Vec<f64>,
}

impl FinitePolicy {
    pub fn new(num_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if num_actions == 0 {
            return Err(Error::EmptyActions);
        }
        if probs.len() % num_actions != 0 {
            return Err(Error::Mismatch("probability table is not rectangular".into()));
        }
        for (i, row) in probs.chunks(num_actions).enumerate() {
            let total: f64 = row.iter().sum();
            if row.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidArgument(format!("policy row {i} sums to {total}")));
            }
        }
        Ok(Self { num_actions, probs })
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        Self {
            num_actions,
            probs: vec![1.0 / num_actions as f64; num_states * num_actions],
        }
    }

    pub fn num_states(&self) -> usize {
        self.probs.len() / self.num_actions
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.num_actions..(s + 1) * self.num_actions]
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.num_actions + a]
    }

    pub fn table(&self) -> &[f64] {
        &self.probs
    }

    /// Entropy of one row in nats.
    pub fn row_entropy(&self, s: usize) -> f64 {
        self.row(s).iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
    }
}

/// Softmax of each row of a Q table (`log p(a|s) = Q(s,a) − log Σ exp Q(s,·)`).
pub fn policy_from_q(q: &[f64], num_actions: usize) -> Result<FinitePolicy> {
    if num_actions == 0 {
        return Err(Error::EmptyActions);
    }
    if q.len() % num_actions != 0 {
        return Err(Error::Mismatch("Q table is not rectangular".into()));
    }
    let mut probs = vec![0.0; q.len()];
    for (row, out) in q.chunks(num_actions).zip(probs.chunks_mut(num_actions)) {
        softmax_into(row, out);
    }
    Ok(FinitePolicy { num_actions, probs })
}

/// Next-token distribution of a weighted dataset at every prefix state.
///
/// `dataset` holds payloads (no `<bos>`) ending in `<eos>`. Backspace always
/// has probability zero. States the data never visits, and terminal states,
/// get a uniform distribution over the inserts so the table is total.
pub fn data_policy(space: &SeqSpace, dataset: &[(Vec<Token>, f64)]) -> Result<FinitePolicy> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let na = space.num_actions();
    let vocab = space.vocab();
    let mut counts = vec![0.0; space.num_states() * na];
    let mut total_weight = 0.0;
    for (index, (payload, w)) in dataset.iter().enumerate() {
        if payload.last() != Some(&Token::Eos) {
            return Err(Error::MissingEos { index });
        }
        if !(*w >= 0.0 && w.is_finite()) {
            return Err(Error::InvalidArgument(format!("dataset weight {w} at index {index}")));
        }
        if payload.len() + 1 > space.context_len() {
            return Err(Error::ContextOverflow {
                len: payload.len() + 1,
                context_len: space.context_len(),
            });
        }
        total_weight += w;
        let mut state = crate::seq_mdp::SeqState::root();
        for &t in payload {
            let s = space.require(&state)?;
            let a = crate::seq_mdp::EditAction::from_token(t)
                .ok_or_else(|| Error::InvalidArgument("<bos> inside a sequence".into()))?;
            if !vocab.contains(t) {
                return Err(Error::InvalidArgument(format!("token {t:?} outside vocabulary")));
            }
            counts[s * na + vocab.action_index(a)] += w;
            state = state.push(t);
        }
    }
    if total_weight <= 0.0 {
        return Err(Error::EmptyDataset);
    }
    let inserts = na - 1;
    for row in counts.chunks_mut(na) {
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            for p in row.iter_mut() {
                *p /= total;
            }
        } else {
            for p in row[..inserts].iter_mut() {
                *p = 1.0 / inserts as f64;
            }
        }
    }
    FinitePolicy::new(na, counts)
}

/// Discounted occupancy of a policy, with per-pair and per-state masses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExactOccupancy {
    gamma: f64,
    num_actions: usize,
    pair: Vec<f64>,
    state: Vec<f64>,
    absorbing: Vec<bool>,
}

impl ExactOccupancy {
    /// Builds an occupancy from raw pair masses (used for hand-made
    /// distributions; no flow consistency is implied).
    pub fn from_masses(gamma: f64, num_actions: usize, pair: Vec<f64>, absorbing: Vec<bool>) -> Result<Self> {
        if num_actions == 0 {
            return Err(Error::EmptyActions);
        }
        if pair.len() != absorbing.len() * num_actions {
            return Err(Error::Mismatch("pair masses do not match state count".into()));
        }
        let state = pair.chunks(num_actions).map(|r| r.iter().sum()).collect();
        Ok(Self {
            gamma,
            num_actions,
            pair,
            state,
            absorbing,
        })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn num_states(&self) -> usize {
        self.state.len()
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn mass(&self, s: usize, a: usize) -> f64 {
        self.pair[s * self.num_actions + a]
    }

    pub fn pair_masses(&self) -> &[f64] {
        &self.pair
    }

    pub fn state_mass(&self, s: usize) -> f64 {
        self.state[s]
    }

    pub fn state_masses(&self) -> &[f64] {
        &self.state
    }

    pub fn is_absorbing(&self, s: usize) -> bool {
        self.absorbing[s]
    }

    pub fn total(&self) -> f64 {
        self.pair.iter().sum()
    }

    /// The distribution divergences and entropy are computed on: one atom per
    /// (non-absorbing state, action) pair, then one atom per absorbing state.
    /// Actions taken in an absorbing state change nothing, so they are merged.
    pub fn atoms(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.pair.len());
        for s in 0..self.state.len() {
            if !self.absorbing[s] {
                out.extend_from_slice(&self.pair[s * self.num_actions..(s + 1) * self.num_actions]);
            }
        }
        for s in 0..self.state.len() {
            if self.absorbing[s] {
                out.push(self.state[s]);
            }
        }
        out
    }

    /// Largest violation of the flow equations
    /// `Σ_a ρ(s,a) = (1−γ)μ0(s) + γ Σ_{s',a'} ρ(s',a') P(s|s',a')`.
    pub fn flow_residual(&self, mdp: &FiniteMdp) -> f64 {
        let ns = self.state.len();
        let mut rhs = vec![0.0; ns];
        for &(s, p) in mdp.init() {
            rhs[s] += (1.0 - self.gamma) * p;
        }
        for s in 0..ns {
            for a in 0..self.num_actions {
                let m = self.mass(s, a);
                if m == 0.0 {
                    continue;
                }
                for &(n, p) in mdp.successors(s, a) {
                    rhs[n] += self.gamma * m * p;
                }
            }
        }
        (0..ns)
            .map(|s| (self.state[s] - rhs[s]).abs())
            .fold(0.0, f64::max)
    }
}

fn check_discount(gamma: f64, allow_zero: bool) -> Result<()> {
    let ok = if allow_zero {
        (0.0..1.0).contains(&gamma)
    } else {
        gamma > 0.0 && gamma < 1.0
    };
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidDiscount(gamma))
    }
}

fn check_shapes(mdp: &FiniteMdp, policy: &FinitePolicy) -> Result<()> {
    if policy.num_actions() != mdp.num_actions() || policy.num_states() != mdp.num_states() {
        return Err(Error::Mismatch(format!(
            "policy is {}x{}, MDP is {}x{}",
            policy.num_states(),
            policy.num_actions(),
            mdp.num_states(),
            mdp.num_actions()
        )));
    }
    Ok(())
}

/// Solves the flow equations by Gauss-Seidel sweeps in state order.
///
/// Self-transitions are divided out of each update, so an absorbing state
/// receives its whole geometric tail `γ·inflow/(1−γ)` in one step. On an
/// insert-only sequence MDP (states in shortlex order) one sweep is exact.
pub fn exact_occupancy(mdp: &FiniteMdp, policy: &FinitePolicy, gamma: f64) -> Result<ExactOccupancy> {
    check_discount(gamma, false)?;
    check_shapes(mdp, policy)?;
    let ns = mdp.num_states();
    let na = mdp.num_actions();

    let mut self_w = vec![0.0; ns];
    let mut incoming: Vec<Vec<(usize, f64)>> = vec![Vec::new(); ns];
    for s in 0..ns {
        for a in 0..na {
            let p = policy.prob(s, a);
            if p == 0.0 {
                continue;
            }
            for &(n, q) in mdp.successors(s, a) {
                if n == s {
                    self_w[s] += p * q;
                } else {
                    incoming[n].push((s, p * q));
                }
            }
        }
    }
    let mut source = vec![0.0; ns];
    for &(s, p) in mdp.init() {
        source[s] += (1.0 - gamma) * p;
    }

    let mut d = vec![0.0; ns];
    let mut converged = false;
    let mut change = f64::INFINITY;
    for _ in 0..DEFAULT_MAX_ITERS {
        change = 0.0f64;
        for s in 0..ns {
            let inflow: f64 = incoming[s].iter().map(|&(p, w)| d[p] * w).sum();
            let v = (source[s] + gamma * inflow) / (1.0 - gamma * self_w[s]);
            change = change.max((v - d[s]).abs());
            d[s] = v;
        }
        if change <= 1e-16 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            iterations: DEFAULT_MAX_ITERS,
            residual: change,
        });
    }

    let mut pair = vec![0.0; ns * na];
    for s in 0..ns {
        for a in 0..na {
            pair[s * na + a] = d[s] * policy.prob(s, a);
        }
    }
    let absorbing = (0..ns).map(|s| mdp.is_absorbing(s)).collect();
    Ok(ExactOccupancy {
        gamma,
        num_actions: na,
        pair,
        state: d,
        absorbing,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DivergenceKind {
    Kl,
    ReverseKl,
    Js,
    Chi2,
    Chi2Mixture,
    Tv,
}

impl DivergenceKind {
    pub const ALL: [DivergenceKind; 6] = [
        DivergenceKind::Kl,
        DivergenceKind::ReverseKl,
        DivergenceKind::Js,
        DivergenceKind::Chi2,
        DivergenceKind::Chi2Mixture,
        DivergenceKind::Tv,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DivergenceKind::Kl => "kl",
            DivergenceKind::ReverseKl => "reverse-kl",
            DivergenceKind::Js => "js",
            DivergenceKind::Chi2 => "chi2",
            DivergenceKind::Chi2Mixture => "chi2-mixture",
            DivergenceKind::Tv => "tv",
        }
    }
}

impl fmt::Display for DivergenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DivergenceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s || k.as_str().replace('-', "_") == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown divergence {s:?}")))
    }
}

/// f-divergence between two distributions on the same atoms.
///
/// - `kl`: Σ p ln(p/q)
/// - `reverse-kl`: Σ q ln(q/p)
/// - `js`: ½KL(p‖m) + ½KL(q‖m), m = (p+q)/2
/// - `chi2`: Σ (p−q)²/q
/// - `chi2-mixture`: 2χ²(p‖(p+q)/2) = Σ (p−q)²/(p+q)
/// - `tv`: ½Σ|p−q|
///
/// Conventions: 0·ln(0/0) = 0, positive mass over zero mass is +∞.
pub fn distribution_divergence(p: &[f64], q: &[f64], kind: DivergenceKind) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Mismatch(format!("{} atoms vs {}", p.len(), q.len())));
    }
    let pairs = p.iter().copied().zip(q.iter().copied());
    let v = match kind {
        DivergenceKind::Kl => pairs.map(|(a, b)| xlogy_ratio(a, b)).sum(),
        DivergenceKind::ReverseKl => pairs.map(|(a, b)| xlogy_ratio(b, a)).sum(),
        DivergenceKind::Js => pairs
            .map(|(a, b)| {
                let m = 0.5 * (a + b);
                0.5 * xlogy_ratio(a, m) + 0.5 * xlogy_ratio(b, m)
            })
            .sum(),
        DivergenceKind::Chi2 => pairs
            .map(|(a, b)| {
                if a == b {
                    0.0
                } else if b == 0.0 {
                    f64::INFINITY
                } else {
                    (a - b) * (a - b) / b
                }
            })
            .sum(),
        DivergenceKind::Chi2Mixture => pairs
            .map(|(a, b)| if a == b { 0.0 } else { (a - b) * (a - b) / (a + b) })
            .sum(),
        DivergenceKind::Tv => 0.5 * pairs.map(|(a, b)| (a - b).abs()).sum::<f64>(),
    };
    Ok(v)
}

pub fn occupancy_divergence(p: &ExactOccupancy, q: &ExactOccupancy, kind: DivergenceKind) -> Result<f64> {
    if p.gamma != q.gamma {
        return Err(Error::Mismatch(format!("discounts differ: {} vs {}", p.gamma, q.gamma)));
    }
    if p.num_actions != q.num_actions || p.absorbing != q.absorbing {
        return Err(Error::Mismatch("occupancies live on different state spaces".into()));
    }
    distribution_divergence(&p.atoms(), &q.atoms(), kind)
}

/// Shannon entropy of the occupancy atoms, in nats.
pub fn occupancy_entropy(rho: &ExactOccupancy) -> f64 {
    rho.atoms()
        .into_iter()
        .filter(|&m| m > 0.0)
        .map(|m| -m * m.ln())
        .sum::<f64>()
        .max(0.0)
}

/// `V^θ(s) = Σ_a p(a|s)·(Q(s,a) − log p(a|s))`, skipping zero-probability actions.
pub fn soft_values(q: &[f64], policy: &FinitePolicy) -> Vec<f64> {
    let na = policy.num_actions();
    q.chunks(na)
        .enumerate()
        .map(|(s, row)| {
            policy
                .row(s)
                .iter()
                .zip(row)
                .filter(|(&p, _)| p > 0.0)
                .map(|(&p, &qv)| p * (qv - p.ln()))
                .sum()
        })
        .collect()
}

/// `V(s) = log Σ_a exp Q(s,a)`; equals `V^θ` when θ is the softmax of Q.
pub fn lse_values(q: &[f64], num_actions: usize) -> Vec<f64> {
    q.chunks(num_actions).map(logsumexp).collect()
}

/// `(T^θ Q)(s,a) = Q(s,a) − γ E_{s'}[V^θ(s')]`
pub fn inverse_bellman(mdp: &FiniteMdp, q: &[f64], policy: &FinitePolicy, gamma: f64) -> Result<Vec<f64>> {
    check_discount(gamma, true)?;
    check_shapes(mdp, policy)?;
    check_table(mdp, q)?;
    let v = soft_values(q, policy);
    let na = mdp.num_actions();
    Ok((0..q.len())
        .map(|i| q[i] - gamma * mdp.expect(i / na, i % na, &v))
        .collect())
}

fn check_table(mdp: &FiniteMdp, t: &[f64]) -> Result<()> {
    if t.len() != mdp.num_states() * mdp.num_actions() {
        return Err(Error::Mismatch(format!(
            "table has {} entries, MDP has {} pairs",
            t.len(),
            mdp.num_states() * mdp.num_actions()
        )));
    }
    Ok(())
}

/// Fixed point of `B Q = r + γ E_{s'}[V^θ(s')]`, iterated until the
/// sup-norm update falls below `tol`.
pub fn bellman(mdp: &FiniteMdp, r: &[f64], policy: &FinitePolicy, gamma: f64, tol: f64) -> Result<Vec<f64>> {
    check_discount(gamma, true)?;
    check_shapes(mdp, policy)?;
    check_table(mdp, r)?;
    let na = mdp.num_actions();
    let mut q = r.to_vec();
    if gamma == 0.0 {
        return Ok(q);
    }
    let mut residual = f64::INFINITY;
    for _ in 0..DEFAULT_MAX_ITERS {
        let v = soft_values(&q, policy);
        residual = 0.0f64;
        for i in 0..q.len() {
            let next = r[i] + gamma * mdp.expect(i / na, i % na, &v);
            residual = residual.max((next - q[i]).abs());
            q[i] = next;
        }
        if residual < tol {
            return Ok(q);
        }
    }
    Err(Error::NonConvergence {
        iterations: DEFAULT_MAX_ITERS,
        residual,
    })
}

/// The three quantities that the telescoping identities equate:
///
/// 1. `E_{ρθ}[(T^θ Q)(s,a)] + H_causal(p_θ)` where `H_causal = E_{ρθ}[−log p_θ(a|s)]`
/// 2. `(1−γ) E_{s0}[V^θ(s0)]`
/// 3. `E_{(s,a)~ρ_any, s'~P}[V^θ(s) − γ V^θ(s')]`
pub fn telescoping_check(
    mdp: &FiniteMdp,
    q: &[f64],
    policy_theta: &FinitePolicy,
    rho_any: &ExactOccupancy,
    gamma: f64,
) -> Result<(f64, f64, f64)> {
    check_discount(gamma, false)?;
    if rho_any.gamma() != gamma || rho_any.num_states() != mdp.num_states() {
        return Err(Error::Mismatch("occupancy does not match MDP or discount".into()));
    }
    let rho_theta = exact_occupancy(mdp, policy_theta, gamma)?;
    let r = inverse_bellman(mdp, q, policy_theta, gamma)?;
    let v = soft_values(q, policy_theta);
    let na = mdp.num_actions();

    let mut first = 0.0;
    for (i, &m) in rho_theta.pair_masses().iter().enumerate() {
        let p = policy_theta.prob(i / na, i % na);
        if m > 0.0 && p > 0.0 {
            first += m * (r[i] - p.ln());
        }
    }
    let second: f64 = mdp.init().iter().map(|&(s, p)| (1.0 - gamma) * p * v[s]).sum();
    let mut third = 0.0;
    for (i, &m) in rho_any.pair_masses().iter().enumerate() {
        if m > 0.0 {
            let (s, a) = (i / na, i % na);
            third += m * (v[s] - gamma * mdp.expect(s, a, &v));
        }
    }
    Ok((first, second, third))
}
