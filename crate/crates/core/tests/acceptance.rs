//! End-to-end acceptance checks. Runs without the libtest harness so that
//! every check prints exactly one status line, pass or fail.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seqmatch::divergence::{scaled_phi, PhiKind, PhiSpec};
use seqmatch::evalx::{chain_experiment, data_support, diversity, rep_n, sample_rates};
use seqmatch::objective::{
    exact_sm_objective, gradcheck_random, index_all, sm_loss, weighted_nll, ObjectiveConfig,
};
use seqmatch::occupancy::{
    bellman, data_policy, exact_occupancy, inverse_bellman, telescoping_check, FiniteMdp, FinitePolicy, DEFAULT_TOL,
};
use seqmatch::policy::{sample_many, to_finite_policy, SampleConfig, TabularPolicy};
use seqmatch::preprocess::{encode_actions, state_views, truncate_to_context};
use seqmatch::seq_mdp::{EditAction, SeqSpace, SeqState, Source, Token, Trajectory, Vocab, DEFAULT_STATE_BUDGET};
use seqmatch::toy;
use seqmatch::trainer::{run_training, train, ObjectiveKind, TrainConfig};

type Check = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)*) => {
        if !$cond {
            return Err(format!($($fmt)*));
        }
    };
}

fn toy_space() -> Arc<SeqSpace> {
    Arc::new(SeqSpace::new(toy::vocab(), toy::CONTEXT_LEN, DEFAULT_STATE_BUDGET).unwrap())
}

fn random_logits(space: &Arc<SeqSpace>, rng: &mut ChaCha8Rng, scale: f64) -> TabularPolicy {
    let n = space.num_states() * space.num_actions();
    let logits = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    TabularPolicy::from_logits(space.clone(), logits).unwrap()
}

fn within(elapsed: Duration, limit_s: u64) -> std::result::Result<(), String> {
    if elapsed > Duration::from_secs(limit_s) {
        Err(format!("took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64()))
    } else {
        Ok(())
    }
}

/// Stack replay written independently of the library's state tracking.
fn replay(actions: &[EditAction]) -> Vec<Vec<Token>> {
    let mut stack: Vec<Token> = Vec::new();
    let mut out = Vec::with_capacity(actions.len());
    for &a in actions {
        match a {
            EditAction::Backspace => {
                stack.pop();
            }
            EditAction::Insert(i) => stack.push(Token::Sym(i)),
            EditAction::Eos => stack.push(Token::Eos),
        }
        out.push(stack.clone());
    }
    out
}

fn check_mask_reconstruction() -> Check {
    let start = Instant::now();
    let vocab = Vocab::new(["p", "q", "r", "s"]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut rows, mut consecutive, mut at_bos) = (0usize, 0usize, 0usize);
    for _ in 0..10_000 {
        let len = rng.gen_range(1..=64);
        let rate = rng.gen_range(0.0..=0.3);
        let mut actions = Vec::with_capacity(len);
        for i in 0..len {
            if i + 1 == len && rng.gen_bool(0.5) {
                actions.push(EditAction::Eos);
            } else if rng.gen_bool(rate) {
                actions.push(EditAction::Backspace);
            } else {
                actions.push(EditAction::Insert(rng.gen_range(0..vocab.len() as u32)));
            }
        }
        let batch = encode_actions(&vocab, &actions, 66).map_err(|e| e.to_string())?;
        let views = state_views(&actions);
        ensure!(views.len() == actions.len() + 1, "{} state views for {} actions", views.len(), actions.len());
        let oracle = replay(&actions);
        ensure!(batch.reconstruct(&vocab, 0).map_err(|e| e.to_string())? == SeqState::root(), "row 0 is not [bos]");
        let mut depth = 0usize;
        for (t, a) in actions.iter().enumerate() {
            if a.is_backspace() {
                if depth == 0 {
                    at_bos += 1;
                }
                if t > 0 && actions[t - 1].is_backspace() {
                    consecutive += 1;
                }
                depth = depth.saturating_sub(1);
            } else {
                depth += 1;
            }
            let got = batch.reconstruct(&vocab, t + 1).map_err(|e| e.to_string())?;
            ensure!(got == views[t + 1], "row {} reconstructs {:?}, state view {:?}", t + 1, got, views[t + 1]);
            ensure!(got.payload() == oracle[t].as_slice(), "row {} disagrees with stack replay", t + 1);
            rows += 1;
        }
    }
    ensure!(consecutive > 0 && at_bos > 0, "generator missed edge cases");
    within(start.elapsed(), 30)?;
    Ok(format!("{rows} rows, {consecutive} consecutive backspaces, {at_bos} at bos"))
}

fn check_gradients() -> Check {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for kind in PhiKind::ALL {
        for trial in 0..100u64 {
            let r = gradcheck_random(kind, 1000 + trial).map_err(|e| e.to_string())?;
            ensure!(r.rel_error < 1e-5, "{kind} trial {trial}: relative error {:e}", r.rel_error);
            worst = worst.max(r.rel_error);
        }
    }
    within(start.elapsed(), 60)?;
    Ok(format!("400 instances, max relative error {worst:.2e}"))
}

fn random_finite_policy(rng: &mut ChaCha8Rng, ns: usize, na: usize) -> FinitePolicy {
    let mut probs = Vec::with_capacity(ns * na);
    for _ in 0..ns {
        let row: Vec<f64> = (0..na).map(|_| rng.gen_range(0.05..1.0)).collect();
        let z: f64 = row.iter().sum();
        probs.extend(row.iter().map(|p| p / z));
    }
    FinitePolicy::new(na, probs).unwrap()
}

fn check_identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut worst_trip, mut worst_tel) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let ns = rng.gen_range(2..12);
        let na = rng.gen_range(1..5);
        let absorbing = rng.gen_range(0..ns.min(3));
        let mdp = FiniteMdp::random(&mut rng, ns, na, absorbing);
        let q: Vec<f64> = (0..ns * na).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let pol = random_finite_policy(&mut rng, ns, na);
        let other = random_finite_policy(&mut rng, ns, na);
        for g in [0.5, 0.9, 0.99] {
            let r = inverse_bellman(&mdp, &q, &pol, g).map_err(|e| e.to_string())?;
            let back = bellman(&mdp, &r, &pol, g, DEFAULT_TOL).map_err(|e| e.to_string())?;
            let trip = q.iter().zip(&back).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            ensure!(trip < 1e-9, "round trip error {trip:e} at γ={g}");
            worst_trip = worst_trip.max(trip);
            let rho = exact_occupancy(&mdp, &other, g).map_err(|e| e.to_string())?;
            let (a, b, c) = telescoping_check(&mdp, &q, &pol, &rho, g).map_err(|e| e.to_string())?;
            let gap = (a - b).abs().max((b - c).abs()).max((a - c).abs());
            ensure!(gap < 1e-9, "telescoping gap {gap:e} at γ={g}: {a} {b} {c}");
            worst_tel = worst_tel.max(gap);
        }
    }
    Ok(format!("150 cases, round trip {worst_trip:.1e}, telescoping {worst_tel:.1e}"))
}

fn check_chain() -> Check {
    let mut cases = 0;
    for n in 1..=20 {
        for eps in [0.01, 0.1, 0.3] {
            let r = chain_experiment(n, eps, 0.9).map_err(|e| e.to_string())?;
            let kl = -(n as f64) * (1.0 - eps).ln();
            ensure!((r.joint.kl - kl).abs() < 1e-9, "n={n} ε={eps}: KL {} vs {kl}", r.joint.kl);
            ensure!(r.joint.reverse_kl == f64::INFINITY, "n={n} ε={eps}: reverse KL {}", r.joint.reverse_kl);
            let p = (1.0 - eps).powi(n as i32);
            ensure!((r.completion_prob - p).abs() < 1e-12, "n={n} ε={eps}: completion {} vs {p}", r.completion_prob);
            cases += 1;
        }
    }
    Ok(format!("{cases} (n, ε) cases"))
}

fn toy_trajectories() -> Vec<Trajectory> {
    toy::sequences().iter().map(|s| truncate_to_context(s, toy::CONTEXT_LEN).unwrap()).collect()
}

fn check_small_alpha() -> Check {
    let space = toy_space();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let p = random_logits(&space, &mut rng, 1.0);
    let data = toy_trajectories();
    let idx = index_all(&space, &data, Source::Data).map_err(|e| e.to_string())?;
    let mut ratios = Vec::new();
    for kind in PhiKind::ALL {
        let g = 0.9;
        let target = weighted_nll(&p, &idx, g).map_err(|e| e.to_string())?;
        let mut prev = None;
        for alpha in [1e-2, 5e-3, 2.5e-3] {
            let mut c = ObjectiveConfig::new(PhiSpec::new(kind, alpha).unwrap(), g).unwrap();
            c.include_model_term = false;
            let err = (sm_loss(&p, &data, &[], &c).map_err(|e| e.to_string())?.total - target).abs();
            if let Some(prev) = prev {
                let ratio = err / prev;
                ensure!((0.4..=0.6).contains(&ratio), "{kind} α={alpha}: error ratio {ratio}");
                ratios.push(ratio);
            }
            prev = Some(err);
        }
        let g = 0.999;
        let target = weighted_nll(&p, &idx, g).map_err(|e| e.to_string())?;
        let mut c = ObjectiveConfig::new(PhiSpec::new(kind, 1e-4).unwrap(), g).unwrap();
        c.include_model_term = false;
        let got = sm_loss(&p, &data, &[], &c).map_err(|e| e.to_string())?.total;
        let rel = (got - target).abs() / target.abs();
        ensure!(rel < 0.01, "{kind} γ=0.999 α=1e-4: relative gap {rel}");
    }
    let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = ratios.iter().cloned().fold(0.0, f64::max);
    Ok(format!("halving ratios in [{lo:.3}, {hi:.3}]"))
}

fn check_training() -> Check {
    let start = Instant::now();
    let cfg = TrainConfig::default();
    let ds = seqmatch::trainer::load_train_dataset(&cfg).map_err(|e| e.to_string())?;
    let out = train(&ds, &cfg, |_, _| Ok(())).map_err(|e| e.to_string())?;
    let s = &out.summary;
    let kl = s.kl_exact_final.ok_or("no final KL")?;
    let at_end = s.chi2_mixture_at_anneal_end.ok_or("no χ²-mixture at anneal_end")?;
    let last = s.chi2_mixture_final.ok_or("no final χ²-mixture")?;
    ensure!(s.steps <= 2000, "{} steps", s.steps);
    ensure!(kl < 0.01, "final KL {kl}");
    ensure!(last < at_end, "χ²-mixture {last} at the end, {at_end} at anneal_end");
    within(start.elapsed(), 120)?;
    Ok(format!("KL {kl:.5} after {} steps, χ²-mixture {at_end:.5} -> {last:.5}", s.steps))
}

fn recovery_config(objective: ObjectiveKind, seed: u64) -> TrainConfig {
    TrainConfig {
        objective,
        seed,
        eval_every: 1000,
        ..TrainConfig::default()
    }
}

fn check_recovery() -> Check {
    let data = toy::dataset();
    let support = data_support(&data, toy::CONTEXT_LEN).map_err(|e| e.to_string())?;
    let ds = seqmatch::trainer::load_train_dataset(&TrainConfig::default()).map_err(|e| e.to_string())?;
    let noisy = SampleConfig { inject_prob: 0.1, max_steps: 1024, ..Default::default() };
    let clean = SampleConfig { max_steps: 1024, ..Default::default() };
    let mut means = Vec::new();
    let mut sm_bs = (0.0, 0.0);
    for kind in [ObjectiveKind::Sm, ObjectiveKind::Bc, ObjectiveKind::Mle] {
        let mut total = 0.0;
        for seed in 0..3u64 {
            let policy = train(&ds, &recovery_config(kind, seed), |_, _| Ok(())).map_err(|e| e.to_string())?.policy;
            let r = sample_rates(&policy, &support, 10_000, &noisy, 77 + seed).map_err(|e| e.to_string())?;
            total += r.valid_rate();
            if kind == ObjectiveKind::Sm {
                let c = sample_rates(&policy, &support, 10_000, &clean, 77 + seed).map_err(|e| e.to_string())?;
                sm_bs.0 += r.backspace_rate() / 3.0;
                sm_bs.1 += c.backspace_rate() / 3.0;
            }
        }
        means.push(total / 3.0);
    }
    let (sm, bc, mle) = (means[0], means[1], means[2]);
    ensure!(sm >= bc && bc >= mle, "valid rates SM {sm:.4}, BC {bc:.4}, MLE {mle:.4}");
    ensure!(sm_bs.0 > sm_bs.1, "SM backspace rate {:.4} with injection, {:.4} without", sm_bs.0, sm_bs.1);
    Ok(format!(
        "valid rates SM {sm:.4} >= BC {bc:.4} >= MLE {mle:.4}; SM backspace rate {:.4} vs {:.4}",
        sm_bs.0, sm_bs.1
    ))
}

fn check_estimator() -> Check {
    let space = toy_space();
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let p = random_logits(&space, &mut rng, 0.7);
    let g = toy::CONTEXT_LEN as f64 / (toy::CONTEXT_LEN as f64 + 1.0);
    let dataset = toy::dataset();
    let mdp = FiniteMdp::from_space(&space);
    let rho_d = exact_occupancy(&mdp, &data_policy(&space, &dataset).unwrap(), g).map_err(|e| e.to_string())?;
    let rho_m = exact_occupancy(&mdp, &to_finite_policy(&p, 1.0, 1.0), g).map_err(|e| e.to_string())?;
    let n = 10_000;
    // data side in exact proportions, model side sampled
    let data: Vec<Trajectory> = toy_trajectories()
        .into_iter()
        .flat_map(|t| std::iter::repeat(t).take(n / toy::STRINGS.len()))
        .collect();
    let model = sample_many(&p, &vec![SeqState::root(); n], &SampleConfig { max_steps: 10_000, ..Default::default() }, 9)
        .map_err(|e| e.to_string())?;
    ensure!(model.iter().all(Trajectory::terminated), "unterminated model samples");
    let mut worst_mc = 0.0f64;
    for kind in PhiKind::ALL {
        let c = ObjectiveConfig::new(PhiSpec::new(kind, 0.5).unwrap(), g).unwrap();
        let mc = sm_loss(&p, &data, &model, &c).map_err(|e| e.to_string())?.total;
        let exact = exact_sm_objective(&p, &rho_d, &rho_m, &c).map_err(|e| e.to_string())?.total;
        ensure!((mc - exact).abs() < 1e-2, "{kind}: Monte Carlo {mc} vs exact {exact}");
        worst_mc = worst_mc.max((mc - exact).abs());
    }

    // closed-form terminal tail against an explicit 10^4-step sum
    let idx = index_all(&space, &toy_trajectories(), Source::Data).map_err(|e| e.to_string())?;
    let mut worst_tail = 0.0f64;
    for kind in PhiKind::ALL {
        let c = ObjectiveConfig::new(PhiSpec::new(kind, 0.3).unwrap(), g).unwrap();
        let spec = &c.phi;
        let reg = if spec.is_mixture() { spec.alpha * spec.mixture_beta * spec.mixture_c } else { 0.0 };
        for (tr, it) in toy_trajectories().iter().zip(&idx) {
            let l = sm_loss(&p, std::slice::from_ref(tr), &[], &c).map_err(|e| e.to_string())?;
            let mut step_reg = 0.0;
            let mut d = 1.0;
            for &(s, a, nx) in &it.steps {
                let x = p.row(s)[a] - g * p.value(nx);
                step_reg += d * reg * x * x;
                d *= g;
            }
            let closed = l.eos_term + l.regularizer - step_reg;
            let v = p.value(it.terminal.ok_or("unterminated data")?);
            let x = (1.0 - g) * v;
            let mut disc = g.powi(it.steps.len() as i32);
            let mut explicit = 0.0;
            for _ in 0..10_000 {
                explicit += disc * (-scaled_phi(spec, x) + 0.5 * x + reg * x * x);
                disc *= g;
            }
            let gap = (closed - explicit).abs();
            ensure!(gap < 1e-8, "{kind}: terminal tail {closed} vs truncated sum {explicit}");
            worst_tail = worst_tail.max(gap);
        }
    }
    Ok(format!("Monte Carlo gap {worst_mc:.2e}, terminal tail gap {worst_tail:.1e}"))
}

fn brute_rep(toks: &[Token], n: usize) -> f64 {
    let syms: Vec<Token> = toks.iter().copied().filter(|t| matches!(t, Token::Sym(_))).collect();
    if syms.len() < n {
        return 0.0;
    }
    let total = syms.len() - n + 1;
    // a gram is new when no identical gram starts earlier
    let unique = (0..total).filter(|&i| !(0..i).any(|j| syms[j..j + n] == syms[i..i + n])).count();
    100.0 * (1.0 - unique as f64 / total as f64)
}

fn check_metrics() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    for _ in 0..1000 {
        let len = rng.gen_range(0..40);
        let k = rng.gen_range(1..5);
        let seq: Vec<Token> = (0..len).map(|_| Token::Sym(rng.gen_range(0..k))).collect();
        for n in 2..=4 {
            let (got, _) = rep_n(&seq, n);
            let want = brute_rep(&seq, n);
            ensure!(got == want, "rep-{n} {got} vs brute force {want} on {seq:?}");
        }
        let want: f64 = (2..=4).map(|n| 1.0 - brute_rep(&seq, n) / 100.0).product();
        ensure!(diversity(&seq) == want, "diversity {} vs {want}", diversity(&seq));
    }
    let a5 = vec![Token::Sym(0); 5];
    let r2 = rep_n(&a5, 2).0;
    let d = diversity(&a5);
    ensure!(r2 == 75.0, "rep-2 of a a a a a is {r2}");
    ensure!((d - 0.04167).abs() < 5e-6, "diversity of a a a a a is {d}");
    Ok(format!("1000 sequences exact; rep-2 {r2}, diversity {d:.5}"))
}

fn check_determinism() -> Check {
    let cfg = TrainConfig { steps: 600, ..TrainConfig::default() };
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (_, fa) = run_training(&cfg, a.path()).map_err(|e| e.to_string())?;
    let (_, fb) = run_training(&cfg, b.path()).map_err(|e| e.to_string())?;
    let x = std::fs::read(&fa.metrics).map_err(|e| e.to_string())?;
    let y = std::fs::read(&fb.metrics).map_err(|e| e.to_string())?;
    ensure!(!x.is_empty() && x == y, "metrics CSVs differ");
    Ok(format!("{} identical bytes", x.len()))
}

fn main() {
    let checks: [(&str, fn() -> Check); 10] = [
        ("mask reconstruction", check_mask_reconstruction),
        ("gradient correctness", check_gradients),
        ("bellman identities", check_identities),
        ("chain closed forms", check_chain),
        ("small-alpha reduction", check_small_alpha),
        ("occupancy matching", check_training),
        ("backspace recovery", check_recovery),
        ("estimator consistency", check_estimator),
        ("metric oracle", check_metrics),
        ("determinism", check_determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in checks.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(msg)
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("acceptance {:>2} {name:<24} PASS ({secs:.1}s) {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("acceptance {:>2} {name:<24} FAIL ({secs:.1}s) {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
