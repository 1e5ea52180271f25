//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs at the reduced scale. Set `ACCEPTANCE_ONLY=1,5,9` to run a subset.
//! The process exits non-zero only when a check cannot be carried out at all.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use bsde_stopping::biaslab::{
    bias_experiment_stopping_time, bias_experiment_value_iteration, black_scholes, gradient_variance_experiment,
    LatticePayoff, NoisyExpectationOracle, ThreeDateProblem, VarianceConfig,
};
use bsde_stopping::bounds::{doob_increments_fine, first_increment, lower_bound, martingale_paths, upper_bound, BoundEstimate};
use bsde_stopping::cli;
use bsde_stopping::config::{self, ExperimentConfig};
use bsde_stopping::market::{cholesky, simulate, BlackScholes, ModelSpec, TimeGrid};
use bsde_stopping::neural::{Checkpoint, CheckpointMeta, Mode, StepNetwork};
use bsde_stopping::payoff::{PayoffKind, PayoffSpec};
use bsde_stopping::problem::Problem;
use bsde_stopping::rng::{RandomSpec, Stream};
use bsde_stopping::stats;
use bsde_stopping::trainer::{train_all, Objective};
use ndarray::{Array1, Array2};

const PRESETS: [&str; 4] = ["geobask-d3", "heston-s10", "maxcall-d2", "strangle-d5"];
const BOUND_SEEDS: u64 = 10;

type Outcome = Result<String, String>;
type NamedCheck = (&'static str, fn() -> Outcome);

struct Trained {
    cfg: ExperimentConfig,
    problem: Problem,
    checkpoint: Checkpoint,
    lower: BoundEstimate,
    upper: BoundEstimate,
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wanted = |c: usize| only.as_ref().is_none_or(|v| v.contains(&c));
    let clock = Instant::now();

    let mut trained: BTreeMap<&str, Trained> = BTreeMap::new();
    let needs_training = (1..=5).any(wanted);
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    for (i, name) in PRESETS.iter().enumerate() {
        if !needs_training || !(wanted(i + 1) || wanted(5)) {
            continue;
        }
        match train_preset(name) {
            Ok(t) => {
                trained.insert(name, t);
            }
            Err(e) => {
                eprintln!("{name}: {e}");
                std::process::exit(1);
            }
        }
    }

    let ranges = [
        (1, "geobask-d3", (10.60, 10.73), (10.72, 10.92)),
        (2, "heston-s10", (0.505, 0.525), (0.515, 0.535)),
        (3, "maxcall-d2", (14.00, 14.30), (14.15, 14.50)),
    ];
    for (c, name, lo, hi) in ranges {
        if wanted(c) {
            results.push((c, range_check(&trained[name], lo, hi)));
        }
    }
    if wanted(4) {
        results.push((4, strangle_check(&trained["strangle-d5"])));
    }
    if wanted(5) {
        results.push((5, seed_coverage(&trained)));
    }
    if wanted(6) {
        results.push((6, bias_signs()));
    }
    if wanted(7) {
        results.push((7, variance_ratio()));
    }
    if wanted(8) {
        results.push((8, numerical_suite()));
    }
    if wanted(9) {
        results.push((9, determinism()));
    }

    println!();
    let mut passed = 0;
    for (c, outcome) in &results {
        match outcome {
            Ok(msg) => {
                passed += 1;
                println!("criterion {c}: PASS  {msg}");
            }
            Err(msg) => println!("criterion {c}: FAIL  {msg}"),
        }
    }
    println!("{passed}/{} criteria passed in {:.0} s", results.len(), clock.elapsed().as_secs_f64());
}

fn train_preset(name: &str) -> Result<Trained, String> {
    let cfg = config::preset(name).map_err(|e| e.to_string())?.reduced();
    let problem = cfg.problem()?;
    let t = Instant::now();
    let (checkpoint, _) = train_all(&problem, &cfg.train_plan(), Objective::Bsde).map_err(|e| e.to_string())?;
    let train_s = t.elapsed().as_secs_f64();
    let (lower, upper) = bounds_for(&cfg, &problem, &checkpoint, cfg.bound_seed)?;
    eprintln!(
        "{name}: trained in {train_s:.0} s; lower {:.4} +- {:.4}, upper {:.4} +- {:.4}",
        lower.estimate, lower.halfwidth, upper.estimate, upper.halfwidth
    );
    Ok(Trained { cfg, problem, checkpoint, lower, upper })
}

fn bounds_for(
    cfg: &ExperimentConfig,
    problem: &Problem,
    checkpoint: &Checkpoint,
    seed: u64,
) -> Result<(BoundEstimate, BoundEstimate), String> {
    let lower = lower_bound(checkpoint, problem, cfg.lower_paths, seed).map_err(|e| e.to_string())?.estimate;
    let upper = upper_bound(checkpoint, problem, cfg.upper_paths, seed, &[cfg.substeps])
        .map_err(|e| e.to_string())?
        .remove(0);
    Ok((lower, upper))
}

fn describe(t: &Trained) -> String {
    format!(
        "{}: lower {:.4} (+- {:.4}), upper {:.4} (+- {:.4}), J = {}",
        t.cfg.name, t.lower.estimate, t.lower.halfwidth, t.upper.estimate, t.upper.halfwidth, t.cfg.substeps
    )
}

fn within(v: f64, (a, b): (f64, f64)) -> bool {
    (a..=b).contains(&v)
}

fn range_check(t: &Trained, lo: (f64, f64), hi: (f64, f64)) -> Outcome {
    let (l, u) = (t.lower.estimate, t.upper.estimate);
    let msg = format!("{}; want lower in [{}, {}], upper in [{}, {}]", describe(t), lo.0, lo.1, hi.0, hi.1);
    if within(l, lo) && within(u, hi) && l <= u {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn strangle_check(t: &Trained) -> Outcome {
    let (l, u) = (t.lower.estimate, t.upper.estimate);
    let gap = u - l;
    let band = (11.55, 12.05);
    let msg = format!("{}; gap {gap:.4} (want < 0.25), both in [{}, {}]", describe(t), band.0, band.1);
    if gap < 0.25 && within(l, band) && within(u, band) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn seed_coverage(trained: &BTreeMap<&str, Trained>) -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for name in PRESETS {
        let t = &trained[name];
        let mut hits = 0;
        for s in 0..BOUND_SEEDS {
            let seed = t.cfg.bound_seed + 1 + s;
            let (l, u) = bounds_for(&t.cfg, &t.problem, &t.checkpoint, seed)?;
            if l.estimate - l.halfwidth <= u.estimate + u.halfwidth {
                hits += 1;
            }
        }
        ok &= hits == BOUND_SEEDS;
        parts.push(format!("{name} {hits}/{BOUND_SEEDS}"));
    }
    let msg = format!("L - hw <= U + hw over bound seeds: {}", parts.join(", "));
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn bias_signs() -> Outcome {
    let problem = ThreeDateProblem::standard_put(20).map_err(|e| e.to_string())?;
    let oracle = NoisyExpectationOracle { eta: 0.5 };
    let random = RandomSpec::new(1, Stream::BiasLab);
    let vi = bias_experiment_value_iteration(&problem, oracle, 100_000, random.derive(0));
    let st = bias_experiment_stopping_time(&problem, oracle, 100_000, random.derive(1));
    let msg = format!(
        "eta 0.5, 1e5 replications: value iteration {:+.5} (z = {:.1}), stopping time {:+.5} (z = {:.1})",
        vi.mean_bias,
        vi.z(),
        st.mean_bias,
        st.z()
    );
    if vi.z() > 4.0 && st.z() < -4.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn variance_ratio() -> Outcome {
    let cfg = VarianceConfig::standard_put(1_000_000, RandomSpec::new(1, Stream::BiasLab).derive(99));
    let dt = cfg.horizon / cfg.steps as f64;
    let r = gradient_variance_experiment(&cfg).map_err(|e| e.to_string())?;
    let msg = format!("dt = {dt}, 1e6 samples: ratio {:.2} (least squares {:.4e}, martingale {:.4e})", r.ratio, r.var_ls, r.var_bsde);
    if r.ratio > 2.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn numerical_suite() -> Outcome {
    let checks: [NamedCheck; 6] = [
        ("finite differences", fd_check),
        ("cholesky", cholesky_check),
        ("telescoping", telescoping_check),
        ("centering", centering_check),
        ("fine/coarse", coarsening_check),
        ("european", european_check),
    ];
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, f) in checks {
        match f() {
            Ok(m) => parts.push(format!("{name} ok ({m})")),
            Err(m) => {
                ok = false;
                parts.push(format!("{name} FAILED ({m})"));
            }
        }
    }
    let msg = parts.join("; ");
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Backprop against central differences of `sum(a C) + sum(b G)`.
fn fd_check() -> Outcome {
    let d = 3;
    let mut net = StepNetwork::new(d, &[6, 6], false);
    net.xavier_init(RandomSpec::new(5, Stream::Init));
    // move batch-norm scales away from 1 so every parameter matters
    for bn in net.norms_mut() {
        bn.gamma.iter_mut().enumerate().for_each(|(i, g)| *g = 0.7 + 0.1 * i as f64);
        bn.beta.iter_mut().enumerate().for_each(|(i, b)| *b = 0.05 * i as f64 - 0.1);
    }
    net.set_mode(Mode::Training);
    let rows = 16;
    let x = Array2::from_shape_fn((rows, d), |(i, j)| 90.0 + ((i * 7 + j * 3) % 11) as f64 * 2.5);
    let phi = Array1::from_shape_fn(rows, |i| (i as f64 * 0.37).sin());
    let a = Array1::from_shape_fn(rows, |i| ((i * 5) % 7) as f64 / 7.0 - 0.4);
    let b = Array2::from_shape_fn((rows, d), |(i, j)| ((i + 2 * j) % 5) as f64 / 5.0 - 0.5);
    let objective = |net: &mut StepNetwork| -> f64 {
        let (c, g) = net.forward(x.view(), phi.view()).unwrap();
        (&c * &a).sum() + (&g * &b).sum()
    };
    objective(&mut net);
    let grads = net.backward(a.view(), b.view()).map_err(|e| e.to_string())?;
    let base = net.flat_params();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut kinks = 0;
    for p in 0..base.len() {
        let mut eval = |delta: f64| {
            let mut q = base.clone();
            q[p] += delta;
            net.set_flat_params(&q).unwrap();
            objective(&mut net)
        };
        let (f0, fp, fm) = (eval(0.0), eval(h), eval(-h));
        let (fwd, bwd) = ((fp - f0) / h, (f0 - fm) / h);
        let scale = 1.0 + grads[p].abs();
        if (fwd - bwd).abs() > 1e-4 * scale {
            // a ReLU switches inside the probe; the derivative is one-sided
            kinks += 1;
            continue;
        }
        worst = worst.max(((fp - fm) / (2.0 * h) - grads[p]).abs() / scale);
    }
    net.set_flat_params(&base).unwrap();
    let msg = format!("max relative error {worst:.1e} over {} parameters, {kinks} at kinks", base.len());
    if worst < 1e-6 && kinks * 20 < base.len() {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn cholesky_check() -> Outcome {
    let cfg = config::preset("strangle-d5").map_err(|e| e.to_string())?;
    let n = cfg.dim;
    let sigma = Array2::from_shape_fn((n, n), |(i, j)| cfg.volatility_matrix[i][j]);
    let cov = sigma.dot(&sigma.t());
    let l = cholesky(&cov).map_err(|e| e.to_string())?;
    let err = (&l.dot(&l.t()) - &cov).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let msg = format!("max |L L^T - A| = {err:.1e}");
    if err < 1e-12 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn small_trained() -> Result<(Problem, Checkpoint), String> {
    let mut cfg = config::preset("geobask-d3").map_err(|e| e.to_string())?.reduced();
    cfg.steps = 10;
    cfg.horizon = 0.4;
    cfg.batch = 512;
    cfg.steps_per_epoch = 20;
    let problem = cfg.problem()?;
    let (ck, _) = train_all(&problem, &cfg.train_plan(), Objective::Bsde).map_err(|e| e.to_string())?;
    Ok((problem, ck))
}

fn telescoping_check() -> Outcome {
    let (problem, ck) = small_trained()?;
    let paths = simulate(&problem.model, &problem.grid, 4096, RandomSpec::new(3, Stream::Upper), true);
    let m = martingale_paths(&ck, &problem, &paths).map_err(|e| e.to_string())?;
    let first = first_increment(&ck, &problem, &paths).map_err(|e| e.to_string())?;
    let mut total = first.clone();
    for k in 1..problem.steps() {
        let inc = doob_increments_fine(&ck, &problem, &paths, k).map_err(|e| e.to_string())?;
        total.iter_mut().zip(&inc).for_each(|(t, v)| *t += v);
    }
    let n = problem.steps();
    let err = (0..paths.count())
        .map(|i| (total[i] - m.values[[i, n]]).abs() / (1.0 + m.values[[i, n]].abs()))
        .fold(0.0, f64::max);
    let msg = format!("max relative |sum of increments - M_N| = {err:.1e}");
    if err < 1e-12 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn centering_check() -> Outcome {
    let (problem, ck) = small_trained()?;
    let paths = simulate(&problem.model, &problem.grid, 8192, RandomSpec::new(4, Stream::Upper), true);
    let first = first_increment(&ck, &problem, &paths).map_err(|e| e.to_string())?;
    let m = stats::mean(&first).abs();
    let msg = format!("|mean(M_1 - M_0)| = {m:.1e}");
    if m < 1e-12 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn coarsening_check() -> Outcome {
    let cfg = config::preset("geobask-d3").map_err(|e| e.to_string())?.reduced();
    let problem = cfg.problem()?;
    let fine = simulate(&problem.model, &problem.grid, 512, RandomSpec::new(6, Stream::Upper), true);
    let j = fine.substeps().ok_or("no fine grid")?;
    let mut worst: f64 = 0.0;
    for level in [1, 2, j] {
        let coarse = fine.coarsen(&problem.model, level).map_err(|e| e.to_string())?;
        let ratio = j / level;
        for i in 0..fine.count() {
            for k in 0..problem.steps() {
                for c in 0..level {
                    let got = coarse.fine_increment(i, k, c).ok_or("coarse fine data")?;
                    for (dim, &g) in got.iter().enumerate() {
                        let want: f64 = (0..ratio).map(|r| fine.fine_increment(i, k, c * ratio + r).unwrap()[dim]).sum();
                        worst = worst.max((g - want).abs());
                    }
                }
            }
        }
        if level == j && coarse.fine_increment(0, 0, 0) != fine.fine_increment(0, 0, 0) {
            return Err("identity coarsening changed the increments".into());
        }
    }
    let msg = format!("max |coarse dW - sum of fine dW| = {worst:.1e}");
    if worst < 1e-12 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn european_check() -> Outcome {
    let model = ModelSpec::BlackScholes(BlackScholes::uniform(0.0, 0.0, 0.25, 0.0, vec![100.0]).map_err(|e| e.to_string())?);
    let payoff = PayoffSpec::new(PayoffKind::GeometricBasketCall, 100.0, 0.0, 1).map_err(|e| e.to_string())?;
    let grid = TimeGrid::new(2.0, 50, 1).map_err(|e| e.to_string())?;
    let problem = Problem::new(model, payoff, grid).map_err(|e| e.to_string())?;
    // a continuation value no reward reaches: never stop before maturity
    let mut ck = Checkpoint::new(CheckpointMeta {
        dim: 1,
        widths: vec![2, 2],
        input_norm: false,
        steps: problem.steps(),
        horizon: 2.0,
        seed: 0,
        config_hash: "european".into(),
        objective: "none".into(),
    });
    for k in 1..problem.steps() {
        let mut net = StepNetwork::new(1, &[2, 2], false);
        net.value.output.bias.fill(1e12);
        net.set_mode(Mode::Evaluation);
        ck.set(k, net);
    }
    let lb = lower_bound(&ck, &problem, 1_000_000, 17).map_err(|e| e.to_string())?.estimate;
    let exact = black_scholes(100.0, 0.0, 0.0, 0.25, 2.0, LatticePayoff::Call { strike: 100.0 });
    let z = (lb.estimate - exact) / lb.stderr();
    let msg = format!("{:.4} vs {exact:.4}, z = {z:.2}", lb.estimate);
    if z.abs() < 4.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Two identical `run-experiment` invocations must produce identical
/// checkpoints and identical CSVs apart from wall-clock columns.
fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let runs: Vec<_> = ["a", "b"].iter().map(|r| dir.path().join(r)).collect();
    for out in &runs {
        let out = out.display().to_string();
        cli::run(["bsde-stopping", "run-experiment", "geobask-d3", "--reduced", "--out", &out]).map_err(|e| e.to_string())?;
    }
    let files = ["checkpoint/manifest.json", "checkpoint/tensors.bin", "config.toml", "results.csv", "training_report.csv"];
    for f in files {
        let (a, b) = (read(&runs[0].join(f))?, read(&runs[1].join(f))?);
        let same = if f.ends_with(".csv") { strip_wall(&a) == strip_wall(&b) } else { a == b };
        if !same {
            return Err(format!("{f} differs between runs"));
        }
    }
    Ok(format!("{} artifacts identical across two runs (wall_ms ignored)", files.len()))
}

fn read(p: &Path) -> Result<Vec<u8>, String> {
    fs::read(p).map_err(|e| format!("{}: {e}", p.display()))
}

fn strip_wall(csv_bytes: &[u8]) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_reader(csv_bytes);
    let headers = r.headers().unwrap().clone();
    let wall: Vec<usize> = headers.iter().enumerate().filter(|(_, h)| *h == "wall_ms").map(|(i, _)| i).collect();
    r.records()
        .map(|rec| {
            rec.unwrap()
                .iter()
                .enumerate()
                .filter(|(i, _)| !wall.contains(i))
                .map(|(_, v)| v.to_string())
                .collect()
        })
        .collect()
}
