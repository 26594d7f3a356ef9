//! Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.
//! Tolerances are pinned here; run with `--nocapture` to see the lines.

use std::fs;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use hbridge::verify::{gradient_suite, oracle_suite, random_mixture, reconstruction_suite, Check};
use hbridge::{build_schedule, ddim_invert, ddim_sample, vector, Condition, ScheduleRecipe};
use hbridge_cli::config::ExperimentConfig;
use hbridge_cli::runner::{self, CellResult};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 20240;
const ORACLE_CHAINS: usize = 100;
const GRADIENT_PROBES: usize = 100;
const RECON_SEEDS: usize = 32;
const EXACT_TOL: f64 = 1e-12;
const FD_TOL: f64 = 1e-6;
const TWEEDIE_TOL: f64 = 1e-9;
const RECON_TOL: f64 = 1e-9;
const ORACLE_BUDGET: Duration = Duration::from_secs(5);
const REFINEMENT_RATIO: f64 = 0.6;
const POSTERIOR_FLOOR: f64 = 0.9;
const FAITHFULNESS_FRACTION: f64 = 0.15;
const CLASS_DISTANCE: f64 = 4.0;
const MONOTONE_SLACK: f64 = 1e-9;

fn line(n: usize, name: &str, pass: bool, detail: String) {
    println!("[{}] criterion {n:>2}: {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

fn find<'a>(checks: &'a [Check], name: &str) -> &'a Check {
    checks.iter().find(|c| c.name == name).unwrap_or_else(|| panic!("no check named {name}"))
}

fn config(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run_config(name: &str, extra: &str) -> Vec<CellResult> {
    let raw = fs::read_to_string(config(name)).unwrap() + extra;
    let cfg = ExperimentConfig::parse(&raw, name).unwrap();
    runner::run_cells(&cfg.resolve(&raw, name).unwrap()).unwrap()
}

#[test]
fn criterion_01_doob_marginal_identity() {
    let start = Instant::now();
    let checks = oracle_suite(SEED, ORACLE_CHAINS).unwrap();
    let elapsed = start.elapsed();
    let m = find(&checks, "doob marginal identity");
    let c = find(&checks, "tilted terminal law at t=0");
    let worst = m.max_error.max(c.max_error);
    line(
        1,
        "doob marginal identity",
        worst <= EXACT_TOL && m.cases == ORACLE_CHAINS && elapsed < ORACLE_BUDGET,
        format!("{} chains, max error {worst:.2e} <= {EXACT_TOL:.0e}, {:.3}s < 5s", m.cases, elapsed.as_secs_f64()),
    );
}

#[test]
fn criterion_02_h_recursion_vs_paths() {
    let checks = oracle_suite(SEED, ORACLE_CHAINS).unwrap();
    let c = find(&checks, "h recursion vs path enumeration");
    line(
        2,
        "h recursion vs path enumeration",
        c.max_error <= EXACT_TOL && c.cases == 18,
        format!("{} instances, max error {:.2e} <= {EXACT_TOL:.0e}", c.cases, c.max_error),
    );
}

#[test]
fn criterion_03_doob_kernel_rows() {
    let checks = oracle_suite(SEED, ORACLE_CHAINS).unwrap();
    let c = find(&checks, "doob kernel row sums");
    line(
        3,
        "doob kernel row sums",
        c.max_error <= EXACT_TOL,
        format!("{} kernels, max |row sum - 1| {:.2e} <= {EXACT_TOL:.0e}", c.cases, c.max_error),
    );
}

#[test]
fn criterion_04_exact_scores_vs_finite_differences() {
    let checks = gradient_suite(SEED, GRADIENT_PROBES).unwrap();
    let names = [
        "mixture score vs finite differences",
        "classifier h-score vs finite differences",
        "recon h-score vs finite differences",
        "stop-grad reward score vs finite differences",
    ];
    let worst = names.iter().map(|n| find(&checks, n).max_error).fold(0.0, f64::max);
    let cases = names.iter().map(|n| find(&checks, n).cases).min().unwrap();
    line(
        4,
        "exact scores vs finite differences",
        worst <= FD_TOL && cases >= 100,
        format!("4 scores x {cases} probes, max relative error {worst:.2e} <= {FD_TOL:.0e}"),
    );
}

#[test]
fn criterion_05_tweedie_consistency() {
    let checks = gradient_suite(SEED, GRADIENT_PROBES).unwrap();
    let c = find(&checks, "posterior mean: conjugacy vs tweedie");
    line(
        5,
        "tweedie consistency",
        c.max_error <= TWEEDIE_TOL,
        format!("{} probes, max error {:.2e} <= {TWEEDIE_TOL:.0e}", c.cases, c.max_error),
    );
}

#[test]
fn criterion_06_reconstruction_collapse() {
    let checks = reconstruction_suite(SEED, RECON_SEEDS).unwrap();
    let c = find(&checks, "no-op edit reproduces x0");
    line(
        6,
        "no-op edit reproduces x0",
        c.max_error <= RECON_TOL && c.cases == 4 * RECON_SEEDS,
        format!(
            "{} seeds x 2 inversions x 2 engines, max |x0_edit - x0| {:.2e} <= {RECON_TOL:.0e}",
            RECON_SEEDS, c.max_error
        ),
    );
}

#[test]
fn criterion_07_ddim_inversion_convergence() {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let base = build_schedule(1000, &ScheduleRecipe::LinearBeta { beta_min: 1e-4, beta_max: 2e-2 }, 0.0).unwrap();
    let cond = Condition::label(0);
    let mut worst = 0.0f64;
    let mut ok = true;
    for _ in 0..10 {
        let m = random_mixture(&mut rng, 2, 3, 2).unwrap();
        let x0 = m.sample_data(&mut rng, &cond).unwrap();
        let errs: Vec<f64> = [10usize, 50, 250]
            .iter()
            .map(|&n| {
                let s = base.respaced(n).unwrap();
                let rec = ddim_invert(&m, &s, &x0, &cond, 1.0).unwrap();
                let back = ddim_sample(&m, &s, rec.x(n).unwrap(), &cond, 1.0).unwrap();
                vector::dist(&back, &x0)
            })
            .collect();
        for w in errs.windows(2) {
            let r = w[1] / w[0];
            ok &= w[1] < w[0] && r <= REFINEMENT_RATIO;
            worst = worst.max(r);
        }
    }
    line(
        7,
        "ddim round trip converges",
        ok,
        format!("10 mixtures, T 10->50->250, worst ratio {worst:.3} <= {REFINEMENT_RATIO}"),
    );
}

#[test]
fn criterion_08_explicit_implicit_consistency() {
    let gaps: Vec<f64> = [25usize, 50, 100, 200]
        .iter()
        .map(|&t| {
            let raw = fs::read_to_string(config("canonical_edit.toml"))
                .unwrap()
                .replace("steps = 50", &format!("steps = {t}"))
                .replace("mode = \"random\"", "mode = \"deterministic\"")
                .replace("w_edit = 7.5", "w_edit = 10.0")
                .replace("w_hat_orig = 5.0", "w_hat_orig = 9.0")
                .replace("seed_count = 64", "seed_count = 8");
            let mut cfg = ExperimentConfig::parse(&raw, "gap").unwrap();
            cfg.edit.engine = Some("explicit".into());
            let a = runner::run_cells(&cfg.resolve(&raw, "gap").unwrap()).unwrap();
            cfg.edit.engine = Some("implicit".into());
            let b = runner::run_cells(&cfg.resolve(&raw, "gap").unwrap()).unwrap();
            a[0].traces
                .iter()
                .zip(&b[0].traces)
                .flat_map(|(p, q)| p.steps.iter().zip(&q.steps).map(|(u, v)| vector::dist(&u.x_edit, &v.x_edit)))
                .fold(0.0, f64::max)
        })
        .collect();
    let ratios: Vec<f64> = gaps.windows(2).map(|w| w[1] / w[0]).collect();
    let worst = ratios.iter().copied().fold(0.0, f64::max);
    line(
        8,
        "explicit/implicit gap shrinks",
        ratios.iter().all(|&r| r <= REFINEMENT_RATIO),
        format!("gaps {gaps:.3?} over T 25..200, worst ratio {worst:.3} <= {REFINEMENT_RATIO}"),
    );
}

#[test]
fn criterion_09_editing_efficacy() {
    let cells = run_config("canonical_edit.toml", "\n[sweep]\nw_edit = [2.5, 5.0, 7.5, 10.0]\n");
    let means: Vec<f64> = cells.iter().map(|c| c.report.target_posterior.mean).collect();
    let main = &cells[2];
    assert_eq!(main.cell.w_edit, 7.5);
    let post = main.report.target_posterior.mean;
    let faith = main.report.faithfulness.mean;
    let faith_cap = FAITHFULNESS_FRACTION * CLASS_DISTANCE;
    let monotone = means.windows(2).all(|w| w[1] >= w[0] - MONOTONE_SLACK);
    line(
        9,
        "editing efficacy",
        post >= POSTERIOR_FLOOR && faith <= faith_cap && monotone && main.traces.len() == 64,
        format!(
            "64 seeds, posterior {post:.4} >= {POSTERIOR_FLOOR}, faithfulness {faith:.4} <= {faith_cap}, \
             posterior over w_edit 2.5..10 {means:.4?} nondecreasing"
        ),
    );
}

#[test]
fn criterion_10_multi_step_implicit_gain() {
    let cells = run_config("reward_task.toml", "");
    let (k1, k3) = (&cells[0], &cells[1]);
    assert_eq!((k1.cell.implicit_steps, k3.cell.implicit_steps), (1, 3));
    let (p1, p3) = (k1.report.target_posterior.mean, k3.report.target_posterior.mean);
    line(
        10,
        "multi-step implicit gain",
        p3 >= p1 && k1.traces.len() == 64,
        format!("64 seeds, reward task, posterior K=3 {p3:.4} >= K=1 {p1:.4}"),
    );
}

#[test]
fn criterion_11_product_of_experts() {
    let checks = gradient_suite(SEED, GRADIENT_PROBES).unwrap();
    let c = find(&checks, "product of experts: additive, order-invariant");
    line(
        11,
        "product of experts",
        c.max_error <= EXACT_TOL,
        format!("{} random stacks, shuffled sums bit-equal, max deviation {:.2e} <= {EXACT_TOL:.0e}", c.cases, c.max_error),
    );
}

#[test]
fn criterion_12_end_to_end_determinism() {
    let raw = fs::read_to_string(config("w_hat_sweep.toml")).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = runner::run(&raw, "w_hat_sweep.toml", a.path()).unwrap().manifest;
    let mb = runner::run(&raw, "w_hat_sweep.toml", b.path()).unwrap().manifest;
    let mut identical = ma == mb && ma.stale(a.path()).unwrap().is_empty();
    let mut files = 0;
    for art in ma.artifacts.iter().map(|x| x.path.as_str()).chain(["manifest.toml"]) {
        identical &= fs::read(a.path().join(art)).unwrap() == fs::read(b.path().join(art)).unwrap();
        files += 1;
    }
    let csvs = ma.artifacts.iter().filter(|x| x.path.ends_with(".csv")).count();
    line(
        12,
        "end-to-end determinism",
        identical && csvs > 0,
        format!("two runs, {files} files ({csvs} csv) byte-identical"),
    );
}
