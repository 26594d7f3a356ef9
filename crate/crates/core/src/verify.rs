//! Seeded self-check suites: exact discrete references, finite-difference
//! gradient checks and reconstruction checks.
//!
//! Each suite returns one [`Check`] per property with the worst error seen.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::discrete::DiscreteChain;
use crate::error::Result;
use crate::hedit::{run_edit, EditConfig, EngineMode};
use crate::hfunc::{
    classifier_h_score, product_score, recon_h_score, reward_grad_with_eps, tweedie, ClassifierExpert,
    ConditionalExpert, Ctx, FeatureMap, FeatureReward, HExpert, ReconExpert,
};
use crate::inversion::{ddim_invert, ef_invert, InversionMode};
use crate::model::{Component, Condition, MixtureModel};
use crate::schedule::{build_schedule, Schedule, ScheduleRecipe};
use crate::vector;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
    pub cases: usize,
}

impl Check {
    fn new(name: &str, max_error: f64, tolerance: f64, cases: usize) -> Self {
        Self { name: name.into(), max_error, tolerance, cases }
    }

    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

/// `h(x_t = i, t) = sum over paths i -> x_0 of the path probability times h0(x_0)`,
/// by explicit enumeration of all `S^t` paths.
pub fn h_by_paths(chain: &DiscreteChain, h0: &[f64], t: usize, i: usize) -> f64 {
    fn walk(chain: &DiscreteChain, h0: &[f64], t: usize, state: usize, prob: f64) -> f64 {
        if t == 0 {
            return prob * h0[state];
        }
        let row = &chain.kernel(t)[state];
        (0..chain.states()).map(|j| walk(chain, h0, t - 1, j, prob * row[j])).sum()
    }
    walk(chain, h0, t, i, 1.0)
}

fn positive_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.01..5.0)).collect()
}

pub fn oracle_suite(seed: u64, instances: usize) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut marg, mut cor, mut rows) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..instances {
        let s = rng.random_range(2..=6);
        let t = rng.random_range(1..=8);
        let chain = DiscreteChain::random(&mut rng, s, t)?;
        let h0 = positive_vec(&mut rng, s);
        let rep = chain.verify_marginal_identity(&h0)?;
        marg = marg.max(rep.max_abs_error);
        cor = cor.max(rep.corollary_error);
        rows = rows.max(chain.doob_kernel(&chain.h_recursion(&h0)?)?.max_row_error());
    }
    let mut paths = 0.0f64;
    let mut path_cases = 0;
    for s in 2..=4 {
        for t in 1..=6 {
            let chain = DiscreteChain::random(&mut rng, s, t)?;
            let h0 = positive_vec(&mut rng, s);
            let table = chain.h_recursion(&h0)?;
            let norm = chain.doob_kernel(&table)?.max_row_error();
            rows = rows.max(norm);
            for tt in 0..=t {
                for i in 0..s {
                    paths = paths.max((table.h[tt][i] - h_by_paths(&chain, &h0, tt, i)).abs());
                }
            }
            path_cases += 1;
        }
    }
    Ok(vec![
        Check::new("doob marginal identity", marg, 1e-12, instances),
        Check::new("tilted terminal law at t=0", cor, 1e-12, instances),
        Check::new("h recursion vs path enumeration", paths, 1e-12, path_cases),
        Check::new("doob kernel row sums", rows, 1e-12, instances + path_cases),
    ])
}

/// Random labeled mixture with stds in `[0.5, 1.5]`.
pub fn random_mixture(rng: &mut ChaCha8Rng, dim: usize, components: usize, labels: u32) -> Result<MixtureModel<f64>> {
    let comps = (0..components)
        .map(|k| Component {
            weight: rng.random_range(0.2..1.0),
            mean: (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect(),
            std: rng.random_range(0.5..1.5),
            label: (k as u32) % labels,
        })
        .collect();
    MixtureModel::normalized(comps)
}

fn fd_grad(f: &dyn Fn(&[f64]) -> Result<f64>, x: &[f64]) -> Result<Vec<f64>> {
    let h = 1e-5;
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut p = x.to_vec();
        let mut m = x.to_vec();
        p[i] += h;
        m[i] -= h;
        out.push((f(&p)? - f(&m)?) / (2.0 * h));
    }
    Ok(out)
}

/// `|fd - g| / max(|g|, 1e-6)`.
pub fn relative_error(fd: &[f64], g: &[f64]) -> f64 {
    vector::dist(fd, g) / vector::norm(g).max(1e-6)
}

fn suite_schedule() -> Result<Schedule<f64>> {
    build_schedule(100, &ScheduleRecipe::LinearBeta { beta_min: 1e-3, beta_max: 5e-2 }, 1.0)
}

pub fn gradient_suite(seed: u64, probes: usize) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sched = suite_schedule()?;
    let (mut score, mut classifier, mut recon, mut reward, mut twd, mut cond) =
        (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..probes {
        let dim = rng.random_range(1..=3);
        let model = random_mixture(&mut rng, dim, 3, 2)?;
        let ctx = Ctx::new(&model, &sched);
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let t = rng.random_range(0..=sched.steps());
        let c = match rng.random_range(0..3) {
            0 => Condition::Unconditional,
            l => Condition::label(l - 1),
        };

        let g = model.score(&sched, &x, t, &c)?;
        let fd = fd_grad(&|p| model.log_density(&sched, p, t, &c), &x)?;
        score = score.max(relative_error(&fd, &g));

        let label = rng.random_range(0..2);
        let g = classifier_h_score(&ctx, &x, t, label)?;
        let e = ClassifierExpert { label };
        let fd = fd_grad(&|p| e.log_h(&ctx, p, t), &x)?;
        classifier = classifier.max(relative_error(&fd, &g));

        let e = ReconExpert {
            lambda: rng.random_range(0.0..2.0),
            anchor: (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
        };
        let fd = fd_grad(&|p| e.log_h(&ctx, p, t), &x)?;
        recon = recon.max(relative_error(&fd, &recon_h_score(&x, &e)));

        let ce = ConditionalExpert {
            cond_edit: Condition::label(1),
            cond_orig: Condition::label(0),
            w_edit: 7.5,
            w_hat_orig: 5.0,
        };
        let fd = fd_grad(&|p| ce.log_h(&ctx, p, t), &x)?;
        cond = cond.max(relative_error(&fd, &ce.score(&ctx, &x, t)?));

        if t >= 1 {
            let r = FeatureReward {
                map: match rng.random_range(0..3) {
                    0 => FeatureMap::Identity,
                    1 => FeatureMap::SquaredCoords,
                    _ => FeatureMap::Project((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()),
                },
                reference: (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
            };
            let w = rng.random_range(1.0..8.0);
            let ec = Condition::label(rng.random_range(0..2));
            let eps = model.guided_noise(&sched, &x, t, &ec, w)?;
            let g = reward_grad_with_eps(&sched, &x, t, &eps, &r)?;
            let fd = fd_grad(&|p| Ok(r.value(&tweedie(&sched, p, t, &eps)?)), &x)?;
            reward = reward.max(relative_error(&fd, &g));

            let conj = model.x0_posterior_mean(&sched, &x, t, &c)?;
            let tw = tweedie(&sched, &x, t, &model.noise_pred(&sched, &x, t, &c)?)?;
            twd = twd.max(vector::max_abs_diff(&conj, &tw));
        }
    }
    Ok(vec![
        Check::new("mixture score vs finite differences", score, 1e-6, probes),
        Check::new("classifier h-score vs finite differences", classifier, 1e-6, probes),
        Check::new("recon h-score vs finite differences", recon, 1e-6, probes),
        Check::new("stop-grad reward score vs finite differences", reward, 1e-6, probes),
        Check::new("conditional expert score vs finite differences", cond, 1e-6, probes),
        Check::new("posterior mean: conjugacy vs tweedie", twd, 1e-9, probes),
        product_check(&mut rng, probes)?,
    ])
}

/// Order invariance and additivity of expert products on random stacks.
fn product_check(rng: &mut ChaCha8Rng, stacks: usize) -> Result<Check> {
    let sched = suite_schedule()?;
    let mut worst = 0.0f64;
    for _ in 0..stacks {
        let dim = rng.random_range(1..=3);
        let model = random_mixture(rng, dim, 3, 2)?;
        let ctx = Ctx::new(&model, &sched);
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let t = rng.random_range(0..=sched.steps());
        let n = rng.random_range(1..=6);
        let mut experts: Vec<Box<dyn HExpert<f64>>> = Vec::new();
        for _ in 0..n {
            if rng.random_bool(0.5) {
                experts.push(Box::new(ReconExpert {
                    lambda: rng.random_range(0.0..2.0),
                    anchor: (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
                }));
            } else {
                experts.push(Box::new(ClassifierExpert { label: rng.random_range(0..2) }));
            }
        }
        let refs: Vec<&dyn HExpert<f64>> = experts.iter().map(|e| e.as_ref()).collect();
        let total = product_score(&refs, &ctx, &x, t)?;
        let mut shuffled = refs.clone();
        shuffled.shuffle(rng);
        let again = product_score(&shuffled, &ctx, &x, t)?;
        if total != again {
            worst = f64::INFINITY;
        }
        let mut naive = vector::zeros(dim);
        for e in &refs {
            vector::axpy(&mut naive, 1.0, &e.score(&ctx, &x, t)?);
        }
        worst = worst.max(vector::max_abs_diff(&total, &naive) / vector::norm(&naive).max(1.0));
    }
    Ok(Check::new("product of experts: additive, order-invariant", worst, 1e-12, stacks))
}

/// The canonical two-label task in the plane: labels 0 and 1 at `(-2, 0)` and `(2, 0)`.
pub fn canonical_model() -> MixtureModel<f64> {
    MixtureModel::new(vec![
        Component { weight: 0.5, mean: vec![-2.0, 0.0], std: 0.5, label: 0 },
        Component { weight: 0.5, mean: vec![2.0, 0.0], std: 0.5, label: 1 },
    ])
    .expect("canonical model is valid")
}

/// 1000-step linear schedule on `[1e-4, 2e-2]`, respaced to `steps`.
pub fn canonical_schedule(steps: usize, lambda: f64) -> Result<Schedule<f64>> {
    build_schedule(1000, &ScheduleRecipe::LinearBeta { beta_min: 1e-4, beta_max: 2e-2 }, lambda)?.respaced(steps)
}

/// Worst `|x_0^edit - x_0^orig|` over seeds, inversion modes and engine modes when
/// the edit is a no-op, plus the worst telescoping error of the records.
pub fn reconstruction_suite(seed: u64, seeds: usize) -> Result<Vec<Check>> {
    let model = canonical_model();
    let cond = Condition::label(0);
    let mut collapse = 0.0f64;
    let mut telescope = 0.0f64;
    for inv in [InversionMode::Random, InversionMode::Deterministic] {
        let lambda = if inv == InversionMode::Random { 1.0 } else { 0.0 };
        let sched = canonical_schedule(50, lambda)?;
        for s in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(s as u64));
            let x0 = model.sample_data(&mut rng, &cond)?;
            let rec = match inv {
                InversionMode::Random => ef_invert(&model, &sched, &x0, &cond, 1.0, &mut rng)?,
                InversionMode::Deterministic => ddim_invert(&model, &sched, &x0, &cond, 1.0)?,
            };
            telescope = telescope.max(rec.telescoping_error(&model, &sched)?);
            for mode in [EngineMode::Explicit, EngineMode::Implicit] {
                let mut cfg = EditConfig::defaults(inv, cond.clone(), cond.clone());
                cfg.mode = mode;
                cfg.w_hat_orig = cfg.w_edit;
                let tr = run_edit(&model, &sched, &rec, &cfg)?;
                collapse = collapse.max(vector::max_abs_diff(&tr.x0_edit, &x0));
            }
        }
    }
    Ok(vec![
        Check::new("inversion telescoping", telescope, 1e-9, 2 * seeds),
        Check::new("no-op edit reproduces x0", collapse, 1e-9, 4 * seeds),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_enumeration_small_case() {
        let c = DiscreteChain::new(vec![vec![vec![0.5, 0.5], vec![0.2, 0.8]]], vec![0.5, 0.5]).unwrap();
        assert!((h_by_paths(&c, &[1.0, 3.0], 1, 0) - 2.0).abs() < 1e-15);
        assert!((h_by_paths(&c, &[1.0, 3.0], 1, 1) - 2.6).abs() < 1e-15);
    }

    #[test]
    fn suites_pass_on_small_budgets() {
        for c in oracle_suite(1, 10).unwrap()
            .into_iter()
            .chain(gradient_suite(2, 20).unwrap())
            .chain(reconstruction_suite(3, 2).unwrap())
        {
            assert!(c.passed(), "{c:?}");
        }
    }
}
