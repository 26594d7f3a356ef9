//! The editing engine.
//!
//! Every step starts from the base point
//! `x_base = mean_step(x_t, c_orig, w_orig) + u_t`, which replays the original
//! trajectory exactly when `x_t` is on it, and then adds edit terms. Terms are
//! logged one by one and `x_edit` is built by adding them to `x_base` in logged
//! order, so a trace always decomposes into reconstruction plus edits.

use std::io::{BufRead, BufReader, Read, Write};

use crate::error::{Error, Result};
use crate::hfunc::{
    apply_rho, check_weight_guideline, classifier_h_score, edit_direction_f, reward_grad_with_eps,
    ConditionalExpert, Ctx, FeatureReward, RewardExpert, RhoSchedule,
};
use crate::inversion::{mean_step, InversionMode, InversionRecord};
use crate::model::{Condition, Label, MixtureModel};
use crate::schedule::{Schedule, StepParams};
use crate::vector;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EngineMode {
    /// Edit terms evaluated at `(x_t, t)`.
    Explicit,
    /// Edit terms evaluated at `(x^(k), t - 1)` for `k = 0..K`.
    Implicit,
    /// Edit-friendly baseline: one mean under the edit condition plus residual.
    EditFriendly,
}

impl EngineMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EngineMode::Explicit => "explicit",
            EngineMode::Implicit => "implicit",
            EngineMode::EditFriendly => "edit-friendly",
        }
    }
}

impl std::str::FromStr for EngineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "explicit" => Ok(EngineMode::Explicit),
            "implicit" => Ok(EngineMode::Implicit),
            "edit-friendly" => Ok(EngineMode::EditFriendly),
            other => Err(Error::Config(format!("unknown engine mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EditExpert<S> {
    /// Reward on the Tweedie estimate, scaled by `rho`.
    Reward {
        reward: FeatureReward<S>,
        rho: RhoSchedule<S>,
        full_gradient: bool,
    },
    /// `weight * grad log p(label | x)`.
    Classifier { label: Label, weight: S },
    /// `-2 lambda (x - x_base)`, evaluated after the text term.
    Recon { lambda: S },
}

impl<S> EditExpert<S> {
    fn name(&self, i: usize) -> String {
        match self {
            EditExpert::Reward { .. } => format!("reward{i}"),
            EditExpert::Classifier { .. } => format!("classifier{i}"),
            EditExpert::Recon { .. } => format!("recon{i}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditConfig<S> {
    pub mode: EngineMode,
    /// Implicit optimization steps `K`; ignored by the other modes.
    pub implicit_steps: usize,
    pub w_orig: S,
    pub w_edit: S,
    pub w_hat_orig: S,
    pub cond_orig: Condition,
    pub cond_edit: Condition,
    /// Include the conditional edit direction `f`. Reward-only edits turn this off.
    pub text_guided: bool,
    pub experts: Vec<EditExpert<S>>,
    /// Shrink factor `lambda` pulling each implicit iterate toward `x_base`.
    pub improve_recon: Option<S>,
    /// Leave the first steps unedited: editing starts at `t = T - skip_initial_steps`.
    pub skip_initial_steps: usize,
}

impl<S: Scalar> EditConfig<S> {
    /// Implicit single-step configuration with the default weights for `inversion`:
    /// `(1.0, 7.5, 5.0)` for random and `(1.0, 10.0, 9.0)` for deterministic inversion.
    pub fn defaults(inversion: InversionMode, cond_orig: Condition, cond_edit: Condition) -> Self {
        let (w_orig, w_edit, w_hat_orig) = match inversion {
            InversionMode::Random => (1.0, 7.5, 5.0),
            InversionMode::Deterministic => (1.0, 10.0, 9.0),
        };
        Self {
            mode: EngineMode::Implicit,
            implicit_steps: 1,
            w_orig: S::lit(w_orig),
            w_edit: S::lit(w_edit),
            w_hat_orig: S::lit(w_hat_orig),
            cond_orig,
            cond_edit,
            text_guided: true,
            experts: Vec::new(),
            improve_recon: None,
            skip_initial_steps: 0,
        }
    }

    pub fn validate(&self, model: &MixtureModel<S>, steps: usize) -> Result<()> {
        model.validate_condition(&self.cond_orig)?;
        model.validate_condition(&self.cond_edit)?;
        if self.mode == EngineMode::Implicit && self.implicit_steps == 0 {
            return Err(Error::Config("implicit mode needs at least one optimization step".into()));
        }
        if self.improve_recon.is_some() && self.mode != EngineMode::Implicit {
            return Err(Error::Config("improve_recon only applies to implicit mode".into()));
        }
        if let Some(l) = self.improve_recon {
            if !(l >= S::zero() && l <= S::one()) {
                return Err(Error::Config(format!("improve_recon lambda {l} outside [0, 1]")));
            }
        }
        if self.skip_initial_steps >= steps {
            return Err(Error::Config(format!(
                "skip_initial_steps={} leaves nothing of {steps} steps",
                self.skip_initial_steps
            )));
        }
        for e in &self.experts {
            match e {
                EditExpert::Reward { reward, .. } if reward.reference.len() != model.dim() => {
                    return Err(Error::Config("reward reference has wrong dimension".into()));
                }
                EditExpert::Classifier { label, .. } => {
                    model.validate_condition(&Condition::label(*label))?;
                }
                EditExpert::Recon { lambda } if *lambda < S::zero() => {
                    return Err(Error::Config("recon lambda must be nonnegative".into()));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Logs a warning when text-guided weights break `0 < w_orig <= w_hat_orig < w_edit`.
    pub fn check_guideline(&self) -> bool {
        !self.text_guided || check_weight_guideline(self.w_orig, self.w_hat_orig, self.w_edit)
    }

    fn conditional(&self) -> ConditionalExpert<S> {
        ConditionalExpert {
            cond_edit: self.cond_edit.clone(),
            cond_orig: self.cond_orig.clone(),
            w_edit: self.w_edit,
            w_hat_orig: self.w_hat_orig,
        }
    }

    /// Condition and weight of the frozen noise estimate used by reward experts.
    fn eps_hat_cond(&self) -> (&Condition, S) {
        if self.text_guided {
            (&self.cond_edit, self.w_edit)
        } else {
            (&self.cond_orig, self.w_orig)
        }
    }
}

/// One backward step of an edit run.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord<S> {
    pub t: usize,
    pub x_base: Vec<S>,
    /// Named additive terms in application order.
    pub terms: Vec<(String, Vec<S>)>,
    pub x_edit: Vec<S>,
    /// `x_{t-1}` of the original trajectory, for plotting.
    pub x_orig: Vec<S>,
}

impl<S: Scalar> StepRecord<S> {
    /// `x_base` plus every term, added in logged order.
    pub fn reassemble(&self) -> Vec<S> {
        let mut x = self.x_base.clone();
        for (_, v) in &self.terms {
            vector::axpy(&mut x, S::one(), v);
        }
        x
    }

    /// Sum of the logged terms.
    pub fn total_edit(&self) -> Vec<S> {
        let mut acc = vector::zeros(self.x_base.len());
        for (_, v) in &self.terms {
            vector::axpy(&mut acc, S::one(), v);
        }
        acc
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditTrace<S> {
    pub mode: EngineMode,
    /// Steps from `t = T - skip` down to `t = 1`.
    pub steps: Vec<StepRecord<S>>,
    pub x0_orig: Vec<S>,
    pub x0_edit: Vec<S>,
}

struct Builder<'r, S> {
    t: usize,
    x: Vec<S>,
    x_base: Vec<S>,
    terms: Vec<(String, Vec<S>)>,
    record: &'r InversionRecord<S>,
}

impl<'r, S: Scalar> Builder<'r, S> {
    fn new(t: usize, x_base: Vec<S>, record: &'r InversionRecord<S>) -> Self {
        Self { t, x: x_base.clone(), x_base, terms: Vec::new(), record }
    }

    fn push(&mut self, name: String, v: Vec<S>) -> Result<()> {
        if !vector::all_finite(&v) {
            return Err(Error::NumericalBlowup { t: self.t, what: name });
        }
        vector::axpy(&mut self.x, S::one(), &v);
        self.terms.push((name, v));
        Ok(())
    }

    fn finish(self) -> Result<StepRecord<S>> {
        if !vector::all_finite(&self.x) {
            return Err(Error::NumericalBlowup { t: self.t, what: "x_edit".into() });
        }
        Ok(StepRecord {
            t: self.t,
            x_base: self.x_base,
            terms: self.terms,
            x_edit: self.x,
            x_orig: self.record.x(self.t - 1)?.to_vec(),
        })
    }
}

fn params<S: Scalar>(sched: &Schedule<S>, t: usize) -> Result<StepParams<S>> {
    let p = sched.step_params(t)?;
    debug_assert!((p.coef + p.eta / p.sigma_t).abs() <= S::lit(64.0) * S::epsilon() * p.coef.abs().max(S::one()));
    Ok(p)
}

/// `mean_step(x_t, c_orig, w_orig) + u_t`.
pub fn base_step<S: Scalar>(
    ctx: &Ctx<'_, S>,
    record: &InversionRecord<S>,
    x_t: &[S],
    t: usize,
    cfg: &EditConfig<S>,
) -> Result<Vec<S>> {
    let u = record.residual(t)?;
    let m = mean_step(ctx.model, ctx.sched, x_t, t, &cfg.cond_orig, cfg.w_orig)?;
    Ok(vector::add(&m, u))
}

/// Norm-matching reference at `(x, t)`: the edit direction `f` when text-guided,
/// else `eps(c_edit) - eps(none)`.
fn rho_reference<S: Scalar>(
    ctx: &Ctx<'_, S>,
    x: &[S],
    t: usize,
    cfg: &EditConfig<S>,
    f: Option<&[S]>,
) -> Result<Vec<S>> {
    if let Some(f) = f {
        return Ok(f.to_vec());
    }
    let ee = ctx.model.noise_pred(ctx.sched, x, t, &cfg.cond_edit)?;
    let eu = ctx.model.noise_pred(ctx.sched, x, t, &Condition::Unconditional)?;
    Ok(vector::sub(&ee, &eu))
}

/// `rho_t * grad r` for a reward expert. The stop-gradient path evaluates the
/// frozen noise estimate at `eps_at` and differentiates at `x`; the full-gradient
/// path evaluates both at `x`.
#[allow(clippy::too_many_arguments)]
fn reward_term<S: Scalar>(
    ctx: &Ctx<'_, S>,
    cfg: &EditConfig<S>,
    reward: &FeatureReward<S>,
    rho: &RhoSchedule<S>,
    full_gradient: bool,
    x: &[S],
    eps_at: &[S],
    t: usize,
    reference: &[S],
) -> Result<Vec<S>> {
    let (cond, w) = cfg.eps_hat_cond();
    let g = if full_gradient {
        let mut e = RewardExpert::new(reward.clone(), *rho, cond.clone(), w);
        e.full_gradient = true;
        e.raw_grad(ctx, x, t)?
    } else {
        let eps = ctx.model.guided_noise(ctx.sched, eps_at, t, cond, w)?;
        reward_grad_with_eps(ctx.sched, x, t, &eps, reward)?
    };
    apply_rho(ctx.sched, rho, &g, t, Some(reference))
}

/// Adds expert terms evaluated in the explicit convention: at `(x_t, t)` with
/// step `eta`, except recon experts which act on the running point.
fn explicit_experts<S: Scalar>(
    ctx: &Ctx<'_, S>,
    cfg: &EditConfig<S>,
    b: &mut Builder<'_, S>,
    x_t: &[S],
    t: usize,
    eta: S,
    f: Option<&[S]>,
) -> Result<()> {
    let x_hat = b.x.clone();
    for (i, e) in cfg.experts.iter().enumerate() {
        let v = match e {
            EditExpert::Reward { reward, rho, full_gradient } => {
                let reference = match rho {
                    RhoSchedule::NormMatched(_) => rho_reference(ctx, x_t, t, cfg, f)?,
                    _ => Vec::new(),
                };
                reward_term(ctx, cfg, reward, rho, *full_gradient, x_t, x_t, t, &reference)?
            }
            EditExpert::Classifier { label, weight } => {
                vector::scale(&classifier_h_score(ctx, x_t, t, *label)?, eta * *weight)
            }
            EditExpert::Recon { lambda } => {
                let two = S::one() + S::one();
                vector::scale(&vector::sub(&x_hat, &b.x_base), -two * *lambda * eta)
            }
        };
        b.push(e.name(i), v)?;
    }
    Ok(())
}

/// `x_base + coef f(x_t, t)` plus expert terms at `(x_t, t)`.
pub fn explicit_step<S: Scalar>(
    ctx: &Ctx<'_, S>,
    record: &InversionRecord<S>,
    x_t: &[S],
    t: usize,
    cfg: &EditConfig<S>,
) -> Result<StepRecord<S>> {
    let p = params(ctx.sched, t)?;
    let mut b = Builder::new(t, base_step(ctx, record, x_t, t, cfg)?, record);
    let f = if cfg.text_guided {
        let f = edit_direction_f(ctx, x_t, t, &cfg.conditional())?;
        b.push("text".into(), vector::scale(&f, p.coef))?;
        Some(f)
    } else {
        None
    };
    explicit_experts(ctx, cfg, &mut b, x_t, t, p.eta, f.as_deref())?;
    b.finish()
}

/// `K` iterations of: optional shrink toward `x_base`, `coef f(x^(k), t-1)`, then
/// expert terms. Reward gradients are taken at the post-text point with the
/// frozen noise estimate from `x^(k)`. Each term is logged with its iteration index.
pub fn implicit_step<S: Scalar>(
    ctx: &Ctx<'_, S>,
    record: &InversionRecord<S>,
    x_t: &[S],
    t: usize,
    cfg: &EditConfig<S>,
) -> Result<StepRecord<S>> {
    let p = params(ctx.sched, t)?;
    let s = t - 1;
    let two = S::one() + S::one();
    let mut b = Builder::new(t, base_step(ctx, record, x_t, t, cfg)?, record);
    for k in 0..cfg.implicit_steps {
        if let Some(lambda) = cfg.improve_recon {
            let r = vector::sub(&b.x, &b.x_base);
            b.push(format!("recon_shrink.k{k}"), vector::scale(&r, -lambda))?;
        }
        let xk = b.x.clone();
        let f = if cfg.text_guided {
            let f = edit_direction_f(ctx, &xk, s, &cfg.conditional())?;
            b.push(format!("text.k{k}"), vector::scale(&f, p.coef))?;
            Some(f)
        } else {
            None
        };
        let x_hat = b.x.clone();
        let mut staged = Vec::with_capacity(cfg.experts.len());
        for (i, e) in cfg.experts.iter().enumerate() {
            let v = match e {
                EditExpert::Reward { reward, rho, full_gradient } => {
                    let reference = match rho {
                        RhoSchedule::NormMatched(_) => rho_reference(ctx, &xk, s, cfg, f.as_deref())?,
                        _ => Vec::new(),
                    };
                    reward_term(ctx, cfg, reward, rho, *full_gradient, &x_hat, &xk, s, &reference)?
                }
                EditExpert::Classifier { label, weight } => {
                    vector::scale(&classifier_h_score(ctx, &xk, s, *label)?, p.gamma * *weight)
                }
                EditExpert::Recon { lambda } => {
                    vector::scale(&vector::sub(&x_hat, &b.x_base), -two * *lambda * p.gamma)
                }
            };
            staged.push((format!("{}.k{k}", e.name(i)), v));
        }
        for (name, v) in staged {
            b.push(name, v)?;
        }
    }
    b.finish()
}

/// Edit-friendly baseline step: `mean_step(x_t, c, w) + rho_t g_t + u_t` with
/// `(c, w)` the edit pair when text-guided. Logged as `x_base` plus the mean shift
/// `mean(c_edit) - mean(c_orig)` under the name `text`, then expert terms.
pub fn ef_combined_step<S: Scalar>(
    ctx: &Ctx<'_, S>,
    record: &InversionRecord<S>,
    x_t: &[S],
    t: usize,
    cfg: &EditConfig<S>,
) -> Result<StepRecord<S>> {
    if record.mode != InversionMode::Random {
        return Err(Error::ModeMismatch("edit-friendly editing needs a random inversion record".into()));
    }
    let p = params(ctx.sched, t)?;
    let mut b = Builder::new(t, base_step(ctx, record, x_t, t, cfg)?, record);
    if cfg.text_guided {
        let me = mean_step(ctx.model, ctx.sched, x_t, t, &cfg.cond_edit, cfg.w_edit)?;
        let mo = mean_step(ctx.model, ctx.sched, x_t, t, &cfg.cond_orig, cfg.w_orig)?;
        b.push("text".into(), vector::sub(&me, &mo))?;
    }
    explicit_experts(ctx, cfg, &mut b, x_t, t, p.eta, None)?;
    b.finish()
}

/// Runs the configured engine from `x_T^orig` (or the first unskipped step) to `t = 0`.
///
/// Editing is deterministic given the record, so no generator is taken here; all
/// randomness lives in the inversion.
pub fn run_edit<S: Scalar>(
    model: &MixtureModel<S>,
    sched: &Schedule<S>,
    record: &InversionRecord<S>,
    cfg: &EditConfig<S>,
) -> Result<EditTrace<S>> {
    record.check_compatible(sched)?;
    cfg.validate(model, sched.steps())?;
    let ctx = Ctx::new(model, sched);
    let start = sched.steps() - cfg.skip_initial_steps;
    let mut x = record.x(start)?.to_vec();
    let mut steps = Vec::with_capacity(start);
    for t in (1..=start).rev() {
        let rec = match cfg.mode {
            EngineMode::Explicit => explicit_step(&ctx, record, &x, t, cfg)?,
            EngineMode::Implicit => implicit_step(&ctx, record, &x, t, cfg)?,
            EngineMode::EditFriendly => ef_combined_step(&ctx, record, &x, t, cfg)?,
        };
        x = rec.x_edit.clone();
        steps.push(rec);
    }
    Ok(EditTrace { mode: cfg.mode, steps, x0_orig: record.x(0)?.to_vec(), x0_edit: x })
}

const TRACE_HEADER: &str = "# hbridge trace v1";

impl<S: Scalar> EditTrace<S> {
    pub fn dim(&self) -> usize {
        self.x0_orig.len()
    }

    /// One row per step: `t`, `x_orig`, `x_base`, each term, `x_edit`. Column
    /// names follow the first step; every step of a run logs the same terms.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let d = self.dim();
        writeln!(w, "{TRACE_HEADER}")?;
        writeln!(w, "# mode={} dim={d}", self.mode.as_str())?;
        let names: Vec<&str> = self
            .steps
            .first()
            .map(|s| s.terms.iter().map(|(n, _)| n.as_str()).collect())
            .unwrap_or_default();
        let mut header = vec!["t".to_string()];
        for group in ["orig", "base"].iter().copied().chain(names.iter().copied()).chain(["edit"]) {
            header.extend((0..d).map(|i| format!("{group}_{i}")));
        }
        writeln!(w, "{}", header.join(","))?;
        let fmt = |v: &[S]| v.iter().map(|x| x.as_f64().to_string()).collect::<Vec<_>>();
        for s in &self.steps {
            if s.terms.len() != names.len() || s.terms.iter().zip(&names).any(|((n, _), m)| n != m) {
                return Err(Error::Record(format!("step t={} logs different terms", s.t)));
            }
            let mut row = vec![s.t.to_string()];
            row.extend(fmt(&s.x_orig));
            row.extend(fmt(&s.x_base));
            for (_, v) in &s.terms {
                row.extend(fmt(v));
            }
            row.extend(fmt(&s.x_edit));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut reader = BufReader::new(r);
        let mut line = String::new();
        reader.read_line(&mut line)?;
        if line.trim() != TRACE_HEADER {
            return Err(Error::Record(format!("unexpected header {:?}", line.trim())));
        }
        line.clear();
        reader.read_line(&mut line)?;
        let mut mode = None;
        let mut dim = None;
        for kv in line.trim().trim_start_matches('#').split_whitespace() {
            match kv.split_once('=') {
                Some(("mode", v)) => mode = Some(v.parse::<EngineMode>()?),
                Some(("dim", v)) => dim = v.parse::<usize>().ok(),
                _ => {}
            }
        }
        let (mode, d) = mode
            .zip(dim)
            .ok_or_else(|| Error::Record("trace metadata lacks mode or dim".into()))?;
        let mut csv = csv::ReaderBuilder::new().from_reader(reader);
        let header = csv.headers()?.clone();
        if d == 0 || (header.len() - 1) % d != 0 || header.len() < 1 + 3 * d {
            return Err(Error::Record("trace columns do not match dimension".into()));
        }
        let names: Vec<String> = (0..(header.len() - 1) / d - 3)
            .map(|j| {
                let col = &header[1 + (2 + j) * d];
                col.rsplit_once('_').map(|(n, _)| n.to_string()).unwrap_or_default()
            })
            .collect();
        let mut steps = Vec::new();
        for rec in csv.records() {
            let rec = rec?;
            let t: usize = rec[0].parse().map_err(|_| Error::Record("bad t".into()))?;
            let vals = rec
                .iter()
                .skip(1)
                .map(|f| f.parse::<f64>().map(S::lit))
                .collect::<std::result::Result<Vec<S>, _>>()
                .map_err(|e| Error::Record(e.to_string()))?;
            let chunk = |j: usize| vals[j * d..(j + 1) * d].to_vec();
            let n = names.len();
            steps.push(StepRecord {
                t,
                x_orig: chunk(0),
                x_base: chunk(1),
                terms: names.iter().enumerate().map(|(j, name)| (name.clone(), chunk(2 + j))).collect(),
                x_edit: chunk(2 + n),
            });
        }
        let last = steps.last().ok_or_else(|| Error::Record("empty trace".into()))?;
        Ok(Self {
            mode,
            x0_orig: last.x_orig.clone(),
            x0_edit: last.x_edit.clone(),
            steps,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hfunc::FeatureMap;
    use crate::inversion::{ddim_invert, ef_invert, ef_invert_with_noise};
    use crate::model::Component;
    use crate::schedule::{build_schedule, ScheduleRecipe};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sched(lambda: f64, steps: usize) -> Schedule<f64> {
        build_schedule(1000, &ScheduleRecipe::LinearBeta { beta_min: 1e-4, beta_max: 2e-2 }, lambda)
            .unwrap()
            .respaced(steps)
            .unwrap()
    }

    fn two_class() -> MixtureModel<f64> {
        MixtureModel::new(vec![
            Component { weight: 0.5, mean: vec![-2.0, 0.0], std: 0.5, label: 0 },
            Component { weight: 0.5, mean: vec![2.0, 0.0], std: 0.5, label: 1 },
        ])
        .unwrap()
    }

    fn ef_record(m: &MixtureModel<f64>, s: &Schedule<f64>, seed: u64) -> InversionRecord<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = m.sample_data(&mut rng, &Condition::label(0)).unwrap();
        ef_invert(m, s, &x0, &Condition::label(0), 1.0, &mut rng).unwrap()
    }

    fn cfg(mode: EngineMode) -> EditConfig<f64> {
        let mut c = EditConfig::defaults(InversionMode::Random, Condition::label(0), Condition::label(1));
        c.mode = mode;
        c
    }

    fn recon_cfg(mode: EngineMode) -> EditConfig<f64> {
        let mut c = cfg(mode);
        c.cond_edit = c.cond_orig.clone();
        c.w_hat_orig = c.w_edit;
        c
    }

    #[test]
    fn defaults_follow_inversion_mode() {
        let r = EditConfig::<f64>::defaults(InversionMode::Random, Condition::label(0), Condition::label(1));
        assert_eq!((r.w_orig, r.w_edit, r.w_hat_orig), (1.0, 7.5, 5.0));
        let d = EditConfig::<f64>::defaults(InversionMode::Deterministic, Condition::label(0), Condition::label(1));
        assert_eq!((d.w_orig, d.w_edit, d.w_hat_orig), (1.0, 10.0, 9.0));
        assert_eq!(r.mode, EngineMode::Implicit);
        assert_eq!(r.implicit_steps, 1);
    }

    #[test]
    fn base_step_on_trajectory_replays_it() {
        let (m, s) = (two_class(), sched(1.0, 20));
        let rec = ef_record(&m, &s, 3);
        let ctx = Ctx::new(&m, &s);
        let c = cfg(EngineMode::Explicit);
        for t in 1..=20 {
            let out = base_step(&ctx, &rec, rec.x(t).unwrap(), t, &c).unwrap();
            assert!(vector::max_abs_diff(&out, rec.x(t - 1).unwrap()) < 1e-12);
        }
    }

    #[test]
    fn base_step_zero_residual_and_perturbation() {
        let (m, s) = (two_class(), sched(1.0, 20));
        let ctx = Ctx::new(&m, &s);
        let c = cfg(EngineMode::Explicit);
        let mut rec = ef_record(&m, &s, 4);
        let x = [0.4, -0.3];
        let t = 9;
        let mean_x = mean_step(&m, &s, &x, t, &c.cond_orig, c.w_orig).unwrap();
        let on = base_step(&ctx, &rec, rec.x(t).unwrap(), t, &c).unwrap();
        let off = base_step(&ctx, &rec, &x, t, &c).unwrap();
        let mean_on = mean_step(&m, &s, rec.x(t).unwrap(), t, &c.cond_orig, c.w_orig).unwrap();
        let want = vector::sub(&mean_x, &mean_on);
        assert!(vector::max_abs_diff(&vector::sub(&off, &on), &want) < 1e-12);

        for u in rec.u_res.iter_mut() {
            u.iter_mut().for_each(|v| *v = 0.0);
        }
        assert_eq!(base_step(&ctx, &rec, &x, t, &c).unwrap(), mean_x);
    }

    #[test]
    fn explicit_collapses_without_edit() {
        let (m, s) = (two_class(), sched(1.0, 20));
        let rec = ef_record(&m, &s, 5);
        let ctx = Ctx::new(&m, &s);
        let x = [0.1, 0.9];
        let c = recon_cfg(EngineMode::Explicit);
        let out = explicit_step(&ctx, &rec, &x, 12, &c).unwrap();
        assert!(vector::max_abs_diff(&out.x_edit, &out.x_base) < 1e-13);

        let mut c = c;
        c.experts.push(EditExpert::Recon { lambda: 3.0 });
        let out = explicit_step(&ctx, &rec, &x, 12, &c).unwrap();
        assert!(vector::max_abs_diff(&out.x_edit, &out.x_base) < 1e-13);
    }

    #[test]
    fn explicit_single_gaussian_closed_form() {
        // one Gaussian per label, w_edit = w_hat_orig: every term is affine in x
        let (m0, m1, sd) = (-1.0f64, 1.5f64, 0.7f64);
        let m = MixtureModel::new(vec![
            Component { weight: 0.4, mean: vec![m0], std: sd, label: 0 },
            Component { weight: 0.6, mean: vec![m1], std: sd, label: 1 },
        ])
        .unwrap();
        let s = sched(1.0, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rec = ef_invert(&m, &s, &[m0], &Condition::label(0), 1.0, &mut rng).unwrap();
        let mut c = cfg(EngineMode::Explicit);
        c.w_edit = 4.0;
        c.w_hat_orig = 4.0;
        let ctx = Ctx::new(&m, &s);
        for t in [2usize, 6, 10] {
            let x = 0.35;
            let (a, ap) = (s.a(t).unwrap(), s.a(t - 1).unwrap());
            let (sg, sp) = (s.sigma(t).unwrap(), s.sigma(t - 1).unwrap());
            let om = sp * (1.0 - a * a * sp * sp / (ap * ap * sg * sg)).sqrt();
            let coef = (sp * sp - om * om).sqrt() - sg * ap / a;
            let v = a * a * sd * sd + sg * sg;
            let eps = |mu: f64| -sg * (a * mu - x) / v;
            let x_base = ap / a * x + coef * eps(m0) + rec.residual(t).unwrap()[0];
            let want = x_base + coef * 4.0 * (eps(m1) - eps(m0));
            let got = explicit_step(&ctx, &rec, &[x], t, &c).unwrap();
            assert!((got.x_edit[0] - want).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn implicit_k1_is_one_step_update() {
        let (m, s) = (two_class(), sched(1.0, 20));
        let rec = ef_record(&m, &s, 6);
        let ctx = Ctx::new(&m, &s);
        let c = cfg(EngineMode::Implicit);
        let x = [-1.0, 0.4];
        let t = 14;
        let out = implicit_step(&ctx, &rec, &x, t, &c).unwrap();
        let xb = base_step(&ctx, &rec, &x, t, &c).unwrap();
        let f = edit_direction_f(&ctx, &xb, t - 1, &c.conditional()).unwrap();
        let want = vector::lincomb(1.0, &xb, s.step_params(t).unwrap().coef, &f);
        assert!(vector::max_abs_diff(&out.x_edit, &want) < 1e-13);

        let mut c0 = c.clone();
        c0.implicit_steps = 0;
        let out = implicit_step(&ctx, &rec, &x, t, &c0).unwrap();
        assert_eq!(out.x_edit, xb);
        assert!(c0.validate(&m, 20).is_err());
    }

    #[test]
    fn decomposition_audit_holds_for_every_mode() {
        let (m, s) = (two_class(), sched(1.0, 25));
        let rec = ef_record(&m, &s, 7);
        let reward = FeatureReward { map: FeatureMap::Identity, reference: vec![2.0, 0.0] };
        for mode in [EngineMode::Explicit, EngineMode::Implicit, EngineMode::EditFriendly] {
            let mut c = cfg(mode);
            c.implicit_steps = 3;
            c.experts = vec![
                EditExpert::Reward { reward: reward.clone(), rho: RhoSchedule::SqrtAlphaBar(0.3), full_gradient: false },
                EditExpert::Classifier { label: 1, weight: 0.5 },
                EditExpert::Recon { lambda: 0.1 },
                EditExpert::Reward { reward: reward.clone(), rho: RhoSchedule::NormMatched(0.2), full_gradient: false },
            ];
            if mode == EngineMode::Implicit {
                c.improve_recon = Some(0.2);
            }
            let tr = run_edit(&m, &s, &rec, &c).unwrap();
            assert_eq!(tr.steps.len(), 25);
            for st in &tr.steps {
                assert_eq!(st.reassemble(), st.x_edit);
                let diff = vector::sub(&st.x_edit, &st.x_base);
                assert!(vector::max_abs_diff(&diff, &st.total_edit()) < 1e-12);
            }
        }
    }

    #[test]
    fn perfect_reconstruction_collapse() {
        let m = two_class();
        for (lambda, det) in [(1.0, false), (0.0, true), (0.5, false)] {
            let s = sched(lambda, 30);
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let x0 = m.sample_data(&mut rng, &Condition::label(0)).unwrap();
            let rec = if det {
                ddim_invert(&m, &s, &x0, &Condition::label(0), 1.0).unwrap()
            } else {
                ef_invert(&m, &s, &x0, &Condition::label(0), 1.0, &mut rng).unwrap()
            };
            for mode in [EngineMode::Explicit, EngineMode::Implicit] {
                let tr = run_edit(&m, &s, &rec, &recon_cfg(mode)).unwrap();
                assert!(vector::max_abs_diff(&tr.x0_edit, &x0) < 1e-9);
            }
        }
    }

    #[test]
    fn deterministic_runs_repeat_exactly() {
        let (m, s) = (two_class(), sched(0.0, 20));
        let rec = ddim_invert(&m, &s, &[-2.0, 0.3], &Condition::label(0), 1.0).unwrap();
        let c = EditConfig::defaults(InversionMode::Deterministic, Condition::label(0), Condition::label(1));
        assert_eq!(run_edit(&m, &s, &rec, &c).unwrap(), run_edit(&m, &s, &rec, &c).unwrap());
    }

    #[test]
    fn ef_step_cases() {
        let (m, s) = (two_class(), sched(1.0, 20));
        let rec = ef_record(&m, &s, 12);
        let ctx = Ctx::new(&m, &s);
        let mut c = recon_cfg(EngineMode::EditFriendly);
        c.w_edit = c.w_orig;
        for t in 1..=20 {
            let out = ef_combined_step(&ctx, &rec, rec.x(t).unwrap(), t, &c).unwrap();
            assert!(vector::max_abs_diff(&out.x_edit, rec.x(t - 1).unwrap()) < 1e-12);
        }

        let x = [0.2, 0.2];
        let t = 10;
        let coef = s.step_params(t).unwrap().coef;
        let mut c = cfg(EngineMode::EditFriendly);
        let ef = ef_combined_step(&ctx, &rec, &x, t, &c).unwrap().x_edit;
        let ex = explicit_step(&ctx, &rec, &x, t, &c).unwrap().x_edit;
        let me = mean_step(&m, &s, &x, t, &c.cond_edit, c.w_edit).unwrap();
        let mo = mean_step(&m, &s, &x, t, &c.cond_orig, c.w_orig).unwrap();
        let f = edit_direction_f(&ctx, &x, t, &c.conditional()).unwrap();
        let want = vector::sub(&vector::sub(&me, &mo), &vector::scale(&f, coef));
        assert!(vector::max_abs_diff(&vector::sub(&ef, &ex), &want) < 1e-12);
        assert!(vector::norm(&want) > 1e-6);

        c.w_hat_orig = c.w_orig;
        let ef = ef_combined_step(&ctx, &rec, &x, t, &c).unwrap().x_edit;
        let ex = explicit_step(&ctx, &rec, &x, t, &c).unwrap().x_edit;
        assert!(vector::max_abs_diff(&ef, &ex) < 1e-12);
    }

    #[test]
    fn ef_zero_rho_reduces_to_plain_step() {
        let (m, s) = (two_class(), sched(1.0, 20));
        let rec = ef_record(&m, &s, 13);
        let ctx = Ctx::new(&m, &s);
        let mut c = cfg(EngineMode::EditFriendly);
        let x = [0.5, -0.5];
        let plain = ef_combined_step(&ctx, &rec, &x, 7, &c).unwrap().x_edit;
        c.experts.push(EditExpert::Reward {
            reward: FeatureReward { map: FeatureMap::Identity, reference: vec![1.0, 1.0] },
            rho: RhoSchedule::Constant(0.0),
            full_gradient: false,
        });
        let with = ef_combined_step(&ctx, &rec, &x, 7, &c).unwrap().x_edit;
        assert!(vector::max_abs_diff(&plain, &with) < 1e-15);
        let want = vector::add(&mean_step(&m, &s, &x, 7, &c.cond_edit, c.w_edit).unwrap(), rec.residual(7).unwrap());
        assert!(vector::max_abs_diff(&plain, &want) < 1e-12);
    }

    #[test]
    fn ef_rejects_deterministic_record() {
        let (m, s) = (two_class(), sched(0.0, 10));
        let rec = ddim_invert(&m, &s, &[0.0, 0.0], &Condition::label(0), 1.0).unwrap();
        let err = run_edit(&m, &s, &rec, &cfg(EngineMode::EditFriendly)).unwrap_err();
        assert!(matches!(err, Error::ModeMismatch(_)));
    }

    #[test]
    fn skip_starts_from_original_point() {
        let (m, s) = (two_class(), sched(1.0, 20));
        let rec = ef_record(&m, &s, 14);
        let mut c = cfg(EngineMode::Implicit);
        c.skip_initial_steps = 6;
        let tr = run_edit(&m, &s, &rec, &c).unwrap();
        assert_eq!(tr.steps.len(), 14);
        assert_eq!(tr.steps[0].t, 14);
        c.skip_initial_steps = 20;
        assert!(run_edit(&m, &s, &rec, &c).is_err());
    }

    #[test]
    fn blowup_names_timestep() {
        let (m, s) = (two_class(), sched(1.0, 10));
        let rec = ef_record(&m, &s, 15);
        let mut c = cfg(EngineMode::Explicit);
        c.w_edit = 1e308;
        match run_edit(&m, &s, &rec, &c) {
            Err(Error::NumericalBlowup { t, .. }) => assert!((1..=10).contains(&t)),
            other => panic!("expected blowup, got {other:?}"),
        }
    }

    #[test]
    fn lambda_mismatch_between_record_and_schedule() {
        let m = two_class();
        let rec = ef_record(&m, &sched(1.0, 10), 16);
        let err = run_edit(&m, &sched(0.0, 10), &rec, &cfg(EngineMode::Explicit)).unwrap_err();
        assert!(matches!(err, Error::ModeMismatch(_)));
    }

    #[test]
    fn trace_csv_round_trip() {
        let (m, s) = (two_class(), sched(1.0, 8));
        let zeros = vec![vec![0.0; 2]; 8];
        let rec = ef_invert_with_noise(&m, &s, &[-2.0, 0.0], &Condition::label(0), 1.0, &zeros).unwrap();
        let mut c = cfg(EngineMode::Implicit);
        c.implicit_steps = 2;
        c.experts.push(EditExpert::Classifier { label: 1, weight: 1.0 });
        let tr = run_edit(&m, &s, &rec, &c).unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let back = EditTrace::<f64>::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, tr);
    }
}
