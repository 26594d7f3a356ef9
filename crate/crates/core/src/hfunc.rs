//! h-experts: unnormalized log-weights over noisy points and their scores.
//!
//! Every expert exposes `log_h` and its gradient `score`. Experts combine as a
//! product, so their scores add ([`product_score`]). Reward experts also carry a
//! step-size schedule `rho`, which is applied by [`reward_h_score`] and not by the
//! raw [`HExpert::score`].

use crate::error::{Error, Result};
use crate::model::{Condition, Label, MixtureModel};
use crate::schedule::Schedule;
use crate::vector;
use crate::Scalar;

/// The model and schedule an expert is evaluated against.
#[derive(Debug, Clone, Copy)]
pub struct Ctx<'a, S> {
    pub model: &'a MixtureModel<S>,
    pub sched: &'a Schedule<S>,
}

impl<'a, S> Ctx<'a, S> {
    pub fn new(model: &'a MixtureModel<S>, sched: &'a Schedule<S>) -> Self {
        Self { model, sched }
    }
}

pub trait HExpert<S: Scalar> {
    /// `log h(x, t)` up to an additive constant.
    fn log_h(&self, ctx: &Ctx<'_, S>, x: &[S], t: usize) -> Result<S>;

    /// `grad_x log h(x, t)`.
    fn score(&self, ctx: &Ctx<'_, S>, x: &[S], t: usize) -> Result<Vec<S>>;
}

/// `h = p(y = label | x_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierExpert {
    pub label: Label,
}

impl<S: Scalar> HExpert<S> for ClassifierExpert {
    fn log_h(&self, ctx: &Ctx<'_, S>, x: &[S], t: usize) -> Result<S> {
        let lp = ctx.model.log_class_posterior(ctx.sched, x, t, self.label)?;
        if lp == S::neg_infinity() {
            return Err(Error::Domain(format!("posterior of label {} is zero", self.label)));
        }
        Ok(lp)
    }

    fn score(&self, ctx: &Ctx<'_, S>, x: &[S], t: usize) -> Result<Vec<S>> {
        classifier_h_score(ctx, x, t, self.label)
    }
}

/// `h = exp(-lambda * |x - anchor|^2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconExpert<S> {
    pub lambda: S,
    pub anchor: Vec<S>,
}

impl<S: Scalar> HExpert<S> for ReconExpert<S> {
    fn log_h(&self, _ctx: &Ctx<'_, S>, x: &[S], _t: usize) -> Result<S> {
        Ok(-self.lambda * vector::sq_dist(x, &self.anchor))
    }

    fn score(&self, _ctx: &Ctx<'_, S>, x: &[S], _t: usize) -> Result<Vec<S>> {
        Ok(recon_h_score(x, self))
    }
}

/// Text-style conditional expert. Its log-value is
/// `w_edit log p(x|c_edit) - w_hat_orig log p(x|c_orig) + (w_hat_orig - w_edit) log p(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalExpert<S> {
    pub cond_edit: Condition,
    pub cond_orig: Condition,
    pub w_edit: S,
    pub w_hat_orig: S,
}

impl<S: Scalar> HExpert<S> for ConditionalExpert<S> {
    fn log_h(&self, ctx: &Ctx<'_, S>, x: &[S], t: usize) -> Result<S> {
        let (m, s) = (ctx.model, ctx.sched);
        let le = m.log_density(s, x, t, &self.cond_edit)?;
        let lo = m.log_density(s, x, t, &self.cond_orig)?;
        let lu = m.log_density(s, x, t, &Condition::Unconditional)?;
        Ok(self.w_edit * le - self.w_hat_orig * lo + (self.w_hat_orig - self.w_edit) * lu)
    }

    fn score(&self, ctx: &Ctx<'_, S>, x: &[S], t: usize) -> Result<Vec<S>> {
        let (m, s) = (ctx.model, ctx.sched);
        let se = m.score(s, x, t, &self.cond_edit)?;
        let so = m.score(s, x, t, &self.cond_orig)?;
        let su = m.score(s, x, t, &Condition::Unconditional)?;
        Ok(three_term(self.w_edit, &se, self.w_hat_orig, &so, &su))
    }
}

fn three_term<S: Scalar>(w_edit: S, e: &[S], w_hat: S, o: &[S], u: &[S]) -> Vec<S> {
    (0..e.len())
        .map(|i| w_edit * e[i] - w_hat * o[i] + (w_hat - w_edit) * u[i])
        .collect()
}

/// Editing direction
/// `f = w_edit eps(c_edit) - w_hat_orig eps(c_orig) + (w_hat_orig - w_edit) eps(none)`.
///
/// The matching h-score is `-f / sigma_t`.
pub fn edit_direction_f<S: Scalar>(
    ctx: &Ctx<'_, S>,
    x: &[S],
    t: usize,
    expert: &ConditionalExpert<S>,
) -> Result<Vec<S>> {
    let (m, s) = (ctx.model, ctx.sched);
    let ee = m.noise_pred(s, x, t, &expert.cond_edit)?;
    let eo = m.noise_pred(s, x, t, &expert.cond_orig)?;
    let eu = m.noise_pred(s, x, t, &Condition::Unconditional)?;
    Ok(three_term(expert.w_edit, &ee, expert.w_hat_orig, &eo, &eu))
}

/// `grad_x log p(y = label | x_t) = score(x | label) - score(x)`.
pub fn classifier_h_score<S: Scalar>(ctx: &Ctx<'_, S>, x: &[S], t: usize, label: Label) -> Result<Vec<S>> {
    let (m, s) = (ctx.model, ctx.sched);
    let cond = Condition::label(label);
    m.validate_condition(&cond)?;
    if m.class_posterior(s, x, t)?.prob(label) <= S::zero() {
        return Err(Error::Domain(format!("posterior of label {label} is zero")));
    }
    let sc = m.score(s, x, t, &cond)?;
    let su = m.score(s, x, t, &Condition::Unconditional)?;
    Ok(vector::sub(&sc, &su))
}

/// `-2 lambda (x - anchor)`.
pub fn recon_h_score<S: Scalar>(x: &[S], expert: &ReconExpert<S>) -> Vec<S> {
    vector::scale(&vector::sub(x, &expert.anchor), -(S::one() + S::one()) * expert.lambda)
}

/// Rescales `g` to norm `rho * |reference|`; a zero `g` gives a zero vector.
pub fn norm_match<S: Scalar>(g: &[S], reference: &[S], rho: S) -> Vec<S> {
    let n = vector::norm(g);
    if n == S::zero() {
        return vector::zeros(g.len());
    }
    vector::scale(g, rho * vector::norm(reference) / n)
}

/// Fixed feature map `G` applied to clean points.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureMap<S> {
    Identity,
    /// `G(x)_i = x_i^2`.
    SquaredCoords,
    /// `G(x) = <v, x>`, a single feature.
    Project(Vec<S>),
}

impl<S: Scalar> FeatureMap<S> {
    pub fn apply(&self, x: &[S]) -> Vec<S> {
        match self {
            FeatureMap::Identity => x.to_vec(),
            FeatureMap::SquaredCoords => x.iter().map(|&v| v * v).collect(),
            FeatureMap::Project(v) => vec![vector::dot(v, x)],
        }
    }

    /// `J_G(x)^T r` for a feature-space vector `r`.
    fn pullback(&self, x: &[S], r: &[S]) -> Vec<S> {
        match self {
            FeatureMap::Identity => r.to_vec(),
            FeatureMap::SquaredCoords => {
                let two = S::one() + S::one();
                x.iter().zip(r).map(|(&xi, &ri)| two * xi * ri).collect()
            }
            FeatureMap::Project(v) => vector::scale(v, r[0]),
        }
    }
}

/// Reward `r(x) = -|G(x) - G(reference)|^2` on clean data.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureReward<S> {
    pub map: FeatureMap<S>,
    pub reference: Vec<S>,
}

impl<S: Scalar> FeatureReward<S> {
    pub fn value(&self, x: &[S]) -> S {
        -vector::sq_dist(&self.map.apply(x), &self.map.apply(&self.reference))
    }

    pub fn grad(&self, x: &[S]) -> Vec<S> {
        let diff = vector::sub(&self.map.apply(x), &self.map.apply(&self.reference));
        vector::scale(&self.map.pullback(x, &diff), -(S::one() + S::one()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RhoSchedule<S> {
    Constant(S),
    /// `rho * sqrt(alpha_bar[t])`.
    SqrtAlphaBar(S),
    /// `rho * |reference| / |g|`, the reference supplied by the caller.
    NormMatched(S),
}

impl<S: Scalar> RhoSchedule<S> {
    pub fn base(&self) -> S {
        match *self {
            RhoSchedule::Constant(r) | RhoSchedule::SqrtAlphaBar(r) | RhoSchedule::NormMatched(r) => r,
        }
    }
}

/// Reward on the Tweedie estimate `x_{0|t} = (x - sigma_t eps_hat) / a_t`, where
/// `eps_hat` is the guided noise prediction under `(eps_cond, eps_w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardExpert<S> {
    pub reward: FeatureReward<S>,
    pub rho: RhoSchedule<S>,
    pub eps_cond: Condition,
    pub eps_w: S,
    /// Differentiate through `eps_hat` as well. Off by default: `eps_hat` is frozen.
    pub full_gradient: bool,
}

impl<S: Scalar> RewardExpert<S> {
    pub fn new(reward: FeatureReward<S>, rho: RhoSchedule<S>, eps_cond: Condition, eps_w: S) -> Self {
        Self { reward, rho, eps_cond, eps_w, full_gradient: false }
    }

    fn eps_hat(&self, ctx: &Ctx<'_, S>, x: &[S], t: usize) -> Result<Vec<S>> {
        ctx.model.guided_noise(ctx.sched, x, t, &self.eps_cond, self.eps_w)
    }

    /// Tweedie estimate of the clean point.
    pub fn x0_hat(&self, ctx: &Ctx<'_, S>, x: &[S], t: usize) -> Result<Vec<S>> {
        let eps = self.eps_hat(ctx, x, t)?;
        tweedie(ctx.sched, x, t, &eps)
    }

    /// Gradient of `r(x_{0|t})` in `x` before `rho` scaling, honoring `full_gradient`.
    pub fn raw_grad(&self, ctx: &Ctx<'_, S>, x: &[S], t: usize) -> Result<Vec<S>> {
        let eps = self.eps_hat(ctx, x, t)?;
        if !self.full_gradient {
            return reward_grad_with_eps(ctx.sched, x, t, &eps, &self.reward);
        }
        let (a, sigma) = (ctx.sched.a(t)?, ctx.sched.sigma(t)?);
        let x0 = tweedie(ctx.sched, x, t, &eps)?;
        let gr = self.reward.grad(&x0);
        let hess = guided_hessian(ctx, x, t, &self.eps_cond, self.eps_w)?;
        // d x0 / d x = (I + sigma^2 H) / a, symmetric
        let d = x.len();
        Ok((0..d)
            .map(|i| {
                let hg: S = (0..d).map(|j| hess[i][j] * gr[j]).sum();
                (gr[i] + sigma * sigma * hg) / a
            })
            .collect())
    }
}

impl<S: Scalar> HExpert<S> for RewardExpert<S> {
    /// `r(x_{0|t}(x))` with `eps_hat` a function of `x`.
    fn log_h(&self, ctx: &Ctx<'_, S>, x: &[S], t: usize) -> Result<S> {
        Ok(self.reward.value(&self.x0_hat(ctx, x, t)?))
    }

    /// Unscaled gradient; with `full_gradient` off this is the frozen-`eps_hat`
    /// gradient and so not the exact derivative of [`HExpert::log_h`].
    fn score(&self, ctx: &Ctx<'_, S>, x: &[S], t: usize) -> Result<Vec<S>> {
        self.raw_grad(ctx, x, t)
    }
}

fn guided_hessian<S: Scalar>(
    ctx: &Ctx<'_, S>,
    x: &[S],
    t: usize,
    cond: &Condition,
    w: S,
) -> Result<Vec<Vec<S>>> {
    let (m, s) = (ctx.model, ctx.sched);
    match cond {
        Condition::Unconditional => m.score_jacobian(s, x, t, cond),
        Condition::Labels(_) => {
            let hc = m.score_jacobian(s, x, t, cond)?;
            let hu = m.score_jacobian(s, x, t, &Condition::Unconditional)?;
            Ok(hc
                .iter()
                .zip(&hu)
                .map(|(rc, ru)| vector::lincomb(w, rc, S::one() - w, ru))
                .collect())
        }
    }
}

/// `(x - sigma_t eps) / a_t`.
pub fn tweedie<S: Scalar>(sched: &Schedule<S>, x: &[S], t: usize, eps: &[S]) -> Result<Vec<S>> {
    let (a, sigma) = (sched.a(t)?, sched.sigma(t)?);
    Ok(vector::lincomb(S::one() / a, x, -sigma / a, eps))
}

/// `(1 / a_t) grad r((x - sigma_t eps) / a_t)` with `eps` held fixed.
pub fn reward_grad_with_eps<S: Scalar>(
    sched: &Schedule<S>,
    x: &[S],
    t: usize,
    eps: &[S],
    reward: &FeatureReward<S>,
) -> Result<Vec<S>> {
    let x0 = tweedie(sched, x, t, eps)?;
    Ok(vector::scale(&reward.grad(&x0), S::one() / sched.a(t)?))
}

/// Applies `rho` at time `t` to a raw gradient. `reference` is required for norm matching.
pub fn apply_rho<S: Scalar>(
    sched: &Schedule<S>,
    rho: &RhoSchedule<S>,
    g: &[S],
    t: usize,
    reference: Option<&[S]>,
) -> Result<Vec<S>> {
    match *rho {
        RhoSchedule::Constant(r) => Ok(vector::scale(g, r)),
        RhoSchedule::SqrtAlphaBar(r) => Ok(vector::scale(g, r * sched.alpha_bar(t)?.sqrt())),
        RhoSchedule::NormMatched(r) => {
            let reference = reference
                .ok_or_else(|| Error::Config("norm-matched rho needs a reference vector".into()))?;
            Ok(norm_match(g, reference, r))
        }
    }
}

/// `rho_t * grad_x r(x_{0|t})`.
pub fn reward_h_score<S: Scalar>(
    ctx: &Ctx<'_, S>,
    x: &[S],
    t: usize,
    expert: &RewardExpert<S>,
    reference: Option<&[S]>,
) -> Result<Vec<S>> {
    let g = expert.raw_grad(ctx, x, t)?;
    apply_rho(ctx.sched, &expert.rho, &g, t, reference)
}

/// Sum of expert scores. Each coordinate is summed in ascending order of its
/// terms, so the result does not depend on the order of `experts`.
pub fn product_score<S: Scalar>(
    experts: &[&dyn HExpert<S>],
    ctx: &Ctx<'_, S>,
    x: &[S],
    t: usize,
) -> Result<Vec<S>> {
    if experts.is_empty() {
        return Err(Error::Config("product of experts needs at least one expert".into()));
    }
    let scores = experts
        .iter()
        .map(|e| e.score(ctx, x, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(sum_sorted(&scores, x.len()))
}

pub(crate) fn sum_sorted<S: Scalar>(terms: &[Vec<S>], d: usize) -> Vec<S> {
    let mut col: Vec<S> = Vec::with_capacity(terms.len());
    (0..d)
        .map(|i| {
            col.clear();
            col.extend(terms.iter().map(|v| v[i]));
            col.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            col.iter().fold(S::zero(), |acc, &v| acc + v)
        })
        .collect()
}

/// True when `0 < w_orig <= w_hat_orig < w_edit`; logs a warning otherwise.
pub fn check_weight_guideline<S: Scalar>(w_orig: S, w_hat_orig: S, w_edit: S) -> bool {
    let ok = S::zero() < w_orig && w_orig <= w_hat_orig && w_hat_orig < w_edit;
    if !ok {
        log::warn!(
            "guidance weights w_orig={w_orig}, w_hat_orig={w_hat_orig}, w_edit={w_edit} \
             fall outside 0 < w_orig <= w_hat_orig < w_edit; edits may degrade"
        );
    }
    ok
}
