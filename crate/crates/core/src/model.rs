//! Labeled isotropic Gaussian mixture standing in for a trained noise predictor.
//!
//! Under the forward kernel `x_t = a_t x_0 + sigma_t z` a mixture stays a mixture:
//! component `k` becomes `N(a_t mu_k, (a_t^2 s_k^2 + sigma_t^2) I)`. Every quantity the
//! editing engine needs (scores, noise predictions, class posteriors, posterior
//! means) therefore has a closed form in terms of the component responsibilities,
//! which are computed in log space.

use std::collections::BTreeSet;

use rand::Rng;

use crate::error::{Error, Result};
use crate::schedule::Schedule;
use crate::vector::{self, log_sum_exp};
use crate::Scalar;

pub type Label = u32;

/// Which part of the mixture a query conditions on.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Condition {
    Unconditional,
    Labels(BTreeSet<Label>),
}

impl Condition {
    pub fn label(l: Label) -> Self {
        Condition::Labels(BTreeSet::from([l]))
    }

    pub fn labels(ls: impl IntoIterator<Item = Label>) -> Self {
        Condition::Labels(ls.into_iter().collect())
    }

    pub fn admits(&self, l: Label) -> bool {
        match self {
            Condition::Unconditional => true,
            Condition::Labels(set) => set.contains(&l),
        }
    }
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Condition::Unconditional => write!(f, "none"),
            Condition::Labels(set) => {
                let parts: Vec<String> = set.iter().map(|l| l.to_string()).collect();
                write!(f, "{}", parts.join(";"))
            }
        }
    }
}

impl std::str::FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s == "none" {
            return Ok(Condition::Unconditional);
        }
        s.split(';')
            .map(|p| {
                p.trim()
                    .parse::<Label>()
                    .map_err(|_| Error::InvalidCondition(format!("bad label {p:?}")))
            })
            .collect::<Result<BTreeSet<_>>>()
            .map(Condition::Labels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Component<S> {
    pub weight: S,
    pub mean: Vec<S>,
    /// Isotropic standard deviation; zero makes a point mass.
    pub std: S,
    pub label: Label,
}

/// Exact parameters of one component of `p_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalComponent<S> {
    pub weight: S,
    pub mean: Vec<S>,
    pub var: S,
    pub label: Label,
}

/// `p(y = label | x_t)` for every label of the model, labels ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelPosterior<S> {
    pub labels: Vec<Label>,
    pub probs: Vec<S>,
}

impl<S: Scalar> LabelPosterior<S> {
    pub fn prob(&self, label: Label) -> S {
        self.labels
            .iter()
            .position(|&l| l == label)
            .map_or(S::zero(), |i| self.probs[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureModel<S> {
    dim: usize,
    components: Vec<Component<S>>,
}

impl<S: Scalar> MixtureModel<S> {
    pub fn new(components: Vec<Component<S>>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::InvalidModel("mixture needs at least one component".into()))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(Error::InvalidModel("dimension must be positive".into()));
        }
        let mut total = S::zero();
        for (k, c) in components.iter().enumerate() {
            if c.mean.len() != dim {
                return Err(Error::InvalidModel(format!(
                    "component {k} has dimension {}, expected {dim}",
                    c.mean.len()
                )));
            }
            if !(c.weight > S::zero() && c.weight.is_finite()) {
                return Err(Error::InvalidModel(format!("component {k} weight must be > 0")));
            }
            if !(c.std >= S::zero() && c.std.is_finite()) || !vector::all_finite(&c.mean) {
                return Err(Error::InvalidModel(format!("component {k} has invalid mean/std")));
            }
            total += c.weight;
        }
        let tol = S::lit(1e-12).max(S::epsilon() * S::lit(16.0));
        if (total - S::one()).abs() > tol {
            return Err(Error::InvalidModel(format!("weights sum to {total}, expected 1")));
        }
        Ok(Self { dim, components })
    }

    /// Builds a mixture from unnormalized weights.
    pub fn normalized(mut components: Vec<Component<S>>) -> Result<Self> {
        let total: S = components.iter().map(|c| c.weight).sum();
        if !(total > S::zero()) {
            return Err(Error::InvalidModel("weights must be positive".into()));
        }
        for c in &mut components {
            c.weight /= total;
        }
        Self::new(components)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Component<S>] {
        &self.components
    }

    /// Distinct labels, ascending.
    pub fn labels(&self) -> Vec<Label> {
        let set: BTreeSet<Label> = self.components.iter().map(|c| c.label).collect();
        set.into_iter().collect()
    }

    /// Checks that a condition names only existing labels.
    pub fn validate_condition(&self, cond: &Condition) -> Result<()> {
        if let Condition::Labels(set) = cond {
            if set.is_empty() {
                return Err(Error::InvalidCondition("label set is empty".into()));
            }
            for l in set {
                if !self.components.iter().any(|c| c.label == *l) {
                    return Err(Error::InvalidCondition(format!("label {l} not in model")));
                }
            }
        }
        Ok(())
    }

    fn selected(&self, cond: &Condition) -> Result<Vec<usize>> {
        self.validate_condition(cond)?;
        let idx: Vec<usize> = (0..self.components.len())
            .filter(|&k| cond.admits(self.components[k].label))
            .collect();
        if idx.is_empty() {
            return Err(Error::InvalidCondition("condition selects zero weight".into()));
        }
        Ok(idx)
    }

    fn check_dim(&self, x: &[S]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Domain(format!(
                "point has dimension {}, model has {}",
                x.len(),
                self.dim
            )));
        }
        Ok(())
    }

    /// Exact component parameters of the time-`t` marginal.
    pub fn marginal_params(&self, sched: &Schedule<S>, t: usize) -> Result<Vec<MarginalComponent<S>>> {
        let a = sched.a(t)?;
        let sigma = sched.sigma(t)?;
        Ok(self
            .components
            .iter()
            .map(|c| MarginalComponent {
                weight: c.weight,
                mean: vector::scale(&c.mean, a),
                var: a * a * c.std * c.std + sigma * sigma,
                label: c.label,
            })
            .collect())
    }

    /// Selected component indices, their marginals, and `log pi_k + log N(x; m_k, v_k I)`.
    fn log_joint(
        &self,
        sched: &Schedule<S>,
        x: &[S],
        t: usize,
        cond: &Condition,
    ) -> Result<(Vec<MarginalComponent<S>>, Vec<S>)> {
        self.check_dim(x)?;
        let idx = self.selected(cond)?;
        let a = sched.a(t)?;
        let sigma = sched.sigma(t)?;
        let d = S::lit(self.dim as f64);
        let two_pi = S::lit(2.0) * S::PI();
        let mut comps = Vec::with_capacity(idx.len());
        let mut logs = Vec::with_capacity(idx.len());
        for k in idx {
            let c = &self.components[k];
            let var = a * a * c.std * c.std + sigma * sigma;
            if var == S::zero() {
                return Err(Error::Domain(format!(
                    "component {k} is a point mass at t={t}; density undefined"
                )));
            }
            let mean = vector::scale(&c.mean, a);
            let q = vector::sq_dist(x, &mean);
            logs.push(c.weight.ln() - S::lit(0.5) * (d * (two_pi * var).ln() + q / var));
            comps.push(MarginalComponent { weight: c.weight, mean, var, label: c.label });
        }
        Ok((comps, logs))
    }

    /// Log density of the condition-restricted, renormalized marginal at time `t`.
    pub fn log_density(&self, sched: &Schedule<S>, x: &[S], t: usize, cond: &Condition) -> Result<S> {
        let (comps, logs) = self.log_joint(sched, x, t, cond)?;
        let mass: S = comps.iter().map(|c| c.weight).sum();
        Ok(log_sum_exp(&logs) - mass.ln())
    }

    fn responsibilities_of(logs: &[S]) -> Vec<S> {
        let lse = log_sum_exp(logs);
        logs.iter().map(|&l| (l - lse).exp()).collect()
    }

    /// `grad_x log p_t(x | cond)`.
    pub fn score(&self, sched: &Schedule<S>, x: &[S], t: usize, cond: &Condition) -> Result<Vec<S>> {
        let (comps, logs) = self.log_joint(sched, x, t, cond)?;
        let resp = Self::responsibilities_of(&logs);
        let mut out = vector::zeros(self.dim);
        for (c, r) in comps.iter().zip(resp) {
            for i in 0..self.dim {
                out[i] += r * (c.mean[i] - x[i]) / c.var;
            }
        }
        Ok(out)
    }

    /// Hessian of `log p_t(x | cond)`, row-major `d x d`.
    ///
    /// With `g_k = (m_k - x) / v_k` and responsibilities `r_k`:
    /// `H = sum_k r_k (g_k g_k^T - I / v_k) - gbar gbar^T`.
    pub fn score_jacobian(
        &self,
        sched: &Schedule<S>,
        x: &[S],
        t: usize,
        cond: &Condition,
    ) -> Result<Vec<Vec<S>>> {
        let (comps, logs) = self.log_joint(sched, x, t, cond)?;
        let resp = Self::responsibilities_of(&logs);
        let d = self.dim;
        let mut h: Vec<Vec<S>> = vec![vector::zeros(d); d];
        let mut gbar: Vec<S> = vector::zeros(d);
        for (c, r) in comps.iter().zip(resp) {
            let g: Vec<S> = (0..d).map(|i| (c.mean[i] - x[i]) / c.var).collect();
            for i in 0..d {
                gbar[i] += r * g[i];
                h[i][i] -= r / c.var;
                for j in 0..d {
                    h[i][j] += r * g[i] * g[j];
                }
            }
        }
        for i in 0..d {
            for j in 0..d {
                h[i][j] -= gbar[i] * gbar[j];
            }
        }
        Ok(h)
    }

    /// Noise prediction `-sigma_t * score`; identically zero where `sigma_t = 0`.
    pub fn noise_pred(&self, sched: &Schedule<S>, x: &[S], t: usize, cond: &Condition) -> Result<Vec<S>> {
        let sigma = sched.sigma(t)?;
        if sigma == S::zero() {
            self.check_dim(x)?;
            self.validate_condition(cond)?;
            return Ok(vector::zeros(self.dim));
        }
        Ok(vector::scale(&self.score(sched, x, t, cond)?, -sigma))
    }

    /// Classifier-free guidance `w * eps(c) + (1 - w) * eps(none)`; `cond` must be a label set.
    pub fn cfg_noise_pred(
        &self,
        sched: &Schedule<S>,
        x: &[S],
        t: usize,
        cond: &Condition,
        w: S,
    ) -> Result<Vec<S>> {
        if *cond == Condition::Unconditional {
            return Err(Error::InvalidCondition("guidance needs a label set".into()));
        }
        let ec = self.noise_pred(sched, x, t, cond)?;
        let eu = self.noise_pred(sched, x, t, &Condition::Unconditional)?;
        Ok(vector::lincomb(w, &ec, S::one() - w, &eu))
    }

    /// Guided noise prediction; for the unconditional case the weight is irrelevant.
    pub fn guided_noise(
        &self,
        sched: &Schedule<S>,
        x: &[S],
        t: usize,
        cond: &Condition,
        w: S,
    ) -> Result<Vec<S>> {
        match cond {
            Condition::Unconditional => self.noise_pred(sched, x, t, cond),
            Condition::Labels(_) => self.cfg_noise_pred(sched, x, t, cond, w),
        }
    }

    /// Score counterpart of [`Self::guided_noise`]: `w * s(c) + (1 - w) * s(none)`.
    pub fn guided_score(
        &self,
        sched: &Schedule<S>,
        x: &[S],
        t: usize,
        cond: &Condition,
        w: S,
    ) -> Result<Vec<S>> {
        match cond {
            Condition::Unconditional => self.score(sched, x, t, cond),
            Condition::Labels(_) => {
                let sc = self.score(sched, x, t, cond)?;
                let su = self.score(sched, x, t, &Condition::Unconditional)?;
                Ok(vector::lincomb(w, &sc, S::one() - w, &su))
            }
        }
    }

    /// Exact `p(y | x_t)` aggregated per label.
    pub fn class_posterior(&self, sched: &Schedule<S>, x: &[S], t: usize) -> Result<LabelPosterior<S>> {
        let (comps, logs) = self.log_joint(sched, x, t, &Condition::Unconditional)?;
        let resp = Self::responsibilities_of(&logs);
        let labels = self.labels();
        let mut probs = vector::zeros(labels.len());
        for (c, r) in comps.iter().zip(resp) {
            let i = labels.binary_search(&c.label).expect("label from model");
            probs[i] += r;
        }
        Ok(LabelPosterior { labels, probs })
    }

    /// `log p(label | x_t)`, computed as `-softplus(lse_other - lse_label)` so that
    /// posteriors near one keep full relative precision.
    pub fn log_class_posterior(&self, sched: &Schedule<S>, x: &[S], t: usize, label: Label) -> Result<S> {
        self.validate_condition(&Condition::label(label))?;
        let (comps, logs) = self.log_joint(sched, x, t, &Condition::Unconditional)?;
        let (mut own, mut other) = (Vec::new(), Vec::new());
        for (c, l) in comps.iter().zip(logs) {
            if c.label == label {
                own.push(l);
            } else {
                other.push(l);
            }
        }
        let d = log_sum_exp(&other) - log_sum_exp(&own);
        if d == S::neg_infinity() {
            return Ok(S::zero());
        }
        Ok(if d > S::zero() { -(d + (-d).exp().ln_1p()) } else { -d.exp().ln_1p() })
    }

    /// `E[x_0 | x_t, cond]` by per-component Gaussian conjugacy.
    pub fn x0_posterior_mean(
        &self,
        sched: &Schedule<S>,
        x: &[S],
        t: usize,
        cond: &Condition,
    ) -> Result<Vec<S>> {
        let a = sched.a(t)?;
        if sched.sigma(t)? == S::zero() {
            self.check_dim(x)?;
            return Ok(x.to_vec());
        }
        let (comps, logs) = self.log_joint(sched, x, t, cond)?;
        let resp = Self::responsibilities_of(&logs);
        let idx = self.selected(cond)?;
        let mut out = vector::zeros(self.dim);
        for ((c, r), k) in comps.iter().zip(resp).zip(idx) {
            let s2 = self.components[k].std * self.components[k].std;
            let gain = a * s2 / c.var;
            let mu = &self.components[k].mean;
            for i in 0..self.dim {
                out[i] += r * (mu[i] + gain * (x[i] - c.mean[i]));
            }
        }
        Ok(out)
    }

    /// Draws `x_0` from the condition-restricted data distribution.
    pub fn sample_data<R: Rng + ?Sized>(&self, rng: &mut R, cond: &Condition) -> Result<Vec<S>> {
        let idx = self.selected(cond)?;
        let total: f64 = idx.iter().map(|&k| self.components[k].weight.as_f64()).sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = *idx.last().unwrap();
        for &k in &idx {
            u -= self.components[k].weight.as_f64();
            if u < 0.0 {
                pick = k;
                break;
            }
        }
        let c = &self.components[pick];
        let z = vector::standard_normal::<S, _>(rng, self.dim);
        Ok(vector::lincomb(S::one(), &c.mean, c.std, &z))
    }
}

/// `x_t = a_t x_0 + sigma_t z`; returns `x_0` unchanged at `t = 0`.
pub fn forward_sample<S: Scalar, R: Rng + ?Sized>(
    x0: &[S],
    t: usize,
    sched: &Schedule<S>,
    rng: &mut R,
) -> Result<Vec<S>> {
    if t == 0 {
        sched.check_t(t)?;
        return Ok(x0.to_vec());
    }
    let z = vector::standard_normal::<S, _>(rng, x0.len());
    Ok(vector::lincomb(sched.a(t)?, x0, sched.sigma(t)?, &z))
}
