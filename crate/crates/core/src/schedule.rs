//! Discrete noise schedules and the per-step coefficients of the backward kernel.
//!
//! A schedule stores `alpha_bar[t]` for `t = 0..=T` with `alpha_bar[0] = 1`, so the
//! clean-data boundary `a_0 = 1, sigma_0 = 0` is part of the table rather than a
//! special case. The DDIM/DDPM interpolation weight `lambda` lives here too since
//! it fixes the transition variance `omega` of every step.

use crate::error::{Error, Result};
use crate::Scalar;

/// How to produce `alpha_bar` for a fresh schedule.
#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleRecipe {
    /// Betas evenly spaced on `[beta_min, beta_max]`, `alpha_bar` their cumulative product of `1 - beta`.
    LinearBeta { beta_min: f64, beta_max: f64 },
    /// Squared-cosine schedule with the usual small `offset` (0.008) and betas capped at 0.999.
    Cosine { offset: f64 },
    /// `alpha_bar[0..=T]` given directly.
    Explicit(Vec<f64>),
}

const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule<S> {
    alpha_bar: Vec<S>,
    lambda: S,
}

/// Coefficients of one backward step `t -> t-1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepParams<S> {
    pub t: usize,
    pub a_t: S,
    pub a_prev: S,
    pub sigma_t: S,
    pub sigma_prev: S,
    /// Standard deviation of the backward transition.
    pub omega: S,
    /// Multiplier of the noise prediction in the backward mean,
    /// `sqrt(sigma_prev^2 - omega^2) - sigma_t * a_prev / a_t`. Always negative.
    pub coef: S,
    /// Explicit (Langevin) step size, `-coef * sigma_t`.
    pub eta: S,
    /// Implicit step size, `-coef * sigma_prev`. Zero at `t = 1` because `sigma_0 = 0`.
    pub gamma: S,
}

/// Builds a `steps`-step schedule from a recipe.
pub fn build_schedule<S: Scalar>(
    steps: usize,
    recipe: &ScheduleRecipe,
    lambda: f64,
) -> Result<Schedule<S>> {
    if steps == 0 {
        return Err(Error::InvalidSchedule("step count must be at least 1".into()));
    }
    let alpha_bar: Vec<f64> = match recipe {
        ScheduleRecipe::LinearBeta { beta_min, beta_max } => {
            let (lo, hi) = (*beta_min, *beta_max);
            if !(lo > 0.0 && hi >= lo && hi < 1.0) {
                return Err(Error::InvalidSchedule(format!(
                    "linear betas need 0 < beta_min <= beta_max < 1, got [{lo}, {hi}]"
                )));
            }
            let betas = (0..steps).map(|i| {
                if steps == 1 {
                    lo
                } else {
                    lo + (hi - lo) * i as f64 / (steps - 1) as f64
                }
            });
            cumulative_alpha_bar(betas)
        }
        ScheduleRecipe::Cosine { offset } => {
            let s = *offset;
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::InvalidSchedule(format!("cosine offset must be >= 0, got {s}")));
            }
            let f = |t: usize| {
                let u = (t as f64 / steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
                u.cos().powi(2)
            };
            let betas = (1..=steps).map(|t| (1.0 - f(t) / f(t - 1)).min(MAX_BETA));
            cumulative_alpha_bar(betas)
        }
        ScheduleRecipe::Explicit(list) => {
            if list.len() != steps + 1 {
                return Err(Error::InvalidSchedule(format!(
                    "explicit alpha_bar needs {} entries for T={steps}, got {}",
                    steps + 1,
                    list.len()
                )));
            }
            list.clone()
        }
    };
    Schedule::from_alpha_bar(alpha_bar.into_iter().map(S::lit).collect(), S::lit(lambda))
}

fn cumulative_alpha_bar(betas: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut out = vec![1.0];
    let mut acc = 1.0;
    for b in betas {
        acc *= 1.0 - b;
        out.push(acc);
    }
    out
}

impl<S: Scalar> Schedule<S> {
    /// Validates and wraps an `alpha_bar` table (index 0 must be exactly 1).
    pub fn from_alpha_bar(alpha_bar: Vec<S>, lambda: S) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::InvalidSchedule("need at least alpha_bar[0] and alpha_bar[1]".into()));
        }
        if alpha_bar[0] != S::one() {
            return Err(Error::InvalidSchedule(format!(
                "alpha_bar[0] must be exactly 1, got {}",
                alpha_bar[0]
            )));
        }
        for (t, w) in alpha_bar.windows(2).enumerate() {
            if !(w[1] < w[0]) {
                return Err(Error::InvalidSchedule(format!(
                    "alpha_bar must be strictly decreasing: alpha_bar[{}]={} >= alpha_bar[{}]={}",
                    t + 1,
                    w[1],
                    t,
                    w[0]
                )));
            }
        }
        let last = *alpha_bar.last().unwrap();
        if !(last > S::zero()) {
            return Err(Error::InvalidSchedule(format!("alpha_bar[T] must be > 0, got {last}")));
        }
        if !(lambda >= S::zero() && lambda <= S::one()) {
            return Err(Error::InvalidSchedule(format!("lambda must lie in [0, 1], got {lambda}")));
        }
        Ok(Self { alpha_bar, lambda })
    }

    /// Number of steps `T`.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn lambda(&self) -> S {
        self.lambda
    }

    pub fn alpha_bars(&self) -> &[S] {
        &self.alpha_bar
    }

    pub fn with_lambda(&self, lambda: S) -> Result<Self> {
        Self::from_alpha_bar(self.alpha_bar.clone(), lambda)
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            Err(Error::TimestepOutOfRange { t, max: self.steps() })
        } else {
            Ok(())
        }
    }

    pub fn alpha_bar(&self, t: usize) -> Result<S> {
        self.check_t(t)?;
        Ok(self.alpha_bar[t])
    }

    /// Signal scale `a_t = sqrt(alpha_bar[t])`.
    pub fn a(&self, t: usize) -> Result<S> {
        Ok(self.alpha_bar(t)?.sqrt())
    }

    /// Noise scale `sigma_t = sqrt(1 - alpha_bar[t])`.
    pub fn sigma(&self, t: usize) -> Result<S> {
        Ok((S::one() - self.alpha_bar(t)?).sqrt())
    }

    /// Keeps `n` of the `T` steps, evenly spaced (`t_i = round(i * T / n)`),
    /// and re-indexes `alpha_bar` on them.
    pub fn respaced(&self, n: usize) -> Result<Self> {
        let total = self.steps();
        if n == 0 || n > total {
            return Err(Error::InvalidSchedule(format!(
                "cannot respace {total} steps to {n}"
            )));
        }
        let alpha_bar = (0..=n)
            .map(|i| {
                let t = ((i * total) as f64 / n as f64).round() as usize;
                self.alpha_bar[t]
            })
            .collect();
        Self::from_alpha_bar(alpha_bar, self.lambda)
    }

    /// Coefficients of the backward step from `t` to `t - 1`, `1 <= t <= T`.
    pub fn step_params(&self, t: usize) -> Result<StepParams<S>> {
        if t == 0 || t > self.steps() {
            return Err(Error::TimestepOutOfRange { t, max: self.steps() });
        }
        let a_t = self.a(t)?;
        let a_prev = self.a(t - 1)?;
        let sigma_t = self.sigma(t)?;
        let sigma_prev = self.sigma(t - 1)?;
        if sigma_t == S::zero() {
            return Err(Error::DegenerateSchedule { t });
        }
        let omega = omega(self.lambda, a_t, a_prev, sigma_t, sigma_prev);
        let coef = (sigma_prev * sigma_prev - omega * omega).max(S::zero()).sqrt()
            - sigma_t * a_prev / a_t;
        Ok(StepParams {
            t,
            a_t,
            a_prev,
            sigma_t,
            sigma_prev,
            omega,
            coef,
            eta: -coef * sigma_t,
            gamma: -coef * sigma_prev,
        })
    }
}

fn omega<S: Scalar>(lambda: S, a_t: S, a_prev: S, sigma_t: S, sigma_prev: S) -> S {
    let ratio = (a_t * a_t * sigma_prev * sigma_prev) / (a_prev * a_prev * sigma_t * sigma_t);
    // ratio <= 1 for a decreasing schedule; clamp the rounding overshoot
    lambda * sigma_prev * (S::one() - ratio).max(S::zero()).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(steps: usize, lambda: f64) -> Schedule<f64> {
        build_schedule(
            steps,
            &ScheduleRecipe::LinearBeta { beta_min: 1e-4, beta_max: 2e-2 },
            lambda,
        )
        .unwrap()
    }

    #[test]
    fn single_step_explicit() {
        let s: Schedule<f64> =
            build_schedule(1, &ScheduleRecipe::Explicit(vec![1.0, 0.25]), 0.0).unwrap();
        assert_eq!(s.a(1).unwrap(), 0.5);
        assert_eq!(s.sigma(1).unwrap(), 0.75f64.sqrt());
        assert_eq!(s.a(0).unwrap(), 1.0);
        assert_eq!(s.sigma(0).unwrap(), 0.0);
    }

    #[test]
    fn linear_thousand_steps_is_strictly_decreasing() {
        let s = linear(1000, 0.0);
        // independent cumulative product
        let mut acc = 1.0f64;
        for t in 1..=1000 {
            let beta = 1e-4 + (2e-2 - 1e-4) * (t - 1) as f64 / 999.0;
            acc *= 1.0 - beta;
            assert!((s.alpha_bar(t).unwrap() - acc).abs() < 1e-15);
            assert!(s.alpha_bar(t).unwrap() < s.alpha_bar(t - 1).unwrap());
        }
        assert!(s.alpha_bar(1000).unwrap() > 0.0);
    }

    #[test]
    fn non_monotone_explicit_is_rejected() {
        let r = build_schedule::<f64>(
            3,
            &ScheduleRecipe::Explicit(vec![1.0, 0.9, 0.5, 0.6]),
            0.0,
        );
        assert!(matches!(r, Err(Error::InvalidSchedule(_))));
        let r = build_schedule::<f64>(1, &ScheduleRecipe::Explicit(vec![0.99, 0.5]), 0.0);
        assert!(matches!(r, Err(Error::InvalidSchedule(_))));
        let r = build_schedule::<f64>(1, &ScheduleRecipe::Explicit(vec![1.0, 0.0]), 0.0);
        assert!(matches!(r, Err(Error::InvalidSchedule(_))));
        let r = build_schedule::<f64>(0, &ScheduleRecipe::Cosine { offset: 0.008 }, 0.0);
        assert!(matches!(r, Err(Error::InvalidSchedule(_))));
    }

    #[test]
    fn cosine_schedule_is_valid() {
        let s: Schedule<f64> =
            build_schedule(100, &ScheduleRecipe::Cosine { offset: 0.008 }, 1.0).unwrap();
        assert!(s.alpha_bar(100).unwrap() > 0.0);
        for t in 1..=100 {
            let p = s.step_params(t).unwrap();
            assert!(p.eta > 0.0);
        }
    }

    #[test]
    fn ddim_has_zero_omega() {
        let s = linear(50, 0.0);
        for t in 1..=50 {
            assert_eq!(s.step_params(t).unwrap().omega, 0.0);
        }
    }

    #[test]
    fn ddpm_omega_matches_closed_form() {
        let s = linear(50, 1.0);
        for t in 1..=50 {
            let p = s.step_params(t).unwrap();
            let expect = p.sigma_prev
                * (1.0
                    - p.a_t.powi(2) * p.sigma_prev.powi(2)
                        / (p.a_prev.powi(2) * p.sigma_t.powi(2)))
                .max(0.0)
                .sqrt();
            assert!((p.omega - expect).abs() < 1e-15);
            assert!(p.omega <= p.sigma_prev);
        }
    }

    #[test]
    fn step_sizes_are_positive_and_share_coef() {
        for lambda in [0.0, 0.3, 1.0] {
            let s = linear(200, lambda);
            for t in 1..=200 {
                let p = s.step_params(t).unwrap();
                assert!(p.coef < 0.0);
                assert!(p.eta > 0.0);
                if t == 1 {
                    assert_eq!(p.gamma, 0.0);
                } else {
                    assert!(p.gamma > 0.0);
                    assert!((p.eta / p.gamma - p.sigma_t / p.sigma_prev).abs() < 1e-12);
                }
                assert!(p.sigma_prev.powi(2) - p.omega.powi(2) >= 0.0);
            }
        }
    }

    #[test]
    fn unit_norm_identity() {
        let s = linear(1000, 0.0);
        for t in 0..=1000 {
            let (a, sg) = (s.a(t).unwrap(), s.sigma(t).unwrap());
            assert!((a * a + sg * sg - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn omega_monotone_in_lambda() {
        let base = linear(40, 0.0);
        for t in 1..=40 {
            let mut prev = -1.0;
            for i in 0..=10 {
                let s = base.with_lambda(i as f64 / 10.0).unwrap();
                let w = s.step_params(t).unwrap().omega;
                assert!(w >= prev);
                prev = w;
            }
        }
    }

    #[test]
    fn respacing_keeps_endpoints() {
        let s = linear(1000, 0.0);
        let r = s.respaced(50).unwrap();
        assert_eq!(r.steps(), 50);
        assert_eq!(r.alpha_bar(0).unwrap(), 1.0);
        assert_eq!(r.alpha_bar(50).unwrap(), s.alpha_bar(1000).unwrap());
        assert_eq!(r.alpha_bar(1).unwrap(), s.alpha_bar(20).unwrap());
        assert!(s.respaced(1001).is_err());
    }

    #[test]
    fn step_params_range() {
        let s = linear(10, 0.0);
        assert!(matches!(s.step_params(0), Err(Error::TimestepOutOfRange { .. })));
        assert!(matches!(s.step_params(11), Err(Error::TimestepOutOfRange { .. })));
    }

    #[test]
    fn works_in_single_precision() {
        let s: Schedule<f32> = build_schedule(
            50,
            &ScheduleRecipe::LinearBeta { beta_min: 1e-4, beta_max: 2e-2 },
            1.0,
        )
        .unwrap();
        assert!(s.step_params(10).unwrap().eta > 0.0);
    }
}
