//! Finite-state reverse chains and their h-transforms.
//!
//! `kernels[t - 1][i][j] = p(x_{t-1} = j | x_t = i)` for `t = 1..=T`, and
//! `p_terminal` is the law of `x_T`. Everything here is plain `f64`: the chains
//! are small and serve as exact references.

use rand::Rng;
use rand_distr::{Distribution, Exp1};

use crate::error::{Error, Result};

const ROW_TOL: f64 = 1e-12;

pub type Matrix = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteChain {
    kernels: Vec<Matrix>,
    p_terminal: Vec<f64>,
}

/// `h[t]` for `t = 0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct HTable {
    pub h: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginalReport {
    /// `max_{t, x} |p^h(x_t) - p(x_t) h(x_t, t) / Z|`.
    pub max_abs_error: f64,
    /// Largest deviation of normalized `p^h(x_0)` from normalized `p(x_0) h_0`.
    pub corollary_error: f64,
    pub z: f64,
}

fn check_distribution(v: &[f64], what: &str) -> Result<()> {
    if v.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(Error::InvalidChain(format!("{what} has a negative or non-finite entry")));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > ROW_TOL {
        return Err(Error::InvalidChain(format!("{what} sums to {s}")));
    }
    Ok(())
}

fn dirichlet_ones<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let draws: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let s: f64 = draws.iter().sum();
    draws.into_iter().map(|v| v / s).collect()
}

impl DiscreteChain {
    pub fn new(kernels: Vec<Matrix>, p_terminal: Vec<f64>) -> Result<Self> {
        let s = p_terminal.len();
        if s == 0 || kernels.is_empty() {
            return Err(Error::InvalidChain("need at least one state and one step".into()));
        }
        check_distribution(&p_terminal, "p_terminal")?;
        for (k, m) in kernels.iter().enumerate() {
            if m.len() != s || m.iter().any(|r| r.len() != s) {
                return Err(Error::InvalidChain(format!("kernel {} is not {s}x{s}", k + 1)));
            }
            for (i, row) in m.iter().enumerate() {
                check_distribution(row, &format!("row {i} of kernel {}", k + 1))?;
            }
        }
        Ok(Self { kernels, p_terminal })
    }

    /// Random chain with Dirichlet(1, ..., 1) rows and terminal law.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, states: usize, steps: usize) -> Result<Self> {
        let kernels = (0..steps)
            .map(|_| (0..states).map(|_| dirichlet_ones(rng, states)).collect())
            .collect();
        let p_terminal = dirichlet_ones(rng, states);
        Self::new(kernels, p_terminal)
    }

    pub fn states(&self) -> usize {
        self.p_terminal.len()
    }

    pub fn steps(&self) -> usize {
        self.kernels.len()
    }

    /// Kernel of the step `t -> t - 1`.
    pub fn kernel(&self, t: usize) -> &Matrix {
        &self.kernels[t - 1]
    }

    pub fn p_terminal(&self) -> &[f64] {
        &self.p_terminal
    }

    /// `h[0] = h0`, `h[t] = P[t] h[t - 1]`.
    pub fn h_recursion(&self, h0: &[f64]) -> Result<HTable> {
        if h0.len() != self.states() {
            return Err(Error::Domain(format!("h0 has {} entries, chain has {} states", h0.len(), self.states())));
        }
        if h0.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Domain("h0 must be strictly positive".into()));
        }
        let mut h = vec![h0.to_vec()];
        for t in 1..=self.steps() {
            let prev = &h[t - 1];
            let next = self
                .kernel(t)
                .iter()
                .map(|row| row.iter().zip(prev).map(|(p, v)| p * v).sum())
                .collect();
            h.push(next);
        }
        Ok(HTable { h })
    }

    /// `P^h[t][i][j] = P[t][i][j] h[t - 1][j] / h[t][i]`.
    pub fn doob_kernel(&self, table: &HTable) -> Result<Self> {
        if table.h.len() != self.steps() + 1 {
            return Err(Error::Domain("h table length does not match chain".into()));
        }
        if table.h.iter().flatten().any(|&v| !(v > 0.0)) {
            return Err(Error::Domain("h table has a nonpositive entry".into()));
        }
        let kernels = (1..=self.steps())
            .map(|t| {
                let (hp, ht) = (&table.h[t - 1], &table.h[t]);
                self.kernel(t)
                    .iter()
                    .enumerate()
                    .map(|(i, row)| row.iter().zip(hp).map(|(p, v)| p * v / ht[i]).collect())
                    .collect()
            })
            .collect();
        let p_terminal = self.tilted_terminal(table);
        Ok(Self { kernels, p_terminal })
    }

    /// `p(x_T) h[T] / Z`.
    fn tilted_terminal(&self, table: &HTable) -> Vec<f64> {
        let ht = &table.h[self.steps()];
        let w: Vec<f64> = self.p_terminal.iter().zip(ht).map(|(p, h)| p * h).collect();
        let z: f64 = w.iter().sum();
        w.into_iter().map(|v| v / z).collect()
    }

    /// `marginals()[t]` is the law of `x_t`.
    pub fn marginals(&self) -> Vec<Vec<f64>> {
        let n = self.states();
        let mut out = vec![Vec::new(); self.steps() + 1];
        out[self.steps()] = self.p_terminal.clone();
        for t in (1..=self.steps()).rev() {
            let cur = &out[t];
            let mut prev = vec![0.0; n];
            for (i, row) in self.kernel(t).iter().enumerate() {
                for (j, p) in row.iter().enumerate() {
                    prev[j] += cur[i] * p;
                }
            }
            out[t - 1] = prev;
        }
        out
    }

    /// Largest `|row sum - 1|` over every kernel.
    pub fn max_row_error(&self) -> f64 {
        self.kernels
            .iter()
            .flatten()
            .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Transforms the chain by `h0` and compares its marginals with the tilted
    /// marginals `p(x_t) h(x_t, t) / Z` of the original chain.
    pub fn verify_marginal_identity(&self, h0: &[f64]) -> Result<MarginalReport> {
        let table = self.h_recursion(h0)?;
        let doob = self.doob_kernel(&table)?;
        let p = self.marginals();
        let ph = doob.marginals();
        let z: f64 = p[0].iter().zip(h0).map(|(a, b)| a * b).sum();
        let mut max_abs_error = 0.0f64;
        for t in 0..=self.steps() {
            for i in 0..self.states() {
                let want = p[t][i] * table.h[t][i] / z;
                max_abs_error = max_abs_error.max((ph[t][i] - want).abs());
            }
        }
        let tilt: Vec<f64> = p[0].iter().zip(h0).map(|(a, b)| a * b).collect();
        let ts: f64 = tilt.iter().sum();
        let hs: f64 = ph[0].iter().sum();
        let corollary_error = tilt
            .iter()
            .zip(&ph[0])
            .map(|(a, b)| (a / ts - b / hs).abs())
            .fold(0.0, f64::max);
        Ok(MarginalReport { max_abs_error, corollary_error, z })
    }
}
