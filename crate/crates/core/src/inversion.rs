//! Inversion: the original trajectory `{x_t}` and its residuals `{u_t}`.
//!
//! Both inversion flavors end in the same record. Residuals are defined by
//! `u_t = x_{t-1} - mean_step(x_t)`, so replaying the backward means from `x_T`
//! and adding `u_t` reproduces the stored trajectory step by step.

use std::io::{BufRead, BufReader, Read, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{Condition, MixtureModel};
use crate::schedule::Schedule;
use crate::vector;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InversionMode {
    /// DDIM inversion, built sequentially.
    Deterministic,
    /// Edit-friendly inversion: every `x_t` drawn independently from `p(x_t | x_0)`.
    Random,
}

impl InversionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InversionMode::Deterministic => "deterministic",
            InversionMode::Random => "random",
        }
    }
}

impl std::str::FromStr for InversionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deterministic" => Ok(InversionMode::Deterministic),
            "random" => Ok(InversionMode::Random),
            other => Err(Error::Config(format!("unknown inversion mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InversionRecord<S> {
    pub mode: InversionMode,
    /// `x_traj[t]` for `t = 0..=T`; index 0 is the original point.
    pub x_traj: Vec<Vec<S>>,
    /// `u_res[t - 1]` holds `u_t` for `t = 1..=T`.
    pub u_res: Vec<Vec<S>>,
    pub cond_orig: Condition,
    pub w_orig: S,
    /// `lambda` of the schedule the residuals were computed under.
    pub lambda: S,
}

impl<S: Scalar> InversionRecord<S> {
    pub fn steps(&self) -> usize {
        self.u_res.len()
    }

    pub fn dim(&self) -> usize {
        self.x_traj[0].len()
    }

    pub fn x(&self, t: usize) -> Result<&[S]> {
        self.x_traj
            .get(t)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Record(format!("no trajectory point at t={t}")))
    }

    pub fn residual(&self, t: usize) -> Result<&[S]> {
        if t == 0 {
            return Err(Error::Record("residuals start at t=1".into()));
        }
        self.u_res
            .get(t - 1)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Record(format!("no residual at t={t}")))
    }

    /// Errors unless the record was built under `sched`'s step count and `lambda`.
    pub fn check_compatible(&self, sched: &Schedule<S>) -> Result<()> {
        if self.steps() != sched.steps() {
            return Err(Error::Record(format!(
                "record has {} steps, schedule has {}",
                self.steps(),
                sched.steps()
            )));
        }
        if self.lambda != sched.lambda() {
            return Err(Error::ModeMismatch(format!(
                "record built with lambda={}, schedule uses lambda={}",
                self.lambda,
                sched.lambda()
            )));
        }
        Ok(())
    }

    /// Largest `|x_{t-1} - mean_step(x_t) - u_t|` over the record.
    pub fn telescoping_error(&self, model: &MixtureModel<S>, sched: &Schedule<S>) -> Result<S> {
        let mut worst = S::zero();
        for t in 1..=self.steps() {
            let mean = mean_step(model, sched, self.x(t)?, t, &self.cond_orig, self.w_orig)?;
            let recon = vector::add(&mean, self.residual(t)?);
            worst = worst.max(vector::max_abs_diff(&recon, self.x(t - 1)?));
        }
        Ok(worst)
    }

    /// Writes the record as CSV: two `#` header lines, then one row per vector.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# hbridge inversion record v1")?;
        writeln!(
            w,
            "# steps={} dim={} mode={} w_orig={} lambda={} cond={}",
            self.steps(),
            self.dim(),
            self.mode.as_str(),
            self.w_orig.as_f64(),
            self.lambda.as_f64(),
            self.cond_orig
        )?;
        let cols: Vec<String> = (0..self.dim()).map(|i| format!("c{i}")).collect();
        writeln!(w, "kind,t,{}", cols.join(","))?;
        let row = |w: &mut W, kind: &str, t: usize, v: &[S]| -> Result<()> {
            let vals: Vec<String> = v.iter().map(|x| x.as_f64().to_string()).collect();
            writeln!(w, "{kind},{t},{}", vals.join(","))?;
            Ok(())
        };
        for (t, x) in self.x_traj.iter().enumerate() {
            row(&mut w, "x", t, x)?;
        }
        for (i, u) in self.u_res.iter().enumerate() {
            row(&mut w, "u", i + 1, u)?;
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut reader = BufReader::new(r);
        let mut line = String::new();
        reader.read_line(&mut line)?;
        if line.trim() != "# hbridge inversion record v1" {
            return Err(Error::Record(format!("unexpected header {:?}", line.trim())));
        }
        line.clear();
        reader.read_line(&mut line)?;
        let meta = line
            .trim()
            .strip_prefix('#')
            .ok_or_else(|| Error::Record("missing metadata line".into()))?;
        let field = |key: &str| -> Result<&str> {
            meta.split_whitespace()
                .find_map(|kv| kv.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
                .ok_or_else(|| Error::Record(format!("metadata lacks {key}")))
        };
        let num = |key: &str| -> Result<f64> {
            field(key)?
                .parse::<f64>()
                .map_err(|e| Error::Record(format!("{key}: {e}")))
        };
        let steps = num("steps")? as usize;
        let dim = num("dim")? as usize;
        let mode: InversionMode = field("mode")?.parse()?;
        let w_orig = S::lit(num("w_orig")?);
        let lambda = S::lit(num("lambda")?);
        let cond_orig: Condition = field("cond")?.parse()?;

        let mut csv = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let mut x_traj = Vec::with_capacity(steps + 1);
        let mut u_res = Vec::with_capacity(steps);
        for rec in csv.records() {
            let rec = rec?;
            if rec.len() != dim + 2 {
                return Err(Error::Record(format!("row has {} fields, want {}", rec.len(), dim + 2)));
            }
            let t: usize = rec[1].parse().map_err(|_| Error::Record("bad t".into()))?;
            let v = rec
                .iter()
                .skip(2)
                .map(|f| f.parse::<f64>().map(S::lit))
                .collect::<std::result::Result<Vec<S>, _>>()
                .map_err(|e| Error::Record(e.to_string()))?;
            match &rec[0] {
                "x" if t == x_traj.len() => x_traj.push(v),
                "u" if t == u_res.len() + 1 => u_res.push(v),
                k => return Err(Error::Record(format!("unexpected row {k},{t}"))),
            }
        }
        if x_traj.len() != steps + 1 || u_res.len() != steps {
            return Err(Error::Record("truncated record".into()));
        }
        Ok(Self { mode, x_traj, u_res, cond_orig, w_orig, lambda })
    }
}

/// Backward transition mean `(a_{t-1}/a_t) x_t + coef * eps_guided(x_t, t, cond)`.
pub fn mean_step<S: Scalar>(
    model: &MixtureModel<S>,
    sched: &Schedule<S>,
    x_t: &[S],
    t: usize,
    cond: &Condition,
    w: S,
) -> Result<Vec<S>> {
    let p = sched.step_params(t)?;
    let eps = model.guided_noise(sched, x_t, t, cond, w)?;
    Ok(vector::lincomb(p.a_prev / p.a_t, x_t, p.coef, &eps))
}

/// Deterministic backward pass `x_{t-1} = mean_step(x_t)` from `x_T` to `x_0`.
pub fn ddim_sample<S: Scalar>(
    model: &MixtureModel<S>,
    sched: &Schedule<S>,
    x_t: &[S],
    cond: &Condition,
    w: S,
) -> Result<Vec<S>> {
    let mut x = x_t.to_vec();
    for t in (1..=sched.steps()).rev() {
        x = mean_step(model, sched, &x, t, cond, w)?;
    }
    Ok(x)
}

fn residuals<S: Scalar>(
    model: &MixtureModel<S>,
    sched: &Schedule<S>,
    x_traj: &[Vec<S>],
    cond: &Condition,
    w: S,
) -> Result<Vec<Vec<S>>> {
    (1..=sched.steps())
        .map(|t| {
            let mean = mean_step(model, sched, &x_traj[t], t, cond, w)?;
            Ok(vector::sub(&x_traj[t - 1], &mean))
        })
        .collect()
}

/// DDIM inversion:
/// `x_t = (a_t/a_{t-1}) x_{t-1} + (sigma_t - sigma_{t-1} a_t/a_{t-1}) eps_guided(x_{t-1}, t-1, cond)`.
///
/// Needs a `lambda = 0` schedule.
pub fn ddim_invert<S: Scalar>(
    model: &MixtureModel<S>,
    sched: &Schedule<S>,
    x0: &[S],
    cond: &Condition,
    w: S,
) -> Result<InversionRecord<S>> {
    if sched.lambda() != S::zero() {
        return Err(Error::ModeMismatch(format!(
            "deterministic inversion needs lambda=0, schedule has {}",
            sched.lambda()
        )));
    }
    model.validate_condition(cond)?;
    let mut x_traj = Vec::with_capacity(sched.steps() + 1);
    x_traj.push(x0.to_vec());
    for t in 1..=sched.steps() {
        let (a_t, a_prev) = (sched.a(t)?, sched.a(t - 1)?);
        let (s_t, s_prev) = (sched.sigma(t)?, sched.sigma(t - 1)?);
        let prev = &x_traj[t - 1];
        let eps = model.guided_noise(sched, prev, t - 1, cond, w)?;
        let next = vector::lincomb(a_t / a_prev, prev, s_t - s_prev * a_t / a_prev, &eps);
        x_traj.push(next);
    }
    let u_res = residuals(model, sched, &x_traj, cond, w)?;
    Ok(InversionRecord {
        mode: InversionMode::Deterministic,
        x_traj,
        u_res,
        cond_orig: cond.clone(),
        w_orig: w,
        lambda: sched.lambda(),
    })
}

/// Edit-friendly inversion with independent `z_t ~ N(0, I)` drawn from `rng`.
pub fn ef_invert<S: Scalar, R: Rng + ?Sized>(
    model: &MixtureModel<S>,
    sched: &Schedule<S>,
    x0: &[S],
    cond: &Condition,
    w: S,
    rng: &mut R,
) -> Result<InversionRecord<S>> {
    let noises: Vec<Vec<S>> = (0..sched.steps())
        .map(|_| vector::standard_normal(rng, x0.len()))
        .collect();
    ef_invert_with_noise(model, sched, x0, cond, w, &noises)
}

/// Edit-friendly inversion with caller-supplied noises, `noises[t - 1]` used for `x_t`.
pub fn ef_invert_with_noise<S: Scalar>(
    model: &MixtureModel<S>,
    sched: &Schedule<S>,
    x0: &[S],
    cond: &Condition,
    w: S,
    noises: &[Vec<S>],
) -> Result<InversionRecord<S>> {
    if noises.len() != sched.steps() {
        return Err(Error::Record(format!(
            "need {} noise vectors, got {}",
            sched.steps(),
            noises.len()
        )));
    }
    model.validate_condition(cond)?;
    let mut x_traj = Vec::with_capacity(sched.steps() + 1);
    x_traj.push(x0.to_vec());
    for (i, z) in noises.iter().enumerate() {
        let t = i + 1;
        x_traj.push(vector::lincomb(sched.a(t)?, x0, sched.sigma(t)?, z));
    }
    let u_res = residuals(model, sched, &x_traj, cond, w)?;
    Ok(InversionRecord {
        mode: InversionMode::Random,
        x_traj,
        u_res,
        cond_orig: cond.clone(),
        w_orig: w,
        lambda: sched.lambda(),
    })
}
