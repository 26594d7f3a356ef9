//! Effectiveness and faithfulness summaries for edit runs.

use crate::error::{Error, Result};
use crate::hedit::EditTrace;
use crate::hfunc::FeatureReward;
use crate::model::{Label, MixtureModel};
use crate::schedule::Schedule;
use crate::vector;
use crate::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec<S> {
    pub target_label: Label,
    /// Direction the edit is supposed to move along; faithfulness ignores it.
    pub edit_direction: Option<Vec<S>>,
    pub reward: Option<FeatureReward<S>>,
}

/// Per-seed values with their mean and population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct Stats {
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl Stats {
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Self { values, mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { values, mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditReport {
    /// `p(target | x_0^edit)` per run.
    pub target_posterior: Stats,
    /// `|P_perp (x_0^edit - x_0^orig)|` per run.
    pub faithfulness: Stats,
    /// Task reward at `x_0^edit`, when the task has one.
    pub reward_value: Option<Stats>,
}

/// `I - v v^T / |v|^2`, row-major.
pub fn orthogonal_projector<S: Scalar>(direction: &[S]) -> Result<Vec<Vec<S>>> {
    let nn = vector::dot(direction, direction);
    if !(nn > S::zero()) {
        return Err(Error::Config("edit direction must be nonzero".into()));
    }
    let d = direction.len();
    Ok((0..d)
        .map(|i| {
            (0..d)
                .map(|j| {
                    let id = if i == j { S::one() } else { S::zero() };
                    id - direction[i] * direction[j] / nn
                })
                .collect()
        })
        .collect())
}

fn mat_vec<S: Scalar>(m: &[Vec<S>], v: &[S]) -> Vec<S> {
    m.iter().map(|row| vector::dot(row, v)).collect()
}

/// Distance between `x_edit` and `x_orig` after removing the component along `direction`.
pub fn faithfulness<S: Scalar>(x_edit: &[S], x_orig: &[S], direction: &[S]) -> Result<S> {
    let p = orthogonal_projector(direction)?;
    Ok(vector::norm(&mat_vec(&p, &vector::sub(x_edit, x_orig))))
}

pub fn evaluate<S: Scalar>(
    model: &MixtureModel<S>,
    sched: &Schedule<S>,
    traces: &[EditTrace<S>],
    task: &TaskSpec<S>,
) -> Result<EditReport> {
    let dir = task
        .edit_direction
        .as_deref()
        .ok_or_else(|| Error::Config("task has no edit direction for faithfulness".into()))?;
    if dir.len() != model.dim() {
        return Err(Error::Config("edit direction has wrong dimension".into()));
    }
    let proj = orthogonal_projector(dir)?;
    let mut post = Vec::with_capacity(traces.len());
    let mut faith = Vec::with_capacity(traces.len());
    let mut rew = Vec::with_capacity(traces.len());
    for tr in traces {
        post.push(model.class_posterior(sched, &tr.x0_edit, 0)?.prob(task.target_label).as_f64());
        let delta = vector::sub(&tr.x0_edit, &tr.x0_orig);
        faith.push(vector::norm(&mat_vec(&proj, &delta)).as_f64());
        if let Some(r) = &task.reward {
            rew.push(r.value(&tr.x0_edit).as_f64());
        }
    }
    Ok(EditReport {
        target_posterior: Stats::from_values(post),
        faithfulness: Stats::from_values(faith),
        reward_value: task.reward.as_ref().map(|_| Stats::from_values(rew)),
    })
}

impl EditReport {
    pub const CSV_COLUMNS: [&'static str; 7] = [
        "runs",
        "target_posterior_mean",
        "target_posterior_std",
        "faithfulness_mean",
        "faithfulness_std",
        "reward_mean",
        "reward_std",
    ];

    /// Fields in [`Self::CSV_COLUMNS`] order; missing reward columns are empty.
    pub fn csv_fields(&self) -> Vec<String> {
        let (rm, rs) = match &self.reward_value {
            Some(r) => (r.mean.to_string(), r.std.to_string()),
            None => (String::new(), String::new()),
        };
        vec![
            self.target_posterior.values.len().to_string(),
            self.target_posterior.mean.to_string(),
            self.target_posterior.std.to_string(),
            self.faithfulness.mean.to_string(),
            self.faithfulness.std.to_string(),
            rm,
            rs,
        ]
    }
}
