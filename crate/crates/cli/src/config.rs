//! Experiment configuration files (TOML).

use std::collections::BTreeSet;
use std::path::PathBuf;

use hbridge::{
    build_schedule, Component, Condition, EditConfig, EditExpert, EngineMode, FeatureMap, FeatureReward,
    InversionMode, Label, MixtureModel, RhoSchedule, Schedule, ScheduleRecipe, TaskSpec,
};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const OUT_DIR_ENV: &str = "HBRIDGE_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schedule: ScheduleSection,
    pub mixture: Vec<ComponentSection>,
    #[serde(default)]
    pub inversion: InversionSection,
    #[serde(default)]
    pub edit: EditSection,
    #[serde(default)]
    pub experts: Vec<ExpertSection>,
    pub task: TaskSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    /// `linear`, `cosine` or `explicit`.
    #[serde(default = "default_recipe")]
    pub recipe: String,
    #[serde(default = "default_beta_min")]
    pub beta_min: f64,
    #[serde(default = "default_beta_max")]
    pub beta_max: f64,
    #[serde(default = "default_cosine_offset")]
    pub cosine_offset: f64,
    /// Full table length; the run uses `steps` of them.
    #[serde(default = "default_train_steps")]
    pub train_steps: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Defaults to 1 for random inversion and 0 for deterministic inversion.
    pub lambda: Option<f64>,
    /// `alpha_bar[0..=T]` for the explicit recipe.
    pub alpha_bar: Option<Vec<f64>>,
}

fn default_recipe() -> String {
    "linear".into()
}
fn default_beta_min() -> f64 {
    1e-4
}
fn default_beta_max() -> f64 {
    2e-2
}
fn default_cosine_offset() -> f64 {
    0.008
}
fn default_train_steps() -> usize {
    1000
}
fn default_steps() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSection {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub std: f64,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InversionSection {
    /// `random` or `deterministic`.
    #[serde(default = "default_inversion")]
    pub mode: String,
    #[serde(default = "default_w_orig")]
    pub w_orig: f64,
}

fn default_inversion() -> String {
    "random".into()
}
fn default_w_orig() -> f64 {
    1.0
}

impl Default for InversionSection {
    fn default() -> Self {
        Self { mode: default_inversion(), w_orig: default_w_orig() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditSection {
    /// `explicit`, `implicit` or `edit-friendly`; defaults to implicit.
    pub engine: Option<String>,
    pub implicit_steps: Option<usize>,
    pub w_edit: Option<f64>,
    pub w_hat_orig: Option<f64>,
    /// Labels of the original condition; `[]` is unconditional.
    pub cond_orig: Option<Vec<Label>>,
    pub cond_edit: Option<Vec<Label>>,
    pub text_guided: Option<bool>,
    pub improve_recon: Option<f64>,
    pub skip_initial_steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ExpertSection {
    Reward {
        /// `identity`, `squared` or `project`.
        #[serde(default = "default_feature")]
        feature: String,
        project: Option<Vec<f64>>,
        reference: Vec<f64>,
        rho: f64,
        /// `constant`, `sqrt-alpha-bar` or `norm-matched`.
        #[serde(default = "default_rho_schedule")]
        rho_schedule: String,
        #[serde(default)]
        full_gradient: bool,
    },
    Classifier {
        label: Label,
        #[serde(default = "default_weight")]
        weight: f64,
    },
    Recon {
        lambda: f64,
    },
}

fn default_feature() -> String {
    "identity".into()
}
fn default_rho_schedule() -> String {
    "constant".into()
}
fn default_weight() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub target_label: Label,
    pub edit_direction: Option<Vec<f64>>,
    /// Original points are drawn from the data restricted to these labels.
    pub source_labels: Option<Vec<Label>>,
    /// A fixed original point instead of a draw.
    pub x0: Option<Vec<f64>>,
    pub seeds: Option<Vec<u64>>,
    /// `seed_start .. seed_start + seed_count` when `seeds` is absent.
    #[serde(default)]
    pub seed_start: u64,
    pub seed_count: Option<u64>,
    /// Reward reported per run, independent of the expert stack.
    pub reward_reference: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub w_edit: Option<Vec<f64>>,
    pub w_hat_orig: Option<Vec<f64>>,
    pub implicit_steps: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    #[serde(default = "default_true")]
    pub traces: bool,
    #[serde(default = "default_true")]
    pub plots: bool,
}

fn default_dir() -> PathBuf {
    PathBuf::from("hbridge-out")
}
fn default_true() -> bool {
    true
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: default_dir(), traces: true, plots: true }
    }
}

/// One point of the sweep grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub index: usize,
    pub w_edit: f64,
    pub w_hat_orig: f64,
    pub implicit_steps: usize,
}

/// Everything needed to execute a configuration.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub model: MixtureModel<f64>,
    pub schedule: Schedule<f64>,
    pub inversion: InversionMode,
    pub w_orig: f64,
    pub base: EditConfig<f64>,
    pub task: TaskSpec<f64>,
    pub source: Condition,
    pub x0: Option<Vec<f64>>,
    pub seeds: Vec<u64>,
    pub cells: Vec<Cell>,
}

/// 1-based line of `key` inside `[section]` or `[[section]]` of `raw`, if present.
pub fn locate(raw: &str, section: &str, key: Option<&str>) -> Option<usize> {
    let mut in_section = false;
    let mut header_line = None;
    for (i, line) in raw.lines().enumerate() {
        let l = line.trim();
        if l.starts_with('[') {
            let name = l.trim_matches(|c| c == '[' || c == ']').trim();
            in_section = name == section;
            if in_section && header_line.is_none() {
                header_line = Some(i + 1);
            }
            continue;
        }
        if in_section {
            if let Some(k) = key {
                let lhs = l.split('=').next().unwrap_or("").trim();
                if lhs == k {
                    return Some(i + 1);
                }
            }
        }
    }
    header_line
}

struct Ctx<'a> {
    raw: &'a str,
    origin: &'a str,
}

impl Ctx<'_> {
    fn err(&self, section: &str, key: Option<&str>, msg: impl std::fmt::Display) -> CliError {
        let path = match key {
            Some(k) => format!("{section}.{k}"),
            None => section.to_string(),
        };
        let line = locate(self.raw, section, key).map(|l| format!(":{l}")).unwrap_or_default();
        CliError::Validation(format!("{}{line}: {path}: {msg}", self.origin))
    }
}

fn condition(labels: &[Label]) -> Condition {
    if labels.is_empty() {
        Condition::Unconditional
    } else {
        Condition::labels(labels.iter().copied())
    }
}

impl ExperimentConfig {
    /// Parses a config; `origin` names the source in messages.
    pub fn parse(raw: &str, origin: &str) -> Result<Self, CliError> {
        toml::from_str(raw).map_err(|e| {
            let line = e
                .span()
                .map(|s| raw[..s.start.min(raw.len())].lines().count().max(1))
                .map(|l| format!(":{l}"))
                .unwrap_or_default();
            CliError::Validation(format!("{origin}{line}: {}", e.message()))
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Validates and builds the model, schedule, edit template and sweep grid.
    pub fn resolve(&self, raw: &str, origin: &str) -> Result<Resolved, CliError> {
        let cx = Ctx { raw, origin };
        let model = MixtureModel::new(
            self.mixture
                .iter()
                .map(|c| Component { weight: c.weight, mean: c.mean.clone(), std: c.std, label: c.label })
                .collect(),
        )
        .map_err(|e| cx.err("mixture", None, e))?;
        let dim = model.dim();
        let labels: BTreeSet<Label> = model.labels().into_iter().collect();
        let check_labels = |section: &str, key: &str, ls: &[Label]| -> Result<(), CliError> {
            match ls.iter().find(|l| !labels.contains(l)) {
                Some(l) => Err(cx.err(section, Some(key), format!("label {l} not in mixture"))),
                None => Ok(()),
            }
        };
        let check_dim = |section: &str, key: &str, v: &[f64]| -> Result<(), CliError> {
            if v.len() != dim {
                return Err(cx.err(section, Some(key), format!("expected {dim} entries, got {}", v.len())));
            }
            Ok(())
        };

        let inversion: InversionMode =
            self.inversion.mode.parse().map_err(|e| cx.err("inversion", Some("mode"), e))?;
        let s = &self.schedule;
        let recipe = match s.recipe.as_str() {
            "linear" => ScheduleRecipe::LinearBeta { beta_min: s.beta_min, beta_max: s.beta_max },
            "cosine" => ScheduleRecipe::Cosine { offset: s.cosine_offset },
            "explicit" => ScheduleRecipe::Explicit(
                s.alpha_bar
                    .clone()
                    .ok_or_else(|| cx.err("schedule", Some("alpha_bar"), "explicit recipe needs alpha_bar"))?,
            ),
            other => return Err(cx.err("schedule", Some("recipe"), format!("unknown recipe {other:?}"))),
        };
        let lambda = s.lambda.unwrap_or(match inversion {
            InversionMode::Random => 1.0,
            InversionMode::Deterministic => 0.0,
        });
        if !(0.0..=1.0).contains(&lambda) {
            return Err(cx.err("schedule", Some("lambda"), "must lie in [0, 1]"));
        }
        if inversion == InversionMode::Deterministic && lambda != 0.0 {
            return Err(cx.err("schedule", Some("lambda"), "deterministic inversion needs lambda = 0"));
        }
        let table_len = match &recipe {
            ScheduleRecipe::Explicit(ab) => ab.len().saturating_sub(1),
            _ => s.train_steps,
        };
        let full = build_schedule(table_len, &recipe, lambda).map_err(|e| cx.err("schedule", None, e))?;
        if s.steps == 0 || s.steps > table_len {
            return Err(cx.err("schedule", Some("steps"), format!("must lie in 1..={table_len}")));
        }
        let schedule = full.respaced(s.steps).map_err(|e| cx.err("schedule", Some("steps"), e))?;

        check_labels("task", "target_label", &[self.task.target_label])?;
        let e = &self.edit;
        let cond_orig = e.cond_orig.clone().unwrap_or_else(|| {
            self.task.source_labels.clone().unwrap_or_default()
        });
        check_labels("edit", "cond_orig", &cond_orig)?;
        let cond_edit = e.cond_edit.clone().unwrap_or_else(|| vec![self.task.target_label]);
        check_labels("edit", "cond_edit", &cond_edit)?;
        let mut base = EditConfig::defaults(inversion, condition(&cond_orig), condition(&cond_edit));
        base.w_orig = self.inversion.w_orig;
        if let Some(m) = &e.engine {
            base.mode = m.parse::<EngineMode>().map_err(|err| cx.err("edit", Some("engine"), err))?;
        }
        if base.mode == EngineMode::EditFriendly && inversion != InversionMode::Random {
            return Err(cx.err("edit", Some("engine"), "edit-friendly engine needs random inversion"));
        }
        if let Some(k) = e.implicit_steps {
            base.implicit_steps = k;
        }
        if let Some(w) = e.w_edit {
            base.w_edit = w;
        }
        if let Some(w) = e.w_hat_orig {
            base.w_hat_orig = w;
        }
        if let Some(tg) = e.text_guided {
            base.text_guided = tg;
        }
        base.improve_recon = e.improve_recon;
        base.skip_initial_steps = e.skip_initial_steps.unwrap_or(0);

        for (i, x) in self.experts.iter().enumerate() {
            let section = "experts";
            let key_err = |k: &str, msg: String| {
                cx.err(section, Some(k), format!("expert {i}: {msg}"))
            };
            base.experts.push(match x {
                ExpertSection::Reward { feature, project, reference, rho, rho_schedule, full_gradient } => {
                    check_dim(section, "reference", reference)?;
                    let map = match feature.as_str() {
                        "identity" => FeatureMap::Identity,
                        "squared" => FeatureMap::SquaredCoords,
                        "project" => {
                            let v = project
                                .clone()
                                .ok_or_else(|| key_err("project", "project feature needs a vector".into()))?;
                            check_dim(section, "project", &v)?;
                            FeatureMap::Project(v)
                        }
                        other => return Err(key_err("feature", format!("unknown feature {other:?}"))),
                    };
                    let rho = match rho_schedule.as_str() {
                        "constant" => RhoSchedule::Constant(*rho),
                        "sqrt-alpha-bar" => RhoSchedule::SqrtAlphaBar(*rho),
                        "norm-matched" => RhoSchedule::NormMatched(*rho),
                        other => return Err(key_err("rho_schedule", format!("unknown schedule {other:?}"))),
                    };
                    EditExpert::Reward {
                        reward: FeatureReward { map, reference: reference.clone() },
                        rho,
                        full_gradient: *full_gradient,
                    }
                }
                ExpertSection::Classifier { label, weight } => {
                    check_labels(section, "label", &[*label])?;
                    EditExpert::Classifier { label: *label, weight: *weight }
                }
                ExpertSection::Recon { lambda } => EditExpert::Recon { lambda: *lambda },
            });
        }

        let t = &self.task;
        let d = t
            .edit_direction
            .as_ref()
            .ok_or_else(|| cx.err("task", None, "edit_direction is required for faithfulness"))?;
        check_dim("task", "edit_direction", d)?;
        if d.iter().all(|&v| v == 0.0) {
            return Err(cx.err("task", Some("edit_direction"), "must be nonzero"));
        }
        let source_labels = t.source_labels.clone().unwrap_or_default();
        check_labels("task", "source_labels", &source_labels)?;
        if let Some(x0) = &t.x0 {
            check_dim("task", "x0", x0)?;
        }
        let reward = match &t.reward_reference {
            Some(r) => {
                check_dim("task", "reward_reference", r)?;
                Some(FeatureReward { map: FeatureMap::Identity, reference: r.clone() })
            }
            None => None,
        };
        let seeds = match (&t.seeds, t.seed_count) {
            (Some(s), None) => s.clone(),
            (None, Some(n)) => (t.seed_start..t.seed_start + n).collect(),
            (None, None) => vec![t.seed_start],
            (Some(_), Some(_)) => return Err(cx.err("task", Some("seed_count"), "give either seeds or seed_count")),
        };
        if seeds.is_empty() {
            return Err(cx.err("task", Some("seeds"), "no seeds"));
        }

        let sw = &self.sweep;
        let axis = |key: &str, v: &Option<Vec<f64>>, default: f64| -> Result<Vec<f64>, CliError> {
            match v {
                Some(v) if v.is_empty() => Err(cx.err("sweep", Some(key), "grid is empty")),
                Some(v) => Ok(v.clone()),
                None => Ok(vec![default]),
            }
        };
        let w_edits = axis("w_edit", &sw.w_edit, base.w_edit)?;
        let w_hats = axis("w_hat_orig", &sw.w_hat_orig, base.w_hat_orig)?;
        let ks = match &sw.implicit_steps {
            Some(v) if v.is_empty() => return Err(cx.err("sweep", Some("implicit_steps"), "grid is empty")),
            Some(v) => v.clone(),
            None => vec![base.implicit_steps],
        };
        let mut cells = Vec::new();
        for &w_edit in &w_edits {
            for &w_hat_orig in &w_hats {
                for &implicit_steps in &ks {
                    cells.push(Cell { index: cells.len(), w_edit, w_hat_orig, implicit_steps });
                }
            }
        }
        for c in &cells {
            let mut cfg = base.clone();
            cfg.w_edit = c.w_edit;
            cfg.w_hat_orig = c.w_hat_orig;
            cfg.implicit_steps = c.implicit_steps;
            cfg.validate(&model, schedule.steps()).map_err(|e| cx.err("edit", None, format!("cell {}: {e}", c.index)))?;
            cfg.check_guideline();
        }

        Ok(Resolved {
            model,
            schedule,
            inversion,
            w_orig: self.inversion.w_orig,
            base,
            task: TaskSpec { target_label: t.target_label, edit_direction: t.edit_direction.clone(), reward },
            source: condition(&source_labels),
            x0: t.x0.clone(),
            seeds,
            cells,
        })
    }
}
