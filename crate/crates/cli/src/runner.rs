//! Executes a resolved config: one inversion per seed, one edit per (cell, seed).

use std::fs;
use std::path::Path;

use hbridge::{
    ddim_invert, ef_invert, evaluate, run_edit, Condition, EditReport, EditTrace, InversionMode, InversionRecord, Label,
};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{Cell, ExperimentConfig, Resolved};
use crate::manifest::{Artifact, Manifest};
use crate::{svg, CliError};

pub const REPORT_HEADER: &str = "# hbridge report v1";
pub const REPORT_FILE: &str = "report.csv";
const PLOT_SAMPLE_SEED: u64 = 0x5eed;
const PLOT_SAMPLES_PER_LABEL: usize = 150;

#[derive(Debug, Clone)]
pub struct CellResult {
    pub cell: Cell,
    pub report: EditReport,
    /// One trace per seed, in seed order.
    pub traces: Vec<EditTrace<f64>>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub cells: Vec<CellResult>,
    pub manifest: Manifest,
}

fn labelled(cell: Option<usize>, seed: u64, e: hbridge::Error) -> CliError {
    let scope = match cell {
        Some(i) => format!("cell {i} (seed {seed})"),
        None => format!("inversion (seed {seed})"),
    };
    match e {
        hbridge::Error::NumericalBlowup { t, what } => {
            CliError::Numerical(format!("{scope}: numerical blowup at t={t} in {what}"))
        }
        other => CliError::Validation(format!("{scope}: {other}")),
    }
}

/// The seed's original point and its inversion record.
pub fn invert_seed(r: &Resolved, seed: u64) -> Result<InversionRecord<f64>, hbridge::Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = match &r.x0 {
        Some(x) => x.clone(),
        None => r.model.sample_data(&mut rng, &r.source)?,
    };
    match r.inversion {
        InversionMode::Random => ef_invert(&r.model, &r.schedule, &x0, &r.base.cond_orig, r.w_orig, &mut rng),
        InversionMode::Deterministic => ddim_invert(&r.model, &r.schedule, &x0, &r.base.cond_orig, r.w_orig),
    }
}

/// Runs every cell over every seed, in parallel; results keep grid and seed order.
pub fn run_cells(r: &Resolved) -> Result<Vec<CellResult>, CliError> {
    let records: Vec<InversionRecord<f64>> = r
        .seeds
        .par_iter()
        .map(|&s| invert_seed(r, s).map_err(|e| labelled(None, s, e)))
        .collect::<Result<_, _>>()?;
    r.cells
        .par_iter()
        .map(|cell| {
            let mut cfg = r.base.clone();
            cfg.w_edit = cell.w_edit;
            cfg.w_hat_orig = cell.w_hat_orig;
            cfg.implicit_steps = cell.implicit_steps;
            let traces: Vec<EditTrace<f64>> = records
                .par_iter()
                .zip(r.seeds.par_iter())
                .map(|(rec, &s)| run_edit(&r.model, &r.schedule, rec, &cfg).map_err(|e| labelled(Some(cell.index), s, e)))
                .collect::<Result<_, _>>()?;
            let report = evaluate(&r.model, &r.schedule, &traces, &r.task)?;
            info!(
                "cell {}: target posterior {:.4}, faithfulness {:.4}",
                cell.index, report.target_posterior.mean, report.faithfulness.mean
            );
            Ok(CellResult { cell: *cell, report, traces })
        })
        .collect()
}

pub fn report_csv(r: &Resolved, results: &[CellResult]) -> Result<Vec<u8>, CliError> {
    let mut buf = format!("{REPORT_HEADER}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let mut header = vec!["cell", "engine", "w_edit", "w_hat_orig", "implicit_steps"];
        header.extend(EditReport::CSV_COLUMNS);
        w.write_record(&header)?;
        for c in results {
            let mut row = vec![
                c.cell.index.to_string(),
                r.base.mode.as_str().to_string(),
                c.cell.w_edit.to_string(),
                c.cell.w_hat_orig.to_string(),
                c.cell.implicit_steps.to_string(),
            ];
            row.extend(c.report.csv_fields());
            w.write_record(&row)?;
        }
        w.flush()?;
    }
    Ok(buf)
}

/// Fixed-seed data draws per label, for plot backgrounds.
pub fn plot_samples(r: &Resolved) -> Result<Vec<(Label, Vec<f64>)>, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(PLOT_SAMPLE_SEED);
    let mut out = Vec::new();
    for l in r.model.labels() {
        for _ in 0..PLOT_SAMPLES_PER_LABEL {
            out.push((l, r.model.sample_data(&mut rng, &Condition::label(l))?));
        }
    }
    Ok(out)
}

fn emit(out_dir: &Path, rel: &str, bytes: &[u8], artifacts: &mut Vec<Artifact>) -> Result<(), CliError> {
    let path = out_dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&path, bytes)?;
    artifacts.push(Artifact::of(rel, bytes));
    Ok(())
}

/// Parses, resolves and runs `raw`, writing every artifact under `out_dir`.
pub fn run(raw: &str, origin: &str, out_dir: &Path) -> Result<RunSummary, CliError> {
    let cfg = ExperimentConfig::parse(raw, origin)?;
    let r = cfg.resolve(raw, origin)?;
    info!("{} cells x {} seeds, T={}", r.cells.len(), r.seeds.len(), r.schedule.steps());
    let cells = run_cells(&r)?;

    fs::create_dir_all(out_dir)?;
    let mut artifacts = Vec::new();
    emit(out_dir, REPORT_FILE, &report_csv(&r, &cells)?, &mut artifacts)?;
    if cfg.output.traces {
        for c in &cells {
            for (tr, s) in c.traces.iter().zip(&r.seeds) {
                let mut buf = Vec::new();
                tr.write_csv(&mut buf)?;
                emit(out_dir, &format!("traces/cell{}_seed{s}.csv", c.cell.index), &buf, &mut artifacts)?;
            }
        }
    }
    if cfg.output.plots {
        let samples = plot_samples(&r)?;
        for c in &cells {
            let title = format!(
                "cell {}: {} w_edit={} w_hat_orig={} K={}",
                c.cell.index,
                r.base.mode.as_str(),
                c.cell.w_edit,
                c.cell.w_hat_orig,
                c.cell.implicit_steps
            );
            let svg = svg::render(&title, &samples, &c.traces);
            emit(out_dir, &format!("plots/cell{}.svg", c.cell.index), svg.as_bytes(), &mut artifacts)?;
        }
    }
    let manifest = Manifest::new(raw, artifacts);
    manifest.write(out_dir)?;
    Ok(RunSummary { cells, manifest })
}
