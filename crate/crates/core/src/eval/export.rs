//! CSV and JSON outputs consumed by the plotting tool.

use std::fs::File;
use std::path::Path;

use serde::Serialize;

use super::{EpisodeTrace, EvalReport};
use crate::envs::Dataset;
use crate::error::{Error, Result};
use crate::gating::{gating_energies, posterior};
use crate::model::argmax;
use crate::numeric::Tape;
use crate::trainer::BehaviorModel;

fn create(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn finish(mut w: csv::Writer<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn trace_header(experts: usize) -> Vec<String> {
    let mut h = vec!["task".to_string(), "episode".into(), "timestep".into(), "phase".into()];
    h.extend((0..experts).map(|e| format!("p{e}")));
    h.extend(["expert".to_string(), "success".into()]);
    h
}

/// One row per decision point: task, episode, timestep, phase, the
/// posterior over `experts`, the selected expert and the episode outcome.
pub fn export_traces(traces: &[EpisodeTrace], experts: usize, path: &Path) -> Result<()> {
    if traces.is_empty() {
        return Err(Error::contract("no traces to export"));
    }
    let mut w = create(path)?;
    w.write_record(trace_header(experts))?;
    for t in traces {
        for s in &t.steps {
            if s.posterior.len() != experts {
                return Err(Error::dim("trace posterior", experts, s.posterior.len()));
            }
            let mut row = vec![
                t.task_id.to_string(),
                t.episode.to_string(),
                s.timestep.to_string(),
                s.phase.to_string(),
            ];
            row.extend(s.posterior.iter().map(|p| p.to_string()));
            row.extend([s.expert.to_string(), (t.success as u8).to_string()]);
            w.write_record(row)?;
        }
    }
    finish(w, path)
}

/// Batch-conditional columns of one trained model over a fixed probe set.
#[derive(Clone, Debug, PartialEq)]
pub struct BetaSweepRow {
    pub beta: f32,
    pub obs_index: usize,
    pub conditional: Vec<f32>,
}

pub fn write_beta_sweep(rows: &[BetaSweepRow], path: &Path) -> Result<()> {
    let k = rows.first().map_or(0, |r| r.conditional.len());
    let mut w = create(path)?;
    let mut header = vec!["beta".to_string(), "obs_index".into()];
    header.extend((0..k).map(|e| format!("c{e}")));
    w.write_record(header)?;
    for r in rows {
        if r.conditional.len() != k {
            return Err(Error::dim("beta sweep row", k, r.conditional.len()));
        }
        let mut row = vec![r.beta.to_string(), r.obs_index.to_string()];
        row.extend(r.conditional.iter().map(|c| c.to_string()));
        w.write_record(row)?;
    }
    finish(w, path)
}

/// Success rate after training on a fraction of the held-out task data.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DataRatioRow {
    pub method: String,
    pub ratio: f64,
    pub seed: u64,
    pub success: f64,
}

pub fn write_data_ratio(rows: &[DataRatioRow], path: &Path) -> Result<()> {
    let mut w = create(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(["method", "ratio", "seed", "success"])?;
    }
    finish(w, path)
}

/// Observation features the noise predictor conditions on, with the expert
/// the posterior selects, one row per dataset pair.
pub fn write_embeddings(model: &BehaviorModel, dataset: &Dataset, path: &Path) -> Result<()> {
    let obs = BehaviorModel::dataset_obs(dataset, 0)?;
    let features = {
        let mut tape = Tape::new();
        let o = tape.constant(obs.clone());
        let f = model.policy.obs_proj.forward(&mut tape, &model.store, o)?;
        let f = tape.activate(f, model.model_config().activation);
        tape.value(f).clone()
    };
    let post = posterior(&gating_energies(&model.gate, &model.store, &obs)?, model.log_z.as_ref())?;
    let mut w = create(path)?;
    let mut header = vec!["index".to_string(), "task".into(), "phase".into(), "expert".into()];
    header.extend((0..features.cols()).map(|j| format!("f{j}")));
    w.write_record(header)?;
    for (i, p) in dataset.pairs.iter().enumerate() {
        let mut row = vec![
            i.to_string(),
            p.task_id.to_string(),
            p.phase.to_string(),
            argmax(post.row(i)).to_string(),
        ];
        row.extend(features.row(i).iter().map(|v| v.to_string()));
        w.write_record(row)?;
    }
    finish(w, path)
}

pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
