//! Split → train → test-evaluate pipelines, and the four-way context
//! ablation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::Ablation;
use crate::dataset::Dataset;
use crate::error::Result;
use crate::model::DiffusionModel;
use crate::sampler::{evaluate, Evaluation};
use crate::trainer::{train_new, FitOutcome, FitOutputs, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentResult {
    pub ablation: Ablation,
    pub fit: FitOutcome,
    pub evaluation: Evaluation,
    pub parameter_count: usize,
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

/// Split `dataset` chronologically per `cfg`, train, and score the test
/// split against the baselines.
pub fn run_experiment(
    dataset: &Dataset,
    cfg: &TrainConfig,
    outputs: Option<&FitOutputs>,
) -> Result<(DiffusionModel, ExperimentResult)> {
    let (train, val, test) = dataset.split_chronological(cfg.train_steps, cfg.val_steps, cfg.test_steps)?;
    let t0 = Instant::now();
    let (model, fit) = train_new(&train, &val, cfg, outputs)?;
    let train_seconds = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let evaluation = evaluate(&model, &test, cfg.eval_horizon, cfg.test_scenarios, cfg.eval_stride, cfg.seed)?;
    let eval_seconds = t1.elapsed().as_secs_f64();
    let result = ExperimentResult {
        ablation: cfg.ablation,
        parameter_count: model.parameter_count(),
        fit,
        evaluation,
        train_seconds,
        eval_seconds,
    };
    Ok((model, result))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub label: String,
    pub nrmse: f64,
    pub nacrps: f64,
    pub best_epoch: usize,
    pub final_loss: f64,
    pub parameter_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub persistence_nrmse: f64,
    pub persistence_nacrps: f64,
    pub climatology_nrmse: f64,
    pub climatology_nacrps: f64,
}

impl AblationTable {
    pub fn row(&self, a: Ablation) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.ablation == a)
    }

    /// Whether adding covariates lowered NACRPS, for both the bare and the
    /// elevation-augmented context.
    pub fn covariates_help(&self) -> Option<bool> {
        let n = |a| self.row(a).map(|r| r.nacrps);
        Some(n(Ablation::InunCov)? < n(Ablation::Inun)? && n(Ablation::All)? < n(Ablation::InunElev)?)
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| context | NRMSE | NACRPS | best epoch | final loss |\n|---|---|---|---|---|\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "| {} | {:.4} | {:.4} | {} | {:.4} |",
                r.label, r.nrmse, r.nacrps, r.best_epoch, r.final_loss
            );
        }
        let _ = writeln!(
            out,
            "| persistence | {:.4} | {:.4} | – | – |",
            self.persistence_nrmse, self.persistence_nacrps
        );
        let _ = writeln!(
            out,
            "| climatology | {:.4} | {:.4} | – | – |",
            self.climatology_nrmse, self.climatology_nacrps
        );
        out
    }
}

/// Train and evaluate every context configuration with otherwise identical
/// settings. With `out_dir`, checkpoints and histories go to
/// `<out_dir>/<ablation>.ckpt` and the table to `ablation.{md,json}`.
pub fn run_ablation(dataset: &Dataset, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(Ablation::ALL.len());
    let mut baselines = None;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    for ablation in Ablation::ALL {
        let run_cfg = TrainConfig {
            ablation,
            ..cfg.clone()
        };
        let outputs = out_dir.map(|d| FitOutputs::beside(&d.join(format!("{ablation}.ckpt"))));
        log::info!("ablation {}: training", ablation.label());
        let (_, res) = run_experiment(dataset, &run_cfg, outputs.as_ref())?;
        let ev = &res.evaluation;
        baselines.get_or_insert((
            ev.persistence.nrmse,
            ev.persistence.nacrps,
            ev.climatology.nrmse,
            ev.climatology.nacrps,
        ));
        rows.push(AblationRow {
            ablation,
            label: ablation.label().to_string(),
            nrmse: ev.model.nrmse,
            nacrps: ev.model.nacrps,
            best_epoch: res.fit.best_epoch,
            final_loss: res.fit.history.last().map_or(f64::NAN, |h| h.loss),
            parameter_count: res.parameter_count,
        });
    }
    let (pn, pc, cn, cc) = baselines.expect("four configurations ran");
    let table = AblationTable {
        rows,
        persistence_nrmse: pn,
        persistence_nacrps: pc,
        climatology_nrmse: cn,
        climatology_nacrps: cc,
    };
    if let Some(dir) = out_dir {
        fs::write(dir.join("ablation.md"), table.to_markdown())?;
        fs::write(dir.join("ablation.json"), serde_json::to_string_pretty(&table)?)?;
    }
    Ok(table)
}
