//! Forecast ensembles and their on-disk form (a manifest followed by one GSF
//! block per member).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Frame, NormStats};
use crate::io::{self, Lines};

/// M sampled trajectories of L frames for one patch, in feet.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastEnsemble {
    pub patch_id: String,
    /// Timestamp of the first forecast frame.
    pub start: NaiveDateTime,
    /// `members[m][t]`.
    pub members: Vec<Vec<Frame>>,
    pub norm_stats: NormStats,
    pub seed: u64,
    pub checkpoint_id: String,
}

/// Per-step, per-cell ensemble moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub dim: usize,
    pub horizon: usize,
    pub members: usize,
    /// `mean[t]` is a row-major D×D grid.
    pub mean: Vec<Vec<f64>>,
    /// Population standard deviation across members.
    pub std: Vec<Vec<f64>>,
}

impl ForecastEnsemble {
    pub fn member_count(&self) -> usize {
        self.members.len()
    }

    pub fn horizon(&self) -> usize {
        self.members.first().map_or(0, Vec::len)
    }

    pub fn dim(&self) -> usize {
        self.members
            .first()
            .and_then(|m| m.first())
            .map_or(0, Frame::dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.members.is_empty() {
            return Err(Error::InvalidParameter("ensemble has no members".into()));
        }
        let (h, d) = (self.horizon(), self.dim());
        for (m, traj) in self.members.iter().enumerate() {
            if traj.len() != h || traj.iter().any(|f| f.dim() != d) {
                return Err(Error::ShapeMismatch(format!("member {m} has inconsistent shape")));
            }
            if traj.iter().any(|f| !f.is_finite()) {
                return Err(Error::NonFinite(format!("ensemble member {m}")));
            }
        }
        Ok(())
    }

    pub fn summary(&self) -> EnsembleSummary {
        let (h, d, m) = (self.horizon(), self.dim(), self.member_count());
        let mut mean = vec![vec![0.0; d * d]; h];
        let mut std = vec![vec![0.0; d * d]; h];
        for t in 0..h {
            for i in 0..d * d {
                let mu = self.members.iter().map(|traj| traj[t].cells()[i]).sum::<f64>() / m as f64;
                let var = self
                    .members
                    .iter()
                    .map(|traj| (traj[t].cells()[i] - mu).powi(2))
                    .sum::<f64>()
                    / m as f64;
                mean[t][i] = mu;
                std[t][i] = var.sqrt();
            }
        }
        EnsembleSummary {
            dim: d,
            horizon: h,
            members: m,
            mean,
            std,
        }
    }

    pub fn encode(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "GSFE1 {}", self.member_count());
        let _ = writeln!(out, "patch {}", self.patch_id);
        let _ = writeln!(out, "seed {}", self.seed);
        let _ = writeln!(out, "checkpoint {}", self.checkpoint_id);
        let _ = writeln!(out, "norm_mean {}", self.norm_stats.mean);
        let _ = writeln!(out, "norm_std {}", self.norm_stats.std);
        let _ = writeln!(out, "end");
        for traj in &self.members {
            out.push_str(&io::encode_series(self.start, traj));
        }
        out
    }

    pub fn decode(path: &Path, text: &str) -> Result<Self> {
        let mut lines = Lines::new(path, text);
        let count = lines.header("GSFE1", 1)?[0];
        let mut patch_id = None;
        let mut seed = None;
        let mut checkpoint_id = String::new();
        let (mut mean, mut std) = (None, None);
        loop {
            let line = lines
                .next_line()
                .ok_or_else(|| lines.error("manifest not terminated by `end`"))?;
            let line = line.trim();
            if line == "end" {
                break;
            }
            let (key, value) = line.split_once(' ').unwrap_or((line, ""));
            let value = value.trim();
            let bad = |lines: &Lines<'_>| lines.error(format!("invalid manifest value for {key}"));
            match key {
                "patch" => patch_id = Some(value.to_string()),
                "seed" => seed = Some(value.parse::<u64>().map_err(|_| bad(&lines))?),
                "checkpoint" => checkpoint_id = value.to_string(),
                "norm_mean" => mean = Some(value.parse::<f64>().map_err(|_| bad(&lines))?),
                "norm_std" => std = Some(value.parse::<f64>().map_err(|_| bad(&lines))?),
                _ => return Err(lines.error(format!("unknown manifest key {key:?}"))),
            }
        }
        let mut members = Vec::with_capacity(count);
        let mut start = None;
        for _ in 0..count {
            let block = io::parse_series_block(&mut lines)?;
            start.get_or_insert(block.start);
            members.push(block.frames);
        }
        let ens = Self {
            patch_id: patch_id.ok_or_else(|| lines.error("manifest lacks `patch`"))?,
            start: start.ok_or_else(|| lines.error("ensemble has no members"))?,
            members,
            norm_stats: NormStats {
                mean: mean.unwrap_or(0.0),
                std: std.unwrap_or(1.0),
            },
            seed: seed.unwrap_or(0),
            checkpoint_id,
        };
        ens.validate()?;
        Ok(ens)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::decode(path, &text)
    }
}
