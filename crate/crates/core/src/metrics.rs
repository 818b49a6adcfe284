//! Forecast verification: NRMSE of the ensemble mean, empirical-CDF CRPS
//! and its normalized aggregate (NACRPS), plus reference forecasts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Frame;

/// CRPS of an empirical ensemble against one observation, in energy form:
/// `E|X − y| − ½·E|X − X'|`.
pub fn crps_empirical(samples: &[f64], observation: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let m = samples.len() as f64;
    // Sorting first makes the result independent of member order.
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let spread_to_obs: f64 = sorted.iter().map(|x| (x - observation).abs()).sum::<f64>() / m;
    // ΣΣ|xᵢ − xⱼ| over sorted samples is 2·Σ (2i − M + 1)·x₍ᵢ₎.
    let pairwise: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * i as f64 - m + 1.0) * x)
        .sum::<f64>()
        * 2.0;
    spread_to_obs - pairwise / (2.0 * m * m)
}

/// Root mean squared error of `forecast_mean` divided by the observation range.
pub fn nrmse(observations: &[f64], forecast_mean: &[f64]) -> Result<f64> {
    check_len(observations.len(), forecast_mean.len())?;
    let (lo, hi) = range(observations)?;
    let sq: f64 = observations
        .iter()
        .zip(forecast_mean)
        .map(|(x, f)| (x - f) * (x - f))
        .sum();
    Ok((sq / observations.len() as f64).sqrt() / (hi - lo))
}

/// Σ CRPS / Σ |x| over all cells and timesteps.
///
/// `members[m]` holds member m's forecast for every observation.
pub fn nacrps(members: &[Vec<f64>], observations: &[f64]) -> Result<f64> {
    if members.is_empty() {
        return Err(Error::InvalidParameter("ensemble has no members".into()));
    }
    for m in members {
        check_len(observations.len(), m.len())?;
    }
    let mut column = vec![0.0; members.len()];
    let mut total = 0.0;
    for (i, &obs) in observations.iter().enumerate() {
        for (slot, m) in column.iter_mut().zip(members) {
            *slot = m[i];
        }
        total += crps_empirical(&column, obs);
    }
    let denom: f64 = observations.iter().map(|x| x.abs()).sum();
    if denom == 0.0 {
        return Err(Error::AllZeroObservations);
    }
    Ok(total / denom)
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::ShapeMismatch(format!(
            "observations have {expected} values, forecast has {got}"
        )));
    }
    if expected == 0 {
        return Err(Error::InvalidParameter("no observations".into()));
    }
    Ok(())
}

fn range(values: &[f64]) -> Result<(f64, f64)> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return Err(Error::DegenerateRange { value: lo });
    }
    Ok((lo, hi))
}

/// Repeat the last context frame for `horizon` steps.
pub fn persistence_baseline(context: &[Frame], horizon: usize) -> Vec<Frame> {
    let last = context.last().expect("persistence needs a non-empty context");
    vec![last.clone(); horizon]
}

/// One member per context frame, each held constant over the horizon.
pub fn climatology_ensemble(context: &[Frame], horizon: usize) -> Vec<Vec<Frame>> {
    context.iter().map(|f| vec![f.clone(); horizon]).collect()
}

/// Aggregate scores over a set of forecast windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub nrmse: f64,
    pub nacrps: f64,
    pub per_step: Vec<StepScore>,
    pub cells: usize,
    pub timesteps: usize,
    pub windows: usize,
    pub members: usize,
    pub units: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepScore {
    /// Lead time in hours (1-based).
    pub lead: usize,
    pub rmse: f64,
    pub crps_sum: f64,
    pub abs_obs_sum: f64,
}

#[derive(Clone, Debug, Default)]
struct StepAccum {
    sq_err: f64,
    crps: f64,
    abs_obs: f64,
    count: usize,
}

/// Streams (observation, ensemble) windows and reduces them to an
/// [`EvalReport`]. The observation range is global over everything added.
#[derive(Clone, Debug, Default)]
pub struct Evaluator {
    steps: Vec<StepAccum>,
    lo: f64,
    hi: f64,
    cells: usize,
    windows: usize,
    members: usize,
}

impl Evaluator {
    pub fn new() -> Self {
        Self {
            lo: f64::INFINITY,
            hi: f64::NEG_INFINITY,
            ..Default::default()
        }
    }

    /// `members[m][t]` is member m's frame at lead t+1; `observed[t]` the truth.
    pub fn add(&mut self, observed: &[Frame], members: &[Vec<Frame>]) -> Result<()> {
        if members.is_empty() {
            return Err(Error::InvalidParameter("ensemble has no members".into()));
        }
        if members.iter().any(|m| m.len() != observed.len()) {
            return Err(Error::ShapeMismatch("ensemble horizon differs from observations".into()));
        }
        if self.steps.len() < observed.len() {
            self.steps.resize(observed.len(), StepAccum::default());
        }
        let mut column = vec![0.0; members.len()];
        for (t, obs) in observed.iter().enumerate() {
            let acc = &mut self.steps[t];
            for (i, &x) in obs.cells().iter().enumerate() {
                for (slot, m) in column.iter_mut().zip(members) {
                    *slot = m[t].cells()[i];
                }
                let mean = column.iter().sum::<f64>() / column.len() as f64;
                acc.sq_err += (x - mean) * (x - mean);
                acc.crps += crps_empirical(&column, x);
                acc.abs_obs += x.abs();
                acc.count += 1;
                self.lo = self.lo.min(x);
                self.hi = self.hi.max(x);
            }
        }
        self.cells = observed.first().map_or(0, |f| f.cells().len());
        self.windows += 1;
        self.members = self.members.max(members.len());
        Ok(())
    }

    pub fn finish(&self) -> Result<EvalReport> {
        let count: usize = self.steps.iter().map(|s| s.count).sum();
        if count == 0 {
            return Err(Error::EmptyDataset("nothing to evaluate".into()));
        }
        if self.hi <= self.lo {
            return Err(Error::DegenerateRange { value: self.lo });
        }
        let sq: f64 = self.steps.iter().map(|s| s.sq_err).sum();
        let crps: f64 = self.steps.iter().map(|s| s.crps).sum();
        let abs_obs: f64 = self.steps.iter().map(|s| s.abs_obs).sum();
        if abs_obs == 0.0 {
            return Err(Error::AllZeroObservations);
        }
        Ok(EvalReport {
            nrmse: (sq / count as f64).sqrt() / (self.hi - self.lo),
            nacrps: crps / abs_obs,
            per_step: self
                .steps
                .iter()
                .enumerate()
                .map(|(t, s)| StepScore {
                    lead: t + 1,
                    rmse: (s.sq_err / s.count.max(1) as f64).sqrt(),
                    crps_sum: s.crps,
                    abs_obs_sum: s.abs_obs,
                })
                .collect(),
            cells: self.cells,
            timesteps: self.steps.len(),
            windows: self.windows,
            members: self.members,
            units: "feet".into(),
        })
    }
}
