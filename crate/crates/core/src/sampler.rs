//! Reverse-process sampling and autoregressive multi-scenario rollout.

use candle_core::Tensor;
use chrono::Duration;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::ensemble::ForecastEnsemble;
use crate::error::{Error, Result};
use crate::grid::{destandardize, Covariate, Frame, NormStats};
use crate::metrics::{climatology_ensemble, persistence_baseline, EvalReport, Evaluator};
use crate::model::DiffusionModel;
use crate::schedule::NoiseSchedule;

/// Trajectories per network call during rollout.
pub const MAX_SAMPLING_BATCH: usize = 128;

/// Independent stream for one (seed, scenario, forecast step).
pub fn stream_rng(seed: u64, scenario: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(scenario);
    rng.set_word_pos((step as u128) << 40);
    rng
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Run the reverse chain from N to 1 for `rngs.len()` items of `cells`
/// values each. `predict(x, n)` returns x̂⁰ for the flattened batch. Each
/// item draws xᴺ and then its per-step noise from its own generator.
pub fn reverse_sample<F>(schedule: &NoiseSchedule, cells: usize, rngs: &mut [ChaCha8Rng], mut predict: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], usize) -> Result<Vec<f64>>,
{
    let mut x: Vec<f64> = Vec::with_capacity(rngs.len() * cells);
    for rng in rngs.iter_mut() {
        x.extend(normals(rng, cells));
    }
    for n in (1..=schedule.steps()).rev() {
        let x0 = predict(&x, n)?;
        if x0.len() != x.len() {
            return Err(Error::ShapeMismatch(format!(
                "denoiser returned {} values for {}",
                x0.len(),
                x.len()
            )));
        }
        let (mut mu, var) = schedule.posterior_mean_var(&x, &x0, n)?;
        if n > 1 {
            let sd = var.sqrt();
            for (chunk, rng) in mu.chunks_mut(cells).zip(rngs.iter_mut()) {
                for (m, v) in chunk.iter_mut().zip(normals(rng, cells)) {
                    *m += sd * v;
                }
            }
        }
        if mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("reverse process diverged at noise step {n}")));
        }
        x = mu;
    }
    Ok(x)
}

/// Everything one forecast needs from the data side.
#[derive(Clone, Debug)]
pub struct RolloutJob {
    pub patch_id: String,
    /// The c most recent observed frames, physical units.
    pub context: Vec<Frame>,
    pub context_covariates: Vec<Covariate>,
    /// Standardized elevation of the patch.
    pub elevation: Frame,
    pub seed: u64,
}

impl RolloutJob {
    /// Context ending just before `start` in `dataset`'s patch `patch_id`.
    pub fn from_dataset(
        dataset: &Dataset,
        patch_id: &str,
        start: chrono::NaiveDateTime,
        context_len: usize,
        seed: u64,
    ) -> Result<Self> {
        let patch = dataset
            .patch(patch_id)
            .ok_or_else(|| Error::UnknownPatch(patch_id.to_string()))?;
        let series = &patch.series;
        let end = if start == series.timestamp(series.len()) {
            series.len()
        } else {
            series.index_of(start).ok_or_else(|| {
                Error::InvalidParameter(format!("{start} is not an hourly step of patch {patch_id}"))
            })?
        };
        if end < context_len {
            return Err(Error::InsufficientTimesteps {
                required: context_len,
                available: end,
            });
        }
        Ok(Self {
            patch_id: patch_id.to_string(),
            context: series.frames()[end - context_len..end].to_vec(),
            context_covariates: patch.covariates.steps()[end - context_len..end].to_vec(),
            elevation: patch.elevation.standardized(),
            seed,
        })
    }

    fn start(&self) -> chrono::NaiveDateTime {
        self.context_covariates
            .last()
            .map(|c| c.timestamp + Duration::hours(1))
            .expect("non-empty context")
    }
}

/// One autoregressive trajectory in normalized units.
struct Trajectory {
    job: usize,
    scenario: usize,
    context: Vec<Frame>,
    covariates: Vec<Covariate>,
    output: Vec<Frame>,
}

/// Draw one next frame for each trajectory in `batch` (all at forecast
/// step `step`).
fn sample_next(model: &DiffusionModel, jobs: &[RolloutJob], batch: &mut [Trajectory], step: usize) -> Result<Vec<Frame>> {
    let dim = model.config.dim;
    let cells = dim * dim;
    let frames: Vec<&[Frame]> = batch.iter().map(|t| t.context.as_slice()).collect();
    let elev: Vec<&Frame> = batch.iter().map(|t| &jobs[t.job].elevation).collect();
    let covs: Vec<&[Covariate]> = batch.iter().map(|t| t.covariates.as_slice()).collect();
    let ctx = model.embed(&model.context_batch(&frames, &elev, &covs)?)?;
    let mut rngs: Vec<ChaCha8Rng> = batch
        .iter()
        .map(|t| stream_rng(jobs[t.job].seed, t.scenario as u64, step as u64))
        .collect();
    let b = batch.len();
    let flat = reverse_sample(&model.schedule, cells, &mut rngs, |x, n| {
        let xt = Tensor::from_slice(x, (b, dim, dim), model.device())?.to_dtype(model.dtype())?;
        let y = model.predict_x0(&xt, &vec![n; b], &ctx)?;
        Ok(y.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?)
    })
    .map_err(|e| match e {
        Error::NonFinite(m) => Error::NonFinite(format!("forecast step {}: {m}", step + 1)),
        other => other,
    })?;
    flat.chunks(cells)
        .map(|c| Frame::new(dim, c.to_vec()))
        .collect()
}

/// Roll out `scenarios[j]` (scenario indices) for each job, `horizon` steps.
/// Returns, per job, the trajectories in the order of its scenario list.
pub fn rollout_scenarios(
    model: &DiffusionModel,
    jobs: &[RolloutJob],
    horizon: usize,
    scenarios: &[Vec<usize>],
) -> Result<Vec<ForecastEnsemble>> {
    if horizon == 0 {
        return Err(Error::InvalidParameter("horizon must be at least 1".into()));
    }
    if scenarios.len() != jobs.len() {
        return Err(Error::ShapeMismatch("one scenario list per job required".into()));
    }
    let c = model.config.context_len;
    let mut stats = Vec::with_capacity(jobs.len());
    let mut trajectories = Vec::new();
    for (j, job) in jobs.iter().enumerate() {
        if job.context.len() != c || job.context_covariates.len() != c {
            return Err(Error::InsufficientTimesteps {
                required: c,
                available: job.context.len().min(job.context_covariates.len()),
            });
        }
        if scenarios[j].is_empty() {
            return Err(Error::InvalidParameter("at least one scenario required".into()));
        }
        let s = NormStats::from_values(job.context.iter().flat_map(|f| f.cells().iter().copied()));
        let normalized: Vec<Frame> = job.context.iter().map(|f| f.map(|v| s.normalize(v))).collect();
        stats.push(s);
        for &scenario in &scenarios[j] {
            trajectories.push(Trajectory {
                job: j,
                scenario,
                context: normalized.clone(),
                covariates: job.context_covariates.clone(),
                output: Vec::with_capacity(horizon),
            });
        }
    }
    for step in 0..horizon {
        for chunk in trajectories.chunks_mut(MAX_SAMPLING_BATCH) {
            let next = sample_next(model, jobs, chunk, step).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!(
                    "patch {} scenario {}: {m}",
                    jobs[chunk[0].job].patch_id, chunk[0].scenario
                )),
                other => other,
            })?;
            for (t, frame) in chunk.iter_mut().zip(next) {
                t.context.remove(0);
                t.context.push(frame.clone());
                let cov = t.covariates.last().expect("non-empty").next_hour();
                t.covariates.remove(0);
                t.covariates.push(cov);
                t.output.push(frame);
            }
        }
    }
    let checkpoint_id = model.checkpoint_id()?;
    let mut out: Vec<ForecastEnsemble> = jobs
        .iter()
        .zip(&stats)
        .map(|(job, s)| ForecastEnsemble {
            patch_id: job.patch_id.clone(),
            start: job.start(),
            members: Vec::new(),
            norm_stats: *s,
            seed: job.seed,
            checkpoint_id: checkpoint_id.clone(),
        })
        .collect();
    for t in trajectories {
        let physical = destandardize(&t.output, stats[t.job], true);
        out[t.job].members.push(physical);
    }
    Ok(out)
}

/// `scenarios` members for each job.
pub fn rollout_batch(model: &DiffusionModel, jobs: &[RolloutJob], horizon: usize, scenarios: usize) -> Result<Vec<ForecastEnsemble>> {
    let ids: Vec<Vec<usize>> = jobs.iter().map(|_| (0..scenarios).collect()).collect();
    rollout_scenarios(model, jobs, horizon, &ids)
}

pub fn rollout(model: &DiffusionModel, job: &RolloutJob, horizon: usize, scenarios: usize) -> Result<ForecastEnsemble> {
    Ok(rollout_batch(model, std::slice::from_ref(job), horizon, scenarios)?
        .pop()
        .expect("one job in, one ensemble out"))
}

/// Scores of the model against the persistence and climatology baselines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub model: EvalReport,
    pub persistence: EvalReport,
    pub climatology: EvalReport,
}

impl Evaluation {
    pub fn nrmse_gain_over_persistence(&self) -> f64 {
        1.0 - self.model.nrmse / self.persistence.nrmse
    }
}

/// Forecast every `stride`-spaced window of `dataset` (context c, horizon L)
/// and score the ensembles in physical units.
pub fn evaluate(
    model: &DiffusionModel,
    dataset: &Dataset,
    horizon: usize,
    scenarios: usize,
    stride: usize,
    seed: u64,
) -> Result<Evaluation> {
    let c = model.config.context_len;
    let windows = dataset.windows(c, horizon, stride)?;
    if windows.is_empty() {
        return Err(Error::EmptyDataset("no evaluation windows".into()));
    }
    let jobs: Vec<RolloutJob> = windows
        .iter()
        .map(|w| {
            let patch = dataset.patch(&w.patch_id).expect("window patch exists");
            RolloutJob {
                patch_id: w.patch_id.clone(),
                context: w.context.clone(),
                context_covariates: w.context_covariates.clone(),
                elevation: patch.elevation.standardized(),
                seed: window_seed(seed, &w.patch_id, w.offset),
            }
        })
        .collect();
    let ensembles = rollout_batch(model, &jobs, horizon, scenarios)?;
    let mut ev = Evaluator::new();
    let mut pers = Evaluator::new();
    let mut clim = Evaluator::new();
    for (w, ens) in windows.iter().zip(&ensembles) {
        ev.add(&w.target, &ens.members)?;
        pers.add(&w.target, &[persistence_baseline(&w.context, horizon)])?;
        clim.add(&w.target, &climatology_ensemble(&w.context, horizon))?;
    }
    Ok(Evaluation {
        model: ev.finish()?,
        persistence: pers.finish()?,
        climatology: clim.finish()?,
    })
}

/// Seed for the window of `patch` starting at `offset`.
pub fn window_seed(seed: u64, patch: &str, offset: usize) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for b in patch.bytes().chain(offset.to_le_bytes()) {
        h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Ablation, ModelConfig};
    use crate::dataset::{generate_synthetic, SynthConfig};
    use crate::model::ScheduleConfig;
    use candle_core::DType;

    fn tiny_model(ablation: Ablation, seed: u64) -> DiffusionModel {
        let cfg = ModelConfig {
            ablation,
            ..ModelConfig::for_patch(16)
        };
        let m = DiffusionModel::new(&cfg, ScheduleConfig::default(), seed, DType::F32).unwrap();
        let w = m.params.values("unet.conv_out.weight").unwrap().len();
        m.params.assign("unet.conv_out.weight", &vec![0.02; w]).unwrap();
        m
    }

    fn job(seed: u64) -> (Dataset, RolloutJob) {
        let ds = generate_synthetic(&SynthConfig {
            hours: 48,
            ..SynthConfig::default()
        })
        .unwrap();
        let start = ds.patches[0].series.timestamp(20);
        let j = RolloutJob::from_dataset(&ds, "p00", start, 12, seed).unwrap();
        (ds, j)
    }

    #[test]
    fn single_step_schedule_returns_prediction() {
        let sched = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        let mut rngs = vec![stream_rng(1, 0, 0)];
        let out = reverse_sample(&sched, 3, &mut rngs, |x, n| {
            assert_eq!(n, 1);
            Ok(x.iter().map(|v| 2.0 * v + 1.0).collect())
        })
        .unwrap();
        let mut rng = stream_rng(1, 0, 0);
        let x: Vec<f64> = normals(&mut rng, 3);
        let expect: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert_eq!(out, expect);
    }

    #[test]
    fn streams_are_distinct_and_reproducible() {
        let a: Vec<f64> = normals(&mut stream_rng(5, 0, 0), 4);
        assert_eq!(a, normals(&mut stream_rng(5, 0, 0), 4));
        assert_ne!(a, normals(&mut stream_rng(5, 1, 0), 4));
        assert_ne!(a, normals(&mut stream_rng(5, 0, 1), 4));
        assert_ne!(a, normals(&mut stream_rng(6, 0, 0), 4));
    }

    #[test]
    fn rollout_shape_and_physical_range() {
        let m = tiny_model(Ablation::All, 1);
        let (_, j) = job(3);
        let ens = rollout(&m, &j, 3, 2).unwrap();
        assert_eq!(ens.member_count(), 2);
        assert_eq!(ens.horizon(), 3);
        assert_eq!(ens.dim(), 16);
        ens.validate().unwrap();
        assert!(ens.members.iter().flatten().all(|f| f.cells().iter().all(|&v| v >= 0.0)));
        assert_eq!(ens.start, j.context_covariates[11].timestamp + Duration::hours(1));
    }

    #[test]
    fn rollout_is_deterministic_per_seed() {
        let m = tiny_model(Ablation::InunCov, 2);
        let (_, j) = job(9);
        let a = rollout(&m, &j, 2, 2).unwrap();
        let b = rollout(&m, &j, 2, 2).unwrap();
        assert_eq!(a, b);
        let (_, j2) = job(10);
        assert_ne!(a.members, rollout(&m, &j2, 2, 2).unwrap().members);
    }

    #[test]
    fn scenario_order_does_not_change_trajectories() {
        let m = tiny_model(Ablation::Inun, 4);
        let (_, j) = job(11);
        let fwd = rollout_scenarios(&m, &[j.clone()], 2, &[vec![0, 1, 2]]).unwrap();
        let rev = rollout_scenarios(&m, &[j], 2, &[vec![2, 0, 1]]).unwrap();
        let key = |f: &Vec<Frame>| f.iter().flat_map(|x| x.cells().to_vec()).collect::<Vec<f64>>();
        let mut a: Vec<Vec<f64>> = fwd[0].members.iter().map(key).collect();
        let mut b: Vec<Vec<f64>> = rev[0].members.iter().map(key).collect();
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        b.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn insufficient_history_is_reported() {
        let (ds, _) = job(0);
        let start = ds.patches[0].series.timestamp(5);
        assert!(matches!(
            RolloutJob::from_dataset(&ds, "p00", start, 12, 0),
            Err(Error::InsufficientTimesteps { required: 12, available: 5 })
        ));
        assert!(matches!(
            RolloutJob::from_dataset(&ds, "nope", start, 12, 0),
            Err(Error::UnknownPatch(_))
        ));
    }

    #[test]
    fn evaluation_runs_against_baselines() {
        let m = tiny_model(Ablation::All, 5);
        let (ds, _) = job(0);
        let e = evaluate(&m, &ds, 2, 2, 12, 1).unwrap();
        assert_eq!(e.model.members, 2);
        assert_eq!(e.persistence.members, 1);
        assert_eq!(e.climatology.members, 12);
        assert_eq!(e.model.windows, e.persistence.windows);
    }
}
