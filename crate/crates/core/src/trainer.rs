//! Denoiser training: per-sample noise steps, x⁰ regression loss, Adam with
//! a step learning-rate schedule, validation by sampled NACRPS, and
//! best/last checkpointing.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::{Ablation, ModelConfig};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::grid::{standardize_window, Covariate, Frame};
use crate::kvconf;
use crate::model::{frames_tensor, DiffusionModel, ScheduleConfig, TrainingState};
use crate::optim::{Adam, AdamConfig};
use crate::sampler::evaluate;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Epochs between learning-rate decays.
    pub lr_step: usize,
    pub lr_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub context_length: usize,
    pub train_prediction_length: usize,
    pub diffusion_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub ablation: Ablation,
    pub seed: u64,
    pub max_grad_norm: f64,
    pub val_scenarios: usize,
    pub test_scenarios: usize,
    /// Forecast horizon used for validation and test scoring.
    pub eval_horizon: usize,
    /// Spacing between evaluation windows.
    pub eval_stride: usize,
    pub train_steps: usize,
    pub val_steps: usize,
    pub test_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            lr_step: 5,
            lr_factor: 0.5,
            epochs: 30,
            batch_size: 32,
            context_length: 12,
            train_prediction_length: 1,
            diffusion_steps: 20,
            beta_min: 1e-4,
            beta_max: 1.0,
            ablation: Ablation::All,
            seed: 0,
            max_grad_norm: 1.0,
            val_scenarios: 2,
            test_scenarios: 8,
            eval_horizon: 12,
            eval_stride: 12,
            train_steps: 480,
            val_steps: 24,
            test_steps: 96,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.lr_factor > 0.0 && self.lr_factor <= 1.0) {
            return bad("lr_factor must lie in (0, 1]");
        }
        let counts = [
            self.lr_step,
            self.epochs,
            self.batch_size,
            self.context_length,
            self.train_prediction_length,
            self.diffusion_steps,
            self.val_scenarios,
            self.test_scenarios,
            self.eval_horizon,
            self.eval_stride,
            self.train_steps,
            self.val_steps,
            self.test_steps,
        ];
        if counts.contains(&0) {
            return bad("counts and lengths must be positive");
        }
        if self.train_prediction_length != 1 {
            return bad("training uses one-step targets (train_prediction_length = 1)");
        }
        if !(self.max_grad_norm > 0.0) {
            return bad("max_grad_norm must be positive");
        }
        self.schedule().build()?;
        Ok(())
    }

    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            steps: self.diffusion_steps,
            beta_min: self.beta_min,
            beta_max: self.beta_max,
        }
    }

    /// Learning rate during 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = epoch.saturating_sub(1) / self.lr_step;
        self.learning_rate * self.lr_factor.powi(decays as i32)
    }

    /// Architecture for patch side `dim` under this configuration.
    pub fn model_config(&self, dim: usize) -> ModelConfig {
        ModelConfig {
            context_len: self.context_length,
            ablation: self.ablation,
            ..ModelConfig::for_patch(dim)
        }
    }

    /// Parse `key = value` lines; `#` starts a comment. Unlisted keys keep
    /// their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg = kvconf::parse(&Self::default(), text, Path::new("<train config>"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg = kvconf::load(&Self::default(), path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        kvconf::to_text(self)
    }
}

/// One standardized (context, next frame) pair.
#[derive(Clone, Debug)]
pub struct TrainingSample {
    pub patch_id: String,
    pub offset: usize,
    pub context: Vec<Frame>,
    pub target: Frame,
    pub covariates: Vec<Covariate>,
    pub elevation: Frame,
}

/// Every one-step window of every patch, standardized per window.
pub fn training_samples(dataset: &Dataset, context_len: usize) -> Result<Vec<TrainingSample>> {
    let mut out = Vec::new();
    for patch in &dataset.patches {
        let elevation = patch.elevation.standardized();
        for w in crate::grid::make_windows(&patch.series, &patch.covariates, context_len, 1, 1)? {
            let (w, _) = standardize_window(&w);
            out.push(TrainingSample {
                patch_id: w.patch_id,
                offset: w.offset,
                target: w.target.into_iter().next().expect("one target frame"),
                context: w.context,
                covariates: w.context_covariates,
                elevation: elevation.clone(),
            });
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset("no training windows".into()));
    }
    Ok(out)
}

/// Mean squared x⁰ error for given noise steps and noise draws.
pub fn batch_loss(model: &DiffusionModel, batch: &[&TrainingSample], steps: &[usize], noise: &[Vec<f64>]) -> Result<Tensor> {
    let frames: Vec<&[Frame]> = batch.iter().map(|s| s.context.as_slice()).collect();
    let elev: Vec<&Frame> = batch.iter().map(|s| &s.elevation).collect();
    let covs: Vec<&[Covariate]> = batch.iter().map(|s| s.covariates.as_slice()).collect();
    let ctx = model.embed(&model.context_batch(&frames, &elev, &covs)?)?;
    let mut xn = Vec::with_capacity(batch.len());
    for ((s, &n), eps) in batch.iter().zip(steps).zip(noise) {
        xn.push(Frame::new(s.target.dim(), model.schedule.forward_sample(s.target.cells(), n, eps)?)?);
    }
    let xn_refs: Vec<&[Frame]> = xn.iter().map(std::slice::from_ref).collect();
    let xn_t = frames_tensor(&xn_refs, model.dtype(), model.device())?.squeeze(1)?;
    let targets: Vec<&[Frame]> = batch.iter().map(|s| std::slice::from_ref(&s.target)).collect();
    let x0 = frames_tensor(&targets, model.dtype(), model.device())?.squeeze(1)?;
    let pred = model.predict_x0(&xn_t, steps, &ctx)?;
    Ok((pred - x0)?.sqr()?.mean_all()?)
}

/// Draw a noise step uniformly from `1..=steps`.
pub fn draw_step(rng: &mut impl Rng, steps: usize) -> usize {
    rng.random_range(1..=steps)
}

/// One optimizer step; returns the loss before the update.
pub fn train_step(model: &DiffusionModel, opt: &mut Adam, batch: &[&TrainingSample], rng: &mut ChaCha8Rng, step_index: usize) -> Result<f64> {
    let n_max = model.schedule.steps();
    let cells = model.config.dim * model.config.dim;
    let steps: Vec<usize> = batch.iter().map(|_| draw_step(rng, n_max)).collect();
    let noise: Vec<Vec<f64>> = batch
        .iter()
        .map(|_| (0..cells).map(|_| StandardNormal.sample(&mut *rng)).collect())
        .collect();
    let loss_t = batch_loss(model, batch, &steps, &noise)?;
    let loss = loss_t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    if !loss.is_finite() {
        let ids: Vec<String> = batch.iter().map(|s| format!("{}@{}", s.patch_id, s.offset)).collect();
        return Err(Error::NonFinite(format!(
            "loss {loss} at optimizer step {step_index}; noise steps {steps:?}; windows {ids:?}"
        )));
    }
    let grads = loss_t.backward()?;
    opt.step(&model.params, &grads)?;
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_nacrps: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOutcome {
    pub history: Vec<EpochRecord>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_nacrps: f64,
    pub initial_loss: f64,
}

/// Where [`fit`] writes its artifacts.
#[derive(Clone, Debug)]
pub struct FitOutputs {
    /// Best-validation checkpoint.
    pub best: PathBuf,
    pub last: PathBuf,
    pub history_csv: PathBuf,
}

impl FitOutputs {
    /// `out` for the best model, `<stem>.last.<ext>` and `<stem>.metrics.csv` beside it.
    pub fn beside(out: &Path) -> Self {
        let stem = out.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
        let ext = out.extension().map_or("ckpt".into(), |s| s.to_string_lossy().into_owned());
        Self {
            best: out.to_path_buf(),
            last: out.with_file_name(format!("{stem}.last.{ext}")),
            history_csv: out.with_file_name(format!("{stem}.metrics.csv")),
        }
    }
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,loss,val_nacrps,lr\n");
    for r in history {
        let _ = writeln!(out, "{},{},{},{}", r.epoch, r.loss, r.val_nacrps, r.lr);
    }
    out
}

/// Mean loss of the untrained model over a fixed draw, for comparison.
fn probe_loss(model: &DiffusionModel, samples: &[TrainingSample], seed: u64, batch_size: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_9a0be);
    let cells = model.config.dim * model.config.dim;
    let take: Vec<&TrainingSample> = samples.iter().take(batch_size.max(1)).collect();
    let steps: Vec<usize> = take.iter().map(|_| draw_step(&mut rng, model.schedule.steps())).collect();
    let noise: Vec<Vec<f64>> = take
        .iter()
        .map(|_| (0..cells).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    Ok(batch_loss(model, &take, &steps, &noise)?
        .to_dtype(candle_core::DType::F64)?
        .to_scalar::<f64>()?)
}

/// Train `model` on `train`, selecting the epoch with the best validation
/// NACRPS. On return the model holds the best weights.
pub fn fit(
    model: &DiffusionModel,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    outputs: Option<&FitOutputs>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    if model.config.context_len != cfg.context_length {
        return Err(Error::InvalidParameter("model and training context lengths differ".into()));
    }
    let samples = training_samples(train, cfg.context_length)?;
    let mut opt = Adam::new(
        cfg.learning_rate,
        AdamConfig {
            max_grad_norm: Some(cfg.max_grad_norm),
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let initial_loss = probe_loss(model, &samples, cfg.seed, cfg.batch_size)?;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::new();
    let mut best: Option<(usize, f64, BTreeMap<String, Vec<f64>>)> = None;
    let train_config = serde_json::to_value(cfg)?;

    for epoch in 1..=cfg.epochs {
        opt.lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut count = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrainingSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let loss = train_step(model, &mut opt, &batch, &mut rng, step_losses.len())?;
            step_losses.push(loss);
            sum += loss;
            count += 1;
        }
        let loss = sum / count as f64;
        let val_nacrps = match evaluate(model, val, cfg.eval_horizon.min(val.timesteps().saturating_sub(cfg.context_length)).max(1), cfg.val_scenarios, cfg.eval_stride, cfg.seed) {
            Ok(e) => e.model.nacrps,
            Err(Error::AllZeroObservations) | Err(Error::DegenerateRange { .. }) => f64::NAN,
            Err(e) => return Err(e),
        };
        let lr = opt.lr;
        log::info!("epoch {epoch}: loss {loss:.5} val_nacrps {val_nacrps:.5} lr {lr}");
        history.push(EpochRecord {
            epoch,
            loss,
            val_nacrps,
            lr,
        });
        let state = TrainingState {
            epoch,
            learning_rate: lr,
            optimizer: Some(opt.state()?),
            train_config: train_config.clone(),
        };
        let improved = match &best {
            None => true,
            Some((_, b, _)) => val_nacrps < *b || (b.is_nan() && !val_nacrps.is_nan()),
        };
        if improved {
            let snapshot = model
                .params
                .named_vars()
                .into_iter()
                .map(|(n, _)| model.params.values(&n).map(|v| (n, v)))
                .collect::<Result<_>>()?;
            best = Some((epoch, val_nacrps, snapshot));
            if let Some(out) = outputs {
                model.save(&out.best, &state)?;
            }
        }
        if let Some(out) = outputs {
            model.save(&out.last, &state)?;
            fs::write(&out.history_csv, history_csv(&history))?;
        }
    }

    let (best_epoch, best_val_nacrps, snapshot) = best.expect("at least one epoch");
    for (name, values) in &snapshot {
        model.params.assign(name, values)?;
    }
    Ok(FitOutcome {
        history,
        step_losses,
        best_epoch,
        best_val_nacrps,
        initial_loss,
    })
}

/// Build a fresh model for `train`'s patch size and fit it.
pub fn train_new(train: &Dataset, val: &Dataset, cfg: &TrainConfig, outputs: Option<&FitOutputs>) -> Result<(DiffusionModel, FitOutcome)> {
    let dim = train
        .dim()
        .ok_or_else(|| Error::EmptyDataset("training set has no patches".into()))?;
    let model = DiffusionModel::new(&cfg.model_config(dim), cfg.schedule(), cfg.seed, candle_core::DType::F32)?;
    let outcome = fit(&model, train, val, cfg, outputs)?;
    Ok((model, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SynthConfig};

    #[test]
    fn lr_halves_every_five_epochs() {
        let cfg = TrainConfig::default();
        for e in 1..=5 {
            assert_eq!(cfg.lr_at(e), 0.001);
        }
        for e in 6..=10 {
            assert_eq!(cfg.lr_at(e), 0.0005);
        }
        assert_eq!(cfg.lr_at(11), 0.00025);
    }

    #[test]
    fn noise_steps_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; 21];
        for _ in 0..100_000 {
            counts[draw_step(&mut rng, 20)] += 1;
        }
        assert_eq!(counts[0], 0);
        for &c in &counts[1..] {
            assert!((c as f64 - 5000.0).abs() < 250.0, "{counts:?}");
        }
        let chi2: f64 = counts[1..].iter().map(|&c| (c as f64 - 5000.0).powi(2) / 5000.0).sum();
        // 99.9th percentile of χ² with 19 degrees of freedom.
        assert!(chi2 < 43.82, "chi2 = {chi2}");
    }

    #[test]
    fn config_text_round_trip() {
        let cfg = TrainConfig {
            epochs: 3,
            ablation: Ablation::InunCov,
            learning_rate: 0.002,
            ..Default::default()
        };
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
        let parsed = TrainConfig::parse("# comment\nepochs = 4\nablation inun\n").unwrap();
        assert_eq!(parsed.epochs, 4);
        assert_eq!(parsed.ablation, Ablation::Inun);
        assert!(TrainConfig::parse("bogus = 1").is_err());
        assert!(TrainConfig::parse("epochs = many").is_err());
        assert!(TrainConfig::parse("epochs = 0").is_err());
    }

    fn small_data() -> Dataset {
        generate_synthetic(&SynthConfig {
            hours: 40,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_predictor_loss_is_mean_square_target() {
        let ds = small_data();
        let samples = training_samples(&ds, 12).unwrap();
        let cfg = ModelConfig::for_patch(16);
        let model = DiffusionModel::new(&cfg, ScheduleConfig::default(), 0, candle_core::DType::F64).unwrap();
        let batch: Vec<&TrainingSample> = samples.iter().take(6).collect();
        let steps = vec![3; 6];
        let noise = vec![vec![0.5; 256]; 6];
        let loss = batch_loss(&model, &batch, &steps, &noise).unwrap().to_scalar::<f64>().unwrap();
        let expect: f64 = batch.iter().flat_map(|s| s.target.cells()).map(|v| v * v).sum::<f64>() / (6.0 * 256.0);
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn loss_is_permutation_invariant() {
        let ds = small_data();
        let samples = training_samples(&ds, 12).unwrap();
        let cfg = ModelConfig::for_patch(16);
        let model = DiffusionModel::new(&cfg, ScheduleConfig::default(), 0, candle_core::DType::F64).unwrap();
        let w = model.params.values("unet.conv_out.weight").unwrap().len();
        model.params.assign("unet.conv_out.weight", &vec![0.03; w]).unwrap();
        let batch: Vec<&TrainingSample> = samples.iter().take(4).collect();
        let steps = vec![1, 5, 9, 20];
        let noise: Vec<Vec<f64>> = (0..4).map(|i| vec![0.1 * i as f64; 256]).collect();
        let a = batch_loss(&model, &batch, &steps, &noise).unwrap().to_scalar::<f64>().unwrap();
        let p = [2, 0, 3, 1];
        let pb: Vec<&TrainingSample> = p.iter().map(|&i| batch[i]).collect();
        let ps: Vec<usize> = p.iter().map(|&i| steps[i]).collect();
        let pn: Vec<Vec<f64>> = p.iter().map(|&i| noise[i].clone()).collect();
        let b = batch_loss(&model, &pb, &ps, &pn).unwrap().to_scalar::<f64>().unwrap();
        assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn one_epoch_takes_ceil_batches_steps() {
        let ds = generate_synthetic(&SynthConfig {
            hours: 51,
            ..SynthConfig::default()
        })
        .unwrap();
        let (train, val, _) = ds.split_chronological(26, 24, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 5,
            eval_horizon: 2,
            ..Default::default()
        };
        let samples = training_samples(&train, 12).unwrap();
        let (_, out) = train_new(&train, &val, &cfg, None).unwrap();
        assert_eq!(out.step_losses.len(), samples.len().div_ceil(5));
        assert_eq!(out.history.len(), 1);
        assert_eq!(out.history[0].lr, 0.001);
    }
}
