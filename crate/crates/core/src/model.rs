//! The full conditional diffusion model (context encoder + denoiser) and its
//! checkpoint container.
//!
//! Checkpoint layout: the 8-byte magic `DFCKPT1\n`, a little-endian `u64`
//! header length, a JSON header, then every tensor as little-endian `f64`
//! in the order listed by the header.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{Ablation, ModelConfig};
use crate::denoiser::Denoiser;
use crate::encoder::{covariate_tensor, ContextEmbedding, ContextEncoder};
use crate::error::{Error, Result};
use crate::grid::{Covariate, Frame};
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::schedule::NoiseSchedule;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DFCKPT1\n";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            beta_min: 1e-4,
            beta_max: 1.0,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_min, self.beta_max)
    }
}

/// Inputs to the context encoder for a batch.
#[derive(Clone, Debug)]
pub struct ContextBatch {
    /// `(B, c, D, D)` standardized inundation.
    pub frames: Tensor,
    /// `(B, D, D)` standardized elevation.
    pub elevation: Option<Tensor>,
    /// `(B, c, 4)` calendar encodings.
    pub covariates: Option<Tensor>,
}

/// Stack `frames[b][t]` into a `(B, T, D, D)` tensor.
pub fn frames_tensor(frames: &[&[Frame]], dtype: DType, device: &Device) -> Result<Tensor> {
    let b = frames.len();
    let t = frames.first().map_or(0, |f| f.len());
    let d = frames.first().and_then(|f| f.first()).map_or(0, Frame::dim);
    let mut flat = Vec::with_capacity(b * t * d * d);
    for seq in frames {
        if seq.len() != t {
            return Err(Error::ShapeMismatch("frame sequences differ in length".into()));
        }
        for f in *seq {
            if f.dim() != d {
                return Err(Error::ShapeMismatch(format!("frame is {0}×{0}, expected {d}×{d}", f.dim())));
            }
            flat.extend_from_slice(f.cells());
        }
    }
    Ok(Tensor::from_vec(flat, (b, t, d, d), device)?.to_dtype(dtype)?)
}

/// Training-loop state stored alongside the weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingState {
    pub epoch: usize,
    pub learning_rate: f64,
    pub optimizer: Option<AdamState>,
    /// Free-form training configuration echoed into the header.
    pub train_config: serde_json::Value,
}

#[derive(Clone)]
pub struct DiffusionModel {
    pub params: ParamStore,
    pub encoder: ContextEncoder,
    pub denoiser: Denoiser,
    pub config: ModelConfig,
    pub schedule_config: ScheduleConfig,
    pub schedule: NoiseSchedule,
    pub seed: u64,
    dtype: DType,
    device: Device,
}

impl DiffusionModel {
    pub fn new(config: &ModelConfig, schedule_config: ScheduleConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let device = Device::Cpu;
        let params = ParamStore::new(seed);
        let vb = params.var_builder(dtype, &device);
        let encoder = ContextEncoder::new(config, vb.pp("encoder"))?;
        let denoiser = Denoiser::new(config, vb.pp("unet"))?;
        Ok(Self {
            params,
            encoder,
            denoiser,
            config: config.clone(),
            schedule: schedule_config.build()?,
            schedule_config,
            seed,
            dtype,
            device,
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn ablation(&self) -> Ablation {
        self.config.ablation
    }

    pub fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }

    /// Stable identifier derived from the parameter values.
    pub fn checkpoint_id(&self) -> Result<String> {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, _) in self.params.named_vars() {
            for b in name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
            }
            for v in self.params.values(&name)? {
                for b in v.to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        Ok(format!("{h:016x}"))
    }

    /// Build encoder inputs; components the ablation does not use are left
    /// out.
    pub fn context_batch(
        &self,
        frames: &[&[Frame]],
        elevations: &[&Frame],
        covariates: &[&[Covariate]],
    ) -> Result<ContextBatch> {
        let frames_t = frames_tensor(frames, self.dtype, &self.device)?;
        let elevation = if self.config.ablation.uses_elevation() {
            if elevations.len() != frames.len() {
                return Err(Error::ShapeMismatch("one elevation grid per batch element required".into()));
            }
            let e: Vec<&[Frame]> = elevations.iter().map(|f| std::slice::from_ref(*f)).collect();
            Some(frames_tensor(&e, self.dtype, &self.device)?.squeeze(1)?)
        } else {
            None
        };
        let covariates = if self.config.ablation.uses_covariates() {
            if covariates.len() != frames.len() {
                return Err(Error::ShapeMismatch("one covariate slice per batch element required".into()));
            }
            Some(covariate_tensor(covariates, self.dtype, &self.device)?)
        } else {
            None
        };
        Ok(ContextBatch {
            frames: frames_t,
            elevation,
            covariates,
        })
    }

    pub fn embed(&self, batch: &ContextBatch) -> Result<ContextEmbedding> {
        self.encoder
            .forward(&batch.frames, batch.elevation.as_ref(), batch.covariates.as_ref())
    }

    pub fn predict_x0(&self, xn: &Tensor, steps: &[usize], context: &ContextEmbedding) -> Result<Tensor> {
        if let Some(&n) = steps.iter().find(|&&n| n == 0 || n > self.schedule.steps()) {
            return Err(Error::StepOutOfRange {
                step: n,
                max: self.schedule.steps(),
            });
        }
        self.denoiser.predict_x0(xn, steps, &context.tokens)
    }

    pub fn save(&self, path: &Path, state: &TrainingState) -> Result<()> {
        let mut tensors = Vec::new();
        let mut data: Vec<f64> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, values: &[f64]| {
            tensors.push(TensorEntry {
                name,
                shape,
                len: values.len(),
            });
            data.extend_from_slice(values);
        };
        for (name, var) in self.params.named_vars() {
            push(format!("param/{name}"), var.dims().to_vec(), &self.params.values(&name)?);
        }
        let mut optimizer_step = None;
        if let Some(opt) = &state.optimizer {
            optimizer_step = Some(opt.step);
            for (name, m) in &opt.m {
                push(format!("adam_m/{name}"), vec![m.len()], m);
            }
            for (name, v) in &opt.v {
                push(format!("adam_v/{name}"), vec![v.len()], v);
            }
        }
        let header = CheckpointHeader {
            format: "DFCKPT1".into(),
            model: self.config.clone(),
            schedule: self.schedule_config,
            dtype: format!("{:?}", self.dtype).to_lowercase(),
            seed: self.seed,
            epoch: state.epoch,
            learning_rate: state.learning_rate,
            optimizer_step,
            checkpoint_id: self.checkpoint_id()?,
            train_config: state.train_config.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&(json.len() as u64).to_le_bytes())?;
        out.write_all(&json)?;
        for v in data {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    /// Load a checkpoint, rebuilding the network in `dtype`.
    pub fn load(path: &Path, dtype: DType) -> Result<(Self, TrainingState)> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a DFCKPT1 checkpoint"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| bad(&format!("bad header: {e}")))?;
        let model = Self::new(&header.model, header.schedule, header.seed, dtype)?;
        let mut cursor = 16 + hlen;
        let mut m = std::collections::BTreeMap::new();
        let mut v = std::collections::BTreeMap::new();
        let mut loaded = 0;
        for entry in &header.tensors {
            let end = cursor + entry.len * 8;
            let raw = bytes.get(cursor..end).ok_or_else(|| bad("truncated tensor data"))?;
            let values: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            cursor = end;
            if let Some(name) = entry.name.strip_prefix("param/") {
                let var = model
                    .params
                    .get(name)
                    .ok_or_else(|| bad(&format!("unexpected parameter {name}")))?;
                if var.dims() != entry.shape.as_slice() {
                    return Err(bad(&format!("shape mismatch for {name}")));
                }
                model.params.assign(name, &values)?;
                loaded += 1;
            } else if let Some(name) = entry.name.strip_prefix("adam_m/") {
                m.insert(name.to_string(), values);
            } else if let Some(name) = entry.name.strip_prefix("adam_v/") {
                v.insert(name.to_string(), values);
            } else {
                return Err(bad(&format!("unknown tensor {}", entry.name)));
            }
        }
        if cursor != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        if loaded != model.params.named_vars().len() {
            return Err(bad("checkpoint is missing parameters"));
        }
        let optimizer = header.optimizer_step.map(|step| AdamState { step, m, v });
        let state = TrainingState {
            epoch: header.epoch,
            learning_rate: header.learning_rate,
            optimizer,
            train_config: header.train_config,
        };
        Ok((model, state))
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    model: ModelConfig,
    schedule: ScheduleConfig,
    dtype: String,
    seed: u64,
    epoch: usize,
    learning_rate: f64,
    optimizer_step: Option<u64>,
    checkpoint_id: String,
    train_config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Header metadata readable without rebuilding the network.
pub fn checkpoint_info(path: &Path) -> Result<serde_json::Value> {
    let mut f = fs::File::open(path)?;
    let mut pre = [0u8; 16];
    f.read_exact(&mut pre)?;
    if &pre[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("{}: not a DFCKPT1 checkpoint", path.display())));
    }
    let hlen = u64::from_le_bytes(pre[8..16].try_into().expect("8 bytes")) as usize;
    let mut body = vec![0u8; hlen];
    f.read_exact(&mut body)?;
    let mut v: serde_json::Value = serde_json::from_slice(&body)?;
    if let Some(obj) = v.as_object_mut() {
        obj.remove("tensors");
    }
    Ok(v)
}
