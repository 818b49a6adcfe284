//! Context encoder: per-frame convolutional features (optionally with an
//! elevation channel), sinusoidal calendar features, and a per-token linear
//! fusion into the context embedding consumed by the denoiser.

use std::f64::consts::PI;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{Conv2d, Conv2dConfig, Linear, Module, VarBuilder};

use crate::config::{Ablation, ModelConfig};
use crate::error::{Error, Result};
use crate::grid::Covariate;

/// Width of the calendar encoding per timestep.
pub const COVARIATE_FEATURES: usize = 4;

/// `(sin, cos)` of the hour-of-day phase followed by the day-of-month phase.
pub fn covariate_encoding(c: &Covariate) -> [f64; COVARIATE_FEATURES] {
    let hour = 2.0 * PI * c.hour_of_day as f64 / 24.0;
    let day = 2.0 * PI * (c.day_of_month as f64 - 1.0) / 31.0;
    [hour.sin(), hour.cos(), day.sin(), day.cos()]
}

/// `(batch, steps, 4)` tensor of covariate encodings.
pub fn covariate_tensor(batch: &[&[Covariate]], dtype: DType, device: &Device) -> Result<Tensor> {
    let steps = batch.first().map_or(0, |b| b.len());
    if batch.iter().any(|b| b.len() != steps) {
        return Err(Error::ShapeMismatch("covariate slices differ in length".into()));
    }
    let flat: Vec<f64> = batch
        .iter()
        .flat_map(|b| b.iter().flat_map(covariate_encoding))
        .collect();
    Ok(Tensor::from_vec(flat, (batch.len(), steps, COVARIATE_FEATURES), device)?.to_dtype(dtype)?)
}

/// Average-pool a square `(N, C, H, H)` map to `(N, C, out, out)`, using
/// PyTorch's adaptive bin edges when `out` does not divide `H`.
pub fn adaptive_avg_pool(x: &Tensor, out: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h != w {
        return Err(Error::ShapeMismatch(format!("expected square map, got {h}×{w}")));
    }
    if h == out {
        return Ok(x.clone());
    }
    if h % out == 0 {
        return Ok(x.avg_pool2d(h / out)?);
    }
    let edges = |i: usize| (i * h / out, ((i + 1) * h).div_ceil(out));
    let mut rows = Vec::with_capacity(out);
    for i in 0..out {
        let (r0, r1) = edges(i);
        let band = x.narrow(2, r0, r1 - r0)?.mean_keepdim(2)?;
        let mut cols = Vec::with_capacity(out);
        for j in 0..out {
            let (c0, c1) = edges(j);
            cols.push(band.narrow(3, c0, c1 - c0)?.mean_keepdim(3)?);
        }
        rows.push(Tensor::cat(&cols, 3)?);
    }
    Ok(Tensor::cat(&rows, 2)?)
}

/// Context tokens `(batch, c, e)` and the configuration that produced them.
#[derive(Clone, Debug)]
pub struct ContextEmbedding {
    pub tokens: Tensor,
    pub ablation: Ablation,
}

#[derive(Clone, Debug)]
pub struct ContextEncoder {
    convs: Vec<Conv2d>,
    fuse: Linear,
    cfg: ModelConfig,
}

impl ContextEncoder {
    pub fn new(cfg: &ModelConfig, vb: VarBuilder) -> Result<Self> {
        let conv_cfg = Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        let mut in_ch = cfg.encoder_in_channels();
        let mut convs = Vec::with_capacity(cfg.encoder_channels.len());
        for (i, &out_ch) in cfg.encoder_channels.iter().enumerate() {
            convs.push(candle_nn::conv2d(in_ch, out_ch, 3, conv_cfg, vb.pp(format!("conv{i}")))?);
            in_ch = out_ch;
        }
        let fuse = candle_nn::linear(cfg.fusion_input_dim(), cfg.embed_dim, vb.pp("fuse"))?;
        Ok(Self {
            convs,
            fuse,
            cfg: cfg.clone(),
        })
    }

    pub fn ablation(&self) -> Ablation {
        self.cfg.ablation
    }

    /// Stack frames `(B, c, D, D)` with the elevation `(B, D, D)` when the
    /// configuration uses it, giving `(B·c, channels, D, D)`.
    pub fn spatial_input(&self, frames: &Tensor, elevation: Option<&Tensor>) -> Result<Tensor> {
        let (b, c, d1, d2) = frames.dims4()?;
        if d1 != self.cfg.dim || d2 != self.cfg.dim {
            return Err(Error::ShapeMismatch(format!(
                "context frames are {d1}×{d2}, model expects {0}×{0}",
                self.cfg.dim
            )));
        }
        let x = frames.reshape((b * c, 1, d1, d2))?;
        if !self.cfg.ablation.uses_elevation() {
            return Ok(x);
        }
        let elev = elevation.ok_or_else(|| {
            Error::InvalidParameter(format!("{} configuration needs elevation", self.cfg.ablation.label()))
        })?;
        let dims = elev.dims();
        if dims != [b, d1, d2] {
            return Err(Error::ShapeMismatch(format!(
                "elevation shape {dims:?} does not match frames ({b}, {d1}, {d2})"
            )));
        }
        let elev = elev
            .unsqueeze(1)?
            .broadcast_as((b, c, d1, d2))?
            .reshape((b * c, 1, d1, d2))?;
        Ok(Tensor::cat(&[&x, &elev], 1)?)
    }

    /// Per-timestep spatial features `(B, c, F)`.
    pub fn encode_spatial(&self, frames: &Tensor, elevation: Option<&Tensor>) -> Result<Tensor> {
        let (b, c, _, _) = frames.dims4()?;
        let mut x = self.spatial_input(frames, elevation)?;
        for conv in &self.convs {
            x = conv.forward(&x)?.silu()?;
            if x.dim(2)? >= 2 {
                x = x.avg_pool2d(2)?;
            }
        }
        let x = adaptive_avg_pool(&x, self.cfg.pool_grid)?;
        Ok(x.reshape((b, c, self.cfg.spatial_feature_dim()))?)
    }

    /// Concatenate `f` with `g` (when the configuration uses covariates) —
    /// the input of the fusion layer.
    pub fn fusion_input(&self, f: &Tensor, g: Option<&Tensor>) -> Result<Tensor> {
        if !self.cfg.ablation.uses_covariates() {
            return Ok(f.clone());
        }
        let g = g.ok_or_else(|| {
            Error::InvalidParameter(format!("{} configuration needs covariates", self.cfg.ablation.label()))
        })?;
        let (fb, fc, _) = f.dims3()?;
        let (gb, gc, gw) = g.dims3()?;
        if (fb, fc) != (gb, gc) || gw != COVARIATE_FEATURES {
            return Err(Error::ShapeMismatch(format!(
                "covariates {:?} do not align with spatial features {:?}",
                g.dims(),
                f.dims()
            )));
        }
        Ok(Tensor::cat(&[f, g], D::Minus1)?)
    }

    pub fn fuse_context(&self, f: &Tensor, g: Option<&Tensor>) -> Result<ContextEmbedding> {
        let x = self.fusion_input(f, g)?;
        Ok(ContextEmbedding {
            tokens: self.fuse.forward(&x)?,
            ablation: self.cfg.ablation,
        })
    }

    pub fn forward(
        &self,
        frames: &Tensor,
        elevation: Option<&Tensor>,
        covariates: Option<&Tensor>,
    ) -> Result<ContextEmbedding> {
        let f = self.encode_spatial(frames, elevation)?;
        self.fuse_context(&f, covariates)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use chrono::NaiveDate;

    fn cov(hour: u32, day: u32) -> Covariate {
        let ts = NaiveDate::from_ymd_opt(2024, 3, day).unwrap().and_hms_opt(hour, 0, 0).unwrap();
        Covariate::at(ts)
    }

    fn encoder(ablation: Ablation, seed: u64) -> (ContextEncoder, ParamStore) {
        let cfg = ModelConfig {
            ablation,
            ..ModelConfig::for_patch(16)
        };
        let store = ParamStore::new(seed);
        let enc = ContextEncoder::new(&cfg, store.var_builder(DType::F64, &Device::Cpu).pp("encoder")).unwrap();
        (enc, store)
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn calendar_encoding_phases() {
        let z = covariate_encoding(&cov(0, 1));
        assert_eq!(z, [0.0, 1.0, 0.0, 1.0]);
        let six = covariate_encoding(&cov(6, 1));
        assert!((six[0] - 1.0).abs() < 1e-15 && six[1].abs() < 1e-15);
        let dist = |a: [f64; 4], b: [f64; 4]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        let (h0, h12, h23) = (covariate_encoding(&cov(0, 5)), covariate_encoding(&cov(12, 5)), covariate_encoding(&cov(23, 5)));
        assert!(dist(h23, h0) < dist(h12, h0));
    }

    #[test]
    fn d16_has_single_eight_channel_block() {
        let (enc, _) = encoder(Ablation::All, 0);
        assert_eq!(enc.convs.len(), 1);
        assert_eq!(enc.convs[0].weight().dims(), &[8, 2, 3, 3]);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_features() {
        let (enc, store) = encoder(Ablation::InunElev, 1);
        for (name, var) in store.named_vars() {
            if name.ends_with("bias") {
                var.set(&var.as_tensor().zeros_like().unwrap()).unwrap();
            }
        }
        let frames = Tensor::zeros((2, 12, 16, 16), DType::F64, &Device::Cpu).unwrap();
        let elev = Tensor::zeros((2, 16, 16), DType::F64, &Device::Cpu).unwrap();
        let f = enc.encode_spatial(&frames, Some(&elev)).unwrap();
        assert_eq!(f.dims(), &[2, 12, 128]);
        assert_eq!(f.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn token_count_follows_context_length() {
        let (enc, _) = encoder(Ablation::Inun, 2);
        for c in [1, 5, 12] {
            let frames = randn(&[1, c, 16, 16], 3);
            let h = enc.forward(&frames, None, None).unwrap();
            assert_eq!(h.tokens.dims(), &[1, c, 32]);
        }
    }

    #[test]
    fn inun_config_skips_covariates() {
        let (enc, _) = encoder(Ablation::Inun, 2);
        assert_eq!(enc.fuse.weight().dims(), &[32, 128]);
        let (enc, _) = encoder(Ablation::InunCov, 2);
        assert_eq!(enc.fuse.weight().dims(), &[32, 132]);
    }

    #[test]
    fn missing_components_are_errors() {
        let frames = randn(&[1, 12, 16, 16], 4);
        let (enc, _) = encoder(Ablation::All, 2);
        assert!(enc.forward(&frames, None, None).is_err());
        let bad_elev = randn(&[1, 8, 8], 5);
        assert!(enc.spatial_input(&frames, Some(&bad_elev)).is_err());
    }

    #[test]
    fn identity_fusion_passes_concatenation_through() {
        let cfg = ModelConfig {
            ablation: Ablation::InunCov,
            ..ModelConfig::for_patch(16)
        };
        let cfg = ModelConfig {
            embed_dim: cfg.fusion_input_dim(),
            ..cfg
        };
        let store = ParamStore::new(0);
        let enc = ContextEncoder::new(&cfg, store.var_builder(DType::F64, &Device::Cpu)).unwrap();
        let n = cfg.fusion_input_dim();
        let eye: Vec<f64> = (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect();
        store.assign("fuse.weight", &eye).unwrap();
        store.assign("fuse.bias", &vec![0.0; n]).unwrap();
        let f = randn(&[1, 3, 128], 6);
        let g = randn(&[1, 3, 4], 7);
        let h = enc.fuse_context(&f, Some(&g)).unwrap();
        let cat = Tensor::cat(&[&f, &g], 2).unwrap();
        assert_eq!(h.tokens.to_vec3::<f64>().unwrap(), cat.to_vec3::<f64>().unwrap());
    }

    #[test]
    fn token_permutation_commutes_with_fusion() {
        let (enc, _) = encoder(Ablation::Inun, 8);
        let f = randn(&[1, 4, 128], 9);
        let perm = Tensor::new(&[2u32, 0, 3, 1], &Device::Cpu).unwrap();
        let a = enc.fuse_context(&f.index_select(&perm, 1).unwrap(), None).unwrap();
        let b = enc.fuse_context(&f, None).unwrap().tokens.index_select(&perm, 1).unwrap();
        assert_eq!(a.tokens.to_vec3::<f64>().unwrap(), b.to_vec3::<f64>().unwrap());
    }

    #[test]
    fn full_config_contains_inun_slice() {
        let (full, _) = encoder(Ablation::All, 10);
        let (inun, _) = encoder(Ablation::Inun, 10);
        let frames = randn(&[2, 12, 16, 16], 11);
        let elev = randn(&[2, 16, 16], 12);
        let a = full.spatial_input(&frames, Some(&elev)).unwrap().narrow(1, 0, 1).unwrap();
        let b = inun.spatial_input(&frames, None).unwrap();
        assert_eq!(a.flatten_all().unwrap().to_vec1::<f64>().unwrap(), b.flatten_all().unwrap().to_vec1::<f64>().unwrap());
        let f = randn(&[2, 12, 128], 13);
        let g = randn(&[2, 12, 4], 14);
        let (cov_enc, _) = encoder(Ablation::All, 10);
        let joined = cov_enc.fusion_input(&f, Some(&g)).unwrap().narrow(2, 0, 128).unwrap();
        assert_eq!(joined.to_vec3::<f64>().unwrap(), inun.fusion_input(&f, None).unwrap().to_vec3::<f64>().unwrap());
    }

    #[test]
    fn encoding_is_deterministic_and_time_local() {
        let (enc, _) = encoder(Ablation::Inun, 15);
        let frames = randn(&[1, 13, 16, 16], 16);
        let early = enc.encode_spatial(&frames.narrow(1, 0, 12).unwrap(), None).unwrap();
        let late = enc.encode_spatial(&frames.narrow(1, 1, 12).unwrap(), None).unwrap();
        // The frame at absolute step k encodes identically in both windows.
        for k in 1..12 {
            assert_eq!(
                early.narrow(1, k, 1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap(),
                late.narrow(1, k - 1, 1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
            );
        }
        let again = enc.encode_spatial(&frames.narrow(1, 0, 12).unwrap(), None).unwrap();
        assert_eq!(early.flatten_all().unwrap().to_vec1::<f64>().unwrap(), again.flatten_all().unwrap().to_vec1::<f64>().unwrap());
    }

    #[test]
    fn adaptive_pool_uneven_bins() {
        let x = Tensor::arange(0.0f64, 100.0, &Device::Cpu).unwrap().reshape((1, 1, 10, 10)).unwrap();
        let p = adaptive_avg_pool(&x, 4).unwrap();
        assert_eq!(p.dims(), &[1, 1, 4, 4]);
        // First bin covers rows 0..3, cols 0..3.
        let first = p.flatten_all().unwrap().to_vec1::<f64>().unwrap()[0];
        assert!((first - 11.0).abs() < 1e-12);
    }
}
