//! Conditional UNet x̂(xⁿ, n, h) predicting the clean frame.
//!
//! Layout follows the familiar diffusion UNet: an input convolution, a stack
//! of down blocks (ResNet layers, optional cross-attention, stride-2
//! downsampling), a mid block, mirrored up blocks consuming the skip
//! connections, and a zero-initialized output convolution.

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{Conv2d, Conv2dConfig, GroupNorm, Init, Linear, Module, VarBuilder};

use crate::config::ModelConfig;
use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-5;

/// Sinusoidal embedding of integer steps, `(len(steps), dim)`, cosine half
/// first.
pub fn step_embedding(steps: &[usize], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(steps.len() * dim);
    for &n in steps {
        let freqs = (0..half).map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp() * n as f64);
        let (cos, sin): (Vec<f64>, Vec<f64>) = freqs.map(|a| (a.cos(), a.sin())).unzip();
        out.extend(cos);
        out.extend(sin);
        out.extend(std::iter::repeat_n(0.0, dim - 2 * half));
    }
    Ok(Tensor::from_vec(out, (steps.len(), dim), device)?.to_dtype(dtype)?)
}

/// Parameter-free encoding of token recency added to the context before the
/// key/value projections; the newest token gets age 0. Without it attention
/// sees the context as an unordered set and cannot tell which frame is latest.
pub fn recency_encoding(tokens: usize, dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let ages: Vec<usize> = (0..tokens).rev().collect();
    step_embedding(&ages, dim, dtype, device)
}

fn conv3(in_ch: usize, out_ch: usize, stride: usize, vb: VarBuilder) -> Result<Conv2d> {
    let cfg = Conv2dConfig {
        padding: 1,
        stride,
        ..Default::default()
    };
    Ok(candle_nn::conv2d(in_ch, out_ch, 3, cfg, vb)?)
}

#[derive(Clone, Debug)]
struct ResnetBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time_proj: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl ResnetBlock {
    fn new(in_ch: usize, out_ch: usize, temb: usize, groups: usize, vb: VarBuilder) -> Result<Self> {
        let shortcut = if in_ch != out_ch {
            Some(candle_nn::conv2d(in_ch, out_ch, 1, Default::default(), vb.pp("shortcut"))?)
        } else {
            None
        };
        Ok(Self {
            norm1: candle_nn::group_norm(groups, in_ch, NORM_EPS, vb.pp("norm1"))?,
            conv1: conv3(in_ch, out_ch, 1, vb.pp("conv1"))?,
            time_proj: candle_nn::linear(temb, out_ch, vb.pp("time_proj"))?,
            norm2: candle_nn::group_norm(groups, out_ch, NORM_EPS, vb.pp("norm2"))?,
            conv2: conv3(out_ch, out_ch, 1, vb.pp("conv2"))?,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let t = self.time_proj.forward(&temb.silu()?)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.shortcut {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Spatial positions attend to context tokens; residual output.
#[derive(Clone, Debug)]
struct CrossAttention {
    norm: GroupNorm,
    to_q: Linear,
    to_k: Linear,
    to_v: Linear,
    to_out: Linear,
    heads: usize,
    head_dim: usize,
}

impl CrossAttention {
    fn new(channels: usize, context_dim: usize, cfg: &ModelConfig, vb: VarBuilder) -> Result<Self> {
        let inner = cfg.attention_dim.unwrap_or(channels);
        Ok(Self {
            norm: candle_nn::group_norm(cfg.norm_groups, channels, NORM_EPS, vb.pp("norm"))?,
            to_q: candle_nn::linear_no_bias(channels, inner, vb.pp("to_q"))?,
            to_k: candle_nn::linear_no_bias(context_dim, inner, vb.pp("to_k"))?,
            to_v: candle_nn::linear_no_bias(context_dim, inner, vb.pp("to_v"))?,
            to_out: candle_nn::linear(inner, channels, vb.pp("to_out"))?,
            heads: cfg.attention_heads,
            head_dim: inner / cfg.attention_heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, _) = x.dims3()?;
        Ok(x.reshape((b, l, self.heads, self.head_dim))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    fn forward(&self, x: &Tensor, context: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let seq = self
            .norm
            .forward(x)?
            .reshape((b, c, h * w))?
            .transpose(1, 2)?
            .contiguous()?;
        let q = self.split_heads(&self.to_q.forward(&seq)?)?;
        let k = self.split_heads(&self.to_k.forward(context)?)?;
        let v = self.split_heads(&self.to_v.forward(context)?)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?.matmul(&v)?;
        let attn = attn
            .transpose(1, 2)?
            .reshape((b, h * w, self.heads * self.head_dim))?;
        let out = self
            .to_out
            .forward(&attn)?
            .transpose(1, 2)?
            .reshape((b, c, h, w))?;
        Ok((x + out)?)
    }
}

#[derive(Clone, Debug)]
struct DownBlock {
    resnets: Vec<ResnetBlock>,
    attentions: Vec<CrossAttention>,
    downsample: Option<Conv2d>,
}

#[derive(Clone, Debug)]
struct UpBlock {
    resnets: Vec<ResnetBlock>,
    attentions: Vec<CrossAttention>,
    upsample: Option<Conv2d>,
}

#[derive(Clone, Debug)]
struct MidBlock {
    first: ResnetBlock,
    attention: CrossAttention,
    second: ResnetBlock,
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    time_fc1: Linear,
    time_fc2: Linear,
    conv_in: Conv2d,
    down: Vec<DownBlock>,
    mid: MidBlock,
    up: Vec<UpBlock>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    cfg: ModelConfig,
}

impl Denoiser {
    pub fn new(cfg: &ModelConfig, vb: VarBuilder) -> Result<Self> {
        cfg.validate()?;
        let ch = &cfg.unet_channels;
        let blocks = ch.len();
        let temb = cfg.time_embed_dim();
        let groups = cfg.norm_groups;
        let e = cfg.embed_dim;
        let layers = cfg.layers_per_block;
        let attn_from = blocks - cfg.cross_attn_blocks;

        let time_fc1 = candle_nn::linear(ch[0], temb, vb.pp("time_embedding.linear_1"))?;
        let time_fc2 = candle_nn::linear(temb, temb, vb.pp("time_embedding.linear_2"))?;
        let conv_in = conv3(1, ch[0], 1, vb.pp("conv_in"))?;

        let mut down = Vec::with_capacity(blocks);
        let mut out_ch = ch[0];
        for i in 0..blocks {
            let in_ch = out_ch;
            out_ch = ch[i];
            let vbb = vb.pp(format!("down.{i}"));
            let mut resnets = Vec::with_capacity(layers);
            let mut attentions = Vec::new();
            for j in 0..layers {
                let r_in = if j == 0 { in_ch } else { out_ch };
                resnets.push(ResnetBlock::new(r_in, out_ch, temb, groups, vbb.pp(format!("resnets.{j}")))?);
                if i >= attn_from {
                    attentions.push(CrossAttention::new(out_ch, e, cfg, vbb.pp(format!("attentions.{j}")))?);
                }
            }
            let downsample = if i + 1 < blocks {
                Some(conv3(out_ch, out_ch, 2, vbb.pp("downsample"))?)
            } else {
                None
            };
            down.push(DownBlock {
                resnets,
                attentions,
                downsample,
            });
        }

        let deepest = ch[blocks - 1];
        let vbm = vb.pp("mid");
        let mid = MidBlock {
            first: ResnetBlock::new(deepest, deepest, temb, groups, vbm.pp("resnets.0"))?,
            attention: CrossAttention::new(deepest, e, cfg, vbm.pp("attentions.0"))?,
            second: ResnetBlock::new(deepest, deepest, temb, groups, vbm.pp("resnets.1"))?,
        };

        let rev: Vec<usize> = ch.iter().rev().copied().collect();
        let mut up = Vec::with_capacity(blocks);
        let mut prev_out = rev[0];
        for i in 0..blocks {
            let out_ch = rev[i];
            let skip_in = rev[(i + 1).min(blocks - 1)];
            let vbb = vb.pp(format!("up.{i}"));
            let mut resnets = Vec::with_capacity(layers + 1);
            let mut attentions = Vec::new();
            for j in 0..=layers {
                let res_skip = if j == layers { skip_in } else { out_ch };
                let r_in = if j == 0 { prev_out } else { out_ch };
                resnets.push(ResnetBlock::new(
                    r_in + res_skip,
                    out_ch,
                    temb,
                    groups,
                    vbb.pp(format!("resnets.{j}")),
                )?);
                if i < cfg.cross_attn_blocks {
                    attentions.push(CrossAttention::new(out_ch, e, cfg, vbb.pp(format!("attentions.{j}")))?);
                }
            }
            let upsample = if i + 1 < blocks {
                Some(conv3(out_ch, out_ch, 1, vbb.pp("upsample"))?)
            } else {
                None
            };
            up.push(UpBlock {
                resnets,
                attentions,
                upsample,
            });
            prev_out = out_ch;
        }

        let norm_out = candle_nn::group_norm(groups, ch[0], NORM_EPS, vb.pp("norm_out"))?;
        let w = vb.get_with_hints((1, ch[0], 3, 3), "conv_out.weight", Init::Const(0.0))?;
        let b = vb.get_with_hints(1, "conv_out.bias", Init::Const(0.0))?;
        let conv_out = Conv2d::new(
            w,
            Some(b),
            Conv2dConfig {
                padding: 1,
                ..Default::default()
            },
        );
        Ok(Self {
            time_fc1,
            time_fc2,
            conv_in,
            down,
            mid,
            up,
            norm_out,
            conv_out,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// `xn`: `(B, D, D)` noisy frames; `steps`: noise step per batch element;
    /// `context`: `(B, c, e)` tokens. Returns `(B, D, D)`.
    pub fn predict_x0(&self, xn: &Tensor, steps: &[usize], context: &Tensor) -> Result<Tensor> {
        let (b, d1, d2) = xn.dims3()?;
        if d1 != self.cfg.dim || d2 != self.cfg.dim {
            return Err(Error::ShapeMismatch(format!(
                "noisy frame is {d1}×{d2}, model expects {0}×{0}",
                self.cfg.dim
            )));
        }
        if steps.len() != b {
            return Err(Error::ShapeMismatch(format!("{} steps for a batch of {b}", steps.len())));
        }
        let (cb, _, ce) = context.dims3()?;
        if cb != b || ce != self.cfg.embed_dim {
            return Err(Error::ShapeMismatch(format!(
                "context {:?} incompatible with batch {b} and embedding {}",
                context.dims(),
                self.cfg.embed_dim
            )));
        }
        if steps.contains(&0) {
            return Err(Error::StepOutOfRange { step: 0, max: usize::MAX });
        }

        let (_, c, _) = context.dims3()?;
        let pos = recency_encoding(c, ce, context.dtype(), context.device())?;
        let context = &context.broadcast_add(&pos)?;

        let t = step_embedding(steps, self.cfg.unet_channels[0], xn.dtype(), xn.device())?;
        let temb = self.time_fc2.forward(&self.time_fc1.forward(&t)?.silu()?)?;

        let mut x = self.conv_in.forward(&xn.unsqueeze(1)?)?;
        let mut skips = vec![x.clone()];
        for block in &self.down {
            for (j, resnet) in block.resnets.iter().enumerate() {
                x = resnet.forward(&x, &temb)?;
                if let Some(attn) = block.attentions.get(j) {
                    x = attn.forward(&x, context)?;
                }
                skips.push(x.clone());
            }
            if let Some(ds) = &block.downsample {
                x = ds.forward(&x)?;
                skips.push(x.clone());
            }
        }

        x = self.mid.first.forward(&x, &temb)?;
        x = self.mid.attention.forward(&x, context)?;
        x = self.mid.second.forward(&x, &temb)?;

        for block in &self.up {
            for (j, resnet) in block.resnets.iter().enumerate() {
                let skip = skips.pop().expect("skip stack underflow");
                x = resnet.forward(&Tensor::cat(&[&x, &skip], 1)?, &temb)?;
                if let Some(attn) = block.attentions.get(j) {
                    x = attn.forward(&x, context)?;
                }
            }
            if let Some(us) = &block.upsample {
                let (_, _, h, w) = x.dims4()?;
                x = us.forward(&x.upsample_nearest2d(2 * h, 2 * w)?)?;
            }
        }

        let x = self.conv_out.forward(&self.norm_out.forward(&x)?.silu()?)?;
        Ok(x.squeeze(1)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn build(cfg: &ModelConfig, seed: u64) -> (Denoiser, ParamStore) {
        let store = ParamStore::new(seed);
        let net = Denoiser::new(cfg, store.var_builder(DType::F64, &Device::Cpu)).unwrap();
        (net, store)
    }

    #[test]
    fn step_embedding_layout() {
        let e = step_embedding(&[0, 3], 8, DType::F64, &Device::Cpu).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(e[0], vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert!((e[1][0] - 3f64.cos()).abs() < 1e-15);
        assert!((e[1][4] - 3f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn output_shape_matches_input() {
        for d in [16, 64] {
            let cfg = ModelConfig::for_patch(d);
            let (net, store) = build(&cfg, 1);
            // Non-zero output layer so shapes flow through real values.
            let w = store.values("conv_out.weight").unwrap().len();
            store.assign("conv_out.weight", &vec![0.1; w]).unwrap();
            let x = randn(&[2, d, d], 2);
            let h = randn(&[2, 12, cfg.embed_dim], 3);
            let y = net.predict_x0(&x, &[1, 20], &h).unwrap();
            assert_eq!(y.dims(), &[2, d, d]);
        }
    }

    #[test]
    fn fresh_network_predicts_zero() {
        let cfg = ModelConfig::for_patch(16);
        let (net, _) = build(&cfg, 4);
        let y = net.predict_x0(&randn(&[1, 16, 16], 5), &[7], &randn(&[1, 12, 32], 6)).unwrap();
        assert_eq!(y.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn all_zero_weights_give_zero_frame() {
        let cfg = ModelConfig::for_patch(16);
        let (net, store) = build(&cfg, 4);
        store.zero_all().unwrap();
        let y = net.predict_x0(&randn(&[2, 16, 16], 8), &[3, 11], &randn(&[2, 12, 32], 9)).unwrap();
        assert_eq!(y.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn cross_attention_sits_in_deepest_blocks() {
        let cfg = ModelConfig::for_patch(16);
        let (net, _) = build(&cfg, 0);
        let down: Vec<bool> = net.down.iter().map(|b| !b.attentions.is_empty()).collect();
        let up: Vec<bool> = net.up.iter().map(|b| !b.attentions.is_empty()).collect();
        assert_eq!(down, vec![false, false, true, true]);
        assert_eq!(up, vec![true, true, false, false]);
        assert!(net.down[3].downsample.is_none());
        assert!(net.up[3].upsample.is_none());
    }

    #[test]
    fn context_changes_output_once_weights_are_live() {
        let cfg = ModelConfig::for_patch(16);
        let (net, store) = build(&cfg, 10);
        let w = store.values("conv_out.weight").unwrap().len();
        store.assign("conv_out.weight", &vec![0.05; w]).unwrap();
        let x = randn(&[1, 16, 16], 11);
        let h = randn(&[1, 12, 32], 12);
        let a = net.predict_x0(&x, &[5], &h).unwrap();
        let b = net.predict_x0(&x, &[5], &randn(&[1, 12, 32], 13)).unwrap();
        let again = net.predict_x0(&x, &[5], &h).unwrap();
        let diff = (a.clone() - b).unwrap().abs().unwrap().mean_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff > 0.0);
        assert_eq!(
            a.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            again.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
    }

    #[test]
    fn attention_sees_token_order() {
        let cfg = ModelConfig::for_patch(16);
        let (net, store) = build(&cfg, 10);
        let w = store.values("conv_out.weight").unwrap().len();
        store.assign("conv_out.weight", &vec![0.05; w]).unwrap();
        let x = randn(&[1, 16, 16], 11);
        let h = randn(&[1, 12, 32], 12);
        let order: Vec<u32> = (0..12).rev().collect();
        let idx = Tensor::new(order.as_slice(), &Device::Cpu).unwrap();
        let reversed = h.index_select(&idx, 1).unwrap();
        let a = net.predict_x0(&x, &[5], &h).unwrap();
        let b = net.predict_x0(&x, &[5], &reversed).unwrap();
        let diff = (a - b).unwrap().abs().unwrap().mean_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff > 1e-9);
    }

    #[test]
    fn rejects_bad_shapes() {
        let cfg = ModelConfig::for_patch(16);
        let (net, _) = build(&cfg, 0);
        let h = randn(&[1, 12, 32], 1);
        assert!(net.predict_x0(&randn(&[1, 8, 8], 0), &[1], &h).is_err());
        assert!(net.predict_x0(&randn(&[1, 16, 16], 0), &[1, 2], &h).is_err());
        assert!(net.predict_x0(&randn(&[1, 16, 16], 0), &[1], &randn(&[1, 12, 16], 1)).is_err());
        assert!(net.predict_x0(&randn(&[1, 16, 16], 0), &[0], &h).is_err());
    }
}
