//! Forward diffusion corruption and prompt-conditioned feature extraction.
//!
//! A [`Backbone`] records its noise-prediction pass up to the feature tap on
//! a [`Tape`], so the same code path serves plain extraction and gradient
//! computation with respect to the prompt. [`ToyUnet`] is a small
//! fixed-seed denoising UNet with cross-attention over prompt tokens.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::matching::{FeatureMap, Grid, ImageSize};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Betas linearly spaced.
    Linear,
    /// Square roots of betas linearly spaced.
    ScaledLinear,
}

/// Per-step retention `alphas` and their cumulative products.
///
/// Timesteps are zero-based: `alpha_bar(t)` is the product of
/// `alphas[0..=t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Default constants of the reference latent diffusion model.
pub const DEFAULT_TIMESTEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 0.00085;
pub const DEFAULT_BETA_END: f64 = 0.012;

impl NoiseSchedule {
    pub fn build(timesteps: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::Parameter("schedule needs at least one timestep".into()));
        }
        let valid = beta_start.is_finite()
            && beta_end.is_finite()
            && beta_start >= 0.0
            && beta_start <= beta_end
            && beta_end < 1.0
            && (timesteps == 1 || beta_end > 0.0);
        if !valid {
            return Err(Error::Parameter(format!(
                "beta range [{beta_start}, {beta_end}] is not within [0, 1) or is empty"
            )));
        }
        let frac = |i: usize| {
            if timesteps == 1 {
                0.0
            } else {
                i as f64 / (timesteps - 1) as f64
            }
        };
        let betas: Vec<f64> = (0..timesteps)
            .map(|i| match kind {
                ScheduleKind::Linear => beta_start + (beta_end - beta_start) * frac(i),
                ScheduleKind::ScaledLinear => {
                    let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
                    let s = a + (b - a) * frac(i);
                    s * s
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(timesteps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self { alphas, alpha_bars })
    }

    pub fn timesteps(&self) -> usize {
        self.alphas.len()
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or_else(|| Error::Parameter(format!("timestep {t} outside [0, {})", self.timesteps())))
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::build(
            DEFAULT_TIMESTEPS,
            DEFAULT_BETA_START,
            DEFAULT_BETA_END,
            ScheduleKind::ScaledLinear,
        )
        .expect("default schedule is valid")
    }
}

/// Preprocessed image `[C, H, W]` with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor<T> {
    data: Tensor<T>,
}

impl<T: Scalar> ImageTensor<T> {
    pub fn new(data: Tensor<T>) -> Result<Self> {
        if data.shape().len() != 3 || data.shape().contains(&0) {
            return Err(Error::Shape(format!("image must be [C,H,W], got {:?}", data.shape())));
        }
        if !data.is_finite() {
            return Err(Error::InvalidInput("image contains non-finite values".into()));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn size(&self) -> ImageSize {
        ImageSize::new(self.width() as f64, self.height() as f64)
    }

    /// Resizes an RGB image to `side x side` (aspect ratio not preserved)
    /// and maps pixel values to `[-1, 1]`.
    pub fn from_rgb(img: &image::RgbImage, side: usize) -> Result<Self> {
        if side == 0 {
            return Err(Error::Parameter("image size must be positive".into()));
        }
        let resized = image::imageops::resize(img, side as u32, side as u32, image::imageops::FilterType::Triangle);
        let mut data = vec![T::zero(); 3 * side * side];
        for (x, y, px) in resized.enumerate_pixels() {
            for c in 0..3 {
                let v = px.0[c] as f64 / 127.5 - 1.0;
                data[(c * side + y as usize) * side + x as usize] = T::lit(v);
            }
        }
        Self::new(Tensor::from_vec(&[3, side, side], data)?)
    }

    /// Decodes a PNG or JPEG file and preprocesses it to `side x side`.
    pub fn load(path: &Path, side: usize) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        Self::from_rgb(&img, side)
    }

    /// Back to 8-bit RGB.
    pub fn to_rgb(&self) -> image::RgbImage {
        let (h, w) = (self.height(), self.width());
        let c = self.channels();
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let mut px = [0u8; 3];
            for (k, p) in px.iter_mut().enumerate() {
                let v = self.data[(k.min(c - 1) * h + y as usize) * w + x as usize].as_f64();
                *p = ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
            }
            image::Rgb(px)
        })
    }
}

/// Standard-normal array drawn from a generator seeded with `seed`.
pub fn gaussian_noise<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            T::lit(v)
        })
        .collect();
    Tensor::from_vec(shape, data).expect("noise shape")
}

/// `sqrt(alpha_bar_t) * img + sqrt(1 - alpha_bar_t) * noise`.
pub fn corrupt<T: Scalar>(
    img: &ImageTensor<T>,
    t: usize,
    noise: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<ImageTensor<T>> {
    let ab = sched.alpha_bar(t)?;
    if noise.shape() != img.data.shape() {
        return Err(Error::Shape(format!(
            "noise {:?} vs image {:?}",
            noise.shape(),
            img.data.shape()
        )));
    }
    let (s, n) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
    let data = img
        .data
        .data()
        .iter()
        .zip(noise.data())
        .map(|(&x, &e)| s * x + n * e)
        .collect();
    Ok(ImageTensor {
        data: Tensor::from_vec(img.data.shape(), data)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Decoder tap point, e.g. `up_block.2`.
    pub feature_layer: String,
    pub prompt_dim: usize,
    pub max_prompt_length: usize,
    pub image_size: usize,
}

/// A frozen denoising network whose decoder activation serves as features.
pub trait Backbone<T: Scalar>: Send + Sync {
    fn config(&self) -> &BackboneConfig;

    /// Records the noise-prediction pass on `tape` up to the feature tap and
    /// returns the `[C, H, W]` activation. `prompt` is an `[N, D]` node.
    fn features_on_tape(&self, tape: &mut Tape<T>, noisy: &ImageTensor<T>, t: usize, prompt: Var) -> Result<Var>;

    /// Token embeddings of `text`, when the backbone carries a text encoder.
    fn token_embeddings(&self, _text: &str) -> Option<Tensor<T>> {
        None
    }

    fn check_prompt(&self, shape: &[usize]) -> Result<()> {
        let cfg = self.config();
        if shape.len() != 2 || shape[1] != cfg.prompt_dim {
            return Err(Error::Shape(format!(
                "prompt {shape:?} does not have width {}",
                cfg.prompt_dim
            )));
        }
        if shape[0] == 0 || shape[0] > cfg.max_prompt_length {
            return Err(Error::Shape(format!(
                "prompt length {} outside [1, {}]",
                shape[0], cfg.max_prompt_length
            )));
        }
        Ok(())
    }
}

/// Seed of the `k`-th noise draw derived from a base seed.
pub fn draw_seed(seed: u64, k: usize) -> u64 {
    // splitmix64 finaliser
    let mut z = seed.wrapping_add((k as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Corrupts `img` with seeded noise and records the backbone pass on `tape`.
/// With `noise_draws > 1` the activations of independent draws are averaged.
#[allow(clippy::too_many_arguments)]
pub fn features_on_tape<T: Scalar, B: Backbone<T> + ?Sized>(
    tape: &mut Tape<T>,
    backbone: &B,
    sched: &NoiseSchedule,
    img: &ImageTensor<T>,
    t: usize,
    prompt: Var,
    noise_seed: u64,
    noise_draws: usize,
) -> Result<Var> {
    backbone.check_prompt(tape.shape(prompt))?;
    sched.alpha_bar(t)?;
    let draws = noise_draws.max(1);
    let mut acc: Option<Var> = None;
    for k in 0..draws {
        let seed = if draws == 1 {
            noise_seed
        } else {
            draw_seed(noise_seed, k)
        };
        let noise = gaussian_noise(img.data.shape(), seed);
        let noisy = corrupt(img, t, &noise, sched)?;
        let f = backbone.features_on_tape(tape, &noisy, t, prompt)?;
        acc = Some(match acc {
            None => f,
            Some(a) => tape.add(a, f)?,
        });
    }
    let sum = acc.expect("at least one draw");
    Ok(if draws == 1 {
        sum
    } else {
        tape.scale(sum, T::one() / T::from_usize_exact(draws))
    })
}

/// Prompt-conditioned feature map of one image.
pub fn extract_features<T: Scalar, B: Backbone<T> + ?Sized>(
    img: &ImageTensor<T>,
    t: usize,
    prompt: &Tensor<T>,
    noise_seed: u64,
    backbone: &B,
    sched: &NoiseSchedule,
) -> Result<FeatureMap<T>> {
    extract_features_averaged(img, t, prompt, noise_seed, 1, backbone, sched)
}

pub fn extract_features_averaged<T: Scalar, B: Backbone<T> + ?Sized>(
    img: &ImageTensor<T>,
    t: usize,
    prompt: &Tensor<T>,
    noise_seed: u64,
    noise_draws: usize,
    backbone: &B,
    sched: &NoiseSchedule,
) -> Result<FeatureMap<T>> {
    let mut tape = Tape::new();
    let p = tape.constant(prompt.clone());
    let f = features_on_tape(&mut tape, backbone, sched, img, t, p, noise_seed, noise_draws)?;
    FeatureMap::new(tape.value(f).clone(), img.size())
}

/// Features of both images of a pair under one shared prompt, with
/// independent noise draws.
pub fn extract_pair<T: Scalar, B: Backbone<T> + ?Sized>(
    img_a: &ImageTensor<T>,
    img_b: &ImageTensor<T>,
    t: usize,
    prompt: &Tensor<T>,
    seeds: (u64, u64),
    backbone: &B,
    sched: &NoiseSchedule,
) -> Result<(FeatureMap<T>, FeatureMap<T>)> {
    let fa = extract_features(img_a, t, prompt, seeds.0, backbone, sched)?;
    let fb = extract_features(img_b, t, prompt, seeds.1, backbone, sched)?;
    Ok((fa, fb))
}

struct ConvLayer<T> {
    weight: Tensor<T>,
    bias: Tensor<T>,
    /// Projects the timestep embedding onto a per-channel bias.
    time_proj: Tensor<T>,
    stride: usize,
}

impl<T: Scalar> ConvLayer<T> {
    fn new(rng: &mut ChaCha8Rng, cin: usize, cout: usize, stride: usize, time_dim: usize) -> Self {
        let fan_in = (cin * 9) as f64;
        Self {
            weight: Tensor::randn(&[cout, cin, 3, 3], 1.6 / fan_in.sqrt(), rng),
            bias: Tensor::randn(&[cout], 0.1, rng),
            time_proj: Tensor::randn(&[cout, time_dim], 0.1 / (time_dim as f64).sqrt(), rng),
            stride,
        }
    }

    /// With `pre_act` the input is normalised and passed through SiLU first.
    fn forward(&self, tape: &mut Tape<T>, x: Var, temb: &[f64], pre_act: bool) -> Result<Var> {
        let cout = self.bias.len();
        let td = temb.len();
        let mut bias = self.bias.clone();
        for o in 0..cout {
            let mut s = 0.0;
            for k in 0..td {
                s += self.time_proj[o * td + k].as_f64() * temb[k];
            }
            bias[o] = bias[o] + T::lit(s);
        }
        let x = if pre_act {
            let n = tape.channel_norm(x);
            tape.silu(n)
        } else {
            x
        };
        let w = tape.constant(self.weight.clone());
        let b = tape.constant(bias);
        tape.conv2d(x, w, b, self.stride, 1)
    }
}

/// Single-head cross-attention from normalised spatial queries to prompt
/// tokens, added residually.
struct CrossAttention<T> {
    to_q: Tensor<T>,
    to_k: Tensor<T>,
    to_v: Tensor<T>,
    v_bias: Tensor<T>,
    to_out: Tensor<T>,
    head_dim: usize,
}

impl<T: Scalar> CrossAttention<T> {
    fn new(rng: &mut ChaCha8Rng, channels: usize, prompt_dim: usize, head_dim: usize, cfg: &ToyUnetConfig) -> Self {
        Self {
            to_q: Tensor::randn(&[channels, head_dim], 1.0 / (channels as f64).sqrt(), rng),
            to_k: Tensor::randn(&[prompt_dim, head_dim], 1.0 / (prompt_dim as f64).sqrt(), rng),
            to_v: Tensor::randn(&[prompt_dim, channels], 1.0 / (prompt_dim as f64).sqrt(), rng),
            v_bias: Tensor::randn(&[channels], cfg.value_bias_std, rng),
            to_out: Tensor::randn(
                &[channels, channels],
                cfg.attention_gain / (channels as f64).sqrt(),
                rng,
            ),
            head_dim,
        }
    }

    fn forward(&self, tape: &mut Tape<T>, h: Var, prompt: Var) -> Result<Var> {
        let shape = tape.shape(h).to_vec();
        let (c, hw) = (shape[0], shape[1] * shape[2]);
        let normed = tape.channel_norm(h);
        let flat = tape.reshape(normed, &[c, hw])?;
        let tokens = tape.transpose(flat);
        let wq = tape.constant(self.to_q.clone());
        let wk = tape.constant(self.to_k.clone());
        let wv = tape.constant(self.to_v.clone());
        let bv = tape.constant(self.v_bias.clone());
        let wo = tape.constant(self.to_out.clone());
        let q = tape.matmul(tokens, wq)?;
        let k = tape.matmul(prompt, wk)?;
        let kt = tape.transpose(k);
        let scores = tape.matmul(q, kt)?;
        let attn = tape.softmax_rows(scores, T::lit(1.0 / (self.head_dim as f64).sqrt()));
        let v = tape.matmul(prompt, wv)?;
        let v = tape.add_row_vec(v, bv)?;
        let mixed = tape.matmul(attn, v)?;
        let out = tape.matmul(mixed, wo)?;
        let out = tape.transpose(out);
        let out = tape.reshape(out, &shape)?;
        tape.add(h, out)
    }
}

/// Architecture constants of the toy UNet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyUnetConfig {
    pub seed: u64,
    pub in_channels: usize,
    /// Channel widths at full and half resolution.
    pub channels: (usize, usize),
    pub prompt_dim: usize,
    pub head_dim: usize,
    pub time_dim: usize,
    pub max_prompt_length: usize,
    /// Scale of the attention output projection.
    pub attention_gain: f64,
    /// Standard deviation of the value-projection bias.
    pub value_bias_std: f64,
}

impl Default for ToyUnetConfig {
    fn default() -> Self {
        Self {
            seed: 0x5eed,
            in_channels: 3,
            channels: (8, 16),
            prompt_dim: 16,
            head_dim: 16,
            time_dim: 16,
            max_prompt_length: 77,
            attention_gain: 12.0,
            value_bias_std: 0.0,
        }
    }
}

/// Miniature denoising UNet with fixed random weights.
///
/// ```text
/// conv_in   C0   @ S        (skip s0)
/// down 1    C1   @ S/2      (skip s1)
/// down 2    C1   @ S/4
/// mid       C1   @ S/4      conv + cross-attn
/// up 1      C1   @ S/4      conv + cross-attn, upsample -> S/2
/// up 2      C1   @ S/2      concat s1, conv + cross-attn   <- feature tap
/// up 3      C0   @ S        upsample, concat s0, conv + cross-attn
/// conv_out  in   @ S        noise prediction
/// ```
///
/// Every block after `conv_in` runs norm -> SiLU -> conv, and attention
/// queries are taken from the normalised activation.
pub struct ToyUnet<T> {
    cfg: ToyUnetConfig,
    backbone_cfg: BackboneConfig,
    conv_in: ConvLayer<T>,
    down1: ConvLayer<T>,
    down2: ConvLayer<T>,
    mid: ConvLayer<T>,
    mid_attn: CrossAttention<T>,
    up1: ConvLayer<T>,
    up1_attn: CrossAttention<T>,
    up2: ConvLayer<T>,
    up2_attn: CrossAttention<T>,
    up3: ConvLayer<T>,
    up3_attn: CrossAttention<T>,
    conv_out: ConvLayer<T>,
}

/// Where to stop the toy forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ToyTap {
    UpBlock(usize),
    NoisePrediction,
}

impl ToyTap {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "noise_pred" => Ok(Self::NoisePrediction),
            _ => s
                .strip_prefix("up_block.")
                .and_then(|n| n.parse().ok())
                .filter(|n| (1..=3).contains(n))
                .map(Self::UpBlock)
                .ok_or_else(|| Error::Parameter(format!("unknown feature layer `{s}`"))),
        }
    }
}

impl<T: Scalar> ToyUnet<T> {
    pub fn new(cfg: ToyUnetConfig, image_size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (c0, c1) = cfg.channels;
        let (td, d, hd) = (cfg.time_dim, cfg.prompt_dim, cfg.head_dim);
        let conv_in = ConvLayer::new(&mut rng, cfg.in_channels, c0, 1, td);
        let down1 = ConvLayer::new(&mut rng, c0, c1, 2, td);
        let down2 = ConvLayer::new(&mut rng, c1, c1, 2, td);
        let mid = ConvLayer::new(&mut rng, c1, c1, 1, td);
        let mid_attn = CrossAttention::new(&mut rng, c1, d, hd, &cfg);
        let up1 = ConvLayer::new(&mut rng, c1, c1, 1, td);
        let up1_attn = CrossAttention::new(&mut rng, c1, d, hd, &cfg);
        let up2 = ConvLayer::new(&mut rng, 2 * c1, c1, 1, td);
        let up2_attn = CrossAttention::new(&mut rng, c1, d, hd, &cfg);
        let up3 = ConvLayer::new(&mut rng, c1 + c0, c0, 1, td);
        let up3_attn = CrossAttention::new(&mut rng, c0, d, hd, &cfg);
        let conv_out = ConvLayer::new(&mut rng, c0, cfg.in_channels, 1, td);
        let backbone_cfg = BackboneConfig {
            feature_layer: "up_block.2".into(),
            prompt_dim: d,
            max_prompt_length: cfg.max_prompt_length,
            image_size,
        };
        Self {
            cfg,
            backbone_cfg,
            conv_in,
            down1,
            down2,
            mid,
            mid_attn,
            up1,
            up1_attn,
            up2,
            up2_attn,
            up3,
            up3_attn,
            conv_out,
        }
    }

    pub fn toy_config(&self) -> &ToyUnetConfig {
        &self.cfg
    }

    /// Feature grid produced at the default tap for a square input.
    pub fn feature_grid(image_size: usize) -> Grid {
        Grid::new(image_size / 2, image_size / 2)
    }

    fn time_embedding(&self, t: usize) -> Vec<f64> {
        let half = self.cfg.time_dim / 2;
        let mut out = Vec::with_capacity(2 * half);
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            out.push((t as f64 * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            out.push((t as f64 * freq).cos());
        }
        out
    }

    /// Runs the network up to `tap`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        noisy: &ImageTensor<T>,
        t: usize,
        prompt: Var,
        tap: ToyTap,
    ) -> Result<Var> {
        if noisy.channels() != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "toy UNet expects {} channels, got {}",
                self.cfg.in_channels,
                noisy.channels()
            )));
        }
        if noisy.height() != noisy.width() || !noisy.height().is_multiple_of(4) {
            return Err(Error::Shape(format!(
                "toy UNet needs a square input with side divisible by 4, got {}x{}",
                noisy.width(),
                noisy.height()
            )));
        }
        let temb = self.time_embedding(t);
        let x = tape.constant(noisy.data().clone());
        let s0 = self.conv_in.forward(tape, x, &temb, false)?;
        let s1 = self.down1.forward(tape, s0, &temb, true)?;
        let h = self.down2.forward(tape, s1, &temb, true)?;
        let h = self.mid.forward(tape, h, &temb, true)?;
        let h = self.mid_attn.forward(tape, h, prompt)?;

        let h = self.up1.forward(tape, h, &temb, true)?;
        let h = self.up1_attn.forward(tape, h, prompt)?;
        if tap == ToyTap::UpBlock(1) {
            return Ok(h);
        }
        let h = tape.upsample2x(h);

        let h = tape.concat0(&[h, s1])?;
        let h = self.up2.forward(tape, h, &temb, true)?;
        let h = self.up2_attn.forward(tape, h, prompt)?;
        if tap == ToyTap::UpBlock(2) {
            return Ok(h);
        }
        let h = tape.upsample2x(h);

        let h = tape.concat0(&[h, s0])?;
        let h = self.up3.forward(tape, h, &temb, true)?;
        let h = self.up3_attn.forward(tape, h, prompt)?;
        if tap == ToyTap::UpBlock(3) {
            return Ok(h);
        }
        self.conv_out.forward(tape, h, &temb, true)
    }

    /// Bitwise fingerprint of every weight, for freeze checks.
    pub fn weight_fingerprint(&self) -> Vec<u64> {
        let convs = [
            &self.conv_in,
            &self.down1,
            &self.down2,
            &self.mid,
            &self.up1,
            &self.up2,
            &self.up3,
            &self.conv_out,
        ];
        let attns = [&self.mid_attn, &self.up1_attn, &self.up2_attn, &self.up3_attn];
        let mut out = Vec::new();
        let mut push = |t: &Tensor<T>| out.extend(t.data().iter().map(|v| v.as_f64().to_bits()));
        for c in convs {
            push(&c.weight);
            push(&c.bias);
            push(&c.time_proj);
        }
        for a in attns {
            push(&a.to_q);
            push(&a.to_k);
            push(&a.to_v);
            push(&a.v_bias);
            push(&a.to_out);
        }
        out
    }
}

impl<T: Scalar> Backbone<T> for ToyUnet<T> {
    fn config(&self) -> &BackboneConfig {
        &self.backbone_cfg
    }

    fn features_on_tape(&self, tape: &mut Tape<T>, noisy: &ImageTensor<T>, t: usize, prompt: Var) -> Result<Var> {
        let tap = ToyTap::parse(&self.backbone_cfg.feature_layer)?;
        self.forward(tape, noisy, t, prompt, tap)
    }
}

/// Backbone whose features are a fixed per-cell table, independent of the
/// image, noise and prompt. With random table entries every cell has a
/// distinct feature, which makes matching outcomes predictable in tests.
pub struct TableBackbone<T> {
    table: Tensor<T>,
    cfg: BackboneConfig,
}

impl<T: Scalar> TableBackbone<T> {
    pub fn random(channels: usize, grid: Grid, prompt_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            table: Tensor::randn(&[channels, grid.height, grid.width], 1.0, &mut rng),
            cfg: BackboneConfig {
                feature_layer: "table".into(),
                prompt_dim,
                max_prompt_length: 77,
                image_size: 0,
            },
        }
    }
}

impl<T: Scalar> Backbone<T> for TableBackbone<T> {
    fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    fn features_on_tape(&self, tape: &mut Tape<T>, _: &ImageTensor<T>, _: usize, _: Var) -> Result<Var> {
        Ok(tape.constant(self.table.clone()))
    }
}

/// Location of pretrained weights for a latent text-to-image model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RealBackboneSpec {
    /// Filesystem path or model identifier.
    pub weights: String,
}

/// Pretrained latent-diffusion backbones are not bundled with this build;
/// this always returns [`Error::Unsupported`] describing the missing adapter.
pub fn load_real_backbone<T: Scalar>(spec: &RealBackboneSpec) -> Result<Box<dyn Backbone<T>>> {
    Err(Error::Unsupported(format!(
        "pretrained backbone adapter is not available in this build (weights: `{}`); \
         use the toy backbone",
        spec.weights
    )))
}
