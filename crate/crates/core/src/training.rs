//! Prompt tuning with Adam, checkpoints, inference-time matching and a
//! finite-difference gradient check.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autodiff::Tape;
use crate::datasets::{rescale_pair, DatasetSplit, MatchPair};
use crate::diffusion::{
    draw_seed, extract_pair, features_on_tape, Backbone, BackboneConfig, ImageTensor, NoiseSchedule,
};
use crate::error::{Error, Result};
use crate::evaluation::{base_threshold, count_correct, ThresholdKind};
use crate::matching::{
    correlation_map, kernel_softmax_localize, l2_normalize, pair_loss_on_tape, sample_feature, target_rows, Grid,
    Keypoint, PairLossInputs,
};
use crate::prompting::{
    init_prompt, ClassPromptBank, CpmFlags, CpmModule, LrGroup, PairContext, PatchExtractorConfig, PromptInit,
    PromptProvider,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Single,
    Class,
    Cpm,
}

impl ProviderKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Self::Single),
            "class" => Ok(Self::Class),
            "cpm" => Ok(Self::Cpm),
            _ => Err(Error::Parameter(format!("unknown provider `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Pairs per optimisation step.
    pub batch_pairs: usize,
    pub lr_prompt: f64,
    pub lr_projection: f64,
    pub t_train: usize,
    pub t_infer: usize,
    /// Softmax temperature of the matching loss and of localisation.
    pub beta: f64,
    pub kernel_size: usize,
    pub sigma: f64,
    /// Side of the square images fed to the backbone.
    pub image_size: usize,
    pub seed: u64,
    pub provider: ProviderKind,
    pub checkpoint_every: usize,
    /// Prompt length of the single and class providers.
    pub prompt_length: usize,
    pub n_global: usize,
    pub n_cond: usize,
    /// Neighbourhood of the kernel soft-argmax, in cells.
    pub window: usize,
    /// Also score B -> A and average both directions.
    pub symmetric_loss: bool,
    /// Noise draws averaged per feature extraction.
    pub noise_draws: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Steps between validation passes (0 disables them).
    pub validate_every: usize,
    pub cpm_flags: CpmFlags,
    pub patch_extractor: PatchExtractorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 30_000,
            batch_pairs: 9,
            lr_prompt: 1e-2,
            lr_projection: 1e-3,
            t_train: 261,
            t_infer: 50,
            beta: 0.04,
            kernel_size: 7,
            sigma: 1.0,
            image_size: 768,
            seed: 0,
            provider: ProviderKind::Cpm,
            checkpoint_every: 1000,
            prompt_length: 75,
            n_global: 25,
            n_cond: 50,
            window: 7,
            symmetric_loss: false,
            noise_draws: 1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            validate_every: 0,
            cpm_flags: CpmFlags::default(),
            patch_extractor: PatchExtractorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.batch_pairs == 0 {
            return bad("batch_pairs must be positive".into());
        }
        for (name, t) in [("t_train", self.t_train), ("t_infer", self.t_infer)] {
            if t >= sched.timesteps() {
                return bad(format!("{name} = {t} outside [0, {})", sched.timesteps()));
            }
        }
        if !(self.beta > 0.0) || !(self.sigma > 0.0) {
            return bad(format!("beta {} and sigma {} must be positive", self.beta, self.sigma));
        }
        if self.kernel_size.is_multiple_of(2) || self.window.is_multiple_of(2) {
            return bad(format!(
                "kernel_size {} and window {} must be odd",
                self.kernel_size, self.window
            ));
        }
        if !(self.lr_prompt >= 0.0) || !(self.lr_projection >= 0.0) {
            return bad("learning rates must be non-negative".into());
        }
        if self.noise_draws == 0 {
            return bad("noise_draws must be positive".into());
        }
        Ok(())
    }
}

/// Builds a freshly initialised provider. The class provider gets one
/// prompt per entry of `categories`.
pub fn init_provider<T: Scalar>(cfg: &TrainConfig, dim: usize, categories: &[String]) -> Result<PromptProvider<T>> {
    match cfg.provider {
        ProviderKind::Single => Ok(PromptProvider::Single(init_prompt(
            cfg.prompt_length,
            dim,
            &PromptInit::Random,
            cfg.seed,
            None,
        )?)),
        ProviderKind::Class => {
            if categories.is_empty() {
                return Err(Error::Parameter("class prompts need at least one category".into()));
            }
            Ok(PromptProvider::Class(ClassPromptBank::random(
                categories,
                cfg.prompt_length,
                dim,
                cfg.seed,
            )?))
        }
        ProviderKind::Cpm => Ok(PromptProvider::Cpm(CpmModule::init(
            cfg.patch_extractor.clone(),
            dim,
            cfg.n_global,
            cfg.n_cond,
            cfg.cpm_flags,
            cfg.seed,
        )?)),
    }
}

/// A pair rescaled to the working resolution, with its images loaded.
#[derive(Clone, Debug)]
pub struct TrainingPair<T> {
    /// Annotations in the rescaled frame.
    pub pair: MatchPair,
    pub image_a: ImageTensor<T>,
    pub image_b: ImageTensor<T>,
}

impl<T: Scalar> TrainingPair<T> {
    pub fn from_rgb(pair: &MatchPair, a: &image::RgbImage, b: &image::RgbImage, side: usize) -> Result<Self> {
        Ok(Self {
            pair: rescale_pair(pair, (side as f64, side as f64)),
            image_a: ImageTensor::from_rgb(a, side)?,
            image_b: ImageTensor::from_rgb(b, side)?,
        })
    }

    pub fn load(split: &DatasetSplit, pair: &MatchPair, side: usize) -> Result<Self> {
        Ok(Self {
            pair: rescale_pair(pair, (side as f64, side as f64)),
            image_a: ImageTensor::load(&split.resolve(&pair.image_a), side)?,
            image_b: ImageTensor::load(&split.resolve(&pair.image_b), side)?,
        })
    }

    pub fn context(&self) -> PairContext<'_, T> {
        PairContext {
            category: &self.pair.category,
            image_a: &self.image_a,
            image_b: &self.image_b,
        }
    }
}

/// Loads every pair of `split` at `side x side`, in split order.
pub fn load_pairs<T: Scalar>(split: &DatasetSplit, side: usize) -> Result<Vec<TrainingPair<T>>> {
    split
        .pairs
        .par_iter()
        .map(|p| TrainingPair::load(split, p, side))
        .collect()
}

/// Adam with bias correction; one moment pair per parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(shapes: &[Vec<usize>], beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: &[Tensor<T>], lrs: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() || lrs.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer holds {} tensors, got {} parameters / {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::lit(1.0 - self.beta2.powi(self.t as i32));
        let eps = T::lit(self.eps);
        for (k, p) in params.into_iter().enumerate() {
            let lr = T::lit(lrs[k]);
            let (m, v, g) = (self.m[k].data_mut(), self.v[k].data_mut(), grads[k].data());
            for (((p, m), v), &g) in p.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p = *p - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Pair indices for `step`: consecutive slices of per-epoch shuffles.
pub fn batch_indices(seed: u64, step: usize, batch: usize, n: usize) -> Vec<usize> {
    let mut cached: Option<(usize, Vec<usize>)> = None;
    (0..batch)
        .map(|k| {
            let g = step * batch + k;
            let (epoch, pos) = (g / n, g % n);
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut ChaCha8Rng::seed_from_u64(draw_seed(seed ^ 0xe90c, epoch)));
                cached = Some((epoch, perm));
            }
            cached.as_ref().expect("permutation").1[pos]
        })
        .collect()
}

/// Noise seed for image `side` (0 = A, 1 = B) of batch slot `slot`.
fn noise_seed(seed: u64, step: usize, slot: usize, side: usize) -> u64 {
    draw_seed(draw_seed(seed, step), 2 * slot + side)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Records the loss of one pair on `tape`; returns the loss node and the
/// provider leaves.
#[allow(clippy::too_many_arguments)]
fn pair_loss<T: Scalar, B: Backbone<T> + ?Sized>(
    tape: &mut Tape<T>,
    backbone: &B,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    provider: &PromptProvider<T>,
    tp: &TrainingPair<T>,
    seeds: (u64, u64),
) -> Result<(crate::autodiff::Var, Vec<(usize, crate::autodiff::Var)>)> {
    let p = provider.prompt_on_tape(tape, &tp.context(), true)?;
    let fa = features_on_tape(
        tape,
        backbone,
        sched,
        &tp.image_a,
        cfg.t_train,
        p.prompt,
        seeds.0,
        cfg.noise_draws,
    )?;
    let fb = features_on_tape(
        tape,
        backbone,
        sched,
        &tp.image_b,
        cfg.t_train,
        p.prompt,
        seeds.1,
        cfg.noise_draws,
    )?;
    let grid_of = |tape: &Tape<T>, v| {
        let s = tape.shape(v);
        Grid::new(s[1], s[2])
    };
    let pair = &tp.pair;
    let targets_b = target_rows(
        &pair.keypoints_b,
        grid_of(tape, fb),
        pair.size_b,
        cfg.kernel_size,
        cfg.sigma,
    )?;
    let ab = pair_loss_on_tape(
        tape,
        fa,
        fb,
        &PairLossInputs {
            kps_a: &pair.keypoints_a,
            size_a: pair.size_a,
            targets: &targets_b,
            beta: cfg.beta,
        },
    )?;
    let loss = if cfg.symmetric_loss {
        let targets_a = target_rows(
            &pair.keypoints_a,
            grid_of(tape, fa),
            pair.size_a,
            cfg.kernel_size,
            cfg.sigma,
        )?;
        let ba = pair_loss_on_tape(
            tape,
            fb,
            fa,
            &PairLossInputs {
                kps_a: &pair.keypoints_b,
                size_a: pair.size_b,
                targets: &targets_a,
                beta: cfg.beta,
            },
        )?;
        let sum = tape.add(ab, ba)?;
        tape.scale(sum, T::lit(0.5))
    } else {
        ab
    };
    Ok((loss, p.leaves))
}

/// Mean loss over `indices` and its gradient for every provider tensor.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss_and_grad<T: Scalar, B: Backbone<T> + ?Sized>(
    backbone: &B,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    provider: &PromptProvider<T>,
    data: &[TrainingPair<T>],
    indices: &[usize],
    step: usize,
) -> Result<(f64, Vec<Tensor<T>>)> {
    if indices.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let per_pair: Vec<Result<(f64, Vec<(usize, Tensor<T>)>)>> = indices
        .par_iter()
        .enumerate()
        .map(|(slot, &i)| {
            let tp = &data[i];
            let mut tape = Tape::new();
            let seeds = (noise_seed(cfg.seed, step, slot, 0), noise_seed(cfg.seed, step, slot, 1));
            let (loss, leaves) = pair_loss(&mut tape, backbone, sched, cfg, provider, tp, seeds)?;
            let value = tape.value(loss).data()[0].as_f64();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    pair: tp.pair.id.clone(),
                });
            }
            let grads = tape.backward(loss);
            Ok((value, leaves.into_iter().map(|(k, v)| (k, grads.get(v))).collect()))
        })
        .collect();
    let mut total = 0.0;
    let mut grads: Vec<Tensor<T>> = provider.parameters().iter().map(|p| Tensor::zeros(p.shape())).collect();
    for r in per_pair {
        let (loss, gs) = r?;
        total += loss;
        for (k, g) in gs {
            for (a, b) in grads[k].data_mut().iter_mut().zip(g.data()) {
                *a = *a + *b;
            }
        }
    }
    let n = indices.len();
    let inv = T::one() / T::from_usize_exact(n);
    for g in &mut grads {
        for v in g.data_mut() {
            *v = *v * inv;
        }
    }
    Ok((total / n as f64, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    /// Seconds since training (or the resumed run) started.
    pub wall_time: f64,
}

/// Exponential moving average of a loss history, seeded with its first
/// value so that `smoothed(h, d)[0] == h[0]`.
pub fn smoothed(history: &[f64], decay: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(history.len());
    let mut acc = match history.first() {
        Some(&v) => v,
        None => return out,
    };
    for &v in history {
        acc = decay * acc + (1.0 - decay) * v;
        out.push(acc);
    }
    out
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Checkpoint<T> {
    pub format_version: u32,
    pub config: TrainConfig,
    pub backbone: BackboneConfig,
    pub provider: PromptProvider<T>,
    pub optimizer: Adam<T>,
    pub step: usize,
    pub history: Vec<LossRecord>,
}

impl<T: Scalar> Checkpoint<T> {
    /// Writes to a temporary file next to `path`, then renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = match path.parent() {
            Some(d) if !d.as_os_str().is_empty() => d,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        serde_json::to_writer(std::io::BufWriter::new(tmp.as_file_mut()), self).map_err(|e| Error::Parse {
            context: path.display().to_string(),
            reason: e.to_string(),
        })?;
        tmp.as_file_mut().flush()?;
        tmp.persist(path).map_err(|e| Error::Io(e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let parse = |e: serde_json::Error| Error::Parse {
            context: path.display().to_string(),
            reason: e.to_string(),
        };
        let value: Value = serde_json::from_str(&text).map_err(parse)?;
        let version = value.get("format_version").cloned().unwrap_or(Value::Null);
        if version.as_u64() != Some(CHECKPOINT_VERSION as u64) {
            return Err(Error::Version {
                expected: CHECKPOINT_VERSION,
                found: version.to_string(),
            });
        }
        serde_json::from_value(value).map_err(parse)
    }
}

/// Optimisation state of one tuning run.
pub struct Trainer<'b, T: Scalar, B: Backbone<T> + ?Sized> {
    pub cfg: TrainConfig,
    backbone: &'b B,
    sched: NoiseSchedule,
    pub provider: PromptProvider<T>,
    pub optimizer: Adam<T>,
    pub step: usize,
    pub history: Vec<LossRecord>,
    /// Best validation PCK@0.1, its step and provider.
    pub best: Option<(f64, usize, PromptProvider<T>)>,
    started: Instant,
}

impl<'b, T: Scalar, B: Backbone<T> + ?Sized> Trainer<'b, T, B> {
    pub fn new(cfg: TrainConfig, backbone: &'b B, provider: PromptProvider<T>) -> Result<Self> {
        let sched = NoiseSchedule::default();
        cfg.validate(&sched)?;
        if backbone.config().image_size != cfg.image_size {
            return Err(Error::Parameter(format!(
                "backbone expects {}px images, config says {}",
                backbone.config().image_size,
                cfg.image_size
            )));
        }
        if provider.dim() != backbone.config().prompt_dim {
            return Err(Error::Shape(format!(
                "provider width {} does not match backbone prompt width {}",
                provider.dim(),
                backbone.config().prompt_dim
            )));
        }
        let shapes: Vec<Vec<usize>> = provider.parameters().iter().map(|p| p.shape().to_vec()).collect();
        let optimizer = Adam::new(&shapes, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
        Ok(Self {
            cfg,
            backbone,
            sched,
            provider,
            optimizer,
            step: 0,
            history: Vec::new(),
            best: None,
            started: Instant::now(),
        })
    }

    pub fn resume(ckpt: Checkpoint<T>, backbone: &'b B) -> Result<Self> {
        let mut t = Self::new(ckpt.config, backbone, ckpt.provider)?;
        if ckpt.optimizer.m.len() != t.optimizer.m.len() {
            return Err(Error::Shape("optimizer state does not match the provider".into()));
        }
        t.optimizer = ckpt.optimizer;
        t.step = ckpt.step;
        t.history = ckpt.history;
        Ok(t)
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config: self.cfg.clone(),
            backbone: self.backbone.config().clone(),
            provider: self.provider.clone(),
            optimizer: self.optimizer.clone(),
            step: self.step,
            history: self.history.clone(),
        }
    }

    /// One Adam update on the next batch; returns the batch loss.
    pub fn step_once(&mut self, data: &[TrainingPair<T>]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::InvalidInput("no training pairs".into()));
        }
        let idx = batch_indices(self.cfg.seed, self.step, self.cfg.batch_pairs, data.len());
        let (loss, grads) = batch_loss_and_grad(
            self.backbone,
            &self.sched,
            &self.cfg,
            &self.provider,
            data,
            &idx,
            self.step,
        )?;
        let lrs: Vec<f64> = self
            .provider
            .trainable_parameters()
            .iter()
            .map(|p| match p.lr_group {
                LrGroup::Prompt => self.cfg.lr_prompt,
                LrGroup::Projection => self.cfg.lr_projection,
            })
            .collect();
        self.optimizer.step(self.provider.parameters_mut(), &grads, &lrs)?;
        self.history.push(LossRecord {
            step: self.step,
            loss,
            wall_time: self.started.elapsed().as_secs_f64(),
        });
        self.step += 1;
        Ok(loss)
    }

    /// Runs until `cfg.steps`. `on_checkpoint` is called every
    /// `checkpoint_every` steps and at the end; validation (when `val` is
    /// given and `validate_every > 0`) keeps the best provider in `best`.
    pub fn run(
        &mut self,
        data: &[TrainingPair<T>],
        val: Option<&[TrainingPair<T>]>,
        mut on_checkpoint: impl FnMut(&Self) -> Result<()>,
    ) -> Result<()> {
        while self.step < self.cfg.steps {
            let loss = self.step_once(data)?;
            if self.step.is_multiple_of(100) || self.step == 1 {
                info!("step {} loss {loss:.4}", self.step);
            }
            if let (Some(val), true) = (val, self.cfg.validate_every > 0) {
                if self.step.is_multiple_of(self.cfg.validate_every) {
                    let pck = validation_pck(&self.provider, self.backbone, &self.sched, &self.cfg, val)?;
                    info!("step {} validation PCK@0.1 {:.4}", self.step, pck);
                    if self.best.as_ref().is_none_or(|b| pck > b.0) {
                        self.best = Some((pck, self.step, self.provider.clone()));
                    }
                }
            }
            if self.cfg.checkpoint_every > 0 && self.step.is_multiple_of(self.cfg.checkpoint_every) {
                on_checkpoint(self)?;
            }
        }
        on_checkpoint(self)
    }
}

/// Predicts the location in image B of every keypoint of image A.
///
/// Features are taken at `t_infer`; each query is localised with a kernel
/// soft-argmax. Coordinates are in the pair's (rescaled) frame.
pub fn match_pair<T: Scalar, B: Backbone<T> + ?Sized>(
    provider: &PromptProvider<T>,
    backbone: &B,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    tp: &TrainingPair<T>,
) -> Result<Vec<Keypoint>> {
    let prompt = provider.prompt_for_pair(&tp.context())?;
    let base = draw_seed(cfg.seed, 0) ^ fnv1a(&tp.pair.id);
    let seeds = (draw_seed(base, 0), draw_seed(base, 1));
    let (fa, fb) = if cfg.noise_draws > 1 {
        (
            crate::diffusion::extract_features_averaged(
                &tp.image_a,
                cfg.t_infer,
                prompt.data(),
                seeds.0,
                cfg.noise_draws,
                backbone,
                sched,
            )?,
            crate::diffusion::extract_features_averaged(
                &tp.image_b,
                cfg.t_infer,
                prompt.data(),
                seeds.1,
                cfg.noise_draws,
                backbone,
                sched,
            )?,
        )
    } else {
        extract_pair(
            &tp.image_a,
            &tp.image_b,
            cfg.t_infer,
            prompt.data(),
            seeds,
            backbone,
            sched,
        )?
    };
    let (na, nb) = (l2_normalize(&fa)?, l2_normalize(&fb)?);
    tp.pair
        .keypoints_a
        .iter()
        .map(|kp| {
            let q = sample_feature(&na, *kp)?;
            let corr = correlation_map(&q, &nb)?;
            kernel_softmax_localize(&corr, cfg.beta, cfg.window, tp.pair.size_b)
        })
        .collect()
}

/// Pair-averaged PCK@0.1 with the image threshold.
pub fn validation_pck<T: Scalar, B: Backbone<T> + ?Sized>(
    provider: &PromptProvider<T>,
    backbone: &B,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    pairs: &[TrainingPair<T>],
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no validation pairs".into()));
    }
    let scores = pairs
        .par_iter()
        .map(|tp| {
            let pred = match_pair(provider, backbone, sched, cfg, tp)?;
            let th = base_threshold(ThresholdKind::Img, &tp.pair)?;
            Ok(count_correct(&pred, &tp.pair.keypoints_b, th, 0.1)? as f64 / tp.pair.len() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Below this magnitude gradients are compared absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares backpropagated gradients of the batch loss over `data` with
/// central differences on `entries` randomly chosen scalars, cycling
/// through every parameter tensor so all groups are covered.
pub fn grad_check<B: Backbone<f64> + ?Sized>(
    provider: &PromptProvider<f64>,
    backbone: &B,
    cfg: &TrainConfig,
    data: &[TrainingPair<f64>],
    entries: usize,
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let sched = NoiseSchedule::default();
    cfg.validate(&sched)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let (_, grads) = batch_loss_and_grad(backbone, &sched, cfg, provider, data, &idx, 0)?;
    let infos = provider.trainable_parameters();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<(usize, usize)> = (0..entries)
        .map(|e| {
            let k = e % infos.len();
            (k, rng.random_range(0..grads[k].len()))
        })
        .collect();
    let results = picks
        .par_iter()
        .map(|&(k, i)| {
            let loss_at = |delta: f64| -> Result<f64> {
                let mut p = provider.clone();
                let t = &mut p.parameters_mut()[k];
                t.data_mut()[i] += delta;
                Ok(batch_loss_and_grad(backbone, &sched, cfg, &p, data, &idx, 0)?.0)
            };
            let numeric = (loss_at(eps)? - loss_at(-eps)?) / (2.0 * eps);
            let analytic = grads[k].data()[i];
            Ok(GradCheckEntry {
                name: infos[k].name.clone(),
                index: i,
                analytic,
                numeric,
                rel_error: relative_error(analytic, numeric, GRAD_CHECK_FLOOR),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let max_rel_error = results.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        entries: results,
        max_rel_error,
    })
}

/// Distinct categories of `split`, sorted.
pub fn categories_of(split: &DatasetSplit) -> Vec<String> {
    split.categories().into_iter().map(str::to_string).collect()
}
