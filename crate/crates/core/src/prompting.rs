//! Prompt providers: one universal prompt, a per-category bank, and the
//! conditional prompting module (CPM) that derives a pair-specific prompt
//! from the local patch features of both images.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::diffusion::{Backbone, ImageTensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Standard deviation of randomly initialised prompt entries.
pub const PROMPT_INIT_STD: f64 = 0.02;

/// Token embeddings `[N, D]` fed to the backbone's cross-attention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptEmbedding<T> {
    data: Tensor<T>,
}

impl<T: Scalar> PromptEmbedding<T> {
    pub fn new(data: Tensor<T>) -> Result<Self> {
        let s = data.shape();
        if s.len() != 2 || s[0] == 0 || s[1] == 0 {
            return Err(Error::Shape(format!("prompt must be [N, D] with N, D >= 1, got {s:?}")));
        }
        if !data.is_finite() {
            return Err(Error::InvalidInput("prompt contains non-finite values".into()));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptInit {
    Random,
    /// Copy the backbone's text-encoder embedding of the given text.
    FromTokens(String),
}

/// Creates an `[n, d]` prompt. Random mode draws Gaussian(0, 0.02²) entries;
/// token mode pads (repeating the last token) or truncates the backbone's
/// token embeddings to `n`.
pub fn init_prompt<T: Scalar>(
    n: usize,
    d: usize,
    mode: &PromptInit,
    seed: u64,
    backbone: Option<&dyn Backbone<T>>,
) -> Result<PromptEmbedding<T>> {
    if n == 0 || d == 0 {
        return Err(Error::Parameter(format!("prompt size {n}x{d} must be positive")));
    }
    match mode {
        PromptInit::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            PromptEmbedding::new(Tensor::randn(&[n, d], PROMPT_INIT_STD, &mut rng))
        }
        PromptInit::FromTokens(text) => {
            let tokens = backbone.and_then(|b| b.token_embeddings(text)).ok_or_else(|| {
                Error::Unsupported("prompt initialisation from text needs a backbone with a text encoder".into())
            })?;
            let s = tokens.shape();
            if s.len() != 2 || s[1] != d || s[0] == 0 {
                return Err(Error::Shape(format!("token embeddings {s:?} for width {d}")));
            }
            let src = tokens.data();
            let mut data = Vec::with_capacity(n * d);
            for i in 0..n {
                let row = i.min(s[0] - 1);
                data.extend_from_slice(&src[row * d..(row + 1) * d]);
            }
            PromptEmbedding::new(Tensor::from_vec(&[n, d], data)?)
        }
    }
}

/// One prompt per object category, all of the same shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPromptBank<T> {
    prompts: BTreeMap<String, PromptEmbedding<T>>,
    /// Returned for unknown categories when set.
    fallback: Option<PromptEmbedding<T>>,
}

impl<T: Scalar> ClassPromptBank<T> {
    pub fn new(prompts: BTreeMap<String, PromptEmbedding<T>>) -> Result<Self> {
        let mut shapes = prompts.values().map(|p| p.data.shape().to_vec());
        let first = shapes
            .next()
            .ok_or_else(|| Error::Parameter("class prompt bank is empty".into()))?;
        if shapes.any(|s| s != first) {
            return Err(Error::Shape("class prompts differ in shape".into()));
        }
        Ok(Self {
            prompts,
            fallback: None,
        })
    }

    /// Randomly initialised bank; category `i` (in sorted order) uses seed
    /// `seed + i`.
    pub fn random<S: AsRef<str>>(categories: &[S], n: usize, d: usize, seed: u64) -> Result<Self> {
        let mut names: Vec<&str> = categories.iter().map(|c| c.as_ref()).collect();
        names.sort_unstable();
        names.dedup();
        let mut prompts = BTreeMap::new();
        for (i, name) in names.into_iter().enumerate() {
            let p = init_prompt(n, d, &PromptInit::Random, seed.wrapping_add(i as u64), None)?;
            prompts.insert(name.to_string(), p);
        }
        Self::new(prompts)
    }

    pub fn with_fallback(mut self, fallback: PromptEmbedding<T>) -> Result<Self> {
        let shape = self.shape();
        if fallback.data.shape() != [shape.0, shape.1] {
            return Err(Error::Shape("fallback prompt shape differs from bank".into()));
        }
        self.fallback = Some(fallback);
        Ok(self)
    }

    pub fn categories(&self) -> impl Iterator<Item = &str> {
        self.prompts.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        let p = self.prompts.values().next().expect("bank is non-empty");
        (p.len(), p.dim())
    }

    pub fn get(&self, category: &str) -> Result<&PromptEmbedding<T>> {
        self.prompts
            .get(category)
            .or(self.fallback.as_ref())
            .ok_or_else(|| Error::MissingCategory(category.to_string()))
    }

    fn index_of(&self, category: &str) -> Option<usize> {
        self.prompts.keys().position(|k| k == category)
    }
}

pub fn get_class_prompt<'a, T: Scalar>(bank: &'a ClassPromptBank<T>, category: &str) -> Result<&'a PromptEmbedding<T>> {
    bank.get(category)
}

/// Local patch descriptors `[N_dino, D_dino]` of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchFeatures<T> {
    data: Tensor<T>,
}

impl<T: Scalar> PatchFeatures<T> {
    pub fn new(data: Tensor<T>) -> Result<Self> {
        let s = data.shape();
        if s.len() != 2 || s[0] == 0 || s[1] == 0 {
            return Err(Error::Shape(format!("patch features must be [N, D], got {s:?}")));
        }
        if !data.is_finite() {
            return Err(Error::InvalidInput("patch features contain non-finite values".into()));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Tensor<T> {
        &self.data
    }
}

/// Frozen extractor of local patch descriptors.
pub trait PatchExtractor<T: Scalar>: Send + Sync {
    fn n_patches(&self) -> usize;
    fn dim(&self) -> usize;
    fn extract(&self, img: &ImageTensor<T>) -> Result<PatchFeatures<T>>;
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchExtractorConfig {
    pub seed: u64,
    /// Patches per image side.
    pub grid: usize,
    /// Each patch is summarised by the mean colour of `cells x cells` sub-cells.
    pub cells: usize,
    pub dim: usize,
}

impl Default for PatchExtractorConfig {
    fn default() -> Self {
        Self {
            seed: 0xd1,
            grid: 8,
            cells: 2,
            dim: 32,
        }
    }
}

/// Seeded random-projection patch descriptor: per-patch sub-cell colour means
/// projected by a fixed Gaussian matrix and squashed with `tanh`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(from = "PatchExtractorConfig", into = "PatchExtractorConfig", bound = "T: Scalar")]
pub struct RandomPatchExtractor<T> {
    cfg: PatchExtractorConfig,
    projection: Tensor<T>,
}

impl<T: Scalar> RandomPatchExtractor<T> {
    pub fn new(cfg: PatchExtractorConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let input = 3 * cfg.cells * cfg.cells;
        let projection = Tensor::randn(&[input, cfg.dim], 2.0 / (input as f64).sqrt(), &mut rng);
        Self { cfg, projection }
    }

    pub fn config(&self) -> &PatchExtractorConfig {
        &self.cfg
    }

    pub fn weight_fingerprint(&self) -> Vec<u64> {
        self.projection.data().iter().map(|v| v.as_f64().to_bits()).collect()
    }
}

impl<T: Scalar> From<PatchExtractorConfig> for RandomPatchExtractor<T> {
    fn from(cfg: PatchExtractorConfig) -> Self {
        Self::new(cfg)
    }
}

impl<T: Scalar> From<RandomPatchExtractor<T>> for PatchExtractorConfig {
    fn from(e: RandomPatchExtractor<T>) -> Self {
        e.cfg
    }
}

impl<T: Scalar> PatchExtractor<T> for RandomPatchExtractor<T> {
    fn n_patches(&self) -> usize {
        self.cfg.grid * self.cfg.grid
    }

    fn dim(&self) -> usize {
        self.cfg.dim
    }

    fn extract(&self, img: &ImageTensor<T>) -> Result<PatchFeatures<T>> {
        let (g, k) = (self.cfg.grid, self.cfg.cells);
        let (h, w) = (img.height(), img.width());
        if h < g * k || w < g * k || img.channels() != 3 {
            return Err(Error::Shape(format!(
                "patch extractor needs a 3-channel image of at least {0}x{0}, got {1}x{2}x{3}",
                g * k,
                img.channels(),
                h,
                w
            )));
        }
        let cells = g * k;
        let px = img.data().data();
        let input = 3 * k * k;
        let mut desc = vec![0.0f64; g * g * input];
        for cy in 0..cells {
            let (y0, y1) = (cy * h / cells, (cy + 1) * h / cells);
            for cx in 0..cells {
                let (x0, x1) = (cx * w / cells, (cx + 1) * w / cells);
                let count = ((y1 - y0) * (x1 - x0)) as f64;
                let patch = (cy / k) * g + cx / k;
                let sub = (cy % k) * k + cx % k;
                for c in 0..3 {
                    let mut s = 0.0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            s += px[(c * h + y) * w + x].as_f64();
                        }
                    }
                    desc[patch * input + c * k * k + sub] = s / count;
                }
            }
        }
        let d = self.cfg.dim;
        let mut out = vec![T::zero(); g * g * d];
        for p in 0..g * g {
            for j in 0..d {
                let mut s = 0.0;
                for i in 0..input {
                    s += desc[p * input + i] * self.projection[i * d + j].as_f64();
                }
                out[p * d + j] = T::lit(s.tanh());
            }
        }
        PatchFeatures::new(Tensor::from_vec(&[g * g, d], out)?)
    }
}

/// What the conditional prompt is computed from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// Local patches of both images (the full module).
    PairLocal,
    /// Mean patch descriptor of each image broadcast over the patch axis.
    PairGlobal,
    /// Local patches of image A only.
    SingleLocal,
    /// Mean patch descriptor of image A only.
    SingleGlobal,
}

/// Ablation switches of the conditional prompting module.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CpmFlags {
    pub conditioning: Conditioning,
    pub global_prompt: bool,
    pub patch_mixing: bool,
}

impl Default for CpmFlags {
    fn default() -> Self {
        Self {
            conditioning: Conditioning::PairLocal,
            global_prompt: true,
            patch_mixing: true,
        }
    }
}

/// Learnable parameters of the conditional prompting module.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CpmParameters<T> {
    /// `[2*D_dino, D]`
    pub gd_weight: Tensor<T>,
    /// `[D]`
    pub gd_bias: Tensor<T>,
    /// `[N_dino, N_dino]`, acting along the patch axis.
    pub gn_weight: Tensor<T>,
    /// `[N_dino]`
    pub gn_bias: Tensor<T>,
    /// `[N_cond, D]`
    pub omega_alpha: Tensor<T>,
    /// `[N_cond, D]`
    pub omega_pos: Tensor<T>,
    /// `[N_global, D]`
    pub theta_global: Tensor<T>,
}

impl<T: Scalar> CpmParameters<T> {
    pub fn init(n_dino: usize, d_dino: usize, d: usize, n_global: usize, n_cond: usize, seed: u64) -> Result<Self> {
        if n_cond == 0 || n_cond > n_dino {
            return Err(Error::Parameter(format!(
                "N_cond = {n_cond} must be in [1, N_dino = {n_dino}]"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            gd_weight: Tensor::randn(&[2 * d_dino, d], PROMPT_INIT_STD, &mut rng),
            gd_bias: Tensor::zeros(&[d]),
            gn_weight: Tensor::randn(&[n_dino, n_dino], PROMPT_INIT_STD, &mut rng),
            gn_bias: Tensor::zeros(&[n_dino]),
            omega_alpha: Tensor::full(&[n_cond, d], T::one()),
            omega_pos: Tensor::randn(&[n_cond, d], PROMPT_INIT_STD, &mut rng),
            theta_global: Tensor::randn(&[n_global, d], PROMPT_INIT_STD, &mut rng),
        })
    }

    pub fn n_cond(&self) -> usize {
        self.omega_alpha.shape()[0]
    }

    pub fn n_global(&self) -> usize {
        self.theta_global.shape()[0]
    }

    pub fn n_dino(&self) -> usize {
        self.gn_weight.shape()[0]
    }

    pub fn d_dino(&self) -> usize {
        self.gd_weight.shape()[0] / 2
    }

    pub fn dim(&self) -> usize {
        self.gd_weight.shape()[1]
    }

    fn tensors(&self) -> [&Tensor<T>; 7] {
        [
            &self.gd_weight,
            &self.gd_bias,
            &self.gn_weight,
            &self.gn_bias,
            &self.omega_alpha,
            &self.omega_pos,
            &self.theta_global,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 7] {
        [
            &mut self.gd_weight,
            &mut self.gd_bias,
            &mut self.gn_weight,
            &mut self.gn_bias,
            &mut self.omega_alpha,
            &mut self.omega_pos,
            &mut self.theta_global,
        ]
    }
}

/// CPM parameters recorded on a tape, in [`CpmParameters`] field order.
pub struct CpmVars {
    pub gd_weight: Var,
    pub gd_bias: Var,
    pub gn_weight: Var,
    pub gn_bias: Var,
    pub omega_alpha: Var,
    pub omega_pos: Var,
    pub theta_global: Var,
}

impl CpmVars {
    fn from_slice(v: &[Var]) -> Self {
        Self {
            gd_weight: v[0],
            gd_bias: v[1],
            gn_weight: v[2],
            gn_bias: v[3],
            omega_alpha: v[4],
            omega_pos: v[5],
            theta_global: v[6],
        }
    }
}

/// Records the conditional prompt computation on `tape`.
///
/// 1. concatenate patches of A and B along the feature axis
/// 2. project features with `g_d`
/// 3. mix along the patch axis with `g_n`
/// 4. adaptive max-pool the patch axis to `N_cond`
/// 5. `pooled * omega_alpha + omega_pos`
/// 6. prepend the global prompt
pub fn cpm_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    fa: &PatchFeatures<T>,
    fb: &PatchFeatures<T>,
    vars: &CpmVars,
    flags: CpmFlags,
) -> Result<Var> {
    if fa.data.shape() != fb.data.shape() {
        return Err(Error::Shape(format!(
            "patch features {:?} vs {:?}",
            fa.data.shape(),
            fb.data.shape()
        )));
    }
    let n_dino = fa.data.shape()[0];
    let n_cond = tape.shape(vars.omega_alpha)[0];
    if n_cond > n_dino {
        return Err(Error::Parameter(format!("N_cond = {n_cond} exceeds N_dino = {n_dino}")));
    }
    if tape.shape(vars.gn_weight)[0] != n_dino || tape.shape(vars.gd_weight)[0] != 2 * fa.data.shape()[1] {
        return Err(Error::Shape(format!(
            "CPM parameters built for N_dino = {}, D_dino = {}; got patches {:?}",
            tape.shape(vars.gn_weight)[0],
            tape.shape(vars.gd_weight)[0] / 2,
            fa.data.shape()
        )));
    }
    let single = matches!(
        flags.conditioning,
        Conditioning::SingleLocal | Conditioning::SingleGlobal
    );
    let global = matches!(
        flags.conditioning,
        Conditioning::PairGlobal | Conditioning::SingleGlobal
    );
    let mut a = tape.constant(fa.data.clone());
    let mut b = if single { a } else { tape.constant(fb.data.clone()) };
    if global {
        a = tape.mean_rows_broadcast(a);
        b = if single { a } else { tape.mean_rows_broadcast(b) };
    }
    let cat = tape.concat_cols(a, b)?;
    let projected = tape.matmul(cat, vars.gd_weight)?;
    let mut h = tape.add_row_vec(projected, vars.gd_bias)?;
    if flags.patch_mixing {
        let mixed = tape.matmul(vars.gn_weight, h)?;
        h = tape.add_col_vec(mixed, vars.gn_bias)?;
    }
    let pooled = tape.max_pool_rows(h, n_cond)?;
    let scaled = tape.mul(pooled, vars.omega_alpha)?;
    let cond = tape.add(scaled, vars.omega_pos)?;
    if flags.global_prompt {
        tape.concat0(&[vars.theta_global, cond])
    } else {
        Ok(cond)
    }
}

/// Pair-specific prompt from patch features of both images.
pub fn cpm_forward<T: Scalar>(
    fa: &PatchFeatures<T>,
    fb: &PatchFeatures<T>,
    params: &CpmParameters<T>,
    flags: CpmFlags,
) -> Result<PromptEmbedding<T>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.tensors().iter().map(|t| tape.constant((*t).clone())).collect();
    let out = cpm_on_tape(&mut tape, fa, fb, &CpmVars::from_slice(&vars), flags)?;
    PromptEmbedding::new(tape.value(out).clone())
}

/// Conditional prompting module with its frozen patch extractor.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct CpmModule<T> {
    pub params: CpmParameters<T>,
    pub flags: CpmFlags,
    pub extractor: RandomPatchExtractor<T>,
}

impl<T: Scalar> CpmModule<T> {
    pub fn init(
        extractor: PatchExtractorConfig,
        d: usize,
        n_global: usize,
        n_cond: usize,
        flags: CpmFlags,
        seed: u64,
    ) -> Result<Self> {
        let extractor = RandomPatchExtractor::new(extractor);
        let n_dino = PatchExtractor::<T>::n_patches(&extractor);
        let d_dino = PatchExtractor::<T>::dim(&extractor);
        Ok(Self {
            params: CpmParameters::init(n_dino, d_dino, d, n_global, n_cond, seed)?,
            flags,
            extractor,
        })
    }
}

/// Learning-rate group of a trainable tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrGroup {
    Prompt,
    Projection,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    /// Parameter group, e.g. `g_d` or `theta`.
    pub group: String,
    /// Unique tensor name, e.g. `g_d.weight`.
    pub name: String,
    pub lr_group: LrGroup,
    pub shape: Vec<usize>,
}

/// The images (and category) a prompt is built for.
pub struct PairContext<'a, T> {
    pub category: &'a str,
    pub image_a: &'a ImageTensor<T>,
    pub image_b: &'a ImageTensor<T>,
}

/// Prompt node plus the tape leaves standing for provider parameters.
pub struct PromptOnTape {
    pub prompt: Var,
    /// `(parameter index, leaf)` for every parameter the prompt depends on.
    pub leaves: Vec<(usize, Var)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", bound = "T: Scalar")]
pub enum PromptProvider<T> {
    Single(PromptEmbedding<T>),
    Class(ClassPromptBank<T>),
    Cpm(CpmModule<T>),
}

const CPM_NAMES: [(&str, &str, LrGroup); 7] = [
    ("g_d", "g_d.weight", LrGroup::Projection),
    ("g_d", "g_d.bias", LrGroup::Projection),
    ("g_n", "g_n.weight", LrGroup::Projection),
    ("g_n", "g_n.bias", LrGroup::Projection),
    ("omega_alpha", "omega_alpha", LrGroup::Prompt),
    ("omega_pos", "omega_pos", LrGroup::Prompt),
    ("theta_global", "theta_global", LrGroup::Prompt),
];

impl<T: Scalar> PromptProvider<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Single(_) => "single",
            Self::Class(_) => "class",
            Self::Cpm(_) => "cpm",
        }
    }

    /// Trainable tensors with their group tags, in a fixed order.
    pub fn trainable_parameters(&self) -> Vec<ParamInfo> {
        match self {
            Self::Single(p) => vec![ParamInfo {
                group: "theta".into(),
                name: "theta".into(),
                lr_group: LrGroup::Prompt,
                shape: p.data.shape().to_vec(),
            }],
            Self::Class(bank) => bank
                .prompts
                .iter()
                .map(|(name, p)| ParamInfo {
                    group: format!("class.{name}"),
                    name: format!("class.{name}"),
                    lr_group: LrGroup::Prompt,
                    shape: p.data.shape().to_vec(),
                })
                .collect(),
            Self::Cpm(m) => CPM_NAMES
                .iter()
                .zip(m.params.tensors())
                .map(|((group, name, lr), t)| ParamInfo {
                    group: group.to_string(),
                    name: name.to_string(),
                    lr_group: *lr,
                    shape: t.shape().to_vec(),
                })
                .collect(),
        }
    }

    pub fn parameters(&self) -> Vec<&Tensor<T>> {
        match self {
            Self::Single(p) => vec![&p.data],
            Self::Class(bank) => bank.prompts.values().map(|p| &p.data).collect(),
            Self::Cpm(m) => m.params.tensors().to_vec(),
        }
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Self::Single(p) => vec![&mut p.data],
            Self::Class(bank) => bank.prompts.values_mut().map(|p| &mut p.data).collect(),
            Self::Cpm(m) => m.params.tensors_mut().into_iter().collect(),
        }
    }

    /// Prompt width `D`.
    pub fn dim(&self) -> usize {
        match self {
            Self::Single(p) => p.dim(),
            Self::Class(bank) => bank.shape().1,
            Self::Cpm(m) => m.params.dim(),
        }
    }

    /// Records the prompt for `ctx` on `tape`. With `trainable`, provider
    /// parameters become gradient-carrying leaves.
    pub fn prompt_on_tape(
        &self,
        tape: &mut Tape<T>,
        ctx: &PairContext<'_, T>,
        trainable: bool,
    ) -> Result<PromptOnTape> {
        let leaf = |tape: &mut Tape<T>, t: &Tensor<T>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        match self {
            Self::Single(p) => {
                let v = leaf(tape, &p.data);
                Ok(PromptOnTape {
                    prompt: v,
                    leaves: vec![(0, v)],
                })
            }
            Self::Class(bank) => {
                let p = bank.get(ctx.category)?;
                let v = leaf(tape, &p.data);
                let leaves = bank.index_of(ctx.category).map(|i| vec![(i, v)]).unwrap_or_default();
                Ok(PromptOnTape { prompt: v, leaves })
            }
            Self::Cpm(m) => {
                let fa = m.extractor.extract(ctx.image_a)?;
                let fb = m.extractor.extract(ctx.image_b)?;
                let vars: Vec<Var> = m.params.tensors().iter().map(|t| leaf(tape, t)).collect();
                let prompt = cpm_on_tape(tape, &fa, &fb, &CpmVars::from_slice(&vars), m.flags)?;
                Ok(PromptOnTape {
                    prompt,
                    leaves: vars.into_iter().enumerate().collect(),
                })
            }
        }
    }

    /// The prompt used for both images of the pair in `ctx`.
    pub fn prompt_for_pair(&self, ctx: &PairContext<'_, T>) -> Result<PromptEmbedding<T>> {
        let mut tape = Tape::new();
        let p = self.prompt_on_tape(&mut tape, ctx, false)?;
        PromptEmbedding::new(tape.value(p.prompt).clone())
    }
}
