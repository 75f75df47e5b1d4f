use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::{anyhow, bail, Context};
use log::{info, warn};
use rayon::prelude::*;

use diffmatch::datasets::synthetic::{generate, write_dataset, SyntheticConfig};
use diffmatch::datasets::{load_pf_pascal, load_pf_willow, load_spair, read_canonical, rescale_pair, unscale_keypoint};
use diffmatch::diffusion::{load_real_backbone, RealBackboneSpec};
use diffmatch::evaluation::{base_threshold, count_correct, evaluate_split};
use diffmatch::training::{categories_of, grad_check, init_provider, load_pairs, match_pair, LossRecord, TrainingPair};
use diffmatch::{
    Aggregation, Backbone, Checkpoint, DatasetSplit, ImageSize, Keypoint, MatchPair, NoiseSchedule, PromptProvider,
    ProviderKind, Scalar, SplitName, ThresholdKind, ToyUnet, ToyUnetConfig, TrainConfig, Trainer,
};

use crate::args::{
    AggregationArg, BackboneKind, DataArgs, DatasetKind, EvalArgs, GradCheckArgs, MatchArgs, Matcher, ModelArgs,
    Provider, SynthArgs, Threshold, TuneArgs, VisualizeArgs,
};
use crate::draw;
use crate::predictions::{self, Row};

/// Usage errors exit with 1, everything else with 2.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Self::Runtime(e.into())
    }
}

pub type Outcome = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn provider_kind(p: Provider) -> ProviderKind {
    match p {
        Provider::Single => ProviderKind::Single,
        Provider::Class => ProviderKind::Class,
        Provider::Cpm => ProviderKind::Cpm,
    }
}

fn threshold_kind(t: Threshold) -> ThresholdKind {
    match t {
        Threshold::Img => ThresholdKind::Img,
        Threshold::Kps => ThresholdKind::Kps,
        Threshold::Bbox => ThresholdKind::Bbox,
    }
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig, Failure> {
    let Some(path) = path else {
        return Ok(TrainConfig::default());
    };
    let bad = |e: &dyn std::fmt::Display| usage(format!("--config {}: {e}", path.display()));
    let text = fs::read_to_string(path).map_err(|e| bad(&e))?;
    let table: toml::Table = toml::from_str(&text).map_err(|e| bad(&e))?;
    let known = toml::Table::try_from(TrainConfig::default()).context("serialising the default config")?;
    if let Some(k) = table.keys().find(|k| !known.contains_key(*k)) {
        return Err(bad(&format!("unknown key `{k}`")));
    }
    toml::from_str(&text).map_err(|e| bad(&e))
}

/// Configuration from `--checkpoint` or `--config`, with flag overrides.
/// A checkpoint fixes everything but the step budget.
fn settings(m: &ModelArgs, steps: Option<usize>) -> Result<(TrainConfig, Option<Checkpoint<f32>>), Failure> {
    if m.backbone == BackboneKind::Real && m.weights.is_none() {
        return Err(usage("--backbone real needs --weights <path or model id>"));
    }
    let Some(path) = &m.checkpoint else {
        let mut cfg = load_config(m.config.as_deref())?;
        if let Some(p) = m.provider {
            cfg.provider = provider_kind(p);
        }
        if let Some(s) = m.seed {
            cfg.seed = s;
        }
        if let Some(s) = m.image_size {
            cfg.image_size = s;
        }
        if let Some(s) = steps {
            cfg.steps = s;
        }
        return Ok((cfg, None));
    };
    if m.config.is_some() {
        return Err(usage(
            "--config and --checkpoint are exclusive; a checkpoint carries its own configuration",
        ));
    }
    let mut ckpt = Checkpoint::<f32>::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let cfg = &ckpt.config;
    if let Some(p) = m.provider.filter(|p| provider_kind(*p) != cfg.provider) {
        return Err(usage(format!(
            "--provider {p:?} conflicts with the checkpoint's {:?} provider",
            cfg.provider
        )));
    }
    if let Some(s) = m.image_size.filter(|s| *s != cfg.image_size) {
        return Err(usage(format!(
            "--image-size {s} conflicts with the checkpoint's {}",
            cfg.image_size
        )));
    }
    if let Some(s) = m.seed.filter(|s| *s != cfg.seed) {
        return Err(usage(format!(
            "--seed {s} conflicts with the checkpoint's {}",
            cfg.seed
        )));
    }
    if let Some(s) = steps {
        ckpt.config.steps = s;
    }
    Ok((ckpt.config.clone(), Some(ckpt)))
}

fn backbone<T: Scalar>(m: &ModelArgs, side: usize) -> Result<Box<dyn Backbone<T>>, Failure> {
    match m.backbone {
        BackboneKind::Toy => {
            if m.weights.is_some() {
                warn!("--weights is ignored by the toy backbone");
            }
            Ok(Box::new(ToyUnet::<T>::new(ToyUnetConfig::default(), side)))
        }
        BackboneKind::Real => {
            let weights = m.weights.clone().unwrap_or_default();
            Ok(load_real_backbone(&RealBackboneSpec { weights })?)
        }
    }
}

fn parse_split(flag: &str, s: &str) -> Result<SplitName, Failure> {
    SplitName::parse(s).map_err(|e| usage(format!("{flag}: {e}")))
}

fn load_split(data: &DataArgs, split: Option<&str>, default: SplitName) -> Result<DatasetSplit, Failure> {
    let root = data
        .dataset_root
        .as_deref()
        .ok_or_else(|| usage("--dataset-root is required (or set DIFFMATCH_DATASET_ROOT)"))?;
    if !root.exists() {
        return Err(usage(format!("--dataset-root {} does not exist", root.display())));
    }
    let name = split.map(|s| parse_split("--split", s)).transpose()?.unwrap_or(default);
    let out = match data.dataset {
        DatasetKind::Spair => load_spair(root, name)?,
        DatasetKind::PfPascal => load_pf_pascal(root, name)?,
        DatasetKind::PfWillow => {
            if split.is_some() && name != SplitName::Test {
                return Err(usage("--split: PF-Willow only has a test split"));
            }
            load_pf_willow(root)?
        }
        DatasetKind::Canonical => {
            let file = if root.is_dir() {
                root.join("pairs.jsonl")
            } else {
                root.to_path_buf()
            };
            read_canonical(&file)?
        }
    };
    if out.pairs.is_empty() {
        return Err(anyhow!("{} has no pairs", root.display()).into());
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(p) = out.pairs.iter().find(|p| !seen.insert(p.id.as_str())) {
        return Err(anyhow!("pair id `{}` occurs more than once", p.id).into());
    }
    info!("{} pairs from {}", out.pairs.len(), root.display());
    Ok(out)
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn square(side: usize) -> ImageSize {
    ImageSize::new(side as f64, side as f64)
}

fn write_loss_log(path: &Path, history: &[LossRecord]) -> diffmatch::Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for r in history {
        let line = serde_json::to_string(r).map_err(|e| diffmatch::Error::Parse {
            context: path.display().to_string(),
            reason: e.to_string(),
        })?;
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn tune(a: &TuneArgs) -> Outcome {
    let (cfg, ckpt) = settings(&a.model, a.steps)?;
    let split = load_split(&a.data, a.data.split.as_deref(), SplitName::Train)?;
    let val = match &a.val_split {
        Some(s) => Some(load_split(&a.data, Some(s), SplitName::Validation)?),
        None => None,
    };
    let backbone = backbone::<f32>(&a.model, cfg.image_size)?;
    create_dir(&a.out)?;
    let data = load_pairs::<f32>(&split, cfg.image_size)?;
    let val_data = val.map(|v| load_pairs::<f32>(&v, cfg.image_size)).transpose()?;
    let mut trainer = match ckpt {
        Some(c) => {
            info!("resuming at step {}", c.step);
            Trainer::resume(c, backbone.as_ref())?
        }
        None => {
            let provider = init_provider::<f32>(&cfg, backbone.config().prompt_dim, &categories_of(&split))?;
            Trainer::new(cfg, backbone.as_ref(), provider)?
        }
    };
    let ckpt_path = a.out.join("checkpoint.json");
    let log_path = a.out.join("loss.jsonl");
    trainer.run(&data, val_data.as_deref(), |t| {
        t.checkpoint().save(&ckpt_path)?;
        write_loss_log(&log_path, &t.history)
    })?;
    // The optimiser state is the final one; best.json is meant for inference.
    if let Some((pck, step, provider)) = &trainer.best {
        let mut c = trainer.checkpoint();
        c.provider = provider.clone();
        c.step = *step;
        c.history.retain(|r| r.step < *step);
        c.save(&a.out.join("best.json"))?;
        println!("best validation PCK@0.1 {pck:.4} at step {step}");
    }
    match trainer.history.last() {
        Some(r) => println!("step {} loss {:.6}", r.step + 1, r.loss),
        None => println!("no steps run"),
    }
    println!("checkpoint {}", ckpt_path.display());
    Ok(())
}

fn require_tuned(cfg: &TrainConfig, ckpt: &Option<Checkpoint<f32>>) -> Outcome {
    if ckpt.is_none() && cfg.provider == ProviderKind::Cpm {
        return Err(usage(
            "the CPM provider needs tuned weights; run `diffmatch tune --provider cpm` first \
             and pass the resulting --checkpoint",
        ));
    }
    Ok(())
}

/// A provider bound to its backbone and inference settings.
struct Model {
    backbone: Box<dyn Backbone<f32>>,
    provider: PromptProvider<f32>,
    cfg: TrainConfig,
    sched: NoiseSchedule,
}

impl Model {
    fn build(
        m: &ModelArgs,
        cfg: TrainConfig,
        ckpt: Option<Checkpoint<f32>>,
        split: &DatasetSplit,
    ) -> Result<Self, Failure> {
        let sched = NoiseSchedule::default();
        cfg.validate(&sched)?;
        let backbone = backbone::<f32>(m, cfg.image_size)?;
        let provider = match ckpt {
            Some(c) => {
                if &c.backbone != backbone.config() {
                    return Err(anyhow!(
                        "checkpoint was tuned on backbone {:?}, not {:?}",
                        c.backbone,
                        backbone.config()
                    )
                    .into());
                }
                c.provider
            }
            None => {
                warn!("no --checkpoint given; using an untuned {:?} prompt", cfg.provider);
                init_provider(&cfg, backbone.config().prompt_dim, &categories_of(split))?
            }
        };
        Ok(Self {
            backbone,
            provider,
            cfg,
            sched,
        })
    }

    /// Predictions in the working-resolution frame.
    fn predict(&self, split: &DatasetSplit, pair: &MatchPair) -> diffmatch::Result<Vec<Keypoint>> {
        let tp = TrainingPair::<f32>::load(split, pair, self.cfg.image_size)?;
        match_pair(&self.provider, self.backbone.as_ref(), &self.sched, &self.cfg, &tp)
    }
}

fn to_original(pred: &[Keypoint], side: usize, pair: &MatchPair) -> Vec<Keypoint> {
    pred.iter()
        .map(|k| unscale_keypoint(*k, square(side), pair.size_b))
        .collect()
}

pub fn eval(a: &EvalArgs) -> Outcome {
    if a.score.alphas.is_empty() || a.score.alphas.iter().any(|x| !(*x > 0.0)) {
        return Err(usage(format!("--alphas must be positive, got {:?}", a.score.alphas)));
    }
    let (cfg, ckpt) = settings(&a.model, None)?;
    if a.matcher == Matcher::Model {
        require_tuned(&cfg, &ckpt)?;
    }
    let split = load_split(&a.data, a.data.split.as_deref(), SplitName::Test)?;
    let side = cfg.image_size;
    let model = match a.matcher {
        Matcher::Model => Some(Model::build(&a.model, cfg, ckpt, &split)?),
        Matcher::GroundTruth => None,
    };
    create_dir(&a.out)?;
    // Scoring happens at the working resolution.
    let scored = DatasetSplit {
        pairs: split
            .pairs
            .iter()
            .map(|p| rescale_pair(p, (side as f64, side as f64)))
            .collect(),
        ..split.clone()
    };
    let index: HashMap<&str, usize> = split
        .pairs
        .iter()
        .enumerate()
        .map(|(i, p)| (p.id.as_str(), i))
        .collect();
    let preds = Mutex::new(vec![None; split.pairs.len()]);
    let aggregation = match a.aggregation {
        AggregationArg::Pair => Aggregation::Pair,
        AggregationArg::Point => Aggregation::Point,
    };
    let report = evaluate_split(
        &scored,
        |p| {
            let i = index[p.id.as_str()];
            let pred = match &model {
                Some(m) => m.predict(&split, &split.pairs[i])?,
                None => p.keypoints_b.clone(),
            };
            preds.lock().expect("prediction store")[i] = Some(pred.clone());
            Ok(pred)
        },
        &a.score.alphas,
        threshold_kind(a.score.threshold),
        aggregation,
    )?;
    let rows: Vec<Row> = split
        .pairs
        .iter()
        .zip(preds.into_inner().expect("prediction store"))
        .filter_map(|(p, pred)| pred.map(|k| predictions::rows_for(p, &to_original(&k, side, p))))
        .flatten()
        .collect();
    predictions::write(&a.out.join("predictions.csv"), &rows)?;
    report.write_jsonl(&a.out.join("report.jsonl"))?;
    let table = report.to_table();
    fs::write(a.out.join("report.txt"), &table)?;
    print!("{table}");
    if !report.failures.is_empty() {
        return Err(anyhow!(
            "{} of {} pairs failed; see {}",
            report.failures.len(),
            split.pairs.len(),
            a.out.join("report.jsonl").display()
        )
        .into());
    }
    Ok(())
}

pub fn match_pairs(a: &MatchArgs) -> Outcome {
    let (cfg, ckpt) = settings(&a.model, None)?;
    require_tuned(&cfg, &ckpt)?;
    let split = load_split(&a.data, a.data.split.as_deref(), SplitName::Test)?;
    let selected: Vec<&MatchPair> = if a.pairs.is_empty() {
        split.pairs.iter().collect()
    } else {
        a.pairs
            .iter()
            .map(|id| {
                split
                    .pairs
                    .iter()
                    .find(|p| &p.id == id)
                    .ok_or_else(|| usage(format!("--pair `{id}` is not in the split")))
            })
            .collect::<Result<_, _>>()?
    };
    let side = cfg.image_size;
    let model = Model::build(&a.model, cfg, ckpt, &split)?;
    create_dir(&a.out)?;
    let rows = selected
        .par_iter()
        .map(|p| {
            let pred = model.predict(&split, p).with_context(|| format!("pair `{}`", p.id))?;
            Ok(predictions::rows_for(p, &to_original(&pred, side, p)))
        })
        .collect::<anyhow::Result<Vec<_>>>()?
        .concat();
    let path = a.out.join("predictions.csv");
    predictions::write(&path, &rows)?;
    println!(
        "{} predictions for {} pairs in {}",
        rows.len(),
        selected.len(),
        path.display()
    );
    Ok(())
}

/// Whether each prediction (original frame) is within `alpha` times the
/// base threshold, judged at the working resolution like `eval`.
fn correctness(
    pair: &MatchPair,
    pred: &[Keypoint],
    side: usize,
    kind: ThresholdKind,
    alpha: f64,
) -> anyhow::Result<Vec<bool>> {
    let scored = rescale_pair(pair, (side as f64, side as f64));
    let th = base_threshold(kind, &scored)?;
    pred.iter()
        .zip(&scored.keypoints_b)
        .map(|(p, g)| {
            let p = unscale_keypoint(*p, pair.size_b, scored.size_b);
            Ok(count_correct(&[p], &[*g], th, alpha)? == 1)
        })
        .collect()
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub fn visualize(a: &VisualizeArgs) -> Outcome {
    if !(a.alpha > 0.0) {
        return Err(usage(format!("--alpha must be positive, got {}", a.alpha)));
    }
    let side = match a.image_size {
        Some(s) => s,
        None => load_config(a.config.as_deref())?.image_size,
    };
    let rows = predictions::read(&a.predictions)?;
    let split = load_split(&a.data, a.data.split.as_deref(), SplitName::Test)?;
    let ids: Vec<&String> = if a.pairs.is_empty() {
        rows.keys().collect()
    } else {
        for id in &a.pairs {
            if !rows.contains_key(id) {
                return Err(usage(format!(
                    "--pair `{id}` has no rows in {}",
                    a.predictions.display()
                )));
            }
        }
        a.pairs.iter().collect()
    };
    let by_id: HashMap<&str, &MatchPair> = split.pairs.iter().map(|p| (p.id.as_str(), p)).collect();
    create_dir(&a.out)?;
    let kind = threshold_kind(a.threshold);
    let written = ids
        .par_iter()
        .map(|id| -> anyhow::Result<PathBuf> {
            let pair = by_id
                .get(id.as_str())
                .ok_or_else(|| anyhow!("predictions mention pair `{id}`, which is not in the split"))?;
            let rows = &rows[*id];
            if rows.len() != pair.len() {
                bail!(
                    "pair `{id}` has {} keypoints but {} prediction rows",
                    pair.len(),
                    rows.len()
                );
            }
            let pred: Vec<Keypoint> = rows.iter().map(|r| Keypoint::new(r.pred_x, r.pred_y)).collect();
            let correct = correctness(pair, &pred, side, kind, a.alpha)?;
            let open = |rel: &Path| -> anyhow::Result<image::RgbImage> {
                let path = split.resolve(rel);
                Ok(image::open(&path)
                    .with_context(|| format!("opening {}", path.display()))?
                    .to_rgb8())
            };
            let canvas = draw::side_by_side(&open(&pair.image_a)?, &open(&pair.image_b)?, rows, &correct);
            let path = a.out.join(format!("{}.png", file_stem(id)));
            canvas
                .save(&path)
                .with_context(|| format!("writing {}", path.display()))?;
            Ok(path)
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    println!("{} image(s) in {}", written.len(), a.out.display());
    Ok(())
}

pub fn grad_check_cmd(a: &GradCheckArgs) -> Outcome {
    if a.model.checkpoint.is_some() {
        return Err(usage(
            "grad-check starts from a freshly initialised provider; drop --checkpoint",
        ));
    }
    if a.pairs == 0 || a.entries == 0 || !(a.eps > 0.0) {
        return Err(usage("--pairs and --entries must be at least 1 and --eps positive"));
    }
    let (cfg, _) = settings(&a.model, None)?;
    let split = load_split(&a.data, a.data.split.as_deref(), SplitName::Train)?;
    let subset = DatasetSplit {
        pairs: split.pairs.iter().take(a.pairs).cloned().collect(),
        ..split
    };
    let backbone = backbone::<f64>(&a.model, cfg.image_size)?;
    let data = load_pairs::<f64>(&subset, cfg.image_size)?;
    let provider = init_provider::<f64>(&cfg, backbone.config().prompt_dim, &categories_of(&subset))?;
    let report = grad_check(&provider, backbone.as_ref(), &cfg, &data, a.entries, a.eps, cfg.seed)?;
    println!(
        "{:<16} {:>8} {:>14} {:>14} {:>10}",
        "parameter", "index", "analytic", "numeric", "rel err"
    );
    for e in &report.entries {
        println!(
            "{:<16} {:>8} {:>14.6e} {:>14.6e} {:>10.2e}",
            e.name, e.index, e.analytic, e.numeric, e.rel_error
        );
    }
    println!(
        "max relative error {:.3e} (tolerance {:.1e})",
        report.max_rel_error, a.tolerance
    );
    if let Some(out) = &a.out {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            create_dir(dir)?;
        }
        fs::write(out, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", out.display()))?;
    }
    if !(report.max_rel_error <= a.tolerance) {
        return Err(anyhow!(
            "gradient check failed: max relative error {:.3e} exceeds {:.1e}",
            report.max_rel_error,
            a.tolerance
        )
        .into());
    }
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Outcome {
    let split = parse_split("--split", &a.split)?;
    let cfg = SyntheticConfig {
        pairs: a.pairs,
        image_size: a.image_size,
        keypoints: a.keypoints,
        max_shift: a.max_shift,
        seed: a.seed,
        ..Default::default()
    };
    let pairs = generate(&cfg).map_err(|e| usage(e.to_string()))?;
    let out = write_dataset(&pairs, &a.out, split)?;
    println!("{} pairs in {}", out.pairs.len(), a.out.join("pairs.jsonl").display());
    Ok(())
}
