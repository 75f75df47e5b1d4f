//! Percentage of correct keypoints under image, keypoint-extent or
//! bounding-box thresholds.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{DatasetSplit, MatchPair};
use crate::error::{Error, Result};
use crate::matching::Keypoint;

pub const DEFAULT_ALPHAS: [f64; 3] = [0.05, 0.1, 0.15];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdKind {
    Img,
    Kps,
    Bbox,
}

impl ThresholdKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "img" => Ok(Self::Img),
            "kps" => Ok(Self::Kps),
            "bbox" => Ok(Self::Bbox),
            _ => Err(Error::Parameter(format!("unknown threshold `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean of per-pair scores.
    Pair,
    /// Correct keypoints over all keypoints.
    Point,
}

/// Reference length that `alpha` is multiplied with.
pub fn base_threshold(kind: ThresholdKind, pair: &MatchPair) -> Result<f64> {
    match kind {
        ThresholdKind::Img => Ok(pair.size_b.width.max(pair.size_b.height)),
        ThresholdKind::Kps => {
            let kps = &pair.keypoints_b;
            if kps.is_empty() {
                return Err(Error::InvalidInput(format!("pair `{}` has no keypoints", pair.id)));
            }
            let span = |f: fn(&Keypoint) -> f64| {
                let (lo, hi) = kps
                    .iter()
                    .map(f)
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
                hi - lo
            };
            Ok(span(|k| k.x).max(span(|k| k.y)))
        }
        ThresholdKind::Bbox => pair
            .bbox_b
            .map(|b| b.w.max(b.h))
            .ok_or_else(|| Error::InvalidInput(format!("pair `{}` has no bounding box", pair.id))),
    }
}

/// Number of predictions within `alpha * threshold` (inclusive) of the truth.
pub fn count_correct(pred: &[Keypoint], gt: &[Keypoint], threshold: f64, alpha: f64) -> Result<usize> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} keypoints",
            pred.len(),
            gt.len()
        )));
    }
    if !(alpha > 0.0) || !(threshold >= 0.0) {
        return Err(Error::Parameter(format!("alpha {alpha} / threshold {threshold}")));
    }
    let limit = alpha * threshold;
    Ok(pred.iter().zip(gt).filter(|(p, g)| p.distance(g) <= limit).count())
}

pub fn pck_pair(pred: &[Keypoint], gt: &[Keypoint], threshold: f64, alpha: f64) -> Result<f64> {
    if gt.is_empty() {
        return Err(Error::InvalidInput("no keypoints".into()));
    }
    Ok(count_correct(pred, gt, threshold, alpha)? as f64 / gt.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub id: String,
    pub category: String,
    pub keypoints: usize,
    /// Correct keypoints per alpha.
    pub correct: Vec<usize>,
}

impl PairResult {
    pub fn pck(&self, k: usize) -> f64 {
        self.correct[k] as f64 / self.keypoints as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairFailure {
    pub id: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PckReport {
    pub alphas: Vec<f64>,
    pub threshold: ThresholdKind,
    pub aggregation: Aggregation,
    pub pairs: Vec<PairResult>,
    pub failures: Vec<PairFailure>,
}

impl PckReport {
    fn aggregate<'a>(&self, results: impl Iterator<Item = &'a PairResult> + Clone, k: usize) -> f64 {
        match self.aggregation {
            Aggregation::Pair => {
                let n = results.clone().count();
                if n == 0 {
                    return f64::NAN;
                }
                results.map(|r| r.pck(k)).sum::<f64>() / n as f64
            }
            Aggregation::Point => {
                let total: usize = results.clone().map(|r| r.keypoints).sum();
                if total == 0 {
                    return f64::NAN;
                }
                results.map(|r| r.correct[k]).sum::<usize>() as f64 / total as f64
            }
        }
    }

    /// Overall PCK for each alpha.
    pub fn overall(&self) -> Vec<f64> {
        (0..self.alphas.len())
            .map(|k| self.aggregate(self.pairs.iter(), k))
            .collect()
    }

    /// Per-category PCK for each alpha.
    pub fn per_category(&self) -> BTreeMap<String, Vec<f64>> {
        let cats: std::collections::BTreeSet<&str> = self.pairs.iter().map(|r| r.category.as_str()).collect();
        cats.into_iter()
            .map(|c| {
                let it = self.pairs.iter().filter(move |r| r.category == c);
                let v = (0..self.alphas.len()).map(|k| self.aggregate(it.clone(), k)).collect();
                (c.to_string(), v)
            })
            .collect()
    }

    /// Rows are alphas, columns are categories plus the overall score (in %).
    pub fn to_table(&self) -> String {
        let cats = self.per_category();
        let overall = self.overall();
        let mut out = String::new();
        let _ = write!(out, "{:<8}", "alpha");
        for c in cats.keys() {
            let _ = write!(out, " {:>12}", truncate(c, 12));
        }
        let _ = writeln!(out, " {:>8}", "all");
        for (k, a) in self.alphas.iter().enumerate() {
            let _ = write!(out, "{:<8}", a);
            for v in cats.values() {
                let _ = write!(out, " {:>12.1}", 100.0 * v[k]);
            }
            let _ = writeln!(out, " {:>8.1}", 100.0 * overall[k]);
        }
        if !self.failures.is_empty() {
            let _ = writeln!(out, "{} pair(s) failed and were excluded", self.failures.len());
        }
        out
    }

    /// One JSON object per line: a summary line, then one line per pair.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let json = |e: serde_json::Error| Error::Parse {
            context: path.display().to_string(),
            reason: e.to_string(),
        };
        let summary = Summary {
            alphas: self.alphas.clone(),
            threshold: self.threshold,
            aggregation: self.aggregation,
            overall: self.overall(),
            per_category: self.per_category(),
            failures: self.failures.clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&summary).map_err(json)?)?;
        for r in &self.pairs {
            writeln!(out, "{}", serde_json::to_string(r).map_err(json)?)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut lines = file.lines();
        let ctx = |n: usize| format!("{} line {n}", path.display());
        let first = lines.next().transpose()?.ok_or_else(|| Error::Parse {
            context: ctx(1),
            reason: "empty report".into(),
        })?;
        let summary: Summary = serde_json::from_str(&first).map_err(|e| Error::Parse {
            context: ctx(1),
            reason: e.to_string(),
        })?;
        let mut pairs = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            pairs.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
                context: ctx(i + 2),
                reason: e.to_string(),
            })?);
        }
        Ok(Self {
            alphas: summary.alphas,
            threshold: summary.threshold,
            aggregation: summary.aggregation,
            pairs,
            failures: summary.failures,
        })
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

#[derive(Serialize, Deserialize)]
struct Summary {
    alphas: Vec<f64>,
    threshold: ThresholdKind,
    aggregation: Aggregation,
    overall: Vec<f64>,
    per_category: BTreeMap<String, Vec<f64>>,
    failures: Vec<PairFailure>,
}

fn score_pair(pair: &MatchPair, pred: &[Keypoint], alphas: &[f64], kind: ThresholdKind) -> Result<PairResult> {
    let threshold = base_threshold(kind, pair)?;
    let correct = alphas
        .iter()
        .map(|&a| count_correct(pred, &pair.keypoints_b, threshold, a))
        .collect::<Result<Vec<_>>>()?;
    Ok(PairResult {
        id: pair.id.clone(),
        category: pair.category.clone(),
        keypoints: pair.len(),
        correct,
    })
}

/// Runs `matcher` on every pair in parallel and scores the predictions.
///
/// Pairs whose matcher or scoring fails are logged, recorded in
/// `failures` and left out of every aggregate. Results keep split order.
pub fn evaluate_split<F>(
    split: &DatasetSplit,
    matcher: F,
    alphas: &[f64],
    kind: ThresholdKind,
    aggregation: Aggregation,
) -> Result<PckReport>
where
    F: Fn(&MatchPair) -> Result<Vec<Keypoint>> + Sync,
{
    if alphas.is_empty() || alphas.iter().any(|a| !(*a > 0.0)) {
        return Err(Error::Parameter(format!("alphas must be positive, got {alphas:?}")));
    }
    let outcomes: Vec<Result<PairResult>> = split
        .pairs
        .par_iter()
        .map(|p| matcher(p).and_then(|pred| score_pair(p, &pred, alphas, kind)))
        .collect();
    let mut pairs = Vec::new();
    let mut failures = Vec::new();
    for (p, o) in split.pairs.iter().zip(outcomes) {
        match o {
            Ok(r) => pairs.push(r),
            Err(e) => {
                warn!("pair `{}` failed: {e}", p.id);
                failures.push(PairFailure {
                    id: p.id.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }
    Ok(PckReport {
        alphas: alphas.to_vec(),
        threshold: kind,
        aggregation,
        pairs,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{BBox, SourceKind, SplitName};
    use crate::matching::ImageSize;
    use proptest::prelude::*;

    fn pair(id: &str, cat: &str, kps_b: Vec<Keypoint>) -> MatchPair {
        MatchPair {
            id: id.into(),
            image_a: "a".into(),
            image_b: "b".into(),
            category: cat.into(),
            keypoints_a: kps_b.clone(),
            keypoints_b: kps_b,
            bbox_b: Some(BBox {
                x: 0.0,
                y: 0.0,
                w: 50.0,
                h: 20.0,
            }),
            size_a: ImageSize::new(768.0, 768.0),
            size_b: ImageSize::new(768.0, 512.0),
        }
    }

    #[test]
    fn thresholds() {
        let p = pair("p", "c", vec![Keypoint::new(10.0, 10.0), Keypoint::new(40.0, 90.0)]);
        assert_eq!(base_threshold(ThresholdKind::Img, &p).unwrap(), 768.0);
        assert_eq!(base_threshold(ThresholdKind::Kps, &p).unwrap(), 80.0);
        assert_eq!(base_threshold(ThresholdKind::Bbox, &p).unwrap(), 50.0);
        let mut q = p.clone();
        q.bbox_b = None;
        assert!(base_threshold(ThresholdKind::Bbox, &q).is_err());
    }

    #[test]
    fn inclusive_boundary() {
        let gt = [Keypoint::new(0.0, 0.0), Keypoint::new(10.0, 0.0)];
        let pred = [Keypoint::new(3.0, 4.0), Keypoint::new(10.0, 5.0 + 1e-9)];
        assert_eq!(pck_pair(&pred, &gt, 50.0, 0.1).unwrap(), 0.5);
        assert!(pck_pair(&pred[..1], &gt, 50.0, 0.1).is_err());
    }

    #[test]
    fn aggregation_modes_and_failures() {
        let split = DatasetSplit {
            name: SplitName::Test,
            source: SourceKind::Canonical,
            root: ".".into(),
            pairs: vec![
                pair("a", "x", vec![Keypoint::new(1.0, 1.0)]),
                pair("b", "y", vec![Keypoint::new(1.0, 1.0); 3]),
                pair("c", "y", vec![Keypoint::new(1.0, 1.0)]),
            ],
        };
        let matcher = |p: &MatchPair| -> Result<Vec<Keypoint>> {
            match p.id.as_str() {
                "a" => Ok(p.keypoints_b.clone()),
                "b" => Ok(vec![
                    Keypoint::new(1.0, 1.0),
                    Keypoint::new(500.0, 1.0),
                    Keypoint::new(500.0, 1.0),
                ]),
                _ => Err(Error::InvalidInput("boom".into())),
            }
        };
        let r = evaluate_split(&split, matcher, &[0.1], ThresholdKind::Img, Aggregation::Pair).unwrap();
        assert_eq!(r.failures.len(), 1);
        assert!((r.overall()[0] - (1.0 + 1.0 / 3.0) / 2.0).abs() < 1e-12);
        let r = evaluate_split(&split, matcher, &[0.1], ThresholdKind::Img, Aggregation::Point).unwrap();
        assert!((r.overall()[0] - 0.5).abs() < 1e-12);
        assert_eq!(r.per_category()["y"], vec![1.0 / 3.0]);
        assert!(r.to_table().contains("1 pair(s) failed"));
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let report = PckReport {
            alphas: vec![0.05, 0.1],
            threshold: ThresholdKind::Bbox,
            aggregation: Aggregation::Point,
            pairs: vec![PairResult {
                id: "p".into(),
                category: "c".into(),
                keypoints: 4,
                correct: vec![1, 3],
            }],
            failures: vec![],
        };
        let path = dir.path().join("r.jsonl");
        report.write_jsonl(&path).unwrap();
        assert_eq!(PckReport::read_jsonl(&path).unwrap(), report);
    }

    /// Dyadic coordinates, so integer shifts are exact.
    fn kp() -> impl Strategy<Value = Keypoint> {
        (0..4000u32, 0..4000u32).prop_map(|(x, y)| Keypoint::new(x as f64 / 8.0, y as f64 / 8.0))
    }

    proptest! {
        #[test]
        fn monotone_in_alpha(pairs in prop::collection::vec((kp(), kp()), 1..20), a1 in 0.01..0.5f64, da in 0.0..0.5f64) {
            let (pred, gt): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let lo = pck_pair(&pred, &gt, 400.0, a1).unwrap();
            let hi = pck_pair(&pred, &gt, 400.0, a1 + da).unwrap();
            prop_assert!(lo <= hi);
            prop_assert!((0.0..=1.0).contains(&lo));
        }

        #[test]
        fn translation_invariant(pairs in prop::collection::vec((kp(), kp()), 1..20), dx in -100i32..100, dy in -100i32..100) {
            let (pred, gt): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let shift = |v: &[Keypoint]| v.iter().map(|k| Keypoint::new(k.x + dx as f64, k.y + dy as f64)).collect::<Vec<_>>();
            let a = count_correct(&pred, &gt, 300.0, 0.1).unwrap();
            let b = count_correct(&shift(&pred), &shift(&gt), 300.0, 0.1).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
