//! Pair records and loaders for PF-Pascal, PF-Willow, SPair-71k and the
//! line-delimited canonical interchange format.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::matching::{ImageSize, Keypoint};

pub mod synthetic;

/// Axis-aligned box `(x, y, w, h)` in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        Self {
            x: v[0],
            y: v[1],
            w: v[2],
            h: v[3],
        }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

impl SplitName {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" | "trn" => Ok(Self::Train),
            "validation" | "val" => Ok(Self::Validation),
            "test" => Ok(Self::Test),
            _ => Err(Error::Parameter(format!("unknown split `{s}`"))),
        }
    }

    /// Short directory/file prefix used by the public datasets.
    pub fn short(self) -> &'static str {
        match self {
            Self::Train => "trn",
            Self::Validation => "val",
            Self::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    PfPascal,
    PfWillow,
    Spair71k,
    Canonical,
}

/// Published pair counts of the public splits.
pub fn published_pair_count(source: SourceKind, split: SplitName) -> Option<usize> {
    use SourceKind::*;
    use SplitName::*;
    match (source, split) {
        (PfPascal, Train) => Some(2941),
        (PfPascal, Validation) => Some(308),
        (PfPascal, Test) => Some(299),
        (PfWillow, Test) => Some(900),
        (Spair71k, Train) => Some(53_340),
        (Spair71k, Validation) => Some(5_384),
        (Spair71k, Test) => Some(12_234),
        _ => None,
    }
}

/// Two images with aligned ground-truth keypoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub id: String,
    /// Relative to the split root.
    pub image_a: PathBuf,
    pub image_b: PathBuf,
    pub category: String,
    pub keypoints_a: Vec<Keypoint>,
    pub keypoints_b: Vec<Keypoint>,
    #[serde(default)]
    pub bbox_b: Option<BBox>,
    pub size_a: ImageSize,
    pub size_b: ImageSize,
}

impl MatchPair {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::InvalidInput(format!("pair `{}`: {reason}", self.id));
        if self.keypoints_a.is_empty() || self.keypoints_a.len() != self.keypoints_b.len() {
            return Err(bad(format!(
                "keypoint lists of length {} and {}",
                self.keypoints_a.len(),
                self.keypoints_b.len()
            )));
        }
        for (kp, size) in self
            .keypoints_a
            .iter()
            .map(|k| (k, self.size_a))
            .chain(self.keypoints_b.iter().map(|k| (k, self.size_b)))
        {
            kp.check_inside(size).map_err(|e| bad(e.to_string()))?;
        }
        if let Some(b) = self.bbox_b {
            let inside = b.x >= 0.0
                && b.y >= 0.0
                && b.w >= 0.0
                && b.h >= 0.0
                && b.x + b.w <= self.size_b.width
                && b.y + b.h <= self.size_b.height;
            if !inside {
                return Err(bad(format!("bounding box {b:?} outside image B")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.keypoints_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints_a.is_empty()
    }
}

/// Rescales keypoints, bounding box and recorded sizes of both images to
/// `target` (width, height).
pub fn rescale_pair(p: &MatchPair, target: (f64, f64)) -> MatchPair {
    let (tw, th) = target;
    let scale = |kps: &[Keypoint], size: ImageSize| -> Vec<Keypoint> {
        let (sx, sy) = (tw / size.width, th / size.height);
        kps.iter().map(|k| Keypoint::new(k.x * sx, k.y * sy)).collect()
    };
    let (bx, by) = (tw / p.size_b.width, th / p.size_b.height);
    MatchPair {
        keypoints_a: scale(&p.keypoints_a, p.size_a),
        keypoints_b: scale(&p.keypoints_b, p.size_b),
        bbox_b: p.bbox_b.map(|b| BBox {
            x: b.x * bx,
            y: b.y * by,
            w: b.w * bx,
            h: b.h * by,
        }),
        size_a: ImageSize::new(tw, th),
        size_b: ImageSize::new(tw, th),
        ..p.clone()
    }
}

/// Maps a keypoint from a rescaled frame back to the original image.
pub fn unscale_keypoint(kp: Keypoint, from: ImageSize, to: ImageSize) -> Keypoint {
    Keypoint::new(kp.x * to.width / from.width, kp.y * to.height / from.height)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub source: SourceKind,
    /// Directory image paths are relative to.
    pub root: PathBuf,
    pub pairs: Vec<MatchPair>,
}

impl DatasetSplit {
    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    pub fn categories(&self) -> BTreeSet<&str> {
        self.pairs.iter().map(|p| p.category.as_str()).collect()
    }

    fn finish(self) -> Result<Self> {
        if self.pairs.is_empty() {
            return Err(Error::Ingestion {
                path: self.root.clone(),
                reason: "split contains no usable pairs".into(),
            });
        }
        for p in &self.pairs {
            p.validate()?;
            for img in [&p.image_a, &p.image_b] {
                let path = self.resolve(img);
                if !path.is_file() {
                    return Err(Error::Ingestion {
                        path,
                        reason: format!("image referenced by pair `{}` does not exist", p.id),
                    });
                }
            }
        }
        Ok(self)
    }
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        context: path.display().to_string(),
        reason: e.to_string(),
    })
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Ingestion {
        path: dir.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .collect();
    files.sort();
    Ok(files)
}

/// A keypoint entry counts as visible when it is a finite, non-negative pair.
fn parse_point(v: &Value) -> Option<Keypoint> {
    let arr = v.as_array()?;
    let x = arr.first()?.as_f64()?;
    let y = arr.get(1)?.as_f64()?;
    (x.is_finite() && y.is_finite() && x >= 0.0 && y >= 0.0).then_some(Keypoint::new(x, y))
}

/// Keeps only the correspondences visible in both images.
fn mutual(a: Vec<Option<Keypoint>>, b: Vec<Option<Keypoint>>) -> (Vec<Keypoint>, Vec<Keypoint>) {
    a.into_iter().zip(b).filter_map(|(a, b)| Some((a?, b?))).unzip()
}

/// Loads SPair-71k from `root/PairAnnotation/<split>/*.json` with images
/// under `root/JPEGImages/<category>/`.
pub fn load_spair(root: &Path, split: SplitName) -> Result<DatasetSplit> {
    let dir = root.join("PairAnnotation").join(split.short());
    let mut pairs = Vec::new();
    for file in sorted_files(&dir, "json")? {
        let id = file
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let rec = read_json(&file)?;
        let perr = |what: &str| Error::Parse {
            context: format!("SPair pair `{id}`"),
            reason: format!("missing or malformed `{what}`"),
        };
        let field = |k: &str| rec.get(k).ok_or_else(|| perr(k));
        let s = |k: &str| -> Result<String> { field(k)?.as_str().map(str::to_string).ok_or_else(|| perr(k)) };
        let points = |k: &str| -> Result<Vec<Option<Keypoint>>> {
            Ok(field(k)?
                .as_array()
                .ok_or_else(|| perr(k))?
                .iter()
                .map(parse_point)
                .collect())
        };
        let size = |k: &str| -> Result<ImageSize> {
            let v = field(k)?.as_array().ok_or_else(|| perr(k))?;
            let w = v.first().and_then(Value::as_f64).ok_or_else(|| perr(k))?;
            let h = v.get(1).and_then(Value::as_f64).ok_or_else(|| perr(k))?;
            Ok(ImageSize::new(w, h))
        };
        let category = s("category")?;
        let (kps_a, kps_b) = (points("src_kps")?, points("trg_kps")?);
        if kps_a.len() != kps_b.len() {
            return Err(perr("src_kps/trg_kps length"));
        }
        let (keypoints_a, keypoints_b) = mutual(kps_a, kps_b);
        if keypoints_a.is_empty() {
            warn!("skipping SPair pair `{id}`: no mutually visible keypoints");
            continue;
        }
        let bbox_b = match rec.get("trg_bndbox") {
            Some(v) => {
                let b: Vec<f64> = v
                    .as_array()
                    .ok_or_else(|| perr("trg_bndbox"))?
                    .iter()
                    .filter_map(Value::as_f64)
                    .collect();
                if b.len() != 4 {
                    return Err(perr("trg_bndbox"));
                }
                Some(BBox {
                    x: b[0],
                    y: b[1],
                    w: b[2] - b[0],
                    h: b[3] - b[1],
                })
            }
            None => None,
        };
        let img_dir = PathBuf::from("JPEGImages").join(&category);
        let (image_a, image_b) = (img_dir.join(s("src_imname")?), img_dir.join(s("trg_imname")?));
        let (size_a, size_b) = (size("src_imsize")?, size("trg_imsize")?);
        pairs.push(MatchPair {
            id,
            image_a,
            image_b,
            category,
            keypoints_a,
            keypoints_b,
            bbox_b,
            size_a,
            size_b,
        });
    }
    DatasetSplit {
        name: split,
        source: SourceKind::Spair71k,
        root: root.to_path_buf(),
        pairs,
    }
    .finish()
}

const PASCAL_CLASSES: [&str; 20] = [
    "aeroplane",
    "bicycle",
    "bird",
    "boat",
    "bottle",
    "bus",
    "car",
    "cat",
    "chair",
    "cow",
    "diningtable",
    "dog",
    "horse",
    "motorbike",
    "person",
    "pottedplant",
    "sheep",
    "sofa",
    "train",
    "tvmonitor",
];

fn find_pair_list(root: &Path, candidates: &[String]) -> Result<PathBuf> {
    candidates
        .iter()
        .map(|c| root.join(c))
        .find(|p| p.is_file())
        .ok_or_else(|| Error::Ingestion {
            path: root.join(&candidates[0]),
            reason: format!("pair list not found (looked for {})", candidates.join(", ")),
        })
}

fn parse_coords(s: &str) -> Option<Vec<f64>> {
    s.split(';')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().ok())
        .collect()
}

/// Reads a PF-style pair list. Coordinates come either as `XA,YA,XB,YB`
/// columns holding `;`-separated lists, or as numbered columns `XA1..XAn`.
fn load_pf_csv(
    root: &Path,
    list: &Path,
    split: SplitName,
    source: SourceKind,
    category_of: impl Fn(&csv::StringRecord, &csv::StringRecord, &str) -> String,
) -> Result<DatasetSplit> {
    let mut rdr = csv::Reader::from_path(list).map_err(|e| Error::Ingestion {
        path: list.to_path_buf(),
        reason: e.to_string(),
    })?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            context: list.display().to_string(),
            reason: e.to_string(),
        })?
        .clone();
    let col = |names: &[&str]| names.iter().find_map(|n| headers.iter().position(|h| h.trim() == *n));
    let col_a = col(&["source_image", "imageA"]).ok_or_else(|| Error::Parse {
        context: list.display().to_string(),
        reason: "no source image column".into(),
    })?;
    let col_b = col(&["target_image", "imageB"]).ok_or_else(|| Error::Parse {
        context: list.display().to_string(),
        reason: "no target image column".into(),
    })?;
    let numbered = |prefix: &str| -> Vec<usize> {
        let mut v: Vec<(usize, usize)> = headers
            .iter()
            .enumerate()
            .filter_map(|(i, h)| h.trim().strip_prefix(prefix)?.parse::<usize>().ok().map(|k| (k, i)))
            .collect();
        v.sort();
        v.into_iter().map(|(_, i)| i).collect()
    };
    let mut pairs = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let id = format!("{:05}", row);
        let rec = rec.map_err(|e| Error::Parse {
            context: format!("{} row {}", list.display(), row + 2),
            reason: e.to_string(),
        })?;
        let perr = |what: &str| Error::Parse {
            context: format!("{} row {}", list.display(), row + 2),
            reason: format!("malformed `{what}`"),
        };
        let get = |k: &str| -> Result<Vec<f64>> {
            if let Some(i) = col(&[k]) {
                return parse_coords(rec.get(i).unwrap_or("")).ok_or_else(|| perr(k));
            }
            let cols = numbered(k);
            if cols.is_empty() {
                return Err(perr(k));
            }
            cols.iter()
                .map(|&i| rec.get(i).and_then(|s| s.trim().parse().ok()).ok_or_else(|| perr(k)))
                .collect()
        };
        let (xa, ya, xb, yb) = (get("XA")?, get("YA")?, get("XB")?, get("YB")?);
        let n = xa.len();
        if ya.len() != n || xb.len() != n || yb.len() != n {
            return Err(perr("coordinate list lengths"));
        }
        let pt = |x: f64, y: f64| (x >= 0.0 && y >= 0.0).then_some(Keypoint::new(x, y));
        let (keypoints_a, keypoints_b) = mutual(
            (0..n).map(|i| pt(xa[i], ya[i])).collect(),
            (0..n).map(|i| pt(xb[i], yb[i])).collect(),
        );
        if keypoints_a.is_empty() {
            warn!(
                "skipping pair {id} of {}: no mutually visible keypoints",
                list.display()
            );
            continue;
        }
        let image_a = PathBuf::from(rec.get(col_a).unwrap_or("").trim());
        let image_b = PathBuf::from(rec.get(col_b).unwrap_or("").trim());
        let dims = |rel: &Path| -> Result<ImageSize> {
            let path = root.join(rel);
            let (w, h) = image::image_dimensions(&path).map_err(|e| Error::Ingestion {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            Ok(ImageSize::new(w as f64, h as f64))
        };
        pairs.push(MatchPair {
            category: category_of(&headers, &rec, &image_a.to_string_lossy()),
            size_a: dims(&image_a)?,
            size_b: dims(&image_b)?,
            id,
            image_a,
            image_b,
            keypoints_a,
            keypoints_b,
            bbox_b: None,
        });
    }
    DatasetSplit {
        name: split,
        source,
        root: root.to_path_buf(),
        pairs,
    }
    .finish()
}

/// Loads PF-Pascal from `root/<split>_pairs[_pf_pascal].csv`; image paths
/// in the list are relative to `root`.
pub fn load_pf_pascal(root: &Path, split: SplitName) -> Result<DatasetSplit> {
    let names = match split {
        SplitName::Train => ["trn", "train"],
        SplitName::Validation => ["val", "validation"],
        SplitName::Test => ["test", "test"],
    };
    let candidates: Vec<String> = names
        .iter()
        .flat_map(|n| [format!("{n}_pairs_pf_pascal.csv"), format!("{n}_pairs.csv")])
        .collect();
    let list = find_pair_list(root, &candidates)?;
    load_pf_csv(root, &list, split, SourceKind::PfPascal, |headers, rec, _| {
        let raw = headers
            .iter()
            .position(|h| h.trim() == "class")
            .and_then(|i| rec.get(i))
            .unwrap_or("")
            .trim()
            .to_string();
        match raw.parse::<usize>() {
            Ok(k) if (1..=20).contains(&k) => PASCAL_CLASSES[k - 1].to_string(),
            _ => raw,
        }
    })
}

/// Loads the PF-Willow test list; the category is the image's parent
/// directory name.
pub fn load_pf_willow(root: &Path) -> Result<DatasetSplit> {
    let candidates = vec!["test_pairs_pf_willow.csv".to_string(), "test_pairs.csv".to_string()];
    let list = find_pair_list(root, &candidates)?;
    load_pf_csv(root, &list, SplitName::Test, SourceKind::PfWillow, |_, _, image_a| {
        Path::new(image_a)
            .parent()
            .and_then(Path::file_name)
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "unknown".into())
    })
}

pub const CANONICAL_FORMAT: &str = "diffmatch-pairs";
pub const CANONICAL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CanonicalHeader {
    format: String,
    version: u32,
    name: SplitName,
    source: SourceKind,
}

const RECORD_FIELDS: [&str; 9] = [
    "id",
    "image_a",
    "image_b",
    "category",
    "keypoints_a",
    "keypoints_b",
    "bbox_b",
    "size_a",
    "size_b",
];

/// Writes a header line followed by one JSON record per pair.
pub fn write_canonical(split: &DatasetSplit, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    let header = CanonicalHeader {
        format: CANONICAL_FORMAT.into(),
        version: CANONICAL_VERSION,
        name: split.name,
        source: split.source,
    };
    let json = |e: serde_json::Error| Error::Parse {
        context: path.display().to_string(),
        reason: e.to_string(),
    };
    writeln!(out, "{}", serde_json::to_string(&header).map_err(json)?)?;
    for p in &split.pairs {
        writeln!(out, "{}", serde_json::to_string(p).map_err(json)?)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a canonical split; image paths resolve against the file's directory.
pub fn read_canonical(path: &Path) -> Result<DatasetSplit> {
    let file = fs::File::open(path).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let ctx = |line: usize| format!("{} line {line}", path.display());
    let mut lines = BufReader::new(file).lines();
    let header_line = lines.next().transpose()?.ok_or_else(|| Error::Parse {
        context: ctx(1),
        reason: "empty file".into(),
    })?;
    let header: Value = serde_json::from_str(&header_line).map_err(|e| Error::Parse {
        context: ctx(1),
        reason: e.to_string(),
    })?;
    if header.get("format").and_then(Value::as_str) != Some(CANONICAL_FORMAT) {
        return Err(Error::Parse {
            context: ctx(1),
            reason: format!("not a `{CANONICAL_FORMAT}` file"),
        });
    }
    let version = header.get("version").cloned().unwrap_or(Value::Null);
    if version.as_u64() != Some(CANONICAL_VERSION as u64) {
        return Err(Error::Version {
            expected: CANONICAL_VERSION,
            found: version.to_string(),
        });
    }
    let header: CanonicalHeader = serde_json::from_value(header).map_err(|e| Error::Parse {
        context: ctx(1),
        reason: e.to_string(),
    })?;
    let mut pairs = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            context: ctx(lineno),
            reason: e.to_string(),
        })?;
        if let Some(obj) = value.as_object() {
            for key in obj.keys().filter(|k| !RECORD_FIELDS.contains(&k.as_str())) {
                warn!("{}: ignoring unknown field `{key}`", ctx(lineno));
            }
        }
        let pair: MatchPair = serde_json::from_value(value).map_err(|e| Error::Parse {
            context: ctx(lineno),
            reason: e.to_string(),
        })?;
        pairs.push(pair);
    }
    DatasetSplit {
        name: header.name,
        source: header.source,
        root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        pairs,
    }
    .finish()
}
