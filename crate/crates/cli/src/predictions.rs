use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use diffmatch::{Keypoint, MatchPair};
use serde::{Deserialize, Serialize};

/// One query keypoint, in original image coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub pair_id: String,
    pub query_index: usize,
    pub query_x: f64,
    pub query_y: f64,
    pub pred_x: f64,
    pub pred_y: f64,
    pub gt_x: f64,
    pub gt_y: f64,
}

pub fn rows_for(pair: &MatchPair, pred: &[Keypoint]) -> Vec<Row> {
    pair.keypoints_a
        .iter()
        .zip(&pair.keypoints_b)
        .zip(pred)
        .enumerate()
        .map(|(i, ((q, gt), p))| Row {
            pair_id: pair.id.clone(),
            query_index: i,
            query_x: q.x,
            query_y: q.y,
            pred_x: p.x,
            pred_y: p.y,
            gt_x: gt.x,
            gt_y: gt.y,
        })
        .collect()
}

pub fn write(path: &Path, rows: &[Row]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Rows grouped by pair id, each group ordered by query index.
pub fn read(path: &Path) -> Result<BTreeMap<String, Vec<Row>>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading predictions {}", path.display()))?;
    let mut out: BTreeMap<String, Vec<Row>> = BTreeMap::new();
    for (i, row) in r.deserialize::<Row>().enumerate() {
        let row = row.with_context(|| format!("{} record {}", path.display(), i + 1))?;
        out.entry(row.pair_id.clone()).or_default().push(row);
    }
    for (id, rows) in &mut out {
        rows.sort_by_key(|r| r.query_index);
        if rows.iter().enumerate().any(|(i, r)| r.query_index != i) {
            bail!(
                "{}: query indices of pair `{id}` are not 0..{}",
                path.display(),
                rows.len()
            );
        }
    }
    Ok(out)
}
