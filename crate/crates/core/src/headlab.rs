//! TG-Head discovery from single-head knockout sweeps: grounding
//! contribution scores, top-K selection, sorted-drop curves and the
//! in-interval attention ratio.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::dump::{FrameInterval, HeadId};
use crate::error::{Error, Result};

/// Default size of the held-out calibration subset used for a sweep.
pub const DEFAULT_CALIBRATION_SAMPLES: usize = 500;

/// mIoU (percentage points) measured with one head knocked out.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnockoutResult {
    pub layer: u32,
    pub head: u32,
    pub miou: f64,
}

impl KnockoutResult {
    pub fn head_id(&self) -> HeadId {
        HeadId::new(self.layer, self.head)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GcsEntry {
    pub head: HeadId,
    pub gcs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcsTable {
    pub baseline_miou: f64,
    pub entries: Vec<GcsEntry>,
}

/// GCS = baseline mIoU − knockout mIoU for each head, input order kept.
pub fn compute_gcs(baseline_miou: f64, results: &[KnockoutResult]) -> Result<GcsTable> {
    if results.is_empty() {
        return Err(Error::validation("results", "no knockout results"));
    }
    let mut seen = HashSet::new();
    let mut entries = Vec::with_capacity(results.len());
    for r in results {
        let id = r.head_id();
        if !seen.insert(id) {
            return Err(Error::validation("results", format!("duplicate head {id}")));
        }
        entries.push(GcsEntry { head: id, gcs: baseline_miou - r.miou });
    }
    Ok(GcsTable { baseline_miou, entries })
}

fn ranked(table: &GcsTable) -> Vec<GcsEntry> {
    let mut sorted = table.entries.clone();
    sorted.sort_by(|a, b| b.gcs.total_cmp(&a.gcs).then(a.head.cmp(&b.head)));
    sorted
}

/// The `k` heads with the largest GCS, by descending GCS then ascending `(layer, head)`.
pub fn select_top_k(table: &GcsTable, k: usize) -> Result<Vec<HeadId>> {
    if k == 0 || k > table.entries.len() {
        return Err(Error::validation(
            "k",
            format!("k = {k} must lie in [1, {}]", table.entries.len()),
        ));
    }
    Ok(ranked(table).into_iter().take(k).map(|e| e.head).collect())
}

/// GCS values sorted descending with 1-based ranks.
pub fn sorted_drop_curve(table: &GcsTable) -> Vec<(usize, f64)> {
    ranked(table).into_iter().enumerate().map(|(i, e)| (i + 1, e.gcs)).collect()
}

/// Share of the curve's mass inside `gt`.
pub fn attention_ratio(curve: &[f64], gt: FrameInterval) -> Result<f64> {
    let total: f64 = curve.iter().sum();
    if !(total > 0.0) {
        return Err(Error::UndefinedRatio);
    }
    if gt.first == 0 || gt.last > curve.len() || gt.first > gt.last {
        return Err(Error::validation("gt", format!("[{}, {}] outside [1, {}]", gt.first, gt.last, curve.len())));
    }
    Ok(curve[gt.index_range()].iter().sum::<f64>() / total)
}

/// `|gt| / T`, the ratio a uniform curve would reach.
pub fn random_baseline_ratio(gt: FrameInterval, num_frames: usize) -> f64 {
    gt.len() as f64 / num_frames as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepHeader {
    pub baseline_miou: f64,
    pub grid: [u32; 2],
    pub calibration_samples: usize,
}

/// A knockout sweep: one header line then one result per head (JSON lines).
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub header: SweepHeader,
    pub results: Vec<KnockoutResult>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ResultLine {
    layer: u32,
    head: u32,
    miou: f64,
}

impl Sweep {
    pub fn gcs_table(&self) -> Result<GcsTable> {
        compute_gcs(self.header.baseline_miou, &self.results)
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut header = None;
        let mut results = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let lineno = n + 1;
            if header.is_none() {
                let h: SweepHeader = serde_json::from_str(line)
                    .map_err(|e| Error::validation("sweep", format!("line {lineno}: bad header: {e}")))?;
                if !(h.baseline_miou > 1.0) {
                    log::warn!(
                        "sweep baseline_miou = {} looks fractional; mIoU is expected in percentage points",
                        h.baseline_miou
                    );
                }
                header = Some(h);
                continue;
            }
            let r: ResultLine = serde_json::from_str(line)
                .map_err(|e| Error::validation("sweep", format!("line {lineno}: bad result: {e}")))?;
            results.push(KnockoutResult { layer: r.layer, head: r.head, miou: r.miou });
        }
        let header = header.ok_or_else(|| Error::validation("sweep", "empty sweep file"))?;
        for r in &results {
            if r.layer >= header.grid[0] || r.head >= header.grid[1] {
                return Err(Error::validation(
                    "sweep",
                    format!("head {} outside grid [{}, {}]", r.head_id(), header.grid[0], header.grid[1]),
                ));
            }
            if !r.miou.is_finite() {
                return Err(Error::validation("sweep", format!("head {}: non-finite mIoU", r.head_id())));
            }
        }
        let mut seen = HashSet::new();
        if let Some(dup) = results.iter().find(|r| !seen.insert(r.head_id())) {
            return Err(Error::validation("sweep", format!("duplicate head {}", dup.head_id())));
        }
        Ok(Self { header, results })
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer(&mut out, &self.header)?;
        out.write_all(b"\n")?;
        for r in &self.results {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(layer: u32, head: u32, miou: f64) -> KnockoutResult {
        KnockoutResult { layer, head, miou }
    }

    #[test]
    fn gcs_examples() {
        let t = compute_gcs(50.0, &[r(0, 0, 46.0), r(0, 1, 50.0), r(0, 2, 51.0)]).unwrap();
        let g: Vec<f64> = t.entries.iter().map(|e| e.gcs).collect();
        assert_eq!(g, vec![4.0, 0.0, -1.0]);
        assert!(compute_gcs(50.0, &[r(0, 0, 1.0), r(0, 0, 2.0)]).is_err());
        assert!(compute_gcs(50.0, &[]).is_err());
    }

    #[test]
    fn top_k_examples() {
        let t = compute_gcs(10.0, &[r(0, 0, 6.0), r(0, 1, 9.9), r(0, 2, 8.0)]).unwrap();
        assert_eq!(select_top_k(&t, 2).unwrap(), vec![HeadId::new(0, 0), HeadId::new(0, 2)]);
        assert_eq!(select_top_k(&t, 3).unwrap().len(), 3);
        assert!(select_top_k(&t, 4).is_err());
        assert!(select_top_k(&t, 0).is_err());

        let tie = compute_gcs(10.0, &[r(3, 1, 5.0), r(2, 7, 5.0), r(9, 9, 9.0)]).unwrap();
        assert_eq!(select_top_k(&tie, 1).unwrap(), vec![HeadId::new(2, 7)]);
    }

    #[test]
    fn drop_curve_examples() {
        let t = compute_gcs(0.0, &[r(0, 0, -4.0)]).unwrap();
        assert_eq!(sorted_drop_curve(&t), vec![(1, 4.0)]);
        let t = compute_gcs(0.0, &[r(0, 0, -4.0), r(0, 1, 0.5), r(0, 2, 0.0)]).unwrap();
        assert_eq!(sorted_drop_curve(&t), vec![(1, 4.0), (2, 0.0), (3, -0.5)]);
    }

    #[test]
    fn ratio_examples() {
        let gt = FrameInterval { first: 1, last: 4 };
        assert_eq!(attention_ratio(&[0.1, 0.2, 0.3, 0.4], gt).unwrap(), 1.0);
        assert_eq!(attention_ratio(&[1.0; 4], FrameInterval { first: 1, last: 2 }).unwrap(), 0.5);
        assert_eq!(random_baseline_ratio(FrameInterval { first: 1, last: 2 }, 4), 0.5);
        assert_eq!(attention_ratio(&[1.0, 3.0, 0.0, 0.0], FrameInterval { first: 2, last: 2 }).unwrap(), 0.75);
        assert!(matches!(attention_ratio(&[0.0; 4], gt), Err(Error::UndefinedRatio)));
    }

    #[test]
    fn sweep_io() {
        let text = "{\"baseline_miou\": 52.0, \"grid\": [2, 2], \"calibration_samples\": 500}\n\
                    {\"layer\": 0, \"head\": 0, \"miou\": 51.5}\n\
                    {\"layer\": 1, \"head\": 1, \"miou\": 40.0}\n";
        let s = Sweep::read(text.as_bytes()).unwrap();
        assert_eq!(s.results.len(), 2);
        assert_eq!(select_top_k(&s.gcs_table().unwrap(), 1).unwrap(), vec![HeadId::new(1, 1)]);

        let mut out = Vec::new();
        s.write(&mut out).unwrap();
        assert_eq!(Sweep::read(out.as_slice()).unwrap(), s);

        let outside = "{\"baseline_miou\": 52.0, \"grid\": [2, 2], \"calibration_samples\": 500}\n{\"layer\": 2, \"head\": 0, \"miou\": 1}\n";
        assert!(Sweep::read(outside.as_bytes()).is_err());
        assert!(Sweep::read("".as_bytes()).is_err());
        assert!(Sweep::read("{\"layer\": 0}\n".as_bytes()).is_err());
    }
}
