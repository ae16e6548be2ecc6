//! Per-instance uncertainty statistics.
//!
//! Standard deviations are population deviations: a cluster is the whole
//! MC sample of its instance, not a subsample of it.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::clustering::InstanceCluster;
use crate::error::{Error, Result};
use crate::kde::{kde, KdeCurve, DEFAULT_GRID_SIZE};
use crate::model::{box_iou, mask_iou, rle_from_spans, BBox, RleMask};

pub const DEFAULT_MASK_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub mean_box: BBox,
    /// Standard deviation of x1, y1, x2, y2.
    pub edge_std: [f64; 4],
    pub centers: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub mean_scores: Vec<f64>,
    pub std_scores: Vec<f64>,
    /// Class indices (background included) by descending mean score.
    pub top_classes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskStats {
    pub height: u32,
    pub width: u32,
    pub threshold: f64,
    /// Row-major per-pixel foreground frequency.
    #[serde(skip)]
    pub mean_mask: Vec<f64>,
    #[serde(skip)]
    pub std_mask: Vec<f64>,
    pub consensus_mask: RleMask,
    pub zero_mask: bool,
    pub coverage_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub cluster_id: usize,
    pub n_members: usize,
    pub split_refused: bool,
    pub box_stats: BoxStats,
    pub class_stats: ClassStats,
    pub mask_stats: MaskStats,
    pub box_iou_samples: Vec<f64>,
    pub mask_iou_samples: Vec<f64>,
    /// `None` when the samples are degenerate (fewer than two, or no
    /// spread); render those as a point mass.
    pub box_kde: Option<KdeCurve>,
    pub mask_kde: Option<KdeCurve>,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn box_stats(c: &InstanceCluster) -> Result<BoxStats> {
    if c.is_empty() {
        return Err(Error::EmptyCluster);
    }
    let mut mean = [0.0; 4];
    let mut std = [0.0; 4];
    for j in 0..4 {
        let (m, s) = mean_std(c.members.iter().map(move |d| d.bbox.to_array()[j]));
        mean[j] = m;
        std[j] = s;
    }
    Ok(BoxStats {
        mean_box: BBox::from_array(mean)?,
        edge_std: std,
        centers: c.members.iter().map(|d| d.bbox.center()).collect(),
    })
}

pub fn class_stats(c: &InstanceCluster) -> Result<ClassStats> {
    let first = c.members.first().ok_or(Error::EmptyCluster)?;
    let k = first.scores.len();
    if c.members.iter().any(|d| d.scores.len() != k) {
        return Err(Error::InvalidScores(
            "score vectors of different lengths in one cluster".into(),
        ));
    }
    let (mean_scores, std_scores): (Vec<f64>, Vec<f64>) = (0..k)
        .map(|j| mean_std(c.members.iter().map(move |d| d.scores.as_slice()[j])))
        .unzip();
    let mean_scores: Vec<f64> = mean_scores.into_iter().map(|m| m.clamp(0.0, 1.0)).collect();
    let mut top_classes: Vec<usize> = (0..k).collect();
    top_classes.sort_by(|&a, &b| mean_scores[b].total_cmp(&mean_scores[a]).then(a.cmp(&b)));
    Ok(ClassStats {
        mean_scores,
        std_scores,
        top_classes,
    })
}

/// Pixelwise mask statistics over the mask-carrying members of a cluster.
pub fn mask_stats(
    c: &InstanceCluster,
    height: u32,
    width: u32,
    threshold: f64,
) -> Result<MaskStats> {
    let n_px = height as usize * width as usize;
    // difference array over the flattened grid: +1 at run start, -1 at end
    let mut diff = vec![0i64; n_px + 1];
    let mut coverage = 0usize;
    for m in c.members.iter().filter_map(|d| d.mask.as_ref()) {
        if m.height() != height || m.width() != width {
            return Err(Error::MaskDimMismatch(m.height(), m.width(), height, width));
        }
        coverage += 1;
        for (s, e) in m.foreground_spans() {
            diff[s] += 1;
            diff[e] -= 1;
        }
    }
    let mut mean_mask = vec![0.0; n_px];
    let mut std_mask = vec![0.0; n_px];
    let mut spans: Vec<(usize, usize)> = Vec::new();
    if coverage > 0 {
        let total = coverage as f64;
        let mut count = 0i64;
        for i in 0..n_px {
            count += diff[i];
            let mean = count as f64 / total;
            // binary values: E[x^2] == E[x]
            let var = (mean - mean * mean).max(0.0);
            mean_mask[i] = mean;
            std_mask[i] = var.sqrt();
            if mean >= threshold && count > 0 {
                match spans.last_mut() {
                    Some(last) if last.1 == i => last.1 = i + 1,
                    _ => spans.push((i, i + 1)),
                }
            }
        }
    }
    let consensus_mask = rle_from_spans(height, width, &spans)?;
    Ok(MaskStats {
        height,
        width,
        threshold,
        zero_mask: coverage == 0 || !consensus_mask.has_foreground(),
        mean_mask,
        std_mask,
        consensus_mask,
        coverage_count: coverage,
    })
}

/// IoU of every member against the cluster reference: the mean box for
/// boxes, the consensus mask for masks. Zero-mask clusters yield no mask
/// samples.
pub fn iou_to_mean(
    c: &InstanceCluster,
    boxes: &BoxStats,
    masks: &MaskStats,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let box_samples = c
        .members
        .iter()
        .map(|d| box_iou(&d.bbox, &boxes.mean_box))
        .collect();
    let mask_samples = if masks.zero_mask {
        Vec::new()
    } else {
        c.members
            .iter()
            .filter_map(|d| d.mask.as_ref())
            .map(|m| mask_iou(m, &masks.consensus_mask))
            .collect::<Result<_>>()?
    };
    Ok((box_samples, mask_samples))
}

fn kde_or_none(samples: &[f64]) -> Result<Option<KdeCurve>> {
    match kde(samples, DEFAULT_GRID_SIZE) {
        Ok(c) => Ok(Some(c)),
        Err(Error::DegenerateSample(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn build_report(
    c: &InstanceCluster,
    height: u32,
    width: u32,
    mask_threshold: f64,
) -> Result<ClusterReport> {
    let box_stats = box_stats(c)?;
    let class_stats = class_stats(c)?;
    let mask_stats = mask_stats(c, height, width, mask_threshold)?;
    let (box_iou_samples, mask_iou_samples) = iou_to_mean(c, &box_stats, &mask_stats)?;
    Ok(ClusterReport {
        cluster_id: c.cluster_id,
        n_members: c.len(),
        split_refused: c.split_refused,
        box_kde: kde_or_none(&box_iou_samples)?,
        mask_kde: kde_or_none(&mask_iou_samples)?,
        box_stats,
        class_stats,
        mask_stats,
        box_iou_samples,
        mask_iou_samples,
    })
}

/// Writes a binary (P5) 8-bit PGM. Each value is mapped with
/// `round(255 * value / full_scale)`, clamped to `[0, 255]`.
pub fn write_pgm(
    values: &[f64],
    height: u32,
    width: u32,
    full_scale: f64,
    mut out: impl Write,
) -> Result<()> {
    if values.len() != height as usize * width as usize {
        return Err(Error::Config("heatmap size does not match dimensions".into()));
    }
    write!(out, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = values
        .iter()
        .map(|v| (255.0 * v / full_scale).round().clamp(0.0, 255.0) as u8)
        .collect();
    out.write_all(&bytes)?;
    Ok(())
}
