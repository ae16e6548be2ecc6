//! Mean average precision at a single IoU threshold, for boxes or masks.
//!
//! Matching is greedy per image and class: predictions in descending
//! confidence (ties keep input order) each take the unmatched ground truth
//! with the highest IoU at or above the threshold. AP is the 101-point
//! interpolated area under the precision/recall curve. Classes without
//! ground truth do not enter the mean.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{box_iou, mask_iou, BBox, RleMask};
use crate::report::ClusterReport;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
const RECALL_POINTS: usize = 101;

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthInstance {
    pub image_id: String,
    pub bbox: BBox,
    pub class_id: usize,
    pub mask: Option<RleMask>,
}

impl GroundTruthInstance {
    pub fn new(image_id: String, bbox: BBox, class_id: usize, mask: Option<RleMask>) -> Result<Self> {
        if class_id == 0 {
            return Err(Error::Config("ground-truth class must be a foreground class".into()));
        }
        Ok(Self {
            image_id,
            bbox,
            class_id,
            mask,
        })
    }
}

/// A cluster reduced to one detection for scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalDetection {
    pub image_id: String,
    pub bbox: BBox,
    pub class_id: usize,
    pub confidence: f64,
    pub mask: Option<RleMask>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Box,
    Mask,
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalMode::Box => "box",
            EvalMode::Mask => "mask",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub ap: f64,
    pub n_gt: usize,
    pub n_pred: usize,
    pub true_positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchRecord {
    pub pred_index: usize,
    pub gt_index: Option<usize>,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeEval {
    pub mode: EvalMode,
    pub per_class: Vec<ClassAp>,
    /// `None` when there is no ground truth at all.
    pub map50: Option<f64>,
    pub matches: Vec<MatchRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    pub box_eval: ModeEval,
    pub mask_eval: ModeEval,
}

impl EvalResult {
    pub fn map50_box(&self) -> Option<f64> {
        self.box_eval.map50
    }
    pub fn map50_mask(&self) -> Option<f64> {
        self.mask_eval.map50
    }
}

/// Box = mean box, class = best foreground class by mean score, confidence
/// = that mean score, mask = consensus mask unless the cluster is a zero
/// mask.
pub fn cluster_to_detection(image_id: &str, r: &ClusterReport) -> Result<EvalDetection> {
    let scores = &r.class_stats.mean_scores;
    if scores.len() < 2 {
        return Err(Error::InvalidScores("no foreground class".into()));
    }
    let class_id = 1 + crate::model::argmax(&scores[1..]);
    Ok(EvalDetection {
        image_id: image_id.to_string(),
        bbox: r.box_stats.mean_box,
        class_id,
        confidence: scores[class_id],
        mask: (!r.mask_stats.zero_mask).then(|| r.mask_stats.consensus_mask.clone()),
    })
}

fn pair_iou(p: &EvalDetection, g: &GroundTruthInstance, mode: EvalMode) -> Result<f64> {
    match mode {
        EvalMode::Box => Ok(box_iou(&p.bbox, &g.bbox)),
        // a missing mask on either side can never match
        EvalMode::Mask => match (&p.mask, &g.mask) {
            (Some(a), Some(b)) => mask_iou(a, b),
            _ => Ok(0.0),
        },
    }
}

/// 101-point interpolated average precision from per-prediction hit flags
/// in descending-confidence order.
pub fn interpolated_ap(hits: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 || hits.is_empty() {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let total: f64 = (0..RECALL_POINTS)
        .map(|r| {
            let t = r as f64 / (RECALL_POINTS - 1) as f64;
            let idx = recall.partition_point(|&x| x < t);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .sum();
    total / RECALL_POINTS as f64
}

pub fn match_and_score(
    preds: &[EvalDetection],
    gts: &[GroundTruthInstance],
    iou_threshold: f64,
    mode: EvalMode,
) -> Result<ModeEval> {
    let classes: BTreeSet<usize> = gts.iter().map(|g| g.class_id).collect();
    let mut matches = Vec::new();
    let mut per_class = Vec::new();
    for &class in &classes {
        let mut images: BTreeMap<&str, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
        for (i, p) in preds.iter().enumerate().filter(|(_, p)| p.class_id == class) {
            images.entry(&p.image_id).or_default().0.push(i);
        }
        for (i, g) in gts.iter().enumerate().filter(|(_, g)| g.class_id == class) {
            images.entry(&g.image_id).or_default().1.push(i);
        }
        // (pred index, hit)
        let mut outcomes: Vec<(usize, bool)> = Vec::new();
        for (pred_idx, gt_idx) in images.values() {
            let mut order = pred_idx.clone();
            order.sort_by(|&a, &b| preds[b].confidence.total_cmp(&preds[a].confidence).then(a.cmp(&b)));
            let mut taken = vec![false; gt_idx.len()];
            for &pi in &order {
                let mut best: Option<(usize, f64)> = None;
                for (slot, &gi) in gt_idx.iter().enumerate() {
                    if taken[slot] {
                        continue;
                    }
                    let iou = pair_iou(&preds[pi], &gts[gi], mode)?;
                    if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                        best = Some((slot, iou));
                    }
                }
                if let Some((slot, _)) = best {
                    taken[slot] = true;
                }
                matches.push(MatchRecord {
                    pred_index: pi,
                    gt_index: best.map(|(s, _)| gt_idx[s]),
                    iou: best.map_or(0.0, |(_, v)| v),
                });
                outcomes.push((pi, best.is_some()));
            }
        }
        outcomes.sort_by(|a, b| {
            preds[b.0]
                .confidence
                .total_cmp(&preds[a.0].confidence)
                .then(a.0.cmp(&b.0))
        });
        let hits: Vec<bool> = outcomes.iter().map(|o| o.1).collect();
        let n_gt = gts.iter().filter(|g| g.class_id == class).count();
        per_class.push(ClassAp {
            class_id: class,
            ap: interpolated_ap(&hits, n_gt),
            n_gt,
            n_pred: hits.len(),
            true_positives: hits.iter().filter(|&&h| h).count(),
        });
    }
    matches.sort_by_key(|m| m.pred_index);
    let map50 = (!per_class.is_empty())
        .then(|| per_class.iter().map(|c| c.ap).sum::<f64>() / per_class.len() as f64);
    Ok(ModeEval {
        mode,
        per_class,
        map50,
        matches,
    })
}

pub fn evaluate(
    preds: &[EvalDetection],
    gts: &[GroundTruthInstance],
    iou_threshold: f64,
) -> Result<EvalResult> {
    Ok(EvalResult {
        box_eval: match_and_score(preds, gts, iou_threshold, EvalMode::Box)?,
        mask_eval: match_and_score(preds, gts, iou_threshold, EvalMode::Mask)?,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroundTruthRecord {
    image_id: String,
    bbox: [f64; 4],
    class_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask_runs: Option<Vec<u32>>,
}

/// Reads a line-delimited ground-truth file. `dims` supplies the image size
/// for records that carry a mask.
pub fn parse_ground_truth(
    input: impl BufRead,
    dims: impl Fn(&str) -> Option<(u32, u32)>,
) -> Result<Vec<GroundTruthInstance>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |e: &dyn std::fmt::Display| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        };
        let rec: GroundTruthRecord = serde_json::from_str(&line).map_err(|e| err(&e))?;
        let bbox = BBox::from_array(rec.bbox).map_err(|e| err(&e))?;
        let mask = match rec.mask_runs {
            None => None,
            Some(runs) => {
                let (h, w) = dims(&rec.image_id)
                    .ok_or_else(|| err(&format!("unknown image {}", rec.image_id)))?;
                Some(RleMask::new(h, w, runs).map_err(|e| err(&e))?)
            }
        };
        out.push(GroundTruthInstance::new(rec.image_id, bbox, rec.class_id, mask).map_err(|e| err(&e))?);
    }
    Ok(out)
}

pub fn write_ground_truth(gts: &[GroundTruthInstance], mut out: impl Write) -> Result<()> {
    for g in gts {
        let rec = GroundTruthRecord {
            image_id: g.image_id.clone(),
            bbox: g.bbox.to_array(),
            class_id: g.class_id,
            mask_runs: g.mask.as_ref().map(|m| m.runs().to_vec()),
        };
        serde_json::to_writer(&mut out, &rec).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// CSV with one row per class and a trailing `mAP` summary row.
pub fn write_eval_csv(e: &ModeEval, mut out: impl Write) -> Result<()> {
    writeln!(out, "mode,class_id,ap,n_gt,n_pred,true_positives")?;
    for c in &e.per_class {
        writeln!(
            out,
            "{},{},{:.6},{},{},{}",
            e.mode, c.class_id, c.ap, c.n_gt, c.n_pred, c.true_positives
        )?;
    }
    match e.map50 {
        Some(m) => writeln!(out, "{},mAP,{:.6},,,", e.mode, m)?,
        None => writeln!(out, "{},mAP,,,,", e.mode)?,
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::rasterize_box;
    use proptest::prelude::*;

    fn bx(x: f64) -> BBox {
        BBox::new(x, 0.0, x + 10.0, 10.0).unwrap()
    }

    fn gt(x: f64, class: usize) -> GroundTruthInstance {
        GroundTruthInstance::new("im".into(), bx(x), class, None).unwrap()
    }

    fn pred(x: f64, class: usize, conf: f64) -> EvalDetection {
        EvalDetection {
            image_id: "im".into(),
            bbox: bx(x),
            class_id: class,
            confidence: conf,
            mask: None,
        }
    }

    /// Interpolated precision straight from the definition: for each recall
    /// level, the best precision among operating points reaching it.
    fn ap_oracle(points: &[(f64, f64)]) -> f64 {
        (0..=100)
            .map(|r| {
                let t = r as f64 / 100.0;
                points
                    .iter()
                    .filter(|(_, rec)| *rec >= t)
                    .map(|(p, _)| *p)
                    .fold(0.0, f64::max)
            })
            .sum::<f64>()
            / 101.0
    }

    #[test]
    fn perfect_predictions() {
        let gts = vec![gt(0.0, 1), gt(50.0, 2), gt(100.0, 1)];
        let preds: Vec<_> = gts.iter().map(|g| pred(g.bbox.x1(), g.class_id, 1.0)).collect();
        let r = match_and_score(&preds, &gts, 0.5, EvalMode::Box).unwrap();
        assert_eq!(r.map50, Some(1.0));
    }

    #[test]
    fn no_overlap_scores_zero() {
        let gts = vec![gt(0.0, 1)];
        let preds = vec![pred(8.0, 1, 0.9)];
        let r = match_and_score(&preds, &gts, 0.5, EvalMode::Box).unwrap();
        assert_eq!(r.map50, Some(0.0));
        assert_eq!(r.matches[0].gt_index, None);
    }

    #[test]
    fn three_preds_two_gts() {
        let gts = vec![gt(0.0, 1), gt(100.0, 1)];
        let preds = vec![pred(0.0, 1, 0.9), pred(300.0, 1, 0.6), pred(100.0, 1, 0.3)];
        let r = match_and_score(&preds, &gts, 0.5, EvalMode::Box).unwrap();
        // operating points as (precision, recall)
        let oracle = ap_oracle(&[(1.0, 0.5), (0.5, 0.5), (2.0 / 3.0, 1.0)]);
        assert!((oracle - (51.0 + 50.0 * 2.0 / 3.0) / 101.0).abs() < 1e-12);
        assert!((r.map50.unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn empty_ground_truth_is_absent() {
        let r = match_and_score(&[pred(0.0, 1, 0.5)], &[], 0.5, EvalMode::Box).unwrap();
        assert_eq!(r.map50, None);
    }

    #[test]
    fn unmatched_class_averages_in() {
        let gts = vec![gt(0.0, 1), gt(50.0, 2)];
        let preds = vec![pred(0.0, 1, 0.9)];
        let r = match_and_score(&preds, &gts, 0.5, EvalMode::Box).unwrap();
        assert_eq!(r.per_class[1].ap, 0.0);
        assert_eq!(r.map50, Some(0.5));
    }

    #[test]
    fn mask_mode_matches_box_mode_for_rasterized_boxes() {
        let with_mask = |b: BBox| Some(rasterize_box(&b, 20, 400).unwrap());
        let gts: Vec<_> = [0.0, 40.0, 80.0]
            .iter()
            .map(|&x| GroundTruthInstance { mask: with_mask(bx(x)), ..gt(x, 1) })
            .collect();
        let preds: Vec<_> = [(3.0, 0.9), (40.0, 0.4), (86.0, 0.7), (200.0, 0.8)]
            .iter()
            .map(|&(x, c)| EvalDetection { mask: with_mask(bx(x)), ..pred(x, 1, c) })
            .collect();
        let r = evaluate(&preds, &gts, 0.5).unwrap();
        assert_eq!(r.map50_box(), r.map50_mask());
        assert_eq!(r.box_eval.matches, r.mask_eval.matches);
    }

    #[test]
    fn gt_file_round_trip() {
        let m = RleMask::new(2, 2, vec![1, 3]).unwrap();
        let gts = vec![
            GroundTruthInstance { mask: Some(m), ..gt(0.0, 1) },
            gt(5.0, 3),
        ];
        let mut buf = Vec::new();
        write_ground_truth(&gts, &mut buf).unwrap();
        let back = parse_ground_truth(buf.as_slice(), |_| Some((2, 2))).unwrap();
        assert_eq!(back, gts);
        assert!(parse_ground_truth(buf.as_slice(), |_| None).is_err());
        let bad = br#"{"image_id":"a","bbox":[0,0,1,1],"class_id":0}"#;
        assert!(parse_ground_truth(&bad[..], |_| None).is_err());
    }

    proptest! {
        #[test]
        fn ap_bounded_and_matches_oracle(hits in proptest::collection::vec(any::<bool>(), 0..40), extra in 0usize..5) {
            let n_gt = hits.iter().filter(|&&h| h).count() + extra;
            prop_assume!(n_gt > 0);
            let ap = interpolated_ap(&hits, n_gt);
            prop_assert!((0.0..=1.0).contains(&ap));
            let mut tp = 0;
            let points: Vec<(f64, f64)> = hits.iter().enumerate().map(|(i, &h)| {
                tp += h as usize;
                (tp as f64 / (i + 1) as f64, tp as f64 / n_gt as f64)
            }).collect();
            prop_assert!((ap - ap_oracle(&points)).abs() < 1e-12);
        }

        #[test]
        fn confident_true_positive_never_hurts(hits in proptest::collection::vec(any::<bool>(), 1..30), extra in 1usize..5) {
            let n_gt = hits.iter().filter(|&&h| h).count() + extra;
            let before = interpolated_ap(&hits, n_gt);
            let mut more = vec![true];
            more.extend(&hits);
            prop_assert!(interpolated_ap(&more, n_gt) >= before - 1e-15);
        }
    }
}
