//! Prediction-sample files and the post-processing filters applied to them.
//!
//! A sample file holds one image. The first line is a header record, each
//! following non-blank line one detection:
//!
//! ```text
//! {"image_id":"img-0","height":480,"width":640,"n_repetitions":100,"num_classes":80}
//! {"repetition":0,"bbox":[10.0,12.5,80.0,90.0],"scores":[0.1,0.9],"mask_runs":[6410,70,570]}
//! ```
//!
//! `mask_runs` may be omitted. Unknown fields are rejected.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BBox, Detection, RleMask, SampleSet, ScoreVector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IngestConfig {
    /// Detections whose background score is above this value are dropped.
    pub background_threshold: f64,
    pub clamp_boxes: bool,
    /// Optional legacy rule: drop detections with no foreground score above
    /// this value.
    pub legacy_min_class_score: Option<f64>,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            background_threshold: 0.45,
            clamp_boxes: true,
            legacy_min_class_score: None,
        }
    }
}

impl IngestConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.background_threshold) {
            return Err(Error::Config(format!(
                "background threshold {} outside [0, 1]",
                self.background_threshold
            )));
        }
        if let Some(t) = self.legacy_min_class_score {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("legacy threshold {t} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeaderRecord {
    pub image_id: String,
    pub height: u32,
    pub width: u32,
    pub n_repetitions: u32,
    pub num_classes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub repetition: u32,
    pub bbox: [f64; 4],
    pub scores: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_runs: Option<Vec<u32>>,
}

fn parse_err(line: usize, e: impl std::fmt::Display) -> Error {
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

/// Reads and validates a sample file. Detections come back stably sorted by
/// repetition.
pub fn parse_sample_set(input: impl BufRead, cfg: &IngestConfig) -> Result<SampleSet> {
    cfg.validate()?;
    let mut lines = input.lines().enumerate().map(|(i, l)| (i + 1, l));
    let header: HeaderRecord = loop {
        match lines.next() {
            None => return Err(parse_err(1, "missing header record")),
            Some((n, line)) => {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line).map_err(|e| parse_err(n, e))?;
            }
        }
    };
    if header.height == 0 || header.width == 0 {
        return Err(parse_err(1, "image dimensions must be positive"));
    }
    if header.n_repetitions == 0 {
        return Err(parse_err(1, "n_repetitions must be positive"));
    }
    if header.num_classes == 0 {
        return Err(parse_err(1, "num_classes must be positive"));
    }

    let mut detections = Vec::new();
    for (n, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DetectionRecord = serde_json::from_str(&line).map_err(|e| parse_err(n, e))?;
        detections.push(detection_from_record(rec, &header, cfg).map_err(|e| parse_err(n, e))?);
    }
    detections.sort_by_key(|d| d.repetition);

    let set = SampleSet {
        image_id: header.image_id,
        height: header.height,
        width: header.width,
        n_repetitions: header.n_repetitions,
        num_classes: header.num_classes,
        detections,
    };
    set.validate()?;
    Ok(set)
}

fn detection_from_record(
    rec: DetectionRecord,
    header: &HeaderRecord,
    cfg: &IngestConfig,
) -> Result<Detection> {
    if rec.repetition >= header.n_repetitions {
        return Err(Error::Config(format!(
            "repetition {} >= n_repetitions {}",
            rec.repetition, header.n_repetitions
        )));
    }
    if rec.scores.len() != header.num_classes + 1 {
        return Err(Error::InvalidScores(format!(
            "{} scores, expected {}",
            rec.scores.len(),
            header.num_classes + 1
        )));
    }
    let mut bbox = BBox::from_array(rec.bbox)?;
    if cfg.clamp_boxes {
        bbox = bbox.clamp_to(header.width, header.height)?;
    } else if !bbox.within(header.width, header.height) {
        return Err(Error::Config("box outside image bounds".into()));
    }
    let mask = rec
        .mask_runs
        .map(|runs| RleMask::new(header.height, header.width, runs))
        .transpose()?;
    Ok(Detection {
        bbox,
        scores: ScoreVector::new(rec.scores)?,
        mask,
        repetition: rec.repetition,
    })
}

pub fn write_sample_set(set: &SampleSet, mut out: impl Write) -> Result<()> {
    let header = HeaderRecord {
        image_id: set.image_id.clone(),
        height: set.height,
        width: set.width,
        n_repetitions: set.n_repetitions,
        num_classes: set.num_classes,
    };
    serde_json::to_writer(&mut out, &header).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    for d in &set.detections {
        let rec = DetectionRecord {
            repetition: d.repetition,
            bbox: d.bbox.to_array(),
            scores: d.scores.as_slice().to_vec(),
            mask_runs: d.mask.as_ref().map(|m| m.runs().to_vec()),
        };
        serde_json::to_writer(&mut out, &rec).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Whether a detection survives the background filter: its background
/// score is at most the threshold (and, when enabled, some foreground score
/// exceeds the legacy minimum).
pub fn keeps(d: &Detection, cfg: &IngestConfig) -> bool {
    if d.scores.background() > cfg.background_threshold {
        return false;
    }
    match cfg.legacy_min_class_score {
        Some(t) => d.scores.as_slice()[1..].iter().any(|&s| s > t),
        None => true,
    }
}

/// Drops detections that fail [`keeps`].
pub fn filter_background(set: &SampleSet, cfg: &IngestConfig) -> SampleSet {
    SampleSet {
        detections: set.detections.iter().filter(|d| keeps(d, cfg)).cloned().collect(),
        ..set.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const HEADER: &str =
        r#"{"image_id":"im","height":4,"width":4,"n_repetitions":3,"num_classes":2}"#;

    fn parse(s: &str) -> Result<SampleSet> {
        parse_sample_set(s.as_bytes(), &IngestConfig::default())
    }

    fn det(rep: u32, bg: f64) -> Detection {
        Detection {
            bbox: BBox::new(0.0, 0.0, 2.0, 2.0).unwrap(),
            scores: ScoreVector::new(vec![bg, 1.0 - bg, 0.0]).unwrap(),
            mask: None,
            repetition: rep,
        }
    }

    fn set(dets: Vec<Detection>) -> SampleSet {
        SampleSet {
            image_id: "im".into(),
            height: 4,
            width: 4,
            n_repetitions: 3,
            num_classes: 2,
            detections: dets,
        }
    }

    #[test]
    fn header_only() {
        let s = parse(HEADER).unwrap();
        assert!(s.is_empty());
        assert_eq!(s.n_repetitions, 3);
    }

    #[test]
    fn one_record_per_repetition_sorted() {
        let text = format!(
            "{HEADER}\n\
             {{\"repetition\":2,\"bbox\":[0,0,1,1],\"scores\":[0.1,0.8,0.1]}}\n\
             {{\"repetition\":0,\"bbox\":[0,0,1,1],\"scores\":[0.1,0.8,0.1],\"mask_runs\":[5,1,10]}}\n\
             \n\
             {{\"repetition\":1,\"bbox\":[0,0,9,9],\"scores\":[0.1,0.8,0.1]}}\n"
        );
        let s = parse(&text).unwrap();
        assert_eq!(s.len(), 3);
        let reps: Vec<_> = s.detections.iter().map(|d| d.repetition).collect();
        assert_eq!(reps, vec![0, 1, 2]);
        // clamped to the 4x4 image
        assert_eq!(s.detections[1].bbox.to_array(), [0.0, 0.0, 4.0, 4.0]);
        assert!(s.detections[0].mask.is_some());
    }

    #[test]
    fn bad_mask_names_line() {
        let text = format!(
            "{HEADER}\n\
             {{\"repetition\":0,\"bbox\":[0,0,1,1],\"scores\":[0.1,0.8,0.1]}}\n\
             {{\"repetition\":0,\"bbox\":[0,0,1,1],\"scores\":[0.1,0.8,0.1],\"mask_runs\":[5,1,9]}}\n"
        );
        match parse(&text) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("15"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_records() {
        let cases = [
            // repetition out of range
            r#"{"repetition":3,"bbox":[0,0,1,1],"scores":[0.1,0.8,0.1]}"#,
            // wrong score length
            r#"{"repetition":0,"bbox":[0,0,1,1],"scores":[0.2,0.8]}"#,
            // unknown field
            r#"{"repetition":0,"bbox":[0,0,1,1],"scores":[0.1,0.8,0.1],"extra":1}"#,
            // not a probability vector
            r#"{"repetition":0,"bbox":[0,0,1,1],"scores":[0.5,0.8,0.1]}"#,
            // empty box
            r#"{"repetition":0,"bbox":[1,0,1,1],"scores":[0.1,0.8,0.1]}"#,
            "not json",
        ];
        for c in cases {
            let text = format!("{HEADER}\n{c}\n");
            match parse(&text) {
                Err(Error::Parse { line: 2, .. }) => {}
                other => panic!("{c}: expected line-2 error, got {other:?}"),
            }
        }
        assert!(parse("").is_err());
        assert!(parse(r#"{"image_id":"im","height":4}"#).is_err());
    }

    #[test]
    fn no_clamp_rejects_overshoot() {
        let cfg = IngestConfig {
            clamp_boxes: false,
            ..Default::default()
        };
        let text =
            format!("{HEADER}\n{{\"repetition\":0,\"bbox\":[0,0,9,1],\"scores\":[0.1,0.8,0.1]}}\n");
        assert!(parse_sample_set(text.as_bytes(), &cfg).is_err());
    }

    #[test]
    fn filter_examples() {
        let cfg = IngestConfig::default();
        let clean = set(vec![det(0, 0.0), det(1, 0.0)]);
        assert_eq!(filter_background(&clean, &cfg), clean);

        let s = set(vec![det(0, 0.46), det(1, 0.45)]);
        let f = filter_background(&s, &cfg);
        assert_eq!(f.detections, vec![det(1, 0.45)]);

        let bgs = [0.1, 0.5, 0.2, 0.9, 0.0, 0.44, 0.45, 0.451, 0.3, 0.05];
        let s = set(bgs.iter().map(|&b| det(0, b)).collect());
        let expected = bgs.iter().filter(|&&b| b <= 0.45).count();
        assert_eq!(expected, 7);
        assert_eq!(filter_background(&s, &cfg).len(), 7);
    }

    #[test]
    fn legacy_filter() {
        let cfg = IngestConfig {
            legacy_min_class_score: Some(0.05),
            ..Default::default()
        };
        let weak = Detection {
            scores: ScoreVector::new(vec![0.45, 0.04, 0.51]).unwrap(),
            ..det(0, 0.0)
        };
        let all_low = Detection {
            scores: ScoreVector::new(vec![0.92, 0.04, 0.04]).unwrap(),
            ..det(0, 0.0)
        };
        let s = set(vec![weak.clone(), all_low]);
        assert_eq!(filter_background(&s, &cfg).detections, vec![weak]);
        let bad = IngestConfig {
            background_threshold: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    fn arb_set() -> impl Strategy<Value = SampleSet> {
        proptest::collection::vec(
            (
                0u32..3,
                0.0..3.0f64,
                0.0..3.0f64,
                0.01..1.0f64,
                0.01..1.0f64,
                0.0..1.0f64,
                0.0..1.0f64,
                proptest::option::of(0u32..16),
            ),
            0..20,
        )
        .prop_map(|rows| {
            let mut dets: Vec<_> = rows
                .into_iter()
                .map(|(rep, x, y, w, h, bg, split, fg)| {
                    let rest = 1.0 - bg;
                    Detection {
                        bbox: BBox::new(x, y, x + w, y + h).unwrap(),
                        scores: ScoreVector::new(vec![bg, rest * split, rest * (1.0 - split)])
                            .unwrap(),
                        mask: fg.map(|k| {
                            let runs = if k == 0 { vec![16] } else { vec![16 - k, k] };
                            RleMask::new(4, 4, runs).unwrap()
                        }),
                        repetition: rep,
                    }
                })
                .collect();
            dets.sort_by_key(|d| d.repetition);
            set(dets)
        })
    }

    proptest! {
        #[test]
        fn filter_idempotent_and_preserving(s in arb_set(), t in 0.0..1.0f64) {
            let cfg = IngestConfig { background_threshold: t, ..Default::default() };
            let once = filter_background(&s, &cfg);
            prop_assert_eq!(&filter_background(&once, &cfg), &once);
            // survivors are an order-preserving subsequence with identical fields
            let mut it = s.detections.iter();
            for d in &once.detections {
                prop_assert!(it.any(|x| x == d));
            }
            prop_assert_eq!(once.len(), s.detections.iter().filter(|d| d.scores.background() <= t).count());
        }

        #[test]
        fn serialize_round_trip(s in arb_set()) {
            let mut buf = Vec::new();
            write_sample_set(&s, &mut buf).unwrap();
            let back = parse_sample_set(buf.as_slice(), &IngestConfig::default()).unwrap();
            prop_assert_eq!(back, s);
        }
    }
}
