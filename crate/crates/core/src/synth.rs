//! Synthetic sample sets with known ground truth.
//!
//! Each repetition visits the instances in order. An instance is missed
//! with probability `miss_rate`; otherwise it emits one detection whose
//! edges carry independent Gaussian noise, whose scores leak part of the
//! true-class mass and whose mask is the instance shape drawn on the
//! jittered box with random flips in the one-pixel contour band.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::calibration::{softmax, CalibrationRecord};
use crate::error::{Error, Result};
use crate::evaluation::GroundTruthInstance;
use crate::model::{rle_from_spans, BBox, Detection, RleMask, SampleSet, ScoreVector};
use crate::seed::{rng_for, stream};

/// Fraction of the leaked class mass that goes to background.
pub const BACKGROUND_LEAK_SHARE: f64 = 0.5;
/// Spread of the base logits of calibration records.
pub const CALIBRATION_LOGIT_STD: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    #[default]
    Rect,
    Ellipse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceSpec {
    pub true_box: [f64; 4],
    pub true_class: usize,
    #[serde(default)]
    pub shape: Shape,
    #[serde(default)]
    pub box_jitter_sigma: f64,
    /// Mean fraction of the true-class score leaked to other classes.
    #[serde(default)]
    pub class_confusion: f64,
    /// Flip probability of each contour-band pixel.
    #[serde(default)]
    pub mask_noise: f64,
    #[serde(default)]
    pub miss_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    #[serde(default = "default_image_id")]
    pub image_id: String,
    pub height: u32,
    pub width: u32,
    /// Foreground classes; score vectors have one more entry.
    pub num_classes: usize,
    pub n_repetitions: u32,
    #[serde(default)]
    pub seed: u64,
    pub instances: Vec<InstanceSpec>,
}

fn default_image_id() -> String {
    "synth".into()
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.n_repetitions == 0 || self.num_classes == 0 {
            return Err(Error::Config(
                "image dims, repetitions and class count must be positive".into(),
            ));
        }
        for (i, inst) in self.instances.iter().enumerate() {
            let bad = |m: &str| Err(Error::Config(format!("instance {i}: {m}")));
            let b = BBox::from_array(inst.true_box)?;
            if !b.within(self.width, self.height) {
                return bad("true box outside the image");
            }
            if inst.true_class == 0 || inst.true_class > self.num_classes {
                return bad("true class must be a foreground class");
            }
            if !(inst.box_jitter_sigma >= 0.0 && inst.box_jitter_sigma.is_finite()) {
                return bad("jitter sigma must be finite and non-negative");
            }
            for (name, p) in [
                ("class_confusion", inst.class_confusion),
                ("mask_noise", inst.mask_noise),
                ("miss_rate", inst.miss_rate),
            ] {
                if !(0.0..=1.0).contains(&p) {
                    return bad(&format!("{name} must lie in [0, 1]"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub samples: SampleSet,
    /// Generating instance of each detection.
    pub true_labels: Vec<usize>,
    pub ground_truth: Vec<GroundTruthInstance>,
}

fn inside(shape: Shape, b: &BBox, r: usize, c: usize) -> bool {
    let (px, py) = (c as f64 + 0.5, r as f64 + 0.5);
    match shape {
        Shape::Rect => px >= b.x1() && px < b.x2() && py >= b.y1() && py < b.y2(),
        Shape::Ellipse => {
            let (cx, cy) = b.center();
            let u = (px - cx) / (0.5 * b.width());
            let v = (py - cy) / (0.5 * b.height());
            u * u + v * v <= 1.0
        }
    }
}

/// Renders `shape` inscribed in `b`, flipping each pixel whose 4-neighbourhood
/// straddles the boundary with probability `noise`.
pub fn render_mask(
    shape: Shape,
    b: &BBox,
    height: u32,
    width: u32,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Result<RleMask> {
    let (h, w) = (height as usize, width as usize);
    let clip = |v: f64, hi: usize| (v.floor().max(0.0) as usize).min(hi);
    // one pixel of margin so the outer half of the band is covered
    let r0 = clip(b.y1() - 1.0, h);
    let r1 = clip(b.y2() + 2.0, h);
    let c0 = clip(b.x1() - 1.0, w);
    let c1 = clip(b.x2() + 2.0, w);
    let (rh, rw) = (r1 - r0, c1 - c0);
    let mut grid: Vec<bool> = (0..rh * rw)
        .map(|i| inside(shape, b, r0 + i / rw, c0 + i % rw))
        .collect();
    if noise > 0.0 {
        let base = grid.clone();
        let at = |r: usize, c: usize| base[r * rw + c];
        for r in 0..rh {
            for c in 0..rw {
                let v = at(r, c);
                let band = (r > 0 && at(r - 1, c) != v)
                    || (r + 1 < rh && at(r + 1, c) != v)
                    || (c > 0 && at(r, c - 1) != v)
                    || (c + 1 < rw && at(r, c + 1) != v);
                if band && rng.random::<f64>() < noise {
                    grid[r * rw + c] = !v;
                }
            }
        }
    }
    let mut spans = Vec::new();
    for r in 0..rh {
        let mut c = 0;
        while c < rw {
            if grid[r * rw + c] {
                let s = c;
                while c < rw && grid[r * rw + c] {
                    c += 1;
                }
                let row = (r0 + r) * w + c0;
                spans.push((row + s, row + c));
            } else {
                c += 1;
            }
        }
    }
    rle_from_spans(height, width, &spans)
}

fn jitter_box(b: &BBox, sigma: f64, width: u32, height: u32, rng: &mut ChaCha8Rng) -> Result<BBox> {
    let mut e = b.to_array();
    if sigma > 0.0 {
        for v in &mut e {
            *v += sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let (mut x1, mut x2) = (e[0].min(e[2]), e[0].max(e[2]));
    let (mut y1, mut y2) = (e[1].min(e[3]), e[1].max(e[3]));
    let (wf, hf) = (width as f64, height as f64);
    // keep at least one pixel of extent inside the image
    x1 = x1.clamp(0.0, wf - 1.0);
    y1 = y1.clamp(0.0, hf - 1.0);
    x2 = x2.clamp(x1 + 1.0, wf);
    y2 = y2.clamp(y1 + 1.0, hf);
    BBox::new(x1, y1, x2, y2)
}

fn leak_scores(true_class: usize, num_classes: usize, confusion: f64, rng: &mut ChaCha8Rng) -> Result<ScoreVector> {
    let leak = (confusion * 2.0 * rng.random::<f64>()).min(1.0);
    let mut s = vec![0.0; num_classes + 1];
    s[true_class] = 1.0 - leak;
    let others: Vec<usize> = (1..=num_classes).filter(|&j| j != true_class).collect();
    let to_bg = if others.is_empty() { leak } else { BACKGROUND_LEAK_SHARE * leak };
    s[0] = to_bg;
    if !others.is_empty() {
        let g: Vec<f64> = others.iter().map(|_| Exp1.sample(rng)).collect();
        let total: f64 = g.iter().sum();
        for (&j, gj) in others.iter().zip(&g) {
            s[j] = (leak - to_bg) * gj / total;
        }
    }
    ScoreVector::new(s)
}

pub fn generate(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, stream::SYNTH_SCENE);
    let (h, w) = (spec.height, spec.width);
    let mut detections = Vec::new();
    let mut true_labels = Vec::new();
    let true_boxes = spec
        .instances
        .iter()
        .map(|i| BBox::from_array(i.true_box))
        .collect::<Result<Vec<_>>>()?;
    for rep in 0..spec.n_repetitions {
        for (k, inst) in spec.instances.iter().enumerate() {
            if rng.random::<f64>() < inst.miss_rate {
                continue;
            }
            let bbox = jitter_box(&true_boxes[k], inst.box_jitter_sigma, w, h, &mut rng)?;
            let scores = leak_scores(inst.true_class, spec.num_classes, inst.class_confusion, &mut rng)?;
            let mask = render_mask(inst.shape, &bbox, h, w, inst.mask_noise, &mut rng)?;
            detections.push(Detection {
                bbox,
                scores,
                mask: Some(mask),
                repetition: rep,
            });
            true_labels.push(k);
        }
    }
    let ground_truth = spec
        .instances
        .iter()
        .zip(&true_boxes)
        .map(|(inst, b)| {
            let mask = render_mask(inst.shape, b, h, w, 0.0, &mut rng)?;
            GroundTruthInstance::new(spec.image_id.clone(), *b, inst.true_class, Some(mask))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Scene {
        samples: SampleSet {
            image_id: spec.image_id.clone(),
            height: h,
            width: w,
            n_repetitions: spec.n_repetitions,
            num_classes: spec.num_classes,
            detections,
        },
        true_labels,
        ground_truth,
    })
}

/// Records `z = T* w` over `n_classes` logits. The base logits `w` are
/// calibrated by construction: the class is drawn from `softmax(w)`, so
/// dividing by `T*` is the exact recalibration.
pub fn generate_calibration_records(
    n: usize,
    true_temperature: f64,
    n_classes: usize,
    seed: u64,
) -> Result<Vec<CalibrationRecord>> {
    if n == 0 || n_classes < 2 {
        return Err(Error::Config("need at least one record and two classes".into()));
    }
    if !(true_temperature > 0.0 && true_temperature.is_finite()) {
        return Err(Error::InvalidTemperature(true_temperature));
    }
    let mut rng = rng_for(seed, stream::SYNTH_CALIBRATION);
    (0..n)
        .map(|_| {
            let w: Vec<f64> = (0..n_classes)
                .map(|_| CALIBRATION_LOGIT_STD * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let p = softmax(&w);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut y = n_classes - 1;
            for (j, pj) in p.iter().enumerate() {
                acc += pj;
                if u < acc {
                    y = j;
                    break;
                }
            }
            CalibrationRecord::new(w.iter().map(|v| v * true_temperature).collect(), y)
        })
        .collect()
}
