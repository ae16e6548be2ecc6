//! Domain types shared across the pipeline and the geometric primitives
//! built on them.
//!
//! Boxes are continuous `(x1, y1, x2, y2)` with the origin at the top-left
//! corner and area `(x2 - x1) * (y2 - y1)`. Masks are run-length encoded in
//! row-major order, starting with a (possibly empty) background run.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let invalid = |reason| Error::InvalidBox {
            x1,
            y1,
            x2,
            y2,
            reason,
        };
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(invalid("non-finite coordinate"));
        }
        if !(x1 < x2 && y1 < y2) {
            return Err(invalid("empty area"));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn from_array(c: [f64; 4]) -> Result<Self> {
        Self::new(c[0], c[1], c[2], c[3])
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Result<Self> {
        Self::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    /// Clamps to `[0, width] x [0, height]`. Fails when nothing of the box
    /// remains inside the image.
    pub fn clamp_to(&self, width: u32, height: u32) -> Result<Self> {
        let (w, h) = (width as f64, height as f64);
        Self::new(
            self.x1.clamp(0.0, w),
            self.y1.clamp(0.0, h),
            self.x2.clamp(0.0, w),
            self.y2.clamp(0.0, h),
        )
    }

    pub fn within(&self, width: u32, height: u32) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width as f64 && self.y2 <= height as f64
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;
    fn try_from(c: [f64; 4]) -> Result<Self> {
        Self::from_array(c)
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// Intersection over union of two boxes; 0 when they do not overlap.
pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Run-length encoded binary mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RleMask {
    height: u32,
    width: u32,
    runs: Vec<u32>,
}

impl RleMask {
    pub fn new(height: u32, width: u32, runs: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidMask(format!("zero dimension {height}x{width}")));
        }
        let total: u64 = runs.iter().map(|&r| r as u64).sum();
        let expected = height as u64 * width as u64;
        if total != expected {
            return Err(Error::InvalidMask(format!(
                "runs sum to {total}, expected {expected}"
            )));
        }
        if runs.iter().skip(1).any(|&r| r == 0) {
            return Err(Error::InvalidMask("zero-length interior run".into()));
        }
        if runs.is_empty() {
            return Err(Error::InvalidMask("no runs".into()));
        }
        Ok(Self {
            height,
            width,
            runs,
        })
    }

    pub fn empty(height: u32, width: u32) -> Result<Self> {
        Self::new(height, width, vec![height * width])
    }

    pub fn height(&self) -> u32 {
        self.height
    }
    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn runs(&self) -> &[u32] {
        &self.runs
    }

    pub fn len(&self) -> usize {
        self.height as usize * self.width as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Foreground intervals `[start, end)` over the flattened row-major grid.
    pub fn foreground_spans(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let mut pos = 0usize;
        self.runs.iter().enumerate().filter_map(move |(i, &r)| {
            let start = pos;
            pos += r as usize;
            (i % 2 == 1).then_some((start, pos))
        })
    }

    pub fn area(&self) -> u64 {
        self.foreground_spans().map(|(s, e)| (e - s) as u64).sum()
    }

    pub fn has_foreground(&self) -> bool {
        self.runs.len() > 1
    }

    fn check_dims(&self, other: &RleMask) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::MaskDimMismatch(
                self.height,
                self.width,
                other.height,
                other.width,
            ));
        }
        Ok(())
    }

    /// Number of foreground pixels shared with `other`.
    pub fn intersection_area(&self, other: &RleMask) -> Result<u64> {
        self.check_dims(other)?;
        let mut a = self.foreground_spans().peekable();
        let mut b = other.foreground_spans().peekable();
        let mut inter = 0u64;
        while let (Some(&(s1, e1)), Some(&(s2, e2))) = (a.peek(), b.peek()) {
            let lo = s1.max(s2);
            let hi = e1.min(e2);
            if hi > lo {
                inter += (hi - lo) as u64;
            }
            if e1 <= e2 {
                a.next();
            } else {
                b.next();
            }
        }
        Ok(inter)
    }
}

/// Intersection over union of two masks of identical dimensions. Two empty
/// masks give 0.0.
pub fn mask_iou(a: &RleMask, b: &RleMask) -> Result<f64> {
    let inter = a.intersection_area(b)?;
    let union = a.area() + b.area() - inter;
    if union == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Row-major boolean grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitmap {
    pub height: u32,
    pub width: u32,
    pub pixels: Vec<bool>,
}

impl Bitmap {
    pub fn new(height: u32, width: u32) -> Self {
        Self {
            height,
            width,
            pixels: vec![false; height as usize * width as usize],
        }
    }

    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::InvalidMask("ragged rows".into()));
        }
        Ok(Self {
            height: height as u32,
            width: width as u32,
            pixels: rows.concat(),
        })
    }

    pub fn get(&self, row: u32, col: u32) -> bool {
        self.pixels[row as usize * self.width as usize + col as usize]
    }

    pub fn set(&mut self, row: u32, col: u32, v: bool) {
        self.pixels[row as usize * self.width as usize + col as usize] = v;
    }
}

pub fn rle_encode(bitmap: &Bitmap) -> Result<RleMask> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut count = 0u32;
    for &p in &bitmap.pixels {
        if p != current {
            runs.push(count);
            count = 0;
            current = p;
        }
        count += 1;
    }
    runs.push(count);
    RleMask::new(bitmap.height, bitmap.width, runs)
}

pub fn rle_decode(mask: &RleMask) -> Bitmap {
    let mut bitmap = Bitmap::new(mask.height, mask.width);
    for (s, e) in mask.foreground_spans() {
        bitmap.pixels[s..e].fill(true);
    }
    bitmap
}

/// Builds an RLE mask from sorted, disjoint foreground spans over the
/// flattened grid. Adjacent spans are merged.
pub fn rle_from_spans(height: u32, width: u32, spans: &[(usize, usize)]) -> Result<RleMask> {
    let total = height as usize * width as usize;
    let mut runs = Vec::with_capacity(spans.len() * 2 + 1);
    let mut pos = 0usize;
    for &(s, e) in spans {
        if e <= s {
            continue;
        }
        if s < pos || e > total {
            return Err(Error::InvalidMask("spans unsorted or out of range".into()));
        }
        if s == pos && !runs.is_empty() {
            // contiguous with the previous foreground run
            *runs.last_mut().unwrap() += (e - s) as u32;
        } else {
            runs.push((s - pos) as u32);
            runs.push((e - s) as u32);
        }
        pos = e;
    }
    if pos < total || runs.is_empty() {
        runs.push((total - pos) as u32);
    }
    RleMask::new(height, width, runs)
}

/// Rasterizes a box: a pixel is foreground when its center lies inside the
/// box. Integer-aligned boxes cover exactly the pixels `[x1, x2) x [y1, y2)`.
pub fn rasterize_box(b: &BBox, height: u32, width: u32) -> Result<RleMask> {
    let c0 = ((b.x1 - 0.5).ceil().max(0.0) as i64).min(width as i64) as usize;
    let c1 = ((b.x2 - 0.5).ceil().max(0.0) as i64).min(width as i64) as usize;
    let r0 = ((b.y1 - 0.5).ceil().max(0.0) as i64).min(height as i64) as usize;
    let r1 = ((b.y2 - 0.5).ceil().max(0.0) as i64).min(height as i64) as usize;
    let w = width as usize;
    let spans: Vec<_> = if c1 > c0 {
        (r0..r1).map(|r| (r * w + c0, r * w + c1)).collect()
    } else {
        Vec::new()
    };
    rle_from_spans(height, width, &spans)
}

/// Class-probability vector; index 0 is the background class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ScoreVector(Vec<f64>);

pub const PROBABILITY_SUM_TOL: f64 = 1e-6;

impl ScoreVector {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if scores.len() < 2 {
            return Err(Error::InvalidScores(format!(
                "need background plus at least one class, got {} entries",
                scores.len()
            )));
        }
        if let Some(s) = scores
            .iter()
            .find(|s| !s.is_finite() || **s < 0.0 || **s > 1.0)
        {
            return Err(Error::InvalidScores(format!("score {s} outside [0, 1]")));
        }
        let sum: f64 = scores.iter().sum();
        if (sum - 1.0).abs() > PROBABILITY_SUM_TOL {
            return Err(Error::InvalidScores(format!("scores sum to {sum}")));
        }
        Ok(Self(scores))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn background(&self) -> f64 {
        self.0[0]
    }

    /// Number of foreground classes.
    pub fn num_classes(&self) -> usize {
        self.0.len() - 1
    }

    /// Highest-scoring class, ties toward the lower index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl TryFrom<Vec<f64>> for ScoreVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ScoreVector> for Vec<f64> {
    fn from(s: ScoreVector) -> Self {
        s.0
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub scores: ScoreVector,
    pub mask: Option<RleMask>,
    pub repetition: u32,
}

/// All detections sampled for one image across the repeated forward passes.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub image_id: String,
    pub height: u32,
    pub width: u32,
    pub n_repetitions: u32,
    pub num_classes: usize,
    pub detections: Vec<Detection>,
}

impl SampleSet {
    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    /// `(repetition, index within repetition)` of each detection, in order.
    pub fn provenance(&self) -> Vec<(u32, u32)> {
        let mut next = std::collections::HashMap::new();
        self.detections
            .iter()
            .map(|d| {
                let slot = next.entry(d.repetition).or_insert(0u32);
                let p = (d.repetition, *slot);
                *slot += 1;
                p
            })
            .collect()
    }

    /// Checks the structural invariants every pipeline stage relies on.
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.n_repetitions == 0 {
            return Err(Error::Config(
                "image dims and repetition count must be positive".into(),
            ));
        }
        for (i, d) in self.detections.iter().enumerate() {
            if d.repetition >= self.n_repetitions {
                return Err(Error::Config(format!(
                    "detection {i}: repetition {} >= {}",
                    d.repetition, self.n_repetitions
                )));
            }
            if d.scores.num_classes() != self.num_classes {
                return Err(Error::InvalidScores(format!(
                    "detection {i}: {} scores, expected {}",
                    d.scores.len(),
                    self.num_classes + 1
                )));
            }
            if let Some(m) = &d.mask {
                if m.height() != self.height || m.width() != self.width {
                    return Err(Error::MaskDimMismatch(
                        m.height(),
                        m.width(),
                        self.height,
                        self.width,
                    ));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn grid(rows: &[&str]) -> Bitmap {
        let rows: Vec<Vec<bool>> = rows
            .iter()
            .map(|r| r.chars().map(|c| c == '#').collect())
            .collect();
        Bitmap::from_rows(&rows).unwrap()
    }

    #[test]
    fn box_rejects_degenerate() {
        assert!(BBox::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BBox::new(0.0, 2.0, 1.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::INFINITY, 1.0).is_err());
    }

    #[test]
    fn box_iou_examples() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(box_iou(&a, &a), 1.0);
        assert_eq!(box_iou(&a, &b(20.0, 20.0, 30.0, 30.0)), 0.0);
        // touching edges share no area
        assert_eq!(box_iou(&a, &b(10.0, 0.0, 20.0, 10.0)), 0.0);
        let half = box_iou(&a, &b(5.0, 0.0, 15.0, 10.0));
        assert!((half - 50.0 / 150.0).abs() < 1e-15);
    }

    #[test]
    fn clamp_keeps_inside() {
        let c = b(-5.0, -1.0, 700.0, 20.0).clamp_to(640, 480).unwrap();
        assert_eq!(c.to_array(), [0.0, 0.0, 640.0, 20.0]);
        assert!(b(700.0, 0.0, 710.0, 5.0).clamp_to(640, 480).is_err());
    }

    #[test]
    fn rle_examples() {
        assert_eq!(rle_encode(&grid(&["..", ".."])).unwrap().runs(), &[4]);
        assert_eq!(rle_encode(&grid(&["##", "##"])).unwrap().runs(), &[0, 4]);
        assert_eq!(rle_encode(&grid(&[".#", "#."])).unwrap().runs(), &[1, 2, 1]);
    }

    #[test]
    fn rle_rejects_bad_runs() {
        assert!(RleMask::new(2, 2, vec![1, 2]).is_err());
        assert!(RleMask::new(2, 2, vec![1, 0, 3]).is_err());
        assert!(RleMask::new(0, 2, vec![]).is_err());
        assert!(RleMask::new(2, 2, vec![0, 4]).is_ok());
    }

    #[test]
    fn mask_iou_examples() {
        let left = rle_encode(&grid(&["##..", "##..", "##..", "##.."])).unwrap();
        let top = rle_encode(&grid(&["####", "####", "....", "...."])).unwrap();
        assert!((mask_iou(&left, &top).unwrap() - 4.0 / 12.0).abs() < 1e-15);
        assert_eq!(mask_iou(&left, &left).unwrap(), 1.0);

        let a = rle_encode(&grid(&["#####", ".....", "....."])).unwrap();
        let c = rle_encode(&grid(&[".....", ".....", "#####"])).unwrap();
        assert_eq!(mask_iou(&a, &c).unwrap(), 0.0);

        let e = RleMask::empty(3, 5).unwrap();
        assert_eq!(mask_iou(&e, &e).unwrap(), 0.0);

        let other = RleMask::empty(5, 3).unwrap();
        assert!(matches!(
            mask_iou(&e, &other),
            Err(Error::MaskDimMismatch(..))
        ));
    }

    #[test]
    fn spans_merge_and_rasterize() {
        let m = rle_from_spans(2, 4, &[(0, 2), (2, 3), (6, 8)]).unwrap();
        assert_eq!(m.runs(), &[0, 3, 3, 2]);
        let r = rasterize_box(&b(1.0, 0.0, 3.0, 2.0), 2, 4).unwrap();
        assert_eq!(
            rle_decode(&r),
            grid(&[".##.", ".##."])
        );
    }

    #[test]
    fn provenance_counts_within_repetition() {
        let det = |rep| Detection {
            bbox: b(0.0, 0.0, 1.0, 1.0),
            scores: ScoreVector::new(vec![0.0, 1.0]).unwrap(),
            mask: None,
            repetition: rep,
        };
        let s = SampleSet {
            image_id: "x".into(),
            height: 4,
            width: 4,
            n_repetitions: 3,
            num_classes: 1,
            detections: vec![det(0), det(0), det(1), det(2), det(2), det(2)],
        };
        assert_eq!(
            s.provenance(),
            vec![(0, 0), (0, 1), (1, 0), (2, 0), (2, 1), (2, 2)]
        );
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..100.0f64, 0.0..100.0f64, 0.1..50.0f64, 0.1..50.0f64)
            .prop_map(|(x, y, w, h)| b(x, y, x + w, y + h))
    }

    fn arb_bitmap() -> impl Strategy<Value = Bitmap> {
        (1u32..=64, 1u32..=64).prop_flat_map(|(h, w)| {
            proptest::collection::vec(any::<bool>(), (h * w) as usize).prop_map(move |pixels| {
                Bitmap {
                    height: h,
                    width: w,
                    pixels,
                }
            })
        })
    }

    proptest! {
        #[test]
        fn box_iou_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
            let ab = box_iou(&a, &c);
            prop_assert_eq!(ab, box_iou(&c, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn rle_round_trip(bm in arb_bitmap()) {
            let enc = rle_encode(&bm).unwrap();
            prop_assert_eq!(rle_decode(&enc), bm);
        }

        #[test]
        fn mask_iou_symmetric_and_bounded(
            (a, c) in (1u32..=16, 1u32..=16).prop_flat_map(|(h, w)| {
                let n = (h * w) as usize;
                (proptest::collection::vec(any::<bool>(), n), proptest::collection::vec(any::<bool>(), n))
                    .prop_map(move |(p, q)| (Bitmap { height: h, width: w, pixels: p }, Bitmap { height: h, width: w, pixels: q }))
            })
        ) {
            let ra = rle_encode(&a).unwrap();
            let rc = rle_encode(&c).unwrap();
            let v = mask_iou(&ra, &rc).unwrap();
            prop_assert_eq!(v, mask_iou(&rc, &ra).unwrap());
            prop_assert!((0.0..=1.0).contains(&v));
            // pixel enumeration oracle
            let inter = a.pixels.iter().zip(&c.pixels).filter(|(x, y)| **x && **y).count();
            let union = a.pixels.iter().zip(&c.pixels).filter(|(x, y)| **x || **y).count();
            let expected = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
            prop_assert_eq!(v, expected);
        }

        #[test]
        fn rasterized_box_iou_matches_box_iou(
            (x1, y1, w1, h1, x2, y2, w2, h2) in (0u32..40, 0u32..40, 1u32..20, 1u32..20, 0u32..40, 0u32..40, 1u32..20, 1u32..20)
        ) {
            let a = b(x1 as f64, y1 as f64, (x1 + w1) as f64, (y1 + h1) as f64);
            let c = b(x2 as f64, y2 as f64, (x2 + w2) as f64, (y2 + h2) as f64);
            let ma = rasterize_box(&a, 64, 64).unwrap();
            let mc = rasterize_box(&c, 64, 64).unwrap();
            let tol = 2.0 / (2.0 * (w1 + h1) as f64);
            prop_assert!((box_iou(&a, &c) - mask_iou(&ma, &mc).unwrap()).abs() <= tol);
        }
    }
}
