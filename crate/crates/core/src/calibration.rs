//! Temperature scaling and calibration diagnostics.
//!
//! Index 0 of every logit/probability vector is background, matching the
//! score layout of detections. Reliability bins are equal-width over
//! confidence; the last bin is closed so a confidence of exactly 1 lands in
//! it.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::argmax;

pub const DEFAULT_BINS: usize = 10;
pub const TEMPERATURE_BOUNDS: (f64, f64) = (0.01, 100.0);
pub const TEMPERATURE_TOL: f64 = 1e-4;
pub const DEFAULT_FOCAL_GAMMA: f64 = 2.0;
/// Fitted temperatures in this band are reported as already calibrated.
pub const CALIBRATED_BAND: (f64, f64) = (0.95, 1.05);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationRecord {
    pub logits: Vec<f64>,
    pub true_class: usize,
}

impl CalibrationRecord {
    pub fn new(logits: Vec<f64>, true_class: usize) -> Result<Self> {
        let r = Self { logits, true_class };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.logits.len() < 2 {
            return Err(Error::InvalidScores("need at least two logits".into()));
        }
        if self.logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::InvalidScores("non-finite logit".into()));
        }
        if self.true_class >= self.logits.len() {
            return Err(Error::InvalidScores(format!(
                "class {} out of range for {} classes",
                self.true_class,
                self.logits.len()
            )));
        }
        Ok(())
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_softmax_at(z: &[f64], t: f64, idx: usize) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / t;
    let lse = m + z.iter().map(|&v| (v / t - m).exp()).sum::<f64>().ln();
    z[idx] / t - lse
}

pub fn scaled_softmax(z: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::InvalidTemperature(t));
    }
    let scaled: Vec<f64> = z.iter().map(|v| v / t).collect();
    Ok(softmax(&scaled))
}

/// Mean negative log-likelihood of the labels under temperature `t`.
pub fn nll(records: &[CalibrationRecord], t: f64) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::NoRecords);
    }
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::InvalidTemperature(t));
    }
    let total: f64 = records
        .iter()
        .map(|r| -log_softmax_at(&r.logits, t, r.true_class))
        .sum();
    if !total.is_finite() {
        return Err(Error::InfiniteLoss);
    }
    Ok(total / records.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TemperatureFit {
    pub temperature: f64,
    pub nll_before: f64,
    pub nll_after: f64,
    pub iterations: usize,
}

impl TemperatureFit {
    pub fn already_calibrated(&self) -> bool {
        (CALIBRATED_BAND.0..=CALIBRATED_BAND.1).contains(&self.temperature)
    }
}

/// Golden-section search for the NLL-minimizing temperature. The search
/// runs in log-temperature, where the NLL of a softmax is much closer to
/// unimodal over the wide bracket.
pub fn fit_temperature(records: &[CalibrationRecord]) -> Result<TemperatureFit> {
    for r in records {
        r.validate()?;
    }
    let nll_before = nll(records, 1.0)?;
    let f = |u: f64| nll(records, u.exp());
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (TEMPERATURE_BOUNDS.0.ln(), TEMPERATURE_BOUNDS.1.ln());
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c)?, f(d)?);
    let mut iterations = 0;
    while b.exp() - a.exp() > TEMPERATURE_TOL {
        iterations += 1;
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d)?;
        }
    }
    let temperature = (0.5 * (a + b)).exp();
    Ok(TemperatureFit {
        temperature,
        nll_before,
        nll_after: nll(records, temperature)?,
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// `None` for empty bins.
    pub accuracy: Option<f64>,
    pub mean_confidence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReliabilityDiagram {
    pub bins: Vec<ReliabilityBin>,
    pub total: usize,
}

/// Confidence is the top probability, correctness is whether its class is
/// the label.
pub fn predictions(records: &[CalibrationRecord], t: f64) -> Result<Vec<(f64, bool)>> {
    records
        .iter()
        .map(|r| {
            r.validate()?;
            let p = scaled_softmax(&r.logits, t)?;
            let k = argmax(&p);
            Ok((p[k], k == r.true_class))
        })
        .collect()
}

pub fn reliability(preds: &[(f64, bool)], n_bins: usize) -> Result<ReliabilityDiagram> {
    if n_bins == 0 {
        return Err(Error::Config("at least one bin is required".into()));
    }
    if preds.is_empty() {
        return Err(Error::NoRecords);
    }
    let mut count = vec![0usize; n_bins];
    let mut correct = vec![0usize; n_bins];
    let mut conf = vec![0.0; n_bins];
    for &(c, ok) in preds {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::InvalidScores(format!("confidence {c} outside [0, 1]")));
        }
        let b = ((c * n_bins as f64) as usize).min(n_bins - 1);
        count[b] += 1;
        correct[b] += ok as usize;
        conf[b] += c;
    }
    let bins = (0..n_bins)
        .map(|b| {
            let n = count[b];
            ReliabilityBin {
                lower: b as f64 / n_bins as f64,
                upper: (b + 1) as f64 / n_bins as f64,
                count: n,
                accuracy: (n > 0).then(|| correct[b] as f64 / n as f64),
                mean_confidence: (n > 0).then(|| conf[b] / n as f64),
            }
        })
        .collect();
    Ok(ReliabilityDiagram {
        bins,
        total: preds.len(),
    })
}

fn gaps(d: &ReliabilityDiagram) -> impl Iterator<Item = (usize, f64)> + '_ {
    d.bins.iter().filter_map(|b| match (b.accuracy, b.mean_confidence) {
        (Some(a), Some(c)) => Some((b.count, (a - c).abs())),
        _ => None,
    })
}

/// Maximum calibration error over non-empty bins.
pub fn mce(d: &ReliabilityDiagram) -> Result<f64> {
    gaps(d).map(|(_, g)| g).reduce(f64::max).ok_or(Error::EmptyDiagram)
}

/// Expected calibration error: bin gaps weighted by bin population.
pub fn ece(d: &ReliabilityDiagram) -> Result<f64> {
    if d.total == 0 {
        return Err(Error::EmptyDiagram);
    }
    Ok(gaps(d).map(|(n, g)| n as f64 * g).sum::<f64>() / d.total as f64)
}

/// Average calibration error: unweighted mean gap over non-empty bins.
pub fn ace(d: &ReliabilityDiagram) -> Result<f64> {
    let (n, s) = gaps(d).fold((0usize, 0.0), |(n, s), (_, g)| (n + 1, s + g));
    if n == 0 {
        return Err(Error::EmptyDiagram);
    }
    Ok(s / n as f64)
}

/// Focal loss `-alpha_t (1 - p_t)^gamma ln p_t` of one probability vector.
pub fn focal_loss(p: &[f64], true_class: usize, alpha: &[f64], gamma: f64) -> Result<f64> {
    if !(gamma >= 0.0) {
        return Err(Error::Config(format!("focal gamma must be non-negative, got {gamma}")));
    }
    if alpha.len() != p.len() || alpha.iter().any(|&a| !(a > 0.0)) {
        return Err(Error::Config("alpha needs one positive weight per class".into()));
    }
    let pt = *p
        .get(true_class)
        .ok_or_else(|| Error::InvalidScores(format!("class {true_class} out of range")))?;
    if !(pt > 0.0) {
        return Err(Error::InfiniteLoss);
    }
    Ok(-alpha[true_class] * (1.0 - pt).powf(gamma) * pt.ln())
}

/// Mean focal loss over records at temperature `t`, unit class weights.
pub fn mean_focal_loss(records: &[CalibrationRecord], t: f64, gamma: f64) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::NoRecords);
    }
    let mut total = 0.0;
    for r in records {
        r.validate()?;
        let p = scaled_softmax(&r.logits, t)?;
        total += focal_loss(&p, r.true_class, &vec![1.0; p.len()], gamma)?;
    }
    Ok(total / records.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationSummary {
    pub temperature: f64,
    pub already_calibrated: bool,
    pub nll_before: f64,
    pub nll_after: f64,
    pub mce_before: f64,
    pub mce_after: f64,
    pub ace_before: f64,
    pub ace_after: f64,
    pub ece_before: f64,
    pub ece_after: f64,
    pub focal_before: f64,
    pub focal_after: f64,
    pub before: ReliabilityDiagram,
    pub after: ReliabilityDiagram,
}

pub fn calibrate(records: &[CalibrationRecord], n_bins: usize) -> Result<CalibrationSummary> {
    let fit = fit_temperature(records)?;
    let t = fit.temperature;
    let before = reliability(&predictions(records, 1.0)?, n_bins)?;
    let after = reliability(&predictions(records, t)?, n_bins)?;
    Ok(CalibrationSummary {
        temperature: t,
        already_calibrated: fit.already_calibrated(),
        nll_before: fit.nll_before,
        nll_after: fit.nll_after,
        mce_before: mce(&before)?,
        mce_after: mce(&after)?,
        ace_before: ace(&before)?,
        ace_after: ace(&after)?,
        ece_before: ece(&before)?,
        ece_after: ece(&after)?,
        focal_before: mean_focal_loss(records, 1.0, DEFAULT_FOCAL_GAMMA)?,
        focal_after: mean_focal_loss(records, t, DEFAULT_FOCAL_GAMMA)?,
        before,
        after,
    })
}

pub fn parse_records(input: impl BufRead) -> Result<Vec<CalibrationRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |m: String| Error::Parse { line: i + 1, message: m };
        let r: CalibrationRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        r.validate().map_err(|e| err(e.to_string()))?;
        out.push(r);
    }
    if out.is_empty() {
        return Err(Error::NoRecords);
    }
    Ok(out)
}

pub fn write_records(records: &[CalibrationRecord], mut out: impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_reliability_csv(d: &ReliabilityDiagram, mut out: impl Write) -> Result<()> {
    writeln!(out, "bin_lo,bin_hi,confidence,accuracy,count")?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    for b in &d.bins {
        writeln!(
            out,
            "{:.6},{:.6},{},{},{}",
            b.lower,
            b.upper,
            opt(b.mean_confidence),
            opt(b.accuracy),
            b.count
        )?;
    }
    Ok(())
}
