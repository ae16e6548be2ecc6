//! One-dimensional Gaussian kernel density estimate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_GRID_SIZE: usize = 256;
/// Grid extends this many bandwidths past the sample range on each side.
pub const GRID_PAD_BANDWIDTHS: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeCurve {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
    pub sample_mean: f64,
    /// Sample standard deviation (n - 1 denominator), the spread the
    /// bandwidth is scaled from.
    pub sample_std: f64,
}

impl KdeCurve {
    pub fn integral(&self) -> f64 {
        self.grid
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
            .sum()
    }

    /// Linear interpolation of the density on the grid; zero outside it.
    pub fn density_at(&self, x: f64) -> f64 {
        let n = self.grid.len();
        if n == 0 || x < self.grid[0] || x > self.grid[n - 1] {
            return 0.0;
        }
        let i = self.grid.partition_point(|&g| g <= x).min(n - 1).max(1);
        let (x0, x1) = (self.grid[i - 1], self.grid[i]);
        let t = if x1 > x0 { (x - x0) / (x1 - x0) } else { 0.0 };
        self.density[i - 1] * (1.0 - t) + self.density[i] * t
    }
}

/// Gaussian KDE with Scott's bandwidth `h = sigma * n^(-1/5)`, evaluated on
/// a uniform grid over `[min - 3h, max + 3h]`.
pub fn kde(samples: &[f64], grid_size: usize) -> Result<KdeCurve> {
    if samples.len() < 2 {
        return Err(Error::DegenerateSample("fewer than two samples"));
    }
    if grid_size < 2 {
        return Err(Error::Config("grid needs at least two points".into()));
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::DegenerateSample("non-finite sample"));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let std = var.sqrt();
    if !(std > 0.0) {
        return Err(Error::DegenerateSample("zero variance"));
    }
    let h = std * n.powf(-0.2);
    let min = samples.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = min - GRID_PAD_BANDWIDTHS * h;
    let hi = max + GRID_PAD_BANDWIDTHS * h;
    let norm = 1.0 / (n * h * (2.0 * std::f64::consts::PI).sqrt());
    let grid: Vec<f64> = (0..grid_size)
        .map(|i| lo + (hi - lo) * i as f64 / (grid_size - 1) as f64)
        .collect();
    let density = grid
        .iter()
        .map(|&x| {
            norm * samples
                .iter()
                .map(|&s| {
                    let u = (x - s) / h;
                    (-0.5 * u * u).exp()
                })
                .sum::<f64>()
        })
        .collect();
    Ok(KdeCurve {
        grid,
        density,
        bandwidth: h,
        sample_mean: mean,
        sample_std: std,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn degenerate_inputs() {
        assert!(kde(&[0.5], 256).is_err());
        assert!(kde(&[0.5, 0.5, 0.5], 256).is_err());
        assert!(kde(&[0.5, f64::NAN], 256).is_err());
    }

    #[test]
    fn standard_normal_peak() {
        let mut rng = rng_for(42, 0);
        let xs: Vec<f64> = (0..10_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let c = kde(&xs, DEFAULT_GRID_SIZE).unwrap();
        let peak = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        assert!((c.density_at(0.0) - peak).abs() / peak < 0.05);
        assert!((c.integral() - 1.0).abs() < 1e-2);
    }

    #[test]
    fn symmetric_samples_symmetric_density() {
        let xs: Vec<f64> = (0..50).map(|i| if i % 2 == 0 { -0.3 } else { 0.3 }).collect();
        let c = kde(&xs, DEFAULT_GRID_SIZE).unwrap();
        let n = c.density.len();
        for i in 0..n {
            assert!((c.density[i] - c.density[n - 1 - i]).abs() < 1e-9);
            assert!((c.grid[i] + c.grid[n - 1 - i]).abs() < 1e-9);
        }
        assert!((c.integral() - 1.0).abs() < 1e-2);
    }

    #[test]
    fn scott_bandwidth() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let c = kde(&xs, 16).unwrap();
        let std = (5.0f64 / 3.0).sqrt();
        assert!((c.bandwidth - std * 4f64.powf(-0.2)).abs() < 1e-12);
        assert_eq!(c.grid.len(), 16);
        assert!((c.grid[0] - (0.0 - 3.0 * c.bandwidth)).abs() < 1e-12);
    }
}
