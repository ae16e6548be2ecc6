//! Variational Bayesian Gaussian mixture with a truncated stick-breaking
//! (Dirichlet-process) weight prior and Normal-Wishart component priors,
//! fit by coordinate-ascent variational inference.
//!
//! Covariance regularization is folded into the model rather than bolted onto
//! the M-step: every observation is treated as carrying isotropic jitter
//! `N(0, reg * I)`, which adds `reg * I` to each component's scatter and a
//! matching `reg * tr(W)` term to the expected log-likelihood. Both the E- and
//! M-steps are then exact coordinate maximizations of one objective, so the
//! recorded ELBO is non-decreasing up to rounding.

use nalgebra::{Cholesky, Matrix4, Vector4};
use statrs::function::gamma::{digamma, ln_gamma};

use super::{kmeans::kmeans_labels, ClusterConfig, Point};
use crate::error::{Error, Result};
use crate::seed::{rng_for, stream};

const DIM: usize = 4;
const DIM_F: f64 = DIM as f64;
const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Absolute floor on the jitter variance, used when the data has no spread.
const REG_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct MixtureComponent {
    /// Expected mixing proportion under the stick-breaking posterior.
    pub weight: f64,
    pub mean: [f64; 4],
    /// Expected covariance `(nu * W)^-1`.
    pub covariance: [[f64; 4]; 4],
}

#[derive(Debug, Clone)]
pub struct MixtureState {
    pub k_max: usize,
    pub components: Vec<MixtureComponent>,
    /// Row-major `n x k_max`.
    pub responsibilities: Vec<Vec<f64>>,
    pub elbo_trace: Vec<f64>,
    pub effective_components: usize,
    pub converged: bool,
    /// Jitter variance added to every component scatter.
    pub regularization: f64,
}

impl MixtureState {
    pub fn final_elbo(&self) -> f64 {
        *self.elbo_trace.last().unwrap_or(&f64::NEG_INFINITY)
    }
}

#[derive(Clone)]
struct Prior {
    concentration: f64,
    beta0: f64,
    nu0: f64,
    mean0: Vector4<f64>,
    w0_inv: Matrix4<f64>,
    ln_b0: f64,
}

/// Posterior factors for one component.
#[derive(Clone)]
struct Factor {
    beta: f64,
    nu: f64,
    mean: Vector4<f64>,
    w_inv: Matrix4<f64>,
    w: Matrix4<f64>,
    /// Lower Cholesky factor of `w_inv`.
    chol: Matrix4<f64>,
    ln_det_w: f64,
    e_ln_det_lambda: f64,
}

#[derive(Clone)]
struct Model<'a> {
    points: &'a [Vector4<f64>],
    prior: Prior,
    reg: f64,
    k: usize,
    factors: Vec<Factor>,
    /// Posterior Beta parameters of the first `k - 1` sticks.
    sticks: Vec<(f64, f64)>,
    e_ln_pi: Vec<f64>,
}

/// `ln B(W, nu)`: log normalizer of the Wishart density, given `ln|W|`.
fn ln_wishart_norm(ln_det_w: f64, nu: f64) -> f64 {
    let mut v = -0.5 * nu * ln_det_w
        - 0.5 * nu * DIM_F * std::f64::consts::LN_2
        - 0.25 * DIM_F * (DIM_F - 1.0) * std::f64::consts::PI.ln();
    for i in 1..=DIM {
        v -= ln_gamma(0.5 * (nu + 1.0 - i as f64));
    }
    v
}

fn e_ln_det_lambda(ln_det_w: f64, nu: f64) -> f64 {
    let mut v = DIM_F * std::f64::consts::LN_2 + ln_det_w;
    for i in 1..=DIM {
        v += digamma(0.5 * (nu + 1.0 - i as f64));
    }
    v
}

fn ln_beta_fn(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// `|| L^-1 v ||^2 = v^T (L L^T)^-1 v`.
fn mahalanobis(chol: &Matrix4<f64>, v: &Vector4<f64>) -> f64 {
    let mut y = [0.0; DIM];
    for i in 0..DIM {
        let mut s = v[i];
        for j in 0..i {
            s -= chol[(i, j)] * y[j];
        }
        y[i] = s / chol[(i, i)];
    }
    y.iter().map(|v| v * v).sum()
}

fn factor_from(
    beta: f64,
    nu: f64,
    mean: Vector4<f64>,
    w_inv: Matrix4<f64>,
    index: usize,
) -> Result<Factor> {
    let w_inv = 0.5 * (w_inv + w_inv.transpose());
    let chol = Cholesky::new(w_inv).ok_or(Error::NotPositiveDefinite(index))?;
    let l = chol.l();
    let ln_det_w_inv: f64 = 2.0 * (0..DIM).map(|i| l[(i, i)].ln()).sum::<f64>();
    if !ln_det_w_inv.is_finite() {
        return Err(Error::NotPositiveDefinite(index));
    }
    let w = chol.inverse();
    let ln_det_w = -ln_det_w_inv;
    Ok(Factor {
        beta,
        nu,
        mean,
        w_inv,
        w,
        chol: l,
        ln_det_w,
        e_ln_det_lambda: e_ln_det_lambda(ln_det_w, nu),
    })
}

impl<'a> Model<'a> {
    fn new(points: &'a [Vector4<f64>], k: usize, concentration: f64) -> Result<Self> {
        let n = points.len() as f64;
        let mean0 = points.iter().sum::<Vector4<f64>>() / n;
        let mut cov = Matrix4::zeros();
        for p in points {
            let d = p - mean0;
            cov += d * d.transpose();
        }
        cov /= n;
        let reg = (1e-6 * cov.trace() / DIM_F).max(REG_FLOOR);
        // Without spread the empirical covariance is singular; the jitter
        // variance keeps the prior scale proper.
        let w0_inv = cov + Matrix4::identity() * reg;
        let chol = Cholesky::new(w0_inv).ok_or(Error::NotPositiveDefinite(0))?;
        let ln_det_w0 = -2.0 * (0..DIM).map(|i| chol.l()[(i, i)].ln()).sum::<f64>();
        let nu0 = DIM_F;
        let prior = Prior {
            concentration,
            beta0: 1.0,
            nu0,
            mean0,
            w0_inv,
            ln_b0: ln_wishart_norm(ln_det_w0, nu0),
        };
        Ok(Self {
            points,
            prior,
            reg,
            k,
            factors: Vec::with_capacity(k),
            sticks: Vec::new(),
            e_ln_pi: vec![0.0; k],
        })
    }

    fn m_step(&mut self, resp: &[Vec<f64>]) -> Result<()> {
        let p = &self.prior;
        let mut counts = vec![0.0; self.k];
        let mut factors = Vec::with_capacity(self.k);
        for c in 0..self.k {
            let mut nk = 0.0;
            let mut sum = Vector4::zeros();
            for (x, r) in self.points.iter().zip(resp) {
                nk += r[c];
                sum += x * r[c];
            }
            let xbar = if nk > 0.0 { sum / nk } else { p.mean0 };
            let mut scatter = Matrix4::zeros();
            if nk > 0.0 {
                for (x, r) in self.points.iter().zip(resp) {
                    if r[c] > 0.0 {
                        let d = x - xbar;
                        scatter += (d * d.transpose()) * r[c];
                    }
                }
            }
            let beta = p.beta0 + nk;
            let mean = (p.mean0 * p.beta0 + xbar * nk) / beta;
            let dm = xbar - p.mean0;
            let w_inv = p.w0_inv
                + scatter
                + Matrix4::identity() * (nk * self.reg)
                + (dm * dm.transpose()) * (p.beta0 * nk / beta);
            factors.push(factor_from(beta, p.nu0 + nk, mean, w_inv, c)?);
            counts[c] = nk;
        }
        self.factors = factors;

        self.sticks.clear();
        let mut tails = vec![0.0; self.k];
        for c in (0..self.k.saturating_sub(1)).rev() {
            tails[c] = tails[c + 1] + counts[c + 1];
        }
        for c in 0..self.k.saturating_sub(1) {
            self.sticks
                .push((1.0 + counts[c], self.prior.concentration + tails[c]));
        }
        let mut acc = 0.0;
        for c in 0..self.k {
            if c + 1 < self.k {
                let (a, b) = self.sticks[c];
                let dab = digamma(a + b);
                self.e_ln_pi[c] = acc + digamma(a) - dab;
                acc += digamma(b) - dab;
            } else {
                self.e_ln_pi[c] = acc;
            }
        }
        Ok(())
    }

    /// Unnormalized log responsibility of component `c` for point `x`.
    fn log_rho(&self, x: &Vector4<f64>, c: usize) -> f64 {
        let f = &self.factors[c];
        let quad = mahalanobis(&f.chol, &(x - f.mean)) + self.reg * f.w.trace();
        self.e_ln_pi[c] + 0.5 * f.e_ln_det_lambda
            - 0.5 * DIM_F * LN_2PI
            - 0.5 * DIM_F / f.beta
            - 0.5 * f.nu * quad
    }

    /// Optimal responsibilities for the current factors. Components flagged
    /// in `excluded` receive none.
    fn e_step(&self, resp: &mut [Vec<f64>], excluded: Option<usize>) {
        let mut lr = vec![0.0; self.k];
        for (x, r) in self.points.iter().zip(resp.iter_mut()) {
            for (c, v) in lr.iter_mut().enumerate() {
                *v = if Some(c) == excluded {
                    f64::NEG_INFINITY
                } else {
                    self.log_rho(x, c)
                };
            }
            let max = lr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let norm: f64 = lr.iter().map(|v| (v - max).exp()).sum();
            let lse = max + norm.ln();
            for (rc, v) in r.iter_mut().zip(&lr) {
                *rc = (v - lse).exp();
            }
        }
    }

    fn elbo(&self, resp: &[Vec<f64>]) -> f64 {
        let p = &self.prior;
        let mut total = 0.0;
        // E[ln p(X, Z | ...)] - E[ln q(Z)]
        for (x, r) in self.points.iter().zip(resp) {
            for (c, &rc) in r.iter().enumerate() {
                if rc > 0.0 {
                    total += rc * (self.log_rho(x, c) - rc.ln());
                }
            }
        }
        // stick-breaking weights: E[ln p(v)] - E[ln q(v)]
        for &(a, b) in &self.sticks {
            let dab = digamma(a + b);
            let e_ln_v = digamma(a) - dab;
            let e_ln_1mv = digamma(b) - dab;
            total += p.concentration.ln() + (p.concentration - 1.0) * e_ln_1mv;
            total -= -ln_beta_fn(a, b) + (a - 1.0) * e_ln_v + (b - 1.0) * e_ln_1mv;
        }
        // Normal-Wishart: E[ln p(mu, Lambda)] - E[ln q(mu, Lambda)]
        for f in &self.factors {
            let dm = f.mean - p.mean0;
            let e_ln_p = 0.5
                * (DIM_F * (p.beta0 / (2.0 * std::f64::consts::PI)).ln() + f.e_ln_det_lambda
                    - DIM_F * p.beta0 / f.beta
                    - p.beta0 * f.nu * (dm.transpose() * f.w * dm)[(0, 0)])
                + p.ln_b0
                + 0.5 * (p.nu0 - DIM_F - 1.0) * f.e_ln_det_lambda
                - 0.5 * f.nu * (p.w0_inv * f.w).trace();
            let entropy_lambda = -ln_wishart_norm(f.ln_det_w, f.nu)
                - 0.5 * (f.nu - DIM_F - 1.0) * f.e_ln_det_lambda
                + 0.5 * f.nu * DIM_F;
            let e_ln_q = 0.5 * f.e_ln_det_lambda
                + 0.5 * DIM_F * (f.beta / (2.0 * std::f64::consts::PI)).ln()
                - 0.5 * DIM_F
                - entropy_lambda;
            total += e_ln_p - e_ln_q;
        }
        total
    }

    fn expected_weights(&self) -> Vec<f64> {
        let mut remaining = 1.0;
        let mut w = Vec::with_capacity(self.k);
        for c in 0..self.k {
            if c + 1 < self.k {
                let (a, b) = self.sticks[c];
                let v = a / (a + b);
                w.push(remaining * v);
                remaining *= 1.0 - v;
            } else {
                w.push(remaining);
            }
        }
        w
    }

    /// Coordinate ascent from the given responsibilities until the ELBO
    /// settles or the iteration budget runs out. Ends with an E-step so the
    /// returned responsibilities match the final factors.
    fn run(&mut self, mut resp: Vec<Vec<f64>>, cfg: &ClusterConfig) -> Result<Run> {
        let mut trace = Vec::new();
        let mut converged = false;
        for _ in 0..cfg.max_iters {
            self.m_step(&resp)?;
            let elbo = self.elbo(&resp);
            let done = trace
                .last()
                .is_some_and(|prev: &f64| (elbo - prev).abs() < cfg.elbo_tol);
            trace.push(elbo);
            if done {
                converged = true;
                break;
            }
            self.e_step(&mut resp, None);
        }
        self.e_step(&mut resp, None);
        trace.push(self.elbo(&resp));
        Ok(Run {
            resp,
            trace,
            converged,
        })
    }

    fn occupancy(&self, resp: &[Vec<f64>]) -> Vec<usize> {
        let mut owned = vec![0; self.k];
        for l in argmax_rows(resp) {
            owned[l] += 1;
        }
        owned
    }

    fn into_state(self, run: Run) -> MixtureState {
        let owned = self.occupancy(&run.resp);
        let weights = self.expected_weights();
        let components = self
            .factors
            .iter()
            .zip(weights)
            .map(|(f, weight)| {
                let cov = f.w_inv / f.nu;
                MixtureComponent {
                    weight,
                    mean: [f.mean[0], f.mean[1], f.mean[2], f.mean[3]],
                    covariance: std::array::from_fn(|i| std::array::from_fn(|j| cov[(i, j)])),
                }
            })
            .collect();
        MixtureState {
            k_max: self.k,
            components,
            responsibilities: run.resp,
            elbo_trace: run.trace,
            effective_components: owned.iter().filter(|&&o| o > 0).count(),
            converged: run.converged,
            regularization: self.reg,
        }
    }
}

struct Run {
    resp: Vec<Vec<f64>>,
    trace: Vec<f64>,
    converged: bool,
}

impl Run {
    fn final_elbo(&self) -> f64 {
        *self.trace.last().unwrap_or(&f64::NEG_INFINITY)
    }
}

pub(crate) fn argmax_rows(resp: &[Vec<f64>]) -> Vec<usize> {
    resp.iter().map(|r| crate::model::argmax(r)).collect()
}

fn one_hot(labels: &[usize], k: usize) -> Vec<Vec<f64>> {
    labels
        .iter()
        .map(|&l| {
            let mut row = vec![0.0; k];
            row[l] = 1.0;
            row
        })
        .collect()
}

/// Tries removing under-populated components one at a time: the component's
/// points are handed to the others and the fit is rerun. A removal is kept
/// only if the final ELBO improves. Escapes optima where a few outlying
/// samples hold a component of their own.
fn prune<'a>(
    mut model: Model<'a>,
    mut run: Run,
    cfg: &ClusterConfig,
) -> Result<(Model<'a>, Run)> {
    let mut rejected = vec![false; model.k];
    loop {
        let owned = model.occupancy(&run.resp);
        let occupied: Vec<usize> = (0..model.k).filter(|&c| owned[c] > 0).collect();
        if occupied.len() < 2 {
            break;
        }
        let mean_size = owned.iter().sum::<usize>() as f64 / occupied.len() as f64;
        let candidate = occupied
            .iter()
            .copied()
            .filter(|&c| !rejected[c] && (owned[c] as f64) < 0.5 * mean_size)
            .min_by_key(|&c| (owned[c], c));
        let Some(c) = candidate else { break };

        let mut trial = model.clone();
        let mut resp = run.resp.clone();
        trial.e_step(&mut resp, Some(c));
        let trial_run = trial.run(resp, cfg)?;
        if trial_run.final_elbo() > run.final_elbo() {
            model = trial;
            run = trial_run;
            rejected.iter_mut().for_each(|r| *r = false);
        } else {
            rejected[c] = true;
        }
    }
    Ok((model, run))
}

/// Number of k-means clusters seeding restart `r`: the full `k_max` first,
/// then successively halved, so coarse starting points compete with fine
/// ones on final ELBO.
fn init_clusters(k_max: usize, restart: usize) -> usize {
    let mut k = k_max;
    for _ in 0..restart {
        k = k.div_ceil(2);
    }
    k.max(1)
}

/// Fits the mixture with `k_max` components, keeping the best of
/// `cfg.n_init` restarts by final ELBO.
pub fn fit_bgm(points: &[Point], k_max: usize, cfg: &ClusterConfig) -> Result<MixtureState> {
    cfg.validate()?;
    if points.is_empty() {
        return Err(Error::NothingToCluster);
    }
    if k_max == 0 {
        return Err(Error::Config("k_max must be at least 1".into()));
    }
    if let Some(i) = points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite(i));
    }
    let data: Vec<Vector4<f64>> = points.iter().map(|p| Vector4::from(*p)).collect();
    let concentration = cfg
        .weight_concentration_prior
        .unwrap_or(1.0 / k_max as f64);

    let mut best: Option<(Model, Run)> = None;
    for restart in 0..cfg.n_init {
        let mut rng = rng_for(cfg.seed, stream::BGM_RESTART + restart as u64);
        let init = kmeans_labels(points, init_clusters(k_max, restart), &mut rng);
        let mut model = Model::new(&data, k_max, concentration)?;
        let run = model.run(one_hot(&init, k_max), cfg)?;
        let (model, run) = prune(model, run, cfg)?;
        if best
            .as_ref()
            .is_none_or(|(_, b)| run.final_elbo() > b.final_elbo())
        {
            best = Some((model, run));
        }
    }
    let (model, run) = best.expect("n_init >= 1");
    Ok(model.into_state(run))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn cfg(seed: u64) -> ClusterConfig {
        ClusterConfig {
            seed,
            ..Default::default()
        }
    }

    fn blobs(centers: &[[f64; 4]], per: usize, sigma: f64, seed: u64) -> Vec<Point> {
        let mut rng = rng_for(seed, 99);
        let noise = Normal::new(0.0, sigma).unwrap();
        centers
            .iter()
            .flat_map(|c| {
                (0..per)
                    .map(|_| std::array::from_fn(|j| c[j] + noise.sample(&mut rng)))
                    .collect::<Vec<Point>>()
            })
            .collect()
    }

    #[test]
    fn single_point() {
        let m = fit_bgm(&[[1.0, 2.0, 3.0, 4.0]], 1, &cfg(0)).unwrap();
        assert_eq!(m.effective_components, 1);
        for (a, b) in m.components[0].mean.iter().zip([1.0, 2.0, 3.0, 4.0]) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!((m.responsibilities[0][0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_blobs_recovered() {
        let pts = blobs(&[[100.0, 100.0, 150.0, 160.0], [300.0, 90.0, 360.0, 170.0]], 60, 2.0, 3);
        let m = fit_bgm(&pts, 5, &cfg(11)).unwrap();
        assert_eq!(m.effective_components, 2);
        let l = argmax_rows(&m.responsibilities);
        assert!(l[..60].iter().all(|&x| x == l[0]));
        assert!(l[60..].iter().all(|&x| x == l[60]));
        assert_ne!(l[0], l[60]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            fit_bgm(&[[0.0, f64::NAN, 1.0, 1.0]], 1, &cfg(0)),
            Err(Error::NonFinite(0))
        ));
        assert!(fit_bgm(&[], 1, &cfg(0)).is_err());
        assert!(fit_bgm(&[[0.0; 4]], 0, &cfg(0)).is_err());
    }

    #[test]
    fn invariants_on_random_fits() {
        let mut rng = rng_for(5, 0);
        for trial in 0..40 {
            let n = rng.random_range(1..40);
            let pts: Vec<Point> = (0..n)
                .map(|_| std::array::from_fn(|_| rng.random_range(-50.0..50.0)))
                .collect();
            let k = rng.random_range(1..6);
            let m = fit_bgm(&pts, k, &cfg(trial)).unwrap();
            for w in m.elbo_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-8, "trial {trial}: {} -> {}", w[0], w[1]);
            }
            for r in &m.responsibilities {
                assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            for c in &m.components {
                let cov = Matrix4::from_fn(|i, j| c.covariance[i][j]);
                assert!((cov - cov.transpose()).amax() < 1e-9 * cov.amax().max(1.0));
                let eig = cov.symmetric_eigenvalues();
                assert!(eig.min() > 0.0, "trial {trial}: {eig}");
            }
            let wsum: f64 = m.components.iter().map(|c| c.weight).sum();
            assert!((wsum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn duplicated_points_stay_one_component() {
        let pts = vec![[10.0, 20.0, 30.0, 40.0]; 151];
        let m = fit_bgm(&pts, 2, &cfg(1)).unwrap();
        assert_eq!(m.effective_components, 1);
    }
}
