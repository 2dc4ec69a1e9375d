//! (mu/mu_w, lambda) CMA-ES with an ask/tell interface.
//!
//! Positive recombination weights only, no restarts. The eigendecomposition of
//! `C` is refreshed after every tell. A tell may carry fewer entries than the
//! population size; the weight vector is then truncated to the supplied count
//! and renormalized.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::rng::RngStream;

/// Relative floor applied to the eigenvalues of `C` after each update.
const EIGEN_FLOOR: f64 = 1e-12;
const SIGMA_MIN: f64 = 1e-300;
const SIGMA_MAX: f64 = 1e300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatedSolution {
    pub candidate: Vec<f64>,
    pub fitness: f64,
}

impl EvaluatedSolution {
    pub fn new(candidate: Vec<f64>, fitness: f64) -> Self {
        Self { candidate, fitness }
    }
}

/// Strategy parameters derived from `(d, m)` at construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Params {
    weights: Vec<f64>,
    mu_eff: f64,
    c_sigma: f64,
    d_sigma: f64,
    c_c: f64,
    c_1: f64,
    c_mu: f64,
    chi_n: f64,
}

impl Params {
    fn new(dim: usize, lambda: usize) -> Self {
        let n = dim as f64;
        let mu = lambda / 2;
        let raw: Vec<f64> = (1..=mu)
            .map(|i| ((lambda as f64 + 1.0) / 2.0).ln() - (i as f64).ln())
            .collect();
        let sum: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / sum).collect();
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();

        let c_sigma = (mu_eff + 2.0) / (n + mu_eff + 5.0);
        let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (n + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
        let c_c = (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n);
        let c_1 = 2.0 / ((n + 1.3).powi(2) + mu_eff);
        let c_mu = (1.0 - c_1)
            .min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((n + 2.0).powi(2) + mu_eff));
        let chi_n = n.sqrt() * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));
        Self {
            weights,
            mu_eff,
            c_sigma,
            d_sigma,
            c_c,
            c_1,
            c_mu,
            chi_n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmaesOptimizer {
    dim: usize,
    population: usize,
    mean: Vec<f64>,
    sigma: f64,
    /// Row-major `d x d`.
    cov: Vec<f64>,
    /// Eigenvectors of `C` as columns, row-major `d x d`.
    basis: Vec<f64>,
    /// Square roots of the eigenvalues of `C`.
    scales: Vec<f64>,
    path_sigma: Vec<f64>,
    path_c: Vec<f64>,
    generation: usize,
    params: Params,
    best: Option<EvaluatedSolution>,
    rng: RngStream,
}

impl CmaesOptimizer {
    pub fn new(
        dim: usize,
        population: usize,
        sigma0: f64,
        initial_mean: Option<Vec<f64>>,
        rng: RngStream,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("CMA-ES dimension must be >= 1"));
        }
        if population < 4 {
            return Err(Error::config(format!(
                "CMA-ES population must be >= 4, got {population}"
            )));
        }
        if !(sigma0.is_finite() && sigma0 > 0.0) {
            return Err(Error::config(format!("CMA-ES sigma0 must be > 0, got {sigma0}")));
        }
        let mean = initial_mean.unwrap_or_else(|| vec![0.0; dim]);
        check_len("CMA-ES initial mean", dim, mean.len())?;
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("CMA-ES initial mean"));
        }
        Ok(Self {
            dim,
            population,
            mean,
            sigma: sigma0,
            cov: identity(dim),
            basis: identity(dim),
            scales: vec![1.0; dim],
            path_sigma: vec![0.0; dim],
            path_c: vec![0.0; dim],
            generation: 0,
            params: Params::new(dim, population),
            best: None,
            rng,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn population(&self) -> usize {
        self.population
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn covariance(&self) -> &[f64] {
        &self.cov
    }

    pub fn generation(&self) -> usize {
        self.generation
    }

    pub fn weights(&self) -> &[f64] {
        &self.params.weights
    }

    pub fn best_seen(&self) -> Result<&EvaluatedSolution> {
        self.best
            .as_ref()
            .ok_or_else(|| Error::contract("best_seen requested before any tell"))
    }

    pub fn try_best_seen(&self) -> Option<&EvaluatedSolution> {
        self.best.as_ref()
    }

    /// Samples `m` candidates `mean + sigma * B * D * n`, `n ~ N(0, I)`.
    pub fn ask(&mut self) -> Vec<Vec<f64>> {
        (0..self.population).map(|_| self.sample_one()).collect()
    }

    fn sample_one(&mut self) -> Vec<f64> {
        let d = self.dim;
        let n = self.rng.normal_vec(d);
        let scaled: Vec<f64> = n.iter().zip(&self.scales).map(|(a, s)| a * s).collect();
        (0..d)
            .map(|r| {
                let by: f64 = (0..d).map(|c| self.basis[r * d + c] * scaled[c]).sum();
                self.mean[r] + self.sigma * by
            })
            .collect()
    }

    /// Rank-based update from evaluated candidates (lower fitness is better).
    pub fn tell(&mut self, solutions: &[EvaluatedSolution]) -> Result<()> {
        if solutions.is_empty() {
            return Err(Error::contract("tell needs at least one solution"));
        }
        for s in solutions {
            check_len("told candidate", self.dim, s.candidate.len())?;
            if !s.fitness.is_finite() {
                return Err(Error::NonFinite("told fitness"));
            }
            if s.candidate.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("told candidate"));
            }
        }

        let mut order: Vec<usize> = (0..solutions.len()).collect();
        order.sort_by(|&a, &b| solutions[a].fitness.total_cmp(&solutions[b].fitness));

        let best_now = &solutions[order[0]];
        if self.best.as_ref().is_none_or(|b| best_now.fitness < b.fitness) {
            self.best = Some(best_now.clone());
        }

        let d = self.dim;
        let p = &self.params;
        let k = p.weights.len().min(solutions.len());
        let weights: Vec<f64> = {
            let w = &p.weights[..k];
            let s: f64 = w.iter().sum();
            w.iter().map(|x| x / s).collect()
        };
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();

        let steps: Vec<Vec<f64>> = order[..k]
            .iter()
            .map(|&i| {
                solutions[i]
                    .candidate
                    .iter()
                    .zip(&self.mean)
                    .map(|(x, m)| (x - m) / self.sigma)
                    .collect()
            })
            .collect();
        let mut y_w = vec![0.0; d];
        for (w, y) in weights.iter().zip(&steps) {
            for (acc, v) in y_w.iter_mut().zip(y) {
                *acc += w * v;
            }
        }

        for (m, y) in self.mean.iter_mut().zip(&y_w) {
            *m += self.sigma * y;
        }

        // C^{-1/2} y_w = B D^{-1} B^T y_w
        let bt_y: Vec<f64> = (0..d)
            .map(|c| (0..d).map(|r| self.basis[r * d + c] * y_w[r]).sum())
            .collect();
        let inv_sqrt_y: Vec<f64> = (0..d)
            .map(|r| {
                (0..d)
                    .map(|c| self.basis[r * d + c] * bt_y[c] / self.scales[c])
                    .sum()
            })
            .collect();

        let cs = p.c_sigma;
        let norm_s = (cs * (2.0 - cs) * mu_eff).sqrt();
        for (ps, v) in self.path_sigma.iter_mut().zip(&inv_sqrt_y) {
            *ps = (1.0 - cs) * *ps + norm_s * v;
        }
        let ps_norm = norm(&self.path_sigma);
        let gen = (self.generation + 1) as f64;
        let h_sigma = ps_norm / (1.0 - (1.0 - cs).powf(2.0 * gen)).sqrt()
            < (1.4 + 2.0 / (d as f64 + 1.0)) * p.chi_n;
        let h = if h_sigma { 1.0 } else { 0.0 };

        let cc = p.c_c;
        let norm_c = (cc * (2.0 - cc) * mu_eff).sqrt();
        for (pc, y) in self.path_c.iter_mut().zip(&y_w) {
            *pc = (1.0 - cc) * *pc + h * norm_c * y;
        }

        let delta_h = (1.0 - h) * cc * (2.0 - cc);
        let decay = 1.0 - p.c_1 - p.c_mu;
        for r in 0..d {
            for c in 0..d {
                let rank_one = self.path_c[r] * self.path_c[c] + delta_h * self.cov[r * d + c];
                let rank_mu: f64 = weights
                    .iter()
                    .zip(&steps)
                    .map(|(w, y)| w * y[r] * y[c])
                    .sum();
                self.cov[r * d + c] =
                    decay * self.cov[r * d + c] + p.c_1 * rank_one + p.c_mu * rank_mu;
            }
        }

        self.sigma *= ((cs / p.d_sigma) * (ps_norm / p.chi_n - 1.0)).exp();
        if !self.sigma.is_finite() {
            self.sigma = SIGMA_MAX;
        }
        self.sigma = self.sigma.clamp(SIGMA_MIN, SIGMA_MAX);

        self.refresh_eigen()?;
        self.generation += 1;
        Ok(())
    }

    /// Symmetrizes `C`, floors its spectrum and recomputes `B`, `D`.
    fn refresh_eigen(&mut self) -> Result<()> {
        let d = self.dim;
        for r in 0..d {
            for c in r + 1..d {
                let avg = 0.5 * (self.cov[r * d + c] + self.cov[c * d + r]);
                self.cov[r * d + c] = avg;
                self.cov[c * d + r] = avg;
            }
        }
        if self.cov.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("CMA-ES covariance"));
        }
        let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, &self.cov));
        let max_ev = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
        let floor = EIGEN_FLOOR * max_ev.max(f64::MIN_POSITIVE);
        let mut repaired = false;
        let values: Vec<f64> = eig
            .eigenvalues
            .iter()
            .map(|&ev| {
                if ev < floor {
                    repaired = true;
                    floor
                } else {
                    ev
                }
            })
            .collect();
        for r in 0..d {
            for c in 0..d {
                self.basis[r * d + c] = eig.eigenvectors[(r, c)];
            }
        }
        self.scales = values.iter().map(|v| v.sqrt()).collect();
        if repaired {
            // Rebuild C = B diag(values) B^T from the floored spectrum.
            for r in 0..d {
                for c in r..d {
                    let v: f64 = (0..d)
                        .map(|k| self.basis[r * d + k] * values[k] * self.basis[c * d + k])
                        .sum();
                    self.cov[r * d + c] = v;
                    self.cov[c * d + r] = v;
                }
            }
        }
        Ok(())
    }

    /// Smallest eigenvalue of the current covariance.
    pub fn min_eigenvalue(&self) -> f64 {
        self.scales.iter().map(|s| s * s).fold(f64::INFINITY, f64::min)
    }
}

fn identity(d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        m[i * d + i] = 1.0;
    }
    m
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opt(d: usize, m: usize, sigma: f64) -> CmaesOptimizer {
        CmaesOptimizer::new(d, m, sigma, None, RngStream::new(1, "cma")).unwrap()
    }

    #[test]
    fn initial_state() {
        let o = opt(8, 10, 0.5);
        assert_eq!(o.covariance(), identity(8).as_slice());
        assert_eq!(o.mean(), vec![0.0; 8].as_slice());
        assert_eq!(o.generation(), 0);
    }

    #[test]
    fn rejects_bad_configuration() {
        let r = || RngStream::new(1, "x");
        assert!(CmaesOptimizer::new(8, 10, 0.0, None, r()).is_err());
        assert!(CmaesOptimizer::new(8, 10, -1.0, None, r()).is_err());
        assert!(CmaesOptimizer::new(8, 3, 0.5, None, r()).is_err());
        assert!(CmaesOptimizer::new(0, 10, 0.5, None, r()).is_err());
        assert!(CmaesOptimizer::new(2, 10, 0.5, Some(vec![0.0]), r()).is_err());
    }

    #[test]
    fn positive_weight_count_is_half_population() {
        for m in [4, 5, 10, 11, 20] {
            let o = opt(10, m, 0.5);
            assert_eq!(o.weights().iter().filter(|w| **w > 0.0).count(), m / 2);
            assert!((o.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ask_shape_and_distinctness() {
        let mut o = opt(8, 10, 0.5);
        let xs = o.ask();
        assert_eq!(xs.len(), 10);
        assert!(xs.iter().all(|x| x.len() == 8));
        for i in 0..xs.len() {
            for j in i + 1..xs.len() {
                assert_ne!(xs[i], xs[j]);
            }
        }
    }

    #[test]
    fn tiny_sigma_collapses_to_mean() {
        let mean = vec![0.3, -1.2, 4.0];
        let mut o =
            CmaesOptimizer::new(3, 6, 1e-300, Some(mean.clone()), RngStream::new(2, "s")).unwrap();
        for x in o.ask() {
            assert_eq!(x, mean);
        }
    }

    #[test]
    fn tell_at_mean_keeps_mean() {
        let mean = vec![0.5, -0.25, 2.0, 1.0];
        let mut o =
            CmaesOptimizer::new(4, 8, 0.3, Some(mean.clone()), RngStream::new(3, "t")).unwrap();
        let sols: Vec<_> = (0..8).map(|_| EvaluatedSolution::new(mean.clone(), 1.0)).collect();
        o.tell(&sols).unwrap();
        for (a, b) in o.mean().iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tell_rejects_non_finite_and_empty() {
        let mut o = opt(2, 4, 0.5);
        assert!(o.tell(&[]).is_err());
        let bad = vec![EvaluatedSolution::new(vec![0.0, 0.0], f64::NAN)];
        assert!(matches!(o.tell(&bad), Err(Error::NonFinite(_))));
        let short = vec![EvaluatedSolution::new(vec![0.0], 1.0)];
        assert!(o.tell(&short).is_err());
        assert_eq!(o.generation(), 0);
    }

    #[test]
    fn best_seen_before_tell_is_error() {
        assert!(opt(2, 4, 0.5).best_seen().is_err());
    }

    #[test]
    fn best_seen_is_running_min() {
        let mut o = opt(3, 6, 0.5);
        let mut sols: Vec<_> = o.ask().into_iter().map(|x| EvaluatedSolution::new(x, 9.0)).collect();
        sols.push(EvaluatedSolution::new(vec![1.0; 3], 5.0));
        sols.push(EvaluatedSolution::new(vec![0.0; 3], 1.0));
        o.tell(&sols).unwrap();
        assert_eq!(o.best_seen().unwrap().fitness, 1.0);
        let worse: Vec<_> = o.ask().into_iter().map(|x| EvaluatedSolution::new(x, 3.0)).collect();
        o.tell(&worse).unwrap();
        assert_eq!(o.best_seen().unwrap().fitness, 1.0);
        assert_eq!(o.best_seen().unwrap().candidate, vec![0.0; 3]);
    }

    #[test]
    fn identical_tells_identical_state() {
        let mut a = opt(5, 10, 0.5);
        let xs = a.ask();
        let mut b = a.clone();
        let sols: Vec<_> = xs
            .iter()
            .map(|x| EvaluatedSolution::new(x.clone(), x.iter().map(|v| v * v).sum()))
            .collect();
        a.tell(&sols).unwrap();
        b.tell(&sols).unwrap();
        assert_eq!(a.mean(), b.mean());
        assert_eq!(a.sigma().to_bits(), b.sigma().to_bits());
        assert_eq!(a.covariance(), b.covariance());
    }

    #[test]
    fn partial_tell_is_accepted() {
        let mut o = opt(4, 10, 0.5);
        let xs = o.ask();
        let sols: Vec<_> = xs[..3]
            .iter()
            .map(|x| EvaluatedSolution::new(x.clone(), x[0]))
            .collect();
        o.tell(&sols).unwrap();
        assert_eq!(o.generation(), 1);
        assert!(o.sigma().is_finite() && o.sigma() > 0.0);
    }

    #[test]
    fn sphere_converges() {
        let mut o = opt(10, 10, 0.5);
        let target: Vec<f64> = (0..10).map(|i| (i as f64 - 4.5) / 5.0).collect();
        let f = |x: &[f64]| x.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let mut evals = 0;
        while evals < 3000 {
            let sols: Vec<_> = o.ask().into_iter().map(|x| {
                let v = f(&x);
                EvaluatedSolution::new(x, v)
            }).collect();
            evals += sols.len();
            o.tell(&sols).unwrap();
            if o.best_seen().unwrap().fitness < 1e-8 {
                break;
            }
        }
        assert!(o.best_seen().unwrap().fitness < 1e-8, "evals {evals}");
    }
}
