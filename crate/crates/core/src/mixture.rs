//! Analytic conditioned diffusion model over isotropic Gaussian mixtures.
//!
//! Component `k` with mean μ_k and std σ diffuses at timestep `t` to
//! N(√ᾱ_t μ_k, (ᾱ_t σ² + 1 − ᾱ_t) I), so densities, scores and
//! ε-predictions are all available in closed form. A condition is a mask
//! over components; the conditional model is the renormalized sub-mixture.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, Error, Result};
use crate::schedule::NoiseSchedule;
use crate::vecmath::{axpy, log_sum_exp};

/// Reserved condition name for the unconditional model (all components).
pub const NULL_CONDITION: &str = "null";

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedMixture {
    dim: usize,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    sigma: f64,
    conditions: BTreeMap<String, Vec<bool>>,
}

/// x_t = √ᾱ_t x_0 + √(1 − ᾱ_t) ε.
pub fn diffuse(sched: &NoiseSchedule, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
    check_dim(x0.len(), eps.len())?;
    sched.check_t(t, 0)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

pub fn standard_normal_vec<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

impl ConditionedMixture {
    /// `conditions` maps names to component indices; the `null` condition
    /// (every component) is added automatically and may not be redefined
    /// with a different mask.
    pub fn new(
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        sigma: f64,
        conditions: BTreeMap<String, Vec<usize>>,
    ) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k {
            return Err(Error::InvalidMixture(format!(
                "{} weights for {} means",
                k,
                means.len()
            )));
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().any(|m| m.len() != dim) {
            return Err(Error::InvalidMixture("means must share a positive dimension".into()));
        }
        if weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::InvalidMixture("weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidMixture(format!("weights sum to {total}, not 1")));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidMixture(format!("sigma must be positive, got {sigma}")));
        }
        let mut masks = BTreeMap::new();
        for (name, idx) in conditions {
            let mut mask = vec![false; k];
            for &i in &idx {
                if i >= k {
                    return Err(Error::InvalidMixture(format!(
                        "condition `{name}` names component {i} of {k}"
                    )));
                }
                mask[i] = true;
            }
            if !mask.iter().any(|&m| m) {
                return Err(Error::InvalidMixture(format!("condition `{name}` is empty")));
            }
            if name == NULL_CONDITION && mask.iter().any(|&m| !m) {
                return Err(Error::InvalidMixture("`null` must select every component".into()));
            }
            masks.insert(name, mask);
        }
        masks.insert(NULL_CONDITION.to_string(), vec![true; k]);
        Ok(Self {
            dim,
            weights,
            means,
            sigma,
            conditions: masks,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn condition_names(&self) -> impl Iterator<Item = &str> {
        self.conditions.keys().map(String::as_str)
    }

    pub fn mask(&self, cond: &str) -> Result<&[bool]> {
        self.conditions
            .get(cond)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownCondition(cond.to_string()))
    }

    /// Masked components with renormalized log-weights.
    fn components(&self, cond: &str) -> Result<Vec<(usize, f64)>> {
        let mask = self.mask(cond)?;
        let total: f64 = self
            .weights
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(w, _)| w)
            .sum();
        Ok(mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(k, _)| (k, (self.weights[k] / total).ln()))
            .collect())
    }

    /// Variance of every diffused component at timestep `t`.
    pub fn diffused_variance(&self, sched: &NoiseSchedule, t: usize) -> f64 {
        let ab = sched.alpha_bar(t);
        ab * self.sigma * self.sigma + 1.0 - ab
    }

    /// Per-component log joint terms `log w_k + log N(x; √ᾱ μ_k, v I)` and
    /// the matching component indices.
    fn log_terms(
        &self,
        x: &[f64],
        t: usize,
        cond: &str,
        sched: &NoiseSchedule,
    ) -> Result<(Vec<usize>, Vec<f64>, f64)> {
        check_dim(self.dim, x.len())?;
        sched.check_t(t, 0)?;
        let comps = self.components(cond)?;
        let sa = sched.alpha_bar(t).sqrt();
        let v = self.diffused_variance(sched, t);
        let norm = -0.5 * self.dim as f64 * (2.0 * PI * v).ln();
        let mut idx = Vec::with_capacity(comps.len());
        let mut terms = Vec::with_capacity(comps.len());
        for (k, lw) in comps {
            let d2: f64 = x
                .iter()
                .zip(&self.means[k])
                .map(|(xi, mi)| {
                    let d = xi - sa * mi;
                    d * d
                })
                .sum();
            idx.push(k);
            terms.push(lw + norm - 0.5 * d2 / v);
        }
        Ok((idx, terms, v))
    }

    /// log p_t(x | cond).
    pub fn log_density(
        &self,
        x: &[f64],
        t: usize,
        cond: &str,
        sched: &NoiseSchedule,
    ) -> Result<f64> {
        let (_, terms, _) = self.log_terms(x, t, cond, sched)?;
        Ok(log_sum_exp(&terms))
    }

    /// ∇_x log p_t(x | cond); defined for every `t` including 0.
    pub fn score(&self, x: &[f64], t: usize, cond: &str, sched: &NoiseSchedule) -> Result<Vec<f64>> {
        let (idx, terms, v) = self.log_terms(x, t, cond, sched)?;
        let lse = log_sum_exp(&terms);
        let sa = sched.alpha_bar(t).sqrt();
        // Σ_k r_k √ᾱ μ_k, then score = (that − x) / v
        let mut target = vec![0.0; self.dim];
        for (k, lt) in idx.into_iter().zip(terms) {
            let r = (lt - lse).exp();
            axpy(&mut target, r * sa, &self.means[k]);
        }
        Ok(target.iter().zip(x).map(|(m, xi)| (m - xi) / v).collect())
    }

    /// ε_φ(x_t, t, cond) = −√(1 − ᾱ_t) ∇ log p_t(x_t | cond), for `t >= 1`.
    pub fn eps_predict(
        &self,
        x: &[f64],
        t: usize,
        cond: &str,
        sched: &NoiseSchedule,
    ) -> Result<Vec<f64>> {
        sched.check_t(t, 1)?;
        let mut s = self.score(x, t, cond, sched)?;
        let c = -(1.0 - sched.alpha_bar(t)).sqrt();
        s.iter_mut().for_each(|v| *v *= c);
        Ok(s)
    }

    /// Classifier-free guidance: ε(y) + s·(ε(y) − ε(null)).
    pub fn eps_cfg(
        &self,
        x: &[f64],
        t: usize,
        cond: &str,
        scale: f64,
        sched: &NoiseSchedule,
    ) -> Result<Vec<f64>> {
        if cond == NULL_CONDITION {
            return Err(Error::InvalidRange(
                "guidance needs a non-null condition".into(),
            ));
        }
        let c = self.eps_predict(x, t, cond, sched)?;
        let u = self.eps_predict(x, t, NULL_CONDITION, sched)?;
        Ok(cfg_combine(&c, &u, scale))
    }

    /// Exact draw from the undiffused conditional mixture.
    pub fn sample_clean<R: Rng + ?Sized>(&self, cond: &str, rng: &mut R) -> Result<Vec<f64>> {
        let comps = self.components(cond)?;
        let dist = WeightedIndex::new(comps.iter().map(|(_, lw)| lw.exp()))
            .map_err(|e| Error::InvalidMixture(e.to_string()))?;
        let k = comps[dist.sample(rng)].0;
        Ok(self.means[k]
            .iter()
            .map(|m| {
                let z: f64 = StandardNormal.sample(rng);
                m + self.sigma * z
            })
            .collect())
    }

    /// DDPM ancestral sampling driven by the analytic ε-prediction, with the
    /// fixed posterior variance (1 − ᾱ_{t−1})/(1 − ᾱ_t)·β_t.
    pub fn ancestral_sample_with<R: Rng + ?Sized>(
        &self,
        cond: &str,
        sched: &NoiseSchedule,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        self.mask(cond)?;
        let mut x = standard_normal_vec(rng, self.dim);
        for t in (1..=sched.max_t()).rev() {
            let eps = self.eps_predict(&x, t, cond, sched)?;
            let beta = sched.beta(t);
            let ab = sched.alpha_bar(t);
            let ab_prev = sched.alpha_bar(t - 1);
            let coef = beta / (1.0 - ab).sqrt();
            let inv_sqrt_alpha = 1.0 / (1.0 - beta).sqrt();
            for (xi, ei) in x.iter_mut().zip(&eps) {
                *xi = inv_sqrt_alpha * (*xi - coef * ei);
            }
            if t > 1 {
                let std = ((1.0 - ab_prev) / (1.0 - ab) * beta).sqrt();
                for xi in x.iter_mut() {
                    let z: f64 = StandardNormal.sample(rng);
                    *xi += std * z;
                }
            }
        }
        Ok(x)
    }

    pub fn ancestral_sample(&self, cond: &str, sched: &NoiseSchedule, seed: u64) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.ancestral_sample_with(cond, sched, &mut rng)
    }
}

pub fn cfg_combine(cond: &[f64], uncond: &[f64], scale: f64) -> Vec<f64> {
    cond.iter()
        .zip(uncond)
        .map(|(c, u)| c + scale * (c - u))
        .collect()
}
