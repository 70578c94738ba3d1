//! Dirichlet-process Gaussian mixtures fitted by truncated stick-breaking
//! variational inference, with diagonal Normal-Gamma component posteriors.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::function::gamma::{digamma, ln_gamma};

use super::{latents_to_rows, GMM_MAGIC};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::sof::GeomLatent;
use crate::trainer::checkpoint::TensorTable;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GmmConfig {
    pub truncation: usize,
    /// Stick-breaking concentration.
    pub concentration: f64,
    pub variance_floor: f64,
    pub max_iters: usize,
    /// Convergence threshold on the absolute ELBO change.
    pub tol: f64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            truncation: 10,
            concentration: 1.0,
            variance_floor: 1e-6,
            max_iters: 500,
            tol: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// Diagonal covariances, one row per component.
    pub variances: Vec<Vec<f64>>,
    pub truncation: usize,
    /// Evidence lower bound after every variational iteration.
    pub elbo: Vec<f64>,
}

/// Variational posterior state.
struct Posterior {
    /// Beta parameters of each stick.
    stick: Vec<(f64, f64)>,
    mean: Vec<Vec<f64>>,
    /// Precision scale of each component mean.
    kappa: Vec<f64>,
    shape: Vec<f64>,
    rate: Vec<Vec<f64>>,
}

struct Prior {
    mean: Vec<f64>,
    kappa: f64,
    shape: f64,
    rate: Vec<f64>,
    concentration: f64,
}

impl Posterior {
    fn expected_log_weights(&self) -> Vec<f64> {
        let t = self.stick.len();
        let mut out = Vec::with_capacity(t);
        let mut rest = 0.0;
        for (k, &(a, b)) in self.stick.iter().enumerate() {
            let total = digamma(a + b);
            let log_v = if k + 1 == t { 0.0 } else { digamma(a) - total };
            out.push(rest + log_v);
            rest += digamma(b) - total;
        }
        out
    }

    /// Per-component expected log density of `x` (without the weight).
    fn expected_log_lik(&self, k: usize, x: &[f64]) -> f64 {
        let psi = digamma(self.shape[k]);
        let inv_kappa = 1.0 / self.kappa[k];
        let mut s = 0.0;
        for (d, &xd) in x.iter().enumerate() {
            let rate = self.rate[k][d];
            let diff = xd - self.mean[k][d];
            s += 0.5 * (psi - rate.ln()) - 0.5 * (2.0 * PI).ln()
                - 0.5 * (self.shape[k] / rate * diff * diff + inv_kappa);
        }
        s
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn e_step(post: &Posterior, data: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let log_w = post.expected_log_weights();
    data.iter()
        .map(|x| {
            let logits: Vec<f64> = (0..log_w.len())
                .map(|k| log_w[k] + post.expected_log_lik(k, x))
                .collect();
            let z = log_sum_exp(&logits);
            logits.iter().map(|l| (l - z).exp()).collect()
        })
        .collect()
}

fn m_step(resp: &[Vec<f64>], data: &[Vec<f64>], prior: &Prior, t: usize) -> Posterior {
    let dim = prior.mean.len();
    let counts: Vec<f64> = (0..t).map(|k| resp.iter().map(|r| r[k]).sum()).collect();
    let mut stick = Vec::with_capacity(t);
    for k in 0..t {
        let tail: f64 = counts[k + 1..].iter().sum();
        stick.push((1.0 + counts[k], prior.concentration + tail));
    }
    let mut post = Posterior {
        stick,
        mean: Vec::with_capacity(t),
        kappa: Vec::with_capacity(t),
        shape: Vec::with_capacity(t),
        rate: Vec::with_capacity(t),
    };
    for k in 0..t {
        let nk = counts[k];
        let mut xbar = vec![0.0; dim];
        if nk > 0.0 {
            for (r, x) in resp.iter().zip(data) {
                for d in 0..dim {
                    xbar[d] += r[k] * x[d];
                }
            }
            xbar.iter_mut().for_each(|v| *v /= nk);
        }
        let mut scatter = vec![0.0; dim];
        for (r, x) in resp.iter().zip(data) {
            for d in 0..dim {
                let e = x[d] - xbar[d];
                scatter[d] += r[k] * e * e;
            }
        }
        let kappa = prior.kappa + nk;
        let mean = (0..dim)
            .map(|d| (prior.kappa * prior.mean[d] + nk * xbar[d]) / kappa)
            .collect();
        let rate = (0..dim)
            .map(|d| {
                let shift = xbar[d] - prior.mean[d];
                prior.rate[d] + 0.5 * (scatter[d] + prior.kappa * nk * shift * shift / kappa)
            })
            .collect();
        post.mean.push(mean);
        post.kappa.push(kappa);
        post.shape.push(prior.shape + 0.5 * nk);
        post.rate.push(rate);
    }
    post
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Expected log Normal-Gamma density with parameters `(m0, k0, a0, b0)`
/// under the posterior `(m, k, a, b)`, for one coordinate.
fn normal_gamma_cross(m0: f64, k0: f64, a0: f64, b0: f64, m: f64, k: f64, a: f64, b: f64) -> f64 {
    let e_log_prec = digamma(a) - b.ln();
    let e_prec = a / b;
    0.5 * k0.ln() - 0.5 * (2.0 * PI).ln() + 0.5 * e_log_prec
        - 0.5 * k0 * (e_prec * (m - m0) * (m - m0) + 1.0 / k)
        + a0 * b0.ln()
        - ln_gamma(a0)
        + (a0 - 1.0) * e_log_prec
        - b0 * e_prec
}

fn elbo(post: &Posterior, prior: &Prior, resp: &[Vec<f64>], data: &[Vec<f64>]) -> f64 {
    let t = post.stick.len();
    let log_w = post.expected_log_weights();
    let mut total = 0.0;
    for (r, x) in resp.iter().zip(data) {
        for k in 0..t {
            if r[k] > 0.0 {
                total += r[k] * (log_w[k] + post.expected_log_lik(k, x) - r[k].ln());
            }
        }
    }
    for &(a, b) in &post.stick[..t - 1] {
        let total_psi = digamma(a + b);
        let e_log_v = digamma(a) - total_psi;
        let e_log_1mv = digamma(b) - total_psi;
        let log_p = -ln_beta(1.0, prior.concentration) + (prior.concentration - 1.0) * e_log_1mv;
        let log_q = -ln_beta(a, b) + (a - 1.0) * e_log_v + (b - 1.0) * e_log_1mv;
        total += log_p - log_q;
    }
    for k in 0..t {
        let (kk, a) = (post.kappa[k], post.shape[k]);
        for d in 0..prior.mean.len() {
            let (m, b) = (post.mean[k][d], post.rate[k][d]);
            total += normal_gamma_cross(prior.mean[d], prior.kappa, prior.shape, prior.rate[d], m, kk, a, b);
            total -= normal_gamma_cross(m, kk, a, b, m, kk, a, b);
        }
    }
    total
}

/// Runs variational updates from hard initial assignments until the ELBO
/// settles; returns the posterior and the per-iteration ELBO.
fn coordinate_ascent(
    data: &[Vec<f64>],
    assign: &[usize],
    prior: &Prior,
    config: &GmmConfig,
) -> Result<(Posterior, Vec<f64>)> {
    let t = config.truncation;
    let mut resp: Vec<Vec<f64>> = assign
        .iter()
        .map(|&a| {
            let mut r = vec![0.0; t];
            r[a] = 1.0;
            r
        })
        .collect();
    let mut post = m_step(&resp, data, prior, t);
    let mut trace = Vec::new();
    for _ in 0..config.max_iters {
        resp = e_step(&post, data);
        post = m_step(&resp, data, prior, t);
        let value = elbo(&post, prior, &resp, data);
        if !value.is_finite() {
            return Err(Error::Numerical(format!("mixture ELBO became {value}")));
        }
        let converged = trace.last().is_some_and(|&prev: &f64| (value - prev).abs() < config.tol);
        trace.push(value);
        if converged {
            break;
        }
    }
    Ok((post, trace))
}

/// Lloyd's algorithm with k-means++ seeding; returns hard assignments.
fn kmeans(data: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut centers = vec![data[rng.random_range(0..data.len())].clone()];
    while centers.len() < k {
        let d2: Vec<f64> = data
            .iter()
            .map(|x| centers.iter().map(|c| dist(x, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let sum: f64 = d2.iter().sum();
        let pick = if sum > 0.0 {
            let mut u = rng.random::<f64>() * sum;
            d2.iter()
                .position(|&w| {
                    u -= w;
                    u < 0.0
                })
                .unwrap_or(data.len() - 1)
        } else {
            rng.random_range(0..data.len())
        };
        centers.push(data[pick].clone());
    }
    let mut assign = vec![0; data.len()];
    for _ in 0..100 {
        let next: Vec<usize> = data
            .iter()
            .map(|x| {
                let mut best = 0;
                for (j, c) in centers.iter().enumerate() {
                    if dist(x, c) < dist(x, &centers[best]) {
                        best = j;
                    }
                }
                best
            })
            .collect();
        let done = next == assign;
        assign = next;
        for (j, c) in centers.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = data.iter().zip(&assign).filter(|(_, &a)| a == j).map(|(x, _)| x).collect();
            if !members.is_empty() {
                for d in 0..c.len() {
                    c[d] = members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64;
                }
            }
        }
        if done {
            break;
        }
    }
    assign
}

/// Restarts from k-means initializations with 1 to `truncation` clusters and
/// keeps the run with the highest final ELBO.
pub fn fit_gmm(latents: &[GeomLatent], config: &GmmConfig, seed: u64) -> Result<GmmModel> {
    let data = latents_to_rows(latents)?;
    fit_rows(&data, config, seed)
}

/// Fits a mixture to raw rows of equal length.
pub fn fit_rows(data: &[Vec<f64>], config: &GmmConfig, seed: u64) -> Result<GmmModel> {
    if data.len() < 2 {
        return Err(Error::invalid(format!("mixture fitting needs at least 2 points, got {}", data.len())));
    }
    if config.truncation == 0 || !(config.concentration > 0.0) || !(config.variance_floor > 0.0) {
        return Err(Error::invalid("truncation, concentration and variance floor must be positive"));
    }
    let n = data.len() as f64;
    let dim = data[0].len();
    let mean: Vec<f64> = (0..dim).map(|d| data.iter().map(|x| x[d]).sum::<f64>() / n).collect();
    let var: Vec<f64> = (0..dim)
        .map(|d| data.iter().map(|x| (x[d] - mean[d]).powi(2)).sum::<f64>() / n)
        .collect();
    let prior = Prior {
        kappa: 1.0,
        shape: 1.0,
        rate: var.iter().map(|v| v.max(config.variance_floor)).collect(),
        mean,
        concentration: config.concentration,
    };
    let t = config.truncation;
    let mut best: Option<(Posterior, Vec<f64>)> = None;
    for clusters in 1..=t.min(data.len()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(clusters as u64));
        let assign = kmeans(data, clusters, &mut rng);
        let (post, trace) = coordinate_ascent(data, &assign, &prior, config)?;
        if best.as_ref().is_none_or(|(_, b)| trace.last() > b.last()) {
            best = Some((post, trace));
        }
    }
    let (post, trace) = best.expect("at least one restart");
    let mut weights = Vec::with_capacity(t);
    let mut remaining = 1.0;
    for (k, &(a, b)) in post.stick.iter().enumerate() {
        let w = if k + 1 == t { remaining } else { remaining * a / (a + b) };
        weights.push(w);
        remaining -= w;
    }
    let variances = (0..t)
        .map(|k| {
            post.rate[k]
                .iter()
                .map(|&b| (b / post.shape[k]).max(config.variance_floor))
                .collect()
        })
        .collect();
    Ok(GmmModel {
        weights,
        means: post.mean,
        variances,
        truncation: t,
        elbo: trace,
    })
}

impl GmmModel {
    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.truncation;
        if t == 0 || self.weights.len() != t || self.means.len() != t || self.variances.len() != t {
            return Err(Error::Format("mixture component counts disagree".into()));
        }
        let d = self.dim();
        if self.means.iter().chain(&self.variances).any(|r| r.len() != d) {
            return Err(Error::Format("mixture rows have unequal lengths".into()));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::Format("mixture weights are not a distribution".into()));
        }
        if self.variances.iter().flatten().any(|v| !(*v > 0.0)) {
            return Err(Error::Format("mixture variances must be positive".into()));
        }
        Ok(())
    }

    /// Posterior component probabilities of `x` under the point estimates.
    pub fn responsibilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::shape("responsibilities", &[x.len()], &[self.dim()]));
        }
        let logits: Vec<f64> = (0..self.truncation)
            .map(|k| {
                let ll: f64 = x
                    .iter()
                    .zip(&self.means[k])
                    .zip(&self.variances[k])
                    .map(|((xd, m), v)| -0.5 * ((2.0 * PI * v).ln() + (xd - m) * (xd - m) / v))
                    .sum();
                self.weights[k].ln() + ll
            })
            .collect();
        let z = log_sum_exp(&logits);
        Ok(logits.iter().map(|l| (l - z).exp()).collect())
    }

    /// Mixture mean and per-coordinate variance.
    pub fn moments(&self) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim();
        let mut mean = vec![0.0; d];
        let mut second = vec![0.0; d];
        for k in 0..self.truncation {
            for j in 0..d {
                let m = self.means[k][j];
                mean[j] += self.weights[k] * m;
                second[j] += self.weights[k] * (self.variances[k][j] + m * m);
            }
        }
        let var = mean.iter().zip(&second).map(|(m, s)| s - m * m).collect();
        (mean, var)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut u: f64 = rng.random();
        let mut k = self.truncation - 1;
        for (i, w) in self.weights.iter().enumerate() {
            if u < *w {
                k = i;
                break;
            }
            u -= w;
        }
        self.means[k]
            .iter()
            .zip(&self.variances[k])
            .map(|(m, v)| {
                let e: f64 = StandardNormal.sample(rng);
                m + v.sqrt() * e
            })
            .collect()
    }

    pub fn to_table(&self) -> TensorTable {
        let t = self.truncation;
        let d = self.dim();
        let mut table = TensorTable::default();
        let f = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        table.push("gmm/weights", Tensor::new(&[t], f(&self.weights)).unwrap());
        table.push("gmm/means", Tensor::new(&[t, d], f(&self.means.concat())).unwrap());
        table.push("gmm/variances", Tensor::new(&[t, d], f(&self.variances.concat())).unwrap());
        let n = self.elbo.len();
        table.push("gmm/elbo", Tensor::new(&[n], f(&self.elbo)).unwrap());
        table
    }

    /// Rebuilds a model; weights are renormalized after the f32 round trip.
    pub fn from_table(table: &TensorTable) -> Result<Self> {
        let w = table.require("gmm/weights")?;
        let means = table.require("gmm/means")?;
        let vars = table.require("gmm/variances")?;
        let t = w.numel();
        if means.ndim() != 2 || means.shape()[0] != t || vars.shape() != means.shape() {
            return Err(Error::Format("mixture tensor shapes disagree".into()));
        }
        let d = means.shape()[1];
        let rows = |x: &Tensor<f32>| -> Vec<Vec<f64>> {
            x.data().chunks(d.max(1)).map(|r| r.iter().map(|&v| f64::from(v)).collect()).collect()
        };
        let mut weights: Vec<f64> = w.data().iter().map(|&v| f64::from(v)).collect();
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) {
            return Err(Error::Corruption("mixture weights sum to zero".into()));
        }
        weights.iter_mut().for_each(|v| *v /= sum);
        let model = Self {
            weights,
            means: rows(means),
            variances: rows(vars),
            truncation: t,
            elbo: table.get("gmm/elbo").map_or_else(Vec::new, |e| e.data().iter().map(|&v| f64::from(v)).collect()),
        };
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_table().save(path, GMM_MAGIC)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_table(&TensorTable::load(path, GMM_MAGIC)?)
    }
}

/// One latent drawn from the mixture, deterministic in `seed`.
pub fn sample_gmm(model: &GmmModel, seed: u64) -> GeomLatent {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GeomLatent::new(model.sample(&mut rng).into_iter().map(|v| v as f32).collect())
}
