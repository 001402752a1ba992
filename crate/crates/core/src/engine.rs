//! Gibbs sampler for the reparameterized spike-and-slab logistic model.
//!
//! Per stratum `s` and AE `j` the linear predictor is
//! `ψ_sj = α_j·X_s + V_s δ_j σ_j β**_j`, the Pólya-Gamma augmentation gives
//! `ω_sj ~ PG(n_s, |ψ_sj|)` and `κ_sj = y_sj - n_s/2`, and every remaining
//! conditional is Gaussian, truncated Gaussian, Bernoulli or Gamma.
//!
//! Sweep order is fixed: ω, α, β**, σ_β, δ, then the variance components.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Exp1, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::ingest::StratifiedCells;
use crate::linalg::SparseCholesky;
use crate::ontology::CorrelationStructure;
use crate::pg::PgSampler;

/// Prior inclusion probability, shared or per AE.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SelectionPrior {
    Shared(f64),
    PerAe(Vec<f64>),
}

impl SelectionPrior {
    pub fn get(&self, j: usize) -> f64 {
        match self {
            SelectionPrior::Shared(p) => *p,
            SelectionPrior::PerAe(v) => v[j],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    /// Gamma shape for the covariate-effect precisions.
    pub a_alpha: f64,
    /// Gamma rate for the covariate-effect precisions.
    pub b_alpha: f64,
    /// Degrees of freedom of the half-t prior on σ_β.
    pub k: f64,
    pub pi: SelectionPrior,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            a_alpha: 0.5,
            b_alpha: 0.5,
            k: 1.0,
            pi: SelectionPrior::Shared(0.5),
        }
    }
}

impl Hyperparams {
    pub fn validate(&self, n_aes: usize) -> Result<()> {
        for (name, v) in [("a_alpha", self.a_alpha), ("b_alpha", self.b_alpha), ("k", self.k)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        let check = |p: f64| p > 0.0 && p < 1.0;
        match &self.pi {
            SelectionPrior::Shared(p) if !check(*p) => {
                Err(Error::InvalidArgument(format!("pi must lie in (0,1), got {p}")))
            }
            SelectionPrior::PerAe(v) if v.len() != n_aes => Err(Error::InvalidArgument(format!(
                "pi has {} entries for {n_aes} AEs",
                v.len()
            ))),
            SelectionPrior::PerAe(v) if !v.iter().all(|&p| check(p)) => {
                Err(Error::InvalidArgument("every pi must lie in (0,1)".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub iters: usize,
    pub burn_in: usize,
    pub thin: usize,
}

impl Schedule {
    pub fn n_stored(&self) -> usize {
        self.iters.saturating_sub(self.burn_in) / self.thin.max(1)
    }

    fn stores(&self, iteration: usize) -> bool {
        iteration > self.burn_in && (iteration - self.burn_in).is_multiple_of(self.thin.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.thin == 0 {
            return Err(Error::InvalidArgument("thin must be at least 1".into()));
        }
        if self.burn_in > self.iters {
            return Err(Error::InvalidArgument("burn_in exceeds iters".into()));
        }
        Ok(())
    }
}

/// Cell data laid out AE-major for the per-AE updates.
#[derive(Clone, Debug)]
pub struct CellData {
    pub n_strata: usize,
    pub n_aes: usize,
    pub n_coef: usize,
    /// `design[s * n_coef + l]`
    pub design: Vec<f64>,
    pub v: Vec<f64>,
    pub trials: Vec<u32>,
    /// `counts[j * n_strata + s]`
    counts: Vec<u32>,
    kappa: Vec<f64>,
    /// Σ log C(n_s, y_sj)
    log_binom_const: f64,
}

impl CellData {
    pub fn new(cells: &StratifiedCells) -> Self {
        let (s_n, j_n, p) = (cells.n_strata(), cells.n_aes(), cells.n_coef());
        let mut design = Vec::with_capacity(s_n * p);
        for st in &cells.strata {
            design.extend_from_slice(&st.design);
        }
        let mut counts = vec![0u32; s_n * j_n];
        for s in 0..s_n {
            for j in 0..j_n {
                counts[j * s_n + s] = cells.count(s, j);
            }
        }
        let mut data = Self {
            n_strata: s_n,
            n_aes: j_n,
            n_coef: p,
            design,
            v: cells.strata.iter().map(|s| s.v()).collect(),
            trials: cells.strata.iter().map(|s| s.trials).collect(),
            counts,
            kappa: Vec::new(),
            log_binom_const: 0.0,
        };
        data.refresh();
        data
    }

    fn refresh(&mut self) {
        let s_n = self.n_strata;
        self.kappa = self
            .counts
            .iter()
            .enumerate()
            .map(|(i, &y)| y as f64 - 0.5 * self.trials[i % s_n] as f64)
            .collect();
        self.log_binom_const = self
            .counts
            .iter()
            .enumerate()
            .map(|(i, &y)| log_choose(self.trials[i % s_n], y))
            .sum();
    }

    /// Replaces the event counts, given stratum-major like `StratifiedCells`.
    pub fn set_counts_stratum_major(&mut self, counts: &[u32]) {
        let (s_n, j_n) = (self.n_strata, self.n_aes);
        for s in 0..s_n {
            for j in 0..j_n {
                self.counts[j * s_n + s] = counts[s * j_n + j];
            }
        }
        self.refresh();
    }

    pub fn count(&self, s: usize, j: usize) -> u32 {
        self.counts[j * self.n_strata + s]
    }

    fn x(&self, s: usize) -> &[f64] {
        &self.design[s * self.n_coef..(s + 1) * self.n_coef]
    }
}

pub fn log_choose(n: u32, k: u32) -> f64 {
    if k == 0 || k == n {
        return 0.0;
    }
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Latent variables of one chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    /// `alpha[j * n_coef + l]`
    pub alpha: Vec<f64>,
    pub beta_ss: Vec<f64>,
    pub sigma_beta: Vec<f64>,
    pub delta: Vec<bool>,
    pub tau2: Vec<f64>,
    pub sigma_alpha2: Vec<f64>,
    /// `omega[j * n_strata + s]`
    pub omega: Vec<f64>,
    pub iteration: usize,
}

impl ChainState {
    /// Composed logOR `δ_j σ_j β**_j`.
    pub fn log_or(&self, j: usize) -> f64 {
        if self.delta[j] {
            self.sigma_beta[j] * self.beta_ss[j]
        } else {
            0.0
        }
    }

    pub fn log_ors(&self) -> Vec<f64> {
        (0..self.beta_ss.len()).map(|j| self.log_or(j)).collect()
    }

    /// Initial state: α = 0, β** ~ N(0, Ω), σ_β = 1, δ ~ Bern(π), τ² = 1, σ_α² = 1.
    pub fn initial<R: Rng + ?Sized>(
        data: &CellData,
        corr: &CorrelationStructure,
        hyper: &Hyperparams,
        rng: &mut R,
    ) -> Self {
        let (j_n, p) = (data.n_aes, data.n_coef);
        let z: Vec<f64> = (0..j_n).map(|_| rng.sample(StandardNormal)).collect();
        let beta_ss = corr.sample_prior(&z);
        let delta = (0..j_n).map(|j| rng.random::<f64>() < hyper.pi.get(j)).collect();
        let omega = (0..j_n * data.n_strata)
            .map(|i| crate::pg::pg_mean(data.trials[i % data.n_strata.max(1)], 0.0))
            .collect();
        Self {
            alpha: vec![0.0; j_n * p],
            beta_ss,
            sigma_beta: vec![1.0; j_n],
            delta,
            tau2: vec![1.0; j_n],
            sigma_alpha2: vec![1.0; p],
            omega,
            iteration: 0,
        }
    }

    /// Full draw from the prior (ω set to its PG(n, 0) mean).
    pub fn from_prior<R: Rng + ?Sized>(
        data: &CellData,
        corr: &CorrelationStructure,
        hyper: &Hyperparams,
        rng: &mut R,
    ) -> Self {
        let mut st = Self::initial(data, corr, hyper, rng);
        let p = data.n_coef;
        for l in 0..p {
            let prec = gamma_draw(hyper.a_alpha, hyper.b_alpha, rng);
            st.sigma_alpha2[l] = 1.0 / prec;
        }
        for j in 0..data.n_aes {
            for l in 0..p {
                let z: f64 = rng.sample(StandardNormal);
                st.alpha[j * p + l] = z * st.sigma_alpha2[l].sqrt();
            }
            let prec = gamma_draw(0.5 * hyper.k, 0.5 * hyper.k, rng);
            st.tau2[j] = 1.0 / prec;
            let z: f64 = rng.sample(StandardNormal);
            st.sigma_beta[j] = (z * st.tau2[j].sqrt()).abs();
        }
        st
    }
}

/// Gamma draw by shape and rate.
fn gamma_draw<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> f64 {
    Gamma::new(shape, 1.0 / rate)
        .expect("positive gamma parameters")
        .sample(rng)
}

/// `N(mean, sd²)` truncated to `[0, ∞)`.
pub fn truncated_normal_positive<R: Rng + ?Sized>(mean: f64, sd: f64, rng: &mut R) -> f64 {
    let a = -mean / sd;
    let z = if a <= 0.5 {
        loop {
            let z: f64 = rng.sample(StandardNormal);
            if z >= a {
                break z;
            }
        }
    } else {
        // Robert's translated-exponential proposal.
        let lambda = 0.5 * (a + (a * a + 4.0).sqrt());
        loop {
            let e: f64 = rng.sample(Exp1);
            let z = a + e / lambda;
            let u: f64 = rng.random();
            if u <= (-0.5 * (z - lambda) * (z - lambda)).exp() {
                break z;
            }
        }
    };
    (mean + sd * z).max(0.0)
}

/// Simulates binomial counts (stratum-major) given the state's linear predictors.
pub fn simulate_counts<R: Rng + ?Sized>(data: &CellData, state: &ChainState, rng: &mut R) -> Vec<u32> {
    let (s_n, j_n, p) = (data.n_strata, data.n_aes, data.n_coef);
    let mut out = vec![0u32; s_n * j_n];
    for s in 0..s_n {
        let x = data.x(s);
        for j in 0..j_n {
            let a = &state.alpha[j * p..(j + 1) * p];
            let psi = dot(a, x) + data.v[s] * state.log_or(j);
            let prob = 1.0 / (1.0 + (-psi).exp());
            let n = data.trials[s] as u64;
            out[s * j_n + j] = Binomial::new(n, prob).expect("valid binomial").sample(rng) as u32;
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gibbs sampler owning one chain's state and random stream.
pub struct Sampler<'a> {
    data: CellData,
    corr: &'a CorrelationStructure,
    hyper: Hyperparams,
    pg: PgSampler,
    factor: Option<SparseCholesky>,
    pub state: ChainState,
    rng: ChaCha8Rng,
    /// α_j·X_s cache, AE-major.
    offset: Vec<f64>,
    extra_diag: Vec<f64>,
    /// Lower triangle of `X_s X_sᵀ` per stratum.
    outer: Vec<f64>,
    tri_buf: Vec<f64>,
    q_buf: Vec<f64>,
    r_buf: Vec<f64>,
    z_buf: Vec<f64>,
}

impl<'a> Sampler<'a> {
    pub fn new(
        cells: &StratifiedCells,
        corr: &'a CorrelationStructure,
        hyper: &Hyperparams,
        seed: u64,
    ) -> Result<Self> {
        Self::with_data(CellData::new(cells), corr, hyper, seed)
    }

    pub fn with_data(
        data: CellData,
        corr: &'a CorrelationStructure,
        hyper: &Hyperparams,
        seed: u64,
    ) -> Result<Self> {
        if corr.dim() != data.n_aes {
            return Err(Error::InvalidArgument(format!(
                "correlation has dimension {}, cells have {} AEs",
                corr.dim(),
                data.n_aes
            )));
        }
        hyper.validate(data.n_aes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = ChainState::initial(&data, corr, hyper, &mut rng);
        let factor = (!corr.epsilon.is_infinite()).then(|| corr.precision_factor.clone());
        let mut sampler = Self {
            offset: vec![0.0; data.n_aes * data.n_strata],
            extra_diag: vec![0.0; data.n_aes],
            outer: outer_products(&data),
            tri_buf: vec![0.0; data.n_coef * (data.n_coef + 1) / 2],
            q_buf: vec![0.0; data.n_coef * data.n_coef],
            r_buf: vec![0.0; data.n_coef],
            z_buf: vec![0.0; data.n_coef],
            data,
            corr,
            hyper: hyper.clone(),
            pg: PgSampler::default(),
            factor,
            state,
            rng,
        };
        sampler.refresh_offsets();
        Ok(sampler)
    }

    pub fn with_pg(mut self, pg: PgSampler) -> Self {
        self.pg = pg;
        self
    }

    pub fn data(&self) -> &CellData {
        &self.data
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Replaces data counts (stratum-major), e.g. for joint-distribution tests.
    pub fn set_counts(&mut self, counts: &[u32]) {
        self.data.set_counts_stratum_major(counts);
    }

    pub fn set_state(&mut self, state: ChainState) {
        self.state = state;
        self.refresh_offsets();
    }

    fn refresh_offsets(&mut self) {
        for j in 0..self.data.n_aes {
            self.refresh_offset(j);
        }
    }

    fn refresh_offset(&mut self, j: usize) {
        let (s_n, p) = (self.data.n_strata, self.data.n_coef);
        let a = &self.state.alpha[j * p..(j + 1) * p];
        for s in 0..s_n {
            self.offset[j * s_n + s] = dot(a, self.data.x(s));
        }
    }

    fn psi(&self, s: usize, j: usize) -> f64 {
        self.offset[j * self.data.n_strata + s] + self.data.v[s] * self.state.log_or(j)
    }

    pub fn update_omega(&mut self) {
        let (s_n, j_n) = (self.data.n_strata, self.data.n_aes);
        for j in 0..j_n {
            let b = self.state.log_or(j);
            for s in 0..s_n {
                let i = j * s_n + s;
                let psi = self.offset[i] + self.data.v[s] * b;
                self.state.omega[i] = self.pg.sample(self.data.trials[s], psi, &mut self.rng);
            }
        }
    }

    pub fn update_alpha(&mut self, j: usize) -> Result<()> {
        let (s_n, p) = (self.data.n_strata, self.data.n_coef);
        let tri = p * (p + 1) / 2;
        let b = self.state.log_or(j);
        let acc = &mut self.tri_buf;
        acc.iter_mut().for_each(|x| *x = 0.0);
        self.r_buf.iter_mut().for_each(|x| *x = 0.0);
        for s in 0..s_n {
            let i = j * s_n + s;
            let w = self.state.omega[i];
            let x = &self.data.design[s * p..(s + 1) * p];
            let resid = self.data.kappa[i] - w * self.data.v[s] * b;
            for (r, xl) in self.r_buf.iter_mut().zip(x) {
                *r += xl * resid;
            }
            for (a, o) in acc.iter_mut().zip(&self.outer[s * tri..(s + 1) * tri]) {
                *a += w * o;
            }
        }
        let mut k = 0;
        for l in 0..p {
            for m in 0..=l {
                self.q_buf[l * p + m] = acc[k];
                k += 1;
            }
            self.q_buf[l * p + l] += 1.0 / self.state.sigma_alpha2[l];
        }
        for zi in self.z_buf.iter_mut() {
            *zi = self.rng.sample(StandardNormal);
        }
        if !small_gaussian_draw(&mut self.q_buf, &mut self.r_buf, &self.z_buf, p) {
            return Err(Error::Factorization {
                context: format!("alpha precision for AE {j}"),
                condition: f64::INFINITY,
            });
        }
        self.state.alpha[j * p..(j + 1) * p].copy_from_slice(&self.r_buf);
        self.refresh_offset(j);
        Ok(())
    }

    pub fn update_beta_ss(&mut self) -> Result<()> {
        let (s_n, j_n) = (self.data.n_strata, self.data.n_aes);
        let mut r = vec![0.0; j_n];
        for j in 0..j_n {
            let c = if self.state.delta[j] { self.state.sigma_beta[j] } else { 0.0 };
            let (mut a, mut lin) = (0.0, 0.0);
            if c != 0.0 {
                for s in 0..s_n {
                    let v = self.data.v[s];
                    if v == 0.0 {
                        continue;
                    }
                    let i = j * s_n + s;
                    let w = self.state.omega[i];
                    a += w * v * v;
                    lin += v * (self.data.kappa[i] - w * self.offset[i]);
                }
            }
            self.extra_diag[j] = c * c * a;
            r[j] = c * lin;
        }
        let z: Vec<f64> = (0..j_n).map(|_| self.rng.sample(StandardNormal)).collect();
        match self.factor.as_mut() {
            None => {
                for j in 0..j_n {
                    let prec = 1.0 + self.extra_diag[j];
                    self.state.beta_ss[j] = r[j] / prec + z[j] / prec.sqrt();
                }
            }
            Some(f) => {
                if f.factor(&self.corr.precision, Some(&self.extra_diag)).is_err() {
                    for e in &mut self.extra_diag {
                        *e += 1e-10;
                    }
                    f.factor(&self.corr.precision, Some(&self.extra_diag)).map_err(|e| {
                        Error::Factorization {
                            context: format!(
                                "beta** precision at iteration {}: {e}",
                                self.state.iteration
                            ),
                            condition: f64::INFINITY,
                        }
                    })?;
                }
                self.state.beta_ss = f.sample_gaussian(&r, &z);
            }
        }
        Ok(())
    }

    pub fn update_sigma_beta(&mut self, j: usize) {
        let s_n = self.data.n_strata;
        let bss = self.state.beta_ss[j];
        let mut prec = 1.0 / self.state.tau2[j];
        let mut lin = 0.0;
        if self.state.delta[j] {
            let mut a = 0.0;
            for s in 0..s_n {
                let v = self.data.v[s];
                if v == 0.0 {
                    continue;
                }
                let i = j * s_n + s;
                let w = self.state.omega[i];
                a += w * v * v;
                lin += v * (self.data.kappa[i] - w * self.offset[i]);
            }
            prec += bss * bss * a;
            lin *= bss;
        }
        let mean = lin / prec;
        self.state.sigma_beta[j] = truncated_normal_positive(mean, prec.sqrt().recip(), &mut self.rng);
    }

    /// Log odds of δ_j = 1 versus 0 given everything else, ω included.
    pub fn delta_log_odds(&self, j: usize) -> f64 {
        let s_n = self.data.n_strata;
        let pi = self.hyper.pi.get(j);
        let b = self.state.sigma_beta[j] * self.state.beta_ss[j];
        let mut ll = 0.0;
        for s in 0..s_n {
            let v = self.data.v[s];
            if v == 0.0 {
                continue;
            }
            let i = j * s_n + s;
            let psi0 = self.offset[i];
            let psi1 = psi0 + v * b;
            let w = self.state.omega[i];
            ll += self.data.kappa[i] * (psi1 - psi0) - 0.5 * w * (psi1 * psi1 - psi0 * psi0);
        }
        pi.ln() - (1.0 - pi).ln() + ll
    }

    pub fn update_delta(&mut self, j: usize) {
        let lo = self.delta_log_odds(j);
        // P(δ=1) = exp(lp1) / (exp(lp0) + exp(lp1)), via log-sum-exp
        let m = lo.max(0.0);
        let p1 = (lo - m).exp() / ((-m).exp() + (lo - m).exp());
        self.state.delta[j] = self.rng.random::<f64>() < p1;
    }

    pub fn update_variances(&mut self) {
        let (j_n, p) = (self.data.n_aes, self.data.n_coef);
        for l in 0..p {
            let ss: f64 = (0..j_n).map(|j| self.state.alpha[j * p + l].powi(2)).sum();
            let shape = self.hyper.a_alpha + 0.5 * j_n as f64;
            let rate = self.hyper.b_alpha + 0.5 * ss;
            self.state.sigma_alpha2[l] = 1.0 / gamma_draw(shape, rate, &mut self.rng);
        }
        let k = self.hyper.k;
        for j in 0..j_n {
            let sb = self.state.sigma_beta[j];
            let prec = gamma_draw(0.5 * (k + 1.0), 0.5 * (k + sb * sb), &mut self.rng);
            self.state.tau2[j] = 1.0 / prec;
        }
    }

    /// One full sweep.
    pub fn sweep(&mut self) -> Result<()> {
        let j_n = self.data.n_aes;
        self.update_omega();
        for j in 0..j_n {
            self.update_alpha(j)?;
        }
        self.update_beta_ss()?;
        for j in 0..j_n {
            self.update_sigma_beta(j);
        }
        for j in 0..j_n {
            self.update_delta(j);
        }
        self.update_variances();
        self.state.iteration += 1;
        self.check_finite()
    }

    fn check_finite(&self) -> Result<()> {
        let bad_beta = (0..self.data.n_aes).find(|&j| !self.state.log_or(j).is_finite());
        let bad_alpha = self.state.alpha.iter().position(|a| !a.is_finite());
        if bad_beta.is_some() || bad_alpha.is_some() {
            return Err(Error::NonFinite {
                iteration: self.state.iteration,
                detail: format!(
                    "logOR index {bad_beta:?}, alpha index {bad_alpha:?}; sigma_alpha2 {:?}",
                    self.state.sigma_alpha2
                ),
            });
        }
        Ok(())
    }

    /// `-2 Σ log Binomial(y | n, logistic(ψ))` at the current state.
    pub fn deviance(&self) -> f64 {
        let (s_n, j_n) = (self.data.n_strata, self.data.n_aes);
        let mut ll = self.data.log_binom_const;
        for j in 0..j_n {
            for s in 0..s_n {
                let psi = self.psi(s, j);
                let i = j * s_n + s;
                ll += self.data.counts[i] as f64 * psi - self.data.trials[s] as f64 * softplus(psi);
            }
        }
        -2.0 * ll
    }

    /// Runs the schedule, recording thinned post-burn-in draws.
    pub fn run(&mut self, schedule: &Schedule, progress: Option<&dyn Fn(usize)>) -> Result<ChainDraws> {
        schedule.validate()?;
        let (j_n, p) = (self.data.n_aes, self.data.n_coef);
        let mut draws = ChainDraws::with_capacity(j_n, p, schedule.n_stored());
        for t in 1..=schedule.iters {
            self.sweep()?;
            if schedule.stores(t) {
                let dev = self.deviance();
                if !dev.is_finite() {
                    return Err(Error::NonFinite {
                        iteration: t,
                        detail: format!("deviance {dev}"),
                    });
                }
                draws.push(&self.state, dev);
            }
            if let Some(cb) = progress {
                cb(t);
            }
        }
        Ok(draws)
    }
}

fn outer_products(data: &CellData) -> Vec<f64> {
    let p = data.n_coef;
    let mut out = Vec::with_capacity(data.n_strata * p * (p + 1) / 2);
    for s in 0..data.n_strata {
        let x = data.x(s);
        for l in 0..p {
            for m in 0..=l {
                out.push(x[l] * x[m]);
            }
        }
    }
    out
}

/// Overwrites `r` with `Q⁻¹ r + L⁻ᵀ z` for a small dense lower-stored `Q`
/// (factored in place). Returns false if `Q` is not positive definite.
fn small_gaussian_draw(q: &mut [f64], r: &mut [f64], z: &[f64], p: usize) -> bool {
    for j in 0..p {
        let mut d = q[j * p + j];
        for k in 0..j {
            d -= q[j * p + k] * q[j * p + k];
        }
        if !(d > 0.0) {
            return false;
        }
        let d = d.sqrt();
        q[j * p + j] = d;
        for i in (j + 1)..p {
            let mut v = q[i * p + j];
            for k in 0..j {
                v -= q[i * p + k] * q[j * p + k];
            }
            q[i * p + j] = v / d;
        }
    }
    for i in 0..p {
        for k in 0..i {
            r[i] -= q[i * p + k] * r[k];
        }
        r[i] /= q[i * p + i];
    }
    for i in 0..p {
        r[i] += z[i];
    }
    for i in (0..p).rev() {
        for k in (i + 1)..p {
            r[i] -= q[k * p + i] * r[k];
        }
        r[i] /= q[i * p + i];
    }
    true
}

/// Thinned draws of one chain, draw-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainDraws {
    pub n_aes: usize,
    pub n_coef: usize,
    /// `beta[t * n_aes + j]`, the composed logOR.
    pub beta: Vec<f64>,
    pub delta: Vec<u8>,
    /// `alpha[(t * n_aes + j) * n_coef + l]`
    pub alpha: Vec<f64>,
    pub deviance: Vec<f64>,
}

impl ChainDraws {
    pub fn with_capacity(n_aes: usize, n_coef: usize, n: usize) -> Self {
        Self {
            n_aes,
            n_coef,
            beta: Vec::with_capacity(n * n_aes),
            delta: Vec::with_capacity(n * n_aes),
            alpha: Vec::with_capacity(n * n_aes * n_coef),
            deviance: Vec::with_capacity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.deviance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deviance.is_empty()
    }

    pub fn push(&mut self, state: &ChainState, deviance: f64) {
        for j in 0..self.n_aes {
            self.beta.push(state.log_or(j));
            self.delta.push(state.delta[j] as u8);
        }
        self.alpha.extend_from_slice(&state.alpha);
        self.deviance.push(deviance);
    }

    pub fn beta_at(&self, t: usize, j: usize) -> f64 {
        self.beta[t * self.n_aes + j]
    }

    pub fn delta_at(&self, t: usize, j: usize) -> bool {
        self.delta[t * self.n_aes + j] != 0
    }

    pub fn alpha_at(&self, t: usize, j: usize, l: usize) -> f64 {
        self.alpha[(t * self.n_aes + j) * self.n_coef + l]
    }

    /// Trace of β_j.
    pub fn beta_trace(&self, j: usize) -> Vec<f64> {
        (0..self.len()).map(|t| self.beta_at(t, j)).collect()
    }

    pub fn alpha_trace(&self, j: usize, l: usize) -> Vec<f64> {
        (0..self.len()).map(|t| self.alpha_at(t, j, l)).collect()
    }

    pub fn beta_row(&self, t: usize) -> &[f64] {
        &self.beta[t * self.n_aes..(t + 1) * self.n_aes]
    }
}

/// Draws from several chains plus the settings that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrawStore {
    pub chains: Vec<ChainDraws>,
    pub seeds: Vec<u64>,
    pub schedule: Schedule,
    pub hyper: Hyperparams,
    pub epsilon: crate::ontology::Epsilon,
}

impl DrawStore {
    pub fn n_aes(&self) -> usize {
        self.chains.first().map(|c| c.n_aes).unwrap_or(0)
    }

    pub fn n_coef(&self) -> usize {
        self.chains.first().map(|c| c.n_coef).unwrap_or(0)
    }

    pub fn total_draws(&self) -> usize {
        self.chains.iter().map(ChainDraws::len).sum()
    }

    /// Iterates `(chain, t)` over all stored draws.
    pub fn iter_draws(&self) -> impl Iterator<Item = (&ChainDraws, usize)> {
        self.chains.iter().flat_map(|c| (0..c.len()).map(move |t| (c, t)))
    }
}

/// Runs a single chain.
pub fn run_chain(
    cells: &StratifiedCells,
    corr: &CorrelationStructure,
    hyper: &Hyperparams,
    schedule: &Schedule,
    seed: u64,
) -> Result<ChainDraws> {
    Sampler::new(cells, corr, hyper, seed)?.run(schedule, None)
}

/// Runs one chain per seed in parallel.
pub fn run_chains(
    cells: &StratifiedCells,
    corr: &CorrelationStructure,
    hyper: &Hyperparams,
    schedule: &Schedule,
    seeds: &[u64],
    progress_every: Option<usize>,
) -> Result<DrawStore> {
    let chains = seeds
        .par_iter()
        .enumerate()
        .map(|(c, &seed)| {
            let mut sampler = Sampler::new(cells, corr, hyper, seed)?;
            match progress_every {
                Some(every) if every > 0 => {
                    let cb = |t: usize| {
                        if t.is_multiple_of(every) {
                            log::info!(
                                "epsilon {} chain {c}: iteration {t}/{}",
                                corr.epsilon,
                                schedule.iters
                            );
                        }
                    };
                    sampler.run(schedule, Some(&cb))
                }
                _ => sampler.run(schedule, None),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DrawStore {
        chains,
        seeds: seeds.to_vec(),
        schedule: *schedule,
        hyper: hyper.clone(),
        epsilon: corr.epsilon,
    })
}

/// Deviance at given per-AE intercept/covariate effects and logORs.
pub fn deviance_at(cells: &StratifiedCells, alpha: &[f64], beta: &[f64]) -> f64 {
    let data = CellData::new(cells);
    let (s_n, j_n, p) = (data.n_strata, data.n_aes, data.n_coef);
    let mut ll = data.log_binom_const;
    for j in 0..j_n {
        for s in 0..s_n {
            let psi = dot(&alpha[j * p..(j + 1) * p], data.x(s)) + data.v[s] * beta[j];
            ll += data.count(s, j) as f64 * psi - data.trials[s] as f64 * softplus(psi);
        }
    }
    -2.0 * ll
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ontology::{correlation_from_precision, Epsilon, OntologyGraph};

    fn pair_graph() -> OntologyGraph {
        OntologyGraph::from_groups(
            vec!["a".into(), "b".into()],
            [("G".to_string(), vec![0, 1])].into_iter().collect(),
        )
    }

    fn isolated(n: usize) -> OntologyGraph {
        OntologyGraph::from_groups((0..n).map(|i| format!("t{i}")).collect(), Default::default())
    }

    fn mean_sd(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, var.sqrt())
    }

    #[test]
    fn small_draw_solves_system() {
        let mut q = vec![4.0, 0.0, 1.0, 3.0];
        let mut x = [1.0, 2.0];
        assert!(small_gaussian_draw(&mut q, &mut x, &[0.0, 0.0], 2));
        // [[4,1],[1,3]] x = [1,2]
        assert!((4.0 * x[0] + x[1] - 1.0).abs() < 1e-12);
        assert!((x[0] + 3.0 * x[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn truncated_normal_regimes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws: Vec<f64> = (0..50_000).map(|_| truncated_normal_positive(0.0, 2.0, &mut rng)).collect();
        let (m, _) = mean_sd(&draws);
        // half-normal mean sd*sqrt(2/pi)
        assert!((m - 2.0 * (2.0 / std::f64::consts::PI).sqrt()).abs() < 0.03);
        let far: Vec<f64> = (0..20_000).map(|_| truncated_normal_positive(-5.0, 1.0, &mut rng)).collect();
        assert!(far.iter().all(|&x| x >= 0.0));
        // E[Z | Z > 5] for standard normal = φ(5)/(1-Φ(5)) ≈ 5.18650
        let (m, _) = mean_sd(&far.iter().map(|x| x + 5.0).collect::<Vec<_>>());
        assert!((m - 5.186_50).abs() < 0.01, "{m}");
        let big: Vec<f64> = (0..20_000).map(|_| truncated_normal_positive(10.0, 1.0, &mut rng)).collect();
        let (m, _) = mean_sd(&big);
        assert!((m - 10.0).abs() < 0.03);
    }

    #[test]
    fn omega_mean_at_zero_predictor() {
        let cells = StratifiedCells::two_arm([1, 1], &[0], &[1], vec!["a".into()]).unwrap();
        let corr = correlation_from_precision(&isolated(1), Epsilon::Infinite).unwrap();
        let mut s = Sampler::new(&cells, &corr, &Hyperparams::default(), 3).unwrap();
        s.state.delta[0] = false;
        let mut acc = Vec::new();
        for _ in 0..20_000 {
            s.update_omega();
            acc.extend_from_slice(&s.state.omega);
        }
        let (m, _) = mean_sd(&acc);
        assert!((m - 0.25).abs() < 0.005, "{m}");
    }

    #[test]
    fn omega_concentrates_for_large_predictor() {
        let cells = StratifiedCells::two_arm([3, 3], &[0], &[0], vec!["a".into()]).unwrap();
        let corr = correlation_from_precision(&isolated(1), Epsilon::Infinite).unwrap();
        let mut s = Sampler::new(&cells, &corr, &Hyperparams::default(), 4).unwrap();
        s.state.alpha[0] = 20.0;
        s.state.delta[0] = false;
        s.refresh_offsets();
        let mut acc = Vec::new();
        for _ in 0..5000 {
            s.update_omega();
            acc.extend_from_slice(&s.state.omega);
        }
        let (m, _) = mean_sd(&acc);
        let expected = 3.0 * 10f64.tanh() / 40.0;
        assert!((m - expected).abs() < 0.01 * expected, "{m} vs {expected}");
    }

    #[test]
    fn empty_strata_are_noops() {
        let cells = StratifiedCells::from_parts(vec![], vec![], vec![], vec!["a".into(), "b".into()]).unwrap();
        let corr = correlation_from_precision(&isolated(2), Epsilon::Infinite).unwrap();
        let mut s = Sampler::new(&cells, &corr, &Hyperparams::default(), 5).unwrap();
        s.update_omega();
        assert!(s.state.omega.is_empty());
        // α falls back to its prior N(0, σ_α² = 1)
        let mut draws = Vec::new();
        for _ in 0..20_000 {
            s.update_alpha(0).unwrap();
            draws.push(s.state.alpha[0]);
        }
        let (m, sd) = mean_sd(&draws);
        assert!(m.abs() < 0.03 && (sd - 1.0).abs() < 0.03, "{m} {sd}");
        assert_eq!(s.deviance(), 0.0);
    }

    #[test]
    fn alpha_symmetry_intercept_only() {
        // single stratum, κ = 0, ω = 1, huge prior variance
        let cells = StratifiedCells::from_parts(
            vec![],
            vec![crate::ingest::Stratum {
                levels: vec![],
                arm: crate::ingest::Arm::Control,
                design: vec![1.0],
                trials: 2,
            }],
            vec![1],
            vec!["a".into()],
        )
        .unwrap();
        let corr = correlation_from_precision(&isolated(1), Epsilon::Infinite).unwrap();
        let mut s = Sampler::new(&cells, &corr, &Hyperparams::default(), 6).unwrap();
        s.state.omega[0] = 1.0;
        s.state.sigma_alpha2[0] = 1e12;
        let draws: Vec<f64> = (0..40_000)
            .map(|_| {
                s.update_alpha(0).unwrap();
                s.state.alpha[0]
            })
            .collect();
        let (m, _) = mean_sd(&draws);
        assert!(m.abs() < 0.02, "{m}");
    }

    #[test]
    fn beta_ss_prior_fallback_covariance() {
        let g = pair_graph();
        let corr = correlation_from_precision(&g, Epsilon::Finite(1.0)).unwrap();
        let cells = StratifiedCells::two_arm([10, 10], &[1, 2], &[3, 4], vec!["a".into(), "b".into()]).unwrap();
        let mut s = Sampler::new(&cells, &corr, &Hyperparams::default(), 7).unwrap();
        s.state.delta = vec![false, false];
        let n = 20_000;
        let (mut s11, mut s22, mut s12) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            s.update_beta_ss().unwrap();
            let b = &s.state.beta_ss;
            s11 += b[0] * b[0];
            s22 += b[1] * b[1];
            s12 += b[0] * b[1];
        }
        let nf = n as f64;
        let corr_hat = (s12 / nf) / ((s11 / nf) * (s22 / nf)).sqrt();
        assert!((s11 / nf - 1.0).abs() < 0.04);
        assert!((s22 / nf - 1.0).abs() < 0.04);
        assert!((corr_hat - 0.5).abs() < 0.02, "{corr_hat}");
    }

    #[test]
    fn beta_ss_matches_single_ae_conjugate_update() {
        // Ω = I; AE 0 carries data. Its conditional is N(r/(1+a), 1/(1+a)).
        let corr = correlation_from_precision(&isolated(2), Epsilon::Infinite).unwrap();
        let cells = StratifiedCells::two_arm([500, 500], &[50, 50], &[120, 50], vec!["a".into(), "b".into()]).unwrap();
        let mut s = Sampler::new(&cells, &corr, &Hyperparams::default(), 8).unwrap();
        s.state.delta = vec![true, false];
        s.state.sigma_beta = vec![0.7, 1.0];
        s.update_omega();
        let (mut a, mut lin) = (0.0, 0.0);
        let i = 1; // target stratum of AE 0
        a += s.state.omega[i];
        lin += s.data.kappa[i] - s.state.omega[i] * s.offset[i];
        let c = 0.7;
        let prec = 1.0 + c * c * a;
        let mean = c * lin / prec;
        let draws: Vec<(f64, f64)> = (0..20_000)
            .map(|_| {
                s.update_beta_ss().unwrap();
                (s.state.beta_ss[0], s.state.beta_ss[1])
            })
            .collect();
        let (m0, sd0) = mean_sd(&draws.iter().map(|d| d.0).collect::<Vec<_>>());
        let (m1, sd1) = mean_sd(&draws.iter().map(|d| d.1).collect::<Vec<_>>());
        assert!((m0 - mean).abs() < 4.0 * sd0 / (20_000f64).sqrt());
        assert!((sd0 - prec.sqrt().recip()).abs() < 0.02 * sd0);
        assert!(m1.abs() < 0.03 && (sd1 - 1.0).abs() < 0.02);
    }

    #[test]
    fn sigma_beta_prior_fallback() {
        let corr = correlation_from_precision(&isolated(1), Epsilon::Infinite).unwrap();
        let cells = StratifiedCells::two_arm([10, 10], &[1], &[5], vec!["a".into()]).unwrap();
        let mut s = Sampler::new(&cells, &corr, &Hyperparams::default(), 9).unwrap();
        s.state.delta[0] = false;
        s.state.tau2[0] = 4.0;
        let draws: Vec<f64> = (0..40_000)
            .map(|_| {
                s.update_sigma_beta(0);
                s.state.sigma_beta[0]
            })
            .collect();
        assert!(draws.iter().all(|&x| x >= 0.0));
        let (m, _) = mean_sd(&draws);
        assert!((m - 2.0 * (2.0 / std::f64::consts::PI).sqrt()).abs() < 0.02, "{m}");
    }

    #[test]
    fn delta_without_evidence_follows_prior() {
        let corr = correlation_from_precision(&isolated(1), Epsilon::Infinite).unwrap();
        let cells = StratifiedCells::two_arm([10, 10], &[3], &[7], vec!["a".into()]).unwrap();
        let hyper = Hyperparams {
            pi: SelectionPrior::Shared(0.3),
            ..Default::default()
        };
        let mut s = Sampler::new(&cells, &corr, &hyper, 10).unwrap();
        s.state.beta_ss[0] = 0.0;
        let n = 40_000;
        let hits = (0..n)
            .filter(|_| {
                s.update_delta(0);
                s.state.delta[0]
            })
            .count();
        let rate = hits as f64 / n as f64;
        assert!((rate - 0.3).abs() < 0.01, "{rate}");
    }

    #[test]
    fn delta_matches_two_point_enumeration() {
        let corr = correlation_from_precision(&isolated(1), Epsilon::Infinite).unwrap();
        let cells = StratifiedCells::two_arm([3, 3], &[1], &[2], vec!["a".into()]).unwrap();
        let mut s = Sampler::new(&cells, &corr, &Hyperparams::default(), 11).unwrap();
        s.state.beta_ss[0] = 0.8;
        s.state.sigma_beta[0] = 0.5;
        s.state.alpha[0] = -0.2;
        s.refresh_offsets();
        s.state.omega = vec![0.6, 0.7];
        // direct evaluation of the augmented likelihood at both δ values
        let kappa1 = 2.0 - 1.5;
        let psi0 = -0.2;
        let psi1 = -0.2 + 0.4;
        let l1 = 0.5f64.ln() + kappa1 * psi1 - 0.7 * psi1 * psi1 / 2.0;
        let l0 = 0.5f64.ln() + kappa1 * psi0 - 0.7 * psi0 * psi0 / 2.0;
        let exact = l1.exp() / (l1.exp() + l0.exp());
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| {
                s.update_delta(0);
                s.state.delta[0]
            })
            .count();
        let rate = hits as f64 / n as f64;
        let se = (exact * (1.0 - exact) / n as f64).sqrt();
        assert!((rate - exact).abs() < 4.0 * se, "{rate} vs {exact}");
    }

    #[test]
    fn overwhelming_evidence_selects() {
        let corr = correlation_from_precision(&isolated(1), Epsilon::Infinite).unwrap();
        let cells = StratifiedCells::two_arm([1000, 1000], &[100], &[600], vec!["a".into()]).unwrap();
        let mut s = Sampler::new(&cells, &corr, &Hyperparams::default(), 12).unwrap();
        s.state.alpha[0] = (0.1f64 / 0.9).ln();
        s.refresh_offsets();
        s.state.beta_ss[0] = 2.6;
        s.state.sigma_beta[0] = 1.0;
        s.state.delta[0] = true;
        s.update_omega();
        assert!(s.delta_log_odds(0) > 50.0);
    }

    #[test]
    fn variance_update_with_zero_alpha() {
        let corr = correlation_from_precision(&isolated(3), Epsilon::Infinite).unwrap();
        let cells = StratifiedCells::two_arm([5, 5], &[1, 1, 1], &[1, 1, 1], vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let mut s = Sampler::new(&cells, &corr, &Hyperparams::default(), 13).unwrap();
        let n = 40_000;
        let precs: Vec<f64> = (0..n)
            .map(|_| {
                s.state.alpha = vec![0.0; 3];
                s.update_variances();
                1.0 / s.state.sigma_alpha2[0]
            })
            .collect();
        let (m, _) = mean_sd(&precs);
        // Gamma(0.5 + 3/2, rate 0.5) mean 4
        assert!((m - 4.0).abs() < 0.06, "{m}");
    }

    #[test]
    fn deterministic_and_composed() {
        let g = pair_graph();
        let corr = correlation_from_precision(&g, Epsilon::Finite(0.1)).unwrap();
        let cells = StratifiedCells::two_arm([200, 200], &[10, 12], &[30, 25], vec!["a".into(), "b".into()]).unwrap();
        let sched = Schedule {
            iters: 300,
            burn_in: 100,
            thin: 2,
        };
        let a = run_chain(&cells, &corr, &Hyperparams::default(), &sched, 42).unwrap();
        let b = run_chain(&cells, &corr, &Hyperparams::default(), &sched, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 100);
        let empty = run_chain(
            &cells,
            &corr,
            &Hyperparams::default(),
            &Schedule {
                iters: 50,
                burn_in: 50,
                thin: 1,
            },
            1,
        )
        .unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn stored_beta_is_composed_exactly() {
        let g = pair_graph();
        let corr = correlation_from_precision(&g, Epsilon::Finite(1.0)).unwrap();
        let cells = StratifiedCells::two_arm([100, 100], &[5, 9], &[15, 8], vec!["a".into(), "b".into()]).unwrap();
        let mut s = Sampler::new(&cells, &corr, &Hyperparams::default(), 77).unwrap();
        let mut draws = ChainDraws::with_capacity(2, 1, 50);
        for _ in 0..50 {
            s.sweep().unwrap();
            draws.push(&s.state, s.deviance());
            let t = draws.len() - 1;
            for j in 0..2 {
                let expected = if s.state.delta[j] {
                    s.state.sigma_beta[j] * s.state.beta_ss[j]
                } else {
                    0.0
                };
                assert_eq!(draws.beta_at(t, j), expected);
            }
        }
    }

    #[test]
    fn deviance_matches_direct_binomial() {
        let cells = StratifiedCells::two_arm([4, 6], &[1], &[5], vec!["a".into()]).unwrap();
        let alpha = [-0.3];
        let beta = [1.1];
        let p0 = 1.0 / (1.0 + 0.3f64.exp());
        let p1 = 1.0 / (1.0 + (-0.8f64).exp());
        let ll = (4.0f64).ln() + p0.ln() + 3.0 * (1.0 - p0).ln() + (6.0f64).ln() + 5.0 * p1.ln() + (1.0 - p1).ln();
        assert!((deviance_at(&cells, &alpha, &beta) + 2.0 * ll).abs() < 1e-12);
    }

    #[test]
    fn hyperparam_validation() {
        let mut h = Hyperparams::default();
        assert!(h.validate(3).is_ok());
        h.pi = SelectionPrior::Shared(1.0);
        assert!(h.validate(3).is_err());
        h.pi = SelectionPrior::PerAe(vec![0.5, 0.5]);
        assert!(h.validate(3).is_err());
        h.pi = SelectionPrior::Shared(0.5);
        h.k = 0.0;
        assert!(h.validate(3).is_err());
    }
}
