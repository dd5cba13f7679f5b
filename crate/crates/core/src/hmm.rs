//! Left-to-right Gaussian HMMs with entry and exit transitions.
//!
//! Everything runs in the log domain. Forbidden transitions hold
//! `f64::NEG_INFINITY`, which propagates through sums and maxima without
//! special casing; only log-sum-exp has to guard against an all `-inf` input.
//!
//! A path `θ_1..θ_T` through a model scores
//!
//! ```text
//! log a_entry(θ_1) + Σ_t [ log b_θt(y_t) + log a(θ_t, θ_t+1) ]
//! ```
//!
//! where the transition after the last frame is the exit transition of `θ_T`.
//! Per-class likelihoods (summed over all paths) combine with log priors in
//! [`Recognizer::classify`].

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::features::{FeatureConfig, FeatureMatrix};
use crate::preprocess::{ChannelMode, FormatContract};

pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-3;
pub const DEFAULT_STATES: usize = 5;
pub const MODEL_MAGIC: &str = "FAUNA-HMM v1";

const STOCHASTIC_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum HmmError {
    #[error("dimension mismatch: model expects {expected}, got {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("invalid state path: {0}")]
    InvalidPath(String),
    #[error("{frames} frames cannot traverse {states} left-to-right states")]
    TooShort { frames: usize, states: usize },
    #[error("no path through the model has nonzero probability")]
    NoValidPath,
    #[error("no training data")]
    EmptyInput,
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("non-finite log-likelihood at EM iteration {iteration}")]
    NumericalFailure { iteration: usize },
    #[error("model file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unsupported model version: expected '{MODEL_MAGIC}', found '{0}'")]
    Version(String),
}

/// `log Σ exp(x)`, returning `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn ln_or_neg_inf(p: f64) -> f64 {
    if p > 0.0 {
        p.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// Diagonal-covariance Gaussian output density.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianEmission {
    mean: Vec<f64>,
    variance: Vec<f64>,
    variance_floor: f64,
    // cached -0.5 Σ log(2π σ²)
    log_norm: f64,
}

impl GaussianEmission {
    /// Variances below `variance_floor` are raised to it.
    pub fn new(mean: Vec<f64>, variance: Vec<f64>, variance_floor: f64) -> Result<Self, HmmError> {
        if mean.is_empty() || mean.len() != variance.len() {
            return Err(HmmError::InvalidModel(format!(
                "mean has {} entries, variance {}",
                mean.len(),
                variance.len()
            )));
        }
        if !(variance_floor.is_finite() && variance_floor > 0.0) {
            return Err(HmmError::InvalidModel(format!(
                "variance floor {variance_floor} must be positive"
            )));
        }
        if mean.iter().chain(&variance).any(|v| !v.is_finite()) {
            return Err(HmmError::InvalidModel("non-finite emission parameter".into()));
        }
        let variance: Vec<f64> = variance.into_iter().map(|v| v.max(variance_floor)).collect();
        let log_norm = -0.5 * variance.iter().map(|v| (2.0 * PI * v).ln()).sum::<f64>();
        Ok(GaussianEmission {
            mean,
            variance,
            variance_floor,
            log_norm,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> &[f64] {
        &self.variance
    }

    pub fn variance_floor(&self) -> f64 {
        self.variance_floor
    }

    fn logpdf_unchecked(&self, y: &[f64]) -> f64 {
        let quad: f64 = y
            .iter()
            .zip(&self.mean)
            .zip(&self.variance)
            .map(|((y, m), v)| (y - m) * (y - m) / v)
            .sum();
        self.log_norm - 0.5 * quad
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.variance)
            .map(|(m, v)| {
                let z: f64 = StandardNormal.sample(rng);
                m + v.sqrt() * z
            })
            .collect()
    }
}

/// `Σ_d [-½ log(2πσ²_d) - (y_d - μ_d)² / (2σ²_d)]`.
pub fn emission_logpdf(g: &GaussianEmission, y: &[f64]) -> Result<f64, HmmError> {
    if y.len() != g.dim() {
        return Err(HmmError::DimMismatch {
            expected: g.dim(),
            found: y.len(),
        });
    }
    Ok(g.logpdf_unchecked(y))
}

/// Left-to-right HMM: state `i` may stay, advance to `i + 1`, or exit.
#[derive(Debug, Clone, PartialEq)]
pub struct HmmModel {
    log_entry: Vec<f64>,
    log_trans: Vec<Vec<f64>>,
    log_exit: Vec<f64>,
    emissions: Vec<GaussianEmission>,
}

impl HmmModel {
    pub fn new(
        log_entry: Vec<f64>,
        log_trans: Vec<Vec<f64>>,
        log_exit: Vec<f64>,
        emissions: Vec<GaussianEmission>,
    ) -> Result<Self, HmmError> {
        let n = emissions.len();
        let bad = |m: String| Err(HmmError::InvalidModel(m));
        if n == 0 {
            return bad("model has no states".into());
        }
        if log_entry.len() != n || log_exit.len() != n || log_trans.len() != n {
            return bad("entry/exit/transition sizes disagree with state count".into());
        }
        let dim = emissions[0].dim();
        if emissions.iter().any(|e| e.dim() != dim) {
            return bad("emission dimensions differ between states".into());
        }
        if log_entry[1..].iter().any(|&v| v != f64::NEG_INFINITY) {
            return bad("entry must be concentrated on state 0".into());
        }
        if (log_entry[0].exp() - 1.0).abs() > STOCHASTIC_TOL {
            return bad("entry probabilities do not sum to 1".into());
        }
        for (i, row) in log_trans.iter().enumerate() {
            if row.len() != n {
                return bad(format!("transition row {i} has {} entries", row.len()));
            }
            if row.iter().chain([&log_exit[i]]).any(|v| v.is_nan() || *v > 0.0) {
                return bad(format!("transition row {i} holds an invalid log probability"));
            }
            if let Some(j) = (0..n).find(|&j| j != i && j != i + 1 && row[j] != f64::NEG_INFINITY) {
                return bad(format!("transition {i}->{j} breaks left-to-right topology"));
            }
            let total: f64 = row.iter().map(|v| v.exp()).sum::<f64>() + log_exit[i].exp();
            if (total - 1.0).abs() > STOCHASTIC_TOL {
                return bad(format!("state {i} outgoing probabilities sum to {total}"));
            }
        }
        Ok(HmmModel {
            log_entry,
            log_trans,
            log_exit,
            emissions,
        })
    }

    pub fn n_states(&self) -> usize {
        self.emissions.len()
    }

    pub fn dim(&self) -> usize {
        self.emissions[0].dim()
    }

    pub fn log_entry(&self) -> &[f64] {
        &self.log_entry
    }

    pub fn log_trans(&self) -> &[Vec<f64>] {
        &self.log_trans
    }

    pub fn log_exit(&self) -> &[f64] {
        &self.log_exit
    }

    pub fn emissions(&self) -> &[GaussianEmission] {
        &self.emissions
    }

    fn check_dim(&self, features: &FeatureMatrix) -> Result<(), HmmError> {
        if features.dim() != self.dim() {
            return Err(HmmError::DimMismatch {
                expected: self.dim(),
                found: features.dim(),
            });
        }
        Ok(())
    }

    /// `b[t][j] = log b_j(y_t)`.
    fn emission_table(&self, features: &FeatureMatrix) -> Vec<Vec<f64>> {
        features
            .rows()
            .map(|y| self.emissions.iter().map(|e| e.logpdf_unchecked(y)).collect())
            .collect()
    }

    /// Draws one observation sequence by running the chain until it exits.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Vec<f64>> {
        let n = self.n_states();
        let mut state = 0;
        let mut out = Vec::new();
        loop {
            out.push(self.emissions[state].sample(rng));
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut next = None;
            for j in 0..n {
                acc += self.log_trans[state][j].exp();
                if u < acc {
                    next = Some(j);
                    break;
                }
            }
            match next {
                Some(j) => state = j,
                None => return out,
            }
        }
    }

    fn forward_table(&self, b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = self.n_states();
        let mut alpha = Vec::with_capacity(b.len());
        alpha.push((0..n).map(|j| self.log_entry[j] + b[0][j]).collect::<Vec<f64>>());
        let mut terms = vec![0.0; n];
        for bt in &b[1..] {
            let prev = alpha.last().unwrap();
            let row = (0..n)
                .map(|j| {
                    for i in 0..n {
                        terms[i] = prev[i] + self.log_trans[i][j];
                    }
                    log_sum_exp(&terms) + bt[j]
                })
                .collect();
            alpha.push(row);
        }
        alpha
    }

    fn backward_table(&self, b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = self.n_states();
        let t_len = b.len();
        let mut beta = vec![vec![0.0; n]; t_len];
        beta[t_len - 1] = self.log_exit.clone();
        let mut terms = vec![0.0; n];
        for t in (0..t_len - 1).rev() {
            for i in 0..n {
                for j in 0..n {
                    terms[j] = self.log_trans[i][j] + b[t + 1][j] + beta[t + 1][j];
                }
                beta[t][i] = log_sum_exp(&terms);
            }
        }
        beta
    }

    fn total_from_alpha(&self, last: &[f64]) -> f64 {
        let terms: Vec<f64> = last.iter().zip(&self.log_exit).map(|(a, e)| a + e).collect();
        log_sum_exp(&terms)
    }
}

/// State sequence, one index per frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StatePath(pub Vec<usize>);

impl StatePath {
    pub fn states(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Joint log-probability of the features and one specific state path.
pub fn path_log_likelihood(
    model: &HmmModel,
    features: &FeatureMatrix,
    path: &StatePath,
) -> Result<f64, HmmError> {
    model.check_dim(features)?;
    let states = path.states();
    if states.len() != features.n_frames() {
        return Err(HmmError::InvalidPath(format!(
            "path has {} states for {} frames",
            states.len(),
            features.n_frames()
        )));
    }
    if let Some(&s) = states.iter().find(|&&s| s >= model.n_states()) {
        return Err(HmmError::InvalidPath(format!("state {s} out of range")));
    }
    if let Some(w) = states.windows(2).find(|w| w[1] < w[0] || w[1] > w[0] + 1) {
        return Err(HmmError::InvalidPath(format!(
            "illegal move {} -> {} in a left-to-right model",
            w[0], w[1]
        )));
    }
    let mut total = model.log_entry[states[0]];
    for (t, y) in features.rows().enumerate() {
        let s = states[t];
        total += model.emissions[s].logpdf_unchecked(y);
        total += match states.get(t + 1) {
            Some(&next) => model.log_trans[s][next],
            None => model.log_exit[s],
        };
    }
    Ok(total)
}

/// `log p(Y | model)` summed over every state path.
pub fn forward_log_likelihood(model: &HmmModel, features: &FeatureMatrix) -> Result<f64, HmmError> {
    model.check_dim(features)?;
    let b = model.emission_table(features);
    let alpha = model.forward_table(&b);
    Ok(model.total_from_alpha(alpha.last().unwrap()))
}

/// Most probable state path and its log-probability.
pub fn viterbi(model: &HmmModel, features: &FeatureMatrix) -> Result<(StatePath, f64), HmmError> {
    model.check_dim(features)?;
    let n = model.n_states();
    let t_len = features.n_frames();
    if t_len < n {
        return Err(HmmError::TooShort {
            frames: t_len,
            states: n,
        });
    }
    let b = model.emission_table(features);
    let mut delta: Vec<f64> = (0..n).map(|j| model.log_entry[j] + b[0][j]).collect();
    let mut back = vec![vec![0usize; n]; t_len];
    for t in 1..t_len {
        let mut next = vec![f64::NEG_INFINITY; n];
        for j in 0..n {
            let mut best = (0, f64::NEG_INFINITY);
            for (i, d) in delta.iter().enumerate() {
                let score = d + model.log_trans[i][j];
                if score > best.1 {
                    best = (i, score);
                }
            }
            back[t][j] = best.0;
            next[j] = best.1 + b[t][j];
        }
        delta = next;
    }
    let (mut state, best) = delta
        .iter()
        .zip(&model.log_exit)
        .map(|(d, e)| d + e)
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (j, v)| if v > acc.1 { (j, v) } else { acc });
    if best == f64::NEG_INFINITY {
        return Err(HmmError::NoValidPath);
    }
    let mut states = vec![0; t_len];
    for t in (0..t_len).rev() {
        states[t] = state;
        state = back[t][state];
    }
    Ok((StatePath(states), best))
}

fn left_to_right_transitions(n: usize) -> (Vec<f64>, Vec<Vec<f64>>, Vec<f64>) {
    let half = 0.5f64.ln();
    let mut entry = vec![f64::NEG_INFINITY; n];
    entry[0] = 0.0;
    let mut trans = vec![vec![f64::NEG_INFINITY; n]; n];
    let mut exit = vec![f64::NEG_INFINITY; n];
    for i in 0..n {
        trans[i][i] = half;
        if i + 1 < n {
            trans[i][i + 1] = half;
        } else {
            exit[i] = half;
        }
    }
    (entry, trans, exit)
}

/// Uniform-segmentation initialization: each clip is cut into `n_states`
/// equal spans, span statistics are pooled per state, and every state gets
/// equal self/next (or self/exit) probabilities.
pub fn flat_start(
    features: &[FeatureMatrix],
    n_states: usize,
    variance_floor: f64,
) -> Result<HmmModel, HmmError> {
    let first = features.first().ok_or(HmmError::EmptyInput)?;
    if n_states == 0 {
        return Err(HmmError::InvalidModel("need at least one state".into()));
    }
    let dim = first.dim();
    let mut count = vec![0usize; n_states];
    let mut sum = vec![vec![0.0; dim]; n_states];
    let mut assigned: Vec<Vec<usize>> = Vec::with_capacity(features.len());
    for f in features {
        if f.dim() != dim {
            return Err(HmmError::DimMismatch {
                expected: dim,
                found: f.dim(),
            });
        }
        let t_len = f.n_frames();
        if t_len < n_states {
            return Err(HmmError::TooShort {
                frames: t_len,
                states: n_states,
            });
        }
        let seg: Vec<usize> = (0..t_len).map(|t| t * n_states / t_len).collect();
        for (y, &s) in f.rows().zip(&seg) {
            count[s] += 1;
            for (acc, v) in sum[s].iter_mut().zip(y) {
                *acc += v;
            }
        }
        assigned.push(seg);
    }
    let means: Vec<Vec<f64>> = sum
        .iter()
        .zip(&count)
        .map(|(s, &c)| s.iter().map(|v| v / c as f64).collect())
        .collect();
    let mut sq = vec![vec![0.0; dim]; n_states];
    for (f, seg) in features.iter().zip(&assigned) {
        for (y, &s) in f.rows().zip(seg) {
            for ((acc, v), m) in sq[s].iter_mut().zip(y).zip(&means[s]) {
                *acc += (v - m) * (v - m);
            }
        }
    }
    let emissions = means
        .into_iter()
        .zip(sq)
        .zip(&count)
        .map(|((m, s), &c)| {
            GaussianEmission::new(m, s.iter().map(|v| v / c as f64).collect(), variance_floor)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let (entry, trans, exit) = left_to_right_transitions(n_states);
    HmmModel::new(entry, trans, exit, emissions)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmOptions {
    pub max_iters: usize,
    /// Stop once the relative gain in total log-likelihood drops below this.
    pub rel_tol: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions {
            max_iters: 50,
            rel_tol: 1e-5,
        }
    }
}

/// Per-sequence E-step output.
struct Posteriors {
    log_likelihood: f64,
    // gamma[t][i] (linear domain)
    gamma: Vec<Vec<f64>>,
    // Σ_t xi_t(i, j)
    trans: Vec<Vec<f64>>,
}

fn posteriors(model: &HmmModel, features: &FeatureMatrix) -> Posteriors {
    let n = model.n_states();
    let b = model.emission_table(features);
    let alpha = model.forward_table(&b);
    let beta = model.backward_table(&b);
    let ll = model.total_from_alpha(alpha.last().unwrap());
    let gamma = alpha
        .iter()
        .zip(&beta)
        .map(|(a, bt)| a.iter().zip(bt).map(|(x, y)| (x + y - ll).exp()).collect())
        .collect();
    let mut trans = vec![vec![0.0; n]; n];
    for t in 0..b.len() - 1 {
        for i in 0..n {
            for j in 0..n {
                let a = model.log_trans[i][j];
                if a == f64::NEG_INFINITY {
                    continue;
                }
                trans[i][j] += (alpha[t][i] + a + b[t + 1][j] + beta[t + 1][j] - ll).exp();
            }
        }
    }
    Posteriors {
        log_likelihood: ll,
        gamma,
        trans,
    }
}

/// Baum-Welch driver that can be advanced one iteration at a time.
pub struct EmTrainer<'a> {
    model: HmmModel,
    data: &'a [FeatureMatrix],
    post: Vec<Posteriors>,
    history: Vec<f64>,
    rel_tol: f64,
    converged: bool,
}

impl<'a> EmTrainer<'a> {
    pub fn new(model: HmmModel, data: &'a [FeatureMatrix], rel_tol: f64) -> Result<Self, HmmError> {
        if data.is_empty() {
            return Err(HmmError::EmptyInput);
        }
        for f in data {
            model.check_dim(f)?;
        }
        let mut trainer = EmTrainer {
            model,
            data,
            post: Vec::new(),
            history: Vec::new(),
            rel_tol,
            converged: false,
        };
        let ll = trainer.expectation(0)?;
        trainer.history.push(ll);
        Ok(trainer)
    }

    fn expectation(&mut self, iteration: usize) -> Result<f64, HmmError> {
        let model = &self.model;
        self.post = self.data.par_iter().map(|f| posteriors(model, f)).collect();
        let total: f64 = self.post.iter().map(|p| p.log_likelihood).sum();
        if !total.is_finite() {
            return Err(HmmError::NumericalFailure { iteration });
        }
        Ok(total)
    }

    fn maximization(&self) -> Result<HmmModel, HmmError> {
        let old = &self.model;
        let n = old.n_states();
        let dim = old.dim();
        let n_seq = self.post.len() as f64;

        let mut entry_acc = vec![0.0; n];
        let mut exit_acc = vec![0.0; n];
        let mut trans_acc = vec![vec![0.0; n]; n];
        let mut occ = vec![0.0; n];
        let mut mean_acc = vec![vec![0.0; dim]; n];
        for (p, f) in self.post.iter().zip(self.data) {
            for i in 0..n {
                entry_acc[i] += p.gamma[0][i];
                exit_acc[i] += p.gamma[p.gamma.len() - 1][i];
                for (acc, v) in trans_acc[i].iter_mut().zip(&p.trans[i]) {
                    *acc += v;
                }
            }
            for (g, y) in p.gamma.iter().zip(f.rows()) {
                for i in 0..n {
                    occ[i] += g[i];
                    for (acc, v) in mean_acc[i].iter_mut().zip(y) {
                        *acc += g[i] * v;
                    }
                }
            }
        }
        let means: Vec<Vec<f64>> = mean_acc
            .iter()
            .zip(&occ)
            .map(|(m, &o)| m.iter().map(|v| v / o).collect())
            .collect();
        let mut var_acc = vec![vec![0.0; dim]; n];
        for (p, f) in self.post.iter().zip(self.data) {
            for (g, y) in p.gamma.iter().zip(f.rows()) {
                for i in 0..n {
                    for ((acc, v), m) in var_acc[i].iter_mut().zip(y).zip(&means[i]) {
                        *acc += g[i] * (v - m) * (v - m);
                    }
                }
            }
        }

        let entry: Vec<f64> = entry_acc.iter().map(|&e| ln_or_neg_inf(e / n_seq)).collect();
        let mut trans = old.log_trans.clone();
        let mut exit = old.log_exit.clone();
        let mut emissions = old.emissions.clone();
        for i in 0..n {
            // states no frame visits keep their previous parameters
            let outgoing: f64 = trans_acc[i].iter().sum::<f64>() + exit_acc[i];
            if occ[i] <= f64::MIN_POSITIVE || outgoing <= f64::MIN_POSITIVE {
                continue;
            }
            trans[i] = trans_acc[i].iter().map(|&a| ln_or_neg_inf(a / outgoing)).collect();
            exit[i] = ln_or_neg_inf(exit_acc[i] / outgoing);
            let var = var_acc[i].iter().map(|v| v / occ[i]).collect();
            emissions[i] = GaussianEmission::new(means[i].clone(), var, old.emissions[i].variance_floor)?;
        }
        HmmModel::new(entry, trans, exit, emissions)
    }

    /// Runs one M-step followed by the E-step of the updated model.
    /// Returns `true` once the relative gain falls below the tolerance.
    pub fn step(&mut self) -> Result<bool, HmmError> {
        let iteration = self.history.len();
        let updated = self.maximization()?;
        let previous = std::mem::replace(&mut self.model, updated);
        let ll = match self.expectation(iteration) {
            Ok(ll) => ll,
            Err(e) => {
                self.model = previous;
                return Err(e);
            }
        };
        let last = *self.history.last().unwrap();
        self.history.push(ll);
        let gain = (ll - last) / last.abs().max(f64::MIN_POSITIVE);
        self.converged = gain.is_nan() || gain < self.rel_tol;
        Ok(self.converged)
    }

    pub fn model(&self) -> &HmmModel {
        &self.model
    }

    /// Total log-likelihood of the initial model followed by one entry per
    /// completed iteration.
    pub fn history(&self) -> &[f64] {
        &self.history
    }

    pub fn iterations(&self) -> usize {
        self.history.len() - 1
    }

    pub fn is_converged(&self) -> bool {
        self.converged
    }

    pub fn into_parts(self) -> (HmmModel, Vec<f64>) {
        (self.model, self.history)
    }
}

/// Baum-Welch re-estimation until `max_iters` or convergence.
pub fn em_train(
    model: HmmModel,
    features: &[FeatureMatrix],
    options: EmOptions,
) -> Result<(HmmModel, Vec<f64>), HmmError> {
    let mut trainer = EmTrainer::new(model, features, options.rel_tol)?;
    while trainer.iterations() < options.max_iters && !trainer.is_converged() {
        trainer.step()?;
    }
    Ok(trainer.into_parts())
}

/// One species: its HMM and log prior.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassModel {
    pub label: String,
    pub hmm: HmmModel,
    pub log_prior: f64,
}

/// Per-class models plus the decision rule `argmax_w log p(Y|w) + s log P(w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Recognizer {
    classes: Vec<ClassModel>,
    grammar_scale: f64,
    feature_config: FeatureConfig,
    contract: FormatContract,
}

impl Recognizer {
    pub fn new(
        classes: Vec<ClassModel>,
        grammar_scale: f64,
        feature_config: FeatureConfig,
        contract: FormatContract,
    ) -> Result<Self, HmmError> {
        let bad = |m: String| Err(HmmError::InvalidModel(m));
        if classes.len() < 2 {
            return bad(format!("need at least 2 classes, got {}", classes.len()));
        }
        let mut labels: Vec<&str> = classes.iter().map(|c| c.label.as_str()).collect();
        if labels.iter().any(|l| l.is_empty() || l.trim() != *l || l.contains('\n')) {
            return bad("class labels must be nonempty single-line names".into());
        }
        labels.sort_unstable();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return bad("duplicate class label".into());
        }
        let total: f64 = classes.iter().map(|c| c.log_prior.exp()).sum();
        if (total - 1.0).abs() > STOCHASTIC_TOL {
            return bad(format!("class priors sum to {total}"));
        }
        let dim = classes[0].hmm.dim();
        if classes.iter().any(|c| c.hmm.dim() != dim) {
            return bad("class models have different feature dimensions".into());
        }
        if !grammar_scale.is_finite() {
            return bad("grammar scale must be finite".into());
        }
        Ok(Recognizer {
            classes,
            grammar_scale,
            feature_config,
            contract,
        })
    }

    pub fn classes(&self) -> &[ClassModel] {
        &self.classes
    }

    pub fn labels(&self) -> Vec<&str> {
        self.classes.iter().map(|c| c.label.as_str()).collect()
    }

    pub fn grammar_scale(&self) -> f64 {
        self.grammar_scale
    }

    pub fn feature_config(&self) -> &FeatureConfig {
        &self.feature_config
    }

    pub fn contract(&self) -> &FormatContract {
        &self.contract
    }

    pub fn dim(&self) -> usize {
        self.classes[0].hmm.dim()
    }

    /// Softmax-normalized class scores, best first; equal scores are ordered
    /// by label.
    pub fn classify(&self, features: &FeatureMatrix) -> Result<Vec<(String, f64)>, HmmError> {
        let joint = self
            .classes
            .iter()
            .map(|c| {
                Ok(forward_log_likelihood(&c.hmm, features)? + self.grammar_scale * c.log_prior)
            })
            .collect::<Result<Vec<f64>, HmmError>>()?;
        let norm = log_sum_exp(&joint);
        if norm == f64::NEG_INFINITY {
            return Err(HmmError::NoValidPath);
        }
        let mut ranked: Vec<(String, f64)> = self
            .classes
            .iter()
            .zip(&joint)
            .map(|(c, l)| (c.label.clone(), (l - norm).exp()))
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(ranked)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MODEL_MAGIC}\n");
        self.write_body(&mut out);
        out
    }

    pub fn from_text(text: &str) -> Result<Self, HmmError> {
        let mut lines = ModelLines::new(text);
        let magic = lines.next_line()?;
        if magic != MODEL_MAGIC {
            return Err(HmmError::Version(magic.to_string()));
        }
        Self::parse_body(&mut lines)
    }

    pub(crate) fn write_body(&self, out: &mut String) {
        let c = &self.contract;
        let f = &self.feature_config;
        let opt_usize = |v: Option<usize>| v.map_or("auto".to_string(), |v| v.to_string());
        let opt_f64 = |v: Option<f64>| v.map_or("auto".to_string(), fmt_f64);
        let _ = writeln!(out, "grammar_scale {}", fmt_f64(self.grammar_scale));
        let _ = writeln!(
            out,
            "contract {} {} {} {}",
            c.target_rate,
            c.target_channels.name(),
            fmt_f64(c.target_duration),
            c.target_bit_depth
        );
        let _ = writeln!(
            out,
            "features {} {} {} {} {} {} {} {} {} {}",
            fmt_f64(f.frame_ms),
            fmt_f64(f.hop_ms),
            opt_usize(f.fft_size),
            f.num_mel_filters,
            f.num_cepstra,
            fmt_f64(f.mel_low),
            opt_f64(f.mel_high),
            f.delta_window,
            f.include_deltas,
            fmt_f64(f.preemphasis)
        );
        let _ = writeln!(out, "classes {}", self.classes.len());
        for class in &self.classes {
            let h = &class.hmm;
            let _ = writeln!(out, "class {}", class.label);
            let _ = writeln!(out, "log_prior {}", fmt_f64(class.log_prior));
            let _ = writeln!(out, "states {}", h.n_states());
            let _ = writeln!(out, "dim {}", h.dim());
            let _ = writeln!(out, "variance_floor {}", fmt_f64(h.emissions[0].variance_floor));
            let _ = writeln!(out, "entry {}", fmt_row(&h.log_entry));
            let _ = writeln!(out, "exit {}", fmt_row(&h.log_exit));
            for (i, e) in h.emissions.iter().enumerate() {
                let _ = writeln!(out, "state {i}");
                let _ = writeln!(out, "trans {}", fmt_row(&h.log_trans[i]));
                let _ = writeln!(out, "mean {}", fmt_row(&e.mean));
                let _ = writeln!(out, "var {}", fmt_row(&e.variance));
            }
            let _ = writeln!(out, "end");
        }
    }

    pub(crate) fn parse_body(lines: &mut ModelLines<'_>) -> Result<Self, HmmError> {
        let grammar_scale = lines.scalar::<f64>("grammar_scale")?;
        let contract = {
            let v = lines.fields("contract", 4)?;
            let channels: ChannelMode = v[1].parse().map_err(|m| lines.error(m))?;
            FormatContract {
                target_rate: lines.parse(v[0])?,
                target_channels: channels,
                target_duration: lines.parse(v[2])?,
                target_bit_depth: lines.parse(v[3])?,
            }
        };
        let feature_config = {
            let v = lines.fields("features", 10)?;
            FeatureConfig {
                frame_ms: lines.parse(v[0])?,
                hop_ms: lines.parse(v[1])?,
                fft_size: if v[2] == "auto" { None } else { Some(lines.parse(v[2])?) },
                num_mel_filters: lines.parse(v[3])?,
                num_cepstra: lines.parse(v[4])?,
                mel_low: lines.parse(v[5])?,
                mel_high: if v[6] == "auto" { None } else { Some(lines.parse(v[6])?) },
                delta_window: lines.parse(v[7])?,
                include_deltas: lines.parse(v[8])?,
                preemphasis: lines.parse(v[9])?,
            }
        };
        let n_classes = lines.scalar::<usize>("classes")?;
        let mut classes = Vec::with_capacity(n_classes);
        for _ in 0..n_classes {
            let label = lines.rest("class")?.to_string();
            let log_prior = lines.scalar::<f64>("log_prior")?;
            let n = lines.scalar::<usize>("states")?;
            let dim = lines.scalar::<usize>("dim")?;
            let floor = lines.scalar::<f64>("variance_floor")?;
            let entry = lines.floats("entry", n)?;
            let exit = lines.floats("exit", n)?;
            let mut trans = Vec::with_capacity(n);
            let mut emissions = Vec::with_capacity(n);
            for i in 0..n {
                let idx = lines.scalar::<usize>("state")?;
                if idx != i {
                    return Err(lines.error(format!("expected state {i}, found {idx}")));
                }
                trans.push(lines.floats("trans", n)?);
                let mean = lines.floats("mean", dim)?;
                let var = lines.floats("var", dim)?;
                emissions.push(GaussianEmission::new(mean, var, floor)?);
            }
            lines.fields("end", 0)?;
            classes.push(ClassModel {
                label,
                hmm: HmmModel::new(entry, trans, exit, emissions)?,
                log_prior,
            });
        }
        Recognizer::new(classes, grammar_scale, feature_config, contract)
    }
}

/// Shortest decimal form that parses back to the identical `f64`.
pub(crate) fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || !v.is_finite() || (1e-5..1e16).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

fn fmt_row(values: &[f64]) -> String {
    values.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(" ")
}

/// Line cursor used by the model and checkpoint parsers.
pub(crate) struct ModelLines<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    line_no: usize,
}

impl<'a> ModelLines<'a> {
    pub(crate) fn new(text: &'a str) -> Self {
        ModelLines {
            lines: text.lines().enumerate(),
            line_no: 0,
        }
    }

    pub(crate) fn error(&self, message: impl Into<String>) -> HmmError {
        HmmError::Parse {
            line: self.line_no,
            message: message.into(),
        }
    }

    pub(crate) fn next_line(&mut self) -> Result<&'a str, HmmError> {
        loop {
            let (i, line) = self
                .lines
                .next()
                .ok_or_else(|| self.error("unexpected end of file"))?;
            self.line_no = i + 1;
            let line = line.trim_end_matches('\r');
            if !line.trim().is_empty() {
                return Ok(line);
            }
        }
    }

    /// Text after `key ` on the next line.
    pub(crate) fn rest(&mut self, key: &str) -> Result<&'a str, HmmError> {
        let line = self.next_line()?;
        match line.strip_prefix(key) {
            Some("") => Ok(""),
            Some(rest) if rest.starts_with(' ') => Ok(&rest[1..]),
            _ => Err(self.error(format!("expected '{key}'"))),
        }
    }

    pub(crate) fn fields(&mut self, key: &str, count: usize) -> Result<Vec<&'a str>, HmmError> {
        let v: Vec<&str> = self.rest(key)?.split_whitespace().collect();
        if v.len() != count {
            return Err(self.error(format!("'{key}' needs {count} values, found {}", v.len())));
        }
        Ok(v)
    }

    pub(crate) fn parse<T: std::str::FromStr>(&self, s: &str) -> Result<T, HmmError> {
        s.parse().map_err(|_| self.error(format!("cannot parse '{s}'")))
    }

    pub(crate) fn scalar<T: std::str::FromStr>(&mut self, key: &str) -> Result<T, HmmError> {
        let v = self.fields(key, 1)?;
        self.parse(v[0])
    }

    fn floats(&mut self, key: &str, count: usize) -> Result<Vec<f64>, HmmError> {
        let v = self.fields(key, count)?;
        v.iter().map(|s| self.parse(s)).collect()
    }
}
