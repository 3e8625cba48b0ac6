//! Two-alternative forced-choice collection and aggregation into
//! per-image scores under a Bradley-Terry model with a Gaussian prior.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembler::{render_interleaved, InterleaveFormat};
use crate::chat::{ask, ChatClient, ChatRequest, Turn};
use crate::corpus::ImageRef;
use crate::parallel::bounded_map;

#[derive(Debug, Error)]
pub enum PrefError {
    #[error("odd number of choice records ({0}); each pair needs both orders")]
    OddRecords(usize),
    #[error("records {index} and {next} are not the same pair in swapped order", next = .index + 1)]
    NotSwapped { index: usize },
    #[error("no records")]
    Empty,
    #[error("unknown image `{0}`")]
    UnknownImage(String),
    #[error("matrix must be square with a zero diagonal and non-negative entries")]
    BadMatrix,
    #[error("prior variance must be positive, got {0}")]
    BadVariance(f64),
    #[error("fit did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    NonConvergence {
        iterations: usize,
        grad_norm: f64,
        last: Vec<f64>,
    },
    #[error("vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least two points")]
    TooFewPoints,
    #[error("correlation undefined for a constant vector")]
    ConstantVector,
    #[error("datasets differ between values and weights")]
    KeyMismatch,
    #[error("weights must be positive and finite")]
    BadWeights,
    #[error(transparent)]
    Assemble(#[from] crate::assembler::AssembleError),
}

pub const FORCED_CHOICE_QUESTION: &str =
    "Which image has better quality? Answer with \"first\" or \"second\", or \"tie\" if they are equally good.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Choice {
    First,
    Second,
    Tie,
}

impl Choice {
    /// Same judgement seen from the other presentation order.
    pub fn swapped(self) -> Self {
        match self {
            Self::First => Self::Second,
            Self::Second => Self::First,
            Self::Tie => Self::Tie,
        }
    }
}

const FIRST_WORDS: [&str; 3] = ["first", "1st", "former"];
const SECOND_WORDS: [&str; 3] = ["second", "2nd", "latter"];
const TIE_WORDS: [&str; 6] = ["tie", "equal", "same", "similar", "neither", "both"];

fn earliest_word(lower: &str, words: &[&str]) -> Option<usize> {
    words
        .iter()
        .filter_map(|w| {
            lower.match_indices(w).map(|(i, _)| i).find(|&i| {
                let before = lower[..i].chars().next_back();
                let after = lower[i + w.len()..].chars().next();
                !before.is_some_and(char::is_alphanumeric) && !after.is_some_and(char::is_alphanumeric)
            })
        })
        .min()
}

/// The earliest first/second/tie keyword decides; `None` when none occurs.
pub fn map_choice(text: &str) -> Option<Choice> {
    let lower = text.to_lowercase();
    [
        (earliest_word(&lower, &FIRST_WORDS), Choice::First),
        (earliest_word(&lower, &SECOND_WORDS), Choice::Second),
        (earliest_word(&lower, &TIE_WORDS), Choice::Tie),
    ]
    .into_iter()
    .filter_map(|(pos, c)| pos.map(|p| (p, c)))
    .min_by_key(|(p, _)| *p)
    .map(|(_, c)| c)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceRecord {
    /// Image shown first.
    pub first: String,
    pub second: String,
    pub choice: Choice,
    /// Reply could not be mapped (or the call failed) and was scored a tie.
    #[serde(default)]
    pub flagged: bool,
}

impl ChoiceRecord {
    pub fn winner(&self) -> Option<&str> {
        match self.choice {
            Choice::First => Some(&self.first),
            Choice::Second => Some(&self.second),
            Choice::Tie => None,
        }
    }
}

pub fn render_2afc_turn(first: &ImageRef, second: &ImageRef, fmt: InterleaveFormat) -> Result<Turn, PrefError> {
    let text = render_interleaved(2, FORCED_CHOICE_QUESTION, fmt)?;
    Ok(Turn::with_images(text, vec![first.clone(), second.clone()]))
}

/// Asks every pair in both orders. Records come out as consecutive
/// `(a, b)`, `(b, a)` entries in input order.
pub fn run_2afc(
    client: &dyn ChatClient,
    pairs: &[(ImageRef, ImageRef)],
    fmt: InterleaveFormat,
    in_flight: usize,
) -> Result<Vec<ChoiceRecord>, PrefError> {
    let mut jobs = Vec::with_capacity(pairs.len() * 2);
    for (a, b) in pairs {
        jobs.push((a.clone(), b.clone(), render_2afc_turn(a, b, fmt)?));
        jobs.push((b.clone(), a.clone(), render_2afc_turn(b, a, fmt)?));
    }
    Ok(bounded_map(&jobs, in_flight, |_, (first, second, turn)| {
        let mapped = match ask(client, &ChatRequest::user(turn.clone())) {
            Ok(text) => map_choice(&text),
            Err(e) => {
                tracing::debug!(first = first.id, second = second.id, error = %e, "2afc call failed");
                None
            }
        };
        ChoiceRecord {
            first: first.id.clone(),
            second: second.id.clone(),
            choice: mapped.unwrap_or(Choice::Tie),
            flagged: mapped.is_none(),
        }
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwapConsistency {
    pub n_pairs: usize,
    /// Share of pairs whose two answers agree once order is undone.
    pub raw: f64,
    /// Cohen-style kappa against position-driven chance agreement;
    /// `None` when chance agreement is 1.
    pub chance_corrected: Option<f64>,
}

pub fn swap_consistency(records: &[ChoiceRecord]) -> Result<SwapConsistency, PrefError> {
    if records.is_empty() {
        return Err(PrefError::Empty);
    }
    if !records.len().is_multiple_of(2) {
        return Err(PrefError::OddRecords(records.len()));
    }
    let mut agree = 0usize;
    let mut counts = [0usize; 3];
    for (k, pair) in records.chunks(2).enumerate() {
        let (x, y) = (&pair[0], &pair[1]);
        if x.first != y.second || x.second != y.first {
            return Err(PrefError::NotSwapped { index: 2 * k });
        }
        agree += (x.choice == y.choice.swapped()) as usize;
        for c in [x.choice, y.choice] {
            counts[match c {
                Choice::First => 0,
                Choice::Second => 1,
                Choice::Tie => 2,
            }] += 1;
        }
    }
    let n_pairs = records.len() / 2;
    let raw = agree as f64 / n_pairs as f64;
    let total = records.len() as f64;
    let (pf, ps, pt) = (counts[0] as f64 / total, counts[1] as f64 / total, counts[2] as f64 / total);
    // agreeing across orders means first↔second or tie↔tie
    let pe = 2.0 * pf * ps + pt * pt;
    let chance_corrected = ((1.0 - pe).abs() > 1e-12).then(|| (raw - pe) / (1.0 - pe));
    Ok(SwapConsistency {
        n_pairs,
        raw,
        chance_corrected,
    })
}

/// Win and tie counts. `wins[(i, j)]` is how often `i` beat `j`;
/// `ties` is symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceMatrix {
    pub ids: Vec<String>,
    pub wins: DMatrix<f64>,
    pub ties: DMatrix<f64>,
}

impl PreferenceMatrix {
    pub fn from_counts(ids: Vec<String>, wins: DMatrix<f64>, ties: DMatrix<f64>) -> Result<Self, PrefError> {
        let n = ids.len();
        let ok_shape = wins.shape() == (n, n) && ties.shape() == (n, n);
        if !ok_shape
            || wins.iter().chain(ties.iter()).any(|v| !v.is_finite() || *v < 0.0)
            || (0..n).any(|i| wins[(i, i)] != 0.0 || ties[(i, i)] != 0.0)
            || (0..n).any(|i| (0..n).any(|j| ties[(i, j)] != ties[(j, i)]))
        {
            return Err(PrefError::BadMatrix);
        }
        Ok(Self { ids, wins, ties })
    }

    pub fn from_records(ids: Vec<String>, records: &[ChoiceRecord]) -> Result<Self, PrefError> {
        let n = ids.len();
        let index: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let look = |s: &str| index.get(s).copied().ok_or_else(|| PrefError::UnknownImage(s.to_string()));
        let mut wins = DMatrix::zeros(n, n);
        let mut ties = DMatrix::zeros(n, n);
        for r in records {
            let (a, b) = (look(&r.first)?, look(&r.second)?);
            match r.choice {
                Choice::First => wins[(a, b)] += 1.0,
                Choice::Second => wins[(b, a)] += 1.0,
                Choice::Tie => {
                    ties[(a, b)] += 1.0;
                    ties[(b, a)] += 1.0;
                }
            }
        }
        Self::from_counts(ids, wins, ties)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)` without overflow.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Log posterior up to a constant. A win of `i` over `j` contributes
/// `ln σ(s_i − s_j)`; a tie contributes `ln σ(s_i − s_j) + ln σ(s_j − s_i)`,
/// which falls out of summing the symmetric tie matrix over ordered pairs.
pub fn log_posterior(m: &PreferenceMatrix, s: &[f64], prior_variance: f64) -> f64 {
    let n = m.len();
    let mut l = 0.0;
    for i in 0..n {
        for j in 0..n {
            let w = m.wins[(i, j)] + m.ties[(i, j)];
            if w != 0.0 {
                l += w * log_sigmoid(s[i] - s[j]);
            }
        }
    }
    l - s.iter().map(|x| x * x).sum::<f64>() / (2.0 * prior_variance)
}

pub fn gradient(m: &PreferenceMatrix, s: &[f64], prior_variance: f64) -> Vec<f64> {
    let n = m.len();
    let mut g: Vec<f64> = s.iter().map(|x| -x / prior_variance).collect();
    for i in 0..n {
        for j in 0..n {
            let w = m.wins[(i, j)] + m.ties[(i, j)];
            if w != 0.0 {
                let d = w * (1.0 - sigmoid(s[i] - s[j]));
                g[i] += d;
                g[j] -= d;
            }
        }
    }
    g
}

/// Negated Hessian; positive definite thanks to the prior.
fn neg_hessian(m: &PreferenceMatrix, s: &[f64], prior_variance: f64) -> DMatrix<f64> {
    let n = m.len();
    let mut h = DMatrix::identity(n, n) / prior_variance;
    for i in 0..n {
        for j in 0..n {
            let w = m.wins[(i, j)] + m.ties[(i, j)];
            if w != 0.0 {
                let p = sigmoid(s[i] - s[j]);
                let c = w * p * (1.0 - p);
                h[(i, i)] += c;
                h[(j, j)] += c;
                h[(i, j)] -= c;
                h[(j, i)] -= c;
            }
        }
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub prior_variance: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            prior_variance: 10.0,
            tol: 1e-8,
            max_iter: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedScores {
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
    pub iterations: usize,
    pub log_posterior: f64,
}

impl FittedScores {
    pub fn by_id(&self) -> BTreeMap<String, f64> {
        self.ids.iter().cloned().zip(self.scores.iter().copied()).collect()
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

/// MAP scores by damped Newton ascent; stops when the largest gradient
/// component drops below `tol`.
pub fn fit_map_scores(m: &PreferenceMatrix, opts: FitOptions) -> Result<FittedScores, PrefError> {
    if !(opts.prior_variance > 0.0 && opts.prior_variance.is_finite()) {
        return Err(PrefError::BadVariance(opts.prior_variance));
    }
    let n = m.len();
    let v = opts.prior_variance;
    let mut s = vec![0.0; n];
    let mut l = log_posterior(m, &s, v);
    for iter in 0..opts.max_iter {
        let g = gradient(m, &s, v);
        if inf_norm(&g) < opts.tol {
            return Ok(FittedScores {
                ids: m.ids.clone(),
                scores: s,
                iterations: iter,
                log_posterior: l,
            });
        }
        let gv = DVector::from_column_slice(&g);
        let dir = match neg_hessian(m, &s, v).cholesky() {
            Some(ch) => ch.solve(&gv),
            None => gv.clone(),
        };
        let slope = gv.dot(&dir);
        let mut step = 1.0;
        loop {
            let cand: Vec<f64> = s.iter().zip(dir.iter()).map(|(x, d)| x + step * d).collect();
            let lc = log_posterior(m, &cand, v);
            // near the optimum the objective change drops below f64
            // resolution, so a smaller gradient also counts as progress
            let progress = lc >= l + 1e-4 * step * slope
                || inf_norm(&gradient(m, &cand, v)) < inf_norm(&g);
            if progress || step < 1e-12 {
                s = cand;
                l = lc;
                break;
            }
            step *= 0.5;
        }
    }
    let g = gradient(m, &s, v);
    let grad_norm = inf_norm(&g);
    if grad_norm < opts.tol {
        return Ok(FittedScores {
            ids: m.ids.clone(),
            scores: s,
            iterations: opts.max_iter,
            log_posterior: l,
        });
    }
    Err(PrefError::NonConvergence {
        iterations: opts.max_iter,
        grad_norm,
        last: s,
    })
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, PrefError> {
    if x.len() != y.len() {
        return Err(PrefError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(PrefError::TooFewPoints);
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(PrefError::ConstantVector);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Per-dataset values averaged with per-dataset weights (pair counts).
pub fn weighted_average(values: &BTreeMap<String, f64>, weights: &BTreeMap<String, f64>) -> Result<f64, PrefError> {
    if values.is_empty() {
        return Err(PrefError::Empty);
    }
    if !values.keys().eq(weights.keys()) {
        return Err(PrefError::KeyMismatch);
    }
    if weights.values().any(|w| !(*w > 0.0 && w.is_finite())) {
        return Err(PrefError::BadWeights);
    }
    let total: f64 = weights.values().sum();
    Ok(values.iter().map(|(k, v)| v * weights[k]).sum::<f64>() / total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chat::{constant_client, FnClient};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("i{i}")).collect()
    }

    fn matrix(n: usize, wins: &[(usize, usize, f64)], ties: &[(usize, usize, f64)]) -> PreferenceMatrix {
        let mut w = DMatrix::zeros(n, n);
        let mut t = DMatrix::zeros(n, n);
        for &(i, j, c) in wins {
            w[(i, j)] += c;
        }
        for &(i, j, c) in ties {
            t[(i, j)] += c;
            t[(j, i)] += c;
        }
        PreferenceMatrix::from_counts(ids(n), w, t).unwrap()
    }

    /// Independent log posterior written per observation rather than per
    /// matrix cell.
    fn brute_log_posterior(obs: &[(usize, usize, f64)], s: &[f64], v: f64) -> f64 {
        brute_with_ties(obs, &[], s, v)
    }

    fn brute_with_ties(obs: &[(usize, usize, f64)], ties: &[(usize, usize, f64)], s: &[f64], v: f64) -> f64 {
        let lp = |x: f64| -(1.0 + (-x).exp()).ln();
        obs.iter().map(|&(i, j, c)| c * lp(s[i] - s[j])).sum::<f64>()
            + ties.iter().map(|&(i, j, t)| t * (lp(s[i] - s[j]) + lp(s[j] - s[i]))).sum::<f64>()
            - s.iter().map(|x| x * x).sum::<f64>() / (2.0 * v)
    }

    #[test]
    fn tie_term_matches_pairwise_definition() {
        let wins = [(0, 1, 2.0), (2, 1, 1.0)];
        let ties = [(0, 2, 3.0), (1, 2, 1.0)];
        let m = matrix(3, &wins, &ties);
        let s = [0.4, -1.2, 0.9];
        assert_relative_eq!(log_posterior(&m, &s, 10.0), brute_with_ties(&wins, &ties, &s, 10.0), epsilon = 1e-12);
    }

    #[test]
    fn likelihood_is_translation_invariant_without_prior() {
        let m = matrix(3, &[(0, 1, 4.0), (1, 2, 1.0), (2, 0, 2.0)], &[(0, 2, 1.0)]);
        let s = [0.3, -0.5, 1.7];
        let shifted = s.map(|x| x + 2.5);
        let no_prior = |v: &[f64]| log_posterior(&m, v, 10.0) + v.iter().map(|x| x * x).sum::<f64>() / 20.0;
        assert_relative_eq!(no_prior(&s), no_prior(&shifted), epsilon = 1e-10);
        let fit = fit_map_scores(&m, FitOptions::default()).unwrap();
        assert!(fit.scores.iter().sum::<f64>().abs() <= 1e-8 * 3.0 * 10.0);
    }

    #[test]
    fn three_item_grid_oracle() {
        let obs = [(0, 1, 9.0), (1, 0, 1.0), (1, 2, 9.0), (2, 1, 1.0), (0, 2, 9.0), (2, 0, 1.0)];
        let m = matrix(3, &obs, &[]);
        let fit = fit_map_scores(&m, FitOptions::default()).unwrap();

        // coarse-to-fine grid over s ∈ [-5, 5]^3
        let mut centre = [0.0f64; 3];
        let mut half = 5.0;
        for _ in 0..8 {
            let steps = 40;
            let mut best = (f64::NEG_INFINITY, centre);
            for a in 0..=steps {
                for b in 0..=steps {
                    for c in 0..=steps {
                        let p = [a, b, c].map(|k| k as f64 / steps as f64 * 2.0 * half - half);
                        let cand = [centre[0] + p[0], centre[1] + p[1], centre[2] + p[2]];
                        let l = brute_log_posterior(&obs, &cand, 10.0);
                        if l > best.0 {
                            best = (l, cand);
                        }
                    }
                }
            }
            centre = best.1;
            half /= 8.0;
        }
        let oracle = centre;
        for (a, b) in fit.scores.iter().zip(oracle) {
            assert!((a - b).abs() < 1e-3, "{:?} vs {:?}", fit.scores, oracle);
        }
        assert!(fit.scores[0] > fit.scores[1] && fit.scores[1] > fit.scores[2]);
        assert_relative_eq!(
            log_posterior(&m, &fit.scores, 10.0),
            brute_log_posterior(&obs, &fit.scores, 10.0),
            epsilon = 1e-9
        );
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = matrix(4, &[(0, 1, 3.0), (1, 2, 2.0), (3, 0, 1.0), (2, 3, 4.0)], &[(0, 2, 2.0), (1, 3, 1.0)]);
        let s = [0.3, -0.7, 1.1, -0.2];
        let g = gradient(&m, &s, 10.0);
        let h = 1e-6;
        let fd: Vec<f64> = (0..4)
            .map(|k| {
                let mut up = s;
                let mut dn = s;
                up[k] += h;
                dn[k] -= h;
                (log_posterior(&m, &up, 10.0) - log_posterior(&m, &dn, 10.0)) / (2.0 * h)
            })
            .collect();
        let scale = inf_norm(&fd).max(1.0);
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() / scale < 1e-4, "{g:?} vs {fd:?}");
        }
    }

    #[test]
    fn symmetric_counts_give_zero() {
        let m = matrix(3, &[(0, 1, 4.0), (1, 0, 4.0), (1, 2, 2.0), (2, 1, 2.0), (0, 2, 7.0), (2, 0, 7.0)], &[]);
        let fit = fit_map_scores(&m, FitOptions::default()).unwrap();
        assert!(fit.scores.iter().all(|x| x.abs() < 1e-8));
    }

    #[test]
    fn ties_only_and_empty_give_zero() {
        let m = matrix(3, &[], &[(0, 1, 5.0), (1, 2, 5.0)]);
        let fit = fit_map_scores(&m, FitOptions::default()).unwrap();
        assert!(fit.scores.iter().all(|x| x.abs() < 1e-9));
        let m = matrix(2, &[], &[]);
        assert_eq!(fit_map_scores(&m, FitOptions::default()).unwrap().scores, vec![0.0, 0.0]);
    }

    #[test]
    fn unanimous_wins_stay_finite() {
        let m = matrix(2, &[(0, 1, 1000.0)], &[]);
        let fit = fit_map_scores(&m, FitOptions::default()).unwrap();
        assert!(fit.scores.iter().all(|x| x.is_finite()));
        assert!(fit.scores[0] > 0.0 && fit.scores[1] < 0.0);
    }

    #[test]
    fn bad_inputs() {
        let m = matrix(2, &[(0, 1, 1.0)], &[]);
        let bad = FitOptions {
            prior_variance: 0.0,
            ..Default::default()
        };
        assert!(matches!(fit_map_scores(&m, bad), Err(PrefError::BadVariance(_))));
        let mut w = DMatrix::zeros(2, 2);
        w[(0, 0)] = 1.0;
        assert!(PreferenceMatrix::from_counts(ids(2), w, DMatrix::zeros(2, 2)).is_err());
        let tight = FitOptions {
            max_iter: 0,
            ..Default::default()
        };
        assert!(matches!(fit_map_scores(&m, tight), Err(PrefError::NonConvergence { .. })));
    }

    #[test]
    fn choice_mapping() {
        assert_eq!(map_choice("The first image."), Some(Choice::First));
        assert_eq!(map_choice("Second"), Some(Choice::Second));
        assert_eq!(map_choice("They look the same"), Some(Choice::Tie));
        assert_eq!(map_choice("The second is better than the first"), Some(Choice::Second));
        assert_eq!(map_choice("firstly, hmm"), None);
        assert_eq!(map_choice("I cannot tell"), None);
        assert_eq!(map_choice("Both have similar quality"), Some(Choice::Tie));
        assert_eq!(map_choice("similar quality"), Some(Choice::Tie));
    }

    fn rec(a: &str, b: &str, c: Choice) -> ChoiceRecord {
        ChoiceRecord {
            first: a.into(),
            second: b.into(),
            choice: c,
            flagged: false,
        }
    }

    #[test]
    fn consistency_examples() {
        // always "first" regardless of order: positional bias, never consistent
        let biased: Vec<ChoiceRecord> = (0..5)
            .flat_map(|k| {
                let (a, b) = (format!("a{k}"), format!("b{k}"));
                [rec(&a, &b, Choice::First), rec(&b, &a, Choice::First)]
            })
            .collect();
        let c = swap_consistency(&biased).unwrap();
        assert_eq!(c.raw, 0.0);
        // every answer is "first", so chance agreement is zero too
        assert_eq!(c.chance_corrected, Some(0.0));

        let consistent: Vec<ChoiceRecord> = (0..4)
            .flat_map(|k| {
                let (a, b) = (format!("a{k}"), format!("b{k}"));
                [rec(&a, &b, Choice::First), rec(&b, &a, Choice::Second)]
            })
            .collect();
        let c = swap_consistency(&consistent).unwrap();
        assert_eq!(c.raw, 1.0);
        assert_eq!(c.chance_corrected, Some(1.0));

        // 4 pairs, 3 consistent; marginals 5 first / 3 second of 8 answers
        let table = vec![
            rec("a", "b", Choice::First),
            rec("b", "a", Choice::Second),
            rec("c", "d", Choice::First),
            rec("d", "c", Choice::Second),
            rec("e", "f", Choice::Second),
            rec("f", "e", Choice::First),
            rec("g", "h", Choice::First),
            rec("h", "g", Choice::First),
        ];
        let c = swap_consistency(&table).unwrap();
        assert_eq!(c.raw, 0.75);
        // p_e = 2 * 5/8 * 3/8 = 15/32, so (3/4 - 15/32) / (17/32) = 9/17
        assert_relative_eq!(c.chance_corrected.unwrap(), 9.0 / 17.0, epsilon = 1e-12);

        let all_tie = vec![rec("a", "b", Choice::Tie), rec("b", "a", Choice::Tie)];
        let c = swap_consistency(&all_tie).unwrap();
        assert_eq!(c.raw, 1.0);
        assert_eq!(c.chance_corrected, None);

        assert!(matches!(swap_consistency(&consistent[..3]), Err(PrefError::OddRecords(3))));
        let mismatched = vec![rec("a", "b", Choice::First), rec("a", "c", Choice::First)];
        assert!(matches!(swap_consistency(&mismatched), Err(PrefError::NotSwapped { index: 0 })));
    }

    #[test]
    fn run_2afc_records_both_orders() {
        let pairs = vec![(ImageRef::new("x"), ImageRef::new("y")), (ImageRef::new("p"), ImageRef::new("q"))];
        let c = constant_client("stub-first", 2, "first");
        let recs = run_2afc(&c, &pairs, InterleaveFormat::OrdinalLabel, 2).unwrap();
        assert_eq!(recs.len(), 4);
        assert_eq!((recs[0].first.as_str(), recs[1].first.as_str()), ("x", "y"));
        assert_eq!(swap_consistency(&recs).unwrap().raw, 0.0);

        let picky = FnClient::new("prefers-x", 2, |req: &ChatRequest| {
            let first = &req.turns[0].images[0].id;
            Ok(if first == "x" || first == "p" { "first" } else { "second" }.to_string())
        });
        let recs = run_2afc(&picky, &pairs, InterleaveFormat::OrdinalLabel, 2).unwrap();
        assert_eq!(swap_consistency(&recs).unwrap().raw, 1.0);

        let vague = constant_client("vague", 2, "hard to say");
        let recs = run_2afc(&vague, &pairs, InterleaveFormat::OrdinalLabel, 1).unwrap();
        assert!(recs.iter().all(|r| r.flagged && r.choice == Choice::Tie));
    }

    #[test]
    fn correlation_and_weighting() {
        let x = [0.5, -1.0, 3.0, 7.25, 2.0];
        let affine: Vec<f64> = x.iter().map(|v| 2.0 * v + 3.0).collect();
        assert!((pearson(&x, &affine).unwrap() - 1.0).abs() <= 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &neg).unwrap() + 1.0).abs() <= 1e-12);
        let r = pearson(&[1.0, 2.0, 4.0], &[2.0, 1.0, 5.0]).unwrap();
        assert_relative_eq!(r, 48.0 / 3276f64.sqrt(), epsilon = 1e-12);
        assert!(matches!(pearson(&[1.0, 1.0], &[1.0, 2.0]), Err(PrefError::ConstantVector)));
        assert!(matches!(pearson(&[1.0], &[1.0]), Err(PrefError::TooFewPoints)));

        let vals: BTreeMap<String, f64> = [("a".into(), 0.8), ("b".into(), 0.6)].into();
        let wts: BTreeMap<String, f64> = [("a".into(), 100.0), ("b".into(), 300.0)].into();
        assert_relative_eq!(weighted_average(&vals, &wts).unwrap(), 0.65, epsilon = 1e-12);
        let eq: BTreeMap<String, f64> = [("a".into(), 5.0), ("b".into(), 5.0)].into();
        assert_relative_eq!(weighted_average(&vals, &eq).unwrap(), 0.7, epsilon = 1e-12);
        let one: BTreeMap<String, f64> = [("a".into(), 0.8)].into();
        let w1: BTreeMap<String, f64> = [("a".into(), 42.0)].into();
        assert_eq!(weighted_average(&one, &w1).unwrap(), 0.8);
        assert!(matches!(weighted_average(&BTreeMap::new(), &BTreeMap::new()), Err(PrefError::Empty)));
        let wrong: BTreeMap<String, f64> = [("a".into(), 1.0)].into();
        assert!(matches!(weighted_average(&vals, &wrong), Err(PrefError::KeyMismatch)));
    }

    fn arb_matrix() -> impl Strategy<Value = PreferenceMatrix> {
        (2usize..6).prop_flat_map(|n| {
            (
                proptest::collection::vec(0u8..6, n * n),
                proptest::collection::vec(0u8..3, n * n),
            )
                .prop_map(move |(w, t)| {
                    let mut wins = DMatrix::zeros(n, n);
                    let mut ties = DMatrix::zeros(n, n);
                    for i in 0..n {
                        for j in 0..n {
                            if i != j {
                                wins[(i, j)] = w[i * n + j] as f64;
                                if i < j {
                                    ties[(i, j)] = t[i * n + j] as f64;
                                    ties[(j, i)] = t[i * n + j] as f64;
                                }
                            }
                        }
                    }
                    PreferenceMatrix::from_counts(ids(n), wins, ties).unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn fit_is_stationary_and_permutation_equivariant(m in arb_matrix(), rot in 0usize..6) {
            let fit = fit_map_scores(&m, FitOptions::default()).unwrap();
            prop_assert!(inf_norm(&gradient(&m, &fit.scores, 10.0)) < 1e-8);

            let n = m.len();
            let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
            let pw = DMatrix::from_fn(n, n, |i, j| m.wins[(perm[i], perm[j])]);
            let pt = DMatrix::from_fn(n, n, |i, j| m.ties[(perm[i], perm[j])]);
            let pids = perm.iter().map(|&p| m.ids[p].clone()).collect();
            let pm = PreferenceMatrix::from_counts(pids, pw, pt).unwrap();
            let pfit = fit_map_scores(&pm, FitOptions::default()).unwrap();
            for (i, &p) in perm.iter().enumerate() {
                prop_assert!((pfit.scores[i] - fit.scores[p]).abs() < 1e-6);
            }
        }

        #[test]
        fn extra_win_raises_winner(m in arb_matrix(), a in 0usize..6, b in 0usize..6) {
            let n = m.len();
            let (a, b) = (a % n, b % n);
            prop_assume!(a != b);
            let base = fit_map_scores(&m, FitOptions::default()).unwrap();
            let mut more = m.clone();
            more.wins[(a, b)] += 1.0;
            let fit = fit_map_scores(&more, FitOptions::default()).unwrap();
            prop_assert!(fit.scores[a] - fit.scores[b] > base.scores[a] - base.scores[b]);
        }

        #[test]
        fn raw_consistency_ignores_storage_order(choices in proptest::collection::vec((0u8..3, 0u8..3), 1..20)) {
            let to = |c: u8| [Choice::First, Choice::Second, Choice::Tie][c as usize];
            let recs: Vec<ChoiceRecord> = choices.iter().enumerate().flat_map(|(k, (x, y))| {
                let (a, b) = (format!("a{k}"), format!("b{k}"));
                [rec(&a, &b, to(*x)), rec(&b, &a, to(*y))]
            }).collect();
            let flipped: Vec<ChoiceRecord> = recs.chunks(2).flat_map(|p| [p[1].clone(), p[0].clone()]).collect();
            prop_assert_eq!(swap_consistency(&recs).unwrap().raw, swap_consistency(&flipped).unwrap().raw);
        }

        #[test]
        fn kappa_bounded(choices in proptest::collection::vec(0u8..3, 2..40)) {
            let to = |c: u8| [Choice::First, Choice::Second, Choice::Tie][c as usize];
            let recs: Vec<ChoiceRecord> = choices.chunks(2).filter(|c| c.len() == 2).enumerate().flat_map(|(k, c)| {
                let (a, b) = (format!("a{k}"), format!("b{k}"));
                [rec(&a, &b, to(c[0])), rec(&b, &a, to(c[1]))]
            }).collect();
            let s = swap_consistency(&recs).unwrap();
            prop_assert!((0.0..=1.0).contains(&s.raw));
            if let Some(k) = s.chance_corrected {
                prop_assert!(k <= 1.0 + 1e-12);
            }
        }
    }
}
