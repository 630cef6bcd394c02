//! Linear-chain CRF: path scoring, exact log-partition, NLL loss with
//! analytic gradients, Viterbi decoding, and brute-force oracles.
//!
//! Scores follow the additive decomposition
//! `start[y_0] + Σ_i P[i][y_i] + Σ_i A[y_{i-1}][y_i] + stop[y_{n-1}]`
//! where `P` is the emission matrix and `A` the transition matrix.

use ndarray::{Array1, Array2};

use crate::corpus::{label_kind, LabelKind, LabelSet};
use crate::error::{Error, Result};
use crate::math::logsumexp;

/// Finite stand-in for -inf so masked transitions never produce NaN in
/// log-sum-exp arithmetic.
pub const MASK_SCORE: f64 = -1e4;

/// Guard for the brute-force oracles: refuse instances with more tag
/// sequences than this.
pub const BRUTE_FORCE_LIMIT: u64 = 1_000_000;

/// Transition structure of the CRF: tag-to-tag scores plus learned
/// start/stop scores standing in for virtual boundary tags.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionModel {
    /// `trans[[a, b]]` scores moving from tag `a` to tag `b`.
    pub trans: Array2<f64>,
    /// `start[b]` scores beginning a sequence with tag `b`.
    pub start: Array1<f64>,
    /// `stop[a]` scores ending a sequence with tag `a`.
    pub stop: Array1<f64>,
}

impl TransitionModel {
    pub fn zeros(k: usize) -> Self {
        Self {
            trans: Array2::zeros((k, k)),
            start: Array1::zeros(k),
            stop: Array1::zeros(k),
        }
    }

    pub fn num_tags(&self) -> usize {
        self.start.len()
    }

    fn check(&self) -> Result<()> {
        let k = self.num_tags();
        if self.trans.dim() != (k, k) || self.stop.len() != k {
            return Err(Error::Dimension {
                what: "transition model",
                expected: format!("trans {k}x{k}, stop {k}"),
                got: format!("trans {:?}, stop {}", self.trans.dim(), self.stop.len()),
            });
        }
        Ok(())
    }

    /// Adds a mask (e.g. from [`bio_constraint_mask`]) onto this model.
    pub fn apply_mask(&mut self, mask: &TransitionModel) -> Result<()> {
        if mask.num_tags() != self.num_tags() {
            return Err(Error::Dimension {
                what: "transition mask",
                expected: self.num_tags().to_string(),
                got: mask.num_tags().to_string(),
            });
        }
        self.trans += &mask.trans;
        self.start += &mask.start;
        self.stop += &mask.stop;
        Ok(())
    }
}

/// Decoder output: the tag sequence and its path score.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedPath {
    pub tags: Vec<usize>,
    pub score: f64,
}

/// Gradients of the NLL with respect to emissions and transition scores.
/// Every entry is `marginal - gold indicator`.
#[derive(Debug, Clone)]
pub struct CrfGradients {
    pub d_emissions: Array2<f64>,
    pub d_trans: Array2<f64>,
    pub d_start: Array1<f64>,
    pub d_stop: Array1<f64>,
}

fn check_instance(p: &Array2<f64>, t: &TransitionModel) -> Result<(usize, usize)> {
    t.check()?;
    let (n, k) = p.dim();
    if n == 0 {
        return Err(Error::Dimension {
            what: "emission matrix",
            expected: "at least one position".into(),
            got: "0".into(),
        });
    }
    if k != t.num_tags() {
        return Err(Error::Dimension {
            what: "emission matrix",
            expected: format!("{} tag columns", t.num_tags()),
            got: k.to_string(),
        });
    }
    Ok((n, k))
}

fn check_tags(tags: &[usize], n: usize, k: usize) -> Result<()> {
    if tags.len() != n {
        return Err(Error::Dimension {
            what: "tag sequence",
            expected: format!("length {n}"),
            got: tags.len().to_string(),
        });
    }
    if let Some(&bad) = tags.iter().find(|&&t| t >= k) {
        return Err(Error::Dimension {
            what: "tag id",
            expected: format!("< {k}"),
            got: bad.to_string(),
        });
    }
    Ok(())
}

// Single accumulation order shared by path_score, Viterbi and the brute
// force so equal paths produce bit-identical scores.
fn score_path_unchecked(p: &Array2<f64>, tags: &[usize], t: &TransitionModel) -> f64 {
    let n = tags.len();
    let mut s = t.start[tags[0]] + p[[0, tags[0]]];
    for i in 1..n {
        s += t.trans[[tags[i - 1], tags[i]]];
        s += p[[i, tags[i]]];
    }
    s += t.stop[tags[n - 1]];
    s
}

/// Score of one tag sequence under emissions `p` and transitions `t`.
pub fn path_score(p: &Array2<f64>, tags: &[usize], t: &TransitionModel) -> Result<f64> {
    let (n, k) = check_instance(p, t)?;
    check_tags(tags, n, k)?;
    Ok(score_path_unchecked(p, tags, t))
}

fn forward_log_alphas(p: &Array2<f64>, t: &TransitionModel) -> Array2<f64> {
    let (n, k) = p.dim();
    let mut alpha = Array2::zeros((n, k));
    for tag in 0..k {
        alpha[[0, tag]] = t.start[tag] + p[[0, tag]];
    }
    let mut work = vec![0.0; k];
    for i in 1..n {
        for b in 0..k {
            for (a, w) in work.iter_mut().enumerate() {
                *w = alpha[[i - 1, a]] + t.trans[[a, b]];
            }
            alpha[[i, b]] = logsumexp(&work) + p[[i, b]];
        }
    }
    alpha
}

fn backward_log_betas(p: &Array2<f64>, t: &TransitionModel) -> Array2<f64> {
    let (n, k) = p.dim();
    let mut beta = Array2::zeros((n, k));
    for tag in 0..k {
        beta[[n - 1, tag]] = t.stop[tag];
    }
    let mut work = vec![0.0; k];
    for i in (0..n - 1).rev() {
        for a in 0..k {
            for (b, w) in work.iter_mut().enumerate() {
                *w = t.trans[[a, b]] + p[[i + 1, b]] + beta[[i + 1, b]];
            }
            beta[[i, a]] = logsumexp(&work);
        }
    }
    beta
}

/// Log of the sum over all `k^n` tag sequences of `exp(path_score)`,
/// computed by the forward recursion in log space, O(n·k²).
pub fn log_partition(p: &Array2<f64>, t: &TransitionModel) -> Result<f64> {
    let (n, k) = check_instance(p, t)?;
    let alpha = forward_log_alphas(p, t);
    let last: Vec<f64> = (0..k)
        .map(|tag| alpha[[n - 1, tag]] + t.stop[tag])
        .collect();
    let log_z = logsumexp(&last);
    if !log_z.is_finite() {
        return Err(Error::NumericFailure(format!(
            "log partition is {log_z} (n={n}, k={k})"
        )));
    }
    Ok(log_z)
}

/// Negative log-likelihood of `gold` plus its exact gradients.
///
/// `loss = log_partition - path_score(gold) >= 0`; gradient entries are
/// `marginal - indicator`, with marginals from the forward-backward pass.
pub fn nll_loss(
    p: &Array2<f64>,
    gold: &[usize],
    t: &TransitionModel,
) -> Result<(f64, CrfGradients)> {
    let (n, k) = check_instance(p, t)?;
    check_tags(gold, n, k)?;

    let alpha = forward_log_alphas(p, t);
    let beta = backward_log_betas(p, t);
    let last: Vec<f64> = (0..k)
        .map(|tag| alpha[[n - 1, tag]] + t.stop[tag])
        .collect();
    let log_z = logsumexp(&last);
    if !log_z.is_finite() {
        return Err(Error::NumericFailure(format!("log partition is {log_z}")));
    }
    let gold_score = score_path_unchecked(p, gold, t);
    let loss = log_z - gold_score;

    let mut d_emissions = Array2::zeros((n, k));
    let mut d_start = Array1::zeros(k);
    let mut d_stop = Array1::zeros(k);
    for i in 0..n {
        for tag in 0..k {
            let m = (alpha[[i, tag]] + beta[[i, tag]] - log_z).exp();
            d_emissions[[i, tag]] = m;
            if i == 0 {
                d_start[tag] = m;
            }
            if i == n - 1 {
                d_stop[tag] = m;
            }
        }
        d_emissions[[i, gold[i]]] -= 1.0;
    }
    d_start[gold[0]] -= 1.0;
    d_stop[gold[n - 1]] -= 1.0;

    let mut d_trans = Array2::zeros((k, k));
    for i in 0..n - 1 {
        for a in 0..k {
            for b in 0..k {
                d_trans[[a, b]] +=
                    (alpha[[i, a]] + t.trans[[a, b]] + p[[i + 1, b]] + beta[[i + 1, b]] - log_z)
                        .exp();
            }
        }
        d_trans[[gold[i], gold[i + 1]]] -= 1.0;
    }

    Ok((
        loss,
        CrfGradients {
            d_emissions,
            d_trans,
            d_start,
            d_stop,
        },
    ))
}

/// Highest-scoring tag sequence via max-product dynamic programming.
/// Score ties are broken toward the lowest tag id at every step.
pub fn viterbi_decode(p: &Array2<f64>, t: &TransitionModel) -> Result<DecodedPath> {
    let (n, k) = check_instance(p, t)?;
    let mut vit = Array2::zeros((n, k));
    let mut back = vec![vec![0usize; k]; n];
    for tag in 0..k {
        vit[[0, tag]] = t.start[tag] + p[[0, tag]];
    }
    for i in 1..n {
        for b in 0..k {
            let mut best_a = 0;
            let mut best = vit[[i - 1, 0]] + t.trans[[0, b]];
            for a in 1..k {
                let cand = vit[[i - 1, a]] + t.trans[[a, b]];
                if cand > best {
                    best = cand;
                    best_a = a;
                }
            }
            back[i][b] = best_a;
            vit[[i, b]] = best + p[[i, b]];
        }
    }
    let mut best_tag = 0;
    let mut best = vit[[n - 1, 0]] + t.stop[0];
    for tag in 1..k {
        let cand = vit[[n - 1, tag]] + t.stop[tag];
        if cand > best {
            best = cand;
            best_tag = tag;
        }
    }
    if !best.is_finite() {
        return Err(Error::NumericFailure(format!("viterbi score is {best}")));
    }
    let mut tags = vec![0usize; n];
    tags[n - 1] = best_tag;
    for i in (1..n).rev() {
        tags[i - 1] = back[i][tags[i]];
    }
    Ok(DecodedPath { tags, score: best })
}

fn guard_enumeration(n: usize, k: usize) -> Result<()> {
    let mut paths: u64 = 1;
    for _ in 0..n {
        paths = paths
            .checked_mul(k as u64)
            .filter(|&c| c <= BRUTE_FORCE_LIMIT)
            .ok_or(Error::InstanceTooLarge {
                paths: (k as f64).powi(n as i32),
                limit: BRUTE_FORCE_LIMIT as f64,
            })?;
    }
    Ok(())
}

// Odometer enumeration with position 0 as the fastest digit: sequences are
// visited in ascending order of the reversed tuple (y_{n-1}, ..., y_0),
// which is exactly the order in which Viterbi's lowest-id tie-break prefers
// equal-scoring paths.
fn for_each_path(n: usize, k: usize, mut visit: impl FnMut(&[usize])) {
    let mut tags = vec![0usize; n];
    loop {
        visit(&tags);
        let mut i = 0;
        loop {
            if i == n {
                return;
            }
            tags[i] += 1;
            if tags[i] < k {
                break;
            }
            tags[i] = 0;
            i += 1;
        }
    }
}

/// Exhaustive log-partition; instances are limited to `k^n <=` 10^6.
pub fn brute_force_log_partition(p: &Array2<f64>, t: &TransitionModel) -> Result<f64> {
    let (n, k) = check_instance(p, t)?;
    guard_enumeration(n, k)?;
    let mut scores = Vec::new();
    for_each_path(n, k, |tags| scores.push(score_path_unchecked(p, tags, t)));
    Ok(logsumexp(&scores))
}

/// Exhaustive best path with the same tie-break as [`viterbi_decode`].
pub fn brute_force_best(p: &Array2<f64>, t: &TransitionModel) -> Result<DecodedPath> {
    let (n, k) = check_instance(p, t)?;
    guard_enumeration(n, k)?;
    let mut best: Option<DecodedPath> = None;
    for_each_path(n, k, |tags| {
        let score = score_path_unchecked(p, tags, t);
        if best.as_ref().is_none_or(|b| score > b.score) {
            best = Some(DecodedPath {
                tags: tags.to_vec(),
                score,
            });
        }
    });
    Ok(best.expect("enumeration visits at least one path"))
}

/// Additive mask enforcing hard BIO continuity: score [`MASK_SCORE`] on
/// every transition `a -> I-X` where `a` is neither `B-X` nor `I-X`, and on
/// starting with any `I-X`. All other entries (and all stop scores) are 0.
pub fn bio_constraint_mask(labels: &LabelSet) -> Result<TransitionModel> {
    let k = labels.len();
    for id in 0..k {
        label_kind(labels.label(id))?;
    }
    let mut mask = TransitionModel::zeros(k);
    for b in 0..k {
        let LabelKind::Inside(ty) = label_kind(labels.label(b))? else {
            continue;
        };
        mask.start[b] = MASK_SCORE;
        for a in 0..k {
            let continues = matches!(
                label_kind(labels.label(a))?,
                LabelKind::Begin(prev) | LabelKind::Inside(prev) if prev == ty
            );
            if !continues {
                mask.trans[[a, b]] = MASK_SCORE;
            }
        }
    }
    Ok(mask)
}
