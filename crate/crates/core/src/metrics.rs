//! Word error rate and the constrained-adaptation selection score.
//!
//! WERs are percentages throughout. A candidate's score is the product of
//! `o_scale`, which shrinks linearly from 1 to 0 as the original-domain
//! degradation approaches the budget `kappa`, and `a_werr`, the clamped
//! relative WER improvement on the new domain.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_KAPPA: f64 = 3.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub subs: usize,
    pub ins: usize,
    pub dels: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.subs + self.ins + self.dels
    }
}

/// Unit-cost Levenshtein alignment of `hyp` against `reference`.
///
/// Among minimum-cost alignments the backtrace prefers a substitution (or
/// match), then an insertion, then a deletion.
pub fn edit_distance<T: PartialEq>(reference: &[T], hyp: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut cost = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        cost[i * w] = i;
    }
    for j in 0..=m {
        cost[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = cost[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let ins = cost[i * w + j - 1] + 1;
            let del = cost[(i - 1) * w + j] + 1;
            cost[i * w + j] = diag.min(ins).min(del);
        }
    }
    let mut counts = EditCounts::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = cost[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hyp[j - 1];
            if cost[(i - 1) * w + j - 1] + usize::from(!same) == here {
                if !same {
                    counts.subs += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && cost[i * w + j - 1] + 1 == here {
            counts.ins += 1;
            j -= 1;
        } else {
            counts.dels += 1;
            i -= 1;
        }
    }
    counts
}

/// Per-dataset recognition result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_id: String,
    pub wer: f64,
    pub n_words: usize,
    pub n_errors: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keyword_accuracy: Option<f64>,
}

impl EvalReport {
    pub fn from_counts(
        dataset_id: impl Into<String>,
        n_words: usize,
        n_errors: usize,
    ) -> Result<Self> {
        if n_words == 0 {
            return Err(Error::Input(
                "WER undefined for an empty reference corpus".into(),
            ));
        }
        Ok(EvalReport {
            dataset_id: dataset_id.into(),
            wer: 100.0 * n_errors as f64 / n_words as f64,
            n_words,
            n_errors,
            keyword_accuracy: None,
        })
    }

    /// Report carrying only a WER value (e.g. averaged over trials).
    pub fn with_wer(dataset_id: impl Into<String>, wer: f64) -> Self {
        EvalReport {
            dataset_id: dataset_id.into(),
            wer,
            n_words: 0,
            n_errors: 0,
            keyword_accuracy: None,
        }
    }
}

/// Corpus-level WER: `100 * sum(errors) / sum(reference words)`.
pub fn wer<T: PartialEq>(refs: &[Vec<T>], hyps: &[Vec<T>]) -> Result<f64> {
    let (words, errors) = corpus_counts(refs, hyps)?;
    if words == 0 {
        return Err(Error::Input(
            "WER undefined for an empty reference corpus".into(),
        ));
    }
    Ok(100.0 * errors as f64 / words as f64)
}

pub fn corpus_counts<T: PartialEq>(refs: &[Vec<T>], hyps: &[Vec<T>]) -> Result<(usize, usize)> {
    if refs.len() != hyps.len() {
        return Err(Error::Input(format!(
            "{} references but {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let words = refs.iter().map(Vec::len).sum();
    let errors = refs
        .iter()
        .zip(hyps)
        .map(|(r, h)| edit_distance(r, h).total())
        .sum();
    Ok((words, errors))
}

/// Percentage of hypotheses exactly equal to their single-token reference.
pub fn keyword_accuracy<T: PartialEq>(refs: &[T], hyps: &[Vec<T>]) -> Result<f64> {
    if refs.len() != hyps.len() || refs.is_empty() {
        return Err(Error::Input(
            "keyword accuracy needs equal, non-empty inputs".into(),
        ));
    }
    let correct = refs
        .iter()
        .zip(hyps)
        .filter(|(r, h)| h.len() == 1 && h[0] == **r)
        .count();
    Ok(100.0 * correct as f64 / refs.len() as f64)
}

/// Clamped absolute degradation `max(0, after - before)`.
pub fn wer_degradation(wer_before: f64, wer_after: f64) -> f64 {
    (wer_after - wer_before).max(0.0)
}

/// Mean over datasets of `max(0, (kappa - deg) / kappa)`.
pub fn o_scale(degradations: &[f64], kappa: f64) -> Result<f64> {
    if degradations.is_empty() {
        return Err(Error::Input(
            "o_scale needs at least one original dataset".into(),
        ));
    }
    if !(kappa > 0.0) {
        return Err(Error::Config(format!(
            "kappa must be positive, got {kappa}"
        )));
    }
    let terms: f64 = degradations
        .iter()
        .map(|&d| ((kappa - d) / kappa).max(0.0))
        .sum();
    Ok(terms / degradations.len() as f64)
}

/// Clamped relative improvement `max(0, (before - after) / before)`.
pub fn a_werr(wer_before: f64, wer_after: f64) -> Result<f64> {
    if !(wer_before > 0.0) {
        return Err(Error::Input(format!(
            "relative improvement undefined for a baseline WER of {wer_before}"
        )));
    }
    Ok(((wer_before - wer_after) / wer_before).max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub kappa: f64,
    pub original_datasets: Vec<String>,
    pub new_datasets: Vec<String>,
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0) {
            return Err(Error::Config(format!(
                "kappa must be positive, got {}",
                self.kappa
            )));
        }
        if self.original_datasets.is_empty() || self.new_datasets.is_empty() {
            return Err(Error::Config(
                "selection needs original and new datasets".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub wer_deg: Vec<f64>,
    pub o_scale: f64,
    pub a_werr: f64,
    pub score: f64,
    pub kappa_violated: bool,
}

fn find<'a>(reports: &'a [EvalReport], id: &str, when: &str) -> Result<&'a EvalReport> {
    reports
        .iter()
        .find(|r| r.dataset_id == id)
        .ok_or_else(|| Error::Input(format!("missing {when} report for dataset {id}")))
}

/// Scores one candidate from its before/after reports.
///
/// The new-domain WER is the unweighted mean over `cfg.new_datasets`.
pub fn score(
    before: &[EvalReport],
    after: &[EvalReport],
    cfg: &SelectionConfig,
) -> Result<CandidateScore> {
    cfg.validate()?;
    let mut wer_deg = Vec::with_capacity(cfg.original_datasets.len());
    for id in &cfg.original_datasets {
        let b = find(before, id, "pre-adaptation")?;
        let a = find(after, id, "post-adaptation")?;
        wer_deg.push(wer_degradation(b.wer, a.wer));
    }
    let mean = |reports: &[EvalReport], when: &str| -> Result<f64> {
        let mut total = 0.0;
        for id in &cfg.new_datasets {
            total += find(reports, id, when)?.wer;
        }
        Ok(total / cfg.new_datasets.len() as f64)
    };
    let new_before = mean(before, "pre-adaptation")?;
    let new_after = mean(after, "post-adaptation")?;
    let o = o_scale(&wer_deg, cfg.kappa)?;
    let a = a_werr(new_before, new_after)?;
    Ok(CandidateScore {
        kappa_violated: wer_deg.iter().any(|&d| d >= cfg.kappa),
        wer_deg,
        o_scale: o,
        a_werr: a,
        score: o * a,
    })
}
