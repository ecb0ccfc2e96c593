use std::path::Path;

use xferlab_core::data::{read_dataset_logged, AccessLog, Utterance};
use xferlab_core::metrics::{corpus_counts, keyword_accuracy, EvalReport};
use xferlab_core::model::decode::greedy_decode;
use xferlab_core::{Model64, ModelConfig};

use crate::config::EvalSet;
use crate::error::{HarnessError, Result};

#[derive(Clone, Debug)]
pub struct Dataset {
    pub id: String,
    pub utts: Vec<Utterance>,
}

impl Dataset {
    /// A set where every utterance is a single label is scored for keyword
    /// accuracy as well as WER.
    pub fn is_keyword(&self) -> bool {
        !self.utts.is_empty() && self.utts.iter().all(|u| u.tokens.len() == 1)
    }
}

/// Reads a dataset and checks it against the model's feature and label sizes.
pub fn load_dataset(id: &str, dir: &Path, model: &ModelConfig, log: &AccessLog) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(HarnessError::Data(format!(
            "dataset directory {} not found",
            dir.display()
        )));
    }
    let utts = read_dataset_logged(dir, log)?;
    for u in &utts {
        if u.n_feats != model.feature_dim {
            return Err(HarnessError::Data(format!(
                "{}: utterance {} has {} features, model expects {}",
                dir.display(),
                u.id,
                u.n_feats,
                model.feature_dim
            )));
        }
        if let Some(&t) = u.tokens.iter().find(|&&t| t >= model.vocab_size) {
            return Err(HarnessError::Data(format!(
                "{}: utterance {} has label {t} outside the model vocabulary of {}",
                dir.display(),
                u.id,
                model.vocab_size
            )));
        }
    }
    Ok(Dataset {
        id: id.to_string(),
        utts,
    })
}

pub fn load_eval_sets<'a>(
    sets: impl IntoIterator<Item = &'a EvalSet>,
    model: &ModelConfig,
    log: &AccessLog,
) -> Result<Vec<Dataset>> {
    sets.into_iter()
        .map(|s| load_dataset(&s.id, &s.dir, model, log))
        .collect()
}

pub fn decode_all(
    model: &Model64,
    set: &Dataset,
    max_symbols_per_frame: usize,
) -> Result<Vec<Vec<usize>>> {
    set.utts
        .iter()
        .map(|u| {
            Ok(greedy_decode(
                model,
                &u.to_example::<f64>().features,
                max_symbols_per_frame,
            )?)
        })
        .collect()
}

pub fn evaluate(
    model: &Model64,
    set: &Dataset,
    max_symbols_per_frame: usize,
) -> Result<EvalReport> {
    let hyps = decode_all(model, set, max_symbols_per_frame)?;
    let refs: Vec<Vec<usize>> = set.utts.iter().map(|u| u.tokens.clone()).collect();
    let (words, errors) = corpus_counts(&refs, &hyps)?;
    let mut report = EvalReport::from_counts(&set.id, words, errors)?;
    if set.is_keyword() {
        let labels: Vec<usize> = refs.iter().map(|r| r[0]).collect();
        report.keyword_accuracy = Some(keyword_accuracy(&labels, &hyps)?);
    }
    Ok(report)
}

pub fn evaluate_all(
    model: &Model64,
    sets: &[Dataset],
    max_symbols_per_frame: usize,
) -> Result<Vec<EvalReport>> {
    sets.iter()
        .map(|s| evaluate(model, s, max_symbols_per_frame))
        .collect()
}
