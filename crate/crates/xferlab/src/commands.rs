//! The harness commands behind the CLI subcommands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xferlab_core::data::{generate_domain, to_examples, write_dataset, AccessLog, AccessRecord};
use xferlab_core::metrics::{score, CandidateScore, EvalReport};
use xferlab_core::train::{fit, AdaptationSet, StepLog, TrainConfig, TrainMode};
use xferlab_core::{Model64, SeedTree};

use crate::candidate::{train_candidate, Candidate};
use crate::config::HarnessConfig;
use crate::error::{HarnessError, Result};
use crate::eval::{evaluate_all, load_dataset, load_eval_sets, Dataset};
use crate::io::{write_json, write_text};

pub const BASE_CHECKPOINT: &str = "base.ckpt";
pub const MODEL_CHECKPOINT: &str = "model.ckpt";

/// Writes every synthetic domain listed in the config.
pub fn generate(cfg: &HarnessConfig) -> Result<()> {
    if cfg.generate.is_empty() {
        return Err(HarnessError::Config(
            "config has no generate section".into(),
        ));
    }
    for g in &cfg.generate {
        let split = generate_domain(&g.spec, g.n_train, g.n_eval, g.seed)?;
        write_dataset(&split.train, &g.train_dir)?;
        write_dataset(&split.eval, &g.eval_dir)?;
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BaseOutcome {
    pub checkpoint: PathBuf,
    pub final_loss: f64,
    pub reports: Vec<EvalReport>,
}

/// Trains the base transducer on the original domain and evaluates it on
/// every configured eval set.
pub fn train_base(cfg: &HarnessConfig, out: &Path) -> Result<BaseOutcome> {
    let log = AccessLog::new("train");
    let train = load_dataset("original_train", &cfg.data.original_train, &cfg.model, &log)?;
    if train.utts.is_empty() {
        return Err(HarnessError::Data(
            "original-domain training set is empty".into(),
        ));
    }
    let mut model = Model64::new(cfg.model, &SeedTree::new(cfg.seed).child("base-init"))?;
    let b = &cfg.base_train;
    let mut tc = TrainConfig::new(
        TrainMode::Finetune,
        b.steps,
        b.lr,
        b.batch_size,
        SeedTree::new(cfg.seed).child("base-train").seed(),
    );
    tc.warmup_fraction = b.warmup_fraction;
    let step_log = fit(&mut model, &to_examples(&train.utts), &tc)?;

    log.set_phase("evaluate");
    let sets = load_eval_sets(cfg.data.eval_sets(), &cfg.model, &log)?;
    let reports = evaluate_all(&model, &sets, cfg.adapt.max_symbols_per_frame)?;

    let checkpoint = out.join(BASE_CHECKPOINT);
    std::fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    model.save(&checkpoint)?;
    write_text(&out.join("step_log.csv"), &step_log.to_csv())?;
    write_json(&out.join("baseline.json"), &reports)?;
    Ok(BaseOutcome {
        checkpoint,
        final_loss: step_log.final_loss().unwrap_or(f64::NAN),
        reports,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdaptOutcome {
    pub candidate_id: String,
    pub candidate: Candidate,
    pub seed: u64,
    pub trainable_params: usize,
    pub base_params: usize,
    pub before: Vec<EvalReport>,
    pub after: Vec<EvalReport>,
    pub score: CandidateScore,
    pub access_log: Vec<AccessRecord>,
}

fn load_base(path: &Path, cfg: &HarnessConfig) -> Result<Model64> {
    if !path.is_file() {
        return Err(HarnessError::Data(format!(
            "base checkpoint {} not found",
            path.display()
        )));
    }
    let base = Model64::load(path)?;
    if !base.adapters().is_empty() {
        return Err(HarnessError::Config(
            "base checkpoint already carries adapters".into(),
        ));
    }
    if base.config != cfg.model {
        return Err(HarnessError::Config(
            "base checkpoint dimensions differ from the config".into(),
        ));
    }
    Ok(base)
}

/// Adapts the base checkpoint with one candidate on new-domain data, then
/// evaluates base and adapted models on all eval sets.
///
/// The only dataset read before the evaluation phase is the new-domain
/// training set; the access log written to `access_log.json` records this.
pub fn adapt(
    cfg: &HarnessConfig,
    base_path: &Path,
    cand: &Candidate,
    seed: u64,
    out: &Path,
) -> Result<AdaptOutcome> {
    cand.validate()?;
    let log = AccessLog::new("load");
    log.record(base_path);
    let base = load_base(base_path, cfg)?;

    log.set_phase("adapt");
    let train: Dataset = load_dataset("new_train", &cfg.data.new_train, &cfg.model, &log)?;
    if train.utts.is_empty() {
        return Err(HarnessError::Data(
            "new-domain training set is empty".into(),
        ));
    }
    let data = AdaptationSet::from_new_domain(to_examples(&train.utts));
    let (model, step_log): (Model64, StepLog) =
        train_candidate(&base, cand, &cfg.adapt, &data, seed)?;

    log.set_phase("evaluate");
    let sets = load_eval_sets(cfg.data.eval_sets(), &cfg.model, &log)?;
    let max_sym = cfg.adapt.max_symbols_per_frame;
    let before = evaluate_all(&base, &sets, max_sym)?;
    let after = evaluate_all(&model, &sets, max_sym)?;
    let score = score(&before, &after, &cfg.selection_config())?;

    std::fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    model.save(&out.join(MODEL_CHECKPOINT))?;
    write_text(&out.join("step_log.csv"), &step_log.to_csv())?;
    let outcome = AdaptOutcome {
        candidate_id: cand.id(),
        candidate: cand.clone(),
        seed,
        trainable_params: cand.trainable_params(&base, cfg.adapt.init_scale),
        base_params: base.base_param_count(),
        before,
        after,
        score,
        access_log: log.entries(),
    };
    write_json(&out.join("candidate.json"), &outcome.candidate)?;
    write_json(&out.join("access_log.json"), &outcome.access_log)?;
    write_json(&out.join("reports.json"), &outcome)?;
    Ok(outcome)
}

/// Decodes every utterance of each dataset directory with the checkpoint.
/// Writes the reports as JSON to `out` and as CSV next to it.
pub fn evaluate(
    ckpt: &Path,
    dirs: &[PathBuf],
    out: &Path,
    max_symbols_per_frame: usize,
) -> Result<Vec<EvalReport>> {
    if dirs.is_empty() {
        return Err(HarnessError::Config(
            "evaluate needs at least one dataset".into(),
        ));
    }
    if !ckpt.is_file() {
        return Err(HarnessError::Data(format!(
            "checkpoint {} not found",
            ckpt.display()
        )));
    }
    let model = Model64::load(ckpt)?;
    let log = AccessLog::new("evaluate");
    let mut reports = Vec::with_capacity(dirs.len());
    for dir in dirs {
        let id = dir.display().to_string();
        let set = load_dataset(&id, dir, &model.config, &log)?;
        if set.utts.is_empty() {
            return Err(HarnessError::Data(format!(
                "dataset {} is empty",
                dir.display()
            )));
        }
        reports.extend(evaluate_all(
            &model,
            std::slice::from_ref(&set),
            max_symbols_per_frame,
        )?);
    }
    write_json(out, &reports)?;
    write_text(&out.with_extension("csv"), &reports_csv(&reports)?)?;
    Ok(reports)
}

pub fn reports_csv(reports: &[EvalReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "dataset_id",
        "wer",
        "n_words",
        "n_errors",
        "keyword_accuracy",
    ])?;
    for r in reports {
        w.write_record([
            r.dataset_id.clone(),
            format!("{:.6}", r.wer),
            r.n_words.to_string(),
            r.n_errors.to_string(),
            r.keyword_accuracy
                .map(|a| format!("{a:.6}"))
                .unwrap_or_default(),
        ])?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| HarnessError::Data(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
