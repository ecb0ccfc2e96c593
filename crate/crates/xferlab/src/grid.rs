//! Grid expansion, parallel execution, aggregation over trials and the
//! constrained / unconstrained selection.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use xferlab_core::data::{to_examples, AccessLog};
use xferlab_core::metrics::{score, CandidateScore, EvalReport, SelectionConfig};
use xferlab_core::model::adapter::check_param_budget;
use xferlab_core::train::AdaptationSet;
use xferlab_core::{Model64, SeedTree};

use crate::candidate::{train_candidate, Candidate, Method};
use crate::config::{GridSpec, HarnessConfig};
use crate::error::{HarnessError, Result};
use crate::eval::{evaluate_all, load_dataset, load_eval_sets};
use crate::io::{write_json, write_text};

/// Expands the grid axes into cells, in a fixed order.
pub fn expand(grid: &GridSpec) -> Vec<Candidate> {
    let mut cells = Vec::new();
    for &method in &grid.positions {
        if method == Method::Finetune {
            for &steps in &grid.step_counts {
                for &lr in &grid.learning_rates {
                    cells.push(Candidate::finetune(steps, lr));
                }
            }
            continue;
        }
        let hidden = grid
            .hidden_dims
            .get(&method)
            .map(Vec::as_slice)
            .unwrap_or(&[]);
        for &hidden_dim in hidden {
            for &dropout in &grid.dropout_rates {
                for &stochastic_depth in &grid.stochastic_depth_rates {
                    for &steps in &grid.step_counts {
                        for &lr in &grid.learning_rates {
                            cells.push(Candidate {
                                method,
                                hidden_dim,
                                dropout,
                                stochastic_depth,
                                steps,
                                lr,
                            });
                        }
                    }
                }
            }
        }
    }
    cells
}

/// Seed for one trial of one cell, derived from the run seed.
pub fn trial_seed(run_seed: u64, cand: &Candidate, trial: usize) -> u64 {
    SeedTree::new(run_seed)
        .child(&format!("{}#{trial}", cand.id()))
        .seed()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub candidate_id: String,
    pub candidate: Candidate,
    pub trainable_params: usize,
    /// Per-dataset WER averaged over trials.
    pub mean_reports: Vec<EvalReport>,
    /// Per-dataset WER standard deviation over trials.
    pub wer_std: BTreeMap<String, f64>,
    pub trials: usize,
    pub score: CandidateScore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub candidate_id: String,
    pub trial: usize,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetFlag {
    pub candidate_id: String,
    pub fraction: f64,
    pub budget_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub constrained_winner: Option<String>,
    pub unconstrained_winner: Option<String>,
    /// Cells ordered by score, best first.
    pub ranking: Vec<CellSummary>,
    pub failures: Vec<CellFailure>,
    pub over_budget: Vec<BudgetFlag>,
    pub baseline: Vec<EvalReport>,
}

impl SelectionOutcome {
    pub fn cell(&self, id: &str) -> Option<&CellSummary> {
        self.ranking.iter().find(|c| c.candidate_id == id)
    }
}

/// Averages trial reports dataset by dataset.
pub fn aggregate(trials: &[Vec<EvalReport>]) -> Result<(Vec<EvalReport>, BTreeMap<String, f64>)> {
    let first = trials
        .first()
        .ok_or_else(|| HarnessError::Data("no trial reports to aggregate".into()))?;
    let n = trials.len() as f64;
    let mut means = Vec::with_capacity(first.len());
    let mut stds = BTreeMap::new();
    for r in first {
        let wers: Vec<f64> = trials
            .iter()
            .map(|t| {
                t.iter()
                    .find(|x| x.dataset_id == r.dataset_id)
                    .map(|x| x.wer)
                    .ok_or_else(|| {
                        HarnessError::Data(format!("trial lacks dataset {}", r.dataset_id))
                    })
            })
            .collect::<Result<_>>()?;
        let mean = wers.iter().sum::<f64>() / n;
        let var = wers.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n;
        means.push(EvalReport::with_wer(&r.dataset_id, mean));
        stds.insert(r.dataset_id.clone(), var.sqrt());
    }
    Ok((means, stds))
}

pub fn summarize(
    cand: &Candidate,
    trainable_params: usize,
    trials: &[Vec<EvalReport>],
    baseline: &[EvalReport],
    sel: &SelectionConfig,
) -> Result<CellSummary> {
    let (mean_reports, wer_std) = aggregate(trials)?;
    let score = score(baseline, &mean_reports, sel)?;
    Ok(CellSummary {
        candidate_id: cand.id(),
        candidate: cand.clone(),
        trainable_params,
        mean_reports,
        wer_std,
        trials: trials.len(),
        score,
    })
}

fn cheaper(a: &CellSummary, b: &CellSummary) -> Ordering {
    a.trainable_params
        .cmp(&b.trainable_params)
        .then(a.candidate.steps.cmp(&b.candidate.steps))
        .then_with(|| a.candidate_id.cmp(&b.candidate_id))
}

fn by_desc(x: f64, y: f64) -> Ordering {
    y.partial_cmp(&x).unwrap_or(Ordering::Equal)
}

/// Orders cells by score (ties: fewer trainable parameters, then fewer
/// steps) and picks the two winners.
pub fn select(mut cells: Vec<CellSummary>) -> (Vec<CellSummary>, Option<String>, Option<String>) {
    cells.sort_by(|a, b| by_desc(a.score.score, b.score.score).then_with(|| cheaper(a, b)));
    let constrained = cells.first().map(|c| c.candidate_id.clone());
    let unconstrained = cells
        .iter()
        .min_by(|a, b| by_desc(a.score.a_werr, b.score.a_werr).then_with(|| cheaper(a, b)))
        .map(|c| c.candidate_id.clone());
    (cells, constrained, unconstrained)
}

pub const RANKING_HEADER: [&str; 11] = [
    "candidate_id",
    "position",
    "hidden_dim",
    "dropout",
    "stochastic_depth",
    "steps",
    "lr",
    "o_scale",
    "a_werr",
    "score",
    "kappa_violated",
];

pub fn ranking_csv(cells: &[CellSummary]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(RANKING_HEADER)?;
    for c in cells {
        let k = &c.candidate;
        w.write_record([
            c.candidate_id.clone(),
            k.method.to_string(),
            k.hidden_dim.to_string(),
            k.dropout.to_string(),
            k.stochastic_depth.to_string(),
            k.steps.to_string(),
            k.lr.to_string(),
            format!("{:.6}", c.score.o_scale),
            format!("{:.6}", c.score.a_werr),
            format!("{:.6}", c.score.score),
            c.score.kappa_violated.to_string(),
        ])?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| HarnessError::Data(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

struct TrialResult {
    index: usize,
    trial: usize,
    outcome: Result<Vec<EvalReport>>,
}

/// Runs every cell of the grid against the configured base checkpoint and
/// writes `ranking.csv`, `selection.json`, `baseline.json` and per-cell
/// trial reports under `out`.
pub fn run_grid(cfg: &HarnessConfig, jobs: usize, out: &Path) -> Result<SelectionOutcome> {
    if jobs == 0 {
        return Err(HarnessError::Config("--jobs must be at least 1".into()));
    }
    let ckpt = cfg
        .base_checkpoint
        .as_ref()
        .ok_or_else(|| HarnessError::Config("grid needs base_checkpoint in the config".into()))?;
    if !ckpt.is_file() {
        return Err(HarnessError::Data(format!(
            "base checkpoint {} not found",
            ckpt.display()
        )));
    }
    let base = Model64::load(ckpt)?;
    if base.config != cfg.model {
        return Err(HarnessError::Config(
            "base checkpoint dimensions differ from the config".into(),
        ));
    }
    fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;

    let log = AccessLog::new("adapt");
    let train = load_dataset("new_train", &cfg.data.new_train, &cfg.model, &log)?;
    if train.utts.is_empty() {
        return Err(HarnessError::Data(
            "new-domain training set is empty".into(),
        ));
    }
    let data = AdaptationSet::from_new_domain(to_examples(&train.utts));
    log.set_phase("evaluate");
    let eval_sets = load_eval_sets(cfg.data.eval_sets(), &cfg.model, &log)?;
    let max_sym = cfg.adapt.max_symbols_per_frame;
    let baseline = evaluate_all(&base, &eval_sets, max_sym)?;

    let mut cells = Vec::new();
    let mut over_budget = Vec::new();
    for cand in expand(&cfg.grid) {
        cand.validate()?;
        if let Some(spec) = cand.adapter_spec(cfg.adapt.init_scale) {
            let check = check_param_budget(&base, &spec, cfg.selection.budget_fraction)?;
            if !check.compliant {
                over_budget.push(BudgetFlag {
                    candidate_id: cand.id(),
                    fraction: check.fraction,
                    budget_fraction: cfg.selection.budget_fraction,
                });
                continue;
            }
        }
        cells.push(cand);
    }

    let work: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|i| (0..cfg.grid.trials).map(move |t| (i, t)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
    let results: Vec<TrialResult> = pool.install(|| {
        work.par_iter()
            .map(|&(index, trial)| {
                let cand = &cells[index];
                let outcome = (|| {
                    let seed = trial_seed(cfg.seed, cand, trial);
                    let (model, step_log) = train_candidate(&base, cand, &cfg.adapt, &data, seed)?;
                    let reports = evaluate_all(&model, &eval_sets, max_sym)?;
                    let dir = out.join("cells").join(cand.id());
                    fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
                    write_text(
                        &dir.join(format!("trial{trial}.steps.csv")),
                        &step_log.to_csv(),
                    )?;
                    write_json(&dir.join(format!("trial{trial}.reports.json")), &reports)?;
                    Ok(reports)
                })();
                TrialResult {
                    index,
                    trial,
                    outcome,
                }
            })
            .collect()
    });

    let sel = cfg.selection_config();
    let mut per_cell: Vec<Vec<Vec<EvalReport>>> = vec![Vec::new(); cells.len()];
    let mut failed = vec![false; cells.len()];
    let mut failures = Vec::new();
    for r in results {
        match r.outcome {
            Ok(reports) => per_cell[r.index].push(reports),
            Err(e) => {
                failed[r.index] = true;
                failures.push(CellFailure {
                    candidate_id: cells[r.index].id(),
                    trial: r.trial,
                    error: e.to_string(),
                });
            }
        }
    }
    let mut summaries = Vec::new();
    for (i, cand) in cells.iter().enumerate() {
        if failed[i] {
            continue;
        }
        let params = cand.trainable_params(&base, cfg.adapt.init_scale);
        summaries.push(summarize(cand, params, &per_cell[i], &baseline, &sel)?);
    }
    let (ranking, constrained_winner, unconstrained_winner) = select(summaries);
    let outcome = SelectionOutcome {
        constrained_winner,
        unconstrained_winner,
        ranking,
        failures,
        over_budget,
        baseline,
    };
    write_text(&out.join("ranking.csv"), &ranking_csv(&outcome.ranking)?)?;
    write_json(&out.join("selection.json"), &outcome)?;
    write_json(&out.join("baseline.json"), &outcome.baseline)?;
    write_json(&out.join("access_log.json"), &log.entries())?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> GridSpec {
        let mut hidden = BTreeMap::new();
        hidden.insert(Method::Encoder, vec![2, 4]);
        hidden.insert(Method::Joint, vec![8]);
        GridSpec {
            positions: vec![Method::Finetune, Method::Encoder, Method::Joint],
            hidden_dims: hidden,
            dropout_rates: vec![0.0, 0.1],
            stochastic_depth_rates: vec![0.1],
            step_counts: vec![10, 20],
            learning_rates: vec![1e-3],
            trials: 2,
        }
    }

    #[test]
    fn expansion_counts() {
        let cells = expand(&grid());
        // finetune 2, encoder 2*2*1*2*1 = 8, joint 1*2*1*2*1 = 4
        assert_eq!(cells.len(), 14);
        let mut ids: Vec<String> = cells.iter().map(Candidate::id).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 14);
    }

    #[test]
    fn trial_seeds_differ() {
        let c = Candidate::finetune(10, 1e-3);
        assert_ne!(trial_seed(1, &c, 0), trial_seed(1, &c, 1));
        assert_ne!(trial_seed(1, &c, 0), trial_seed(2, &c, 0));
        assert_eq!(trial_seed(1, &c, 0), trial_seed(1, &c, 0));
    }

    #[test]
    fn aggregation_means_and_stds() {
        let trials = vec![
            vec![
                EvalReport::with_wer("a", 2.0),
                EvalReport::with_wer("b", 10.0),
            ],
            vec![
                EvalReport::with_wer("a", 4.0),
                EvalReport::with_wer("b", 10.0),
            ],
        ];
        let (m, s) = aggregate(&trials).unwrap();
        assert_eq!(m[0].wer, 3.0);
        assert_eq!(s["a"], 1.0);
        assert_eq!(s["b"], 0.0);
    }
}
