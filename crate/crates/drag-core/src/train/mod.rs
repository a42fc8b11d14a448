//! Fitting, model selection, and the repetition protocol.
//!
//! A single fit ([`train_model`]) runs full-graph forward passes with the
//! objective restricted to shuffled mini-batches of training nodes, validates
//! once per epoch on F1-macro, and keeps the best-epoch parameters.
//! [`grid_search`] ranks hyperparameter configurations by that validation
//! score, [`run_protocol`] repeats the winning configuration over fresh
//! splits and aggregates test metrics, and [`run_ablations`] does the same
//! for every model variant with shared split seeds so the comparison is
//! apples to apples.
//!
//! Everything downstream of a seed is deterministic for a fixed thread
//! count; reports carry no wall-clock fields so reruns serialize to the
//! same bytes.

mod adam;

pub use adam::Adam;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::{DiffError, Matrix, Tape};
use crate::graph::{split_labels, GraphError, MultiRelationGraph, SplitMasks};
use crate::metrics::{evaluate, f1_macro, EvalResult, MetricsError};
use crate::model::{
    forward, predict, prepare_graph, training_loss, AblationMode, DragParams, HyperParams,
    ModelError,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("training diverged at epoch {epoch}: {what}")]
    Diverged { epoch: usize, what: String },
    #[error("the hyperparameter grid is empty")]
    EmptyGrid,
}

/// Tells optimizer blow-ups apart from structural mistakes: a non-finite
/// tensor mid-training means the parameters left the representable range.
fn as_diverged(e: ModelError, epoch: usize) -> TrainError {
    match e {
        ModelError::Diff(DiffError::NonFinite { op }) => {
            TrainError::Diverged { epoch, what: format!("non-finite value in {op}") }
        }
        other => other.into(),
    }
}

/// One fitted model plus where its early stopping landed.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch, not the last one.
    pub params: DragParams,
    /// 1-based epoch that produced `best_val_f1`; ties keep the earliest.
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub best_val_f1: f64,
    pub seconds: f64,
}

/// Fits one model on `masks.train`, early-stopping on validation F1-macro.
///
/// `seed` drives both the parameter draw and the per-epoch batch shuffle.
/// Stops after `hyper.patience` epochs without a strict improvement, so a
/// plateau counts as stale and equal scores keep the earlier epoch.
pub fn train_model(
    graph: &MultiRelationGraph,
    masks: &SplitMasks,
    hyper: &HyperParams,
    mode: AblationMode,
    seed: u64,
) -> Result<TrainOutcome, TrainError> {
    hyper.validate()?;
    if masks.train.is_empty() || masks.val.is_empty() {
        return Err(ModelError::BadConfig { what: "empty train or validation split".into() }.into());
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params =
        DragParams::init(graph.num_features(), graph.num_relations(), hyper, mode, &mut rng)?;
    let mut adam = Adam::new(hyper.learning_rate);

    let val_labels: Vec<u8> = masks.val.iter().map(|&i| graph.labels()[i]).collect();
    let mut order = masks.train.clone();

    let mut best_val_f1 = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut best_params = params.clone();
    let mut stale = 0;
    let mut epochs_run = 0;

    for epoch in 1..=hyper.max_epochs {
        epochs_run = epoch;
        order.shuffle(&mut rng);
        for batch in order.chunks(hyper.batch_size) {
            step(&mut params, &mut adam, graph, hyper, mode, batch, epoch)?;
        }
        let probs = predict(&params, graph, hyper, mode).map_err(|e| as_diverged(e, epoch))?;
        let val_scores: Vec<f64> = masks.val.iter().map(|&i| probs[i]).collect();
        let val_f1 = f1_macro(&val_scores, &val_labels, hyper.threshold);
        log::debug!("epoch {epoch}: validation F1-macro {val_f1:.4}");
        if val_f1 > best_val_f1 {
            best_val_f1 = val_f1;
            best_epoch = epoch;
            best_params = params.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= hyper.patience {
                log::debug!("no improvement for {stale} epochs, stopping at epoch {epoch}");
                break;
            }
        }
    }
    log::info!(
        "trained {epochs_run} epochs, best validation F1-macro {best_val_f1:.4} at epoch {best_epoch}"
    );
    Ok(TrainOutcome {
        params: best_params,
        best_epoch,
        epochs_run,
        best_val_f1,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// One optimizer update from one batch: fresh tape, forward over the whole
/// graph, loss on the batch, backward, Adam.
fn step(
    params: &mut DragParams,
    adam: &mut Adam,
    graph: &MultiRelationGraph,
    hyper: &HyperParams,
    mode: AblationMode,
    batch: &[usize],
    epoch: usize,
) -> Result<(), TrainError> {
    let mut tape = Tape::new();
    let ids = params.bind(&mut tape, true);
    let state =
        forward(&mut tape, &ids, graph, hyper, mode, false).map_err(|e| as_diverged(e, epoch))?;
    let loss = training_loss(&mut tape, &ids, state.output, graph.labels(), batch, hyper)
        .map_err(|e| as_diverged(e, epoch))?;
    tape.backward(loss).map_err(|e| as_diverged(ModelError::Diff(e), epoch))?;

    let mut grads: Vec<Matrix> = Vec::with_capacity(params.num_tensors());
    ids.visit(&mut |id| grads.push(tape.grad(id).expect("bound parameter gradient").clone()));
    adam.step(params, &grads);
    Ok(())
}

/// Axes of the model-selection grid. Selection order is lexicographic in
/// field declaration order (learning rate varies slowest, heads fastest) and
/// score ties keep the earlier configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub learning_rates: Vec<f64>,
    pub weight_decays: Vec<f64>,
    pub layer_counts: Vec<usize>,
    pub head_counts: Vec<usize>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            learning_rates: vec![0.01, 0.001],
            weight_decays: vec![0.001, 0.0001],
            layer_counts: vec![1, 2, 3],
            head_counts: vec![2, 8],
        }
    }
}

impl GridSpec {
    /// Materializes every configuration, inheriting unsearched fields from
    /// `base`. The single-layer variant pins depth, so its grid keeps one
    /// depth entry instead of rerunning identical models.
    pub fn configs(&self, base: &HyperParams, mode: AblationMode) -> Vec<HyperParams> {
        let layer_counts: &[usize] =
            if mode == AblationMode::SingleLayer { &[1] } else { &self.layer_counts };
        let mut out = Vec::new();
        for &learning_rate in &self.learning_rates {
            for &weight_decay in &self.weight_decays {
                for &layers in layer_counts {
                    for &heads in &self.head_counts {
                        out.push(HyperParams {
                            learning_rate,
                            weight_decay,
                            layers,
                            heads,
                            ..base.clone()
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridTrial {
    pub hyper: HyperParams,
    pub val_f1: f64,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridOutcome {
    pub best: HyperParams,
    pub best_val_f1: f64,
    /// Every trial in grid order, for the record.
    pub trials: Vec<GridTrial>,
}

/// Trains every grid configuration on the same split and seed and picks the
/// best validation F1-macro. Trials run in parallel under the `parallel`
/// feature; results are reduced in grid order either way, so the winner does
/// not depend on scheduling.
pub fn grid_search(
    graph: &MultiRelationGraph,
    masks: &SplitMasks,
    base: &HyperParams,
    spec: &GridSpec,
    mode: AblationMode,
    seed: u64,
) -> Result<GridOutcome, TrainError> {
    let configs = spec.configs(base, mode);
    if configs.is_empty() {
        return Err(TrainError::EmptyGrid);
    }
    log::info!("grid search over {} configurations", configs.len());
    let trial = |hyper: &HyperParams| -> Result<GridTrial, TrainError> {
        let outcome = train_model(graph, masks, hyper, mode, seed)?;
        log::info!(
            "grid: lr {} wd {} layers {} heads {} -> val F1-macro {:.4}",
            hyper.learning_rate,
            hyper.weight_decay,
            hyper.layers,
            hyper.heads,
            outcome.best_val_f1
        );
        Ok(GridTrial {
            hyper: hyper.clone(),
            val_f1: outcome.best_val_f1,
            best_epoch: outcome.best_epoch,
        })
    };
    #[cfg(feature = "parallel")]
    let trials: Result<Vec<GridTrial>, TrainError> = {
        use rayon::prelude::*;
        configs.par_iter().map(trial).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let trials: Result<Vec<GridTrial>, TrainError> = configs.iter().map(trial).collect();
    let trials = trials?;

    let mut best = 0;
    for (i, t) in trials.iter().enumerate() {
        if t.val_f1 > trials[best].val_f1 {
            best = i;
        }
    }
    Ok(GridOutcome {
        best: trials[best].hyper.clone(),
        best_val_f1: trials[best].val_f1,
        trials,
    })
}

/// Full experiment description: which variant, how much supervision, how
/// many repetitions, and whether to grid-search first.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Protocol {
    /// Percentage of nodes whose labels the trainer may see.
    pub train_percent: f64,
    pub reps: usize,
    /// Repetition `r` uses `seed + r` for its split and its fit; the grid
    /// search, when present, runs once on the `seed` split.
    pub seed: u64,
    pub mode: AblationMode,
    pub hyper: HyperParams,
    #[serde(default)]
    pub grid: Option<GridSpec>,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            train_percent: 40.0,
            reps: 10,
            seed: 0,
            mode: AblationMode::Full,
            hyper: HyperParams::default(),
            grid: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RepResult {
    pub seed: u64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub val_f1_macro: f64,
    pub test: EvalResult,
}

/// Mean and population standard deviation over repetitions.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
}

impl Aggregate {
    fn over(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let variance = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { mean, std: variance.sqrt() }
    }
}

/// Everything worth writing down about one protocol run. Deliberately free
/// of timing so identical runs produce identical serialized reports.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: AblationMode,
    pub train_percent: f64,
    pub base_seed: u64,
    pub removed_duplicate_nodes: usize,
    /// Configuration the repetitions actually used (the grid winner when a
    /// grid was given, the requested one otherwise).
    pub selected: HyperParams,
    pub grid_trials: Option<Vec<GridTrial>>,
    pub per_rep: Vec<RepResult>,
    pub f1_macro: Aggregate,
    pub auc: Aggregate,
}

/// A [`RunReport`] plus the artifacts that stay out of it: the parameters
/// of the repetition with the best validation score, and wall-clock time.
#[derive(Clone, Debug)]
pub struct ProtocolRun {
    pub report: RunReport,
    pub best_params: DragParams,
    /// Index into `report.per_rep` of the kept parameters.
    pub best_rep: usize,
    pub seconds: f64,
}

fn pick<T: Copy>(values: &[T], ids: &[usize]) -> Vec<T> {
    ids.iter().map(|&i| values[i]).collect()
}

/// Preprocessing every command shares: drop duplicate-feature nodes, add
/// self-loops, apply the variant's structural change. Returns the graph the
/// model actually sees plus how many nodes were dropped. Node ids compact
/// after the drop, so splits and metrics must use the returned graph.
pub fn prepare_pipeline(raw: &MultiRelationGraph, mode: AblationMode) -> (MultiRelationGraph, usize) {
    let mut graph = raw.clone();
    let removed = graph.deduplicate_nodes();
    if !removed.is_empty() {
        log::info!("removed {} nodes with duplicate features", removed.len());
    }
    graph.add_self_loops();
    (prepare_graph(&graph, mode), removed.len())
}

/// Runs the whole pipeline on a raw graph: [`prepare_pipeline`], optionally
/// grid-search, then repeat train/evaluate over `reps` fresh splits.
pub fn run_protocol(raw: &MultiRelationGraph, proto: &Protocol) -> Result<ProtocolRun, TrainError> {
    proto.hyper.validate()?;
    if proto.reps == 0 {
        return Err(ModelError::BadConfig { what: "reps is zero".into() }.into());
    }
    let started = Instant::now();

    let (graph, removed) = prepare_pipeline(raw, proto.mode);

    let (selected, grid_trials) = match &proto.grid {
        Some(spec) => {
            let masks = split_labels(graph.labels(), proto.train_percent, proto.seed)?;
            let outcome = grid_search(&graph, &masks, &proto.hyper, spec, proto.mode, proto.seed)?;
            log::info!(
                "selected lr {} wd {} layers {} heads {} (val F1-macro {:.4})",
                outcome.best.learning_rate,
                outcome.best.weight_decay,
                outcome.best.layers,
                outcome.best.heads,
                outcome.best_val_f1
            );
            (outcome.best, Some(outcome.trials))
        }
        None => (proto.hyper.clone(), None),
    };

    let mut per_rep = Vec::with_capacity(proto.reps);
    let mut fitted = Vec::with_capacity(proto.reps);
    for r in 0..proto.reps {
        let rep_seed = proto.seed.wrapping_add(r as u64);
        let masks = split_labels(graph.labels(), proto.train_percent, rep_seed)?;
        let outcome = train_model(&graph, &masks, &selected, proto.mode, rep_seed)?;
        let probs = predict(&outcome.params, &graph, &selected, proto.mode)?;
        let test = evaluate(
            &pick(&probs, &masks.test),
            &pick(graph.labels(), &masks.test),
            selected.threshold,
        )?;
        log::info!(
            "rep {}/{}: test F1-macro {:.4}, AUC {:.4}",
            r + 1,
            proto.reps,
            test.f1_macro,
            test.auc
        );
        per_rep.push(RepResult {
            seed: rep_seed,
            best_epoch: outcome.best_epoch,
            epochs_run: outcome.epochs_run,
            val_f1_macro: outcome.best_val_f1,
            test,
        });
        fitted.push(outcome.params);
    }

    let mut best_rep = 0;
    for (i, rep) in per_rep.iter().enumerate() {
        if rep.val_f1_macro > per_rep[best_rep].val_f1_macro {
            best_rep = i;
        }
    }
    let f1s: Vec<f64> = per_rep.iter().map(|r| r.test.f1_macro).collect();
    let aucs: Vec<f64> = per_rep.iter().map(|r| r.test.auc).collect();
    let report = RunReport {
        mode: proto.mode,
        train_percent: proto.train_percent,
        base_seed: proto.seed,
        removed_duplicate_nodes: removed,
        selected,
        grid_trials,
        per_rep,
        f1_macro: Aggregate::over(&f1s),
        auc: Aggregate::over(&aucs),
    };
    Ok(ProtocolRun {
        report,
        best_params: fitted.swap_remove(best_rep),
        best_rep,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// [`run_protocol`] for every variant with the same base seed, so each
/// variant sees the same sequence of splits and the comparison isolates the
/// architectural change.
pub fn run_ablations(
    raw: &MultiRelationGraph,
    proto: &Protocol,
) -> Result<Vec<ProtocolRun>, TrainError> {
    AblationMode::all()
        .iter()
        .map(|&mode| {
            log::info!("ablation variant: {mode}");
            run_protocol(raw, &Protocol { mode, ..proto.clone() })
        })
        .collect()
}
