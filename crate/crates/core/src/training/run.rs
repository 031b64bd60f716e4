//! The optimization loop and split evaluation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Split, WindowedDataset};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, CorrelationBundle, MsgcModel};
use crate::tensor::{adam_step, AdamConfig, AdamState, Array, Tape};
use crate::training::{
    masked_mae, EpochRecord, MetricsAccumulator, MetricsReport, Normalizer, SamplingSchedule,
};

/// Distinct ChaCha stream for the training loop so its draws never alias the
/// parameter-init stream.
const TRAIN_STREAM: u64 = 0x7EA1;

/// Complete optimizer-loop state. Saving it at an epoch boundary and
/// resuming reproduces the uninterrupted run bit for bit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub iteration: u64,
    pub lr: f64,
    pub best_val: f64,
    pub epochs_since_improve: usize,
    pub rng_word_pos: u128,
    pub adam: AdamState,
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub best_params: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub state: TrainState,
    pub history: Vec<EpochRecord>,
}

fn snapshot(model: &MsgcModel) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    model
        .store()
        .names()
        .iter()
        .zip(model.store().values())
        .map(|(n, v)| (n.clone(), v.shape().to_vec(), v.data().to_vec()))
        .collect()
}

fn load_snapshot(model: &mut MsgcModel, snap: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
    let entries: Vec<(String, Array)> = snap
        .iter()
        .map(|(n, s, v)| Ok((n.clone(), Array::new(s.clone(), v.clone())?)))
        .collect::<Result<_>>()?;
    model.store_mut().load(&entries)
}

/// Mini-batch Adam with scheduled sampling. The learning rate halves after
/// `patience` epochs without validation improvement and training stops after
/// `stall`; the best-validation parameters are captured for the checkpoint
/// while the model keeps its last state.
pub fn train(
    model: &mut MsgcModel,
    ds: &WindowedDataset,
    bundle: &CorrelationBundle,
    normalizer: &Normalizer,
    travel_time: &Array,
    resume: Option<TrainState>,
    mut progress: Option<&mut dyn FnMut(&EpochRecord)>,
) -> Result<TrainOutcome> {
    let cfg = model.config().clone();
    let train_idx = ds.indices(Split::Train);
    let val_idx = ds.indices(Split::Val);
    if train_idx.is_empty() {
        return Err(Error::Training("no training windows".into()));
    }
    let schedule = SamplingSchedule { tau: cfg.tau };
    let adam_cfg = AdamConfig::default();
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    rng.set_stream(TRAIN_STREAM);

    let mut state = match resume {
        Some(st) => {
            load_snapshot(model, &st.params)?;
            rng.set_word_pos(st.rng_word_pos);
            st
        }
        None => TrainState {
            epoch: 0,
            iteration: 0,
            lr: cfg.learning_rate,
            best_val: f64::INFINITY,
            epochs_since_improve: 0,
            rng_word_pos: 0,
            adam: AdamState::new(&model.store().sizes()),
            params: snapshot(model),
            best_params: snapshot(model),
            history: Vec::new(),
        },
    };

    while state.epoch < cfg.max_epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        let mut abs_total = 0.0;
        let mut count_total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let eps = schedule.probability(state.iteration);
            let tape = Tape::new();
            let bound = model.bind(&tape);
            let mut preds = Vec::new();
            let mut targets = Vec::new();
            let mut masks = Vec::new();
            let mut batch_count = 0.0;
            for &w in batch {
                let window = ds.materialize(w, normalizer)?;
                let teacher: Vec<bool> = (0..cfg.output_steps.saturating_sub(1))
                    .map(|_| rng.random_bool(eps))
                    .collect();
                let out = model.forward(&tape, &bound, &window, bundle, Some(&teacher), false)?;
                for q in 0..cfg.output_steps {
                    batch_count += window.y_mask[q].sum();
                    preds.push(out.preds[q]);
                    targets.push(tape.leaf(window.y[q].clone()));
                    masks.push(tape.leaf(window.y_mask[q].clone()));
                }
            }
            let loss = masked_mae(&preds, &targets, &masks)?;
            let loss_value = loss.value().data()[0];
            if !loss_value.is_finite() {
                let norms: Vec<String> = model
                    .store()
                    .names()
                    .iter()
                    .zip(model.store().values())
                    .map(|(n, v)| {
                        let norm = v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
                        format!("{n}={norm:.3e}")
                    })
                    .collect();
                return Err(Error::Training(format!(
                    "non-finite loss {loss_value} at epoch {} iteration {}; parameter norms: {}",
                    state.epoch + 1,
                    state.iteration,
                    norms.join(", ")
                )));
            }
            abs_total += loss_value * batch_count;
            count_total += batch_count;

            loss.backward()?;
            let grads = bound.grads();
            let names = model.store().names().to_vec();
            adam_step(
                model.store_mut().values_mut(),
                &grads,
                &names,
                &mut state.adam,
                state.lr,
                &adam_cfg,
            )?;
            state.iteration += 1;
        }

        let train_loss = abs_total / count_total;
        let val_loss = if val_idx.is_empty() {
            train_loss
        } else {
            split_loss(model, ds, bundle, normalizer, Split::Val)?
        };
        state.epoch += 1;
        let record = EpochRecord {
            epoch: state.epoch,
            train_loss,
            val_loss,
            epsilon: schedule.probability(state.iteration),
            lr: state.lr,
        };
        if let Some(cb) = progress.as_deref_mut() {
            cb(&record);
        }
        state.history.push(record);

        if val_loss < state.best_val {
            state.best_val = val_loss;
            state.epochs_since_improve = 0;
            state.best_params = snapshot(model);
        } else {
            state.epochs_since_improve += 1;
            if state.epochs_since_improve % cfg.patience == 0 {
                state.lr *= 0.5;
            }
            if state.epochs_since_improve >= cfg.stall {
                break;
            }
        }
    }

    state.params = snapshot(model);
    state.rng_word_pos = rng.get_word_pos();

    let mut best_model = MsgcModel::new(cfg)?;
    load_snapshot(&mut best_model, &state.best_params)?;
    let checkpoint = Checkpoint::capture(&best_model, normalizer, bundle, travel_time);
    Ok(TrainOutcome {
        checkpoint,
        history: state.history.clone(),
        state,
    })
}

/// Masked MAE of a split in normalized space, evaluation mode.
pub fn split_loss(
    model: &MsgcModel,
    ds: &WindowedDataset,
    bundle: &CorrelationBundle,
    normalizer: &Normalizer,
    split: Split,
) -> Result<f64> {
    let idx = ds.indices(split);
    if idx.is_empty() {
        return Err(Error::Training(format!("no windows in split {split:?}")));
    }
    let mut abs_total = 0.0;
    let mut count_total = 0.0;
    for chunk in idx.chunks(model.config().batch_size.max(1)) {
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let mut preds = Vec::new();
        let mut targets = Vec::new();
        let mut masks = Vec::new();
        let mut count = 0.0;
        for &w in chunk {
            let window = ds.materialize(w, normalizer)?;
            let out = model.forward(&tape, &bound, &window, bundle, None, false)?;
            for q in 0..model.config().output_steps {
                count += window.y_mask[q].sum();
                preds.push(out.preds[q]);
                targets.push(tape.leaf(window.y[q].clone()));
                masks.push(tape.leaf(window.y_mask[q].clone()));
            }
        }
        let loss = masked_mae(&preds, &targets, &masks)?;
        abs_total += loss.value().data()[0] * count;
        count_total += count;
    }
    if count_total <= 0.0 {
        return Err(Error::Loss("no observed entries in split".into()));
    }
    Ok(abs_total / count_total)
}

/// One prediction/truth cell of the evaluation output, de-normalized.
#[derive(Debug, Clone)]
pub struct PredictionRow {
    /// Timestamp of the predicted row.
    pub timestamp: i64,
    /// Start row of the source window.
    pub window_start: usize,
    /// 1-based output step.
    pub horizon: usize,
    pub node_id: String,
    pub feature: usize,
    pub predicted: f64,
    pub truth: f64,
    pub observed: bool,
}

#[derive(Debug)]
pub struct EvalOutput {
    pub report: MetricsReport,
    pub rows: Vec<PredictionRow>,
}

/// Prediction rows for one split, de-normalized, in window order.
pub fn predictions(
    model: &MsgcModel,
    ds: &WindowedDataset,
    bundle: &CorrelationBundle,
    normalizer: &Normalizer,
    split: Split,
) -> Result<Vec<PredictionRow>> {
    let idx = ds.indices(split);
    let cfg = model.config();
    let table = &ds.table;
    let mut rows = Vec::new();
    for chunk in idx.chunks(cfg.batch_size.max(1)) {
        let tape = Tape::new();
        let bound = model.bind(&tape);
        for &w in chunk {
            let window = ds.materialize(w, normalizer)?;
            let out = model.forward(&tape, &bound, &window, bundle, None, false)?;
            for q in 0..cfg.output_steps {
                let pred = out.preds[q].value();
                let row_idx = window.start + cfg.input_steps + q;
                for node in 0..table.n_nodes() {
                    for f in 0..cfg.f_output {
                        rows.push(PredictionRow {
                            timestamp: table.timestamp(row_idx),
                            window_start: window.start,
                            horizon: q + 1,
                            node_id: table.node_ids()[node].clone(),
                            feature: f,
                            predicted: normalizer.inverse(pred.at(node, f), f),
                            truth: table.value(row_idx, node, f),
                            observed: window.y_mask[q].at(node, f) != 0.0,
                        });
                    }
                }
            }
        }
    }
    Ok(rows)
}

/// Overall and per-step metrics over the observed cells of prediction rows.
pub fn metrics_from_rows(rows: &[PredictionRow], output_steps: usize) -> Result<MetricsReport> {
    let mut overall = MetricsAccumulator::default();
    let mut per_step = vec![MetricsAccumulator::default(); output_steps];
    for r in rows.iter().filter(|r| r.observed) {
        overall.add(r.predicted, r.truth);
        per_step[r.horizon - 1].add(r.predicted, r.truth);
    }
    Ok(MetricsReport {
        overall: overall.finish()?,
        per_step: per_step
            .iter()
            .map(MetricsAccumulator::finish)
            .collect::<Result<_>>()?,
    })
}

/// Full-split evaluation: de-normalized MAE/RMSE/MAPE overall and per output
/// step, plus every prediction cell for the emitted CSV.
pub fn evaluate(
    model: &MsgcModel,
    ds: &WindowedDataset,
    bundle: &CorrelationBundle,
    normalizer: &Normalizer,
    split: Split,
) -> Result<EvalOutput> {
    let idx = ds.indices(split);
    if idx.is_empty() {
        return Err(Error::Training(format!("no windows in split {split:?}")));
    }
    let rows = predictions(model, ds, bundle, normalizer, split)?;
    let report = metrics_from_rows(&rows, model.config().output_steps)?;
    Ok(EvalOutput { report, rows })
}
