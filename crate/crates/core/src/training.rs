//! Normalization, masked loss, the scheduled-sampling decay, evaluation
//! metrics, the historical-average baseline, and the optimization loop.

use serde::{Deserialize, Serialize};

use crate::data::{Split, WindowedDataset};
use crate::error::{Error, Result};
use crate::tensor::{Array, Tensor};

mod run;
pub use run::{
    evaluate, metrics_from_rows, predictions, split_loss, train, EvalOutput, PredictionRow,
    TrainOutcome, TrainState,
};

/// Per-feature z-score transform fit on the training split only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Normalizer {
    /// No-op transform, used where raw values are wanted.
    pub fn identity(features: usize) -> Self {
        Self {
            mean: vec![0.0; features],
            std: vec![1.0; features],
        }
    }

    /// Population mean/std over observed cells per feature. Constant
    /// features keep std = 1 so the transform stays invertible.
    pub fn fit(values: &[f64], mask: &[bool], n_nodes: usize, f_input: usize) -> Self {
        let mut mean = vec![0.0; f_input];
        let mut std = vec![1.0; f_input];
        let rows = values.len() / (n_nodes * f_input);
        for f in 0..f_input {
            let mut sum = 0.0;
            let mut cnt = 0usize;
            for t in 0..rows {
                for node in 0..n_nodes {
                    let cell = (t * n_nodes + node) * f_input + f;
                    if mask[cell] {
                        sum += values[cell];
                        cnt += 1;
                    }
                }
            }
            if cnt == 0 {
                continue;
            }
            let m = sum / cnt as f64;
            let mut var = 0.0;
            for t in 0..rows {
                for node in 0..n_nodes {
                    let cell = (t * n_nodes + node) * f_input + f;
                    if mask[cell] {
                        let d = values[cell] - m;
                        var += d * d;
                    }
                }
            }
            let s = (var / cnt as f64).sqrt();
            mean[f] = m;
            // guard against effectively-constant features whose computed
            // std is pure rounding noise
            std[f] = if s > 1e-12 * m.abs().max(1.0) { s } else { 1.0 };
        }
        Self { mean, std }
    }

    pub fn apply(&self, v: f64, feature: usize) -> f64 {
        (v - self.mean[feature]) / self.std[feature]
    }

    pub fn inverse(&self, v: f64, feature: usize) -> f64 {
        v * self.std[feature] + self.mean[feature]
    }
}

/// Masked mean absolute error over one or more (prediction, target, mask)
/// triples, computed in normalized space on the tape.
pub fn masked_mae<'t>(
    preds: &[Tensor<'t>],
    targets: &[Tensor<'t>],
    masks: &[Tensor<'t>],
) -> Result<Tensor<'t>> {
    if preds.is_empty() || preds.len() != targets.len() || preds.len() != masks.len() {
        return Err(Error::Contract("masked_mae: mismatched triple counts".into()));
    }
    let mut count = 0.0;
    let mut total: Option<Tensor<'t>> = None;
    for ((&p, &y), &m) in preds.iter().zip(targets).zip(masks) {
        count += m.value().sum();
        let term = p.sub(y)?.abs().mul(m)?.sum();
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    if count <= 0.0 {
        return Err(Error::Loss("no observed entries under the mask".into()));
    }
    Ok(total.expect("at least one triple").scale(1.0 / count))
}

/// Scheduled-sampling decay: the probability of feeding ground truth at
/// iteration `i` is `tau / (tau + exp(i / tau))`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SamplingSchedule {
    pub tau: f64,
}

impl SamplingSchedule {
    pub fn probability(&self, iteration: u64) -> f64 {
        self.tau / (self.tau + (iteration as f64 / self.tau).exp())
    }
}

/// MAE / RMSE / MAPE over de-normalized values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
}

/// Streaming accumulator so overall and per-step metrics share one pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct MetricsAccumulator {
    abs: f64,
    sq: f64,
    ape: f64,
    count: u64,
    mape_count: u64,
}

impl MetricsAccumulator {
    pub fn add(&mut self, pred: f64, truth: f64) {
        let e = pred - truth;
        self.abs += e.abs();
        self.sq += e * e;
        self.count += 1;
        if truth.abs() > 1e-6 {
            self.ape += (e / truth).abs();
            self.mape_count += 1;
        }
    }

    pub fn merge(&mut self, other: &MetricsAccumulator) {
        self.abs += other.abs;
        self.sq += other.sq;
        self.ape += other.ape;
        self.count += other.count;
        self.mape_count += other.mape_count;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn finish(&self) -> Result<Metrics> {
        if self.count == 0 {
            return Err(Error::Metric("no observed entries".into()));
        }
        if self.mape_count == 0 {
            return Err(Error::Metric(
                "MAPE undefined: every ground-truth entry is zero".into(),
            ));
        }
        Ok(Metrics {
            mae: self.abs / self.count as f64,
            rmse: (self.sq / self.count as f64).sqrt(),
            mape: self.ape / self.mape_count as f64 * 100.0,
        })
    }
}

/// Metrics for one masked prediction/truth pair.
pub fn compute_metrics(pred: &Array, truth: &Array, mask: &Array) -> Result<Metrics> {
    if pred.shape() != truth.shape() || pred.shape() != mask.shape() {
        return Err(Error::dimension("metrics", pred.shape(), truth.shape()));
    }
    let mut acc = MetricsAccumulator::default();
    for ((&p, &t), &m) in pred.data().iter().zip(truth.data()).zip(mask.data()) {
        if m != 0.0 {
            acc.add(p, t);
        }
    }
    acc.finish()
}

/// Overall plus per-output-step metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall: Metrics,
    pub per_step: Vec<Metrics>,
}

/// Historical average: each node's mean at the same weekly slot over the
/// training split, with the node's overall mean as the fallback for unseen
/// slots. Predictions ignore the input window entirely.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistoricalAverage {
    n_nodes: usize,
    f_output: usize,
    week_slots: usize,
    slot_mean: Vec<f64>,
    slot_count: Vec<u64>,
    node_mean: Vec<f64>,
}

impl HistoricalAverage {
    pub fn fit(ds: &WindowedDataset) -> Self {
        let table = &ds.table;
        let n = table.n_nodes();
        let f_out = ds.f_output;
        let week_slots = 7 * table.slots_per_day();
        let mut slot_sum = vec![0.0; n * week_slots * f_out];
        let mut slot_count = vec![0u64; n * week_slots * f_out];
        let mut node_sum = vec![0.0; n * f_out];
        let mut node_count = vec![0u64; n * f_out];
        for t in 0..ds.train_end {
            let (dow, slot) = table.day_slot(t);
            let ws = dow * table.slots_per_day() + slot;
            for node in 0..n {
                for f in 0..f_out {
                    if table.observed(t, node, f) {
                        let v = table.value(t, node, f);
                        slot_sum[(node * week_slots + ws) * f_out + f] += v;
                        slot_count[(node * week_slots + ws) * f_out + f] += 1;
                        node_sum[node * f_out + f] += v;
                        node_count[node * f_out + f] += 1;
                    }
                }
            }
        }
        let slot_mean = slot_sum
            .iter()
            .zip(&slot_count)
            .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
            .collect();
        let node_mean = node_sum
            .iter()
            .zip(&node_count)
            .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
            .collect();
        Self {
            n_nodes: n,
            f_output: f_out,
            week_slots,
            slot_mean,
            slot_count,
            node_mean,
        }
    }

    /// Raw-space prediction for a weekly slot.
    pub fn predict(&self, dow: usize, slot_of_day: usize, slots_per_day: usize, node: usize, f: usize) -> f64 {
        let ws = dow * slots_per_day + slot_of_day;
        let idx = (node * self.week_slots + ws) * self.f_output + f;
        if self.slot_count[idx] > 0 {
            self.slot_mean[idx]
        } else {
            self.node_mean[node * self.f_output + f]
        }
    }

    /// Evaluate on one split with the same masks the model sees.
    pub fn evaluate(&self, ds: &WindowedDataset, split: Split) -> Result<MetricsReport> {
        let table = &ds.table;
        let slots = table.slots_per_day();
        let mut overall = MetricsAccumulator::default();
        let mut per_step = vec![MetricsAccumulator::default(); ds.output_steps];
        for r in ds.refs.iter().filter(|r| r.split == split) {
            for q in 0..ds.output_steps {
                let row = r.start + ds.input_steps + q;
                let (dow, slot) = table.day_slot(row);
                for node in 0..table.n_nodes() {
                    for f in 0..ds.f_output {
                        if table.observed(row, node, f) {
                            let pred = self.predict(dow, slot, slots, node, f);
                            let truth = table.value(row, node, f);
                            overall.add(pred, truth);
                            per_step[q].add(pred, truth);
                        }
                    }
                }
            }
        }
        Ok(MetricsReport {
            overall: overall.finish()?,
            per_step: per_step.iter().map(MetricsAccumulator::finish).collect::<Result<_>>()?,
        })
    }
}

/// One row of the training history file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub epsilon: f64,
    pub lr: f64,
}

pub fn write_history(path: &std::path::Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_loss", "val_loss", "epsilon", "lr"])?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            format!("{}", r.train_loss),
            format!("{}", r.val_loss),
            format!("{}", r.epsilon),
            format!("{}", r.lr),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn zscore_round_trip_and_moments() {
        let values: Vec<f64> = (0..40).map(|i| 3.0 + 1.7 * (i as f64).sin()).collect();
        let mask = vec![true; values.len()];
        let norm = Normalizer::fit(&values, &mask, 2, 1);

        for &v in &values {
            let back = norm.inverse(norm.apply(v, 0), 0);
            assert!((back - v).abs() <= 1e-12);
        }

        let transformed: Vec<f64> = values.iter().map(|&v| norm.apply(v, 0)).collect();
        let mean = transformed.iter().sum::<f64>() / transformed.len() as f64;
        let var =
            transformed.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / transformed.len() as f64;
        assert!(mean.abs() <= 1e-9);
        assert!((var.sqrt() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn zscore_constant_feature() {
        let values = vec![4.2; 12];
        let mask = vec![true; 12];
        let norm = Normalizer::fit(&values, &mask, 3, 1);
        let z = norm.apply(4.2, 0);
        assert!(z.abs() <= 1e-12);
        assert!((norm.inverse(z, 0) - 4.2).abs() <= 1e-12);
    }

    #[test]
    fn masked_mae_values() {
        let tape = Tape::new();
        let y = tape.leaf(Array::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let full = tape.leaf(Array::ones(&[2, 2]));

        // exact prediction
        let loss = masked_mae(&[y], &[y], &[full]).unwrap();
        assert_eq!(loss.value().data()[0], 0.0);

        // off by one everywhere
        let pred = tape.leaf(Array::from_rows(&[vec![2.0, 3.0], vec![4.0, 5.0]]));
        let loss = masked_mae(&[pred], &[y], &[full]).unwrap();
        assert_eq!(loss.value().data()[0], 1.0);

        // half mask: mean over unmasked cells only
        // |2-1| = 1 (masked in), |0-2| = 2 (masked out), |6-3| = 3 (in), |9-4| = 5 (out)
        let pred = tape.leaf(Array::from_rows(&[vec![2.0, 0.0], vec![6.0, 9.0]]));
        let half = tape.leaf(Array::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]));
        let loss = masked_mae(&[pred], &[y], &[half]).unwrap();
        assert_eq!(loss.value().data()[0], 2.0);
    }

    #[test]
    fn masked_mae_empty_mask_is_error() {
        let tape = Tape::new();
        let y = tape.leaf(Array::ones(&[2, 2]));
        let zero = tape.leaf(Array::zeros(&[2, 2]));
        assert!(matches!(masked_mae(&[y], &[y], &[zero]), Err(Error::Loss(_))));
    }

    #[test]
    fn masked_cells_do_not_influence_loss() {
        let tape = Tape::new();
        let y1 = tape.leaf(Array::from_rows(&[vec![1.0, 2.0]]));
        let y2 = tape.leaf(Array::from_rows(&[vec![1.0, 999.0]]));
        let pred = tape.leaf(Array::from_rows(&[vec![0.5, 0.5]]));
        let m = tape.leaf(Array::from_rows(&[vec![1.0, 0.0]]));
        let a = masked_mae(&[pred], &[y1], &[m]).unwrap().value();
        let b = masked_mae(&[pred], &[y2], &[m]).unwrap().value();
        assert_eq!(a, b);
    }

    #[test]
    fn sampling_schedule_shape() {
        let s = SamplingSchedule { tau: 2000.0 };
        assert!((s.probability(0) - 2000.0 / 2001.0).abs() < 1e-15);

        let mut last = f64::INFINITY;
        for i in 0..=10_000u64 {
            let e = s.probability(i);
            assert!(e < last, "not strictly decreasing at {i}");
            assert!(e > 0.0 && e <= 1.0);
            last = e;
        }

        // at i = tau ln(tau), exp(i/tau) = tau so epsilon = 1/2
        let i = (2000.0_f64 * 2000.0_f64.ln()).round() as u64;
        assert!((s.probability(i) - 0.5).abs() < 1e-3);
        let exact = s.tau / (s.tau + (2000.0_f64.ln()).exp());
        assert!((exact - 0.5).abs() < 1e-6);
    }

    #[test]
    fn metrics_hand_values() {
        let pred = Array::from_rows(&[vec![3.0, 2.0]]);
        let truth = Array::from_rows(&[vec![2.0, 4.0]]);
        let mask = Array::ones(&[1, 2]);
        let m = compute_metrics(&pred, &truth, &mask).unwrap();
        assert!((m.mae - 1.5).abs() <= 1e-12);
        assert!((m.rmse - 2.5f64.sqrt()).abs() <= 1e-12);
        assert!((m.mape - 50.0).abs() <= 1e-12);

        let zero = compute_metrics(&truth, &truth, &mask).unwrap();
        assert_eq!((zero.mae, zero.rmse, zero.mape), (0.0, 0.0, 0.0));
    }

    #[test]
    fn rmse_dominates_mae() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand::rngs::StdRng::seed_from_u64(4);
        for _ in 0..20 {
            let n = 30;
            let p = Array::new(vec![n], (0..n).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap();
            let t = Array::new(vec![n], (0..n).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap();
            let mask = Array::ones(&[n]);
            let m = compute_metrics(&p, &t, &mask).unwrap();
            assert!(m.rmse >= m.mae - 1e-12);
        }
    }

    #[test]
    fn mape_rejects_all_zero_truth() {
        let pred = Array::from_rows(&[vec![1.0, 2.0]]);
        let truth = Array::zeros(&[1, 2]);
        let mask = Array::ones(&[1, 2]);
        assert!(matches!(
            compute_metrics(&pred, &truth, &mask),
            Err(Error::Metric(_))
        ));
    }

    #[test]
    fn metrics_invariant_under_node_permutation() {
        let pred = Array::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]);
        let truth = Array::from_rows(&[vec![1.5], vec![1.0], vec![2.0]]);
        let mask = Array::from_rows(&[vec![1.0], vec![1.0], vec![0.0]]);
        let base = compute_metrics(&pred, &truth, &mask).unwrap();

        let perm = [2usize, 0, 1];
        let permute = |a: &Array| {
            Array::from_rows(&perm.iter().map(|&i| vec![a.at(i, 0)]).collect::<Vec<_>>())
        };
        let p = compute_metrics(&permute(&pred), &permute(&truth), &permute(&mask)).unwrap();
        assert_eq!(base, p);
    }
}
