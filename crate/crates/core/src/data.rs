//! Sensor series ingestion, sliding windows with chronological splits, the
//! fault/sparsity transforms behind the robustness protocols, and a synthetic
//! generator whose data genuinely contains lagged diffusion structure.

use std::collections::HashMap;
use std::path::Path;

use chrono::{DateTime, Datelike, NaiveDateTime, Timelike};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::embedding::temporal_index;
use crate::error::{Error, Result};
use crate::graph::TrafficGraph;
use crate::tensor::Array;
use crate::training::Normalizer;

/// Dense uniformly-spaced series: `values[t][node][feature]` with an
/// observed-mask of the same layout. Gaps in the source data appear as
/// unobserved cells, never as missing rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesTable {
    node_ids: Vec<String>,
    start_ts: i64,
    delta_minutes: u32,
    f_input: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
    total: usize,
}

impl SeriesTable {
    pub fn new(
        node_ids: Vec<String>,
        start_ts: i64,
        delta_minutes: u32,
        f_input: usize,
        values: Vec<f64>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        let n = node_ids.len();
        if values.len() != mask.len() || n == 0 || f_input == 0 || values.len() % (n * f_input) != 0
        {
            return Err(Error::Contract(format!(
                "series table: {} values, {} mask cells, {} nodes, {} features",
                values.len(),
                mask.len(),
                n,
                f_input
            )));
        }
        if delta_minutes == 0 || 24 * 60 % delta_minutes != 0 {
            return Err(Error::Ingestion(format!(
                "spacing of {delta_minutes} minutes does not divide a day"
            )));
        }
        let total = values.len() / (n * f_input);
        Ok(Self {
            node_ids,
            start_ts,
            delta_minutes,
            f_input,
            values,
            mask,
            total,
        })
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn n_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn f_input(&self) -> usize {
        self.f_input
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn delta_minutes(&self) -> u32 {
        self.delta_minutes
    }

    pub fn timestamp(&self, t: usize) -> i64 {
        self.start_ts + t as i64 * self.delta_minutes as i64 * 60
    }

    pub fn value(&self, t: usize, node: usize, f: usize) -> f64 {
        self.values[(t * self.n_nodes() + node) * self.f_input + f]
    }

    pub fn observed(&self, t: usize, node: usize, f: usize) -> bool {
        self.mask[(t * self.n_nodes() + node) * self.f_input + f]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    #[cfg(test)]
    pub(crate) fn values_mut_for_tests(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// (day-of-week, slot-of-day) of row `t`; Monday is day 0.
    pub fn day_slot(&self, t: usize) -> (usize, usize) {
        let dt = DateTime::from_timestamp(self.timestamp(t), 0)
            .expect("valid timestamp")
            .naive_utc();
        let dow = dt.weekday().num_days_from_monday() as usize;
        let minutes = dt.hour() * 60 + dt.minute();
        (dow, (minutes / self.delta_minutes) as usize)
    }

    pub fn slots_per_day(&self) -> usize {
        (24 * 60 / self.delta_minutes) as usize
    }

    /// Observed cells only, as `timestamp,node_id,feature...` rows.
    pub fn export_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["timestamp".to_string(), "node_id".to_string()];
        header.extend((0..self.f_input).map(|f| format!("feature_{f}")));
        w.write_record(&header)?;
        for t in 0..self.total {
            let ts = DateTime::from_timestamp(self.timestamp(t), 0)
                .expect("valid timestamp")
                .naive_utc()
                .format("%Y-%m-%dT%H:%M:%S")
                .to_string();
            for node in 0..self.n_nodes() {
                if (0..self.f_input).all(|f| self.observed(t, node, f)) {
                    let mut row = vec![ts.clone(), self.node_ids[node].clone()];
                    row.extend((0..self.f_input).map(|f| format!("{}", self.value(t, node, f))));
                    w.write_record(&row)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn parse_timestamp(text: &str) -> Result<i64> {
    let text = text.trim();
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(text, fmt) {
            return Ok(dt.and_utc().timestamp());
        }
    }
    Err(Error::Ingestion(format!("unparseable timestamp `{text}`")))
}

/// Load `timestamp,node_id,feature_0[,feature_1,...]` readings into a dense
/// table. Spacing is inferred from the distinct timestamps and every
/// timestamp must sit on that grid.
pub fn ingest(path: &Path, node_ids: &[String]) -> Result<SeriesTable> {
    let index: HashMap<&str, usize> = node_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut rdr = csv::Reader::from_path(path)?;
    let mut rows: Vec<(i64, usize, Vec<f64>)> = Vec::new();
    let mut f_input = None;
    for record in rdr.records() {
        let record = record?;
        if record.len() < 3 {
            return Err(Error::Ingestion(format!(
                "{}: expected at least 3 columns, got {}",
                path.display(),
                record.len()
            )));
        }
        let ts = parse_timestamp(&record[0])?;
        let node = *index.get(record[1].trim()).ok_or_else(|| {
            Error::Ingestion(format!("readings name unknown node `{}`", &record[1]))
        })?;
        let feats: Vec<f64> = record
            .iter()
            .skip(2)
            .map(|v| {
                v.trim().parse().map_err(|_| {
                    Error::Ingestion(format!("{}: bad value `{v}`", path.display()))
                })
            })
            .collect::<Result<_>>()?;
        match f_input {
            None => f_input = Some(feats.len()),
            Some(k) if k != feats.len() => {
                return Err(Error::Ingestion(format!(
                    "{}: inconsistent feature count ({} vs {k})",
                    path.display(),
                    feats.len()
                )))
            }
            _ => {}
        }
        rows.push((ts, node, feats));
    }
    let f_input = f_input.ok_or_else(|| Error::Ingestion(format!("{}: no rows", path.display())))?;

    let mut stamps: Vec<i64> = rows.iter().map(|r| r.0).collect();
    stamps.sort_unstable();
    stamps.dedup();
    if stamps.len() < 2 {
        return Err(Error::Ingestion("need at least 2 distinct timestamps".into()));
    }
    let spacing = stamps.windows(2).map(|w| w[1] - w[0]).min().unwrap();
    if spacing <= 0 || spacing % 60 != 0 {
        return Err(Error::Ingestion(format!(
            "inferred spacing {spacing}s is not a whole number of minutes"
        )));
    }
    let delta_minutes = (spacing / 60) as u32;
    if 24 * 60 % delta_minutes != 0 {
        return Err(Error::Ingestion(format!(
            "inferred spacing of {delta_minutes} minutes does not divide a day"
        )));
    }
    let start = stamps[0];
    let offenders: Vec<String> = stamps
        .iter()
        .filter(|&&s| (s - start) % spacing != 0)
        .take(3)
        .map(|&s| {
            DateTime::from_timestamp(s, 0)
                .expect("valid timestamp")
                .naive_utc()
                .to_string()
        })
        .collect();
    if !offenders.is_empty() {
        return Err(Error::Ingestion(format!(
            "irregular spacing: timestamps off the {delta_minutes}-minute grid: {}",
            offenders.join(", ")
        )));
    }

    let total = ((stamps[stamps.len() - 1] - start) / spacing) as usize + 1;
    let n = node_ids.len();
    let mut values = vec![0.0; total * n * f_input];
    let mut mask = vec![false; total * n * f_input];
    for (ts, node, feats) in rows {
        let t = ((ts - start) / spacing) as usize;
        for (f, v) in feats.into_iter().enumerate() {
            let cell = (t * n + node) * f_input + f;
            if mask[cell] {
                return Err(Error::Ingestion(format!(
                    "duplicate reading for node {} at t index {t}",
                    node_ids[node]
                )));
            }
            values[cell] = v;
            mask[cell] = true;
        }
    }
    SeriesTable::new(node_ids.to_vec(), start, delta_minutes, f_input, values, mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy)]
pub struct WindowRef {
    pub start: usize,
    pub split: Split,
}

/// One materialized window: normalized inputs, targets, masks, and temporal
/// indices for all P + Q steps.
#[derive(Debug, Clone)]
pub struct Window {
    pub start: usize,
    pub x: Vec<Array>,
    pub y: Vec<Array>,
    pub y_mask: Vec<Array>,
    pub t_idx: Vec<usize>,
    pub y0: Array,
}

/// Sliding windows over a table plus the chronological 70/10/10 split.
/// Windows never straddle a split boundary.
#[derive(Debug, Clone)]
pub struct WindowedDataset {
    pub table: SeriesTable,
    pub refs: Vec<WindowRef>,
    pub input_steps: usize,
    pub output_steps: usize,
    pub f_output: usize,
    /// First row index at or beyond the training portion.
    pub train_end: usize,
    /// First row index at or beyond the validation portion.
    pub val_end: usize,
}

pub fn windowize(
    table: SeriesTable,
    input_steps: usize,
    output_steps: usize,
    f_output: usize,
    stride: usize,
) -> Result<WindowedDataset> {
    let span = input_steps + output_steps;
    let total = table.total();
    if total < span {
        return Err(Error::DatasetTooSmall { total, needed: span });
    }
    if f_output > table.f_input() {
        return Err(Error::Contract(format!(
            "f_output {} exceeds observed features {}",
            f_output,
            table.f_input()
        )));
    }
    let train_end = total * 7 / 10;
    let val_end = total * 8 / 10;
    let mut refs = Vec::new();
    let mut s = 0;
    while s + span <= total {
        let split = if s + span <= train_end {
            Some(Split::Train)
        } else if s >= train_end && s + span <= val_end {
            Some(Split::Val)
        } else if s >= val_end {
            Some(Split::Test)
        } else {
            None // straddles a boundary
        };
        if let Some(split) = split {
            refs.push(WindowRef { start: s, split });
        }
        s += stride;
    }
    Ok(WindowedDataset {
        table,
        refs,
        input_steps,
        output_steps,
        f_output,
        train_end,
        val_end,
    })
}

impl WindowedDataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.refs
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Raw training rows as a flat `[t][node][feature]` slice (plus mask),
    /// for consumers that must not see validation or test data.
    pub fn training_history(&self) -> (&[f64], &[bool], usize) {
        let cells = self.train_end * self.table.n_nodes() * self.table.f_input();
        (
            &self.table.values()[..cells],
            &self.table.mask()[..cells],
            self.train_end,
        )
    }

    /// Normalized window ready for the model. Unobserved inputs sit at the
    /// normalized mean (zero); target masks carry observedness instead.
    pub fn materialize(&self, window: usize, norm: &Normalizer) -> Result<Window> {
        let r = &self.refs[window];
        let n = self.table.n_nodes();
        let f_in = self.table.f_input();
        let f_out = self.f_output;
        let t_slots = self.table.slots_per_day();

        let mut x = Vec::with_capacity(self.input_steps);
        let mut t_idx = Vec::with_capacity(self.input_steps + self.output_steps);
        for step in 0..self.input_steps + self.output_steps {
            let row = r.start + step;
            let (dow, slot) = self.table.day_slot(row);
            t_idx.push(temporal_index(dow, slot, t_slots)?);
        }
        for step in 0..self.input_steps {
            let row = r.start + step;
            let mut m = Array::zeros(&[n, f_in]);
            for node in 0..n {
                for f in 0..f_in {
                    if self.table.observed(row, node, f) {
                        m.set(node, f, norm.apply(self.table.value(row, node, f), f));
                    }
                }
            }
            x.push(m);
        }
        let mut y = Vec::with_capacity(self.output_steps);
        let mut y_mask = Vec::with_capacity(self.output_steps);
        for step in 0..self.output_steps {
            let row = r.start + self.input_steps + step;
            let mut m = Array::zeros(&[n, f_out]);
            let mut mm = Array::zeros(&[n, f_out]);
            for node in 0..n {
                for f in 0..f_out {
                    if self.table.observed(row, node, f) {
                        m.set(node, f, norm.apply(self.table.value(row, node, f), f));
                        mm.set(node, f, 1.0);
                    }
                }
            }
            y.push(m);
            y_mask.push(mm);
        }
        let mut y0 = Array::zeros(&[n, f_out]);
        let last = r.start + self.input_steps - 1;
        for node in 0..n {
            for f in 0..f_out {
                if self.table.observed(last, node, f) {
                    y0.set(node, f, norm.apply(self.table.value(last, node, f), f));
                }
            }
        }
        Ok(Window {
            start: r.start,
            x,
            y,
            y_mask,
            t_idx,
            y0,
        })
    }
}

/// Replace an exact fraction of observed value cells with zero. The mask is
/// untouched: injected zeros are noise, not missingness.
pub fn inject_faults(table: &SeriesTable, ratio: f64, seed: u64) -> Result<SeriesTable> {
    inject_faults_in_rows(table, ratio, seed, 0..table.total())
}

/// Fault injection restricted to a row range, for protocols that corrupt
/// the test portion only.
pub fn inject_faults_in_rows(
    table: &SeriesTable,
    ratio: f64,
    seed: u64,
    rows: std::ops::Range<usize>,
) -> Result<SeriesTable> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Contract(format!("fault ratio {ratio} outside [0, 1]")));
    }
    let mut out = table.clone();
    if ratio == 0.0 {
        return Ok(out);
    }
    let stride = table.n_nodes() * table.f_input();
    let mut observed: Vec<usize> = (rows.start * stride..rows.end * stride)
        .filter(|&c| table.mask()[c])
        .collect();
    let zap = (ratio * observed.len() as f64).round() as usize;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    observed.shuffle(&mut rng);
    for &cell in &observed[..zap] {
        out.values[cell] = 0.0;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SubsampleMode {
    /// Keep the first days (deterministic, ignores the seed).
    Prefix,
    /// Keep a seeded random contiguous run of days.
    RandomWindow,
}

/// Keep a contiguous run of whole days covering `proportion` of the table.
pub fn subsample(
    table: &SeriesTable,
    proportion: f64,
    seed: u64,
    mode: SubsampleMode,
) -> Result<SeriesTable> {
    if !(proportion > 0.0 && proportion <= 1.0) {
        return Err(Error::Contract(format!(
            "subsample proportion {proportion} outside (0, 1]"
        )));
    }
    let per_day = table.slots_per_day();
    let days = table.total() / per_day;
    if days == 0 {
        return Err(Error::DatasetTooSmall {
            total: table.total(),
            needed: per_day,
        });
    }
    let keep = ((proportion * days as f64).round() as usize).clamp(1, days);
    if keep == days && table.total() == days * per_day {
        return Ok(table.clone());
    }
    let start_day = match mode {
        SubsampleMode::Prefix => 0,
        SubsampleMode::RandomWindow => {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            rng.random_range(0..=days - keep)
        }
    };
    let row0 = start_day * per_day;
    let rows = keep * per_day;
    let stride = table.n_nodes() * table.f_input();
    let values = table.values()[row0 * stride..(row0 + rows) * stride].to_vec();
    let mask = table.mask()[row0 * stride..(row0 + rows) * stride].to_vec();
    SeriesTable::new(
        table.node_ids().to_vec(),
        table.timestamp(row0),
        table.delta_minutes(),
        table.f_input(),
        values,
        mask,
    )
}

/// Knobs for the synthetic generator.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Side of the square the sensors are scattered over.
    pub area_km: f64,
    /// Pairs farther apart than this have unknown distance.
    pub radius_km: f64,
    /// Speed used to derive travel times between sensors.
    pub travel_speed_kmh: f64,
    /// Mean speed level of the series.
    pub base_level: f64,
    /// Amplitude scale of the shared daily sinusoid.
    pub daily_amplitude: f64,
    /// AR(1) coefficient of each node's local fluctuation.
    pub ar_coeff: f64,
    /// Stationary standard deviation of the local fluctuation.
    pub ar_std: f64,
    /// Strength of the lagged diffusion echo between connected nodes.
    pub diffusion: f64,
    /// White measurement noise.
    pub noise_std: f64,
    /// Adjacency kernel threshold.
    pub kappa: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            area_km: 8.0,
            radius_km: 5.0,
            travel_speed_kmh: 15.0,
            base_level: 60.0,
            daily_amplitude: 8.0,
            ar_coeff: 0.95,
            ar_std: 4.0,
            diffusion: 0.6,
            noise_std: 0.5,
            kappa: 0.05,
        }
    }
}

/// Epoch seconds of a Monday midnight, so synthetic weeks start at day 0.
const SYNTH_EPOCH: i64 = 1704067200; // 2024-01-01T00:00:00, a Monday

/// Random geometric graph plus speeds built from a shared daily sinusoid,
/// a per-node AR(1) fluctuation, a diffusion term where each node echoes its
/// neighbors' fluctuations lagged by the travel time, and white noise. The
/// echo makes the reachability structure genuinely present in the data.
pub fn synthesize(
    n_nodes: usize,
    days: usize,
    delta_minutes: u32,
    seed: u64,
    cfg: &SynthConfig,
) -> Result<(SeriesTable, TrafficGraph)> {
    if n_nodes < 2 {
        return Err(Error::Contract("need at least 2 nodes".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let per_day = (24 * 60 / delta_minutes) as usize;
    let total = days * per_day;

    // geometry
    let positions: Vec<(f64, f64)> = (0..n_nodes)
        .map(|_| {
            (
                rng.random_range(0.0..cfg.area_km),
                rng.random_range(0.0..cfg.area_km),
            )
        })
        .collect();
    let mut distances = Array::full(&[n_nodes, n_nodes], f64::INFINITY);
    let mut nearest = vec![(usize::MAX, f64::INFINITY); n_nodes];
    for i in 0..n_nodes {
        distances.set(i, i, 0.0);
        for j in 0..n_nodes {
            if i == j {
                continue;
            }
            let dx = positions[i].0 - positions[j].0;
            let dy = positions[i].1 - positions[j].1;
            let km = (dx * dx + dy * dy).sqrt();
            if km < nearest[i].1 {
                nearest[i] = (j, km);
            }
            if km <= cfg.radius_km {
                distances.set(i, j, km * 1000.0);
            }
        }
    }
    // no isolated sensors: always know the distance to the nearest neighbor
    for i in 0..n_nodes {
        let (j, km) = nearest[i];
        if j != usize::MAX && !distances.at(i, j).is_finite() {
            distances.set(i, j, km * 1000.0);
            distances.set(j, i, km * 1000.0);
        }
    }

    let ids = (0..n_nodes).map(|i| format!("s{i:03}")).collect();
    let mut graph = TrafficGraph::new(ids, distances, cfg.kappa)?;
    graph.derive_travel_time(cfg.travel_speed_kmh)?;
    let travel = graph.travel_time()?.clone();

    // lag table and column-normalized echo weights over the adjacency
    let adjacency = graph.adjacency().clone();
    let lag = |i: usize, j: usize| -> usize {
        (travel.at(i, j) / delta_minutes as f64).round() as usize
    };
    let col_sums: Vec<f64> = (0..n_nodes)
        .map(|j| (0..n_nodes).map(|i| adjacency.at(i, j)).sum())
        .collect();

    // shared daily phase, per-node amplitude
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let amps: Vec<f64> = (0..n_nodes)
        .map(|_| cfg.daily_amplitude * rng.random_range(0.75..1.25))
        .collect();

    // AR(1) local fluctuation with a burn-in long enough to cover every lag
    let max_lag = (0..n_nodes)
        .flat_map(|i| (0..n_nodes).map(move |j| (i, j)))
        .filter(|&(i, j)| i != j && travel.at(i, j).is_finite())
        .map(|(i, j)| lag(i, j))
        .max()
        .unwrap_or(0);
    let burn = max_lag + 64;
    let innovation = cfg.ar_std * (1.0 - cfg.ar_coeff * cfg.ar_coeff).sqrt();
    let normal = Normal::new(0.0, 1.0).map_err(|e| Error::Numeric(e.to_string()))?;
    let mut u = vec![0.0f64; (total + burn) * n_nodes];
    for t in 1..total + burn {
        for i in 0..n_nodes {
            let prev = u[(t - 1) * n_nodes + i];
            u[t * n_nodes + i] = cfg.ar_coeff * prev + innovation * normal.sample(&mut rng);
        }
    }
    let u_at = |t: i64, i: usize| -> f64 {
        let shifted = t + burn as i64;
        if shifted < 0 {
            0.0
        } else {
            u[shifted as usize * n_nodes + i]
        }
    };

    let omega = std::f64::consts::TAU / per_day as f64;
    let mut values = vec![0.0f64; total * n_nodes];
    for t in 0..total {
        for j in 0..n_nodes {
            let mut echo = 0.0;
            if cfg.diffusion != 0.0 && col_sums[j] > 0.0 {
                for i in 0..n_nodes {
                    let w = adjacency.at(i, j);
                    if i == j || w == 0.0 {
                        continue;
                    }
                    echo += w / col_sums[j] * u_at(t as i64 - lag(i, j) as i64, i);
                }
            }
            let v = cfg.base_level
                + amps[j] * (omega * t as f64 + phase).sin()
                + u_at(t as i64, j)
                + cfg.diffusion * echo
                + cfg.noise_std * normal.sample(&mut rng);
            values[t * n_nodes + j] = v;
        }
    }

    let mask = vec![true; values.len()];
    let table = SeriesTable::new(
        graph.node_ids().to_vec(),
        SYNTH_EPOCH,
        delta_minutes,
        1,
        values,
        mask,
    )?;
    Ok((table, graph))
}
