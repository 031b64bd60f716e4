//! Traffic graph construction: Gaussian-kernel adjacency from pairwise
//! distances, the normalized spectral matrix consumed by graph convolutions,
//! and the travel-time matrix behind the reachability scores.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Array;

/// Node set, weighted adjacency, pairwise distances and travel times.
/// Immutable once built; shareable read-only.
#[derive(Debug, Clone)]
pub struct TrafficGraph {
    node_ids: Vec<String>,
    index: HashMap<String, usize>,
    distances: Array,
    adjacency: Array,
    travel_time: Option<Array>,
}

/// Thresholded Gaussian kernel: `A_ij = exp(-d_ij^2 / sigma^2)` when that
/// value reaches `kappa`, else 0, with sigma the standard deviation of all
/// finite off-diagonal distances. Diagonal is 0.
pub fn build_adjacency(distances: &Array, kappa: f64) -> Result<Array> {
    let n = distances.rows();
    if n < 2 {
        return Err(Error::DegenerateGraph("need at least 2 nodes".into()));
    }
    let mut finite = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let d = distances.at(i, j);
            if d < 0.0 {
                return Err(Error::Contract(format!("negative distance at ({i},{j})")));
            }
            if i != j && d.is_finite() {
                finite.push(d);
            }
        }
    }
    if finite.is_empty() {
        return Err(Error::DegenerateGraph(
            "all pairwise distances are infinite".into(),
        ));
    }
    let mean = finite.iter().sum::<f64>() / finite.len() as f64;
    let var = finite.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / finite.len() as f64;
    let sigma2 = var;

    let mut a = Array::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = distances.at(i, j);
            // exp(0) = 1 regardless of sigma, including sigma = 0
            let w = if d == 0.0 { 1.0 } else { (-d * d / sigma2).exp() };
            if w >= kappa {
                a.set(i, j, w);
            }
        }
    }
    Ok(a)
}

/// `L = I - D^{-1/2} A D^{-1/2}` with D the diagonal of row sums. Nodes with
/// zero degree contribute `D^{-1/2} = 0`, leaving their row equal to `e_i`.
pub fn normalized_matrix(a: &Array) -> Array {
    let n = a.rows();
    assert!(a.data().iter().all(|&v| v >= 0.0), "adjacency must be nonnegative");
    let inv_sqrt: Vec<f64> = a
        .row_sums()
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
        .collect();
    let mut l = Array::eye(n);
    for i in 0..n {
        for j in 0..n {
            let v = inv_sqrt[i] * a.at(i, j) * inv_sqrt[j];
            l.set(i, j, l.at(i, j) - v);
        }
    }
    l
}

/// Minutes to cover each pairwise distance at a constant speed. Infinite
/// distances stay infinite (never reachable); the diagonal is 0.
pub fn travel_time_from_speed(distances: &Array, mean_speed_kmh: f64) -> Result<Array> {
    if !(mean_speed_kmh > 0.0) {
        return Err(Error::Contract(format!(
            "mean speed must be positive, got {mean_speed_kmh}"
        )));
    }
    let n = distances.rows();
    let mut m = Array::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = distances.at(i, j);
            let minutes = if d.is_finite() {
                (d / 1000.0) / mean_speed_kmh * 60.0
            } else {
                f64::INFINITY
            };
            m.set(i, j, minutes);
        }
    }
    Ok(m)
}

impl TrafficGraph {
    pub fn new(node_ids: Vec<String>, distances: Array, kappa: f64) -> Result<Self> {
        let n = node_ids.len();
        if distances.shape() != [n, n] {
            return Err(Error::dimension("graph distances", distances.shape(), &[n, n]));
        }
        let adjacency = build_adjacency(&distances, kappa)?;
        let index = node_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        Ok(Self {
            node_ids,
            index,
            distances,
            adjacency,
            travel_time: None,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn adjacency(&self) -> &Array {
        &self.adjacency
    }

    pub fn distances(&self) -> &Array {
        &self.distances
    }

    pub fn laplacian(&self) -> Array {
        normalized_matrix(&self.adjacency)
    }

    pub fn travel_time(&self) -> Result<&Array> {
        self.travel_time
            .as_ref()
            .ok_or_else(|| Error::Contract("travel time matrix not populated".into()))
    }

    /// Derive `M = distance / speed` in minutes.
    pub fn derive_travel_time(&mut self, mean_speed_kmh: f64) -> Result<()> {
        self.travel_time = Some(travel_time_from_speed(&self.distances, mean_speed_kmh)?);
        Ok(())
    }

    pub fn set_travel_time(&mut self, m: Array) -> Result<()> {
        let n = self.n_nodes();
        if m.shape() != [n, n] {
            return Err(Error::dimension("travel time", m.shape(), &[n, n]));
        }
        for i in 0..n {
            if m.at(i, i) != 0.0 {
                return Err(Error::Contract(format!("travel time diagonal not 0 at {i}")));
            }
        }
        if m.data().iter().any(|&v| v < 0.0 || v.is_nan()) {
            return Err(Error::Contract("travel time must be >= 0".into()));
        }
        self.travel_time = Some(m);
        Ok(())
    }

    /// Explicit per-pair minutes from a `from,to,minutes` CSV; rows override
    /// whatever the derivation produced.
    pub fn override_travel_time_from_file(&mut self, path: &Path) -> Result<()> {
        let n = self.n_nodes();
        let mut m = match &self.travel_time {
            Some(m) => m.clone(),
            None => {
                let mut blank = Array::full(&[n, n], f64::INFINITY);
                for i in 0..n {
                    blank.set(i, i, 0.0);
                }
                blank
            }
        };
        let mut rdr = csv::Reader::from_path(path)?;
        for record in rdr.records() {
            let record = record?;
            let (from, to, minutes) = parse_pair_row(&record, path)?;
            let i = self.index_of(&from).ok_or_else(|| {
                Error::Ingestion(format!("travel time file names unknown node `{from}`"))
            })?;
            let j = self.index_of(&to).ok_or_else(|| {
                Error::Ingestion(format!("travel time file names unknown node `{to}`"))
            })?;
            if minutes < 0.0 {
                return Err(Error::Ingestion(format!(
                    "negative travel time for pair {from},{to}"
                )));
            }
            if i != j {
                m.set(i, j, minutes);
            }
        }
        self.travel_time = Some(m);
        Ok(())
    }
}

fn parse_pair_row(record: &csv::StringRecord, path: &Path) -> Result<(String, String, f64)> {
    if record.len() < 3 {
        return Err(Error::Ingestion(format!(
            "{}: expected 3 columns, got {}",
            path.display(),
            record.len()
        )));
    }
    let v: f64 = record[2]
        .trim()
        .parse()
        .map_err(|_| Error::Ingestion(format!("{}: bad number `{}`", path.display(), &record[2])))?;
    Ok((record[0].trim().to_string(), record[1].trim().to_string(), v))
}

/// One node id per line.
pub fn load_node_list(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    let ids: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if ids.is_empty() {
        return Err(Error::Ingestion(format!("{}: no node ids", path.display())));
    }
    Ok(ids)
}

/// Symmetric distance matrix from a `from,to,distance_m` CSV. Pairs absent
/// from the file are unknown (infinite).
pub fn load_distances(path: &Path, node_ids: &[String]) -> Result<Array> {
    let n = node_ids.len();
    let index: HashMap<&str, usize> = node_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut d = Array::full(&[n, n], f64::INFINITY);
    for i in 0..n {
        d.set(i, i, 0.0);
    }
    let mut rdr = csv::Reader::from_path(path)?;
    for record in rdr.records() {
        let record = record?;
        let (from, to, meters) = parse_pair_row(&record, path)?;
        let i = *index
            .get(from.as_str())
            .ok_or_else(|| Error::Ingestion(format!("distance file names unknown node `{from}`")))?;
        let j = *index
            .get(to.as_str())
            .ok_or_else(|| Error::Ingestion(format!("distance file names unknown node `{to}`")))?;
        if meters < 0.0 {
            return Err(Error::Ingestion(format!("negative distance for {from},{to}")));
        }
        d.set(i, j, meters);
        d.set(j, i, meters);
    }
    Ok(d)
}

pub fn write_node_list(path: &Path, node_ids: &[String]) -> Result<()> {
    std::fs::write(path, node_ids.join("\n") + "\n")?;
    Ok(())
}

/// Write the finite off-diagonal upper triangle as `from,to,distance_m`.
pub fn write_distances(path: &Path, node_ids: &[String], distances: &Array) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["from", "to", "distance_m"])?;
    for i in 0..node_ids.len() {
        for j in (i + 1)..node_ids.len() {
            let d = distances.at(i, j);
            if d.is_finite() {
                w.write_record([&node_ids[i], &node_ids[j], &format!("{d}")])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_travel_times(path: &Path, node_ids: &[String], m: &Array) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["from", "to", "minutes"])?;
    for i in 0..node_ids.len() {
        for j in 0..node_ids.len() {
            let v = m.at(i, j);
            if i != j && v.is_finite() {
                w.write_record([&node_ids[i], &node_ids[j], &format!("{v}")])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
