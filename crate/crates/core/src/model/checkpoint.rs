//! Single self-describing checkpoint file: config, normalizer, frozen
//! embeddings, the data-derived matrices, and every parameter by name, shape
//! and values. JSON with shortest round-trip float formatting, so save/load
//! is bitwise for finite values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{CorrelationBundle, MsgcModel};
use crate::tensor::Array;
use crate::training::Normalizer;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MatrixData {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl MatrixData {
    fn from_array(a: &Array) -> Self {
        Self {
            shape: a.shape().to_vec(),
            values: a.data().to_vec(),
        }
    }

    fn to_array(&self) -> Result<Array> {
        Array::new(self.shape.clone(), self.values.clone())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Unreachable pairs hold infinite travel time, which JSON cannot carry;
/// they are stored as -1 (travel times are otherwise nonnegative).
const UNREACHABLE: f64 = -1.0;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub normalizer: Normalizer,
    pub spatial_embedding: MatrixData,
    pub temporal_embedding: MatrixData,
    pub adj_trend: MatrixData,
    pub travel_time: MatrixData,
    pub params: Vec<ParamEntry>,
}

impl Checkpoint {
    pub fn capture(
        model: &MsgcModel,
        normalizer: &Normalizer,
        bundle: &CorrelationBundle,
        travel_time: &Array,
    ) -> Self {
        let params = model
            .store()
            .names()
            .iter()
            .zip(model.store().values())
            .map(|(name, value)| ParamEntry {
                name: name.clone(),
                shape: value.shape().to_vec(),
                values: value.data().to_vec(),
            })
            .collect();
        let mut travel = MatrixData::from_array(travel_time);
        for v in travel.values.iter_mut() {
            if !v.is_finite() {
                *v = UNREACHABLE;
            }
        }
        Self {
            config: model.config().clone(),
            normalizer: normalizer.clone(),
            spatial_embedding: MatrixData::from_array(&bundle.sp),
            temporal_embedding: MatrixData::from_array(&bundle.tp),
            adj_trend: MatrixData::from_array(&bundle.adj_trend),
            travel_time: travel,
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
        Ok(ckpt)
    }

    pub fn travel_time_matrix(&self) -> Result<Array> {
        let mut a = self.travel_time.to_array()?;
        for v in a.data_mut() {
            if *v == UNREACHABLE {
                *v = f64::INFINITY;
            }
        }
        Ok(a)
    }

    /// Model with the stored parameters in place.
    pub fn restore_model(&self) -> Result<MsgcModel> {
        let mut model = MsgcModel::new(self.config.clone())?;
        let entries: Vec<(String, Array)> = self
            .params
            .iter()
            .map(|p| Ok((p.name.clone(), Array::new(p.shape.clone(), p.values.clone())?)))
            .collect::<Result<_>>()?;
        model.store_mut().load(&entries)?;
        Ok(model)
    }

    /// Rebuild the constant forward-pass inputs exactly as trained.
    pub fn bundle(&self) -> Result<CorrelationBundle> {
        CorrelationBundle::from_parts(
            &self.travel_time_matrix()?,
            &self.config,
            self.adj_trend.to_array()?,
            self.spatial_embedding.to_array()?,
            self.temporal_embedding.to_array()?,
        )
    }
}
