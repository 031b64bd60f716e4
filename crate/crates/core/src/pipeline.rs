//! Assembly of a runnable setup from raw inputs: dataset windows and
//! normalizer, travel times, frozen embeddings, and the correlation bundle.

use crate::config::ModelConfig;
use crate::data::{windowize, SeriesTable, WindowedDataset};
use crate::embedding::{spatial_embedding, temporal_embedding};
use crate::error::{Error, Result};
use crate::graph::TrafficGraph;
use crate::model::CorrelationBundle;
use crate::tensor::Array;
use crate::training::Normalizer;

/// Everything `train`/`evaluate` need beyond the model itself.
pub struct Assembled {
    pub dataset: WindowedDataset,
    pub normalizer: Normalizer,
    pub bundle: CorrelationBundle,
    pub travel_time: Array,
}

/// Populate the graph's travel times if a file did not already: use the
/// configured mean speed, falling back to the mean observed value of
/// feature 0 over the training rows.
pub fn resolve_travel_time(
    graph: &mut TrafficGraph,
    ds: &WindowedDataset,
    config: &ModelConfig,
) -> Result<()> {
    if graph.travel_time().is_ok() {
        return Ok(());
    }
    let speed = match config.mean_speed_kmh {
        Some(s) => s,
        None => {
            let (values, mask, rows) = ds.training_history();
            let n = ds.table.n_nodes();
            let f_in = ds.table.f_input();
            let mut sum = 0.0;
            let mut cnt = 0usize;
            for t in 0..rows {
                for node in 0..n {
                    let cell = (t * n + node) * f_in;
                    if mask[cell] {
                        sum += values[cell];
                        cnt += 1;
                    }
                }
            }
            if cnt == 0 || sum <= 0.0 {
                return Err(Error::Contract(
                    "cannot derive travel times: training speeds are empty or non-positive; \
                     provide a travel-time file or mean_speed_kmh"
                        .into(),
                ));
            }
            sum / cnt as f64
        }
    };
    graph.derive_travel_time(speed)
}

/// Windowize, fit the normalizer on the training split, resolve travel
/// times, and build the correlation bundle. Embeddings are computed from the
/// config seed when not supplied.
pub fn assemble(
    table: SeriesTable,
    graph: &mut TrafficGraph,
    config: &ModelConfig,
    sp: Option<Array>,
    tp: Option<Array>,
) -> Result<Assembled> {
    config.validate()?;
    if table.delta_minutes() != config.delta_minutes {
        return Err(Error::Config(format!(
            "dataset spacing is {} minutes but the config says {}",
            table.delta_minutes(),
            config.delta_minutes
        )));
    }
    if table.f_input() != config.f_input {
        return Err(Error::Config(format!(
            "dataset has {} features but the config says {}",
            table.f_input(),
            config.f_input
        )));
    }
    let dataset = windowize(
        table,
        config.input_steps,
        config.output_steps,
        config.f_output,
        config.stride,
    )?;
    let (values, mask, _) = dataset.training_history();
    let normalizer = Normalizer::fit(values, mask, dataset.table.n_nodes(), dataset.table.f_input());
    resolve_travel_time(graph, &dataset, config)?;

    let sp = match sp {
        Some(m) => m,
        None => spatial_embedding(
            graph.adjacency(),
            config.f_spatial_emb,
            &config.embedding,
            config.seed,
        )?,
    };
    let tp = match tp {
        Some(m) => m,
        None => temporal_embedding(
            config.slots_per_day(),
            config.week_wrap,
            config.f_temporal_emb,
            &config.embedding,
            config.seed,
        )?,
    };
    let bundle = CorrelationBundle::build(graph, &dataset, config, sp, tp)?;
    let travel_time = graph.travel_time()?.clone();
    Ok(Assembled {
        dataset,
        normalizer,
        bundle,
        travel_time,
    })
}
