//! Shared fixtures: a desk-size config and a randomized toy instance with a
//! window, bundle and travel matrix, everything seeded.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::config::ModelConfig;
use crate::data::Window;
use crate::model::{CorrelationBundle, MsgcModel};
use crate::tensor::Array;

/// N-independent toy widths: every F_* is 8, two heads, 12-hour slots so the
/// temporal table stays small.
pub(crate) fn tiny_config() -> ModelConfig {
    ModelConfig {
        input_steps: 2,
        output_steps: 2,
        delta_minutes: 720,
        f_input: 1,
        f_output: 1,
        f_fuse: 8,
        f_spatial_emb: 8,
        f_temporal_emb: 8,
        f_semantic: 8,
        f_adjacent: 8,
        f_reach: 8,
        f_enc_hidden: 8,
        f_dec_hidden: 8,
        f_attn: 8,
        heads: 2,
        seed: 11,
        ..ModelConfig::default()
    }
}

pub(crate) struct Toy {
    pub model: MsgcModel,
    pub bundle: CorrelationBundle,
    pub window: Window,
    pub travel: Array,
}

pub(crate) fn rand_array(shape: &[usize], lo: f64, hi: f64, rng: &mut StdRng) -> Array {
    let n: usize = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub(crate) fn toy(n: usize, config: ModelConfig, seed: u64) -> Toy {
    let mut rng = StdRng::seed_from_u64(seed);
    let p = config.input_steps;
    let q = config.output_steps;
    let slots = config.slots_per_day();

    let mut travel = rand_array(&[n, n], 0.0, 4.0 * config.delta_minutes as f64, &mut rng);
    for i in 0..n {
        travel.set(i, i, 0.0);
    }
    let mut adj_trend = Array::zeros(&[n, n]);
    for i in 0..n {
        for j in (i + 1)..n {
            let v: f64 = rng.random_range(0.0..1.0);
            adj_trend.set(i, j, v);
            adj_trend.set(j, i, v);
        }
    }
    let sp = rand_array(&[n, config.f_spatial_emb], -1.0, 1.0, &mut rng);
    let tp = rand_array(&[7 * slots, config.f_temporal_emb], -1.0, 1.0, &mut rng);

    let window = Window {
        start: 0,
        x: (0..p).map(|_| rand_array(&[n, config.f_input], -1.5, 1.5, &mut rng)).collect(),
        y: (0..q).map(|_| rand_array(&[n, config.f_output], -1.5, 1.5, &mut rng)).collect(),
        y_mask: (0..q).map(|_| Array::ones(&[n, config.f_output])).collect(),
        t_idx: (0..p + q).collect(),
        y0: rand_array(&[n, config.f_output], -1.5, 1.5, &mut rng),
    };

    let bundle =
        CorrelationBundle::from_parts(&travel, &config, adj_trend, sp, tp).expect("toy bundle");
    let model = MsgcModel::new(config).expect("toy model");
    Toy {
        model,
        bundle,
        window,
        travel,
    }
}

/// Masked-MAE loss of one window in evaluation mode.
pub(crate) fn window_loss(model: &MsgcModel, bundle: &CorrelationBundle, window: &Window) -> f64 {
    use crate::tensor::Tape;
    use crate::training::masked_mae;
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let out = model
        .forward(&tape, &bound, window, bundle, None, false)
        .expect("forward");
    let targets: Vec<_> = window.y.iter().map(|y| tape.leaf(y.clone())).collect();
    let masks: Vec<_> = window.y_mask.iter().map(|m| tape.leaf(m.clone())).collect();
    masked_mae(&out.preds, &targets, &masks)
        .expect("loss")
        .value()
        .data()[0]
}
