//! The full forward model: multi-view feature fusion, three spatial GCN
//! branches, and a GRU encoder/decoder with multi-head temporal attention.
//!
//! All recurrences run per node with weights shared across nodes, batched as
//! N-row matrices. Ablation switches blank a branch's block while keeping
//! every shape fixed, so a disabled branch's parameters and inputs can never
//! reach the output.

mod checkpoint;
mod params;

pub use checkpoint::Checkpoint;
pub use params::{BoundParams, ParamStore};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::config::ModelConfig;
use crate::correlation::{
    adjacent_trend_scores, gcn_two_layer, reachability_gcn, reachability_stack_from_travel,
    semantic_attention, SemanticWeights,
};
use crate::data::{Window, WindowedDataset};
use crate::error::{Error, Result};
use crate::graph::{normalized_matrix, TrafficGraph};
use crate::tensor::{concat, Array, Tape, Tensor};

#[derive(Debug, Clone, Copy)]
struct GcnIdx {
    w0: usize,
    w1: usize,
}

#[derive(Debug, Clone, Copy)]
struct GruIdx {
    w_z: usize,
    b_z: usize,
    w_r: usize,
    b_r: usize,
    w_h: usize,
    b_h: usize,
}

#[derive(Debug, Clone, Copy)]
struct HeadIdx {
    w: usize,
    v: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    fuse_wx: usize,
    fuse_wt: usize,
    fuse_wi: usize,
    sem_wk1: usize,
    sem_wk2: usize,
    sem_wq1: usize,
    sem_wq2: usize,
    sem_gcn: GcnIdx,
    adj_gcn: GcnIdx,
    reach_gcn: GcnIdx,
    enc_in: usize,
    enc: Vec<GruIdx>,
    attn_heads: Vec<HeadIdx>,
    attn_comb: usize,
    dec_in: usize,
    dec: Vec<GruIdx>,
    out_w: usize,
}

/// Everything constant across forward passes: the normalized adjacent-trend
/// matrix, the reachability stack in consumable form, and the frozen
/// embeddings.
#[derive(Debug, Clone)]
pub struct CorrelationBundle {
    /// Raw adjacent-trend scores (for inspection dumps).
    pub adj_trend: Array,
    /// Spectral-normalized trend matrix consumed by the GCN.
    pub adj_trend_norm: Array,
    /// `[q][p]` matrices, already transformed when `attention_laplacian` is
    /// set.
    pub reach: Vec<Vec<Array>>,
    /// Spatial embedding, one row per node.
    pub sp: Array,
    /// Temporal embedding, one row per weekly slot.
    pub tp: Array,
}

impl CorrelationBundle {
    /// Assemble from the graph, the training split of the dataset, and the
    /// frozen embeddings. Uses only training rows for the trend scores.
    pub fn build(
        graph: &TrafficGraph,
        ds: &WindowedDataset,
        config: &ModelConfig,
        sp: Array,
        tp: Array,
    ) -> Result<Self> {
        let n = graph.n_nodes();
        if sp.shape() != [n, config.f_spatial_emb] {
            return Err(Error::dimension("spatial embedding", sp.shape(), &[n, config.f_spatial_emb]));
        }
        let week_slots = 7 * config.slots_per_day();
        if tp.shape() != [week_slots, config.f_temporal_emb] {
            return Err(Error::dimension(
                "temporal embedding",
                tp.shape(),
                &[week_slots, config.f_temporal_emb],
            ));
        }
        let (hist, hist_mask, train_rows) = ds.training_history();
        let adj_trend = adjacent_trend_scores(
            hist,
            train_rows,
            n,
            ds.table.f_input(),
            graph.adjacency(),
            Some(hist_mask),
        )?;
        Self::from_parts(graph.travel_time()?, config, adj_trend, sp, tp)
    }

    /// Assemble with an already-computed trend matrix (checkpoint reload).
    pub fn from_parts(
        travel_time: &Array,
        config: &ModelConfig,
        adj_trend: Array,
        sp: Array,
        tp: Array,
    ) -> Result<Self> {
        let stack = reachability_stack_from_travel(
            travel_time,
            config.delta_minutes as f64,
            config.input_steps,
            config.output_steps,
        )?;
        let reach = (0..config.output_steps)
            .map(|q| {
                (0..config.input_steps)
                    .map(|p| {
                        let m = stack.matrix(q, p);
                        if config.attention_laplacian {
                            normalized_matrix(m)
                        } else {
                            m.clone()
                        }
                    })
                    .collect()
            })
            .collect();
        let adj_trend_norm = normalized_matrix(&adj_trend);
        Ok(Self {
            adj_trend,
            adj_trend_norm,
            reach,
            sp,
            tp,
        })
    }
}

/// Per-forward diagnostics: semantic attention per input step and temporal
/// attention weights per output step per head (each node x P).
#[derive(Debug, Clone, Default)]
pub struct Diagnostics {
    pub semantic: Vec<Array>,
    pub attention: Vec<Vec<Array>>,
}

pub struct ForwardOutput<'t> {
    pub preds: Vec<Tensor<'t>>,
    pub diag: Diagnostics,
}

/// The model: a config plus its parameter store.
#[derive(Debug, Clone)]
pub struct MsgcModel {
    config: ModelConfig,
    store: ParamStore,
    layout: Layout,
}

impl MsgcModel {
    /// Fresh parameters from the config seed: Glorot-uniform weights, zero
    /// biases, in a fixed creation order.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        rng.set_stream(INIT_STREAM);
        let mut store = ParamStore::default();
        let c = &config;
        let f_cat = 3 * c.f_fuse;

        let fuse_wx = weight(&mut store, &mut rng, "fuse.w_x", c.f_fuse, c.f_input);
        let fuse_wt = weight(&mut store, &mut rng, "fuse.w_t", c.f_fuse, c.f_temporal_emb);
        let fuse_wi = weight(&mut store, &mut rng, "fuse.w_i", c.f_fuse, c.f_spatial_emb);

        // key/query width defaults to the fused block width
        let f_kq = c.f_fuse;
        let sem_wk1 = weight(&mut store, &mut rng, "sem.w_k1", f_kq, f_cat);
        let sem_wk2 = weight(&mut store, &mut rng, "sem.w_k2", f_kq, f_kq);
        let sem_wq1 = weight(&mut store, &mut rng, "sem.w_q1", f_kq, f_cat);
        let sem_wq2 = weight(&mut store, &mut rng, "sem.w_q2", f_kq, f_kq);

        let sem_gcn = gcn_params(&mut store, &mut rng, "sem_gcn", f_cat, c.f_semantic);
        let adj_gcn = gcn_params(&mut store, &mut rng, "adj_gcn", f_cat, c.f_adjacent);
        let reach_gcn = gcn_params(&mut store, &mut rng, "reach_gcn", f_cat, c.f_reach);

        let enc_in = weight(
            &mut store,
            &mut rng,
            "enc.w_in",
            c.f_enc_hidden,
            c.f_semantic + c.f_adjacent,
        );
        let enc = (0..2)
            .map(|l| {
                gru_params(&mut store, &mut rng, &format!("enc.l{l}"), c.f_enc_hidden, c.f_enc_hidden)
            })
            .collect();

        let attn_heads = (0..c.heads)
            .map(|h| HeadIdx {
                w: weight(
                    &mut store,
                    &mut rng,
                    &format!("attn.h{h}.w"),
                    c.f_attn,
                    c.f_enc_hidden + c.f_dec_hidden,
                ),
                v: weight(&mut store, &mut rng, &format!("attn.h{h}.v"), c.f_attn, 1),
            })
            .collect();
        let attn_comb = weight(
            &mut store,
            &mut rng,
            "attn.w_c",
            c.f_enc_hidden,
            c.heads * c.f_enc_hidden,
        );

        let dec_in = weight(
            &mut store,
            &mut rng,
            "dec.w_in",
            c.f_dec_hidden,
            c.f_enc_hidden + c.input_steps * c.f_reach + c.f_output,
        );
        let dec = (0..2)
            .map(|l| {
                gru_params(&mut store, &mut rng, &format!("dec.l{l}"), c.f_dec_hidden, c.f_dec_hidden)
            })
            .collect();

        let out_w = weight(&mut store, &mut rng, "out.w", c.f_output, c.f_dec_hidden);

        let layout = Layout {
            fuse_wx,
            fuse_wt,
            fuse_wi,
            sem_wk1,
            sem_wk2,
            sem_wq1,
            sem_wq2,
            sem_gcn,
            adj_gcn,
            reach_gcn,
            enc_in,
            enc,
            attn_heads,
            attn_comb,
            dec_in,
            dec,
            out_w,
        };
        Ok(Self {
            config,
            store,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        BoundParams::bind(&self.store, tape)
    }

    /// Fused features `relu(W_x x) ‖ relu(W_t tp) ‖ relu(W_i sp)` for every
    /// input step. Disabled attribute branches contribute zero blocks of the
    /// same width.
    pub(crate) fn fuse<'t>(
        &self,
        tape: &'t Tape,
        bound: &BoundParams<'t>,
        window: &Window,
        bundle: &CorrelationBundle,
    ) -> Result<Vec<Tensor<'t>>> {
        let c = &self.config;
        let l = &self.layout;
        let n = window.x[0].rows();
        let ones_col = tape.leaf(Array::ones(&[n, 1]));
        let zero_block = |f: usize| tape.leaf(Array::zeros(&[n, f]));
        let mut xst = Vec::with_capacity(c.input_steps);
        for p in 0..c.input_steps {
            let xp = tape
                .leaf(window.x[p].clone())
                .matmul(bound.get(l.fuse_wx).t())
                .map_err(|e| e.with_context(&format!("fuse step {}", p + 1)))?
                .relu();
            let tp_part = if c.use_temporal_emb {
                let row = Array::new(
                    vec![1, c.f_temporal_emb],
                    bundle.tp.row(window.t_idx[p]).to_vec(),
                )?;
                let projected = tape.leaf(row).matmul(bound.get(l.fuse_wt).t())?.relu();
                ones_col.matmul(projected)?
            } else {
                zero_block(c.f_fuse)
            };
            let sp_part = if c.use_spatial_emb {
                tape.leaf(bundle.sp.clone())
                    .matmul(bound.get(l.fuse_wi).t())?
                    .relu()
            } else {
                zero_block(c.f_fuse)
            };
            xst.push(concat(&[xp, tp_part, sp_part], 1)?);
        }
        Ok(xst)
    }

    /// Full pipeline for one window: fuse, the per-step GCN branches, the
    /// encoder, then per output step reachability convolution, temporal
    /// attention and the decoder. `teacher[q]` (training only) feeds ground
    /// truth `Y_q` instead of the model's own prediction into step q+1.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        bound: &BoundParams<'t>,
        window: &Window,
        bundle: &CorrelationBundle,
        teacher: Option<&[bool]>,
        collect_diag: bool,
    ) -> Result<ForwardOutput<'t>> {
        let c = &self.config;
        let l = &self.layout;
        let n = window.x[0].rows();
        let p_steps = c.input_steps;
        let q_steps = c.output_steps;
        if window.x.len() != p_steps || window.y0.shape() != [n, c.f_output] {
            return Err(Error::Contract(format!(
                "window does not match config: {} input steps, y0 {:?}",
                window.x.len(),
                window.y0.shape()
            )));
        }
        let mut diag = Diagnostics::default();
        let zero_block = |f: usize| tape.leaf(Array::zeros(&[n, f]));

        // fused features per input step
        let xst = self.fuse(tape, bound, window, bundle)?;

        // one-step spatial branches
        let sem_w = SemanticWeights {
            w_k1: bound.get(l.sem_wk1),
            w_k2: bound.get(l.sem_wk2),
            w_q1: bound.get(l.sem_wq1),
            w_q2: bound.get(l.sem_wq2),
        };
        let mut xf = Vec::with_capacity(p_steps);
        let mut xa = Vec::with_capacity(p_steps);
        for p in 0..p_steps {
            let ctx = |e: Error| e.with_context(&format!("input step {}", p + 1));
            if c.use_semantic {
                let af = semantic_attention(xst[p], &sem_w).map_err(ctx)?;
                if collect_diag {
                    diag.semantic.push(af.value());
                }
                let s = if c.attention_laplacian {
                    tape.leaf(Array::eye(n)).sub(af)?
                } else {
                    af
                };
                xf.push(gcn_two_layer(
                    s,
                    xst[p],
                    bound.get(l.sem_gcn.w0),
                    bound.get(l.sem_gcn.w1),
                )?);
            } else {
                xf.push(zero_block(c.f_semantic));
            }
            if c.use_adjacent {
                let s = tape.leaf(bundle.adj_trend_norm.clone());
                xa.push(gcn_two_layer(
                    s,
                    xst[p],
                    bound.get(l.adj_gcn.w0),
                    bound.get(l.adj_gcn.w1),
                )?);
            } else {
                xa.push(zero_block(c.f_adjacent));
            }
        }

        // two-layer GRU encoder over the projected branch features
        let enc_gru: Vec<GruTensors> = l.enc.iter().map(|g| GruTensors::bind(bound, g)).collect();
        let mut h_prev = vec![zero_block(c.f_enc_hidden); 2];
        let mut h_top = Vec::with_capacity(p_steps);
        for p in 0..p_steps {
            let inp = concat(&[xf[p], xa[p]], 1)?
                .matmul(bound.get(l.enc_in).t())
                .map_err(|e| e.with_context(&format!("encoder step {}", p + 1)))?;
            let h0 = gru_step(inp, h_prev[0], &enc_gru[0])?;
            let h1 = gru_step(h0, h_prev[1], &enc_gru[1])?;
            h_prev = vec![h0, h1];
            h_top.push(h1);
        }
        let context = h_top[p_steps - 1];

        // decoder with reachability features and temporal attention
        let dec_gru: Vec<GruTensors> = l.dec.iter().map(|g| GruTensors::bind(bound, g)).collect();
        let mut s_prev = vec![zero_block(c.f_dec_hidden); 2];
        let mut y_prev = tape.leaf(window.y0.clone());
        let mut preds = Vec::with_capacity(q_steps);
        for q in 0..q_steps {
            let ctx = |e: Error| e.with_context(&format!("output step {}", q + 1));
            let xr = if c.use_reachability {
                let mats: Vec<Tensor> = bundle.reach[q]
                    .iter()
                    .map(|m| tape.leaf(m.clone()))
                    .collect();
                reachability_gcn(
                    &mats,
                    &xst,
                    bound.get(l.reach_gcn.w0),
                    bound.get(l.reach_gcn.w1),
                )
                .map_err(ctx)?
            } else {
                zero_block(p_steps * c.f_reach)
            };

            let c_q = if c.use_temporal_attention {
                let heads: Vec<(Tensor, Tensor)> = l
                    .attn_heads
                    .iter()
                    .map(|h| (bound.get(h.w), bound.get(h.v)))
                    .collect();
                let (c_q, alphas) =
                    temporal_attention(&h_top, s_prev[1], &heads, bound.get(l.attn_comb))
                        .map_err(ctx)?;
                if collect_diag {
                    diag.attention.push(alphas.iter().map(|a| a.value()).collect());
                }
                c_q
            } else {
                context
            };

            let dec_inp = concat(&[c_q, xr, y_prev], 1)?
                .matmul(bound.get(l.dec_in).t())
                .map_err(ctx)?;
            let s0 = gru_step(dec_inp, s_prev[0], &dec_gru[0])?;
            let s1 = gru_step(s0, s_prev[1], &dec_gru[1])?;
            s_prev = vec![s0, s1];

            let head = s1.matmul(bound.get(l.out_w).t())?;
            let pred = if c.linear_head { head } else { head.relu() };
            preds.push(pred);

            if q + 1 < q_steps {
                let use_truth = teacher.map_or(false, |t| t[q]);
                y_prev = if use_truth {
                    tape.leaf(window.y[q].clone())
                } else {
                    pred
                };
            }
        }
        Ok(ForwardOutput { preds, diag })
    }
}

/// Distinct ChaCha stream for parameter init so it never aliases other
/// seeded consumers of the same run seed.
const INIT_STREAM: u64 = 0xA11C;

fn weight(
    store: &mut ParamStore,
    rng: &mut ChaCha20Rng,
    name: &str,
    rows: usize,
    cols: usize,
) -> usize {
    store.add(name, Array::glorot(rows, cols, rng))
}

fn gcn_params(
    store: &mut ParamStore,
    rng: &mut ChaCha20Rng,
    tag: &str,
    f_in: usize,
    f_out: usize,
) -> GcnIdx {
    GcnIdx {
        w0: weight(store, rng, &format!("{tag}.l0.w"), f_out, f_in),
        w1: weight(store, rng, &format!("{tag}.l1.w"), f_out, f_out),
    }
}

fn gru_params(
    store: &mut ParamStore,
    rng: &mut ChaCha20Rng,
    tag: &str,
    input: usize,
    hidden: usize,
) -> GruIdx {
    GruIdx {
        w_z: weight(store, rng, &format!("{tag}.w_z"), hidden, input + hidden),
        b_z: store.add(format!("{tag}.b_z"), Array::zeros(&[hidden])),
        w_r: weight(store, rng, &format!("{tag}.w_r"), hidden, input + hidden),
        b_r: store.add(format!("{tag}.b_r"), Array::zeros(&[hidden])),
        w_h: weight(store, rng, &format!("{tag}.w_h"), hidden, input + hidden),
        b_h: store.add(format!("{tag}.b_h"), Array::zeros(&[hidden])),
    }
}

pub(crate) struct GruTensors<'t> {
    pub(crate) w_z: Tensor<'t>,
    pub(crate) b_z: Tensor<'t>,
    pub(crate) w_r: Tensor<'t>,
    pub(crate) b_r: Tensor<'t>,
    pub(crate) w_h: Tensor<'t>,
    pub(crate) b_h: Tensor<'t>,
}

impl<'t> GruTensors<'t> {
    fn bind(bound: &BoundParams<'t>, idx: &GruIdx) -> Self {
        Self {
            w_z: bound.get(idx.w_z),
            b_z: bound.get(idx.b_z),
            w_r: bound.get(idx.w_r),
            b_r: bound.get(idx.b_r),
            w_h: bound.get(idx.w_h),
            b_h: bound.get(idx.b_h),
        }
    }
}

/// Multi-head temporal attention for one output step. Per head, score every
/// encoder state against the previous decoder state, softmax over input
/// steps per node, then combine the per-head weighted states through the
/// shared projection. Returns the context and each head's N x P weights.
pub(crate) fn temporal_attention<'t>(
    h_top: &[Tensor<'t>],
    s_prev: Tensor<'t>,
    heads: &[(Tensor<'t>, Tensor<'t>)],
    w_comb: Tensor<'t>,
) -> Result<(Tensor<'t>, Vec<Tensor<'t>>)> {
    let p_steps = h_top.len();
    let mut head_alphas = Vec::with_capacity(heads.len());
    for &(w_h, v_h) in heads {
        let scores: Vec<Tensor> = h_top
            .iter()
            .map(|&h| concat(&[h, s_prev], 1)?.matmul(w_h.t())?.tanh().matmul(v_h))
            .collect::<Result<_>>()?;
        head_alphas.push(concat(&scores, 1)?.softmax_rows()?);
    }
    let mut combined: Option<Tensor> = None;
    for p in 0..p_steps {
        let weighted: Vec<Tensor> = head_alphas
            .iter()
            .map(|alpha| h_top[p].mul_col_vec(alpha.slice_cols(p, 1)?))
            .collect::<Result<_>>()?;
        let term = concat(&weighted, 1)?.matmul(w_comb.t())?;
        combined = Some(match combined {
            Some(acc) => acc.add(term)?,
            None => term,
        });
    }
    Ok((combined.expect("P >= 1"), head_alphas))
}

/// Gated recurrent unit step over all nodes at once:
/// `h' = (1 - z) ⊙ h + z ⊙ tanh(W_h [x ‖ r ⊙ h] + b_h)`.
pub(crate) fn gru_step<'t>(x: Tensor<'t>, h: Tensor<'t>, p: &GruTensors<'t>) -> Result<Tensor<'t>> {
    let cat = concat(&[x, h], 1)?;
    let z = cat.matmul(p.w_z.t())?.add_row_vec(p.b_z)?.sigmoid();
    let r = cat.matmul(p.w_r.t())?.add_row_vec(p.b_r)?.sigmoid();
    let cat2 = concat(&[x, r.mul(h)?], 1)?;
    let candidate = cat2.matmul(p.w_h.t())?.add_row_vec(p.b_h)?.tanh();
    let keep = z.scale(-1.0).add_scalar(1.0);
    keep.mul(h)?.add(z.mul(candidate)?)
}

#[cfg(test)]
pub(crate) mod test_support;
