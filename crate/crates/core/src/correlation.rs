//! The three spatial correlation views and the graph convolution that
//! consumes them.
//!
//! - Semantic: per-step key/query attention over fused features, dynamic and
//!   global, differentiable end to end.
//! - Adjacent trend: static co-movement counts between geographically
//!   adjacent nodes, computed once from raw training history.
//! - Reachability: cross-step scores from the fractional overlap between a
//!   trip's arrival window (shifted by travel time) and the prediction
//!   window. Pure graph knowledge; precomputed before training.

use crate::error::{Error, Result};
use crate::graph::TrafficGraph;
use crate::tensor::{concat, Array, Tensor};

/// Key/query projector weights, shared by all nodes and steps.
#[derive(Clone, Copy)]
pub struct SemanticWeights<'t> {
    pub w_k1: Tensor<'t>,
    pub w_k2: Tensor<'t>,
    pub w_q1: Tensor<'t>,
    pub w_q2: Tensor<'t>,
}

/// Dynamic attention matrix for one step: row i holds the softmaxed
/// influences of every node j on node i. Gradients flow into the projector
/// weights and the fused features.
pub fn semantic_attention<'t>(xst: Tensor<'t>, w: &SemanticWeights<'t>) -> Result<Tensor<'t>> {
    let k = xst.matmul(w.w_k1.t())?.relu().matmul(w.w_k2.t())?;
    let q = xst.matmul(w.w_q1.t())?.relu().matmul(w.w_q2.t())?;
    let scores = k.matmul(q.t())?;
    scores.softmax_rows()
}

/// One graph convolution layer: `relu(S · X · W^T)`. `S` must already be in
/// its consumable form (normalized adjacency, or an attention matrix used
/// directly).
pub fn gcn_layer<'t>(s: Tensor<'t>, x: Tensor<'t>, w: Tensor<'t>) -> Result<Tensor<'t>> {
    Ok(s.matmul(x)?.matmul(w.t())?.relu())
}

/// Two stacked layers sharing the spatial matrix.
pub fn gcn_two_layer<'t>(
    s: Tensor<'t>,
    x: Tensor<'t>,
    w0: Tensor<'t>,
    w1: Tensor<'t>,
) -> Result<Tensor<'t>> {
    let h = gcn_layer(s, x, w0)?;
    gcn_layer(s, h, w1)
}

/// Reachability branch for one output step: convolve each input step's fused
/// features with its cross-step matrix, then concatenate over input steps.
pub fn reachability_gcn<'t>(
    step_matrices: &[Tensor<'t>],
    xst_steps: &[Tensor<'t>],
    w0: Tensor<'t>,
    w1: Tensor<'t>,
) -> Result<Tensor<'t>> {
    if step_matrices.len() != xst_steps.len() {
        return Err(Error::Contract(format!(
            "reachability gcn: {} matrices vs {} feature steps",
            step_matrices.len(),
            xst_steps.len()
        )));
    }
    let parts: Vec<Tensor<'t>> = step_matrices
        .iter()
        .zip(xst_steps)
        .map(|(&s, &x)| gcn_two_layer(s, x, w0, w1))
        .collect::<Result<_>>()?;
    concat(&parts, 1)
}

/// Static adjacent-trend matrix. For adjacent pairs, the fraction of
/// (feature, slot) cells where both nodes sit on the same side of their own
/// historical means; zero elsewhere. `history` is raw training-split values
/// laid out `[t][node][feature]`; `mask` (same layout) marks observed cells —
/// unobserved cells add no count while the denominator stays `F_I * Total`.
pub fn adjacent_trend_scores(
    history: &[f64],
    total: usize,
    n_nodes: usize,
    f_input: usize,
    adjacency: &Array,
    mask: Option<&[bool]>,
) -> Result<Array> {
    if total == 0 {
        return Err(Error::Contract("adjacent trend needs at least 1 slot".into()));
    }
    if history.len() != total * n_nodes * f_input {
        return Err(Error::dimension(
            "adjacent trend history",
            &[history.len()],
            &[total, n_nodes, f_input],
        ));
    }
    if let Some(m) = mask {
        if m.len() != history.len() {
            return Err(Error::dimension("adjacent trend mask", &[m.len()], &[history.len()]));
        }
    }
    let observed = |t: usize, i: usize, f: usize| -> bool {
        mask.map_or(true, |m| m[(t * n_nodes + i) * f_input + f])
    };
    let value = |t: usize, i: usize, f: usize| history[(t * n_nodes + i) * f_input + f];

    // per node per feature means over observed slots
    let mut means = vec![0.0f64; n_nodes * f_input];
    for i in 0..n_nodes {
        for f in 0..f_input {
            let mut sum = 0.0;
            let mut cnt = 0usize;
            for t in 0..total {
                if observed(t, i, f) {
                    sum += value(t, i, f);
                    cnt += 1;
                }
            }
            means[i * f_input + f] = if cnt > 0 { sum / cnt as f64 } else { 0.0 };
        }
    }

    let denom = (f_input * total) as f64;
    let mut scores = Array::zeros(&[n_nodes, n_nodes]);
    for i in 0..n_nodes {
        for j in 0..n_nodes {
            if i == j || adjacency.at(i, j) == 0.0 {
                continue;
            }
            let mut count = 0usize;
            for f in 0..f_input {
                let mi = means[i * f_input + f];
                let mj = means[j * f_input + f];
                for t in 0..total {
                    if !observed(t, i, f) || !observed(t, j, f) {
                        continue;
                    }
                    let above_i = value(t, i, f) >= mi;
                    let above_j = value(t, j, f) >= mj;
                    if above_i == above_j {
                        count += 1;
                    }
                }
            }
            scores.set(i, j, count as f64 / denom);
        }
    }
    Ok(scores)
}

/// Reachability score for an off-diagonal pair: the fraction of the trip
/// arrival window `[(p-1)δ + M, pδ + M]` that overlaps the prediction window
/// `[(P+q-1)δ, (P+q)δ]`, with output steps placed after all input steps on
/// one absolute axis. Steps are 1-based. Infinite travel time scores 0.
pub fn reachability_score(
    p: usize,
    q: usize,
    delta: f64,
    travel_minutes: f64,
    total_input_steps: usize,
) -> f64 {
    debug_assert!(p >= 1 && p <= total_input_steps);
    debug_assert!(q >= 1);
    debug_assert!(delta > 0.0);
    let arrive_lo = (p - 1) as f64 * delta + travel_minutes;
    let arrive_hi = p as f64 * delta + travel_minutes;
    let predict_lo = (total_input_steps + q - 1) as f64 * delta;
    let predict_hi = (total_input_steps + q) as f64 * delta;
    let overlap = (arrive_hi.min(predict_hi) - arrive_lo.max(predict_lo)).max(0.0);
    (overlap / delta).clamp(0.0, 1.0)
}

/// All Q x P cross-step matrices, materialized once per configuration.
/// Entry `[q][p][j][i]` scores the influence of context node i at input step
/// p on target node j at output step q; the diagonal is exactly 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ReachabilityStack {
    matrices: Vec<Vec<Array>>,
    delta: f64,
    input_steps: usize,
    output_steps: usize,
}

impl ReachabilityStack {
    pub fn input_steps(&self) -> usize {
        self.input_steps
    }

    pub fn output_steps(&self) -> usize {
        self.output_steps
    }

    /// Matrix for output step `q` and input step `p`, 0-based.
    pub fn matrix(&self, q: usize, p: usize) -> &Array {
        &self.matrices[q][p]
    }

    pub fn matrices_for_output(&self, q: usize) -> &[Array] {
        &self.matrices[q]
    }
}

pub fn build_reachability_stack(
    graph: &TrafficGraph,
    delta: f64,
    input_steps: usize,
    output_steps: usize,
) -> Result<ReachabilityStack> {
    reachability_stack_from_travel(graph.travel_time()?, delta, input_steps, output_steps)
}

/// Same construction from a bare travel-time matrix (minutes, infinite when
/// unreachable, zero diagonal).
pub fn reachability_stack_from_travel(
    travel: &Array,
    delta: f64,
    input_steps: usize,
    output_steps: usize,
) -> Result<ReachabilityStack> {
    if !travel.is_matrix() || travel.rows() != travel.cols() {
        return Err(Error::dimension("travel time", travel.shape(), &[]));
    }
    let n = travel.rows();
    let mut matrices = Vec::with_capacity(output_steps);
    for q in 1..=output_steps {
        let mut per_p = Vec::with_capacity(input_steps);
        for p in 1..=input_steps {
            let mut m = Array::zeros(&[n, n]);
            for j in 0..n {
                for i in 0..n {
                    let score = if i == j {
                        1.0
                    } else {
                        reachability_score(p, q, delta, travel.at(i, j), input_steps)
                    };
                    m.set(j, i, score);
                }
            }
            per_p.push(m);
        }
        matrices.push(per_p);
    }
    Ok(ReachabilityStack {
        matrices,
        delta,
        input_steps,
        output_steps,
    })
}
