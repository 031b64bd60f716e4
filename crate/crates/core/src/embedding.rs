//! Random-walk graph embeddings: biased second-order walks over the traffic
//! graph for spatial vectors, first-order walks over the weekly slot line
//! graph for temporal vectors, and a shared skip-gram trainer with negative
//! sampling. Embeddings are precomputed and frozen; the model never
//! fine-tunes them.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::config::EmbeddingConfig;
use crate::error::{Error, Result};
use crate::tensor::Array;

/// Biased second-order random walks. The unnormalized weight of stepping to
/// candidate `x` from (previous `t`, current `v`) is
/// `w(v,x) * { 1/p if x = t; 1 if x adjacent to t; 1/q otherwise }`.
/// The first step is drawn by edge weight alone. Walks truncate at sinks;
/// an isolated start yields a single-node walk.
pub fn random_walks(
    adjacency: &Array,
    walks_per_node: usize,
    walk_length: usize,
    p: f64,
    q: f64,
    seed: u64,
) -> Vec<Vec<usize>> {
    assert!(walk_length >= 2, "walk_length must be >= 2");
    assert!(p > 0.0 && q > 0.0, "p and q must be positive");
    let n = adjacency.rows();
    let neighbors: Vec<Vec<(usize, f64)>> = (0..n)
        .map(|v| {
            (0..n)
                .filter(|&x| adjacency.at(v, x) > 0.0)
                .map(|x| (x, adjacency.at(v, x)))
                .collect()
        })
        .collect();

    let mut walks = Vec::with_capacity(n * walks_per_node);
    for start in 0..n {
        for w in 0..walks_per_node {
            // independent stream per (node, walk) so walk generation could
            // shard across workers without changing output
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            rng.set_stream((start * walks_per_node + w) as u64 + 1);
            walks.push(one_walk(&neighbors, adjacency, start, walk_length, p, q, &mut rng));
        }
    }
    walks
}

fn one_walk(
    neighbors: &[Vec<(usize, f64)>],
    adjacency: &Array,
    start: usize,
    walk_length: usize,
    p: f64,
    q: f64,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let mut walk = vec![start];
    while walk.len() < walk_length {
        let cur = *walk.last().unwrap();
        let nbrs = &neighbors[cur];
        if nbrs.is_empty() {
            break;
        }
        let next = if walk.len() == 1 {
            weighted_pick(nbrs.iter().map(|&(x, w)| (x, w)), rng)
        } else {
            let prev = walk[walk.len() - 2];
            weighted_pick(
                nbrs.iter().map(|&(x, w)| {
                    let bias = if x == prev {
                        1.0 / p
                    } else if adjacency.at(prev, x) > 0.0 {
                        1.0
                    } else {
                        1.0 / q
                    };
                    (x, w * bias)
                }),
                rng,
            )
        };
        walk.push(next);
    }
    walk
}

fn weighted_pick(items: impl Iterator<Item = (usize, f64)>, rng: &mut impl Rng) -> usize {
    let collected: Vec<(usize, f64)> = items.collect();
    let total: f64 = collected.iter().map(|&(_, w)| w).sum();
    let mut draw = rng.random_range(0.0..total);
    for &(x, w) in &collected {
        if draw < w {
            return x;
        }
        draw -= w;
    }
    collected.last().unwrap().0
}

/// Skip-gram with negative sampling over a walk corpus. Loss per pair is
/// `-log s(u_c · v_w) - sum_neg log s(-u_n · v_w)`; the input-side vectors
/// are returned. Zero epochs returns the seeded initialization unchanged.
pub fn skipgram_train(
    walks: &[Vec<usize>],
    vocab: usize,
    dims: usize,
    window: usize,
    negatives: usize,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<Array> {
    if walks.iter().all(Vec::is_empty) {
        return Err(Error::Embedding("empty walk corpus".into()));
    }
    assert!(dims >= 1);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    let mut input = vec![0.0; vocab * dims];
    for v in input.iter_mut() {
        *v = (rng.random_range(0.0..1.0) - 0.5) / dims as f64;
    }
    let mut output = vec![0.0; vocab * dims];

    // unigram^0.75 negative-sampling distribution over the corpus
    let mut counts = vec![0.0f64; vocab];
    for walk in walks {
        for &tok in walk {
            counts[tok] += 1.0;
        }
    }
    let mut cum = Vec::with_capacity(vocab);
    let mut acc = 0.0;
    for c in &counts {
        acc += c.powf(0.75);
        cum.push(acc);
    }
    if acc <= 0.0 {
        return Err(Error::Embedding("empty walk corpus".into()));
    }
    let sample_neg = |rng: &mut ChaCha20Rng| -> usize {
        let draw = rng.random_range(0.0..acc);
        cum.partition_point(|&c| c <= draw).min(vocab - 1)
    };

    let total_centers: usize = walks.iter().map(Vec::len).sum::<usize>() * epochs.max(1);
    let mut processed = 0usize;
    for _epoch in 0..epochs {
        for walk in walks {
            for (c_pos, &center) in walk.iter().enumerate() {
                let cur_lr = lr * (1.0 - processed as f64 / total_centers as f64).max(1e-4);
                processed += 1;
                let lo = c_pos.saturating_sub(window);
                let hi = (c_pos + window).min(walk.len() - 1);
                for ctx_pos in lo..=hi {
                    if ctx_pos == c_pos {
                        continue;
                    }
                    let ctx = walk[ctx_pos];
                    let vw = center * dims;
                    let mut e = vec![0.0; dims];
                    for k in 0..=negatives {
                        let (target, label) = if k == 0 {
                            (ctx, 1.0)
                        } else {
                            let neg = sample_neg(&mut rng);
                            if neg == ctx {
                                continue;
                            }
                            (neg, 0.0)
                        };
                        let ut = target * dims;
                        let dot: f64 = (0..dims).map(|d| output[ut + d] * input[vw + d]).sum();
                        let f = 1.0 / (1.0 + (-dot).exp());
                        let g = (label - f) * cur_lr;
                        for d in 0..dims {
                            e[d] += g * output[ut + d];
                            output[ut + d] += g * input[vw + d];
                        }
                    }
                    for d in 0..dims {
                        input[vw + d] += e[d];
                    }
                }
            }
        }
    }
    Array::new(vec![vocab, dims], input)
}

/// Adjacency of the weekly slot graph: all `7 * slots_per_day` slots joined
/// sequentially as a path, optionally closed into a cycle.
pub fn build_week_line_graph(slots_per_day: usize, wrap: bool) -> Array {
    assert!(slots_per_day >= 1);
    let n = 7 * slots_per_day;
    let mut a = Array::zeros(&[n, n]);
    for k in 0..n - 1 {
        a.set(k, k + 1, 1.0);
        a.set(k + 1, k, 1.0);
    }
    if wrap && n > 1 {
        a.set(n - 1, 0, 1.0);
        a.set(0, n - 1, 1.0);
    }
    a
}

/// Row index of slot `i` on weekday `d` (0 = Monday) in the temporal
/// embedding matrix.
pub fn temporal_index(day_of_week: usize, slot_of_day: usize, slots_per_day: usize) -> Result<usize> {
    if day_of_week > 6 || slot_of_day >= slots_per_day {
        return Err(Error::Index(format!(
            "temporal index (day {day_of_week}, slot {slot_of_day}) out of range for T = {slots_per_day}"
        )));
    }
    Ok(day_of_week * slots_per_day + slot_of_day)
}

/// node2vec over the traffic adjacency.
pub fn spatial_embedding(
    adjacency: &Array,
    dims: usize,
    cfg: &EmbeddingConfig,
    seed: u64,
) -> Result<Array> {
    let walks = random_walks(
        adjacency,
        cfg.walks_per_node,
        cfg.walk_length,
        cfg.return_p,
        cfg.in_out_q,
        seed,
    );
    skipgram_train(
        &walks,
        adjacency.rows(),
        dims,
        cfg.window,
        cfg.negatives,
        cfg.epochs,
        cfg.learning_rate,
        seed,
    )
}

/// DeepWalk (first-order walks) over the weekly line graph.
pub fn temporal_embedding(
    slots_per_day: usize,
    wrap: bool,
    dims: usize,
    cfg: &EmbeddingConfig,
    seed: u64,
) -> Result<Array> {
    let line = build_week_line_graph(slots_per_day, wrap);
    let walks = random_walks(&line, cfg.walks_per_node, cfg.walk_length, 1.0, 1.0, seed);
    skipgram_train(
        &walks,
        line.rows(),
        dims,
        cfg.window,
        cfg.negatives,
        cfg.epochs,
        cfg.learning_rate,
        seed,
    )
}

/// First column id/index, then one column per embedding dimension.
pub fn write_embedding_csv(path: &Path, labels: &[String], m: &Array) -> Result<()> {
    if labels.len() != m.rows() {
        return Err(Error::dimension("embedding labels", &[labels.len()], m.shape()));
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string()];
    header.extend((0..m.cols()).map(|j| format!("e{j}")));
    w.write_record(&header)?;
    for (i, label) in labels.iter().enumerate() {
        let mut row = vec![label.clone()];
        row.extend(m.row(i).iter().map(|v| format!("{v}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_embedding_csv(path: &Path) -> Result<(Vec<String>, Array)> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut labels = Vec::new();
    let mut data = Vec::new();
    let mut cols = None;
    for record in rdr.records() {
        let record = record?;
        if record.is_empty() {
            continue;
        }
        labels.push(record[0].to_string());
        let row: Vec<f64> = record
            .iter()
            .skip(1)
            .map(|v| {
                v.trim()
                    .parse()
                    .map_err(|_| Error::Ingestion(format!("{}: bad value `{v}`", path.display())))
            })
            .collect::<Result<_>>()?;
        match cols {
            None => cols = Some(row.len()),
            Some(c) if c != row.len() => {
                return Err(Error::Ingestion(format!("{}: ragged rows", path.display())))
            }
            _ => {}
        }
        data.extend(row);
    }
    let cols = cols.ok_or_else(|| Error::Ingestion(format!("{}: empty file", path.display())))?;
    let rows = labels.len();
    Ok((labels, Array::new(vec![rows, cols], data)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn complete_graph(n: usize) -> Array {
        let mut a = Array::ones(&[n, n]);
        for i in 0..n {
            a.set(i, i, 0.0);
        }
        a
    }

    fn path_graph(n: usize) -> Array {
        let mut a = Array::zeros(&[n, n]);
        for k in 0..n - 1 {
            a.set(k, k + 1, 1.0);
            a.set(k + 1, k, 1.0);
        }
        a
    }

    #[test]
    fn walks_stay_within_components() {
        // two disconnected triangles
        let mut a = Array::zeros(&[6, 6]);
        for (i, j) in [(0, 1), (1, 2), (2, 0), (3, 4), (4, 5), (5, 3)] {
            a.set(i, j, 1.0);
            a.set(j, i, 1.0);
        }
        for walk in random_walks(&a, 4, 12, 1.0, 1.0, 5) {
            let first_half = walk[0] < 3;
            assert!(walk.iter().all(|&v| (v < 3) == first_half));
        }
    }

    #[test]
    fn isolated_start_gives_single_node_walk() {
        let mut a = Array::zeros(&[3, 3]);
        a.set(0, 1, 1.0);
        a.set(1, 0, 1.0);
        let walks = random_walks(&a, 2, 5, 1.0, 1.0, 3);
        for walk in walks.iter().filter(|w| w[0] == 2) {
            assert_eq!(walk, &vec![2]);
        }
    }

    #[test]
    fn length_two_walks_are_start_plus_neighbor() {
        let a = path_graph(4);
        for walk in random_walks(&a, 3, 2, 1.0, 1.0, 9) {
            assert_eq!(walk.len(), 2);
            assert!(a.at(walk[0], walk[1]) > 0.0);
        }
    }

    #[test]
    fn uniform_first_order_transitions_chi_squared() {
        // p = q = 1 on an unweighted complete graph: next-node frequencies
        // from any state are uniform. Chi-squared against uniform over
        // >= 1e5 transitions; 0.999 quantile for df = 3 is 16.27.
        let a = complete_graph(4);
        let walks = random_walks(&a, 100, 300, 1.0, 1.0, 17);
        let mut counts = [[0u64; 4]; 4];
        let mut total = 0u64;
        for walk in &walks {
            for pair in walk.windows(2) {
                counts[pair[0]][pair[1]] += 1;
                total += 1;
            }
        }
        assert!(total >= 100_000, "only {total} transitions");
        for (v, row) in counts.iter().enumerate() {
            let from: u64 = row.iter().sum();
            let expected = from as f64 / 3.0;
            let chi2: f64 = row
                .iter()
                .enumerate()
                .filter(|&(x, _)| x != v)
                .map(|(_, &c)| {
                    let d = c as f64 - expected;
                    d * d / expected
                })
                .sum();
            assert!(chi2 < 16.27, "node {v}: chi2 = {chi2}");
        }
    }

    #[test]
    fn return_parameter_biases_backtracking() {
        // tiny p makes returning to the previous node overwhelmingly likely
        let a = complete_graph(5);
        let walks = random_walks(&a, 20, 50, 0.01, 1.0, 23);
        let mut returns = 0u64;
        let mut total = 0u64;
        for walk in &walks {
            for w in walk.windows(3) {
                total += 1;
                if w[2] == w[0] {
                    returns += 1;
                }
            }
        }
        assert!(returns as f64 / total as f64 > 0.9);
    }

    #[test]
    fn skipgram_output_shape_and_zero_epochs() {
        let a = path_graph(6);
        let walks = random_walks(&a, 2, 10, 1.0, 1.0, 7);
        let m = skipgram_train(&walks, 6, 9, 3, 2, 1, 0.025, 7).unwrap();
        assert_eq!(m.shape(), &[6, 9]);

        let init = skipgram_train(&walks, 6, 9, 3, 2, 0, 0.025, 7).unwrap();
        let init2 = skipgram_train(&walks, 6, 9, 3, 2, 0, 0.025, 7).unwrap();
        assert_eq!(init, init2);
        assert!(init.max_abs_diff(&m) > 0.0);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(skipgram_train(&[], 4, 8, 3, 2, 1, 0.025, 1).is_err());
        assert!(skipgram_train(&[vec![], vec![]], 4, 8, 3, 2, 1, 0.025, 1).is_err());
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb).max(1e-12)
    }

    #[test]
    fn path_graph_neighbors_more_similar_than_distant_nodes() {
        let n = 50;
        let a = path_graph(n);
        let (mut near, mut far) = (Vec::new(), Vec::new());
        for seed in 0..5u64 {
            let walks = random_walks(&a, 6, 40, 1.0, 1.0, seed);
            let m = skipgram_train(&walks, n, 16, 5, 5, 3, 0.025, seed).unwrap();
            for i in 0..n - 1 {
                near.push(cosine(m.row(i), m.row(i + 1)));
            }
            for i in 0..n {
                for j in (i + 10..n).step_by(7) {
                    far.push(cosine(m.row(i), m.row(j)));
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(
            mean(&near) > mean(&far),
            "near {} vs far {}",
            mean(&near),
            mean(&far)
        );
    }

    #[test]
    fn week_line_graph_structure() {
        let a = build_week_line_graph(1, false);
        assert_eq!(a.shape(), &[7, 7]);
        let edges: f64 = a.sum() / 2.0;
        assert_eq!(edges, 6.0);

        // degree sequence: endpoints 1, interior 2 (checked at T = 288)
        let a = build_week_line_graph(288, false);
        let deg = a.row_sums();
        assert_eq!(deg[0], 1.0);
        assert_eq!(deg[7 * 288 - 1], 1.0);
        assert!(deg[1..7 * 288 - 1].iter().all(|&d| d == 2.0));

        let wrapped = build_week_line_graph(288, true);
        assert!(wrapped.row_sums().iter().all(|&d| d == 2.0));
    }

    #[test]
    fn temporal_index_arithmetic() {
        assert_eq!(temporal_index(0, 0, 288).unwrap(), 0);
        assert_eq!(temporal_index(6, 287, 288).unwrap(), 7 * 288 - 1);
        assert_eq!(temporal_index(2, 5, 288).unwrap(), 581);
        assert!(temporal_index(7, 0, 288).is_err());
        assert!(temporal_index(0, 288, 288).is_err());
    }

    #[test]
    fn embeddings_are_seed_deterministic() {
        let a = path_graph(8);
        let cfg = EmbeddingConfig {
            walks_per_node: 3,
            walk_length: 10,
            window: 3,
            negatives: 2,
            epochs: 2,
            ..EmbeddingConfig::default()
        };
        let m1 = spatial_embedding(&a, 8, &cfg, 42).unwrap();
        let m2 = spatial_embedding(&a, 8, &cfg, 42).unwrap();
        assert_eq!(m1, m2);
        let m3 = spatial_embedding(&a, 8, &cfg, 43).unwrap();
        assert!(m1.max_abs_diff(&m3) > 0.0);
    }

    #[test]
    fn embedding_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sp.csv");
        let labels: Vec<String> = (0..4).map(|i| format!("n{i}")).collect();
        let m = Array::new(vec![4, 3], (0..12).map(|v| v as f64 * 0.137 - 0.5).collect()).unwrap();
        write_embedding_csv(&path, &labels, &m).unwrap();
        let (back_labels, back) = read_embedding_csv(&path).unwrap();
        assert_eq!(back_labels, labels);
        assert_eq!(back, m);
    }
}
