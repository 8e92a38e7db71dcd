//! Seeded generators and the finite-difference oracle shared by the unit
//! and integration test suites. Nothing here is used by the production
//! paths; the oracle deliberately evaluates models only through their
//! forward values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Edge, Graph, GraphDocument, Permutation};
use crate::nn::DTensor;

/// Seeded RNG for tests.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random connected graph: a random spanning tree plus `extra_edges`
/// additional distinct edges, with uniform random features.
pub fn random_connected_graph(
    rng: &mut ChaCha8Rng,
    n: usize,
    extra_edges: usize,
    node_width: usize,
    edge_width: usize,
) -> Graph {
    assert!(n >= 1);
    let mut present = vec![vec![false; n]; n];
    let mut edges = Vec::new();
    for i in 1..n {
        let j = rng.gen_range(0..i);
        present[i][j] = true;
        present[j][i] = true;
        edges.push((j, i));
    }
    let max_extra = n * (n - 1) / 2 - edges.len();
    let mut added = 0;
    let mut attempts = 0;
    while added < extra_edges.min(max_extra) && attempts < 1000 {
        attempts += 1;
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        if a == b || present[a][b] {
            continue;
        }
        present[a][b] = true;
        present[b][a] = true;
        edges.push((a.min(b), a.max(b)));
        added += 1;
    }
    graph_with_random_features(rng, n, &edges, node_width, edge_width)
}

/// Random graph that may be disconnected: each candidate edge kept with
/// probability `p`.
pub fn random_graph(
    rng: &mut ChaCha8Rng,
    n: usize,
    p: f64,
    node_width: usize,
    edge_width: usize,
) -> Graph {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.gen::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    graph_with_random_features(rng, n, &edges, node_width, edge_width)
}

fn graph_with_random_features(
    rng: &mut ChaCha8Rng,
    n: usize,
    edges: &[(usize, usize)],
    node_width: usize,
    edge_width: usize,
) -> Graph {
    let nodes = (0..n)
        .map(|_| (0..node_width).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let edges = edges
        .iter()
        .map(|&(src, dst)| Edge {
            src,
            dst,
            feat: (0..edge_width).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        })
        .collect();
    Graph::from_document(GraphDocument {
        nodes,
        edges,
        target: None,
        positional: None,
    })
    .unwrap()
}

/// Uniformly random permutation via Fisher-Yates.
pub fn random_permutation(rng: &mut ChaCha8Rng, n: usize) -> Permutation {
    let mut mapping: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        mapping.swap(i, j);
    }
    Permutation::new(mapping).unwrap()
}

/// Row action of a permutation on flat `(n, c)` data.
pub fn permute_rows_flat(sigma: &Permutation, data: &[f64], n: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..n {
        let ti = sigma.map(i);
        out[ti * c..(ti + 1) * c].copy_from_slice(&data[i * c..(i + 1) * c]);
    }
    out
}

/// Conjugation action on flat `(n, n, c)` data.
pub fn conjugate_tensor3_flat(sigma: &Permutation, data: &[f64], n: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..n {
        for j in 0..n {
            let (ti, tj) = (sigma.map(i), sigma.map(j));
            for ch in 0..c {
                out[(ti * n + tj) * c + ch] = data[(i * n + j) * c + ch];
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .fold(0.0, |m, (&x, &y)| m.max((x - y).abs()))
}

/// Relative error with an absolute floor: `|a-b| / max(|a|+|b|, 1e-4)`.
/// The floor keeps near-zero gradient pairs from amplifying central
/// difference round-off into spurious failures.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-4)
}

/// Central finite-difference check of `d loss / d param` for every entry of
/// every listed parameter. `loss_fn` must rebuild the forward pass from the
/// parameters' current values. Returns the worst relative error observed.
pub fn finite_diff_max_rel_error(
    params: &[&DTensor],
    analytic: &[Vec<f64>],
    step: f64,
    mut loss_fn: impl FnMut() -> f64,
) -> f64 {
    assert_eq!(params.len(), analytic.len());
    let mut worst: f64 = 0.0;
    for (param, grads) in params.iter().zip(analytic) {
        assert_eq!(param.len(), grads.len(), "gradient length mismatch");
        for i in 0..param.len() {
            param.nudge(i, step);
            let plus = loss_fn();
            param.nudge(i, -2.0 * step);
            let minus = loss_fn();
            param.nudge(i, step);
            let fd = (plus - minus) / (2.0 * step);
            worst = worst.max(rel_error(fd, grads[i]));
        }
    }
    worst
}

/// Convenience wrapper: run backward once, then compare against central
/// differences for the given parameters.
pub fn check_gradients(
    params: &[&DTensor],
    build_loss: impl Fn() -> DTensor,
    step: f64,
) -> f64 {
    for p in params {
        p.zero_grad();
    }
    let loss = build_loss();
    loss.backward().expect("backward failed in gradient check");
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();
    finite_diff_max_rel_error(params, &analytic, step, || build_loss().item())
}
