//! Neural building blocks: affine maps, feed-forward stacks, softmax
//! attention, gated message passing, batch normalization, and dropout.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::tensor::{DTensor, NnError};
use crate::graph::Graph;

/// Train/eval switch threaded through every stochastic or stateful layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Pointwise nonlinearity selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(&self, x: &DTensor) -> DTensor {
        match self {
            Activation::Relu => x.relu(),
            Activation::Identity => x.clone(),
        }
    }
}

/// Directed edge index derived from an undirected graph: each stored edge
/// {a, b} contributes the entries (dst=a, src=b) and (dst=b, src=a), in
/// edge-list order. Message k flows from `src[k]` into `dst[k]`.
#[derive(Debug, Clone)]
pub struct EdgeIndex {
    pub src: Rc<Vec<usize>>,
    pub dst: Rc<Vec<usize>>,
    pub n_nodes: usize,
}

impl EdgeIndex {
    pub fn from_graph(g: &Graph) -> EdgeIndex {
        let mut src = Vec::with_capacity(2 * g.edges().len());
        let mut dst = Vec::with_capacity(2 * g.edges().len());
        for e in g.edges() {
            dst.push(e.src);
            src.push(e.dst);
            dst.push(e.dst);
            src.push(e.src);
        }
        EdgeIndex {
            src: Rc::new(src),
            dst: Rc::new(dst),
            n_nodes: g.n(),
        }
    }

    pub fn n_directed(&self) -> usize {
        self.src.len()
    }

    /// Edge features duplicated for both orientations, in index order.
    pub fn edge_features(&self, g: &Graph) -> DTensor {
        let w = g.edge_feature_width();
        let mut data = Vec::with_capacity(2 * g.edges().len() * w);
        for e in g.edges() {
            data.extend_from_slice(&e.feat);
            data.extend_from_slice(&e.feat);
        }
        DTensor::constant(&[2 * g.edges().len(), w], data)
    }
}

/// Affine map `x W^T + b` with Glorot-uniform weights and zero bias.
pub struct Linear {
    weight: DTensor,
    bias: DTensor,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Linear {
        let weight = store.glorot(
            &format!("{prefix}.weight"),
            &[out_dim, in_dim],
            in_dim,
            out_dim,
            rng,
        );
        let bias = store.zeros(&format!("{prefix}.bias"), out_dim);
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weight(&self) -> &DTensor {
        &self.weight
    }

    pub fn bias(&self) -> &DTensor {
        &self.bias
    }

    pub fn forward(&self, x: &DTensor) -> Result<DTensor, NnError> {
        if x.shape().len() != 2 || x.shape()[1] != self.in_dim {
            return Err(NnError::ShapeMismatch(format!(
                "linear expects (*, {}), got {:?}",
                self.in_dim,
                x.shape()
            )));
        }
        Ok(x.matmul(&self.weight.t()).add_row(&self.bias))
    }
}

/// Two-layer feed-forward block: `Linear -> ReLU -> Dropout -> Linear`.
pub struct FeedForward {
    fc1: Linear,
    fc2: Linear,
    dropout: Dropout,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        dropout_rate: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<FeedForward, NnError> {
        Ok(FeedForward {
            fc1: Linear::new(store, &format!("{prefix}.fc1"), in_dim, hidden, rng),
            fc2: Linear::new(store, &format!("{prefix}.fc2"), hidden, out_dim, rng),
            dropout: Dropout::new(dropout_rate)?,
        })
    }

    pub fn forward(
        &self,
        x: &DTensor,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<DTensor, NnError> {
        let h = self.fc1.forward(x)?.relu();
        let h = self.dropout.forward(&h, mode, rng)?;
        self.fc2.forward(&h)
    }
}

/// Scaled dot-product self-attention, `softmax(Q K^T / sqrt(d_o)) V` with
/// `Q = X Wq^T`, `K = X Wk^T`, `V = X Wv^T`. Attention weight rows sum to 1.
pub fn self_attention(
    x: &DTensor,
    wq: &DTensor,
    wk: &DTensor,
    wv: &DTensor,
) -> Result<DTensor, NnError> {
    if x.shape().len() != 2 {
        return Err(NnError::ShapeMismatch(format!(
            "attention input must be rank 2, got {:?}",
            x.shape()
        )));
    }
    let d = x.shape()[1];
    let d_o = wq.shape()[0];
    for (name, w) in [("wq", wq), ("wk", wk), ("wv", wv)] {
        if w.shape() != [d_o, d] {
            return Err(NnError::ShapeMismatch(format!(
                "{name} must be ({d_o}, {d}), got {:?}",
                w.shape()
            )));
        }
    }
    let q = x.matmul(&wq.t());
    let k = x.matmul(&wk.t());
    let v = x.matmul(&wv.t());
    let logits = q.matmul(&k.t()).scale(1.0 / (d_o as f64).sqrt());
    Ok(logits.softmax_rows().matmul(&v))
}

struct AttentionHead {
    wq: DTensor,
    wk: DTensor,
    wv: DTensor,
}

/// Multi-head attention: per-head scaled dot-product attention, heads
/// concatenated, then an affine output map. Dropout (when configured) acts
/// on the softmaxed attention weights in train mode.
pub struct MultiHeadAttention {
    heads: Vec<AttentionHead>,
    out: Linear,
    head_dim: usize,
    attn_dropout: Dropout,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        n_heads: usize,
        attn_dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<MultiHeadAttention, NnError> {
        if n_heads == 0 || dim % n_heads != 0 {
            return Err(NnError::Invalid(format!(
                "head count {n_heads} must divide width {dim}"
            )));
        }
        let head_dim = dim / n_heads;
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            heads.push(AttentionHead {
                wq: store.glorot(&format!("{prefix}.h{h}.wq"), &[head_dim, dim], dim, head_dim, rng),
                wk: store.glorot(&format!("{prefix}.h{h}.wk"), &[head_dim, dim], dim, head_dim, rng),
                wv: store.glorot(&format!("{prefix}.h{h}.wv"), &[head_dim, dim], dim, head_dim, rng),
            });
        }
        let out = Linear::new(store, &format!("{prefix}.out"), dim, dim, rng);
        Ok(MultiHeadAttention {
            heads,
            out,
            head_dim,
            attn_dropout: Dropout::new(attn_dropout)?,
        })
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn forward(
        &self,
        x: &DTensor,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<DTensor, NnError> {
        let outputs = multi_head_attention(
            x,
            &self
                .heads
                .iter()
                .map(|h| (&h.wq, &h.wk, &h.wv))
                .collect::<Vec<_>>(),
            &self.attn_dropout,
            mode,
            rng,
        )?;
        self.out.forward(&outputs)
    }
}

/// Per-head attention outputs concatenated along features. The output map
/// is applied by the caller (see [`MultiHeadAttention::forward`]).
pub fn multi_head_attention(
    x: &DTensor,
    heads: &[(&DTensor, &DTensor, &DTensor)],
    attn_dropout: &Dropout,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<DTensor, NnError> {
    if heads.is_empty() {
        return Err(NnError::EmptyInput("attention needs at least one head".into()));
    }
    let mut outputs = Vec::with_capacity(heads.len());
    for (wq, wk, wv) in heads {
        let d = x.shape()[1];
        let d_o = wq.shape()[0];
        for (name, w) in [("wq", *wq), ("wk", *wk), ("wv", *wv)] {
            if w.shape() != [d_o, d] {
                return Err(NnError::ShapeMismatch(format!(
                    "{name} must be ({d_o}, {d}), got {:?}",
                    w.shape()
                )));
            }
        }
        let q = x.matmul(&wq.t());
        let k = x.matmul(&wk.t());
        let v = x.matmul(&wv.t());
        let weights = q
            .matmul(&k.t())
            .scale(1.0 / (d_o as f64).sqrt())
            .softmax_rows();
        let weights = attn_dropout.forward(&weights, mode, rng)?;
        outputs.push(weights.matmul(&v));
    }
    Ok(DTensor::concat_last(&outputs))
}

/// Gated message-passing layer over directed edges.
///
/// Edge update: `e' = W1 x_dst + W2 x_src + W3 e`.
/// Node update: `x' = relu(U x + sum_over_incoming(gate ⊙ V x_src))` where
/// `gate = sigmoid(e') / (sum_over_incoming sigmoid(e') + eps)` per channel.
pub struct GatedGcn {
    u: DTensor,
    v: DTensor,
    w1: DTensor,
    w2: DTensor,
    w3: DTensor,
    node_in: usize,
    edge_in: usize,
    out_dim: usize,
}

const GATE_EPS: f64 = 1e-6;

impl GatedGcn {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        node_in: usize,
        edge_in: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> GatedGcn {
        let mut w = |name: &str, cols: usize, rng: &mut ChaCha8Rng| {
            store.glorot(&format!("{prefix}.{name}"), &[out_dim, cols], cols, out_dim, rng)
        };
        GatedGcn {
            u: w("u", node_in, rng),
            v: w("v", node_in, rng),
            w1: w("w1", node_in, rng),
            w2: w("w2", node_in, rng),
            w3: w("w3", edge_in, rng),
            node_in,
            edge_in,
            out_dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn forward(
        &self,
        x: &DTensor,
        e: &DTensor,
        edges: &EdgeIndex,
    ) -> Result<(DTensor, DTensor), NnError> {
        if x.shape().len() != 2 || x.shape()[1] != self.node_in {
            return Err(NnError::ShapeMismatch(format!(
                "gated layer expects node features (*, {}), got {:?}",
                self.node_in,
                x.shape()
            )));
        }
        if e.shape().len() != 2
            || e.shape()[1] != self.edge_in
            || e.shape()[0] != edges.n_directed()
        {
            return Err(NnError::ShapeMismatch(format!(
                "gated layer expects edge features ({}, {}), got {:?}",
                edges.n_directed(),
                self.edge_in,
                e.shape()
            )));
        }
        if x.shape()[0] != edges.n_nodes {
            return Err(NnError::ShapeMismatch(format!(
                "edge index covers {} nodes, features have {}",
                edges.n_nodes,
                x.shape()[0]
            )));
        }

        let x_dst = x.gather_rows(&edges.dst);
        let x_src = x.gather_rows(&edges.src);
        let e_new = x_dst
            .matmul(&self.w1.t())
            .add(&x_src.matmul(&self.w2.t()))
            .add(&e.matmul(&self.w3.t()));

        let eta = e_new.sigmoid();
        let denom = eta
            .scatter_add_rows(&edges.dst, edges.n_nodes)
            .add_scalar(GATE_EPS);
        let gate = eta.mul(&denom.recip().gather_rows(&edges.dst));
        let messages = gate.mul(&x_src.matmul(&self.v.t()));
        let aggregated = messages.scatter_add_rows(&edges.dst, edges.n_nodes);
        let x_new = x.matmul(&self.u.t()).add(&aggregated).relu();
        Ok((x_new, e_new))
    }
}

/// Free-function form of the gated layer for direct use in tests.
pub fn gated_mpnn_layer(
    layer: &GatedGcn,
    x: &DTensor,
    e: &DTensor,
    edges: &EdgeIndex,
) -> Result<(DTensor, DTensor), NnError> {
    layer.forward(x, e, edges)
}

/// Per-feature batch normalization with running statistics.
///
/// Train mode normalizes with batch statistics (`eps = 1e-5`) and updates
/// the running estimates (momentum 0.1); eval mode is the deterministic
/// affine map defined by the running estimates.
pub struct BatchNorm {
    gamma: DTensor,
    beta: DTensor,
    running_mean: DTensor,
    running_var: DTensor,
    dim: usize,
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> BatchNorm {
        BatchNorm {
            gamma: store.ones(&format!("{prefix}.gamma"), dim),
            beta: store.zeros(&format!("{prefix}.beta"), dim),
            running_mean: store.buffer(&format!("{prefix}.running_mean"), &[dim], vec![0.0; dim]),
            running_var: store.buffer(&format!("{prefix}.running_var"), &[dim], vec![1.0; dim]),
            dim,
        }
    }

    pub fn forward(&self, x: &DTensor, mode: Mode) -> Result<DTensor, NnError> {
        if x.shape().len() != 2 || x.shape()[1] != self.dim {
            return Err(NnError::ShapeMismatch(format!(
                "batchnorm expects (*, {}), got {:?}",
                self.dim,
                x.shape()
            )));
        }
        let n = x.shape()[0];
        if n == 0 {
            return Err(NnError::EmptyInput("batchnorm on zero rows".into()));
        }
        match mode {
            Mode::Train => {
                let mean = x.mean_axis0();
                let centered = x.add_row(&mean.neg());
                let var = centered.mul(&centered).mean_axis0();
                let inv_std = var.add_scalar(BN_EPS).sqrt().recip();
                let normalized = centered.mul_row(&inv_std);
                self.update_running(&mean.to_vec(), &var.to_vec(), n);
                Ok(normalized.mul_row(&self.gamma).add_row(&self.beta))
            }
            Mode::Eval => {
                let centered = x.add_row(&self.running_mean.neg());
                let inv_std = self.running_var.add_scalar(BN_EPS).sqrt().recip();
                Ok(centered.mul_row(&inv_std).mul_row(&self.gamma).add_row(&self.beta))
            }
        }
    }

    fn update_running(&self, mean: &[f64], biased_var: &[f64], n: usize) {
        // Running variance tracks the unbiased estimate.
        let correction = if n > 1 { n as f64 / (n as f64 - 1.0) } else { 1.0 };
        let mut rm = self.running_mean.to_vec();
        let mut rv = self.running_var.to_vec();
        for j in 0..self.dim {
            rm[j] = (1.0 - BN_MOMENTUM) * rm[j] + BN_MOMENTUM * mean[j];
            rv[j] = (1.0 - BN_MOMENTUM) * rv[j] + BN_MOMENTUM * biased_var[j] * correction;
        }
        self.running_mean.set_data(&rm);
        self.running_var.set_data(&rv);
    }
}

/// Inverted dropout: train mode zeroes entries with probability `rate` and
/// scales survivors by `1/(1-rate)`; eval mode is the identity.
pub struct Dropout {
    rate: f64,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Dropout, NnError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NnError::InvalidDropoutRate(rate));
        }
        Ok(Dropout { rate })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn forward(
        &self,
        x: &DTensor,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<DTensor, NnError> {
        if mode == Mode::Eval || self.rate == 0.0 {
            return Ok(x.clone());
        }
        let keep_scale = 1.0 / (1.0 - self.rate);
        let mask: Vec<f64> = (0..x.len())
            .map(|_| {
                if rng.gen::<f64>() < self.rate {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        Ok(x.mul(&DTensor::constant(x.shape(), mask)))
    }
}

/// Free-function form matching the operation contract.
pub fn dropout(
    x: &DTensor,
    rate: f64,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<DTensor, NnError> {
    Dropout::new(rate)?.forward(x, mode, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Edge, GraphDocument};
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(17)
    }

    fn const_t(shape: &[usize], data: Vec<f64>) -> DTensor {
        DTensor::constant(shape, data)
    }

    #[test]
    fn attention_single_row_returns_value_projection() {
        let x = const_t(&[1, 2], vec![0.3, -0.7]);
        let wq = const_t(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let wk = const_t(&[2, 2], vec![0.5, 0.1, -0.2, 0.3]);
        let wv = const_t(&[2, 2], vec![2.0, 0.0, 1.0, -1.0]);
        let h = self_attention(&x, &wq, &wk, &wv).unwrap();
        let v = x.matmul(&wv.t());
        assert_eq!(h.to_vec(), v.to_vec());
    }

    #[test]
    fn attention_identical_rows_identical_outputs() {
        let x = const_t(&[3, 2], vec![0.4, 1.1, 0.4, 1.1, 0.4, 1.1]);
        let mut r = rng();
        let mut store = ParamStore::new();
        let wq = store.glorot("wq", &[2, 2], 2, 2, &mut r);
        let wk = store.glorot("wk", &[2, 2], 2, 2, &mut r);
        let wv = store.glorot("wv", &[2, 2], 2, 2, &mut r);
        let h = self_attention(&x, &wq, &wk, &wv).unwrap();
        let v = h.to_vec();
        for i in 1..3 {
            for j in 0..2 {
                assert!((v[j] - v[i * 2 + j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn attention_rejects_mismatched_weights() {
        let x = const_t(&[2, 3], vec![0.0; 6]);
        let w_ok = const_t(&[2, 3], vec![0.0; 6]);
        let w_bad = const_t(&[2, 2], vec![0.0; 4]);
        assert!(matches!(
            self_attention(&x, &w_ok, &w_bad, &w_ok),
            Err(NnError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn single_head_with_identity_out_matches_self_attention() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "mha", 3, 1, 0.0, &mut r).unwrap();
        // Force the output map to the identity.
        let mut w = vec![0.0; 9];
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        mha.out.weight().set_data(&w);
        let x = const_t(&[4, 3], (0..12).map(|i| (i as f64 * 0.37).sin()).collect());
        let got = mha.forward(&x, Mode::Eval, &mut r).unwrap();
        let head = &mha.heads[0];
        let expect = self_attention(&x, &head.wq, &head.wk, &head.wv).unwrap();
        let (g, e) = (got.to_vec(), expect.to_vec());
        for (a, b) in g.iter().zip(&e) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn four_heads_concat_width() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "mha", 8, 4, 0.0, &mut r).unwrap();
        assert_eq!(mha.head_dim(), 2);
        let x = const_t(&[3, 8], (0..24).map(|i| (i as f64 * 0.11).cos()).collect());
        let heads: Vec<_> = mha.heads.iter().map(|h| (&h.wq, &h.wk, &h.wv)).collect();
        let concat =
            multi_head_attention(&x, &heads, &mha.attn_dropout, Mode::Eval, &mut r).unwrap();
        assert_eq!(concat.shape(), &[3, 8]); // 4 heads x head_dim 2
    }

    #[test]
    fn mha_rejects_indivisible_heads() {
        let mut r = rng();
        let mut store = ParamStore::new();
        assert!(MultiHeadAttention::new(&mut store, "m", 7, 4, 0.0, &mut r).is_err());
    }

    fn small_graph() -> Graph {
        Graph::from_document(GraphDocument {
            nodes: vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]],
            edges: vec![
                Edge { src: 0, dst: 1, feat: vec![0.5] },
                Edge { src: 1, dst: 2, feat: vec![-0.5] },
            ],
            target: None,
            positional: None,
        })
        .unwrap()
    }

    #[test]
    fn gated_layer_no_edges_reduces_to_self_map() {
        let g = Graph::from_document(GraphDocument {
            nodes: vec![vec![1.0, 2.0], vec![-1.0, 0.5]],
            edges: vec![],
            target: None,
            positional: None,
        })
        .unwrap();
        let mut r = rng();
        let mut store = ParamStore::new();
        let layer = GatedGcn::new(&mut store, "g", 2, 0, 3, &mut r);
        let edges = EdgeIndex::from_graph(&g);
        let x = DTensor::from_mat(g.node_features());
        let e = edges.edge_features(&g);
        let (x_new, e_new) = layer.forward(&x, &e, &edges).unwrap();
        assert_eq!(e_new.shape(), &[0, 3]);
        let expect = x.matmul(&layer.u.t()).relu();
        assert_eq!(x_new.to_vec(), expect.to_vec());
    }

    #[test]
    fn gated_layer_shape_checks() {
        let g = small_graph();
        let mut r = rng();
        let mut store = ParamStore::new();
        let layer = GatedGcn::new(&mut store, "g", 2, 1, 3, &mut r);
        let edges = EdgeIndex::from_graph(&g);
        let x_bad = DTensor::zeros(&[3, 5]);
        let e = edges.edge_features(&g);
        assert!(layer.forward(&x_bad, &e, &edges).is_err());
        let x = DTensor::from_mat(g.node_features());
        let e_bad = DTensor::zeros(&[1, 1]);
        assert!(layer.forward(&x, &e_bad, &edges).is_err());
    }

    #[test]
    fn batchnorm_zeroes_constant_column_in_train() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2);
        let x = const_t(&[4, 2], vec![5.0, 1.0, 5.0, 2.0, 5.0, 3.0, 5.0, 4.0]);
        let y = bn.forward(&x, Mode::Train).unwrap();
        let v = y.to_vec();
        for i in 0..4 {
            assert!(v[i * 2].abs() < 1e-9, "constant column should normalize to 0");
        }
    }

    #[test]
    fn batchnorm_train_statistics() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 1);
        // Large spread keeps the eps correction negligible.
        let data: Vec<f64> = (0..16).map(|i| (i as f64) * 25.0 - 100.0).collect();
        let x = const_t(&[16, 1], data);
        let y = bn.forward(&x, Mode::Train).unwrap();
        let v = y.to_vec();
        let mean: f64 = v.iter().sum::<f64>() / 16.0;
        let var: f64 = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn batchnorm_eval_is_deterministic_affine() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2);
        // Push the running stats away from the defaults first.
        let x = const_t(&[4, 2], (0..8).map(|i| i as f64).collect());
        bn.forward(&x, Mode::Train).unwrap();
        let probe = const_t(&[2, 2], vec![0.5, 1.5, -0.5, 2.5]);
        let y1 = bn.forward(&probe, Mode::Eval).unwrap().to_vec();
        let y2 = bn.forward(&probe, Mode::Eval).unwrap().to_vec();
        assert_eq!(y1, y2);
    }

    #[test]
    fn batchnorm_rejects_empty() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2);
        let x = DTensor::zeros(&[0, 2]);
        assert!(matches!(
            bn.forward(&x, Mode::Train),
            Err(NnError::EmptyInput(_))
        ));
    }

    #[test]
    fn dropout_rate_zero_and_eval_are_identity() {
        let mut r = rng();
        let x = const_t(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = dropout(&x, 0.0, Mode::Train, &mut r).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
        let y = dropout(&x, 0.5, Mode::Eval, &mut r).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn dropout_rejects_rate_one() {
        assert!(matches!(
            Dropout::new(1.0),
            Err(NnError::InvalidDropoutRate(_))
        ));
        assert!(Dropout::new(-0.1).is_err());
    }

    #[test]
    fn dropout_survivor_fraction() {
        let mut r = rng();
        let n = 10_000usize;
        let rate = 0.25;
        let x = const_t(&[n], vec![1.0; n]);
        let y = dropout(&x, rate, Mode::Train, &mut r).unwrap();
        let survivors = y.to_vec().iter().filter(|&&v| v != 0.0).count() as f64;
        let expect = (1.0 - rate) * n as f64;
        let sigma = (n as f64 * rate * (1.0 - rate)).sqrt();
        assert!(
            (survivors - expect).abs() < 3.0 * sigma,
            "survivors {survivors} outside 3 sigma of {expect}"
        );
        // Survivors carry the inverse keep probability.
        let kept: Vec<f64> = y.to_vec().into_iter().filter(|&v| v != 0.0).collect();
        for v in kept {
            assert!((v - 1.0 / (1.0 - rate)).abs() < 1e-12);
        }
    }
}
