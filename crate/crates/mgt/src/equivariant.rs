//! Permutation-equivariant encoding of the raw wavelet tensor.
//!
//! The wavelet stack is an `(n, n, k)` tensor whose slices transform by
//! conjugation under node relabeling. Tensor products with the adjacency
//! matrix followed by pair contractions keep that symmetry, so stacking
//! such layers and reducing to first order yields node features that
//! permute with the nodes.

use rand_chacha::ChaCha8Rng;

use crate::nn::{Activation, DTensor, Linear, NnError, ParamStore};
use crate::spectral::WaveletTensor;

/// Outer product: `out[i..., j...] = a[i...] * b[j...]`. The output order
/// is the sum of the input orders; channel axes stay trailing by keeping
/// the channel-carrying operand second.
pub fn tensor_product(a: &DTensor, b: &DTensor) -> DTensor {
    a.outer(b)
}

/// Contraction along the given axes: all listed axes share one summation
/// index. Axes must be distinct node dimensions (never the channel axis)
/// with equal extents.
pub fn contract(a: &DTensor, dims: &[usize]) -> Result<DTensor, NnError> {
    a.contract(dims)
}

/// The six unordered pairs of the four node dimensions of `A (x) H`, in the
/// fixed concatenation order used by [`second_order_mp_layer`].
pub const NODE_DIM_PAIRS: [[usize; 2]; 6] = [[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]];

/// Channel-mixing weights and nonlinearity of one second-order layer. The
/// affine map consumes the six concatenated pair contractions (6c input
/// channels).
pub struct SecondOrderLayer {
    weight: DTensor,
    bias: DTensor,
    pub activation: Activation,
    in_channels: usize,
    out_channels: usize,
}

impl SecondOrderLayer {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        activation: Activation,
        rng: &mut ChaCha8Rng,
    ) -> SecondOrderLayer {
        let pre_mix = 6 * in_channels;
        let weight = store.glorot(
            &format!("{prefix}.weight"),
            &[out_channels, pre_mix],
            pre_mix,
            out_channels,
            rng,
        );
        let bias = store.zeros(&format!("{prefix}.bias"), out_channels);
        SecondOrderLayer {
            weight,
            bias,
            activation,
            in_channels,
            out_channels,
        }
    }

    pub fn weight(&self) -> &DTensor {
        &self.weight
    }

    pub fn bias(&self) -> &DTensor {
        &self.bias
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }
}

/// One round of second-order message passing: form the fourth-order tensor
/// `A (x) H`, contract along each unordered pair of node dimensions,
/// concatenate the six results along channels, mix channels per entry,
/// then apply the nonlinearity.
pub fn second_order_mp_layer(
    adjacency: &DTensor,
    h: &DTensor,
    layer: &SecondOrderLayer,
) -> Result<DTensor, NnError> {
    if adjacency.shape().len() != 2 || adjacency.shape()[0] != adjacency.shape()[1] {
        return Err(NnError::ShapeMismatch(format!(
            "adjacency must be square, got {:?}",
            adjacency.shape()
        )));
    }
    let n = adjacency.shape()[0];
    if h.shape().len() != 3 || h.shape()[0] != n || h.shape()[1] != n {
        return Err(NnError::ShapeMismatch(format!(
            "state must be ({n}, {n}, c), got {:?}",
            h.shape()
        )));
    }
    let c = h.shape()[2];
    if c != layer.in_channels {
        return Err(NnError::ShapeMismatch(format!(
            "layer expects {} channels, got {c}",
            layer.in_channels
        )));
    }

    let fourth = tensor_product(adjacency, h); // (n, n, n, n, c)
    let mut parts = Vec::with_capacity(NODE_DIM_PAIRS.len());
    for pair in NODE_DIM_PAIRS {
        parts.push(contract(&fourth, &pair)?); // (n, n, c)
    }
    let mixed_in = DTensor::concat_last(&parts); // (n, n, 6c)
    let flat = mixed_in.reshape(&[n * n, 6 * c]);
    let mixed = flat
        .matmul(&layer.weight.t())
        .add_row(&layer.bias)
        .reshape(&[n, n, layer.out_channels]);
    Ok(layer.activation.apply(&mixed))
}

/// Stack of second-order layers plus the first-order reduction that turns
/// the `(n, n, k)` wavelet tensor into `(n, k)` node positional features.
///
/// The reduction concatenates row sums, column sums, and the diagonal (in
/// that order) along channels, then mixes back to width `k`.
pub struct WaveletEncoder {
    layers: Vec<SecondOrderLayer>,
    final_map: Linear,
    k: usize,
}

impl WaveletEncoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        k: usize,
        n_layers: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<WaveletEncoder, NnError> {
        if k == 0 {
            return Err(NnError::EmptyInput("wavelet encoder needs k >= 1".into()));
        }
        let layers = (0..n_layers)
            .map(|t| {
                SecondOrderLayer::new(
                    store,
                    &format!("{prefix}.layer{t}"),
                    k,
                    k,
                    Activation::Relu,
                    rng,
                )
            })
            .collect();
        let final_map = Linear::new(store, &format!("{prefix}.reduce"), 3 * k, k, rng);
        Ok(WaveletEncoder { layers, final_map, k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn layers(&self) -> &[SecondOrderLayer] {
        &self.layers
    }

    pub fn final_map(&self) -> &Linear {
        &self.final_map
    }

    /// Encode a raw wavelet stack against its graph's adjacency matrix.
    pub fn encode(
        &self,
        wavelets: &WaveletTensor,
        adjacency: &DTensor,
    ) -> Result<DTensor, NnError> {
        let n = wavelets.n();
        let k = wavelets.k();
        if k != self.k {
            return Err(NnError::ShapeMismatch(format!(
                "encoder built for {} scales, wavelet tensor has {k}",
                self.k
            )));
        }
        // Stack slices as trailing channels: (n, n, k).
        let mut data = vec![0.0; n * n * k];
        for (ch, m) in wavelets.matrices.iter().enumerate() {
            for i in 0..n {
                for j in 0..n {
                    data[(i * n + j) * k + ch] = m.get(i, j);
                }
            }
        }
        let p = DTensor::constant(&[n, n, k], data);
        self.encode_state(&p, adjacency)
    }

    /// Encode from an already-built `(n, n, c)` state tensor.
    pub fn encode_state(
        &self,
        p: &DTensor,
        adjacency: &DTensor,
    ) -> Result<DTensor, NnError> {
        let mut h = p.clone();
        for layer in &self.layers {
            h = second_order_mp_layer(adjacency, &h, layer)?;
        }
        let reduced = reduce_to_first_order(&h)?;
        self.final_map.forward(&reduced)
    }
}

/// First-order reduction of an `(n, n, c)` tensor: concatenation of
/// `{row-sum, column-sum, diagonal}` along channels, yielding `(n, 3c)`.
pub fn reduce_to_first_order(h: &DTensor) -> Result<DTensor, NnError> {
    if h.shape().len() != 3 || h.shape()[0] != h.shape()[1] {
        return Err(NnError::ShapeMismatch(format!(
            "reduction expects (n, n, c), got {:?}",
            h.shape()
        )));
    }
    let row_sum = h.contract(&[1])?;
    let col_sum = h.contract(&[0])?;
    let diag = h.diag3();
    Ok(DTensor::concat_last(&[row_sum, col_sum, diag]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    #[test]
    fn product_of_vectors() {
        let a = DTensor::constant(&[2], vec![1.0, 2.0]);
        let b = DTensor::constant(&[2], vec![3.0, 4.0]);
        let c = tensor_product(&a, &b);
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.to_vec(), vec![3.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn product_with_zero_tensor() {
        let a = DTensor::constant(&[2, 2], vec![1.0, -2.0, 0.5, 3.0]);
        let z = DTensor::zeros(&[3]);
        let c = tensor_product(&a, &z);
        assert!(c.to_vec().iter().all(|&v| v == 0.0));
        assert_eq!(c.shape(), &[2, 2, 3]);
    }

    #[test]
    fn product_identity_with_singleton() {
        let eye = DTensor::constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let s = DTensor::constant(&[1], vec![5.0]);
        let c = tensor_product(&eye, &s);
        assert_eq!(c.shape(), &[2, 2, 1]);
        assert_eq!(c.to_vec(), vec![5.0, 0.0, 0.0, 5.0]);
    }

    #[test]
    fn contract_matches_definition() {
        let a = DTensor::constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(contract(&a, &[0, 1]).unwrap().to_vec(), vec![5.0]);
        let eye = DTensor::constant(&[3, 3], {
            let mut v = vec![0.0; 9];
            v[0] = 1.0;
            v[4] = 1.0;
            v[8] = 1.0;
            v
        });
        assert_eq!(contract(&eye, &[0, 1]).unwrap().to_vec(), vec![3.0]);
    }

    #[test]
    fn contract_order3_brute_force() {
        // T[i][j][c], contracting {0,1} equals sum_i T[i][i][.]
        let n = 3;
        let c = 2;
        let data: Vec<f64> = (0..n * n * c).map(|i| (i as f64 * 0.713).sin()).collect();
        let t = DTensor::constant(&[n, n, c], data.clone());
        let got = contract(&t, &[0, 1]).unwrap();
        let mut expect = vec![0.0; c];
        for i in 0..n {
            for ch in 0..c {
                expect[ch] += data[(i * n + i) * c + ch];
            }
        }
        assert_eq!(got.to_vec(), expect);
    }

    #[test]
    fn second_order_single_node() {
        // n=1: all six pair contractions coincide, so with unit weights the
        // output is 6 * a * h.
        let mut store = ParamStore::new();
        let layer = SecondOrderLayer {
            weight: store.param_with("w", &[1, 6], vec![1.0; 6]),
            bias: store.zeros("b", 1),
            activation: Activation::Identity,
            in_channels: 1,
            out_channels: 1,
        };
        let a = DTensor::constant(&[1, 1], vec![3.0]);
        let h = DTensor::constant(&[1, 1, 1], vec![0.5]);
        let out = second_order_mp_layer(&a, &h, &layer).unwrap();
        assert_eq!(out.to_vec(), vec![9.0]); // 6 * 3.0 * 0.5
    }

    #[test]
    fn premix_channel_count() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let layer = SecondOrderLayer::new(&mut store, "l", 3, 4, Activation::Relu, &mut r);
        assert_eq!(layer.weight().shape(), &[4, 18]); // 6 pairs x 3 channels
    }

    #[test]
    fn layer_rejects_channel_mismatch() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let layer = SecondOrderLayer::new(&mut store, "l", 2, 2, Activation::Relu, &mut r);
        let a = DTensor::zeros(&[3, 3]);
        let h = DTensor::zeros(&[3, 3, 5]);
        assert!(second_order_mp_layer(&a, &h, &layer).is_err());
    }

    #[test]
    fn reduction_on_identity_slice() {
        // T=0 layers, psi = I (n=3, k=1): per node the reduction carries
        // row-sum 1, column-sum 1, diagonal 1.
        let n = 3;
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        let p = DTensor::constant(&[n, n, 1], data);
        let reduced = reduce_to_first_order(&p).unwrap();
        assert_eq!(reduced.shape(), &[3, 3]);
        for i in 0..n {
            assert_eq!(&reduced.to_vec()[i * 3..(i + 1) * 3], &[1.0, 1.0, 1.0]);
        }
    }

    #[test]
    fn encoder_identity_final_map_selects_diagonal() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let enc = WaveletEncoder::new(&mut store, "enc", 1, 0, &mut r).unwrap();
        // Select the diagonal variant (third reduction channel).
        enc.final_map.weight().set_data(&[0.0, 0.0, 1.0]);
        let n = 3;
        let mut eye = vec![0.0; n * n];
        for i in 0..n {
            eye[i * n + i] = 1.0;
        }
        let p = DTensor::constant(&[n, n, 1], eye);
        let adj = DTensor::zeros(&[n, n]);
        let out = enc.encode_state(&p, &adj).unwrap();
        assert_eq!(out.shape(), &[3, 1]);
        for v in out.to_vec() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn encoder_output_shape() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let enc = WaveletEncoder::new(&mut store, "enc", 2, 2, &mut r).unwrap();
        let n = 4;
        let p = DTensor::constant(
            &[n, n, 2],
            (0..n * n * 2).map(|i| (i as f64 * 0.21).cos()).collect(),
        );
        let adj = DTensor::constant(
            &[n, n],
            vec![
                0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0,
            ],
        );
        let out = enc.encode_state(&p, &adj).unwrap();
        assert_eq!(out.shape(), &[4, 2]);
    }
}
