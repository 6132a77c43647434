//! Network building blocks: the 4-layer 1-D convolutional feature extractors
//! and the 3-layer fully connected heads used for task classifiers, the
//! weighted domain classifier, and the pairwise discriminators. Weights use
//! Gaussian initialization (mean 0, sigma 0.02), biases start at zero.

use crate::error::{Error, Result};
use crate::tensor::{add_channel_bias, add_row_bias, conv1d, matmul, relu, reshape, Tensor};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const INIT_SIGMA: f64 = 0.02;

fn gaussian_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let normal = Normal::new(0.0, INIT_SIGMA).expect("valid sigma");
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::param(data, shape).expect("shape/data agree")
}

fn zero_param(shape: &[usize]) -> Tensor {
    Tensor::param(vec![0.0; shape.iter().product()], shape).expect("shape/data agree")
}

/// One convolution stage: `weight[cout×cin×ksz]` plus per-channel bias.
#[derive(Clone)]
pub struct Conv1dLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1dLayer {
    fn new(rng: &mut ChaCha8Rng, cin: usize, cout: usize, ksz: usize, stride: usize, pad: usize) -> Conv1dLayer {
        Conv1dLayer {
            weight: gaussian_tensor(rng, &[cout, cin, ksz]),
            bias: zero_param(&[cout]),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        add_channel_bias(&conv1d(x, &self.weight, self.stride, self.pad)?, &self.bias)
    }
}

/// Stack of convolution+ReLU stages flattened to `[batch × embedding_dim]`.
#[derive(Clone)]
pub struct FeatureExtractor {
    pub layers: Vec<Conv1dLayer>,
    embedding_dim: usize,
}

impl FeatureExtractor {
    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    /// `[b × 1 × len] -> [b × embedding_dim]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = relu(&layer.forward(&h)?);
        }
        let batch = h.shape()[0];
        reshape(&h, &[batch, self.embedding_dim])
    }

    fn params_into(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.conv{i}.weight"), l.weight.clone()));
            out.push((format!("{prefix}.conv{i}.bias"), l.bias.clone()));
        }
    }
}

/// Three fully connected layers with ReLU between (none after the last).
#[derive(Clone)]
pub struct Mlp {
    pub layers: Vec<(Tensor, Tensor)>, // (weight[in×out], bias[out])
}

impl Mlp {
    fn new(rng: &mut ChaCha8Rng, dims: &[usize]) -> Mlp {
        let layers = dims
            .windows(2)
            .map(|w| (gaussian_tensor(rng, &[w[0], w[1]]), zero_param(&[w[1]])))
            .collect();
        Mlp { layers }
    }

    /// `[m × in] -> [m × out]` logits.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            h = add_row_bias(&matmul(&h, w)?, b)?;
            if i + 1 < self.layers.len() {
                h = relu(&h);
            }
        }
        Ok(h)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|(w, _)| w.shape()[1]).unwrap_or(0)
    }

    fn params_into(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, (w, b)) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.fc{i}.weight"), w.clone()));
            out.push((format!("{prefix}.fc{i}.bias"), b.clone()));
        }
    }
}

/// Architecture knobs for [`build_networks`].
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkShape {
    pub signal_len: usize,
    pub conv_channels: Vec<usize>,
    pub conv_kernel: usize,
    pub conv_stride: usize,
    pub conv_pad: usize,
    pub fc_hidden: Vec<usize>,
    pub classes: usize,
    pub k_domains: usize,
}

impl NetworkShape {
    /// Spatial length after the conv stack; errors if any stage collapses.
    pub fn final_spatial(&self) -> Result<usize> {
        let mut l = self.signal_len;
        for i in 0..self.conv_channels.len() {
            let padded = l + 2 * self.conv_pad;
            if padded < self.conv_kernel {
                return Err(Error::Config(format!(
                    "conv stage {i}: kernel {} exceeds padded length {padded}",
                    self.conv_kernel
                )));
            }
            l = (padded - self.conv_kernel) / self.conv_stride + 1;
        }
        Ok(l)
    }

    pub fn embedding_dim(&self) -> Result<usize> {
        Ok(self.conv_channels.last().copied().unwrap_or(1) * self.final_spatial()?)
    }
}

/// All parameter groups of the model: the shared and weighted feature
/// extractors, K task classifiers, the weighted classifier (output width K),
/// and K(K−1)/2 binary discriminators.
#[derive(Clone)]
pub struct ModelParameters {
    pub f_shared: FeatureExtractor,
    pub f_weighted: FeatureExtractor,
    pub task_classifiers: Vec<Mlp>,
    pub weighted_classifier: Mlp,
    pub discriminators: Vec<Mlp>,
}

impl ModelParameters {
    /// Stable (name, tensor) listing used by the optimizer and checkpoints.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.f_shared.params_into("f_shared", &mut out);
        self.f_weighted.params_into("f_weighted", &mut out);
        for (k, c) in self.task_classifiers.iter().enumerate() {
            c.params_into(&format!("classifier{}", k + 1), &mut out);
        }
        self.weighted_classifier.params_into("weighted_classifier", &mut out);
        for (d, disc) in self.discriminators.iter().enumerate() {
            disc.params_into(&format!("discriminator{d}"), &mut out);
        }
        out
    }

    pub fn all_params(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn zero_grads(&self) {
        for p in self.all_params() {
            p.zero_grad();
        }
    }
}

fn build_extractor(rng: &mut ChaCha8Rng, shape: &NetworkShape) -> FeatureExtractor {
    let mut layers = Vec::with_capacity(shape.conv_channels.len());
    let mut cin = 1;
    for &cout in &shape.conv_channels {
        layers.push(Conv1dLayer::new(rng, cin, cout, shape.conv_kernel, shape.conv_stride, shape.conv_pad));
        cin = cout;
    }
    FeatureExtractor {
        layers,
        embedding_dim: shape.embedding_dim().expect("validated by caller"),
    }
}

/// Construct and initialize every network, deterministically in `seed`.
pub fn build_networks(shape: &NetworkShape, seed: u64) -> Result<ModelParameters> {
    if shape.k_domains < 1 {
        return Err(Error::Config("need at least one source domain".into()));
    }
    if shape.conv_channels.is_empty() {
        return Err(Error::Config("conv stack must have at least one layer".into()));
    }
    if shape.conv_stride == 0 {
        return Err(Error::Config("conv stride must be positive".into()));
    }
    let embedding = shape.embedding_dim()?;
    let mut fc_dims = vec![embedding];
    fc_dims.extend_from_slice(&shape.fc_hidden);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f_shared = build_extractor(&mut rng, shape);
    let f_weighted = build_extractor(&mut rng, shape);

    let head_dims = |out: usize| {
        let mut d = fc_dims.clone();
        d.push(out);
        d
    };
    let task_classifiers = (0..shape.k_domains)
        .map(|_| Mlp::new(&mut rng, &head_dims(shape.classes)))
        .collect();
    let weighted_classifier = Mlp::new(&mut rng, &head_dims(shape.k_domains));
    let n_pairs = shape.k_domains * (shape.k_domains.saturating_sub(1)) / 2;
    let discriminators = (0..n_pairs).map(|_| Mlp::new(&mut rng, &head_dims(2))).collect();

    Ok(ModelParameters {
        f_shared,
        f_weighted,
        task_classifiers,
        weighted_classifier,
        discriminators,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(len: usize, k: usize) -> NetworkShape {
        NetworkShape {
            signal_len: len,
            conv_channels: vec![8, 16, 32, 64],
            conv_kernel: 3,
            conv_stride: 2,
            conv_pad: 1,
            fc_hidden: vec![64, 32],
            classes: 3,
            k_domains: k,
        }
    }

    #[test]
    fn embedding_dim_matches_conv_arithmetic() {
        // 512 -> 256 -> 128 -> 64 -> 32 spatial, 64 channels.
        assert_eq!(shape(512, 3).embedding_dim().unwrap(), 2048);
        assert_eq!(shape(64, 3).embedding_dim().unwrap(), 256);
    }

    #[test]
    fn same_seed_gives_bitwise_identical_parameters() {
        let a = build_networks(&shape(64, 3), 11).unwrap();
        let b = build_networks(&shape(64, 3), 11).unwrap();
        let (pa, pb) = (a.named_params(), b.named_params());
        assert_eq!(pa.len(), pb.len());
        for ((na, ta), (nb, tb)) in pa.iter().zip(pb.iter()) {
            assert_eq!(na, nb);
            let (da, db) = (ta.to_vec(), tb.to_vec());
            assert!(da.iter().zip(&db).all(|(x, y)| x.to_bits() == y.to_bits()), "{na}");
        }
    }

    #[test]
    fn component_counts_follow_k() {
        for k in [2, 3, 4] {
            let m = build_networks(&shape(64, k), 1).unwrap();
            assert_eq!(m.task_classifiers.len(), k);
            assert_eq!(m.discriminators.len(), k * (k - 1) / 2);
            assert_eq!(m.weighted_classifier.output_dim(), k);
            for d in &m.discriminators {
                assert_eq!(d.output_dim(), 2);
            }
        }
    }

    #[test]
    fn forward_shapes_are_consistent() {
        let m = build_networks(&shape(64, 3), 2).unwrap();
        let x = Tensor::zeros(&[5, 1, 64]);
        let emb = m.f_shared.forward(&x).unwrap();
        assert_eq!(emb.shape(), &[5, 256]);
        let logits = m.task_classifiers[0].forward(&emb).unwrap();
        assert_eq!(logits.shape(), &[5, 3]);
        let w = m.weighted_classifier.forward(&m.f_weighted.forward(&x).unwrap()).unwrap();
        assert_eq!(w.shape(), &[5, 3]);
    }

    #[test]
    fn biases_start_at_zero_weights_do_not() {
        let m = build_networks(&shape(64, 2), 3).unwrap();
        for (name, t) in m.named_params() {
            let d = t.to_vec();
            if name.ends_with(".bias") {
                assert!(d.iter().all(|&v| v == 0.0), "{name}");
            } else {
                assert!(d.iter().any(|&v| v != 0.0), "{name}");
            }
        }
    }

    #[test]
    fn collapsed_conv_stack_is_a_config_error() {
        let mut s = shape(64, 2);
        s.conv_pad = 0;
        s.conv_channels = vec![8; 10]; // spatial collapses below kernel size
        assert!(matches!(build_networks(&s, 1), Err(Error::Config(_))));
    }
}
