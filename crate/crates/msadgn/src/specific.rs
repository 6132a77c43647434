//! Domain-specific feature learning: per-domain classifiers whose logits are
//! recombined by domain-similarity weights, the parallel branch that predicts
//! those weights from the raw signal, and the inference path.
//!
//! During training the weights are fixed one-hot by domain label, so each
//! domain's classification term exercises only its own classifier; at
//! prediction time the weight branch supplies a soft combination.

use crate::error::{Error, Result};
use crate::network::{FeatureExtractor, ModelParameters, Mlp};
use crate::pseudolabel::argmax;
use crate::tensor::{add, concat_rows, cross_entropy, scale, softmax, Tape, Tensor};

const SIMPLEX_TOL: f64 = 1e-6;

/// Row-stochastic `m × K` similarity weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityWeights {
    w: Vec<f64>,
    m: usize,
    k: usize,
}

impl SimilarityWeights {
    pub fn new(w: Vec<f64>, m: usize, k: usize) -> Result<SimilarityWeights> {
        if w.len() != m * k {
            return Err(Error::Dim(format!(
                "{} weight values for {m}×{k}",
                w.len()
            )));
        }
        let out = SimilarityWeights { w, m, k };
        out.check_simplex()?;
        Ok(out)
    }

    fn check_simplex(&self) -> Result<()> {
        for i in 0..self.m {
            let row = self.row(i);
            if row.iter().any(|&v| !(-SIMPLEX_TOL..=1.0 + SIMPLEX_TOL).contains(&v)) {
                return Err(Error::Contract(format!("weight row {i} leaves [0,1]: {row:?}")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::Contract(format!("weight row {i} sums to {sum}")));
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.m
    }

    pub fn domains(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.w[i * self.k..(i + 1) * self.k]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }
}

/// Weighted combination of per-domain logits, `m × C`.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedLogits {
    z: Vec<f64>,
    m: usize,
    c: usize,
}

impl CombinedLogits {
    pub fn rows(&self) -> usize {
        self.m
    }

    pub fn classes(&self) -> usize {
        self.c
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.z[i * self.c..(i + 1) * self.c]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.z
    }
}

/// One-hot weights from 1-based domain labels (Eq. of the fixed train-time
/// assignment: a source sample is exclusively similar to its own domain).
pub fn one_hot_weights(domain_labels: &[usize], k: usize) -> Result<SimilarityWeights> {
    let mut w = vec![0.0; domain_labels.len() * k];
    for (i, &d) in domain_labels.iter().enumerate() {
        if d < 1 || d > k {
            return Err(Error::Label(format!(
                "domain label {d} out of range 1..={k}"
            )));
        }
        w[i * k + (d - 1)] = 1.0;
    }
    SimilarityWeights::new(w, domain_labels.len(), k)
}

/// `z_i = Σ_k w_{i,k} · z_{i,k}` over a stacked `m × K × C` logit tensor.
/// Combination happens on pre-softmax logits.
pub fn combine_specific(z_stack: &Tensor, weights: &SimilarityWeights) -> Result<CombinedLogits> {
    let sh = z_stack.shape();
    if sh.len() != 3 || sh[0] != weights.rows() || sh[1] != weights.domains() {
        return Err(Error::Dim(format!(
            "logit stack {sh:?} does not match weights {}×{}",
            weights.rows(),
            weights.domains()
        )));
    }
    weights.check_simplex()?;
    let (m, k, c) = (sh[0], sh[1], sh[2]);
    let zd = z_stack.data();
    let mut z = vec![0.0; m * c];
    for i in 0..m {
        let wrow = weights.row(i);
        for kk in 0..k {
            let wik = wrow[kk];
            if wik == 0.0 {
                continue;
            }
            for cc in 0..c {
                z[i * c + cc] += wik * zd[(i * k + kk) * c + cc];
            }
        }
    }
    Ok(CombinedLogits { z, m, c })
}

/// One domain's contribution to the classification loss: its signals (or the
/// pseudolabel-selected subset) and the matching category labels.
pub struct ClassBatch {
    /// 0-based source-domain index; selects the classifier.
    pub domain_index: usize,
    /// `[m × 1 × len]` signals.
    pub signals: Tensor,
    pub labels: Vec<usize>,
}

/// Mean cross-entropy per contributing domain, averaged over the number of
/// contributing domains. The labeled domain (index 0) must contribute;
/// pseudolabel-empty domains simply drop out of the average.
pub fn classification_loss(
    batches: &[ClassBatch],
    f_shared: &FeatureExtractor,
    classifiers: &[Mlp],
) -> Result<Tensor> {
    if !batches.iter().any(|b| b.domain_index == 0) {
        return Err(Error::Data("no labeled domain-1 samples in classification loss".into()));
    }
    let mut total: Option<Tensor> = None;
    for b in batches {
        let classifier = classifiers.get(b.domain_index).ok_or_else(|| {
            Error::Config(format!(
                "no classifier for domain index {} ({} available)",
                b.domain_index,
                classifiers.len()
            ))
        })?;
        let emb = f_shared.forward(&b.signals)?;
        let loss = cross_entropy(&classifier.forward(&emb)?, &b.labels)?;
        total = Some(match total {
            Some(t) => add(&t, &loss)?,
            None => loss,
        });
    }
    Ok(scale(&total.expect("domain 0 present"), 1.0 / batches.len() as f64))
}

/// Domain-classification loss of the weighted branch: mean cross-entropy of
/// `C_weighted(F_weighted(x))` against 0-based domain indices over the union
/// of all source minibatches.
pub fn weight_branch_loss(
    domain_batches: &[Tensor],
    f_weighted: &FeatureExtractor,
    c_weighted: &Mlp,
) -> Result<Tensor> {
    if domain_batches.is_empty() {
        return Err(Error::Data("weight branch needs at least one domain batch".into()));
    }
    let embs: Vec<Tensor> = domain_batches
        .iter()
        .map(|b| f_weighted.forward(b))
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor> = embs.iter().collect();
    let joined = concat_rows(&refs)?;
    let mut targets = Vec::new();
    for (k, b) in domain_batches.iter().enumerate() {
        targets.extend(std::iter::repeat_n(k, b.shape()[0]));
    }
    cross_entropy(&c_weighted.forward(&joined)?, &targets)
}

/// `L_spe = L_cls + L_w`.
pub fn domain_specific_loss(l_cls: &Tensor, l_w: &Tensor) -> Result<Tensor> {
    add(l_cls, l_w)
}

/// Inference output for a batch.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub labels: Vec<usize>,
    pub weights: SimilarityWeights,
    pub logits: CombinedLogits,
}

/// Full inference path: predicted similarity weights soft-combine the
/// per-domain classifier logits; the label is the argmax of the combined
/// class distribution (lowest index on ties).
pub fn predict(x: &Tensor, model: &ModelParameters) -> Result<Prediction> {
    Tape::no_grad(|| {
        let m = x.shape()[0];
        let k = model.task_classifiers.len();
        let c = model.task_classifiers[0].output_dim();

        let w_logits = model
            .weighted_classifier
            .forward(&model.f_weighted.forward(x)?)?;
        let weights = SimilarityWeights::new(softmax(&w_logits)?.to_vec(), m, k)?;

        let emb = model.f_shared.forward(x)?;
        let mut stack = vec![0.0; m * k * c];
        for (kk, classifier) in model.task_classifiers.iter().enumerate() {
            let z = classifier.forward(&emb)?;
            let zd = z.data();
            for i in 0..m {
                for cc in 0..c {
                    stack[(i * k + kk) * c + cc] = zd[i * c + cc];
                }
            }
        }
        let logits = combine_specific(&Tensor::from_vec(stack, &[m, k, c])?, &weights)?;
        let probs = softmax(&Tensor::from_vec(logits.as_slice().to_vec(), &[m, c])?)?;
        let pd = probs.data();
        let labels = (0..m).map(|i| argmax(&pd[i * c..(i + 1) * c])).collect();
        drop(pd);
        Ok(Prediction { labels, weights, logits })
    })
}

/// Single-classifier inference used when the domain-specific branch is
/// disabled: argmax of `C_1(F_shared(x))`, with uniform weights reported.
pub fn predict_via_c1(x: &Tensor, model: &ModelParameters) -> Result<Prediction> {
    Tape::no_grad(|| {
        let m = x.shape()[0];
        let k = model.task_classifiers.len();
        let c = model.task_classifiers[0].output_dim();
        let emb = model.f_shared.forward(x)?;
        let z = model.task_classifiers[0].forward(&emb)?;
        let zd = z.to_vec();
        let labels = (0..m).map(|i| argmax(&zd[i * c..(i + 1) * c])).collect();
        Ok(Prediction {
            labels,
            weights: SimilarityWeights::new(vec![1.0 / k as f64; m * k], m, k)?,
            logits: CombinedLogits { z: zd, m, c },
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_networks, NetworkShape};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    const LN_3: f64 = 1.0986122886681098;

    fn tiny_shape(k: usize) -> NetworkShape {
        NetworkShape {
            signal_len: 32,
            conv_channels: vec![2, 2],
            conv_kernel: 3,
            conv_stride: 2,
            conv_pad: 1,
            fc_hidden: vec![4, 3],
            classes: 3,
            k_domains: k,
        }
    }

    #[test]
    fn one_hot_rows_are_unit_vectors() {
        let w = one_hot_weights(&[2], 3).unwrap();
        assert_eq!(w.row(0), &[0.0, 1.0, 0.0]);
        let w = one_hot_weights(&[1, 3, 2], 3).unwrap();
        for i in 0..3 {
            assert_eq!(w.row(i).iter().sum::<f64>(), 1.0);
        }
        let w = one_hot_weights(&[1, 1], 1).unwrap();
        assert_eq!(w.row(0), &[1.0]);
        assert!(one_hot_weights(&[0], 3).is_err());
        assert!(one_hot_weights(&[4], 3).is_err());
    }

    #[test]
    fn one_hot_combination_selects_one_domain() {
        let z = Tensor::from_vec(
            vec![
                1.0, 2.0, 3.0, // domain 1
                4.0, 5.0, 6.0, // domain 2
                7.0, 8.0, 9.0, // domain 3
            ],
            &[1, 3, 3],
        )
        .unwrap();
        let w = one_hot_weights(&[1], 3).unwrap();
        assert_eq!(combine_specific(&z, &w).unwrap().row(0), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn identical_logits_survive_any_simplex_weights() {
        let common = [0.3, -0.4, 1.7];
        let mut stack = Vec::new();
        for _ in 0..3 {
            stack.extend_from_slice(&common);
        }
        let z = Tensor::from_vec(stack, &[1, 3, 3]).unwrap();
        let w = SimilarityWeights::new(vec![0.2, 0.5, 0.3], 1, 3).unwrap();
        let combined = combine_specific(&z, &w).unwrap();
        for (got, want) in combined.row(0).iter().zip(common) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn combination_matches_brute_force_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (m, k, c) = (5, 3, 3);
        let stack: Vec<f64> = (0..m * k * c).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut w = vec![0.0; m * k];
        for i in 0..m {
            let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            for (j, r) in raw.iter().enumerate() {
                w[i * k + j] = r / s;
            }
        }
        let weights = SimilarityWeights::new(w.clone(), m, k).unwrap();
        let z = Tensor::from_vec(stack.clone(), &[m, k, c]).unwrap();
        let combined = combine_specific(&z, &weights).unwrap();
        for i in 0..m {
            for cc in 0..c {
                let mut want = 0.0;
                for kk in 0..k {
                    want += w[i * k + kk] * stack[(i * k + kk) * c + cc];
                }
                let got = combined.row(i)[cc];
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn simplex_violation_is_a_contract_error() {
        let z = Tensor::from_vec(vec![0.0; 6], &[1, 2, 3]).unwrap();
        assert!(SimilarityWeights::new(vec![0.7, 0.7], 1, 2).is_err());
        let w = SimilarityWeights { w: vec![0.7, 0.7], m: 1, k: 2 };
        assert!(matches!(combine_specific(&z, &w), Err(Error::Contract(_))));
    }

    #[test]
    fn classification_loss_requires_domain_one() {
        let model = build_networks(&tiny_shape(2), 5).unwrap();
        let batch = ClassBatch {
            domain_index: 1,
            signals: Tensor::zeros(&[2, 1, 32]),
            labels: vec![0, 1],
        };
        let err = classification_loss(&[batch], &model.f_shared, &model.task_classifiers)
            .unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn single_domain_reduces_to_plain_cross_entropy() {
        let model = build_networks(&tiny_shape(1), 5).unwrap();
        let x = Tensor::from_vec((0..64).map(|i| i as f64 / 64.0).collect(), &[2, 1, 32]).unwrap();
        let batch = ClassBatch { domain_index: 0, signals: x.clone(), labels: vec![0, 2] };
        let l = classification_loss(&[batch], &model.f_shared, &model.task_classifiers).unwrap();
        let emb = model.f_shared.forward(&x).unwrap();
        let plain = cross_entropy(&model.task_classifiers[0].forward(&emb).unwrap(), &[0, 2]).unwrap();
        assert!((l.item() - plain.item()).abs() < 1e-15);
    }

    #[test]
    fn classification_loss_matches_straight_line_average() {
        let model = build_networks(&tiny_shape(3), 15).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let make = |rng: &mut ChaCha8Rng, rows: usize| {
            Tensor::from_vec(
                (0..rows * 32).map(|_| rng.random_range(0.0..1.0)).collect(),
                &[rows, 1, 32],
            )
            .unwrap()
        };
        let batches = vec![
            ClassBatch { domain_index: 0, signals: make(&mut rng, 3), labels: vec![0, 1, 2] },
            ClassBatch { domain_index: 1, signals: make(&mut rng, 2), labels: vec![2, 0] },
            ClassBatch { domain_index: 2, signals: make(&mut rng, 4), labels: vec![1, 1, 0, 2] },
        ];
        let l = classification_loss(&batches, &model.f_shared, &model.task_classifiers).unwrap();
        let mut expected = 0.0;
        for b in &batches {
            let emb = model.f_shared.forward(&b.signals).unwrap();
            let ce = cross_entropy(
                &model.task_classifiers[b.domain_index].forward(&emb).unwrap(),
                &b.labels,
            )
            .unwrap();
            expected += ce.item();
        }
        expected /= 3.0;
        assert!((l.item() - expected).abs() < 1e-12);
    }

    #[test]
    fn uniform_weight_branch_gives_ln_k() {
        // Fresh networks produce near-zero logits; with K=3 the domain CE
        // starts at ln 3 up to the tiny Gaussian-init deviation.
        let model = build_networks(&tiny_shape(3), 2).unwrap();
        let zero_batches: Vec<Tensor> = (0..3).map(|_| Tensor::zeros(&[4, 1, 32])).collect();
        let l = weight_branch_loss(&zero_batches, &model.f_weighted, &model.weighted_classifier)
            .unwrap();
        assert!((l.item() - LN_3).abs() < 1e-9, "{}", l.item());
    }

    #[test]
    fn weight_branch_matches_independent_mean_ce() {
        let model = build_networks(&tiny_shape(2), 23).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let batches: Vec<Tensor> = (0..2)
            .map(|_| {
                Tensor::from_vec(
                    (0..3 * 32).map(|_| rng.random_range(0.0..1.0)).collect(),
                    &[3, 1, 32],
                )
                .unwrap()
            })
            .collect();
        let l = weight_branch_loss(&batches, &model.f_weighted, &model.weighted_classifier)
            .unwrap();
        let mut expected = 0.0;
        for (k, b) in batches.iter().enumerate() {
            let emb = model.f_weighted.forward(b).unwrap();
            let logits = model.weighted_classifier.forward(&emb).unwrap();
            let d = logits.to_vec();
            for r in 0..3 {
                let row = &d[r * 2..(r + 1) * 2];
                let max = row[0].max(row[1]);
                let lse = ((row[0] - max).exp() + (row[1] - max).exp()).ln() + max;
                expected += lse - row[k];
            }
        }
        expected /= 6.0;
        assert!((l.item() - expected).abs() < 1e-12);
    }

    #[test]
    fn specific_loss_is_the_exact_sum() {
        let a = Tensor::scalar(0.4);
        let b = Tensor::scalar(0.3);
        assert!((domain_specific_loss(&a, &b).unwrap().item() - 0.7).abs() < 1e-15);
        let zero = Tensor::scalar(0.0);
        assert_eq!(domain_specific_loss(&a, &zero).unwrap().item(), 0.4);
    }

    #[test]
    fn specific_loss_gradient_is_sum_of_part_gradients() {
        let model = build_networks(&tiny_shape(2), 31).unwrap();
        let x = Tensor::from_vec((0..2 * 32).map(|i| (i as f64).sin()).collect(), &[2, 1, 32])
            .unwrap();
        let cls_batch = || ClassBatch { domain_index: 0, signals: x.clone(), labels: vec![0, 1] };
        let weight_batches = vec![x.clone(), x.clone()];

        let grad_of = |parts: (bool, bool)| -> Vec<f64> {
            model.zero_grads();
            Tape::scope(|_| {
                let mut loss: Option<Tensor> = None;
                if parts.0 {
                    let l = classification_loss(
                        &[cls_batch()],
                        &model.f_shared,
                        &model.task_classifiers,
                    )
                    .unwrap();
                    loss = Some(l);
                }
                if parts.1 {
                    let l = weight_branch_loss(
                        &weight_batches,
                        &model.f_weighted,
                        &model.weighted_classifier,
                    )
                    .unwrap();
                    loss = Some(match loss {
                        Some(prev) => domain_specific_loss(&prev, &l).unwrap(),
                        None => l,
                    });
                }
                loss.unwrap().backward().unwrap();
            });
            model
                .all_params()
                .iter()
                .flat_map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
                .collect()
        };

        let both = grad_of((true, true));
        let only_cls = grad_of((true, false));
        let only_w = grad_of((false, true));
        for ((b, c), w) in both.iter().zip(&only_cls).zip(&only_w) {
            assert!((b - (c + w)).abs() < 1e-10, "{b} vs {}", c + w);
        }
    }

    #[test]
    fn prediction_with_collapsed_weights_matches_single_classifier() {
        let model = build_networks(&tiny_shape(3), 62).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::from_vec(
            (0..4 * 32).map(|_| rng.random_range(0.0..1.0)).collect(),
            &[4, 1, 32],
        )
        .unwrap();
        let pred = predict(&x, &model).unwrap();
        assert_eq!(pred.labels.len(), 4);
        for i in 0..4 {
            let sum: f64 = pred.weights.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }

        // Force the weight branch to collapse on domain 2 by biasing its
        // last layer hard; the prediction must equal classifier 2's argmax.
        let biased = {
            let m = model.clone();
            let (_, b) = m.weighted_classifier.layers.last().unwrap();
            b.set_data(&[-100.0, 100.0, -100.0]);
            m
        };
        let pred2 = predict(&x, &biased).unwrap();
        let emb = model.f_shared.forward(&x).unwrap();
        let z2 = biased.task_classifiers[1].forward(&emb).unwrap();
        let zd = z2.to_vec();
        for i in 0..4 {
            assert_eq!(pred2.labels[i], argmax(&zd[i * 3..(i + 1) * 3]));
        }
    }

    #[test]
    fn argmax_is_invariant_to_constant_logit_shifts() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (m, k, c) = (6, 2, 3);
        let stack: Vec<f64> = (0..m * k * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let shifted: Vec<f64> = stack.iter().map(|v| v + 11.5).collect();
        let w = SimilarityWeights::new(vec![0.5; m * k], m, k).unwrap();
        let a = combine_specific(&Tensor::from_vec(stack, &[m, k, c]).unwrap(), &w).unwrap();
        let b = combine_specific(&Tensor::from_vec(shifted, &[m, k, c]).unwrap(), &w).unwrap();
        for i in 0..m {
            assert_eq!(argmax(a.row(i)), argmax(b.row(i)));
        }
    }
}
