//! Domain-invariant feature learning: one binary discriminator per unordered
//! pair of source domains, trained through a gradient reversal layer so a
//! single backward pass descends the confusion objective on the shared
//! extractor while ascending the discrimination objective on the
//! discriminators.

use crate::error::{Error, Result};
use crate::network::Mlp;
use crate::tensor::{add, concat_rows, cross_entropy, grad_reverse, scale, Tensor};

/// An unordered source-domain pair `(k1, k2)` with `k1 < k2`, plus the index
/// of the discriminator assigned to it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DomainPair {
    pub k1: usize,
    pub k2: usize,
    pub discriminator_index: usize,
}

/// All unordered pairs in lexicographic order: (1,2), (1,3), ..., (K−1,K).
pub fn enumerate_pairs(k: usize) -> Result<Vec<DomainPair>> {
    if k < 2 {
        return Err(Error::Parameter(format!(
            "pair enumeration needs at least 2 domains, got {k}"
        )));
    }
    let mut pairs = Vec::with_capacity(k * (k - 1) / 2);
    for k1 in 1..=k {
        for k2 in (k1 + 1)..=k {
            pairs.push(DomainPair { k1, k2, discriminator_index: pairs.len() });
        }
    }
    Ok(pairs)
}

/// Adversarial tradeoff schedule `2/(1+exp(−10p)) − 1` for progress `p`.
pub fn lambda_schedule(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Parameter(format!("progress must lie in [0,1], got {p}")));
    }
    Ok(2.0 / (1.0 + (-10.0 * p).exp()) - 1.0)
}

/// Per-pair losses and their mean, as logged each step.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialLossReport {
    pub per_pair_losses: Vec<f64>,
    pub mean_loss: f64,
    pub lambda: f64,
}

fn pair_loss(
    emb_k1: &Tensor,
    emb_k2: &Tensor,
    discriminator: &Mlp,
    lambda: f64,
    use_reversal: bool,
) -> Result<Tensor> {
    let joined = concat_rows(&[emb_k1, emb_k2])?;
    let features = if use_reversal { grad_reverse(&joined, lambda)? } else { joined };
    let logits = discriminator.forward(&features)?;
    // Lower-indexed domain of the pair carries label 1.
    let mut targets = vec![1usize; emb_k1.shape()[0]];
    targets.extend(std::iter::repeat_n(0, emb_k2.shape()[0]));
    cross_entropy(&logits, &targets)
}

fn mean_over_pairs(
    embeddings: &[Tensor],
    discriminators: &[Mlp],
    lambda: f64,
    use_reversal: bool,
) -> Result<(Tensor, AdversarialLossReport)> {
    let k = embeddings.len();
    let pairs = enumerate_pairs(k)?;
    if discriminators.len() != pairs.len() {
        return Err(Error::Config(format!(
            "{} discriminators for {} domain pairs",
            discriminators.len(),
            pairs.len()
        )));
    }
    let mut per_pair_losses = Vec::with_capacity(pairs.len());
    let mut total: Option<Tensor> = None;
    for pair in &pairs {
        let loss = pair_loss(
            &embeddings[pair.k1 - 1],
            &embeddings[pair.k2 - 1],
            &discriminators[pair.discriminator_index],
            lambda,
            use_reversal,
        )?;
        per_pair_losses.push(loss.item());
        total = Some(match total {
            Some(t) => add(&t, &loss)?,
            None => loss,
        });
    }
    let mean = scale(&total.expect("at least one pair"), 1.0 / pairs.len() as f64);
    let report = AdversarialLossReport {
        mean_loss: mean.item(),
        per_pair_losses,
        lambda,
    };
    Ok((mean, report))
}

/// Mean over domain pairs of the binary cross-entropy that each pair's
/// discriminator assigns to the two domains' embeddings, evaluated through
/// `grad_reverse(·, lambda)`. One backward pass therefore updates the
/// discriminators toward separation and the shared extractor toward
/// confusion.
pub fn domain_invariant_loss(
    embeddings: &[Tensor],
    discriminators: &[Mlp],
    lambda: f64,
) -> Result<(Tensor, AdversarialLossReport)> {
    mean_over_pairs(embeddings, discriminators, lambda, true)
}

/// The same pairwise loss without the reversal layer. Used to verify the
/// gradient-sign property by double evaluation; not part of training.
pub fn pairwise_domain_loss_direct(
    embeddings: &[Tensor],
    discriminators: &[Mlp],
) -> Result<(Tensor, AdversarialLossReport)> {
    mean_over_pairs(embeddings, discriminators, 0.0, false)
}
