//! Domain-related pseudolabeling: the probability score from the labeled
//! domain's classifier, a prototype-similarity score maintained by a global
//! iteration scheme, a dynamic threshold that rises with training progress,
//! and the selection rule combining them.
//!
//! Scoring never participates in differentiation; every function here runs
//! detached from the tape.

use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::network::{FeatureExtractor, Mlp};
use crate::tensor::{softmax, Tape, Tensor};

/// Class prototypes (one row per class) plus the previous iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeState {
    m1: Vec<f64>,
    m1_prev: Vec<f64>,
    classes: usize,
    dim: usize,
    iteration: usize,
}

impl PrototypeState {
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Current prototype matrix, row-major `classes × dim`.
    pub fn prototypes(&self) -> &[f64] {
        &self.m1
    }

    pub fn previous(&self) -> &[f64] {
        &self.m1_prev
    }

    pub fn prototype(&self, class: usize) -> &[f64] {
        &self.m1[class * self.dim..(class + 1) * self.dim]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; 0 when either vector has (numerically) zero norm.
fn cosine_or_zero(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na < 1e-300 || nb < 1e-300 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// Lowest-index argmax.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-class means of `embeddings[m × dim]`; classes absent from the batch
/// copy their row from `fallback`.
fn class_means(
    embeddings: &[f64],
    m: usize,
    dim: usize,
    labels: &[usize],
    classes: usize,
    fallback: &[f64],
) -> Vec<f64> {
    let mut sums = vec![0.0; classes * dim];
    let mut counts = vec![0usize; classes];
    for i in 0..m {
        let c = labels[i];
        counts[c] += 1;
        for j in 0..dim {
            sums[c * dim + j] += embeddings[i * dim + j];
        }
    }
    for c in 0..classes {
        if counts[c] == 0 {
            sums[c * dim..(c + 1) * dim].copy_from_slice(&fallback[c * dim..(c + 1) * dim]);
        } else {
            for j in 0..dim {
                sums[c * dim + j] /= counts[c] as f64;
            }
        }
    }
    sums
}

/// Traditional probability score: `softmax(classifier(embeddings))`, detached.
pub fn probability_score(embeddings: &Tensor, classifier: &Mlp) -> Result<Tensor> {
    Tape::no_grad(|| softmax(&classifier.forward(embeddings)?))
}

/// Initialize prototypes with a full pass over the labeled domain so every
/// class is represented. Errors if some class has no labeled sample.
pub fn init_prototypes(
    labeled: &DomainDataset,
    f_shared: &FeatureExtractor,
    classes: usize,
    chunk: usize,
) -> Result<PrototypeState> {
    let labels = labeled
        .labels()
        .ok_or_else(|| Error::Data("prototype initialization needs a labeled domain".into()))?;
    let n = labeled.len_signals();
    let dim = f_shared.embedding_dim();
    let mut sums = vec![0.0; classes * dim];
    let mut counts = vec![0usize; classes];

    Tape::no_grad(|| -> Result<()> {
        let mut start = 0;
        while start < n {
            let end = (start + chunk.max(1)).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let emb = f_shared.forward(&labeled.batch(&idx)?)?;
            let ed = emb.data();
            for (row, &i) in idx.iter().enumerate() {
                let c = labels[i];
                if c >= classes {
                    return Err(Error::Label(format!("class {c} out of range ({classes})")));
                }
                counts[c] += 1;
                for j in 0..dim {
                    sums[c * dim + j] += ed[row * dim + j];
                }
            }
            start = end;
        }
        Ok(())
    })?;

    for c in 0..classes {
        if counts[c] == 0 {
            return Err(Error::Data(format!("labeled domain has no sample of class {c}")));
        }
        for j in 0..dim {
            sums[c * dim + j] /= counts[c] as f64;
        }
    }
    Ok(PrototypeState {
        m1_prev: sums.clone(),
        m1: sums,
        classes,
        dim,
        iteration: 0,
    })
}

/// Global iteration update: blend the batch-local prototype matrix with the
/// previous iterate by the squared cosine of the flattened matrices.
pub fn update_prototypes(
    state: &mut PrototypeState,
    batch: &Tensor,
    labels: &[usize],
    f_shared: &FeatureExtractor,
) -> Result<()> {
    let emb = Tape::no_grad(|| f_shared.forward(batch))?;
    let m = emb.shape()[0];
    let values = emb.to_vec();
    update_prototypes_from_embeddings(state, &values, m, labels)
}

/// Core of [`update_prototypes`], operating on a raw `m × dim` buffer.
pub fn update_prototypes_from_embeddings(
    state: &mut PrototypeState,
    embeddings: &[f64],
    m: usize,
    labels: &[usize],
) -> Result<()> {
    if labels.len() != m || embeddings.len() != m * state.dim {
        return Err(Error::Dim(format!(
            "prototype update got {} labels and {} values for m={m}, dim={}",
            labels.len(),
            embeddings.len(),
            state.dim
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&c| c >= state.classes) {
        return Err(Error::Label(format!("class {bad} out of range ({})", state.classes)));
    }
    let local = class_means(embeddings, m, state.dim, labels, state.classes, &state.m1);
    let rho = cosine_or_zero(&local, &state.m1);
    let r2 = rho * rho;
    let blended: Vec<f64> = local
        .iter()
        .zip(&state.m1)
        .map(|(new, old)| r2 * new + (1.0 - r2) * old)
        .collect();
    state.m1_prev = std::mem::replace(&mut state.m1, blended);
    state.iteration += 1;
    Ok(())
}

/// Replace prototype rows for classes present in the batch, without the
/// blended global update (the minibatch-local scheme).
pub fn replace_prototypes_local(
    state: &mut PrototypeState,
    embeddings: &[f64],
    m: usize,
    labels: &[usize],
) -> Result<()> {
    if labels.len() != m || embeddings.len() != m * state.dim {
        return Err(Error::Dim("local prototype update shape mismatch".into()));
    }
    let local = class_means(embeddings, m, state.dim, labels, state.classes, &state.m1);
    state.m1_prev = std::mem::replace(&mut state.m1, local);
    state.iteration += 1;
    Ok(())
}

/// Similarity score: cosine of each embedding against every prototype row,
/// then a row softmax so the output lives on the probability simplex like
/// the probability score it is combined with.
pub fn similarity_score(embeddings: &Tensor, state: &PrototypeState) -> Result<Tensor> {
    let sh = embeddings.shape();
    if sh.len() != 2 || sh[1] != state.dim {
        return Err(Error::Dim(format!(
            "similarity_score expects [m × {}], got {sh:?}",
            state.dim
        )));
    }
    let m = sh[0];
    let ed = embeddings.data();
    let mut raw = vec![0.0; m * state.classes];
    for i in 0..m {
        let e = &ed[i * state.dim..(i + 1) * state.dim];
        if norm(e) < 1e-300 {
            return Err(Error::Numeric(format!("embedding {i} has zero norm")));
        }
        for c in 0..state.classes {
            let p = state.prototype(c);
            if norm(p) < 1e-300 {
                return Err(Error::Numeric(format!("prototype {c} has zero norm")));
            }
            raw[i * state.classes + c] = cosine_or_zero(e, p);
        }
    }
    drop(ed);
    Tape::no_grad(|| softmax(&Tensor::from_vec(raw, &[m, state.classes])?))
}

/// Raw cosine similarities without the softmax normalization.
pub fn raw_similarities(embeddings: &Tensor, state: &PrototypeState) -> Result<Vec<f64>> {
    let sh = embeddings.shape();
    if sh.len() != 2 || sh[1] != state.dim {
        return Err(Error::Dim("raw_similarities shape mismatch".into()));
    }
    let m = sh[0];
    let ed = embeddings.data();
    let mut raw = vec![0.0; m * state.classes];
    for i in 0..m {
        let e = &ed[i * state.dim..(i + 1) * state.dim];
        for c in 0..state.classes {
            raw[i * state.classes + c] = cosine_or_zero(e, state.prototype(c));
        }
    }
    Ok(raw)
}

/// Dynamic selection threshold `1/(1+e^(−10p)) − 0.1` for progress `p`.
pub fn dynamic_threshold(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Parameter(format!("progress must lie in [0,1], got {p}")));
    }
    Ok(1.0 / (1.0 + (-10.0 * p).exp()) - 0.1)
}

/// Convex combination `alpha·phi + (1−alpha)·psi` of the two scores.
pub fn pseudolabel_score(phi: &Tensor, psi: &Tensor, alpha: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Parameter(format!("alpha must lie in [0,1], got {alpha}")));
    }
    if phi.shape() != psi.shape() {
        return Err(Error::Dim(format!(
            "score shapes differ: {:?} vs {:?}",
            phi.shape(),
            psi.shape()
        )));
    }
    let data: Vec<f64> = phi
        .data()
        .iter()
        .zip(psi.data().iter())
        .map(|(p, s)| alpha * p + (1.0 - alpha) * s)
        .collect();
    Tensor::from_vec(data, phi.shape())
}

/// Rows passing the threshold with their argmax labels.
#[derive(Debug, Clone)]
pub struct PseudolabelBatch {
    pub selected_indices: Vec<usize>,
    pub labels: Vec<usize>,
    pub scores: Tensor,
    pub threshold_used: f64,
}

impl PseudolabelBatch {
    pub fn len(&self) -> usize {
        self.selected_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected_indices.is_empty()
    }
}

/// Select row `i` iff `max_j scores[i,j] > tau` (strict); the label is the
/// lowest-index argmax. Unselected rows are dropped entirely.
pub fn select_pseudolabels(scores: &Tensor, tau: f64) -> Result<PseudolabelBatch> {
    let sh = scores.shape();
    if sh.len() != 2 {
        return Err(Error::Dim(format!("select_pseudolabels expects [m×C], got {sh:?}")));
    }
    let (m, c) = (sh[0], sh[1]);
    let d = scores.data();
    let mut selected_indices = Vec::new();
    let mut labels = Vec::new();
    for i in 0..m {
        let row = &d[i * c..(i + 1) * c];
        let j = argmax(row);
        if row[j] > tau {
            selected_indices.push(i);
            labels.push(j);
        }
    }
    drop(d);
    Ok(PseudolabelBatch {
        selected_indices,
        labels,
        scores: scores.clone(),
        threshold_used: tau,
    })
}
