//! End-to-end training: network construction from a config, per-step
//! minibatch sampling, pseudolabeling of the unlabeled domains, the combined
//! loss (invariant + classification + weight branch), one backward pass, Adam
//! updates, and prototype maintenance. Includes the ablation wiring M1–M7 and
//! the checkpoint format `msadgn-ckpt-v1`.

use crate::adversarial::{domain_invariant_loss, lambda_schedule};
use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::network::{build_networks, ModelParameters, NetworkShape};
use crate::pseudolabel::{
    dynamic_threshold, init_prototypes, probability_score, pseudolabel_score,
    replace_prototypes_local, select_pseudolabels, similarity_score, update_prototypes,
    PrototypeState, PseudolabelBatch,
};
use crate::specific::{classification_loss, weight_branch_loss, ClassBatch};
use crate::tensor::{add, Tape, Tensor};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_FORMAT_VERSION: &str = "msadgn-ckpt-v1";

/// Ablation variants. M7 is the full model; the others disable one mechanism
/// each, except M1 which trains on the labeled domain alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    /// Labeled-source-only baseline (empirical risk minimization).
    M1,
    /// Traditional pseudolabel: probability score only, fixed threshold 0.4.
    M2,
    /// Fixed threshold 0.4 instead of the dynamic schedule.
    M3,
    /// Minibatch-local prototypes instead of the global iteration scheme.
    M4,
    /// No domain-invariant (adversarial) loss.
    M5,
    /// No domain-specific branch: one shared classifier, prediction via C1.
    M6,
    /// Full model.
    M7,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Ablation::M1,
        Ablation::M2,
        Ablation::M3,
        Ablation::M4,
        Ablation::M5,
        Ablation::M6,
        Ablation::M7,
    ];

    pub fn is_erm(self) -> bool {
        self == Ablation::M1
    }

    pub fn uses_similarity_score(self) -> bool {
        !matches!(self, Ablation::M1 | Ablation::M2)
    }

    pub fn uses_dynamic_threshold(self) -> bool {
        !matches!(self, Ablation::M1 | Ablation::M2 | Ablation::M3)
    }

    pub fn uses_global_prototypes(self) -> bool {
        self.uses_similarity_score() && self != Ablation::M4
    }

    pub fn uses_invariant_module(self) -> bool {
        !matches!(self, Ablation::M1 | Ablation::M5)
    }

    pub fn uses_specific_module(self) -> bool {
        !matches!(self, Ablation::M1 | Ablation::M6)
    }

    /// Prediction goes through the weighted combination only when the
    /// domain-specific branch was trained.
    pub fn predicts_via_weighted_branch(self) -> bool {
        self.uses_specific_module()
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Ablation> {
        match s.trim().to_ascii_uppercase().as_str() {
            "M1" => Ok(Ablation::M1),
            "M2" => Ok(Ablation::M2),
            "M3" => Ok(Ablation::M3),
            "M4" => Ok(Ablation::M4),
            "M5" => Ok(Ablation::M5),
            "M6" => Ok(Ablation::M6),
            "M7" => Ok(Ablation::M7),
            other => Err(Error::Parameter(format!("unknown ablation variant {other}"))),
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Every knob of a training run. Serializable to JSON and TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Number of source domains K (domain 1 labeled).
    pub k_domains: usize,
    pub classes: usize,
    pub signal_len: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_epochs: usize,
    /// Tradeoff between probability and similarity scores.
    pub alpha: f64,
    pub seed: u64,
    pub ablation: Ablation,
    pub conv_channels: Vec<usize>,
    pub conv_kernel: usize,
    pub conv_stride: usize,
    pub conv_pad: usize,
    pub fc_hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            k_domains: 3,
            classes: 3,
            signal_len: 512,
            epochs: 50,
            batch_size: 32,
            lr: 1e-4,
            lr_decay: 0.5,
            decay_epochs: 10,
            alpha: 0.2,
            seed: 1,
            ablation: Ablation::M7,
            conv_channels: vec![8, 16, 32, 64],
            conv_kernel: 3,
            conv_stride: 2,
            conv_pad: 1,
            fc_hidden: vec![64, 32],
        }
    }
}

impl TrainConfig {
    /// Short-signal profile for desk-scale experiments.
    pub fn fast_profile() -> TrainConfig {
        TrainConfig { signal_len: 64, ..TrainConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_domains < 1 {
            return Err(Error::Config("k_domains must be >= 1".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.epochs < 1 || self.batch_size < 1 || self.decay_epochs < 1 {
            return Err(Error::Config(
                "epochs, batch_size, and decay_epochs must be positive".into(),
            ));
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.lr) || !positive(self.lr_decay) {
            return Err(Error::Config("lr and lr_decay must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0,1], got {}", self.alpha)));
        }
        self.network_shape().embedding_dim()?;
        Ok(())
    }

    pub fn network_shape(&self) -> NetworkShape {
        NetworkShape {
            signal_len: self.signal_len,
            conv_channels: self.conv_channels.clone(),
            conv_kernel: self.conv_kernel,
            conv_stride: self.conv_stride,
            conv_pad: self.conv_pad,
            fc_hidden: self.fc_hidden.clone(),
            classes: self.classes,
            k_domains: self.k_domains,
        }
    }

    pub fn embedding_dim(&self) -> Result<usize> {
        self.network_shape().embedding_dim()
    }

    /// Learning rate at a 1-based epoch: `lr · decay^floor((e−1)/decay_epochs)`.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(((epoch - 1) / self.decay_epochs) as i32)
    }

    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<TrainConfig> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<TrainConfig> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("toml: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a config file, dispatching on the `.json`/`.toml` extension.
    pub fn from_file(path: &Path) -> Result<TrainConfig> {
        let text = fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => TrainConfig::from_toml(&text),
            _ => TrainConfig::from_json(&text),
        }
    }
}

/// Training progress `p = (completed_epochs·L_e + step)/(N_e·L_e)`, shared by
/// the threshold and lambda schedules. Hits exactly 1 on the final step.
#[derive(Debug, Clone, Copy)]
pub struct ProgressClock {
    pub epochs: usize,
    pub batches_per_epoch: usize,
}

impl ProgressClock {
    /// `epoch` and `step` are 1-based.
    pub fn progress(&self, epoch: usize, step: usize) -> f64 {
        ((epoch - 1) * self.batches_per_epoch + step) as f64
            / (self.epochs * self.batches_per_epoch) as f64
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Per-tensor Adam moments (beta1 = 0.9, beta2 = 0.999, eps = 1e-8).
pub struct AdamState {
    slots: Vec<AdamSlot>,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> AdamState {
        AdamState {
            slots: params
                .iter()
                .map(|p| AdamSlot { m: vec![0.0; p.numel()], v: vec![0.0; p.numel()], t: 0 })
                .collect(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self, i: usize) -> u64 {
        self.slots[i].t
    }
}

/// One bias-corrected Adam update over all parameters; missing gradients are
/// treated as zeros (the slot's step count still advances).
pub fn adam_step(params: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != state.slots.len() {
        return Err(Error::Contract(format!(
            "adam state has {} slots for {} parameters",
            state.slots.len(),
            params.len()
        )));
    }
    for (p, slot) in params.iter().zip(state.slots.iter_mut()) {
        if p.numel() != slot.m.len() {
            return Err(Error::Contract("adam slot shape mismatch".into()));
        }
        slot.t += 1;
        let grad = p.grad();
        let g = grad.as_deref();
        let bc1 = 1.0 - state.beta1.powi(slot.t as i32);
        let bc2 = 1.0 - state.beta2.powi(slot.t as i32);
        let mut values = p.to_vec();
        for i in 0..values.len() {
            let gi = g.map_or(0.0, |g| g[i]);
            slot.m[i] = state.beta1 * slot.m[i] + (1.0 - state.beta1) * gi;
            slot.v[i] = state.beta2 * slot.v[i] + (1.0 - state.beta2) * gi * gi;
            let m_hat = slot.m[i] / bc1;
            let v_hat = slot.v[i] / bc2;
            values[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
        p.set_data(&values);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// One row of the per-step training log.
#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub p: f64,
    pub tau: f64,
    pub lambda: f64,
    pub l_inv: f64,
    pub l_cls: f64,
    pub l_w: f64,
    pub loss: f64,
    /// Pseudolabels accepted this step per unlabeled domain (ids 2..=K).
    pub selected: Vec<usize>,
}

/// Per-epoch pseudolabel audit against hidden ground truth. Diagnostic only.
#[derive(Debug, Clone, Serialize)]
pub struct AuditRecord {
    pub epoch: usize,
    pub domain_id: usize,
    pub selected: usize,
    pub correct: usize,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub audits: Vec<AuditRecord>,
}

impl TrainLog {
    /// One row per step: the quantities of [`StepRecord`] with one
    /// `selected_d<k>` column per unlabeled domain.
    pub fn to_csv(&self, k_domains: usize) -> String {
        let mut out = String::from("step,epoch,p,tau,lambda,l_inv,l_cls,l_w,loss");
        for k in 2..=k_domains {
            out.push_str(&format!(",selected_d{k}"));
        }
        out.push('\n');
        for s in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}",
                s.step, s.epoch, s.p, s.tau, s.lambda, s.l_inv, s.l_cls, s.l_w, s.loss
            ));
            for v in &s.selected {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn audits_to_csv(&self) -> String {
        let mut out = String::from("epoch,domain,selected,pseudolabel_accuracy\n");
        for a in &self.audits {
            let acc = if a.selected > 0 {
                a.correct as f64 / a.selected as f64
            } else {
                f64::NAN
            };
            out.push_str(&format!("{},{},{},{acc}\n", a.epoch, a.domain_id, a.selected));
        }
        out
    }
}

fn sample_with_replacement(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Vec<usize> {
    (0..m).map(|_| rng.random_range(0..n)).collect()
}

struct EpochShuffle {
    order: Vec<usize>,
}

impl EpochShuffle {
    fn new(rng: &mut ChaCha8Rng, n: usize) -> EpochShuffle {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        EpochShuffle { order }
    }

    fn chunk(&self, step: usize, m: usize) -> &[usize] {
        &self.order[step * m..(step + 1) * m]
    }
}

/// Train per the per-step schedule: sample one minibatch per domain,
/// pseudolabel the unlabeled ones, build `L = L_inv + L_cls + L_w`, run one
/// backward pass, apply Adam, then refresh prototypes from the labeled
/// minibatch with post-update embeddings.
pub fn train(cfg: &TrainConfig, sources: &[DomainDataset]) -> Result<(ModelParameters, TrainLog)> {
    cfg.validate()?;
    if sources.len() != cfg.k_domains {
        return Err(Error::Data(format!(
            "config expects {} source domains, got {}",
            cfg.k_domains,
            sources.len()
        )));
    }
    if !sources[0].labeled() {
        return Err(Error::Data("source domain 1 must be labeled".into()));
    }
    for (i, s) in sources.iter().enumerate().skip(1) {
        if s.labeled() {
            return Err(Error::Data(format!(
                "source domain {} must be unlabeled",
                i + 1
            )));
        }
    }
    for s in sources {
        if s.signal_len() != cfg.signal_len {
            return Err(Error::Data(format!(
                "domain {} has signal length {}, config expects {}",
                s.domain_id(),
                s.signal_len(),
                cfg.signal_len
            )));
        }
    }
    let n_labeled = sources[0].len_signals();
    if n_labeled < cfg.batch_size {
        return Err(Error::Data(format!(
            "labeled domain has {n_labeled} samples, need at least one batch of {}",
            cfg.batch_size
        )));
    }

    let model = build_networks(&cfg.network_shape(), cfg.seed)?;
    let params = model.all_params();
    let mut adam = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9E37_79B9_7F4A_7C15);

    let ab = cfg.ablation;
    let mut prototypes: Option<PrototypeState> = if ab.uses_similarity_score() {
        Some(init_prototypes(&sources[0], &model.f_shared, cfg.classes, 256)?)
    } else {
        None
    };

    let batches_per_epoch = n_labeled / cfg.batch_size;
    let clock = ProgressClock { epochs: cfg.epochs, batches_per_epoch };
    let mut log = TrainLog::default();
    let mut global_step = 0usize;

    for epoch in 1..=cfg.epochs {
        let shuffle = EpochShuffle::new(&mut rng, n_labeled);
        let lr = cfg.lr_at_epoch(epoch);
        // Per-epoch audit tallies for unlabeled domains (index k-1).
        let mut audit_selected = vec![0usize; cfg.k_domains];
        let mut audit_correct = vec![0usize; cfg.k_domains];

        for step in 1..=batches_per_epoch {
            global_step += 1;
            let p = clock.progress(epoch, step);
            let tau = if ab.uses_dynamic_threshold() { dynamic_threshold(p)? } else { 0.4 };
            let lambda = lambda_schedule(p)?;

            let labeled_idx = shuffle.chunk(step - 1, cfg.batch_size);
            let labeled_batch = sources[0].batch(labeled_idx)?;
            let labeled_labels = sources[0].labels_for(labeled_idx).expect("labeled domain");

            // Unlabeled minibatches (empty in the ERM baseline, which never
            // touches them).
            let mut unlabeled_batches: Vec<(usize, Tensor, Vec<usize>)> = Vec::new();
            if !ab.is_erm() {
                for (k, src) in sources.iter().enumerate().skip(1) {
                    let idx = sample_with_replacement(&mut rng, src.len_signals(), cfg.batch_size);
                    let batch = src.batch(&idx)?;
                    unlabeled_batches.push((k, batch, idx));
                }
            }

            // Pseudolabel each unlabeled domain on the current parameters.
            let mut selections: Vec<(usize, PseudolabelBatch)> = Vec::new();
            if !ab.is_erm() {
                for (k, batch, idx) in &unlabeled_batches {
                    let selection = Tape::no_grad(|| -> Result<PseudolabelBatch> {
                        let emb = model.f_shared.forward(batch)?;
                        let phi = probability_score(&emb, &model.task_classifiers[0])?;
                        let score = if let Some(state) = &prototypes {
                            let psi = similarity_score(&emb, state)?;
                            pseudolabel_score(&phi, &psi, cfg.alpha)?
                        } else {
                            phi
                        };
                        select_pseudolabels(&score, tau)
                    })?;
                    if let Some(truth) = sources[*k].audit_labels() {
                        audit_selected[*k] += selection.len();
                        audit_correct[*k] += selection
                            .selected_indices
                            .iter()
                            .zip(&selection.labels)
                            .filter(|(&row, &lab)| truth[idx[row]] == lab)
                            .count();
                    }
                    selections.push((*k, selection));
                }
            }

            // Forward + one backward pass.
            let mut l_inv_val = 0.0;
            let mut l_cls_val = 0.0;
            let mut l_w_val = 0.0;
            let mut loss_val = 0.0;
            Tape::scope(|_| -> Result<()> {
                let mut loss: Option<Tensor> = None;

                if ab.uses_invariant_module() {
                    let mut embs = Vec::with_capacity(cfg.k_domains);
                    embs.push(model.f_shared.forward(&labeled_batch)?);
                    for (_, batch, _) in &unlabeled_batches {
                        embs.push(model.f_shared.forward(batch)?);
                    }
                    let (l_inv, report) =
                        domain_invariant_loss(&embs, &model.discriminators, lambda)?;
                    l_inv_val = report.mean_loss;
                    loss = Some(l_inv);
                }

                let mut class_batches = vec![ClassBatch {
                    domain_index: 0,
                    signals: labeled_batch.clone(),
                    labels: labeled_labels.clone(),
                }];
                for (k, selection) in &selections {
                    if selection.is_empty() {
                        continue;
                    }
                    let (_, batch, _) =
                        unlabeled_batches.iter().find(|(kk, _, _)| kk == k).expect("same step");
                    let subset = subset_batch(batch, &selection.selected_indices)?;
                    class_batches.push(ClassBatch {
                        // The single-classifier variant routes everything
                        // through classifier 1.
                        domain_index: if ab.uses_specific_module() { *k } else { 0 },
                        signals: subset,
                        labels: selection.labels.clone(),
                    });
                }
                let l_cls =
                    classification_loss(&class_batches, &model.f_shared, &model.task_classifiers)?;
                l_cls_val = l_cls.item();
                loss = Some(match loss {
                    Some(prev) => add(&prev, &l_cls)?,
                    None => l_cls,
                });

                if ab.uses_specific_module() && !ab.is_erm() {
                    let mut all_batches = vec![labeled_batch.clone()];
                    for (_, batch, _) in &unlabeled_batches {
                        all_batches.push(batch.clone());
                    }
                    let l_w = weight_branch_loss(
                        &all_batches,
                        &model.f_weighted,
                        &model.weighted_classifier,
                    )?;
                    l_w_val = l_w.item();
                    loss = Some(add(&loss.expect("l_cls present"), &l_w)?);
                }

                let loss = loss.expect("at least the classification term");
                loss_val = loss.item();
                if !loss_val.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss at epoch {epoch}, step {global_step}"
                    )));
                }
                model.zero_grads();
                loss.backward()?;
                Ok(())
            })?;

            adam_step(&params, &mut adam, lr)?;

            // Prototype refresh with post-update embeddings.
            if let Some(state) = prototypes.as_mut() {
                if ab.uses_global_prototypes() {
                    update_prototypes(state, &labeled_batch, &labeled_labels, &model.f_shared)?;
                } else {
                    let emb = Tape::no_grad(|| model.f_shared.forward(&labeled_batch))?;
                    let m = emb.shape()[0];
                    replace_prototypes_local(state, &emb.data(), m, &labeled_labels)?;
                }
            }

            log.steps.push(StepRecord {
                step: global_step,
                epoch,
                p,
                tau,
                lambda,
                l_inv: l_inv_val,
                l_cls: l_cls_val,
                l_w: l_w_val,
                loss: loss_val,
                selected: selections.iter().map(|(_, s)| s.len()).collect(),
            });
        }

        for (k, src) in sources.iter().enumerate().skip(1) {
            if src.audit_labels().is_some() {
                log.audits.push(AuditRecord {
                    epoch,
                    domain_id: src.domain_id(),
                    selected: audit_selected[k],
                    correct: audit_correct[k],
                });
            }
        }
    }

    Ok((model, log))
}

fn subset_batch(batch: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let sh = batch.shape();
    let (_, c, len) = (sh[0], sh[1], sh[2]);
    let d = batch.data();
    let mut out = Vec::with_capacity(rows.len() * c * len);
    for &r in rows {
        out.extend_from_slice(&d[r * c * len..(r + 1) * c * len]);
    }
    drop(d);
    Tensor::from_vec(out, &[rows.len(), c, len])
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

fn write_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn read_u64(bytes: &[u8], pos: &mut usize) -> Result<u64> {
    let end = *pos + 8;
    if end > bytes.len() {
        return Err(Error::Format("checkpoint truncated".into()));
    }
    let v = u64::from_le_bytes(bytes[*pos..end].try_into().unwrap());
    *pos = end;
    Ok(v)
}

fn read_exact<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = *pos + n;
    if end > bytes.len() {
        return Err(Error::Format("checkpoint truncated".into()));
    }
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

/// Serialize every named tensor plus the config into one binary file.
pub fn save_checkpoint(model: &ModelParameters, cfg: &TrainConfig, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    let magic = CHECKPOINT_FORMAT_VERSION.as_bytes();
    write_u64(&mut out, magic.len() as u64);
    out.extend_from_slice(magic);
    let cfg_json = serde_json::to_vec(cfg)?;
    write_u64(&mut out, cfg_json.len() as u64);
    out.extend_from_slice(&cfg_json);

    let named = model.named_params();
    write_u64(&mut out, named.len() as u64);
    for (name, tensor) in named {
        write_u64(&mut out, name.len() as u64);
        out.extend_from_slice(name.as_bytes());
        write_u64(&mut out, tensor.shape().len() as u64);
        for &d in tensor.shape() {
            write_u64(&mut out, d as u64);
        }
        for v in tensor.data().iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Load a checkpoint written by [`save_checkpoint`]: rebuilds the networks
/// from the stored config and overwrites every tensor bit-exactly.
pub fn load_checkpoint(path: &Path) -> Result<(ModelParameters, TrainConfig)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0;

    let magic_len = read_u64(&bytes, &mut pos)? as usize;
    let magic = std::str::from_utf8(read_exact(&bytes, &mut pos, magic_len)?)
        .map_err(|_| Error::Format("checkpoint magic is not utf-8".into()))?;
    if magic != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "format_version: expected {CHECKPOINT_FORMAT_VERSION}, found {magic}"
        )));
    }
    let cfg_len = read_u64(&bytes, &mut pos)? as usize;
    let cfg: TrainConfig = serde_json::from_slice(read_exact(&bytes, &mut pos, cfg_len)?)?;
    cfg.validate()?;

    let model = build_networks(&cfg.network_shape(), cfg.seed)?;
    let named = model.named_params();
    let count = read_u64(&bytes, &mut pos)? as usize;
    if count != named.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} tensors, config implies {}",
            named.len()
        )));
    }
    for (name, tensor) in named {
        let name_len = read_u64(&bytes, &mut pos)? as usize;
        let stored_name = std::str::from_utf8(read_exact(&bytes, &mut pos, name_len)?)
            .map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
        if stored_name != name {
            return Err(Error::Format(format!(
                "tensor order mismatch: expected {name}, found {stored_name}"
            )));
        }
        let ndim = read_u64(&bytes, &mut pos)? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(read_u64(&bytes, &mut pos)? as usize);
        }
        if dims != tensor.shape() {
            return Err(Error::Format(format!(
                "tensor {name}: stored shape {dims:?}, expected {:?}",
                tensor.shape()
            )));
        }
        let n: usize = dims.iter().product();
        let raw = read_exact(&bytes, &mut pos, n * 8)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensor.set_data(&values);
    }
    if pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - pos
        )));
    }
    Ok((model, cfg))
}

/// Guard for using a checkpoint under a caller-supplied config: the
/// structural fields must agree.
pub fn check_checkpoint_compat(stored: &TrainConfig, expected: &TrainConfig) -> Result<()> {
    if stored.k_domains != expected.k_domains {
        return Err(Error::Config(format!(
            "checkpoint was trained with K={}, requested K={}",
            stored.k_domains, expected.k_domains
        )));
    }
    if stored.network_shape() != expected.network_shape() {
        return Err(Error::Config(
            "checkpoint network architecture differs from the requested config".into(),
        ));
    }
    Ok(())
}
