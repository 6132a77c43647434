//! Deterministic multi-domain generator of 1-D clutter-like spectra, plus the
//! on-disk dataset format (`<name>.bin` raw little-endian f64 + `<name>.json`
//! sidecar, version `msadgn-ds-v1`).
//!
//! Three categories share one signal layout: sea clutter has twin peaks
//! symmetric about zero Doppler, land clutter a single sharp zero-Doppler
//! peak, and boundary clutter mixes both. Domains differ by spectral
//! smoothing width (the coherent-integration analog), noise level, amplitude
//! scale, and Doppler shift.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

pub const DATASET_FORMAT_VERSION: &str = "msadgn-ds-v1";
pub const NUM_CLASSES: usize = 3;

/// Knobs defining one domain's distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClutterDomainSpec {
    pub domain_id: usize,
    /// Gaussian smoothing sigma in bins; larger widths blur spectral detail.
    pub smoothing_width: f64,
    pub noise_sigma: f64,
    pub amplitude_scale: f64,
    /// Doppler shift in bins (may be fractional; positive shifts right).
    pub doppler_shift: f64,
    pub seed: u64,
}

impl ClutterDomainSpec {
    fn validate(&self) -> Result<()> {
        if self.domain_id < 1 {
            return Err(Error::Parameter("domain_id must be >= 1".into()));
        }
        if !self.smoothing_width.is_finite() || self.smoothing_width <= 0.0 {
            return Err(Error::Parameter(format!(
                "smoothing_width must be positive, got {}",
                self.smoothing_width
            )));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::Parameter(format!(
                "noise_sigma must be nonnegative, got {}",
                self.noise_sigma
            )));
        }
        if !self.amplitude_scale.is_finite() || self.amplitude_scale <= 0.0 {
            return Err(Error::Parameter(format!(
                "amplitude_scale must be positive, got {}",
                self.amplitude_scale
            )));
        }
        Ok(())
    }
}

/// Samples of one domain. Unlabeled datasets keep their ground truth hidden:
/// [`DomainDataset::labels`] exposes categories only when the dataset is
/// labeled, while [`DomainDataset::audit_labels`] is the separate read path
/// reserved for pseudolabel-quality audits.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    domain_id: usize,
    signal_len: usize,
    /// `n * signal_len`, row-major.
    signals: Vec<f64>,
    labels: Option<Vec<usize>>,
    audit: Option<Vec<usize>>,
    spec: Option<ClutterDomainSpec>,
}

impl DomainDataset {
    pub fn new(
        domain_id: usize,
        signal_len: usize,
        signals: Vec<f64>,
        labels: Option<Vec<usize>>,
    ) -> Result<DomainDataset> {
        if signal_len == 0 || !signals.len().is_multiple_of(signal_len) {
            return Err(Error::Data(format!(
                "signal buffer of {} values is not a multiple of signal_len {signal_len}",
                signals.len()
            )));
        }
        let n = signals.len() / signal_len;
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::Data(format!(
                    "{} labels for {n} signals",
                    l.len()
                )));
            }
        }
        Ok(DomainDataset { domain_id, signal_len, signals, labels, audit: None, spec: None })
    }

    pub fn domain_id(&self) -> usize {
        self.domain_id
    }

    pub fn len_signals(&self) -> usize {
        self.signals.len() / self.signal_len
    }

    pub fn signal_len(&self) -> usize {
        self.signal_len
    }

    pub fn labeled(&self) -> bool {
        self.labels.is_some()
    }

    /// Category labels, available only on labeled datasets.
    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Hidden ground truth retained on stripped datasets. Audit use only —
    /// never feed these back into training.
    pub fn audit_labels(&self) -> Option<&[usize]> {
        self.audit.as_deref()
    }

    pub fn generator_spec(&self) -> Option<&ClutterDomainSpec> {
        self.spec.as_ref()
    }

    pub fn signal(&self, i: usize) -> &[f64] {
        &self.signals[i * self.signal_len..(i + 1) * self.signal_len]
    }

    /// Move category labels out of the public path, keeping them for audits.
    pub fn strip_labels(mut self) -> DomainDataset {
        if let Some(l) = self.labels.take() {
            self.audit = Some(l);
        }
        self
    }

    /// Batch tensor `[m × 1 × len]` for the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(indices.len() * self.signal_len);
        for &i in indices {
            if i >= self.len_signals() {
                return Err(Error::Data(format!(
                    "sample index {i} out of range for {} signals",
                    self.len_signals()
                )));
            }
            data.extend_from_slice(self.signal(i));
        }
        Tensor::from_vec(data, &[indices.len(), 1, self.signal_len])
    }

    pub fn labels_for(&self, indices: &[usize]) -> Option<Vec<usize>> {
        self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect())
    }
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

fn gaussian_bump(len: usize, center: f64, sigma: f64, amplitude: f64, out: &mut [f64]) {
    for (i, v) in out.iter_mut().enumerate().take(len) {
        let d = (i as f64 - center) / sigma;
        *v += amplitude * (-0.5 * d * d).exp();
    }
}

/// Pure class template before any domain effect. Sea: twin peaks at
/// `center ± len/4`; land: one sharp central peak; boundary: their mixture.
pub fn class_template(class: usize, len: usize) -> Vec<f64> {
    let mut t = vec![0.0; len];
    let center = len as f64 / 2.0;
    let offset = len as f64 / 4.0;
    let sea_sigma = (len as f64 / 48.0).max(1.5);
    let land_sigma = (len as f64 / 64.0).max(1.0);
    match class {
        0 => {
            gaussian_bump(len, center - offset, sea_sigma, 0.9, &mut t);
            gaussian_bump(len, center + offset, sea_sigma, 0.9, &mut t);
        }
        1 => {
            gaussian_bump(len, center, land_sigma, 1.0, &mut t);
        }
        _ => {
            gaussian_bump(len, center - offset, sea_sigma, 0.45, &mut t);
            gaussian_bump(len, center + offset, sea_sigma, 0.45, &mut t);
            gaussian_bump(len, center, land_sigma, 0.5, &mut t);
        }
    }
    t
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    for v in k.iter_mut() {
        *v /= total;
    }
    k
}

fn smooth(signal: &[f64], sigma: f64) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let n = signal.len() as i64;
    (0..n)
        .map(|i| {
            let mut s = 0.0;
            for (j, &kv) in kernel.iter().enumerate() {
                let pos = i + j as i64 - radius;
                if pos >= 0 && pos < n {
                    s += kv * signal[pos as usize];
                }
            }
            s
        })
        .collect()
}

/// Shift right by `bins` (fractional, linear interpolation, zero fill).
fn shift(signal: &[f64], bins: f64) -> Vec<f64> {
    let n = signal.len() as f64;
    (0..signal.len())
        .map(|i| {
            let src = i as f64 - bins;
            if src < 0.0 || src > n - 1.0 {
                return 0.0;
            }
            let lo = src.floor() as usize;
            let frac = src - lo as f64;
            if frac == 0.0 {
                signal[lo]
            } else {
                signal[lo] * (1.0 - frac) + signal[lo + 1] * frac
            }
        })
        .collect()
}

fn normalize(signal: &mut [f64]) {
    for v in signal.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let max = signal.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        for v in signal.iter_mut() {
            *v /= max;
        }
    }
}

/// Generate one domain: `n_per_class` signals per category, deterministic in
/// `spec.seed`. The per-class base signal is the pure template smoothed by
/// `smoothing_width`, scaled, and Doppler-shifted; each sample adds white
/// noise and is max-normalized into `[0,1]` as the final step.
pub fn generate_domain(
    spec: &ClutterDomainSpec,
    n_per_class: usize,
    len: usize,
) -> Result<DomainDataset> {
    spec.validate()?;
    if n_per_class < 1 {
        return Err(Error::Parameter("n_per_class must be >= 1".into()));
    }
    if len < 32 {
        return Err(Error::Parameter(format!("signal length must be >= 32, got {len}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = if spec.noise_sigma > 0.0 {
        Some(Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Parameter(e.to_string()))?)
    } else {
        None
    };

    let n = NUM_CLASSES * n_per_class;
    let mut signals = Vec::with_capacity(n * len);
    let mut labels = Vec::with_capacity(n);
    for class in 0..NUM_CLASSES {
        let template = class_template(class, len);
        let smoothed = smooth(&template, spec.smoothing_width);
        let scaled: Vec<f64> = smoothed.iter().map(|v| v * spec.amplitude_scale).collect();
        let base = shift(&scaled, spec.doppler_shift);
        for _ in 0..n_per_class {
            let mut sig = base.clone();
            if let Some(dist) = &noise {
                for v in sig.iter_mut() {
                    *v += dist.sample(&mut rng);
                }
            }
            normalize(&mut sig);
            signals.extend_from_slice(&sig);
            labels.push(class);
        }
    }

    let mut ds = DomainDataset::new(spec.domain_id, len, signals, Some(labels))?;
    ds.spec = Some(spec.clone());
    Ok(ds)
}

/// Default graded domain spec: smoothing width doubles per domain, noise
/// grows by 0.01, Doppler shifts alternate 0, +2, −2, +4, −4, ...
pub fn default_domain_spec(domain_id: usize, base_seed: u64) -> ClutterDomainSpec {
    let magnitude = 2.0 * (domain_id / 2) as f64;
    let doppler_shift = if domain_id == 1 {
        0.0
    } else if domain_id.is_multiple_of(2) {
        magnitude
    } else {
        -magnitude
    };
    ClutterDomainSpec {
        domain_id,
        smoothing_width: 2f64.powi(domain_id as i32 - 1),
        noise_sigma: 0.02 + 0.01 * (domain_id as f64 - 1.0),
        amplitude_scale: 1.0,
        doppler_shift,
        seed: base_seed ^ domain_id as u64,
    }
}

/// Build the leave-one-domain-out benchmark: sources are domains `1..=k`
/// (domain 1 labeled, the rest stripped to audit-only labels) and the target
/// is `target_domain`, which must not collide with a source id. The target
/// stays labeled for evaluation only.
pub fn make_benchmark(
    base_seed: u64,
    k: usize,
    target_domain: usize,
    n_per_class: usize,
    len: usize,
) -> Result<(Vec<DomainDataset>, DomainDataset)> {
    if k < 2 {
        return Err(Error::Parameter(format!("need at least 2 source domains, got {k}")));
    }
    if (1..=k).contains(&target_domain) {
        return Err(Error::Parameter(format!(
            "target domain {target_domain} is one of the source domains 1..={k}"
        )));
    }
    let mut sources = Vec::with_capacity(k);
    for id in 1..=k {
        let ds = generate_domain(&default_domain_spec(id, base_seed), n_per_class, len)?;
        sources.push(if id == 1 { ds } else { ds.strip_labels() });
    }
    let target = generate_domain(&default_domain_spec(target_domain, base_seed), n_per_class, len)?;
    Ok((sources, target))
}

// ---------------------------------------------------------------------------
// On-disk format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct Sidecar {
    format_version: String,
    shape: [usize; 3],
    domain_id: usize,
    labeled: bool,
    labels: Option<Vec<usize>>,
    audit_labels: Option<Vec<usize>>,
    spec: Option<ClutterDomainSpec>,
}

fn dataset_paths(base: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    (base.with_extension("bin"), base.with_extension("json"))
}

/// Write `<base>.bin` (raw little-endian f64) and `<base>.json` (metadata).
pub fn save_dataset(ds: &DomainDataset, base: &Path) -> Result<()> {
    let (bin_path, json_path) = dataset_paths(base);
    let sidecar = Sidecar {
        format_version: DATASET_FORMAT_VERSION.to_string(),
        shape: [ds.len_signals(), 1, ds.signal_len],
        domain_id: ds.domain_id,
        labeled: ds.labeled(),
        labels: ds.labels.clone(),
        audit_labels: ds.audit.clone(),
        spec: ds.spec.clone(),
    };
    let mut bin = fs::File::create(&bin_path)?;
    let mut bytes = Vec::with_capacity(ds.signals.len() * 8);
    for v in &ds.signals {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bin.write_all(&bytes)?;
    fs::write(&json_path, serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

/// Load a dataset pair written by [`save_dataset`], verifying version,
/// size, and metadata consistency.
pub fn load_dataset(base: &Path) -> Result<DomainDataset> {
    let (bin_path, json_path) = dataset_paths(base);
    let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(&json_path)?)?;
    if sidecar.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "format_version: expected {DATASET_FORMAT_VERSION}, found {}",
            sidecar.format_version
        )));
    }
    let [n, one, len] = sidecar.shape;
    if one != 1 {
        return Err(Error::Format(format!("shape: expected channel dim 1, found {one}")));
    }
    let mut bytes = Vec::new();
    fs::File::open(&bin_path)?.read_to_end(&mut bytes)?;
    let expected = n * len * 8;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "shape: sidecar declares {n} signals of length {len} ({expected} bytes) but binary holds {} bytes",
            bytes.len()
        )));
    }
    let signals: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if sidecar.labeled != sidecar.labels.is_some() {
        return Err(Error::Format(
            "labeled: flag disagrees with presence of the label array".into(),
        ));
    }
    if let Some(l) = &sidecar.labels {
        if l.len() != n {
            return Err(Error::Format(format!(
                "labels: {} entries for {n} signals",
                l.len()
            )));
        }
    }
    if let Some(l) = &sidecar.audit_labels {
        if l.len() != n {
            return Err(Error::Format(format!(
                "audit_labels: {} entries for {n} signals",
                l.len()
            )));
        }
    }
    let mut ds = DomainDataset::new(sidecar.domain_id, len, signals, sidecar.labels)?;
    ds.audit = sidecar.audit_labels;
    ds.spec = sidecar.spec;
    Ok(ds)
}

/// One row per signal; the label column comes last and is omitted for
/// unlabeled datasets.
pub fn export_csv(ds: &DomainDataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for i in 0..ds.len_signals() {
        let row: Vec<String> = ds.signal(i).iter().map(|v| format!("{v}")).collect();
        out.push_str(&row.join(","));
        if let Some(labels) = ds.labels() {
            out.push(',');
            out.push_str(&labels[i].to_string());
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}
