//! Embedding traces: the per-layer representations of a set of inputs.
//!
//! On disk a trace set is a JSON manifest next to a raw little-endian `f32`
//! tensor of shape `[N, L, d]` and an optional raw little-endian `u32` label
//! file. When `has_logits` is set, the last layer row holds classifier logits
//! in its first `logits_dim` coordinates, zero padded up to `d`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, norm};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSOR_FILE: &str = "tensor.f32";
pub const LABELS_FILE: &str = "labels.u32";

/// Immutable set of embedding traces, `N` samples by `L` layers by `d` dims.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTraceSet {
    n_samples: usize,
    n_layers: usize,
    dim: usize,
    values: Vec<f32>,
    labels: Option<Vec<u32>>,
    logits_dim: Option<usize>,
    class_count: usize,
}

impl EmbeddingTraceSet {
    /// Builds a validated trace set. `logits_dim = Some(k)` marks the last
    /// layer as a logits row of width `k`.
    pub fn new(
        n_samples: usize,
        n_layers: usize,
        dim: usize,
        values: Vec<f32>,
        labels: Option<Vec<u32>>,
        logits_dim: Option<usize>,
        class_count: usize,
    ) -> Result<Self> {
        if n_samples == 0 {
            return Err(Error::Data("trace set has no samples".into()));
        }
        if n_layers == 0 || dim == 0 {
            return Err(Error::Data("trace set needs at least one layer and one dimension".into()));
        }
        if class_count == 0 {
            return Err(Error::Data("class_count must be positive".into()));
        }
        let expected = n_samples * n_layers * dim;
        if values.len() != expected {
            return Err(Error::Format(format!(
                "tensor holds {} values, shape requires {expected}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value at sample {}",
                pos / (n_layers * dim)
            )));
        }
        if let Some(labels) = &labels {
            if labels.len() != n_samples {
                return Err(Error::Format(format!(
                    "{} labels for {n_samples} samples",
                    labels.len()
                )));
            }
            let mut counts = vec![0usize; class_count];
            for (i, &y) in labels.iter().enumerate() {
                let y = y as usize;
                if y >= class_count {
                    return Err(Error::Data(format!(
                        "label {y} of sample {i} out of range for {class_count} classes"
                    )));
                }
                counts[y] += 1;
            }
            if let Some(y) = counts.iter().position(|&c| c < 2) {
                return Err(Error::Data(format!(
                    "class {y} has {} samples, at least 2 required",
                    counts[y]
                )));
            }
        }
        if let Some(k) = logits_dim {
            if k == 0 || k > dim {
                return Err(Error::Format(format!("logits_dim {k} not in 1..={dim}")));
            }
            let last = n_layers - 1;
            for i in 0..n_samples {
                let start = (i * n_layers + last) * dim;
                if values[start + k..start + dim].iter().any(|&v| v != 0.0) {
                    return Err(Error::Data(format!(
                        "sample {i}: logits row has non-zero padding beyond logits_dim {k}"
                    )));
                }
            }
        }
        Ok(Self {
            n_samples,
            n_layers,
            dim,
            values,
            labels,
            logits_dim,
            class_count,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn has_logits(&self) -> bool {
        self.logits_dim.is_some()
    }

    pub fn logits_dim(&self) -> Option<usize> {
        self.logits_dim
    }

    /// Index of the logits row, if any.
    pub fn logits_layer(&self) -> Option<usize> {
        self.logits_dim.map(|_| self.n_layers - 1)
    }

    /// Index of the last encoder (non-logits) layer.
    pub fn last_encoder_layer(&self) -> Result<usize> {
        let encoder_layers = self.encoder_layer_count();
        if encoder_layers == 0 {
            return Err(Error::Data("trace set has no encoder layers".into()));
        }
        Ok(encoder_layers - 1)
    }

    pub fn encoder_layer_count(&self) -> usize {
        self.n_layers - usize::from(self.has_logits())
    }

    /// Layers fed to the scorers: all encoder layers, plus the logits row if
    /// requested and present.
    pub fn scored_layers(&self, include_logits: bool) -> Vec<usize> {
        let n = if include_logits {
            self.n_layers
        } else {
            self.encoder_layer_count()
        };
        (0..n).collect()
    }

    /// Number of meaningful coordinates in a layer row.
    pub fn layer_width(&self, layer: usize) -> usize {
        match self.logits_dim {
            Some(k) if layer == self.n_layers - 1 => k,
            _ => self.dim,
        }
    }

    /// Raw stored row, including padding.
    pub fn raw_row(&self, sample: usize, layer: usize) -> &[f32] {
        let start = (sample * self.n_layers + layer) * self.dim;
        &self.values[start..start + self.dim]
    }

    /// Embedding of `sample` at `layer`, promoted to `f64` and cut to the
    /// layer width.
    pub fn embedding(&self, sample: usize, layer: usize) -> Vec<f64> {
        let w = self.layer_width(layer);
        self.raw_row(sample, layer)[..w]
            .iter()
            .map(|&v| f64::from(v))
            .collect()
    }

    /// Full `[L, d]` trace of one sample (padding included), as `f64`.
    pub fn trace(&self, sample: usize) -> Vec<Vec<f64>> {
        (0..self.n_layers)
            .map(|l| self.embedding(sample, l))
            .collect()
    }

    /// Classifier logits of a sample when the set carries them.
    pub fn logits(&self, sample: usize) -> Option<Vec<f64>> {
        self.logits_layer().map(|l| self.embedding(sample, l))
    }

    /// Sample indices of class `y`, in ascending order.
    pub fn class_indices(&self, y: usize) -> Vec<usize> {
        match &self.labels {
            Some(labels) => labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l as usize == y)
                .map(|(i, _)| i)
                .collect(),
            None => Vec::new(),
        }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

/// Read access to per-sample, per-layer embeddings, whatever their storage.
pub trait Embeddings: Sync {
    fn n_samples(&self) -> usize;
    fn n_layers(&self) -> usize;
    fn class_count(&self) -> usize;
    fn labels(&self) -> Option<&[u32]>;
    fn layer_width(&self, layer: usize) -> usize;
    fn embedding(&self, sample: usize, layer: usize) -> Vec<f64>;

    /// Layers a scorer covers by default.
    fn scored_layers(&self, _include_logits: bool) -> Vec<usize> {
        (0..self.n_layers()).collect()
    }

    fn trace(&self, sample: usize) -> Vec<Vec<f64>> {
        (0..self.n_layers())
            .map(|l| self.embedding(sample, l))
            .collect()
    }

    fn class_indices(&self, y: usize) -> Vec<usize> {
        match self.labels() {
            Some(labels) => (0..labels.len())
                .filter(|&i| labels[i] as usize == y)
                .collect(),
            None => Vec::new(),
        }
    }

    fn require_labels(&self) -> Result<&[u32]> {
        self.labels()
            .ok_or_else(|| Error::Data("labels are required for this operation".into()))
    }
}

impl Embeddings for EmbeddingTraceSet {
    fn n_samples(&self) -> usize {
        self.n_samples
    }
    fn n_layers(&self) -> usize {
        self.n_layers
    }
    fn class_count(&self) -> usize {
        self.class_count
    }
    fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }
    fn layer_width(&self, layer: usize) -> usize {
        EmbeddingTraceSet::layer_width(self, layer)
    }
    fn embedding(&self, sample: usize, layer: usize) -> Vec<f64> {
        EmbeddingTraceSet::embedding(self, sample, layer)
    }
    fn scored_layers(&self, include_logits: bool) -> Vec<usize> {
        EmbeddingTraceSet::scored_layers(self, include_logits)
    }
}

/// In-memory `f64` embeddings of uniform width, e.g. derived features.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseEmbeddings {
    n_samples: usize,
    n_layers: usize,
    dim: usize,
    values: Vec<f64>,
    labels: Option<Vec<u32>>,
    class_count: usize,
}

impl DenseEmbeddings {
    pub fn new(
        n_samples: usize,
        n_layers: usize,
        dim: usize,
        values: Vec<f64>,
        labels: Option<Vec<u32>>,
        class_count: usize,
    ) -> Result<Self> {
        if values.len() != n_samples * n_layers * dim {
            return Err(Error::DimensionMismatch {
                expected: n_samples * n_layers * dim,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite embedding value".into()));
        }
        if let Some(l) = &labels {
            if l.len() != n_samples || l.iter().any(|&y| y as usize >= class_count) {
                return Err(Error::Data("labels inconsistent with samples / classes".into()));
            }
        }
        Ok(Self {
            n_samples,
            n_layers,
            dim,
            values,
            labels,
            class_count,
        })
    }
}

impl Embeddings for DenseEmbeddings {
    fn n_samples(&self) -> usize {
        self.n_samples
    }
    fn n_layers(&self) -> usize {
        self.n_layers
    }
    fn class_count(&self) -> usize {
        self.class_count
    }
    fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }
    fn layer_width(&self, _layer: usize) -> usize {
        self.dim
    }
    fn embedding(&self, sample: usize, layer: usize) -> Vec<f64> {
        let start = (sample * self.n_layers + layer) * self.dim;
        self.values[start..start + self.dim].to_vec()
    }
}

/// On-disk manifest describing a trace set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tensor: String,
    pub shape: [usize; 3],
    pub labels: Option<String>,
    pub has_logits: bool,
    pub logits_dim: Option<usize>,
    pub class_count: usize,
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads and validates a trace set from its manifest. Relative paths inside
/// the manifest are resolved against the manifest's directory.
pub fn load_trace_set(manifest_path: impl AsRef<Path>) -> Result<EmbeddingTraceSet> {
    let manifest_path = manifest_path.as_ref();
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let [n, l, d] = manifest.shape;
    let tensor_path = resolve(base, &manifest.tensor);
    let bytes = fs::read(&tensor_path).map_err(|e| Error::io(&tensor_path, e))?;
    let expected = 4 * n * l * d;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{}: {} bytes, shape [{n},{l},{d}] requires {expected}",
            tensor_path.display(),
            bytes.len()
        )));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let labels = match &manifest.labels {
        Some(p) => {
            let path = resolve(base, p);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if bytes.len() != 4 * n {
                return Err(Error::Format(format!(
                    "{}: {} bytes, {n} labels require {}",
                    path.display(),
                    bytes.len(),
                    4 * n
                )));
            }
            Some(
                bytes
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            )
        }
        None => None,
    };

    let logits_dim = match (manifest.has_logits, manifest.logits_dim) {
        (true, Some(k)) => Some(k),
        (true, None) => Some(d),
        (false, None) => None,
        (false, Some(_)) => {
            return Err(Error::Format("logits_dim given but has_logits is false".into()))
        }
    };

    EmbeddingTraceSet::new(n, l, d, values, labels, logits_dim, manifest.class_count)
}

/// Writes `manifest.json`, `tensor.f32` and (when labelled) `labels.u32`
/// into `dir`, creating it if needed. Returns the manifest path.
pub fn save_trace_set(set: &EmbeddingTraceSet, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut tensor = Vec::with_capacity(set.values.len() * 4);
    for v in &set.values {
        tensor.extend_from_slice(&v.to_le_bytes());
    }
    let tensor_path = dir.join(TENSOR_FILE);
    fs::write(&tensor_path, tensor).map_err(|e| Error::io(&tensor_path, e))?;

    let labels = match &set.labels {
        Some(labels) => {
            let mut buf = Vec::with_capacity(labels.len() * 4);
            for y in labels {
                buf.extend_from_slice(&y.to_le_bytes());
            }
            let path = dir.join(LABELS_FILE);
            fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
            Some(LABELS_FILE.to_string())
        }
        None => None,
    };

    let manifest = Manifest {
        tensor: TENSOR_FILE.to_string(),
        shape: [set.n_samples, set.n_layers, set.dim],
        labels,
        has_logits: set.has_logits(),
        logits_dim: set.logits_dim,
        class_count: set.class_count,
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

/// Parameters of the layered-Gaussian benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_in_test: usize,
    pub n_out_test: usize,
    pub class_count: usize,
    pub n_layers: usize,
    pub dim: usize,
    /// The only layer where OOD samples differ from IN samples.
    pub informative_layer: usize,
    /// Pairwise distance between class means, at every layer.
    pub in_class_separation: f64,
    /// Norm of the OOD mean shift at `informative_layer`.
    pub ood_shift: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_in_test: 1000,
            n_out_test: 1000,
            class_count: 4,
            n_layers: 8,
            dim: 16,
            informative_layer: 3,
            in_class_separation: 4.0,
            ood_shift: 6.0,
            noise_scale: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.n_train == 0 || self.n_in_test == 0 || self.n_out_test == 0 {
            return bad("sample counts must be positive");
        }
        if self.class_count == 0 || self.n_layers == 0 || self.dim == 0 {
            return bad("class_count, n_layers and dim must be positive");
        }
        if self.n_train < 2 * self.class_count {
            return bad("n_train must provide at least 2 samples per class");
        }
        if self.informative_layer >= self.n_layers {
            return bad("informative_layer must be < n_layers");
        }
        if !(self.ood_shift >= 0.0 && self.ood_shift.is_finite()) {
            return bad("ood_shift must be finite and >= 0");
        }
        if !(self.noise_scale > 0.0 && self.noise_scale.is_finite()) {
            return bad("noise_scale must be finite and > 0");
        }
        if !(self.in_class_separation >= 0.0 && self.in_class_separation.is_finite()) {
            return bad("in_class_separation must be finite and >= 0");
        }
        Ok(())
    }
}

/// Output of [`synth_generate`].
#[derive(Debug, Clone)]
pub struct SynthBench {
    pub train: EmbeddingTraceSet,
    pub in_test: EmbeddingTraceSet,
    pub out_test: EmbeddingTraceSet,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, d);
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Removes the components of `v` along the orthonormal `basis`.
fn project_out(v: &mut [f64], basis: &[Vec<f64>]) {
    for q in basis {
        let c = dot(v, q);
        for (x, qi) in v.iter_mut().zip(q) {
            *x -= c * qi;
        }
    }
}

/// `count` random orthonormal vectors in `R^d` (`count <= d`).
fn orthonormal_frame(rng: &mut ChaCha8Rng, d: usize, count: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = gaussian_vec(rng, d);
        project_out(&mut v, &basis);
        let n = norm(&v);
        if n > 1e-8 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

struct LayerGeometry {
    /// Class means, `[C][d]`.
    means: Vec<Vec<f64>>,
    /// Orthonormal basis of the span of the class means (empty when `C > d`).
    mean_span: Vec<Vec<f64>>,
}

/// Generates the train / IN-test / OOD-test benchmark.
///
/// Class means sit at scaled simplex vertices `s / sqrt(2) * q_y` of a random
/// orthonormal frame per layer, so every pair is exactly `s` apart. When there
/// are more classes than dimensions the means fall back to random directions
/// of the same norm. OOD samples are IN draws whose mean is moved, at the
/// informative layer only, by a fixed vector orthogonal to the class means.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthBench> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (c, l, d) = (cfg.class_count, cfg.n_layers, cfg.dim);
    let radius = cfg.in_class_separation / std::f64::consts::SQRT_2;

    let geometry: Vec<LayerGeometry> = (0..l)
        .map(|_| {
            if c <= d {
                let frame = orthonormal_frame(&mut rng, d, c);
                let means = frame
                    .iter()
                    .map(|q| q.iter().map(|x| x * radius).collect())
                    .collect();
                LayerGeometry {
                    means,
                    mean_span: frame,
                }
            } else {
                let means = (0..c)
                    .map(|_| unit_vec(&mut rng, d).into_iter().map(|x| x * radius).collect())
                    .collect();
                LayerGeometry {
                    means,
                    mean_span: Vec::new(),
                }
            }
        })
        .collect();

    let shift_dir = {
        let span = &geometry[cfg.informative_layer].mean_span;
        let mut dir = gaussian_vec(&mut rng, d);
        if span.len() < d {
            project_out(&mut dir, span);
        }
        let n = norm(&dir);
        dir.into_iter().map(|v| v / n).collect::<Vec<f64>>()
    };

    let draw = |rng: &mut ChaCha8Rng, n: usize, labelled: bool, shift: f64| {
        let mut values = Vec::with_capacity(n * l * d);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = if labelled { i % c } else { rng.random_range(0..c) };
            labels.push(y as u32);
            for (layer, geo) in geometry.iter().enumerate() {
                let mut z: Vec<f64> = geo.means[y]
                    .iter()
                    .map(|m| m + cfg.noise_scale * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                if layer == cfg.informative_layer {
                    for (zi, di) in z.iter_mut().zip(&shift_dir) {
                        *zi += shift * di;
                    }
                }
                values.extend(z.into_iter().map(|v| v as f32));
            }
        }
        (values, labels)
    };

    let (train_vals, train_labels) = draw(&mut rng, cfg.n_train, true, 0.0);
    let (in_vals, _) = draw(&mut rng, cfg.n_in_test, false, 0.0);
    let (out_vals, _) = draw(&mut rng, cfg.n_out_test, false, cfg.ood_shift);

    Ok(SynthBench {
        train: EmbeddingTraceSet::new(cfg.n_train, l, d, train_vals, Some(train_labels), None, c)?,
        in_test: EmbeddingTraceSet::new(cfg.n_in_test, l, d, in_vals, None, None, c)?,
        out_test: EmbeddingTraceSet::new(cfg.n_out_test, l, d, out_vals, None, None, c)?,
    })
}
