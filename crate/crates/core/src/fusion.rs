//! Feature-level fusion: L2 normalization, flip averaging/concatenation,
//! 8-way concatenation, per-dimension range normalization, and a
//! three-layer stacked auto-encoder whose third (linear) encoding is the
//! face signature.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::io_util;
use crate::nn::layers::{fc_backward, fc_forward};
use crate::nn::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("feature assembly error: {0}")]
    Assembly(String),
    #[error("SAE training diverged at layer {layer}, epoch {epoch}")]
    Divergence { layer: usize, epoch: usize },
    #[error("invalid SAE spec: {0}")]
    Spec(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// The eight modality sources, canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModalityTag {
    H1,
    H2,
    P1,
    P2,
    P3,
    P4,
    P5,
    P6,
}

impl ModalityTag {
    pub const ALL: [ModalityTag; 8] = [
        ModalityTag::H1,
        ModalityTag::H2,
        ModalityTag::P1,
        ModalityTag::P2,
        ModalityTag::P3,
        ModalityTag::P4,
        ModalityTag::P5,
        ModalityTag::P6,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ModalityTag::H1 => "H1",
            ModalityTag::H2 => "H2",
            ModalityTag::P1 => "P1",
            ModalityTag::P2 => "P2",
            ModalityTag::P3 => "P3",
            ModalityTag::P4 => "P4",
            ModalityTag::P5 => "P5",
            ModalityTag::P6 => "P6",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&t| t == self).unwrap()
    }

    pub fn from_label(s: &str) -> Option<ModalityTag> {
        Self::ALL.iter().copied().find(|t| t.label() == s)
    }
}

/// Subset of the eight modalities as a bitmask over `ModalityTag::ALL`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModalityMask(pub u8);

impl ModalityMask {
    pub const ALL: ModalityMask = ModalityMask(0xFF);

    pub fn from_tags(tags: &[ModalityTag]) -> ModalityMask {
        let mut bits = 0u8;
        for t in tags {
            bits |= 1 << t.index();
        }
        ModalityMask(bits)
    }

    pub fn contains(self, tag: ModalityTag) -> bool {
        self.0 & (1 << tag.index()) != 0
    }

    /// Active tags in canonical order.
    pub fn tags(self) -> Vec<ModalityTag> {
        ModalityTag::ALL
            .into_iter()
            .filter(|t| self.contains(*t))
            .collect()
    }

    pub fn count(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// Parses "H1,P3,P4"; "all" selects every modality.
    pub fn parse(s: &str) -> Result<ModalityMask, FusionError> {
        if s.trim() == "all" {
            return Ok(ModalityMask::ALL);
        }
        let mut tags = Vec::new();
        for part in s.split(',') {
            let part = part.trim();
            let tag = ModalityTag::from_label(part)
                .ok_or_else(|| FusionError::Assembly(format!("unknown modality '{part}'")))?;
            tags.push(tag);
        }
        if tags.is_empty() {
            return Err(FusionError::Assembly("empty modality mask".into()));
        }
        Ok(ModalityMask::from_tags(&tags))
    }
}

impl std::fmt::Display for ModalityMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let labels: Vec<&str> = self.tags().iter().map(|t| t.label()).collect();
        write!(f, "{}", labels.join(","))
    }
}

/// One modality's feature vector with its source tag.
#[derive(Debug, Clone)]
pub struct ModalFeature {
    pub tag: ModalityTag,
    pub values: Vec<f32>,
}

pub fn l2_normalize(v: &[f32]) -> Result<Vec<f32>, FusionError> {
    let norm = v
        .iter()
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if norm <= 0.0 {
        return Err(FusionError::ZeroVector);
    }
    Ok(v.iter().map(|&x| (x as f64 / norm) as f32).collect())
}

/// Elementwise mean of the original-image and flipped-image features.
pub fn flip_average(original: &[f32], flipped: &[f32]) -> Result<Vec<f32>, FusionError> {
    if original.len() != flipped.len() {
        return Err(FusionError::Dimension(format!(
            "flip_average: {} vs {}",
            original.len(),
            flipped.len()
        )));
    }
    Ok(original
        .iter()
        .zip(flipped)
        .map(|(&a, &b)| 0.5 * (a + b))
        .collect())
}

/// Stacked [original; flipped] vector of length 2d.
pub fn flip_concat(original: &[f32], flipped: &[f32]) -> Result<Vec<f32>, FusionError> {
    if original.len() != flipped.len() {
        return Err(FusionError::Dimension(format!(
            "flip_concat: {} vs {}",
            original.len(),
            flipped.len()
        )));
    }
    let mut out = Vec::with_capacity(2 * original.len());
    out.extend_from_slice(original);
    out.extend_from_slice(flipped);
    Ok(out)
}

/// Concatenates per-modality features, demanding exactly the canonical
/// source order for the given mask.
pub fn concat_features(
    features: &[ModalFeature],
    mask: ModalityMask,
) -> Result<Vec<f32>, FusionError> {
    let expected = mask.tags();
    if features.len() != expected.len() {
        return Err(FusionError::Assembly(format!(
            "expected {} features for mask {mask}, got {}",
            expected.len(),
            features.len()
        )));
    }
    for (f, want) in features.iter().zip(&expected) {
        if f.tag != *want {
            return Err(FusionError::Assembly(format!(
                "feature order violation: expected {}, got {}",
                want.label(),
                f.tag.label()
            )));
        }
    }
    let mut out = Vec::with_capacity(features.iter().map(|f| f.values.len()).sum());
    for f in features {
        out.extend_from_slice(&f.values);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SaeNonlinearity {
    Sigmoid,
    Tanh,
}

impl SaeNonlinearity {
    /// Target interval of the matching input normalization.
    pub fn interval(self) -> (f32, f32) {
        match self {
            SaeNonlinearity::Sigmoid => (0.0, 1.0),
            SaeNonlinearity::Tanh => (-1.0, 1.0),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            SaeNonlinearity::Sigmoid => "sigmoid",
            SaeNonlinearity::Tanh => "tanh",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        match s {
            "sigmoid" => Some(SaeNonlinearity::Sigmoid),
            "tanh" => Some(SaeNonlinearity::Tanh),
            _ => None,
        }
    }
}

/// Elementwise activation.
pub fn sae_activation<T: Scalar>(kind: SaeNonlinearity, z: &[T]) -> Vec<T> {
    match kind {
        SaeNonlinearity::Sigmoid => z
            .iter()
            .map(|&v| T::one() / (T::one() + (-v).exp()))
            .collect(),
        SaeNonlinearity::Tanh => z.iter().map(|&v| v.tanh()).collect(),
    }
}

/// Backward in terms of the activation value: sigmoid' = s(1-s),
/// tanh' = 1 - t^2.
pub fn sae_activation_backward<T: Scalar>(
    kind: SaeNonlinearity,
    activated: &[T],
    g: &[T],
) -> Vec<T> {
    match kind {
        SaeNonlinearity::Sigmoid => activated
            .iter()
            .zip(g)
            .map(|(&s, &gi)| gi * s * (T::one() - s))
            .collect(),
        SaeNonlinearity::Tanh => activated
            .iter()
            .zip(g)
            .map(|(&t, &gi)| gi * (T::one() - t * t))
            .collect(),
    }
}

/// Per-dimension min-max map into the nonlinearity's interval, frozen on
/// the training set. Apply-time values clamp into the interval; constant
/// training dimensions map to the midpoint.
#[derive(Debug, Clone)]
pub struct RangeNormalizer {
    pub lo: f32,
    pub hi: f32,
    pub min: Vec<f32>,
    pub max: Vec<f32>,
    /// Dimensions whose training max equaled their min (midpoint-mapped).
    pub constant_dims: usize,
}

pub fn fit_range_normalizer(
    data: &[Vec<f32>],
    nonlinearity: SaeNonlinearity,
) -> Result<RangeNormalizer, FusionError> {
    let first = data
        .first()
        .ok_or_else(|| FusionError::Assembly("empty normalizer training set".into()))?;
    let dim = first.len();
    let mut min = vec![f32::INFINITY; dim];
    let mut max = vec![f32::NEG_INFINITY; dim];
    for x in data {
        if x.len() != dim {
            return Err(FusionError::Dimension(format!(
                "normalizer: inconsistent dims {} vs {dim}",
                x.len()
            )));
        }
        for i in 0..dim {
            min[i] = min[i].min(x[i]);
            max[i] = max[i].max(x[i]);
        }
    }
    let (lo, hi) = nonlinearity.interval();
    let constant_dims = min.iter().zip(&max).filter(|(a, b)| a == b).count();
    Ok(RangeNormalizer {
        lo,
        hi,
        min,
        max,
        constant_dims,
    })
}

impl RangeNormalizer {
    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn apply(&self, x: &[f32]) -> Result<Vec<f32>, FusionError> {
        if x.len() != self.dim() {
            return Err(FusionError::Dimension(format!(
                "normalizer expects dim {}, got {}",
                self.dim(),
                x.len()
            )));
        }
        let mid = 0.5 * (self.lo + self.hi);
        Ok(x.iter()
            .enumerate()
            .map(|(i, &v)| {
                let (mn, mx) = (self.min[i], self.max[i]);
                if mx <= mn {
                    mid
                } else {
                    let t = (v - mn) / (mx - mn);
                    (self.lo + t * (self.hi - self.lo)).clamp(self.lo, self.hi)
                }
            })
            .collect())
    }
}

/// Widths of the three encoders plus the nonlinearity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SaeSpec {
    pub input_dim: usize,
    pub widths: Vec<usize>,
    pub nonlinearity: SaeNonlinearity,
}

impl SaeSpec {
    pub fn new(
        input_dim: usize,
        widths: Vec<usize>,
        nonlinearity: SaeNonlinearity,
    ) -> Result<SaeSpec, FusionError> {
        if widths.len() != 3 {
            return Err(FusionError::Spec(format!(
                "exactly three auto-encoders required, got {}",
                widths.len()
            )));
        }
        if !widths.windows(2).all(|w| w[0] > w[1]) {
            return Err(FusionError::Spec(format!(
                "widths must be strictly decreasing, got {widths:?}"
            )));
        }
        Ok(SaeSpec {
            input_dim,
            widths,
            nonlinearity,
        })
    }

    /// The shipped fusion geometry: input -> 2048 -> 1024 -> 512.
    pub fn default_full(input_dim: usize, nonlinearity: SaeNonlinearity) -> SaeSpec {
        SaeSpec {
            input_dim,
            widths: vec![2048, 1024, 512],
            nonlinearity,
        }
    }

    pub fn signature_dim(&self) -> usize {
        self.widths[2]
    }
}

/// One greedy auto-encoder: nonlinear encoder, linear decoder.
#[derive(Debug, Clone)]
pub struct AeLayer {
    pub enc_w: Tensor<f32>,
    pub enc_b: Vec<f32>,
    pub dec_w: Tensor<f32>,
    pub dec_b: Vec<f32>,
}

impl AeLayer {
    fn init(in_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> AeLayer {
        let enc_n = Normal::new(0.0, (1.0 / in_dim as f64).sqrt()).unwrap();
        let dec_n = Normal::new(0.0, (1.0 / hidden as f64).sqrt()).unwrap();
        AeLayer {
            enc_w: Tensor::from_fn(&[hidden, in_dim], |_| enc_n.sample(rng) as f32),
            enc_b: vec![0.0; hidden],
            dec_w: Tensor::from_fn(&[in_dim, hidden], |_| dec_n.sample(rng) as f32),
            dec_b: vec![0.0; in_dim],
        }
    }

    pub fn encode_pre(&self, x: &[f32]) -> Vec<f32> {
        fc_forward(x, &self.enc_w, &self.enc_b).expect("encoder dims")
    }
}

/// Trained stacked auto-encoder with its input normalizer and the
/// modality mask it was fitted for.
#[derive(Debug, Clone)]
pub struct SaeModel {
    pub spec: SaeSpec,
    pub normalizer: RangeNormalizer,
    pub layers: Vec<AeLayer>,
    pub mask: ModalityMask,
}

#[derive(Debug, Clone)]
pub struct SaeTrainConfig {
    pub epochs_per_layer: usize,
    /// Learning rate decays log-linearly from `lr_start` to `lr_end`
    /// within each layer's schedule.
    pub lr_start: f64,
    pub lr_end: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub rng_seed: u64,
}

impl Default for SaeTrainConfig {
    fn default() -> Self {
        SaeTrainConfig {
            epochs_per_layer: 10,
            lr_start: 0.01,
            lr_end: 1e-5,
            momentum: 0.9,
            batch_size: 32,
            rng_seed: 1,
        }
    }
}

impl SaeTrainConfig {
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        if self.epochs_per_layer <= 1 {
            return self.lr_start;
        }
        let t = epoch as f64 / (self.epochs_per_layer - 1) as f64;
        (self.lr_start.ln() * (1.0 - t) + self.lr_end.ln() * t).exp()
    }
}

/// Per-layer reconstruction-loss log of the greedy training run.
#[derive(Debug, Clone, Default)]
pub struct SaeTrainLog {
    pub per_layer_epoch_loss: Vec<Vec<f64>>,
}

/// Greedy layer-wise training. `features` must already be range-normalized
/// for the spec's nonlinearity; each auto-encoder minimizes mean squared
/// reconstruction of its own input, and layer k trains on layer k-1
/// encodings.
pub fn sae_train_layerwise(
    features: &[Vec<f32>],
    spec: &SaeSpec,
    normalizer: RangeNormalizer,
    mask: ModalityMask,
    cfg: &SaeTrainConfig,
) -> Result<(SaeModel, SaeTrainLog), FusionError> {
    if features.is_empty() {
        return Err(FusionError::Assembly("empty SAE training set".into()));
    }
    if features[0].len() != spec.input_dim {
        return Err(FusionError::Dimension(format!(
            "SAE expects input dim {}, got {}",
            spec.input_dim,
            features[0].len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut layers = Vec::with_capacity(3);
    let mut log = SaeTrainLog::default();
    let mut current: Vec<Vec<f32>> = features.to_vec();
    let kind = spec.nonlinearity;
    for (layer_idx, &hidden) in spec.widths.iter().enumerate() {
        let in_dim = current[0].len();
        let mut ae = AeLayer::init(in_dim, hidden, &mut rng);
        let mut vel_ew = Tensor::<f32>::zeros(&[hidden, in_dim]);
        let mut vel_eb = vec![0.0f32; hidden];
        let mut vel_dw = Tensor::<f32>::zeros(&[in_dim, hidden]);
        let mut vel_db = vec![0.0f32; in_dim];
        let mut order: Vec<usize> = (0..current.len()).collect();
        let mut epoch_losses = Vec::with_capacity(cfg.epochs_per_layer);
        for epoch in 0..cfg.epochs_per_layer {
            let lr = cfg.lr_at_epoch(epoch) as f32;
            order.shuffle(&mut rng);
            let mut loss_sum = 0.0f64;
            for batch in order.chunks(cfg.batch_size) {
                let mut g_ew = Tensor::<f32>::zeros(&[hidden, in_dim]);
                let mut g_eb = vec![0.0f32; hidden];
                let mut g_dw = Tensor::<f32>::zeros(&[in_dim, hidden]);
                let mut g_db = vec![0.0f32; in_dim];
                let scale = 1.0f32 / batch.len() as f32;
                for &i in batch {
                    let x = &current[i];
                    let pre = fc_forward(x, &ae.enc_w, &ae.enc_b).expect("encoder dims");
                    let h = sae_activation(kind, &pre);
                    let y = fc_forward(&h, &ae.dec_w, &ae.dec_b).expect("decoder dims");
                    let inv_d = 1.0f32 / in_dim as f32;
                    let mut dy = vec![0.0f32; in_dim];
                    let mut loss = 0.0f32;
                    for j in 0..in_dim {
                        let e = y[j] - x[j];
                        loss += e * e * inv_d;
                        dy[j] = 2.0 * e * inv_d;
                    }
                    loss_sum += loss as f64;
                    let (dh, ddw, ddb) = fc_backward(&h, &ae.dec_w, &dy);
                    let dpre = sae_activation_backward(kind, &h, &dh);
                    let (_, dew, deb) = fc_backward(x, &ae.enc_w, &dpre);
                    g_dw.add_scaled(&ddw, scale);
                    for (a, b) in g_db.iter_mut().zip(&ddb) {
                        *a += b * scale;
                    }
                    g_ew.add_scaled(&dew, scale);
                    for (a, b) in g_eb.iter_mut().zip(&deb) {
                        *a += b * scale;
                    }
                }
                momentum_step(&mut ae.enc_w, &mut vel_ew, &g_ew, lr, cfg.momentum as f32);
                momentum_step_vec(&mut ae.enc_b, &mut vel_eb, &g_eb, lr, cfg.momentum as f32);
                momentum_step(&mut ae.dec_w, &mut vel_dw, &g_dw, lr, cfg.momentum as f32);
                momentum_step_vec(&mut ae.dec_b, &mut vel_db, &g_db, lr, cfg.momentum as f32);
            }
            let mean = loss_sum / current.len() as f64;
            if !mean.is_finite() {
                return Err(FusionError::Divergence {
                    layer: layer_idx,
                    epoch,
                });
            }
            epoch_losses.push(mean);
        }
        log.per_layer_epoch_loss.push(epoch_losses);
        // Next layer trains on this layer's (nonlinear) encodings.
        current = current
            .iter()
            .map(|x| sae_activation(kind, &ae.encode_pre(x)))
            .collect();
        layers.push(ae);
    }
    Ok((
        SaeModel {
            spec: spec.clone(),
            normalizer,
            layers,
            mask,
        },
        log,
    ))
}

fn momentum_step(w: &mut Tensor<f32>, v: &mut Tensor<f32>, g: &Tensor<f32>, lr: f32, mu: f32) {
    for ((wi, vi), gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
        *vi = mu * *vi - lr * *gi;
        *wi += *vi;
    }
}

fn momentum_step_vec(w: &mut [f32], v: &mut [f32], g: &[f32], lr: f32, mu: f32) {
    for ((wi, vi), gi) in w.iter_mut().zip(v).zip(g) {
        *vi = mu * *vi - lr * *gi;
        *wi += *vi;
    }
}

impl SaeModel {
    /// Encoders 1 and 2 with the nonlinearity, encoder 3 without (the
    /// signature is the pre-nonlinearity readout).
    pub fn encode(&self, normalized: &[f32]) -> Result<Vec<f32>, FusionError> {
        if normalized.len() != self.spec.input_dim {
            return Err(FusionError::Dimension(format!(
                "SAE expects input dim {}, got {}",
                self.spec.input_dim,
                normalized.len()
            )));
        }
        let kind = self.spec.nonlinearity;
        let h1 = sae_activation(kind, &self.layers[0].encode_pre(normalized));
        let h2 = sae_activation(kind, &self.layers[1].encode_pre(&h1));
        Ok(self.layers[2].encode_pre(&h2))
    }

    /// Normalize then encode.
    pub fn signature(&self, concat: &[f32]) -> Result<Vec<f32>, FusionError> {
        let normalized = self.normalizer.apply(concat)?;
        self.encode(&normalized)
    }

    pub fn save(&self, path: &Path) -> Result<(), FusionError> {
        let io_err = |source| FusionError::Io {
            path: path.display().to_string(),
            source,
        };
        let file = File::create(path).map_err(io_err)?;
        let mut w = BufWriter::new(file);
        w.write_all(b"MMSA").map_err(io_err)?;
        io_util::write_u32(&mut w, 1).map_err(io_err)?;
        w.write_all(&[
            match self.spec.nonlinearity {
                SaeNonlinearity::Sigmoid => 0u8,
                SaeNonlinearity::Tanh => 1u8,
            },
            self.mask.0,
        ])
        .map_err(io_err)?;
        io_util::write_u32(&mut w, self.spec.input_dim as u32).map_err(io_err)?;
        io_util::write_u32(&mut w, self.spec.widths.len() as u32).map_err(io_err)?;
        for &width in &self.spec.widths {
            io_util::write_u32(&mut w, width as u32).map_err(io_err)?;
        }
        io_util::write_u32(&mut w, self.normalizer.dim() as u32).map_err(io_err)?;
        io_util::write_f32_slice(&mut w, &self.normalizer.min).map_err(io_err)?;
        io_util::write_f32_slice(&mut w, &self.normalizer.max).map_err(io_err)?;
        for l in &self.layers {
            io_util::write_f32_blob(&mut w, l.enc_w.shape(), l.enc_w.data()).map_err(io_err)?;
            io_util::write_f32_blob(&mut w, &[l.enc_b.len()], &l.enc_b).map_err(io_err)?;
            io_util::write_f32_blob(&mut w, l.dec_w.shape(), l.dec_w.data()).map_err(io_err)?;
            io_util::write_f32_blob(&mut w, &[l.dec_b.len()], &l.dec_b).map_err(io_err)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<SaeModel, FusionError> {
        let io_err = |source| FusionError::Io {
            path: path.display().to_string(),
            source,
        };
        let file = File::open(path).map_err(io_err)?;
        let mut r = BufReader::new(file);
        let magic = io_util::read_exact_array::<4>(&mut r).map_err(io_err)?;
        if &magic != b"MMSA" {
            return Err(FusionError::Checkpoint(format!(
                "{}: bad magic {magic:?}",
                path.display()
            )));
        }
        let version = io_util::read_u32(&mut r).map_err(io_err)?;
        if version != 1 {
            return Err(FusionError::Checkpoint(format!(
                "unsupported SAE checkpoint version {version}"
            )));
        }
        let tag = io_util::read_exact_array::<2>(&mut r).map_err(io_err)?;
        let nonlinearity = match tag[0] {
            0 => SaeNonlinearity::Sigmoid,
            1 => SaeNonlinearity::Tanh,
            other => {
                return Err(FusionError::Checkpoint(format!(
                    "unknown nonlinearity tag {other}"
                )))
            }
        };
        let mask = ModalityMask(tag[1]);
        let input_dim = io_util::read_u32(&mut r).map_err(io_err)? as usize;
        let n_widths = io_util::read_u32(&mut r).map_err(io_err)? as usize;
        let mut widths = Vec::with_capacity(n_widths);
        for _ in 0..n_widths {
            widths.push(io_util::read_u32(&mut r).map_err(io_err)? as usize);
        }
        let spec = SaeSpec::new(input_dim, widths, nonlinearity)?;
        let norm_dim = io_util::read_u32(&mut r).map_err(io_err)? as usize;
        let min = io_util::read_f32_vec(&mut r, norm_dim).map_err(io_err)?;
        let max = io_util::read_f32_vec(&mut r, norm_dim).map_err(io_err)?;
        let (lo, hi) = nonlinearity.interval();
        let constant_dims = min.iter().zip(&max).filter(|(a, b)| a == b).count();
        let mut layers = Vec::with_capacity(3);
        for _ in 0..3 {
            let (ew_shape, ew) = io_util::read_f32_blob(&mut r).map_err(io_err)?;
            let (_, eb) = io_util::read_f32_blob(&mut r).map_err(io_err)?;
            let (dw_shape, dw) = io_util::read_f32_blob(&mut r).map_err(io_err)?;
            let (_, db) = io_util::read_f32_blob(&mut r).map_err(io_err)?;
            layers.push(AeLayer {
                enc_w: Tensor::from_vec(&ew_shape, ew),
                enc_b: eb,
                dec_w: Tensor::from_vec(&dw_shape, dw),
                dec_b: db,
            });
        }
        Ok(SaeModel {
            spec,
            normalizer: RangeNormalizer {
                lo,
                hi,
                min,
                max,
                constant_dims,
            },
            layers,
            mask,
        })
    }
}

/// Finite-difference check of a single auto-encoder's reconstruction
/// gradients (exercises the chosen nonlinearity's backward). Returns the
/// max relative error.
pub fn check_autoencoder_gradients(kind: SaeNonlinearity, trials: usize, h: f64, seed: u64) -> f64 {
    use crate::nn::gradcheck::{central_difference, rel_error};
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (in_dim, hidden) = (6usize, 4usize);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let rv = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random::<f64>() - 0.5).collect()
        };
        let x = rv(&mut rng, in_dim);
        let ew = rv(&mut rng, hidden * in_dim);
        let eb = rv(&mut rng, hidden);
        let dw = rv(&mut rng, in_dim * hidden);
        let db = rv(&mut rng, in_dim);
        let loss = |ew: &[f64], eb: &[f64], dw: &[f64], db: &[f64]| -> f64 {
            let ewt = Tensor::from_vec(&[hidden, in_dim], ew.to_vec());
            let dwt = Tensor::from_vec(&[in_dim, hidden], dw.to_vec());
            let pre = fc_forward(&x, &ewt, eb).unwrap();
            let hact = sae_activation(kind, &pre);
            let y = fc_forward(&hact, &dwt, db).unwrap();
            y.iter()
                .zip(&x)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / in_dim as f64
        };
        let ewt = Tensor::from_vec(&[hidden, in_dim], ew.clone());
        let dwt = Tensor::from_vec(&[in_dim, hidden], dw.clone());
        let pre = fc_forward(&x, &ewt, &eb).unwrap();
        let hact = sae_activation(kind, &pre);
        let y = fc_forward(&hact, &dwt, &db).unwrap();
        let dy: Vec<f64> = y
            .iter()
            .zip(&x)
            .map(|(a, b)| 2.0 * (a - b) / in_dim as f64)
            .collect();
        let (dh, g_dw, g_db) = fc_backward(&hact, &dwt, &dy);
        let dpre = sae_activation_backward(kind, &hact, &dh);
        let (_, g_ew, g_eb) = fc_backward(&x, &ewt, &dpre);

        let n_ew = central_difference(&mut |v| loss(v, &eb, &dw, &db), &ew, h);
        let n_eb = central_difference(&mut |v| loss(&ew, v, &dw, &db), &eb, h);
        let n_dw = central_difference(&mut |v| loss(&ew, &eb, v, &db), &dw, h);
        let n_db = central_difference(&mut |v| loss(&ew, &eb, &dw, v), &db, h);
        for (a, n) in g_ew
            .data()
            .iter()
            .zip(&n_ew)
            .chain(g_eb.iter().zip(&n_eb))
            .chain(g_dw.data().iter().zip(&n_dw))
            .chain(g_db.iter().zip(&n_db))
        {
            worst = worst.max(rel_error(*a, *n));
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l2_normalize_basics() {
        let v = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-7 && (v[1] - 0.8).abs() < 1e-7);
        let u = l2_normalize(&v).unwrap();
        assert!((u[0] - v[0]).abs() < 1e-7);
        assert!(matches!(
            l2_normalize(&[0.0, 0.0]),
            Err(FusionError::ZeroVector)
        ));
        let big: Vec<f32> = (0..512).map(|i| (i as f32 * 0.71).sin()).collect();
        let n = l2_normalize(&big).unwrap();
        let norm: f64 = n.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn flip_ops() {
        assert_eq!(
            flip_average(&[1.0, 3.0], &[3.0, 5.0]).unwrap(),
            vec![2.0, 4.0]
        );
        assert_eq!(
            flip_average(&[1.0, -2.0], &[-1.0, 2.0]).unwrap(),
            vec![0.0, 0.0]
        );
        let c = flip_concat(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(c, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(&c[..2], &[1.0, 2.0]);
        assert!(flip_concat(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn eight_512_features_concatenate_to_4096() {
        let feats: Vec<ModalFeature> = ModalityTag::ALL
            .iter()
            .map(|&tag| ModalFeature {
                tag,
                values: vec![0.25; 512],
            })
            .collect();
        let out = concat_features(&feats, ModalityMask::ALL).unwrap();
        assert_eq!(out.len(), 4096);
    }

    #[test]
    fn concat_respects_order_and_blocks() {
        let feats: Vec<ModalFeature> = ModalityTag::ALL
            .iter()
            .enumerate()
            .map(|(i, &tag)| ModalFeature {
                tag,
                values: vec![i as f32; 4],
            })
            .collect();
        let out = concat_features(&feats, ModalityMask::ALL).unwrap();
        assert_eq!(out.len(), 32);
        for (i, block) in out.chunks(4).enumerate() {
            assert!(block.iter().all(|&v| v == i as f32));
        }
        let mut swapped = feats.clone();
        swapped.swap(0, 1);
        assert!(matches!(
            concat_features(&swapped, ModalityMask::ALL),
            Err(FusionError::Assembly(_))
        ));
        assert!(matches!(
            concat_features(&feats[..7], ModalityMask::ALL),
            Err(FusionError::Assembly(_))
        ));
    }

    #[test]
    fn mask_parse_and_order() {
        let m = ModalityMask::parse("P3,H1,P1").unwrap();
        assert_eq!(
            m.tags(),
            vec![ModalityTag::H1, ModalityTag::P1, ModalityTag::P3]
        );
        assert_eq!(ModalityMask::parse("all").unwrap(), ModalityMask::ALL);
        assert!(ModalityMask::parse("H9").is_err());
    }

    #[test]
    fn range_normalizer_endpoints_and_clamping() {
        let data = vec![vec![0.0f32, -2.0], vec![10.0, 6.0], vec![5.0, 2.0]];
        let sig = fit_range_normalizer(&data, SaeNonlinearity::Sigmoid).unwrap();
        assert_eq!(sig.apply(&[0.0, -2.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(sig.apply(&[10.0, 6.0]).unwrap(), vec![1.0, 1.0]);
        assert_eq!(sig.apply(&[20.0, 7.0]).unwrap(), vec![1.0, 1.0]);
        let tanh = fit_range_normalizer(&data, SaeNonlinearity::Tanh).unwrap();
        assert_eq!(tanh.apply(&[0.0, -2.0]).unwrap(), vec![-1.0, -1.0]);
        assert_eq!(tanh.apply(&[10.0, 6.0]).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn range_normalizer_constant_dimension_maps_to_midpoint() {
        let data = vec![vec![3.0f32, 1.0], vec![3.0, 2.0]];
        let n = fit_range_normalizer(&data, SaeNonlinearity::Tanh).unwrap();
        assert_eq!(n.constant_dims, 1);
        let y = n.apply(&[3.0, 1.5]).unwrap();
        assert_eq!(y[0], 0.0);
    }

    #[test]
    fn activations_values_ranges_and_identity() {
        let s = sae_activation(SaeNonlinearity::Sigmoid, &[0.0f64]);
        assert!((s[0] - 0.5).abs() < 1e-12);
        let t = sae_activation(SaeNonlinearity::Tanh, &[0.0f64]);
        assert_eq!(t[0], 0.0);
        let zs: Vec<f64> = (-20..=20).map(|i| i as f64 * 0.37).collect();
        let sig = sae_activation(SaeNonlinearity::Sigmoid, &zs);
        assert!(sig.iter().all(|&v| v > 0.0 && v < 1.0));
        let th = sae_activation(SaeNonlinearity::Tanh, &zs);
        assert!(th.iter().all(|&v| v > -1.0 && v < 1.0));
        // tanh(z) = 2*sigmoid(2z) - 1
        for &z in &zs {
            let rhs = 2.0 / (1.0 + (-2.0 * z).exp()) - 1.0;
            assert!((z.tanh() - rhs).abs() < 1e-7);
        }
    }

    #[test]
    fn autoencoder_gradients_both_nonlinearities() {
        let e = check_autoencoder_gradients(SaeNonlinearity::Sigmoid, 3, 1e-5, 21);
        assert!(e < 1e-6, "sigmoid AE max rel error {e}");
        let e = check_autoencoder_gradients(SaeNonlinearity::Tanh, 3, 1e-5, 22);
        assert!(e < 1e-6, "tanh AE max rel error {e}");
    }

    fn toy_features(n: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let a: f32 = rng.random::<f32>();
                let b: f32 = rng.random::<f32>();
                (0..dim)
                    .map(|j| {
                        let t = j as f32 / dim as f32;
                        (a * t + b * (1.0 - t) + 0.05 * rng.random::<f32>()).clamp(0.0, 1.0)
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn layerwise_training_reduces_reconstruction_loss() {
        let feats = toy_features(60, 24, 5);
        let spec = SaeSpec::new(24, vec![16, 12, 8], SaeNonlinearity::Sigmoid).unwrap();
        let norm = fit_range_normalizer(&feats, SaeNonlinearity::Sigmoid).unwrap();
        let cfg = SaeTrainConfig {
            epochs_per_layer: 10,
            rng_seed: 3,
            ..SaeTrainConfig::default()
        };
        let (model, log) =
            sae_train_layerwise(&feats, &spec, norm, ModalityMask::ALL, &cfg).unwrap();
        assert_eq!(model.layers.len(), 3);
        assert_eq!(model.layers[0].enc_w.shape(), &[16, 24]);
        assert_eq!(model.layers[1].enc_w.shape(), &[12, 16]);
        assert_eq!(model.layers[2].enc_w.shape(), &[8, 12]);
        for losses in &log.per_layer_epoch_loss {
            assert!(
                losses.last().unwrap() < losses.first().unwrap(),
                "loss did not decrease: {losses:?}"
            );
        }
        assert_eq!(model.encode(&feats[0]).unwrap().len(), 8);
    }

    #[test]
    fn zero_epoch_training_returns_initialization() {
        let feats = toy_features(10, 12, 6);
        let spec = SaeSpec::new(12, vec![8, 6, 4], SaeNonlinearity::Tanh).unwrap();
        let cfg = SaeTrainConfig {
            epochs_per_layer: 0,
            rng_seed: 9,
            ..SaeTrainConfig::default()
        };
        let run = || {
            let norm = fit_range_normalizer(&feats, SaeNonlinearity::Tanh).unwrap();
            sae_train_layerwise(&feats, &spec, norm, ModalityMask::ALL, &cfg)
                .unwrap()
                .0
        };
        let (m1, m2) = (run(), run());
        assert!(m1.layers.iter().zip(&m2.layers).all(|(a, b)| {
            a.enc_w.data() == b.enc_w.data() && a.dec_w.data() == b.dec_w.data()
        }));
    }

    #[test]
    fn encode_zero_model_gives_zero_signature() {
        let spec = SaeSpec::new(10, vec![8, 6, 4], SaeNonlinearity::Sigmoid).unwrap();
        let layers = vec![
            AeLayer {
                enc_w: Tensor::zeros(&[8, 10]),
                enc_b: vec![0.0; 8],
                dec_w: Tensor::zeros(&[10, 8]),
                dec_b: vec![0.0; 10],
            },
            AeLayer {
                enc_w: Tensor::zeros(&[6, 8]),
                enc_b: vec![0.0; 6],
                dec_w: Tensor::zeros(&[8, 6]),
                dec_b: vec![0.0; 8],
            },
            AeLayer {
                enc_w: Tensor::zeros(&[4, 6]),
                enc_b: vec![0.0; 4],
                dec_w: Tensor::zeros(&[6, 4]),
                dec_b: vec![0.0; 6],
            },
        ];
        let model = SaeModel {
            spec,
            normalizer: RangeNormalizer {
                lo: 0.0,
                hi: 1.0,
                min: vec![0.0; 10],
                max: vec![1.0; 10],
                constant_dims: 0,
            },
            layers,
            mask: ModalityMask::ALL,
        };
        assert_eq!(model.encode(&vec![0.3; 10]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn third_stage_is_affine() {
        let feats = toy_features(30, 16, 8);
        let spec = SaeSpec::new(16, vec![12, 8, 5], SaeNonlinearity::Sigmoid).unwrap();
        let norm = fit_range_normalizer(&feats, SaeNonlinearity::Sigmoid).unwrap();
        let cfg = SaeTrainConfig {
            epochs_per_layer: 2,
            rng_seed: 4,
            ..SaeTrainConfig::default()
        };
        let (model, _) = sae_train_layerwise(&feats, &spec, norm, ModalityMask::ALL, &cfg).unwrap();
        let u: Vec<f32> = (0..8).map(|i| 0.1 * i as f32).collect();
        let v: Vec<f32> = (0..8).map(|i| 0.9 - 0.07 * i as f32).collect();
        let alpha = 0.3f32;
        let mix: Vec<f32> = u
            .iter()
            .zip(&v)
            .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
            .collect();
        let eu = model.layers[2].encode_pre(&u);
        let ev = model.layers[2].encode_pre(&v);
        let emix = model.layers[2].encode_pre(&mix);
        for i in 0..emix.len() {
            let expect = alpha * eu[i] + (1.0 - alpha) * ev[i];
            assert!((emix[i] - expect).abs() < 1e-5);
        }
    }

    #[test]
    fn sae_checkpoint_round_trip_bitwise() {
        let feats = toy_features(20, 12, 13);
        let spec = SaeSpec::new(12, vec![8, 6, 4], SaeNonlinearity::Tanh).unwrap();
        let norm = fit_range_normalizer(&feats, SaeNonlinearity::Tanh).unwrap();
        let cfg = SaeTrainConfig {
            epochs_per_layer: 2,
            rng_seed: 17,
            ..SaeTrainConfig::default()
        };
        let mask = ModalityMask::parse("H1,P2").unwrap();
        let (model, _) = sae_train_layerwise(&feats, &spec, norm, mask, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sae.mmsa");
        model.save(&path).unwrap();
        let back = SaeModel::load(&path).unwrap();
        assert_eq!(back.spec, model.spec);
        assert_eq!(back.mask, mask);
        assert_eq!(back.normalizer.min, model.normalizer.min);
        assert_eq!(back.normalizer.max, model.normalizer.max);
        for (a, b) in model.layers.iter().zip(&back.layers) {
            assert_eq!(a.enc_w.data(), b.enc_w.data());
            assert_eq!(a.dec_b, b.dec_b);
        }
        let x = vec![0.4f32; 12];
        assert_eq!(model.signature(&x).unwrap(), back.signature(&x).unwrap());
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[1] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            SaeModel::load(&path),
            Err(FusionError::Checkpoint(_))
        ));
    }
}
