//! Shared command plumbing: mesh/config loading, dataset assembly, label
//! maps, spec parsing, and the round scorers used by verify/identify.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};

use mmdfr_core::data::{AugmentConfig, FeatureStore, ManifestRecord};
use mmdfr_core::eval::{EvalError, Pair, RoundScorer};
use mmdfr_core::fusion::{ModalityMask, ModalityTag};
use mmdfr_core::geometry::{GenericMesh, GeometryPipeline, Landmarks5};
use mmdfr_core::image::GrayImage;
use mmdfr_core::matcher::{cosine_similarity_f32, JbModel, PcaModel};
use mmdfr_core::nn::{nn1_spec, nn2_spec, tiny_spec, Dataset, NetSpec, Tensor, TrainConfig};
use mmdfr_core::pipeline::{image_to_tensor, FlipMode};

use crate::settings::Run;

/// "builtin" resolves to the procedural mesh; anything else is a path.
pub fn load_mesh(spec: &str) -> Result<GenericMesh> {
    if spec == "builtin" {
        Ok(mmdfr_core::geometry::synthetic_face_mesh())
    } else {
        GenericMesh::read_file(Path::new(spec))
            .with_context(|| format!("loading mesh {spec}"))
    }
}

/// Geometry configuration from `geometry.*` config keys.
pub fn geometry_from_config(run: &Run) -> Result<GeometryPipeline> {
    let mut g = GeometryPipeline::default();
    let cfg = &run.config;
    let ox = cfg.resolve(None, "geometry.crop_origin_x", g.crop_origin.0)?;
    let oy = cfg.resolve(None, "geometry.crop_origin_y", g.crop_origin.1)?;
    g.crop_origin = (ox, oy);
    g.frontal.crop_origin = (ox, oy);
    g.frontal.residual_threshold = cfg.resolve(
        None,
        "geometry.frontal_threshold",
        g.frontal.residual_threshold,
    )?;
    g.frontal_fallback = cfg.resolve(None, "geometry.frontal_fallback", true)?;
    if let Some(raw) = cfg.get("geometry.template") {
        let vals: Vec<f64> = raw
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| anyhow!("geometry.template: expected 10 numbers"))?;
        if vals.len() != 10 {
            bail!("geometry.template: expected 10 numbers, got {}", vals.len());
        }
        let mut points = [[0.0; 2]; 5];
        for (i, p) in points.iter_mut().enumerate() {
            *p = [vals[2 * i], vals[2 * i + 1]];
        }
        g.template = Landmarks5::new(points);
        g.frontal.template = g.template;
    }
    if let Some(raw) = cfg.get("geometry.patch_selection") {
        let vals: Vec<usize> = raw
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| anyhow!("geometry.patch_selection: expected 6 indices"))?;
        g.patch_selection = vals
            .try_into()
            .map_err(|_| anyhow!("geometry.patch_selection: expected exactly 6 indices"))?;
    }
    Ok(g)
}

/// TrainConfig from `train.*` config keys plus the run seed.
pub fn train_config(run: &Run) -> Result<TrainConfig> {
    let cfg = &run.config;
    let d = TrainConfig::default();
    Ok(TrainConfig {
        batch_size: cfg.resolve(None, "train.batch_size", d.batch_size)?,
        epochs_stage1: cfg.resolve(None, "train.epochs", d.epochs_stage1)?,
        lr_initial: cfg.resolve(None, "train.lr_initial", d.lr_initial)?,
        lr_decay_every: cfg.resolve(None, "train.lr_decay_every", d.lr_decay_every)?,
        lr_floor: cfg.resolve(None, "train.lr_floor", d.lr_floor)?,
        momentum: cfg.resolve(None, "train.momentum", d.momentum)?,
        weight_decay: cfg.resolve(None, "train.weight_decay", d.weight_decay)?,
        dropout_ratio: cfg.resolve(None, "train.dropout", d.dropout_ratio)?,
        triplet_margin: cfg.resolve(None, "train.triplet_margin", d.triplet_margin)?,
        triplet_epochs: cfg.resolve(None, "train.triplet_epochs", d.triplet_epochs)?,
        triplet_lr: cfg.resolve(None, "train.triplet_lr", d.triplet_lr)?,
        rng_seed: run.seed,
    })
}

/// Augmentation selection: "none", "flip", or "full" (flip + jitter +
/// down-sampling).
pub fn augment_config(run: &Run, mode: &str) -> Result<AugmentConfig> {
    let cfg = &run.config;
    let sigma = cfg.resolve(None, "augment.jitter_sigma", 4.0)?;
    let copies = cfg.resolve(None, "augment.jitter_copies", 1usize)?;
    let factors: Vec<f64> = match cfg.get("augment.downsample_factors") {
        Some(raw) => raw
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| anyhow!("augment.downsample_factors: bad list"))?,
        None => vec![1.5, 2.0, 3.0],
    };
    let base = AugmentConfig {
        flip: true,
        jitter_sigma: sigma,
        jitter_copies: copies,
        downsample_factors: factors,
        rng_seed: run.seed,
    };
    Ok(match mode {
        "none" => AugmentConfig {
            flip: false,
            jitter_copies: 0,
            downsample_factors: vec![],
            ..base
        },
        "flip" => AugmentConfig {
            jitter_copies: 0,
            downsample_factors: vec![],
            ..base
        },
        "full" => base,
        other => bail!("unknown augmentation mode '{other}' (none|flip|full)"),
    })
}

pub fn parse_modality(s: &str) -> Result<ModalityTag> {
    ModalityTag::from_label(s).ok_or_else(|| anyhow!("unknown modality '{s}' (H1,H2,P1..P6)"))
}

pub fn parse_mask(s: &str) -> Result<ModalityMask> {
    ModalityMask::parse(s).map_err(|e| anyhow!("{e}"))
}

pub fn parse_flip_mode(s: &str) -> Result<FlipMode> {
    FlipMode::from_label(s).ok_or_else(|| anyhow!("unknown flip mode '{s}' (average|concat)"))
}

/// Spec selector: nn1 | nn2 | tiny | tiny:HxWxF | a file path. Input size
/// follows the modality (165x120 holistic, 100x100 patches) for nn1/nn2.
pub fn resolve_spec(
    selector: &str,
    modality: ModalityTag,
    class_count: usize,
) -> Result<NetSpec> {
    let (h, w) = match modality {
        ModalityTag::H1 | ModalityTag::H2 => (165, 120),
        _ => (100, 100),
    };
    match selector {
        "nn1" => Ok(nn1_spec(h, w, 512, class_count)),
        "nn2" => Ok(nn2_spec(h, w, 512, class_count)),
        "tiny" => Ok(tiny_spec(32, 24, 64, class_count)),
        other => {
            if let Some(rest) = other.strip_prefix("tiny:") {
                let parts: Vec<usize> = rest
                    .split('x')
                    .map(|s| s.parse::<usize>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| anyhow!("bad tiny spec '{other}', expected tiny:HxWxF"))?;
                if parts.len() != 3 {
                    bail!("bad tiny spec '{other}', expected tiny:HxWxF");
                }
                Ok(tiny_spec(parts[0], parts[1], parts[2], class_count))
            } else {
                let mut spec = NetSpec::read_file(Path::new(other))
                    .with_context(|| format!("loading net spec {other}"))?;
                // The class count follows the training set.
                if let Some(fc7) = spec
                    .layers
                    .iter()
                    .rposition(|l| l.kind == mmdfr_core::nn::LayerKind::FullyConnected)
                {
                    spec.layers[fc7].in_h = class_count;
                    if let Some(sm) = spec
                        .layers
                        .iter()
                        .rposition(|l| l.kind == mmdfr_core::nn::LayerKind::Softmax)
                    {
                        spec.layers[sm].in_h = class_count;
                    }
                }
                Ok(spec)
            }
        }
    }
}

/// Dense labels from subject ids, assigned in sorted order for stability.
pub fn label_map(records: &[ManifestRecord]) -> HashMap<String, usize> {
    let mut subjects: Vec<&str> = records.iter().map(|r| r.subject_id.as_str()).collect();
    subjects.sort_unstable();
    subjects.dedup();
    subjects
        .into_iter()
        .enumerate()
        .map(|(i, s)| (s.to_string(), i))
        .collect()
}

pub fn read_record_image(images_root: &Path, record: &ManifestRecord) -> Result<GrayImage> {
    let path = images_root.join(&record.image_path);
    GrayImage::read_pgm(&path).with_context(|| format!("reading {}", path.display()))
}

/// Picks one modality image out of a bundle.
pub fn bundle_modality(
    bundle: &mmdfr_core::geometry::ModalityBundle,
    tag: ModalityTag,
) -> GrayImage {
    match tag {
        ModalityTag::H1 => bundle.holistic.clone(),
        ModalityTag::H2 => bundle.frontal.clone(),
        ModalityTag::P1 => bundle.patches[0].clone(),
        ModalityTag::P2 => bundle.patches[1].clone(),
        ModalityTag::P3 => bundle.patches[2].clone(),
        ModalityTag::P4 => bundle.patches[3].clone(),
        ModalityTag::P5 => bundle.patches[4].clone(),
        ModalityTag::P6 => bundle.patches[5].clone(),
    }
}

/// Builds the (image tensor, label) training set for one modality:
/// augmentation variants are pushed through the geometry pipeline and the
/// modality image is resized to the net input.
#[allow(clippy::too_many_arguments)]
pub fn build_modality_dataset(
    records: &[ManifestRecord],
    images_root: &Path,
    mesh: &GenericMesh,
    geometry: &GeometryPipeline,
    modality: ModalityTag,
    augment_cfg: &AugmentConfig,
    net_input: (usize, usize),
    labels: &HashMap<String, usize>,
) -> Result<Dataset<f32>> {
    let mut samples: Vec<(Tensor<f32>, usize)> = Vec::new();
    for record in records {
        let image = read_record_image(images_root, record)?;
        let label = labels[&record.subject_id];
        for variant in mmdfr_core::data::augment(record, &image, augment_cfg) {
            let (bundle, _) = geometry
                .run(&variant.image, &variant.landmarks, mesh)
                .with_context(|| format!("geometry for {}", record.image_path))?;
            let modal = bundle_modality(&bundle, modality);
            let sized = modal.resize_bilinear(net_input.0, net_input.1);
            samples.push((image_to_tensor(&sized), label));
        }
    }
    Ok(Dataset { samples })
}

/// Subject -> ordered image paths, manifest order, for resolving LFW-style
/// (name, index) pair references (1-based).
pub fn pair_resolver(records: &[ManifestRecord]) -> HashMap<String, Vec<String>> {
    let mut map: HashMap<String, Vec<String>> = HashMap::new();
    for r in records {
        map.entry(r.subject_id.clone())
            .or_default()
            .push(r.image_path.clone());
    }
    map
}

/// Cosine scorer over a feature store (no per-round training).
pub struct CosineStoreScorer<'a> {
    pub store: &'a FeatureStore,
}

impl CosineStoreScorer<'_> {
    fn lookup(&self, key: &str) -> Result<&[f32], EvalError> {
        self.store.get(key).ok_or_else(|| EvalError::Scorer {
            a: key.to_string(),
            b: String::new(),
            msg: "feature missing from store".into(),
        })
    }
}

impl RoundScorer for CosineStoreScorer<'_> {
    fn fit(&mut self, _train: &[&Pair]) -> Result<(), EvalError> {
        Ok(())
    }

    fn score(&self, a: &str, b: &str) -> Result<f64, EvalError> {
        let fa = self.lookup(a)?;
        let fb = self.lookup(b)?;
        cosine_similarity_f32(fa, fb).map_err(|e| EvalError::Scorer {
            a: a.to_string(),
            b: b.to_string(),
            msg: e.to_string(),
        })
    }
}

/// PCA + Joint Bayesian scorer. Per round the PCA mean is re-estimated
/// from the held-in pairs' features (the basis and JB model stay fixed).
pub struct JbStoreScorer<'a> {
    pub store: &'a FeatureStore,
    pub base_pca: PcaModel,
    pub jb: &'a JbModel,
    pub reestimate_mean: bool,
    pca: PcaModel,
}

impl<'a> JbStoreScorer<'a> {
    pub fn new(
        store: &'a FeatureStore,
        pca: PcaModel,
        jb: &'a JbModel,
        reestimate_mean: bool,
    ) -> Self {
        JbStoreScorer {
            store,
            pca: pca.clone(),
            base_pca: pca,
            jb,
            reestimate_mean,
        }
    }

    fn lookup(&self, key: &str) -> Result<&[f32], EvalError> {
        self.store.get(key).ok_or_else(|| EvalError::Scorer {
            a: key.to_string(),
            b: String::new(),
            msg: "feature missing from store".into(),
        })
    }
}

impl RoundScorer for JbStoreScorer<'_> {
    fn fit(&mut self, train: &[&Pair]) -> Result<(), EvalError> {
        if !self.reestimate_mean {
            return Ok(());
        }
        let mut seen = std::collections::BTreeSet::new();
        for p in train {
            seen.insert(p.a.as_str());
            seen.insert(p.b.as_str());
        }
        let mut feats = Vec::with_capacity(seen.len());
        for key in seen {
            feats.push(self.lookup(key)?.to_vec());
        }
        self.pca = self
            .base_pca
            .reestimate_mean(&feats)
            .map_err(|e| EvalError::Protocol(format!("PCA mean re-estimation: {e}")))?;
        Ok(())
    }

    fn score(&self, a: &str, b: &str) -> Result<f64, EvalError> {
        let fa = self.lookup(a)?;
        let fb = self.lookup(b)?;
        let pa = self.pca.project(fa).map_err(|e| EvalError::Scorer {
            a: a.to_string(),
            b: b.to_string(),
            msg: e.to_string(),
        })?;
        let pb = self.pca.project(fb).map_err(|e| EvalError::Scorer {
            a: a.to_string(),
            b: b.to_string(),
            msg: e.to_string(),
        })?;
        self.jb.score(&pa, &pb).map_err(|e| EvalError::Scorer {
            a: a.to_string(),
            b: b.to_string(),
            msg: e.to_string(),
        })
    }
}

/// Per-modality checkpoint paths: explicit "TAG=path,..." list or a
/// directory expected to hold `<TAG>.mmnn`.
pub fn resolve_net_paths(
    mask: ModalityMask,
    nets: Option<&str>,
    nets_dir: Option<&Path>,
) -> Result<Vec<(ModalityTag, PathBuf)>> {
    let tags = mask.tags();
    if let Some(list) = nets {
        let mut map: HashMap<ModalityTag, PathBuf> = HashMap::new();
        for part in list.split(',') {
            let (tag, path) = part
                .split_once('=')
                .ok_or_else(|| anyhow!("--nets expects TAG=path,... entries, got '{part}'"))?;
            map.insert(parse_modality(tag.trim())?, PathBuf::from(path.trim()));
        }
        tags.iter()
            .map(|t| {
                map.get(t)
                    .cloned()
                    .map(|p| (*t, p))
                    .ok_or_else(|| anyhow!("--nets is missing modality {}", t.label()))
            })
            .collect()
    } else if let Some(dir) = nets_dir {
        Ok(tags
            .iter()
            .map(|t| (*t, dir.join(format!("{}.mmnn", t.label()))))
            .collect())
    } else {
        bail!("either --nets or --nets-dir is required")
    }
}
