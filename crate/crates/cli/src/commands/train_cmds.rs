//! Training commands: train-cnn, train-sae, train-pca, train-jb.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;

use mmdfr_core::data::{load_manifest, FeatureStore};
use mmdfr_core::fusion::{
    concat_features, fit_range_normalizer, sae_train_layerwise, ModalFeature, SaeNonlinearity,
    SaeSpec, SaeTrainConfig,
};
use mmdfr_core::matcher::{jb_fit, pca_fit, JbFitOptions, PcaModel};
use mmdfr_core::nn::{
    build_network, finetune_stage_triplet, make_ablation_variant, train_stage_softmax,
    AblationVariant, Network,
};

use crate::common::{
    self, augment_config, geometry_from_config, load_mesh, parse_mask, parse_modality,
    resolve_spec, train_config,
};
use crate::settings::{DirLock, IoPlan, Run};

#[derive(Args)]
pub struct TrainCnnArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long = "images-root")]
    pub images_root: Option<PathBuf>,
    #[arg(long, default_value = "builtin")]
    pub mesh: String,
    /// Modality this network consumes (H1, H2, P1..P6).
    #[arg(long)]
    pub modality: String,
    /// nn1 | nn2 | tiny | tiny:HxWxF | spec file path.
    #[arg(long, default_value = "tiny")]
    pub spec: String,
    /// Optional ReLU-usage variant (NN1, NN1+C52R, NN1+C52R+Fc6R).
    #[arg(long)]
    pub variant: Option<String>,
    /// Augmentation: none | flip | full.
    #[arg(long, default_value = "none")]
    pub augment: String,
    /// Train the softmax stage only.
    #[arg(long = "skip-triplet")]
    pub skip_triplet: bool,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn train_cnn(run: &mut Run, args: TrainCnnArgs) -> Result<()> {
    let images_root = args
        .images_root
        .clone()
        .unwrap_or_else(|| args.manifest.parent().unwrap_or(Path::new(".")).to_path_buf());
    if run.dry_run {
        let mut plan = IoPlan::default();
        plan.read(&args.manifest);
        if args.mesh != "builtin" {
            plan.read(Path::new(&args.mesh));
        }
        plan.read(&images_root);
        plan.write(&args.out);
        plan.print();
        return Ok(());
    }
    let modality = parse_modality(&args.modality)?;
    let records = load_manifest(&args.manifest)?;
    if records.is_empty() {
        bail!("manifest {} is empty", args.manifest.display());
    }
    let labels = common::label_map(&records);
    let mut spec = resolve_spec(&args.spec, modality, labels.len())?;
    if let Some(variant) = &args.variant {
        spec = make_ablation_variant(&spec, AblationVariant::from_name(variant)?)?;
    }
    let mesh = load_mesh(&args.mesh)?;
    let geometry = geometry_from_config(run)?;
    let aug = augment_config(run, &args.augment)?;
    let cfg = train_config(run)?;
    let lock_dir = args.out.parent().unwrap_or(Path::new(".")).to_path_buf();
    let _lock = DirLock::acquire(&lock_dir)?;
    println!(
        "[train-cnn] {} on {}: {} records x{} augmentation, {} classes",
        args.spec,
        modality.label(),
        records.len(),
        aug.multiplicity(),
        labels.len()
    );
    let dataset = common::build_modality_dataset(
        &records,
        &images_root,
        &mesh,
        &geometry,
        modality,
        &aug,
        (spec.input_h(), spec.input_w()),
        &labels,
    )?;
    let mut net: Network<f32> = build_network(&spec, run.seed)?;
    let losses = train_stage_softmax(&mut net, &dataset, &cfg)?;
    println!(
        "[train-cnn] softmax stage: epoch losses {:.4} -> {:.4}",
        losses.first().copied().unwrap_or(0.0),
        losses.last().copied().unwrap_or(0.0)
    );
    if !args.skip_triplet {
        let log = finetune_stage_triplet(&mut net, &dataset, &cfg)?;
        println!(
            "[train-cnn] triplet stage: active fraction {:?}",
            log.active_fraction
        );
    }
    net.save(&args.out)?;
    run.record_output(&args.out);
    println!("[train-cnn] checkpoint -> {}", args.out.display());
    Ok(())
}

#[derive(Args)]
pub struct TrainSaeArgs {
    /// Directory holding per-modality stores named features_<TAG>.mmfs.
    #[arg(long = "features-dir")]
    pub features_dir: PathBuf,
    /// Modalities to fuse, e.g. "H1,P3" or "all".
    #[arg(long, default_value = "all")]
    pub mask: String,
    #[arg(long, default_value = "sigmoid")]
    pub nonlinearity: String,
    /// Encoder widths, e.g. "2048,1024,512". Default: concat/2, /4, /8.
    #[arg(long)]
    pub widths: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn sae_train_config(run: &Run) -> Result<SaeTrainConfig> {
    let cfg = &run.config;
    let d = SaeTrainConfig::default();
    Ok(SaeTrainConfig {
        epochs_per_layer: cfg.resolve(None, "sae.epochs_per_layer", d.epochs_per_layer)?,
        lr_start: cfg.resolve(None, "sae.lr_start", d.lr_start)?,
        lr_end: cfg.resolve(None, "sae.lr_end", d.lr_end)?,
        momentum: cfg.resolve(None, "sae.momentum", d.momentum)?,
        batch_size: cfg.resolve(None, "sae.batch_size", d.batch_size)?,
        rng_seed: run.seed,
    })
}

/// Loads the masked per-modality stores and concatenates features per key
/// (key order from the first store; keys must exist in all stores).
pub fn load_concat_features(
    features_dir: &Path,
    mask: mmdfr_core::fusion::ModalityMask,
) -> Result<(Vec<String>, Vec<Vec<f32>>)> {
    let tags = mask.tags();
    let stores: Vec<FeatureStore> = tags
        .iter()
        .map(|t| {
            let path = features_dir.join(format!("features_{}.mmfs", t.label()));
            FeatureStore::read(&path).map_err(|e| anyhow!("{e}"))
        })
        .collect::<Result<_>>()?;
    let keys: Vec<String> = stores[0].keys().map(|k| k.to_string()).collect();
    let mut features = Vec::with_capacity(keys.len());
    for key in &keys {
        let parts: Vec<ModalFeature> = tags
            .iter()
            .zip(&stores)
            .map(|(&tag, store)| {
                store
                    .get(key)
                    .map(|v| ModalFeature {
                        tag,
                        values: v.to_vec(),
                    })
                    .ok_or_else(|| anyhow!("key '{key}' missing from {} store", tag.label()))
            })
            .collect::<Result<_>>()?;
        features.push(concat_features(&parts, mask)?);
    }
    Ok((keys, features))
}

pub fn train_sae(run: &mut Run, args: TrainSaeArgs) -> Result<()> {
    let mask = parse_mask(&args.mask)?;
    if run.dry_run {
        let mut plan = IoPlan::default();
        for t in mask.tags() {
            plan.read(&args.features_dir.join(format!("features_{}.mmfs", t.label())));
        }
        plan.write(&args.out);
        plan.print();
        return Ok(());
    }
    let nonlinearity = SaeNonlinearity::from_label(&args.nonlinearity)
        .ok_or_else(|| anyhow!("unknown nonlinearity '{}' (sigmoid|tanh)", args.nonlinearity))?;
    let (_, features) = load_concat_features(&args.features_dir, mask)?;
    if features.is_empty() {
        bail!("no features found under {}", args.features_dir.display());
    }
    let input_dim = features[0].len();
    let widths: Vec<usize> = match &args.widths {
        Some(raw) => raw
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| anyhow!("--widths: bad list '{raw}'"))?,
        None => vec![
            (input_dim / 2).max(3),
            (input_dim / 4).max(2),
            (input_dim / 8).max(1),
        ],
    };
    let spec = SaeSpec::new(input_dim, widths, nonlinearity)?;
    let cfg = sae_train_config(run)?;
    let lock_dir = args.out.parent().unwrap_or(Path::new(".")).to_path_buf();
    let _lock = DirLock::acquire(&lock_dir)?;
    println!(
        "[train-sae] {} samples, {} -> {:?}, {} nonlinearity",
        features.len(),
        input_dim,
        spec.widths,
        nonlinearity.label()
    );
    let normalizer = fit_range_normalizer(&features, nonlinearity)?;
    if normalizer.constant_dims > 0 {
        eprintln!(
            "warning: {} constant feature dimensions map to the interval midpoint",
            normalizer.constant_dims
        );
    }
    let normalized: Vec<Vec<f32>> = features
        .iter()
        .map(|x| normalizer.apply(x))
        .collect::<Result<_, _>>()?;
    let (model, log) = sae_train_layerwise(&normalized, &spec, normalizer, mask, &cfg)?;
    for (layer, losses) in log.per_layer_epoch_loss.iter().enumerate() {
        println!(
            "[train-sae] layer {layer}: reconstruction {:.5} -> {:.5}",
            losses.first().copied().unwrap_or(0.0),
            losses.last().copied().unwrap_or(0.0)
        );
    }
    model.save(&args.out)?;
    run.record_output(&args.out);
    println!("[train-sae] checkpoint -> {}", args.out.display());
    Ok(())
}

#[derive(Args)]
pub struct TrainPcaArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long, default_value_t = 110)]
    pub dim: usize,
    #[arg(long)]
    pub whiten: bool,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn train_pca(run: &mut Run, args: TrainPcaArgs) -> Result<()> {
    if run.dry_run {
        let mut plan = IoPlan::default();
        plan.read(&args.features);
        plan.write(&args.out);
        plan.print();
        return Ok(());
    }
    let store = FeatureStore::read(&args.features)?;
    let feats: Vec<Vec<f32>> = store.iter().map(|(_, v)| v.to_vec()).collect();
    let lock_dir = args.out.parent().unwrap_or(Path::new(".")).to_path_buf();
    let _lock = DirLock::acquire(&lock_dir)?;
    let model = pca_fit(&feats, args.dim, args.whiten)?;
    model.save(&args.out)?;
    run.record_output(&args.out);
    println!(
        "[train-pca] {} samples, {} -> {} dims (whiten: {}) -> {}",
        feats.len(),
        store.dim(),
        args.dim,
        args.whiten,
        args.out.display()
    );
    Ok(())
}

#[derive(Args)]
pub struct TrainJbArgs {
    #[arg(long)]
    pub features: PathBuf,
    /// Manifest mapping feature keys (image paths) to subject labels.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub pca: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn train_jb(run: &mut Run, args: TrainJbArgs) -> Result<()> {
    if run.dry_run {
        let mut plan = IoPlan::default();
        plan.read(&args.features);
        plan.read(&args.manifest);
        plan.read(&args.pca);
        plan.write(&args.out);
        plan.print();
        return Ok(());
    }
    let store = FeatureStore::read(&args.features)?;
    let records = load_manifest(&args.manifest)?;
    let pca = PcaModel::load(&args.pca)?;
    let labels_by_key: std::collections::HashMap<&str, &str> = records
        .iter()
        .map(|r| (r.image_path.as_str(), r.subject_id.as_str()))
        .collect();
    let label_ids = common::label_map(&records);
    let mut projected = Vec::new();
    let mut labels = Vec::new();
    for (key, values) in store.iter() {
        let subject = labels_by_key
            .get(key)
            .ok_or_else(|| anyhow!("feature key '{key}' missing from manifest"))?;
        projected.push(pca.project(values)?);
        labels.push(label_ids[*subject]);
    }
    let opts = JbFitOptions {
        max_iters: run.config.resolve(None, "jb.max_iters", 100usize)?,
        tol: run.config.resolve(None, "jb.tol", 1e-5)?,
        ridge: run.config.resolve(None, "jb.ridge", 1e-4)?,
        track_loglik: run.config.resolve(None, "jb.track_loglik", true)?,
    };
    let lock_dir = args.out.parent().unwrap_or(Path::new(".")).to_path_buf();
    let _lock = DirLock::acquire(&lock_dir)?;
    let (model, report) = jb_fit(&projected, &labels, &opts)
        .with_context(|| "Joint Bayesian EM fit")?;
    model.save(&args.out)?;
    run.record_output(&args.out);
    let ll = report
        .loglik
        .last()
        .map(|v| format!("{v:.2}"))
        .unwrap_or_else(|| "untracked".into());
    println!(
        "[train-jb] {} samples, dim {}, {} EM iterations (converged: {}), log-likelihood {ll} -> {}",
        projected.len(),
        model.dim,
        report.iterations,
        report.converged,
        args.out.display()
    );
    Ok(())
}
