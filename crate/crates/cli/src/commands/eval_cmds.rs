//! Evaluation-side commands: extract, verify, identify, ablate-relu.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;

use mmdfr_core::data::{load_manifest, FeatureStore, ManifestRecord};
use mmdfr_core::eval::{
    identify as run_identify, parse_pairs_text, report as eval_report, resolve_pairs,
    split_gallery_probe, verify_tenfold, EvalError, GalleryAggregation,
};
use mmdfr_core::fusion::SaeModel;
use mmdfr_core::matcher::{cosine_similarity_f32, JbModel, PcaModel};
use mmdfr_core::nn::Network;
use mmdfr_core::pipeline::{FlipMode, Representer};

use crate::common::{
    self, geometry_from_config, load_mesh, parse_flip_mode, parse_mask, parse_modality,
    resolve_net_paths, resolve_spec, train_config, CosineStoreScorer, JbStoreScorer,
};
use crate::settings::{DirLock, IoPlan, Run};

#[derive(Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long = "images-root")]
    pub images_root: Option<PathBuf>,
    #[arg(long, default_value = "builtin")]
    pub mesh: String,
    /// Modalities to extract, e.g. "H1,P3" or "all".
    #[arg(long, default_value = "all")]
    pub modalities: String,
    /// Per-modality checkpoints "H1=path,P3=path,...".
    #[arg(long)]
    pub nets: Option<String>,
    /// Directory with <TAG>.mmnn checkpoints.
    #[arg(long = "nets-dir")]
    pub nets_dir: Option<PathBuf>,
    /// Fusion SAE checkpoint; with it the output is one signature store.
    #[arg(long)]
    pub sae: Option<PathBuf>,
    /// average | concat.
    #[arg(long = "flip-mode", default_value = "average")]
    pub flip_mode: String,
    /// Output store for fused signatures (with --sae).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Output directory for per-modality stores (without --sae).
    #[arg(long = "out-dir")]
    pub out_dir: Option<PathBuf>,
}

fn build_representer(
    run: &Run,
    mesh_spec: &str,
    mask: mmdfr_core::fusion::ModalityMask,
    net_paths: &[(mmdfr_core::fusion::ModalityTag, PathBuf)],
    sae_path: Option<&Path>,
    flip_mode: FlipMode,
) -> Result<Representer> {
    let mesh = load_mesh(mesh_spec)?;
    let geometry = geometry_from_config(run)?;
    let mut networks = Vec::with_capacity(net_paths.len());
    for (tag, path) in net_paths {
        let net = Network::load(path)
            .with_context(|| format!("loading {} checkpoint {}", tag.label(), path.display()))?;
        networks.push((*tag, net));
    }
    let sae = match sae_path {
        Some(p) => {
            let model =
                SaeModel::load(p).with_context(|| format!("loading SAE {}", p.display()))?;
            Some(model)
        }
        None => None,
    };
    let rep = Representer {
        mesh,
        geometry,
        mask,
        networks,
        sae,
        flip_mode,
    };
    rep.validate()?;
    Ok(rep)
}

pub fn extract(run: &mut Run, args: ExtractArgs) -> Result<()> {
    let mask = parse_mask(&args.modalities)?;
    let flip_mode = parse_flip_mode(&args.flip_mode)?;
    let images_root = args
        .images_root
        .clone()
        .unwrap_or_else(|| args.manifest.parent().unwrap_or(Path::new(".")).to_path_buf());
    let net_paths = resolve_net_paths(mask, args.nets.as_deref(), args.nets_dir.as_deref())?;
    if run.dry_run {
        // Dependency audit: only the active subset's checkpoints appear.
        let mut plan = IoPlan::default();
        plan.read(&args.manifest);
        if args.mesh != "builtin" {
            plan.read(Path::new(&args.mesh));
        }
        plan.read(&images_root);
        for (_, p) in &net_paths {
            plan.read(p);
        }
        if let Some(sae) = &args.sae {
            plan.read(sae);
        }
        if let Some(out) = &args.out {
            plan.write(out);
        }
        if let Some(dir) = &args.out_dir {
            for t in mask.tags() {
                plan.write(&dir.join(format!("features_{}.mmfs", t.label())));
            }
        }
        plan.print();
        return Ok(());
    }
    let rep = build_representer(
        run,
        &args.mesh,
        mask,
        &net_paths,
        args.sae.as_deref(),
        flip_mode,
    )?;
    let records = load_manifest(&args.manifest)?;
    if records.is_empty() {
        bail!("manifest {} is empty", args.manifest.display());
    }
    let fused = args.sae.is_some();
    if fused && args.out.is_none() {
        bail!("--sae requires --out for the signature store");
    }
    if !fused && args.out_dir.is_none() {
        bail!("without --sae, --out-dir is required for per-modality stores");
    }

    // (key, fused signature or per-modality features, fell_back)
    type Extracted = (String, Vec<Vec<f32>>, bool);
    let work = |record: &ManifestRecord| -> Result<Extracted> {
        let image = common::read_record_image(&images_root, record)?;
        if fused {
            let sig = rep.represent(&image, &record.landmarks)?;
            Ok((record.image_path.clone(), vec![sig], false))
        } else {
            let (features, fell_back) = rep.modal_features(&image, &record.landmarks)?;
            Ok((
                record.image_path.clone(),
                features.into_iter().map(|f| f.values).collect(),
                fell_back,
            ))
        }
    };
    let results: Vec<Extracted> = if run.threads > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(run.threads)
            .build()
            .context("building thread pool")?;
        pool.install(|| records.par_iter().map(work).collect::<Result<Vec<_>>>())?
    } else {
        records.iter().map(work).collect::<Result<Vec<_>>>()?
    };

    let fallbacks: usize = results.iter().filter(|(_, _, fb)| *fb).count();
    if fused {
        let out = args.out.as_ref().unwrap();
        let dim = results[0].1[0].len();
        let mut store = FeatureStore::new(dim);
        for (key, mut sigs, _) in results {
            store.insert(key, sigs.pop().unwrap())?;
        }
        store.write(out)?;
        run.record_output(out);
        println!(
            "[extract] {} fused signatures (dim {dim}) -> {}",
            store.len(),
            out.display()
        );
    } else {
        let dir = args.out_dir.as_ref().unwrap();
        std::fs::create_dir_all(dir)?;
        let tags = mask.tags();
        let dim = results[0].1[0].len();
        let mut stores: Vec<FeatureStore> =
            tags.iter().map(|_| FeatureStore::new(dim)).collect();
        for (key, features, _) in results {
            for (store, values) in stores.iter_mut().zip(features) {
                store.insert(key.clone(), values)?;
            }
        }
        for (tag, store) in tags.iter().zip(&stores) {
            let path = dir.join(format!("features_{}.mmfs", tag.label()));
            store.write(&path)?;
            run.record_output(&path);
        }
        println!(
            "[extract] {} records x {} modalities (dim {dim}) -> {}",
            records.len(),
            tags.len(),
            dir.display()
        );
    }
    if fallbacks > 0 {
        eprintln!("warning: {fallbacks} records fell back from frontalization to the holistic crop");
    }
    Ok(())
}

#[derive(Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub pairs: PathBuf,
    /// Manifest resolving (subject, index) pair references to feature keys.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    /// unsupervised (cosine) | supervised (PCA + Joint Bayesian).
    #[arg(long, default_value = "unsupervised")]
    pub mode: String,
    #[arg(long)]
    pub pca: Option<PathBuf>,
    #[arg(long)]
    pub jb: Option<PathBuf>,
    /// Skip the per-round PCA mean re-estimation.
    #[arg(long = "no-reestimate-mean")]
    pub no_reestimate_mean: bool,
    /// Optional pair-exclusion list (known labeling errors), same line
    /// grammar as the pairs body.
    #[arg(long = "exclude-pairs")]
    pub exclude_pairs: Option<PathBuf>,
    #[arg(long)]
    pub report: PathBuf,
    /// Optional pooled-ROC CSV path.
    #[arg(long)]
    pub roc: Option<PathBuf>,
}

pub fn verify(run: &mut Run, args: VerifyArgs) -> Result<()> {
    if run.dry_run {
        let mut plan = IoPlan::default();
        plan.read(&args.pairs);
        plan.read(&args.manifest);
        plan.read(&args.features);
        if let Some(p) = &args.pca {
            plan.read(p);
        }
        if let Some(p) = &args.jb {
            plan.read(p);
        }
        if let Some(p) = &args.exclude_pairs {
            plan.read(p);
        }
        plan.write(&args.report);
        if let Some(p) = &args.roc {
            plan.write(p);
        }
        plan.print();
        return Ok(());
    }
    let pairs_text = std::fs::read_to_string(&args.pairs)
        .with_context(|| format!("reading {}", args.pairs.display()))?;
    let mut refs = parse_pairs_text(&pairs_text)?;
    if let Some(exclude) = &args.exclude_pairs {
        let text = std::fs::read_to_string(exclude)
            .with_context(|| format!("reading {}", exclude.display()))?;
        let removed = mmdfr_core::eval::filter_pairs(&mut refs, &text)?;
        println!("[verify] excluded {removed} pairs via {}", exclude.display());
    }
    let records = load_manifest(&args.manifest)?;
    let resolver_map = common::pair_resolver(&records);
    let folds = resolve_pairs(&refs, |name, idx| {
        resolver_map
            .get(name)
            .and_then(|paths| paths.get((idx as usize).checked_sub(1)?))
            .cloned()
    })?;
    let store = FeatureStore::read(&args.features)?;
    let report = match args.mode.as_str() {
        "unsupervised" => {
            let mut scorer = CosineStoreScorer { store: &store };
            verify_tenfold(&folds, &mut scorer)?
        }
        "supervised" => {
            let pca_path = args
                .pca
                .as_ref()
                .ok_or_else(|| anyhow!("supervised mode requires --pca"))?;
            let jb_path = args
                .jb
                .as_ref()
                .ok_or_else(|| anyhow!("supervised mode requires --jb"))?;
            let pca = PcaModel::load(pca_path)?;
            let jb = JbModel::load(jb_path)?;
            let mut scorer = JbStoreScorer::new(&store, pca, &jb, !args.no_reestimate_mean);
            verify_tenfold(&folds, &mut scorer)?
        }
        other => bail!("unknown mode '{other}' (unsupervised|supervised)"),
    };
    eval_report::write_verification_json(&report, &args.report)?;
    run.record_output(&args.report);
    if let Some(roc_path) = &args.roc {
        eval_report::write_roc_csv(&report.roc, roc_path)?;
        run.record_output(roc_path);
    }
    println!(
        "[verify] mode {}: mean accuracy {:.4} +- {:.4} (S_E) over {} folds -> {}",
        args.mode,
        report.mean_accuracy,
        report.standard_error,
        report.fold_accuracy.len(),
        args.report.display()
    );
    Ok(())
}

#[derive(Args)]
pub struct IdentifyArgs {
    /// Manifest defining the (subject, image) order for the split.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long, default_value = "unsupervised")]
    pub mode: String,
    #[arg(long)]
    pub pca: Option<PathBuf>,
    #[arg(long)]
    pub jb: Option<PathBuf>,
    #[arg(long = "gallery-per-subject", default_value_t = 5)]
    pub gallery_per_subject: usize,
    /// Probe-to-subject aggregation over gallery images: max | mean.
    #[arg(long, default_value = "max")]
    pub agg: String,
    #[arg(long)]
    pub report: PathBuf,
    /// Optional CMS-curve CSV path.
    #[arg(long)]
    pub cms: Option<PathBuf>,
}

pub fn identify(run: &mut Run, args: IdentifyArgs) -> Result<()> {
    if run.dry_run {
        let mut plan = IoPlan::default();
        plan.read(&args.manifest);
        plan.read(&args.features);
        if let Some(p) = &args.pca {
            plan.read(p);
        }
        if let Some(p) = &args.jb {
            plan.read(p);
        }
        plan.write(&args.report);
        if let Some(p) = &args.cms {
            plan.write(p);
        }
        plan.print();
        return Ok(());
    }
    let records = load_manifest(&args.manifest)?;
    let manifest: Vec<(String, String)> = records
        .iter()
        .map(|r| (r.subject_id.clone(), r.image_path.clone()))
        .collect();
    let split = split_gallery_probe(&manifest, args.gallery_per_subject)?;
    let aggregation = match args.agg.as_str() {
        "max" => GalleryAggregation::Max,
        "mean" => GalleryAggregation::Mean,
        other => bail!("unknown aggregation '{other}' (max|mean)"),
    };
    let store = FeatureStore::read(&args.features)?;
    let report = match args.mode.as_str() {
        "unsupervised" => {
            let scorer = |a: &str, b: &str| -> Result<f64, EvalError> {
                let fa = store.get(a).ok_or_else(|| missing(a))?;
                let fb = store.get(b).ok_or_else(|| missing(b))?;
                cosine_similarity_f32(fa, fb)
                    .map_err(|e| EvalError::Protocol(e.to_string()))
            };
            run_identify(&split, &scorer, aggregation)?
        }
        "supervised" => {
            let pca_path = args
                .pca
                .as_ref()
                .ok_or_else(|| anyhow!("supervised mode requires --pca"))?;
            let jb_path = args
                .jb
                .as_ref()
                .ok_or_else(|| anyhow!("supervised mode requires --jb"))?;
            let pca = PcaModel::load(pca_path)?;
            let jb = JbModel::load(jb_path)?;
            let mut projected: HashMap<String, Vec<f64>> = HashMap::new();
            for (key, values) in store.iter() {
                projected.insert(key.to_string(), pca.project(values)?);
            }
            let scorer = |a: &str, b: &str| -> Result<f64, EvalError> {
                let pa = projected.get(a).ok_or_else(|| missing(a))?;
                let pb = projected.get(b).ok_or_else(|| missing(b))?;
                jb.score(pa, pb).map_err(|e| EvalError::Protocol(e.to_string()))
            };
            run_identify(&split, &scorer, aggregation)?
        }
        other => bail!("unknown mode '{other}' (unsupervised|supervised)"),
    };
    eval_report::write_identification_json(&report, &args.report)?;
    run.record_output(&args.report);
    if let Some(cms_path) = &args.cms {
        eval_report::write_cms_csv(&report.cms, cms_path)?;
        run.record_output(cms_path);
    }
    println!(
        "[identify] mode {}: rank-1 {:.4} over {} probes / {} subjects -> {}",
        args.mode,
        report.rank1,
        report.probe_count,
        report.subject_count,
        args.report.display()
    );
    Ok(())
}

fn missing(key: &str) -> EvalError {
    EvalError::Protocol(format!("feature key '{key}' missing from store"))
}

#[derive(Args)]
pub struct AblateArgs {
    /// Training manifest (labels + landmarks).
    #[arg(long = "train-manifest")]
    pub train_manifest: PathBuf,
    /// Manifest of the evaluation images referenced by the pairs file.
    #[arg(long = "eval-manifest")]
    pub eval_manifest: PathBuf,
    #[arg(long = "images-root")]
    pub images_root: Option<PathBuf>,
    #[arg(long, default_value = "builtin")]
    pub mesh: String,
    #[arg(long, default_value = "H1")]
    pub modality: String,
    /// Base spec the variants toggle (tiny | tiny:HxWxF | nn1 | path).
    #[arg(long, default_value = "tiny")]
    pub spec: String,
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long = "out-dir")]
    pub out_dir: PathBuf,
}

/// Trains and evaluates the three ReLU-usage variants on the same data
/// (softmax stage only, matching the single-model comparison experiment)
/// and emits a comparison table.
pub fn ablate_relu(run: &mut Run, args: AblateArgs) -> Result<()> {
    use mmdfr_core::nn::AblationVariant;
    let images_root = args.images_root.clone().unwrap_or_else(|| {
        args.train_manifest
            .parent()
            .unwrap_or(Path::new("."))
            .to_path_buf()
    });
    let table_path = args.out_dir.join("relu_ablation.csv");
    if run.dry_run {
        let mut plan = IoPlan::default();
        plan.read(&args.train_manifest);
        plan.read(&args.eval_manifest);
        plan.read(&args.pairs);
        if args.mesh != "builtin" {
            plan.read(Path::new(&args.mesh));
        }
        plan.read(&images_root);
        plan.write(&args.out_dir);
        plan.write(&table_path);
        plan.print();
        return Ok(());
    }
    let modality = parse_modality(&args.modality)?;
    let mesh = load_mesh(&args.mesh)?;
    let geometry = geometry_from_config(run)?;
    let train_records = load_manifest(&args.train_manifest)?;
    let eval_records = load_manifest(&args.eval_manifest)?;
    let labels = common::label_map(&train_records);
    let base_spec = resolve_spec(&args.spec, modality, labels.len())?;
    let cfg = train_config(run)?;
    let aug = common::augment_config(run, "none")?;
    std::fs::create_dir_all(&args.out_dir)?;
    let _lock = DirLock::acquire(&args.out_dir)?;

    println!(
        "[ablate-relu] base {} on {}: {} train records, {} eval records",
        args.spec,
        modality.label(),
        train_records.len(),
        eval_records.len()
    );
    let train_data = common::build_modality_dataset(
        &train_records,
        &images_root,
        &mesh,
        &geometry,
        modality,
        &aug,
        (base_spec.input_h(), base_spec.input_w()),
        &labels,
    )?;
    // Eval modality images are variant-independent; compute them once.
    let mut eval_inputs = Vec::with_capacity(eval_records.len());
    for record in &eval_records {
        let image = common::read_record_image(&images_root, record)?;
        let (bundle, _) = geometry.run(&image, &record.landmarks, &mesh)?;
        eval_inputs.push((
            record.image_path.clone(),
            common::bundle_modality(&bundle, modality),
        ));
    }
    let pairs_text = std::fs::read_to_string(&args.pairs)?;
    let refs = parse_pairs_text(&pairs_text)?;
    let resolver_map = common::pair_resolver(&eval_records);
    let folds = resolve_pairs(&refs, |name, idx| {
        resolver_map
            .get(name)
            .and_then(|paths| paths.get((idx as usize).checked_sub(1)?))
            .cloned()
    })?;

    let mut rows = Vec::new();
    for variant in AblationVariant::ALL {
        let spec = mmdfr_core::nn::make_ablation_variant(&base_spec, variant)?;
        let mut net: Network<f32> =
            mmdfr_core::nn::build_network(&spec, run.seed)?;
        let losses = mmdfr_core::nn::train_stage_softmax(&mut net, &train_data, &cfg)?;
        let ckpt = args.out_dir.join(format!(
            "{}.mmnn",
            variant.label().replace('+', "_")
        ));
        net.save(&ckpt)?;
        run.record_output(&ckpt);
        let mut store = FeatureStore::new(expected_feature_dim(&net, FlipMode::Average));
        for (key, img) in &eval_inputs {
            let feat =
                mmdfr_core::pipeline::modality_feature(&net, img, FlipMode::Average)?;
            store.insert(key.clone(), feat)?;
        }
        let mut scorer = CosineStoreScorer { store: &store };
        let report = verify_tenfold(&folds, &mut scorer)?;
        println!(
            "[ablate-relu] {:>14}: softmax loss {:.4} -> {:.4}, verification {:.4} +- {:.4}",
            variant.label(),
            losses.first().copied().unwrap_or(0.0),
            losses.last().copied().unwrap_or(0.0),
            report.mean_accuracy,
            report.standard_error
        );
        rows.push((variant.label().to_string(), report));
    }
    let mut csv = String::from("variant,mean_accuracy,standard_error\n");
    for (label, report) in &rows {
        csv.push_str(&format!(
            "{label},{},{}\n",
            report.mean_accuracy, report.standard_error
        ));
    }
    std::fs::write(&table_path, csv)?;
    run.record_output(&table_path);
    println!("[ablate-relu] comparison table -> {}", table_path.display());
    Ok(())
}

fn expected_feature_dim(net: &Network<f32>, flip_mode: FlipMode) -> usize {
    match flip_mode {
        FlipMode::Average => net.feature_dim(),
        FlipMode::Concat => 2 * net.feature_dim(),
    }
}
