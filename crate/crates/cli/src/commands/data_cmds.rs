//! Dataset-side commands: synth, align, report-dist.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use rand::seq::IndexedRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mmdfr_core::data::{
    self, distribution_report, load_manifest, synth_generate, synth_write,
    write_distribution_csv, write_manifest, SynthConfig,
};
use mmdfr_core::eval::{write_pairs_text, PairRef};
use mmdfr_core::fusion::ModalityTag;

use crate::common::{self, augment_config, geometry_from_config, load_mesh};
use crate::settings::{IoPlan, Run};

#[derive(Args)]
pub struct SynthArgs {
    /// Output directory for images, manifest, and pairs.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub subjects: Option<usize>,
    #[arg(long = "per-subject")]
    pub per_subject: Option<usize>,
    /// Square image side in pixels.
    #[arg(long)]
    pub size: Option<usize>,
    /// Same/different pairs per fold in pairs.txt (0 disables).
    #[arg(long = "pairs-per-fold")]
    pub pairs_per_fold: Option<usize>,
    #[arg(long)]
    pub folds: Option<usize>,
    /// Draw pairs only from each subject's images after the first K
    /// (keeps evaluation pairs off the training split).
    #[arg(long = "pairs-skip-first")]
    pub pairs_skip_first: Option<usize>,
    /// Also write manifest_train.tsv with the first K images per subject.
    #[arg(long = "train-split")]
    pub train_split: Option<usize>,
}

fn synth_config(run: &Run, args: &SynthArgs) -> Result<SynthConfig> {
    let cfg = &run.config;
    let d = SynthConfig::default();
    let size = cfg.resolve(args.size, "synth.size", d.height)?;
    Ok(SynthConfig {
        subjects: cfg.resolve(args.subjects, "synth.subjects", d.subjects)?,
        images_per_subject: cfg.resolve(args.per_subject, "synth.per_subject", d.images_per_subject)?,
        height: size,
        width: size,
        rotation: cfg.resolve(None, "synth.rotation", d.rotation)?,
        scale: cfg.resolve(None, "synth.scale", d.scale)?,
        translation: cfg.resolve(None, "synth.translation", d.translation)?,
        brightness: cfg.resolve(None, "synth.brightness", d.brightness)?,
        noise_sigma: cfg.resolve(None, "synth.noise", d.noise_sigma)?,
        rng_seed: run.seed,
    })
}

/// Samples `folds x per_fold` same and different pairs from the generated
/// subjects, restricted to image indices > skip (1-based refs).
pub fn synth_pairs(
    subjects: usize,
    per_subject: usize,
    skip: usize,
    folds: usize,
    per_fold: usize,
    seed: u64,
) -> Result<Vec<Vec<PairRef>>> {
    if per_subject.saturating_sub(skip) < 2 {
        bail!(
            "pairs need at least 2 eligible images per subject \
             (per-subject {per_subject}, skip {skip})"
        );
    }
    if subjects < 2 {
        bail!("pairs need at least 2 subjects");
    }
    let name = |s: usize| format!("s{s:04}");
    let eligible: Vec<u32> = ((skip + 1)..=per_subject).map(|i| i as u32).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0xA24BAED4963EE407));
    let mut out = Vec::with_capacity(folds);
    for _ in 0..folds {
        let mut fold = Vec::with_capacity(2 * per_fold);
        for _ in 0..per_fold {
            let s = rng.random_range(0..subjects);
            let i = *eligible.choose(&mut rng).unwrap();
            let j = loop {
                let j = *eligible.choose(&mut rng).unwrap();
                if j != i {
                    break j;
                }
            };
            fold.push(PairRef {
                a: (name(s), i),
                b: (name(s), j),
                same: true,
            });
        }
        for _ in 0..per_fold {
            let s1 = rng.random_range(0..subjects);
            let s2 = loop {
                let s2 = rng.random_range(0..subjects);
                if s2 != s1 {
                    break s2;
                }
            };
            fold.push(PairRef {
                a: (name(s1), *eligible.choose(&mut rng).unwrap()),
                b: (name(s2), *eligible.choose(&mut rng).unwrap()),
                same: false,
            });
        }
        out.push(fold);
    }
    Ok(out)
}

pub fn synth(run: &mut Run, args: SynthArgs) -> Result<()> {
    let cfg = synth_config(run, &args)?;
    let pairs_per_fold = run
        .config
        .resolve(args.pairs_per_fold, "synth.pairs_per_fold", 25usize)?;
    let folds = run.config.resolve(args.folds, "synth.folds", 10usize)?;
    let skip = run
        .config
        .resolve(args.pairs_skip_first, "synth.pairs_skip_first", 0usize)?;
    let manifest_path = args.out.join("manifest.tsv");
    let pairs_path = args.out.join("pairs.txt");
    let train_path = args.out.join("manifest_train.tsv");
    if run.dry_run {
        let mut plan = IoPlan::default();
        plan.write(&args.out);
        plan.write(&manifest_path);
        if pairs_per_fold > 0 {
            plan.write(&pairs_path);
        }
        if args.train_split.is_some() {
            plan.write(&train_path);
        }
        plan.print();
        return Ok(());
    }
    let dataset = synth_generate(&cfg);
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let manifest = synth_write(&dataset, &args.out)?;
    run.record_output(&manifest);
    println!(
        "[synth] {} subjects x {} images ({}x{}) -> {}",
        cfg.subjects,
        cfg.images_per_subject,
        cfg.height,
        cfg.width,
        args.out.display()
    );
    if let Some(k) = args.train_split {
        // i0000.pgm: index within subject from the path pattern.
        let image_index = |r: &data::ManifestRecord| -> usize {
            r.image_path[r.image_path.len() - 8..r.image_path.len() - 4]
                .parse()
                .unwrap_or(usize::MAX)
        };
        let train: Vec<_> = dataset
            .records
            .iter()
            .filter(|r| image_index(r) < k)
            .cloned()
            .collect();
        let eval: Vec<_> = dataset
            .records
            .iter()
            .filter(|r| image_index(r) >= k)
            .cloned()
            .collect();
        write_manifest(&train, &train_path)?;
        run.record_output(&train_path);
        let eval_path = args.out.join("manifest_eval.tsv");
        write_manifest(&eval, &eval_path)?;
        run.record_output(&eval_path);
        println!(
            "[synth] split: first {k} per subject -> {}, rest -> {}",
            train_path.display(),
            eval_path.display()
        );
    }
    if pairs_per_fold > 0 {
        let pairs = synth_pairs(
            cfg.subjects,
            cfg.images_per_subject,
            skip,
            folds,
            pairs_per_fold,
            run.seed,
        )?;
        std::fs::write(&pairs_path, write_pairs_text(&pairs))
            .with_context(|| format!("writing {}", pairs_path.display()))?;
        run.record_output(&pairs_path);
        println!(
            "[synth] {folds} folds x {} pairs (skip-first {skip}) -> {}",
            2 * pairs_per_fold,
            pairs_path.display()
        );
    }
    Ok(())
}

#[derive(Args)]
pub struct AlignArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory image paths are relative to (defaults to the manifest's
    /// directory).
    #[arg(long = "images-root")]
    pub images_root: Option<PathBuf>,
    /// Mesh file path or "builtin".
    #[arg(long, default_value = "builtin")]
    pub mesh: String,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn align(run: &mut Run, args: AlignArgs) -> Result<()> {
    let images_root = args
        .images_root
        .clone()
        .unwrap_or_else(|| args.manifest.parent().unwrap_or(std::path::Path::new(".")).to_path_buf());
    let aligned_manifest = args.out.join("aligned_manifest.tsv");
    if run.dry_run {
        let mut plan = IoPlan::default();
        plan.read(&args.manifest);
        if args.mesh != "builtin" {
            plan.read(std::path::Path::new(&args.mesh));
        }
        plan.read(&images_root);
        plan.write(&args.out);
        plan.write(&aligned_manifest);
        plan.print();
        return Ok(());
    }
    let mesh = load_mesh(&args.mesh)?;
    let geometry = geometry_from_config(run)?;
    let records = load_manifest(&args.manifest)?;
    std::fs::create_dir_all(&args.out)?;
    let mut lines = String::new();
    let mut fallbacks = 0usize;
    for record in &records {
        let image = common::read_record_image(&images_root, record)?;
        let (bundle, fell_back) = geometry
            .run(&image, &record.landmarks, &mesh)
            .with_context(|| format!("geometry for {}", record.image_path))?;
        fallbacks += usize::from(fell_back);
        let stem = record
            .image_path
            .replace([std::path::MAIN_SEPARATOR, '/'], "_")
            .replace(".pgm", "");
        for tag in ModalityTag::ALL {
            let img = common::bundle_modality(&bundle, tag);
            let rel = format!("{}/{}_{}.pgm", record.subject_id, stem, tag.label());
            let path = args.out.join(&rel);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            img.write_pgm(&path)?;
            lines.push_str(&format!("{rel}\t{}\t{}\n", record.subject_id, tag.label()));
        }
    }
    std::fs::write(&aligned_manifest, lines)?;
    run.record_output(&aligned_manifest);
    println!(
        "[align] {} records -> {} modality images ({} frontal fallbacks)",
        records.len(),
        records.len() * 8,
        fallbacks
    );
    Ok(())
}

#[derive(Args)]
pub struct ReportDistArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Count augmented variants instead of raw records (none|flip|full).
    #[arg(long, default_value = "none")]
    pub augment: String,
}

pub fn report_dist(run: &mut Run, args: ReportDistArgs) -> Result<()> {
    if run.dry_run {
        let mut plan = IoPlan::default();
        plan.read(&args.manifest);
        plan.write(&args.out);
        plan.print();
        return Ok(());
    }
    let records = load_manifest(&args.manifest)?;
    let mut report = distribution_report(&records)?;
    let multiplicity = augment_config(run, &args.augment)?.multiplicity();
    if multiplicity > 1 {
        for (_, count) in report.counts.iter_mut() {
            *count *= multiplicity;
        }
        report.min *= multiplicity;
        report.max *= multiplicity;
        report.median *= multiplicity as f64;
        report.total *= multiplicity;
    }
    write_distribution_csv(&report, &args.out)?;
    run.record_output(&args.out);
    println!(
        "[report-dist] {} subjects, {} images (x{multiplicity} augmentation), \
         min/median/max = {}/{}/{} -> {}",
        report.counts.len(),
        report.total,
        report.min,
        report.median,
        report.max,
        args.out.display()
    );
    Ok(())
}
