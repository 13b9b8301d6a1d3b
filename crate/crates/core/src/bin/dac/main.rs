//! Pipeline driver: generate disc datasets, train classifiers, build
//! real/counterfactual pairs, sweep attribution masks, and merge reports.
//!
//! Every command writes a `run_manifest.json` (or `<file>.run.json`) holding
//! the fully resolved configuration and tool version, and is deterministic:
//! rerunning with the same flags reproduces the output bytes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Once;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use dac_core::data::{
    self, filter_pairs, load_dataset, load_pair_manifest, write_pair_manifest, DatasetKind,
    DatasetMeta, PairRecord,
};
use dac_core::model::{checkpoint, Checkpoint, ModelKind};
use dac_core::seed;
use dac_core::train::{train_classifier, EpochStats, TrainConfig};

mod plot;
mod report;
mod sweep;

#[derive(Parser)]
#[command(
    name = "dac",
    version,
    about = "Counterfactual attribution pipeline: synthetic discs, classifier training, \
             pair acceptance, mask-sweep scoring, and report merging."
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic disc dataset (PNG images + manifests).
    GenData(GenDataArgs),
    /// Train a classifier on a generated dataset and write a checkpoint.
    Train(TrainArgs),
    /// Build real/counterfactual pairs and keep the ones the model accepts.
    Pair(PairArgs),
    /// Score attribution methods over accepted pairs with the mask sweep.
    Dac(DacArgs),
    /// Merge results tables from one or more runs into a comparison report.
    Report(ReportArgs),
}

#[derive(Args, Serialize)]
struct GenDataArgs {
    /// Dataset family: disc-a | disc-b.
    #[arg(long, value_parser = parse_dataset)]
    dataset: DatasetKind,
    /// Number of samples to generate.
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Square image size in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Output directory (created if missing).
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    /// Dataset directory produced by `gen-data`.
    #[arg(long)]
    dataset_dir: PathBuf,
    /// Architecture: vgg | resnet.
    #[arg(long, default_value = "vgg", value_parser = parse_model)]
    model: ModelKind,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of samples used for training; the rest validate.
    #[arg(long, default_value_t = 0.9)]
    split: f64,
    /// Width of the two hidden linear layers in the classifier head.
    #[arg(long, default_value_t = 4096)]
    head_width: usize,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct PairArgs {
    /// Generated dataset to derive counterfactual pairs from.
    #[arg(long, required_unless_present = "pairs_in", conflicts_with = "pairs_in")]
    dataset_dir: Option<PathBuf>,
    /// Existing pair manifest to ingest and filter instead of generating.
    #[arg(long)]
    pairs_in: Option<PathBuf>,
    /// Checkpoint of the classifier that vets the counterfactuals.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Acceptance threshold on the counterfactual class probability.
    #[arg(long, default_value_t = 0.8)]
    theta: f64,
    /// Seed for counterfactual sampling (disc-a shape removal).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for the accepted manifest and its images.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Serialize)]
struct DacArgs {
    /// Accepted pair manifest (image paths resolve against its directory).
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated method ids, e.g. "d-ig,ig,random,residual".
    #[arg(
        long,
        default_value = "ingrads,d-ingrads,ig,d-ig,dl,d-dl,gc,d-gc,ggc,d-ggc,residual,random"
    )]
    methods: String,
    /// Number of swept attribution thresholds per pair.
    #[arg(long, default_value_t = dac_core::eval::N_THRESHOLDS)]
    thresholds: usize,
    /// Integration steps for ig / d-ig.
    #[arg(long, default_value_t = 50)]
    ig_steps: usize,
    /// Base seed for the random-baseline maps (derived per pair).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write qualitative PNG panels for the first N pairs.
    #[arg(long, default_value_t = 0)]
    panels: usize,
    /// Dataset name used in the tables; defaults to the pair directory name.
    #[arg(long)]
    dataset_label: Option<String>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Serialize)]
struct ReportArgs {
    /// One or more results.csv files produced by `dac`.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

fn parse_dataset(s: &str) -> Result<DatasetKind, String> {
    s.parse()
}

fn parse_model(s: &str) -> Result<ModelKind, String> {
    s.parse()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    init_workers()?;
    match &cli.command {
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Pair(a) => cmd_pair(a),
        Cmd::Dac(a) => sweep::cmd_dac(a),
        Cmd::Report(a) => report::cmd_report(a),
    }
}

/// Cap the worker pool at DAC_WORKERS threads; default is one per logical
/// core. Worker count never changes output bytes, only wall time.
fn init_workers() -> Result<()> {
    let Some(raw) = std::env::var_os("DAC_WORKERS") else { return Ok(()) };
    let raw = raw.to_string_lossy();
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| anyhow!("DAC_WORKERS must be a positive integer, got '{raw}'"))?;
    if n == 0 {
        bail!("DAC_WORKERS must be at least 1");
    }
    static INIT: Once = Once::new();
    let mut err = None;
    INIT.call_once(|| {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            err = Some(e);
        }
    });
    match err {
        Some(e) => Err(anyhow!(e).context("worker pool")),
        None => Ok(()),
    }
}

#[derive(Serialize)]
struct RunManifest<'a, C: Serialize> {
    command: &'static str,
    tool_version: &'static str,
    config: &'a C,
}

/// Record how an artifact was produced, next to the artifact itself. The
/// manifest holds the resolved flags, so replaying it reproduces the run.
fn save_manifest<C: Serialize>(path: &Path, command: &'static str, config: &C) -> Result<()> {
    let manifest =
        RunManifest { command, tool_version: env!("CARGO_PKG_VERSION"), config };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    if a.count == 0 {
        bail!("--count must be at least 1; nothing to generate");
    }
    if a.size < 8 {
        bail!("--size must be at least 8 (the smallest classifier input), got {}", a.size);
    }
    let samples = data::gen_dataset(a.dataset, a.seed, a.count, a.size)?;
    let meta = DatasetMeta {
        kind: a.dataset,
        seed: a.seed,
        count: a.count,
        image_size: a.size,
        num_classes: a.dataset.num_classes(),
    };
    data::write_dataset(&a.out_dir, &meta, &samples)?;
    save_manifest(&a.out_dir.join("run_manifest.json"), "gen-data", a)?;
    println!("wrote {} {} samples to {}", a.count, a.dataset, a.out_dir.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let (meta, samples) =
        load_dataset(&a.dataset_dir).with_context(|| format!("loading {}", a.dataset_dir.display()))?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        seed: a.seed,
        split: a.split,
        dataset: meta.kind.to_string(),
        model: a.model,
        num_classes: meta.num_classes,
        head_width: a.head_width,
    };
    let mut print_epoch = |s: &EpochStats| {
        println!("epoch {:>4}  loss {:.6}  val_acc {:.4}", s.epoch, s.mean_loss, s.val_accuracy);
    };
    let outcome = train_classifier(&cfg, &samples, Some(&mut print_epoch))?;
    if let Some(parent) = a.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    checkpoint::save(&outcome.checkpoint, &a.out)?;
    save_manifest(&run_json_path(&a.out), "train", a)?;
    println!(
        "best epoch {}  val_acc {:.4}  -> {}",
        outcome.checkpoint.meta.epoch,
        outcome.checkpoint.meta.val_accuracy,
        a.out.display()
    );
    Ok(())
}

/// Manifest path for a single-file artifact: `model.ckpt` -> `model.ckpt.run.json`.
fn run_json_path(out: &Path) -> PathBuf {
    PathBuf::from(format!("{}.run.json", out.display()))
}

fn cmd_pair(a: &PairArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.theta) {
        bail!("--theta must lie in [0,1], got {}", a.theta);
    }
    let ckpt = checkpoint::load(&a.checkpoint)
        .with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let images_dir = a.out_dir.join("images");
    fs::create_dir_all(&images_dir)?;

    let records = match (&a.dataset_dir, &a.pairs_in) {
        (Some(dir), None) => generate_pairs(&ckpt, dir, a.seed, &a.out_dir)?,
        (None, Some(manifest)) => ingest_pairs(manifest, &a.out_dir)?,
        _ => unreachable!("clap enforces exactly one pair source"),
    };
    if records.is_empty() {
        bail!("no pairs to filter");
    }

    let accepted = filter_pairs(&ckpt, &a.out_dir, &records, a.theta)?;
    write_pair_manifest(&a.out_dir.join("pairs.csv"), &accepted)?;
    prune_unreferenced_images(&images_dir, &accepted)?;
    save_manifest(&a.out_dir.join("run_manifest.json"), "pair", a)?;
    println!(
        "accepted {}/{} pairs at theta {} (rate {:.4})",
        accepted.len(),
        records.len(),
        a.theta,
        accepted.len() as f64 / records.len() as f64
    );
    Ok(())
}

/// Derive every counterfactual a generated dataset supports: the parity flip
/// for disc-a, one substitution per foreign class for disc-b. Both sides of
/// each pair are written under `out_dir/images` so the manifest is
/// self-contained.
fn generate_pairs(
    ckpt: &Checkpoint,
    dataset_dir: &Path,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<PairRecord>> {
    let (meta, samples) =
        load_dataset(dataset_dir).with_context(|| format!("loading {}", dataset_dir.display()))?;
    if ckpt.spec.input_size != meta.image_size {
        bail!(
            "checkpoint expects {0}x{0} input but dataset images are {1}x{1}",
            ckpt.spec.input_size,
            meta.image_size
        );
    }
    if ckpt.spec.num_classes != meta.num_classes {
        bail!(
            "checkpoint has {} classes but dataset has {}",
            ckpt.spec.num_classes,
            meta.num_classes
        );
    }

    let mut records = Vec::new();
    for (idx, s) in samples.iter().enumerate() {
        if s.scene.is_none() {
            bail!(
                "sample {idx} has no scene; counterfactuals need a generated dataset \
                 (ingest external pairs with --pairs-in instead)"
            );
        }
        let sid = data::sample_id(idx);
        let real_rel = format!("images/{sid}_real.png");
        data::write_png_gray(&out_dir.join(&real_rel), &s.image)?;

        let counterfactuals = match meta.kind {
            DatasetKind::DiscA => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, idx as u64));
                vec![data::make_counterfactual_disc_a(s, &mut rng)?]
            }
            DatasetKind::DiscB => (0..meta.num_classes)
                .filter(|&j| j != s.label)
                .map(|j| data::make_counterfactual_disc_b(s, j))
                .collect::<Result<Vec<_>, _>>()?,
        };
        for cf in counterfactuals {
            let pair_id = format!("{sid}-{}to{}", s.label, cf.label);
            let cf_rel = format!("images/{pair_id}_cf.png");
            data::write_png_gray(&out_dir.join(&cf_rel), &cf.image)?;
            records.push(PairRecord::new(pair_id, s.label, cf.label, real_rel.clone(), cf_rel));
        }
    }
    Ok(records)
}

/// Copy an external manifest's images into `out_dir` under canonical names
/// so the output directory stays self-contained.
fn ingest_pairs(manifest: &Path, out_dir: &Path) -> Result<Vec<PairRecord>> {
    let source = load_pair_manifest(manifest)
        .with_context(|| format!("loading {}", manifest.display()))?;
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    let mut seen = std::collections::BTreeSet::new();
    let mut records = Vec::new();
    for r in &source {
        check_pair_id(&r.pair_id)?;
        if !seen.insert(r.pair_id.clone()) {
            bail!("duplicate pair id '{}' in {}", r.pair_id, manifest.display());
        }
        let real_rel = format!("images/{}_real.png", r.pair_id);
        let cf_rel = format!("images/{}_cf.png", r.pair_id);
        fs::copy(base.join(&r.path_real), out_dir.join(&real_rel))
            .with_context(|| format!("copying {}", r.path_real))?;
        fs::copy(base.join(&r.path_counterfactual), out_dir.join(&cf_rel))
            .with_context(|| format!("copying {}", r.path_counterfactual))?;
        records.push(PairRecord::new(r.pair_id.clone(), r.class_i, r.class_j, real_rel, cf_rel));
    }
    Ok(records)
}

/// Pair ids become file names and CSV cells, so keep them boring.
fn check_pair_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if !ok {
        bail!("pair id '{id}' may only contain ASCII letters, digits, '-', '_', '.'");
    }
    Ok(())
}

/// Drop images that no accepted record references, leaving the directory an
/// exact mirror of the manifest.
fn prune_unreferenced_images(images_dir: &Path, accepted: &[PairRecord]) -> Result<()> {
    let referenced: std::collections::BTreeSet<&str> = accepted
        .iter()
        .flat_map(|r| [r.path_real.as_str(), r.path_counterfactual.as_str()])
        .filter_map(|p| Path::new(p).file_name().and_then(|n| n.to_str()))
        .collect();
    for entry in fs::read_dir(images_dir)? {
        let entry = entry?;
        let name = entry.file_name();
        let keep = name.to_str().is_some_and(|n| referenced.contains(n));
        if !keep {
            fs::remove_file(entry.path())?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_id_charset_is_enforced() {
        assert!(check_pair_id("00012-1to2").is_ok());
        assert!(check_pair_id("mnist_7.3").is_ok());
        assert!(check_pair_id("").is_err());
        assert!(check_pair_id("a,b").is_err());
        assert!(check_pair_id("a/b").is_err());
        assert!(check_pair_id("a b").is_err());
    }

    #[test]
    fn manifest_is_reproducible_and_carries_the_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run_manifest.json");
        #[derive(Serialize)]
        struct Cfg {
            seed: u64,
            out: String,
        }
        let cfg = Cfg { seed: 7, out: "x".into() };
        save_manifest(&path, "gen-data", &cfg).unwrap();
        let first = fs::read(&path).unwrap();
        save_manifest(&path, "gen-data", &cfg).unwrap();
        let second = fs::read(&path).unwrap();
        assert_eq!(first, second);
        let text = String::from_utf8(first).unwrap();
        assert!(text.contains("\"command\": \"gen-data\""));
        assert!(text.contains("\"seed\": 7"));
        assert!(text.contains("\"tool_version\""));
        assert!(text.ends_with('\n'));
    }

    #[test]
    fn pruning_keeps_exactly_the_referenced_images() {
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("images");
        fs::create_dir(&images).unwrap();
        for name in ["a_real.png", "a_cf.png", "b_real.png", "b_cf.png"] {
            fs::write(images.join(name), b"x").unwrap();
        }
        let accepted =
            vec![PairRecord::new("a", 0, 1, "images/a_real.png", "images/a_cf.png")];
        prune_unreferenced_images(&images, &accepted).unwrap();
        let mut left: Vec<String> = fs::read_dir(&images)
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        left.sort();
        assert_eq!(left, ["a_cf.png", "a_real.png"]);
    }
}
