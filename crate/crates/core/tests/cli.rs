//! End-to-end tests of the `dac` binary: every subcommand runs against real
//! artifacts in temp directories, and reruns must reproduce output bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use once_cell::sync::Lazy;
use tempfile::TempDir;

use dac_core::data::{load_dataset, load_pair_manifest};
use dac_core::grad::{ReluMode, Tensor};
use dac_core::model::{
    build_vgg, checkpoint, forward, init_model, update_running_stats, Mode, ModelKind,
};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dac"));
    cmd.env_remove("DAC_WORKERS");
    cmd
}

fn run_ok(cmd: &mut Command) -> String {
    let Output { status, stdout, stderr } = cmd.output().expect("spawn dac");
    assert!(
        status.success(),
        "expected success, got {status}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&stdout),
        String::from_utf8_lossy(&stderr)
    );
    String::from_utf8(stdout).unwrap()
}

fn run_fail(cmd: &mut Command) -> String {
    let Output { status, stdout, stderr } = cmd.output().expect("spawn dac");
    assert!(
        !status.success(),
        "expected failure, got success\nstdout: {}",
        String::from_utf8_lossy(&stdout)
    );
    String::from_utf8(stderr).unwrap()
}

/// Relative path -> bytes for every file under `dir`.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_path_buf();
                files.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    files
}

/// One tiny pipeline (dataset -> checkpoint -> accepted pairs -> sweep),
/// built once and shared read-only by the tests.
struct Fixture {
    root: TempDir,
    dataset: PathBuf,
    ckpt: PathBuf,
    pairs_dir: PathBuf,
    subset: PathBuf,
    dac_dir: PathBuf,
    pair_stdout: String,
    dac_stdout: String,
}

static FIXTURE: Lazy<Fixture> = Lazy::new(|| {
    let root = TempDir::new().unwrap();
    let dataset = root.path().join("ds");
    let ckpt = root.path().join("model.ckpt");
    let pairs_dir = root.path().join("pairs");
    let dac_dir = root.path().join("run");

    run_ok(bin().args([
        "gen-data",
        "--dataset",
        "disc-b",
        "--count",
        "12",
        "--seed",
        "11",
        "--size",
        "16",
        "--out-dir",
    ])
    .arg(&dataset));

    run_ok(bin()
        .args([
            "train",
            "--model",
            "vgg",
            "--epochs",
            "2",
            "--batch-size",
            "4",
            "--head-width",
            "16",
            "--seed",
            "3",
            "--dataset-dir",
        ])
        .arg(&dataset)
        .arg("--out")
        .arg(&ckpt));

    let pair_stdout = run_ok(bin()
        .args(["pair", "--theta", "0.0", "--seed", "5", "--dataset-dir"])
        .arg(&dataset)
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--out-dir")
        .arg(&pairs_dir));

    // A 6-pair subset keeps the sweep fast; paths stay relative to pairs/.
    let manifest = fs::read_to_string(pairs_dir.join("pairs.csv")).unwrap();
    let subset_text: String = manifest.lines().take(6).map(|l| format!("{l}\n")).collect();
    let subset = pairs_dir.join("subset.csv");
    fs::write(&subset, subset_text).unwrap();

    let dac_stdout = run_ok(bin()
        .args([
            "dac",
            "--methods",
            "d-ig,ig,random,residual",
            "--ig-steps",
            "8",
            "--panels",
            "1",
            "--dataset-label",
            "disc-b",
            "--pairs",
        ])
        .arg(&subset)
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--out-dir")
        .arg(&dac_dir));

    Fixture { root, dataset, ckpt, pairs_dir, subset, dac_dir, pair_stdout, dac_stdout }
});

// ---- gen-data ----

#[test]
fn gen_data_is_deterministic_and_writes_the_requested_count() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        run_ok(bin()
            .args(["gen-data", "--dataset", "disc-a", "--count", "5", "--seed", "9", "--size", "16", "--out-dir"])
            .arg(dir));
    }
    // Identical flags give identical bytes, apart from the out_dir recorded
    // in the run manifest.
    let (mut sa, mut sb) = (snapshot(&a), snapshot(&b));
    sa.remove(Path::new("run_manifest.json"));
    sb.remove(Path::new("run_manifest.json"));
    assert_eq!(sa, sb);

    let manifest = fs::read_to_string(a.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 5);
    let (meta, samples) = load_dataset(&a).unwrap();
    assert_eq!(meta.num_classes, 2);
    assert_eq!(samples.len(), 5);

    let err = run_fail(bin()
        .args(["gen-data", "--dataset", "disc-a", "--count", "0", "--out-dir"])
        .arg(tmp.path().join("c")));
    assert!(err.contains("--count"), "unexpected error: {err}");
}

// ---- train ----

#[test]
fn train_writes_one_loadable_checkpoint_and_a_run_manifest() {
    let f = &*FIXTURE;
    let ckpt = checkpoint::load(&f.ckpt).unwrap();
    assert_eq!(ckpt.spec.kind, ModelKind::Vgg);
    assert_eq!(ckpt.spec.input_size, 16);
    assert_eq!(ckpt.spec.num_classes, 3);

    let manifest = fs::read_to_string(f.root.path().join("model.ckpt.run.json")).unwrap();
    assert!(manifest.contains("\"command\": \"train\""));
    assert!(manifest.contains("\"epochs\": 2"));
}

#[test]
fn train_fails_loudly_without_a_dataset() {
    let err = run_fail(bin()
        .args(["train", "--dataset-dir", "/nonexistent/ds", "--out", "/tmp/never.ckpt"]));
    assert!(err.contains("error"), "unexpected stderr: {err}");
}

// ---- pair ----

#[test]
fn pair_generates_both_counterfactuals_per_sample_and_prints_the_rate() {
    let f = &*FIXTURE;
    // 12 disc-b samples, two foreign classes each; theta 0 accepts all.
    assert!(f.pair_stdout.contains("accepted 24/24"), "stdout: {}", f.pair_stdout);
    assert!(f.pair_stdout.contains("rate 1.0000"), "stdout: {}", f.pair_stdout);

    let records = load_pair_manifest(&f.pairs_dir.join("pairs.csv")).unwrap();
    assert_eq!(records.len(), 24);
    for r in &records {
        assert_ne!(r.class_i, r.class_j);
        let (x_o, x_c) = r.load_images(&f.pairs_dir).unwrap();
        assert_eq!(x_o.shape(), [1, 16, 16]);
        assert_eq!(x_c.shape(), [1, 16, 16]);
    }
}

#[test]
fn pair_rejects_thetas_outside_the_unit_interval() {
    let f = &*FIXTURE;
    let tmp = TempDir::new().unwrap();
    let err = run_fail(bin()
        .args(["pair", "--theta", "1.5", "--dataset-dir"])
        .arg(&f.dataset)
        .arg("--checkpoint")
        .arg(&f.ckpt)
        .arg("--out-dir")
        .arg(tmp.path().join("p")));
    assert!(err.contains("theta"), "unexpected error: {err}");
}

#[test]
fn pair_acceptance_collapses_for_a_strict_theta_on_an_untrained_model() {
    let f = &*FIXTURE;
    let tmp = TempDir::new().unwrap();
    // Fresh random weights keep the probabilities near 1/3, far below
    // theta = 0.99. One train-mode pass warms the batch-norm running stats
    // so eval-mode inference is allowed, without moving any weights.
    let mut untrained = init_model(&build_vgg(16, 3, 16), 1);
    {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let batch =
            Tensor::new(vec![2, 1, 16, 16], (0..2 * 256).map(|_| rng.gen_range(0.0..1.0)).collect());
        let fp =
            forward(&untrained, &batch, Mode::Train, ReluMode::Standard, Some(&mut rng)).unwrap();
        update_running_stats(&mut untrained, &fp.bn_batches);
    }
    let ckpt_path = tmp.path().join("untrained.ckpt");
    checkpoint::save(&untrained, &ckpt_path).unwrap();

    let out = tmp.path().join("pairs");
    let stdout = run_ok(bin()
        .args(["pair", "--theta", "0.99", "--seed", "5", "--dataset-dir"])
        .arg(&f.dataset)
        .arg("--checkpoint")
        .arg(&ckpt_path)
        .arg("--out-dir")
        .arg(&out));
    let accepted = load_pair_manifest(&out.join("pairs.csv")).unwrap().len();
    assert!(accepted <= 2, "expected near-zero acceptance, got {accepted}/24");
    assert!(stdout.contains(&format!("accepted {accepted}/24")), "stdout: {stdout}");
    // Images mirror the manifest exactly: two files per accepted pair at
    // most (the real side can be shared).
    let image_files = fs::read_dir(out.join("images")).unwrap().count();
    assert!(image_files <= 2 * accepted, "{image_files} images for {accepted} pairs");
}

#[test]
fn pair_ingests_an_external_manifest_by_copying_its_images() {
    let f = &*FIXTURE;
    let tmp = TempDir::new().unwrap();
    // An external manifest next to existing images: the first two fixture
    // pairs, referenced by their original relative paths.
    let manifest = fs::read_to_string(f.pairs_dir.join("pairs.csv")).unwrap();
    let external: String = manifest.lines().take(2).map(|l| format!("{l}\n")).collect();
    let external_path = f.pairs_dir.join("external.csv");
    fs::write(&external_path, external).unwrap();

    let out = tmp.path().join("ingested");
    let stdout = run_ok(bin()
        .args(["pair", "--theta", "0.0", "--pairs-in"])
        .arg(&external_path)
        .arg("--checkpoint")
        .arg(&f.ckpt)
        .arg("--out-dir")
        .arg(&out));
    assert!(stdout.contains("accepted 2/2"), "stdout: {stdout}");
    let records = load_pair_manifest(&out.join("pairs.csv")).unwrap();
    assert_eq!(records.len(), 2);
    for r in &records {
        assert!(out.join(&r.path_real).exists());
        assert!(out.join(&r.path_counterfactual).exists());
    }
}

// ---- dac ----

#[test]
fn dac_emits_the_documented_tables_curves_and_panels() {
    let f = &*FIXTURE;
    let results = fs::read_to_string(f.dac_dir.join("results.csv")).unwrap();
    let mut lines = results.lines();
    assert_eq!(
        lines.next().unwrap(),
        "dataset,model,method,class_i,class_j,pair_id,dac_auc,min_mask_fraction,min_mask_score"
    );
    assert_eq!(lines.count(), 6 * 4, "one row per (pair, method)");
    assert!(results.lines().skip(1).all(|l| l.starts_with("disc-b,vgg,")));

    // Aggregate: dataset column, then one column per requested method.
    let aggregate = fs::read_to_string(f.dac_dir.join("aggregate.csv")).unwrap();
    let rows: Vec<&str> = aggregate.lines().collect();
    assert_eq!(rows[0], "dataset,d-ig,ig,random,residual");
    assert_eq!(rows.len(), 2);
    assert!(rows[1].starts_with("disc-b,"));
    assert_eq!(rows[1].split(',').count(), 5);

    // Four aggregate lines on stdout, one per method.
    for m in ["d-ig", "ig", "random", "residual"] {
        assert!(
            f.dac_stdout.lines().any(|l| l.contains(m) && l.contains("mean_dac")),
            "missing aggregate line for {m}: {}",
            f.dac_stdout
        );
    }

    let curves = fs::read_to_string(f.dac_dir.join("curves.csv")).unwrap();
    assert_eq!(curves.lines().next().unwrap(), "method,fraction,mean_delta_f");
    assert_eq!(curves.lines().count(), 1 + 4 * 101);

    let svg = fs::read_to_string(f.dac_dir.join("curves.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 4);
    assert!(!svg.contains("<script"));

    // Qualitative panels for the first pair: five images per method.
    let first_pair = load_pair_manifest(&f.subset).unwrap()[0].pair_id.clone();
    let panel_dir = f.dac_dir.join("panels").join(&first_pair);
    for m in ["d-ig", "ig", "random", "residual"] {
        for part in ["map", "mask", "masked-real", "masked-cf", "hybrid"] {
            assert!(
                panel_dir.join(format!("{m}-{part}.png")).exists(),
                "missing {m}-{part}.png"
            );
        }
    }
}

#[test]
fn dac_reruns_reproduce_every_output_byte_even_in_parallel() {
    let f = &*FIXTURE;
    let tmp = TempDir::new().unwrap();
    let again = tmp.path().join("again");
    run_ok(bin()
        .env("DAC_WORKERS", "3")
        .args([
            "dac",
            "--methods",
            "d-ig,ig,random,residual",
            "--ig-steps",
            "8",
            "--panels",
            "1",
            "--dataset-label",
            "disc-b",
            "--pairs",
        ])
        .arg(&f.subset)
        .arg("--checkpoint")
        .arg(&f.ckpt)
        .arg("--out-dir")
        .arg(&again));
    let (mut sa, mut sb) = (snapshot(&f.dac_dir), snapshot(&again));
    sa.remove(Path::new("run_manifest.json"));
    sb.remove(Path::new("run_manifest.json"));
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (path, bytes) in &sa {
        assert_eq!(bytes, &sb[path], "{} differs between reruns", path.display());
    }
}

#[test]
fn dac_rejects_unknown_methods_and_empty_manifests() {
    let f = &*FIXTURE;
    let tmp = TempDir::new().unwrap();
    let err = run_fail(bin()
        .args(["dac", "--methods", "ig,bogus", "--pairs"])
        .arg(&f.subset)
        .arg("--checkpoint")
        .arg(&f.ckpt)
        .arg("--out-dir")
        .arg(tmp.path().join("x")));
    assert!(err.contains("unknown method 'bogus'"), "unexpected error: {err}");

    let empty = tmp.path().join("empty.csv");
    fs::write(&empty, "").unwrap();
    let err = run_fail(bin()
        .args(["dac", "--pairs"])
        .arg(&empty)
        .arg("--checkpoint")
        .arg(&f.ckpt)
        .arg("--out-dir")
        .arg(tmp.path().join("y")));
    assert!(err.contains("no pairs"), "unexpected error: {err}");
}

// ---- report ----

#[test]
fn report_passthrough_matches_the_sweep_aggregate_and_marks_the_best() {
    let f = &*FIXTURE;
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("rep");
    run_ok(bin().arg("report").arg(f.dac_dir.join("results.csv")).arg("--out-dir").arg(&out));

    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    let aggregate = fs::read_to_string(f.dac_dir.join("aggregate.csv")).unwrap();
    let rep_rows: Vec<Vec<&str>> = report.lines().map(|l| l.split(',').collect()).collect();
    let agg_rows: Vec<Vec<&str>> = aggregate.lines().map(|l| l.split(',').collect()).collect();

    // Same dataset row and per-method values; the report adds a best column
    // and orders columns canonically.
    assert_eq!(*rep_rows[0].last().unwrap(), "best");
    for (col, method) in agg_rows[0].iter().enumerate().skip(1) {
        let rep_col = rep_rows[0].iter().position(|h| h == method).unwrap();
        assert_eq!(rep_rows[1][rep_col], agg_rows[1][col], "value drift for {method}");
    }
    let best = *rep_rows[1].last().unwrap();
    let best_col = rep_rows[0].iter().position(|h| *h == best).unwrap();
    let best_val: f64 = rep_rows[1][best_col].parse().unwrap();
    for cell in &rep_rows[1][1..rep_rows[1].len() - 1] {
        assert!(cell.parse::<f64>().unwrap() <= best_val);
    }

    assert!(out.join("report.svg").exists());
    assert!(out.join("run_manifest.json").exists());
}

#[test]
fn report_merges_runs_and_rejects_conflicting_duplicates() {
    let f = &*FIXTURE;
    let tmp = TempDir::new().unwrap();

    // Listing the same results twice is an identical duplicate: fine.
    let out = tmp.path().join("dup");
    run_ok(bin()
        .arg("report")
        .arg(f.dac_dir.join("results.csv"))
        .arg(f.dac_dir.join("results.csv"))
        .arg("--out-dir")
        .arg(&out));
    let dup = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(dup.lines().count(), 2);

    // A second dataset merges into a second row with every method present.
    let other_dir = tmp.path().join("other");
    fs::create_dir(&other_dir).unwrap();
    let results = fs::read_to_string(f.dac_dir.join("results.csv")).unwrap();
    fs::write(other_dir.join("results.csv"), results.replace("disc-b,", "disc-b2,")).unwrap();
    fs::copy(f.dac_dir.join("curves.csv"), other_dir.join("curves.csv")).unwrap();
    let merged_out = tmp.path().join("merged");
    run_ok(bin()
        .arg("report")
        .arg(f.dac_dir.join("results.csv"))
        .arg(other_dir.join("results.csv"))
        .arg("--out-dir")
        .arg(&merged_out));
    let merged = fs::read_to_string(merged_out.join("report.csv")).unwrap();
    assert_eq!(merged.lines().count(), 3);
    assert!(merged.lines().any(|l| l.starts_with("disc-b2,")));
    // Overlay: 4 methods x 2 runs.
    let svg = fs::read_to_string(merged_out.join("report.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 8);

    // Same dataset+method with a different value is a conflict, not a merge.
    let conflict_dir = tmp.path().join("conflict");
    fs::create_dir(&conflict_dir).unwrap();
    let mut lines: Vec<String> = results.lines().map(String::from).collect();
    let mut fields: Vec<&str> = lines[1].split(',').collect();
    fields[6] = "0.999"; // dac_auc
    lines[1] = fields.join(",");
    fs::write(conflict_dir.join("results.csv"), lines.join("\n") + "\n").unwrap();
    fs::copy(f.dac_dir.join("curves.csv"), conflict_dir.join("curves.csv")).unwrap();
    let err = run_fail(bin()
        .arg("report")
        .arg(f.dac_dir.join("results.csv"))
        .arg(conflict_dir.join("results.csv"))
        .arg("--out-dir")
        .arg(tmp.path().join("bad")));
    assert!(err.contains("conflicting rows"), "unexpected error: {err}");
}

#[test]
fn report_rejects_foreign_schemas() {
    let tmp = TempDir::new().unwrap();
    let alien = tmp.path().join("alien.csv");
    fs::write(&alien, "dataset,score\nx,1.0\n").unwrap();
    let err = run_fail(bin().arg("report").arg(&alien).arg("--out-dir").arg(tmp.path().join("r")));
    assert!(err.contains("incompatible schema"), "unexpected error: {err}");
}
