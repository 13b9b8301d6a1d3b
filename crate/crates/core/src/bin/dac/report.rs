//! The `report` subcommand: merge per-pair results tables from one or more
//! runs into a single comparison table (CSV + stdout) and a curve overlay
//! SVG, marking the best method per dataset.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use dac_core::attrib::MethodId;

use crate::plot::{self, Series};
use crate::{save_manifest, ReportArgs};

pub(crate) const RESULTS_HEADER: &str =
    "dataset,model,method,class_i,class_j,pair_id,dac_auc,min_mask_fraction,min_mask_score";

#[derive(Clone, Debug)]
pub(crate) struct ResultRow {
    pub dataset: String,
    pub model: String,
    pub method: MethodId,
    pub class_i: usize,
    pub class_j: usize,
    pub pair_id: String,
    pub auc: f64,
    pub min_fraction: f64,
    pub min_score: f64,
}

pub fn cmd_report(a: &ReportArgs) -> Result<()> {
    fs::create_dir_all(&a.out_dir)?;

    let mut inputs: Vec<(PathBuf, Vec<ResultRow>)> = Vec::new();
    for path in &a.inputs {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let rows = parse_results_csv(&text, path)?;
        if rows.is_empty() {
            bail!("{} has no result rows", path.display());
        }
        let dataset = rows[0].dataset.clone();
        if rows.iter().any(|r| r.dataset != dataset) {
            bail!("{} mixes several datasets; one results file covers one run", path.display());
        }
        inputs.push((path.clone(), rows));
    }

    let merged = merge_inputs(&inputs)?;
    let (datasets, columns, values) = build_table(&merged);
    fs::write(a.out_dir.join("report.csv"), report_csv(&datasets, &columns, &values))?;

    let svg = overlay_svg(&inputs)?;
    fs::write(a.out_dir.join("report.svg"), svg)?;
    save_manifest(&a.out_dir.join("run_manifest.json"), "report", a)?;

    print!("{}", stdout_table(&datasets, &columns, &values));
    println!("report -> {}", a.out_dir.display());
    Ok(())
}

pub(crate) fn parse_results_csv(text: &str, origin: &Path) -> Result<Vec<ResultRow>> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != RESULTS_HEADER {
        bail!(
            "{}: incompatible schema; expected header '{RESULTS_HEADER}', got '{header}'",
            origin.display()
        );
    }
    let mut rows = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            bail!("{} line {}: expected 9 fields, got {}", origin.display(), ln + 2, fields.len());
        }
        let fail = |what: &str| format!("{} line {}: bad {what}", origin.display(), ln + 2);
        rows.push(ResultRow {
            dataset: fields[0].to_string(),
            model: fields[1].to_string(),
            method: fields[2].parse().map_err(|e: String| anyhow::anyhow!(e))?,
            class_i: fields[3].parse().with_context(|| fail("class_i"))?,
            class_j: fields[4].parse().with_context(|| fail("class_j"))?,
            pair_id: fields[5].to_string(),
            auc: fields[6].parse().with_context(|| fail("dac_auc"))?,
            min_fraction: fields[7].parse().with_context(|| fail("min_mask_fraction"))?,
            min_score: fields[8].parse().with_context(|| fail("min_mask_score"))?,
        });
    }
    Ok(rows)
}

/// Merge rows keyed by (dataset, method). A key appearing in several inputs
/// is fine only when the row groups are identical (rerun of the same run);
/// differing groups would silently corrupt the averages, so they error.
pub(crate) fn merge_inputs(
    inputs: &[(PathBuf, Vec<ResultRow>)],
) -> Result<BTreeMap<(String, MethodId), Vec<ResultRow>>> {
    let mut merged: BTreeMap<(String, MethodId), Vec<ResultRow>> = BTreeMap::new();
    for (path, rows) in inputs {
        let mut local: BTreeMap<(String, MethodId), Vec<ResultRow>> = BTreeMap::new();
        for r in rows {
            local.entry((r.dataset.clone(), r.method)).or_default().push(r.clone());
        }
        for (key, group) in local {
            match merged.entry(key) {
                std::collections::btree_map::Entry::Vacant(e) => {
                    e.insert(group);
                }
                std::collections::btree_map::Entry::Occupied(e) => {
                    if !row_groups_equal(e.get(), &group) {
                        bail!(
                            "conflicting rows for dataset '{}' method '{}' (latest from {})",
                            e.key().0,
                            e.key().1,
                            path.display()
                        );
                    }
                }
            }
        }
    }
    Ok(merged)
}

fn row_groups_equal(a: &[ResultRow], b: &[ResultRow]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    let key = |r: &ResultRow| (r.pair_id.clone(), r.class_i, r.class_j);
    let mut a: Vec<&ResultRow> = a.iter().collect();
    let mut b: Vec<&ResultRow> = b.iter().collect();
    a.sort_by_key(|r| key(r));
    b.sort_by_key(|r| key(r));
    a.iter().zip(&b).all(|(x, y)| {
        x.pair_id == y.pair_id
            && x.model == y.model
            && x.class_i == y.class_i
            && x.class_j == y.class_j
            && x.auc.to_bits() == y.auc.to_bits()
            && x.min_fraction.to_bits() == y.min_fraction.to_bits()
            && x.min_score.to_bits() == y.min_score.to_bits()
    })
}

/// Pairs are averaged within each ordered class pair first, then across the
/// class-pair means — the same two-stage arithmetic the sweep aggregate uses,
/// so a single-input report reproduces its numbers exactly.
pub(crate) fn two_stage_mean(rows: &[ResultRow]) -> f64 {
    let mut groups: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = groups.entry((r.class_i, r.class_j)).or_insert((0.0, 0));
        e.0 += r.auc;
        e.1 += 1;
    }
    let (sum, n) = groups
        .values()
        .fold((0.0, 0usize), |(s, c), &(gs, gn)| (s + gs / gn as f64, c + 1));
    sum / n as f64
}

type Table = (Vec<String>, Vec<MethodId>, BTreeMap<(String, MethodId), f64>);

fn build_table(merged: &BTreeMap<(String, MethodId), Vec<ResultRow>>) -> Table {
    let mut values = BTreeMap::new();
    let mut datasets = Vec::new();
    for ((ds, m), rows) in merged {
        if !datasets.contains(ds) {
            datasets.push(ds.clone());
        }
        values.insert((ds.clone(), *m), two_stage_mean(rows));
    }
    let columns: Vec<MethodId> = MethodId::ALL
        .iter()
        .copied()
        .filter(|m| datasets.iter().any(|ds| values.contains_key(&(ds.clone(), *m))))
        .collect();
    (datasets, columns, values)
}

/// Highest-scoring column for a dataset; ties keep the earliest column.
fn best_method(
    ds: &str,
    columns: &[MethodId],
    values: &BTreeMap<(String, MethodId), f64>,
) -> Option<MethodId> {
    let mut best: Option<(MethodId, f64)> = None;
    for &m in columns {
        if let Some(&v) = values.get(&(ds.to_string(), m)) {
            if best.map_or(true, |(_, bv)| v > bv) {
                best = Some((m, v));
            }
        }
    }
    best.map(|(m, _)| m)
}

pub(crate) fn report_csv(
    datasets: &[String],
    columns: &[MethodId],
    values: &BTreeMap<(String, MethodId), f64>,
) -> String {
    let mut out = String::from("dataset");
    for m in columns {
        out.push(',');
        out.push_str(m.name());
    }
    out.push_str(",best\n");
    for ds in datasets {
        out.push_str(ds);
        for &m in columns {
            out.push(',');
            if let Some(v) = values.get(&(ds.clone(), m)) {
                out.push_str(&format!("{v:.6}"));
            }
        }
        out.push(',');
        if let Some(m) = best_method(ds, columns, values) {
            out.push_str(m.name());
        }
        out.push('\n');
    }
    out
}

fn stdout_table(
    datasets: &[String],
    columns: &[MethodId],
    values: &BTreeMap<(String, MethodId), f64>,
) -> String {
    let mut headers = vec!["dataset".to_string()];
    headers.extend(columns.iter().map(|m| m.name().to_string()));
    let mut rows: Vec<Vec<String>> = Vec::new();
    for ds in datasets {
        let best = best_method(ds, columns, values);
        let mut row = vec![ds.clone()];
        for &m in columns {
            row.push(match values.get(&(ds.clone(), m)) {
                // The '*' marks the per-dataset best method.
                Some(v) if best == Some(m) => format!("{v:.6}*"),
                Some(v) => format!("{v:.6}"),
                None => "-".to_string(),
            });
        }
        rows.push(row);
    }
    let mut widths: Vec<usize> = headers.iter().map(String::len).collect();
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let emit = |out: &mut String, cells: &[String]| {
        for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
            if i > 0 {
                out.push_str("  ");
            }
            out.push_str(&format!("{cell:<w$}"));
        }
        while out.ends_with(' ') {
            out.pop();
        }
        out.push('\n');
    };
    emit(&mut out, &headers);
    for row in &rows {
        emit(&mut out, row);
    }
    out
}

/// Overlay the mean curves that `dac` wrote next to each results file.
/// Line color identifies the method; the dash pattern identifies the run.
fn overlay_svg(inputs: &[(PathBuf, Vec<ResultRow>)]) -> Result<String> {
    let mut series = Vec::new();
    let mut seen_datasets: Vec<String> = Vec::new();
    let single = {
        let all: std::collections::BTreeSet<&str> =
            inputs.iter().map(|(_, rows)| rows[0].dataset.as_str()).collect();
        all.len() == 1
    };
    for (path, rows) in inputs {
        let dataset = rows[0].dataset.clone();
        if seen_datasets.contains(&dataset) {
            continue; // identical duplicate input; merge already vetted it
        }
        let curves_path = path.parent().unwrap_or_else(|| Path::new(".")).join("curves.csv");
        let text = fs::read_to_string(&curves_path).with_context(|| {
            format!(
                "reading {} (the dac command writes curves.csv next to results.csv)",
                curves_path.display()
            )
        })?;
        let dash = plot::DASHES[seen_datasets.len() % plot::DASHES.len()];
        for (method, points) in parse_curves_csv(&text, &curves_path)? {
            let label = if single {
                method.name().to_string()
            } else {
                format!("{dataset} {}", method.name())
            };
            series.push(Series {
                label,
                color: plot::method_color(method.name()),
                dash,
                points,
            });
        }
        seen_datasets.push(dataset);
    }
    Ok(plot::curve_svg("mean prediction change vs mask size", &series))
}

type Curves = Vec<(MethodId, Vec<(f64, f64)>)>;

fn parse_curves_csv(text: &str, origin: &Path) -> Result<Curves> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != "method,fraction,mean_delta_f" {
        bail!("{}: expected a curves.csv header, got '{header}'", origin.display());
    }
    let mut curves: Curves = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            bail!("{} line {}: expected 3 fields", origin.display(), ln + 2);
        }
        let method: MethodId = fields[0].parse().map_err(|e: String| anyhow::anyhow!(e))?;
        let x: f64 = fields[1].parse().with_context(|| format!("{} line {}", origin.display(), ln + 2))?;
        let y: f64 = fields[2].parse().with_context(|| format!("{} line {}", origin.display(), ln + 2))?;
        match curves.last_mut() {
            Some((m, points)) if *m == method => points.push((x, y)),
            _ => curves.push((method, vec![(x, y)])),
        }
    }
    Ok(curves)
}
