//! The `dac` subcommand: fan (pair × method) attribution + mask-sweep work
//! across the worker pool, then emit the per-pair table, the per-method
//! aggregate, mean curves (CSV + SVG), and optional qualitative PNG panels.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use dac_core::attrib::{attribute, AttributionConfig, AttributionMap, MethodId};
use dac_core::data::{load_pair_manifest, PairRecord};
use dac_core::eval::{
    self, compose_hybrid, evaluate_pair, morph_close, soft_mask, threshold_mask, DacResult,
};
use dac_core::grad::Tensor;
use dac_core::model::{checkpoint, Checkpoint};
use dac_core::seed;

use crate::plot::{self, Series};
use crate::report::RESULTS_HEADER;
use crate::{save_manifest, DacArgs};

/// Fractions 0, 0.01, …, 1 onto which per-pair curves are interpolated
/// before averaging.
const CURVE_GRID: usize = 101;

pub fn cmd_dac(a: &DacArgs) -> Result<()> {
    let methods = parse_methods(&a.methods)?;
    if a.thresholds < 2 {
        bail!("--thresholds must be at least 2");
    }
    if a.ig_steps == 0 {
        bail!("--ig-steps must be at least 1");
    }
    let ckpt = checkpoint::load(&a.checkpoint)
        .with_context(|| format!("loading {}", a.checkpoint.display()))?;

    let base = a.pairs.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    let label = match &a.dataset_label {
        Some(l) => l.clone(),
        None => base
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into()),
    };
    if label.is_empty() || label.contains(',') || label.contains('\n') {
        bail!("dataset label '{label}' cannot be empty or contain commas/newlines");
    }

    // The pair manifest lists accepted pairs only, so restore the flag the
    // on-disk format drops.
    let mut records = load_pair_manifest(&a.pairs)
        .with_context(|| format!("loading {}", a.pairs.display()))?;
    if records.is_empty() {
        bail!("{} lists no pairs", a.pairs.display());
    }
    for r in &mut records {
        r.accepted = true;
    }

    let images = load_pair_images(&ckpt, &base, &records)?;

    let n_methods = methods.len();
    let panel_pairs = a.panels.min(records.len());
    let tasks: Vec<(usize, usize)> = (0..records.len())
        .flat_map(|p| (0..n_methods).map(move |m| (p, m)))
        .collect();
    let outcomes: Vec<(DacResult, Option<AttributionMap>)> = tasks
        .par_iter()
        .map(|&(p, mi)| -> Result<(DacResult, Option<AttributionMap>)> {
            let rec = &records[p];
            let (x_o, x_c) = &images[p];
            let cfg = AttributionConfig {
                ig_steps: a.ig_steps,
                random_seed: seed::derive(a.seed, p as u64),
            };
            let map = attribute(&ckpt, methods[mi], x_o, x_c, rec.class_i, rec.class_j, &cfg)
                .with_context(|| format!("pair {} method {}", rec.pair_id, methods[mi]))?;
            let result = evaluate_pair(&ckpt, rec, x_o, x_c, &map, a.thresholds)
                .with_context(|| format!("pair {} method {}", rec.pair_id, methods[mi]))?;
            let keep_map = if p < panel_pairs { Some(map) } else { None };
            Ok((result, keep_map))
        })
        .collect::<Result<Vec<_>>>()?;
    let (results, maps): (Vec<DacResult>, Vec<Option<AttributionMap>>) =
        outcomes.into_iter().unzip();

    fs::create_dir_all(&a.out_dir)?;
    let model_kind = ckpt.spec.kind.to_string();
    fs::write(a.out_dir.join("results.csv"), results_csv(&label, &model_kind, &results))?;

    let agg = eval::aggregate(&results)?;
    fs::write(a.out_dir.join("aggregate.csv"), aggregate_csv(&label, &methods, &agg))?;

    let curves = mean_curves(&methods, &results, n_methods);
    fs::write(a.out_dir.join("curves.csv"), curves_csv(&curves))?;
    let series: Vec<Series> = curves
        .iter()
        .map(|(m, ys)| Series {
            label: m.name().to_string(),
            color: plot::method_color(m.name()),
            dash: "",
            points: grid().zip(ys.iter().copied()).collect(),
        })
        .collect();
    let title = format!("{label}: mean prediction change vs mask size");
    fs::write(a.out_dir.join("curves.svg"), plot::curve_svg(&title, &series))?;

    if panel_pairs > 0 {
        write_panels(&a.out_dir, &records, &images, &methods, &results, &maps, panel_pairs)?;
    }

    let config = DacConfig {
        pairs: &a.pairs,
        checkpoint: &a.checkpoint,
        dataset_label: &label,
        methods: methods.iter().map(|m| m.name()).collect(),
        thresholds: a.thresholds,
        ig_steps: a.ig_steps,
        seed: a.seed,
        panels: a.panels,
        out_dir: &a.out_dir,
    };
    save_manifest(&a.out_dir.join("run_manifest.json"), "dac", &config)?;

    for m in &methods {
        println!(
            "{label}  {:<10}  mean_dac {:.6}  ({} pairs)",
            m.name(),
            agg[m],
            records.len()
        );
    }
    println!("results -> {}", a.out_dir.display());
    Ok(())
}

#[derive(Serialize)]
struct DacConfig<'a> {
    pairs: &'a Path,
    checkpoint: &'a Path,
    dataset_label: &'a str,
    methods: Vec<&'static str>,
    thresholds: usize,
    ig_steps: usize,
    seed: u64,
    panels: usize,
    out_dir: &'a Path,
}

fn parse_methods(spec: &str) -> Result<Vec<MethodId>> {
    let mut methods = Vec::new();
    for part in spec.split(',') {
        let name = part.trim();
        if name.is_empty() {
            bail!("empty entry in --methods '{spec}'");
        }
        let m: MethodId = name.parse().map_err(|e: String| anyhow::anyhow!(e))?;
        if methods.contains(&m) {
            bail!("duplicate method '{name}' in --methods");
        }
        methods.push(m);
    }
    Ok(methods)
}

fn load_pair_images(
    ckpt: &Checkpoint,
    base: &Path,
    records: &[PairRecord],
) -> Result<Vec<(Tensor, Tensor)>> {
    let s = ckpt.spec.input_size;
    let k = ckpt.spec.num_classes;
    let mut images = Vec::with_capacity(records.len());
    for r in records {
        if r.class_i >= k || r.class_j >= k {
            bail!("pair {}: classes ({}, {}) exceed the {k}-class model", r.pair_id, r.class_i, r.class_j);
        }
        let (x_o, x_c) = r.load_images(base).with_context(|| format!("pair {}", r.pair_id))?;
        for (side, img) in [("real", &x_o), ("counterfactual", &x_c)] {
            if img.shape() != [1, s, s] {
                bail!(
                    "pair {}: {side} image is {:?} but the checkpoint expects [1, {s}, {s}]",
                    r.pair_id,
                    img.shape()
                );
            }
        }
        images.push((x_o, x_c));
    }
    Ok(images)
}

fn results_csv(label: &str, model: &str, results: &[DacResult]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in results {
        out.push_str(&format!(
            "{label},{model},{},{},{},{},{},{},{}\n",
            r.method, r.class_i, r.class_j, r.pair_id, r.auc, r.min_fraction, r.min_score
        ));
    }
    out
}

/// One row per dataset, one column per method — the comparison-table shape.
fn aggregate_csv(
    label: &str,
    methods: &[MethodId],
    agg: &std::collections::BTreeMap<MethodId, f64>,
) -> String {
    let mut out = String::from("dataset");
    for m in methods {
        out.push(',');
        out.push_str(m.name());
    }
    out.push('\n');
    out.push_str(label);
    for m in methods {
        out.push_str(&format!(",{:.6}", agg[m]));
    }
    out.push('\n');
    out
}

fn grid() -> impl Iterator<Item = f64> {
    (0..CURVE_GRID).map(|i| i as f64 / (CURVE_GRID - 1) as f64)
}

/// Per-method mean Δf over the common fraction grid, in method order.
fn mean_curves(
    methods: &[MethodId],
    results: &[DacResult],
    n_methods: usize,
) -> Vec<(MethodId, Vec<f64>)> {
    methods
        .iter()
        .enumerate()
        .map(|(mi, &m)| {
            let mut sums = vec![0.0; CURVE_GRID];
            let mut count = 0usize;
            for r in results.iter().skip(mi).step_by(n_methods) {
                debug_assert_eq!(r.method, m);
                for (acc, x) in sums.iter_mut().zip(grid()) {
                    *acc += interp_delta_f(&r.points, x);
                }
                count += 1;
            }
            for v in &mut sums {
                *v /= count as f64;
            }
            (m, sums)
        })
        .collect()
}

/// Linear interpolation along a curve sorted by fraction and anchored at
/// fractions 0 and 1, so any x in [0,1] lands inside a segment.
fn interp_delta_f(points: &[dac_core::eval::CurvePoint], x: f64) -> f64 {
    if x <= points[0].fraction {
        return points[0].delta_f;
    }
    for w in points.windows(2) {
        if x <= w[1].fraction {
            let span = w[1].fraction - w[0].fraction;
            if span == 0.0 {
                return w[1].delta_f;
            }
            return w[0].delta_f + (w[1].delta_f - w[0].delta_f) * (x - w[0].fraction) / span;
        }
    }
    points[points.len() - 1].delta_f
}

fn curves_csv(curves: &[(MethodId, Vec<f64>)]) -> String {
    let mut out = String::from("method,fraction,mean_delta_f\n");
    for (m, ys) in curves {
        for (x, y) in grid().zip(ys) {
            out.push_str(&format!("{},{x},{y}\n", m.name()));
        }
    }
    out
}

/// Qualitative dumps for the first few pairs: the signed attribution map,
/// the minimal closed mask, both masked inputs, and the hybrid the sweep
/// scored at that mask.
fn write_panels(
    out_dir: &Path,
    records: &[PairRecord],
    images: &[(Tensor, Tensor)],
    methods: &[MethodId],
    results: &[DacResult],
    maps: &[Option<AttributionMap>],
    panel_pairs: usize,
) -> Result<()> {
    let n_methods = methods.len();
    for p in 0..panel_pairs {
        let dir = out_dir.join("panels").join(&records[p].pair_id);
        fs::create_dir_all(&dir)?;
        let (x_o, x_c) = &images[p];
        for (mi, m) in methods.iter().enumerate() {
            let idx = p * n_methods + mi;
            let r = &results[idx];
            let map = maps[idx].as_ref().expect("maps retained for panel pairs");
            let (h, w) = (map.data.shape()[0], map.data.shape()[1]);

            plot::write_heatmap_png(&dir.join(format!("{m}-map.png")), map.data.data(), h, w)?;

            let mask = morph_close(&threshold_mask(&map.magnitude(), r.min_threshold), eval::CLOSE_WINDOW);
            let mask_px: Vec<f64> = mask.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            dac_core::data::write_png_gray(
                &dir.join(format!("{m}-mask.png")),
                &Tensor::new(vec![h, w], mask_px),
            )?;

            let soft = soft_mask(&mask, eval::BLUR_SIGMA);
            let masked = |img: &Tensor| -> Tensor {
                let px = img.data().iter().zip(&soft.data).map(|(a, b)| a * b).collect();
                Tensor::new(vec![1, h, w], px)
            };
            dac_core::data::write_png_gray(&dir.join(format!("{m}-masked-real.png")), &masked(x_o))?;
            dac_core::data::write_png_gray(&dir.join(format!("{m}-masked-cf.png")), &masked(x_c))?;
            let hybrid = compose_hybrid(x_o, x_c, &soft)?;
            dac_core::data::write_png_gray(&dir.join(format!("{m}-hybrid.png")), &hybrid)?;
        }
    }
    Ok(())
}
