//! One function per subcommand. Each reads its inputs, writes its artifacts
//! into `out_dir` and returns the lines to print. Outputs depend only on the
//! configuration, the input files and the seed.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use snaremap_core::griddata::{assemble_dataset, build_labels, reconstruct_effort, ParkGrid, PatrolDataset};
use snaremap_core::io::{
    read_cells_csv, read_dataset_csv, read_fieldtest_csv, read_observations_csv, read_riskmap_csv,
    read_waypoints_csv, read_windows_csv, write_cells_csv, write_dataset_csv, write_observations_csv,
    write_waypoints_csv, write_windows_csv,
};
use snaremap_core::iware::{patrolled_rows, train_iware, IWareEnsemble};
use snaremap_core::metrics::{chi_squared_field_test, obs_per_cell, report, MetricReport, ScoredSet};
use snaremap_core::riskmap::{
    default_c_max, nominal_effort, select_field_test_blocks, sweep_riskmap, uniform_breakpoints, PwlRiskModel,
};
use snaremap_core::synthpark::{self, SynthPreset, PRESET_NAMES};
use snaremap_planner::{build_graph, improvement_ratio, solve, PlanProblem};

use crate::config::PipelineConfig;
use crate::error::{at, CliError, Result};

fn ensure_out_dir(cfg: &PipelineConfig) -> Result<()> {
    if cfg.out_dir.is_dir() {
        Ok(())
    } else {
        Err(CliError::Config(format!("output directory {} does not exist", cfg.out_dir.display())))
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Input(format!("{what} {} not found", path.display())))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| CliError::Failed(format!("cannot write {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::Failed(format!("cannot write {}: {e}", path.display())))
}

fn load_grid(cfg: &PipelineConfig) -> Result<Arc<ParkGrid>> {
    let path = cfg.path_or(&cfg.data.cells, "cells.csv");
    require(&path, "cell table")?;
    Ok(Arc::new(read_cells_csv(&path, cfg.data.cell_size_km).map_err(|e| at(&path)(e.into()))?))
}

fn load_dataset(cfg: &PipelineConfig) -> Result<PatrolDataset> {
    let grid = load_grid(cfg)?;
    let path = cfg.path_or(&cfg.data.dataset, "dataset.csv");
    require(&path, "dataset")?;
    read_dataset_csv(&path, grid).map_err(|e| at(&path)(e.into()))
}

fn load_model(cfg: &PipelineConfig) -> Result<IWareEnsemble> {
    let path = cfg.output("model.json");
    require(&path, "model file")?;
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    IWareEnsemble::from_json(&text).map_err(|e| at(&path)(e.into()))
}

/// Positives over patrolled rows, as a fraction.
fn patrolled_positive_rate(ds: &PatrolDataset) -> Option<f64> {
    let rows = patrolled_rows(ds);
    let n = rows.labels.len();
    (n > 0).then(|| rows.labels.iter().filter(|&&l| l).count() as f64 / n as f64)
}

pub fn simulate(cfg: &PipelineConfig) -> Result<Vec<String>> {
    let preset = SynthPreset::named(&cfg.data.preset).ok_or_else(|| {
        CliError::Config(format!("unknown preset {:?} (one of {})", cfg.data.preset, PRESET_NAMES.join(", ")))
    })?;
    ensure_out_dir(cfg)?;
    let out = synthpark::simulate(&preset, cfg.seed)?;
    write_cells_csv(cfg.output("cells.csv"), &out.grid)?;
    write_windows_csv(cfg.output("windows.csv"), &out.windows)?;
    write_waypoints_csv(cfg.output("waypoints.csv"), &out.tracks)?;
    write_observations_csv(cfg.output("observations.csv"), &out.observations)?;
    write_dataset_csv(cfg.output("dataset.csv"), &out.dataset)?;
    let truth = json!({
        "preset": preset.name,
        "seed": cfg.seed,
        "attack_prob": out.truth.attack_prob,
        "detection_rate": out.truth.detection_rate,
    });
    write_json(&cfg.output("truth.json"), &truth)?;
    let rate = patrolled_positive_rate(&out.dataset).unwrap_or(0.0);
    Ok(vec![format!(
        "simulated {} ({}x{} cells, {} windows, {} patrols); {:.2}% of patrolled rows positive",
        preset.name,
        preset.width,
        preset.height,
        out.windows.len(),
        out.tracks.len(),
        100.0 * rate
    )])
}

pub fn ingest(cfg: &PipelineConfig) -> Result<Vec<String>> {
    ensure_out_dir(cfg)?;
    let grid = load_grid(cfg)?;
    let paths = [
        (cfg.path_or(&cfg.data.windows, "windows.csv"), "window table"),
        (cfg.path_or(&cfg.data.waypoints, "waypoints.csv"), "waypoint table"),
        (cfg.path_or(&cfg.data.observations, "observations.csv"), "observation table"),
    ];
    for (p, what) in &paths {
        require(p, what)?;
    }
    let [(wp, _), (tp, _), (op, _)] = &paths;
    let windows = read_windows_csv(wp).map_err(|e| at(wp)(e.into()))?;
    let (tracks, duplicate_waypoints) = read_waypoints_csv(tp).map_err(|e| at(tp)(e.into()))?;
    let log = read_observations_csv(op).map_err(|e| at(op)(e.into()))?;
    let effort = reconstruct_effort(&grid, &tracks, &windows)?;
    let labels = build_labels(&grid, &log, &windows)?;
    let ds = assemble_dataset(Arc::clone(&grid), effort.effort, labels.labels)?;
    let out = cfg.output("dataset.csv");
    write_dataset_csv(&out, &ds)?;
    let patrolled = patrolled_rows(&ds).labels.len();
    let summary = json!({
        "windows": windows.len(),
        "tracks": tracks.len(),
        "duplicate_waypoints": duplicate_waypoints,
        "skipped_waypoints": effort.skipped_waypoints,
        "unassigned_km": effort.unassigned_km,
        "skipped_records": labels.skipped_records,
        "coerced_labels": ds.coerced_labels(),
        "rows": ds.num_rows(),
        "patrolled_rows": patrolled,
        "positives": ds.positive_count(),
    });
    write_json(&cfg.output("ingest.json"), &summary)?;
    Ok(vec![format!(
        "ingested {} tracks over {} windows: {} patrolled rows, {} positive; wrote {}",
        tracks.len(),
        windows.len(),
        patrolled,
        ds.positive_count(),
        out.display()
    )])
}

/// Scores the patrolled rows of the given windows at their realised effort.
pub fn score_windows(ens: &IWareEnsemble, ds: &PatrolDataset, windows: &[usize], threshold: f64) -> Result<MetricReport> {
    let rows = patrolled_rows(ds);
    let keep: Vec<usize> = (0..rows.labels.len()).filter(|&i| windows.contains(&rows.timesteps[i])).collect();
    if keep.is_empty() {
        return Err(CliError::Input(format!("no patrolled rows in windows {windows:?}")));
    }
    let xs: Vec<Vec<f64>> = keep.iter().map(|&i| rows.features[i].clone()).collect();
    let efforts: Vec<f64> = keep.iter().map(|&i| rows.efforts[i]).collect();
    let labels: Vec<bool> = keep.iter().map(|&i| rows.labels[i]).collect();
    let scores: Vec<f64> = ens.predict_batch(&xs, &efforts)?.into_iter().map(|(p, _)| p).collect();
    Ok(report(&ScoredSet::new(scores, labels)?, threshold))
}

fn held_out(cfg: &PipelineConfig, ds: &PatrolDataset) -> Result<std::ops::Range<usize>> {
    let t = ds.num_timesteps();
    if t < 2 {
        return Err(CliError::Input(format!("training needs at least two windows; the dataset has {t}")));
    }
    let h = cfg.ensemble.holdout;
    if h >= t {
        return Err(CliError::Config(format!("ensemble.holdout = {h} leaves no training window out of {t}")));
    }
    Ok(t - h..t)
}

pub fn train(cfg: &PipelineConfig) -> Result<Vec<String>> {
    ensure_out_dir(cfg)?;
    let ds = load_dataset(cfg)?;
    let test = held_out(cfg, &ds)?;
    let train_ds = ds.select_windows(0..test.start)?;
    let icfg = cfg.ensemble.iware();
    let ens = train_iware(&train_ds, &icfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    write_text(&cfg.output("model.json"), &(ens.to_json()? + "\n"))?;
    let windows: Vec<usize> = test.clone().collect();
    let metrics = score_windows(&ens, &ds, &windows, cfg.metrics.threshold)?;
    let doc = json!({
        "learner": icfg.learner.name(),
        "thresholds": ens.thresholds().as_slice(),
        "weights": ens.weights(),
        "train_windows": [0, test.start],
        "test_windows": [test.start, test.end],
        "threshold": cfg.metrics.threshold,
        "test": metrics,
    });
    write_json(&cfg.output("metrics.json"), &doc)?;
    Ok(vec![format!(
        "trained {} learners ({}) on windows 0..{}; held-out AUC {}",
        ens.learners().len(),
        icfg.learner.name(),
        test.start,
        fmt_opt(metrics.auc)
    )])
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

pub fn evaluate(cfg: &PipelineConfig) -> Result<Vec<String>> {
    ensure_out_dir(cfg)?;
    let ds = load_dataset(cfg)?;
    let ens = load_model(cfg)?;
    let windows: Vec<usize> = match &cfg.metrics.windows {
        Some(w) => w.clone(),
        None => held_out(cfg, &ds)?.collect(),
    };
    if windows.is_empty() {
        return Err(CliError::Config("metrics.windows is empty".into()));
    }
    if let Some(&t) = windows.iter().find(|&&t| t >= ds.num_timesteps()) {
        return Err(CliError::Config(format!("window {t} outside 0..{}", ds.num_timesteps())));
    }
    let thr = cfg.metrics.threshold;
    let mut per_window = Vec::new();
    let mut lines = Vec::new();
    for &t in &windows {
        // A window without patrolled rows has nothing to score.
        match score_windows(&ens, &ds, &[t], thr) {
            Ok(r) => {
                lines.push(format!("window {t}: AUC {}, L&L {}", fmt_opt(r.auc), fmt_opt(r.ll)));
                per_window.push(json!({ "window": t, "metrics": r }));
            }
            Err(CliError::Input(_)) => per_window.push(json!({ "window": t, "metrics": null })),
            Err(e) => return Err(e),
        }
    }
    let pooled = score_windows(&ens, &ds, &windows, thr)?;
    lines.push(format!("pooled: AUC {}, PR area {}", fmt_opt(pooled.auc), fmt_opt(pooled.prc_area)));
    write_json(
        &cfg.output("evaluation.json"),
        &json!({ "threshold": thr, "windows": per_window, "pooled": pooled }),
    )?;
    Ok(lines)
}

pub fn riskmap(cfg: &PipelineConfig) -> Result<Vec<String>> {
    ensure_out_dir(cfg)?;
    let ds = load_dataset(cfg)?;
    let ens = load_model(cfg)?;
    let c_max = cfg.riskmap.c_max.unwrap_or_else(|| default_c_max(&ds));
    let levels = uniform_breakpoints(cfg.riskmap.segments, c_max)?;
    let rm = sweep_riskmap(&ens, &ds, &levels)?;
    rm.write_csv(cfg.output("riskmap.csv"))?;
    let nominal = nominal_effort(&ds);
    let layer = sweep_riskmap(&ens, &ds, &[nominal])?.prob_layer(0);
    let blocks = select_field_test_blocks(ds.grid(), &layer, &ds.total_effort_per_cell(), &cfg.riskmap.blocks)?;
    for w in &blocks.warnings {
        log::warn!("{w}");
    }
    blocks.write_json(cfg.output("blocks.json"))?;
    Ok(vec![format!(
        "risk map over {} cells at {} effort levels up to {:.3} km; {} / {} / {} field-test blocks (high / medium / low)",
        ds.grid().num_masked(),
        levels.len(),
        c_max,
        blocks.high.len(),
        blocks.medium.len(),
        blocks.low.len()
    )])
}

fn plan_problem(cfg: &PipelineConfig) -> Result<PlanProblem> {
    let grid = load_grid(cfg)?;
    let path: PathBuf = cfg.output("riskmap.csv");
    require(&path, "risk map")?;
    let rm = read_riskmap_csv(&path).map_err(|e| at(&path)(e.into()))?;
    if rm.num_cells() != grid.num_cells() {
        return Err(CliError::Input(format!(
            "risk map covers {} cells but the park has {}",
            rm.num_cells(),
            grid.num_cells()
        )));
    }
    let pwl = Arc::new(PwlRiskModel::from_riskmap(&rm)?);
    let post = match cfg.planner.post {
        Some(p) => p,
        None => *grid
            .patrol_posts()
            .first()
            .ok_or_else(|| CliError::Input("the park has no patrol post".into()))?,
    };
    let graph = build_graph(&grid, post, cfg.planner.horizon)?;
    let mut p = PlanProblem::new(graph, pwl, cfg.planner.k, cfg.planner.beta)?;
    p.tolerances.mip_gap = cfg.planner.mip_gap;
    p.tolerances.node_limit = cfg.planner.node_limit;
    Ok(p)
}

pub fn plan(cfg: &PipelineConfig, beta_sweep: bool) -> Result<Vec<String>> {
    ensure_out_dir(cfg)?;
    let p = plan_problem(cfg)?;
    let plan = solve(&p, cfg.planner.solver)?;
    plan.write_json(&p.graph, cfg.output("plan.json"))?;
    let mut lines = vec![format!(
        "plan from post {} (T={}, K={}, beta={}): objective {:.6} (bound {:.6}), nominal {:.6}, {} routes via {}",
        plan.post,
        plan.horizon,
        plan.k,
        plan.beta,
        plan.objective,
        plan.bound,
        plan.objective_nominal,
        plan.routes.len(),
        plan.solver
    )];
    if beta_sweep {
        let rows = improvement_ratio(&p, &cfg.planner.betas, cfg.planner.solver)?;
        let mut csv = String::from("beta,ratio,utility,baseline_utility\n");
        lines.push("beta    ratio".into());
        for r in &rows {
            let ratio = r.ratio.map_or(String::new(), |x| x.to_string());
            csv += &format!("{},{},{},{}\n", r.beta, ratio, r.utility, r.baseline_utility);
            lines.push(format!("{:<7} {}", r.beta, r.ratio.map_or("n/a".into(), |x| format!("{x:.6}"))));
        }
        write_text(&cfg.output("beta_sweep.csv"), &csv)?;
    }
    Ok(lines)
}

pub fn fieldtest(cfg: &PipelineConfig) -> Result<Vec<String>> {
    ensure_out_dir(cfg)?;
    let path = cfg.path_or(&cfg.metrics.fieldtest, "fieldtest.csv");
    require(&path, "field-test table")?;
    let table = read_fieldtest_csv(&path).map_err(|e| at(&path)(e.into()))?.combine_by_group();
    let chi = chi_squared_field_test(&table)?;
    let groups: Vec<_> = table
        .rows
        .iter()
        .zip(obs_per_cell(&table))
        .map(|(r, (_, ratio))| {
            json!({
                "group": r.group,
                "obs_cells": r.obs_cells,
                "patrolled_cells": r.patrolled_cells,
                "effort_km": r.effort_km,
                "obs_per_cell": ratio,
            })
        })
        .collect();
    write_json(&cfg.output("fieldtest.json"), &json!({ "groups": groups, "chi_squared": chi }))?;
    let mut lines: Vec<String> = table
        .rows
        .iter()
        .zip(obs_per_cell(&table))
        .map(|(r, (_, ratio))| format!("{:<8} {:>4} / {:<4} = {ratio:.3}", r.group, r.obs_cells, r.patrolled_cells))
        .collect();
    lines.push(format!("chi-squared {:.4} (df {}), p = {:.3e}", chi.statistic, chi.df, chi.p_value));
    Ok(lines)
}
