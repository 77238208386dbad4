//! Per-seed experiment runners and the artifact layout.
//!
//! Every run writes, under the output directory:
//!   config.resolved.json          the exact plan that ran
//!   seed-<s>/...                  per-seed artifacts (CSVs, summary.json)
//!   aggregate.json                mean and std of headline metrics
//!   FAILED.json                   only when a seed failed mid-run
//!
//! All artifacts are deterministic in (config, seeds): rerunning the same
//! plan rewrites byte-identical files.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use bcl_core::data::{gen_toy_tasks, images_or_surrogate, split_by_classes, DataSource,
    TaskStream, SPLIT_PAIRS};
use bcl_core::density::IsotropicGaussian;
use bcl_core::filter::{run_changepoint, write_trajectory_csv};
use bcl_core::hmc::{effective_sample_size, pool_samples, run_chains};
use bcl_core::nn::MlpSpec;
use bcl_core::{protocl, seqbayes, vcl};

use crate::config::{CliError, CliResult, DataKind, ExperimentKind, Resolved};

/// Everything a finished seed hands to the aggregator.
struct SeedReport {
    summary: Value,
    /// Named headline numbers, aggregated across seeds.
    metrics: Vec<(&'static str, f64)>,
}

/// Run the resolved plan end to end; returns the process-level outcome.
pub fn run(resolved: &Resolved) -> CliResult<()> {
    std::fs::create_dir_all(&resolved.out)
        .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", resolved.out.display())))?;
    write_text(
        &resolved.out.join("config.resolved.json"),
        &(resolved.to_json_pretty() + "\n"),
    )?;

    let worker = |&seed: &u64| -> (u64, CliResult<SeedReport>) {
        (seed, run_seed(resolved, seed))
    };
    let results: Vec<(u64, CliResult<SeedReport>)> = match resolved.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::runtime(format!("cannot build thread pool: {e}")))?;
            pool.install(|| {
                use rayon::prelude::*;
                resolved.seeds.par_iter().map(worker).collect()
            })
        }
        None => {
            use rayon::prelude::*;
            resolved.seeds.par_iter().map(worker).collect()
        }
    };

    let mut failures = Vec::new();
    let mut reports = Vec::new();
    for (seed, res) in results {
        match res {
            Ok(r) => reports.push((seed, r)),
            Err(CliError::Validation(m) | CliError::Runtime(m)) => failures.push((seed, m)),
        }
    }
    if !failures.is_empty() {
        let marker = json!({
            "experiment": resolved.experiment.to_string(),
            "failed_seeds": failures
                .iter()
                .map(|(s, e)| json!({"seed": s, "error": e}))
                .collect::<Vec<_>>(),
            "completed_seeds": reports.iter().map(|(s, _)| *s).collect::<Vec<_>>(),
        });
        write_text(
            &resolved.out.join("FAILED.json"),
            &(serde_json::to_string_pretty(&marker).expect("json") + "\n"),
        )?;
        let (seed, err) = &failures[0];
        return Err(CliError::runtime(format!("seed {seed}: {err}")));
    }

    // Aggregate headline metrics across seeds, in seed order.
    let mut metrics: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
    for (_, r) in &reports {
        for &(name, v) in &r.metrics {
            metrics.entry(name).or_default().push(v);
        }
    }
    let aggregate = Aggregate {
        experiment: resolved.experiment.to_string(),
        n_seeds: resolved.seeds.len(),
        seeds: resolved.seeds.clone(),
        metrics: metrics
            .into_iter()
            .map(|(name, values)| (name.to_string(), MeanStd::from_values(values)))
            .collect(),
    };
    write_text(
        &resolved.out.join("aggregate.json"),
        &(serde_json::to_string_pretty(&aggregate).expect("json") + "\n"),
    )?;
    Ok(())
}

#[derive(Serialize)]
struct Aggregate {
    experiment: String,
    n_seeds: usize,
    seeds: Vec<u64>,
    metrics: BTreeMap<String, MeanStd>,
}

#[derive(Serialize)]
struct MeanStd {
    mean: f64,
    /// Sample standard deviation (n-1); zero for a single seed.
    std: f64,
    values: Vec<f64>,
}

impl MeanStd {
    fn from_values(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std, values }
    }
}

fn run_seed(resolved: &Resolved, seed: u64) -> CliResult<SeedReport> {
    let seed_dir = resolved.out.join(format!("seed-{seed}"));
    std::fs::create_dir_all(&seed_dir)
        .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", seed_dir.display())))?;
    let report = match resolved.experiment {
        ExperimentKind::Filter => run_filter(resolved, seed, &seed_dir)?,
        ExperimentKind::HmcCl => run_hmc_cl(resolved, seed, &seed_dir)?,
        ExperimentKind::Vcl => run_vcl(resolved, seed, &seed_dir)?,
        ExperimentKind::Protocl => run_protocl(resolved, seed, &seed_dir)?,
        ExperimentKind::Diagnostics => run_diagnostics(resolved, seed, &seed_dir)?,
    };
    write_text(
        &seed_dir.join("summary.json"),
        &(serde_json::to_string_pretty(&report.summary).expect("json") + "\n"),
    )?;
    Ok(report)
}

fn run_filter(resolved: &Resolved, seed: u64, dir: &Path) -> CliResult<SeedReport> {
    let mut scenario = resolved.filter.stream.clone();
    scenario.seed = seed;
    let run = run_changepoint(&scenario).map_err(core_runtime)?;
    write_trajectory_csv(&dir.join("trajectory.csv"), &run.trajectory).map_err(core_runtime)?;
    let final_mean = run.final_belief.mean;
    let final_var = run.final_belief.var;
    let summary = json!({
        "seed": seed,
        "scenario": serde_json::to_value(&resolved.filter.scenario).expect("json"),
        "n_observations": run.trajectory.len(),
        "final_mean": final_mean,
        "final_var": final_var,
        "final_std": final_var.sqrt(),
    });
    Ok(SeedReport {
        summary,
        metrics: vec![("final_mean", final_mean), ("final_var", final_var)],
    })
}

/// Materialize the dataset plan into a task stream (plus a provenance
/// note for the summary).
fn build_stream(resolved: &Resolved) -> CliResult<(TaskStream, String)> {
    match resolved.dataset.kind {
        DataKind::Toy => {
            let stream = gen_toy_tasks(&resolved.dataset.toy).map_err(core_runtime)?;
            Ok((stream, format!("toy ({:?})", resolved.dataset.toy.kind)))
        }
        DataKind::Split => {
            let (train, test, source) = images_or_surrogate(
                resolved.dataset.path.as_deref(),
                &resolved.dataset.surrogate,
            )
            .map_err(core_runtime)?;
            let stream =
                split_by_classes(&train, &test, &SPLIT_PAIRS, resolved.dataset.protocol)
                    .map_err(core_runtime)?;
            let desc = match source {
                DataSource::Idx(p) => format!("idx files at {}", p.display()),
                DataSource::Synthetic => "synthetic stand-in (no image files found)".to_string(),
            };
            Ok((stream, desc))
        }
    }
}

fn model_spec(resolved: &Resolved) -> CliResult<&MlpSpec> {
    resolved
        .model
        .as_ref()
        .ok_or_else(|| CliError::runtime("experiment needs a model but none was resolved"))
}

fn run_hmc_cl(resolved: &Resolved, seed: u64, dir: &Path) -> CliResult<SeedReport> {
    let (stream, source) = build_stream(resolved)?;
    let spec = model_spec(resolved)?;
    let mut cfg = resolved.hmc_cl.clone();
    cfg.seed = seed;
    let out = seqbayes::propagate(spec, &stream, &cfg, Some(dir)).map_err(core_runtime)?;
    out.accuracy.write_csv(&dir.join("accuracy.csv")).map_err(core_runtime)?;
    out.mixture_accuracy
        .write_csv(&dir.join("mixture_accuracy.csv"))
        .map_err(core_runtime)?;
    let final_avg = out.accuracy.final_average().unwrap_or(f64::NAN);
    let final_avg_mixture = out.mixture_accuracy.final_average().unwrap_or(f64::NAN);
    let max_gap = out.max_fidelity_gap();
    let current_gap = out.current_task_gap();
    let max_current_gap = current_gap.iter().copied().fold(0.0f64, f64::max);
    let summary = json!({
        "seed": seed,
        "data": source,
        "n_tasks": stream.len(),
        "final_avg_accuracy": final_avg,
        "final_avg_mixture_accuracy": final_avg_mixture,
        "fidelity_gap_per_task": out.fidelity_gap,
        "max_fidelity_gap": max_gap,
        "current_task_fidelity_gap": current_gap,
        "max_current_task_fidelity_gap": max_current_gap,
        "fidelity_tol": cfg.fidelity_tol,
        "diagnostics": serde_json::to_value(&out.diagnostics).expect("json"),
    });
    Ok(SeedReport {
        summary,
        metrics: vec![
            ("final_avg_accuracy", final_avg),
            ("final_avg_mixture_accuracy", final_avg_mixture),
            ("max_fidelity_gap", max_gap),
            ("max_current_task_fidelity_gap", max_current_gap),
        ],
    })
}

fn run_vcl(resolved: &Resolved, seed: u64, dir: &Path) -> CliResult<SeedReport> {
    let (stream, source) = build_stream(resolved)?;
    let spec = model_spec(resolved)?;
    let mut cfg = resolved.vcl.config.clone();
    cfg.seed = seed;
    let out = vcl::train_stream(spec, &stream, resolved.vcl.head_mode, &cfg)
        .map_err(core_runtime)?;
    out.accuracy.write_csv(&dir.join("accuracy.csv")).map_err(core_runtime)?;
    let final_avg = out.accuracy.final_average().unwrap_or(f64::NAN);
    let summary = json!({
        "seed": seed,
        "data": source,
        "n_tasks": stream.len(),
        "head_mode": serde_json::to_value(resolved.vcl.head_mode).expect("json"),
        "coreset_size": cfg.coreset_size,
        "final_avg_accuracy": final_avg,
        "final_elbo_per_task": out.final_elbo,
    });
    Ok(SeedReport { summary, metrics: vec![("final_avg_accuracy", final_avg)] })
}

fn run_protocl(resolved: &Resolved, seed: u64, dir: &Path) -> CliResult<SeedReport> {
    let (stream, source) = build_stream(resolved)?;
    let spec = model_spec(resolved)?;
    let mut cfg = resolved.protocl.clone();
    cfg.seed = seed;
    let out = protocl::run_stream(spec, &stream, &cfg).map_err(core_runtime)?;
    out.accuracy.write_csv(&dir.join("accuracy.csv")).map_err(core_runtime)?;
    write_text(&dir.join("state.json"), &(out.state.to_json().map_err(core_runtime)? + "\n"))?;
    out.coreset
        .write_indices_csv(&dir.join("coreset_indices.csv"))
        .map_err(core_runtime)?;
    let final_avg = out.accuracy.final_average().unwrap_or(f64::NAN);
    let summary = json!({
        "seed": seed,
        "data": source,
        "n_tasks": stream.len(),
        "coreset_points": out.coreset.total_len(),
        "final_avg_accuracy": final_avg,
        "objective_trace_last_epoch": out
            .reports
            .iter()
            .map(|r| r.objective_trace.last().copied().unwrap_or(f64::NAN))
            .collect::<Vec<_>>(),
    });
    Ok(SeedReport { summary, metrics: vec![("final_avg_accuracy", final_avg)] })
}

/// Chains against an isotropic Gaussian with known moments: acceptance,
/// divergences, mixing, and moment recovery in one report.
fn run_diagnostics(resolved: &Resolved, seed: u64, dir: &Path) -> CliResult<SeedReport> {
    let d = &resolved.diagnostics;
    let target = IsotropicGaussian::new(d.dim, d.precision).map_err(core_runtime)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6469_6167);
    let scale = d.precision.sqrt().recip();
    let inits: Vec<Vec<f64>> = (0..d.hmc.n_chains)
        .map(|_| {
            (0..d.dim)
                .map(|_| scale * rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect()
        })
        .collect();
    let chains = run_chains(&target, &inits, &d.hmc, seed).map_err(core_runtime)?;
    let pooled = pool_samples(&chains).map_err(core_runtime)?;
    let ess = effective_sample_size(pooled.view()).map_err(core_runtime)?;
    let min_ess = ess.iter().map(|e| e.ess).fold(f64::INFINITY, f64::min);
    let mean_ess = ess.iter().map(|e| e.ess).sum::<f64>() / ess.len().max(1) as f64;
    let accept = chains.iter().map(|c| c.accept_rate).sum::<f64>() / chains.len() as f64;
    let divergences: usize = chains.iter().map(|c| c.n_divergences).sum();

    // Moment recovery against the known target: mean 0, variance
    // 1/precision in every dimension.
    let n = pooled.nrows() as f64;
    let exact_var = 1.0 / d.precision;
    let mut worst_mean = 0.0f64;
    let mut worst_var_rel = 0.0f64;
    for col in pooled.columns() {
        let m = col.sum() / n;
        let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
        worst_mean = worst_mean.max(m.abs());
        worst_var_rel = worst_var_rel.max((v - exact_var).abs() / exact_var);
    }

    let summary = json!({
        "seed": seed,
        "target": {"dim": d.dim, "precision": d.precision},
        "n_chains": chains.len(),
        "draws_per_chain": d.hmc.n_samples,
        "accept_rate": accept,
        "accept_rate_per_chain": chains.iter().map(|c| c.accept_rate).collect::<Vec<_>>(),
        "total_divergences": divergences,
        "min_ess": min_ess,
        "mean_ess": mean_ess,
        "worst_abs_mean": worst_mean,
        "worst_var_rel_error": worst_var_rel,
    });
    write_text(
        &dir.join("diagnostics.json"),
        &(serde_json::to_string_pretty(&summary).expect("json") + "\n"),
    )?;
    Ok(SeedReport {
        summary,
        metrics: vec![
            ("accept_rate", accept),
            ("min_ess", min_ess),
            ("worst_abs_mean", worst_mean),
        ],
    })
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text)
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

fn core_runtime(e: bcl_core::Error) -> CliError {
    CliError::runtime(e.to_string())
}
