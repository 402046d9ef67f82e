//! Seed x variant sweeps with common random numbers per seed.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::guidance::Variant;
use crate::io::{fmt_f64, write_run_outputs, RunSummary};
use crate::learned::Denoiser;
use crate::optimizer::{run, RunContext};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub seed: u64,
    pub variant: Variant,
    pub summary: Option<RunSummary>,
    /// Set when the run could not start or aborted mid-way.
    pub error: Option<String>,
}

impl SweepRun {
    pub fn nearest_mode_distance(&self) -> Option<f64> {
        self.summary.as_ref()?.report.as_ref().map(|r| r.nearest_mode_distance)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantAggregate {
    pub variant: Variant,
    pub runs: usize,
    pub failures: usize,
    pub mean_nearest_mode_distance: f64,
    /// Mean over runs where coherence was defined.
    pub mean_update_coherence: f64,
    /// Fraction of completed seeds where this variant's terminal
    /// nearest-mode distance is strictly below every other variant's.
    pub win_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub runs: Vec<SweepRun>,
    pub aggregates: Vec<VariantAggregate>,
}

impl SweepResult {
    pub fn failures(&self) -> usize {
        self.runs.iter().filter(|r| r.error.is_some()).count()
    }

    /// Whether every completed run of `seed` consumed the same noise stream.
    pub fn paired(&self, seed: u64) -> bool {
        let mut hashes = self
            .runs
            .iter()
            .filter(|r| r.seed == seed)
            .filter_map(|r| r.summary.as_ref().map(|s| s.stream_hash.as_str()));
        match hashes.next() {
            Some(first) => hashes.all(|h| h == first),
            None => true,
        }
    }

    fn run_for(&self, seed: u64, variant: Variant) -> Option<&SweepRun> {
        self.runs.iter().find(|r| r.seed == seed && r.variant == variant)
    }
}

fn aggregate(runs: &[SweepRun], seeds: &[u64], variants: &[Variant]) -> Vec<VariantAggregate> {
    let lookup = |seed: u64, v: Variant| {
        runs.iter().find(|r| r.seed == seed && r.variant == v).and_then(SweepRun::nearest_mode_distance)
    };
    variants
        .iter()
        .map(|&v| {
            let mine: Vec<&SweepRun> = runs.iter().filter(|r| r.variant == v).collect();
            let dists: Vec<f64> = mine.iter().filter_map(|r| r.nearest_mode_distance()).collect();
            let cohs: Vec<f64> = mine
                .iter()
                .filter_map(|r| r.summary.as_ref()?.report.as_ref()?.update_coherence)
                .collect();
            let (mut wins, mut contested) = (0usize, 0usize);
            for &seed in seeds {
                let Some(d) = lookup(seed, v) else { continue };
                contested += 1;
                let beaten = variants.iter().filter(|&&o| o != v).all(|&o| lookup(seed, o).is_none_or(|od| d < od));
                wins += usize::from(beaten);
            }
            let mean = |xs: &[f64]| if xs.is_empty() { f64::NAN } else { xs.iter().sum::<f64>() / xs.len() as f64 };
            VariantAggregate {
                variant: v,
                runs: mine.len(),
                failures: mine.iter().filter(|r| r.error.is_some()).count(),
                mean_nearest_mode_distance: mean(&dists),
                mean_update_coherence: mean(&cohs),
                win_rate: if contested == 0 { f64::NAN } else { wins as f64 / contested as f64 },
            }
        })
        .collect()
}

/// Runs every `(seed, variant)` pair on at most `jobs` threads. Per-run
/// outputs go to `<out>/<variant>/seed-<seed>/` when `out` is given. A
/// failing run is recorded and the sweep carries on.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    learned: Option<&Denoiser>,
    seeds: &[u64],
    variants: &[Variant],
    jobs: usize,
    out: Option<&Path>,
) -> Result<SweepResult> {
    if seeds.is_empty() || variants.is_empty() {
        return Err(Error::InvalidArgument("a sweep needs at least one seed and one variant".into()));
    }
    let prior = cfg.prior()?;
    let sched = cfg.schedule()?;
    let views = cfg.views()?;
    let ctx = RunContext { prior: &prior, sched: &sched, views: &views, learned };
    let jobs_list: Vec<(u64, Variant)> = seeds.iter().flat_map(|&s| variants.iter().map(move |&v| (s, v))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let runs: Vec<SweepRun> = pool.install(|| {
        jobs_list
            .par_iter()
            .map(|&(seed, variant)| {
                let child = cfg.with_variant_and_seed(variant, seed);
                let result = run(&child.run_config(), &ctx).and_then(|outcome| {
                    let summary = match out {
                        Some(dir) => {
                            write_run_outputs(&dir.join(variant.name()).join(format!("seed-{seed}")), &child, &outcome)?
                        }
                        None => RunSummary::new(&child, &outcome),
                    };
                    Ok(summary)
                });
                match result {
                    Ok(summary) => {
                        let error = summary.failure.clone();
                        SweepRun { seed, variant, summary: Some(summary), error }
                    }
                    Err(e) => SweepRun { seed, variant, summary: None, error: Some(e.to_string()) },
                }
            })
            .collect()
    });
    let aggregates = aggregate(&runs, seeds, variants);
    let result = SweepResult { runs, aggregates };
    if let Some(dir) = out {
        write_sweep_outputs(dir, &result, seeds, variants)?;
    }
    Ok(result)
}

/// `sweep.csv` (one row per variant) and `runs.csv` (one row per run).
pub fn write_sweep_outputs(dir: &Path, result: &SweepResult, seeds: &[u64], variants: &[Variant]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut agg = String::from("variant,runs,failures,mean_nearest_mode_distance,mean_update_coherence,win_rate\n");
    for a in &result.aggregates {
        agg += &format!(
            "{},{},{},{},{},{}\n",
            a.variant,
            a.runs,
            a.failures,
            fmt_f64(a.mean_nearest_mode_distance),
            fmt_f64(a.mean_update_coherence),
            fmt_f64(a.win_rate)
        );
    }
    std::fs::write(dir.join("sweep.csv"), agg)?;
    let mut runs = String::from("seed,variant,status,nearest_mode_distance,mode_id,update_coherence,stream_hash,paired\n");
    for &seed in seeds {
        let paired = result.paired(seed);
        for &v in variants {
            let Some(r) = result.run_for(seed, v) else { continue };
            let report = r.summary.as_ref().and_then(|s| s.report.as_ref());
            runs += &format!(
                "{seed},{v},{},{},{},{},{},{paired}\n",
                if r.error.is_some() { "failed" } else { "ok" },
                report.map(|x| fmt_f64(x.nearest_mode_distance)).unwrap_or_default(),
                report.map(|x| x.mode_id.to_string()).unwrap_or_default(),
                report.and_then(|x| x.update_coherence).map(fmt_f64).unwrap_or_default(),
                r.summary.as_ref().map(|s| s.stream_hash.as_str()).unwrap_or(""),
            );
        }
    }
    std::fs::write(dir.join("runs.csv"), runs)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const CFG: &str = r#"{
        "prior": {
            "components": [
                {"weight": 0.5, "mean": [2.0, 0.0], "variance": 0.1},
                {"weight": 0.5, "mean": [-2.0, 0.0], "variance": 0.1}
            ],
            "text_map": {"right": [0], "left": [1]}
        },
        "guidance": {"variant": "anchords", "text": "right"},
        "run": {"steps": 40}
    }"#;

    #[test]
    fn pairs_streams_and_records_failures() {
        let cfg = ExperimentConfig::from_json(CFG).unwrap();
        let variants = [Variant::VanillaSds, Variant::Anchords, Variant::NegSource];
        let dir = tempfile::tempdir().unwrap();
        let res = run_sweep(&cfg, None, &[3, 4], &variants, 2, Some(dir.path())).unwrap();
        assert_eq!(res.runs.len(), 6);
        // neg-source without neg_text cannot start
        assert_eq!(res.failures(), 2);
        assert!(res.paired(3) && res.paired(4));
        let h3 = &res.run_for(3, Variant::VanillaSds).unwrap().summary.as_ref().unwrap().stream_hash;
        let h4 = &res.run_for(4, Variant::VanillaSds).unwrap().summary.as_ref().unwrap().stream_hash;
        assert_ne!(h3, h4);
        let agg = &res.aggregates[2];
        assert_eq!((agg.runs, agg.failures), (2, 2));
        assert!(agg.win_rate.is_nan());
        let wins: f64 = res.aggregates[..2].iter().map(|a| a.win_rate).sum();
        assert!((wins - 1.0).abs() < 1e-12, "one of two variants wins each seed");
        assert!(dir.path().join("sweep.csv").exists());
        assert!(dir.path().join("anchords/seed-3/trajectory.csv").exists());
        let runs_csv = std::fs::read_to_string(dir.path().join("runs.csv")).unwrap();
        assert_eq!(runs_csv.lines().count(), 7);
    }

    #[test]
    fn jobs_do_not_change_results() {
        let cfg = ExperimentConfig::from_json(CFG).unwrap();
        let v = [Variant::VanillaSds, Variant::Anchords];
        let a = run_sweep(&cfg, None, &[0, 1, 2], &v, 1, None).unwrap();
        let b = run_sweep(&cfg, None, &[0, 1, 2], &v, 4, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_empty_sweep() {
        let cfg = ExperimentConfig::from_json(CFG).unwrap();
        assert!(run_sweep(&cfg, None, &[], &[Variant::Anchords], 1, None).is_err());
    }
}
