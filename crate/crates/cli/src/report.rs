//! `anchorlab report`: static SVG charts next to each CSV found under a directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};

use anchorlab::chart::{line_chart, Series};
use anchorlab::io::{read_table, Table};

fn find(dir: &Path, name: &str, found: &mut Vec<PathBuf>) -> anyhow::Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            find(&p, name, found)?;
        } else if p.file_name().is_some_and(|f| f == name) {
            found.push(p);
        }
    }
    Ok(())
}

fn load(path: &Path) -> anyhow::Result<Table> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_table(file).with_context(|| format!("parsing {}", path.display()))
}

/// `(x, y)` pairs where `y` is present.
fn points(t: &Table, x: &str, y: &str) -> Vec<(f64, f64)> {
    match (t.column(x), t.column(y)) {
        (Some(xs), Some(ys)) => xs.into_iter().zip(ys).filter(|(_, y)| y.is_finite()).collect(),
        _ => Vec::new(),
    }
}

fn write(path: PathBuf, svg: String) -> anyhow::Result<()> {
    fs::write(&path, svg).with_context(|| format!("writing {}", path.display()))
}

pub fn render_all(root: &Path) -> anyhow::Result<()> {
    let (mut trajectories, mut losses) = (Vec::new(), Vec::new());
    find(root, "trajectory.csv", &mut trajectories)?;
    find(root, "loss.csv", &mut losses)?;
    if trajectories.is_empty() && losses.is_empty() {
        bail!("no trajectory.csv or loss.csv under {}", root.display());
    }
    // Sweep layout is <root>/<variant>/seed-<n>/trajectory.csv; collect the
    // per-variant curves for an overlay.
    let mut by_variant: BTreeMap<String, Vec<Vec<(f64, f64)>>> = BTreeMap::new();
    for path in &trajectories {
        let t = load(path)?;
        let dir = path.parent().unwrap_or(root);
        let modes = points(&t, "tau", "nearest_mode_distance");
        write(
            dir.join("nearest_mode_distance.svg"),
            line_chart("Distance to nearest text mode", "step", "distance", &[Series::new("mean over particles and views", modes.clone())]),
        )?;
        write(
            dir.join("gradients.svg"),
            line_chart(
                "Update magnitudes",
                "step",
                "norm",
                &[
                    Series::new("asset gradient", points(&t, "tau", "grad_norm")),
                    Series::new("m1", points(&t, "tau", "m1_norm")),
                    Series::new("m2", points(&t, "tau", "m2_norm")),
                ],
            ),
        )?;
        let rec = points(&t, "tau", "rec_loss_per_dim");
        if rec.iter().any(|(_, y)| *y != 0.0) {
            write(
                dir.join("rec_loss.svg"),
                line_chart("Anchored reconstruction loss", "step", "per-dimension loss", &[Series::new("rec loss", rec)]),
            )?;
        }
        let ed = points(&t, "tau", "source_target_distance");
        if !ed.is_empty() {
            write(
                dir.join("source_target_distance.svg"),
                line_chart("Energy distance to target", "step", "energy distance", &[Series::new("view 0", ed)]),
            )?;
        }
        let is_sweep_child = dir.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("seed-"));
        if let (true, Some(variant)) = (is_sweep_child, dir.parent().and_then(Path::file_name)) {
            by_variant.entry(variant.to_string_lossy().into_owned()).or_default().push(modes);
        }
        println!("charts for {}", path.display());
    }
    if !by_variant.is_empty() {
        let series: Vec<Series> = by_variant
            .iter()
            .map(|(name, curves)| Series::new(name.clone(), mean_curve(curves)))
            .collect();
        write(
            root.join("sweep_nearest_mode_distance.svg"),
            line_chart("Mean distance to nearest text mode across seeds", "step", "distance", &series),
        )?;
    }
    for path in &losses {
        let t = load(path)?;
        let dir = path.parent().unwrap_or(root);
        write(
            dir.join("loss.svg"),
            line_chart("Denoising loss", "step", "loss", &[Series::new("training batch", points(&t, "step", "loss"))]),
        )?;
        println!("chart for {}", path.display());
    }
    Ok(())
}

/// Pointwise mean over curves, truncated to the shortest.
fn mean_curve(curves: &[Vec<(f64, f64)>]) -> Vec<(f64, f64)> {
    let n = curves.iter().map(Vec::len).min().unwrap_or(0);
    (0..n)
        .map(|i| (curves[0][i].0, curves.iter().map(|c| c[i].1).sum::<f64>() / curves.len() as f64))
        .collect()
}
