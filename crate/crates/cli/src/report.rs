//! Tables and plot data as CSV, gathered from one or more run directories.

use std::path::{Path, PathBuf};

use kvbabel::train::MetricsLog;
use kvbabel::{Error, Result};

use crate::commands::{MatrixReport, MetaReport, PhaseSummary};
use crate::config::ExperimentConfig;
use crate::run::read_json;

pub const METRIC_COLUMNS: [&str; 6] = ["step", "path_src", "path_dst", "loss_kind", "value", "lr"];

struct Run {
    recipe: String,
    seed: u64,
    name: String,
    metrics: MetricsLog,
    matrix: Option<MatrixReport>,
    meta: Option<MetaReport>,
}

fn invalid(path: &Path, msg: String) -> Error {
    Error::File {
        path: path.to_path_buf(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, msg),
    }
}

/// Read `metrics.csv`, naming every required column it lacks.
fn read_metrics(path: &Path) -> Result<MetricsLog> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::File {
            path: path.to_path_buf(),
            source: io,
        },
        other => invalid(path, format!("{other:?}")),
    })?;
    let header = reader.headers()?.clone();
    let absent: Vec<&str> = METRIC_COLUMNS
        .iter()
        .copied()
        .filter(|c| !header.iter().any(|h| h == *c))
        .collect();
    if !absent.is_empty() {
        return Err(invalid(path, format!("missing metrics columns: {}", absent.join(", "))));
    }
    MetricsLog::read_csv(path)
}

fn load_run(dir: &Path) -> Result<Run> {
    let cfg: ExperimentConfig = read_json(&dir.join("config.json"))?;
    let metrics = read_metrics(&dir.join("metrics.csv"))?;
    let optional = |f: &str| dir.join(f).exists().then(|| dir.join(f));
    Ok(Run {
        recipe: cfg.recipe.name().to_string(),
        seed: cfg.seed,
        name: dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string()),
        metrics,
        matrix: optional("matrix.json").map(|p| read_json(&p)).transpose()?,
        meta: optional("meta.json").map(|p| read_json(&p)).transpose()?,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn opt(v: Option<usize>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::File {
            path: path.to_path_buf(),
            source: io,
        },
        other => invalid(path, format!("{other:?}")),
    })
}

/// Write `curves.csv`, `translator_eval.csv` and `portability.csv` to
/// `out`. Rows are ordered by (recipe, seed, run name).
pub fn report(run_dirs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    let mut runs = run_dirs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>>>()?;
    runs.sort_by(|a, b| (&a.recipe, a.seed, &a.name).cmp(&(&b.recipe, b.seed, &b.name)));
    std::fs::create_dir_all(out).map_err(|e| Error::File {
        path: out.to_path_buf(),
        source: e,
    })?;

    let curves = out.join("curves.csv");
    let mut w = writer(&curves)?;
    w.write_record(["recipe", "seed", "run", "step", "path_src", "path_dst", "loss_kind", "value"])?;
    for r in &runs {
        for m in &r.metrics.rows {
            w.write_record([
                r.recipe.clone(),
                r.seed.to_string(),
                r.name.clone(),
                m.step.to_string(),
                opt(m.path_src),
                opt(m.path_dst),
                m.loss_kind.clone(),
                m.value.to_string(),
            ])?;
        }
    }
    w.flush()?;

    let table = out.join("translator_eval.csv");
    let mut w = writer(&table)?;
    w.write_record([
        "recipe",
        "seed",
        "run",
        "src",
        "dst",
        "trained",
        "eval_loss",
        "identity",
        "linear",
        "translator",
    ])?;
    for r in &runs {
        let Some(m) = &r.matrix else { continue };
        let n = m.models.len();
        for i in 0..n {
            for j in 0..n {
                let get = |x: &Option<kvbabel::train::NllMatrix>| x.as_ref().and_then(|x| x.get(i, j));
                let trained = [&m.translator, &m.linear]
                    .iter()
                    .find_map(|x| x.as_ref().map(|x| x.trained[i][j]))
                    .unwrap_or(false);
                w.write_record([
                    r.recipe.clone(),
                    r.seed.to_string(),
                    r.name.clone(),
                    m.models[i].clone(),
                    m.models[j].clone(),
                    trained.to_string(),
                    cell(m.own_cache.get(j).copied()),
                    cell(get(&m.identity)),
                    cell(get(&m.linear)),
                    cell(get(&m.translator)),
                ])?;
            }
        }
    }
    w.flush()?;

    let port = out.join("portability.csv");
    let mut w = writer(&port)?;
    w.write_record(["recipe", "seed", "run", "adapters", "phase", "prompt", "mean", "std", "tasks", "win_rate"])?;
    for r in &runs {
        let Some(m) = &r.meta else { continue };
        let init = serde_json::to_value(m.adapters)?.as_str().unwrap_or_default().to_string();
        for (phase, s) in [("before", &m.before), ("after", &m.after)] {
            let PhaseSummary {
                translated,
                random,
                direct,
                win_rate,
            } = s;
            for (kind, sum) in [("translated", translated), ("random", random), ("direct", direct)] {
                let Some(sum) = sum else { continue };
                w.write_record([
                    r.recipe.clone(),
                    r.seed.to_string(),
                    r.name.clone(),
                    init.clone(),
                    phase.to_string(),
                    kind.to_string(),
                    sum.mean.to_string(),
                    sum.std.to_string(),
                    sum.tasks.to_string(),
                    win_rate.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(vec![curves, table, port])
}
