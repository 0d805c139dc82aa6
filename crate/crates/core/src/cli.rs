//! Command-line front end: `stats`, `train`, `ablate`, `compare-aug`, `sweep`.
//!
//! Progress and results go to stderr; tables, reports and traces are written
//! to files, each one atomically through a temporary file and a rename.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

use crate::dataset::{load_corpus, load_ts, MtsDataset};
use crate::error::{Result, TfecError};
use crate::metrics::ClusterMetrics;
use crate::model::Checkpoint;
use crate::trainer::{ablate, compare_augmentations, train_with_model, RunConfig, RunReport};

#[derive(Debug, Parser)]
#[command(name = "tfec", version, about = "Contrastive clustering of multivariate time series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print name, N, T, F and class count of `.ts` corpora as a TSV table.
    Stats(StatsArgs),
    /// Train and cluster one corpus.
    Train(RunArgs),
    /// Run the five component ablation rows.
    Ablate(RunArgs),
    /// Compare co-enhancement against the classical augmentations.
    CompareAug(RunArgs),
    /// Grid search over config keys listed under "grid" in the config file.
    Sweep(RunArgs),
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// `.ts` files or directories (every `.ts` inside, sorted by name).
    #[arg(required = true)]
    pub paths: Vec<PathBuf>,
    /// Merge each `_TRAIN`/`_TEST` file with its sibling split.
    #[arg(long)]
    pub merge_splits: bool,
    /// Also write the table to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Flat JSON config file.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Corpus file; takes precedence over the config's `dataset`.
    #[arg(long, short)]
    pub data: Option<PathBuf>,
    /// `key=value` config overrides, applied after the config file.
    #[arg(long = "override", short = 'o', value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Comma-separated seeds, e.g. `1,2,3`.
    #[arg(long, value_delimiter = ',')]
    pub seed: Vec<u64>,
    /// Output directory.
    #[arg(long, default_value = "tfec-out")]
    pub out: PathBuf,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Stats(args) => cmd_stats(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Ablate(args) => cmd_ablate(&args),
        Command::CompareAug(args) => cmd_compare_aug(&args),
        Command::Sweep(args) => cmd_sweep(&args),
    }
}

/// Writes `bytes` to `path` via a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir).map_err(|e| TfecError::io(format!("creating {}", dir.display()), e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir)
        .map_err(|e| TfecError::io(format!("creating a temporary file in {}", dir.display()), e))?;
    tmp.write_all(bytes)
        .and_then(|_| tmp.as_file().sync_all())
        .map_err(|e| TfecError::io(format!("writing {}", path.display()), e))?;
    tmp.persist(path)
        .map_err(|e| TfecError::io(format!("renaming into {}", path.display()), e.error))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn corpus_files(path: &Path) -> Result<Vec<PathBuf>> {
    if !path.exists() {
        return Err(TfecError::NotFound(path.to_path_buf()));
    }
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let entries = std::fs::read_dir(path).map_err(|e| TfecError::io(format!("listing {}", path.display()), e))?;
    let mut files = Vec::new();
    for entry in entries {
        let p = entry.map_err(|e| TfecError::io(format!("listing {}", path.display()), e))?.path();
        if p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ts")) {
            files.push(p);
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

/// TSV rows `name, N, T, F, classes, file` for every corpus under `paths`.
pub fn stats_table(paths: &[PathBuf], merge_splits: bool) -> Result<String> {
    let mut out = String::from("name\tN\tT\tF\tclasses\tfile\n");
    for path in paths {
        for file in corpus_files(path)? {
            let ds = if merge_splits {
                load_corpus(&file, true)?
            } else {
                load_ts(&file)?
            };
            let s = ds.stats();
            let classes = s.class_count.map_or("-".to_string(), |k| k.to_string());
            let name = if ds.name.is_empty() {
                file.file_stem().unwrap_or_default().to_string_lossy().into_owned()
            } else {
                ds.name.clone()
            };
            let _ = writeln!(out, "{name}\t{}\t{}\t{}\t{classes}\t{}", s.n, s.t, s.f, file.display());
        }
    }
    Ok(out)
}

fn cmd_stats(args: &StatsArgs) -> Result<()> {
    let table = stats_table(&args.paths, args.merge_splits)?;
    print!("{table}");
    if let Some(out) = &args.out {
        write_atomic(out, table.as_bytes())?;
    }
    Ok(())
}

/// A fully resolved run request: config, sweep grid, seeds and corpus.
pub struct Prepared {
    pub cfg: RunConfig,
    pub grid: BTreeMap<String, Vec<Value>>,
    pub seeds: Vec<u64>,
    pub ds: MtsDataset,
}

/// Reads the config file, applies overrides and loads the corpus, then
/// validates every seed's config. All problems are reported together.
pub fn prepare(args: &RunArgs) -> Result<Prepared> {
    if let Some(n) = args.threads {
        // a second initialisation in the same process is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let mut errors = Vec::new();
    let mut grid = BTreeMap::new();
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        if !path.exists() {
            return Err(TfecError::NotFound(path.clone()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| TfecError::io(format!("reading {}", path.display()), e))?;
        let mut value: Value = serde_json::from_str(&text).map_err(|e| TfecError::InFile {
            path: path.clone(),
            source: Box::new(e.into()),
        })?;
        if let Some(g) = value.as_object_mut().and_then(|m| m.remove("grid")) {
            match serde_json::from_value::<BTreeMap<String, Vec<Value>>>(g) {
                Ok(g) => grid = g,
                Err(e) => errors.push(format!("grid: {e}")),
            }
        }
        match serde_json::from_value::<RunConfig>(value) {
            Ok(c) => cfg = c,
            Err(e) => errors.push(format!("{}: {e}", path.display())),
        }
    }
    if let Err(e) = cfg.apply_overrides(&args.overrides) {
        match e {
            TfecError::Config(list) => errors.extend(list),
            other => return Err(other),
        }
    }
    if let Some(d) = &args.data {
        cfg.dataset = Some(d.clone());
    }
    let seeds = if args.seed.is_empty() { vec![cfg.seed] } else { args.seed.clone() };
    for (key, values) in &grid {
        if values.is_empty() {
            errors.push(format!("grid key {key:?} has no values"));
        }
        for v in values {
            let mut probe = cfg.clone();
            if let Err(TfecError::Config(list)) = probe.apply_overrides(&[format!("{key}={v}")]) {
                errors.extend(list.into_iter().map(|m| format!("grid: {m}")));
            }
        }
    }
    let Some(path) = cfg.dataset.clone() else {
        errors.push("no dataset given (use --data or the dataset key)".into());
        return Err(TfecError::Config(errors));
    };
    if !errors.is_empty() {
        return Err(TfecError::Config(errors));
    }
    let ds = load_corpus(&path, cfg.merge_splits)?;
    for &seed in &seeds {
        let mut c = cfg.clone();
        c.seed = seed;
        for e in c.validate(&ds) {
            if !errors.contains(&e) {
                errors.push(e);
            }
        }
    }
    if !errors.is_empty() {
        return Err(TfecError::Config(errors));
    }
    Ok(Prepared { cfg, grid, seeds, ds })
}

fn with_seed(cfg: &RunConfig, seed: u64) -> RunConfig {
    let mut c = cfg.clone();
    c.seed = seed;
    c
}

fn metrics_line(m: Option<&ClusterMetrics>) -> String {
    match m {
        Some(m) => format!("ACC={:.4} NMI={:.4} F1={:.4}", m.acc, m.nmi, m.f1),
        None => "no labels, metrics skipped".to_string(),
    }
}

fn losses_csv(report: &RunReport) -> String {
    let mut out = String::from("epoch,l_con,l_recon,l_total\n");
    for e in &report.losses {
        let _ = writeln!(out, "{},{:?},{:?},{:?}", e.epoch, e.l_con, e.l_recon, e.l_total);
    }
    out
}

fn embeddings_csv(report: &RunReport) -> String {
    let mut out = String::new();
    for row in &report.embeddings {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn assignments_csv(report: &RunReport, labels: Option<&[usize]>) -> String {
    let mut out = String::from(if labels.is_some() { "index,cluster,label\n" } else { "index,cluster\n" });
    for (i, c) in report.assignments.iter().enumerate() {
        match labels {
            Some(l) => writeln!(out, "{i},{c},{}", l[i]),
            None => writeln!(out, "{i},{c}"),
        }
        .expect("writing to a string");
    }
    out
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    MeanStd { mean, std }
}

#[derive(Debug, Serialize)]
struct MetricSummary {
    acc: MeanStd,
    nmi: MeanStd,
    f1: MeanStd,
}

fn summarize(reports: &[&RunReport]) -> Option<MetricSummary> {
    let ms: Vec<ClusterMetrics> = reports.iter().map(|r| r.metrics).collect::<Option<_>>()?;
    let pick = |f: fn(&ClusterMetrics) -> f64| mean_std(&ms.iter().map(f).collect::<Vec<_>>());
    Some(MetricSummary {
        acc: pick(|m| m.acc),
        nmi: pick(|m| m.nmi),
        f1: pick(|m| m.f1),
    })
}

fn cmd_train(args: &RunArgs) -> Result<()> {
    let p = prepare(args)?;
    let multi = p.seeds.len() > 1;
    let mut reports = Vec::with_capacity(p.seeds.len());
    for &seed in &p.seeds {
        let cfg = with_seed(&p.cfg, seed);
        let outcome = train_with_model(&cfg, &p.ds)?;
        let dir = if multi { args.out.join(format!("seed_{seed}")) } else { args.out.clone() };
        let report = &outcome.report;
        write_json(&dir.join("report.json"), report)?;
        write_atomic(&dir.join("losses.csv"), losses_csv(report).as_bytes())?;
        write_atomic(&dir.join("embeddings.csv"), embeddings_csv(report).as_bytes())?;
        write_atomic(
            &dir.join("assignments.csv"),
            assignments_csv(report, p.ds.labels.as_deref()).as_bytes(),
        )?;
        write_json(
            &dir.join("model.json"),
            &Checkpoint::from_model(&outcome.model, &cfg.model_config()),
        )?;
        eprintln!("seed {seed}: {}", metrics_line(report.metrics.as_ref()));
        reports.push(outcome.report);
    }
    if multi {
        #[derive(Serialize)]
        struct Summary<'a> {
            dataset: &'a str,
            seeds: &'a [u64],
            metrics: Option<MetricSummary>,
        }
        let refs: Vec<&RunReport> = reports.iter().collect();
        let summary = Summary {
            dataset: &p.ds.name,
            seeds: &p.seeds,
            metrics: summarize(&refs),
        };
        if let Some(m) = &summary.metrics {
            eprintln!(
                "mean over {} seeds: ACC={:.4}±{:.4} NMI={:.4}±{:.4} F1={:.4}±{:.4}",
                p.seeds.len(),
                m.acc.mean,
                m.acc.std,
                m.nmi.mean,
                m.nmi.std,
                m.f1.mean,
                m.f1.std
            );
        }
        write_json(&args.out.join("summary.json"), &summary)?;
    }
    Ok(())
}

fn fmt_metric(m: Option<&ClusterMetrics>, f: fn(&ClusterMetrics) -> f64) -> String {
    m.map_or(String::new(), |m| format!("{:.6}", f(m)))
}

/// Metric names (ACC, F1, NMI) on which `row` falls below `full`.
pub fn degradation_marker(row: Option<&ClusterMetrics>, full: Option<&ClusterMetrics>) -> String {
    let (Some(r), Some(f)) = (row, full) else {
        return String::new();
    };
    let mut marks = Vec::new();
    for (name, a, b) in [("ACC", r.acc, f.acc), ("F1", r.f1, f.f1), ("NMI", r.nmi, f.nmi)] {
        if a < b {
            marks.push(name);
        }
    }
    marks.join("|")
}

fn cmd_ablate(args: &RunArgs) -> Result<()> {
    let p = prepare(args)?;
    let mut csv = String::from("seed,row,label,use_coeh,use_pgcl,use_read,ACC,F1,NMI,degraded\n");
    for &seed in &p.seeds {
        let rows = ablate(&with_seed(&p.cfg, seed), &p.ds)?;
        let full = rows[0].report.metrics;
        for r in &rows {
            let m = r.report.metrics.as_ref();
            let _ = writeln!(
                csv,
                "{seed},{},{},{},{},{},{},{},{},{}",
                r.row,
                r.label,
                r.use_coeh,
                r.use_pgcl,
                r.use_read,
                fmt_metric(m, |m| m.acc),
                fmt_metric(m, |m| m.f1),
                fmt_metric(m, |m| m.nmi),
                if r.row == 1 { String::new() } else { degradation_marker(m, full.as_ref()) }
            );
            eprintln!("seed {seed} row {} ({}): {}", r.row, r.label, metrics_line(m));
        }
    }
    write_atomic(&args.out.join("ablation.csv"), csv.as_bytes())
}

fn summary_cells(s: Option<&MetricSummary>) -> String {
    match s {
        Some(s) => format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            s.acc.mean, s.acc.std, s.f1.mean, s.f1.std, s.nmi.mean, s.nmi.std
        ),
        None => ",,,,,".to_string(),
    }
}

fn cmd_compare_aug(args: &RunArgs) -> Result<()> {
    let p = prepare(args)?;
    let mut by_kind: Vec<(String, Vec<RunReport>)> = Vec::new();
    for &seed in &p.seeds {
        for (idx, (name, report)) in compare_augmentations(&with_seed(&p.cfg, seed), &p.ds)?
            .into_iter()
            .enumerate()
        {
            eprintln!("seed {seed} {name}: {}", metrics_line(report.metrics.as_ref()));
            if by_kind.len() <= idx {
                by_kind.push((name, Vec::new()));
            }
            by_kind[idx].1.push(report);
        }
    }
    let mut csv = String::from("augmentation,ACC_mean,ACC_std,F1_mean,F1_std,NMI_mean,NMI_std,seeds\n");
    let seeds: Vec<String> = p.seeds.iter().map(|s| s.to_string()).collect();
    for (name, reports) in &by_kind {
        let refs: Vec<&RunReport> = reports.iter().collect();
        let _ = writeln!(csv, "{name},{},{}", summary_cells(summarize(&refs).as_ref()), seeds.join(" "));
    }
    write_atomic(&args.out.join("compare.csv"), csv.as_bytes())
}

/// Cartesian product of the grid, keys in sorted order, last key fastest.
pub fn grid_points(grid: &BTreeMap<String, Vec<Value>>) -> Vec<Vec<(String, Value)>> {
    let mut points: Vec<Vec<(String, Value)>> = vec![Vec::new()];
    for (key, values) in grid {
        let mut next = Vec::with_capacity(points.len() * values.len());
        for point in &points {
            for v in values {
                let mut p = point.clone();
                p.push((key.clone(), v.clone()));
                next.push(p);
            }
        }
        points = next;
    }
    points
}

fn cmd_sweep(args: &RunArgs) -> Result<()> {
    let p = prepare(args)?;
    if p.grid.is_empty() {
        return Err(TfecError::config("sweep needs a non-empty \"grid\" object in the config file"));
    }
    let points = grid_points(&p.grid);
    let mut configs = Vec::with_capacity(points.len());
    let mut errors = Vec::new();
    for point in &points {
        let mut cfg = p.cfg.clone();
        let overrides: Vec<String> = point.iter().map(|(k, v)| format!("{k}={v}")).collect();
        cfg.apply_overrides(&overrides)?;
        for &seed in &p.seeds {
            errors.extend(with_seed(&cfg, seed).validate(&p.ds).into_iter().map(|e| format!("{}: {e}", overrides.join(" "))));
        }
        configs.push(cfg);
    }
    if !errors.is_empty() {
        return Err(TfecError::Config(errors));
    }

    struct Entry {
        point: usize,
        summary: Option<MetricSummary>,
    }
    let mut entries = Vec::with_capacity(points.len());
    for (idx, cfg) in configs.iter().enumerate() {
        let mut reports = Vec::with_capacity(p.seeds.len());
        for &seed in &p.seeds {
            let report = crate::trainer::train(&with_seed(cfg, seed), &p.ds)?;
            let dir = args.out.join(format!("point_{idx}"));
            let file = if p.seeds.len() > 1 { format!("report_seed_{seed}.json") } else { "report.json".into() };
            write_json(&dir.join(file), &report)?;
            reports.push(report);
        }
        let refs: Vec<&RunReport> = reports.iter().collect();
        let summary = summarize(&refs);
        eprintln!(
            "point {idx} {:?}: NMI mean {}",
            points[idx].iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>(),
            summary.as_ref().map_or("-".into(), |s| format!("{:.4}", s.nmi.mean))
        );
        entries.push(Entry { point: idx, summary });
    }
    let nmi = |e: &Entry| e.summary.as_ref().map_or(f64::NEG_INFINITY, |s| s.nmi.mean);
    entries.sort_by(|a, b| nmi(b).total_cmp(&nmi(a)).then(a.point.cmp(&b.point)));

    let keys: Vec<&String> = p.grid.keys().collect();
    let mut csv = String::from("rank,point,");
    for k in &keys {
        csv.push_str(k);
        csv.push(',');
    }
    csv.push_str("ACC_mean,ACC_std,F1_mean,F1_std,NMI_mean,NMI_std\n");
    for (rank, e) in entries.iter().enumerate() {
        let _ = write!(csv, "{},{},", rank + 1, e.point);
        for (_, v) in &points[e.point] {
            let _ = write!(csv, "{},", v.to_string().replace(',', ";"));
        }
        let _ = writeln!(csv, "{}", summary_cells(e.summary.as_ref()));
    }
    write_atomic(&args.out.join("leaderboard.csv"), csv.as_bytes())?;
    let mut best = configs[entries[0].point].clone();
    best.seed = p.seeds[0];
    write_json(&args.out.join("best_config.json"), &best)?;
    Ok(())
}
