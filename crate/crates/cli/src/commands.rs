use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use cluda_core::data::{load_csv, preprocess, synth_generate, write_csv, RawDataset, SOURCE};
use cluda_core::experiment::DomainSplits;
use cluda_core::metrics::{MetricReport, TaskKind};
use cluda_core::nn::Checkpoint;
use cluda_core::pipeline::{evaluate, train, CludaModel};
use cluda_core::verify::{self, VerifyOptions, VerifyReport};

use crate::config::ExperimentConfig;
use crate::CliError;

pub const SPLITS: [&str; 6] = [
    "source_train",
    "source_val",
    "source_test",
    "target_train",
    "target_val",
    "target_test",
];

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(cluda_core::Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(io_at(path))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(cluda_core::Error::from)?;
    writeln!(w).and_then(|_| w.flush()).map_err(io_at(path))
}

fn make_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_at(dir))
}

/// Number of worker threads allowed by `CLUDA_THREADS` (default 1).
pub fn thread_cap() -> Result<usize, CliError> {
    match std::env::var("CLUDA_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Validation(vec![format!(
                "CLUDA_THREADS = {v:?} must be a positive integer"
            )])),
        },
    }
}

/// Writes the six synthetic splits as CSV (labels where the split has them)
/// plus a manifest with the generator configuration.
pub fn generate(config: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    make_dir(out)?;
    let data = synth_generate(&config.synth)?;
    let mut files = Vec::new();
    for (name, raw) in data.splits() {
        let samples = out.join(format!("{name}.csv"));
        let labeled = raw.series.iter().any(|s| s.label.is_some());
        let labels = labeled.then(|| out.join(format!("{name}_labels.csv")));
        let label_writer = labels.as_deref().map(create).transpose()?;
        write_csv(raw, create(&samples)?, label_writer)?;
        files.push(format!("{name}.csv"));
        if labeled {
            files.push(format!("{name}_labels.csv"));
        }
    }
    write_json(
        &out.join("manifest.json"),
        &json!({
            "command": "generate",
            "seed": config.synth.seed,
            "synth": config.synth,
            "files": files,
        }),
    )?;
    log::info!("wrote {} files to {}", files.len() + 1, out.display());
    Ok(())
}

fn read_split(dir: &Path, name: &str) -> Result<RawDataset, CliError> {
    let samples = dir.join(format!("{name}.csv"));
    let labels = dir.join(format!("{name}_labels.csv"));
    let labels = labels.exists().then_some(labels);
    if !samples.exists() {
        return Err(CliError::Runtime(cluda_core::Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} does not exist", samples.display()),
        ))));
    }
    Ok(load_csv(&samples, labels.as_deref())?)
}

/// The six preprocessed splits, from `data_dir` or freshly generated. Target
/// train/val labels are dropped in either case.
pub fn load_splits(config: &ExperimentConfig) -> Result<DomainSplits, CliError> {
    let history = config.train.tcn.max_history;
    let mut splits = match &config.data_dir {
        None => DomainSplits::from_synth(&synth_generate(&config.synth)?, history)?,
        Some(dir) => {
            let threads = thread_cap()?.min(SPLITS.len());
            let raws = read_parallel(dir, threads)?;
            let r: Vec<&RawDataset> = raws.iter().collect();
            DomainSplits::from_raw([r[0], r[1], r[2], r[3], r[4], r[5]], history)?
        }
    };
    splits.target_train = splits.target_train.without_labels();
    splits.target_val = splits.target_val.without_labels();
    Ok(splits)
}

fn read_parallel(dir: &Path, threads: usize) -> Result<Vec<RawDataset>, CliError> {
    let mut out: Vec<Option<Result<RawDataset, CliError>>> = (0..SPLITS.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        for (chunk_idx, chunk) in out.chunks_mut(SPLITS.len().div_ceil(threads)).enumerate() {
            let base = chunk_idx * SPLITS.len().div_ceil(threads);
            scope.spawn(move || {
                for (k, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(read_split(dir, SPLITS[base + k]));
                }
            });
        }
    });
    out.into_iter().map(|r| r.expect("every split read")).collect()
}

#[derive(Debug, Serialize)]
pub struct TrainReport {
    pub task: TaskKind,
    pub seed: u64,
    pub lambda_disc: f64,
    pub lambda_cl: f64,
    pub lambda_nncl: f64,
    pub best_step: u64,
    pub best_val_metric: f64,
    pub steps_run: u64,
    pub source_test: MetricReport,
    pub target_test: MetricReport,
}

/// Trains on `splits` and writes `config.txt`, `manifest.json`,
/// `history.ndjson`, `checkpoint.bin` and `report.json` into `out`.
pub fn train_into(config: &ExperimentConfig, splits: &DomainSplits, out: &Path) -> Result<TrainReport, CliError> {
    make_dir(out)?;
    let t = &config.train;
    fs::write(out.join("config.txt"), config.to_document()).map_err(io_at(out))?;
    write_json(
        &out.join("manifest.json"),
        &json!({
            "command": "train",
            "config": config,
            "scaler": splits.stats,
            "files": ["config.txt", "history.ndjson", "checkpoint.bin", "report.json"],
        }),
    )?;
    let history_path = out.join("history.ndjson");
    let mut history = create(&history_path)?;
    let outcome = train(
        t,
        &splits.source_train,
        &splits.source_val,
        &splits.target_train,
        Some(&mut history),
    )?;
    history.flush().map_err(io_at(&history_path))?;

    let mut ck = outcome.model.to_checkpoint(t, outcome.best_step);
    ck.manifest["scaler"] = serde_json::to_value(&splits.stats).map_err(cluda_core::Error::from)?;
    ck.save(&out.join("checkpoint.bin"))?;

    let report = TrainReport {
        task: t.task,
        seed: t.seed,
        lambda_disc: t.lambda_disc,
        lambda_cl: t.lambda_cl,
        lambda_nncl: t.lambda_nncl,
        best_step: outcome.best_step,
        best_val_metric: outcome.best_metric,
        steps_run: outcome.steps_run,
        source_test: evaluate(&outcome.model, &splits.source_test, t.task)?,
        target_test: evaluate(&outcome.model, &splits.target_test, t.task)?,
    };
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

pub fn train_command(config: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let splits = load_splits(config)?;
    let report = train_into(config, &splits, out)?;
    log::info!(
        "best step {}: source test {:.4}, target test {:.4}",
        report.best_step,
        report.source_test.primary(),
        report.target_test.primary()
    );
    println!("{}", serde_json::to_string(&report).map_err(cluda_core::Error::from)?);
    Ok(())
}

/// Metrics of a checkpoint on one labeled split.
pub fn evaluate_command(
    checkpoint: &Path,
    samples: &Path,
    labels: Option<&Path>,
    task: Option<TaskKind>,
) -> Result<MetricReport, CliError> {
    let ck = Checkpoint::load(checkpoint)?;
    let (model, config, _) = CludaModel::from_checkpoint(&ck)?;
    if let Some(task) = task {
        if task != config.task {
            return Err(CliError::Validation(vec![format!(
                "checkpoint was trained for {} but {} was requested",
                config.task.as_str(),
                task.as_str()
            )]));
        }
    }
    let stats = ck
        .manifest
        .get("scaler")
        .cloned()
        .ok_or_else(|| cluda_core::Error::Format("checkpoint has no scaler statistics".into()))?;
    let stats = serde_json::from_value(stats).map_err(cluda_core::Error::from)?;
    let raw = load_csv(samples, labels)?;
    let (data, _) = preprocess(&raw, Some(&stats), config.tcn.max_history, SOURCE)?;
    Ok(evaluate(&model, &data, config.task)?)
}

pub fn verify_command(opts: VerifyOptions, out: Option<&Path>) -> Result<VerifyReport, CliError> {
    let report = verify::run_all(opts);
    for c in &report.checks {
        println!(
            "{} {:<44} {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    println!("{} checks in {:.1}s", report.checks.len(), report.seconds);
    if let Some(dir) = out {
        make_dir(dir)?;
        write_json(&dir.join("verify.json"), &report)?;
    }
    Ok(report)
}

/// Splits `a,b,[c,d]` at top-level commas.
pub fn split_values(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let (mut depth, mut cur) = (0i32, String::new());
    for ch in text.chars() {
        match ch {
            '[' | '{' => depth += 1,
            ']' | '}' => depth -= 1,
            ',' if depth == 0 => {
                out.push(cur.trim().to_string());
                cur.clear();
                continue;
            }
            _ => {}
        }
        cur.push(ch);
    }
    out.push(cur.trim().to_string());
    out
}

/// Cartesian product of `axes`, last axis varying fastest.
pub fn grid_points(axes: &[(String, Vec<String>)]) -> Vec<Vec<(String, String)>> {
    let mut points = vec![Vec::new()];
    for (key, values) in axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((key.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    points
}

#[derive(Debug, Serialize)]
pub struct GridEntry {
    pub run: String,
    pub settings: Vec<(String, String)>,
    pub best_val_metric: f64,
    pub source_test: f64,
    pub target_test: f64,
}

/// Trains every configuration in `runs` (one sub-directory each) with up to
/// `threads` in parallel, and writes `grid.json` sorted by validation metric.
pub fn grid_command(
    runs: Vec<(Vec<(String, String)>, ExperimentConfig)>,
    out: &Path,
    threads: usize,
) -> Result<Vec<GridEntry>, CliError> {
    make_dir(out)?;
    let base = &runs.first().ok_or_else(|| CliError::Validation(vec!["empty grid".into()]))?.1;
    let splits = load_splits(base)?;
    let dirs: Vec<PathBuf> = (0..runs.len()).map(|i| out.join(format!("run-{i:03}"))).collect();
    let mut results: Vec<Option<Result<TrainReport, CliError>>> = (0..runs.len()).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots = std::sync::Mutex::new(&mut results);
    std::thread::scope(|scope| {
        for _ in 0..threads.min(runs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= runs.len() {
                    break;
                }
                let r = train_into(&runs[i].1, &splits, &dirs[i]);
                slots.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    let mut entries = Vec::with_capacity(runs.len());
    for (i, r) in results.into_iter().enumerate() {
        let report = r.expect("every run attempted")?;
        entries.push(GridEntry {
            run: format!("run-{i:03}"),
            settings: runs[i].0.clone(),
            best_val_metric: report.best_val_metric,
            source_test: report.source_test.primary(),
            target_test: report.target_test.primary(),
        });
    }
    entries.sort_by(|a, b| b.best_val_metric.total_cmp(&a.best_val_metric).then(a.run.cmp(&b.run)));
    write_json(&out.join("grid.json"), &entries)?;
    Ok(entries)
}
