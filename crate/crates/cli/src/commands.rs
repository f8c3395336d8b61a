use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use dnilm_core::metrics::{read_metrics_csv, summarize_rows, write_metrics_csv, MetricRow};
use dnilm_core::pipeline::format::{read_household, write_household, WindowSet};
use dnilm_core::pipeline::manifest::WindowsEntry;
use dnilm_core::pipeline::{split_dataset, Fold, Manifest, SplitMode};
use dnilm_core::toy::{generate, ToyConfig};
use dnilm_core::AugmentedHousehold;
use dnilm_model::baselines::{FhmmModel, NeuralBaseline};
use dnilm_model::{checkpoint, fit_with, AnyModel, DualNilm, EpochRecord, Network, TrainingData};

use crate::config::{ExperimentConfig, ModelChoice};
use crate::error::{CliError, Result};
use crate::evaluate::{evaluate, Evaluation};
use crate::plots;
use crate::provenance::{
    read_json, sidecar_path, tool_version, write_json, CheckpointProvenance, DatasetProvenance, FileChecksum, Span,
    FORMAT_VERSION,
};

pub const CHECKPOINT: &str = "model.ckpt";
pub const METRICS: &str = "metrics.csv";
pub const SUMMARY: &str = "summary.csv";
pub const PARTIAL: &str = "partial_results.csv";
pub const TRACE: &str = "trace.csv";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn remove_if_present(path: &Path) -> Result<()> {
    match std::fs::remove_file(path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(CliError::io(path, e)),
        _ => Ok(()),
    }
}

/// Writes the toy household's input files into `dir` and returns the
/// manifest path.
pub fn write_toy_inputs(cfg: &ExperimentConfig, dir: &Path) -> Result<PathBuf> {
    let toy = generate(&ToyConfig {
        seed: cfg.seed,
        ..ToyConfig::default()
    })?;
    Ok(toy.write_inputs(dir, cfg.split.unwrap_or_default(), cfg.windows.unwrap_or_default())?)
}

/// Builds the household from the manifest and writes it with its sidecar.
pub fn synthesize(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let manifest_path = cfg
        .manifest
        .as_deref()
        .ok_or_else(|| CliError::Usage("no manifest given (set `manifest` in the config or pass --toy)".into()))?;
    let manifest = Manifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new(""));
    let built = manifest.build(base, cfg.irradiance.as_deref())?;

    let out = cfg.dataset_path();
    if let Some(dir) = out.parent() {
        create_dir(dir)?;
    }
    write_household(&built.household, &out)?;

    let mut inputs = vec![FileChecksum::of(manifest_path, base)?];
    for f in &built.input_files {
        inputs.push(FileChecksum::of(f, base)?);
    }
    let h = &built.household;
    let prov = DatasetProvenance {
        format_version: FORMAT_VERSION,
        tool: tool_version(),
        inputs,
        manifest,
        output: FileChecksum::of(&out, &cfg.out)?,
        appliances: h.appliance_names(),
        grid: h.grid(),
        rated_capacity: h.injection.rated_capacity(),
    };
    write_json(&prov, &sidecar_path(&out))?;
    Ok(out)
}

pub struct Dataset {
    pub household: AugmentedHousehold,
    pub provenance: DatasetProvenance,
    pub checksum: FileChecksum,
    pub split: SplitMode,
    pub windows: WindowsEntry,
}

impl Dataset {
    /// Loads the packed household, refusing files that no longer match
    /// their sidecar. Split and window settings come from the config when
    /// it sets them, otherwise from the manifest the household was built
    /// from.
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let path = cfg.dataset_path();
        if !path.exists() {
            return Err(CliError::Data(format!(
                "{} does not exist; run `dnilm synthesize` first",
                path.display()
            )));
        }
        let side = sidecar_path(&path);
        let provenance: DatasetProvenance = read_json(&side)?;
        let checksum = FileChecksum::of(&path, &cfg.out)?;
        if checksum.sha256 != provenance.output.sha256 {
            return Err(CliError::Data(format!(
                "{} does not match the checksum in {}",
                path.display(),
                side.display()
            )));
        }
        let household = read_household(&path)?;
        Ok(Dataset {
            split: cfg.split.unwrap_or(provenance.manifest.split),
            windows: cfg.windows.unwrap_or(provenance.manifest.windows),
            household,
            provenance,
            checksum,
        })
    }

    pub fn folds(&self) -> Result<Vec<Fold>> {
        Ok(split_dataset(&self.household, self.split)?)
    }

    fn fold(&self, index: usize) -> Result<Fold> {
        let mut folds = self.folds()?;
        if index >= folds.len() {
            return Err(CliError::Usage(format!("fold {index} does not exist; the split has {}", folds.len())));
        }
        Ok(folds.swap_remove(index))
    }
}

fn write_trace(records: &[EpochRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    for r in records {
        w.serialize(r).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn train_spans(fold: &Fold) -> Vec<Span> {
    fold.train.iter().map(|seg| Span::of_grid(seg.grid())).collect()
}

/// Trains the configured model on one fold and writes the checkpoint, its
/// sidecar and (for neural models) the loss trace into `dir`.
pub fn train_fold(cfg: &ExperimentConfig, data: &Dataset, fold: &Fold, dir: &Path, log: &str) -> Result<AnyModel> {
    create_dir(dir)?;
    let windows = data.windows;
    let choice = cfg.model_choice(windows.length)?;
    let plan = windows.train_plan()?;
    let appliances = data.household.appliance_names();
    let train_windows: usize = fold.train.iter().map(|s| plan.count(s.len())).sum();

    let model = match choice {
        ModelChoice::Fhmm(opts) => AnyModel::Fhmm(FhmmModel::fit(&fold.train, windows.length, &opts)?),
        neural => {
            let model = match neural {
                ModelChoice::DualNilm(c) => AnyModel::DualNilm(DualNilm::new(c, &appliances, cfg.seed)?),
                ModelChoice::Baseline(c) => AnyModel::Neural(NeuralBaseline::new(c, &appliances, cfg.seed)?),
                ModelChoice::Fhmm(_) => unreachable!(),
            };
            let set = WindowSet::from_segments(&fold.train, plan)?;
            let tdata = TrainingData::from_window_set(&set);
            let tcfg = cfg.train_config()?;
            let net: &dyn Network = model.network().expect("neural model");
            let trace = fit_with(net, &tdata, &tcfg, |r| {
                eprintln!(
                    "{log}epoch {}/{}: loss {:.5} (dice {:.5}, injection {:.5})",
                    r.epoch + 1,
                    tcfg.epochs,
                    r.total,
                    r.dice,
                    r.injection
                );
            })?;
            write_trace(&trace.epochs, &dir.join(TRACE))?;
            model
        }
    };

    let ckpt = dir.join(CHECKPOINT);
    checkpoint::save(&model, &ckpt)?;
    let prov = CheckpointProvenance {
        format_version: FORMAT_VERSION,
        tool: tool_version(),
        dataset: data.checksum.clone(),
        appliances,
        split: data.split,
        fold: fold.index,
        windows,
        train_spans: train_spans(fold),
        train_windows,
        config: cfg.echo(windows.length)?,
        checkpoint: FileChecksum::of(&ckpt, &cfg.out)?,
    };
    write_json(&prov, &sidecar_path(&ckpt))?;
    Ok(model)
}

pub fn train(cfg: &ExperimentConfig, fold: usize) -> Result<PathBuf> {
    let data = Dataset::load(cfg)?;
    let fold = data.fold(fold)?;
    let dir = cfg.model_dir();
    train_fold(cfg, &data, &fold, &dir, "")?;
    Ok(dir.join(CHECKPOINT))
}

/// Refuses test windows that touch any span the model was trained on.
pub fn check_leakage(test: &WindowSet, spans: &[Span]) -> Result<()> {
    for s in &test.samples {
        if let Some(span) = spans.iter().find(|sp| sp.touches(s.start_time, s.end_time)) {
            return Err(CliError::Leakage {
                start: s.start_time,
                end: s.end_time,
                train_start: span.start,
                train_end: span.end,
            });
        }
    }
    Ok(())
}

fn check_registry(model: &AnyModel, data: &Dataset) -> Result<()> {
    let names = data.household.appliance_names();
    if model.appliances() != names.as_slice() {
        return Err(CliError::RegistryMismatch {
            checkpoint: model.appliances().to_vec(),
            dataset: names,
        });
    }
    Ok(())
}

/// Writes metric tables and plots for one evaluated fold into `dir`.
fn write_evaluation(ev: &Evaluation, appliances: &[String], dir: &Path) -> Result<()> {
    write_metrics_csv(&ev.rows, dir.join(METRICS))?;
    write_metrics_csv(&summarize_rows(&ev.rows)?, dir.join(SUMMARY))?;
    plots::state_raster(
        &dir.join("states.svg"),
        appliances,
        &ev.true_states,
        ev.predicted_states.as_deref(),
    )?;
    plots::injection_overlay(
        &dir.join("injection.svg"),
        &ev.times,
        &ev.true_injection_w,
        ev.predicted_injection_w.as_deref(),
    )
}

fn test_set(data: &Dataset, fold: &Fold) -> Result<WindowSet> {
    Ok(WindowSet::from_segments(std::slice::from_ref(&fold.test), data.windows.test_plan()?)?)
}

/// Scores a checkpoint on the test block of its fold (or of `fold` under
/// the configured split), next to the checkpoint.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, ckpt: Option<&Path>, fold: Option<usize>) -> Result<Vec<MetricRow>> {
    let ckpt = ckpt.map(Path::to_path_buf).unwrap_or_else(|| cfg.model_dir().join(CHECKPOINT));
    let model = checkpoint::load(&ckpt)?;
    let side = sidecar_path(&ckpt);
    if !side.exists() {
        return Err(CliError::Data(format!(
            "{} is missing; without it training data cannot be ruled out of the test set",
            side.display()
        )));
    }
    let prov: CheckpointProvenance = read_json(&side)?;
    let mut data = Dataset::load(cfg)?;
    check_registry(&model, &data)?;
    if cfg.split.is_none() {
        data.split = prov.split;
    }
    if cfg.windows.is_none() {
        data.windows.test_stride = prov.windows.test_stride;
    }
    data.windows.length = model.window_length();
    let fold = data.fold(fold.unwrap_or(prov.fold))?;
    let test = test_set(&data, &fold)?;
    check_leakage(&test, &prov.train_spans)?;
    let ev = evaluate(&model, &test, &cfg.name, &fold.index.to_string())?;
    let dir = ckpt.parent().unwrap_or(Path::new("."));
    write_evaluation(&ev, model.appliances(), dir)?;
    Ok(ev.rows)
}

fn run_fold(cfg: &ExperimentConfig, data: &Dataset, fold: &Fold, dir: &Path) -> Result<Vec<MetricRow>> {
    let log = format!("[fold {}] ", fold.index);
    let model = train_fold(cfg, data, fold, dir, &log)?;
    let test = test_set(data, fold)?;
    check_leakage(&test, &train_spans(fold))?;
    let ev = evaluate(&model, &test, &cfg.name, &fold.index.to_string())?;
    write_evaluation(&ev, model.appliances(), dir)?;
    Ok(ev.rows)
}

/// Outcome of a cross-validation run that did not complete every fold.
#[derive(Debug)]
pub struct FoldFailure {
    pub fold: usize,
    pub error: CliError,
}

/// Trains and scores every fold, `threads` folds at a time. Fold rows go to
/// `metrics.csv` and mean/std rows to `summary.csv`; if any fold fails the
/// finished folds are written to `partial_results.csv` instead and the
/// first failure (in fold order) is returned.
pub fn crossval(cfg: &ExperimentConfig, threads: usize) -> Result<Vec<MetricRow>> {
    let data = Dataset::load(cfg)?;
    let folds = data.folds()?;
    let dir = cfg.model_dir().join("crossval");
    create_dir(&dir)?;
    for f in [METRICS, SUMMARY, PARTIAL] {
        remove_if_present(&dir.join(f))?;
    }

    let results: Mutex<Vec<Option<Result<Vec<MetricRow>>>>> = Mutex::new((0..folds.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = threads.clamp(1, folds.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(fold) = folds.get(i) else { break };
                let r = run_fold(cfg, &data, fold, &dir.join(format!("fold{i}")));
                if let Err(e) = &r {
                    eprintln!("[fold {i}] failed: {e}");
                }
                results.lock().expect("no worker panics while holding the lock")[i] = Some(r);
            });
        }
    });

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (i, r) in results.into_inner().expect("workers finished").into_iter().enumerate() {
        match r.expect("every fold ran") {
            Ok(r) => rows.extend(r),
            Err(error) => failures.push(FoldFailure { fold: i, error }),
        }
    }
    if let Some(first) = failures.into_iter().next() {
        write_metrics_csv(&rows, dir.join(PARTIAL))?;
        eprintln!("partial results written to {}", dir.join(PARTIAL).display());
        return Err(first.error);
    }
    write_metrics_csv(&rows, dir.join(METRICS))?;
    write_metrics_csv(&summarize_rows(&rows)?, dir.join(SUMMARY))?;
    Ok(rows)
}

/// Metric tables found under `out`: every `<model>/metrics.csv` and
/// `<model>/crossval/metrics.csv`.
pub fn find_metric_tables(out: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let entries = std::fs::read_dir(out).map_err(|e| CliError::io(out, e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    for d in dirs {
        for candidate in [d.join(METRICS), d.join("crossval").join(METRICS)] {
            if candidate.is_file() {
                found.push(candidate);
            }
        }
    }
    Ok(found)
}

/// The model a table belongs to: the directory holding it, skipping a
/// `crossval` level.
fn table_label(path: &Path) -> String {
    let parent = path.parent();
    let dir = match parent.and_then(|p| p.file_name()) {
        Some(n) if n == "crossval" => parent.and_then(Path::parent),
        _ => parent,
    };
    let model = dir.and_then(|d| d.file_name()).map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    if path.parent().and_then(|p| p.file_name()).is_some_and(|n| n == "crossval") {
        format!("{model} (crossval)")
    } else {
        model
    }
}

fn cell(mean: f64, std: f64, digits: usize) -> String {
    if mean.is_nan() {
        "–".into()
    } else {
        format!("{mean:.digits$} ± {std:.digits$}")
    }
}

/// Mean ± std over folds for every table, as Markdown plus a bar chart of
/// macro F1.
pub fn report(tables: &[PathBuf], out: &Path) -> Result<PathBuf> {
    if tables.is_empty() {
        return Err(CliError::Data("no metric tables to report on".into()));
    }
    create_dir(out)?;
    let mut md = String::from(
        "# Results\n\nMean ± standard deviation over folds. Error columns are for the injection estimate.\n\n\
         | model | dataset | appliance | folds | accuracy | recall | precision | F1 | RMSE (norm) | MAE (norm) | RMSE (W) | MAE (W) |\n\
         |---|---|---|---|---|---|---|---|---|---|---|---|\n",
    );
    let mut labels = Vec::new();
    let mut f1_mean = Vec::new();
    let mut f1_std = Vec::new();
    for path in tables {
        let rows: Vec<MetricRow> = read_metrics_csv(path)?
            .into_iter()
            .filter(|r| r.fold != "mean" && r.fold != "std")
            .collect();
        if rows.is_empty() {
            return Err(CliError::Data(format!("{} has no fold rows", path.display())));
        }
        let label = table_label(path);
        let summary = summarize_rows(&rows)?;
        for pair in summary.chunks(2) {
            let (m, s) = (&pair[0], &pair[1]);
            let folds = rows
                .iter()
                .filter(|r| r.dataset == m.dataset && r.appliance == m.appliance)
                .count();
            md.push_str(&format!(
                "| {label} | {} | {} | {folds} | {} | {} | {} | {} | {} | {} | {} | {} |\n",
                m.dataset,
                m.appliance,
                cell(m.accuracy, s.accuracy, 3),
                cell(m.recall, s.recall, 3),
                cell(m.precision, s.precision, 3),
                cell(m.f1, s.f1, 3),
                cell(m.rmse_norm, s.rmse_norm, 4),
                cell(m.mae_norm, s.mae_norm, 4),
                cell(m.rmse_watts, s.rmse_watts, 1),
                cell(m.mae_watts, s.mae_watts, 1),
            ));
            if m.appliance == "macro" {
                labels.push(if tables.len() > 1 { label.clone() } else { m.dataset.clone() });
                f1_mean.push(m.f1);
                f1_std.push(s.f1);
            }
        }
    }
    md.push_str("\n![macro F1](report.svg)\n\nSources:\n\n");
    for p in tables {
        md.push_str(&format!("- `{}`\n", p.display()));
    }
    plots::bar_chart(&out.join("report.svg"), "macro F1 (mean ± std)", &labels, &f1_mean, &f1_std)?;
    let path = out.join("report.md");
    std::fs::write(&path, md).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_skip_the_crossval_level() {
        assert_eq!(table_label(Path::new("/o/fhmm/metrics.csv")), "fhmm");
        assert_eq!(table_label(Path::new("/o/dualnilm/crossval/metrics.csv")), "dualnilm (crossval)");
    }
}
