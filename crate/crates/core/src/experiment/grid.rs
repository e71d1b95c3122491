//! Cell-by-fold training with resumable completion markers.

use super::config::{ExperimentConfig, Normalization, Source};
use crate::analysis::{aggregate_results, aggregate_table, CellKey, CostReport, RunRecord, COST_HEADER};
use crate::data::io::load_dir;
use crate::data::{generate_set, make_folds, normalize_ct, normalize_zscore, LabeledVolume, PhantomSpec};
use crate::error::{Error, Result};
use crate::models::{Model, ModelSpec};
use crate::training::{evaluate, run_training, samples_for, SampleValidation, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const CONFIG_FILE: &str = "config.toml";
pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const RESULT_FILE: &str = "result.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const COST_FILE: &str = "cost.csv";
pub const MARKER_FILE: &str = "done";

/// Volumes named by the config, normalised as requested.
pub fn load_source(config: &ExperimentConfig) -> Result<Vec<LabeledVolume>> {
    match &config.source {
        Source::Phantom(p) => {
            let spec = PhantomSpec::preset(p.preset, p.dims, config.seed);
            Ok(generate_set(&spec, p.count)?.into_iter().map(|(v, _)| v).collect())
        }
        Source::Volumes(v) => {
            let mut volumes = load_dir(&v.path, v.num_classes)?;
            for vol in &mut volumes {
                match v.normalize {
                    Normalization::None => {}
                    Normalization::Ct => vol.map_channels(|c| Ok(normalize_ct(c)))?,
                    Normalization::Zscore => vol.map_channels(normalize_zscore)?,
                }
            }
            Ok(volumes)
        }
    }
}

/// SHA-256 over ids, shapes, image bits and labels.
pub fn fingerprint(volumes: &[LabeledVolume]) -> String {
    let mut h = Sha256::new();
    for v in volumes {
        h.update(v.id.as_bytes());
        h.update([0]);
        for e in [v.channels, v.dims[0], v.dims[1], v.dims[2], v.num_classes] {
            h.update((e as u64).to_le_bytes());
        }
        for x in &v.image {
            h.update(x.to_bits().to_le_bytes());
        }
        h.update(&v.labels);
    }
    hex::encode(h.finalize())
}

#[derive(Serialize)]
struct MarkerInput<'a> {
    spec: &'a ModelSpec,
    train: &'a TrainConfig,
    fold: usize,
    test: &'a [usize],
    val: &'a [usize],
    data: &'a str,
}

fn marker_hash(input: &MarkerInput<'_>) -> Result<String> {
    let json = serde_json::to_vec(input).map_err(|e| Error::Format(e.to_string()))?;
    Ok(hex::encode(Sha256::digest(json)))
}

/// What one cell on one fold produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub record: RunRecord,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub per_volume: Vec<(String, Vec<f64>)>,
}

pub fn cell_dir(output: &Path, spec: &ModelSpec, fold: usize) -> PathBuf {
    output.join("cells").join(spec.label()).join(format!("fold-{fold}"))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GridSummary {
    pub records: Vec<RunRecord>,
    pub trained: usize,
    pub skipped: usize,
    pub aggregate_path: PathBuf,
}

fn gather<'a>(volumes: &'a [LabeledVolume], idx: &[usize]) -> Vec<&'a LabeledVolume> {
    idx.iter().map(|&i| &volumes[i]).collect()
}

fn samples(spec: &ModelSpec, volumes: &[&LabeledVolume]) -> Result<Vec<crate::data::SliceStackSample>> {
    let mut out = Vec::new();
    for v in volumes {
        out.extend(samples_for(spec, v)?);
    }
    Ok(out)
}

fn train_cell(
    spec: &ModelSpec,
    fold: usize,
    seed: u64,
    train_cfg: &TrainConfig,
    train: &[&LabeledVolume],
    val: &[&LabeledVolume],
    test: &[LabeledVolume],
    dir: &Path,
) -> Result<CellResult> {
    let mut model = Model::new(spec, seed ^ fold as u64)?;
    let train_samples = samples(spec, train)?;
    let val_samples = samples(spec, val)?;
    let mut validation = SampleValidation {
        samples: &val_samples,
        config: train_cfg,
    };
    let started = Instant::now();
    let history = run_training(&mut model, &train_samples, &mut validation, train_cfg, None)?;
    let epoch_seconds = started.elapsed().as_secs_f64() / history.epochs.len().max(1) as f64;
    let bs = train_cfg.batch_size_for(&model);
    let started = Instant::now();
    let report = evaluate(&model, test, bs)?;
    let predicted: usize = test.iter().map(|v| samples_for(spec, v).map(|s| s.len())).sum::<Result<usize>>()?;
    let predict_seconds = started.elapsed().as_secs_f64() / predicted.max(1) as f64;

    let plane = [test[0].dims[1], test[0].dims[2]];
    let mut cost = CostReport::measure(&model, plane)?;
    cost.epoch_seconds = Some(epoch_seconds);
    cost.predict_seconds_per_sample = Some(predict_seconds);
    fs::write(dir.join(HISTORY_FILE), history.to_lines())?;
    fs::write(dir.join(COST_FILE), format!("{COST_HEADER}\n{}\n", cost.csv_row()))?;
    Ok(CellResult {
        record: RunRecord {
            cell: CellKey {
                mode: spec.mode,
                backbone: spec.backbone,
                depth: spec.depth,
            },
            fold,
            class_dice: report.class_dice,
            mean_dsc: report.mean_foreground,
        },
        best_epoch: history.best_epoch,
        epochs_run: history.epochs.len(),
        per_volume: report.per_volume,
    })
}

fn read_result(dir: &Path) -> Result<CellResult> {
    let text = fs::read_to_string(dir.join(RESULT_FILE))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", dir.display())))
}

/// Trains and evaluates every cell on every fold, skipping cells whose
/// marker matches, then writes the aggregate table. `progress` receives one
/// line per cell and fold.
pub fn run_grid(config: &ExperimentConfig, progress: &mut dyn FnMut(&str)) -> Result<GridSummary> {
    config.validate()?;
    let volumes = load_source(config)?;
    let first = volumes
        .first()
        .ok_or_else(|| Error::EmptySplit("data source holds no volumes".into()))?;
    let (channels, classes) = (first.channels, first.num_classes);
    let data = fingerprint(&volumes);
    let folds = make_folds(volumes.len(), config.folds, config.seed)?;
    let cells = config.grid.cells(channels, classes);
    for spec in &cells {
        spec.validate()?;
    }
    let out = &config.output_dir;
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_FILE), config.to_toml()?)?;

    let mut summary = GridSummary::default();
    for spec in &cells {
        for (k, fold) in folds.iter().enumerate() {
            let dir = cell_dir(out, spec, k);
            let hash = marker_hash(&MarkerInput {
                spec,
                train: &config.train,
                fold: k,
                test: &fold.test,
                val: &fold.val,
                data: &data,
            })?;
            let marker = dir.join(MARKER_FILE);
            if fs::read_to_string(&marker).is_ok_and(|m| m.trim() == hash) {
                summary.records.push(read_result(&dir)?.record);
                summary.skipped += 1;
                progress(&format!("{} fold {k}: done, skipped", spec.label()));
                continue;
            }
            fs::create_dir_all(&dir)?;
            let _ = fs::remove_file(&marker);
            let test: Vec<LabeledVolume> = fold.test.iter().map(|&i| volumes[i].clone()).collect();
            let result = train_cell(
                spec,
                k,
                config.seed,
                &config.train,
                &gather(&volumes, &fold.train),
                &gather(&volumes, &fold.val),
                &test,
                &dir,
            )?;
            let json = serde_json::to_string_pretty(&result).map_err(|e| Error::Format(e.to_string()))?;
            fs::write(dir.join(RESULT_FILE), json)?;
            fs::write(&marker, &hash)?;
            progress(&format!(
                "{} fold {k}: dsc {:.4} after {} epochs",
                spec.label(),
                result.record.mean_dsc,
                result.epochs_run
            ));
            summary.records.push(result.record);
            summary.trained += 1;
        }
    }
    let expected: Vec<CellKey> = cells
        .iter()
        .map(|s| CellKey {
            mode: s.mode,
            backbone: s.backbone,
            depth: s.depth,
        })
        .collect();
    let rows = aggregate_results(&expected, &summary.records)?;
    summary.aggregate_path = out.join(AGGREGATE_FILE);
    fs::write(&summary.aggregate_path, aggregate_table(&rows))?;
    Ok(summary)
}

fn find_results(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_results(&p, found)?;
        } else if p.file_name().is_some_and(|n| n == RESULT_FILE) {
            found.push(p);
        }
    }
    Ok(())
}

/// Rebuilds the aggregate table of an output directory from its result
/// files. Cells come from the saved config when present (so a missing cell
/// is an error), otherwise from the results found.
pub fn aggregate_dir(dir: &Path) -> Result<String> {
    let mut paths = Vec::new();
    find_results(dir, &mut paths)?;
    let records: Vec<RunRecord> = paths
        .iter()
        .map(|p| read_result(p.parent().expect("result file has a parent")).map(|r| r.record))
        .collect::<Result<_>>()?;
    let config_path = dir.join(CONFIG_FILE);
    let expected: Vec<CellKey> = if config_path.exists() {
        ExperimentConfig::load(&config_path)?
            .grid
            .cells(1, 2)
            .iter()
            .map(|s| CellKey {
                mode: s.mode,
                backbone: s.backbone,
                depth: s.depth,
            })
            .collect()
    } else {
        let mut keys: Vec<CellKey> = records.iter().map(|r| r.cell).collect();
        keys.sort();
        keys.dedup();
        keys
    };
    if expected.is_empty() {
        return Err(Error::MissingCell(format!("no results under {}", dir.display())));
    }
    let table = aggregate_table(&aggregate_results(&expected, &records)?);
    fs::write(dir.join(AGGREGATE_FILE), &table)?;
    Ok(table)
}
