use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use pseudo3d::analysis::{cost_table, measure_timings, CostReport, DepthReduction, StructureFeatures};
use pseudo3d::data::io::{labels_path_for, load_dir, load_labels, load_volume};
use pseudo3d::data::{make_folds, LabeledVolume};
use pseudo3d::experiment::{aggregate_dir, load_source, run_grid, write_slice, ExperimentConfig};
use pseudo3d::models::Model;
use pseudo3d::training::samples_for;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(version, about = "Slice-stack segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every grid cell, then write the aggregate table.
    Run {
        config: PathBuf,
    },
    /// Rebuild the aggregate table of an output directory.
    Aggregate {
        dir: PathBuf,
    },
    /// Cost report for every grid cell, without training.
    Profile {
        config: PathBuf,
        /// Training steps and predictions timed per cell; 0 skips timing.
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Structure depth, size and displacement of a directory of volumes.
    Features {
        dir: PathBuf,
        /// Use the index-sum depth denominator instead of the region mean.
        #[arg(long)]
        printed_depth: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write one axial slice as a PPM with the labels overlaid.
    Render {
        volume: PathBuf,
        slice: usize,
        out: PathBuf,
        /// Label file to overlay instead of the volume's own, e.g. a prediction.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
}

/// Class count taken from the largest label present.
fn with_inferred_classes(mut volumes: Vec<LabeledVolume>) -> Vec<LabeledVolume> {
    let k = volumes
        .iter()
        .flat_map(|v| v.labels.iter().copied())
        .max()
        .map_or(1, |m| m as usize + 1)
        .max(2);
    for v in &mut volumes {
        v.num_classes = k;
    }
    volumes
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn profile(config: &ExperimentConfig, repeats: usize) -> Result<String> {
    let volumes = load_source(config)?;
    let first = &volumes[0];
    let plane = [first.dims[1], first.dims[2]];
    let train = make_folds(volumes.len(), config.folds, config.seed)?.remove(0).train;
    let mut reports = Vec::new();
    for spec in config.grid.cells(first.channels, first.num_classes) {
        let model = Model::new(&spec, config.seed)?;
        let mut report = CostReport::measure(&model, plane)?;
        if repeats > 0 {
            let per_epoch: usize = train
                .iter()
                .map(|&i| samples_for(&spec, &volumes[i]).map(|s| s.len()))
                .sum::<pseudo3d::Result<_>>()?;
            let (epoch, predict) = measure_timings(&model, plane, &config.train, per_epoch, repeats)?;
            report.epoch_seconds = Some(epoch);
            report.predict_seconds_per_sample = Some(predict);
        }
        eprintln!("{}: {} parameters", report.label, report.parameter_count);
        reports.push(report);
    }
    Ok(cost_table(&reports))
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let summary = run_grid(&cfg, &mut |line| eprintln!("{line}"))?;
            eprintln!(
                "{} trained, {} resumed; aggregate table at {}",
                summary.trained,
                summary.skipped,
                summary.aggregate_path.display()
            );
            print!("{}", std::fs::read_to_string(&summary.aggregate_path)?);
        }
        Command::Aggregate { dir } => print!("{}", aggregate_dir(&dir)?),
        Command::Profile { config, repeats, out } => {
            let cfg = ExperimentConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            emit(&profile(&cfg, repeats)?, out.as_deref())?;
        }
        Command::Features { dir, printed_depth, out } => {
            let volumes = with_inferred_classes(load_dir(&dir, 256)?);
            if volumes.is_empty() {
                bail!("no volumes in {}", dir.display());
            }
            let reduction = if printed_depth {
                DepthReduction::PrintedIndexSum
            } else {
                DepthReduction::RegionMean
            };
            emit(&StructureFeatures::extract(&volumes, reduction)?.to_csv(), out.as_deref())?;
        }
        Command::Render { volume, slice, out, labels } => {
            if labels_path_for(&volume).is_none() {
                bail!("{} is not an image file", volume.display());
            }
            let vol = load_volume(&volume, 256)?;
            let overlay = match labels {
                Some(p) => {
                    let (dims, l) = load_labels(&p)?;
                    if dims != vol.dims {
                        bail!("label extents {dims:?} differ from image extents {:?}", vol.dims);
                    }
                    Some(l)
                }
                None => None,
            };
            write_slice(&vol, overlay.as_deref(), slice, &out)?;
        }
    }
    Ok(())
}
