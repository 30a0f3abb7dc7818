//! Command-line entry points. Every command loads a [`RunConfig`], stamps
//! its digest into the artifacts it writes, and maps failures onto the
//! stable exit-code contract in [`crate::error::exit`].

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::config::RunConfig;
use crate::dataset::{generate_synthetic, partition_pool, Dataset, PartFeatureSet};
use crate::error::{exit, Error, Result};
use crate::graph::{auto_delta, build_topology, edge_weights, row_normalize};
use crate::model::{init_params, DeltaPolicy};
use crate::optim::{class_labels, grad_check, train, TrainHistory};
use crate::phgf::{read_phgf, write_phgf_with_digest};
use crate::retrieval::{evaluate, Variant};
use crate::rng::Xoshiro256StarStar;

/// Gradient-check pass threshold on the maximum relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "phgcn",
    version,
    about = "Hierarchical part-graph feature learning: synthetic data, training, \
             retrieval evaluation, and diagnostics",
    after_help = "Defaults follow the reference setup: partition levels [1, 3, 6], \
                  eps 0.75, beta 0.3, GCN rate 0.01, head rate 1.0 decaying 10x at \
                  epoch 40, 60 epochs, batch 64."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VariantArg {
    Phgcn,
    Pgcn,
    Nogcn,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Variant {
        match v {
            VariantArg::Phgcn => Variant::Phgcn,
            VariantArg::Pgcn => Variant::Pgcn,
            VariantArg::Nogcn => Variant::Nogcn,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SweepParam {
    Eps,
    Beta,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write it as PHGF plus split/meta files.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset's train split and write a PHGM checkpoint plus
    /// a training-history JSON.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset's query/gallery splits; the
    /// report JSON goes to stdout and to --out.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// phgcn = full graph, pgcn = finest level only, nogcn = appearance only.
        #[arg(long, value_enum)]
        variant: VariantArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check analytic gradients against central finite differences (64-bit).
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        /// Finite-difference step.
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
    /// Train and evaluate across a grid of eps or beta values; emits CSV.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        param: SweepParam,
        /// Comma-separated grid values.
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<f64>,
        /// Dataset to use; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also write the CSV here (it always goes to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump one image's part graph (nodes, weighted edges, row-normalized
    /// adjacency) as JSON.
    GraphDump {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Zero-based image index.
        #[arg(long)]
        image: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parse arguments and run; returns the process exit code.
pub fn run() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Gen { config, out } => cmd_gen(&config, &out),
        Command::Train { config, data, out } => cmd_train(&config, &data, &out),
        Command::Eval {
            checkpoint,
            data,
            variant,
            out,
        } => cmd_eval(&checkpoint, &data, variant.into(), &out),
        Command::Gradcheck { config, step } => cmd_gradcheck(&config, step),
        Command::Sweep {
            config,
            param,
            grid,
            data,
            out,
        } => cmd_sweep(&config, param, &grid, data.as_deref(), out.as_deref()),
        Command::GraphDump {
            config,
            data,
            image,
            out,
        } => cmd_graphdump(&config, &data, image, out.as_deref()),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            let mut source = std::error::Error::source(&err);
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            ExitCode::from(err.exit_code())
        }
    }
}

fn cmd_gen(config_path: &Path, out: &Path) -> Result<u8> {
    let config = RunConfig::from_file(config_path)?;
    let dataset = generate_synthetic(&config.synth_config())?;
    write_phgf_with_digest(&dataset, out, Some(&config.digest()))?;
    println!(
        "wrote {} images ({} train / {} query / {} gallery) to {}",
        dataset.images.len(),
        dataset.split.train.len(),
        dataset.split.query.len(),
        dataset.split.gallery.len(),
        out.display()
    );
    Ok(exit::SUCCESS)
}

/// Training-history artifact: the per-epoch records plus run provenance.
#[derive(Serialize)]
struct HistoryFile<'a> {
    config_digest: &'a str,
    seed: u64,
    #[serde(flatten)]
    history: &'a TrainHistory,
}

fn cmd_train(config_path: &Path, data: &Path, out: &Path) -> Result<u8> {
    let config = RunConfig::from_file(config_path)?;
    let digest = config.digest();
    let dataset = read_phgf(data)?;
    let spec = config.partition_spec()?;
    let train_cfg = config.train_config();
    let (params, history) = train(&dataset, &spec, &config.model, &train_cfg)?;

    let meta = CheckpointMeta {
        eps: config.model.eps,
        beta: config.model.beta,
        delta: config.model.delta,
        levels: spec.levels().to_vec(),
        num_classes: class_labels(&dataset).len(),
        seed: config.seed,
        config_digest: digest.clone(),
    };
    save_checkpoint(out, &params, &meta)?;

    let history_path = out.with_extension("history.json");
    let history_json = serde_json::to_string_pretty(&HistoryFile {
        config_digest: &digest,
        seed: config.seed,
        history: &history,
    })
    .expect("history serializes");
    std::fs::write(&history_path, history_json).map_err(|e| Error::io(&history_path, e))?;

    if let Some(last) = history.loss.last() {
        println!(
            "trained {} epochs, final loss {last:.6}, accuracy {:.3}; checkpoint {}",
            history.loss.len(),
            history.accuracy.last().copied().unwrap_or(0.0),
            out.display()
        );
    } else {
        println!("trained 0 epochs; checkpoint {}", out.display());
    }
    Ok(exit::SUCCESS)
}

fn cmd_eval(checkpoint: &Path, data: &Path, variant: Variant, out: &Path) -> Result<u8> {
    let (params, meta) = load_checkpoint(checkpoint)?;
    let dataset = read_phgf(data)?;
    let spec = crate::dataset::PartitionSpec::new(meta.levels.clone())?;
    let report = evaluate(
        &dataset,
        &spec,
        &params,
        &meta.delta,
        variant,
        meta.seed,
        &meta.config_digest,
    )?;
    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');
    std::fs::write(out, &json).map_err(|e| Error::io(out, e))?;
    print!("{json}");
    Ok(exit::SUCCESS)
}

fn cmd_gradcheck(config_path: &Path, step: f64) -> Result<u8> {
    let config = RunConfig::from_file(config_path)?;
    if step <= 0.0 || step.is_nan() || step.is_infinite() {
        return Err(Error::Config(format!(
            "gradcheck step must be positive and finite, got {step}"
        )));
    }
    let spec = config.partition_spec()?;
    let topo = build_topology(&spec);
    let dim = config.synth.dim;
    let classes = config.synth.n_identities;

    // Random instance, always in 64-bit arithmetic.
    let mut rng = Xoshiro256StarStar::from_seed(config.gradcheck_seed());
    let n = topo.num_nodes();
    let data: Vec<f64> = (0..n * dim).map(|_| rng.next_normal()).collect();
    let x = PartFeatureSet {
        features: Array2::from_shape_vec((n, dim), data).expect("shape matches"),
        parts: topo.nodes().to_vec(),
    };
    let label = rng.next_below(classes as u64) as usize;
    let params_seed = rng.next_u64();
    let probe_seed = rng.next_u64();

    let delta = match config.model.delta {
        DeltaPolicy::Auto => auto_delta(&x, &topo)?,
        DeltaPolicy::Fixed(d) => d,
    };
    let a_norm = row_normalize(&edge_weights(&x, &topo, delta)?);
    let params = init_params::<f64>(dim, classes, n, &config.model, params_seed)?;

    let report = grad_check(&params, &x, &a_norm, label, step, probe_seed)?;
    println!("{report}");
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("report serializes")
    );
    if report.max_rel_err <= GRADCHECK_TOLERANCE {
        Ok(exit::SUCCESS)
    } else {
        Ok(exit::CHECK_FAILED)
    }
}

fn cmd_sweep(
    config_path: &Path,
    param: SweepParam,
    grid: &[f64],
    data: Option<&Path>,
    out: Option<&Path>,
) -> Result<u8> {
    let config = RunConfig::from_file(config_path)?;
    let digest = config.digest();
    for &value in grid {
        match param {
            SweepParam::Eps => {
                if !(value > 0.0 && value < 1.0) {
                    return Err(Error::Config(format!(
                        "eps grid value {value} outside the open interval (0, 1)"
                    )));
                }
            }
            SweepParam::Beta => {
                if !value.is_finite() || value < 0.0 {
                    return Err(Error::Config(format!(
                        "beta grid value {value} must be finite and nonnegative"
                    )));
                }
            }
        }
    }
    let dataset = match data {
        Some(path) => read_phgf(path)?,
        None => generate_synthetic(&config.synth_config())?,
    };
    let spec = config.partition_spec()?;

    let mut csv = String::new();
    csv.push_str(&format!("# config_digest={digest}\n"));
    csv.push_str("param_value,map,cmc1,cmc5,cmc10,seed\n");
    for &value in grid {
        let mut point = config.clone();
        match param {
            SweepParam::Eps => point.model.eps = value,
            SweepParam::Beta => point.model.beta = value,
        }
        let (params, _) = train(&dataset, &spec, &point.model, &point.train_config())?;
        let report = evaluate(
            &dataset,
            &spec,
            &params,
            &point.model.delta,
            point.variant,
            point.seed,
            &digest,
        )?;
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            value, report.map, report.cmc.rank1, report.cmc.rank5, report.cmc.rank10, point.seed
        ));
    }
    print!("{csv}");
    if let Some(path) = out {
        std::fs::write(path, &csv).map_err(|e| Error::io(path, e))?;
    }
    Ok(exit::SUCCESS)
}

#[derive(Serialize)]
struct DumpNode {
    level: usize,
    index: usize,
}

#[derive(Serialize)]
struct DumpEdge {
    a: usize,
    b: usize,
    weight: f64,
}

#[derive(Serialize)]
struct GraphDump {
    nodes: Vec<DumpNode>,
    edges: Vec<DumpEdge>,
    row_normalized: Vec<Vec<f64>>,
    config_digest: String,
}

fn cmd_graphdump(
    config_path: &Path,
    data: &Path,
    image: usize,
    out: Option<&Path>,
) -> Result<u8> {
    let config = RunConfig::from_file(config_path)?;
    let dataset = read_phgf(data)?;
    if image >= dataset.images.len() {
        return Err(Error::Config(format!(
            "image index {image} out of range for {} images",
            dataset.images.len()
        )));
    }
    let spec = config.partition_spec()?;
    let topo = build_topology(&spec);
    let x = partition_pool::<f64>(&dataset.images[image], &spec)?;
    let delta = match config.model.delta {
        DeltaPolicy::Auto => auto_delta(&x, &topo)?,
        DeltaPolicy::Fixed(d) => d,
    };
    let adj = edge_weights(&x, &topo, delta)?;
    let norm = row_normalize(&adj);

    let dump = GraphDump {
        // Levels are reported 1-based, coarsest first, matching the
        // layered-graph reading; part indices are 0-based within a level.
        nodes: topo
            .nodes()
            .iter()
            .map(|p| DumpNode {
                level: p.level + 1,
                index: p.part,
            })
            .collect(),
        edges: topo
            .edges()
            .iter()
            .map(|&(a, b)| DumpEdge {
                a,
                b,
                weight: adj.matrix()[(a, b)],
            })
            .collect(),
        row_normalized: norm
            .matrix()
            .rows()
            .into_iter()
            .map(|r| r.to_vec())
            .collect(),
        config_digest: config.digest(),
    };
    let mut json = serde_json::to_string_pretty(&dump).expect("dump serializes");
    json.push('\n');
    print!("{json}");
    if let Some(path) = out {
        std::fs::write(path, &json).map_err(|e| Error::io(path, e))?;
    }
    Ok(exit::SUCCESS)
}

/// Convenience for tests: a dataset generated straight from a config.
pub fn dataset_from_config(config: &RunConfig) -> Result<Dataset> {
    generate_synthetic(&config.synth_config())
}
