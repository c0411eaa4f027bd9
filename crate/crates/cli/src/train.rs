use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use fibrae::data_io::{write_atomic, DataSource, ModelArchive, RunConfig, SyntheticSpec};
use fibrae::geodesic::SolverConfig;
use fibrae::nn::init_model;
use fibrae::training::{train, AdversarialMode, Objective, TrainConfig};

use crate::{CmdResult, Failure};

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    TwoRate,
    Grl,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON run config; explicit flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV dataset with one condition column and numeric features.
    #[arg(long, conflicts_with_all = ["idx_images", "synthetic"])]
    csv: Option<PathBuf>,
    #[arg(long, requires = "csv")]
    condition_column: Option<String>,
    /// IDX image file (labels are the conditions).
    #[arg(long, requires = "idx_labels", conflicts_with = "synthetic")]
    idx_images: Option<PathBuf>,
    #[arg(long, requires = "idx_images")]
    idx_labels: Option<PathBuf>,
    /// Synthetic clusters as `K,PER_CONDITION,DIM`.
    #[arg(long, value_parser = parse_synthetic)]
    synthetic: Option<(usize, usize, usize)>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    fiber_dim: Option<usize>,
    #[arg(long)]
    base_dim: Option<usize>,
    #[arg(long, value_enum)]
    adversarial_mode: Option<ModeArg>,
    /// Skip the condition-adversarial objective.
    #[arg(long)]
    no_adversarial: bool,
    /// Skip the condition-fitting objective.
    #[arg(long)]
    no_condition_fitting: bool,
    /// Skip the GAN objective.
    #[arg(long)]
    no_gan: bool,
    /// Directory for `model.fae`, `losses.csv` and `config.json`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

fn parse_synthetic(s: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let nums: Result<Vec<usize>, _> = parts.iter().map(|p| p.parse::<usize>()).collect();
    match nums {
        Ok(v) if v.len() == 3 => Ok((v[0], v[1], v[2])),
        _ => Err(format!("expected K,PER_CONDITION,DIM, got '{s}'")),
    }
}

fn resolve(args: &TrainArgs) -> Result<(RunConfig, PathBuf), Failure> {
    let flag_data = if let Some(path) = &args.csv {
        let column = args
            .condition_column
            .clone()
            .ok_or_else(|| Failure::Usage("--csv needs --condition-column".into()))?;
        Some(DataSource::Csv {
            path: path.clone(),
            condition_column: column,
        })
    } else if let (Some(images), Some(labels)) = (&args.idx_images, &args.idx_labels) {
        Some(DataSource::Idx {
            images: images.clone(),
            labels: labels.clone(),
        })
    } else {
        args.synthetic.map(|(k, per, d)| {
            DataSource::Synthetic(SyntheticSpec::new(k, per, d, args.seed.unwrap_or(0)))
        })
    };

    // Paths inside a config file are relative to the file; flag paths to the
    // working directory.
    let (mut config, mut base) = match &args.config {
        Some(path) => {
            let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
            (RunConfig::load(path)?, base)
        }
        None => {
            let data = flag_data
                .clone()
                .ok_or_else(|| Failure::Usage("no dataset: pass --config, --csv, --idx-images or --synthetic".into()))?;
            let config = RunConfig {
                seed: 0,
                data,
                architecture: Default::default(),
                train: TrainConfig::default(),
                solver: SolverConfig::default(),
                output_dir: PathBuf::from("fibrae-out"),
            };
            (config, PathBuf::new())
        }
    };
    if let (Some(data), Some(_)) = (flag_data, &args.config) {
        config.data = data;
        base = PathBuf::new();
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.epochs {
        config.train.epochs = v;
    }
    if let Some(v) = args.batch_size {
        config.train.batch_size = v;
    }
    if let Some(v) = args.fiber_dim {
        config.architecture.fiber_dim = v;
    }
    if let Some(v) = args.base_dim {
        config.architecture.base_dim = v;
    }
    if let Some(v) = args.adversarial_mode {
        config.train.adversarial_mode = match v {
            ModeArg::TwoRate => AdversarialMode::TwoRate,
            ModeArg::Grl => AdversarialMode::Grl,
        };
    }
    if args.no_adversarial {
        config.train.adversarial = false;
    }
    if args.no_condition_fitting {
        config.train.condition_fitting = false;
    }
    if args.no_gan {
        config.train.gan = false;
    }
    if let Some(dir) = &args.output_dir {
        config.output_dir = dir.clone();
    } else if args.config.is_some() && config.output_dir.is_relative() {
        config.output_dir = base.join(&config.output_dir);
    }
    config.train.seed = config.seed;
    config.validate()?;
    Ok((config, base))
}

pub fn run(args: TrainArgs) -> CmdResult {
    let (config, base) = resolve(&args)?;
    let data = config.data.load(&base)?;
    log::info!(
        "dataset: {} samples, D = {}, K = {}",
        data.len(),
        data.dim(),
        data.k
    );
    let arch = config.architecture.build(data.dim(), data.k);
    let mut model = init_model(&arch, config.seed)?;
    let report = train(&mut model, &data, &config.train)?;

    let dir = &config.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| Failure::Usage(format!("{}: {e}", dir.display())))?;
    let archive = ModelArchive {
        model,
        condition_names: data.condition_names.clone(),
        ranges: data.ranges.clone(),
    };
    let bytes = fibrae::data_io::write_model(&archive)?;
    write_atomic(&dir.join("model.fae"), &bytes)?;
    write_atomic(&dir.join("losses.csv"), report.to_csv().as_bytes())?;
    write_atomic(&dir.join("config.json"), config.to_json()?.as_bytes())?;

    if let Some((epoch, mse)) = report.epoch_means(Objective::Reconstruction).last() {
        println!("epoch {epoch}: reconstruction {mse:.6}");
    }
    println!("wrote {}", dir.join("model.fae").display());
    Ok(())
}
