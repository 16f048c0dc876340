//! Command surface of the scene parser: dataset synthesis, training, prediction,
//! evaluation, ablation, seed studies and visualization.

mod config;
pub mod viz;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use deconvparse::data::{
    class_name, generate_synthetic_scenes, load_split, read_ppm, read_tensor_file, save_split,
    write_gray_pgm, write_label_pgm, write_ppm, SceneSample,
};
use deconvparse::metrics::MetricsReport;
use deconvparse::network::{
    build_and_train, evaluate, load_model, predict, prepare_dataset, run_ablation, run_seed_study,
    save_model, seed_list, summarize, AblationRecord, Network, SeedStudy, TrainingLog,
};
use deconvparse::rng::derive_seed;
use deconvparse::Tensor;

pub use config::{parse_config, RunConfig, RUN_KEYS};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("command {command} needs config key {key}")]
    MissingKey { key: &'static str, command: &'static str },
    #[error("unknown command {0:?}")]
    UnknownCommand(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Core(#[from] deconvparse::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Synth,
    Train,
    Predict,
    Eval,
    Ablate,
    Seedstudy,
    VizFilters,
    VizHeatmap,
}

impl Command {
    pub const ALL: [Command; 8] = [
        Command::Synth,
        Command::Train,
        Command::Predict,
        Command::Eval,
        Command::Ablate,
        Command::Seedstudy,
        Command::VizFilters,
        Command::VizHeatmap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Train => "train",
            Command::Predict => "predict",
            Command::Eval => "eval",
            Command::Ablate => "ablate",
            Command::Seedstudy => "seedstudy",
            Command::VizFilters => "viz-filters",
            Command::VizHeatmap => "viz-heatmap",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| CliError::UnknownCommand(s.to_string()))
    }
}

/// Sizes the global worker pool from `DECONVPARSE_THREADS`, if set.
pub fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("DECONVPARSE_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| CliError::Dataset(format!("DECONVPARSE_THREADS={v:?} is not a count")))?;
        // a pool that is already built keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn dataset_root(cfg: &RunConfig, out: &Path) -> PathBuf {
    cfg.dataset_dir.clone().unwrap_or_else(|| out.join("dataset"))
}

fn model_path(cfg: &RunConfig, out: &Path) -> PathBuf {
    cfg.model.clone().unwrap_or_else(|| out.join("model.dpm"))
}

fn synthesize(cfg: &RunConfig, root: &Path) -> Result<()> {
    let n = &cfg.network;
    if n.input_height != n.input_width || n.input_channels != 3 {
        return Err(CliError::Dataset(format!(
            "synthetic scenes are square RGB; config asks for {}x{}x{}",
            n.input_channels, n.input_height, n.input_width
        )));
    }
    for (split, count, tag) in [("train", cfg.train_samples, 0), ("test", cfg.test_samples, 1)] {
        let (samples, manifest) =
            generate_synthetic_scenes(count, n.classes, n.input_height, derive_seed(cfg.data_seed, &[tag]))?;
        save_split(&root.join(split), &samples, &manifest)?;
    }
    Ok(())
}

/// Raw train and test splits, synthesized on first use.
fn load_dataset(cfg: &RunConfig, out: &Path) -> Result<(Vec<SceneSample>, Vec<SceneSample>)> {
    let root = dataset_root(cfg, out);
    if !root.join("train").join("manifest.txt").exists() {
        synthesize(cfg, &root)?;
    }
    let (train, mt) = load_split(&root.join("train"))?;
    let (test, _) = load_split(&root.join("test"))?;
    if mt.classes() != cfg.network.classes {
        return Err(CliError::Dataset(format!(
            "dataset has {} classes, config has {}",
            mt.classes(),
            cfg.network.classes
        )));
    }
    Ok((train, test))
}

fn write_lines(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<PathBuf> {
    let mut text = format!("{header}\n");
    for r in rows {
        text.push_str(&r);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(path.to_path_buf())
}

fn read_image(path: &Path) -> Result<Tensor> {
    Ok(match path.extension().and_then(|e| e.to_str()) {
        Some("dptn") => read_tensor_file(path)?,
        _ => read_ppm(path)?,
    })
}

fn preprocess_for(net: &Network, image: &Tensor) -> Result<Tensor> {
    Ok(match &net.preprocess {
        Some(p) => p.apply(image)?,
        None => image.clone(),
    })
}

/// Training-split statistics applied to both splits.
fn prepared(cfg: &RunConfig, out: &Path) -> Result<(Vec<SceneSample>, Vec<SceneSample>, deconvparse::network::Preprocess)> {
    let (train, test) = load_dataset(cfg, out)?;
    Ok(prepare_dataset(&train, &test, cfg.network.lcn_window)?)
}

fn deconv_rows(log: &TrainingLog) -> Vec<String> {
    log.deconv
        .iter()
        .map(|d| {
            format!(
                "{},{},{:.10},{:.6},{},{}",
                d.layer,
                d.epoch,
                d.mean_cost,
                d.mean_nnz_fraction,
                d.cg_iterations,
                d.cg_converged
            )
        })
        .collect()
}

fn ablation_summary(records: &[AblationRecord]) -> Vec<String> {
    let mut variants: Vec<&str> = Vec::new();
    for r in records {
        if !variants.contains(&r.variant.as_str()) {
            variants.push(&r.variant);
        }
    }
    variants
        .iter()
        .map(|v| {
            let rows: Vec<&AblationRecord> = records.iter().filter(|r| r.variant == *v).collect();
            let px: Vec<f64> = rows.iter().map(|r| r.pixel_acc).collect();
            let class = rows.iter().map(|r| r.class_acc).sum::<f64>() / rows.len() as f64;
            let s = summarize(v, &px);
            let var = if s.runs > 1 { format!("{:.8}", s.variance) } else { String::new() };
            format!("{v},{},{:.8},{var},{class:.8}", s.runs, s.mean)
        })
        .collect()
}

fn seed_summary(study: &SeedStudy) -> Vec<String> {
    study
        .summaries
        .iter()
        .map(|s| format!("{},{},{:.8},{:.8}", s.variant, s.runs, s.mean, s.variance))
        .collect()
}

/// Runs one command with all artifacts under `out`; returns the files written.
pub fn dispatch(command: Command, cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    cfg.require(command)?;
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    match command {
        Command::Synth => {
            let root = dataset_root(cfg, out);
            synthesize(cfg, &root)?;
            written.push(root);
        }
        Command::Train => {
            let (train, test, pre) = prepared(cfg, out)?;
            let mut net = build_and_train(&cfg.network, &train)?;
            net.preprocess = Some(pre);
            let report = evaluate(&net, &test)?;
            let mut extras = BTreeMap::new();
            extras.insert("validation_pixel_acc".to_string(), format!("{:?}", report.pixel_accuracy));
            extras.insert("validation_class_acc".to_string(), format!("{:?}", report.class_accuracy));
            let model = model_path(cfg, out);
            save_model(&model, &net, &extras)?;
            written.push(model);
            written.push(write_lines(&out.join("training.csv"), TrainingLog::CSV_HEADER, net.log.csv_rows())?);
            written.push(write_lines(
                &out.join("deconv_log.csv"),
                "layer,epoch,mean_cost,nnz_fraction,cg_iterations,cg_converged",
                deconv_rows(&net.log),
            )?);
        }
        Command::Eval => {
            let net = load_model(&model_path(cfg, out))?.network;
            let (_, test) = load_dataset(cfg, out)?;
            let test = test
                .iter()
                .map(|s| Ok(SceneSample::new(preprocess_for(&net, &s.image)?, s.labels.clone())?))
                .collect::<Result<Vec<_>>>()?;
            let report = evaluate(&net, &test)?;
            written.push(write_lines(&out.join("metrics.csv"), MetricsReport::CSV_HEADER, [report.csv_row()])?);
        }
        Command::Predict | Command::VizHeatmap => {
            let net = load_model(&model_path(cfg, out))?.network;
            let image = read_image(cfg.image.as_deref().expect("checked by require"))?;
            let (labels, probs) = predict(&net, &preprocess_for(&net, &image)?)?;
            let (h, w) = (labels.height, labels.width);
            if command == Command::Predict {
                let p = out.join("prediction.pgm");
                write_label_pgm(&p, &labels)?;
                written.push(p);
            }
            for c in 0..net.config.classes {
                let p = match command {
                    Command::Predict => out.join(format!("prob_{c}.pgm")),
                    _ => out.join(format!("heatmap_{c}_{}.pgm", class_name(c))),
                };
                write_gray_pgm(&p, h, w, &viz::probability_gray(&probs.data()[c * h * w..(c + 1) * h * w]))?;
                written.push(p);
            }
        }
        Command::Ablate => {
            let (train, test, _) = prepared(cfg, out)?;
            let seeds = seed_list(cfg.network.seed, cfg.ablation_seeds);
            let records = run_ablation(&cfg.network, &train, &test, cfg.ablation_mode, &seeds, &cfg.dataset)?;
            written.push(write_lines(
                &out.join("ablation.csv"),
                AblationRecord::CSV_HEADER,
                records.iter().map(AblationRecord::csv_row),
            )?);
            written.push(write_lines(
                &out.join("ablation_summary.csv"),
                "variant,runs,mean_pixel_acc,var_pixel_acc,mean_class_acc",
                ablation_summary(&records),
            )?);
        }
        Command::Seedstudy => {
            let (train, test, _) = prepared(cfg, out)?;
            let seeds = seed_list(cfg.network.seed, cfg.seed_runs);
            let variants: Vec<&str> = cfg.study_variants.iter().map(String::as_str).collect();
            let study = run_seed_study(&cfg.network, &variants, &train, &test, &seeds, &cfg.dataset)?;
            written.push(write_lines(&out.join("seedstudy.csv"), SeedStudy::CSV_HEADER, study.csv_rows())?);
            written.push(write_lines(
                &out.join("seedstudy_summary.csv"),
                "variant,runs,mean_pixel_acc,var_pixel_acc",
                seed_summary(&study),
            )?);
        }
        Command::VizFilters => {
            let net = load_model(&model_path(cfg, out))?.network;
            let trunk = &net.trunks[0];
            let banks = trunk.conv.iter().map(|c| &c.filters).chain(trunk.banks.iter().map(|b| &b.filters));
            for (l, f) in banks.enumerate() {
                let p = out.join(format!("filters_layer{}.ppm", l + 1));
                write_ppm(&p, &viz::filter_montage(f))?;
                written.push(p);
            }
        }
    }
    Ok(written)
}
