//! Batch entry points: training, restoration, evaluation and crossover
//! testing. `main.rs` only parses flags and maps errors to exit codes.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use bilevel_core::data::gen_dataset;
use bilevel_core::foe::{restore_foe, train_foe, FoEParams};
use bilevel_core::imgcore::{psnr, DegradationOp, Image};
use bilevel_core::metio::{
    read_filter_bank, read_metadata, read_pgm, write_error_map, write_filter_bank, write_metrics_csv, write_pgm,
    write_table, FilterBank, MetricsRow,
};
use bilevel_core::tvdisc::{restore_tv, train_tv_filters, FilterFamily, Symmetry};
use serde_json::json;

pub use config::{DataConfig, RunConfig, Task};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Invalid configuration or unresolvable input; exit code 2.
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Run(#[from] bilevel_core::Error),
}

impl CliError {
    pub fn config_err(e: bilevel_core::Error) -> Self {
        CliError::Config(e.to_string())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Run(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Model file names inside the output directory.
pub const FOE_MODEL: &str = "foe.blrf";
pub const TV_MODEL: &str = "tvdisc.blrf";

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| bilevel_core::Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_loss_csv(path: &Path, history: &[f64]) -> Result<()> {
    let rows: Vec<Vec<String>> = history
        .iter()
        .enumerate()
        .map(|(i, l)| vec![i.to_string(), l.to_string()])
        .collect();
    Ok(write_table(path, &["iteration", "loss"], &rows)?)
}

/// A restoration model: a loaded file or a handcrafted preset.
#[derive(Debug, Clone)]
pub struct Model {
    pub label: String,
    pub bank: FilterBank,
    /// The dataset the model was trained on, when recorded.
    pub trained_on: Option<DataConfig>,
}

impl Model {
    /// `spec` is a preset name (`fd`, `cd3`, `cd4`) or a model path.
    pub fn resolve(spec: &str) -> Result<Self> {
        if let Ok(fam) = FilterFamily::preset(spec) {
            return Ok(Model {
                label: spec.to_ascii_lowercase(),
                bank: FilterBank::TvDisc(fam),
                trained_on: None,
            });
        }
        let path = Path::new(spec);
        if !path.is_file() {
            return Err(CliError::Config(format!(
                "model {} is neither a preset (fd, cd3, cd4) nor a file",
                path.display()
            )));
        }
        let bank = read_filter_bank(path)?;
        let trained_on = read_metadata(path)?
            .and_then(|m| m.get("data").cloned())
            .and_then(|d| serde_json::from_value(d).ok());
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| spec.to_string());
        Ok(Model { label, bank, trained_on })
    }

    pub fn num_filters(&self) -> usize {
        match &self.bank {
            FilterBank::FoE(p) => p.num_filters(),
            FilterBank::TvDisc(f) => f.num_filters(),
        }
    }

    pub fn symmetry(&self) -> Symmetry {
        match &self.bank {
            FilterBank::FoE(_) => Symmetry::None,
            FilterBank::TvDisc(f) => f.symmetry,
        }
    }

    /// FoE weights are tied to the blur they were trained for.
    pub fn check_task(&self, data: &DataConfig) -> Result<()> {
        if let (FilterBank::FoE(_), Some(t)) = (&self.bank, &self.trained_on) {
            if t.task != data.task || (t.task == Task::Deblur && t.blur != data.blur) {
                return Err(CliError::Config(format!(
                    "model/task mismatch: FoE model `{}` was trained for {} but the task is {}",
                    self.label,
                    t.label(),
                    data.label()
                )));
            }
        }
        Ok(())
    }

    pub fn restore(&self, f: &Image, op: &DegradationOp, cfg: &RunConfig) -> Result<Image> {
        let u = match &self.bank {
            FilterBank::FoE(p) => restore_foe(f, op, p, &cfg.foe.train.lower)?,
            FilterBank::TvDisc(fam) => restore_tv(f, op, fam, cfg.tvdisc.restore_iters, cfg.tvdisc.train.lambda)?,
        };
        Ok(u)
    }
}

/// Restored images and their PSNRs against the ground truths, in order.
pub fn evaluate(model: &Model, samples: &[(Image, Image)], data: &DataConfig, cfg: &RunConfig) -> Result<Vec<(Image, f64)>> {
    model.check_task(data)?;
    let op = data.operator()?;
    samples
        .iter()
        .map(|(g, f)| {
            let u = model.restore(f, &op, cfg)?;
            let p = psnr(&u, g)?;
            Ok((u, p))
        })
        .collect()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn dataset(data: &DataConfig, seed: u64) -> Result<Vec<(Image, Image)>> {
    Ok(gen_dataset(&data.spec(seed)?)?)
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model_path: PathBuf,
    pub loss_history: Vec<f64>,
    pub train_psnr: f64,
    pub test_psnr: f64,
}

fn metrics_rows(model: &Model, data: &DataConfig, train: f64, test: f64) -> Vec<MetricsRow> {
    [("train", train), ("test", test)]
        .into_iter()
        .map(|(split, p)| MetricsRow {
            task: data.task.name().into(),
            setting: data.setting(),
            l: model.num_filters(),
            symmetry: model.symmetry().name().into(),
            split: split.into(),
            psnr_mean: p,
        })
        .collect()
}

fn finish_training(cfg: &RunConfig, bank: FilterBank, file: &str, history: Vec<f64>, train: &[(Image, Image)]) -> Result<TrainReport> {
    let model_path = cfg.out.join(file);
    let meta = json!({
        "kind": bank.kind_name(),
        "seed": cfg.seed,
        "data": cfg.data,
        "config": cfg,
        "loss_history": history,
    });
    write_filter_bank(&model_path, &bank, Some(&meta))?;
    write_loss_csv(&cfg.out.join("loss.csv"), &history)?;
    let model = Model {
        label: file.trim_end_matches(".blrf").into(),
        bank,
        trained_on: Some(cfg.data.clone()),
    };
    let test = dataset(cfg.test_data(), cfg.test_seed())?;
    let tr: Vec<f64> = evaluate(&model, train, &cfg.data, cfg)?.into_iter().map(|r| r.1).collect();
    let te: Vec<f64> = evaluate(&model, &test, cfg.test_data(), cfg)?.into_iter().map(|r| r.1).collect();
    let (train_psnr, test_psnr) = (mean(&tr), mean(&te));
    write_metrics_csv(cfg.out.join("metrics.csv"), &metrics_rows(&model, &cfg.data, train_psnr, test_psnr))?;
    Ok(TrainReport {
        model_path,
        loss_history: history,
        train_psnr,
        test_psnr,
    })
}

/// Trains FoE weights and filters on the configured dataset.
pub fn cmd_train_foe(cfg: &RunConfig) -> Result<TrainReport> {
    cfg.validate()?;
    create_out(&cfg.out)?;
    let train = dataset(&cfg.data, cfg.train_seed())?;
    let op = cfg.data.operator()?;
    let f = &cfg.foe;
    let init = match f.init {
        config::FoeInit::Random => FoEParams::random_init(f.filters, f.kappa, f.init_alpha, cfg.seed)?,
        config::FoeInit::Dct => FoEParams::dct_init(f.filters, f.kappa, f.init_alpha, 1.0, 0.1, cfg.seed)?,
    };
    let trained = train_foe(&train, &op, init, &f.train)?;
    finish_training(cfg, FilterBank::FoE(trained.params), FOE_MODEL, trained.loss_history, &train)
}

/// Learns a TV discretization filter family on the configured dataset.
pub fn cmd_train_tvdisc(cfg: &RunConfig) -> Result<TrainReport> {
    cfg.validate()?;
    create_out(&cfg.out)?;
    let train = dataset(&cfg.data, cfg.train_seed())?;
    let op = cfg.data.operator()?;
    let t = &cfg.tvdisc;
    let init = match &t.init_preset {
        Some(p) => {
            let mut fam = FilterFamily::preset(p)?;
            fam.symmetry = t.symmetry;
            fam
        }
        None => FilterFamily::perturbed_fd(t.filters, t.symmetry, t.init_variance, cfg.seed)?,
    };
    let trained = train_tv_filters(&train, &op, init, &t.train)?;
    finish_training(cfg, FilterBank::TvDisc(trained.family), TV_MODEL, trained.loss_history, &train)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RestoreRow {
    pub model: String,
    pub image: String,
    pub psnr: Option<f64>,
}

/// Restores the configured inputs (or the test split) with every model.
/// Writes `restore.csv`, restored PGMs and, on request, error maps.
pub fn cmd_restore(cfg: &RunConfig) -> Result<Vec<RestoreRow>> {
    cfg.validate()?;
    if cfg.restore.models.is_empty() {
        return Err(CliError::Config("restore.models is empty".into()));
    }
    let r = &cfg.restore;
    if !r.ground_truth.is_empty() && r.ground_truth.len() != r.inputs.len() {
        return Err(CliError::Config(format!(
            "{} ground truths for {} inputs",
            r.ground_truth.len(),
            r.inputs.len()
        )));
    }
    for p in r.inputs.iter().chain(&r.ground_truth) {
        if !p.is_file() {
            return Err(CliError::Config(format!("input {} does not exist", p.display())));
        }
    }
    let models = r.models.iter().map(|m| Model::resolve(m)).collect::<Result<Vec<_>>>()?;
    let data = cfg.test_data();
    // (name, f, optional g)
    let items: Vec<(String, Image, Option<Image>)> = if r.inputs.is_empty() {
        dataset(data, cfg.test_seed())?
            .into_iter()
            .enumerate()
            .map(|(i, (g, f))| (format!("test_{i:03}"), f, Some(g)))
            .collect()
    } else {
        r.inputs
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                let g = r.ground_truth.get(i).map(read_pgm).transpose()?;
                Ok((name, read_pgm(p)?, g))
            })
            .collect::<Result<_>>()?
    };
    let op = data.operator()?;
    let dir = cfg.out.join("restored");
    create_out(&dir)?;
    if r.error_maps {
        create_out(&cfg.out.join("errors"))?;
    }
    let mut rows = Vec::new();
    for m in &models {
        m.check_task(data)?;
        for (name, f, g) in &items {
            let u = m.restore(f, &op, cfg)?;
            write_pgm(&u, dir.join(format!("{}_{name}.pgm", m.label)))?;
            let p = match g {
                Some(g) => {
                    if r.error_maps {
                        write_error_map(&u, g, cfg.out.join("errors").join(format!("{}_{name}.ppm", m.label)))?;
                    }
                    Some(psnr(&u, g)?)
                }
                None => None,
            };
            rows.push(RestoreRow {
                model: m.label.clone(),
                image: name.clone(),
                psnr: p,
            });
        }
    }
    let records: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.model.clone(), r.image.clone(), r.psnr.map(|p| p.to_string()).unwrap_or_default()])
        .collect();
    write_table(cfg.out.join("restore.csv"), &["model", "image", "psnr"], &records)?;
    Ok(rows)
}

/// Mean PSNR of every configured model on both splits, as `metrics.csv`.
pub fn cmd_eval(cfg: &RunConfig) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    if cfg.restore.models.is_empty() {
        return Err(CliError::Config("restore.models is empty".into()));
    }
    let models = cfg.restore.models.iter().map(|m| Model::resolve(m)).collect::<Result<Vec<_>>>()?;
    create_out(&cfg.out)?;
    let train = dataset(&cfg.data, cfg.train_seed())?;
    let test = dataset(cfg.test_data(), cfg.test_seed())?;
    let mut rows = Vec::new();
    for m in &models {
        let tr: Vec<f64> = evaluate(m, &train, &cfg.data, cfg)?.into_iter().map(|r| r.1).collect();
        let te: Vec<f64> = evaluate(m, &test, cfg.test_data(), cfg)?.into_iter().map(|r| r.1).collect();
        rows.extend(metrics_rows(m, &cfg.data, mean(&tr), mean(&te)));
    }
    write_metrics_csv(cfg.out.join("metrics.csv"), &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossoverMatrix {
    /// Evaluation tasks, one per row.
    pub rows: Vec<String>,
    /// Learning tasks of the models, then preset names.
    pub columns: Vec<String>,
    /// `None` where the evaluation failed.
    pub cells: Vec<Vec<Option<f64>>>,
}

/// Mean test PSNR of every model and preset on every task, rows indexed by
/// evaluation task and columns by learning task.
pub fn cmd_crossover(cfg: &RunConfig) -> Result<CrossoverMatrix> {
    cfg.validate()?;
    let cx = &cfg.crossover;
    if cx.tasks.is_empty() {
        return Err(CliError::Config("crossover.tasks is empty".into()));
    }
    for m in &cx.models {
        if !m.is_file() {
            return Err(CliError::Config(format!("model {} does not exist", m.display())));
        }
    }
    let mut models = cx
        .models
        .iter()
        .map(|p| Model::resolve(&p.to_string_lossy()))
        .collect::<Result<Vec<_>>>()?;
    for m in &mut models {
        // label a column by the task the model learned
        if let Some(t) = &m.trained_on {
            if let Some(task) = cx.tasks.iter().find(|t2| &t2.data == t) {
                m.label = task.name.clone();
            }
        }
    }
    for p in &cx.presets {
        models.push(Model::resolve(p)?);
    }
    create_out(&cfg.out)?;
    let mut log = String::new();
    let mut cells = Vec::new();
    for task in &cx.tasks {
        let samples = dataset(&task.data, cfg.test_seed())?;
        let row = models
            .iter()
            .map(|m| match evaluate(m, &samples, &task.data, cfg) {
                Ok(r) => Some(mean(&r.into_iter().map(|x| x.1).collect::<Vec<_>>())),
                Err(e) => {
                    log.push_str(&format!("{} on {}: {e}\n", m.label, task.name));
                    None
                }
            })
            .collect::<Vec<_>>();
        cells.push(row);
    }
    let matrix = CrossoverMatrix {
        rows: cx.tasks.iter().map(|t| t.name.clone()).collect(),
        columns: models.iter().map(|m| m.label.clone()).collect(),
        cells,
    };
    let mut header = vec!["eval_task"];
    header.extend(matrix.columns.iter().map(String::as_str));
    let records: Vec<Vec<String>> = matrix
        .rows
        .iter()
        .zip(&matrix.cells)
        .map(|(name, row)| {
            std::iter::once(name.clone())
                .chain(row.iter().map(|c| c.map(|p| p.to_string()).unwrap_or_default()))
                .collect()
        })
        .collect();
    write_table(cfg.out.join("crossover.csv"), &header, &records)?;
    fs::write(cfg.out.join("crossover.log"), log).map_err(|e| bilevel_core::Error::Io {
        path: cfg.out.join("crossover.log"),
        source: e,
    })?;
    Ok(matrix)
}
