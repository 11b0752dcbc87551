//! One directory per seed: configuration snapshot, checkpoints, the step
//! log and the metrics records.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_base_novel, noise_bench, probes_from_config, EvalReport, NoiseMetricReport};
use crate::model::AnPromptModel;
use crate::train::{train, RunContext, TrainEvent, TrainResult};

pub const CONFIG_FILE: &str = "config.toml";
pub const INIT_CHECKPOINT: &str = "init_checkpoint.json";
pub const CHECKPOINT: &str = "checkpoint.json";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const METRICS: &str = "metrics.jsonl";

/// A line of a metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum MetricsRecord {
    Eval(EvalReport),
    Noise {
        seed: u64,
        #[serde(flatten)]
        report: NoiseMetricReport,
    },
    Ablation(crate::ablation::AblationRow),
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

pub(crate) fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Line-oriented writer for JSON records.
pub struct JsonlWriter {
    path: PathBuf,
    inner: BufWriter<File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            inner: BufWriter::new(file),
        })
    }

    pub fn append(path: &Path) -> Result<Self> {
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            inner: BufWriter::new(file),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(self.inner, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush().map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Debug)]
pub struct SeedRun {
    pub dir: PathBuf,
    pub train: TrainResult,
    pub eval: EvalReport,
}

/// Trains `seed`, evaluates base and novel accuracy and writes everything
/// under `out/seed_<seed>/`. The step log is streamed, so a diverged run
/// leaves its diagnostic line behind.
pub fn run_seed(ctx: &RunContext, seed: u64, out: &Path) -> Result<SeedRun> {
    let dir = seed_dir(out, seed);
    create_dir(&dir)?;
    let config_path = dir.join(CONFIG_FILE);
    fs::write(&config_path, ctx.config.to_toml()).map_err(|e| Error::io(&config_path, e))?;

    let mut log = JsonlWriter::create(&dir.join(TRAIN_LOG))?;
    let result = train(ctx, seed, |event| match event {
        TrainEvent::Step(r) => log.write(r),
        TrainEvent::Diverged(d) => {
            log.write(d)?;
            log.flush()
        }
    });
    log.flush()?;
    let result = result?;
    Checkpoint::from_model(&result.initial).save(&dir.join(INIT_CHECKPOINT))?;
    Checkpoint::from_model(&result.model).save(&dir.join(CHECKPOINT))?;

    let eval = evaluate_base_novel(ctx, &result.model, seed)?;
    let mut metrics = JsonlWriter::create(&dir.join(METRICS))?;
    metrics.write(&MetricsRecord::Eval(eval.clone()))?;
    metrics.flush()?;
    Ok(SeedRun {
        dir,
        train: result,
        eval,
    })
}

/// Loads the trained model of a seed directory.
pub fn load_model(dir: &Path) -> Result<AnPromptModel> {
    Checkpoint::load(&dir.join(CHECKPOINT))?.into_model()
}

/// Noise metrics of `model`, appended to the seed's metrics file.
pub fn record_noise_bench(ctx: &RunContext, model: &AnPromptModel, seed: u64, dir: &Path) -> Result<Vec<NoiseMetricReport>> {
    let probes = probes_from_config(ctx, &ctx.config.noise_bench.perturbations)?;
    let reports = noise_bench(ctx, model, &probes, seed)?;
    create_dir(dir)?;
    let mut metrics = JsonlWriter::append(&dir.join(METRICS))?;
    for r in &reports {
        metrics.write(&MetricsRecord::Noise {
            seed,
            report: r.clone(),
        })?;
    }
    metrics.flush()?;
    Ok(reports)
}

/// Writes the noise metrics as CSV.
pub fn write_noise_csv(path: &Path, rows: &[(u64, NoiseMetricReport)]) -> Result<()> {
    let mut text = String::from("seed,perturbation,label,ts,lpr,as,n_samples\n");
    for (seed, r) in rows {
        text.push_str(&format!(
            "{seed},{},\"{}\",{:.6},{:.6},{:.6},{}\n",
            r.perturbation.name(),
            r.label,
            r.ts,
            r.lpr,
            r.as_,
            r.n_samples
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
