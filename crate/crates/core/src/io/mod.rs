//! Experiment artifacts: configuration, sample manifests, CSV training logs,
//! checkpoints written during a run, and field files.

mod config;
mod field;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use config::{
    ClusterConfig, MultigridConfig, NetworkConfig, OptimizerKind, OutputConfig, ProblemConfig, RunConfig,
    TrainingConfig,
};
pub use field::{load_field, read_field, save_field, write_field, FieldHeader, FieldKind, FIELD_VERSION};

use crate::error::{Error, Result};
use crate::mgtrain::{EpochRecord, Observer, StepReport};
use crate::network::{save_checkpoint, ModelState};
use crate::parallel::EpochReport;
use crate::problem::OmegaSample;

/// Version stamped into every CSV row and JSON artifact.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub schema_version: u32,
    pub index: usize,
    pub seed: u64,
    pub omega: OmegaSample,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu_file: Option<PathBuf>,
}

pub fn manifest_entries(omegas: &[OmegaSample], seed: u64) -> Vec<ManifestEntry> {
    omegas
        .iter()
        .enumerate()
        .map(|(index, &omega)| ManifestEntry {
            schema_version: SCHEMA_VERSION,
            index,
            seed,
            omega,
            nu_file: None,
        })
        .collect()
}

/// JSON lines, one sample per line.
pub fn write_manifest(entries: &[ManifestEntry], mut w: impl Write) -> Result<()> {
    for e in entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(r: impl BufRead) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: ManifestEntry = serde_json::from_str(&line)
            .map_err(|err| Error::Format(format!("manifest line {}: {err}", n + 1)))?;
        if e.schema_version != SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "manifest line {}: unsupported schema version {}",
                n + 1,
                e.schema_version
            )));
        }
        e.omega.validate()?;
        out.push(e);
    }
    Ok(out)
}

pub fn save_manifest(entries: &[ManifestEntry], path: &Path) -> Result<()> {
    write_manifest(entries, BufWriter::new(File::create(path)?))
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    read_manifest(BufReader::new(File::open(path)?))
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub schema_version: u32,
    pub epoch: usize,
    pub step: usize,
    pub level_index: usize,
    pub resolution: usize,
    pub p: usize,
    pub loss: f64,
    pub wall_s: f64,
    pub compute_s: f64,
    pub comm_s: f64,
    pub elapsed_s: f64,
}

impl From<&EpochRecord> for LogRow {
    fn from(r: &EpochRecord) -> Self {
        LogRow {
            schema_version: SCHEMA_VERSION,
            epoch: r.epoch,
            step: r.step,
            level_index: r.level,
            resolution: r.resolution,
            p: r.workers,
            loss: r.loss,
            wall_s: r.wall_s,
            compute_s: r.compute_s,
            comm_s: r.comm_s,
            elapsed_s: r.elapsed_s,
        }
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        k => Error::Format(format!("csv: {k:?}")),
    }
}

/// CSV writer that flushes after every row so the file can be tailed.
pub struct CsvLog<W: Write> {
    inner: csv::Writer<W>,
}

impl CsvLog<File> {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(CsvLog {
            inner: csv::Writer::from_path(path).map_err(csv_err)?,
        })
    }
}

impl<W: Write> CsvLog<W> {
    pub fn new(w: W) -> Self {
        CsvLog {
            inner: csv::Writer::from_writer(w),
        }
    }

    pub fn write<T: Serialize>(&mut self, row: &T) -> Result<()> {
        self.inner.serialize(row).map_err(csv_err)?;
        self.inner.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> Result<W> {
        self.inner.into_inner().map_err(|e| Error::Io(e.into_error()))
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

/// Observer that writes the CSV log and checkpoints of a run into a directory.
///
/// Checkpoints go to `step_<i>.ckpt` at the end of every step and, when
/// `checkpoint_every > 0`, to `epoch_<n>.ckpt` every that many epochs.
pub struct RunRecorder {
    dir: PathBuf,
    log: CsvLog<File>,
    checkpoint_every: usize,
    quiet: bool,
    extra: serde_json::Map<String, serde_json::Value>,
}

impl RunRecorder {
    pub fn create(dir: &Path, checkpoint_every: usize) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(RunRecorder {
            dir: dir.to_path_buf(),
            log: CsvLog::create(&dir.join("train_log.csv"))?,
            checkpoint_every,
            quiet: true,
            extra: serde_json::Map::new(),
        })
    }

    /// Print one progress line per step to stderr.
    pub fn verbose(mut self, on: bool) -> Self {
        self.quiet = !on;
        self
    }

    /// Entry added to the `extra` header of every checkpoint written.
    pub fn with_extra(mut self, key: &str, value: serde_json::Value) -> Self {
        self.extra.insert(key.to_string(), value);
        self
    }

    fn extra(&self, fields: serde_json::Value) -> serde_json::Value {
        let mut m = self.extra.clone();
        if let serde_json::Value::Object(f) = fields {
            m.extend(f);
        }
        serde_json::Value::Object(m)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

impl Observer for RunRecorder {
    fn on_epoch(&mut self, record: &EpochRecord, _report: &EpochReport, model: &ModelState) -> Result<()> {
        self.log.write(&LogRow::from(record))?;
        if self.checkpoint_every > 0 && record.epoch.is_multiple_of(self.checkpoint_every) {
            let extra = self.extra(serde_json::json!({ "epoch": record.epoch, "resolution": record.resolution }));
            save_checkpoint(model, extra, &self.dir.join(format!("epoch_{}.ckpt", record.epoch)))?;
        }
        Ok(())
    }

    fn on_step_end(&mut self, step: &StepReport, model: &ModelState) -> Result<()> {
        let extra = self.extra(serde_json::json!({ "step": step.index, "resolution": step.resolution }));
        save_checkpoint(model, extra, &self.dir.join(format!("step_{}.ckpt", step.index)))?;
        if !self.quiet {
            eprintln!(
                "step {} at {}: {} epochs, loss {:.6e}, {:.1} s ({:?})",
                step.index, step.resolution, step.epochs, step.final_loss, step.wall_s, step.stop
            );
        }
        Ok(())
    }
}
