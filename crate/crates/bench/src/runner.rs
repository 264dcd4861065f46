//! Runs an experiment grid against freshly deployed clusters.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use tokio::sync::Semaphore;
use truffle_sim::{deploy, Cluster, DeployError, MeasurementRecord, Mode, RunOptions};

use crate::config::{ConfigError, ExperimentConfig};
use crate::summary::{self, SummaryRow, RECORDS_FILE};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot deploy cluster: {0}")]
    Deploy(#[from] DeployError),
    #[error("cannot write results: {0}")]
    Io(#[from] std::io::Error),
}

impl RunError {
    /// Exit status for the command line: 2 for configuration problems.
    pub fn exit_code(&self) -> u8 {
        match self {
            RunError::Config(_) | RunError::Deploy(DeployError::Config(_)) => 2,
            _ => 1,
        }
    }
}

/// A (size, delay, mode) cell of the grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub size_mb: f64,
    pub added_delay_ms: f64,
    pub mode: Mode,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub records: Vec<MeasurementRecord>,
    pub summary: Vec<SummaryRow>,
    /// Points where every repetition failed.
    pub failed_points: Vec<GridPoint>,
}

impl RunOutcome {
    pub fn complete(&self) -> bool {
        self.failed_points.is_empty()
    }
}

/// Appends records to `records.jsonl` as they arrive, so an interrupted
/// run keeps what it measured.
struct RecordSink {
    out: BufWriter<File>,
}

impl RecordSink {
    fn create(dir: &Path) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            out: BufWriter::new(File::create(dir.join(RECORDS_FILE))?),
        })
    }

    fn push(&mut self, r: &MeasurementRecord) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.out, r)?;
        self.out.write_all(b"\n")?;
        self.out.flush()
    }
}

/// Runs `warmup` discarded and `repetitions` recorded invocations of every
/// mode at one size, alternating modes within each repetition.
pub async fn run_point(
    cluster: &Cluster,
    size_mb: f64,
    modes: &[Mode],
    repetitions: u32,
    warmup: u32,
) -> Vec<MeasurementRecord> {
    for _ in 0..warmup {
        for &mode in modes {
            cluster.invoke_workflow(&RunOptions::new(size_mb, mode)).await;
        }
    }
    let mut out = Vec::new();
    for repetition in 0..repetitions {
        for &mode in modes {
            let opts = RunOptions {
                repetition,
                ..RunOptions::new(size_mb, mode)
            };
            let r = cluster.invoke_workflow(&opts).await;
            if let Some(f) = &r.failure {
                tracing::warn!(size_mb, %mode, repetition, phase = ?f.phase, "run failed: {}", f.message);
            }
            out.push(r);
        }
    }
    out
}

fn failed_points(config: &ExperimentConfig, records: &[MeasurementRecord]) -> Vec<GridPoint> {
    let mut failed = Vec::new();
    for &added_delay_ms in &config.added_delays_ms {
        for &size_mb in &config.input_sizes_mb {
            for mode in config.modes() {
                let ok = records.iter().any(|r| {
                    r.size_mb == size_mb && r.added_delay_ms == added_delay_ms && r.mode == mode && !r.failed()
                });
                if !ok {
                    failed.push(GridPoint {
                        size_mb,
                        added_delay_ms,
                        mode,
                    });
                }
            }
        }
    }
    failed
}

/// Runs the whole grid and writes `records.jsonl`, `summary.csv` and
/// `summary.json` into `config.output_path`.
///
/// Points run one after another on a single cluster unless `parallel` is
/// set, in which case each (size, delay) pair gets its own cluster and they
/// overlap; their timings then interfere with each other.
pub async fn run(config: &ExperimentConfig, parallel: bool) -> Result<RunOutcome, RunError> {
    config.validate()?;
    let cluster_config = config.cluster_config()?;
    let out_dir = config.output_path.clone();
    let mut sink = RecordSink::create(&out_dir)?;
    let modes = config.modes();
    let mut records = Vec::new();

    if parallel {
        let limit = Arc::new(Semaphore::new(
            std::thread::available_parallelism().map_or(2, |n| n.get()),
        ));
        let mut tasks = tokio::task::JoinSet::new();
        for (i, &delay) in config.added_delays_ms.iter().enumerate() {
            for (j, &size) in config.input_sizes_mb.iter().enumerate() {
                let limit = limit.clone();
                let cluster_config = cluster_config.clone();
                let modes = modes.clone();
                let (reps, warmup) = (config.repetitions, config.warmup);
                tasks.spawn(async move {
                    let _permit = limit.acquire_owned().await.expect("semaphore open");
                    let mut cluster = deploy(cluster_config).await?;
                    cluster.set_added_delay(delay);
                    let rs = run_point(&cluster, size, &modes, reps, warmup).await;
                    cluster.shutdown().await;
                    Ok::<_, DeployError>(((i, j), rs))
                });
            }
        }
        let mut done = Vec::new();
        while let Some(joined) = tasks.join_next().await {
            done.push(joined.expect("grid point task panicked")?);
        }
        done.sort_by_key(|(k, _)| *k);
        for (_, rs) in done {
            for r in rs {
                sink.push(&r)?;
                records.push(r);
            }
        }
    } else {
        let mut cluster = deploy(cluster_config).await?;
        for &delay in &config.added_delays_ms {
            cluster.set_added_delay(delay);
            for &size in &config.input_sizes_mb {
                tracing::info!(size_mb = size, added_delay_ms = delay, "running point");
                for r in run_point(&cluster, size, &modes, config.repetitions, config.warmup).await {
                    sink.push(&r)?;
                    records.push(r);
                }
            }
        }
        cluster.shutdown().await;
    }

    let summary = summary::summarize(&records);
    summary::write_summary(&out_dir, &summary)?;
    Ok(RunOutcome {
        out_dir,
        failed_points: failed_points(config, &records),
        records,
        summary,
    })
}

/// Recomputes the summary files from `records.jsonl` in `dir`.
pub fn summarize_dir(dir: &Path) -> std::io::Result<Vec<SummaryRow>> {
    let records = summary::read_records(&dir.join(RECORDS_FILE))?;
    let rows = summary::summarize(&records);
    summary::write_summary(dir, &rows)?;
    Ok(rows)
}
