use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tdrift_core::corpus::{Corpus, Period, SplitPlan};
use tdrift_core::eval::{
    run_fix_cell, run_stream_cell, CellOutput, MetricRecord, MetricSummary, ResultTable, SPLIT_STREAM,
    SPLIT_TEST_PERIOD,
};
use tdrift_core::method::MethodSpec;
use tdrift_core::model::write_checkpoint;

use crate::config::{ExperimentConfig, ProtocolSpec};
use crate::error::CliError;
use crate::fsutil::{read_to_string, sha256_hex, write_atomic};
use crate::split::plans_for;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RESULTS_FILE: &str = "results.csv";
pub const AGGREGATES_FILE: &str = "aggregates.json";
pub const PLOT_FILE: &str = "plot.csv";
pub const PLOT_CSV_HEADER: &str = "method,period,metric,mean,std,n";

/// Written before any training so a run directory always records what
/// produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub corpus_sha256: String,
    pub n_documents: usize,
    pub config: ExperimentConfig,
}

impl Manifest {
    /// Fields that must match for a directory to be resumed. Worker count
    /// and output location do not affect results.
    fn fingerprint(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("manifest serializes");
        if let Some(config) = v.get_mut("config").and_then(Value::as_object_mut) {
            config.remove("workers");
            config.remove("output_dir");
        }
        v.as_object_mut().map(|m| m.remove("tool_version"));
        v
    }
}

/// The finished-cell marker; its presence lets an interrupted run resume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CellFile {
    method: String,
    seed: u64,
    records: Vec<MetricRecord>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub table: ResultTable,
    /// Cells trained by this invocation.
    pub computed: usize,
    /// Cells loaded from an earlier, interrupted invocation.
    pub resumed: usize,
}

pub fn cell_file(dir: &Path, method: &str, seed: u64) -> PathBuf {
    dir.join("cells").join(format!("{method}-{seed}.json"))
}

pub fn checkpoint_path(dir: &Path, method: &str, seed: u64, period: Period) -> PathBuf {
    dir.join(method)
        .join(seed.to_string())
        .join(format!("period_{period}"))
        .join("model.ckpt")
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<(), CliError> {
    let path = dir.join(MANIFEST_FILE);
    if path.exists() {
        let existing: Manifest = serde_json::from_str(&read_to_string(&path)?).map_err(|e| {
            CliError::Validation(format!("{} is not a valid manifest: {e}", path.display()))
        })?;
        if existing.fingerprint() != manifest.fingerprint() {
            return Err(CliError::Validation(format!(
                "{} was produced by a different configuration or corpus; use another experiment name",
                dir.display()
            )));
        }
        return Ok(());
    }
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    write_atomic(&path, json.as_bytes())
}

fn save_cell(dir: &Path, out: &CellOutput) -> Result<(), CliError> {
    for (period, model) in &out.checkpoints {
        let mut bytes = Vec::new();
        write_checkpoint(model, &mut bytes)?;
        write_atomic(&checkpoint_path(dir, &out.method, out.seed, *period), &bytes)?;
    }
    let mut log = String::new();
    for entry in &out.log {
        log.push_str(&serde_json::to_string(entry).expect("log entry serializes"));
        log.push('\n');
    }
    let cell_dir = dir.join(&out.method).join(out.seed.to_string());
    write_atomic(&cell_dir.join("train_log.jsonl"), log.as_bytes())?;
    let cell = CellFile {
        method: out.method.clone(),
        seed: out.seed,
        records: out.records.clone(),
    };
    let json = serde_json::to_string(&cell).expect("cell serializes");
    write_atomic(&cell_file(dir, &out.method, out.seed), json.as_bytes())
}

fn load_cell(path: &Path) -> Result<Option<Vec<MetricRecord>>, CliError> {
    if !path.exists() {
        return Ok(None);
    }
    let cell: CellFile = serde_json::from_str(&read_to_string(path)?)
        .map_err(|e| CliError::Validation(format!("{} is corrupt: {e}", path.display())))?;
    Ok(Some(cell.records))
}

fn run_cell(
    corpus: &Corpus,
    plans: &[SplitPlan],
    config: &ExperimentConfig,
    method: &MethodSpec,
    seed: u64,
) -> Result<CellOutput, CliError> {
    let protocol = config.protocol_config();
    Ok(match config.protocol {
        ProtocolSpec::EvalFix { .. } => run_fix_cell(corpus, &plans[0], method, &protocol, seed)?,
        ProtocolSpec::EvalStream { .. } => run_stream_cell(corpus, plans, method, &protocol, seed)?,
    })
}

/// Per-period mean and spread over seeds, one row per (method, period,
/// metric), from the per-period records.
pub fn plot_csv(records: &[MetricRecord]) -> String {
    let mut methods: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<(usize, Period), Vec<&MetricRecord>> = BTreeMap::new();
    for r in records {
        let Some(period) = r.period else { continue };
        if r.split != SPLIT_TEST_PERIOD && r.split != SPLIT_STREAM {
            continue;
        }
        let m = match methods.iter().position(|&m| m == r.method) {
            Some(i) => i,
            None => {
                methods.push(&r.method);
                methods.len() - 1
            }
        };
        groups.entry((m, period)).or_default().push(r);
    }
    let mut out = format!("{PLOT_CSV_HEADER}\n");
    for ((m, period), rows) in groups {
        let metrics: [(&str, fn(&MetricRecord) -> f64); 3] =
            [("macro_f1", |r| r.macro_f1), ("micro_f1", |r| r.micro_f1), ("mrp", |r| r.mrp)];
        for (name, f) in metrics {
            let s = MetricSummary::of(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
            out.push_str(&format!("{},{period},{name},{},{},{}\n", methods[m], s.mean, s.std, rows.len()));
        }
    }
    out
}

/// Writes the tables derived from a complete set of records.
pub fn write_tables(dir: &Path, table: &ResultTable) -> Result<(), CliError> {
    write_atomic(&dir.join(RESULTS_FILE), table.to_csv().as_bytes())?;
    let aggregates = serde_json::to_string_pretty(&table.aggregates).expect("aggregates serialize");
    write_atomic(&dir.join(AGGREGATES_FILE), aggregates.as_bytes())?;
    write_atomic(&dir.join(PLOT_FILE), plot_csv(&table.records).as_bytes())
}

/// Runs every (method, seed) cell not already finished in the experiment
/// directory, then writes the result tables.
pub fn cmd_run(config: &ExperimentConfig) -> Result<RunOutcome, CliError> {
    config.validate()?;
    let corpus = config.corpus.load()?;
    let plans = plans_for(&corpus, config.protocol)?;
    let dir = config.run_dir();
    let manifest = Manifest {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        corpus_sha256: sha256_hex(&corpus.to_jsonl_bytes()),
        n_documents: corpus.len(),
        config: config.clone(),
    };
    write_manifest(&dir, &manifest)?;

    let cells: Vec<(&MethodSpec, u64)> = config
        .methods
        .iter()
        .flat_map(|m| config.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| CliError::io("starting worker pool", std::io::Error::other(e)))?;
    // Each cell yields its records and whether it was trained just now.
    type CellResult = Result<(Vec<MetricRecord>, bool), CliError>;
    let results: Vec<CellResult> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(method, seed)| {
                if let Some(records) = load_cell(&cell_file(&dir, method.name(), seed))? {
                    return Ok((records, false));
                }
                let out = run_cell(&corpus, &plans, config, method, seed)?;
                save_cell(&dir, &out)?;
                Ok((out.records, true))
            })
            .collect()
    });

    let mut records = Vec::new();
    let (mut computed, mut resumed) = (0, 0);
    for r in results {
        let (cell_records, fresh) = r?;
        if fresh {
            computed += 1;
        } else {
            resumed += 1;
        }
        records.extend(cell_records);
    }
    let table = ResultTable::from_records(records);
    write_tables(&dir, &table)?;
    Ok(RunOutcome {
        dir,
        table,
        computed,
        resumed,
    })
}
