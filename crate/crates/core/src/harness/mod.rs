//! Configuration-driven experiment runner behind the `seqboed` binary.
//!
//! `run` executes one experiment and writes versioned CSV tables plus a JSON
//! manifest; `verify` runs the oracle checks at reduced scale.

mod config;
mod experiments;
mod verify;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use thiserror::Error;

pub use config::{
    apply_override, load_config, parse_config, EigBlock, EkiBlock, ExperimentConfig, ExperimentKind, HeatPreset,
    KlBlock, ModelBlock, NoiseBlock, PriorBlock, SamplerBlock, ScalarOrVec, SeedsBlock, SequentialBlock,
};
pub use verify::{verify, CheckStatus, VerifyCheck, VerifyReport};

pub const CSV_SCHEMA: &str = "seqboed-csv-v1";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {path}: {message}")]
    Invalid { path: String, message: String },
    #[error("runtime error: {0}")]
    Runtime(#[from] crate::Error),
    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl HarnessError {
    pub fn invalid(path: impl Into<String>, message: impl Into<String>) -> Self {
        HarnessError::Invalid {
            path: path.into(),
            message: message.into(),
        }
    }

    /// 2 parse, 3 validation, 4 runtime or I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Parse(_) => 2,
            HarnessError::Invalid { .. } => 3,
            HarnessError::Runtime(_) | HarnessError::Io { .. } => 4,
        }
    }
}

/// A table written as `<name>.csv` with the schema line on top.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub name: String,
    pub kind: &'static str,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(name: &str, kind: &'static str, header: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            kind,
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn with_header(name: &str, kind: &'static str, header: Vec<String>) -> Self {
        Self {
            name: name.to_string(),
            kind,
            header,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut out = format!("# {CSV_SCHEMA} {}\n{}\n", self.kind, self.header.join(","));
        for r in &self.rows {
            let _ = writeln!(out, "{}", r.join(","));
        }
        out
    }

    /// Index of a header column.
    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

/// Shortest round-trip text, scientific outside `[1e-4, 1e6)`.
pub fn num(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-4..1e6).contains(&a) || !v.is_finite() {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

pub fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub overrides: Vec<String>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub threads: Option<usize>,
}

impl RunOptions {
    /// `--set` entries followed by the `--seed` replacement.
    pub fn overrides_with_seed(&self) -> Vec<String> {
        let mut o = self.overrides.clone();
        if let Some(s) = self.seed {
            o.push(format!("seeds.master={s}"));
        }
        o
    }
}

/// Outcome of one experiment: its tables and a summary for the manifest.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub tables: Vec<CsvTable>,
    pub summary: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub output: ExperimentOutput,
}

/// Parse, validate and resolve a config with the CLI overrides applied.
pub fn resolve(path: &Path, opts: &RunOptions) -> Result<(ExperimentConfig, toml::Table), HarnessError> {
    let (cfg, table) = load_config(path, &opts.overrides_with_seed())?;
    cfg.validate()?;
    Ok((cfg, table))
}

/// Run the experiment already resolved into `cfg` without touching the disk.
pub fn execute(cfg: &ExperimentConfig) -> Result<ExperimentOutput, HarnessError> {
    cfg.validate()?;
    experiments::execute(cfg)
}

/// Run the experiment in `path` and write its artifacts.
pub fn run(path: &Path, opts: &RunOptions) -> Result<RunArtifacts, HarnessError> {
    let (cfg, table) = resolve(path, opts)?;
    let out_dir = opts
        .out_dir
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("seqboed-out"));
    let start = Instant::now();
    let output = with_threads(opts.threads, || execute(&cfg))?;
    let wall = start.elapsed().as_secs_f64();
    std::fs::create_dir_all(&out_dir).map_err(|source| HarnessError::Io {
        path: out_dir.clone(),
        source,
    })?;
    let mut files = Vec::new();
    for t in &output.tables {
        let p = out_dir.join(format!("{}.csv", t.name));
        write_file(&p, &t.render())?;
        files.push(p);
    }
    let manifest = serde_json::json!({
        "schema": "seqboed-manifest-v1",
        "kind": cfg.kind.name(),
        "version": env!("CARGO_PKG_VERSION"),
        "config": table,
        "seeds": { "master": cfg.seeds.master, "ground_truth": cfg.seeds.ground_truth },
        "threads": opts.threads,
        "wall_time_s": wall,
        "files": output.tables.iter().map(|t| format!("{}.csv", t.name)).collect::<Vec<_>>(),
        "summary": output.summary,
    });
    let p = out_dir.join("manifest.json");
    write_file(&p, &serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
    files.push(p);
    Ok(RunArtifacts { out_dir, files, output })
}

fn write_file(path: &Path, text: &str) -> Result<(), HarnessError> {
    std::fs::write(path, text).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Run `f` inside a dedicated rayon pool when a thread count is given.
pub fn with_threads<T: Send>(
    threads: Option<usize>,
    f: impl FnOnce() -> Result<T, HarnessError> + Send,
) -> Result<T, HarnessError> {
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| HarnessError::invalid("--threads", e.to_string()))?
            .install(f),
        None => f(),
    }
}
