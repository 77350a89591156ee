//! Experiment driver: configuration, sweeps and on-disk artifacts.
//!
//! A configuration names a workload (a trace file or a synthetic spec), the
//! memory system, a list of policies and optionally a sweep axis. Every
//! `(sweep point, policy)` pair is simulated independently; the results are
//! written as a report CSV, a normalized comparison CSV and, for SA-guided
//! runs, the annealing log.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{SimError, TraceError, ValidationError};
use crate::memory_model::MemoryConfig;
use crate::metrics::{
    normalize, summarize, workload_fingerprint, write_per_step_csv, write_report_csv, ReportRow, SimulationReport,
};
use crate::policies::{PolicyKind, DEFAULT_PAGE_RATIO, DEFAULT_PAGE_SIZE, DEFAULT_PAGE_WINDOW};
use crate::sa::{run_sa, write_log_csv, SaConfig, SaOutcome};
use crate::simulator::simulate;
use crate::trace::{read_trace, synthesize_trace, DecodeTrace, SynthTraceSpec, TraceHeader};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{0}")]
    Invalid(#[from] ValidationError),
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Trace {
        path: PathBuf,
        #[source]
        source: TraceError,
    },
    #[error("point {point}, policy {policy}: {source}")]
    Sim {
        point: String,
        policy: String,
        #[source]
        source: SimError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl ExperimentError {
    /// 2 for malformed or invalid inputs, 3 for a workload that cannot be
    /// placed or a simulation that could not proceed, 1 for I/O failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Invalid(_) | ExperimentError::Parse { .. } | ExperimentError::Trace { .. } => 2,
            ExperimentError::Sim { source, .. } => match source {
                SimError::Invalid(_) => 2,
                _ => 3,
            },
            ExperimentError::Io { .. } => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub memory: MemoryConfig,
    /// When set, HBM capacity is replaced by the trace's weights plus this
    /// fraction of its final KV footprint.
    #[serde(default)]
    pub kv_room_fraction: Option<f64>,
    pub trace: TraceSource,
    pub policies: Vec<PolicySpec>,
    #[serde(default)]
    pub sa: Option<SaConfig>,
    #[serde(default)]
    pub sweep: Option<Sweep>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TraceSource {
    File(PathBuf),
    Synthetic(SyntheticTrace),
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTrace {
    pub num_layers: u32,
    pub prompt_len: u32,
    pub decode_len: u32,
    pub entry_bytes: u64,
    #[serde(default)]
    pub weight_bytes_per_layer: u64,
    pub sparsity: f64,
    pub churn: f64,
    #[serde(default)]
    pub per_layer_independent: bool,
    /// Defaults to the experiment seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl SyntheticTrace {
    pub fn spec(&self, default_seed: u64) -> SynthTraceSpec {
        SynthTraceSpec {
            header: TraceHeader {
                num_layers: self.num_layers,
                prompt_len: self.prompt_len,
                decode_len: self.decode_len,
                entry_bytes: self.entry_bytes,
                weight_bytes_per_layer: self.weight_bytes_per_layer,
            },
            sparsity: self.sparsity,
            churn: self.churn,
            per_layer_independent: self.per_layer_independent,
            seed: self.seed.unwrap_or(default_seed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySpec {
    UnlimitedHbm,
    Static,
    ReactiveLru,
    Page {
        #[serde(default = "default_page_size")]
        page_size: u32,
        #[serde(default = "default_page_window")]
        window: u32,
        #[serde(default = "default_page_ratio")]
        ratio: f64,
    },
    Lookahead {
        window: u32,
        ratio: f64,
    },
    /// Lookahead with `(W, R)` chosen by simulated annealing.
    SaGuided,
}

fn default_page_size() -> u32 {
    DEFAULT_PAGE_SIZE
}

fn default_page_window() -> u32 {
    DEFAULT_PAGE_WINDOW
}

fn default_page_ratio() -> f64 {
    DEFAULT_PAGE_RATIO
}

impl PolicySpec {
    /// The fixed policy, or `None` for the searched one.
    pub fn kind(&self) -> Option<PolicyKind> {
        Some(match *self {
            PolicySpec::UnlimitedHbm => PolicyKind::UnlimitedHbm,
            PolicySpec::Static => PolicyKind::Static,
            PolicySpec::ReactiveLru => PolicyKind::ReactiveLru,
            PolicySpec::Page {
                page_size,
                window,
                ratio,
            } => PolicyKind::PageGranularity {
                page_size,
                window,
                ratio,
            },
            PolicySpec::Lookahead { window, ratio } => PolicyKind::Lookahead { window, ratio },
            PolicySpec::SaGuided => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Sweep {
    Sparsity(Vec<f64>),
    Churn(Vec<f64>),
}

impl Sweep {
    fn axis(&self) -> &'static str {
        match self {
            Sweep::Sparsity(_) => "sparsity",
            Sweep::Churn(_) => "churn",
        }
    }

    fn values(&self) -> &[f64] {
        match self {
            Sweep::Sparsity(v) | Sweep::Churn(v) => v,
        }
    }
}

/// Reads and validates a TOML configuration. Relative paths inside it are
/// resolved against the file's directory.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, ExperimentError> {
    let text = fs::read_to_string(path).map_err(|e| ExperimentError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut cfg = parse_config(&text).map_err(|message| ExperimentError::Parse {
        path: path.to_path_buf(),
        message,
    })?;
    let base = path.parent().unwrap_or(Path::new(""));
    if let TraceSource::File(p) = &mut cfg.trace {
        *p = base.join(&*p);
    }
    cfg.output_dir = base.join(&cfg.output_dir);
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, String> {
    toml::from_str(text).map_err(|e| e.to_string())
}

fn prefixed(prefix: &str, e: ValidationError) -> ValidationError {
    ValidationError::new(format!("{prefix}{}", e.field), e.message)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ValidationError> {
        self.memory.validate()?;
        if let Some(f) = self.kv_room_fraction {
            if !(f.is_finite() && f >= 0.0) {
                return Err(ValidationError::new("kv_room_fraction", "must be finite and >= 0"));
            }
        }
        if self.policies.is_empty() {
            return Err(ValidationError::new("policies", "at least one policy is required"));
        }
        for (i, p) in self.policies.iter().enumerate() {
            if let Some(kind) = p.kind() {
                kind.validate().map_err(|e| prefixed(&format!("policies[{i}]."), e))?;
            }
            if self.policies[..i].contains(p) {
                return Err(ValidationError::new(format!("policies[{i}]"), "duplicate policy"));
            }
        }
        if let Some(sa) = &self.sa {
            sa.validate()?;
        }
        match &self.trace {
            TraceSource::File(path) => {
                if !path.is_file() {
                    return Err(ValidationError::new(
                        "trace.file",
                        format!("no such file: {}", path.display()),
                    ));
                }
                if self.sweep.is_some() {
                    return Err(ValidationError::new("sweep", "sweeps require a synthetic trace"));
                }
            }
            TraceSource::Synthetic(s) => {
                s.spec(self.seed)
                    .validate()
                    .map_err(|e| prefixed("trace.synthetic.", e))?;
            }
        }
        if let (Some(sweep), TraceSource::Synthetic(s)) = (&self.sweep, &self.trace) {
            let axis = sweep.axis();
            if sweep.values().is_empty() {
                return Err(ValidationError::new(format!("sweep.{axis}"), "must not be empty"));
            }
            for (i, &v) in sweep.values().iter().enumerate() {
                point_spec(s.spec(self.seed), sweep, v)
                    .validate()
                    .map_err(|e| ValidationError::new(format!("sweep.{axis}[{i}]"), e.message))?;
            }
        }
        Ok(())
    }
}

fn point_spec(mut spec: SynthTraceSpec, sweep: &Sweep, value: f64) -> SynthTraceSpec {
    match sweep {
        Sweep::Sparsity(_) => spec.sparsity = value,
        Sweep::Churn(_) => spec.churn = value,
    }
    spec
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Worker threads; 0 uses one per core.
    pub jobs: usize,
    /// Replaces the configured seed.
    pub seed: Option<u64>,
    pub per_step: bool,
}

/// One policy's throughput relative to both baselines at one sweep point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub point: String,
    pub policy: String,
    pub tokens_per_sec: f64,
    pub vs_static: f64,
    pub vs_unlimited_hbm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointResult {
    pub label: String,
    pub reports: Vec<SimulationReport>,
    pub comparison: Vec<ComparisonRow>,
    pub sa: Option<SaOutcome>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub points: Vec<PointResult>,
}

impl ExperimentOutcome {
    pub fn report_rows(&self) -> Vec<ReportRow> {
        self.points
            .iter()
            .flat_map(|p| p.reports.iter().map(move |r| ReportRow::new(&p.label, r)))
            .collect()
    }

    pub fn comparison_rows(&self) -> Vec<ComparisonRow> {
        self.points.iter().flat_map(|p| p.comparison.iter().cloned()).collect()
    }
}

struct Point {
    label: String,
    trace: DecodeTrace,
    memory: MemoryConfig,
    workload: String,
}

#[derive(Clone, Copy)]
enum Job {
    Listed(PolicySpec),
    Baseline(PolicyKind),
}

struct JobResult {
    report: SimulationReport,
    sa: Option<SaOutcome>,
}

/// Runs every `(point, policy)` pair and returns the results in config
/// order. Nothing is written to disk; see [`write_outputs`].
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentOutcome, ExperimentError> {
    let seed = opts.seed.unwrap_or(cfg.seed);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs)
        .build()
        .expect("thread pool");
    pool.install(|| run_in_pool(cfg, opts, seed))
}

fn run_in_pool(cfg: &ExperimentConfig, opts: &RunOptions, seed: u64) -> Result<ExperimentOutcome, ExperimentError> {
    let points = build_points(cfg, seed)?;

    let mut jobs: Vec<Job> = cfg.policies.iter().map(|&p| Job::Listed(p)).collect();
    for base in [PolicyKind::Static, PolicyKind::UnlimitedHbm] {
        if !cfg.policies.iter().any(|p| p.kind() == Some(base)) {
            jobs.push(Job::Baseline(base));
        }
    }
    let sa_cfg = SaConfig {
        seed,
        ..cfg.sa.unwrap_or_default()
    };

    let pairs: Vec<(usize, Job)> = (0..points.len())
        .flat_map(|i| jobs.iter().map(move |&j| (i, j)))
        .collect();
    let results: Vec<Result<JobResult, ExperimentError>> = pairs
        .par_iter()
        .map(|&(i, job)| run_job(&points[i], job, &sa_cfg, seed, opts.per_step))
        .collect();

    let mut results = results.into_iter();
    let mut out = Vec::with_capacity(points.len());
    for point in points {
        let mut reports = Vec::with_capacity(cfg.policies.len());
        let mut sa = None;
        let mut static_report = None;
        let mut unlimited_report = None;
        for job in &jobs {
            let r = results.next().expect("one result per job")?;
            let kind = match *job {
                Job::Listed(spec) => spec.kind(),
                Job::Baseline(kind) => Some(kind),
            };
            match kind {
                Some(PolicyKind::Static) => static_report = Some(r.report.clone()),
                Some(PolicyKind::UnlimitedHbm) => unlimited_report = Some(r.report.clone()),
                _ => {}
            }
            if let Job::Listed(_) = job {
                if r.sa.is_some() {
                    sa = r.sa;
                }
                reports.push(r.report);
            }
        }
        let static_report = static_report.expect("static baseline always runs");
        let unlimited_report = unlimited_report.expect("unlimited baseline always runs");
        let comparison = reports
            .iter()
            .map(|r| ComparisonRow {
                point: point.label.clone(),
                policy: r.policy.clone(),
                tokens_per_sec: r.tokens_per_sec,
                vs_static: normalize(r, &static_report).expect("same workload"),
                vs_unlimited_hbm: normalize(r, &unlimited_report).expect("same workload"),
            })
            .collect();
        out.push(PointResult {
            label: point.label,
            reports,
            comparison,
            sa,
        });
    }
    Ok(ExperimentOutcome { points: out })
}

fn build_points(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<Point>, ExperimentError> {
    let workloads: Vec<(String, Result<DecodeTrace, ExperimentError>)> = match (&cfg.trace, &cfg.sweep) {
        (TraceSource::File(path), _) => vec![("base".to_string(), load_trace(path))],
        (TraceSource::Synthetic(s), None) => vec![("base".to_string(), synthesize(s.spec(seed)))],
        (TraceSource::Synthetic(s), Some(sweep)) => sweep
            .values()
            .par_iter()
            .map(|&v| {
                let label = format!("{}={v}", sweep.axis());
                (label, synthesize(point_spec(s.spec(seed), sweep, v)))
            })
            .collect(),
    };
    workloads
        .into_iter()
        .map(|(label, trace)| {
            let trace = trace?;
            let memory = point_memory(cfg, trace.header());
            let workload = workload_fingerprint(&trace, &memory);
            Ok(Point {
                label,
                trace,
                memory,
                workload,
            })
        })
        .collect()
}

fn point_memory(cfg: &ExperimentConfig, header: &TraceHeader) -> MemoryConfig {
    let mut memory = cfg.memory;
    if let Some(f) = cfg.kv_room_fraction {
        memory.hbm_capacity = header.weights_bytes() + (header.final_kv_bytes() as f64 * f) as u64;
    }
    memory
}

fn load_trace(path: &Path) -> Result<DecodeTrace, ExperimentError> {
    let file = File::open(path).map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_trace(BufReader::new(file)).map_err(|source| ExperimentError::Trace {
        path: path.to_path_buf(),
        source,
    })
}

fn synthesize(spec: SynthTraceSpec) -> Result<DecodeTrace, ExperimentError> {
    synthesize_trace(&spec).map_err(|e| prefixed("trace.synthetic.", e).into())
}

fn run_job(
    point: &Point,
    job: Job,
    sa_cfg: &SaConfig,
    seed: u64,
    per_step: bool,
) -> Result<JobResult, ExperimentError> {
    let sim_err = |policy: String| {
        let point = point.label.clone();
        move |source| ExperimentError::Sim { point, policy, source }
    };
    let kind = match job {
        Job::Listed(spec) => spec.kind(),
        Job::Baseline(kind) => Some(kind),
    };
    match kind {
        Some(kind) => {
            let run = simulate(&point.trace, &point.memory, kind).map_err(sim_err(kind.label()))?;
            Ok(JobResult {
                report: summarize(&run, point.trace.header(), &point.workload, seed, per_step),
                sa: None,
            })
        }
        None => {
            let outcome = run_sa(&point.trace, &point.memory, sa_cfg).map_err(sim_err("sa_guided".into()))?;
            let best = outcome.best.policy();
            let run = simulate(&point.trace, &point.memory, best).map_err(sim_err(best.label()))?;
            let mut report = summarize(&run, point.trace.header(), &point.workload, seed, per_step);
            report.policy = sa_label(&outcome);
            report.run = crate::metrics::run_fingerprint(&point.workload, &report.policy, seed);
            Ok(JobResult {
                report,
                sa: Some(outcome),
            })
        }
    }
}

/// Report label of an SA-guided run, e.g. `sa_guided(W=13,R=0.7)`.
pub fn sa_label(outcome: &SaOutcome) -> String {
    format!("sa_guided(W={},R={})", outcome.best.window, outcome.best.ratio)
}

/// File-name-safe form of a point or policy label.
pub fn file_stem(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect::<String>()
        .trim_matches('_')
        .to_string()
}

/// Writes `reports.csv`, `comparison.csv`, one `sa_log_<point>.csv` per
/// SA-guided search and, when per-step records were kept,
/// `per_step/<point>__<policy>.csv`. Returns the paths written.
pub fn write_outputs(outcome: &ExperimentOutcome, dir: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ExperimentError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();

    let path = dir.join("reports.csv");
    let file = File::create(&path).map_err(io_err(&path))?;
    write_report_csv(&outcome.report_rows(), BufWriter::new(file)).map_err(|e| io_err(&path)(e.into()))?;
    written.push(path);

    let path = dir.join("comparison.csv");
    let file = File::create(&path).map_err(io_err(&path))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    for row in outcome.comparison_rows() {
        w.serialize(row).map_err(|e| io_err(&path)(e.into()))?;
    }
    w.flush().map_err(io_err(&path))?;
    written.push(path);

    for point in &outcome.points {
        if let Some(sa) = &point.sa {
            let path = dir.join(format!("sa_log_{}.csv", file_stem(&point.label)));
            let file = File::create(&path).map_err(io_err(&path))?;
            let mut w = BufWriter::new(file);
            write_log_csv(&sa.log, &mut w)
                .and_then(|_| w.flush())
                .map_err(io_err(&path))?;
            written.push(path);
        }
        for r in &point.reports {
            let Some(steps) = &r.per_step else { continue };
            let sub = dir.join("per_step");
            fs::create_dir_all(&sub).map_err(io_err(&sub))?;
            let path = sub.join(format!("{}__{}.csv", file_stem(&point.label), file_stem(&r.policy)));
            let file = File::create(&path).map_err(io_err(&path))?;
            let mut w = BufWriter::new(file);
            write_per_step_csv(steps, &mut w)
                .and_then(|_| w.flush())
                .map_err(io_err(&path))?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TINY: &str = r#"
output_dir = "out"
seed = 3
kv_room_fraction = 0.4

[trace.synthetic]
num_layers = 2
prompt_len = 32
decode_len = 8
entry_bytes = 4096
weight_bytes_per_layer = 8192
sparsity = 0.5
churn = 0.1

[[policies]]
kind = "static"
"#;

    #[test]
    fn parses_every_policy_kind() {
        let text = format!(
            "{TINY}\n{}",
            r#"
[[policies]]
kind = "unlimited_hbm"
[[policies]]
kind = "reactive_lru"
[[policies]]
kind = "page"
page_size = 8
[[policies]]
kind = "lookahead"
window = 4
ratio = 0.5
[[policies]]
kind = "sa_guided"
"#
        );
        let cfg = parse_config(&text).unwrap();
        assert_eq!(
            cfg.policies[3],
            PolicySpec::Page {
                page_size: 8,
                window: DEFAULT_PAGE_WINDOW,
                ratio: DEFAULT_PAGE_RATIO
            }
        );
        assert_eq!(cfg.policies[5].kind(), None);
        assert_eq!(cfg.memory, MemoryConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let text = format!("{TINY}\n[memory]\ndram_bandwidth = 1e11\n[sa]\nw_max = 16\n");
        let cfg = parse_config(&text).unwrap();
        assert_eq!(cfg.memory.dram_bandwidth, 1e11);
        assert_eq!(cfg.memory.hbm_bandwidth, MemoryConfig::default().hbm_bandwidth);
        assert_eq!(cfg.sa.unwrap().w_max, 16);
        assert_eq!(cfg.sa.unwrap().alpha, 0.9);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(parse_config(&format!("{TINY}\n[memory]\nhbm_bw = 1.0\n")).is_err());
        assert!(parse_config(&format!(
            "{TINY}\n[[policies]]\nkind = \"lookahead\"\nwindow = 2\nratio = 0.1\nextra = 1\n"
        ))
        .is_err());
        assert!(parse_config(&format!("{TINY}\n[[policies]]\nkind = \"belady\"\n")).is_err());
    }

    fn field_of(text: &str) -> String {
        parse_config(text).unwrap().validate().unwrap_err().field
    }

    #[test]
    fn validation_names_the_field() {
        let no_policies = TINY
            .replace("seed = 3\n", "seed = 3\npolicies = []\n")
            .replace("[[policies]]\nkind = \"static\"\n", "");
        assert_eq!(field_of(&no_policies), "policies");
        assert_eq!(
            field_of(&format!(
                "{TINY}[[policies]]\nkind = \"lookahead\"\nwindow = 0\nratio = 0.5\n"
            )),
            "policies[1].window"
        );
        assert_eq!(
            field_of(&format!("{TINY}[[policies]]\nkind = \"static\"\n")),
            "policies[1]"
        );
        assert_eq!(
            field_of(&TINY.replace("sparsity = 0.5", "sparsity = 1.0")),
            "trace.synthetic.sparsity"
        );
        assert_eq!(field_of(&format!("{TINY}[sweep]\nchurn = []\n")), "sweep.churn");
        assert_eq!(
            field_of(&format!("{TINY}[sweep]\nsparsity = [0.2, 1.5]\n")),
            "sweep.sparsity[1]"
        );
        assert_eq!(
            field_of(&format!("{TINY}[memory]\nlink_bandwidth = 0.0\n")),
            "memory.link_bandwidth"
        );
        assert_eq!(field_of(&format!("{TINY}[sa]\nalpha = 1.5\n")), "sa.alpha");
        assert_eq!(
            field_of(&TINY.replace("kv_room_fraction = 0.4", "kv_room_fraction = -1.0")),
            "kv_room_fraction"
        );
    }

    #[test]
    fn missing_trace_file_names_the_path() {
        let text = r#"
output_dir = "out"
trace = { file = "/nonexistent/x.kvt" }
[[policies]]
kind = "static"
"#;
        let e = parse_config(text).unwrap().validate().unwrap_err();
        assert_eq!(e.field, "trace.file");
        assert!(e.message.contains("/nonexistent/x.kvt"));
    }

    #[test]
    fn single_static_run_gives_one_row() {
        let cfg = parse_config(TINY).unwrap();
        let out = run_experiment(&cfg, &RunOptions::default()).unwrap();
        let rows = out.report_rows();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].policy, "static");
        assert_eq!(rows[0].point, "base");
        let cmp = out.comparison_rows();
        assert_eq!(cmp[0].vs_static, 1.0);
        assert!(cmp[0].vs_unlimited_hbm <= 1.0 + 1e-9);
    }

    #[test]
    fn sweep_cardinality() {
        let text = format!(
            "{TINY}{}",
            r#"
[[policies]]
kind = "unlimited_hbm"
[[policies]]
kind = "reactive_lru"
[[policies]]
kind = "page"
[[policies]]
kind = "sa_guided"
[sa]
w_max = 8
[sweep]
sparsity = [0.5, 0.6, 0.8, 0.9]
"#
        );
        let cfg = parse_config(&text).unwrap();
        let out = run_experiment(
            &cfg,
            &RunOptions {
                jobs: 2,
                ..RunOptions::default()
            },
        )
        .unwrap();
        assert_eq!(out.report_rows().len(), 20);
        assert_eq!(out.comparison_rows().len(), 20);
        assert_eq!(out.points[2].label, "sparsity=0.8");
        assert!(out.points.iter().all(|p| p.sa.is_some()));
        assert!(out.points[0].reports[4].policy.starts_with("sa_guided(W="));
    }

    #[test]
    fn kv_room_fraction_sets_capacity() {
        let cfg = parse_config(TINY).unwrap();
        let TraceSource::Synthetic(s) = cfg.trace else {
            unreachable!()
        };
        let h = s.spec(0).header;
        let m = point_memory(&cfg, &h);
        assert_eq!(m.hbm_capacity, 2 * 8192 + (40 * 2 * 4096) * 2 / 5);
    }

    #[test]
    fn file_stems() {
        assert_eq!(file_stem("sparsity=0.5"), "sparsity_0.5");
        assert_eq!(file_stem("page(S=16,W=8,R=1)"), "page_S_16_W_8_R_1");
    }

    #[test]
    fn weights_over_capacity_is_infeasible() {
        let text = TINY.replace("kv_room_fraction = 0.4\n", "") + "[memory]\nhbm_capacity = 100\n";
        let cfg = parse_config(&text).unwrap();
        let e = run_experiment(&cfg, &RunOptions::default()).unwrap_err();
        assert_eq!(e.exit_code(), 3);
        assert!(e.to_string().contains("static"));
    }
}
