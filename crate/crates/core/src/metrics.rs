//! Reported quantities derived from a simulation run.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::FingerprintMismatch;
use crate::memory_model::{MemoryConfig, StepTraffic};
use crate::simulator::{SimulationRun, StepRecord};
use crate::trace::{write_trace, DecodeTrace, TraceHeader};

/// Identifies the `(trace, memory config)` pair a run was made on.
pub fn workload_fingerprint(trace: &DecodeTrace, cfg: &MemoryConfig) -> String {
    let mut hasher = Sha256::new();
    write_trace(trace, &mut hasher).expect("hashing cannot fail");
    hasher.update(cfg.hbm_bandwidth.to_le_bytes());
    hasher.update(cfg.link_bandwidth.to_le_bytes());
    hasher.update(cfg.dram_bandwidth.to_le_bytes());
    hasher.update(cfg.hbm_capacity.to_le_bytes());
    hasher.update(cfg.dram_capacity.to_le_bytes());
    short_hex(&hasher.finalize())
}

/// Extends a workload fingerprint with the policy and seed.
pub fn run_fingerprint(workload: &str, policy_label: &str, seed: u64) -> String {
    let mut hasher = Sha256::new();
    hasher.update(workload.as_bytes());
    hasher.update([0]);
    hasher.update(policy_label.as_bytes());
    hasher.update(seed.to_le_bytes());
    short_hex(&hasher.finalize())
}

fn short_hex(digest: &[u8]) -> String {
    digest[..8].iter().fold(String::with_capacity(16), |mut s, b| {
        write!(s, "{b:02x}").unwrap();
        s
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationReport {
    pub policy: String,
    pub workload: String,
    pub run: String,
    pub total_latency: f64,
    pub decode_tokens: u32,
    pub tokens_per_sec: f64,
    /// Fraction of KV bytes read that came from HBM; weights excluded.
    pub hbm_hit_rate: f64,
    pub totals: StepTraffic,
    pub weights_read: u64,
    pub per_step: Option<Vec<StepRecord>>,
}

pub fn summarize(
    run: &SimulationRun,
    header: &TraceHeader,
    workload: &str,
    seed: u64,
    keep_steps: bool,
) -> SimulationReport {
    let mut totals = StepTraffic::default();
    for t in run.traffic() {
        totals.accumulate(t);
    }
    let weights_read = header.weight_bytes_per_layer * run.steps.len() as u64;
    let label = run.policy.label();
    SimulationReport {
        run: run_fingerprint(workload, &label, seed),
        policy: label,
        workload: workload.to_string(),
        total_latency: run.total_latency,
        decode_tokens: header.decode_len,
        tokens_per_sec: header.decode_len as f64 / run.total_latency,
        hbm_hit_rate: hit_rate(&totals, weights_read),
        totals,
        weights_read,
        per_step: keep_steps.then(|| run.steps.clone()),
    }
}

fn hit_rate(totals: &StepTraffic, weights_read: u64) -> f64 {
    let hbm_kv = totals.hbm_read - weights_read;
    let all = hbm_kv + totals.dram_read;
    if all == 0 {
        1.0
    } else {
        hbm_kv as f64 / all as f64
    }
}

/// Throughput of `report` relative to `baseline` on the same workload.
pub fn normalize(report: &SimulationReport, baseline: &SimulationReport) -> Result<f64, FingerprintMismatch> {
    if report.workload != baseline.workload {
        return Err(FingerprintMismatch {
            left: report.workload.clone(),
            right: baseline.workload.clone(),
        });
    }
    Ok(report.tokens_per_sec / baseline.tokens_per_sec)
}

/// Flat CSV row of a report, tagged with its sweep point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub point: String,
    pub policy: String,
    pub workload: String,
    pub run: String,
    pub total_latency_s: f64,
    pub decode_tokens: u32,
    pub tokens_per_sec: f64,
    pub hbm_hit_rate: f64,
    pub hbm_read: u64,
    pub hbm_write: u64,
    pub dram_read: u64,
    pub dram_write: u64,
    pub migrate_in: u64,
    pub migrate_out: u64,
    pub weights_read: u64,
}

impl ReportRow {
    pub fn new(point: &str, r: &SimulationReport) -> Self {
        Self {
            point: point.to_string(),
            policy: r.policy.clone(),
            workload: r.workload.clone(),
            run: r.run.clone(),
            total_latency_s: r.total_latency,
            decode_tokens: r.decode_tokens,
            tokens_per_sec: r.tokens_per_sec,
            hbm_hit_rate: r.hbm_hit_rate,
            hbm_read: r.totals.hbm_read,
            hbm_write: r.totals.hbm_write,
            dram_read: r.totals.dram_read,
            dram_write: r.totals.dram_write,
            migrate_in: r.totals.migrate_in,
            migrate_out: r.totals.migrate_out,
            weights_read: r.weights_read,
        }
    }

    pub fn into_report(self) -> (String, SimulationReport) {
        let report = SimulationReport {
            policy: self.policy,
            workload: self.workload,
            run: self.run,
            total_latency: self.total_latency_s,
            decode_tokens: self.decode_tokens,
            tokens_per_sec: self.tokens_per_sec,
            hbm_hit_rate: self.hbm_hit_rate,
            totals: StepTraffic {
                hbm_read: self.hbm_read,
                hbm_write: self.hbm_write,
                dram_read: self.dram_read,
                dram_write: self.dram_write,
                migrate_out: self.migrate_out,
                migrate_in: self.migrate_in,
            },
            weights_read: self.weights_read,
            per_step: None,
        };
        (self.point, report)
    }
}

pub fn write_report_csv<W: Write>(rows: &[ReportRow], dest: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(dest);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_report_csv<R: std::io::Read>(source: R) -> csv::Result<Vec<ReportRow>> {
    csv::Reader::from_reader(source).deserialize().collect()
}

/// `key=value` lines, one per field.
pub fn report_text(r: &SimulationReport) -> String {
    let t = &r.totals;
    let mut s = String::new();
    let fields: [(&str, String); 15] = [
        ("policy", r.policy.clone()),
        ("workload", r.workload.clone()),
        ("run", r.run.clone()),
        ("total_latency_s", r.total_latency.to_string()),
        ("decode_tokens", r.decode_tokens.to_string()),
        ("tokens_per_sec", r.tokens_per_sec.to_string()),
        ("hbm_hit_rate", r.hbm_hit_rate.to_string()),
        ("hbm_read", t.hbm_read.to_string()),
        ("hbm_write", t.hbm_write.to_string()),
        ("dram_read", t.dram_read.to_string()),
        ("dram_write", t.dram_write.to_string()),
        ("migrate_in", t.migrate_in.to_string()),
        ("migrate_out", t.migrate_out.to_string()),
        ("weights_read", r.weights_read.to_string()),
        ("per_step_rows", r.per_step.as_ref().map_or(0, Vec::len).to_string()),
    ];
    for (k, v) in fields {
        writeln!(s, "{k}={v}").unwrap();
    }
    s
}

pub fn write_per_step_csv<W: Write>(steps: &[StepRecord], mut dest: W) -> std::io::Result<()> {
    writeln!(
        dest,
        "n,l,t_h,t_e,t,hbm_read,hbm_write,dram_read,dram_write,migrate_out,migrate_in,hits,misses"
    )?;
    for s in steps {
        let t = &s.traffic;
        writeln!(
            dest,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            s.n,
            s.l,
            s.hbm_latency,
            s.dram_latency,
            s.latency,
            t.hbm_read,
            t.hbm_write,
            t.dram_read,
            t.dram_write,
            t.migrate_out,
            t.migrate_in,
            s.hits,
            s.misses
        )?;
    }
    dest.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policies::PolicyKind;
    use crate::simulator::simulate;
    use crate::trace::{synthesize_trace, SynthTraceSpec};

    fn setup() -> (DecodeTrace, MemoryConfig) {
        let trace = synthesize_trace(&SynthTraceSpec {
            header: TraceHeader {
                num_layers: 2,
                prompt_len: 40,
                decode_len: 16,
                entry_bytes: 1024,
                weight_bytes_per_layer: 4096,
            },
            sparsity: 0.5,
            churn: 0.3,
            per_layer_independent: false,
            seed: 21,
        })
        .unwrap();
        let h = trace.header();
        let cfg = MemoryConfig {
            hbm_capacity: h.weights_bytes() + h.final_kv_bytes() / 3,
            ..MemoryConfig::default()
        };
        (trace, cfg)
    }

    fn report(trace: &DecodeTrace, cfg: &MemoryConfig, p: PolicyKind) -> SimulationReport {
        let wl = workload_fingerprint(trace, cfg);
        summarize(&simulate(trace, cfg, p).unwrap(), trace.header(), &wl, 0, true)
    }

    #[test]
    fn unlimited_hit_rate_is_one() {
        let (t, c) = setup();
        assert_eq!(report(&t, &c, PolicyKind::UnlimitedHbm).hbm_hit_rate, 1.0);
    }

    #[test]
    fn tokens_per_sec_definition() {
        let (t, c) = setup();
        let mut r = report(&t, &c, PolicyKind::Static);
        assert!((r.tokens_per_sec * r.total_latency - 16.0).abs() <= 16.0 * 1e-12);
        r.decode_tokens = 100;
        r.total_latency = 50.0;
        r.tokens_per_sec = r.decode_tokens as f64 / r.total_latency;
        assert_eq!(r.tokens_per_sec, 2.0);
    }

    #[test]
    fn totals_conserve_per_step_bytes() {
        let (t, c) = setup();
        let r = report(&t, &c, PolicyKind::ReactiveLru);
        let steps = r.per_step.as_ref().unwrap();
        let sum = |f: fn(&StepTraffic) -> u64| steps.iter().map(|s| f(&s.traffic)).sum::<u64>();
        assert_eq!(sum(|t| t.hbm_read), r.totals.hbm_read);
        assert_eq!(sum(|t| t.dram_read), r.totals.dram_read);
        assert_eq!(sum(|t| t.migrate_in), r.totals.migrate_in);
        assert_eq!(sum(|t| t.migrate_out), r.totals.migrate_out);
        assert_eq!(sum(|t| t.hbm_write) + sum(|t| t.dram_write), 32 * 1024);
        let kv_hbm = r.totals.hbm_read - r.weights_read;
        assert_eq!(r.hbm_hit_rate, kv_hbm as f64 / (kv_hbm + r.totals.dram_read) as f64);
    }

    #[test]
    fn normalization() {
        let (t, c) = setup();
        let s = report(&t, &c, PolicyKind::Static);
        let u = report(&t, &c, PolicyKind::UnlimitedHbm);
        let l = report(&t, &c, PolicyKind::Lookahead { window: 4, ratio: 0.5 });
        assert_eq!(normalize(&s, &s).unwrap(), 1.0);
        assert!(normalize(&l, &u).unwrap() <= 1.0 + 1e-9);
        let prod = normalize(&l, &s).unwrap() * normalize(&s, &l).unwrap();
        assert!((prod - 1.0).abs() < 1e-12);

        let other = MemoryConfig {
            dram_bandwidth: 1e11,
            ..c
        };
        let o = report(&t, &other, PolicyKind::Static);
        assert!(normalize(&s, &o).is_err());
    }

    #[test]
    fn csv_rows_round_trip() {
        let (t, c) = setup();
        let rows: Vec<ReportRow> = [PolicyKind::Static, PolicyKind::ReactiveLru]
            .iter()
            .map(|&p| ReportRow::new("sparsity=0.5", &report(&t, &c, p)))
            .collect();
        let mut buf = Vec::new();
        write_report_csv(&rows, &mut buf).unwrap();
        assert_eq!(read_report_csv(&buf[..]).unwrap(), rows);
        let (point, back) = rows[1].clone().into_report();
        assert_eq!(point, "sparsity=0.5");
        assert_eq!(back.total_latency, rows[1].total_latency_s);
    }

    #[test]
    fn text_block_lists_fields() {
        let (t, c) = setup();
        let text = report_text(&report(&t, &c, PolicyKind::Static));
        assert!(text.starts_with("policy=static\n"));
        assert_eq!(text.lines().count(), 15);
    }
}
