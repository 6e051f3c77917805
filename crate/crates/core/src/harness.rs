//! Experiment driver: single runs, parallel sweeps, reports and CSV I/O.
//!
//! Sweep results are written as CSV with the `run-v1` column schema (see
//! [`RunRecord`]). Every row echoes its full configuration as JSON, so any
//! row can be rerun on its own.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytic::{self, AnalyticalInput, AnalyticalParams, FitResult, FitRun, ModelMachine, Validation};
use crate::config::{ModelSpec, RunConfig, Workload};
use crate::error::{config_err, Error, Result};
use crate::policy::{BypassMode, Replacement};
use crate::sim::{simulate, RunResult};
use crate::tracegen::GroupAlloc;

/// Version tag written into the `schema` column of every result row.
pub const SCHEMA: &str = "run-v1";

/// Builds the workload's program and simulates it.
pub fn run_single(cfg: &RunConfig) -> Result<RunResult> {
    cfg.validate()?;
    let program = cfg.build_program()?;
    let result = simulate(cfg, &program)?;
    result.check_conservation()?;
    Ok(result)
}

/// One sweep dimension: a dotted config path and the values it takes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub path: String,
    pub values: Vec<serde_json::Value>,
}

impl Axis {
    pub fn new<T: Serialize>(path: &str, values: impl IntoIterator<Item = T>) -> Self {
        Self {
            path: path.to_string(),
            values: values
                .into_iter()
                .map(|v| serde_json::to_value(v).expect("axis value serializes"))
                .collect(),
        }
    }
}

/// Axes file layout: a list of `[[axis]]` tables.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AxesFile {
    #[serde(default)]
    pub axis: Vec<Axis>,
}

impl AxesFile {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

/// Expands the Cartesian product of `axes` over `base`. The first axis
/// varies slowest.
pub fn expand(base: &RunConfig, axes: &[Axis]) -> Result<Vec<(RunConfig, String)>> {
    if axes.is_empty() {
        return Err(config_err("a sweep needs at least one axis"));
    }
    if let Some(a) = axes.iter().find(|a| a.values.is_empty()) {
        return Err(config_err(format!("axis {} has no values", a.path)));
    }
    let mut out = vec![(base.clone(), Vec::<String>::new())];
    for axis in axes {
        let mut next = Vec::with_capacity(out.len() * axis.values.len());
        for (cfg, tags) in &out {
            for v in &axis.values {
                let c = cfg.with_override(&axis.path, v)?;
                let mut t = tags.clone();
                t.push(format!("{}={}", axis.path, compact(v)));
                next.push((c, t));
            }
        }
        out = next;
    }
    Ok(out.into_iter().map(|(c, t)| (c, t.join(";"))).collect())
}

fn compact(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// A sweep row: its configuration and either a result or the failure.
#[derive(Debug)]
pub struct SweepRow {
    pub index: usize,
    pub overrides: String,
    pub config: RunConfig,
    pub outcome: Result<RunResult>,
}

/// Runs every point of the sweep, in parallel. A failing point is recorded
/// in its row and does not stop the others.
pub fn run_sweep(base: &RunConfig, axes: &[Axis]) -> Result<Vec<SweepRow>> {
    let points = expand(base, axes)?;
    Ok(run_configs(points))
}

/// Runs a prepared list of `(config, override description)` points.
pub fn run_configs(points: Vec<(RunConfig, String)>) -> Vec<SweepRow> {
    points
        .into_par_iter()
        .enumerate()
        .map(|(index, (config, overrides))| {
            let outcome = run_single(&config);
            if let Err(e) = &outcome {
                log::warn!("sweep row {index} ({overrides}) failed: {e}");
            }
            SweepRow {
                index,
                overrides,
                config,
                outcome,
            }
        })
        .collect()
}

/// One row of the `run-v1` result table.
///
/// Counts are line requests. `status` is `ok` or `error`; failed rows carry
/// `error_category` and `error` and leave the metric columns empty.
/// `config_json` holds the complete configuration of the row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema: String,
    pub index: usize,
    pub label: String,
    pub policy: String,
    pub overrides: String,
    pub status: String,
    pub error_category: Option<String>,
    pub error: Option<String>,
    pub cycles: Option<u64>,
    pub n_mem: Option<u64>,
    pub n_hit: Option<u64>,
    pub n_mshr_hit: Option<u64>,
    pub n_cold: Option<u64>,
    pub n_cf: Option<u64>,
    pub n_bypassed_cold: Option<u64>,
    pub n_bypassed_cf: Option<u64>,
    pub n_pinned: Option<u64>,
    pub evictions: Option<u64>,
    pub dbp_evictions: Option<u64>,
    pub writebacks: Option<u64>,
    pub write_through: Option<u64>,
    pub dram_reads: Option<u64>,
    pub dram_writes: Option<u64>,
    pub n_cold_dram: Option<u64>,
    pub n_cf_dram: Option<u64>,
    pub hit_rate: Option<f64>,
    pub reuse_hit_rate: Option<f64>,
    /// Measured DRAM read rate in burst and conflict phases, lines/cycle.
    pub bw_cold: Option<f64>,
    pub bw_cf: Option<f64>,
    pub mean_gear: Option<f64>,
    pub n_comp: Option<u64>,
    pub n_cores: Option<u64>,
    pub v_llc: Option<u64>,
    /// Peak DRAM bandwidth, lines/cycle.
    pub bw_peak: Option<f64>,
    pub s_work: Option<u64>,
    pub config_json: String,
}

impl RunRecord {
    pub fn from_result(index: usize, overrides: &str, cfg: &RunConfig, r: &RunResult) -> Self {
        let c = &r.counters;
        let mean_gear = if r.gear_series.is_empty() {
            cfg.policy.b_gear as f64
        } else {
            r.gear_series.iter().sum::<f64>() / r.gear_series.len() as f64
        };
        Self {
            schema: SCHEMA.into(),
            index,
            label: cfg.display_label(),
            policy: cfg.policy.label(),
            overrides: overrides.into(),
            status: "ok".into(),
            error_category: None,
            error: None,
            cycles: Some(r.cycles),
            n_mem: Some(r.n_mem),
            n_hit: Some(c.hit),
            n_mshr_hit: Some(c.mshr_hit),
            n_cold: Some(c.cold_miss),
            n_cf: Some(c.conflict_miss),
            n_bypassed_cold: Some(c.bypassed_cold),
            n_bypassed_cf: Some(c.bypassed_cf),
            n_pinned: Some(c.pinned_requests),
            evictions: Some(c.evictions),
            dbp_evictions: Some(c.dbp_evictions),
            writebacks: Some(c.writebacks),
            write_through: Some(c.write_through),
            dram_reads: Some(r.dram.reads),
            dram_writes: Some(r.dram.writes),
            n_cold_dram: Some(c.dram_cold()),
            n_cf_dram: Some(c.dram_cf()),
            hit_rate: Some(r.hit_rate()),
            reuse_hit_rate: Some(r.reuse_hit_rate()),
            bw_cold: r.bw_cold,
            bw_cf: r.bw_cf,
            mean_gear: Some(mean_gear),
            n_comp: Some(r.stats.n_comp),
            n_cores: Some(r.committed.len() as u64),
            v_llc: Some(r.n_slices as u64),
            bw_peak: Some(r.peak_bw_lines),
            s_work: Some(r.stats.s_work),
            config_json: cfg.to_json(),
        }
    }

    pub fn failed(index: usize, overrides: &str, cfg: &RunConfig, err: &Error) -> Self {
        Self {
            schema: SCHEMA.into(),
            index,
            label: cfg.display_label(),
            policy: cfg.policy.label(),
            overrides: overrides.into(),
            status: "error".into(),
            error_category: Some(err.category().into()),
            error: Some(err.to_string()),
            cycles: None,
            n_mem: None,
            n_hit: None,
            n_mshr_hit: None,
            n_cold: None,
            n_cf: None,
            n_bypassed_cold: None,
            n_bypassed_cf: None,
            n_pinned: None,
            evictions: None,
            dbp_evictions: None,
            writebacks: None,
            write_through: None,
            dram_reads: None,
            dram_writes: None,
            n_cold_dram: None,
            n_cf_dram: None,
            hit_rate: None,
            reuse_hit_rate: None,
            bw_cold: None,
            bw_cf: None,
            mean_gear: None,
            n_comp: None,
            n_cores: None,
            v_llc: None,
            bw_peak: None,
            s_work: None,
            config_json: cfg.to_json(),
        }
    }

    pub fn from_row(row: &SweepRow) -> Self {
        match &row.outcome {
            Ok(r) => Self::from_result(row.index, &row.overrides, &row.config, r),
            Err(e) => Self::failed(row.index, &row.overrides, &row.config, e),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::from_json(&self.config_json)
    }

    /// Key shared by rows that differ only in policy and label.
    pub fn group_key(&self) -> Result<String> {
        let mut c = self.config()?;
        c.policy = Default::default();
        c.label.clear();
        Ok(c.to_json())
    }

    /// The measured counts in the analytical model's terms.
    pub fn analytical_input(&self) -> Result<AnalyticalInput> {
        let cfg = self.config()?;
        let need = |v: Option<u64>, name: &str| {
            v.map(|x| x as f64)
                .ok_or_else(|| Error::Analysis(format!("row {} has no {name}", self.index)))
        };
        let n_hit = need(self.n_hit, "n_hit")? + need(self.n_mshr_hit, "n_mshr_hit")?;
        let n_cold = need(self.n_cold, "n_cold")? + need(self.n_bypassed_cold, "n_bypassed_cold")?;
        let n_cf = need(self.n_cf, "n_cf")? + need(self.n_bypassed_cf, "n_bypassed_cf")?;
        Ok(AnalyticalInput {
            n_hit,
            n_cold,
            n_cf,
            n_comp: need(self.n_comp, "n_comp")?,
            n_mem: n_hit + n_cold + n_cf,
            n_cold_dram: need(self.n_cold_dram, "n_cold_dram")?,
            n_cf_dram: need(self.n_cf_dram, "n_cf_dram")?,
            n_cores: need(self.n_cores, "n_cores")?,
            ipc_mem: cfg.hardware.core.ipc_mem as f64,
            ipc_comp: cfg.hardware.core.ipc_comp as f64,
            v_llc: need(self.v_llc, "v_llc")?,
            bw: self
                .bw_peak
                .ok_or_else(|| Error::Analysis(format!("row {} has no bw_peak", self.index)))?,
        })
    }

    pub fn fit_run(&self) -> Result<FitRun> {
        Ok(FitRun {
            input: self.analytical_input()?,
            cycles: self
                .cycles
                .ok_or_else(|| Error::Analysis(format!("row {} has no cycles", self.index)))? as f64,
            bw_cold: self.bw_cold,
            bw_cf: self.bw_cf,
        })
    }
}

pub fn records(rows: &[SweepRow]) -> Vec<RunRecord> {
    rows.iter().map(RunRecord::from_row).collect()
}

pub fn write_records<W: Write>(out: W, records: &[RunRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a `run-v1` table, rejecting rows of any other schema.
pub fn read_records<R: Read>(input: R) -> Result<Vec<RunRecord>> {
    let mut rd = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for row in rd.deserialize() {
        let r: RunRecord = row?;
        if r.schema != SCHEMA {
            return Err(Error::Parse(format!("unsupported result schema {:?}", r.schema)));
        }
        out.push(r);
    }
    Ok(out)
}

pub fn write_records_file(path: &Path, records: &[RunRecord]) -> Result<()> {
    write_records(std::fs::File::create(path)?, records)
}

pub fn read_records_file(path: &Path) -> Result<Vec<RunRecord>> {
    read_records(std::fs::File::open(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupRow {
    pub group: usize,
    pub setting: String,
    pub label: String,
    pub policy: String,
    pub cycles: u64,
    pub baseline_cycles: u64,
    pub speedup: f64,
}

/// Dynamic policy against the best static gear of the same replacement and
/// DBP setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GearGap {
    pub group: usize,
    pub setting: String,
    pub policy: String,
    pub cycles: u64,
    pub best_static: String,
    pub best_static_cycles: u64,
    /// `cycles / best_static_cycles - 1`.
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Report {
    pub speedups: Vec<SpeedupRow>,
    pub gear_gaps: Vec<GearGap>,
}

impl Report {
    /// Speedup of `policy` in `group`, if present.
    pub fn speedup(&self, group: usize, policy: &str) -> Option<f64> {
        self.speedups
            .iter()
            .find(|r| r.group == group && r.policy == policy)
            .map(|r| r.speedup)
    }
}

/// Groups successful rows by everything except the policy and computes
/// `cycles(baseline) / cycles(policy)` within each group, plus the
/// dynamic-vs-best-static gear gaps.
pub fn report(records: &[RunRecord], baseline: &str) -> Result<Report> {
    let mut groups: BTreeMap<String, Vec<&RunRecord>> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for r in records.iter().filter(|r| r.is_ok()) {
        let key = r.group_key()?;
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    if groups.is_empty() {
        return Err(Error::Analysis("no successful rows to report".into()));
    }
    let mut rep = Report::default();
    for (gi, key) in order.iter().enumerate() {
        let rows = &groups[key];
        let setting = group_setting(rows);
        let base = rows
            .iter()
            .find(|r| r.policy == baseline)
            .ok_or_else(|| Error::Analysis(format!("baseline {baseline:?} missing from group {setting:?}")))?;
        let base_cycles = base.cycles.unwrap_or(0);
        for r in rows {
            let cycles = r.cycles.unwrap_or(0);
            rep.speedups.push(SpeedupRow {
                group: gi,
                setting: setting.clone(),
                label: r.label.clone(),
                policy: r.policy.clone(),
                cycles,
                baseline_cycles: base_cycles,
                speedup: base_cycles as f64 / cycles as f64,
            });
        }
        for r in rows {
            let cfg = r.config()?;
            if !matches!(cfg.policy.bypass_mode, BypassMode::Dynamic | BypassMode::GqaDynamic) {
                continue;
            }
            let mut best: Option<(&RunRecord, u64)> = None;
            for s in rows {
                let sc = s.config()?;
                if sc.policy.bypass_mode == BypassMode::Static
                    && sc.policy.replacement == cfg.policy.replacement
                    && sc.policy.dbp == cfg.policy.dbp
                {
                    let c = s.cycles.unwrap_or(u64::MAX);
                    if best.is_none_or(|(_, b)| c < b) {
                        best = Some((s, c));
                    }
                }
            }
            if let Some((s, bc)) = best {
                let cycles = r.cycles.unwrap_or(0);
                rep.gear_gaps.push(GearGap {
                    group: gi,
                    setting: setting.clone(),
                    policy: r.policy.clone(),
                    cycles,
                    best_static: s.policy.clone(),
                    best_static_cycles: bc,
                    gap: cycles as f64 / bc as f64 - 1.0,
                });
            }
        }
    }
    Ok(rep)
}

/// Readable description of a group: the override tags that do not touch
/// the policy.
fn group_setting(rows: &[&RunRecord]) -> String {
    rows[0]
        .overrides
        .split(';')
        .filter(|t| !t.is_empty() && !t.starts_with("policy") && !t.starts_with("label"))
        .collect::<Vec<_>>()
        .join(";")
}

/// Writes `report` as plot-ready CSVs into `dir`: `speedup.csv` (policy
/// against capacity and other settings) and `gear_gap.csv`.
pub fn write_report(dir: &Path, rep: &Report) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("speedup.csv"))?;
    for r in &rep.speedups {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("gear_gap.csv"))?;
    for g in &rep.gear_gaps {
        w.serialize(g)?;
    }
    w.flush()?;
    Ok(())
}

/// Long-format hit-rate series: one line per (run, window).
pub fn write_hit_rate_series<W: Write>(out: W, runs: &[(&RunConfig, &RunResult)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["label", "policy", "window", "end_cycle", "hit_rate"])?;
    for (cfg, r) in runs {
        let win = cfg.metrics.hit_rate_window;
        for (i, h) in r.hit_rate_series.iter().enumerate() {
            w.write_record([
                cfg.display_label(),
                cfg.policy.label(),
                i.to_string(),
                ((i as u64 + 1) * win).to_string(),
                format!("{h:.6}"),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Long-format gear and per-slice eviction series, one line per window.
pub fn write_gear_series<W: Write>(out: W, runs: &[(&RunConfig, &RunResult)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["label", "policy", "window", "end_cycle", "mean_gear", "max_slice_evictions"])?;
    for (cfg, r) in runs {
        let win = cfg.policy.window;
        for (i, g) in r.gear_series.iter().enumerate() {
            let ev = r.eviction_series.get(i).and_then(|e| e.iter().max()).copied().unwrap_or(0);
            w.write_record([
                cfg.display_label(),
                cfg.policy.label(),
                i.to_string(),
                ((i as u64 + 1) * win).to_string(),
                format!("{g:.4}"),
                ev.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Where the analytical model takes its request counts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountSource {
    /// The simulator's own classification.
    Measured,
    /// Derived from the dataflow and the policy without simulating.
    Dataflow,
}

/// Machine description of `cfg` for count prediction.
pub fn model_machine(cfg: &RunConfig) -> Result<ModelMachine> {
    let hw = &cfg.hardware;
    let map = hw.llc.address_map()?;
    Ok(ModelMachine {
        s_llc: hw.llc.total_size,
        assoc: hw.llc.assoc,
        b_bits: cfg.tmu.b_bits,
        n_cores: hw.core.n_cores as f64,
        ipc_mem: hw.core.ipc_mem as f64,
        ipc_comp: hw.core.ipc_comp as f64,
        v_llc: map.n_slices() as f64,
        bw: hw.dram.peak_bw_bytes_per_cycle / hw.llc.line_size as f64,
    })
}

/// Model input of a row from the chosen count source.
pub fn record_input(r: &RunRecord, source: CountSource) -> Result<AnalyticalInput> {
    match source {
        CountSource::Measured => r.analytical_input(),
        CountSource::Dataflow => {
            let cfg = r.config()?;
            let program = cfg.build_program()?;
            analytic::predict_counts(&program.stats, &cfg.policy, &model_machine(&cfg)?)
        }
    }
}

/// Fits the model coefficients to the successful rows.
pub fn fit_records(records: &[RunRecord]) -> Result<FitResult> {
    let runs = records
        .iter()
        .filter(|r| r.is_ok())
        .map(RunRecord::fit_run)
        .collect::<Result<Vec<_>>>()?;
    analytic::fit_coefficients(&runs)
}

/// One point of the predicted-vs-simulated scatter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub index: usize,
    pub label: String,
    pub policy: String,
    pub predicted: f64,
    pub simulated: f64,
}

/// Predicts every successful row with `params` and scores the predictions.
pub fn validate_records(
    records: &[RunRecord],
    params: &AnalyticalParams,
    source: CountSource,
) -> Result<(Validation, Vec<ScatterPoint>)> {
    params.validate()?;
    let points = records
        .iter()
        .filter(|r| r.is_ok())
        .map(|r| {
            let input = record_input(r, source)?;
            Ok(ScatterPoint {
                index: r.index,
                label: r.label.clone(),
                policy: r.policy.clone(),
                predicted: analytic::predict_time(&input, params)?.total,
                simulated: r.cycles.unwrap_or(0) as f64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(f64, f64)> = points.iter().map(|p| (p.predicted, p.simulated)).collect();
    Ok((analytic::validate(&pairs)?, points))
}

pub fn write_scatter<W: Write>(out: W, points: &[ScatterPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

/// Desk-scale experiment recipes: a base configuration plus sweep axes.
///
/// The machine is a 4-core slice of the default system (one quarter of its
/// DRAM bandwidth) running small attention heads, so every run finishes in
/// about a second.
pub mod recipes {
    use super::*;

    pub const KB: u64 = 1 << 10;

    /// 4 cores, 51.2 B/cycle DRAM, temporal attention on `desk-temporal`.
    pub fn desk_base() -> RunConfig {
        let mut c = RunConfig::default();
        c.hardware.core.n_cores = 4;
        c.hardware.dram.peak_bw_bytes_per_cycle = 51.2;
        c.hardware.llc.total_size = 256 * KB;
        c
    }

    pub fn attention(model: &str, seq_len: u32, batch: u32, alloc: GroupAlloc) -> Workload {
        Workload::FlashAttention {
            model: ModelSpec::Preset(model.into()),
            seq_len,
            batch,
            group_alloc: alloc,
            tile_rows: 64,
            tile_cols: 64,
        }
    }

    /// A policy table for the `policy` axis.
    pub fn policy(replacement: Replacement, dbp: bool, mode: BypassMode, gear: u32) -> serde_json::Value {
        let mut p = crate::policy::PolicyConfig {
            replacement,
            dbp,
            bypass_mode: mode,
            b_gear: gear,
            ..Default::default()
        };
        if mode == BypassMode::Off {
            p.b_gear = 0;
        }
        serde_json::to_value(p).expect("policy serializes")
    }

    pub fn sizes(kb: &[u64]) -> Axis {
        Axis::new("hardware.llc.total_size", kb.iter().map(|k| k * KB))
    }

    /// LRU across cache sizes below the working set.
    pub fn thrashing(seq_len: u32, kb: &[u64]) -> (RunConfig, Vec<Axis>) {
        let mut base = desk_base();
        base.workload = attention("desk-temporal", seq_len, 1, GroupAlloc::Temporal);
        (base, vec![sizes(kb)])
    }

    /// `lru`, `at`, `lru+bypass`, `at+bypass` (and `+dbp`) across sizes.
    pub fn policy_vs_capacity(workload: Workload, kb: &[u64]) -> (RunConfig, Vec<Axis>) {
        let mut base = desk_base();
        let bypass = match &workload {
            Workload::FlashAttention {
                group_alloc: GroupAlloc::Spatial,
                ..
            } => BypassMode::GqaDynamic,
            _ => BypassMode::Dynamic,
        };
        base.workload = workload;
        let policies = vec![
            policy(Replacement::Lru, false, BypassMode::Off, 0),
            policy(Replacement::At, false, BypassMode::Off, 0),
            policy(Replacement::Lru, false, bypass, 0),
            policy(Replacement::At, false, bypass, 0),
            policy(Replacement::At, true, bypass, 0),
        ];
        (base, vec![sizes(kb), Axis::new("policy", policies)])
    }

    /// Every static gear plus the dynamic controller for one replacement.
    pub fn gear_sweep(workload: Workload, kb: &[u64], replacement: Replacement, b_bits: u32) -> (RunConfig, Vec<Axis>) {
        let mut base = desk_base();
        base.workload = workload;
        base.tmu.b_bits = b_bits;
        let mut policies: Vec<_> = (0..=(1u32 << b_bits))
            .map(|g| policy(replacement, false, BypassMode::Static, g))
            .collect();
        policies.push(policy(replacement, false, BypassMode::Dynamic, 0));
        policies.push(policy(replacement, false, BypassMode::Off, 0));
        (base, vec![sizes(kb), Axis::new("policy", policies)])
    }

    /// Spatial group allocation: LRU, gqa_bypass and the static gears.
    pub fn gqa_spatial(seq_len: u32, kb: &[u64]) -> (RunConfig, Vec<Axis>) {
        let mut base = desk_base();
        base.workload = attention("desk-spatial", seq_len, 1, GroupAlloc::Spatial);
        let mut policies = vec![
            policy(Replacement::Lru, false, BypassMode::Off, 0),
            policy(Replacement::At, false, BypassMode::Off, 0),
            policy(Replacement::At, false, BypassMode::GqaDynamic, 0),
        ];
        policies.extend((1..=8).map(|g| policy(Replacement::Lru, false, BypassMode::Static, g)));
        (base, vec![sizes(kb), Axis::new("policy", policies)])
    }

    /// Back-to-back batches with and without dead-block prediction.
    pub fn multi_batch(seq_len: u32, batch: u32, kb: &[u64]) -> (RunConfig, Vec<Axis>) {
        let mut base = desk_base();
        base.workload = attention("desk-temporal", seq_len, batch, GroupAlloc::Temporal);
        let policies = vec![
            policy(Replacement::Lru, false, BypassMode::Off, 0),
            policy(Replacement::At, false, BypassMode::Off, 0),
            policy(Replacement::At, false, BypassMode::Dynamic, 0),
            policy(Replacement::At, true, BypassMode::Dynamic, 0),
        ];
        (base, vec![sizes(kb), Axis::new("policy", policies)])
    }

    /// Model validation sweep: cache size x sequence length x workload x
    /// policy. DBP is on everywhere except plain LRU; the bypass variants
    /// are gears 1 and 3 and the dynamic controller (gqa_bypass under
    /// spatial allocation).
    pub fn validation() -> Vec<(RunConfig, String)> {
        let mut out = Vec::new();
        let workloads = [
            ("desk-temporal", GroupAlloc::Temporal),
            ("desk-spatial", GroupAlloc::Spatial),
            ("desk-mha", GroupAlloc::Temporal),
        ];
        for kb in [128u64, 256, 512] {
            for seq in [256u32, 512, 1024] {
                for (model, alloc) in workloads {
                    let dynamic = if alloc == GroupAlloc::Spatial {
                        BypassMode::GqaDynamic
                    } else {
                        BypassMode::Dynamic
                    };
                    let mut policies = vec![
                        (Replacement::Lru, false, BypassMode::Off, 0),
                        (Replacement::Lru, true, BypassMode::Off, 0),
                        (Replacement::At, true, BypassMode::Off, 0),
                    ];
                    for r in [Replacement::Lru, Replacement::At] {
                        policies.push((r, true, BypassMode::Static, 1));
                        policies.push((r, true, BypassMode::Static, 3));
                        policies.push((r, true, dynamic, 0));
                    }
                    for (r, dbp, mode, gear) in policies {
                        let mut c = desk_base();
                        c.hardware.llc.total_size = kb * KB;
                        c.workload = attention(model, seq, 1, alloc);
                        c.policy = serde_json::from_value(policy(r, dbp, mode, gear)).expect("policy");
                        let tag = format!("model={model};seq_len={seq};size_kb={kb};policy={}", c.policy.label());
                        c.label = tag.replace(';', " ");
                        out.push((c, tag));
                    }
                }
            }
        }
        out
    }
}
