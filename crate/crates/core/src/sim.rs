//! The cycle loop tying cores, LLC, TMU and DRAM together.
//!
//! Per cycle: DRAM completions move into slice response queues, every slice
//! takes one action, due load responses return to the cores, then the cores
//! issue. Programs run phase by phase; a phase boundary waits for every core
//! to drain and applies the next phase's TMU clears and registrations.

use serde::{Deserialize, Serialize};

use crate::analytic::AnalyticalInput;
use crate::config::RunConfig;
use crate::cores::{commit_counts, make_cores, CoreState};
use crate::dram::{Dram, DramCounters, DramOp, DramRequest};
use crate::error::{Error, Result};
use crate::llc::{AccessCtx, Llc, LlcCounters};
use crate::policy::{pairing, slower_cores, BypassMode};
use crate::tmu::{TensorId, Tmu, TmuDiagnostics, TmuParams};
use crate::tracegen::{DataflowProgram, DataflowStats};

/// Cycles without any progress after which the run is declared deadlocked.
const STALL_LIMIT: u64 = 1_000_000;

/// Share of a window's DRAM reads one class must reach for the window to
/// count as a phase of that class.
const PHASE_PURITY: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub label: String,
    pub policy: String,
    pub cycles: u64,
    /// Line requests accepted by the LLC.
    pub n_mem: u64,
    pub counters: LlcCounters,
    /// Counters after the warmup prefix.
    pub steady: LlcCounters,
    pub hit_rate_series: Vec<f64>,
    /// Evictions per slice per controller window.
    pub eviction_series: Vec<Vec<u32>>,
    /// Mean gear over slices per controller window.
    pub gear_series: Vec<f64>,
    pub dram: DramCounters,
    /// Mean DRAM read rate over burst-phase and conflict-phase windows,
    /// lines per cycle.
    pub bw_cold: Option<f64>,
    pub bw_cf: Option<f64>,
    pub committed: Vec<u64>,
    pub stall_cycles: Vec<u64>,
    pub tmu: TmuDiagnostics,
    pub tmu_params: TmuParams,
    pub stats: DataflowStats,
    pub n_slices: usize,
    pub peak_bw_lines: f64,
}

impl RunResult {
    /// Hit rate of requests to previously fetched lines after warmup.
    pub fn reuse_hit_rate(&self) -> f64 {
        let s = &self.steady;
        if s.reuse_requests == 0 {
            0.0
        } else {
            s.reuse_hits as f64 / s.reuse_requests as f64
        }
    }

    pub fn hit_rate(&self) -> f64 {
        let c = &self.counters;
        (c.hit + c.mshr_hit) as f64 / self.n_mem.max(1) as f64
    }

    /// Checks the request and DRAM conservation identities.
    pub fn check_conservation(&self) -> Result<()> {
        let c = &self.counters;
        if c.classified() != self.n_mem {
            return Err(Error::Invariant(format!(
                "n_mem {} != hit + mshr_hit + cold + cf + bypassed = {}",
                self.n_mem,
                c.classified()
            )));
        }
        if self.n_mem != self.stats.n_mem {
            return Err(Error::Invariant(format!(
                "LLC saw {} requests, the trace has {}",
                self.n_mem, self.stats.n_mem
            )));
        }
        let fetched = c.cold_miss + c.conflict_miss + c.bypassed() - c.write_through;
        if self.dram.reads != c.dram_reads() || c.dram_reads() != fetched {
            return Err(Error::Invariant(format!(
                "DRAM reads {} vs fills + bypassed reads {} vs missing requests {fetched}",
                self.dram.reads,
                c.dram_reads()
            )));
        }
        if self.dram.writes != c.dram_writes() {
            return Err(Error::Invariant(format!(
                "DRAM writes {} != writebacks + write-throughs {}",
                self.dram.writes,
                c.dram_writes()
            )));
        }
        Ok(())
    }

    /// The simulator's own counts in the analytical model's terms.
    pub fn analytical_input(&self, ipc_mem: f64, ipc_comp: f64) -> AnalyticalInput {
        let c = &self.counters;
        let n_hit = (c.hit + c.mshr_hit) as f64;
        let n_cold = (c.cold_miss + c.bypassed_cold) as f64;
        let n_cf = (c.conflict_miss + c.bypassed_cf) as f64;
        AnalyticalInput {
            n_hit,
            n_cold,
            n_cf,
            n_comp: self.stats.n_comp as f64,
            n_mem: n_hit + n_cold + n_cf,
            n_cold_dram: c.dram_cold() as f64,
            n_cf_dram: c.dram_cf() as f64,
            n_cores: self.committed.len() as f64,
            ipc_mem,
            ipc_comp,
            v_llc: self.n_slices as f64,
            bw: self.peak_bw_lines,
        }
    }
}

#[derive(Debug, Default)]
struct BwWindows {
    cold: u64,
    cf: u64,
    cold_total: (u64, u64),
    cf_total: (u64, u64),
    seen_first: bool,
}

impl BwWindows {
    fn record(&mut self, r: &DramRequest) {
        if r.op != DramOp::Write {
            if r.cold {
                self.cold += 1;
            } else {
                self.cf += 1;
            }
        }
    }

    fn close(&mut self, window: u64) {
        let total = self.cold + self.cf;
        // The first window only ramps up.
        if self.seen_first && total > 0 {
            if self.cold as f64 >= PHASE_PURITY * total as f64 {
                self.cold_total.0 += self.cold;
                self.cold_total.1 += window;
            } else if self.cf as f64 >= PHASE_PURITY * total as f64 {
                self.cf_total.0 += self.cf;
                self.cf_total.1 += window;
            }
        }
        self.seen_first |= total > 0;
        self.cold = 0;
        self.cf = 0;
    }

    fn rate(t: (u64, u64)) -> Option<f64> {
        (t.1 > 0).then(|| t.0 as f64 / t.1 as f64)
    }
}

/// Runs a program to completion under `cfg`.
pub fn simulate(cfg: &RunConfig, program: &DataflowProgram) -> Result<RunResult> {
    simulate_with(cfg, program, |_, _| {})
}

/// Like [`simulate`], calling `inspect` on the LLC and TMU after every
/// cycle (for invariant checks in tests).
pub fn simulate_with(
    cfg: &RunConfig,
    program: &DataflowProgram,
    mut inspect: impl FnMut(&Llc, &Tmu),
) -> Result<RunResult> {
    cfg.validate()?;
    let hw = &cfg.hardware;
    if program.n_cores != hw.core.n_cores as usize {
        return Err(Error::Config(format!(
            "program has {} cores, hardware {}",
            program.n_cores, hw.core.n_cores
        )));
    }
    let policy = &cfg.policy;
    let b_bits = cfg.tmu.b_bits;
    let initial_gear = match policy.bypass_mode {
        BypassMode::Off => 0,
        _ => policy.b_gear,
    };
    let mut llc = Llc::new(hw.llc.clone(), initial_gear)?;
    let map = *llc.map();
    let tmu_params = cfg.tmu.resolve(&map, program.retire_region_bytes)?;
    let mut tmu = Tmu::new(tmu_params, cfg.tmu.capacity, map)?;
    let mut dram = Dram::new(hw.dram.clone(), hw.llc.line_size)?;
    let mut cores: Vec<CoreState> = make_cores(&hw.core, cfg.seed);
    let groups = if policy.bypass_mode == BypassMode::GqaDynamic {
        pairing(program)
    } else {
        Vec::new()
    };
    let mut slower = vec![false; cores.len()];

    let mut ids: Vec<Option<TensorId>> = vec![None; program.tensors.len()];
    let mut apply_phase = |tmu: &mut Tmu, p: usize| -> Result<()> {
        let ph = &program.phases[p];
        for &t in &ph.clear {
            if let Some(id) = ids[t].take() {
                tmu.clear_tensor(id);
            }
        }
        for &t in &ph.register {
            ids[t] = Some(tmu.register_tensor(program.tensors[t].clone())?);
        }
        Ok(())
    };
    let empty = Vec::new();
    let stream = |p: usize, c: usize| program.phases.get(p).and_then(|ph| ph.streams.get(c)).unwrap_or(&empty);

    let warmup_requests = (cfg.metrics.warmup_fraction * program.stats.n_mem as f64) as u64;
    let mut steady_base = (warmup_requests == 0).then(LlcCounters::default);
    let mut hit_rate_series = Vec::new();
    let mut eviction_series = Vec::new();
    let mut gear_series = Vec::new();
    let mut bw = BwWindows::default();

    let mut phase = 0;
    if !program.phases.is_empty() {
        apply_phase(&mut tmu, 0)?;
    }
    let mut finish: Option<u64> = if program.phases.is_empty() { Some(0) } else { None };
    let mut done = Vec::new();
    let mut now: u64 = 0;
    let mut last_progress = (0u64, 0u64, 0u64);
    let mut last_progress_at = 0u64;

    loop {
        done.clear();
        dram.step(now, &mut done);
        for &r in &done {
            if r.op == DramOp::Write || llc.offer_response(r) {
                bw.record(&r);
            } else {
                dram.defer(r, now);
            }
        }

        {
            let ctx = AccessCtx {
                policy,
                b_bits,
                slower: &slower,
            };
            llc.step(now, &mut tmu, &mut dram, &ctx)?;
        }
        while llc.responses.peek().is_some_and(|r| r.0.ready <= now) {
            let r = llc.responses.pop().unwrap().0;
            cores[r.core].on_response();
        }

        if finish.is_none() {
            for (c, core) in cores.iter_mut().enumerate() {
                core.step(c, now, &hw.core, stream(phase, c), &mut llc);
            }
            let drained = cores.iter().enumerate().all(|(c, k)| k.phase_done(stream(phase, c)));
            if drained && llc.req_queues_empty() {
                if phase + 1 == program.phases.len() {
                    finish = Some(now + 1);
                } else {
                    phase += 1;
                    apply_phase(&mut tmu, phase)?;
                    cores.iter_mut().for_each(CoreState::begin_phase);
                }
            }
        }
        if steady_base.is_none() && llc.accepted >= warmup_requests {
            steady_base = Some(llc.counters);
        }
        inspect(&llc, &tmu);

        let t = now + 1;
        if t.is_multiple_of(policy.window) {
            eviction_series.push((0..llc.n_slices()).map(|s| llc.eviction_count_in_window(s)).collect());
            llc.end_window(policy, b_bits);
            let g = &llc.gears.gears;
            gear_series.push(g.iter().map(|&x| x as f64).sum::<f64>() / g.len() as f64);
            if !groups.is_empty() {
                slower = slower_cores(&groups, &commit_counts(&cores));
            }
        }
        if t.is_multiple_of(cfg.metrics.hit_rate_window) {
            if let Some((h, a)) = llc.take_window_hit_rate() {
                hit_rate_series.push(h as f64 / a as f64);
            }
        }
        if t.is_multiple_of(cfg.metrics.bw_window) {
            bw.close(cfg.metrics.bw_window);
        }

        if finish.is_some() && llc.is_idle() && dram.pending() == 0 {
            break;
        }
        let progress = (llc.accepted, cores.iter().map(|c| c.committed).sum(), dram.counters.reads + dram.counters.writes);
        if progress != last_progress {
            last_progress = progress;
            last_progress_at = now;
        } else if now - last_progress_at > STALL_LIMIT {
            return Err(Error::Invariant(format!("no progress since cycle {last_progress_at}")));
        }
        now = t;
        if now >= cfg.metrics.max_cycles {
            return Err(Error::Timeout(cfg.metrics.max_cycles));
        }
    }

    if let Some((h, a)) = llc.take_window_hit_rate() {
        hit_rate_series.push(h as f64 / a as f64);
    }
    let counters = llc.counters;
    let result = RunResult {
        label: cfg.display_label(),
        policy: policy.label(),
        cycles: finish.unwrap_or(now).max(1),
        n_mem: llc.accepted,
        steady: counters.since(&steady_base.unwrap_or_default()),
        counters,
        hit_rate_series,
        eviction_series,
        gear_series,
        dram: dram.counters,
        bw_cold: BwWindows::rate(bw.cold_total),
        bw_cf: BwWindows::rate(bw.cf_total),
        committed: commit_counts(&cores),
        stall_cycles: cores.iter().map(|c| c.stall_cycles).collect(),
        tmu: tmu.diag,
        tmu_params,
        stats: program.stats.clone(),
        n_slices: llc.n_slices(),
        peak_bw_lines: dram.peak_lines_per_cycle(),
    };
    result.check_conservation()?;
    Ok(result)
}
