//! Sliced, set-associative, write-back write-allocate shared cache.
//!
//! Each slice has a bounded request queue fed by the cores, a bounded
//! response queue fed by DRAM, MSHRs that merge misses to the same line, and
//! a separate in-flight table for bypassed reads, which are never merged.
//! A slice performs one action per cycle, responses before requests. Lines
//! are allocated when their fill returns.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

use rustc_hash::FxHashSet;
use serde::{Deserialize, Serialize};

use crate::addr::AddressMap;
use crate::dram::{Dram, DramOp, DramRequest};
use crate::error::{config_err, Error, Result};
use crate::policy::{select_victim, should_bypass, update_gear, BypassMode, BypassQuery, GearState, PolicyConfig};
use crate::tmu::{priority, Tmu};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlcConfig {
    pub total_size: u64,
    pub n_slices: u32,
    #[serde(alias = "associativity")]
    pub assoc: u32,
    pub line_size: u64,
    #[serde(alias = "data-latency")]
    pub data_latency: u64,
    #[serde(alias = "mshr-num-entry")]
    pub mshr_entries: usize,
    pub req_q_size: usize,
    pub resp_q_size: usize,
    /// Maximum DRAM reads (fills plus bypassed reads) in flight per slice.
    #[serde(alias = "num-target")]
    pub num_target: usize,
    /// Bypassed reads in flight per slice; defaults to the MSHR count.
    #[serde(default)]
    pub bypass_entries: Option<usize>,
}

impl Default for LlcConfig {
    fn default() -> Self {
        Self {
            total_size: 4 << 20,
            n_slices: 32,
            assoc: 8,
            line_size: 64,
            data_latency: 25,
            mshr_entries: 6,
            req_q_size: 12,
            resp_q_size: 64,
            num_target: 8,
            bypass_entries: None,
        }
    }
}

impl LlcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_slices == 0 || self.assoc == 0 || self.line_size == 0 {
            return Err(config_err("LLC slices, associativity and line size must be positive"));
        }
        let per_set = self.n_slices as u64 * self.assoc as u64 * self.line_size;
        if self.total_size == 0 || !self.total_size.is_multiple_of(per_set) {
            return Err(config_err(format!(
                "LLC size {} is not a multiple of slices x associativity x line ({per_set})",
                self.total_size
            )));
        }
        if self.mshr_entries == 0 || self.req_q_size == 0 || self.resp_q_size == 0 || self.num_target == 0 {
            return Err(config_err("LLC queue and MSHR sizes must be positive"));
        }
        if self.bypass_entries == Some(0) {
            return Err(config_err("bypass_entries must be positive"));
        }
        if self.data_latency == 0 {
            return Err(config_err("data_latency must be positive"));
        }
        Ok(())
    }

    pub fn sets_per_slice(&self) -> u64 {
        self.total_size / (self.n_slices as u64 * self.assoc as u64 * self.line_size)
    }

    pub fn address_map(&self) -> Result<AddressMap> {
        AddressMap::new(self.line_size, self.n_slices as u64, self.sets_per_slice())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Way {
    pub tag: u64,
    pub valid: bool,
    pub dirty: bool,
    /// Recency stamp; larger is more recent. Stamps are unique per cache.
    pub last_use: u64,
}

/// A core's line request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemRequest {
    pub core: usize,
    pub line: u64,
    pub write: bool,
}

/// A load response headed back to a core.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct MemResponse {
    pub ready: u64,
    pub core: usize,
    pub line: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessOutcome {
    Hit,
    MshrHit,
    ColdMiss,
    ConflictMiss,
    Bypassed,
}

#[derive(Debug, Clone)]
struct MshrEntry {
    line: u64,
    /// Waiting loads, by core.
    waiters: Vec<usize>,
    write: bool,
}

/// Event counters. `bypassed_*` split bypassed requests by whether their line
/// had been fetched before; `pinned_*` is the whole-tensor subset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlcCounters {
    pub hit: u64,
    pub mshr_hit: u64,
    pub cold_miss: u64,
    pub conflict_miss: u64,
    pub bypassed_cold: u64,
    pub bypassed_cf: u64,
    pub pinned_requests: u64,
    pub evictions: u64,
    pub dbp_evictions: u64,
    pub writebacks: u64,
    pub write_through: u64,
    /// Write-throughs to lines never fetched before.
    pub write_through_cold: u64,
    pub bypass_reads: u64,
    pub fills: u64,
    /// DRAM reads (fills plus bypassed reads) for lines never fetched before.
    pub dram_reads_cold: u64,
    pub dram_reads_cf: u64,
    /// Outcomes of requests to lines that had been fetched before, for the
    /// re-stream hit rate.
    pub reuse_hits: u64,
    pub reuse_requests: u64,
}

impl LlcCounters {
    pub fn bypassed(&self) -> u64 {
        self.bypassed_cold + self.bypassed_cf
    }

    /// Requests accounted for, which must equal the requests accepted.
    pub fn classified(&self) -> u64 {
        self.hit + self.mshr_hit + self.cold_miss + self.conflict_miss + self.bypassed()
    }

    pub fn dram_reads(&self) -> u64 {
        self.fills + self.bypass_reads
    }

    pub fn dram_writes(&self) -> u64 {
        self.writebacks + self.write_through
    }

    /// DRAM transactions caused by cold requests: reads and write-throughs
    /// of lines never fetched before.
    pub fn dram_cold(&self) -> u64 {
        self.dram_reads_cold + self.write_through_cold
    }

    /// DRAM transactions caused by conflict requests. Writebacks are not
    /// attributed to any request class.
    pub fn dram_cf(&self) -> u64 {
        self.dram_reads_cf + self.write_through - self.write_through_cold
    }

    /// Field-wise difference, for metrics that exclude a warmup prefix.
    pub fn since(&self, base: &LlcCounters) -> LlcCounters {
        LlcCounters {
            hit: self.hit - base.hit,
            mshr_hit: self.mshr_hit - base.mshr_hit,
            cold_miss: self.cold_miss - base.cold_miss,
            conflict_miss: self.conflict_miss - base.conflict_miss,
            bypassed_cold: self.bypassed_cold - base.bypassed_cold,
            bypassed_cf: self.bypassed_cf - base.bypassed_cf,
            pinned_requests: self.pinned_requests - base.pinned_requests,
            evictions: self.evictions - base.evictions,
            dbp_evictions: self.dbp_evictions - base.dbp_evictions,
            writebacks: self.writebacks - base.writebacks,
            write_through: self.write_through - base.write_through,
            write_through_cold: self.write_through_cold - base.write_through_cold,
            bypass_reads: self.bypass_reads - base.bypass_reads,
            fills: self.fills - base.fills,
            dram_reads_cold: self.dram_reads_cold - base.dram_reads_cold,
            dram_reads_cf: self.dram_reads_cf - base.dram_reads_cf,
            reuse_hits: self.reuse_hits - base.reuse_hits,
            reuse_requests: self.reuse_requests - base.reuse_requests,
        }
    }
}

/// Writebacks waiting for DRAM queue space before a slice takes more fills.
const WRITEBACK_BUFFER: usize = 8;

#[derive(Debug, Clone)]
struct Slice {
    ways: Vec<Way>,
    req_q: VecDeque<MemRequest>,
    resp_q: VecDeque<DramRequest>,
    mshr: Vec<MshrEntry>,
    bypass_in_flight: usize,
    writeback_q: VecDeque<u64>,
    evictions_in_window: u32,
    last_window_evictions: u32,
}

/// Context the miss path needs from outside the cache.
pub struct AccessCtx<'a> {
    pub policy: &'a PolicyConfig,
    pub b_bits: u32,
    /// Per-core "slower member of its sharing group" flags.
    pub slower: &'a [bool],
}

#[derive(Debug, Clone)]
pub struct Llc {
    cfg: LlcConfig,
    map: AddressMap,
    slices: Vec<Slice>,
    assoc: usize,
    bypass_cap: usize,
    ever_fetched: FxHashSet<u64>,
    stamp: u64,
    pub gears: GearState,
    pub counters: LlcCounters,
    /// Requests accepted into slice request queues.
    pub accepted: u64,
    /// Hits and accesses since the last `take_window_hit_rate`, excluding
    /// whole-tensor bypassed requests.
    window_hits: u64,
    window_accesses: u64,
    pub responses: BinaryHeap<Reverse<MemResponse>>,
    /// Per-request outcome log, kept only when enabled (tests).
    pub outcome_log: Option<Vec<(MemRequest, AccessOutcome)>>,
}

impl Llc {
    pub fn new(cfg: LlcConfig, initial_gear: u32) -> Result<Self> {
        cfg.validate()?;
        let map = cfg.address_map()?;
        let assoc = cfg.assoc as usize;
        let slice = Slice {
            ways: vec![Way::default(); map.sets_per_slice() * assoc],
            req_q: VecDeque::with_capacity(cfg.req_q_size),
            resp_q: VecDeque::with_capacity(cfg.resp_q_size),
            mshr: Vec::with_capacity(cfg.mshr_entries),
            bypass_in_flight: 0,
            writeback_q: VecDeque::new(),
            evictions_in_window: 0,
            last_window_evictions: 0,
        };
        let n = map.n_slices();
        Ok(Self {
            bypass_cap: cfg.bypass_entries.unwrap_or(cfg.mshr_entries),
            slices: vec![slice; n],
            assoc,
            map,
            ever_fetched: FxHashSet::default(),
            stamp: 0,
            gears: GearState::new(n, initial_gear),
            counters: LlcCounters::default(),
            accepted: 0,
            window_hits: 0,
            window_accesses: 0,
            responses: BinaryHeap::new(),
            outcome_log: None,
            cfg,
        })
    }

    pub fn config(&self) -> &LlcConfig {
        &self.cfg
    }

    pub fn map(&self) -> &AddressMap {
        &self.map
    }

    pub fn n_slices(&self) -> usize {
        self.slices.len()
    }

    /// Offers a request to its slice. Returns false when the request queue
    /// is full; the core retries next cycle.
    pub fn try_enqueue(&mut self, req: MemRequest) -> bool {
        let s = &mut self.slices[self.map.slice_of_line(req.line)];
        if s.req_q.len() >= self.cfg.req_q_size {
            return false;
        }
        s.req_q.push_back(req);
        self.accepted += 1;
        true
    }

    /// Hands a DRAM completion to its slice. Returns false when the response
    /// queue is full.
    pub fn offer_response(&mut self, r: DramRequest) -> bool {
        let s = &mut self.slices[r.slice];
        if s.resp_q.len() >= self.cfg.resp_q_size {
            return false;
        }
        s.resp_q.push_back(r);
        true
    }

    /// Advances every slice by one cycle in slice order.
    pub fn step(&mut self, now: u64, tmu: &mut Tmu, dram: &mut Dram, ctx: &AccessCtx) -> Result<()> {
        for i in 0..self.slices.len() {
            self.step_slice(i, now, tmu, dram, ctx)?;
        }
        Ok(())
    }

    fn step_slice(&mut self, i: usize, now: u64, tmu: &mut Tmu, dram: &mut Dram, ctx: &AccessCtx) -> Result<()> {
        while let Some(&line) = self.slices[i].writeback_q.front() {
            let req = DramRequest {
                slice: i,
                line,
                op: DramOp::Write,
                cold: false,
            };
            if dram.enqueue(req, now).is_err() {
                break;
            }
            self.slices[i].writeback_q.pop_front();
        }
        if let Some(&resp) = self.slices[i].resp_q.front() {
            let blocked = resp.op == DramOp::Fill && self.slices[i].writeback_q.len() >= WRITEBACK_BUFFER;
            if !blocked {
                self.slices[i].resp_q.pop_front();
                self.handle_response(i, resp, now, tmu, ctx)?;
                return Ok(());
            }
        }
        if let Some(&req) = self.slices[i].req_q.front() {
            if let Some(outcome) = self.handle_request(i, req, now, tmu, dram, ctx) {
                self.slices[i].req_q.pop_front();
                if let Some(log) = &mut self.outcome_log {
                    log.push((req, outcome));
                }
            }
        }
        Ok(())
    }

    fn next_stamp(&mut self) -> u64 {
        self.stamp += 1;
        self.stamp
    }

    fn set_range(&self, line: u64) -> std::ops::Range<usize> {
        let set = self.map.set_of_line(line);
        set * self.assoc..(set + 1) * self.assoc
    }

    fn handle_response(&mut self, i: usize, resp: DramRequest, now: u64, tmu: &Tmu, ctx: &AccessCtx) -> Result<()> {
        match resp.op {
            DramOp::BypassRead { core, .. } => {
                self.slices[i].bypass_in_flight -= 1;
                self.responses.push(Reverse(MemResponse {
                    ready: now + 1,
                    core,
                    line: resp.line,
                }));
                Ok(())
            }
            DramOp::Write => Ok(()),
            DramOp::Fill => {
                let pos = self.slices[i]
                    .mshr
                    .iter()
                    .position(|m| m.line == resp.line)
                    .ok_or_else(|| Error::Invariant(format!("fill for line {:#x} without an MSHR entry", resp.line)))?;
                let entry = self.slices[i].mshr.swap_remove(pos);
                self.install(i, entry.line, entry.write, tmu, ctx);
                for core in entry.waiters {
                    self.responses.push(Reverse(MemResponse {
                        ready: now + 1,
                        core,
                        line: entry.line,
                    }));
                }
                Ok(())
            }
        }
    }

    fn install(&mut self, i: usize, line: u64, dirty: bool, tmu: &Tmu, ctx: &AccessCtx) {
        let range = self.set_range(line);
        let tag = self.map.tag_of_line(line);
        let set_idx = self.map.set_of_line(line);
        let stamp = self.next_stamp();
        let set = &self.slices[i].ways[range.clone()];
        debug_assert!(!set.iter().any(|w| w.valid && w.tag == tag), "line filled twice");
        let way = match set.iter().position(|w| !w.valid) {
            Some(w) => w,
            None => {
                let v = select_victim(set, ctx.policy.replacement, ctx.policy.dbp, ctx.b_bits, |t| tmu.is_dead(t));
                let victim = set[v];
                self.counters.evictions += 1;
                if ctx.policy.dbp && tmu.is_dead(victim.tag) {
                    self.counters.dbp_evictions += 1;
                }
                self.slices[i].evictions_in_window += 1;
                if victim.dirty {
                    self.counters.writebacks += 1;
                    let vline = self.map.line_from_parts(victim.tag, set_idx, i);
                    self.slices[i].writeback_q.push_back(vline);
                }
                v
            }
        };
        self.slices[i].ways[range.start + way] = Way {
            tag,
            valid: true,
            dirty,
            last_use: stamp,
        };
    }

    /// Processes the request at the head of slice `i`. Returns `None` when it
    /// must wait (MSHRs, bypass table, DRAM read budget or DRAM queue full).
    fn handle_request(
        &mut self,
        i: usize,
        req: MemRequest,
        now: u64,
        tmu: &mut Tmu,
        dram: &mut Dram,
        ctx: &AccessCtx,
    ) -> Option<AccessOutcome> {
        let line = req.line;
        let addr = self.map.addr_of_line(line);
        let tag = self.map.tag_of_line(line);
        let range = self.set_range(line);
        let pinned = tmu.lookup_bypass_flag(addr);
        let seen = self.ever_fetched.contains(&line);

        let hit_way = self.slices[i].ways[range.clone()]
            .iter()
            .position(|w| w.valid && w.tag == tag);
        let outcome = if let Some(w) = hit_way {
            let stamp = self.next_stamp();
            let way = &mut self.slices[i].ways[range.start + w];
            way.last_use = stamp;
            way.dirty |= req.write;
            if !req.write {
                self.responses.push(Reverse(MemResponse {
                    ready: now + self.cfg.data_latency,
                    core: req.core,
                    line,
                }));
            }
            AccessOutcome::Hit
        } else if let Some(m) = self.slices[i].mshr.iter_mut().find(|m| m.line == line) {
            if req.write {
                m.write = true;
            } else {
                m.waiters.push(req.core);
            }
            AccessOutcome::MshrHit
        } else {
            let bypass = pinned || {
                let q = BypassQuery {
                    whole_tensor: false,
                    priority: priority(tag, ctx.b_bits),
                    gear: self.gears.gears[i],
                    requester_slower: ctx.slower.get(req.core).copied().unwrap_or(false),
                    contended: self.slices[i].last_window_evictions > ctx.policy.bypass_ub,
                };
                ctx.policy.bypass_mode != BypassMode::Off && should_bypass(&q, ctx.policy.bypass_mode)
            };
            let s = &self.slices[i];
            let reads_in_flight = s.mshr.len() + s.bypass_in_flight;
            if !dram.can_accept(line) {
                return None;
            }
            if bypass && req.write {
                let wr = DramRequest {
                    slice: i,
                    line,
                    op: DramOp::Write,
                    cold: !seen,
                };
                dram.enqueue(wr, now).ok()?;
                self.counters.write_through += 1;
                self.counters.write_through_cold += !seen as u64;
            } else if bypass {
                if s.bypass_in_flight >= self.bypass_cap || reads_in_flight >= self.cfg.num_target {
                    return None;
                }
                let rd = DramRequest {
                    slice: i,
                    line,
                    op: DramOp::BypassRead { core: req.core },
                    cold: !seen,
                };
                dram.enqueue(rd, now).ok()?;
                self.slices[i].bypass_in_flight += 1;
                self.counters.bypass_reads += 1;
                self.count_dram_read(seen);
            } else {
                if s.mshr.len() >= self.cfg.mshr_entries || reads_in_flight >= self.cfg.num_target {
                    return None;
                }
                let rd = DramRequest {
                    slice: i,
                    line,
                    op: DramOp::Fill,
                    cold: !seen,
                };
                dram.enqueue(rd, now).ok()?;
                self.slices[i].mshr.push(MshrEntry {
                    line,
                    waiters: if req.write { Vec::new() } else { vec![req.core] },
                    write: req.write,
                });
                self.counters.fills += 1;
                self.count_dram_read(seen);
            }
            self.ever_fetched.insert(line);
            match (bypass, seen) {
                (true, _) => AccessOutcome::Bypassed,
                (false, false) => AccessOutcome::ColdMiss,
                (false, true) => AccessOutcome::ConflictMiss,
            }
        };

        match outcome {
            AccessOutcome::Hit => self.counters.hit += 1,
            AccessOutcome::MshrHit => self.counters.mshr_hit += 1,
            AccessOutcome::ColdMiss => self.counters.cold_miss += 1,
            AccessOutcome::ConflictMiss => self.counters.conflict_miss += 1,
            AccessOutcome::Bypassed if seen => self.counters.bypassed_cf += 1,
            AccessOutcome::Bypassed => self.counters.bypassed_cold += 1,
        }
        let hit = matches!(outcome, AccessOutcome::Hit | AccessOutcome::MshrHit);
        if pinned {
            self.counters.pinned_requests += 1;
        } else {
            self.window_accesses += 1;
            self.window_hits += hit as u64;
            if seen {
                self.counters.reuse_requests += 1;
                self.counters.reuse_hits += hit as u64;
            }
        }
        tmu.notify_access(addr);
        Some(outcome)
    }

    fn count_dram_read(&mut self, seen: bool) {
        if seen {
            self.counters.dram_reads_cf += 1;
        } else {
            self.counters.dram_reads_cold += 1;
        }
    }

    /// Closes a controller window: per-slice eviction counts become the
    /// contention signal and, in the dynamic modes, drive the gears.
    pub fn end_window(&mut self, policy: &PolicyConfig, b_bits: u32) {
        let dynamic = matches!(policy.bypass_mode, BypassMode::Dynamic | BypassMode::GqaDynamic);
        for (s, g) in self.slices.iter_mut().zip(self.gears.gears.iter_mut()) {
            if dynamic {
                *g = update_gear(*g, s.evictions_in_window, policy, b_bits);
            }
            s.last_window_evictions = s.evictions_in_window;
            s.evictions_in_window = 0;
        }
    }

    /// Evictions in the current, still open window.
    pub fn eviction_count_in_window(&self, slice: usize) -> u32 {
        self.slices[slice].evictions_in_window
    }

    /// Evictions per slice during the last completed window.
    pub fn eviction_rate(&self, slice: usize) -> u32 {
        self.slices[slice].last_window_evictions
    }

    /// Hit rate since the previous call, or `None` if there were no accesses.
    pub fn take_window_hit_rate(&mut self) -> Option<(u64, u64)> {
        let r = (self.window_hits, self.window_accesses);
        self.window_hits = 0;
        self.window_accesses = 0;
        (r.1 > 0).then_some(r)
    }

    pub fn req_queues_empty(&self) -> bool {
        self.slices.iter().all(|s| s.req_q.is_empty())
    }

    /// No queued, in-flight or buffered work in any slice.
    pub fn is_idle(&self) -> bool {
        self.responses.is_empty()
            && self.slices.iter().all(|s| {
                s.req_q.is_empty()
                    && s.resp_q.is_empty()
                    && s.mshr.is_empty()
                    && s.bypass_in_flight == 0
                    && s.writeback_q.is_empty()
            })
    }

    /// Lines resident anywhere in the cache.
    pub fn resident_lines(&self) -> impl Iterator<Item = u64> + '_ {
        self.slices.iter().enumerate().flat_map(move |(i, s)| {
            s.ways.chunks(self.assoc).enumerate().flat_map(move |(set, ways)| {
                ways.iter()
                    .filter(|w| w.valid)
                    .map(move |w| self.map.line_from_parts(w.tag, set, i))
            })
        })
    }

    pub fn is_resident(&self, line: u64) -> bool {
        let i = self.map.slice_of_line(line);
        let tag = self.map.tag_of_line(line);
        self.slices[i].ways[self.set_range(line)]
            .iter()
            .any(|w| w.valid && w.tag == tag)
    }

    pub fn mshr_occupancy(&self, slice: usize) -> usize {
        self.slices[slice].mshr.len()
    }

    pub fn req_q_len(&self, slice: usize) -> usize {
        self.slices[slice].req_q.len()
    }

    pub fn resp_q_len(&self, slice: usize) -> usize {
        self.slices[slice].resp_q.len()
    }
}
