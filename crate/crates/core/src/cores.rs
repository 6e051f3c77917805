//! AI core issue model.
//!
//! Each core walks its instruction stream in order. A tile transfer expands
//! into one request per line; up to `ipc_mem` line requests enter the LLC per
//! cycle, and a load occupies a window slot until its response returns.
//! Compute needs every earlier load to have returned (the tile must be in the
//! scratchpad) and blocks later instructions until it finishes, the
//! unpipelined load-then-compute rhythm of FlashAttention-2. Stores commit
//! when the LLC accepts them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::llc::{Llc, MemRequest};
use crate::tracegen::Instruction;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoreConfig {
    pub n_cores: u32,
    pub inst_window_depth: usize,
    /// Line requests issued per cycle.
    pub ipc_mem: u32,
    /// Compute slots retired per cycle.
    pub ipc_comp: u32,
    pub num_inst_windows: u32,
    /// FLOPs one compute slot performs, used by the trace generator.
    pub flops_per_slot: u64,
    /// Upper bound of the seeded random start delay of each core, in cycles.
    pub start_jitter: u64,
}

impl Default for CoreConfig {
    fn default() -> Self {
        Self {
            n_cores: 16,
            inst_window_depth: 128,
            ipc_mem: 1,
            ipc_comp: 1,
            num_inst_windows: 1,
            flops_per_slot: 8192,
            start_jitter: 0,
        }
    }
}

impl CoreConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_cores == 0 || self.inst_window_depth == 0 || self.ipc_mem == 0 || self.ipc_comp == 0 {
            return Err(config_err("core count, window depth, ipc_mem and ipc_comp must be positive"));
        }
        if self.num_inst_windows != 1 {
            return Err(config_err("only num_inst_windows = 1 is modeled"));
        }
        if self.flops_per_slot == 0 {
            return Err(config_err("flops_per_slot must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct CoreState {
    pc: usize,
    line_idx: u64,
    outstanding_loads: usize,
    compute_left: u64,
    start_at: u64,
    /// Instructions committed: line requests plus compute instructions.
    pub committed: u64,
    pub requests_issued: u64,
    /// Cycles with work pending but nothing issued or computed.
    pub stall_cycles: u64,
    /// `(cycle, pc)` of every line request, when enabled.
    pub issue_log: Option<Vec<(u64, usize)>>,
}

impl CoreState {
    /// In-flight window entries.
    pub fn in_flight(&self) -> usize {
        self.outstanding_loads + (self.compute_left > 0) as usize
    }

    /// Rewinds to the start of a new stream.
    pub fn begin_phase(&mut self) {
        debug_assert!(self.outstanding_loads == 0 && self.compute_left == 0);
        self.pc = 0;
        self.line_idx = 0;
    }

    pub fn phase_done(&self, stream: &[Instruction]) -> bool {
        self.pc >= stream.len() && self.outstanding_loads == 0 && self.compute_left == 0
    }

    pub fn on_response(&mut self) {
        debug_assert!(self.outstanding_loads > 0, "response without an outstanding load");
        self.outstanding_loads -= 1;
        self.committed += 1;
    }

    /// Advances one cycle, offering line requests to the LLC.
    pub fn step(&mut self, id: usize, now: u64, cfg: &CoreConfig, stream: &[Instruction], llc: &mut Llc) {
        if now < self.start_at {
            return;
        }
        if self.compute_left > 0 {
            self.compute_left -= 1;
            if self.compute_left > 0 {
                return;
            }
            self.committed += 1;
        }
        let line = llc.map().line_bytes();
        let mut budget = cfg.ipc_mem;
        let mut progressed = false;
        while self.pc < stream.len() {
            match stream[self.pc] {
                Instruction::Compute { slots } => {
                    if self.outstanding_loads == 0 {
                        self.compute_left = slots.div_ceil(cfg.ipc_comp as u64).max(1);
                        self.pc += 1;
                        progressed = true;
                    }
                    break;
                }
                Instruction::LoadTile { addr, len } | Instruction::StoreTile { addr, len } => {
                    let write = matches!(stream[self.pc], Instruction::StoreTile { .. });
                    if budget == 0 || (!write && self.outstanding_loads >= cfg.inst_window_depth) {
                        break;
                    }
                    let req = MemRequest {
                        core: id,
                        line: addr / line + self.line_idx,
                        write,
                    };
                    if !llc.try_enqueue(req) {
                        break;
                    }
                    budget -= 1;
                    progressed = true;
                    self.requests_issued += 1;
                    if let Some(log) = &mut self.issue_log {
                        log.push((now, self.pc));
                    }
                    if write {
                        self.committed += 1;
                    } else {
                        self.outstanding_loads += 1;
                    }
                    self.line_idx += 1;
                    if self.line_idx == len / line {
                        self.line_idx = 0;
                        self.pc += 1;
                    }
                }
            }
        }
        if !progressed && self.compute_left == 0 && !self.phase_done(stream) {
            self.stall_cycles += 1;
        }
    }
}

/// Builds the core states, drawing each core's start delay from the seed.
pub fn make_cores(cfg: &CoreConfig, seed: u64) -> Vec<CoreState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cfg.n_cores)
        .map(|_| CoreState {
            start_at: if cfg.start_jitter > 0 {
                rng.gen_range(0..=cfg.start_jitter)
            } else {
                0
            },
            ..Default::default()
        })
        .collect()
}

/// Current committed counters of every core.
pub fn commit_counts(cores: &[CoreState]) -> Vec<u64> {
    cores.iter().map(|c| c.committed).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dram::DramConfig;
    use crate::llc::LlcConfig;
    use crate::policy::PolicyConfig;
    use crate::testbench::Bench;

    fn bench() -> Bench {
        let llc = LlcConfig {
            total_size: 64 << 10,
            n_slices: 4,
            ..Default::default()
        };
        Bench::new(llc, DramConfig::default(), PolicyConfig::default())
    }

    fn cfg(depth: usize) -> CoreConfig {
        CoreConfig {
            n_cores: 1,
            inst_window_depth: depth,
            ..Default::default()
        }
    }

    /// Runs one core to completion; returns it and its response cycles.
    fn run(b: &mut Bench, cfg: &CoreConfig, stream: &[Instruction]) -> (CoreState, Vec<u64>) {
        let mut core = CoreState {
            issue_log: Some(Vec::new()),
            ..Default::default()
        };
        let mut responses = Vec::new();
        let mut max_in_flight = 0;
        for _ in 0..100_000 {
            let now = b.now;
            for _ in b.tick() {
                core.on_response();
                responses.push(now);
            }
            core.step(0, now, cfg, stream, &mut b.llc);
            max_in_flight = max_in_flight.max(core.in_flight());
            if core.phase_done(stream) && b.llc.is_idle() {
                assert!(max_in_flight <= cfg.inst_window_depth);
                return (core, responses);
            }
        }
        panic!("core did not finish");
    }

    fn issue_cycles(c: &CoreState) -> Vec<u64> {
        c.issue_log.as_ref().unwrap().iter().map(|e| e.0).collect()
    }

    #[test]
    fn empty_stream_is_done_without_requests() {
        let mut b = bench();
        let (c, r) = run(&mut b, &cfg(128), &[]);
        assert_eq!(c.requests_issued, 0);
        assert_eq!(c.committed, 0);
        assert!(r.is_empty());
    }

    #[test]
    fn depth_one_window_serializes_loads() {
        let mut b = bench();
        let stream = [Instruction::LoadTile { addr: 0, len: 128 }];
        let (c, r) = run(&mut b, &cfg(1), &stream);
        let issued = issue_cycles(&c);
        assert_eq!(issued.len(), 2);
        assert!(issued[1] >= r[0], "second load issued at {} before response at {}", issued[1], r[0]);
        assert_eq!(c.committed, 2);
    }

    #[test]
    fn hitting_loads_issue_one_per_cycle() {
        let mut b = bench();
        let stream = [Instruction::LoadTile {
            addr: 0,
            len: 200 * 64,
        }];
        run(&mut b, &cfg(128), &stream);
        let hits_before = b.llc.counters.hit;
        let (c, r) = run(&mut b, &cfg(128), &stream);
        assert_eq!(b.llc.counters.hit - hits_before, 200);
        let issued = issue_cycles(&c);
        assert_eq!(issued[199] - issued[0], 199);
        assert_eq!(r.len(), 200);
    }

    #[test]
    fn compute_waits_for_loads_and_blocks_issue() {
        let mut b = bench();
        let stream = [
            Instruction::LoadTile { addr: 0, len: 64 },
            Instruction::Compute { slots: 10 },
            Instruction::LoadTile { addr: 64, len: 64 },
        ];
        let (c, r) = run(&mut b, &cfg(128), &stream);
        let issued = issue_cycles(&c);
        assert!(issued[1] >= r[0] + 10, "load at {} after response {}", issued[1], r[0]);
        assert_eq!(c.committed, 3);
    }

    #[test]
    fn stores_commit_at_acceptance() {
        let mut b = bench();
        let stream = [Instruction::StoreTile { addr: 0, len: 128 }];
        let (c, r) = run(&mut b, &cfg(1), &stream);
        assert!(r.is_empty());
        assert_eq!(c.committed, 2);
        assert_eq!(issue_cycles(&c), [0, 1]);
    }

    #[test]
    fn window_bounds_outstanding_loads() {
        let mut b = bench();
        let stream = [Instruction::LoadTile { addr: 0, len: 64 * 64 }];
        let (c, _) = run(&mut b, &cfg(4), &stream);
        assert_eq!(c.committed, 64);
    }

    #[test]
    fn start_delays_follow_the_seed() {
        let cfg = CoreConfig {
            n_cores: 8,
            start_jitter: 100,
            ..Default::default()
        };
        let a: Vec<u64> = make_cores(&cfg, 3).iter().map(|c| c.start_at).collect();
        let b: Vec<u64> = make_cores(&cfg, 3).iter().map(|c| c.start_at).collect();
        assert_eq!(a, b);
        assert!(a.iter().all(|&d| d <= 100));
        assert!(commit_counts(&make_cores(&cfg, 3)).iter().all(|&c| c == 0));
    }
}
