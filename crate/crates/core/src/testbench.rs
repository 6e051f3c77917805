//! Memory-side harness for unit tests: an LLC, TMU and DRAM stepped with the
//! same per-cycle order as the simulator, with outcome logging enabled.

use crate::dram::{Dram, DramConfig, DramOp};
use crate::llc::{AccessCtx, AccessOutcome, Llc, LlcConfig, MemRequest, MemResponse};
use crate::policy::PolicyConfig;
use crate::tmu::{Tmu, TmuCapacity, TmuParams};

pub(crate) struct Bench {
    pub llc: Llc,
    pub tmu: Tmu,
    pub dram: Dram,
    pub policy: PolicyConfig,
    pub b_bits: u32,
    pub slower: Vec<bool>,
    pub now: u64,
}

impl Bench {
    pub fn new(llc: LlcConfig, dram: DramConfig, policy: PolicyConfig) -> Self {
        let b_bits = 3;
        let line = llc.line_size;
        let mut l = Llc::new(llc, policy.b_gear).unwrap();
        l.outcome_log = Some(Vec::new());
        let params = TmuParams {
            d_lsb: 0,
            d_msb: 3,
            b_bits,
        };
        let tmu = Tmu::new(params, TmuCapacity::default(), *l.map()).unwrap();
        Self {
            llc: l,
            tmu,
            dram: Dram::new(dram, line).unwrap(),
            policy,
            b_bits,
            slower: vec![false; 8],
            now: 0,
        }
    }

    /// Two slices of four 2-way sets: 16 lines.
    pub fn tiny(policy: PolicyConfig) -> Self {
        Self::new(Self::tiny_llc(), DramConfig::default(), policy)
    }

    pub fn tiny_llc() -> LlcConfig {
        LlcConfig {
            total_size: 2 * 4 * 2 * 64,
            n_slices: 2,
            assoc: 2,
            ..Default::default()
        }
    }

    /// Advances one cycle and returns the responses delivered to cores.
    pub fn tick(&mut self) -> Vec<MemResponse> {
        let mut done = Vec::new();
        self.dram.step(self.now, &mut done);
        for r in done {
            if r.op != DramOp::Write && !self.llc.offer_response(r) {
                self.dram.defer(r, self.now);
            }
        }
        self.step_llc();
        let mut out = Vec::new();
        while self.llc.responses.peek().is_some_and(|r| r.0.ready <= self.now) {
            out.push(self.llc.responses.pop().unwrap().0);
        }
        self.now += 1;
        out
    }

    /// Steps only the cache slices at the current cycle.
    pub fn step_llc(&mut self) {
        let ctx = AccessCtx {
            policy: &self.policy,
            b_bits: self.b_bits,
            slower: &self.slower,
        };
        self.llc.step(self.now, &mut self.tmu, &mut self.dram, &ctx).unwrap();
    }

    /// Ticks until the cache and DRAM are idle; returns delivered responses.
    pub fn drain(&mut self) -> Vec<MemResponse> {
        let mut out = Vec::new();
        for _ in 0..100_000 {
            out.extend(self.tick());
            if self.llc.is_idle() && self.dram.pending() == 0 && self.llc.responses.is_empty() {
                return out;
            }
        }
        panic!("bench did not drain");
    }

    /// Issues one request, runs to idle and returns its outcome.
    pub fn access(&mut self, core: usize, line: u64, write: bool) -> AccessOutcome {
        assert!(self.llc.try_enqueue(MemRequest { core, line, write }));
        self.drain();
        self.outcomes().last().unwrap().1
    }

    pub fn outcomes(&self) -> &[(MemRequest, AccessOutcome)] {
        self.llc.outcome_log.as_deref().unwrap()
    }
}
