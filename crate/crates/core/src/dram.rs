//! Bandwidth- and latency-limited main memory.
//!
//! Lines are interleaved over channels on the lowest line-address bits. Each
//! channel is a FIFO served from a credit bucket refilled at its share of the
//! peak bandwidth. A request costs `1/eff_seq` credits when it falls in the
//! same locality block (`row_lines` consecutive channel lines) as the previous
//! request on that channel, `1/eff_rand` otherwise, so interleaved streams
//! sustain less bandwidth than a single sequential burst. A served request
//! completes exactly `min_latency` cycles later.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DramConfig {
    pub channels: u32,
    pub peak_bw_bytes_per_cycle: f64,
    pub min_latency: u64,
    pub queue_depth: usize,
    pub eff_seq: f64,
    pub eff_rand: f64,
    /// Consecutive lines of one channel that count as sequential.
    pub row_lines: u64,
}

impl Default for DramConfig {
    /// DDR5-3200, 16 channels of 8 bytes per transfer: 409.6 GB/s, which is
    /// 204.8 B/cycle at a 2 GHz core clock.
    fn default() -> Self {
        Self {
            channels: 16,
            peak_bw_bytes_per_cycle: 204.8,
            min_latency: 100,
            queue_depth: 32,
            eff_seq: 0.95,
            eff_rand: 0.7,
            row_lines: 32,
        }
    }
}

impl DramConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.queue_depth == 0 || self.row_lines == 0 {
            return Err(config_err("DRAM channels, queue depth and row_lines must be positive"));
        }
        if !(self.peak_bw_bytes_per_cycle > 0.0) {
            return Err(config_err("peak_bw_bytes_per_cycle must be positive"));
        }
        if self.min_latency == 0 {
            return Err(config_err("min_latency must be positive"));
        }
        for e in [self.eff_seq, self.eff_rand] {
            if !(e > 0.0 && e <= 1.0) {
                return Err(config_err("DRAM efficiencies must lie in (0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DramOp {
    /// Fill for an MSHR entry of `slice`.
    Fill,
    /// Non-allocating read forwarded straight to `core`.
    BypassRead { core: usize },
    /// Writeback or write-through; no response.
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DramRequest {
    pub slice: usize,
    pub line: u64,
    pub op: DramOp,
    /// The line had never been fetched before this request.
    pub cold: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Backpressure;

#[derive(Debug, Clone)]
struct Channel {
    queue: VecDeque<(DramRequest, u64)>,
    in_flight: VecDeque<(u64, DramRequest)>,
    credit: f64,
    open_block: Option<u64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DramCounters {
    pub reads: u64,
    pub writes: u64,
    pub seq_served: u64,
    pub rand_served: u64,
}

#[derive(Debug, Clone)]
pub struct Dram {
    cfg: DramConfig,
    channels: Vec<Channel>,
    rate: f64,
    cost_seq: f64,
    cost_rand: f64,
    pending: usize,
    pub counters: DramCounters,
}

impl Dram {
    pub fn new(cfg: DramConfig, line_bytes: u64) -> Result<Self> {
        cfg.validate()?;
        let rate = cfg.peak_bw_bytes_per_cycle / line_bytes as f64 / cfg.channels as f64;
        let cost_rand = 1.0 / cfg.eff_rand;
        let ch = Channel {
            queue: VecDeque::new(),
            in_flight: VecDeque::new(),
            credit: cost_rand.max(1.0 / cfg.eff_seq),
            open_block: None,
        };
        Ok(Self {
            channels: vec![ch; cfg.channels as usize],
            rate,
            cost_seq: 1.0 / cfg.eff_seq,
            cost_rand,
            pending: 0,
            counters: DramCounters::default(),
            cfg,
        })
    }

    /// Peak bandwidth in lines per cycle.
    pub fn peak_lines_per_cycle(&self) -> f64 {
        self.rate * self.channels.len() as f64
    }

    pub fn config(&self) -> &DramConfig {
        &self.cfg
    }

    #[inline]
    pub fn channel_of(&self, line: u64) -> usize {
        (line % self.channels.len() as u64) as usize
    }

    pub fn can_accept(&self, line: u64) -> bool {
        self.channels[self.channel_of(line)].queue.len() < self.cfg.queue_depth
    }

    pub fn enqueue(&mut self, req: DramRequest, now: u64) -> std::result::Result<(), Backpressure> {
        let ch = self.channel_of(req.line);
        let c = &mut self.channels[ch];
        if c.queue.len() >= self.cfg.queue_depth {
            return Err(Backpressure);
        }
        c.queue.push_back((req, now));
        self.pending += 1;
        Ok(())
    }

    /// Requests accepted but not yet completed.
    pub fn pending(&self) -> usize {
        self.pending
    }

    pub fn queue_len(&self, channel: usize) -> usize {
        self.channels[channel].queue.len()
    }

    /// Advances one cycle: serves queued requests within each channel's
    /// credit, then returns every request whose completion time has come.
    pub fn step(&mut self, now: u64, done: &mut Vec<DramRequest>) {
        if self.pending == 0 {
            return;
        }
        let n_ch = self.channels.len() as u64;
        let cap = self.cost_rand.max(self.cost_seq);
        for c in &mut self.channels {
            if c.queue.is_empty() && c.in_flight.is_empty() {
                c.credit = cap;
                continue;
            }
            c.credit = (c.credit + self.rate).min(cap);
            while let Some(&(req, _)) = c.queue.front() {
                let block = req.line / n_ch / self.cfg.row_lines;
                let seq = c.open_block == Some(block);
                let cost = if seq { self.cost_seq } else { self.cost_rand };
                if c.credit < cost {
                    break;
                }
                c.credit -= cost;
                c.open_block = Some(block);
                c.queue.pop_front();
                c.in_flight.push_back((now + self.cfg.min_latency, req));
                if seq {
                    self.counters.seq_served += 1;
                } else {
                    self.counters.rand_served += 1;
                }
            }
            while c.in_flight.front().is_some_and(|&(t, _)| t <= now) {
                let (_, req) = c.in_flight.pop_front().unwrap();
                match req.op {
                    DramOp::Write => self.counters.writes += 1,
                    _ => self.counters.reads += 1,
                }
                self.pending -= 1;
                done.push(req);
            }
        }
    }

    /// Puts a completed response back at the head of its channel's output,
    /// used when the destination response queue is full.
    pub fn defer(&mut self, req: DramRequest, now: u64) {
        let ch = self.channel_of(req.line);
        match req.op {
            DramOp::Write => self.counters.writes -= 1,
            _ => self.counters.reads -= 1,
        }
        self.pending += 1;
        self.channels[ch].in_flight.push_front((now + 1, req));
    }
}
