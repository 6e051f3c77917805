//! Tensor Management Unit.
//!
//! Three structures: the tensor metadata table (registered before a kernel
//! runs), the live tile table holding an access counter per tile, and the
//! dead-tile FIFO of `tag[D_MSB:D_LSB]` patterns of retired tiles. The LLC
//! reports every access; when a tile's last line (TLL) has been touched `nAcc`
//! times the tile retires and its pattern enters the FIFO. The replacement
//! policy then treats any line whose tag pattern sits in the FIFO as dead.

use std::collections::VecDeque;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::addr::AddressMap;
use crate::error::{config_err, Error, Result};
use crate::tracegen::TensorMeta;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TmuParams {
    pub d_lsb: u32,
    pub d_msb: u32,
    pub b_bits: u32,
}

impl TmuParams {
    pub fn validate(&self, tag_bits: u32) -> Result<()> {
        if self.d_msb < self.d_lsb {
            return Err(config_err("d_msb must be >= d_lsb"));
        }
        if self.d_msb >= tag_bits {
            return Err(config_err(format!(
                "d_msb ({}) exceeds the tag width ({tag_bits} bits)",
                self.d_msb
            )));
        }
        if self.b_bits == 0 || self.b_bits > tag_bits {
            return Err(config_err("b_bits must be in 1..=tag width"));
        }
        Ok(())
    }

    /// `tag[D_MSB:D_LSB]`.
    #[inline]
    pub fn dead_pattern(&self, tag: u64) -> u64 {
        let width = self.d_msb - self.d_lsb + 1;
        let mask = if width >= 64 { u64::MAX } else { (1 << width) - 1 };
        (tag >> self.d_lsb) & mask
    }
}

/// `tag[B_BITS-1:0]` as an unsigned priority. Lower values are evicted and
/// bypassed first. `b_bits == 0` collapses everything into a single tier.
#[inline]
pub fn priority(tag: u64, b_bits: u32) -> u32 {
    if b_bits == 0 {
        0
    } else {
        (tag & ((1u64 << b_bits) - 1)) as u32
    }
}

/// Table sizes of the hardware structures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TmuCapacity {
    pub tensor_entries: usize,
    pub tile_entries: usize,
    pub dead_fifo_depth: usize,
}

impl Default for TmuCapacity {
    fn default() -> Self {
        Self {
            tensor_entries: 8,
            tile_entries: 256,
            dead_fifo_depth: 16,
        }
    }
}

pub type TensorId = usize;

#[derive(Debug, Clone)]
struct LiveTile {
    tensor: TensorId,
    tile: u64,
    acc_cnt: u32,
    birth: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Retirement {
    pub tensor: TensorId,
    pub tile: u64,
    pub pattern: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TmuDiagnostics {
    pub retirements: u64,
    /// Live tiles dropped because the live table was full.
    pub live_dropped: u64,
    pub unknown_clears: u64,
}

#[derive(Debug, Clone)]
pub struct Tmu {
    params: TmuParams,
    cap: TmuCapacity,
    map: AddressMap,
    tensors: Vec<Option<TensorMeta>>,
    live: Vec<LiveTile>,
    dead: VecDeque<u64>,
    births: u64,
    pub diag: TmuDiagnostics,
}

impl Tmu {
    pub fn new(params: TmuParams, cap: TmuCapacity, map: AddressMap) -> Result<Self> {
        params.validate(map.tag_bits())?;
        if cap.tensor_entries == 0 || cap.tile_entries == 0 || cap.dead_fifo_depth == 0 {
            return Err(config_err("TMU table sizes must be positive"));
        }
        Ok(Self {
            params,
            cap,
            map,
            tensors: vec![None; cap.tensor_entries],
            live: Vec::with_capacity(cap.tile_entries),
            dead: VecDeque::with_capacity(cap.dead_fifo_depth),
            births: 0,
            diag: TmuDiagnostics::default(),
        })
    }

    pub fn params(&self) -> &TmuParams {
        &self.params
    }

    pub fn register_tensor(&mut self, meta: TensorMeta) -> Result<TensorId> {
        if meta.n_acc == 0 || meta.size == 0 || meta.tile_size == 0 {
            return Err(config_err(format!("tensor {} has a zero size or nAcc", meta.name)));
        }
        if self
            .tensors
            .iter()
            .flatten()
            .any(|t| meta.base < t.end() && t.base < meta.end())
        {
            return Err(Error::TensorOverlap {
                base: meta.base,
                end: meta.end(),
            });
        }
        let slot = self
            .tensors
            .iter()
            .position(Option::is_none)
            .ok_or(Error::TensorTableFull {
                capacity: self.cap.tensor_entries,
            })?;
        self.tensors[slot] = Some(meta);
        Ok(slot)
    }

    /// Frees a registration and drops its live tiles. Dead patterns stay in
    /// the FIFO until displaced.
    pub fn clear_tensor(&mut self, id: TensorId) {
        match self.tensors.get_mut(id) {
            Some(slot @ Some(_)) => {
                *slot = None;
                self.live.retain(|t| t.tensor != id);
            }
            _ => {
                warn!("TMU clear of unknown tensor id {id}");
                self.diag.unknown_clears += 1;
            }
        }
    }

    pub fn lookup(&self, addr: u64) -> Option<(TensorId, &TensorMeta)> {
        self.tensors
            .iter()
            .enumerate()
            .find_map(|(i, t)| t.as_ref().filter(|t| t.contains(addr)).map(|t| (i, t)))
    }

    pub fn registered(&self) -> usize {
        self.tensors.iter().flatten().count()
    }

    /// Reports one LLC access. Only a tile's last line counts toward its
    /// access counter; the tile retires when the counter reaches `nAcc`.
    /// Whole-tensor bypassed tensors never reside in the cache and are not
    /// tracked.
    pub fn notify_access(&mut self, addr: u64) -> Option<Retirement> {
        let line_bytes = self.map.line_bytes();
        let (id, meta) = self.lookup(addr)?;
        if meta.bypass_whole {
            return None;
        }
        let off = addr - meta.base;
        let tile = off / meta.tile_size;
        let tile_end = ((tile + 1) * meta.tile_size).min(meta.size);
        let tll = meta.base + tile_end - line_bytes;
        if addr / line_bytes != tll / line_bytes {
            return None;
        }
        let n_acc = meta.n_acc;

        let idx = match self.live.iter().position(|t| t.tensor == id && t.tile == tile) {
            Some(i) => i,
            None => {
                if self.live.len() == self.cap.tile_entries {
                    let oldest = self
                        .live
                        .iter()
                        .enumerate()
                        .min_by_key(|(_, t)| t.birth)
                        .map(|(i, _)| i)
                        .expect("live table is full");
                    self.live.swap_remove(oldest);
                    self.diag.live_dropped += 1;
                }
                self.births += 1;
                self.live.push(LiveTile {
                    tensor: id,
                    tile,
                    acc_cnt: 0,
                    birth: self.births,
                });
                self.live.len() - 1
            }
        };
        self.live[idx].acc_cnt += 1;
        if self.live[idx].acc_cnt < n_acc {
            return None;
        }
        self.live.swap_remove(idx);
        let pattern = self.params.dead_pattern(self.map.tag_of_addr(tll));
        if self.dead.len() == self.cap.dead_fifo_depth {
            self.dead.pop_front();
        }
        self.dead.push_back(pattern);
        self.diag.retirements += 1;
        Some(Retirement {
            tensor: id,
            tile,
            pattern,
        })
    }

    /// True iff `tag[D_MSB:D_LSB]` matches an entry of the dead FIFO.
    #[inline]
    pub fn is_dead(&self, tag: u64) -> bool {
        if self.dead.is_empty() {
            return false;
        }
        let p = self.params.dead_pattern(tag);
        self.dead.iter().any(|&d| d == p)
    }

    pub fn dead_patterns(&self) -> impl Iterator<Item = u64> + '_ {
        self.dead.iter().copied()
    }

    /// Whole-tensor bypass flag of the tensor owning `addr`.
    pub fn lookup_bypass_flag(&self, addr: u64) -> bool {
        self.lookup(addr).is_some_and(|(_, t)| t.bypass_whole)
    }

    pub fn live_tiles(&self) -> usize {
        self.live.len()
    }

    /// Live access counter of a tile, if tracked.
    pub fn acc_cnt(&self, tensor: TensorId, tile: u64) -> Option<u32> {
        self.live
            .iter()
            .find(|t| t.tensor == tensor && t.tile == tile)
            .map(|t| t.acc_cnt)
    }
}
