//! Dataflow to trace conversion.
//!
//! Produces deterministic per-core instruction streams for a tiled MatMul or
//! a GQA FlashAttention-2 kernel, together with the TMU registration records
//! (base, size, tile size, expected accesses per line) and the dataflow
//! statistics consumed by the analytical model.
//!
//! Tensors are laid out tile-major, each at a base aligned to the next power
//! of two of its size, so tensor regions never overlap and every tensor
//! starts on a tag boundary for any cache geometry smaller than it.

use std::fmt::Write as _;

use rustc_hash::{FxHashMap, FxHashSet};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// First tensor base address. Keeps address zero unused.
const LAYOUT_ORIGIN: u64 = 1 << 30;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub n_q_heads: u32,
    pub n_kv_heads: u32,
    pub head_dim: u32,
    pub dtype_bytes: u32,
}

impl ModelConfig {
    pub fn group_size(&self) -> u32 {
        self.n_q_heads / self.n_kv_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_kv_heads == 0 || self.n_q_heads == 0 {
            return Err(config_err("head counts must be positive"));
        }
        if !self.n_q_heads.is_multiple_of(self.n_kv_heads) {
            return Err(config_err(format!(
                "n_q_heads ({}) must be a multiple of n_kv_heads ({})",
                self.n_q_heads, self.n_kv_heads
            )));
        }
        if self.head_dim == 0 || self.dtype_bytes == 0 {
            return Err(config_err("head_dim and dtype_bytes must be positive"));
        }
        Ok(())
    }

    /// Head-count presets. The full-size entries carry the public attention
    /// shapes of the models; the `desk-*` entries are scaled down so a cycle
    /// level run finishes in seconds.
    pub fn preset(name: &str) -> Option<ModelConfig> {
        let (q, kv, d) = match name {
            "gemma3-27b" => (32, 16, 128),
            "llama3-70b" => (64, 8, 128),
            "llama3-405b" => (128, 8, 128),
            "qwen3-8b" => (32, 8, 128),
            "desk-temporal" => (8, 4, 64),
            "desk-spatial" => (4, 2, 64),
            "desk-mha" => (4, 4, 64),
            _ => return None,
        };
        Some(ModelConfig {
            name: name.to_string(),
            n_q_heads: q,
            n_kv_heads: kv,
            head_dim: d,
            dtype_bytes: 2,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupAlloc {
    /// Q heads of one KV group run on different cores, sharing K/V.
    Spatial,
    /// Q heads of one KV group run back-to-back on the same core.
    Temporal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataflowConfig {
    pub seq_len: u32,
    pub batch: u32,
    pub group_alloc: GroupAlloc,
    /// Q tile rows (tokens per Q tile).
    pub tile_rows: u32,
    /// K/V tile rows (tokens per K/V tile). Tiles always span the full head
    /// dimension.
    pub tile_cols: u32,
    pub n_cores: u32,
}

/// Parameters of the trace generator that come from the hardware rather than
/// the dataflow.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceParams {
    pub line_bytes: u64,
    /// FLOPs one compute issue slot retires.
    pub flops_per_slot: u64,
}

impl Default for TraceParams {
    fn default() -> Self {
        Self {
            line_bytes: 64,
            flops_per_slot: 8192,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperandId {
    Left,
    Right,
    Output,
    Other,
}

/// Registration record handed to the TMU.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub base: u64,
    pub size: u64,
    pub tile_size: u64,
    /// Expected accesses of every line of every tile.
    pub n_acc: u32,
    pub bypass_whole: bool,
    pub operand: OperandId,
}

impl TensorMeta {
    pub fn end(&self) -> u64 {
        self.base + self.size
    }

    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.base && addr < self.end()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Instruction {
    LoadTile { addr: u64, len: u64 },
    StoreTile { addr: u64, len: u64 },
    Compute { slots: u64 },
}

impl Instruction {
    pub fn kind_str(&self) -> &'static str {
        match self {
            Instruction::LoadTile { .. } => "load_tile",
            Instruction::StoreTile { .. } => "store_tile",
            Instruction::Compute { .. } => "compute",
        }
    }
}

/// A barrier-delimited slice of the program. Registrations and clears are
/// applied when every core has drained the previous phase.
#[derive(Debug, Clone, Default)]
pub struct Phase {
    pub register: Vec<usize>,
    pub clear: Vec<usize>,
    pub streams: Vec<Vec<Instruction>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DataflowStats {
    /// Compute issue slots over all cores.
    pub n_comp: u64,
    /// Line-sized memory requests over all cores.
    pub n_mem: u64,
    /// Distinct lines touched.
    pub n_cold: u64,
    /// Largest per-phase footprint of reusable (non-bypassed) tensors, bytes.
    pub s_work: u64,
    /// Requests and distinct lines of reusable tensors.
    pub n_reuse_requests: u64,
    pub n_reuse_lines: u64,
    /// Requests and distinct lines of whole-tensor bypassed tensors.
    pub n_pinned_requests: u64,
    pub n_pinned_lines: u64,
    /// Mean number of distinct cores touching a reusable line.
    pub sharing_factor: f64,
    pub per_tensor_nacc: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct DataflowProgram {
    pub line_bytes: u64,
    pub n_cores: usize,
    pub tensors: Vec<TensorMeta>,
    pub phases: Vec<Phase>,
    /// Groups of cores that stream the same K/V data.
    pub sharing_groups: Vec<Vec<usize>>,
    /// Size of the natural retirement region (one K/V head slab, or one tile).
    pub retire_region_bytes: u64,
    pub stats: DataflowStats,
}

struct Layout {
    cursor: u64,
    tensors: Vec<TensorMeta>,
}

impl Layout {
    fn new() -> Self {
        Self {
            cursor: LAYOUT_ORIGIN,
            tensors: Vec::new(),
        }
    }

    fn alloc(
        &mut self,
        name: String,
        size: u64,
        tile_size: u64,
        n_acc: u32,
        bypass_whole: bool,
        operand: OperandId,
    ) -> usize {
        let align = size.next_power_of_two();
        let base = self.cursor.div_ceil(align) * align;
        self.cursor = base + size;
        self.tensors.push(TensorMeta {
            name,
            base,
            size,
            tile_size,
            n_acc,
            bypass_whole,
            operand,
        });
        self.tensors.len() - 1
    }
}

fn check_aligned(what: &str, bytes: u64, line: u64) -> Result<()> {
    if bytes == 0 || !bytes.is_multiple_of(line) {
        return Err(config_err(format!(
            "{what} ({bytes} B) must be a positive multiple of the line size ({line} B)"
        )));
    }
    Ok(())
}

/// Tiled MatMul `C[M,N] += A[M,K] * B[K,N]` with one loop nest per output
/// tile: for each k, load A(m,k), load B(k,n), compute; then store C(m,n).
/// Output tiles are dealt round-robin over the cores.
pub fn build_matmul_dataflow(
    m_tiles: u32,
    n_tiles: u32,
    k_tiles: u32,
    tile_bytes: u64,
    n_cores: u32,
    params: &TraceParams,
) -> Result<DataflowProgram> {
    if m_tiles == 0 || n_tiles == 0 || k_tiles == 0 || n_cores == 0 {
        return Err(config_err("matmul tile counts and core count must be positive"));
    }
    check_aligned("matmul tile", tile_bytes, params.line_bytes)?;
    let (m, n, k) = (m_tiles as u64, n_tiles as u64, k_tiles as u64);

    let mut layout = Layout::new();
    let a = layout.alloc("A".into(), m * k * tile_bytes, tile_bytes, n_tiles, false, OperandId::Left);
    let b = layout.alloc("B".into(), k * n * tile_bytes, tile_bytes, m_tiles, false, OperandId::Right);
    let c = layout.alloc("C".into(), m * n * tile_bytes, tile_bytes, 1, false, OperandId::Output);
    let (a_base, b_base, c_base) = (
        layout.tensors[a].base,
        layout.tensors[b].base,
        layout.tensors[c].base,
    );

    // Square tiles of 2-byte elements: 2 * side^3 FLOPs per tile product.
    let side = ((tile_bytes / 2) as f64).sqrt();
    let slots = ((2.0 * side.powi(3)) / params.flops_per_slot as f64).ceil().max(1.0) as u64;

    let mut streams = vec![Vec::new(); n_cores as usize];
    for mi in 0..m {
        for ni in 0..n {
            let core = ((mi * n + ni) % n_cores as u64) as usize;
            let s = &mut streams[core];
            for ki in 0..k {
                s.push(Instruction::LoadTile {
                    addr: a_base + (mi * k + ki) * tile_bytes,
                    len: tile_bytes,
                });
                s.push(Instruction::LoadTile {
                    addr: b_base + (ki * n + ni) * tile_bytes,
                    len: tile_bytes,
                });
                s.push(Instruction::Compute { slots });
            }
            s.push(Instruction::StoreTile {
                addr: c_base + (mi * n + ni) * tile_bytes,
                len: tile_bytes,
            });
        }
    }

    let mut program = DataflowProgram {
        line_bytes: params.line_bytes,
        n_cores: n_cores as usize,
        tensors: layout.tensors,
        phases: vec![Phase {
            register: vec![a, b, c],
            clear: Vec::new(),
            streams,
        }],
        sharing_groups: Vec::new(),
        retire_region_bytes: tile_bytes,
        stats: DataflowStats::default(),
    };
    program.stats = compute_dataflow_stats(&program);
    Ok(program)
}

/// Number of cores a KV group is spread over under spatial allocation.
fn spatial_factor(group: u32, n_cores: u32) -> u32 {
    let (mut a, mut b) = (group, n_cores);
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// GQA FlashAttention-2 forward. Per Q tile: load Q once, stream every K/V
/// tile (load K, load V, compute), store O once. Q and O are registered with
/// the whole-tensor bypass flag since they live in the scratchpad for their
/// whole lifetime. Each batch is one phase; the previous batch's tensors are
/// cleared at the phase boundary.
pub fn build_flashattention_dataflow(
    model: &ModelConfig,
    df: &DataflowConfig,
    params: &TraceParams,
) -> Result<DataflowProgram> {
    model.validate()?;
    if df.n_cores == 0 || df.batch == 0 || df.seq_len == 0 {
        return Err(config_err("n_cores, batch and seq_len must be positive"));
    }
    if df.tile_rows == 0 || df.tile_cols == 0 {
        return Err(config_err("tile sizes must be positive"));
    }
    let group = model.group_size();
    let (n_groups, per_group) = match df.group_alloc {
        GroupAlloc::Temporal => (df.n_cores, 1),
        GroupAlloc::Spatial => {
            if group < 2 {
                return Err(config_err("spatial group allocation needs a GQA group of at least 2"));
            }
            let s = spatial_factor(group, df.n_cores);
            if s < 2 {
                return Err(config_err(format!(
                    "group size {group} cannot be spread over {} cores",
                    df.n_cores
                )));
            }
            (df.n_cores / s, s)
        }
    };

    let elem_row = model.head_dim as u64 * model.dtype_bytes as u64;
    let q_tile = df.tile_rows as u64 * elem_row;
    let kv_tile = df.tile_cols as u64 * elem_row;
    check_aligned("Q tile", q_tile, params.line_bytes)?;
    check_aligned("K/V tile", kv_tile, params.line_bytes)?;
    let n_q_tiles = df.seq_len.div_ceil(df.tile_rows) as u64;
    let n_kv_tiles = df.seq_len.div_ceil(df.tile_cols) as u64;
    let q_slab = n_q_tiles * q_tile;
    let kv_slab = n_kv_tiles * kv_tile;

    let flops = 4 * df.tile_rows as u64 * df.tile_cols as u64 * model.head_dim as u64;
    let slots = flops.div_ceil(params.flops_per_slot).max(1);
    let kv_nacc = group * n_q_tiles as u32;

    let mut layout = Layout::new();
    let mut phases = Vec::new();
    let mut prev: Vec<usize> = Vec::new();
    for b in 0..df.batch {
        let q = layout.alloc(format!("Q{b}"), model.n_q_heads as u64 * q_slab, q_tile, 1, true, OperandId::Left);
        let k = layout.alloc(format!("K{b}"), model.n_kv_heads as u64 * kv_slab, kv_tile, kv_nacc, false, OperandId::Right);
        let v = layout.alloc(format!("V{b}"), model.n_kv_heads as u64 * kv_slab, kv_tile, kv_nacc, false, OperandId::Right);
        let o = layout.alloc(format!("O{b}"), model.n_q_heads as u64 * q_slab, q_tile, 1, true, OperandId::Output);
        let [qb, kb, vb, ob] = [q, k, v, o].map(|t| layout.tensors[t].base);

        let mut streams = vec![Vec::new(); df.n_cores as usize];
        for kv_head in 0..model.n_kv_heads {
            let core_group = kv_head % n_groups;
            for member in 0..per_group {
                let core = (core_group * per_group + member) as usize;
                let s = &mut streams[core];
                let q_heads = (member..group)
                    .step_by(per_group as usize)
                    .map(|i| kv_head * group + i);
                for q_head in q_heads {
                    for qt in 0..n_q_tiles {
                        let q_off = q_head as u64 * q_slab + qt * q_tile;
                        s.push(Instruction::LoadTile { addr: qb + q_off, len: q_tile });
                        for kt in 0..n_kv_tiles {
                            let kv_off = kv_head as u64 * kv_slab + kt * kv_tile;
                            s.push(Instruction::LoadTile { addr: kb + kv_off, len: kv_tile });
                            s.push(Instruction::LoadTile { addr: vb + kv_off, len: kv_tile });
                            s.push(Instruction::Compute { slots });
                        }
                        s.push(Instruction::StoreTile { addr: ob + q_off, len: q_tile });
                    }
                }
            }
        }
        phases.push(Phase {
            register: vec![q, k, v, o],
            clear: std::mem::take(&mut prev),
            streams,
        });
        prev = vec![q, k, v, o];
    }

    let sharing_groups = if per_group > 1 {
        (0..n_groups.min(model.n_kv_heads))
            .map(|g| ((g * per_group)..((g + 1) * per_group)).map(|c| c as usize).collect())
            .collect()
    } else {
        Vec::new()
    };

    let mut program = DataflowProgram {
        line_bytes: params.line_bytes,
        n_cores: df.n_cores as usize,
        tensors: layout.tensors,
        phases,
        sharing_groups,
        retire_region_bytes: kv_slab,
        stats: DataflowStats::default(),
    };
    program.stats = compute_dataflow_stats(&program);
    Ok(program)
}

impl DataflowProgram {
    pub fn tensor_of(&self, addr: u64) -> Option<usize> {
        self.tensors.iter().position(|t| t.contains(addr))
    }

    /// Every line request of the program in (phase, core, program) order.
    pub fn line_requests(&self) -> impl Iterator<Item = (usize, usize, u64, bool)> + '_ {
        let line = self.line_bytes;
        self.phases.iter().enumerate().flat_map(move |(p, ph)| {
            ph.streams.iter().enumerate().flat_map(move |(core, s)| {
                s.iter().flat_map(move |ins| {
                    let (addr, len, write) = match *ins {
                        Instruction::LoadTile { addr, len } => (addr, len, false),
                        Instruction::StoreTile { addr, len } => (addr, len, true),
                        Instruction::Compute { .. } => (0, 0, false),
                    };
                    (0..len / line).map(move |i| (p, core, (addr + i * line) / line, write))
                })
            })
        })
    }

    /// Checks that every memory instruction is line aligned and falls inside
    /// exactly one tensor registered by its phase (or an earlier, uncleared
    /// one).
    pub fn validate(&self) -> Result<()> {
        for (i, a) in self.tensors.iter().enumerate() {
            for b in &self.tensors[i + 1..] {
                if a.base < b.end() && b.base < a.end() {
                    return Err(config_err(format!("tensors {} and {} overlap", a.name, b.name)));
                }
            }
        }
        let mut live = FxHashSet::default();
        for ph in &self.phases {
            for c in &ph.clear {
                live.remove(c);
            }
            live.extend(ph.register.iter().copied());
            for s in &ph.streams {
                for ins in s {
                    if let Instruction::LoadTile { addr, len } | Instruction::StoreTile { addr, len } = *ins {
                        if addr % self.line_bytes != 0 || len % self.line_bytes != 0 {
                            return Err(config_err(format!("unaligned transfer at {addr:#x}")));
                        }
                        let owner = self.tensor_of(addr).filter(|t| live.contains(t));
                        match owner {
                            Some(t) if addr + len <= self.tensors[t].end() => {}
                            _ => {
                                return Err(config_err(format!(
                                    "transfer [{addr:#x}, +{len}) is outside the registered tensors"
                                )))
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Line-oriented debugging dump: `cycle-less: <core> <kind> <hex addr> <len>`.
    /// Compute instructions print `-` for the address and their slot count as
    /// the length.
    pub fn export_trace(&self) -> String {
        let mut out = String::new();
        for (p, ph) in self.phases.iter().enumerate() {
            let _ = writeln!(out, "# phase {p}");
            for (core, s) in ph.streams.iter().enumerate() {
                for ins in s {
                    let _ = match *ins {
                        Instruction::LoadTile { addr, len } | Instruction::StoreTile { addr, len } => {
                            writeln!(out, "cycle-less: {core} {} {addr:#x} {len}", ins.kind_str())
                        }
                        Instruction::Compute { slots } => {
                            writeln!(out, "cycle-less: {core} compute - {slots}")
                        }
                    };
                }
            }
        }
        out
    }
}

/// Counts the trace. `n_cold` is the number of distinct lines; `n_mem` the
/// number of line requests.
pub fn compute_dataflow_stats(p: &DataflowProgram) -> DataflowStats {
    let mut stats = DataflowStats {
        per_tensor_nacc: p.tensors.iter().map(|t| t.n_acc).collect(),
        ..Default::default()
    };
    let pinned: Vec<(u64, u64)> = p
        .tensors
        .iter()
        .filter(|t| t.bypass_whole)
        .map(|t| (t.base / p.line_bytes, t.end() / p.line_bytes))
        .collect();
    let is_pinned = |line: u64| pinned.iter().any(|&(lo, hi)| line >= lo && line < hi);

    let mut seen = FxHashSet::default();
    // line -> bitmask of touching cores (cores beyond 64 fold together).
    let mut touch: FxHashMap<u64, u64> = FxHashMap::default();
    let mut phase_lines = FxHashSet::default();
    let mut cur_phase = usize::MAX;
    for (phase, core, line, _) in p.line_requests() {
        if phase != cur_phase {
            stats.s_work = stats.s_work.max(phase_lines.len() as u64 * p.line_bytes);
            phase_lines.clear();
            cur_phase = phase;
        }
        stats.n_mem += 1;
        let first = seen.insert(line);
        if is_pinned(line) {
            stats.n_pinned_requests += 1;
            stats.n_pinned_lines += first as u64;
        } else {
            stats.n_reuse_requests += 1;
            stats.n_reuse_lines += first as u64;
            phase_lines.insert(line);
            *touch.entry(line).or_default() |= 1 << (core % 64);
        }
    }
    stats.s_work = stats.s_work.max(phase_lines.len() as u64 * p.line_bytes);
    stats.n_cold = seen.len() as u64;
    if !touch.is_empty() {
        let total: u64 = touch.values().map(|m| m.count_ones() as u64).sum();
        stats.sharing_factor = total as f64 / touch.len() as f64;
    }
    stats.n_comp = p
        .phases
        .iter()
        .flat_map(|ph| ph.streams.iter().flatten())
        .map(|ins| match ins {
            Instruction::Compute { slots } => *slots,
            _ => 0,
        })
        .sum();
    stats
}

/// Per-line access counts of the whole program, as seen by an infinite cache.
pub fn line_access_counts(p: &DataflowProgram) -> FxHashMap<u64, u32> {
    let mut counts = FxHashMap::default();
    for (_, _, line, _) in p.line_requests() {
        *counts.entry(line).or_default() += 1;
    }
    counts
}
