//! Replacement and bypass decisions.
//!
//! Victim selection: a dead way (per the TMU dead FIFO) if DBP is on, else the
//! lowest anti-thrashing priority tier under `at`, with LRU as the final
//! tie-break in both cases. Bypass: whole-tensor flags from the TMU first,
//! then `priority < B_GEAR`, where the gear is fixed, driven per slice by the
//! eviction-rate controller, or additionally gated on the requester being the
//! slower core of its sharing group (`gqa_dynamic`).

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::llc::Way;
use crate::tmu::priority;
use crate::tracegen::DataflowProgram;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Replacement {
    Lru,
    /// Anti-thrashing: evict the smallest `tag[B_BITS-1:0]` first.
    At,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BypassMode {
    Off,
    Static,
    Dynamic,
    GqaDynamic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub replacement: Replacement,
    pub dbp: bool,
    pub bypass_mode: BypassMode,
    /// Gear used by `static` mode, and the starting gear of the dynamic modes.
    pub b_gear: u32,
    /// Evictions per window above which the gear goes up.
    pub bypass_ub: u32,
    /// Evictions per window below which the gear goes down.
    pub bypass_lb: u32,
    /// Controller window in cycles.
    pub window: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            replacement: Replacement::Lru,
            dbp: false,
            bypass_mode: BypassMode::Off,
            b_gear: 0,
            bypass_ub: 8,
            bypass_lb: 1,
            window: 16384,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self, b_bits: u32) -> Result<()> {
        if self.bypass_lb >= self.bypass_ub {
            return Err(config_err("bypass_lb must be below bypass_ub"));
        }
        if self.b_gear > max_gear(b_bits) {
            return Err(config_err(format!(
                "b_gear {} exceeds 2^b_bits = {}",
                self.b_gear,
                max_gear(b_bits)
            )));
        }
        if self.window == 0 {
            return Err(config_err("controller window must be positive"));
        }
        Ok(())
    }

    /// Short human-readable name, e.g. `at+bypass+dbp`.
    pub fn label(&self) -> String {
        let mut parts = vec![match self.replacement {
            Replacement::Lru => "lru",
            Replacement::At => "at",
        }
        .to_string()];
        match self.bypass_mode {
            BypassMode::Off => {}
            BypassMode::Static => parts.push(format!("fix{}", self.b_gear)),
            BypassMode::Dynamic => parts.push("bypass".into()),
            BypassMode::GqaDynamic => parts.push("gqa_bypass".into()),
        }
        if self.dbp {
            parts.push("dbp".into());
        }
        parts.join("+")
    }
}

pub fn max_gear(b_bits: u32) -> u32 {
    1 << b_bits
}

/// Picks the way to evict from a full set. `is_dead` is the TMU dead-FIFO
/// query on a tag.
pub fn select_victim(
    set: &[Way],
    replacement: Replacement,
    dbp: bool,
    b_bits: u32,
    is_dead: impl Fn(u64) -> bool,
) -> usize {
    debug_assert!(!set.is_empty() && set.iter().all(|w| w.valid));
    if dbp {
        let dead = set
            .iter()
            .enumerate()
            .filter(|(_, w)| is_dead(w.tag))
            .min_by_key(|(_, w)| w.last_use);
        if let Some((i, _)) = dead {
            return i;
        }
    }
    let pick = match replacement {
        Replacement::At => set
            .iter()
            .enumerate()
            .min_by_key(|(_, w)| (priority(w.tag, b_bits), w.last_use)),
        Replacement::Lru => set.iter().enumerate().min_by_key(|(_, w)| w.last_use),
    };
    pick.map(|(i, _)| i).expect("set is non-empty")
}

/// Everything the miss path knows when deciding whether to bypass.
#[derive(Debug, Clone, Copy)]
pub struct BypassQuery {
    pub whole_tensor: bool,
    pub priority: u32,
    pub gear: u32,
    pub requester_slower: bool,
    pub contended: bool,
}

pub fn should_bypass(q: &BypassQuery, mode: BypassMode) -> bool {
    if q.whole_tensor {
        return true;
    }
    match mode {
        BypassMode::Off => false,
        BypassMode::Static | BypassMode::Dynamic => q.priority < q.gear,
        BypassMode::GqaDynamic => q.requester_slower && q.contended && q.priority < q.gear,
    }
}

/// One eviction-rate controller step for a slice.
pub fn update_gear(gear: u32, evictions_in_window: u32, cfg: &PolicyConfig, b_bits: u32) -> u32 {
    if evictions_in_window > cfg.bypass_ub {
        (gear + 1).min(max_gear(b_bits))
    } else if evictions_in_window < cfg.bypass_lb {
        gear.saturating_sub(1)
    } else {
        gear
    }
}

/// Per-slice gears.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GearState {
    pub gears: Vec<u32>,
}

impl GearState {
    pub fn new(n_slices: usize, initial: u32) -> Self {
        Self {
            gears: vec![initial; n_slices],
        }
    }
}

/// Groups of cores that share K/V data. Empty for dataflows without
/// inter-core sharing, which leaves `gqa_dynamic` inert.
pub fn pairing(program: &DataflowProgram) -> Vec<Vec<usize>> {
    program.sharing_groups.clone()
}

/// Marks, per core, whether it is behind the leader of its sharing group.
/// Ties leave nobody slower.
pub fn slower_cores(groups: &[Vec<usize>], commits: &[u64]) -> Vec<bool> {
    let mut slower = vec![false; commits.len()];
    for g in groups {
        let lead = g.iter().map(|&c| commits[c]).max().unwrap_or(0);
        for &c in g {
            slower[c] = commits[c] < lead;
        }
    }
    slower
}
