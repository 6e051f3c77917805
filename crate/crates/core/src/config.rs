//! Run configuration: hardware, policy, TMU, workload and metrics, loadable
//! from TOML with every omitted key taking its default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::addr::AddressMap;
use crate::cores::CoreConfig;
use crate::dram::DramConfig;
use crate::error::{config_err, Error, Result};
use crate::llc::LlcConfig;
use crate::policy::PolicyConfig;
use crate::tmu::{TmuCapacity, TmuParams};
use crate::tracegen::{
    build_flashattention_dataflow, build_matmul_dataflow, DataflowConfig, DataflowProgram, GroupAlloc, ModelConfig,
    TraceParams,
};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HardwareConfig {
    pub llc: LlcConfig,
    pub dram: DramConfig,
    pub core: CoreConfig,
}

/// TMU settings. An absent D window is derived from the workload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TmuConfig {
    pub d_lsb: Option<u32>,
    pub d_msb: Option<u32>,
    pub b_bits: u32,
    #[serde(flatten)]
    pub capacity: TmuCapacity,
}

impl Default for TmuConfig {
    fn default() -> Self {
        Self {
            d_lsb: None,
            d_msb: None,
            b_bits: 3,
            capacity: TmuCapacity::default(),
        }
    }
}

/// Width of the derived dead-pattern window in tag bits.
const AUTO_D_WIDTH: u32 = 16;

impl TmuConfig {
    /// Resolves the D window. By default it starts at the tag bit whose
    /// period equals the workload's retirement region (one K/V head slab for
    /// attention), so a pattern names one region.
    pub fn resolve(&self, map: &AddressMap, retire_region_bytes: u64) -> Result<TmuParams> {
        let tag_bits = map.tag_bits();
        let auto_lsb = if retire_region_bytes > map.way_bytes() {
            (retire_region_bytes / map.way_bytes()).ilog2()
        } else {
            0
        };
        let d_lsb = self.d_lsb.unwrap_or(auto_lsb.min(tag_bits.saturating_sub(1)));
        let d_msb = self
            .d_msb
            .unwrap_or((d_lsb + AUTO_D_WIDTH - 1).min(tag_bits.saturating_sub(1)));
        let p = TmuParams {
            d_lsb,
            d_msb,
            b_bits: self.b_bits,
        };
        p.validate(tag_bits)?;
        Ok(p)
    }
}

/// A preset name or an inline head configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Preset(String),
    Inline(ModelConfig),
}

impl ModelSpec {
    pub fn resolve(&self) -> Result<ModelConfig> {
        match self {
            ModelSpec::Preset(name) => {
                ModelConfig::preset(name).ok_or_else(|| config_err(format!("unknown model preset {name:?}")))
            }
            ModelSpec::Inline(m) => Ok(m.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Workload {
    FlashAttention {
        model: ModelSpec,
        seq_len: u32,
        #[serde(default = "one")]
        batch: u32,
        group_alloc: GroupAlloc,
        /// Q tile rows.
        tile_rows: u32,
        /// K/V tile rows.
        tile_cols: u32,
    },
    Matmul {
        m_tiles: u32,
        n_tiles: u32,
        k_tiles: u32,
        tile_bytes: u64,
    },
}

fn one() -> u32 {
    1
}

impl Default for Workload {
    fn default() -> Self {
        Workload::FlashAttention {
            model: ModelSpec::Preset("desk-temporal".into()),
            seq_len: 1024,
            batch: 1,
            group_alloc: GroupAlloc::Temporal,
            tile_rows: 64,
            tile_cols: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    /// Window of the hit-rate series, cycles.
    pub hit_rate_window: u64,
    /// Fraction of requests excluded from steady-state metrics.
    pub warmup_fraction: f64,
    /// Window of the DRAM bandwidth measurement, cycles.
    pub bw_window: u64,
    /// Abort threshold.
    pub max_cycles: u64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            hit_rate_window: 4096,
            warmup_fraction: 0.0,
            bw_window: 512,
            max_cycles: 200_000_000,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub label: String,
    pub seed: u64,
    pub hardware: HardwareConfig,
    pub policy: PolicyConfig,
    pub tmu: TmuConfig,
    pub workload: Workload,
    pub metrics: MetricsConfig,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Compact JSON echo of the full configuration.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Returns a copy with `path` (dotted, e.g. `hardware.llc.total_size`)
    /// set to `value`.
    pub fn with_override(&self, path: &str, value: &serde_json::Value) -> Result<Self> {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let mut node = &mut v;
        let mut keys = path.split('.').peekable();
        while let Some(k) = keys.next() {
            let obj = node
                .as_object_mut()
                .ok_or_else(|| config_err(format!("override path {path:?} descends into a non-table")))?;
            if keys.peek().is_none() {
                obj.insert(k.to_string(), value.clone());
                break;
            }
            node = obj
                .get_mut(k)
                .ok_or_else(|| config_err(format!("override path {path:?}: no key {k:?}")))?;
        }
        serde_json::from_value(v).map_err(|e| config_err(format!("override {path} = {value}: {e}")))
    }

    pub fn trace_params(&self) -> TraceParams {
        TraceParams {
            line_bytes: self.hardware.llc.line_size,
            flops_per_slot: self.hardware.core.flops_per_slot,
        }
    }

    pub fn build_program(&self) -> Result<DataflowProgram> {
        let n_cores = self.hardware.core.n_cores;
        let program = match &self.workload {
            Workload::FlashAttention {
                model,
                seq_len,
                batch,
                group_alloc,
                tile_rows,
                tile_cols,
            } => {
                let df = DataflowConfig {
                    seq_len: *seq_len,
                    batch: *batch,
                    group_alloc: *group_alloc,
                    tile_rows: *tile_rows,
                    tile_cols: *tile_cols,
                    n_cores,
                };
                build_flashattention_dataflow(&model.resolve()?, &df, &self.trace_params())?
            }
            Workload::Matmul {
                m_tiles,
                n_tiles,
                k_tiles,
                tile_bytes,
            } => build_matmul_dataflow(*m_tiles, *n_tiles, *k_tiles, *tile_bytes, n_cores, &self.trace_params())?,
        };
        program.validate()?;
        Ok(program)
    }

    /// Checks everything that does not need the generated program.
    pub fn validate(&self) -> Result<()> {
        let hw = &self.hardware;
        hw.llc.validate()?;
        hw.dram.validate()?;
        hw.core.validate()?;
        self.policy.validate(self.tmu.b_bits)?;
        let map = hw.llc.address_map()?;
        if self.tmu.b_bits == 0 || self.tmu.b_bits > map.tag_bits() {
            return Err(config_err("b_bits must be in 1..=tag width"));
        }
        let m = &self.metrics;
        if m.hit_rate_window == 0 || m.bw_window == 0 || m.max_cycles == 0 {
            return Err(config_err("metric windows and max_cycles must be positive"));
        }
        if !(0.0..1.0).contains(&m.warmup_fraction) {
            return Err(config_err("warmup_fraction must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Label for reports: the explicit one, else the policy label.
    pub fn display_label(&self) -> String {
        if self.label.is_empty() {
            self.policy.label()
        } else {
            self.label.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{BypassMode, Replacement};

    #[test]
    fn partial_toml_fills_defaults() {
        let c = RunConfig::from_toml_str(
            r#"
            seed = 7
            [hardware.llc]
            total_size = 262144
            associativity = 8
            mshr-num-entry = 4
            [policy]
            replacement = "at"
            bypass_mode = "dynamic"
            [workload]
            kind = "flash_attention"
            model = "desk-spatial"
            seq_len = 512
            group_alloc = "spatial"
            tile_rows = 64
            tile_cols = 64
            "#,
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.hardware.llc.total_size, 262_144);
        assert_eq!(c.hardware.llc.mshr_entries, 4);
        assert_eq!(c.hardware.llc.data_latency, 25);
        assert_eq!(c.policy.replacement, Replacement::At);
        assert_eq!(c.policy.bypass_mode, BypassMode::Dynamic);
        assert_eq!(c.tmu.b_bits, 3);
        c.validate().unwrap();
        assert!(c.build_program().is_ok());
    }

    #[test]
    fn round_trips_through_toml_and_json() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap(), c);
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn dotted_overrides() {
        let c = RunConfig::default();
        let d = c
            .with_override("hardware.llc.total_size", &serde_json::json!(1 << 18))
            .unwrap();
        assert_eq!(d.hardware.llc.total_size, 1 << 18);
        let d = c.with_override("policy.replacement", &serde_json::json!("at")).unwrap();
        assert_eq!(d.policy.replacement, Replacement::At);
        assert!(c.with_override("nope.x", &serde_json::json!(1)).is_err());
        assert!(c.with_override("policy.replacement", &serde_json::json!("mru")).is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = RunConfig::default();
        c.policy.bypass_lb = 10;
        c.policy.bypass_ub = 5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = RunConfig::default();
        c.policy.b_gear = 9;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.hardware.llc.total_size = 1000;
        assert!(c.validate().is_err());
        assert!(matches!(RunConfig::from_toml_str("seed = \"x\""), Err(Error::Parse(_))));
    }

    #[test]
    fn auto_d_window_names_retirement_region() {
        let llc = LlcConfig {
            total_size: 256 << 10,
            ..Default::default()
        };
        let map = llc.address_map().unwrap();
        assert_eq!(map.way_bytes(), 32 << 10);
        let p = TmuConfig::default().resolve(&map, 128 << 10).unwrap();
        assert_eq!(p.d_lsb, 2);
        assert_eq!(p.d_msb, 17);
        let p = TmuConfig::default().resolve(&map, 8 << 10).unwrap();
        assert_eq!(p.d_lsb, 0);
    }
}
