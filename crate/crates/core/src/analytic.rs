//! Bottleneck-and-overlap performance model.
//!
//! Each request class costs the time of its slowest stage: core issue
//! (`N * ipc_mem`), LLC throughput (`v_llc`) and, for misses, the DRAM
//! bandwidth that class achieves. Hits and cold misses sit on the critical
//! path; conflict misses are dispersed enough to hide behind compute:
//!
//! ```text
//! t = t_hit + t_cold + max(t_comp, t_cf)
//! ```
//!
//! Cold misses come in bursts and get `theta1 * BW`. Conflict misses get
//! `lambda` times their demand rate, clipped to `[theta2, theta3] * BW`.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::policy::{BypassMode, PolicyConfig, Replacement};
use crate::tracegen::DataflowStats;

/// Request counts and machine rates. Counts are in line requests, rates in
/// requests per cycle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyticalInput {
    pub n_hit: f64,
    pub n_cold: f64,
    pub n_cf: f64,
    pub n_comp: f64,
    pub n_mem: f64,
    /// DRAM transactions caused by cold and conflict requests, after MSHR
    /// merging.
    pub n_cold_dram: f64,
    pub n_cf_dram: f64,
    pub n_cores: f64,
    pub ipc_mem: f64,
    pub ipc_comp: f64,
    pub v_llc: f64,
    pub bw: f64,
}

impl AnalyticalInput {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.n_hit,
            self.n_cold,
            self.n_cf,
            self.n_comp,
            self.n_mem,
            self.n_cold_dram,
            self.n_cf_dram,
        ];
        if counts.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(config_err("request counts must be finite and non-negative"));
        }
        let sum = self.n_hit + self.n_cold + self.n_cf;
        if (sum - self.n_mem).abs() > 1e-6 * self.n_mem.max(1.0) {
            return Err(config_err(format!(
                "n_mem ({}) differs from n_hit + n_cold + n_cf ({sum})",
                self.n_mem
            )));
        }
        if self.n_cold_dram > self.n_cold + 1e-9 || self.n_cf_dram > self.n_cf + 1e-9 {
            return Err(config_err("DRAM transactions exceed the requests of their class"));
        }
        for (name, v) in [
            ("n_cores", self.n_cores),
            ("ipc_mem", self.ipc_mem),
            ("ipc_comp", self.ipc_comp),
            ("v_llc", self.v_llc),
            ("bw", self.bw),
        ] {
            if !(v > 0.0) {
                return Err(config_err(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Issue rate of all cores together.
    fn core_rate(&self) -> f64 {
        self.n_cores * self.ipc_mem
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyticalParams {
    pub theta1: f64,
    pub theta2: f64,
    pub theta3: f64,
    pub lambda: f64,
}

impl AnalyticalParams {
    pub fn validate(&self) -> Result<()> {
        for t in [self.theta1, self.theta2, self.theta3] {
            if !(t > 0.0 && t <= 1.0) {
                return Err(config_err("theta coefficients must lie in (0, 1]"));
            }
        }
        if self.theta2 >= self.theta3 {
            return Err(config_err("theta2 must be below theta3"));
        }
        if !(self.lambda > 0.0) {
            return Err(config_err("lambda must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeBreakdown {
    pub t_hit: f64,
    pub t_cold: f64,
    pub t_cf: f64,
    pub t_comp: f64,
    pub total: f64,
    pub bw_cold: f64,
    pub bw_cf: f64,
}

fn max3(a: f64, b: f64, c: f64) -> f64 {
    a.max(b).max(c)
}

/// Achieved DRAM bandwidth of cold and conflict misses, in requests/cycle.
pub fn estimate_bandwidth(input: &AnalyticalInput, p: &AnalyticalParams) -> (f64, f64) {
    let issue_time = input.n_mem / input.ipc_mem + input.n_comp / input.ipc_comp;
    let eta_cf = if issue_time > 0.0 {
        (input.n_cf / input.ipc_mem) / issue_time
    } else {
        0.0
    };
    let demand = (eta_cf * input.core_rate()).min(input.v_llc);
    let bw_cold = p.theta1 * input.bw;
    let bw_cf = (p.lambda * demand).clamp(p.theta2 * input.bw, p.theta3 * input.bw);
    (bw_cold, bw_cf)
}

pub fn predict_time(input: &AnalyticalInput, p: &AnalyticalParams) -> Result<TimeBreakdown> {
    input.validate()?;
    let (bw_cold, bw_cf) = estimate_bandwidth(input, p);
    if !(bw_cold > 0.0 && bw_cf > 0.0) {
        return Err(config_err("achieved bandwidth must be positive"));
    }
    let core = input.core_rate();
    let t_hit = (input.n_hit / core).max(input.n_hit / input.v_llc);
    let t_cold = max3(input.n_cold / core, input.n_cold / input.v_llc, input.n_cold_dram / bw_cold);
    let t_cf = max3(input.n_cf / core, input.n_cf / input.v_llc, input.n_cf_dram / bw_cf);
    let t_comp = input.n_comp / (input.n_cores * input.ipc_comp);
    Ok(TimeBreakdown {
        t_hit,
        t_cold,
        t_cf,
        t_comp,
        total: t_hit + t_cold + t_comp.max(t_cf),
        bw_cold,
        bw_cf,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeptSetResult {
    /// Priority tiers kept.
    pub tiers: u32,
    pub s_kept: u64,
}

/// Largest tier count `k <= 2^b_bits` with
/// `S_work * k / 2^b_bits <= S_LLC * (A-1) / A`.
pub fn estimate_kept_set(s_work: u64, b_bits: u32, s_llc: u64, assoc: u32) -> Result<KeptSetResult> {
    if s_work == 0 || s_llc == 0 || assoc < 2 || b_bits == 0 || b_bits > 32 {
        return Err(config_err("kept-set estimate needs positive sizes, A >= 2 and 1 <= B_BITS <= 32"));
    }
    let tiers = 1u128 << b_bits;
    let a = assoc as u128;
    let kept = ((s_llc as u128 * (a - 1) * tiers) / (a * s_work as u128)).min(tiers) as u32;
    Ok(KeptSetResult {
        tiers: kept,
        s_kept: (s_work as u128 * kept as u128 / tiers) as u64,
    })
}

/// Cache geometry and machine rates for count prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelMachine {
    pub s_llc: u64,
    pub assoc: u32,
    pub b_bits: u32,
    pub n_cores: f64,
    pub ipc_mem: f64,
    pub ipc_comp: f64,
    pub v_llc: f64,
    pub bw: f64,
}

/// Derives the request counts of a dataflow under a policy without
/// simulating it.
///
/// Reusable requests split into first touches (cold) and reuses. A reuse
/// hits when its line belongs to the subset the policy keeps resident:
/// everything when the working set fits, nothing under LRU thrashing, the
/// top kept priority tiers under anti-thrashing, and a subset of the usable
/// capacity under ideal bypassing. Reuses by other cores of a line that was
/// just fetched are counted as hits whatever the policy. Whole-tensor
/// bypassed requests are cold.
pub fn predict_counts(stats: &DataflowStats, policy: &PolicyConfig, m: &ModelMachine) -> Result<AnalyticalInput> {
    if stats.s_work == 0 {
        return Err(config_err("dataflow has no reusable working set"));
    }
    let reqs = stats.n_reuse_requests as f64;
    let lines = stats.n_reuse_lines as f64;
    let pinned = stats.n_pinned_requests as f64;
    let sharing = stats.sharing_factor.max(1.0);
    // Reuses by the other sharers of a line within one pass.
    let shared = (reqs - lines).max(0.0) * (1.0 - 1.0 / sharing);
    let reuses = (reqs - lines - shared).max(0.0);

    let usable = m.s_llc as f64 * (m.assoc as f64 - 1.0) / m.assoc as f64;
    let s_work = stats.s_work as f64;
    let fits = s_work <= usable;
    let kept_fraction = if fits {
        1.0
    } else {
        match (policy.replacement, policy.bypass_mode) {
            (_, BypassMode::Static) if policy.b_gear > 0 => {
                let tiers = (1u64 << m.b_bits) as f64;
                let allocated = (tiers - policy.b_gear as f64) / tiers;
                (usable / (s_work * allocated)).min(1.0) * allocated
            }
            (_, BypassMode::Dynamic | BypassMode::GqaDynamic) => usable.min(s_work) / s_work,
            (Replacement::At, _) => {
                let k = estimate_kept_set(stats.s_work, m.b_bits, m.s_llc, m.assoc)?;
                k.tiers as f64 / (1u64 << m.b_bits) as f64
            }
            (Replacement::Lru, _) => 0.0,
        }
    };
    let n_hit = shared + reuses * kept_fraction;
    let n_cf = reuses * (1.0 - kept_fraction);
    let n_cold = lines + pinned;
    let input = AnalyticalInput {
        n_hit,
        n_cold,
        n_cf,
        n_comp: stats.n_comp as f64,
        n_mem: n_hit + n_cold + n_cf,
        n_cold_dram: n_cold,
        n_cf_dram: n_cf,
        n_cores: m.n_cores,
        ipc_mem: m.ipc_mem,
        ipc_comp: m.ipc_comp,
        v_llc: m.v_llc,
        bw: m.bw,
    };
    input.validate()?;
    Ok(input)
}

/// One simulated run for coefficient fitting. Measured bandwidths are in
/// requests/cycle and may be absent when the run had no such phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitRun {
    pub input: AnalyticalInput,
    pub cycles: f64,
    pub bw_cold: Option<f64>,
    pub bw_cf: Option<f64>,
}

impl FitRun {
    pub fn compute_bound(&self) -> bool {
        let i = &self.input;
        i.n_comp / (i.n_cores * i.ipc_comp) >= (i.n_cold_dram + i.n_cf_dram) / i.bw
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// Final coefficients, refined against measured cycles.
    pub params: AnalyticalParams,
    /// Coefficients fitted to the measured bandwidths alone.
    pub bandwidth_params: AnalyticalParams,
    /// Predicted minus measured cycles, per run.
    pub residuals: Vec<f64>,
    pub r2: f64,
}

const THETA_FLOOR: f64 = 0.01;

/// Coefficients as a search vector: `[theta1, lambda, theta2, theta3]`.
type Coeffs = [f64; 4];

fn to_params(c: &Coeffs) -> AnalyticalParams {
    AnalyticalParams {
        theta1: c[0],
        lambda: c[1],
        theta2: c[2],
        theta3: c[3],
    }
}

fn feasible(c: &Coeffs) -> bool {
    (THETA_FLOOR..=1.0).contains(&c[0]) && c[1] > 0.0 && c[2] >= THETA_FLOOR && c[3] <= 1.0 && c[2] < c[3]
}

/// Coarse grid over the free coordinates (`theta1` only when `free_theta1`),
/// then a shrinking pattern search from the best of the grid and `start`.
fn search(start: Coeffs, free_theta1: bool, objective: impl Fn(&Coeffs) -> f64) -> Coeffs {
    let mut best = (objective(&start), start);
    let theta1s: Vec<f64> = if free_theta1 {
        (1..=20).map(|k| k as f64 / 20.0).collect()
    } else {
        vec![start[0]]
    };
    for &t1 in &theta1s {
        for li in 0..=24 {
            let lambda = 10f64.powf(-1.5 + 2.5 * li as f64 / 24.0);
            for a in 1..=20 {
                for b in (a + 1)..=20 {
                    let c = [t1, lambda, a as f64 / 20.0 - 0.025, b as f64 / 20.0];
                    let v = objective(&c);
                    if v < best.0 {
                        best = (v, c);
                    }
                }
            }
        }
    }
    let (mut val, mut c) = best;
    let mut step = [0.05f64, 0.25, 0.025, 0.025];
    if !free_theta1 {
        step[0] = 0.0;
    }
    for _ in 0..400 {
        let mut improved = false;
        for d in 0..4 {
            if step[d] == 0.0 {
                continue;
            }
            for sign in [-1.0, 1.0] {
                let mut n = c;
                if d == 1 {
                    n[1] *= 1.0 + sign * step[1];
                } else {
                    n[d] += sign * step[d];
                }
                if !feasible(&n) {
                    continue;
                }
                let v = objective(&n);
                if v < val {
                    (val, c) = (v, n);
                    improved = true;
                }
            }
        }
        if !improved {
            step.iter_mut().for_each(|s| *s *= 0.5);
            if step[2] < 1e-6 {
                break;
            }
        }
    }
    c
}

/// Squared cycle error of `runs` under `c`, relative to the total scale.
fn cycle_error(runs: &[FitRun], c: &Coeffs) -> f64 {
    let p = to_params(c);
    runs.iter()
        .map(|r| {
            let t = predict_time(&r.input, &p).map(|b| b.total).unwrap_or(f64::INFINITY);
            (t - r.cycles).powi(2)
        })
        .sum()
}

/// Fits the coefficients in two stages. The bandwidth stage fits `theta1`
/// to burst-phase bandwidth by least squares through the origin and
/// `(lambda, theta2, theta3)` to conflict-phase bandwidth (or to cycles when
/// fewer than two runs have a conflict phase). The cycle stage then refines
/// all four against measured cycles, starting from the bandwidth estimate,
/// since overlap of cold traffic with hits and compute makes the effective
/// burst bandwidth differ from the measured one.
pub fn fit_coefficients(runs: &[FitRun]) -> Result<FitResult> {
    if runs.len() < 4 {
        return Err(Error::Analysis(format!("need at least 4 runs to fit, got {}", runs.len())));
    }
    for r in runs {
        r.input.validate()?;
    }
    let n_compute = runs.iter().filter(|r| r.compute_bound()).count();
    if n_compute == 0 || n_compute == runs.len() {
        return Err(Error::Analysis(
            "all runs fall in one regime; include both memory- and compute-bound runs".into(),
        ));
    }

    let cold: Vec<_> = runs.iter().filter_map(|r| r.bw_cold.map(|m| (m, r.input.bw))).collect();
    if cold.is_empty() {
        return Err(Error::Analysis("no run has a measured burst-phase bandwidth".into()));
    }
    let num: f64 = cold.iter().map(|(m, bw)| m * bw).sum();
    let den: f64 = cold.iter().map(|(_, bw)| bw * bw).sum();
    let theta1 = (num / den).clamp(THETA_FLOOR, 1.0);

    let cf: Vec<_> = runs.iter().filter_map(|r| r.bw_cf.map(|m| (m, r.input))).collect();
    let start = [theta1, 1.0, 0.3, 0.9];
    let bw_stage = if cf.len() >= 2 {
        search(start, false, |c| {
            cf.iter()
                .map(|(m, i)| {
                    let p = to_params(c);
                    ((estimate_bandwidth(i, &p).1 - m) / i.bw).powi(2)
                })
                .sum()
        })
    } else {
        search(start, false, |c| cycle_error(runs, c))
    };
    let bandwidth_params = to_params(&bw_stage);
    bandwidth_params.validate()?;

    let params = to_params(&search(bw_stage, true, |c| cycle_error(runs, c)));
    params.validate()?;
    let mut pairs = Vec::with_capacity(runs.len());
    let mut residuals = Vec::with_capacity(runs.len());
    for r in runs {
        let t = predict_time(&r.input, &params)?.total;
        residuals.push(t - r.cycles);
        pairs.push((t, r.cycles));
    }
    let r2 = validate(&pairs).map(|v| v.r2).unwrap_or(f64::NAN);
    Ok(FitResult {
        params,
        bandwidth_params,
        residuals,
        r2,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    /// Coefficient of determination of predictions against simulation,
    /// `1 - SS_res / SS_tot`.
    pub r2: f64,
    /// Squared Pearson correlation.
    pub pearson_r2: f64,
    /// Kendall tau-b.
    pub tau: f64,
    pub n: usize,
}

/// Scores `(predicted, simulated)` pairs.
pub fn validate(pairs: &[(f64, f64)]) -> Result<Validation> {
    let n = pairs.len();
    if n < 2 {
        return Err(Error::Analysis("validation needs at least 2 pairs".into()));
    }
    let nf = n as f64;
    let mean_y = pairs.iter().map(|p| p.1).sum::<f64>() / nf;
    let mean_x = pairs.iter().map(|p| p.0).sum::<f64>() / nf;
    let ss_tot: f64 = pairs.iter().map(|p| (p.1 - mean_y).powi(2)).sum();
    let ss_x: f64 = pairs.iter().map(|p| (p.0 - mean_x).powi(2)).sum();
    if ss_tot == 0.0 || ss_x == 0.0 {
        return Err(Error::Analysis("zero variance in validation pairs".into()));
    }
    let ss_res: f64 = pairs.iter().map(|p| (p.1 - p.0).powi(2)).sum();
    let cov: f64 = pairs.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    Ok(Validation {
        r2: 1.0 - ss_res / ss_tot,
        pearson_r2: cov * cov / (ss_x * ss_tot),
        tau: kendall_tau_b(pairs),
        n,
    })
}

fn kendall_tau_b(pairs: &[(f64, f64)]) -> f64 {
    let (mut concordant, mut discordant, mut tie_x, mut tie_y) = (0i64, 0i64, 0i64, 0i64);
    for (i, a) in pairs.iter().enumerate() {
        for b in &pairs[i + 1..] {
            let dx = (a.0 - b.0).partial_cmp(&0.0).unwrap_or(std::cmp::Ordering::Equal);
            let dy = (a.1 - b.1).partial_cmp(&0.0).unwrap_or(std::cmp::Ordering::Equal);
            use std::cmp::Ordering::Equal;
            match (dx, dy) {
                (Equal, Equal) => {}
                (Equal, _) => tie_x += 1,
                (_, Equal) => tie_y += 1,
                _ if dx == dy => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let n0 = (concordant + discordant) as f64;
    let den = ((n0 + tie_x as f64) * (n0 + tie_y as f64)).sqrt();
    if den == 0.0 {
        0.0
    } else {
        (concordant - discordant) as f64 / den
    }
}
