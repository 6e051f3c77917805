//! End-to-end runs through the simulator and the sweep harness.

use tilecache::harness::{self, recipes, recipes::KB, Axis, RunRecord};
use tilecache::policy::{BypassMode, PolicyConfig, Replacement};
use tilecache::tracegen::GroupAlloc;
use tilecache::{Error, RunConfig};

fn small(kb: u64, policy: PolicyConfig) -> RunConfig {
    let mut c = recipes::desk_base();
    c.workload = recipes::attention("desk-temporal", 256, 1, GroupAlloc::Temporal);
    c.hardware.llc.total_size = kb * KB;
    c.policy = policy;
    c
}

fn with(replacement: Replacement, dbp: bool, bypass_mode: BypassMode, b_gear: u32) -> PolicyConfig {
    PolicyConfig {
        replacement,
        dbp,
        bypass_mode,
        b_gear,
        ..Default::default()
    }
}

#[test]
fn identical_configs_give_identical_results() {
    let c = small(64, with(Replacement::At, true, BypassMode::Dynamic, 0));
    let a = harness::run_single(&c).unwrap();
    let b = harness::run_single(&c).unwrap();
    assert_eq!(a, b);
}

#[test]
fn outcome_classes_partition_every_request() {
    for policy in [
        with(Replacement::Lru, false, BypassMode::Off, 0),
        with(Replacement::At, true, BypassMode::Dynamic, 0),
        with(Replacement::At, false, BypassMode::Static, 8),
    ] {
        let r = harness::run_single(&small(64, policy)).unwrap();
        let c = &r.counters;
        assert_eq!(r.n_mem, c.hit + c.mshr_hit + c.cold_miss + c.conflict_miss + c.bypassed());
        assert_eq!(r.dram.reads, c.dram_reads());
        r.check_conservation().unwrap();
    }
}

#[test]
fn full_bypass_allocates_nothing() {
    let r = harness::run_single(&small(64, with(Replacement::Lru, false, BypassMode::Static, 8))).unwrap();
    assert_eq!(r.counters.hit, 0);
    assert_eq!(r.counters.evictions, 0);
}

#[test]
fn at_matches_lru_when_the_working_set_fits() {
    let lru = harness::run_single(&small(1024, with(Replacement::Lru, false, BypassMode::Off, 0))).unwrap();
    let at = harness::run_single(&small(1024, with(Replacement::At, false, BypassMode::Off, 0))).unwrap();
    assert!(lru.stats.s_work <= 1024 * KB);
    let d = (at.cycles as f64 / lru.cycles as f64 - 1.0).abs();
    assert!(d <= 0.02, "at {} lru {}", at.cycles, lru.cycles);
}

#[test]
fn symmetric_cores_commit_equally() {
    let r = harness::run_single(&small(64, with(Replacement::Lru, false, BypassMode::Off, 0))).unwrap();
    assert!(r.committed.windows(2).all(|w| w[0] == w[1]), "{:?}", r.committed);
}

#[test]
fn batches_retire_through_the_tmu() {
    let mut c = small(64, with(Replacement::At, true, BypassMode::Off, 0));
    c.workload = recipes::attention("desk-temporal", 256, 2, GroupAlloc::Temporal);
    let program = c.build_program().unwrap();
    assert_eq!(program.phases.len(), 2);
    let r = harness::run_single(&c).unwrap();
    assert!(r.tmu.retirements > 0);
    assert!(r.counters.dbp_evictions > 0);
}

#[test]
fn invalid_config_fails_before_simulating() {
    let mut c = small(64, with(Replacement::At, false, BypassMode::Static, 0));
    c.policy.b_gear = 99;
    assert!(matches!(harness::run_single(&c), Err(Error::Config(_))));
    let mut c = small(64, PolicyConfig::default());
    c.hardware.llc.total_size = 1000;
    assert!(matches!(harness::run_single(&c), Err(Error::Config(_))));
}

#[test]
fn single_point_sweep_equals_run_single() {
    let base = small(64, PolicyConfig::default());
    let rows = harness::run_sweep(&base, &[Axis::new("hardware.llc.total_size", [64 * KB])]).unwrap();
    assert_eq!(rows.len(), 1);
    let direct = harness::run_single(&base).unwrap();
    assert_eq!(rows[0].outcome.as_ref().unwrap(), &direct);
}

#[test]
fn sweep_rows_reproduce_from_their_config_echo() {
    let base = small(64, PolicyConfig::default());
    let axes = [
        recipes::sizes(&[32, 64, 128]),
        Axis::new(
            "policy",
            [
                recipes::policy(Replacement::Lru, false, BypassMode::Off, 0),
                recipes::policy(Replacement::At, false, BypassMode::Off, 0),
                recipes::policy(Replacement::At, false, BypassMode::Dynamic, 0),
                recipes::policy(Replacement::At, true, BypassMode::Dynamic, 0),
            ],
        ),
    ];
    let rows = harness::run_sweep(&base, &axes).unwrap();
    assert_eq!(rows.len(), 12);
    let recs = harness::records(&rows);
    let mut csv = Vec::new();
    harness::write_records(&mut csv, &recs).unwrap();
    let back = harness::read_records(csv.as_slice()).unwrap();
    assert_eq!(back.len(), 12);
    for rec in back.iter().step_by(5) {
        let rerun = harness::run_single(&rec.config().unwrap()).unwrap();
        assert_eq!(Some(rerun.cycles), rec.cycles);
    }
    let rep = harness::report(&back, "lru").unwrap();
    for s in rep.speedups.iter().filter(|s| s.policy == "lru") {
        assert_eq!(s.speedup, 1.0);
    }
}

#[test]
fn failed_points_are_recorded_and_the_sweep_continues() {
    let base = small(64, PolicyConfig::default());
    let rows = harness::run_sweep(&base, &[Axis::new("hardware.llc.total_size", [64 * KB, 1000])]).unwrap();
    let recs: Vec<RunRecord> = harness::records(&rows);
    assert!(recs[0].is_ok());
    assert!(!recs[1].is_ok());
    assert_eq!(recs[1].error_category.as_deref(), Some("config"));
}

#[test]
fn spatial_workload_shares_kv_between_paired_cores() {
    let mut c = small(64, with(Replacement::At, false, BypassMode::GqaDynamic, 0));
    c.workload = recipes::attention("desk-spatial", 256, 1, GroupAlloc::Spatial);
    let program = c.build_program().unwrap();
    assert!(program.sharing_groups.iter().all(|g| g.len() == 2));
    let r = harness::run_single(&c).unwrap();
    assert!(r.counters.mshr_hit + r.counters.hit > 0);
}
