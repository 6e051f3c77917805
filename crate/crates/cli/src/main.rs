//! Command-line front end: run, sweep, report, fit and validate.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use tilecache::analytic::AnalyticalParams;
use tilecache::harness::{self, Axis, AxesFile, CountSource, RunRecord};
use tilecache::{Error, Result, RunConfig};

#[derive(Parser)]
#[command(name = "tilecache", version, about = "Shared-LLC simulator for tiled accelerator dataflows")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one configuration.
    Run {
        config: PathBuf,
        /// Override a config value, e.g. `--set hardware.llc.total_size=262144`.
        #[arg(long = "set", value_name = "PATH=VALUE")]
        sets: Vec<String>,
        /// Write the result row as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write hit-rate and gear series CSVs into this directory.
        #[arg(long)]
        series: Option<PathBuf>,
    },
    /// Simulate the Cartesian product of the axes in an axes file.
    Sweep {
        config: PathBuf,
        axes: PathBuf,
        #[arg(long = "set", value_name = "PATH=VALUE")]
        sets: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads; defaults to all cores.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Run the built-in model validation sweep.
    ValidationSweep {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Speedups against a baseline policy and dynamic-vs-static gear gaps.
    Report {
        results: PathBuf,
        /// Policy label of the baseline, e.g. `lru`.
        #[arg(long, default_value = "lru")]
        baseline: String,
        /// Write plot-ready CSVs into this directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Fit the analytical model coefficients to a result table.
    Fit {
        results: PathBuf,
        /// Write the fitted coefficients as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score model predictions against a result table.
    Validate {
        results: PathBuf,
        /// Coefficients JSON written by `fit`.
        #[arg(long)]
        params: PathBuf,
        #[arg(long, value_enum, default_value_t = Counts::Measured)]
        counts: Counts,
        /// Write the predicted-vs-simulated scatter as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export the instruction trace of a configuration's workload.
    Trace {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Counts {
    Measured,
    Dataflow,
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        "config" => 2,
        "io" => 3,
        "simulation" => 4,
        "analysis" => 5,
        "parse" => 6,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(path: &Path, sets: &[String]) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_file(path)?;
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("--set expects PATH=VALUE, got {s:?}")))?;
        let value = serde_json::from_str(v).unwrap_or_else(|_| serde_json::Value::String(v.to_string()));
        cfg = cfg.with_override(k, &value)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn set_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn write_sweep(out: &Path, rows: &[harness::SweepRow]) -> Result<()> {
    let recs = harness::records(rows);
    harness::write_records_file(out, &recs)?;
    let failed = recs.iter().filter(|r| !r.is_ok()).count();
    println!("{} rows written to {} ({failed} failed)", recs.len(), out.display());
    Ok(())
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run {
            config,
            sets,
            out,
            series,
        } => {
            let cfg = load_config(&config, &sets)?;
            let r = harness::run_single(&cfg)?;
            let c = &r.counters;
            println!("label        {}", cfg.display_label());
            println!("policy       {}", r.policy);
            println!("cycles       {}", r.cycles);
            println!("requests     {}", r.n_mem);
            println!("hit rate     {:.4}", r.hit_rate());
            println!("reuse hits   {:.4}", r.reuse_hit_rate());
            println!(
                "classes      hit {} mshr {} cold {} conflict {} bypassed {}",
                c.hit,
                c.mshr_hit,
                c.cold_miss,
                c.conflict_miss,
                c.bypassed()
            );
            println!("dram         reads {} writes {}", r.dram.reads, r.dram.writes);
            if let Some(path) = out {
                harness::write_records_file(&path, &[RunRecord::from_result(0, "", &cfg, &r)])?;
            }
            if let Some(dir) = series {
                std::fs::create_dir_all(&dir)?;
                let runs = [(&cfg, &r)];
                harness::write_hit_rate_series(std::fs::File::create(dir.join("hit_rate.csv"))?, &runs)?;
                harness::write_gear_series(std::fs::File::create(dir.join("gear.csv"))?, &runs)?;
            }
            Ok(())
        }
        Command::Sweep {
            config,
            axes,
            sets,
            out,
            threads,
        } => {
            set_threads(threads)?;
            let cfg = load_config(&config, &sets)?;
            let axes: Vec<Axis> = AxesFile::from_file(&axes)?.axis;
            let rows = harness::run_sweep(&cfg, &axes)?;
            write_sweep(&out, &rows)
        }
        Command::ValidationSweep { out, threads } => {
            set_threads(threads)?;
            let rows = harness::run_configs(harness::recipes::validation());
            write_sweep(&out, &rows)
        }
        Command::Report {
            results,
            baseline,
            out_dir,
        } => {
            let recs = harness::read_records_file(&results)?;
            let rep = harness::report(&recs, &baseline)?;
            let mut so = std::io::stdout().lock();
            writeln!(so, "{:<6} {:<28} {:>12} {:>9}  setting", "group", "policy", "cycles", "speedup")?;
            for s in &rep.speedups {
                writeln!(
                    so,
                    "{:<6} {:<28} {:>12} {:>9.4}  {}",
                    s.group, s.policy, s.cycles, s.speedup, s.setting
                )?;
            }
            for g in &rep.gear_gaps {
                writeln!(
                    so,
                    "gear gap: group {} {} {} vs best static {} {} ({:+.2}%)",
                    g.group,
                    g.policy,
                    g.cycles,
                    g.best_static,
                    g.best_static_cycles,
                    100.0 * g.gap
                )?;
            }
            if let Some(dir) = out_dir {
                harness::write_report(&dir, &rep)?;
            }
            Ok(())
        }
        Command::Fit { results, out } => {
            let recs = harness::read_records_file(&results)?;
            let fit = harness::fit_records(&recs)?;
            let p = fit.params;
            println!(
                "theta1 {:.6} theta2 {:.6} theta3 {:.6} lambda {:.6}",
                p.theta1, p.theta2, p.theta3, p.lambda
            );
            println!("r2 {:.6}", fit.r2);
            if let Some(path) = out {
                let json = serde_json::to_string_pretty(&p).map_err(|e| Error::Parse(e.to_string()))?;
                std::fs::write(path, json)?;
            }
            Ok(())
        }
        Command::Validate {
            results,
            params,
            counts,
            out,
        } => {
            let recs = harness::read_records_file(&results)?;
            let text = std::fs::read_to_string(&params)?;
            let p: AnalyticalParams = serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
            let source = match counts {
                Counts::Measured => CountSource::Measured,
                Counts::Dataflow => CountSource::Dataflow,
            };
            let (v, points) = harness::validate_records(&recs, &p, source)?;
            println!("n {} r2 {:.6} pearson_r2 {:.6} kendall_tau {:.6}", v.n, v.r2, v.pearson_r2, v.tau);
            if let Some(path) = out {
                harness::write_scatter(std::fs::File::create(path)?, &points)?;
            }
            Ok(())
        }
        Command::Trace { config, out } => {
            let cfg = load_config(&config, &[])?;
            let text = cfg.build_program()?.export_trace();
            match out {
                Some(path) => std::fs::write(path, text)?,
                None => std::io::stdout().lock().write_all(text.as_bytes())?,
            }
            Ok(())
        }
    }
}
