//! `interpolant-lab` command line.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on configuration or
//! usage errors.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use serde::Serialize;

use crate::batch::fmt_f64;
use crate::config::{
    load_file, resolve_threads, ConfigError, DriftCheckArgs, DriftCheckParams, FileCommon, GmmArgs, GmmParams, GrfArgs,
    GrfParams, KlArgs, KlParams, LipArgs, LipParams, RunConfig, ScheduleArgs, ScheduleParams, SdeArgs, SdeParams,
};
use crate::diagnostics::{avg_lip2, g_function_for_optimizer, kinetic_energy};
use crate::drift::{
    bimodal_drift, fd_jacobian, gaussian_drift, gaussian_score, general_gmm_drift, optimal_epsilon, transfer_drift,
    DriftOracle,
};
use crate::dynamics::{initial_noise, integrate_sde, IntegratorConfig, Method};
use crate::error::Error;
use crate::experiments::{
    gmm_mode_weight_bench, gmm_seed_summary, grf_spectrum_bench, kl_invariance_bench, max_pairwise_relative_spread,
    write_config_json, write_gmm_results, write_gmm_summary, write_grf_results, write_kl_results, GmmBenchConfig,
    GrfBenchConfig, KlBenchConfig,
};
use crate::rng::{stream, tag};
use crate::schedule::{solve_optimal_schedule, Schedule};
use crate::targets::{BimodalGmmTarget, GaussianTarget, GeneralGmmTarget, Target};

#[derive(Debug, Parser)]
#[command(
    name = "interpolant-lab",
    version,
    about = "Interpolation schedules, drifts, samplers and benches for stochastic interpolants"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Default, Args)]
struct Common {
    /// Random seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads [default: all cores]
    #[arg(long, env = "INTERPOLANT_LAB_THREADS", hide_env_values = true)]
    threads: Option<usize>,
    /// Output directory [default: out/<subcommand>]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Flat TOML file with values for any of the keys below
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Tabulate t, alpha, beta, alpha_dot, beta_dot and epsilon for a schedule
    Schedule {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: ScheduleArgs,
    },
    /// Audit the transfer formula and drift Jacobians against closed forms
    DriftCheck {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: DriftCheckArgs,
    },
    /// Averaged squared Lipschitz constant and kinetic energy of a drift
    Lip {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: LipArgs,
    },
    /// KL* of a perturbed score under several schedules
    Kl {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: KlArgs,
    },
    /// Few-step RK4 mode weights on a high-dimensional bimodal mixture
    GmmBench {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: GmmArgs,
    },
    /// Energy spectra of generated Gaussian random fields across resolutions
    GrfBench {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: GrfArgs,
    },
    /// Terminal variance of the Euler-Maruyama sampler with optimal diffusion
    SdeCheck {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: SdeArgs,
    },
}

enum Failure {
    Config(ConfigError),
    Runtime(Error),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(Error::Io(e))
    }
}

type Outcome = std::result::Result<(), Failure>;

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(Failure::Config(e)) => {
            eprintln!("configuration error: {e}");
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Shared keys after resolution.
struct Resolved {
    seed: u64,
    threads: usize,
    out: PathBuf,
}

fn resolve<A>(name: &str, common: &Common, keys: &[&str]) -> std::result::Result<(Resolved, A), ConfigError>
where
    A: Default + for<'de> serde::Deserialize<'de>,
{
    let (file_common, file_args) = match &common.config {
        Some(path) => load_file::<A>(path, keys)?,
        None => (FileCommon::default(), A::default()),
    };
    let threads = resolve_threads(common.threads, file_common.threads)?
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    Ok((
        Resolved {
            seed: common.seed.or(file_common.seed).unwrap_or(0),
            threads,
            out: common
                .out
                .clone()
                .or(file_common.out)
                .unwrap_or_else(|| Path::new("out").join(name)),
        },
        file_args,
    ))
}

fn in_pool<F: FnOnce() -> Outcome + Send>(threads: usize, f: F) -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Contract(format!("cannot start worker pool: {e}")))?;
    pool.install(f)
}

fn write_run_config<P: Serialize>(name: &str, r: &Resolved, params: &P) -> Outcome {
    let rc = RunConfig {
        subcommand: name.to_string(),
        seed: r.seed,
        threads: r.threads,
        out: r.out.clone(),
        params,
    };
    write_config_json(&r.out, &rc)?;
    Ok(())
}

fn create(dir: &Path, name: &str) -> std::result::Result<BufWriter<File>, Failure> {
    fs::create_dir_all(dir)?;
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

macro_rules! subcommand {
    ($name:literal, $common:expr, $args:expr, $argty:ty, $validate:ident, $body:expr) => {{
        let (r, file) = resolve::<$argty>($name, &$common, <$argty>::KEYS)?;
        let params = $args.resolve(&file);
        params.$validate()?;
        write_run_config($name, &r, &params)?;
        let threads = r.threads;
        in_pool(threads, || $body(&r, &params))
    }};
}

fn dispatch(command: Command) -> Outcome {
    match command {
        Command::Schedule { common, args } => {
            subcommand!("schedule", common, args, ScheduleArgs, validate, run_schedule)
        }
        Command::DriftCheck { common, args } => {
            subcommand!("drift-check", common, args, DriftCheckArgs, validate, run_drift_check)
        }
        Command::Lip { common, args } => subcommand!("lip", common, args, LipArgs, validate, run_lip),
        Command::Kl { common, args } => subcommand!("kl", common, args, KlArgs, validate, run_kl),
        Command::GmmBench { common, args } => subcommand!("gmm-bench", common, args, GmmArgs, validate, run_gmm),
        Command::GrfBench { common, args } => subcommand!("grf-bench", common, args, GrfArgs, validate, run_grf),
        Command::SdeCheck { common, args } => subcommand!("sde-check", common, args, SdeArgs, validate, run_sde),
    }
}

fn run_schedule(r: &Resolved, p: &ScheduleParams) -> Outcome {
    let schedule = match p.kind.as_str() {
        "linear" => Schedule::linear(),
        "trig" => Schedule::trig(),
        "trig-power" => Schedule::trig_power(p.power)?,
        "designed-gaussian" => Schedule::designed_gaussian(p.lambda_star)?,
        "approx-minlip-gmm" => Schedule::approx_min_lip_gmm(p.scale_m)?,
        "dilated" => Schedule::dilated(p.kappa, p.scale_m)?,
        _ => {
            let target = if p.g_target == "bimodal" {
                Target::Bimodal(BimodalGmmTarget::scalar(p.bimodal_m, p.p)?)
            } else {
                Target::Gaussian(GaussianTarget::scalar(p.variance)?)
            };
            let g = g_function_for_optimizer(&target, None, p.k, p.mc, r.seed)?;
            let table = solve_optimal_schedule(g.as_fn(), p.k, p.optimizer_grid, g.weight_mode())?;
            let mut w = create(&r.out, "table.csv")?;
            table.write_csv(&mut w)?;
            w.flush()?;
            Schedule::tabulated(table)
        }
    };
    let mut w = create(&r.out, "schedule.csv")?;
    writeln!(w, "t,alpha,beta,alpha_dot,beta_dot,epsilon")?;
    for i in 0..p.grid {
        let t = i as f64 / (p.grid - 1) as f64;
        let st = schedule.eval(t)?;
        writeln!(
            w,
            "{},{},{},{},{},{}",
            fmt_f64(t),
            fmt_f64(st.alpha),
            fmt_f64(st.beta),
            fmt_f64(st.alpha_dot),
            fmt_f64(st.beta_dot),
            fmt_f64(st.optimal_epsilon())
        )?;
    }
    w.flush()?;
    println!(
        "{}: {} rows -> {}",
        schedule.name(),
        p.grid,
        r.out.join("schedule.csv").display()
    );
    Ok(())
}

struct Audit {
    name: &'static str,
    max_abs_error: f64,
    tolerance: f64,
}

/// `t` uniform in `[1e-3, 1 - 1e-3]`, `x` uniform in `[-3 sigma_t, 3 sigma_t]`.
fn probes(seed: u64, id: u64, count: usize, sigma: impl Fn(f64) -> f64) -> Vec<(f64, f64)> {
    let mut rng = stream(seed, &[tag::PROBE, id]);
    (0..count)
        .map(|_| {
            let t = 1e-3 + (1.0 - 2e-3) * rng.random::<f64>();
            let s = sigma(t);
            (t, s * (6.0 * rng.random::<f64>() - 3.0))
        })
        .collect()
}

fn max_scalar_error(
    a: &dyn DriftOracle,
    b: impl Fn(f64, f64) -> crate::Result<f64>,
    pts: &[(f64, f64)],
) -> crate::Result<f64> {
    let mut worst = 0.0_f64;
    let mut out = [0.0];
    for &(t, x) in pts {
        a.eval(t, &[x], &mut out)?;
        worst = worst.max((out[0] - b(t, x)?).abs());
    }
    Ok(worst)
}

fn run_drift_check(r: &Resolved, p: &DriftCheckParams) -> Outcome {
    let linear = Schedule::linear();
    let mut audits = Vec::new();

    let g = GaussianTarget::scalar(p.m)?;
    let designed = Schedule::designed_gaussian(p.m)?;
    let transfer = transfer_drift(Arc::new(gaussian_drift(&linear, &g)), &designed)?;
    let pts = probes(r.seed, 0, p.points, |t| {
        let st = designed.eval(t).expect("t in range");
        (st.alpha * st.alpha + st.beta * st.beta * p.m).sqrt()
    });
    let slope = 0.5 * p.m.ln();
    audits.push(Audit {
        name: "gaussian-transfer",
        max_abs_error: max_scalar_error(&transfer, |_, x| Ok(slope * x), &pts)?,
        tolerance: 1e-9,
    });

    let bt = BimodalGmmTarget::scalar(p.bimodal_m, p.p)?;
    let trig = Schedule::trig();
    let transfer = transfer_drift(
        Arc::new(general_gmm_drift(&linear, &GeneralGmmTarget::from_bimodal(&bt))),
        &trig,
    )?;
    let exact = bimodal_drift(&trig, &bt)?;
    let pts = probes(r.seed, 1, p.points, |t| {
        let st = trig.eval(t).expect("t in range");
        (st.alpha * st.alpha + st.beta * st.beta * (1.0 + p.bimodal_m * p.bimodal_m)).sqrt()
    });
    audits.push(Audit {
        name: "bimodal-transfer",
        max_abs_error: max_scalar_error(
            &transfer,
            |t, x| {
                let mut o = [0.0];
                exact.eval(t, &[x], &mut o)?;
                Ok(o[0])
            },
            &pts,
        )?,
        tolerance: 1e-8,
    });

    let multi = GeneralGmmTarget::from_bimodal(&BimodalGmmTarget::preset(p.d, p.p)?);
    let gm = general_gmm_drift(&trig, &multi);
    let mut rng = stream(r.seed, &[tag::PROBE, 2]);
    let mut worst = 0.0_f64;
    for _ in 0..p.points.min(50) {
        let t = 0.05 + 0.9 * rng.random::<f64>();
        let x: Vec<f64> = (0..p.d).map(|_| 4.0 * rng.random::<f64>() - 2.0).collect();
        let exact = gm
            .jacobian(t, &x)
            .ok_or_else(|| Error::Contract("mixture drift lacks a Jacobian".into()))??;
        let fd = fd_jacobian(&gm, t, &x)?;
        worst = worst.max((exact - fd).abs().max());
    }
    audits.push(Audit {
        name: "gmm-jacobian-vs-fd",
        max_abs_error: worst,
        tolerance: 1e-5,
    });

    let ls = p.lambda_star;
    let gd = GaussianTarget::diagonal(vec![1.0, ls.sqrt(), ls])?;
    let drift = gaussian_drift(&Schedule::designed_gaussian(ls)?, &gd);
    let expect = 0.5 * ls.ln().abs();
    let mut worst = 0.0_f64;
    for i in 0..p.points {
        let t = (i as f64 + 0.5) / p.points as f64;
        let x = [0.0; 3];
        let n = drift
            .jacobian_norm(t, &x)
            .ok_or_else(|| Error::Contract("Gaussian drift lacks a Jacobian norm".into()))??;
        worst = worst.max((n - expect).abs());
    }
    audits.push(Audit {
        name: "designed-lipschitz",
        max_abs_error: worst,
        tolerance: 1e-10,
    });

    let mut w = create(&r.out, "results.csv")?;
    writeln!(w, "check,max_abs_error,tolerance,pass")?;
    let mut failed = Vec::new();
    for a in &audits {
        let pass = a.max_abs_error <= a.tolerance;
        writeln!(
            w,
            "{},{},{},{}",
            a.name,
            fmt_f64(a.max_abs_error),
            fmt_f64(a.tolerance),
            pass
        )?;
        println!(
            "{:<20} max |error| = {:.3e} (tolerance {:.0e}) {}",
            a.name,
            a.max_abs_error,
            a.tolerance,
            if pass { "ok" } else { "FAILED" }
        );
        if !pass {
            failed.push(a.name);
        }
    }
    w.flush()?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Oracle(format!("audits failed: {}", failed.join(", "))).into())
    }
}

fn run_lip(r: &Resolved, p: &LipParams) -> Outcome {
    let schedule = p.schedule.build()?;
    let (drift, target): (Box<dyn DriftOracle>, Target) = if p.target == "bimodal" {
        let bt = BimodalGmmTarget::new(vec![p.m / (p.d as f64).sqrt(); p.d], p.p)?;
        (Box::new(bimodal_drift(&schedule, &bt)?), Target::Bimodal(bt))
    } else {
        let g = GaussianTarget::diagonal(vec![p.m; p.d])?;
        (Box::new(gaussian_drift(&schedule, &g)), Target::Gaussian(g))
    };
    let lip = avg_lip2(drift.as_ref(), &schedule, &target, p.t_grid, p.mc, r.seed)?;
    let ke = kinetic_energy(drift.as_ref(), &schedule, &target, p.t_grid, p.mc, r.seed)?;
    let mut w = create(&r.out, "lip.csv")?;
    lip.write_csv(&mut w)?;
    writeln!(w, "kinetic_energy,{}", fmt_f64(ke.value))?;
    writeln!(w, "kinetic_std_error,{}", fmt_f64(ke.std_error))?;
    w.flush()?;
    println!(
        "{}: A2 = {:.6} +- {:.2e}, sup |grad b| = {:.6}, kinetic energy = {:.6} +- {:.2e}",
        schedule.name(),
        lip.a2_estimate,
        lip.std_error,
        lip.sup_lipschitz,
        ke.value,
        ke.std_error
    );
    Ok(())
}

fn run_kl(r: &Resolved, p: &KlParams) -> Outcome {
    let cfg = KlBenchConfig {
        m: p.m,
        delta: p.delta,
        schedules: p.schedules.clone(),
        quad_nodes: p.quad_nodes,
        mc_per_node: p.mc_per_node,
        seed: r.seed,
    };
    let rows = kl_invariance_bench(&cfg)?;
    write_kl_results(&r.out, &rows)?;
    for row in &rows {
        println!(
            "{:<28} KL* = {:.6} +- {:.2e} (reference {:.6})",
            row.schedule,
            row.estimate.value,
            row.estimate.error_budget(),
            row.reference
        );
    }
    let vals: Vec<f64> = rows.iter().map(|r| r.estimate.value).collect();
    println!(
        "max pairwise relative spread: {:.3e}",
        max_pairwise_relative_spread(&vals)
    );
    Ok(())
}

fn gmm_config(r: &Resolved, p: &GmmParams) -> GmmBenchConfig {
    GmmBenchConfig {
        d: p.d,
        p: p.p,
        n: p.n,
        steps: p.steps.clone(),
        schedules: p.schedules.clone(),
        seed: r.seed,
        t_min: p.t_min,
        t_max: p.t_max,
    }
}

fn run_gmm(r: &Resolved, p: &GmmParams) -> Outcome {
    let cfg = gmm_config(r, p);
    let results = gmm_mode_weight_bench(&cfg)?;
    write_gmm_results(&r.out, &results)?;
    for m in &results {
        let flag = if m.is_separated() { "" } else { " (separation < 1)" };
        println!(
            "{:<14} {} steps: minor weight {:.3}{flag}",
            m.schedule, m.rk4_steps, m.recovered_minor_weight
        );
    }
    if !p.seeds.is_empty() {
        let summary = gmm_seed_summary(&cfg, &p.seeds)?;
        write_gmm_summary(&r.out, &summary)?;
        for s in &summary {
            println!(
                "{:<14} {} steps: {:.3} +- {:.3} over {} seeds",
                s.schedule,
                s.rk4_steps,
                s.mean,
                s.std,
                s.values.len()
            );
        }
    }
    Ok(())
}

fn run_grf(r: &Resolved, p: &GrfParams) -> Outcome {
    let cfg = GrfBenchConfig {
        resolutions: p.resolutions.clone(),
        steps: p.steps.clone(),
        schedules: p.schedules.clone(),
        n_samples: p.n_samples,
        seed: r.seed,
        t_min: p.t_min,
        t_max: p.t_max,
        max_bin: p.max_bin,
    };
    let result = grf_spectrum_bench(&cfg)?;
    write_grf_results(&r.out, &result)?;
    for run in &result.runs {
        println!(
            "N = {:<4} {:<9} {:>3} steps: mean relative spectrum error {:.4}",
            run.resolution, run.schedule, run.steps, run.mean_relative_error
        );
    }
    Ok(())
}

fn run_sde(r: &Resolved, p: &SdeParams) -> Outcome {
    let schedule = p.schedule.build()?;
    let g = GaussianTarget::scalar(p.m)?;
    let target = Target::Gaussian(g.clone());
    let drift = gaussian_drift(&schedule, &g);
    let score = gaussian_score(&schedule, &g);
    let eps = optimal_epsilon(&schedule);
    let x0 = initial_noise(&schedule, &target, p.n, r.seed, p.t_min)?;
    let ic = IntegratorConfig {
        method: Method::EulerMaruyama,
        steps: p.steps,
        t_min: p.t_min,
        t_max: p.t_max,
        store_trajectory: false,
    };
    let out = integrate_sde(&drift, &score, &eps, &x0, &ic, r.seed)?;
    let v = out.batch.variance()[0];
    let st = schedule.eval(p.t_max)?;
    let marginal = st.alpha * st.alpha + st.beta * st.beta * p.m;
    let se = v * (2.0 / (p.n as f64 - 1.0)).sqrt();
    let mut w = create(&r.out, "results.csv")?;
    writeln!(w, "key,value")?;
    writeln!(w, "terminal_variance,{}", fmt_f64(v))?;
    writeln!(w, "target_variance,{}", fmt_f64(p.m))?;
    writeln!(w, "marginal_variance_at_t_max,{}", fmt_f64(marginal))?;
    writeln!(w, "abs_error_vs_target,{}", fmt_f64((v - p.m).abs()))?;
    writeln!(w, "mc_std_error,{}", fmt_f64(se))?;
    w.flush()?;
    println!(
        "terminal variance {:.5} (target {}, marginal at t_max {:.5}, MC std error {:.2e})",
        v, p.m, marginal, se
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(args: &[&str]) -> Vec<String> {
        std::iter::once("interpolant-lab")
            .chain(args.iter().copied())
            .map(String::from)
            .collect()
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(argv(&["no-such-command"])), 2);
        assert_eq!(run(argv(&["schedule", "--grid", "abc"])), 2);
    }

    #[test]
    fn help_exits_0() {
        assert_eq!(run(argv(&["--help"])), 0);
    }

    #[test]
    fn invalid_value_exits_2() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        assert_eq!(run(argv(&["schedule", "--kind", "cosine", "--out", out])), 2);
        assert_eq!(run(argv(&["gmm-bench", "--p", "2", "--out", out])), 2);
    }

    #[test]
    fn schedule_table_boundaries() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        assert_eq!(
            run(argv(&[
                "schedule",
                "--kind",
                "designed-gaussian",
                "--lambda-star",
                "0.01",
                "--grid",
                "11",
                "--out",
                out
            ])),
            0
        );
        let csv = fs::read_to_string(dir.path().join("schedule.csv")).unwrap();
        let rows: Vec<Vec<f64>> = csv
            .lines()
            .skip(1)
            .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
            .collect();
        assert_eq!(rows.len(), 11);
        assert_eq!((rows[0][1], rows[0][2]), (1.0, 0.0));
        assert_eq!((rows[10][1], rows[10][2]), (0.0, 1.0));
        assert!(dir.path().join("config.json").exists());
    }
}
