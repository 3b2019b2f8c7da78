//! Run configuration for the command-line front end.
//!
//! Each subcommand owns a set of keys. A key's value comes from its flag if
//! given, else from the `--config` file, else from the built-in default.
//! Config files are flat TOML: `key = value` pairs using the flag names
//! (`lambda-star = 0.01`, `steps = [2, 3, 4]`), plus the shared keys `seed`,
//! `threads` and `out`.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::experiments::{GmmSchedule, GrfSchedule};
use crate::schedule::ScheduleSpec;

/// Environment fallback for `--threads`.
pub const THREADS_ENV: &str = "INTERPOLANT_LAB_THREADS";

/// A configuration problem, tied to the key that caused it.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(key: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError {
            key: key.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "key '{}': {}", self.key, self.message)
    }
}

impl std::error::Error for ConfigError {}

fn check(ok: bool, key: &str, message: impl Into<String>) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(ConfigError::new(key, message))
    }
}

fn check_unit_interval(t_min: f64, t_max: f64) -> Result<(), ConfigError> {
    check(
        t_min > 0.0 && t_min < 1.0,
        "t-min",
        format!("must lie in (0, 1), got {t_min}"),
    )?;
    check(
        t_max > t_min && t_max < 1.0,
        "t-max",
        format!("must lie in (t-min, 1), got {t_max}"),
    )
}

fn check_probability(p: f64) -> Result<(), ConfigError> {
    check(p > 0.0 && p < 1.0, "p", format!("must lie in (0, 1), got {p}"))
}

fn check_positive(v: f64, key: &str) -> Result<(), ConfigError> {
    check(
        v > 0.0 && v.is_finite(),
        key,
        format!("must be positive and finite, got {v}"),
    )
}

fn check_nonempty<T>(v: &[T], key: &str) -> Result<(), ConfigError> {
    check(!v.is_empty(), key, "must not be empty")
}

macro_rules! params {
    (
        $(#[$meta:meta])*
        $args:ident => $resolved:ident {
            $( $key:ident : $ty:ty = $default:expr, $shown:literal, $help:literal; )*
        }
    ) => {
        #[derive(Debug, Clone, Default, clap::Args, Deserialize)]
        #[serde(deny_unknown_fields, rename_all = "kebab-case")]
        pub struct $args {
            $(
                #[arg(long, value_delimiter = ',', help = concat!($help, " [default: ", $shown, "]"))]
                pub $key: Option<$ty>,
            )*
        }

        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Serialize)]
        #[serde(rename_all = "kebab-case")]
        pub struct $resolved {
            $( pub $key: $ty, )*
        }

        impl Default for $resolved {
            fn default() -> Self {
                $resolved { $( $key: $default, )* }
            }
        }

        impl $args {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($key)),*];

            /// Flags from `self` override `file`, which overrides the defaults.
            pub fn resolve(&self, file: &$args) -> $resolved {
                let d = $resolved::default();
                $resolved {
                    $( $key: self.$key.clone().or_else(|| file.$key.clone()).unwrap_or(d.$key), )*
                }
            }
        }
    };
}

params! {
    /// Keys of `schedule`.
    ScheduleArgs => ScheduleParams {
        kind: String = "trig".into(), "trig",
            "Schedule kind: linear, trig, trig-power, designed-gaussian, approx-minlip-gmm, dilated or optimized";
        lambda_star: f64 = 0.01, "0.01", "Eigenvalue ratio of the designed Gaussian schedule";
        scale_m: f64 = 5.0, "5", "Scale M of the approx-minlip-gmm and dilated schedules";
        kappa: f64 = 1.0, "1", "Dilation kappa (0 < kappa < M)";
        power: f64 = 2.0, "2", "Exponent p of trig-power (beta = t^p)";
        grid: usize = 101, "101", "Number of output rows on a uniform t grid";
        g_target: String = "gaussian".into(), "gaussian", "Target whose Lipschitz profile is optimized: gaussian or bimodal";
        variance: f64 = 0.01, "0.01", "Variance of the 1D Gaussian target (optimized kind)";
        bimodal_m: f64 = 5.0, "5", "Mode location M of the 1D bimodal target (optimized kind)";
        p: f64 = 0.3, "0.3", "Weight of the +M mode (optimized kind)";
        k: u32 = 1, "1", "Lipschitz exponent k of the optimized objective";
        optimizer_grid: usize = 512, "512", "Output nodes of the optimized table";
        mc: usize = 20_000, "20000", "Monte-Carlo samples per G evaluation (bimodal target)";
    }
}

params! {
    /// Keys of `drift-check`.
    DriftCheckArgs => DriftCheckParams {
        m: f64 = 4.0, "4", "Variance of the 1D Gaussian target";
        bimodal_m: f64 = 3.0, "3", "Mode location of the 1D bimodal target";
        p: f64 = 0.3, "0.3", "Weight of the +M mode";
        d: usize = 4, "4", "Dimension of the Jacobian audit";
        lambda_star: f64 = 1e-4, "1e-4", "Smallest eigenvalue in the designed-Lipschitz audit";
        points: usize = 200, "200", "Random (t, x) probes per audit";
    }
}

params! {
    /// Keys of `lip`.
    LipArgs => LipParams {
        schedule: ScheduleSpec = ScheduleSpec::Trig, "trig",
            "Schedule: linear, trig, trig-power:P, designed-gaussian:L, approx-minlip-gmm:M or dilated:K:M";
        target: String = "gaussian".into(), "gaussian", "Target: gaussian (variance m per coordinate) or bimodal (|r| = m)";
        m: f64 = 100.0, "100", "Gaussian variance or bimodal mode distance";
        d: usize = 1, "1", "Dimension";
        p: f64 = 0.3, "0.3", "Weight of the +r mode (bimodal)";
        t_grid: usize = 128, "128", "Midpoint time nodes";
        mc: usize = 256, "256", "Samples per time node";
    }
}

params! {
    /// Keys of `kl`.
    KlArgs => KlParams {
        m: f64 = 1.0, "1", "Variance of the 1D Gaussian target";
        delta: f64 = 0.2, "0.2", "Error amplitude of the score estimator";
        schedules: Vec<ScheduleSpec> = vec![
            ScheduleSpec::Linear,
            ScheduleSpec::Trig,
            ScheduleSpec::DesignedGaussian(0.01),
            ScheduleSpec::ApproxMinLipGmm(2.0),
        ], "linear,trig,designed-gaussian:0.01,approx-minlip-gmm:2", "Comma-separated schedules";
        quad_nodes: usize = 129, "129", "Simpson nodes in log noise ratio (odd)";
        mc_per_node: usize = 2048, "2048", "Samples per quadrature node";
    }
}

params! {
    /// Keys of `gmm-bench`.
    GmmArgs => GmmParams {
        d: usize = 1000, "1000", "Dimension";
        p: f64 = 0.3, "0.3", "Weight of the +r mode";
        n: usize = 10_000, "10000", "Generated samples";
        steps: Vec<usize> = vec![2, 3, 4], "2,3,4", "RK4 step counts";
        schedules: Vec<GmmSchedule> = vec![GmmSchedule::LinearTrig, GmmSchedule::ApproxMinLip],
            "linear-trig,approx-minlip", "Schedules: linear-trig, approx-minlip";
        t_min: f64 = 1e-3, "0.001", "Start time";
        t_max: f64 = 1.0 - 1e-3, "0.999", "End time";
        seeds: Vec<u64> = Vec::new(), "none", "Extra seeds for a mean/std summary";
    }
}

params! {
    /// Keys of `grf-bench`.
    GrfArgs => GrfParams {
        resolutions: Vec<usize> = vec![32, 64, 128], "32,64,128", "Grid sizes N";
        steps: Vec<usize> = vec![20, 40, 80], "20,40,80", "RK4 step counts";
        schedules: Vec<GrfSchedule> = vec![GrfSchedule::Linear, GrfSchedule::Designed], "linear,designed",
            "Schedules: linear, designed";
        n_samples: usize = 512, "512", "Fields per configuration";
        t_min: f64 = 1e-3, "0.001", "Start time";
        t_max: f64 = 1.0 - 1e-3, "0.999", "End time";
        max_bin: usize = 16, "16", "Largest shell in the error average";
    }
}

params! {
    /// Keys of `sde-check`.
    SdeArgs => SdeParams {
        m: f64 = 4.0, "4", "Variance of the 1D Gaussian target";
        schedule: ScheduleSpec = ScheduleSpec::Linear, "linear", "Schedule";
        steps: usize = 400, "400", "Euler-Maruyama steps";
        n: usize = 100_000, "100000", "Samples";
        t_min: f64 = 1e-3, "0.001", "Start time";
        t_max: f64 = 1.0 - 1e-3, "0.999", "End time";
    }
}

impl ScheduleParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        const KINDS: &[&str] = &[
            "linear",
            "trig",
            "trig-power",
            "designed-gaussian",
            "approx-minlip-gmm",
            "dilated",
            "optimized",
        ];
        check(
            KINDS.contains(&self.kind.as_str()),
            "kind",
            format!("unknown schedule kind '{}'", self.kind),
        )?;
        check_positive(self.lambda_star, "lambda-star")?;
        check_positive(self.scale_m, "scale-m")?;
        check_positive(self.power, "power")?;
        check(
            self.kappa > 0.0 && self.kappa < self.scale_m,
            "kappa",
            format!("need 0 < kappa < scale-m, got {}", self.kappa),
        )?;
        check(self.grid >= 2, "grid", "needs at least 2 rows")?;
        check(
            self.g_target == "gaussian" || self.g_target == "bimodal",
            "g-target",
            format!("expected gaussian or bimodal, got '{}'", self.g_target),
        )?;
        check_positive(self.variance, "variance")?;
        check_positive(self.bimodal_m, "bimodal-m")?;
        check_probability(self.p)?;
        check(self.k >= 1, "k", "must be at least 1")?;
        check(self.optimizer_grid >= 3, "optimizer-grid", "needs at least 3 nodes")?;
        check(self.mc >= 1, "mc", "must be positive")
    }
}

impl DriftCheckParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        check_positive(self.m, "m")?;
        check_positive(self.bimodal_m, "bimodal-m")?;
        check_probability(self.p)?;
        check(self.d >= 1, "d", "must be positive")?;
        check(
            self.lambda_star > 0.0 && self.lambda_star <= 1.0,
            "lambda-star",
            format!("must lie in (0, 1], got {}", self.lambda_star),
        )?;
        check(self.points >= 1, "points", "must be positive")
    }
}

impl LipParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        check(
            self.target == "gaussian" || self.target == "bimodal",
            "target",
            format!("expected gaussian or bimodal, got '{}'", self.target),
        )?;
        check_positive(self.m, "m")?;
        check(self.d >= 1, "d", "must be positive")?;
        check_probability(self.p)?;
        check(self.t_grid >= 1, "t-grid", "must be positive")?;
        check(self.mc >= 2, "mc", "needs at least 2 samples")
    }
}

impl KlParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        check_positive(self.m, "m")?;
        check(self.delta.is_finite(), "delta", "must be finite")?;
        check_nonempty(&self.schedules, "schedules")?;
        check(
            self.quad_nodes >= 3 && self.quad_nodes % 2 == 1,
            "quad-nodes",
            format!("must be odd and at least 3, got {}", self.quad_nodes),
        )?;
        check(self.mc_per_node >= 2, "mc-per-node", "needs at least 2 samples")
    }
}

impl GmmParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        check(self.d >= 1, "d", "must be positive")?;
        check_probability(self.p)?;
        check(self.n >= 10, "n", "needs at least 10 samples")?;
        check_nonempty(&self.steps, "steps")?;
        check(
            self.steps.iter().all(|&s| s > 0),
            "steps",
            "step counts must be positive",
        )?;
        check_nonempty(&self.schedules, "schedules")?;
        check_unit_interval(self.t_min, self.t_max)
    }
}

impl GrfParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        check_nonempty(&self.resolutions, "resolutions")?;
        check(
            self.resolutions.iter().all(|&n| n >= 4),
            "resolutions",
            "grid sizes must be at least 4",
        )?;
        check_nonempty(&self.steps, "steps")?;
        check(
            self.steps.iter().all(|&s| s > 0),
            "steps",
            "step counts must be positive",
        )?;
        check_nonempty(&self.schedules, "schedules")?;
        check(self.n_samples >= 1, "n-samples", "must be positive")?;
        check(self.max_bin >= 1, "max-bin", "must be positive")?;
        check_unit_interval(self.t_min, self.t_max)
    }
}

impl SdeParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        check_positive(self.m, "m")?;
        check(self.steps >= 1, "steps", "must be positive")?;
        check(self.n >= 2, "n", "needs at least 2 samples")?;
        check_unit_interval(self.t_min, self.t_max)
    }
}

/// Shared keys of a config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FileCommon {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
}

/// Reads a flat TOML file into its shared keys and the subcommand keys `A`.
/// Keys outside `keys` (snake_case) and the shared set are rejected.
pub fn load_file<A>(path: &Path, keys: &[&str]) -> Result<(FileCommon, A), ConfigError>
where
    A: for<'de> Deserialize<'de>,
{
    let text =
        std::fs::read_to_string(path).map_err(|e| ConfigError::new("config", format!("{}: {e}", path.display())))?;
    parse_file(&text, keys)
}

/// [`load_file`] on in-memory text.
pub fn parse_file<A>(text: &str, keys: &[&str]) -> Result<(FileCommon, A), ConfigError>
where
    A: for<'de> Deserialize<'de>,
{
    let mut table: toml::Table =
        toml::from_str(text).map_err(|e: toml::de::Error| ConfigError::new("config", e.message().to_string()))?;
    for (k, v) in &table {
        if v.is_table() {
            return Err(ConfigError::new(
                k.as_str(),
                "config files are flat; tables are not allowed",
            ));
        }
        let snake = k.replace('-', "_");
        if !matches!(k.as_str(), "seed" | "threads" | "out") && !keys.contains(&snake.as_str()) {
            return Err(ConfigError::new(k.as_str(), "unknown key"));
        }
    }
    let mut common = FileCommon::default();
    if let Some(v) = table.remove("seed") {
        let s = v
            .as_integer()
            .filter(|s| *s >= 0)
            .ok_or_else(|| ConfigError::new("seed", "expected a non-negative integer"))?;
        common.seed = Some(s as u64);
    }
    if let Some(v) = table.remove("threads") {
        let s = v
            .as_integer()
            .filter(|s| *s >= 1)
            .ok_or_else(|| ConfigError::new("threads", "expected a positive integer"))?;
        common.threads = Some(s as usize);
    }
    if let Some(v) = table.remove("out") {
        let s = v.as_str().ok_or_else(|| ConfigError::new("out", "expected a string"))?;
        common.out = Some(PathBuf::from(s));
    }
    let keys_in_file: Vec<String> = table.keys().cloned().collect();
    let args = A::deserialize(toml::Value::Table(table)).map_err(|e| {
        let msg = e.to_string();
        let key = keys_in_file
            .iter()
            .filter(|k| msg.contains(&format!("`{k}`")))
            .max_by_key(|k| k.len())
            .cloned()
            .unwrap_or_else(|| "config".into());
        ConfigError::new(key, msg.trim().to_string())
    })?;
    Ok((common, args))
}

/// Thread count from the flag, then `INTERPOLANT_LAB_THREADS`, then the file;
/// `None` means all available cores.
pub fn resolve_threads(flag: Option<usize>, file: Option<usize>) -> Result<Option<usize>, ConfigError> {
    let env = match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => Some(
            v.trim()
                .parse::<usize>()
                .map_err(|_| ConfigError::new("threads", format!("{THREADS_ENV}='{v}' is not a positive integer")))?,
        ),
        _ => None,
    };
    let threads = flag.or(env).or(file);
    if threads == Some(0) {
        return Err(ConfigError::new("threads", "must be at least 1"));
    }
    Ok(threads)
}

/// Fully resolved configuration, written as `config.json` next to outputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig<P: Serialize> {
    pub subcommand: String,
    pub seed: u64,
    pub threads: usize,
    pub out: PathBuf,
    pub params: P,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_flag_file_default() {
        let flags = GmmArgs {
            d: Some(10),
            ..Default::default()
        };
        let file = GmmArgs {
            d: Some(20),
            n: Some(50),
            ..Default::default()
        };
        let r = flags.resolve(&file);
        assert_eq!(r.d, 10);
        assert_eq!(r.n, 50);
        assert_eq!(r.p, 0.3);
        assert_eq!(r.steps, vec![2, 3, 4]);
    }

    #[test]
    fn file_parsing() {
        let text = "seed = 7\nthreads = 2\nd = 12\nsteps = [2, 5]\nschedules = [\"approx-minlip\"]\nt-min = 0.01\n";
        let (common, args): (FileCommon, GmmArgs) = parse_file(text, GmmArgs::KEYS).unwrap();
        assert_eq!(common.seed, Some(7));
        assert_eq!(common.threads, Some(2));
        let r = GmmArgs::default().resolve(&args);
        assert_eq!(r.d, 12);
        assert_eq!(r.steps, vec![2, 5]);
        assert_eq!(r.schedules, vec![GmmSchedule::ApproxMinLip]);
        assert_eq!(r.t_min, 0.01);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse_file::<GmmArgs>("d = 3\nbogus-key = 1\n", GmmArgs::KEYS).unwrap_err();
        assert_eq!(err.key, "bogus-key");
        let err = parse_file::<GmmArgs>("[section]\nd = 3\n", GmmArgs::KEYS).unwrap_err();
        assert_eq!(err.key, "section");
    }

    #[test]
    fn bad_value_is_named() {
        let err = parse_file::<KlArgs>("schedules = [\"nope\"]\n", KlArgs::KEYS).unwrap_err();
        assert_eq!(err.key, "schedules");
        let err = parse_file::<GmmArgs>("p = \"x\"\n", GmmArgs::KEYS).unwrap_err();
        assert_eq!(err.key, "p");
    }

    #[test]
    fn validation_names_key() {
        let mut p = GmmParams::default();
        p.p = 1.5;
        assert_eq!(p.validate().unwrap_err().key, "p");
        let mut k = KlParams::default();
        k.quad_nodes = 10;
        assert_eq!(k.validate().unwrap_err().key, "quad-nodes");
        assert!(ScheduleParams::default().validate().is_ok());
        assert!(GrfParams::default().validate().is_ok());
        assert!(SdeParams::default().validate().is_ok());
        assert!(LipParams::default().validate().is_ok());
        assert!(DriftCheckParams::default().validate().is_ok());
    }

    #[test]
    fn resolved_config_serializes() {
        let rc = RunConfig {
            subcommand: "kl".into(),
            seed: 1,
            threads: 2,
            out: PathBuf::from("x"),
            params: KlParams::default(),
        };
        let v = serde_json::to_value(&rc).unwrap();
        assert_eq!(v["params"]["schedules"][2], "designed-gaussian:0.01");
        assert_eq!(v["params"]["quad-nodes"], 129);
    }
}
