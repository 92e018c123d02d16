//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are skipped. Unknown keys,
//! duplicate keys and unparsable values are errors that carry the line number.

use crate::CliError;
use robust_gnss::baselines::EkfConfig;
use robust_gnss::geo::Geodetic;
use robust_gnss::gnc::{GncSchedule, WeightRule};
use robust_gnss::graph::{DvConfig, SolveOptions};
use robust_gnss::obs_model::SigmaModelConfig;
use robust_gnss::sim::{OutlierSign, Reference, Scenario, Trajectory};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

#[derive(Debug, Clone)]
struct Entry {
    line: usize,
    value: String,
}

/// Parsed entries of one file, consumed key by key.
#[derive(Debug)]
pub struct KeyValues {
    source: String,
    entries: BTreeMap<String, Entry>,
}

impl KeyValues {
    pub fn parse(source: &str, text: &str) -> Result<Self, CliError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some((key, value)) = trimmed.split_once('=') else {
                return Err(CliError::input(format!("{source}:{line}: expected key = value, got {trimmed:?}")));
            };
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(CliError::input(format!("{source}:{line}: empty key")));
            }
            if let Some(prev) = entries.get(&key) {
                let prev: &Entry = prev;
                return Err(CliError::input(format!("{source}:{line}: duplicate key {key} (first on line {})", prev.line)));
            }
            entries.insert(key, Entry { line, value: value.trim().to_string() });
        }
        Ok(Self { source: source.to_string(), entries })
    }

    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, CliError> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(e) => e.value.parse::<T>().map(Some).map_err(|_| {
                CliError::input(format!("{}:{}: cannot parse {key} = {:?}", self.source, e.line, e.value))
            }),
        }
    }

    fn set<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<(), CliError> {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    fn line_of(&self, key: &str) -> usize {
        self.entries.get(key).map(|e| e.line).unwrap_or(0)
    }

    fn finish(self) -> Result<(), CliError> {
        match self.entries.iter().min_by_key(|(_, e)| e.line) {
            None => Ok(()),
            Some((key, e)) => Err(CliError::input(format!("{}:{}: unknown key {key}", self.source, e.line))),
        }
    }
}

fn parse_reference(s: &str) -> Option<Reference> {
    match s {
        "A" | "a" => Some(Reference::A),
        "B" | "b" => Some(Reference::B),
        "C" | "c" => Some(Reference::C),
        "D" | "d" => Some(Reference::D),
        _ => None,
    }
}

fn parse_waypoints(s: &str) -> Option<Vec<(f64, f64)>> {
    s.split_whitespace()
        .map(|pair| {
            let (e, n) = pair.split_once(':')?;
            Some((e.parse().ok()?, n.parse().ok()?))
        })
        .collect()
}

/// Scenario file: an optional `preset` (A-D) overridden by explicit keys.
pub fn parse_scenario(source: &str, text: &str) -> Result<Scenario, CliError> {
    let mut kv = KeyValues::parse(source, text)?;
    let line = kv.line_of("preset");
    let mut s = match kv.take::<String>("preset")? {
        None => Scenario::default(),
        Some(p) => Scenario::reference(
            parse_reference(&p).ok_or_else(|| CliError::input(format!("{source}:{line}: unknown preset {p:?}")))?,
        ),
    };
    kv.set("duration", &mut s.duration)?;
    kv.set("rate", &mut s.rate)?;
    kv.set("num_sats", &mut s.num_sats)?;
    kv.set("geometry_seed", &mut s.geometry_seed)?;
    let (mut lat, mut lon) = (s.origin.lat.to_degrees(), s.origin.lon.to_degrees());
    kv.set("origin_lat_deg", &mut lat)?;
    kv.set("origin_lon_deg", &mut lon)?;
    let mut height = s.origin.height;
    kv.set("origin_height_m", &mut height)?;
    s.origin = Geodetic::from_degrees(lat, lon, height);

    let traj_line = kv.line_of("trajectory");
    let kind = kv.take::<String>("trajectory")?;
    let (mut speed, mut heading, mut waypoints) = match &s.trajectory {
        Trajectory::Static => (0.0, 0.0, Vec::new()),
        Trajectory::Line { speed, heading_deg } => (*speed, *heading_deg, Vec::new()),
        Trajectory::Polyline { speed, waypoints } => (*speed, 0.0, waypoints.clone()),
    };
    kv.set("speed", &mut speed)?;
    kv.set("heading_deg", &mut heading)?;
    let wp_line = kv.line_of("waypoints");
    if let Some(w) = kv.take::<String>("waypoints")? {
        waypoints = parse_waypoints(&w)
            .ok_or_else(|| CliError::input(format!("{source}:{wp_line}: waypoints must be east:north pairs")))?;
    }
    let kind = kind.unwrap_or_else(|| match s.trajectory {
        Trajectory::Static => "static".into(),
        Trajectory::Line { .. } => "line".into(),
        Trajectory::Polyline { .. } => "polyline".into(),
    });
    s.trajectory = match kind.as_str() {
        "static" => Trajectory::Static,
        "line" => Trajectory::Line { speed, heading_deg: heading },
        "polyline" => Trajectory::Polyline { speed, waypoints },
        other => return Err(CliError::input(format!("{source}:{traj_line}: unknown trajectory {other:?}"))),
    };

    kv.set("clk_bias0", &mut s.clk_bias0)?;
    kv.set("clk_drift0", &mut s.clk_drift0)?;
    kv.set("clk_bias_psd", &mut s.clk_bias_psd)?;
    kv.set("clk_drift_psd", &mut s.clk_drift_psd)?;
    kv.set("pr_noise", &mut s.pr_noise)?;
    kv.set("doppler_noise_hz", &mut s.doppler_noise_hz)?;
    kv.set("atmosphere_bias", &mut s.atmosphere_bias)?;
    kv.set("atmosphere_rate", &mut s.atmosphere_rate)?;
    kv.set("outlier_fraction", &mut s.outliers.fraction)?;
    kv.set("outlier_bias_min", &mut s.outliers.bias_min)?;
    kv.set("outlier_bias_max", &mut s.outliers.bias_max)?;
    kv.set("outlier_persistence", &mut s.outliers.persistence)?;
    let sign_line = kv.line_of("outlier_sign");
    if let Some(sign) = kv.take::<String>("outlier_sign")? {
        s.outliers.sign = match sign.as_str() {
            "positive" => OutlierSign::Positive,
            "symmetric" => OutlierSign::Symmetric,
            other => return Err(CliError::input(format!("{source}:{sign_line}: unknown outlier_sign {other:?}"))),
        };
    }
    kv.set("nlos_cn0_drop", &mut s.outliers.nlos_cn0_drop)?;
    kv.set("seed", &mut s.seed)?;
    kv.finish()?;
    s.validate().map_err(|e| CliError::input(format!("{source}: {e}")))?;
    Ok(s)
}

/// Every scenario key, in the order [`parse_scenario`] reads them.
pub fn format_scenario(s: &Scenario) -> String {
    let mut out = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(out, "{k} = {v}");
    };
    kv("duration", s.duration.to_string());
    kv("rate", s.rate.to_string());
    kv("num_sats", s.num_sats.to_string());
    kv("geometry_seed", s.geometry_seed.to_string());
    kv("origin_lat_deg", s.origin.lat.to_degrees().to_string());
    kv("origin_lon_deg", s.origin.lon.to_degrees().to_string());
    kv("origin_height_m", s.origin.height.to_string());
    match &s.trajectory {
        Trajectory::Static => kv("trajectory", "static".into()),
        Trajectory::Line { speed, heading_deg } => {
            kv("trajectory", "line".into());
            kv("speed", speed.to_string());
            kv("heading_deg", heading_deg.to_string());
        }
        Trajectory::Polyline { speed, waypoints } => {
            kv("trajectory", "polyline".into());
            kv("speed", speed.to_string());
            let w: Vec<String> = waypoints.iter().map(|(e, n)| format!("{e}:{n}")).collect();
            kv("waypoints", w.join(" "));
        }
    }
    kv("clk_bias0", s.clk_bias0.to_string());
    kv("clk_drift0", s.clk_drift0.to_string());
    kv("clk_bias_psd", s.clk_bias_psd.to_string());
    kv("clk_drift_psd", s.clk_drift_psd.to_string());
    kv("pr_noise", s.pr_noise.to_string());
    kv("doppler_noise_hz", s.doppler_noise_hz.to_string());
    kv("atmosphere_bias", s.atmosphere_bias.to_string());
    kv("atmosphere_rate", s.atmosphere_rate.to_string());
    kv("outlier_fraction", s.outliers.fraction.to_string());
    kv("outlier_bias_min", s.outliers.bias_min.to_string());
    kv("outlier_bias_max", s.outliers.bias_max.to_string());
    kv("outlier_persistence", s.outliers.persistence.to_string());
    kv(
        "outlier_sign",
        match s.outliers.sign {
            OutlierSign::Positive => "positive".into(),
            OutlierSign::Symmetric => "symmetric".into(),
        },
    );
    kv("nlos_cn0_drop", s.outliers.nlos_cn0_drop.to_string());
    kv("seed", s.seed.to_string());
    out
}

/// Solver settings for `solve`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub sigma: SigmaModelConfig,
    pub dv: DvConfig,
    pub solver: SolveOptions,
    pub schedule: GncSchedule,
    /// Kernel width of the fixed-kernel IRLS methods.
    pub kernel_width: f64,
    pub ekf: EkfConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            sigma: SigmaModelConfig::default(),
            dv: DvConfig::default(),
            solver: SolveOptions::default(),
            schedule: GncSchedule::default(),
            kernel_width: 2.0,
            ekf: EkfConfig::default(),
        }
    }
}

pub fn parse_run_config(source: &str, text: &str) -> Result<RunConfig, CliError> {
    let mut kv = KeyValues::parse(source, text)?;
    let mut c = RunConfig::default();
    kv.set("sigma0", &mut c.sigma.sigma0)?;
    kv.set("snr_threshold", &mut c.sigma.snr_threshold)?;
    kv.set("snr_scale", &mut c.sigma.snr_scale)?;
    let mut dv = c.dv.sigma.x;
    kv.set("dv_sigma", &mut dv)?;
    c.dv.sigma.fill(dv);
    kv.set("max_iterations", &mut c.solver.max_iterations)?;
    kv.set("cost_tolerance", &mut c.solver.cost_tolerance)?;
    kv.set("initial_damping", &mut c.solver.initial_damping)?;
    kv.set("damping_up", &mut c.solver.damping_up)?;
    kv.set("damping_down", &mut c.solver.damping_down)?;
    kv.set("max_damping", &mut c.solver.max_damping)?;
    kv.set("kernel_width", &mut c.kernel_width)?;
    c.schedule.c_gm = c.kernel_width;
    kv.set("gnc_decay", &mut c.schedule.decay)?;
    kv.set("init_multiplier", &mut c.schedule.init_multiplier)?;
    let rule_line = kv.line_of("weight_rule");
    if let Some(rule) = kv.take::<String>("weight_rule")? {
        c.schedule.weight_rule = match rule.as_str() {
            "squared" => WeightRule::Squared,
            "unsquared" => WeightRule::Unsquared,
            other => {
                return Err(CliError::input(format!(
                    "{source}:{rule_line}: weight_rule must be squared or unsquared, got {other:?}"
                )))
            }
        };
    }
    kv.set("ekf_accel_psd", &mut c.ekf.accel_psd)?;
    kv.set("ekf_clk_bias_psd", &mut c.ekf.clk_bias_psd)?;
    kv.set("ekf_clk_drift_psd", &mut c.ekf.clk_drift_psd)?;
    kv.set("ekf_range_rate_sigma", &mut c.ekf.range_rate_sigma)?;
    kv.set("ekf_gate", &mut c.ekf.gate)?;
    kv.finish()?;
    c.validate().map_err(|m| CliError::input(format!("{source}: {m}")))?;
    Ok(c)
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("sigma0", self.sigma.sigma0),
            ("snr_scale", self.sigma.snr_scale),
            ("dv_sigma", self.dv.sigma.x),
            ("cost_tolerance", self.solver.cost_tolerance),
            ("initial_damping", self.solver.initial_damping),
            ("damping_up", self.solver.damping_up),
            ("damping_down", self.solver.damping_down),
            ("max_damping", self.solver.max_damping),
            ("kernel_width", self.kernel_width),
            ("init_multiplier", self.schedule.init_multiplier),
            ("ekf_range_rate_sigma", self.ekf.range_rate_sigma),
            ("ekf_gate", self.ekf.gate),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.schedule.decay > 1.0) {
            return Err(format!("gnc_decay must exceed 1, got {}", self.schedule.decay));
        }
        if self.solver.max_iterations == 0 {
            return Err("max_iterations must be at least 1".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_roundtrip_through_text() {
        for r in [Reference::A, Reference::B, Reference::C, Reference::D] {
            let s = Scenario::reference(r);
            let text = format_scenario(&s);
            let back = parse_scenario("t", &text).unwrap();
            assert_eq!(back.trajectory, s.trajectory);
            assert_eq!(back.outliers, s.outliers);
            assert_eq!(back.seed, s.seed);
            assert!((back.origin.lat - s.origin.lat).abs() < 1e-15);
        }
    }

    #[test]
    fn preset_with_override() {
        let s = parse_scenario("t", "# comment\npreset = C\n\nseed = 7\n").unwrap();
        assert_eq!(s.seed, 7);
        assert_eq!(s.outliers.fraction, 0.3);
    }

    #[test]
    fn strict_errors_name_the_line() {
        let e = parse_scenario("f.cfg", "seed = 1\ncolour = red\n").unwrap_err();
        assert!(e.to_string().contains("f.cfg:2") && e.to_string().contains("colour"), "{e}");
        let e = parse_scenario("f.cfg", "seed = 1\nseed = 2\n").unwrap_err();
        assert!(e.to_string().contains("f.cfg:2"), "{e}");
        let e = parse_scenario("f.cfg", "\nduration = ten\n").unwrap_err();
        assert!(e.to_string().contains("f.cfg:2"), "{e}");
        assert!(parse_scenario("f.cfg", "just words\n").is_err());
        assert!(parse_scenario("f.cfg", "num_sats = 2\n").is_err());
        assert!(parse_scenario("f.cfg", "trajectory = spiral\n").is_err());
        assert!(parse_scenario("f.cfg", "trajectory = polyline\nspeed = 5\nwaypoints = 0:0 1\n").is_err());
    }

    #[test]
    fn run_config_defaults_and_flags() {
        let c = parse_run_config("r", "").unwrap();
        assert_eq!(c.schedule.c_gm, 2.0);
        assert_eq!(c.schedule.decay, 1.4);
        assert_eq!(c.schedule.init_multiplier, 3.0);
        assert_eq!(c.schedule.weight_rule, WeightRule::Squared);
        let c = parse_run_config("r", "weight_rule = unsquared\nkernel_width = 3\n").unwrap();
        assert_eq!(c.schedule.weight_rule, WeightRule::Unsquared);
        assert_eq!(c.schedule.c_gm, 3.0);
        assert!(parse_run_config("r", "gnc_decay = 1\n").is_err());
        assert!(parse_run_config("r", "weight_rule = cubic\n").is_err());
        assert!(parse_run_config("r", "bogus = 1\n").is_err());
    }
}
