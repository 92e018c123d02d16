//! Synthetic GNSS scenarios: receiver trajectory, satellite shell geometry,
//! receiver clock, measurement synthesis and labeled outlier injection.
//!
//! Pseudoranges are built as `range + clock bias + atmosphere residual +
//! noise + outlier bias`, already corrected for satellite clock. Doppler is
//! emitted so that `wavelength * doppler` equals the expected range rate plus
//! the receiver clock drift (plus noise).

use crate::geo::{self, EcefPoint, EcefVelocity, Enu, GeoError, Geodetic};
use crate::obs_model::{
    measurement_sigma, range_rate_expected, EpochObservations, EpochState, GnssSystem, SatelliteObservation,
    SigmaModelConfig, SignalLabel,
};
use log::warn;
use nalgebra::{Rotation3, Unit, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;
use thiserror::Error;

/// Distance of the satellite shell from the earth center (m).
pub const SHELL_RADIUS: f64 = 26.56e6;
/// Tangential satellite speed (m/s).
pub const SATELLITE_SPEED: f64 = 3.874e3;
/// GPS L1 carrier wavelength (m).
pub const GPS_L1_WAVELENGTH: f64 = SPEED_OF_LIGHT_M_S / 1_575.42e6;
/// BeiDou B1I carrier wavelength (m).
pub const BDS_B1_WAVELENGTH: f64 = SPEED_OF_LIGHT_M_S / 1_561.098e6;
const SPEED_OF_LIGHT_M_S: f64 = geo::SPEED_OF_LIGHT;

/// Biases at or above this size are labeled NLOS, smaller ones multipath.
pub const NLOS_LABEL_THRESHOLD: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("only {visible} satellites above the horizon at t = {t}")]
    TooFewVisible { t: f64, visible: usize },
    #[error(transparent)]
    Geometry(#[from] GeoError),
}

/// Receiver motion in the local tangent plane at the scenario origin.
#[derive(Debug, Clone, PartialEq)]
pub enum Trajectory {
    Static,
    /// Constant velocity along a heading (degrees clockwise from north).
    Line { speed: f64, heading_deg: f64 },
    /// Constant speed through east/north waypoints (m), starting at the
    /// first one; the receiver stops at the last.
    Polyline { speed: f64, waypoints: Vec<(f64, f64)> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutlierSign {
    Positive,
    Symmetric,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutlierSpec {
    /// Fraction of satellite-epoch cells to corrupt, in `[0, 1)`.
    pub fraction: f64,
    pub bias_min: f64,
    pub bias_max: f64,
    /// Consecutive epochs per corrupted block of one satellite.
    pub persistence: usize,
    pub sign: OutlierSign,
    /// C/N0 reduction applied to NLOS cells (dB-Hz).
    pub nlos_cn0_drop: f64,
}

impl Default for OutlierSpec {
    fn default() -> Self {
        Self { fraction: 0.0, bias_min: 20.0, bias_max: 100.0, persistence: 1, sign: OutlierSign::Positive, nlos_cn0_drop: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub duration: f64,
    pub rate: f64,
    pub num_sats: usize,
    pub geometry_seed: u64,
    pub origin: Geodetic,
    pub trajectory: Trajectory,
    pub clk_bias0: f64,
    pub clk_drift0: f64,
    /// Clock bias random walk PSD (m²/s).
    pub clk_bias_psd: f64,
    /// Clock drift random walk PSD (m²/s³).
    pub clk_drift_psd: f64,
    /// Pseudorange noise std at zenith and full C/N0 (m); lower satellites
    /// get the same relative inflation as the sigma model.
    pub pr_noise: f64,
    /// Doppler noise std (Hz).
    pub doppler_noise_hz: f64,
    /// Per-satellite atmosphere residual offset drawn from `[-a, a]` (m).
    pub atmosphere_bias: f64,
    /// Per-satellite atmosphere residual ramp drawn from `[-r, r]` (m/s).
    pub atmosphere_rate: f64,
    pub outliers: OutlierSpec,
    pub seed: u64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            duration: 100.0,
            rate: 1.0,
            num_sats: 10,
            geometry_seed: 1,
            origin: Geodetic::from_degrees(22.3193, 114.1694, 10.0),
            trajectory: Trajectory::Static,
            clk_bias0: 150.0,
            clk_drift0: 0.3,
            clk_bias_psd: 0.01,
            clk_drift_psd: 0.001,
            pr_noise: 0.0,
            doppler_noise_hz: 0.0,
            atmosphere_bias: 0.0,
            atmosphere_rate: 0.0,
            outliers: OutlierSpec::default(),
            seed: 1,
        }
    }
}

/// The shipped reference scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reference {
    /// Static receiver, noiseless.
    A,
    /// Moving receiver, noiseless.
    B,
    /// Moving receiver, noisy, 30% NLOS cells with 20-100 m biases.
    C,
    /// Dense-urban analog: as C with 50% NLOS cells.
    D,
}

impl Scenario {
    pub fn reference(which: Reference) -> Self {
        let drive = Trajectory::Polyline {
            speed: 10.0,
            waypoints: vec![(0.0, 0.0), (300.0, 0.0), (300.0, 200.0), (0.0, 200.0), (0.0, 0.0)],
        };
        let noisy = |fraction: f64| Scenario {
            trajectory: drive.clone(),
            pr_noise: 0.3,
            doppler_noise_hz: 0.25,
            atmosphere_bias: 0.5,
            atmosphere_rate: 0.002,
            outliers: OutlierSpec {
                fraction,
                bias_min: 20.0,
                bias_max: 100.0,
                persistence: 5,
                sign: OutlierSign::Positive,
                nlos_cn0_drop: 0.0,
            },
            ..Scenario::default()
        };
        match which {
            Reference::A => Scenario::default(),
            Reference::B => Scenario { trajectory: drive.clone(), ..Scenario::default() },
            Reference::C => noisy(0.3),
            Reference::D => noisy(0.5),
        }
    }

    pub fn num_epochs(&self) -> usize {
        (self.duration * self.rate).round() as usize
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Invalid(m));
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad(format!("duration must be positive, got {}", self.duration));
        }
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return bad(format!("rate must be positive, got {}", self.rate));
        }
        if self.num_epochs() == 0 {
            return bad("duration * rate rounds to zero epochs".into());
        }
        if self.num_sats < 4 {
            return bad(format!("need at least 4 satellites, got {}", self.num_sats));
        }
        for (name, v) in [
            ("clk_bias_psd", self.clk_bias_psd),
            ("clk_drift_psd", self.clk_drift_psd),
            ("pr_noise", self.pr_noise),
            ("doppler_noise_hz", self.doppler_noise_hz),
            ("atmosphere_bias", self.atmosphere_bias),
            ("atmosphere_rate", self.atmosphere_rate),
            ("nlos_cn0_drop", self.outliers.nlos_cn0_drop),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        let o = &self.outliers;
        if !(0.0..1.0).contains(&o.fraction) {
            return bad(format!("outlier fraction must be in [0, 1), got {}", o.fraction));
        }
        if !(o.bias_min > 0.0 && o.bias_max >= o.bias_min && o.bias_max.is_finite()) {
            return bad(format!("outlier bias range must be positive and ordered, got [{}, {}]", o.bias_min, o.bias_max));
        }
        if o.persistence == 0 {
            return bad("outlier persistence must be at least 1".into());
        }
        match &self.trajectory {
            Trajectory::Static => {}
            Trajectory::Line { speed, heading_deg } => {
                if !(speed.is_finite() && *speed >= 0.0 && heading_deg.is_finite()) {
                    return bad("line trajectory needs a finite non-negative speed and heading".into());
                }
            }
            Trajectory::Polyline { speed, waypoints } => {
                if !(speed.is_finite() && *speed > 0.0) {
                    return bad("polyline trajectory needs a positive speed".into());
                }
                if waypoints.len() < 2 {
                    return bad("polyline trajectory needs at least two waypoints".into());
                }
            }
        }
        Ok(())
    }
}

/// Position and velocity of one satellite at one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SatelliteState {
    pub sat_id: u32,
    pub system: GnssSystem,
    pub pos: EcefPoint,
    pub vel: EcefVelocity,
}

/// Truth trajectory and visible satellites per epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    pub truth: Vec<EpochState>,
    pub satellites: Vec<Vec<SatelliteState>>,
}

/// Local east/north offset and velocity at time `t`.
fn trajectory_at(traj: &Trajectory, t: f64) -> (Enu, Enu) {
    match traj {
        Trajectory::Static => (Enu::default(), Enu::default()),
        Trajectory::Line { speed, heading_deg } => {
            let (s, c) = heading_deg.to_radians().sin_cos();
            (Enu::new(speed * t * s, speed * t * c, 0.0), Enu::new(speed * s, speed * c, 0.0))
        }
        Trajectory::Polyline { speed, waypoints } => {
            let mut remaining = speed * t;
            for seg in waypoints.windows(2) {
                let (de, dn) = (seg[1].0 - seg[0].0, seg[1].1 - seg[0].1);
                let len = de.hypot(dn);
                if len == 0.0 {
                    continue;
                }
                if remaining < len {
                    let f = remaining / len;
                    return (
                        Enu::new(seg[0].0 + f * de, seg[0].1 + f * dn, 0.0),
                        Enu::new(speed * de / len, speed * dn / len, 0.0),
                    );
                }
                remaining -= len;
            }
            let end = waypoints[waypoints.len() - 1];
            (Enu::new(end.0, end.1, 0.0), Enu::default())
        }
    }
}

struct Orbit {
    sat_id: u32,
    system: GnssSystem,
    start: EcefPoint,
    axis: Unit<Vector3<f64>>,
    rate: f64,
}

impl Orbit {
    fn at(&self, t: f64) -> (EcefPoint, EcefVelocity) {
        let pos = Rotation3::from_axis_angle(&self.axis, self.rate * t) * self.start;
        let vel = self.axis.into_inner().cross(&pos) * self.rate;
        (pos, vel)
    }
}

/// Truth trajectory, receiver clock and satellite geometry.
///
/// Satellites start on a shell of radius [`SHELL_RADIUS`] at elevations spread
/// over `[10°, 90°)` and golden-angle azimuths seen from the origin, and move
/// on great circles at [`SATELLITE_SPEED`]. Geometry depends only on
/// `geometry_seed`; the clock random walk draws from `seed`.
pub fn generate_scenario(spec: &Scenario) -> Result<Geometry, SimError> {
    spec.validate()?;
    let origin = geo::geodetic_to_ecef(&spec.origin)?;
    let to_ecef = geo::enu_rotation(spec.origin.lat, spec.origin.lon).transpose();

    let mut geo_rng = ChaCha8Rng::seed_from_u64(spec.geometry_seed);
    let n = spec.num_sats;
    let mut orbits = Vec::with_capacity(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut geo_rng);
    for i in 0..n {
        let el = (10.0 + 80.0 * (order[i] as f64 + geo_rng.random_range(0.0..1.0)) / n as f64).to_radians();
        let az = (i as f64 * 137.507_764 + geo_rng.random_range(0.0..15.0)).to_radians();
        let dir = to_ecef * Vector3::new(el.cos() * az.sin(), el.cos() * az.cos(), el.sin());
        // distance along the line of sight to the shell
        let b = origin.dot(&dir);
        let range = -b + (b * b - origin.norm_squared() + SHELL_RADIUS * SHELL_RADIUS).sqrt();
        let start = origin + dir * range;
        let radial = start.normalize();
        let mut tangent;
        loop {
            let r = Vector3::new(geo_rng.random_range(-1.0..1.0), geo_rng.random_range(-1.0..1.0), geo_rng.random_range(-1.0..1.0));
            tangent = r - radial * radial.dot(&r);
            if tangent.norm() > 0.1 {
                break;
            }
        }
        let axis = Unit::new_normalize(radial.cross(&tangent));
        let system = if i % 2 == 0 { GnssSystem::Gps } else { GnssSystem::BeiDou };
        orbits.push(Orbit { sat_id: i as u32 + 1, system, start, axis, rate: SATELLITE_SPEED / SHELL_RADIUS });
    }

    let mut clk_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dt = 1.0 / spec.rate;
    let bias_step = Normal::new(0.0, (spec.clk_bias_psd * dt).sqrt()).expect("finite std");
    let drift_step = Normal::new(0.0, (spec.clk_drift_psd * dt).sqrt()).expect("finite std");
    let (mut bias, mut drift) = (spec.clk_bias0, spec.clk_drift0);

    let mut truth = Vec::with_capacity(spec.num_epochs());
    let mut satellites = Vec::with_capacity(spec.num_epochs());
    for k in 0..spec.num_epochs() {
        let t = k as f64 * dt;
        if k > 0 {
            bias += drift * dt + bias_step.sample(&mut clk_rng);
            drift += drift_step.sample(&mut clk_rng);
        }
        let (enu, enu_vel) = trajectory_at(&spec.trajectory, t);
        let pos = origin + to_ecef * enu.as_vector();
        let vel = to_ecef * enu_vel.as_vector();
        truth.push(EpochState { t, pos, vel, clk_bias: bias, clk_drift: drift });

        let mut visible = Vec::with_capacity(n);
        for orbit in &orbits {
            let (sp, sv) = orbit.at(t);
            let (el, _) = geo::elevation_azimuth(&sp, &pos)?;
            if el > 0.0 {
                visible.push(SatelliteState { sat_id: orbit.sat_id, system: orbit.system, pos: sp, vel: sv });
            }
        }
        if visible.len() < 4 {
            return Err(SimError::TooFewVisible { t, visible: visible.len() });
        }
        satellites.push(visible);
    }
    Ok(Geometry { truth, satellites })
}

/// Error components of one synthesized pseudorange.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorBudgetRecord {
    pub t: f64,
    pub sat_id: u32,
    pub range: f64,
    pub clk_bias: f64,
    pub atmosphere: f64,
    pub noise: f64,
    pub outlier_bias: f64,
    pub label: SignalLabel,
}

impl ErrorBudgetRecord {
    /// The pseudorange rebuilt from its parts, summed in synthesis order.
    pub fn reconstruct(&self) -> f64 {
        self.range + self.clk_bias + self.atmosphere + self.noise + self.outlier_bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synthesized {
    pub epochs: Vec<EpochObservations>,
    /// One record per observation, in the same order.
    pub budget: Vec<Vec<ErrorBudgetRecord>>,
}

fn nominal_cn0(elevation: f64) -> f64 {
    28.0 + 20.0 * elevation.sin()
}

fn wavelength(system: GnssSystem) -> f64 {
    match system {
        GnssSystem::Gps => GPS_L1_WAVELENGTH,
        GnssSystem::BeiDou => BDS_B1_WAVELENGTH,
    }
}

/// Measurements for every visible satellite at every epoch, then outliers.
pub fn synthesize_observations(geometry: &Geometry, spec: &Scenario) -> Result<Synthesized, SimError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0x5EED_0B5E));
    let shape = SigmaModelConfig::default();
    let mut atmosphere: BTreeMap<u32, (f64, f64)> = BTreeMap::new();
    for s in geometry.satellites.iter().flatten() {
        atmosphere.entry(s.sat_id).or_insert((0.0, 0.0));
    }
    for v in atmosphere.values_mut() {
        let a = if spec.atmosphere_bias > 0.0 { rng.random_range(-spec.atmosphere_bias..=spec.atmosphere_bias) } else { 0.0 };
        let r = if spec.atmosphere_rate > 0.0 { rng.random_range(-spec.atmosphere_rate..=spec.atmosphere_rate) } else { 0.0 };
        *v = (a, r);
    }
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");

    let mut epochs = Vec::with_capacity(geometry.truth.len());
    let mut budget = Vec::with_capacity(geometry.truth.len());
    for (truth, sats) in geometry.truth.iter().zip(&geometry.satellites) {
        let mut obs = Vec::with_capacity(sats.len());
        let mut records = Vec::with_capacity(sats.len());
        for s in sats {
            let (el, _) = geo::elevation_azimuth(&s.pos, &truth.pos)?;
            let cn0 = (nominal_cn0(el) + std_normal.sample(&mut rng)).clamp(0.0, 60.0);
            let noise_std = spec.pr_noise * measurement_sigma(el, cn0, &shape).expect("visible satellite") / shape.sigma0;
            let noise = noise_std * std_normal.sample(&mut rng);
            let (a0, ramp) = atmosphere[&s.sat_id];
            let record = ErrorBudgetRecord {
                t: truth.t,
                sat_id: s.sat_id,
                range: (s.pos - truth.pos).norm(),
                clk_bias: truth.clk_bias,
                atmosphere: a0 + ramp * truth.t,
                noise,
                outlier_bias: 0.0,
                label: SignalLabel::Los,
            };
            let lambda = wavelength(s.system);
            let rr = range_rate_expected(truth, &s.pos, &s.vel).expect("distinct points") + truth.clk_drift;
            let doppler = rr / lambda + spec.doppler_noise_hz * std_normal.sample(&mut rng);
            obs.push(SatelliteObservation {
                t: truth.t,
                sat_id: s.sat_id,
                system: s.system,
                sat_pos: s.pos,
                sat_vel: s.vel,
                pseudorange: record.reconstruct(),
                doppler,
                wavelength: lambda,
                cn0,
                label: SignalLabel::Los,
            });
            records.push(record);
        }
        epochs.push(EpochObservations { t: truth.t, observations: obs });
        budget.push(records);
    }

    let injected = inject_outliers(&epochs, &spec.outliers, spec.seed)?;
    for ((epoch, records), biases) in injected.epochs.iter().zip(budget.iter_mut()).zip(&injected.biases) {
        for ((o, rec), &bias) in epoch.observations.iter().zip(records.iter_mut()).zip(biases) {
            rec.outlier_bias = bias;
            rec.label = o.label;
        }
    }
    Ok(Synthesized { epochs: injected.epochs, budget })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutlierInjection {
    pub epochs: Vec<EpochObservations>,
    /// Injected bias per observation (0 for clean cells).
    pub biases: Vec<Vec<f64>>,
    pub flagged: usize,
}

impl OutlierInjection {
    pub fn labels(&self) -> Vec<Vec<SignalLabel>> {
        self.epochs.iter().map(|e| e.observations.iter().map(|o| o.label).collect()).collect()
    }
}

/// Corrupts exactly `floor(fraction * cells)` satellite-epoch cells.
///
/// Each satellite's epochs are cut into aligned blocks of `persistence`
/// consecutive appearances; blocks are drawn in random order, each with one
/// bias from `[bias_min, bias_max]`, and the last block drawn is truncated to
/// hit the exact count. Doppler is left untouched.
pub fn inject_outliers(epochs: &[EpochObservations], spec: &OutlierSpec, seed: u64) -> Result<OutlierInjection, SimError> {
    if !(0.0..1.0).contains(&spec.fraction) {
        return Err(SimError::Invalid(format!("outlier fraction must be in [0, 1), got {}", spec.fraction)));
    }
    if spec.persistence == 0 {
        return Err(SimError::Invalid("outlier persistence must be at least 1".into()));
    }
    let mut out = epochs.to_vec();
    let mut biases: Vec<Vec<f64>> = epochs.iter().map(|e| vec![0.0; e.observations.len()]).collect();
    let total: usize = epochs.iter().map(|e| e.observations.len()).sum();
    let target = (spec.fraction * total as f64).floor() as usize;
    if target == 0 {
        return Ok(OutlierInjection { epochs: out, biases, flagged: 0 });
    }
    if !(spec.bias_min > 0.0 && spec.bias_max >= spec.bias_min) {
        return Err(SimError::Invalid(format!("invalid bias range [{}, {}]", spec.bias_min, spec.bias_max)));
    }

    // cells per satellite in time order
    let mut per_sat: BTreeMap<u32, Vec<(usize, usize)>> = BTreeMap::new();
    for (k, e) in epochs.iter().enumerate() {
        for (j, o) in e.observations.iter().enumerate() {
            per_sat.entry(o.sat_id).or_default().push((k, j));
        }
    }
    let mut blocks: Vec<Vec<(usize, usize)>> =
        per_sat.values().flat_map(|cells| cells.chunks(spec.persistence).map(|c| c.to_vec())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x0071_1E25));
    blocks.shuffle(&mut rng);

    let mut flagged = 0;
    for block in blocks {
        if flagged == target {
            break;
        }
        let magnitude = rng.random_range(spec.bias_min..=spec.bias_max);
        let bias = match spec.sign {
            OutlierSign::Positive => magnitude,
            OutlierSign::Symmetric => {
                if rng.random_bool(0.5) {
                    magnitude
                } else {
                    -magnitude
                }
            }
        };
        let label = if bias.abs() >= NLOS_LABEL_THRESHOLD { SignalLabel::Nlos } else { SignalLabel::Multipath };
        for &(k, j) in block.iter().take(target - flagged) {
            let o = &mut out[k].observations[j];
            o.pseudorange += bias;
            o.label = label;
            if label == SignalLabel::Nlos {
                o.cn0 = (o.cn0 - spec.nlos_cn0_drop).max(0.0);
            }
            biases[k][j] = bias;
            flagged += 1;
        }
    }

    for e in &out {
        let clean = e.observations.iter().filter(|o| !o.label.is_outlier()).count();
        if clean < 4 {
            warn!("epoch t = {} keeps only {clean} clean satellites", e.t);
        }
    }
    Ok(OutlierInjection { epochs: out, biases, flagged })
}

/// Geometry, observations and error budget in one call.
pub fn simulate(spec: &Scenario) -> Result<(Geometry, Synthesized), SimError> {
    let geometry = generate_scenario(spec)?;
    let synthesized = synthesize_observations(&geometry, spec)?;
    Ok((geometry, synthesized))
}
