//! Measurement models: pseudorange, Doppler range rate, snapshot Doppler
//! velocity, the inter-epoch Doppler velocity factor, per-measurement sigma
//! and elevation/C/N0 screening.
//!
//! Conventions:
//! - clock terms are carried in meters (bias) and m/s (drift);
//! - residuals are `(measured - predicted) / sigma`;
//! - Doppler ingestion guarantees `wavelength * doppler` equals the expected
//!   range rate plus receiver clock drift, with satellite clock drift already
//!   removed.

use crate::geo::{self, EcefPoint, EcefVelocity, GeoError, EARTH_ROTATION_RATE, SPEED_OF_LIGHT};
use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObsError {
    #[error(transparent)]
    Geometry(#[from] GeoError),
    #[error("sigma must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("elevation must be in (0, pi/2], got {0} rad")]
    InvalidElevation(f64),
    #[error("need at least {needed} usable observations, got {got}")]
    TooFewObservations { needed: usize, got: usize },
    #[error("rank-deficient geometry")]
    RankDeficient,
    #[error("timestamps must increase (t0 = {t0}, t1 = {t1})")]
    NonIncreasingTime { t0: f64, t1: f64 },
}

/// Constellation tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GnssSystem {
    Gps,
    BeiDou,
}

impl fmt::Display for GnssSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GnssSystem::Gps => "GPS",
            GnssSystem::BeiDou => "BDS",
        })
    }
}

impl FromStr for GnssSystem {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "GPS" => Ok(GnssSystem::Gps),
            "BDS" => Ok(GnssSystem::BeiDou),
            other => Err(format!("unknown system tag '{other}' (expected GPS or BDS)")),
        }
    }
}

/// Ground-truth propagation label, used only for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SignalLabel {
    Los,
    Nlos,
    Multipath,
    Unknown,
}

impl SignalLabel {
    pub fn is_outlier(self) -> bool {
        matches!(self, SignalLabel::Nlos | SignalLabel::Multipath)
    }
}

impl fmt::Display for SignalLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SignalLabel::Los => "LOS",
            SignalLabel::Nlos => "NLOS",
            SignalLabel::Multipath => "MP",
            SignalLabel::Unknown => "UNK",
        })
    }
}

impl FromStr for SignalLabel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "LOS" => Ok(SignalLabel::Los),
            "NLOS" => Ok(SignalLabel::Nlos),
            "MP" => Ok(SignalLabel::Multipath),
            "UNK" => Ok(SignalLabel::Unknown),
            other => Err(format!("unknown label '{other}' (expected LOS, NLOS, MP or UNK)")),
        }
    }
}

/// One satellite's measurements at one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct SatelliteObservation {
    pub t: f64,
    pub sat_id: u32,
    pub system: GnssSystem,
    pub sat_pos: EcefPoint,
    pub sat_vel: EcefVelocity,
    /// Corrected pseudorange (m).
    pub pseudorange: f64,
    /// Doppler (Hz).
    pub doppler: f64,
    /// Carrier wavelength (m).
    pub wavelength: f64,
    /// Carrier-to-noise density (dB-Hz).
    pub cn0: f64,
    pub label: SignalLabel,
}

impl SatelliteObservation {
    /// Range-rate observable `λ·d` (m/s).
    pub fn range_rate(&self) -> f64 {
        self.wavelength * self.doppler
    }
}

/// Observations sharing one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochObservations {
    pub t: f64,
    pub observations: Vec<SatelliteObservation>,
}

/// Receiver state at one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochState {
    pub t: f64,
    pub pos: EcefPoint,
    pub vel: EcefVelocity,
    /// Receiver clock bias (m).
    pub clk_bias: f64,
    /// Receiver clock drift (m/s).
    pub clk_drift: f64,
}

impl EpochState {
    pub fn at(t: f64, pos: EcefPoint, clk_bias: f64) -> Self {
        Self { t, pos, vel: Vector3::zeros(), clk_bias, clk_drift: 0.0 }
    }
}

/// Elevation / C/N0 sigma model parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaModelConfig {
    /// Zenith, high-C/N0 sigma (m).
    pub sigma0: f64,
    /// C/N0 at and above which no inflation applies (dB-Hz).
    pub snr_threshold: f64,
    /// C/N0 scale of the exponential inflation (dB-Hz).
    pub snr_scale: f64,
}

impl Default for SigmaModelConfig {
    fn default() -> Self {
        Self { sigma0: 1.0, snr_threshold: 45.0, snr_scale: 30.0 }
    }
}

/// Pseudorange sigma from elevation and C/N0:
/// `σ² = σ0² / sin²(el) · 10^((S1 - min(cn0, S1)) / A)`.
pub fn measurement_sigma(elevation: f64, cn0: f64, cfg: &SigmaModelConfig) -> Result<f64, ObsError> {
    if !(elevation > 0.0 && elevation <= std::f64::consts::FRAC_PI_2 + 1e-12) {
        return Err(ObsError::InvalidElevation(elevation));
    }
    let s = elevation.sin();
    let inflation = 10f64.powf((cfg.snr_threshold - cn0.min(cfg.snr_threshold)) / cfg.snr_scale);
    let var = cfg.sigma0 * cfg.sigma0 / (s * s) * inflation;
    Ok(var.sqrt())
}

/// Predicted pseudorange `‖p_s - p_r‖ + δ`.
pub fn pseudorange_predict(state: &EpochState, sat_pos: &EcefPoint) -> Result<f64, ObsError> {
    let d = sat_pos - state.pos;
    let range = d.norm();
    if range == 0.0 {
        return Err(GeoError::CoincidentPoints.into());
    }
    Ok(range + state.clk_bias)
}

/// Whitened pseudorange residual with its Jacobian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudorangeResidual {
    /// `(ρ - h) / σ`
    pub residual: f64,
    /// ∂residual/∂position
    pub d_pos: Vector3<f64>,
    /// ∂residual/∂clock bias
    pub d_clk: f64,
}

pub fn pseudorange_residual(
    obs: &SatelliteObservation,
    state: &EpochState,
    sigma: f64,
) -> Result<PseudorangeResidual, ObsError> {
    if !(sigma > 0.0) {
        return Err(ObsError::NonPositiveSigma(sigma));
    }
    let predicted = pseudorange_predict(state, &obs.sat_pos)?;
    let los = geo::los_unit_vector(&obs.sat_pos, &state.pos)?;
    Ok(PseudorangeResidual {
        residual: (obs.pseudorange - predicted) / sigma,
        d_pos: los / sigma,
        d_clk: -1.0 / sigma,
    })
}

/// Expected range rate including the earth-rotation correction.
pub fn range_rate_expected(
    state: &EpochState,
    sat_pos: &EcefPoint,
    sat_vel: &EcefVelocity,
) -> Result<f64, ObsError> {
    let los = geo::los_unit_vector(sat_pos, &state.pos)?;
    let (p, v) = (&state.pos, &state.vel);
    let sagnac = EARTH_ROTATION_RATE / SPEED_OF_LIGHT
        * (sat_vel.y * p.x + sat_pos.y * v.x - sat_pos.x * v.y - sat_vel.x * p.y);
    Ok(los.dot(&(sat_vel - v)) + sagnac)
}

/// Partial derivatives of [`range_rate_expected`] w.r.t. receiver position and velocity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeRateJacobian {
    pub d_pos: Vector3<f64>,
    pub d_vel: Vector3<f64>,
}

pub fn range_rate_jacobian(
    state: &EpochState,
    sat_pos: &EcefPoint,
    sat_vel: &EcefVelocity,
) -> Result<RangeRateJacobian, ObsError> {
    let d = sat_pos - state.pos;
    let range = d.norm();
    if range == 0.0 {
        return Err(GeoError::CoincidentPoints.into());
    }
    let los = d / range;
    let rel = sat_vel - state.vel;
    let k = EARTH_ROTATION_RATE / SPEED_OF_LIGHT;
    // d(los)/d(p_r) = -(I - los losᵀ) / range
    let d_pos = -(rel - los * los.dot(&rel)) / range + k * Vector3::new(sat_vel.y, -sat_vel.x, 0.0);
    let d_vel = -los + k * Vector3::new(sat_pos.y, -sat_pos.x, 0.0);
    Ok(RangeRateJacobian { d_pos, d_vel })
}

/// Snapshot Doppler velocity solution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DopplerVelocity {
    pub vel: EcefVelocity,
    /// Receiver clock drift (m/s).
    pub clk_drift: f64,
    pub iterations: usize,
}

const VELOCITY_TOL: f64 = 1e-6;
const VELOCITY_MAX_ITER: usize = 10;
const RANK_TOL: f64 = 1e-10;

/// Least-squares receiver velocity and clock drift from one epoch of Doppler.
///
/// Linearizes `λd = rr(v) + δ̇` at the current estimate and iterates until the
/// velocity update is below 1e-6 m/s.
pub fn doppler_wls_velocity(
    observations: &[SatelliteObservation],
    pos_estimate: &EcefPoint,
) -> Result<DopplerVelocity, ObsError> {
    let usable: Vec<&SatelliteObservation> = observations
        .iter()
        .filter(|o| o.doppler.is_finite() && o.wavelength > 0.0)
        .collect();
    if usable.len() < 4 {
        return Err(ObsError::TooFewObservations { needed: 4, got: usable.len() });
    }
    let mut state = EpochState::at(0.0, *pos_estimate, 0.0);
    for iter in 1..=VELOCITY_MAX_ITER {
        let mut normal = Matrix4::<f64>::zeros();
        let mut rhs = Vector4::<f64>::zeros();
        let mut rows = Vec::with_capacity(usable.len());
        for o in &usable {
            let rr = range_rate_expected(&state, &o.sat_pos, &o.sat_vel)?;
            let jac = range_rate_jacobian(&state, &o.sat_pos, &o.sat_vel)?;
            let h = Vector4::new(jac.d_vel.x, jac.d_vel.y, jac.d_vel.z, 1.0);
            let innovation = o.range_rate() - rr - state.clk_drift;
            normal += h * h.transpose();
            rhs += h * innovation;
            rows.push(h);
        }
        check_rank(&rows)?;
        let delta = normal.cholesky().ok_or(ObsError::RankDeficient)?.solve(&rhs);
        state.vel += delta.fixed_rows::<3>(0);
        state.clk_drift += delta[3];
        if delta.fixed_rows::<3>(0).norm() < VELOCITY_TOL {
            return Ok(DopplerVelocity { vel: state.vel, clk_drift: state.clk_drift, iterations: iter });
        }
    }
    Ok(DopplerVelocity { vel: state.vel, clk_drift: state.clk_drift, iterations: VELOCITY_MAX_ITER })
}

/// Rejects design matrices whose singular-value spread exceeds `1/RANK_TOL`.
pub(crate) fn check_rank(rows: &[Vector4<f64>]) -> Result<(), ObsError> {
    let m = nalgebra::DMatrix::from_fn(rows.len(), 4, |i, j| rows[i][j]);
    let sv = m.singular_values();
    let max = sv.max();
    let min = sv.min();
    if !(max > 0.0) || min <= RANK_TOL * max {
        return Err(ObsError::RankDeficient);
    }
    Ok(())
}

/// Whitened inter-epoch velocity residual and its Jacobians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VelocityFactorResidual {
    /// `(v_meas - (p1 - p0)/Δt) / σ` per axis
    pub residual: Vector3<f64>,
    /// ∂residual/∂p0
    pub d_pos0: Matrix3<f64>,
    /// ∂residual/∂p1
    pub d_pos1: Matrix3<f64>,
}

pub fn doppler_velocity_residual(
    v_meas: &EcefVelocity,
    sigma: &Vector3<f64>,
    state_t: &EpochState,
    state_t1: &EpochState,
) -> Result<VelocityFactorResidual, ObsError> {
    let dt = state_t1.t - state_t.t;
    if !(dt > 0.0) {
        return Err(ObsError::NonIncreasingTime { t0: state_t.t, t1: state_t1.t });
    }
    if let Some(s) = sigma.iter().find(|s| !(**s > 0.0)) {
        return Err(ObsError::NonPositiveSigma(*s));
    }
    let predicted = (state_t1.pos - state_t.pos) / dt;
    let residual = (v_meas - predicted).component_div(sigma);
    let scale = Matrix3::from_diagonal(&sigma.map(|s| 1.0 / (dt * s)));
    Ok(VelocityFactorResidual { residual, d_pos0: scale, d_pos1: -scale })
}

/// Result of elevation/C/N0 screening.
#[derive(Debug, Clone, PartialEq)]
pub struct Screened {
    pub kept: Vec<SatelliteObservation>,
    pub removed: usize,
}

/// Keeps observations with elevation above `min_elevation` and C/N0 above
/// `min_cn0`, preserving order. Satellites whose elevation cannot be computed
/// (coincident with the receiver) are dropped.
pub fn filter_observations(
    observations: &[SatelliteObservation],
    rcv: &EcefPoint,
    min_elevation: f64,
    min_cn0: f64,
) -> Screened {
    let kept: Vec<SatelliteObservation> = observations
        .iter()
        .filter(|o| {
            o.cn0 > min_cn0
                && geo::elevation_azimuth(&o.sat_pos, rcv)
                    .map(|(el, _)| el > min_elevation)
                    .unwrap_or(false)
        })
        .cloned()
        .collect();
    Screened { removed: observations.len() - kept.len(), kept }
}
