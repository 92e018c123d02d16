//! Reference estimators: snapshot weighted least squares and an extended
//! Kalman filter over pseudorange and Doppler.

use crate::geo::{self, EcefPoint, GeoError, WGS84_A};
use crate::obs_model::{
    self, measurement_sigma, range_rate_expected, range_rate_jacobian, EpochObservations, EpochState, ObsError,
    SatelliteObservation, SigmaModelConfig,
};
use nalgebra::{Matrix4, SMatrix, SVector, Vector3, Vector4};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error("need at least 4 satellites, got {0}")]
    TooFewSatellites(usize),
    #[error("singular satellite geometry")]
    SingularGeometry,
    #[error("least squares did not converge in {0} iterations")]
    NotConverged(usize),
    #[error(transparent)]
    Observation(#[from] ObsError),
    #[error(transparent)]
    Geometry(#[from] GeoError),
    #[error("filter initialization failed: {0}")]
    Initialization(String),
    #[error("filter diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("no epochs")]
    Empty,
}

const WLS_TOL: f64 = 1e-4;
const WLS_MAX_ITER: usize = 10;

/// Snapshot position fix.
#[derive(Debug, Clone, PartialEq)]
pub struct WlsFix {
    pub pos: EcefPoint,
    pub clk_bias: f64,
    /// Covariance of `[x, y, z, clk_bias]`.
    pub covariance: Matrix4<f64>,
    /// Per-observation sigma used in the final pass.
    pub sigmas: Vec<f64>,
    pub iterations: usize,
}

impl WlsFix {
    /// Weighted sum of squared residuals at the fix.
    pub fn cost(&self, observations: &[SatelliteObservation]) -> f64 {
        observations
            .iter()
            .zip(&self.sigmas)
            .map(|(o, s)| {
                let r = (o.pseudorange - (o.sat_pos - self.pos).norm() - self.clk_bias) / s;
                r * r
            })
            .sum()
    }
}

/// Iterated linearized least squares with fixed per-observation sigmas.
pub fn wls_position_with_sigmas(
    observations: &[SatelliteObservation],
    sigmas: &[f64],
    start: EcefPoint,
    start_clk: f64,
) -> Result<WlsFix, BaselineError> {
    assert_eq!(observations.len(), sigmas.len(), "one sigma per observation");
    if observations.len() < 4 {
        return Err(BaselineError::TooFewSatellites(observations.len()));
    }
    let mut pos = start;
    let mut clk = start_clk;
    for iter in 1..=WLS_MAX_ITER {
        let mut normal = Matrix4::<f64>::zeros();
        let mut rhs = Vector4::<f64>::zeros();
        let mut rows = Vec::with_capacity(observations.len());
        for (o, &sigma) in observations.iter().zip(sigmas) {
            if !(sigma > 0.0) {
                return Err(ObsError::NonPositiveSigma(sigma).into());
            }
            let los = geo::los_unit_vector(&o.sat_pos, &pos)?;
            let range = (o.sat_pos - pos).norm();
            // derivative of the prediction w.r.t. [pos, clk]
            let h = Vector4::new(-los.x, -los.y, -los.z, 1.0) / sigma;
            let innovation = (o.pseudorange - range - clk) / sigma;
            normal += h * h.transpose();
            rhs += h * innovation;
            rows.push(h);
        }
        obs_model::check_rank(&rows).map_err(|_| BaselineError::SingularGeometry)?;
        let chol = normal.cholesky().ok_or(BaselineError::SingularGeometry)?;
        let delta = chol.solve(&rhs);
        pos += delta.fixed_rows::<3>(0);
        clk += delta[3];
        if !pos.iter().all(|v| v.is_finite()) {
            return Err(BaselineError::SingularGeometry);
        }
        if delta.fixed_rows::<3>(0).norm() < WLS_TOL {
            return Ok(WlsFix { pos, clk_bias: clk, covariance: chol.inverse(), sigmas: sigmas.to_vec(), iterations: iter });
        }
    }
    Err(BaselineError::NotConverged(WLS_MAX_ITER))
}

/// Snapshot WLS fix with elevation/C/N0 weights.
///
/// Runs an equal-weight pass first (elevations are meaningless far from the
/// solution), then recomputes sigmas at that fix and iterates the weighted
/// problem from there. Starts from `start` or `(0, 0, a)` when none is given.
pub fn wls_position(
    observations: &[SatelliteObservation],
    sigma_cfg: &SigmaModelConfig,
    start: Option<EcefPoint>,
) -> Result<WlsFix, BaselineError> {
    if observations.len() < 4 {
        return Err(BaselineError::TooFewSatellites(observations.len()));
    }
    let start = start.unwrap_or_else(|| Vector3::new(0.0, 0.0, WGS84_A));
    let unit = vec![1.0; observations.len()];
    let coarse = wls_position_with_sigmas(observations, &unit, start, 0.0)?;
    let sigmas = observation_sigmas(observations, &coarse.pos, sigma_cfg)?;
    let mut fix = wls_position_with_sigmas(observations, &sigmas, coarse.pos, coarse.clk_bias)?;
    fix.iterations += coarse.iterations;
    Ok(fix)
}

/// Sigma of each observation seen from `rcv`.
pub fn observation_sigmas(
    observations: &[SatelliteObservation],
    rcv: &EcefPoint,
    sigma_cfg: &SigmaModelConfig,
) -> Result<Vec<f64>, BaselineError> {
    observations
        .iter()
        .map(|o| {
            let (el, _) = geo::elevation_azimuth(&o.sat_pos, rcv)?;
            Ok(measurement_sigma(el, o.cn0, sigma_cfg)?)
        })
        .collect()
}

/// Per-epoch WLS positions with Doppler velocities, the method-1 baseline.
///
/// Epochs whose fix fails are reported as errors; use the graph initializer for
/// a gap-filling sequence.
pub fn wls_run(epochs: &[EpochObservations], sigma_cfg: &SigmaModelConfig) -> Result<Vec<EpochState>, BaselineError> {
    let mut out = Vec::with_capacity(epochs.len());
    let mut prev: Option<EcefPoint> = None;
    for epoch in epochs {
        let fix = wls_position(&epoch.observations, sigma_cfg, prev)?;
        let (vel, drift) = match obs_model::doppler_wls_velocity(&epoch.observations, &fix.pos) {
            Ok(v) => (v.vel, v.clk_drift),
            Err(_) => (Vector3::zeros(), 0.0),
        };
        prev = Some(fix.pos);
        out.push(EpochState { t: epoch.t, pos: fix.pos, vel, clk_bias: fix.clk_bias, clk_drift: drift });
    }
    Ok(out)
}

/// EKF tuning.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EkfConfig {
    /// White acceleration PSD per axis (m²/s³).
    pub accel_psd: f64,
    /// Clock bias random-walk PSD (m²/s).
    pub clk_bias_psd: f64,
    /// Clock drift random-walk PSD (m²/s³).
    pub clk_drift_psd: f64,
    /// Initial standard deviations for position, velocity, clock bias, clock drift.
    pub init_pos_std: f64,
    pub init_vel_std: f64,
    pub init_clk_std: f64,
    pub init_drift_std: f64,
    /// Range-rate measurement sigma (m/s).
    pub range_rate_sigma: f64,
    /// Innovation gate in sigma multiples; infinite disables gating.
    pub gate: f64,
}

impl Default for EkfConfig {
    fn default() -> Self {
        Self {
            accel_psd: 1.0,
            clk_bias_psd: 1.0,
            clk_drift_psd: 0.1,
            init_pos_std: 10.0,
            init_vel_std: 1.0,
            init_clk_std: 10.0,
            init_drift_std: 1.0,
            range_rate_sigma: 0.1,
            gate: f64::INFINITY,
        }
    }
}

type State8 = SVector<f64, 8>;
type Cov8 = SMatrix<f64, 8, 8>;

/// Output of [`ekf_run`]: states and the covariance after each update.
#[derive(Debug, Clone)]
pub struct EkfOutput {
    pub states: Vec<EpochState>,
    pub covariances: Vec<Cov8>,
}

fn to_epoch_state(t: f64, x: &State8) -> EpochState {
    EpochState {
        t,
        pos: Vector3::new(x[0], x[1], x[2]),
        vel: Vector3::new(x[3], x[4], x[5]),
        clk_bias: x[6],
        clk_drift: x[7],
    }
}

fn transition(dt: f64) -> Cov8 {
    let mut f = Cov8::identity();
    for i in 0..3 {
        f[(i, i + 3)] = dt;
    }
    f[(6, 7)] = dt;
    f
}

fn process_noise(dt: f64, cfg: &EkfConfig) -> Cov8 {
    let mut q = Cov8::zeros();
    let (dt2, dt3) = (dt * dt, dt * dt * dt);
    for i in 0..3 {
        q[(i, i)] = cfg.accel_psd * dt3 / 3.0;
        q[(i, i + 3)] = cfg.accel_psd * dt2 / 2.0;
        q[(i + 3, i)] = cfg.accel_psd * dt2 / 2.0;
        q[(i + 3, i + 3)] = cfg.accel_psd * dt;
    }
    q[(6, 6)] = cfg.clk_bias_psd * dt + cfg.clk_drift_psd * dt3 / 3.0;
    q[(6, 7)] = cfg.clk_drift_psd * dt2 / 2.0;
    q[(7, 6)] = cfg.clk_drift_psd * dt2 / 2.0;
    q[(7, 7)] = cfg.clk_drift_psd * dt;
    q
}

/// Scalar Joseph-form update. Returns false when the gate rejects the measurement.
fn scalar_update(x: &mut State8, p: &mut Cov8, h: &State8, innovation: f64, variance: f64, gate: f64) -> bool {
    let ph = *p * h;
    let s = h.dot(&ph) + variance;
    if innovation.abs() > gate * s.sqrt() {
        return false;
    }
    let k = ph / s;
    *x += k * innovation;
    let a = Cov8::identity() - k * h.transpose();
    *p = a * *p * a.transpose() + k * k.transpose() * variance;
    *p = (*p + p.transpose()) * 0.5;
    true
}

/// Constant-velocity EKF over pseudorange and range rate.
///
/// State is `[pos, vel, clk_bias, clk_drift]`. Initialized from a WLS fix
/// (plus Doppler velocity when available) at the first epoch; each epoch then
/// applies sequential scalar updates for every pseudorange and every range rate.
pub fn ekf_run(
    epochs: &[EpochObservations],
    cfg: &EkfConfig,
    sigma_cfg: &SigmaModelConfig,
) -> Result<EkfOutput, BaselineError> {
    let first = epochs.first().ok_or(BaselineError::Empty)?;
    let fix = wls_position(&first.observations, sigma_cfg, None)
        .map_err(|e| BaselineError::Initialization(e.to_string()))?;
    let (vel, drift) = obs_model::doppler_wls_velocity(&first.observations, &fix.pos)
        .map(|v| (v.vel, v.clk_drift))
        .unwrap_or((Vector3::zeros(), 0.0));

    let mut x = State8::zeros();
    x.fixed_rows_mut::<3>(0).copy_from(&fix.pos);
    x.fixed_rows_mut::<3>(3).copy_from(&vel);
    x[6] = fix.clk_bias;
    x[7] = drift;
    let mut p = Cov8::zeros();
    for i in 0..3 {
        p[(i, i)] = cfg.init_pos_std.powi(2);
        p[(i + 3, i + 3)] = cfg.init_vel_std.powi(2);
    }
    p[(6, 6)] = cfg.init_clk_std.powi(2);
    p[(7, 7)] = cfg.init_drift_std.powi(2);

    let mut states = Vec::with_capacity(epochs.len());
    let mut covariances = Vec::with_capacity(epochs.len());
    let mut t_prev = first.t;
    for (k, epoch) in epochs.iter().enumerate() {
        let dt = epoch.t - t_prev;
        if dt > 0.0 {
            let f = transition(dt);
            x = f * x;
            p = f * p * f.transpose() + process_noise(dt, cfg);
        }
        t_prev = epoch.t;

        for o in &epoch.observations {
            let pos = Vector3::new(x[0], x[1], x[2]);
            let Ok(los) = geo::los_unit_vector(&o.sat_pos, &pos) else { continue };
            let Ok((el, _)) = geo::elevation_azimuth(&o.sat_pos, &pos) else { continue };
            let Ok(sigma) = measurement_sigma(el, o.cn0, sigma_cfg) else { continue };
            let mut h = State8::zeros();
            h[0] = -los.x;
            h[1] = -los.y;
            h[2] = -los.z;
            h[6] = 1.0;
            let innovation = o.pseudorange - (o.sat_pos - pos).norm() - x[6];
            scalar_update(&mut x, &mut p, &h, innovation, sigma * sigma, cfg.gate);
        }
        for o in &epoch.observations {
            if !o.doppler.is_finite() {
                continue;
            }
            let st = to_epoch_state(epoch.t, &x);
            let (Ok(rr), Ok(jac)) =
                (range_rate_expected(&st, &o.sat_pos, &o.sat_vel), range_rate_jacobian(&st, &o.sat_pos, &o.sat_vel))
            else {
                continue;
            };
            let mut h = State8::zeros();
            h.fixed_rows_mut::<3>(0).copy_from(&jac.d_pos);
            h.fixed_rows_mut::<3>(3).copy_from(&jac.d_vel);
            h[7] = 1.0;
            let innovation = o.range_rate() - rr - x[7];
            scalar_update(&mut x, &mut p, &h, innovation, cfg.range_rate_sigma.powi(2), cfg.gate);
        }

        if !x.iter().all(|v| v.is_finite()) || !p.iter().all(|v| v.is_finite()) {
            return Err(BaselineError::Diverged { epoch: k });
        }
        states.push(to_epoch_state(epoch.t, &x));
        covariances.push(p);
    }
    Ok(EkfOutput { states, covariances })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{geodetic_to_ecef, Geodetic};
    use crate::obs_model::{GnssSystem, SignalLabel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sky(rcv: &EcefPoint, n: usize, seed: u64) -> Vec<EcefPoint> {
        let g = geo::ecef_to_geodetic(rcv).unwrap();
        let rot = geo::enu_rotation(g.lat, g.lon).transpose();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let el: f64 = (15.0 + 70.0 * i as f64 / n as f64 + rng.random_range(0.0..5.0)).to_radians();
                let az: f64 = (i as f64 * 137.5 + rng.random_range(0.0..10.0)).to_radians();
                let dir = rot * Vector3::new(el.cos() * az.sin(), el.cos() * az.cos(), el.sin());
                rcv + dir * 2.1e7
            })
            .collect()
    }

    fn make_obs(rcv: &EcefPoint, clk: f64, sats: &[EcefPoint]) -> Vec<SatelliteObservation> {
        sats.iter()
            .enumerate()
            .map(|(i, s)| SatelliteObservation {
                t: 0.0,
                sat_id: i as u32 + 1,
                system: GnssSystem::Gps,
                sat_pos: *s,
                sat_vel: Vector3::zeros(),
                pseudorange: (s - rcv).norm() + clk,
                doppler: 0.0,
                wavelength: 0.19,
                cn0: 30.0 + 2.0 * i as f64,
                label: SignalLabel::Los,
            })
            .collect()
    }

    #[test]
    fn wls_zero_noise_recovers_truth() {
        let rcv = geodetic_to_ecef(&Geodetic::from_degrees(22.3, 114.17, 20.0)).unwrap();
        let obs = make_obs(&rcv, 1234.5, &sky(&rcv, 8, 1));
        let fix = wls_position(&obs, &SigmaModelConfig::default(), None).unwrap();
        assert!((fix.pos - rcv).norm() < 1e-6, "{}", (fix.pos - rcv).norm());
        assert!((fix.clk_bias - 1234.5).abs() < 1e-6);
        assert!(fix.cost(&obs) < 1e-10);
        assert!(fix.iterations <= 2 * WLS_MAX_ITER);
    }

    #[test]
    fn wls_needs_four() {
        let rcv = geodetic_to_ecef(&Geodetic::from_degrees(22.3, 114.17, 20.0)).unwrap();
        let obs = make_obs(&rcv, 0.0, &sky(&rcv, 3, 1));
        assert_eq!(wls_position(&obs, &SigmaModelConfig::default(), None), Err(BaselineError::TooFewSatellites(3)));
    }

    #[test]
    fn wls_singular_geometry() {
        let rcv = geodetic_to_ecef(&Geodetic::from_degrees(22.3, 114.17, 20.0)).unwrap();
        let one = sky(&rcv, 1, 2)[0];
        let obs = make_obs(&rcv, 0.0, &[one; 6]);
        assert_eq!(wls_position(&obs, &SigmaModelConfig::default(), None), Err(BaselineError::SingularGeometry));
    }

    #[test]
    fn equal_sigmas_match_unweighted() {
        let rcv = geodetic_to_ecef(&Geodetic::from_degrees(-33.9, 151.2, 50.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut obs = make_obs(&rcv, -200.0, &sky(&rcv, 9, 3));
        for o in &mut obs {
            o.pseudorange += rng.random_range(-3.0..3.0);
        }
        let start = Vector3::new(0.0, 0.0, WGS84_A);
        let plain = wls_position_with_sigmas(&obs, &vec![1.0; obs.len()], start, 0.0).unwrap();
        let equal = wls_position_with_sigmas(&obs, &vec![3.7; obs.len()], start, 0.0).unwrap();
        assert!((plain.pos - equal.pos).norm() < 1e-7);
        assert!((plain.clk_bias - equal.clk_bias).abs() < 1e-7);
    }

    fn stationary_epochs(n: usize, rcv: &EcefPoint) -> Vec<EpochObservations> {
        let sats = sky(rcv, 8, 5);
        (0..n)
            .map(|k| {
                let t = k as f64;
                let mut obs = make_obs(rcv, 50.0 + 0.5 * t, &sats);
                for o in &mut obs {
                    o.t = t;
                    o.doppler = 0.5 / o.wavelength; // drift only
                }
                EpochObservations { t, observations: obs }
            })
            .collect()
    }

    #[test]
    fn ekf_stationary_zero_noise() {
        let rcv = geodetic_to_ecef(&Geodetic::from_degrees(22.3, 114.17, 20.0)).unwrap();
        let epochs = stationary_epochs(12, &rcv);
        let out = ekf_run(&epochs, &EkfConfig::default(), &SigmaModelConfig::default()).unwrap();
        for st in &out.states[10..] {
            assert!((st.pos - rcv).norm() < 1e-3);
        }
        for p in &out.covariances {
            assert!((p - p.transpose()).abs().max() < 1e-9);
            let eig = p.symmetric_eigenvalues();
            assert!(eig.min() >= -1e-9);
            assert!(p.trace().is_finite());
        }
    }

    #[test]
    fn ekf_requires_initial_fix() {
        let rcv = geodetic_to_ecef(&Geodetic::from_degrees(22.3, 114.17, 20.0)).unwrap();
        let mut epochs = stationary_epochs(3, &rcv);
        epochs[0].observations.truncate(3);
        assert!(matches!(
            ekf_run(&epochs, &EkfConfig::default(), &SigmaModelConfig::default()),
            Err(BaselineError::Initialization(_))
        ));
        assert_eq!(ekf_run(&[], &EkfConfig::default(), &SigmaModelConfig::default()).unwrap_err(), BaselineError::Empty);
    }
}
