//! Range-only extended Kalman filter over the 2D position.
//!
//! Motion is driven by the measured velocity; velocity noise enters through
//! `sigma_gamma` scaled by the sampling time and `sigma_q` adds model noise.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use super::LocalizeError;
use crate::model::{distance, is_symmetric_psd, Position2D, Velocity2D};
use crate::policy::Candidate;

const PSD_TOLERANCE: f64 = 1e-9;
const COINCIDENT: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EkfParams {
    pub sigma_q: f64,
    pub sigma_gamma: f64,
    /// Ranging noise standard deviation used in `R`.
    pub sigma_r: f64,
    pub t_s: f64,
}

impl Default for EkfParams {
    fn default() -> Self {
        Self {
            sigma_q: 2.0,
            sigma_gamma: 0.5,
            sigma_r: 0.2,
            t_s: 1.0,
        }
    }
}

impl EkfParams {
    /// Per-axis variance added by one prediction step.
    pub fn process_variance(&self) -> f64 {
        self.sigma_q * self.sigma_q + self.t_s * self.t_s * self.sigma_gamma * self.sigma_gamma
    }
}

pub fn ekf_predict(
    state: Position2D,
    p: &Matrix2<f64>,
    v: Velocity2D,
    params: &EkfParams,
) -> Result<(Position2D, Matrix2<f64>), LocalizeError> {
    if !is_symmetric_psd(p, PSD_TOLERANCE) {
        return Err(LocalizeError::NotPsd);
    }
    let next = state + v.displacement(params.t_s);
    Ok((next, p + Matrix2::identity() * params.process_variance()))
}

/// Joint update with the ranges of all selected candidates, whose broadcast
/// positions are taken as exact. Measurements from candidates coincident with
/// the state carry no bearing and are skipped.
pub fn ekf_update(
    state: Position2D,
    p: &Matrix2<f64>,
    selected: &[Candidate],
    params: &EkfParams,
) -> Result<(Position2D, Matrix2<f64>), LocalizeError> {
    ekf_update_shared(state, p, selected, &vec![Matrix2::zeros(); selected.len()], params)
}

/// Like [`ekf_update`], with `shared_cov[j]` the covariance of the position
/// broadcast by `selected[j]`. Its projection on the line of sight is added
/// to that range's measurement variance.
pub fn ekf_update_shared(
    state: Position2D,
    p: &Matrix2<f64>,
    selected: &[Candidate],
    shared_cov: &[Matrix2<f64>],
    params: &EkfParams,
) -> Result<(Position2D, Matrix2<f64>), LocalizeError> {
    if !is_symmetric_psd(p, PSD_TOLERANCE) {
        return Err(LocalizeError::NotPsd);
    }
    if shared_cov.len() != selected.len() {
        return Err(LocalizeError::LengthMismatch {
            anchors: selected.len(),
            ranges: shared_cov.len(),
        });
    }
    let usable: Vec<(&Candidate, &Matrix2<f64>)> = selected
        .iter()
        .zip(shared_cov)
        .filter(|(c, _)| distance(state, c.shared_position) >= COINCIDENT)
        .collect();
    if usable.is_empty() {
        return Ok((state, *p));
    }

    let m = usable.len();
    let mut h = DMatrix::<f64>::zeros(m, 2);
    let mut innovation = DVector::<f64>::zeros(m);
    let mut r = DMatrix::<f64>::zeros(m, m);
    for (row, (c, cov)) in usable.iter().enumerate() {
        let d = state - c.shared_position;
        let predicted = d.norm();
        let u = Vector2::new(d.x / predicted, d.y / predicted);
        h[(row, 0)] = u.x;
        h[(row, 1)] = u.y;
        innovation[row] = c.range.measured_distance - predicted;
        r[(row, row)] = params.sigma_r * params.sigma_r + (u.transpose() * *cov * u)[0].max(0.0);
    }
    let p_dyn = DMatrix::from_column_slice(2, 2, p.as_slice());
    let s = &h * &p_dyn * h.transpose() + &r;
    let Some(s_inv) = s.try_inverse() else {
        return Ok((state, *p));
    };
    let k = &p_dyn * h.transpose() * s_inv;
    let dx = &k * innovation;
    let i_kh = DMatrix::<f64>::identity(2, 2) - &k * &h;
    // Joseph form keeps the covariance positive semidefinite
    let joseph = &i_kh * &p_dyn * i_kh.transpose() + &k * r * k.transpose();
    let p_new = Matrix2::new(joseph[(0, 0)], joseph[(0, 1)], joseph[(1, 0)], joseph[(1, 1)]);
    let p_sym = (p_new + p_new.transpose()) * 0.5;
    Ok((state + Position2D::new(dx[0], dx[1]), p_sym))
}
