use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

pub const IDENTITY_DIM: usize = 8;
pub const EXPRESSION_DIM: usize = 4;
pub const POSE_DIM: usize = 2;
pub const PARAM_DIM: usize = IDENTITY_DIM + EXPRESSION_DIM + POSE_DIM;
pub const POSE_LIMIT: f64 = 0.3;

pub const IDENTITY_NAMES: [&str; IDENTITY_DIM] = [
    "skin_tone",
    "face_width",
    "face_height",
    "eye_spacing",
    "eye_size",
    "nose_length",
    "brow_thickness",
    "mouth_width",
];
pub const EXPRESSION_NAMES: [&str; EXPRESSION_DIM] = ["mouth_curve", "mouth_open", "brow_raise", "eye_openness"];
pub const POSE_NAMES: [&str; POSE_DIM] = ["shear", "tilt"];

/// Ground-truth generative parameters of a synthetic face.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaceParams {
    /// Each in [−1, 1].
    pub identity: [f64; IDENTITY_DIM],
    /// Each in [−1, 1].
    pub expression: [f64; EXPRESSION_DIM],
    /// Each in [−0.3, 0.3].
    pub pose: [f64; POSE_DIM],
}

impl FaceParams {
    /// The parameter-space center: every component zero.
    pub fn center() -> Self {
        Self::default()
    }

    pub fn random(rng: &mut Rng) -> Self {
        let mut p = Self::default();
        for v in &mut p.identity {
            *v = rng.uniform_range(-1.0, 1.0);
        }
        p.randomize_expression(rng);
        p.randomize_pose(rng);
        p
    }

    pub fn randomize_expression(&mut self, rng: &mut Rng) {
        for v in &mut self.expression {
            *v = rng.uniform_range(-1.0, 1.0);
        }
    }

    pub fn randomize_pose(&mut self, rng: &mut Rng) {
        for v in &mut self.pose {
            *v = rng.uniform_range(-POSE_LIMIT, POSE_LIMIT);
        }
    }

    /// Flat layout: identity, expression, pose.
    pub fn to_vec(&self) -> [f64; PARAM_DIM] {
        let mut out = [0.0; PARAM_DIM];
        out[..IDENTITY_DIM].copy_from_slice(&self.identity);
        out[IDENTITY_DIM..IDENTITY_DIM + EXPRESSION_DIM].copy_from_slice(&self.expression);
        out[IDENTITY_DIM + EXPRESSION_DIM..].copy_from_slice(&self.pose);
        out
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != PARAM_DIM {
            return Err(Error::dim("FaceParams::from_slice", &[v.len()], &[PARAM_DIM]));
        }
        let mut p = Self::default();
        p.identity.copy_from_slice(&v[..IDENTITY_DIM]);
        p.expression.copy_from_slice(&v[IDENTITY_DIM..IDENTITY_DIM + EXPRESSION_DIM]);
        p.pose.copy_from_slice(&v[IDENTITY_DIM + EXPRESSION_DIM..]);
        Ok(p)
    }

    /// Inclusive bound of flat component `i`.
    pub fn limit(i: usize) -> f64 {
        if i < IDENTITY_DIM + EXPRESSION_DIM {
            1.0
        } else {
            POSE_LIMIT
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, v) in self.to_vec().iter().enumerate() {
            let lim = Self::limit(i);
            if !(v.is_finite() && v.abs() <= lim) {
                return Err(Error::contract(format!(
                    "face parameter {} = {v} outside [-{lim}, {lim}]",
                    Self::component_name(i)
                )));
            }
        }
        Ok(())
    }

    pub fn component_name(i: usize) -> &'static str {
        IDENTITY_NAMES
            .iter()
            .chain(&EXPRESSION_NAMES)
            .chain(&POSE_NAMES)
            .copied()
            .nth(i)
            .unwrap_or("?")
    }
}
