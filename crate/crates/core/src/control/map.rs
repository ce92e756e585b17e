use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DEFAULT_CANNY_WEIGHT: f64 = 0.5;
pub const DEFAULT_ANNOTATION_WEIGHT: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditionKind {
    Canny,
    Annotation,
}

impl ConditionKind {
    pub const ALL: [ConditionKind; 2] = [ConditionKind::Canny, ConditionKind::Annotation];

    pub fn name(self) -> &'static str {
        match self {
            ConditionKind::Canny => "canny",
            ConditionKind::Annotation => "annotation",
        }
    }

    pub fn default_weight(self) -> f64 {
        match self {
            ConditionKind::Canny => DEFAULT_CANNY_WEIGHT,
            ConditionKind::Annotation => DEFAULT_ANNOTATION_WEIGHT,
        }
    }
}

/// A single-channel `[H, W]` condition image in [0, 1] with its strength.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionMap {
    pub kind: ConditionKind,
    pub map: Tensor,
    pub weight: f64,
}

impl ConditionMap {
    pub fn new(kind: ConditionKind, map: Tensor, weight: f64) -> Result<Self> {
        let c = ConditionMap { kind, map, weight };
        c.validate()?;
        Ok(c)
    }

    pub fn with_weight(mut self, weight: f64) -> Result<Self> {
        self.weight = weight;
        self.validate()?;
        Ok(self)
    }

    pub fn height(&self) -> usize {
        self.map.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.map.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.map.rank() != 2 {
            return Err(Error::dim("condition map", self.map.shape(), &[0, 0]));
        }
        if !self.map.data().iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::contract(format!("{} map has values outside [0, 1]", self.kind.name())));
        }
        if !(self.weight.is_finite() && self.weight >= 0.0) {
            return Err(Error::config(format!("{} weight must be finite and non-negative", self.kind.name())));
        }
        Ok(())
    }
}
