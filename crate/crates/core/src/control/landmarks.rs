use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Named facial points in pixel coordinates (x right, y down, pixel centers
/// at half-integers).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Landmarks {
    pub points: BTreeMap<String, [f64; 2]>,
}

impl Landmarks {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, p: [f64; 2]) {
        self.points.insert(name.to_string(), p);
    }

    pub fn get(&self, name: &str) -> Option<[f64; 2]> {
        self.points.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, [f64; 2])> {
        self.points.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Landmarks {
        Landmarks {
            points: self.points.iter().map(|(k, p)| (k.clone(), [p[0] + dx, p[1] + dy])).collect(),
        }
    }

    /// Fails unless the set is non-empty and every point lies in `[0, w] × [0, h]`.
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.is_empty() {
            return Err(Error::contract("landmark set is empty"));
        }
        for (name, [x, y]) in self.iter() {
            if !(x.is_finite() && y.is_finite() && (0.0..=w as f64).contains(&x) && (0.0..=h as f64).contains(&y)) {
                return Err(Error::contract(format!(
                    "landmark {name} at ({x:.2}, {y:.2}) outside {w}x{h} image"
                )));
            }
        }
        Ok(())
    }
}
