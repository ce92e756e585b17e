//! Landmark annotation sprites: discs at point features, strokes for brows
//! and the lip outline.

use crate::error::Result;
use crate::numerics::Tensor;

use super::landmarks::Landmarks;
use super::map::{ConditionKind, ConditionMap, DEFAULT_ANNOTATION_WEIGHT};

/// Disc radius and stroke half-width at 64 px; both scale with image width.
const DISC_RADIUS: f64 = 1.6;
const STROKE_HALF: f64 = 0.8;

const DISCS: [&str; 5] = ["left_eye", "right_eye", "nose_tip", "mouth_left", "mouth_right"];
const STROKES: [(&str, &str); 6] = [
    ("left_brow_outer", "left_brow_inner"),
    ("right_brow_inner", "right_brow_outer"),
    ("mouth_left", "lip_top"),
    ("lip_top", "mouth_right"),
    ("mouth_right", "lip_bottom"),
    ("lip_bottom", "mouth_left"),
];

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let s = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p[0] - a[0] - s * dx).hypot(p[1] - a[1] - s * dy)
}

/// Binary `[height, width]` sprite map. Primitives whose landmarks are absent
/// are skipped.
pub fn annotation_map(lm: &Landmarks, height: usize, width: usize) -> Result<Tensor> {
    lm.validate(height, width)?;
    let scale = width as f64 / 64.0;
    let (r, half) = (DISC_RADIUS * scale, STROKE_HALF * scale);
    let discs: Vec<[f64; 2]> = DISCS.iter().filter_map(|n| lm.get(n)).collect();
    let strokes: Vec<([f64; 2], [f64; 2])> = STROKES
        .iter()
        .filter_map(|(a, b)| Some((lm.get(a)?, lm.get(b)?)))
        .collect();
    Ok(Tensor::from_fn(&[height, width], |i| {
        let p = [(i % width) as f64 + 0.5, (i / width) as f64 + 0.5];
        let hit = discs.iter().any(|c| (p[0] - c[0]).hypot(p[1] - c[1]) <= r)
            || strokes.iter().any(|(a, b)| segment_distance(p, *a, *b) <= half);
        if hit { 1.0 } else { 0.0 }
    }))
}

pub fn render_annotation(lm: &Landmarks, height: usize, width: usize) -> Result<ConditionMap> {
    ConditionMap::new(ConditionKind::Annotation, annotation_map(lm, height, width)?, DEFAULT_ANNOTATION_WEIGHT)
}
