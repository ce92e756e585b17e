use crate::control::Landmarks;
use crate::error::Result;
use crate::numerics::Tensor;

/// Convex hull of the landmarks, filled at pixel centers and dilated by a
/// `(2·dilation + 1)²` square. Values are exactly 0 or 1.
///
/// Every landmark set produced by the renderer spans the eyes, brows, nose
/// and mouth, so the hull always encloses facial pixels.
pub fn face_mask(lm: &Landmarks, height: usize, width: usize, dilation: usize) -> Result<Tensor> {
    lm.validate(height, width)?;
    let pts: Vec<[f64; 2]> = lm.iter().map(|(_, p)| p).collect();
    let hull = convex_hull(&pts);
    let mut m = vec![0.0; height * width];
    for y in 0..height {
        for x in 0..width {
            if inside_hull(&hull, [x as f64 + 0.5, y as f64 + 0.5]) {
                m[y * width + x] = 1.0;
            }
        }
    }
    let m = dilate(&m, height, width, dilation);
    Tensor::new(&[height, width], m)
}

/// Andrew's monotone chain, counter-clockwise in a y-down frame.
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut p = points.to_vec();
    p.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    p.dedup();
    if p.len() < 3 {
        return p;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * p.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 {
            Box::new(p.iter())
        } else {
            Box::new(p.iter().rev())
        };
        for &q in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], q) <= 0.0 {
                hull.pop();
            }
            hull.push(q);
        }
        hull.pop();
    }
    hull
}

fn inside_hull(hull: &[[f64; 2]], q: [f64; 2]) -> bool {
    match hull.len() {
        0 => false,
        1 => hull[0] == q,
        2 => {
            let (a, b) = (hull[0], hull[1]);
            let cr = (b[0] - a[0]) * (q[1] - a[1]) - (b[1] - a[1]) * (q[0] - a[0]);
            let dot = (q[0] - a[0]) * (b[0] - a[0]) + (q[1] - a[1]) * (b[1] - a[1]);
            let len2 = (b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2);
            cr.abs() < 1e-9 && (0.0..=len2).contains(&dot)
        }
        n => (0..n).all(|i| {
            let (a, b) = (hull[i], hull[(i + 1) % n]);
            (b[0] - a[0]) * (q[1] - a[1]) - (b[1] - a[1]) * (q[0] - a[0]) >= -1e-9
        }),
    }
}

/// Square (chessboard) dilation of a binary plane.
pub fn dilate(m: &[f64], height: usize, width: usize, r: usize) -> Vec<f64> {
    if r == 0 {
        return m.to_vec();
    }
    let mut rows = vec![0.0; m.len()];
    for y in 0..height {
        for x in 0..width {
            let (lo, hi) = (x.saturating_sub(r), (x + r).min(width - 1));
            rows[y * width + x] = (lo..=hi).map(|xx| m[y * width + xx]).fold(0.0, f64::max);
        }
    }
    let mut out = vec![0.0; m.len()];
    for y in 0..height {
        let (lo, hi) = (y.saturating_sub(r), (y + r).min(height - 1));
        for x in 0..width {
            out[y * width + x] = (lo..=hi).map(|yy| rows[yy * width + x]).fold(0.0, f64::max);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::faceworld::{render_face, FaceParams, EYES, MOUTH, NOSE};
    use crate::numerics::Rng;

    #[test]
    fn dilation_is_monotone() {
        let mut rng = Rng::new(1);
        for _ in 0..5 {
            let r = render_face(&FaceParams::random(&mut rng), 64).unwrap();
            let m0 = face_mask(&r.landmarks, 64, 64, 0).unwrap();
            let m3 = face_mask(&r.landmarks, 64, 64, 3).unwrap();
            assert!(m0.data().iter().zip(m3.data()).all(|(a, b)| a <= b));
            assert!(m3.sum() > m0.sum());
            assert!(m0.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn mask_covers_inner_features() {
        let mut rng = Rng::new(21);
        for _ in 0..30 {
            let r = render_face(&FaceParams::random(&mut rng), 64).unwrap();
            let m = face_mask(&r.landmarks, 64, 64, 2).unwrap();
            for (i, &c) in r.parse.argmax().iter().enumerate() {
                if [EYES, NOSE, MOUTH].contains(&c) {
                    assert_eq!(m.data()[i], 1.0, "class {c} pixel {i} outside mask");
                }
            }
        }
    }

    #[test]
    fn empty_landmarks_are_rejected() {
        assert!(face_mask(&Landmarks::new(), 64, 64, 2).is_err());
    }

    #[test]
    fn hull_of_square_with_interior_point() {
        let h = convex_hull(&[[0.0, 0.0], [2.0, 0.0], [1.0, 1.0], [2.0, 2.0], [0.0, 2.0]]);
        assert_eq!(h.len(), 4);
        assert!(inside_hull(&h, [1.0, 1.5]));
        assert!(!inside_hull(&h, [2.5, 1.0]));
    }
}
