//! Procedural face renderer.
//!
//! Geometry is laid out in a face-local frame measured in pixels of a 64×64
//! canvas and scaled to the requested size. Pose maps local to image
//! coordinates by a horizontal shear `x' = x + k·y` followed by an in-plane
//! rotation about the face center. Every layer has a soft (sigmoid) edge, so
//! the image is a smooth function of the parameters.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::control::Landmarks;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::params::FaceParams;

pub const NUM_CLASSES: usize = 6;
pub const BACKGROUND: usize = 0;
pub const SKIN: usize = 1;
pub const EYES: usize = 2;
pub const BROWS: usize = 3;
pub const NOSE: usize = 4;
pub const MOUTH: usize = 5;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["background", "skin", "eyes", "brows", "nose", "mouth"];

const CANVAS: f64 = 64.0;
const CENTER: [f64; 2] = [32.0, 34.0];
const EDGE: f64 = 0.6;

const SKIN_LIGHT: [f64; 3] = [0.96, 0.80, 0.68];
const SKIN_DARK: [f64; 3] = [0.48, 0.32, 0.24];
const EYE_COLOR: [f64; 3] = [0.10, 0.14, 0.30];
const BROW_COLOR: [f64; 3] = [0.28, 0.17, 0.08];
const NOSE_TINT: [f64; 3] = [0.85, 0.45, 0.40];
const MOUTH_COLOR: [f64; 3] = [0.72, 0.18, 0.24];

/// Soft per-pixel class scores, layout `[L, H, W]`; scores sum to 1 per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct ParseMap {
    pub scores: Tensor,
}

impl ParseMap {
    pub fn new(scores: Tensor) -> Result<Self> {
        if scores.rank() != 3 || scores.shape()[0] != NUM_CLASSES {
            return Err(Error::dim("ParseMap", scores.shape(), &[NUM_CLASSES, 0, 0]));
        }
        Ok(ParseMap { scores })
    }

    pub fn height(&self) -> usize {
        self.scores.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.scores.shape()[2]
    }

    pub fn score(&self, class: usize, y: usize, x: usize) -> f64 {
        let (h, w) = (self.height(), self.width());
        self.scores.data()[class * h * w + y * w + x]
    }

    /// `[H, W]` plane of one class.
    pub fn plane(&self, class: usize) -> &[f64] {
        let hw = self.height() * self.width();
        &self.scores.data()[class * hw..(class + 1) * hw]
    }

    /// Most likely class per pixel, row-major.
    pub fn argmax(&self) -> Vec<usize> {
        let hw = self.height() * self.width();
        let d = self.scores.data();
        (0..hw)
            .map(|p| {
                (0..NUM_CLASSES)
                    .max_by(|&a, &b| d[a * hw + p].total_cmp(&d[b * hw + p]))
                    .expect("classes")
            })
            .collect()
    }
}

/// Output of [`render_face`].
#[derive(Clone, Debug)]
pub struct Rendered {
    /// `[3, H, W]` RGB in [0, 1].
    pub image: Tensor,
    pub landmarks: Landmarks,
    pub parse: ParseMap,
}

/// Face geometry in local canvas units.
#[derive(Clone, Debug)]
struct Geometry {
    shear: f64,
    cos: f64,
    sin: f64,
    a: f64,
    b: f64,
    eye_x: f64,
    eye_y: f64,
    eye_w: f64,
    eye_h: f64,
    brow_y: f64,
    brow_x0: f64,
    brow_x1: f64,
    brow_half: f64,
    nose_top: f64,
    nose_len: f64,
    nose_half_w: f64,
    mouth_y: f64,
    mouth_half_w: f64,
    mouth_bow: f64,
    mouth_half_h: f64,
    skin: [f64; 3],
}

impl Geometry {
    fn new(p: &FaceParams) -> Self {
        let [tone, fw, fh, spacing, eye_size, nose, brow, mouth_w] = p.identity;
        let [curve, open, raise, openness] = p.expression;
        let [shear, tilt] = p.pose;
        let eye_w = 3.1 + 0.7 * eye_size;
        let eye_h = 0.5 * eye_w * (1.0 + 0.35 * openness);
        let eye_x = 7.5 + 1.5 * spacing;
        let eye_y = -5.0;
        let nose_len = 7.0 + 2.0 * nose;
        let u = 0.5 * (tone + 1.0);
        let mut skin = [0.0; 3];
        for c in 0..3 {
            skin[c] = (1.0 - u) * SKIN_LIGHT[c] + u * SKIN_DARK[c];
        }
        Geometry {
            shear,
            cos: tilt.cos(),
            sin: tilt.sin(),
            a: 19.0 + 3.0 * fw,
            b: 23.0 + 3.0 * fh,
            eye_x,
            eye_y,
            eye_w,
            eye_h,
            brow_y: eye_y - eye_h - 2.5 - 1.2 * raise,
            brow_x0: eye_x - eye_w - 0.5,
            brow_x1: eye_x + eye_w + 0.5,
            brow_half: 0.9 + 0.45 * brow,
            nose_top: -1.0,
            nose_len,
            nose_half_w: 2.0,
            mouth_y: 12.0,
            mouth_half_w: 5.0 + 1.5 * mouth_w,
            mouth_bow: 1.8 * curve,
            mouth_half_h: 1.0 + 0.6 * (open + 1.0),
            skin,
        }
    }

    fn to_image(&self, lx: f64, ly: f64) -> [f64; 2] {
        let sx = lx + self.shear * ly;
        [
            CENTER[0] + self.cos * sx - self.sin * ly,
            CENTER[1] + self.sin * sx + self.cos * ly,
        ]
    }

    fn to_local(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - CENTER[0], y - CENTER[1]);
        let sx = self.cos * dx + self.sin * dy;
        let ly = -self.sin * dx + self.cos * dy;
        (sx - self.shear * ly, ly)
    }

    fn mouth_center_line(&self, lx: f64) -> (f64, f64) {
        let t = lx / self.mouth_half_w;
        let s = (1.0 - t * t).max(0.0);
        (self.mouth_y + self.mouth_bow * s, self.mouth_half_h * s.sqrt() + 0.3)
    }

    /// Class weights at a local point.
    fn weights(&self, lx: f64, ly: f64) -> [f64; NUM_CLASSES] {
        let mut w = [0.0; NUM_CLASSES];
        let face = coverage(ellipse_distance(lx, ly, 0.0, 0.0, self.a, self.b));
        if face < 1e-12 {
            w[BACKGROUND] = 1.0;
            return w;
        }
        w[BACKGROUND] = 1.0 - face;
        w[SKIN] = face;

        let nose = ellipse_distance(
            lx,
            ly,
            0.0,
            self.nose_top + 0.5 * self.nose_len,
            self.nose_half_w,
            0.5 * self.nose_len,
        );
        let (yc, half) = self.mouth_center_line(lx);
        let mouth = (self.mouth_half_w - lx.abs()).min(half - (ly - yc).abs());
        let eye = ellipse_distance(lx.abs(), ly, self.eye_x, self.eye_y, self.eye_w, self.eye_h);
        let brow = self.brow_half - segment_distance(lx.abs(), ly, [self.brow_x0, self.brow_y], [self.brow_x1, self.brow_y]);
        for (class, d) in [(NOSE, nose), (MOUTH, mouth), (EYES, eye), (BROWS, brow)] {
            let c = coverage(d) * face;
            if c == 0.0 {
                continue;
            }
            for v in &mut w {
                *v *= 1.0 - c;
            }
            w[class] += c;
        }
        w
    }

    /// Class colours; the background entry is filled in per pixel.
    fn colors(&self) -> [[f64; 3]; NUM_CLASSES] {
        let mut nose = [0.0; 3];
        for c in 0..3 {
            nose[c] = 0.55 * self.skin[c] + 0.45 * NOSE_TINT[c];
        }
        [[0.0; 3], self.skin, EYE_COLOR, BROW_COLOR, nose, MOUTH_COLOR]
    }

    fn landmarks(&self, scale: f64) -> Landmarks {
        let mut lm = Landmarks::new();
        let (yc, half) = self.mouth_center_line(0.0);
        let pts = [
            ("left_eye", -self.eye_x, self.eye_y),
            ("right_eye", self.eye_x, self.eye_y),
            ("left_eye_outer", -self.eye_x - self.eye_w, self.eye_y),
            ("left_eye_inner", -self.eye_x + self.eye_w, self.eye_y),
            ("right_eye_inner", self.eye_x - self.eye_w, self.eye_y),
            ("right_eye_outer", self.eye_x + self.eye_w, self.eye_y),
            ("left_brow_outer", -self.brow_x1, self.brow_y),
            ("left_brow_inner", -self.brow_x0, self.brow_y),
            ("right_brow_inner", self.brow_x0, self.brow_y),
            ("right_brow_outer", self.brow_x1, self.brow_y),
            ("nose_tip", 0.0, self.nose_top + self.nose_len),
            ("mouth_left", -self.mouth_half_w, self.mouth_y),
            ("mouth_right", self.mouth_half_w, self.mouth_y),
            ("lip_top", 0.0, yc - half),
            ("lip_bottom", 0.0, yc + half),
        ];
        for (name, lx, ly) in pts {
            let [x, y] = self.to_image(lx, ly);
            lm.insert(name, [x * scale, y * scale]);
        }
        lm
    }
}

fn coverage(d: f64) -> f64 {
    let z = d / EDGE;
    if z > 40.0 {
        1.0
    } else if z < -40.0 {
        0.0
    } else {
        1.0 / (1.0 + (-z).exp())
    }
}

/// First-order signed distance to an axis-aligned ellipse (positive inside).
fn ellipse_distance(x: f64, y: f64, cx: f64, cy: f64, ax: f64, ay: f64) -> f64 {
    let (u, v) = (x - cx, y - cy);
    let rho = ((u / ax).powi(2) + (v / ay).powi(2)).sqrt();
    if rho < 1e-9 {
        return ax.min(ay);
    }
    let grad = ((u / (ax * ax)).powi(2) + (v / (ay * ay)).powi(2)).sqrt() / rho;
    (1.0 - rho) / grad
}

fn segment_distance(x: f64, y: f64, p: [f64; 2], q: [f64; 2]) -> f64 {
    let (dx, dy) = (q[0] - p[0], q[1] - p[1]);
    let t = (((x - p[0]) * dx + (y - p[1]) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    ((x - p[0] - t * dx).powi(2) + (y - p[1] - t * dy).powi(2)).sqrt()
}

/// Fixed background texture, canvas coordinates.
fn background(x: f64, y: f64) -> [f64; 3] {
    [
        0.30 + 0.10 * (0.31 * x + 0.7).sin() * (0.23 * y).cos(),
        0.42 + 0.08 * (0.19 * x + 0.17 * y).sin(),
        0.55 + 0.10 * (0.27 * x - 0.11 * y + 1.3).cos(),
    ]
}

fn check_size(size: usize) -> Result<()> {
    if size < 16 {
        return Err(Error::config(format!("render size must be at least 16, got {size}")));
    }
    Ok(())
}

/// Background texture sampled at pixel centers, cached per size.
fn background_plane(size: usize) -> Arc<Vec<[f64; 3]>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<Vec<[f64; 3]>>>>> = OnceLock::new();
    let mut cache = CACHE.get_or_init(Default::default).lock().expect("background cache");
    cache
        .entry(size)
        .or_insert_with(|| {
            let s = CANVAS / size as f64;
            Arc::new(
                (0..size * size)
                    .map(|i| background(((i % size) as f64 + 0.5) * s, ((i / size) as f64 + 0.5) * s))
                    .collect(),
            )
        })
        .clone()
}

fn rasterize(p: &FaceParams, size: usize, mut write: impl FnMut(usize, &[f64; NUM_CLASSES], &[[f64; 3]; NUM_CLASSES])) {
    let g = Geometry::new(p);
    let bg = background_plane(size);
    let mut colors = g.colors();
    let s = CANVAS / size as f64;
    for py in 0..size {
        for px in 0..size {
            let i = py * size + px;
            let (lx, ly) = g.to_local((px as f64 + 0.5) * s, (py as f64 + 0.5) * s);
            let w = g.weights(lx, ly);
            colors[BACKGROUND] = bg[i];
            write(i, &w, &colors);
        }
    }
}

/// Renders the face image, its landmarks and the ground-truth parse map.
pub fn render_face(p: &FaceParams, size: usize) -> Result<Rendered> {
    p.validate()?;
    check_size(size)?;
    let hw = size * size;
    let mut img = vec![0.0; 3 * hw];
    let mut parse = vec![0.0; NUM_CLASSES * hw];
    rasterize(p, size, |i, w, col| {
        for c in 0..3 {
            img[c * hw + i] = (0..NUM_CLASSES).map(|k| w[k] * col[k][c]).sum();
        }
        for k in 0..NUM_CLASSES {
            parse[k * hw + i] = w[k];
        }
    });
    let g = Geometry::new(p);
    Ok(Rendered {
        image: Tensor::new(&[3, size, size], img)?,
        landmarks: g.landmarks(size as f64 / CANVAS),
        parse: ParseMap::new(Tensor::new(&[NUM_CLASSES, size, size], parse)?)?,
    })
}

/// Image only; the fast path used by the parameter estimator.
pub fn render_image(p: &FaceParams, size: usize) -> Result<Tensor> {
    p.validate()?;
    check_size(size)?;
    let hw = size * size;
    let mut img = vec![0.0; 3 * hw];
    rasterize(p, size, |i, w, col| {
        for c in 0..3 {
            img[c * hw + i] = (0..NUM_CLASSES).map(|k| w[k] * col[k][c]).sum();
        }
    });
    Tensor::new(&[3, size, size], img)
}

/// `[3, H, W]` → luminance `[H, W]`.
pub fn grayscale(image: &Tensor) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::dim("grayscale", s, &[3, 0, 0]));
    }
    let hw = s[1] * s[2];
    let d = image.data();
    Tensor::new(
        &[s[1], s[2]],
        (0..hw)
            .map(|i| 0.299 * d[i] + 0.587 * d[hw + i] + 0.114 * d[2 * hw + i])
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn deterministic() {
        let p = FaceParams::random(&mut Rng::new(4));
        let a = render_face(&p, 64).unwrap();
        let b = render_face(&p, 64).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.landmarks, b.landmarks);
        assert_eq!(a.parse, b.parse);
        assert_eq!(render_image(&p, 64).unwrap(), a.image);
    }

    #[test]
    fn rejects_out_of_range() {
        let mut p = FaceParams::center();
        p.pose[1] = 0.31;
        assert!(matches!(render_face(&p, 64), Err(Error::Contract(_))));
        let mut p = FaceParams::center();
        p.identity[0] = -1.2;
        assert!(render_face(&p, 64).is_err());
    }

    #[test]
    fn parse_scores_are_a_distribution() {
        let p = FaceParams::random(&mut Rng::new(9));
        let r = render_face(&p, 64).unwrap();
        for i in 0..64 * 64 {
            let s: f64 = (0..NUM_CLASSES).map(|k| r.parse.plane(k)[i]).sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!((0..NUM_CLASSES).all(|k| (0.0..=1.0).contains(&r.parse.plane(k)[i])));
        }
        assert!(r.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        r.landmarks.validate(64, 64).unwrap();
    }

    #[test]
    fn frontal_face_is_mirror_symmetric() {
        let mut rng = Rng::new(2);
        for _ in 0..5 {
            let mut p = FaceParams::random(&mut rng);
            p.pose = [0.0, 0.0];
            let r = render_face(&p, 64).unwrap();
            let bg = r.parse.plane(BACKGROUND);
            for y in 0..64 {
                for x in 0..64 {
                    let m = 63 - x;
                    if bg[y * 64 + x] > 0.5 || bg[y * 64 + m] > 0.5 {
                        continue;
                    }
                    for k in 1..NUM_CLASSES {
                        let (a, b) = (r.parse.plane(k)[y * 64 + x], r.parse.plane(k)[y * 64 + m]);
                        assert!((a - b).abs() < 1e-9, "class {k} at ({x},{y})");
                    }
                }
            }
        }
    }

    #[test]
    fn wider_mouth_has_more_mouth_pixels() {
        let mut p = FaceParams::random(&mut Rng::new(12));
        p.pose = [0.05, -0.1];
        let mut last = 0;
        for i in 0..=8 {
            p.identity[7] = -1.0 + 0.25 * i as f64;
            let r = render_face(&p, 64).unwrap();
            let count = r.parse.argmax().iter().filter(|&&c| c == MOUTH).count();
            assert!(count >= last, "{count} < {last}");
            last = count;
        }
        assert!(last > 0);
    }

    #[test]
    fn landmarks_follow_pose() {
        let mut p = FaceParams::center();
        let frontal = render_face(&p, 64).unwrap().landmarks;
        let nose = frontal.get("nose_tip").unwrap();
        assert!((nose[0] - 32.0).abs() < 1e-12);
        p.pose = [0.0, 0.2];
        let tilted = render_face(&p, 64).unwrap().landmarks;
        // Rotation about the face center keeps distances to it.
        for (name, q) in tilted.iter() {
            let f = frontal.get(name).unwrap();
            let r0 = (f[0] - 32.0).hypot(f[1] - 34.0);
            let r1 = (q[0] - 32.0).hypot(q[1] - 34.0);
            assert!((r0 - r1).abs() < 1e-9, "{name}");
        }
    }
}
