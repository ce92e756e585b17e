//! Identity embedder: parse-weighted colour and geometry statistics,
//! standardised and reweighted by their between/within-identity variance
//! ratio on a calibration set, rotated into 16 dimensions and L2-normalised.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

use super::params::FaceParams;
use super::parser::FaceParser;
use super::render::{render_image, ParseMap, BACKGROUND, BROWS, EYES, MOUTH, NOSE, SKIN};

pub const EMBED_DIM: usize = 16;
pub const NUM_STATS: usize = 14;
/// Cap on the between/within variance ratio used for weighting, so features
/// that are exactly constant per identity do not swamp the rest.
const MAX_FISHER: f64 = 100.0;

#[derive(Clone, Debug)]
pub struct IdentityEmbedder {
    mean: [f64; NUM_STATS],
    weight: [f64; NUM_STATS],
    /// `[EMBED_DIM, NUM_STATS]` with orthonormal columns.
    proj: DMatrix<f64>,
}

#[derive(Default, Clone, Copy)]
struct Moments {
    m: f64,
    x: f64,
    y: f64,
    xx: f64,
    xy: f64,
    yy: f64,
}

impl Moments {
    fn add(&mut self, w: f64, x: f64, y: f64) {
        self.m += w;
        self.x += w * x;
        self.y += w * y;
        self.xx += w * x * x;
        self.xy += w * x * y;
        self.yy += w * y * y;
    }

    fn centroid(&self) -> [f64; 2] {
        let m = self.m.max(1e-9);
        [self.x / m, self.y / m]
    }

    /// Standard deviation along unit direction `u`.
    fn spread(&self, u: [f64; 2]) -> f64 {
        let m = self.m.max(1e-9);
        let [cx, cy] = self.centroid();
        let vxx = self.xx / m - cx * cx;
        let vxy = self.xy / m - cx * cy;
        let vyy = self.yy / m - cy * cy;
        (u[0] * u[0] * vxx + 2.0 * u[0] * u[1] * vxy + u[1] * u[1] * vyy).max(0.0).sqrt()
    }
}

/// Raw pooled statistics of an image and its parse.
pub fn face_stats(image: &Tensor, parse: &ParseMap) -> [f64; NUM_STATS] {
    let (h, w) = (parse.height(), parse.width());
    let hw = h * w;
    let s = 64.0 / w as f64;
    let px = image.data();
    let plane = |k: usize| parse.plane(k);
    let (bg, skin, eyes, brows, nose, mouth) = (
        plane(BACKGROUND),
        plane(SKIN),
        plane(EYES),
        plane(BROWS),
        plane(NOSE),
        plane(MOUTH),
    );
    let mut face = Moments::default();
    let mut nose_m = Moments::default();
    let mut brow_m = Moments::default();
    let mut mouth_m = Moments::default();
    let mut color = [0.0; 3];
    let mut skin_mass = 0.0;
    for i in 0..hw {
        let (x, y) = (((i % w) as f64 + 0.5) * s, ((i / w) as f64 + 0.5) * s);
        face.add(1.0 - bg[i], x, y);
        nose_m.add(nose[i], x, y);
        brow_m.add(brows[i], x, y);
        mouth_m.add(mouth[i], x, y);
        skin_mass += skin[i];
        for (c, col) in color.iter_mut().enumerate() {
            *col += skin[i] * px[c * hw + i];
        }
    }
    let [fcx, _] = face.centroid();
    let mut eye_l = Moments::default();
    let mut eye_r = Moments::default();
    for i in 0..hw {
        let (x, y) = (((i % w) as f64 + 0.5) * s, ((i / w) as f64 + 0.5) * s);
        if x < fcx {
            eye_l.add(eyes[i], x, y);
        } else {
            eye_r.add(eyes[i], x, y);
        }
    }
    let (l, r) = (eye_l.centroid(), eye_r.centroid());
    let eye_dist = (r[0] - l[0]).hypot(r[1] - l[1]);
    let u = if eye_dist > 1e-6 {
        [(r[0] - l[0]) / eye_dist, (r[1] - l[1]) / eye_dist]
    } else {
        [1.0, 0.0]
    };
    let v = [-u[1], u[0]];
    let area = s * s;
    let mass = |m: f64| (m * area).max(0.0).sqrt();
    let skin_mass = skin_mass.max(1e-9);
    [
        color[0] / skin_mass,
        color[1] / skin_mass,
        color[2] / skin_mass,
        mass(face.m),
        face.spread(u),
        face.spread(v),
        eye_dist,
        mass(eye_l.m + eye_r.m),
        0.5 * (eye_l.spread(u) + eye_r.spread(u)),
        mass(nose_m.m),
        nose_m.spread(v),
        mass(brow_m.m),
        mouth_m.spread(u),
        mass(mouth_m.m),
    ]
}

impl IdentityEmbedder {
    /// Calibrates on `identities` random identities rendered with `variants`
    /// random expressions and poses each.
    pub fn calibrate(parser: &FaceParser, seed: u64, identities: usize, variants: usize, size: usize) -> Result<Self> {
        if identities < 2 || variants < 2 {
            return Err(Error::config("embedder calibration needs at least 2 identities x 2 variants"));
        }
        let mut rng = Rng::with_stream(seed, 3);
        let mut groups = Vec::with_capacity(identities);
        for _ in 0..identities {
            let base = FaceParams::random(&mut rng);
            let mut g = Vec::with_capacity(variants);
            for _ in 0..variants {
                let mut p = base;
                p.randomize_expression(&mut rng);
                p.randomize_pose(&mut rng);
                let img = render_image(&p, size)?;
                g.push(face_stats(&img, &parser.parse(&img)?));
            }
            groups.push(g);
        }
        let n = (identities * variants) as f64;
        let mut mean = [0.0; NUM_STATS];
        for g in &groups {
            for f in g {
                for j in 0..NUM_STATS {
                    mean[j] += f[j] / n;
                }
            }
        }
        let mut within = [0.0; NUM_STATS];
        let mut between = [0.0; NUM_STATS];
        for g in &groups {
            let mut gm = [0.0; NUM_STATS];
            for f in g {
                for j in 0..NUM_STATS {
                    gm[j] += f[j] / variants as f64;
                }
            }
            for f in g {
                for j in 0..NUM_STATS {
                    within[j] += (f[j] - gm[j]).powi(2) / (n - identities as f64);
                }
            }
            for j in 0..NUM_STATS {
                between[j] += (gm[j] - mean[j]).powi(2) / (identities - 1) as f64;
            }
        }
        let mut weight = [0.0; NUM_STATS];
        for j in 0..NUM_STATS {
            let fisher = (between[j] / within[j].max(1e-12)).min(MAX_FISHER);
            weight[j] = fisher.sqrt() / (between[j] + within[j]).max(1e-12).sqrt();
        }
        let g = DMatrix::from_fn(EMBED_DIM, NUM_STATS, |_, _| rng.normal());
        let proj = g.qr().q().columns(0, NUM_STATS).into_owned();
        Ok(IdentityEmbedder { mean, weight, proj })
    }

    pub fn embed(&self, parser: &FaceParser, image: &Tensor) -> Result<Tensor> {
        let parse = parser.parse(image)?;
        self.embed_parsed(image, &parse)
    }

    pub fn embed_parsed(&self, image: &Tensor, parse: &ParseMap) -> Result<Tensor> {
        let f = face_stats(image, parse);
        let z = nalgebra::DVector::from_fn(NUM_STATS, |j, _| (f[j] - self.mean[j]) * self.weight[j]);
        let e = &self.proj * z;
        let norm = e.norm();
        let data: Vec<f64> = if norm > 1e-300 && norm.is_finite() {
            e.iter().map(|v| v / norm).collect()
        } else {
            let mut d = vec![0.0; EMBED_DIM];
            d[0] = 1.0;
            d
        };
        Tensor::new(&[EMBED_DIM], data)
    }
}
