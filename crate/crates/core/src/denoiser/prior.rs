//! Closed-form Gaussian image prior and its optimal ε predictor.
//!
//! Data are modelled as `x0 ~ N(m, Σ)` with `Σ = V Λ Vᵀ + D` (k principal
//! components plus a diagonal residual). Under `x_t = √ᾱ x0 + √(1−ᾱ) ε` the
//! posterior-mean noise is
//!
//! ```text
//! ε̂ = √(1−ᾱ) · C⁻¹ · (x_t − √ᾱ m),   C = ᾱ Σ + (1−ᾱ) I
//! ```
//!
//! `C⁻¹` is applied with the Woodbury identity, needing only a k×k solve.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GaussianPrior {
    shape: Vec<usize>,
    mean: DVector<f64>,
    /// `[P, k]`, orthonormal columns.
    basis: DMatrix<f64>,
    eigen: DVector<f64>,
    resid: DVector<f64>,
}

impl GaussianPrior {
    /// Fits mean, the top `k` principal components and a per-pixel residual
    /// variance (scaled by `resid_scale`, floored at `min_var`).
    pub fn fit(images: &[Tensor], k: usize, resid_scale: f64, min_var: f64) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::config("prior needs at least one image"))?;
        let n = images.len();
        let p = first.len();
        if images.iter().any(|im| im.shape() != first.shape()) {
            return Err(Error::contract("prior images must share a shape"));
        }
        if !(min_var > 0.0) {
            return Err(Error::config("prior variance floor must be positive"));
        }
        let mut mean = DVector::<f64>::zeros(p);
        for im in images {
            for (m, &v) in mean.iter_mut().zip(im.data()) {
                *m += v / n as f64;
            }
        }
        let x = DMatrix::from_fn(n, p, |i, j| images[i].data()[j] - mean[j]);
        let gram = &x * x.transpose() / n as f64;
        let eig = gram.symmetric_eigen();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let k = k.min(n.saturating_sub(1)).max(0);
        let mut basis = DMatrix::<f64>::zeros(p, k);
        let mut eigen = DVector::<f64>::zeros(k);
        let mut kept = 0;
        for &i in order.iter().take(k) {
            let lam = eig.eigenvalues[i];
            if lam <= 1e-12 {
                break;
            }
            let v = x.transpose() * eig.eigenvectors.column(i) / (n as f64 * lam).sqrt();
            basis.set_column(kept, &v);
            eigen[kept] = lam;
            kept += 1;
        }
        let basis = basis.columns(0, kept).into_owned();
        let eigen = eigen.rows(0, kept).into_owned();
        let mut resid = DVector::<f64>::zeros(p);
        for j in 0..p {
            let var: f64 = (0..n).map(|i| x[(i, j)].powi(2)).sum::<f64>() / n as f64;
            let explained: f64 = (0..kept).map(|c| eigen[c] * basis[(j, c)].powi(2)).sum();
            resid[j] = (resid_scale * (var - explained)).max(min_var);
        }
        Ok(GaussianPrior {
            shape: first.shape().to_vec(),
            mean,
            basis,
            eigen,
            resid,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn components(&self) -> usize {
        self.eigen.len()
    }

    pub fn mean(&self) -> Tensor {
        Tensor::new(&self.shape, self.mean.as_slice().to_vec()).expect("shape")
    }

    /// Per-pixel marginal standard deviation of the prior.
    pub fn marginal_std(&self) -> Tensor {
        let k = self.components();
        Tensor::from_fn(&self.shape, |j| {
            let pc: f64 = (0..k).map(|c| self.eigen[c] * self.basis[(j, c)].powi(2)).sum();
            (pc + self.resid[j]).sqrt()
        })
    }

    /// `[P, k]` principal directions scaled by their standard deviations.
    pub fn principal_map(&self) -> DMatrix<f64> {
        let mut m = self.basis.clone();
        for (c, &lam) in self.eigen.iter().enumerate() {
            m.column_mut(c).scale_mut(lam.sqrt());
        }
        m
    }

    /// Coordinates of `x − mean` in the orthonormal principal basis.
    pub fn coordinates(&self, x: &Tensor) -> Result<Vec<f64>> {
        if x.shape() != self.shape.as_slice() {
            return Err(Error::dim("prior coordinates", x.shape(), &self.shape));
        }
        let d = DVector::from_iterator(x.len(), x.data().iter().zip(self.mean.iter()).map(|(a, m)| a - m));
        Ok((self.basis.transpose() * d).as_slice().to_vec())
    }

    /// `C⁻¹ v` at cumulative signal level `ab`.
    pub fn apply_cinv(&self, v: &[f64], ab: f64) -> Vec<f64> {
        let dt: Vec<f64> = self.resid.iter().map(|&d| ab * d + (1.0 - ab)).collect();
        let w: Vec<f64> = v.iter().zip(&dt).map(|(a, d)| a / d).collect();
        let k = self.components();
        if k == 0 || ab == 0.0 {
            return w;
        }
        // M = Λ⁻¹/ᾱ + Vᵀ D_t⁻¹ V
        let mut m = DMatrix::<f64>::zeros(k, k);
        for j in 0..self.basis.nrows() {
            let inv = 1.0 / dt[j];
            for a in 0..k {
                let va = self.basis[(j, a)] * inv;
                for b in a..k {
                    m[(a, b)] += va * self.basis[(j, b)];
                }
            }
        }
        for a in 0..k {
            m[(a, a)] += 1.0 / (ab * self.eigen[a]);
            for b in 0..a {
                m[(a, b)] = m[(b, a)];
            }
        }
        let wv = DVector::from_column_slice(&w);
        let rhs = self.basis.transpose() * &wv;
        let sol = m.cholesky().expect("M is positive definite").solve(&rhs);
        let corr = &self.basis * sol;
        w.iter().zip(corr.iter()).zip(&dt).map(|((a, c), d)| a - c / d).collect()
    }

    /// Optimal ε at level `ab` for data distributed around `mean + offset`.
    ///
    /// Differentiable in both `x_t` and `offset`.
    pub fn eps<'t>(self: &Arc<Self>, x_t: Var<'t>, offset: Var<'t>, ab: f64) -> Result<Var<'t>> {
        let (x, u) = (x_t.value(), offset.value());
        if x.shape() != self.shape.as_slice() || u.shape() != self.shape.as_slice() {
            return Err(Error::dim("prior eps", x.shape(), &self.shape));
        }
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let r: Vec<f64> = x
            .data()
            .iter()
            .zip(u.data())
            .zip(self.mean.iter())
            .map(|((&xv, &uv), &mv)| xv - sa * (mv + uv))
            .collect();
        let value: Vec<f64> = self.apply_cinv(&r, ab).into_iter().map(|v| sn * v).collect();
        let value = Tensor::new(&self.shape, value)?;
        let prior = Arc::clone(self);
        let tape: &'t Tape = x_t.tape();
        Ok(tape.custom(
            &[x_t, offset],
            value,
            Box::new(move |args| {
                let g = prior.apply_cinv(args.grad.data(), ab);
                let shape = &prior.shape;
                let gx = args.needs[0].then(|| Tensor::new(shape, g.iter().map(|v| sn * v).collect()).expect("shape"));
                let gu = args.needs[1]
                    .then(|| Tensor::new(shape, g.iter().map(|v| -sn * sa * v).collect()).expect("shape"));
                vec![gx, gu]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{check_gradient, Rng};

    fn toy_prior() -> Arc<GaussianPrior> {
        let mut rng = Rng::new(1);
        let imgs: Vec<Tensor> = (0..12).map(|_| rng.uniform_tensor(&[2, 3, 3], 0.0, 1.0)).collect();
        Arc::new(GaussianPrior::fit(&imgs, 4, 1.0, 1e-3).unwrap())
    }

    fn dense_cov(p: &GaussianPrior, ab: f64) -> DMatrix<f64> {
        let lam = DMatrix::from_diagonal(&p.eigen);
        let sigma = &p.basis * lam * p.basis.transpose() + DMatrix::from_diagonal(&p.resid);
        sigma * ab + DMatrix::identity(p.mean.len(), p.mean.len()) * (1.0 - ab)
    }

    #[test]
    fn woodbury_matches_dense_inverse() {
        let p = toy_prior();
        let v: Vec<f64> = (0..18).map(|i| (i as f64 * 0.37).sin()).collect();
        for ab in [0.9999, 0.5, 0.01, 4e-5] {
            let c = dense_cov(&p, ab);
            let want = c.lu().solve(&DVector::from_column_slice(&v)).unwrap();
            let got = p.apply_cinv(&v, ab);
            for (a, b) in got.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()), "{a} vs {b} at {ab}");
            }
        }
    }

    #[test]
    fn basis_is_orthonormal_and_variances_positive() {
        let p = toy_prior();
        let g = p.basis.transpose() * &p.basis;
        assert!((g - DMatrix::identity(p.components(), p.components())).abs().max() < 1e-9);
        assert!(p.resid.iter().all(|&d| d >= 1e-3));
    }

    #[test]
    fn eps_gradients() {
        let p = toy_prior();
        let u = Rng::new(3).normal_tensor(&[2, 3, 3]);
        let x = Rng::new(4).normal_tensor(&[2, 3, 3]);
        let w = Rng::new(5).normal_tensor(&[2, 3, 3]);
        let err = check_gradient(
            |tape, x| {
                let e = p.eps(x, tape.constant(u.clone()), 0.3)?;
                Ok(e.mul(tape.constant(w.clone()))?.sum())
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
        let err = check_gradient(
            |tape, u| {
                let e = p.eps(tape.constant(x.clone()), u, 0.7)?;
                Ok(e.mul(tape.constant(w.clone()))?.sum())
            },
            &u,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
