use crate::error::{Error, Result};

/// Dense row-major array of `f64` values.
///
/// `Tensor` is a plain value: cloning copies the buffer and it is `Send + Sync`.
/// Gradient tracking lives on a [`Tape`](super::Tape), which wraps tensors in
/// tracked [`Var`](super::Var) handles.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        if numel(shape) != data.len() {
            return Err(Error::dim("Tensor::new", shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension in {shape:?}");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = numel(shape);
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Square identity matrix.
    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(other, op)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub(crate) fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(op, &self.shape, &other.shape));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    /// `self += c * other`, in place.
    pub fn axpy(&mut self, c: f64, other: &Tensor) -> Result<()> {
        self.same_shape(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.len() as f64
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Plain (untracked) matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.as_matrix("matmul")?;
        let (k2, n) = other.as_matrix("matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(&self.data, &other.data, &mut out, m, k, n);
        Tensor::new(&[m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.as_matrix("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(&[n, m], out)
    }

    pub(crate) fn as_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            _ => Err(Error::dim(op, &self.shape, &[0, 0])),
        }
    }

    /// Bit pattern fingerprint of shape and payload (FNV-1a).
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::default();
        for &d in &self.shape {
            h.write(&(d as u64).to_le_bytes());
        }
        for v in &self.data {
            h.write(&v.to_bits().to_le_bytes());
        }
        h.finish()
    }
}

/// 64-bit FNV-1a hasher, used for deterministic checksums and string seeds.
#[derive(Clone, Copy, Debug)]
pub struct Fnv(u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }

    pub fn hash_str(s: &str) -> u64 {
        let mut h = Fnv::default();
        h.write(s.as_bytes());
        h.finish()
    }
}

/// Inner loops shared by the tracked and untracked code paths.
pub(crate) mod kernels {
    /// out[m×n] = a[m×k] · b[k×n]
    pub fn matmul(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }

    /// out[m×n] += a[m×k] · b[n×k]ᵀ
    pub fn matmul_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
            }
        }
    }

    /// out[k×n] += a[m×k]ᵀ · b[m×n]
    pub fn matmul_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let brow = &b[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let orow = &mut out[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }

    /// Geometry of a same-padded, stride-1 2-D convolution.
    #[derive(Clone, Copy, Debug)]
    pub struct ConvGeom {
        pub cin: usize,
        pub cout: usize,
        pub h: usize,
        pub w: usize,
        pub k: usize,
        pub dilation: usize,
    }

    impl ConvGeom {
        fn offset(&self, kk: usize) -> isize {
            (kk as isize - (self.k as isize - 1) / 2) * self.dilation as isize
        }

        /// Valid output range [lo, hi) along an axis of length `len` for a tap offset.
        fn range(len: usize, off: isize) -> (usize, usize) {
            let lo = (-off).max(0) as usize;
            let hi = (len as isize - off.max(0)).max(0) as usize;
            (lo.min(len), hi.max(lo.min(len)))
        }

        /// Calls `f(o, c, ky, kx, dy, dx, y_lo, y_hi, x_lo, x_hi)` for each tap.
        #[inline]
        pub fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, isize, isize, (usize, usize), (usize, usize))) {
            for o in 0..self.cout {
                for c in 0..self.cin {
                    for ky in 0..self.k {
                        let dy = self.offset(ky);
                        let yr = Self::range(self.h, dy);
                        for kx in 0..self.k {
                            let dx = self.offset(kx);
                            let xr = Self::range(self.w, dx);
                            let widx = ((o * self.cin + c) * self.k + ky) * self.k + kx;
                            f(o, c, widx, dy, dx, yr, xr);
                        }
                    }
                }
            }
        }
    }

    pub fn conv2d(x: &[f64], w: &[f64], bias: Option<&[f64]>, out: &mut [f64], g: ConvGeom) {
        let hw = g.h * g.w;
        if let Some(b) = bias {
            for o in 0..g.cout {
                out[o * hw..(o + 1) * hw].fill(b[o]);
            }
        }
        g.for_each_tap(|o, c, widx, dy, dx, (y0, y1), (x0, x1)| {
            let wv = w[widx];
            if wv == 0.0 || x1 <= x0 {
                return;
            }
            for y in y0..y1 {
                let sy = (y as isize + dy) as usize;
                let src = &x[c * hw + sy * g.w..c * hw + (sy + 1) * g.w];
                let dst = &mut out[o * hw + y * g.w..o * hw + (y + 1) * g.w];
                let sx0 = (x0 as isize + dx) as usize;
                let n = x1 - x0;
                for (d, s) in dst[x0..x1].iter_mut().zip(&src[sx0..sx0 + n]) {
                    *d += wv * s;
                }
            }
        });
    }

    pub fn conv2d_grad_input(gout: &[f64], w: &[f64], gin: &mut [f64], g: ConvGeom) {
        let hw = g.h * g.w;
        g.for_each_tap(|o, c, widx, dy, dx, (y0, y1), (x0, x1)| {
            let wv = w[widx];
            if wv == 0.0 || x1 <= x0 {
                return;
            }
            for y in y0..y1 {
                let sy = (y as isize + dy) as usize;
                let src = &gout[o * hw + y * g.w..o * hw + (y + 1) * g.w];
                let dst = &mut gin[c * hw + sy * g.w..c * hw + (sy + 1) * g.w];
                let sx0 = (x0 as isize + dx) as usize;
                let n = x1 - x0;
                for (d, s) in dst[sx0..sx0 + n].iter_mut().zip(&src[x0..x1]) {
                    *d += wv * s;
                }
            }
        });
    }

    pub fn conv2d_grad_weight(gout: &[f64], x: &[f64], gw: &mut [f64], g: ConvGeom) {
        let hw = g.h * g.w;
        g.for_each_tap(|o, c, widx, dy, dx, (y0, y1), (x0, x1)| {
            if x1 <= x0 {
                return;
            }
            let mut acc = 0.0;
            for y in y0..y1 {
                let sy = (y as isize + dy) as usize;
                let src = &x[c * hw + sy * g.w..c * hw + (sy + 1) * g.w];
                let go = &gout[o * hw + y * g.w..o * hw + (y + 1) * g.w];
                let sx0 = (x0 as isize + dx) as usize;
                let n = x1 - x0;
                acc += go[x0..x1]
                    .iter()
                    .zip(&src[sx0..sx0 + n])
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            }
            gw[widx] += acc;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[0], vec![]).is_err());
    }

    #[test]
    fn plain_matmul_matches_hand_product() {
        let a = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(&[2, 1], vec![3.0, 5.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[13.0]);
        let err = a.matmul(&a).unwrap_err().to_string();
        assert!(err.contains("[1, 2]"), "{err}");
    }

    #[test]
    fn transpose_round_trip() {
        let a = Tensor::from_fn(&[3, 4], |i| i as f64);
        assert_eq!(a.transpose().unwrap().transpose().unwrap(), a);
    }
}
