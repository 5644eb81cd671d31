//! Linear degradation operators `A: R^d → R^n` with exact adjoints.

use std::fmt;

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};
use crate::field::SignalField;

/// Default entry cap for [`dense_matrix`].
pub const DEFAULT_DENSE_CAP: usize = 1_000_000;

/// A linear map with its transpose. Implementors provide the unchecked
/// slice-level maps; [`LinearOperator::apply`] and
/// [`LinearOperator::apply_transpose`] add the shape checks.
pub trait LinearOperator: Send + Sync + fmt::Debug {
    fn input_shape(&self) -> &[usize];
    fn output_shape(&self) -> &[usize];

    /// `A x` on a flat input of `input_shape` length.
    fn forward(&self, x: &[f64]) -> Vec<f64>;

    /// `Aᵀ u` on a flat input of `output_shape` length.
    fn adjoint(&self, u: &[f64]) -> Vec<f64>;

    fn apply(&self, x: &SignalField) -> Result<SignalField> {
        x.ensure_shape(self.input_shape())?;
        SignalField::new(self.forward(x.data()), self.output_shape().to_vec())
    }

    fn apply_transpose(&self, u: &SignalField) -> Result<SignalField> {
        u.ensure_shape(self.output_shape())?;
        SignalField::new(self.adjoint(u.data()), self.input_shape().to_vec())
    }
}

/// Height, width and channel count of an image-shaped signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ImageDims {
    h: usize,
    w: usize,
    c: usize,
}

impl ImageDims {
    fn from_shape(shape: &[usize]) -> Result<Self> {
        match *shape {
            [h, w] if h > 0 && w > 0 => Ok(Self { h, w, c: 1 }),
            [h, w, c] if h > 0 && w > 0 && c > 0 => Ok(Self { h, w, c }),
            _ => Err(Error::InvalidRange(format!(
                "expected an [H, W] or [H, W, C] shape, got {shape:?}"
            ))),
        }
    }

    #[inline]
    fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.w + j) * self.c + k
    }
}

#[derive(Debug, Clone)]
pub struct Identity {
    shape: Vec<usize>,
}

impl Identity {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
        }
    }
}

impl LinearOperator for Identity {
    fn input_shape(&self) -> &[usize] {
        &self.shape
    }

    fn output_shape(&self) -> &[usize] {
        &self.shape
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }

    fn adjoint(&self, u: &[f64]) -> Vec<f64> {
        u.to_vec()
    }
}

/// Inpainting mask in compact form: the output lists only kept entries, in
/// flat index order. The transpose scatters them back with zeros elsewhere.
#[derive(Debug, Clone)]
pub struct MaskOperator {
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    keep: Vec<bool>,
    kept: Vec<usize>,
}

impl MaskOperator {
    /// `keep` has one flag per input element.
    pub fn new(shape: &[usize], keep: Vec<bool>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if keep.len() != len {
            return Err(Error::ShapeMismatch {
                expected: shape.to_vec(),
                actual: vec![keep.len()],
            });
        }
        let kept: Vec<usize> = keep
            .iter()
            .enumerate()
            .filter_map(|(i, &k)| k.then_some(i))
            .collect();
        if kept.is_empty() {
            return Err(Error::InvalidRange("mask keeps no entries".into()));
        }
        Ok(Self {
            input_shape: shape.to_vec(),
            output_shape: vec![kept.len()],
            keep,
            kept,
        })
    }

    pub fn from_indices(shape: &[usize], indices: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        let mut keep = vec![false; len];
        for &i in indices {
            if i >= len {
                return Err(Error::InvalidRange(format!("mask index {i} out of range {len}")));
            }
            keep[i] = true;
        }
        Self::new(shape, keep)
    }

    /// Expands a per-pixel mask (`H·W` flags) across the channels of `shape`.
    pub fn from_pixel_mask(shape: &[usize], pixels: &[bool]) -> Result<Self> {
        let channels = channel_count(shape);
        let len: usize = shape.iter().product();
        if pixels.len() * channels != len {
            return Err(Error::ShapeMismatch {
                expected: shape.to_vec(),
                actual: vec![pixels.len()],
            });
        }
        let keep = pixels
            .iter()
            .flat_map(|&k| std::iter::repeat_n(k, channels))
            .collect();
        Self::new(shape, keep)
    }

    /// Drops each pixel independently with probability `drop_fraction`; all
    /// channels of a pixel share its fate.
    pub fn random<R: Rng + ?Sized>(shape: &[usize], drop_fraction: f64, rng: &mut R) -> Result<Self> {
        if !(0.0..1.0).contains(&drop_fraction) {
            return Err(Error::InvalidRange(format!(
                "drop fraction must lie in [0, 1), got {drop_fraction}"
            )));
        }
        let pixels = shape.iter().product::<usize>() / channel_count(shape);
        let flags: Vec<bool> = (0..pixels)
            .map(|_| rng.random::<f64>() >= drop_fraction)
            .collect();
        Self::from_pixel_mask(shape, &flags)
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    /// Per-pixel flags (first channel of each pixel).
    pub fn pixel_mask(&self) -> Vec<bool> {
        self.keep.iter().step_by(channel_count(&self.input_shape)).copied().collect()
    }

    pub fn kept_fraction(&self) -> f64 {
        self.kept.len() as f64 / self.keep.len() as f64
    }
}

fn channel_count(shape: &[usize]) -> usize {
    match *shape {
        [_, _, c] => c,
        _ => 1,
    }
}

impl LinearOperator for MaskOperator {
    fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.kept.iter().map(|&i| x[i]).collect()
    }

    fn adjoint(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.keep.len()];
        for (&i, &v) in self.kept.iter().zip(u) {
            out[i] = v;
        }
        out
    }
}

/// How convolution reads outside the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Half-sample symmetric extension (`… b a | a b c …`).
    #[default]
    Reflect,
    Zero,
    Periodic,
}

impl Boundary {
    /// Maps a possibly out-of-range coordinate into `0..n`, or `None` when
    /// the sample is zero.
    #[inline]
    fn resolve(self, i: isize, n: usize) -> Option<usize> {
        let n = n as isize;
        match self {
            Boundary::Zero => (0..n).contains(&i).then_some(i as usize),
            Boundary::Periodic => Some(i.rem_euclid(n) as usize),
            Boundary::Reflect => {
                let period = 2 * n;
                let m = i.rem_euclid(period);
                Some(if m < n { m } else { period - 1 - m } as usize)
            }
        }
    }
}

/// 2D convolution with a normalized kernel, applied per channel.
#[derive(Debug, Clone)]
pub struct ConvolutionOperator {
    shape: Vec<usize>,
    dims: ImageDims,
    kernel: Vec<f64>,
    kh: usize,
    kw: usize,
    boundary: Boundary,
}

impl ConvolutionOperator {
    /// `kernel` is row-major `kh × kw` with odd sides; it is rescaled to sum 1.
    pub fn new(shape: &[usize], kernel: Vec<f64>, kh: usize, kw: usize, boundary: Boundary) -> Result<Self> {
        let dims = ImageDims::from_shape(shape)?;
        if kh.is_multiple_of(2) || kw.is_multiple_of(2) || kernel.len() != kh * kw {
            return Err(Error::InvalidRange(format!(
                "kernel must be {kh}x{kw} with odd sides, got {} entries",
                kernel.len()
            )));
        }
        let sum: f64 = kernel.iter().sum();
        if !(sum > 0.0 && sum.is_finite()) {
            return Err(Error::InvalidRange(format!("kernel sum {sum} must be positive")));
        }
        let kernel = kernel.into_iter().map(|v| v / sum).collect();
        Ok(Self {
            shape: shape.to_vec(),
            dims,
            kernel,
            kh,
            kw,
            boundary,
        })
    }

    pub fn gaussian(shape: &[usize], size: usize, sigma: f64, boundary: Boundary) -> Result<Self> {
        if sigma.is_nan() || sigma <= 0.0 {
            return Err(Error::InvalidRange(format!("blur sigma must be positive, got {sigma}")));
        }
        let r = (size / 2) as f64;
        let mut k = Vec::with_capacity(size * size);
        for a in 0..size {
            for b in 0..size {
                let (dy, dx) = (a as f64 - r, b as f64 - r);
                k.push((-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp());
            }
        }
        Self::new(shape, k, size, size, boundary)
    }

    pub fn box_blur(shape: &[usize], size: usize, boundary: Boundary) -> Result<Self> {
        Self::new(shape, vec![1.0; size * size], size, size, boundary)
    }

    /// Horizontal line kernel of odd `length`.
    pub fn motion(shape: &[usize], length: usize, boundary: Boundary) -> Result<Self> {
        Self::new(shape, vec![1.0; length], 1, length, boundary)
    }

    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.kh, self.kw)
    }

    /// Calls `f(out_index, in_index, weight)` for every nonzero tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, f64)) {
        let ImageDims { h, w, c } = self.dims;
        let (rh, rw) = ((self.kh / 2) as isize, (self.kw / 2) as isize);
        for i in 0..h {
            for j in 0..w {
                for a in 0..self.kh {
                    let Some(si) = self.boundary.resolve(i as isize + rh - a as isize, h) else {
                        continue;
                    };
                    for b in 0..self.kw {
                        let Some(sj) = self.boundary.resolve(j as isize + rw - b as isize, w) else {
                            continue;
                        };
                        let wgt = self.kernel[a * self.kw + b];
                        for k in 0..c {
                            f(self.dims.index(i, j, k), self.dims.index(si, sj, k), wgt);
                        }
                    }
                }
            }
        }
    }
}

impl LinearOperator for ConvolutionOperator {
    fn input_shape(&self) -> &[usize] {
        &self.shape
    }

    fn output_shape(&self) -> &[usize] {
        &self.shape
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.for_each_tap(|o, i, w| out[o] += w * x[i]);
        out
    }

    fn adjoint(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; u.len()];
        self.for_each_tap(|o, i, w| out[i] += w * u[o]);
        out
    }
}

/// Block-average downsampling by an integer factor along both image axes.
#[derive(Debug, Clone)]
pub struct DownsampleOperator {
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    dims: ImageDims,
    factor: usize,
}

impl DownsampleOperator {
    pub fn new(shape: &[usize], factor: usize) -> Result<Self> {
        let dims = ImageDims::from_shape(shape)?;
        if factor == 0 || dims.h % factor != 0 || dims.w % factor != 0 {
            return Err(Error::InvalidRange(format!(
                "image {}x{} is not divisible by factor {factor}",
                dims.h, dims.w
            )));
        }
        let mut output_shape = shape.to_vec();
        output_shape[0] /= factor;
        output_shape[1] /= factor;
        Ok(Self {
            input_shape: shape.to_vec(),
            output_shape,
            dims,
            factor,
        })
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    fn out_dims(&self) -> ImageDims {
        ImageDims {
            h: self.dims.h / self.factor,
            w: self.dims.w / self.factor,
            c: self.dims.c,
        }
    }
}

impl LinearOperator for DownsampleOperator {
    fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let od = self.out_dims();
        let f = self.factor;
        let norm = 1.0 / (f * f) as f64;
        let mut out = vec![0.0; od.h * od.w * od.c];
        for i in 0..self.dims.h {
            for j in 0..self.dims.w {
                for k in 0..self.dims.c {
                    out[od.index(i / f, j / f, k)] += norm * x[self.dims.index(i, j, k)];
                }
            }
        }
        out
    }

    fn adjoint(&self, u: &[f64]) -> Vec<f64> {
        let od = self.out_dims();
        let f = self.factor;
        let norm = 1.0 / (f * f) as f64;
        let mut out = vec![0.0; self.dims.h * self.dims.w * self.dims.c];
        for i in 0..self.dims.h {
            for j in 0..self.dims.w {
                for k in 0..self.dims.c {
                    out[self.dims.index(i, j, k)] = norm * u[od.index(i / f, j / f, k)];
                }
            }
        }
        out
    }
}

/// `ops[n-1] ∘ … ∘ ops[0]`: the first operator is applied first.
#[derive(Debug)]
pub struct Composed {
    ops: Vec<Box<dyn LinearOperator>>,
}

impl Composed {
    pub fn new(ops: Vec<Box<dyn LinearOperator>>) -> Result<Self> {
        if ops.is_empty() {
            return Err(Error::InvalidRange("composition needs at least one operator".into()));
        }
        for pair in ops.windows(2) {
            if pair[0].output_shape() != pair[1].input_shape() {
                return Err(Error::ShapeMismatch {
                    expected: pair[1].input_shape().to_vec(),
                    actual: pair[0].output_shape().to_vec(),
                });
            }
        }
        Ok(Self { ops })
    }
}

impl LinearOperator for Composed {
    fn input_shape(&self) -> &[usize] {
        self.ops[0].input_shape()
    }

    fn output_shape(&self) -> &[usize] {
        self.ops[self.ops.len() - 1].output_shape()
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.ops.iter().fold(x.to_vec(), |acc, op| op.forward(&acc))
    }

    fn adjoint(&self, u: &[f64]) -> Vec<f64> {
        self.ops.iter().rev().fold(u.to_vec(), |acc, op| op.adjoint(&acc))
    }
}

/// `Aᵀ` viewed as an operator in its own right.
#[derive(Debug)]
pub struct Transposed<'a>(pub &'a dyn LinearOperator);

impl LinearOperator for Transposed<'_> {
    fn input_shape(&self) -> &[usize] {
        self.0.output_shape()
    }

    fn output_shape(&self) -> &[usize] {
        self.0.input_shape()
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.0.adjoint(x)
    }

    fn adjoint(&self, u: &[f64]) -> Vec<f64> {
        self.0.forward(u)
    }
}

/// Explicit `n × d` matrix whose columns are `A e_j`.
pub fn dense_matrix(a: &dyn LinearOperator, cap: usize) -> Result<DMatrix<f64>> {
    let d: usize = a.input_shape().iter().product();
    let n: usize = a.output_shape().iter().product();
    if d.saturating_mul(n) > cap {
        return Err(Error::DenseCapExceeded { rows: n, cols: d, cap });
    }
    let mut m = DMatrix::zeros(n, d);
    let mut basis = vec![0.0; d];
    for j in 0..d {
        basis[j] = 1.0;
        let col = a.forward(&basis);
        basis[j] = 0.0;
        m.column_mut(j).copy_from_slice(&col);
    }
    Ok(m)
}

/// `y = A x0 + σ_y ε`.
pub fn measure<R: Rng + ?Sized>(
    a: &dyn LinearOperator,
    x0: &SignalField,
    sigma_y: f64,
    rng: &mut R,
) -> Result<SignalField> {
    if sigma_y.is_nan() || sigma_y < 0.0 {
        return Err(Error::NegativeNoise(sigma_y));
    }
    let clean = a.apply(x0)?;
    let noise = SignalField::standard_normal(clean.shape(), rng);
    Ok(clean.lin_comb(1.0, &noise, sigma_y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn field(v: &[f64]) -> SignalField {
        SignalField::from_vec(v.to_vec())
    }

    #[test]
    fn identity_and_mask_examples() {
        let x = field(&[1.0, 2.0, 3.0]);
        assert_eq!(Identity::new(&[3]).apply(&x).unwrap(), x);
        let m = MaskOperator::from_indices(&[3], &[0, 2]).unwrap();
        assert_eq!(m.apply(&x).unwrap().data(), &[1.0, 3.0]);
        assert_eq!(m.apply_transpose(&field(&[7.0, 9.0])).unwrap().data(), &[7.0, 0.0, 9.0]);
        assert!(matches!(m.apply(&field(&[1.0])), Err(Error::ShapeMismatch { .. })));
        assert!(MaskOperator::from_indices(&[3], &[]).is_err());
    }

    #[test]
    fn normalized_blur_preserves_constants() {
        for boundary in [Boundary::Reflect, Boundary::Periodic] {
            let op = ConvolutionOperator::box_blur(&[6, 5], 3, boundary).unwrap();
            let c = SignalField::filled(&[6, 5], 0.37);
            let out = op.apply(&c).unwrap();
            assert!(out.sub(&c).max_abs() < 1e-14);
        }
        let g = ConvolutionOperator::gaussian(&[8, 8], 5, 1.0, Boundary::Reflect).unwrap();
        assert!((g.kernel().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(g.kernel().iter().all(|&k| k >= 0.0));
        assert!(ConvolutionOperator::box_blur(&[4, 4], 2, Boundary::Reflect).is_err());
    }

    #[test]
    fn downsample_adjoint_replicates_blocks() {
        let op = DownsampleOperator::new(&[4, 4], 2).unwrap();
        let u = SignalField::new(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]).unwrap();
        let up = op.apply_transpose(&u).unwrap();
        assert_eq!(up.data()[0], 0.25);
        assert_eq!(up.data()[5], 0.25);
        assert_eq!(up.data()[3], 0.5);
        assert_eq!(up.data()[15], 1.0);
        assert!(DownsampleOperator::new(&[5, 4], 2).is_err());
    }

    #[test]
    fn dense_matrix_examples() {
        let id = dense_matrix(&Identity::new(&[3]), DEFAULT_DENSE_CAP).unwrap();
        assert_eq!(id, DMatrix::identity(3, 3));
        let m = MaskOperator::from_indices(&[3], &[0, 2]).unwrap();
        let dm = dense_matrix(&m, DEFAULT_DENSE_CAP).unwrap();
        assert_eq!(dm, DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]));
        assert!(matches!(
            dense_matrix(&Identity::new(&[100]), 1000),
            Err(Error::DenseCapExceeded { .. })
        ));
    }

    #[test]
    fn random_mask_is_shared_across_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = MaskOperator::random(&[8, 8, 3], 0.8, &mut rng).unwrap();
        for px in m.keep().chunks(3) {
            assert!(px.iter().all(|&k| k == px[0]));
        }
        assert_eq!(m.pixel_mask().len(), 64);
        assert!(m.kept_fraction() > 0.0 && m.kept_fraction() < 0.5);
        assert!(MaskOperator::random(&[4], 1.0, &mut rng).is_err());
    }

    #[test]
    fn measurement_noise() {
        let x = field(&[1.0, -2.0]);
        let a = Identity::new(&[2]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(measure(&a, &x, 0.0, &mut rng).unwrap(), x);
        assert!(matches!(measure(&a, &x, -0.1, &mut rng), Err(Error::NegativeNoise(_))));
        let y1 = measure(&a, &x, 0.01, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let y2 = measure(&a, &x, 0.01, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(y1, y2);
        assert!(y1.sub(&x).max_abs() < 0.1);
    }

    #[test]
    fn reflect_boundary_indexing() {
        let b = Boundary::Reflect;
        assert_eq!(b.resolve(-1, 4), Some(0));
        assert_eq!(b.resolve(-2, 4), Some(1));
        assert_eq!(b.resolve(4, 4), Some(3));
        assert_eq!(b.resolve(5, 4), Some(2));
        assert_eq!(Boundary::Zero.resolve(-1, 4), None);
        assert_eq!(Boundary::Periodic.resolve(-1, 4), Some(3));
    }
}
