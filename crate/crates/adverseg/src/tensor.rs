//! Dense row-major tensors and the seeded PRNG everything else builds on.
//!
//! Tensors are plain `shape + Vec<T>` values. All operations are pure:
//! inputs are never mutated, so values can be shared freely across threads.
//! The PRNG is xoshiro256** seeded through splitmix64, with substreams
//! derived from a (seed, stream index) pair, so any op sequence with fixed
//! seeds is bit-reproducible across platforms.

use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use crate::error::{Error, Result};

/// Element type of the engine: f32 for training/storage, f64 for gradient
/// checking. Everything numeric is generic over this.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from f64 (used for constants and RNG output).
    fn from_c(v: f64) -> Self {
        Self::from_f64(v).expect("f64 constant convertible to scalar")
    }

    fn to_f64_c(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dense n-dimensional array in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Tensor of the given shape with every element equal to `fill`.
    pub fn new(shape: &[usize], fill: T) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::shape("tensor shape must have at least one dim"));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero dimension in shape {shape:?}")));
        }
        let len = shape.iter().product();
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![fill; len],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(shape, T::zero())
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let t = Self::zeros(shape)?;
        if data.len() != t.data.len() {
            return Err(Error::shape(format!(
                "data length {} does not match shape {:?} (expects {})",
                data.len(),
                shape,
                t.data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: vec![T::zero(); self.data.len()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Row-major strides for the current shape.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.shape[i + 1];
        }
        strides
    }

    /// Flat offset of a multi-index.
    pub fn flat_index(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let strides = self.strides();
        index.iter().zip(&strides).map(|(i, s)| i * s).sum()
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.flat_index(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let i = self.flat_index(index);
        self.data[i] = value;
    }

    /// Same data, different shape. Element count must match.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::from_vec(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    fn zip(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same_shape(other)?;
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

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a * b)
    }

    pub fn max_elem(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| if a > b { a } else { b })
    }

    pub fn reduce_sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn reduce_mean(&self) -> T {
        self.reduce_sum() / T::from_c(self.data.len() as f64)
    }

    /// Sum over the given axes; the reduced axes are removed from the shape.
    /// Reducing every axis yields shape `[1]`.
    pub fn reduce_sum_axes(&self, axes: &[usize]) -> Result<Self> {
        for &ax in axes {
            if ax >= self.rank() {
                return Err(Error::Axis {
                    axis: ax,
                    rank: self.rank(),
                });
            }
        }
        let keep: Vec<usize> = (0..self.rank()).filter(|i| !axes.contains(i)).collect();
        let out_shape: Vec<usize> = if keep.is_empty() {
            vec![1]
        } else {
            keep.iter().map(|&i| self.shape[i]).collect()
        };
        let mut out = Tensor::zeros(&out_shape)?;
        let strides = self.strides();
        let out_strides = out.strides();
        let mut index = vec![0usize; self.rank()];
        for (flat, &v) in self.data.iter().enumerate() {
            // decode the flat offset, project onto kept axes
            let mut rem = flat;
            for (i, &s) in strides.iter().enumerate() {
                index[i] = rem / s;
                rem %= s;
            }
            let mut out_flat = 0;
            if !keep.is_empty() {
                for (oi, &i) in keep.iter().enumerate() {
                    out_flat += index[i] * out_strides[oi];
                }
            }
            out.data[out_flat] += v;
        }
        Ok(out)
    }

    /// Mean over the given axes (sum divided by the reduced element count).
    pub fn reduce_mean_axes(&self, axes: &[usize]) -> Result<Self> {
        let summed = self.reduce_sum_axes(axes)?;
        let count: usize = axes
            .iter()
            .collect::<std::collections::BTreeSet<_>>()
            .iter()
            .map(|&&ax| self.shape[ax])
            .product();
        Ok(summed.scale(T::one() / T::from_c(count as f64)))
    }

    /// Dims of a 4-D [N,C,H,W] tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        if self.rank() != 4 {
            return Err(Error::shape(format!(
                "expected rank-4 tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
    }

    /// Zero-pad the two trailing spatial axes of an [N,C,H,W] tensor.
    pub fn pad2d(&self, pad: usize) -> Result<Self> {
        let (n, c, h, w) = self.dims4()?;
        if pad == 0 {
            return Ok(self.clone());
        }
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let mut out = Tensor::zeros(&[n, c, hp, wp])?;
        for ni in 0..n {
            for ci in 0..c {
                for hi in 0..h {
                    let src = ((ni * c + ci) * h + hi) * w;
                    let dst = ((ni * c + ci) * hp + hi + pad) * wp + pad;
                    out.data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
                }
            }
        }
        Ok(out)
    }

    /// Inverse of `pad2d`: drop a border of width `pad`.
    pub fn crop2d(&self, pad: usize) -> Result<Self> {
        let (n, c, hp, wp) = self.dims4()?;
        if pad == 0 {
            return Ok(self.clone());
        }
        if hp <= 2 * pad || wp <= 2 * pad {
            return Err(Error::shape(format!(
                "cannot crop {pad} from spatial dims {hp}x{wp}"
            )));
        }
        let (h, w) = (hp - 2 * pad, wp - 2 * pad);
        let mut out = Tensor::zeros(&[n, c, h, w])?;
        for ni in 0..n {
            for ci in 0..c {
                for hi in 0..h {
                    let src = ((ni * c + ci) * hp + hi + pad) * wp + pad;
                    let dst = ((ni * c + ci) * h + hi) * w;
                    out.data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
                }
            }
        }
        Ok(out)
    }

    /// Flip the trailing spatial axes. `Horizontal` reverses the width axis,
    /// `Vertical` reverses the height axis.
    pub fn flip_spatial(&self, axis: FlipAxis) -> Result<Self> {
        let (outer, h, w) = self.spatial_split()?;
        let mut out = self.clone();
        for o in 0..outer {
            for hi in 0..h {
                for wi in 0..w {
                    let (sh, sw) = match axis {
                        FlipAxis::Horizontal => (hi, w - 1 - wi),
                        FlipAxis::Vertical => (h - 1 - hi, wi),
                    };
                    out.data[(o * h + hi) * w + wi] = self.data[(o * h + sh) * w + sw];
                }
            }
        }
        Ok(out)
    }

    /// Rotate the trailing spatial axes counter-clockwise by `quarter_turns`
    /// quarter turns. Non-square inputs change shape accordingly.
    pub fn rotate90(&self, quarter_turns: u8) -> Result<Self> {
        let turns = quarter_turns % 4;
        if turns == 0 {
            return Ok(self.clone());
        }
        let (outer, h, w) = self.spatial_split()?;
        // one CCW turn: out[o, w-1-wi, hi] = in[o, hi, wi], out is [.., w, h]
        let mut out_shape = self.shape.clone();
        let r = out_shape.len();
        if turns % 2 == 1 {
            out_shape.swap(r - 2, r - 1);
        }
        let (oh, ow) = (out_shape[r - 2], out_shape[r - 1]);
        let mut out = Tensor::zeros(&out_shape)?;
        for o in 0..outer {
            for hi in 0..h {
                for wi in 0..w {
                    let (dh, dw) = match turns {
                        1 => (w - 1 - wi, hi),
                        2 => (h - 1 - hi, w - 1 - wi),
                        3 => (wi, h - 1 - hi),
                        _ => unreachable!(),
                    };
                    out.data[(o * oh + dh) * ow + dw] = self.data[(o * h + hi) * w + wi];
                }
            }
        }
        Ok(out)
    }

    fn spatial_split(&self) -> Result<(usize, usize, usize)> {
        if self.rank() < 2 {
            return Err(Error::shape(
                "spatial ops need at least 2 trailing axes".to_string(),
            ));
        }
        let r = self.rank();
        let h = self.shape[r - 2];
        let w = self.shape[r - 1];
        Ok((self.data.len() / (h * w), h, w))
    }

    /// Deterministic random tensor from the given generator.
    pub fn rand_uniform(rng: &mut Rng, shape: &[usize], a: f64, b: f64) -> Result<Self> {
        if a > b {
            return Err(Error::config(format!("uniform bounds inverted: [{a}, {b}]")));
        }
        let mut t = Tensor::zeros(shape)?;
        for v in &mut t.data {
            *v = T::from_c(rng.uniform(a, b));
        }
        Ok(t)
    }

    pub fn rand_normal(rng: &mut Rng, shape: &[usize], mean: f64, sigma: f64) -> Result<Self> {
        if sigma < 0.0 {
            return Err(Error::config(format!("negative sigma {sigma}")));
        }
        let mut t = Tensor::zeros(shape)?;
        for v in &mut t.data {
            *v = T::from_c(rng.normal(mean, sigma));
        }
        Ok(t)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Convert elements (f32 <-> f64 promotion/demotion).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_c(v.to_f64_c())).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlipAxis {
    Horizontal,
    Vertical,
}

// ---------------------------------------------------------------------------
// PRNG: xoshiro256** seeded via splitmix64.
// ---------------------------------------------------------------------------

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic generator: splitmix64-seeded xoshiro256**.
///
/// Substreams are derived from a (seed, stream index) pair by mixing the
/// stream index through splitmix64 before seeding, so parallel consumers get
/// independent, reproducible streams from one master seed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    s: [u64; 4],
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        Rng {
            s: [
                splitmix64(&mut sm),
                splitmix64(&mut sm),
                splitmix64(&mut sm),
                splitmix64(&mut sm),
            ],
        }
    }

    /// Independent substream for (seed, stream index).
    pub fn substream(seed: u64, stream: u64) -> Self {
        let mut sm = stream.wrapping_mul(0xA24B_AED4_963E_E407).wrapping_add(1);
        Rng::new(seed ^ splitmix64(&mut sm))
    }

    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[1]
            .wrapping_mul(5)
            .rotate_left(7)
            .wrapping_mul(9);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, a: f64, b: f64) -> f64 {
        a + (b - a) * self.next_f64()
    }

    /// Box-Muller; draws two uniforms per call, no caching, so the stream
    /// position is a pure function of the call count.
    pub fn normal(&mut self, mean: f64, sigma: f64) -> f64 {
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        mean + sigma * z
    }

    /// Uniform index in [0, n). n must be nonzero and < 2^32.
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0 && n < (1 << 32));
        (((self.next_u64() >> 32) * n as u64) >> 32) as usize
    }

    pub fn chance(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }

    pub fn state(&self) -> [u64; 4] {
        self.s
    }

    pub fn from_state(s: [u64; 4]) -> Self {
        Rng { s }
    }
}
