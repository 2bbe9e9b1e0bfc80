//! Differentiable layer primitives with explicit forward/backward passes.
//!
//! Every layer caches what its backward pass needs during forward; the cache
//! is only valid between a forward and its matching backward. Parameter
//! gradients accumulate into each `Param` until `zero_grads` is called.
//! Convolution is cross-correlation (no kernel flip); the transposed
//! convolution is the exact adjoint of the convolution forward map.

use crate::error::{Error, Result};
use crate::tensor::{Rng, Scalar, Tensor};

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A named parameter with its gradient accumulator. Non-trainable params
/// (batch norm running stats) are serialized but skipped by the optimizer.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = value.zeros_like();
        Param {
            name: name.into(),
            value,
            grad,
            trainable: true,
        }
    }

    pub fn frozen(name: impl Into<String>, value: Tensor<T>) -> Self {
        let mut p = Self::new(name, value);
        p.trainable = false;
        p
    }
}

pub trait Layer<T: Scalar> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>>;
    /// Gradient of the loss w.r.t. this layer's input, given the gradient
    /// w.r.t. its output. Accumulates parameter gradients as a side effect.
    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>>;
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        Vec::new()
    }
}

/// Convolution geometry. `out_size` is floor((H + 2p - k) / s) + 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel_size: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel_size,
            stride: 1,
            padding: 0,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = p;
        self
    }

    pub fn out_size(&self, input: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel_size {
            return Err(Error::shape(format!(
                "kernel {} does not fit input {} with padding {}",
                self.kernel_size, input, self.padding
            )));
        }
        Ok((padded - self.kernel_size) / self.stride + 1)
    }

    /// Transposed-conv output size: (H - 1) * s - 2p + k.
    pub fn transpose_out_size(&self, input: usize) -> Result<usize> {
        let full = (input - 1) * self.stride + self.kernel_size;
        if full < 2 * self.padding + 1 {
            return Err(Error::shape(format!(
                "transposed conv output collapses: input {}, spec {:?}",
                input, self
            )));
        }
        Ok(full - 2 * self.padding)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// He-uniform: bound sqrt(6 / fan_in), for layers feeding ReLU.
    He,
    /// Xavier-uniform: bound sqrt(6 / (fan_in + fan_out)), for heads.
    Xavier,
}

fn init_weight<T: Scalar>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    init: Init,
    rng: &mut Rng,
) -> Result<Tensor<T>> {
    let bound = match init {
        Init::He => (6.0 / fan_in as f64).sqrt(),
        Init::Xavier => (6.0 / (fan_in + fan_out) as f64).sqrt(),
    };
    Tensor::rand_uniform(rng, shape, -bound, bound)
}

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

/// 2-D cross-correlation with per-output-channel bias.
/// Weight layout: [Cout, Cin, k, k].
pub struct Conv2d<T> {
    pub spec: ConvSpec,
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<Tensor<T>>, // padded input
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(spec: ConvSpec, name: &str, init: Init, rng: &mut Rng) -> Result<Self> {
        let k = spec.kernel_size;
        let fan_in = spec.in_channels * k * k;
        let fan_out = spec.out_channels * k * k;
        let weight = init_weight(
            &[spec.out_channels, spec.in_channels, k, k],
            fan_in,
            fan_out,
            init,
            rng,
        )?;
        Ok(Conv2d {
            spec,
            weight: Param::new(format!("{name}.weight"), weight),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[spec.out_channels])?),
            cache: None,
        })
    }
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let (n, cin, h, w) = x.dims4()?;
        let s = &self.spec;
        if cin != s.in_channels {
            return Err(Error::shape(format!(
                "conv2d expects {} input channels, got {cin}",
                s.in_channels
            )));
        }
        let (ho, wo) = (s.out_size(h)?, s.out_size(w)?);
        let xp = x.pad2d(s.padding)?;
        let (_, _, hp, wp) = xp.dims4()?;
        let mut out = Tensor::zeros(&[n, s.out_channels, ho, wo])?;
        let k = s.kernel_size;
        let stride = s.stride;
        let wdat = self.weight.value.data();
        let xdat = xp.data();
        let odat = out.data_mut();
        for ni in 0..n {
            for co in 0..s.out_channels {
                let b = self.bias.value.data()[co];
                let obase = (ni * s.out_channels + co) * ho * wo;
                odat[obase..obase + ho * wo].iter_mut().for_each(|v| *v = b);
                for ci in 0..cin {
                    let xbase = (ni * cin + ci) * hp * wp;
                    let wbase = (co * cin + ci) * k * k;
                    for kh in 0..k {
                        for kw in 0..k {
                            let wv = wdat[wbase + kh * k + kw];
                            for oh in 0..ho {
                                let xrow = xbase + (oh * stride + kh) * wp + kw;
                                let orow = obase + oh * wo;
                                if stride == 1 {
                                    let xs = &xdat[xrow..xrow + wo];
                                    let os = &mut odat[orow..orow + wo];
                                    for (o, &xv) in os.iter_mut().zip(xs) {
                                        *o += wv * xv;
                                    }
                                } else {
                                    for ow in 0..wo {
                                        odat[orow + ow] += wv * xdat[xrow + ow * stride];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        self.cache = Some(xp);
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let xp = self
            .cache
            .take()
            .ok_or_else(|| Error::shape("conv2d backward without forward".to_string()))?;
        let s = self.spec;
        let (n, cin, hp, wp) = xp.dims4()?;
        let (gn, gco, ho, wo) = grad_out.dims4()?;
        if gn != n || gco != s.out_channels {
            return Err(Error::shape(format!(
                "conv2d backward grad shape {:?} inconsistent with cached input",
                grad_out.shape()
            )));
        }
        let k = s.kernel_size;
        let stride = s.stride;
        let mut gxp = xp.zeros_like();
        let xdat = xp.data();
        let gdat = grad_out.data();
        let wdat = self.weight.value.data();
        {
            let gw = self.weight.grad.data_mut();
            let gxpd = gxp.data_mut();
            for ni in 0..n {
                for co in 0..s.out_channels {
                    let obase = (ni * s.out_channels + co) * ho * wo;
                    let mut gb = T::zero();
                    for &g in &gdat[obase..obase + ho * wo] {
                        gb += g;
                    }
                    self.bias.grad.data_mut()[co] += gb;
                    for ci in 0..cin {
                        let xbase = (ni * cin + ci) * hp * wp;
                        let wbase = (co * cin + ci) * k * k;
                        for kh in 0..k {
                            for kw in 0..k {
                                let wv = wdat[wbase + kh * k + kw];
                                let mut gwv = T::zero();
                                for oh in 0..ho {
                                    let xrow = xbase + (oh * stride + kh) * wp + kw;
                                    let orow = obase + oh * wo;
                                    if stride == 1 {
                                        let xs = &xdat[xrow..xrow + wo];
                                        let gs = &gdat[orow..orow + wo];
                                        let gx = &mut gxpd[xrow..xrow + wo];
                                        for ((gxv, &g), &xv) in
                                            gx.iter_mut().zip(gs).zip(xs)
                                        {
                                            *gxv += wv * g;
                                            gwv += g * xv;
                                        }
                                    } else {
                                        for ow in 0..wo {
                                            let g = gdat[orow + ow];
                                            gxpd[xrow + ow * stride] += wv * g;
                                            gwv += g * xdat[xrow + ow * stride];
                                        }
                                    }
                                }
                                gw[wbase + kh * k + kw] += gwv;
                            }
                        }
                    }
                }
            }
        }
        gxp.crop2d(s.padding)
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

// ---------------------------------------------------------------------------
// ConvTranspose2d
// ---------------------------------------------------------------------------

/// Transposed convolution: the adjoint of `Conv2d`'s forward map with the
/// in/out channel roles swapped, plus a per-output-channel bias.
/// Weight layout: [Cin, Cout, k, k]. Output size (H-1)*s - 2p + k.
pub struct ConvTranspose2d<T> {
    pub spec: ConvSpec,
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<Tensor<T>>, // input
}

impl<T: Scalar> ConvTranspose2d<T> {
    pub fn new(spec: ConvSpec, name: &str, init: Init, rng: &mut Rng) -> Result<Self> {
        let k = spec.kernel_size;
        let fan_in = spec.in_channels * k * k;
        let fan_out = spec.out_channels * k * k;
        let weight = init_weight(
            &[spec.in_channels, spec.out_channels, k, k],
            fan_in,
            fan_out,
            init,
            rng,
        )?;
        Ok(ConvTranspose2d {
            spec,
            weight: Param::new(format!("{name}.weight"), weight),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[spec.out_channels])?),
            cache: None,
        })
    }

    /// Scatter pass shared by forward and the adjoint direction of backward.
    /// Accumulates into a full (uncropped) output buffer, then crops padding.
    fn scatter(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self.spec;
        let (n, cin, h, w) = x.dims4()?;
        let k = s.kernel_size;
        let stride = s.stride;
        let (hf, wf) = ((h - 1) * stride + k, (w - 1) * stride + k);
        let mut full = Tensor::zeros(&[n, s.out_channels, hf, wf])?;
        let xdat = x.data();
        let wdat = self.weight.value.data();
        let fdat = full.data_mut();
        for ni in 0..n {
            for ci in 0..cin {
                let xbase = (ni * cin + ci) * h * w;
                for co in 0..s.out_channels {
                    let fbase = (ni * s.out_channels + co) * hf * wf;
                    let wbase = (ci * s.out_channels + co) * k * k;
                    for kh in 0..k {
                        for kw in 0..k {
                            let wv = wdat[wbase + kh * k + kw];
                            for ih in 0..h {
                                let xrow = xbase + ih * w;
                                let frow = fbase + (ih * stride + kh) * wf + kw;
                                for iw in 0..w {
                                    fdat[frow + iw * stride] += wv * xdat[xrow + iw];
                                }
                            }
                        }
                    }
                }
            }
        }
        full.crop2d(s.padding)
    }
}

impl<T: Scalar> Layer<T> for ConvTranspose2d<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let s = self.spec;
        let (_, cin, h, w) = x.dims4()?;
        if cin != s.in_channels {
            return Err(Error::shape(format!(
                "conv_transpose2d expects {} input channels, got {cin}",
                s.in_channels
            )));
        }
        s.transpose_out_size(h)?;
        s.transpose_out_size(w)?;
        let mut out = self.scatter(x)?;
        let (n, cout, ho, wo) = out.dims4()?;
        let odat = out.data_mut();
        for ni in 0..n {
            for co in 0..cout {
                let b = self.bias.value.data()[co];
                let base = (ni * cout + co) * ho * wo;
                for v in &mut odat[base..base + ho * wo] {
                    *v += b;
                }
            }
        }
        self.cache = Some(x.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self
            .cache
            .take()
            .ok_or_else(|| Error::shape("conv_transpose2d backward without forward".to_string()))?;
        let s = self.spec;
        let (n, cin, h, w) = x.dims4()?;
        let k = s.kernel_size;
        let stride = s.stride;
        // pad grad back out to the uncropped buffer; the backward of scatter
        // is a gather (the conv2d forward pattern).
        let gp = grad_out.pad2d(s.padding)?;
        let (_, cout, hf, wf) = gp.dims4()?;
        let mut gx = x.zeros_like();
        let xdat = x.data();
        let gdat = gp.data();
        let wdat = self.weight.value.data();
        {
            let gw = self.weight.grad.data_mut();
            let gxd = gx.data_mut();
            for ni in 0..n {
                for ci in 0..cin {
                    let xbase = (ni * cin + ci) * h * w;
                    for co in 0..cout {
                        let fbase = (ni * cout + co) * hf * wf;
                        let wbase = (ci * cout + co) * k * k;
                        for kh in 0..k {
                            for kw in 0..k {
                                let wv = wdat[wbase + kh * k + kw];
                                let mut gwv = T::zero();
                                for ih in 0..h {
                                    let xrow = xbase + ih * w;
                                    let frow = fbase + (ih * stride + kh) * wf + kw;
                                    for iw in 0..w {
                                        let g = gdat[frow + iw * stride];
                                        gxd[xrow + iw] += wv * g;
                                        gwv += g * xdat[xrow + iw];
                                    }
                                }
                                gw[wbase + kh * k + kw] += gwv;
                            }
                        }
                    }
                }
            }
        }
        let gb = self.bias.grad.data_mut();
        let (gn, gco, ho, wo) = grad_out.dims4()?;
        debug_assert_eq!((gn, gco), (n, cout));
        for ni in 0..gn {
            for co in 0..gco {
                let base = (ni * gco + co) * ho * wo;
                let mut acc = T::zero();
                for &g in &grad_out.data()[base..base + ho * wo] {
                    acc += g;
                }
                gb[co] += acc;
            }
        }
        Ok(gx)
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

// ---------------------------------------------------------------------------
// BatchNorm2d
// ---------------------------------------------------------------------------

struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    mode: Mode,
}

/// Per-channel batch normalization over [N,C,H,W].
/// Train mode normalizes with batch statistics and updates running stats
/// (unbiased variance); eval mode uses running stats.
pub struct BatchNorm2d<T> {
    pub channels: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache<T>>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize, name: &str) -> Result<Self> {
        Ok(BatchNorm2d {
            channels,
            gamma: Param::new(format!("{name}.gamma"), Tensor::new(&[channels], T::one())?),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[channels])?),
            running_mean: Param::frozen(format!("{name}.running_mean"), Tensor::zeros(&[channels])?),
            running_var: Param::frozen(
                format!("{name}.running_var"),
                Tensor::new(&[channels], T::one())?,
            ),
            momentum: BATCHNORM_MOMENTUM,
            eps: BATCHNORM_EPS,
            cache: None,
        })
    }
}

impl<T: Scalar> Layer<T> for BatchNorm2d<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.channels {
            return Err(Error::shape(format!(
                "batchnorm expects {} channels, got {c}",
                self.channels
            )));
        }
        let m = n * h * w;
        let eps = T::from_c(self.eps);
        let mut xhat = x.zeros_like();
        let mut inv_std = vec![T::zero(); c];
        match mode {
            Mode::Train => {
                if m < 2 {
                    return Err(Error::DegenerateBatch);
                }
                let mf = T::from_c(m as f64);
                for ci in 0..c {
                    let mut sum = T::zero();
                    let mut sum_sq = T::zero();
                    for ni in 0..n {
                        let base = (ni * c + ci) * h * w;
                        for &v in &x.data()[base..base + h * w] {
                            sum += v;
                            sum_sq += v * v;
                        }
                    }
                    let mean = sum / mf;
                    let var = sum_sq / mf - mean * mean;
                    let var = if var < T::zero() { T::zero() } else { var };
                    let istd = T::one() / (var + eps).sqrt();
                    inv_std[ci] = istd;
                    for ni in 0..n {
                        let base = (ni * c + ci) * h * w;
                        for i in base..base + h * w {
                            xhat.data_mut()[i] = (x.data()[i] - mean) * istd;
                        }
                    }
                    let mom = T::from_c(self.momentum);
                    let unbiased = var * mf / T::from_c((m - 1) as f64);
                    let rm = self.running_mean.value.data_mut();
                    rm[ci] = (T::one() - mom) * rm[ci] + mom * mean;
                    let rv = self.running_var.value.data_mut();
                    rv[ci] = (T::one() - mom) * rv[ci] + mom * unbiased;
                }
            }
            Mode::Eval => {
                for ci in 0..c {
                    let mean = self.running_mean.value.data()[ci];
                    let var = self.running_var.value.data()[ci];
                    let istd = T::one() / (var + eps).sqrt();
                    inv_std[ci] = istd;
                    for ni in 0..n {
                        let base = (ni * c + ci) * h * w;
                        for i in base..base + h * w {
                            xhat.data_mut()[i] = (x.data()[i] - mean) * istd;
                        }
                    }
                }
            }
        }
        let mut out = xhat.clone();
        for ci in 0..c {
            let g = self.gamma.value.data()[ci];
            let b = self.beta.value.data()[ci];
            for ni in 0..n {
                let base = (ni * c + ci) * h * w;
                for v in &mut out.data_mut()[base..base + h * w] {
                    *v = g * *v + b;
                }
            }
        }
        self.cache = Some(BnCache {
            xhat,
            inv_std,
            mode,
        });
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::shape("batchnorm backward without forward".to_string()))?;
        let (n, c, h, w) = grad_out.dims4()?;
        let m = n * h * w;
        let mf = T::from_c(m as f64);
        let mut gx = grad_out.zeros_like();
        for ci in 0..c {
            let gamma = self.gamma.value.data()[ci];
            let istd = cache.inv_std[ci];
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for ni in 0..n {
                let base = (ni * c + ci) * h * w;
                for i in base..base + h * w {
                    let g = grad_out.data()[i];
                    sum_g += g;
                    sum_gx += g * cache.xhat.data()[i];
                }
            }
            self.beta.grad.data_mut()[ci] += sum_g;
            self.gamma.grad.data_mut()[ci] += sum_gx;
            for ni in 0..n {
                let base = (ni * c + ci) * h * w;
                for i in base..base + h * w {
                    let g = grad_out.data()[i];
                    let v = match cache.mode {
                        // d/dx of batch-stat normalization, all at once
                        Mode::Train => {
                            gamma * istd / mf
                                * (mf * g - sum_g - cache.xhat.data()[i] * sum_gx)
                        }
                        // running stats are constants in eval mode
                        Mode::Eval => gamma * istd * g,
                    };
                    gx.data_mut()[i] = v;
                }
            }
        }
        Ok(gx)
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![
            &mut self.gamma,
            &mut self.beta,
            &mut self.running_mean,
            &mut self.running_var,
        ]
    }
}

// ---------------------------------------------------------------------------
// Pooling and activations
// ---------------------------------------------------------------------------

/// 2x2 max pooling with stride 2. Ties route the gradient to the first
/// occurrence in row-major scan order.
pub struct MaxPool2d<T> {
    argmax: Option<(Vec<usize>, Vec<usize>)>, // (input shape cache via tensor, flat argmax)
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> MaxPool2d<T> {
    pub fn new() -> Self {
        MaxPool2d {
            argmax: None,
            _marker: std::marker::PhantomData,
        }
    }
}

impl<T: Scalar> Default for MaxPool2d<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Layer<T> for MaxPool2d<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let (n, c, h, w) = x.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!(
                "maxpool2d requires even spatial dims, got {h}x{w}"
            )));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[n, c, ho, wo])?;
        let mut argmax = vec![0usize; out.len()];
        for nc in 0..n * c {
            let xbase = nc * h * w;
            let obase = nc * ho * wo;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best_i = xbase + (2 * oh) * w + 2 * ow;
                    let mut best = x.data()[best_i];
                    for (dh, dw) in [(0, 1), (1, 0), (1, 1)] {
                        let i = xbase + (2 * oh + dh) * w + 2 * ow + dw;
                        if x.data()[i] > best {
                            best = x.data()[i];
                            best_i = i;
                        }
                    }
                    out.data_mut()[obase + oh * wo + ow] = best;
                    argmax[obase + oh * wo + ow] = best_i;
                }
            }
        }
        self.argmax = Some((x.shape().to_vec(), argmax));
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (in_shape, argmax) = self
            .argmax
            .take()
            .ok_or_else(|| Error::shape("maxpool backward without forward".to_string()))?;
        let mut gx = Tensor::zeros(&in_shape)?;
        for (o, &src) in argmax.iter().enumerate() {
            gx.data_mut()[src] += grad_out.data()[o];
        }
        Ok(gx)
    }
}

pub struct Relu<T> {
    mask: Option<Vec<bool>>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> Relu<T> {
    pub fn new() -> Self {
        Relu {
            mask: None,
            _marker: std::marker::PhantomData,
        }
    }
}

impl<T: Scalar> Default for Relu<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Layer<T> for Relu<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        self.mask = Some(x.data().iter().map(|&v| v > T::zero()).collect());
        Ok(x.map(|v| if v > T::zero() { v } else { T::zero() }))
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mask = self
            .mask
            .take()
            .ok_or_else(|| Error::shape("relu backward without forward".to_string()))?;
        let mut gx = grad_out.clone();
        for (v, keep) in gx.data_mut().iter_mut().zip(mask) {
            if !keep {
                *v = T::zero();
            }
        }
        Ok(gx)
    }
}

pub struct Sigmoid<T> {
    out: Option<Tensor<T>>,
}

impl<T: Scalar> Sigmoid<T> {
    pub fn new() -> Self {
        Sigmoid { out: None }
    }
}

impl<T: Scalar> Default for Sigmoid<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    // split on sign to avoid exp overflow
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Layer<T> for Sigmoid<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let out = x.map(sigmoid_scalar);
        self.out = Some(out.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self
            .out
            .take()
            .ok_or_else(|| Error::shape("sigmoid backward without forward".to_string()))?;
        grad_out.mul(&out.map(|s| s * (T::one() - s)))
    }
}

/// Softmax over the channel axis of [N,C,H,W]; per-pixel channel sums are 1.
pub struct SoftmaxChannel<T> {
    out: Option<Tensor<T>>,
}

impl<T: Scalar> SoftmaxChannel<T> {
    pub fn new() -> Self {
        SoftmaxChannel { out: None }
    }
}

impl<T: Scalar> Default for SoftmaxChannel<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Layer<T> for SoftmaxChannel<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let (n, c, h, w) = x.dims4()?;
        let mut out = x.zeros_like();
        let hw = h * w;
        for ni in 0..n {
            for p in 0..hw {
                let mut maxv = T::neg_infinity();
                for ci in 0..c {
                    maxv = maxv.max(x.data()[(ni * c + ci) * hw + p]);
                }
                let mut denom = T::zero();
                for ci in 0..c {
                    let e = (x.data()[(ni * c + ci) * hw + p] - maxv).exp();
                    out.data_mut()[(ni * c + ci) * hw + p] = e;
                    denom += e;
                }
                for ci in 0..c {
                    out.data_mut()[(ni * c + ci) * hw + p] /= denom;
                }
            }
        }
        self.out = Some(out.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self
            .out
            .take()
            .ok_or_else(|| Error::shape("softmax backward without forward".to_string()))?;
        let (n, c, h, w) = out.dims4()?;
        let hw = h * w;
        let mut gx = grad_out.zeros_like();
        for ni in 0..n {
            for p in 0..hw {
                let mut dot = T::zero();
                for ci in 0..c {
                    let i = (ni * c + ci) * hw + p;
                    dot += out.data()[i] * grad_out.data()[i];
                }
                for ci in 0..c {
                    let i = (ni * c + ci) * hw + p;
                    gx.data_mut()[i] = out.data()[i] * (grad_out.data()[i] - dot);
                }
            }
        }
        Ok(gx)
    }
}

/// Global average pool: [N,C,H,W] -> [N,C,1,1].
pub struct GlobalAvgPool<T> {
    in_shape: Option<Vec<usize>>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> GlobalAvgPool<T> {
    pub fn new() -> Self {
        GlobalAvgPool {
            in_shape: None,
            _marker: std::marker::PhantomData,
        }
    }
}

impl<T: Scalar> Default for GlobalAvgPool<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Layer<T> for GlobalAvgPool<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let (n, c, h, w) = x.dims4()?;
        let mut out = Tensor::zeros(&[n, c, 1, 1])?;
        let inv = T::one() / T::from_c((h * w) as f64);
        for nc in 0..n * c {
            let base = nc * h * w;
            let mut acc = T::zero();
            for &v in &x.data()[base..base + h * w] {
                acc += v;
            }
            out.data_mut()[nc] = acc * inv;
        }
        self.in_shape = Some(x.shape().to_vec());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self
            .in_shape
            .take()
            .ok_or_else(|| Error::shape("avgpool backward without forward".to_string()))?;
        let (h, w) = (shape[2], shape[3]);
        let inv = T::one() / T::from_c((h * w) as f64);
        let mut gx = Tensor::zeros(&shape)?;
        for nc in 0..shape[0] * shape[1] {
            let g = grad_out.data()[nc] * inv;
            let base = nc * h * w;
            for v in &mut gx.data_mut()[base..base + h * w] {
                *v = g;
            }
        }
        Ok(gx)
    }
}
