//! Generator (encoder-decoder) and discriminator construction and execution.
//!
//! The generator downsamples with conv/batchnorm/relu/maxpool blocks,
//! passes a bottleneck, then upsamples back with stride-2 transposed
//! convolutions; a 1x1 conv head with a per-class sigmoid (or channel
//! softmax) emits the probability map. The discriminator is a stack of
//! stride-2 conv blocks, global average pooling, and a linear head with a
//! sigmoid, one score per batch element. Skip connections and an
//! image-conditioned discriminator are available behind config flags,
//! both off by default.

use crate::error::{Error, Result};
use crate::layers::{
    BatchNorm2d, Conv2d, ConvSpec, ConvTranspose2d, GlobalAvgPool, Init, Layer, MaxPool2d, Mode,
    Param, Relu, Sigmoid, SoftmaxChannel,
};
use crate::tensor::{Rng, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// Independent per-class sigmoid probabilities (default; matches the
    /// per-class binary form of the reconstruction loss).
    SigmoidPerClass,
    /// Channel softmax; per-pixel probabilities sum to 1.
    Softmax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub encoder_channels: Vec<usize>,
    pub head: HeadKind,
    pub disc_channels: Vec<usize>,
    pub skip_connections: bool,
    pub conditional_disc: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            in_channels: 1,
            num_classes: 3,
            encoder_channels: vec![16, 32, 64],
            head: HeadKind::SigmoidPerClass,
            disc_channels: vec![16, 32, 64, 64],
            skip_connections: true,
            conditional_disc: false,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.is_empty() {
            return Err(Error::config("encoder_channels must not be empty"));
        }
        if self.disc_channels.is_empty() {
            return Err(Error::config("disc_channels must not be empty"));
        }
        if self.num_classes < 2 {
            return Err(Error::config(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::config("in_channels must be >= 1"));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.encoder_channels.len()
    }

    /// Channels the discriminator consumes.
    pub fn disc_in_channels(&self) -> usize {
        self.num_classes + if self.conditional_disc { self.in_channels } else { 0 }
    }
}

// conv(3x3, same) -> batchnorm -> relu
struct ConvBnRelu<T> {
    conv: Conv2d<T>,
    bn: BatchNorm2d<T>,
    relu: Relu<T>,
}

impl<T: Scalar> ConvBnRelu<T> {
    fn new(cin: usize, cout: usize, stride: usize, name: &str, rng: &mut Rng) -> Result<Self> {
        let spec = ConvSpec::new(cin, cout, 3).stride(stride).padding(1);
        Ok(ConvBnRelu {
            conv: Conv2d::new(spec, &format!("{name}.conv"), Init::He, rng)?,
            bn: BatchNorm2d::new(cout, &format!("{name}.bn"))?,
            relu: Relu::new(),
        })
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let x = self.conv.forward(x, mode)?;
        let x = self.bn.forward(&x, mode)?;
        self.relu.forward(&x, mode)
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.relu.backward(g)?;
        let g = self.bn.backward(&g)?;
        self.conv.backward(&g)
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.conv.params_mut();
        p.extend(self.bn.params_mut());
        p
    }
}

struct EncBlock<T> {
    block: ConvBnRelu<T>,
    pool: MaxPool2d<T>,
}

struct DecBlock<T> {
    up: ConvTranspose2d<T>,
    bn: BatchNorm2d<T>,
    relu: Relu<T>,
    // present only with skip connections: fuses [decoder, skip] channels
    merge: Option<ConvBnRelu<T>>,
}

/// Encoder-decoder generator. Output spatial size equals input spatial
/// size for any H, W divisible by 2^depth; output values are in (0,1).
pub struct GeneratorNet<T> {
    pub cfg: NetConfig,
    enc: Vec<EncBlock<T>>,
    bottleneck: ConvBnRelu<T>,
    dec: Vec<DecBlock<T>>,
    head: Conv2d<T>,
    head_sigmoid: Sigmoid<T>,
    head_softmax: SoftmaxChannel<T>,
}

pub fn build_generator<T: Scalar>(cfg: &NetConfig, rng: &mut Rng) -> Result<GeneratorNet<T>> {
    cfg.validate()?;
    let chs = &cfg.encoder_channels;
    let depth = chs.len();
    let mut enc = Vec::with_capacity(depth);
    let mut cin = cfg.in_channels;
    for (i, &c) in chs.iter().enumerate() {
        enc.push(EncBlock {
            block: ConvBnRelu::new(cin, c, 1, &format!("enc{i}"), rng)?,
            pool: MaxPool2d::new(),
        });
        cin = c;
    }
    let bottleneck = ConvBnRelu::new(cin, cin, 1, "bottleneck", rng)?;
    let mut dec = Vec::with_capacity(depth);
    let mut cur = cin;
    for i in (0..depth).rev() {
        let cout = chs[i];
        let spec = ConvSpec::new(cur, cout, 2).stride(2);
        let merge = if cfg.skip_connections {
            Some(ConvBnRelu::new(
                2 * cout,
                cout,
                1,
                &format!("dec{i}.merge"),
                rng,
            )?)
        } else {
            None
        };
        dec.push(DecBlock {
            up: ConvTranspose2d::new(spec, &format!("dec{i}.up"), Init::He, rng)?,
            bn: BatchNorm2d::new(cout, &format!("dec{i}.bn"))?,
            relu: Relu::new(),
            merge,
        });
        cur = cout;
    }
    let head = Conv2d::new(
        ConvSpec::new(cur, cfg.num_classes, 1),
        "head",
        Init::Xavier,
        rng,
    )?;
    Ok(GeneratorNet {
        cfg: cfg.clone(),
        enc,
        bottleneck,
        dec,
        head,
        head_sigmoid: Sigmoid::new(),
        head_softmax: SoftmaxChannel::new(),
    })
}

impl<T: Scalar> GeneratorNet<T> {
    /// Probability map [N,C,H,W] for an image batch [N,Cin,H,W].
    pub fn forward(&mut self, image: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (_, cin, h, w) = image.dims4()?;
        if cin != self.cfg.in_channels {
            return Err(Error::shape(format!(
                "generator expects {} image channels, got {cin}",
                self.cfg.in_channels
            )));
        }
        let div = 1usize << self.cfg.depth();
        if h % div != 0 || w % div != 0 {
            return Err(Error::shape(format!(
                "spatial size {h}x{w} not divisible by 2^{} (encoder depth)",
                self.cfg.depth()
            )));
        }
        let mut x = image.clone();
        let mut skips = Vec::with_capacity(self.enc.len());
        for e in &mut self.enc {
            let pre_pool = e.block.forward(&x, mode)?;
            x = e.pool.forward(&pre_pool, mode)?;
            skips.push(pre_pool);
        }
        x = self.bottleneck.forward(&x, mode)?;
        for (di, d) in self.dec.iter_mut().enumerate() {
            x = d.up.forward(&x, mode)?;
            x = d.bn.forward(&x, mode)?;
            x = d.relu.forward(&x, mode)?;
            if let Some(merge) = &mut d.merge {
                let skip = &skips[self.enc.len() - 1 - di];
                let cat = concat_channels(&x, skip)?;
                x = merge.forward(&cat, mode)?;
            }
        }
        let logits = self.head.forward(&x, mode)?;
        match self.cfg.head {
            HeadKind::SigmoidPerClass => self.head_sigmoid.forward(&logits, mode),
            HeadKind::Softmax => self.head_softmax.forward(&logits, mode),
        }
    }

    /// Backprop from a gradient w.r.t. the probability map. Accumulates
    /// parameter gradients; returns the gradient w.r.t. the input image.
    pub fn backward(&mut self, grad_prob: &Tensor<T>) -> Result<Tensor<T>> {
        let g = match self.cfg.head {
            HeadKind::SigmoidPerClass => self.head_sigmoid.backward(grad_prob)?,
            HeadKind::Softmax => self.head_softmax.backward(grad_prob)?,
        };
        let mut g = self.head.backward(&g)?;
        let depth = self.enc.len();
        let mut skip_grads: Vec<Option<Tensor<T>>> = (0..depth).map(|_| None).collect();
        for (di, d) in self.dec.iter_mut().enumerate().rev() {
            if let Some(merge) = &mut d.merge {
                let gm = merge.backward(&g)?;
                let skip_ch = gm.shape()[1] / 2;
                let (g_dec, g_skip) = split_channels(&gm, skip_ch)?;
                skip_grads[depth - 1 - di] = Some(g_skip);
                g = g_dec;
            }
            g = d.relu.backward(&g)?;
            g = d.bn.backward(&g)?;
            g = d.up.backward(&g)?;
        }
        g = self.bottleneck.backward(&g)?;
        for (ei, e) in self.enc.iter_mut().enumerate().rev() {
            g = e.pool.backward(&g)?;
            if let Some(sg) = skip_grads[ei].take() {
                g = g.add(&sg)?;
            }
            g = e.block.backward(&g)?;
        }
        Ok(g)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        for e in &mut self.enc {
            out.extend(e.block.params_mut());
        }
        out.extend(self.bottleneck.params_mut());
        for d in &mut self.dec {
            out.extend(d.up.params_mut());
            out.extend(d.bn.params_mut());
            if let Some(m) = &mut d.merge {
                out.extend(m.params_mut());
            }
        }
        out.extend(self.head.params_mut());
        out
    }
}

/// Convolutional discriminator: stride-2 blocks, global average pool,
/// 1x1 linear head, sigmoid. One score in (0,1) per batch element.
pub struct DiscriminatorNet<T> {
    pub cfg: NetConfig,
    blocks: Vec<ConvBnRelu<T>>,
    gap: GlobalAvgPool<T>,
    head: Conv2d<T>,
    sigmoid: Sigmoid<T>,
    batch: usize,
}

pub fn build_discriminator<T: Scalar>(cfg: &NetConfig, rng: &mut Rng) -> Result<DiscriminatorNet<T>> {
    cfg.validate()?;
    let mut blocks = Vec::with_capacity(cfg.disc_channels.len());
    let mut cin = cfg.disc_in_channels();
    for (i, &c) in cfg.disc_channels.iter().enumerate() {
        blocks.push(ConvBnRelu::new(cin, c, 2, &format!("disc{i}"), rng)?);
        cin = c;
    }
    let head = Conv2d::new(ConvSpec::new(cin, 1, 1), "disc_head", Init::Xavier, rng)?;
    Ok(DiscriminatorNet {
        cfg: cfg.clone(),
        blocks,
        gap: GlobalAvgPool::new(),
        head,
        sigmoid: Sigmoid::new(),
        batch: 0,
    })
}

impl<T: Scalar> DiscriminatorNet<T> {
    /// Scores [N,1] for a segmentation-map batch [N,C,H,W] (C plus image
    /// channels when image-conditioned).
    pub fn forward(&mut self, seg_map: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (n, c, _, _) = seg_map.dims4()?;
        if c != self.cfg.disc_in_channels() {
            return Err(Error::shape(format!(
                "discriminator expects {} channels, got {c}",
                self.cfg.disc_in_channels()
            )));
        }
        let mut x = seg_map.clone();
        for b in &mut self.blocks {
            x = b.forward(&x, mode)?;
        }
        let x = self.gap.forward(&x, mode)?;
        let x = self.head.forward(&x, mode)?;
        let scores = self.sigmoid.forward(&x, mode)?;
        self.batch = n;
        scores.reshape(&[n, 1])
    }

    /// Backprop from a gradient w.r.t. the [N,1] scores; returns the
    /// gradient w.r.t. the input segmentation map.
    pub fn backward(&mut self, grad_scores: &Tensor<T>) -> Result<Tensor<T>> {
        let g = grad_scores.reshape(&[self.batch, 1, 1, 1])?;
        let g = self.sigmoid.backward(&g)?;
        let g = self.head.backward(&g)?;
        let mut g = self.gap.backward(&g)?;
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g)?;
        }
        Ok(g)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out.extend(self.head.params_mut());
        out
    }
}

pub fn param_count<'a, T: Scalar + 'a>(params: impl IntoIterator<Item = &'a mut Param<T>>) -> usize {
    params.into_iter().map(|p| p.value.len()).sum()
}

/// Concatenate two [N,C,H,W] tensors along the channel axis.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, ca, h, w) = a.dims4()?;
    let (nb, cb, hb, wb) = b.dims4()?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::shape(format!(
            "concat mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros(&[n, ca + cb, h, w])?;
    let hw = h * w;
    for ni in 0..n {
        let dst = ni * (ca + cb) * hw;
        let sa = ni * ca * hw;
        let sb = ni * cb * hw;
        out.data_mut()[dst..dst + ca * hw].copy_from_slice(&a.data()[sa..sa + ca * hw]);
        out.data_mut()[dst + ca * hw..dst + (ca + cb) * hw]
            .copy_from_slice(&b.data()[sb..sb + cb * hw]);
    }
    Ok(out)
}

/// Split an [N,Ca+Cb,H,W] tensor into ([N,Ca,..], [N,Cb,..]).
pub fn split_channels<T: Scalar>(x: &Tensor<T>, ca: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = x.dims4()?;
    if ca >= c {
        return Err(Error::shape(format!("cannot split {ca} channels from {c}")));
    }
    let cb = c - ca;
    let hw = h * w;
    let mut a = Tensor::zeros(&[n, ca, h, w])?;
    let mut b = Tensor::zeros(&[n, cb, h, w])?;
    for ni in 0..n {
        let src = ni * c * hw;
        a.data_mut()[ni * ca * hw..(ni + 1) * ca * hw]
            .copy_from_slice(&x.data()[src..src + ca * hw]);
        b.data_mut()[ni * cb * hw..(ni + 1) * cb * hw]
            .copy_from_slice(&x.data()[src + ca * hw..src + c * hw]);
    }
    Ok((a, b))
}
