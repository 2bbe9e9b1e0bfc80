//! Synthetic phantom dataset, augmentation, one-hot encoding, and the
//! on-disk formats (TSR1 tensors and the line-oriented manifest).
//!
//! Phantoms are single-blob images with an elliptical core (class 1),
//! optionally ringed by class 2, on a flat background, with per-class mean
//! intensity plus Gaussian noise. Generation is a pure function of
//! (seed, sample index), so datasets are bit-reproducible.
//!
//! TSR1 layout: magic `54 53 52 31` ("TSR1"), u8 rank, rank x u32 LE dims,
//! u8 dtype tag (0 = f32, 1 = u8), raw little-endian payload. No
//! compression. File size is 5 + 4*rank + payload bytes.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{FlipAxis, Rng, Scalar, Tensor};

pub const TSR1_MAGIC: [u8; 4] = *b"TSR1";
pub const DTYPE_F32: u8 = 0;
pub const DTYPE_U8: u8 = 1;

/// Integer label map [H,W], values in 0..C-1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize) -> Self {
        LabelMap {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn get(&self, h: usize, w: usize) -> u8 {
        self.data[h * self.width + w]
    }

    pub fn set(&mut self, h: usize, w: usize, v: u8) {
        self.data[h * self.width + w] = v;
    }

    pub fn flip(&self, axis: FlipAxis) -> Self {
        let mut out = self.clone();
        for h in 0..self.height {
            for w in 0..self.width {
                let (sh, sw) = match axis {
                    FlipAxis::Horizontal => (h, self.width - 1 - w),
                    FlipAxis::Vertical => (self.height - 1 - h, w),
                };
                out.data[h * self.width + w] = self.get(sh, sw);
            }
        }
        out
    }

    pub fn rotate90(&self, quarter_turns: u8) -> Self {
        let turns = quarter_turns % 4;
        if turns == 0 {
            return self.clone();
        }
        let (h, w) = (self.height, self.width);
        let (oh, ow) = if turns % 2 == 1 { (w, h) } else { (h, w) };
        let mut out = LabelMap::new(oh, ow);
        for hi in 0..h {
            for wi in 0..w {
                let (dh, dw) = match turns {
                    1 => (w - 1 - wi, hi),
                    2 => (h - 1 - hi, w - 1 - wi),
                    3 => (wi, h - 1 - hi),
                    _ => unreachable!(),
                };
                out.data[dh * ow + dw] = self.get(hi, wi);
            }
        }
        out
    }

    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0usize; num_classes];
        for &v in &self.data {
            counts[v as usize] += 1;
        }
        counts
    }
}

/// One dataset element: image intensities in [0,1] plus its label map.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>, // [Cin,H,W]
    pub labels: LabelMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub in_channels: usize,
    /// Inclusive range of blob counts per image.
    pub blob_count: (usize, usize),
    /// Core semi-axis range, in pixels.
    pub radius: (f64, f64),
    /// Ring width around the core when a ring class exists.
    pub ring_width: f64,
    /// Mean intensity per class; length num_classes.
    pub contrast: Vec<f64>,
    pub noise_sigma: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            height: 64,
            width: 64,
            num_classes: 3,
            in_channels: 1,
            blob_count: (1, 1),
            radius: (6.0, 14.0),
            ring_width: 3.0,
            contrast: vec![0.1, 0.9, 0.55],
            noise_sigma: 0.03,
        }
    }
}

impl PhantomSpec {
    pub fn with_classes(num_classes: usize) -> Self {
        let mut spec = PhantomSpec {
            num_classes,
            ..PhantomSpec::default()
        };
        spec.contrast.truncate(num_classes);
        while spec.contrast.len() < num_classes {
            let k = spec.contrast.len() as f64;
            spec.contrast.push(0.3 + 0.1 * k);
        }
        spec
    }

    /// Like `with_classes`, with blob geometry rescaled from the 64-pixel
    /// defaults to the requested image size.
    pub fn sized(height: usize, width: usize, num_classes: usize) -> Self {
        let mut spec = PhantomSpec::with_classes(num_classes);
        spec.height = height;
        spec.width = width;
        let s = height.min(width) as f64 / 64.0;
        spec.radius = ((6.0 * s).max(1.5), (14.0 * s).max(2.5));
        spec.ring_width = (3.0 * s).max(1.0);
        spec
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("phantom needs at least 2 classes"));
        }
        if self.contrast.len() != self.num_classes {
            return Err(Error::config(format!(
                "contrast has {} entries for {} classes",
                self.contrast.len(),
                self.num_classes
            )));
        }
        if self.blob_count.0 > self.blob_count.1 || self.blob_count.0 == 0 {
            return Err(Error::config("invalid blob count range"));
        }
        let max_extent = self.radius.1 + self.ring_width;
        if 2.0 * max_extent >= self.height.min(self.width) as f64 {
            return Err(Error::config("blob radius does not fit inside the image"));
        }
        Ok(())
    }
}

/// Deterministic phantom for (seed, index): every call with the same pair
/// yields a byte-identical sample.
pub fn generate_phantom(spec: &PhantomSpec, seed: u64, index: u64) -> Result<Sample> {
    spec.validate()?;
    let mut rng = Rng::substream(seed, index);
    let (h, w) = (spec.height, spec.width);
    let mut labels = LabelMap::new(h, w);
    let has_ring = spec.num_classes >= 3;
    let n_blobs = spec.blob_count.0 + rng.index(spec.blob_count.1 - spec.blob_count.0 + 1);
    for _ in 0..n_blobs {
        let rx = rng.uniform(spec.radius.0, spec.radius.1);
        let ry = rng.uniform(spec.radius.0, spec.radius.1);
        let margin = rx.max(ry) + spec.ring_width + 1.0;
        let cx = rng.uniform(margin, w as f64 - margin);
        let cy = rng.uniform(margin, h as f64 - margin);
        let ring = if has_ring { rng.chance(0.8) } else { false };
        for hi in 0..h {
            for wi in 0..w {
                let dx = (wi as f64 + 0.5 - cx) / rx;
                let dy = (hi as f64 + 0.5 - cy) / ry;
                let d = dx * dx + dy * dy;
                if d <= 1.0 {
                    labels.set(hi, wi, 1);
                } else if ring {
                    let dxr = (wi as f64 + 0.5 - cx) / (rx + spec.ring_width);
                    let dyr = (hi as f64 + 0.5 - cy) / (ry + spec.ring_width);
                    if dxr * dxr + dyr * dyr <= 1.0 && labels.get(hi, wi) != 1 {
                        labels.set(hi, wi, 2);
                    }
                }
            }
        }
    }
    let mut image = Tensor::zeros(&[spec.in_channels, h, w])?;
    for c in 0..spec.in_channels {
        // optional multi-channel emulation: later channels get shifted contrast
        let shift = 0.1 * c as f64;
        for hi in 0..h {
            for wi in 0..w {
                let class = labels.get(hi, wi) as usize;
                let mut v = spec.contrast[class] + shift * if class > 0 { 1.0 } else { -0.3 };
                if spec.noise_sigma > 0.0 {
                    v += rng.normal(0.0, spec.noise_sigma);
                    v = v.clamp(0.0, 1.0);
                }
                image.data_mut()[(c * h + hi) * w + wi] = v as f32;
            }
        }
    }
    Ok(Sample { image, labels })
}

/// Augmentation policy: flip/rotate probabilities and intensity jitter.
/// Rotations are multiples of 90 degrees so label maps stay exact.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPolicy {
    pub p_flip: f64,
    pub p_rotate: f64,
    /// Multiplicative gain range; image only.
    pub jitter_gain: (f64, f64),
    /// Additive offset range; image only.
    pub jitter_offset: (f64, f64),
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            p_flip: 0.5,
            p_rotate: 0.5,
            jitter_gain: (0.9, 1.1),
            jitter_offset: (-0.05, 0.05),
        }
    }
}

impl AugmentPolicy {
    pub fn disabled() -> Self {
        AugmentPolicy {
            p_flip: 0.0,
            p_rotate: 0.0,
            jitter_gain: (1.0, 1.0),
            jitter_offset: (0.0, 0.0),
        }
    }
}

/// Apply the same spatial transform to image and labels; intensity jitter
/// touches the image only (clamped back to [0,1]).
pub fn augment(sample: &Sample, rng: &mut Rng, policy: &AugmentPolicy) -> Result<Sample> {
    let mut image = sample.image.clone();
    let mut labels = sample.labels.clone();
    if rng.chance(policy.p_flip) {
        image = image.flip_spatial(FlipAxis::Horizontal)?;
        labels = labels.flip(FlipAxis::Horizontal);
    }
    if rng.chance(policy.p_rotate) {
        let turns = 1 + rng.index(3) as u8;
        image = image.rotate90(turns)?;
        labels = labels.rotate90(turns);
    }
    let gain = rng.uniform(policy.jitter_gain.0, policy.jitter_gain.1) as f32;
    let offset = rng.uniform(policy.jitter_offset.0, policy.jitter_offset.1) as f32;
    if gain != 1.0 || offset != 0.0 {
        image = image.map(|v| (v * gain + offset).clamp(0.0, 1.0));
    }
    Ok(Sample { image, labels })
}

/// One-hot encode a label map into [C,H,W].
pub fn one_hot<T: Scalar>(labels: &LabelMap, num_classes: usize) -> Result<Tensor<T>> {
    let (h, w) = (labels.height, labels.width);
    let mut out = Tensor::zeros(&[num_classes, h, w])?;
    for (i, &v) in labels.data.iter().enumerate() {
        if v as usize >= num_classes {
            return Err(Error::data(format!(
                "label {} at pixel {} out of range for {} classes",
                v, i, num_classes
            )));
        }
        out.data_mut()[v as usize * h * w + i] = T::one();
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// TSR1 binary format
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub enum TsrPayload {
    F32 { shape: Vec<usize>, data: Vec<f32> },
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

fn encode_header(shape: &[usize], dtype: u8, out: &mut Vec<u8>) {
    out.extend_from_slice(&TSR1_MAGIC);
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(dtype);
}

pub fn encode_tensor_f32(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + 4 * t.len());
    encode_header(t.shape(), DTYPE_F32, &mut out);
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encode_labels(l: &LabelMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 8 + l.data.len());
    encode_header(&[l.height, l.width], DTYPE_U8, &mut out);
    out.extend_from_slice(&l.data);
    out
}

pub fn decode_tsr(bytes: &[u8]) -> Result<TsrPayload> {
    let need = |offset: u64, n: usize, have: usize| -> Result<()> {
        if have < n {
            Err(Error::format(offset, format!("truncated: need {n} more bytes")))
        } else {
            Ok(())
        }
    };
    need(0, 4, bytes.len())?;
    if bytes[0..4] != TSR1_MAGIC {
        return Err(Error::format(0, "bad magic, expected 'TSR1'"));
    }
    need(4, 1, bytes.len() - 4)?;
    let rank = bytes[4] as usize;
    if rank == 0 {
        return Err(Error::format(4, "zero rank"));
    }
    let mut pos = 5usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        need(pos as u64, 4, bytes.len() - pos)?;
        let d = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        if d == 0 {
            return Err(Error::format(pos as u64, "zero dimension"));
        }
        shape.push(d);
        pos += 4;
    }
    need(pos as u64, 1, bytes.len() - pos)?;
    let dtype = bytes[pos];
    pos += 1;
    let count: usize = shape.iter().product();
    match dtype {
        DTYPE_F32 => {
            need(pos as u64, count * 4, bytes.len() - pos)?;
            if bytes.len() - pos != count * 4 {
                return Err(Error::format(
                    pos as u64,
                    format!("payload size {} != expected {}", bytes.len() - pos, count * 4),
                ));
            }
            let data = bytes[pos..]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(TsrPayload::F32 { shape, data })
        }
        DTYPE_U8 => {
            need(pos as u64, count, bytes.len() - pos)?;
            if bytes.len() - pos != count {
                return Err(Error::format(
                    pos as u64,
                    format!("payload size {} != expected {}", bytes.len() - pos, count),
                ));
            }
            Ok(TsrPayload::U8 {
                shape,
                data: bytes[pos..].to_vec(),
            })
        }
        other => Err(Error::format(
            (pos - 1) as u64,
            format!("unknown dtype tag {other}"),
        )),
    }
}

pub fn write_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    write_bytes(path, &encode_tensor_f32(t))
}

pub fn write_labels(path: &Path, l: &LabelMap) -> Result<()> {
    write_bytes(path, &encode_labels(l))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_tsr(path: &Path) -> Result<TsrPayload> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    decode_tsr(&bytes)
}

pub fn read_tensor(path: &Path) -> Result<Tensor<f32>> {
    match read_tsr(path)? {
        TsrPayload::F32 { shape, data } => Tensor::from_vec(&shape, data),
        TsrPayload::U8 { .. } => Err(Error::data(format!(
            "{}: expected f32 tensor, found u8",
            path.display()
        ))),
    }
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    match read_tsr(path)? {
        TsrPayload::U8 { shape, data } => {
            if shape.len() != 2 {
                return Err(Error::data(format!(
                    "{}: label map must be rank 2, got {:?}",
                    path.display(),
                    shape
                )));
            }
            Ok(LabelMap {
                height: shape[0],
                width: shape[1],
                data,
            })
        }
        TsrPayload::F32 { .. } => Err(Error::data(format!(
            "{}: expected u8 label map, found f32",
            path.display()
        ))),
    }
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

/// Dataset manifest: header `C=<int> H=<int> W=<int> CIN=<int>`, then one
/// `<image-relpath> <label-relpath>` pair per line. `#` starts a comment.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<(String, String)>,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
}

impl DatasetManifest {
    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::data("empty manifest"))?;
        let mut c = None;
        let mut h = None;
        let mut w = None;
        let mut cin = None;
        for field in header.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::data(format!("bad manifest header field '{field}'")))?;
            let value: usize = value
                .parse()
                .map_err(|_| Error::data(format!("bad manifest header value '{field}'")))?;
            match key {
                "C" => c = Some(value),
                "H" => h = Some(value),
                "W" => w = Some(value),
                "CIN" => cin = Some(value),
                other => return Err(Error::data(format!("unknown manifest header key '{other}'"))),
            }
        }
        let (num_classes, height, width, in_channels) = match (c, h, w, cin) {
            (Some(c), Some(h), Some(w), Some(cin)) => (c, h, w, cin),
            _ => return Err(Error::data("manifest header must declare C, H, W, CIN")),
        };
        if num_classes < 2 || height == 0 || width == 0 || in_channels == 0 {
            return Err(Error::data("manifest header values out of range"));
        }
        let mut entries = Vec::new();
        for line in lines {
            let mut parts = line.split_whitespace();
            match (parts.next(), parts.next(), parts.next()) {
                (Some(img), Some(lbl), None) => entries.push((img.to_string(), lbl.to_string())),
                _ => {
                    return Err(Error::data(format!(
                        "manifest line must be '<image> <label>': '{line}'"
                    )))
                }
            }
        }
        if entries.is_empty() {
            return Err(Error::data("manifest lists no samples"));
        }
        Ok(DatasetManifest {
            root: root.to_path_buf(),
            entries,
            num_classes,
            height,
            width,
            in_channels,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::parse(&text, &root)
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "C={} H={} W={} CIN={}\n",
            self.num_classes, self.height, self.width, self.in_channels
        );
        for (img, lbl) in &self.entries {
            out.push_str(&format!("{img} {lbl}\n"));
        }
        out
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Read and validate one sample.
    pub fn load_sample(&self, index: usize) -> Result<Sample> {
        let (img_rel, lbl_rel) = &self.entries[index];
        let image = read_tensor(&self.root.join(img_rel))?;
        let labels = read_labels(&self.root.join(lbl_rel))?;
        if image.shape() != [self.in_channels, self.height, self.width] {
            return Err(Error::data(format!(
                "{img_rel}: image shape {:?} does not match manifest",
                image.shape()
            )));
        }
        if (labels.height, labels.width) != (self.height, self.width) {
            return Err(Error::data(format!(
                "{lbl_rel}: label shape {}x{} does not match manifest",
                labels.height, labels.width
            )));
        }
        if labels.data.iter().any(|&v| v as usize >= self.num_classes) {
            return Err(Error::data(format!("{lbl_rel}: label value out of range")));
        }
        Ok(Sample { image, labels })
    }

    pub fn load_all(&self) -> Result<Vec<Sample>> {
        (0..self.len()).map(|i| self.load_sample(i)).collect()
    }
}

/// Deterministic epoch order: identity without a shuffle rng, Fisher-Yates
/// permutation with one.
pub fn epoch_order(n: usize, shuffle_rng: Option<&mut Rng>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(rng) = shuffle_rng {
        rng.shuffle(&mut order);
    }
    order
}

/// Assemble [N,Cin,H,W] image and [N,C,H,W] one-hot batches over one epoch.
/// Every sample appears exactly once; the final short batch is emitted.
pub fn batch_iter<'a>(
    samples: &'a [Sample],
    num_classes: usize,
    batch_size: usize,
    shuffle_rng: Option<&mut Rng>,
) -> Result<Vec<Vec<&'a Sample>>> {
    if samples.is_empty() {
        return Err(Error::data("empty sample set"));
    }
    if batch_size == 0 {
        return Err(Error::config("batch_size must be >= 1"));
    }
    for s in samples {
        if s.labels.data.iter().any(|&v| v as usize >= num_classes) {
            return Err(Error::data("label value out of range for batch"));
        }
    }
    let order = epoch_order(samples.len(), shuffle_rng);
    Ok(order
        .chunks(batch_size)
        .map(|chunk| chunk.iter().map(|&i| &samples[i]).collect())
        .collect())
}

/// Stack samples into ([N,Cin,H,W] images, [N,C,H,W] one-hot targets).
pub fn collate(batch: &[&Sample], num_classes: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
    if batch.is_empty() {
        return Err(Error::data("empty batch"));
    }
    let shape = batch[0].image.shape();
    let (cin, h, w) = (shape[0], shape[1], shape[2]);
    let n = batch.len();
    let mut images = Tensor::zeros(&[n, cin, h, w])?;
    let mut targets = Tensor::zeros(&[n, num_classes, h, w])?;
    for (i, s) in batch.iter().enumerate() {
        if s.image.shape() != shape {
            return Err(Error::shape("ragged batch".to_string()));
        }
        let ilen = cin * h * w;
        images.data_mut()[i * ilen..(i + 1) * ilen].copy_from_slice(s.image.data());
        let hot: Tensor<f32> = one_hot(&s.labels, num_classes)?;
        let tlen = num_classes * h * w;
        targets.data_mut()[i * tlen..(i + 1) * tlen].copy_from_slice(hot.data());
    }
    Ok((images, targets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    use crate::tensor::Rng;

    #[test]
    fn phantom_binary_classes() {
        let spec = PhantomSpec::with_classes(2);
        let s = generate_phantom(&spec, 1, 0).unwrap();
        assert!(s.labels.data.iter().all(|&v| v <= 1));
        assert!(s.labels.data.iter().any(|&v| v == 1), "no foreground");
    }

    #[test]
    fn phantom_noiseless_two_values() {
        let spec = PhantomSpec {
            noise_sigma: 0.0,
            ..PhantomSpec::with_classes(2)
        };
        let s = generate_phantom(&spec, 3, 5).unwrap();
        let mut values: Vec<u32> = s.image.data().iter().map(|v| v.to_bits()).collect();
        values.sort_unstable();
        values.dedup();
        assert_eq!(values.len(), 2);
    }

    #[test]
    fn phantom_deterministic() {
        let spec = PhantomSpec::default();
        let a = generate_phantom(&spec, 9, 4).unwrap();
        let b = generate_phantom(&spec, 9, 4).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom(&spec, 9, 5).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn phantom_core_connected_and_ring_adjacent() {
        let spec = PhantomSpec::default();
        for idx in 0..20 {
            let s = generate_phantom(&spec, 77, idx).unwrap();
            let counts = s.labels.class_counts(3);
            assert!(counts[1] > 0);
            // flood fill from any class-1 pixel covers all class-1 pixels
            let (h, w) = (s.labels.height, s.labels.width);
            let start = s.labels.data.iter().position(|&v| v == 1).unwrap();
            let mut seen = vec![false; h * w];
            let mut stack = vec![start];
            seen[start] = true;
            let mut reached = 0;
            while let Some(p) = stack.pop() {
                reached += 1;
                let (ph, pw) = (p / w, p % w);
                for (dh, dw) in [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)] {
                    let (nh, nw) = (ph as i64 + dh, pw as i64 + dw);
                    if nh < 0 || nw < 0 || nh >= h as i64 || nw >= w as i64 {
                        continue;
                    }
                    let q = nh as usize * w + nw as usize;
                    if !seen[q] && s.labels.data[q] == 1 {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
            assert_eq!(reached, counts[1], "core disconnected at idx {idx}");
            // every ring pixel set implies some ring pixel touches the core
            if counts[2] > 0 {
                let mut adjacent = false;
                'outer: for ph in 0..h {
                    for pw in 0..w {
                        if s.labels.get(ph, pw) != 2 {
                            continue;
                        }
                        for (dh, dw) in [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)] {
                            let (nh, nw) = (ph as i64 + dh, pw as i64 + dw);
                            if nh >= 0
                                && nw >= 0
                                && nh < h as i64
                                && nw < w as i64
                                && s.labels.get(nh as usize, nw as usize) == 1
                            {
                                adjacent = true;
                                break 'outer;
                            }
                        }
                    }
                }
                assert!(adjacent, "ring not adjacent to core at idx {idx}");
            }
        }
    }

    #[test]
    fn augment_identity_policy() {
        let s = generate_phantom(&PhantomSpec::default(), 1, 0).unwrap();
        let out = augment(&s, &mut Rng::new(5), &AugmentPolicy::disabled()).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn augment_preserves_class_counts() {
        let s = generate_phantom(&PhantomSpec::default(), 1, 1).unwrap();
        let policy = AugmentPolicy {
            p_flip: 1.0,
            p_rotate: 1.0,
            ..AugmentPolicy::default()
        };
        for seed in 0..10 {
            let out = augment(&s, &mut Rng::new(seed), &policy).unwrap();
            assert_eq!(out.labels.class_counts(3), s.labels.class_counts(3));
        }
    }

    #[test]
    fn one_hot_contracts() {
        let mut labels = LabelMap::new(2, 2);
        labels.set(1, 1, 1);
        let hot: Tensor<f64> = one_hot(&labels, 2).unwrap();
        assert_eq!(hot.shape(), &[2, 2, 2]);
        // channel sums to 1 per pixel
        let sums = hot.reduce_sum_axes(&[0]).unwrap();
        assert!(sums.data().iter().all(|&v| v == 1.0));
        assert_eq!(hot.get(&[1, 1, 1]), 1.0);
        assert_eq!(hot.get(&[0, 1, 1]), 0.0);

        let mut bad = LabelMap::new(1, 1);
        bad.set(0, 0, 7);
        let err = one_hot::<f64>(&bad, 2).unwrap_err();
        assert!(err.to_string().contains("pixel 0"));
    }

    #[test]
    fn tsr1_round_trip_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::<f32>::rand_uniform(&mut Rng::new(2), &[3, 4, 5], -1.0, 1.0).unwrap();
        let path = dir.path().join("t.tsr");
        write_tensor(&path, &t).unwrap();
        let size = std::fs::metadata(&path).unwrap().len() as usize;
        assert_eq!(size, 6 + 4 * 3 + 4 * 60);
        let back = read_tensor(&path).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn tsr1_truncated_and_bad_magic() {
        let t = Tensor::<f32>::new(&[2, 2], 1.0).unwrap();
        let bytes = encode_tensor_f32(&t);
        for cut in [0, 3, 5, 9, bytes.len() - 1] {
            let err = decode_tsr(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Format { .. }), "cut {cut}: {err}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_tsr(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad_dtype = bytes;
        bad_dtype[13] = 9;
        assert!(decode_tsr(&bad_dtype).is_err());
    }

    #[test]
    fn labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_phantom(&PhantomSpec::default(), 4, 2).unwrap();
        let path = dir.path().join("l.tsr");
        write_labels(&path, &s.labels).unwrap();
        assert_eq!(read_labels(&path).unwrap(), s.labels);
    }

    #[test]
    fn manifest_parse_and_render() {
        let text = "# phantom set\nC=3 H=64 W=64 CIN=1\nimg0.tsr lbl0.tsr\nimg1.tsr lbl1.tsr # pair\n";
        let m = DatasetManifest::parse(text, Path::new("/data")).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.num_classes, 3);
        let again = DatasetManifest::parse(&m.render(), Path::new("/data")).unwrap();
        assert_eq!(again.entries, m.entries);
    }

    #[test]
    fn manifest_rejects_garbage() {
        assert!(DatasetManifest::parse("", Path::new(".")).is_err());
        assert!(DatasetManifest::parse("C=3 H=64 W=64\nimg lbl\n", Path::new(".")).is_err());
        assert!(DatasetManifest::parse("C=3 H=64 W=64 CIN=1\nonly_one_field\n", Path::new(".")).is_err());
        assert!(DatasetManifest::parse("C=1 H=64 W=64 CIN=1\na b\n", Path::new(".")).is_err());
    }

    #[test]
    fn batching_arithmetic() {
        let spec = PhantomSpec {
            height: 16,
            width: 16,
            radius: (2.0, 4.0),
            ..PhantomSpec::with_classes(2)
        };
        let samples: Vec<Sample> = (0..100)
            .map(|i| generate_phantom(&spec, 1, i).unwrap())
            .collect();
        let batches = batch_iter(&samples, 2, 16, None).unwrap();
        assert_eq!(batches.len(), 7);
        assert_eq!(batches[6].len(), 4);
        // no shuffle: manifest order preserved
        assert!(std::ptr::eq(batches[0][0], &samples[0]));

        let o1 = batch_iter(&samples, 2, 16, Some(&mut Rng::new(3))).unwrap();
        let o2 = batch_iter(&samples, 2, 16, Some(&mut Rng::new(3))).unwrap();
        for (a, b) in o1.iter().flatten().zip(o2.iter().flatten()) {
            assert!(std::ptr::eq(*a, *b));
        }
        assert!(batch_iter(&samples[..0], 2, 16, None).is_err());
    }

    #[test]
    fn collate_shapes() {
        let spec = PhantomSpec {
            height: 16,
            width: 16,
            radius: (2.0, 4.0),
            ..PhantomSpec::with_classes(2)
        };
        let samples: Vec<Sample> = (0..3)
            .map(|i| generate_phantom(&spec, 1, i).unwrap())
            .collect();
        let refs: Vec<&Sample> = samples.iter().collect();
        let (images, targets) = collate(&refs, 2).unwrap();
        assert_eq!(images.shape(), &[3, 1, 16, 16]);
        assert_eq!(targets.shape(), &[3, 2, 16, 16]);
    }

    proptest! {
        // augment then one-hot commutes with one-hot then the same spatial map
        #[test]
        fn augment_commutes_with_one_hot(seed in 0u64..200) {
            let s = generate_phantom(&PhantomSpec::default(), 11, seed).unwrap();
            let policy = AugmentPolicy { p_flip: 1.0, p_rotate: 1.0, ..AugmentPolicy::default() };
            let aug = augment(&s, &mut Rng::new(seed), &policy).unwrap();
            let hot_after: Tensor<f32> = one_hot(&aug.labels, 3).unwrap();

            // replay the same transform decisions on the one-hot tensor
            let mut rng = Rng::new(seed);
            let mut hot: Tensor<f32> = one_hot(&s.labels, 3).unwrap();
            if rng.chance(policy.p_flip) {
                hot = hot.flip_spatial(FlipAxis::Horizontal).unwrap();
            }
            if rng.chance(policy.p_rotate) {
                let turns = 1 + rng.index(3) as u8;
                hot = hot.rotate90(turns).unwrap();
            }
            prop_assert_eq!(hot, hot_after);
        }

        #[test]
        fn tsr1_decode_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
            let _ = decode_tsr(&bytes);
        }
    }
}
