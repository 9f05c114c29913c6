//! Shared-trunk counting network with `K` bootstrap density heads and one
//! log-variance head.
//!
//! Trunk: for each front channel width a 3x3 conv + ReLU + 2x2 max-pool, then
//! for each back channel width a dilated 3x3 conv + ReLU. Every head is a 1x1
//! conv on the final feature map; density heads go through softplus and the
//! log-variance head is clamped to `[-10, 10]`.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Error, Result};
use crate::seed::rng_for;
use crate::tensor::{Graph, Tensor, Var};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;
const KERNEL: usize = 3;
const IN_CHANNELS: usize = 1;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub front_channels: Vec<usize>,
    pub back_channels: Vec<usize>,
    pub dilation: usize,
    /// Number of bootstrap heads.
    pub heads: usize,
    pub init_std: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            front_channels: vec![8, 16],
            back_channels: vec![16, 16],
            dilation: 2,
            heads: 10,
            init_std: 0.01,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 {
            return Err(invalid("arch: need at least one head"));
        }
        if !(self.init_std > 0.0) {
            return Err(invalid("arch: init_std must be positive"));
        }
        if self.dilation == 0 {
            return Err(invalid("arch: dilation must be >= 1"));
        }
        if self
            .front_channels
            .iter()
            .chain(&self.back_channels)
            .any(|&c| c == 0)
        {
            return Err(invalid("arch: channel widths must be positive"));
        }
        Ok(())
    }

    /// Spatial reduction between input and output maps.
    pub fn downsample_factor(&self) -> usize {
        1 << self.front_channels.len()
    }

    /// Channels of the final trunk feature map.
    pub fn feature_channels(&self) -> usize {
        self.back_channels
            .last()
            .or(self.front_channels.last())
            .copied()
            .unwrap_or(IN_CHANNELS)
    }

    pub fn with_heads(&self, heads: usize) -> Self {
        Self {
            heads,
            ..self.clone()
        }
    }
}

/// Convolution weight `[C_out, C_in, k, k]` and bias `[C_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    fn init(c_out: usize, c_in: usize, k: usize, normal: &Normal<f64>, rng: &mut impl Rng) -> Self {
        let n = c_out * c_in * k * k;
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        Self {
            weight: Tensor::new(vec![c_out, c_in, k, k], data).expect("sized"),
            bias: Tensor::zeros(&[c_out]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DubNetParams {
    pub arch: ArchConfig,
    /// Front layers followed by back layers.
    pub trunk: Vec<ConvLayer>,
    pub heads: Vec<ConvLayer>,
    pub logvar_head: ConvLayer,
}

/// Prediction of one head: density `y` and log-variance `s`, both `[1, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    pub density: Tensor,
    pub logvar: Tensor,
}

/// Parameters placed on a tape. `heads[i]` is `None` for heads not bound.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub trunk: Vec<(Var, Var)>,
    pub heads: Vec<Option<(Var, Var)>>,
    pub logvar_head: (Var, Var),
}

impl DubNetParams {
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let normal = Normal::new(0.0, arch.init_std).map_err(|e| invalid(e.to_string()))?;
        let mut rng = rng_for(seed, "init");
        let mut trunk = Vec::new();
        let mut c_in = IN_CHANNELS;
        for &c in arch.front_channels.iter().chain(&arch.back_channels) {
            trunk.push(ConvLayer::init(c, c_in, KERNEL, &normal, &mut rng));
            c_in = c;
        }
        let heads = (0..arch.heads)
            .map(|_| ConvLayer::init(1, c_in, 1, &normal, &mut rng))
            .collect();
        let logvar_head = ConvLayer::init(1, c_in, 1, &normal, &mut rng);
        Ok(Self {
            arch: arch.clone(),
            trunk,
            heads,
            logvar_head,
        })
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    /// All tensors in checkpoint order: trunk (weight, bias) per layer, then
    /// each density head, then the log-variance head.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.trunk
            .iter_mut()
            .chain(self.heads.iter_mut())
            .chain(std::iter::once(&mut self.logvar_head))
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    fn layers(&self) -> impl Iterator<Item = &ConvLayer> {
        self.trunk
            .iter()
            .chain(self.heads.iter())
            .chain(std::iter::once(&self.logvar_head))
    }

    /// Index into [`Self::tensors`] of head `k`'s weight (bias follows).
    pub fn head_tensor_index(&self, k: usize) -> usize {
        2 * (self.trunk.len() + k)
    }

    pub fn logvar_tensor_index(&self) -> usize {
        2 * (self.trunk.len() + self.heads.len())
    }

    pub fn trunk_tensor_count(&self) -> usize {
        2 * self.trunk.len()
    }

    fn check_shapes(&self) -> Result<()> {
        self.arch.validate()?;
        let expect = Self::init(&self.arch, 0)?;
        if self.trunk.len() != expect.trunk.len() || self.heads.len() != expect.heads.len() {
            return Err(Error::Format(
                "layer count does not match architecture".into(),
            ));
        }
        for (a, b) in self.tensors().into_iter().zip(expect.tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::Format(format!(
                    "tensor shape {:?} does not match architecture ({:?})",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let (c, h, w) = image.dims3()?;
        let f = self.arch.downsample_factor();
        if c != IN_CHANNELS {
            return Err(invalid(format!(
                "expected a single-channel image, got {c} channels"
            )));
        }
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(invalid(format!(
                "image {h}x{w} not divisible by downsample factor {f}"
            )));
        }
        Ok(())
    }

    /// Place parameters on `g`. Only heads listed in `heads` are bound.
    pub fn bind(&self, g: &mut Graph, heads: &[usize], trainable: bool) -> Result<BoundParams> {
        let mut put = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let trunk = self
            .trunk
            .iter()
            .map(|l| (put(&l.weight), put(&l.bias)))
            .collect();
        let mut bound_heads = vec![None; self.heads.len()];
        for &k in heads {
            let layer = self.heads.get(k).ok_or_else(|| {
                invalid(format!(
                    "head index {k} out of range 0..{}",
                    self.heads.len()
                ))
            })?;
            bound_heads[k] = Some((put(&layer.weight), put(&layer.bias)));
        }
        let logvar_head = (put(&self.logvar_head.weight), put(&self.logvar_head.bias));
        Ok(BoundParams {
            trunk,
            heads: bound_heads,
            logvar_head,
        })
    }

    /// Trunk features for `image` (a `[1, H, W]` tensor already on the tape).
    pub fn trunk_on(&self, g: &mut Graph, bound: &BoundParams, image: Var) -> Result<Var> {
        self.check_image(g.value(image))?;
        let n_front = self.arch.front_channels.len();
        let mut x = image;
        for (i, &(w, b)) in bound.trunk.iter().enumerate() {
            let dilation = if i < n_front { 1 } else { self.arch.dilation };
            x = g.conv2d(x, w, dilation)?;
            x = g.bias_add(x, b)?;
            x = g.relu(x);
            if i < n_front {
                x = g.maxpool2(x)?;
            }
        }
        Ok(x)
    }

    pub fn head_on(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        features: Var,
        k: usize,
    ) -> Result<Var> {
        let (w, b) = bound
            .heads
            .get(k)
            .copied()
            .flatten()
            .ok_or_else(|| invalid(format!("head {k} is not bound")))?;
        let y = g.conv2d(features, w, 1)?;
        let y = g.bias_add(y, b)?;
        Ok(g.softplus(y))
    }

    pub fn logvar_on(&self, g: &mut Graph, bound: &BoundParams, features: Var) -> Result<Var> {
        let (w, b) = bound.logvar_head;
        let s = g.conv2d(features, w, 1)?;
        let s = g.bias_add(s, b)?;
        Ok(g.clamp(s, LOGVAR_MIN, LOGVAR_MAX))
    }

    /// Prediction of a single head (0-based) with the shared log-variance.
    pub fn forward_head(&self, image: &Tensor, head: usize) -> Result<HeadOutput> {
        if head >= self.heads.len() {
            return Err(invalid(format!(
                "head index {head} out of range 0..{}",
                self.heads.len()
            )));
        }
        let mut g = Graph::new();
        let bound = self.bind(&mut g, &[head], false)?;
        let x = g.constant(image.clone());
        let feats = self.trunk_on(&mut g, &bound, x)?;
        let y = self.head_on(&mut g, &bound, feats, head)?;
        let s = self.logvar_on(&mut g, &bound, feats)?;
        Ok(HeadOutput {
            density: g.value(y).clone(),
            logvar: g.value(s).clone(),
        })
    }

    /// All `K` density predictions and the shared log-variance, evaluating the
    /// trunk once.
    pub fn forward_all(&self, image: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        let mut g = Graph::new();
        let all: Vec<usize> = (0..self.heads.len()).collect();
        let bound = self.bind(&mut g, &all, false)?;
        let x = g.constant(image.clone());
        let feats = self.trunk_on(&mut g, &bound, x)?;
        let densities = all
            .iter()
            .map(|&k| {
                self.head_on(&mut g, &bound, feats, k)
                    .map(|y| g.value(y).clone())
            })
            .collect::<Result<Vec<_>>>()?;
        let s = self.logvar_on(&mut g, &bound, feats)?;
        Ok((densities, g.value(s).clone()))
    }

    /// Replace the log-variance head by a constant `log(sigma2)` output.
    pub fn freeze_logvar(&mut self, sigma2: f64) -> Result<()> {
        if !(sigma2 > 0.0) {
            return Err(invalid("fixed variance must be positive"));
        }
        self.logvar_head.weight.data_mut().fill(0.0);
        self.logvar_head.bias.data_mut().fill(sigma2.ln());
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        put_u32(w, CHECKPOINT_VERSION)?;
        write_arch(w, &self.arch)?;
        let tensors = self.tensors();
        put_u32(w, tensors.len() as u32)?;
        for t in tensors {
            put_u32(w, t.shape().len() as u32)?;
            for &d in t.shape() {
                put_u32(w, d as u32)?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let version = get_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let arch = read_arch(r)?;
        arch.validate().map_err(|e| Error::Format(e.to_string()))?;
        let mut params = Self::init(&arch, 0)?;
        let count = get_u32(r)? as usize;
        if count != params.tensors().len() {
            return Err(Error::Format(format!(
                "checkpoint holds {count} tensors, architecture needs {}",
                params.tensors().len()
            )));
        }
        for slot in params.tensors_mut() {
            let rank = get_u32(r)? as usize;
            if rank > 8 {
                return Err(Error::Format(format!("implausible tensor rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| get_u32(r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            if shape != slot.shape() {
                return Err(Error::Format(format!(
                    "tensor shape {shape:?} does not match architecture ({:?})",
                    slot.shape()
                )));
            }
            for v in slot.data_mut() {
                let mut b = [0u8; 8];
                read_exact(r, &mut b)?;
                *v = f64::from_le_bytes(b);
            }
        }
        params.check_shapes()?;
        Ok(params)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DUBN";
pub const CHECKPOINT_VERSION: u32 = 1;

// ArchConfig field tags.
const TAG_FRONT: u8 = 1;
const TAG_BACK: u8 = 2;
const TAG_DILATION: u8 = 3;
const TAG_HEADS: u8 = 4;
const TAG_INIT_STD: u8 = 5;

fn put_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Format("truncated checkpoint".into()),
        _ => Error::Io(e),
    })
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn write_arch(w: &mut impl Write, arch: &ArchConfig) -> io::Result<()> {
    put_u32(w, 5)?;
    for (tag, list) in [
        (TAG_FRONT, &arch.front_channels),
        (TAG_BACK, &arch.back_channels),
    ] {
        w.write_all(&[tag])?;
        put_u32(w, list.len() as u32)?;
        for &c in list {
            put_u32(w, c as u32)?;
        }
    }
    w.write_all(&[TAG_DILATION])?;
    put_u32(w, arch.dilation as u32)?;
    w.write_all(&[TAG_HEADS])?;
    put_u32(w, arch.heads as u32)?;
    w.write_all(&[TAG_INIT_STD])?;
    w.write_all(&arch.init_std.to_le_bytes())
}

fn read_arch(r: &mut impl Read) -> Result<ArchConfig> {
    let fields = get_u32(r)?;
    let mut arch = ArchConfig::default();
    let mut seen = [false; 6];
    for _ in 0..fields {
        let mut tag = [0u8; 1];
        read_exact(r, &mut tag)?;
        let tag = tag[0];
        match tag {
            TAG_FRONT | TAG_BACK => {
                let n = get_u32(r)? as usize;
                if n > 64 {
                    return Err(Error::Format(format!("implausible layer count {n}")));
                }
                let list = (0..n)
                    .map(|_| get_u32(r).map(|c| c as usize))
                    .collect::<Result<Vec<_>>>()?;
                if tag == TAG_FRONT {
                    arch.front_channels = list;
                } else {
                    arch.back_channels = list;
                }
            }
            TAG_DILATION => arch.dilation = get_u32(r)? as usize,
            TAG_HEADS => arch.heads = get_u32(r)? as usize,
            TAG_INIT_STD => {
                let mut b = [0u8; 8];
                read_exact(r, &mut b)?;
                arch.init_std = f64::from_le_bytes(b);
            }
            other => {
                return Err(Error::Format(format!(
                    "unknown architecture field tag {other}"
                )))
            }
        }
        seen[tag as usize] = true;
    }
    if !seen[1..].iter().all(|&s| s) {
        return Err(Error::Format(
            "architecture record is missing fields".into(),
        ));
    }
    Ok(arch)
}
