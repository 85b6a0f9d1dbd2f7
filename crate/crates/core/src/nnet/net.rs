use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::{lit, Scalar};
use crate::NUM_CLASSES;

use super::conv::{relu_backward, relu_forward, Conv2d};
use super::dysample::{DySample, DySampleCache, DEFAULT_OFFSET_FACTOR};
use super::{NnetError, Result, Tensor3};

/// One layer of a [`SegNet`] architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    /// 3×3 convolution + ReLU.
    Conv { out: usize, stride: usize },
    /// DySample upsampler with the given scale.
    Up { scale: usize },
    /// 1×1 convolution, no activation.
    Head { out: usize },
}

/// Architecture descriptor, e.g. `in=8;c16;c32s2;c64s2;d2;c32;d2;c16;h4`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchSpec {
    pub in_channels: usize,
    pub layers: Vec<LayerSpec>,
}

impl ArchSpec {
    /// conv(N→16) → s2 conv(→32) → s2 conv(→64) → DySample ×2 → conv(→32)
    /// → DySample ×2 → conv(→16) → 1×1 head(→4).
    pub fn student(in_channels: usize) -> Self {
        use LayerSpec::*;
        Self {
            in_channels,
            layers: vec![
                Conv { out: 16, stride: 1 },
                Conv { out: 32, stride: 2 },
                Conv { out: 64, stride: 2 },
                Up { scale: 2 },
                Conv { out: 32, stride: 1 },
                Up { scale: 2 },
                Conv { out: 16, stride: 1 },
                Head { out: NUM_CLASSES },
            ],
        }
    }

    /// The student with every width doubled and one extra encoder stage.
    pub fn teacher(in_channels: usize) -> Self {
        use LayerSpec::*;
        Self {
            in_channels,
            layers: vec![
                Conv { out: 32, stride: 1 },
                Conv { out: 64, stride: 2 },
                Conv { out: 128, stride: 2 },
                Conv { out: 128, stride: 1 },
                Up { scale: 2 },
                Conv { out: 64, stride: 1 },
                Up { scale: 2 },
                Conv { out: 32, stride: 1 },
                Head { out: NUM_CLASSES },
            ],
        }
    }

    /// Accepts `student`, `teacher` (input channels supplied by the caller)
    /// or an explicit descriptor.
    pub fn resolve(name: &str, in_channels: usize) -> Result<Self> {
        match name {
            "student" => Ok(Self::student(in_channels)),
            "teacher" => Ok(Self::teacher(in_channels)),
            other => {
                let spec = Self::parse(other)?;
                if spec.in_channels != in_channels {
                    return Err(NnetError::Arch(format!(
                        "descriptor takes {} input channels, data has {in_channels}",
                        spec.in_channels
                    )));
                }
                Ok(spec)
            }
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let bad = |m: String| NnetError::Arch(m);
        let mut parts = s.split(';').map(str::trim).filter(|p| !p.is_empty());
        let first = parts.next().ok_or_else(|| bad("empty descriptor".into()))?;
        let in_channels: usize = first
            .strip_prefix("in=")
            .and_then(|v| v.parse().ok())
            .filter(|v| *v > 0)
            .ok_or_else(|| bad(format!("expected in=<channels>, got {first:?}")))?;
        let mut layers = Vec::new();
        for tok in parts {
            let num = |t: &str| t.parse::<usize>().ok().filter(|v| *v > 0);
            let layer = if let Some(rest) = tok.strip_prefix('c') {
                match rest.split_once('s') {
                    Some((o, st)) => LayerSpec::Conv {
                        out: num(o).ok_or_else(|| bad(format!("bad conv {tok:?}")))?,
                        stride: num(st).filter(|v| *v <= 2).ok_or_else(|| bad(format!("bad stride {tok:?}")))?,
                    },
                    None => LayerSpec::Conv {
                        out: num(rest).ok_or_else(|| bad(format!("bad conv {tok:?}")))?,
                        stride: 1,
                    },
                }
            } else if let Some(rest) = tok.strip_prefix('d') {
                LayerSpec::Up {
                    scale: num(rest).filter(|v| *v >= 2).ok_or_else(|| bad(format!("bad upsampler {tok:?}")))?,
                }
            } else if let Some(rest) = tok.strip_prefix('h') {
                LayerSpec::Head {
                    out: num(rest).ok_or_else(|| bad(format!("bad head {tok:?}")))?,
                }
            } else {
                return Err(bad(format!("unknown layer {tok:?}")));
            };
            layers.push(layer);
        }
        match layers.last() {
            Some(LayerSpec::Head { out }) if *out == NUM_CLASSES => {}
            _ => return Err(bad(format!("must end with h{NUM_CLASSES}"))),
        }
        Ok(Self { in_channels, layers })
    }

    pub fn descriptor(&self) -> String {
        let mut s = format!("in={}", self.in_channels);
        for l in &self.layers {
            s.push(';');
            match l {
                LayerSpec::Conv { out, stride: 1 } => s.push_str(&format!("c{out}")),
                LayerSpec::Conv { out, stride } => s.push_str(&format!("c{out}s{stride}")),
                LayerSpec::Up { scale } => s.push_str(&format!("d{scale}")),
                LayerSpec::Head { out } => s.push_str(&format!("h{out}")),
            }
        }
        s
    }

    /// Product of strides minus upsampling; input sides must divide by it.
    fn downsample_factor(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                LayerSpec::Conv { stride, .. } => *stride,
                _ => 1,
            })
            .product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv { conv: Conv2d<T>, relu: bool },
    Up(DySample<T>),
}

/// Fully convolutional BEV segmentation network.
#[derive(Debug, Clone, PartialEq)]
pub struct SegNet<T> {
    pub arch: ArchSpec,
    pub layers: Vec<Layer<T>>,
}

/// Activations recorded by [`SegNet::forward_train`].
#[derive(Debug, Clone)]
pub struct NetTrace<T> {
    /// `inputs[i]` is the input of layer `i`; the final entry is the output.
    acts: Vec<Tensor3<T>>,
    caches: Vec<Option<DySampleCache<T>>>,
}

impl<T: Scalar> SegNet<T> {
    /// All parameters zero (uniform logits for every input).
    pub fn zeros(arch: &ArchSpec) -> Self {
        Self::build(arch, |in_c, out_c, k, stride| Conv2d::zeros(in_c, out_c, k, stride))
    }

    /// He-uniform convolutions from a seeded generator; DySample offset
    /// branches start at zero (exact bilinear upsampling).
    pub fn init(arch: &ArchSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(arch, |in_c, out_c, k, stride| {
            Conv2d::he_uniform(in_c, out_c, k, stride, &mut rng)
        })
    }

    fn build(arch: &ArchSpec, mut conv: impl FnMut(usize, usize, usize, usize) -> Conv2d<T>) -> Self {
        let mut c = arch.in_channels;
        let mut layers = Vec::with_capacity(arch.layers.len());
        for spec in &arch.layers {
            match *spec {
                LayerSpec::Conv { out, stride } => {
                    layers.push(Layer::Conv {
                        conv: conv(c, out, 3, stride),
                        relu: true,
                    });
                    c = out;
                }
                LayerSpec::Head { out } => {
                    layers.push(Layer::Conv {
                        conv: conv(c, out, 1, 1),
                        relu: false,
                    });
                    c = out;
                }
                LayerSpec::Up { scale } => {
                    layers.push(Layer::Up(DySample::zeros(c, scale, lit(DEFAULT_OFFSET_FACTOR))));
                }
            }
        }
        Self {
            arch: arch.clone(),
            layers,
        }
    }

    pub fn n_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv { conv, .. } => conv.n_params(),
                Layer::Up(d) => d.n_params(),
            })
            .sum()
    }

    fn check_input(&self, x: &Tensor3<T>) -> Result<()> {
        if x.c != self.arch.in_channels {
            return Err(NnetError::ShapeMismatch(format!(
                "network takes {} channels, input has {}",
                self.arch.in_channels, x.c
            )));
        }
        let f = self.arch.downsample_factor();
        if !x.h.is_multiple_of(f) || !x.w.is_multiple_of(f) || x.h == 0 || x.w == 0 {
            return Err(NnetError::ShapeMismatch(format!(
                "input {}x{} must be a non-empty multiple of {f} on both sides",
                x.h, x.w
            )));
        }
        Ok(())
    }

    fn check_output(&self, x: &Tensor3<T>, y: &Tensor3<T>) -> Result<()> {
        if y.h != x.h || y.w != x.w || y.c != NUM_CLASSES {
            return Err(NnetError::ShapeMismatch(format!(
                "architecture maps {}x{} to {}x{}x{}",
                x.h, x.w, y.c, y.h, y.w
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor3<T>) -> Result<Tensor3<T>> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = match layer {
                Layer::Conv { conv, relu } => {
                    let mut y = conv.forward(&cur)?;
                    if *relu {
                        relu_forward(&mut y);
                    }
                    y
                }
                Layer::Up(d) => d.forward(&cur)?.0,
            };
        }
        self.check_output(x, &cur)?;
        Ok(cur)
    }

    pub fn forward_train(&self, x: &Tensor3<T>) -> Result<(Tensor3<T>, NetTrace<T>)> {
        self.check_input(x)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut caches = Vec::with_capacity(self.layers.len());
        acts.push(x.clone());
        for layer in &self.layers {
            let cur = acts.last().expect("non-empty");
            let (y, cache) = match layer {
                Layer::Conv { conv, relu } => {
                    let mut y = conv.forward(cur)?;
                    if *relu {
                        relu_forward(&mut y);
                    }
                    (y, None)
                }
                Layer::Up(d) => {
                    let (y, c) = d.forward(cur)?;
                    (y, Some(c))
                }
            };
            acts.push(y);
            caches.push(cache);
        }
        let out = acts.last().expect("non-empty").clone();
        self.check_output(x, &out)?;
        Ok((out, NetTrace { acts, caches }))
    }

    /// Parameter gradients in [`SegNet::params`] order, plus `∂/∂input`.
    pub fn backward(&self, trace: &NetTrace<T>, grad_out: &Tensor3<T>) -> Result<(Vec<Vec<T>>, Tensor3<T>)> {
        let mut grads: Vec<Vec<T>> = Vec::with_capacity(2 * self.layers.len());
        let mut g = grad_out.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.acts[i];
            let output = &trace.acts[i + 1];
            match layer {
                Layer::Conv { conv, relu } => {
                    if *relu {
                        relu_backward(output, &mut g);
                    }
                    let (gx, gw, gb) = conv.backward(input, &g)?;
                    grads.push(gb);
                    grads.push(gw);
                    g = gx;
                }
                Layer::Up(d) => {
                    let cache = trace.caches[i].as_ref().expect("dysample cache");
                    let (gx, gw, gb) = d.backward(input, cache, &g)?;
                    grads.push(gb);
                    grads.push(gw);
                    g = gx;
                }
            }
        }
        grads.reverse();
        Ok((grads, g))
    }

    /// `(name, shape)` of every parameter tensor, in a fixed order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv { conv, .. } => {
                    out.push((format!("layers.{i}.weight"), vec![conv.out_c, conv.in_c, conv.k, conv.k]));
                    out.push((format!("layers.{i}.bias"), vec![conv.out_c]));
                }
                Layer::Up(d) => {
                    out.push((format!("layers.{i}.offset.weight"), vec![d.offset_channels(), d.in_c]));
                    out.push((format!("layers.{i}.offset.bias"), vec![d.offset_channels()]));
                }
            }
        }
        out
    }

    pub fn params(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv { conv, .. } => {
                    out.push(&conv.weight);
                    out.push(&conv.bias);
                }
                Layer::Up(d) => {
                    out.push(&d.linear_w);
                    out.push(&d.linear_b);
                }
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out: Vec<&mut Vec<T>> = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv { conv, .. } => {
                    out.push(&mut conv.weight);
                    out.push(&mut conv.bias);
                }
                Layer::Up(d) => {
                    out.push(&mut d.linear_w);
                    out.push(&mut d.linear_b);
                }
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> SegNet<U> {
        let mut net = SegNet::<U>::zeros(&self.arch);
        for (dst, src) in net.params_mut().into_iter().zip(self.params()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = U::from_f64_lossy(s.to_f64_lossless());
            }
        }
        net
    }
}
