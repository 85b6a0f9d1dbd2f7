//! DySample: learned-offset bilinear upsampling.
//!
//! A per-pixel linear map of the input features gives `2·s²` offset channels
//! at input resolution, scaled by the offset factor. Pixel shuffle turns them
//! into a 2-channel displacement field at `s×` resolution (channel 0 along
//! width, channel 1 along height, in input-pixel units). Output pixel
//! `(I, J)` samples the input bilinearly at its base position
//! `((I + 0.5)/s, (J + 0.5)/s)` plus the displacement. Pixel centres sit at
//! integer + 0.5; sample coordinates are clamped to the input rectangle.

use rayon::prelude::*;

use crate::scalar::{lit, Scalar};

use super::{NnetError, Result, Tensor3};

#[derive(Debug, Clone, PartialEq)]
pub struct DySample<T> {
    pub in_c: usize,
    pub scale: usize,
    pub offset_factor: T,
    /// `[2·s²][in_c]`
    pub linear_w: Vec<T>,
    pub linear_b: Vec<T>,
}

/// Per-output-pixel sampling state kept for the backward pass.
#[derive(Debug, Clone)]
pub struct DySampleCache<T> {
    /// Continuous sample coordinates in index space (`position - 0.5`),
    /// before clamping: `[2][sH][sW]` (x then y).
    pub coords: Vec<T>,
}

pub const DEFAULT_OFFSET_FACTOR: f64 = 0.25;

struct Tap<T> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: T,
    fy: T,
    /// `false` when the coordinate was clamped (zero derivative).
    free_x: bool,
    free_y: bool,
}

#[inline]
fn tap<T: Scalar>(u: T, v: T, h: usize, w: usize) -> Tap<T> {
    let axis = |c: T, n: usize| -> (usize, usize, T, bool) {
        let max = lit::<T>((n - 1) as f64);
        let free = c >= T::zero() && c <= max;
        let cc = c.max(T::zero()).min(max);
        let i0 = cc.floor().to_usize().unwrap_or(0).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, cc - lit::<T>(i0 as f64), free)
    };
    let (x0, x1, fx, free_x) = axis(u, w);
    let (y0, y1, fy, free_y) = axis(v, h);
    Tap {
        x0,
        x1,
        y0,
        y1,
        fx,
        fy,
        free_x,
        free_y,
    }
}

impl<T: Scalar> DySample<T> {
    /// Zero offset branch: starts as plain bilinear upsampling.
    pub fn zeros(in_c: usize, scale: usize, offset_factor: T) -> Self {
        assert!(scale >= 2);
        let k = 2 * scale * scale;
        Self {
            in_c,
            scale,
            offset_factor,
            linear_w: vec![T::zero(); k * in_c],
            linear_b: vec![T::zero(); k],
        }
    }

    pub fn offset_channels(&self) -> usize {
        2 * self.scale * self.scale
    }

    pub fn n_params(&self) -> usize {
        self.linear_w.len() + self.linear_b.len()
    }

    /// Offsets at input resolution, `[2·s²][H][W]`, already scaled.
    fn offsets(&self, x: &Tensor3<T>) -> Vec<T> {
        let hw = x.h * x.w;
        let k = self.offset_channels();
        let mut out = vec![T::zero(); k * hw];
        out.par_chunks_mut(hw).enumerate().for_each(|(ch, plane)| {
            plane.iter_mut().for_each(|v| *v = self.linear_b[ch]);
            for c in 0..self.in_c {
                let wv = self.linear_w[ch * self.in_c + c];
                if wv == T::zero() {
                    continue;
                }
                for (p, xv) in plane.iter_mut().zip(x.channel(c)) {
                    *p += wv * *xv;
                }
            }
            plane.iter_mut().for_each(|v| *v *= self.offset_factor);
        });
        out
    }

    /// Sample coordinates for every output pixel (pixel shuffle + base grid).
    fn coords(&self, x: &Tensor3<T>, offsets: &[T]) -> Vec<T> {
        let s = self.scale;
        let (oh, ow) = (x.h * s, x.w * s);
        let hw = x.h * x.w;
        let ss = s * s;
        let inv_s = lit::<T>(1.0 / s as f64);
        let half = lit::<T>(0.5);
        let mut coords = vec![T::zero(); 2 * oh * ow];
        for oy in 0..oh {
            let (i, di) = (oy / s, oy % s);
            for ox in 0..ow {
                let (j, dj) = (ox / s, ox % s);
                let sub = di * s + dj;
                let dx = offsets[sub * hw + i * x.w + j];
                let dy = offsets[(ss + sub) * hw + i * x.w + j];
                let bx = (lit::<T>(ox as f64) + half) * inv_s;
                let by = (lit::<T>(oy as f64) + half) * inv_s;
                coords[oy * ow + ox] = bx + dx - half;
                coords[oh * ow + oy * ow + ox] = by + dy - half;
            }
        }
        coords
    }

    pub fn forward(&self, x: &Tensor3<T>) -> Result<(Tensor3<T>, DySampleCache<T>)> {
        if x.c != self.in_c {
            return Err(NnetError::ShapeMismatch(format!(
                "dysample expects {} channels, got {}",
                self.in_c, x.c
            )));
        }
        let offsets = self.offsets(x);
        let coords = self.coords(x, &offsets);
        let s = self.scale;
        let (oh, ow) = (x.h * s, x.w * s);
        let taps: Vec<Tap<T>> = (0..oh * ow)
            .map(|p| tap(coords[p], coords[oh * ow + p], x.h, x.w))
            .collect();
        let mut out = Tensor3::zeros(x.c, oh, ow);
        out.data.par_chunks_mut(oh * ow).enumerate().for_each(|(c, plane)| {
            let src = x.channel(c);
            for (p, t) in taps.iter().enumerate() {
                plane[p] = sample(src, x.w, t);
            }
        });
        Ok((out, DySampleCache { coords }))
    }

    /// Returns `(∂/∂x, ∂/∂linear_w, ∂/∂linear_b)`.
    pub fn backward(
        &self,
        x: &Tensor3<T>,
        cache: &DySampleCache<T>,
        grad_out: &Tensor3<T>,
    ) -> Result<(Tensor3<T>, Vec<T>, Vec<T>)> {
        let s = self.scale;
        let (oh, ow) = (x.h * s, x.w * s);
        if grad_out.shape() != (x.c, oh, ow) {
            return Err(NnetError::ShapeMismatch("dysample backward shapes".into()));
        }
        let n_out = oh * ow;
        let taps: Vec<Tap<T>> = (0..n_out)
            .map(|p| tap(cache.coords[p], cache.coords[n_out + p], x.h, x.w))
            .collect();

        // sampling branch: scatter into the input, per channel
        let mut grad_x = Tensor3::zeros(x.c, x.h, x.w);
        grad_x
            .data
            .par_chunks_mut(x.h * x.w)
            .enumerate()
            .for_each(|(c, gx)| {
                let g = grad_out.channel(c);
                let one = T::one();
                for (p, t) in taps.iter().enumerate() {
                    let gv = g[p];
                    if gv == T::zero() {
                        continue;
                    }
                    gx[t.y0 * x.w + t.x0] += gv * (one - t.fy) * (one - t.fx);
                    gx[t.y0 * x.w + t.x1] += gv * (one - t.fy) * t.fx;
                    gx[t.y1 * x.w + t.x0] += gv * t.fy * (one - t.fx);
                    gx[t.y1 * x.w + t.x1] += gv * t.fy * t.fx;
                }
            });

        // ∂L/∂(coordinate) per output pixel, summed over channels
        let mut g_coord = vec![T::zero(); 2 * n_out];
        {
            let (gu, gv) = g_coord.split_at_mut(n_out);
            gu.par_iter_mut()
                .zip(gv.par_iter_mut())
                .enumerate()
                .for_each(|(p, (du, dv))| {
                    let t = &taps[p];
                    if !t.free_x && !t.free_y {
                        return;
                    }
                    let one = T::one();
                    let mut acc_u = T::zero();
                    let mut acc_v = T::zero();
                    for c in 0..x.c {
                        let go = grad_out.data[c * n_out + p];
                        if go == T::zero() {
                            continue;
                        }
                        let src = x.channel(c);
                        let a = src[t.y0 * x.w + t.x0];
                        let b = src[t.y0 * x.w + t.x1];
                        let cc = src[t.y1 * x.w + t.x0];
                        let d = src[t.y1 * x.w + t.x1];
                        acc_u += go * ((one - t.fy) * (b - a) + t.fy * (d - cc));
                        acc_v += go * ((one - t.fx) * (cc - a) + t.fx * (d - b));
                    }
                    if t.free_x {
                        *du = acc_u;
                    }
                    if t.free_y {
                        *dv = acc_v;
                    }
                });
        }

        // un-shuffle into offset channels at input resolution, times the factor
        let hw = x.h * x.w;
        let ss = s * s;
        let k = self.offset_channels();
        let mut g_lin = vec![T::zero(); k * hw];
        for oy in 0..oh {
            let (i, di) = (oy / s, oy % s);
            for ox in 0..ow {
                let (j, dj) = (ox / s, ox % s);
                let sub = di * s + dj;
                let p = oy * ow + ox;
                g_lin[sub * hw + i * x.w + j] = g_coord[p] * self.offset_factor;
                g_lin[(ss + sub) * hw + i * x.w + j] = g_coord[n_out + p] * self.offset_factor;
            }
        }

        let grad_b: Vec<T> = (0..k)
            .map(|ch| g_lin[ch * hw..(ch + 1) * hw].iter().fold(T::zero(), |a, b| a + *b))
            .collect();
        let mut grad_w = vec![T::zero(); k * self.in_c];
        grad_w
            .par_chunks_mut(self.in_c)
            .enumerate()
            .for_each(|(ch, gw)| {
                let gl = &g_lin[ch * hw..(ch + 1) * hw];
                for (c, slot) in gw.iter_mut().enumerate() {
                    *slot = gl
                        .iter()
                        .zip(x.channel(c))
                        .fold(T::zero(), |a, (g, v)| a + *g * *v);
                }
            });
        grad_x
            .data
            .par_chunks_mut(hw)
            .enumerate()
            .for_each(|(c, gx)| {
                for ch in 0..k {
                    let wv = self.linear_w[ch * self.in_c + c];
                    if wv == T::zero() {
                        continue;
                    }
                    for (g, gl) in gx.iter_mut().zip(&g_lin[ch * hw..(ch + 1) * hw]) {
                        *g += wv * *gl;
                    }
                }
            });
        Ok((grad_x, grad_w, grad_b))
    }
}

#[inline]
fn sample<T: Scalar>(src: &[T], w: usize, t: &Tap<T>) -> T {
    let one = T::one();
    let top = src[t.y0 * w + t.x0] * (one - t.fx) + src[t.y0 * w + t.x1] * t.fx;
    let bot = src[t.y1 * w + t.x0] * (one - t.fx) + src[t.y1 * w + t.x1] * t.fx;
    top * (one - t.fy) + bot * t.fy
}

/// Plain bilinear upsampling by an integer factor, half-pixel centres,
/// borders clamped.
pub fn bilinear_upsample<T: Scalar>(x: &Tensor3<T>, s: usize) -> Tensor3<T> {
    let (oh, ow) = (x.h * s, x.w * s);
    let mut out = Tensor3::zeros(x.c, oh, ow);
    let src_coord = |o: usize, n: usize| -> (usize, usize, T) {
        let c = ((o as f64 + 0.5) / s as f64 - 0.5).max(0.0);
        let i0 = (c.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        let f = if i0 == n - 1 { 0.0 } else { c - i0 as f64 };
        (i0, i1, lit(f))
    };
    for c in 0..x.c {
        for oy in 0..oh {
            let (y0, y1, fy) = src_coord(oy, x.h);
            for ox in 0..ow {
                let (x0, x1, fx) = src_coord(ox, x.w);
                let one = T::one();
                let v = (x.at(c, y0, x0) * (one - fx) + x.at(c, y0, x1) * fx) * (one - fy)
                    + (x.at(c, y1, x0) * (one - fx) + x.at(c, y1, x1) * fx) * fy;
                let idx = out.idx(c, oy, ox);
                out.data[idx] = v;
            }
        }
    }
    out
}
