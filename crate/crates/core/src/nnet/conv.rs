use rand::Rng;
use rayon::prelude::*;

use crate::scalar::{lit, Scalar};

use super::{NnetError, Result, Tensor3};

/// Square-kernel 2-D cross-correlation with zero padding `k / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    /// `[out_c][in_c][k][k]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn zeros(in_c: usize, out_c: usize, k: usize, stride: usize) -> Self {
        assert!(k % 2 == 1 && stride >= 1);
        Self {
            in_c,
            out_c,
            k,
            stride,
            weight: vec![T::zero(); out_c * in_c * k * k],
            bias: vec![T::zero(); out_c],
        }
    }

    /// Uniform He initialisation, `U(-√(6/fan_in), √(6/fan_in))`, zero bias.
    pub fn he_uniform(in_c: usize, out_c: usize, k: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let mut conv = Self::zeros(in_c, out_c, k, stride);
        let bound = (6.0 / (in_c * k * k) as f64).sqrt();
        for w in &mut conv.weight {
            *w = lit(rng.gen_range(-bound..bound));
        }
        conv
    }

    fn pad(&self) -> usize {
        self.k / 2
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.pad();
        ((h + 2 * p - self.k) / self.stride + 1, (w + 2 * p - self.k) / self.stride + 1)
    }

    #[inline]
    fn widx(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_c + i) * self.k + ky) * self.k + kx
    }

    /// Output columns `ox` whose input column `ox·s + kx - p` is in `[0, w)`.
    fn valid_range(&self, kx: usize, w_in: usize, w_out: usize) -> (usize, usize) {
        let p = self.pad() as isize;
        let s = self.stride as isize;
        let off = kx as isize - p;
        // ox*s + off >= 0  and  ox*s + off <= w_in - 1
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let num = w_in as isize - 1 - off;
        let hi_excl = if num < 0 { 0 } else { num / s + 1 };
        (lo as usize, (hi_excl as usize).min(w_out))
    }

    pub fn forward(&self, x: &Tensor3<T>) -> Result<Tensor3<T>> {
        if x.c != self.in_c {
            return Err(NnetError::ShapeMismatch(format!(
                "conv expects {} input channels, got {}",
                self.in_c, x.c
            )));
        }
        let (oh, ow) = self.out_size(x.h, x.w);
        let p = self.pad();
        let s = self.stride;
        let mut out = Tensor3::zeros(self.out_c, oh, ow);
        out.data
            .par_chunks_mut(oh * ow)
            .enumerate()
            .for_each(|(o, plane)| {
                plane.iter_mut().for_each(|v| *v = self.bias[o]);
                for i in 0..self.in_c {
                    let src = x.channel(i);
                    for ky in 0..self.k {
                        let (ylo, yhi) = self.valid_range(ky, x.h, oh);
                        for kx in 0..self.k {
                            let wv = self.weight[self.widx(o, i, ky, kx)];
                            if wv == T::zero() {
                                continue;
                            }
                            let (xlo, xhi) = self.valid_range(kx, x.w, ow);
                            if xlo >= xhi {
                                continue;
                            }
                            for oy in ylo..yhi {
                                let iy = oy * s + ky - p;
                                let row_in = &src[iy * x.w..(iy + 1) * x.w];
                                let row_out = &mut plane[oy * ow..(oy + 1) * ow];
                                if s == 1 {
                                    let shift = xlo + kx - p;
                                    for (r, v) in row_out[xlo..xhi].iter_mut().zip(&row_in[shift..]) {
                                        *r += wv * *v;
                                    }
                                } else {
                                    for ox in xlo..xhi {
                                        row_out[ox] += wv * row_in[ox * s + kx - p];
                                    }
                                }
                            }
                        }
                    }
                }
            });
        Ok(out)
    }

    /// Returns `(∂/∂x, ∂/∂weight, ∂/∂bias)`.
    pub fn backward(&self, x: &Tensor3<T>, grad_out: &Tensor3<T>) -> Result<(Tensor3<T>, Vec<T>, Vec<T>)> {
        let (oh, ow) = self.out_size(x.h, x.w);
        if grad_out.shape() != (self.out_c, oh, ow) || x.c != self.in_c {
            return Err(NnetError::ShapeMismatch("conv backward shapes".into()));
        }
        let p = self.pad();
        let s = self.stride;
        let kk = self.k * self.k;

        let grad_b: Vec<T> = (0..self.out_c)
            .map(|o| grad_out.channel(o).iter().fold(T::zero(), |a, b| a + *b))
            .collect();

        let mut grad_w = vec![T::zero(); self.weight.len()];
        grad_w
            .par_chunks_mut(self.in_c * kk)
            .enumerate()
            .for_each(|(o, gw)| {
                let g = grad_out.channel(o);
                // per-column partial sums keep the inner loop vectorisable
                let mut lanes = vec![T::zero(); ow];
                for i in 0..self.in_c {
                    let src = x.channel(i);
                    for ky in 0..self.k {
                        let (ylo, yhi) = self.valid_range(ky, x.h, oh);
                        for kx in 0..self.k {
                            let (xlo, xhi) = self.valid_range(kx, x.w, ow);
                            if xlo >= xhi {
                                gw[(i * self.k + ky) * self.k + kx] = T::zero();
                                continue;
                            }
                            let lanes = &mut lanes[..xhi - xlo];
                            lanes.iter_mut().for_each(|v| *v = T::zero());
                            for oy in ylo..yhi {
                                let iy = oy * s + ky - p;
                                let row_in = &src[iy * x.w..(iy + 1) * x.w];
                                let row_g = &g[oy * ow + xlo..oy * ow + xhi];
                                if s == 1 {
                                    let row_in = &row_in[xlo + kx - p..];
                                    for ((l, a), b) in lanes.iter_mut().zip(row_g).zip(row_in) {
                                        *l += *a * *b;
                                    }
                                } else {
                                    for (j, (l, a)) in lanes.iter_mut().zip(row_g).enumerate() {
                                        *l += *a * row_in[(xlo + j) * s + kx - p];
                                    }
                                }
                            }
                            gw[(i * self.k + ky) * self.k + kx] = lanes.iter().fold(T::zero(), |a, b| a + *b);
                        }
                    }
                }
            });

        let mut grad_x = Tensor3::zeros(x.c, x.h, x.w);
        let (h, w) = (x.h, x.w);
        grad_x
            .data
            .par_chunks_mut(h * w)
            .enumerate()
            .for_each(|(i, gx)| {
                for o in 0..self.out_c {
                    let g = grad_out.channel(o);
                    for ky in 0..self.k {
                        let (ylo, yhi) = self.valid_range(ky, h, oh);
                        for kx in 0..self.k {
                            let wv = self.weight[self.widx(o, i, ky, kx)];
                            if wv == T::zero() {
                                continue;
                            }
                            let (xlo, xhi) = self.valid_range(kx, w, ow);
                            for oy in ylo..yhi {
                                let iy = oy * s + ky - p;
                                let row_g = &g[oy * ow..(oy + 1) * ow];
                                let row_x = &mut gx[iy * w..(iy + 1) * w];
                                if s == 1 {
                                    let shift = xlo + kx - p;
                                    for (r, v) in row_x[shift..].iter_mut().zip(&row_g[xlo..xhi]) {
                                        *r += wv * *v;
                                    }
                                } else {
                                    for ox in xlo..xhi {
                                        row_x[ox * s + kx - p] += wv * row_g[ox];
                                    }
                                }
                            }
                        }
                    }
                }
            });
        Ok((grad_x, grad_w, grad_b))
    }

    pub fn n_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

pub fn relu_forward<T: Scalar>(x: &mut Tensor3<T>) {
    for v in &mut x.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Gradient through ReLU given the layer's *output*.
pub fn relu_backward<T: Scalar>(out: &Tensor3<T>, grad: &mut Tensor3<T>) {
    for (g, o) in grad.data.iter_mut().zip(&out.data) {
        if *o <= T::zero() {
            *g = T::zero();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor3<f64> {
        Tensor3::from_vec(c, h, w, (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct six-loop convolution.
    fn oracle(conv: &Conv2d<f64>, x: &Tensor3<f64>) -> Tensor3<f64> {
        let (oh, ow) = conv.out_size(x.h, x.w);
        let p = conv.k as isize / 2;
        let mut out = Tensor3::zeros(conv.out_c, oh, ow);
        for o in 0..conv.out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = conv.bias[o];
                    for i in 0..conv.in_c {
                        for ky in 0..conv.k {
                            for kx in 0..conv.k {
                                let iy = (oy * conv.stride) as isize + ky as isize - p;
                                let ix = (ox * conv.stride) as isize + kx as isize - p;
                                if iy >= 0 && ix >= 0 && (iy as usize) < x.h && (ix as usize) < x.w {
                                    acc += conv.weight[conv.widx(o, i, ky, kx)] * x.at(i, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    let idx = out.idx(o, oy, ox);
                    out.data[idx] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = rand_tensor(3, 5, 4, &mut rng);
        let mut conv = Conv2d::<f64>::zeros(3, 3, 1, 1);
        for c in 0..3 {
            let i = conv.widx(c, c, 0, 0);
            conv.weight[i] = 1.0;
        }
        assert_eq!(conv.forward(&x).unwrap(), x);
    }

    #[test]
    fn zero_kernel_gives_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = rand_tensor(2, 4, 4, &mut rng);
        let mut conv = Conv2d::<f64>::zeros(2, 3, 3, 1);
        conv.bias = vec![0.5, -1.0, 2.0];
        let y = conv.forward(&x).unwrap();
        for o in 0..3 {
            assert!(y.channel(o).iter().all(|v| *v == conv.bias[o]));
        }
    }

    #[test]
    fn matches_six_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(c, h, w, oc, k, s) in &[(1, 4, 4, 1, 3, 1), (3, 7, 6, 2, 3, 2), (2, 5, 5, 4, 1, 1), (2, 8, 9, 3, 3, 2)] {
            let x = rand_tensor(c, h, w, &mut rng);
            let mut conv = Conv2d::<f64>::he_uniform(c, oc, k, s, &mut rng);
            conv.bias.iter_mut().for_each(|b| *b = rng.gen_range(-1.0..1.0));
            let a = conv.forward(&x).unwrap();
            let b = oracle(&conv, &x);
            assert_eq!(a.shape(), b.shape());
            for (u, v) in a.data.iter().zip(&b.data) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn channel_mismatch() {
        let conv = Conv2d::<f32>::zeros(2, 2, 3, 1);
        assert!(conv.forward(&Tensor3::zeros(3, 2, 2)).is_err());
    }

    #[test]
    fn stride_two_output_size() {
        let conv = Conv2d::<f32>::zeros(1, 1, 3, 2);
        assert_eq!(conv.out_size(32, 360), (16, 180));
        assert_eq!(conv.out_size(7, 5), (4, 3));
    }
}
