//! 2D convolution lowered to im2col + sgemm, parallelized across batch
//! samples. Parameter gradients are accumulated per fixed chunk and summed
//! in chunk order, so results are bit-identical for a given batch size
//! regardless of thread scheduling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::tensor::{Param, Tensor};

/// Number of gradient-accumulation chunks; fixed so the reduction order
/// never depends on the machine.
const GRAD_CHUNKS: usize = 4;

/// C = alpha * A(m×k) * B(k×n) + beta * C(m×n), row-major contiguous slices.
fn sgemm_rm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    b: &[f32],
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C = alpha * Aᵀ(m×k, stored k×m row-major) * B(k×n) + beta * C.
fn sgemm_at(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a_t: &[f32],
    b: &[f32],
    beta: f32,
    c: &mut [f32],
) {
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a_t.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C = alpha * A(m×k) * Bᵀ(k×n, stored n×k row-major) + beta * C.
fn sgemm_bt(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    b_t: &[f32],
    beta: f32,
    c: &mut [f32],
) {
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            b_t.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct ConvCache {
    /// im2col buffers, one block of `k_rows * out_plane` per sample.
    cols: Vec<f32>,
    in_h: usize,
    in_w: usize,
    n: usize,
    out_h: usize,
    out_w: usize,
}

struct ConvDims {
    in_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

fn im2col(d: &ConvDims, x: &[f32], in_h: usize, in_w: usize, out_h: usize, out_w: usize, cols: &mut [f32]) {
    let k = d.k;
    let stride = d.stride;
    let pad = d.pad as isize;
    let out_plane = out_h * out_w;
    for ci in 0..d.in_c {
        let x_ch = &x[ci * in_h * in_w..(ci + 1) * in_h * in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * out_plane..(row + 1) * out_plane];
                for oy in 0..out_h {
                    let iy = (oy * stride) as isize + ky as isize - pad;
                    let dst_row = &mut dst[oy * out_w..(oy + 1) * out_w];
                    if iy < 0 || iy >= in_h as isize {
                        dst_row.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src_row = &x_ch[iy as usize * in_w..(iy as usize + 1) * in_w];
                    if stride == 1 {
                        // interior is one contiguous copy; edges are zeros
                        let shift = kx as isize - pad; // ix = ox + shift
                        let ox_lo = (-shift).clamp(0, out_w as isize) as usize;
                        let ox_hi = ((in_w as isize - shift).clamp(0, out_w as isize)) as usize;
                        dst_row[..ox_lo].iter_mut().for_each(|v| *v = 0.0);
                        if ox_hi > ox_lo {
                            let src_lo = (ox_lo as isize + shift) as usize;
                            dst_row[ox_lo..ox_hi]
                                .copy_from_slice(&src_row[src_lo..src_lo + (ox_hi - ox_lo)]);
                        }
                        dst_row[ox_hi.max(ox_lo)..]
                            .iter_mut()
                            .for_each(|v| *v = 0.0);
                    } else {
                        for (ox, dv) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * stride) as isize + kx as isize - pad;
                            *dv = if ix < 0 || ix >= in_w as isize {
                                0.0
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

fn col2im(d: &ConvDims, cols: &[f32], in_h: usize, in_w: usize, out_h: usize, out_w: usize, gx: &mut [f32]) {
    let k = d.k;
    let stride = d.stride;
    let pad = d.pad as isize;
    let out_plane = out_h * out_w;
    for ci in 0..d.in_c {
        let gx_ch = &mut gx[ci * in_h * in_w..(ci + 1) * in_h * in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * out_plane..(row + 1) * out_plane];
                for oy in 0..out_h {
                    let iy = (oy * stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= in_h as isize {
                        continue;
                    }
                    let gx_row = &mut gx_ch[iy as usize * in_w..(iy as usize + 1) * in_w];
                    let src_row = &src[oy * out_w..(oy + 1) * out_w];
                    if stride == 1 {
                        let shift = kx as isize - pad;
                        let ox_lo = (-shift).clamp(0, out_w as isize) as usize;
                        let ox_hi = ((in_w as isize - shift).clamp(0, out_w as isize)) as usize;
                        if ox_hi > ox_lo {
                            let dst_lo = (ox_lo as isize + shift) as usize;
                            let dst = &mut gx_row[dst_lo..dst_lo + (ox_hi - ox_lo)];
                            let src_mid = &src_row[ox_lo..ox_hi];
                            for (a, b) in dst.iter_mut().zip(src_mid.iter()) {
                                *a += b;
                            }
                        }
                    } else {
                        for (ox, sv) in src_row.iter().enumerate() {
                            let ix = (ox * stride) as isize + kx as isize - pad;
                            if ix >= 0 && ix < in_w as isize {
                                gx_row[ix as usize] += sv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Square-kernel convolution with stride and zero padding.
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Param,
    pub bias: Param,
    /// When false the layer still backpropagates to its input but never
    /// accumulates parameter gradients (frozen model).
    pub train_params: bool,
    cache: Option<ConvCache>,
}

impl Conv2d {
    pub fn new(
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (in_c * k * k) as f32;
        // Kaiming-uniform bound with leaky-relu gain
        let gain = (2.0f32 / (1.0 + 0.01)).sqrt();
        let bound = gain * (3.0 / fan_in).sqrt();
        let wlen = out_c * in_c * k * k;
        let wdata: Vec<f32> = (0..wlen).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            in_c,
            out_c,
            k,
            stride,
            pad,
            weight: Param::new(format!("{name}.w"), vec![out_c, in_c, k, k], wdata),
            bias: Param::new(format!("{name}.b"), vec![out_c], vec![0.0; out_c]),
            train_params: true,
            cache: None,
        }
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn k_rows(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn dims(&self) -> ConvDims {
        ConvDims {
            in_c: self.in_c,
            k: self.k,
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn forward(&mut self, x: &Tensor, with_grad: bool) -> Tensor {
        assert_eq!(x.c, self.in_c, "conv {} input channels", self.weight.name);
        let (out_h, out_w) = self.out_dims(x.h, x.w);
        let out_plane = out_h * out_w;
        let k_rows = self.k_rows();
        let in_len = x.sample_len();
        let out_len = self.out_c * out_plane;
        let block = k_rows * out_plane;
        let mut cols = vec![0.0f32; x.n * block];
        let mut y = Tensor::zeros(x.n, self.out_c, out_h, out_w);

        let d = self.dims();
        let weight = &self.weight.data;
        let bias = &self.bias.data;
        let out_c = self.out_c;
        cols.par_chunks_mut(block)
            .zip(y.data.par_chunks_mut(out_len))
            .zip(x.data.par_chunks(in_len))
            .for_each(|((cols_n, y_n), x_n)| {
                im2col(&d, x_n, x.h, x.w, out_h, out_w, cols_n);
                sgemm_rm(out_c, k_rows, out_plane, 1.0, weight, cols_n, 0.0, y_n);
                for co in 0..out_c {
                    let b = bias[co];
                    if b != 0.0 {
                        y_n[co * out_plane..(co + 1) * out_plane]
                            .iter_mut()
                            .for_each(|v| *v += b);
                    }
                }
            });

        self.cache = if with_grad {
            Some(ConvCache {
                cols,
                in_h: x.h,
                in_w: x.w,
                n: x.n,
                out_h,
                out_w,
            })
        } else {
            None
        };
        y
    }

    pub fn backward(&mut self, gy: &Tensor) -> Tensor {
        let cache = self.cache.take().expect("conv backward without forward");
        let out_plane = cache.out_h * cache.out_w;
        let k_rows = self.k_rows();
        assert_eq!(gy.n, cache.n);
        assert_eq!(gy.c, self.out_c);

        let n = cache.n;
        let in_len = self.in_c * cache.in_h * cache.in_w;
        let out_len = self.out_c * out_plane;
        let block = k_rows * out_plane;
        let chunk = n.div_ceil(GRAD_CHUNKS.min(n).max(1));
        let wlen = self.weight.data.len();

        let mut gx = Tensor::zeros(n, self.in_c, cache.in_h, cache.in_w);
        let d = self.dims();
        let weight = &self.weight.data;
        let train = self.train_params;
        let out_c = self.out_c;

        // per-chunk local parameter gradients, combined in chunk order below
        let partials: Vec<(Vec<f32>, Vec<f32>)> = gx
            .data
            .par_chunks_mut(chunk * in_len)
            .enumerate()
            .map(|(ci, gx_chunk)| {
                let mut gw = if train { vec![0.0f32; wlen] } else { Vec::new() };
                let mut gb = if train { vec![0.0f32; out_c] } else { Vec::new() };
                let mut gcols = vec![0.0f32; block];
                let samples = gx_chunk.len() / in_len;
                for local in 0..samples {
                    let sample = ci * chunk + local;
                    let gy_n = &gy.data[sample * out_len..(sample + 1) * out_len];
                    let cols_n = &cache.cols[sample * block..(sample + 1) * block];
                    if train {
                        sgemm_bt(out_c, out_plane, k_rows, 1.0, gy_n, cols_n, 1.0, &mut gw);
                        for co in 0..out_c {
                            let mut acc = 0.0f32;
                            for &g in &gy_n[co * out_plane..(co + 1) * out_plane] {
                                acc += g;
                            }
                            gb[co] += acc;
                        }
                    }
                    sgemm_at(k_rows, out_c, out_plane, 1.0, weight, gy_n, 0.0, &mut gcols);
                    col2im(
                        &d,
                        &gcols,
                        cache.in_h,
                        cache.in_w,
                        cache.out_h,
                        cache.out_w,
                        &mut gx_chunk[local * in_len..(local + 1) * in_len],
                    );
                }
                (gw, gb)
            })
            .collect();

        if train {
            for (gw, gb) in &partials {
                for (a, b) in self.weight.grad.iter_mut().zip(gw.iter()) {
                    *a += b;
                }
                for (a, b) in self.bias.grad.iter_mut().zip(gb.iter()) {
                    *a += b;
                }
            }
        }
        gx
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    /// Direct nested-loop convolution as the independent reference.
    fn conv_reference(x: &Tensor, w: &[f32], b: &[f32], out_c: usize, k: usize, stride: usize, pad: usize) -> Tensor {
        let out_h = (x.h + 2 * pad - k) / stride + 1;
        let out_w = (x.w + 2 * pad - k) / stride + 1;
        let mut y = Tensor::zeros(x.n, out_c, out_h, out_w);
        for n in 0..x.n {
            for co in 0..out_c {
                for oy in 0..out_h {
                    for ox in 0..out_w {
                        let mut acc = b[co];
                        for ci in 0..x.c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                        continue;
                                    }
                                    let xv = x.data[((n * x.c + ci) * x.h + iy as usize) * x.w
                                        + ix as usize];
                                    let wv = w[((co * x.c + ci) * k + ky) * k + kx];
                                    acc += xv * wv;
                                }
                            }
                        }
                        y.data[((n * out_c + co) * out_h + oy) * out_w + ox] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(stride, pad) in &[(1usize, 1usize), (2, 1), (1, 0), (1, 2)] {
            let mut conv = Conv2d::new("t", 3, 5, 3, stride, pad, &mut rng);
            conv.bias.data.iter_mut().enumerate().for_each(|(i, b)| *b = i as f32 * 0.1);
            let x = Tensor::from_vec(
                2,
                3,
                6,
                7,
                (0..2 * 3 * 6 * 7).map(|i| ((i * 37 % 97) as f32) / 97.0 - 0.5).collect(),
            );
            let y = conv.forward(&x, false);
            let want = conv_reference(&x, &conv.weight.data, &conv.bias.data, 5, 3, stride, pad);
            assert_eq!(y.shape(), want.shape());
            for (a, b) in y.data.iter().zip(want.data.iter()) {
                assert!((a - b).abs() < 1e-4, "conv mismatch {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_batched_matches_per_sample() {
        // chunked parallel path must agree with one-at-a-time processing
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut conv = Conv2d::new("t", 2, 4, 3, 1, 1, &mut rng);
        let n = 9; // not a multiple of the chunk count
        let x = Tensor::from_vec(
            n,
            2,
            5,
            5,
            (0..n * 50).map(|i| ((i * 29 % 83) as f32) / 83.0 - 0.5).collect(),
        );
        let y_batch = conv.forward(&x, true);
        let g_batch = conv.backward(&y_batch);
        let gw_batch = conv.weight.grad.clone();

        conv.weight.zero_grad();
        conv.bias.zero_grad();
        let mut gw_serial = vec![0.0f32; conv.weight.data.len()];
        for s in 0..n {
            let xs = Tensor::from_vec(1, 2, 5, 5, x.sample(s).to_vec());
            let ys = conv.forward(&xs, true);
            assert_eq!(ys.data, y_batch.sample(s), "forward sample {s}");
            conv.weight.zero_grad();
            conv.bias.zero_grad();
            let gs = conv.backward(&ys);
            for (i, v) in gs.data.iter().enumerate() {
                let b = g_batch.sample(s)[i];
                assert!((v - b).abs() < 1e-5, "gx sample {s} idx {i}");
            }
            for (a, g) in gw_serial.iter_mut().zip(conv.weight.grad.iter()) {
                *a += g;
            }
        }
        for (a, b) in gw_serial.iter().zip(gw_batch.iter()) {
            assert!((a - b).abs() < 1e-3 * (1.0 + a.abs()), "gw {a} vs {b}");
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut conv = Conv2d::new("t", 2, 3, 3, 2, 1, &mut rng);
        let x = Tensor::from_vec(
            1,
            2,
            5,
            5,
            (0..50).map(|i| ((i * 13 % 31) as f32) / 31.0 - 0.4).collect(),
        );

        // loss = sum(y^2) / 2 so gy = y
        let y = conv.forward(&x, true);
        let gx = conv.backward(&y);

        let loss = |conv: &mut Conv2d, x: &Tensor| -> f64 {
            let y = conv.forward(x, false);
            y.data.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() * 0.5
        };

        let h = 1e-2f32;
        for idx in [0usize, 7, 19, 33, 49] {
            let mut xp = x.clone();
            xp.data[idx] += h;
            let mut xm = x.clone();
            xm.data[idx] -= h;
            let fd = ((loss(&mut conv, &xp) - loss(&mut conv, &xm)) / (2.0 * h as f64)) as f32;
            let an = gx.data[idx];
            assert!(
                (fd - an).abs() < 1e-2 * (1.0 + fd.abs()),
                "input grad: fd {fd} vs analytic {an}"
            );
        }
        for idx in [0usize, 5, 17, 31, 53] {
            let orig = conv.weight.data[idx];
            conv.weight.data[idx] = orig + h;
            let lp = loss(&mut conv, &x);
            conv.weight.data[idx] = orig - h;
            let lm = loss(&mut conv, &x);
            conv.weight.data[idx] = orig;
            let fd = ((lp - lm) / (2.0 * h as f64)) as f32;
            let an = conv.weight.grad[idx];
            assert!(
                (fd - an).abs() < 1e-2 * (1.0 + fd.abs()),
                "weight grad: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn frozen_conv_accumulates_no_param_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut conv = Conv2d::new("t", 2, 2, 3, 1, 1, &mut rng);
        conv.train_params = false;
        let x = Tensor::from_vec(1, 2, 4, 4, vec![0.3; 32]);
        let y = conv.forward(&x, true);
        let _ = conv.backward(&y);
        assert!(conv.weight.grad.iter().all(|&g| g == 0.0));
        assert!(conv.bias.grad.iter().all(|&g| g == 0.0));
    }
}
