//! Pointwise, normalization, pooling, resampling, and dense layers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{Param, Tensor};

// ---------------------------------------------------------------------------
// Instance normalization
// ---------------------------------------------------------------------------

/// Per-sample per-channel normalization with a learned affine. Batch-size
/// independent, which keeps training deterministic under any batching.
pub struct InstanceNorm2d {
    pub ch: usize,
    pub gamma: Param,
    pub beta: Param,
    pub eps: f32,
    pub train_params: bool,
    cache: Option<(Vec<f32>, Vec<f32>)>, // (xhat, inv_std per n*c)
}

impl InstanceNorm2d {
    pub fn new(name: &str, ch: usize) -> Self {
        Self {
            ch,
            gamma: Param::new(format!("{name}.g"), vec![ch], vec![1.0; ch]),
            beta: Param::new(format!("{name}.bt"), vec![ch], vec![0.0; ch]),
            eps: 1e-5,
            train_params: true,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor, with_grad: bool) -> Tensor {
        assert_eq!(x.c, self.ch);
        let plane = x.plane();
        let mut y = Tensor::zeros(x.n, x.c, x.h, x.w);
        let mut xhat = vec![0.0f32; x.len()];
        let mut inv_stds = vec![0.0f32; x.n * x.c];
        for n in 0..x.n {
            for c in 0..x.c {
                let off = (n * x.c + c) * plane;
                let xs = &x.data[off..off + plane];
                let mut mean = 0.0f64;
                for &v in xs {
                    mean += v as f64;
                }
                mean /= plane as f64;
                let mut var = 0.0f64;
                for &v in xs {
                    let d = v as f64 - mean;
                    var += d * d;
                }
                var /= plane as f64;
                let inv_std = 1.0 / ((var as f32) + self.eps).sqrt();
                inv_stds[n * x.c + c] = inv_std;
                let g = self.gamma.data[c];
                let b = self.beta.data[c];
                let xh = &mut xhat[off..off + plane];
                let ys = &mut y.data[off..off + plane];
                for i in 0..plane {
                    let v = (xs[i] - mean as f32) * inv_std;
                    xh[i] = v;
                    ys[i] = g * v + b;
                }
            }
        }
        self.cache = with_grad.then_some((xhat, inv_stds));
        y
    }

    pub fn backward(&mut self, gy: &Tensor) -> Tensor {
        let (xhat, inv_stds) = self.cache.take().expect("instance norm backward without forward");
        let plane = gy.plane();
        let mut gx = Tensor::zeros(gy.n, gy.c, gy.h, gy.w);
        for n in 0..gy.n {
            for c in 0..gy.c {
                let off = (n * gy.c + c) * plane;
                let gys = &gy.data[off..off + plane];
                let xh = &xhat[off..off + plane];
                let inv_std = inv_stds[n * gy.c + c];
                let g = self.gamma.data[c];

                let mut sum_gy = 0.0f64;
                let mut sum_gy_xh = 0.0f64;
                for i in 0..plane {
                    sum_gy += gys[i] as f64;
                    sum_gy_xh += (gys[i] * xh[i]) as f64;
                }
                if self.train_params {
                    self.gamma.grad[c] += sum_gy_xh as f32;
                    self.beta.grad[c] += sum_gy as f32;
                }
                let mean_gy = (sum_gy / plane as f64) as f32;
                let mean_gy_xh = (sum_gy_xh / plane as f64) as f32;
                let gxs = &mut gx.data[off..off + plane];
                for i in 0..plane {
                    gxs[i] = g * inv_std * (gys[i] - mean_gy - xh[i] * mean_gy_xh);
                }
            }
        }
        gx
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

pub struct LeakyRelu {
    pub alpha: f32,
    cache: Option<Vec<f32>>, // input copy
}

impl LeakyRelu {
    pub fn new(alpha: f32) -> Self {
        Self { alpha, cache: None }
    }

    pub fn forward(&mut self, x: &Tensor, with_grad: bool) -> Tensor {
        let mut y = x.clone();
        let a = self.alpha;
        y.data.iter_mut().for_each(|v| {
            if *v < 0.0 {
                *v *= a;
            }
        });
        self.cache = with_grad.then(|| x.data.clone());
        y
    }

    pub fn backward(&mut self, gy: &Tensor) -> Tensor {
        let x = self.cache.take().expect("leaky relu backward without forward");
        let mut gx = gy.clone();
        let a = self.alpha;
        for (g, &xv) in gx.data.iter_mut().zip(x.iter()) {
            if xv < 0.0 {
                *g *= a;
            }
        }
        gx
    }
}

pub struct Sigmoid {
    cache: Option<Vec<f32>>, // output copy
}

impl Sigmoid {
    pub fn new() -> Self {
        Self { cache: None }
    }

    pub fn forward(&mut self, x: &Tensor, with_grad: bool) -> Tensor {
        let mut y = x.clone();
        y.data.iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp()));
        self.cache = with_grad.then(|| y.data.clone());
        y
    }

    pub fn backward(&mut self, gy: &Tensor) -> Tensor {
        let y = self.cache.take().expect("sigmoid backward without forward");
        let mut gx = gy.clone();
        for (g, &yv) in gx.data.iter_mut().zip(y.iter()) {
            *g *= yv * (1.0 - yv);
        }
        gx
    }
}

impl Default for Sigmoid {
    fn default() -> Self {
        Self::new()
    }
}

// ---------------------------------------------------------------------------
// Resampling and pooling
// ---------------------------------------------------------------------------

/// Nearest-neighbor 2x upsampling.
pub struct Upsample2x;

impl Upsample2x {
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut y = Tensor::zeros(x.n, x.c, x.h * 2, x.w * 2);
        let (h, w) = (x.h, x.w);
        for n in 0..x.n {
            for c in 0..x.c {
                let src = &x.data[(n * x.c + c) * h * w..(n * x.c + c + 1) * h * w];
                let dst =
                    &mut y.data[(n * x.c + c) * 4 * h * w..(n * x.c + c + 1) * 4 * h * w];
                for iy in 0..h {
                    for ix in 0..w {
                        let v = src[iy * w + ix];
                        let base = (iy * 2) * (w * 2) + ix * 2;
                        dst[base] = v;
                        dst[base + 1] = v;
                        dst[base + w * 2] = v;
                        dst[base + w * 2 + 1] = v;
                    }
                }
            }
        }
        y
    }

    pub fn backward(&self, gy: &Tensor) -> Tensor {
        let (h, w) = (gy.h / 2, gy.w / 2);
        let mut gx = Tensor::zeros(gy.n, gy.c, h, w);
        for n in 0..gy.n {
            for c in 0..gy.c {
                let src = &gy.data[(n * gy.c + c) * gy.h * gy.w..(n * gy.c + c + 1) * gy.h * gy.w];
                let dst = &mut gx.data[(n * gy.c + c) * h * w..(n * gy.c + c + 1) * h * w];
                for iy in 0..h {
                    for ix in 0..w {
                        let base = (iy * 2) * (w * 2) + ix * 2;
                        dst[iy * w + ix] =
                            src[base] + src[base + 1] + src[base + w * 2] + src[base + w * 2 + 1];
                    }
                }
            }
        }
        gx
    }
}

/// Global average pooling to `[n, c, 1, 1]`.
pub struct GlobalAvgPool {
    cache: Option<(usize, usize)>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self { cache: None }
    }

    pub fn forward(&mut self, x: &Tensor, with_grad: bool) -> Tensor {
        let plane = x.plane();
        let mut y = Tensor::zeros(x.n, x.c, 1, 1);
        for n in 0..x.n {
            for c in 0..x.c {
                let off = (n * x.c + c) * plane;
                let mut acc = 0.0f64;
                for &v in &x.data[off..off + plane] {
                    acc += v as f64;
                }
                y.data[n * x.c + c] = (acc / plane as f64) as f32;
            }
        }
        self.cache = with_grad.then_some((x.h, x.w));
        y
    }

    pub fn backward(&mut self, gy: &Tensor) -> Tensor {
        let (h, w) = self.cache.take().expect("gap backward without forward");
        let plane = h * w;
        let inv = 1.0 / plane as f32;
        let mut gx = Tensor::zeros(gy.n, gy.c, h, w);
        for n in 0..gy.n {
            for c in 0..gy.c {
                let g = gy.data[n * gy.c + c] * inv;
                let off = (n * gy.c + c) * plane;
                gx.data[off..off + plane].iter_mut().for_each(|v| *v = g);
            }
        }
        gx
    }
}

impl Default for GlobalAvgPool {
    fn default() -> Self {
        Self::new()
    }
}

/// Bilinear resize to a fixed output size; linear, so the backward pass
/// scatters the same interpolation weights.
pub struct BilinearResize {
    pub out_h: usize,
    pub out_w: usize,
    cache: Option<(usize, usize)>,
}

struct Taps {
    i0: usize,
    i1: usize,
    w0: f32,
    w1: f32,
}

fn taps(out: usize, inp: usize) -> Vec<Taps> {
    let scale = inp as f32 / out as f32;
    (0..out)
        .map(|o| {
            let src = (o as f32 + 0.5) * scale - 0.5;
            let src = src.clamp(0.0, (inp - 1) as f32);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(inp - 1);
            let w1 = src - i0 as f32;
            Taps {
                i0,
                i1,
                w0: 1.0 - w1,
                w1,
            }
        })
        .collect()
}

impl BilinearResize {
    pub fn new(out_h: usize, out_w: usize) -> Self {
        Self {
            out_h,
            out_w,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor, with_grad: bool) -> Tensor {
        if x.h == self.out_h && x.w == self.out_w {
            self.cache = with_grad.then_some((x.h, x.w));
            return x.clone();
        }
        let ty = taps(self.out_h, x.h);
        let tx = taps(self.out_w, x.w);
        let mut y = Tensor::zeros(x.n, x.c, self.out_h, self.out_w);
        for n in 0..x.n {
            for c in 0..x.c {
                let src = &x.data[(n * x.c + c) * x.h * x.w..(n * x.c + c + 1) * x.h * x.w];
                let dst = &mut y.data[(n * x.c + c) * self.out_h * self.out_w
                    ..(n * x.c + c + 1) * self.out_h * self.out_w];
                for (oy, t_y) in ty.iter().enumerate() {
                    for (ox, t_x) in tx.iter().enumerate() {
                        let v = t_y.w0 * (t_x.w0 * src[t_y.i0 * x.w + t_x.i0]
                            + t_x.w1 * src[t_y.i0 * x.w + t_x.i1])
                            + t_y.w1 * (t_x.w0 * src[t_y.i1 * x.w + t_x.i0]
                                + t_x.w1 * src[t_y.i1 * x.w + t_x.i1]);
                        dst[oy * self.out_w + ox] = v;
                    }
                }
            }
        }
        self.cache = with_grad.then_some((x.h, x.w));
        y
    }

    pub fn backward(&mut self, gy: &Tensor) -> Tensor {
        let (in_h, in_w) = self.cache.take().expect("resize backward without forward");
        if in_h == self.out_h && in_w == self.out_w {
            return gy.clone();
        }
        let ty = taps(self.out_h, in_h);
        let tx = taps(self.out_w, in_w);
        let mut gx = Tensor::zeros(gy.n, gy.c, in_h, in_w);
        for n in 0..gy.n {
            for c in 0..gy.c {
                let src = &gy.data[(n * gy.c + c) * self.out_h * self.out_w
                    ..(n * gy.c + c + 1) * self.out_h * self.out_w];
                let dst = &mut gx.data[(n * gy.c + c) * in_h * in_w
                    ..(n * gy.c + c + 1) * in_h * in_w];
                for (oy, t_y) in ty.iter().enumerate() {
                    for (ox, t_x) in tx.iter().enumerate() {
                        let g = src[oy * self.out_w + ox];
                        dst[t_y.i0 * in_w + t_x.i0] += t_y.w0 * t_x.w0 * g;
                        dst[t_y.i0 * in_w + t_x.i1] += t_y.w0 * t_x.w1 * g;
                        dst[t_y.i1 * in_w + t_x.i0] += t_y.w1 * t_x.w0 * g;
                        dst[t_y.i1 * in_w + t_x.i1] += t_y.w1 * t_x.w1 * g;
                    }
                }
            }
        }
        gx
    }
}

// ---------------------------------------------------------------------------
// Dense
// ---------------------------------------------------------------------------

/// Fully connected layer over `[n, in_f, 1, 1]` tensors.
pub struct Linear {
    pub in_f: usize,
    pub out_f: usize,
    pub weight: Param,
    pub bias: Param,
    pub train_params: bool,
    cache: Option<Vec<f32>>, // input copy
}

impl Linear {
    pub fn new(name: &str, in_f: usize, out_f: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (1.0 / in_f as f32).sqrt();
        let wdata: Vec<f32> = (0..in_f * out_f)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            in_f,
            out_f,
            weight: Param::new(format!("{name}.w"), vec![out_f, in_f], wdata),
            bias: Param::new(format!("{name}.b"), vec![out_f], vec![0.0; out_f]),
            train_params: true,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor, with_grad: bool) -> Tensor {
        assert_eq!(x.c, self.in_f);
        assert_eq!(x.plane(), 1, "linear expects pooled [n, c, 1, 1] input");
        let mut y = Tensor::zeros(x.n, self.out_f, 1, 1);
        for n in 0..x.n {
            let xs = x.sample(n);
            let ys = y.sample_mut(n);
            for o in 0..self.out_f {
                let row = &self.weight.data[o * self.in_f..(o + 1) * self.in_f];
                let mut acc = self.bias.data[o];
                for i in 0..self.in_f {
                    acc += row[i] * xs[i];
                }
                ys[o] = acc;
            }
        }
        self.cache = with_grad.then(|| x.data.clone());
        y
    }

    pub fn backward(&mut self, gy: &Tensor) -> Tensor {
        let x = self.cache.take().expect("linear backward without forward");
        let n = gy.n;
        let mut gx = Tensor::zeros(n, self.in_f, 1, 1);
        for s in 0..n {
            let gys = gy.sample(s);
            let xs = &x[s * self.in_f..(s + 1) * self.in_f];
            let gxs = gx.sample_mut(s);
            for o in 0..self.out_f {
                let g = gys[o];
                if self.train_params {
                    self.bias.grad[o] += g;
                    let wrow = &mut self.weight.grad[o * self.in_f..(o + 1) * self.in_f];
                    for i in 0..self.in_f {
                        wrow[i] += g * xs[i];
                    }
                }
                let row = &self.weight.data[o * self.in_f..(o + 1) * self.in_f];
                for i in 0..self.in_f {
                    gxs[i] += g * row[i];
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

    fn fd_check<F>(x: &Tensor, gx: &Tensor, mut loss: F, idxs: &[usize], tol: f32)
    where
        F: FnMut(&Tensor) -> f64,
    {
        let h = 1e-2f32;
        for &i in idxs {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fd = ((loss(&xp) - loss(&xm)) / (2.0 * h as f64)) as f32;
            let an = gx.data[i];
            assert!(
                (fd - an).abs() < tol * (1.0 + fd.abs()),
                "fd {fd} vs analytic {an} at {i}"
            );
        }
    }

    fn quad_loss(y: &Tensor) -> f64 {
        y.data.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() * 0.5
    }

    #[test]
    fn instance_norm_gradcheck() {
        let mut layer = InstanceNorm2d::new("in", 2);
        layer.gamma.data = vec![1.3, 0.7];
        layer.beta.data = vec![0.1, -0.2];
        let x = Tensor::from_vec(
            1,
            2,
            3,
            4,
            (0..24).map(|i| ((i * 7 % 13) as f32) * 0.11 - 0.5).collect(),
        );
        let y = layer.forward(&x, true);
        let gx = layer.backward(&y);
        fd_check(
            &x,
            &gx,
            |xt| {
                let mut l = InstanceNorm2d::new("in", 2);
                l.gamma.data = vec![1.3, 0.7];
                l.beta.data = vec![0.1, -0.2];
                quad_loss(&l.forward(xt, false))
            },
            &[0, 3, 11, 23],
            2e-2,
        );
    }

    #[test]
    fn sigmoid_and_leaky_gradcheck() {
        let x = Tensor::from_vec(1, 1, 2, 4, vec![-1.5, -0.3, 0.0, 0.2, 0.9, -2.0, 1.4, 0.6]);
        let mut sig = Sigmoid::new();
        let y = sig.forward(&x, true);
        let gx = sig.backward(&y);
        fd_check(
            &x,
            &gx,
            |xt| quad_loss(&Sigmoid::new().forward(xt, false)),
            &[0, 2, 5, 7],
            1e-2,
        );

        let mut lr = LeakyRelu::new(0.1);
        let y = lr.forward(&x, true);
        let gx = lr.backward(&y);
        fd_check(
            &x,
            &gx,
            |xt| quad_loss(&LeakyRelu::new(0.1).forward(xt, false)),
            // skip idx 2 (x == 0, kink)
            &[0, 1, 3, 5, 7],
            1e-2,
        );
    }

    #[test]
    fn upsample_round_trip_shapes_and_grad() {
        let x = Tensor::from_vec(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let up = Upsample2x;
        let y = up.forward(&x);
        assert_eq!(y.shape(), [1, 1, 4, 4]);
        assert_eq!(y.data[0], 1.0);
        assert_eq!(y.data[2], 2.0);
        assert_eq!(y.data[5], 1.0);
        assert_eq!(y.data[8], 3.0);
        let g = up.backward(&y);
        // each input pixel receives 4 copies of itself
        assert_eq!(g.data, vec![4.0, 8.0, 12.0, 16.0]);
    }

    #[test]
    fn gap_and_linear_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_vec(2, 3, 2, 2, (0..24).map(|i| (i as f32) * 0.07 - 0.8).collect());
        let mut gap = GlobalAvgPool::new();
        let mut lin = Linear::new("fc", 3, 4, &mut rng);

        let pooled = gap.forward(&x, true);
        let y = lin.forward(&pooled, true);
        let g_pooled = lin.backward(&y);
        let gx = gap.backward(&g_pooled);

        let wsnap = lin.weight.data.clone();
        fd_check(
            &x,
            &gx,
            |xt| {
                let mut gap = GlobalAvgPool::new();
                let mut lin2 = Linear::new("fc", 3, 4, &mut ChaCha8Rng::seed_from_u64(5));
                lin2.weight.data = wsnap.clone();
                let p = gap.forward(xt, false);
                quad_loss(&lin2.forward(&p, false))
            },
            &[0, 7, 13, 23],
            1e-2,
        );
    }

    #[test]
    fn resize_identity_and_gradcheck() {
        let x = Tensor::from_vec(1, 1, 4, 4, (0..16).map(|i| i as f32 * 0.05).collect());
        let mut same = BilinearResize::new(4, 4);
        assert_eq!(same.forward(&x, false).data, x.data);

        let mut rs = BilinearResize::new(3, 5);
        let y = rs.forward(&x, true);
        assert_eq!(y.shape(), [1, 1, 3, 5]);
        let gx = rs.backward(&y);
        fd_check(
            &x,
            &gx,
            |xt| quad_loss(&BilinearResize::new(3, 5).forward(xt, false)),
            &[0, 5, 10, 15],
            1e-2,
        );
    }
}
