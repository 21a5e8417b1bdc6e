//! Skip-connected encoder-decoder backbone shared by the decomposition net,
//! the discriminator, and the reshading network.

use rand_chacha::ChaCha8Rng;

use super::conv::Conv2d;
use super::layers::{InstanceNorm2d, LeakyRelu, Upsample2x};
use super::tensor::{concat_channels, split_channels, Param, Tensor};

/// conv -> instance norm -> leaky relu
pub struct ConvBlock {
    pub conv: Conv2d,
    pub norm: InstanceNorm2d,
    pub act: LeakyRelu,
}

impl ConvBlock {
    pub fn new(
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let pad = (k - 1) / 2;
        Self {
            conv: Conv2d::new(&format!("{name}.conv"), in_c, out_c, k, stride, pad, rng),
            norm: InstanceNorm2d::new(&format!("{name}.in"), out_c),
            act: LeakyRelu::new(0.1),
        }
    }

    pub fn forward(&mut self, x: &Tensor, with_grad: bool) -> Tensor {
        let y = self.conv.forward(x, with_grad);
        let y = self.norm.forward(&y, with_grad);
        self.act.forward(&y, with_grad)
    }

    pub fn backward(&mut self, gy: &Tensor) -> Tensor {
        let g = self.act.backward(gy);
        let g = self.norm.backward(&g);
        self.conv.backward(&g)
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.conv.train_params = !frozen;
        self.norm.train_params = !frozen;
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv.visit_params(f);
        self.norm.visit_params(f);
    }
}

struct EncStage {
    down: ConvBlock,
    conv: ConvBlock,
}

struct DecStage {
    up: Upsample2x,
    conv: ConvBlock,
    /// channels arriving from the upsampled path, for the backward split
    up_channels: usize,
}

/// Architecture descriptor. `widths[0]` is the stem width at full
/// resolution; `widths[i]` the width after the i-th downsampling. Inputs must
/// have spatial dimensions divisible by `2^depth()`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnetArch {
    pub in_ch: usize,
    pub widths: Vec<usize>,
}

impl UnetArch {
    pub fn new(in_ch: usize, widths: Vec<usize>) -> Self {
        assert!(widths.len() >= 2, "unet needs a stem plus at least one level");
        Self { in_ch, widths }
    }

    /// Doubling widths from `base`, capped at `cap`.
    pub fn doubling(in_ch: usize, base: usize, depth: usize, cap: usize) -> Self {
        let widths = (0..=depth).map(|i| (base << i).min(cap)).collect();
        Self::new(in_ch, widths)
    }

    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn stem_width(&self) -> usize {
        self.widths[0]
    }

    pub fn bottleneck_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn widths_csv(&self) -> String {
        self.widths
            .iter()
            .map(|w| w.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn widths_from_csv(s: &str) -> Option<Vec<usize>> {
        s.split(',').map(|t| t.trim().parse().ok()).collect()
    }
}

/// The backbone: a stem at full resolution, `depth` strided encoder stages,
/// and a mirrored decoder that concatenates the pre-downsampling activation
/// of each level. Returns features at full resolution plus the bottleneck.
pub struct UNetCore {
    pub arch: UnetArch,
    stem: ConvBlock,
    enc: Vec<EncStage>,
    dec: Vec<DecStage>,
    skip_cache: Option<Vec<Tensor>>,
}

impl UNetCore {
    pub fn new(name: &str, arch: UnetArch, rng: &mut ChaCha8Rng) -> Self {
        let depth = arch.depth();
        let stem = ConvBlock::new(&format!("{name}.stem"), arch.in_ch, arch.widths[0], 3, 1, rng);
        let mut enc = Vec::with_capacity(depth);
        for i in 0..depth {
            enc.push(EncStage {
                down: ConvBlock::new(
                    &format!("{name}.enc{i}.down"),
                    arch.widths[i],
                    arch.widths[i + 1],
                    3,
                    2,
                    rng,
                ),
                conv: ConvBlock::new(
                    &format!("{name}.enc{i}.conv"),
                    arch.widths[i + 1],
                    arch.widths[i + 1],
                    3,
                    1,
                    rng,
                ),
            });
        }
        let mut dec = Vec::with_capacity(depth);
        for i in 0..depth {
            // decoder stage i reconstructs level i from level i+1
            dec.push(DecStage {
                up: Upsample2x,
                conv: ConvBlock::new(
                    &format!("{name}.dec{i}.conv"),
                    arch.widths[i + 1] + arch.widths[i],
                    arch.widths[i],
                    3,
                    1,
                    rng,
                ),
                up_channels: arch.widths[i + 1],
            });
        }
        Self {
            arch,
            stem,
            enc,
            dec,
            skip_cache: None,
        }
    }

    /// Forward pass; `(full_res_features, bottleneck)`.
    pub fn forward(&mut self, x: &Tensor, with_grad: bool) -> (Tensor, Tensor) {
        let depth = self.arch.depth();
        assert_eq!(
            (x.h % (1 << depth), x.w % (1 << depth)),
            (0, 0),
            "unet input {}x{} not divisible by {}",
            x.h,
            x.w,
            1 << depth
        );
        let mut skips = Vec::with_capacity(depth + 1);
        let mut cur = self.stem.forward(x, with_grad);
        skips.push(cur.clone());
        for stage in self.enc.iter_mut() {
            cur = stage.down.forward(&cur, with_grad);
            cur = stage.conv.forward(&cur, with_grad);
            skips.push(cur.clone());
        }
        let bottleneck = cur.clone();
        for i in (0..depth).rev() {
            let up = self.dec[i].up.forward(&cur);
            let cat = concat_channels(&up, &skips[i]);
            cur = self.dec[i].conv.forward(&cat, with_grad);
        }
        self.skip_cache = with_grad.then_some(skips);
        (cur, bottleneck)
    }

    /// Backward pass from gradients at the full-resolution features and
    /// (optionally) at the bottleneck; returns the gradient at the input.
    pub fn backward(&mut self, g_full: &Tensor, g_bottleneck: Option<&Tensor>) -> Tensor {
        let depth = self.arch.depth();
        let _skips = self
            .skip_cache
            .take()
            .expect("unet backward without forward");
        let mut skip_grads: Vec<Option<Tensor>> = vec![None; depth + 1];

        let mut g = g_full.clone();
        for i in 0..depth {
            let g_cat = self.dec[i].conv.backward(&g);
            let (g_up, g_skip) = split_channels(&g_cat, self.dec[i].up_channels);
            skip_grads[i] = Some(g_skip);
            g = self.dec[i].up.backward(&g_up);
        }
        // g now targets the bottleneck (== skips[depth])
        if let Some(gb) = g_bottleneck {
            assert!(g.same_shape(gb));
            for (a, b) in g.data.iter_mut().zip(gb.data.iter()) {
                *a += b;
            }
        }
        for i in (0..depth).rev() {
            let mut g_enc_out = g;
            // the encoder output at level i+1 also fed the decoder concat
            // only for levels < depth handled via skip_grads[i+1]
            if let Some(extra) = skip_grads[i + 1].take() {
                for (a, b) in g_enc_out.data.iter_mut().zip(extra.data.iter()) {
                    *a += b;
                }
            }
            let g_mid = self.enc[i].conv.backward(&g_enc_out);
            g = self.enc[i].down.backward(&g_mid);
        }
        if let Some(extra) = skip_grads[0].take() {
            for (a, b) in g.data.iter_mut().zip(extra.data.iter()) {
                *a += b;
            }
        }
        self.stem.backward(&g)
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.stem.set_frozen(frozen);
        for s in self.enc.iter_mut() {
            s.down.set_frozen(frozen);
            s.conv.set_frozen(frozen);
        }
        for s in self.dec.iter_mut() {
            s.conv.set_frozen(frozen);
        }
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.stem.visit_params(f);
        for s in self.enc.iter_mut() {
            s.down.visit_params(f);
            s.conv.visit_params(f);
        }
        for s in self.dec.iter_mut() {
            s.conv.visit_params(f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn unet_shapes_and_determinism() {
        let arch = UnetArch::doubling(3, 4, 2, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut net = UNetCore::new("u", arch.clone(), &mut rng);
        let x = Tensor::from_vec(2, 3, 8, 8, (0..2 * 3 * 64).map(|i| (i % 11) as f32 * 0.09).collect());
        let (full, bot) = net.forward(&x, false);
        assert_eq!(full.shape(), [2, 4, 8, 8]);
        assert_eq!(bot.shape(), [2, 16, 2, 2]);

        let mut rng2 = ChaCha8Rng::seed_from_u64(9);
        let mut net2 = UNetCore::new("u", arch, &mut rng2);
        let (full2, _) = net2.forward(&x, false);
        assert_eq!(full.data, full2.data);
    }

    #[test]
    fn unet_gradcheck_through_skips() {
        let arch = UnetArch::doubling(2, 3, 2, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut net = UNetCore::new("u", arch, &mut rng);
        let x = Tensor::from_vec(
            1,
            2,
            4,
            4,
            (0..32).map(|i| ((i * 17 % 23) as f32) * 0.08 - 0.7).collect(),
        );
        let (full, _) = net.forward(&x, true);
        let gx = net.backward(&full, None);

        // loss = 0.5 * sum(full^2); finite differences on a few inputs
        let h = 1e-2f32;
        for &idx in &[0usize, 9, 21, 31] {
            let mut xp = x.clone();
            xp.data[idx] += h;
            let mut xm = x.clone();
            xm.data[idx] -= h;
            let lp: f64 = {
                let (y, _) = net.forward(&xp, false);
                y.data.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() * 0.5
            };
            let lm: f64 = {
                let (y, _) = net.forward(&xm, false);
                y.data.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() * 0.5
            };
            let fd = ((lp - lm) / (2.0 * h as f64)) as f32;
            let an = gx.data[idx];
            assert!(
                (fd - an).abs() < 2e-2 * (1.0 + fd.abs()),
                "unet grad: fd {fd} vs analytic {an} at {idx}"
            );
        }
    }
}
