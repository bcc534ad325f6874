//! Per-modality conditional denoisers.
//!
//! Each denoiser predicts the noise added to a target image, conditioned on
//! the feature image rendered at the target pose (concatenated channelwise)
//! and on a sinusoidal embedding of the noise level (added per block after a
//! learned projection). The network is a two-level U-Net; the output conv
//! starts at zero so an untrained model predicts zero noise and the expected
//! initial loss is the variance of the noise itself, i.e. close to 1.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::init::he_normal;
use crate::nn::params::{ParamLease, ParamSet};
use crate::nn::tape::{Tape, Value};
use crate::nn::Tensor;

#[derive(Debug, Clone, PartialEq)]
struct Block {
    conv_w: Tensor,
    conv_b: Tensor,
    temb_w: Tensor,
    temb_b: Tensor,
}

impl Block {
    fn init(cout: usize, cin: usize, temb_dim: usize, rng: &mut ChaCha8Rng) -> Block {
        Block {
            conv_w: he_normal(&[cout, 3, 3, cin], 9 * cin, rng),
            conv_b: Tensor::zeros(&[cout]),
            temb_w: he_normal(&[temb_dim, cout], temb_dim, rng),
            temb_b: Tensor::zeros(&[cout]),
        }
    }
}

/// Denoiser parameters for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub(crate) base: usize,
    pub(crate) temb_dim: usize,
    pub(crate) cond_channels: usize,
    temb_w: Tensor,
    temb_b: Tensor,
    c1: Block,
    c2: Block,
    d1: Block,
    d2: Block,
    u0: Block,
    u1: Block,
    out_w: Tensor,
    out_b: Tensor,
}

pub(crate) struct DenoiserVals {
    vals: Vec<Value>,
    temb_dim: usize,
    cond_channels: usize,
}

impl Denoiser {
    /// Random initialization; `base` channels at full resolution, `2 * base`
    /// at half resolution. The output conv is zero-initialized.
    pub fn init(
        base: usize,
        temb_dim: usize,
        cond_channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Denoiser {
        Denoiser {
            base,
            temb_dim,
            cond_channels,
            temb_w: he_normal(&[temb_dim, temb_dim], temb_dim, rng),
            temb_b: Tensor::zeros(&[temb_dim]),
            c1: Block::init(base, 3 + cond_channels, temb_dim, rng),
            c2: Block::init(base, base, temb_dim, rng),
            d1: Block::init(2 * base, base, temb_dim, rng),
            d2: Block::init(2 * base, 2 * base, temb_dim, rng),
            u0: Block::init(base, 2 * base, temb_dim, rng),
            u1: Block::init(base, 2 * base, temb_dim, rng),
            out_w: Tensor::zeros(&[3, 1, 1, base]),
            out_b: Tensor::zeros(&[3]),
        }
    }

    pub(crate) fn lease(
        &self,
        tape: &mut Tape,
        prefix: &str,
        lease: &mut ParamLease,
    ) -> DenoiserVals {
        let mut vals = Vec::with_capacity(28);
        self.visit(prefix, &mut |name, t| {
            vals.push(lease.leaf(tape, name.to_string(), t));
        });
        DenoiserVals {
            vals,
            temb_dim: self.temb_dim,
            cond_channels: self.cond_channels,
        }
    }
}

impl DenoiserVals {
    /// Predict the noise in `noisy` `(H, W, 3)` given the conditioning
    /// feature image `(H, W, C)` and the `(1, E)` noise-level embedding.
    pub(crate) fn forward(
        &self,
        tape: &mut Tape,
        noisy: Value,
        feat: Value,
        temb: Value,
    ) -> Result<Value> {
        let ns = tape.value(noisy).shape().to_vec();
        let fs = tape.value(feat).shape().to_vec();
        if ns.len() != 3 || ns[2] != 3 || ns[0] % 2 != 0 || ns[1] % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "denoiser expects (2k, 2k, 3) target, got {ns:?}"
            )));
        }
        if fs != [ns[0], ns[1], self.cond_channels] {
            return Err(Error::InvalidArgument(format!(
                "conditioning shape {fs:?} does not match target {ns:?} with {} channels",
                self.cond_channels
            )));
        }
        if tape.value(temb).shape() != [1, self.temb_dim] {
            return Err(Error::InvalidArgument(format!(
                "noise-level embedding must be (1, {})",
                self.temb_dim
            )));
        }

        // Lease order: temb_w, temb_b, then 4 tensors per block in
        // c1, c2, d1, d2, u0, u1 order, then out_w, out_b.
        let temb_h = tape.matmul(temb, self.vals[0])?;
        let temb_dim_bias = self.vals[1];
        let temb_h = {
            let b = tape.reshape(temb_dim_bias, &[self.temb_dim])?;
            let h = tape.add_last_dim_bias(temb_h, b)?;
            tape.silu(h)?
        };

        let block = |tape: &mut Tape, x: Value, bi: usize, stride: usize| -> Result<Value> {
            let base = 2 + 4 * bi;
            let (cw, cb, tw, tb) = (
                self.vals[base],
                self.vals[base + 1],
                self.vals[base + 2],
                self.vals[base + 3],
            );
            let h = tape.conv2d(x, cw, cb, stride)?;
            let cout = tape.value(h).shape()[2];
            let proj = tape.matmul(temb_h, tw)?;
            let tb_flat = tape.reshape(tb, &[cout])?;
            let proj = tape.add_last_dim_bias(proj, tb_flat)?;
            let proj = tape.reshape(proj, &[cout])?;
            let h = tape.add_last_dim_bias(h, proj)?;
            tape.silu(h)
        };

        let x = tape.concat_last_dim(noisy, feat)?;
        let h1 = block(tape, x, 0, 1)?;
        let h2 = block(tape, h1, 1, 1)?;
        let lo = block(tape, h2, 2, 2)?;
        let lo = block(tape, lo, 3, 1)?;
        let lo = block(tape, lo, 4, 1)?;
        let up = tape.upsample2x(lo)?;
        let up = tape.concat_last_dim(up, h2)?;
        let hu = block(tape, up, 5, 1)?;
        let (ow, ob) = (self.vals[26], self.vals[27]);
        tape.conv2d(hu, ow, ob, 1)
    }
}

impl ParamSet for Denoiser {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}temb_w"), &self.temb_w);
        f(&format!("{prefix}temb_b"), &self.temb_b);
        for (name, b) in [
            ("c1", &self.c1),
            ("c2", &self.c2),
            ("d1", &self.d1),
            ("d2", &self.d2),
            ("u0", &self.u0),
            ("u1", &self.u1),
        ] {
            f(&format!("{prefix}{name}_w"), &b.conv_w);
            f(&format!("{prefix}{name}_b"), &b.conv_b);
            f(&format!("{prefix}{name}_tw"), &b.temb_w);
            f(&format!("{prefix}{name}_tb"), &b.temb_b);
        }
        f(&format!("{prefix}out_w"), &self.out_w);
        f(&format!("{prefix}out_b"), &self.out_b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}temb_w"), &mut self.temb_w);
        f(&format!("{prefix}temb_b"), &mut self.temb_b);
        for (name, b) in [
            ("c1", &mut self.c1),
            ("c2", &mut self.c2),
            ("d1", &mut self.d1),
            ("d2", &mut self.d2),
            ("u0", &mut self.u0),
            ("u1", &mut self.u1),
        ] {
            f(&format!("{prefix}{name}_w"), &mut b.conv_w);
            f(&format!("{prefix}{name}_b"), &mut b.conv_b);
            f(&format!("{prefix}{name}_tw"), &mut b.temb_w);
            f(&format!("{prefix}{name}_tb"), &mut b.temb_b);
        }
        f(&format!("{prefix}out_w"), &mut self.out_w);
        f(&format!("{prefix}out_b"), &mut self.out_b);
    }
}
