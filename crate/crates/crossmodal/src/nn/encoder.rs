//! Per-modality image encoders.
//!
//! Each encoder is a small U-Net: a full-resolution stem, two stride-2
//! downsampling blocks, two upsampling blocks with skip connections, and a
//! 1x1 projection head that emits `depth * channels` values per pixel, which
//! are then folded into an `(H, W, D, C)` frustum-aligned feature volume.
//! The projection head starts at zero so freshly added modalities begin with
//! an empty (all-zero) volume instead of noise.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::init::he_normal;
use crate::nn::params::{ParamLease, ParamSet};
use crate::nn::tape::{Tape, Value};
use crate::nn::Tensor;

/// One conv layer's tensors.
#[derive(Debug, Clone, PartialEq)]
struct Conv {
    w: Tensor,
    b: Tensor,
}

impl Conv {
    fn init(cout: usize, k: usize, cin: usize, rng: &mut ChaCha8Rng) -> Conv {
        Conv {
            w: he_normal(&[cout, k, k, cin], k * k * cin, rng),
            b: Tensor::zeros(&[cout]),
        }
    }

    fn zeros(cout: usize, k: usize, cin: usize) -> Conv {
        Conv {
            w: Tensor::zeros(&[cout, k, k, cin]),
            b: Tensor::zeros(&[cout]),
        }
    }
}

/// Encoder parameters. Input images are `(H, W, 3)` in `[-1, 1]`; output
/// volumes are `(H, W, depth, channels)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub(crate) depth: usize,
    pub(crate) channels: usize,
    stem: Conv,
    down1a: Conv,
    down1b: Conv,
    down2a: Conv,
    down2b: Conv,
    up1: Conv,
    up2: Conv,
    head: Conv,
}

pub(crate) struct EncoderVals {
    vals: Vec<Value>,
    depth: usize,
    channels: usize,
}

impl Encoder {
    /// Random initialization with widths `(w0, w1, w2)` at full, 1/2, and
    /// 1/4 resolution. The head is zero-initialized.
    pub fn init(
        widths: (usize, usize, usize),
        depth: usize,
        channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Encoder {
        let (w0, w1, w2) = widths;
        Encoder {
            depth,
            channels,
            stem: Conv::init(w0, 3, 3, rng),
            down1a: Conv::init(w1, 3, w0, rng),
            down1b: Conv::init(w1, 3, w1, rng),
            down2a: Conv::init(w2, 3, w1, rng),
            down2b: Conv::init(w2, 3, w2, rng),
            up1: Conv::init(w1, 3, w2 + w1, rng),
            up2: Conv::init(w0, 3, w1 + w0, rng),
            head: Conv::zeros(depth * channels, 1, w0),
        }
    }

    pub(crate) fn lease(
        &self,
        tape: &mut Tape,
        prefix: &str,
        lease: &mut ParamLease,
    ) -> EncoderVals {
        let mut vals = Vec::with_capacity(16);
        self.visit(prefix, &mut |name, t| {
            vals.push(lease.leaf(tape, name.to_string(), t));
        });
        EncoderVals {
            vals,
            depth: self.depth,
            channels: self.channels,
        }
    }
}

impl EncoderVals {
    /// Lift an `(H, W, 3)` image to an `(H, W, depth, channels)` volume.
    /// `H` and `W` must be divisible by 4.
    pub(crate) fn forward(&self, tape: &mut Tape, image: Value) -> Result<Value> {
        let shape = tape.value(image).shape().to_vec();
        if shape.len() != 3 || shape[2] != 3 || shape[0] % 4 != 0 || shape[1] % 4 != 0 {
            return Err(Error::InvalidArgument(format!(
                "encoder expects (4k, 4k, 3) image, got {shape:?}"
            )));
        }
        let (h, w) = (shape[0], shape[1]);
        // Lease order matches visit order: stem, down1a/b, down2a/b, up1, up2, head.
        let p = |i: usize| (self.vals[2 * i], self.vals[2 * i + 1]);
        let conv = |tape: &mut Tape, x, i: usize, stride| -> Result<Value> {
            let (wv, bv) = p(i);
            tape.conv2d(x, wv, bv, stride)
        };

        let s0 = conv(tape, image, 0, 1)?;
        let s0 = tape.silu(s0)?;
        let d1 = conv(tape, s0, 1, 2)?;
        let d1 = tape.silu(d1)?;
        let d1 = conv(tape, d1, 2, 1)?;
        let d1 = tape.silu(d1)?;
        let d2 = conv(tape, d1, 3, 2)?;
        let d2 = tape.silu(d2)?;
        let d2 = conv(tape, d2, 4, 1)?;
        let d2 = tape.silu(d2)?;

        let u1 = tape.upsample2x(d2)?;
        let u1 = tape.concat_last_dim(u1, d1)?;
        let u1 = conv(tape, u1, 5, 1)?;
        let u1 = tape.silu(u1)?;
        let u2 = tape.upsample2x(u1)?;
        let u2 = tape.concat_last_dim(u2, s0)?;
        let u2 = conv(tape, u2, 6, 1)?;
        let u2 = tape.silu(u2)?;

        let out = conv(tape, u2, 7, 1)?;
        tape.reshape(out, &[h, w, self.depth, self.channels])
    }
}

impl ParamSet for Encoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (name, c) in [
            ("stem", &self.stem),
            ("down1a", &self.down1a),
            ("down1b", &self.down1b),
            ("down2a", &self.down2a),
            ("down2b", &self.down2b),
            ("up1", &self.up1),
            ("up2", &self.up2),
            ("head", &self.head),
        ] {
            f(&format!("{prefix}{name}_w"), &c.w);
            f(&format!("{prefix}{name}_b"), &c.b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (name, c) in [
            ("stem", &mut self.stem),
            ("down1a", &mut self.down1a),
            ("down1b", &mut self.down1b),
            ("down2a", &mut self.down2a),
            ("down2b", &mut self.down2b),
            ("up1", &mut self.up1),
            ("up2", &mut self.up2),
            ("head", &mut self.head),
        ] {
            f(&format!("{prefix}{name}_w"), &mut c.w);
            f(&format!("{prefix}{name}_b"), &mut c.b);
        }
    }
}
