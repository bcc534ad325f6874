//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Each operation runs its forward pass eagerly, records a node, and returns
//! a [`Value`] handle to the stored result. [`Tape::backward`] walks the
//! nodes once in reverse order and accumulates exact analytic gradients,
//! including for the rendering-specific ops (frustum volume pooling,
//! transmittance weighting, range-angle splatting) whose adjoints are
//! derived by hand.
//!
//! Geometry never lives on the tape: pooling and splatting take precomputed
//! plans whose ray/cell assignments depend only on poses and configuration,
//! so every recorded computation is smooth in the differentiated inputs and
//! finite-difference checks converge at the expected rate.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::nn::kernels as k;
use crate::nn::Tensor;

/// Handle to a tape node. Values are only meaningful for the tape that
/// produced them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(pub(crate) usize);

/// Interpolation taps of one query point into one volume: eight
/// `(cell_offset, weight)` pairs, where `cell_offset` indexes the first
/// channel of a grid cell. `None` means the point is outside that frustum.
pub(crate) type PointTaps = Option<[(usize, f64); 8]>;

/// Precomputed trilinear gather of a set of 3D points from a set of feature
/// volumes, averaged per point over the volumes that contain it.
pub(crate) struct PoolPlan {
    pub n_points: usize,
    pub channels: usize,
    /// Shape every pooled volume must have.
    pub vol_shape: [usize; 4],
    /// `taps[vol][point]`.
    pub taps: Vec<Vec<PointTaps>>,
    /// Number of volumes containing each point.
    pub hits: Vec<u32>,
}

/// Precomputed scatter of per-sample contributions onto an output image.
/// Each contribution row lands on up to four pixels; missing taps fall
/// outside the image extent and their mass is dropped.
pub(crate) struct SplatPlan {
    pub out_h: usize,
    pub out_w: usize,
    /// `taps[row]`: `(pixel_index, weight)` pairs.
    pub taps: Vec<[(Option<usize>, f64); 4]>,
}

enum Op {
    Leaf,
    Add(Value, Value),
    Sub(Value, Value),
    Mul(Value, Value),
    Scale(Value, f64),
    Silu(Value),
    Softplus(Value),
    MatMul(Value, Value),
    AddLastDimBias(Value, Value),
    Conv2d {
        x: Value,
        w: Value,
        b: Value,
        stride: usize,
    },
    Upsample2x(Value),
    ConcatLastDim(Value, Value),
    NarrowLastDim {
        x: Value,
        start: usize,
        len: usize,
    },
    Reshape(Value),
    MeanAll(Value),
    PoolVolumes {
        vols: Vec<Value>,
        plan: Rc<PoolPlan>,
    },
    TransmittanceWeights {
        sigma: Value,
        deltas: Rc<Vec<f64>>,
        with_transmittance: bool,
    },
    WeightedSumSamples {
        weights: Value,
        values: Value,
    },
    ScaleRows {
        x: Value,
        s: Value,
    },
    Splat {
        contrib: Value,
        plan: Rc<SplatPlan>,
    },
    NearestResample {
        x: Value,
        map: Rc<Vec<usize>>,
    },
}

struct Node {
    op: Op,
    out: Tensor,
}

/// Gradients produced by one backward pass, indexed by [`Value`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. this value, if the value influenced it.
    pub fn get(&self, v: Value) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// A linear autodiff tape. One tape records one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    /// Record an input value (parameter or constant).
    pub fn leaf(&mut self, t: Tensor) -> Value {
        self.push(Op::Leaf, t)
    }

    /// The tensor held by a value.
    pub fn value(&self, v: Value) -> &Tensor {
        &self.nodes[v.0].out
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, out: Tensor) -> Value {
        self.nodes.push(Node { op, out });
        Value(self.nodes.len() - 1)
    }

    fn check(&self, v: Value) -> Result<&Tensor> {
        self.nodes
            .get(v.0)
            .map(|n| &n.out)
            .ok_or_else(|| Error::InvalidArgument(format!("value {} not on this tape", v.0)))
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        let out = self.zip_same_shape(a, b, "add", |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        let out = self.zip_same_shape(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), out))
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        let out = self.zip_same_shape(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), out))
    }

    fn zip_same_shape(
        &self,
        a: Value,
        b: Value,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        if ta.shape() != tb.shape() {
            return Err(Error::InvalidArgument(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::from_vec(ta.shape(), data)
    }

    pub fn scale(&mut self, a: Value, factor: f64) -> Result<Value> {
        let ta = self.check(a)?;
        let data = ta.data().iter().map(|v| v * factor).collect();
        let out = Tensor::from_vec(ta.shape(), data)?;
        Ok(self.push(Op::Scale(a, factor), out))
    }

    pub fn silu(&mut self, a: Value) -> Result<Value> {
        let ta = self.check(a)?;
        let data = ta.data().iter().map(|v| k::silu(*v)).collect();
        let out = Tensor::from_vec(ta.shape(), data)?;
        Ok(self.push(Op::Silu(a), out))
    }

    pub fn softplus(&mut self, a: Value) -> Result<Value> {
        let ta = self.check(a)?;
        let data = ta.data().iter().map(|v| k::softplus(*v)).collect();
        let out = Tensor::from_vec(ta.shape(), data)?;
        Ok(self.push(Op::Softplus(a), out))
    }

    /// Row-major matrix product of rank-2 tensors `(m, k) x (k, n)`.
    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::InvalidArgument(format!(
                "matmul: incompatible shapes {sa:?} x {sb:?}"
            )));
        }
        let (m, kk, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        k::matmul_fwd(ta.data(), m, kk, tb.data(), n, &mut out);
        let out = Tensor::from_vec(&[m, n], out)?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    /// Broadcast-add a rank-1 bias over the last dimension of `x`.
    pub fn add_last_dim_bias(&mut self, x: Value, b: Value) -> Result<Value> {
        let (tx, tb) = (self.check(x)?, self.check(b)?);
        let c = *tx.shape().last().ok_or_else(|| {
            Error::InvalidArgument("add_last_dim_bias: rank-0 input".into())
        })?;
        if tb.shape() != [c] {
            return Err(Error::InvalidArgument(format!(
                "add_last_dim_bias: bias shape {:?} does not match last dim {c}",
                tb.shape()
            )));
        }
        let mut data = tx.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += tb.data()[i % c];
        }
        let out = Tensor::from_vec(tx.shape(), data)?;
        Ok(self.push(Op::AddLastDimBias(x, b), out))
    }

    /// 2D convolution of an `(H, W, Cin)` image with `(Cout, K, K, Cin)`
    /// weights and a `(Cout,)` bias; padding `K / 2`, stride 1 or 2.
    pub fn conv2d(&mut self, x: Value, w: Value, b: Value, stride: usize) -> Result<Value> {
        let (tx, tw, tb) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let (sx, sw) = (tx.shape(), tw.shape());
        if sx.len() != 3 || sw.len() != 4 {
            return Err(Error::InvalidArgument(format!(
                "conv2d: need (H,W,Cin) x (Cout,K,K,Cin), got {sx:?} x {sw:?}"
            )));
        }
        let (h, w_in, cin) = (sx[0], sx[1], sx[2]);
        let (cout, kh, kw) = (sw[0], sw[1], sw[2]);
        if sw[3] != cin || kh != kw || !(kh == 1 || kh == 3) {
            return Err(Error::InvalidArgument(format!(
                "conv2d: weight shape {sw:?} incompatible with input {sx:?}"
            )));
        }
        if tb.shape() != [cout] {
            return Err(Error::InvalidArgument("conv2d: bad bias shape".into()));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::InvalidArgument("conv2d: stride must be 1 or 2".into()));
        }
        let (oh, ow) = (k::conv_out_size(h, kh, stride), k::conv_out_size(w_in, kw, stride));
        let mut out = vec![0.0; oh * ow * cout];
        k::conv2d_fwd(
            tx.data(),
            h,
            w_in,
            cin,
            tw.data(),
            cout,
            kh,
            kw,
            stride,
            tb.data(),
            &mut out,
        );
        let out = Tensor::from_vec(&[oh, ow, cout], out)?;
        Ok(self.push(Op::Conv2d { x, w, b, stride }, out))
    }

    /// Nearest-neighbor 2x spatial upsample of an `(H, W, C)` image.
    pub fn upsample2x(&mut self, x: Value) -> Result<Value> {
        let tx = self.check(x)?;
        let s = tx.shape();
        if s.len() != 3 {
            return Err(Error::InvalidArgument("upsample2x: need (H,W,C)".into()));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let mut out = vec![0.0; 4 * h * w * c];
        k::upsample2x_fwd(tx.data(), h, w, c, &mut out);
        let out = Tensor::from_vec(&[2 * h, 2 * w, c], out)?;
        Ok(self.push(Op::Upsample2x(x), out))
    }

    /// Concatenate along the last dimension; leading dimensions must match.
    pub fn concat_last_dim(&mut self, a: Value, b: Value) -> Result<Value> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != sb.len()
            || sa.is_empty()
            || sa[..sa.len() - 1] != sb[..sb.len() - 1]
        {
            return Err(Error::InvalidArgument(format!(
                "concat_last_dim: incompatible shapes {sa:?} and {sb:?}"
            )));
        }
        let (ca, cb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let rows = ta.numel() / ca;
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(&ta.data()[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&tb.data()[r * cb..(r + 1) * cb]);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.push(Op::ConcatLastDim(a, b), out))
    }

    /// Slice `[start, start + len)` of the last dimension.
    pub fn narrow_last_dim(&mut self, x: Value, start: usize, len: usize) -> Result<Value> {
        let tx = self.check(x)?;
        let s = tx.shape();
        let c = *s.last().ok_or_else(|| {
            Error::InvalidArgument("narrow_last_dim: rank-0 input".into())
        })?;
        if start + len > c || len == 0 {
            return Err(Error::InvalidArgument(format!(
                "narrow_last_dim: [{start}, {}) out of last dim {c}",
                start + len
            )));
        }
        let rows = tx.numel() / c;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&tx.data()[r * c + start..r * c + start + len]);
        }
        let mut shape = s.to_vec();
        *shape.last_mut().unwrap() = len;
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.push(Op::NarrowLastDim { x, start, len }, out))
    }

    /// Reinterpret under a new shape with the same element count.
    pub fn reshape(&mut self, x: Value, shape: &[usize]) -> Result<Value> {
        let out = self.check(x)?.reshaped(shape)?;
        Ok(self.push(Op::Reshape(x), out))
    }

    /// Mean over all elements, producing a scalar.
    pub fn mean_all(&mut self, x: Value) -> Result<Value> {
        let tx = self.check(x)?;
        if tx.numel() == 0 {
            return Err(Error::InvalidArgument("mean_all: empty tensor".into()));
        }
        let mean = fixed_order_sum(tx.data()) / tx.numel() as f64;
        Ok(self.push(Op::MeanAll(x), Tensor::scalar(mean)))
    }

    /// Mean squared error between two same-shape values, as a scalar.
    pub fn mse(&mut self, a: Value, b: Value) -> Result<Value> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean_all(sq)
    }

    /// Gather-and-average a set of points from a set of feature volumes
    /// according to a precomputed plan. Output is `(n_points, C)`; points
    /// inside no volume come out zero.
    pub(crate) fn pool_volumes(&mut self, vols: &[Value], plan: Rc<PoolPlan>) -> Result<Value> {
        if vols.is_empty() || vols.len() != plan.taps.len() {
            return Err(Error::InvalidArgument(format!(
                "pool_volumes: {} volumes but plan covers {}",
                vols.len(),
                plan.taps.len()
            )));
        }
        for &v in vols {
            let t = self.check(v)?;
            if t.shape() != plan.vol_shape {
                return Err(Error::InvalidArgument(format!(
                    "pool_volumes: volume shape {:?} does not match plan {:?}",
                    t.shape(),
                    plan.vol_shape
                )));
            }
        }
        let (p, c) = (plan.n_points, plan.channels);
        let mut out = vec![0.0; p * c];
        for (vi, &v) in vols.iter().enumerate() {
            let grid = self.nodes[v.0].out.data();
            for (pi, taps) in plan.taps[vi].iter().enumerate() {
                if let Some(taps) = taps {
                    let row = &mut out[pi * c..(pi + 1) * c];
                    for &(base, w) in taps {
                        k::axpy(w, &grid[base..base + c], row);
                    }
                }
            }
        }
        for pi in 0..p {
            if plan.hits[pi] > 1 {
                let inv = 1.0 / plan.hits[pi] as f64;
                for v in &mut out[pi * c..(pi + 1) * c] {
                    *v *= inv;
                }
            }
        }
        let out = Tensor::from_vec(&[p, c], out)?;
        Ok(self.push(
            Op::PoolVolumes {
                vols: vols.to_vec(),
                plan,
            },
            out,
        ))
    }

    /// Per-sample compositing weights from densities `(R, N)` and fixed
    /// per-sample segment lengths. See `kernels::transmittance_weights_fwd`.
    pub(crate) fn transmittance_weights(
        &mut self,
        sigma: Value,
        deltas: Rc<Vec<f64>>,
        with_transmittance: bool,
    ) -> Result<Value> {
        let ts = self.check(sigma)?;
        let s = ts.shape();
        if s.len() != 2 || deltas.len() != ts.numel() {
            return Err(Error::InvalidArgument(format!(
                "transmittance_weights: sigma shape {s:?} with {} deltas",
                deltas.len()
            )));
        }
        let (r, n) = (s[0], s[1]);
        let mut out = vec![0.0; r * n];
        k::transmittance_weights_fwd(ts.data(), &deltas, r, n, with_transmittance, &mut out);
        let out = Tensor::from_vec(&[r, n], out)?;
        Ok(self.push(
            Op::TransmittanceWeights {
                sigma,
                deltas,
                with_transmittance,
            },
            out,
        ))
    }

    /// Weighted sum of per-sample values along each ray:
    /// `(R, N) x (R, N, C) -> (R, C)`.
    pub fn weighted_sum_samples(&mut self, weights: Value, values: Value) -> Result<Value> {
        let (tw, tv) = (self.check(weights)?, self.check(values)?);
        let (sw, sv) = (tw.shape(), tv.shape());
        if sw.len() != 2 || sv.len() != 3 || sw[0] != sv[0] || sw[1] != sv[1] {
            return Err(Error::InvalidArgument(format!(
                "weighted_sum_samples: {sw:?} with {sv:?}"
            )));
        }
        let (r, n, c) = (sv[0], sv[1], sv[2]);
        let mut out = vec![0.0; r * c];
        for ray in 0..r {
            let row = &mut out[ray * c..(ray + 1) * c];
            for i in 0..n {
                let w = tw.data()[ray * n + i];
                let vals = &tv.data()[(ray * n + i) * c..(ray * n + i + 1) * c];
                k::axpy(w, vals, row);
            }
        }
        let out = Tensor::from_vec(&[r, c], out)?;
        Ok(self.push(Op::WeightedSumSamples { weights, values }, out))
    }

    /// Scale each row of `(R, C)` by the matching entry of `(R,)`.
    pub fn scale_rows(&mut self, x: Value, s: Value) -> Result<Value> {
        let (tx, ts) = (self.check(x)?, self.check(s)?);
        let (sx, ss) = (tx.shape(), ts.shape());
        if sx.len() != 2 || ss != [sx[0]] {
            return Err(Error::InvalidArgument(format!(
                "scale_rows: {sx:?} rows scaled by {ss:?}"
            )));
        }
        let (r, c) = (sx[0], sx[1]);
        let mut data = tx.data().to_vec();
        for row in 0..r {
            let f = ts.data()[row];
            for v in &mut data[row * c..(row + 1) * c] {
                *v *= f;
            }
        }
        let out = Tensor::from_vec(sx, data)?;
        Ok(self.push(Op::ScaleRows { x, s }, out))
    }

    /// Scatter `(P, C)` contributions onto an image via a precomputed
    /// bilinear plan. Output is `(out_h, out_w, C)`.
    pub(crate) fn splat(&mut self, contrib: Value, plan: Rc<SplatPlan>) -> Result<Value> {
        let tc = self.check(contrib)?;
        let s = tc.shape();
        if s.len() != 2 || s[0] != plan.taps.len() {
            return Err(Error::InvalidArgument(format!(
                "splat: contributions {s:?} vs plan with {} rows",
                plan.taps.len()
            )));
        }
        let c = s[1];
        let mut out = vec![0.0; plan.out_h * plan.out_w * c];
        splat_fwd(tc.data(), c, &plan, &mut out);
        let out = Tensor::from_vec(&[plan.out_h, plan.out_w, c], out)?;
        Ok(self.push(Op::Splat { contrib, plan }, out))
    }

    /// Resample an `(h, w, C)` image to `(out_h, out_w, C)` through a
    /// precomputed nearest-neighbor source map.
    pub(crate) fn nearest_resample(
        &mut self,
        x: Value,
        map: Rc<Vec<usize>>,
        out_h: usize,
        out_w: usize,
    ) -> Result<Value> {
        let tx = self.check(x)?;
        let s = tx.shape();
        if s.len() != 3 || map.len() != out_h * out_w {
            return Err(Error::InvalidArgument(format!(
                "nearest_resample: input {s:?}, map {} entries for {out_h}x{out_w}",
                map.len()
            )));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        if map.iter().any(|&src| src >= h * w) {
            return Err(Error::InvalidArgument(
                "nearest_resample: map entry out of source bounds".into(),
            ));
        }
        let mut out = vec![0.0; out_h * out_w * c];
        for (o, &src) in map.iter().enumerate() {
            out[o * c..(o + 1) * c].copy_from_slice(&tx.data()[src * c..(src + 1) * c]);
        }
        let out = Tensor::from_vec(&[out_h, out_w, c], out)?;
        Ok(self.push(Op::NearestResample { x, map }, out))
    }

    /// Reverse pass from a scalar loss. Returns per-value gradients; values
    /// that do not influence the loss have no gradient.
    pub fn backward(&mut self, loss: Value) -> Result<Gradients> {
        let lt = self.check(loss)?;
        if lt.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward: loss must be scalar, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            // Detach this node's gradient while distributing it to parents
            // (add_into needs the mutable slice), then put it back so the
            // caller can read gradients of intermediates and leaves alike.
            let Some(g) = grads[i].take() else {
                continue;
            };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    add_into(&mut grads, *a, &g, self.numel(*a));
                    add_into(&mut grads, *b, &g, self.numel(*b));
                }
                Op::Sub(a, b) => {
                    add_into(&mut grads, *a, &g, self.numel(*a));
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    add_into(&mut grads, *b, &neg, self.numel(*b));
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.nodes[a.0].out.data(), self.nodes[b.0].out.data());
                    let da: Vec<f64> = g.iter().zip(tb).map(|(gi, bi)| gi * bi).collect();
                    let db: Vec<f64> = g.iter().zip(ta).map(|(gi, ai)| gi * ai).collect();
                    add_into(&mut grads, *a, &da, da.len());
                    add_into(&mut grads, *b, &db, db.len());
                }
                Op::Scale(a, factor) => {
                    let da: Vec<f64> = g.iter().map(|v| v * factor).collect();
                    add_into(&mut grads, *a, &da, da.len());
                }
                Op::Silu(a) => {
                    let xin = self.nodes[a.0].out.data();
                    let da: Vec<f64> = g
                        .iter()
                        .zip(xin)
                        .map(|(gi, xi)| gi * k::silu_grad(*xi))
                        .collect();
                    add_into(&mut grads, *a, &da, da.len());
                }
                Op::Softplus(a) => {
                    let xin = self.nodes[a.0].out.data();
                    let da: Vec<f64> = g
                        .iter()
                        .zip(xin)
                        .map(|(gi, xi)| gi * k::sigmoid(*xi))
                        .collect();
                    add_into(&mut grads, *a, &da, da.len());
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&self.nodes[a.0].out, &self.nodes[b.0].out);
                    let (m, kk, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    let mut da = vec![0.0; m * kk];
                    let mut db = vec![0.0; kk * n];
                    k::matmul_bwd(ta.data(), m, kk, tb.data(), n, &g, &mut da, &mut db);
                    add_into(&mut grads, *a, &da, da.len());
                    add_into(&mut grads, *b, &db, db.len());
                }
                Op::AddLastDimBias(x, b) => {
                    let c = *self.nodes[b.0].out.shape().last().unwrap();
                    let mut db = vec![0.0; c];
                    for (i, gi) in g.iter().enumerate() {
                        db[i % c] += gi;
                    }
                    add_into(&mut grads, *x, &g, g.len());
                    add_into(&mut grads, *b, &db, c);
                }
                Op::Conv2d { x, w, b, stride } => {
                    let (tx, tw) = (&self.nodes[x.0].out, &self.nodes[w.0].out);
                    let (h, w_in, cin) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                    let (cout, kh, kw) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
                    let mut dx = vec![0.0; tx.numel()];
                    let mut dw = vec![0.0; tw.numel()];
                    let mut db = vec![0.0; cout];
                    k::conv2d_bwd(
                        tx.data(),
                        h,
                        w_in,
                        cin,
                        tw.data(),
                        cout,
                        kh,
                        kw,
                        *stride,
                        &g,
                        &mut dx,
                        &mut dw,
                        &mut db,
                    );
                    add_into(&mut grads, *x, &dx, dx.len());
                    add_into(&mut grads, *w, &dw, dw.len());
                    add_into(&mut grads, *b, &db, db.len());
                }
                Op::Upsample2x(x) => {
                    let tx = &self.nodes[x.0].out;
                    let (h, w, c) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                    let mut dx = vec![0.0; tx.numel()];
                    k::upsample2x_bwd(&g, h, w, c, &mut dx);
                    add_into(&mut grads, *x, &dx, dx.len());
                }
                Op::ConcatLastDim(a, b) => {
                    let (ta, tb) = (&self.nodes[a.0].out, &self.nodes[b.0].out);
                    let ca = *ta.shape().last().unwrap();
                    let cb = *tb.shape().last().unwrap();
                    let rows = ta.numel() / ca;
                    let mut da = vec![0.0; ta.numel()];
                    let mut db = vec![0.0; tb.numel()];
                    for r in 0..rows {
                        let grow = &g[r * (ca + cb)..(r + 1) * (ca + cb)];
                        da[r * ca..(r + 1) * ca].copy_from_slice(&grow[..ca]);
                        db[r * cb..(r + 1) * cb].copy_from_slice(&grow[ca..]);
                    }
                    add_into(&mut grads, *a, &da, da.len());
                    add_into(&mut grads, *b, &db, db.len());
                }
                Op::NarrowLastDim { x, start, len } => {
                    let tx = &self.nodes[x.0].out;
                    let c = *tx.shape().last().unwrap();
                    let rows = tx.numel() / c;
                    let mut dx = vec![0.0; tx.numel()];
                    for r in 0..rows {
                        dx[r * c + start..r * c + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    add_into(&mut grads, *x, &dx, dx.len());
                }
                Op::Reshape(x) => {
                    add_into(&mut grads, *x, &g, g.len());
                }
                Op::MeanAll(x) => {
                    let n = self.nodes[x.0].out.numel();
                    let dx = vec![g[0] / n as f64; n];
                    add_into(&mut grads, *x, &dx, n);
                }
                Op::PoolVolumes { vols, plan } => {
                    let c = plan.channels;
                    for (vi, &v) in vols.iter().enumerate() {
                        let mut dv = vec![0.0; self.nodes[v.0].out.numel()];
                        for (pi, taps) in plan.taps[vi].iter().enumerate() {
                            if let Some(taps) = taps {
                                let inv = 1.0 / plan.hits[pi] as f64;
                                let grow = &g[pi * c..(pi + 1) * c];
                                for &(base, w) in taps {
                                    k::axpy(w * inv, grow, &mut dv[base..base + c]);
                                }
                            }
                        }
                        add_into(&mut grads, v, &dv, dv.len());
                    }
                }
                Op::TransmittanceWeights {
                    sigma,
                    deltas,
                    with_transmittance,
                } => {
                    let ts = &self.nodes[sigma.0].out;
                    let (r, n) = (ts.shape()[0], ts.shape()[1]);
                    let mut ds = vec![0.0; ts.numel()];
                    k::transmittance_weights_bwd(
                        ts.data(),
                        deltas,
                        r,
                        n,
                        *with_transmittance,
                        &g,
                        &mut ds,
                    );
                    add_into(&mut grads, *sigma, &ds, ds.len());
                }
                Op::ScaleRows { x, s } => {
                    let (tx, ts) = (&self.nodes[x.0].out, &self.nodes[s.0].out);
                    let (r, c) = (tx.shape()[0], tx.shape()[1]);
                    let mut dx = vec![0.0; tx.numel()];
                    let mut ds = vec![0.0; r];
                    for row in 0..r {
                        let f = ts.data()[row];
                        let grow = &g[row * c..(row + 1) * c];
                        k::axpy(f, grow, &mut dx[row * c..(row + 1) * c]);
                        ds[row] = k::dot(grow, &tx.data()[row * c..(row + 1) * c]);
                    }
                    add_into(&mut grads, *x, &dx, dx.len());
                    add_into(&mut grads, *s, &ds, ds.len());
                }
                Op::WeightedSumSamples { weights, values } => {
                    let (tw, tv) = (&self.nodes[weights.0].out, &self.nodes[values.0].out);
                    let (r, n, c) = (tv.shape()[0], tv.shape()[1], tv.shape()[2]);
                    let mut dw = vec![0.0; tw.numel()];
                    let mut dv = vec![0.0; tv.numel()];
                    for ray in 0..r {
                        let grow = &g[ray * c..(ray + 1) * c];
                        for i in 0..n {
                            let off = (ray * n + i) * c;
                            dw[ray * n + i] = k::dot(grow, &tv.data()[off..off + c]);
                            k::axpy(tw.data()[ray * n + i], grow, &mut dv[off..off + c]);
                        }
                    }
                    add_into(&mut grads, *weights, &dw, dw.len());
                    add_into(&mut grads, *values, &dv, dv.len());
                }
                Op::Splat { contrib, plan } => {
                    let tc = &self.nodes[contrib.0].out;
                    let c = tc.shape()[1];
                    let mut dc = vec![0.0; tc.numel()];
                    for (row, taps) in plan.taps.iter().enumerate() {
                        let drow = &mut dc[row * c..(row + 1) * c];
                        for &(pix, w) in taps {
                            if let Some(pix) = pix {
                                k::axpy(w, &g[pix * c..(pix + 1) * c], drow);
                            }
                        }
                    }
                    add_into(&mut grads, *contrib, &dc, dc.len());
                }
                Op::NearestResample { x, map, .. } => {
                    let tx = &self.nodes[x.0].out;
                    let c = *tx.shape().last().unwrap();
                    let mut dx = vec![0.0; tx.numel()];
                    for (o, &src) in map.iter().enumerate() {
                        for ch in 0..c {
                            dx[src * c + ch] += g[o * c + ch];
                        }
                    }
                    add_into(&mut grads, *x, &dx, dx.len());
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn numel(&self, v: Value) -> usize {
        self.nodes[v.0].out.numel()
    }
}

/// Forward splat kernel; returns the per-channel mass dropped by
/// out-of-extent taps, so callers can verify conservation.
pub(crate) fn splat_fwd(contrib: &[f64], c: usize, plan: &SplatPlan, out: &mut [f64]) -> Vec<f64> {
    let mut discarded = vec![0.0; c];
    for (row, taps) in plan.taps.iter().enumerate() {
        let crow = &contrib[row * c..(row + 1) * c];
        for &(pix, w) in taps {
            match pix {
                Some(pix) => k::axpy(w, crow, &mut out[pix * c..(pix + 1) * c]),
                None => k::axpy(w, crow, &mut discarded),
            }
        }
    }
    discarded
}

fn add_into(grads: &mut [Option<Vec<f64>>], v: Value, contribution: &[f64], numel: usize) {
    debug_assert_eq!(contribution.len(), numel);
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; numel]);
    for (s, c) in slot.iter_mut().zip(contribution) {
        *s += c;
    }
}

/// Sum with the same fixed association order as the kernels.
pub(crate) fn fixed_order_sum(xs: &[f64]) -> f64 {
    let n = xs.len();
    let chunks = n / 4;
    let mut acc = [0.0f64; 4];
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += xs[j];
        acc[1] += xs[j + 1];
        acc[2] += xs[j + 2];
        acc[3] += xs[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for x in &xs[4 * chunks..] {
        s += x;
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    /// Compare every analytic input gradient of `build`'s scalar output
    /// against central finite differences over all input coordinates.
    fn check_grads(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Value]) -> Value, tol: f64) {
        let mut tape = Tape::new();
        let leaves: Vec<Value> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &leaves);
        let grads = tape.backward(loss).unwrap();

        let eval = |xs: &[Tensor]| -> f64 {
            let mut tape = Tape::new();
            let leaves: Vec<Value> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
            let loss = build(&mut tape, &leaves);
            tape.value(loss).item().unwrap()
        };

        let h = 1e-5;
        for (ii, t) in inputs.iter().enumerate() {
            for j in 0..t.numel() {
                let mut plus = inputs.to_vec();
                plus[ii].data_mut()[j] += h;
                let mut minus = inputs.to_vec();
                minus[ii].data_mut()[j] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = grads.get(leaves[ii]).map_or(0.0, |g| g[j]);
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    err < tol,
                    "input {ii} coord {j}: finite difference {fd} vs analytic {an} (rel {err})"
                );
            }
        }
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = rand_tensor(&[2, 3], -1.0, 1.0, &mut rng);
        let b = rand_tensor(&[2, 3], -1.0, 1.0, &mut rng);
        check_grads(
            &[a, b],
            &|tape, vs| {
                let prod = tape.mul(vs[0], vs[1]).unwrap();
                let act = tape.silu(prod).unwrap();
                let scaled = tape.scale(vs[1], 2.0).unwrap();
                let diff = tape.sub(vs[0], scaled).unwrap();
                let soft = tape.softplus(diff).unwrap();
                let sum = tape.add(act, soft).unwrap();
                tape.mean_all(sum).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn matmul_and_bias_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = rand_tensor(&[3, 4], -1.0, 1.0, &mut rng);
        let w = rand_tensor(&[4, 2], -1.0, 1.0, &mut rng);
        let b = rand_tensor(&[2], -0.5, 0.5, &mut rng);
        let target = rand_tensor(&[3, 2], -1.0, 1.0, &mut rng);
        check_grads(
            &[x, w, b, target],
            &|tape, vs| {
                let h = tape.matmul(vs[0], vs[1]).unwrap();
                let h = tape.add_last_dim_bias(h, vs[2]).unwrap();
                let h = tape.silu(h).unwrap();
                tape.mse(h, vs[3]).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn conv2d_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for (k, stride, cout) in [(3, 1, 2), (3, 2, 2), (1, 1, 3)] {
            let x = rand_tensor(&[4, 5, 2], -1.0, 1.0, &mut rng);
            let w = rand_tensor(&[cout, k, k, 2], -0.5, 0.5, &mut rng);
            let b = rand_tensor(&[cout], -0.5, 0.5, &mut rng);
            check_grads(
                &[x, w, b],
                &|tape, vs| {
                    let h = tape.conv2d(vs[0], vs[1], vs[2], stride).unwrap();
                    let h = tape.silu(h).unwrap();
                    tape.mean_all(h).unwrap()
                },
                1e-6,
            );
        }
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let a = rand_tensor(&[2, 2, 2], -1.0, 1.0, &mut rng);
        let b = rand_tensor(&[2, 2, 1], -1.0, 1.0, &mut rng);
        check_grads(
            &[a, b],
            &|tape, vs| {
                let cat = tape.concat_last_dim(vs[0], vs[1]).unwrap();
                let mid = tape.narrow_last_dim(cat, 1, 2).unwrap();
                let up = tape.upsample2x(mid).unwrap();
                let flat = tape.reshape(up, &[16, 2]).unwrap();
                let sq = tape.mul(flat, flat).unwrap();
                tape.mean_all(sq).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn compositing_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        // Densities away from zero: the clamp to nonnegative density has a
        // kink at 0 that central differences would straddle.
        let sigma_data: Vec<f64> = (0..6)
            .map(|_| {
                let mag = rng.gen_range(0.05..1.5);
                if rng.gen_bool(0.7) {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        let sigma = Tensor::from_vec(&[2, 3], sigma_data).unwrap();
        let vals = rand_tensor(&[2, 3, 2], -1.0, 1.0, &mut rng);
        let row_scale = rand_tensor(&[2], 0.2, 1.0, &mut rng);
        let deltas = Rc::new(vec![0.2, 0.3, 0.25, 0.15, 0.2, 0.3]);
        for with_t in [true, false] {
            let deltas = Rc::clone(&deltas);
            check_grads(
                &[sigma.clone(), vals.clone(), row_scale.clone()],
                &|tape, vs| {
                    let w = tape
                        .transmittance_weights(vs[0], Rc::clone(&deltas), with_t)
                        .unwrap();
                    let summed = tape.weighted_sum_samples(w, vs[1]).unwrap();
                    let scaled = tape.scale_rows(summed, vs[2]).unwrap();
                    let sq = tape.mul(scaled, scaled).unwrap();
                    tape.mean_all(sq).unwrap()
                },
                1e-5,
            );
        }
    }

    /// Two `(2, 2, 2, 3)` volumes and three points: the first point lands in
    /// both volumes, the second in the first volume only, the third in none.
    fn test_pool_plan() -> Rc<PoolPlan> {
        let c = 3;
        let spread =
            |cells: [usize; 8], ws: [f64; 8]| -> PointTaps {
                let mut taps = [(0usize, 0.0f64); 8];
                for i in 0..8 {
                    taps[i] = (cells[i] * c, ws[i]);
                }
                Some(taps)
            };
        let p0_v0 = spread(
            [0, 1, 2, 3, 4, 5, 6, 7],
            [0.3, 0.2, 0.1, 0.1, 0.1, 0.1, 0.05, 0.05],
        );
        let p0_v1 = spread(
            [7, 6, 5, 4, 3, 2, 1, 0],
            [0.25, 0.25, 0.125, 0.125, 0.125, 0.125, 0.0, 0.0],
        );
        let p1_v0 = spread(
            [2, 3, 2, 3, 6, 7, 6, 7],
            [0.5, 0.125, 0.125, 0.05, 0.05, 0.05, 0.05, 0.05],
        );
        Rc::new(PoolPlan {
            n_points: 3,
            channels: c,
            vol_shape: [2, 2, 2, 3],
            taps: vec![vec![p0_v0, p1_v0, None], vec![p0_v1, None, None]],
            hits: vec![2, 1, 0],
        })
    }

    #[test]
    fn pool_volumes_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let v0 = rand_tensor(&[2, 2, 2, 3], -1.0, 1.0, &mut rng);
        let v1 = rand_tensor(&[2, 2, 2, 3], -1.0, 1.0, &mut rng);
        let plan = test_pool_plan();
        check_grads(
            &[v0, v1],
            &|tape, vs| {
                let pooled = tape.pool_volumes(vs, Rc::clone(&plan)).unwrap();
                let sq = tape.mul(pooled, pooled).unwrap();
                tape.mean_all(sq).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn pool_volumes_averages_over_containing_volumes() {
        // Constant grids make the expected pooled rows easy to state: the
        // taps of each hit sum to 1, so a point reads the grid constant and
        // multi-hit points average the constants.
        let mut tape = Tape::new();
        let v0 = tape.leaf(Tensor::from_vec(&[2, 2, 2, 3], vec![2.0; 24]).unwrap());
        let v1 = tape.leaf(Tensor::from_vec(&[2, 2, 2, 3], vec![6.0; 24]).unwrap());
        let pooled = tape.pool_volumes(&[v0, v1], test_pool_plan()).unwrap();
        let out = tape.value(pooled).data();
        assert_eq!(tape.value(pooled).shape(), &[3, 3]);
        for ch in 0..3 {
            assert!((out[ch] - 4.0).abs() < 1e-12, "both volumes: {}", out[ch]);
            assert!((out[3 + ch] - 2.0).abs() < 1e-12, "first only: {}", out[3 + ch]);
            assert_eq!(out[6 + ch], 0.0, "no volume: {}", out[6 + ch]);
        }
    }

    /// A `2 x 2` output, three contribution rows: one fully inside, one
    /// partially clipped, one fully outside the extent.
    fn test_splat_plan() -> Rc<SplatPlan> {
        Rc::new(SplatPlan {
            out_h: 2,
            out_w: 2,
            taps: vec![
                [
                    (Some(0), 0.25),
                    (Some(1), 0.25),
                    (Some(2), 0.25),
                    (Some(3), 0.25),
                ],
                [(Some(1), 0.6), (Some(3), 0.2), (None, 0.2), (None, 0.0)],
                [(None, 0.5), (None, 0.5), (None, 0.0), (None, 0.0)],
            ],
        })
    }

    #[test]
    fn splat_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let contrib = rand_tensor(&[3, 2], -1.0, 1.0, &mut rng);
        let plan = test_splat_plan();
        check_grads(
            &[contrib],
            &|tape, vs| {
                let img = tape.splat(vs[0], Rc::clone(&plan)).unwrap();
                let sq = tape.mul(img, img).unwrap();
                tape.mean_all(sq).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn splat_conserves_mass_including_discarded_taps() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let contrib = rand_tensor(&[3, 2], -1.0, 1.0, &mut rng);
        let plan = test_splat_plan();
        let mut out = vec![0.0; plan.out_h * plan.out_w * 2];
        let discarded = splat_fwd(contrib.data(), 2, &plan, &mut out);
        for ch in 0..2 {
            // Each row's taps sum to 1, so total splatted plus discarded mass
            // equals the column sum of the contributions.
            let total: f64 = out.iter().skip(ch).step_by(2).sum::<f64>() + discarded[ch];
            let expected: f64 = (0..3).map(|r| contrib.data()[r * 2 + ch]).sum();
            assert!((total - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn nearest_resample_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let x = rand_tensor(&[2, 2, 3], -1.0, 1.0, &mut rng);
        let map = Rc::new(vec![0, 0, 1, 2, 2, 3, 2, 3, 3]);
        check_grads(
            &[x],
            &|tape, vs| {
                let up = tape.nearest_resample(vs[0], Rc::clone(&map), 3, 3).unwrap();
                let sq = tape.mul(up, up).unwrap();
                tape.mean_all(sq).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn fan_out_accumulates_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let x = rand_tensor(&[5], -1.0, 1.0, &mut rng);
        check_grads(
            &[x],
            &|tape, vs| {
                // vs[0] feeds the product twice and the sum once.
                let doubled = tape.add(vs[0], vs[0]).unwrap();
                let sq = tape.mul(doubled, vs[0]).unwrap();
                tape.mean_all(sq).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn backward_exposes_intermediate_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.scale(x, 3.0).unwrap();
        let loss = tape.mean_all(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(y).unwrap(), &[0.25; 4]);
        assert_eq!(grads.get(x).unwrap(), &[0.75; 4]);
        assert_eq!(grads.get(loss).unwrap(), &[1.0]);
    }

    #[test]
    fn values_unrelated_to_the_loss_have_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let unused = tape.leaf(Tensor::from_vec(&[2], vec![5.0, 6.0]).unwrap());
        let loss = tape.mean_all(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(unused).is_none());
        assert!(grads.get(x).is_some());
    }

    #[test]
    fn backward_requires_a_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn shape_mismatches_are_rejected_eagerly() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[3, 3]));
        assert!(tape.add(a, b).is_err());
        assert!(tape.matmul(a, a).is_err());
        assert!(tape.narrow_last_dim(a, 2, 2).is_err());
        assert!(tape.reshape(a, &[7]).is_err());
    }
}
