//! Convolution, batch normalization, pooling and upsampling, recorded as tape
//! operations with their backward rules.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Stride, dilation and zero padding of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl Default for ConvGeom {
    fn default() -> Self {
        ConvGeom {
            stride: 1,
            dilation: 1,
            padding: 0,
        }
    }
}

impl ConvGeom {
    pub fn new(stride: usize, dilation: usize, padding: usize) -> Self {
        ConvGeom {
            stride,
            dilation,
            padding,
        }
    }

    /// Padding that keeps the spatial size for a stride-1 kernel of size `k`.
    pub fn same(k: usize, dilation: usize) -> Self {
        ConvGeom::new(1, dilation, (k - 1) * dilation / 2)
    }

    pub fn effective_extent(&self, k: usize) -> usize {
        (k - 1) * self.dilation + 1
    }

    /// `floor((input + 2p - extent) / stride) + 1`, or `None` when not positive.
    pub fn output_size(&self, input: usize, k: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        let extent = self.effective_extent(k);
        if self.stride == 0 || self.dilation == 0 || padded < extent {
            return None;
        }
        Some((padded - extent) / self.stride + 1)
    }
}

/// Running statistics of one batch-norm forward pass in train mode.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, as used for the running estimate.
    pub var: Vec<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// A convolution layer holding its own weights.
#[derive(Clone, Debug)]
pub struct Conv2dLayer<T: Real = f32> {
    /// `out_ch x in_ch x kh x kw`
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub geom: ConvGeom,
}

impl<T: Real> Conv2dLayer<T> {
    /// Records the layer on `tape` with its weights as tracked leaves.
    /// Returns `(output, weight, bias)` handles.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<(Var, Var, Option<Var>)> {
        let w = tape.param(self.weight.clone());
        let b = self.bias.clone().map(|b| tape.param(b));
        let y = tape.conv2d(x, w, b, self.geom)?;
        Ok((y, w, b))
    }
}

/// A batch-norm layer holding its own affine parameters and running
/// statistics.
#[derive(Clone, Debug)]
pub struct BatchNormLayer<T: Real = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: T,
    pub eps: T,
    pub mode: Mode,
}

impl<T: Real> BatchNormLayer<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormLayer {
            gamma: Tensor::ones([channels]),
            beta: Tensor::zeros([channels]),
            running_mean: Tensor::zeros([channels]),
            running_var: Tensor::ones([channels]),
            momentum: T::from_f64_lossy(BN_MOMENTUM),
            eps: T::from_f64_lossy(BN_EPS),
            mode: Mode::Train,
        }
    }

    /// Records the layer; in train mode the running statistics are updated.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let gamma = tape.param(self.gamma.clone());
        let beta = tape.param(self.beta.clone());
        match self.mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm_train(x, gamma, beta, self.eps)?;
                update_running(
                    self.running_mean.data_mut(),
                    self.running_var.data_mut(),
                    &stats,
                    self.momentum,
                );
                Ok(y)
            }
            Mode::Eval => tape.batch_norm_eval(
                x,
                gamma,
                beta,
                self.running_mean.data(),
                self.running_var.data(),
                self.eps,
            ),
        }
    }
}

/// Exponential moving average update of running statistics.
pub fn update_running<T: Real>(mean: &mut [T], var: &mut [T], stats: &BatchStats<T>, momentum: T) {
    let keep = T::one() - momentum;
    for (m, &b) in mean.iter_mut().zip(&stats.mean) {
        *m = keep * *m + momentum * b;
    }
    for (v, &b) in var.iter_mut().zip(&stats.var) {
        *v = keep * *v + momentum * b;
    }
}

impl<T: Real> Tape<T> {
    /// Cross-correlation of `x: N x C x H x W` with `w: O x C x kh x kw`,
    /// lowered to a matrix product over gathered patches.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (o, ci, kh, kw) = self.value(w).dims4()?;
        if ci != c {
            return Err(Error::ShapeMismatch {
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(w).to_vec(),
            });
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::ShapeMismatch {
                    lhs: vec![o],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let (ho, wo) = match (geom.output_size(h, kh), geom.output_size(wd, kw)) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => {
                return Err(Error::InvalidShape {
                    shape: self.shape(x).to_vec(),
                    reason: format!("convolution output size is not positive for {geom:?}"),
                })
            }
        };
        let ck = c * kh * kw;
        let hw = ho * wo;
        let mut cols = vec![T::zero(); n * ck * hw];
        let xd = self.value(x).data();
        for img in 0..n {
            im2col(
                &xd[img * c * h * wd..(img + 1) * c * h * wd],
                (c, h, wd),
                (kh, kw),
                geom,
                (ho, wo),
                &mut cols[img * ck * hw..(img + 1) * ck * hw],
            );
        }
        let wdata = self.value(w).data();
        let mut out = vec![T::zero(); n * o * hw];
        for img in 0..n {
            T::gemm(
                o,
                ck,
                hw,
                wdata,
                false,
                &cols[img * ck * hw..(img + 1) * ck * hw],
                false,
                &mut out[img * o * hw..(img + 1) * o * hw],
                T::zero(),
            );
        }
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (chunk, &bv) in out.chunks_mut(hw).zip(bias.iter().cycle()) {
                for v in chunk {
                    *v = *v + bv;
                }
            }
        }
        let value = Tensor::new(vec![n, o, ho, wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
        ))
    }

    /// Batch normalization with batch statistics. Returns the statistics for
    /// the running-average update.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        let (n, c, h, w) = self.value(x).dims4()?;
        check_affine(self, gamma, beta, c)?;
        let m = n * h * w;
        if m < 2 {
            return Err(Error::InvalidInput(format!(
                "batch norm in train mode needs more than one value per channel, got {:?}",
                self.shape(x)
            )));
        }
        let hw = h * w;
        let xd = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mf = T::from_usize(m).expect("count fits");
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let plane = |img: usize| &xd[(img * c + ch) * hw..(img * c + ch + 1) * hw];
            let s: T = (0..n)
                .map(|img| plane(img).iter().copied().sum::<T>())
                .sum();
            let mu = s / mf;
            let ss: T = (0..n)
                .map(|img| plane(img).iter().map(|&v| (v - mu) * (v - mu)).sum::<T>())
                .sum();
            let biased = ss / mf;
            mean[ch] = mu;
            var[ch] = ss / (mf - T::one());
            inv_std[ch] = T::one() / (biased + eps).sqrt();
        }
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let y = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        );
        Ok((y, BatchStats { mean, var }))
    }

    /// Batch normalization with fixed running statistics: a per-channel
    /// affine map, differentiable in `x`, `gamma` and `beta`.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let (_, c, _, _) = self.value(x).dims4()?;
        check_affine(self, gamma, beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::ShapeMismatch {
                lhs: vec![c],
                rhs: vec![running_mean.len()],
            });
        }
        let inv: Vec<T> = running_var
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        let inv = self.constant(Tensor::new(vec![1, c, 1, 1], inv)?);
        let rm = self.constant(Tensor::new(vec![1, c, 1, 1], running_mean.to_vec())?);
        let g4 = self.reshape(gamma, [1, c, 1, 1])?;
        let b4 = self.reshape(beta, [1, c, 1, 1])?;
        let scale = self.mul(g4, inv)?;
        let centered = self.sub(x, rm)?;
        let scaled = self.mul(centered, scale)?;
        self.add(scaled, b4)
    }

    /// Bilinear upsampling by an integer factor with half-pixel centers
    /// (align-corners = false).
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if factor == 0 {
            return Err(Error::InvalidInput(
                "upsample factor must be at least 1".into(),
            ));
        }
        let (ty, tx) = (interp_table::<T>(h, factor), interp_table::<T>(w, factor));
        let (oh, ow) = (h * factor, w * factor);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        for p in 0..n * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let top = plane[y0 * w + x0] * (T::one() - lx) + plane[y0 * w + x1] * lx;
                    let bot = plane[y1 * w + x0] * (T::one() - lx) + plane[y1 * w + x1] * lx;
                    dst[oy * ow + ox] = top * (T::one() - ly) + bot * ly;
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(value, Op::Upsample { x, factor }))
    }

    /// Per-channel spatial mean, `N x C x 1 x 1`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let denom = T::from_usize(hw).expect("count fits");
        let out = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() / denom)
            .collect();
        let value = Tensor::new(vec![n, c, 1, 1], out)?;
        Ok(self.push(value, Op::GlobalAvgPool { x }))
    }
}

fn check_affine<T: Real>(tape: &Tape<T>, gamma: Var, beta: Var, c: usize) -> Result<()> {
    for v in [gamma, beta] {
        if tape.shape(v) != [c] {
            return Err(Error::ShapeMismatch {
                lhs: vec![c],
                rhs: tape.shape(v).to_vec(),
            });
        }
    }
    Ok(())
}

/// For each output index along one axis: the two source indices and the
/// weight of the second.
fn interp_table<T: Real>(size: usize, factor: usize) -> Vec<(usize, usize, T)> {
    (0..size * factor)
        .map(|o| {
            let s = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(size - 1);
            let i1 = (i0 + 1).min(size - 1);
            (i0, i1, T::from_f64_lossy(s - i0 as f64))
        })
        .collect()
}

fn im2col<T: Real>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    geom: ConvGeom,
    (ho, wo): (usize, usize),
    cols: &mut [T],
) {
    let (s, d, p) = (
        geom.stride as isize,
        geom.dilation as isize,
        geom.padding as isize,
    );
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = oy as isize * s + ki as isize * d - p;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize * s + kj as isize * d - p;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(
    cols: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    geom: ConvGeom,
    (ho, wo): (usize, usize),
    dx: &mut [T],
) {
    let (s, d, p) = (
        geom.stride as isize,
        geom.dilation as isize,
        geom.padding as isize,
    );
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = oy as isize * s + ki as isize * d - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = ox as isize * s + kj as isize * d - p;
                        if ix >= 0 && ix < w as isize {
                            let j = iy as usize * w + ix as usize;
                            plane[j] = plane[j] + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Real>(
    tape: &Tape<T>,
    x: Var,
    w: Var,
    b: Option<Var>,
    geom: ConvGeom,
    cols: &[T],
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let (n, c, h, wd) = tape.value(x).dims4().expect("validated in forward");
    let (o, _, kh, kw) = tape.value(w).dims4().expect("validated in forward");
    let (ho, wo) = (
        geom.output_size(h, kh).expect("validated"),
        geom.output_size(wd, kw).expect("validated"),
    );
    let (ck, hw) = (c * kh * kw, ho * wo);

    if let Some(dw) = tape.grad_buf(grads, w) {
        for img in 0..n {
            T::gemm(
                o,
                hw,
                ck,
                &g[img * o * hw..(img + 1) * o * hw],
                false,
                &cols[img * ck * hw..(img + 1) * ck * hw],
                true,
                dw,
                T::one(),
            );
        }
    }
    if let Some(b) = b {
        if let Some(db) = tape.grad_buf(grads, b) {
            for (i, chunk) in g.chunks(hw).enumerate() {
                db[i % o] = db[i % o] + chunk.iter().copied().sum();
            }
        }
    }
    let wdata = tape.value(w).data();
    if let Some(dx) = tape.grad_buf(grads, x) {
        let mut dcols = vec![T::zero(); ck * hw];
        for img in 0..n {
            T::gemm(
                ck,
                o,
                hw,
                wdata,
                true,
                &g[img * o * hw..(img + 1) * o * hw],
                false,
                &mut dcols,
                T::zero(),
            );
            col2im(
                &dcols,
                (c, h, wd),
                (kh, kw),
                geom,
                (ho, wo),
                &mut dx[img * c * h * wd..(img + 1) * c * h * wd],
            );
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batch_norm_backward<T: Real>(
    tape: &Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: &[T],
    inv_std: &[T],
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let (n, c, h, w) = tape.value(x).dims4().expect("validated in forward");
    let hw = h * w;
    let mf = T::from_usize(n * hw).expect("count fits");
    let mut sum_g = vec![T::zero(); c];
    let mut sum_gx = vec![T::zero(); c];
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * hw;
            for i in base..base + hw {
                sum_g[ch] = sum_g[ch] + g[i];
                sum_gx[ch] = sum_gx[ch] + g[i] * xhat[i];
            }
        }
    }
    if let Some(dg) = tape.grad_buf(grads, gamma) {
        for (d, &s) in dg.iter_mut().zip(&sum_gx) {
            *d = *d + s;
        }
    }
    if let Some(db) = tape.grad_buf(grads, beta) {
        for (d, &s) in db.iter_mut().zip(&sum_g) {
            *d = *d + s;
        }
    }
    let gam = tape.value(gamma).data();
    if let Some(dx) = tape.grad_buf(grads, x) {
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * hw;
                let k = gam[ch] * inv_std[ch] / mf;
                for i in base..base + hw {
                    dx[i] = dx[i] + k * (mf * g[i] - sum_g[ch] - xhat[i] * sum_gx[ch]);
                }
            }
        }
    }
}

pub(crate) fn upsample_backward<T: Real>(
    tape: &Tape<T>,
    x: Var,
    factor: usize,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let (n, c, h, w) = tape.value(x).dims4().expect("validated in forward");
    let (ty, tx) = (interp_table::<T>(h, factor), interp_table::<T>(w, factor));
    let (oh, ow) = (h * factor, w * factor);
    let Some(dx) = tape.grad_buf(grads, x) else {
        return;
    };
    for p in 0..n * c {
        let plane = &mut dx[p * h * w..(p + 1) * h * w];
        let src = &g[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let gv = src[oy * ow + ox];
                let (top, bot) = (gv * (T::one() - ly), gv * ly);
                plane[y0 * w + x0] = plane[y0 * w + x0] + top * (T::one() - lx);
                plane[y0 * w + x1] = plane[y0 * w + x1] + top * lx;
                plane[y1 * w + x0] = plane[y1 * w + x0] + bot * (T::one() - lx);
                plane[y1 * w + x1] = plane[y1 * w + x1] + bot * lx;
            }
        }
    }
}

pub(crate) fn global_avg_pool_backward<T: Real>(
    tape: &Tape<T>,
    x: Var,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let (_, _, h, w) = tape.value(x).dims4().expect("validated in forward");
    let hw = h * w;
    let denom = T::from_usize(hw).expect("count fits");
    let Some(dx) = tape.grad_buf(grads, x) else {
        return;
    };
    for (plane, &gv) in dx.chunks_mut(hw).zip(g) {
        let share = gv / denom;
        for d in plane {
            *d = *d + share;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_size_formula() {
        let g = ConvGeom::new(1, 2, 2);
        assert_eq!(g.effective_extent(3), 5);
        assert_eq!(g.output_size(5, 3), Some(5));
        assert_eq!(ConvGeom::new(2, 1, 1).output_size(64, 3), Some(32));
        assert_eq!(ConvGeom::new(1, 4, 0).output_size(5, 3), None);
    }

    #[test]
    fn dilated_center_sums_nine_taps() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones([1, 1, 5, 5]));
        let w = tape.constant(Tensor::ones([1, 1, 3, 3]));
        let y = tape.conv2d(x, w, None, ConvGeom::new(1, 2, 2)).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 5, 5]);
        assert_eq!(tape.value(y).data()[12], 9.0);
        // corner only sees the centre tap and three others
        assert_eq!(tape.value(y).data()[0], 4.0);
    }

    #[test]
    fn identity_kernel_and_zero_input() {
        let mut tape = Tape::<f64>::new();
        let xs = Tensor::from_fn([2, 1, 3, 4], |i| i as f64 * 0.5 - 2.0);
        let x = tape.constant(xs.clone());
        let w = tape.constant(Tensor::ones([1, 1, 1, 1]));
        let b = tape.constant(Tensor::zeros([1]));
        let y = tape.conv2d(x, w, Some(b), ConvGeom::default()).unwrap();
        assert_eq!(tape.value(y), &xs);

        let z = tape.constant(Tensor::zeros([1, 2, 4, 4]));
        let w = tape.constant(Tensor::from_fn([3, 2, 3, 3], |i| i as f64));
        let b = tape.constant(Tensor::from_f64([3], &[1.0, -2.0, 0.5]).unwrap());
        let y = tape.conv2d(z, w, Some(b), ConvGeom::same(3, 1)).unwrap();
        for (i, chunk) in tape.value(y).data().chunks(16).enumerate() {
            assert!(chunk.iter().all(|&v| v == [1.0, -2.0, 0.5][i]));
        }
    }

    #[test]
    fn conv_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros([1, 2, 4, 4]));
        let w = tape.constant(Tensor::zeros([1, 3, 3, 3]));
        assert!(matches!(
            tape.conv2d(x, w, None, ConvGeom::default()),
            Err(Error::ShapeMismatch { .. })
        ));
        let w = tape.constant(Tensor::zeros([1, 2, 3, 3]));
        assert!(matches!(
            tape.conv2d(x, w, None, ConvGeom::new(1, 3, 0)),
            Err(Error::InvalidShape { .. })
        ));
    }

    #[test]
    fn batch_norm_examples() {
        let mut tape = Tape::<f64>::new();
        let xs = Tensor::from_fn([2, 2, 2, 2], |i| (i as f64).sin());
        let x = tape.constant(xs.clone());
        let mut bn = BatchNormLayer::<f64>::new(2);
        bn.mode = Mode::Eval;
        let y = bn.forward(&mut tape, x).unwrap();
        assert!(tape.value(y).max_abs_diff(&xs) < 1e-5);

        // constant input -> beta
        let mut bn = BatchNormLayer::<f64>::new(1);
        bn.beta = Tensor::scalar(0.7);
        let x = tape.constant(Tensor::full([2, 1, 2, 2], 3.0));
        let y = bn.forward(&mut tape, x).unwrap();
        assert!(tape
            .value(y)
            .data()
            .iter()
            .all(|&v| (v - 0.7).abs() < 1e-12));
        // running mean moved towards 3 by momentum
        assert!((bn.running_mean.data()[0] - 0.3).abs() < 1e-12);

        // affine on standardized input
        let mut bn = BatchNormLayer::<f64>::new(1);
        bn.gamma = Tensor::scalar(2.0);
        bn.beta = Tensor::scalar(3.0);
        bn.eps = 0.0;
        let x = tape.constant(Tensor::from_f64([2, 1, 1, 1], &[-1.0, 1.0]).unwrap());
        let y = bn.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 5.0]);
    }

    #[test]
    fn batch_norm_train_rejects_single_value() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones([1, 3, 1, 1]));
        let mut bn = BatchNormLayer::<f64>::new(3);
        assert!(bn.forward(&mut tape, x).is_err());
        bn.mode = Mode::Eval;
        assert!(bn.forward(&mut tape, x).is_ok());
    }

    #[test]
    fn upsample_examples() {
        let mut tape = Tape::<f64>::new();
        let xs = Tensor::from_fn([1, 2, 3, 2], |i| i as f64);
        let x = tape.constant(xs.clone());
        let y = tape.upsample_bilinear(x, 1).unwrap();
        assert_eq!(tape.value(y), &xs);

        let v = tape.constant(Tensor::full([1, 1, 1, 1], 0.3));
        let y = tape.upsample_bilinear(v, 4).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 4, 4]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.3));

        let col = tape.constant(Tensor::from_f64([1, 1, 2, 1], &[0.0, 1.0]).unwrap());
        let y = tape.upsample_bilinear(col, 2).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 4, 2]);
        let d = tape.value(y).data();
        assert_eq!([d[0], d[2], d[4], d[6]], [0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn pool_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_f64([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let p = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(p).data(), &[2.5]);
        let loss = tape.sum(p);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.25; 4]);
    }
}
