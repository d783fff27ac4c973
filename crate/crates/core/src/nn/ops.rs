//! Differentiable operators with explicit forward/backward pairs.
//!
//! Each forward returns the output plus a context holding whatever the
//! backward needs. Backward functions take the context by value, so a forward
//! can be differentiated at most once. All accumulations run in a fixed
//! row-major order.

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const L2_EPS: f64 = 1e-12;

// ---------------------------------------------------------------- conv2d

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

pub struct Conv2dCtx<T> {
    input: Tensor<T>,
    geometry: ConvGeometry,
    kernel: usize,
    out_hw: (usize, usize),
}

pub struct Conv2dGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv_output_extent(extent: usize, kernel: usize, geometry: ConvGeometry) -> Option<usize> {
    let padded = extent + 2 * geometry.padding;
    if padded < kernel || geometry.stride == 0 {
        return None;
    }
    Some((padded - kernel) / geometry.stride + 1)
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    g: ConvGeometry,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let npix = oh * ow;
    for c in 0..channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((c * k + ki) * k + kj) * npix..][..npix];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *d = if ix < 0 || ix >= w as isize {
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

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    g: ConvGeometry,
    oh: usize,
    ow: usize,
    dx: &mut [T],
) {
    let npix = oh * ow;
    for c in 0..channels {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[((c * k + ki) * k + kj) * npix..][..npix];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-d cross-correlation. `input` is NCHW, `weight` is OIKK, `bias` has O entries.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    geometry: ConvGeometry,
) -> Result<(Tensor<T>, Conv2dCtx<T>)> {
    let (n, c, h, w) = input.dims4()?;
    let (o, wc, k, k2) = weight.dims4()?;
    if wc != c || k != k2 || bias.shape() != [o] {
        return Err(Error::Shape(format!(
            "conv2d: expected weight [O, {c}, K, K] and bias [O]; got weight {:?}, bias {:?}",
            weight.shape(),
            bias.shape()
        )));
    }
    let (oh, ow) = match (
        conv_output_extent(h, k, geometry),
        conv_output_extent(w, k, geometry),
    ) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::Shape(format!(
                "conv2d: input {h}x{w} with padding {} is smaller than kernel {k}",
                geometry.padding
            )))
        }
    };
    let npix = oh * ow;
    let rows = c * k * k;
    let mut cols = vec![T::zero(); rows * npix];
    let mut out = Tensor::zeros(&[n, o, oh, ow]);
    let wd = weight.data();
    for s in 0..n {
        im2col(
            &input.data()[s * c * h * w..(s + 1) * c * h * w],
            c,
            h,
            w,
            k,
            geometry,
            oh,
            ow,
            &mut cols,
        );
        let dst = &mut out.data_mut()[s * o * npix..(s + 1) * o * npix];
        for oc in 0..o {
            let orow = &mut dst[oc * npix..(oc + 1) * npix];
            orow.iter_mut().for_each(|v| *v = bias.data()[oc]);
            for r in 0..rows {
                let wv = wd[oc * rows + r];
                let crow = &cols[r * npix..(r + 1) * npix];
                for (a, &b) in orow.iter_mut().zip(crow) {
                    *a += wv * b;
                }
            }
        }
    }
    Ok((
        out,
        Conv2dCtx {
            input: input.clone(),
            geometry,
            kernel: k,
            out_hw: (oh, ow),
        },
    ))
}

pub fn conv2d_backward<T: Real>(
    ctx: Conv2dCtx<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<Conv2dGrads<T>> {
    let (n, c, h, w) = ctx.input.dims4()?;
    let (o, _, k, _) = weight.dims4()?;
    if k != ctx.kernel {
        return Err(Error::Shape(format!(
            "conv2d backward: forward used kernel {}, weight has {k}",
            ctx.kernel
        )));
    }
    let (oh, ow) = ctx.out_hw;
    if grad_out.shape() != [n, o, oh, ow] {
        return Err(Error::Shape(format!(
            "conv2d backward: expected upstream [{n}, {o}, {oh}, {ow}], got {:?}",
            grad_out.shape()
        )));
    }
    let npix = oh * ow;
    let rows = c * k * k;
    let mut cols = vec![T::zero(); rows * npix];
    let mut dcols = vec![T::zero(); rows * npix];
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = Tensor::zeros(&[o]);
    let mut dx = Tensor::zeros(ctx.input.shape());
    let wd = weight.data();
    for s in 0..n {
        im2col(
            &ctx.input.data()[s * c * h * w..(s + 1) * c * h * w],
            c,
            h,
            w,
            k,
            ctx.geometry,
            oh,
            ow,
            &mut cols,
        );
        let dy = &grad_out.data()[s * o * npix..(s + 1) * o * npix];
        dcols.iter_mut().for_each(|v| *v = T::zero());
        for oc in 0..o {
            let dyr = &dy[oc * npix..(oc + 1) * npix];
            db.data_mut()[oc] += dyr.iter().copied().sum::<T>();
            let dwr = &mut dw.data_mut()[oc * rows..(oc + 1) * rows];
            for r in 0..rows {
                let crow = &cols[r * npix..(r + 1) * npix];
                let mut acc = T::zero();
                for (&a, &b) in dyr.iter().zip(crow) {
                    acc += a * b;
                }
                dwr[r] += acc;
                let wv = wd[oc * rows + r];
                let drow = &mut dcols[r * npix..(r + 1) * npix];
                for (d, &g) in drow.iter_mut().zip(dyr) {
                    *d += wv * g;
                }
            }
        }
        col2im(
            &dcols,
            c,
            h,
            w,
            k,
            ctx.geometry,
            oh,
            ow,
            &mut dx.data_mut()[s * c * h * w..(s + 1) * c * h * w],
        );
    }
    Ok(Conv2dGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}

// ---------------------------------------------------------------- maxpool

pub struct MaxPoolCtx {
    input_shape: Vec<usize>,
    argmax: Vec<usize>,
}

/// 2x2 max pooling with stride 2. Odd extents drop the last row/column.
pub fn maxpool2d<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, MaxPoolCtx)> {
    let (n, c, h, w) = input.dims4()?;
    if h < 2 || w < 2 {
        return Err(Error::Shape(format!(
            "maxpool2d: spatial extent {h}x{w} is smaller than the 2x2 window"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let x = input.data();
    let mut idx = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let cand = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                out.data_mut()[idx] = x[best];
                argmax.push(best);
                idx += 1;
            }
        }
    }
    Ok((
        out,
        MaxPoolCtx {
            input_shape: input.shape().to_vec(),
            argmax,
        },
    ))
}

pub fn maxpool2d_backward<T: Real>(ctx: MaxPoolCtx, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.len() != ctx.argmax.len() {
        return Err(Error::Shape(format!(
            "maxpool2d backward: expected {} upstream values, got {}",
            ctx.argmax.len(),
            grad_out.len()
        )));
    }
    let mut dx = Tensor::zeros(&ctx.input_shape);
    for (&src, &g) in ctx.argmax.iter().zip(grad_out.data()) {
        dx.data_mut()[src] += g;
    }
    Ok(dx)
}

// ---------------------------------------------------------------- batch norm

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel sufficient statistics of one shard. Channel is axis 1; every
/// other axis counts as a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSums {
    pub count: usize,
    pub sum: Vec<f64>,
}

fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::Shape(format!(
            "batch norm needs at least [N, C], got {shape:?}"
        )));
    }
    let inner: usize = shape[2..].iter().product();
    Ok((shape[0], shape[1], inner))
}

pub fn channel_sums<T: Real>(input: &Tensor<T>) -> Result<ChannelSums> {
    let (n, c, inner) = channel_layout(input.shape())?;
    let mut sum = vec![0.0; c];
    for s in 0..n {
        for (ch, acc) in sum.iter_mut().enumerate() {
            let base = (s * c + ch) * inner;
            for v in &input.data()[base..base + inner] {
                *acc += v.f64();
            }
        }
    }
    Ok(ChannelSums {
        count: n * inner,
        sum,
    })
}

/// Σ (x − mean)² per channel.
pub fn channel_centered_squares<T: Real>(input: &Tensor<T>, mean: &[f64]) -> Result<Vec<f64>> {
    let (n, c, inner) = channel_layout(input.shape())?;
    let mut acc = vec![0.0; c];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * inner;
            for v in &input.data()[base..base + inner] {
                let d = v.f64() - mean[ch];
                acc[ch] += d * d;
            }
        }
    }
    Ok(acc)
}

pub struct BatchNormCtx<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    gamma: Vec<T>,
    mode: BnMode,
}

pub struct BatchNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

/// Normalizes with externally supplied statistics and applies the affine map.
pub fn batchnorm_apply<T: Real>(
    input: &Tensor<T>,
    mean: &[f64],
    var: &[f64],
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
    mode: BnMode,
) -> Result<(Tensor<T>, BatchNormCtx<T>)> {
    let (n, c, inner) = channel_layout(input.shape())?;
    if gamma.shape() != [c] || beta.shape() != [c] || mean.len() != c || var.len() != c {
        return Err(Error::Shape(format!(
            "batch norm over {c} channels got gamma {:?}, beta {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(input.shape());
    let mut out = Tensor::zeros(input.shape());
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * inner;
            let (m, is) = (T::of(mean[ch]), T::of(inv_std[ch]));
            let (g, b) = (gamma.data()[ch], beta.data()[ch]);
            for i in base..base + inner {
                let xh = (input.data()[i] - m) * is;
                xhat.data_mut()[i] = xh;
                out.data_mut()[i] = g * xh + b;
            }
        }
    }
    Ok((
        out,
        BatchNormCtx {
            xhat,
            inv_std: inv_std.into_iter().map(T::of).collect(),
            gamma: gamma.data().to_vec(),
            mode,
        },
    ))
}

/// Per-channel Σdy and Σdy·x̂ for one shard; these are the quantities a
/// synchronized batch norm exchanges during the backward pass.
pub fn batchnorm_grad_sums<T: Real>(
    ctx: &BatchNormCtx<T>,
    grad_out: &Tensor<T>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if grad_out.shape() != ctx.xhat.shape() {
        return Err(Error::Shape(format!(
            "batch norm backward: expected upstream {:?}, got {:?}",
            ctx.xhat.shape(),
            grad_out.shape()
        )));
    }
    let (n, c, inner) = channel_layout(grad_out.shape())?;
    let mut sum_dy = vec![0.0; c];
    let mut sum_dy_xhat = vec![0.0; c];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * inner;
            for i in base..base + inner {
                let g = grad_out.data()[i].f64();
                sum_dy[ch] += g;
                sum_dy_xhat[ch] += g * ctx.xhat.data()[i].f64();
            }
        }
    }
    Ok((sum_dy, sum_dy_xhat))
}

/// Input gradient given (possibly globally reduced) channel sums over `count`
/// normalized elements.
pub fn batchnorm_input_grad<T: Real>(
    ctx: &BatchNormCtx<T>,
    grad_out: &Tensor<T>,
    sum_dy: &[f64],
    sum_dy_xhat: &[f64],
    count: usize,
) -> Result<Tensor<T>> {
    let (n, c, inner) = channel_layout(grad_out.shape())?;
    let mut dx = Tensor::zeros(grad_out.shape());
    for ch in 0..c {
        let scale = ctx.gamma[ch] * ctx.inv_std[ch];
        let (mean_dy, mean_dyx) = match ctx.mode {
            BnMode::Train => (
                T::of(sum_dy[ch] / count as f64),
                T::of(sum_dy_xhat[ch] / count as f64),
            ),
            BnMode::Eval => (T::zero(), T::zero()),
        };
        for s in 0..n {
            let base = (s * c + ch) * inner;
            for i in base..base + inner {
                dx.data_mut()[i] =
                    scale * (grad_out.data()[i] - mean_dy - ctx.xhat.data()[i] * mean_dyx);
            }
        }
    }
    Ok(dx)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

pub struct BatchNormOutput<T> {
    pub output: Tensor<T>,
    pub ctx: BatchNormCtx<T>,
    /// Updated running statistics (training mode only).
    pub running: Option<RunningStats<T>>,
    /// Batch mean and biased variance actually used (training mode only).
    pub batch_stats: Option<(Vec<f64>, Vec<f64>)>,
}

/// Batch statistics of a single shard: per-channel mean and biased variance.
pub fn batch_statistics<T: Real>(input: &Tensor<T>) -> Result<(Vec<f64>, Vec<f64>)> {
    let sums = channel_sums(input)?;
    if sums.count < 2 {
        return Err(Error::Statistics(format!(
            "training-mode batch norm needs at least 2 elements per channel, got {}",
            sums.count
        )));
    }
    let mean: Vec<f64> = sums.sum.iter().map(|s| s / sums.count as f64).collect();
    let var = channel_centered_squares(input, &mean)?
        .into_iter()
        .map(|s| s / sums.count as f64)
        .collect();
    Ok((mean, var))
}

pub fn update_running<T: Real>(
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    mean: &[f64],
    var: &[f64],
    momentum: f64,
) -> RunningStats<T> {
    let blend = |old: &Tensor<T>, new: &[f64]| {
        Tensor::from_fn(old.shape(), |i| {
            T::of((1.0 - momentum) * old.data()[i].f64() + momentum * new[i])
        })
    };
    RunningStats {
        mean: blend(running_mean, mean),
        var: blend(running_var, var),
    }
}

/// Single-shard batch normalization.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm2d<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    mode: BnMode,
    momentum: f64,
    eps: f64,
) -> Result<BatchNormOutput<T>> {
    match mode {
        BnMode::Train => {
            let (mean, var) = batch_statistics(input)?;
            let (output, ctx) = batchnorm_apply(input, &mean, &var, gamma, beta, eps, mode)?;
            let running = update_running(running_mean, running_var, &mean, &var, momentum);
            Ok(BatchNormOutput {
                output,
                ctx,
                running: Some(running),
                batch_stats: Some((mean, var)),
            })
        }
        BnMode::Eval => {
            let mean: Vec<f64> = running_mean.data().iter().map(|v| v.f64()).collect();
            let var: Vec<f64> = running_var.data().iter().map(|v| v.f64()).collect();
            let (output, ctx) = batchnorm_apply(input, &mean, &var, gamma, beta, eps, mode)?;
            Ok(BatchNormOutput {
                output,
                ctx,
                running: None,
                batch_stats: None,
            })
        }
    }
}

pub fn batchnorm2d_backward<T: Real>(
    ctx: BatchNormCtx<T>,
    grad_out: &Tensor<T>,
) -> Result<BatchNormGrads<T>> {
    let (sum_dy, sum_dy_xhat) = batchnorm_grad_sums(&ctx, grad_out)?;
    let count = grad_out.len() / ctx.gamma.len().max(1);
    let input = batchnorm_input_grad(&ctx, grad_out, &sum_dy, &sum_dy_xhat, count)?;
    Ok(BatchNormGrads {
        input,
        gamma: Tensor::from_fn(&[sum_dy.len()], |i| T::of(sum_dy_xhat[i])),
        beta: Tensor::from_fn(&[sum_dy.len()], |i| T::of(sum_dy[i])),
    })
}

// ---------------------------------------------------------------- relu

pub struct ReluCtx {
    mask: Vec<bool>,
}

pub fn relu<T: Real>(input: &Tensor<T>) -> (Tensor<T>, ReluCtx) {
    let mask: Vec<bool> = input.data().iter().map(|&v| v > T::zero()).collect();
    let out = Tensor::from_fn(input.shape(), |i| {
        if mask[i] {
            input.data()[i]
        } else {
            T::zero()
        }
    });
    (out, ReluCtx { mask })
}

pub fn relu_backward<T: Real>(ctx: ReluCtx, grad_out: &Tensor<T>) -> Tensor<T> {
    Tensor::from_fn(grad_out.shape(), |i| {
        if ctx.mask[i] {
            grad_out.data()[i]
        } else {
            T::zero()
        }
    })
}

// ---------------------------------------------------------------- dense

pub struct DenseCtx<T> {
    input: Tensor<T>,
}

pub struct DenseGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Affine map `x·W + b` with `x: N×I`, `W: I×O`, `b: O`.
pub fn dense<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(Tensor<T>, DenseCtx<T>)> {
    let (n, i_dim) = input.dims2()?;
    let (wi, o) = weight.dims2()?;
    if wi != i_dim || bias.shape() != [o] {
        return Err(Error::Shape(format!(
            "dense: input {:?} needs weight [{i_dim}, O] and bias [O]; got {:?}, {:?}",
            input.shape(),
            weight.shape(),
            bias.shape()
        )));
    }
    let mut out = Tensor::zeros(&[n, o]);
    for r in 0..n {
        let x = input.row(r);
        let dst = &mut out.data_mut()[r * o..(r + 1) * o];
        dst.copy_from_slice(bias.data());
        for (ii, &xv) in x.iter().enumerate() {
            let wrow = &weight.data()[ii * o..(ii + 1) * o];
            for (d, &wv) in dst.iter_mut().zip(wrow) {
                *d += xv * wv;
            }
        }
    }
    Ok((
        out,
        DenseCtx {
            input: input.clone(),
        },
    ))
}

pub fn dense_backward<T: Real>(
    ctx: DenseCtx<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<DenseGrads<T>> {
    let (n, i_dim) = ctx.input.dims2()?;
    let (_, o) = weight.dims2()?;
    if grad_out.shape() != [n, o] {
        return Err(Error::Shape(format!(
            "dense backward: expected upstream [{n}, {o}], got {:?}",
            grad_out.shape()
        )));
    }
    let mut dx = Tensor::zeros(&[n, i_dim]);
    let mut dw = Tensor::zeros(&[i_dim, o]);
    let mut db = Tensor::zeros(&[o]);
    for r in 0..n {
        let x = ctx.input.row(r);
        let g = grad_out.row(r);
        for (d, &gv) in db.data_mut().iter_mut().zip(g) {
            *d += gv;
        }
        for (ii, &xv) in x.iter().enumerate() {
            let wrow = &weight.data()[ii * o..(ii + 1) * o];
            let mut acc = T::zero();
            for (&wv, &gv) in wrow.iter().zip(g) {
                acc += wv * gv;
            }
            dx.data_mut()[r * i_dim + ii] = acc;
            let dwrow = &mut dw.data_mut()[ii * o..(ii + 1) * o];
            for (d, &gv) in dwrow.iter_mut().zip(g) {
                *d += xv * gv;
            }
        }
    }
    Ok(DenseGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}

// ---------------------------------------------------------------- global average pooling

pub struct GapCtx {
    input_shape: Vec<usize>,
}

pub fn global_avg_pool<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, GapCtx)> {
    let (n, c, h, w) = input.dims4()?;
    if h == 0 || w == 0 {
        return Err(Error::Shape("global_avg_pool: empty spatial extent".into()));
    }
    let hw = h * w;
    let out = Tensor::from_fn(&[n, c], |i| {
        let plane = &input.data()[i * hw..(i + 1) * hw];
        plane.iter().copied().sum::<T>() / T::of(hw as f64)
    });
    Ok((
        out,
        GapCtx {
            input_shape: input.shape().to_vec(),
        },
    ))
}

pub fn global_avg_pool_backward<T: Real>(ctx: GapCtx, grad_out: &Tensor<T>) -> Tensor<T> {
    let hw: usize = ctx.input_shape[2..].iter().product();
    let inv = T::of(1.0 / hw as f64);
    Tensor::from_fn(&ctx.input_shape, |i| grad_out.data()[i / hw] * inv)
}

// ---------------------------------------------------------------- l2 normalize

pub struct L2NormCtx<T> {
    output: Tensor<T>,
    denom: Vec<T>,
    clamped: Vec<bool>,
}

/// Divides each row by `max(‖row‖₂, eps)`.
pub fn l2_normalize<T: Real>(input: &Tensor<T>, eps: f64) -> Result<(Tensor<T>, L2NormCtx<T>)> {
    let (n, d) = input.dims2()?;
    let mut out = Tensor::zeros(&[n, d]);
    let mut denom = Vec::with_capacity(n);
    let mut clamped = Vec::with_capacity(n);
    for r in 0..n {
        let row = input.row(r);
        let norm = row.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt();
        let (den, cl) = if norm >= eps { (norm, false) } else { (eps, true) };
        let den_t = T::of(den);
        for (o, &v) in out.data_mut()[r * d..(r + 1) * d].iter_mut().zip(row) {
            *o = v / den_t;
        }
        denom.push(den_t);
        clamped.push(cl);
    }
    Ok((
        out.clone(),
        L2NormCtx {
            output: out,
            denom,
            clamped,
        },
    ))
}

pub fn l2_normalize_backward<T: Real>(ctx: L2NormCtx<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = ctx.output.dims2()?;
    if grad_out.shape() != [n, d] {
        return Err(Error::Shape(format!(
            "l2_normalize backward: expected upstream [{n}, {d}], got {:?}",
            grad_out.shape()
        )));
    }
    let mut dx = Tensor::zeros(&[n, d]);
    for r in 0..n {
        let y = ctx.output.row(r);
        let g = grad_out.row(r);
        let den = ctx.denom[r];
        let dst = &mut dx.data_mut()[r * d..(r + 1) * d];
        if ctx.clamped[r] {
            for (o, &gv) in dst.iter_mut().zip(g) {
                *o = gv / den;
            }
        } else {
            let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
            for ((o, &gv), &yv) in dst.iter_mut().zip(g).zip(y) {
                *o = (gv - yv * dot) / den;
            }
        }
    }
    Ok(dx)
}
