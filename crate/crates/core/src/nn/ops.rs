use rand::RngCore;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::seed;

// ---------------------------------------------------------------------------
// conv2d: stride 1, same padding, odd kernels. Implemented as im2col + GEMM.
// ---------------------------------------------------------------------------

fn conv_dims<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    let (n, c, h, wd) = x.dims4("conv2d")?;
    let (o, wc, kh, kw) = w.dims4("conv2d")?;
    if wc != c {
        return Err(Error::shape("conv2d", format!("input has {c} channels, kernel expects {wc}")));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::shape("conv2d", format!("kernel {kh}×{kw} must be odd")));
    }
    Ok((n, c, h, wd, o, kh, kw))
}

/// Unfold one sample `[C, H, W]` into `[C·kh·kw, H·W]`.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, kh: usize, kw: usize, cols: &mut [T]) {
    let hw = h * w;
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - ph;
                let dx = kx as isize - pw;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                for yy in 0..h {
                    let sy = yy as isize + dy;
                    let out = &mut dst[yy * w..(yy + 1) * w];
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    out[..x0].fill(T::zero());
                    out[x1..].fill(T::zero());
                    let s0 = (x0 as isize + dx) as usize;
                    out[x0..x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                }
            }
        }
    }
}

/// Fold `[C·kh·kw, H·W]` back into `[C, H, W]`, accumulating overlaps.
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, kh: usize, kw: usize, x: &mut [T]) {
    let hw = h * w;
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - ph;
                let dx = kx as isize - pw;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for yy in 0..h {
                    let sy = yy as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = (x0 as isize + dx) as usize;
                    let dst = &mut plane[sy as usize * w + s0..sy as usize * w + s0 + (x1 - x0)];
                    for (d, s) in dst.iter_mut().zip(&src[yy * w + x0..yy * w + x1]) {
                        *d = *d + *s;
                    }
                }
            }
        }
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes.
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Cross-correlation with zero "same" padding: `N×C×H×W` * `O×C×kh×kw` → `N×O×H×W`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (n, c, h, wd, o, kh, kw) = conv_dims(x, w)?;
    if let Some(b) = bias {
        if b.shape() != [o] {
            return Err(Error::shape("conv2d", format!("bias {:?} for {o} outputs", b.shape())));
        }
    }
    let hw = h * wd;
    let ck = c * kh * kw;
    let mut y = Tensor::zeros(&[n, o, h, wd]);
    let mut cols = vec![T::zero(); ck * hw];
    for ni in 0..n {
        im2col(&x.data()[ni * c * hw..(ni + 1) * c * hw], c, h, wd, kh, kw, &mut cols);
        let out = &mut y.data_mut()[ni * o * hw..(ni + 1) * o * hw];
        if let Some(b) = bias {
            for (oi, plane) in out.chunks_mut(hw).enumerate() {
                plane.fill(b.data()[oi]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(o, ck, hw, T::one(), w.data(), ck as isize, 1, &cols, hw as isize, 1, beta, out, hw as isize, 1);
    }
    Ok(y)
}

pub struct Conv2dGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, dy: &Tensor<T>) -> Result<Conv2dGrads<T>> {
    let (n, c, h, wd, o, kh, kw) = conv_dims(x, w)?;
    if dy.shape() != [n, o, h, wd] {
        return Err(Error::shape("conv2d_backward", format!("upstream {:?}", dy.shape())));
    }
    let hw = h * wd;
    let ck = c * kh * kw;
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[o]);
    let mut cols = vec![T::zero(); ck * hw];
    let mut dcols = vec![T::zero(); ck * hw];
    for ni in 0..n {
        let g = &dy.data()[ni * o * hw..(ni + 1) * o * hw];
        im2col(&x.data()[ni * c * hw..(ni + 1) * c * hw], c, h, wd, kh, kw, &mut cols);
        // dW += dY · colsᵀ; the reduction runs over the long spatial axis,
        // where lane-split dot products beat a packed GEMM.
        for (oi, grow) in g.chunks_exact(hw).enumerate() {
            let dst = &mut dw.data_mut()[oi * ck..(oi + 1) * ck];
            for (kk, d) in dst.iter_mut().enumerate() {
                *d = *d + dot(grow, &cols[kk * hw..(kk + 1) * hw]);
            }
        }
        // dcols = Wᵀ · dY
        T::gemm(ck, o, hw, T::one(), w.data(), 1, ck as isize, g, hw as isize, 1, T::zero(), &mut dcols, hw as isize, 1);
        col2im(&dcols, c, h, wd, kh, kw, &mut dx.data_mut()[ni * c * hw..(ni + 1) * c * hw]);
        for (oi, plane) in g.chunks(hw).enumerate() {
            db.data_mut()[oi] = db.data()[oi] + plane.iter().copied().sum();
        }
    }
    Ok(Conv2dGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}

// ---------------------------------------------------------------------------
// Pointwise
// ---------------------------------------------------------------------------

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Gradient passes where the input was strictly positive.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(x.shape(), data).unwrap()
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    // exp overflow gives 1/inf = 0, so no branch is needed.
    x.map(|v| T::one() / (T::one() + (-v).exp()))
}

/// Backward from the sigmoid output `y`.
pub fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&s, &g)| g * s * (T::one() - s))
        .collect();
    Tensor::from_vec(y.shape(), data).unwrap()
}

pub fn elementwise_mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("mul", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::from_vec(a.shape(), data)
}

/// Returns `(da, db)`.
pub fn elementwise_mul_backward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, dy: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    Ok((elementwise_mul(dy, b)?, elementwise_mul(dy, a)?))
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("add", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::from_vec(a.shape(), data)
}

// ---------------------------------------------------------------------------
// Batch norm over (N, H, W) per channel
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Biased batch variance.
    pub var: Vec<T>,
    /// Elements per channel (N·H·W).
    pub count: usize,
}

impl<T: Scalar> BatchNormCache<T> {
    pub fn unbiased_var(&self) -> Vec<T> {
        let m = T::of(self.count as f64);
        let corr = if self.count > 1 { m / (m - T::one()) } else { T::one() };
        self.var.iter().map(|&v| v * corr).collect()
    }
}

fn check_channel_params<T: Scalar>(c: usize, ps: &[&Tensor<T>]) -> Result<()> {
    for p in ps {
        if p.shape() != [c] {
            return Err(Error::shape("batch_norm", format!("parameter {:?} for {c} channels", p.shape())));
        }
    }
    Ok(())
}

/// Normalize with batch statistics.
pub fn batch_norm_train<T: Scalar>(x: &Tensor<T>, scale: &Tensor<T>, offset: &Tensor<T>, eps: f64) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let (n, c, h, w) = x.dims4("batch_norm")?;
    check_channel_params(c, &[scale, offset])?;
    if n < 2 {
        return Err(Error::DegenerateBatch(n));
    }
    let hw = h * w;
    let count = n * hw;
    let cnt = T::of(count as f64);
    let eps = T::of(eps);
    let xd = x.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ci in 0..c {
        let mut s = T::zero();
        for ni in 0..n {
            s = s + xd[(ni * c + ci) * hw..(ni * c + ci + 1) * hw].iter().copied().sum();
        }
        let mu = s / cnt;
        let mut v = T::zero();
        for ni in 0..n {
            v = v + xd[(ni * c + ci) * hw..(ni * c + ci + 1) * hw]
                .iter()
                .map(|&e| (e - mu) * (e - mu))
                .sum();
        }
        mean[ci] = mu;
        var[ci] = v / cnt;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    for ni in 0..n {
        for ci in 0..c {
            let r = (ni * c + ci) * hw..(ni * c + ci + 1) * hw;
            let (g, b, mu, is) = (scale.data()[ci], offset.data()[ci], mean[ci], inv_std[ci]);
            for i in r {
                let v = (xd[i] - mu) * is;
                xhat.data_mut()[i] = v;
                y.data_mut()[i] = g * v + b;
            }
        }
    }
    Ok((
        y,
        BatchNormCache {
            xhat,
            inv_std,
            mean,
            var,
            count,
        },
    ))
}

/// Normalize with running statistics.
pub fn batch_norm_eval<T: Scalar>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    offset: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("batch_norm")?;
    check_channel_params(c, &[scale, offset, running_mean, running_var])?;
    let hw = h * w;
    let eps = T::of(eps);
    let mut y = Tensor::zeros(x.shape());
    for ni in 0..n {
        for ci in 0..c {
            let is = T::one() / (running_var.data()[ci] + eps).sqrt();
            let (g, b, mu) = (scale.data()[ci], offset.data()[ci], running_mean.data()[ci]);
            for i in (ni * c + ci) * hw..(ni * c + ci + 1) * hw {
                y.data_mut()[i] = g * (x.data()[i] - mu) * is + b;
            }
        }
    }
    Ok(y)
}

/// Mode-dispatching batch norm. In train mode the running statistics are
/// blended toward the batch statistics with `momentum`.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm<T: Scalar>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    offset: &Tensor<T>,
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    mode: NormMode,
    momentum: f64,
    eps: f64,
) -> Result<(Tensor<T>, Option<BatchNormCache<T>>)> {
    match mode {
        NormMode::Eval => Ok((batch_norm_eval(x, scale, offset, running_mean, running_var, eps)?, None)),
        NormMode::Train => {
            let (y, cache) = batch_norm_train(x, scale, offset, eps)?;
            update_running_stats(running_mean, running_var, &cache.mean, &cache.unbiased_var(), momentum);
            Ok((y, Some(cache)))
        }
    }
}

pub fn update_running_stats<T: Scalar>(running_mean: &mut Tensor<T>, running_var: &mut Tensor<T>, mean: &[T], var: &[T], momentum: f64) {
    let m = T::of(momentum);
    let keep = T::one() - m;
    for (r, &b) in running_mean.data_mut().iter_mut().zip(mean) {
        *r = keep * *r + m * b;
    }
    for (r, &b) in running_var.data_mut().iter_mut().zip(var) {
        *r = keep * *r + m * b;
    }
}

pub struct BatchNormGrads<T> {
    pub input: Tensor<T>,
    pub scale: Tensor<T>,
    pub offset: Tensor<T>,
}

/// Exact backward through batch statistics.
pub fn batch_norm_backward<T: Scalar>(cache: &BatchNormCache<T>, scale: &Tensor<T>, dy: &Tensor<T>) -> Result<BatchNormGrads<T>> {
    let (n, c, h, w) = dy.dims4("batch_norm_backward")?;
    let hw = h * w;
    let m = T::of(cache.count as f64);
    let xh = cache.xhat.data();
    let g = dy.data();
    let mut dx = Tensor::zeros(dy.shape());
    let mut dscale = Tensor::zeros(&[c]);
    let mut doffset = Tensor::zeros(&[c]);
    for ci in 0..c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xh = T::zero();
        for ni in 0..n {
            for i in (ni * c + ci) * hw..(ni * c + ci + 1) * hw {
                sum_dy = sum_dy + g[i];
                sum_dy_xh = sum_dy_xh + g[i] * xh[i];
            }
        }
        dscale.data_mut()[ci] = sum_dy_xh;
        doffset.data_mut()[ci] = sum_dy;
        let k = scale.data()[ci] * cache.inv_std[ci] / m;
        for ni in 0..n {
            for i in (ni * c + ci) * hw..(ni * c + ci + 1) * hw {
                dx.data_mut()[i] = k * (m * g[i] - sum_dy - xh[i] * sum_dy_xh);
            }
        }
    }
    Ok(BatchNormGrads {
        input: dx,
        scale: dscale,
        offset: doffset,
    })
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

/// Inverted-dropout mask: each entry is 0 with probability `rate`, else
/// `1 / (1 - rate)`. `None` when the layer is the identity.
pub fn dropout_mask<T: Scalar>(numel: usize, rate: f64, rng_seed: u64) -> Option<Vec<T>> {
    assert!((0.0..1.0).contains(&rate), "dropout rate must lie in [0, 1)");
    if rate == 0.0 {
        return None;
    }
    let keep = T::of(1.0 / (1.0 - rate));
    // Drop when a uniform u32 falls below rate·2³².
    let threshold = (rate * 4_294_967_296.0).round() as u64;
    let mut rng = seed::rng(rng_seed);
    Some(
        (0..numel)
            .map(|_| if (rng.next_u32() as u64) < threshold { T::zero() } else { keep })
            .collect(),
    )
}

pub fn apply_mask<T: Scalar>(x: &Tensor<T>, mask: Option<&[T]>) -> Tensor<T> {
    match mask {
        None => x.clone(),
        Some(m) => {
            let data = x.data().iter().zip(m).map(|(&v, &k)| v * k).collect();
            Tensor::from_vec(x.shape(), data).unwrap()
        }
    }
}

pub fn dropout<T: Scalar>(x: &Tensor<T>, rate: f64, mode: NormMode, rng_seed: u64) -> (Tensor<T>, Option<Vec<T>>) {
    if mode == NormMode::Eval {
        return (x.clone(), None);
    }
    let mask = dropout_mask(x.numel(), rate, rng_seed);
    (apply_mask(x, mask.as_deref()), mask)
}

// ---------------------------------------------------------------------------
// 2×2 max pooling, stride 2, floor semantics
// ---------------------------------------------------------------------------

pub struct PoolCache {
    pub input_shape: Vec<usize>,
    /// Flat input index chosen for each output element.
    pub argmax: Vec<usize>,
}

pub fn maxpool2<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, PoolCache)> {
    let (n, c, h, w) = x.dims4("maxpool2")?;
    if h < 2 || w < 2 {
        return Err(Error::shape("maxpool2", format!("input {h}×{w} is smaller than the 2×2 window")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0usize; n * c * oh * ow];
    let xd = x.data();
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if xd[i] > xd[best] {
                        best = i;
                    }
                }
                let o = (p * oh + oy) * ow + ox;
                y.data_mut()[o] = xd[best];
                argmax[o] = best;
            }
        }
    }
    Ok((
        y,
        PoolCache {
            input_shape: x.shape().to_vec(),
            argmax,
        },
    ))
}

pub fn maxpool2_backward<T: Scalar>(cache: &PoolCache, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(&cache.input_shape);
    for (o, &i) in cache.argmax.iter().enumerate() {
        dx.data_mut()[i] = dx.data()[i] + dy.data()[o];
    }
    dx
}

// ---------------------------------------------------------------------------
// Fully connected and softmax
// ---------------------------------------------------------------------------

/// `x (N×D) · weight (D×K) + bias (K)`.
pub fn linear<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = x.dims2("linear")?;
    let (wd, k) = weight.dims2("linear")?;
    if wd != d || bias.shape() != [k] {
        return Err(Error::shape(
            "linear",
            format!("x {:?}, weight {:?}, bias {:?}", x.shape(), weight.shape(), bias.shape()),
        ));
    }
    let mut y = Tensor::zeros(&[n, k]);
    for row in y.data_mut().chunks_mut(k) {
        row.copy_from_slice(bias.data());
    }
    T::gemm(n, d, k, T::one(), x.data(), d as isize, 1, weight.data(), k as isize, 1, T::one(), y.data_mut(), k as isize, 1);
    Ok(y)
}

pub struct LinearGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn linear_backward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, dy: &Tensor<T>) -> Result<LinearGrads<T>> {
    let (n, d) = x.dims2("linear_backward")?;
    let (_, k) = weight.dims2("linear_backward")?;
    if dy.shape() != [n, k] {
        return Err(Error::shape("linear_backward", format!("upstream {:?}", dy.shape())));
    }
    let mut dx = Tensor::zeros(&[n, d]);
    let mut dw = Tensor::zeros(&[d, k]);
    T::gemm(n, k, d, T::one(), dy.data(), k as isize, 1, weight.data(), 1, k as isize, T::zero(), dx.data_mut(), d as isize, 1);
    T::gemm(d, n, k, T::one(), x.data(), 1, d as isize, dy.data(), k as isize, 1, T::zero(), dw.data_mut(), k as isize, 1);
    let mut db = Tensor::zeros(&[k]);
    for row in dy.data().chunks(k) {
        for (b, &g) in db.data_mut().iter_mut().zip(row) {
            *b = *b + g;
        }
    }
    Ok(LinearGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}

/// Row-wise log-softmax with max subtraction.
pub fn log_softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, k) = logits.dims2("log_softmax")?;
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        row.iter_mut().for_each(|v| *v = *v - lse);
    }
    Ok(out)
}

pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, k) = logits.dims2("softmax")?;
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.iter_mut().for_each(|v| *v = (*v - max).exp());
        let s: T = row.iter().copied().sum();
        row.iter_mut().for_each(|v| *v = *v / s);
    }
    Ok(out)
}
