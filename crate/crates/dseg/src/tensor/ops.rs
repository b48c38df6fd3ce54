//! Differentiable operators: convolution, normalization, activations,
//! pooling, interpolation, and the elementwise glue.
//!
//! Convolution is cross-correlation (no kernel flip) with zero padding.
//! All loops are sequential; outputs are bit-identical across runs.

use super::{maybe_record, Ctx, Elem, Mode, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

fn shape4<T: Elem>(t: &Tensor<T>, what: &str) -> Result<(usize, usize, usize, usize), TensorError> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(TensorError::DimensionMismatch(format!(
            "{what} must be 4-D (N,C,H,W), got {s:?}"
        )));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

/// Unroll one sample into a (C*k*k) x (Ho*Wo) patch matrix.
fn im2col<T: Elem>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    col: &mut [T],
) {
    let m = ho * wo;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut col[row * m..(row + 1) * m];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        for v in &mut dst[oy * wo..(oy + 1) * wo] {
                            *v = T::zero();
                        }
                        continue;
                    }
                    let src_row = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        dst[oy * wo + ox] = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            x[src_row + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add the patch matrix back onto the input plane (adjoint of im2col).
fn col2im<T: Elem>(
    col: &[T],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    x: &mut [T],
) {
    let m = ho * wo;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &col[row * m..(row + 1) * m];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            let d = dst_row + ix as usize;
                            x[d] = x[d] + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn gemm_strided<T: Elem>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
    beta: T,
    c: &mut [T],
) {
    // Route through the row-major kernel by materializing strided operands.
    if (rsa, csa) == (k, 1) && (rsb, csb) == (n, 1) {
        T::gemm(m, k, n, a, b, beta, c);
        return;
    }
    let mut at = vec![T::zero(); m * k];
    for i in 0..m {
        for j in 0..k {
            at[i * k + j] = a[i * rsa + j * csa];
        }
    }
    let mut bt = vec![T::zero(); k * n];
    for i in 0..k {
        for j in 0..n {
            bt[i * n + j] = b[i * rsb + j * csb];
        }
    }
    T::gemm(m, k, n, &at, &bt, beta, c);
}

/// 2-D cross-correlation with zero padding.
///
/// `input` N,C,H,W; `weight` O,C,k,k; `bias` O. Output spatial size is
/// (H + 2*padding - k) / stride + 1.
pub fn conv2d<T: Elem>(
    ctx: &Ctx<'_, T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>, TensorError> {
    let (n, c, h, w) = shape4(input, "conv2d input")?;
    let (o, wc, kh, kw) = shape4(weight, "conv2d weight")?;
    if kh != kw || !matches!(kh, 1 | 3 | 5 | 7) {
        return Err(TensorError::InvalidGeometry(format!(
            "conv2d kernel must be square with size in {{1,3,5,7}}, got {kh}x{kw}"
        )));
    }
    if wc != c {
        return Err(TensorError::DimensionMismatch(format!(
            "conv2d input has {c} channels but weight expects {wc}"
        )));
    }
    if bias.shape() != vec![o] {
        return Err(TensorError::DimensionMismatch(format!(
            "conv2d bias shape {:?} does not match {o} output channels",
            bias.shape()
        )));
    }
    if stride == 0 {
        return Err(TensorError::InvalidGeometry("conv2d stride must be >= 1".into()));
    }
    let k = kh;
    if h + 2 * padding < k || w + 2 * padding < k {
        return Err(TensorError::InvalidGeometry(format!(
            "conv2d output would be empty for {h}x{w} input, kernel {k}, padding {padding}"
        )));
    }
    let ho = (h + 2 * padding - k) / stride + 1;
    let wo = (w + 2 * padding - k) / stride + 1;
    let ckk = c * k * k;
    let m = ho * wo;

    let mut out = vec![T::zero(); n * o * m];
    {
        let x = input.data();
        let wt = weight.data();
        let b = bias.data();
        let mut col = vec![T::zero(); ckk * m];
        for ni in 0..n {
            im2col(&x[ni * c * h * w..], (c, h, w), k, stride, padding, (ho, wo), &mut col);
            let y = &mut out[ni * o * m..(ni + 1) * o * m];
            T::gemm(o, ckk, m, &wt, &col, T::zero(), y);
            for oi in 0..o {
                let bv = b[oi];
                for v in &mut y[oi * m..(oi + 1) * m] {
                    *v = *v + bv;
                }
            }
        }
    }
    let out = Tensor::from_vec(&[n, o, ho, wo], out)?;

    let (xi, wi, bi) = (input.clone(), weight.clone(), bias.clone());
    maybe_record(ctx, &[input, weight, bias], &out, move |dy| {
        let x = xi.to_vec();
        let wt = wi.to_vec();
        let mut dx = vec![T::zero(); x.len()];
        let mut dw = vec![T::zero(); wt.len()];
        let mut db = vec![T::zero(); o];
        let mut col = vec![T::zero(); ckk * m];
        let mut dcol = vec![T::zero(); ckk * m];
        for ni in 0..n {
            let dyn_ = &dy[ni * o * m..(ni + 1) * o * m];
            im2col(&x[ni * c * h * w..], (c, h, w), k, stride, padding, (ho, wo), &mut col);
            // dW += dy . col^T
            gemm_strided(o, m, ckk, dyn_, (m, 1), &col, (1, m), T::one(), &mut dw);
            // dcol = W^T . dy
            gemm_strided(ckk, o, m, &wt, (1, ckk), dyn_, (m, 1), T::zero(), &mut dcol);
            col2im(&dcol, (c, h, w), k, stride, padding, (ho, wo), &mut dx[ni * c * h * w..(ni + 1) * c * h * w]);
            for oi in 0..o {
                for v in &dyn_[oi * m..(oi + 1) * m] {
                    db[oi] = db[oi] + *v;
                }
            }
        }
        xi.accumulate_grad(&dx);
        wi.accumulate_grad(&dw);
        bi.accumulate_grad(&db);
    });
    Ok(out)
}

// ---------------------------------------------------------------------------
// batchnorm2d
// ---------------------------------------------------------------------------

/// Per-channel batch normalization over (N,H,W).
///
/// Train mode normalizes with batch statistics (biased variance) and updates
/// the running buffers in place as `running = (1-momentum)*running +
/// momentum*batch`; eval mode reads the running buffers and is pure.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm2d<T: Elem>(
    ctx: &Ctx<'_, T>,
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    momentum: f64,
    eps: f64,
) -> Result<Tensor<T>, TensorError> {
    let (n, c, h, w) = shape4(input, "batchnorm2d input")?;
    for (t, name) in [(gamma, "gamma"), (beta, "beta"), (running_mean, "running_mean"), (running_var, "running_var")] {
        if t.shape() != vec![c] {
            return Err(TensorError::DimensionMismatch(format!(
                "batchnorm2d {name} shape {:?} does not match {c} channels",
                t.shape()
            )));
        }
    }
    if eps <= 0.0 {
        return Err(TensorError::InvalidValue("batchnorm2d eps must be positive".into()));
    }
    let m = n * h * w;
    let plane = h * w;
    let eps_t = T::from_f64(eps);

    let (mean, inv_std) = match ctx.mode {
        Mode::Train => {
            if m < 2 {
                return Err(TensorError::DegenerateBatch);
            }
            let x = input.data();
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ci in 0..c {
                let mut s = T::zero();
                for ni in 0..n {
                    let base = (ni * c + ci) * plane;
                    for v in &x[base..base + plane] {
                        s = s + *v;
                    }
                }
                let mu = s / T::from_usize(m);
                let mut sq = T::zero();
                for ni in 0..n {
                    let base = (ni * c + ci) * plane;
                    for v in &x[base..base + plane] {
                        let d = *v - mu;
                        sq = sq + d * d;
                    }
                }
                mean[ci] = mu;
                var[ci] = sq / T::from_usize(m);
            }
            drop(x);
            let mom = T::from_f64(momentum);
            let keep = T::one() - mom;
            let mut rm = running_mean.to_vec();
            let mut rv = running_var.to_vec();
            for ci in 0..c {
                rm[ci] = keep * rm[ci] + mom * mean[ci];
                rv[ci] = keep * rv[ci] + mom * var[ci];
            }
            running_mean.set_data(&rm);
            running_var.set_data(&rv);
            let inv_std: Vec<T> = var.iter().map(|v| (*v + eps_t).sqrt().recip()).collect();
            (mean, inv_std)
        }
        Mode::Eval => {
            let mean = running_mean.to_vec();
            let inv_std: Vec<T> =
                running_var.data().iter().map(|v| (*v + eps_t).sqrt().recip()).collect();
            (mean, inv_std)
        }
    };

    let mut out = vec![T::zero(); n * c * plane];
    {
        let x = input.data();
        let g = gamma.data();
        let b = beta.data();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                let scale = g[ci] * inv_std[ci];
                let shift = b[ci] - mean[ci] * scale;
                for i in base..base + plane {
                    out[i] = x[i] * scale + shift;
                }
            }
        }
    }
    let out = Tensor::from_vec(&[n, c, h, w], out)?;

    let (xi, gi, bi) = (input.clone(), gamma.clone(), beta.clone());
    let mode = ctx.mode;
    maybe_record(ctx, &[input, gamma, beta], &out, move |dy| {
        let x = xi.data();
        let g = gi.data();
        let mut dx = vec![T::zero(); x.len()];
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let m_t = T::from_usize(m);
        for ci in 0..c {
            let mu = mean[ci];
            let istd = inv_std[ci];
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for ni in 0..n {
                let base = (ni * c + ci) * plane;
                for i in base..base + plane {
                    let xhat = (x[i] - mu) * istd;
                    sum_dy = sum_dy + dy[i];
                    sum_dy_xhat = sum_dy_xhat + dy[i] * xhat;
                }
            }
            dgamma[ci] = sum_dy_xhat;
            dbeta[ci] = sum_dy;
            let gs = g[ci] * istd;
            match mode {
                Mode::Train => {
                    let mean_dy = sum_dy / m_t;
                    let mean_dy_xhat = sum_dy_xhat / m_t;
                    for ni in 0..n {
                        let base = (ni * c + ci) * plane;
                        for i in base..base + plane {
                            let xhat = (x[i] - mu) * istd;
                            dx[i] = gs * (dy[i] - mean_dy - xhat * mean_dy_xhat);
                        }
                    }
                }
                Mode::Eval => {
                    for ni in 0..n {
                        let base = (ni * c + ci) * plane;
                        for i in base..base + plane {
                            dx[i] = gs * dy[i];
                        }
                    }
                }
            }
        }
        drop(x);
        drop(g);
        xi.accumulate_grad(&dx);
        gi.accumulate_grad(&dgamma);
        bi.accumulate_grad(&dbeta);
    });
    Ok(out)
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

/// PReLU with a single learnable slope shared across all elements.
pub fn prelu<T: Elem>(
    ctx: &Ctx<'_, T>,
    input: &Tensor<T>,
    slope: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    if slope.numel() != 1 {
        return Err(TensorError::DimensionMismatch(format!(
            "prelu slope must be a single scalar, got shape {:?}",
            slope.shape()
        )));
    }
    let a = slope.item();
    let out_data: Vec<T> =
        input.data().iter().map(|&x| if x > T::zero() { x } else { a * x }).collect();
    let out = Tensor::from_vec(&input.shape(), out_data)?;
    let (xi, si) = (input.clone(), slope.clone());
    maybe_record(ctx, &[input, slope], &out, move |dy| {
        let x = xi.data();
        let a = si.item();
        let mut dx = vec![T::zero(); x.len()];
        let mut da = T::zero();
        for i in 0..x.len() {
            if x[i] > T::zero() {
                dx[i] = dy[i];
            } else {
                dx[i] = a * dy[i];
                da = da + x[i] * dy[i];
            }
        }
        drop(x);
        xi.accumulate_grad(&dx);
        si.accumulate_grad(&[da]);
    });
    Ok(out)
}

pub fn relu<T: Elem>(ctx: &Ctx<'_, T>, input: &Tensor<T>) -> Tensor<T> {
    let out_data: Vec<T> = input.data().iter().map(|&x| x.max(T::zero())).collect();
    let out = Tensor::from_vec(&input.shape(), out_data).unwrap();
    let xi = input.clone();
    maybe_record(ctx, &[input], &out, move |dy| {
        let x = xi.data();
        let dx: Vec<T> =
            x.iter().zip(dy).map(|(&x, &g)| if x > T::zero() { g } else { T::zero() }).collect();
        drop(x);
        xi.accumulate_grad(&dx);
    });
    out
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid<T: Elem>(ctx: &Ctx<'_, T>, input: &Tensor<T>) -> Tensor<T> {
    let out_data: Vec<T> = input
        .data()
        .iter()
        .map(|&x| {
            if x >= T::zero() {
                T::one() / (T::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::one() + e)
            }
        })
        .collect();
    let out = Tensor::from_vec(&input.shape(), out_data).unwrap();
    let (xi, oi) = (input.clone(), out.clone());
    maybe_record(ctx, &[input], &out, move |dy| {
        let y = oi.data();
        let dx: Vec<T> = y.iter().zip(dy).map(|(&s, &g)| g * s * (T::one() - s)).collect();
        drop(y);
        xi.accumulate_grad(&dx);
    });
    out
}

// ---------------------------------------------------------------------------
// pooling / reductions
// ---------------------------------------------------------------------------

/// 2x2 max pooling, stride 2. Ties route the gradient to the lowest linear
/// index of the window.
pub fn maxpool2d<T: Elem>(ctx: &Ctx<'_, T>, input: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (n, c, h, w) = shape4(input, "maxpool2d input")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::InvalidGeometry(format!(
            "maxpool2d needs even spatial dims, got {h}x{w}"
        )));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![T::zero(); n * c * ho * wo];
    let mut argmax = vec![0usize; n * c * ho * wo];
    {
        let x = input.data();
        for nc in 0..n * c {
            let base = nc * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best_idx = base + (2 * oy) * w + 2 * ox;
                    let mut best = x[best_idx];
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = nc * ho * wo + oy * wo + ox;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
    }
    let out = Tensor::from_vec(&[n, c, ho, wo], out)?;
    let xi = input.clone();
    let in_len = n * c * h * w;
    maybe_record(ctx, &[input], &out, move |dy| {
        let mut dx = vec![T::zero(); in_len];
        for (o, &idx) in argmax.iter().enumerate() {
            dx[idx] = dx[idx] + dy[o];
        }
        xi.accumulate_grad(&dx);
    });
    Ok(out)
}

/// Per-channel reduction over the spatial plane, to N,C,1,1.
pub fn global_pool<T: Elem>(
    ctx: &Ctx<'_, T>,
    input: &Tensor<T>,
    kind: PoolKind,
) -> Result<Tensor<T>, TensorError> {
    let (n, c, h, w) = shape4(input, "global_pool input")?;
    let plane = h * w;
    let mut out = vec![T::zero(); n * c];
    let mut argmax = vec![0usize; n * c];
    {
        let x = input.data();
        for nc in 0..n * c {
            let base = nc * plane;
            match kind {
                PoolKind::Avg => {
                    let mut s = T::zero();
                    for v in &x[base..base + plane] {
                        s = s + *v;
                    }
                    out[nc] = s / T::from_usize(plane);
                }
                PoolKind::Max => {
                    let mut best = x[base];
                    let mut bi = base;
                    for i in base + 1..base + plane {
                        if x[i] > best {
                            best = x[i];
                            bi = i;
                        }
                    }
                    out[nc] = best;
                    argmax[nc] = bi;
                }
            }
        }
    }
    let out = Tensor::from_vec(&[n, c, 1, 1], out)?;
    let xi = input.clone();
    let in_len = n * c * plane;
    maybe_record(ctx, &[input], &out, move |dy| {
        let mut dx = vec![T::zero(); in_len];
        match kind {
            PoolKind::Avg => {
                let inv = T::from_usize(plane).recip();
                for nc in 0..n * c {
                    let g = dy[nc] * inv;
                    for v in &mut dx[nc * plane..(nc + 1) * plane] {
                        *v = g;
                    }
                }
            }
            PoolKind::Max => {
                for nc in 0..n * c {
                    dx[argmax[nc]] = dy[nc];
                }
            }
        }
        xi.accumulate_grad(&dx);
    });
    Ok(out)
}

/// Reduction over the channel axis, to N,1,H,W.
pub fn channel_reduce<T: Elem>(
    ctx: &Ctx<'_, T>,
    input: &Tensor<T>,
    kind: PoolKind,
) -> Result<Tensor<T>, TensorError> {
    let (n, c, h, w) = shape4(input, "channel_reduce input")?;
    let plane = h * w;
    let mut out = vec![T::zero(); n * plane];
    let mut argmax = vec![0usize; n * plane];
    {
        let x = input.data();
        for ni in 0..n {
            for p in 0..plane {
                let idx0 = ni * c * plane + p;
                match kind {
                    PoolKind::Avg => {
                        let mut s = T::zero();
                        for ci in 0..c {
                            s = s + x[idx0 + ci * plane];
                        }
                        out[ni * plane + p] = s / T::from_usize(c);
                    }
                    PoolKind::Max => {
                        let mut best = x[idx0];
                        let mut bi = idx0;
                        for ci in 1..c {
                            let i = idx0 + ci * plane;
                            if x[i] > best {
                                best = x[i];
                                bi = i;
                            }
                        }
                        out[ni * plane + p] = best;
                        argmax[ni * plane + p] = bi;
                    }
                }
            }
        }
    }
    let out = Tensor::from_vec(&[n, 1, h, w], out)?;
    let xi = input.clone();
    let in_len = n * c * plane;
    maybe_record(ctx, &[input], &out, move |dy| {
        let mut dx = vec![T::zero(); in_len];
        match kind {
            PoolKind::Avg => {
                let inv = T::from_usize(c).recip();
                for ni in 0..n {
                    for p in 0..plane {
                        let g = dy[ni * plane + p] * inv;
                        for ci in 0..c {
                            dx[ni * c * plane + ci * plane + p] = g;
                        }
                    }
                }
            }
            PoolKind::Max => {
                for (o, &idx) in argmax.iter().enumerate() {
                    dx[idx] = dx[idx] + dy[o];
                }
            }
        }
        xi.accumulate_grad(&dx);
    });
    Ok(out)
}

// ---------------------------------------------------------------------------
// bilinear upsampling
// ---------------------------------------------------------------------------

/// Interpolation taps for one axis at scale factor 2, half-pixel centers.
fn bilinear_taps(in_len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * in_len)
        .map(|o| {
            let pos = (o as f64 + 0.5) / 2.0 - 0.5;
            let i0 = pos.floor();
            let frac = pos - i0;
            let lo = (i0.max(0.0) as usize).min(in_len - 1);
            let hi = ((i0 as i64 + 1).max(0) as usize).min(in_len - 1);
            (lo, hi, frac)
        })
        .collect()
}

/// Parameter-free 2x bilinear upsampling (align_corners=false convention).
/// Backward is the transpose of the fixed interpolation map.
pub fn bilinear_upsample2x<T: Elem>(
    ctx: &Ctx<'_, T>,
    input: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let (n, c, h, w) = shape4(input, "bilinear_upsample2x input")?;
    let (ho, wo) = (2 * h, 2 * w);
    let ty = bilinear_taps(h);
    let tx = bilinear_taps(w);
    let mut out = vec![T::zero(); n * c * ho * wo];
    {
        let x = input.data();
        for nc in 0..n * c {
            let base = nc * h * w;
            let obase = nc * ho * wo;
            for oy in 0..ho {
                let (y0, y1, fy) = ty[oy];
                let fy = T::from_f64(fy);
                for ox in 0..wo {
                    let (x0, x1, fx) = tx[ox];
                    let fx = T::from_f64(fx);
                    let top = x[base + y0 * w + x0] * (T::one() - fx) + x[base + y0 * w + x1] * fx;
                    let bot = x[base + y1 * w + x0] * (T::one() - fx) + x[base + y1 * w + x1] * fx;
                    out[obase + oy * wo + ox] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
    }
    let out = Tensor::from_vec(&[n, c, ho, wo], out)?;
    let xi = input.clone();
    maybe_record(ctx, &[input], &out, move |dy| {
        let mut dx = vec![T::zero(); n * c * h * w];
        for nc in 0..n * c {
            let base = nc * h * w;
            let obase = nc * ho * wo;
            for oy in 0..ho {
                let (y0, y1, fy) = ty[oy];
                let fy = T::from_f64(fy);
                for ox in 0..wo {
                    let (x0, x1, fx) = tx[ox];
                    let fx = T::from_f64(fx);
                    let g = dy[obase + oy * wo + ox];
                    dx[base + y0 * w + x0] =
                        dx[base + y0 * w + x0] + g * (T::one() - fy) * (T::one() - fx);
                    dx[base + y0 * w + x1] = dx[base + y0 * w + x1] + g * (T::one() - fy) * fx;
                    dx[base + y1 * w + x0] = dx[base + y1 * w + x0] + g * fy * (T::one() - fx);
                    dx[base + y1 * w + x1] = dx[base + y1 * w + x1] + g * fy * fx;
                }
            }
        }
        xi.accumulate_grad(&dx);
    });
    Ok(out)
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

/// Channel concatenation, a-then-b order.
pub fn concat_channels<T: Elem>(
    ctx: &Ctx<'_, T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let (na, ca, ha, wa) = shape4(a, "concat_channels a")?;
    let (nb, cb, hb, wb) = shape4(b, "concat_channels b")?;
    if (na, ha, wa) != (nb, hb, wb) {
        return Err(TensorError::DimensionMismatch(format!(
            "concat_channels spatial/batch mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let plane = ha * wa;
    let co = ca + cb;
    let mut out = vec![T::zero(); na * co * plane];
    {
        let ad = a.data();
        let bd = b.data();
        for ni in 0..na {
            out[ni * co * plane..ni * co * plane + ca * plane]
                .copy_from_slice(&ad[ni * ca * plane..(ni + 1) * ca * plane]);
            out[ni * co * plane + ca * plane..(ni + 1) * co * plane]
                .copy_from_slice(&bd[ni * cb * plane..(ni + 1) * cb * plane]);
        }
    }
    let out = Tensor::from_vec(&[na, co, ha, wa], out)?;
    let (ai, bi) = (a.clone(), b.clone());
    maybe_record(ctx, &[a, b], &out, move |dy| {
        let mut da = vec![T::zero(); na * ca * plane];
        let mut db = vec![T::zero(); nb * cb * plane];
        for ni in 0..na {
            da[ni * ca * plane..(ni + 1) * ca * plane]
                .copy_from_slice(&dy[ni * co * plane..ni * co * plane + ca * plane]);
            db[ni * cb * plane..(ni + 1) * cb * plane]
                .copy_from_slice(&dy[ni * co * plane + ca * plane..(ni + 1) * co * plane]);
        }
        ai.accumulate_grad(&da);
        bi.accumulate_grad(&db);
    });
    Ok(out)
}

/// View with a new shape (same element count).
pub fn reshape<T: Elem>(
    ctx: &Ctx<'_, T>,
    input: &Tensor<T>,
    new_shape: &[usize],
) -> Result<Tensor<T>, TensorError> {
    let numel: usize = new_shape.iter().product();
    if numel != input.numel() {
        return Err(TensorError::DimensionMismatch(format!(
            "reshape {:?} -> {new_shape:?} changes element count",
            input.shape()
        )));
    }
    let out = Tensor::from_vec(new_shape, input.to_vec())?;
    let xi = input.clone();
    maybe_record(ctx, &[input], &out, move |dy| {
        xi.accumulate_grad(dy);
    });
    Ok(out)
}

// ---------------------------------------------------------------------------
// linear
// ---------------------------------------------------------------------------

/// Affine map y = x W^T + b with x: N,Cin; W: Cout,Cin; b: Cout.
pub fn linear<T: Elem>(
    ctx: &Ctx<'_, T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let xs = input.shape();
    let ws = weight.shape();
    if xs.len() != 2 || ws.len() != 2 {
        return Err(TensorError::DimensionMismatch(format!(
            "linear expects 2-D input and weight, got {xs:?} and {ws:?}"
        )));
    }
    let (n, cin) = (xs[0], xs[1]);
    let (cout, wcin) = (ws[0], ws[1]);
    if cin != wcin {
        return Err(TensorError::DimensionMismatch(format!(
            "linear inner dimension mismatch: input {cin} vs weight {wcin}"
        )));
    }
    if bias.shape() != vec![cout] {
        return Err(TensorError::DimensionMismatch(format!(
            "linear bias shape {:?} does not match {cout} outputs",
            bias.shape()
        )));
    }
    let mut out = vec![T::zero(); n * cout];
    {
        let x = input.data();
        let w = weight.data();
        let b = bias.data();
        // y = x . W^T
        gemm_strided(n, cin, cout, &x, (cin, 1), &w, (1, cin), T::zero(), &mut out);
        for ni in 0..n {
            for co in 0..cout {
                out[ni * cout + co] = out[ni * cout + co] + b[co];
            }
        }
    }
    let out = Tensor::from_vec(&[n, cout], out)?;
    let (xi, wi, bi) = (input.clone(), weight.clone(), bias.clone());
    maybe_record(ctx, &[input, weight, bias], &out, move |dy| {
        let x = xi.to_vec();
        let w = wi.to_vec();
        let mut dx = vec![T::zero(); n * cin];
        let mut dw = vec![T::zero(); cout * cin];
        let mut db = vec![T::zero(); cout];
        // dx = dy . W
        T::gemm(n, cout, cin, dy, &w, T::zero(), &mut dx);
        // dW = dy^T . x
        gemm_strided(cout, n, cin, dy, (1, cout), &x, (cin, 1), T::zero(), &mut dw);
        for ni in 0..n {
            for co in 0..cout {
                db[co] = db[co] + dy[ni * cout + co];
            }
        }
        xi.accumulate_grad(&dx);
        wi.accumulate_grad(&dw);
        bi.accumulate_grad(&db);
    });
    Ok(out)
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

/// Elementwise sum of two equally shaped tensors.
pub fn add<T: Elem>(
    ctx: &Ctx<'_, T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::DimensionMismatch(format!(
            "add shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let out_data: Vec<T> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x + y).collect();
    let out = Tensor::from_vec(&a.shape(), out_data)?;
    let (ai, bi) = (a.clone(), b.clone());
    maybe_record(ctx, &[a, b], &out, move |dy| {
        ai.accumulate_grad(dy);
        bi.accumulate_grad(dy);
    });
    Ok(out)
}

/// Elementwise product of two equally shaped tensors.
pub fn mul<T: Elem>(
    ctx: &Ctx<'_, T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::DimensionMismatch(format!(
            "mul shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let out_data: Vec<T> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x * y).collect();
    let out = Tensor::from_vec(&a.shape(), out_data)?;
    let (ai, bi) = (a.clone(), b.clone());
    maybe_record(ctx, &[a, b], &out, move |dy| {
        let da: Vec<T> = bi.data().iter().zip(dy).map(|(&y, &g)| y * g).collect();
        let db: Vec<T> = ai.data().iter().zip(dy).map(|(&x, &g)| x * g).collect();
        ai.accumulate_grad(&da);
        bi.accumulate_grad(&db);
    });
    Ok(out)
}

/// Broadcast multiply: x (N,C,H,W) scaled by s of shape (N,C,1,1) or
/// (N,1,H,W). The scale gradient sums over its broadcast footprint.
pub fn mul_broadcast<T: Elem>(
    ctx: &Ctx<'_, T>,
    x: &Tensor<T>,
    scale: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let (n, c, h, w) = shape4(x, "mul_broadcast input")?;
    let ss = scale.shape();
    let channel_wise = ss == vec![n, c, 1, 1];
    let spatial_wise = ss == vec![n, 1, h, w];
    if !channel_wise && !spatial_wise {
        return Err(TensorError::DimensionMismatch(format!(
            "mul_broadcast scale shape {ss:?} not broadcastable over {:?}",
            x.shape()
        )));
    }
    let plane = h * w;
    let mut out = vec![T::zero(); n * c * plane];
    {
        let xd = x.data();
        let sd = scale.data();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                for p in 0..plane {
                    let s = if channel_wise { sd[ni * c + ci] } else { sd[ni * plane + p] };
                    out[base + p] = xd[base + p] * s;
                }
            }
        }
    }
    let out = Tensor::from_vec(&[n, c, h, w], out)?;
    let (xi, si) = (x.clone(), scale.clone());
    maybe_record(ctx, &[x, scale], &out, move |dy| {
        let xd = xi.data();
        let sd = si.data();
        let mut dx = vec![T::zero(); xd.len()];
        let mut ds = vec![T::zero(); sd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                for p in 0..plane {
                    let (si_idx, s) = if channel_wise {
                        (ni * c + ci, sd[ni * c + ci])
                    } else {
                        (ni * plane + p, sd[ni * plane + p])
                    };
                    dx[base + p] = dy[base + p] * s;
                    ds[si_idx] = ds[si_idx] + dy[base + p] * xd[base + p];
                }
            }
        }
        drop(xd);
        drop(sd);
        xi.accumulate_grad(&dx);
        si.accumulate_grad(&ds);
    });
    Ok(out)
}

/// Elementwise a*x + b with scalar constants.
pub fn affine<T: Elem>(ctx: &Ctx<'_, T>, input: &Tensor<T>, a: f64, b: f64) -> Tensor<T> {
    let (at, bt) = (T::from_f64(a), T::from_f64(b));
    let out_data: Vec<T> = input.data().iter().map(|&x| at * x + bt).collect();
    let out = Tensor::from_vec(&input.shape(), out_data).unwrap();
    let xi = input.clone();
    maybe_record(ctx, &[input], &out, move |dy| {
        let dx: Vec<T> = dy.iter().map(|&g| at * g).collect();
        xi.accumulate_grad(&dx);
    });
    out
}

/// Sum of all elements, as a scalar tensor.
pub fn sum_all<T: Elem>(ctx: &Ctx<'_, T>, input: &Tensor<T>) -> Tensor<T> {
    let s = input.data().iter().fold(T::zero(), |acc, &v| acc + v);
    let out = Tensor::scalar(s);
    let xi = input.clone();
    let n = input.numel();
    maybe_record(ctx, &[input], &out, move |dy| {
        xi.accumulate_grad(&vec![dy[0]; n]);
    });
    out
}
