use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// `out = op(a)·op(b) + beta·out`. Shapes must already be validated.
pub(crate) fn gemm_into<F: Scalar>(
    a: &Tensor<F>,
    trans_a: bool,
    b: &Tensor<F>,
    trans_b: bool,
    beta: F,
    out: &mut Tensor<F>,
) {
    let (ar, ac) = (a.shape[0], a.shape[1]);
    let (br, bc) = (b.shape[0], b.shape[1]);
    let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
    let n = if trans_b { br } else { bc };
    debug_assert_eq!(out.shape, [m, n]);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in out.data.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, ac as isize)
    } else {
        (ac as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, bc as isize)
    } else {
        (bc as isize, 1)
    };
    // SAFETY: strides describe the row-major buffers validated above.
    unsafe {
        F::gemm(
            m,
            k,
            n,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-wise softmax of a matrix.
pub fn softmax_rows<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    if x.shape.len() != 2 {
        return Err(Error::dim("softmax_rows", format!("{:?}", x.shape)));
    }
    x.check_finite("softmax_rows")?;
    let cols = x.shape[1];
    let mut out = x.clone();
    if cols == 0 {
        return Ok(out);
    }
    for row in out.data.chunks_mut(cols) {
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let mut total = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        let inv = F::one() / total;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    Ok(out)
}

pub(crate) fn softmax_rows_backward<F: Scalar>(y: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
    let cols = y.shape[1];
    let mut dx = Tensor::zeros(&y.shape);
    if cols == 0 {
        return dx;
    }
    for ((yr, dyr), dxr) in y
        .data
        .chunks(cols)
        .zip(dy.data.chunks(cols))
        .zip(dx.data.chunks_mut(cols))
    {
        let dot: F = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d = yv * (g - dot);
        }
    }
    dx
}

/// Unfold a `[C, H, W]` image into `[C·9, H·W]` columns for a 3×3 same-padded
/// convolution.
pub(crate) fn im2col3<F: Scalar>(x: &[F], c: usize, h: usize, w: usize) -> Tensor<F> {
    let p = h * w;
    let mut cols = Tensor::zeros(&[c * 9, p]);
    for ci in 0..c {
        let plane = &x[ci * p..(ci + 1) * p];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * p;
                let dst = &mut cols.data[row..row + p];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        dst[y * w + xx] = plane[sy * w + sx as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3`].
pub(crate) fn col2im3<F: Scalar>(cols: &Tensor<F>, c: usize, h: usize, w: usize) -> Vec<F> {
    let p = h * w;
    let mut x = vec![F::zero(); c * p];
    for ci in 0..c {
        let plane = &mut x[ci * p..(ci + 1) * p];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * p;
                let src = &cols.data[row..row + p];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        plane[sy * w + sx as usize] += src[y * w + xx];
                    }
                }
            }
        }
    }
    x
}

/// 3×3 stride-1 same-padded convolution of a `[C, H, W]` image with weights
/// `[Co, C, 3, 3]` and bias `[Co]`.
pub fn conv2d_same<F: Scalar>(x: &Tensor<F>, w: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (c, h, wd) = chw(x, "conv2d")?;
    check_conv_weights(w, b, c)?;
    let cols = im2col3(&x.data, c, h, wd);
    conv_from_cols(&cols, w, b, h, wd)
}

pub(crate) fn check_conv_weights<F: Scalar>(w: &Tensor<F>, b: &Tensor<F>, c: usize) -> Result<()> {
    if w.shape.len() != 4 || w.shape[1] != c || w.shape[2] != 3 || w.shape[3] != 3 {
        return Err(Error::dim(
            "conv2d",
            format!("weights {:?} for {c} input channels", w.shape),
        ));
    }
    if b.shape != [w.shape[0]] {
        return Err(Error::dim("conv2d", format!("bias {:?}", b.shape)));
    }
    Ok(())
}

pub(crate) fn conv_from_cols<F: Scalar>(
    cols: &Tensor<F>,
    w: &Tensor<F>,
    b: &Tensor<F>,
    h: usize,
    wd: usize,
) -> Result<Tensor<F>> {
    let co = w.shape[0];
    let p = h * wd;
    let wm = Tensor {
        shape: vec![co, cols.shape[0]],
        data: w.data.clone(),
    };
    let mut out = Tensor {
        shape: vec![co, p],
        data: Vec::with_capacity(co * p),
    };
    for o in 0..co {
        out.data.extend(std::iter::repeat_n(b.data[o], p));
    }
    gemm_into(&wm, false, cols, false, F::one(), &mut out);
    out.shape = vec![co, h, wd];
    Ok(out)
}

pub(crate) fn chw<F: Scalar>(x: &Tensor<F>, op: &'static str) -> Result<(usize, usize, usize)> {
    match x.shape.as_slice() {
        &[c, h, w] => Ok((c, h, w)),
        other => Err(Error::dim(op, format!("expected [C, H, W], got {other:?}"))),
    }
}

/// Statistics cached by group norm for its backward pass.
#[derive(Clone)]
pub(crate) struct GroupStats<F> {
    pub groups: usize,
    pub xhat: Tensor<F>,
    pub rstd: Vec<F>,
}

pub(crate) const GROUP_NORM_EPS: f64 = 1e-5;

/// Group normalisation over a `[C, ...]` tensor followed by a per-channel affine.
pub fn group_norm<F: Scalar>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    groups: usize,
) -> Result<Tensor<F>> {
    Ok(group_norm_with_stats(x, gamma, beta, groups)?.0)
}

pub(crate) fn group_norm_with_stats<F: Scalar>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    groups: usize,
) -> Result<(Tensor<F>, GroupStats<F>)> {
    let c = *x
        .shape
        .first()
        .ok_or_else(|| Error::dim("group_norm", "scalar input"))?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::dim(
            "group_norm",
            format!("{c} channels into {groups} groups"),
        ));
    }
    if gamma.shape != [c] || beta.shape != [c] {
        return Err(Error::dim(
            "group_norm",
            format!("affine {:?}/{:?} for {c} channels", gamma.shape, beta.shape),
        ));
    }
    let per_channel = x.len() / c.max(1);
    let group_len = per_channel * (c / groups);
    let eps = F::lit(GROUP_NORM_EPS);
    let mut xhat = Tensor::zeros(&x.shape);
    let mut rstd = Vec::with_capacity(groups);
    for g in 0..groups {
        let span = g * group_len..(g + 1) * group_len;
        let xs = &x.data[span.clone()];
        let n = F::lit(group_len as f64);
        let mean = xs.iter().copied().sum::<F>() / n;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let r = F::one() / (var + eps).sqrt();
        for (o, &v) in xhat.data[span].iter_mut().zip(xs) {
            *o = (v - mean) * r;
        }
        rstd.push(r);
    }
    let mut y = xhat.clone();
    for ch in 0..c {
        let (gm, bt) = (gamma.data[ch], beta.data[ch]);
        for v in &mut y.data[ch * per_channel..(ch + 1) * per_channel] {
            *v = *v * gm + bt;
        }
    }
    Ok((y, GroupStats { groups, xhat, rstd }))
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn group_norm_backward<F: Scalar>(
    stats: &GroupStats<F>,
    gamma: &Tensor<F>,
    dy: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let c = gamma.len();
    let per_channel = dy.len() / c.max(1);
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    let mut dxhat = dy.clone();
    for ch in 0..c {
        let span = ch * per_channel..(ch + 1) * per_channel;
        let mut dg = F::zero();
        let mut db = F::zero();
        for (&g, &xh) in dy.data[span.clone()].iter().zip(&stats.xhat.data[span.clone()]) {
            dg += g * xh;
            db += g;
        }
        dgamma.data[ch] = dg;
        dbeta.data[ch] = db;
        for v in &mut dxhat.data[span] {
            *v *= gamma.data[ch];
        }
    }
    let group_len = per_channel * (c / stats.groups);
    let mut dx = Tensor::zeros(&dy.shape);
    let n = F::lit(group_len as f64);
    for g in 0..stats.groups {
        let span = g * group_len..(g + 1) * group_len;
        let dxh = &dxhat.data[span.clone()];
        let xh = &stats.xhat.data[span.clone()];
        let mean_d = dxh.iter().copied().sum::<F>() / n;
        let mean_dx = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<F>() / n;
        let r = stats.rstd[g];
        for ((o, &d), &h) in dx.data[span].iter_mut().zip(dxh).zip(xh) {
            *o = r * (d - mean_d - h * mean_dx);
        }
    }
    (dx, dgamma, dbeta)
}

pub(crate) fn silu<F: Scalar>(v: F) -> F {
    v / (F::one() + (-v).exp())
}

pub(crate) fn silu_grad<F: Scalar>(v: F) -> F {
    let s = F::one() / (F::one() + (-v).exp());
    s * (F::one() + v * (F::one() - s))
}

/// Nearest-neighbour 2× upsampling of `[C, H, W]`.
pub(crate) fn upsample2<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let (c, h, w) = chw(x, "upsample")?;
    let mut out = Tensor::zeros(&[c, 2 * h, 2 * w]);
    for ch in 0..c {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                out.data[(ch * 2 * h + y) * 2 * w + xx] = x.data[(ch * h + y / 2) * w + xx / 2];
            }
        }
    }
    Ok(out)
}

pub(crate) fn upsample2_backward<F: Scalar>(dy: &Tensor<F>) -> Tensor<F> {
    let (c, h2, w2) = (dy.shape[0], dy.shape[1], dy.shape[2]);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for y in 0..h2 {
            for xx in 0..w2 {
                dx.data[(ch * h + y / 2) * w + xx / 2] += dy.data[(ch * h2 + y) * w2 + xx];
            }
        }
    }
    dx
}

/// Nearest-neighbour 2× downsampling of `[C, H, W]` (keeps the top-left pixel
/// of every 2×2 cell).
pub(crate) fn downsample2<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let (c, h, w) = chw(x, "downsample")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim("downsample", format!("odd size {h}×{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[c, ho, wo]);
    for ch in 0..c {
        for y in 0..ho {
            for xx in 0..wo {
                out.data[(ch * ho + y) * wo + xx] = x.data[(ch * h + 2 * y) * w + 2 * xx];
            }
        }
    }
    Ok(out)
}

pub(crate) fn downsample2_backward<F: Scalar>(dy: &Tensor<F>) -> Tensor<F> {
    let (c, ho, wo) = (dy.shape[0], dy.shape[1], dy.shape[2]);
    let (h, w) = (2 * ho, 2 * wo);
    let mut dx = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for y in 0..ho {
            for xx in 0..wo {
                dx.data[(ch * h + 2 * y) * w + 2 * xx] = dy.data[(ch * ho + y) * wo + xx];
            }
        }
    }
    dx
}
