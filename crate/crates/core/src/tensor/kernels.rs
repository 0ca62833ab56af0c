//! Forward kernels and the backward helpers the graph uses for them.
//!
//! All image tensors are `[batch, channel, height, width]`.

use crate::error::{Error, Result};

use super::Tensor;

/// Geometry of a grouped 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub groups: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl ConvSpec {
    pub fn new(groups: usize, stride: usize, padding: usize) -> Self {
        Self {
            groups,
            stride,
            pad_h: padding,
            pad_w: padding,
        }
    }

    pub fn with_padding_hw(mut self, pad_h: usize, pad_w: usize) -> Self {
        self.pad_h = pad_h;
        self.pad_w = pad_w;
        self
    }
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self::new(1, 1, 0)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    out_channels: usize,
    group_in: usize,
    group_out: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
    spec: ConvSpec,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.group_in * self.kh * self.kw
    }

    fn plane(&self) -> usize {
        self.out_h * self.out_w
    }

    pub(crate) fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.out_h, self.out_w]
    }
}

fn dims4(t: &Tensor, op: &'static str, what: &str) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        ref s => Err(Error::shape(op, format!("{what} must be 4-D, got {s:?}"))),
    }
}

pub(crate) fn conv_geometry(input: &Tensor, kernel: &Tensor, spec: ConvSpec) -> Result<ConvGeom> {
    let [batch, channels, height, width] = dims4(input, "conv2d", "input")?;
    let [out_channels, group_in, kh, kw] = dims4(kernel, "conv2d", "kernel")?;
    let groups = spec.groups;
    if groups == 0 || spec.stride == 0 {
        return Err(Error::InvalidArgument(
            "conv2d groups and stride must be positive".into(),
        ));
    }
    if channels % groups != 0 {
        return Err(Error::shape(
            "conv2d",
            format!("input channels {channels} not divisible by groups {groups}"),
        ));
    }
    if out_channels % groups != 0 {
        return Err(Error::shape(
            "conv2d",
            format!("output channels {out_channels} not divisible by groups {groups}"),
        ));
    }
    if group_in != channels / groups {
        return Err(Error::shape(
            "conv2d",
            format!(
                "kernel in-channels {group_in} != input channels per group {}",
                channels / groups
            ),
        ));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::shape(
            "conv2d",
            format!("kernel height/width must be odd, got {kh}x{kw}"),
        ));
    }
    if height + 2 * spec.pad_h < kh || width + 2 * spec.pad_w < kw {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kh}x{kw} larger than padded input {height}x{width}"),
        ));
    }
    Ok(ConvGeom {
        batch,
        channels,
        height,
        width,
        out_channels,
        group_in,
        group_out: out_channels / groups,
        kh,
        kw,
        out_h: (height + 2 * spec.pad_h - kh) / spec.stride + 1,
        out_w: (width + 2 * spec.pad_w - kw) / spec.stride + 1,
        spec,
    })
}

/// `c (m×n) = a (m×k) · b (k×n) + beta·c` with optional transposed storage.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m * k * n < 256 {
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * rsa as usize + p * csa as usize]
                        * b[p * rsb as usize + j * csb as usize];
                }
                let cij = &mut c[i * n + j];
                *cij = acc + if beta == 0.0 { 0.0 } else { beta * *cij };
            }
        }
        return;
    }
    // SAFETY: the slices cover the strided extents checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &[f64], g: &ConvGeom, n: usize, group: usize, col: &mut [f64]) {
    let plane = g.plane();
    let s = g.spec.stride;
    for ci in 0..g.group_in {
        let c = group * g.group_in + ci;
        let base = (n * g.channels + c) * g.height * g.width;
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &mut col[((ci * g.kh + ki) * g.kw + kj) * plane..][..plane];
                for oy in 0..g.out_h {
                    let iy = (oy * s + ki) as isize - g.spec.pad_h as isize;
                    let out_row = &mut row[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &x[base + iy as usize * g.width..][..g.width];
                    for (ox, dst) in out_row.iter_mut().enumerate() {
                        let ix = (ox * s + kj) as isize - g.spec.pad_w as isize;
                        *dst = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], g: &ConvGeom, n: usize, group: usize, dx: &mut [f64]) {
    let plane = g.plane();
    let s = g.spec.stride;
    for ci in 0..g.group_in {
        let c = group * g.group_in + ci;
        let base = (n * g.channels + c) * g.height * g.width;
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &col[((ci * g.kh + ki) * g.kw + kj) * plane..][..plane];
                for oy in 0..g.out_h {
                    let iy = (oy * s + ki) as isize - g.spec.pad_h as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut dx[base + iy as usize * g.width..][..g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * s + kj) as isize - g.spec.pad_w as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += row[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Grouped 2-D cross-correlation. `kernel` is `[out, in/groups, kh, kw]`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, spec: ConvSpec) -> Result<Tensor> {
    let g = conv_geometry(input, kernel, spec)?;
    Ok(conv2d_with(input, kernel, &g))
}

pub(crate) fn conv2d_with(input: &Tensor, kernel: &Tensor, g: &ConvGeom) -> Tensor {
    let (patch, plane) = (g.patch(), g.plane());
    let mut out = vec![0.0; g.batch * g.out_channels * plane];
    let mut col = vec![0.0; patch * plane];
    let (x, w) = (input.data(), kernel.data());
    for n in 0..g.batch {
        for group in 0..g.spec.groups {
            im2col(x, g, n, group, &mut col);
            let w_g = &w[group * g.group_out * patch..][..g.group_out * patch];
            let o = &mut out[(n * g.out_channels + group * g.group_out) * plane..]
                [..g.group_out * plane];
            gemm(g.group_out, patch, plane, w_g, false, &col, false, 0.0, o);
        }
    }
    Tensor::from_parts(g.output_shape(), out)
}

/// Gradients of conv2d w.r.t. input (if requested) and kernel.
pub(crate) fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    g: &ConvGeom,
    grad_out: &Tensor,
    want_input: bool,
    want_kernel: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (patch, plane) = (g.patch(), g.plane());
    let mut dx = want_input.then(|| vec![0.0; input.len()]);
    let mut dw = want_kernel.then(|| vec![0.0; kernel.len()]);
    let mut col = vec![0.0; patch * plane];
    let (x, w, dy) = (input.data(), kernel.data(), grad_out.data());
    for n in 0..g.batch {
        for group in 0..g.spec.groups {
            let dy_g =
                &dy[(n * g.out_channels + group * g.group_out) * plane..][..g.group_out * plane];
            if let Some(dw) = dw.as_mut() {
                im2col(x, g, n, group, &mut col);
                let dw_g = &mut dw[group * g.group_out * patch..][..g.group_out * patch];
                gemm(
                    g.group_out,
                    plane,
                    patch,
                    dy_g,
                    false,
                    &col,
                    true,
                    1.0,
                    dw_g,
                );
            }
            if let Some(dx) = dx.as_mut() {
                let w_g = &w[group * g.group_out * patch..][..g.group_out * patch];
                gemm(
                    patch,
                    g.group_out,
                    plane,
                    w_g,
                    true,
                    dy_g,
                    false,
                    0.0,
                    &mut col,
                );
                col2im(&col, g, n, group, dx);
            }
        }
    }
    (
        dx.map(|d| Tensor::from_parts(input.shape().to_vec(), d)),
        dw.map(|d| Tensor::from_parts(kernel.shape().to_vec(), d)),
    )
}

/// 1-D cross-correlation over the last axis: `[n, cin, len] ⊛ [m, cin, k] -> [n, m, len']`
/// with zero padding `padding` on both ends.
pub fn conv1d(input: &Tensor, kernel: &Tensor, padding: usize) -> Result<Tensor> {
    let (x4, w4, spec) = conv1d_as_2d(input, kernel, padding)?;
    let g = conv_geometry(&x4, &w4, spec)?;
    let out = conv2d_with(&x4, &w4, &g);
    let [b, m, _, l] = [out.shape()[0], out.shape()[1], 1, out.shape()[3]];
    Ok(Tensor::from_parts(vec![b, m, l], out.into_data()))
}

pub(crate) fn conv1d_as_2d(
    input: &Tensor,
    kernel: &Tensor,
    padding: usize,
) -> Result<(Tensor, Tensor, ConvSpec)> {
    let (&[n, cin, len], &[m, kin, k]) = (input.shape(), kernel.shape()) else {
        return Err(Error::shape(
            "conv1d",
            format!(
                "expected 3-D input and kernel, got {:?} and {:?}",
                input.shape(),
                kernel.shape()
            ),
        ));
    };
    Ok((
        Tensor::from_parts(vec![n, cin, 1, len], input.data().to_vec()),
        Tensor::from_parts(vec![m, kin, 1, k], kernel.data().to_vec()),
        ConvSpec::new(1, 1, 0).with_padding_hw(0, padding),
    ))
}

/// Concatenates along the channel axis (axis 1), `a` first.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [n, c1, h, w] = dims4(a, "concat_channels", "first operand")?;
    let [n2, c2, h2, w2] = dims4(b, "concat_channels", "second operand")?;
    if n != n2 {
        return Err(Error::shape(
            "concat_channels",
            format!("batch {n} vs {n2}"),
        ));
    }
    if h != h2 {
        return Err(Error::shape(
            "concat_channels",
            format!("height {h} vs {h2}"),
        ));
    }
    if w != w2 {
        return Err(Error::shape(
            "concat_channels",
            format!("width {w} vs {w2}"),
        ));
    }
    let (sa, sb) = (c1 * h * w, c2 * h * w);
    let mut data = Vec::with_capacity(a.len() + b.len());
    for i in 0..n {
        data.extend_from_slice(&a.data()[i * sa..(i + 1) * sa]);
        data.extend_from_slice(&b.data()[i * sb..(i + 1) * sb]);
    }
    Ok(Tensor::from_parts(vec![n, c1 + c2, h, w], data))
}

/// Splits a channel concatenation back into its `c1`-channel head and the rest.
pub(crate) fn split_channels(t: &Tensor, c1: usize) -> (Tensor, Tensor) {
    let [n, c, h, w] = [t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]];
    let c2 = c - c1;
    let (sa, sb) = (c1 * h * w, c2 * h * w);
    let mut a = Vec::with_capacity(n * sa);
    let mut b = Vec::with_capacity(n * sb);
    for i in 0..n {
        let row = &t.data()[i * (sa + sb)..(i + 1) * (sa + sb)];
        a.extend_from_slice(&row[..sa]);
        b.extend_from_slice(&row[sa..]);
    }
    (
        Tensor::from_parts(vec![n, c1, h, w], a),
        Tensor::from_parts(vec![n, c2, h, w], b),
    )
}

/// `[b, c, h, w] -> [b·h·w, 1, c]`: every pixel becomes a row holding its channel vector.
pub fn reorder_for_dws(x: &Tensor) -> Result<Tensor> {
    let [b, c, h, w] = dims4(x, "reorder_for_dws", "input")?;
    let mut out = vec![0.0; x.len()];
    let hw = h * w;
    for n in 0..b {
        for ci in 0..c {
            let src = &x.data()[(n * c + ci) * hw..][..hw];
            for (p, &v) in src.iter().enumerate() {
                out[(n * hw + p) * c + ci] = v;
            }
        }
    }
    Ok(Tensor::from_parts(vec![b * h * w, 1, c], out))
}

/// Inverse of [`reorder_for_dws`]: `[b·h·w, 1, c] -> [b, c, h, w]`.
pub fn reorder_from_dws(x: &Tensor, batch: usize, height: usize, width: usize) -> Result<Tensor> {
    let (&[rows, one, c], hw) = (x.shape(), height * width) else {
        return Err(Error::shape(
            "reorder_from_dws",
            format!("expected [b*h*w, 1, c], got {:?}", x.shape()),
        ));
    };
    if one != 1 {
        return Err(Error::shape(
            "reorder_from_dws",
            format!("placeholder axis must be 1, got {one}"),
        ));
    }
    if rows != batch * hw {
        return Err(Error::shape(
            "reorder_from_dws",
            format!("{rows} rows do not factor as {batch}x{height}x{width}"),
        ));
    }
    let mut out = vec![0.0; x.len()];
    for n in 0..batch {
        for p in 0..hw {
            let src = &x.data()[(n * hw + p) * c..][..c];
            for (ci, &v) in src.iter().enumerate() {
                out[(n * c + ci) * hw + p] = v;
            }
        }
    }
    Ok(Tensor::from_parts(vec![batch, c, height, width], out))
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// `ln(1 + e^x)`, overflow-safe.
pub fn softplus_scalar(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn softplus(x: &Tensor) -> Tensor {
    x.map(softplus_scalar)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// 2×2 average pooling with stride 2; a trailing odd row/column is dropped.
pub fn avgpool2(x: &Tensor) -> Result<Tensor> {
    let [b, c, h, w] = dims4(x, "avgpool2", "input")?;
    if h < 2 || w < 2 {
        return Err(Error::shape(
            "avgpool2",
            format!("spatial size {h}x{w} smaller than the 2x2 window"),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; b * c * oh * ow];
    for plane in 0..b * c {
        let src = &x.data()[plane * h * w..][..h * w];
        let dst = &mut out[plane * oh * ow..][..oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let (y, xx) = (2 * oy, 2 * ox);
                dst[oy * ow + ox] = 0.25
                    * (src[y * w + xx]
                        + src[y * w + xx + 1]
                        + src[(y + 1) * w + xx]
                        + src[(y + 1) * w + xx + 1]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, c, oh, ow], out))
}

pub(crate) fn avgpool2_backward(input_shape: &[usize], grad: &Tensor) -> Tensor {
    let [b, c, h, w] = [
        input_shape[0],
        input_shape[1],
        input_shape[2],
        input_shape[3],
    ];
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = vec![0.0; b * c * h * w];
    for plane in 0..b * c {
        let g = &grad.data()[plane * oh * ow..][..oh * ow];
        let dst = &mut dx[plane * h * w..][..h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let v = 0.25 * g[oy * ow + ox];
                let (y, xx) = (2 * oy, 2 * ox);
                dst[y * w + xx] += v;
                dst[y * w + xx + 1] += v;
                dst[(y + 1) * w + xx] += v;
                dst[(y + 1) * w + xx + 1] += v;
            }
        }
    }
    Tensor::from_parts(input_shape.to_vec(), dx)
}

/// `[b, c, h, w] -> [b, c]`, mean over the spatial plane.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let [b, c, h, w] = dims4(x, "global_avg_pool", "input")?;
    let hw = h * w;
    let out = x
        .data()
        .chunks(hw)
        .map(|p| p.iter().sum::<f64>() / hw as f64)
        .collect();
    Ok(Tensor::from_parts(vec![b, c], out))
}

fn dims2(t: &Tensor, op: &'static str, what: &str) -> Result<[usize; 2]> {
    match *t.shape() {
        [a, b] => Ok([a, b]),
        ref s => Err(Error::shape(op, format!("{what} must be 2-D, got {s:?}"))),
    }
}

/// `x [b, in] · weightᵀ [in, out] + bias [out]`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [b, fin] = dims2(x, "linear", "input")?;
    let [fout, win] = dims2(weight, "linear", "weight")?;
    if fin != win {
        return Err(Error::shape(
            "linear",
            format!("input features {fin} vs weight in-features {win}"),
        ));
    }
    if bias.shape() != [fout] {
        return Err(Error::shape(
            "linear",
            format!("bias shape {:?} vs out-features {fout}", bias.shape()),
        ));
    }
    let mut out: Vec<f64> = (0..b).flat_map(|_| bias.data().iter().copied()).collect();
    gemm(
        b,
        fin,
        fout,
        x.data(),
        false,
        weight.data(),
        true,
        1.0,
        &mut out,
    );
    Ok(Tensor::from_parts(vec![b, fout], out))
}

pub(crate) fn linear_backward(
    x: &Tensor,
    weight: &Tensor,
    grad: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let [b, fin] = [x.shape()[0], x.shape()[1]];
    let fout = weight.shape()[0];
    let mut dx = vec![0.0; b * fin];
    gemm(
        b,
        fout,
        fin,
        grad.data(),
        false,
        weight.data(),
        false,
        0.0,
        &mut dx,
    );
    let mut dw = vec![0.0; fout * fin];
    gemm(
        fout,
        b,
        fin,
        grad.data(),
        true,
        x.data(),
        false,
        0.0,
        &mut dw,
    );
    let mut db = vec![0.0; fout];
    for row in grad.data().chunks(fout) {
        for (d, g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    (
        Tensor::from_parts(vec![b, fin], dx),
        Tensor::from_parts(vec![fout, fin], dw),
        Tensor::from_parts(vec![fout], db),
    )
}

/// Row-wise log-softmax of a `[b, classes]` matrix.
pub fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    let [_, c] = dims2(logits, "log_softmax", "logits")?;
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(c) {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    Ok(Tensor::from_parts(logits.shape().to_vec(), out))
}

/// Row-wise softmax of a `[b, classes]` matrix.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let [_, c] = dims2(logits, "softmax", "logits")?;
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(c) {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.iter_mut().for_each(|v| *v = (*v - m).exp());
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok(Tensor::from_parts(logits.shape().to_vec(), out))
}

/// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let logp = log_softmax(logits)?;
    let [b, c] = [logp.shape()[0], logp.shape()[1]];
    check_labels(labels, b, c)?;
    Ok(-labels
        .iter()
        .enumerate()
        .map(|(i, &y)| logp.data()[i * c + y])
        .sum::<f64>()
        / b as f64)
}

pub(crate) fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} labels for batch of {batch}", labels.len()),
        ));
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok(())
}

/// Symmetric uniform quantization to `bits` bits, scaled per row of `row_len`
/// consecutive values by that row's max magnitude.
pub fn quantize_rows(x: &Tensor, row_len: usize, bits: u32) -> Tensor {
    let levels = ((1u64 << (bits - 1)) - 1) as f64;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(row_len) {
        let scale = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if scale == 0.0 {
            continue;
        }
        let step = scale / levels;
        row.iter_mut().for_each(|v| *v = (*v / step).round() * step);
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// `KL(N(mu, sigma²) || N(0, prior²))` summed over all entries.
pub fn kl_gaussian(mu: &Tensor, sigma: &Tensor, prior_sigma: f64) -> Result<f64> {
    if mu.shape() != sigma.shape() {
        return Err(Error::shape(
            "kl_gaussian",
            format!("mu {:?} vs sigma {:?}", mu.shape(), sigma.shape()),
        ));
    }
    if prior_sigma <= 0.0 || sigma.data().iter().any(|&s| s <= 0.0) {
        return Err(Error::InvalidArgument(
            "kl_gaussian scales must be positive".into(),
        ));
    }
    let p2 = prior_sigma * prior_sigma;
    Ok(mu
        .data()
        .iter()
        .zip(sigma.data())
        .map(|(&m, &s)| (prior_sigma / s).ln() + (s * s + m * m) / (2.0 * p2) - 0.5)
        .sum())
}
