use super::{GradTape, LayerParams, Tensor};
use crate::error::{Error, Result};

/// Spatial padding convention for [`conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero-pad so the output is `ceil(H / stride)` × `ceil(W / stride)`.
    Same,
    /// No padding; output shrinks by `kh − 1`, `kw − 1` at stride 1.
    Valid,
}

impl Padding {
    pub fn as_str(self) -> &'static str {
        match self {
            Padding::Same => "same",
            Padding::Valid => "valid",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "same" => Some(Padding::Same),
            "valid" => Some(Padding::Valid),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    out_h: usize,
    out_w: usize,
    pad_top: usize,
    pad_left: usize,
}

fn geometry(
    in_h: usize,
    in_w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: Padding,
) -> Result<ConvGeometry> {
    match padding {
        Padding::Same => {
            let out_h = in_h.div_ceil(stride);
            let out_w = in_w.div_ceil(stride);
            let pad_h = ((out_h - 1) * stride + kh).saturating_sub(in_h);
            let pad_w = ((out_w - 1) * stride + kw).saturating_sub(in_w);
            Ok(ConvGeometry {
                out_h,
                out_w,
                pad_top: pad_h / 2,
                pad_left: pad_w / 2,
            })
        }
        Padding::Valid => {
            if kh > in_h || kw > in_w {
                return Err(Error::shape(
                    "conv2d",
                    format!("input at least {kh}x{kw} for valid padding"),
                    format!("{in_h}x{in_w}"),
                ));
            }
            Ok(ConvGeometry {
                out_h: (in_h - kh) / stride + 1,
                out_w: (in_w - kw) / stride + 1,
                pad_top: 0,
                pad_left: 0,
            })
        }
    }
}

fn check_conv(input: &Tensor, params: &LayerParams, stride: usize) -> Result<()> {
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
    }
    if input.channels() != params.in_channels() {
        return Err(Error::shape(
            "conv2d",
            format!("{} input channels", params.in_channels()),
            format!("{} input channels", input.channels()),
        ));
    }
    if input.is_empty() {
        return Err(Error::shape("conv2d", "non-empty input", "empty input"));
    }
    Ok(())
}

/// Unrolls receptive fields into a `P × K` row-major matrix, `K` ordered `(ky, kx, ci)`.
fn im2col(input: &Tensor, kh: usize, kw: usize, stride: usize, g: &ConvGeometry) -> Vec<f64> {
    let (in_h, in_w, cin) = input.shape();
    let k = kh * kw * cin;
    let mut cols = vec![0.0; g.out_h * g.out_w * k];
    let data = input.data();
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &mut cols[(oy * g.out_w + ox) * k..][..k];
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - g.pad_top as isize;
                if iy < 0 || iy >= in_h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - g.pad_left as isize;
                    if ix < 0 || ix >= in_w as isize {
                        continue;
                    }
                    let src = (iy as usize * in_w + ix as usize) * cin;
                    let dst = (ky * kw + kx) * cin;
                    row[dst..dst + cin].copy_from_slice(&data[src..src + cin]);
                }
            }
        }
    }
    cols
}

fn col2im(
    cols: &[f64],
    shape: (usize, usize, usize),
    kh: usize,
    kw: usize,
    stride: usize,
    g: &ConvGeometry,
) -> Tensor {
    let (in_h, in_w, cin) = shape;
    let k = kh * kw * cin;
    let mut out = Tensor::zeros(in_h, in_w, cin);
    let data = out.data_mut();
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &cols[(oy * g.out_w + ox) * k..][..k];
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - g.pad_top as isize;
                if iy < 0 || iy >= in_h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - g.pad_left as isize;
                    if ix < 0 || ix >= in_w as isize {
                        continue;
                    }
                    let dst = (iy as usize * in_w + ix as usize) * cin;
                    let src = (ky * kw + kx) * cin;
                    for c in 0..cin {
                        data[dst + c] += row[src + c];
                    }
                }
            }
        }
    }
    out
}

/// Kernel reordered to a `K × O` row-major matrix matching [`im2col`].
fn kernel_matrix(params: &LayerParams) -> Vec<f64> {
    let [o_n, i_n, kh, kw] = params.dims();
    let mut w = vec![0.0; kh * kw * i_n * o_n];
    for o in 0..o_n {
        for i in 0..i_n {
            for ky in 0..kh {
                for kx in 0..kw {
                    w[((ky * kw + kx) * i_n + i) * o_n + o] = params.kernels[params.kernel_index(o, i, ky, kx)];
                }
            }
        }
    }
    w
}

/// `c = a · b + beta·c` with explicit strides (row stride, column stride) for `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, (rs, cs): (isize, isize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize
        }
    };
    assert!(k == 0 || last(m, k, a_strides) < a.len());
    assert!(k == 0 || last(k, n, b_strides) < b.len());
    // SAFETY: every index touched by dgemm lies inside the slices, checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv2d(input: &Tensor, params: &LayerParams, stride: usize, padding: Padding) -> Result<Tensor> {
    check_conv(input, params, stride)?;
    let (kh, kw) = params.kernel_size();
    let g = geometry(input.height(), input.width(), kh, kw, stride, padding)?;
    let cols = im2col(input, kh, kw, stride, &g);
    let wmat = kernel_matrix(params);
    let (p, k, o) = (g.out_h * g.out_w, kh * kw * input.channels(), params.out_channels());
    let mut out = Vec::with_capacity(p * o);
    for _ in 0..p {
        out.extend_from_slice(&params.biases);
    }
    gemm(p, k, o, &cols, (k as isize, 1), &wmat, (o as isize, 1), 1.0, &mut out);
    Tensor::new(g.out_h, g.out_w, o, out)
}

/// Gradients of [`conv2d`] with respect to its input and parameters.
pub fn conv2d_backward(
    input: &Tensor,
    params: &LayerParams,
    stride: usize,
    padding: Padding,
    upstream: &Tensor,
) -> Result<(Tensor, GradTape)> {
    check_conv(input, params, stride)?;
    let (kh, kw) = params.kernel_size();
    let g = geometry(input.height(), input.width(), kh, kw, stride, padding)?;
    let o = params.out_channels();
    if upstream.shape() != (g.out_h, g.out_w, o) {
        return Err(Error::shape(
            "conv2d_backward",
            format!("upstream {:?}", (g.out_h, g.out_w, o)),
            format!("{:?}", upstream.shape()),
        ));
    }
    let p = g.out_h * g.out_w;
    let cin = input.channels();
    let k = kh * kw * cin;
    let cols = im2col(input, kh, kw, stride, &g);
    let wmat = kernel_matrix(params);
    let up = upstream.data();

    // dW (K×O) = colsᵀ · up
    let mut dw = vec![0.0; k * o];
    gemm(k, p, o, &cols, (1, k as isize), up, (o as isize, 1), 0.0, &mut dw);
    // dcols (P×K) = up · Wᵀ
    let mut dcols = vec![0.0; p * k];
    gemm(p, o, k, up, (o as isize, 1), &wmat, (1, o as isize), 0.0, &mut dcols);

    let mut tape = GradTape::zeros_like(params);
    for oc in 0..o {
        for i in 0..cin {
            for ky in 0..kh {
                for kx in 0..kw {
                    tape.kernels[params.kernel_index(oc, i, ky, kx)] = dw[((ky * kw + kx) * cin + i) * o + oc];
                }
            }
        }
    }
    for px in up.chunks_exact(o) {
        for (b, v) in tape.biases.iter_mut().zip(px) {
            *b += v;
        }
    }
    let input_grad = col2im(&dcols, input.shape(), kh, kw, stride, &g);
    Ok((input_grad, tape))
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Upstream gradient masked to where the forward input was positive.
pub fn relu_backward(input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    input.check_same("relu_backward", upstream)?;
    let data = input
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.height(), input.width(), input.channels(), data)
}

fn pool_geometry(input: &Tensor, window: usize, stride: usize) -> Result<(usize, usize)> {
    if window == 0 || stride == 0 {
        return Err(Error::InvalidArgument("maxpool window and stride must be >= 1".into()));
    }
    if window > input.height() || window > input.width() {
        return Err(Error::shape(
            "maxpool",
            format!("input at least {window}x{window}"),
            format!("{}x{}", input.height(), input.width()),
        ));
    }
    Ok((
        (input.height() - window) / stride + 1,
        (input.width() - window) / stride + 1,
    ))
}

/// Max over `window`×`window` cells, valid placement; ties resolve to the first in scan order.
pub fn maxpool(input: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    let (oh, ow) = pool_geometry(input, window, stride)?;
    let c = input.channels();
    let mut out = Tensor::filled(oh, ow, c, f64::NEG_INFINITY);
    for oy in 0..oh {
        for ox in 0..ow {
            for wy in 0..window {
                for wx in 0..window {
                    let (y, x) = (oy * stride + wy, ox * stride + wx);
                    for ch in 0..c {
                        let v = input.at(y, x, ch);
                        let o = out.at_mut(oy, ox, ch);
                        if v > *o {
                            *o = v;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn maxpool_backward(input: &Tensor, window: usize, stride: usize, upstream: &Tensor) -> Result<Tensor> {
    let (oh, ow) = pool_geometry(input, window, stride)?;
    let c = input.channels();
    if upstream.shape() != (oh, ow, c) {
        return Err(Error::shape(
            "maxpool_backward",
            format!("upstream {:?}", (oh, ow, c)),
            format!("{:?}", upstream.shape()),
        ));
    }
    let mut grad = Tensor::zeros(input.height(), input.width(), c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best = (oy * stride, ox * stride);
                let mut best_v = f64::NEG_INFINITY;
                for wy in 0..window {
                    for wx in 0..window {
                        let (y, x) = (oy * stride + wy, ox * stride + wx);
                        let v = input.at(y, x, ch);
                        if v > best_v {
                            best_v = v;
                            best = (y, x);
                        }
                    }
                }
                *grad.at_mut(best.0, best.1, ch) += upstream.at(oy, ox, ch);
            }
        }
    }
    Ok(grad)
}

/// Dense layer over the flattened input; params are `(out, in, 1, 1)`, output is `1×1×out`.
pub fn fully_connected(input: &Tensor, params: &LayerParams) -> Result<Tensor> {
    check_fc(input, params)?;
    let n = input.len();
    let x = input.data();
    let out = params
        .biases
        .iter()
        .enumerate()
        .map(|(o, &b)| {
            let row = &params.kernels[o * n..(o + 1) * n];
            b + dot(row, x)
        })
        .collect();
    Tensor::new(1, 1, params.out_channels(), out)
}

pub fn fully_connected_backward(
    input: &Tensor,
    params: &LayerParams,
    upstream: &Tensor,
) -> Result<(Tensor, GradTape)> {
    check_fc(input, params)?;
    let o_n = params.out_channels();
    if upstream.len() != o_n {
        return Err(Error::shape(
            "fully_connected_backward",
            format!("{o_n} upstream values"),
            format!("{}", upstream.len()),
        ));
    }
    let n = input.len();
    let x = input.data();
    let mut dx = vec![0.0; n];
    let mut tape = GradTape::zeros_like(params);
    for (o, &g) in upstream.data().iter().enumerate() {
        let row = &params.kernels[o * n..(o + 1) * n];
        for (d, w) in dx.iter_mut().zip(row) {
            *d += g * w;
        }
        for (dw, xi) in tape.kernels[o * n..(o + 1) * n].iter_mut().zip(x) {
            *dw = g * xi;
        }
        tape.biases[o] = g;
    }
    Ok((
        Tensor::new(input.height(), input.width(), input.channels(), dx)?,
        tape,
    ))
}

fn check_fc(input: &Tensor, params: &LayerParams) -> Result<()> {
    let [_, i_n, kh, kw] = params.dims();
    if kh != 1 || kw != 1 || i_n != input.len() {
        return Err(Error::shape(
            "fully_connected",
            format!("{} flattened inputs (1x1 kernel)", i_n),
            format!("{} inputs, {kh}x{kw} kernel", input.len()),
        ));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for j in 0..4 {
            acc[j] += a[4 * i + j] * b[4 * i + j];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Stacks `b`'s channels after `a`'s.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::shape(
            "concat_channels",
            format!("{}x{} spatial", a.height(), a.width()),
            format!("{}x{}", b.height(), b.width()),
        ));
    }
    let (ca, cb) = (a.channels(), b.channels());
    if ca == 0 {
        return Ok(b.clone());
    }
    if cb == 0 {
        return Ok(a.clone());
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    for (pa, pb) in a.data().chunks_exact(ca).zip(b.data().chunks_exact(cb)) {
        data.extend_from_slice(pa);
        data.extend_from_slice(pb);
    }
    Tensor::new(a.height(), a.width(), ca + cb, data)
}

/// Splits the upstream gradient of [`concat_channels`] back into the two inputs.
pub fn concat_channels_backward(upstream: &Tensor, a_channels: usize) -> Result<(Tensor, Tensor)> {
    let b_channels = upstream.channels().checked_sub(a_channels).ok_or_else(|| {
        Error::shape(
            "concat_channels_backward",
            format!("at least {a_channels} channels"),
            format!("{}", upstream.channels()),
        )
    })?;
    Ok((
        upstream.slice_channels(0, a_channels)?,
        upstream.slice_channels(a_channels, b_channels)?,
    ))
}
