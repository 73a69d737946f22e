//! Raw numeric kernels behind the tape operations. Everything here works on
//! flat slices with explicit geometry and knows nothing about the tape.

/// `c = a · b + beta · c` for row/column-strided matrices
/// (`a` is m×k, `b` is k×n, `c` is m×n).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: lhs out of bounds");
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: rhs out of bounds");
    assert!((m - 1) * rsc + (n - 1) * csc < c.len(), "gemm: output out of bounds");
    // SAFETY: the asserts above bound every index the kernel touches, and
    // `c` is exclusively borrowed so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Rows of the unfolded patch matrix for one group.
    fn patch_len(&self) -> usize {
        self.in_per_group() * self.kernel_h * self.kernel_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }

    fn is_depthwise(&self) -> bool {
        self.in_per_group() == 1 && self.out_per_group() == 1
    }
}

/// Unfold `channels` planes of `input` into a `[channels·kh·kw, oh·ow]` matrix.
fn im2col(g: &ConvGeom, input: &[f64], channels: usize, col: &mut [f64]) {
    let (h, w, oh, ow) = (g.height, g.width, g.out_h, g.out_w);
    let n = oh * ow;
    let mut row = 0;
    for c in 0..channels {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let dst = &mut col[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add the patch matrix back onto the planes.
fn col2im(g: &ConvGeom, col: &[f64], channels: usize, out: &mut [f64]) {
    let (h, w, oh, ow) = (g.height, g.width, g.out_h, g.out_w);
    let n = oh * ow;
    let mut row = 0;
    for c in 0..channels {
        let plane = &mut out[c * h * w..(c + 1) * h * w];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let src = &col[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let n = g.out_h * g.out_w;
    let mut out = vec![0.0; g.batch * g.out_channels * n];
    if g.is_depthwise() {
        depthwise_forward(g, input, weight, &mut out);
    } else {
        let (cin_g, cout_g, k) = (g.in_per_group(), g.out_per_group(), g.patch_len());
        let plane = g.height * g.width;
        let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * n] };
        for b in 0..g.batch {
            for grp in 0..g.groups {
                let x_off = (b * g.in_channels + grp * cin_g) * plane;
                let x = &input[x_off..x_off + cin_g * plane];
                let patches: &[f64] = if g.is_pointwise() {
                    x
                } else {
                    im2col(g, x, cin_g, &mut col);
                    &col
                };
                let w = &weight[grp * cout_g * k..(grp + 1) * cout_g * k];
                let y_off = (b * g.out_channels + grp * cout_g) * n;
                let y = &mut out[y_off..y_off + cout_g * n];
                gemm(cout_g, k, n, w, (k, 1), patches, (n, 1), 0.0, y, (n, 1));
            }
        }
    }
    if let Some(bias) = bias {
        // chunk index runs over (batch, channel) pairs
        for (i, plane) in out.chunks_mut(n).enumerate() {
            let bv = bias[i % g.out_channels];
            plane.iter_mut().for_each(|v| *v += bv);
        }
    }
    out
}

fn depthwise_forward(g: &ConvGeom, input: &[f64], weight: &[f64], out: &mut [f64]) {
    let (h, w, oh, ow) = (g.height, g.width, g.out_h, g.out_w);
    let kk = g.kernel_h * g.kernel_w;
    for b in 0..g.batch {
        for c in 0..g.in_channels {
            let x = &input[(b * g.in_channels + c) * h * w..][..h * w];
            let k = &weight[c * kk..(c + 1) * kk];
            let y = &mut out[(b * g.out_channels + c) * oh * ow..][..oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ki in 0..g.kernel_h {
                        let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..g.kernel_w {
                            let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                acc += x[iy as usize * w + ix as usize] * k[ki * g.kernel_w + kj];
                            }
                        }
                    }
                    y[oy * ow + ox] = acc;
                }
            }
        }
    }
}

/// Accumulates into whichever of the three gradient buffers is present.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    grad_input: Option<&mut [f64]>,
    grad_weight: Option<&mut [f64]>,
    grad_bias: Option<&mut [f64]>,
) {
    let n = g.out_h * g.out_w;
    if let Some(gb) = grad_bias {
        for (i, plane) in grad_out.chunks(n).enumerate() {
            gb[i % g.out_channels] += plane.iter().sum::<f64>();
        }
    }
    if g.is_depthwise() {
        depthwise_backward(g, input, weight, grad_out, grad_input, grad_weight);
        return;
    }
    let (cin_g, cout_g, k) = (g.in_per_group(), g.out_per_group(), g.patch_len());
    let plane = g.height * g.width;
    let pointwise = g.is_pointwise();
    let mut col = if pointwise { Vec::new() } else { vec![0.0; k * n] };
    let mut dcol = if pointwise { Vec::new() } else { vec![0.0; k * n] };
    let mut grad_input = grad_input;
    let mut grad_weight = grad_weight;
    for b in 0..g.batch {
        for grp in 0..g.groups {
            let x_off = (b * g.in_channels + grp * cin_g) * plane;
            let y_off = (b * g.out_channels + grp * cout_g) * n;
            let dy = &grad_out[y_off..y_off + cout_g * n];
            let w = &weight[grp * cout_g * k..(grp + 1) * cout_g * k];
            if let Some(gw) = grad_weight.as_deref_mut() {
                let x = &input[x_off..x_off + cin_g * plane];
                let patches: &[f64] = if pointwise {
                    x
                } else {
                    im2col(g, x, cin_g, &mut col);
                    &col
                };
                let gw = &mut gw[grp * cout_g * k..(grp + 1) * cout_g * k];
                gemm(cout_g, n, k, dy, (n, 1), patches, (1, n), 1.0, gw, (k, 1));
            }
            if let Some(gx) = grad_input.as_deref_mut() {
                let gx = &mut gx[x_off..x_off + cin_g * plane];
                if pointwise {
                    gemm(k, cout_g, n, w, (1, k), dy, (n, 1), 1.0, gx, (n, 1));
                } else {
                    gemm(k, cout_g, n, w, (1, k), dy, (n, 1), 0.0, &mut dcol, (n, 1));
                    col2im(g, &dcol, cin_g, gx);
                }
            }
        }
    }
}

fn depthwise_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    mut grad_input: Option<&mut [f64]>,
    mut grad_weight: Option<&mut [f64]>,
) {
    let (h, w, oh, ow) = (g.height, g.width, g.out_h, g.out_w);
    let kk = g.kernel_h * g.kernel_w;
    for b in 0..g.batch {
        for c in 0..g.in_channels {
            let x_off = (b * g.in_channels + c) * h * w;
            let dy = &grad_out[(b * g.out_channels + c) * oh * ow..][..oh * ow];
            let k = &weight[c * kk..(c + 1) * kk];
            for oy in 0..oh {
                for ki in 0..g.kernel_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let row = x_off + iy as usize * w;
                    for ox in 0..ow {
                        let d = dy[oy * ow + ox];
                        for kj in 0..g.kernel_w {
                            let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let at = row + ix as usize;
                            if let Some(gx) = grad_input.as_deref_mut() {
                                gx[at] += d * k[ki * g.kernel_w + kj];
                            }
                            if let Some(gw) = grad_weight.as_deref_mut() {
                                gw[c * kk + ki * g.kernel_w + kj] += d * input[at];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct PoolGeom {
    pub planes: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Max pooling; also returns, per output element, the flat input index of
/// the first maximal element in row-major scan order of its window.
pub(crate) fn max_pool_forward(g: &PoolGeom, input: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let len = g.planes * g.out_h * g.out_w;
    let mut out = Vec::with_capacity(len);
    let mut argmax = Vec::with_capacity(len);
    for p in 0..g.planes {
        let base = p * g.height * g.width;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut best_idx = base + oy * g.stride * g.width + ox * g.stride;
                let mut best = input[best_idx];
                for ki in 0..g.kernel {
                    for kj in 0..g.kernel {
                        let idx = base + (oy * g.stride + ki) * g.width + ox * g.stride + kj;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (out, argmax)
}

pub(crate) fn avg_pool_forward(g: &PoolGeom, input: &[f64]) -> Vec<f64> {
    let scale = 1.0 / (g.kernel * g.kernel) as f64;
    let mut out = Vec::with_capacity(g.planes * g.out_h * g.out_w);
    for p in 0..g.planes {
        let base = p * g.height * g.width;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut acc = 0.0;
                for ki in 0..g.kernel {
                    let row = base + (oy * g.stride + ki) * g.width + ox * g.stride;
                    acc += input[row..row + g.kernel].iter().sum::<f64>();
                }
                out.push(acc * scale);
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward(g: &PoolGeom, grad_out: &[f64], grad_input: &mut [f64]) {
    let scale = 1.0 / (g.kernel * g.kernel) as f64;
    for p in 0..g.planes {
        let base = p * g.height * g.width;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let d = grad_out[(p * g.out_h + oy) * g.out_w + ox] * scale;
                for ki in 0..g.kernel {
                    let row = base + (oy * g.stride + ki) * g.width + ox * g.stride;
                    grad_input[row..row + g.kernel].iter_mut().for_each(|v| *v += d);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(cin: usize, hw: usize, cout: usize, k: usize, stride: usize, pad: usize, groups: usize) -> ConvGeom {
        let o = (hw + 2 * pad - k) / stride + 1;
        ConvGeom {
            batch: 2,
            in_channels: cin,
            height: hw,
            width: hw,
            out_channels: cout,
            kernel_h: k,
            kernel_w: k,
            stride,
            padding: pad,
            groups,
            out_h: o,
            out_w: o,
        }
    }

    /// Direct seven-loop convolution, independent of im2col and GEMM.
    fn naive_conv(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
        let cin_g = g.in_channels / g.groups;
        let cout_g = g.out_channels / g.groups;
        let mut out = vec![0.0; g.batch * g.out_channels * g.out_h * g.out_w];
        for b in 0..g.batch {
            for o in 0..g.out_channels {
                let grp = o / cout_g;
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let mut acc = 0.0;
                        for ci in 0..cin_g {
                            let c = grp * cin_g + ci;
                            for ki in 0..g.kernel_h {
                                for kj in 0..g.kernel_w {
                                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                                    let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= g.height as isize || ix >= g.width as isize {
                                        continue;
                                    }
                                    let xv = x[((b * g.in_channels + c) * g.height + iy as usize) * g.width + ix as usize];
                                    let wv = w[((o * cin_g + ci) * g.kernel_h + ki) * g.kernel_w + kj];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out[((b * g.out_channels + o) * g.out_h + oy) * g.out_w + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 37 % 101) as f64 - 50.0) * scale).collect()
    }

    #[test]
    fn all_paths_match_direct_summation() {
        for g in [
            geom(3, 7, 4, 3, 1, 1, 1),
            geom(4, 8, 6, 3, 2, 1, 2),
            geom(5, 6, 5, 3, 1, 1, 5),
            geom(4, 5, 4, 3, 2, 1, 4),
            geom(3, 5, 7, 1, 1, 0, 1),
            geom(2, 9, 3, 7, 2, 3, 1),
            geom(4, 4, 8, 1, 2, 0, 1),
        ] {
            let x = ramp(g.batch * g.in_channels * g.height * g.width, 0.01);
            let w = ramp(g.out_channels * (g.in_channels / g.groups) * g.kernel_h * g.kernel_w, 0.02);
            let got = conv2d_forward(&g, &x, &w, None);
            let want = naive_conv(&g, &x, &w);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{g:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn im2col_and_col2im_are_adjoint() {
        let g = geom(2, 5, 1, 3, 2, 1, 1);
        let x = ramp(2 * 25, 0.1);
        let k = 2 * 9;
        let n = g.out_h * g.out_w;
        let y = ramp(k * n, 0.3);
        let mut col = vec![0.0; k * n];
        im2col(&g, &x, 2, &mut col);
        let mut back = vec![0.0; x.len()];
        col2im(&g, &y, 2, &mut back);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
