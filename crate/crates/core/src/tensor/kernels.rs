//! Raw `f32` kernels shared by the autodiff graph and the inference paths.
//!
//! Every kernel computes each output element as a fixed-order function of its
//! inputs only, so parallel variants are bitwise identical to serial ones.
//! Convolutions may split their output across threads (see `parallel`); all
//! other kernels are serial.

use crate::parallel::for_each_range;

/// Normalized batched-image dims.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn plane(&self) -> usize {
        self.h * self.w
    }
    pub fn per_image(&self) -> usize {
        self.c * self.h * self.w
    }
    pub fn numel(&self) -> usize {
        self.n * self.per_image()
    }
    pub fn with(self, c: usize, h: usize, w: usize) -> Dims {
        Dims { n: self.n, c, h, w }
    }
}

/// Fixed-tree 8-lane dot product; deterministic regardless of vector width.
#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f32; 8];
    let chunks = a.len() / 8;
    for k in 0..chunks {
        let ao = &a[k * 8..k * 8 + 8];
        let bo = &b[k * 8..k * 8 + 8];
        for l in 0..8 {
            lanes[l] += ao[l] * bo[l];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    let s01 = lanes[0] + lanes[1];
    let s23 = lanes[2] + lanes[3];
    let s45 = lanes[4] + lanes[5];
    let s67 = lanes[6] + lanes[7];
    ((s01 + s23) + (s45 + s67)) + tail
}

#[inline]
fn axpy(out: &mut [f32], x: &[f32], a: f32) {
    debug_assert_eq!(out.len(), x.len());
    for (o, &v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

// ---------------------------------------------------------------------------
// 1x1 convolution (a matmul over the pixel dimension)
// ---------------------------------------------------------------------------

const PIX_BLOCK: usize = 1024;

/// `out[n,o,p] = b[o] + sum_i w[o,i] * x[n,i,p]`
pub fn conv1x1_forward(x: &[f32], d: Dims, w: &[f32], b: &[f32], co: usize, out: &mut [f32]) {
    let ci = d.c;
    let hw = d.plane();
    let blocks_per_image = hw.div_ceil(PIX_BLOCK);
    let out_ptr = SendPtr(out.as_mut_ptr());
    for_each_range(d.n * blocks_per_image, |range| {
        let out_ptr = out_ptr;
        for unit in range {
            let n = unit / blocks_per_image;
            let p0 = (unit % blocks_per_image) * PIX_BLOCK;
            let p1 = (p0 + PIX_BLOCK).min(hw);
            let xn = &x[n * ci * hw..(n + 1) * ci * hw];
            for o in 0..co {
                let row = &w[o * ci..(o + 1) * ci];
                // Safety: (n, o, p0..p1) output ranges are disjoint per unit.
                let ob = unsafe {
                    std::slice::from_raw_parts_mut(
                        out_ptr.0.add((n * co + o) * hw + p0),
                        p1 - p0,
                    )
                };
                ob.fill(b[o]);
                for (i, &wv) in row.iter().enumerate() {
                    axpy(ob, &xn[i * hw + p0..i * hw + p1], wv);
                }
            }
        }
    });
}

/// `dx[n,i,p] = sum_o w[o,i] * dy[n,o,p]` (accumulates into `dx`)
pub fn conv1x1_backward_input(dy: &[f32], d_out: Dims, w: &[f32], ci: usize, dx: &mut [f32]) {
    let co = d_out.c;
    let hw = d_out.plane();
    // Transposed weight for contiguous row access.
    let mut wt = vec![0.0f32; ci * co];
    for o in 0..co {
        for i in 0..ci {
            wt[i * co + o] = w[o * ci + i];
        }
    }
    let blocks_per_image = hw.div_ceil(PIX_BLOCK);
    let dx_ptr = SendPtr(dx.as_mut_ptr());
    for_each_range(d_out.n * blocks_per_image, |range| {
        let dx_ptr = dx_ptr;
        for unit in range {
            let n = unit / blocks_per_image;
            let p0 = (unit % blocks_per_image) * PIX_BLOCK;
            let p1 = (p0 + PIX_BLOCK).min(hw);
            let dyn_ = &dy[n * co * hw..(n + 1) * co * hw];
            for i in 0..ci {
                let row = &wt[i * co..(i + 1) * co];
                let db = unsafe {
                    std::slice::from_raw_parts_mut(
                        dx_ptr.0.add((n * ci + i) * hw + p0),
                        p1 - p0,
                    )
                };
                for (o, &wv) in row.iter().enumerate() {
                    axpy(db, &dyn_[o * hw + p0..o * hw + p1], wv);
                }
            }
        }
    });
}

/// `dw[o,i] += sum_{n,p} dy[n,o,p] * x[n,i,p]`, `db[o] += sum dy[n,o,p]`
pub fn conv1x1_backward_params(
    x: &[f32],
    d_in: Dims,
    dy: &[f32],
    co: usize,
    dw: &mut [f32],
    db: &mut [f32],
) {
    let ci = d_in.c;
    let hw = d_in.plane();
    let dw_ptr = SendPtr(dw.as_mut_ptr());
    let db_ptr = SendPtr(db.as_mut_ptr());
    for_each_range(co, |orange| {
        let dw_ptr = dw_ptr;
        let db_ptr = db_ptr;
        for o in orange {
            let dwo =
                unsafe { std::slice::from_raw_parts_mut(dw_ptr.0.add(o * ci), ci) };
            let dbo = unsafe { &mut *db_ptr.0.add(o) };
            for n in 0..d_in.n {
                for p0 in (0..hw).step_by(PIX_BLOCK) {
                    let p1 = (p0 + PIX_BLOCK).min(hw);
                    let dyb = &dy[(n * co + o) * hw + p0..(n * co + o) * hw + p1];
                    for (i, dwv) in dwo.iter_mut().enumerate() {
                        let xb = &x[(n * ci + i) * hw + p0..(n * ci + i) * hw + p1];
                        *dwv += dot(dyb, xb);
                    }
                    *dbo += dyb.iter().sum::<f32>();
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// 3x3 convolution, zero padding 1, stride 1 or 2 (output = ceil(in/stride))
// ---------------------------------------------------------------------------

pub fn conv3x3_out_extent(n: usize, stride: usize) -> usize {
    // pad 1, kernel 3: floor((n + 2 - 3)/s) + 1 == ceil(n/s) for s in {1,2}
    (n - 1) / stride + 1
}

/// Weight layout `CO x CI x 3 x 3`.
pub fn conv3x3_forward(
    x: &[f32],
    d: Dims,
    w: &[f32],
    b: &[f32],
    co: usize,
    stride: usize,
    out: &mut [f32],
) {
    let (ci, ih, iw) = (d.c, d.h, d.w);
    let (oh, ow) = (conv3x3_out_extent(ih, stride), conv3x3_out_extent(iw, stride));
    let out_ptr = SendPtr(out.as_mut_ptr());
    for_each_range(d.n * co, |range| {
        let out_ptr = out_ptr;
        let mut acc = vec![0.0f32; ow];
        for unit in range {
            let n = unit / co;
            let o = unit % co;
            let xn = &x[n * ci * ih * iw..(n + 1) * ci * ih * iw];
            for oy in 0..oh {
                acc.fill(b[o]);
                for i in 0..ci {
                    let xplane = &xn[i * ih * iw..(i + 1) * ih * iw];
                    for ky in 0..3usize {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= ih as isize {
                            continue;
                        }
                        let xrow = &xplane[iy as usize * iw..(iy as usize + 1) * iw];
                        let wbase = ((o * ci + i) * 3 + ky) * 3;
                        for kx in 0..3usize {
                            let wv = w[wbase + kx];
                            if stride == 1 {
                                // ix = ox + kx - 1 must lie in [0, iw)
                                let ox0 = if kx == 0 { 1 } else { 0 };
                                let ox1 = (iw + 1 - kx).min(ow);
                                if ox0 < ox1 {
                                    axpy(
                                        &mut acc[ox0..ox1],
                                        &xrow[ox0 + kx - 1..ox1 + kx - 1],
                                        wv,
                                    );
                                }
                            } else {
                                for ox in 0..ow {
                                    let ix = (ox * stride + kx) as isize - 1;
                                    if ix >= 0 && ix < iw as isize {
                                        acc[ox] += wv * xrow[ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
                let orow = unsafe {
                    std::slice::from_raw_parts_mut(
                        out_ptr.0.add(((n * co + o) * oh + oy) * ow),
                        ow,
                    )
                };
                orow.copy_from_slice(&acc);
            }
        }
    });
}

/// Accumulates `dx` for a 3x3 conv.
pub fn conv3x3_backward_input(
    dy: &[f32],
    d_in: Dims,
    w: &[f32],
    co: usize,
    stride: usize,
    dx: &mut [f32],
) {
    let (ci, ih, iw) = (d_in.c, d_in.h, d_in.w);
    let (oh, ow) = (conv3x3_out_extent(ih, stride), conv3x3_out_extent(iw, stride));
    let dx_ptr = SendPtr(dx.as_mut_ptr());
    for_each_range(d_in.n * ci, |range| {
        let dx_ptr = dx_ptr;
        for unit in range {
            let n = unit / ci;
            let i = unit % ci;
            let dplane = unsafe {
                std::slice::from_raw_parts_mut(dx_ptr.0.add((n * ci + i) * ih * iw), ih * iw)
            };
            let dyn_ = &dy[n * co * oh * ow..(n + 1) * co * oh * ow];
            for o in 0..co {
                let dyplane = &dyn_[o * oh * ow..(o + 1) * oh * ow];
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let wv = w[((o * ci + i) * 3 + ky) * 3 + kx];
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - 1;
                            if iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            let drow =
                                &mut dplane[iy as usize * iw..(iy as usize + 1) * iw];
                            let dyrow = &dyplane[oy * ow..(oy + 1) * ow];
                            if stride == 1 {
                                let ox0 = if kx == 0 { 1 } else { 0 };
                                let ox1 = (iw + 1 - kx).min(ow);
                                if ox0 < ox1 {
                                    axpy(
                                        &mut drow[ox0 + kx - 1..ox1 + kx - 1],
                                        &dyrow[ox0..ox1],
                                        wv,
                                    );
                                }
                            } else {
                                for ox in 0..ow {
                                    let ix = (ox * stride + kx) as isize - 1;
                                    if ix >= 0 && ix < iw as isize {
                                        drow[ix as usize] += wv * dyrow[ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Accumulates `dw`, `db` for a 3x3 conv.
pub fn conv3x3_backward_params(
    x: &[f32],
    d_in: Dims,
    dy: &[f32],
    co: usize,
    stride: usize,
    dw: &mut [f32],
    db: &mut [f32],
) {
    let (ci, ih, iw) = (d_in.c, d_in.h, d_in.w);
    let (oh, ow) = (conv3x3_out_extent(ih, stride), conv3x3_out_extent(iw, stride));
    let dw_ptr = SendPtr(dw.as_mut_ptr());
    let db_ptr = SendPtr(db.as_mut_ptr());
    for_each_range(co, |orange| {
        let dw_ptr = dw_ptr;
        let db_ptr = db_ptr;
        for o in orange {
            let dbo = unsafe { &mut *db_ptr.0.add(o) };
            for n in 0..d_in.n {
                let dyplane = &dy[(n * co + o) * oh * ow..(n * co + o + 1) * oh * ow];
                *dbo += dyplane.iter().sum::<f32>();
                for i in 0..ci {
                    let xplane = &x[(n * ci + i) * ih * iw..(n * ci + i + 1) * ih * iw];
                    for ky in 0..3usize {
                        for kx in 0..3usize {
                            let mut acc = 0.0f32;
                            for oy in 0..oh {
                                let iy = (oy * stride + ky) as isize - 1;
                                if iy < 0 || iy >= ih as isize {
                                    continue;
                                }
                                let xrow =
                                    &xplane[iy as usize * iw..(iy as usize + 1) * iw];
                                let dyrow = &dyplane[oy * ow..(oy + 1) * ow];
                                if stride == 1 {
                                    let ox0 = if kx == 0 { 1 } else { 0 };
                                    let ox1 = (iw + 1 - kx).min(ow);
                                    if ox0 < ox1 {
                                        acc += dot(
                                            &dyrow[ox0..ox1],
                                            &xrow[ox0 + kx - 1..ox1 + kx - 1],
                                        );
                                    }
                                } else {
                                    for ox in 0..ow {
                                        let ix = (ox * stride + kx) as isize - 1;
                                        if ix >= 0 && ix < iw as isize {
                                            acc += dyrow[ox] * xrow[ix as usize];
                                        }
                                    }
                                }
                            }
                            let idx = ((o * ci + i) * 3 + ky) * 3 + kx;
                            unsafe { *dw_ptr.0.add(idx) += acc };
                        }
                    }
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Pooling / resampling
// ---------------------------------------------------------------------------

pub fn pool2_out_extent(n: usize) -> usize {
    n.div_ceil(2)
}

/// 2x2 average pooling with stride 2; odd extents replicate the last row/col.
pub fn avgpool2_forward(x: &[f32], d: Dims, out: &mut [f32]) {
    let (h, w) = (d.h, d.w);
    let (oh, ow) = (pool2_out_extent(h), pool2_out_extent(w));
    for plane in 0..d.n * d.c {
        let xp = &x[plane * h * w..(plane + 1) * h * w];
        let op = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            let y0 = 2 * oy;
            let y1 = (2 * oy + 1).min(h - 1);
            for ox in 0..ow {
                let x0 = 2 * ox;
                let x1 = (2 * ox + 1).min(w - 1);
                op[oy * ow + ox] =
                    (xp[y0 * w + x0] + xp[y0 * w + x1] + xp[y1 * w + x0] + xp[y1 * w + x1])
                        * 0.25;
            }
        }
    }
}

pub fn avgpool2_backward(dy: &[f32], d_in: Dims, dx: &mut [f32]) {
    let (h, w) = (d_in.h, d_in.w);
    let (oh, ow) = (pool2_out_extent(h), pool2_out_extent(w));
    for plane in 0..d_in.n * d_in.c {
        let dyp = &dy[plane * oh * ow..(plane + 1) * oh * ow];
        let dxp = &mut dx[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            let y0 = 2 * oy;
            let y1 = (2 * oy + 1).min(h - 1);
            for ox in 0..ow {
                let x0 = 2 * ox;
                let x1 = (2 * ox + 1).min(w - 1);
                let g = dyp[oy * ow + ox] * 0.25;
                dxp[y0 * w + x0] += g;
                dxp[y0 * w + x1] += g;
                dxp[y1 * w + x0] += g;
                dxp[y1 * w + x1] += g;
            }
        }
    }
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2_forward(x: &[f32], d: Dims, out: &mut [f32]) {
    let (h, w) = (d.h, d.w);
    let (oh, ow) = (h * 2, w * 2);
    for plane in 0..d.n * d.c {
        let xp = &x[plane * h * w..(plane + 1) * h * w];
        let op = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            let src = &xp[(oy / 2) * w..(oy / 2 + 1) * w];
            let dst = &mut op[oy * ow..(oy + 1) * ow];
            for ox in 0..ow {
                dst[ox] = src[ox / 2];
            }
        }
    }
}

pub fn upsample2_backward(dy: &[f32], d_in: Dims, dx: &mut [f32]) {
    let (h, w) = (d_in.h, d_in.w);
    let ow = w * 2;
    for plane in 0..d_in.n * d_in.c {
        let dyp = &dy[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        let dxp = &mut dx[plane * h * w..(plane + 1) * h * w];
        for oy in 0..2 * h {
            let dyrow = &dyp[oy * ow..(oy + 1) * ow];
            let dxrow = &mut dxp[(oy / 2) * w..(oy / 2 + 1) * w];
            for ox in 0..ow {
                dxrow[ox / 2] += dyrow[ox];
            }
        }
    }
}

/// Per-channel spatial mean: `(N,C,H,W) -> (N,C)`; f64 accumulator.
pub fn global_avg_pool_forward(x: &[f32], d: Dims, out: &mut [f32]) {
    let hw = d.plane();
    for plane in 0..d.n * d.c {
        let sum: f64 = x[plane * hw..(plane + 1) * hw]
            .iter()
            .map(|&v| v as f64)
            .sum();
        out[plane] = (sum / hw as f64) as f32;
    }
}

pub fn global_avg_pool_backward(dy: &[f32], d_in: Dims, dx: &mut [f32]) {
    let hw = d_in.plane();
    for plane in 0..d_in.n * d_in.c {
        let g = dy[plane] / hw as f32;
        for v in &mut dx[plane * hw..(plane + 1) * hw] {
            *v += g;
        }
    }
}

/// Bilinear resize (half-pixel centers). Not differentiated: used only to
/// prepare condition inputs from source images.
pub fn bilinear_resize(x: &[f32], d: Dims, oh: usize, ow: usize, out: &mut [f32]) {
    let (h, w) = (d.h, d.w);
    let sy = h as f32 / oh as f32;
    let sx = w as f32 / ow as f32;
    for plane in 0..d.n * d.c {
        let xp = &x[plane * h * w..(plane + 1) * h * w];
        let op = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let ty = fy - y0 as f32;
            for ox in 0..ow {
                let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let tx = fx - x0 as f32;
                let a = xp[y0 * w + x0] + tx * (xp[y0 * w + x1] - xp[y0 * w + x0]);
                let b = xp[y1 * w + x0] + tx * (xp[y1 * w + x1] - xp[y1 * w + x0]);
                op[oy * ow + ox] = a + ty * (b - a);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Per-channel mean/biased-variance over (N, H, W); f64 accumulators.
pub fn channel_stats(x: &[f32], d: Dims) -> (Vec<f32>, Vec<f32>) {
    let hw = d.plane();
    let m = (d.n * hw) as f64;
    let mut mean = vec![0.0f32; d.c];
    let mut var = vec![0.0f32; d.c];
    for c in 0..d.c {
        let mut sum = 0.0f64;
        for n in 0..d.n {
            sum += x[(n * d.c + c) * hw..(n * d.c + c + 1) * hw]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>();
        }
        let mu = sum / m;
        let mut sq = 0.0f64;
        for n in 0..d.n {
            sq += x[(n * d.c + c) * hw..(n * d.c + c + 1) * hw]
                .iter()
                .map(|&v| {
                    let e = v as f64 - mu;
                    e * e
                })
                .sum::<f64>();
        }
        mean[c] = mu as f32;
        var[c] = (sq / m) as f32;
    }
    (mean, var)
}

/// `out = gamma * (x - mean) * invstd + beta`, per channel.
pub fn bn_normalize(
    x: &[f32],
    d: Dims,
    mean: &[f32],
    invstd: &[f32],
    gamma: &[f32],
    beta: &[f32],
    out: &mut [f32],
) {
    let hw = d.plane();
    for n in 0..d.n {
        for c in 0..d.c {
            let (mu, is, g, b) = (mean[c], invstd[c], gamma[c], beta[c]);
            let base = (n * d.c + c) * hw;
            for p in 0..hw {
                out[base + p] = g * (x[base + p] - mu) * is + b;
            }
        }
    }
}

/// Backward through train-mode batch norm (stats participate).
/// Returns nothing; accumulates into dx, dgamma, dbeta.
#[allow(clippy::too_many_arguments)]
pub fn bn_backward_train(
    x: &[f32],
    d: Dims,
    dy: &[f32],
    mean: &[f32],
    invstd: &[f32],
    gamma: &[f32],
    dx: &mut [f32],
    dgamma: &mut [f32],
    dbeta: &mut [f32],
) {
    let hw = d.plane();
    let m = (d.n * hw) as f64;
    for c in 0..d.c {
        let (mu, is) = (mean[c] as f64, invstd[c] as f64);
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for n in 0..d.n {
            let base = (n * d.c + c) * hw;
            for p in 0..hw {
                let g = dy[base + p] as f64;
                sum_dy += g;
                sum_dy_xhat += g * (x[base + p] as f64 - mu) * is;
            }
        }
        dgamma[c] += sum_dy_xhat as f32;
        dbeta[c] += sum_dy as f32;
        let k = gamma[c] as f64 * is;
        let mean_dy = sum_dy / m;
        let mean_dy_xhat = sum_dy_xhat / m;
        for n in 0..d.n {
            let base = (n * d.c + c) * hw;
            for p in 0..hw {
                let xhat = (x[base + p] as f64 - mu) * is;
                dx[base + p] +=
                    (k * (dy[base + p] as f64 - mean_dy - xhat * mean_dy_xhat)) as f32;
            }
        }
    }
}

/// Backward through eval-mode batch norm (stats are constants).
#[allow(clippy::too_many_arguments)]
pub fn bn_backward_eval(
    x: &[f32],
    d: Dims,
    dy: &[f32],
    mean: &[f32],
    invstd: &[f32],
    gamma: &[f32],
    dx: &mut [f32],
    dgamma: &mut [f32],
    dbeta: &mut [f32],
) {
    let hw = d.plane();
    for c in 0..d.c {
        let (mu, is, g) = (mean[c], invstd[c], gamma[c]);
        let mut sum_dy = 0.0f32;
        let mut sum_dy_xhat = 0.0f32;
        for n in 0..d.n {
            let base = (n * d.c + c) * hw;
            for p in 0..hw {
                let gy = dy[base + p];
                sum_dy += gy;
                sum_dy_xhat += gy * (x[base + p] - mu) * is;
                dx[base + p] += gy * g * is;
            }
        }
        dgamma[c] += sum_dy_xhat;
        dbeta[c] += sum_dy;
    }
}

/// Per-(instance, channel) stats over (H, W) for instance norm.
pub fn instance_stats(x: &[f32], d: Dims, eps: f32) -> (Vec<f32>, Vec<f32>) {
    let hw = d.plane();
    let mut mean = vec![0.0f32; d.n * d.c];
    let mut invstd = vec![0.0f32; d.n * d.c];
    for plane in 0..d.n * d.c {
        let xs = &x[plane * hw..(plane + 1) * hw];
        let mu = xs.iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
        let var = xs
            .iter()
            .map(|&v| {
                let e = v as f64 - mu;
                e * e
            })
            .sum::<f64>()
            / hw as f64;
        mean[plane] = mu as f32;
        invstd[plane] = (1.0 / (var + eps as f64).sqrt()) as f32;
    }
    (mean, invstd)
}

pub fn instance_normalize(x: &[f32], d: Dims, mean: &[f32], invstd: &[f32], out: &mut [f32]) {
    let hw = d.plane();
    for plane in 0..d.n * d.c {
        let (mu, is) = (mean[plane], invstd[plane]);
        for p in 0..hw {
            out[plane * hw + p] = (x[plane * hw + p] - mu) * is;
        }
    }
}

pub fn instance_norm_backward(
    x: &[f32],
    d: Dims,
    dy: &[f32],
    mean: &[f32],
    invstd: &[f32],
    dx: &mut [f32],
) {
    let hw = d.plane();
    for plane in 0..d.n * d.c {
        let (mu, is) = (mean[plane] as f64, invstd[plane] as f64);
        let base = plane * hw;
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for p in 0..hw {
            let g = dy[base + p] as f64;
            sum_dy += g;
            sum_dy_xhat += g * (x[base + p] as f64 - mu) * is;
        }
        let mean_dy = sum_dy / hw as f64;
        let mean_dy_xhat = sum_dy_xhat / hw as f64;
        for p in 0..hw {
            let xhat = (x[base + p] as f64 - mu) * is;
            dx[base + p] += (is * (dy[base + p] as f64 - mean_dy - xhat * mean_dy_xhat)) as f32;
        }
    }
}

// ---------------------------------------------------------------------------
// Channel broadcasting (scale/shift from 1-D or per-sample 2-D parameters)
// ---------------------------------------------------------------------------

/// `scale`/`shift` have length C (shared) or N*C (per sample).
pub fn modulate_channels_forward(
    x: &[f32],
    d: Dims,
    scale: &[f32],
    shift: Option<&[f32]>,
    per_sample: bool,
    out: &mut [f32],
) {
    let hw = d.plane();
    for n in 0..d.n {
        for c in 0..d.c {
            let idx = if per_sample { n * d.c + c } else { c };
            let s = scale[idx];
            let t = shift.map_or(0.0, |sh| sh[idx]);
            let base = (n * d.c + c) * hw;
            for p in 0..hw {
                out[base + p] = s * x[base + p] + t;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn modulate_channels_backward(
    x: &[f32],
    d: Dims,
    dy: &[f32],
    scale: &[f32],
    per_sample: bool,
    dx: &mut [f32],
    dscale: &mut [f32],
    dshift: Option<&mut [f32]>,
) {
    let hw = d.plane();
    let mut dshift = dshift;
    for n in 0..d.n {
        for c in 0..d.c {
            let idx = if per_sample { n * d.c + c } else { c };
            let s = scale[idx];
            let base = (n * d.c + c) * hw;
            let mut sum_dy = 0.0f32;
            dscale[idx] += dot(&dy[base..base + hw], &x[base..base + hw]);
            for p in 0..hw {
                sum_dy += dy[base + p];
                dx[base + p] += s * dy[base + p];
            }
            if let Some(ds) = dshift.as_deref_mut() {
                ds[idx] += sum_dy;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Fully connected: y[n,o] = b[o] + dot(w[o], x[n])
// ---------------------------------------------------------------------------

pub fn linear_forward(x: &[f32], n: usize, di: usize, w: &[f32], b: &[f32], dout: usize, out: &mut [f32]) {
    for s in 0..n {
        let xs = &x[s * di..(s + 1) * di];
        for o in 0..dout {
            out[s * dout + o] = b[o] + dot(&w[o * di..(o + 1) * di], xs);
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    x: &[f32],
    n: usize,
    di: usize,
    w: &[f32],
    dout: usize,
    dy: &[f32],
    dx: &mut [f32],
    dw: &mut [f32],
    db: &mut [f32],
) {
    for s in 0..n {
        let xs = &x[s * di..(s + 1) * di];
        for o in 0..dout {
            let g = dy[s * dout + o];
            db[o] += g;
            let wrow = &w[o * di..(o + 1) * di];
            let dwrow = &mut dw[o * di..(o + 1) * di];
            for i in 0..di {
                dwrow[i] += g * xs[i];
                dx[s * di + i] += g * wrow[i];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Box mean (separable, replicate edges) for the guided filter
// ---------------------------------------------------------------------------

fn box1d_rows(x: &[f32], h: usize, w: usize, radius: usize, out: &mut [f32]) {
    let norm = 1.0 / (2 * radius + 1) as f32;
    for y in 0..h {
        let row = &x[y * w..(y + 1) * w];
        let orow = &mut out[y * w..(y + 1) * w];
        for ox in 0..w {
            let mut s = 0.0f32;
            for k in 0..=2 * radius {
                let ix = (ox + k).saturating_sub(radius).min(w - 1);
                s += row[ix];
            }
            orow[ox] = s * norm;
        }
    }
}

fn box1d_cols(x: &[f32], h: usize, w: usize, radius: usize, out: &mut [f32]) {
    let norm = 1.0 / (2 * radius + 1) as f32;
    for oy in 0..h {
        for ox in 0..w {
            let mut s = 0.0f32;
            for k in 0..=2 * radius {
                let iy = (oy + k).saturating_sub(radius).min(h - 1);
                s += x[iy * w + ox];
            }
            out[oy * w + ox] = s * norm;
        }
    }
}

/// Normalized box filter with replicate edges, applied per plane.
pub fn box_mean_forward(x: &[f32], d: Dims, radius: usize, out: &mut [f32]) {
    let (h, w) = (d.h, d.w);
    let mut tmp = vec![0.0f32; h * w];
    for plane in 0..d.n * d.c {
        let xp = &x[plane * h * w..(plane + 1) * h * w];
        let op = &mut out[plane * h * w..(plane + 1) * h * w];
        box1d_rows(xp, h, w, radius, &mut tmp);
        box1d_cols(&tmp, h, w, radius, op);
    }
}

fn box1d_rows_adjoint(dy: &[f32], h: usize, w: usize, radius: usize, dx: &mut [f32]) {
    let norm = 1.0 / (2 * radius + 1) as f32;
    for y in 0..h {
        let dyrow = &dy[y * w..(y + 1) * w];
        let dxrow = &mut dx[y * w..(y + 1) * w];
        for ox in 0..w {
            let g = dyrow[ox] * norm;
            for k in 0..=2 * radius {
                let ix = (ox + k).saturating_sub(radius).min(w - 1);
                dxrow[ix] += g;
            }
        }
    }
}

fn box1d_cols_adjoint(dy: &[f32], h: usize, w: usize, radius: usize, dx: &mut [f32]) {
    let norm = 1.0 / (2 * radius + 1) as f32;
    for oy in 0..h {
        for ox in 0..w {
            let g = dy[oy * w + ox] * norm;
            for k in 0..=2 * radius {
                let iy = (oy + k).saturating_sub(radius).min(h - 1);
                dx[iy * w + ox] += g;
            }
        }
    }
}

pub fn box_mean_backward(dy: &[f32], d: Dims, radius: usize, dx: &mut [f32]) {
    let (h, w) = (d.h, d.w);
    let mut tmp = vec![0.0f32; h * w];
    for plane in 0..d.n * d.c {
        let dyp = &dy[plane * h * w..(plane + 1) * h * w];
        let dxp = &mut dx[plane * h * w..(plane + 1) * h * w];
        tmp.fill(0.0);
        // forward = cols(rows(x)); adjoint = rows_adj(cols_adj(dy))
        box1d_cols_adjoint(dyp, h, w, radius, &mut tmp);
        box1d_rows_adjoint(&tmp, h, w, radius, dxp);
    }
}

// ---------------------------------------------------------------------------
// Replicate padding / cropping (spatial bookkeeping)
// ---------------------------------------------------------------------------

/// Pads bottom by `pad_h` and right by `pad_w`, replicating edge values.
pub fn pad_replicate_forward(x: &[f32], d: Dims, pad_h: usize, pad_w: usize, out: &mut [f32]) {
    let (h, w) = (d.h, d.w);
    let (oh, ow) = (h + pad_h, w + pad_w);
    for plane in 0..d.n * d.c {
        let xp = &x[plane * h * w..(plane + 1) * h * w];
        let op = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            let sy = oy.min(h - 1);
            for ox in 0..ow {
                op[oy * ow + ox] = xp[sy * w + ox.min(w - 1)];
            }
        }
    }
}

pub fn pad_replicate_backward(dy: &[f32], d_in: Dims, pad_h: usize, pad_w: usize, dx: &mut [f32]) {
    let (h, w) = (d_in.h, d_in.w);
    let (oh, ow) = (h + pad_h, w + pad_w);
    for plane in 0..d_in.n * d_in.c {
        let dyp = &dy[plane * oh * ow..(plane + 1) * oh * ow];
        let dxp = &mut dx[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            let sy = oy.min(h - 1);
            for ox in 0..ow {
                dxp[sy * w + ox.min(w - 1)] += dyp[oy * ow + ox];
            }
        }
    }
}

/// Keeps the top-left `oh x ow` corner.
pub fn crop_forward(x: &[f32], d: Dims, oh: usize, ow: usize, out: &mut [f32]) {
    let (h, w) = (d.h, d.w);
    for plane in 0..d.n * d.c {
        let xp = &x[plane * h * w..(plane + 1) * h * w];
        let op = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            op[oy * ow..(oy + 1) * ow].copy_from_slice(&xp[oy * w..oy * w + ow]);
        }
    }
}

pub fn crop_backward(dy: &[f32], d_in: Dims, oh: usize, ow: usize, dx: &mut [f32]) {
    let (h, w) = (d_in.h, d_in.w);
    for plane in 0..d_in.n * d_in.c {
        let dyp = &dy[plane * oh * ow..(plane + 1) * oh * ow];
        let dxp = &mut dx[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                dxp[oy * w + ox] += dyp[oy * ow + ox];
            }
        }
    }
}

// ---------------------------------------------------------------------------

/// Raw pointer wrapper so disjoint-range writers can cross thread bounds.
#[derive(Clone, Copy)]
struct SendPtr(*mut f32);
unsafe impl Send for SendPtr {}
unsafe impl Sync for SendPtr {}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(n: usize, c: usize, h: usize, w: usize) -> Dims {
        Dims { n, c, h, w }
    }

    #[test]
    fn conv3x3_all_ones_cross_correlation() {
        // 1-channel 3x3 ones, kernel ones, b=0: center 9, corners 4.
        let x = vec![1.0f32; 9];
        let w = vec![1.0f32; 9];
        let mut out = vec![0.0f32; 9];
        conv3x3_forward(&x, dims(1, 1, 3, 3), &w, &[0.0], 1, 1, &mut out);
        assert_eq!(out[4], 9.0);
        assert_eq!(out[0], 4.0);
        assert_eq!(out[2], 4.0);
        assert_eq!(out[6], 4.0);
        assert_eq!(out[8], 4.0);
        assert_eq!(out[1], 6.0);
    }

    #[test]
    fn conv3x3_centered_delta_is_identity() {
        let x: Vec<f32> = (0..25).map(|v| v as f32 * 0.1).collect();
        let mut w = vec![0.0f32; 9];
        w[4] = 1.0;
        let mut out = vec![0.0f32; 25];
        conv3x3_forward(&x, dims(1, 1, 5, 5), &w, &[0.0], 1, 1, &mut out);
        assert_eq!(out, x);
    }

    #[test]
    fn conv3x3_stride2_shape_law() {
        assert_eq!(conv3x3_out_extent(4, 2), 2);
        assert_eq!(conv3x3_out_extent(5, 2), 3);
        assert_eq!(conv3x3_out_extent(135, 2), 68);
        let x = vec![1.0f32; 16];
        let w = vec![0.0f32; 9];
        let mut out = vec![0.0f32; 4];
        conv3x3_forward(&x, dims(1, 1, 4, 4), &w, &[2.5], 1, 2, &mut out);
        assert_eq!(out, vec![2.5; 4]);
    }

    #[test]
    fn avgpool2_basic_and_replicate() {
        // 2x2 [1,2;3,4] -> 2.5
        let mut out = vec![0.0f32];
        avgpool2_forward(&[1.0, 2.0, 3.0, 4.0], dims(1, 1, 2, 2), &mut out);
        assert_eq!(out[0], 2.5);
        // 3x3 -> 2x2 via replicate padding; bottom-right cell = x[2][2]
        let x: Vec<f32> = (1..=9).map(|v| v as f32).collect();
        let mut out = vec![0.0f32; 4];
        avgpool2_forward(&x, dims(1, 1, 3, 3), &mut out);
        // windows: [1,2,4,5]=3.0 [3,3,6,6]=4.5 [7,8,7,8]=7.5 [9,9,9,9]=9.0
        assert_eq!(out, vec![3.0, 4.5, 7.5, 9.0]);
    }

    #[test]
    fn upsample2_replicates_values() {
        let mut out = vec![0.0f32; 4];
        upsample2_forward(&[3.25], dims(1, 1, 1, 1), &mut out);
        assert_eq!(out, vec![3.25; 4]);
    }

    #[test]
    fn box_mean_constant_is_identity() {
        let x = vec![0.7f32; 36];
        let mut out = vec![0.0f32; 36];
        box_mean_forward(&x, dims(1, 1, 6, 6), 2, &mut out);
        for v in out {
            assert!((v - 0.7).abs() < 1e-6);
        }
    }

    #[test]
    fn box_mean_adjoint_identity() {
        // <Ax, y> == <x, A^T y> for random x, y.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let d = dims(1, 1, 7, 5);
        let x: Vec<f32> = (0..35).map(|_| rng.gen::<f32>()).collect();
        let y: Vec<f32> = (0..35).map(|_| rng.gen::<f32>()).collect();
        let mut ax = vec![0.0f32; 35];
        box_mean_forward(&x, d, 2, &mut ax);
        let mut aty = vec![0.0f32; 35];
        box_mean_backward(&y, d, 2, &mut aty);
        let lhs: f64 = ax.iter().zip(&y).map(|(&a, &b)| (a * b) as f64).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(&a, &b)| (a * b) as f64).sum();
        assert!((lhs - rhs).abs() < 1e-4, "lhs={lhs} rhs={rhs}");
    }

    #[test]
    fn conv1x1_matches_direct_dot() {
        // one pixel (3,4), w=[[1,2]], b=[0] -> 11
        let mut out = vec![0.0f32];
        conv1x1_forward(&[3.0, 4.0], dims(1, 2, 1, 1), &[1.0, 2.0], &[0.0], 1, &mut out);
        assert_eq!(out[0], 11.0);
    }

    #[test]
    fn pad_crop_round_trip() {
        let x: Vec<f32> = (0..12).map(|v| v as f32).collect();
        let d = dims(1, 1, 3, 4);
        let mut padded = vec![0.0f32; 5 * 6];
        pad_replicate_forward(&x, d, 2, 2, &mut padded);
        let mut back = vec![0.0f32; 12];
        crop_forward(&padded, dims(1, 1, 5, 6), 3, 4, &mut back);
        assert_eq!(back, x);
    }
}
