//! Raw numeric kernels behind the graph ops. All buffers are NCHW, row-major.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// `c = a · b` (or `c += a · b` when `accumulate`), with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    c: &mut [f32],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the callers size every buffer to cover the strided m×k, k×n and m×n extents.
    unsafe {
        matrixmultiply::sgemm(
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

fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(x: &[f32], n: usize, g: &ConvGeom, weight: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    let (k, p) = (g.k(), g.p());
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * p;
    let mut out = vec![0.0f32; n * out_sz];
    let mut cols = vec![0.0f32; k * p];
    for s in 0..n {
        im2col(&x[s * in_sz..(s + 1) * in_sz], g, &mut cols);
        let o = &mut out[s * out_sz..(s + 1) * out_sz];
        gemm(g.c_out, k, p, weight, k as isize, 1, &cols, p as isize, 1, o, false);
        if let Some(b) = bias {
            for (co, chunk) in o.chunks_mut(p).enumerate() {
                let bv = b[co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

pub struct ConvGrads {
    pub dx: Option<Vec<f32>>,
    pub dw: Option<Vec<f32>>,
    pub db: Option<Vec<f32>>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f32],
    n: usize,
    g: &ConvGeom,
    weight: &[f32],
    dy: &[f32],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads {
    let (k, p) = (g.k(), g.p());
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * p;
    let mut dx = need_dx.then(|| vec![0.0f32; n * in_sz]);
    let mut dw = need_dw.then(|| vec![0.0f32; g.c_out * k]);
    let mut db = need_db.then(|| vec![0.0f32; g.c_out]);
    let mut cols = vec![0.0f32; k * p];
    for s in 0..n {
        let dys = &dy[s * out_sz..(s + 1) * out_sz];
        if let Some(dw) = dw.as_mut() {
            im2col(&x[s * in_sz..(s + 1) * in_sz], g, &mut cols);
            // dW[co, k] += dY[co, p] · cols[k, p]ᵀ
            gemm(g.c_out, p, k, dys, p as isize, 1, &cols, 1, p as isize, dw, true);
        }
        if let Some(db) = db.as_mut() {
            for (co, chunk) in dys.chunks(p).enumerate() {
                db[co] += chunk.iter().sum::<f32>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            // dcols[k, p] = W[co, k]ᵀ · dY[co, p]
            gemm(k, g.c_out, p, weight, 1, k as isize, dys, p as isize, 1, &mut cols, false);
            col2im(&cols, g, &mut dx[s * in_sz..(s + 1) * in_sz]);
        }
    }
    ConvGrads { dx, dw, db }
}

/// Reflection index (no edge repeat), valid while the pad is smaller than the extent.
fn reflect(i: isize, len: usize) -> usize {
    let len = len as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= len {
        i = 2 * (len - 1) - i;
    }
    i as usize
}

/// Pads `[top, bottom, left, right]` by reflection on every plane.
pub fn reflect_pad_forward(x: &[f32], planes: usize, h: usize, w: usize, pads: [usize; 4]) -> Vec<f32> {
    let [t, b, l, r] = pads;
    let (oh, ow) = (h + t + b, w + l + r);
    let mut out = vec![0.0f32; planes * oh * ow];
    for pl in 0..planes {
        let src = &x[pl * h * w..(pl + 1) * h * w];
        let dst = &mut out[pl * oh * ow..(pl + 1) * oh * ow];
        for oy in 0..oh {
            let iy = reflect(oy as isize - t as isize, h);
            for ox in 0..ow {
                let ix = reflect(ox as isize - l as isize, w);
                dst[oy * ow + ox] = src[iy * w + ix];
            }
        }
    }
    out
}

pub fn reflect_pad_backward(dy: &[f32], planes: usize, h: usize, w: usize, pads: [usize; 4]) -> Vec<f32> {
    let [t, b, l, r] = pads;
    let (oh, ow) = (h + t + b, w + l + r);
    let mut dx = vec![0.0f32; planes * h * w];
    for pl in 0..planes {
        let src = &dy[pl * oh * ow..(pl + 1) * oh * ow];
        let dst = &mut dx[pl * h * w..(pl + 1) * h * w];
        for oy in 0..oh {
            let iy = reflect(oy as isize - t as isize, h);
            for ox in 0..ow {
                let ix = reflect(ox as isize - l as isize, w);
                dst[iy * w + ix] += src[oy * ow + ox];
            }
        }
    }
    dx
}

/// Source taps for ×2 bilinear upsampling with half-pixel centers.
fn upsample_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f32)> {
    (0..out_len)
        .map(|o| {
            let src = ((o as f32 + 0.5) * 0.5 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f32)
        })
        .collect()
}

pub fn upsample2x_forward(x: &[f32], planes: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (2 * h, 2 * w);
    let ty = upsample_taps(oh, h);
    let tx = upsample_taps(ow, w);
    let mut out = vec![0.0f32; planes * oh * ow];
    for pl in 0..planes {
        let src = &x[pl * h * w..(pl + 1) * h * w];
        let dst = &mut out[pl * oh * ow..(pl + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[oy * ow + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn upsample2x_backward(dy: &[f32], planes: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (2 * h, 2 * w);
    let ty = upsample_taps(oh, h);
    let tx = upsample_taps(ow, w);
    let mut dx = vec![0.0f32; planes * h * w];
    for pl in 0..planes {
        let src = &dy[pl * oh * ow..(pl + 1) * oh * ow];
        let dst = &mut dx[pl * h * w..(pl + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let g = src[oy * ow + ox];
                dst[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += g * (1.0 - fy) * fx;
                dst[y1 * w + x0] += g * fy * (1.0 - fx);
                dst[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    dx
}

/// Per-plane normalization without affine parameters. Returns output and per-plane `1/σ`.
pub fn instance_norm_forward(x: &[f32], planes: usize, hw: usize, eps: f32) -> (Vec<f32>, Vec<f32>) {
    let mut out = vec![0.0f32; x.len()];
    let mut inv_std = vec![0.0f32; planes];
    for pl in 0..planes {
        let src = &x[pl * hw..(pl + 1) * hw];
        let mean = src.iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
        let var = src.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / hw as f64;
        let rs = 1.0 / (var + eps as f64).sqrt();
        inv_std[pl] = rs as f32;
        let (mean, rs) = (mean as f32, rs as f32);
        for (o, &v) in out[pl * hw..(pl + 1) * hw].iter_mut().zip(src) {
            *o = (v - mean) * rs;
        }
    }
    (out, inv_std)
}

/// Uses the normalized output `y` saved by the forward pass.
pub fn instance_norm_backward(y: &[f32], inv_std: &[f32], dy: &[f32], hw: usize) -> Vec<f32> {
    let mut dx = vec![0.0f32; y.len()];
    for (pl, &rs) in inv_std.iter().enumerate() {
        let ys = &y[pl * hw..(pl + 1) * hw];
        let gs = &dy[pl * hw..(pl + 1) * hw];
        let mean_g = gs.iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
        let mean_gy = gs.iter().zip(ys).map(|(&g, &v)| g as f64 * v as f64).sum::<f64>() / hw as f64;
        let (mean_g, mean_gy) = (mean_g as f32, mean_gy as f32);
        for ((d, &g), &v) in dx[pl * hw..(pl + 1) * hw].iter_mut().zip(gs).zip(ys) {
            *d = rs * (g - mean_g - v * mean_gy);
        }
    }
    dx
}

/// `y[r, o] = Σ_i x[r, i] · w[o, i] + b[o]`.
pub fn linear_forward(x: &[f32], rows: usize, d_in: usize, w: &[f32], d_out: usize, b: &[f32]) -> Vec<f32> {
    let mut y = vec![0.0f32; rows * d_out];
    gemm(rows, d_in, d_out, x, d_in as isize, 1, w, 1, d_in as isize, &mut y, false);
    for row in y.chunks_mut(d_out) {
        for (v, &bv) in row.iter_mut().zip(b) {
            *v += bv;
        }
    }
    y
}

pub struct LinearGrads {
    pub dx: Option<Vec<f32>>,
    pub dw: Option<Vec<f32>>,
    pub db: Option<Vec<f32>>,
}

#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    x: &[f32],
    rows: usize,
    d_in: usize,
    w: &[f32],
    d_out: usize,
    dy: &[f32],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> LinearGrads {
    let dx = need_dx.then(|| {
        let mut dx = vec![0.0f32; rows * d_in];
        gemm(rows, d_out, d_in, dy, d_out as isize, 1, w, d_in as isize, 1, &mut dx, false);
        dx
    });
    let dw = need_dw.then(|| {
        let mut dw = vec![0.0f32; d_out * d_in];
        gemm(d_out, rows, d_in, dy, 1, d_out as isize, x, d_in as isize, 1, &mut dw, false);
        dw
    });
    let db = need_db.then(|| {
        let mut db = vec![0.0f32; d_out];
        for row in dy.chunks(d_out) {
            for (d, &g) in db.iter_mut().zip(row) {
                *d += g;
            }
        }
        db
    });
    LinearGrads { dx, dw, db }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f32], g: &ConvGeom, w: &[f32]) -> Vec<f32> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.c_out * oh * ow];
        for co in 0..g.c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..g.c_in {
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                acc += x[(ci * g.h + iy as usize) * g.w + ix as usize]
                                    * w[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loop() {
        let g = ConvGeom { c_in: 3, h: 9, w: 7, c_out: 4, kh: 4, kw: 4, stride: 2, pad: 1 };
        let x: Vec<f32> = (0..3 * 9 * 7).map(|i| ((i * 37 % 11) as f32 - 5.0) * 0.1).collect();
        let w: Vec<f32> = (0..4 * 3 * 16).map(|i| ((i * 13 % 7) as f32 - 3.0) * 0.05).collect();
        let fast = conv2d_forward(&x, 1, &g, &w, None);
        let slow = naive_conv(&x, &g, &w);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn reflect_pad_mirrors_without_edge_repeat() {
        let x = [1.0, 2.0, 3.0];
        let y = reflect_pad_forward(&x, 1, 1, 3, [0, 0, 2, 2]);
        assert_eq!(y, vec![3.0, 2.0, 1.0, 2.0, 3.0, 2.0, 1.0]);
    }

    #[test]
    fn upsample_preserves_constants() {
        let x = vec![0.75f32; 2 * 3 * 5];
        let y = upsample2x_forward(&x, 2, 3, 5);
        assert_eq!(y.len(), 2 * 6 * 10);
        assert!(y.iter().all(|&v| (v - 0.75).abs() < 1e-7));
    }
}
