//! Numeric kernels behind the graph ops.
//!
//! All loops run in a fixed order so results are bit-reproducible for a
//! given input; nothing here is parallel. Convolutions are direct
//! (scalar-times-slice FMA over the contiguous minor axis), which
//! autovectorizes well and avoids im2col buffers.

use super::Scalar;

/// a[m,k] * b[k,n] -> out[m,n], ikj order.
pub fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::ZERO; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += brow[j] * av;
            }
        }
    }
    out
}

pub fn transpose2d<S: Scalar>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::ZERO; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Output spatial extent for same-padded conv: floor((n + 2*(k/2) - k)/s) + 1.
pub fn conv_out_extent(n: usize, k: usize, s: usize) -> usize {
    (n + 2 * (k / 2) - k) / s + 1
}

/// 2D same-padded convolution. x[B,C,H,W], w[O,C,kh,kw], odd kernels.
pub fn conv2d<S: Scalar>(
    x: &[S],
    w: &[S],
    bsz: usize,
    ic: usize,
    h: usize,
    wd: usize,
    oc: usize,
    kh: usize,
    kw: usize,
    stride: usize,
) -> Vec<S> {
    let (ph, pw) = (kh / 2, kw / 2);
    let ho = conv_out_extent(h, kh, stride);
    let wo = conv_out_extent(wd, kw, stride);
    let mut y = vec![S::ZERO; bsz * oc * ho * wo];
    for b in 0..bsz {
        for o in 0..oc {
            let ybase = (b * oc + o) * ho * wo;
            for c in 0..ic {
                let xbase = (b * ic + c) * h * wd;
                for dy in 0..kh {
                    for dx in 0..kw {
                        let wv = w[((o * ic + c) * kh + dy) * kw + dx];
                        for py in 0..ho {
                            let qy = (stride * py + dy) as isize - ph as isize;
                            if qy < 0 || qy >= h as isize {
                                continue;
                            }
                            let xrow = xbase + qy as usize * wd;
                            let yrow = ybase + py * wo;
                            if stride == 1 {
                                // qx = px + dx - pw must lie in [0, wd)
                                let lo = pw.saturating_sub(dx);
                                let hi = (wd + pw - dx).min(wo);
                                if lo >= hi {
                                    continue;
                                }
                                let xoff = xrow + lo + dx - pw;
                                let (ys, xs) = (&mut y[yrow + lo..yrow + hi], &x[xoff..xoff + hi - lo]);
                                for i in 0..ys.len() {
                                    ys[i] += xs[i] * wv;
                                }
                            } else {
                                for px in 0..wo {
                                    let qx = (stride * px + dx) as isize - pw as isize;
                                    if qx < 0 || qx >= wd as isize {
                                        continue;
                                    }
                                    let xv = x[xrow + qx as usize];
                                    y[yrow + px] += xv * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Gradient of `conv2d` w.r.t. its input. g[B,O,Ho,Wo], w[O,C,kh,kw] -> [B,C,H,W].
pub fn conv2d_input_grad<S: Scalar>(
    g: &[S],
    w: &[S],
    bsz: usize,
    ic: usize,
    h: usize,
    wd: usize,
    oc: usize,
    kh: usize,
    kw: usize,
    stride: usize,
) -> Vec<S> {
    if stride == 1 {
        // Equivalent to a same-padded conv of g with the kernel flipped
        // spatially and transposed over (O, C).
        let mut wt = vec![S::ZERO; w.len()];
        for o in 0..oc {
            for c in 0..ic {
                for dy in 0..kh {
                    for dx in 0..kw {
                        wt[((c * oc + o) * kh + (kh - 1 - dy)) * kw + (kw - 1 - dx)] =
                            w[((o * ic + c) * kh + dy) * kw + dx];
                    }
                }
            }
        }
        return conv2d(g, &wt, bsz, oc, h, wd, ic, kh, kw, 1);
    }
    let (ph, pw) = (kh / 2, kw / 2);
    let ho = conv_out_extent(h, kh, stride);
    let wo = conv_out_extent(wd, kw, stride);
    let mut z = vec![S::ZERO; bsz * ic * h * wd];
    for b in 0..bsz {
        for o in 0..oc {
            let gbase = (b * oc + o) * ho * wo;
            for c in 0..ic {
                let zbase = (b * ic + c) * h * wd;
                for dy in 0..kh {
                    for dx in 0..kw {
                        let wv = w[((o * ic + c) * kh + dy) * kw + dx];
                        for py in 0..ho {
                            let qy = (stride * py + dy) as isize - ph as isize;
                            if qy < 0 || qy >= h as isize {
                                continue;
                            }
                            for px in 0..wo {
                                let qx = (stride * px + dx) as isize - pw as isize;
                                if qx < 0 || qx >= wd as isize {
                                    continue;
                                }
                                let zi = zbase + qy as usize * wd + qx as usize;
                                z[zi] += g[gbase + py * wo + px] * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    z
}

/// Gradient of `conv2d` w.r.t. its weights. x[B,C,H,W], g[B,O,Ho,Wo] -> [O,C,kh,kw].
pub fn conv2d_weight_grad<S: Scalar>(
    x: &[S],
    g: &[S],
    bsz: usize,
    ic: usize,
    h: usize,
    wd: usize,
    oc: usize,
    kh: usize,
    kw: usize,
    stride: usize,
) -> Vec<S> {
    let (ph, pw) = (kh / 2, kw / 2);
    let ho = conv_out_extent(h, kh, stride);
    let wo = conv_out_extent(wd, kw, stride);
    let mut v = vec![S::ZERO; oc * ic * kh * kw];
    for b in 0..bsz {
        for o in 0..oc {
            let gbase = (b * oc + o) * ho * wo;
            for c in 0..ic {
                let xbase = (b * ic + c) * h * wd;
                for dy in 0..kh {
                    for dx in 0..kw {
                        let mut acc = S::ZERO;
                        for py in 0..ho {
                            let qy = (stride * py + dy) as isize - ph as isize;
                            if qy < 0 || qy >= h as isize {
                                continue;
                            }
                            let xrow = xbase + qy as usize * wd;
                            let grow = gbase + py * wo;
                            if stride == 1 {
                                let lo = pw.saturating_sub(dx);
                                let hi = (wd + pw - dx).min(wo);
                                if lo >= hi {
                                    continue;
                                }
                                let xoff = xrow + lo + dx - pw;
                                let (gs, xs) = (&g[grow + lo..grow + hi], &x[xoff..xoff + hi - lo]);
                                for i in 0..gs.len() {
                                    acc += xs[i] * gs[i];
                                }
                            } else {
                                for px in 0..wo {
                                    let qx = (stride * px + dx) as isize - pw as isize;
                                    if qx < 0 || qx >= wd as isize {
                                        continue;
                                    }
                                    acc += x[xrow + qx as usize] * g[grow + px];
                                }
                            }
                        }
                        let vi = ((o * ic + c) * kh + dy) * kw + dx;
                        v[vi] += acc;
                    }
                }
            }
        }
    }
    v
}

/// 3D same-padded convolution. x[B,C,D,H,W], w[O,C,kd,kh,kw], odd kernels.
#[allow(clippy::too_many_arguments)]
pub fn conv3d<S: Scalar>(
    x: &[S],
    w: &[S],
    bsz: usize,
    ic: usize,
    d: usize,
    h: usize,
    wd: usize,
    oc: usize,
    kd: usize,
    kh: usize,
    kw: usize,
    stride: usize,
) -> Vec<S> {
    let (pd, ph, pw) = (kd / 2, kh / 2, kw / 2);
    let dout = conv_out_extent(d, kd, stride);
    let ho = conv_out_extent(h, kh, stride);
    let wo = conv_out_extent(wd, kw, stride);
    let mut y = vec![S::ZERO; bsz * oc * dout * ho * wo];
    for b in 0..bsz {
        for o in 0..oc {
            let ybase = (b * oc + o) * dout * ho * wo;
            for c in 0..ic {
                let xbase = (b * ic + c) * d * h * wd;
                for dz in 0..kd {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let wv = w[(((o * ic + c) * kd + dz) * kh + dy) * kw + dx];
                            for pz in 0..dout {
                                let qz = (stride * pz + dz) as isize - pd as isize;
                                if qz < 0 || qz >= d as isize {
                                    continue;
                                }
                                for py in 0..ho {
                                    let qy = (stride * py + dy) as isize - ph as isize;
                                    if qy < 0 || qy >= h as isize {
                                        continue;
                                    }
                                    let xrow = xbase + (qz as usize * h + qy as usize) * wd;
                                    let yrow = ybase + (pz * ho + py) * wo;
                                    for px in 0..wo {
                                        let qx = (stride * px + dx) as isize - pw as isize;
                                        if qx < 0 || qx >= wd as isize {
                                            continue;
                                        }
                                        let xv = x[xrow + qx as usize];
                                        y[yrow + px] += xv * wv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Gradient of `conv3d` w.r.t. input.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_input_grad<S: Scalar>(
    g: &[S],
    w: &[S],
    bsz: usize,
    ic: usize,
    d: usize,
    h: usize,
    wd: usize,
    oc: usize,
    kd: usize,
    kh: usize,
    kw: usize,
    stride: usize,
) -> Vec<S> {
    let (pd, ph, pw) = (kd / 2, kh / 2, kw / 2);
    let dout = conv_out_extent(d, kd, stride);
    let ho = conv_out_extent(h, kh, stride);
    let wo = conv_out_extent(wd, kw, stride);
    let mut z = vec![S::ZERO; bsz * ic * d * h * wd];
    for b in 0..bsz {
        for o in 0..oc {
            let gbase = (b * oc + o) * dout * ho * wo;
            for c in 0..ic {
                let zbase = (b * ic + c) * d * h * wd;
                for dz in 0..kd {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let wv = w[(((o * ic + c) * kd + dz) * kh + dy) * kw + dx];
                            for pz in 0..dout {
                                let qz = (stride * pz + dz) as isize - pd as isize;
                                if qz < 0 || qz >= d as isize {
                                    continue;
                                }
                                for py in 0..ho {
                                    let qy = (stride * py + dy) as isize - ph as isize;
                                    if qy < 0 || qy >= h as isize {
                                        continue;
                                    }
                                    let zrow = zbase + (qz as usize * h + qy as usize) * wd;
                                    let grow = gbase + (pz * ho + py) * wo;
                                    for px in 0..wo {
                                        let qx = (stride * px + dx) as isize - pw as isize;
                                        if qx < 0 || qx >= wd as isize {
                                            continue;
                                        }
                                        let zi = zrow + qx as usize;
                                        z[zi] += g[grow + px] * wv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    z
}

/// Gradient of `conv3d` w.r.t. weights.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_weight_grad<S: Scalar>(
    x: &[S],
    g: &[S],
    bsz: usize,
    ic: usize,
    d: usize,
    h: usize,
    wd: usize,
    oc: usize,
    kd: usize,
    kh: usize,
    kw: usize,
    stride: usize,
) -> Vec<S> {
    let (pd, ph, pw) = (kd / 2, kh / 2, kw / 2);
    let dout = conv_out_extent(d, kd, stride);
    let ho = conv_out_extent(h, kh, stride);
    let wo = conv_out_extent(wd, kw, stride);
    let mut v = vec![S::ZERO; oc * ic * kd * kh * kw];
    for b in 0..bsz {
        for o in 0..oc {
            let gbase = (b * oc + o) * dout * ho * wo;
            for c in 0..ic {
                let xbase = (b * ic + c) * d * h * wd;
                for dz in 0..kd {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let mut acc = S::ZERO;
                            for pz in 0..dout {
                                let qz = (stride * pz + dz) as isize - pd as isize;
                                if qz < 0 || qz >= d as isize {
                                    continue;
                                }
                                for py in 0..ho {
                                    let qy = (stride * py + dy) as isize - ph as isize;
                                    if qy < 0 || qy >= h as isize {
                                        continue;
                                    }
                                    let xrow = xbase + (qz as usize * h + qy as usize) * wd;
                                    let grow = gbase + (pz * ho + py) * wo;
                                    for px in 0..wo {
                                        let qx = (stride * px + dx) as isize - pw as isize;
                                        if qx < 0 || qx >= wd as isize {
                                            continue;
                                        }
                                        acc += x[xrow + qx as usize] * g[grow + px];
                                    }
                                }
                            }
                            v[(((o * ic + c) * kd + dz) * kh + dy) * kw + dx] += acc;
                        }
                    }
                }
            }
        }
    }
    v
}

/// 2x2-style max pooling with stride = window. Returns pooled values and the
/// flat source index of each maximum (first hit wins on ties).
pub fn maxpool2d<S: Scalar>(
    x: &[S],
    bsz: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
) -> (Vec<S>, Vec<u32>) {
    let (ho, wo) = (h / k, w / k);
    let mut y = vec![S::ZERO; bsz * c * ho * wo];
    let mut arg = vec![0u32; y.len()];
    for bc in 0..bsz * c {
        let xbase = bc * h * w;
        let ybase = bc * ho * wo;
        for py in 0..ho {
            for px in 0..wo {
                let mut best = x[xbase + (py * k) * w + px * k];
                let mut bi = xbase + (py * k) * w + px * k;
                for dy in 0..k {
                    for dx in 0..k {
                        let i = xbase + (py * k + dy) * w + (px * k + dx);
                        if x[i] > best {
                            best = x[i];
                            bi = i;
                        }
                    }
                }
                y[ybase + py * wo + px] = best;
                arg[ybase + py * wo + px] = bi as u32;
            }
        }
    }
    (y, arg)
}

pub fn avgpool2d<S: Scalar>(x: &[S], bsz: usize, c: usize, h: usize, w: usize, k: usize) -> Vec<S> {
    let (ho, wo) = (h / k, w / k);
    let inv = S::from_f64(1.0 / (k * k) as f64);
    let mut y = vec![S::ZERO; bsz * c * ho * wo];
    for bc in 0..bsz * c {
        let xbase = bc * h * w;
        let ybase = bc * ho * wo;
        for py in 0..ho {
            for px in 0..wo {
                let mut acc = S::ZERO;
                for dy in 0..k {
                    for dx in 0..k {
                        acc += x[xbase + (py * k + dy) * w + (px * k + dx)];
                    }
                }
                y[ybase + py * wo + px] = acc * inv;
            }
        }
    }
    y
}

pub fn upsample_nearest2d<S: Scalar>(
    x: &[S],
    bsz: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
) -> Vec<S> {
    let (ho, wo) = (h * f, w * f);
    let mut y = vec![S::ZERO; bsz * c * ho * wo];
    for bc in 0..bsz * c {
        let xbase = bc * h * w;
        let ybase = bc * ho * wo;
        for py in 0..ho {
            let sy = py / f;
            for px in 0..wo {
                y[ybase + py * wo + px] = x[xbase + sy * w + px / f];
            }
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Maximally naive convolution used as the oracle for the production
    /// kernel: seven explicit loops, no slicing shortcuts.
    fn conv2d_naive(
        x: &[f64],
        w: &[f64],
        bsz: usize,
        ic: usize,
        h: usize,
        wd: usize,
        oc: usize,
        kh: usize,
        kw: usize,
        stride: usize,
    ) -> Vec<f64> {
        let (ph, pw) = (kh as isize / 2, kw as isize / 2);
        let ho = conv_out_extent(h, kh, stride);
        let wo = conv_out_extent(wd, kw, stride);
        let mut y = vec![0.0; bsz * oc * ho * wo];
        for b in 0..bsz {
            for o in 0..oc {
                for py in 0..ho {
                    for px in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..ic {
                            for dy in 0..kh {
                                for dx in 0..kw {
                                    let qy = (stride * py + dy) as isize - ph;
                                    let qx = (stride * px + dx) as isize - pw;
                                    if qy < 0 || qy >= h as isize || qx < 0 || qx >= wd as isize {
                                        continue;
                                    }
                                    acc += x[((b * ic + c) * h + qy as usize) * wd + qx as usize]
                                        * w[((o * ic + c) * kh + dy) * kw + dx];
                                }
                            }
                        }
                        y[((b * oc + o) * ho + py) * wo + px] = acc;
                    }
                }
            }
        }
        y
    }

    fn seq(n: usize) -> Vec<f64> {
        // Varied, sign-alternating pattern so index bugs cannot cancel.
        (0..n).map(|i| ((i * 7919 + 13) % 23) as f64 - 11.0).collect()
    }

    #[test]
    fn matmul_small_oracle() {
        // [[1,2],[3,4]] * [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = vec![1.0f64, 2.0, 3.0, 4.0];
        let b = vec![5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn conv2d_matches_naive_oracle() {
        for &(bsz, ic, h, wd, oc, k, s) in
            &[(2, 3, 7, 9, 4, 3, 1), (1, 2, 8, 8, 3, 5, 1), (2, 2, 9, 7, 3, 3, 2)]
        {
            let x = seq(bsz * ic * h * wd);
            let w = seq(oc * ic * k * k);
            let got = conv2d(&x, &w, bsz, ic, h, wd, oc, k, k, s);
            let want = conv2d_naive(&x, &w, bsz, ic, h, wd, oc, k, k, s);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-9, "conv mismatch: {} vs {}", a, b);
            }
        }
    }

    #[test]
    fn conv2d_input_grad_matches_transpose_oracle() {
        // <conv(x, w), g> must equal <x, input_grad(g, w)> for the pair to
        // be true adjoints; check over random-ish tensors.
        for &(bsz, ic, h, wd, oc, k, s) in &[(1, 2, 6, 6, 3, 3, 1), (2, 1, 7, 5, 2, 3, 2)] {
            let x = seq(bsz * ic * h * wd);
            let w = seq(oc * ic * k * k);
            let ho = conv_out_extent(h, k, s);
            let wo = conv_out_extent(wd, k, s);
            let g = seq(bsz * oc * ho * wo);
            let y = conv2d(&x, &w, bsz, ic, h, wd, oc, k, k, s);
            let z = conv2d_input_grad(&g, &w, bsz, ic, h, wd, oc, k, k, s);
            let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&z).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-6 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn conv2d_weight_grad_matches_transpose_oracle() {
        for &(bsz, ic, h, wd, oc, k, s) in &[(1, 2, 6, 6, 3, 3, 1), (2, 1, 7, 5, 2, 3, 2)] {
            let x = seq(bsz * ic * h * wd);
            let w = seq(oc * ic * k * k);
            let ho = conv_out_extent(h, k, s);
            let wo = conv_out_extent(wd, k, s);
            let g = seq(bsz * oc * ho * wo);
            let y = conv2d(&x, &w, bsz, ic, h, wd, oc, k, k, s);
            let v = conv2d_weight_grad(&x, &g, bsz, ic, h, wd, oc, k, k, s);
            let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
            let rhs: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-6 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn conv3d_adjoint_identities() {
        let (bsz, ic, d, h, wd, oc, k, s) = (1, 2, 5, 6, 4, 3, 3, 2);
        let x = seq(bsz * ic * d * h * wd);
        let w = seq(oc * ic * k * k * k);
        let dd = conv_out_extent(d, k, s);
        let ho = conv_out_extent(h, k, s);
        let wo = conv_out_extent(wd, k, s);
        let g = seq(bsz * oc * dd * ho * wo);
        let y = conv3d(&x, &w, bsz, ic, d, h, wd, oc, k, k, k, s);
        let z = conv3d_input_grad(&g, &w, bsz, ic, d, h, wd, oc, k, k, k, s);
        let v = conv3d_weight_grad(&x, &g, bsz, ic, d, h, wd, oc, k, k, k, s);
        let yg: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let xz: f64 = x.iter().zip(&z).map(|(a, b)| a * b).sum();
        let wv: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
        assert!((yg - xz).abs() < 1e-6 * yg.abs().max(1.0));
        assert!((yg - wv).abs() < 1e-6 * yg.abs().max(1.0));
    }

    #[test]
    fn maxpool_tracks_argmax() {
        // 4x4 single channel, window 2.
        let x: Vec<f64> = vec![
            1.0, 2.0, 5.0, 1.0, //
            3.0, 0.0, 1.0, 1.0, //
            9.0, 8.0, 0.0, 0.0, //
            7.0, 6.0, 0.0, 2.0,
        ];
        let (y, arg) = maxpool2d(&x, 1, 1, 4, 4, 2);
        assert_eq!(y, vec![3.0, 5.0, 9.0, 2.0]);
        assert_eq!(arg, vec![4, 2, 8, 15]);
    }

    #[test]
    fn upsample_then_avgpool_is_identity() {
        let x = seq(2 * 3 * 4 * 4);
        let up = upsample_nearest2d(&x, 2, 3, 4, 4, 2);
        let back = avgpool2d(&up, 2, 3, 8, 8, 2);
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
