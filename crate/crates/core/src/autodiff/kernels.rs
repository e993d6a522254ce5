//! Dense kernels shared by the graph operators and the plain (non-graph)
//! field algebra. All loops are sequential with a fixed iteration order, so
//! results are bit-reproducible.
//!
//! Volume tensors are laid out channel-major then x-fastest: element
//! `(c, x, y, z)` lives at `c·nx·ny·nz + x + nx·(y + ny·z)`. Convolution
//! weights of shape `(c_out, c_in, 3, 3, 3)` are laid out `co, ci, kz, ky, kx`
//! with `kx` fastest.

use super::scalar::Scalar;
use crate::volume::Dims;

pub(crate) const KERNEL: usize = 3;

/// Output extents of a 3^3 convolution.
pub fn conv3d_out_dims(d: Dims, stride: usize, pad: usize) -> Dims {
    let ext = |n: usize| (n + 2 * pad - KERNEL) / stride + 1;
    Dims::new(ext(d.nx), ext(d.ny), ext(d.nz))
}

/// One row of a padded stride-1 stencil: `out[x] += Σ_dx w[dx]·inp[x+dx-1]`.
#[inline(always)]
fn row_stencil_add<S: Scalar>(out: &mut [S], inp: &[S], w: [S; 3]) {
    let nx = out.len();
    debug_assert_eq!(inp.len(), nx);
    let [w0, w1, w2] = w;
    if nx == 1 {
        out[0] += w1 * inp[0];
        return;
    }
    out[0] += w1 * inp[0] + w2 * inp[1];
    let interior = &mut out[1..nx - 1];
    let (a, rest) = (&inp[..nx - 2], &inp[1..]);
    let (b, c) = (&rest[..nx - 2], &inp[2..]);
    for i in 0..interior.len() {
        interior[i] += w0 * a[i] + w1 * b[i] + w2 * c[i];
    }
    out[nx - 1] += w0 * inp[nx - 2] + w1 * inp[nx - 1];
}

/// One row of a padded stride-2 gather: `out[xo] += Σ_dx w[dx]·inp[2xo+dx-1]`.
#[inline(always)]
fn row_gather_s2<S: Scalar>(out: &mut [S], inp: &[S], w: [S; 3]) {
    let nxi = inp.len();
    let [w0, w1, w2] = w;
    for (xo, o) in out.iter_mut().enumerate() {
        let base = 2 * xo;
        let mut acc = w1 * inp[base];
        if base >= 1 {
            acc += w0 * inp[base - 1];
        }
        if base + 1 < nxi {
            acc += w2 * inp[base + 1];
        }
        *o += acc;
    }
}

/// Valid output range along one axis so the tap `i_in = i_out·stride + d - 1`
/// stays inside `[0, n_in)`.
#[inline(always)]
fn tap_range(d: usize, stride: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let lo = if d == 0 { 1usize.div_ceil(stride) } else { 0 };
    let hi = if d == 0 {
        n_out
    } else if n_in < d {
        lo
    } else {
        ((n_in - d) / stride + 1).min(n_out)
    };
    (lo, hi.max(lo))
}

/// Dense 3^3 convolution, padding 1, stride 1 or 2; bias is written first.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3d_forward<S: Scalar>(
    input: &[S],
    cin: usize,
    id: Dims,
    weight: &[S],
    cout: usize,
    bias: &[S],
    stride: usize,
    out: &mut [S],
    od: Dims,
) {
    let in_n = id.voxel_count();
    let out_n = od.voxel_count();
    let in_plane = id.nx * id.ny;
    let out_plane = od.nx * od.ny;
    for co in 0..cout {
        let out_ch = &mut out[co * out_n..(co + 1) * out_n];
        for v in out_ch.iter_mut() {
            *v = bias[co];
        }
        for ci in 0..cin {
            let in_ch = &input[ci * in_n..(ci + 1) * in_n];
            let wci = (co * cin + ci) * 27;
            for dz in 0..KERNEL {
                let (zo_lo, zo_hi) = tap_range(dz, stride, id.nz, od.nz);
                for dy in 0..KERNEL {
                    let wb = wci + (dz * 3 + dy) * 3;
                    let w3 = [weight[wb], weight[wb + 1], weight[wb + 2]];
                    let (yo_lo, yo_hi) = tap_range(dy, stride, id.ny, od.ny);
                    for zo in zo_lo..zo_hi {
                        let zi = zo * stride + dz - 1;
                        let in_p = &in_ch[zi * in_plane..][..in_plane];
                        let out_p = &mut out_ch[zo * out_plane..][..out_plane];
                        for yo in yo_lo..yo_hi {
                            let yi = yo * stride + dy - 1;
                            let in_row = &in_p[yi * id.nx..][..id.nx];
                            let out_row = &mut out_p[yo * od.nx..][..od.nx];
                            if stride == 1 {
                                row_stencil_add(out_row, in_row, w3);
                            } else {
                                row_gather_s2(out_row, in_row, w3);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient w.r.t. the convolution weights and bias.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3d_backward_weights<S: Scalar>(
    input: &[S],
    cin: usize,
    id: Dims,
    gout: &[S],
    cout: usize,
    od: Dims,
    stride: usize,
    d_weight: &mut [S],
    d_bias: &mut [S],
) {
    let in_n = id.voxel_count();
    let out_n = od.voxel_count();
    let in_plane = id.nx * id.ny;
    let out_plane = od.nx * od.ny;
    for co in 0..cout {
        let g_ch = &gout[co * out_n..(co + 1) * out_n];
        let mut bias_acc = S::ZERO;
        for &g in g_ch {
            bias_acc += g;
        }
        d_bias[co] += bias_acc;
        for ci in 0..cin {
            let in_ch = &input[ci * in_n..(ci + 1) * in_n];
            let wci = (co * cin + ci) * 27;
            for dz in 0..KERNEL {
                let (zo_lo, zo_hi) = tap_range(dz, stride, id.nz, od.nz);
                for dy in 0..KERNEL {
                    let (yo_lo, yo_hi) = tap_range(dy, stride, id.ny, od.ny);
                    let mut acc = [S::ZERO; 3];
                    for zo in zo_lo..zo_hi {
                        let zi = zo * stride + dz - 1;
                        let in_p = &in_ch[zi * in_plane..][..in_plane];
                        let g_p = &g_ch[zo * out_plane..][..out_plane];
                        for yo in yo_lo..yo_hi {
                            let yi = yo * stride + dy - 1;
                            let in_row = &in_p[yi * id.nx..][..id.nx];
                            let g_row = &g_p[yo * od.nx..][..od.nx];
                            if stride == 1 {
                                let nx = od.nx;
                                if nx == 1 {
                                    acc[1] += g_row[0] * in_row[0];
                                    continue;
                                }
                                let mut a0 = S::ZERO;
                                let mut a1 = S::ZERO;
                                let mut a2 = S::ZERO;
                                // dx = 1 aligns; dx = 0/2 shift by one.
                                let g_int = &g_row[1..nx - 1];
                                for (x, &g) in g_int.iter().enumerate() {
                                    a0 += g * in_row[x];
                                    a1 += g * in_row[x + 1];
                                    a2 += g * in_row[x + 2];
                                }
                                a0 += g_row[nx - 1] * in_row[nx - 2];
                                a1 += g_row[0] * in_row[0] + g_row[nx - 1] * in_row[nx - 1];
                                a2 += g_row[0] * in_row[1];
                                acc[0] += a0;
                                acc[1] += a1;
                                acc[2] += a2;
                            } else {
                                let nxi = id.nx;
                                for (xo, &g) in g_row.iter().enumerate() {
                                    let base = 2 * xo;
                                    acc[1] += g * in_row[base];
                                    if base >= 1 {
                                        acc[0] += g * in_row[base - 1];
                                    }
                                    if base + 1 < nxi {
                                        acc[2] += g * in_row[base + 1];
                                    }
                                }
                            }
                        }
                    }
                    let dw3 = &mut d_weight[wci + (dz * 3 + dy) * 3..][..3];
                    dw3[0] += acc[0];
                    dw3[1] += acc[1];
                    dw3[2] += acc[2];
                }
            }
        }
    }
}

/// Transposed stride-2 row: `din[2xo+dx-1] += w[dx]·g[xo]`.
#[inline(always)]
fn row_scatter_s2<S: Scalar>(din: &mut [S], g: &[S], w: [S; 3]) {
    let nxi = din.len();
    let [w0, w1, w2] = w;
    for (xo, &gv) in g.iter().enumerate() {
        let base = 2 * xo;
        din[base] += w1 * gv;
        if base >= 1 {
            din[base - 1] += w0 * gv;
        }
        if base + 1 < nxi {
            din[base + 1] += w2 * gv;
        }
    }
}

/// Gradient w.r.t. the convolution input (accumulates into `d_input`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3d_backward_input<S: Scalar>(
    weight: &[S],
    cin: usize,
    cout: usize,
    id: Dims,
    gout: &[S],
    od: Dims,
    stride: usize,
    d_input: &mut [S],
) {
    let in_n = id.voxel_count();
    let out_n = od.voxel_count();
    let in_plane = id.nx * id.ny;
    let out_plane = od.nx * od.ny;
    if stride == 1 {
        // Correlation with the kernel flipped on all three axes: input index
        // zi consumes output row zo = zi + dzf - 1 with weight tap 2 - dzf.
        for ci in 0..cin {
            let din_ch = &mut d_input[ci * in_n..(ci + 1) * in_n];
            for co in 0..cout {
                let g_ch = &gout[co * out_n..(co + 1) * out_n];
                let wci = (co * cin + ci) * 27;
                for dzf in 0..KERNEL {
                    let (zi_lo, zi_hi) = tap_range(dzf, 1, od.nz, id.nz);
                    for dyf in 0..KERNEL {
                        let (yi_lo, yi_hi) = tap_range(dyf, 1, od.ny, id.ny);
                        let wbase = wci + ((2 - dzf) * 3 + (2 - dyf)) * 3;
                        let wrev = [weight[wbase + 2], weight[wbase + 1], weight[wbase]];
                        for zi in zi_lo..zi_hi {
                            let zo = zi + dzf - 1;
                            let g_p = &g_ch[zo * out_plane..][..out_plane];
                            let din_p = &mut din_ch[zi * in_plane..][..in_plane];
                            for yi in yi_lo..yi_hi {
                                let yo = yi + dyf - 1;
                                let g_row = &g_p[yo * od.nx..][..od.nx];
                                let din_row = &mut din_p[yi * id.nx..][..id.nx];
                                row_stencil_add(din_row, g_row, wrev);
                            }
                        }
                    }
                }
            }
        }
    } else {
        // Stride 2: scatter each output row into the input rows it read.
        for ci in 0..cin {
            let din_ch = &mut d_input[ci * in_n..(ci + 1) * in_n];
            for co in 0..cout {
                let g_ch = &gout[co * out_n..(co + 1) * out_n];
                let wci = (co * cin + ci) * 27;
                for dz in 0..KERNEL {
                    let (zo_lo, zo_hi) = tap_range(dz, 2, id.nz, od.nz);
                    for dy in 0..KERNEL {
                        let (yo_lo, yo_hi) = tap_range(dy, 2, id.ny, od.ny);
                        let wb = wci + (dz * 3 + dy) * 3;
                        let w3 = [weight[wb], weight[wb + 1], weight[wb + 2]];
                        for zo in zo_lo..zo_hi {
                            let zi = zo * 2 + dz - 1;
                            let g_p = &g_ch[zo * out_plane..][..out_plane];
                            let din_p = &mut din_ch[zi * in_plane..][..in_plane];
                            for yo in yo_lo..yo_hi {
                                let yi = yo * 2 + dy - 1;
                                let g_row = &g_p[yo * od.nx..][..od.nx];
                                let din_row = &mut din_p[yi * id.nx..][..id.nx];
                                row_scatter_s2(din_row, g_row, w3);
                            }
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Trilinear backward warping
// ---------------------------------------------------------------------------

/// Per-axis interpolation cell: clamped cell origin, fractional offset, and
/// whether the raw coordinate is inside [0, n-1] (the field gradient is zero
/// once the sample is clamped outside).
#[inline(always)]
fn axis_cell<S: Scalar>(p: usize, u: S, n: usize) -> (usize, S, bool) {
    if n == 1 {
        return (0, S::ZERO, false);
    }
    let q_raw = S::from_f64(p as f64) + u;
    let max = S::from_f64((n - 1) as f64);
    let in_range = q_raw >= S::ZERO && q_raw <= max;
    let q = q_raw.maximum(S::ZERO).minimum(max);
    let mut i0 = q.floor().to_f64() as usize;
    if i0 > n - 2 {
        i0 = n - 2;
    }
    let f = q - S::from_f64(i0 as f64);
    (i0, f, in_range)
}

/// Backward warp: `out(p) = img(p + field(p))`, trilinear, clamp-to-edge.
/// `img` has `channels` channels; `field` has 3 (u_x, u_y, u_z in voxels).
pub(crate) fn warp_forward<S: Scalar>(
    img: &[S],
    channels: usize,
    d: Dims,
    field: &[S],
    out: &mut [S],
) {
    let n = d.voxel_count();
    let (nx, ny, nz) = (d.nx, d.ny, d.nz);
    let mut i = 0usize;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let (ix, fx, _) = axis_cell(x, field[i], nx);
                let (iy, fy, _) = axis_cell(y, field[n + i], ny);
                let (iz, fz, _) = axis_cell(z, field[2 * n + i], nz);
                let sx = if nx > 1 { 1 } else { 0 };
                let sy = if ny > 1 { nx } else { 0 };
                let sz = if nz > 1 { nx * ny } else { 0 };
                let base = (iz * ny + iy) * nx + ix;
                let (gx0, gx1) = (S::ONE - fx, fx);
                let (gy0, gy1) = (S::ONE - fy, fy);
                let (gz0, gz1) = (S::ONE - fz, fz);
                for c in 0..channels {
                    let ch = &img[c * n..(c + 1) * n];
                    let c000 = ch[base];
                    let c100 = ch[base + sx];
                    let c010 = ch[base + sy];
                    let c110 = ch[base + sy + sx];
                    let c001 = ch[base + sz];
                    let c101 = ch[base + sz + sx];
                    let c011 = ch[base + sz + sy];
                    let c111 = ch[base + sz + sy + sx];
                    let v = gz0 * (gy0 * (gx0 * c000 + gx1 * c100) + gy1 * (gx0 * c010 + gx1 * c110))
                        + gz1
                            * (gy0 * (gx0 * c001 + gx1 * c101)
                                + gy1 * (gx0 * c011 + gx1 * c111));
                    out[c * n + i] = v;
                }
                i += 1;
            }
        }
    }
}

/// Adjoint of `warp_forward` w.r.t. the image (scatter of the trilinear
/// weights) and/or the field components.
#[allow(clippy::too_many_arguments)]
pub(crate) fn warp_backward<S: Scalar>(
    img: &[S],
    channels: usize,
    d: Dims,
    field: &[S],
    gout: &[S],
    mut d_img: Option<&mut [S]>,
    mut d_field: Option<&mut [S]>,
) {
    let n = d.voxel_count();
    let (nx, ny, nz) = (d.nx, d.ny, d.nz);
    let mut i = 0usize;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let (ix, fx, inx) = axis_cell(x, field[i], nx);
                let (iy, fy, iny) = axis_cell(y, field[n + i], ny);
                let (iz, fz, inz) = axis_cell(z, field[2 * n + i], nz);
                let sx = if nx > 1 { 1 } else { 0 };
                let sy = if ny > 1 { nx } else { 0 };
                let sz = if nz > 1 { nx * ny } else { 0 };
                let base = (iz * ny + iy) * nx + ix;
                let (gx0, gx1) = (S::ONE - fx, fx);
                let (gy0, gy1) = (S::ONE - fy, fy);
                let (gz0, gz1) = (S::ONE - fz, fz);
                let mut acc_x = S::ZERO;
                let mut acc_y = S::ZERO;
                let mut acc_z = S::ZERO;
                for c in 0..channels {
                    let g = gout[c * n + i];
                    if let Some(di) = d_img.as_deref_mut() {
                        let dch = &mut di[c * n..(c + 1) * n];
                        dch[base] += g * gz0 * gy0 * gx0;
                        dch[base + sx] += g * gz0 * gy0 * gx1;
                        dch[base + sy] += g * gz0 * gy1 * gx0;
                        dch[base + sy + sx] += g * gz0 * gy1 * gx1;
                        dch[base + sz] += g * gz1 * gy0 * gx0;
                        dch[base + sz + sx] += g * gz1 * gy0 * gx1;
                        dch[base + sz + sy] += g * gz1 * gy1 * gx0;
                        dch[base + sz + sy + sx] += g * gz1 * gy1 * gx1;
                    }
                    if d_field.is_some() {
                        let ch = &img[c * n..(c + 1) * n];
                        let c000 = ch[base];
                        let c100 = ch[base + sx];
                        let c010 = ch[base + sy];
                        let c110 = ch[base + sy + sx];
                        let c001 = ch[base + sz];
                        let c101 = ch[base + sz + sx];
                        let c011 = ch[base + sz + sy];
                        let c111 = ch[base + sz + sy + sx];
                        if inx {
                            acc_x += g
                                * (gz0 * (gy0 * (c100 - c000) + gy1 * (c110 - c010))
                                    + gz1 * (gy0 * (c101 - c001) + gy1 * (c111 - c011)));
                        }
                        if iny {
                            acc_y += g
                                * (gz0 * (gx0 * (c010 - c000) + gx1 * (c110 - c100))
                                    + gz1 * (gx0 * (c011 - c001) + gx1 * (c111 - c101)));
                        }
                        if inz {
                            acc_z += g
                                * (gy0 * (gx0 * (c001 - c000) + gx1 * (c101 - c100))
                                    + gy1 * (gx0 * (c011 - c010) + gx1 * (c111 - c110)));
                        }
                    }
                }
                if let Some(df) = d_field.as_deref_mut() {
                    df[i] += acc_x;
                    df[n + i] += acc_y;
                    df[2 * n + i] += acc_z;
                }
                i += 1;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Nearest-neighbor 2x upsampling
// ---------------------------------------------------------------------------

pub(crate) fn upsample2x_forward<S: Scalar>(inp: &[S], channels: usize, d: Dims, out: &mut [S]) {
    let od = Dims::new(2 * d.nx, 2 * d.ny, 2 * d.nz);
    let n = d.voxel_count();
    let on = od.voxel_count();
    for c in 0..channels {
        let src = &inp[c * n..(c + 1) * n];
        let dst = &mut out[c * on..(c + 1) * on];
        for zo in 0..od.nz {
            let zi = zo / 2;
            for yo in 0..od.ny {
                let yi = yo / 2;
                let src_row = &src[(zi * d.ny + yi) * d.nx..][..d.nx];
                let dst_row = &mut dst[(zo * od.ny + yo) * od.nx..][..od.nx];
                for (xo, v) in dst_row.iter_mut().enumerate() {
                    *v = src_row[xo / 2];
                }
            }
        }
    }
}

/// Adjoint of nearest 2x upsampling: each source voxel sums its 8 replicas.
pub(crate) fn upsample2x_backward<S: Scalar>(
    gout: &[S],
    channels: usize,
    d: Dims,
    d_input: &mut [S],
) {
    let od = Dims::new(2 * d.nx, 2 * d.ny, 2 * d.nz);
    let n = d.voxel_count();
    let on = od.voxel_count();
    for c in 0..channels {
        let g = &gout[c * on..(c + 1) * on];
        let di = &mut d_input[c * n..(c + 1) * n];
        for zo in 0..od.nz {
            let zi = zo / 2;
            for yo in 0..od.ny {
                let yi = yo / 2;
                let g_row = &g[(zo * od.ny + yo) * od.nx..][..od.nx];
                let di_row = &mut di[(zi * d.ny + yi) * d.nx..][..d.nx];
                for (xo, &gv) in g_row.iter().enumerate() {
                    di_row[xo / 2] += gv;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Channel softmax
// ---------------------------------------------------------------------------

/// Per-voxel softmax across channels, max-subtracted for stability.
pub(crate) fn softmax_forward<S: Scalar>(inp: &[S], classes: usize, n: usize, out: &mut [S]) {
    for i in 0..n {
        let mut max = inp[i];
        for c in 1..classes {
            max = max.maximum(inp[c * n + i]);
        }
        let mut sum = S::ZERO;
        for c in 0..classes {
            let e = (inp[c * n + i] - max).exp();
            out[c * n + i] = e;
            sum += e;
        }
        let inv = S::ONE / sum;
        for c in 0..classes {
            out[c * n + i] *= inv;
        }
    }
}

/// `d_logits[c] += p[c]·(g[c] − Σ_k g[k]·p[k])`.
pub(crate) fn softmax_backward<S: Scalar>(
    probs: &[S],
    classes: usize,
    n: usize,
    gout: &[S],
    d_input: &mut [S],
) {
    for i in 0..n {
        let mut dot = S::ZERO;
        for c in 0..classes {
            dot += gout[c * n + i] * probs[c * n + i];
        }
        for c in 0..classes {
            d_input[c * n + i] += probs[c * n + i] * (gout[c * n + i] - dot);
        }
    }
}
