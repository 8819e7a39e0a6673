//! Numeric kernels shared by the graph primitives and the direct (tape-free)
//! transform API. Every forward kernel has a matching adjoint that
//! accumulates into caller-provided gradient buffers.
//!
//! Boundary conventions:
//! * spatial gradients use central differences inside and one-sided
//!   differences on the first and last sample of each line;
//! * box means average over the part of the window that lies inside the grid;
//! * sampling clamps coordinates to the grid (clamp-to-edge).

/// Invokes `f(start, stride, len)` for every line of the grid along `axis`.
fn for_each_line(dims: [usize; 3], axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    let [nx, ny, nz] = dims;
    match axis {
        0 => {
            for z in 0..nz {
                for y in 0..ny {
                    f(nx * (y + ny * z), 1, nx);
                }
            }
        }
        1 => {
            for z in 0..nz {
                for x in 0..nx {
                    f(x + nx * ny * z, nx, ny);
                }
            }
        }
        2 => {
            for y in 0..ny {
                for x in 0..nx {
                    f(x + nx * y, nx * ny, nz);
                }
            }
        }
        _ => panic!("axis {axis} out of range"),
    }
}

/// In-place separable Gaussian blur of one channel, truncated at 3 sigma
/// with clamp-to-edge borders.
pub fn gaussian_smooth(data: &mut [f64], dims: [usize; 3], sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut w: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    let mut line = Vec::new();
    for axis in 0..3 {
        for_each_line(dims, axis, |start, s, n| {
            line.clear();
            line.extend((0..n).map(|i| data[start + i * s]));
            for i in 0..n {
                let mut acc = 0.0;
                for (k, wk) in w.iter().enumerate() {
                    let j = (i as isize + k as isize - r).clamp(0, n as isize - 1) as usize;
                    acc += wk * line[j];
                }
                data[start + i * s] = acc;
            }
        });
    }
}

/// Derivative along `axis` of one channel, in voxel units.
pub fn spatial_gradient(src: &[f64], dst: &mut [f64], dims: [usize; 3], axis: usize) {
    for_each_line(dims, axis, |start, s, n| {
        if n == 1 {
            dst[start] = 0.0;
            return;
        }
        dst[start] = src[start + s] - src[start];
        for i in 1..n - 1 {
            let p = start + i * s;
            dst[p] = 0.5 * (src[p + s] - src[p - s]);
        }
        let last = start + (n - 1) * s;
        dst[last] = src[last] - src[last - s];
    });
}

pub fn spatial_gradient_adjoint(g: &[f64], acc: &mut [f64], dims: [usize; 3], axis: usize) {
    for_each_line(dims, axis, |start, s, n| {
        if n == 1 {
            return;
        }
        acc[start] -= g[start];
        acc[start + s] += g[start];
        for i in 1..n - 1 {
            let p = start + i * s;
            let h = 0.5 * g[p];
            acc[p + s] += h;
            acc[p - s] -= h;
        }
        let last = start + (n - 1) * s;
        acc[last] += g[last];
        acc[last - s] -= g[last];
    });
}

fn window(i: usize, n: usize, r: usize) -> (usize, usize) {
    (i.saturating_sub(r), (i + r).min(n - 1))
}

fn box_pass(src: &[f64], dst: &mut [f64], dims: [usize; 3], axis: usize, r: usize, scale_first: bool) {
    let mut line = Vec::new();
    for_each_line(dims, axis, |start, s, n| {
        line.clear();
        line.extend((0..n).map(|i| {
            let v = src[start + i * s];
            if scale_first {
                let (lo, hi) = window(i, n, r);
                v / (hi - lo + 1) as f64
            } else {
                v
            }
        }));
        for i in 0..n {
            let (lo, hi) = window(i, n, r);
            let mut sum = 0.0;
            for v in &line[lo..=hi] {
                sum += v;
            }
            dst[start + i * s] = if scale_first {
                sum
            } else {
                sum / (hi - lo + 1) as f64
            };
        }
    });
}

/// Mean over the `(2r+1)^3` window clipped to the grid.
pub fn box_mean(src: &[f64], dst: &mut [f64], dims: [usize; 3], r: usize) {
    let mut tmp = vec![0.0; src.len()];
    box_pass(src, dst, dims, 0, r, false);
    box_pass(dst, &mut tmp, dims, 1, r, false);
    box_pass(&tmp, dst, dims, 2, r, false);
}

pub fn box_mean_adjoint(g: &[f64], acc: &mut [f64], dims: [usize; 3], r: usize) {
    let mut a = vec![0.0; g.len()];
    let mut b = vec![0.0; g.len()];
    box_pass(g, &mut a, dims, 2, r, true);
    box_pass(&a, &mut b, dims, 1, r, true);
    box_pass(&b, &mut a, dims, 0, r, true);
    for (o, v) in acc.iter_mut().zip(&a) {
        *o += v;
    }
}

/// Clamp-to-edge linear sampling setup along one axis.
#[derive(Clone, Copy)]
struct Axis {
    i0: usize,
    i1: usize,
    t: f64,
    /// 1 when the unclamped coordinate lies on the grid, else 0.
    slope: f64,
}

#[inline]
fn axis_sample(p: f64, n: usize) -> Axis {
    if n == 1 {
        return Axis {
            i0: 0,
            i1: 0,
            t: 0.0,
            slope: 0.0,
        };
    }
    let hi = (n - 1) as f64;
    let inside = (0.0..=hi).contains(&p);
    let q = p.clamp(0.0, hi);
    let i0 = (q.floor() as usize).min(n - 2);
    Axis {
        i0,
        i1: i0 + 1,
        t: q - i0 as f64,
        slope: if inside { 1.0 } else { 0.0 },
    }
}

#[inline]
fn corner_offsets(ax: &Axis, ay: &Axis, az: &Axis, nx: usize, ny: usize) -> [usize; 8] {
    let row = |y: usize, z: usize| nx * (y + ny * z);
    [
        ax.i0 + row(ay.i0, az.i0),
        ax.i1 + row(ay.i0, az.i0),
        ax.i0 + row(ay.i1, az.i0),
        ax.i1 + row(ay.i1, az.i0),
        ax.i0 + row(ay.i0, az.i1),
        ax.i1 + row(ay.i0, az.i1),
        ax.i0 + row(ay.i1, az.i1),
        ax.i1 + row(ay.i1, az.i1),
    ]
}

#[inline]
fn corner_weights(ax: &Axis, ay: &Axis, az: &Axis) -> [f64; 8] {
    let (x0, x1) = (1.0 - ax.t, ax.t);
    let (y0, y1) = (1.0 - ay.t, ay.t);
    let (z0, z1) = (1.0 - az.t, az.t);
    [
        x0 * y0 * z0,
        x1 * y0 * z0,
        x0 * y1 * z0,
        x1 * y1 * z0,
        x0 * y0 * z1,
        x1 * y0 * z1,
        x0 * y1 * z1,
        x1 * y1 * z1,
    ]
}

/// `out[c](x) = image[c](x + disp(x))` with trilinear, clamp-to-edge sampling.
///
/// `disp` holds three channels on `out_dims`; `image` holds `channels`
/// channels on `img_dims`.
pub fn warp_linear(
    image: &[f64],
    img_dims: [usize; 3],
    channels: usize,
    disp: &[f64],
    out_dims: [usize; 3],
    out: &mut [f64],
) {
    let [nx, ny, nz] = img_dims;
    let n_img = nx * ny * nz;
    let n_out = out_dims[0] * out_dims[1] * out_dims[2];
    let (ux, rest) = disp.split_at(n_out);
    let (uy, uz) = rest.split_at(n_out);
    let mut v = 0;
    for z in 0..out_dims[2] {
        for y in 0..out_dims[1] {
            for x in 0..out_dims[0] {
                let ax = axis_sample(x as f64 + ux[v], nx);
                let ay = axis_sample(y as f64 + uy[v], ny);
                let az = axis_sample(z as f64 + uz[v], nz);
                let idx = corner_offsets(&ax, &ay, &az, nx, ny);
                let w = corner_weights(&ax, &ay, &az);
                for c in 0..channels {
                    let img = &image[c * n_img..(c + 1) * n_img];
                    let mut s = 0.0;
                    for k in 0..8 {
                        s += w[k] * img[idx[k]];
                    }
                    out[c * n_out + v] = s;
                }
                v += 1;
            }
        }
    }
}

/// Adjoint of [`warp_linear`] with respect to the image and/or displacement.
#[allow(clippy::too_many_arguments)]
pub fn warp_linear_adjoint(
    image: &[f64],
    img_dims: [usize; 3],
    channels: usize,
    disp: &[f64],
    out_dims: [usize; 3],
    g: &[f64],
    mut acc_image: Option<&mut [f64]>,
    mut acc_disp: Option<&mut [f64]>,
) {
    let [nx, ny, nz] = img_dims;
    let n_img = nx * ny * nz;
    let n_out = out_dims[0] * out_dims[1] * out_dims[2];
    let (ux, rest) = disp.split_at(n_out);
    let (uy, uz) = rest.split_at(n_out);
    let mut v = 0;
    for z in 0..out_dims[2] {
        for y in 0..out_dims[1] {
            for x in 0..out_dims[0] {
                let ax = axis_sample(x as f64 + ux[v], nx);
                let ay = axis_sample(y as f64 + uy[v], ny);
                let az = axis_sample(z as f64 + uz[v], nz);
                let idx = corner_offsets(&ax, &ay, &az, nx, ny);
                let w = corner_weights(&ax, &ay, &az);
                let mut dx = 0.0;
                let mut dy = 0.0;
                let mut dz = 0.0;
                for c in 0..channels {
                    let gv = g[c * n_out + v];
                    if gv == 0.0 {
                        continue;
                    }
                    if let Some(acc) = acc_image.as_deref_mut() {
                        let acc = &mut acc[c * n_img..(c + 1) * n_img];
                        for k in 0..8 {
                            acc[idx[k]] += w[k] * gv;
                        }
                    }
                    if acc_disp.is_some() {
                        let img = &image[c * n_img..(c + 1) * n_img];
                        let q: [f64; 8] = std::array::from_fn(|k| img[idx[k]]);
                        let (tx, ty, tz) = (ax.t, ay.t, az.t);
                        // d/dt of the trilinear form along each axis.
                        let ex = (q[1] - q[0]) * (1.0 - ty) * (1.0 - tz)
                            + (q[3] - q[2]) * ty * (1.0 - tz)
                            + (q[5] - q[4]) * (1.0 - ty) * tz
                            + (q[7] - q[6]) * ty * tz;
                        let ey = (q[2] - q[0]) * (1.0 - tx) * (1.0 - tz)
                            + (q[3] - q[1]) * tx * (1.0 - tz)
                            + (q[6] - q[4]) * (1.0 - tx) * tz
                            + (q[7] - q[5]) * tx * tz;
                        let ez = (q[4] - q[0]) * (1.0 - tx) * (1.0 - ty)
                            + (q[5] - q[1]) * tx * (1.0 - ty)
                            + (q[6] - q[2]) * (1.0 - tx) * ty
                            + (q[7] - q[3]) * tx * ty;
                        dx += gv * ex;
                        dy += gv * ey;
                        dz += gv * ez;
                    }
                }
                if let Some(acc) = acc_disp.as_deref_mut() {
                    acc[v] += dx * ax.slope;
                    acc[n_out + v] += dy * ay.slope;
                    acc[2 * n_out + v] += dz * az.slope;
                }
                v += 1;
            }
        }
    }
}

/// Nearest-neighbour clamp-to-edge index of `x + disp(x)` for every output
/// voxel. Ties round away from zero.
pub fn nearest_indices(img_dims: [usize; 3], disp: &[f64], out_dims: [usize; 3]) -> Vec<usize> {
    let [nx, ny, nz] = img_dims;
    let n_out = out_dims[0] * out_dims[1] * out_dims[2];
    let pick = |p: f64, n: usize| p.round().clamp(0.0, (n - 1) as f64) as usize;
    let mut out = Vec::with_capacity(n_out);
    let mut v = 0;
    for z in 0..out_dims[2] {
        for y in 0..out_dims[1] {
            for x in 0..out_dims[0] {
                let ix = pick(x as f64 + disp[v], nx);
                let iy = pick(y as f64 + disp[n_out + v], ny);
                let iz = pick(z as f64 + disp[2 * n_out + v], nz);
                out.push(ix + nx * (iy + ny * iz));
                v += 1;
            }
        }
    }
    out
}

/// Same-padded 3D cross-correlation with odd cubic kernels.
///
/// `weight` is laid out `[cout][cin][kz][ky][kx]`.
#[allow(clippy::too_many_arguments)]
pub fn conv3d(
    input: &[f64],
    cin: usize,
    dims: [usize; 3],
    weight: &[f64],
    bias: &[f64],
    cout: usize,
    k: usize,
    out: &mut [f64],
) {
    let n = dims[0] * dims[1] * dims[2];
    let taps = k * k * k;
    for co in 0..cout {
        let dst = &mut out[co * n..(co + 1) * n];
        dst.fill(bias[co]);
        for ci in 0..cin {
            let src = &input[ci * n..(ci + 1) * n];
            let w = &weight[(co * cin + ci) * taps..(co * cin + ci + 1) * taps];
            for_each_tap(dims, k, |tap, shift| {
                let w = w[tap];
                if w == 0.0 {
                    return;
                }
                shift.apply(|o, i, len| {
                    for (d, s) in dst[o..o + len].iter_mut().zip(&src[i..i + len]) {
                        *d += w * s;
                    }
                });
            });
        }
    }
}

/// Adjoint of [`conv3d`] for input, weight and bias.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_adjoint(
    input: &[f64],
    cin: usize,
    dims: [usize; 3],
    weight: &[f64],
    cout: usize,
    k: usize,
    g: &[f64],
    mut acc_input: Option<&mut [f64]>,
    mut acc_weight: Option<&mut [f64]>,
    acc_bias: Option<&mut [f64]>,
) {
    let n = dims[0] * dims[1] * dims[2];
    let taps = k * k * k;
    if let Some(acc) = acc_bias {
        for co in 0..cout {
            acc[co] += super::tensor::pairwise_sum(&g[co * n..(co + 1) * n]);
        }
    }
    for co in 0..cout {
        let gco = &g[co * n..(co + 1) * n];
        for ci in 0..cin {
            let base = (co * cin + ci) * taps;
            let src = &input[ci * n..(ci + 1) * n];
            if let Some(acc) = acc_weight.as_deref_mut() {
                for_each_tap(dims, k, |tap, shift| {
                    let mut s = 0.0;
                    shift.apply(|o, i, len| {
                        for (a, b) in gco[o..o + len].iter().zip(&src[i..i + len]) {
                            s += a * b;
                        }
                    });
                    acc[base + tap] += s;
                });
            }
            if let Some(acc) = acc_input.as_deref_mut() {
                let dst = &mut acc[ci * n..(ci + 1) * n];
                for_each_tap(dims, k, |tap, shift| {
                    let w = weight[base + tap];
                    if w == 0.0 {
                        return;
                    }
                    shift.apply(|o, i, len| {
                        for (d, s) in dst[i..i + len].iter_mut().zip(&gco[o..o + len]) {
                            *d += w * s;
                        }
                    });
                });
            }
        }
    }
}

/// Row-wise overlap between an output grid and the input grid shifted by a
/// kernel tap.
struct Shift {
    dims: [usize; 3],
    d: [isize; 3],
}

impl Shift {
    /// Calls `f(out_offset, in_offset, len)` for each contiguous x-run.
    #[inline]
    fn apply(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [nx, ny, nz] = self.dims;
        let range = |n: usize, d: isize| {
            let lo = (-d).max(0) as usize;
            let hi = (n as isize - d.max(0)).max(0) as usize;
            (lo, hi)
        };
        let (x0, x1) = range(nx, self.d[0]);
        let (y0, y1) = range(ny, self.d[1]);
        let (z0, z1) = range(nz, self.d[2]);
        if x0 >= x1 {
            return;
        }
        let len = x1 - x0;
        for z in z0..z1 {
            let zi = (z as isize + self.d[2]) as usize;
            for y in y0..y1 {
                let yi = (y as isize + self.d[1]) as usize;
                let o = x0 + nx * (y + ny * z);
                let i = (x0 as isize + self.d[0]) as usize + nx * (yi + ny * zi);
                f(o, i, len);
            }
        }
    }
}

fn for_each_tap(dims: [usize; 3], k: usize, mut f: impl FnMut(usize, &Shift)) {
    let half = (k / 2) as isize;
    let mut tap = 0;
    for kz in 0..k {
        for ky in 0..k {
            for kx in 0..k {
                let shift = Shift {
                    dims,
                    d: [kx as isize - half, ky as isize - half, kz as isize - half],
                };
                f(tap, &shift);
                tap += 1;
            }
        }
    }
}

/// 2× average pooling of one channel; every axis length must be even.
pub fn avg_pool2(src: &[f64], dims: [usize; 3], dst: &mut [f64]) {
    let [nx, ny, _] = dims;
    let [ox, oy, oz] = [dims[0] / 2, dims[1] / 2, dims[2] / 2];
    let mut o = 0;
    for z in 0..oz {
        for y in 0..oy {
            for x in 0..ox {
                let mut s = 0.0;
                for dz in 0..2 {
                    for dy in 0..2 {
                        let row = nx * (2 * y + dy + ny * (2 * z + dz));
                        s += src[row + 2 * x] + src[row + 2 * x + 1];
                    }
                }
                dst[o] = s * 0.125;
                o += 1;
            }
        }
    }
}

pub fn avg_pool2_adjoint(g: &[f64], dims: [usize; 3], acc: &mut [f64]) {
    let [nx, ny, _] = dims;
    let [ox, oy, oz] = [dims[0] / 2, dims[1] / 2, dims[2] / 2];
    let mut o = 0;
    for z in 0..oz {
        for y in 0..oy {
            for x in 0..ox {
                let v = g[o] * 0.125;
                for dz in 0..2 {
                    for dy in 0..2 {
                        let row = nx * (2 * y + dy + ny * (2 * z + dz));
                        acc[row + 2 * x] += v;
                        acc[row + 2 * x + 1] += v;
                    }
                }
                o += 1;
            }
        }
    }
}

/// Linear interpolation taps for upsampling a line of `n` samples by an
/// integer factor, with half-voxel (cell-centre) alignment.
fn upsample_taps(n: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n * factor)
        .map(|o| {
            let p = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = (p.floor() as usize).min(n.saturating_sub(2));
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, p - i0 as f64)
        })
        .collect()
}

fn upsample_pass(
    src: &[f64],
    src_dims: [usize; 3],
    axis: usize,
    factor: usize,
    dst: &mut [f64],
    adjoint: bool,
) {
    // Forward maps src_dims -> dst dims (axis scaled). Adjoint maps the
    // larger grid back onto src_dims; `src` then lives on the larger grid.
    let small = src_dims;
    let mut big = small;
    big[axis] *= factor;
    let taps = upsample_taps(small[axis], factor);
    let stride_of = |dims: [usize; 3]| match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let (ss, bs) = (stride_of(small), stride_of(big));
    let others: Vec<(usize, usize)> = {
        let mut v = Vec::new();
        let (a, b) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for j in 0..small[b] {
            for i in 0..small[a] {
                let mut cs = [0usize; 3];
                cs[a] = i;
                cs[b] = j;
                let off = |d: [usize; 3]| cs[0] + d[0] * (cs[1] + d[1] * cs[2]);
                v.push((off(small), off(big)));
            }
        }
        v
    };
    if adjoint {
        for &(so, bo) in &others {
            for (o, &(i0, i1, t)) in taps.iter().enumerate() {
                let gv = src[bo + o * bs];
                dst[so + i0 * ss] += (1.0 - t) * gv;
                dst[so + i1 * ss] += t * gv;
            }
        }
    } else {
        for &(so, bo) in &others {
            for (o, &(i0, i1, t)) in taps.iter().enumerate() {
                dst[bo + o * bs] = (1.0 - t) * src[so + i0 * ss] + t * src[so + i1 * ss];
            }
        }
    }
}

/// Separable linear upsampling of one channel by an integer factor.
pub fn upsample_linear(src: &[f64], dims: [usize; 3], factor: usize, dst: &mut [f64]) {
    let d1 = [dims[0] * factor, dims[1], dims[2]];
    let d2 = [d1[0], dims[1] * factor, dims[2]];
    let mut a = vec![0.0; d1.iter().product()];
    let mut b = vec![0.0; d2.iter().product()];
    upsample_pass(src, dims, 0, factor, &mut a, false);
    upsample_pass(&a, d1, 1, factor, &mut b, false);
    upsample_pass(&b, d2, 2, factor, dst, false);
}

pub fn upsample_linear_adjoint(g: &[f64], dims: [usize; 3], factor: usize, acc: &mut [f64]) {
    let d1 = [dims[0] * factor, dims[1], dims[2]];
    let d2 = [d1[0], dims[1] * factor, dims[2]];
    let mut b = vec![0.0; d2.iter().product()];
    let mut a = vec![0.0; d1.iter().product()];
    upsample_pass(g, d2, 2, factor, &mut b, true);
    upsample_pass(&b, d1, 1, factor, &mut a, true);
    upsample_pass(&a, dims, 0, factor, acc, true);
}
