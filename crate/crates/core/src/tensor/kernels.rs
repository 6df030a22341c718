//! Inner loops for the heavy operators. All loops have a fixed reduction
//! order, so results are bitwise reproducible for a given thread count and
//! independent of it (work is split only across independent outputs).

use rayon::prelude::*;

use super::Scalar;

/// Output extent of a 3-tap convolution along one axis.
pub fn conv_out_extent(n: usize, stride: usize, padding: usize) -> Option<usize> {
    let span = n + 2 * padding;
    if span < 3 || stride == 0 {
        None
    } else {
        Some((span - 3) / stride + 1)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub dims: [usize; 3],
    pub out: [usize; 3],
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    fn in_plane(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }
    fn out_plane(&self) -> usize {
        self.out[0] * self.out[1] * self.out[2]
    }
}

#[inline]
pub(crate) fn axpy<T: Scalar>(out: &mut [T], w: T, x: &[T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = *o + w * v;
    }
}

/// Dot product with eight fixed partial accumulators.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut s = T::zero();
    for v in acc {
        s = s + v;
    }
    for (x, y) in ra.iter().zip(rb) {
        s = s + *x * *y;
    }
    s
}

/// Column-block width for the lowered convolutions.
const CHUNK: usize = 1024;

/// Polyphase view of a padded volume. A stride-`s` correlation becomes a
/// stride-1 sum of shifted phase planes: output voxel `(z, y, x)` sits at
/// `z * q1 * q2 + y * q2 + x` of a `q`-shaped grid, and tap `(a, b, c)` reads
/// phase `(a % s, b % s, c % s)` shifted by `(a / s, b / s, c / s)`. Entries
/// of that indexing past the output extent are scratch.
struct Phases {
    s: usize,
    q: [usize; 3],
    out: [usize; 3],
    /// Phase plane length including read slack for a trailing chunk.
    plane: usize,
    /// Extended output length.
    len: usize,
    taps: [(usize, usize); 27],
}

impl Phases {
    fn new(g: &ConvGeom) -> Self {
        let s = g.stride;
        let q = g.dims.map(|n| (n + 2 * g.pad).div_ceil(s));
        let out = g.out;
        let qq = q[1] * q[2];
        let len = (out[0] - 1) * qq + (out[1] - 1) * q[2] + out[2];
        let mut taps = [(0, 0); 27];
        for (t, slot) in taps.iter_mut().enumerate() {
            let (a, b, c) = (t / 9, (t / 3) % 3, t % 3);
            let phase = ((a % s) * s + b % s) * s + c % s;
            *slot = (phase, (a / s) * qq + (b / s) * q[2] + c / s);
        }
        Self { s, q, out, plane: q[0] * qq, len, taps }
    }

    fn nphase(&self) -> usize {
        self.s * self.s * self.s
    }

    fn channel_len(&self) -> usize {
        self.nphase() * self.plane
    }

    /// Phase-plane index of each voxel of a `dims` volume padded by `pad`.
    fn index_map(&self, dims: [usize; 3], pad: usize) -> Vec<usize> {
        let [d, h, w] = dims;
        let (s, q) = (self.s, self.q);
        let mut idx = Vec::with_capacity(d * h * w);
        for z in 0..d {
            let pz = z + pad;
            for y in 0..h {
                let py = y + pad;
                for x in 0..w {
                    let px = x + pad;
                    let phase = ((pz % s) * s + py % s) * s + px % s;
                    idx.push(phase * self.plane + ((pz / s) * q[1] + py / s) * q[2] + px / s);
                }
            }
        }
        idx
    }

    fn ext_rows(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let [od, oh, ow] = self.out;
        (0..od * oh).map(move |r| ((r / oh * self.q[1] + r % oh) * self.q[2], r * ow))
    }
}

/// `c = a * b + beta * c` on row-major `m x k` and `k x n` operands given by strides.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], a_s: (usize, usize), b: &[T], b_s: (usize, usize), beta: T, c: &mut [T], rsc: usize) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for v in &mut c[i * rsc..i * rsc + n] {
                *v = *v * beta;
            }
        }
        return;
    }
    let last = |rs: usize, cs: usize, r: usize, cc: usize| (r - 1) * rs + (cc - 1) * cs;
    assert!(last(a_s.0, a_s.1, m, k) < a.len());
    assert!(last(b_s.0, b_s.1, k, n) < b.len());
    assert!(last(rsc, 1, m, n) < c.len());
    // SAFETY: every addressed element was bounds checked above and `c` does not alias.
    unsafe { T::gemm(m, k, n, a.as_ptr(), a_s, b.as_ptr(), b_s, beta, c.as_mut_ptr(), rsc) }
}

/// Lowers columns `start..start + n` of the extended grid into a
/// `[cin * 27, n]` matrix.
fn lower<T: Scalar>(ph: &Phases, chans: &[T], cin: usize, start: usize, n: usize, cols: &mut [T]) {
    let cl = ph.channel_len();
    for ci in 0..cin {
        let base = &chans[ci * cl..(ci + 1) * cl];
        for (t, &(p, off)) in ph.taps.iter().enumerate() {
            let src = p * ph.plane + start + off;
            cols[(ci * 27 + t) * n..][..n].copy_from_slice(&base[src..src + n]);
        }
    }
}

fn split<T: Scalar>(ph: &Phases, g: &ConvGeom, x: &[T]) -> Vec<T> {
    let idx = ph.index_map(g.dims, g.pad);
    let (cl, vol) = (ph.channel_len(), g.in_plane());
    let mut out = vec![T::zero(); g.batch * g.cin * cl];
    out.par_chunks_mut(cl).enumerate().for_each(|(p, dst)| {
        for (&i, &v) in idx.iter().zip(&x[p * vol..(p + 1) * vol]) {
            dst[i] = v;
        }
    });
    out
}

/// Output gradient laid out on the extended grid with zero scratch.
fn extend<T: Scalar>(ph: &Phases, g: &ConvGeom, grad_out: &[T]) -> Vec<T> {
    let osize = g.out_plane();
    let ow = g.out[2];
    let mut ext = vec![T::zero(); g.batch * g.cout * ph.len];
    ext.par_chunks_mut(ph.len).enumerate().for_each(|(bc, dst)| {
        let src = &grad_out[bc * osize..(bc + 1) * osize];
        for (e, o) in ph.ext_rows() {
            dst[e..e + ow].copy_from_slice(&src[o..o + ow]);
        }
    });
    ext
}

fn chunks(len: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..len).step_by(CHUNK).map(move |s| (s, CHUNK.min(len - s)))
}

pub(crate) fn conv3d_forward<T: Scalar>(g: &ConvGeom, input: &[T], kernel: &[T]) -> Vec<T> {
    let ph = Phases::new(g);
    let x = split(&ph, g, input);
    let (cl, rows, osize, ow) = (ph.channel_len(), g.cin * 27, g.out_plane(), g.out[2]);
    let mut out = vec![T::zero(); g.batch * g.cout * osize];
    out.par_chunks_mut(g.cout * osize).enumerate().for_each(|(b, dst)| {
        let chans = &x[b * g.cin * cl..(b + 1) * g.cin * cl];
        let mut ext = vec![T::zero(); g.cout * ph.len];
        let mut cols = vec![T::zero(); rows * CHUNK];
        for (start, n) in chunks(ph.len) {
            lower(&ph, chans, g.cin, start, n, &mut cols);
            gemm(g.cout, rows, n, kernel, (rows, 1), &cols, (n, 1), T::zero(), &mut ext[start..], ph.len);
        }
        for co in 0..g.cout {
            for (e, o) in ph.ext_rows() {
                dst[co * osize + o..][..ow].copy_from_slice(&ext[co * ph.len + e..][..ow]);
            }
        }
    });
    out
}

pub(crate) fn conv3d_backward_input<T: Scalar>(g: &ConvGeom, grad_out: &[T], kernel: &[T]) -> Vec<T> {
    let ph = Phases::new(g);
    let gext = extend(&ph, g, grad_out);
    let idx = ph.index_map(g.dims, g.pad);
    let (cl, rows, vol) = (ph.channel_len(), g.cin * 27, g.in_plane());
    let mut gin = vec![T::zero(); g.batch * g.cin * vol];
    gin.par_chunks_mut(g.cin * vol).enumerate().for_each(|(b, dst)| {
        let go = &gext[b * g.cout * ph.len..(b + 1) * g.cout * ph.len];
        let mut acc = vec![T::zero(); g.cin * cl];
        let mut cols = vec![T::zero(); rows * CHUNK];
        for (start, n) in chunks(ph.len) {
            // kernel^T [rows, cout] x gext [cout, n]
            gemm(rows, g.cout, n, kernel, (1, rows), &go[start..], (ph.len, 1), T::zero(), &mut cols, n);
            for ci in 0..g.cin {
                let base = &mut acc[ci * cl..(ci + 1) * cl];
                for (t, &(p, off)) in ph.taps.iter().enumerate() {
                    let d = &mut base[p * ph.plane + start + off..][..n];
                    for (a, &v) in d.iter_mut().zip(&cols[(ci * 27 + t) * n..][..n]) {
                        *a = *a + v;
                    }
                }
            }
        }
        for ci in 0..g.cin {
            for (v, &i) in dst[ci * vol..(ci + 1) * vol].iter_mut().zip(&idx) {
                *v = acc[ci * cl + i];
            }
        }
    });
    gin
}

pub(crate) fn conv3d_backward_kernel<T: Scalar>(g: &ConvGeom, grad_out: &[T], input: &[T]) -> Vec<T> {
    let ph = Phases::new(g);
    let x = split(&ph, g, input);
    let gext = extend(&ph, g, grad_out);
    let (cl, rows) = (ph.channel_len(), g.cin * 27);
    let mut gk = vec![T::zero(); g.cout * rows];
    let mut cols = vec![T::zero(); rows * CHUNK];
    for b in 0..g.batch {
        let chans = &x[b * g.cin * cl..(b + 1) * g.cin * cl];
        let go = &gext[b * g.cout * ph.len..(b + 1) * g.cout * ph.len];
        for (start, n) in chunks(ph.len) {
            lower(&ph, chans, g.cin, start, n, &mut cols);
            // gext [cout, n] x cols^T [n, rows]
            gemm(g.cout, n, rows, &go[start..], (ph.len, 1), &cols, (1, n), T::one(), &mut gk, rows);
        }
    }
    gk
}

/// `out[b, co, :] = sum_ci w[co, ci] * x[b, ci, :]`
pub(crate) fn conv1x1_forward<T: Scalar>(batch: usize, cin: usize, cout: usize, s: usize, x: &[T], w: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); batch * cout * s];
    out.par_chunks_mut(cout * s).enumerate().for_each(|(b, dst)| {
        gemm(cout, cin, s, w, (cin, 1), &x[b * cin * s..], (s, 1), T::zero(), dst, s);
    });
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1x1_backward<T: Scalar>(
    batch: usize,
    cin: usize,
    cout: usize,
    s: usize,
    x: &[T],
    w: &[T],
    gout: &[T],
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let gx = want_x.then(|| {
        let mut gx = vec![T::zero(); batch * cin * s];
        gx.par_chunks_mut(cin * s).enumerate().for_each(|(b, dst)| {
            gemm(cin, cout, s, w, (1, cin), &gout[b * cout * s..], (s, 1), T::zero(), dst, s);
        });
        gx
    });
    let gw = want_w.then(|| {
        let mut gw = vec![T::zero(); cout * cin];
        for b in 0..batch {
            gemm(cout, s, cin, &gout[b * cout * s..], (s, 1), &x[b * cin * s..], (1, s), T::one(), &mut gw, cin);
        }
        gw
    });
    (gx, gw)
}

pub(crate) fn matmul<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    gemm(m, k, n, a, (k, 1), b, (n, 1), T::zero(), &mut out, n);
    out
}

/// Interpolation taps for linear resizing of an axis from `n` to `m` samples
/// with the half-pixel (align-corners = false) convention.
pub fn upsample_weights(n: usize, m: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = n as f64 / m as f64;
    (0..m)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let l1 = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

/// Linear resize of the middle axis of a `[outer, n, inner]` buffer to `m`.
pub(crate) fn resize_axis<T: Scalar>(x: &[T], outer: usize, n: usize, inner: usize, m: usize) -> Vec<T> {
    let taps = upsample_weights(n, m);
    let mut out = vec![T::zero(); outer * m * inner];
    for o in 0..outer {
        for (j, &(i0, i1, l0, l1)) in taps.iter().enumerate() {
            let dst = &mut out[(o * m + j) * inner..(o * m + j + 1) * inner];
            let a = &x[(o * n + i0) * inner..(o * n + i0 + 1) * inner];
            let b = &x[(o * n + i1) * inner..(o * n + i1 + 1) * inner];
            let (l0, l1) = (T::of(l0), T::of(l1));
            for ((d, &u), &v) in dst.iter_mut().zip(a).zip(b) {
                *d = l0 * u + l1 * v;
            }
        }
    }
    out
}

/// Adjoint of [`resize_axis`].
pub(crate) fn resize_axis_adjoint<T: Scalar>(g: &[T], outer: usize, n: usize, inner: usize, m: usize) -> Vec<T> {
    let taps = upsample_weights(n, m);
    let mut out = vec![T::zero(); outer * n * inner];
    for o in 0..outer {
        for (j, &(i0, i1, l0, l1)) in taps.iter().enumerate() {
            let src = &g[(o * m + j) * inner..(o * m + j + 1) * inner];
            axpy(&mut out[(o * n + i0) * inner..(o * n + i0 + 1) * inner], T::of(l0), src);
            if l1 != 0.0 {
                axpy(&mut out[(o * n + i1) * inner..(o * n + i1 + 1) * inner], T::of(l1), src);
            }
        }
    }
    out
}

/// Trilinear resize of `[lead, d, h, w]` to `[lead, nd, nh, nw]`, one axis at a time (w, h, d).
/// Trilinear, half-pixel resize of `lead` stacked `[d, h, w]` grids.
pub fn resize3<T: Scalar>(x: &[T], lead: usize, dims: [usize; 3], new: [usize; 3]) -> Vec<T> {
    let [d, h, w] = dims;
    let [nd, nh, nw] = new;
    let a = resize_axis(x, lead * d * h, w, 1, nw);
    let b = resize_axis(&a, lead * d, h, nw, nh);
    resize_axis(&b, lead, d, nh * nw, nd)
}

pub(crate) fn resize3_adjoint<T: Scalar>(g: &[T], lead: usize, dims: [usize; 3], new: [usize; 3]) -> Vec<T> {
    let [d, h, w] = dims;
    let [nd, nh, nw] = new;
    let b = resize_axis_adjoint(g, lead, d, nh * nw, nd);
    let a = resize_axis_adjoint(&b, lead * d, h, nw, nh);
    resize_axis_adjoint(&a, lead * d * h, w, 1, nw)
}
