//! Raw loops behind the convolution and matmul primitives.

use super::Float;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Output index range `[lo, hi)` along one axis for kernel offset `kk`,
    /// i.e. the outputs whose input coordinate `o*stride + kk - pad` is in
    /// `0..extent`.
    fn valid_range(&self, kk: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > kk { (self.pad - kk).div_ceil(s) } else { 0 };
        let hi = if extent + self.pad > kk { ((extent + self.pad - kk - 1) / s + 1).min(out_extent) } else { 0 };
        (lo, hi.max(lo))
    }

    fn ranges(&self) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
        let rows = (0..self.k).map(|ky| self.valid_range(ky, self.h, self.oh)).collect();
        let cols = (0..self.k).map(|kx| self.valid_range(kx, self.w, self.ow)).collect();
        (rows, cols)
    }

    pub fn input_len(&self) -> usize {
        self.cin * self.h * self.w
    }
}

/// Lowers a batch to a `[cin * k * k, n * oh * ow]` column matrix; padded
/// taps are zero.
fn im2col<T: Float>(g: &ConvGeom, x: &[T]) -> Vec<T> {
    let (rows, cols) = g.ranges();
    let plane = g.oh * g.ow;
    let np = g.n * plane;
    let mut out = vec![T::zero(); g.cin * g.k * g.k * np];
    for ci in 0..g.cin {
        for ky in 0..g.k {
            let (oy_lo, oy_hi) = rows[ky];
            for kx in 0..g.k {
                let (ox_lo, ox_hi) = cols[kx];
                let row = &mut out[((ci * g.k + ky) * g.k + kx) * np..][..np];
                for n in 0..g.n {
                    let xs = &x[n * g.input_len() + ci * g.h * g.w..][..g.h * g.w];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let dst = &mut row[n * plane + oy * g.ow..][..g.ow];
                        for ox in ox_lo..ox_hi {
                            dst[ox] = xs[iy * g.w + ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im<T: Float>(g: &ConvGeom, cols_grad: &[T], dx: &mut [T]) {
    let (rows, cols) = g.ranges();
    let plane = g.oh * g.ow;
    let np = g.n * plane;
    for ci in 0..g.cin {
        for ky in 0..g.k {
            let (oy_lo, oy_hi) = rows[ky];
            for kx in 0..g.k {
                let (ox_lo, ox_hi) = cols[kx];
                let row = &cols_grad[((ci * g.k + ky) * g.k + kx) * np..][..np];
                for n in 0..g.n {
                    let dxs = &mut dx[n * g.input_len() + ci * g.h * g.w..][..g.h * g.w];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let src = &row[n * plane + oy * g.ow..][..g.ow];
                        for ox in ox_lo..ox_hi {
                            dxs[iy * g.w + ox * g.stride + kx - g.pad] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

/// `[n, c, p]` to `[c, n * p]`.
fn to_channel_major<T: Float>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for i in 0..n {
        for ch in 0..c {
            out[ch * n * p + i * p..][..p].copy_from_slice(&x[(i * c + ch) * p..][..p]);
        }
    }
    out
}

pub(crate) fn conv_forward<T: Float>(g: &ConvGeom, x: &[T], w: &[T], b: &[T], out: &mut [T]) {
    let plane = g.oh * g.ow;
    let np = g.n * plane;
    let kk = g.cin * g.k * g.k;
    let cols = im2col(g, x);
    let mut acc = vec![T::zero(); g.cout * np];
    matmul_acc(w, &cols, &mut acc, g.cout, kk, np);
    for n in 0..g.n {
        for co in 0..g.cout {
            let dst = &mut out[(n * g.cout + co) * plane..][..plane];
            for (d, &a) in dst.iter_mut().zip(&acc[co * np + n * plane..][..plane]) {
                *d = a + b[co];
            }
        }
    }
}

pub(crate) fn conv_backward_input<T: Float>(g: &ConvGeom, dout: &[T], w: &[T], dx: &mut [T]) {
    let np = g.n * g.oh * g.ow;
    let kk = g.cin * g.k * g.k;
    let d = to_channel_major(dout, g.n, g.cout, g.oh * g.ow);
    let mut cols_grad = vec![T::zero(); kk * np];
    matmul_grad_b(w, &d, &mut cols_grad, g.cout, kk, np);
    col2im(g, &cols_grad, dx);
}

/// Accumulates kernel and bias gradients in a fixed reduction order.
pub(crate) fn conv_backward_params<T: Float>(
    g: &ConvGeom,
    dout: &[T],
    x: &[T],
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let plane = g.oh * g.ow;
    let np = g.n * plane;
    let d = to_channel_major(dout, g.n, g.cout, plane);
    if let Some(dw) = dw {
        let cols = im2col(g, x);
        matmul_grad_a(&d, &cols, dw, g.cout, g.cin * g.k * g.k, np);
    }
    if let Some(db) = db {
        for (co, db) in db.iter_mut().enumerate() {
            *db += d[co * np..(co + 1) * np].iter().copied().sum::<T>();
        }
    }
}

/// Dot product with eight independent accumulators.
#[inline]
fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7])) + tail
}

/// `out[m,n] += a[m,k] * b[k,n]`
pub(crate) fn matmul_acc<T: Float>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,k] += g[m,n] * b[k,n]^T`
pub(crate) fn matmul_grad_a<T: Float>(g: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += dot(grow, brow);
        }
    }
}

/// `out[k,n] += a[m,k]^T * g[m,n]`
pub(crate) fn matmul_grad_b<T: Float>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, &gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}
