//! Raw numeric loops shared by the forward and adjoint passes.

use crate::error::{Result, TensorError};
use crate::tensor::{for_each_offset, strides_of};

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn mm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn mm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn mm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::shape(
                    "broadcast",
                    format!("shapes {a:?} and {b:?} are not broadcast-compatible"),
                ))
            }
        };
    }
    Ok(out)
}

/// For every element of `out_shape` (row-major), the flat index into a
/// tensor of `src_shape` broadcast up to it.
pub(crate) fn broadcast_index(src_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let src_strides = strides_of(src_shape);
    let mut strides = vec![0; rank];
    for i in 0..src_shape.len() {
        let o = rank - src_shape.len() + i;
        strides[o] = if src_shape[i] == 1 { 0 } else { src_strides[i] };
    }
    let mut idx = Vec::with_capacity(out_shape.iter().product());
    for_each_offset(out_shape, &strides, |off| idx.push(off));
    idx
}

/// Geometry of a single-sample 3D cross-correlation
/// `[C_in, h, w, d] ⋆ [C_out, C_in, k1, k2, k3] -> [C_out, h', w', d']`.
#[derive(Debug, Clone)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
    pub k: [usize; 3],
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn forward(
        op: &'static str,
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 5 {
            return Err(TensorError::shape(
                op,
                format!("expected input [C,h,w,d] and kernel [Co,Ci,k,k,k], got {input:?} and {kernel:?}"),
            ));
        }
        if stride == 0 {
            return Err(TensorError::shape(op, "stride must be at least 1"));
        }
        if kernel[1] != input[0] {
            return Err(TensorError::shape(
                op,
                format!("kernel expects {} input channels, input has {}", kernel[1], input[0]),
            ));
        }
        let mut out_dims = [0; 3];
        for i in 0..3 {
            let padded = input[i + 1] + 2 * pad;
            if kernel[i + 2] > padded {
                return Err(TensorError::shape(
                    op,
                    format!("kernel {:?} larger than padded input {:?} (pad {pad})", &kernel[2..], &input[1..]),
                ));
            }
            out_dims[i] = (padded - kernel[i + 2]) / stride + 1;
        }
        Ok(ConvGeom {
            cin: input[0],
            cout: kernel[0],
            in_dims: [input[1], input[2], input[3]],
            out_dims,
            k: [kernel[2], kernel[3], kernel[4]],
            stride,
            pad,
        })
    }

    /// Geometry of the convolution whose adjoint maps `input` (shaped like a
    /// conv output) to a tensor of extents `(h-1)·s + k`.
    pub fn transpose(input: &[usize], kernel: &[usize], stride: usize) -> Result<Self> {
        let op = "conv3d_transpose";
        if input.len() != 4 || kernel.len() != 5 {
            return Err(TensorError::shape(
                op,
                format!("expected input [C,h,w,d] and kernel [Ci,Co,k,k,k], got {input:?} and {kernel:?}"),
            ));
        }
        if stride == 0 {
            return Err(TensorError::shape(op, "stride must be at least 1"));
        }
        if kernel[0] != input[0] {
            return Err(TensorError::shape(
                op,
                format!("kernel expects {} input channels, input has {}", kernel[0], input[0]),
            ));
        }
        let mut in_dims = [0; 3];
        for i in 0..3 {
            in_dims[i] = (input[i + 1] - 1) * stride + kernel[i + 2];
        }
        Ok(ConvGeom {
            cin: kernel[1],
            cout: kernel[0],
            in_dims,
            out_dims: [input[1], input[2], input[3]],
            k: [kernel[2], kernel[3], kernel[4]],
            stride,
            pad: 0,
        })
    }

    pub fn in_shape(&self) -> Vec<usize> {
        vec![self.cin, self.in_dims[0], self.in_dims[1], self.in_dims[2]]
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.cout, self.out_dims[0], self.out_dims[1], self.out_dims[2]]
    }

    fn in_volume(&self) -> usize {
        self.in_dims.iter().product()
    }

    fn out_volume(&self) -> usize {
        self.out_dims.iter().product()
    }

    fn taps(&self) -> usize {
        self.k.iter().product()
    }

    /// Output positions `o` along one axis whose source `o·s + tap - pad` is in range.
    fn valid(&self, axis: usize, tap: usize) -> (usize, usize) {
        let (s, pad) = (self.stride, self.pad);
        let lo = if tap >= pad { 0 } else { (pad - tap).div_ceil(s) };
        let reach = self.in_dims[axis] - 1 + pad;
        if reach < tap {
            return (0, 0);
        }
        let hi = ((reach - tap) / s + 1).min(self.out_dims[axis]);
        (lo, hi.max(lo))
    }

    /// Calls `f(out_offset, in_offset, count)` for every contiguous run of
    /// output positions along the last axis touched by kernel tap `(a, b, c)`.
    /// Output positions advance by 1, input positions by `stride`.
    fn runs(&self, a: usize, b: usize, c: usize, mut f: impl FnMut(usize, usize, usize)) {
        let (x0, x1) = self.valid(0, a);
        let (y0, y1) = self.valid(1, b);
        let (z0, z1) = self.valid(2, c);
        if z0 >= z1 {
            return;
        }
        let [_, iw, id] = self.in_dims;
        let [_, ow, od] = self.out_dims;
        let s = self.stride;
        let iz0 = z0 * s + c - self.pad;
        for ox in x0..x1 {
            let ix = ox * s + a - self.pad;
            for oy in y0..y1 {
                let iy = oy * s + b - self.pad;
                f((ox * ow + oy) * od + z0, (ix * iw + iy) * id + iz0, z1 - z0);
            }
        }
    }

    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let mut t = 0;
        for a in 0..self.k[0] {
            for b in 0..self.k[1] {
                for c in 0..self.k[2] {
                    f(t, a, b, c);
                    t += 1;
                }
            }
        }
    }

    pub fn conv(&self, input: &[f64], kernel: &[f64]) -> Vec<f64> {
        let (iv, ov, nt, s) = (self.in_volume(), self.out_volume(), self.taps(), self.stride);
        let mut out = vec![0.0; self.cout * ov];
        for co in 0..self.cout {
            let orow = &mut out[co * ov..(co + 1) * ov];
            for ci in 0..self.cin {
                let src = &input[ci * iv..(ci + 1) * iv];
                let kbase = (co * self.cin + ci) * nt;
                self.for_each_tap(|t, a, b, c| {
                    let w = kernel[kbase + t];
                    if w == 0.0 {
                        return;
                    }
                    self.runs(a, b, c, |oo, io, n| {
                        if s == 1 {
                            for (o, &x) in orow[oo..oo + n].iter_mut().zip(&src[io..io + n]) {
                                *o += w * x;
                            }
                        } else {
                            for t in 0..n {
                                orow[oo + t] += w * src[io + t * s];
                            }
                        }
                    });
                });
            }
        }
        out
    }

    /// Adjoint of [`ConvGeom::conv`] with respect to its input.
    pub fn conv_adjoint(&self, gout: &[f64], kernel: &[f64]) -> Vec<f64> {
        let (iv, ov, nt, s) = (self.in_volume(), self.out_volume(), self.taps(), self.stride);
        let mut gin = vec![0.0; self.cin * iv];
        for ci in 0..self.cin {
            let dst = &mut gin[ci * iv..(ci + 1) * iv];
            for co in 0..self.cout {
                let g = &gout[co * ov..(co + 1) * ov];
                let kbase = (co * self.cin + ci) * nt;
                self.for_each_tap(|t, a, b, c| {
                    let w = kernel[kbase + t];
                    if w == 0.0 {
                        return;
                    }
                    self.runs(a, b, c, |oo, io, n| {
                        if s == 1 {
                            for (d, &gv) in dst[io..io + n].iter_mut().zip(&g[oo..oo + n]) {
                                *d += w * gv;
                            }
                        } else {
                            for t in 0..n {
                                dst[io + t * s] += w * g[oo + t];
                            }
                        }
                    });
                });
            }
        }
        gin
    }

    /// Gradient of `⟨gout, conv(input, K)⟩` with respect to `K`.
    pub fn kernel_grad(&self, gout: &[f64], input: &[f64]) -> Vec<f64> {
        let (iv, ov, nt, s) = (self.in_volume(), self.out_volume(), self.taps(), self.stride);
        let mut gk = vec![0.0; self.cout * self.cin * nt];
        for co in 0..self.cout {
            let g = &gout[co * ov..(co + 1) * ov];
            for ci in 0..self.cin {
                let src = &input[ci * iv..(ci + 1) * iv];
                let kbase = (co * self.cin + ci) * nt;
                self.for_each_tap(|t, a, b, c| {
                    let mut acc = 0.0;
                    self.runs(a, b, c, |oo, io, n| {
                        for t in 0..n {
                            acc += g[oo + t] * src[io + t * s];
                        }
                    });
                    gk[kbase + t] += acc;
                });
            }
        }
        gk
    }
}
