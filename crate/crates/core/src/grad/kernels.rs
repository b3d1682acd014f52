//! Dense kernels shared by the tape and plain (non-differentiable) code paths.

use crate::real::Real;

/// `out[m×n] = a[m×k] · b[k×n]`.
pub fn matmul_nn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    matmul_nn_acc(a, b, m, k, n, &mut out);
    out
}

/// `out += a · b`.
pub fn matmul_nn_acc<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + s * bv;
            }
        }
    }
}

pub fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    matmul_nn(a, &transpose(b, n, k), m, k, n)
}

/// `a[k×m]ᵀ · b[k×n]`.
pub fn matmul_tn<T: Real>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let s = a[p * m + i];
            if s == T::zero() {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + s * bv;
            }
        }
    }
    out
}

/// Geometry of a 2-D convolution over a `[C, H, W]` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
}

impl Conv2dGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.ph - self.kh) / self.sh + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pw - self.kw) / self.sw + 1
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

/// Unfolds input patches into a `[Cin·kh·kw, Ho·Wo]` matrix.
pub fn im2col<T: Real>(x: &[T], g: &Conv2dGeom) -> Vec<T> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let cols = ho * wo;
    let mut col = vec![T::zero(); g.patch() * cols];
    for c in 0..g.cin {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let r = (c * g.kh + i) * g.kw + j;
                let dst = &mut col[r * cols..(r + 1) * cols];
                for oh in 0..ho {
                    let ih = (oh * g.sh + i) as isize - g.ph as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let src = &x[(c * g.h + ih as usize) * g.w..(c * g.h + ih as usize + 1) * g.w];
                    for ow in 0..wo {
                        let iw = (ow * g.sw + j) as isize - g.pw as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst[oh * wo + ow] = src[iw as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-adds a column matrix back into input layout.
pub fn col2im<T: Real>(col: &[T], g: &Conv2dGeom) -> Vec<T> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let cols = ho * wo;
    let mut x = vec![T::zero(); g.cin * g.h * g.w];
    for c in 0..g.cin {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let r = (c * g.kh + i) * g.kw + j;
                let src = &col[r * cols..(r + 1) * cols];
                for oh in 0..ho {
                    let ih = (oh * g.sh + i) as isize - g.ph as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + ih as usize) * g.w;
                    for ow in 0..wo {
                        let iw = (ow * g.sw + j) as isize - g.pw as isize;
                        if iw >= 0 && iw < g.w as isize {
                            x[base + iw as usize] = x[base + iw as usize] + src[oh * wo + ow];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Forward 2-D convolution, `[Cout, Ho, Wo]`.
pub fn conv2d<T: Real>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &Conv2dGeom) -> Vec<T> {
    let col = im2col(x, g);
    let p = g.out_h() * g.out_w();
    let mut out = matmul_nn(weight, &col, g.cout, g.patch(), p);
    if let Some(b) = bias {
        for (c, &bv) in b.iter().enumerate() {
            out[c * p..(c + 1) * p].iter_mut().for_each(|o| *o = *o + bv);
        }
    }
    out
}

/// Unfolds a `[T, C]` sequence into `[T, C·k]` windows with zero padding `pad` on the left.
pub fn unfold_rows<T: Real>(x: &[T], t: usize, c: usize, k: usize, pad: usize) -> Vec<T> {
    let mut col = vec![T::zero(); t * c * k];
    for ti in 0..t {
        let row = &mut col[ti * c * k..(ti + 1) * c * k];
        for j in 0..k {
            let src = ti as isize + j as isize - pad as isize;
            if src < 0 || src >= t as isize {
                continue;
            }
            let s = &x[src as usize * c..(src as usize + 1) * c];
            for ch in 0..c {
                row[ch * k + j] = s[ch];
            }
        }
    }
    col
}

pub fn fold_rows<T: Real>(col: &[T], t: usize, c: usize, k: usize, pad: usize) -> Vec<T> {
    let mut x = vec![T::zero(); t * c];
    for ti in 0..t {
        let row = &col[ti * c * k..(ti + 1) * c * k];
        for j in 0..k {
            let src = ti as isize + j as isize - pad as isize;
            if src < 0 || src >= t as isize {
                continue;
            }
            let base = src as usize * c;
            for ch in 0..c {
                x[base + ch] = x[base + ch] + row[ch * k + j];
            }
        }
    }
    x
}

/// tanh-approximated GELU.
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = T::lit(0.5);
    let u = c * (x + T::lit(0.044715) * x * x * x);
    half * x * (T::one() + u.tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = T::lit(0.5);
    let k = T::lit(0.044715);
    let u = c * (x + k * x * x * x);
    let th = u.tanh();
    let du = c * (T::one() + T::lit(3.0) * k * x * x);
    half * (T::one() + th) + half * x * (T::one() - th * th) * du
}
