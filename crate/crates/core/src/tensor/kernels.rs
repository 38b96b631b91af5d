//! Raw numeric kernels over flat slices. Shapes are validated by callers.

use crate::error::{Error, Result};

/// `c = a · b + beta · c` for row-major operands, where `a` is `m×k` and `b`
/// is `k×n` after the optional transpositions.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the strides above address exactly the m×k, k×n and m×n
    // row-major buffers whose lengths are asserted in debug builds.
    unsafe {
        matrixmultiply::dgemm(
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

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

/// Spatial geometry of a 2-D sliding operation over one channel plane.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Geometry {
    pub fn new(
        (h, w): (usize, usize),
        (kh, kw): (usize, usize),
        (sh, sw): (usize, usize),
        padding: Padding,
    ) -> Result<Self> {
        if kh == 0 || kw == 0 || sh == 0 || sw == 0 {
            return Err(Error::InvalidArgument(
                "kernel and stride extents must be at least 1".into(),
            ));
        }
        let (oh, ow, pad_top, pad_left) = match padding {
            Padding::Same => {
                let oh = h.div_ceil(sh);
                let ow = w.div_ceil(sw);
                let ph = ((oh - 1) * sh + kh).saturating_sub(h);
                let pw = ((ow - 1) * sw + kw).saturating_sub(w);
                (oh, ow, ph / 2, pw / 2)
            }
            Padding::Valid => {
                if h < kh || w < kw {
                    return Err(Error::InvalidArgument(format!(
                        "empty output: {h}x{w} input under a {kh}x{kw} valid kernel"
                    )));
                }
                ((h - kh) / sh + 1, (w - kw) / sw + 1, 0, 0)
            }
        };
        if oh == 0 || ow == 0 {
            return Err(Error::InvalidArgument("empty output extent".into()));
        }
        Ok(Self {
            h,
            w,
            kh,
            kw,
            sh,
            sw,
            pad_top,
            pad_left,
            oh,
            ow,
        })
    }

    fn source(&self, o: usize, k: usize, stride: usize, pad: usize, limit: usize) -> Option<usize> {
        let pos = (o * stride + k).checked_sub(pad)?;
        (pos < limit).then_some(pos)
    }
}

/// Unfolds one `(c, h, w)` image into a `(c·kh·kw, oh·ow)` column matrix.
pub(crate) fn im2col(x: &[f64], c: usize, g: &Geometry, col: &mut [f64]) {
    let plane = g.oh * g.ow;
    for ch in 0..c {
        let xc = &x[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (ch * g.kh + i) * g.kw + j;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let Some(y) = g.source(oy, i, g.sh, g.pad_top, g.h) else {
                        dst[oy * g.ow..(oy + 1) * g.ow].fill(0.0);
                        continue;
                    };
                    for ox in 0..g.ow {
                        dst[oy * g.ow + ox] = match g.source(ox, j, g.sw, g.pad_left, g.w) {
                            Some(xx) => xc[y * g.w + xx],
                            None => 0.0,
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into image gradients.
pub(crate) fn col2im(col: &[f64], c: usize, g: &Geometry, dx: &mut [f64]) {
    let plane = g.oh * g.ow;
    for ch in 0..c {
        let dxc = &mut dx[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (ch * g.kh + i) * g.kw + j;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let Some(y) = g.source(oy, i, g.sh, g.pad_top, g.h) else {
                        continue;
                    };
                    for ox in 0..g.ow {
                        if let Some(xx) = g.source(ox, j, g.sw, g.pad_left, g.w) {
                            dxc[y * g.w + xx] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(g: &Geometry) -> bool {
    g.kh == 1 && g.kw == 1 && g.sh == 1 && g.sw == 1
}

/// Cross-correlation of `x: (n, c, h, w)` with `w: (o, c, kh, kw)`.
pub(crate) fn conv2d_forward(
    x: &[f64],
    n: usize,
    c: usize,
    weight: &[f64],
    o: usize,
    g: &Geometry,
) -> Vec<f64> {
    let plane = g.oh * g.ow;
    let kdim = c * g.kh * g.kw;
    let mut out = vec![0.0; n * o * plane];
    let mut col = if is_pointwise(g) {
        Vec::new()
    } else {
        vec![0.0; kdim * plane]
    };
    for b in 0..n {
        let xb = &x[b * c * g.h * g.w..(b + 1) * c * g.h * g.w];
        let cols: &[f64] = if is_pointwise(g) {
            xb
        } else {
            im2col(xb, c, g, &mut col);
            &col
        };
        gemm(
            o,
            kdim,
            plane,
            weight,
            false,
            cols,
            false,
            &mut out[b * o * plane..(b + 1) * o * plane],
            0.0,
        );
    }
    out
}

/// Returns `(dx, dw)` for [`conv2d_forward`] given the output gradient.
pub(crate) fn conv2d_backward(
    x: &[f64],
    n: usize,
    c: usize,
    weight: &[f64],
    o: usize,
    g: &Geometry,
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let plane = g.oh * g.ow;
    let kdim = c * g.kh * g.kw;
    let img = c * g.h * g.w;
    let mut dx = vec![0.0; n * img];
    let mut dw = vec![0.0; o * kdim];
    let pointwise = is_pointwise(g);
    let mut col = if pointwise {
        Vec::new()
    } else {
        vec![0.0; kdim * plane]
    };
    let mut dcol = vec![0.0; kdim * plane];
    for b in 0..n {
        let xb = &x[b * img..(b + 1) * img];
        let dyb = &dy[b * o * plane..(b + 1) * o * plane];
        let cols: &[f64] = if pointwise {
            xb
        } else {
            im2col(xb, c, g, &mut col);
            &col
        };
        gemm(o, plane, kdim, dyb, false, cols, true, &mut dw, 1.0);
        if pointwise {
            gemm(
                kdim,
                o,
                plane,
                weight,
                true,
                dyb,
                false,
                &mut dx[b * img..(b + 1) * img],
                0.0,
            );
        } else {
            gemm(kdim, o, plane, weight, true, dyb, false, &mut dcol, 0.0);
            col2im(&dcol, c, g, &mut dx[b * img..(b + 1) * img]);
        }
    }
    (dx, dw)
}

/// Per-channel cross-correlation of `x: (n, c, h, w)` with `w: (c, 1, kh, kw)`.
pub(crate) fn depthwise_forward(
    x: &[f64],
    n: usize,
    c: usize,
    weight: &[f64],
    g: &Geometry,
) -> Vec<f64> {
    let plane = g.oh * g.ow;
    let mut out = vec![0.0; n * c * plane];
    for b in 0..n {
        for ch in 0..c {
            let xc = &x[(b * c + ch) * g.h * g.w..(b * c + ch + 1) * g.h * g.w];
            let wc = &weight[ch * g.kh * g.kw..(ch + 1) * g.kh * g.kw];
            let oc = &mut out[(b * c + ch) * plane..(b * c + ch + 1) * plane];
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let wv = wc[i * g.kw + j];
                    for oy in 0..g.oh {
                        let Some(y) = g.source(oy, i, g.sh, g.pad_top, g.h) else {
                            continue;
                        };
                        for ox in 0..g.ow {
                            if let Some(xx) = g.source(ox, j, g.sw, g.pad_left, g.w) {
                                oc[oy * g.ow + ox] += wv * xc[y * g.w + xx];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn depthwise_backward(
    x: &[f64],
    n: usize,
    c: usize,
    weight: &[f64],
    g: &Geometry,
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let plane = g.oh * g.ow;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; weight.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * g.h * g.w;
            let doc = &dy[(b * c + ch) * plane..(b * c + ch + 1) * plane];
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let widx = ch * g.kh * g.kw + i * g.kw + j;
                    let wv = weight[widx];
                    let mut acc = 0.0;
                    for oy in 0..g.oh {
                        let Some(y) = g.source(oy, i, g.sh, g.pad_top, g.h) else {
                            continue;
                        };
                        for ox in 0..g.ow {
                            if let Some(xx) = g.source(ox, j, g.sw, g.pad_left, g.w) {
                                let d = doc[oy * g.ow + ox];
                                acc += d * x[off + y * g.w + xx];
                                dx[off + y * g.w + xx] += d * wv;
                            }
                        }
                    }
                    dw[widx] += acc;
                }
            }
        }
    }
    (dx, dw)
}

/// Max pooling over `(n·c)` planes; returns outputs and the flat argmax index
/// of each window. Ties resolve to the first element in row-major order.
pub(crate) fn maxpool_forward(x: &[f64], planes: usize, g: &Geometry) -> (Vec<f64>, Vec<usize>) {
    let plane = g.oh * g.ow;
    let mut out = vec![0.0; planes * plane];
    let mut arg = vec![0; planes * plane];
    for p in 0..planes {
        let base = p * g.h * g.w;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for i in 0..g.kh {
                    for j in 0..g.kw {
                        let idx = base + (oy * g.sh + i) * g.w + ox * g.sw + j;
                        if best_idx == usize::MAX || x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out[p * plane + oy * g.ow + ox] = best;
                arg[p * plane + oy * g.ow + ox] = best_idx;
            }
        }
    }
    (out, arg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_extents() {
        let g = Geometry::new((5, 7), (3, 3), (2, 2), Padding::Same).unwrap();
        assert_eq!((g.oh, g.ow), (3, 4));
        let g = Geometry::new((32, 32), (3, 3), (1, 1), Padding::Same).unwrap();
        assert_eq!((g.oh, g.ow, g.pad_top, g.pad_left), (32, 32, 1, 1));
    }

    #[test]
    fn valid_padding_extents() {
        let g = Geometry::new((5, 7), (3, 3), (2, 2), Padding::Valid).unwrap();
        assert_eq!((g.oh, g.ow), (2, 3));
        assert!(Geometry::new((2, 7), (3, 3), (1, 1), Padding::Valid).is_err());
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, 0.0);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, 0.0);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}
