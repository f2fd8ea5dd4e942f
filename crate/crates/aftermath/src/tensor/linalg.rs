//! Dense kernels behind the tensor ops: matmul and im2col/col2im.
//!
//! Parallelism only ever splits disjoint output regions, so results are
//! bit-identical regardless of thread count.

use rayon::prelude::*;

use super::Element;

/// Row-major matmul: `a [m,k] @ b [k,n] -> [m,n]`.
pub fn matmul<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![T::zero(); m * n];
    let body = |i: usize, row: &mut [T]| {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    };
    // Each output row is computed independently; splitting rows across
    // threads cannot change the result.
    if m * k * n >= 1 << 16 {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
    out
}

/// `a^T [k,m] @ b` without materializing the transpose: `a [m,k]`, `b [m,n] -> [k,n]`.
pub fn matmul_at_b<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let mut out = vec![T::zero(); k * n];
    let body = |i: usize, row: &mut [T]| {
        for p in 0..m {
            let v = a[p * k + i];
            if v == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += v * bv;
            }
        }
    };
    if m * k * n >= 1 << 16 {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
    out
}

/// `a @ b^T`: `a [m,k]`, `b [n,k] -> [m,n]`.
pub fn matmul_a_bt<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![T::zero(); m * n];
    let body = |i: usize, row: &mut [T]| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o = acc;
        }
    };
    if m * k * n >= 1 << 16 {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
    out
}

/// Spatial geometry of a sliding-window op.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(in_h: usize, in_w: usize, kh: usize, kw: usize, stride: usize, padding: usize) -> Option<Self> {
        let eff_h = in_h + 2 * padding;
        let eff_w = in_w + 2 * padding;
        if kh > eff_h || kw > eff_w || stride == 0 {
            return None;
        }
        Some(ConvGeom {
            in_h,
            in_w,
            kh,
            kw,
            stride,
            padding,
            out_h: (eff_h - kh) / stride + 1,
            out_w: (eff_w - kw) / stride + 1,
        })
    }
}

/// Unfolds one `[C,H,W]` sample into `[C*kh*kw, out_h*out_w]` columns
/// (zero-filled outside the image).
pub fn im2col<T: Element>(sample: &[T], channels: usize, g: &ConvGeom) -> Vec<T> {
    let cols_w = g.out_h * g.out_w;
    let mut cols = vec![T::zero(); channels * g.kh * g.kw * cols_w];
    for c in 0..channels {
        let plane = &sample[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for u in 0..g.kh {
            for v in 0..g.kw {
                let row = ((c * g.kh + u) * g.kw + v) * cols_w;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + u) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let in_row = iy as usize * g.in_w;
                    let out_row = row + oy * g.out_w;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + v) as isize - g.padding as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        cols[out_row + ox] = plane[in_row + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Folds `[C*kh*kw, out_h*out_w]` columns back onto a `[C,H,W]` sample,
/// adding overlapping contributions. Inverse scatter of [`im2col`].
pub fn col2im_add<T: Element>(cols: &[T], channels: usize, g: &ConvGeom, sample: &mut [T]) {
    let cols_w = g.out_h * g.out_w;
    for c in 0..channels {
        let plane = &mut sample[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for u in 0..g.kh {
            for v in 0..g.kw {
                let row = ((c * g.kh + u) * g.kw + v) * cols_w;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + u) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let in_row = iy as usize * g.in_w;
                    let out_row = row + oy * g.out_w;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + v) as isize - g.padding as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        plane[in_row + ix as usize] += cols[out_row + ox];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [[1,2],[3,4]] @ [[5,6],[7,8]] = [[19,22],[43,50]]
        let c = matmul(&[1.0f64, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 2, 2, 2);
        assert_eq!(c, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_transposed_variants_agree() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let direct = matmul(&a, &b, 2, 3, 2);
        // a^T is 3x2: matmul_at_b(a as [2,3]) computes a^T @ x for x [2,n]
        let at_then = matmul_at_b(&a, &[1.0, 0.0, 0.0, 1.0], 2, 3, 2); // a^T @ I = a^T
        assert_eq!(at_then, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        // b^T is 2x3: a @ (b^T)^T == a @ b
        let bt: Vec<f64> = vec![7.0, 9.0, 11.0, 8.0, 10.0, 12.0]; // [2,3] view of b^T
        let via_bt = matmul_a_bt(&a, &bt, 2, 3, 2);
        assert_eq!(direct, via_bt);
    }

    #[test]
    fn conv_geom_output_size() {
        let g = ConvGeom::new(224, 224, 7, 7, 2, 3).unwrap();
        assert_eq!((g.out_h, g.out_w), (112, 112));
        let g = ConvGeom::new(112, 112, 3, 3, 2, 1).unwrap();
        assert_eq!((g.out_h, g.out_w), (56, 56));
        assert!(ConvGeom::new(2, 2, 5, 5, 1, 0).is_none());
    }

    #[test]
    fn im2col_col2im_roundtrip_counts_window_multiplicity() {
        // 1 channel, 3x3 input, 2x2 kernel, stride 1: each interior pixel is
        // visited once per window containing it.
        let g = ConvGeom::new(3, 3, 2, 2, 1, 0).unwrap();
        let sample: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let cols = im2col(&sample, 1, &g);
        let mut back = vec![0.0; 9];
        col2im_add(&cols, 1, &g, &mut back);
        // centre pixel (value 5) appears in all 4 windows
        assert_eq!(back[4], 4.0 * 5.0);
        // corner pixel (value 1) appears in exactly 1 window
        assert_eq!(back[0], 1.0);
    }
}
