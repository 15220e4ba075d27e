//! Raw row-major kernels shared by the tape's forward and backward rules.

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn matmul_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (c, &b) in c_row.iter_mut().zip(b_row) {
                *c += a_ip * b;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn matmul_nt_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            c[i * n + j] += dot(a_row, b_row);
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn matmul_tn_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let a_pi = a[p * m + i];
            if a_pi == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (c, &b) in c_row.iter_mut().zip(b_row) {
                *c += a_pi * b;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Geometry of a stride-1, unpadded 2-d cross-correlation.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.height - self.kernel + 1
    }

    pub fn out_w(&self) -> usize {
        self.width - self.kernel + 1
    }

    /// Rows of the column matrix: one per (channel, ky, kx).
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Columns of the column matrix: one per output position.
    pub fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Unfolds one sample `[c×h×w]` into `cols[(c·k·k) × (oh·ow)]`.
pub(crate) fn im2col(image: &[f64], g: ConvGeom, cols: &mut [f64]) {
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.kernel);
    let plane = g.height * g.width;
    for c in 0..g.channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for y in 0..oh {
                    let src = c * plane + (y + ky) * g.width + kx;
                    dst[y * ow..(y + 1) * ow].copy_from_slice(&image[src..src + ow]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub(crate) fn col2im_acc(cols: &[f64], g: ConvGeom, image: &mut [f64]) {
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.kernel);
    let plane = g.height * g.width;
    for c in 0..g.channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for y in 0..oh {
                    let dst = c * plane + (y + ky) * g.width + kx;
                    for (d, s) in image[dst..dst + ow].iter_mut().zip(&src[y * ow..(y + 1) * ow]) {
                        *d += s;
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
    fn transposed_variants_agree() {
        // a: 2×3, b: 3×2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c1 = [0.0; 4];
        let mut c2 = [0.0; 4];
        let mut c3 = [0.0; 4];
        matmul_acc(&mut c1, &a, &b, 2, 3, 2);
        matmul_nt_acc(&mut c2, &a, &bt, 2, 3, 2);
        matmul_tn_acc(&mut c3, &at, &b, 2, 3, 2);
        assert_eq!(c1, [58.0, 64.0, 139.0, 154.0]);
        assert_eq!(c1, c2);
        assert_eq!(c1, c3);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = ConvGeom {
            channels: 2,
            height: 4,
            width: 5,
            kernel: 3,
        };
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.col_cols())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, g, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im_acc(&y, g, &mut back);
        let lhs = dot(&cols, &y);
        let rhs = dot(&x, &back);
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
