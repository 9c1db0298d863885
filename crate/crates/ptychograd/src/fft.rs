//! Unitary 2-D DFT helpers on square complex arrays, rows-then-columns over
//! rustfft's 1-D kernels. Unitary normalization keeps Parseval checks and the
//! adjoint symmetric.

use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

#[derive(Clone)]
pub struct Fft2 {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    pub fn new(n: usize) -> Fft2 {
        let mut planner = FftPlanner::new();
        Fft2 {
            n,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    fn pass(&self, a: &mut Array2<Complex64>, fft: &Arc<dyn Fft<f64>>) {
        debug_assert_eq!(a.dim(), (self.n, self.n));
        for mut row in a.rows_mut() {
            fft.process(row.as_slice_mut().expect("contiguous row"));
        }
        let mut col = vec![Complex64::default(); self.n];
        for x in 0..self.n {
            for y in 0..self.n {
                col[y] = a[[y, x]];
            }
            fft.process(&mut col);
            for y in 0..self.n {
                a[[y, x]] = col[y];
            }
        }
        let scale = 1.0 / self.n as f64;
        a.mapv_inplace(|v| v * scale);
    }

    /// In-place unitary forward transform.
    pub fn forward(&self, a: &mut Array2<Complex64>) {
        self.pass(a, &self.fwd);
    }

    /// In-place unitary inverse transform.
    pub fn inverse(&self, a: &mut Array2<Complex64>) {
        self.pass(a, &self.inv);
    }
}

/// Squared normalized spatial frequency (cycles/voxel)^2 on the standard DFT
/// grid: entry (j,k) holds f_j^2 + f_k^2 with f_j = j/n for j < n/2 wrapped to
/// (j-n)/n above.
pub fn freq_sq_grid(n: usize) -> Array2<f64> {
    let f = |j: usize| -> f64 {
        let j = j as i64;
        let n = n as i64;
        let w = if 2 * j < n { j } else { j - n };
        w as f64 / n as f64
    };
    Array2::from_shape_fn((n, n), |(j, k)| f(j) * f(j) + f(k) * f(k))
}

/// Swap quadrants so the DC sample moves from (0,0) to (n/2, n/2).
pub fn fftshift(a: &Array2<Complex64>) -> Array2<Complex64> {
    let n = a.dim().0;
    let h = n / 2;
    Array2::from_shape_fn((n, n), |(y, x)| a[[(y + n - h) % n, (x + n - h) % n]])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn total_power(a: &Array2<Complex64>) -> f64 {
        a.iter().map(|v| v.norm_sqr()).sum()
    }

    #[test]
    fn forward_inverse_roundtrip_and_parseval() {
        let n = 16;
        let fft = Fft2::new(n);
        let mut a = Array2::from_shape_fn((n, n), |(y, x)| {
            Complex64::new((y as f64 * 0.37).sin(), (x as f64 * 0.11).cos())
        });
        let orig = a.clone();
        let p0 = total_power(&a);
        fft.forward(&mut a);
        assert!((total_power(&a) - p0).abs() / p0 < 1e-12);
        fft.inverse(&mut a);
        let err: f64 = a
            .iter()
            .zip(orig.iter())
            .map(|(u, v)| (u - v).norm())
            .fold(0.0, f64::max);
        assert!(err < 1e-12);
    }

    #[test]
    fn delta_transforms_to_flat() {
        let n = 8;
        let fft = Fft2::new(n);
        let mut a = Array2::zeros((n, n));
        a[[0, 0]] = Complex64::new(1.0, 0.0);
        fft.forward(&mut a);
        for v in a.iter() {
            assert!((v.re - 1.0 / n as f64).abs() < 1e-14);
            assert!(v.im.abs() < 1e-14);
        }
    }

    #[test]
    fn freq_grid_wraps() {
        let g = freq_sq_grid(8);
        assert_eq!(g[[0, 0]], 0.0);
        assert!((g[[4, 0]] - 0.25).abs() < 1e-15); // Nyquist row: (-1/2)^2
        assert!((g[[7, 0]] - (1.0 / 64.0)).abs() < 1e-15);
    }
}
