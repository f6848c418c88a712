//! Separable interpolation matrices (half-pixel centers, antialiased when
//! shrinking) and helpers that apply them to channels-last grids.

use std::rc::Rc;

use crate::autograd::resample_axis;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kernel {
    Linear,
    /// Keys cubic convolution with `a = -0.5`.
    Cubic,
}

impl Kernel {
    fn support(self) -> f64 {
        match self {
            Kernel::Linear => 1.0,
            Kernel::Cubic => 2.0,
        }
    }

    fn weight(self, x: f64) -> f64 {
        let x = x.abs();
        match self {
            Kernel::Linear => (1.0 - x).max(0.0),
            Kernel::Cubic => {
                const A: f64 = -0.5;
                if x < 1.0 {
                    ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
                } else if x < 2.0 {
                    (((x - 5.0) * x + 8.0) * x - 4.0) * A
                } else {
                    0.0
                }
            }
        }
    }
}

/// `[n_out, n_in]` row-normalized resampling matrix.
pub fn resample_matrix(n_in: usize, n_out: usize, kernel: Kernel) -> Tensor {
    assert!(n_in > 0 && n_out > 0);
    let scale = n_in as f64 / n_out as f64;
    let filter_scale = scale.max(1.0);
    let support = kernel.support() * filter_scale;
    let mut m = vec![0.0; n_out * n_in];
    for o in 0..n_out {
        let center = (o as f64 + 0.5) * scale;
        let lo = ((center - support).floor() as isize).max(0) as usize;
        let hi = ((center + support).ceil() as usize).min(n_in);
        let row = &mut m[o * n_in..(o + 1) * n_in];
        let mut total = 0.0;
        for (i, r) in row.iter_mut().enumerate().take(hi).skip(lo) {
            let w = kernel.weight((i as f64 + 0.5 - center) / filter_scale);
            *r = w;
            total += w;
        }
        for r in row.iter_mut() {
            *r /= total;
        }
    }
    Tensor::new([n_out, n_in], m)
}

/// Cached matrix handle for use inside a graph.
pub fn shared_matrix(n_in: usize, n_out: usize, kernel: Kernel) -> Rc<Tensor> {
    Rc::new(resample_matrix(n_in, n_out, kernel))
}

/// Resizes the three leading axes of a `[n, h, w, c]` grid.
pub fn resize_grid(x: &Tensor, dims: [usize; 3], kernel: Kernel) -> Tensor {
    let mut out = x.clone();
    for (axis, &target) in dims.iter().enumerate() {
        let src = out.shape()[axis];
        if src != target {
            let m = resample_matrix(src, target, kernel);
            out = resample_axis(&out, axis, &m, false);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_is_identity() {
        for k in [Kernel::Linear, Kernel::Cubic] {
            let m = resample_matrix(5, 5, k);
            for i in 0..5 {
                for j in 0..5 {
                    assert_eq!(m.data()[i * 5 + j], if i == j { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn rows_sum_to_one() {
        for (a, b) in [(4, 8), (8, 4), (6, 9), (16, 5)] {
            for k in [Kernel::Linear, Kernel::Cubic] {
                let m = resample_matrix(a, b, k);
                for row in m.data().chunks(a) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn linear_upsample_of_a_ramp_stays_linear_inside() {
        let m = resample_matrix(4, 8, Kernel::Linear);
        let x: Vec<f64> = (0..4).map(|v| v as f64).collect();
        let y: Vec<f64> = m
            .data()
            .chunks(4)
            .map(|r| r.iter().zip(&x).map(|(a, b)| a * b).sum())
            .collect();
        // interior outputs sit at source coordinates (o + 0.5) / 2 - 0.5
        for (o, v) in y.iter().enumerate().take(7).skip(1) {
            let want = (o as f64 + 0.5) / 2.0 - 0.5;
            assert!((v - want).abs() < 1e-12, "{o}: {v} vs {want}");
        }
    }
}
