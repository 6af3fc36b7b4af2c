//! Dense tensors, a reverse-mode autodiff tape, and the Adam optimizer.

mod graph;
mod kernels;
mod optim;
mod tensor;

pub use graph::{softmax_along, Graph, Var};
pub use optim::{clip_grad_norm, Adam, AdamConfig};
pub use tensor::{argmax, Real, Tensor};

use crate::error::{Error, Result};

/// Matrix product of two rank-2 tensors.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    };
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = vec![T::zero(); m * n];
    kernels::gemm(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if !x.all_finite() {
        return Err(Error::NonFinite("softmax"));
    }
    softmax_along(x, axis, false)
}

pub fn log_softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if !x.all_finite() {
        return Err(Error::NonFinite("log_softmax"));
    }
    softmax_along(x, axis, true)
}

/// Log-softmax of a single row, in f64.
pub fn log_softmax_row<T: Real>(row: &[T]) -> Vec<f64> {
    let mx = row
        .iter()
        .map(|x| x.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = row
        .iter()
        .map(|x| (x.as_f64() - mx).exp())
        .sum::<f64>()
        .ln()
        + mx;
    row.iter().map(|x| x.as_f64() - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_hand_cases() {
        let eye = Tensor::<f64>::from_f64(vec![2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::<f64>::from_f64(vec![2, 2], &[3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(matmul(&eye, &b).unwrap(), b);
        let row = Tensor::<f64>::from_f64(vec![1, 2], &[1.0, 2.0]).unwrap();
        let col = Tensor::<f64>::from_f64(vec![2, 1], &[3.0, 4.0]).unwrap();
        assert_eq!(matmul(&row, &col).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f32>::zeros(vec![2, 3]);
        let b = Tensor::<f32>::zeros(vec![2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_cases() {
        let x = Tensor::<f64>::from_f64(vec![3], &[0.0, 0.0, 0.0]).unwrap();
        for &p in softmax(&x, 0).unwrap().data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        let x = Tensor::<f32>::from_f64(vec![2], &[1000.0, 0.0]).unwrap();
        let p = softmax(&x, 0).unwrap();
        assert!(p.all_finite());
        assert!((p.data()[0] - 1.0).abs() < 1e-6 && p.data()[1] < 1e-30);
        let x = Tensor::<f64>::from_f64(vec![2], &[f64::NAN, 0.0]).unwrap();
        assert!(matches!(softmax(&x, 0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn log_softmax_cases() {
        let x = Tensor::<f64>::from_f64(vec![2], &[0.0, 0.0]).unwrap();
        for &p in log_softmax(&x, 0).unwrap().data() {
            assert!((p + std::f64::consts::LN_2).abs() < 1e-12);
        }
        let x = Tensor::<f64>::from_f64(vec![2], &[50.0, -50.0]).unwrap();
        let l = log_softmax(&x, 0).unwrap();
        assert!(l.data()[0].abs() < 1e-30 + 1e-40);
        assert!((l.data()[1] + 100.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_along_leading_axis() {
        let x = Tensor::<f64>::from_f64(vec![2, 3], &[1.0, 2.0, 3.0, 1.0, 0.0, -1.0]).unwrap();
        let p = softmax(&x, 0).unwrap();
        for j in 0..3 {
            let s = p.get(&[0, j]) + p.get(&[1, j]);
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!((p.get(&[0, 0]) - 0.5).abs() < 1e-12);
    }
}
