//! Value-level numerical kernels shared by the tape and by inference code.

use super::{Tensor, TensorError};

fn check_finite(op: &'static str, xs: &[f64]) -> Result<(), TensorError> {
    if xs.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn check_len(op: &'static str, a: &[f64], b: &[f64]) -> Result<(), TensorError> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            left: vec![a.len()],
            right: vec![b.len()],
        })
    }
}

/// Max-shifted softmax written into `out`.
pub(crate) fn softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub(crate) fn log_softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

pub fn softmax(x: &[f64]) -> Result<Vec<f64>, TensorError> {
    check_finite("softmax", x)?;
    let mut out = vec![0.0; x.len()];
    softmax_into(x, &mut out);
    Ok(out)
}

pub fn log_softmax(x: &[f64]) -> Result<Vec<f64>, TensorError> {
    check_finite("log_softmax", x)?;
    let mut out = vec![0.0; x.len()];
    log_softmax_into(x, &mut out);
    Ok(out)
}

/// Row-wise softmax of a matrix.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor, TensorError> {
    check_finite("softmax_rows", x.data())?;
    let mut out = Tensor::zeros(x.shape());
    let c = x.cols();
    if c > 0 {
        for (src, dst) in x.data().chunks(c).zip(out.data_mut().chunks_mut(c)) {
            softmax_into(src, dst);
        }
    }
    Ok(out)
}

/// `KL(N(mu, diag(exp(log_var))) || N(0, I))`.
pub fn gaussian_kl_diag(mu: &[f64], log_var: &[f64]) -> Result<f64, TensorError> {
    check_len("gaussian_kl_diag", mu, log_var)?;
    let kl = 0.5
        * mu
            .iter()
            .zip(log_var)
            .map(|(&m, &lv)| lv.exp() + m * m - 1.0 - lv)
            .sum::<f64>();
    if kl.is_finite() {
        Ok(kl)
    } else {
        Err(TensorError::NonFinite {
            op: "gaussian_kl_diag",
        })
    }
}

/// `mu + exp(log_var / 2) * eps`.
pub fn reparam_sample(mu: &[f64], log_var: &[f64], eps: &[f64]) -> Result<Vec<f64>, TensorError> {
    check_len("reparam_sample", mu, log_var)?;
    check_len("reparam_sample", mu, eps)?;
    let out: Vec<f64> = mu
        .iter()
        .zip(log_var)
        .zip(eps)
        .map(|((&m, &lv), &e)| m + (0.5 * lv).exp() * e)
        .collect();
    check_finite("reparam_sample", &out)?;
    Ok(out)
}

/// `x W + b` for a row vector (or batch of rows) `x`.
pub fn affine(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor, TensorError> {
    let mut out = x.matmul(weight)?;
    if bias.len() != out.cols() {
        return Err(TensorError::ShapeMismatch {
            op: "affine",
            left: out.shape().to_vec(),
            right: bias.shape().to_vec(),
        });
    }
    let c = out.cols();
    if c > 0 {
        for row in out.data_mut().chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(bias.data()) {
                *o += b;
            }
        }
    }
    if x.shape().len() == 1 {
        out = out.reshape_like(&[c]);
    }
    check_finite("affine", out.data())?;
    Ok(out)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        let s = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for v in s {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(softmax(&[1000.0, 1000.0]).unwrap(), vec![0.5, 0.5]);
        let s = softmax(&[1.0, 0.0]).unwrap();
        let e = std::f64::consts::E;
        assert!((s[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((s[0] - 0.73106).abs() < 1e-5);
        assert!((s[1] - 0.26894).abs() < 1e-5);
        assert!(matches!(
            softmax(&[f64::NAN, 0.0]),
            Err(TensorError::NonFinite { .. })
        ));
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(gaussian_kl_diag(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert!((gaussian_kl_diag(&[1.0], &[0.0]).unwrap() - 0.5).abs() < 1e-15);
        let expected = (std::f64::consts::E - 2.0) / 2.0;
        assert!((gaussian_kl_diag(&[0.0], &[1.0]).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.35914).abs() < 1e-5);
        assert!(gaussian_kl_diag(&[0.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn reparam_examples() {
        assert_eq!(
            reparam_sample(&[0.3, -1.0], &[2.0, 0.1], &[0.0, 0.0]).unwrap(),
            vec![0.3, -1.0]
        );
        assert_eq!(
            reparam_sample(&[0.0, 0.0], &[0.0, 0.0], &[0.7, -1.2]).unwrap(),
            vec![0.7, -1.2]
        );
        let z = reparam_sample(&[1.0], &[4f64.ln()], &[0.5]).unwrap();
        assert!((z[0] - 2.0).abs() < 1e-15);
        assert!(matches!(
            reparam_sample(&[1.0], &[0.0, 0.0], &[0.0]),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn affine_and_relu() {
        let x = Tensor::vector(vec![0.5, -2.0, 3.0]);
        let y = affine(&x, &Tensor::identity(3), &Tensor::zeros(&[3])).unwrap();
        assert_eq!(y, x);
        assert_eq!(relu(&Tensor::vector(vec![-1.0, 2.0])).data(), &[0.0, 2.0]);
        assert!(affine(&x, &Tensor::identity(2), &Tensor::zeros(&[2])).is_err());
    }

    proptest! {
        #[test]
        fn softmax_normalized_and_shift_invariant(
            xs in proptest::collection::vec(-50.0f64..50.0, 1..20),
            shift in -100.0f64..100.0,
        ) {
            let s = softmax(&xs).unwrap();
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(s.iter().all(|&v| v > 0.0));
            let shifted: Vec<f64> = xs.iter().map(|v| v + shift).collect();
            let t = softmax(&shifted).unwrap();
            for (a, b) in s.iter().zip(&t) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn kl_nonnegative(
            pairs in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..10),
        ) {
            let mu: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let lv: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let kl = gaussian_kl_diag(&mu, &lv).unwrap();
            prop_assert!(kl >= 0.0);
            if mu.iter().chain(&lv).any(|&v| v.abs() > 1e-3) {
                prop_assert!(kl > 0.0);
            }
        }
    }
}
