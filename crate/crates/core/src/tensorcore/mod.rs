//! Dense `f64` tensors, a reverse-mode tape and the Adam optimizer.

mod adam;
mod ops;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use ops::{affine, gaussian_kl_diag, log_softmax, relu, reparam_sample, softmax, softmax_rows};
pub use tape::{Gradients, Graph, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("loss does not depend on parameters at positions {0:?}")]
    DisconnectedParameter(Vec<usize>),
}

#[cfg(test)]
mod gradient_tests {
    use super::*;
    use crate::rng::indexed_stream;
    use rand::Rng;

    type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>;

    /// Central finite differences of the scalar built by `build`.
    fn numeric_grad(inputs: &[Tensor], build: &Build, h: f64) -> Vec<Tensor> {
        let eval = |vals: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
            let out = build(&mut g, &vars).unwrap();
            g.scalar(out)
        };
        let mut grads = Vec::new();
        for i in 0..inputs.len() {
            let mut gi = Tensor::zeros(inputs[i].shape());
            for j in 0..inputs[i].len() {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[j] += h;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[j] -= h;
                gi.data_mut()[j] = (eval(&plus) - eval(&minus)) / (2.0 * h);
            }
            grads.push(gi);
        }
        grads
    }

    fn analytic_grad(inputs: &[Tensor], build: &Build) -> Vec<Tensor> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars).unwrap();
        g.backward(out, &vars).unwrap().into_vec()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    fn check(name: &str, trials: u64, shapes: &[&[usize]], lo: f64, hi: f64, build: &Build) {
        for trial in 0..trials {
            let mut rng = indexed_stream(11, name, trial);
            let inputs: Vec<Tensor> = shapes.iter().map(|s| random_tensor(&mut rng, s, lo, hi)).collect();
            let a = analytic_grad(&inputs, build);
            let n = numeric_grad(&inputs, build, 1e-5);
            for (ga, gn) in a.iter().zip(&n) {
                for (x, y) in ga.data().iter().zip(gn.data()) {
                    assert!(rel_err(*x, *y) < 1e-4, "{name} trial {trial}: analytic {x} vs numeric {y}");
                }
            }
        }
    }

    // Fixed random weights so that non-scalar ops reduce to a generic scalar.
    fn weighted_sum(g: &mut Graph, x: Var, salt: u64) -> Result<Var, TensorError> {
        let shape = g.value(x).shape().to_vec();
        let mut rng = indexed_stream(99, "weights", salt);
        let w = g.constant(random_tensor(&mut rng, &shape, -1.0, 1.0));
        let p = g.mul(x, w)?;
        g.sum(p)
    }

    #[test]
    fn matmul_gradient() {
        check("matmul", 100, &[&[3, 4], &[4, 2]], -1.0, 1.0, &|g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y, 1)
        });
    }

    #[test]
    fn transpose_gradient() {
        check("transpose", 100, &[&[3, 2]], -1.0, 1.0, &|g, v| {
            let y = g.transpose(v[0])?;
            weighted_sum(g, y, 2)
        });
    }

    #[test]
    fn elementwise_gradients() {
        check("add_sub_mul", 100, &[&[2, 3], &[2, 3]], -2.0, 2.0, &|g, v| {
            let a = g.add(v[0], v[1])?;
            let b = g.sub(a, v[1])?;
            let c = g.mul(b, v[1])?;
            let d = g.square(c)?;
            let e = g.scale(d, 0.3)?;
            let f = g.add_scalar(e, 2.0)?;
            weighted_sum(g, f, 3)
        });
        check("exp_log", 100, &[&[5]], 0.1, 3.0, &|g, v| {
            let a = g.log(v[0])?;
            let b = g.exp(a)?;
            let c = g.exp(v[0])?;
            let d = g.mul(b, c)?;
            weighted_sum(g, d, 4)
        });
        check("mean", 100, &[&[2, 2]], -1.0, 1.0, &|g, v| {
            let s = g.square(v[0])?;
            g.mean(s)
        });
    }

    #[test]
    fn relu_gradient_away_from_kink() {
        check("relu", 100, &[&[6]], 0.05, 1.0, &|g, v| {
            let y = g.relu(v[0])?;
            weighted_sum(g, y, 5)
        });
        check("relu_neg", 100, &[&[6]], -1.0, -0.05, &|g, v| {
            let y = g.relu(v[0])?;
            let s = g.sum(v[0])?;
            let t = g.sum(y)?;
            g.add(s, t)
        });
    }

    #[test]
    fn affine_and_softmax_gradients() {
        check("affine", 100, &[&[2, 3], &[3, 4], &[4]], -1.0, 1.0, &|g, v| {
            let y = g.affine(v[0], v[1], v[2])?;
            weighted_sum(g, y, 6)
        });
        check("softmax_rows", 100, &[&[3, 4]], -3.0, 3.0, &|g, v| {
            let y = g.softmax_rows(v[0])?;
            weighted_sum(g, y, 7)
        });
        check("log_softmax_rows", 100, &[&[3, 4]], -3.0, 3.0, &|g, v| {
            let y = g.log_softmax_rows(v[0])?;
            weighted_sum(g, y, 8)
        });
    }

    #[test]
    fn kl_and_reparam_gradients() {
        check("kl", 100, &[&[2, 3], &[2, 3]], -2.0, 2.0, &|g, v| g.gaussian_kl_diag(v[0], v[1]));
        check("reparam", 100, &[&[4], &[4]], -2.0, 2.0, &|g, v| {
            let mut rng = indexed_stream(5, "eps", 0);
            let eps = g.constant(random_tensor(&mut rng, &[4], -2.0, 2.0));
            let z = g.reparam_sample(v[0], v[1], eps)?;
            weighted_sum(g, z, 9)
        });
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2, 3]));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s, &[x]).unwrap();
        assert_eq!(grads.get(0), &Tensor::full(&[2, 3], 1.0));

        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.param(Tensor::scalar(2.0));
        let p = g.mul(x, y).unwrap();
        let grads = g.backward(p, &[x, y]).unwrap();
        assert_eq!(grads.get(0).data(), &[2.0]);
        assert_eq!(grads.get(1).data(), &[3.0]);

        let mut g = Graph::new();
        let x = g.param(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let ls = g.log_softmax_rows(x).unwrap();
        let pick = g.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let m = g.mul(ls, pick).unwrap();
        let loss = g.sum(m).unwrap();
        let grads = g.backward(loss, &[x]).unwrap();
        assert!((grads.get(0).data()[0] - 0.5).abs() < 1e-15);
        assert!((grads.get(0).data()[1] + 0.5).abs() < 1e-15);

        // same quantity through log(softmax)
        let mut g = Graph::new();
        let x = g.param(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let s = g.softmax_rows(x).unwrap();
        let l = g.log(s).unwrap();
        let pick = pick_const(&mut g);
        let m = g.mul(l, pick).unwrap();
        let loss = g.sum(m).unwrap();
        let grads = g.backward(loss, &[x]).unwrap();
        assert!((grads.get(0).data()[0] - 0.5).abs() < 1e-15);
        assert!((grads.get(0).data()[1] + 0.5).abs() < 1e-15);
    }

    fn pick_const(g: &mut Graph) -> Var {
        g.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap())
    }

    #[test]
    fn disconnected_parameter_is_flagged_with_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let unused = g.param(Tensor::vector(vec![3.0]));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s, &[x, unused]).unwrap();
        assert_eq!(grads.disconnected(), &[1]);
        assert_eq!(grads.get(1).data(), &[0.0]);
        assert_eq!(
            grads.ensure_connected(),
            Err(TensorError::DisconnectedParameter(vec![1]))
        );
    }

    #[test]
    fn backward_is_linear() {
        for trial in 0..20 {
            let mut rng = indexed_stream(3, "linear", trial);
            let xt = random_tensor(&mut rng, &[2, 3], -1.0, 1.0);
            let wt = random_tensor(&mut rng, &[3, 3], -1.0, 1.0);
            let a: f64 = rng.random_range(-2.0..2.0);
            let b: f64 = rng.random_range(-2.0..2.0);

            let build = |g: &mut Graph, x: Var, w: Var| -> (Var, Var) {
                let h = g.matmul(x, w).unwrap();
                let s = g.softmax_rows(h).unwrap();
                let l1 = weighted_sum(g, s, 10).unwrap();
                let e = g.exp(x).unwrap();
                let l2 = g.sum(e).unwrap();
                (l1, l2)
            };

            let mut g = Graph::new();
            let x = g.param(xt.clone());
            let w = g.param(wt.clone());
            let (l1, l2) = build(&mut g, x, w);
            let g1 = g.backward(l1, &[x, w]).unwrap();
            let g2 = g.backward(l2, &[x, w]).unwrap();
            let s1 = g.scale(l1, a).unwrap();
            let s2 = g.scale(l2, b).unwrap();
            let combo = g.add(s1, s2).unwrap();
            let gc = g.backward(combo, &[x, w]).unwrap();
            for i in 0..2 {
                let d2 = if i == 1 { Tensor::zeros(&[3, 3]) } else { g2.get(i).clone() };
                for ((c, p), q) in gc.get(i).data().iter().zip(g1.get(i).data()).zip(d2.data()) {
                    assert!((c - (a * p + b * q)).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1000.0]));
        assert_eq!(g.exp(x), Err(TensorError::NonFinite { op: "exp" }));
        let z = g.param(Tensor::vector(vec![0.0]));
        assert!(matches!(g.log(z), Err(TensorError::NonFinite { .. })));
    }
}
