//! Finite-difference gradient checking.
//!
//! A `Program` builds the same computation on any scalar type; production
//! runs it on `Graph<f32>` while the checker runs both the analytic
//! backward pass and central finite differences entirely in f64. The two
//! routes are independent: one exercises the backward rules, the other only
//! ever calls forward.

use super::graph::{Graph, NodeId};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// A computation expressible on any scalar type. Must return a scalar node.
pub trait Program {
    fn build<S: Scalar>(&self, g: &mut Graph<S>, inputs: &[NodeId]) -> Result<NodeId>;
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over all checked coordinates of |analytic - fd| / max(1, |analytic|, |fd|)
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// (input index, element index, analytic, finite difference) at the max
    pub worst: Option<(usize, usize, f64, f64)>,
    pub passed: bool,
}

fn eval_loss<P: Program>(prog: &P, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let mut ids = Vec::with_capacity(inputs.len());
    for t in inputs {
        ids.push(g.leaf(t.clone(), true)?);
    }
    let loss = prog.build(&mut g, &ids)?;
    if !g.value(loss).is_scalar() {
        return Err(Error::shape("grad_check program must return a scalar"));
    }
    Ok(g.value(loss).data()[0])
}

fn run(
    prog: &impl Program,
    inputs: &[Tensor<f64>],
    eps: f64,
    tol: f64,
    fault: Option<(&'static str, f64)>,
) -> Result<GradCheckReport> {
    let mut g = Graph::<f64>::new();
    let mut ids = Vec::with_capacity(inputs.len());
    for t in inputs {
        ids.push(g.leaf(t.clone(), true)?);
    }
    if let Some((name, factor)) = fault {
        g.inject_grad_fault(name, factor);
    }
    let loss = prog.build(&mut g, &ids)?;
    if !g.value(loss).is_scalar() {
        return Err(Error::shape("grad_check program must return a scalar"));
    }
    let grads = g.backward(loss, &ids)?;
    let analytic: Vec<Vec<f64>> = grads.iter().map(|&id| g.value(id).data().to_vec()).collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        coords_checked: 0,
        worst: None,
        passed: true,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let orig = t.data()[j];
            work[i].data_mut()[j] = orig + eps;
            let fp = eval_loss(prog, &work)?;
            work[i].data_mut()[j] = orig - eps;
            let fm = eval_loss(prog, &work)?;
            work[i].data_mut()[j] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            let ana = analytic[i][j];
            let rel = (ana - fd).abs() / ana.abs().max(fd.abs()).max(1.0);
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((i, j, ana, fd));
            }
        }
    }
    report.passed = report.max_rel_err < tol;
    Ok(report)
}

/// Check analytic gradients of `prog` against central differences. Both
/// routes run in f64; use inputs away from activation kinks.
pub fn grad_check(
    prog: &impl Program,
    inputs: &[Tensor<f64>],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    run(prog, inputs, eps, tol, None)
}

/// Negative control: run the checker with one backward rule deliberately
/// corrupted. A healthy checker must report failure.
pub fn grad_check_with_fault(
    prog: &impl Program,
    inputs: &[Tensor<f64>],
    eps: f64,
    tol: f64,
    fault: (&'static str, f64),
) -> Result<GradCheckReport> {
    run(prog, inputs, eps, tol, Some(fault))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Values that avoid relu/abs kinks: deterministic, varied, bounded.
    fn probe_values(n: usize, scale: f64, offset: f64) -> Tensor<f64> {
        Tensor::from_fn(&[n], |i| {
            let v = ((i * 2654435761 + 12345) % 1000) as f64 / 1000.0 - 0.5;
            let v = if v.abs() < 0.05 { v + 0.1 } else { v };
            v * scale + offset
        })
    }

    struct MlpProbe;
    impl Program for MlpProbe {
        fn build<S: Scalar>(&self, g: &mut Graph<S>, inputs: &[NodeId]) -> crate::Result<NodeId> {
            // x[2,3] w[3,2] b[2]: mean(tanh(x*w + b)^2) + sigmoid path
            let x = g.reshape(inputs[0], &[2, 3])?;
            let w = g.reshape(inputs[1], &[3, 2])?;
            let b = inputs[2];
            let xw = g.matmul(x, w)?;
            let bb = g.bcast_axis0(b, 2)?;
            let pre = g.add(xw, bb)?;
            let h = g.tanh_(pre)?;
            let h2 = g.square(h)?;
            let s = g.sigmoid(pre)?;
            let mix = g.mul(h2, s)?;
            g.mean_all(mix)
        }
    }

    #[test]
    fn mlp_gradients_match_fd() {
        let inputs = vec![probe_values(6, 1.0, 0.0), probe_values(6, 0.8, 0.1), probe_values(2, 0.5, -0.2)];
        let rep = grad_check(&MlpProbe, &inputs, 1e-5, 1e-7).unwrap();
        assert!(rep.passed, "max rel err {}", rep.max_rel_err);
    }

    struct ConvProbe;
    impl Program for ConvProbe {
        fn build<S: Scalar>(&self, g: &mut Graph<S>, inputs: &[NodeId]) -> crate::Result<NodeId> {
            let x = g.reshape(inputs[0], &[1, 2, 6, 6])?;
            let w = g.reshape(inputs[1], &[3, 2, 3, 3])?;
            let b = inputs[2];
            let y = g.conv2d(x, w, 1)?;
            let yb = g.bcast_channels(b, &[1, 3, 6, 6])?;
            let y = g.add(y, yb)?;
            let a = g.leaky_relu(y, 0.2)?;
            let p = g.maxpool2d(a, 2)?;
            let q = g.avgpool2d(p, 3)?;
            let u = g.upsample_nearest2d(q, 2)?;
            let s = g.square(u)?;
            g.mean_all(s)
        }
    }

    #[test]
    fn conv_pipeline_gradients_match_fd() {
        let inputs = vec![
            probe_values(72, 1.0, 0.0),
            probe_values(54, 0.6, 0.0),
            probe_values(3, 0.3, 0.05),
        ];
        let rep = grad_check(&ConvProbe, &inputs, 1e-5, 1e-6).unwrap();
        assert!(rep.passed, "max rel err {}", rep.max_rel_err);
    }

    struct Conv3dProbe;
    impl Program for Conv3dProbe {
        fn build<S: Scalar>(&self, g: &mut Graph<S>, inputs: &[NodeId]) -> crate::Result<NodeId> {
            let x = g.reshape(inputs[0], &[1, 1, 4, 5, 5])?;
            let w = g.reshape(inputs[1], &[2, 1, 3, 3, 3])?;
            let y = g.conv3d(x, w, 2)?;
            let a = g.tanh_(y)?;
            let s = g.square(a)?;
            g.mean_all(s)
        }
    }

    #[test]
    fn strided_conv3d_gradients_match_fd() {
        let inputs = vec![probe_values(100, 0.9, 0.0), probe_values(54, 0.7, 0.0)];
        let rep = grad_check(&Conv3dProbe, &inputs, 1e-5, 1e-6).unwrap();
        assert!(rep.passed, "max rel err {}", rep.max_rel_err);
    }

    /// Loss built on top of a gradient: validates that backward-of-backward
    /// (conv triad, activation masks) is exact.
    struct DoubleBackpropProbe;
    impl Program for DoubleBackpropProbe {
        fn build<S: Scalar>(&self, g: &mut Graph<S>, inputs: &[NodeId]) -> crate::Result<NodeId> {
            let x = g.reshape(inputs[0], &[1, 1, 5, 5])?;
            let w = g.reshape(inputs[1], &[2, 1, 3, 3])?;
            let y = g.conv2d(x, w, 1)?;
            let a = g.leaky_relu(y, 0.1)?;
            let s = g.square(a)?;
            let l1 = g.sum_all(s)?;
            let gx = g.backward(l1, &[x])?[0];
            // || dL1/dx ||^2: the gradient-penalty shape.
            let gsq = g.square(gx)?;
            g.sum_all(gsq)
        }
    }

    #[test]
    fn double_backprop_gradients_match_fd() {
        let inputs = vec![probe_values(25, 1.1, 0.0), probe_values(18, 0.8, 0.0)];
        let rep = grad_check(&DoubleBackpropProbe, &inputs, 1e-5, 1e-6).unwrap();
        assert!(rep.passed, "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn corrupted_rule_is_caught() {
        let inputs = vec![probe_values(6, 1.0, 0.0), probe_values(6, 0.8, 0.1), probe_values(2, 0.5, -0.2)];
        let rep =
            grad_check_with_fault(&MlpProbe, &inputs, 1e-5, 1e-7, ("matmul", 1.25)).unwrap();
        assert!(!rep.passed, "fault injection must break the check");
        assert!(rep.max_rel_err > 1e-3);
    }
}
