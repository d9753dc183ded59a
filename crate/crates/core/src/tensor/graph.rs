//! Append-only computation graph with reverse-mode differentiation.
//!
//! `backward` appends gradient-computing nodes to the same graph instead of
//! filling buffers, so any gradient can itself be differentiated. Every op's
//! backward rule is written in terms of ops that also have backward rules;
//! the set is closed under differentiation (convolutions form a closed triad
//! with their input- and weight-gradient ops).

use std::rc::Rc;

use super::kernels as kn;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Copy, Clone, PartialEq, Eq, Hash, Debug)]
pub struct NodeId(pub(crate) u32);

impl NodeId {
    #[inline]
    fn ix(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Neg(NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Abs(NodeId),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        stride: usize,
    },
    Conv2dInputGrad {
        g: NodeId,
        w: NodeId,
        stride: usize,
    },
    Conv2dWeightGrad {
        x: NodeId,
        g: NodeId,
        stride: usize,
    },
    Conv3d {
        x: NodeId,
        w: NodeId,
        stride: usize,
    },
    Conv3dInputGrad {
        g: NodeId,
        w: NodeId,
        stride: usize,
    },
    Conv3dWeightGrad {
        x: NodeId,
        g: NodeId,
        stride: usize,
    },
    MaxPool2d {
        x: NodeId,
        argmax: Rc<Vec<u32>>,
    },
    MaxUnpool2d {
        g: NodeId,
        src: NodeId,
    },
    MaxGather2d {
        x: NodeId,
        src: NodeId,
    },
    AvgPool2d {
        x: NodeId,
        k: usize,
    },
    UpsampleNearest2d {
        x: NodeId,
        f: usize,
    },
    Concat(Vec<NodeId>),
    SliceChannels {
        x: NodeId,
        from: usize,
        to: usize,
    },
    Reshape(NodeId),
    SumAll(NodeId),
    SumTrailing(NodeId),
    SumAxis0(NodeId),
    SumChannels(NodeId),
    SumSpatial(NodeId),
    BcastScalar(NodeId),
    BcastTrailing(NodeId),
    BcastAxis0(NodeId),
    BcastChannels(NodeId),
    BcastSpatial(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Neg(..) => "neg",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::Abs(..) => "abs",
            Op::Matmul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Conv2d { .. } => "conv2d",
            Op::Conv2dInputGrad { .. } => "conv2d_input_grad",
            Op::Conv2dWeightGrad { .. } => "conv2d_weight_grad",
            Op::Conv3d { .. } => "conv3d",
            Op::Conv3dInputGrad { .. } => "conv3d_input_grad",
            Op::Conv3dWeightGrad { .. } => "conv3d_weight_grad",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::MaxUnpool2d { .. } => "max_unpool2d",
            Op::MaxGather2d { .. } => "max_gather2d",
            Op::AvgPool2d { .. } => "avgpool2d",
            Op::UpsampleNearest2d { .. } => "upsample_nearest2d",
            Op::Concat(..) => "concat",
            Op::SliceChannels { .. } => "slice_channels",
            Op::Reshape(..) => "reshape",
            Op::SumAll(..) => "sum_all",
            Op::SumTrailing(..) => "sum_trailing",
            Op::SumAxis0(..) => "sum_axis0",
            Op::SumChannels(..) => "sum_channels",
            Op::SumSpatial(..) => "sum_spatial",
            Op::BcastScalar(..) => "bcast_scalar",
            Op::BcastTrailing(..) => "bcast_trailing",
            Op::BcastAxis0(..) => "bcast_axis0",
            Op::BcastChannels(..) => "bcast_channels",
            Op::BcastSpatial(..) => "bcast_spatial",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Matmul(a, b) => {
                vec![*a, *b]
            }
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::LeakyRelu(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::Abs(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::SumAll(a)
            | Op::SumTrailing(a)
            | Op::SumAxis0(a)
            | Op::SumChannels(a)
            | Op::SumSpatial(a)
            | Op::BcastScalar(a)
            | Op::BcastTrailing(a)
            | Op::BcastAxis0(a)
            | Op::BcastChannels(a)
            | Op::BcastSpatial(a) => vec![*a],
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::Conv2dInputGrad { g, w, .. } => vec![*g, *w],
            Op::Conv2dWeightGrad { x, g, .. } => vec![*x, *g],
            Op::Conv3d { x, w, .. } => vec![*x, *w],
            Op::Conv3dInputGrad { g, w, .. } => vec![*g, *w],
            Op::Conv3dWeightGrad { x, g, .. } => vec![*x, *g],
            Op::MaxPool2d { x, .. } => vec![*x],
            Op::MaxUnpool2d { g, .. } => vec![*g],
            Op::MaxGather2d { x, .. } => vec![*x],
            Op::AvgPool2d { x, .. } => vec![*x],
            Op::UpsampleNearest2d { x, .. } => vec![*x],
            Op::Concat(parts) => parts.clone(),
            Op::SliceChannels { x, .. } => vec![*x],
        }
    }
}

struct Node<S: Scalar> {
    op: Op,
    value: Tensor<S>,
    requires_grad: bool,
}

/// Reverse-mode autodiff graph. See module docs.
pub struct Graph<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    fault: Option<(&'static str, f64)>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.ix()].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.ix()].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.ix()].requires_grad
    }

    /// Test instrumentation: multiply every gradient emitted by ops named
    /// `op_name` by `factor`. Used as the gradient checker's negative
    /// control (a corrupted rule must make the checker fail).
    pub fn inject_grad_fault(&mut self, op_name: &'static str, factor: f64) {
        self.fault = Some((op_name, factor));
    }

    fn push(&mut self, op: Op, value: Tensor<S>, requires_grad: bool) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::non_finite(format!("output of op '{}'", op.name())));
        }
        // Tape order doubles as topological order.
        debug_assert!(op.inputs().iter().all(|i| i.ix() < self.nodes.len()));
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(id)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.ix()].requires_grad)
    }

    pub fn leaf(&mut self, t: Tensor<S>, requires_grad: bool) -> Result<NodeId> {
        self.push(Op::Leaf, t, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<S>) -> Result<NodeId> {
        self.push(Op::Leaf, t, false)
    }

    /// Value copy that blocks gradient flow.
    pub fn detach(&mut self, id: NodeId) -> Result<NodeId> {
        let v = self.value(id).clone();
        self.constant(v)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, ctx: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{}: shape mismatch {:?} vs {:?} (no implicit broadcasting)",
                ctx,
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip2(&mut self, a: NodeId, b: NodeId, op: Op, f: impl Fn(S, S) -> S) -> Result<NodeId> {
        self.same_shape(a, b, op.name())?;
        let (va, vb) = (&self.nodes[a.ix()].value, &self.nodes[b.ix()].value);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::from_vec(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(op, t, rg)
    }

    fn map1(&mut self, a: NodeId, op: Op, f: impl Fn(S) -> S) -> Result<NodeId> {
        let t = self.nodes[a.ix()].value.map(f);
        let rg = self.rg(&[a]);
        self.push(op, t, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip2(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip2(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip2(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip2(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.map1(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let cv = S::from_f64(c);
        self.map1(a, Op::Scale(a, c), move |x| x * cv)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let cv = S::from_f64(c);
        self.map1(a, Op::AddScalar(a), move |x| x + cv)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.map1(a, Op::Relu(a), |x| if x > S::ZERO { x } else { S::ZERO })
    }

    pub fn leaky_relu(&mut self, a: NodeId, alpha: f64) -> Result<NodeId> {
        let al = S::from_f64(alpha);
        self.map1(
            a,
            Op::LeakyRelu(a, alpha),
            move |x| if x > S::ZERO { x } else { x * al },
        )
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.map1(a, Op::Sigmoid(a), |x| {
            // Split by sign for numerical stability at large |x|.
            if x >= S::ZERO {
                S::ONE / (S::ONE + (-x).exp())
            } else {
                let e = x.exp();
                e / (S::ONE + e)
            }
        })
    }

    pub fn tanh_(&mut self, a: NodeId) -> Result<NodeId> {
        self.map1(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.map1(a, Op::Exp(a), |x| x.exp())
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.map1(a, Op::Log(a), |x| x.ln())
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.map1(a, Op::Square(a), |x| x * x)
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.map1(a, Op::Sqrt(a), |x| x.sqrt())
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.map1(a, Op::Abs(a), |x| x.abs())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!(
                "matmul wants [m,k]x[k,n], got {:?} x {:?}",
                sa, sb
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kn::matmul(
            self.nodes[a.ix()].value.data(),
            self.nodes[b.ix()].value.data(),
            m,
            k,
            n,
        );
        let t = Tensor::from_vec(vec![m, n], data)?;
        let rg = self.rg(&[a, b]);
        self.push(Op::Matmul(a, b), t, rg)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(Error::shape(format!("transpose wants rank 2, got {:?}", sa)));
        }
        let (r, c) = (sa[0], sa[1]);
        let data = kn::transpose2d(self.nodes[a.ix()].value.data(), r, c);
        let t = Tensor::from_vec(vec![c, r], data)?;
        let rg = self.rg(&[a]);
        self.push(Op::Transpose(a), t, rg)
    }

    fn conv2d_shapes(&self, x: NodeId, w: NodeId, stride: usize) -> Result<[usize; 8]> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d wants x[B,C,H,W], w[O,C,kh,kw]; got {:?}, {:?}",
                sx, sw
            )));
        }
        if sx[1] != sw[1] {
            return Err(Error::shape(format!(
                "conv2d channel mismatch: x has {}, w expects {}",
                sx[1], sw[1]
            )));
        }
        if sw[2] % 2 == 0 || sw[3] % 2 == 0 || stride == 0 {
            return Err(Error::shape(
                "conv2d requires odd kernel extents and stride >= 1",
            ));
        }
        Ok([sx[0], sx[1], sx[2], sx[3], sw[0], sw[2], sw[3], stride])
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize) -> Result<NodeId> {
        let [b, c, h, wd, o, kh, kw, s] = self.conv2d_shapes(x, w, stride)?;
        let data = kn::conv2d(
            self.nodes[x.ix()].value.data(),
            self.nodes[w.ix()].value.data(),
            b,
            c,
            h,
            wd,
            o,
            kh,
            kw,
            s,
        );
        let t = Tensor::from_vec(
            vec![b, o, kn::conv_out_extent(h, kh, s), kn::conv_out_extent(wd, kw, s)],
            data,
        )?;
        let rg = self.rg(&[x, w]);
        self.push(Op::Conv2d { x, w, stride: s }, t, rg)
    }

    /// Gradient of conv2d w.r.t. its input; a first-class differentiable op.
    pub fn conv2d_input_grad(
        &mut self,
        g: NodeId,
        w: NodeId,
        stride: usize,
        hw: (usize, usize),
    ) -> Result<NodeId> {
        let (sg, sw) = (self.shape(g), self.shape(w));
        if sg.len() != 4 || sw.len() != 4 || sg[1] != sw[0] {
            return Err(Error::shape(format!(
                "conv2d_input_grad wants g[B,O,Ho,Wo], w[O,C,kh,kw]; got {:?}, {:?}",
                sg, sw
            )));
        }
        let (b, o, c, kh, kw) = (sg[0], sg[1], sw[1], sw[2], sw[3]);
        if kn::conv_out_extent(hw.0, kh, stride) != sg[2]
            || kn::conv_out_extent(hw.1, kw, stride) != sg[3]
        {
            return Err(Error::shape(
                "conv2d_input_grad: g spatial extents inconsistent with target input size",
            ));
        }
        let data = kn::conv2d_input_grad(
            self.nodes[g.ix()].value.data(),
            self.nodes[w.ix()].value.data(),
            b,
            c,
            hw.0,
            hw.1,
            o,
            kh,
            kw,
            stride,
        );
        let t = Tensor::from_vec(vec![b, c, hw.0, hw.1], data)?;
        let rg = self.rg(&[g, w]);
        self.push(Op::Conv2dInputGrad { g, w, stride }, t, rg)
    }

    /// Gradient of conv2d w.r.t. its weights; a first-class differentiable op.
    pub fn conv2d_weight_grad(
        &mut self,
        x: NodeId,
        g: NodeId,
        stride: usize,
        k: (usize, usize),
    ) -> Result<NodeId> {
        let (sx, sg) = (self.shape(x), self.shape(g));
        if sx.len() != 4 || sg.len() != 4 || sx[0] != sg[0] {
            return Err(Error::shape(format!(
                "conv2d_weight_grad wants x[B,C,H,W], g[B,O,Ho,Wo]; got {:?}, {:?}",
                sx, sg
            )));
        }
        let (b, c, h, wd, o) = (sx[0], sx[1], sx[2], sx[3], sg[1]);
        if kn::conv_out_extent(h, k.0, stride) != sg[2]
            || kn::conv_out_extent(wd, k.1, stride) != sg[3]
        {
            return Err(Error::shape(
                "conv2d_weight_grad: g spatial extents inconsistent with x and kernel",
            ));
        }
        let data = kn::conv2d_weight_grad(
            self.nodes[x.ix()].value.data(),
            self.nodes[g.ix()].value.data(),
            b,
            c,
            h,
            wd,
            o,
            k.0,
            k.1,
            stride,
        );
        let t = Tensor::from_vec(vec![o, c, k.0, k.1], data)?;
        let rg = self.rg(&[x, g]);
        self.push(Op::Conv2dWeightGrad { x, g, stride }, t, rg)
    }

    fn conv3d_shapes(&self, x: NodeId, w: NodeId, stride: usize) -> Result<[usize; 10]> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 5 || sw.len() != 5 {
            return Err(Error::shape(format!(
                "conv3d wants x[B,C,D,H,W], w[O,C,kd,kh,kw]; got {:?}, {:?}",
                sx, sw
            )));
        }
        if sx[1] != sw[1] {
            return Err(Error::shape(format!(
                "conv3d channel mismatch: x has {}, w expects {}",
                sx[1], sw[1]
            )));
        }
        if sw[2] % 2 == 0 || sw[3] % 2 == 0 || sw[4] % 2 == 0 || stride == 0 {
            return Err(Error::shape(
                "conv3d requires odd kernel extents and stride >= 1",
            ));
        }
        Ok([
            sx[0], sx[1], sx[2], sx[3], sx[4], sw[0], sw[2], sw[3], sw[4], stride,
        ])
    }

    pub fn conv3d(&mut self, x: NodeId, w: NodeId, stride: usize) -> Result<NodeId> {
        let [b, c, d, h, wd, o, kd, kh, kw, s] = self.conv3d_shapes(x, w, stride)?;
        let data = kn::conv3d(
            self.nodes[x.ix()].value.data(),
            self.nodes[w.ix()].value.data(),
            b,
            c,
            d,
            h,
            wd,
            o,
            kd,
            kh,
            kw,
            s,
        );
        let t = Tensor::from_vec(
            vec![
                b,
                o,
                kn::conv_out_extent(d, kd, s),
                kn::conv_out_extent(h, kh, s),
                kn::conv_out_extent(wd, kw, s),
            ],
            data,
        )?;
        let rg = self.rg(&[x, w]);
        self.push(Op::Conv3d { x, w, stride: s }, t, rg)
    }

    pub fn conv3d_input_grad(
        &mut self,
        g: NodeId,
        w: NodeId,
        stride: usize,
        dhw: (usize, usize, usize),
    ) -> Result<NodeId> {
        let (sg, sw) = (self.shape(g), self.shape(w));
        if sg.len() != 5 || sw.len() != 5 || sg[1] != sw[0] {
            return Err(Error::shape(format!(
                "conv3d_input_grad wants g[B,O,Do,Ho,Wo], w[O,C,kd,kh,kw]; got {:?}, {:?}",
                sg, sw
            )));
        }
        let (b, o, c) = (sg[0], sg[1], sw[1]);
        let (kd, kh, kw) = (sw[2], sw[3], sw[4]);
        if kn::conv_out_extent(dhw.0, kd, stride) != sg[2]
            || kn::conv_out_extent(dhw.1, kh, stride) != sg[3]
            || kn::conv_out_extent(dhw.2, kw, stride) != sg[4]
        {
            return Err(Error::shape(
                "conv3d_input_grad: g extents inconsistent with target input size",
            ));
        }
        let data = kn::conv3d_input_grad(
            self.nodes[g.ix()].value.data(),
            self.nodes[w.ix()].value.data(),
            b,
            c,
            dhw.0,
            dhw.1,
            dhw.2,
            o,
            kd,
            kh,
            kw,
            stride,
        );
        let t = Tensor::from_vec(vec![b, c, dhw.0, dhw.1, dhw.2], data)?;
        let rg = self.rg(&[g, w]);
        self.push(Op::Conv3dInputGrad { g, w, stride }, t, rg)
    }

    pub fn conv3d_weight_grad(
        &mut self,
        x: NodeId,
        g: NodeId,
        stride: usize,
        k: (usize, usize, usize),
    ) -> Result<NodeId> {
        let (sx, sg) = (self.shape(x), self.shape(g));
        if sx.len() != 5 || sg.len() != 5 || sx[0] != sg[0] {
            return Err(Error::shape(format!(
                "conv3d_weight_grad wants x[B,C,D,H,W], g[B,O,Do,Ho,Wo]; got {:?}, {:?}",
                sx, sg
            )));
        }
        let (b, c, d, h, wd, o) = (sx[0], sx[1], sx[2], sx[3], sx[4], sg[1]);
        if kn::conv_out_extent(d, k.0, stride) != sg[2]
            || kn::conv_out_extent(h, k.1, stride) != sg[3]
            || kn::conv_out_extent(wd, k.2, stride) != sg[4]
        {
            return Err(Error::shape(
                "conv3d_weight_grad: g extents inconsistent with x and kernel",
            ));
        }
        let data = kn::conv3d_weight_grad(
            self.nodes[x.ix()].value.data(),
            self.nodes[g.ix()].value.data(),
            b,
            c,
            d,
            h,
            wd,
            o,
            k.0,
            k.1,
            k.2,
            stride,
        );
        let t = Tensor::from_vec(vec![o, c, k.0, k.1, k.2], data)?;
        let rg = self.rg(&[x, g]);
        self.push(Op::Conv3dWeightGrad { x, g, stride }, t, rg)
    }

    fn pool_shapes(&self, x: NodeId, k: usize, ctx: &str) -> Result<[usize; 4]> {
        let sx = self.shape(x);
        if sx.len() != 4 {
            return Err(Error::shape(format!("{} wants rank 4, got {:?}", ctx, sx)));
        }
        if k == 0 || sx[2] % k != 0 || sx[3] % k != 0 {
            return Err(Error::shape(format!(
                "{}: spatial extents {:?} not divisible by window {}",
                ctx,
                &sx[2..],
                k
            )));
        }
        Ok([sx[0], sx[1], sx[2], sx[3]])
    }

    pub fn maxpool2d(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let [b, c, h, w] = self.pool_shapes(x, k, "maxpool2d")?;
        let (data, argmax) = kn::maxpool2d(self.nodes[x.ix()].value.data(), b, c, h, w, k);
        let t = Tensor::from_vec(vec![b, c, h / k, w / k], data)?;
        let rg = self.rg(&[x]);
        self.push(
            Op::MaxPool2d {
                x,
                argmax: Rc::new(argmax),
            },
            t,
            rg,
        )
    }

    fn pool_meta(&self, src: NodeId, ctx: &str) -> Result<(Rc<Vec<u32>>, Vec<usize>, Vec<usize>)> {
        match &self.nodes[src.ix()].op {
            Op::MaxPool2d { x, argmax, .. } => Ok((
                argmax.clone(),
                self.shape(*x).to_vec(),
                self.shape(src).to_vec(),
            )),
            _ => Err(Error::shape(format!("{}: src must be a maxpool2d node", ctx))),
        }
    }

    /// Scatter pooled-shaped `g` back to the pool's input shape using the
    /// argmax recorded by `src`.
    pub fn max_unpool2d(&mut self, g: NodeId, src: NodeId) -> Result<NodeId> {
        let (argmax, xshape, yshape) = self.pool_meta(src, "max_unpool2d")?;
        if self.shape(g) != &yshape[..] {
            return Err(Error::shape("max_unpool2d: g must match pooled shape"));
        }
        let gv = self.nodes[g.ix()].value.data();
        let mut out = vec![S::ZERO; xshape.iter().product()];
        // Windows never overlap, so each target index is written once.
        for (j, &si) in argmax.iter().enumerate() {
            out[si as usize] = gv[j];
        }
        let t = Tensor::from_vec(xshape, out)?;
        let rg = self.rg(&[g]);
        self.push(Op::MaxUnpool2d { g, src }, t, rg)
    }

    /// Gather `x` at the argmax positions recorded by `src` (adjoint of
    /// `max_unpool2d`).
    pub fn max_gather2d(&mut self, x: NodeId, src: NodeId) -> Result<NodeId> {
        let (argmax, xshape, yshape) = self.pool_meta(src, "max_gather2d")?;
        if self.shape(x) != &xshape[..] {
            return Err(Error::shape("max_gather2d: x must match pool input shape"));
        }
        let xv = self.nodes[x.ix()].value.data();
        let out: Vec<S> = argmax.iter().map(|&si| xv[si as usize]).collect();
        let t = Tensor::from_vec(yshape, out)?;
        let rg = self.rg(&[x]);
        self.push(Op::MaxGather2d { x, src }, t, rg)
    }

    pub fn avgpool2d(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let [b, c, h, w] = self.pool_shapes(x, k, "avgpool2d")?;
        let data = kn::avgpool2d(self.nodes[x.ix()].value.data(), b, c, h, w, k);
        let t = Tensor::from_vec(vec![b, c, h / k, w / k], data)?;
        let rg = self.rg(&[x]);
        self.push(Op::AvgPool2d { x, k }, t, rg)
    }

    pub fn upsample_nearest2d(&mut self, x: NodeId, f: usize) -> Result<NodeId> {
        let sx = self.shape(x);
        if sx.len() != 4 || f == 0 {
            return Err(Error::shape(format!(
                "upsample_nearest2d wants rank 4 and factor >= 1, got {:?} x{}",
                sx, f
            )));
        }
        let [b, c, h, w] = [sx[0], sx[1], sx[2], sx[3]];
        let data = kn::upsample_nearest2d(self.nodes[x.ix()].value.data(), b, c, h, w, f);
        let t = Tensor::from_vec(vec![b, c, h * f, w * f], data)?;
        let rg = self.rg(&[x]);
        self.push(Op::UpsampleNearest2d { x, f }, t, rg)
    }

    /// Concatenate along axis 1 (channels / features). All parts must agree
    /// on every other axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("concat of zero parts"));
        }
        let s0 = self.shape(parts[0]).to_vec();
        if s0.len() < 2 {
            return Err(Error::shape("concat wants rank >= 2"));
        }
        let mut ctot = 0;
        for &p in parts {
            let sp = self.shape(p);
            if sp.len() != s0.len() || sp[0] != s0[0] || sp[2..] != s0[2..] {
                return Err(Error::shape(format!(
                    "concat parts disagree outside axis 1: {:?} vs {:?}",
                    s0, sp
                )));
            }
            ctot += sp[1];
        }
        let bsz = s0[0];
        let inner: usize = s0[2..].iter().product();
        let mut out = vec![S::ZERO; bsz * ctot * inner];
        for b in 0..bsz {
            let mut coff = 0;
            for &p in parts {
                let sp = self.shape(p).to_vec();
                let c = sp[1];
                let pv = self.nodes[p.ix()].value.data();
                let src = &pv[b * c * inner..(b + 1) * c * inner];
                out[(b * ctot + coff) * inner..(b * ctot + coff + c) * inner]
                    .copy_from_slice(src);
                coff += c;
            }
        }
        let mut shape = s0;
        shape[1] = ctot;
        let t = Tensor::from_vec(shape, out)?;
        let rg = self.rg(parts);
        self.push(Op::Concat(parts.to_vec()), t, rg)
    }

    /// Slice `[from, to)` along axis 1.
    pub fn slice_channels(&mut self, x: NodeId, from: usize, to: usize) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 || from >= to || to > sx[1] {
            return Err(Error::shape(format!(
                "slice_channels [{},{}) invalid for shape {:?}",
                from, to, sx
            )));
        }
        let (bsz, c) = (sx[0], sx[1]);
        let inner: usize = sx[2..].iter().product();
        let xv = self.nodes[x.ix()].value.data();
        let width = to - from;
        let mut out = vec![S::ZERO; bsz * width * inner];
        for b in 0..bsz {
            let src = &xv[(b * c + from) * inner..(b * c + to) * inner];
            out[b * width * inner..(b + 1) * width * inner].copy_from_slice(src);
        }
        let mut shape = sx;
        shape[1] = width;
        let t = Tensor::from_vec(shape, out)?;
        let rg = self.rg(&[x]);
        self.push(Op::SliceChannels { x, from, to }, t, rg)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.nodes[x.ix()].value.reshaped(shape)?;
        let rg = self.rg(&[x]);
        self.push(Op::Reshape(x), t, rg)
    }

    // Reductions accumulate in f64 regardless of S so that f32 graphs agree
    // with scalar-loop oracles to well under 1e-5 even over 10^5 elements.
    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let mut acc = 0.0f64;
        for &v in self.nodes[a.ix()].value.data() {
            acc += v.to_f64();
        }
        let rg = self.rg(&[a]);
        self.push(Op::SumAll(a), Tensor::scalar(S::from_f64(acc)), rg)
    }

    /// Mean over all elements; the graph's `batch_mean` style reduction.
    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.nodes[a.ix()].value.numel();
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// [B, ...] -> [B], summing everything but axis 0.
    pub fn sum_trailing(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if sa.is_empty() {
            return Err(Error::shape("sum_trailing wants rank >= 1"));
        }
        let bsz = sa[0];
        let inner: usize = sa[1..].iter().product();
        let av = self.nodes[a.ix()].value.data();
        let mut out = vec![S::ZERO; bsz];
        for b in 0..bsz {
            let mut acc = 0.0f64;
            for &v in &av[b * inner..(b + 1) * inner] {
                acc += v.to_f64();
            }
            out[b] = S::from_f64(acc);
        }
        let t = Tensor::from_vec(vec![bsz], out)?;
        let rg = self.rg(&[a]);
        self.push(Op::SumTrailing(a), t, rg)
    }

    /// [R, N] -> [N], summing rows.
    pub fn sum_axis0(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(Error::shape(format!("sum_axis0 wants rank 2, got {:?}", sa)));
        }
        let (r, n) = (sa[0], sa[1]);
        let av = self.nodes[a.ix()].value.data();
        let mut acc = vec![0.0f64; n];
        for i in 0..r {
            for j in 0..n {
                acc[j] += av[i * n + j].to_f64();
            }
        }
        let out: Vec<S> = acc.into_iter().map(S::from_f64).collect();
        let t = Tensor::from_vec(vec![n], out)?;
        let rg = self.rg(&[a]);
        self.push(Op::SumAxis0(a), t, rg)
    }

    /// [B, C, ...] -> [C], summing batch and spatial axes.
    pub fn sum_channels(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if sa.len() < 2 {
            return Err(Error::shape("sum_channels wants rank >= 2"));
        }
        let (bsz, c) = (sa[0], sa[1]);
        let inner: usize = sa[2..].iter().product();
        let av = self.nodes[a.ix()].value.data();
        let mut acc = vec![0.0f64; c];
        for b in 0..bsz {
            for ch in 0..c {
                for &v in &av[(b * c + ch) * inner..(b * c + ch + 1) * inner] {
                    acc[ch] += v.to_f64();
                }
            }
        }
        let out: Vec<S> = acc.into_iter().map(S::from_f64).collect();
        let t = Tensor::from_vec(vec![c], out)?;
        let rg = self.rg(&[a]);
        self.push(Op::SumChannels(a), t, rg)
    }

    /// [B, C, ...] -> [B, C], summing spatial axes.
    pub fn sum_spatial(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if sa.len() < 3 {
            return Err(Error::shape("sum_spatial wants rank >= 3"));
        }
        let (bsz, c) = (sa[0], sa[1]);
        let inner: usize = sa[2..].iter().product();
        let av = self.nodes[a.ix()].value.data();
        let mut out = vec![S::ZERO; bsz * c];
        for bc in 0..bsz * c {
            let mut acc = 0.0f64;
            for &v in &av[bc * inner..(bc + 1) * inner] {
                acc += v.to_f64();
            }
            out[bc] = S::from_f64(acc);
        }
        let t = Tensor::from_vec(vec![bsz, c], out)?;
        let rg = self.rg(&[a]);
        self.push(Op::SumSpatial(a), t, rg)
    }

    /// Global average pooling [B, C, ...] -> [B, C].
    pub fn global_avg_pool(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if sa.len() < 3 {
            return Err(Error::shape("global_avg_pool wants rank >= 3"));
        }
        let inner: usize = sa[2..].iter().product();
        let s = self.sum_spatial(a)?;
        self.scale(s, 1.0 / inner as f64)
    }

    pub fn bcast_scalar(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        if !self.nodes[a.ix()].value.is_scalar() {
            return Err(Error::shape("bcast_scalar wants a scalar"));
        }
        let v = self.nodes[a.ix()].value.data()[0];
        let t = Tensor::full(shape, v);
        let rg = self.rg(&[a]);
        self.push(Op::BcastScalar(a), t, rg)
    }

    /// [B] -> [B, ...], repeating each sample's value over trailing axes.
    pub fn bcast_trailing(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let sa = self.shape(a);
        if sa.len() != 1 || shape.is_empty() || shape[0] != sa[0] {
            return Err(Error::shape(format!(
                "bcast_trailing [B] -> [B,...]: got {:?} -> {:?}",
                sa, shape
            )));
        }
        let bsz = sa[0];
        let inner: usize = shape[1..].iter().product();
        let av = self.nodes[a.ix()].value.data();
        let mut out = vec![S::ZERO; bsz * inner];
        for b in 0..bsz {
            out[b * inner..(b + 1) * inner].fill(av[b]);
        }
        let t = Tensor::from_vec(shape.to_vec(), out)?;
        let rg = self.rg(&[a]);
        self.push(Op::BcastTrailing(a), t, rg)
    }

    /// [N] -> [R, N], repeating the row (bias addition pattern).
    pub fn bcast_axis0(&mut self, a: NodeId, rows: usize) -> Result<NodeId> {
        let sa = self.shape(a);
        if sa.len() != 1 {
            return Err(Error::shape("bcast_axis0 wants rank 1"));
        }
        let n = sa[0];
        let av = self.nodes[a.ix()].value.data();
        let mut out = vec![S::ZERO; rows * n];
        for r in 0..rows {
            out[r * n..(r + 1) * n].copy_from_slice(av);
        }
        let t = Tensor::from_vec(vec![rows, n], out)?;
        let rg = self.rg(&[a]);
        self.push(Op::BcastAxis0(a), t, rg)
    }

    /// [C] -> [B, C, ...], per-channel value everywhere (conv bias pattern).
    pub fn bcast_channels(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let sa = self.shape(a);
        if sa.len() != 1 || shape.len() < 2 || shape[1] != sa[0] {
            return Err(Error::shape(format!(
                "bcast_channels [C] -> [B,C,...]: got {:?} -> {:?}",
                sa, shape
            )));
        }
        let (bsz, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let av = self.nodes[a.ix()].value.data();
        let mut out = vec![S::ZERO; bsz * c * inner];
        for b in 0..bsz {
            for ch in 0..c {
                out[(b * c + ch) * inner..(b * c + ch + 1) * inner].fill(av[ch]);
            }
        }
        let t = Tensor::from_vec(shape.to_vec(), out)?;
        let rg = self.rg(&[a]);
        self.push(Op::BcastChannels(a), t, rg)
    }

    /// [B, C] -> [B, C, ...], repeating over spatial axes (GAP adjoint).
    pub fn bcast_spatial(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let sa = self.shape(a);
        if sa.len() != 2 || shape.len() < 3 || shape[0] != sa[0] || shape[1] != sa[1] {
            return Err(Error::shape(format!(
                "bcast_spatial [B,C] -> [B,C,...]: got {:?} -> {:?}",
                sa, shape
            )));
        }
        let inner: usize = shape[2..].iter().product();
        let av = self.nodes[a.ix()].value.data();
        let mut out = vec![S::ZERO; av.len() * inner];
        for (bc, &v) in av.iter().enumerate() {
            out[bc * inner..(bc + 1) * inner].fill(v);
        }
        let t = Tensor::from_vec(shape.to_vec(), out)?;
        let rg = self.rg(&[a]);
        self.push(Op::BcastSpatial(a), t, rg)
    }

    fn sign_const(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.nodes[a.ix()].value.map(|x| {
            if x > S::ZERO {
                S::ONE
            } else if x < S::ZERO {
                -S::ONE
            } else {
                S::ZERO
            }
        });
        self.constant(t)
    }

    fn step_const(&mut self, a: NodeId, below: S) -> Result<NodeId> {
        let t = self.nodes[a.ix()].value.map(|x| if x > S::ZERO { S::ONE } else { below });
        self.constant(t)
    }

    /// Emit gradient nodes for one op. Returns (input, grad-node) pairs for
    /// inputs that require grad.
    fn emit_grads(&mut self, y: NodeId, gy: NodeId) -> Result<Vec<(NodeId, NodeId)>> {
        let op = self.nodes[y.ix()].op.clone();
        let want = |g: &Self, id: NodeId| g.nodes[id.ix()].requires_grad;
        let mut out = Vec::new();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if want(self, a) {
                    out.push((a, gy));
                }
                if want(self, b) {
                    out.push((b, gy));
                }
            }
            Op::Sub(a, b) => {
                if want(self, a) {
                    out.push((a, gy));
                }
                if want(self, b) {
                    let g = self.neg(gy)?;
                    out.push((b, g));
                }
            }
            Op::Neg(a) => {
                if want(self, a) {
                    let g = self.neg(gy)?;
                    out.push((a, g));
                }
            }
            Op::Mul(a, b) => {
                if want(self, a) {
                    let g = self.mul(gy, b)?;
                    out.push((a, g));
                }
                if want(self, b) {
                    let g = self.mul(gy, a)?;
                    out.push((b, g));
                }
            }
            Op::Div(a, b) => {
                if want(self, a) {
                    let g = self.div(gy, b)?;
                    out.push((a, g));
                }
                if want(self, b) {
                    let q = self.div(y, b)?;
                    let gq = self.mul(gy, q)?;
                    let g = self.neg(gq)?;
                    out.push((b, g));
                }
            }
            Op::Scale(a, c) => {
                if want(self, a) {
                    let g = self.scale(gy, c)?;
                    out.push((a, g));
                }
            }
            Op::AddScalar(a) => {
                if want(self, a) {
                    out.push((a, gy));
                }
            }
            Op::Relu(a) => {
                if want(self, a) {
                    let m = self.step_const(a, S::ZERO)?;
                    let g = self.mul(gy, m)?;
                    out.push((a, g));
                }
            }
            Op::LeakyRelu(a, alpha) => {
                if want(self, a) {
                    let m = self.step_const(a, S::from_f64(alpha))?;
                    let g = self.mul(gy, m)?;
                    out.push((a, g));
                }
            }
            Op::Sigmoid(a) => {
                if want(self, a) {
                    let ny = self.neg(y)?;
                    let om = self.add_scalar(ny, 1.0)?;
                    let d = self.mul(y, om)?;
                    let g = self.mul(gy, d)?;
                    out.push((a, g));
                }
            }
            Op::Tanh(a) => {
                if want(self, a) {
                    let y2 = self.square(y)?;
                    let ny2 = self.neg(y2)?;
                    let d = self.add_scalar(ny2, 1.0)?;
                    let g = self.mul(gy, d)?;
                    out.push((a, g));
                }
            }
            Op::Exp(a) => {
                if want(self, a) {
                    let g = self.mul(gy, y)?;
                    out.push((a, g));
                }
            }
            Op::Log(a) => {
                if want(self, a) {
                    let g = self.div(gy, a)?;
                    out.push((a, g));
                }
            }
            Op::Square(a) => {
                if want(self, a) {
                    let ga = self.mul(gy, a)?;
                    let g = self.scale(ga, 2.0)?;
                    out.push((a, g));
                }
            }
            Op::Sqrt(a) => {
                if want(self, a) {
                    let d = self.div(gy, y)?;
                    let g = self.scale(d, 0.5)?;
                    out.push((a, g));
                }
            }
            Op::Abs(a) => {
                if want(self, a) {
                    let sgn = self.sign_const(a)?;
                    let g = self.mul(gy, sgn)?;
                    out.push((a, g));
                }
            }
            Op::Matmul(a, b) => {
                if want(self, a) {
                    let bt = self.transpose(b)?;
                    let g = self.matmul(gy, bt)?;
                    out.push((a, g));
                }
                if want(self, b) {
                    let at = self.transpose(a)?;
                    let g = self.matmul(at, gy)?;
                    out.push((b, g));
                }
            }
            Op::Transpose(a) => {
                if want(self, a) {
                    let g = self.transpose(gy)?;
                    out.push((a, g));
                }
            }
            Op::Conv2d { x, w, stride } => {
                let sx = self.shape(x).to_vec();
                let sw = self.shape(w).to_vec();
                if want(self, x) {
                    let g = self.conv2d_input_grad(gy, w, stride, (sx[2], sx[3]))?;
                    out.push((x, g));
                }
                if want(self, w) {
                    let g = self.conv2d_weight_grad(x, gy, stride, (sw[2], sw[3]))?;
                    out.push((w, g));
                }
            }
            Op::Conv2dInputGrad { g: g0, w, stride } => {
                let sw = self.shape(w).to_vec();
                if want(self, g0) {
                    let g = self.conv2d(gy, w, stride)?;
                    out.push((g0, g));
                }
                if want(self, w) {
                    let g = self.conv2d_weight_grad(gy, g0, stride, (sw[2], sw[3]))?;
                    out.push((w, g));
                }
            }
            Op::Conv2dWeightGrad { x, g: g0, stride } => {
                let sx = self.shape(x).to_vec();
                if want(self, x) {
                    let g = self.conv2d_input_grad(g0, gy, stride, (sx[2], sx[3]))?;
                    out.push((x, g));
                }
                if want(self, g0) {
                    let g = self.conv2d(x, gy, stride)?;
                    out.push((g0, g));
                }
            }
            Op::Conv3d { x, w, stride } => {
                let sx = self.shape(x).to_vec();
                let sw = self.shape(w).to_vec();
                if want(self, x) {
                    let g = self.conv3d_input_grad(gy, w, stride, (sx[2], sx[3], sx[4]))?;
                    out.push((x, g));
                }
                if want(self, w) {
                    let g = self.conv3d_weight_grad(x, gy, stride, (sw[2], sw[3], sw[4]))?;
                    out.push((w, g));
                }
            }
            Op::Conv3dInputGrad { g: g0, w, stride } => {
                let sw = self.shape(w).to_vec();
                if want(self, g0) {
                    let g = self.conv3d(gy, w, stride)?;
                    out.push((g0, g));
                }
                if want(self, w) {
                    let g = self.conv3d_weight_grad(gy, g0, stride, (sw[2], sw[3], sw[4]))?;
                    out.push((w, g));
                }
            }
            Op::Conv3dWeightGrad { x, g: g0, stride } => {
                let sx = self.shape(x).to_vec();
                if want(self, x) {
                    let g = self.conv3d_input_grad(g0, gy, stride, (sx[2], sx[3], sx[4]))?;
                    out.push((x, g));
                }
                if want(self, g0) {
                    let g = self.conv3d(x, gy, stride)?;
                    out.push((g0, g));
                }
            }
            Op::MaxPool2d { x, .. } => {
                if want(self, x) {
                    let g = self.max_unpool2d(gy, y)?;
                    out.push((x, g));
                }
            }
            Op::MaxUnpool2d { g: g0, src } => {
                if want(self, g0) {
                    let g = self.max_gather2d(gy, src)?;
                    out.push((g0, g));
                }
            }
            Op::MaxGather2d { x, src } => {
                if want(self, x) {
                    let g = self.max_unpool2d(gy, src)?;
                    out.push((x, g));
                }
            }
            Op::AvgPool2d { x, k } => {
                if want(self, x) {
                    let up = self.upsample_nearest2d(gy, k)?;
                    let g = self.scale(up, 1.0 / (k * k) as f64)?;
                    out.push((x, g));
                }
            }
            Op::UpsampleNearest2d { x, f } => {
                if want(self, x) {
                    let dn = self.avgpool2d(gy, f)?;
                    let g = self.scale(dn, (f * f) as f64)?;
                    out.push((x, g));
                }
            }
            Op::Concat(parts) => {
                let mut from = 0;
                for &p in &parts {
                    let c = self.shape(p)[1];
                    if want(self, p) {
                        let g = self.slice_channels(gy, from, from + c)?;
                        out.push((p, g));
                    }
                    from += c;
                }
            }
            Op::SliceChannels { x, from, to } => {
                if want(self, x) {
                    let sx = self.shape(x).to_vec();
                    let mut parts = Vec::new();
                    if from > 0 {
                        let mut zshape = sx.clone();
                        zshape[1] = from;
                        let z = self.constant(Tensor::zeros(&zshape))?;
                        parts.push(z);
                    }
                    parts.push(gy);
                    if to < sx[1] {
                        let mut zshape = sx.clone();
                        zshape[1] = sx[1] - to;
                        let z = self.constant(Tensor::zeros(&zshape))?;
                        parts.push(z);
                    }
                    let g = self.concat(&parts)?;
                    out.push((x, g));
                }
            }
            Op::Reshape(x) => {
                if want(self, x) {
                    let sx = self.shape(x).to_vec();
                    let g = self.reshape(gy, &sx)?;
                    out.push((x, g));
                }
            }
            Op::SumAll(a) => {
                if want(self, a) {
                    let sa = self.shape(a).to_vec();
                    let g = self.bcast_scalar(gy, &sa)?;
                    out.push((a, g));
                }
            }
            Op::SumTrailing(a) => {
                if want(self, a) {
                    let sa = self.shape(a).to_vec();
                    let g = self.bcast_trailing(gy, &sa)?;
                    out.push((a, g));
                }
            }
            Op::SumAxis0(a) => {
                if want(self, a) {
                    let rows = self.shape(a)[0];
                    let g = self.bcast_axis0(gy, rows)?;
                    out.push((a, g));
                }
            }
            Op::SumChannels(a) => {
                if want(self, a) {
                    let sa = self.shape(a).to_vec();
                    let g = self.bcast_channels(gy, &sa)?;
                    out.push((a, g));
                }
            }
            Op::SumSpatial(a) => {
                if want(self, a) {
                    let sa = self.shape(a).to_vec();
                    let g = self.bcast_spatial(gy, &sa)?;
                    out.push((a, g));
                }
            }
            Op::BcastScalar(a) => {
                if want(self, a) {
                    let g = self.sum_all(gy)?;
                    out.push((a, g));
                }
            }
            Op::BcastTrailing(a) => {
                if want(self, a) {
                    let g = self.sum_trailing(gy)?;
                    out.push((a, g));
                }
            }
            Op::BcastAxis0(a) => {
                if want(self, a) {
                    let g = self.sum_axis0(gy)?;
                    out.push((a, g));
                }
            }
            Op::BcastChannels(a) => {
                if want(self, a) {
                    let g = self.sum_channels(gy)?;
                    out.push((a, g));
                }
            }
            Op::BcastSpatial(a) => {
                if want(self, a) {
                    let g = self.sum_spatial(gy)?;
                    out.push((a, g));
                }
            }
        }
        if let Some((name, factor)) = self.fault {
            if name == self.nodes[y.ix()].op.name() {
                for item in out.iter_mut() {
                    let scaled = self.scale(item.1, factor)?;
                    item.1 = scaled;
                }
            }
        }
        Ok(out)
    }

    /// Reverse-mode differentiation of a scalar `loss` w.r.t. `wrt` nodes.
    ///
    /// Appends gradient nodes to the graph and returns one node per `wrt`
    /// entry (a zero constant if the loss does not depend on it). Each
    /// reachable node is visited exactly once, in reverse creation order;
    /// gradients of fan-out nodes accumulate in that fixed order, so results
    /// are deterministic.
    pub fn backward(&mut self, loss: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n0 = loss.ix() + 1;
        // A node participates if it requires grad and feeds the loss.
        let mut active = vec![false; n0];
        active[loss.ix()] = self.nodes[loss.ix()].requires_grad;
        for i in (0..n0).rev() {
            if !active[i] {
                continue;
            }
            for inp in self.nodes[i].op.inputs() {
                if self.nodes[inp.ix()].requires_grad {
                    active[inp.ix()] = true;
                }
            }
        }
        let mut grad: Vec<Option<NodeId>> = vec![None; n0];
        let seed = self.constant(Tensor::scalar(S::ONE))?;
        grad[loss.ix()] = Some(seed);
        for i in (0..n0).rev() {
            if !active[i] {
                continue;
            }
            let Some(gy) = grad[i] else { continue };
            let pairs = self.emit_grads(NodeId(i as u32), gy)?;
            for (inp, gnode) in pairs {
                if inp.ix() < n0 && active[inp.ix()] {
                    grad[inp.ix()] = match grad[inp.ix()] {
                        None => Some(gnode),
                        Some(old) => Some(self.add(old, gnode)?),
                    };
                }
            }
        }
        let mut res = Vec::with_capacity(wrt.len());
        for &id in wrt {
            match grad.get(id.ix()).copied().flatten() {
                Some(g) => res.push(g),
                None => {
                    let z = Tensor::zeros(self.value(id).shape());
                    res.push(self.constant(z)?);
                }
            }
        }
        Ok(res)
    }
}
