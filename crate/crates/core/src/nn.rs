//! Parameter management and network building blocks.
//!
//! Parameters live outside any graph in a [`ParamStore`]; each training
//! step starts a fresh graph, injects the parameters as leaves, builds the
//! loss, runs backward, and applies the optimizer to the store. Layer
//! structs hold store indices, not tensors.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{load_checkpoint, save_checkpoint, Graph, NodeId, Scalar, Tensor};

/// Named, ordered f32 parameters. Registration order is the optimizer's
/// state order, so it must be identical across runs (all construction in
/// this crate is deterministic).
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<f32>) -> Result<usize> {
        let name = name.into();
        if self.names.iter().any(|n| n == &name) {
            return Err(Error::config(format!("duplicate parameter name '{}'", name)));
        }
        self.names.push(name);
        self.tensors.push(t);
        Ok(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn get(&self, i: usize) -> &Tensor<f32> {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<f32> {
        &mut self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn tensors(&self) -> &[Tensor<f32>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.tensors
    }

    /// Insert every parameter into `g` as a leaf, in store order.
    pub fn leaves(&self, g: &mut Graph<f32>, trainable: bool) -> Result<Vec<NodeId>> {
        self.tensors
            .iter()
            .map(|t| g.leaf(t.clone(), trainable))
            .collect()
    }

    /// Copy gradient values out of the graph, aligned with store order.
    pub fn grads_from(&self, g: &Graph<f32>, grad_ids: &[NodeId]) -> Result<Vec<Tensor<f32>>> {
        if grad_ids.len() != self.tensors.len() {
            return Err(Error::train("gradient count does not match store"));
        }
        Ok(grad_ids.iter().map(|&id| g.value(id).clone()).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(
            path,
            self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter()),
        )
    }

    /// Load a checkpoint that must agree entry-for-entry (names, order,
    /// shapes) with this store.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let entries = load_checkpoint(path)?;
        if entries.len() != self.tensors.len() {
            return Err(Error::format(format!(
                "checkpoint has {} entries, store expects {}",
                entries.len(),
                self.tensors.len()
            )));
        }
        for (i, (name, t)) in entries.into_iter().enumerate() {
            if name != self.names[i] {
                return Err(Error::format(format!(
                    "checkpoint entry {} named '{}', store expects '{}'",
                    i, name, self.names[i]
                )));
            }
            if t.shape() != self.tensors[i].shape() {
                return Err(Error::format(format!(
                    "checkpoint entry '{}' has shape {:?}, store expects {:?}",
                    name,
                    t.shape(),
                    self.tensors[i].shape()
                )));
            }
            self.tensors[i] = t;
        }
        Ok(())
    }
}

/// He-normal initialization for a conv/linear weight with the given fan-in.
fn he_init(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<f32> {
    Tensor::randn(shape, (2.0 / fan_in as f32).sqrt(), rng)
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2dLayer {
    pub w: usize,
    pub b: usize,
    stride: usize,
}

impl Conv2dLayer {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = store.add(
            format!("{}.w", name),
            he_init(&[out_c, in_c, k, k], in_c * k * k, rng),
        )?;
        let b = store.add(format!("{}.b", name), Tensor::zeros(&[out_c]))?;
        Ok(Conv2dLayer { w, b, stride })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, ps: &[NodeId], x: NodeId) -> Result<NodeId> {
        let y = g.conv2d(x, ps[self.w], self.stride)?;
        let shape = g.shape(y).to_vec();
        let bb = g.bcast_channels(ps[self.b], &shape)?;
        g.add(y, bb)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv3dLayer {
    pub w: usize,
    pub b: usize,
    stride: usize,
}

impl Conv3dLayer {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = store.add(
            format!("{}.w", name),
            he_init(&[out_c, in_c, k, k, k], in_c * k * k * k, rng),
        )?;
        let b = store.add(format!("{}.b", name), Tensor::zeros(&[out_c]))?;
        Ok(Conv3dLayer { w, b, stride })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, ps: &[NodeId], x: NodeId) -> Result<NodeId> {
        let y = g.conv3d(x, ps[self.w], self.stride)?;
        let shape = g.shape(y).to_vec();
        let bb = g.bcast_channels(ps[self.b], &shape)?;
        g.add(y, bb)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearLayer {
    pub w: usize,
    pub b: usize,
}

impl LinearLayer {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        in_f: usize,
        out_f: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = store.add(format!("{}.w", name), he_init(&[in_f, out_f], in_f, rng))?;
        let b = store.add(format!("{}.b", name), Tensor::zeros(&[out_f]))?;
        Ok(LinearLayer { w, b })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, ps: &[NodeId], x: NodeId) -> Result<NodeId> {
        let y = g.matmul(x, ps[self.w])?;
        let rows = g.shape(y)[0];
        let bb = g.bcast_axis0(ps[self.b], rows)?;
        g.add(y, bb)
    }
}

/// Two 3x3 convs with a residual connection; 1x1 projection when the
/// channel count changes. Post-activation ReLU.
#[derive(Clone, Copy, Debug)]
pub struct ResBlock2d {
    conv1: Conv2dLayer,
    conv2: Conv2dLayer,
    proj: Option<Conv2dLayer>,
}

impl ResBlock2d {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let conv1 = Conv2dLayer::init(store, &format!("{}.conv1", name), in_c, out_c, 3, 1, rng)?;
        let conv2 = Conv2dLayer::init(store, &format!("{}.conv2", name), out_c, out_c, 3, 1, rng)?;
        let proj = if in_c != out_c {
            Some(Conv2dLayer::init(
                store,
                &format!("{}.proj", name),
                in_c,
                out_c,
                1,
                1,
                rng,
            )?)
        } else {
            None
        };
        Ok(ResBlock2d { conv1, conv2, proj })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, ps: &[NodeId], x: NodeId) -> Result<NodeId> {
        let h = self.conv1.forward(g, ps, x)?;
        let h = g.relu(h)?;
        let h = self.conv2.forward(g, ps, h)?;
        let skip = match &self.proj {
            Some(p) => p.forward(g, ps, x)?,
            None => x,
        };
        let s = g.add(h, skip)?;
        g.relu(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadAct {
    Linear,
    Sigmoid,
}

/// Three-level residual U-Net with encoder widths [w, 2w, 4w] and skip
/// connections into the decoder. Input spatial extents must be divisible
/// by 4.
#[derive(Clone, Debug)]
pub struct ResUNet2d {
    enc1: ResBlock2d,
    enc2: ResBlock2d,
    bottom: ResBlock2d,
    dec2: ResBlock2d,
    dec1: ResBlock2d,
    head: Conv2dLayer,
    head_act: HeadAct,
}

impl ResUNet2d {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        in_c: usize,
        base: usize,
        out_c: usize,
        head_act: HeadAct,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let enc1 = ResBlock2d::init(store, &format!("{}.enc1", name), in_c, base, rng)?;
        let enc2 = ResBlock2d::init(store, &format!("{}.enc2", name), base, 2 * base, rng)?;
        let bottom = ResBlock2d::init(store, &format!("{}.bottom", name), 2 * base, 4 * base, rng)?;
        let dec2 = ResBlock2d::init(store, &format!("{}.dec2", name), 6 * base, 2 * base, rng)?;
        let dec1 = ResBlock2d::init(store, &format!("{}.dec1", name), 3 * base, base, rng)?;
        let head = Conv2dLayer::init(store, &format!("{}.head", name), base, out_c, 3, 1, rng)?;
        Ok(ResUNet2d {
            enc1,
            enc2,
            bottom,
            dec2,
            dec1,
            head,
            head_act,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, ps: &[NodeId], x: NodeId) -> Result<NodeId> {
        let e1 = self.enc1.forward(g, ps, x)?;
        let p1 = g.maxpool2d(e1, 2)?;
        let e2 = self.enc2.forward(g, ps, p1)?;
        let p2 = g.maxpool2d(e2, 2)?;
        let bt = self.bottom.forward(g, ps, p2)?;
        let u2 = g.upsample_nearest2d(bt, 2)?;
        let c2 = g.concat(&[u2, e2])?;
        let d2 = self.dec2.forward(g, ps, c2)?;
        let u1 = g.upsample_nearest2d(d2, 2)?;
        let c1 = g.concat(&[u1, e1])?;
        let d1 = self.dec1.forward(g, ps, c1)?;
        let h = self.head.forward(g, ps, d1)?;
        match self.head_act {
            HeadAct::Linear => Ok(h),
            HeadAct::Sigmoid => g.sigmoid(h),
        }
    }
}
