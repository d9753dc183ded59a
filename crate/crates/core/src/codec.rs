//! Stage-1 object codec over 2D patches.
//!
//! A masked object patch is decomposed into a predicted soft mask and a
//! residual code by an hourglass network without skip connections; the code
//! and mask are expanded back into an object-region image, fused onto the
//! untouched background, refined into a full patch, and re-segmented so the
//! refinement cannot erase the shape. All four networks train jointly
//! against the composite loss in [`stage1_loss`].
//!
//! Images cross this API in the [0, 255] normalized-HU range; the networks
//! see them divided by 255. Masks are soft in (0, 1) with a fixed 0.5
//! binarization threshold.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::nn::{Conv2dLayer, HeadAct, LinearLayer, ParamStore, ResBlock2d, ResUNet2d};
use crate::rng::stream_rng;
use crate::tensor::{Amsgrad, Graph, NodeId, Scalar, Tensor};
use crate::volume::Patch2d;
use crate::{Error, Result};

/// Mask binarization threshold used everywhere downstream.
pub const MASK_THRESHOLD: f32 = 0.5;
/// Dice denominators are guarded by this epsilon.
pub const DICE_EPS: f64 = 1e-6;
/// Pixels added around the tight mask bounding box to form the object box.
pub const OMEGA_PAD: usize = 4;
/// Extra pixels around the object box for the context box.
pub const OMEGA_PLUS_PAD: usize = 8;
/// Ball radius for the surrounding-ring dilation.
pub const RING_RADIUS: usize = 3;

/// Axis-aligned object and context boxes plus the surrounding ring, all in
/// patch pixel coordinates. Boxes are half-open [x0, x1) x [y0, y1).
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectRegion {
    pub omega: [usize; 4],
    pub omega_plus: [usize; 4],
    /// Dilate(m) - m as a binary image, row-major, same extents as the patch.
    pub ring: Vec<u8>,
    side: usize,
}

impl ObjectRegion {
    /// Indicator image of the object box, 1.0 inside, 0.0 outside.
    pub fn omega_mask(&self) -> Vec<f32> {
        box_mask(self.omega, self.side)
    }

    /// Indicator image of the context box.
    pub fn omega_plus_mask(&self) -> Vec<f32> {
        box_mask(self.omega_plus, self.side)
    }
}

fn box_mask(b: [usize; 4], side: usize) -> Vec<f32> {
    let mut out = vec![0.0; side * side];
    for y in b[1]..b[3] {
        for x in b[0]..b[2] {
            out[y * side + x] = 1.0;
        }
    }
    out
}

fn mask_bbox(mask: &[u8], side: usize) -> Option<[usize; 4]> {
    let (mut x0, mut y0, mut x1, mut y1) = (side, side, 0usize, 0usize);
    let mut any = false;
    for y in 0..side {
        for x in 0..side {
            if mask[y * side + x] != 0 {
                any = true;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    any.then_some([x0, y0, x1, y1])
}

fn pad_box(b: [usize; 4], pad: usize, side: usize) -> [usize; 4] {
    [
        b[0].saturating_sub(pad),
        b[1].saturating_sub(pad),
        (b[2] + pad).min(side),
        (b[3] + pad).min(side),
    ]
}

fn dilate2d(mask: &[u8], side: usize, radius: usize) -> Vec<u8> {
    let r = radius as isize;
    let mut offsets = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                offsets.push((dx, dy));
            }
        }
    }
    let mut out = vec![0u8; side * side];
    for y in 0..side as isize {
        for x in 0..side as isize {
            if mask[y as usize * side + x as usize] == 0 {
                continue;
            }
            for &(dx, dy) in &offsets {
                let (nx, ny) = (x + dx, y + dy);
                if nx >= 0 && ny >= 0 && (nx as usize) < side && (ny as usize) < side {
                    out[ny as usize * side + nx as usize] = 1;
                }
            }
        }
    }
    out
}

/// Object box, context box, and surrounding ring for a binary patch mask.
/// The object box is the tight mask bounding box padded by 4 pixels, the
/// context box pads it by a further 8, and the ring is a 3-pixel-ball
/// dilation minus the mask itself.
pub fn compute_regions(mask: &[u8], side: usize) -> Result<ObjectRegion> {
    if mask.len() != side * side {
        return Err(Error::shape("compute_regions: mask length does not match extents"));
    }
    if mask.iter().any(|&v| v > 1) {
        return Err(Error::shape("compute_regions: mask must be binary"));
    }
    let tight = mask_bbox(mask, side)
        .ok_or_else(|| Error::geometry("compute_regions: empty mask has no object box"))?;
    let omega = pad_box(tight, OMEGA_PAD, side);
    let omega_plus = pad_box(omega, OMEGA_PLUS_PAD, side);
    let dil = dilate2d(mask, side, RING_RADIUS);
    let ring: Vec<u8> =
        dil.iter().zip(mask.iter()).map(|(&d, &m)| if d != 0 && m == 0 { 1 } else { 0 }).collect();
    Ok(ObjectRegion { omega, omega_plus, ring, side })
}

/// Residual description of the object appearance inside its box.
#[derive(Debug, Clone)]
pub struct ResidualCode {
    pub z: Vec<f32>,
    pub mu: Vec<f32>,
    pub logvar: Vec<f32>,
}

/// Weights for the stage-1 composite loss and the stage-2 generator and
/// critic terms.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda_dkl: f64,
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub lambda_d: f64,
    pub lambda_local: f64,
    pub lambda_context: f64,
    pub lambda_gp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            lambda_dkl: 1e-3,
            w1: 1.0,
            w2: 1.0,
            w3: 1.0,
            lambda_d: 0.1,
            lambda_local: 0.5,
            lambda_context: 0.5,
            lambda_gp: 10.0,
        }
    }
}

/// Network sizing. `patch` must be a power of two and divisible by 8 so the
/// three hourglass pools and the reconstruction upsampling chain line up.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CodecDims {
    pub patch: usize,
    pub widths: [usize; 3],
    pub bottom: usize,
    pub base: usize,
}

pub const FULL_CODEC: CodecDims =
    CodecDims { patch: 64, widths: [8, 16, 32], bottom: 256, base: 8 };

impl CodecDims {
    fn validate(&self) -> Result<()> {
        if !self.patch.is_power_of_two() || self.patch < 8 {
            return Err(Error::config("codec: patch side must be a power of two, at least 8"));
        }
        if self.widths.iter().any(|&w| w == 0) || self.bottom == 0 || self.base == 0 {
            return Err(Error::config("codec: zero width"));
        }
        Ok(())
    }

    fn ups(&self) -> usize {
        self.patch.trailing_zeros() as usize
    }
}

struct DecomposeNet {
    params: ParamStore,
    blocks: [ResBlock2d; 3],
    bottom: ResBlock2d,
    up: [Conv2dLayer; 3],
    mask_head: Conv2dLayer,
    fc_mu: LinearLayer,
    fc_logvar: LinearLayer,
}

impl DecomposeNet {
    fn init(dims: &CodecDims, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut params = ParamStore::new();
        let [w1, w2, w3] = dims.widths;
        let blocks = [
            ResBlock2d::init(&mut params, "dec.block1", 1, w1, rng)?,
            ResBlock2d::init(&mut params, "dec.block2", w1, w2, rng)?,
            ResBlock2d::init(&mut params, "dec.block3", w2, w3, rng)?,
        ];
        let bottom = ResBlock2d::init(&mut params, "dec.bottom", w3, dims.bottom, rng)?;
        let up = [
            Conv2dLayer::init(&mut params, "dec.up1", dims.bottom, w3, 3, 1, rng)?,
            Conv2dLayer::init(&mut params, "dec.up2", w3, w2, 3, 1, rng)?,
            Conv2dLayer::init(&mut params, "dec.up3", w2, w1, 3, 1, rng)?,
        ];
        let mask_head = Conv2dLayer::init(&mut params, "dec.mask", w1, 1, 3, 1, rng)?;
        let fc_mu = LinearLayer::init(&mut params, "dec.mu", dims.bottom, dims.bottom, rng)?;
        let fc_logvar =
            LinearLayer::init(&mut params, "dec.logvar", dims.bottom, dims.bottom, rng)?;
        Ok(Self { params, blocks, bottom, up, mask_head, fc_mu, fc_logvar })
    }

    /// Hourglass forward: (soft mask, mu, logvar, z). `eps` of shape
    /// [batch, bottom] turns on reparameterized sampling; without it z = mu.
    fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &[NodeId],
        x: NodeId,
        eps: Option<NodeId>,
    ) -> Result<(NodeId, NodeId, NodeId, NodeId)> {
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(g, ps, h)?;
            h = g.maxpool2d(h, 2)?;
        }
        let bt = self.bottom.forward(g, ps, h)?;

        let mut m = bt;
        for c in &self.up {
            m = g.upsample_nearest2d(m, 2)?;
            m = c.forward(g, ps, m)?;
            m = g.relu(m)?;
        }
        let m = self.mask_head.forward(g, ps, m)?;
        let mhat = g.sigmoid(m)?;

        let pooled = g.global_avg_pool(bt)?;
        let mu = self.fc_mu.forward(g, ps, pooled)?;
        let logvar = self.fc_logvar.forward(g, ps, pooled)?;
        let z = match eps {
            Some(e) => {
                let half = g.scale(logvar, 0.5)?;
                let sigma = g.exp(half)?;
                let noise = g.mul(sigma, e)?;
                g.add(mu, noise)?
            }
            None => mu,
        };
        Ok((mhat, mu, logvar, z))
    }
}

struct ReconstructNet {
    params: ParamStore,
    convs: Vec<Conv2dLayer>,
    unet: ResUNet2d,
}

impl ReconstructNet {
    fn init(dims: &CodecDims, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut convs = Vec::with_capacity(dims.ups());
        let mut c_in = dims.bottom;
        for i in 0..dims.ups() {
            let c_out = (c_in / 2).max(dims.base);
            convs.push(Conv2dLayer::init(
                &mut params,
                &format!("rec.up{}", i + 1),
                c_in,
                c_out,
                3,
                1,
                rng,
            )?);
            c_in = c_out;
        }
        let unet =
            ResUNet2d::init(&mut params, "rec.unet", c_in + 1, dims.base, 1, HeadAct::Linear, rng)?;
        Ok(Self { params, convs, unet })
    }

    /// Expands z from 1x1 to full resolution, concatenates the mask, and
    /// runs the Res-UNet. Output is the full patch; the caller applies the
    /// object box.
    fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &[NodeId],
        z: NodeId,
        mask: NodeId,
    ) -> Result<NodeId> {
        let zs = g.shape(z).to_vec();
        let mut t = g.reshape(z, &[zs[0], zs[1], 1, 1])?;
        for c in &self.convs {
            t = g.upsample_nearest2d(t, 2)?;
            t = c.forward(g, ps, t)?;
            t = g.relu(t)?;
        }
        let cat = g.concat(&[t, mask])?;
        self.unet.forward(g, ps, cat)
    }
}

struct SimpleUNet {
    params: ParamStore,
    unet: ResUNet2d,
}

impl SimpleUNet {
    fn init(name: &str, dims: &CodecDims, act: HeadAct, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut params = ParamStore::new();
        let unet = ResUNet2d::init(&mut params, name, 1, dims.base, 1, act, rng)?;
        Ok(Self { params, unet })
    }
}

/// The four stage-1 networks plus sizing. Construction order fixes the
/// parameter layout, so checkpoints are interchangeable across runs.
pub struct Stage1Codec {
    decompose: DecomposeNet,
    reconstruct: ReconstructNet,
    refine: SimpleUNet,
    seg: SimpleUNet,
    dims: CodecDims,
}

const CKPT_FILES: [&str; 4] = ["f_decompose.svwt", "f_reconstruct.svwt", "f_refine.svwt", "f_seg.svwt"];

impl Stage1Codec {
    pub fn init(seed: u64) -> Result<Self> {
        Self::with_dims(FULL_CODEC, seed)
    }

    pub fn with_dims(dims: CodecDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = stream_rng(seed, "codec/init");
        Ok(Self {
            decompose: DecomposeNet::init(&dims, &mut rng)?,
            reconstruct: ReconstructNet::init(&dims, &mut rng)?,
            refine: SimpleUNet::init("ref.unet", &dims, HeadAct::Linear, &mut rng)?,
            seg: SimpleUNet::init("seg.unet", &dims, HeadAct::Sigmoid, &mut rng)?,
            dims,
        })
    }

    pub fn dims_patch(&self) -> usize {
        self.dims.patch
    }

    pub fn residual_dim(&self) -> usize {
        self.dims.bottom
    }

    /// Writes one checkpoint per network into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::format(format!("codec save: {e}")))?;
        for (store, file) in self.stores().into_iter().zip(CKPT_FILES) {
            store.save(&dir.join(file))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>, dims: CodecDims) -> Result<Self> {
        let mut codec = Self::with_dims(dims, 0)?;
        let dir = dir.as_ref();
        for (store, file) in codec.stores_mut().into_iter().zip(CKPT_FILES) {
            store.load(&dir.join(file))?;
        }
        Ok(codec)
    }

    fn stores(&self) -> [&ParamStore; 4] {
        [
            &self.decompose.params,
            &self.reconstruct.params,
            &self.refine.params,
            &self.seg.params,
        ]
    }

    fn stores_mut(&mut self) -> [&mut ParamStore; 4] {
        [
            &mut self.decompose.params,
            &mut self.reconstruct.params,
            &mut self.refine.params,
            &mut self.seg.params,
        ]
    }

    fn check_patch(&self, img: &[f32], what: &str) -> Result<()> {
        let n = self.dims.patch * self.dims.patch;
        if img.len() != n {
            return Err(Error::shape(format!("{what}: expected {n} pixels, got {}", img.len())));
        }
        Ok(())
    }

    /// Decomposes a patch already zeroed outside its object box. Pass a
    /// generator to sample z by reparameterization; otherwise z = mu.
    pub fn decompose(
        &self,
        x_masked: &[f32],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Vec<f32>, ResidualCode)> {
        self.check_patch(x_masked, "decompose")?;
        let p = self.dims.patch;
        let mut g = Graph::<f32>::new();
        let ps = self.decompose.params.leaves(&mut g, false)?;
        let scaled: Vec<f32> = x_masked.iter().map(|v| v / 255.0).collect();
        let x = g.constant(Tensor::from_vec(&[1, 1, p, p], scaled)?)?;
        let eps = match rng.as_deref_mut() {
            Some(r) => {
                let mut e = Tensor::zeros(&[1, self.dims.bottom]);
                for v in e.data_mut() {
                    *v = StandardNormal.sample(r);
                }
                Some(g.constant(e)?)
            }
            None => None,
        };
        let (mhat, mu, logvar, z) = self.decompose.forward(&mut g, &ps, x, eps)?;
        let code = ResidualCode {
            z: g.value(z).data().to_vec(),
            mu: g.value(mu).data().to_vec(),
            logvar: g.value(logvar).data().to_vec(),
        };
        let m = g.value(mhat).data().to_vec();
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::train("decompose: non-finite activations"));
        }
        Ok((m, code))
    }

    /// Rebuilds the object-region image from a soft mask and residual code;
    /// the result is zero outside the object box.
    pub fn reconstruct_object(
        &self,
        mask: &[f32],
        z: &[f32],
        region: &ObjectRegion,
    ) -> Result<Vec<f32>> {
        self.check_patch(mask, "reconstruct_object mask")?;
        if z.len() != self.dims.bottom {
            return Err(Error::shape(format!(
                "reconstruct_object: z must be {}-d, got {}",
                self.dims.bottom,
                z.len()
            )));
        }
        let p = self.dims.patch;
        let mut g = Graph::<f32>::new();
        let ps = self.reconstruct.params.leaves(&mut g, false)?;
        let zn = g.constant(Tensor::from_vec(&[1, self.dims.bottom], z.to_vec())?)?;
        let mn = g.constant(Tensor::from_vec(&[1, 1, p, p], mask.to_vec())?)?;
        let out = self.reconstruct.forward(&mut g, &ps, zn, mn)?;
        let omega = region.omega_mask();
        Ok(g.value(out)
            .data()
            .iter()
            .zip(&omega)
            .map(|(v, w)| v * w * 255.0)
            .collect())
    }

    /// Fuses a reconstructed object onto a background through the given
    /// blend weights (the object box in stage 1, the soft mask in stage 2)
    /// and refines the result into a full patch.
    pub fn refine_and_blend(
        &self,
        xhat_obj: &[f32],
        x_background: &[f32],
        blend: &[f32],
    ) -> Result<Vec<f32>> {
        self.check_patch(xhat_obj, "refine_and_blend object")?;
        self.check_patch(x_background, "refine_and_blend background")?;
        self.check_patch(blend, "refine_and_blend weights")?;
        let p = self.dims.patch;
        let fused: Vec<f32> = xhat_obj
            .iter()
            .zip(x_background)
            .zip(blend)
            .map(|((o, b), w)| (o * w + b * (1.0 - w)) / 255.0)
            .collect();
        let mut g = Graph::<f32>::new();
        let ps = self.refine.params.leaves(&mut g, false)?;
        let x = g.constant(Tensor::from_vec(&[1, 1, p, p], fused)?)?;
        let out = self.refine.unet.forward(&mut g, &ps, x)?;
        Ok(g.value(out).data().iter().map(|v| v * 255.0).collect())
    }

    /// Runs the full training-time pipeline on a batch and reads back every
    /// intermediate plus the per-term graph losses.
    ///
    /// Inputs arrive in API units ([0, 255] images, binary masks, {0,1}
    /// object-box indicators); all returned tensors stay in network units
    /// (images divided by 255) so they can be replayed against
    /// [`stage1_loss`] verbatim. `eps` of length batch x residual_dim turns
    /// on reparameterized sampling; `None` evaluates at z = mu.
    pub fn forward_batch(
        &self,
        x: &[f32],
        m: &[u8],
        omega: &[f32],
        eps: Option<&[f32]>,
        w: &LossWeights,
    ) -> Result<Stage1Forward> {
        let p = self.dims.patch;
        let npix = p * p;
        if x.is_empty() || x.len() % npix != 0 {
            return Err(Error::shape("forward_batch: image length must be a batch of patches"));
        }
        let b = x.len() / npix;
        if m.len() != x.len() || omega.len() != x.len() {
            return Err(Error::shape("forward_batch: mask and box lengths must match"));
        }
        let mut g = Graph::<f32>::new();
        let ps_dec = self.decompose.params.leaves(&mut g, false)?;
        let ps_rec = self.reconstruct.params.leaves(&mut g, false)?;
        let ps_ref = self.refine.params.leaves(&mut g, false)?;
        let ps_seg = self.seg.params.leaves(&mut g, false)?;
        let xs: Vec<f32> = x.iter().map(|v| v / 255.0).collect();
        let ms: Vec<f32> = m.iter().map(|&v| v as f32).collect();
        let xn = g.constant(Tensor::from_vec(&[b, 1, p, p], xs.clone())?)?;
        let mn = g.constant(Tensor::from_vec(&[b, 1, p, p], ms)?)?;
        let on = g.constant(Tensor::from_vec(&[b, 1, p, p], omega.to_vec())?)?;
        let eps_vec = match eps {
            Some(e) => {
                if e.len() != b * self.dims.bottom {
                    return Err(Error::shape("forward_batch: eps length mismatch"));
                }
                e.to_vec()
            }
            None => vec![0.0; b * self.dims.bottom],
        };
        let en = g.constant(Tensor::from_vec(&[b, self.dims.bottom], eps_vec)?)?;
        let nodes = stage1_graph(
            &mut g,
            &self.decompose,
            &self.reconstruct,
            &self.refine.unet,
            &self.seg.unet,
            &ps_dec,
            &ps_rec,
            &ps_ref,
            &ps_seg,
            xn,
            mn,
            on,
            en,
            w,
        )?;
        let scalar = |g: &Graph<f32>, n: NodeId| g.value(n).data()[0] as f64;
        Ok(Stage1Forward {
            x: xs,
            mhat: g.value(nodes.mhat).data().to_vec(),
            xhat_obj: g.value(nodes.xhat_obj).data().to_vec(),
            xfinal: g.value(nodes.xfinal).data().to_vec(),
            mfinal: g.value(nodes.mfinal).data().to_vec(),
            mu: g.value(nodes.mu).data().to_vec(),
            logvar: g.value(nodes.logvar).data().to_vec(),
            fused: g.value(nodes.fused).data().to_vec(),
            loss: Stage1LossBreakdown {
                local: scalar(&g, nodes.local),
                global: scalar(&g, nodes.global),
                dice: scalar(&g, nodes.dice),
                kl: scalar(&g, nodes.kl),
                total: scalar(&g, nodes.total),
            },
        })
    }

    /// Segments a refined patch; returns the soft mask.
    pub fn segment_final(&self, x_final: &[f32]) -> Result<Vec<f32>> {
        self.check_patch(x_final, "segment_final")?;
        let p = self.dims.patch;
        let mut g = Graph::<f32>::new();
        let ps = self.seg.params.leaves(&mut g, false)?;
        let scaled: Vec<f32> = x_final.iter().map(|v| v / 255.0).collect();
        let x = g.constant(Tensor::from_vec(&[1, 1, p, p], scaled)?)?;
        let out = self.seg.unet.forward(&mut g, &ps, x)?;
        Ok(g.value(out).data().to_vec())
    }
}

/// Batch outputs of the full stage-1 pipeline in network units.
#[derive(Debug, Clone)]
pub struct Stage1Forward {
    /// Input images divided by 255, exactly as the networks saw them.
    pub x: Vec<f32>,
    pub mhat: Vec<f32>,
    pub xhat_obj: Vec<f32>,
    pub xfinal: Vec<f32>,
    pub mfinal: Vec<f32>,
    pub mu: Vec<f32>,
    pub logvar: Vec<f32>,
    /// The fusion input handed to the refiner: object inside the box,
    /// original background outside.
    pub fused: Vec<f32>,
    pub loss: Stage1LossBreakdown,
}

/// Per-term stage-1 loss values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage1LossBreakdown {
    pub local: f64,
    pub global: f64,
    pub dice: f64,
    pub kl: f64,
    pub total: f64,
}

/// Reference (scalar-loop) stage-1 loss over a batch of flattened patches.
///
/// local: mean |x_hat * omega - x * omega| over every pixel; global: mean
/// |x_final - x|; dice: (1 - dice(m_hat, m)) + (1 - dice(m_final, m)) with
/// per-sample dice averaged over the batch; kl: closed-form KL to the unit
/// normal, summed per sample, averaged over the batch. Total applies the
/// stage-1 weights.
#[allow(clippy::too_many_arguments)]
pub fn stage1_loss(
    x: &[f32],
    xhat: &[f32],
    xfinal: &[f32],
    m: &[f32],
    mhat: &[f32],
    mfinal: &[f32],
    mu: &[f32],
    logvar: &[f32],
    w: &LossWeights,
    omega: &[f32],
    batch: usize,
) -> Result<Stage1LossBreakdown> {
    let n = x.len();
    if n == 0 || batch == 0 || n % batch != 0 {
        return Err(Error::shape("stage1_loss: bad batch layout"));
    }
    if [xhat.len(), xfinal.len(), m.len(), mhat.len(), mfinal.len(), omega.len()]
        .iter()
        .any(|&l| l != n)
    {
        return Err(Error::shape("stage1_loss: operand lengths disagree"));
    }
    if mu.len() != logvar.len() || mu.len() % batch != 0 {
        return Err(Error::shape("stage1_loss: latent lengths disagree"));
    }
    let per = n / batch;
    let mut local = 0.0f64;
    let mut global = 0.0f64;
    for i in 0..n {
        local += ((xhat[i] * omega[i]) as f64 - (x[i] * omega[i]) as f64).abs();
        global += (xfinal[i] as f64 - x[i] as f64).abs();
    }
    local /= n as f64;
    global /= n as f64;

    let mut dice = 0.0f64;
    for b in 0..batch {
        let s = b * per;
        for pred in [&mhat[s..s + per], &mfinal[s..s + per]] {
            let mut inter = 0.0f64;
            let mut sa = 0.0f64;
            let mut sb = 0.0f64;
            for i in 0..per {
                inter += pred[i] as f64 * m[s + i] as f64;
                sa += pred[i] as f64;
                sb += m[s + i] as f64;
            }
            dice += 1.0 - 2.0 * inter / (sa + sb + DICE_EPS);
        }
    }
    dice /= batch as f64;

    let mut kl = 0.0f64;
    for (mv, lv) in mu.iter().zip(logvar.iter()) {
        let (mv, lv) = (*mv as f64, *lv as f64);
        kl += -0.5 * (1.0 + lv - mv * mv - lv.exp());
    }
    kl /= batch as f64;

    let total = w.lambda1 * local + w.lambda2 * global + w.lambda3 * dice + w.lambda_dkl * kl;
    if !total.is_finite() {
        return Err(Error::train("stage1_loss: non-finite total"));
    }
    Ok(Stage1LossBreakdown { local, global, dice, kl, total })
}

/// Everything the training step wires together, exposed so tests and the
/// gradient checker can rebuild the exact training graph.
struct Stage1GraphLoss {
    total: NodeId,
    local: NodeId,
    global: NodeId,
    dice: NodeId,
    kl: NodeId,
    mhat: NodeId,
    mfinal: NodeId,
    xfinal: NodeId,
    xhat_obj: NodeId,
    mu: NodeId,
    logvar: NodeId,
    fused: NodeId,
}

#[allow(clippy::too_many_arguments)]
fn stage1_graph<S: Scalar>(
    g: &mut Graph<S>,
    dec: &DecomposeNet,
    rec: &ReconstructNet,
    refine: &ResUNet2d,
    seg: &ResUNet2d,
    ps_dec: &[NodeId],
    ps_rec: &[NodeId],
    ps_ref: &[NodeId],
    ps_seg: &[NodeId],
    x: NodeId,
    m: NodeId,
    omega: NodeId,
    eps: NodeId,
    w: &LossWeights,
) -> Result<Stage1GraphLoss> {
    let xm = g.mul(x, omega)?;
    let (mhat, mu, logvar, z) = dec.forward(g, ps_dec, xm, Some(eps))?;
    let xhat = rec.forward(g, ps_rec, z, mhat)?;
    let xhat_obj = g.mul(xhat, omega)?;

    // Fusion: reconstructed object inside the box, untouched background out.
    let sh = g.shape(omega).to_vec();
    let numel: usize = sh.iter().product();
    let ones = g.constant(Tensor::from_vec(sh, vec![S::ONE; numel])?)?;
    let inv = g.sub(ones, omega)?;
    let bg = g.mul(x, inv)?;
    let fused = g.add(xhat_obj, bg)?;
    let xfinal = refine.forward(g, ps_ref, fused)?;
    let mfinal = seg.forward(g, ps_seg, xfinal)?;
    let fused_node = fused;

    let ldiff = g.sub(xhat_obj, xm)?;
    let labs = g.abs(ldiff)?;
    let local = g.mean_all(labs)?;

    let gdiff = g.sub(xfinal, x)?;
    let gabs = g.abs(gdiff)?;
    let global = g.mean_all(gabs)?;

    let d1 = dice_loss(g, mhat, m)?;
    let d2 = dice_loss(g, mfinal, m)?;
    let dice = g.add(d1, d2)?;

    let mu2 = g.square(mu)?;
    let ev = g.exp(logvar)?;
    let inner = g.sub(logvar, mu2)?;
    let inner = g.sub(inner, ev)?;
    let inner = g.add_scalar(inner, 1.0)?;
    let per_row = g.sum_trailing(inner)?;
    let klm = g.mean_all(per_row)?;
    let kl = g.scale(klm, -0.5)?;

    let t1 = g.scale(local, w.lambda1)?;
    let t2 = g.scale(global, w.lambda2)?;
    let t3 = g.scale(dice, w.lambda3)?;
    let t4 = g.scale(kl, w.lambda_dkl)?;
    let s = g.add(t1, t2)?;
    let s = g.add(s, t3)?;
    let total = g.add(s, t4)?;
    Ok(Stage1GraphLoss {
        total,
        local,
        global,
        dice,
        kl,
        mhat,
        mfinal,
        xfinal,
        xhat_obj,
        mu,
        logvar,
        fused: fused_node,
    })
}

/// Mean over the batch of (1 - dice(pred, truth)) with per-sample sums.
fn dice_loss<S: Scalar>(g: &mut Graph<S>, pred: NodeId, truth: NodeId) -> Result<NodeId> {
    let shape = g.shape(pred).to_vec();
    let b = shape[0];
    let flat: usize = shape[1..].iter().product();
    let pf = g.reshape(pred, &[b, flat])?;
    let tf = g.reshape(truth, &[b, flat])?;
    let prod = g.mul(pf, tf)?;
    let inter = g.sum_trailing(prod)?;
    let sa = g.sum_trailing(pf)?;
    let sb = g.sum_trailing(tf)?;
    let num = g.scale(inter, 2.0)?;
    let den = g.add(sa, sb)?;
    let den = g.add_scalar(den, DICE_EPS)?;
    let dice = g.div(num, den)?;
    let neg = g.neg(dice)?;
    let one_minus = g.add_scalar(neg, 1.0)?;
    g.mean_all(one_minus)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            batch_size: 16,
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

/// One row per epoch of the stage-1 loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage1EpochLoss {
    pub epoch: usize,
    pub total: f64,
    pub local: f64,
    pub global: f64,
    pub dice: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Stage1Report {
    pub history: Vec<Stage1EpochLoss>,
}

impl Stage1Report {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::from("epoch,total,local,global,dice,kl\n");
        for r in &self.history {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch, r.total, r.local, r.global, r.dice, r.kl
            ));
        }
        std::fs::write(path.as_ref(), out)
            .map_err(|e| Error::format(format!("loss csv: {e}")))
    }
}

/// Joint stage-1 training of all four networks. Every dataset patch must
/// carry a ground-truth mask and contain an object (regions are derived
/// from the mask up front). Images arrive in [0, 255].
pub fn train_stage1(
    dataset: &[Patch2d],
    cfg: &Stage1Config,
) -> Result<(Stage1Codec, Stage1Report)> {
    train_stage1_with_dims(dataset, cfg, FULL_CODEC)
}

pub fn train_stage1_with_dims(
    dataset: &[Patch2d],
    cfg: &Stage1Config,
    dims: CodecDims,
) -> Result<(Stage1Codec, Stage1Report)> {
    if dataset.is_empty() {
        return Err(Error::train("train_stage1: empty dataset"));
    }
    if cfg.epochs == 0 {
        return Err(Error::config("train_stage1: epochs must be at least 1"));
    }
    let p = dims.patch;
    let npix = p * p;
    let mut xs = Vec::with_capacity(dataset.len());
    let mut ms = Vec::with_capacity(dataset.len());
    let mut omegas = Vec::with_capacity(dataset.len());
    for (i, item) in dataset.iter().enumerate() {
        if item.pixels.len() != npix {
            return Err(Error::shape(format!(
                "train_stage1: patch {i} has {} pixels, expected {npix}",
                item.pixels.len()
            )));
        }
        let mask = item
            .mask
            .as_ref()
            .ok_or_else(|| Error::train(format!("train_stage1: patch {i} has no mask")))?;
        let region = compute_regions(mask, p)
            .map_err(|e| Error::train(format!("train_stage1: patch {i}: {e}")))?;
        xs.push(item.pixels.iter().map(|v| v / 255.0).collect::<Vec<f32>>());
        ms.push(mask.iter().map(|&v| v as f32).collect::<Vec<f32>>());
        omegas.push(region.omega_mask());
    }

    let mut codec = Stage1Codec::with_dims(dims, cfg.seed)?;
    let mut opts: Vec<Amsgrad> = (0..4).map(|_| Amsgrad::new(cfg.lr)).collect();
    let mut rng = stream_rng(cfg.seed, "codec/train");
    let batch = cfg.batch_size.clamp(1, dataset.len());
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut sums = [0.0f64; 5];
        let mut seen = 0usize;
        for chunk in order.chunks(batch) {
            let b = chunk.len();
            let mut xv = Vec::with_capacity(b * npix);
            let mut mv = Vec::with_capacity(b * npix);
            let mut ov = Vec::with_capacity(b * npix);
            for &i in chunk {
                xv.extend_from_slice(&xs[i]);
                mv.extend_from_slice(&ms[i]);
                ov.extend_from_slice(&omegas[i]);
            }
            let mut eps_t = Tensor::zeros(&[b, dims.bottom]);
            for e in eps_t.data_mut() {
                *e = StandardNormal.sample(&mut rng);
            }

            let mut g = Graph::<f32>::new();
            let ps_dec = codec.decompose.params.leaves(&mut g, true)?;
            let ps_rec = codec.reconstruct.params.leaves(&mut g, true)?;
            let ps_ref = codec.refine.params.leaves(&mut g, true)?;
            let ps_seg = codec.seg.params.leaves(&mut g, true)?;
            let x = g.constant(Tensor::from_vec(&[b, 1, p, p], xv)?)?;
            let m = g.constant(Tensor::from_vec(&[b, 1, p, p], mv)?)?;
            let om = g.constant(Tensor::from_vec(&[b, 1, p, p], ov)?)?;
            let eps = g.constant(eps_t)?;

            let nodes = stage1_graph(
                &mut g,
                &codec.decompose,
                &codec.reconstruct,
                &codec.refine.unet,
                &codec.seg.unet,
                &ps_dec,
                &ps_rec,
                &ps_ref,
                &ps_seg,
                x,
                m,
                om,
                eps,
                &cfg.weights,
            )?;

            let total = g.value(nodes.total).data()[0] as f64;
            if !total.is_finite() {
                return Err(Error::train(format!(
                    "train_stage1: loss diverged at epoch {epoch} ({total})"
                )));
            }
            for (acc, node) in sums.iter_mut().zip([
                nodes.total,
                nodes.local,
                nodes.global,
                nodes.dice,
                nodes.kl,
            ]) {
                *acc += g.value(node).data()[0] as f64 * b as f64;
            }
            seen += b;

            // One reverse pass over the union of leaves, then split the
            // gradients back out per network for the four optimizers.
            let splits = [ps_dec.len(), ps_rec.len(), ps_ref.len(), ps_seg.len()];
            let all: Vec<NodeId> = [&ps_dec[..], &ps_rec, &ps_ref, &ps_seg].concat();
            let grad_ids = g.backward(nodes.total, &all)?;
            let mut at = 0usize;
            for (store_i, len) in splits.into_iter().enumerate() {
                let slice = &grad_ids[at..at + len];
                at += len;
                let store = match store_i {
                    0 => &mut codec.decompose.params,
                    1 => &mut codec.reconstruct.params,
                    2 => &mut codec.refine.params,
                    _ => &mut codec.seg.params,
                };
                let grad_tensors = store.grads_from(&g, slice)?;
                opts[store_i].step(store.tensors_mut(), &grad_tensors)?;
            }
        }
        let inv = 1.0 / seen as f64;
        history.push(Stage1EpochLoss {
            epoch: epoch + 1,
            total: sums[0] * inv,
            local: sums[1] * inv,
            global: sums[2] * inv,
            dice: sums[3] * inv,
            kl: sums[4] * inv,
        });
    }
    Ok((codec, Stage1Report { history }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Program};

    /// Small enough for exhaustive gradient checks, big enough that object
    /// boxes do not degenerate to the whole patch.
    const TINY: CodecDims = CodecDims { patch: 16, widths: [2, 3, 4], bottom: 8, base: 2 };

    fn blob_mask(side: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> Vec<u8> {
        let mut m = vec![0u8; side * side];
        for y in y0..y1 {
            for x in x0..x1 {
                m[y * side + x] = 1;
            }
        }
        m
    }

    /// Deterministic, smooth, kink-free values in (lo, hi).
    fn smooth(n: usize, lo: f32, hi: f32) -> Vec<f32> {
        (0..n)
            .map(|i| {
                let t = ((i * 2654435761 + 987) % 10000) as f32 / 10000.0;
                lo + (hi - lo) * (0.1 + 0.8 * t)
            })
            .collect()
    }

    #[test]
    fn regions_pad_and_clip_to_patch() {
        let m = blob_mask(64, 10, 9, 14, 12);
        let r = compute_regions(&m, 64).unwrap();
        assert_eq!(r.omega, [6, 5, 18, 16]);
        assert_eq!(r.omega_plus, [0, 0, 26, 24]);

        let edge = blob_mask(64, 0, 0, 3, 3);
        let re = compute_regions(&edge, 64).unwrap();
        assert_eq!(re.omega, [0, 0, 7, 7]);
        assert_eq!(re.omega_plus, [0, 0, 15, 15]);
    }

    #[test]
    fn ring_matches_brute_force_dilation() {
        let m = blob_mask(32, 12, 8, 17, 15);
        let r = compute_regions(&m, 32).unwrap();
        let rad2 = (RING_RADIUS * RING_RADIUS) as isize;
        for y in 0..32isize {
            for x in 0..32isize {
                let mut near = false;
                'scan: for yy in 0..32isize {
                    for xx in 0..32isize {
                        if m[(yy * 32 + xx) as usize] != 0
                            && (xx - x) * (xx - x) + (yy - y) * (yy - y) <= rad2
                        {
                            near = true;
                            break 'scan;
                        }
                    }
                }
                let expect = u8::from(near && m[(y * 32 + x) as usize] == 0);
                assert_eq!(r.ring[(y * 32 + x) as usize], expect, "at ({x},{y})");
            }
        }
        assert!(r.ring.iter().zip(&m).all(|(&rv, &mv)| rv == 0 || mv == 0));
    }

    #[test]
    fn empty_mask_has_no_regions() {
        let err = compute_regions(&vec![0u8; 64 * 64], 64).unwrap_err();
        assert!(err.to_string().contains("empty mask"));
    }

    #[test]
    fn decompose_mask_is_sigmoid_and_z_is_mu_without_sampling() {
        let codec = Stage1Codec::with_dims(TINY, 3).unwrap();
        let x = smooth(16 * 16, 0.0, 255.0);
        let (m1, code1) = codec.decompose(&x, None).unwrap();
        let (m2, code2) = codec.decompose(&x, None).unwrap();
        assert!(m1.iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(code1.z.len(), TINY.bottom);
        assert_eq!(code1.z, code1.mu);
        assert_eq!(m1, m2);
        assert_eq!(code1.z, code2.z);

        let mut rng = stream_rng(9, "codec-test/eps");
        let (_, sampled) = codec.decompose(&x, Some(&mut rng)).unwrap();
        assert_ne!(sampled.z, sampled.mu);
    }

    #[test]
    fn full_scale_residual_dim_is_256_via_six_doublings() {
        assert_eq!(FULL_CODEC.ups(), 6);
        assert_eq!(1usize << FULL_CODEC.ups(), FULL_CODEC.patch);
        assert_eq!(FULL_CODEC.bottom, 256);
        let codec = Stage1Codec::init(1).unwrap();
        let x = smooth(64 * 64, 0.0, 255.0);
        let (mhat, code) = codec.decompose(&x, None).unwrap();
        assert_eq!(code.z.len(), 256);
        assert_eq!(mhat.len(), 64 * 64);
        assert!(mhat.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn reconstruct_is_deterministic_and_confined_to_the_box() {
        let codec = Stage1Codec::with_dims(TINY, 5).unwrap();
        let mask = blob_mask(16, 2, 3, 6, 7);
        let region = compute_regions(&mask, 16).unwrap();
        let soft: Vec<f32> = mask.iter().map(|&v| v as f32 * 0.9 + 0.05).collect();
        let z = smooth(TINY.bottom, -1.0, 1.0);
        let a = codec.reconstruct_object(&soft, &z, &region).unwrap();
        let b = codec.reconstruct_object(&soft, &z, &region).unwrap();
        assert_eq!(a, b);
        let omega = region.omega_mask();
        for (i, &v) in a.iter().enumerate() {
            if omega[i] == 0.0 {
                assert_eq!(v, 0.0, "pixel {i} leaked outside the object box");
            }
        }
        let z2 = smooth(TINY.bottom, -0.5, 1.5);
        let c = codec.reconstruct_object(&soft, &z2, &region).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn refine_and_segment_are_finite_on_random_input() {
        let codec = Stage1Codec::with_dims(TINY, 7).unwrap();
        let x = smooth(256, 0.0, 255.0);
        let obj = smooth(256, 0.0, 200.0);
        let mask = blob_mask(16, 4, 4, 9, 9);
        let blend = compute_regions(&mask, 16).unwrap().omega_mask();
        let refined = codec.refine_and_blend(&obj, &x, &blend).unwrap();
        assert_eq!(refined.len(), 256);
        assert!(refined.iter().all(|v| v.is_finite()));
        let seg = codec.segment_final(&refined).unwrap();
        assert!(seg.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    fn batch_inputs(b: usize) -> (Vec<f32>, Vec<u8>, Vec<f32>, Vec<f32>) {
        let npix = TINY.patch * TINY.patch;
        let mut xs = Vec::new();
        let mut ms = Vec::new();
        let mut os = Vec::new();
        for i in 0..b {
            xs.extend(smooth(npix, 10.0 * i as f32, 240.0));
            let m = blob_mask(TINY.patch, 2 + i, 3, 6 + i, 8);
            os.extend(compute_regions(&m, TINY.patch).unwrap().omega_mask());
            ms.extend(m);
        }
        let eps = smooth(b * TINY.bottom, -1.2, 1.2);
        (xs, ms, os, eps)
    }

    #[test]
    fn background_composition_identity_is_exact() {
        let codec = Stage1Codec::with_dims(TINY, 11).unwrap();
        let (xs, ms, os, eps) = batch_inputs(2);
        let fwd = codec
            .forward_batch(&xs, &ms, &os, Some(&eps), &LossWeights::default())
            .unwrap();
        for i in 0..fwd.x.len() {
            if os[i] == 0.0 {
                assert_eq!(fwd.fused[i], fwd.x[i], "background pixel {i} changed");
                assert_eq!(fwd.xhat_obj[i], 0.0);
            }
        }
    }

    #[test]
    fn graph_loss_terms_match_the_scalar_oracle() {
        let codec = Stage1Codec::with_dims(TINY, 13).unwrap();
        let (xs, ms, os, eps) = batch_inputs(3);
        let w = LossWeights {
            lambda1: 0.7,
            lambda2: 1.3,
            lambda3: 0.9,
            lambda_dkl: 0.01,
            ..Default::default()
        };
        let fwd = codec.forward_batch(&xs, &ms, &os, Some(&eps), &w).unwrap();
        let m_f: Vec<f32> = ms.iter().map(|&v| v as f32).collect();
        let oracle = stage1_loss(
            &fwd.x,
            &fwd.xhat_obj,
            &fwd.xfinal,
            &m_f,
            &fwd.mhat,
            &fwd.mfinal,
            &fwd.mu,
            &fwd.logvar,
            &w,
            &os,
            3,
        )
        .unwrap();
        for (name, got, want) in [
            ("local", fwd.loss.local, oracle.local),
            ("global", fwd.loss.global, oracle.global),
            ("dice", fwd.loss.dice, oracle.dice),
            ("kl", fwd.loss.kl, oracle.kl),
            ("total", fwd.loss.total, oracle.total),
        ] {
            let err = (got - want).abs() / want.abs().max(1.0);
            assert!(err < 1e-5, "{name}: graph {got} vs oracle {want} (err {err})");
        }
    }

    #[test]
    fn perfect_inputs_zero_the_loss() {
        let npix = 64;
        let x = smooth(npix, 0.0, 1.0);
        let m: Vec<f32> = blob_mask(8, 2, 2, 6, 6).iter().map(|&v| v as f32).collect();
        let omega = vec![1.0f32; npix];
        let w = LossWeights::default();
        let zeros = vec![0.0f32; 16];
        let b = stage1_loss(&x, &x, &x, &m, &m, &m, &zeros, &zeros, &w, &omega, 1).unwrap();
        assert!(b.total < 1e-6, "total {}", b.total);
        assert!(b.dice < 1e-6, "dice term {}", b.dice);
        assert_eq!(b.kl, 0.0);
    }

    #[test]
    fn reparameterization_gradients_are_exact() {
        let mut g = Graph::<f64>::new();
        let mu = g.leaf(Tensor::from_vec(&[1, 4], vec![0.3, -0.7, 1.1, 0.0]).unwrap(), true).unwrap();
        let lv = g.leaf(Tensor::from_vec(&[1, 4], vec![-0.2, 0.4, 0.0, 1.3]).unwrap(), true).unwrap();
        let eps_v = [0.9, -1.4, 0.2, 2.0];
        let eps = g.constant(Tensor::from_vec(&[1, 4], eps_v.to_vec()).unwrap()).unwrap();
        let half = g.scale(lv, 0.5).unwrap();
        let sigma = g.exp(half).unwrap();
        let noise = g.mul(sigma, eps).unwrap();
        let z = g.add(mu, noise).unwrap();
        let s = g.sum_all(z).unwrap();
        let grads = g.backward(s, &[mu, lv]).unwrap();
        let dmu = g.value(grads[0]).data().to_vec();
        let dlv = g.value(grads[1]).data().to_vec();
        let zv = g.value(z).data().to_vec();
        let muv = g.value(mu).data().to_vec();
        for i in 0..4 {
            assert!((dmu[i] - 1.0).abs() < 1e-12);
            let expect = (zv[i] - muv[i]) / 2.0;
            assert!((dlv[i] - expect).abs() < 1e-12, "dlv {} vs {}", dlv[i], expect);
        }
    }

    #[test]
    fn checkpoints_reload_to_identical_loss() {
        let dir = tempfile::tempdir().unwrap();
        let codec = Stage1Codec::with_dims(TINY, 17).unwrap();
        let (xs, ms, os, eps) = batch_inputs(2);
        let w = LossWeights::default();
        let before = codec.forward_batch(&xs, &ms, &os, Some(&eps), &w).unwrap();
        codec.save(dir.path()).unwrap();
        let reloaded = Stage1Codec::load(dir.path(), TINY).unwrap();
        let after = reloaded.forward_batch(&xs, &ms, &os, Some(&eps), &w).unwrap();
        assert_eq!(before.loss.total, after.loss.total);
        assert_eq!(before.mhat, after.mhat);
    }

    #[test]
    fn train_smoke_logs_all_terms() {
        let npix = TINY.patch * TINY.patch;
        let mut data = Vec::new();
        for i in 0..6 {
            let m = blob_mask(TINY.patch, 2 + i % 3, 3 + i % 2, 7 + i % 3, 8 + i % 2);
            let mut px = smooth(npix, 20.0, 90.0);
            for (p, &mv) in px.iter_mut().zip(&m) {
                if mv != 0 {
                    *p += 120.0;
                }
            }
            data.push(Patch2d { pixels: px, mask: Some(m) });
        }
        let cfg = Stage1Config { epochs: 3, batch_size: 3, seed: 2, ..Default::default() };
        let (_, report) = train_stage1_with_dims(&data, &cfg, TINY).unwrap();
        assert_eq!(report.history.len(), 3);
        for row in &report.history {
            for v in [row.total, row.local, row.global, row.dice, row.kl] {
                assert!(v.is_finite());
            }
        }
        let csv = tempfile::NamedTempFile::new().unwrap();
        report.write_csv(csv.path()).unwrap();
        let text = std::fs::read_to_string(csv.path()).unwrap();
        assert!(text.starts_with("epoch,total,local,global,dice,kl\n"));
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn training_rejects_missing_masks_and_empty_data() {
        let cfg = Stage1Config::default();
        assert!(train_stage1_with_dims(&[], &cfg, TINY).is_err());
        let patch = Patch2d { pixels: vec![0.0; 256], mask: None };
        match train_stage1_with_dims(&[patch], &cfg, TINY) {
            Err(e) => assert!(e.to_string().contains("no mask")),
            Ok(_) => panic!("maskless patch must be rejected"),
        }
    }

    struct Stage1Probe<'a> {
        codec: &'a Stage1Codec,
        splits: [usize; 4],
        x: Vec<f64>,
        m: Vec<f64>,
        omega: Vec<f64>,
        eps: Vec<f64>,
        w: LossWeights,
    }

    impl Program for Stage1Probe<'_> {
        fn build<S: Scalar>(&self, g: &mut Graph<S>, inputs: &[NodeId]) -> Result<NodeId> {
            let p = self.codec.dims.patch;
            let b = self.x.len() / (p * p);
            let cast = |v: &[f64]| v.iter().map(|&x| S::from_f64(x)).collect::<Vec<S>>();
            let x = g.constant(Tensor::from_vec(&[b, 1, p, p], cast(&self.x))?)?;
            let m = g.constant(Tensor::from_vec(&[b, 1, p, p], cast(&self.m))?)?;
            let om = g.constant(Tensor::from_vec(&[b, 1, p, p], cast(&self.omega))?)?;
            let eps = g.constant(Tensor::from_vec(
                &[b, self.codec.dims.bottom],
                cast(&self.eps),
            )?)?;
            let mut at = 0usize;
            let mut groups: Vec<&[NodeId]> = Vec::new();
            for len in self.splits {
                groups.push(&inputs[at..at + len]);
                at += len;
            }
            let nodes = stage1_graph(
                g,
                &self.codec.decompose,
                &self.codec.reconstruct,
                &self.codec.refine.unet,
                &self.codec.seg.unet,
                groups[0],
                groups[1],
                groups[2],
                groups[3],
                x,
                m,
                om,
                eps,
                &self.w,
            )?;
            Ok(nodes.total)
        }
    }

    /// Zero-init biases leave the masked-out background exactly on relu
    /// kinks (preactivation 0), where central differences are one-sided.
    /// Offsetting every coordinate by at least 0.02 moves the whole check
    /// to a generic point without touching the builders under test.
    fn generic_point(codec: &Stage1Codec) -> Vec<Tensor<f64>> {
        let mut out: Vec<Tensor<f64>> = codec
            .stores()
            .iter()
            .flat_map(|s| s.tensors().iter().map(|t| t.cast::<f64>()))
            .collect();
        let mut k = 0usize;
        for t in &mut out {
            for v in t.data_mut() {
                let u = ((k.wrapping_mul(2654435761) + 77) % 1000) as f64 / 1000.0 - 0.5;
                *v += if u >= 0.0 { 0.02 + 0.08 * u } else { -0.02 + 0.08 * u };
                k += 1;
            }
        }
        out
    }

    #[test]
    fn full_stage1_loss_gradient_checks() {
        let codec = Stage1Codec::with_dims(TINY, 23).unwrap();
        let stores = codec.stores();
        let splits = [stores[0].len(), stores[1].len(), stores[2].len(), stores[3].len()];
        let inputs = generic_point(&codec);
        let (xs, ms, os, eps) = batch_inputs(2);
        let probe = Stage1Probe {
            codec: &codec,
            splits,
            x: xs.iter().map(|&v| v as f64 / 255.0).collect(),
            m: ms.iter().map(|&v| v as f64).collect(),
            omega: os.iter().map(|&v| v as f64).collect(),
            eps: eps.iter().map(|&v| v as f64).collect(),
            w: LossWeights {
                lambda1: 0.8,
                lambda2: 1.1,
                lambda3: 0.6,
                lambda_dkl: 0.05,
                ..Default::default()
            },
        };
        let report = grad_check(&probe, &inputs, 1e-5, 1e-3).unwrap();
        assert!(
            report.passed,
            "stage-1 loss gradient check failed: max rel err {} at {:?}",
            report.max_rel_err, report.worst
        );
    }

}
