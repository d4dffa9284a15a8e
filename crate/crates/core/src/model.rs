//! The two-module network: a convolutional encoder-decoder producing joint
//! heatmaps, and a depth regressor reading the 2D module's latent volume
//! (the last decoder features, the input at heatmap resolution, and the
//! heatmaps).
//!
//! ```text
//! image 3×S×S
//!   c1  3×3      → w0×S        c2 3×3/2 → w1×S/2    c3 3×3 → w1×S/2  (skip A)
//!   c4  3×3/2    → w2×S/4      c5 3×3   → w2×S/4                     (skip B)
//!   c6  3×3/2    → w3×S/8      c7 3×3   → w3×S/8                     (latent)
//!   up, c8 → w2×S/4, + skip B, c9
//!   up, c10 → w1×S/2, + skip A, c11
//!   head 1×1 → 16×S/2×S/2                                            (heatmaps)
//! [c11 features, avgpool 2×2 of the image] → d1 3×3 → d2 3×3 → d3 1×1 → depth map
//! depth_j = Σ depth_map · softmax(heatmap_j / τ)                     (depths)
//! ```
//!
//! The pooling weights are treated as constants in the backward pass, so
//! depth supervision never moves the heatmaps through them.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::heatmap::{decode_heatmap_argmax, decode_heatmap_soft, Heatmap};
use crate::losses::DepthPrediction;
use crate::nn::{
    avgpool2, relu_backward, relu_inplace, upsample2, upsample2_backward, Conv2d, ParamAllocator, Shape,
};
use crate::skeleton::{CanonicalPose2D, CanonicalPose3D, Frame, NUM_JOINTS, ROOT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Side of the square RGB input, a multiple of 16.
    pub input_size: usize,
    /// Channel widths at strides 1, 2, 4 and 8.
    pub widths: [usize; 4],
    /// Channels of the depth branch.
    pub depth_hidden: usize,
    /// Standard deviation of target Gaussians, in heatmap cells.
    pub heatmap_sigma: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_size: 64,
            widths: [16, 32, 64, 192],
            depth_hidden: 64,
            heatmap_sigma: crate::heatmap::DEFAULT_SIGMA,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 16 != 0 {
            return Err(Error::InvalidConfig(format!(
                "input size must be a positive multiple of 16, got {}",
                self.input_size
            )));
        }
        if self.widths.contains(&0) || self.depth_hidden == 0 {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        if !(self.heatmap_sigma > 0.0) {
            return Err(Error::InvalidConfig("heatmap sigma must be positive".into()));
        }
        Ok(())
    }

    pub fn heatmap_size(&self) -> usize {
        self.input_size / 2
    }

    /// Image pixels per heatmap cell.
    pub fn stride(&self) -> f64 {
        self.input_size as f64 / self.heatmap_size() as f64
    }

    /// Decoder features, the pooled RGB input, then the heatmap planes.
    pub fn latent_shape(&self) -> Shape {
        let hs = self.heatmap_size();
        Shape::new(self.depth_input_channels() + NUM_JOINTS, hs, hs)
    }

    fn depth_input_channels(&self) -> usize {
        self.widths[1] + 3
    }
}

/// Softmax temperature of the heatmap-weighted depth pooling.
pub const DEPTH_POOL_TEMPERATURE: f32 = 0.05;

/// How heatmaps are turned into coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Decode {
    #[default]
    Argmax,
    /// Softmax-weighted mean at the given temperature.
    Soft { temperature: f64 },
}

/// An RGB image as a channel-major `3×S×S` array scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputImage {
    pub size: usize,
    pub data: Vec<f32>,
}

impl InputImage {
    pub fn from_rgb(img: &RgbImage) -> Result<Self> {
        let (w, h) = img.dimensions();
        if w != h {
            return Err(Error::DimensionMismatch {
                what: "input image",
                expected: "a square image".into(),
                found: format!("{w}x{h}"),
            });
        }
        let n = (w * h) as usize;
        let mut data = vec![0.0; 3 * n];
        for (i, p) in img.pixels().enumerate() {
            for c in 0..3 {
                data[c * n + i] = p[c] as f32 / 255.0;
            }
        }
        Ok(InputImage { size: w as usize, data })
    }
}

/// 2D-module output consumed by the depth head.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub shape: Shape,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone)]
struct Layers {
    convs: [Conv2d; 11],
    head: Conv2d,
    depth: [Conv2d; 3],
}

impl Layers {
    fn build(cfg: &NetworkConfig) -> (Self, usize) {
        let [w0, w1, w2, w3] = cfg.widths;
        let mut a = ParamAllocator::default();
        let convs = [
            Conv2d::new(&mut a, 3, w0, 3, 1),
            Conv2d::new(&mut a, w0, w1, 3, 2),
            Conv2d::new(&mut a, w1, w1, 3, 1),
            Conv2d::new(&mut a, w1, w2, 3, 2),
            Conv2d::new(&mut a, w2, w2, 3, 1),
            Conv2d::new(&mut a, w2, w3, 3, 2),
            Conv2d::new(&mut a, w3, w3, 3, 1),
            Conv2d::new(&mut a, w3, w2, 3, 1),
            Conv2d::new(&mut a, w2, w2, 3, 1),
            Conv2d::new(&mut a, w2, w1, 3, 1),
            Conv2d::new(&mut a, w1, w1, 3, 1),
        ];
        let head = Conv2d::new(&mut a, w1, NUM_JOINTS, 1, 1);
        let dh = cfg.depth_hidden;
        let depth = [
            Conv2d::new(&mut a, cfg.depth_input_channels(), dh, 3, 1),
            Conv2d::new(&mut a, dh, dh, 3, 1),
            Conv2d::new(&mut a, dh, 1, 1, 1),
        ];
        (Layers { convs, head, depth }, a.len())
    }
}

/// Activations and im2col buffers kept for the backward pass. Reusing one
/// trace across samples avoids reallocations.
#[derive(Debug, Default, Clone)]
pub struct Trace {
    input_shape: Option<Shape>,
    /// Post-ReLU outputs of c1..c11.
    acts: [Vec<f32>; 11],
    shapes: [Option<Shape>; 11],
    cols: [Vec<f32>; 12],
    up1: Vec<f32>,
    up2: Vec<f32>,
    sum8: Vec<f32>,
    sum10: Vec<f32>,
    heatmaps: Vec<f32>,
    depth_buf: DepthBuffers,
    /// Pooling weights to use instead of the ones derived from the heatmaps.
    fixed_weights: Option<Vec<f32>>,
    scratch: Vec<f32>,
    grad_a: Vec<f32>,
    grad_b: Vec<f32>,
    grad_skip_a: Vec<f32>,
    grad_skip_b: Vec<f32>,
    grad_latent: Vec<f32>,
    depth_ran: bool,
}

impl Trace {
    pub fn heatmaps(&self) -> &[f32] {
        &self.heatmaps
    }

    /// Depth outputs of the last forward pass that ran the depth head.
    pub fn depth(&self) -> Option<&[f32]> {
        self.depth_ran.then_some(&self.depth_buf.depth[..])
    }
}

#[derive(Debug, Default, Clone)]
struct DepthBuffers {
    pooled_input: Vec<f32>,
    /// Decoder features followed by the pooled input.
    input: Vec<f32>,
    cols: [Vec<f32>; 3],
    /// Post-ReLU d1 and d2 outputs, then the raw depth map.
    acts: [Vec<f32>; 3],
    weights: Vec<f32>,
    depth: Vec<f32>,
}

/// Per-plane `softmax(heat / τ)`.
fn pooling_weights(heat: &[f32], npix: usize, out: &mut Vec<f32>) {
    out.clear();
    for plane in heat.chunks_exact(npix) {
        let max = plane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let start = out.len();
        out.extend(plane.iter().map(|&v| ((v - max) / DEPTH_POOL_TEMPERATURE).exp()));
        let total: f32 = out[start..].iter().sum();
        for w in &mut out[start..] {
            *w /= total;
        }
    }
}

impl Layers {
    /// `b.input` must hold the depth-branch input of shape `fs`.
    fn depth_forward(&self, p: &[f32], fs: Shape, heat: &[f32], fixed: Option<&[f32]>, b: &mut DepthBuffers) {
        let npix = fs.h * fs.w;
        match fixed {
            Some(w) => {
                b.weights.clear();
                b.weights.extend_from_slice(w);
            }
            None => pooling_weights(heat, npix, &mut b.weights),
        }
        let s1 = self.depth[0].forward(p, &b.input, fs, &mut b.cols[0], &mut b.acts[0]);
        relu_inplace(&mut b.acts[0]);
        let [a0, a1, a2] = &mut b.acts;
        let s2 = self.depth[1].forward(p, a0, s1, &mut b.cols[1], a1);
        relu_inplace(a1);
        self.depth[2].forward(p, a1, s2, &mut b.cols[2], a2);
        b.depth.clear();
        let map = &b.acts[2];
        b.depth.extend(b.weights.chunks_exact(npix).map(|w| map.iter().zip(w).map(|(a, b)| a * b).sum::<f32>()));
    }

    /// Accumulates depth-branch parameter gradients and returns the
    /// gradient with respect to the branch input.
    fn depth_backward(&self, p: &[f32], grads: &mut [f32], dd: &[f32], fs: Shape, b: &DepthBuffers, scratch: &mut Vec<f32>) -> Vec<f32> {
        let npix = fs.h * fs.w;
        let mut dmap = vec![0.0; npix];
        for (w, &d) in b.weights.chunks_exact(npix).zip(dd) {
            for (g, &x) in dmap.iter_mut().zip(w) {
                *g += x * d;
            }
        }
        let s1 = self.depth[0].out_shape(fs);
        let s2 = self.depth[1].out_shape(s1);
        let mut g2 = vec![0.0; s2.len()];
        self.depth[2].backward(p, grads, &b.cols[2], &dmap, s2, Some(&mut g2), scratch);
        relu_backward(&b.acts[1], &mut g2);
        let mut g1 = vec![0.0; s1.len()];
        self.depth[1].backward(p, grads, &b.cols[1], &g2, s1, Some(&mut g1), scratch);
        relu_backward(&b.acts[0], &mut g1);
        let mut gf = vec![0.0; fs.len()];
        self.depth[0].backward(p, grads, &b.cols[0], &g1, fs, Some(&mut gf), scratch);
        gf
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    pub config: NetworkConfig,
    pub params: Vec<f32>,
    layers: Layers,
}

impl Network {
    /// He-initialized network; the last depth layer starts scaled down so
    /// initial depth outputs are near zero.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layers, n) = Layers::build(&config);
        let mut params = vec![0.0; n];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for c in layers.convs.iter().chain(std::iter::once(&layers.head)) {
            c.init(&mut params, &mut rng);
        }
        for c in &layers.depth {
            c.init(&mut params, &mut rng);
        }
        for w in &mut params[layers.depth[2].param_range()] {
            *w *= 0.1;
        }
        Ok(Network { config, params, layers })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    /// Parameter indices belonging to the depth regressor.
    pub fn depth_head_range(&self) -> Range<usize> {
        self.layers.depth[0].param_range().start..self.layers.depth[2].param_range().end
    }

    /// Digest of the layer layout; checkpoints must match it to load.
    pub fn architecture_digest(&self) -> String {
        let mut desc = format!("hpe3d-net/v2 input={} joints={}", self.config.input_size, NUM_JOINTS);
        for c in self.layers.convs.iter().chain(std::iter::once(&self.layers.head)).chain(&self.layers.depth) {
            desc += &format!(" conv{}x{}:{}->{}/{}", c.k, c.k, c.cin, c.cout, c.stride);
        }
        hex_digest(desc.as_bytes())
    }

    fn check_input(&self, input: &InputImage) -> Result<Shape> {
        let s = self.config.input_size;
        if input.size != s || input.data.len() != 3 * s * s {
            return Err(Error::DimensionMismatch {
                what: "input image",
                expected: format!("3x{s}x{s}"),
                found: format!("{} values at size {}", input.data.len(), input.size),
            });
        }
        Ok(Shape::new(3, s, s))
    }

    /// Runs the 2D module, and the depth head when `with_depth` is set,
    /// keeping every activation in `trace`.
    pub fn forward_trace(&self, input: &InputImage, with_depth: bool, trace: &mut Trace) -> Result<()> {
        let s0 = self.check_input(input)?;
        let p = &self.params;
        let l = &self.layers;
        let t = trace;
        t.input_shape = Some(s0);

        let conv = |i: usize, x: &[f32], s: Shape, t_cols: &mut [Vec<f32>; 12], acts: &mut [Vec<f32>; 11]| {
            let o = l.convs[i].forward(p, x, s, &mut t_cols[i], &mut acts[i]);
            relu_inplace(&mut acts[i]);
            o
        };
        let mut shapes = [None; 11];
        let mut s = s0;
        let mut acts = std::mem::take(&mut t.acts);
        let mut cols = std::mem::take(&mut t.cols);
        s = {
            let o = conv(0, &input.data, s, &mut cols, &mut acts);
            shapes[0] = Some(s);
            o
        };
        for i in 1..7 {
            let x = std::mem::take(&mut acts[i - 1]);
            shapes[i] = Some(s);
            s = conv(i, &x, s, &mut cols, &mut acts);
            acts[i - 1] = x;
        }

        let su = upsample2(&acts[6], s, &mut t.up1);
        shapes[7] = Some(su);
        let up1 = std::mem::take(&mut t.up1);
        s = conv(7, &up1, su, &mut cols, &mut acts);
        t.up1 = up1;
        t.sum8.clear();
        t.sum8.extend(acts[7].iter().zip(&acts[4]).map(|(a, b)| a + b));
        shapes[8] = Some(s);
        s = conv(8, &t.sum8, s, &mut cols, &mut acts);

        let su = upsample2(&acts[8], s, &mut t.up2);
        shapes[9] = Some(su);
        let up2 = std::mem::take(&mut t.up2);
        s = conv(9, &up2, su, &mut cols, &mut acts);
        t.up2 = up2;
        t.sum10.clear();
        t.sum10.extend(acts[9].iter().zip(&acts[2]).map(|(a, b)| a + b));
        shapes[10] = Some(s);
        let s11 = conv(10, &t.sum10, s, &mut cols, &mut acts);

        let hs = l.head.forward(p, &acts[10], s11, &mut cols[11], &mut t.heatmaps);
        debug_assert_eq!(hs, Shape::new(NUM_JOINTS, self.config.heatmap_size(), self.config.heatmap_size()));

        t.depth_ran = with_depth;
        if with_depth {
            let b = &mut t.depth_buf;
            avgpool2(&input.data, s0, &mut b.pooled_input);
            b.input.clear();
            b.input.extend_from_slice(&acts[10]);
            b.input.extend_from_slice(&b.pooled_input);
            let fs = Shape::new(self.config.depth_input_channels(), s11.h, s11.w);
            l.depth_forward(p, fs, &t.heatmaps, t.fixed_weights.as_deref(), &mut t.depth_buf);
        }
        t.acts = acts;
        t.cols = cols;
        t.shapes = shapes;
        Ok(())
    }

    /// Backpropagates heatmap and (optional) depth gradients through the
    /// last forward pass, accumulating into `grads`. The depth head is only
    /// touched when `ddepth` is given.
    pub fn backward(&self, trace: &mut Trace, dheat: &[f32], ddepth: Option<&[f32]>, grads: &mut [f32]) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                what: "gradient buffer",
                expected: self.params.len().to_string(),
                found: grads.len().to_string(),
            });
        }
        if dheat.len() != trace.heatmaps.len() {
            return Err(Error::DimensionMismatch {
                what: "heatmap gradient",
                expected: trace.heatmaps.len().to_string(),
                found: dheat.len().to_string(),
            });
        }
        if ddepth.is_some() && !trace.depth_ran {
            return Err(Error::InvalidConfig("depth gradient given but the depth head did not run".into()));
        }
        let p = &self.params;
        let l = &self.layers;
        let t = trace;
        let sh = |i: usize| t.shapes[i].expect("forward ran");
        let (mut ga, mut gb) = (std::mem::take(&mut t.grad_a), std::mem::take(&mut t.grad_b));
        let mut scratch = std::mem::take(&mut t.scratch);

        // head
        ga.resize(t.acts[10].len(), 0.0);
        l.head.backward(p, grads, &t.cols[11], dheat, l.convs[10].out_shape(sh(10)), Some(&mut ga), &mut scratch);
        if let Some(dd) = ddepth {
            if dd.len() != NUM_JOINTS {
                return Err(Error::DimensionMismatch {
                    what: "depth gradient",
                    expected: NUM_JOINTS.to_string(),
                    found: dd.len().to_string(),
                });
            }
            let s11 = l.convs[10].out_shape(sh(10));
            let fs = Shape::new(self.config.depth_input_channels(), s11.h, s11.w);
            let gf = l.depth_backward(p, grads, dd, fs, &t.depth_buf, &mut scratch);
            for (g, d) in ga.iter_mut().zip(&gf) {
                *g += d;
            }
        }
        // c11 → sum10 = a10 + a3
        relu_backward(&t.acts[10], &mut ga);
        gb.resize(t.sum10.len(), 0.0);
        l.convs[10].backward(p, grads, &t.cols[10], &ga, sh(10), Some(&mut gb), &mut scratch);
        t.grad_skip_a.clear();
        t.grad_skip_a.extend_from_slice(&gb);
        // c10 → up2
        relu_backward(&t.acts[9], &mut gb);
        ga.resize(t.up2.len(), 0.0);
        l.convs[9].backward(p, grads, &t.cols[9], &gb, sh(9), Some(&mut ga), &mut scratch);
        let s9 = l.convs[8].out_shape(sh(8));
        gb.resize(s9.len(), 0.0);
        upsample2_backward(&ga, s9, &mut gb);
        // c9 → sum8 = a8 + a5
        relu_backward(&t.acts[8], &mut gb);
        ga.resize(t.sum8.len(), 0.0);
        l.convs[8].backward(p, grads, &t.cols[8], &gb, sh(8), Some(&mut ga), &mut scratch);
        t.grad_skip_b.clear();
        t.grad_skip_b.extend_from_slice(&ga);
        // c8 → up1
        relu_backward(&t.acts[7], &mut ga);
        gb.resize(t.up1.len(), 0.0);
        l.convs[7].backward(p, grads, &t.cols[7], &ga, sh(7), Some(&mut gb), &mut scratch);
        let latent_shape = l.convs[6].out_shape(sh(6));
        let mut glat = std::mem::take(&mut t.grad_latent);
        glat.resize(latent_shape.len(), 0.0);
        upsample2_backward(&gb, latent_shape, &mut glat);

        // Encoder, c7 down to c1, folding in the skip gradients.
        let mut g = glat;
        for i in (0..7).rev() {
            if i == 4 {
                for (a, b) in g.iter_mut().zip(&t.grad_skip_b) {
                    *a += b;
                }
            }
            if i == 2 {
                for (a, b) in g.iter_mut().zip(&t.grad_skip_a) {
                    *a += b;
                }
            }
            relu_backward(&t.acts[i], &mut g);
            if i == 0 {
                l.convs[0].backward(p, grads, &t.cols[0], &g, sh(0), None, &mut scratch);
            } else {
                ga.resize(sh(i).len(), 0.0);
                l.convs[i].backward(p, grads, &t.cols[i], &g, sh(i), Some(&mut ga), &mut scratch);
                std::mem::swap(&mut g, &mut ga);
            }
        }
        t.grad_latent = g;
        t.grad_a = ga;
        t.grad_b = gb;
        t.scratch = scratch;
        Ok(())
    }

    /// Heatmaps (16 × S/2 × S/2) and the latent volume for one image.
    pub fn forward_2d(&self, image: &InputImage) -> Result<(Heatmap, Latent)> {
        let mut t = Trace::default();
        self.forward_trace(image, false, &mut t)?;
        let hs = self.config.heatmap_size();
        let heat = Heatmap::from_values(NUM_JOINTS, hs, hs, t.heatmaps.iter().map(|&v| v as f64).collect())?;
        let mut values = std::mem::take(&mut t.acts[10]);
        let mut pooled = Vec::new();
        avgpool2(&image.data, Shape::new(3, image.size, image.size), &mut pooled);
        values.extend_from_slice(&pooled);
        values.extend_from_slice(&t.heatmaps);
        let latent = Latent {
            shape: self.config.latent_shape(),
            values,
        };
        Ok((heat, latent))
    }

    pub fn forward_depth(&self, latent: &Latent) -> Result<DepthPrediction> {
        let want = self.config.latent_shape();
        if latent.shape != want || latent.values.len() != want.len() {
            return Err(Error::DimensionMismatch {
                what: "latent volume",
                expected: format!("{}x{}x{}", want.c, want.h, want.w),
                found: format!("{}x{}x{} ({} values)", latent.shape.c, latent.shape.h, latent.shape.w, latent.values.len()),
            });
        }
        let fs = Shape::new(self.config.depth_input_channels(), want.h, want.w);
        let (feats, heat) = latent.values.split_at(fs.len());
        let mut b = DepthBuffers {
            input: feats.to_vec(),
            ..DepthBuffers::default()
        };
        self.layers.depth_forward(&self.params, fs, heat, None, &mut b);
        let values: Vec<f64> = b.depth.iter().map(|&v| v as f64).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("depth prediction".into()));
        }
        DepthPrediction::from_slice(&values)
    }

    /// Full 3D prediction in the image-scaled frame: `(x, y)` in image
    /// pixels from the decoded heatmaps, `z` from the depth head with the
    /// root's depth subtracted.
    pub fn predict_pose3d(&self, image: &InputImage, decode: Decode) -> Result<CanonicalPose3D> {
        let (heat, latent) = self.forward_2d(image)?;
        let depth = self.forward_depth(&latent)?;
        let xy = decode_heatmaps(&heat, decode, self.config.stride())?;
        Ok(assemble_pose3d(&xy, &depth))
    }

    /// 2D prediction only, in image pixels.
    pub fn predict_pose2d(&self, image: &InputImage, decode: Decode) -> Result<CanonicalPose2D> {
        let (heat, _) = self.forward_2d(image)?;
        Ok(decode_heatmaps(&heat, decode, self.config.stride())?)
    }

    pub fn to_checkpoint(&self, stage: StageTag, config_digest: String, metrics: BTreeMap<String, f64>) -> Checkpoint {
        Checkpoint {
            header: CheckpointHeader {
                format_version: CHECKPOINT_VERSION,
                architecture_digest: self.architecture_digest(),
                network: self.config.clone(),
                stage,
                config_digest,
                metrics,
                parameter_count: self.params.len(),
            },
            params: self.params.clone(),
        }
    }

    /// Rebuilds a network from a checkpoint, failing if its architecture
    /// digest differs from the one the stored config produces.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut net = Network::new(ckpt.header.network.clone(), 0)?;
        let digest = net.architecture_digest();
        if digest != ckpt.header.architecture_digest {
            return Err(Error::Checkpoint(format!(
                "architecture digest mismatch: checkpoint {}, network {}",
                ckpt.header.architecture_digest, digest
            )));
        }
        if ckpt.params.len() != net.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters, network needs {}",
                ckpt.params.len(),
                net.params.len()
            )));
        }
        net.params.clone_from(&ckpt.params);
        Ok(net)
    }
}

/// Decodes all 16 planes and scales cell coordinates to image pixels.
pub fn decode_heatmaps(heat: &Heatmap, decode: Decode, stride: f64) -> Result<CanonicalPose2D> {
    let mut coords = [[0.0; 2]; NUM_JOINTS];
    for (j, c) in coords.iter_mut().enumerate() {
        let plane = heat.plane(j);
        let [x, y] = match decode {
            Decode::Argmax => {
                let (u, v) = decode_heatmap_argmax(&plane);
                [u as f64, v as f64]
            }
            Decode::Soft { temperature } => decode_heatmap_soft(&plane, temperature)?,
        };
        *c = [x * stride, y * stride];
    }
    Ok(CanonicalPose2D::all_visible(coords))
}

/// Combines 2D coordinates with depth outputs, subtracting the root depth.
pub fn assemble_pose3d(xy: &CanonicalPose2D, depth: &DepthPrediction) -> CanonicalPose3D {
    let root_z = depth.values[ROOT.index()];
    let mut coords = [[0.0; 3]; NUM_JOINTS];
    for j in 0..NUM_JOINTS {
        coords[j] = [xy.coords[j][0], xy.coords[j][1], depth.values[j] - root_z];
    }
    let mut pose = CanonicalPose3D::new(coords, Frame::ImageScaled);
    pose.coords[ROOT.index()][2] = 0.0;
    pose.visibility = xy.visibility;
    pose
}

/// Pose for the geometric loss of a 2D-annotated sample: ground-truth
/// `(x, y)` in image pixels and predicted depths. Only `z` depends on the
/// network, so the loss gradient with respect to the prediction is the `z`
/// column of the pose gradient.
pub fn assemble_geo_pose(gt_pose2d: &CanonicalPose2D, pred_depth: &DepthPrediction) -> CanonicalPose3D {
    let mut coords = [[0.0; 3]; NUM_JOINTS];
    for j in 0..NUM_JOINTS {
        coords[j] = [gt_pose2d.coords[j][0], gt_pose2d.coords[j][1], pred_depth.values[j]];
    }
    let mut pose = CanonicalPose3D::new(coords, Frame::ImageScaled);
    pose.visibility = gt_pose2d.visibility;
    pose
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of a serializable value's JSON form.
pub fn json_digest<T: Serialize>(value: &T) -> Result<String> {
    Ok(hex_digest(&serde_json::to_vec(value)?))
}

/// Which training stage produced a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    #[default]
    None,
    S1,
    S2,
    S3,
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HPE3DCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub architecture_digest: String,
    pub network: NetworkConfig,
    pub stage: StageTag,
    pub config_digest: String,
    pub metrics: BTreeMap<String, f64>,
    pub parameter_count: usize,
}

/// Serialized weights plus provenance.
///
/// File layout: the 8-byte magic `HPE3DCKP`, a little-endian `u32` header
/// length, the header as JSON, then `parameter_count` little-endian `f32`s.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<f32>,
}

impl Checkpoint {
    pub fn stage(&self) -> StageTag {
        self.header.stage
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let header = serde_json::to_vec(&self.header)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        let mut buf = Vec::with_capacity(self.params.len() * 4);
        for p in &self.params {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut header)?;
        let header: CheckpointHeader = serde_json::from_slice(&header)?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                header.format_version
            )));
        }
        let mut raw = Vec::new();
        r.read_to_end(&mut raw)?;
        if raw.len() != header.parameter_count * 4 {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter bytes, found {}",
                header.parameter_count * 4,
                raw.len()
            )));
        }
        let params = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Checkpoint { header, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Checkpoint::read_from(std::io::BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{loss_geometric, loss_geometric_grad};
    use crate::skeleton::{default_bone_groups, CanonicalSkeleton, ReferenceSkeleton};
    use rand::Rng;

    fn small() -> NetworkConfig {
        NetworkConfig {
            input_size: 16,
            widths: [2, 3, 4, 5],
            depth_hidden: 6,
            heatmap_sigma: 1.0,
        }
    }

    fn image(size: usize, seed: u64) -> InputImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        InputImage {
            size,
            data: (0..3 * size * size).map(|_| rng.random_range(0.0..1.0)).collect(),
        }
    }

    #[test]
    fn shapes_follow_the_configuration() {
        let net = Network::new(NetworkConfig::default(), 0).unwrap();
        let (heat, latent) = net.forward_2d(&image(64, 1)).unwrap();
        assert_eq!(heat.shape(), (16, 32, 32));
        assert_eq!(latent.shape, Shape::new(32 + 3 + 16, 32, 32));
        let d = net.forward_depth(&latent).unwrap();
        assert!(d.values.iter().all(|v| v.is_finite()));
        let mut t = Trace::default();
        net.forward_trace(&image(64, 1), true, &mut t).unwrap();
        let traced: Vec<f64> = t.depth().unwrap().iter().map(|&v| v as f64).collect();
        assert_eq!(d.values.to_vec(), traced);
        assert!(net.parameter_count() > 500_000 && net.parameter_count() < 1_500_000);
    }

    #[test]
    fn forward_is_deterministic_and_seeded() {
        let a = Network::new(small(), 7).unwrap();
        let b = Network::new(small(), 7).unwrap();
        let c = Network::new(small(), 8).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
        let img = image(16, 2);
        assert_eq!(a.forward_2d(&img).unwrap(), b.forward_2d(&img).unwrap());
        let pa = a.predict_pose3d(&img, Decode::Argmax).unwrap();
        let pb = b.predict_pose3d(&img, Decode::Argmax).unwrap();
        assert_eq!(pa, pb);
        assert_eq!(pa.coords[ROOT.index()][2], 0.0);
    }

    #[test]
    fn wrong_sizes_are_rejected() {
        let net = Network::new(small(), 0).unwrap();
        assert!(net.forward_2d(&image(32, 0)).is_err());
        let (_, mut latent) = net.forward_2d(&image(16, 0)).unwrap();
        latent.values.pop();
        assert!(net.forward_depth(&latent).is_err());
        latent.shape = Shape::new(4, 2, 2);
        assert!(net.forward_depth(&latent).is_err());
    }

    /// Whole-network gradient check on `sum(heat * a) + sum(depth * b)`.
    #[test]
    fn backward_matches_finite_differences() {
        let mut net = Network::new(small(), 3).unwrap();
        let img = image(16, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut t = Trace::default();
        net.forward_trace(&img, true, &mut t).unwrap();
        let probe_h: Vec<f32> = (0..t.heatmaps.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let probe_d: Vec<f32> = (0..NUM_JOINTS).map(|_| rng.random_range(-1.0..1.0)).collect();
        // The backward pass treats the pooling weights as constants.
        let weights = t.depth_buf.weights.clone();
        let objective = |net: &Network| -> f64 {
            let mut t = Trace {
                fixed_weights: Some(weights.clone()),
                ..Trace::default()
            };
            net.forward_trace(&img, true, &mut t).unwrap();
            let h: f64 = t.heatmaps.iter().zip(&probe_h).map(|(a, b)| *a as f64 * *b as f64).sum();
            let d: f64 = t.depth().unwrap().iter().zip(&probe_d).map(|(a, b)| *a as f64 * *b as f64).sum();
            h + d
        };
        let mut grads = vec![0.0; net.parameter_count()];
        net.backward(&mut t, &probe_h, Some(&probe_d), &mut grads).unwrap();
        let eps = 1e-3f32;
        let mut errs = Vec::new();
        for i in (0..net.parameter_count()).step_by(7) {
            let orig = net.params[i];
            net.params[i] = orig + eps;
            let up = objective(&net);
            net.params[i] = orig - eps;
            let down = objective(&net);
            net.params[i] = orig;
            let fd = (up - down) / (2.0 * eps as f64);
            let an = grads[i] as f64;
            errs.push((fd - an).abs() / fd.abs().max(an.abs()).max(1e-2));
        }
        // ReLU kinks and f32 rounding spoil a few coordinates; the bulk
        // must agree, and so must the derivative along the gradient itself.
        errs.sort_by(f64::total_cmp);
        let p95 = errs[errs.len() * 95 / 100];
        assert!(errs.len() > 50 && p95 < 1e-2, "95th percentile relative error {p95}");
        let norm2: f64 = grads.iter().map(|&g| g as f64 * g as f64).sum();
        let h = 1e-3 / norm2.sqrt();
        let base = net.params.clone();
        net.params = base.iter().zip(&grads).map(|(p, g)| p + (h * *g as f64) as f32).collect();
        let up = objective(&net);
        net.params = base.iter().zip(&grads).map(|(p, g)| p - (h * *g as f64) as f32).collect();
        let down = objective(&net);
        let directional = (up - down) / (2.0 * h);
        assert!((directional - norm2).abs() / norm2 < 1e-2, "{directional} vs {norm2}");
    }

    #[test]
    fn depth_head_untouched_without_depth_gradient() {
        let net = Network::new(small(), 3).unwrap();
        let mut t = Trace::default();
        net.forward_trace(&image(16, 1), false, &mut t).unwrap();
        let dh = vec![1.0; t.heatmaps.len()];
        let mut grads = vec![0.0; net.parameter_count()];
        net.backward(&mut t, &dh, None, &mut grads).unwrap();
        assert!(grads[net.depth_head_range()].iter().all(|&g| g == 0.0));
        assert!(grads[..net.depth_head_range().start].iter().any(|&g| g != 0.0));
        assert!(net.backward(&mut t, &dh, Some(&[0.0; 16]), &mut grads).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let net = Network::new(small(), 9).unwrap();
        let mut metrics = BTreeMap::new();
        metrics.insert("pckh".to_string(), 81.25);
        let ckpt = net.to_checkpoint(StageTag::S1, "abc".into(), metrics);
        let mut bytes = Vec::new();
        ckpt.write_to(&mut bytes).unwrap();
        let back = Checkpoint::read_from(&bytes[..]).unwrap();
        assert_eq!(back, ckpt);
        let net2 = Network::from_checkpoint(&back).unwrap();
        let img = image(16, 3);
        assert_eq!(
            net.predict_pose3d(&img, Decode::Argmax).unwrap(),
            net2.predict_pose3d(&img, Decode::Argmax).unwrap()
        );
        let mut bad = ckpt.clone();
        bad.header.architecture_digest = "0".repeat(64);
        assert!(Network::from_checkpoint(&bad).is_err());
        assert!(Checkpoint::read_from(&b"NOTACKPT...."[..]).is_err());
    }

    #[test]
    fn soft_and_argmax_agree_on_peaked_heatmaps() {
        let mut values = vec![0.0; 16 * 8 * 8];
        for j in 0..16 {
            let plane = crate::heatmap::render_gaussian_heatmap([(j % 6) as f64 + 1.0, 3.0], (8, 8), 0.5, true).unwrap();
            values[j * 64..(j + 1) * 64].copy_from_slice(&plane.values);
        }
        let heat = Heatmap::from_values(16, 8, 8, values).unwrap();
        let a = decode_heatmaps(&heat, Decode::Argmax, 1.0).unwrap();
        let s = decode_heatmaps(&heat, Decode::Soft { temperature: 0.05 }, 1.0).unwrap();
        for j in 0..16 {
            for k in 0..2 {
                assert!((a.coords[j][k] - s.coords[j][k]).abs() < 0.5);
            }
        }
    }

    fn groups() -> Vec<crate::skeleton::BoneGroup> {
        default_bone_groups(&CanonicalSkeleton::default(), &ReferenceSkeleton::default().rest_pose()).unwrap()
    }

    #[test]
    fn planar_geo_pose_uses_in_plane_lengths() {
        let rest = ReferenceSkeleton::default().rest_pose();
        let xy = CanonicalPose2D::all_visible(rest.coords.map(|c| [c[0], c[1]]));
        let pose = assemble_geo_pose(&xy, &DepthPrediction::new([0.0; 16]));
        assert!(pose.coords.iter().all(|c| c[2] == 0.0));
        let direct = loss_geometric(&pose, &groups()).unwrap();
        assert!(direct.is_finite());
    }

    #[test]
    fn true_depths_are_a_stationary_point() {
        let p = crate::synth::SynthParams::default();
        let pose = crate::harmonize::root_align(&crate::synth::generate_pose3d(&p, &mut p.sample_rng(3)));
        let xy = CanonicalPose2D::all_visible(pose.coords.map(|c| [c[0], c[1]]));
        let depth = DepthPrediction::new(pose.coords.map(|c| c[2]));
        let geo = assemble_geo_pose(&xy, &depth);
        let (loss, grad) = loss_geometric_grad(&geo, &groups()).unwrap();
        assert!(loss < 1e-18);
        let norm: f64 = grad.iter().map(|g| g[2] * g[2]).sum::<f64>().sqrt();
        assert!(norm < 1e-6);
        let mut perturbed = depth;
        perturbed.values[11] += 50.0;
        assert!(loss_geometric(&assemble_geo_pose(&xy, &perturbed), &groups()).unwrap() > loss);
    }
}
