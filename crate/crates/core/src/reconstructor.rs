//! Wide-FOV reconstruction from the two canvas-warped views.
//!
//! A U-Net-shaped network whose six stages are communal cells: three on the
//! downsampling path, three on the upsampling path, with additive skip
//! connections between mirrored stages. Cells are shape-preserving, so all
//! resampling lives between them: stride-2 average pooling down, bilinear
//! doubling up. The output head is a zero-initialized 1x1 convolution
//! followed by a sigmoid, which bounds outputs to `[0, 1]` and makes the
//! untrained network predict a flat 0.5.
//!
//! The reconstructor sits outside the attack gradient path; it is attacked
//! only transitively through corrupted alignment.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cells::{Genotype, LeafCache, MixedCell};
use crate::error::{CoreError, Result};
use crate::estimator::CellMode;
use crate::graph::{Graph, NodeId};
use crate::params::{kaiming_uniform, ParamStore};
use crate::tensor::Tensor;

/// Three encoder cells and three decoder cells.
pub const STAGES: usize = 6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconstructorConfig {
    /// Channels of the warped input images.
    pub image_channels: usize,
    /// Cell width on both paths.
    pub feat_channels: usize,
}

impl Default for ReconstructorConfig {
    fn default() -> Self {
        ReconstructorConfig {
            image_channels: 1,
            feat_channels: 16,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReconstructorModel {
    pub config: ReconstructorConfig,
    /// Cells 0..3 encode, 3..6 decode (decoder deepest first).
    pub cells: Vec<MixedCell>,
    pub mode: CellMode,
}

impl ReconstructorModel {
    /// Registers all parameters under the `rec.` prefix.
    pub fn init(store: &mut ParamStore, config: &ReconstructorConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = config.feat_channels;
        let cin = 2 * config.image_channels + 2;
        store.insert("rec.stem.w", kaiming_uniform(rng, &[c, cin, 3, 3], cin * 9));
        store.insert("rec.stem.b", Tensor::zeros(&[c]));
        let cells: Vec<MixedCell> = (0..STAGES)
            .map(|i| MixedCell::init(store, &format!("rec.cell{i}"), c, rng))
            .collect();
        store.insert(
            "rec.head.w",
            Tensor::zeros(&[config.image_channels, c, 1, 1]),
        );
        store.insert("rec.head.b", Tensor::zeros(&[config.image_channels]));
        ReconstructorModel {
            config: config.clone(),
            cells,
            mode: CellMode::Mixed,
        }
    }

    pub fn theta_names(&self, store: &ParamStore) -> Vec<String> {
        store
            .names_with_prefix("rec.")
            .filter(|n| !n.ends_with(".alpha"))
            .map(|n| n.to_string())
            .collect()
    }

    pub fn alpha_names(&self) -> Vec<String> {
        self.cells.iter().map(|c| c.alpha_name()).collect()
    }

    pub fn discretize(&self, store: &ParamStore, k: usize) -> Vec<Genotype> {
        self.cells.iter().map(|c| c.discretize(store, k)).collect()
    }

    fn cell_forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        leaves: &mut LeafCache,
        stage: usize,
        input: NodeId,
    ) -> Result<NodeId> {
        match &self.mode {
            CellMode::Mixed => self.cells[stage].forward(g, store, leaves, input),
            CellMode::Fixed(genotypes) => {
                self.cells[stage].forward_genotype(g, store, leaves, &genotypes[stage], input)
            }
        }
    }

    /// Stitches the canvas: both warped views and their masks in, one
    /// canvas-sized image in `[0, 1]` out.
    pub fn reconstruct_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        leaves: &mut LeafCache,
        warped1: NodeId,
        warped2: NodeId,
        mask1: NodeId,
        mask2: NodeId,
    ) -> Result<NodeId> {
        let (c, h, w) = g.value(warped1).chw();
        if c != self.config.image_channels {
            return Err(CoreError::ShapeMismatch {
                expected: vec![self.config.image_channels],
                got: vec![c],
            });
        }
        let shape = g.value(warped1).shape().to_vec();
        g.value(warped2).require_shape(&shape)?;
        g.value(mask1).require_shape(&[1, h, w])?;
        g.value(mask2).require_shape(&[1, h, w])?;
        // Pad to a multiple of 8 so three pooling stages stay exact.
        let ph = (8 - h % 8) % 8;
        let pw = (8 - w % 8) % 8;
        if (h + ph) / 8 < 5 || (w + pw) / 8 < 5 {
            return Err(CoreError::BadShape(format!(
                "canvas {h}x{w} is too small for three downsampling stages"
            )));
        }
        let cat = g.concat_channels(&[warped1, warped2, mask1, mask2]);
        let x = if ph > 0 || pw > 0 {
            g.pad2d(cat, 0, ph, 0, pw)
        } else {
            cat
        };
        let stem_w = leaves.leaf(g, store, "rec.stem.w");
        let stem_b = leaves.leaf(g, store, "rec.stem.b");
        let mut y = g.conv2d(x, stem_w, 1, 1);
        y = g.add_channel_bias(y, stem_b);
        y = g.relu(y);

        let e0 = self.cell_forward(g, store, leaves, 0, y)?;
        let p0 = g.avg_pool(e0, 2, 2, 0);
        let e1 = self.cell_forward(g, store, leaves, 1, p0)?;
        let p1 = g.avg_pool(e1, 2, 2, 0);
        let e2 = self.cell_forward(g, store, leaves, 2, p1)?;
        let p2 = g.avg_pool(e2, 2, 2, 0);

        let (_, h2, w2) = g.value(e2).chw();
        let u2 = g.upsample_bilinear(p2, h2, w2);
        let s2 = g.add(u2, e2);
        let d2 = self.cell_forward(g, store, leaves, 3, s2)?;
        let (_, h1, w1) = g.value(e1).chw();
        let u1 = g.upsample_bilinear(d2, h1, w1);
        let s1 = g.add(u1, e1);
        let d1 = self.cell_forward(g, store, leaves, 4, s1)?;
        let (_, h0, w0) = g.value(e0).chw();
        let u0 = g.upsample_bilinear(d1, h0, w0);
        let s0 = g.add(u0, e0);
        let d0 = self.cell_forward(g, store, leaves, 5, s0)?;

        let head_w = leaves.leaf(g, store, "rec.head.w");
        let head_b = leaves.leaf(g, store, "rec.head.b");
        let mut out = g.conv2d(d0, head_w, 1, 1);
        out = g.add_channel_bias(out, head_b);
        out = g.sigmoid(out);
        Ok(if ph > 0 || pw > 0 {
            g.crop2d(out, 0, 0, h, w)
        } else {
            out
        })
    }

    /// Plain reconstruction of prepared canvas tensors.
    pub fn reconstruct(
        &self,
        store: &ParamStore,
        warped1: &Tensor,
        warped2: &Tensor,
        mask1: &Tensor,
        mask2: &Tensor,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let w1 = g.leaf(warped1.clone());
        let w2 = g.leaf(warped2.clone());
        let m1 = g.leaf(mask1.clone());
        let m2 = g.leaf(mask2.clone());
        let mut leaves = LeafCache::new();
        let out = self.reconstruct_graph(&mut g, store, &mut leaves, w1, w2, m1, m2)?;
        Ok(g.value(out).clone())
    }
}

/// Non-learned fallback composition: per-pixel mask-weighted average of the
/// two warps, zero where neither mask has support.
pub fn composite_baseline(
    warped1: &Tensor,
    warped2: &Tensor,
    mask1: &Tensor,
    mask2: &Tensor,
) -> Result<Tensor> {
    let (c, h, w) = warped1.chw();
    warped2.require_shape(warped1.shape())?;
    mask1.require_shape(&[1, h, w])?;
    mask2.require_shape(&[1, h, w])?;
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for i in 0..h * w {
            let (m1, m2) = (mask1.data()[i], mask2.data()[i]);
            let total = m1 + m2;
            if total > 0.0 {
                out.data_mut()[ch * h * w + i] = (m1 * warped1.data()[ch * h * w + i]
                    + m2 * warped2.data()[ch * h * w + i])
                    / total;
            }
        }
    }
    Ok(out)
}
