//! Three-scale pyramid homography estimator.
//!
//! Features are encoded by one communal cell per pyramid level (finest to
//! coarsest via stride-2 pooling stems). Estimation runs coarse to fine: at
//! each level the second image's features are warped by the current
//! cumulative homography, globally correlated with the first image's
//! features, and a small regression head predicts residual corner offsets.
//! The final homography is the exact four-point DLT of the accumulated
//! offsets, so the whole chain stays differentiable down to the input
//! pixels.
//!
//! Model parameters are owned by one training loop; forward evaluation is
//! read-only and reentrant for distinct inputs.

use serde::{Deserialize, Serialize};

use rand_chacha::ChaCha8Rng;

use crate::cells::{Genotype, LeafCache, MixedCell};
use crate::error::{CoreError, Result};
use crate::geometry::{frame_corners, CanvasSpec, CornerOffsets, Homography};
use crate::graph::{Graph, NodeId};
use crate::params::{kaiming_uniform, ParamStore};
use crate::tensor::Tensor;

/// Number of pyramid levels; level 0 is the coarsest (1/4 scale).
pub const PYRAMID_LEVELS: usize = 3;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorConfig {
    /// Channels of the input images (1 for grayscale, 3 for RGB).
    pub input_channels: usize,
    /// Feature channels at every pyramid level.
    pub feat_channels: usize,
    /// Features are average-pooled to this square resolution before the
    /// global correlation; every level's spatial size must be a multiple.
    pub corr_resolution: usize,
    /// Hidden width of the two-layer regression head.
    pub hidden: usize,
    /// Bound on the regressed corner offsets per level (tanh scaling).
    pub max_offset_per_level: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            input_channels: 1,
            feat_channels: 32,
            corr_resolution: 8,
            hidden: 64,
            max_offset_per_level: 10.0,
        }
    }
}

/// Whether cells run the full mixture or a fixed discretized architecture.
#[derive(Debug, Clone)]
pub enum CellMode {
    Mixed,
    Fixed(Vec<Genotype>),
}

/// Output nodes of a differentiable estimation pass.
pub struct EstimateNodes {
    /// Predicted homography as a `[9]` node, canonical scale.
    pub h: NodeId,
    /// Accumulated corner offsets, `[8]`.
    pub total_offsets: NodeId,
    /// Residual offsets regressed at each level, coarsest first.
    pub level_offsets: Vec<NodeId>,
}

#[derive(Debug, Clone)]
pub struct EstimatorModel {
    pub config: EstimatorConfig,
    pub cells: Vec<MixedCell>,
    pub mode: CellMode,
}

impl EstimatorModel {
    /// Registers all estimator parameters under the `est.` prefix.
    ///
    /// Regression-head output layers start at zero so an untrained model
    /// predicts the identity homography.
    pub fn init(store: &mut ParamStore, config: &EstimatorConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = config.feat_channels;
        let cin = config.input_channels;
        store.insert("est.stem.w", kaiming_uniform(rng, &[c, cin, 3, 3], cin * 9));
        store.insert("est.stem.b", Tensor::zeros(&[c]));
        for level in (0..PYRAMID_LEVELS - 1).rev() {
            store.insert(
                &format!("est.down{level}.w"),
                kaiming_uniform(rng, &[c, c, 3, 3], c * 9),
            );
            store.insert(&format!("est.down{level}.b"), Tensor::zeros(&[c]));
        }
        let cells: Vec<MixedCell> = (0..PYRAMID_LEVELS)
            .map(|l| MixedCell::init(store, &format!("est.cell{l}"), c, rng))
            .collect();
        let corr = config.corr_resolution * config.corr_resolution;
        for level in 0..PYRAMID_LEVELS {
            store.insert(
                &format!("est.head{level}.w1"),
                kaiming_uniform(rng, &[corr * corr, config.hidden], corr * corr),
            );
            store.insert(&format!("est.head{level}.b1"), Tensor::zeros(&[1, config.hidden]));
            store.insert(
                &format!("est.head{level}.w2"),
                Tensor::zeros(&[config.hidden, 8]),
            );
            store.insert(&format!("est.head{level}.b2"), Tensor::zeros(&[1, 8]));
        }
        EstimatorModel {
            config: config.clone(),
            cells,
            mode: CellMode::Mixed,
        }
    }

    /// All estimator parameter names except the architecture logits.
    pub fn theta_names(&self, store: &ParamStore) -> Vec<String> {
        store
            .names_with_prefix("est.")
            .filter(|n| !n.ends_with(".alpha"))
            .map(|n| n.to_string())
            .collect()
    }

    /// Architecture logits of the three cells.
    pub fn alpha_names(&self) -> Vec<String> {
        self.cells.iter().map(|c| c.alpha_name()).collect()
    }

    /// Discretizes every cell with `k` retained edges per node.
    pub fn discretize(&self, store: &ParamStore, k: usize) -> Vec<Genotype> {
        self.cells.iter().map(|c| c.discretize(store, k)).collect()
    }

    fn validate_input(&self, img: &Tensor) -> Result<(usize, usize)> {
        let (c, h, w) = img.chw();
        if c != self.config.input_channels {
            return Err(CoreError::ShapeMismatch {
                expected: vec![self.config.input_channels],
                got: vec![c],
            });
        }
        if h != w {
            return Err(CoreError::BadShape(format!(
                "estimator input must be square, got {h}x{w}"
            )));
        }
        if h % 4 != 0 {
            return Err(CoreError::BadShape(format!(
                "estimator input side must be divisible by 4, got {h}"
            )));
        }
        if h / 4 < 5 {
            return Err(CoreError::BadShape(format!(
                "side {h} gives a {}-pixel coarsest level; cells need at least 5",
                h / 4
            )));
        }
        for level in 0..PYRAMID_LEVELS {
            let s = (h / 4) << level;
            if s % self.config.corr_resolution != 0 {
                return Err(CoreError::BadShape(format!(
                    "level size {s} is not a multiple of the correlation resolution {}",
                    self.config.corr_resolution
                )));
            }
        }
        Ok((h, w))
    }

    fn cell_forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        leaves: &mut LeafCache,
        level: usize,
        input: NodeId,
    ) -> Result<NodeId> {
        match &self.mode {
            CellMode::Mixed => self.cells[level].forward(g, store, leaves, input),
            CellMode::Fixed(genotypes) => self.cells[level].forward_genotype(
                g,
                store,
                leaves,
                &genotypes[level],
                input,
            ),
        }
    }

    /// Builds the three-level feature pyramid, coarsest first.
    pub fn extract_pyramid(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        leaves: &mut LeafCache,
        img: NodeId,
    ) -> Result<Vec<NodeId>> {
        self.validate_input(g.value(img))?;
        let stem_w = leaves.leaf(g, store, "est.stem.w");
        let stem_b = leaves.leaf(g, store, "est.stem.b");
        let mut x = g.conv2d(img, stem_w, 1, 1);
        x = g.add_channel_bias(x, stem_b);
        x = g.relu(x);
        let finest = self.cell_forward(g, store, leaves, PYRAMID_LEVELS - 1, x)?;
        let mut levels = vec![finest];
        let mut current = finest;
        for level in (0..PYRAMID_LEVELS - 1).rev() {
            let pooled = g.avg_pool(current, 2, 2, 0);
            let w = leaves.leaf(g, store, &format!("est.down{level}.w"));
            let b = leaves.leaf(g, store, &format!("est.down{level}.b"));
            let mut y = g.conv2d(pooled, w, 1, 1);
            y = g.add_channel_bias(y, b);
            y = g.relu(y);
            current = self.cell_forward(g, store, leaves, level, y)?;
            levels.push(current);
        }
        levels.reverse();
        Ok(levels)
    }

    /// Coarse-to-fine estimation; see the module docs for the recipe.
    pub fn estimate_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        leaves: &mut LeafCache,
        x1: NodeId,
        x2: NodeId,
    ) -> Result<EstimateNodes> {
        let shape1 = g.value(x1).shape().to_vec();
        g.value(x2).require_shape(&shape1)?;
        let side = shape1[1];
        let pyr1 = self.extract_pyramid(g, store, leaves, x1)?;
        let pyr2 = self.extract_pyramid(g, store, leaves, x2)?;
        let corners = frame_corners(side, side);
        let mut total = g.leaf(Tensor::zeros(&[8]));
        let mut level_offsets = Vec::with_capacity(PYRAMID_LEVELS);
        for level in 0..PYRAMID_LEVELS {
            let feat_side = (side / 4) << level;
            let h_img = g.dlt4(total, corners)?;
            let h_feat = image_to_feature_scale(g, h_img, side, feat_side);
            let h_feat_inv = g.inverse3(h_feat)?;
            let canvas = CanvasSpec::source_frame(feat_side, feat_side);
            let warped2 = g.warp(pyr2[level], h_feat_inv, &canvas);
            let corr = global_correlation_pooled(
                g,
                pyr1[level],
                warped2,
                self.config.corr_resolution,
            )?;
            let residual = self.regress_offsets(g, store, leaves, level, corr);
            total = g.add(total, residual);
            level_offsets.push(residual);
        }
        let h = g.dlt4(total, corners)?;
        Ok(EstimateNodes {
            h,
            total_offsets: total,
            level_offsets,
        })
    }

    fn regress_offsets(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        leaves: &mut LeafCache,
        level: usize,
        corr: NodeId,
    ) -> NodeId {
        let n = g.value(corr).numel();
        let flat = g.reshape(corr, &[1, n]);
        let w1 = leaves.leaf(g, store, &format!("est.head{level}.w1"));
        let b1 = leaves.leaf(g, store, &format!("est.head{level}.b1"));
        let w2 = leaves.leaf(g, store, &format!("est.head{level}.w2"));
        let b2 = leaves.leaf(g, store, &format!("est.head{level}.b2"));
        let mut y = g.matmul(flat, w1);
        y = g.add(y, b1);
        y = g.relu(y);
        y = g.matmul(y, w2);
        y = g.add(y, b2);
        let bounded = g.tanh(y);
        let scaled = g.scale(bounded, self.config.max_offset_per_level);
        g.reshape(scaled, &[8])
    }

    /// Plain (non-graph) estimation, returning the homography and the
    /// per-level corner offsets.
    pub fn estimate(
        &self,
        store: &ParamStore,
        x1: &Tensor,
        x2: &Tensor,
    ) -> Result<(Homography, Vec<CornerOffsets>)> {
        let mut g = Graph::new();
        let x1 = g.leaf(x1.clone());
        let x2 = g.leaf(x2.clone());
        let mut leaves = LeafCache::new();
        let est = self.estimate_graph(&mut g, store, &mut leaves, x1, x2)?;
        let mut m = [0.0; 9];
        m.copy_from_slice(g.value(est.h).data());
        let offsets = est
            .level_offsets
            .iter()
            .map(|&id| CornerOffsets::from_flat(g.value(id).data()))
            .collect();
        Ok((Homography::from_array(m)?, offsets))
    }
}

/// Rescales a homography expressed in image pixel coordinates to feature
/// coordinates at a coarser grid, respecting pixel-center alignment:
/// `x_feat = (x_img - (q-1)/2) / q` with `q` the downsampling factor.
fn image_to_feature_scale(g: &mut Graph, h_img: NodeId, img_side: usize, feat_side: usize) -> NodeId {
    let q = (img_side / feat_side) as f64;
    if q == 1.0 {
        return h_img;
    }
    let t = (q - 1.0) / 2.0;
    // T maps image coords to feature coords; H_feat = T . H . T^-1.
    let fwd = Tensor::from_vec(
        &[3, 3],
        vec![1.0 / q, 0.0, -t / q, 0.0, 1.0 / q, -t / q, 0.0, 0.0, 1.0],
    );
    let bwd = Tensor::from_vec(
        &[3, 3],
        vec![q, 0.0, t, 0.0, q, t, 0.0, 0.0, 1.0],
    );
    let fwd = g.leaf(fwd);
    let bwd = g.leaf(bwd);
    let h3 = g.reshape(h_img, &[3, 3]);
    let m = g.matmul(fwd, h3);
    let m = g.matmul(m, bwd);
    g.reshape(m, &[9])
}

/// Global correlation volume between two same-shape feature maps, pooled to
/// `corr_resolution` first: entry `(i, j)` is the channel inner product of
/// pooled position `i` in `f1` with pooled position `j` in `f2`, scaled by
/// `1/channels`.
pub fn global_correlation_pooled(
    g: &mut Graph,
    f1: NodeId,
    f2: NodeId,
    corr_resolution: usize,
) -> Result<NodeId> {
    let (c, h, w) = g.value(f1).chw();
    let shape1 = g.value(f1).shape().to_vec();
    g.value(f2).require_shape(&shape1)?;
    if h % corr_resolution != 0 || w % corr_resolution != 0 {
        return Err(CoreError::BadShape(format!(
            "feature size {h}x{w} is not a multiple of the correlation resolution {corr_resolution}"
        )));
    }
    let factor = h / corr_resolution;
    let (p1, p2) = if factor > 1 {
        (
            g.avg_pool(f1, factor, factor, 0),
            g.avg_pool(f2, factor, factor, 0),
        )
    } else {
        (f1, f2)
    };
    global_correlation(g, p1, p2, c)
}

/// Raw global correlation of two `[c, h, w]` maps: `(h*w) x (h*w)`, scaled
/// by `1/c`.
pub fn global_correlation(g: &mut Graph, f1: NodeId, f2: NodeId, c: usize) -> Result<NodeId> {
    let (c1, h, w) = g.value(f1).chw();
    let shape1 = g.value(f1).shape().to_vec();
    g.value(f2).require_shape(&shape1)?;
    debug_assert_eq!(c, c1);
    let n = h * w;
    let a = g.reshape(f1, &[c, n]);
    let b = g.reshape(f2, &[c, n]);
    let at = g.transpose(a);
    let m = g.matmul(at, b);
    Ok(g.scale(m, 1.0 / c as f64))
}
