//! Alignment losses on homographies and shared image regions.
//!
//! Conventions, fixed once for the whole crate: the second view `x2` is
//! always the one being warped toward `x1`'s frame. The shared-region loss
//! compares `x1`, masked to where `x2`'s warp has support, against the warp
//! itself. The alignment-shift loss compares two warps of the *same* image
//! under a reference and a perturbed homography on a common canvas, so two
//! equal homographies always score exactly zero.
//!
//! Every builder returns a scalar node on the caller's graph; plain `f64`
//! wrappers construct a throwaway graph.

use crate::cells::LeafCache;
use crate::error::Result;
use crate::estimator::EstimatorModel;
use crate::geometry::{canvas_for_frames, CanvasSpec, Homography, DEFAULT_MAX_CANVAS_FACTOR};
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// `|| H_ref - H_pred ||_2`, entrywise over the two 3x3 matrices, with the
/// reference supplied as a constant.
pub fn loss_h_graph(g: &mut Graph, h_pred: NodeId, h_ref: &Homography) -> NodeId {
    let ref_leaf = g.leaf(Tensor::from_vec(&[9], h_ref.as_array().to_vec()));
    let diff = g.sub(h_pred, ref_leaf);
    g.l2_norm(diff)
}

/// Frobenius distance between two homographies (the plain value of
/// [`loss_h_graph`]).
pub fn loss_h(h_pred: &Homography, h_ref: &Homography) -> f64 {
    h_pred.frobenius_distance(h_ref)
}

/// Shared-region consistency on `x1`'s frame:
/// `|| mask(H) * x1 - warp(x2, H) ||_2` with `mask(H)` the warped all-ones
/// image. Differentiable in `x1`, `x2` and the homography node.
pub fn loss_s_graph(g: &mut Graph, x1: NodeId, x2: NodeId, h: NodeId) -> Result<NodeId> {
    let shape = g.value(x1).shape().to_vec();
    g.value(x2).require_shape(&shape)?;
    let (_, height, width) = g.value(x1).chw();
    let canvas = CanvasSpec::source_frame(height, width);
    let hinv = g.inverse3(h)?;
    let ones = g.leaf(Tensor::full(&shape, 1.0));
    let mask = g.warp(ones, hinv, &canvas);
    let warped2 = g.warp(x2, hinv, &canvas);
    let masked1 = g.mul(mask, x1);
    let diff = g.sub(masked1, warped2);
    Ok(g.l2_norm(diff))
}

/// Plain value of [`loss_s_graph`].
pub fn loss_s(x1: &Tensor, x2: &Tensor, h: &Homography) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.leaf(x1.clone());
    let b = g.leaf(x2.clone());
    let hn = g.leaf(Tensor::from_vec(&[9], h.as_array().to_vec()));
    let loss = loss_s_graph(&mut g, a, b, hn)?;
    Ok(g.value(loss).item())
}

/// Canvas covering `x1`'s identity frame plus `x2`'s frame under both the
/// reference and the predicted homography, as the alignment-shift loss
/// requires.
pub fn alignment_canvas(
    h_ref: &Homography,
    h_pred: &Homography,
    shape1: (usize, usize),
    shape2: (usize, usize),
) -> Result<CanvasSpec> {
    canvas_for_frames(
        &[
            (Homography::identity(), shape1),
            (*h_ref, shape2),
            (*h_pred, shape2),
        ],
        DEFAULT_MAX_CANVAS_FACTOR,
    )
}

/// Alignment-shift loss on a shared canvas:
/// `|| M * warp(x2, H_ref) - M * warp(x2, H_pred) ||_2` where `M` is the
/// identity warp of an all-ones image of `x1`'s shape. The same `x2` feeds
/// both warps, so the loss isolates the homography deviation and vanishes
/// when the two transforms agree.
pub fn loss_as_graph(
    g: &mut Graph,
    x2: NodeId,
    h_ref: &Homography,
    h_pred: NodeId,
    canvas: &CanvasSpec,
    shape1: (usize, usize),
) -> Result<NodeId> {
    let (c, _, _) = g.value(x2).chw();
    // The identity-frame mask and the reference warp are constants with
    // respect to the graph; only the predicted branch carries gradients.
    let mask_frame = crate::geometry::shared_mask(&Homography::identity(), shape1, canvas)?;
    let mask = broadcast_mask(g, &mask_frame, c);
    // Raw (unnormalized) inverse: bit-identical to the graph's inverse op,
    // so equal reference and prediction cancel exactly.
    let href_inv = crate::geometry::inv3(h_ref.as_array()).ok_or_else(|| {
        crate::error::CoreError::DegenerateConfiguration("reference homography is singular".into())
    })?;
    let href_inv = g.leaf(Tensor::from_vec(&[9], href_inv.to_vec()));
    let warped_ref = g.warp(x2, href_inv, canvas);
    let hpred_inv = g.inverse3(h_pred)?;
    let warped_pred = g.warp(x2, hpred_inv, canvas);
    let a = g.mul(mask, warped_ref);
    let mask2 = broadcast_mask(g, &mask_frame, c);
    let b = g.mul(mask2, warped_pred);
    let diff = g.sub(a, b);
    Ok(g.l2_norm(diff))
}

fn broadcast_mask(g: &mut Graph, mask: &Tensor, channels: usize) -> NodeId {
    let (_, h, w) = mask.chw();
    let mut data = Vec::with_capacity(channels * h * w);
    for _ in 0..channels {
        data.extend_from_slice(mask.data());
    }
    g.leaf(Tensor::from_vec(&[channels, h, w], data))
}

/// Plain value of [`loss_as_graph`]; computes the covering canvas itself.
pub fn loss_as(
    x2: &Tensor,
    h_ref: &Homography,
    h_pred: &Homography,
    shape1: (usize, usize),
) -> Result<f64> {
    let (_, h, w) = x2.chw();
    let canvas = alignment_canvas(h_ref, h_pred, shape1, (h, w))?;
    let mut g = Graph::new();
    let x2n = g.leaf(x2.clone());
    let hp = g.leaf(Tensor::from_vec(&[9], h_pred.as_array().to_vec()));
    let loss = loss_as_graph(&mut g, x2n, h_ref, hp, &canvas, shape1)?;
    Ok(g.value(loss).item())
}

/// The stitching-oriented objective: homography disparity plus alignment
/// shift, sharing one predicted-homography node.
pub fn loss_soa_graph(
    g: &mut Graph,
    x2: NodeId,
    h_ref: &Homography,
    h_pred: NodeId,
    canvas: &CanvasSpec,
    shape1: (usize, usize),
) -> Result<NodeId> {
    let lh = loss_h_graph(g, h_pred, h_ref);
    let las = loss_as_graph(g, x2, h_ref, h_pred, canvas, shape1)?;
    Ok(g.add(lh, las))
}

/// Plain stitching-oriented loss of a model prediction against a reference.
pub fn loss_soa(
    model: &EstimatorModel,
    store: &ParamStore,
    x1: &Tensor,
    x2: &Tensor,
    h_ref: &Homography,
) -> Result<f64> {
    let (_, height, width) = x1.chw();
    let (h_pred, _) = model.estimate(store, x1, x2)?;
    let canvas = alignment_canvas(h_ref, &h_pred, (height, width), (height, width))?;
    let mut g = Graph::new();
    let x1n = g.leaf(x1.clone());
    let x2n = g.leaf(x2.clone());
    let mut leaves = LeafCache::new();
    let est = model.estimate_graph(&mut g, store, &mut leaves, x1n, x2n)?;
    let loss = loss_soa_graph(&mut g, x2n, h_ref, est.h, &canvas, (height, width))?;
    Ok(g.value(loss).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{dlt4_from_offsets, frame_corners, warp_image};
    use crate::gradcheck::{check_gradients, GradCheckConfig};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn smooth_image(side: usize, phase: f64) -> Tensor {
        let data: Vec<f64> = (0..side * side)
            .map(|i| {
                let (y, x) = ((i / side) as f64, (i % side) as f64);
                0.5 + 0.35 * ((0.31 * x + phase).sin() * (0.23 * y - phase).cos())
            })
            .collect();
        Tensor::from_vec(&[1, side, side], data)
    }

    #[test]
    fn loss_h_identity_pair_is_zero() {
        let h = Homography::identity();
        assert_eq!(loss_h(&h, &h), 0.0);
    }

    #[test]
    fn loss_h_translation_is_single_entry() {
        let a = Homography::identity();
        let b = Homography::translation(3.0, 0.0);
        assert!((loss_h(&a, &b) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn loss_h_matches_direct_frobenius() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let mut off = [0.0; 8];
            for v in &mut off {
                *v = rng.gen_range(-4.0..4.0);
            }
            let corners = frame_corners(32, 32);
            let a = Homography::from_array(dlt4_from_offsets(&corners, &off).unwrap()).unwrap();
            for v in &mut off {
                *v = rng.gen_range(-4.0..4.0);
            }
            let b = Homography::from_array(dlt4_from_offsets(&corners, &off).unwrap()).unwrap();
            let direct: f64 = a
                .as_array()
                .iter()
                .zip(b.as_array())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            assert!((loss_h(&a, &b) - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_s_identity_same_image_is_zero() {
        let img = smooth_image(16, 0.3);
        let v = loss_s(&img, &img, &Homography::identity()).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn loss_s_on_consistent_warp_is_small() {
        // Sample both views from one larger smooth scene so no zero fill
        // leaks in: x1 is an interior crop, x2 samples the scene through H.
        // Then warp(x2, H) reproduces x1 up to interpolation error.
        let (big, side, margin) = (48usize, 32usize, 8usize);
        let scene = smooth_image(big, 0.0);
        let mut x1 = Tensor::zeros(&[1, side, side]);
        for y in 0..side {
            for x in 0..side {
                x1.data_mut()[y * side + x] = scene.data()[(y + margin) * big + (x + margin)];
            }
        }
        let corners = frame_corners(side, side);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut off = [0.0; 8];
        for v in &mut off {
            *v = rng.gen_range(-3.0..3.0);
        }
        let h = Homography::from_array(dlt4_from_offsets(&corners, &off).unwrap()).unwrap();
        // x2(s) = scene(H s + margin): warp(x2, H)(t) = x2(H^-1 t) ~ x1(t).
        let shift = Homography::translation(margin as f64, margin as f64);
        let sample_map = shift.compose(&h).unwrap();
        let canvas = CanvasSpec::source_frame(side, side);
        let x2 = crate::geometry::warp_forward(&scene, sample_map.as_array(), &canvas);
        let v = loss_s(&x1, &x2, &h).unwrap();
        // Interpolation residual only; normalize by sqrt(pixel count).
        let per_pixel = v / ((side * side) as f64).sqrt();
        assert!(per_pixel < 0.01, "per-pixel residual {per_pixel}");
    }

    #[test]
    fn loss_s_gradients_match_finite_differences() {
        let x1 = smooth_image(12, 0.1);
        let x2 = smooth_image(12, 0.7);
        let h = Tensor::from_vec(
            &[9],
            vec![1.01, 0.02, 0.5, -0.015, 0.99, -0.3, 1e-4, -8e-5, 1.0],
        );
        let report = check_gradients(
            &[x1, x2, h],
            |g, ids| loss_s_graph(g, ids[0], ids[1], ids[2]).unwrap(),
            &GradCheckConfig {
                step: 1e-5,
                max_checks_per_input: 24,
                ..GradCheckConfig::default()
            },
        );
        assert!(report.max_rel_error < 1e-3, "rel err {}", report.max_rel_error);
    }

    #[test]
    fn loss_as_equal_homographies_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x2 = smooth_image(16, 0.4);
        let corners = frame_corners(16, 16);
        let mut off = [0.0; 8];
        for v in &mut off {
            *v = rng.gen_range(-2.0..2.0);
        }
        let h = Homography::from_array(dlt4_from_offsets(&corners, &off).unwrap()).unwrap();
        let v = loss_as(&x2, &h, &h, (16, 16)).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn loss_as_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x2 = smooth_image(16, 0.9);
        let corners = frame_corners(16, 16);
        for _ in 0..10 {
            let mut off = [0.0; 8];
            for v in &mut off {
                *v = rng.gen_range(-2.0..2.0);
            }
            let a = Homography::from_array(dlt4_from_offsets(&corners, &off).unwrap()).unwrap();
            for v in &mut off {
                *v = rng.gen_range(-2.0..2.0);
            }
            let b = Homography::from_array(dlt4_from_offsets(&corners, &off).unwrap()).unwrap();
            let ab = loss_as(&x2, &a, &b, (16, 16)).unwrap();
            let ba = loss_as(&x2, &b, &a, (16, 16)).unwrap();
            assert!((ab - ba).abs() < 1e-9, "{ab} vs {ba}");
        }
    }

    #[test]
    fn loss_as_one_sided_when_warp_leaves_frame() {
        // H_pred shifts x2 fully outside x1's frame: the loss reduces to
        // the norm of the masked reference warp alone.
        let side = 12;
        let x2 = smooth_image(side, 0.2);
        let h_ref = Homography::identity();
        let h_pred = Homography::translation(3.0 * side as f64, 0.0);
        let canvas = alignment_canvas(&h_ref, &h_pred, (side, side), (side, side)).unwrap();
        let mut g = Graph::new();
        let x2n = g.leaf(x2.clone());
        let hp = g.leaf(Tensor::from_vec(&[9], h_pred.as_array().to_vec()));
        let loss = loss_as_graph(&mut g, x2n, &h_ref, hp, &canvas, (side, side)).unwrap();
        // reference term alone
        let mask = crate::geometry::shared_mask(&Homography::identity(), (side, side), &canvas)
            .unwrap();
        let warped = warp_image(&x2, &h_ref, &canvas).unwrap();
        let expect: f64 = mask
            .data()
            .iter()
            .zip(warped.data())
            .map(|(m, v)| (m * v) * (m * v))
            .sum::<f64>()
            .sqrt();
        assert!((g.value(loss).item() - expect).abs() < 1e-9);
    }

    #[test]
    fn loss_as_gradient_matches_finite_differences() {
        let side = 12;
        let x2 = smooth_image(side, 0.5);
        let corners = frame_corners(side, side);
        let off = [0.4, -0.3, 0.2, 0.5, -0.4, 0.25, 0.3, -0.2];
        let h_ref =
            Homography::from_array(dlt4_from_offsets(&corners, &off).unwrap()).unwrap();
        let hp = Tensor::from_vec(
            &[9],
            vec![1.02, 0.01, 0.4, -0.02, 0.98, -0.2, 1e-4, 5e-5, 1.0],
        );
        let h_pred = {
            let mut m = [0.0; 9];
            m.copy_from_slice(hp.data());
            Homography::from_array(m).unwrap()
        };
        let canvas = alignment_canvas(&h_ref, &h_pred, (side, side), (side, side)).unwrap();
        let report = check_gradients(
            &[x2, hp],
            |g, ids| loss_as_graph(g, ids[0], &h_ref, ids[1], &canvas, (side, side)).unwrap(),
            &GradCheckConfig {
                step: 1e-5,
                max_checks_per_input: 24,
                ..GradCheckConfig::default()
            },
        );
        assert!(report.max_rel_error < 1e-3, "rel err {}", report.max_rel_error);
    }

    #[test]
    fn loss_soa_is_sum_of_components_and_zero_on_exact_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let side = 16;
        let x2 = smooth_image(side, 0.8);
        let corners = frame_corners(side, side);
        let mut off = [0.0; 8];
        for v in &mut off {
            *v = rng.gen_range(-2.0..2.0);
        }
        let h_ref = Homography::from_array(dlt4_from_offsets(&corners, &off).unwrap()).unwrap();
        // exact prediction: both components vanish
        let canvas = alignment_canvas(&h_ref, &h_ref, (side, side), (side, side)).unwrap();
        let mut g = Graph::new();
        let x2n = g.leaf(x2.clone());
        let hp = g.leaf(Tensor::from_vec(&[9], h_ref.as_array().to_vec()));
        let total = loss_soa_graph(&mut g, x2n, &h_ref, hp, &canvas, (side, side)).unwrap();
        assert_eq!(g.value(total).item(), 0.0);

        // generic prediction: total equals the sum of the two parts
        for v in &mut off {
            *v = rng.gen_range(-2.0..2.0);
        }
        let h_pred = Homography::from_array(dlt4_from_offsets(&corners, &off).unwrap()).unwrap();
        let canvas = alignment_canvas(&h_ref, &h_pred, (side, side), (side, side)).unwrap();
        let mut g = Graph::new();
        let x2n = g.leaf(x2.clone());
        let hp = g.leaf(Tensor::from_vec(&[9], h_pred.as_array().to_vec()));
        let total = loss_soa_graph(&mut g, x2n, &h_ref, hp, &canvas, (side, side)).unwrap();
        let lh = loss_h(&h_pred, &h_ref);
        let las = {
            let mut g2 = Graph::new();
            let x2n = g2.leaf(x2.clone());
            let hp = g2.leaf(Tensor::from_vec(&[9], h_pred.as_array().to_vec()));
            let l = loss_as_graph(&mut g2, x2n, &h_ref, hp, &canvas, (side, side)).unwrap();
            g2.value(l).item()
        };
        assert!((g.value(total).item() - (lh + las)).abs() < 1e-12);
    }

    #[test]
    fn loss_as_grows_with_perturbation_size() {
        // Textured image: larger corner perturbations of the reference give
        // a larger (at least non-decreasing) alignment shift.
        let side = 24;
        let x2 = smooth_image(side, 0.0);
        let corners = frame_corners(side, side);
        let h_ref = Homography::identity();
        let mut last = 0.0;
        for scale in [0.5, 1.0, 2.0, 4.0] {
            let off = [scale, -scale, -scale, scale, scale, scale, -scale, -scale];
            let h_pred =
                Homography::from_array(dlt4_from_offsets(&corners, &off).unwrap()).unwrap();
            let v = loss_as(&x2, &h_ref, &h_pred, (side, side)).unwrap();
            assert!(v >= last, "loss {v} dropped below {last} at scale {scale}");
            last = v;
        }
    }
}
