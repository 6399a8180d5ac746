//! Homography algebra, DLT solving, differentiable inverse warping, shared
//! masks and stitching-canvas computation.
//!
//! Coordinate convention (used everywhere in this crate): pixel centers sit
//! at integer coordinates, the origin is the top-left pixel, `x` grows to
//! the right and `y` grows downward. An `h x w` image spans
//! `[0, w-1] x [0, h-1]`.
//!
//! `warp_image(img, H, canvas)` places `img`, transformed by the forward map
//! `H`, onto the canvas: the output pixel at canvas coordinate `q` samples
//! `img` bilinearly at `H^-1 (q - offset)`. Samples outside the source are
//! zero-filled, which is what gives warped all-ones masks their meaning.
//!
//! All functions here are pure; values are immutable once constructed and
//! safe to share across threads.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Determinant threshold below which a 3x3 transform counts as singular.
pub const DET_EPS: f64 = 1e-12;

/// A 3x3 planar projective transform, stored row-major and normalized so the
/// bottom-right entry equals 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    m: [f64; 9],
}

impl Homography {
    pub fn identity() -> Self {
        Homography {
            m: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Homography {
            m: [1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0],
        }
    }

    /// Builds from a row-major 9-array, normalizing to canonical scale.
    ///
    /// Fails if the bottom-right entry vanishes or the matrix is singular.
    pub fn from_array(m: [f64; 9]) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(CoreError::DegenerateConfiguration(
                "non-finite homography entries".into(),
            ));
        }
        let s = m[8];
        if s.abs() < DET_EPS {
            return Err(CoreError::DegenerateConfiguration(
                "homography cannot be normalized: bottom-right entry is ~0".into(),
            ));
        }
        let mut n = m;
        for v in &mut n {
            *v /= s;
        }
        let h = Homography { m: n };
        if h.det().abs() < DET_EPS {
            return Err(CoreError::DegenerateConfiguration(
                "homography is singular".into(),
            ));
        }
        Ok(h)
    }

    pub fn as_array(&self) -> &[f64; 9] {
        &self.m
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.m[3 * r + c]
    }

    pub fn det(&self) -> f64 {
        det3(&self.m)
    }

    /// Maps a point through the transform, dividing by the projective depth.
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.m;
        let d = m[6] * x + m[7] * y + m[8];
        ((m[0] * x + m[1] * y + m[2]) / d, (m[3] * x + m[4] * y + m[5]) / d)
    }

    pub fn inverse(&self) -> Result<Homography> {
        let inv = inv3(&self.m).ok_or_else(|| {
            CoreError::DegenerateConfiguration("homography is singular".into())
        })?;
        Homography::from_array(inv)
    }

    /// `self * other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Homography) -> Result<Homography> {
        Homography::from_array(matmul3(&self.m, &other.m))
    }

    /// Frobenius norm of the entrywise difference between two transforms.
    pub fn frobenius_distance(&self, other: &Homography) -> f64 {
        self.m
            .iter()
            .zip(other.m.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// 3x3 determinant of a row-major array.
pub fn det3(m: &[f64; 9]) -> f64 {
    m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
        + m[2] * (m[3] * m[7] - m[4] * m[6])
}

/// 3x3 inverse via the adjugate; `None` when singular.
pub fn inv3(m: &[f64; 9]) -> Option<[f64; 9]> {
    let d = det3(m);
    if d.abs() < DET_EPS {
        return None;
    }
    let inv_d = 1.0 / d;
    Some([
        (m[4] * m[8] - m[5] * m[7]) * inv_d,
        (m[2] * m[7] - m[1] * m[8]) * inv_d,
        (m[1] * m[5] - m[2] * m[4]) * inv_d,
        (m[5] * m[6] - m[3] * m[8]) * inv_d,
        (m[0] * m[8] - m[2] * m[6]) * inv_d,
        (m[2] * m[3] - m[0] * m[5]) * inv_d,
        (m[3] * m[7] - m[4] * m[6]) * inv_d,
        (m[1] * m[6] - m[0] * m[7]) * inv_d,
        (m[0] * m[4] - m[1] * m[3]) * inv_d,
    ])
}

/// Row-major 3x3 product `a * b`.
pub fn matmul3(a: &[f64; 9], b: &[f64; 9]) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[3 * r + c] =
                a[3 * r] * b[c] + a[3 * r + 1] * b[3 + c] + a[3 * r + 2] * b[6 + c];
        }
    }
    out
}

/// The four corner coordinates of an `(h, w)` frame, in the order
/// top-left, top-right, bottom-right, bottom-left.
pub fn frame_corners(h: usize, w: usize) -> [[f64; 2]; 4] {
    let (hf, wf) = ((h - 1) as f64, (w - 1) as f64);
    [[0.0, 0.0], [wf, 0.0], [wf, hf], [0.0, hf]]
}

/// Four per-corner displacement vectors `(dx, dy)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerOffsets {
    pub offsets: [[f64; 2]; 4],
}

impl CornerOffsets {
    pub fn zero() -> Self {
        CornerOffsets {
            offsets: [[0.0; 2]; 4],
        }
    }

    pub fn from_flat(v: &[f64]) -> Self {
        assert_eq!(v.len(), 8);
        CornerOffsets {
            offsets: [
                [v[0], v[1]],
                [v[2], v[3]],
                [v[4], v[5]],
                [v[6], v[7]],
            ],
        }
    }

    pub fn to_flat(&self) -> [f64; 8] {
        let o = &self.offsets;
        [
            o[0][0], o[0][1], o[1][0], o[1][1], o[2][0], o[2][1], o[3][0], o[3][1],
        ]
    }

    pub fn max_abs(&self) -> f64 {
        self.to_flat().iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Output domain of a warp: canvas dimensions plus the pure translation that
/// maps source coordinates into canvas coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CanvasSpec {
    pub width: usize,
    pub height: usize,
    /// Translation offset in x: canvas_x = source_x + offset_x.
    pub offset_x: f64,
    /// Translation offset in y: canvas_y = source_y + offset_y.
    pub offset_y: f64,
}

impl CanvasSpec {
    /// Canvas that exactly covers one `(h, w)` source frame.
    pub fn source_frame(h: usize, w: usize) -> Self {
        CanvasSpec {
            width: w,
            height: h,
            offset_x: 0.0,
            offset_y: 0.0,
        }
    }

    /// The offset as a translation homography.
    pub fn offset_homography(&self) -> Homography {
        Homography::translation(self.offset_x, self.offset_y)
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }
}

/// Default divergence guard: a canvas may cover at most this multiple of the
/// larger input image's area.
pub const DEFAULT_MAX_CANVAS_FACTOR: f64 = 16.0;

/// Canvas bounding the union of several warped frames.
///
/// Each entry maps an `(h, w)` frame through its homography; the canvas is
/// the integer bounding box of all projected corners, with the offset chosen
/// so every coordinate becomes non-negative.
pub fn canvas_for_frames(
    frames: &[(Homography, (usize, usize))],
    max_area_factor: f64,
) -> Result<CanvasSpec> {
    assert!(!frames.is_empty());
    let mut xmin = f64::INFINITY;
    let mut xmax = f64::NEG_INFINITY;
    let mut ymin = f64::INFINITY;
    let mut ymax = f64::NEG_INFINITY;
    let mut max_input_area = 0usize;
    for (h_mat, (h, w)) in frames {
        max_input_area = max_input_area.max(h * w);
        for c in frame_corners(*h, *w) {
            let (x, y) = h_mat.apply(c[0], c[1]);
            if !x.is_finite() || !y.is_finite() {
                return Err(CoreError::DegenerateConfiguration(
                    "frame corner projects to infinity".into(),
                ));
            }
            xmin = xmin.min(x);
            xmax = xmax.max(x);
            ymin = ymin.min(y);
            ymax = ymax.max(y);
        }
    }
    let xmin = xmin.floor();
    let ymin = ymin.floor();
    let width = (xmax.ceil() - xmin) as usize + 1;
    let height = (ymax.ceil() - ymin) as usize + 1;
    let area = width * height;
    if area as f64 > max_area_factor * max_input_area as f64 {
        return Err(CoreError::ExcessiveCanvas {
            area,
            limit: max_area_factor,
        });
    }
    Ok(CanvasSpec {
        width,
        height,
        offset_x: -xmin,
        offset_y: -ymin,
    })
}

/// Canvas bounding image 1's frame and image 2's frame mapped through `h`.
pub fn canvas_from_homography(
    h: &Homography,
    shape1: (usize, usize),
    shape2: (usize, usize),
) -> Result<CanvasSpec> {
    canvas_for_frames(
        &[(Homography::identity(), shape1), (*h, shape2)],
        DEFAULT_MAX_CANVAS_FACTOR,
    )
}

/// Mean Euclidean displacement of the four `(h, w)` frame corners mapped by
/// `h_pred` versus `h_gt`.
pub fn corner_error(h_pred: &Homography, h_gt: &Homography, shape: (usize, usize)) -> f64 {
    let corners = frame_corners(shape.0, shape.1);
    let mut total = 0.0;
    for c in corners {
        let (xa, ya) = h_pred.apply(c[0], c[1]);
        let (xb, yb) = h_gt.apply(c[0], c[1]);
        total += ((xa - xb).powi(2) + (ya - yb).powi(2)).sqrt();
    }
    total / 4.0
}

// ---------------------------------------------------------------------------
// DLT
// ---------------------------------------------------------------------------

/// Hartley normalization: translate the centroid to the origin and scale so
/// the RMS distance from it is sqrt(2).
fn hartley_normalize(pts: &[[f64; 2]]) -> ([f64; 9], Vec<[f64; 2]>) {
    let n = pts.len() as f64;
    let cx: f64 = pts.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy: f64 = pts.iter().map(|p| p[1]).sum::<f64>() / n;
    let rms = (pts
        .iter()
        .map(|p| (p[0] - cx).powi(2) + (p[1] - cy).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    let s = if rms > 1e-15 {
        std::f64::consts::SQRT_2 / rms
    } else {
        1.0
    };
    let t = [s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0];
    let normed = pts.iter().map(|p| [s * (p[0] - cx), s * (p[1] - cy)]).collect();
    (t, normed)
}

/// Solves for the homography mapping each `src` point to its `dst` point
/// from >=4 correspondences (exact for 4, least-squares beyond).
///
/// Points are Hartley-normalized before the solve. The result carries the
/// canonical bottom-right-equals-1 scale. Fails with
/// `DegenerateConfiguration` when the linear system is rank-deficient, e.g.
/// when three source points are collinear.
pub fn dlt_solve(correspondences: &[([f64; 2], [f64; 2])]) -> Result<Homography> {
    let n = correspondences.len();
    if n < 4 {
        return Err(CoreError::DegenerateConfiguration(format!(
            "need at least 4 correspondences, got {n}"
        )));
    }
    let src: Vec<[f64; 2]> = correspondences.iter().map(|c| c.0).collect();
    let dst: Vec<[f64; 2]> = correspondences.iter().map(|c| c.1).collect();
    let (t_src, src_n) = hartley_normalize(&src);
    let (t_dst, dst_n) = hartley_normalize(&dst);

    let mut a = nalgebra::DMatrix::<f64>::zeros(2 * n, 9);
    for i in 0..n {
        let (sx, sy) = (src_n[i][0], src_n[i][1]);
        let (dx, dy) = (dst_n[i][0], dst_n[i][1]);
        a[(2 * i, 3)] = -sx;
        a[(2 * i, 4)] = -sy;
        a[(2 * i, 5)] = -1.0;
        a[(2 * i, 6)] = dy * sx;
        a[(2 * i, 7)] = dy * sy;
        a[(2 * i, 8)] = dy;
        a[(2 * i + 1, 0)] = sx;
        a[(2 * i + 1, 1)] = sy;
        a[(2 * i + 1, 2)] = 1.0;
        a[(2 * i + 1, 6)] = -dx * sx;
        a[(2 * i + 1, 7)] = -dx * sy;
        a[(2 * i + 1, 8)] = -dx;
    }

    // The solution is the eigenvector of A^T A with the smallest eigenvalue.
    let ata = a.transpose() * &a;
    let eig = nalgebra::SymmetricEigen::new(ata);
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[i]
            .abs()
            .partial_cmp(&eig.eigenvalues[j].abs())
            .unwrap()
    });
    let min_idx = order[0];
    // A second near-zero eigenvalue means the null space has dimension > 1:
    // the correspondences do not pin down a unique homography.
    let lam_max = eig.eigenvalues[order[8]].abs().max(1e-300);
    if eig.eigenvalues[order[1]].abs() / lam_max < 1e-10 {
        return Err(CoreError::DegenerateConfiguration(
            "DLT system is rank-deficient (collinear or repeated points)".into(),
        ));
    }

    let mut h_norm = [0.0; 9];
    for j in 0..9 {
        h_norm[j] = eig.eigenvectors[(j, min_idx)];
    }
    let t_dst_inv = inv3(&t_dst).ok_or_else(|| {
        CoreError::DegenerateConfiguration("normalization transform is singular".into())
    })?;
    let h = matmul3(&t_dst_inv, &matmul3(&h_norm, &t_src));
    Homography::from_array(h)
}

/// Exact homography from the four corner correspondences
/// `src[i] -> src[i] + offsets[i]`, solved as an 8x8 linear system with the
/// bottom-right entry pinned to 1.
///
/// This is the differentiable parameterization used by the estimator; the
/// gradient of the solve lives in the graph op that wraps it.
pub fn dlt4_from_offsets(src: &[[f64; 2]; 4], offsets: &[f64; 8]) -> Result<[f64; 9]> {
    let (a, b) = dlt4_system(src, offsets);
    let lu = nalgebra::Matrix::from(a).lu();
    let sol = lu
        .solve(&nalgebra::Vector::from(b))
        .ok_or_else(|| CoreError::DegenerateConfiguration("4-point DLT system is singular".into()))?;
    let mut h = [0.0; 9];
    h[..8].copy_from_slice(sol.as_slice());
    h[8] = 1.0;
    if det3(&h).abs() < DET_EPS {
        return Err(CoreError::DegenerateConfiguration(
            "4-point DLT produced a singular homography".into(),
        ));
    }
    Ok(h)
}

/// The 8x8 system `A h8 = b` behind [`dlt4_from_offsets`].
pub fn dlt4_system(
    src: &[[f64; 2]; 4],
    offsets: &[f64; 8],
) -> (nalgebra::SMatrix<f64, 8, 8>, nalgebra::SVector<f64, 8>) {
    let mut a = nalgebra::SMatrix::<f64, 8, 8>::zeros();
    let mut b = nalgebra::SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let (x, y) = (src[i][0], src[i][1]);
        let (u, v) = (x + offsets[2 * i], y + offsets[2 * i + 1]);
        let r = 2 * i;
        a[(r, 0)] = x;
        a[(r, 1)] = y;
        a[(r, 2)] = 1.0;
        a[(r, 6)] = -u * x;
        a[(r, 7)] = -u * y;
        b[r] = u;
        a[(r + 1, 3)] = x;
        a[(r + 1, 4)] = y;
        a[(r + 1, 5)] = 1.0;
        a[(r + 1, 6)] = -v * x;
        a[(r + 1, 7)] = -v * y;
        b[r + 1] = v;
    }
    (a, b)
}

// ---------------------------------------------------------------------------
// Bilinear warp kernels
// ---------------------------------------------------------------------------

/// Bilinear tap layout for a sample location.
///
/// The cell index is `ceil(s) - 1`, so a sample at an exact integer
/// coordinate lands on the left/top cell with fractional weight 1. The value
/// is unchanged either way; the coordinate gradient becomes the left/top
/// one-sided difference, which keeps finite-difference checks deterministic.
#[inline]
fn cell_and_frac(s: f64) -> (i64, f64) {
    let i0 = s.ceil() as i64 - 1;
    (i0, s - i0 as f64)
}

#[inline]
fn tap(img: &[f64], h: usize, w: usize, plane: usize, y: i64, x: i64) -> f64 {
    if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
        0.0
    } else {
        img[plane + y as usize * w + x as usize]
    }
}

/// Forward warp: for each canvas pixel `q`, sample the source image at
/// `hinv * (q - offset)` with zero fill outside the source frame.
pub fn warp_forward(img: &Tensor, hinv: &[f64; 9], canvas: &CanvasSpec) -> Tensor {
    let (c, h, w) = img.chw();
    let (oh, ow) = (canvas.height, canvas.width);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let src = img.data();
    let dst = out.data_mut();
    for yo in 0..oh {
        let ty = yo as f64 - canvas.offset_y;
        for xo in 0..ow {
            let tx = xo as f64 - canvas.offset_x;
            let d = hinv[6] * tx + hinv[7] * ty + hinv[8];
            if d.abs() < 1e-12 {
                continue;
            }
            let sx = (hinv[0] * tx + hinv[1] * ty + hinv[2]) / d;
            let sy = (hinv[3] * tx + hinv[4] * ty + hinv[5]) / d;
            if sx <= -1.0 || sy <= -1.0 || sx >= w as f64 || sy >= h as f64 {
                continue;
            }
            let (x0, fx) = cell_and_frac(sx);
            let (y0, fy) = cell_and_frac(sy);
            for ch in 0..c {
                let plane = ch * h * w;
                let v00 = tap(src, h, w, plane, y0, x0);
                let v01 = tap(src, h, w, plane, y0, x0 + 1);
                let v10 = tap(src, h, w, plane, y0 + 1, x0);
                let v11 = tap(src, h, w, plane, y0 + 1, x0 + 1);
                let v = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01)
                    + fy * ((1.0 - fx) * v10 + fx * v11);
                dst[ch * oh * ow + yo * ow + xo] = v;
            }
        }
    }
    out
}

/// Backward pass of [`warp_forward`]: gradients with respect to the source
/// image and the nine entries of the inverse homography.
pub fn warp_backward(
    img: &Tensor,
    hinv: &[f64; 9],
    canvas: &CanvasSpec,
    grad_out: &Tensor,
) -> (Tensor, [f64; 9]) {
    let (c, h, w) = img.chw();
    let (oh, ow) = (canvas.height, canvas.width);
    assert_eq!(grad_out.shape(), &[c, oh, ow]);
    let src = img.data();
    let go = grad_out.data();
    let mut grad_img = Tensor::zeros(&[c, h, w]);
    let gi = grad_img.data_mut();
    let mut grad_hinv = [0.0f64; 9];
    for yo in 0..oh {
        let ty = yo as f64 - canvas.offset_y;
        for xo in 0..ow {
            let tx = xo as f64 - canvas.offset_x;
            let d = hinv[6] * tx + hinv[7] * ty + hinv[8];
            if d.abs() < 1e-12 {
                continue;
            }
            let sx = (hinv[0] * tx + hinv[1] * ty + hinv[2]) / d;
            let sy = (hinv[3] * tx + hinv[4] * ty + hinv[5]) / d;
            if sx <= -1.0 || sy <= -1.0 || sx >= w as f64 || sy >= h as f64 {
                continue;
            }
            let (x0, fx) = cell_and_frac(sx);
            let (y0, fy) = cell_and_frac(sy);
            let mut gsx = 0.0;
            let mut gsy = 0.0;
            for ch in 0..c {
                let g = go[ch * oh * ow + yo * ow + xo];
                if g == 0.0 {
                    continue;
                }
                let plane = ch * h * w;
                let v00 = tap(src, h, w, plane, y0, x0);
                let v01 = tap(src, h, w, plane, y0, x0 + 1);
                let v10 = tap(src, h, w, plane, y0 + 1, x0);
                let v11 = tap(src, h, w, plane, y0 + 1, x0 + 1);
                gsx += g * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                gsy += g * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
                // Scatter into the four taps that exist.
                let mut scatter = |y: i64, x: i64, wgt: f64| {
                    if x >= 0 && y >= 0 && x < w as i64 && y < h as i64 {
                        gi[plane + y as usize * w + x as usize] += g * wgt;
                    }
                };
                scatter(y0, x0, (1.0 - fy) * (1.0 - fx));
                scatter(y0, x0 + 1, (1.0 - fy) * fx);
                scatter(y0 + 1, x0, fy * (1.0 - fx));
                scatter(y0 + 1, x0 + 1, fy * fx);
            }
            if gsx != 0.0 || gsy != 0.0 {
                // s = (A t) / (g . t) with t = (tx, ty, 1); quotient rule.
                let inv_d = 1.0 / d;
                let t = [tx, ty, 1.0];
                for (k, tk) in t.iter().enumerate() {
                    grad_hinv[k] += gsx * tk * inv_d;
                    grad_hinv[3 + k] += gsy * tk * inv_d;
                    grad_hinv[6 + k] -= (gsx * sx + gsy * sy) * tk * inv_d;
                }
            }
        }
    }
    (grad_img, grad_hinv)
}

/// Warps `img` by the forward homography `h` onto the given canvas.
pub fn warp_image(img: &Tensor, h: &Homography, canvas: &CanvasSpec) -> Result<Tensor> {
    let hinv = h.inverse()?;
    Ok(warp_forward(img, hinv.as_array(), canvas))
}

/// Warp of an all-ones image: 1 where the warped frame has full support,
/// fractional in the one-pixel interpolation band, 0 elsewhere.
pub fn shared_mask(h: &Homography, shape: (usize, usize), canvas: &CanvasSpec) -> Result<Tensor> {
    let ones = Tensor::full(&[1, shape.0, shape.1], 1.0);
    warp_image(&ones, h, canvas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_well_conditioned(rng: &mut ChaCha8Rng) -> Homography {
        // Identity plus a bounded projective perturbation keeps the draw far
        // from singular while exercising all eight degrees of freedom.
        loop {
            let mut m = [0.0f64; 9];
            for (i, v) in m.iter_mut().enumerate() {
                let scale = if i == 6 || i == 7 { 0.1 } else { 1.0 };
                *v = rng.gen_range(-1.0..1.0) * scale;
            }
            m[0] += 2.0;
            m[4] += 2.0;
            m[8] = 2.0 + rng.gen_range(-0.5..0.5);
            if let Ok(h) = Homography::from_array(m) {
                if h.det().abs() > 0.1 {
                    return h;
                }
            }
        }
    }

    #[test]
    fn dlt_identity_from_unit_square() {
        let pts = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let corr: Vec<_> = pts.iter().map(|p| (*p, *p)).collect();
        let h = dlt_solve(&corr).unwrap();
        for (i, v) in h.as_array().iter().enumerate() {
            let expect = if i % 4 == 0 { 1.0 } else { 0.0 };
            assert!((v - expect).abs() < 1e-9, "entry {i} = {v}");
        }
    }

    #[test]
    fn dlt_pure_translation() {
        let pts = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let corr: Vec<_> = pts.iter().map(|p| (*p, [p[0] + 1.0, p[1]])).collect();
        let h = dlt_solve(&corr).unwrap();
        let expect = Homography::translation(1.0, 0.0);
        assert!(h.frobenius_distance(&expect) < 1e-9);
    }

    #[test]
    fn dlt_round_trip_recovers_random_homographies() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let base = [[0.0, 0.0], [4.0, 0.0], [4.0, 4.0], [0.0, 4.0]];
        for _ in 0..1000 {
            let h = random_well_conditioned(&mut rng);
            let corr: Vec<_> = base
                .iter()
                .map(|p| {
                    let (x, y) = h.apply(p[0], p[1]);
                    (*p, [x, y])
                })
                .collect();
            let solved = dlt_solve(&corr).unwrap();
            let err = solved
                .as_array()
                .iter()
                .zip(h.as_array())
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err < 1e-6, "round-trip error {err} for {:?}", h);
        }
    }

    #[test]
    fn dlt_inverse_direction_recovers_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let base = [[0.0, 0.0], [4.0, 0.0], [4.0, 4.0], [0.0, 4.0]];
        for _ in 0..200 {
            let h = random_well_conditioned(&mut rng);
            let corr: Vec<_> = base
                .iter()
                .map(|p| {
                    let (x, y) = h.apply(p[0], p[1]);
                    ([x, y], *p)
                })
                .collect();
            let solved = dlt_solve(&corr).unwrap();
            let hinv = h.inverse().unwrap();
            let err = solved
                .as_array()
                .iter()
                .zip(hinv.as_array())
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err < 1e-6, "inverse recovery error {err}");
        }
    }

    #[test]
    fn dlt_rejects_collinear_sources() {
        let corr = vec![
            ([0.0, 0.0], [0.0, 0.0]),
            ([1.0, 0.0], [1.0, 0.0]),
            ([2.0, 0.0], [2.0, 0.0]),
            ([3.0, 0.0], [3.0, 0.0]),
        ];
        assert!(matches!(
            dlt_solve(&corr),
            Err(CoreError::DegenerateConfiguration(_))
        ));
    }

    #[test]
    fn dlt4_matches_general_solver() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let src = frame_corners(64, 64);
        for _ in 0..200 {
            let mut off = [0.0f64; 8];
            for v in &mut off {
                *v = rng.gen_range(-8.0..8.0);
            }
            let h4 = dlt4_from_offsets(&src, &off).unwrap();
            let corr: Vec<_> = (0..4)
                .map(|i| {
                    (
                        src[i],
                        [src[i][0] + off[2 * i], src[i][1] + off[2 * i + 1]],
                    )
                })
                .collect();
            let hg = dlt_solve(&corr).unwrap();
            for (a, b) in h4.iter().zip(hg.as_array()) {
                assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn warp_identity_is_bitwise_copy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::from_vec(
            &[2, 5, 7],
            (0..70).map(|_| rng.gen_range(0.0..1.0)).collect(),
        );
        let canvas = CanvasSpec::source_frame(5, 7);
        let out = warp_image(&img, &Homography::identity(), &canvas).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn warp_integer_translation_shifts_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (h, w) = (6, 9);
        let img = Tensor::from_vec(
            &[1, h, w],
            (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect(),
        );
        let canvas = CanvasSpec::source_frame(h, w);
        let out = warp_image(&img, &Homography::translation(3.0, 0.0), &canvas).unwrap();
        for y in 0..h {
            for x in 0..w {
                let expect = if x < 3 { 0.0 } else { img.data()[y * w + x - 3] };
                let got = out.data()[y * w + x];
                assert!((got - expect).abs() < 1e-12, "({y},{x}): {got} vs {expect}");
            }
        }
    }

    #[test]
    fn warp_composition_close_to_single_warp() {
        // Smooth image so interpolation error stays small in the interior.
        let (h, w) = (32, 32);
        let data: Vec<f64> = (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                0.5 + 0.4 * ((x as f64 * 0.3).sin() * (y as f64 * 0.2).cos())
            })
            .collect();
        let img = Tensor::from_vec(&[1, h, w], data);
        let h1 = Homography::translation(1.5, -0.5);
        let h2 = Homography::from_array([1.02, 0.01, 0.8, -0.015, 0.99, 1.2, 1e-4, -5e-5, 1.0])
            .unwrap();
        let canvas = CanvasSpec::source_frame(h, w);
        let once = warp_image(&img, &h2.compose(&h1).unwrap(), &canvas).unwrap();
        let step1 = warp_image(&img, &h1, &canvas).unwrap();
        let twice = warp_image(&step1, &h2, &canvas).unwrap();
        // Compare away from the boundary band where zero fill differs.
        let mut total = 0.0;
        let mut count = 0;
        for y in 4..h - 4 {
            for x in 4..w - 4 {
                total += (once.data()[y * w + x] - twice.data()[y * w + x]).abs();
                count += 1;
            }
        }
        let mad = total / count as f64;
        assert!(mad < 2.0 / 255.0, "interior MAD {mad}");
    }

    #[test]
    fn warp_stays_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let img = Tensor::from_vec(
                &[1, 8, 8],
                (0..64).map(|_| rng.gen_range(0.0..1.0)).collect(),
            );
            let h = random_well_conditioned(&mut rng);
            let canvas = CanvasSpec::source_frame(8, 8);
            let out = warp_image(&img, &h, &canvas).unwrap();
            assert!(out.min() >= 0.0 && out.max() <= 1.0);
        }
    }

    #[test]
    fn shared_mask_equals_warp_of_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let h = random_well_conditioned(&mut rng);
            let canvas = CanvasSpec::source_frame(10, 12);
            let mask = shared_mask(&h, (10, 12), &canvas).unwrap();
            let ones = Tensor::full(&[1, 10, 12], 1.0);
            let warped = warp_image(&ones, &h, &canvas).unwrap();
            assert_eq!(mask, warped);
        }
    }

    #[test]
    fn shared_mask_identity_is_all_ones() {
        let canvas = CanvasSpec::source_frame(4, 6);
        let mask = shared_mask(&Homography::identity(), (4, 6), &canvas).unwrap();
        assert!(mask.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn shared_mask_full_width_translation_is_zero() {
        let (h, w) = (4, 6);
        let canvas = CanvasSpec::source_frame(h, w);
        let mask = shared_mask(&Homography::translation(w as f64, 0.0), (h, w), &canvas).unwrap();
        assert!(mask.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shared_mask_half_translation_covers_half() {
        let (h, w) = (8, 16);
        let canvas = CanvasSpec::source_frame(h, w);
        let mask = shared_mask(&Homography::translation(w as f64 / 2.0, 0.0), (h, w), &canvas)
            .unwrap();
        // Columns [w/2, w) are fully covered; allow the one-pixel band.
        let mut ones = 0;
        for v in mask.data() {
            if *v == 1.0 {
                ones += 1;
            }
        }
        let expect = h * w / 2;
        assert!(
            (ones as i64 - expect as i64).abs() <= h as i64,
            "got {ones} full pixels, expected about {expect}"
        );
    }

    #[test]
    fn canvas_identity_is_source_frame() {
        let c = canvas_from_homography(&Homography::identity(), (8, 10), (8, 10)).unwrap();
        assert_eq!((c.width, c.height), (10, 8));
        assert_eq!((c.offset_x, c.offset_y), (0.0, 0.0));
    }

    #[test]
    fn canvas_half_translation_is_one_and_a_half_wide() {
        let (h, w) = (8, 16);
        let c =
            canvas_from_homography(&Homography::translation(w as f64 / 2.0, 0.0), (h, w), (h, w))
                .unwrap();
        assert_eq!(c.height, h);
        assert_eq!(c.width, w + w / 2);
    }

    #[test]
    fn canvas_covers_projected_corners_within_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let src = frame_corners(64, 64);
        for _ in 0..200 {
            let mut off = [0.0f64; 8];
            for v in &mut off {
                *v = rng.gen_range(-8.0..8.0);
            }
            let h = Homography::from_array(dlt4_from_offsets(&src, &off).unwrap()).unwrap();
            let c = canvas_from_homography(&h, (64, 64), (64, 64)).unwrap();
            assert!(c.width >= 64 && c.width <= 80, "width {}", c.width);
            assert!(c.height >= 64 && c.height <= 80, "height {}", c.height);
            // Brute-force cover check on every corner of both frames.
            for corner in frame_corners(64, 64) {
                let (x, y) = h.apply(corner[0], corner[1]);
                let (cx, cy) = (x + c.offset_x, y + c.offset_y);
                assert!(cx >= -0.5 && cx <= (c.width - 1) as f64 + 0.5);
                assert!(cy >= -0.5 && cy <= (c.height - 1) as f64 + 0.5);
            }
        }
    }

    #[test]
    fn canvas_rejects_divergent_homography() {
        // Projective depth nearly vanishes at the right edge, so corners
        // blow up and the canvas area explodes.
        let h = Homography::from_array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, -0.0157, 0.0, 1.0]).unwrap();
        let got = canvas_from_homography(&h, (64, 64), (64, 64));
        assert!(matches!(got, Err(CoreError::ExcessiveCanvas { .. })));
    }

    #[test]
    fn corner_error_identity_is_zero() {
        let h = Homography::identity();
        assert_eq!(corner_error(&h, &h, (64, 64)), 0.0);
    }

    #[test]
    fn corner_error_translation_is_pythagorean() {
        let h = Homography::identity();
        let t = Homography::translation(3.0, 4.0);
        let composed = t.compose(&h).unwrap();
        assert!((corner_error(&composed, &h, (64, 64)) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn corner_error_matches_brute_force_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let a = random_well_conditioned(&mut rng);
            let b = random_well_conditioned(&mut rng);
            let shape = (32, 48);
            let got = corner_error(&a, &b, shape);
            let mut expect = 0.0;
            for c in frame_corners(shape.0, shape.1) {
                let (xa, ya) = a.apply(c[0], c[1]);
                let (xb, yb) = b.apply(c[0], c[1]);
                expect += ((xa - xb).powi(2) + (ya - yb).powi(2)).sqrt();
            }
            expect /= 4.0;
            assert!((got - expect).abs() < 1e-12);
            assert!((got - corner_error(&b, &a, shape)).abs() < 1e-12);
        }
    }

    #[test]
    fn homography_normalizes_scale() {
        let h = Homography::from_array([2.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 2.0]).unwrap();
        assert_eq!(h.at(0, 0), 1.0);
        assert_eq!(h.at(2, 2), 1.0);
    }

    #[test]
    fn homography_rejects_singular() {
        assert!(Homography::from_array([1.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 1.0]).is_err());
    }
}
