//! Correlation-based matching on L2-normalised feature maps.
//!
//! Pixel and grid coordinates are related by the half-pixel-centred mapping
//! `u = (x + 0.5) * W_feat / W_img - 0.5` (same for `y`), which is used by
//! feature sampling, ground-truth placement and localisation alike.

use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Tape, Taps, Var, NORM_EPS};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Pixel position in source-image coordinates. Serialised as `[x, y]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
}

impl From<[f64; 2]> for Keypoint {
    fn from([x, y]: [f64; 2]) -> Self {
        Self { x, y }
    }
}

impl From<Keypoint> for [f64; 2] {
    fn from(k: Keypoint) -> Self {
        [k.x, k.y]
    }
}

impl Keypoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Keypoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn check_inside(&self, size: ImageSize) -> Result<()> {
        let ok = self.x.is_finite()
            && self.y.is_finite()
            && self.x >= 0.0
            && self.y >= 0.0
            && self.x < size.width
            && self.y < size.height;
        if ok {
            Ok(())
        } else {
            Err(Error::OutOfBounds {
                x: self.x,
                y: self.y,
                width: size.width,
                height: size.height,
            })
        }
    }
}

/// Width and height in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: f64,
    pub height: f64,
}

impl ImageSize {
    pub fn new(width: f64, height: f64) -> Self {
        Self { width, height }
    }

    pub fn square(side: usize) -> Self {
        Self::new(side as f64, side as f64)
    }
}

/// Feature-grid height and width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
}

impl Grid {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// Pixels per feature cell along x.
    pub fn stride_x(&self, size: ImageSize) -> f64 {
        size.width / self.width as f64
    }

    pub fn stride_y(&self, size: ImageSize) -> f64 {
        size.height / self.height as f64
    }
}

/// Pixel to continuous grid coordinate `(u, v)` = (column, row).
pub fn pixel_to_grid(kp: Keypoint, grid: Grid, size: ImageSize) -> (f64, f64) {
    (
        (kp.x + 0.5) * grid.width as f64 / size.width - 0.5,
        (kp.y + 0.5) * grid.height as f64 / size.height - 0.5,
    )
}

/// Continuous grid coordinate back to pixels.
pub fn grid_to_pixel(u: f64, v: f64, grid: Grid, size: ImageSize) -> Keypoint {
    Keypoint::new(
        (u + 0.5) * size.width / grid.width as f64 - 0.5,
        (v + 0.5) * size.height / grid.height as f64 - 0.5,
    )
}

/// Nearest cell `(row, col)` to a keypoint.
pub fn nearest_cell(kp: Keypoint, grid: Grid, size: ImageSize) -> (usize, usize) {
    let (u, v) = pixel_to_grid(kp, grid, size);
    let col = u.round().clamp(0.0, (grid.width - 1) as f64) as usize;
    let row = v.round().clamp(0.0, (grid.height - 1) as f64) as usize;
    (row, col)
}

/// Bilinear interpolation taps (flattened cell index, weight) for a keypoint.
pub fn bilinear_taps<T: Scalar>(kp: Keypoint, grid: Grid, size: ImageSize) -> Result<Taps<T>> {
    kp.check_inside(size)?;
    let (u, v) = pixel_to_grid(kp, grid, size);
    let u = u.clamp(0.0, (grid.width - 1) as f64);
    let v = v.clamp(0.0, (grid.height - 1) as f64);
    let (c0, r0) = (u.floor() as usize, v.floor() as usize);
    let c1 = (c0 + 1).min(grid.width - 1);
    let r1 = (r0 + 1).min(grid.height - 1);
    let (fu, fv) = (u - c0 as f64, v - r0 as f64);
    let mut taps: Taps<T> = Vec::with_capacity(4);
    for (r, c, w) in [
        (r0, c0, (1.0 - fv) * (1.0 - fu)),
        (r0, c1, (1.0 - fv) * fu),
        (r1, c0, fv * (1.0 - fu)),
        (r1, c1, fv * fu),
    ] {
        if w == 0.0 {
            continue;
        }
        let idx = r * grid.width + c;
        match taps.iter_mut().find(|(i, _)| *i == idx) {
            Some(t) => t.1 = t.1 + T::lit(w),
            None => taps.push((idx, T::lit(w))),
        }
    }
    Ok(taps)
}

/// Feature array `[C, H, W]` tied to the pixel size of its source image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    data: Tensor<T>,
    image_size: ImageSize,
    normalized: bool,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(data: Tensor<T>, image_size: ImageSize) -> Result<Self> {
        let s = data.shape();
        if s.len() != 3 || s.contains(&0) {
            return Err(Error::Shape(format!(
                "feature map must be [C,H,W] with C,H,W >= 1, got {s:?}"
            )));
        }
        if !data.is_finite() {
            return Err(Error::InvalidInput("feature map contains non-finite values".into()));
        }
        Ok(Self {
            data,
            image_size,
            normalized: false,
        })
    }

    pub fn data(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn image_size(&self) -> ImageSize {
        self.image_size
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn grid(&self) -> Grid {
        Grid::new(self.data.shape()[1], self.data.shape()[2])
    }

    /// Feature vector of cell `(row, col)`.
    pub fn column(&self, row: usize, col: usize) -> Vec<T> {
        let g = self.grid();
        let hw = g.cells();
        (0..self.channels())
            .map(|c| self.data[c * hw + row * g.width + col])
            .collect()
    }
}

/// Values over the cells of a feature grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMap<T> {
    data: Tensor<T>,
}

impl<T: Scalar> CorrelationMap<T> {
    pub fn new(data: Tensor<T>) -> Result<Self> {
        if data.shape().len() != 2 || data.is_empty() {
            return Err(Error::Shape(format!(
                "correlation map must be [H,W], got {:?}",
                data.shape()
            )));
        }
        if !data.is_finite() {
            return Err(Error::InvalidInput("correlation map contains non-finite values".into()));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn grid(&self) -> Grid {
        Grid::new(self.data.shape()[0], self.data.shape()[1])
    }
}

/// Non-negative map over feature-grid cells summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap<T> {
    data: Tensor<T>,
}

impl<T: Scalar> ProbabilityMap<T> {
    /// Wraps `data` after checking non-negativity and unit mass (± 1e-6).
    pub fn new(data: Tensor<T>) -> Result<Self> {
        if data.shape().len() != 2 || data.is_empty() {
            return Err(Error::Shape(format!(
                "probability map must be [H,W], got {:?}",
                data.shape()
            )));
        }
        if data.data().iter().any(|v| !v.is_finite() || *v < T::zero()) {
            return Err(Error::InvalidInput(
                "probability map has negative or non-finite entries".into(),
            ));
        }
        let total: f64 = data.data().iter().map(|v| v.as_f64()).sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidInput(format!("probability map sums to {total}")));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn grid(&self) -> Grid {
        Grid::new(self.data.shape()[0], self.data.shape()[1])
    }

    pub fn sum(&self) -> T {
        self.data.data().iter().copied().sum()
    }
}

pub fn l2_normalize<T: Scalar>(fm: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    if !fm.data.is_finite() {
        return Err(Error::InvalidInput("feature map contains non-finite values".into()));
    }
    let c = fm.channels();
    let hw = fm.grid().cells();
    let x = fm.data.data();
    let norms = autodiff::column_norms(x, c, hw);
    let eps = T::lit(NORM_EPS);
    let mut out = vec![T::zero(); c * hw];
    for j in 0..hw {
        if norms[j] < eps {
            continue;
        }
        for i in 0..c {
            out[i * hw + j] = x[i * hw + j] / norms[j];
        }
    }
    Ok(FeatureMap {
        data: Tensor::from_vec(fm.data.shape(), out)?,
        image_size: fm.image_size,
        normalized: true,
    })
}

fn normalize_vec<T: Scalar>(v: &mut [T]) {
    let n = v.iter().map(|x| *x * *x).sum::<T>().sqrt();
    if n >= T::lit(NORM_EPS) {
        v.iter_mut().for_each(|x| *x = *x / n);
    } else {
        v.iter_mut().for_each(|x| *x = T::zero());
    }
}

/// Bilinearly samples the feature at `kp` and re-normalises it.
pub fn sample_feature<T: Scalar>(fm: &FeatureMap<T>, kp: Keypoint) -> Result<Vec<T>> {
    let grid = fm.grid();
    let taps = bilinear_taps::<T>(kp, grid, fm.image_size)?;
    let hw = grid.cells();
    let mut out = vec![T::zero(); fm.channels()];
    for (idx, w) in taps {
        for (c, o) in out.iter_mut().enumerate() {
            *o = *o + w * fm.data[c * hw + idx];
        }
    }
    normalize_vec(&mut out);
    Ok(out)
}

pub fn correlation_map<T: Scalar>(query: &[T], fm_b: &FeatureMap<T>) -> Result<CorrelationMap<T>> {
    let c = fm_b.channels();
    if query.len() != c {
        return Err(Error::Shape(format!(
            "query has {} channels, feature map has {c}",
            query.len()
        )));
    }
    let grid = fm_b.grid();
    let hw = grid.cells();
    let mut out = vec![T::zero(); hw];
    for (ch, &q) in query.iter().enumerate() {
        let plane = &fm_b.data.data()[ch * hw..(ch + 1) * hw];
        for (o, &f) in out.iter_mut().zip(plane) {
            *o = *o + q * f;
        }
    }
    CorrelationMap::new(Tensor::from_vec(&[grid.height, grid.width], out)?)
}

/// Temperature softmax over all cells.
pub fn softmax_2d<T: Scalar>(m: &CorrelationMap<T>, beta: f64) -> Result<ProbabilityMap<T>> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::Parameter(format!("temperature must be positive, got {beta}")));
    }
    let mut out = vec![T::zero(); m.data.len()];
    autodiff::softmax_into(m.data.data(), T::lit(1.0 / beta), &mut out);
    Ok(ProbabilityMap {
        data: Tensor::from_vec(m.data.shape(), out)?,
    })
}

/// Gaussian-smoothed one-hot target at the nearest cell to `target`.
///
/// The kernel is truncated to `kernel_size x kernel_size` and to the grid,
/// then renormalised to unit mass.
pub fn make_ground_truth<T: Scalar>(
    target: Keypoint,
    grid: Grid,
    image_size: ImageSize,
    kernel_size: usize,
    sigma: f64,
) -> Result<ProbabilityMap<T>> {
    if kernel_size == 0 || kernel_size.is_multiple_of(2) {
        return Err(Error::Parameter(format!("kernel size must be odd, got {kernel_size}")));
    }
    if kernel_size > 1 && !(sigma > 0.0) {
        return Err(Error::Parameter(format!("sigma must be positive, got {sigma}")));
    }
    target.check_inside(image_size)?;
    let (r0, c0) = nearest_cell(target, grid, image_size);
    let half = (kernel_size / 2) as isize;
    let mut weights = vec![0.0f64; grid.cells()];
    let mut total = 0.0;
    for dr in -half..=half {
        for dc in -half..=half {
            let r = r0 as isize + dr;
            let c = c0 as isize + dc;
            if r < 0 || c < 0 || r >= grid.height as isize || c >= grid.width as isize {
                continue;
            }
            let w = (-((dr * dr + dc * dc) as f64) / (2.0 * sigma * sigma)).exp();
            weights[r as usize * grid.width + c as usize] = w;
            total += w;
        }
    }
    let data = weights.into_iter().map(|w| T::lit(w / total)).collect();
    Ok(ProbabilityMap {
        data: Tensor::from_vec(&[grid.height, grid.width], data)?,
    })
}

/// Lower clamp applied to predicted probabilities inside the logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

/// Cross-entropy `H(gt, pred)` of one map pair.
pub fn cross_entropy<T: Scalar>(gt: &ProbabilityMap<T>, pred: &ProbabilityMap<T>) -> Result<T> {
    if gt.data.shape() != pred.data.shape() {
        return Err(Error::Shape(format!(
            "ground truth {:?} vs prediction {:?}",
            gt.data.shape(),
            pred.data.shape()
        )));
    }
    let clamp = T::lit(LOG_CLAMP);
    Ok(gt
        .data
        .data()
        .iter()
        .zip(pred.data.data())
        .filter(|(p, _)| **p != T::zero())
        .map(|(&p, &q)| -p * q.max(clamp).ln())
        .sum())
}

/// Mean cross-entropy over query points.
pub fn matching_loss<T: Scalar>(pred: &[ProbabilityMap<T>], gt: &[ProbabilityMap<T>]) -> Result<T> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::Parameter("matching loss over an empty list".into()));
    }
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} targets",
            pred.len(),
            gt.len()
        )));
    }
    let mut total = T::zero();
    for (p, g) in pred.iter().zip(gt) {
        total = total + cross_entropy(g, p)?;
    }
    Ok(total / T::from_usize_exact(pred.len()))
}

/// Row-major first cell attaining the maximum.
pub fn argmax_2d<T: Scalar>(m: &CorrelationMap<T>) -> (usize, usize) {
    let w = m.grid().width;
    let mut best = 0;
    for (i, v) in m.data.data().iter().enumerate() {
        if *v > m.data[best] {
            best = i;
        }
    }
    (best / w, best % w)
}

/// Soft-argmax inside a `window x window` neighbourhood of the global
/// argmax, returned in pixel coordinates.
pub fn kernel_softmax_localize<T: Scalar>(
    m: &CorrelationMap<T>,
    beta: f64,
    window: usize,
    image_size: ImageSize,
) -> Result<Keypoint> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::Parameter(format!("window must be odd, got {window}")));
    }
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::Parameter(format!("temperature must be positive, got {beta}")));
    }
    let grid = m.grid();
    let (r0, c0) = argmax_2d(m);
    let half = window / 2;
    let rows = r0.saturating_sub(half)..(r0 + half + 1).min(grid.height);
    let cols = c0.saturating_sub(half)..(c0 + half + 1).min(grid.width);
    let mut vals = Vec::with_capacity(window * window);
    let mut cells = Vec::with_capacity(window * window);
    for r in rows {
        for c in cols.clone() {
            vals.push(m.data[r * grid.width + c].as_f64());
            cells.push((r as f64, c as f64));
        }
    }
    let mut probs = vec![0.0f64; vals.len()];
    autodiff::softmax_into(&vals, 1.0 / beta, &mut probs);
    let (mut u, mut v) = (0.0, 0.0);
    for (p, (r, c)) in probs.iter().zip(&cells) {
        u += p * c;
        v += p * r;
    }
    Ok(grid_to_pixel(u, v, grid, image_size))
}

/// Query keypoints, ground-truth rows and temperature for one image pair.
pub struct PairLossInputs<'a, T> {
    pub kps_a: &'a [Keypoint],
    pub size_a: ImageSize,
    pub targets: &'a Tensor<T>,
    pub beta: f64,
}

/// Differentiable matching loss of one image pair recorded on `tape`.
///
/// `feat_a` and `feat_b` are raw `[C, H, W]` feature maps; the query
/// features are sampled from the normalised `feat_a` at `kps_a` and
/// correlated with every normalised cell of `feat_b`. `targets` holds the
/// ground-truth maps (one row per query, flattened).
pub fn pair_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    feat_a: Var,
    feat_b: Var,
    inputs: &PairLossInputs<'_, T>,
) -> Result<Var> {
    let sa = tape.shape(feat_a).to_vec();
    let sb = tape.shape(feat_b).to_vec();
    if sa[0] != sb[0] {
        return Err(Error::Shape(format!("channel mismatch {} vs {}", sa[0], sb[0])));
    }
    let grid_a = Grid::new(sa[1], sa[2]);
    let a2 = tape.reshape(feat_a, &[sa[0], sa[1] * sa[2]])?;
    let b2 = tape.reshape(feat_b, &[sb[0], sb[1] * sb[2]])?;
    let na = tape.normalize_cols(a2);
    let nb = tape.normalize_cols(b2);
    let taps = inputs
        .kps_a
        .iter()
        .map(|kp| bilinear_taps::<T>(*kp, grid_a, inputs.size_a))
        .collect::<Result<Vec<_>>>()?;
    let q = tape.mix_cols(na, taps)?;
    let q = tape.normalize_cols(q);
    let qt = tape.transpose(q);
    let corr = tape.matmul(qt, nb)?;
    tape.softmax_cross_entropy(corr, inputs.targets, T::lit(1.0 / inputs.beta))
}

/// Stacks the ground-truth maps of `kps_b` into a `[n, H*W]` target array.
pub fn target_rows<T: Scalar>(
    kps_b: &[Keypoint],
    grid: Grid,
    size_b: ImageSize,
    kernel_size: usize,
    sigma: f64,
) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(kps_b.len() * grid.cells());
    for kp in kps_b {
        let gt = make_ground_truth::<T>(*kp, grid, size_b, kernel_size, sigma)?;
        data.extend_from_slice(gt.data.data());
    }
    Tensor::from_vec(&[kps_b.len(), grid.cells()], data)
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn fmap(c: usize, h: usize, w: usize, data: Vec<f64>, size: ImageSize) -> FeatureMap<f64> {
        FeatureMap::new(Tensor::from_vec(&[c, h, w], data).unwrap(), size).unwrap()
    }

    fn random_map(seed: u64, c: usize, h: usize, w: usize) -> FeatureMap<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::new(
            Tensor::randn(&[c, h, w], 1.0, &mut rng),
            ImageSize::new(w as f64 * 8.0, h as f64 * 8.0),
        )
        .unwrap()
    }

    #[test]
    fn normalize_three_four() {
        let fm = fmap(2, 1, 1, vec![3.0, 4.0], ImageSize::square(8));
        let n = l2_normalize(&fm).unwrap();
        assert_abs_diff_eq!(n.data()[0], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(n.data()[1], 0.8, epsilon = 1e-12);
        assert!(n.is_normalized());
        let again = l2_normalize(&n).unwrap();
        assert!(again.data().max_abs_diff(n.data()) < 1e-15);
    }

    #[test]
    fn normalize_zero_column_stays_zero() {
        let fm = fmap(2, 1, 2, vec![0.0, 1.0, 0.0, 1.0], ImageSize::square(8));
        let n = l2_normalize(&fm).unwrap();
        assert_eq!(n.column(0, 0), vec![0.0, 0.0]);
    }

    #[test]
    fn non_finite_rejected() {
        let t = Tensor::from_vec(&[1, 1, 1], vec![f64::NAN]).unwrap();
        assert!(FeatureMap::new(t, ImageSize::square(4)).is_err());
    }

    #[test]
    fn random_map_columns_unit_norm() {
        let n = l2_normalize(&random_map(1, 8, 4, 4)).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let norm: f64 = n.column(r, c).iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sample_at_cell_center_returns_cell() {
        let n = l2_normalize(&random_map(2, 4, 4, 4)).unwrap();
        // cell (1, 2) centre: x = (2 + 0.5) * 8 - 0.5 = 19.5
        let f = sample_feature(&n, Keypoint::new(19.5, 11.5)).unwrap();
        let expect = n.column(1, 2);
        for (a, b) in f.iter().zip(&expect) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn sample_constant_map() {
        let fm = fmap(2, 3, 3, [vec![0.6; 9], vec![0.8; 9]].concat(), ImageSize::square(30));
        for (x, y) in [(0.0, 0.0), (29.9, 29.9), (13.3, 4.2)] {
            let f = sample_feature(&fm, Keypoint::new(x, y)).unwrap();
            assert_abs_diff_eq!(f[0], 0.6, epsilon = 1e-12);
            assert_abs_diff_eq!(f[1], 0.8, epsilon = 1e-12);
        }
    }

    #[test]
    fn sample_midway_between_two_cells() {
        // 1x2 grid, cell 0 = e1, cell 1 = e2, image 16x8, stride 8.
        let fm = fmap(2, 1, 2, vec![1.0, 0.0, 0.0, 1.0], ImageSize::new(16.0, 8.0));
        // centres at x = 3.5 and 11.5; midway at 7.5 -> u = 0.5.
        let f = sample_feature(&fm, Keypoint::new(7.5, 3.5)).unwrap();
        let h = 0.5f64.sqrt();
        assert_abs_diff_eq!(f[0], h, epsilon = 1e-12);
        assert_abs_diff_eq!(f[1], h, epsilon = 1e-12);
    }

    #[test]
    fn sample_outside_is_error() {
        let fm = random_map(3, 2, 2, 2);
        assert!(matches!(
            sample_feature(&fm, Keypoint::new(16.0, 0.0)),
            Err(Error::OutOfBounds { .. })
        ));
        assert!(sample_feature(&fm, Keypoint::new(-0.1, 0.0)).is_err());
    }

    #[test]
    fn correlation_examples() {
        let n = l2_normalize(&random_map(4, 6, 4, 5)).unwrap();
        let q = n.column(2, 3);
        let m = correlation_map(&q, &n).unwrap();
        assert_abs_diff_eq!(m.data()[2 * 5 + 3], 1.0, epsilon = 1e-6);

        let fm = fmap(
            2,
            2,
            2,
            vec![0.1, 0.2, 0.3, 0.4, 1.0, 1.0, 1.0, 1.0],
            ImageSize::square(4),
        );
        let m = correlation_map(&[1.0, 0.0], &fm).unwrap();
        assert_eq!(m.data().data(), &[0.1, 0.2, 0.3, 0.4]);
        let z = correlation_map(&[0.0, 0.0], &fm).unwrap();
        assert!(z.data().data().iter().all(|v| *v == 0.0));
        assert!(matches!(correlation_map(&[1.0], &fm), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_examples() {
        let m = CorrelationMap::new(Tensor::<f64>::from_vec(&[2, 2], vec![0.3; 4]).unwrap()).unwrap();
        for beta in [0.01, 0.04, 1.0] {
            let p = softmax_2d(&m, beta).unwrap();
            assert!(p.data().data().iter().all(|v| (*v - 0.25).abs() < 1e-12));
        }
        let m = CorrelationMap::new(Tensor::from_vec(&[1, 2], vec![0.5, 0.0]).unwrap()).unwrap();
        let p = softmax_2d(&m, 0.04).unwrap();
        let e = 12.5f64.exp();
        assert_abs_diff_eq!(p.data()[0], e / (e + 1.0), epsilon = 1e-12);
        assert!((p.data()[0] - (1.0 - 3.7e-6)).abs() < 1e-7);
        assert!(softmax_2d(&m, 0.0).is_err());
        assert!(softmax_2d(&m, -1.0).is_err());

        let r = random_map(5, 1, 3, 3);
        let cm = CorrelationMap::new(r.data().clone().reshaped(&[3, 3]).unwrap()).unwrap();
        let p = softmax_2d(&cm, 1e6).unwrap();
        assert!(p.data().data().iter().all(|v| (*v - 1.0 / 9.0).abs() < 1e-4));
    }

    /// Explicit 2-D convolution of a one-hot with a truncated Gaussian.
    fn gt_oracle(grid: Grid, cell: (usize, usize), k: usize, sigma: f64) -> Vec<f64> {
        let mut delta = vec![0.0; grid.cells()];
        delta[cell.0 * grid.width + cell.1] = 1.0;
        let half = (k / 2) as isize;
        let mut out = vec![0.0; grid.cells()];
        for r in 0..grid.height as isize {
            for c in 0..grid.width as isize {
                let mut acc = 0.0;
                for dr in -half..=half {
                    for dc in -half..=half {
                        let (sr, sc) = (r - dr, c - dc);
                        if sr < 0 || sc < 0 || sr >= grid.height as isize || sc >= grid.width as isize {
                            continue;
                        }
                        let g = (-((dr * dr + dc * dc) as f64) / (2.0 * sigma * sigma)).exp();
                        acc += g * delta[sr as usize * grid.width + sc as usize];
                    }
                }
                out[r as usize * grid.width + c as usize] = acc;
            }
        }
        let s: f64 = out.iter().sum();
        out.iter().map(|v| v / s).collect()
    }

    #[test]
    fn ground_truth_examples() {
        let grid = Grid::new(9, 9);
        let size = ImageSize::square(72);
        let center = grid_to_pixel(4.0, 4.0, grid, size);
        let one = make_ground_truth::<f64>(center, grid, size, 1, 1.0).unwrap();
        assert_eq!(one.data()[4 * 9 + 4], 1.0);
        assert_abs_diff_eq!(one.sum(), 1.0, epsilon = 1e-12);

        let g = make_ground_truth::<f64>(center, grid, size, 7, 1.0).unwrap();
        let at = |r: usize, c: usize| g.data()[r * 9 + c];
        assert_abs_diff_eq!(at(4, 5), at(4, 3), epsilon = 1e-15);
        assert_abs_diff_eq!(at(4, 5), at(5, 4), epsilon = 1e-15);
        assert_abs_diff_eq!(at(4, 5), at(3, 4), epsilon = 1e-15);
        let oracle = gt_oracle(grid, (4, 4), 7, 1.0);
        for (a, b) in g.data().data().iter().zip(&oracle) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }

        let corner = make_ground_truth::<f64>(Keypoint::new(0.0, 0.0), grid, size, 7, 1.0).unwrap();
        assert_abs_diff_eq!(corner.sum(), 1.0, epsilon = 1e-6);
        let oracle = gt_oracle(grid, (0, 0), 7, 1.0);
        for (a, b) in corner.data().data().iter().zip(&oracle) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }

        assert!(matches!(
            make_ground_truth::<f64>(center, grid, size, 4, 1.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn loss_examples() {
        let onehot = ProbabilityMap::new(Tensor::from_vec(&[2, 2], vec![0.0, 1.0, 0.0, 0.0]).unwrap()).unwrap();
        assert_eq!(
            matching_loss(std::slice::from_ref(&onehot), std::slice::from_ref(&onehot)).unwrap(),
            0.0
        );
        let uniform = ProbabilityMap::new(Tensor::full(&[2, 2], 0.25)).unwrap();
        assert_abs_diff_eq!(
            matching_loss(std::slice::from_ref(&uniform), std::slice::from_ref(&onehot)).unwrap(),
            4f64.ln(),
            epsilon = 1e-15
        );
        let pred = ProbabilityMap::new(Tensor::from_vec(&[2, 2], vec![0.1, 0.6, 0.2, 0.1]).unwrap()).unwrap();
        let soft = ProbabilityMap::new(Tensor::from_vec(&[2, 2], vec![0.0, 0.5, 0.5, 0.0]).unwrap()).unwrap();
        let expect = (-(0.6f64.ln()) + -(0.5 * 0.6f64.ln() + 0.5 * 0.2f64.ln())) / 2.0;
        let got = matching_loss(&[pred.clone(), pred.clone()], &[onehot.clone(), soft]).unwrap();
        assert_abs_diff_eq!(got, expect, epsilon = 1e-15);

        assert!(matches!(matching_loss::<f64>(&[], &[]), Err(Error::Parameter(_))));
        let small = ProbabilityMap::new(Tensor::from_vec(&[1, 1], vec![1.0]).unwrap()).unwrap();
        assert!(matches!(matching_loss(&[small], &[onehot]), Err(Error::Shape(_))));
    }

    #[test]
    fn loss_clamps_zero_probability() {
        let gt = ProbabilityMap::new(Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap()).unwrap();
        let pred = ProbabilityMap::new(Tensor::from_vec(&[1, 2], vec![0.0, 1.0]).unwrap()).unwrap();
        let l = matching_loss(&[pred], &[gt]).unwrap();
        assert_abs_diff_eq!(l, -(LOG_CLAMP.ln()), epsilon = 1e-9);
    }

    #[test]
    fn argmax_examples() {
        let mk = |v: Vec<f64>| CorrelationMap::new(Tensor::from_vec(&[3, 4], v).unwrap()).unwrap();
        let mut v = vec![0.0; 12];
        v[6] = 1.0;
        assert_eq!(argmax_2d(&mk(v)), (1, 2));
        assert_eq!(argmax_2d(&mk(vec![0.5; 12])), (0, 0));
        let mut v = vec![0.0; 12];
        v[3] = 2.0;
        v[9] = 2.0;
        assert_eq!(argmax_2d(&mk(v)), (0, 3));
    }

    #[test]
    fn localize_examples() {
        let grid = Grid::new(5, 5);
        let size = ImageSize::square(40);
        let mut v = vec![0.0; 25];
        v[2 * 5 + 3] = 1.0;
        let m = CorrelationMap::new(Tensor::from_vec(&[5, 5], v.clone()).unwrap()).unwrap();
        let kp = kernel_softmax_localize(&m, 0.04, 1, size).unwrap();
        assert_eq!(kp, grid_to_pixel(3.0, 2.0, grid, size));

        v[2 * 5 + 2] = 0.7;
        v[2 * 5 + 4] = 0.7;
        let m = CorrelationMap::new(Tensor::from_vec(&[5, 5], v).unwrap()).unwrap();
        let kp = kernel_softmax_localize(&m, 0.1, 3, size).unwrap();
        assert_abs_diff_eq!(kp.x, grid_to_pixel(3.0, 2.0, grid, size).x, epsilon = 1e-12);

        assert!(kernel_softmax_localize(&m, 0.1, 2, size).is_err());
    }

    #[test]
    fn localize_ramp_matches_enumeration() {
        // 5x5 map, peak at (2,2), linear ramp in x inside the 3x3 window.
        let mut v = vec![-1.0; 25];
        for r in 1..4 {
            for c in 1..4 {
                v[r * 5 + c] = 0.5 + 0.1 * c as f64 - 0.05 * (r as f64 - 2.0).abs();
            }
        }
        v[2 * 5 + 2] = 0.9;
        let m = CorrelationMap::new(Tensor::from_vec(&[5, 5], v.clone()).unwrap()).unwrap();
        let beta = 0.2;
        let mut wsum = 0.0;
        let (mut eu, mut ev) = (0.0, 0.0);
        for r in 1..4 {
            for c in 1..4 {
                let w = (v[r * 5 + c] / beta).exp();
                wsum += w;
                eu += w * c as f64;
                ev += w * r as f64;
            }
        }
        let (eu, ev) = (eu / wsum, ev / wsum);
        let size = ImageSize::new(50.0, 25.0);
        let kp = kernel_softmax_localize(&m, beta, 3, size).unwrap();
        let expect = Keypoint::new((eu + 0.5) * 10.0 - 0.5, (ev + 0.5) * 5.0 - 0.5);
        assert_abs_diff_eq!(kp.x, expect.x, epsilon = 1e-10);
        assert_abs_diff_eq!(kp.y, expect.y, epsilon = 1e-10);
    }

    #[test]
    fn tape_loss_agrees_with_plain_path() {
        let fa = random_map(10, 5, 4, 6);
        let fb = random_map(11, 5, 4, 6);
        let size = fa.image_size();
        let kps_a = [Keypoint::new(3.0, 4.0), Keypoint::new(40.2, 20.9)];
        let kps_b = [Keypoint::new(10.0, 30.0), Keypoint::new(0.0, 1.0)];
        let grid = fb.grid();
        let beta = 0.3;
        let targets = target_rows::<f64>(&kps_b, grid, size, 3, 1.0).unwrap();
        let mut tape = Tape::new();
        let a = tape.constant(fa.data().clone());
        let b = tape.constant(fb.data().clone());
        let inputs = PairLossInputs {
            kps_a: &kps_a,
            size_a: size,
            targets: &targets,
            beta,
        };
        let l = pair_loss_on_tape(&mut tape, a, b, &inputs).unwrap();

        let na = l2_normalize(&fa).unwrap();
        let nb = l2_normalize(&fb).unwrap();
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        for (ka, kb) in kps_a.iter().zip(&kps_b) {
            let q = sample_feature(&na, *ka).unwrap();
            preds.push(softmax_2d(&correlation_map(&q, &nb).unwrap(), beta).unwrap());
            gts.push(make_ground_truth(*kb, grid, size, 3, 1.0).unwrap());
        }
        let plain = matching_loss(&preds, &gts).unwrap();
        assert_abs_diff_eq!(tape.value(l)[0], plain, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn correlation_is_symmetric(seed in 0u64..500, qr in 0usize..3, qc in 0usize..4, rr in 0usize..3, rc in 0usize..4) {
            let a = l2_normalize(&random_map(seed, 6, 3, 4)).unwrap();
            let b = l2_normalize(&random_map(seed + 1000, 6, 3, 4)).unwrap();
            let ab = correlation_map(&a.column(qr, qc), &b).unwrap();
            let ba = correlation_map(&b.column(rr, rc), &a).unwrap();
            prop_assert!((ab.data()[rr * 4 + rc] - ba.data()[qr * 4 + qc]).abs() < 1e-6);
        }

        #[test]
        fn softmax_shift_invariant(seed in 0u64..500, shift in -5.0f64..5.0, beta in 0.01f64..2.0) {
            let r = random_map(seed, 1, 4, 4);
            let m = CorrelationMap::new(r.data().clone().reshaped(&[4, 4]).unwrap()).unwrap();
            let shifted = CorrelationMap::new(m.data().map(|v| v + shift)).unwrap();
            let p = softmax_2d(&m, beta).unwrap();
            let q = softmax_2d(&shifted, beta).unwrap();
            prop_assert!(p.data().max_abs_diff(q.data()) < 1e-6);
            prop_assert!((p.sum() - 1.0).abs() < 1e-6);
            let pm = CorrelationMap::new(p.data().clone()).unwrap();
            prop_assert_eq!(argmax_2d(&pm), argmax_2d(&m));
        }

        #[test]
        fn ground_truth_unit_mass(x in 0.0f64..63.99, y in 0.0f64..47.99, k in 0usize..5, sigma in 0.3f64..3.0) {
            let g = make_ground_truth::<f64>(Keypoint::new(x, y), Grid::new(6, 8), ImageSize::new(64.0, 48.0), 2 * k + 1, sigma).unwrap();
            prop_assert!((g.sum() - 1.0).abs() < 1e-6);
            prop_assert!(g.data().data().iter().all(|v| *v >= 0.0));
        }

        #[test]
        fn localize_stays_in_window(seed in 0u64..500, half in 0usize..4, beta in 0.01f64..1.0) {
            let r = random_map(seed, 1, 6, 7);
            let m = CorrelationMap::new(r.data().clone().reshaped(&[6, 7]).unwrap()).unwrap();
            let size = ImageSize::new(70.0, 60.0);
            let grid = m.grid();
            let (ar, ac) = argmax_2d(&m);
            let kp = kernel_softmax_localize(&m, beta, 2 * half + 1, size).unwrap();
            let lo = grid_to_pixel(ac.saturating_sub(half) as f64, ar.saturating_sub(half) as f64, grid, size);
            let hi = grid_to_pixel((ac + half).min(6) as f64, (ar + half).min(5) as f64, grid, size);
            prop_assert!(kp.x >= lo.x - 1e-9 && kp.x <= hi.x + 1e-9);
            prop_assert!(kp.y >= lo.y - 1e-9 && kp.y <= hi.y + 1e-9);
        }

        #[test]
        fn ground_truth_round_trip(r in 0usize..6, c in 0usize..8) {
            let grid = Grid::new(6, 8);
            let size = ImageSize::new(64.0, 48.0);
            let kp = grid_to_pixel(c as f64, r as f64, grid, size);
            let g = make_ground_truth::<f64>(kp, grid, size, 1, 1.0).unwrap();
            let m = CorrelationMap::new(g.data().clone()).unwrap();
            let back = kernel_softmax_localize(&m, 0.04, 1, size).unwrap();
            prop_assert!((back.x - kp.x).abs() <= 0.5 * grid.stride_x(size));
            prop_assert!((back.y - kp.y).abs() <= 0.5 * grid.stride_y(size));
        }
    }
}
