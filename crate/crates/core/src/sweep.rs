//! Plane-sweep cost volumes: warp neighbor views over a stack of
//! fronto-parallel depth hypotheses and score absolute color differences.

use nalgebra::Matrix3;
use ndarray::{Array3, Zip};

use crate::error::{Error, Result};
use crate::pose::RelativePose;
use crate::scalar::{real, to_f64, Real};

/// Pinhole intrinsics paired with the image resolution they describe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics<T: Real> {
    fx: T,
    fy: T,
    cx: T,
    cy: T,
    width: usize,
    height: usize,
}

impl<T: Real> Intrinsics<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T, width: usize, height: usize) -> Result<Self> {
        for (name, v) in [("fx", fx), ("fy", fy), ("cx", cx), ("cy", cy)] {
            if !v.is_finite() {
                return Err(Error::NonFinite("intrinsics"));
            }
            if (name == "fx" || name == "fy") && v <= T::zero() {
                return Err(Error::InvalidRange(format!(
                    "focal length {name} must be positive, got {}",
                    to_f64(v)
                )));
            }
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidRange(format!(
                "image size must be positive, got {width}x{height}"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    pub fn fx(&self) -> T {
        self.fx
    }

    pub fn fy(&self) -> T {
        self.fy
    }

    pub fn cx(&self) -> T {
        self.cx
    }

    pub fn cy(&self) -> T {
        self.cy
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn k_matrix(&self) -> Matrix3<T> {
        Matrix3::new(
            self.fx,
            T::zero(),
            self.cx,
            T::zero(),
            self.fy,
            self.cy,
            T::zero(),
            T::zero(),
            T::one(),
        )
    }

    pub fn k_inverse(&self) -> Matrix3<T> {
        Matrix3::new(
            T::one() / self.fx,
            T::zero(),
            -self.cx / self.fx,
            T::zero(),
            T::one() / self.fy,
            -self.cy / self.fy,
            T::zero(),
            T::zero(),
            T::one(),
        )
    }
}

/// Channel-first image `(C, H, W)` with 1 or 3 channels; intensities are
/// clamped to `[0, 1]` on ingest and NaN is rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor<T: Real> {
    data: Array3<T>,
}

impl<T: Real> ImageTensor<T> {
    pub fn new(mut data: Array3<T>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != 1 && c != 3 {
            return Err(Error::DimensionMismatch {
                context: "image tensor",
                expected: "1 or 3 channels".into(),
                got: format!("{c}"),
            });
        }
        if h == 0 || w == 0 {
            return Err(Error::InvalidRange(format!(
                "image size must be positive, got {h}x{w}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image tensor"));
        }
        data.mapv_inplace(|v| v.clamp(T::zero(), T::one()));
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array3<T> {
        &self.data
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }
}

/// Plane-sweep cost volume `(D, H, W)` with its strictly increasing depth
/// hypotheses.
#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume<T: Real> {
    cost: Array3<T>,
    planes: Vec<T>,
}

impl<T: Real> CostVolume<T> {
    pub fn new(cost: Array3<T>, planes: Vec<T>) -> Result<Self> {
        if cost.dim().0 != planes.len() {
            return Err(Error::DimensionMismatch {
                context: "cost volume",
                expected: format!("{} cost slices", planes.len()),
                got: format!("{}", cost.dim().0),
            });
        }
        validate_planes(&planes)?;
        if cost.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cost volume"));
        }
        Ok(Self { cost, planes })
    }

    pub fn cost(&self) -> &Array3<T> {
        &self.cost
    }

    pub fn planes(&self) -> &[T] {
        &self.planes
    }

    pub fn num_planes(&self) -> usize {
        self.planes.len()
    }

    pub fn height(&self) -> usize {
        self.cost.dim().1
    }

    pub fn width(&self) -> usize {
        self.cost.dim().2
    }

    /// Index of the cheapest plane at each pixel.
    pub fn argmin_planes(&self) -> ndarray::Array2<usize> {
        let (d, h, w) = self.cost.dim();
        let mut out = ndarray::Array2::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                let mut best = 0;
                let mut best_cost = self.cost[[0, y, x]];
                for k in 1..d {
                    if self.cost[[k, y, x]] < best_cost {
                        best_cost = self.cost[[k, y, x]];
                        best = k;
                    }
                }
                out[[y, x]] = best;
            }
        }
        out
    }
}

fn validate_planes<T: Real>(planes: &[T]) -> Result<()> {
    if planes.is_empty() {
        return Err(Error::InvalidRange("empty plane list".into()));
    }
    if planes.iter().any(|v| !v.is_finite() || *v <= T::zero()) {
        return Err(Error::InvalidRange(
            "depth planes must be finite and positive".into(),
        ));
    }
    if planes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidRange(
            "depth planes must be strictly increasing".into(),
        ));
    }
    Ok(())
}

/// `count` depths spaced uniformly in inverse depth over `[d_min, d_max]`,
/// nearest first; the endpoints are exactly `d_min` and `d_max`.
pub fn depth_planes<T: Real>(d_min: T, d_max: T, count: usize) -> Result<Vec<T>> {
    if !d_min.is_finite() || !d_max.is_finite() || d_min <= T::zero() || d_max <= d_min {
        return Err(Error::InvalidRange(format!(
            "need 0 < d_min < d_max, got d_min = {}, d_max = {}",
            to_f64(d_min),
            to_f64(d_max)
        )));
    }
    if count < 2 {
        return Err(Error::InvalidRange(format!(
            "need at least 2 planes, got {count}"
        )));
    }
    let inv_near = T::one() / d_min;
    let inv_far = T::one() / d_max;
    let last = real::<T>((count - 1) as f64);
    let mut planes = Vec::with_capacity(count);
    planes.push(d_min);
    for k in 1..count - 1 {
        let f = real::<T>(k as f64) / last;
        planes.push(T::one() / (inv_near + f * (inv_far - inv_near)));
    }
    planes.push(d_max);
    validate_planes(&planes)?;
    Ok(planes)
}

/// Homography mapping homogeneous reference pixels to neighbor pixels for
/// points on the fronto-parallel plane at `depth` in the reference frame:
/// `H = K (R + t [0 0 1/depth]) K^-1`.
pub fn homography<T: Real>(
    k: &Intrinsics<T>,
    rel: &RelativePose<T>,
    depth: T,
) -> Result<Matrix3<T>> {
    if !depth.is_finite() || depth <= T::zero() {
        return Err(Error::InvalidRange(format!(
            "plane depth must be positive, got {}",
            to_f64(depth)
        )));
    }
    let mut m = *rel.rotation();
    let scaled = rel.translation() / depth;
    for i in 0..3 {
        m[(i, 2)] += scaled[i];
    }
    Ok(k.k_matrix() * m * k.k_inverse())
}

/// Projects pixel `(x, y)` through `h`; `None` when the homogeneous scale
/// is nonpositive.
pub fn map_pixel<T: Real>(h: &Matrix3<T>, x: T, y: T) -> Option<(T, T)> {
    let w = h[(2, 0)] * x + h[(2, 1)] * y + h[(2, 2)];
    if !w.is_finite() || w <= T::zero() {
        return None;
    }
    let u = (h[(0, 0)] * x + h[(0, 1)] * y + h[(0, 2)]) / w;
    let v = (h[(1, 0)] * x + h[(1, 1)] * y + h[(1, 2)]) / w;
    Some((u, v))
}

/// Bilinear sample with pixel centers on integer coordinates. Zero-weight
/// neighbors collapse onto the base pixel so integer coordinates sample the
/// grid exactly; a sample is valid only if every contributing neighbor is in
/// bounds.
fn sample_bilinear<T: Real>(data: &Array3<T>, c: usize, x: T, y: T) -> Option<T> {
    let (_, h, w) = data.dim();
    let x0f = x.floor();
    let y0f = y.floor();
    let dx = x - x0f;
    let dy = y - y0f;
    let x0 = x0f.to_isize()?;
    let y0 = y0f.to_isize()?;
    let x1 = if dx > T::zero() { x0 + 1 } else { x0 };
    let y1 = if dy > T::zero() { y0 + 1 } else { y0 };
    if x0 < 0 || y0 < 0 || x1 >= w as isize || y1 >= h as isize {
        return None;
    }
    let (x0, x1, y0, y1) = (x0 as usize, x1 as usize, y0 as usize, y1 as usize);
    let one = T::one();
    let top = (one - dx) * data[[c, y0, x0]] + dx * data[[c, y0, x1]];
    let bottom = (one - dx) * data[[c, y1, x0]] + dx * data[[c, y1, x1]];
    Some((one - dy) * top + dy * bottom)
}

/// Warps `neighbor` into the reference grid under `h` (reference pixel ->
/// neighbor pixel). Out-of-bounds or nonpositive-scale samples produce 0.
pub fn warp_image<T: Real>(neighbor: &ImageTensor<T>, h: &Matrix3<T>) -> ImageTensor<T> {
    let (c, rows, cols) = neighbor.data.dim();
    let mut out = Array3::zeros((c, rows, cols));
    for y in 0..rows {
        for x in 0..cols {
            let mapped = map_pixel(h, real::<T>(x as f64), real::<T>(y as f64));
            if let Some((sx, sy)) = mapped {
                for ch in 0..c {
                    if let Some(v) = sample_bilinear(&neighbor.data, ch, sx, sy) {
                        out[[ch, y, x]] = v;
                    }
                }
            }
        }
    }
    ImageTensor { data: out }
}

/// Cost volume over `planes`: for each plane, each neighbor is warped into
/// the reference grid and scored by the per-pixel sum of absolute channel
/// differences; multiple neighbors average their volumes.
pub fn cost_volume<T: Real>(
    reference: &ImageTensor<T>,
    neighbors: &[(ImageTensor<T>, RelativePose<T>)],
    k: &Intrinsics<T>,
    planes: &[T],
) -> Result<CostVolume<T>> {
    if neighbors.is_empty() {
        return Err(Error::DimensionMismatch {
            context: "cost_volume",
            expected: "at least 1 neighbor".into(),
            got: "0".into(),
        });
    }
    validate_planes(planes)?;
    let (c, h, w) = reference.data.dim();
    if k.width() != w || k.height() != h {
        return Err(Error::DimensionMismatch {
            context: "cost_volume intrinsics",
            expected: format!("{w}x{h}"),
            got: format!("{}x{}", k.width(), k.height()),
        });
    }
    for (img, _) in neighbors {
        if img.data.dim() != (c, h, w) {
            return Err(Error::DimensionMismatch {
                context: "cost_volume neighbor",
                expected: format!("{c}x{h}x{w}"),
                got: format!("{:?}", img.data.dim()),
            });
        }
    }

    let mut cost = Array3::<T>::zeros((planes.len(), h, w));
    for (image, rel) in neighbors {
        for (pi, &depth) in planes.iter().enumerate() {
            let hom = homography(k, rel, depth)?;
            let warped = warp_image(image, &hom);
            let mut slice = cost.index_axis_mut(ndarray::Axis(0), pi);
            for ch in 0..c {
                let warped_ch = warped.data.index_axis(ndarray::Axis(0), ch);
                let ref_ch = reference.data.index_axis(ndarray::Axis(0), ch);
                Zip::from(&mut slice)
                    .and(&warped_ch)
                    .and(&ref_ch)
                    .for_each(|acc, &wv, &rv| *acc += (wv - rv).abs());
            }
        }
    }
    let scale = T::one() / real::<T>(neighbors.len() as f64);
    cost.mapv_inplace(|v| v * scale);
    CostVolume::new(cost, planes.to_vec())
}
