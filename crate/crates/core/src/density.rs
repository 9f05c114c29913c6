//! Ground-truth density maps from dot annotations using geometry-adaptive
//! Gaussian kernels, plus count-preserving block-sum downsampling.

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Annotated point in pixel coordinates; pixel `(r, c)` covers `[r, r+1) x [c, c+1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub row: f64,
    pub col: f64,
}

impl Point {
    pub fn new(row: f64, col: f64) -> Self {
        Self { row, col }
    }

    fn dist(&self, other: &Point) -> f64 {
        (self.row - other.row).hypot(self.col - other.col)
    }
}

/// Grayscale image with its head annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct DotAnnotatedImage {
    pub id: String,
    pub height: usize,
    pub width: usize,
    /// Row-major, values in `[0, 1]`.
    pub pixels: Vec<f64>,
    pub points: Vec<Point>,
}

impl DotAnnotatedImage {
    pub fn new(
        id: impl Into<String>,
        height: usize,
        width: usize,
        pixels: Vec<f64>,
        points: Vec<Point>,
    ) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(invalid(format!(
                "image {}x{} needs {} pixels, got {}",
                height,
                width,
                height * width,
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(invalid("pixel values must lie in [0, 1]"));
        }
        check_bounds(height, width, &points)?;
        Ok(Self {
            id: id.into(),
            height,
            width,
            pixels,
            points,
        })
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }

    /// Pixels as a `[1, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.height, self.width], self.pixels.clone()).expect("validated shape")
    }
}

fn check_bounds(height: usize, width: usize, points: &[Point]) -> Result<()> {
    for p in points {
        let inside = p.row >= 0.0 && p.row < height as f64 && p.col >= 0.0 && p.col < width as f64;
        if !inside {
            return Err(invalid(format!(
                "point ({}, {}) outside {}x{} image",
                p.row, p.col, height, width
            )));
        }
    }
    Ok(())
}

/// Non-negative grid whose sum is the object count.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl DensityMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(invalid("density map size does not match its shape"));
        }
        if values.iter().any(|&v| !(v >= 0.0)) {
            return Err(invalid("density values must be non-negative"));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    /// Number of pixels `D`.
    pub fn pixel_count(&self) -> usize {
        self.values.len()
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// As a `[1, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.height, self.width], self.values.clone()).expect("validated shape")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    /// Spread multiplier on the mean neighbour distance.
    pub beta: f64,
    /// Number of nearest neighbours.
    pub k: usize,
    pub sigma_floor: f64,
    /// Width used for points with no neighbours at all.
    pub sigma_default: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            beta: 0.3,
            k: 3,
            sigma_floor: 1.0,
            sigma_default: 4.0,
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0)
            || self.k == 0
            || !(self.sigma_floor > 0.0)
            || !(self.sigma_default > 0.0)
        {
            return Err(invalid(format!("invalid kernel config {self:?}")));
        }
        Ok(())
    }

    pub fn sigma_for(&self, mean_dist: f64) -> f64 {
        (self.beta * mean_dist).max(self.sigma_floor)
    }
}

/// Mean distance from each point to its `cfg.k` nearest other points.
///
/// Points with fewer than `k` neighbours average over what exists; an isolated
/// point gets `sigma_default / beta` so that its kernel width is `sigma_default`.
pub fn knn_mean_distance(points: &[Point], cfg: &KernelConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(points.len());
    let mut dists = Vec::with_capacity(points.len());
    for (j, p) in points.iter().enumerate() {
        dists.clear();
        dists.extend(
            points
                .iter()
                .enumerate()
                .filter(|&(m, _)| m != j)
                .map(|(_, q)| p.dist(q)),
        );
        if dists.is_empty() {
            out.push(cfg.sigma_default / cfg.beta);
            continue;
        }
        let take = cfg.k.min(dists.len());
        dists.select_nth_unstable_by(take - 1, f64::total_cmp);
        let mut nearest = dists[..take].to_vec();
        // Fixed summation order regardless of how the selection permuted them.
        nearest.sort_by(f64::total_cmp);
        out.push(nearest.iter().sum::<f64>() / take as f64);
    }
    Ok(out)
}

/// Render the geometry-adaptive density map at the image resolution.
///
/// Each kernel is truncated at 4 sigma and to the image, then rescaled so its
/// own mass is exactly one.
pub fn render_density(
    height: usize,
    width: usize,
    points: &[Point],
    cfg: &KernelConfig,
) -> Result<DensityMap> {
    check_bounds(height, width, points)?;
    // Canonical order so the accumulation (and thus every bit) is independent
    // of annotation order.
    let mut points = points.to_vec();
    points.sort_by(|a, b| a.row.total_cmp(&b.row).then(a.col.total_cmp(&b.col)));
    let mean_d = knn_mean_distance(&points, cfg)?;
    let mut values = vec![0.0; height * width];
    let mut patch = Vec::new();
    for (p, &d) in points.iter().zip(&mean_d) {
        let sigma = cfg.sigma_for(d);
        let radius = (4.0 * sigma).ceil();
        let r0 = ((p.row - radius).floor().max(0.0)) as usize;
        let r1 = ((p.row + radius).ceil() as usize).min(height);
        let c0 = ((p.col - radius).floor().max(0.0)) as usize;
        let c1 = ((p.col + radius).ceil() as usize).min(width);
        let inv = 1.0 / (2.0 * sigma * sigma);
        patch.clear();
        let mut mass = 0.0;
        for r in r0..r1 {
            let dr = r as f64 + 0.5 - p.row;
            for c in c0..c1 {
                let dc = c as f64 + 0.5 - p.col;
                let d2 = dr * dr + dc * dc;
                let v = if d2 <= 16.0 * sigma * sigma {
                    (-d2 * inv).exp()
                } else {
                    0.0
                };
                mass += v;
                patch.push(v);
            }
        }
        // The pixel containing the point is always inside the window, so mass > 0.
        let cols = c1 - c0;
        for (i, v) in patch.iter().enumerate() {
            let (r, c) = (r0 + i / cols, c0 + i % cols);
            values[r * width + c] += v / mass;
        }
    }
    Ok(DensityMap {
        height,
        width,
        values,
    })
}

/// Sum over non-overlapping `factor x factor` blocks.
pub fn downsample_blocksum(map: &DensityMap, factor: usize) -> Result<DensityMap> {
    if factor == 0 || !map.height.is_multiple_of(factor) || !map.width.is_multiple_of(factor) {
        return Err(invalid(format!(
            "{}x{} map is not divisible by factor {factor}",
            map.height, map.width
        )));
    }
    let (oh, ow) = (map.height / factor, map.width / factor);
    let mut values = vec![0.0; oh * ow];
    for r in 0..map.height {
        let row = &map.values[r * map.width..(r + 1) * map.width];
        let out_row = &mut values[(r / factor) * ow..(r / factor + 1) * ow];
        for (oc, block) in row.chunks(factor).enumerate() {
            out_row[oc] += block.iter().sum::<f64>();
        }
    }
    Ok(DensityMap {
        height: oh,
        width: ow,
        values,
    })
}

/// Render at full resolution and block-sum to the network output resolution.
pub fn target_density(
    image: &DotAnnotatedImage,
    cfg: &KernelConfig,
    factor: usize,
) -> Result<DensityMap> {
    let full = render_density(image.height, image.width, &image.points, cfg)?;
    downsample_blocksum(&full, factor)
}
