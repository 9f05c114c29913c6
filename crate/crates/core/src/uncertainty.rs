//! Test-time uncertainty: per-pixel mean, epistemic (head disagreement) and
//! aleatoric (predicted noise) maps, count intervals, and adaptive
//! partitioning of large images.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::dubnet::DubNetParams;
use crate::error::{invalid, Result};
use crate::recalib::RecalibrationMap;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveSummary {
    pub height: usize,
    pub width: usize,
    pub mean_map: Vec<f64>,
    pub epistemic_map: Vec<f64>,
    pub aleatoric_map: Vec<f64>,
    pub count_mean: f64,
    /// Sum of both variance maps.
    pub count_var: f64,
    pub count_std: f64,
}

/// Combine `K` head densities and the shared log-variance into a summary.
///
/// Per pixel: mean over heads, population variance over heads (clamped at
/// zero against round-off) and `exp(s)`. Count variance assumes independent
/// pixels.
pub fn summarize(densities: &[Tensor], logvar: &Tensor) -> Result<PredictiveSummary> {
    let first = densities
        .first()
        .ok_or_else(|| invalid("summarize: no head outputs"))?;
    for d in densities {
        d.same_shape(first, "summarize")?;
    }
    logvar.same_shape(first, "summarize")?;
    let (_, height, width) = first.dims3()?;
    let k = densities.len() as f64;
    let n = first.len();

    // Moments of deviations from the first head: algebraically the same
    // population variance, and exactly zero when all heads agree.
    let base = first.data();
    let mut mean_map = vec![0.0; n];
    let mut shift_sum = vec![0.0; n];
    let mut shift_sq = vec![0.0; n];
    for d in densities {
        for i in 0..n {
            let v = d.data()[i];
            let dv = v - base[i];
            mean_map[i] += v;
            shift_sum[i] += dv;
            shift_sq[i] += dv * dv;
        }
    }
    mean_map.iter_mut().for_each(|m| *m /= k);
    let epistemic_map: Vec<f64> = shift_sum
        .iter()
        .zip(&shift_sq)
        .map(|(&s1, &s2)| {
            let m = s1 / k;
            (s2 / k - m * m).max(0.0)
        })
        .collect();
    let aleatoric_map: Vec<f64> = logvar.data().iter().map(|s| s.exp()).collect();

    let count_mean = mean_map.iter().sum();
    let count_var = epistemic_map.iter().sum::<f64>() + aleatoric_map.iter().sum::<f64>();
    Ok(PredictiveSummary {
        height,
        width,
        mean_map,
        epistemic_map,
        aleatoric_map,
        count_mean,
        count_var,
        count_std: count_var.sqrt(),
    })
}

pub fn decompose(params: &DubNetParams, image: &Tensor) -> Result<PredictiveSummary> {
    let (densities, logvar) = params.forward_all(image)?;
    summarize(&densities, &logvar)
}

fn standard_normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// Two-sided interval of coverage `p` around `mean` with spread `std`.
///
/// With a recalibration map the endpoints use its quantiles at `(1 -+ p)/2`;
/// otherwise standard normal quantiles.
pub fn interval(
    mean: f64,
    std: f64,
    recal: Option<&RecalibrationMap>,
    p: f64,
) -> Result<(f64, f64)> {
    if !(p > 0.0 && p < 1.0) {
        return Err(invalid(format!("coverage {p} outside (0, 1)")));
    }
    let (lo_q, hi_q) = ((1.0 - p) / 2.0, (1.0 + p) / 2.0);
    let (z_lo, z_hi) = match recal {
        Some(map) => (map.invert_quantile(lo_q)?, map.invert_quantile(hi_q)?),
        None => (
            standard_normal_quantile(lo_q),
            standard_normal_quantile(hi_q),
        ),
    };
    Ok((mean + std * z_lo, mean + std * z_hi))
}

pub fn count_interval(
    summary: &PredictiveSummary,
    recal: Option<&RecalibrationMap>,
    p: f64,
) -> Result<(f64, f64)> {
    interval(summary.count_mean, summary.count_std, recal, p)
}

/// Axis-aligned pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Region {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Region {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn overlaps(&self, other: &Region) -> bool {
        self.row < other.row + other.height
            && other.row < self.row + self.height
            && self.col < other.col + other.width
            && other.col < self.col + self.width
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    pub region: Region,
    pub zoom: usize,
    pub count_mean: f64,
    pub count_std: f64,
    pub interval: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionReport {
    pub tiles: Vec<Tile>,
    pub total_count: f64,
    pub total_std: f64,
    pub total_interval: (f64, f64),
}

impl PartitionReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,col,height,width,zoom,count_mean,count_std,lo,hi\n");
        for t in &self.tiles {
            let r = t.region;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.row,
                r.col,
                r.height,
                r.width,
                t.zoom,
                t.count_mean,
                t.count_std,
                t.interval.0,
                t.interval.1
            ));
        }
        out.push_str(&format!(
            "total,,,,,{},{},{},{}\n",
            self.total_count, self.total_std, self.total_interval.0, self.total_interval.1
        ));
        out
    }
}

/// Count prediction for an image patch already rescaled to the model input.
pub trait TilePredictor {
    /// `(height, width)` the predictor expects.
    fn input_shape(&self) -> (usize, usize);
    /// Returns `(count_mean, count_std)`.
    fn predict(&self, tile: &Tensor) -> Result<(f64, f64)>;
}

pub struct ModelPredictor<'a> {
    pub params: &'a DubNetParams,
    pub input_shape: (usize, usize),
}

impl TilePredictor for ModelPredictor<'_> {
    fn input_shape(&self) -> (usize, usize) {
        self.input_shape
    }

    fn predict(&self, tile: &Tensor) -> Result<(f64, f64)> {
        let s = decompose(self.params, tile)?;
        Ok((s.count_mean, s.count_std))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionConfig {
    /// Minimum predicted count for a tile below the root.
    pub threshold: f64,
    /// Zoom factors: the image is split into `z x z` tiles at factor `z`.
    /// Increasing, each dividing the next; the first is the root level.
    pub levels: Vec<usize>,
    pub coverage: f64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            threshold: 20.0,
            levels: vec![1, 2, 4],
            coverage: 0.9,
        }
    }
}

/// Resample `len` pixels to `target` by integer block-mean or replication.
fn resample_factor(len: usize, target: usize) -> Result<(usize, bool)> {
    if len >= target && len.is_multiple_of(target) {
        Ok((len / target, true))
    } else if len < target && target.is_multiple_of(len) {
        Ok((target / len, false))
    } else {
        Err(invalid(format!(
            "tile size {len} and model input {target} are not integer multiples"
        )))
    }
}

/// Crop `region` from a `[1, H, W]` image and rescale it to `shape`.
pub fn rescale_region(image: &Tensor, region: Region, shape: (usize, usize)) -> Result<Tensor> {
    let (_, _, w) = image.dims3()?;
    let (fy, down_y) = resample_factor(region.height, shape.0)?;
    let (fx, down_x) = resample_factor(region.width, shape.1)?;
    let src = image.data();
    let at = |r: usize, c: usize| src[(region.row + r) * w + region.col + c];
    let mut out = Vec::with_capacity(shape.0 * shape.1);
    for oy in 0..shape.0 {
        for ox in 0..shape.1 {
            let rows = if down_y {
                oy * fy..(oy + 1) * fy
            } else {
                oy / fy..oy / fy + 1
            };
            let cols = if down_x {
                ox * fx..(ox + 1) * fx
            } else {
                ox / fx..ox / fx + 1
            };
            let n = (rows.len() * cols.len()) as f64;
            let mut acc = 0.0;
            for r in rows {
                for c in cols.clone() {
                    acc += at(r, c);
                }
            }
            out.push(acc / n);
        }
    }
    Tensor::new(vec![1, shape.0, shape.1], out)
}

struct Candidate {
    tiles: Vec<Tile>,
    var: f64,
}

struct Partitioner<'a, F> {
    evaluate: F,
    cfg: &'a PartitionConfig,
    recal: Option<&'a RecalibrationMap>,
}

impl<F: FnMut(Region, usize) -> Result<(f64, f64)>> Partitioner<'_, F> {
    fn tile(&mut self, region: Region, zoom: usize) -> Result<Tile> {
        let (count_mean, count_std) = (self.evaluate)(region, zoom)?;
        Ok(Tile {
            region,
            zoom,
            count_mean,
            count_std,
            interval: interval(count_mean, count_std, self.recal, self.cfg.coverage)?,
        })
    }

    /// Best partition of `region` (at level index `depth`) or `None` if no
    /// admissible one exists. Splitting wins ties.
    fn solve(&mut self, region: Region, depth: usize) -> Result<Option<Candidate>> {
        let zoom = self.cfg.levels[depth];
        let here = self.tile(region, zoom)?;
        let keep = (depth == 0 || here.count_mean >= self.cfg.threshold).then(|| Candidate {
            var: here.count_std * here.count_std,
            tiles: vec![here],
        });

        let split = match self.cfg.levels.get(depth + 1) {
            None => None,
            Some(&next) => {
                let per_side = next / zoom;
                let (ch, cw) = (region.height / per_side, region.width / per_side);
                let mut tiles = Vec::new();
                let mut var = 0.0;
                let mut admissible = true;
                'children: for i in 0..per_side {
                    for j in 0..per_side {
                        let child = Region {
                            row: region.row + i * ch,
                            col: region.col + j * cw,
                            height: ch,
                            width: cw,
                        };
                        match self.solve(child, depth + 1)? {
                            Some(c) => {
                                var += c.var;
                                tiles.extend(c.tiles);
                            }
                            None => {
                                admissible = false;
                                break 'children;
                            }
                        }
                    }
                }
                admissible.then_some(Candidate { tiles, var })
            }
        };

        Ok(match (keep, split) {
            (Some(k), Some(s)) => Some(if s.var <= k.var { s } else { k }),
            (k, s) => k.or(s),
        })
    }
}

fn check_levels(height: usize, width: usize, cfg: &PartitionConfig) -> Result<()> {
    if cfg.levels.is_empty() {
        return Err(invalid("partition: no zoom levels"));
    }
    if cfg.levels[0] == 0
        || cfg
            .levels
            .windows(2)
            .any(|w| w[1] <= w[0] || w[1] % w[0] != 0)
    {
        return Err(invalid(
            "partition: levels must be increasing, each dividing the next",
        ));
    }
    for &z in &cfg.levels {
        if !height.is_multiple_of(z) || !width.is_multiple_of(z) {
            return Err(invalid(format!(
                "partition: {height}x{width} image not divisible by zoom {z}"
            )));
        }
    }
    if !(cfg.coverage > 0.0 && cfg.coverage < 1.0) {
        return Err(invalid("partition: coverage must lie in (0, 1)"));
    }
    Ok(())
}

/// Quadtree partition of a `height x width` area given a per-region count
/// evaluator `evaluate(region, zoom) -> (count_mean, count_std)`.
///
/// Tiles below the root level must reach `cfg.threshold`; among admissible
/// choices for a region the one with the lowest count variance wins, finer
/// tiles on ties.
pub fn partition_regions(
    height: usize,
    width: usize,
    evaluate: impl FnMut(Region, usize) -> Result<(f64, f64)>,
    cfg: &PartitionConfig,
    recal: Option<&RecalibrationMap>,
) -> Result<PartitionReport> {
    check_levels(height, width, cfg)?;
    let mut p = Partitioner {
        evaluate,
        cfg,
        recal,
    };
    let z0 = cfg.levels[0];
    let (th, tw) = (height / z0, width / z0);
    let mut tiles = Vec::new();
    let mut var = 0.0;
    for i in 0..z0 {
        for j in 0..z0 {
            let region = Region {
                row: i * th,
                col: j * tw,
                height: th,
                width: tw,
            };
            let best = p
                .solve(region, 0)?
                .expect("root level is always admissible");
            var += best.var;
            tiles.extend(best.tiles);
        }
    }
    let total_count = tiles.iter().map(|t| t.count_mean).sum();
    let total_std = f64::sqrt(var);
    Ok(PartitionReport {
        total_interval: interval(total_count, total_std, recal, cfg.coverage)?,
        tiles,
        total_count,
        total_std,
    })
}

/// [`partition_regions`] over a `[1, H, W]` image, evaluating each tile by
/// rescaling it to the predictor's input shape.
pub fn adaptive_partition<P: TilePredictor>(
    predictor: &P,
    image: &Tensor,
    cfg: &PartitionConfig,
    recal: Option<&RecalibrationMap>,
) -> Result<PartitionReport> {
    let (_, height, width) = image.dims3()?;
    check_levels(height, width, cfg)?;
    let input = predictor.input_shape();
    for &z in &cfg.levels {
        resample_factor(height / z, input.0)?;
        resample_factor(width / z, input.1)?;
    }
    let evaluate = |region: Region, _zoom: usize| {
        let tile = rescale_region(image, region, input)?;
        predictor.predict(&tile)
    };
    partition_regions(height, width, evaluate, cfg, recal)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: Vec<f64>) -> Tensor {
        let n = v.len();
        Tensor::new(vec![1, 1, n], v).unwrap()
    }

    #[test]
    fn two_head_arithmetic() {
        let s = summarize(&[t(vec![1.0]), t(vec![3.0])], &t(vec![0.0])).unwrap();
        assert_eq!(s.mean_map, vec![2.0]);
        assert_eq!(s.epistemic_map, vec![1.0]);
        assert_eq!(s.aleatoric_map, vec![1.0]);
        assert_eq!(s.count_var, 2.0);
    }

    #[test]
    fn identical_heads_have_no_epistemic_variance() {
        let d = t(vec![0.1, 0.7, 0.3, 0.35]);
        let s = summarize(&[d.clone(), d.clone(), d], &t(vec![0.0; 4])).unwrap();
        assert!(s.epistemic_map.iter().all(|&v| v == 0.0));
        assert_eq!(s.count_var, 4.0);
    }

    #[test]
    fn gaussian_interval() {
        let s = summarize(&[t(vec![5.0])], &t(vec![0.0])).unwrap();
        let (lo, hi) = count_interval(&s, None, 0.90).unwrap();
        assert!((lo - (5.0 - 1.6449)).abs() < 1e-4);
        assert!((hi - (5.0 + 1.6449)).abs() < 1e-4);
        assert!(count_interval(&s, None, 1.0).is_err());
        assert!(count_interval(&s, None, 0.0).is_err());
    }

    #[test]
    fn zero_std_collapses_interval() {
        assert_eq!(interval(7.5, 0.0, None, 0.9).unwrap(), (7.5, 7.5));
    }

    #[test]
    fn rescale_block_mean_and_replicate() {
        let img = Tensor::new(vec![1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let whole = Region {
            row: 0,
            col: 0,
            height: 4,
            width: 4,
        };
        let down = rescale_region(&img, whole, (2, 2)).unwrap();
        assert_eq!(down.data(), &[2.5, 4.5, 10.5, 12.5]);
        let corner = Region {
            row: 2,
            col: 2,
            height: 2,
            width: 2,
        };
        let up = rescale_region(&img, corner, (4, 4)).unwrap();
        assert_eq!(&up.data()[..4], &[10.0, 10.0, 11.0, 11.0]);
        assert!(rescale_region(&img, whole, (3, 3)).is_err());
    }

    /// Evaluator with a uniform object density and Poisson-like spread.
    fn uniform(per_pixel: f64, std_scale: f64) -> impl FnMut(Region, usize) -> Result<(f64, f64)> {
        move |r: Region, _| {
            let c = per_pixel * r.area() as f64;
            Ok((c, std_scale * c.sqrt()))
        }
    }

    fn check_tiling(report: &PartitionReport, h: usize, w: usize) {
        let area: usize = report.tiles.iter().map(|t| t.region.area()).sum();
        assert_eq!(area, h * w);
        for (i, a) in report.tiles.iter().enumerate() {
            for b in &report.tiles[i + 1..] {
                assert!(!a.region.overlaps(&b.region));
            }
        }
        let sum: f64 = report.tiles.iter().map(|t| t.count_mean).sum();
        assert_eq!(report.total_count, sum);
    }

    #[test]
    fn sparse_children_merge_into_root() {
        // 5 objects per 8x8 quadrant.
        let cfg = PartitionConfig {
            threshold: 20.0,
            levels: vec![1, 2],
            coverage: 0.9,
        };
        let rep = partition_regions(16, 16, uniform(5.0 / 64.0, 1.0), &cfg, None).unwrap();
        assert_eq!(rep.tiles.len(), 1);
        assert_eq!(rep.tiles[0].zoom, 1);
        check_tiling(&rep, 16, 16);
    }

    #[test]
    fn dense_fine_tiles_are_kept() {
        // 25 objects per finest 8x8 tile; variances add, so the split ties
        // with its parent and the finer tiling is retained.
        let cfg = PartitionConfig {
            threshold: 20.0,
            levels: vec![1, 2, 4],
            coverage: 0.9,
        };
        let rep = partition_regions(32, 32, uniform(25.0 / 64.0, 1.0), &cfg, None).unwrap();
        check_tiling(&rep, 32, 32);
        assert_eq!(rep.tiles.len(), 16);
        for tile in &rep.tiles {
            assert_eq!(tile.zoom, 4);
            assert!((tile.count_mean - 25.0).abs() < 1e-9);
        }
    }

    #[test]
    fn lower_variance_level_wins() {
        // Coarse tiles report half the spread of fine ones.
        let cfg = PartitionConfig {
            threshold: 1.0,
            levels: vec![1, 2],
            coverage: 0.9,
        };
        let eval = |r: Region, zoom: usize| {
            let c = r.area() as f64 / 8.0;
            Ok((c, if zoom == 1 { 0.5 } else { 1.0 } * c.sqrt()))
        };
        let rep = partition_regions(16, 16, eval, &cfg, None).unwrap();
        assert_eq!(rep.tiles.len(), 1);
    }

    #[test]
    fn model_predictor_partition() {
        let params = DubNetParams::init(&crate::dubnet::ArchConfig::default(), 0).unwrap();
        let img = Tensor::full(&[1, 64, 64], 0.2);
        let pred = ModelPredictor {
            params: &params,
            input_shape: (16, 16),
        };
        let cfg = PartitionConfig {
            threshold: 20.0,
            levels: vec![1, 2, 4],
            coverage: 0.9,
        };
        let rep = adaptive_partition(&pred, &img, &cfg, None).unwrap();
        check_tiling(&rep, 64, 64);
        for tile in rep.tiles.iter().filter(|t| t.zoom != 1) {
            assert!(tile.count_mean >= 20.0);
        }
    }

    #[test]
    fn invalid_levels_rejected() {
        let bad = PartitionConfig {
            levels: vec![2, 1],
            ..Default::default()
        };
        assert!(partition_regions(16, 16, uniform(0.1, 1.0), &bad, None).is_err());
        let bad = PartitionConfig {
            levels: vec![1, 3],
            ..Default::default()
        };
        assert!(partition_regions(16, 16, uniform(0.1, 1.0), &bad, None).is_err());
        let params = DubNetParams::init(&crate::dubnet::ArchConfig::default(), 0).unwrap();
        let pred = ModelPredictor {
            params: &params,
            input_shape: (12, 12),
        };
        let img = Tensor::zeros(&[1, 32, 32]);
        assert!(adaptive_partition(&pred, &img, &PartitionConfig::default(), None).is_err());
    }
}
