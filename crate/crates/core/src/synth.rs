//! Synthetic dot-annotated scenes, evaluation metrics, coverage, and the
//! variant ablation harness.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::density::{target_density, DensityMap, DotAnnotatedImage, KernelConfig, Point};
use crate::dubnet::{ArchConfig, DubNetParams};
use crate::error::{invalid, Result};
use crate::recalib::{recalibrate, RecalibrationMap, ResidualRecord};
use crate::seed::{derive_seed, rng_for};
use crate::trainer::{train, TrainConfig, Variant};
use crate::uncertainty::{count_interval, decompose, PredictiveSummary, Region};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Inclusive `[min, max]` number of objects.
    pub count_range: (usize, usize),
    pub blob_sigma: f64,
    pub blob_amplitude: f64,
    pub background_level: f64,
    pub background_noise_std: f64,
    pub glare_probability: f64,
    /// Blend weight of the glare noise over the scene, in `[0, 1]`.
    pub glare_strength: f64,
    /// Minimum distance between object centres.
    pub min_separation: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            count_range: (5, 60),
            blob_sigma: 1.5,
            blob_amplitude: 0.8,
            background_level: 0.1,
            background_noise_std: 0.05,
            glare_probability: 0.0,
            glare_strength: 0.8,
            min_separation: 2.0,
        }
    }
}

impl SceneConfig {
    /// Default scene with glare on more than half the images.
    pub fn noisy() -> Self {
        Self {
            glare_probability: 0.6,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.count_range;
        if hi < lo {
            return Err(invalid(format!("count range ({lo}, {hi}) is empty")));
        }
        if self.height == 0 || self.width == 0 {
            return Err(invalid("scene dimensions must be positive"));
        }
        if !(self.blob_sigma > 0.0)
            || !(self.background_noise_std >= 0.0)
            || !(self.min_separation >= 0.0)
        {
            return Err(invalid(
                "scene blob sigma, noise and separation must be non-negative",
            ));
        }
        if !(0.0..=1.0).contains(&self.glare_probability)
            || !(0.0..=1.0).contains(&self.glare_strength)
        {
            return Err(invalid("glare probability and strength must lie in [0, 1]"));
        }
        let disc = std::f64::consts::PI * (self.min_separation / 2.0).powi(2);
        let capacity = (self.height * self.width) as f64;
        if hi as f64 > capacity || hi as f64 * disc > 0.5 * capacity {
            return Err(invalid(format!(
                "{hi} objects do not fit a {}x{} scene with separation {}",
                self.height, self.width, self.min_separation
            )));
        }
        Ok(())
    }

    pub fn check_divisible(&self, factor: usize) -> Result<()> {
        if !self.height.is_multiple_of(factor) || !self.width.is_multiple_of(factor) {
            return Err(invalid(format!(
                "scene {}x{} not divisible by downsample factor {factor}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: DotAnnotatedImage,
    pub glare: Option<Region>,
}

pub fn generate_scene(cfg: &SceneConfig, seed: u64, id: &str) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = rng_for(seed, "scene");
    let (h, w) = (cfg.height, cfg.width);
    let count = rng.random_range(cfg.count_range.0..=cfg.count_range.1);

    let sep2 = cfg.min_separation * cfg.min_separation;
    let mut points: Vec<Point> = Vec::with_capacity(count);
    while points.len() < count {
        let mut placed = false;
        for _ in 0..10_000 {
            let p = Point::new(
                rng.random::<f64>() * h as f64,
                rng.random::<f64>() * w as f64,
            );
            if points
                .iter()
                .all(|q| (p.row - q.row).powi(2) + (p.col - q.col).powi(2) >= sep2)
            {
                points.push(p);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(invalid(format!(
                "could not place {count} separated objects"
            )));
        }
    }

    let mut pixels = vec![cfg.background_level; h * w];
    let radius = (4.0 * cfg.blob_sigma).ceil();
    let inv = 1.0 / (2.0 * cfg.blob_sigma * cfg.blob_sigma);
    for p in &points {
        let r0 = (p.row - radius).floor().max(0.0) as usize;
        let r1 = ((p.row + radius).ceil() as usize).min(h);
        let c0 = (p.col - radius).floor().max(0.0) as usize;
        let c1 = ((p.col + radius).ceil() as usize).min(w);
        for r in r0..r1 {
            for c in c0..c1 {
                let d2 = (r as f64 + 0.5 - p.row).powi(2) + (c as f64 + 0.5 - p.col).powi(2);
                pixels[r * w + c] += cfg.blob_amplitude * (-d2 * inv).exp();
            }
        }
    }
    if cfg.background_noise_std > 0.0 {
        let noise =
            Normal::new(0.0, cfg.background_noise_std).map_err(|e| invalid(e.to_string()))?;
        pixels.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }

    let mut glare = None;
    if rng.random::<f64>() < cfg.glare_probability {
        let gh = rng.random_range((h / 4).max(1)..=(h / 2).max(1));
        let gw = rng.random_range((w / 4).max(1)..=(w / 2).max(1));
        let region = Region {
            row: rng.random_range(0..=h - gh),
            col: rng.random_range(0..=w - gw),
            height: gh,
            width: gw,
        };
        let g = cfg.glare_strength;
        for r in region.row..region.row + gh {
            for c in region.col..region.col + gw {
                let v = &mut pixels[r * w + c];
                *v = (1.0 - g) * *v + g * rng.random::<f64>();
            }
        }
        glare = Some(region);
    }
    pixels.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));

    Ok(Scene {
        image: DotAnnotatedImage::new(id, h, w, pixels, points)?,
        glare,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 300,
            val: 100,
            test: 200,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(invalid(format!("unknown split {other:?}"))),
        }
    }
}

/// Split assignment by scene index: train first, then validation, then test.
pub fn split_of(index: usize, sizes: &SplitSizes) -> Option<Split> {
    if index < sizes.train {
        Some(Split::Train)
    } else if index < sizes.train + sizes.val {
        Some(Split::Val)
    } else if index < sizes.train + sizes.val + sizes.test {
        Some(Split::Test)
    } else {
        None
    }
}

pub fn scene_id(index: usize) -> String {
    format!("scene_{index:04}")
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<DotAnnotatedImage>,
    pub val: Vec<DotAnnotatedImage>,
    pub test: Vec<DotAnnotatedImage>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[DotAnnotatedImage] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

pub fn generate_dataset(cfg: &SceneConfig, sizes: &SplitSizes, seed: u64) -> Result<Dataset> {
    let data_seed = derive_seed(seed, "data");
    let mut ds = Dataset::default();
    for i in 0..sizes.train + sizes.val + sizes.test {
        let scene = generate_scene(cfg, derive_seed(data_seed, &scene_id(i)), &scene_id(i))?;
        match split_of(i, sizes).expect("index within total") {
            Split::Train => ds.train.push(scene.image),
            Split::Val => ds.val.push(scene.image),
            Split::Test => ds.test.push(scene.image),
        }
    }
    Ok(ds)
}

/// Pair each image with its target density at the network output resolution.
pub fn with_targets(
    images: &[DotAnnotatedImage],
    kernel: &KernelConfig,
    factor: usize,
) -> Result<Vec<(DotAnnotatedImage, DensityMap)>> {
    images
        .iter()
        .map(|img| Ok((img.clone(), target_density(img, kernel, factor)?)))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub n: usize,
    pub mae: f64,
    pub rmse: f64,
    /// `(coverage level, observed fraction)`.
    pub coverage_at: Vec<(f64, f64)>,
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "metric,value\nN,{}\nMAE,{}\nRMSE,{}\n",
            self.n, self.mae, self.rmse
        );
        for (level, frac) in &self.coverage_at {
            let _ = writeln!(out, "coverage_at_{level:.2},{frac}");
        }
        out
    }
}

pub fn metrics(pred_counts: &[f64], gt_counts: &[f64]) -> Result<MetricsReport> {
    if pred_counts.len() != gt_counts.len() {
        return Err(invalid(format!(
            "{} predictions for {} ground truths",
            pred_counts.len(),
            gt_counts.len()
        )));
    }
    if pred_counts.is_empty() {
        return Err(invalid("metrics: no predictions"));
    }
    let n = pred_counts.len() as f64;
    let (abs, sq) = pred_counts
        .iter()
        .zip(gt_counts)
        .fold((0.0, 0.0), |(a, s), (p, g)| {
            (a + (p - g).abs(), s + (p - g).powi(2))
        });
    Ok(MetricsReport {
        n: pred_counts.len(),
        mae: abs / n,
        rmse: (sq / n).sqrt(),
        coverage_at: Vec::new(),
    })
}

/// Fraction of ground truths with `lo <= C <= hi`.
pub fn coverage(intervals: &[(f64, f64)], gt_counts: &[f64]) -> Result<f64> {
    if intervals.len() != gt_counts.len() {
        return Err(invalid(format!(
            "{} intervals for {} ground truths",
            intervals.len(),
            gt_counts.len()
        )));
    }
    if intervals.is_empty() {
        return Err(invalid("coverage: no intervals"));
    }
    let inside = intervals
        .iter()
        .zip(gt_counts)
        .filter(|((lo, hi), c)| lo <= c && *c <= hi)
        .count();
    Ok(inside as f64 / intervals.len() as f64)
}

pub fn summarize_all(
    params: &DubNetParams,
    images: &[DotAnnotatedImage],
) -> Result<Vec<PredictiveSummary>> {
    images
        .iter()
        .map(|img| decompose(params, &img.to_tensor()))
        .collect()
}

/// Residual records for recalibration from summaries and their images.
pub fn residual_records(
    summaries: &[PredictiveSummary],
    images: &[DotAnnotatedImage],
) -> Vec<ResidualRecord> {
    summaries
        .iter()
        .zip(images)
        .map(|(s, img)| ResidualRecord::new(img.count() as f64, s.count_mean, s.count_std))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub seed: u64,
    pub variant: Variant,
    pub mae: f64,
    pub rmse: f64,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("seed,variant,mae,rmse\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.seed, r.variant, r.mae, r.rmse);
    }
    out
}

/// Shared inputs of a desk-scale experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    pub arch: ArchConfig,
    pub scene: SceneConfig,
    pub kernel: KernelConfig,
    pub sizes: SplitSizes,
    pub train: TrainConfig,
}

impl Experiment {
    fn prepare(&self, seed: u64) -> Result<(Dataset, Vec<(DotAnnotatedImage, DensityMap)>)> {
        self.scene.check_divisible(self.arch.downsample_factor())?;
        let ds = generate_dataset(&self.scene, &self.sizes, seed)?;
        let train_set = with_targets(&ds.train, &self.kernel, self.arch.downsample_factor())?;
        Ok((ds, train_set))
    }

    /// Train and test every variant on the dataset generated from `seed`.
    pub fn ablation_seed(&self, seed: u64) -> Result<Vec<AblationRow>> {
        self.ablation_variants(seed, &Variant::ALL)
    }

    pub fn ablation_variants(&self, seed: u64, variants: &[Variant]) -> Result<Vec<AblationRow>> {
        let (ds, train_set) = self.prepare(seed)?;
        let gt: Vec<f64> = ds.test.iter().map(|i| i.count() as f64).collect();
        let mut rows = Vec::with_capacity(variants.len());
        for &variant in variants {
            let cfg = TrainConfig {
                variant,
                seed,
                ..self.train.clone()
            };
            let (params, _) = train(&train_set, &self.arch, &cfg)?;
            let pred: Vec<f64> = summarize_all(&params, &ds.test)?
                .iter()
                .map(|s| s.count_mean)
                .collect();
            let m = metrics(&pred, &gt)?;
            log::info!("seed {seed} {variant}: MAE {:.3} RMSE {:.3}", m.mae, m.rmse);
            rows.push(AblationRow {
                seed,
                variant,
                mae: m.mae,
                rmse: m.rmse,
            });
        }
        Ok(rows)
    }

    /// Train, recalibrate on the validation split and measure coverage of
    /// `p`-level intervals on the test split.
    pub fn calibration_run(&self, seed: u64, p: f64) -> Result<CalibrationOutcome> {
        let (ds, train_set) = self.prepare(seed)?;
        let cfg = TrainConfig {
            seed,
            ..self.train.clone()
        };
        let (params, _) = train(&train_set, &self.arch, &cfg)?;
        let val = summarize_all(&params, &ds.val)?;
        let recal = recalibrate(&residual_records(&val, &ds.val))?;
        let test = summarize_all(&params, &ds.test)?;
        let gt: Vec<f64> = ds.test.iter().map(|i| i.count() as f64).collect();
        let pred: Vec<f64> = test.iter().map(|s| s.count_mean).collect();
        let calibrated = test
            .iter()
            .map(|s| count_interval(s, Some(&recal), p))
            .collect::<Result<Vec<_>>>()?;
        let raw = test
            .iter()
            .map(|s| count_interval(s, None, p))
            .collect::<Result<Vec<_>>>()?;
        let mut report = metrics(&pred, &gt)?;
        report.coverage_at.push((p, coverage(&calibrated, &gt)?));
        Ok(CalibrationOutcome {
            report,
            uncalibrated_coverage: coverage(&raw, &gt)?,
            recal,
            params,
        })
    }
}

pub fn ablation_run(exp: &Experiment, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(invalid("ablation needs at least one seed"));
    }
    let mut rows = Vec::new();
    for &s in seeds {
        rows.extend(exp.ablation_seed(s)?);
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationOutcome {
    pub report: MetricsReport,
    pub uncalibrated_coverage: f64,
    pub recal: RecalibrationMap,
    pub params: DubNetParams,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::render_density;

    #[test]
    fn scenes_are_reproducible() {
        let cfg = SceneConfig::noisy();
        assert_eq!(
            generate_scene(&cfg, 11, "a").unwrap(),
            generate_scene(&cfg, 11, "a").unwrap()
        );
        assert_ne!(
            generate_scene(&cfg, 11, "a").unwrap(),
            generate_scene(&cfg, 12, "a").unwrap()
        );
    }

    #[test]
    fn counts_stay_in_range() {
        let cfg = SceneConfig {
            count_range: (3, 9),
            ..Default::default()
        };
        for s in 0..50 {
            let n = generate_scene(&cfg, s, "x").unwrap().image.count();
            assert!((3..=9).contains(&n));
        }
    }

    #[test]
    fn infeasible_range_rejected() {
        let cfg = SceneConfig {
            height: 8,
            width: 8,
            count_range: (10, 100),
            ..Default::default()
        };
        assert!(generate_scene(&cfg, 0, "x").is_err());
        let cfg = SceneConfig {
            count_range: (10, 5),
            ..Default::default()
        };
        assert!(generate_scene(&cfg, 0, "x").is_err());
    }

    #[test]
    fn glare_raises_local_variance() {
        let cfg = SceneConfig {
            glare_probability: 1.0,
            ..Default::default()
        };
        let (mut inside, mut outside) = (0.0, 0.0);
        for s in 0..100 {
            let scene = generate_scene(&cfg, s, "g").unwrap();
            let g = scene.glare.expect("glare forced on");
            let w = scene.image.width;
            let (mut a, mut b) = (Vec::new(), Vec::new());
            for (i, &v) in scene.image.pixels.iter().enumerate() {
                let (r, c) = (i / w, i % w);
                let hit = r >= g.row && r < g.row + g.height && c >= g.col && c < g.col + g.width;
                if hit {
                    a.push(v)
                } else {
                    b.push(v)
                }
            }
            inside += variance(&a);
            outside += variance(&b);
        }
        assert!(inside > outside, "inside {inside} outside {outside}");
    }

    fn variance(v: &[f64]) -> f64 {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
    }

    #[test]
    fn rendered_truth_integrates_to_count() {
        let cfg = SceneConfig::default();
        for s in 0..20 {
            let img = generate_scene(&cfg, s, "d").unwrap().image;
            let m = render_density(img.height, img.width, &img.points, &KernelConfig::default())
                .unwrap();
            assert!((m.total() - img.count() as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn splits_are_disjoint() {
        let sizes = SplitSizes {
            train: 3,
            val: 2,
            test: 4,
        };
        let ds = generate_dataset(&SceneConfig::default(), &sizes, 1).unwrap();
        assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (3, 2, 4));
        let mut ids: Vec<&str> = [&ds.train, &ds.val, &ds.test]
            .iter()
            .flat_map(|s| s.iter().map(|i| i.id.as_str()))
            .collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 9);
        assert_eq!(split_of(9, &sizes), None);
    }

    #[test]
    fn metric_examples() {
        let m = metrics(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!((m.mae, m.rmse), (0.0, 0.0));
        let m = metrics(&[1.0, -1.0], &[0.0, 0.0]).unwrap();
        assert_eq!((m.mae, m.rmse), (1.0, 1.0));
        let m = metrics(&[0.0, 2.0], &[0.0, 0.0]).unwrap();
        assert_eq!(m.mae, 1.0);
        assert!((m.rmse - std::f64::consts::SQRT_2).abs() < 1e-12);
        assert!(metrics(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn coverage_examples() {
        let gt = [1.0, 5.0];
        assert_eq!(coverage(&[(0.0, 2.0), (4.0, 6.0)], &gt).unwrap(), 1.0);
        assert_eq!(coverage(&[(0.0, 2.0), (6.0, 7.0)], &gt).unwrap(), 0.5);
        assert_eq!(coverage(&[(1.0, 1.0), (5.0, 5.0)], &gt).unwrap(), 1.0);
        assert!(coverage(&[(0.0, 1.0)], &gt).is_err());
    }
}
