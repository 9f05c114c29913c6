//! Command-line front end: dataset synthesis, training, recalibration,
//! prediction, evaluation, ablation and adaptive partitioning.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::density::{render_density, DotAnnotatedImage, KernelConfig, Point};
use crate::dubnet::{ArchConfig, DubNetParams};
use crate::error::{invalid, Error, Result};
use crate::io;
use crate::recalib::{recalibrate, RecalibrationMap};
use crate::seed::derive_seed;
use crate::synth::{
    ablation_csv, ablation_run, coverage, generate_dataset, generate_scene, metrics,
    residual_records, scene_id, split_of, summarize_all, with_targets, Experiment, SceneConfig,
    Split, SplitSizes,
};
use crate::tensor::Tensor;
use crate::trainer::{loss_log_csv, train, TrainConfig, Variant};
use crate::uncertainty::{
    adaptive_partition, count_interval, ModelPredictor, PartitionConfig, PredictiveSummary,
};

/// Settings for every command, loaded from a TOML file.
///
/// ```toml
/// seed = 0
/// [arch]      # front_channels, back_channels, dilation, heads, init_std
/// [train]     # epochs, learning_rate, variant, fixed_sigma2, resample
/// [scene]     # height, width, count_range, blob_sigma, ..., glare_probability
/// [kernel]    # beta, k, sigma_floor, sigma_default
/// [split]     # train, val, test
/// [partition] # threshold, levels, coverage
/// [ablation]  # seeds
/// [paths]     # data, checkpoint, recal, out
/// ```
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub seed: u64,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub scene: SceneConfig,
    pub kernel: KernelConfig,
    pub split: SplitSizes,
    pub partition: PartitionSection,
    pub ablation: AblationSection,
    pub paths: Paths,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSection {
    pub threshold: f64,
    pub levels: Vec<usize>,
    pub coverage: f64,
}

impl Default for PartitionSection {
    fn default() -> Self {
        let p = PartitionConfig::default();
        Self {
            threshold: p.threshold,
            levels: p.levels,
            coverage: p.coverage,
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub seeds: usize,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self { seeds: 5 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub recal: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.train.validate()?;
        self.scene.validate()?;
        self.scene.check_divisible(self.arch.downsample_factor())?;
        self.kernel.validate()?;
        if !(self.partition.coverage > 0.0 && self.partition.coverage < 1.0) {
            return Err(invalid("partition coverage must lie in (0, 1)"));
        }
        Ok(())
    }

    fn experiment(&self) -> Experiment {
        Experiment {
            arch: self.arch.clone(),
            scene: self.scene.clone(),
            kernel: self.kernel,
            sizes: self.split,
            train: TrainConfig {
                seed: self.seed,
                ..self.train.clone()
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "dubcount",
    version,
    about = "Object counting with decomposed uncertainty"
)]
struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Root seed; data, initialisation and head sampling derive from it.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct OutArg {
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset (images/, annotations.csv, split.csv).
    Synth {
        #[command(flatten)]
        out: OutArg,
        /// Also write a 4x4 mosaic of scenes for `partition`.
        #[arg(long)]
        mosaic: bool,
    },
    /// Train on the train split; writes checkpoint.dubn and train_log.csv.
    Train {
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[command(flatten)]
        out: OutArg,
        #[arg(long, value_parser = parse_variant)]
        variant: Option<Variant>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Fit the recalibration map on the validation split.
    Calibrate {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Per-image counts, spreads and intervals for a split.
    Predict {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        recal: Option<PathBuf>,
        #[arg(long, default_value_t = 0.90)]
        coverage: f64,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        /// Write mean/epistemic/aleatoric heatmaps.
        #[arg(long)]
        heatmaps: bool,
        #[command(flatten)]
        out: OutArg,
    },
    /// MAE, RMSE and interval coverage of a predictions file.
    Eval {
        #[arg(long, value_name = "PATH")]
        predictions: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Train and test all four variants for several seeds.
    Ablate {
        /// Number of consecutive seeds starting at --seed.
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Adaptive zoom-level partition of a large image.
    Partition {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        image: PathBuf,
        #[arg(long, value_name = "PATH")]
        recal: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        coverage: Option<f64>,
        /// Comma-separated zoom factors, e.g. 1,2,4.
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<usize>>,
        #[command(flatten)]
        out: OutArg,
    },
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    Split::parse(s).map_err(|e| e.to_string())
}

/// Run with `argv` (program name first). Returns the process exit code:
/// 0 success, 1 runtime error, 2 usage error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn require(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| fallback.clone()).ok_or_else(|| {
        invalid(format!(
            "--{name} is required (or set paths.{name} in the config)"
        ))
    })
}

fn out_dir(out: OutArg, cfg: &AppConfig) -> Result<PathBuf> {
    let dir = require(out.out, &cfg.paths.out, "out")?;
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => AppConfig::load(p)?,
        None => AppConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.train.seed = cfg.seed;

    match cli.command {
        Command::Synth { out, mosaic } => {
            cfg.validate()?;
            cmd_synth(&cfg, &out_dir(out, &cfg)?, mosaic)
        }
        Command::Train {
            data,
            out,
            variant,
            epochs,
        } => {
            if let Some(v) = variant {
                cfg.train.variant = v;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            cfg.validate()?;
            let data = require(data, &cfg.paths.data, "data")?;
            cmd_train(&cfg, &data, &out_dir(out, &cfg)?)
        }
        Command::Calibrate {
            checkpoint,
            data,
            out,
        } => {
            let checkpoint = require(checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
            let data = require(data, &cfg.paths.data, "data")?;
            cmd_calibrate(&checkpoint, &data, &out_dir(out, &cfg)?)
        }
        Command::Predict {
            checkpoint,
            data,
            recal,
            coverage,
            split,
            heatmaps,
            out,
        } => {
            let checkpoint = require(checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
            let data = require(data, &cfg.paths.data, "data")?;
            let recal = recal.or_else(|| cfg.paths.recal.clone());
            let opts = PredictOptions {
                coverage,
                split,
                heatmaps,
            };
            cmd_predict(
                &checkpoint,
                &data,
                recal.as_deref(),
                &opts,
                &out_dir(out, &cfg)?,
            )
        }
        Command::Eval {
            predictions,
            data,
            out,
        } => {
            let data = require(data, &cfg.paths.data, "data")?;
            cmd_eval(&predictions, &data, &out_dir(out, &cfg)?)
        }
        Command::Ablate { seeds, epochs, out } => {
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(n) = seeds {
                cfg.ablation.seeds = n;
            }
            cfg.validate()?;
            let dir = out_dir(out, &cfg)?;
            let seeds: Vec<u64> = (0..cfg.ablation.seeds as u64)
                .map(|i| cfg.seed + i)
                .collect();
            let rows = ablation_run(&cfg.experiment(), &seeds)?;
            fs::write(dir.join("ablation.csv"), ablation_csv(&rows))?;
            Ok(())
        }
        Command::Partition {
            checkpoint,
            image,
            recal,
            threshold,
            coverage,
            levels,
            out,
        } => {
            let checkpoint = require(checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
            let recal = recal.or_else(|| cfg.paths.recal.clone());
            let pc = PartitionConfig {
                threshold: threshold.unwrap_or(cfg.partition.threshold),
                levels: levels.unwrap_or_else(|| cfg.partition.levels.clone()),
                coverage: coverage.unwrap_or(cfg.partition.coverage),
            };
            let input = (cfg.scene.height, cfg.scene.width);
            cmd_partition(
                &checkpoint,
                &image,
                recal.as_deref(),
                &pc,
                input,
                &out_dir(out, &cfg)?,
            )
        }
    }
}

fn cmd_synth(cfg: &AppConfig, out: &Path, mosaic: bool) -> Result<()> {
    let ds = generate_dataset(&cfg.scene, &cfg.split, cfg.seed)?;
    let images_dir = out.join("images");
    let density_dir = out.join("densities");
    fs::create_dir_all(&images_dir)?;
    fs::create_dir_all(&density_dir)?;

    let all: Vec<&DotAnnotatedImage> = ds.train.iter().chain(&ds.val).chain(&ds.test).collect();
    let mut splits = Vec::with_capacity(all.len());
    for (i, img) in all.iter().enumerate() {
        io::write_pgm(
            &images_dir.join(format!("{}.pgm", img.id)),
            img.height,
            img.width,
            &img.pixels,
        )?;
        let density = render_density(img.height, img.width, &img.points, &cfg.kernel)?;
        io::save_density(&density_dir.join(format!("{}.dmap", img.id)), &density)?;
        splits.push((
            img.id.clone(),
            split_of(i, &cfg.split).expect("index within dataset"),
        ));
    }
    io::write_annotations(&out.join("annotations.csv"), &all)?;
    io::write_splits(&out.join("split.csv"), &splits)?;

    if mosaic {
        let m = build_mosaic(&cfg.scene, derive_seed(cfg.seed, "mosaic"), 4)?;
        io::write_pgm(&out.join("mosaic.pgm"), m.height, m.width, &m.pixels)?;
        io::write_annotations(&out.join("mosaic_annotations.csv"), &[&m])?;
    }
    Ok(())
}

/// `tiles x tiles` grid of independent scenes stitched into one image.
pub fn build_mosaic(scene: &SceneConfig, seed: u64, tiles: usize) -> Result<DotAnnotatedImage> {
    let (sh, sw) = (scene.height, scene.width);
    let (h, w) = (sh * tiles, sw * tiles);
    let mut pixels = vec![0.0; h * w];
    let mut points = Vec::new();
    for ti in 0..tiles {
        for tj in 0..tiles {
            let id = scene_id(ti * tiles + tj);
            let s = generate_scene(scene, derive_seed(seed, &id), &id)?.image;
            for r in 0..sh {
                let dst = (ti * sh + r) * w + tj * sw;
                pixels[dst..dst + sw].copy_from_slice(&s.pixels[r * sw..(r + 1) * sw]);
            }
            points.extend(
                s.points
                    .iter()
                    .map(|p| Point::new(p.row + (ti * sh) as f64, p.col + (tj * sw) as f64)),
            );
        }
    }
    DotAnnotatedImage::new("mosaic", h, w, pixels, points)
}

fn cmd_train(cfg: &AppConfig, data: &Path, out: &Path) -> Result<()> {
    let images = io::load_split(data, Split::Train)?;
    let factor = cfg.arch.downsample_factor();
    let train_set = with_targets(&images, &cfg.kernel, factor)?;
    let (params, records) = train(&train_set, &cfg.arch, &cfg.train)?;
    params.save(&out.join("checkpoint.dubn"))?;
    fs::write(out.join("train_log.csv"), loss_log_csv(&records))?;
    Ok(())
}

fn cmd_calibrate(checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    let params = DubNetParams::load(checkpoint)?;
    let val = io::load_split(data, Split::Val)?;
    if val.is_empty() {
        return Err(invalid("dataset has no validation images"));
    }
    let summaries = summarize_all(&params, &val)?;
    let records = residual_records(&summaries, &val);
    let recal = recalibrate(&records)?;
    recal.save(&out.join("recal.csv"))?;
    let z: Vec<f64> = records
        .iter()
        .map(|r| (r.gt_count - r.pred_count) / r.pred_std.max(1e-6))
        .collect();
    fs::write(out.join("calibration.svg"), calibration_svg(&z, &recal)?)?;
    Ok(())
}

/// Expected vs observed quantile curves before and after recalibration.
pub fn calibration_svg(z: &[f64], recal: &RecalibrationMap) -> Result<String> {
    use statrs::distribution::{ContinuousCDF, Normal};
    let normal = Normal::standard();
    let n = z.len() as f64;
    let levels: Vec<f64> = (1..20).map(|i| i as f64 * 0.05).collect();
    let observed = |threshold: f64| z.iter().filter(|&&v| v <= threshold).count() as f64 / n;
    let raw: Vec<(f64, f64)> = levels
        .iter()
        .map(|&p| (p, observed(normal.inverse_cdf(p))))
        .collect();
    let calibrated = levels
        .iter()
        .map(|&p| Ok((p, observed(recal.invert_quantile(p)?))))
        .collect::<Result<Vec<_>>>()?;

    const SIZE: f64 = 400.0;
    const PAD: f64 = 40.0;
    let px = |v: f64| PAD + v * (SIZE - 2.0 * PAD);
    let py = |v: f64| SIZE - PAD - v * (SIZE - 2.0 * PAD);
    let polyline = |pts: &[(f64, f64)], colour: &str| {
        let coords: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        format!(
            "<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"2\" points=\"{}\"/>\n",
            coords.join(" ")
        )
    };
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">"
    );
    let _ = writeln!(
        svg,
        "<rect x=\"{PAD}\" y=\"{PAD}\" width=\"{w}\" height=\"{w}\" fill=\"none\" stroke=\"black\"/>",
        w = SIZE - 2.0 * PAD
    );
    let _ = writeln!(
        svg,
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"gray\" stroke-dasharray=\"4\"/>",
        px(0.0),
        py(0.0),
        px(1.0),
        py(1.0)
    );
    svg.push_str(&polyline(&raw, "#d62728"));
    svg.push_str(&polyline(&calibrated, "#1f77b4"));
    let _ = writeln!(
        svg,
        "<text x=\"{:.0}\" y=\"{:.0}\" text-anchor=\"middle\" font-size=\"12\">expected quantile</text>",
        SIZE / 2.0,
        SIZE - 10.0
    );
    let _ = writeln!(
        svg,
        "<text x=\"12\" y=\"{:.0}\" font-size=\"12\" transform=\"rotate(-90 12 {:.0})\" text-anchor=\"middle\">observed fraction</text>",
        SIZE / 2.0,
        SIZE / 2.0
    );
    let _ = writeln!(
        svg,
        "<text x=\"{:.0}\" y=\"24\" font-size=\"12\" fill=\"#d62728\">uncalibrated</text>",
        PAD
    );
    let _ = writeln!(
        svg,
        "<text x=\"{:.0}\" y=\"24\" font-size=\"12\" fill=\"#1f77b4\">recalibrated</text>",
        PAD + 120.0
    );
    svg.push_str("</svg>\n");
    Ok(svg)
}

struct PredictOptions {
    coverage: f64,
    split: Split,
    heatmaps: bool,
}

fn cmd_predict(
    checkpoint: &Path,
    data: &Path,
    recal: Option<&Path>,
    opts: &PredictOptions,
    out: &Path,
) -> Result<()> {
    if !(opts.coverage > 0.0 && opts.coverage < 1.0) {
        return Err(invalid("--coverage must lie in (0, 1)"));
    }
    let params = DubNetParams::load(checkpoint)?;
    let recal = recal.map(RecalibrationMap::load).transpose()?;
    let images = io::load_split(data, opts.split)?;
    let summaries = summarize_all(&params, &images)?;

    let status = if recal.is_some() {
        "calibrated"
    } else {
        "uncalibrated"
    };
    let mut csv = format!(
        "# intervals={status} coverage={}\nid,count_mean,count_std,lo,hi\n",
        opts.coverage
    );
    for (img, s) in images.iter().zip(&summaries) {
        let (lo, hi) = count_interval(s, recal.as_ref(), opts.coverage)?;
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            img.id, s.count_mean, s.count_std, lo, hi
        );
    }
    fs::write(out.join("predictions.csv"), csv)?;

    if opts.heatmaps {
        let dir = out.join("heatmaps");
        fs::create_dir_all(&dir)?;
        for (img, s) in images.iter().zip(&summaries) {
            write_heatmaps(&dir, &img.id, s)?;
        }
    }
    Ok(())
}

fn write_heatmaps(dir: &Path, id: &str, s: &PredictiveSummary) -> Result<()> {
    let mut sidecar = String::from("map,min,max\n");
    for (name, values) in [
        ("mean", &s.mean_map),
        ("epistemic", &s.epistemic_map),
        ("aleatoric", &s.aleatoric_map),
    ] {
        let (lo, hi) = io::write_heatmap(
            &dir.join(format!("{id}_{name}.pgm")),
            s.height,
            s.width,
            values,
        )?;
        let _ = writeln!(sidecar, "{name},{lo},{hi}");
    }
    fs::write(dir.join(format!("{id}_scale.txt")), sidecar)?;
    Ok(())
}

#[derive(Debug, serde::Deserialize)]
struct PredictionRow {
    id: String,
    count_mean: f64,
    #[allow(dead_code)]
    count_std: f64,
    lo: f64,
    hi: f64,
}

fn cmd_eval(predictions: &Path, data: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(predictions)?;
    let coverage_level = text
        .lines()
        .next()
        .filter(|l| l.starts_with('#'))
        .and_then(|l| {
            l.split_whitespace()
                .find_map(|kv| kv.strip_prefix("coverage="))
        })
        .map(|v| {
            v.parse::<f64>()
                .map_err(|e| Error::Format(format!("coverage in header: {e}")))
        })
        .transpose()?
        .unwrap_or(0.90);

    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let rows = reader
        .deserialize::<PredictionRow>()
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if rows.is_empty() {
        return Err(invalid("predictions file has no rows"));
    }
    let truth = io::read_annotations(&data.join("annotations.csv"))?;
    let known: std::collections::BTreeSet<String> = io::read_splits(&data.join("split.csv"))?
        .into_iter()
        .map(|(id, _)| id)
        .collect();
    let mut gt = Vec::with_capacity(rows.len());
    for r in &rows {
        if !known.contains(&r.id) {
            return Err(invalid(format!("prediction for unknown image {}", r.id)));
        }
        gt.push(truth.get(&r.id).map_or(0, Vec::len) as f64);
    }
    let pred: Vec<f64> = rows.iter().map(|r| r.count_mean).collect();
    let intervals: Vec<(f64, f64)> = rows.iter().map(|r| (r.lo, r.hi)).collect();
    let mut report = metrics(&pred, &gt)?;
    report
        .coverage_at
        .push((coverage_level, coverage(&intervals, &gt)?));
    fs::write(out.join("metrics.csv"), report.to_csv())?;
    Ok(())
}

fn cmd_partition(
    checkpoint: &Path,
    image: &Path,
    recal: Option<&Path>,
    pc: &PartitionConfig,
    input_shape: (usize, usize),
    out: &Path,
) -> Result<()> {
    let params = DubNetParams::load(checkpoint)?;
    let recal = recal.map(RecalibrationMap::load).transpose()?;
    let (h, w, pixels) = io::read_pgm(image)?;
    let tensor = Tensor::new(vec![1, h, w], pixels)?;
    let predictor = ModelPredictor {
        params: &params,
        input_shape,
    };
    let report = adaptive_partition(&predictor, &tensor, pc, recal.as_ref())?;
    fs::write(out.join("partition.csv"), report.to_csv())?;
    Ok(())
}
