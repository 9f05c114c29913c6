//! Losses and the single-image bootstrap-head training loop.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::density::{DensityMap, DotAnnotatedImage};
use crate::dubnet::{ArchConfig, DubNetParams, HeadOutput};
use crate::error::{invalid, Result};
use crate::seed::rng_for;
use crate::tensor::{adam_step, AdamConfig, AdamState, Graph, Tensor, Var};

/// Which uncertainty components a training run models.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Plain MSE, one head.
    Base,
    /// Heteroscedastic loss, one head.
    #[serde(alias = "aleatoric")]
    AleatoricOnly,
    /// Fixed-variance Gaussian NLL with `K` bootstrap heads.
    #[serde(alias = "epistemic")]
    EpistemicOnly,
    /// Heteroscedastic loss with `K` bootstrap heads.
    Combined,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Base,
        Variant::AleatoricOnly,
        Variant::EpistemicOnly,
        Variant::Combined,
    ];

    pub fn uses_heads(self) -> bool {
        matches!(self, Variant::EpistemicOnly | Variant::Combined)
    }

    pub fn learns_variance(self) -> bool {
        matches!(self, Variant::AleatoricOnly | Variant::Combined)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::AleatoricOnly => "aleatoric_only",
            Variant::EpistemicOnly => "epistemic_only",
            Variant::Combined => "combined",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Variant::Base),
            "aleatoric" | "aleatoric_only" => Ok(Variant::AleatoricOnly),
            "epistemic" | "epistemic_only" => Ok(Variant::EpistemicOnly),
            "combined" => Ok(Variant::Combined),
            other => Err(invalid(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub variant: Variant,
    /// Observation variance for variants that do not learn it.
    pub fixed_sigma2: f64,
    /// Give each head its own with-replacement resample of the training set
    /// instead of drawing heads over the shared image stream.
    pub resample: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 1e-3,
            seed: 0,
            variant: Variant::Combined,
            fixed_sigma2: 1.0,
            resample: false,
        }
    }
}

/// Learning rate used in the original large-scale setting.
pub const REFERENCE_LEARNING_RATE: f64 = 1e-5;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(invalid("train: epochs must be >= 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(invalid("train: learning rate must be positive"));
        }
        if !(self.fixed_sigma2 > 0.0) {
            return Err(invalid("train: fixed_sigma2 must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub head_histogram: Vec<usize>,
}

fn squared_residual(g: &mut Graph, density: Var, target: Var) -> Result<Var> {
    let r = g.sub(target, density)?;
    g.mul(r, r)
}

/// `(1/D) sum_i [ exp(-s_i) (y_i - yhat_i)^2 / 2 + s_i / 2 ]`
pub fn heteroscedastic_on(g: &mut Graph, density: Var, logvar: Var, target: Var) -> Result<Var> {
    let r2 = squared_residual(g, density, target)?;
    let neg = g.scale(logvar, -1.0);
    let precision = g.exp(neg);
    let weighted = g.mul(precision, r2)?;
    let a = g.scale(weighted, 0.5);
    let b = g.scale(logvar, 0.5);
    let per_pixel = g.add(a, b)?;
    Ok(g.mean(per_pixel))
}

/// `(1/D) sum_i (y_i - yhat_i)^2 / (2 sigma2) + log(sigma2) / 2`
pub fn homoscedastic_on(g: &mut Graph, density: Var, target: Var, sigma2: f64) -> Result<Var> {
    if !(sigma2 > 0.0) {
        return Err(invalid(format!("sigma2 must be positive, got {sigma2}")));
    }
    let r2 = squared_residual(g, density, target)?;
    let m = g.mean(r2);
    let scaled = g.scale(m, 0.5 / sigma2);
    Ok(g.offset(scaled, 0.5 * sigma2.ln()))
}

/// `(1/D) sum_i (y_i - yhat_i)^2`
pub fn mse_on(g: &mut Graph, density: Var, target: Var) -> Result<Var> {
    let r2 = squared_residual(g, density, target)?;
    Ok(g.mean(r2))
}

fn target_tensor(target: &DensityMap, like: &Tensor) -> Result<Tensor> {
    let t = target.to_tensor();
    t.same_shape(like, "loss target")?;
    Ok(t)
}

pub fn loss_heteroscedastic(pred: &HeadOutput, target: &DensityMap) -> Result<f64> {
    let mut g = Graph::new();
    let t = g.constant(target_tensor(target, &pred.density)?);
    let y = g.constant(pred.density.clone());
    let s = g.constant(pred.logvar.clone());
    let l = heteroscedastic_on(&mut g, y, s, t)?;
    g.value(l).item()
}

pub fn loss_homoscedastic(pred_density: &Tensor, target: &DensityMap, sigma2: f64) -> Result<f64> {
    let mut g = Graph::new();
    let t = g.constant(target_tensor(target, pred_density)?);
    let y = g.constant(pred_density.clone());
    let l = homoscedastic_on(&mut g, y, t, sigma2)?;
    g.value(l).item()
}

pub fn loss_mse(pred_density: &Tensor, target: &DensityMap) -> Result<f64> {
    let mut g = Graph::new();
    let t = g.constant(target_tensor(target, pred_density)?);
    let y = g.constant(pred_density.clone());
    let l = mse_on(&mut g, y, t)?;
    g.value(l).item()
}

/// Architecture actually trained for a variant: single-head variants use K = 1.
pub fn effective_arch(arch: &ArchConfig, variant: Variant) -> ArchConfig {
    if variant.uses_heads() {
        arch.clone()
    } else {
        arch.with_heads(1)
    }
}

/// Build the variant's loss for one image through head `k`.
fn step_loss(
    params: &DubNetParams,
    g: &mut Graph,
    image: &Tensor,
    target: &Tensor,
    k: usize,
    cfg: &TrainConfig,
) -> Result<(Var, crate::dubnet::BoundParams)> {
    let bound = params.bind(g, &[k], true)?;
    let x = g.constant(image.clone());
    let t = g.constant(target.clone());
    let feats = params.trunk_on(g, &bound, x)?;
    let y = params.head_on(g, &bound, feats, k)?;
    let loss = match cfg.variant {
        Variant::Base => mse_on(g, y, t)?,
        Variant::EpistemicOnly => homoscedastic_on(g, y, t, cfg.fixed_sigma2)?,
        Variant::AleatoricOnly | Variant::Combined => {
            let s = params.logvar_on(g, &bound, feats)?;
            heteroscedastic_on(g, y, s, t)?
        }
    };
    Ok((loss, bound))
}

/// One Adam update of head `k`, the trunk and (if used) the log-variance head.
/// Returns the loss before the update.
pub fn train_step(
    params: &mut DubNetParams,
    state: &mut AdamState,
    image: &Tensor,
    target: &Tensor,
    k: usize,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut g = Graph::new();
    let (loss, bound) = step_loss(params, &mut g, image, target, k, cfg)?;
    let loss_value = g.value(loss).item()?;
    let mut grads = g.backward(loss)?;

    let mut per_tensor: Vec<Option<Tensor>> = vec![None; params.tensors().len()];
    for (i, &(w, b)) in bound.trunk.iter().enumerate() {
        per_tensor[2 * i] = grads.take(w);
        per_tensor[2 * i + 1] = grads.take(b);
    }
    if let Some((w, b)) = bound.heads[k] {
        let hi = params.head_tensor_index(k);
        per_tensor[hi] = grads.take(w);
        per_tensor[hi + 1] = grads.take(b);
    }
    if cfg.variant.learns_variance() {
        let li = params.logvar_tensor_index();
        per_tensor[li] = grads.take(bound.logvar_head.0);
        per_tensor[li + 1] = grads.take(bound.logvar_head.1);
    }
    let grad_refs: Vec<Option<&Tensor>> = per_tensor.iter().map(Option::as_ref).collect();
    let mut tensors = params.tensors_mut();
    adam_step(&mut tensors, &grad_refs, state)?;
    Ok(loss_value)
}

/// Train from scratch. `dataset` pairs each image with its target density at
/// the network output resolution.
pub fn train(
    dataset: &[(DotAnnotatedImage, DensityMap)],
    arch: &ArchConfig,
    cfg: &TrainConfig,
) -> Result<(DubNetParams, Vec<LossRecord>)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(invalid("train: empty dataset"));
    }
    let arch = effective_arch(arch, cfg.variant);
    let mut params = DubNetParams::init(&arch, cfg.seed)?;
    let factor = arch.downsample_factor();

    let mut samples = Vec::with_capacity(dataset.len());
    for (img, target) in dataset {
        if img.height % factor != 0 || img.width % factor != 0 {
            return Err(invalid(format!(
                "image {} is {}x{}, not divisible by {factor}",
                img.id, img.height, img.width
            )));
        }
        if (target.height, target.width) != (img.height / factor, img.width / factor) {
            return Err(invalid(format!(
                "target for {} is {}x{}, expected {}x{}",
                img.id,
                target.height,
                target.width,
                img.height / factor,
                img.width / factor
            )));
        }
        samples.push((img.to_tensor(), target.to_tensor()));
    }

    let mut state = AdamState::new(params.tensors(), AdamConfig::with_lr(cfg.learning_rate))?;
    let k_heads = params.num_heads();
    let mut head_rng = rng_for(cfg.seed, "heads");
    let mut order_rng = rng_for(cfg.seed, "shuffle");
    let n = samples.len();
    let resampled: Option<Vec<Vec<usize>>> = cfg.resample.then(|| {
        let mut rng = rng_for(cfg.seed, "bootstrap");
        (0..k_heads)
            .map(|_| (0..n).map(|_| rng.random_range(0..n)).collect())
            .collect()
    });

    let mut records = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut hist = vec![0usize; k_heads];
        let mut total = 0.0;
        for &pos in &order {
            let k = head_rng.random_range(0..k_heads);
            let idx = resampled.as_ref().map_or(pos, |r| r[k][pos]);
            let (x, y) = &samples[idx];
            total += train_step(&mut params, &mut state, x, y, k, cfg)?;
            hist[k] += 1;
        }
        let mean_loss = total / n as f64;
        log::info!("{} epoch {epoch}: mean loss {mean_loss:.6}", cfg.variant);
        records.push(LossRecord {
            epoch,
            mean_loss,
            head_histogram: hist,
        });
    }

    if !cfg.variant.learns_variance() {
        params.freeze_logvar(cfg.fixed_sigma2)?;
    }
    Ok((params, records))
}

/// Training log as CSV: `epoch,mean_loss,head_0,...,head_{K-1}`.
pub fn loss_log_csv(records: &[LossRecord]) -> String {
    let k = records.first().map_or(0, |r| r.head_histogram.len());
    let mut out = String::from("epoch,mean_loss");
    for i in 0..k {
        out.push_str(&format!(",head_{i}"));
    }
    out.push('\n');
    for r in records {
        out.push_str(&format!("{},{}", r.epoch, r.mean_loss));
        for c in &r.head_histogram {
            out.push_str(&format!(",{c}"));
        }
        out.push('\n');
    }
    out
}
