#![allow(dead_code)]

use dubcount::density::Point;
use dubcount::dubnet::{ArchConfig, DubNetParams};
use dubcount::tensor::{Graph, Tensor, Var};
use dubcount::trainer::{heteroscedastic_on, homoscedastic_on, mse_on};
use dubcount::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Values in `[lo, hi]` kept at least `gap` away from `kink`.
pub fn away_from(
    rng: &mut impl Rng,
    shape: &[usize],
    lo: f64,
    hi: f64,
    kink: f64,
    gap: f64,
) -> Tensor {
    let mut t = random_tensor(rng, shape, lo, hi);
    for v in t.data_mut() {
        if (*v - kink).abs() < gap {
            *v = kink + gap.copysign(*v - kink);
        }
    }
    t
}

pub fn random_points(rng: &mut impl Rng, n: usize, h: usize, w: usize) -> Vec<Point> {
    (0..n)
        .map(|_| {
            Point::new(
                rng.random_range(0.0..h as f64),
                rng.random_range(0.0..w as f64),
            )
        })
        .collect()
}

type Builder = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// A scalar function of several tensors, checked against central differences.
pub struct GradCase {
    pub name: String,
    pub inputs: Vec<Tensor>,
    pub build: Builder,
}

/// Contract a non-scalar output with fixed weights so every element matters.
fn project(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

fn elementwise(
    name: &str,
    input: Tensor,
    weights: Tensor,
    f: fn(&mut Graph, Var) -> Result<Var>,
) -> GradCase {
    GradCase {
        name: name.into(),
        inputs: vec![input],
        build: Box::new(move |g, v| {
            let y = f(g, v[0])?;
            project(g, y, &weights)
        }),
    }
}

fn eval(case: &GradCase, inputs: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let loss = (case.build)(&mut g, &vars).unwrap();
    g.value(loss).item().unwrap()
}

/// Largest relative error `|a - n| / max(|a|, |n|)` (vector norms) over the
/// case's inputs.
pub fn check_case(case: &GradCase) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = (case.build)(&mut g, &vars).unwrap();
    let grads = g.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads
            .get(v)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; case.inputs[i].len()]);
        let mut numeric = vec![0.0; analytic.len()];
        let mut probe = case.inputs.clone();
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(case, &probe);
            probe[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(case, &probe);
            probe[i].data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Every tape operator and all three losses on random shapes drawn from `seed`.
pub fn grad_cases(seed: u64) -> Vec<GradCase> {
    let mut r = rng(seed);
    let c_in = r.random_range(1..=3);
    let c_out = r.random_range(1..=3);
    let h = 2 * r.random_range(2..=4);
    let w = 2 * r.random_range(2..=4);
    let k = [1, 3, 5][r.random_range(0..3)];
    let dilation = r.random_range(1..=3);
    let x_shape = [c_in, h, w];

    let mut cases = Vec::new();
    let x = random_tensor(&mut r, &x_shape, -1.0, 1.0);
    let kernel = random_tensor(&mut r, &[c_out, c_in, k, k], -1.0, 1.0);
    let wout = random_tensor(&mut r, &[c_out, h, w], -1.0, 1.0);
    cases.push(GradCase {
        name: format!("conv2d k={k} d={dilation} {c_in}->{c_out} {h}x{w}"),
        inputs: vec![x.clone(), kernel],
        build: Box::new(move |g, v| {
            let y = g.conv2d(v[0], v[1], dilation)?;
            project(g, y, &wout)
        }),
    });

    let bias = random_tensor(&mut r, &[c_in], -1.0, 1.0);
    let wx = random_tensor(&mut r, &x_shape, -1.0, 1.0);
    let wx2 = wx.clone();
    cases.push(GradCase {
        name: "bias_add".into(),
        inputs: vec![x.clone(), bias],
        build: Box::new(move |g, v| {
            let y = g.bias_add(v[0], v[1])?;
            project(g, y, &wx2)
        }),
    });

    let wpool = random_tensor(&mut r, &[c_in, h / 2, w / 2], -1.0, 1.0);
    cases.push(elementwise("maxpool2", x.clone(), wpool, |g, v| {
        g.maxpool2(v)
    }));
    let kinked = away_from(&mut r, &x_shape, -1.0, 1.0, 0.0, 1e-3);
    cases.push(elementwise(
        "relu",
        kinked,
        wx.clone(),
        |g, v| Ok(g.relu(v)),
    ));
    cases.push(elementwise(
        "softplus",
        random_tensor(&mut r, &x_shape, -4.0, 4.0),
        wx.clone(),
        |g, v| Ok(g.softplus(v)),
    ));
    cases.push(elementwise(
        "exp",
        random_tensor(&mut r, &x_shape, -2.0, 2.0),
        wx.clone(),
        |g, v| Ok(g.exp(v)),
    ));
    cases.push(elementwise(
        "log",
        random_tensor(&mut r, &x_shape, 0.3, 3.0),
        wx.clone(),
        |g, v| g.log(v),
    ));
    let mut clamped = away_from(&mut r, &x_shape, -2.0, 2.0, 1.0, 1e-3);
    for v in clamped.data_mut() {
        if (*v + 1.0).abs() < 1e-3 {
            *v = -1.0 - 1e-3;
        }
    }
    cases.push(elementwise("clamp", clamped, wx.clone(), |g, v| {
        Ok(g.clamp(v, -1.0, 1.0))
    }));
    cases.push(elementwise("scale", x.clone(), wx.clone(), |g, v| {
        Ok(g.scale(v, -2.5))
    }));
    cases.push(elementwise("offset", x.clone(), wx.clone(), |g, v| {
        Ok(g.offset(v, 0.75))
    }));
    cases.push(elementwise(
        "sum",
        x.clone(),
        Tensor::scalar(1.3),
        |g, v| Ok(g.sum(v)),
    ));
    cases.push(elementwise(
        "mean",
        x.clone(),
        Tensor::scalar(-0.7),
        |g, v| Ok(g.mean(v)),
    ));

    let y = random_tensor(&mut r, &x_shape, -1.0, 1.0);
    for (name, op) in [
        ("add", Graph::add as fn(&mut Graph, Var, Var) -> Result<Var>),
        ("sub", Graph::sub),
        ("mul", Graph::mul),
    ] {
        let wb = wx.clone();
        cases.push(GradCase {
            name: name.into(),
            inputs: vec![x.clone(), y.clone()],
            build: Box::new(move |g, v| {
                let z = op(g, v[0], v[1])?;
                project(g, z, &wb)
            }),
        });
    }

    let d_shape = [1, h, w];
    let density = random_tensor(&mut r, &d_shape, 0.0, 2.0);
    let logvar = random_tensor(&mut r, &d_shape, -2.0, 2.0);
    let target = random_tensor(&mut r, &d_shape, 0.0, 2.0);
    let t1 = target.clone();
    cases.push(GradCase {
        name: "heteroscedastic loss".into(),
        inputs: vec![density.clone(), logvar],
        build: Box::new(move |g, v| {
            let t = g.constant(t1.clone());
            heteroscedastic_on(g, v[0], v[1], t)
        }),
    });
    let sigma2 = r.random_range(0.2..3.0);
    let t2 = target.clone();
    cases.push(GradCase {
        name: format!("homoscedastic loss sigma2={sigma2:.3}"),
        inputs: vec![density.clone()],
        build: Box::new(move |g, v| {
            let t = g.constant(t2.clone());
            homoscedastic_on(g, v[0], t, sigma2)
        }),
    });
    let t3 = target;
    cases.push(GradCase {
        name: "mse loss".into(),
        inputs: vec![density],
        build: Box::new(move |g, v| {
            let t = g.constant(t3.clone());
            mse_on(g, v[0], t)
        }),
    });
    cases.push(network_case(&mut r, seed));
    cases
}

/// Whole network with the heteroscedastic loss: trunk, one density head and
/// the clamped log-variance head.
fn network_case(r: &mut ChaCha8Rng, seed: u64) -> GradCase {
    let arch = ArchConfig {
        front_channels: vec![2],
        back_channels: vec![2],
        dilation: 2,
        heads: 2,
        init_std: 0.5,
    };
    let params = DubNetParams::init(&arch, seed).unwrap();
    let image = random_tensor(r, &[1, 8, 8], 0.0, 1.0);
    let target = random_tensor(r, &[1, 4, 4], 0.0, 0.5);
    let inputs: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
    let n_trunk = params.trunk.len();
    let n_heads = params.heads.len();
    GradCase {
        name: "network heteroscedastic".into(),
        inputs,
        build: Box::new(move |g, v| {
            let idx = 2 * (n_trunk + n_heads + 1);
            let bound = dubcount::dubnet::BoundParams {
                trunk: (0..n_trunk).map(|i| (v[2 * i], v[2 * i + 1])).collect(),
                heads: (0..n_heads)
                    .map(|k| Some((v[2 * (n_trunk + k)], v[2 * (n_trunk + k) + 1])))
                    .collect(),
                logvar_head: (v[idx - 2], v[idx - 1]),
            };
            let x = g.constant(image.clone());
            let t = g.constant(target.clone());
            let feats = params.trunk_on(g, &bound, x)?;
            let y = params.head_on(g, &bound, feats, 1)?;
            let s = params.logvar_on(g, &bound, feats)?;
            heteroscedastic_on(g, y, s, t)
        }),
    }
}

/// Exact isotonic regression by enumerating every split of `values` into
/// consecutive blocks and keeping the best non-decreasing block-mean fit.
pub fn isotonic_exhaustive(values: &[f64], weights: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 0u32..(1 << (n - 1)) {
        let mut fit = Vec::with_capacity(n);
        let mut start = 0;
        for end in 1..=n {
            if end == n || mask & (1 << (end - 1)) != 0 {
                let ws: f64 = weights[start..end].iter().sum();
                let m = values[start..end]
                    .iter()
                    .zip(&weights[start..end])
                    .map(|(v, w)| v * w)
                    .sum::<f64>()
                    / ws;
                fit.extend(std::iter::repeat_n(m, end - start));
                start = end;
            }
        }
        if fit.windows(2).any(|p| p[1] < p[0]) {
            continue;
        }
        let sse = weighted_sse(values, weights, &fit);
        if best.as_ref().is_none_or(|(b, _)| sse < *b) {
            best = Some((sse, fit));
        }
    }
    best.expect("a single block is always monotone").1
}

/// Smallest squared error over all non-decreasing sequences on `grid`.
pub fn best_grid_sequence_sse(values: &[f64], weights: &[f64], grid: &[f64]) -> f64 {
    fn walk(values: &[f64], weights: &[f64], grid: &[f64], from: usize, acc: f64, best: &mut f64) {
        if acc >= *best {
            return;
        }
        let Some((&v, rest)) = values.split_first() else {
            *best = acc;
            return;
        };
        for (j, &gv) in grid.iter().enumerate().skip(from) {
            walk(
                rest,
                &weights[1..],
                grid,
                j,
                acc + weights[0] * (v - gv).powi(2),
                best,
            );
        }
    }
    let mut best = f64::INFINITY;
    walk(values, weights, grid, 0, 0.0, &mut best);
    best
}

pub fn weighted_sse(values: &[f64], weights: &[f64], fit: &[f64]) -> f64 {
    values
        .iter()
        .zip(weights)
        .zip(fit)
        .map(|((v, w), f)| w * (v - f).powi(2))
        .sum()
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub const SMALL_CONFIG: &str = "seed = 11
[train]
epochs = 2
[split]
train = 12
val = 8
test = 6
[scene]
height = 32
width = 32
count_range = [3, 20]
";

pub fn dubcount(args: &[&str], cwd: &std::path::Path) -> std::process::Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_dubcount"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

/// `synth -> train -> calibrate -> predict -> eval` in `dir`; returns every
/// produced file keyed by relative path.
pub fn run_pipeline(dir: &std::path::Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    std::fs::write(dir.join("config.toml"), SMALL_CONFIG).unwrap();
    let steps: [&[&str]; 5] = [
        &["--config", "config.toml", "synth", "--out", "data"],
        &[
            "--config",
            "config.toml",
            "train",
            "--data",
            "data",
            "--out",
            "model",
        ],
        &[
            "calibrate",
            "--checkpoint",
            "model/checkpoint.dubn",
            "--data",
            "data",
            "--out",
            "model",
        ],
        &[
            "predict",
            "--checkpoint",
            "model/checkpoint.dubn",
            "--data",
            "data",
            "--recal",
            "model/recal.csv",
            "--heatmaps",
            "--out",
            "pred",
        ],
        &[
            "eval",
            "--predictions",
            "pred/predictions.csv",
            "--data",
            "data",
            "--out",
            "pred",
        ],
    ];
    for args in steps {
        let out = dubcount(args, dir);
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let mut files = std::collections::BTreeMap::new();
    collect(dir, dir, &mut files);
    files
}

fn collect(
    root: &std::path::Path,
    dir: &std::path::Path,
    out: &mut std::collections::BTreeMap<String, Vec<u8>>,
) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            collect(root, &path, out);
        } else {
            let rel = path
                .strip_prefix(root)
                .unwrap()
                .to_string_lossy()
                .into_owned();
            out.insert(rel, std::fs::read(&path).unwrap());
        }
    }
}
