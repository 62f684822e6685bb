//! Shared oracles and suites for the integration tests and the acceptance target.
#![allow(dead_code)]

use cianet::data::{extract_targets, generate_sample, GeneratorConfig};
use cianet::image::{LabelMap, ProbMap};
use cianet::losses::{self, LevelTargets, LossConfig, NucleiLoss, PixelLoss};
use cianet::metrics::aji;
use cianet::model::LevelVars;
use cianet::post::{extract_instances, PostConfig};
use cianet::tensor::gradcheck::{check_gradients, Tolerance};
use cianet::tensor::{Mode, RunningStats, Shape, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    let data = (0..shape.numel()).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Values in ±[0.05, 2], never near the ReLU kink.
pub fn off_kink_tensor(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    let data = (0..shape.numel())
        .map(|_| {
            let m = rng.random_range(0.05..2.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Σ w·v with a fixed random weight map, so every output element matters.
pub fn project(tape: &mut Tape<f64>, v: Var, w: &Tensor<f64>) -> cianet::Result<Var> {
    let c = tape.constant(w.clone());
    let m = tape.mul(v, c)?;
    Ok(tape.sum(m))
}

/// One row of a gradient suite.
#[derive(Debug)]
pub struct SuiteRow {
    pub name: &'static str,
    pub cases: usize,
    pub failures: usize,
    pub max_rel_err: f64,
}

impl SuiteRow {
    fn new(name: &'static str) -> Self {
        SuiteRow {
            name,
            cases: 0,
            failures: 0,
            max_rel_err: 0.0,
        }
    }

    fn record(&mut self, ok: bool, rel: f64) {
        self.cases += 1;
        self.failures += usize::from(!ok);
        self.max_rel_err = self.max_rel_err.max(rel);
    }
}

type Case = (Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> cianet::Result<Var>>);

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn conv_case(rng: &mut ChaCha8Rng) -> Case {
    let (n, ci, co) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3));
    let k = if rng.random_bool(0.5) { 1 } else { 3 };
    let stride = dim(rng, 1, 2);
    let pad = if k == 3 { dim(rng, 0, 1) } else { 0 };
    let (h, w) = (dim(rng, k.max(2), 6), dim(rng, k.max(2), 6));
    let with_bias = rng.random_bool(0.7);
    let x = rand_tensor(rng, Shape::new(n, ci, h, w), -1.0, 1.0);
    let wt = rand_tensor(rng, Shape::new(co, ci, k, k), -1.0, 1.0);
    let b = rand_tensor(rng, Shape::new(1, co, 1, 1), -1.0, 1.0);
    let (oh, ow) = ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1);
    let proj = rand_tensor(rng, Shape::new(n, co, oh, ow), -1.0, 1.0);
    let mut inputs = vec![x, wt];
    if with_bias {
        inputs.push(b);
    }
    (
        inputs,
        Box::new(move |t, v| {
            let y = t.conv2d(v[0], v[1], v.get(2).copied(), stride, pad)?;
            project(t, y, &proj)
        }),
    )
}

fn pool_case(rng: &mut ChaCha8Rng) -> Case {
    let (n, c, h, w) = (dim(rng, 1, 2), dim(rng, 1, 3), 2 * dim(rng, 1, 3), 2 * dim(rng, 1, 3));
    let x = rand_tensor(rng, Shape::new(n, c, h, w), -1.0, 1.0);
    let proj = rand_tensor(rng, Shape::new(n, c, h / 2, w / 2), -1.0, 1.0);
    (
        vec![x],
        Box::new(move |t, v| {
            let y = t.avg_pool2d(v[0])?;
            project(t, y, &proj)
        }),
    )
}

fn upsample_case(rng: &mut ChaCha8Rng) -> Case {
    let (n, c, h, w) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4));
    let x = rand_tensor(rng, Shape::new(n, c, h, w), -1.0, 1.0);
    let proj = rand_tensor(rng, Shape::new(n, c, 2 * h, 2 * w), -1.0, 1.0);
    (
        vec![x],
        Box::new(move |t, v| {
            let y = t.upsample2x(v[0]);
            project(t, y, &proj)
        }),
    )
}

fn batch_norm_case(rng: &mut ChaCha8Rng, mode: Mode) -> Case {
    let (n, c, h, w) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 2, 4), dim(rng, 2, 4));
    let x = rand_tensor(rng, Shape::new(n, c, h, w), -2.0, 2.0);
    let scale = rand_tensor(rng, Shape::new(1, c, 1, 1), 0.5, 1.5);
    let shift = rand_tensor(rng, Shape::new(1, c, 1, 1), -0.5, 0.5);
    let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
    let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
    let proj = rand_tensor(rng, Shape::new(n, c, h, w), -1.0, 1.0);
    (
        vec![x, scale, shift],
        Box::new(move |t, v| {
            let mut stats = RunningStats::new(c);
            stats.mean = mean.clone();
            stats.var = var.clone();
            let y = t.batch_norm(v[0], v[1], v[2], &mut stats, mode, 1e-5)?;
            project(t, y, &proj)
        }),
    )
}

fn activation_case(rng: &mut ChaCha8Rng, relu: bool) -> Case {
    let shape = Shape::new(dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4));
    let x = if relu {
        off_kink_tensor(rng, shape)
    } else {
        rand_tensor(rng, shape, -4.0, 4.0)
    };
    let proj = rand_tensor(rng, shape, -1.0, 1.0);
    (
        vec![x],
        Box::new(move |t, v| {
            let y = if relu { t.relu(v[0]) } else { t.sigmoid(v[0]) };
            project(t, y, &proj)
        }),
    )
}

fn concat_case(rng: &mut ChaCha8Rng) -> Case {
    let (n, h, w) = (dim(rng, 1, 2), dim(rng, 1, 4), dim(rng, 1, 4));
    let parts = dim(rng, 2, 3);
    let chans: Vec<usize> = (0..parts).map(|_| dim(rng, 1, 3)).collect();
    let inputs: Vec<Tensor<f64>> = chans
        .iter()
        .map(|&c| rand_tensor(rng, Shape::new(n, c, h, w), -1.0, 1.0))
        .collect();
    let proj = rand_tensor(rng, Shape::new(n, chans.iter().sum(), h, w), -1.0, 1.0);
    (
        inputs,
        Box::new(move |t, v| {
            let y = t.concat(v)?;
            project(t, y, &proj)
        }),
    )
}

fn binary_case(rng: &mut ChaCha8Rng, which: usize) -> Case {
    let shape = Shape::new(dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4));
    let a = rand_tensor(rng, shape, -2.0, 2.0);
    let b = rand_tensor(rng, shape, -2.0, 2.0);
    let proj = rand_tensor(rng, shape, -1.0, 1.0);
    (
        vec![a, b],
        Box::new(move |t, v| {
            let y = match which {
                0 => t.add(v[0], v[1])?,
                1 => t.sub(v[0], v[1])?,
                _ => t.mul(v[0], v[1])?,
            };
            project(t, y, &proj)
        }),
    )
}

fn sum_case(rng: &mut ChaCha8Rng) -> Case {
    let shape = Shape::new(dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4));
    let x = rand_tensor(rng, shape, -2.0, 2.0);
    (
        vec![x],
        Box::new(|t, v| {
            let s = t.sum(v[0]);
            // Square so the gradient depends on the input.
            Ok(t.mul(s, s)?)
        }),
    )
}

fn weighted_sum_case(rng: &mut ChaCha8Rng) -> Case {
    let k = dim(rng, 1, 4);
    let inputs: Vec<Tensor<f64>> = (0..k).map(|_| rand_tensor(rng, Shape::scalar(), -2.0, 2.0)).collect();
    let weights: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
    (
        inputs,
        Box::new(move |t, v| {
            let sq: Vec<Var> = v.iter().map(|&x| t.mul(x, x)).collect::<cianet::Result<_>>()?;
            t.weighted_sum(&sq, &weights)
        }),
    )
}

/// Shared intermediate used twice, so backward must accumulate fan-out.
fn composite_case(rng: &mut ChaCha8Rng) -> Case {
    let (n, c, h, w) = (dim(rng, 1, 2), dim(rng, 1, 2), 2 * dim(rng, 1, 3), 2 * dim(rng, 1, 3));
    let x = rand_tensor(rng, Shape::new(n, c, h, w), -1.0, 1.0);
    let wt = rand_tensor(rng, Shape::new(2, c, 3, 3), -1.0, 1.0);
    let proj = rand_tensor(rng, Shape::new(n, 4, h, w), -1.0, 1.0);
    (
        vec![x, wt],
        Box::new(move |t, v| {
            let y = t.conv2d(v[0], v[1], None, 1, 1)?;
            let y = t.sigmoid(y);
            let down = t.avg_pool2d(y)?;
            let up = t.upsample2x(down);
            let prod = t.mul(y, up)?;
            let cat = t.concat(&[y, prod])?;
            project(t, cat, &proj)
        }),
    )
}

/// Finite-difference checks of every tape operation, `cases` random cases each.
pub fn tensor_gradient_suite(cases: usize, seed: u64) -> Vec<SuiteRow> {
    type Gen = fn(&mut ChaCha8Rng) -> Case;
    let ops: [(&'static str, Gen); 15] = [
        ("conv2d", conv_case),
        ("avg_pool2d", pool_case),
        ("upsample2x", upsample_case),
        ("batch_norm_train", |r| batch_norm_case(r, Mode::Train)),
        ("batch_norm_eval", |r| batch_norm_case(r, Mode::Eval)),
        ("relu", |r| activation_case(r, true)),
        ("sigmoid", |r| activation_case(r, false)),
        ("concat", concat_case),
        ("add", |r| binary_case(r, 0)),
        ("sub", |r| binary_case(r, 1)),
        ("mul", |r| binary_case(r, 2)),
        ("sum", sum_case),
        ("weighted_sum", weighted_sum_case),
        ("composite", composite_case),
        ("scalar_with_grad", nuclei_term_case_any),
    ];
    let tol = Tolerance::default();
    let mut rows = Vec::new();
    for (k, (name, gen)) in ops.iter().enumerate() {
        let mut rng = rng(seed ^ ((k as u64 + 1) << 32));
        let mut row = SuiteRow::new(name);
        for _ in 0..cases {
            let (inputs, f) = gen(&mut rng);
            let report = check_gradients(&inputs, |t, v| f(t, v), tol, None).unwrap();
            row.record(report.passed(), report.max_rel_err);
        }
        rows.push(row);
    }
    rows
}

fn nuclei_term_case_any(rng: &mut ChaCha8Rng) -> Case {
    let loss = [NucleiLoss::Bce, NucleiLoss::Bootstrapped, NucleiLoss::Truncated, NucleiLoss::SmoothTruncated]
        [rng.random_range(0..4)];
    nuclei_term_case(rng, loss)
}

/// Probabilities in [0.02, 0.98] with `p_t` kept away from γ.
fn probabilities(rng: &mut ChaCha8Rng, shape: Shape, target: &Tensor<f64>, gamma: f64) -> Tensor<f64> {
    let data = target
        .data()
        .iter()
        .map(|&t| loop {
            let p: f64 = rng.random_range(0.02..0.98);
            let pt = if t >= 0.5 { p } else { 1.0 - p };
            if (pt - gamma).abs() > 1e-3 {
                break p;
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn binary_tensor(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    let data = (0..shape.numel()).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn random_loss_config(rng: &mut ChaCha8Rng, loss: NucleiLoss) -> LossConfig {
    LossConfig {
        gamma: rng.random_range(0.05..0.5),
        bootstrap_beta: rng.random_range(0.5..1.0),
        nuclei_loss: loss,
        ..LossConfig::default()
    }
}

fn nuclei_term_case(rng: &mut ChaCha8Rng, loss: NucleiLoss) -> Case {
    let shape = Shape::new(dim(rng, 1, 2), 1, dim(rng, 1, 4), dim(rng, 1, 4));
    let cfg = random_loss_config(rng, loss);
    let target = binary_tensor(rng, shape);
    let p = probabilities(rng, shape, &target, cfg.gamma);
    (
        vec![p],
        Box::new(move |t, v| Ok(losses::nuclei_term(t, v[0], &target, &cfg)?.0)),
    )
}

fn dice_term_case(rng: &mut ChaCha8Rng) -> Case {
    let shape = Shape::new(dim(rng, 1, 2), 1, dim(rng, 1, 4), dim(rng, 1, 4));
    let target = binary_tensor(rng, shape);
    let p = rand_tensor(rng, shape, 0.02, 0.98);
    (
        vec![p],
        Box::new(move |t, v| Ok(losses::dice_term(t, v[0], &target)?.0)),
    )
}

fn total_loss_case(rng: &mut ChaCha8Rng) -> Case {
    let loss = [NucleiLoss::Bce, NucleiLoss::Bootstrapped, NucleiLoss::Truncated, NucleiLoss::SmoothTruncated]
        [rng.random_range(0..4)];
    let mut cfg = random_loss_config(rng, loss);
    cfg.level_weights = (0..2).map(|_| rng.random_range(0.1..2.0)).collect();
    let n = dim(rng, 1, 2);
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for side in [2, 4] {
        let shape = Shape::new(n, 1, side, side);
        let tn = binary_tensor(rng, shape);
        let tc = binary_tensor(rng, shape);
        inputs.push(probabilities(rng, shape, &tn, cfg.gamma));
        inputs.push(rand_tensor(rng, shape, 0.02, 0.98));
        targets.push(LevelTargets {
            nuclei: tn,
            contour: tc,
        });
    }
    (
        inputs,
        Box::new(move |t, v| {
            let levels = [
                LevelVars {
                    nuclei: v[0],
                    contour: v[1],
                },
                LevelVars {
                    nuclei: v[2],
                    contour: v[3],
                },
            ];
            Ok(losses::total_loss(t, &levels, &targets, &cfg)?.var)
        }),
    )
}

/// Central difference of a scalar function with step `h`.
fn central(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

fn pixel_row(
    name: &'static str,
    cases: usize,
    rng: &mut ChaCha8Rng,
    eval: impl Fn(f64, f64, f64) -> cianet::Result<PixelLoss>,
    param_range: (f64, f64),
    avoid_kink: bool,
) -> SuiteRow {
    let tol = Tolerance::rel(1e-6);
    let mut row = SuiteRow::new(name);
    while row.cases < cases {
        let t = f64::from(u8::from(rng.random_bool(0.5)));
        let param = rng.random_range(param_range.0..param_range.1);
        let p: f64 = rng.random_range(0.01..0.99);
        let pt = if t >= 0.5 { p } else { 1.0 - p };
        if avoid_kink && (pt - param).abs() < 1e-3 {
            continue;
        }
        let analytic = eval(p, t, param).unwrap().grad;
        let numeric = central(|q| eval(q, t, param).unwrap().value, p, 1e-5);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
        row.record(tol.accepts(analytic, numeric), if analytic == numeric { 0.0 } else { rel });
    }
    row
}

/// Finite-difference checks of every loss function, `cases` random cases each.
/// Scalar loss functions use a 1e-6 relative tolerance.
pub fn loss_gradient_suite(cases: usize, seed: u64) -> Vec<SuiteRow> {
    let mut rng = rng(seed);
    let mut rows = vec![
        pixel_row("bce", cases, &mut rng, |p, t, _| losses::bce(p, t), (0.0, 1.0), false),
        pixel_row("truncated", cases, &mut rng, losses::truncated, (0.05, 0.5), true),
        pixel_row("smooth_truncated", cases, &mut rng, losses::smooth_truncated, (0.05, 0.5), true),
        pixel_row("bootstrapped", cases, &mut rng, losses::bootstrapped_soft, (0.5, 1.0), false),
    ];

    let tol = Tolerance::rel(1e-6);
    let mut dice = SuiteRow::new("soft_dice");
    for _ in 0..cases {
        let n = dim(&mut rng, 1, 32);
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let q: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
        let d = losses::soft_dice(&p, &q).unwrap();
        let (mut ok, mut worst) = (true, 0.0f64);
        for i in 0..n {
            let numeric = central(
                |x| {
                    let mut pp = p.clone();
                    pp[i] = x;
                    losses::soft_dice(&pp, &q).unwrap().value
                },
                p[i],
                1e-5,
            );
            let a = d.grad[i];
            ok &= tol.accepts(a, numeric);
            if a.abs().max(numeric.abs()) > 0.0 {
                worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()));
            }
        }
        dice.record(ok, worst);
    }
    rows.push(dice);

    type Gen = fn(&mut ChaCha8Rng) -> Case;
    let taped: [(&'static str, Gen); 6] = [
        ("nuclei_term[bce]", |r| nuclei_term_case(r, NucleiLoss::Bce)),
        ("nuclei_term[bootstrapped]", |r| nuclei_term_case(r, NucleiLoss::Bootstrapped)),
        ("nuclei_term[truncated]", |r| nuclei_term_case(r, NucleiLoss::Truncated)),
        ("nuclei_term[smooth_truncated]", |r| nuclei_term_case(r, NucleiLoss::SmoothTruncated)),
        ("dice_term", dice_term_case),
        ("total_loss", total_loss_case),
    ];
    let tol = Tolerance::rel(1e-6).with_step(1e-5);
    for (name, gen) in taped {
        let mut row = SuiteRow::new(name);
        for _ in 0..cases {
            let (inputs, f) = gen(&mut rng);
            let report = check_gradients(&inputs, |t, v| f(t, v), tol, None).unwrap();
            row.record(report.passed(), report.max_rel_err);
        }
        rows.push(row);
    }
    rows
}

/// AJI evaluated straight from its definition with full-image scans and
/// exact rational comparisons.
pub fn brute_force_aji(gt: &LabelMap, pred: &LabelMap) -> f64 {
    let labels = |m: &LabelMap| {
        let mut v: Vec<u32> = m.data().iter().copied().filter(|&l| l != 0).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let (gts, preds) = (labels(gt), labels(pred));
    let mut used = vec![false; preds.len()];
    let (mut num, mut den) = (0u64, 0u64);
    for &g in &gts {
        let mut best: Option<(usize, u64, u64)> = None;
        for (j, &p) in preds.iter().enumerate() {
            let (mut inter, mut union) = (0u64, 0u64);
            for (&a, &b) in gt.data().iter().zip(pred.data()) {
                let (ia, ib) = (a == g, b == p);
                inter += u64::from(ia && ib);
                union += u64::from(ia || ib);
            }
            if inter == 0 {
                continue;
            }
            let better = match best {
                None => true,
                Some((_, bi, bu)) => inter * bu > bi * union,
            };
            if better {
                best = Some((j, inter, union));
            }
        }
        match best {
            Some((j, inter, union)) => {
                used[j] = true;
                num += inter;
                den += union;
            }
            None => den += gt.data().iter().filter(|&&a| a == g).count() as u64,
        }
    }
    for (j, &p) in preds.iter().enumerate() {
        if !used[j] {
            den += pred.data().iter().filter(|&&b| b == p).count() as u64;
        }
    }
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Random label map of at most 16×16: overlapping rectangles, speckle or both.
pub fn random_label_map(rng: &mut ChaCha8Rng) -> LabelMap {
    let (w, h) = (dim(rng, 1, 16), dim(rng, 1, 16));
    let mut m = LabelMap::new(w, h);
    let max_label = dim(rng, 1, 9) as u32;
    let style = rng.random_range(0..3);
    if style != 1 {
        for _ in 0..dim(rng, 0, 6) {
            let (x0, y0) = (rng.random_range(0..w), rng.random_range(0..h));
            let (x1, y1) = (rng.random_range(x0..w), rng.random_range(y0..h));
            let l = rng.random_range(1..=max_label);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    m.set(x, y, l);
                }
            }
        }
    }
    if style != 0 {
        let density = rng.random_range(0.0..0.5);
        for y in 0..h {
            for x in 0..w {
                if rng.random_bool(density) {
                    m.set(x, y, rng.random_range(0..=max_label));
                }
            }
        }
    }
    m
}

/// Same-size prediction derived from `gt`: relabelled, shifted, perturbed.
pub fn perturbed_prediction(rng: &mut ChaCha8Rng, gt: &LabelMap) -> LabelMap {
    let (w, h) = (gt.width(), gt.height());
    let dx = rng.random_range(-1i64..=1);
    let dy = rng.random_range(-1i64..=1);
    let offset = rng.random_range(0..4u32);
    let mut m = LabelMap::from_fn(w, h, |x, y| {
        let (sx, sy) = (x as i64 - dx, y as i64 - dy);
        if sx < 0 || sy < 0 || sx >= w as i64 || sy >= h as i64 {
            0
        } else {
            match gt.get(sx as usize, sy as usize) {
                0 => 0,
                l => l + offset,
            }
        }
    });
    let flips = rng.random_range(0.0..0.3);
    for y in 0..h {
        for x in 0..w {
            if rng.random_bool(flips) {
                m.set(x, y, rng.random_range(0..6));
            }
        }
    }
    m
}

/// Outcome of post-processing crisp ground-truth targets.
#[derive(Debug)]
pub struct RoundTrip {
    pub samples: usize,
    pub exact_counts: usize,
    pub mean_aji: f64,
    pub min_aji: f64,
}

/// Feeds `extract_targets(labels, r)` as 0/1 probability maps through the
/// instance post-processing with regrowth radius `regrow`.
pub fn crisp_round_trip(gen: &GeneratorConfig, seeds: std::ops::Range<u64>, r: usize, regrow: usize) -> RoundTrip {
    let post = PostConfig {
        post_dilation_radius: regrow,
        ..PostConfig::default()
    };
    let mut out = RoundTrip {
        samples: 0,
        exact_counts: 0,
        mean_aji: 0.0,
        min_aji: 1.0,
    };
    for seed in seeds {
        let s = generate_sample(gen, seed).unwrap();
        let t = extract_targets(&s.labels, r);
        let pn: ProbMap = t.nuclei.map(|b| f32::from(u8::from(b)));
        let pc: ProbMap = t.contour.map(|b| f32::from(u8::from(b)));
        let rec = extract_instances(&pn, &pc, &post).unwrap();
        let a = aji(&s.labels, &rec).unwrap();
        out.samples += 1;
        out.exact_counts += usize::from(rec.instance_count() == s.labels.instance_count());
        out.mean_aji += a;
        out.min_aji = out.min_aji.min(a);
    }
    out.mean_aji /= out.samples.max(1) as f64;
    out
}
