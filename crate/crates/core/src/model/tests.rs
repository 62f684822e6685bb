use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::losses::{total_loss, LevelTargets, LossConfig};
use crate::tensor::gradcheck::{check_gradients, Tolerance};

fn random(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Parameter count from channel arithmetic alone.
fn predicted_param_count(cfg: &CiaNetConfig) -> usize {
    let (k, w) = (cfg.growth_rate, cfg.decoder_width);
    let conv = |o: usize, i: usize, ks: usize, bias: bool| o * i * ks * ks + if bias { o } else { 0 };
    let mut total = conv(cfg.stem_channels, 3, 7, false) + 2 * cfg.stem_channels;
    let mut c = cfg.stem_channels;
    let mut enc = Vec::new();
    for (b, &n) in cfg.block_sizes.iter().enumerate() {
        for _ in 0..n {
            total += 2 * c + conv(4 * k, c, 1, false) + 2 * 4 * k + conv(k, 4 * k, 3, false);
            c += k;
        }
        enc.push(c);
        if b < 3 {
            let out = (c as f64 * cfg.compression).floor() as usize;
            total += 2 * c + conv(out, c, 1, false);
            c = out;
        }
    }
    let branch = conv(w, enc[3], 3, true)
        + [enc[2], enc[1], enc[0]]
            .iter()
            .map(|&ce| conv(w, ce, 1, true) + conv(w, w, 3, true) + conv(1, w, 1, true))
            .sum::<usize>();
    total += 2 * branch;
    if cfg.use_iam {
        total += 2 * 2 * conv(w, 2 * w, 3, true);
    }
    total
}

#[test]
fn parameter_count_matches_channel_arithmetic() {
    for cfg in [
        CiaNetConfig::toy(),
        CiaNetConfig::paper(),
        CiaNetConfig {
            use_iam: false,
            ..CiaNetConfig::toy()
        },
        CiaNetConfig {
            compression: 1.0,
            block_sizes: vec![1, 3, 0, 2],
            ..CiaNetConfig::toy()
        },
    ] {
        let m = CiaNet::<f32>::build(&cfg, 0).unwrap();
        assert_eq!(m.param_count(), predicted_param_count(&cfg), "{cfg:?}");
    }
}

#[test]
fn paper_preset_channel_growth() {
    let cfg = CiaNetConfig::paper();
    let m = CiaNet::<f32>::build(&cfg, 0).unwrap();
    // DM3 input: 256 channels; 24 layers of k=32 add 768.
    let first = m.param("dm3.layer1.bn1.scale").unwrap();
    let last = m.param("dm3.layer24.bn1.scale").unwrap();
    assert_eq!(first.tensor.len(), 256);
    assert_eq!(last.tensor.len() + 32 - 256, 768);
    assert_eq!(m.param("nuclei.top.weight").unwrap().tensor.shape(), Shape::new(128, 1024, 3, 3));
}

#[test]
fn build_validation_and_determinism() {
    let bad = CiaNetConfig {
        block_sizes: vec![2, 2, 2],
        ..CiaNetConfig::toy()
    };
    assert!(matches!(CiaNet::<f32>::build(&bad, 0), Err(Error::Config(_))));
    let a = CiaNet::<f32>::build(&CiaNetConfig::toy(), 9).unwrap();
    let b = CiaNet::<f32>::build(&CiaNetConfig::toy(), 9).unwrap();
    let c = CiaNet::<f32>::build(&CiaNetConfig::toy(), 10).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.params, c.params);
    assert_eq!(a.param("stem.bn.scale").unwrap().tensor.data()[0], 1.0);
    assert_eq!(a.param("nuclei.level3.classifier.bias").unwrap().tensor.data()[0], 0.0);
}

#[test]
fn forward_shapes_and_probability_range() {
    let m = CiaNet::<f32>::build(&CiaNetConfig::toy(), 1).unwrap();
    let x = random(Shape::new(1, 3, 64, 64), 2).cast::<f32>();
    let out = m.predict(&x).unwrap();
    let sizes: Vec<usize> = out.levels.iter().map(|(n, _)| n.shape().h).collect();
    assert_eq!(sizes, vec![8, 16, 32]);
    assert_eq!(out.final_nuclei.shape(), Shape::new(1, 1, 64, 64));
    assert_eq!(out.final_contour.shape(), Shape::new(1, 1, 64, 64));
    for (n, c) in &out.levels {
        assert!(n.data().iter().chain(c.data()).all(|&p| p > 0.0 && p < 1.0));
    }
    assert_eq!(m.predict(&x).unwrap(), out);

    let odd = Tensor::<f32>::zeros(Shape::new(1, 3, 40, 64));
    assert!(matches!(m.predict(&odd), Err(Error::Dimension { axis: "H", .. })));
}

#[test]
fn building_block_shapes() {
    let mut planner = ParamPlanner::new();
    let bottleneck = planner.bottleneck("b", 16, 8);
    let dense: Vec<_> = (0..2).map(|i| planner.bottleneck(&format!("d{i}"), 16 + 8 * i, 8)).collect();
    let trans = planner.transition("t", 32, 16);
    let trans_full = planner.transition("tf", 32, 32);
    let lateral = planner.conv("lat", 32, 128, 1, true);
    let classifier = planner.conv("cls", 1, 32, 1, true);
    let (params, stats) = planner.materialize::<f64>(4);
    let mut stats: Vec<_> = stats.into_iter().map(|s| s.stats).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.tensor.clone(), false)).collect();
    let mut g = Graph {
        tape: &mut tape,
        params: &vars,
        stats: &mut stats,
        mode: Mode::Train,
    };
    let x = g.tape.constant(random(Shape::new(2, 16, 16, 16), 5));
    let y = g.bottleneck(&bottleneck, x).unwrap();
    assert_eq!(g.tape.shape(y), Shape::new(2, 8, 16, 16));
    let d = g.dense_module(&dense, x).unwrap();
    assert_eq!(g.tape.shape(d).c, 32);
    assert_eq!(g.dense_module(&[], x).unwrap(), x);
    let t = g.transition(&trans, d).unwrap();
    assert_eq!(g.tape.shape(t), Shape::new(2, 16, 8, 8));
    let tf = g.transition(&trans_full, d).unwrap();
    assert_eq!(g.tape.shape(tf).c, 32);

    let enc = g.tape.constant(Tensor::zeros(Shape::new(1, 128, 8, 8)));
    let upper = g.tape.constant(random(Shape::new(1, 32, 4, 4), 6));
    let merged = g.lateral_merge(&lateral, enc, upper).unwrap();
    assert_eq!(g.tape.shape(merged).c, 32);
    let up = g.tape.upsample2x(upper);
    // Zero encoder features and zero lateral bias: D is the upsampled M.
    assert_eq!(g.tape.value(merged), g.tape.value(up));
    let wrong = g.tape.constant(Tensor::zeros(Shape::new(1, 128, 6, 6)));
    assert!(g.lateral_merge(&lateral, wrong, upper).is_err());

    let p = g.classifier(&classifier, merged).unwrap();
    assert_eq!(g.tape.shape(p), Shape::new(1, 1, 8, 8));
}

#[test]
fn zero_classifier_gives_half() {
    let mut planner = ParamPlanner::new();
    let cls = planner.conv("cls", 1, 4, 1, true);
    let (mut params, _) = planner.materialize::<f64>(0);
    params[cls.weight].tensor = Tensor::zeros(params[cls.weight].tensor.shape());
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.tensor.clone(), false)).collect();
    let mut g = Graph {
        tape: &mut tape,
        params: &vars,
        stats: &mut [],
        mode: Mode::Eval,
    };
    let x = g.tape.constant(random(Shape::new(1, 4, 5, 5), 1));
    let p = g.classifier(&cls, x).unwrap();
    assert!(g.tape.value(p).data().iter().all(|&v| v == 0.5));
}

/// Gradient check of one building block with respect to its input and all its parameters.
fn check_block(
    planner: &ParamPlanner,
    input: Tensor<f64>,
    mode: Mode,
    run: impl Fn(&mut Graph<f64>, Var) -> Result<Var>,
) {
    let (params, stats) = planner.materialize::<f64>(11);
    let stats: Vec<_> = stats.into_iter().map(|s| s.stats).collect();
    let mut inputs = vec![input];
    inputs.extend(params.iter().map(|p| p.tensor.clone()));
    let weights = random(Shape::new(1, 1, 1, 4096), 77);
    let report = check_gradients(
        &inputs,
        |tape, vars| {
            let mut st = stats.clone();
            let mut g = Graph {
                tape,
                params: &vars[1..],
                stats: &mut st,
                mode,
            };
            let y = run(&mut g, vars[0])?;
            // Random projection so every output element matters.
            let n = g.tape.value(y).len();
            let w = Tensor::from_vec(g.tape.shape(y), weights.data()[..n].to_vec())?;
            let w = g.tape.constant(w);
            let prod = g.tape.mul(y, w)?;
            Ok(g.tape.sum(prod))
        },
        Tolerance::default(),
        Some(40),
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn bottleneck_and_transition_gradients() {
    let mut p = ParamPlanner::new();
    let b = p.bottleneck("b", 4, 2);
    check_block(&p, random(Shape::new(2, 4, 4, 4), 1), Mode::Train, |g, x| g.bottleneck(&b, x));

    let mut p = ParamPlanner::new();
    let t = p.transition("t", 6, 3);
    check_block(&p, random(Shape::new(2, 6, 4, 4), 2), Mode::Train, |g, x| g.transition(&t, x));
}

#[test]
fn lateral_classifier_and_iam_gradients() {
    let mut p = ParamPlanner::new();
    let lat = p.conv("lat", 3, 5, 1, true);
    let upper = p.conv("upper_src", 3, 3, 1, false);
    check_block(&p, random(Shape::new(1, 5, 4, 4), 3), Mode::Eval, |g, x| {
        // Second input derived from the first so both paths are exercised.
        let pooled = g.tape.avg_pool2d(x)?;
        let sliced = g.conv(&ConvRef { weight: lat.weight, bias: None }, pooled, 1)?;
        let m = g.conv(&upper, sliced, 1)?;
        g.lateral_merge(&lat, x, m)
    });

    let mut p = ParamPlanner::new();
    let cls = p.conv("cls", 1, 3, 1, true);
    check_block(&p, random(Shape::new(1, 3, 4, 4), 4), Mode::Eval, |g, x| g.classifier(&cls, x));

    let mut p = ParamPlanner::new();
    let level = |p: &mut ParamPlanner, name: &str| LevelRefs {
        lateral: p.conv(&format!("{name}.lat"), 3, 3, 1, true),
        smooth: p.conv(&format!("{name}.smooth"), 3, 3, 3, true),
        classifier: p.conv(&format!("{name}.cls"), 1, 3, 1, true),
    };
    let nl = level(&mut p, "n");
    let cl = level(&mut p, "c");
    let iam = IamRef {
        to_nuclei: p.conv("iam.n", 3, 6, 3, true),
        to_contour: p.conv("iam.c", 3, 6, 3, true),
    };
    check_block(&p, random(Shape::new(1, 6, 4, 4), 5), Mode::Eval, |g, x| {
        // Route the first three channels to the nuclei branch, the rest to contour.
        let sel_n = g.tape.constant(Tensor::from_vec(Shape::new(3, 6, 1, 1), selector(0))?);
        let sel_c = g.tape.constant(Tensor::from_vec(Shape::new(3, 6, 1, 1), selector(3))?);
        let d_n = g.tape.conv2d(x, sel_n, None, 1, 0)?;
        let d_c = g.tape.conv2d(x, sel_c, None, 1, 0)?;
        let out = g.iam(&nl, &cl, Some(&iam), d_n, d_c, true)?;
        let (mn, mc) = out.next.unwrap();
        g.tape.concat(&[mn, mc, out.f_nuclei, out.f_contour])
    });
}

fn selector(offset: usize) -> Vec<f64> {
    let mut w = vec![0.0; 18];
    for o in 0..3 {
        w[o * 6 + offset + o] = 1.0;
    }
    w
}

#[test]
fn iam_shapes_and_ablation_passthrough() {
    let mut p = ParamPlanner::new();
    let level = |p: &mut ParamPlanner, name: &str| LevelRefs {
        lateral: p.conv(&format!("{name}.lat"), 32, 32, 1, true),
        smooth: p.conv(&format!("{name}.smooth"), 32, 32, 3, true),
        classifier: p.conv(&format!("{name}.cls"), 1, 32, 1, true),
    };
    let nl = level(&mut p, "n");
    let cl = level(&mut p, "c");
    let iam = IamRef {
        to_nuclei: p.conv("iam.n", 32, 64, 3, true),
        to_contour: p.conv("iam.c", 32, 64, 3, true),
    };
    let (params, _) = p.materialize::<f64>(1);
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|q| tape.leaf(q.tensor.clone(), false)).collect();
    let mut g = Graph {
        tape: &mut tape,
        params: &vars,
        stats: &mut [],
        mode: Mode::Eval,
    };
    let dn = g.tape.constant(random(Shape::new(1, 32, 8, 8), 1));
    let dc = g.tape.constant(random(Shape::new(1, 32, 8, 8), 2));
    let out = g.iam(&nl, &cl, Some(&iam), dn, dc, true).unwrap();
    let (mn, mc) = out.next.unwrap();
    assert_eq!(g.tape.shape(mn).c, 32);
    assert_eq!(g.tape.shape(mc).c, 32);
    let plain = g.iam(&nl, &cl, None, dn, dc, true).unwrap();
    assert_eq!(plain.next, Some((plain.f_nuclei, plain.f_contour)));
    assert!(g.iam(&nl, &cl, None, dn, dc, false).unwrap().next.is_none());
    let bad = g.tape.constant(random(Shape::new(1, 16, 8, 8), 3));
    assert!(g.iam(&nl, &cl, Some(&iam), dn, bad, true).is_err());
}

#[test]
fn without_iam_nuclei_ignore_contour_decoder() {
    let cfg = CiaNetConfig {
        use_iam: false,
        ..CiaNetConfig::toy()
    };
    let m = CiaNet::<f64>::build(&cfg, 3).unwrap();
    let x = random(Shape::new(1, 3, 32, 32), 4);
    let base = m.predict(&x).unwrap();
    let mut perturbed = m.clone();
    for p in perturbed.params.iter_mut().filter(|p| p.name.starts_with("contour.")) {
        p.tensor = p.tensor.map(|v| v * 1.7 + 0.3);
    }
    let after = perturbed.predict(&x).unwrap();
    assert_eq!(after.final_nuclei, base.final_nuclei);
    assert_ne!(after.final_contour, base.final_contour);

    let mut perturbed = m.clone();
    for p in perturbed.params.iter_mut().filter(|p| p.name.starts_with("nuclei.")) {
        p.tensor = p.tensor.map(|v| v * -0.5 + 0.1);
    }
    let after = perturbed.predict(&x).unwrap();
    assert_eq!(after.final_contour, base.final_contour);
    assert_ne!(after.final_nuclei, base.final_nuclei);
}

/// Gradient of the summed final nuclei map with respect to one named parameter.
fn nuclei_grad(cfg: &CiaNetConfig, x: &Tensor<f64>, name: &str) -> Tensor<f64> {
    let mut m = CiaNet::<f64>::build(cfg, 5).unwrap();
    let idx = m.param_index(name).unwrap();
    let mut tape = Tape::new();
    let vars = m.register(&mut tape, true);
    let xi = tape.constant(x.clone());
    let out = m.forward(&mut tape, &vars, xi, Mode::Train).unwrap();
    let s = tape.sum(out.final_nuclei);
    let mut g = tape.backward(s).unwrap();
    g.take(vars[idx]).unwrap()
}

#[test]
fn iam_opens_a_gradient_path_between_branches() {
    let x = random(Shape::new(1, 3, 32, 32), 8);
    let smooth = "contour.level1.smooth.weight";
    let with = nuclei_grad(&CiaNetConfig::toy(), &x, smooth);
    assert!(with.data().iter().any(|&v| v != 0.0));
    let cfg = CiaNetConfig {
        use_iam: false,
        ..CiaNetConfig::toy()
    };
    let without = nuclei_grad(&cfg, &x, smooth);
    assert!(without.data().iter().all(|&v| v == 0.0));
}

#[test]
fn end_to_end_gradient_check_on_toy_preset() {
    let cfg = CiaNetConfig::toy();
    let base = CiaNet::<f64>::build(&cfg, 21).unwrap();
    let x = random(Shape::new(1, 3, 32, 32), 22);
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let targets: Vec<LevelTargets<f64>> = [4usize, 8, 16, 32]
        .iter()
        .map(|&s| {
            let shape = Shape::new(1, 1, s, s);
            let bits = |rng: &mut ChaCha8Rng| {
                (0..shape.numel())
                    .map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 })
                    .collect::<Vec<f64>>()
            };
            LevelTargets {
                nuclei: Tensor::from_vec(shape, bits(&mut rng)).unwrap(),
                contour: Tensor::from_vec(shape, bits(&mut rng)).unwrap(),
            }
        })
        .collect();
    let loss_cfg = LossConfig::default();
    let inputs: Vec<Tensor<f64>> = base.params.iter().map(|p| p.tensor.clone()).collect();
    let report = check_gradients(
        &inputs,
        |tape, vars| {
            let mut m = base.clone();
            let xi = tape.constant(x.clone());
            let out = m.forward(tape, vars, xi, Mode::Train)?;
            Ok(total_loss(tape, &out.supervised(), &targets, &loss_cfg)?.var)
        },
        Tolerance::rel(1e-3).with_step(1e-6),
        Some(2),
    )
    .unwrap();
    assert!(report.checked > 150);
    assert!(report.passed(), "{report:?}");
}
