//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use common::{tiny_config, tree};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seaice_cli::{cmd_evaluate, cmd_predict, cmd_synth, cmd_train, EvaluateInput, ExperimentConfig, PredictRequest};
use seaice_core::climatology::climatology_forecast;
use seaice_core::conv::{conv2d_backward, conv2d_forward, ConvLayer, ConvShape};
use seaice_core::edge::{extract_contour, resample_contour, signed_edge_distance, BinaryMask, Contour, DEFAULT_POINTS};
use seaice_core::ensemble::{fit_cnn_ensemble, MemberSet};
use seaice_core::forecaster::{build_model, train_pairs, ModelSpec, ModelState, TrainConfig};
use seaice_core::grid::{weekly_calendar, Cadence, FieldSeries, GridGeometry};
use seaice_core::metrics::{mae_with_grad, ssim, ssim_with_grad, Grouping, LossKind, SsimParams, Window};
use seaice_core::protocol::{member_forecasts, target_for};
use seaice_core::sif::load_series;
use seaice_core::synth::{synth_generate, SynthConfig};
use seaice_core::tensor::{relu, relu_backward, Shape3, Tensor3};
use seaice_core::windowing::{make_training_pairs, split_series, SplitScheme};

type Check = Result<String, String>;

fn verdict(pass: bool, detail: String) -> Check {
    if pass {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    let criteria: [(&str, fn() -> Check); 8] = [
        ("gradient suite", gradient_suite),
        ("ssim axioms", ssim_axioms),
        ("geometry suite", geometry_suite),
        ("climatology exactness", climatology_exactness),
        ("end-to-end synthetic benchmark", end_to_end),
        ("overfit checks", overfit),
        ("protocol fidelity", protocol_fidelity),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS {name}: {d} [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("FAIL {name}: {d} [{secs:.1}s]");
            }
        }
    }
    println!("{} of {} criteria passed", 8 - failed, 8);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape3, lo: f64, hi: f64) -> Tensor3<f64> {
    Tensor3::from_fn(shape, |_, _, _| rng.gen_range(lo..hi))
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Largest relative error between `analytic` and central differences of `f`
/// with respect to every entry of `x`.
fn fd_max_err(x: &mut [f64], analytic: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    const H: f64 = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + H;
        let up = f(x);
        x[i] = orig - H;
        let down = f(x);
        x[i] = orig;
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * H)));
    }
    worst
}

fn dot(a: &Tensor3<f64>, b: &Tensor3<f64>) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum()
}

fn gradient_suite() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut errs = Vec::new();

    // Convolution: L = <r, conv(x)>.
    let shape = ConvShape { in_channels: 3, out_channels: 4, kernel_h: 3, kernel_w: 3 };
    let x = random_tensor(&mut rng, Shape3::new(3, 7, 7), -1.0, 1.0);
    let w: Vec<f64> = (0..shape.weight_len()).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let b: Vec<f64> = (0..4).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let layer = ConvLayer::new(shape, w.clone(), b.clone()).unwrap();
    let r = random_tensor(&mut rng, Shape3::new(4, 7, 7), -1.0, 1.0);
    let (gx, gp) = conv2d_backward(&x, &layer, &r).unwrap();
    let mut xv = x.as_slice().to_vec();
    let e_in = fd_max_err(&mut xv, gx.as_slice(), |v| {
        dot(&r, &conv2d_forward(&Tensor3::from_vec(x.shape(), v.to_vec()).unwrap(), &layer).unwrap())
    });
    let mut wv = w.clone();
    let e_w = fd_max_err(&mut wv, &gp.weights, |v| {
        dot(&r, &conv2d_forward(&x, &ConvLayer::new(shape, v.to_vec(), b.clone()).unwrap()).unwrap())
    });
    let mut bv = b.clone();
    let e_b = fd_max_err(&mut bv, &gp.bias, |v| {
        dot(&r, &conv2d_forward(&x, &ConvLayer::new(shape, w.clone(), v.to_vec()).unwrap()).unwrap())
    });
    errs.push(("conv", e_in.max(e_w).max(e_b)));

    // ReLU, with inputs kept away from the kink.
    let x = Tensor3::from_fn(Shape3::new(4, 9, 9), |_, _, _| {
        let v: f64 = rng.gen_range(0.01..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    });
    let r = random_tensor(&mut rng, x.shape(), -1.0, 1.0);
    let mut g = r.clone();
    relu_backward(&relu(&x), &mut g);
    let mut xv = x.as_slice().to_vec();
    errs.push(("relu", fd_max_err(&mut xv, g.as_slice(), |v| dot(&r, &relu(&Tensor3::from_vec(x.shape(), v.to_vec()).unwrap())))));

    // MAE, with residuals away from zero.
    let target = random_tensor(&mut rng, Shape3::new(4, 9, 9), 0.0, 1.0);
    let pred = Tensor3::from_fn(target.shape(), |c, y, x| {
        let t = target.get(c, y, x);
        if t > 0.5 {
            t - rng.gen_range(0.01..0.4)
        } else {
            t + rng.gen_range(0.01..0.4)
        }
    });
    let mask: Vec<bool> = (0..81).map(|i| i % 7 != 3).collect();
    let (_, g) = mae_with_grad(&pred, &target, &mask, true).unwrap();
    let mut pv = pred.as_slice().to_vec();
    errs.push((
        "mae",
        fd_max_err(&mut pv, g.unwrap().as_slice(), |v| {
            mae_with_grad(&Tensor3::from_vec(pred.shape(), v.to_vec()).unwrap(), &target, &mask, false).unwrap().0
        }),
    ));

    // SSIM on a 9x9 image with a 7-wide window.
    let params = SsimParams::for_range(1.0, 7, Window::Gaussian { sigma: 1.5 });
    let target = random_tensor(&mut rng, Shape3::new(4, 9, 9), 0.0, 1.0);
    let pred = random_tensor(&mut rng, target.shape(), 0.0, 1.0);
    let mask = vec![true; 81];
    let (_, g) = ssim_with_grad(&pred, &target, &mask, &params, true).unwrap();
    let mut pv = pred.as_slice().to_vec();
    errs.push((
        "ssim",
        fd_max_err(&mut pv, g.unwrap().as_slice(), |v| {
            ssim(&Tensor3::from_vec(pred.shape(), v.to_vec()).unwrap(), &target, &mask, &params).unwrap()
        }),
    ));

    // Whole network, both losses, outputs kept inside (0, 1).
    let mut model: ModelState<f64> = build_model(&ModelSpec::new(4, 3, 3), 5).unwrap();
    model.layers[4].weights.iter_mut().for_each(|w| *w *= 0.1);
    model.layers[4].bias.iter_mut().for_each(|b| *b += 0.5);
    let input = random_tensor(&mut rng, Shape3::new(4, 9, 9), 0.0, 1.0);
    let raw = model.forward_raw(&input).unwrap();
    if !raw.as_slice().iter().all(|&v| v > 0.0 && v < 1.0) {
        return Err("network outputs left (0, 1); clip kink would spoil the check".into());
    }
    let target = random_tensor(&mut rng, raw.shape(), 0.0, 1.0);
    for loss in [LossKind::Mae, LossKind::Ssim] {
        let (_, grads) = model.loss_and_grads(&input, &target, &mask, loss, &params).unwrap();
        let mut worst = 0.0f64;
        for l in 0..model.layers.len() {
            let eval = |m: &ModelState<f64>| loss.value(&m.predict(&input).unwrap(), &target, &mask, &params).unwrap();
            let mut probe = model.clone();
            let mut wv = probe.layers[l].weights.clone();
            worst = worst.max(fd_max_err(&mut wv, &grads[l].weights, |v| {
                probe.layers[l].weights.copy_from_slice(v);
                eval(&probe)
            }));
            let mut probe = model.clone();
            let mut bv = probe.layers[l].bias.clone();
            worst = worst.max(fd_max_err(&mut bv, &grads[l].bias, |v| {
                probe.layers[l].bias.copy_from_slice(v);
                eval(&probe)
            }));
        }
        errs.push((if loss == LossKind::Mae { "network(mae)" } else { "network(ssim)" }, worst));
    }

    let secs = start.elapsed().as_secs_f64();
    let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    let detail = errs.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    verdict(worst < 1e-4 && secs < 60.0, format!("max rel err {worst:.1e} < 1e-4 ({detail}); {secs:.1}s < 60s"))
}

/// Mean over all fully-contained uniform windows, straight from the definition.
fn brute_force_uniform_ssim(x: &[f64], y: &[f64], h: usize, w: usize, n: usize, c1: f64, c2: f64) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for y0 in 0..=h - n {
        for x0 in 0..=w - n {
            let cells: Vec<usize> = (0..n * n).map(|k| (y0 + k / n) * w + x0 + k % n).collect();
            let m = cells.len() as f64;
            let mx = cells.iter().map(|&i| x[i]).sum::<f64>() / m;
            let my = cells.iter().map(|&i| y[i]).sum::<f64>() / m;
            let vx = cells.iter().map(|&i| (x[i] - mx).powi(2)).sum::<f64>() / m;
            let vy = cells.iter().map(|&i| (y[i] - my).powi(2)).sum::<f64>() / m;
            let cxy = cells.iter().map(|&i| (x[i] - mx) * (y[i] - my)).sum::<f64>() / m;
            total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

fn ssim_axioms() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let params = SsimParams::default();
    let shape = Shape3::new(3, 16, 16);
    let mask: Vec<bool> = (0..256).map(|i| i % 16 != 0 || i / 16 < 8).collect();

    let x = random_tensor(&mut rng, shape, 0.0, 1.0);
    let identity = (ssim(&x, &x, &mask, &params).unwrap() - 1.0).abs();

    let mut asym = 0.0f64;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..40 {
        let a = random_tensor(&mut rng, shape, 0.0, 1.0);
        let b = if i % 2 == 0 { a.map(|v| 1.0 - v) } else { random_tensor(&mut rng, shape, 0.0, 1.0) };
        let ab = ssim(&a, &b, &mask, &params).unwrap();
        asym = asym.max((ab - ssim(&b, &a, &mask, &params).unwrap()).abs());
        lo = lo.min(ab);
        hi = hi.max(ab);
    }

    let uniform = SsimParams::for_range(1.0, 7, Window::Uniform);
    let a = random_tensor(&mut rng, Shape3::new(1, 16, 16), 0.0, 1.0);
    let b = random_tensor(&mut rng, a.shape(), 0.0, 1.0);
    let oracle = brute_force_uniform_ssim(a.as_slice(), b.as_slice(), 16, 16, 7, uniform.c1, uniform.c2);
    let oracle_err = (ssim(&a, &b, &[true; 256], &uniform).unwrap() - oracle).abs();

    let (c1, c2) = (1e-4, 9e-4);
    let constant = SsimParams { c1, c2, ..SsimParams::default() };
    let closed = (2.0 * 0.5 * 0.6 + c1) / (0.5f64 * 0.5 + 0.6 * 0.6 + c1);
    let p = Tensor3::filled(Shape3::new(1, 16, 16), 0.5f64);
    let q = Tensor3::filled(p.shape(), 0.6f64);
    let constant_err = (ssim(&p, &q, &[true; 256], &constant).unwrap() - closed).abs();

    verdict(
        identity < 1e-9 && asym < 1e-12 && lo >= -1.0 && hi <= 1.0 && oracle_err < 1e-10 && constant_err < 1e-6,
        format!(
            "identity err {identity:.1e} < 1e-9; symmetry err {asym:.1e}; range [{lo:.3}, {hi:.3}] within [-1, 1]; \
             uniform oracle err {oracle_err:.1e} < 1e-10; constant 0.5 vs 0.6 = {closed:.6} err {constant_err:.1e} < 1e-6"
        ),
    )
}

fn square(c: f64, half: f64) -> Contour {
    Contour { points: vec![[c - half, c - half], [c + half, c - half], [c + half, c + half], [c - half, c + half]] }
}

fn geometry_suite() -> Check {
    let start = Instant::now();
    let outer = resample_contour(&square(50.0, 30.0), DEFAULT_POINTS).unwrap();
    let squares = signed_edge_distance(&outer, &square(50.0, 20.0)).unwrap().mean;

    let same = resample_contour(&square(40.0, 15.0), DEFAULT_POINTS).unwrap();
    let identical = signed_edge_distance(&same, &same).unwrap().per_point.iter().fold(0.0f64, |m, d| m.max(d.abs()));

    let (n, cx, cy) = (64usize, 31.3, 32.6);
    let mut radius_err = 0.0f64;
    for radius in [6.0, 12.5, 20.0] {
        let mask = BinaryMask {
            height: n,
            width: n,
            bits: (0..n * n).map(|i| ((i % n) as f64 - cx).hypot((i / n) as f64 - cy) <= radius).collect(),
        };
        let c = resample_contour(&extract_contour(&mask).unwrap(), 200).unwrap();
        let mean_r = c.points.iter().map(|p| (p[0] - cx).hypot(p[1] - cy)).sum::<f64>() / c.len() as f64;
        radius_err = radius_err.max((mean_r - radius).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        (10.0..=11.8).contains(&squares) && identical < 1e-12 && radius_err < 1.0 && secs < 60.0,
        format!(
            "squares mean {squares:.3} in [10, 11.8]; identical max |d| {identical:.1e}; disk radius err {radius_err:.3} < 1 cell; {secs:.1}s"
        ),
    )
}

fn climatology_exactness() -> Check {
    let cfg = SynthConfig { noise_std: 0.0, trend_per_year: 0.0, anomaly_std: 0.0, years: 7, ..SynthConfig::default() };
    let series = synth_generate(&cfg, 3).unwrap();
    if series.frame(10) != series.frame(10 + 52) {
        return Err("synthetic series is not 1-year periodic".into());
    }
    let mut worst = 0.0f64;
    for year in [5usize, 6] {
        let issue = series.timestamps()[year * 52];
        let b = climatology_forecast(&series, issue).unwrap();
        for w in 0..52 {
            let actual = series.frame(year * 52 + w);
            for (cell, (&f, &a)) in b.values.channel(w).iter().zip(actual).enumerate() {
                if series.mask()[cell] {
                    worst = worst.max((f as f64 - a as f64).abs());
                }
            }
        }
    }
    verdict(worst < 1e-12, format!("max abs err on valid cells {worst:.1e} < 1e-12"))
}

fn end_to_end() -> Check {
    let mut lines = Vec::new();
    let mut ok = true;
    for seed in 0..3u64 {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig { seed: Some(seed), output_dir: dir.path().to_path_buf(), ..ExperimentConfig::template() };
        let start = Instant::now();
        cmd_train(&cfg).map_err(|e| format!("seed {seed}: {e:#}"))?;
        let eval = cmd_evaluate(&cfg, &EvaluateInput::Models(dir.path().join("models"))).map_err(|e| format!("seed {seed}: {e:#}"))?;
        let elapsed = start.elapsed();
        let mean_ssim = |name: &str| eval.report(Grouping::Yearly, name).and_then(|r| r.mean()).map(|m| m.1).unwrap_or(f64::NAN);
        let surrogate = mean_ssim("surrogate");
        let best = ["cnn_mae", "cnn_ssim", "climatology"]
            .into_iter()
            .map(|n| (n, mean_ssim(n)))
            .fold(("", f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
        let pass = surrogate >= best.1 - 0.01 && elapsed <= Duration::from_secs(600);
        ok &= pass;
        lines.push(format!(
            "seed {seed} surrogate {surrogate:.4} vs {} {:.4} - 0.01 in {:.0}s{}",
            best.0,
            best.1,
            elapsed.as_secs_f64(),
            if pass { "" } else { " (miss)" }
        ));
    }
    verdict(ok, lines.join("; "))
}

fn overfit() -> Check {
    let cfg = |loss| TrainConfig { loss, epochs: 200, learning_rate: 1e-3, batch_size: 1, seed: 1, ..TrainConfig::default() };
    let ratio = |h: &[f64]| h.iter().cloned().fold(f64::INFINITY, f64::min) / h[0];
    let mut parts = Vec::new();
    let mut ok = true;

    let small = |years| SynthConfig { height: 16, width: 16, years, ..SynthConfig::default() };
    let series = synth_generate(&small(3), 4).unwrap();
    let pairs = make_training_pairs(&series, 104, 52, 52).unwrap();
    if pairs.len() != 1 {
        return Err(format!("expected one pair, got {}", pairs.len()));
    }
    for loss in [LossKind::Mae, LossKind::Ssim] {
        let out = train_pairs(build_model(&ModelSpec::default(), 2).unwrap(), &pairs, &cfg(loss), series.mask()).unwrap();
        let r = ratio(&out.history);
        ok &= r < 0.1 && out.history.len() <= 200;
        parts.push(format!("cnn_{loss} {r:.3}"));
    }

    let series = synth_generate(&small(7), 5).unwrap();
    let spec = ModelSpec::new(104, 8, 3);
    let (a, b): (ModelState, ModelState) = (build_model(&spec, 1).unwrap(), build_model(&spec, 2).unwrap());
    let issue = series.timestamps()[6 * 52];
    let members: Vec<MemberSet> = vec![member_forecasts(&a, &b, &series, issue).unwrap()];
    let targets = vec![target_for(&series, issue).unwrap()];
    for loss in [LossKind::Mae, LossKind::Ssim] {
        let out = fit_cnn_ensemble(&members, &targets, &ModelSpec::new(156, 64, 5), &cfg(loss), 3, None).unwrap();
        let r = ratio(&out.history);
        ok &= r < 0.1 && out.history.len() <= 200;
        parts.push(format!("ensemble_cnn_{loss} {r:.3}"));
    }
    verdict(ok, format!("best/initial loss < 0.1 within 200 epochs: {}", parts.join(", ")))
}

fn protocol_fidelity() -> Check {
    let cal = weekly_calendar(1996, 27);
    let g = GridGeometry::new(2, 2, 14.0).unwrap();
    let frames = (0..cal.len()).map(|t| vec![(t % 52) as f32 / 52.0; 4]).collect();
    let series = FieldSeries::new(g, vec![true; 4], frames, cal, Cadence::Weekly).unwrap();
    let split = split_series(&series, &SplitScheme::long_record()).unwrap();
    let years = |s: &FieldSeries| {
        let mut y: Vec<i32> = s.timestamps().iter().map(chrono::Datelike::year).collect();
        y.dedup();
        y.len()
    };
    let sizes = [&split.single_model_train, &split.ensemble_train, &split.retrain, &split.test].map(years);
    let phases_ok = sizes == [14, 6, 20, 7];

    let dir = tempfile::tempdir().unwrap();
    let obs = cmd_synth(&tiny_config(&dir.path().join("data"), 9)).unwrap();
    let observed = load_series(&obs).unwrap();
    let mut specs = Vec::new();
    for year in [5usize, 6, 7] {
        let out = dir.path().join(format!("clim{year}"));
        let issue = observed.timestamps()[year * 52];
        let req = PredictRequest { checkpoint: "climatology".into(), data: Some(obs.clone()), issue, weeks: vec![] };
        cmd_predict(&tiny_config(&out, 9), &req).unwrap();
        specs.push(format!("climatology={}", out.join("forecast.json").display()));
    }
    let mut cfg = tiny_config(&dir.path().join("eval"), 9);
    cfg.grouping = Some(Grouping::Quarterly);
    let eval = cmd_evaluate(&cfg, &EvaluateInput::Files { actual: obs, forecasts: specs }).unwrap();
    let rows = &eval.report(Grouping::Quarterly, "climatology").unwrap().rows;
    let layout: Vec<String> = rows.iter().map(|r| format!("{}:{}", r.period, r.steps)).collect();
    let expected: Vec<String> =
        (2018..=2020).flat_map(|y| (1..=3).map(move |q| format!("{y}Q{q}:13"))).collect();
    let csv = fs::read_to_string(dir.path().join("eval/metrics_quarterly.csv")).unwrap();
    let csv_periods: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    let layout_ok = layout == expected && csv_periods.len() == 9;
    verdict(
        phases_ok && layout_ok,
        format!("1996-2022 phase years {sizes:?} == [14, 6, 20, 7]; quarterly rows {}", layout.join(" ")),
    )
}

fn identical_trees(a: &Path, b: &Path) -> Result<usize, String> {
    let files = tree(a);
    if files != tree(b) {
        return Err("different file sets".into());
    }
    for f in &files {
        if fs::read(a.join(f)).unwrap() != fs::read(b.join(f)).unwrap() {
            return Err(format!("{} differs", f.display()));
        }
    }
    Ok(files.len())
}

fn determinism() -> Check {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    cmd_train(&tiny_config(a.path(), 21)).map_err(|e| format!("{e:#}"))?;
    cmd_train(&tiny_config(b.path(), 21)).map_err(|e| format!("{e:#}"))?;
    let n = identical_trees(&a.path().join("models"), &b.path().join("models"))?;
    Ok(format!("{n} checkpoint files byte-identical across two runs"))
}
