//! Acceptance suite. Every test prints exactly one `[PASS]` or `[FAIL]`
//! line (visible with `--nocapture`, and in the failure report otherwise)
//! before asserting.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uags_core::dataio::synth::{synth_scene, SynthSpec};
use uags_core::dataio::SceneBundle;
use uags_core::deformation::{DeformationField, FieldConfig, DEFORM_OUT, PLANES};
use uags_core::densify::{densify_scene, DensifyConfig};
use uags_core::evalsuite::psnr;
use uags_core::fixtures::{front_camera, random_field, random_gaussians, small_field_config, two_cluster_scene};
use uags_core::math::Vec3;
use uags_core::raster::{render, render_backward, render_oracle, Channels, PixelGrads, RenderOptions};
use uags_core::scene::{Camera, Gaussian, Intrinsics};
use uags_core::trainer::{primitives_from_cloud, refine::IdentityRefiner, Model, TrainConfig, Trainer, TvWeighting};
use uags_core::uncertainty::{refresh_uncertainty, UncertaintyParams};

fn report(name: &str, pass: bool, detail: String) {
    println!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{name}: {detail}");
}

fn random_scene(r: &mut ChaCha8Rng, max_prims: usize) -> (Vec<Gaussian<f64>>, Option<DeformationField<f64>>) {
    let n = r.gen_range(1..=max_prims);
    let prims = random_gaussians(r, n);
    let field = r.gen_bool(0.5).then(|| random_field(r, small_field_config(), 0.3));
    (prims, field)
}

#[test]
fn rasterizer_matches_oracle() {
    let start = Instant::now();
    let mut r = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst32, mut worst64) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let (prims, field) = random_scene(&mut r, 100);
        let t0 = r.gen_range(0.0..1.0);
        let cam = front_camera(32, 32, t0);
        let mut cam2 = front_camera(32, 32, r.gen_range(0.0..1.0));
        cam2.translation[0] += r.gen_range(-0.2..0.2);
        let bg = [r.gen_range(0.0..1.0), r.gen_range(0.0..1.0), r.gen_range(0.0..1.0)];
        let opts = RenderOptions { background: bg, ..RenderOptions::exact() };

        let (out, _) = render(&prims, field.as_ref(), &cam, Some(&cam2), &opts).unwrap();
        let oracle = render_oracle(&prims, field.as_ref(), &cam, Some(&cam2), bg, 1).unwrap();
        worst64 = worst64.max(out.max_abs_diff(&oracle));

        let p32: Vec<Gaussian<f32>> = prims.iter().map(|p| p.cast()).collect();
        let f32field = field.as_ref().map(|f| f.cast::<f32>());
        let (c32, c232): (Camera<f32>, Camera<f32>) = (cam.cast(), cam2.cast());
        let (out, _) = render(&p32, f32field.as_ref(), &c32, Some(&c232), &opts).unwrap();
        let oracle = render_oracle(&p32, f32field.as_ref(), &c32, Some(&c232), bg, 1).unwrap();
        worst32 = worst32.max(out.cast::<f64>().max_abs_diff(&oracle));
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        "rasterizer == oracle (200 scenes, all channels)",
        worst32 < 1e-5 && worst64 < 1e-10 && secs < 60.0,
        format!("max |d| f32 {worst32:.2e} (< 1e-5), f64 {worst64:.2e} (< 1e-10), {secs:.1} s (< 60 s)"),
    );
}

/// Splits deformation parameters into hexplane grids and decoder weights.
fn field_classes(field: &DeformationField<f64>) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let l = &field.layout;
    (l.planes[0]..l.w1, l.w1..l.len)
}

#[test]
fn gradients_match_finite_differences() {
    let start = Instant::now();
    let mut r = ChaCha8Rng::seed_from_u64(77);
    let names = ["mean", "rotation", "scale", "opacity", "sh", "hexplane", "decoder"];
    let mut worst = [0.0f64; 7];
    let scenes = 20;
    for _ in 0..scenes {
        let n = r.gen_range(2..=5);
        let prims = random_gaussians(&mut r, n);
        let field = random_field(&mut r, small_field_config(), 0.3);
        let (w, h) = (14, 12);
        let mut cam = front_camera(w, h, r.gen_range(0.05..0.95));
        cam.fx = 12.0;
        cam.fy = 12.0;
        let mut cam2 = cam.with_time(r.gen_range(0.05..0.95));
        cam2.translation[1] += 0.1;
        let opts = RenderOptions { background: [0.2, 0.4, 0.6], ..RenderOptions::exact() };

        // random linear functional of every output channel
        let npx = w * h;
        let mut weights = |len: usize| -> Vec<f64> { (0..len).map(|_| r.gen_range(-1.0..1.0)).collect() };
        let grads = PixelGrads {
            color: Some(weights(3 * npx)),
            depth: Some(weights(npx)),
            flow: Some(weights(2 * npx)),
            uncertainty: Some(weights(npx)),
            alpha: Some(weights(npx)),
        };
        let loss = |p: &[Gaussian<f64>], f: &DeformationField<f64>| -> f64 {
            let (o, _) = render(p, Some(f), &cam, Some(&cam2), &opts).unwrap();
            let dot = |a: &[f64], b: &Option<Vec<f64>>| a.iter().zip(b.as_ref().unwrap()).map(|(x, y)| x * y).sum::<f64>();
            dot(&o.color, &grads.color)
                + dot(&o.depth, &grads.depth)
                + dot(&o.flow, &grads.flow)
                + dot(&o.uncertainty, &grads.uncertainty)
                + dot(&o.alpha, &grads.alpha)
        };
        let (_, state) = render(&prims, Some(&field), &cam, Some(&cam2), &opts).unwrap();
        let g = render_backward(&prims, Some(&field), &cam, Some(&cam2), &state, &grads, true).unwrap();

        let eps = 1e-6;
        let mut acc = [(0.0f64, 0.0f64); 7];
        for k in 0..prims.len() {
            for j in 0..Gaussian::<f64>::NUM_PARAMS {
                let mut a = prims.clone();
                let mut v = a[k].params();
                v[j] += eps;
                a[k].set_params(&v);
                let up = loss(&a, &field);
                v[j] -= 2.0 * eps;
                a[k].set_params(&v);
                let fd = (up - loss(&a, &field)) / (2.0 * eps);
                let class = match j {
                    0..=2 => 0,
                    3..=6 => 1,
                    7..=9 => 2,
                    10 => 3,
                    _ => 4,
                };
                acc[class].0 += (g.prims[k][j] - fd).powi(2);
                acc[class].1 += fd * fd;
            }
        }
        let (grid, decoder) = field_classes(&field);
        for (class, range) in [(5, grid), (6, decoder)] {
            for i in range {
                let mut f = field.clone();
                f.params[i] += eps;
                let up = loss(&prims, &f);
                f.params[i] -= 2.0 * eps;
                let fd = (up - loss(&prims, &f)) / (2.0 * eps);
                acc[class].0 += (g.field[i] - fd).powi(2);
                acc[class].1 += fd * fd;
            }
        }
        for c in 0..7 {
            worst[c] = worst[c].max(acc[c].0.sqrt() / acc[c].1.sqrt().max(1e-12));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let max = worst.iter().cloned().fold(0.0, f64::max);
    let detail: Vec<String> = names.iter().zip(&worst).map(|(n, e)| format!("{n} {e:.1e}")).collect();
    report(
        "gradient suite (20 micro-scenes, float64 central differences)",
        max < 1e-4 && secs < 300.0,
        format!("worst relative error per class: {} (< 1e-4), {secs:.1} s", detail.join(", ")),
    );
}

#[test]
fn blending_conserves_opacity() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (prims, field) = random_scene(&mut r, 100);
        let cam = front_camera(32, 32, r.gen_range(0.0..1.0));
        let (out, state) = render(&prims, field.as_ref(), &cam, None, &RenderOptions::exact()).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let t: f64 = state.splats.splats.iter().map(|s| 1.0 - s.alpha_at(px, py).0).product();
                worst = worst.max((out.alpha[y * 32 + x] + t - 1.0).abs());
            }
        }
    }
    report(
        "blending conservation (50 scenes, A + T = 1)",
        worst < 1e-6,
        format!("max |A + T - 1| = {worst:.2e} (< 1e-6)"),
    );
}

#[test]
fn uncertainty_separates_observed_and_unobserved() {
    let s = two_cluster_scene();
    let mut prims = s.prims.clone();
    let params = UncertaintyParams::for_views(s.train.len());
    refresh_uncertainty(&mut prims, None, &s.train, params, &RenderOptions::default()).unwrap();
    let mean = |idx: &[usize]| idx.iter().map(|&i| prims[i].uncertainty).sum::<f64>() / idx.len() as f64;
    let (u_obs, u_unobs) = (mean(&s.observed), mean(&s.unobserved));

    let opts = RenderOptions::default();
    let (full, _) = render(&prims, None, &s.unseen, None, &opts).unwrap();
    let alone = |idx: &[usize]| {
        let sub: Vec<Gaussian<f64>> = idx.iter().map(|&i| prims[i].clone()).collect();
        render(&sub, None, &s.unseen, None, &opts).unwrap().0.alpha
    };
    let (a_obs, a_unobs) = (alone(&s.observed), alone(&s.unobserved));
    let only: Vec<usize> = (0..a_obs.len()).filter(|&i| a_unobs[i] > 0.9 && a_obs[i] < 0.1).collect();
    let high = only.iter().filter(|&&i| full.uncertainty[i] >= 0.5).count();
    let frac = high as f64 / only.len().max(1) as f64;
    report(
        "uncertainty on the two-cluster scene",
        u_obs < 0.2 && u_unobs > 0.8 && !only.is_empty() && frac >= 0.9,
        format!(
            "mean U observed {u_obs:.3} (< 0.2), unobserved {u_unobs:.3} (> 0.8); rendered U >= 0.5 on {:.1}% of {} unobserved-only pixels (>= 90%)",
            100.0 * frac,
            only.len()
        ),
    );
}

fn mean_psnr(model: &Model, frames: &[uags_core::dataio::Frame]) -> f64 {
    frames
        .iter()
        .map(|f| psnr(&model.render_image(&f.camera).unwrap().data, &f.image.data, None).unwrap().unwrap())
        .sum::<f64>()
        / frames.len() as f64
}

/// Mean absolute depth error on pixels where the ground truth hits a surface.
fn depth_mae(model: &Model, frames: &[uags_core::dataio::Frame]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for f in frames {
        let ch = Channels { color: false, depth: true, flow: false, uncertainty: false };
        let (o, _) = model.render(&f.camera, None, ch).unwrap();
        for (d, gt) in o.depth.iter().zip(f.depth.as_ref().unwrap()) {
            if *gt > 0.0 {
                sum += (*d as f64 - *gt as f64).abs();
                n += 1;
            }
        }
    }
    sum / n as f64
}

fn selectivity_config() -> TrainConfig {
    let mut cfg = TrainConfig {
        iterations: 2000,
        ua_start: 1000,
        warmup: 200,
        cache_size: 20,
        cache_refresh: 500,
        uncertainty_refresh: 250,
        deformation: None,
        seed: 1,
        ..Default::default()
    };
    cfg.weights.ua_diff = 0.0;
    cfg.weights.ua_tv = 0.01;
    cfg.density.start = 200;
    cfg.density.stop = 1500;
    cfg.density.grad_threshold = 1e-3;
    cfg
}

fn train(scene: &SceneBundle, cfg: TrainConfig, extra: Vec<Gaussian<f32>>) -> Model {
    let mut init = primitives_from_cloud(scene.points.as_ref().unwrap(), cfg.init_opacity);
    init.extend(extra);
    let mut t = Trainer::new(scene, cfg, init, Box::new(IdentityRefiner)).unwrap();
    t.run(&mut std::io::sink()).unwrap();
    t.model
}

#[test]
fn ua_tv_is_selective() {
    let start = Instant::now();
    let scene = synth_scene(&SynthSpec::preset("three-frame").unwrap(), 0).unwrap();
    let base = selectivity_config();
    let mut none = base.clone();
    none.weights.ua_tv = 0.0;
    let mut uniform = base.clone();
    uniform.tv_weighting = TvWeighting::Uniform;
    let ua = base;
    let runs: Vec<Model> = [none, uniform, ua].into_iter().map(|c| train(&scene, c, vec![])).collect();
    let p: Vec<f64> = runs.iter().map(|m| mean_psnr(m, &scene.frames)).collect();
    let mae: Vec<f64> = runs.iter().map(|m| depth_mae(m, &scene.validation)).collect();
    let gap = p[0] - p[1];
    let recovered = (p[2] - p[1]) / gap;
    let secs = start.elapsed().as_secs_f64();
    report(
        "UA-TV selectivity (three-frame scene, 2000 iterations)",
        gap > 0.0 && recovered >= 0.5 && mae[2] <= 1.05 * mae[1] && secs < 900.0,
        format!(
            "train PSNR none {:.3} / uniform {:.3} / UA {:.3} dB (gap {gap:.3}, recovered {:.0}% >= 50%); held-out depth MAE uniform {:.4} / UA {:.4} (<= +5%); {secs:.0} s",
            p[0],
            p[1],
            p[2],
            100.0 * recovered,
            mae[1],
            mae[2]
        ),
    );
}

#[test]
fn dynamic_densification_helps() {
    let spec = SynthSpec::preset("moving-quad").unwrap();
    let scene = synth_scene(&spec, 0).unwrap();
    let d = densify_scene(&scene, &DensifyConfig::default()).unwrap();
    let dynamic: Vec<usize> = spec.objects.iter().enumerate().filter(|(_, o)| !o.is_static()).map(|(i, _)| i).collect();
    let (mut on_dynamic, mut worst) = (0usize, 0.0f64);
    for (p, &(fi, x, y)) in d.prims.iter().zip(&d.pixels) {
        let cam = &scene.frames[fi].camera;
        let hit = spec.cast_pixel(cam, [x as f64 + 0.5, y as f64 + 0.5]);
        if let Some(h) = hit {
            if dynamic.contains(&h.object) {
                on_dynamic += 1;
            }
            worst = worst.max((p.mean - h.world).norm());
        } else {
            worst = f64::INFINITY;
        }
    }
    let all_dynamic = !d.prims.is_empty() && on_dynamic == d.prims.len();

    let cfg = TrainConfig {
        iterations: 500,
        ua_start: 500,
        warmup: 100,
        seed: 3,
        deformation: Some(Default::default()),
        ..Default::default()
    };
    let extra: Vec<Gaussian<f32>> = d.prims.iter().map(|g| g.cast()).collect();
    let static_only = train(&scene, cfg.clone(), vec![]);
    let with_dynamic = train(&scene, cfg, extra);
    let (ps, pd) = (mean_psnr(&static_only, &scene.validation), mean_psnr(&with_dynamic, &scene.validation));
    report(
        "dynamic densification (moving-quad)",
        all_dynamic && worst <= 1e-6 && pd >= ps + 3.0,
        format!(
            "{on_dynamic}/{} samples on the moving quad, max surface distance {worst:.1e} (<= 1e-6); held-out PSNR {ps:.2} -> {pd:.2} dB (>= +3 dB)",
            d.prims.len()
        ),
    );
}

/// Field translating everything by `shift * t^3` along x: space planes hold
/// 1 and time planes their grid time, so the fused feature is `t^3`.
fn translation_field(shift: f64) -> DeformationField<f64> {
    let cfg = FieldConfig { ..small_field_config() };
    let mut field = DeformationField::new(cfg.clone(), 0).unwrap();
    let f = cfg.feature_dim;
    for p in 0..6 {
        let (ru, rv) = cfg.plane_shape(p);
        for v in 0..rv {
            for u in 0..ru {
                let val = if PLANES[p].1 == 3 { v as f64 / (rv - 1) as f64 } else { 1.0 };
                let base = field.layout.planes[p] + (v * ru + u) * f;
                field.params[base..base + f].iter_mut().for_each(|x| *x = val);
            }
        }
    }
    let l = field.layout.clone();
    field.params[l.w1..l.b2 + DEFORM_OUT].iter_mut().for_each(|x| *x = 0.0);
    field.params[l.w1] = 1.0;
    field.params[l.w2] = shift;
    field
}

#[test]
fn rigid_translation_flow_and_depth() {
    // a wall of opaque primitives at depth 4 covering the whole frame
    let z = 4.0;
    let mut prims = Vec::new();
    for i in 0..81 {
        for j in 0..81 {
            let p = Vec3::new(-4.0 + 0.1 * i as f64, -4.0 + 0.1 * j as f64, 0.0);
            let mut g = Gaussian::from_point(p, [0.5, 0.3, 0.2], 0.08, 0.5);
            g.log_scale[2] = (1e-3f64).ln();
            g.opacity_logit = 6.0;
            prims.push(g);
        }
    }
    let intr = Intrinsics { fx: 20.0, fy: 20.0, cx: 16.0, cy: 16.0 };
    let cam = Camera::new(intr, uags_core::math::Mat3::identity(), Vec3::new(0.0, 0.0, z), 32, 32, 0.5).unwrap();
    let next = cam.with_time(1.0);
    let shift = 0.3;
    let field = translation_field(shift);
    let (out, _) = render(&prims, Some(&field), &cam, Some(&next), &RenderOptions::default()).unwrap();
    // the wall sits at x + shift * t^3; between t = 0.5 and 1 it moves 7/8 shift
    let flow_x = intr.fx * shift * (1.0 - 0.125) / z;
    let (mut n, mut worst_flow, mut worst_depth) = (0usize, 0.0f64, 0.0f64);
    for i in 0..out.num_pixels() {
        if out.alpha[i] > 0.9 {
            n += 1;
            let e = ((out.flow[2 * i] - flow_x).powi(2) + out.flow[2 * i + 1].powi(2)).sqrt();
            worst_flow = worst_flow.max(e);
            worst_depth = worst_depth.max((out.depth[i] - z).abs());
        }
    }
    report(
        "flow/depth on rigid translation",
        n == out.num_pixels() && worst_flow <= 0.1 && worst_depth <= 1e-3,
        format!(
            "{n}/{} pixels with A > 0.9; max flow error {worst_flow:.2e} px (<= 0.1), max depth error {worst_depth:.2e} (<= 1e-3)",
            out.num_pixels()
        ),
    );
}

fn uags(args: &[&str], cwd: &Path) {
    let out = Command::new(env!("CARGO_BIN_EXE_uags")).args(args).current_dir(cwd).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn end_to_end_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    uags(&["--seed", "7", "synth", "--preset", "one-ellipsoid", "--out", "scene"], p);
    for run in ["a", "b"] {
        uags(
            &[
                "--threads", "1", "--seed", "7", "train", "--refiner", "identity", "--scene", "scene", "--out", run,
                "--iterations", "200", "--ua-start", "100",
            ],
            p,
        );
    }
    let read = |run: &str, f: &str| std::fs::read(p.join(run).join(f)).unwrap();
    let logs = read("a", "train_log.jsonl") == read("b", "train_log.jsonl");
    let cks = read("a", "checkpoint.uags") == read("b", "checkpoint.uags");
    report(
        "end-to-end determinism (--threads 1 --seed 7, 200 iterations)",
        logs && cks,
        format!("logs identical: {logs}, checkpoints identical: {cks}"),
    );
}
