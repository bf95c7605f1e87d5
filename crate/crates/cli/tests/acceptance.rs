//! One pass/fail line per acceptance criterion. Run with `--nocapture` to see
//! the table; the test fails if any line fails.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use segflow::adapt::{estimate, j_functional, optimal_anisotropy, AdaptConfig, MetricAdapter};
use segflow::bregman::{shrink, InitShape};
use segflow::fem::{assemble_mass, assemble_stiffness, step_a_solve, ScalarFieldP1, VectorFieldP0};
use segflow::imageio::{add_noise, save_image, GreyImage, NoiseKind, NoiseSpec};
use segflow::mesh::{build_uniform_mesh, mesh_stats, TriMesh};
use segflow::synthetic::{disk_image, disk_mask, mask_image, square_mask, variance_square_image};
use segflow::tensor::{norm, sub, Mat2, Sym2};
use segflow_cli::commands::{cmd_segment, validate_manifest, Cli, Command, RunSummary};

struct Line {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn line(id: u32, name: &'static str, pass: bool, detail: String) -> Line {
    Line {
        id,
        name,
        pass,
        detail,
    }
}

fn secs(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

/// Largest `η_K / ‖∇φ‖` for a globally linear `φ` on `mesh`.
fn linear_eta(mesh: &TriMesh) -> f64 {
    let (a, b) = (0.37, -1.21);
    let phi = ScalarFieldP1::from_fn(mesh, |p| a * p[0] + b * p[1] + 0.5);
    let est = estimate(mesh, &phi).unwrap();
    let grad = (a * a + b * b).sqrt();
    est.eta_k2
        .iter()
        .map(|e| e.max(0.0).sqrt())
        .fold(0.0, f64::max)
        / grad
}

fn criterion_1() -> Line {
    let t = Instant::now();
    let uniform = build_uniform_mesh(16, 16, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let moved: Vec<_> = uniform
        .vertices()
        .iter()
        .map(|p| {
            let interior = p[0] > 0.0 && p[0] < 16.0 && p[1] > 0.0 && p[1] < 16.0;
            if interior {
                [
                    p[0] + rng.random_range(-0.3..0.3),
                    p[1] + rng.random_range(-0.3..0.3),
                ]
            } else {
                *p
            }
        })
        .collect();
    let perturbed = TriMesh::new(16.0, 16.0, moved, uniform.triangles().to_vec()).unwrap();
    let base = build_uniform_mesh(16, 16, 1.0).unwrap();
    let circle = InitShape::Circle {
        cx: 8.0,
        cy: 8.0,
        r: 4.0,
    }
    .level_set(&base, 1.0);
    let (adapted, _) = MetricAdapter::new(AdaptConfig::default())
        .unwrap()
        .adapt_mesh(&base, &circle)
        .unwrap();
    let worst = [&uniform, &perturbed, &adapted]
        .iter()
        .map(|m| linear_eta(m))
        .fold(0.0, f64::max);
    let dt = secs(t);
    line(
        1,
        "estimator exactness",
        worst <= 1e-12 && dt < 1.0,
        format!(
            "max eta_K/|grad| = {worst:.2e} over 3 meshes ({} adapted elements), {dt:.2}s",
            adapted.n_elements()
        ),
    )
}

fn criterion_2() -> Line {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_gap, mut beaten) = (0.0f64, 0usize);
    for _ in 0..100 {
        let a: [f64; 4] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
        let g = Mat2([[a[0], a[1]], [a[2], a[3]]]).gram_rows() + Sym2::scaled_identity(1e-3);
        let area = rng.random_range(0.5..4.0);
        let opt = optimal_anisotropy(&g, area);
        let best = j_functional(&g, area, opt.s, opt.r1, opt.r2);
        worst_gap = worst_gap.max((best - 2.0 * (opt.theta[0] * opt.theta[1]).sqrt()).abs());
        for _ in 0..1000 {
            let s = 10f64.powf(rng.random_range(0.0..3.0));
            let th: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let j = j_functional(&g, area, s, [th.cos(), th.sin()], [-th.sin(), th.cos()]);
            if j < best {
                beaten += 1;
            }
        }
    }
    let dt = secs(t);
    line(
        2,
        "optimal anisotropy",
        worst_gap <= 1e-10 && beaten == 0 && dt < 5.0,
        format!("max |J - 2 sqrt(th1 th2)| = {worst_gap:.2e}, samples below optimum = {beaten}, {dt:.2}s"),
    )
}

fn criterion_3() -> Line {
    // unit square split into the unit right triangle (0,1,2) and (1,3,2);
    // each element contributes area/12·(1 + δ_ij) to the mass and the
    // hand-computed gradient products to the stiffness
    let mesh = TriMesh::new(
        1.0,
        1.0,
        vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]],
        vec![[0, 1, 2], [1, 3, 2]],
    )
    .unwrap();
    let (d, o) = (1.0 / 12.0, 1.0 / 24.0);
    let mass = [
        [d, o, o, 0.0],
        [o, 2.0 * d, 2.0 * o, o],
        [o, 2.0 * o, 2.0 * d, o],
        [0.0, o, o, d],
    ];
    let stiff = [
        [1.0, -0.5, -0.5, 0.0],
        [-0.5, 1.0, 0.0, -0.5],
        [-0.5, 0.0, 1.0, -0.5],
        [0.0, -0.5, -0.5, 1.0],
    ];
    let (m, a) = (assemble_mass(&mesh), assemble_stiffness(&mesh));
    let mut err = 0.0f64;
    for i in 0..4 {
        for j in 0..4 {
            err = err.max((m.get(i, j) - mass[i][j]).abs());
            err = err.max((a.get(i, j) - stiff[i][j]).abs());
        }
    }
    let big = build_uniform_mesh(32, 32, 0.7).unwrap();
    let kb = assemble_stiffness(&big);
    let row_sum = (0..kb.dim())
        .map(|i| kb.row(i).map(|(_, v)| v).sum::<f64>().abs())
        .fold(0.0, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = VectorFieldP0 {
        values: (0..big.n_elements())
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect(),
    };
    let c = ScalarFieldP1::constant(&big, 0.3);
    let out = step_a_solve(
        &big,
        &c,
        &vec![0.0; big.n_elements()],
        &w,
        &w,
        1.0,
        0.07,
        1.0,
    )
    .unwrap();
    let drift = out
        .values
        .iter()
        .map(|v| (v - 0.3).abs())
        .fold(0.0, f64::max);
    line(
        3,
        "fem correctness",
        err <= 1e-14 && row_sum <= 1e-12 && drift <= 1e-10,
        format!("matrix error {err:.1e}, max |row sum| {row_sum:.1e}, constant drift {drift:.1e}"),
    )
}

/// Writes `img`, its reference mask and an optional config into `dir`.
fn stage(dir: &Path, name: &str, img: &GreyImage, truth: &GreyImage, config: &str) {
    fs::create_dir_all(dir).unwrap();
    save_image(img, dir.join(format!("{name}.pgm"))).unwrap();
    save_image(truth, dir.join(format!("{name}_truth.pgm"))).unwrap();
    fs::write(dir.join(format!("{name}.json")), config).unwrap();
}

struct CliRun {
    summary: Option<RunSummary>,
    exit: i32,
    manifest: Value,
    secs: f64,
}

/// Runs `segflow segment` through the argument parser.
fn segment(dir: &Path, name: &str, out: &str, extra: &[&str]) -> CliRun {
    let img = dir.join(format!("{name}.pgm"));
    let truth = dir.join(format!("{name}_truth.pgm"));
    let cfg = dir.join(format!("{name}.json"));
    let out_dir = dir.join(out);
    let mut args: Vec<String> = vec!["segflow".into(), "segment".into()];
    for (k, v) in [
        ("--image", &img),
        ("--reference-mask", &truth),
        ("--config", &cfg),
        ("--out-dir", &out_dir),
    ] {
        args.push(k.into());
        args.push(v.display().to_string());
    }
    args.extend(extra.iter().map(|s| s.to_string()));
    let Command::Segment(a) = <Cli as clap::Parser>::try_parse_from(&args)
        .unwrap()
        .command
    else {
        unreachable!()
    };
    let t = Instant::now();
    let result = cmd_segment(&a);
    let secs = secs(t);
    let exit = result.as_ref().map(|_| 0).unwrap_or_else(|e| e.exit_code());
    let manifest = fs::read_to_string(out_dir.join("manifest.json"))
        .ok()
        .and_then(|s| serde_json::from_str(&s).ok())
        .unwrap_or(Value::Null);
    CliRun {
        summary: result.ok(),
        exit,
        manifest,
        secs,
    }
}

fn dice_of(r: &CliRun) -> f64 {
    r.manifest["result"]["dice"].as_f64().unwrap_or(0.0)
}

fn converged(r: &CliRun) -> bool {
    r.manifest["result"]["converged"].as_bool().unwrap_or(false)
}

fn iterations(r: &CliRun) -> u64 {
    r.manifest["result"]["iterations"]
        .as_u64()
        .unwrap_or(u64::MAX)
}

/// `φ` stays inside `[−α, α]` after every iteration.
fn phi_bounded(r: &CliRun) -> bool {
    r.summary.as_ref().is_some_and(|s| {
        s.state
            .history
            .iter()
            .all(|h| h.phi_min >= -1.0 && h.phi_max <= 1.0)
    })
}

fn mesh_safe(m: &TriMesh) -> Result<(), String> {
    let rebuilt = TriMesh::new(
        m.width(),
        m.height(),
        m.vertices().to_vec(),
        m.triangles().to_vec(),
    )
    .map_err(|e| e.to_string())?;
    let area = m.width() * m.height();
    let rel = ((rebuilt.total_area() - area) / area).abs();
    if rel > 1e-8 {
        return Err(format!("area error {rel:.1e}"));
    }
    if rebuilt.areas().iter().any(|&a| a <= 0.0) {
        return Err("inverted element".into());
    }
    let s = mesh_stats(&rebuilt).max_stretching;
    if s > 1000.0 {
        return Err(format!("stretching {s}"));
    }
    Ok(())
}

const DISK_INIT: [&str; 5] = ["--init", "circle", "32", "32", "10"];

#[test]
fn acceptance() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let mut lines = vec![criterion_1(), criterion_2(), criterion_3()];

    let disk_truth = mask_image(&disk_mask());
    stage(
        dir,
        "disk",
        &disk_image(),
        &disk_truth,
        r#"{"mesh_spacing": 0.5}"#,
    );
    let split = segment(
        dir,
        "disk",
        "disk_split",
        &[&DISK_INIT[..], &["--adapt", "off"]].concat(),
    );
    let adapt = segment(
        dir,
        "disk",
        "disk_adapt",
        &[&DISK_INIT[..], &["--adapt", "on"]].concat(),
    );
    let uniform_n = 2 * 128 * 128;
    let n_el = adapt.manifest["result"]["n_el"]
        .as_u64()
        .unwrap_or(u64::MAX);
    let split_ok = split.exit == 0
        && converged(&split)
        && iterations(&split) <= 50
        && dice_of(&split) >= 0.95
        && split.secs < 60.0;
    let adapt_ok = adapt.exit == 0
        && converged(&adapt)
        && dice_of(&adapt) >= 0.95
        && n_el * 10 <= uniform_n * 6
        && adapt.secs < 60.0;
    lines.push(line(
        4,
        "disk validation analogue",
        split_ok && adapt_ok,
        format!(
            "split: k {} dice {:.4} {:.1}s | split-adapt: converged {} k {} dice {:.4} n_el {n_el}/{uniform_n} {:.1}s",
            iterations(&split), dice_of(&split), split.secs,
            converged(&adapt), iterations(&adapt), dice_of(&adapt), adapt.secs
        ),
    ));

    let t5 = Instant::now();
    let vsq_truth = mask_image(&square_mask());
    stage(
        dir,
        "vsq",
        &variance_square_image(42),
        &vsq_truth,
        r#"{"mesh_spacing": 1, "max_iters": 200}"#,
    );
    let bayes = segment(
        dir,
        "vsq",
        "vsq_bayes",
        &["--init", "circle", "32", "32", "10"],
    );
    fs::write(
        dir.join("vsq.json"),
        r#"{"mesh_spacing": 1, "max_iters": 500, "model": "rsfe"}"#,
    )
    .unwrap();
    let rsfe = segment(
        dir,
        "vsq",
        "vsq_rsfe",
        &["--init", "circle", "32", "32", "10"],
    );
    let dt5 = secs(t5);
    let rsfe_fails = dice_of(&rsfe) < 0.90 || !converged(&rsfe);
    lines.push(line(
        5,
        "spatial-information analogue",
        dice_of(&bayes) >= 0.90 && iterations(&bayes) <= 200 && rsfe_fails && dt5 < 180.0,
        format!(
            "bayes: k {} dice {:.4} | rsfe: converged {} k {} dice {:.4} | {dt5:.1}s",
            iterations(&bayes),
            dice_of(&bayes),
            converged(&rsfe),
            iterations(&rsfe),
            dice_of(&rsfe)
        ),
    ));

    let t6 = Instant::now();
    let mut noisy = Vec::new();
    for (kind, level, tag) in [
        (NoiseKind::Gaussian, 0.1, "gaussian"),
        (NoiseKind::SaltPepper, 0.05, "salt_pepper"),
        (NoiseKind::Speckle, 0.01, "speckle"),
    ] {
        let img = add_noise(&disk_image(), &NoiseSpec::new(kind, level, 42).unwrap()).unwrap();
        stage(dir, tag, &img, &disk_truth, r#"{"mesh_spacing": 0.5}"#);
        noisy.push((
            tag,
            segment(
                dir,
                tag,
                tag,
                &[&DISK_INIT[..], &["--adapt", "on"]].concat(),
            ),
        ));
    }
    let dt6 = secs(t6);
    lines.push(line(
        6,
        "noise robustness",
        noisy.iter().all(|(_, r)| dice_of(r) >= 0.90) && dt6 < 180.0,
        noisy
            .iter()
            .map(|(t, r)| format!("{t} dice {:.4}", dice_of(r)))
            .chain([format!("{dt6:.1}s")])
            .collect::<Vec<_>>()
            .join(" | "),
    ));

    let examples = {
        let s = shrink([3.0, 4.0], 2.0);
        (s[0] - 1.8).abs() < 1e-15
            && (s[1] - 2.4).abs() < 1e-15
            && shrink([0.0, 0.0], 1.0) == [0.0, 0.0]
            && shrink([0.3, 0.4], 1.0) == [0.0, 0.0]
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut expansive = 0usize;
    for _ in 0..1_000_000 {
        let f = [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)];
        let h = [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)];
        let g = rng.random_range(0.0..5.0);
        if norm(sub(shrink(f, g), shrink(h, g))) > norm(sub(f, h)) + 1e-12 {
            expansive += 1;
        }
    }
    let runs: Vec<&CliRun> = [&split, &adapt, &bayes, &rsfe]
        .into_iter()
        .chain(noisy.iter().map(|(_, r)| r))
        .collect();
    let bounded = runs.iter().all(|r| phi_bounded(r));
    lines.push(line(
        7,
        "shrinkage and bregman algebra",
        examples && expansive == 0 && bounded,
        format!("examples {examples}, expansive pairs {expansive}/1000000, phi bounded in all {} runs {bounded}", runs.len()),
    ));

    let mut checked = 0;
    let mut failures = Vec::new();
    for r in [&adapt].into_iter().chain(noisy.iter().map(|(_, r)| r)) {
        match &r.summary {
            None => failures.push("run failed".to_string()),
            Some(s) => {
                for m in &s.state.adapted_meshes {
                    checked += 1;
                    if let Err(e) = mesh_safe(m) {
                        failures.push(e);
                    }
                }
                if s.state.remesh_warnings > 0 {
                    failures.push(format!("{} remesh warnings", s.state.remesh_warnings));
                }
            }
        }
    }
    lines.push(line(
        8,
        "remesher safety",
        checked > 0 && failures.is_empty(),
        format!("{checked} adapted meshes checked, failures {failures:?}"),
    ));

    let again = segment(
        dir,
        "disk",
        "disk_adapt_again",
        &[&DISK_INIT[..], &["--adapt", "on"]].concat(),
    );
    let same = |f: &str| {
        let a = fs::read(dir.join("disk_adapt").join(f)).ok();
        a.is_some() && a == fs::read(dir.join("disk_adapt_again").join(f)).ok()
    };
    let manifests_ok = [&split, &adapt, &again]
        .iter()
        .all(|r| validate_manifest(&r.manifest).is_ok());
    lines.push(line(
        9,
        "determinism",
        again.exit == 0 && same("mask.pgm") && same("log.csv") && manifests_ok,
        format!(
            "mask.pgm identical {}, log.csv identical {}, manifests valid {manifests_ok}",
            same("mask.pgm"),
            same("log.csv")
        ),
    ));

    println!();
    for l in &lines {
        println!(
            "criterion {}: {} | {} | {}",
            l.id,
            if l.pass { "PASS" } else { "FAIL" },
            l.name,
            l.detail
        );
    }
    let failed: Vec<u32> = lines.iter().filter(|l| !l.pass).map(|l| l.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
