use segflow::adapt::{max_stretching, run_split_adapt_bregman, AdaptConfig};
use segflow::bregman::{run_split_bregman, InitShape, SolverConfig};
use segflow::energy::classify_pixels;
use segflow::imageio::{add_noise, NoiseKind, NoiseSpec};
use segflow::mesh::{build_uniform_mesh, mesh_stats};
use segflow::synthetic::{dice, disk_image, disk_mask};

fn disk_init(mesh: &segflow::mesh::TriMesh) -> segflow::fem::ScalarFieldP1 {
    InitShape::Circle {
        cx: 32.0,
        cy: 32.0,
        r: 10.0,
    }
    .level_set(mesh, 1.0)
}

#[test]
fn split_bregman_segments_disk() {
    let mesh = build_uniform_mesh(64, 64, 0.5).unwrap();
    let img = disk_image();
    let st = run_split_bregman(&SolverConfig::default(), &img, &mesh, &disk_init(&mesh)).unwrap();
    assert!(st.converged && st.k <= 50, "k = {}", st.k);
    let d = dice(&classify_pixels(&st.mesh, &st.phi, &img), &disk_mask());
    assert!(d >= 0.95, "dice {d}");
    assert!(st
        .history
        .iter()
        .all(|r| r.phi_min >= -1.0 && r.phi_max <= 1.0));
}

#[test]
fn split_adapt_coarsens_and_segments_disk() {
    let mesh = build_uniform_mesh(64, 64, 0.5).unwrap();
    let img = disk_image();
    let (st, ad) = run_split_adapt_bregman(
        &SolverConfig::default(),
        &AdaptConfig::default(),
        &img,
        &mesh,
        &disk_init(&mesh),
    )
    .unwrap();
    assert!(st.converged);
    assert!(ad.events() >= 1);
    let d = dice(&classify_pixels(&st.mesh, &st.phi, &img), &disk_mask());
    assert!(d >= 0.95, "dice {d}");
    assert!(st.mesh.n_elements() * 10 <= mesh.n_elements() * 6);
    for m in &st.adapted_meshes {
        assert!(((m.total_area() - 4096.0) / 4096.0).abs() < 1e-8);
        assert!(mesh_stats(m).max_stretching <= 1000.0);
    }
    assert!(max_stretching(&ad.last_metric.unwrap().tensors) <= 1000.0 * (1.0 + 1e-9));
}

#[test]
fn split_adapt_handles_salt_and_pepper() {
    let mesh = build_uniform_mesh(64, 64, 0.5).unwrap();
    let img = add_noise(
        &disk_image(),
        &NoiseSpec::new(NoiseKind::SaltPepper, 0.05, 42).unwrap(),
    )
    .unwrap();
    let (st, _) = run_split_adapt_bregman(
        &SolverConfig::default(),
        &AdaptConfig::default(),
        &img,
        &mesh,
        &disk_init(&mesh),
    )
    .unwrap();
    let d = dice(&classify_pixels(&st.mesh, &st.phi, &img), &disk_mask());
    assert!(d >= 0.90, "dice {d}");
}

#[test]
fn huge_n_breg_adapts_only_at_start() {
    let mesh = build_uniform_mesh(64, 64, 1.0).unwrap();
    let img = disk_image();
    let cfg = AdaptConfig {
        n_breg: 10_000,
        ..AdaptConfig::default()
    };
    let (st, ad) = run_split_adapt_bregman(
        &SolverConfig::default(),
        &cfg,
        &img,
        &mesh,
        &disk_init(&mesh),
    )
    .unwrap();
    assert_eq!(ad.events(), 1);
    assert!(st.history[0].adapted);
    assert!(st.history[1..].iter().all(|r| !r.adapted));
}
