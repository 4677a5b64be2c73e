use gsvox::edc::{fit_fixed_count, EDCConfig};
use gsvox::gaussian::{Gaussian, GaussianCloud, IDENTITY_QUAT};
use gsvox::losses::{mse, psnr_from_mse};
use gsvox::raster::render;
use gsvox::scene::{orbit_cameras, perturbed_copies, render_views};
use nalgebra::Vector3;

fn two_gaussians() -> GaussianCloud {
    GaussianCloud::new(vec![
        Gaussian {
            position: Vector3::new(-0.3, 0.0, 0.0),
            rotation: IDENTITY_QUAT,
            log_scale: Vector3::new(-1.6, -2.0, -1.8),
            opacity_logit: 2.0,
            color: Vector3::new(0.9, 0.3, 0.2),
        },
        Gaussian {
            position: Vector3::new(0.35, 0.1, 0.1),
            rotation: [0.9, 0.3, 0.1, 0.2],
            log_scale: Vector3::new(-1.8, -1.5, -2.1),
            opacity_logit: 1.5,
            color: Vector3::new(0.2, 0.5, 0.9),
        },
    ])
}

#[test]
fn two_gaussian_scene_reaches_budget_and_quality() {
    let source = two_gaussians();
    let cams = orbit_cameras(8, 3.0, Vector3::zeros(), 40.0, 32, 32).unwrap();
    let views = render_views(&source, &cams);
    let init = perturbed_copies(&source, 6, 3);
    let cfg = EDCConfig {
        n_max: 64,
        max_iters: 1500,
        ..EDCConfig::default()
    };
    let fit = fit_fixed_count(&init, &views, &cfg).unwrap();
    assert_eq!(fit.cloud.len(), 64);
    assert_eq!(fit.initial_count, 6);
    assert!(fit.log.iter().all(|r| r.count <= 64));
    let m = views
        .iter()
        .map(|v| mse(&render(&fit.cloud, &v.camera).color, &v.color).unwrap())
        .sum::<f64>()
        / views.len() as f64;
    assert!(psnr_from_mse(m) >= 30.0, "psnr {}", psnr_from_mse(m));
    assert!(m < 1e-3);
}

#[test]
fn fit_rejects_empty_inputs() {
    let source = two_gaussians();
    assert!(fit_fixed_count(&source, &[], &EDCConfig::default()).is_err());
    let cams = orbit_cameras(1, 3.0, Vector3::zeros(), 40.0, 16, 16).unwrap();
    let views = render_views(&source, &cams);
    assert!(fit_fixed_count(&GaussianCloud::default(), &views, &EDCConfig::default()).is_err());
}

#[test]
fn fit_is_deterministic() {
    let source = two_gaussians();
    let cams = orbit_cameras(4, 3.0, Vector3::zeros(), 40.0, 24, 24).unwrap();
    let views = render_views(&source, &cams);
    let cfg = EDCConfig {
        n_max: 16,
        max_iters: 250,
        ..EDCConfig::default()
    };
    let a = fit_fixed_count(&source, &views, &cfg).unwrap();
    let b = fit_fixed_count(&source, &views, &cfg).unwrap();
    assert_eq!(a, b);
}
