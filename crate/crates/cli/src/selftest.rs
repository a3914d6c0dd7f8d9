//! A quick invariant suite over the library, runnable from the binary.

use std::f64::consts::PI;

use nelf::envmap::{rotate, row_solid_angles, EnvironmentMap, RotationOp};
use nelf::nelf::{read_checkpoint, write_checkpoint, AdamState, Architecture, NelfParams};
use nelf::pipeline::gradcheck::gradient_check;
use nelf::pipeline::metrics::{psnr, ssim, PSNR_CAP};
use nelf::transport::{bake_transport_image, reference_render, relight_image, BakeOptions};
use nelf::volrender::composite;
use nelf::{AnalyticScene, Camera, RgbImage, Sphere, Vec3};
use serde::Serialize;

use crate::config::RunConfig;
use crate::manifest::Manifest;
use crate::CliError;

#[derive(Debug, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, value: f64, bound: f64) -> Check {
    Check {
        name,
        passed: value.is_finite() && value <= bound,
        detail: format!("{value:.3e} (bound {bound:.0e})"),
    }
}

fn quadrature() -> Check {
    let total: f64 = row_solid_angles(8, 16).iter().sum::<f64>() * 16.0;
    check(
        "solid angles cover the sphere",
        (total - 4.0 * PI).abs(),
        1e-12,
    )
}

fn rotation_round_trip() -> Check {
    let env = EnvironmentMap::from_fn(8, 16, |d| [1.0 + d.x, 1.0 + d.y, 1.0 + d.z]);
    let quarter = RotationOp::about_y(PI / 2.0);
    let mut back = env.clone();
    for _ in 0..4 {
        back = rotate(&back, &quarter);
    }
    let err = env
        .as_slice()
        .iter()
        .zip(back.as_slice())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    check("four quarter turns are the identity", err, 1e-12)
}

fn relight_matches_reference() -> Check {
    let scene = AnalyticScene::new(vec![
        Sphere::diffuse([0.0, 0.0, 0.0], 0.12, [0.7, 0.5, 0.3]),
        Sphere::diffuse([0.1, 0.1, 0.05], 0.06, [0.2, 0.6, 0.8]),
    ])
    .expect("valid spheres");
    let cam = Camera::look_at(
        Vec3::new(0.3, 0.2, 1.2),
        Vec3::zeros(),
        Vec3::y(),
        40.0,
        40.0,
        24,
        24,
    );
    let env = EnvironmentMap::from_fn(8, 16, |d| {
        [0.5 + 0.4 * d.y.max(0.0), 0.3 + 0.2 * d.x.abs(), 0.4]
    });
    let opts = BakeOptions::default();
    let a = relight_image(&bake_transport_image(&scene, &cam, &opts), &env);
    let b = reference_render(&scene, &cam, &env, &opts);
    let err = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    check("relit transport equals the reference render", err, 1e-10)
}

fn compositing_weights() -> Check {
    let sigma = [0.0, 3.0, 40.0, 500.0, 2.0];
    let u: Vec<f64> = (0..5).map(|i| 1.0 + 0.1 * i as f64).collect();
    let out = composite(&sigma, &[[1.0; 3]; 5], &u, &[0.1; 5]);
    let err = (out.rgb[0] - out.alpha).abs() + (out.alpha - 1.0).max(0.0);
    check("white radiance composites to alpha", err, 1e-12)
}

fn gradients() -> Check {
    let g = gradient_check(0, 1e-5);
    check(
        "analytic gradients match central differences",
        g.relative_error,
        1e-4,
    )
}

fn checkpoint_round_trip() -> Check {
    let arch = Architecture {
        hidden: 8,
        geometry_dim: 6,
        env_height: 2,
        env_width: 4,
        ..Default::default()
    };
    let params = NelfParams::init(arch, 7).expect("valid architecture");
    let adam = AdamState::new(params.len());
    let mut bytes = Vec::new();
    let ok = write_checkpoint(&mut bytes, &params, Some(&adam)).is_ok()
        && matches!(read_checkpoint(bytes.as_slice()), Ok((p, Some(a))) if p == params && a == adam);
    Check {
        name: "checkpoint round trip is exact",
        passed: ok,
        detail: format!("{} bytes", bytes.len()),
    }
}

fn metric_identities() -> Check {
    let img = RgbImage::from_fn(16, 16, |c, r| [c as f64 / 16.0, r as f64 / 16.0, 0.5]);
    let (p, s) = (psnr(&img, &img), ssim(&img, &img));
    let passed = matches!((p, s), (Ok(p), Ok(s)) if p == PSNR_CAP && (s - 1.0).abs() < 1e-12);
    Check {
        name: "identical images score the metric maxima",
        passed,
        detail: String::new(),
    }
}

/// Runs every check in order.
pub fn checks() -> Vec<Check> {
    vec![
        quadrature(),
        rotation_round_trip(),
        relight_matches_reference(),
        compositing_weights(),
        gradients(),
        checkpoint_round_trip(),
        metric_identities(),
    ]
}

pub fn run(cfg: &RunConfig) -> Result<(), CliError> {
    let results = checks();
    for c in &results {
        println!(
            "{} {}  {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    if let Some(out) = &cfg.out {
        std::fs::create_dir_all(out)
            .map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
        let mut m = Manifest::new("selftest", cfg);
        m.summary = serde_json::to_value(&results).expect("checks serialize");
        m.write(out)?;
    }
    let failed: Vec<_> = results
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.name)
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "self-test failed: {}",
            failed.join(", ")
        )))
    }
}
