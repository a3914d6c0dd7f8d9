use std::path::Path;

use nelf_cli::manifest::hash_path;
use nelf_cli::run;

fn nelf(args: &[&str]) -> i32 {
    run(std::iter::once("nelf").chain(args.iter().copied()))
}

const TINY: &str = r#"{"dataset": {"image_size": 16, "train_triplets": 2, "eval_triplets": 1},
    "train": {"rays_per_step": 4, "n_samples": 8},
    "arch": {"hidden": 8, "geometry_dim": 6, "posenc": {"bands": 2}},
    "eval": {"n_samples": 8}}"#;

fn tiny(dir: &Path) -> String {
    let cfg = dir.join("config.json");
    std::fs::write(&cfg, TINY).unwrap();
    let data = dir.join("data");
    assert_eq!(
        nelf(&[
            "--config",
            s(&cfg),
            "--seed",
            "3",
            "gen-data",
            "--out",
            s(&data)
        ]),
        0
    );
    cfg.to_string_lossy().into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn configuration_and_io_errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"seed": 1, "stpes": 3}"#).unwrap();
    assert_eq!(nelf(&["--config", s(&bad), "selftest"]), 2);
    assert_eq!(nelf(&["--hull", "maybe", "selftest"]), 2);
    assert_eq!(
        nelf(&["fit", "--out", s(&dir.path().join("o"))]),
        2,
        "missing --data"
    );
    assert_eq!(
        nelf(&["--config", s(&dir.path().join("missing.json")), "selftest"]),
        4
    );
    assert_eq!(
        nelf(&[
            "estimate-light",
            "--data",
            s(&dir.path().join("nope")),
            "--out",
            s(&dir.path().join("o"))
        ]),
        4
    );
}

#[test]
fn selftest_passes_and_writes_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(nelf(&["selftest", "--out", s(dir.path())]), 0);
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(m["command"], "selftest");
    assert!(m["summary"]
        .as_array()
        .unwrap()
        .iter()
        .all(|c| c["passed"] == true));
}

#[test]
fn manifest_hashes_match_outputs() {
    let dir = tempfile::tempdir().unwrap();
    tiny(dir.path());
    let data = dir.path().join("data");
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("manifest.json")).unwrap())
            .unwrap();
    let outputs = m["outputs"].as_object().unwrap();
    assert!(outputs.contains_key("dataset.json"));
    for (name, hash) in outputs {
        assert_eq!(
            hash.as_str().unwrap(),
            hash_path(&data.join(name)).unwrap(),
            "{name}"
        );
    }
    assert_eq!(m["seeds"]["dataset"], 3);
}

#[test]
fn resumed_fit_matches_an_uninterrupted_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let d = |n: &str| dir.path().join(n);
    let data = d("data");
    assert_eq!(
        nelf(&[
            "--config",
            &cfg,
            "fit",
            "--data",
            s(&data),
            "--out",
            s(&d("full")),
            "--steps",
            "12"
        ]),
        0
    );
    assert_eq!(
        nelf(&[
            "--config",
            &cfg,
            "fit",
            "--data",
            s(&data),
            "--out",
            s(&d("half")),
            "--steps",
            "6"
        ]),
        0
    );
    let half = d("half").join("checkpoint.nelfp");
    assert_eq!(
        nelf(&[
            "--config",
            &cfg,
            "fit",
            "--data",
            s(&data),
            "--out",
            s(&d("rest")),
            "--steps",
            "12",
            "--resume",
            s(&half)
        ]),
        0
    );
    let a = std::fs::read(d("full").join("checkpoint.nelfp")).unwrap();
    let b = std::fs::read(d("rest").join("checkpoint.nelfp")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn diverging_fit_exits_with_a_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    tiny(dir.path());
    let cfg = dir.path().join("hot.json");
    std::fs::write(
        &cfg,
        TINY.replacen(r#""train": {"#, r#""train": {"adam": {"lr": 1e300}, "#, 1),
    )
    .unwrap();
    let out = dir.path().join("fit");
    let code = nelf(&[
        "--config",
        s(&cfg),
        "fit",
        "--data",
        s(&dir.path().join("data")),
        "--out",
        s(&out),
        "--steps",
        "50",
    ]);
    assert_eq!(code, 3);
    // The last good parameters are still written.
    assert!(out.join("checkpoint.nelfp").exists());
}

#[test]
fn relight_and_view_synth_render_every_camera() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let d = |n: &str| dir.path().join(n);
    let data = d("data");
    assert_eq!(
        nelf(&[
            "--config",
            &cfg,
            "fit",
            "--data",
            s(&data),
            "--out",
            s(&d("fit")),
            "--steps",
            "3"
        ]),
        0
    );
    let ckpt = d("fit").join("checkpoint.nelfp");
    let env = data.join("pool").join("env_00.pfm");
    assert_eq!(
        nelf(&[
            "--config",
            &cfg,
            "--views",
            "3",
            "relight",
            "--data",
            s(&data),
            "--checkpoint",
            s(&ckpt),
            "--env",
            s(&env),
            "--out",
            s(&d("relit"))
        ]),
        0
    );
    for k in 0..3 {
        assert!(d("relit").join(format!("relit_{k}.png")).exists());
    }
    assert!(!d("relit").join("relit_3.png").exists());

    let cams: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(data.join("scene_0000/cameras.json")).unwrap(),
    )
    .unwrap();
    let cam = d("cam.json");
    std::fs::write(&cam, cams[0]["camera"].to_string()).unwrap();
    assert_eq!(
        nelf(&[
            "--config",
            &cfg,
            "view-synth",
            "--data",
            s(&data),
            "--checkpoint",
            s(&ckpt),
            "--camera",
            s(&cam),
            "--out",
            s(&d("synth"))
        ]),
        0
    );
    for f in [
        "synth.png",
        "synth.pfm",
        "synth_alpha.pfm",
        "synth_depth.pfm",
        "manifest.json",
    ] {
        assert!(d("synth").join(f).exists(), "{f}");
    }
}

#[test]
fn bake_and_render_ref_agree_with_the_library() {
    let dir = tempfile::tempdir().unwrap();
    tiny(dir.path());
    let d = |n: &str| dir.path().join(n);
    let scene = d("data").join("scene_0000/scene.json");
    let cams: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(d("data").join("scene_0000/cameras.json")).unwrap(),
    )
    .unwrap();
    let cam = d("cam.json");
    std::fs::write(&cam, cams[1]["camera"].to_string()).unwrap();
    let env = d("data").join("scene_0000/source_env.json");
    assert_eq!(
        nelf(&[
            "bake",
            "--scene",
            s(&scene),
            "--camera",
            s(&cam),
            "--out",
            s(&d("bake"))
        ]),
        0
    );
    assert_eq!(
        nelf(&[
            "render-ref",
            "--scene",
            s(&scene),
            "--camera",
            s(&cam),
            "--env",
            s(&env),
            "--out",
            s(&d("ref"))
        ]),
        0
    );
    let t =
        nelf::transport::SurfaceTransportImage::load(&d("bake").join("transport.nelft")).unwrap();
    let e = nelf::EnvironmentMap::load_json(&env).unwrap();
    let relit = nelf::transport::relight_image(&t, &e);
    let reference = nelf::RgbImage::load_pfm(&d("ref").join("reference.pfm")).unwrap();
    let worst = relit
        .data
        .iter()
        .zip(&reference.data)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-6, "{worst}");
}
