mod common;

use std::path::{Path, PathBuf};

use common::{csv_column, ok, run, s, stderr, write_embeddings};
use gsvox::alignment::Modality;
use gsvox::io::{encode_ply, load_ply, load_ppm};
use gsvox::GaussianCloud;
use tempfile::TempDir;

/// Small demo scene and toy set.
fn demo(dir: &Path) -> PathBuf {
    let out = dir.join("demo");
    ok(&[
        "demo",
        "--out",
        s(&out),
        "--views",
        "4",
        "--size",
        "32",
        "--pretrained",
        "200",
        "--toy-n",
        "4",
        "--toy-views",
        "2",
        "--toy-size",
        "16",
    ]);
    out
}

fn manifest(demo: &Path) -> PathBuf {
    demo.join("scene/manifest.json")
}

fn pretrained(demo: &Path) -> PathBuf {
    demo.join("scene/pretrained.ply")
}

#[test]
fn usage_and_io_errors_exit_with_two() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
    let missing = run(&["fit", "--manifest", "/nonexistent/manifest.json", "--init", "x.ply", "--out", s(&out)]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(stderr(&missing).contains("manifest.json"), "{}", stderr(&missing));
}

#[test]
fn injected_gradient_bug_exits_with_one() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("gc");
    let o = run(&["gradcheck", "--component", "alignment", "--inject-sign-flip", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(common::stdout(&o).contains("FAIL"));
    let o = run(&["gradcheck", "--component", "alignment", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn fit_honours_the_budget_and_config_layers() {
    let dir = TempDir::new().unwrap();
    let d = demo(dir.path());
    let config = dir.path().join("fit.toml");
    std::fs::write(&config, "n_max = 27\nmax_iters = 60\n").unwrap();
    let out = dir.path().join("fit");
    ok(&[
        "--config",
        s(&config),
        "--set",
        "n_max=64",
        "fit",
        "--manifest",
        s(&manifest(&d)),
        "--init",
        s(&pretrained(&d)),
        "--out",
        s(&out),
    ]);
    assert_eq!(load_ply(&out.join("fit.ply")).unwrap().len(), 64);
    let counts = csv_column(&out.join("fit_log.csv"), "count");
    // row 0 is the state right after initialisation
    assert_eq!(counts.len(), 61);
    assert!(counts.iter().all(|c| c.parse::<usize>().unwrap() <= 64));
    let snapshot: toml::Table = std::fs::read_to_string(out.join("resolved_config.toml")).unwrap().parse().unwrap();
    assert_eq!(snapshot["command"].as_str(), Some("fit"));
    assert_eq!(snapshot["config"]["n_max"].as_integer(), Some(64));
    assert_eq!(snapshot["config"]["max_iters"].as_integer(), Some(60));

    // a dedicated flag beats --set
    let out2 = dir.path().join("fit2");
    ok(&[
        "--set",
        "n_max=64",
        "fit",
        "--manifest",
        s(&manifest(&d)),
        "--init",
        s(&pretrained(&d)),
        "--out",
        s(&out2),
        "--n-max",
        "27",
        "--iters",
        "20",
    ]);
    assert_eq!(load_ply(&out2.join("fit.ply")).unwrap().len(), 27);
}

#[test]
fn unknown_or_mistyped_config_is_rejected() {
    let dir = TempDir::new().unwrap();
    let d = demo(dir.path());
    let (m, p) = (manifest(&d), pretrained(&d));
    let base = ["fit", "--manifest", s(&m), "--init", s(&p), "--out", "unused"];
    for set in ["bogus=1", "n_max=\"many\"", "lr=3"] {
        let mut args = vec!["--set", set];
        args.extend_from_slice(&base);
        let o = run(&args);
        assert_eq!(o.status.code(), Some(2), "{set}: {}", stderr(&o));
    }
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "n_maks = 64\n").unwrap();
    let mut args = vec!["--config", s(&config)];
    args.extend_from_slice(&base);
    let o = run(&args);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("n_maks"), "{}", stderr(&o));
    // commands without configuration keys refuse any
    let o = run(&["--set", "n_max=1", "render", "--ply", s(&p), "--manifest", s(&m), "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn empty_cloud_renders_black() {
    let dir = TempDir::new().unwrap();
    let d = demo(dir.path());
    let ply = dir.path().join("empty.ply");
    std::fs::write(&ply, encode_ply(&GaussianCloud::new(Vec::new()))).unwrap();
    let out = dir.path().join("render");
    ok(&["render", "--ply", s(&ply), "--manifest", s(&manifest(&d)), "--out", s(&out)]);
    for i in 0..4 {
        let img = load_ppm(&out.join(format!("render_{i:03}.ppm"))).unwrap();
        assert_eq!((img.width, img.height), (32, 32));
        assert!(img.data.iter().all(|&b| b == 0));
    }
    assert_eq!(csv_column(&out.join("psnr.csv"), "view").last().map(String::as_str), Some("mean"));
}

#[test]
fn voxelize_requires_a_cube_count() {
    let dir = TempDir::new().unwrap();
    let d = demo(dir.path());
    let out = dir.path().join("vox");
    // 200 is not a cube
    let o = run(&["voxelize", "--ply", s(&pretrained(&d)), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let fit = dir.path().join("fit");
    ok(&[
        "fit",
        "--manifest",
        s(&manifest(&d)),
        "--init",
        s(&pretrained(&d)),
        "--out",
        s(&fit),
        "--n-max",
        "27",
        "--iters",
        "10",
    ]);
    let o = run(&["voxelize", "--ply", s(&fit.join("fit.ply")), "--n", "4", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let printed = ok(&["voxelize", "--ply", s(&fit.join("fit.ply")), "--n", "3", "--out", s(&out)]);
    assert!(printed.contains("grid 3^3"), "{printed}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("voxelize.json")).unwrap()).unwrap();
    assert!(report["cost"].as_f64().unwrap() <= report["greedy_cost"].as_f64().unwrap());
    assert!(report["round_trip_chamfer"].as_f64().unwrap() < 1e-12);
    let back = dir.path().join("devox");
    ok(&["devoxelize", "--grid", s(&out.join("grid.vxg")), "--out", s(&back)]);
    assert_eq!(load_ply(&back.join("cloud.ply")).unwrap().len(), 27);
}

#[test]
fn align_eval_on_identity_embeddings() {
    let dir = TempDir::new().unwrap();
    let rows: Vec<Vec<f64>> = (0..12).map(|i| (0..12).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    let (sk, sh) = (dir.path().join("s.tsv"), dir.path().join("p.tsv"));
    write_embeddings(&sk, Modality::S, 12, &rows);
    write_embeddings(&sh, Modality::P, 12, &rows);
    let out = dir.path().join("align");
    ok(&["align-eval", "--sketch", s(&sk), "--shape", s(&sh), "--out", s(&out), "--ks", "1,5"]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("align.json")).unwrap()).unwrap();
    assert_eq!(report["items"], 12);
    for t in report["topk"].as_array().unwrap() {
        assert_eq!(t["sketch_to_shape"].as_f64(), Some(1.0));
        assert_eq!(t["shape_to_sketch"].as_f64(), Some(1.0));
    }

    let two = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    write_embeddings(&sk, Modality::S, 2, &two);
    write_embeddings(&sh, Modality::P, 2, &two);
    ok(&["align-eval", "--sketch", s(&sk), "--shape", s(&sh), "--out", s(&out), "--tau", "1"]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("align.json")).unwrap()).unwrap();
    assert!((report["info_nce"].as_f64().unwrap() - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
}

#[test]
fn malformed_embeddings_are_rejected() {
    let dir = TempDir::new().unwrap();
    let good = dir.path().join("good.tsv");
    write_embeddings(&good, Modality::P, 2, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let out = dir.path().join("align");
    for (name, text) in [
        ("short.tsv", "a\tS\t1\t0\nb\tS\t1\n"),
        ("nan.tsv", "a\tS\t1\tx\nb\tS\t0\t1\n"),
        ("modality.tsv", "a\tQ\t1\t0\nb\tQ\t0\t1\n"),
    ] {
        let bad = dir.path().join(name);
        std::fs::write(&bad, text).unwrap();
        let o = run(&["align-eval", "--sketch", s(&bad), "--shape", s(&good), "--out", s(&out)]);
        assert_eq!(o.status.code(), Some(2), "{name}: {}", stderr(&o));
    }
    // row ids must pair up across tables
    let other = dir.path().join("other.tsv");
    std::fs::write(&other, "x\tS\t1\t0\ny\tS\t0\t1\n").unwrap();
    let o = run(&["align-eval", "--sketch", s(&other), "--shape", s(&good), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sampling_is_seeded() {
    let dir = TempDir::new().unwrap();
    let d = demo(dir.path());
    let toy = d.join("toy");
    let train = dir.path().join("train");
    ok(&["--set", "timesteps=20", "diffuse-train", "--data", s(&toy), "--out", s(&train), "--iters", "12"]);
    assert_eq!(csv_column(&train.join("train_log.csv"), "iter").len(), 12);
    let ckp = train.join("model.ckp");
    let sample = |seed: &str, name: &str| {
        let out = dir.path().join(name);
        ok(&["--seed", seed, "diffuse-sample", "--checkpoint", s(&ckp), "--data", s(&toy), "--item", "cube", "--out", s(&out)]);
        std::fs::read(out.join("sample.vxg")).unwrap()
    };
    let a = sample("5", "a");
    assert_eq!(a, sample("5", "b"));
    assert_ne!(a, sample("6", "c"));
    let o = run(&["diffuse-sample", "--checkpoint", s(&ckp), "--data", s(&toy), "--item", "teapot", "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));
}
