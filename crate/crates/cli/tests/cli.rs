use std::path::Path;
use std::process::{Command, Output};

use c3gs_core::codec::encode;
use c3gs_core::quant::{CompressedScene, QuantRange, QuantRanges};
use serde_json::Value;

fn c3gs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_c3gs")).args(args).output().unwrap()
}

fn json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(&text).unwrap_or_else(|e| panic!("{e}: {text}"))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn empty_container() -> Vec<u8> {
    let r = QuantRange::new(8, 0.0, 1.0).unwrap();
    encode(&CompressedScene {
        sh_basis: 16,
        positions: vec![],
        opacity: vec![],
        eta: vec![],
        color_index: vec![],
        shape_index: vec![],
        color_codebook: vec![],
        color_clustered: 0,
        shape_rotation: vec![],
        shape_scale: vec![],
        shape_clustered: 0,
        ranges: QuantRanges { opacity: r, eta: r, color: r, rotation: r, scale: r },
    })
    .unwrap()
}

fn synth(dir: &Path, extra: &[&str]) {
    let scene = dir.join("scene.ply");
    let cams = dir.join("cams.json");
    let mut args = vec!["synth", "-o", p(&scene), "--cameras-out", p(&cams)];
    args.extend_from_slice(extra);
    let out = c3gs(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn info_on_empty_container() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.c3gs");
    std::fs::write(&path, empty_container()).unwrap();
    let out = c3gs(&["info", p(&path)]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("N = 0"));
    let v = json(&c3gs(&["--json", "info", p(&path)]));
    assert_eq!(v["count"], 0);
    assert_eq!(v["total_bytes"], 196);
}

#[test]
fn metrics_of_identical_scenes_is_infinite() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &["-n", "300", "--views", "3", "--resolution", "24"]);
    let scene = dir.path().join("scene.ply");
    let cams = dir.path().join("cams.json");
    let out = c3gs(&["metrics", p(&scene), p(&scene), "--cameras", p(&cams)]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("mean\tinf"));
    let v = json(&c3gs(&["--json", "metrics", p(&scene), p(&scene), "--cameras", p(&cams)]));
    assert_eq!(v["mean_psnr"], "inf");
    assert_eq!(v["views"].as_array().unwrap().len(), 3);
}

#[test]
fn decompress_and_render_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &["-n", "400", "--views", "2", "--resolution", "24"]);
    let d = |n: &str| dir.path().join(n);
    let out = c3gs(&[
        "compress", p(&d("scene.ply")), "-o", p(&d("s.c3gs")), "--cameras", p(&d("cams.json")),
        "--k-color", "16", "--k-shape", "16", "--finetune-steps", "0", "--report", p(&d("report.tsv")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(std::fs::read_to_string(d("report.tsv")).unwrap().starts_with("stage\t"));
    assert!(c3gs(&["decompress", p(&d("s.c3gs")), "-o", p(&d("back.ply"))]).status.success());
    // The PLY re-export renders exactly like the container it came from.
    let v = json(&c3gs(&["--json", "metrics", p(&d("s.c3gs")), p(&d("back.ply")), "--cameras", p(&d("cams.json"))]));
    let mean = &v["mean_psnr"];
    assert!(mean == "inf" || mean.as_f64().unwrap() > 100.0, "{mean}");
    for view in ["0", "1"] {
        let png = d(&format!("v{view}.png"));
        let out = c3gs(&["render", p(&d("s.c3gs")), "--camera", p(&d("cams.json")), "--view", view, "-o", p(&png)]);
        assert!(out.status.success());
        let img = c3gs_core::scene::Image::from_png(&std::fs::read(&png).unwrap()).unwrap();
        assert_eq!((img.width, img.height), (24, 24));
    }
    let out = c3gs(&["render", p(&d("s.c3gs")), "--camera", p(&d("cams.json")), "--view", "5", "-o", p(&d("x.png"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn compress_with_target_images() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &["-n", "300", "--views", "2", "--resolution", "16"]);
    let d = |n: &str| dir.path().join(n);
    let images = d("images");
    std::fs::create_dir(&images).unwrap();
    for view in ["0", "1"] {
        let png = images.join(format!("000{view}.png"));
        let out = c3gs(&["render", p(&d("scene.ply")), "--camera", p(&d("cams.json")), "--view", view, "-o", p(&png)]);
        assert!(out.status.success());
    }
    let args = |out: &str| {
        vec![
            "--json".to_string(), "compress".into(), p(&d("scene.ply")).into(), "-o".into(), p(&d(out)).into(),
            "--cameras".into(), p(&d("cams.json")).into(), "--k-color".into(), "8".into(), "--k-shape".into(),
            "8".into(), "--finetune-steps".into(), "3".into(),
        ]
    };
    let run = |a: Vec<String>| Command::new(env!("CARGO_BIN_EXE_c3gs")).args(a).output().unwrap();
    let mut with = args("a.c3gs");
    with.extend(["--images".into(), p(&images).into()]);
    let a = run(with);
    let b = run(args("b.c3gs"));
    assert!(a.status.success() && b.status.success());
    // 8-bit PNG targets differ from float renders, so only the shape of the result is comparable.
    assert_eq!(json(&a)["report"]["rows"].as_array().unwrap().len(), 7);

    std::fs::remove_file(images.join("0001.png")).unwrap();
    let mut missing = args("c.c3gs");
    missing.extend(["--images".into(), p(&images).into()]);
    assert_eq!(run(missing).status.code(), Some(2));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| dir.path().join(n);

    assert_eq!(c3gs(&["--help"]).status.code(), Some(0));
    assert_eq!(c3gs(&["--version"]).status.code(), Some(0));
    assert_eq!(c3gs(&[]).status.code(), Some(1));
    let out = c3gs(&["--json", "frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(json(&out)["exit_code"], 1);
    assert_eq!(c3gs(&["synth", "-n", "0", "-o", p(&d("a.ply")), "--cameras-out", p(&d("a.json"))]).status.code(), Some(1));

    let out = c3gs(&["--json", "info", p(&d("missing.c3gs"))]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(json(&out)["exit_code"], 2);

    std::fs::write(d("junk.c3gs"), b"C3GS not really a container").unwrap();
    assert_eq!(c3gs(&["info", p(&d("junk.c3gs"))]).status.code(), Some(3));
    let mut bytes = empty_container();
    bytes[40] ^= 0xff;
    std::fs::write(d("flipped.c3gs"), &bytes).unwrap();
    assert_eq!(c3gs(&["info", p(&d("flipped.c3gs"))]).status.code(), Some(3));
    std::fs::write(d("junk.ply"), b"ply\nformat nonsense\n").unwrap();
    std::fs::write(d("cams.json"), b"{ not json").unwrap();
    assert_eq!(c3gs(&["decompress", p(&d("junk.ply")), "-o", p(&d("x.ply"))]).status.code(), Some(3));
    synth(dir.path(), &["-n", "50", "--views", "1", "--resolution", "8"]);
    assert_eq!(c3gs(&["render", p(&d("junk.ply")), "--camera", p(&d("cams.json")), "-o", p(&d("x.png"))]).status.code(), Some(3));
    std::fs::write(d("bad.json"), b"{ not json").unwrap();
    assert_eq!(
        c3gs(&["render", p(&d("scene.ply")), "--camera", p(&d("bad.json")), "-o", p(&d("x.png"))]).status.code(),
        Some(3)
    );
}

/// Same workload as the end-to-end acceptance criterion, driven through
/// the binary: 5000 Gaussians, 10 views at 64x64, one held-out pair.
#[test]
fn synth_compress_metrics_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &["--seed", "1"]);
    let d = |n: &str| dir.path().join(n);
    let out = c3gs(&[
        "--json", "compress", p(&d("scene.ply")), "-o", p(&d("s.c3gs")), "--cameras", p(&d("cams.json")),
        "--k-color", "64", "--k-shape", "64", "--beta-c", "inf", "--beta-g", "inf", "--finetune-steps", "200",
        "--lr-schedule", "short", "--lr-final-factor", "0.1",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    let report = &v["report"];
    assert_eq!(v["bytes"].as_u64().unwrap(), std::fs::metadata(d("s.c3gs")).unwrap().len());
    let rows = report["rows"].as_array().unwrap();
    let last = &rows[6];
    assert_eq!(last["stage"], "morton_order");
    let heldout = last["heldout_psnr"].as_f64().unwrap();
    let ratio = report["ratio"].as_f64().unwrap();
    let gain = rows[4]["training_psnr"].as_f64().unwrap() - report["quantized_training_psnr"].as_f64().unwrap();
    assert!(heldout >= 40.0, "held-out {heldout}");
    assert!(ratio >= 10.0, "ratio {ratio}");
    assert!(gain >= 2.0, "gain {gain}");

    let heldout_views: Vec<u64> = report["heldout_views"].as_array().unwrap().iter().map(|x| x.as_u64().unwrap()).collect();
    assert_eq!(heldout_views, [0, 8]);
    let m = json(&c3gs(&["--json", "metrics", p(&d("scene.ply")), p(&d("s.c3gs")), "--cameras", p(&d("cams.json"))]));
    let views = m["views"].as_array().unwrap();
    let mean = heldout_views.iter().map(|&i| views[i as usize]["psnr"].as_f64().unwrap()).sum::<f64>() / 2.0;
    assert!((mean - heldout).abs() < 1e-6, "metrics {mean} vs report {heldout}");
}
