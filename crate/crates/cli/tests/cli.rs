use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_difftap");

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/tiny_sd")
}

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .current_dir(dir)
        .env_remove("DIFFTAP_MODEL_DIR")
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn assert_ok(o: &Output) {
    assert_eq!(code(o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

/// Extracts two taps at two timesteps with attention into `dir/store`.
fn populate(dir: &Path) {
    let model = fixture().join("model");
    let image = fixture().join("image.png");
    let o = run(
        dir,
        &[
            "--model-dir",
            model.to_str().unwrap(),
            "--store",
            "store",
            "-o",
            "extract_out",
            "extract",
            "--image",
            image.to_str().unwrap(),
            "--prompt",
            "a red cube on the left of a blue ball",
            "--taps",
            "U-L1-R1-B0-Cross-Q,D-L2-R1-Res-Out",
            "--timesteps",
            "50,989",
            "--capture-attention",
        ],
    );
    assert_ok(&o);
}

#[test]
fn print_config_reflects_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["--set", "itm.trials=1", "--seed", "7", "--print-config", "fuse-check"]);
    assert_ok(&o);
    let text = stdout(&o);
    assert!(text.contains("[itm]"));
    assert!(text.contains("trials=1"), "{text}");
    assert!(text.contains("seed=7"), "{text}");
    assert!(!dir.path().join("out").exists());

    let o = run(dir.path(), &["--set", "itm.nope=1", "fuse-check"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn config_file_then_set_then_flags() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.ini"), "[run]\nseed=3\nworkers=2\n[itm]\ntrials=5\n").unwrap();
    let o = run(
        dir.path(),
        &["--config", "run.ini", "--set", "run.seed=4", "--set", "itm.trials=2", "--print-config", "fuse-check"],
    );
    assert_ok(&o);
    let text = stdout(&o);
    assert!(text.contains("seed=4") && text.contains("workers=2") && text.contains("trials=2"), "{text}");

    let o = run(dir.path(), &["--config", "run.ini", "--seed", "9", "--set", "run.seed=4", "--print-config", "fuse-check"]);
    assert!(stdout(&o).contains("seed=9"));
}

#[test]
fn extract_analyses_and_store_commands() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    populate(d);

    let extract: Value = serde_json::from_str(&fs::read_to_string(d.join("extract_out/extract.json")).unwrap()).unwrap();
    let records = extract["records"].as_array().unwrap();
    // 2 taps x 2 timesteps, conditional and unconditional, plus attention layers.
    let features = records.iter().filter(|r| r["key"]["kind"] == "feature").count();
    assert_eq!(features, 8);
    assert!(records.len() > features);
    assert!(d.join("extract_out/config.ini").exists());

    let ls = run(d, &["--store", "store", "store", "ls", "--block", "U-L1-R1-B0-Cross-Q", "--scale", "1"]);
    assert_ok(&ls);
    assert_eq!(stdout(&ls).lines().count(), 2);

    // Byte-identical reruns.
    for out in ["p1", "p2"] {
        assert_ok(&run(d, &["--store", "store", "-o", out, "pca", "--block", "U-L1-R1-B0-Cross-Q"]));
    }
    let a = fs::read(d.join("p1/pca.json")).unwrap();
    assert_eq!(a, fs::read(d.join("p2/pca.json")).unwrap());
    assert_eq!(fs::read(d.join("p1/pca_000.png")).unwrap(), fs::read(d.join("p2/pca_000.png")).unwrap());
    let pca: Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(pca["maps"].as_array().unwrap().len(), 4);

    // Empty selection: validation failure, nothing written.
    let o = run(d, &["--store", "store", "-o", "empty", "pca", "--image-id", "nope"]);
    assert_eq!(code(&o), 2);
    assert!(!d.join("empty").exists());

    let o = run(d, &["--store", "store", "-o", "delta", "delta", "--block", "U-L1-R1-B0-Cross-Q", "--timestep", "50"]);
    assert_ok(&o);
    let delta: Value = serde_json::from_str(&fs::read_to_string(d.join("delta/delta.json")).unwrap()).unwrap();
    assert_eq!(delta["sweeps"].as_array().unwrap().len(), 1);
    assert_eq!(delta["sweeps"][0]["maps"].as_array().unwrap().len(), 4);

    let o = run(d, &["--store", "store", "-o", "cka", "cka", "--blocks", "U-L1-R1-B0-Cross-Q,D-L2-R1-Res-Out"]);
    assert_ok(&o);
    let csv = fs::read_to_string(d.join("cka/cka.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    let o = run(
        d,
        &["--store", "store", "-o", "curve", "cka", "--block", "D-L2-R1-Res-Out", "--guidance-scales", "0,1,7"],
    );
    assert_ok(&o);
    let curve: Value = serde_json::from_str(&fs::read_to_string(d.join("curve/cka_guidance.json")).unwrap()).unwrap();
    let at_zero = curve["curve"][0]["cka"]["value"].as_f64().unwrap();
    assert!((at_zero - 1.0).abs() < 1e-9);

    assert_ok(&run(d, &["--store", "store", "store", "verify"]));

    // Flip one payload byte.
    let payload = fs::read_dir(d.join("store/payloads")).unwrap().next().unwrap().unwrap().path();
    let mut bytes = fs::read(&payload).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    fs::write(&payload, bytes).unwrap();
    let o = run(d, &["--store", "store", "store", "verify"]);
    assert_eq!(code(&o), 3);
    assert!(stdout(&o).contains("corrupt"));
}

#[test]
fn bad_tap_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let model = fixture().join("model");
    let image = fixture().join("image.png");
    for tap in ["Q-L1-R1-B0-Out", "U-L9-R0-B0-Out"] {
        let o = run(
            dir.path(),
            &["--model-dir", model.to_str().unwrap(), "extract", "--image", image.to_str().unwrap(), "--taps", tap],
        );
        assert_eq!(code(&o), 2, "{tap}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert!(!dir.path().join("out").exists());
    assert!(!dir.path().join("store").exists());
}

#[test]
fn fuse_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["-o", "f", "fuse-check"]);
    assert_ok(&o);
    assert!(!stdout(&o).contains("FAIL"));
    let checks: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("f/fuse_check.json")).unwrap()).unwrap();
    assert!(checks.as_array().unwrap().iter().all(|c| c["passed"] == true));
}

fn write_png(path: &Path, shade: u8) {
    image::RgbImage::from_fn(32, 32, |x, y| image::Rgb([shade, (x * 8) as u8, (y * 8) as u8]))
        .save(path)
        .unwrap();
}

fn winoground(root: &Path) {
    fs::create_dir_all(root.join("images")).unwrap();
    let mut lines = String::new();
    for id in 0..2u8 {
        for k in 0..2u8 {
            write_png(&root.join(format!("images/ex_{id}_{k}.png")), 60 * (id * 2 + k));
        }
        lines.push_str(&format!(
            "{{\"id\":{id},\"caption_0\":\"a red cube left of a ball\",\"caption_1\":\"a ball left of a red cube\",\"image_0\":\"ex_{id}_0\",\"image_1\":\"ex_{id}_1\"}}\n"
        ));
    }
    fs::write(root.join("examples.jsonl"), lines).unwrap();
}

#[test]
fn datasets_validate_and_itm_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    winoground(&d.join("wino"));

    let o = run(d, &["datasets", "validate", "--benchmark", "winoground", "--root", "wino"]);
    assert_ok(&o);
    assert!(stdout(&o).contains("2 records"));
    assert!(stdout(&o).contains("expected 400"));

    let o = run(d, &["datasets", "validate", "--benchmark", "mmvp-vlm", "--root", "missing"]);
    assert_eq!(code(&o), 2);

    let model = fixture().join("model");
    let args = [
        "--model-dir",
        model.to_str().unwrap(),
        "-o",
        "itm",
        "itm-eval",
        "--benchmark",
        "winoground",
        "--root",
        "wino",
        "--timesteps",
        "50",
        "--trials",
        "1",
        "--workers",
        "2",
    ];
    let o = run(d, &args);
    assert_ok(&o);
    let result: Value = serde_json::from_str(&fs::read_to_string(d.join("itm/itm_winoground.json")).unwrap()).unwrap();
    assert_eq!(result["per_record"].as_array().unwrap().len(), 2);
    for k in ["text", "image", "group"] {
        let m = result["overall"][k]["mean"].as_f64().unwrap();
        assert!((0.0..=100.0).contains(&m));
    }
}

fn coco(root: &Path) {
    fs::create_dir_all(root.join("images")).unwrap();
    let caps = ["a cat on a sofa", "a dog in the park", "a red car on the street"];
    let mut images = Vec::new();
    let mut anns = Vec::new();
    for (i, c) in caps.iter().enumerate() {
        write_png(&root.join(format!("images/{i}.png")), 40 * i as u8);
        images.push(serde_json::json!({"id": i, "file_name": format!("{i}.png")}));
        anns.push(serde_json::json!({"image_id": i, "caption": c}));
        anns.push(serde_json::json!({"image_id": i, "caption": format!("there is {c}")}));
    }
    let file = serde_json::json!({"images": images, "annotations": anns});
    fs::write(root.join("captions.json"), file.to_string()).unwrap();
}

#[test]
fn leakage_probe_with_echo_captioner() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    coco(&d.join("coco"));
    // Replies with the prompt it was given.
    let echo = r#"sed -u 's/.*"prompt":"\([^"]*\)".*/{"caption":"\1"}/'"#;
    let o = run(d, &["-o", "leak", "leakage-probe", "--root", "coco", "--captioner-cmd", echo]);
    assert_ok(&o);
    let out: Value = serde_json::from_str(&fs::read_to_string(d.join("leak/leakage.json")).unwrap()).unwrap();
    let report = &out["report"];
    // Echoing the first reference scores well when matched and gives nothing
    // without a prompt.
    assert!(report["matched"]["cider_d"].as_f64().unwrap() > report["mismatched"]["cider_d"].as_f64().unwrap());
    assert!(report["no_caption"]["cider_d"].as_f64().unwrap().abs() < 1e-12);

    let o = run(d, &["-o", "leak2", "leakage-probe", "--root", "coco"]);
    assert_eq!(code(&o), 2);
    assert!(!d.join("leak2").exists());
}
