use std::path::Path;
use std::process::{Command, Output};

fn gazeswap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gazeswap"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = gazeswap(args);
    assert!(
        out.status.success(),
        "gazeswap {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, seed: &str) {
    ok(&[
        "--seed",
        seed,
        "synth",
        "--out-dir",
        p(dir),
        "--images",
        "1",
        "--pool",
        "6",
    ]);
}

fn run_match(dir: &Path, out: &Path, extra: &[&str]) -> String {
    let (faces, wider, xgaze) = (
        dir.join("faces.jsonl"),
        dir.join("wider_attrs.jsonl"),
        dir.join("xgaze_attrs.jsonl"),
    );
    let mut args = vec![
        "match",
        "--faces",
        p(&faces),
        "--wider-attrs",
        p(&wider),
        "--xgaze-attrs",
        p(&xgaze),
        "--out",
        p(out),
    ];
    args.extend_from_slice(extra);
    ok(&args);
    std::fs::read_to_string(out).unwrap()
}

#[test]
fn synth_match_swap_stats() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d, "7");
    let matches = run_match(d, &d.join("matches.jsonl"), &[]);
    // one image carries two usable faces and one too small to swap
    assert_eq!(matches.lines().count(), 3);

    let out_dir = d.join("out");
    ok(&[
        "swap",
        "--faces",
        p(&d.join("faces.jsonl")),
        "--matches",
        p(&d.join("matches.jsonl")),
        "--gaze-pool",
        p(&d.join("gaze_pool.jsonl")),
        "--out-dir",
        p(&out_dir),
    ]);
    let outcomes = std::fs::read_to_string(out_dir.join("outcomes.jsonl")).unwrap();
    let rows: Vec<serde_json::Value> = outcomes.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 3);
    let swapped: Vec<_> = rows.iter().filter(|r| r["status"] == "swapped").collect();
    assert_eq!(swapped.len(), 2);
    assert!(rows
        .iter()
        .any(|r| r["status"] == "skipped" && r["reason"] == "too_small"));
    for r in &swapped {
        assert!(out_dir.join(r["image"].as_str().unwrap()).is_file());
    }

    let stats = ok(&[
        "stats",
        "--annotations",
        p(&d.join("annotations.jsonl")),
        "--outcomes",
        p(&out_dir.join("outcomes.jsonl")),
    ]);
    let stats: serde_json::Value = serde_json::from_str(&stats).unwrap();
    assert_eq!(stats["images"], 1);
    assert_eq!(stats["faces"], 3);
    assert_eq!(stats["swapped"], 2);
    assert_eq!(stats["skip_reasons"]["too_small"], 1);
    let modes: u64 = stats["modes"]
        .as_object()
        .unwrap()
        .values()
        .map(|v| v.as_u64().unwrap())
        .sum();
    assert_eq!(modes, 2);
}

#[test]
fn wide_candidate_list_agrees_with_brute_force() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&[
        "--seed",
        "11",
        "synth",
        "--out-dir",
        p(d),
        "--images",
        "2",
        "--pool",
        "10",
    ]);
    let cut = run_match(d, &d.join("a.jsonl"), &["--topn", "1000"]);
    let brute = run_match(d, &d.join("b.jsonl"), &["--brute-force"]);
    assert_eq!(cut, brute);
}

#[test]
fn same_seed_same_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a, "3");
    synth(&b, "3");
    for f in [
        "faces.jsonl",
        "gaze_pool.jsonl",
        "annotations.jsonl",
        "images/img000.png",
        "pool/e00000.png",
    ] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let one = run_match(&a, &a.join("m.jsonl"), &["--jobs", "1"]);
    let many = run_match(&a, &a.join("m4.jsonl"), &["--jobs", "4"]);
    assert_eq!(one, many);

    let c = tmp.path().join("c");
    synth(&c, "4");
    assert_ne!(
        std::fs::read(a.join("faces.jsonl")).unwrap(),
        std::fs::read(c.join("faces.jsonl")).unwrap()
    );
}

#[test]
fn eval_bins_three_faces() {
    let tmp = tempfile::tempdir().unwrap();
    let gt = tmp.path().join("gt.jsonl");
    let pred = tmp.path().join("pred.jsonl");
    let face = |id: &str, x0: f64, w: f64, yaw: f64| {
        serde_json::json!({
            "face_id": id, "bbox": [x0, 0.0, x0 + w, w],
            "landmarks": [[x0 + 1.0, 1.0], [x0 + 2.0, 1.0], [x0 + 3.0, 1.0], [x0 + 4.0, 1.0], [x0 + 5.0, 1.0]],
            "gaze": {"pitch": 0.0, "yaw": yaw}
        })
    };
    let img = serde_json::json!({
        "image_id": "i", "image": "i.png", "width": 1000, "height": 400,
        "faces": [face("a", 0.0, 40.0, 10.0), face("b", 100.0, 50.0, 20.0), face("c", 300.0, 200.0, 30.0)]
    });
    std::fs::write(&gt, format!("{img}\n")).unwrap();
    // errors of 2, 4 and 6 degrees in yaw
    std::fs::write(
        &pred,
        "{\"face_id\":\"a\",\"gaze\":{\"pitch\":0.0,\"yaw\":12.0}}\n\
         {\"face_id\":\"b\",\"gaze\":{\"pitch\":0.0,\"yaw\":24.0}}\n\
         {\"face_id\":\"c\",\"gaze\":{\"pitch\":0.0,\"yaw\":36.0}}\n",
    )
    .unwrap();
    let csv = ok(&["eval", "--gt", p(&gt), "--pred", p(&pred), "--bins", "width", "--csv"]);
    let row = |label: &str| {
        csv.lines()
            .find(|l| l.starts_with(&format!("{label},")))
            .unwrap_or_else(|| panic!("no row {label} in\n{csv}"))
            .split(',')
            .map(str::to_owned)
            .collect::<Vec<_>>()
    };
    let small = row("30-60");
    assert_eq!(small[3], "2");
    assert!((small[4].parse::<f64>().unwrap() - 3.0).abs() < 1e-3, "{small:?}");
    let big = row("180-210");
    assert_eq!(big[3], "1");
    assert!((big[4].parse::<f64>().unwrap() - 6.0).abs() < 1e-3, "{big:?}");

    let text = ok(&["eval", "--gt", p(&gt), "--pred", p(&pred)]);
    assert!(text.contains("total 3"), "{text}");
}

#[test]
fn gradcheck_passes() {
    let out = ok(&["gradcheck", "--instances", "10"]);
    assert!(out.contains("overall max relative error"), "{out}");
    let strict = gazeswap(&["gradcheck", "--instances", "10", "--max-error", "1e-30"]);
    assert_eq!(strict.status.code(), Some(1));
}

#[test]
fn config_file_and_flag_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "# short fit\nsteps = 7\nlr = 0.05\n").unwrap();
    let from_cfg = ok(&["--config", p(&cfg), "toyfit"]);
    assert!(from_cfg.starts_with("steps 7\n"), "{from_cfg}");
    let overridden = ok(&["--config", p(&cfg), "toyfit", "--steps", "9"]);
    assert!(overridden.starts_with("steps 9\n"), "{overridden}");

    std::fs::write(&cfg, "steps 7\n").unwrap();
    let bad = gazeswap(&["--config", p(&cfg), "toyfit"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("run.cfg:1"));
}

#[test]
fn bad_input_fails_with_line_numbers() {
    let tmp = tempfile::tempdir().unwrap();
    let gt = tmp.path().join("gt.jsonl");
    std::fs::write(&gt, "{\"image_id\":\"i\"}\nnot json\n").unwrap();
    let out = gazeswap(&["stats", "--annotations", p(&gt)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 1:") && err.contains("line 2:"), "{err}");

    let img = |id: &str| {
        format!(
            "{{\"image_id\":\"{id}\",\"image\":\"{id}.png\",\"width\":100,\"height\":100,\"faces\":[{{\"face_id\":\"same\",\"bbox\":[0,0,50,50],\"landmarks\":[[1,1],[2,1],[3,1],[4,1],[5,1]]}}]}}\n"
        )
    };
    std::fs::write(&gt, img("a") + &img("b")).unwrap();
    let dup = gazeswap(&["stats", "--annotations", p(&gt)]);
    assert_eq!(dup.status.code(), Some(1));
    let err = String::from_utf8_lossy(&dup.stderr);
    assert!(err.contains("line 2:") && err.contains("same"), "{err}");

    let missing = gazeswap(&["stats", "--annotations", p(&tmp.path().join("nope.jsonl"))]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error: "));
}

#[test]
fn gs_report_writes_both_tables() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["gs-report", "--samples", "2000", "--out-dir", p(tmp.path())]);
    let curve = std::fs::read_to_string(tmp.path().join("gs_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 101);
    assert!(curve.lines().nth(1).unwrap().ends_with(",1.0000000000"));
    let quant = std::fs::read_to_string(tmp.path().join("quantization.csv")).unwrap();
    let last: Vec<f64> = quant
        .lines()
        .last()
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(last[0], 85.0);
    assert!(last[1] > 3.0 * last[2], "{last:?}");
}
