use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn ikod(args: &[&str]) -> Output {
    ikod_env(args, &[])
}

fn ikod_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ikod"));
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn config(extra_policy: &str, max_seq: usize, new_tokens: usize) -> Value {
    let text = format!(
        r#"{{
            "model": {{"n_layers": 2, "n_heads": 2, "d_model": 12, "d_ff": 24, "vocab_size": 20, "max_seq": {max_seq}, "seed": 5}},
            "image_count": 6,
            "seed": 1,
            "prompt_tokens": [3, 8, 1, 14, 9],
            "policy": {{"max_new_tokens": {new_tokens}, "stop_at_eos": false {extra_policy}}}
        }}"#
    );
    serde_json::from_str(&text).unwrap()
}

fn write(dir: &Path, name: &str, value: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string(value).unwrap()).unwrap();
    path
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn decode_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.json", &config("", 64, 10));
    let out = dir.path().join("out");
    let res = ikod(&[
        "decode",
        "--config",
        p(&cfg),
        "--out",
        p(&out),
        "--emit-merge-plans",
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));

    let gen = read_json(&out.join("generation.json"));
    assert_eq!(gen["summary"]["tokens"].as_array().unwrap().len(), 10);
    assert_eq!(gen["steps"].as_array().unwrap().len(), 10);
    assert_eq!(gen["steps"][0]["p_orig_top5"].as_array().unwrap().len(), 5);
    let layout = read_json(&out.join("layout.json"));
    assert_eq!(layout["l_image"], 6);
    assert_eq!(layout["l_others"], 5);
    assert_eq!(layout["l_gen"], 9);

    let trace = fs::read_to_string(out.join("attention_trace.csv")).unwrap();
    assert!(trace.starts_with("step,layer,head,att_image\n"));
    assert_eq!(trace.lines().count(), 1 + 9 * 2 * 2);
    assert!(!trace.contains('\r'));

    let plans = read_json(&out.join("merge_plans.json"));
    assert_eq!(plans.as_array().unwrap().len(), 10);
    assert_eq!(
        plans[0]["layers"][0]["protected"],
        serde_json::json!([3, 4])
    );
}

#[test]
fn ratio_one_decode_matches_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let base = write(
        dir.path(),
        "b.json",
        &config(r#", "mode": "baseline""#, 64, 12),
    );
    let full = write(
        dir.path(),
        "i.json",
        &config(r#", "mode": "ikod", "lambda": 1.0"#, 64, 12),
    );
    for (cfg, out) in [(&base, "b"), (&full, "i")] {
        assert_eq!(
            code(&ikod(&[
                "decode",
                "--config",
                p(cfg),
                "--out",
                p(&dir.path().join(out))
            ])),
            0
        );
    }
    let a = read_json(&dir.path().join("b/generation.json"));
    let b = read_json(&dir.path().join("i/generation.json"));
    assert_eq!(a["summary"]["tokens"], b["summary"]["tokens"]);
}

#[test]
fn seed_flag_overrides_policy_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "s.json",
        &config(
            r#", "base": {"kind": "nucleus", "temperature": 3.0}"#,
            64,
            20,
        ),
    );
    let run = |seed: &str, out: &str| {
        let out = dir.path().join(out);
        assert_eq!(
            code(&ikod(&[
                "decode",
                "--config",
                p(&cfg),
                "--out",
                p(&out),
                "--seed",
                seed
            ])),
            0
        );
        read_json(&out.join("generation.json"))
    };
    let a = run("1", "a");
    let b = run("2", "b");
    assert_eq!(a["config"]["policy"]["seed"], 1);
    assert_ne!(a["summary"]["tokens"], b["summary"]["tokens"]);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    assert_eq!(
        code(&ikod(&[
            "decode",
            "--config",
            "/nonexistent.json",
            "--out",
            p(&out)
        ])),
        2
    );

    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    assert_eq!(
        code(&ikod(&["decode", "--config", p(&bad), "--out", p(&out)])),
        2
    );

    let mut wrong_vocab = config("", 64, 4);
    wrong_vocab["prompt_tokens"] = serde_json::json!([99]);
    let cfg = write(dir.path(), "v.json", &wrong_vocab);
    assert_eq!(
        code(&ikod(&["decode", "--config", p(&cfg), "--out", p(&out)])),
        2
    );

    let cfg = write(
        dir.path(),
        "lambda.json",
        &config(r#", "lambda": 0.0"#, 64, 4),
    );
    assert_eq!(
        code(&ikod(&["decode", "--config", p(&cfg), "--out", p(&out)])),
        2
    );

    let cfg = write(dir.path(), "cap.json", &config("", 16, 40));
    let res = ikod(&["decode", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(code(&res), 3, "{}", String::from_utf8_lossy(&res.stderr));

    let cfg = write(dir.path(), "noout.json", &config("", 64, 4));
    assert_eq!(code(&ikod(&["decode", "--config", p(&cfg)])), 2);

    assert_eq!(code(&ikod(&["frobnicate"])), 2);
}

#[test]
fn flops_report() {
    let res = ikod(&[
        "flops", "--layers", "2", "--n", "8", "--d", "4", "--l", "4", "--lambda", "0.5",
    ]);
    assert_eq!(code(&res), 0);
    let v: Value = serde_json::from_slice(&res.stdout).unwrap();
    assert_eq!(v["exact_g"], 0.703125);
    assert_eq!(v["closed_g"], 0.703125);
    assert_eq!(v["original"], 8192.0);

    let res = ikod(&[
        "flops", "--layers", "2", "--n", "8", "--d", "4", "--l", "4", "--lambda", "1",
    ]);
    let v: Value = serde_json::from_slice(&res.stdout).unwrap();
    assert_eq!(v["exact_g"], 1.0);

    let res = ikod(&[
        "flops", "--layers", "2", "--n", "8", "--d", "4", "--l", "8", "--lambda", "0.5",
    ]);
    assert_eq!(code(&res), 2);
}

#[test]
fn metrics_report() {
    let dir = tempfile::tempdir().unwrap();
    let captions = dir.path().join("c.jsonl");
    fs::write(
        &captions,
        "{\"mentioned\":[\"dog\",\"frisbee\",\"tree\"],\"ground_truth\":[\"dog\",\"frisbee\"]}\n{\"mentioned\":[\"cat\"],\"ground_truth\":[\"cat\"]}\n",
    )
    .unwrap();
    let binary = dir.path().join("b.json");
    fs::write(&binary, r#"{"tp":3,"fp":1,"fn":2,"tn":4}"#).unwrap();
    let res = ikod(&[
        "metrics",
        "--captions",
        p(&captions),
        "--binary",
        p(&binary),
    ]);
    assert_eq!(code(&res), 0);
    let v: Value = serde_json::from_slice(&res.stdout).unwrap();
    assert_eq!(v["chair"]["chair_i"], 0.25);
    assert_eq!(v["chair"]["chair_s"], 0.5);
    assert_eq!(v["binary"]["precision"], 0.75);

    let empty = dir.path().join("e.jsonl");
    fs::write(&empty, "").unwrap();
    assert_eq!(code(&ikod(&["metrics", "--captions", p(&empty)])), 2);
    assert_eq!(code(&ikod(&["metrics"])), 2);
}

#[test]
fn analyze_outputs_and_guards() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.json", &config("", 64, 12));
    let run = dir.path().join("run");
    assert_eq!(
        code(&ikod(&["decode", "--config", p(&cfg), "--out", p(&run)])),
        0
    );
    let an = dir.path().join("an");
    assert_eq!(
        code(&ikod(&["analyze", "--input", p(&run), "--out", p(&an)])),
        0
    );
    let deg = fs::read_to_string(an.join("degradation.csv")).unwrap();
    assert!(deg.starts_with("step,relative_position,att_avg\n"));
    assert_eq!(deg.lines().count(), 12);
    let seg = fs::read_to_string(an.join("segments.csv")).unwrap();
    assert_eq!(seg.lines().count(), 1 + 4);
    let kde = fs::read_to_string(an.join("kde.csv")).unwrap();
    assert_eq!(kde.lines().count(), 1 + 41 * 41);

    // three generated positions: segments are undefined
    let cfg = write(dir.path(), "short.json", &config("", 64, 4));
    let short = dir.path().join("short");
    assert_eq!(
        code(&ikod(&["decode", "--config", p(&cfg), "--out", p(&short)])),
        0
    );
    let an = dir.path().join("an-short");
    let res = ikod(&["analyze", "--input", p(&short), "--out", p(&an)]);
    assert_eq!(code(&res), 0);
    assert!(String::from_utf8_lossy(&res.stderr).contains("warning"));
    assert!(!an.join("segments.csv").exists());
    assert!(an.join("degradation.csv").exists());

    // one new token: nothing generated is ever fed back
    let cfg = write(dir.path(), "one.json", &config("", 64, 1));
    let one = dir.path().join("one");
    assert_eq!(
        code(&ikod(&["decode", "--config", p(&cfg), "--out", p(&one)])),
        0
    );
    assert_eq!(
        code(&ikod(&[
            "analyze",
            "--input",
            p(&one),
            "--out",
            p(&dir.path().join("x"))
        ])),
        2
    );

    let broken = dir.path().join("broken");
    fs::create_dir(&broken).unwrap();
    fs::write(
        broken.join("attention_trace.csv"),
        "step,layer,head,att_image\n1,0,0,abc\n",
    )
    .unwrap();
    assert_eq!(
        code(&ikod(&[
            "analyze",
            "--input",
            p(&broken),
            "--out",
            p(&dir.path().join("y"))
        ])),
        2
    );
}

#[test]
fn synthetic_uniform_matches_prediction() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.json", &config("", 64, 16));
    let run = dir.path().join("run");
    assert_eq!(
        code(&ikod(&["decode", "--config", p(&cfg), "--out", p(&run)])),
        0
    );
    let an = dir.path().join("an");
    assert_eq!(
        code(&ikod(&[
            "analyze",
            "--input",
            p(&run),
            "--out",
            p(&an),
            "--synthetic-uniform"
        ])),
        0
    );
    let deg = fs::read_to_string(an.join("degradation.csv")).unwrap();
    let mut lines = deg.lines();
    assert_eq!(
        lines.next(),
        Some("step,relative_position,att_avg,predicted")
    );
    for (t, line) in lines.enumerate() {
        let cols: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        let expected = 6.0 / (6.0 + 5.0 + (t + 1) as f64);
        assert!(
            (cols[2] - expected).abs() <= 2.0 * f64::EPSILON * expected,
            "{line}"
        );
        assert_eq!(cols[3], expected);
    }
}

fn sweep_config(grid: Value) -> Value {
    let mut v = config("", 64, 10);
    v["grid"] = grid;
    v
}

#[test]
fn sweep_rows_follow_grid_order() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "sw.json",
        &sweep_config(serde_json::json!({
            "lambda": [0.2, 0.4, 0.6, 0.8, 1.0],
            "strategy": ["low_attention", "high_attention", "random"]
        })),
    );
    let run = |threads: &str, out: &str| {
        let out = dir.path().join(out);
        let res = ikod_env(
            &["sweep", "--config", p(&cfg), "--out", p(&out)],
            &[("IKOD_THREADS", threads)],
        );
        assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
        (
            fs::read_to_string(out.join("sweep.csv")).unwrap(),
            fs::read_to_string(out.join("sweep_baseline.csv")).unwrap(),
        )
    };
    let (rows, baseline) = run("1", "a");
    let (rows4, baseline4) = run("4", "b");
    assert_eq!(rows, rows4);
    assert_eq!(baseline, baseline4);

    let data: Vec<Vec<&str>> = rows
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect())
        .collect();
    assert_eq!(data.len(), 15);
    for (i, row) in data.iter().enumerate() {
        assert_eq!(row[0], (i + 1).to_string());
    }
    assert_eq!(data[1][5], "high_attention");
    let base: Vec<&str> = baseline.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(base[1], "baseline");
    // ratio-1 rows reproduce the baseline generation
    for row in &data[12..15] {
        assert_eq!(row[12], base[12]);
        assert_eq!(row[7], base[7]);
    }
}

#[test]
fn one_point_sweep_equals_decode() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "sw.json",
        &sweep_config(serde_json::json!({"lambda": [0.4]})),
    );
    let sw = dir.path().join("sw");
    assert_eq!(
        code(&ikod(&["sweep", "--config", p(&cfg), "--out", p(&sw)])),
        0
    );
    let dec = dir.path().join("dec");
    let run_cfg = write(dir.path(), "run.json", &config("", 64, 10));
    assert_eq!(
        code(&ikod(&[
            "decode",
            "--config",
            p(&run_cfg),
            "--out",
            p(&dec)
        ])),
        0
    );

    let summary = &read_json(&dec.join("generation.json"))["summary"];
    let text = fs::read_to_string(sw.join("sweep.csv")).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    let tokens: Vec<String> = summary["tokens"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| t.to_string())
        .collect();
    assert_eq!(row[12], tokens.join(" "));
    assert_eq!(row[6], summary["generated_len"].to_string());
    for (col, key) in [
        (7, "gen_image_attention"),
        (8, "orig_image_attention"),
        (9, "aug_image_attention"),
    ] {
        assert_eq!(
            row[col].parse::<f64>().unwrap(),
            summary[key].as_f64().unwrap()
        );
    }
}

#[test]
fn sweep_with_ground_truth_and_bad_grids() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = sweep_config(serde_json::json!({"alpha": [0.0, 2.0], "beta": [0.1]}));
    v["ground_truth"] =
        serde_json::json!({"object_tokens": [1, 2, 3, 4, 5, 6, 7, 8, 9, 10], "present": [1, 2, 3]});
    let cfg = write(dir.path(), "gt.json", &v);
    let out = dir.path().join("gt");
    assert_eq!(
        code(&ikod(&["sweep", "--config", p(&cfg), "--out", p(&out)])),
        0
    );
    let text = fs::read_to_string(out.join("sweep.csv")).unwrap();
    for line in text.lines().skip(1) {
        let row: Vec<&str> = line.split(',').collect();
        if !row[10].is_empty() {
            let s: f64 = row[10].parse().unwrap();
            assert!(s == 0.0 || s == 1.0);
        }
    }

    let cfg = write(
        dir.path(),
        "empty.json",
        &sweep_config(serde_json::json!({"lambda": []})),
    );
    assert_eq!(
        code(&ikod(&["sweep", "--config", p(&cfg), "--out", p(&out)])),
        2
    );
    let cfg = write(
        dir.path(),
        "badl.json",
        &sweep_config(serde_json::json!({"lambda": [1.5]})),
    );
    assert_eq!(
        code(&ikod(&["sweep", "--config", p(&cfg), "--out", p(&out)])),
        2
    );
    let cfg = write(
        dir.path(),
        "t.json",
        &sweep_config(serde_json::json!({"lambda": [0.5]})),
    );
    let res = ikod_env(
        &["sweep", "--config", p(&cfg), "--out", p(&out)],
        &[("IKOD_THREADS", "zero")],
    );
    assert_eq!(code(&res), 2);
}
