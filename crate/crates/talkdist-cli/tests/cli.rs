//! End-to-end CLI behavior: exit codes, overwrite protection, run
//! determinism, and artifact round trips, all on tiny synthetic configs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn td() -> Command {
    Command::new(env!("CARGO_BIN_EXE_td"))
}

fn tmp(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("td-cli-{tag}-{}", std::process::id()));
    std::fs::remove_dir_all(&dir).ok();
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

/// Small-but-real experiment settings shared by these tests.
fn tiny_args(cmd: &mut Command) -> &mut Command {
    cmd.args([
        "--set", "data.kind=synthetic",
        "--set", "synthetic.pretrain_train=400",
        "--set", "synthetic.pretrain_eval=200",
        "--set", "synthetic.downstream_train=48",
        "--set", "synthetic.downstream_eval=200",
        "--set", "teacher.hidden=12,6",
        "--set", "student.hidden=8,4",
        "--set", "channel.hidden=8",
        "--set", "channel.message_dim=6",
        "--set", "net.dropout=0.05",
        "--set", "channel.dropout=0.1",
        "--set", "train.steps=120",
        "--set", "train.batch_size=16",
        "--set", "train.lr=0.003",
        "--set", "train.eval_every=60",
    ])
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "command failed: {:?}\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(cmd: &mut Command) -> i32 {
    cmd.output().unwrap().status.code().unwrap_or(-1)
}

/// Metrics file with the wall_ms column blanked, for determinism compares.
fn metrics_without_wall(path: &Path) -> String {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines()
        .map(|line| {
            let mut fields: Vec<&str> = line.split(',').collect();
            if fields.len() > 1 {
                fields[1] = "_";
            }
            fields.join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn unknown_config_key_is_exit_2() {
    let code = exit_code(td().args(["pretrain", "--set", "no.such.key=1"]));
    assert_eq!(code, 2);
}

#[test]
fn missing_dataset_is_exit_3() {
    let dir = tmp("missing-data");
    let code = exit_code(tiny_args(td().args(["pretrain"])).args([
        "--set",
        "data.kind=movielens",
        "--set",
        "data.task=pretrain",
        "--set",
        "data.dir=/nonexistent-td-data",
        "--out",
        dir.join("run").to_str().unwrap(),
    ]));
    assert_eq!(code, 3);
}

#[test]
fn distill_without_teacher_is_exit_2() {
    let dir = tmp("no-teacher");
    let code = exit_code(tiny_args(td().args(["distill"])).args([
        "--set",
        "method=td",
        "--out",
        dir.join("run").to_str().unwrap(),
    ]));
    assert_eq!(code, 2);
}

#[test]
fn existing_output_requires_force() {
    let dir = tmp("force");
    let out = dir.join("run");
    run_ok(tiny_args(td().args(["pretrain"])).args(["--out", out.to_str().unwrap()]));
    let code =
        exit_code(tiny_args(td().args(["pretrain"])).args(["--out", out.to_str().unwrap()]));
    assert_eq!(code, 2, "second run without --force must refuse");
    run_ok(tiny_args(td().args(["pretrain"])).args(["--out", out.to_str().unwrap(), "--force"]));
}

#[test]
fn pretrain_is_byte_deterministic() {
    let dir = tmp("determinism");
    let a = dir.join("a");
    let b = dir.join("b");
    for out in [&a, &b] {
        run_ok(tiny_args(td().args(["pretrain"])).args(["--out", out.to_str().unwrap(), "--seed", "9"]));
    }
    assert_eq!(
        std::fs::read(a.join("teacher.tdck")).unwrap(),
        std::fs::read(b.join("teacher.tdck")).unwrap(),
        "same seed must reproduce the checkpoint byte-for-byte"
    );
    assert_eq!(
        metrics_without_wall(&a.join("metrics.csv")),
        metrics_without_wall(&b.join("metrics.csv")),
        "metrics must match apart from wall-clock times"
    );
    assert_eq!(
        std::fs::read_to_string(a.join("resolved.config")).unwrap().replace(a.to_str().unwrap(), "X"),
        std::fs::read_to_string(b.join("resolved.config")).unwrap().replace(b.to_str().unwrap(), "X"),
    );
}

#[test]
fn distill_td_writes_channels_and_consistent_metrics() {
    let dir = tmp("td-run");
    let teacher_dir = dir.join("teacher");
    run_ok(tiny_args(td().args(["pretrain"])).args(["--out", teacher_dir.to_str().unwrap()]));
    let run_dir = dir.join("td");
    run_ok(tiny_args(td().args(["distill"])).args([
        "--set", "method=td",
        "--set", "td.k=1",
        "--set", "td.w1=0.05",
        "--set", "td.w2=0.1",
        "--set", "td.w3=0.1",
        "--teacher", teacher_dir.join("teacher.tdck").to_str().unwrap(),
        "--out", run_dir.to_str().unwrap(),
    ]));

    // Checkpoint carries the student body plus all four channel groups.
    let entries = talkdist::checkpoint::load(&run_dir.join("student.tdck")).unwrap();
    for prefix in ["student.layer0.w", "E_g.fc1.w", "D_g.fc1.w", "E_h.fc1.w", "D_h.fc1.w"] {
        assert!(
            entries.iter().any(|e| e.name == prefix),
            "missing {prefix} in checkpoint"
        );
    }

    // Loss columns sum to the total on every train row.
    let rows = talkdist::metrics::read_rows(&run_dir.join("metrics.csv")).unwrap();
    let mut train_rows = 0;
    for row in &rows {
        if let (Some(total), Some(gt)) = (row.loss_total, row.loss_gt) {
            let sum = gt
                + row.loss_interact.unwrap_or(0.0)
                + row.loss_mc.unwrap_or(0.0)
                + row.loss_sc.unwrap_or(0.0);
            assert!(
                (total - sum).abs() <= 1e-5 * total.abs().max(1.0),
                "row {}: total {total} vs sum {sum}",
                row.step
            );
            train_rows += 1;
        }
    }
    assert_eq!(train_rows, 120);
    // The teacher zero-shot row is present.
    assert!(rows
        .iter()
        .any(|r| r.metric_name.as_deref() == Some("teacher_rmse")));
}

#[test]
fn analyze_emits_grids_and_is_reproducible() {
    let dir = tmp("analyze");
    let teacher_dir = dir.join("teacher");
    run_ok(tiny_args(td().args(["pretrain"])).args(["--out", teacher_dir.to_str().unwrap()]));
    let run_dir = dir.join("td");
    run_ok(tiny_args(td().args(["distill"])).args([
        "--set", "method=td",
        "--teacher", teacher_dir.join("teacher.tdck").to_str().unwrap(),
        "--out", run_dir.to_str().unwrap(),
    ]));

    let analyze = |out: &Path| {
        run_ok(tiny_args(td().args(["analyze"])).args([
            "--set", "method=td",
            "--teacher", teacher_dir.join("teacher.tdck").to_str().unwrap(),
            "--student", run_dir.join("student.tdck").to_str().unwrap(),
            "--per-class", "10",
            "--out", out.to_str().unwrap(),
        ]));
    };
    let a = dir.join("cka-a");
    let b = dir.join("cka-b");
    analyze(&a);
    analyze(&b);

    let summary = std::fs::read_to_string(a.join("cka_summary.csv")).unwrap();
    assert!(summary.lines().count() > 1, "summary should have rows: {summary}");
    // One matrix file per bucket; the downstream task has one subpopulation.
    let grids: Vec<_> = std::fs::read_dir(&a)
        .unwrap()
        .filter_map(|e| {
            let name = e.unwrap().file_name().into_string().unwrap();
            name.starts_with("cka_bucket_").then_some(name)
        })
        .collect();
    assert!(!grids.is_empty());
    for g in &grids {
        assert_eq!(
            std::fs::read(a.join(g)).unwrap(),
            std::fs::read(b.join(g)).unwrap(),
            "analysis must be reproducible"
        );
        // Summary values equal the matrix cells they summarize.
        let matrix = std::fs::read_to_string(a.join(g)).unwrap();
        let bucket: u32 = g
            .trim_start_matches("cka_bucket_")
            .trim_end_matches(".tsv")
            .parse()
            .unwrap();
        let lines: Vec<&str> = matrix.lines().collect();
        let header: Vec<&str> = lines[0].split('\t').collect();
        let cell = |row_label: &str, col_label: &str| -> f64 {
            let col = header.iter().position(|h| *h == col_label).unwrap();
            let row = lines.iter().find(|l| l.starts_with(row_label)).unwrap();
            row.split('\t').nth(col).unwrap().parse().unwrap()
        };
        for line in summary.lines().skip(1) {
            let fields: Vec<&str> = line.split(',').collect();
            if fields[0].parse::<u32>().unwrap() != bucket {
                continue;
            }
            let (pair, value) = (fields[1], fields[2].parse::<f64>().unwrap());
            let (ra, cb) = pair.split_once(':').unwrap();
            assert!((cell(ra, cb) - value).abs() < 1e-9);
        }
    }
}

#[test]
fn analyze_on_scratch_checkpoint_reports_missing_channels() {
    let dir = tmp("analyze-scratch");
    let teacher_dir = dir.join("teacher");
    run_ok(tiny_args(td().args(["pretrain"])).args(["--out", teacher_dir.to_str().unwrap()]));
    let run_dir = dir.join("scratch");
    run_ok(tiny_args(td().args(["distill"])).args([
        "--set", "method=scratch",
        "--out", run_dir.to_str().unwrap(),
    ]));
    let out = tiny_args(td().args(["analyze"]))
        .args([
            "--set", "method=td",
            "--teacher", teacher_dir.join("teacher.tdck").to_str().unwrap(),
            "--student", run_dir.join("student.tdck").to_str().unwrap(),
            "--out", dir.join("cka").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("channel"), "unclear error: {stderr}");
}

#[test]
fn gen_data_writes_split_files() {
    let dir = tmp("gendata");
    run_ok(tiny_args(td().args(["gen-data"])).args(["--out", dir.join("out").to_str().unwrap()]));
    for f in ["pretrain_train.tsv", "pretrain_eval.tsv", "downstream_train.tsv", "downstream_eval.tsv"] {
        let text = std::fs::read_to_string(dir.join("out").join(f)).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("y\tx0"), "{f} header");
        assert!(lines.next().is_some(), "{f} has rows");
    }
}

#[test]
fn sweep_aggregates_with_scratch_reference() {
    let dir = tmp("sweep");
    run_ok(tiny_args(td().args(["sweep"])).args([
        "--set", "sweep.vary.method=scratch,ld",
        "--set", "loss.logit=0.5",
        "--set", "sweep.seeds=1,2",
        "--set", "train.steps=60",
        "--out", dir.join("out").to_str().unwrap(),
        "--jobs", "2",
    ]));
    let agg = std::fs::read_to_string(dir.join("out/aggregate.csv")).unwrap();
    let scratch_row = agg
        .lines()
        .find(|l| l.starts_with("method=scratch"))
        .expect("scratch row present");
    let rel: f64 = scratch_row.rsplit(',').next().unwrap().parse().unwrap();
    assert_eq!(rel, 0.0, "scratch improvement over itself is zero");
    let per_seed = std::fs::read_to_string(dir.join("out/per_seed.csv")).unwrap();
    assert_eq!(per_seed.lines().count(), 1 + 4, "2 cells x 2 seeds");
}

#[test]
fn sweep_grid_over_budget_refuses_with_count() {
    let dir = tmp("sweep-budget");
    let out = td()
        .args([
            "sweep",
            "--set", "sweep.vary.td.w1=0.1,0.2,0.3",
            "--set", "sweep.seeds=1,2,3,4",
            "--set", "sweep.max_runs=5",
            "--out", dir.join("out").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("12"), "should state the run count: {stderr}");
}
