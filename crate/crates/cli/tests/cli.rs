use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn gcnfabric(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gcnfabric")).args(args).output().unwrap()
}

fn report(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn error(out: &Output) -> (i32, Value) {
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    (out.status.code().unwrap(), err)
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn bench_routing_is_deterministic() {
    let args = ["bench-routing", "--fuse", "1", "--trials", "1", "--seed", "7"];
    let a = gcnfabric(&args);
    let b = gcnfabric(&args);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "record,fuse,trial,cycles,active,trial_seed,seed,config_hash");
    assert!(lines[1].starts_with("trial,1,0,"));
    assert!(lines[2].starts_with("mean,1,1,"));
    assert!(lines[1..].iter().all(|l| l.contains(",7,")));
}

#[test]
fn parallel_trials_keep_trial_order() {
    let out = gcnfabric(&["bench-routing", "--fuse", "2", "--trials", "40", "--seed", "1"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let trials: Vec<usize> = text
        .lines()
        .filter(|l| l.starts_with("trial,"))
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert_eq!(trials, (0..40).collect::<Vec<_>>());
}

#[test]
fn estimate_order_prefers_a_transposed_order() {
    let r = report(&gcnfabric(&[
        "estimate-order", "--b", "64", "--n", "64", "--n-bar", "1024", "--d", "256", "--h", "256", "--e", "5000",
        "--c", "8",
    ]));
    assert!(r["selected"].as_str().unwrap().starts_with("Ours"));
    assert_eq!(r["costs"].as_object().unwrap().len(), 4);
    assert!(r["config_hash"].as_str().unwrap().len() == 16);
}

#[test]
fn malformed_edge_list_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("g.txt");
    fs::write(&file, "a b\n").unwrap();
    let (code, err) = error(&gcnfabric(&["partition", "--edges", path(&file)]));
    assert_eq!(code, 2);
    assert_eq!(err["error"], "data");
    assert!(err["message"].as_str().unwrap().contains("line 1"));
}

#[test]
fn usage_errors_exit_one() {
    for args in [
        &["partition", "--bogus"][..],
        &["partition"],
        &["route", "--fuse", "9"],
        &["--lanes", "0", "bench-routing"],
        &["estimate-order", "--b", "0", "--n", "1", "--n-bar", "1", "--d", "1", "--h", "1", "--e", "1", "--c", "1"],
    ] {
        let (code, err) = error(&gcnfabric(args));
        assert_eq!(code, 1, "{args:?}");
        assert_eq!(err["exit_code"], 1);
    }
}

#[test]
fn config_file_and_flags_combine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"seed": 11, "lanes": 4}"#).unwrap();
    let r = report(&gcnfabric(&["--config", path(&cfg), "route", "--fuse", "1"]));
    assert_eq!(r["seed"], 11);
    let r2 = report(&gcnfabric(&["--config", path(&cfg), "--seed", "12", "route", "--fuse", "1"]));
    assert_eq!(r2["seed"], 12);
    assert_ne!(r["config_hash"], r2["config_hash"]);

    fs::write(&cfg, r#"{"sede": 11}"#).unwrap();
    let (code, _) = error(&gcnfabric(&["--config", path(&cfg), "route", "--fuse", "1"]));
    assert_eq!(code, 2);
}

#[test]
fn route_writes_table_and_instructions() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("t.txt");
    let ins = dir.path().join("ins");
    let r = report(&gcnfabric(&[
        "route", "--fuse", "4", "--seed", "2", "--table", path(&table), "--instructions", path(&ins),
    ]));
    assert_eq!(r["active"], 64);
    assert_eq!(r["instruction_replay"], "identical");
    assert!(fs::read_to_string(&table).unwrap().lines().count() > 1);
    assert_eq!(fs::read_dir(&ins).unwrap().count(), 16);
}

#[test]
fn simulate_checks_against_direct_product() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("g.txt");
    let edges: String = (0..300).map(|i| format!("{} {} {}\n", i, (i * 7 + 3) % 300, 1 + i % 3)).collect();
    fs::write(&file, edges).unwrap();
    let util = dir.path().join("u.csv");
    for mode in [&["--integer"][..], &[]] {
        let mut args = vec!["simulate", "--edges", path(&file), "--lanes", "4", "--utilization", path(&util)];
        args.extend_from_slice(mode);
        let r = report(&gcnfabric(&args));
        assert_eq!(r["oracle_check"], "pass");
        assert!(r["stats"]["messages_delivered"].as_u64().unwrap() > 0);
    }
    let csv = fs::read_to_string(&util).unwrap();
    assert!(csv.starts_with("cycle,links_busy,utilization,seed,config_hash"));

    fs::write(&file, "0 1 0.5\n").unwrap();
    let (code, _) = error(&gcnfabric(&["simulate", "--edges", path(&file), "--integer"]));
    assert_eq!(code, 1);
}

#[test]
fn train_step_reduces_loss_on_small_graph() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    for order in ["auto", "CoAg", "OursAgCo"] {
        let o = gcnfabric(&[
            "train-step", "--synthetic", "uniform-random", "--nodes", "400", "--edge-count", "3000", "--hidden", "16",
            "--batch-size", "16", "--fan-outs", "4,3", "--order", order, "--lr", "0.05", "--output", path(&out),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let r: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
        assert!(r["loss_after"].as_f64().unwrap() < r["loss_before"].as_f64().unwrap(), "{order}");
        assert_eq!(r["layers"].as_array().unwrap().len(), 2);
        assert!(r["t_multi_total"].as_u64().unwrap() > 0);
    }
}

#[test]
fn compress_and_partition_agree_on_nnz() {
    let args = ["--synthetic", "power-law", "--nodes", "2000", "--edge-count", "6000", "--seed", "4"];
    let p = report(&gcnfabric(&[&["partition"][..], &args].concat()));
    let c = report(&gcnfabric(&[&["compress"][..], &args].concat()));
    let tiles = p["tiles"].as_array().unwrap();
    let block_sum: u64 = tiles
        .iter()
        .flat_map(|t| t["block_nnz"].as_array().unwrap())
        .flat_map(|r| r.as_array().unwrap())
        .map(|v| v.as_u64().unwrap())
        .sum();
    assert_eq!(block_sum, 6000);
    assert_eq!(c["nnz"], 6000);
    assert!(c["sum_n"].as_u64().unwrap() <= 6000);
}
