use std::path::Path;
use std::process::{Command, Output};

use neumat::gemmsim::{cost_model, AcceleratorConfig, DataflowConfig, LoopOrder, SearchResult, Stationary};
use neumat::ir::io::{save_graph, weights_from_bytes};
use neumat::lowering::LoweredPlan;
use neumat::models::{mlp, Activation};
use neumat::profiler::RangeReport;
use neumat::pwl::{build_elastic, ElasticConfig, NonlinearFunc, PwlTable, ScalarFunction};
use neumat::training::two_blobs;
use sha2::{Digest, Sha256};

fn neumat(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neumat"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = neumat(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn error_line(out: &Output) -> serde_json::Value {
    let text = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(text.trim_end().lines().count(), 1, "{text}");
    serde_json::from_str(text.trim()).unwrap()
}

fn fixture(dir: &Path, act: Activation) {
    save_graph(&mlp(&[2, 8, 2], 8, act, 3), &dir.join("mlp.json")).unwrap();
    std::fs::write(dir.join("data.csv"), two_blobs(16, 2, 2.0, 1.0, 3).to_csv().unwrap()).unwrap();
}

#[test]
fn elastic_gelu_table_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["approximate", "--func", "gelu", "--range", "-8", "8", "--dlx", "0.5", "--dly", "0.1", "--eth", "0"]);
    let text = std::fs::read_to_string(dir.path().join("table.json")).unwrap();
    let table = PwlTable::from_json(&text).unwrap();
    assert_eq!((table.r_min(), table.r_max()), (-8.0, 8.0));
    assert!(table.breakpoints().windows(2).all(|w| w[0] < w[1]));
    let expected = build_elastic(&NonlinearFunc::Gelu, -8.0, 8.0, &ElasticConfig::new(0.5, 0.1, 0.0)).unwrap();
    assert_eq!(table, expected);
    for i in 0..=1600 {
        let x = -8.0 + i as f64 / 100.0;
        assert!((table.evaluate(x) - NonlinearFunc::Gelu.eval(x)).abs() < 0.1);
    }
    assert_eq!(table.to_json().unwrap() + "\n", text);
}

#[test]
fn search_matches_enumeration() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["search", "--m", "64", "--k", "64", "--n", "64"]);
    let text = std::fs::read_to_string(dir.path().join("blocking.json")).unwrap();
    let found: SearchResult = serde_json::from_str(&text).unwrap();
    let acc = AcceleratorConfig::default();
    let mut best: Option<(u64, f64, u64, DataflowConfig)> = None;
    for tm in (2..=128).step_by(2) {
        for tk in (2..=128).step_by(2) {
            for tn in (2..=128).step_by(2) {
                for order in LoopOrder::ALL {
                    let df = DataflowConfig {
                        tile_m: tm,
                        tile_k: tk,
                        tile_n: tn,
                        stationary: Stationary::Output,
                        order,
                    };
                    let r = cost_model(64, 64, 64, &df, &acc);
                    if !r.is_feasible() {
                        continue;
                    }
                    let phases = (64usize.div_ceil(tm.min(64)) * 64usize.div_ceil(tk.min(64)) * 64usize.div_ceil(tn.min(64))) as u64;
                    let key = (r.latency_cycles, r.energy_j(), phases);
                    if best.as_ref().is_none_or(|b| key < (b.0, b.1, b.2)) {
                        best = Some((key.0, key.1, key.2, df));
                    }
                }
            }
        }
    }
    assert_eq!(found.dataflow, best.unwrap().3);
    assert_eq!(serde_json::to_string_pretty(&found).unwrap() + "\n", text);
}

#[test]
fn relu_fixture_runs_exactly() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), Activation::Relu);
    ok(dir.path(), &["lower", "--graph", "mlp.json", "--out", "plan.json"]);
    ok(dir.path(), &["run", "--plan", "plan.json", "--input", "data.csv", "--graph", "mlp.json", "--out", "out"]);
    let mut r = csv::Reader::from_path(dir.path().join("out/fidelity.csv")).unwrap();
    let headers = r.headers().unwrap().clone();
    assert_eq!(headers.iter().collect::<Vec<_>>(), ["scope", "name", "max_abs", "mean_abs", "rel"]);
    let mut rows = 0;
    for rec in r.records() {
        let v: f64 = rec.unwrap()[2].parse().unwrap();
        assert!(v <= 1e-5);
        rows += 1;
    }
    assert!(rows > 0);
    let outs = weights_from_bytes(&std::fs::read(dir.path().join("out/outputs.nmwt")).unwrap()).unwrap();
    // 32 samples in batches of 8
    assert_eq!(outs["logits"].shape(), &[4, 8, 2]);
}

#[test]
fn artifacts_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture(d, Activation::Gelu);
    ok(d, &["profile", "--graph", "mlp.json", "--data", "data.csv", "--policy", "percentile(1)"]);
    ok(d, &["approximate", "--from-ranges", "ranges.json", "--segments", "16", "--out", "tables"]);
    ok(d, &["lower", "--graph", "mlp.json", "--tables", "tables", "--out", "plan.json"]);

    let text = std::fs::read_to_string(d.join("ranges.json")).unwrap();
    assert_eq!(RangeReport::from_json(&text).unwrap().to_json() + "\n", text);
    let text = std::fs::read_to_string(d.join("tables/act1.json")).unwrap();
    assert_eq!(PwlTable::from_json(&text).unwrap().to_json().unwrap() + "\n", text);
    let text = std::fs::read_to_string(d.join("plan.json")).unwrap();
    let plan = LoweredPlan::load(&d.join("plan.json")).unwrap();
    assert_eq!(plan.to_json() + "\n", text);
    plan.save(&d.join("again.json")).unwrap();
    assert_eq!(std::fs::read(d.join("plan.nmwt")).unwrap(), std::fs::read(d.join("again.nmwt")).unwrap());
}

#[test]
fn manifests_hash_inputs_and_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture(d, Activation::Gelu);
    ok(d, &["profile", "--graph", "mlp.json", "--data", "data.csv"]);
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("ranges.json.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "profile");
    assert_eq!(m["tool_version"], env!("CARGO_PKG_VERSION"));
    let hash = |p: &str| hex::encode(Sha256::digest(std::fs::read(d.join(p)).unwrap()));
    let inputs: Vec<(&str, &str)> = m["inputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| (e["path"].as_str().unwrap(), e["sha256"].as_str().unwrap()))
        .collect();
    assert_eq!(inputs.len(), 3, "graph, its weights and the data");
    for (p, h) in inputs {
        assert_eq!(h, hash(p));
    }
    assert_eq!(m["outputs"][0]["sha256"].as_str().unwrap(), hash("ranges.json"));
    assert_eq!(m["config"]["policy"], "minmax");
}

#[test]
fn training_writes_weights_metrics_and_plan() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture(d, Activation::Gelu);
    ok(d, &["profile", "--graph", "mlp.json", "--data", "data.csv"]);
    ok(d, &["approximate", "--from-ranges", "ranges.json", "--segments", "32"]);
    ok(d, &["lower", "--graph", "mlp.json", "--tables", "tables"]);
    std::fs::write(d.join("cfg.json"), r#"{"epochs": 2, "batch_size": 8}"#).unwrap();
    ok(d, &["train", "--plan", "plan.json", "--data", "data.csv", "--config", "cfg.json"]);
    let metrics = std::fs::read_to_string(d.join("train/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("epoch,loss,train_acc,eval_acc"));
    assert_eq!(metrics.lines().count(), 3);
    let w = weights_from_bytes(&std::fs::read(d.join("train/weights.nmwt")).unwrap()).unwrap();
    assert!(w.contains_key("fc1.weight") && w.contains_key("logits.bias"));
    LoweredPlan::load(&d.join("train/plan.json")).unwrap();

    std::fs::write(d.join("bad.json"), r#"{"epochs": 2, "bogus": 1}"#).unwrap();
    let out = neumat(d, &["train", "--plan", "plan.json", "--data", "data.csv", "--config", "bad.json"]);
    assert_eq!(out.status.code(), Some(2));
    std::fs::write(d.join("wild.json"), r#"{"epochs": 20, "learning_rate": 1e30, "momentum": 0}"#).unwrap();
    let out = neumat(d, &["train", "--plan", "plan.json", "--data", "data.csv", "--config", "wild.json"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_line(&out)["code"], 3);
}

#[test]
fn simulate_and_report_csv() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture(d, Activation::Relu);
    ok(d, &["lower", "--graph", "mlp.json"]);
    ok(d, &["lower", "--graph", "mlp.json", "--int8", "--data", "data.csv", "--out", "q.json"]);
    ok(d, &["simulate", "--plan", "plan.json"]);
    let cost = std::fs::read_to_string(d.join("cost.csv")).unwrap();
    assert!(cost.lines().last().unwrap().starts_with("total,"));
    ok(d, &["report", "--inputs", "plan.json", "q.json"]);
    let mut r = csv::Reader::from_path(d.join("summary.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!((&rows[0][1], &rows[1][1]), ("fp32", "int8"));
    let bytes = |i: usize| rows[i][5].parse::<usize>().unwrap();
    assert_eq!(bytes(0), 2 * bytes(1));
    assert_eq!(&rows[0][12], "");
}

#[test]
fn errors_are_single_json_lines_with_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = neumat(d, &["search", "--m", "4", "--k", "4", "--n", "4", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    let e = error_line(&out);
    assert_eq!(e["code"], 1);
    assert!(e["message"].as_str().unwrap().contains("--frobnicate"));
    assert!(e.get("context").is_some());

    let out = neumat(d, &["search", "--m", "0", "--k", "4", "--n", "4"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["context"], "search");

    let out = neumat(d, &["lower", "--graph", "missing.json"]);
    assert_eq!(out.status.code(), Some(2));

    let out = neumat(d, &["approximate", "--func", "gelu", "--range", "-1", "1"]);
    assert_eq!(out.status.code(), Some(1));

    let out = neumat(d, &["lower", "--graph", "g.json", "--int8"]);
    assert_eq!(out.status.code(), Some(1));

    let out = neumat(d, &[]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn thread_cap_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let run = |v: &str| {
        Command::new(env!("CARGO_BIN_EXE_neumat"))
            .args(["search", "--m", "30", "--k", "20", "--n", "10"])
            .env("NEUMAT_THREADS", v)
            .current_dir(dir.path())
            .output()
            .unwrap()
    };
    assert!(run("1").status.success());
    let one = std::fs::read(dir.path().join("blocking.json")).unwrap();
    assert!(run("3").status.success());
    assert_eq!(std::fs::read(dir.path().join("blocking.json")).unwrap(), one);
    assert_eq!(run("0").status.code(), Some(1));
    assert_eq!(run("lots").status.code(), Some(1));
}

#[test]
fn version_and_help_cover_every_flag() {
    let dir = tempfile::tempdir().unwrap();
    let out = neumat(dir.path(), &["--version"]);
    assert!(out.status.success());
    let v = String::from_utf8(out.stdout).unwrap();
    assert!(v.contains(env!("CARGO_PKG_VERSION")) && v.contains("plan format 1"));
    let flags: [(&str, &[&str]); 8] = [
        ("profile", &["--graph", "--data", "--policy", "--padding", "--out"]),
        (
            "approximate",
            &["--func", "--range", "--from-ranges", "--dlx", "--dly", "--eth", "--max-segments", "--segments", "--corrected", "--out"],
        ),
        ("lower", &["--graph", "--tables", "--ranges", "--out", "--int8", "--data"]),
        ("run", &["--plan", "--input", "--graph", "--exact", "--out"]),
        ("simulate", &["--plan", "--accel", "--search-stationary", "--energy-budget", "--out"]),
        ("search", &["--m", "--k", "--n", "--accel", "--search-stationary", "--energy-budget", "--out"]),
        ("train", &["--plan", "--data", "--config", "--eval", "--exact", "--out"]),
        ("report", &["--inputs", "--accel", "--graph", "--data", "--out"]),
    ];
    for (cmd, list) in flags {
        let out = neumat(dir.path(), &[cmd, "--help"]);
        assert!(out.status.success());
        let help = String::from_utf8(out.stdout).unwrap();
        for f in list {
            assert!(help.contains(f), "{cmd} help lacks {f}");
        }
    }
}

#[test]
fn shipped_accelerator_config_is_the_default() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/accelerator.json");
    let text = std::fs::read_to_string(path).unwrap();
    assert_eq!(AcceleratorConfig::from_json(&text).unwrap(), AcceleratorConfig::default());
    assert_eq!(AcceleratorConfig::default().to_json() + "\n", text);
}
