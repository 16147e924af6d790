use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const LENET: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/samples/lenet_like.json");

const MLP: &str = r#"{"name":"m","num_classes":4,"input_shape":[8,1,1],
"nodes":[{"id":0,"kind":"input"},{"id":1,"kind":"dense","params":{"out_features":16}},{"id":2,"kind":"relu"},
{"id":3,"kind":"dense","params":{"out_features":16}},{"id":4,"kind":"relu"},
{"id":5,"kind":"dense","params":{"out_features":4}},{"id":6,"kind":"exit_head","params":{"num_classes":4}}],
"edges":[[0,1],[1,2],[2,3],[3,4],[4,5],[5,6]],"exits":[6]}"#;

fn mebnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mebnn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = mebnn(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn three_exit(dir: &Path) -> PathBuf {
    let g = dir.join("l3.json");
    ok(&[
        "transform",
        "--graph",
        LENET,
        "--exits",
        "3",
        "--mcd-layers",
        "1",
        "--keep-rate",
        "0.75",
        "--out",
        s(&g),
    ]);
    g
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(mebnn(&["map", "--bogus"]).status.code(), Some(2));
    assert_eq!(mebnn(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        mebnn(&["map", "--graph", LENET, "--strategy", "diagonal"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn domain_errors_exit_1() {
    let out = mebnn(&["flops", "--graph", "/no/such/graph.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    // the single-exit sample has no dropout layers to map
    assert_eq!(mebnn(&["map", "--graph", LENET]).status.code(), Some(1));
}

#[test]
fn selftest_passes() {
    let out = ok(&["selftest"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().count() >= 5);
    assert!(text.lines().all(|l| l.starts_with("PASS")));
}

#[test]
fn emit_then_remap_reproduces_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let g = three_exit(dir.path());
    let plan = dir.path().join("plan.json");
    let again = dir.path().join("again.json");
    let base = [
        "emit",
        "--graph",
        s(&g),
        "--n-sample",
        "12",
        "--strategy",
        "mixed:2",
        "--reuse",
        "4",
        "--seed",
        "7",
    ];
    ok(&[&base[..], &["--out", s(&plan)]].concat());
    ok(&[&base[..], &["--out", s(&again)]].concat());
    assert_eq!(fs::read(&plan).unwrap(), fs::read(&again).unwrap());

    let remap = dir.path().join("remap.json");
    let out = ok(&["map", "--graph", s(&g), "--plan", s(&plan), "--out", s(&remap)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("plan verified"));
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&plan).unwrap()).unwrap();
    let fresh: serde_json::Value = serde_json::from_str(&fs::read_to_string(&remap).unwrap()).unwrap();
    assert_eq!(doc["estimate"], fresh["estimate"]);
    assert_eq!(doc["simulated_latency_cycles"], fresh["simulated"]["latency_cycles"]);
}

#[test]
fn tampered_plan_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let g = three_exit(dir.path());
    let plan = dir.path().join("plan.json");
    ok(&["emit", "--graph", s(&g), "--out", s(&plan)]);
    let text = fs::read_to_string(&plan).unwrap();
    let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    doc["graph"]["sha256"] = serde_json::Value::String("0".repeat(64));
    fs::write(&plan, doc.to_string()).unwrap();
    let out = mebnn(&["map", "--graph", s(&g), "--plan", s(&plan)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("hash"));
}

#[test]
fn oversized_emit_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    let g = three_exit(dir.path());
    let dev = dir.path().join("tiny.json");
    fs::write(
        &dev,
        r#"{"name":"tiny","dsp":4,"bram_kb":1,"lut":100,"ff":100,"clock_mhz":100}"#,
    )
    .unwrap();
    assert_eq!(
        mebnn(&["emit", "--graph", s(&g), "--device", s(&dev)]).status.code(),
        Some(1)
    );
    ok(&["emit", "--graph", s(&g), "--device", s(&dev), "--force"]);
}

#[test]
fn train_and_infer_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("m.json");
    fs::write(&base, MLP).unwrap();
    let g = dir.path().join("m3.json");
    ok(&[
        "transform",
        "--graph",
        s(&base),
        "--exits",
        "3",
        "--mcd-layers",
        "1",
        "--out",
        s(&g),
    ]);
    let mut outputs = Vec::new();
    for run in 0..2 {
        let trained = dir.path().join(format!("t{run}.json"));
        let x = dir.path().join(format!("x{run}.bten"));
        ok(&[
            "train",
            "--graph",
            s(&g),
            "--epochs",
            "2",
            "--n-train",
            "200",
            "--n-test",
            "40",
            "--seed",
            "3",
            "--out",
            s(&trained),
            "--test-inputs",
            s(&x),
        ]);
        let pred = ok(&[
            "infer",
            "--graph",
            s(&trained),
            "--input",
            s(&x),
            "--threshold",
            "0.9",
            "--seed",
            "5",
        ])
        .stdout;
        let doc: serde_json::Value = serde_json::from_slice(&pred).unwrap();
        assert_eq!(doc["predictions"].as_array().unwrap().len(), 40);
        outputs.push((fs::read(&trained).unwrap(), pred));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn flops_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let g = three_exit(dir.path());
    let out = dir.path().join("f.json");
    let table = ok(&["flops", "--graph", s(&g), "--n-sample", "6", "--out", s(&out)]).stdout;
    assert!(String::from_utf8(table).unwrap().contains("flop_main"));
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(doc["n_pass"], 2);
    assert_eq!(
        doc["sampling_cost"].as_u64().unwrap(),
        doc["exit_costs"].as_array().unwrap().last().unwrap().as_u64().unwrap()
    );
}

#[test]
fn dse_with_fixed_seed_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("m.json");
    fs::write(&base, MLP).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["dse", "--graph", s(&base), "--quick", "--seed", "7", "--out", s(&a)]);
    ok(&["dse", "--graph", s(&base), "--quick", "--seed", "7", "--out", s(&b)]);
    for f in ["results.csv", "hw_candidates.csv", "plan.json", "graph.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}
