use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedmdfnn"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn demo_tables_prints_the_pairing() {
    let o = run(&["demo-tables"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("{(e1,v2),(e2,v3),(e3,v1)}"), "{out}");
    assert!(out.contains("5CRD321 -> #3CR#132#2"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&[]).status.code(), Some(1));
    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"));
    assert_eq!(run(&["eval", "--input", "x"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_model_exits_two_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere/model.fmdf");
    let o = run(&[
        "eval",
        "--model",
        missing.to_str().unwrap(),
        "--input",
        dir.path().to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(missing.to_str().unwrap()), "{}", stderr(&o));
}

#[test]
fn bad_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("world.json");
    std::fs::write(&cfg, "{\"num_vehicles\": 1}").unwrap();
    let o = run(&["gen", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("w").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

fn ok(o: Output) -> String {
    assert_eq!(o.status.code(), Some(0), "stdout: {}\nstderr: {}", stdout(&o), stderr(&o));
    stdout(&o)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gen_label_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let world = dir.path().join("world");
    let cfg = dir.path().join("world.json");
    std::fs::write(&cfg, "{\"duration\": 20.0, \"road_layout\": \"grid\"}").unwrap();
    ok(run(&["--seed", "5", "--config", p(&cfg), "--out", p(&world), "gen"]));
    for f in ["frames.jsonl", "messages.jsonl", "sensors.jsonl", "truth.jsonl", "cct.json", "confusion.json"] {
        assert!(world.join(f).exists(), "{f}");
    }

    let labeled = dir.path().join("labeled");
    ok(run(&["label", "--input", p(&world), "--dataset", "manual", "--out", p(&labeled)]));
    let data = labeled.join("dataset.jsonl");
    assert!(std::fs::read_to_string(&data).unwrap().lines().count() > 0);

    let exp = dir.path().join("exp.json");
    std::fs::write(&exp, "{\"epochs\": 2}").unwrap();
    let model = dir.path().join("model");
    ok(run(&["train", "--config", p(&exp), "--data", p(&data), "--out", p(&model)]));
    assert!(model.join("model.fmdf").exists());

    let eval = dir.path().join("eval");
    let out = ok(run(&[
        "eval",
        "--model",
        p(&model.join("model.fmdf")),
        "--input",
        p(&world),
        "--mode",
        "full",
        "--dump-tables",
        "--out",
        p(&eval),
    ]));
    assert!(out.contains("CR_total"));
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["cr_total"].as_f64().unwrap() >= 0.0);
    assert!(std::fs::read_dir(eval.join("tables")).unwrap().count() > 0);

    // Same seed, same files.
    let again = dir.path().join("again");
    ok(run(&["--seed", "5", "--config", p(&cfg), "--out", p(&again), "gen"]));
    assert_eq!(std::fs::read(world.join("frames.jsonl")).unwrap(), std::fs::read(again.join("frames.jsonl")).unwrap());
}

#[test]
fn serve_and_clients_over_tcp() {
    let dir = tempfile::tempdir().unwrap();
    let world = dir.path().join("world");
    let cfg = dir.path().join("world.json");
    std::fs::write(&cfg, "{\"duration\": 15.0}").unwrap();
    ok(run(&["--seed", "8", "--config", p(&cfg), "--out", p(&world), "gen"]));
    let labeled = dir.path().join("labeled");
    ok(run(&["label", "--input", p(&world), "--out", p(&labeled)]));
    let data = labeled.join("dataset.jsonl");

    let addr = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().to_string()
    };
    let served = dir.path().join("served");
    let server = bin()
        .args(["serve", "--bind", &addr, "--clients", "2", "--rounds", "2", "--out", p(&served)])
        .stdout(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    let clients: Vec<_> = (0..2)
        .map(|id| {
            bin()
                .args(["client", "--connect", &addr, "--data", p(&data), "--id", &id.to_string()])
                .stdout(std::process::Stdio::piped())
                .stderr(std::process::Stdio::piped())
                .spawn()
                .unwrap()
        })
        .collect();
    let status = server.wait_with_output().unwrap();
    assert_eq!(status.status.code(), Some(0));
    for c in clients {
        let out = ok(c.wait_with_output().unwrap());
        assert!(out.contains("finished 2 rounds"), "{out}");
    }
    assert!(served.join("model.fmdf").exists());
    let transcript = std::fs::read_to_string(served.join("transcript.ndjson")).unwrap();
    assert!(transcript.contains("\"type\":\"shutdown\""));
    assert!(!transcript.contains("\"features\""));
}
