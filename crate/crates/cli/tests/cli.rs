use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name).display().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

#[test]
fn trilateration_fixture_recovers_the_point() {
    let dir = tempfile::tempdir().unwrap();
    let record = p(dir.path(), "tri.json");
    let out = scg(&[
        "localise", "--scene", &fixture("trilateration.jsonl"), "--scene-id", "tri_p0", "--target", "pillow",
        "--oracle-distances", "--record", &record,
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let line = text.lines().find(|l| l.starts_with("position ")).unwrap();
    let xy: Vec<f64> = line.split_whitespace().skip(1).map(|v| v.parse().unwrap()).collect();
    assert!((xy[0] - 1.0).abs() < 1e-3 && (xy[1] - 1.0).abs() < 1e-3, "{line}");
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&record).unwrap()).unwrap();
    assert_eq!(json["anchors"].as_array().unwrap().len(), 3);
    assert_eq!(json["anchors_used"], 3);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let conf = p(dir.path(), "bad.conf");
    std::fs::write(&conf, "train.epochs = 2\nppn.depth = 3\n").unwrap();
    let out = scg(&["train", "--config", &conf, "--data", &fixture("trilateration.jsonl"), "--out", &p(dir.path(), "m.ckpt")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("ppn.depth"), "{}", stderr(&out));

    let out = scg(&["train", "--data", &fixture("trilateration.jsonl"), "--set", "localiser.nonsense=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("localiser.nonsense"));

    assert_eq!(scg(&["evaluate", "--data"]).status.code(), Some(1));
    assert_eq!(scg(&["no-such-command"]).status.code(), Some(1));

    let out = scg(&["localise", "--scene", &p(dir.path(), "missing.jsonl"), "--scene-id", "x", "--target", "y", "--oracle-distances"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("missing.jsonl"));

    let out = scg(&["localise", "--scene", &fixture("trilateration.jsonl"), "--scene-id", "nope", "--target", "pillow", "--oracle-distances"]);
    assert_eq!(out.status.code(), Some(3));

    assert!(scg(&["--help"]).status.success());
}

#[test]
fn gradcheck_passes() {
    let out = scg(&["gradcheck"]);
    assert!(out.status.success(), "{}", stdout(&out));
    assert!(stdout(&out).contains("all 11 checks passed"));
}

fn tiny_config(dir: &Path) -> String {
    let conf = p(dir, "tiny.conf");
    std::fs::write(
        &conf,
        "ppn.widths = 8,16\nppn.heads = 2\nppn.mlp_hidden = 16\ntrain.epochs = 2\ntrain.seed = 3\n",
    )
    .unwrap();
    conf
}

fn generate(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    let out = scg(&["gen-synth", "--scenes", "40", "--test-scenes", "12", "--seed", "4", "--out", &data.display().to_string()]);
    assert!(out.status.success(), "{}", stderr(&out));
    for f in ["train.jsonl", "test.jsonl", "knowledge.tsv", "embeddings.txt"] {
        assert!(data.join(f).exists(), "{f}");
    }
    data
}

#[test]
fn train_evaluate_localise_round() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = generate(d);
    let conf = tiny_config(d);
    let ckpt = p(d, "m.ckpt");
    let train_args = |out: &str| -> Vec<String> {
        [
            "train", "--data", &p(&data, "train.jsonl"), "--kb", &p(&data, "knowledge.tsv"), "--emb",
            &p(&data, "embeddings.txt"), "--config", &conf, "--out", out,
        ]
        .map(String::from)
        .to_vec()
    };
    let args = train_args(&ckpt);
    let out = scg(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(out.status.success(), "{}", stderr(&out));
    for f in ["m.ckpt", "m.last.ckpt", "m.log.jsonl", "m.config"] {
        assert!(d.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(d.join("m.log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(std::fs::read_to_string(d.join("m.config")).unwrap().contains("ppn.input_dim = 128"));

    let args = train_args(&p(d, "again.ckpt"));
    assert!(scg(&args.iter().map(String::as_str).collect::<Vec<_>>()).status.success());
    assert_eq!(std::fs::read(d.join("m.ckpt")).unwrap(), std::fs::read(d.join("again.ckpt")).unwrap());

    let test = p(&data, "test.jsonl");
    let report = p(d, "report.txt");
    let out = scg(&["evaluate", "--data", &test, "--model", &ckpt, "--report", &report]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(&report).unwrap();
    for key in ["mppe=", "lsr@1=", "lsr@2=", "lsr@3=", "msle=", "ppn.edge_kinds=", "input.data.sha256=", "input.model.sha256=", "[completeness]"] {
        assert!(text.contains(key), "{key} missing from\n{text}");
    }
    assert!(Path::new(&format!("{report}.bins.tsv")).exists());
    let out = scg(&["evaluate", "--data", &test, "--model", &ckpt, "--report", &p(d, "again.txt")]);
    assert!(out.status.success());
    assert_eq!(std::fs::read_to_string(p(d, "again.txt")).unwrap(), text);

    let out = scg(&["evaluate", "--data", &test, "--model", &ckpt, "--report", &p(d, "prox.txt"), "--ablate-edges", "proximity"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(std::fs::read_to_string(p(d, "prox.txt")).unwrap().contains("evaluate.edge_kinds=proximity"));

    for bad in [vec!["--layers", "3"], vec!["--no-concat"], vec!["--ablate-edges", "atlocation"], vec!["--set", "ppn.heads=4"]] {
        let mut args = vec!["evaluate", "--data", &test, "--model", &ckpt, "--report", &report];
        args.extend(bad.iter().copied());
        let out = scg(&args);
        assert_eq!(out.status.code(), Some(2), "{bad:?}: {}", stderr(&out));
    }
    assert!(scg(&["evaluate", "--data", &test, "--model", &ckpt, "--report", &report, "--layers", "2"]).status.success());

    let first = std::fs::read_to_string(&test).unwrap();
    let scene_id = first.lines().next().unwrap().split('"').nth(3).unwrap().to_string();
    let record: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    let target = record["targets"][0]["category"].as_str().unwrap().to_string();
    let rec = p(d, "loc.json");
    let out = scg(&["localise", "--scene", &test, "--scene-id", &scene_id, "--target", &target, "--model", &ckpt, "--record", &rec]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).starts_with("position "));
    assert!(Path::new(&rec).exists());
}

#[test]
fn training_variants_and_baselines() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = generate(d);
    let conf = tiny_config(d);
    let train = p(&data, "train.jsonl");
    let test = p(&data, "test.jsonl");
    let sg = p(d, "sg.ckpt");
    let out = scg(&[
        "train", "--data", &train, "--config", &conf, "--out", &sg, "--ablate-edges", "proximity", "--set",
        "ppn.embedding_mode=learned", "--layers", "1", "--no-concat", "--epochs", "1",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let out = scg(&["evaluate", "--data", &test, "--model", &sg, "--report", &p(d, "sg.txt"), "--layers", "1", "--no-concat"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(p(d, "sg.txt")).unwrap();
    assert!(text.contains("ppn.widths=8\n") && text.contains("ppn.concat_final=false"));
    assert!(!text.contains("input.kb.sha256"));

    let out = scg(&["train", "--data", &train, "--config", &conf, "--out", &p(d, "x.ckpt")]);
    assert_eq!(out.status.code(), Some(2), "pretrained mode without --emb");

    for kind in ["mean", "median", "mode"] {
        let report = p(d, &format!("{kind}.txt"));
        let table = p(d, &format!("{kind}.tsv"));
        let out = scg(&["baseline", "--kind", kind, "--train", &train, "--data", &test, "--report", &report, "--table", &table]);
        assert!(out.status.success(), "{}", stderr(&out));
        assert!(std::fs::read_to_string(&report).unwrap().contains(&format!("baseline.kind={kind}")));
    }
    assert_eq!(std::fs::read(p(d, "mean.tsv")).unwrap(), std::fs::read(p(d, "mode.tsv")).unwrap());
    let out = scg(&["baseline", "--kind", "mlp-cs", "--train", &train, "--data", &test, "--report", &p(d, "cs.txt"), "--epochs", "1", "--hidden", "8"]);
    assert_eq!(out.status.code(), Some(2));
    let out = scg(&[
        "baseline", "--kind", "mlp-cs", "--train", &train, "--data", &test, "--report", &p(d, "cs.txt"), "--epochs", "1",
        "--hidden", "8,8", "--kb", &p(&data, "knowledge.tsv"),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(std::fs::read_to_string(p(d, "cs.txt")).unwrap().contains("baseline.hidden=8,8"));
}
