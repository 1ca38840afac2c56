use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn actpred(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_actpred"))
        .args(args)
        .current_dir(dir)
        .env_remove("ACTPRED_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = "epochs = 2\nhidden = 8\nembed_dim = 8\npad_to = 6\nwindow_n = 3\n";

/// Small synthetic dataset plus a tiny training config.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("synth.txt"),
        "name = toy\ninterventions = 6\nmean_length = 30\nlength_spread = 5\nphases = 8:1.0\n",
    )
    .unwrap();
    fs::write(dir.path().join("tiny.txt"), TINY).unwrap();
    let o = actpred(dir.path(), &["data", "synth", "--config", "synth.txt", "--seed", "7", "--out", "toy.csv"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    dir
}

#[test]
fn train_predict_and_transfer() {
    let ws = workspace();
    let d = ws.path();
    let o = actpred(d, &["train", "--data", "toy.csv", "--config", "tiny.txt", "--out", "m.model", "--seed", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("final_loss"));

    let o = actpred(d, &["predict", "--model", "m.model", "--data", "toy.csv", "--at", "toy_001:5", "--top", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<String> = stdout(&o).lines().map(String::from).collect();
    assert_eq!(lines.len(), 3);
    let probs: Vec<f64> = lines.iter().map(|l| l.split('\t').nth(1).unwrap().parse().unwrap()).collect();
    assert!(probs.windows(2).all(|w| w[0] >= w[1]));

    let o = actpred(d, &["transfer", "export", "--model", "m.model", "--out", "b.bundle"]);
    assert!(o.status.success());
    assert!(!fs::read_to_string(d.join("b.bundle")).unwrap_or_default().contains("dense"));
    let o = actpred(
        d,
        &["transfer", "init", "--bundle", "b.bundle", "--data", "toy.csv", "--config", "tiny.txt", "--out", "t.model"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn seed_comes_from_environment() {
    let ws = workspace();
    let d = ws.path();
    let run = |seed: &str, out: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_actpred"))
            .args(["data", "synth", "--config", "synth.txt", "--out", out])
            .current_dir(d)
            .env("ACTPRED_SEED", seed)
            .output()
            .unwrap();
        assert!(o.status.success());
        fs::read(d.join(out)).unwrap()
    };
    assert_eq!(run("7", "a.csv"), fs::read(d.join("toy.csv")).unwrap());
    assert_ne!(run("8", "b.csv"), fs::read(d.join("toy.csv")).unwrap());
}

#[test]
fn dataset_tools() {
    let ws = workspace();
    let d = ws.path();
    let o = actpred(d, &["data", "stats", "--in", "toy.csv"]);
    assert!(stdout(&o).starts_with("interventions\t6"));
    let o = actpred(d, &["data", "shared", "--a", "toy.csv", "--b", "toy.csv"]);
    assert_eq!(stdout(&o).trim(), "activity\t100.0");
    let o = actpred(d, &["data", "mix", "--in", "toy.csv", "--in", "toy.csv", "--out", "mix.csv"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("interventions\t12"));
}

#[test]
fn corpus_and_embeddings() {
    let ws = workspace();
    let d = ws.path();
    fs::create_dir(d.join("docs")).unwrap();
    let text = "The surgeon cuts the ligament with the scalpel. The assistant holds the retractor near the ligament. ";
    fs::write(d.join("docs/a.txt"), text.repeat(20)).unwrap();
    let o = actpred(d, &["corpus", "build", "--in", "docs", "--out", "c.txt"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = actpred(d, &["corpus", "stats", "--in", "c.txt"]);
    assert!(stdout(&o).starts_with("tokens\t"));
    for method in ["cooc", "cbow"] {
        let out = format!("{method}.emb");
        let o = actpred(
            d,
            &["embed", "train", "--method", method, "--corpus", "c.txt", "--dim", "8", "--epochs", "2", "--out", &out],
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(d.join(&out).exists());
    }
}

#[test]
fn cross_validation_and_compare() {
    let ws = workspace();
    let d = ws.path();
    fs::write(d.join("base.pipe"), format!("label = base\nruns = 1\n{TINY}")).unwrap();
    let o = actpred(d, &["eval", "cv", "--data", "toy.csv", "--pipeline", "base.pipe", "--k", "2", "--out", "r.csv"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = fs::read_to_string(d.join("r.csv")).unwrap();
    assert!(report.starts_with("config,dataset,fold,run,accuracy\nbase,toy,1,1,"));
    let o = actpred(d, &["eval", "compare", "--a", "r.csv", "--b", "r.csv"]);
    assert!(stdout(&o).contains("base,"));
}

#[test]
fn plan_run_is_reproducible() {
    let ws = workspace();
    let d = ws.path();
    let plan = format!(
        "seed = 3\nout = out\nk = 2\nruns = 1\n{TINY}\n[step base]\nkind = cv\ndata = toy.csv\n\n\
         [step again]\nkind = cv\ndata = toy.csv\nlearning_rate = 0.01\nbaseline = @base\n"
    );
    fs::write(d.join("p.plan"), plan).unwrap();
    let o = actpred(d, &["plan", "run", "p.plan"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let first = fs::read(d.join("out/summary.csv")).unwrap();
    let o = actpred(d, &["--jobs", "2", "plan", "run", "p.plan", "--out", "out2"]);
    assert!(o.status.success());
    assert_eq!(first, fs::read(d.join("out2/summary.csv")).unwrap());
}

#[test]
fn exit_codes() {
    let ws = workspace();
    let d = ws.path();
    assert_eq!(actpred(d, &["--help"]).status.code(), Some(0));
    assert_eq!(actpred(d, &["train", "--bogus"]).status.code(), Some(1));
    // An unknown level is invalid input.
    let o = actpred(d, &["data", "shared", "--a", "toy.csv", "--b", "toy.csv", "--level", "colour"]);
    assert_eq!(o.status.code(), Some(1));
    // A missing file is a runtime failure.
    let o = actpred(d, &["train", "--data", "missing.csv", "--out", "m.model"]);
    assert_eq!(o.status.code(), Some(2));
    let o = actpred(d, &["predict", "--model", "m.model", "--data", "toy.csv", "--at", "nocolon"]);
    assert_ne!(o.status.code(), Some(0));

    fs::write(d.join("cycle.plan"), "[step a]\nkind = cv\ndata = @b\n\n[step b]\nkind = cv\ndata = @a\n").unwrap();
    let o = actpred(d, &["plan", "run", "cycle.plan"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("cycle"));
}
