use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        oe_forge::write_fixture(dir.path(), 0).unwrap();
        Workspace { dir }
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }

    /// Writes a config derived from the fixture config by textual edits.
    fn config(&self, name: &str, edit: impl Fn(String) -> String) -> PathBuf {
        let p = self.path().join(name);
        std::fs::write(&p, edit(oe_forge::FIXTURE_CONFIG.to_string())).unwrap();
        p
    }

    fn run(&self, args: &[&str], config: &Path, out: &str) -> Output {
        Command::new(env!("CARGO_BIN_EXE_oe-forge"))
            .args(args)
            .arg("--config")
            .arg(config)
            .arg("--out")
            .arg(self.path().join(out))
            .output()
            .unwrap()
    }

    fn read(&self, rel: &str) -> String {
        std::fs::read_to_string(self.path().join(rel)).unwrap()
    }

    fn manifest(&self, out: &str) -> Value {
        serde_json::from_str(&self.read(&format!("{out}/manifest.json"))).unwrap()
    }
}

fn ok(o: &Output) {
    assert_eq!(o.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

fn fails_with(o: &Output, code: i32, needle: &str) {
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(o.status.code(), Some(code), "stderr: {err}");
    assert!(err.contains(needle), "stderr should mention '{needle}': {err}");
}

fn short_training(s: String) -> String {
    s.replace("epochs = 100", "epochs = 5")
}

#[test]
fn stats_writes_artifact_and_digest() {
    let ws = Workspace::new();
    let cfg = ws.config("c.conf", |s| s);
    ok(&ws.run(&["stats"], &cfg, "out"));
    assert!(ws.path().join("out/stats.emb").exists());
    assert!(ws.path().join("out/stats.emb.stats.json").exists());

    let hash = Command::new("sha256sum").arg(ws.path().join("id_train.emb")).output().unwrap();
    let hash = String::from_utf8(hash.stdout).unwrap();
    let want = hash.split_whitespace().next().unwrap();
    let m = ws.manifest("out");
    assert_eq!(m["inputs"]["id_train"]["sha256"], want);
    assert_eq!(m["inputs"]["id_train"]["path"], "id_train.emb");
    assert!(!ws.read("out/manifest.json").contains(ws.path().to_str().unwrap()));
}

#[test]
fn config_errors_exit_two() {
    let ws = Workspace::new();
    let missing = ws.config("m.conf", |s| s.replace("id_train = id_train.emb\n", ""));
    fails_with(&ws.run(&["stats"], &missing, "out"), 2, "id_train");

    let bad_kind = ws.config("k.conf", |s| s.replace("kind = mahalanobis", "kind = nearest-neighbour"));
    fails_with(&ws.run(&["filter"], &bad_kind, "out"), 2, "nearest-neighbour");

    let cfg = ws.config("c.conf", |s| s);
    fails_with(&ws.run(&["sweep", "--param", "batch_id", "--values", "1"], &cfg, "out"), 2, "batch_id");
    fails_with(&ws.run(&["eval"], &cfg, "fresh"), 2, "head");

    let typo = ws.config("t.conf", |s| s.replace("lambda = 0.5", "lamda = 0.5"));
    fails_with(&ws.run(&["train"], &typo, "out"), 2, "lamda");
    let nofile = ws.config("n.conf", |s| s.replace("id_val.emb", "nope.emb"));
    fails_with(&ws.run(&["train"], &nofile, "out"), 2, "nope.emb");
}

#[test]
fn filter_kinds_follow_their_defaults() {
    let ws = Workspace::new();
    let rw = ws.config("rw.conf", |s| s.replace("kind = mahalanobis", "kind = rank-window"));
    ok(&ws.run(&["filter"], &rw, "rw"));
    let trail = &ws.manifest("rw")["commands"]["filter"]["trail"][0];
    assert_eq!(trail["params"]["k"], 30);
    assert_eq!(trail["params"]["delta"], 25);

    let maha = ws.config("m.conf", |s| s);
    ok(&ws.run(&["filter"], &maha, "m"));
    // 2000 candidates, p = 0.15
    assert_eq!(ws.manifest("m")["commands"]["filter"]["rows"], 300);

    ok(&ws.run(&["filter", "--kind", "exclude-labels,mahalanobis"], &maha, "chain"));
    let f = &ws.manifest("chain")["commands"]["filter"];
    assert_eq!(f["trail"].as_array().unwrap().len(), 2);
    assert_eq!(f["trail"][1]["rows_in"], f["trail"][0]["rows_out"]);
}

#[test]
fn eval_reports_each_set_and_the_average() {
    let ws = Workspace::new();
    let cfg = ws.config("c.conf", short_training);
    for cmd in ["filter", "train", "eval"] {
        ok(&ws.run(&[cmd], &cfg, "a"));
    }
    let csv = ws.read("a/report.csv");
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[2][0], "Average");
    for col in 2..6 {
        let v: Vec<f64> = rows.iter().map(|r| r[col].parse().unwrap()).collect();
        assert!((v[2] - (v[0] + v[1]) / 2.0).abs() < 1e-12);
    }
    assert!(ws.path().join("a/train_record.csv").exists());

    for cmd in ["filter", "train", "eval"] {
        ok(&ws.run(&[cmd], &cfg, "b"));
    }
    assert_eq!(csv, ws.read("b/report.csv"));
    assert_eq!(ws.read("a/report.json"), ws.read("b/report.json"));
    assert_eq!(ws.read("a/manifest.json"), ws.read("b/manifest.json"));
}

#[test]
fn sweep_rows_are_sorted_and_share_seeds() {
    let ws = Workspace::new();
    let cfg = ws.config("c.conf", short_training);
    ok(&ws.run(&["sweep", "--param", "p", "--values", "0.20,0.10,0.15"], &cfg, "s"));
    let csv = ws.read("s/sweep.csv");
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows.iter().map(|r| r[1]).collect::<Vec<_>>(), ["0.10", "0.15", "0.20"]);
    assert!(rows.iter().all(|r| r[2] == "0"));

    // a one-value sweep reproduces a plain run
    ok(&ws.run(&["sweep", "--param", "p", "--values", "0.15"], &cfg, "one"));
    for cmd in ["filter", "train", "eval"] {
        ok(&ws.run(&[cmd], &cfg, "plain"));
    }
    let single = ws.read("one/sweep.csv");
    let row = single.lines().nth(1).unwrap();
    let eval_last = ws.read("plain/report.csv").lines().last().unwrap().to_string();
    assert_eq!(row, format!("p,0.15,0,{eval_last}"));
}

#[test]
fn shape_and_divergence_exit_codes() {
    let ws = Workspace::new();
    let cfg = ws.config("c.conf", short_training);
    for cmd in ["filter", "train"] {
        ok(&ws.run(&[cmd], &cfg, "o"));
    }
    let narrow = oe_forge_core::EmbeddingSet::new(3, vec![1.0, 0.0, 0.0]).unwrap();
    oe_forge_core::embedstore::save(&narrow, ws.path().join("narrow.emb")).unwrap();
    let shape = ws.config("s.conf", |s| short_training(s).replace("ood.far = ood_far.emb", "ood.far = narrow.emb"));
    fails_with(&ws.run(&["eval"], &shape, "o"), 3, "dim");

    let wild = ws.config("d.conf", |s| short_training(s).replace("lr = 0.03", "lr = 1e306"));
    fails_with(&ws.run(&["filter"], &wild, "d"), 0, "");
    fails_with(&ws.run(&["train"], &wild, "d"), 4, "diverged");
}

#[test]
fn virtual_outliers_and_noise_commands() {
    let ws = Workspace::new();
    let cfg = ws.config("v.conf", |s| {
        short_training(s).replace("[train]\n", "[train]\noutliers = virtual\n").replace("[filter]\n", "[filter]\nvirtual_samples = 50\nvirtual_keep = 5\n")
    });
    ok(&ws.run(&["synth"], &cfg, "v"));
    ok(&ws.run(&["noise"], &cfg, "v"));
    ok(&ws.run(&["train"], &cfg, "v"));
    let m = ws.manifest("v");
    assert_eq!(m["commands"]["synth"]["rows"], 40);
    assert_eq!(m["commands"]["noise"]["rows"], 40);
    assert_eq!(m["commands"]["train"]["outlier_rows"], 40);
    assert!(m["seeds"]["synthesis"].is_u64() && m["seeds"]["train"].is_u64());
}
