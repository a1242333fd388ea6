use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "seed = 5
[data]
source_train = 6
target_train = 6
target_val = 4
[model]
patch = 4
hidden = 8
feature_dim = 6
disc_hidden = 6
[train]
iterations = 12
lr = 0.01
[eval]
n_bg = 4
";

fn rscn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rscn")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Run {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

impl Run {
    fn new(config: &str) -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        std::fs::write(root.join("run.toml"), config).unwrap();
        Run { _tmp: tmp, root }
    }

    fn p(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn ok(&self, args: &[&str]) -> String {
        let o = rscn(args);
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    }

    fn gen(&self) {
        self.ok(&["gen-data", "--config", s(&self.p("run.toml")), "--out", s(&self.p("data"))]);
    }

    fn train(&self, mode: &str, out: &str, extra: &[&str]) {
        let (cfg, data, out) = (self.p("run.toml"), self.p("data"), self.p(out));
        let mut args = vec!["train", "--mode", mode, "--config", s(&cfg), "--data", s(&data), "--out", s(&out)];
        args.extend_from_slice(extra);
        self.ok(&args);
    }

    fn cache(&self, ck: &str, out: &str) -> Output {
        rscn(&[
            "cache-protos",
            "--checkpoint",
            s(&self.p(ck)),
            "--data",
            s(&self.p("data")),
            "--config",
            s(&self.p("run.toml")),
            "--out",
            s(&self.p(out)),
        ])
    }
}

#[test]
fn pipeline_end_to_end() {
    let r = Run::new(TINY);
    r.gen();
    assert!(r.p("data/manifest.json").exists());
    assert!(r.p("data/config.toml").exists());

    r.train("source-only", "ref", &[]);
    assert!(r.p("ref/checkpoint.rsck").exists());
    let log = std::fs::read_to_string(r.p("ref/metrics.ndjson")).unwrap();
    assert_eq!(log.lines().count(), 12);

    let o = r.cache("ref/checkpoint.rsck", "cache.rspc");
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("6 source images"));
    let first = std::fs::read(r.p("cache.rspc")).unwrap();
    assert_eq!(code(&r.cache("ref/checkpoint.rsck", "cache.rspc")), 0);
    assert_eq!(std::fs::read(r.p("cache.rspc")).unwrap(), first, "cache rerun not idempotent");

    let cache = r.p("cache.rspc");
    r.train("rscn", "adapted", &["--cache", s(&cache)]);

    let eval = |ck: &str, out: &str, extra: &[&str]| {
        let (ck, data, cfg, out) = (r.p(ck), r.p("data"), r.p("run.toml"), r.p(out));
        let mut args = vec!["eval", "--checkpoint", s(&ck), "--data", s(&data), "--config", s(&cfg), "--out", s(&out)];
        args.extend_from_slice(extra);
        r.ok(&args)
    };
    eval("ref/checkpoint.rsck", "base.json", &[]);
    let base = r.p("base.json");
    let row = eval("adapted/checkpoint.rsck", "adapted.json", &["--baseline", s(&base)]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(r.p("adapted.json")).unwrap()).unwrap();
    let base_report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&base).unwrap()).unwrap();
    let (m, b) = (report["map50"].as_f64().unwrap(), base_report["map50"].as_f64().unwrap());
    assert!((0.0..=1.0).contains(&m));
    assert!(row.contains(&format!("{:+.1} |", 100.0 * (m - b))), "{row}");
    eval("adapted/checkpoint.rsck", "src.json", &["--split", "source_val"]);

    r.ok(&["ablate", "--config", s(&r.p("run.toml")), "--data", s(&r.p("data")), "--cache", s(&cache), "--out", s(&r.p("ablate"))]);
    let csv = std::fs::read_to_string(r.p("ablate/ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 6);
    assert!(lines[1].starts_with("source-only,0,0,0,"));
    assert!(lines[1].ends_with(",0.000000"));
    let md = std::fs::read_to_string(r.p("ablate/ablation.md")).unwrap();
    assert_eq!(md.lines().count(), 7);
    // the ablation's source-only row is the reference run itself
    assert_eq!(
        std::fs::read(r.p("ablate/rows/source-only/checkpoint.rsck")).unwrap(),
        std::fs::read(r.p("ref/checkpoint.rsck")).unwrap()
    );
    assert_eq!(
        std::fs::read(r.p("ablate/rows/BPA+RSH+SSP/checkpoint.rsck")).unwrap(),
        std::fs::read(r.p("adapted/checkpoint.rsck")).unwrap()
    );
}

#[test]
fn detection_only_weights_reproduce_source_only() {
    let r = Run::new(TINY);
    r.gen();
    r.train("source-only", "ref", &[]);
    assert_eq!(code(&r.cache("ref/checkpoint.rsck", "cache.rspc")), 0);
    let cache = r.p("cache.rspc");
    r.train("rscn", "degenerate", &["--cache", s(&cache), "--weights", "1,0,0,0"]);
    assert_eq!(
        std::fs::read(r.p("degenerate/checkpoint.rsck")).unwrap(),
        std::fs::read(r.p("ref/checkpoint.rsck")).unwrap()
    );
}

#[test]
fn usage_errors_exit_2() {
    let r = Run::new("[train]\nlr = 0.1\n");
    let o = rscn(&["gen-data", "--config", s(&r.p("run.toml")), "--out", s(&r.p("d"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed required"));

    let r = Run::new("seed = 1\nbogus = 3\n");
    assert_eq!(code(&rscn(&["gen-data", "--config", s(&r.p("run.toml")), "--out", s(&r.p("d"))])), 2);

    let r = Run::new(TINY);
    r.gen();
    let cfg = r.p("run.toml");
    let data = r.p("data");
    let o = rscn(&["train", "--mode", "rscn", "--config", s(&cfg), "--data", s(&data), "--out", s(&r.p("x"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--cache"));

    assert_eq!(code(&r.cache("nope.rsck", "c.rspc")), 2);

    r.train("source-only", "ref", &[]);
    let ck = r.p("ref/checkpoint.rsck");
    let o = rscn(&["eval", "--checkpoint", s(&ck), "--data", s(&data), "--config", s(&cfg), "--split", "target_train", "--out", s(&r.p("e.json"))]);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&rscn(&["train", "--mode", "sideways"])), 2);
}

#[test]
fn integrity_errors_exit_3() {
    let r = Run::new(TINY);
    r.gen();
    r.train("source-only", "a", &[]);
    assert_eq!(code(&r.cache("a/checkpoint.rsck", "cache.rspc")), 0);
    // a different reference must not silently replace an existing cache
    std::fs::write(r.p("run.toml"), TINY.replace("lr = 0.01", "lr = 0.02")).unwrap();
    r.train("source-only", "b", &[]);
    let before = std::fs::read(r.p("cache.rspc")).unwrap();
    let o = r.cache("b/checkpoint.rsck", "cache.rspc");
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(r.p("cache.rspc")).unwrap(), before);

    let mut bytes = std::fs::read(r.p("b/checkpoint.rsck")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    std::fs::write(r.p("bad.rsck"), bytes).unwrap();
    assert_eq!(code(&r.cache("bad.rsck", "other.rspc")), 3);
}

#[test]
fn gradcheck_command() {
    let o = rscn(&["gradcheck", "--seed", "1", "--trials", "3"]);
    assert_eq!(code(&o), 0);
    let out = String::from_utf8(o.stdout).unwrap();
    for name in ["matmul", "grad_reverse", "L_det", "L_BPA", "L_RSH", "L_SSP", "L_G"] {
        assert!(out.lines().any(|l| l.starts_with(name) && l.ends_with("ok")), "{name}\n{out}");
    }
    let o = rscn(&["gradcheck", "--seed", "1", "--trials", "3", "--inject-fault", "grl-sign"]);
    assert_eq!(code(&o), 1);
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.lines().any(|l| l.starts_with("grad_reverse") && l.ends_with("FAIL")));
}
