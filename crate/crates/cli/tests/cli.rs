use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ocn_core::priors::PriorTables;
use tempfile::TempDir;

fn ocn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ocn")).args(args).output().expect("spawn ocn")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

fn key_value(text: &str, key: &str) -> f64 {
    let prefix = format!("{key}=");
    let line = text.lines().find(|l| l.starts_with(&prefix)).unwrap_or_else(|| panic!("no {key} in {text}"));
    line[prefix.len()..].parse().unwrap()
}

const VOCAB: &str = "verb ride\nverb hold\nverb feed\nobject horse\nobject cup\n";

fn write_toy(dir: &Path) {
    fs::write(dir.join("vocab.txt"), VOCAB).unwrap();
    let anns = "\
img0 0 0 10 10 20 20 30 30 horse ride,hold
img1 0 0 10 10 20 20 30 30 horse ride,hold
img2 0 0 10 10 20 20 30 30 horse ride,feed
";
    fs::write(dir.join("train.txt"), anns).unwrap();
}

#[test]
fn extract_priors_matches_hand_counts() {
    let dir = TempDir::new().unwrap();
    write_toy(dir.path());
    let out = dir.path().join("priors");
    let o = ocn(&["extract-priors", "--annotations", &path(dir.path(), "train.txt"), "--vocab", &path(dir.path(), "vocab.txt"), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let t = PriorTables::load(&out.join("priors.txt")).unwrap();
    assert_eq!(t.beta, 0.1);
    assert!((t.c.get(0, 1) - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(t.c.get(1, 0), 1.0);
    assert!((t.c_hat.get(0, 1) - 5.0 / 18.0).abs() < 1e-15);
    assert!((t.c_hat.get(0, 2) - 2.0 / 9.0).abs() < 1e-15);
    assert_eq!(t.c_hat.get(1, 2), 0.0);
    // horse: ride 3, hold 2, feed 1 over three triplets, renormalized
    let want = [0.5, 1.0 / 3.0, 1.0 / 6.0];
    for (v, w) in want.iter().enumerate() {
        assert!((t.s.get(0, v) - w).abs() < 1e-15);
        assert!((t.s_hat.get(0, v) - (w + 0.1 / 3.0) / 1.1).abs() < 1e-15);
    }
    assert_eq!(t.mask.row(1), &[0.0, 0.0, 0.0]);
    assert_eq!(t.rare.count(0, 0), 3);
    for name in ["c.txt", "c_hat.txt", "s.txt", "s_hat.txt", "mask.txt", "rare_flags.txt"] {
        assert!(out.join(name).exists(), "{name}");
    }
}

#[test]
fn missing_input_fails_with_diagnostic() {
    let o = ocn(&["extract-priors", "--annotations", "/nonexistent/a.txt", "--vocab", "/nonexistent/v.txt", "--out", "/tmp/unused"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("/nonexistent/v.txt"), "{err}");
}

#[test]
fn gradcheck_default_passes() {
    let o = ocn(&["gradcheck"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("cases passed"));
}

#[test]
fn gradcheck_reports_corrupted_rule() {
    let o = ocn(&["gradcheck", "--instances", "2", "--corrupt", "intra_enhance"]);
    assert!(!o.status.success());
    let text = stdout(&o);
    assert!(text.contains("failed: intra_enhance"), "{text}");
}

#[test]
fn gradcheck_is_deterministic() {
    let a = ocn(&["gradcheck", "--instances", "2", "--seed", "7"]);
    let b = ocn(&["gradcheck", "--instances", "2", "--seed", "7"]);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn gen_synth_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let args = |out: &str| vec!["gen-synth".to_string(), "--set".into(), "train_images=20".into(), "--set".into(), "test_images=5".into(), "--seed".into(), "3".into(), "--out".into(), out.into()];
    let (a, b) = (path(dir.path(), "a"), path(dir.path(), "b"));
    for out in [&a, &b] {
        let o = Command::new(env!("CARGO_BIN_EXE_ocn")).args(args(out)).output().unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for name in ["synth.cfg", "vocab.txt", "train_annotations.txt", "test_annotations.txt", "train_features.txt", "test_features.txt", "embeddings.txt", "planted.txt"] {
        assert_eq!(fs::read(Path::new(&a).join(name)).unwrap(), fs::read(Path::new(&b).join(name)).unwrap(), "{name}");
    }
    assert!(fs::read_to_string(Path::new(&a).join("synth.cfg")).unwrap().contains("seed=3"));
}

fn train(dir: &Path, name: &str, extra: &[&str]) -> (Output, std::path::PathBuf) {
    let out = dir.join(name);
    let mut args = vec!["train-toy", "--set", "train_images=24", "--set", "test_images=6", "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    (ocn(&args), out)
}

fn loss_rows(run: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(run.join("loss_log.txt"))
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split_whitespace().skip(1).map(|t| t.parse().unwrap()).collect())
        .collect()
}

#[test]
fn zero_lambda_changes_nothing() {
    let dir = TempDir::new().unwrap();
    let (a, ra) = train(dir.path(), "a", &["--steps", "1", "--lambda", "0,0,0,0,0"]);
    let (b, rb) = train(dir.path(), "b", &["--steps", "6", "--lambda", "0,0,0,0,0"]);
    assert!(a.status.success() && b.status.success(), "{}", String::from_utf8_lossy(&b.stderr));
    assert_eq!(fs::read(ra.join("checkpoint.txt")).unwrap(), fs::read(rb.join("checkpoint.txt")).unwrap());
    let rows = loss_rows(&rb);
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r[5] == 0.0));
}

#[test]
fn skl_only_training_aligns_adjacency() {
    let dir = TempDir::new().unwrap();
    let (o, run) = train(dir.path(), "skl", &["--set", "num_verbs=8", "--set", "max_support=8", "--steps", "2000", "--lambda", "1,0,0,0,0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = loss_rows(&run);
    assert_eq!(rows.len(), 2000);
    let (first, last) = (rows[0][0], rows[rows.len() - 1][0]);
    assert!(first > 0.1 && last < 0.1, "skl {first} -> {last}");
}

#[test]
fn baseline_flags_remove_branches() {
    let dir = TempDir::new().unwrap();
    let (o, run) = train(dir.path(), "base", &["--steps", "2", "--no-vsm", "--no-interc", "--no-intraec", "--no-skl", "--verb-loss", "bce"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = fs::read_to_string(run.join("model.cfg")).unwrap();
    for key in ["skl=false", "vsm=false", "interc=false", "intraec=false"] {
        assert!(cfg.contains(key), "{cfg}");
    }
    let ckpt = fs::read_to_string(run.join("checkpoint.txt")).unwrap();
    assert!(!ckpt.contains("vsm.") && !ckpt.contains("inter_") && !ckpt.contains("intra_") && !ckpt.contains("fuse."));
    assert!(ckpt.contains("verb_head.w"));
    for name in ["loss_log.txt", "priors.txt", "test_dump.txt", "metrics.txt", "test_annotations.txt", "vocab.txt"] {
        assert!(run.join(name).exists(), "{name}");
    }
}

#[test]
fn training_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let (_, a) = train(dir.path(), "a", &["--steps", "3"]);
    let (_, b) = train(dir.path(), "b", &["--steps", "3"]);
    assert_eq!(fs::read(a.join("checkpoint.txt")).unwrap(), fs::read(b.join("checkpoint.txt")).unwrap());
    assert_eq!(fs::read(a.join("test_dump.txt")).unwrap(), fs::read(b.join("test_dump.txt")).unwrap());
}

struct EvalFixture {
    dir: TempDir,
}

impl EvalFixture {
    fn new(gt: &str) -> Self {
        let dir = TempDir::new().unwrap();
        fs::write(dir.path().join("vocab.txt"), VOCAB).unwrap();
        fs::write(dir.path().join("gt.txt"), gt).unwrap();
        let train = "\
t0 0 0 10 10 20 20 30 30 horse ride,hold
t1 0 0 10 10 20 20 30 30 cup hold
";
        fs::write(dir.path().join("train.txt"), train).unwrap();
        let o = ocn(&["extract-priors", "--annotations", &path(dir.path(), "train.txt"), "--vocab", &path(dir.path(), "vocab.txt"), "--out", &path(dir.path(), "p")]);
        assert!(o.status.success());
        Self { dir }
    }

    fn run(&self, dump: &str, extra: &[&str]) -> Output {
        fs::write(self.dir.path().join("dump.txt"), dump).unwrap();
        let d = self.dir.path();
        let mut args = vec![
            "evaluate".to_string(),
            "--dump".into(),
            path(d, "dump.txt"),
            "--annotations".into(),
            path(d, "gt.txt"),
            "--vocab".into(),
            path(d, "vocab.txt"),
            "--priors".into(),
            path(d, "p/priors.txt"),
        ];
        args.extend(extra.iter().map(|s| s.to_string()));
        Command::new(env!("CARGO_BIN_EXE_ocn")).args(args).output().unwrap()
    }
}

const GT: &str = "\
a 0 0 10 10 20 20 30 30 horse ride,hold
b 0 0 10 10 20 20 30 30 horse ride
";

#[test]
fn perfect_dump_scores_full_marks() {
    let f = EvalFixture::new(GT);
    let dump = "\
a 0 0 10 10 20 20 30 30 horse ride 1
a 0 0 10 10 20 20 30 30 horse hold 1
b 0 0 10 10 20 20 30 30 horse ride 1
";
    let o = f.run(dump, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    for key in ["map_full", "map_rare", "mr_at_k"] {
        assert_eq!(key_value(&text, key), 100.0, "{key}");
    }
    assert_eq!(key_value(&text, "k"), 100.0);
}

#[test]
fn hand_built_dump_matches_hand_ap() {
    let f = EvalFixture::new(GT);
    // ride: TP, FP (wrong object box), TP; hold: FP (no hold in b), TP
    let dump = "\
a 0 0 10 10 20 20 30 30 horse ride 0.9
b 0 0 10 10 50 50 60 60 horse ride 0.8
b 0 0 10 10 20 20 30 30 horse ride 0.7
b 0 0 10 10 20 20 30 30 horse hold 0.9
a 0 0 10 10 20 20 30 30 horse hold 0.6
";
    let o = f.run(dump, &[]);
    let text = stdout(&o);
    let map = key_value(&text, "map_full");
    assert!((map - 100.0 * (5.0 / 6.0 + 0.5) / 2.0).abs() < 1e-9, "{text}");
}

#[test]
fn mask_never_lowers_recall() {
    let f = EvalFixture::new(GT);
    // feed on horse and anything on cup except hold never occur in training
    let mut dump = String::new();
    for (i, (obj, verb)) in [("horse", "feed"), ("cup", "ride"), ("cup", "feed"), ("horse", "feed")].iter().enumerate() {
        dump += &format!("a 0 0 10 10 20 20 30 30 {obj} {verb} {}\n", 0.99 - i as f64 * 0.01);
    }
    dump += "a 0 0 10 10 20 20 30 30 horse ride 0.5\nb 0 0 10 10 20 20 30 30 horse ride 0.4\na 0 0 10 10 20 20 30 30 horse hold 0.3\n";
    let off = stdout(&f.run(&dump, &["--k", "3", "--mask", "off"]));
    let on = stdout(&f.run(&dump, &["--k", "3", "--mask", "on"]));
    let (r_off, r_on) = (key_value(&off, "mr_at_k"), key_value(&on, "mr_at_k"));
    assert!(r_on >= r_off, "{r_on} < {r_off}");
    assert_eq!(r_on, 100.0);
    assert!(r_off < 100.0);
}

#[test]
fn empty_ground_truth_fails() {
    let f = EvalFixture::new("");
    let o = f.run("a 0 0 10 10 20 20 30 30 horse ride 0.9\n", &[]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("no interactions"));
}

#[test]
fn help_documents_defaults() {
    let text = stdout(&ocn(&["train-toy", "--help"]));
    for needle in ["--no-vsm", "--no-interc", "--no-intraec", "--no-skl", "--lambda", "--verb-loss", "[default: 0.05]", "[default: 0.1]", "[default: 100]"] {
        assert!(text.contains(needle), "{needle} missing from help");
    }
}
