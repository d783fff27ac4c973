use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use supcon::corpus::{load_corpus, SplitSpec};

fn supcon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_supcon")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn run_dir(o: &Output) -> PathBuf {
    PathBuf::from(stdout(o).lines().last().unwrap().trim())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_writes_a_valid_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("corpus");
    let o = supcon(&["synth", "--classes", "5", "--per-class", "100", "--side", "64", "--seed", "7", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let corpus = load_corpus(&out).unwrap();
    assert_eq!(corpus.len(), 500);
    assert_eq!(corpus.class_count(), 5);
    corpus.manifest.validate(corpus.store().len() as u64).unwrap();
}

#[test]
fn eval_emits_table_layout() {
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("logits.csv");
    let truth = dir.path().join("labels.csv");
    std::fs::write(&pred, "c0,c1,c2,c3\n0.9,0.1,0,0\n0.2,0.5,0.3,0\n0,0,0.1,0.9\n0.4,0.3,0.2,0.1\n").unwrap();
    std::fs::write(&truth, "label\n0\n2\n3\n3\n").unwrap();
    let o = supcon(&["eval", "--pred", s(&pred), "--truth", s(&truth), "--k", "3", "--model", "contrastive", "--dataset", "test"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "model,dataset,f1,top1,top3");
    // Predictions 0,1,3,0 against 0,2,3,3 give two hits. Label 3 ranks last
    // in the final row, so top-3 misses only that row.
    let cells: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(&cells[..2], &["contrastive", "test"]);
    assert_eq!(cells[3], "50.00");
    assert_eq!(cells[4], "75.00");
}

#[test]
fn gradcheck_passes() {
    let o = supcon(&["gradcheck", "--trials", "20"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.lines().skip(1).all(|l| l.ends_with(",pass")), "{text}");
    assert!(text.lines().count() > 10);
}

#[test]
fn invalid_input_exits_one() {
    assert_eq!(supcon(&["pretrain", "--bogus-key", "3"]).status.code(), Some(1));
    assert_eq!(supcon(&["pretrain", "--batch-size", "0"]).status.code(), Some(1));
    assert_eq!(supcon(&["synth"]).status.code(), Some(1));
    assert_eq!(supcon(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn rerunning_the_resolved_config_reproduces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let o = supcon(&["synth", "--classes", "3", "--per-class", "20", "--seed", "5", "--train-fraction", "0.8", "--out", s(&corpus)]);
    assert!(o.status.success());
    let split = corpus.join("split.json");
    SplitSpec::load(&split).unwrap();
    let runs = dir.path().join("runs");
    let common = [
        "--corpus", s(&corpus), "--split", s(&split), "--out", s(&runs),
        "--contrastive-epochs", "1", "--probe-epochs", "1", "--scratch-epochs", "2",
        "--batch-size", "12", "--samples-per-class", "8",
    ];

    let mut args = vec!["scratch"];
    args.extend(common);
    let first = supcon(&args);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let d1 = run_dir(&first);
    let cfg = d1.join("config.txt");
    let second = supcon(&["scratch", "--config", s(&cfg)]);
    assert!(second.status.success(), "{}", String::from_utf8_lossy(&second.stderr));
    let d2 = run_dir(&second);
    assert_ne!(d1, d2);
    let m1 = std::fs::read(d1.join("metrics.csv")).unwrap();
    assert_eq!(m1, std::fs::read(d2.join("metrics.csv")).unwrap());
    assert!(String::from_utf8(m1).unwrap().starts_with("model,dataset,f1,top1,top3\nscratch,test,"));

    // Pretrain, probe and cluster chained through the saved model.
    let mut args = vec!["pretrain"];
    args.extend(common);
    let pre = supcon(&args);
    assert!(pre.status.success(), "{}", String::from_utf8_lossy(&pre.stderr));
    let model = run_dir(&pre).join("model.bin");
    for cmd in ["probe", "cluster"] {
        let mut args = vec![cmd, "--pretrained", s(&model), "--clusters", "4"];
        args.extend(common);
        let o = supcon(&args);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        let d = run_dir(&o);
        let expected: &[&str] = if cmd == "probe" {
            &["metrics.csv", "model.bin", "runlog.csv", "checkpoint.bin", "config.txt"]
        } else {
            &["clusters.csv", "embedding.csv"]
        };
        for f in expected {
            assert!(d.join(f).exists(), "{cmd} missing {f}");
        }
    }
}
