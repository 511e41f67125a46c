use std::path::Path;
use std::process::{Command, Output};

use morphogen::data::{flatten_tables, parse_dataset, synth_corpus, SynthSpec};
use morphogen::eval::{DecodeConfig, Predictor};
use morphogen::model::InflectionModel;
use morphogen::train::{train_factored, TrainConfig};

fn morphogen(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_morphogen"))
        .args(args)
        .current_dir(dir)
        .env_remove("MORPHOGEN_SEED")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
}

const TAG: &str = "case=inessive";

fn synth(dir: &Path) {
    ok(&morphogen(
        &[
            "synth-data",
            "--out-dir",
            "d",
            "--tables",
            "30",
            "--unlabeled",
            "10",
            "--seed",
            "4",
        ],
        dir,
    ));
}

#[test]
fn synth_data_matches_library_corpus() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let corpus = synth_corpus(&SynthSpec::default(), 30, 10, [0.8, 0.1, 0.1], 4).unwrap();
    let train = parse_dataset(&dir.path().join("d/train.tsv")).unwrap();
    assert_eq!(train, flatten_tables(&corpus.split.train));
    let test = parse_dataset(&dir.path().join("d/test.tsv")).unwrap();
    assert_eq!(test, flatten_tables(&corpus.split.test));
    let words = std::fs::read_to_string(dir.path().join("d/words.txt")).unwrap();
    assert_eq!(words.lines().collect::<Vec<_>>(), corpus.wordlist);
}

#[test]
fn factored_train_writes_the_library_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let args = [
        "train",
        "--mode",
        "factored",
        "--tag",
        TAG,
        "--data",
        "d/train.tsv",
        "--dev",
        "d/dev.tsv",
        "--out",
        "m.ckpt",
        "--hidden",
        "6",
        "--epochs",
        "2",
        "--seed",
        "9",
        "--log",
        "m.log",
    ];
    ok(&morphogen(&args, dir.path()));
    let saved = std::fs::read_to_string(dir.path().join("m.ckpt")).unwrap();

    let train = parse_dataset(&dir.path().join("d/train.tsv")).unwrap();
    let dev = parse_dataset(&dir.path().join("d/dev.tsv")).unwrap();
    let config = TrainConfig {
        hidden: 6,
        epochs: 2,
        seed: 9,
        ensemble_k: 1,
        ..TrainConfig::default()
    };
    let lib = train_factored(&train, &dev, TAG, &config).unwrap();
    assert_eq!(saved, lib.model.to_json().unwrap());
    let log = std::fs::read_to_string(dir.path().join("m.log")).unwrap();
    assert_eq!(log, lib.log_text());
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let base = [
        "train",
        "--mode",
        "joint",
        "--data",
        "d/train.tsv",
        "--hidden",
        "4",
        "--epochs",
        "1",
    ];
    let mut flag = base.to_vec();
    flag.extend(["--seed", "21", "--out", "a.ckpt"]);
    ok(&morphogen(&flag, dir.path()));
    let mut env = base.to_vec();
    env.extend(["--out", "b.ckpt"]);
    let out = Command::new(env!("CARGO_BIN_EXE_morphogen"))
        .args(&env)
        .current_dir(dir.path())
        .env("MORPHOGEN_SEED", "21")
        .output()
        .unwrap();
    ok(&out);
    let mut none = base.to_vec();
    none.extend(["--out", "c.ckpt"]);
    ok(&morphogen(&none, dir.path()));
    let read = |f: &str| std::fs::read(dir.path().join(f)).unwrap();
    assert_eq!(read("a.ckpt"), read("b.ckpt"));
    assert_ne!(read("a.ckpt"), read("c.ckpt"));
}

#[test]
fn ensemble_members_get_numbered_paths() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let args = [
        "train",
        "--mode",
        "factored",
        "--tag",
        TAG,
        "--data",
        "d/train.tsv",
        "--out",
        "e.ckpt",
        "--hidden",
        "4",
        "--epochs",
        "1",
        "--ensemble-k",
        "3",
    ];
    ok(&morphogen(&args, dir.path()));
    for i in 0..3 {
        assert!(dir.path().join(format!("e.ckpt.{i}")).exists());
    }
    assert!(!dir.path().join("e.ckpt").exists());
}

#[test]
fn predict_and_evaluate_agree_with_library() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let args = [
        "train",
        "--mode",
        "joint",
        "--data",
        "d/train.tsv",
        "--out",
        "j.ckpt",
        "--hidden",
        "8",
        "--epochs",
        "2",
    ];
    ok(&morphogen(&args, dir.path()));
    let out = morphogen(
        &[
            "predict",
            "--model",
            "j.ckpt",
            "--input",
            "d/test.tsv",
            "--beam-width",
            "3",
        ],
        dir.path(),
    );
    ok(&out);
    let model = InflectionModel::load(&dir.path().join("j.ckpt")).unwrap();
    let test = parse_dataset(&dir.path().join("d/test.tsv")).unwrap();
    let config = DecodeConfig {
        beam_width: 3,
        ..DecodeConfig::default()
    };
    let preds = Predictor::new(vec![&model], config)
        .unwrap()
        .predict_all(&test)
        .unwrap();
    let expected: String = test
        .iter()
        .zip(&preds)
        .map(|(e, p)| format!("{}\t{}\t{}\n", e.lemma, e.tag, p))
        .collect();
    assert_eq!(String::from_utf8(out.stdout).unwrap(), expected);

    let out = morphogen(
        &["evaluate", "--model", "j.ckpt", "--data", "d/test.tsv"],
        dir.path(),
    );
    ok(&out);
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(
        table.lines().last().unwrap().starts_with("Avg.\t"),
        "{table}"
    );
    assert_eq!(table.lines().count(), 1 + 1 + 4 + 1);
}

#[test]
fn lm_beam_rerank_and_analyses_run() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let d = dir.path();
    ok(&morphogen(
        &[
            "lm-train",
            "--words",
            "d/words.txt",
            "--out",
            "lm.txt",
            "--order",
            "3",
        ],
        d,
    ));
    ok(&morphogen(
        &[
            "train",
            "--mode",
            "interpolated",
            "--tag",
            TAG,
            "--data",
            "d/train.tsv",
            "--lm",
            "lm.txt",
            "--out",
            "i.ckpt",
            "--hidden",
            "6",
            "--epochs",
            "1",
            "--lambda-init",
            "-2",
        ],
        d,
    ));
    let model = InflectionModel::load(&d.join("i.ckpt")).unwrap();
    assert!(model.lambda(TAG).unwrap().is_some());
    for (src, dst) in [("d/train.tsv", "own-train.tsv"), ("d/dev.tsv", "own.tsv")] {
        let text = std::fs::read_to_string(d.join(src)).unwrap();
        let own: String = text
            .lines()
            .filter(|l| l.split('\t').nth(1) == Some(TAG))
            .map(|l| format!("{l}\n"))
            .collect();
        std::fs::write(d.join(dst), own).unwrap();
    }

    ok(&morphogen(
        &[
            "beam",
            "--model",
            "i.ckpt",
            "--input",
            "own-train.tsv",
            "--lm",
            "lm.txt",
            "--beam-width",
            "4",
            "--out",
            "nb.tsv",
        ],
        d,
    ));
    ok(&morphogen(
        &[
            "rerank-train",
            "--nbest",
            "nb.tsv",
            "--gold",
            "own-train.tsv",
            "--lm",
            "lm.txt",
            "--out",
            "rr.txt",
        ],
        d,
    ));
    // dev covers tags the single-tag model lacks
    let out = morphogen(&["evaluate", "--model", "i.ckpt", "--data", "d/dev.tsv"], d);
    assert_eq!(out.status.code(), Some(2));

    let out = morphogen(
        &[
            "evaluate",
            "--model",
            "i.ckpt",
            "--data",
            "own.tsv",
            "--lm",
            "lm.txt",
            "--reranker",
            "rr.txt",
            "--beam-width",
            "4",
            "--predictions",
            "p.tsv",
            "--title",
            "Reranked",
        ],
        d,
    );
    ok(&out);
    assert!(String::from_utf8(out.stdout)
        .unwrap()
        .starts_with("Reranked\n"));
    ok(&morphogen(
        &["analyze-harmony", "--predictions", "p.tsv"],
        d,
    ));
    ok(&morphogen(
        &[
            "analyze-length",
            "--predictions",
            "p.tsv",
            "--gold",
            "own.tsv",
        ],
        d,
    ));

    let out = morphogen(&["analyze-harmony", "--words", "d/words.txt"], d);
    ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.trim_end().ends_with("100.00"), "{text}");
    ok(&morphogen(
        &[
            "export-embeddings",
            "--model",
            "i.ckpt",
            "--chars",
            "aä",
            "--out",
            "e.tsv",
        ],
        d,
    ));
    let emb = std::fs::read_to_string(d.join("e.tsv")).unwrap();
    assert_eq!(emb.lines().count(), 2);
}

#[test]
fn analyze_length_bins_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("g.tsv"),
        "ab\tt\tabc\nabcdef\tt\tabcdefgh\nx\tt\txxxxxxxxxxxxxxxx\n",
    )
    .unwrap();
    std::fs::write(
        d.join("p.tsv"),
        "ab\tt\tabc\nabcdef\tt\tabcdefg\nx\tt\txxxxxxxxxxxxxxxx\n",
    )
    .unwrap();
    let out = morphogen(
        &[
            "analyze-length",
            "--predictions",
            "p.tsv",
            "--gold",
            "g.tsv",
        ],
        d,
    );
    ok(&out);
    assert_eq!(
        String::from_utf8(out.stdout).unwrap(),
        "length\tcorrect\ttotal\taccuracy\n<5\t1\t1\t100.00\n[5,10)\t0\t1\t0.00\n>=15\t1\t1\t100.00\n"
    );
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(morphogen(&["--help"], d).status.code(), Some(0));
    assert_eq!(morphogen(&["--version"], d).status.code(), Some(0));

    let out = morphogen(&["train", "--bogus"], d);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(morphogen(&["frobnicate"], d).status.code(), Some(1));

    std::fs::write(d.join("t.tsv"), "a\tt\tb\n").unwrap();
    let out = morphogen(
        &["evaluate", "--model", "missing.ckpt", "--data", "t.tsv"],
        d,
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.ckpt"));

    let out = morphogen(
        &[
            "train", "--mode", "factored", "--data", "t.tsv", "--out", "m.ckpt",
        ],
        d,
    );
    assert_eq!(out.status.code(), Some(1), "factored without --tag");

    std::fs::write(d.join("bad.tsv"), "only one column\n").unwrap();
    let out = morphogen(
        &[
            "train", "--mode", "joint", "--data", "bad.tsv", "--out", "m.ckpt",
        ],
        d,
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.tsv:1"));
}
