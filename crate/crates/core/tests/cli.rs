use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ikrl::io::{load_checkpoint, save_checkpoint};

fn ikrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ikrl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn synth(dir: &Path, seed: &str) {
    let out = ikrl(&[
        "synth",
        "--out",
        dir.to_str().unwrap(),
        "--seed",
        seed,
        "--n-entities",
        "20",
        "--n-relations",
        "3",
        "--triples-per-relation",
        "15",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn data_flags(dir: &Path) -> Vec<String> {
    ["train", "valid", "test", "entities", "relations"]
        .iter()
        .flat_map(|name| {
            [
                format!("--{name}"),
                dir.join(format!("{name}.txt")).display().to_string(),
            ]
        })
        .collect()
}

fn run_with(dir: &Path, head: &[&str], tail: &[&str]) -> Output {
    let data = data_flags(dir);
    let mut args: Vec<&str> = head.to_vec();
    args.extend(data.iter().map(String::as_str));
    args.extend_from_slice(tail);
    ikrl(&args)
}

fn metric(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("{key} missing from\n{text}"))
        .parse()
        .unwrap()
}

fn train(dir: &Path, ckpt: &Path, extra: &[&str]) -> Output {
    let features = dir.join("features.bin");
    let mut tail = vec![
        "--features",
        features.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--entity-dim",
        "8",
    ];
    tail.extend_from_slice(extra);
    run_with(dir, &["train"], &tail)
}

#[test]
fn synth_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a, "7");
    synth(&b, "7");
    let mut names: Vec<_> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 7);
    for name in names {
        assert_eq!(
            fs::read(a.join(&name)).unwrap(),
            fs::read(b.join(&name)).unwrap(),
            "{name:?}"
        );
    }
}

#[test]
fn union_at_alpha_one_equals_structure_scores() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir, "3");
    let ckpt = dir.join("model.ckpt");
    let out = train(dir, &ckpt, &["--epochs", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stderr).matches("epoch=").count(), 5);

    let features = dir.join("features.bin");
    let eval = |mode: &[&str]| {
        let mut tail = vec![
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--features",
            features.to_str().unwrap(),
        ];
        tail.extend_from_slice(mode);
        let out = run_with(dir, &["eval-link"], &tail);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        stdout(&out)
    };
    let sbr = eval(&["--mode", "sbr"]);
    let union = eval(&["--mode", "union", "--alpha", "1.0"]);
    for key in [
        "raw.mean_rank",
        "raw.hits_at_10",
        "filter.mean_rank",
        "filter.hits_at_10",
    ] {
        assert_eq!(
            metric(&sbr, &format!("metric.sbr.{key}")),
            metric(&union, &format!("metric.union.{key}"))
        );
    }
    assert!(sbr.contains("mean_rank  hits@10"));

    let classify = run_with(
        dir,
        &["eval-classify"],
        &[
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--features",
            features.to_str().unwrap(),
            "--mode",
            "ibr",
        ],
    );
    assert!(classify.status.success());
    let acc = metric(&stdout(&classify), "metric.ibr.classify.accuracy");
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn non_finite_checkpoint_exits_with_3() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir, "4");
    let ckpt = dir.join("model.ckpt");
    assert!(train(dir, &ckpt, &["--epochs", "1", "--model", "transe"])
        .status
        .success());
    let mut params = load_checkpoint(&ckpt).unwrap();
    params.entities.as_mut_slice()[3] = f64::NAN;
    let bad = dir.join("bad.ckpt");
    save_checkpoint(&bad, &params).unwrap();
    let out = run_with(dir, &["eval-link"], &["--checkpoint", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(String::from_utf8_lossy(&out.stderr).lines().count(), 1);
}

#[test]
fn usage_and_file_errors() {
    assert_eq!(ikrl(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(ikrl(&["train"]).status.code(), Some(1));
    assert_eq!(ikrl(&["--help"]).status.code(), Some(0));

    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir, "5");
    let missing = dir.join("missing.ckpt");
    let out = run_with(dir, &["eval-link"], &["--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    // Union weights outside [0, 1] are configuration errors.
    let out = run_with(
        dir,
        &["eval-link"],
        &[
            "--checkpoint",
            missing.to_str().unwrap(),
            "--mode",
            "union",
            "--alpha",
            "2",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn flags_override_config_and_threads_do_not_matter() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir, "6");
    let conf = dir.join("train.conf");
    fs::write(&conf, "epochs = 4\nseed = 9\nnorm = l2\n").unwrap();

    let one = dir.join("one.ckpt");
    let out = train(
        dir,
        &one,
        &[
            "--config",
            conf.to_str().unwrap(),
            "--epochs",
            "2",
            "--threads",
            "1",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stderr).matches("epoch=").count(), 2);

    let three = dir.join("three.ckpt");
    assert!(train(
        dir,
        &three,
        &[
            "--config",
            conf.to_str().unwrap(),
            "--epochs",
            "2",
            "--threads",
            "3"
        ]
    )
    .status
    .success());
    assert_eq!(fs::read(&one).unwrap(), fs::read(&three).unwrap());

    fs::write(&conf, "epochs = 2\nmargn = 1\n").unwrap();
    let out = train(dir, &one, &["--config", conf.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(":2:"));
}

#[test]
fn probe_attention_and_export() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir, "8");
    let ckpt = dir.join("model.ckpt");
    assert!(train(dir, &ckpt, &["--epochs", "2"]).status.success());
    let (ents, rels, feats) = (
        dir.join("entities.txt"),
        dir.join("relations.txt"),
        dir.join("features.bin"),
    );
    let (e, r, f, c) = (
        ents.to_str().unwrap(),
        rels.to_str().unwrap(),
        feats.to_str().unwrap(),
        ckpt.to_str().unwrap(),
    );

    let out = ikrl(&[
        "probe",
        "--entities",
        e,
        "--relations",
        r,
        "--checkpoint",
        c,
        "--features",
        f,
        "--a",
        "e1",
        "--b",
        "e2",
    ]);
    assert!(out.status.success());
    assert_eq!(
        stdout(&out).lines().filter(|l| l.starts_with("probe.")).count(),
        3
    );

    let out = ikrl(&[
        "inspect-attention",
        "--entities",
        e,
        "--checkpoint",
        c,
        "--features",
        f,
        "--entity",
        "e0",
    ]);
    assert!(out.status.success());
    let total: f64 = stdout(&out)
        .lines()
        .filter_map(|l| l.strip_prefix("attention.").and_then(|kv| kv.split_once('=')))
        .map(|(_, w)| w.parse::<f64>().unwrap())
        .sum();
    assert!((total - 1.0).abs() < 1e-9);

    let out = ikrl(&[
        "inspect-attention",
        "--entities",
        e,
        "--checkpoint",
        c,
        "--features",
        f,
        "--entity",
        "nobody",
    ]);
    assert_eq!(out.status.code(), Some(2));

    let exported = dir.join("export");
    let out = ikrl(&[
        "export",
        "--entities",
        e,
        "--relations",
        r,
        "--checkpoint",
        c,
        "--features",
        f,
        "--out",
        exported.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let rows = fs::read_to_string(exported.join("entities.tsv")).unwrap();
    assert_eq!(rows.lines().count(), 20);
    assert_eq!(rows.lines().next().unwrap().split('\t').count(), 9);
    assert!(exported.join("relations.tsv").exists() && exported.join("entity_images.tsv").exists());
}
