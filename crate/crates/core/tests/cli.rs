use std::path::Path;
use std::process::{Command, Output};

use gzsl::io::{self, ClassSplit, MetricsSummary};
use gzsl::score::{ClassId, ScoreKind, ScoreTable, Vocabulary};

fn gzsl(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gzsl"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = gzsl(out, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn staged_flow_reproduces_the_cosmo_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["gen-synth"]);
    for f in ["features.csv", "descriptions.csv", "classes.json"] {
        assert!(d.join(f).exists(), "{f}");
    }
    ok(d, &["split", "--data", s(d)]);
    ok(d, &["train-seen", "--data", s(d)]);
    ok(d, &["train-zs", "--data", s(d)]);
    ok(d, &["tune-gate", "--data", s(d)]);
    ok(d, &["tune-combiner", "--data", s(d), "--gate", s(&d.join("gate.json"))]);
    let files = [
        ("--seen-scores", "seen_scores_test.csv"),
        ("--zs-scores", "zs_scores_test.csv"),
        ("--labels", "labels_test.csv"),
        ("--gate", "gate.json"),
        ("--classes", "classes_test.json"),
    ];
    let score_args: Vec<String> = files
        .iter()
        .flat_map(|(flag, f)| [flag.to_string(), d.join(f).to_string_lossy().into_owned()])
        .collect();
    let eval_out = d.join("eval");
    for cmd in ["eval", "curve"] {
        let args: Vec<&str> = std::iter::once(cmd).chain(score_args.iter().map(String::as_str)).collect();
        ok(&eval_out, &args);
    }
    let m: MetricsSummary = io::read_json(&eval_out.join("metrics.json")).unwrap();
    // Same data, splits, gate search and combiner search as the library variant.
    assert!((m.acc_h - 0.636604260813428).abs() < 1e-12, "{}", m.acc_h);
    let curve = io::read_curve(&eval_out.join("curve.csv")).unwrap();
    assert_eq!(curve.len(), 201);
    assert_eq!(m.ausuc, Some(gzsl::eval::ausuc(&curve).unwrap()));
    let predictions = std::fs::read_to_string(eval_out.join("predictions.csv")).unwrap();
    assert_eq!(predictions.lines().count(), io::read_labels(&d.join("labels_test.csv")).unwrap().len() + 1);
}

#[test]
fn errors_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let missing = gzsl(d, &["eval", "--seen-scores", "nope.csv", "--zs-scores", "nope.csv", "--labels", "nope.csv", "--gate", "nope.json"]);
    assert_eq!(missing.status.code(), Some(3));

    let unknown = gzsl(d, &["ablate", "--variants", "cosmo,bogus"]);
    assert_eq!(unknown.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&unknown.stderr);
    assert!(stderr.contains("bogus") && stderr.contains("independent-hard"), "{stderr}");

    // Score columns that do not match the declared class list.
    let table = ScoreTable::new(
        vec!["a".into()],
        Vocabulary::new(vec![ClassId(0), ClassId(1)]).unwrap(),
        vec![0.25, 0.75],
        ScoreKind::Probability,
    )
    .unwrap();
    io::write_scores(&d.join("scores.csv"), &table).unwrap();
    io::write_json(&d.join("classes.json"), &ClassSplit { seen: vec![ClassId(0), ClassId(2)], unseen: vec![] }).unwrap();
    let o = gzsl(d, &["ingest-scores", "--scores", s(&d.join("scores.csv")), "--classes", s(&d.join("classes.json")), "--domain", "seen"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("{1, 2}"));
}

#[test]
fn ingest_reorders_columns_and_normalizes_logits() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let table = ScoreTable::new(
        vec!["a".into(), "b".into()],
        Vocabulary::new(vec![ClassId(7), ClassId(3), ClassId(5)]).unwrap(),
        vec![0.0, 1.0, 2.0, 3.0, 3.0, 3.0],
        ScoreKind::RawLogit,
    )
    .unwrap();
    let src = d.join("in");
    io::write_scores(&src.join("scores.csv"), &table).unwrap();
    io::write_json(&d.join("classes.json"), &ClassSplit { seen: vec![ClassId(3), ClassId(5), ClassId(7)], unseen: vec![ClassId(9)] }).unwrap();
    ok(d, &["ingest-scores", "--scores", s(&src.join("scores.csv")), "--classes", s(&d.join("classes.json")), "--domain", "seen"]);
    let got = io::read_scores(&d.join("scores.csv")).unwrap();
    assert_eq!(got.kind(), ScoreKind::Probability);
    assert_eq!(got.vocabulary().as_slice(), &[ClassId(3), ClassId(5), ClassId(7)]);
    // Row a: logits (7:0, 3:1, 5:2) → class 5 largest, class 7 smallest.
    let a = got.row(0);
    assert!(a[1] > a[0] && a[0] > a[2]);
    assert!(got.row(1).iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
}

#[test]
fn ablate_then_report() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["ablate", "--variants", "cs,cosmo"]);
    for v in ["cosmo", "cs"] {
        for f in ["metrics.json", "val_metrics.json", "curve.csv", "candidates.csv", "provenance.json"] {
            assert!(d.join(v).join(f).exists(), "{v}/{f}");
        }
    }
    assert!(d.join("cosmo/gate_table.csv").exists());
    assert!(!d.join("cs/gate_table.csv").exists());
    let text = ok(d, &["report"]);
    let lines: Vec<&str> = text.lines().collect();
    // Canonical order, not the order given on the command line.
    assert!(lines[2].starts_with("| cosmo |"));
    assert!(lines[3].starts_with("| cs |") && lines[3].contains("| – |"));
    assert_eq!(std::fs::read_to_string(d.join("report.md")).unwrap(), text);
}

#[test]
fn seed_flag_changes_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&a, &["gen-synth", "--seed", "1"]);
    ok(&b, &["gen-synth", "--seed", "2"]);
    assert_ne!(std::fs::read(a.join("features.csv")).unwrap(), std::fs::read(b.join("features.csv")).unwrap());
}
