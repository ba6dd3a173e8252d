use std::collections::HashMap;
use std::path::Path;

use blind_plda::calibration::{empirical_min_dcf, DcfConfig};
use blind_plda::io::{read_ivectors, read_scores, read_trials, ModelContainer, TrialKey};
use blind_plda::scoring::{score_trial, Enrollment};
use blind_plda::training::LabeledDataset;
use blind_plda::DerivedOperators;

fn run(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let code = blind_plda::cli::run(std::iter::once("blind-plda").chain(args.iter().copied()), &mut out);
    (code, String::from_utf8(out).unwrap())
}

fn ok(args: &[&str]) -> String {
    let (code, out) = run(args);
    assert_eq!(code, 0, "{args:?}");
    out
}

fn small_dataset(dir: &Path) {
    let config = dir.join("synth.json");
    std::fs::write(
        &config,
        r#"{"truth":{"dim":12,"speaker_dim":4,"channel_dim":2},"train_speakers":80,"model_speakers":20,
            "condition":{"name":"L3","buckets":[{"enroll":3}]}}"#,
    )
    .unwrap();
    ok(&["--seed", "4", "synth", "--config", config.to_str().unwrap(), "--out", dir.join("data").to_str().unwrap()]);
}

#[test]
fn scores_and_eval_match_the_library() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_dataset(dir);
    let p = |name: &str| dir.join(name).to_str().unwrap().to_string();
    ok(&["--seed", "4", "train", "--data", &p("data/train.csv"), "--f", "4", "--g", "2", "--out", &p("model.json")]);
    ok(&[
        "score", "--model", &p("model.json"), "--enroll", &p("data/enroll.csv"), "--tests", &p("data/tests.csv"),
        "--trials", &p("data/trials.csv"), "--normalize", "none", "--out", &p("scores.csv"),
    ]);
    let eval = ok(&["eval", "--scores", &p("scores.csv"), "--trials", &p("data/trials.csv")]);

    let container = ModelContainer::read(&dir.join("model.json")).unwrap();
    let ops = DerivedOperators::new(container.parameters().unwrap()).unwrap();
    let pre = container.preprocessor().unwrap();
    let prep = |v: &nalgebra::DVector<f64>| ops.params().center(&pre.apply(v).unwrap()).unwrap();
    let enroll = LabeledDataset::from_records(read_ivectors(&dir.join("data/enroll.csv")).unwrap()).unwrap();
    let models: HashMap<String, Enrollment> = enroll
        .speakers()
        .iter()
        .map(|s| {
            let v: Vec<_> = s.vectors.iter().map(&prep).collect();
            (s.speaker_id.clone(), Enrollment::from_vectors(s.speaker_id.clone(), &v).unwrap())
        })
        .collect();
    let tests: HashMap<String, _> = read_ivectors(&dir.join("data/tests.csv"))
        .unwrap()
        .into_iter()
        .map(|r| (r.id, prep(&r.vector)))
        .collect();
    let trials = read_trials(&dir.join("data/trials.csv")).unwrap();
    let scores = read_scores(&dir.join("scores.csv")).unwrap();
    assert_eq!(scores.len(), trials.len());
    let (mut tar, mut non) = (Vec::new(), Vec::new());
    for (t, s) in trials.iter().zip(&scores) {
        assert_eq!((&t.model_id, &t.test_id), (&s.model_id, &s.test_id));
        assert!(s.normalized.is_none());
        let want = score_trial(&ops, &models[&t.model_id], &tests[&t.test_id]).unwrap();
        assert!((s.score - want).abs() <= 1e-9 * want.abs().max(1.0), "{} vs {want}", s.score);
        match t.key.unwrap() {
            TrialKey::Target => tar.push(want),
            TrialKey::Nontarget => non.push(want),
        }
    }
    let min = empirical_min_dcf(&tar, &non, &DcfConfig::new(100.0).unwrap()).unwrap();
    assert!(eval.starts_with(&format!("raw        minDCF {:.6}", min.value)), "{eval}");
    assert_eq!(eval.lines().count(), 1);
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(run(&["frobnicate"]).0, 2);
    assert_eq!(run(&["train", "--f", "abc"]).0, 2);
}

#[test]
fn scoring_against_missing_enrollment_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_dataset(dir);
    let p = |name: &str| dir.join(name).to_str().unwrap().to_string();
    ok(&["train", "--data", &p("data/train.csv"), "--f", "4", "--g", "2", "--iterations", "3", "--out", &p("model.json")]);
    std::fs::write(dir.join("trials.csv"), "model_id,test_id\nnobody,x\n").unwrap();
    let (code, _) = run(&[
        "score", "--model", &p("model.json"), "--enroll", &p("data/enroll.csv"), "--tests", &p("data/tests.csv"),
        "--trials", &p("trials.csv"), "--out", &p("scores.csv"),
    ]);
    assert_eq!(code, 1);
}
