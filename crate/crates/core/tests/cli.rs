use std::path::Path;
use std::process::{Command, Output};

fn gradshield(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gradshield"))
        .args(args)
        .env("GRADSHIELD_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: [&str; 12] = [
    "--set",
    "dataset_count=8",
    "--set",
    "victim.steps=2",
    "--set",
    "victim.batch=2",
    "--set",
    "attack.steps=2",
    "--set",
    "attack.batch=2",
    "--set",
    "image_size=32",
];

fn with_tiny<'a>(head: &[&'a str]) -> Vec<&'a str> {
    head.iter().copied().chain(TINY).collect()
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&gradshield(&["--help"])), 0);
    assert_eq!(code(&gradshield(&["--version"])), 0);
    assert_eq!(code(&gradshield(&["frobnicate"])), 2);
    assert_eq!(code(&gradshield(&["attack"])), 2);
}

#[test]
fn invalid_config_exits_2_with_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"attack": {"beta1": -1.0}}"#).unwrap();
    let out = dir.path().join("out");
    let o = gradshield(&["gen-data", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("attack.beta1"), "{}", stderr(&o));

    std::fs::write(&cfg, r#"{"dgs": {"lambda_min": "small"}}"#).unwrap();
    let o = gradshield(&["gen-data", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("dgs.lambda_min"), "{}", stderr(&o));

    let o = gradshield(&["gen-data", "--set", "attack.nonsense=1", "--out", p(&out)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_or_corrupt_artifacts_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = gradshield(&["eval", "--victim", p(&dir.path().join("nowhere")), "--out", p(&out)]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));

    let victim = dir.path().join("victim");
    let o = gradshield(&with_tiny(&["train-victim", "--out", p(&victim)]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    std::fs::write(victim.join("decoder.ckpt"), b"DGSW1\ngarbage").unwrap();
    let o = gradshield(&["eval", "--victim", p(&victim), "--out", p(&out)]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn divergence_exits_4_with_step() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = with_tiny(&["train-victim", "--out", p(dir.path())]);
    args.extend(["--set", "victim.lr=1e30", "--set", "victim.steps=20"]);
    let o = gradshield(&args);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("step"), "{}", stderr(&o));
}

#[test]
fn end_to_end_tiny_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let data = d.join("data");
    let o = gradshield(&with_tiny(&["gen-data", "--out", p(&data)]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (nv, na, ne) = gradshield::tasks::split_sizes(8);
    assert_eq!(std::fs::read_dir(data.join("victim")).unwrap().count(), 2 * nv);
    assert_eq!(std::fs::read_dir(data.join("attacker")).unwrap().count(), 2 * na);
    assert_eq!(std::fs::read_dir(data.join("eval")).unwrap().count(), 2 * ne);
    assert!(data.join("watermark.pgm").is_file());

    let victim = d.join("victim");
    let o = gradshield(&with_tiny(&["train-victim", "--out", p(&victim)]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["encoder.ckpt", "decoder.ckpt", "victim.json", "loss.csv"] {
        assert!(victim.join(f).is_file(), "{f}");
    }

    let attack = d.join("attack");
    let o = gradshield(&[
        "attack",
        "--victim",
        p(&victim),
        "--out",
        p(&attack),
        "--set",
        "attack.countermeasure=sign_flip",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(attack.join("attack.csv")).unwrap();
    assert!(csv.starts_with("step,attacker_view,defender_view\n"));
    assert_eq!(csv.lines().count(), 3);
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(attack.join("attack.json")).unwrap()).unwrap();
    assert_eq!(
        json["records"][0]["context"]["config"]["attack"]["countermeasure"],
        "sign_flip"
    );

    // a config that disagrees with the victim's data is refused
    let o = gradshield(&["attack", "--victim", p(&victim), "--out", p(&attack), "--set", "seed=5"]);
    assert_eq!(code(&o), 2);

    let sweep = d.join("sweep.json");
    let o = gradshield(&[
        "robustness",
        "--victim",
        p(&victim),
        "--out",
        p(&sweep),
        "--suite",
        "lattice",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&sweep).unwrap()).unwrap();
    assert_eq!(json["cells"].as_array().unwrap().len(), 4);

    let eval = d.join("eval");
    let o = gradshield(&[
        "eval",
        "--victim",
        p(&victim),
        "--remover",
        p(&attack.join("remover.ckpt")),
        "--out",
        p(&eval),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("eval.json")).unwrap()).unwrap();
    let names: Vec<&str> = json["records"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["name"].as_str().unwrap())
        .collect();
    assert_eq!(names, ["victim", "unmarked", "attack"]);
}

#[test]
fn reorient_fixes_the_mark_and_inverts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = gradshield(&["gen-data", "--set", "dataset_count=3", "--out", p(&d.join("data"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mark = d.join("data/watermark.pgm");
    let star = d.join("star.pgm");
    let back = d.join("back.pgm");
    assert_eq!(
        code(&gradshield(&["reorient", "--input", p(&mark), "--output", p(&star)])),
        0
    );
    assert_eq!(
        code(&gradshield(&[
            "reorient",
            "--invert",
            "--input",
            p(&star),
            "--output",
            p(&back)
        ])),
        0
    );
    let original = std::fs::read(&mark).unwrap();
    assert_eq!(std::fs::read(&star).unwrap(), original);
    assert_eq!(std::fs::read(&back).unwrap(), original);
}
