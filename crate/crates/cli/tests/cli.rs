use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
format_version = 1
lookback = 16
horizon = 3
patch_len = 4
stride = 2
d_model = 4
n_heads = 1
n_layers = 1
d_ff = 8
ma_window = 5
max_epochs = 3
train_stride = 4
val_stride = 4
";

fn dplet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dplet"))
        .args(args)
        .env_remove("DPLET_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("run dplet")
}

fn ok(args: &[&str]) -> Output {
    let out = dplet(args);
    assert!(
        out.status.success(),
        "dplet {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
    data: PathBuf,
    config: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    let config = dir.path().join("tiny.txt");
    std::fs::write(&config, TINY).unwrap();
    ok(&[
        "synth",
        "--channels",
        "3",
        "--steps",
        "300",
        "--period",
        "24",
        "--seed",
        "5",
        "--out",
        s(&data),
    ]);
    Fixture { dir, data, config }
}

#[test]
fn train_is_deterministic_and_feeds_predict_and_evaluate() {
    let f = fixture();
    let run = |name: &str| {
        let out = f.dir.path().join(name);
        ok(&[
            "train",
            "--data",
            s(&f.data),
            "--config",
            s(&f.config),
            "--seed",
            "3",
            "--out",
            s(&out),
        ]);
        out
    };
    let (a, b) = (run("a"), run("b"));
    for file in ["model.ckpt", "train_report.txt"] {
        let (x, y) = (
            std::fs::read(a.join(file)).unwrap(),
            std::fs::read(b.join(file)).unwrap(),
        );
        assert_eq!(x, y, "{file} differs between runs");
    }
    let report = std::fs::read_to_string(a.join("train_report.txt")).unwrap();
    assert!(report.starts_with("format_version = 1\n"));
    assert!(report.contains("\nseed = 3\n") && report.contains("\nstop_reason = max_epochs\n"));

    let ckpt = a.join("model.ckpt");
    let forecast = f.dir.path().join("forecast.csv");
    ok(&[
        "predict",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&f.data),
        "--out",
        s(&forecast),
    ]);
    let text = std::fs::read_to_string(&forecast).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1 + 3);
    assert_eq!(lines[0], "ch0,ch1,ch2");

    let eval = f.dir.path().join("eval.txt");
    ok(&[
        "evaluate",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&f.data),
        "--out",
        s(&eval),
    ]);
    let eval = std::fs::read_to_string(eval).unwrap();
    for key in [
        "\nmse = ",
        "\nraw_mse = ",
        "\nbaseline.persistence_mse = ",
        "\nscale = standardized\n",
    ] {
        assert!(eval.contains(key), "{key:?} missing from {eval}");
    }
    let test_mse = report.lines().find(|l| l.starts_with("test.mse = ")).unwrap();
    assert!(
        eval.contains(&test_mse["test.".len()..]),
        "evaluation disagrees with training report"
    );
}

#[test]
fn synth_long_then_convert_matches_wide() {
    let f = fixture();
    let long = f.dir.path().join("long.csv");
    let wide = f.dir.path().join("wide.csv");
    let args = [
        "--channels",
        "3",
        "--steps",
        "300",
        "--period",
        "24",
        "--seed",
        "5",
    ];
    ok(&[&["synth", "--format", "long", "--out", s(&long)], &args[..]].concat());
    ok(&[
        "convert",
        "--input",
        s(&long),
        "--traffic-column",
        "traffic",
        "--out",
        s(&wide),
    ]);
    let original = std::fs::read_to_string(&f.data).unwrap();
    let converted = std::fs::read_to_string(&wide).unwrap();
    let values = |text: &str| -> Vec<Vec<String>> {
        text.lines()
            .skip(1)
            .map(|l| {
                l.split(',')
                    .skip(usize::from(l.matches(',').count() == 3))
                    .map(String::from)
                    .collect()
            })
            .collect()
    };
    assert!(converted.starts_with("timestamp,0,1,2\n"));
    assert_eq!(values(&original), values(&converted));
}

#[test]
fn seed_comes_from_flag_then_environment() {
    let dir = tempfile::tempdir().unwrap();
    let gen = |name: &str, env: Option<&str>, flag: Option<&str>| {
        let p = dir.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_dplet"));
        cmd.args(["synth", "--channels", "2", "--steps", "50", "--out", s(&p)]);
        cmd.env_remove("DPLET_SEED").env("RUST_LOG", "warn");
        if let Some(v) = env {
            cmd.env("DPLET_SEED", v);
        }
        if let Some(v) = flag {
            cmd.args(["--seed", v]);
        }
        assert!(cmd.status().unwrap().success());
        std::fs::read_to_string(p).unwrap()
    };
    let env9 = gen("a", Some("9"), None);
    assert_eq!(env9, gen("b", None, Some("9")));
    assert_ne!(env9, gen("c", None, None));
    assert_eq!(gen("d", Some("9"), Some("4")), gen("e", None, Some("4")));
}

#[test]
fn params_reports_counts() {
    let out = ok(&["params"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("total") && text.contains("1615632"), "{text}");
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("p.txt");
    ok(&["params", "--variant", "seasonal", "--out", s(&p)]);
    let kv = std::fs::read_to_string(p).unwrap();
    assert!(kv.contains("params.total = 3231264"), "{kv}");
}

#[test]
fn ablate_reports_three_rows() {
    let f = fixture();
    let out = f.dir.path().join("ablation.txt");
    let stdout = ok(&[
        "ablate",
        "--data",
        s(&f.data),
        "--config",
        s(&f.config),
        "--out",
        s(&out),
    ])
    .stdout;
    let table = String::from_utf8(stdout).unwrap();
    for label in [
        "Prediction+Data Processing",
        "Prediction+Local Feature Enhancement",
        "Proposed Framework",
    ] {
        assert!(table.contains(label), "{table}");
    }
    let kv = std::fs::read_to_string(out).unwrap();
    assert!(kv.contains("row2.variant = full"));
}

#[test]
fn denoise_writes_reconstruction() {
    let f = fixture();
    let out = f.dir.path().join("clean.csv");
    let stdout = ok(&[
        "denoise",
        "--data",
        s(&f.data),
        "--threshold",
        "0.5",
        "--out",
        s(&out),
    ])
    .stdout;
    assert!(String::from_utf8(stdout).unwrap().contains("kept rank 1 of 3"));
    assert_eq!(std::fs::read_to_string(out).unwrap().lines().count(), 301);
}

#[test]
fn exit_codes_follow_error_kind() {
    let f = fixture();
    let bad = f.dir.path().join("bad.txt");
    std::fs::write(&bad, "lookback = 16\nd_modle = 8\n").unwrap();
    let code = |args: &[&str]| dplet(args).status.code();
    let out = f.dir.path().join("o");
    let o = s(&out);

    assert_eq!(code(&["params", "--frobnicate"]), Some(2));
    assert_eq!(
        code(&["train", "--data", s(&f.data), "--config", s(&bad), "--out", o]),
        Some(2)
    );
    assert_eq!(code(&["params", "--variant", "nonsense"]), Some(2));
    assert_eq!(code(&["train", "--data", s(&f.data)]), Some(2));

    let missing = f.dir.path().join("missing.csv");
    assert_eq!(
        code(&[
            "train",
            "--data",
            s(&missing),
            "--config",
            s(&f.config),
            "--out",
            o
        ]),
        Some(3)
    );
    let garbage = f.dir.path().join("garbage.csv");
    std::fs::write(&garbage, "a,b\n1,x\n").unwrap();
    assert_eq!(code(&["denoise", "--data", s(&garbage), "--out", o]), Some(3));
    let not_ckpt = f.dir.path().join("x.ckpt");
    std::fs::write(&not_ckpt, b"nope").unwrap();
    assert_eq!(
        code(&[
            "predict",
            "--checkpoint",
            s(&not_ckpt),
            "--data",
            s(&f.data),
            "--out",
            o
        ]),
        Some(3)
    );

    let diverge = f.dir.path().join("diverge.txt");
    std::fs::write(&diverge, format!("{TINY}lr = 1e300\n")).unwrap();
    assert_eq!(
        code(&["train", "--data", s(&f.data), "--config", s(&diverge), "--out", o]),
        Some(4)
    );
}

#[test]
fn book_config_example_is_accepted() {
    let chapter = include_str!("../../../book/src/cli.md");
    let start = chapter.find("```text\nformat_version").expect("config example") + "```text\n".len();
    let body = &chapter[start..start + chapter[start..].find("```").unwrap()];
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("run.txt");
    std::fs::write(&p, body).unwrap();
    let out = ok(&["params", "--config", s(&p)]);
    assert!(String::from_utf8(out.stdout).unwrap().contains("1615632"));
}
