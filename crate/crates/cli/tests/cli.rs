use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use alldepth::depthmap::io::Dataset;
use alldepth::depthmap::Tag;
use alldepth::fusion::{merge_plug_and_play, FusionConfig};
use alldepth::metrics::parse_csv;
use alldepth::spade::SpadeModel;

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny.toml")
}

fn alldepth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_alldepth"))
        .arg("--config")
        .arg(fixture())
        .args(args)
        .env_remove("SPADE_URL_CACHE")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = alldepth(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(args: &[&str]) -> i32 {
    alldepth(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Generated data plus stage-2 SpaDe, sparse backbone and URL checkpoints.
struct Trained {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Trained {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let t = Trained { _dir: dir, root };
        ok(&["generate-data", "--out", s(&t.p("data")), "--seed", "1"]);
        ok(&[
            "train-spade",
            "--data",
            s(&t.manifest()),
            "--ckpt",
            s(&t.p("spade.ckpt")),
        ]);
        ok(&[
            "train-backbone",
            "--data",
            s(&t.manifest()),
            "--ckpt",
            s(&t.p("bb.ckpt")),
            "--tag",
            "day",
        ]);
        ok(&[
            "train-url",
            "--data",
            s(&t.manifest()),
            "--spade-ckpt",
            s(&t.p("spade.ckpt")),
            "--ckpt",
            s(&t.p("url.ckpt")),
        ]);
        t
    }

    fn p(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn manifest(&self) -> PathBuf {
        self.p("data/manifest.json")
    }
}

#[test]
fn zero_scenes_give_an_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["generate-data", "--scenes", "0", "--out", s(dir.path())]);
    let ds = Dataset::load(dir.path().join("manifest.json")).unwrap();
    assert!(ds.is_empty());
    assert!(ds.manifest.config_digest.is_some());
}

#[test]
fn generation_is_repeatable_and_honours_the_night_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&[
            "generate-data",
            "--scenes",
            "80",
            "--night-ratio",
            "0.125",
            "--seed",
            "3",
            "--out",
            s(out),
        ]);
    }
    let manifest = std::fs::read(a.join("manifest.json")).unwrap();
    assert_eq!(manifest, std::fs::read(b.join("manifest.json")).unwrap());
    let ds = Dataset::load(a.join("manifest.json")).unwrap();
    assert_eq!(
        ds.manifest
            .records
            .iter()
            .filter(|r| r.tag == Tag::Night)
            .count(),
        10
    );
}

#[test]
fn exit_codes_follow_the_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["generate-data", "--scenes", "4", "--out", s(&data)]);
    let manifest = data.join("manifest.json");

    // stage 2 without a stage-1 checkpoint
    let missing = dir.path().join("none.ckpt");
    assert_eq!(
        code(&[
            "train-spade",
            "--data",
            s(&manifest),
            "--stage",
            "2",
            "--ckpt",
            s(&missing)
        ]),
        2
    );
    // a checkpoint that is not a completed stage 1 is also a configuration problem
    let fresh = dir.path().join("fresh.ckpt");
    alldepth::spade::save_checkpoint(
        &alldepth::spade::TrainState::new(Default::default(), Default::default(), 0).unwrap(),
        &fresh,
    )
    .unwrap();
    assert_eq!(
        code(&[
            "train-spade",
            "--data",
            s(&manifest),
            "--stage",
            "2",
            "--ckpt",
            s(&fresh)
        ]),
        2
    );

    // evaluation of an empty manifest
    let empty = dir.path().join("empty");
    ok(&["generate-data", "--scenes", "0", "--out", s(&empty)]);
    let out = dir.path().join("rep");
    assert_eq!(
        code(&[
            "evaluate",
            "--data",
            s(&empty.join("manifest.json")),
            "--model",
            "gt",
            "--out",
            s(&out)
        ]),
        2
    );

    // preprocessing without a SpaDe checkpoint
    assert_eq!(
        code(&[
            "preprocess",
            "--data",
            s(&manifest),
            "--spade-ckpt",
            s(&missing),
            "--out",
            s(&out)
        ]),
        2
    );

    // unreadable manifest
    assert_eq!(
        code(&[
            "evaluate",
            "--data",
            s(&dir.path().join("nope.json")),
            "--model",
            "gt",
            "--out",
            s(&out)
        ]),
        1
    );

    // unknown configuration key
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[spade]\nepochs = 3\n").unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_alldepth"))
        .args(["--config", s(&bad), "show-config"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));

    // diverging training (the backbone's bounded output keeps its loss finite, SpaDe's does not)
    let hot = dir.path().join("hot.toml");
    let text = std::fs::read_to_string(fixture())
        .unwrap()
        .replace("lr = { base = 1e-3 }", "lr = { base = 1e300 }");
    std::fs::write(&hot, text).unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_alldepth"))
        .args([
            "--config",
            s(&hot),
            "train-spade",
            "--stage",
            "1",
            "--data",
            s(&manifest),
            "--ckpt",
        ])
        .arg(dir.path().join("hot.ckpt"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
}

#[test]
fn full_pipeline_is_deterministic_and_consistent() {
    let (a, b) = (Trained::new(), Trained::new());
    for name in [
        "spade.ckpt",
        "bb.ckpt",
        "url.ckpt",
        "spade.losses.csv",
        "url.losses.csv",
    ] {
        assert_eq!(
            std::fs::read(a.p(name)).unwrap(),
            std::fs::read(b.p(name)).unwrap(),
            "{name}"
        );
    }
    // loss curves carry the digest that show-config prints
    let shown = String::from_utf8(alldepth(&["show-config"]).stdout).unwrap();
    let digest = shown
        .lines()
        .last()
        .unwrap()
        .trim_start_matches("# digest ")
        .to_string();
    let curve = std::fs::read_to_string(a.p("spade.losses.csv")).unwrap();
    assert!(curve.lines().next().unwrap().ends_with(",config_digest"));
    assert!(curve.lines().skip(1).all(|l| l.ends_with(&digest)));

    let eval = |t: &Trained| {
        let models = [
            "gt".to_string(),
            format!("spade={}", s(&t.p("spade.ckpt"))),
            format!("backbone={}", s(&t.p("bb.ckpt"))),
            format!("pnp={},{}", s(&t.p("spade.ckpt")), s(&t.p("bb.ckpt"))),
            format!("url={},{}", s(&t.p("spade.ckpt")), s(&t.p("url.ckpt"))),
        ];
        let mut args = vec![
            "evaluate".to_string(),
            "--data".into(),
            s(&t.manifest()).into(),
        ];
        for m in &models {
            args.extend(["--model".into(), m.clone()]);
        }
        args.extend([
            "--split".into(),
            "all".into(),
            "--out".into(),
            s(&t.p("rep")).into(),
        ]);
        ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    };
    eval(&a);
    eval(&b);
    for name in ["report.csv", "report.md", "run.json"] {
        assert_eq!(
            std::fs::read(a.p("rep").join(name)).unwrap(),
            std::fs::read(b.p("rep").join(name)).unwrap()
        );
    }

    let rows = parse_csv(&std::fs::read_to_string(a.p("rep/report.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 15);
    for r in rows.iter().filter(|r| r.method == "gt") {
        assert_eq!(
            (r.mae_mm, r.rmse_mm, r.imae_inv_km, r.irmse_inv_km),
            (0.0, 0.0, 0.0, 0.0)
        );
    }
    // the markdown table shows the same numbers, rounded
    let md = std::fs::read_to_string(a.p("rep/report.md")).unwrap();
    for r in &rows {
        assert!(
            md.contains(&format!("{:.2}", r.mae_mm)),
            "{} {}",
            r.method,
            r.split
        );
    }
    assert_eq!(
        md.lines()
            .filter(|l| l.starts_with("| ") && !l.starts_with("| Method"))
            .count(),
        5
    );
}

#[test]
fn preprocessing_matches_the_merge_rule() {
    let t = Trained::new();
    let spade = SpadeModel::from_checkpoint(
        &alldepth::checkpoint::Checkpoint::load(t.p("spade.ckpt")).unwrap(),
    )
    .unwrap();
    let src = Dataset::load(t.manifest()).unwrap();

    ok(&[
        "preprocess",
        "--data",
        s(&t.manifest()),
        "--spade-ckpt",
        s(&t.p("spade.ckpt")),
        "--out",
        s(&t.p("pre")),
    ]);
    let merged = Dataset::load(t.p("pre/manifest.json")).unwrap();
    assert_eq!(merged.len(), src.len());
    let fusion = FusionConfig::default();
    for (ra, rb) in src.manifest.records.iter().zip(&merged.manifest.records) {
        let (a, b) = (
            src.load_record(ra).unwrap(),
            merged.load_record(rb).unwrap(),
        );
        assert!(b.sparse.measured_count() >= a.sparse.measured_count());
        let out = spade.forward(&a.sparse).unwrap();
        let want = merge_plug_and_play(&a.sparse, &out.zhat, &out.sigma, &fusion).unwrap();
        for (x, y) in b.sparse.values().iter().zip(want.values()) {
            assert!((x - y).abs() <= 0.5 / 256.0 + 1e-12);
        }
        assert_eq!(a.gt, b.gt);
    }

    ok(&[
        "preprocess",
        "--data",
        s(&t.manifest()),
        "--spade-ckpt",
        s(&t.p("spade.ckpt")),
        "--tau",
        "-inf",
        "--out",
        s(&t.p("same")),
    ]);
    let same = Dataset::load(t.p("same/manifest.json")).unwrap();
    for (ra, rb) in src.manifest.records.iter().zip(&same.manifest.records) {
        let a = std::fs::read(src.resolve(&ra.sparse_path)).unwrap();
        assert_eq!(a, std::fs::read(same.resolve(&rb.sparse_path)).unwrap());
    }
}

#[test]
fn stage_both_equals_stage_one_then_two() {
    let t = Trained::new();
    let m = s(&t.manifest()).to_string();
    let staged = t.p("staged.ckpt");
    ok(&[
        "train-spade",
        "--data",
        &m,
        "--stage",
        "1",
        "--ckpt",
        s(&staged),
    ]);
    ok(&[
        "train-spade",
        "--data",
        &m,
        "--stage",
        "2",
        "--ckpt",
        s(&staged),
    ]);
    let a = alldepth::spade::load_checkpoint(&staged).unwrap();
    let b = alldepth::spade::load_checkpoint(t.p("spade.ckpt")).unwrap();
    assert_eq!(a.model.params, b.model.params);
    assert_eq!(a.stage, 2);
}

#[test]
fn relative_checkpoints_resolve_against_the_cache_directory() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["generate-data", "--scenes", "4", "--out", s(&data)]);
    let cache = dir.path().join("cache");
    let status = Command::new(env!("CARGO_BIN_EXE_alldepth"))
        .args([
            "--config",
            s(&fixture()),
            "train-spade",
            "--stage",
            "1",
            "--ckpt",
            "sub/spade.ckpt",
            "--data",
        ])
        .arg(data.join("manifest.json"))
        .env("SPADE_URL_CACHE", &cache)
        .current_dir(dir.path())
        .status()
        .unwrap();
    assert!(status.success());
    assert!(cache.join("sub/spade.ckpt").is_file());
    assert!(cache.join("sub/spade.losses.csv").is_file());
}

#[test]
fn checkpoints_record_the_config_digest() {
    let t = Trained::new();
    let out = alldepth(&["show-config"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let digest = text
        .lines()
        .last()
        .unwrap()
        .trim_start_matches("# digest ")
        .to_string();
    for name in ["spade.ckpt", "bb.ckpt", "url.ckpt"] {
        let ck = alldepth::checkpoint::Checkpoint::load(t.p(name)).unwrap();
        assert_eq!(
            ck.meta::<String>("config_digest").unwrap(),
            digest,
            "{name}"
        );
    }
    let url = alldepth::checkpoint::Checkpoint::load(t.p("url.ckpt")).unwrap();
    assert_eq!(
        url.meta::<FusionConfig>("fusion").unwrap(),
        FusionConfig::default()
    );
    let ds = Dataset::load(t.manifest()).unwrap();
    // generate-data ran with a --seed override, so its digest differs
    assert!(ds.manifest.config_digest.is_some());
}
