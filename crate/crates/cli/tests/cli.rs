use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use logitshift::formats::grid::parse_grid;
use logitshift::formats::model::{parse, write_model};
use logitshift::formats::pnm::{decode, encode, PnmImage, PnmKind};
use logitshift::surgery::{apply_logit_shift, AttackConfig};
use logitshift::trainer::init_network;
use logitshift::{Classifier, LayerKind, LayerSpec, Model, Network, Tensor};
use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_logitshift"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small trained model plus an exported probe directory, shared by the
/// tests below.
struct Fixture {
    _dir: TempDir,
    model: PathBuf,
    attacked: PathBuf,
    probes: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let model = dir.path().join("model.json");
        let attacked = dir.path().join("attacked.json");
        let probes = dir.path().join("probes");
        ok(&[
            "train",
            "--seed",
            "3",
            "--count",
            "200",
            "--epochs",
            "4",
            "--out",
            s(&model),
        ]);
        ok(&["attack", "--model", s(&model), "--out", s(&attacked)]);
        ok(&["dataset", "--count", "12", "--seed", "4", "--out-dir", s(&probes)]);
        Fixture {
            _dir: dir,
            model,
            attacked,
            probes,
        }
    })
}

fn load(path: &Path) -> Model {
    parse(&fs::read(path).unwrap()).unwrap()
}

fn report(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn train_is_deterministic_and_writes_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    let args = ["train", "--seed", "7", "--epochs", "2", "--count", "40", "--size", "16"];
    ok(&[&args[..], &["--out", s(&a)]].concat());
    ok(&[&args[..], &["--out", s(&b)]].concat());
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let metrics = report(&dir.path().join("a.metrics.json"));
    assert_eq!(metrics["loss_curve"].as_array().unwrap().len(), 3);
    assert_eq!(metrics["steps"], 8);
    assert_eq!(
        fs::read(dir.path().join("a.metrics.json")).unwrap(),
        fs::read(dir.path().join("b.metrics.json")).unwrap()
    );
}

#[test]
fn zero_learning_rate_keeps_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.json");
    ok(&[
        "train",
        "--seed",
        "5",
        "--lr",
        "0",
        "--epochs",
        "1",
        "--count",
        "20",
        "--size",
        "16",
        "--out",
        s(&out),
    ]);
    assert_eq!(
        fs::read_to_string(&out).unwrap(),
        write_model(&init_network(16, 5).unwrap(), None)
    );
}

#[test]
fn usage_errors_exit_with_two() {
    let out = run(&["train", "--seed", "7"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--out"));
    let f = fixture();
    let prefix = f.probes.join("x");
    let image = f.probes.join("img_00000.pgm");
    let base = [
        "explain",
        "--model",
        s(&f.model),
        "--image",
        s(&image),
        "--out-prefix",
        s(&prefix),
    ];
    let out = run(&[&base[..], &["--method", "lime"]].concat());
    assert_eq!(out.status.code(), Some(2));
    let out = run(&[&base[..], &["--method", "gradcam", "--layer", "nope"]].concat());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));
    let out = run(&[&base[..], &["--method", "saliency", "--class", "9"]].concat());
    assert_eq!(out.status.code(), Some(2));
    let out = run(&[
        "train",
        "--out",
        "/nonexistent-dir/m.json",
        "--count",
        "4",
        "--epochs",
        "0",
        "--size",
        "8",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn attack_defaults_and_round_trip() {
    let f = fixture();
    let text = fs::read_to_string(&f.attacked).unwrap();
    let doc: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(doc["attack"]["k"], 10.0);
    assert_eq!(doc["attack"]["i0"], 0);
    assert_eq!(doc["attack"]["j0"], 0);
    assert_eq!(doc["attack"]["tap_layer"], "pool2");
    let Model::Plain(net) = load(&f.model) else {
        panic!("plain model expected")
    };
    let direct = apply_logit_shift(net.clone(), &AttackConfig::default_for(&net).unwrap()).unwrap();
    let reloaded = load(&f.attacked);
    let x = Tensor::filled(&[32, 32, 1], 0.4);
    let (a, b) = (direct.forward(&x).unwrap(), reloaded.forward(&x).unwrap());
    assert!(a.logits().max_abs_diff(b.logits()).unwrap() <= 1e-15);
}

#[test]
fn invalid_tap_names_spatial_extent() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "attack",
        "--model",
        s(&f.model),
        "--tap-i",
        "8",
        "--out",
        s(&dir.path().join("a.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("8x8"),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let out = run(&[
        "attack",
        "--model",
        s(&f.attacked),
        "--out",
        s(&dir.path().join("b.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_passes_for_default_attack() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.json");
    ok(&[
        "verify",
        "--model",
        s(&f.model),
        "--attacked",
        s(&f.attacked),
        "--random",
        "100",
        "--seed",
        "1",
        "--report",
        s(&path),
    ]);
    let r = report(&path);
    assert_eq!(r["passed"], true);
    assert_eq!(r["config"]["probes"]["count"], 100);
    assert_eq!(r["config"]["attack"]["k"], 10.0);
    // 20 probes x 2 score kinds x 4 map types
    assert_eq!(r["comparisons"].as_array().unwrap().len(), 160);
    for c in r["criteria"].as_array().unwrap() {
        let (v, t) = (c["value"].as_f64().unwrap(), c["tolerance"].as_f64().unwrap());
        let holds = if c["bound"] == "at_most" { v <= t } else { v >= t };
        assert_eq!(c["passed"].as_bool().unwrap(), holds);
    }
}

#[test]
fn verify_model_against_itself_is_exact() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.json");
    ok(&[
        "verify",
        "--model",
        s(&f.model),
        "--attacked",
        s(&f.model),
        "--probes",
        s(&f.probes),
        "--report",
        s(&path),
    ]);
    let r = report(&path);
    for c in r["criteria"].as_array().unwrap() {
        let expect = if c["name"] == "prediction_agreement" { 1.0 } else { 0.0 };
        assert_eq!(c["value"].as_f64().unwrap(), expect, "{}", c["name"]);
    }
    assert_eq!(r["config"]["probes"]["kind"], "dataset");
    assert_eq!(r["config"]["probes"]["seed"], 4);
}

#[test]
fn zero_gain_attack_is_identical() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let (atk, path) = (dir.path().join("k0.json"), dir.path().join("report.json"));
    ok(&["attack", "--model", s(&f.model), "--k", "0", "--out", s(&atk)]);
    ok(&[
        "verify",
        "--model",
        s(&f.model),
        "--attacked",
        s(&atk),
        "--random",
        "10",
        "--report",
        s(&path),
    ]);
    let r = report(&path);
    for c in r["criteria"].as_array().unwrap() {
        let expect = if c["name"] == "prediction_agreement" { 1.0 } else { 0.0 };
        assert_eq!(c["value"].as_f64().unwrap(), expect, "{}", c["name"]);
    }
    for entry in r["comparisons"].as_array().unwrap() {
        assert_eq!(entry["metrics"]["max_abs_diff"], 0.0);
    }
}

#[test]
fn negative_control_fails_verification() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let (atk, path) = (dir.path().join("nc.json"), dir.path().join("report.json"));
    ok(&["attack", "--model", s(&f.model), "--shift-class", "0", "--out", s(&atk)]);
    let out = run(&[
        "verify",
        "--model",
        s(&f.model),
        "--attacked",
        s(&atk),
        "--random",
        "20",
        "--report",
        s(&path),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("output_equivalence"));
    assert_eq!(report(&path)["passed"], false);
}

fn explain(model: &Path, image: &Path, prefix: &Path, extra: &[&str]) {
    let base = [
        "explain",
        "--model",
        s(model),
        "--image",
        s(image),
        "--out-prefix",
        s(prefix),
    ];
    ok(&[&base[..], extra].concat());
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    PathBuf::from(format!("{}{suffix}", p.display()))
}

#[test]
fn explain_post_softmax_matches_between_models() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let image = f.probes.join("img_00001.pgm");
    for method in [
        &["--method", "gradcam", "--variant", "gap"][..],
        &["--method", "gradcam", "--variant", "elementwise"],
        &["--method", "saliency"],
        &["--method", "ig"],
    ] {
        let (pa, pb) = (dir.path().join("a"), dir.path().join("b"));
        let args = [method, &["--class", "1", "--score", "post"]].concat();
        explain(&f.model, &image, &pa, &args);
        explain(&f.attacked, &image, &pb, &args);
        let (ga, gb) = (
            parse_grid(&fs::read(with_suffix(&pa, ".values.json")).unwrap()).unwrap(),
            parse_grid(&fs::read(with_suffix(&pb, ".values.json")).unwrap()).unwrap(),
        );
        assert_eq!(
            (&ga.method, &ga.variant, &ga.score, ga.class, &ga.layer),
            (&gb.method, &gb.variant, &gb.score, gb.class, &gb.layer)
        );
        assert!(ga.values.max_abs_diff(&gb.values).unwrap() <= 1e-8, "{method:?}");
        for suffix in [".pgm", ".overlay.ppm"] {
            assert_eq!(
                fs::read(with_suffix(&pa, suffix)).unwrap(),
                fs::read(with_suffix(&pb, suffix)).unwrap(),
                "{method:?}{suffix}"
            );
        }
    }
}

#[test]
fn explain_pre_softmax_elementwise_peaks_at_tap() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let prefix = dir.path().join("e");
    let image = f.probes.join("img_00002.pgm");
    explain(
        &f.attacked,
        &image,
        &prefix,
        &["--method", "gradcam", "--variant", "elementwise", "--score", "pre"],
    );
    let g = parse_grid(&fs::read(with_suffix(&prefix, ".values.json")).unwrap()).unwrap();
    assert_eq!(g.values.shape(), &[8, 8]);
    assert!(g.values.max() > 0.0);
    assert_eq!(g.values.argmax_flat().unwrap(), 0);
    let pgm = decode(&fs::read(with_suffix(&prefix, ".pgm")).unwrap()).unwrap();
    assert_eq!((pgm.width, pgm.height, pgm.samples[0]), (8, 8, 255));
    let ppm = decode(&fs::read(with_suffix(&prefix, ".overlay.ppm")).unwrap()).unwrap();
    assert_eq!((ppm.width, ppm.height, ppm.channels), (32, 32, 3));
}

#[test]
fn explain_dead_class_gives_zero_map_and_flat_overlay() {
    let dir = tempfile::tempdir().unwrap();
    let zeros = |shape: &[usize]| Tensor::zeros(shape);
    let net = Network::new(
        vec![4, 4, 1],
        vec![
            LayerSpec::new(
                "conv",
                LayerKind::Conv2d {
                    weights: zeros(&[2, 3, 3, 1]),
                    bias: zeros(&[2]),
                    stride: 1,
                    padding: 1,
                },
            ),
            LayerSpec::new("relu", LayerKind::Relu),
            LayerSpec::new(
                "pool",
                LayerKind::MaxPool {
                    window: (2, 2),
                    stride: 2,
                },
            ),
            LayerSpec::new("flatten", LayerKind::Flatten),
            LayerSpec::new(
                "dense",
                LayerKind::Dense {
                    weights: zeros(&[2, 8]),
                    bias: zeros(&[2]),
                },
            ),
        ],
    )
    .unwrap();
    let model = dir.path().join("dead.json");
    fs::write(&model, write_model(&net, None)).unwrap();
    let image = dir.path().join("img.ppm");
    let img = PnmImage::new(4, 4, 3, 255, (0..48).map(|i| (i * 5) as u16).collect()).unwrap();
    fs::write(&image, encode(&img, PnmKind::P3).unwrap()).unwrap();
    let prefix = dir.path().join("dead");
    explain(&model, &image, &prefix, &["--method", "gradcam", "--class", "1"]);
    let g = parse_grid(&fs::read(with_suffix(&prefix, ".values.json")).unwrap()).unwrap();
    assert!(g.zero_map);
    let ppm = decode(&fs::read(with_suffix(&prefix, ".overlay.ppm")).unwrap()).unwrap();
    assert!(ppm.samples.chunks(3).all(|p| p[0] == p[1] && p[1] == p[2]));
}
