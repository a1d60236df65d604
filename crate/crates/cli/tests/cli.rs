use std::path::Path;
use std::process::{Command, Output};

use knolling::geometry::OrientedRect;
use knolling::knoll::{KnollModel, KnollModelConfig, LayoutSpec};
use knolling::nn::TransformerConfig;
use knolling::scene::{Scene, SceneObject};

fn knolling(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_knolling"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("KNOLLING_LOG", "error")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn gen_data_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = knolling(d.path(), &["gen-data", "--scenes", "100", "--seed", "7"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let read = |d: &tempfile::TempDir, f: &str| std::fs::read(d.path().join(f)).unwrap();
    assert_eq!(read(&a, "data.jsonl"), read(&b, "data.jsonl"));
    assert_eq!(read(&a, "data.manifest.json"), read(&b, "data.manifest.json"));
}

#[test]
fn label_scorer_is_perfect() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&knolling(d.path(), &["gen-data", "--scenes", "100", "--seed", "3"])), 0);
    let o = knolling(d.path(), &["eval-gem", "--scorer", "labels", "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("100.000%"), "{}", stdout(&o));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.path().join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 3);
    assert!(report["config_digest"].is_string());
}

#[test]
fn render_draws_workspace_and_every_object() {
    let d = tempfile::tempdir().unwrap();
    let mut scene = Scene::empty(Default::default(), 0);
    let rect = |x, l, w| OrientedRect::new(x, 0.0, 0.0, l, w).unwrap();
    scene.objects = vec![
        SceneObject {
            id: 0,
            rect: rect(0.3, 0.05, 0.04),
            z_layer: 0,
            supported_by: None,
            color_tag: 0,
        },
        SceneObject {
            id: 1,
            rect: rect(0.3, 0.03, 0.02),
            z_layer: 1,
            supported_by: Some(0),
            color_tag: 1,
        },
    ];
    scene.validate().unwrap();
    let path = d.path().join("scene.json");
    std::fs::write(&path, serde_json::to_string(&scene).unwrap()).unwrap();
    let o = knolling(d.path(), &["render", "--scene", path.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let svg = std::fs::read_to_string(d.path().join("scene.svg")).unwrap();
    assert_eq!(svg.matches("<rect").count(), 3);
    assert!(svg.contains("config_digest"));
}

#[test]
fn bad_input_exits_2() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("bad.json");
    std::fs::write(&cfg, r#"{"no_such_key": 1}"#).unwrap();
    assert_eq!(code(&knolling(d.path(), &["gen-data", "--config", cfg.to_str().unwrap()])), 2);
    assert_eq!(code(&knolling(d.path(), &["eval-gem", "--data", "missing.jsonl"])), 2);
    assert_eq!(code(&knolling(d.path(), &["gen-data", "--jobs", "0"])), 2);
    assert_eq!(code(&knolling(d.path(), &["plan", "--extents", "0.05;0.02"])), 2);
    assert_eq!(code(&knolling(d.path(), &["no-such-command"])), 2);
}

#[test]
fn invalid_plan_exits_3() {
    let d = tempfile::tempdir().unwrap();
    // An untrained planner puts everything near the same spot.
    let cfg = KnollModelConfig {
        transformer: TransformerConfig {
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            ffn_dim: 16,
        },
        k: 1,
    };
    let model = KnollModel::new(cfg, LayoutSpec::default(), 0).unwrap();
    model.save(&d.path().join("knoll.json"), serde_json::json!({})).unwrap();
    let o = knolling(d.path(), &["plan", "--extents", "0.05,0.02;0.04,0.03;0.03,0.03"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    let plan: serde_json::Value = serde_json::from_slice(&std::fs::read(d.path().join("plan.json")).unwrap()).unwrap();
    assert_eq!(plan["valid"], false);
    assert_eq!(plan["plan"].as_array().unwrap().len(), 3);
}

#[test]
fn gradcheck_passes() {
    let d = tempfile::tempdir().unwrap();
    let o = knolling(d.path(), &["gradcheck", "--seed", "4"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.path().join("gradcheck.json").exists());
}

#[test]
fn jobs_do_not_change_data() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(code(&knolling(a.path(), &["gen-data", "--scenes", "40", "--jobs", "1"])), 0);
    assert_eq!(code(&knolling(b.path(), &["gen-data", "--scenes", "40", "--jobs", "3"])), 0);
    assert_eq!(
        std::fs::read(a.path().join("data.jsonl")).unwrap(),
        std::fs::read(b.path().join("data.jsonl")).unwrap()
    );
}
