use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use proptest::prelude::*;
use tapslf::encoder::EncoderConfig;
use tapslf_cli::{exit_code, finetune_into, parse_ratios, RunConfig};

const BIN: &str = env!("CARGO_BIN_EXE_tapslf");

fn small(out: &Path) -> RunConfig {
    let mut cfg = RunConfig {
        run_name: "small".into(),
        output_dir: out.to_path_buf(),
        ..RunConfig::default()
    };
    cfg.encoder = EncoderConfig {
        image_size: 16,
        patch_size: 4,
        channels: 1,
        d_model: 8,
        n_layers: 4,
        n_heads: 2,
        mlp_hidden: 16,
        max_prompts: 2,
    };
    cfg.adapter.n_prompts = 2;
    cfg.adapter.rank = 2;
    cfg.adapter.alpha = 4.0;
    cfg.heads.fpn_width = 4;
    cfg.heads.det_hidden = 4;
    cfg.data.samples_per_task = 10;
    cfg.pretrain.steps = 2;
    cfg.pretrain.batch_size = 2;
    cfg.finetune.epochs = 1;
    cfg.finetune.steps_per_epoch = 2;
    cfg.finetune.batch_size = 2;
    cfg
}

fn finetuned(dir: &Path) -> PathBuf {
    finetune_into(&small(dir), &dir.join("ft"), true).unwrap().checkpoint
}

fn run(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(BIN).args(args).output().unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_config_is_a_usage_error_naming_the_file() {
    let (code, _, err) = run(&["pretrain", "--config", "/no/such/config.json"]);
    assert_eq!(code, 2);
    assert!(err.contains("/no/such/config.json"), "{err}");
}

#[test]
fn malformed_config_reports_line_and_column() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    fs::write(&p, "{\n  \"seed\": 1,\n  \"encoder\": {\"d_model\": \"wide\"}\n}\n").unwrap();
    let (code, _, err) = run(&["finetune", "--config", s(&p)]);
    assert_eq!(code, 2);
    assert!(err.contains("bad.json:3:"), "{err}");
}

#[test]
fn unreadable_checkpoint_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = run(&["inspect", s(&dir.path().join("missing.ckpt"))]);
    assert_eq!(code, 3, "{err}");
}

#[test]
fn backbone_checkpoints_cannot_be_evaluated() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let p = dir.path().join("c.json");
    fs::write(&p, cfg.to_json()).unwrap();
    let (code, _, err) = run(&["pretrain", "--config", s(&p)]);
    assert_eq!(code, 0, "{err}");
    let backbone = cfg.run_dir().join(tapslf_cli::BACKBONE_FILE);
    let (code, _, err) = run(&["eval", s(&backbone)]);
    assert_eq!(code, 2, "{err}");
    let (code, out, _) = run(&["inspect", s(&backbone)]);
    assert_eq!(code, 0);
    assert!(out.contains("kind = Backbone"));
}

#[test]
fn unknown_task_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ck = finetuned(dir.path());
    let (code, _, err) = run(&["eval", s(&ck), "--task", "seg,cls"]);
    assert_eq!(code, 2, "{err}");
    let (code, out, _) = run(&["eval", s(&ck), "--task", "det"]);
    assert_eq!(code, 0);
    assert!(out.contains("miou = ") && !out.contains("dsc = "), "{out}");
}

#[test]
fn overlay_matches_input_size_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let ck = finetuned(dir.path());
    let (a, b) = (dir.path().join("a.ppm"), dir.path().join("b.ppm"));
    for out in [&a, &b] {
        let (code, _, err) = run(&["overlay", s(&ck), "--seed", "5", "--out", s(out)]);
        assert_eq!(code, 0, "{err}");
    }
    let bytes = fs::read(&a).unwrap();
    assert_eq!(bytes, fs::read(&b).unwrap());
    // Magic, width, height and maxval, each followed by one whitespace byte.
    let mut tokens = Vec::new();
    let mut at = 0;
    while tokens.len() < 4 {
        let end = at + bytes[at..].iter().position(u8::is_ascii_whitespace).unwrap();
        tokens.push(String::from_utf8(bytes[at..end].to_vec()).unwrap());
        at = end + 1;
    }
    assert_eq!(tokens, ["P6", "16", "16", "255"]);
    assert_eq!(bytes.len() - at, 16 * 16 * 3);
}

#[test]
fn inspect_reports_header_and_accounting() {
    let dir = tempfile::tempdir().unwrap();
    let ck = finetuned(dir.path());
    let (code, out, _) = run(&["inspect", s(&ck)]);
    assert_eq!(code, 0);
    for key in ["magic = TAPS", "version = 1", "kind = Finetuned", "prompted_tasks = [", "trainable_fraction = "] {
        assert!(out.contains(key), "missing {key:?} in\n{out}");
    }
}

#[test]
fn export_writes_images_and_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.json");
    fs::write(&p, small(dir.path()).to_json()).unwrap();
    let out = dir.path().join("data");
    let (code, _, err) = run(&["export", "--config", s(&p), "--out", s(&out)]);
    assert_eq!(code, 0, "{err}");
    for task in ["seg", "cls", "det", "reg"] {
        let train = out.join(task).join("train");
        let names: Vec<String> = fs::read_dir(&train)
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        let images = names.iter().filter(|n| n.ends_with(".pgm") && !n.ends_with("_mask.pgm"));
        assert_eq!(images.count(), 8, "{task}");
        let manifest = fs::read_to_string(train.join("manifest.csv")).unwrap();
        assert_eq!(manifest.lines().count(), 9, "{task}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ratio_lists_round_trip(ratios in prop::collection::vec(0.0f64..=1.0, 1..6)) {
        let text = ratios.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(",");
        prop_assert_eq!(parse_ratios(&text).unwrap(), ratios);
    }

    #[test]
    fn out_of_range_ratios_are_usage_errors(bad in prop_oneof![-10.0f64..-1e-9, 1.0 + 1e-9..10.0]) {
        let err = parse_ratios(&format!("0.5,{bad}")).unwrap_err();
        prop_assert_eq!(exit_code(&err), 2);
    }
}
