mod common;

use std::fs;

use common::*;
use serde_json::Value;

fn manifest(dir: &std::path::Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn dataset_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["dataset", "--n", "10", "--seed", "4", "--out", s(&a)]);
    ok(&["dataset", "--n", "10", "--seed", "4", "--out", s(&b)]);
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), 12);
    assert_eq!(ta, tb);
    assert_eq!(fs::read_to_string(a.join("records.jsonl")).unwrap().lines().count(), 10);
    let m = manifest(&a);
    assert_eq!(m["count"], 10);
    assert_eq!(m["seed"], 4);
    assert_eq!(m["samples"][3]["file"], "000003.png");

    let c = tmp.path().join("c");
    ok(&["dataset", "--n", "10", "--seed", "5", "--out", s(&c)]);
    assert_ne!(tree(&c), ta);
}

#[test]
fn dataset_with_zero_items_writes_an_empty_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    ok(&["dataset", "--n", "0", "--out", s(&out)]);
    let m = manifest(&out);
    assert_eq!(m["count"], 0);
    assert_eq!(m["samples"].as_array().unwrap().len(), 0);
}

#[test]
fn dataset_refuses_a_non_empty_directory_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    fs::create_dir(&out).unwrap();
    write(&out, "keep.txt", "x");
    let r = tinybridge(&["dataset", "--n", "2", "--out", s(&out)], &[]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("--force"), "{}", r.stderr);
    assert!(out.join("keep.txt").exists());
    ok(&["dataset", "--n", "2", "--out", s(&out), "--force"]);
    assert!(!out.join("keep.txt").exists());
    assert!(out.join("000001.png").exists());
}

#[test]
fn dataset_into_an_unwritable_path_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let file = write(tmp.path(), "plain", "x");
    let r = tinybridge(&["dataset", "--n", "1", "--out", s(&file.join("sub"))], &[]);
    assert_eq!(r.code, 2, "{}", r.stderr);
    assert!(r.stderr.starts_with("error:"), "{}", r.stderr);
}

#[test]
fn smoke_run_writes_log_checkpoints_and_grids() {
    let run = &smoke().run;
    let log = fs::read_to_string(run.join("loss.log")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 200);
    for (i, l) in lines.iter().enumerate() {
        let (step, loss) = l.split_once(' ').unwrap();
        assert_eq!(step.parse::<usize>().unwrap(), i + 1);
        assert!(loss.parse::<f64>().unwrap().is_finite());
    }
    for step in [100, 200] {
        assert!(run.join(format!("checkpoints/step_{step:06}.ckpt")).is_file());
        assert!(run.join(format!("samples/step_{step:06}.png")).is_file());
    }
    assert_eq!(fs::read_dir(run.join("checkpoints")).unwrap().count(), 2);
}

#[test]
fn echoed_config_round_trips() {
    let echo = fs::read_to_string(smoke().run.join("config.toml")).unwrap();
    let cfg = tinybridge::config::RunConfig::from_toml(&echo).unwrap();
    assert_eq!(cfg.to_toml(), echo);
    assert_eq!(cfg.train.steps, 200);
    assert_eq!(cfg.output_dir, s(&smoke().run));
}

/// Interrupted at step 100 from the echoed config, then resumed, the run
/// ends on the same bytes as the uninterrupted one.
#[test]
fn resumed_run_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("r");
    let echo = smoke().run.join("config.toml");
    ok(&["train", "--config", s(&echo), "--out", s(&out), "--until", "100"]);
    assert!(!out.join("checkpoints/step_000200.ckpt").exists());
    assert_eq!(fs::read_to_string(out.join("loss.log")).unwrap().lines().count(), 100);

    // Stray lines past the checkpoint are dropped on resume.
    let mut log = fs::read_to_string(out.join("loss.log")).unwrap();
    log.push_str("101 0.5\n");
    write(&out, "loss.log", &log);
    ok(&["train", "--resume", s(&out.join("checkpoints/step_000100.ckpt"))]);

    let ckpt = "checkpoints/step_000200.ckpt";
    assert_eq!(fs::read(out.join(ckpt)).unwrap(), fs::read(smoke().run.join(ckpt)).unwrap());
    assert_eq!(
        fs::read_to_string(out.join("loss.log")).unwrap(),
        fs::read_to_string(smoke().run.join("loss.log")).unwrap()
    );
}

#[test]
fn unknown_config_key_exits_2_naming_it() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "bad.toml", "[train]\nbatch_sise = 2\n");
    for cmd in ["train", "params", "dataset"] {
        let mut args = vec![cmd, "--config", s(&cfg), "--out", s(tmp.path())];
        if cmd == "dataset" {
            args.extend(["--n", "1"]);
        }
        let r = tinybridge(&args, &[]);
        assert_eq!(r.code, 2, "{cmd}: {}", r.stderr);
        assert!(r.stderr.contains("batch_sise"), "{cmd}: {}", r.stderr);
    }
    let r = tinybridge(&["params"], &[("TINYBRIDGE__TRAIN__STEPZ", "3")]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("stepz"), "{}", r.stderr);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(tinybridge(&["dataset"], &[]).code, 2);
    assert_eq!(tinybridge(&["frobnicate"], &[]).code, 2);
    assert_eq!(tinybridge(&["params", "--seed", "x"], &[]).code, 2);
}

#[test]
fn diverging_loss_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "nan.toml",
        &SMOKE_TOML
            .replace("steps = 200", "steps = 20\nlearning_rate = 1e30")
            .replace("snapshot_every = 100", "snapshot_every = 10"),
    );
    let out = tmp.path().join("nan");
    let r = tinybridge(&["train", "--config", s(&cfg), "--out", s(&out)], &[]);
    assert_eq!(r.code, 3, "{}", r.stderr);
    assert!(r.stderr.contains("non-finite"), "{}", r.stderr);
}

fn sample_into(dir: &std::path::Path, name: &str, prompts: &str, extra: &[&str]) -> std::path::PathBuf {
    let file = write(dir, &format!("{name}.txt"), prompts);
    let out = dir.join(name);
    let ckpt = smoke().run.join("checkpoints/step_000200.ckpt");
    let mut args = vec!["sample", "--checkpoint", s(&ckpt), "--prompts", s(&file), "--out", s(&out)];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

#[test]
fn sampling_three_prompts_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let prompts = "a red circle\na blue square left of a green triangle\na yellow triangle\n";
    let a = sample_into(tmp.path(), "a", prompts, &["--seed", "9"]);
    let b = sample_into(tmp.path(), "b", prompts, &["--seed", "9"]);
    let t = tree(&a);
    assert_eq!(t.len(), 4);
    assert_eq!(t, tree(&b));
    let m = manifest(&a);
    assert_eq!(m["samples"].as_array().unwrap().len(), 3);
    assert_eq!(m["cfg_scale"], 7.5);
    assert_eq!(m["checkpoint"], "step_000200.ckpt");
    let c = sample_into(tmp.path(), "c", prompts, &["--seed", "10"]);
    assert_ne!(tree(&c), t);
}

#[test]
fn guidance_collapses_for_the_empty_prompt() {
    let tmp = tempfile::tempdir().unwrap();
    let one = sample_into(tmp.path(), "one", "\n", &["--cfg-scale", "1"]);
    let zero = sample_into(tmp.path(), "zero", "\n", &["--cfg-scale", "0"]);
    assert_eq!(fs::read(one.join("000000.png")).unwrap(), fs::read(zero.join("000000.png")).unwrap());
}

#[test]
fn over_long_prompt_is_skipped_with_a_warning() {
    let tmp = tempfile::tempdir().unwrap();
    let long = "a red circle left of a blue square left of a green triangle above a yellow circle";
    let file = write(tmp.path(), "p.txt", &format!("a red circle\n{long}\na blue square\n"));
    let out = tmp.path().join("o");
    let ckpt = smoke().run.join("checkpoints/step_000200.ckpt");
    let r = ok(&["sample", "--checkpoint", s(&ckpt), "--prompts", s(&file), "--out", s(&out)]);
    assert!(r.stderr.contains("warning: skipping line 2"), "{}", r.stderr);
    assert!(out.join("000000.png").exists());
    assert!(!out.join("000001.png").exists());
    assert!(out.join("000002.png").exists());
    assert_eq!(manifest(&out)["skipped"][0]["index"], 1);
}

#[test]
fn sample_with_a_missing_checkpoint_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let file = write(tmp.path(), "p.txt", "a red circle\n");
    let r = tinybridge(
        &["sample", "--checkpoint", s(&tmp.path().join("none.ckpt")), "--prompts", s(&file), "--out", s(tmp.path())],
        &[],
    );
    assert_eq!(r.code, 2, "{}", r.stderr);
}

#[test]
fn oracle_rendered_dataset_scores_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    ok(&["dataset", "--n", "60", "--out", s(&d)]);
    ok(&["eval", "--samples", s(&d)]);
    let report = fs::read_to_string(d.join("report.txt")).unwrap();
    for key in ["color_accuracy", "shape_accuracy", "spatial_accuracy"] {
        assert_eq!(report_value(&report, key), Some("1.000000"), "{key}\n{report}");
    }
    assert_eq!(report_value(&report, "n_rejected"), Some("0"));
    assert!(report_value(&report, "frechet_distance").is_some());

    let again = tmp.path().join("again.txt");
    ok(&["eval", "--samples", s(&d), "--report", s(&again)]);
    assert_eq!(fs::read_to_string(again).unwrap(), report);
}

#[test]
fn constant_gray_images_are_all_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    ok(&["dataset", "--n", "20", "--out", s(&d)]);
    let gray = image::RgbImage::from_pixel(32, 32, image::Rgb([128; 3]));
    for i in 0..20 {
        gray.save(d.join(format!("{i:06}.png"))).unwrap();
    }
    ok(&["eval", "--samples", s(&d)]);
    let report = fs::read_to_string(d.join("report.txt")).unwrap();
    for key in ["color_accuracy", "shape_accuracy", "spatial_accuracy"] {
        assert_eq!(report_value(&report, key), Some("0.000000"), "{key}\n{report}");
    }
    assert_eq!(report_value(&report, "reject_rate"), Some("1.000000"));
}

#[test]
fn eval_below_the_classifier_resolution_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    ok(&["dataset", "--n", "4", "--config", s(&smoke().config), "--out", s(&d)]);
    let r = tinybridge(&["eval", "--samples", s(&d)], &[]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains(">= 32"), "{}", r.stderr);
}

#[test]
fn eval_without_a_manifest_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let r = tinybridge(&["eval", "--samples", s(tmp.path())], &[]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("manifest.json"), "{}", r.stderr);
}

#[test]
fn params_matches_golden_and_is_stable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "p.toml", "[language]\npreset = \"lm-small\"\n[vision]\npreset = \"unet-small\"\n");
    let a = ok(&["params", "--config", s(&cfg)]).stdout;
    let golden = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/tests/golden/params_lm-small_unet-small.txt");
    assert_eq!(a, fs::read_to_string(golden).unwrap());
    assert_eq!(a, ok(&["params", "--config", s(&cfg)]).stdout);
    let env = ok(&["params"]).stdout;
    let via_env = tinybridge(
        &["params"],
        &[("TINYBRIDGE__LANGUAGE__PRESET", "lm-small"), ("TINYBRIDGE__VISION__PRESET", "unet-small")],
    );
    assert_eq!(via_env.stdout, a);
    assert_ne!(env, a);
}
