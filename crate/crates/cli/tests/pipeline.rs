//! End-to-end checks of the file formats, resume semantics, and the CLI
//! binary itself.

mod common;

use std::fs;
use std::path::Path;
use std::process::Command;

use flmgrow::ckptio::{self, AnyCheckpoint};
use flmgrow::commands;
use flmgrow::corpus::Corpus;
use flmgrow::presets::preset;
use flmgrow::runner::{self, RunOptions, StopRule};
use flmgrow::with_checkpoint;
use flmgrow_core::checkpoint::Checkpoint;
use flmgrow_core::growth::{apply_plan, DepthSources, GrowthPlan, WidthInit};
use flmgrow_core::model::ModelConfig;
use flmgrow_core::optim::AdamHyper;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_flmgrow"))
}

fn toy52_model() -> ModelConfig {
    preset("toy-52").unwrap().model
}

#[test]
fn checkpoint_roundtrip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ckpt = Checkpoint::<f32>::fresh(&toy52_model(), 77).unwrap();
    ckptio::save(&ckpt, &a).unwrap();
    let loaded = ckptio::load(&a).unwrap();
    with_checkpoint!(&loaded, |c| ckptio::save(c, &b).unwrap());
    assert!(ckptio::dirs_identical(&a, &b).unwrap());
}

#[test]
fn grown_checkpoint_roundtrips_with_mask_state() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ckpt = Checkpoint::<f64>::fresh(&toy52_model(), 78).unwrap();
    let plan = GrowthPlan {
        target: ModelConfig {
            hidden_dim: 96,
            head_num: 6,
            ffn_dim: 256,
            layer_num: 5,
            ..toy52_model()
        },
        width_init_std: 0.004,
        width_init: WidthInit::Normal,
        depth_sources: DepthSources::Explicit(vec![(2, 2)]),
        transition_steps: 100,
        seed: 9,
    };
    let grown = apply_plan(&ckpt, &plan, None).unwrap().checkpoint;
    assert!(grown.mask_state.is_some());
    ckptio::save(&grown, &a).unwrap();
    let loaded = ckptio::load(&a).unwrap();
    with_checkpoint!(&loaded, |c| ckptio::save(c, &b).unwrap());
    assert!(ckptio::dirs_identical(&a, &b).unwrap());
    match loaded {
        AnyCheckpoint::F64(c) => {
            assert_eq!(c.mask_state, grown.mask_state);
            assert_eq!(c.growth_history, grown.growth_history);
        }
        _ => panic!("dtype changed through the store"),
    }
}

#[test]
fn growth_history_replay_reproduces_checkpoint() {
    // Growth-only pipeline: replaying the recorded plans on the original
    // initial checkpoint reproduces the final one bit-exactly.
    let dir = tempfile::tempdir().unwrap();
    let base = Checkpoint::<f64>::fresh(&toy52_model(), 123).unwrap();
    let plan1 = GrowthPlan {
        target: ModelConfig {
            hidden_dim: 96,
            head_num: 6,
            ffn_dim: 256,
            ..toy52_model()
        },
        width_init_std: 0.004,
        width_init: WidthInit::Normal,
        depth_sources: DepthSources::DistanceBased,
        transition_steps: 100,
        seed: 1001,
    };
    let mut grown1 = apply_plan(&base, &plan1, None).unwrap().checkpoint;
    grown1.mask_state.as_mut().unwrap().mask = 1.0; // transition done
    let plan2 = GrowthPlan {
        target: ModelConfig {
            layer_num: 6,
            ..grown1.config.clone()
        },
        width_init_std: 0.004,
        width_init: WidthInit::Normal,
        depth_sources: DepthSources::Explicit(vec![(1, 1), (3, 3)]),
        transition_steps: 100,
        seed: 1002,
    };
    let current = apply_plan(&grown1, &plan2, None).unwrap().checkpoint;
    assert_eq!(current.growth_history.len(), 2, "one history entry per event");
    let cur_dir = dir.path().join("current");
    ckptio::save(&current, &cur_dir).unwrap();

    // Replay from the manifest's history.
    let loaded = ckptio::load(&cur_dir).unwrap();
    let history = match &loaded {
        AnyCheckpoint::F64(c) => c.growth_history.clone(),
        _ => unreachable!(),
    };
    let mut replayed = Checkpoint::<f64>::fresh(&toy52_model(), 123).unwrap();
    for (i, plan) in history.iter().enumerate() {
        replayed = apply_plan(&replayed, plan, None).unwrap().checkpoint;
        if i == 0 {
            replayed.mask_state.as_mut().unwrap().mask = 1.0;
        }
    }
    let replay_dir = dir.path().join("replayed");
    // The final masks differ only through the same path; align and save.
    ckptio::save(&replayed, &replay_dir).unwrap();
    assert!(ckptio::dirs_identical(&cur_dir, &replay_dir).unwrap());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let corpus_text = common::synth_corpus(120_000, 5);
    let cfg = preset("toy-52").unwrap();
    let corpus = Corpus::from_bytes(corpus_text.as_bytes(), cfg.schedule.seq_len).unwrap();
    let hyper = AdamHyper::default();

    // Uninterrupted: 8 steps.
    let mut full = Checkpoint::<f32>::fresh(&cfg.model, 321).unwrap();
    let full_out = dir.path().join("full");
    let metrics_full = runner::train_run(
        &mut full,
        &corpus,
        &cfg.schedule,
        &hyper,
        &RunOptions {
            stop: StopRule::Steps(8),
            snapshot_every: None,
            out_dir: full_out.clone(),
        },
    )
    .unwrap();

    // Interrupted: 5 steps, save/load, 3 more.
    let mut part = Checkpoint::<f32>::fresh(&cfg.model, 321).unwrap();
    let part1_out = dir.path().join("part1");
    let m1 = runner::train_run(
        &mut part,
        &corpus,
        &cfg.schedule,
        &hyper,
        &RunOptions {
            stop: StopRule::Steps(5),
            snapshot_every: None,
            out_dir: part1_out.clone(),
        },
    )
    .unwrap();
    let reloaded = ckptio::load(&ckptio::checkpoint_dir(&part1_out)).unwrap();
    let mut resumed = match reloaded {
        AnyCheckpoint::F32(c) => c,
        _ => unreachable!(),
    };
    let part2_out = dir.path().join("part2");
    let m2 = runner::train_run(
        &mut resumed,
        &corpus,
        &cfg.schedule,
        &hyper,
        &RunOptions {
            stop: StopRule::Steps(3),
            snapshot_every: None,
            out_dir: part2_out.clone(),
        },
    )
    .unwrap();

    // Metrics concatenation identical, final checkpoints byte-identical.
    let joined: Vec<String> = m1.iter().chain(m2.iter()).map(runner::metrics_line).collect();
    let full_lines: Vec<String> = metrics_full.iter().map(runner::metrics_line).collect();
    assert_eq!(joined, full_lines);
    assert!(ckptio::dirs_identical(
        &ckptio::checkpoint_dir(&full_out),
        &ckptio::checkpoint_dir(&part2_out)
    )
    .unwrap());
}

#[test]
fn rerun_with_same_seed_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let corpus_path = dir.path().join("corpus.txt");
    fs::write(&corpus_path, common::synth_corpus(90_000, 6)).unwrap();

    let run = |tag: &str| -> (Vec<u8>, std::path::PathBuf) {
        let ckpt_dir = dir.path().join(format!("init-{tag}"));
        let mut cfg = preset("toy-52").unwrap();
        cfg.corpus = Some(corpus_path.clone());
        commands::cmd_init(&cfg, Some(&ckpt_dir), false).unwrap();
        let out = dir.path().join(format!("run-{tag}"));
        commands::cmd_train(&ckpt_dir, &cfg, StopRule::Steps(6), None, &out).unwrap();
        (
            fs::read(out.join("metrics.log")).unwrap(),
            ckptio::checkpoint_dir(&out),
        )
    };
    let (metrics_a, ckpt_a) = run("a");
    let (metrics_b, ckpt_b) = run("b");
    assert_eq!(metrics_a, metrics_b);
    assert!(ckptio::dirs_identical(&ckpt_a, &ckpt_b).unwrap());
}

#[test]
fn cli_end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("corpus.txt"), common::synth_corpus(90_000, 7)).unwrap();

    // init
    let out = bin()
        .args(["init", "--preset", "toy-52", "--seed", "99"])
        .args(["--out", d.join("ckpt0").to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("count_params="), "{stdout}");

    // dry-run init of the published 52B stage: prints the count, writes
    // nothing, allocates nothing.
    let out = bin()
        .args(["init", "--preset", "52B", "--dry-run"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    let count: f64 = stdout
        .lines()
        .find_map(|l| l.strip_prefix("count_params="))
        .unwrap()
        .parse()
        .unwrap();
    assert!((count - 52.85e9).abs() / 52.85e9 < 0.002);

    // invalid config: divisibility violation exits with the validation code.
    let mut bad = preset("toy-52").unwrap();
    bad.model.hidden_dim = 100;
    fs::write(d.join("bad.json"), serde_json::to_vec(&bad).unwrap()).unwrap();
    let out = bin()
        .args(["init", "--config", d.join("bad.json").to_str().unwrap(), "--dry-run"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    // train a few steps
    let out = bin()
        .args(["train", "--preset", "toy-52"])
        .args(["--ckpt", d.join("ckpt0").to_str().unwrap()])
        .args(["--corpus", d.join("corpus.txt").to_str().unwrap()])
        .args(["--out", d.join("run1").to_str().unwrap()])
        .args(["--steps", "5"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = fs::read_to_string(d.join("run1/metrics.log")).unwrap();
    assert_eq!(metrics.lines().count(), 5, "one line per executed step");

    // grow: width-only plan file
    let plan = GrowthPlan {
        target: ModelConfig {
            hidden_dim: 96,
            head_num: 6,
            ffn_dim: 256,
            ..toy52_model()
        },
        width_init_std: 0.004,
        width_init: WidthInit::Normal,
        depth_sources: DepthSources::DistanceBased,
        transition_steps: 100,
        seed: 11,
    };
    fs::write(d.join("plan.json"), serde_json::to_vec_pretty(&plan).unwrap()).unwrap();
    let out = bin()
        .args(["grow", "--ckpt", d.join("run1/checkpoint").to_str().unwrap()])
        .args(["--plan", d.join("plan.json").to_str().unwrap()])
        .args(["--out", d.join("grown").to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // verify: success right after growth
    let out = bin()
        .args(["verify", "--pre", d.join("run1/checkpoint").to_str().unwrap()])
        .args(["--post", d.join("grown").to_str().unwrap()])
        .args(["--out", d.join("verify.json").to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("preservation=ok"));

    // verify: the worker-thread cap changes nothing observable.
    let threaded = bin()
        .env("FLMGROW_THREADS", "3")
        .args(["verify", "--pre", d.join("run1/checkpoint").to_str().unwrap()])
        .args(["--post", d.join("grown").to_str().unwrap()])
        .output()
        .unwrap();
    assert!(threaded.status.success());
    let single = bin()
        .env("FLMGROW_THREADS", "1")
        .args(["verify", "--pre", d.join("run1/checkpoint").to_str().unwrap()])
        .args(["--post", d.join("grown").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(threaded.stdout, single.stdout);

    // verify: fault injection (bypass layer 0's FFN mask) must fail with
    // the numerical exit code.
    let tampered = d.join("tampered");
    copy_dir(&d.join("grown"), &tampered);
    let manifest_path = tampered.join("manifest.json");
    let mut manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(&manifest_path).unwrap()).unwrap();
    manifest["mask_state"]["ffn_old"][0] = serde_json::json!(256);
    fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest).unwrap()).unwrap();
    let out = bin()
        .args(["verify", "--pre", d.join("run1/checkpoint").to_str().unwrap()])
        .args(["--post", tampered.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    // verify: pre vs itself is rejected as a contract violation (no
    // mask-0 state on the post side).
    let out = bin()
        .args(["verify", "--pre", d.join("ckpt0").to_str().unwrap()])
        .args(["--post", d.join("ckpt0").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // distances
    let out = bin()
        .args(["distances", "--ckpt", d.join("grown").to_str().unwrap()])
        .args(["--out", d.join("dist.json").to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // curate
    let samples: String = (0..8)
        .map(|i| {
            format!(
                "{}\n",
                serde_json::json!({
                    "id": format!("s{i}"),
                    "prompt": format!("question {i}?"),
                    "response": format!("answer number {i} with words"),
                    "domain": if i % 2 == 0 { "maths" } else { "code" },
                })
            )
        })
        .collect();
    fs::write(d.join("samples.jsonl"), samples).unwrap();
    let out = bin()
        .args(["curate", "--samples", d.join("samples.jsonl").to_str().unwrap()])
        .args(["--ckpt", d.join("ckpt0").to_str().unwrap()])
        .args(["--out", d.join("kept.jsonl").to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let kept = fs::read_to_string(d.join("kept.jsonl")).unwrap();
    assert_eq!(kept.lines().count(), 4, "floor(8 * 0.5) records kept");
    // Rerun matches bit-for-bit.
    let report1 = fs::read(d.join("kept.report.json")).unwrap();
    let out = bin()
        .args(["curate", "--samples", d.join("samples.jsonl").to_str().unwrap()])
        .args(["--ckpt", d.join("ckpt0").to_str().unwrap()])
        .args(["--out", d.join("kept2.jsonl").to_str().unwrap()])
        .args(["--report", d.join("kept2.report.json").to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(report1, fs::read(d.join("kept2.report.json")).unwrap());

    // sft: one quick epoch; epoch checkpoint exists
    let out = bin()
        .args(["sft", "--ckpt", d.join("ckpt0").to_str().unwrap()])
        .args(["--samples", d.join("samples.jsonl").to_str().unwrap()])
        .args(["--out", d.join("sft").to_str().unwrap()])
        .args(["--epochs", "1", "--batch-samples", "4"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("sft/epoch-1/manifest.json").exists());
    assert!(d.join("sft/checkpoint/manifest.json").exists());

    // report over the training metrics + distance table
    let out = bin()
        .args(["report", "--metrics", d.join("run1/metrics.log").to_str().unwrap()])
        .args(["--distances", d.join("dist.json").to_str().unwrap()])
        .args(["--out", d.join("report.json").to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let doc: serde_json::Value =
        serde_json::from_slice(&fs::read(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(doc["series"]["step"].as_array().unwrap().len(), 5);
    assert_eq!(doc["distances"].as_array().unwrap().len(), 1);

    // report rejects an empty series with the validation exit code
    fs::write(d.join("empty.log"), "").unwrap();
    let out = bin()
        .args(["report", "--metrics", d.join("empty.log").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // report errors carry the line number of a malformed metrics line
    fs::write(d.join("mangled.log"), "step=1 tokens=2 loss=oops\n").unwrap();
    let out = bin()
        .args(["report", "--metrics", d.join("mangled.log").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(":1"));
}

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        fs::copy(entry.path(), to.join(entry.file_name())).unwrap();
    }
}
