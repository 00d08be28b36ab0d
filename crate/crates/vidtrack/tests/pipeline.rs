mod support;

use std::path::Path;
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidtrack::backbone::MockBackbone;
use vidtrack::config::RunConfig;
use vidtrack::core::Point2;
use vidtrack::media::{export_trajectories, read_trajectories, FrameSequence, TrajectoryRecord};
use vidtrack::occlusion::Query;
use vidtrack::pipeline::Pipeline;
use vidtrack::synthetic::{LayeredFlow, SyntheticScene};
use vidtrack::tracker::TrackerConfig;
use vidtrack::trainer::TrainConfig;

fn small_config(root: &Path) -> RunConfig {
    RunConfig {
        output: root.to_path_buf(),
        cache_dir: Some(root.join("cache")),
        seed: 3,
        working_height: 64,
        mock: true,
        mock_dim: 16,
        tracker: TrackerConfig { adapter_widths: [4, 8, 8], ..Default::default() },
        train: TrainConfig { iterations: 20, rfn_loss_start: 8, checkpoint_every: 10, max_bb_pairs: 64, flow_pairs: 64, ..Default::default() },
        ..Default::default()
    }
}

fn scene() -> (SyntheticScene, FrameSequence) {
    let scene = support::small_scene(8, 64, 4);
    let seq = scene.render().unwrap();
    (scene, seq)
}

#[test]
fn preprocessing_is_cached_per_stage() {
    let dir = tempfile::tempdir().unwrap();
    let (scene, seq) = scene();
    let backbone = MockBackbone::new(5, 16, 14);
    let flow = LayeredFlow { scene };

    let first = Pipeline::new(small_config(dir.path()));
    first.preprocess_with(&seq, &backbone, &flow).unwrap();
    let (_, cold_misses) = first.cache.stats();
    assert!(cold_misses >= 4);

    let again = Pipeline::new(small_config(dir.path()));
    again.preprocess_with(&seq, &backbone, &flow).unwrap();
    assert_eq!(again.cache.stats().1, 0);

    let mut cfg = small_config(dir.path());
    cfg.chain.gamma_of = 1.0;
    let changed = Pipeline::new(cfg);
    changed.preprocess_with(&seq, &backbone, &flow).unwrap();
    let cache = dir.path().join("cache");
    let (hits, misses) = changed.cache.stats();
    // features and masks are reused; flow supervision and buddies are redone
    assert_eq!(misses, 2, "hits {hits}, entries under {}", cache.display());
    assert!(hits >= 2);
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let (scene, seq) = scene();
    let backbone = MockBackbone::new(5, 16, 14);
    let flow = LayeredFlow { scene };
    let queries = [Query { frame: 0, point: Point2::new(18.0, 22.0) }, Query { frame: 4, point: Point2::new(41.0, 10.5) }];

    let straight = tempfile::tempdir().unwrap();
    let pipe = Pipeline::new(small_config(straight.path()));
    let pre = pipe.preprocess_with(&seq, &backbone, &flow).unwrap();
    let ckpt = pipe.train_with(&seq, &pre, false).unwrap();
    let expected = pipe.track_with(&seq, &pre, Some(&ckpt), &queries, false).unwrap();

    let split = tempfile::tempdir().unwrap();
    let pipe = Pipeline::new(small_config(split.path()));
    let ckpts = pipe.checkpoint_dir();
    std::fs::create_dir_all(&ckpts).unwrap();
    let periodic = Pipeline::new(small_config(straight.path())).checkpoint_dir().join("ckpt_000010.bin");
    std::fs::copy(periodic, ckpts.join("ckpt_000010.bin")).unwrap();
    let ckpt = pipe.train_with(&seq, &pre, true).unwrap();
    let resumed = pipe.track_with(&seq, &pre, Some(&ckpt), &queries, false).unwrap();
    assert_eq!(resumed, expected);
}

#[test]
fn trajectory_files_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let records: Vec<TrajectoryRecord> = (0..1000)
        .map(|k| TrajectoryRecord {
            query_id: (k / 25) as u32,
            query_frame: rng.gen_range(0..25),
            frame: (k % 25) as u32,
            x: rng.gen_range(-10.0..900.0),
            y: rng.gen_range(-10.0..500.0),
            visible: rng.gen(),
            similarity: rng.gen_range(-1.0..1.0),
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let (csv, bin) = export_trajectories(&records, dir.path().join("t")).unwrap();
    assert_eq!(read_trajectories(&bin).unwrap(), records);
    // the text table keeps four decimals
    let text = read_trajectories(&csv).unwrap();
    assert_eq!(text.len(), records.len());
    for (a, b) in text.iter().zip(&records) {
        assert_eq!((a.query_id, a.query_frame, a.frame, a.visible), (b.query_id, b.query_frame, b.frame, b.visible));
        assert!((a.x - b.x).abs() <= 5e-5 && (a.y - b.y).abs() <= 5e-5 && (a.similarity - b.similarity).abs() <= 5e-5);
    }
}

fn vidtrack(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_vidtrack")).args(args).output().unwrap()
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "working_hieght = 64\n").unwrap();
    let out = vidtrack(&["preprocess", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("working_hieght"));

    let missing = dir.path().join("nothing-here");
    let out = vidtrack(&["preprocess", "--video", missing.to_str().unwrap(), "--output", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let weights = dir.path().join("absent.safetensors");
    let clip = dir.path().join("clip");
    assert!(vidtrack(&["synth", "--out", clip.to_str().unwrap(), "--frames", "4"]).status.success());
    let out = vidtrack(&[
        "preprocess",
        "--video",
        clip.join("frames").to_str().unwrap(),
        "--output",
        dir.path().join("o").to_str().unwrap(),
        "--",
        "--backbone_weights",
        weights.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synthetic_clip_runs_end_to_end_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let clip = dir.path().join("clip");
    let run = dir.path().join("run");
    assert!(vidtrack(&["synth", "--out", clip.to_str().unwrap(), "--frames", "6"]).status.success());
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        format!(
            "video = {:?}\nflow_dir = {:?}\noutput = {:?}\nworking_height = 64\nmock = true\nmock_dim = 16\n\
             [tracker]\nadapter_widths = [4, 8, 8]\n[train]\niterations = 6\nrfn_loss_start = 3\ncheckpoint_every = 3\nmax_bb_pairs = 32\nflow_pairs = 32\n",
            clip.join("frames"),
            clip.join("flow"),
            run
        ),
    )
    .unwrap();
    let cfg = config.to_str().unwrap();
    let gt = clip.join("gt.json");
    for args in [
        vec!["train", "--config", cfg],
        vec!["visibility", "--config", cfg, "--gt", gt.to_str().unwrap(), "--protocol", "first-visible"],
    ] {
        let out = vidtrack(&args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let preds = run.join("trajectories_visibility.csv");
    let out = vidtrack(&["eval", "--predictions", preds.to_str().unwrap(), "--gt", gt.to_str().unwrap(), "--protocol", "first-visible"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("d_avg="));
}
