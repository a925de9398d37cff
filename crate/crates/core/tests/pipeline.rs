use std::path::Path;

use conpres::dataset::{build_dataset, DatasetIndex, PhantomConfig, Split};
use conpres::io;
use conpres::metrics::{evaluate_dirs, FeatureSource, SsimInputs};
use conpres::phantom::{self, SceneParams};
use conpres::seed;
use conpres::trainer::{self, checkpoint_path, train, TrainOptions, TrainState};
use conpres::{DomainLabel, Preset, TrainConfig};

const SIZE: (usize, usize) = (32, 44);

fn tiny_config(preset: Preset, steps: u64) -> TrainConfig {
    TrainConfig {
        preset,
        gen_width: 2,
        disc_width: 2,
        proj_hidden: 8,
        embed_dim: 8,
        patches_per_layer: 16,
        steps,
        checkpoint_every: 2,
        preview_every: 0,
        ..TrainConfig::default()
    }
}

fn dataset(root: &Path) -> DatasetIndex {
    build_dataset(&root.join("data"), 20, 11, SIZE, &PhantomConfig::default()).unwrap()
}

#[test]
fn dataset_is_paired_and_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ia = dataset(a.path());
    let ib = dataset(b.path());
    assert_eq!(ia.content_hash().unwrap(), ib.content_hash().unwrap());

    let cfg = PhantomConfig::default();
    let params =
        SceneParams { fan: cfg.sim_fan.clone(), num_tissue_classes: cfg.num_tissue_classes, ..Default::default() };
    for split in Split::ALL {
        let sim = ia.paths(split, DomainLabel::Sim);
        let seg = ia.paths(split, DomainLabel::Seg);
        assert_eq!(sim.len(), seg.len());
        for (s, g) in sim.iter().zip(&seg) {
            assert_eq!(s.file_name(), g.file_name());
        }
        let data = ia.load_split(split).unwrap();
        for ((img, map), path) in data.sim.iter().zip(&data.seg).zip(&sim) {
            assert_eq!((img.height(), img.width()), SIZE);
            let i: u64 = path.file_stem().unwrap().to_str().unwrap()["scene_".len()..].parse().unwrap();
            let scene = phantom::generate_scene_with(seed::derive(11, 2 * i), SIZE, &params).unwrap();
            assert_eq!(&phantom::render_seg(&scene), map);
            for ((inside, v), l) in scene.fan_mask().iter().zip(img.data()).zip(map.labels()) {
                if !inside {
                    assert_eq!((*v, *l), (-1.0, 0));
                }
            }
            assert!(map.foreground_count() > 0);
        }
    }
}

#[test]
fn train_translate_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let index = dataset(dir.path());
    let run = dir.path().join("run");
    let state = train(&run, &index.root, &tiny_config(Preset::ConPres, 4), &TrainOptions::default()).unwrap();
    assert_eq!(state.step, 4);
    for step in [0, 2, 4] {
        assert!(checkpoint_path(&run, step).exists(), "missing checkpoint {step}");
    }
    let log = std::fs::read_to_string(run.join("log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["losses"]["total_g"].as_f64().unwrap().is_finite());
    }

    let loaded = TrainState::load(&checkpoint_path(&run, 4)).unwrap();
    let test = index.load_split(Split::Test).unwrap();
    let out = trainer::translate_images(&loaded.gen, &test.sim, DomainLabel::Real).unwrap();
    assert_eq!(out.len(), test.sim.len());
    let out_dir = dir.path().join("translated");
    for (img, name) in out.iter().zip(&index.test.sim) {
        assert!(img.data().iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)));
        io::write_image(&out_dir.join(name), img).unwrap();
    }

    let ssim = SsimInputs {
        reference: index.dir(Split::Test, DomainLabel::Sim),
        masks: index.dir(Split::Test, DomainLabel::Seg),
    };
    let features = FeatureSource::RandomConv { seed: 3 };
    let report = evaluate_dirs(&out_dir, &index.dir(Split::Test, DomainLabel::Real), Some(&ssim), &features).unwrap();
    assert_eq!(report.n_a, test.sim.len());
    assert!(report.fid.is_finite() && report.kid.is_finite());
    let s = report.ssim_mean.unwrap();
    assert!((-100.0..=100.0).contains(&s));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let index = dataset(dir.path());
    let cfg = tiny_config(Preset::ConPres, 4);

    let full = dir.path().join("full");
    train(&full, &index.root, &cfg, &TrainOptions::default()).unwrap();

    let part = dir.path().join("part");
    train(&part, &index.root, &TrainConfig { steps: 2, ..cfg.clone() }, &TrainOptions::default()).unwrap();
    let resume = TrainOptions { resume: Some(checkpoint_path(&part, 2)), ..TrainOptions::default() };
    train(&part, &index.root, &cfg, &resume).unwrap();

    let read = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(read(&full.join("log.jsonl")), read(&part.join("log.jsonl")));
    assert_eq!(read(&checkpoint_path(&full, 4)), read(&checkpoint_path(&part, 4)));
}

#[test]
fn checkpoint_from_another_image_size_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let index = dataset(dir.path());
    let run = dir.path().join("run");
    train(&run, &index.root, &tiny_config(Preset::Cut, 0), &TrainOptions::default()).unwrap();

    let other = dir.path().join("other");
    build_dataset(&other, 10, 1, (32, 32), &PhantomConfig::default()).unwrap();
    let resume = TrainOptions { resume: Some(checkpoint_path(&run, 0)), ..TrainOptions::default() };
    assert!(train(&dir.path().join("run2"), &other, &tiny_config(Preset::Cut, 1), &resume).is_err());
}
