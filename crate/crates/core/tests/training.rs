use std::ops::ControlFlow;

use deep_fext::error::Error;
use deep_fext::fext::{Activation, FextLayerSpec, FextNetworkSpec, ScaleSpec};
use deep_fext::head::MeshHeadSpec;
use deep_fext::imaging::checkpoint::{decode_checkpoint, encode_checkpoint};
use deep_fext::imaging::LabeledImage;
use deep_fext::map::BinaryMap;
use deep_fext::model::{Model, ModelSpec, Normalization, Task};
use deep_fext::synth::vessel_phantom;
use deep_fext::tensor::Tensor;
use deep_fext::train::{task_labels, OptimizerKind, TrainConfig, Trainer, TrainingSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 3 passthrough + 6 + 7 features on a 4×4 mesh: fast enough for many steps.
fn small_model(task: Task, seed: u64) -> Model {
    let fext = FextNetworkSpec {
        layers: vec![FextLayerSpec { in_channels: 3, branches: vec![ScaleSpec::new(3, 6), ScaleSpec::new(5, 7)] }],
        include_input_passthrough: true,
        activation: Activation::Relu,
        refactor_scale3: false,
        refactor_chains: false,
    };
    let head = MeshHeadSpec { mesh_h: 4, mesh_w: 4, ..MeshHeadSpec::standard(task.num_classes()) };
    Model::new(ModelSpec { task, fext, head }, seed).unwrap()
}

fn small_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        learning_rate: 3e-3,
        patch_size: 32,
        patches_per_step: 2,
        batch_pixels: 256,
        max_steps: Some(8),
        checkpoint_every: 4,
        ..Default::default()
    }
}

fn phantoms(seeds: std::ops::Range<u64>) -> Vec<LabeledImage> {
    seeds.map(|s| vessel_phantom(64, 3, 2, s).unwrap()).collect()
}

/// 100×100, every tenth row is foreground: 10% positive pixels spread evenly.
fn striped(fov: Option<BinaryMap>) -> LabeledImage {
    let n = 100;
    let mask = BinaryMap::from_vec(n, n, (0..n * n).map(|i| (i / n) % 10 == 0).collect()).unwrap();
    let mut image = vec![0.0f32; 3 * n * n];
    for (i, &m) in mask.data().iter().enumerate() {
        image[n * n + i] = if m { 0.2 } else { 0.8 };
        // Channel 0 marks pixels outside the field of view.
        image[i] = if fov.as_ref().is_some_and(|f| !f.data()[i]) { 1.0 } else { 0.0 };
    }
    LabeledImage::new("striped", Tensor::new(&[1, 3, n, n], image).unwrap(), mask, None, fov).unwrap()
}

#[test]
fn balanced_weights_equalize_class_contributions() {
    let item = striped(None);
    let data = TrainingSet::new(std::slice::from_ref(&item), Task::Vessel, &Normalization::identity(3), None).unwrap();
    let w = data.class_weights();
    assert!((w[0] - 100.0 / 180.0).abs() < 1e-6 && (w[1] - 100.0 / 20.0).abs() < 1e-6);
    let cfg = TrainConfig { patch_size: 32, patches_per_step: 1, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut mass = [0.0f64; 2];
    for _ in 0..1000 {
        let batch = data.sample_patches(&cfg, &mut rng).unwrap();
        for (l, wt) in batch.labels.iter().zip(&batch.weights) {
            mass[*l] += *wt as f64;
        }
    }
    let ratio = mass[1] / mass[0];
    assert!((0.9..=1.1).contains(&ratio), "ratio {ratio}");
}

#[test]
fn pixels_outside_the_fov_carry_no_weight() {
    let n = 100;
    let fov = BinaryMap::from_vec(n, n, (0..n * n).map(|i| (i % n) < 60).collect()).unwrap();
    let item = striped(Some(fov));
    let data = TrainingSet::new(std::slice::from_ref(&item), Task::Vessel, &Normalization::identity(3), None).unwrap();
    let cfg = TrainConfig { patch_size: 40, patches_per_step: 8, border: 0, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut outside, mut inside) = (0, 0);
    for _ in 0..20 {
        let batch = data.sample_patches(&cfg, &mut rng).unwrap();
        let pp = 40 * 40;
        for (i, &w) in batch.weights.iter().enumerate() {
            let flag = batch.images.values()[(i / pp) * 3 * pp + i % pp];
            if flag == 1.0 {
                outside += 1;
                assert_eq!(w, 0.0);
            } else {
                inside += 1;
                assert!(w > 0.0);
            }
        }
    }
    assert!(outside > 0 && inside > 0);
}

#[test]
fn border_band_only_on_interior_edges() {
    let item = striped(None);
    let data = TrainingSet::new(std::slice::from_ref(&item), Task::Vessel, &Normalization::identity(3), None).unwrap();
    // A patch as large as the image never cuts through it.
    let whole = TrainConfig { patch_size: 100, patches_per_step: 1, ..Default::default() };
    let batch = data.sample_patches(&whole, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(batch.weights.iter().all(|&w| w > 0.0));
    let cfg = TrainConfig { patch_size: 50, patches_per_step: 1, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let batch = data.sample_patches(&cfg, &mut rng).unwrap();
        let zeroed = batch.weights.iter().filter(|&&w| w == 0.0).count();
        assert!(zeroed >= 11 * 50, "a 50px patch of a 100px image always cuts at least one edge");
    }
}

#[test]
fn sampling_is_seeded() {
    let item = striped(None);
    let data = TrainingSet::new(std::slice::from_ref(&item), Task::Vessel, &Normalization::identity(3), None).unwrap();
    let cfg = TrainConfig { patch_size: 32, patches_per_step: 3, ..Default::default() };
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..5).map(|_| data.sample_patches(&cfg, &mut rng).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(draw(4), draw(4));
    assert_ne!(draw(4), draw(5));
    let too_big = TrainConfig { patch_size: 101, ..cfg };
    assert!(matches!(data.sample_patches(&too_big, &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::Config(_))));
}

#[test]
fn joint_labels_give_centerline_precedence() {
    let item = vessel_phantom(48, 2, 1, 3).unwrap();
    let labels = task_labels(&item, Task::Both);
    let centre = item.centerline();
    for (i, &l) in labels.iter().enumerate() {
        let expected = if centre.data()[i] {
            2
        } else if item.vessel_mask.data()[i] {
            1
        } else {
            0
        };
        assert_eq!(l, expected);
    }
    assert!(labels.contains(&1) && labels.contains(&2));
}

#[test]
fn zero_learning_rate_leaves_parameters_bit_identical() {
    for optimizer in [OptimizerKind::Adam, OptimizerKind::SgdMomentum] {
        let images = phantoms(0..2);
        let cfg = TrainConfig { learning_rate: 0.0, optimizer, ..small_cfg(1) };
        let mut trainer = Trainer::new(small_model(Task::Vessel, 2), &images, cfg).unwrap();
        let before = trainer.model().params().flat_values();
        for _ in 0..5 {
            trainer.step().unwrap();
        }
        assert_eq!(trainer.model().params().flat_values(), before);
    }
}

#[test]
fn same_seed_gives_identical_checkpoint_bytes() {
    let images = phantoms(0..2);
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let mut trainer = Trainer::new(small_model(Task::Both, 3), &images, small_cfg(7)).unwrap();
        trainer.run(Some(dir.path()), |_, _| ControlFlow::Continue(())).unwrap();
        let files: Vec<String> = {
            let mut v: Vec<String> = std::fs::read_dir(dir.path())
                .unwrap()
                .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
                .collect();
            v.sort();
            v
        };
        assert_eq!(files, ["checkpoint_000004.dfxt", "checkpoint_000008.dfxt", "final.dfxt", "train.log"]);
        let log = std::fs::read_to_string(dir.path().join("train.log")).unwrap();
        assert_eq!(log.lines().count(), 8);
        assert!(log.lines().all(|l| l.split(' ').count() == 4));
        let losses: Vec<String> = log.lines().map(|l| l.split(' ').take(3).collect::<Vec<_>>().join(" ")).collect();
        (std::fs::read(dir.path().join("final.dfxt")).unwrap(), losses)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a, b);
    assert_eq!(la, lb);
    let decoded = decode_checkpoint(&a).unwrap();
    assert_eq!(decoded.tag.as_deref(), Some("final"));
    assert_eq!(decoded.state.unwrap().step, 8);
}

#[test]
fn resuming_from_a_checkpoint_continues_bit_exactly() {
    let images = phantoms(0..2);
    let cfg = small_cfg(11);
    let mut continuous = Trainer::new(small_model(Task::Vessel, 5), &images, cfg.clone()).unwrap();
    let mut reference = Vec::new();
    for _ in 0..6 {
        reference.push(continuous.step().unwrap());
    }

    let mut first = Trainer::new(small_model(Task::Vessel, 5), &images, cfg.clone()).unwrap();
    let mut resumed_losses: Vec<f64> = (0..3).map(|_| first.step().unwrap()).collect();
    let bytes = encode_checkpoint(&first.checkpoint(None)).unwrap();
    drop(first);
    let ckpt = decode_checkpoint(&bytes).unwrap();
    let mut second = Trainer::resume(ckpt.model, &images, cfg, ckpt.state.unwrap()).unwrap();
    resumed_losses.extend((0..3).map(|_| second.step().unwrap()));

    assert_eq!(resumed_losses, reference);
    assert_eq!(second.model().params().flat_values(), continuous.model().params().flat_values());
    assert_eq!(
        encode_checkpoint(&second.checkpoint(None)).unwrap(),
        encode_checkpoint(&continuous.checkpoint(None)).unwrap()
    );
}

#[test]
fn held_out_loss_decreases_from_initialization() {
    let train = phantoms(0..2);
    let held_out = phantoms(100..101);
    let cfg = TrainConfig { max_steps: Some(150), ..small_cfg(3) };
    let mut trainer = Trainer::new(small_model(Task::Vessel, 1), &train, cfg.clone()).unwrap();
    let probe = TrainingSet::new(
        &held_out,
        Task::Vessel,
        trainer.model().normalization(),
        Some(trainer.data().class_weights().to_vec()),
    )
    .unwrap();
    let batch_cfg = TrainConfig { patches_per_step: 8, ..cfg };
    let batch = probe.sample_patches(&batch_cfg, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
    let before = trainer.batch_loss(&batch).unwrap();
    trainer.run(None, |_, _| ControlFlow::Continue(())).unwrap();
    let after = trainer.batch_loss(&batch).unwrap();
    assert!(after < 0.8 * before, "held-out loss {before} -> {after}");
}

#[test]
fn non_finite_loss_aborts_with_step_and_rate() {
    let mut images = phantoms(0..1);
    images[0].image.values_mut().fill(f32::NAN);
    let mut trainer = Trainer::new(small_model(Task::Vessel, 0), &images, small_cfg(0)).unwrap();
    match trainer.step() {
        Err(e @ Error::TrainingAborted { step: 1, .. }) => {
            let msg = e.to_string();
            assert!(msg.contains("step 1") && msg.contains("0.003"), "{msg}");
        }
        other => panic!("expected an abort, got {other:?}"),
    }
}

#[test]
fn config_file_is_strict_toml() {
    let cfg = TrainConfig::from_toml("seed = 3\noptimizer = \"sgd_momentum\"\nlearning_rate = 0.01\n").unwrap();
    assert_eq!((cfg.seed, cfg.optimizer, cfg.patch_size), (3, OptimizerKind::SgdMomentum, 64));
    assert!(matches!(TrainConfig::from_toml("sede = 3\n"), Err(Error::Config(_))));
    assert!(matches!(TrainConfig::from_toml("patch_size = 16\n"), Err(Error::Config(_))));
    assert!(matches!(TrainConfig::from_toml("learning_rate = -1.0\n"), Err(Error::Config(_))));
}
