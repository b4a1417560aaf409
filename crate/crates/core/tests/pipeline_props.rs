use proptest::prelude::*;
use voxslice::io::{decode_checkpoint, encode_checkpoint};
use voxslice::losses::LossConfig;
use voxslice::pipeline::{ablate, ablation_csv, train, Model, ModelConfig, Suite, TrainConfig};
use voxslice::synth::{generate, SceneConfig};
use voxslice::vsf::VsfMode;

fn tiny_scene() -> SceneConfig {
    SceneConfig { cam_channels: 4, lidar_channels: 4, ..SceneConfig::scaled_to(12, 12) }
}

fn tiny_model(mode: VsfMode) -> ModelConfig {
    ModelConfig { channels: 4, reduction: 2, vsf_mode: mode, ..ModelConfig::default() }
}

fn short_run(steps: usize) -> TrainConfig {
    TrainConfig { steps, n_train: 2, n_val: 1, seeds: vec![7, 8], ..TrainConfig::default() }
}

#[test]
fn training_is_bitwise_reproducible() {
    let run = || {
        let out = train(&tiny_model(VsfMode::Full), &tiny_scene(), &short_run(4), &LossConfig::default(), 11).unwrap();
        let ckpt = encode_checkpoint(&out.model.params, &out.model.metadata(&tiny_scene())).unwrap();
        let trace: Vec<u64> = out.losses.iter().map(|t| t.loss.total.to_bits()).collect();
        (ckpt, trace, out.report)
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
}

#[test]
fn ablation_table_is_reproducible() {
    let rows = ablate(Suite::Slices, &tiny_model(VsfMode::Full), &tiny_scene(), &short_run(2), &LossConfig::default())
        .unwrap();
    assert_eq!(rows.len(), 8);
    let csv = ablation_csv(&rows);
    assert!(csv.starts_with("variant,seed,miou,geo_iou,loss_final\n"));
    assert_eq!(csv.lines().count(), 9);
    let again = ablate(Suite::Slices, &tiny_model(VsfMode::Full), &tiny_scene(), &short_run(2), &LossConfig::default())
        .unwrap();
    assert_eq!(csv, ablation_csv(&again));
}

#[test]
fn checkpoint_restores_predictions() {
    let scene = tiny_scene();
    let out = train(&tiny_model(VsfMode::Full), &scene, &short_run(2), &LossConfig::default(), 3).unwrap();
    let bytes = encode_checkpoint(&out.model.params, &out.model.metadata(&scene)).unwrap();
    let (params, meta) = decode_checkpoint(&bytes).unwrap();
    let (restored, restored_scene) = Model::from_checkpoint(params, &meta).unwrap();
    assert_eq!(restored_scene, scene);
    assert_eq!(encode_checkpoint(&restored.params, &restored.metadata(&scene)).unwrap(), bytes);
    let s = generate(&scene, 99).unwrap();
    assert_eq!(
        restored.predict(&s.feat_cam, &s.feat_lidar).unwrap(),
        out.model.predict(&s.feat_cam, &s.feat_lidar).unwrap()
    );
}

#[test]
fn checkpoint_for_other_architecture_is_rejected() {
    let scene = tiny_scene();
    let m = Model::new(&tiny_model(VsfMode::LocalOnly), &scene, 1).unwrap();
    let other = Model::new(&tiny_model(VsfMode::Full), &scene, 1).unwrap();
    assert!(Model::from_checkpoint(m.params, &other.metadata(&scene)).is_err());
}

#[test]
fn training_lowers_the_loss() {
    let cfg = TrainConfig { steps: 30, n_train: 2, n_val: 1, ..TrainConfig::default() };
    let out = train(&tiny_model(VsfMode::Full), &tiny_scene(), &cfg, &LossConfig::default(), 5).unwrap();
    assert!(out.loss_final().unwrap() < out.loss_initial().unwrap());
}

fn modes() -> impl Strategy<Value = VsfMode> {
    prop::sample::select(VsfMode::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn predictions_are_distributions(mode in modes(), seed in any::<u64>()) {
        let scene = tiny_scene();
        let m = Model::new(&tiny_model(mode), &scene, seed).unwrap();
        let s = generate(&scene, seed ^ 1).unwrap();
        let p = m.predict(&s.feat_cam, &s.feat_lidar).unwrap();
        let [_, k, x, y, z] = p.dims();
        let vol = x * y * z;
        for v in 0..vol {
            let col: Vec<f64> = (0..k).map(|c| p.data()[c * vol + v]).collect();
            prop_assert!(col.iter().all(|&q| q >= 0.0));
            prop_assert!((col.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }
}
