mod common;

use common::rng;
use proptest::prelude::*;
use tab_core::backbone::{images_to_tensor, load_checkpoint, save_checkpoint, Backbone, BackboneConfig, BackboneError, Checkpoint, CheckpointMeta};
use tab_core::imaging::Image;
use tab_core::tensor::Tensor;

/// Independent count: stem conv+norm, two convs+norms per block, a 1x1
/// projection shortcut whenever the shape changes, then the linear head.
fn count_by_formula(cfg: &BackboneConfig) -> usize {
    let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + 2 * cout;
    let c0 = cfg.stage_channels[0];
    let mut total = conv(3, c0, 3);
    let mut cin = c0;
    for (s, &c) in cfg.stage_channels.iter().enumerate() {
        for b in 0..cfg.blocks_per_stage {
            total += conv(cin, c, 3) + conv(c, c, 3);
            if (s > 0 && b == 0) || cin != c {
                total += conv(cin, c, 1);
            }
            cin = c;
        }
    }
    total + cin * cfg.embed_dim + cfg.embed_dim
}

fn tiny() -> BackboneConfig {
    BackboneConfig {
        input_size: 16,
        stage_channels: vec![4, 6],
        blocks_per_stage: 1,
        embed_dim: 5,
    }
}

fn random_images(n: usize, size: usize, seed: u64) -> Tensor<f32> {
    use rand::Rng;
    let mut r = rng(seed);
    Tensor::new(vec![n, 3, size, size], (0..n * 3 * size * size).map(|_| r.random_range(-1.0f32..1.0)).collect()).unwrap()
}

#[test]
fn default_parameter_count() {
    let cfg = BackboneConfig::default();
    assert_eq!(cfg.param_count(), 182_928);
    assert_eq!(cfg.param_count(), count_by_formula(&cfg));
    let b: Backbone = Backbone::init(cfg.clone(), &mut rng(0)).unwrap();
    assert_eq!(b.params().iter().map(|t| t.numel()).sum::<usize>(), 182_928);
    assert_eq!(b.param("head.weight").unwrap().shape(), [64, 128]);
    assert_eq!(b.param("stage2.block1.shortcut.conv.weight").unwrap().shape(), [32, 16, 1, 1]);
    assert!(b.param("stage1.block1.shortcut.conv.weight").is_none());
}

#[test]
fn global_embeddings_are_unit_rows() {
    let b: Backbone = Backbone::init(BackboneConfig::default(), &mut rng(3)).unwrap();
    let x = random_images(3, 64, 1);
    let e = b.encode_global(&x).unwrap();
    assert_eq!(e.shape(), [3, 128]);
    for row in e.data().chunks(128) {
        let n: f64 = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-5);
    }
    assert_eq!(e, b.encode_global(&x).unwrap());
}

#[test]
fn stage_maps_halve_per_stage() {
    let b: Backbone = Backbone::init(BackboneConfig::default(), &mut rng(3)).unwrap();
    let maps = b.feature_maps(&random_images(2, 64, 2), &[1, 2, 3]).unwrap();
    assert_eq!(maps[0].shape(), [2, 16, 32, 32]);
    assert_eq!(maps[1].shape(), [2, 32, 16, 16]);
    assert_eq!(maps[2].shape(), [2, 64, 8, 8]);
    assert!(matches!(b.feature_maps(&random_images(1, 64, 2), &[4]), Err(BackboneError::Config(_))));
    assert!(matches!(b.feature_maps(&random_images(1, 64, 2), &[0]), Err(BackboneError::Config(_))));
    assert!(b.encode_global(&random_images(1, 32, 2)).is_err());
}

#[test]
fn embeddings_do_not_depend_on_batch_mates() {
    let b: Backbone = Backbone::init(BackboneConfig::default(), &mut rng(5)).unwrap();
    let x = random_images(4, 64, 9);
    let all = b.encode_global(&x).unwrap();
    let one = Tensor::new(vec![1, 3, 64, 64], x.data()[2 * 3 * 64 * 64..3 * 3 * 64 * 64].to_vec()).unwrap();
    let alone = b.encode_global(&one).unwrap();
    for (a, s) in alone.data().iter().zip(&all.data()[2 * 128..3 * 128]) {
        assert!((a - s).abs() < 1e-5);
    }
}

#[test]
fn same_seed_same_weights() {
    let a: Backbone = Backbone::init(tiny(), &mut rng(11)).unwrap();
    let b: Backbone = Backbone::init(tiny(), &mut rng(11)).unwrap();
    let c: Backbone = Backbone::init(tiny(), &mut rng(12)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn invalid_configs() {
    for cfg in [
        BackboneConfig {
            stage_channels: vec![],
            ..tiny()
        },
        BackboneConfig { embed_dim: 0, ..tiny() },
        BackboneConfig { input_size: 10, ..tiny() },
    ] {
        assert!(Backbone::<f32>::init(cfg, &mut rng(0)).is_err());
    }
}

#[test]
fn pixels_map_to_unit_interval() {
    let img = Image::filled(2, 2, [0, 255, 51]);
    let t = images_to_tensor::<f32>(&[&img]).unwrap();
    assert_eq!(t.shape(), [1, 3, 2, 2]);
    assert_eq!(&t.data()[0..4], &[-1.0; 4]);
    assert_eq!(&t.data()[4..8], &[1.0; 4]);
    assert!((t.data()[8] + 0.6).abs() < 1e-6);
    assert!(images_to_tensor::<f32>(&[&img, &Image::filled(3, 2, [0, 0, 0])]).is_err());
}

fn sample_checkpoint(seed: u64) -> Checkpoint {
    Checkpoint {
        backbone: Backbone::init(tiny(), &mut rng(seed)).unwrap(),
        meta: CheckpointMeta {
            seed: Some(seed),
            steps: 12,
            epochs: 3,
            loss_curve: vec![1.0986122886681098, 0.1 + 0.2, 1e-300],
            mode: Some("two_sided".into()),
            tau: Some(0.07),
            classes: vec!["a".into(), "b_c".into()],
            ..Default::default()
        },
    }
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.tabckpt");
    let ck = sample_checkpoint(1);
    save_checkpoint(&ck, &p).unwrap();
    let back = load_checkpoint(&p).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes(), std::fs::read(&p).unwrap());
    assert_eq!(&std::fs::read(&p).unwrap()[..8], b"TABCKPT1");
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let bytes = sample_checkpoint(2).to_bytes();
    let mut bad = bytes.clone();
    bad[1] = b'x';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(BackboneError::Format { offset: 0, .. })));
    for cut in [5, 20, bytes.len() - 3] {
        assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
    }
    // a checkpoint for another architecture does not load as this one
    let other = Checkpoint {
        backbone: Backbone::init(BackboneConfig { embed_dim: 7, ..tiny() }, &mut rng(0)).unwrap(),
        meta: CheckpointMeta::default(),
    };
    let named: Vec<_> = other.backbone.named().map(|(n, t)| (n.to_string(), t.clone())).collect();
    assert!(Backbone::from_named(tiny(), named).is_err());
    let mut nan = bytes.clone();
    let n = nan.len();
    nan[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
    assert!(matches!(Checkpoint::from_bytes(&nan), Err(BackboneError::Format { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn parameter_count_matches_formula(
        chans in prop::collection::vec(1usize..20, 1..4),
        blocks in 1usize..3,
        c in 1usize..200,
    ) {
        let cfg = BackboneConfig { input_size: 64, stage_channels: chans, blocks_per_stage: blocks, embed_dim: c };
        prop_assert_eq!(cfg.param_count(), count_by_formula(&cfg));
    }
}
