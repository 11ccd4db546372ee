//! Checkpoint, dataset and IDX round-trip checks. Each function panics on mismatch.

use std::path::Path;

use eavae::cli::sha256_hex;
use eavae::data::{self, Dataset, GsmSpec, Mixing};
use eavae::distributions::{Likelihood, ZFamily};
use eavae::error::Error;
use eavae::models::{Activation, Model, ModelSpec, OutputActivation, Variant};
use eavae::training::{evaluate_loss, train, Checkpoint, Schedule, TrainConfig};

const FIXTURE_IMAGES: &str = "tests/fixtures/tiny-images-idx3-ubyte";
const FIXTURE_LABELS: &str = "tests/fixtures/tiny-labels-idx1-ubyte";
// printed by tests/fixtures/make_idx_fixture.py
const FIXTURE_IMAGES_SHA: &str = "30ac60f4370838eedad9704dacb8552b12371af8c582a3d37d686f035958b0c6";
const FIXTURE_LABELS_SHA: &str = "7fb941263a85687d080a3ba53d246dc51e2cd63316f98fbb8ecdbb54ef081e6c";
const FIXTURE_IMAGE_SHAS: [&str; 10] = [
    "e80957d82a28d2b383e040adab4092fcd3beb3896a39ea229193bf0624af3272",
    "2f697166c23351c163646004ceebd00027baeab9ad06255048c459c312708810",
    "768c6b5b028138c755ce3d44b9e531c4b1ebc942c555566cc2e5aa52d5290137",
    "2794a826b0a77200be4e9e28f88d061161e7a602d847ba4367865dc82fd42d7c",
    "690d6b8c6acdc70b696dec75930053ff56dfc83455c6e0d72c30bdf87a2eea16",
    "061108d21dc528b761c22bab70a317a2dd1442c850551717b258d17efed20375",
    "662e836c2542352c89a06bd92f2808ec7cdca1ba5be50df4bdf7db7c77f9ee93",
    "f5957eca3e57303f174e315f9abd65022cee8a1c962dfc43839311b040dd8bfa",
    "7829cbac05de62ecadbea1e9dbb4ed3bbb7aa76b92de234c48a6f33f373381d1",
    "ed61aed8eee01e6cdd93cc569b6000d473dd99e6a0a65ec1b5df2c3f34adb45d",
];

pub fn fixture(rel: &str) -> Vec<u8> {
    std::fs::read(Path::new(env!("CARGO_MANIFEST_DIR")).join(rel)).unwrap()
}

pub fn idx_fixture_checksums_and_contents() {
    let img = fixture(FIXTURE_IMAGES);
    let lab = fixture(FIXTURE_LABELS);
    assert_eq!(sha256_hex(&img), FIXTURE_IMAGES_SHA);
    assert_eq!(sha256_hex(&lab), FIXTURE_LABELS_SHA);

    let raw = data::parse_idx_image_bytes(Path::new(FIXTURE_IMAGES), &img).unwrap();
    assert_eq!((raw.rows, raw.cols, raw.pixels.len()), (4, 5, 200));
    for (i, sha) in FIXTURE_IMAGE_SHAS.iter().enumerate() {
        assert_eq!(sha256_hex(&raw.pixels[i * 20..(i + 1) * 20]), *sha, "image {i}");
    }
    for i in 0..10 {
        for r in 0..4 {
            for c in 0..5 {
                assert_eq!(raw.pixels[i * 20 + r * 5 + c] as usize, (31 * i + 7 * r + 3 * c) % 256);
            }
        }
    }
    let labels = data::parse_idx_label_bytes(Path::new(FIXTURE_LABELS), &lab).unwrap();
    assert_eq!(labels, (0..10).collect::<Vec<u8>>());

    assert_eq!(sha256_hex(&data::encode_idx_images(&raw)), FIXTURE_IMAGES_SHA);
    assert_eq!(sha256_hex(&data::encode_idx_labels(&labels)), FIXTURE_LABELS_SHA);

    let ds = data::idx_to_dataset(&raw, "fixture".into()).unwrap().with_labels(labels).unwrap();
    assert_eq!((ds.width, ds.height, ds.len()), (5, 4, 10));
    assert_eq!(ds.image(2)[7], (62 + 7 + 6) as f64 / 255.0);
}

pub fn idx_rejects_bad_magic_and_truncation() {
    let img = fixture(FIXTURE_IMAGES);
    let p = Path::new("x");
    let mut bad = img.clone();
    bad[3] = 0x01;
    assert!(matches!(data::parse_idx_image_bytes(p, &bad), Err(Error::BadMagic { .. })));
    assert!(matches!(data::parse_idx_image_bytes(p, &img[..img.len() - 1]), Err(Error::Truncated { .. })));
    assert!(matches!(data::parse_idx_image_bytes(p, &img[..10]), Err(Error::Truncated { .. })));
}

pub fn mnist_sized_idx_is_padded_to_32() {
    let (raw, labels) = data::synth_digits(4, 3);
    assert_eq!((raw.rows, raw.cols), (28, 28));
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
    std::fs::write(&ip, data::encode_idx_images(&raw)).unwrap();
    std::fs::write(&lp, data::encode_idx_labels(&labels)).unwrap();
    let ds = data::parse_idx(&ip).unwrap();
    assert_eq!((ds.width, ds.height), (32, 32));
    assert_eq!(data::parse_idx_labels(&lp).unwrap(), labels);
    for i in 0..4 {
        let img = ds.image(i);
        let border: f64 = (0..32).flat_map(|k| [img[k], img[31 * 32 + k], img[k * 32], img[k * 32 + 31]]).sum();
        assert_eq!(border, 0.0);
        assert_eq!(img[2 * 32 + 2 + 5 * 32 + 9], raw.pixels[i * 784 + 5 * 28 + 9] as f64 / 255.0);
    }
}

pub fn dataset_save_load_is_bitwise_stable() {
    let spec = GsmSpec {
        side: 4,
        k: 8,
        mixing: Mixing::Random,
        mixing_seed: 1,
        noise_std: 0.05,
        amplitude: 1.0,
    };
    let ds = data::synth_gsm(&spec, 50, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ds"), dir.path().join("b.ds"));
    ds.save(&a).unwrap();
    let back = Dataset::load(&a).unwrap();
    assert_eq!(back, ds);
    back.save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let (raw, labels) = data::synth_digits(10, 5);
    let digits = data::idx_to_dataset(&raw, "digits".into()).unwrap().with_labels(labels).unwrap();
    digits.save(&a).unwrap();
    assert_eq!(Dataset::load(&a).unwrap(), digits);
}

pub fn tiny_spec(variant: Variant) -> ModelSpec {
    ModelSpec {
        variant,
        input_dim: 16,
        latent_dim: 4,
        encoder_hidden: vec![8],
        decoder_hidden: vec![],
        s_encoder_hidden: if variant == Variant::EavaeGamma { vec![4] } else { vec![] },
        activation: Activation::Softplus,
        z_family: ZFamily::Laplace,
        likelihood: Likelihood::Normal { sigma_obs: 0.5 },
        output: OutputActivation::Identity,
        center_input: false,
    }
}

pub fn checkpoint_round_trip_reproduces_losses_bitwise() {
    let spec = GsmSpec {
        side: 4,
        k: 8,
        mixing: Mixing::Random,
        mixing_seed: 1,
        noise_std: 0.05,
        amplitude: 1.0,
    };
    let ds = data::synth_gsm(&spec, 200, 3).unwrap();
    let config = TrainConfig {
        beta1: Schedule::constant(1.0),
        beta2: Schedule::ramp(0.0, 2.0, 2.0, 1.0),
        lr: 1e-3,
        weight_decay: 0.0,
        epochs: 3,
        batch_size: 32,
        seed: 4,
        patience: None,
        val_fraction: 0.2,
        clip_grad_norm: Some(10.0),
    };
    let dir = tempfile::tempdir().unwrap();
    for variant in [Variant::Vae, Variant::EavaeSoftplusLaplace, Variant::EavaeLognormal, Variant::EavaeGamma] {
        let res = train(Model::new(tiny_spec(variant), 1).unwrap(), &ds.images[..160 * 16], &ds.images[160 * 16..], &config).unwrap();
        let path = dir.path().join("m.ckpt");
        res.checkpoint.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, res.checkpoint);
        assert_eq!(loaded.to_bytes().unwrap(), std::fs::read(&path).unwrap());
        let model = loaded.to_model().unwrap();
        let before = evaluate_loss(&res.model, &ds.images, (1.0, 1.0), 9).unwrap();
        let after = evaluate_loss(&model, &ds.images, (1.0, 1.0), 9).unwrap();
        assert_eq!(before.total.to_bits(), after.total.to_bits(), "{variant:?}");
        assert_eq!(model.encode_batch(&ds.images).unwrap(), res.model.encode_batch(&ds.images).unwrap());
    }
}

pub fn corrupted_checkpoints_are_rejected() {
    let model = Model::new(tiny_spec(Variant::Vae), 0).unwrap();
    let config = TrainConfig {
        beta1: Schedule::constant(1.0),
        beta2: Schedule::constant(1.0),
        lr: 1e-3,
        weight_decay: 0.0,
        epochs: 1,
        batch_size: 8,
        seed: 0,
        patience: None,
        val_fraction: 0.2,
        clip_grad_norm: None,
    };
    let bytes = Checkpoint::from_model(&model, config, 0, 1.0).to_bytes().unwrap();
    let p = Path::new("m.ckpt");
    assert!(Checkpoint::from_bytes(p, &bytes).is_ok());
    assert!(Checkpoint::from_bytes(p, &bytes[..bytes.len() - 8]).is_err());
    let mut bad = bytes.clone();
    bad[0] ^= 0xFF;
    assert!(Checkpoint::from_bytes(p, &bad).is_err());
}

pub fn non_finite_loss_is_refused_at_save() {
    let model = Model::new(tiny_spec(Variant::Vae), 0).unwrap();
    let config = TrainConfig {
        beta1: Schedule::constant(1.0),
        beta2: Schedule::constant(1.0),
        lr: 1e-3,
        weight_decay: 0.0,
        epochs: 1,
        batch_size: 8,
        seed: 0,
        patience: None,
        val_fraction: 0.2,
        clip_grad_norm: None,
    };
    assert!(Checkpoint::from_model(&model, config, 0, f64::NAN).to_bytes().is_err());
}
