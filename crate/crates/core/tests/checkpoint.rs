use multiway::checkpoint::{
    check_compatible, from_bytes, load_checkpoint, save_checkpoint, to_bytes, Checkpoint, CheckpointError, FORMAT_VERSION,
};
use multiway::config::RunConfig;
use multiway::model::{GradMap, MultiwayConfig};
use multiway::tensor::Tensor;
use multiway::training::{adamw_step, AdamW, OptimizerState};
use multiway::{Error, Model32, Model64};
use proptest::prelude::*;

fn trained_state() -> (Model32, OptimizerState<f32>) {
    let mut model = Model32::new(&MultiwayConfig::toy(), 5).unwrap();
    let mut state = OptimizerState::new(AdamW::default());
    for k in 0..2 {
        let grads: GradMap<f32> = model
            .params
            .iter()
            .map(|(n, t)| {
                let g = t.data().iter().map(|v| v * 0.5 + k as f32 * 0.01).collect();
                (n.clone(), Tensor::new(t.shape().to_vec(), g).unwrap())
            })
            .collect();
        adamw_step(&mut model.params, &grads, &mut state, 1e-3).unwrap();
    }
    (model, state)
}

fn checkpoint_err(r: multiway::Result<Checkpoint<f32>>) -> CheckpointError {
    match r {
        Err(Error::Checkpoint(e)) => e,
        other => panic!("expected a checkpoint error, got {other:?}"),
    }
}

#[test]
fn round_trip_is_bit_exact_with_optimizer_state() {
    let (model, state) = trained_state();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.mwt");
    save_checkpoint(&path, &model, Some(&state), Some("seed = 1\n")).unwrap();
    let loaded = load_checkpoint::<f32>(&path).unwrap();
    let original = Checkpoint {
        model: model.clone(),
        optimizer: Some(state.clone()),
        run_config: Some("seed = 1\n".into()),
    };
    assert!(loaded.bit_eq(&original));
    assert_eq!(loaded.optimizer.as_ref().unwrap().step, 2);
    // saving what was loaded reproduces the file byte for byte
    let again = to_bytes(&loaded.model, loaded.optimizer.as_ref(), loaded.run_config.as_deref()).unwrap();
    assert_eq!(again, std::fs::read(&path).unwrap());
    assert!(!path.with_extension("tmp").exists());
}

#[test]
fn model_without_optimizer_round_trips() {
    let model = Model64::new(&MultiwayConfig::toy(), 1).unwrap();
    let loaded: Checkpoint<f64> = from_bytes(&to_bytes(&model, None, None).unwrap()).unwrap();
    assert!(loaded.optimizer.is_none());
    assert!(loaded.model.params.bit_eq(&model.params));
    assert_eq!(loaded.model.config, model.config);
}

#[test]
fn truncation_is_reported_at_every_length() {
    let model = Model32::new(&MultiwayConfig::toy(), 1).unwrap();
    let bytes = to_bytes(&model, None, None).unwrap();
    for len in [0, 3, 4, 10, 23, 24, 100, bytes.len() / 2, bytes.len() - 1] {
        let err = checkpoint_err(from_bytes(&bytes[..len]));
        assert!(matches!(err, CheckpointError::Truncated { .. }), "len {len}: {err}");
    }
}

#[test]
fn foreign_magic_and_version_are_rejected() {
    let model = Model32::new(&MultiwayConfig::toy(), 1).unwrap();
    let bytes = to_bytes(&model, None, None).unwrap();
    let mut foreign = bytes.clone();
    foreign[..4].copy_from_slice(b"GGUF");
    assert!(matches!(checkpoint_err(from_bytes(&foreign)), CheckpointError::BadMagic));
    let mut future = bytes.clone();
    future[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    match checkpoint_err(from_bytes(&future)) {
        CheckpointError::Version { found, expected } => assert_eq!((found, expected), (FORMAT_VERSION + 1, FORMAT_VERSION)),
        e => panic!("{e}"),
    }
}

#[test]
fn flipped_payload_byte_fails_the_checksum() {
    let model = Model32::new(&MultiwayConfig::toy(), 1).unwrap();
    let bytes = to_bytes(&model, None, None).unwrap();
    let mut corrupt = bytes.clone();
    let at = bytes.len() - 100;
    corrupt[at] ^= 0x01;
    let err = checkpoint_err(from_bytes(&corrupt));
    assert!(matches!(err, CheckpointError::Checksum));
    assert!(err.to_string().contains("checksum"));
}

#[test]
fn dtype_mismatch_is_typed() {
    let model = Model64::new(&MultiwayConfig::toy(), 1).unwrap();
    let bytes = to_bytes(&model, None, None).unwrap();
    assert!(matches!(checkpoint_err(from_bytes(&bytes)), CheckpointError::DType { .. }));
}

#[test]
fn missing_file_names_the_path() {
    let err = load_checkpoint::<f32>(std::path::Path::new("/nonexistent/x.mwt")).unwrap_err();
    assert!(matches!(err, Error::MissingPath(_)));
    assert!(err.to_string().contains("/nonexistent/x.mwt"));
}

#[test]
fn incompatible_config_names_the_tensor() {
    let model = Model32::new(&MultiwayConfig::toy(), 1).unwrap();
    check_compatible(&model.config, &model.params).unwrap();
    let wider = MultiwayConfig {
        ffn_inner: 256,
        ..MultiwayConfig::toy()
    };
    match check_compatible(&wider, &model.params).unwrap_err() {
        Error::Checkpoint(CheckpointError::Incompatible { name, found, expected }) => {
            assert!(name.contains("fc1") || name.contains("fc2"), "{name}");
            assert_ne!(found, expected);
        }
        e => panic!("{e}"),
    }
}

#[test]
fn run_config_round_trips_through_toml() {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/toy.toml")).unwrap();
    let config = RunConfig::from_toml(&text).unwrap();
    let back = RunConfig::from_toml(&config.to_toml().unwrap()).unwrap();
    assert_eq!(back, config);
    let resolved = config.resolved();
    assert_eq!(RunConfig::from_toml(&resolved.to_toml().unwrap()).unwrap(), resolved);
}

#[test]
fn config_errors_are_reported() {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/toy.toml")).unwrap();
    let err = RunConfig::from_toml(&format!("{text}\nbogus_key = 1\n")).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    let err = RunConfig::from_toml("seed = \"x\"").unwrap_err();
    assert!(err.to_string().contains("line 1"), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn any_single_byte_corruption_is_a_typed_error(at in any::<prop::sample::Index>(), flip in 1u8..=255) {
        let mut model = Model32::new(&MultiwayConfig::toy(), 1).unwrap();
        model.params.insert("task.x.w", Tensor::from_vec(vec![1.0f32, 2.0]));
        let mut bytes = to_bytes(&model, None, None).unwrap();
        let i = at.index(bytes.len());
        bytes[i] ^= flip;
        prop_assert!(matches!(from_bytes::<f32>(&bytes), Err(Error::Checkpoint(_))));
    }
}
