use depthgrow_core::checkpoint::{Checkpoint, EntryKind, Manifest, MAGIC};
use depthgrow_core::data::{TokenizerMode, Vocab};
use depthgrow_core::training::{Adam, AdamConfig};
use depthgrow_core::{DepthGrowModel, Error, GrowOptions, ModelConfig, Precision};
use proptest::prelude::*;
use sha2::{Digest, Sha256};

fn config(d: usize, heads: usize, n: usize, v: usize) -> ModelConfig {
    ModelConfig {
        d_model: d,
        d_ff: 2 * d,
        n_heads: heads,
        n_bottom_blocks: n,
        n_top_blocks: 1,
        vocab_size: v,
        dropout: 0.1,
        max_len: 16,
        precision: Precision::F32,
    }
}

fn with_moments(model: &DepthGrowModel<f32>, step: u64, fill: f32) -> Adam<f32> {
    let mut adam = Adam::new(
        model.store(),
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        },
    );
    let mut state = adam.state().clone();
    for (i, m) in state.values_mut().enumerate() {
        m.m.iter_mut().for_each(|x| *x = fill * i as f32);
        m.v.iter_mut().for_each(|x| *x = fill * fill);
    }
    adam = Adam::restore(adam.config(), step, state);
    adam
}

fn rebuild(manifest: &Manifest, payload: &[u8]) -> Vec<u8> {
    let json = serde_json::to_vec_pretty(manifest).unwrap();
    let mut out = MAGIC.to_vec();
    out.push(1);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn save_load_save_is_byte_identical(
        d in prop::sample::select(vec![4usize, 8]),
        n in 1usize..3,
        v in 6usize..12,
        grown in any::<bool>(),
        adam in any::<bool>(),
        vocab in any::<bool>(),
        step in 0u64..1000,
        seed in any::<u64>(),
    ) {
        let mut model = DepthGrowModel::<f32>::new_shallow(&config(d, 2, n, v), seed).unwrap();
        if grown {
            model = model.grow(1, seed ^ 1, GrowOptions::default()).unwrap();
        }
        model.step = step;
        let mut ck = Checkpoint::new(model.clone());
        if adam {
            ck = ck.with_adam(with_moments(&model, step, 0.25));
        }
        if vocab {
            let names: Vec<String> = (0..v - 4).map(|i| format!("tok{i}")).collect();
            ck = ck.with_vocab(Vocab::new(&names).unwrap(), TokenizerMode::Char);
        }
        let first = ck.to_bytes();
        let loaded = Checkpoint::<f32>::from_bytes(&first).unwrap();
        prop_assert_eq!(&loaded.to_bytes(), &first);
        prop_assert_eq!(loaded.model.step, step);
        prop_assert_eq!(loaded.model.is_grown(), grown);
        prop_assert_eq!(loaded.adam.is_some(), adam);
        prop_assert_eq!(loaded.vocab.is_some(), vocab);
    }
}

#[test]
fn manifest_offsets_are_ordered_and_hashes_match() {
    let model = DepthGrowModel::<f32>::new_shallow(&config(8, 2, 1, 10), 3)
        .unwrap()
        .grow(1, 4, GrowOptions::default())
        .unwrap();
    let ck = Checkpoint::new(model.clone()).with_adam(with_moments(&model, 7, 0.5));
    let bytes = ck.to_bytes();
    let (manifest, payload) = Checkpoint::<f32>::read_manifest(&bytes).unwrap();
    let mut next = 0;
    for e in &manifest.entries {
        assert_eq!(e.offset, next);
        assert_eq!(e.dtype, "f32");
        let slice = &payload[e.offset as usize..(e.offset + e.length) as usize];
        assert_eq!(hex::encode(Sha256::digest(slice)), e.sha256);
        next += e.length;
    }
    assert_eq!(next as usize, payload.len());
    assert_eq!(manifest.stage, 2);
    // moments only for the trainable top module
    let moment_names: Vec<&str> = manifest
        .entries
        .iter()
        .filter(|e| e.kind == EntryKind::AdamM)
        .map(|e| e.name.as_str())
        .collect();
    assert_eq!(moment_names.len(), model.top_parameter_names().len());
    assert!(moment_names.iter().all(|n| n.starts_with("top.")));
    assert!(manifest
        .entries
        .iter()
        .filter(|e| e.kind == EntryKind::Param && e.name.starts_with("bottom."))
        .all(|e| !e.trainable));
}

#[test]
fn f64_models_are_stored_as_f32() {
    let cfg = ModelConfig {
        precision: Precision::F64,
        ..config(8, 2, 1, 10)
    };
    let model = DepthGrowModel::<f64>::new_shallow(&cfg, 3).unwrap();
    let bytes = Checkpoint::new(model.clone()).to_bytes();
    let (manifest, payload) = Checkpoint::<f64>::read_manifest(&bytes).unwrap();
    assert!(manifest.entries.iter().all(|e| e.dtype == "f32"));
    assert_eq!(payload.len(), 4 * model.store().numel());
    let back = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
    for ((_, a), (_, b)) in model.store().iter().zip(back.model.store().iter()) {
        for (x, y) in a.tensor.data().iter().zip(b.tensor.data()) {
            assert_eq!(*y, *x as f32 as f64);
        }
    }
}

#[test]
fn missing_and_extra_tensors_are_checkpoint_errors() {
    let model = DepthGrowModel::<f32>::new_shallow(&config(8, 2, 1, 10), 3).unwrap();
    let bytes = Checkpoint::new(model).to_bytes();
    let (manifest, payload) = Checkpoint::<f32>::read_manifest(&bytes).unwrap();

    // claim a grown model: the top module's tensors are missing
    let mut grown = manifest.clone();
    grown.stage = 2;
    let err = Checkpoint::<f32>::from_bytes(&rebuild(&grown, payload)).unwrap_err();
    assert!(
        matches!(err, Error::Checkpoint(ref m) if m.contains("missing")),
        "{err}"
    );

    // an unknown name
    let mut renamed = manifest.clone();
    renamed.entries[0].name = "bogus".into();
    assert!(matches!(
        Checkpoint::<f32>::from_bytes(&rebuild(&renamed, payload)),
        Err(Error::Checkpoint(_))
    ));

    // a shape the config does not produce
    let mut wider = manifest.clone();
    wider.model.d_model = 4;
    wider.model.d_ff = 8;
    assert!(Checkpoint::<f32>::from_bytes(&rebuild(&wider, payload)).is_err());

    // truncated payload
    assert!(matches!(
        Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 4]),
        Err(Error::Checkpoint(_))
    ));
}

#[test]
fn file_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = DepthGrowModel::<f32>::new_shallow(&config(8, 2, 1, 10), 3).unwrap();
    let ck = Checkpoint::new(model);
    ck.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), ck.to_bytes());
    assert_eq!(
        Checkpoint::<f32>::load(&path).unwrap().to_bytes(),
        ck.to_bytes()
    );
}
