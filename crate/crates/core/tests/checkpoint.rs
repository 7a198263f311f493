mod common;

use std::io::Cursor;

use cmfn_core::checkpoint::{MAGIC, VERSION};
use cmfn_core::error::{CmfnError, FormatError};
use cmfn_core::language::RefineOptions;
use cmfn_core::{Checkpoint, Cmfn, ModelConfig};
use cmfn_tensor::Tensor;
use common::{random_tensor, tiny_model};

fn bytes_of(ck: &Checkpoint) -> Vec<u8> {
    let mut buf = Vec::new();
    ck.write_to(&mut buf).unwrap();
    buf
}

#[test]
fn reloaded_model_gives_identical_outputs() {
    let model = tiny_model(21);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    Checkpoint::from_model(&model, None).save(&path).unwrap();
    let (loaded, optim) = Checkpoint::load(&path).unwrap().into_model().unwrap();
    assert!(optim.is_none());
    assert_eq!(loaded.config(), model.config());
    for seed in 0..5 {
        let image = random_tensor(&[8, 16, 3], seed, 0.0, 1.0);
        let a = model.predict(&image, RefineOptions::default()).unwrap();
        let b = loaded.predict(&image, RefineOptions::default()).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn serialization_is_canonical() {
    let model = tiny_model(22);
    let ck = Checkpoint::from_model(&model, None);
    let first = bytes_of(&ck);
    let again = Checkpoint::read_from(Cursor::new(&first)).unwrap();
    assert_eq!(again, ck);
    assert_eq!(bytes_of(&again), first);
    assert_eq!(&first[..4], MAGIC.as_bytes());
    assert_eq!(u32::from_le_bytes(first[4..8].try_into().unwrap()), VERSION);
}

#[test]
fn version_mismatch_is_rejected() {
    let mut buf = bytes_of(&Checkpoint::from_model(&tiny_model(1), None));
    buf[4] = 7;
    let err = Checkpoint::read_from(Cursor::new(buf)).unwrap_err();
    assert!(matches!(err, CmfnError::Format(FormatError::Version { found: 7, supported: 1 })));
}

#[test]
fn bad_magic_is_rejected() {
    let mut buf = bytes_of(&Checkpoint::from_model(&tiny_model(1), None));
    buf[..4].copy_from_slice(b"CMFD");
    let err = Checkpoint::read_from(Cursor::new(buf)).unwrap_err();
    assert!(matches!(err, CmfnError::Format(FormatError::BadMagic { .. })));
}

#[test]
fn truncation_reports_offset() {
    let buf = bytes_of(&Checkpoint::from_model(&tiny_model(1), None));
    for cut in [3, 9, 40, buf.len() / 2, buf.len() - 1] {
        match Checkpoint::read_from(Cursor::new(&buf[..cut])) {
            Err(CmfnError::Format(FormatError::Truncated { offset })) => assert_eq!(offset as usize, cut),
            other => panic!("cut at {cut}: {other:?}"),
        }
    }
}

#[test]
fn foreign_charset_is_rejected() {
    let mut buf = bytes_of(&Checkpoint::from_model(&tiny_model(1), None));
    // Charset text starts after magic, version and its length prefix.
    buf[12] = b'A';
    let err = Checkpoint::read_from(Cursor::new(buf)).unwrap_err();
    assert!(matches!(err, CmfnError::Format(FormatError::Charset { .. })));
}

#[test]
fn shape_and_name_mismatches_are_format_errors() {
    let model = tiny_model(2);
    let mut ck = Checkpoint::from_model(&model, None);
    ck.params[0].1 = Tensor::zeros([1]);
    assert!(matches!(ck.into_model(), Err(CmfnError::Format(FormatError::Invalid(_)))));

    let mut ck = Checkpoint::from_model(&model, None);
    ck.params[1].0 = "nonexistent.weight".into();
    assert!(matches!(ck.into_model(), Err(CmfnError::Format(FormatError::Invalid(_)))));

    let mut ck = Checkpoint::from_model(&model, None);
    ck.params.pop();
    assert!(matches!(ck.into_model(), Err(CmfnError::Format(FormatError::Invalid(_)))));

    // Parameters from a wider model do not fit the stored config.
    let wide = Cmfn::new(&ModelConfig {
        channels: 32,
        ..ModelConfig::tiny()
    })
    .unwrap();
    let ck = Checkpoint {
        config: model.config().clone(),
        ..Checkpoint::from_model(&wide, None)
    };
    assert!(ck.into_model().is_err());
}

#[test]
fn embedded_config_survives() {
    let cfg = ModelConfig {
        iterations: 1,
        gamma_l: 0.25,
        seed: 77,
        visual_cues: false,
        ..ModelConfig::tiny()
    };
    let model = Cmfn::new(&cfg).unwrap();
    let ck = Checkpoint::read_from(Cursor::new(bytes_of(&Checkpoint::from_model(&model, None)))).unwrap();
    assert_eq!(ck.config, cfg);
}
