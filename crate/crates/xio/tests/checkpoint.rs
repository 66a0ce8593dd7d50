use advland_core::model::{Activation, Arch, Model};
use advland_core::RngStream;
use advland_xio::checkpoint::{
    from_bytes, load_checkpoint, save_checkpoint, to_bytes, CheckpointError, CheckpointMeta,
};

fn model(seed: u64) -> Model {
    Model::init(
        Arch::mlp(&[5, 7, 3], Activation::Relu),
        &mut RngStream::new(seed).rng(),
    )
    .unwrap()
}

fn meta() -> CheckpointMeta {
    CheckpointMeta {
        seed: 11,
        epoch: 4,
        eps: 0.25,
    }
}

#[test]
fn round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..5 {
        let m = model(seed);
        let path = dir.path().join(format!("m{seed}.ckpt"));
        save_checkpoint(&path, &m, meta()).unwrap();
        let (back, got) = load_checkpoint(&path).unwrap();
        assert_eq!(got, meta());
        assert_eq!(back.arch(), m.arch());
        let a: Vec<u64> = m.params().values().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = back.params().values().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }
}

#[test]
fn header_length_points_at_payload() {
    let m = model(1);
    let bytes = to_bytes(&m, meta());
    assert_eq!(&bytes[..8], b"ALLB0001");
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    assert_eq!(bytes.len() - 12 - hlen, 8 * m.params().len());
    let first = f64::from_le_bytes(bytes[12 + hlen..20 + hlen].try_into().unwrap());
    assert_eq!(first.to_bits(), m.params().values()[0].to_bits());
}

#[test]
fn truncated_payload_reports_byte_counts() {
    let m = model(2);
    let bytes = to_bytes(&m, meta());
    let n = 8 * m.params().len();
    match from_bytes(&bytes[..bytes.len() - 8]) {
        Err(CheckpointError::PayloadLength { expected, actual }) => {
            assert_eq!(expected, n);
            assert_eq!(actual, n - 8);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn foreign_dtype_is_rejected() {
    let bytes = to_bytes(&model(3), meta());
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header = String::from_utf8(bytes[12..12 + hlen].to_vec())
        .unwrap()
        .replace("\"f64\"", "\"f32\"");
    let mut out = b"ALLB0001".to_vec();
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&bytes[12 + hlen..]);
    assert!(matches!(from_bytes(&out), Err(CheckpointError::UnsupportedDtype(d)) if d == "f32"));
}

#[test]
fn version_and_magic_errors() {
    let mut bytes = to_bytes(&model(4), meta());
    bytes[4..8].copy_from_slice(b"0002");
    assert!(
        matches!(from_bytes(&bytes), Err(CheckpointError::VersionMismatch { found }) if found == "0002")
    );
    bytes[..4].copy_from_slice(b"XXXX");
    assert!(matches!(
        from_bytes(&bytes),
        Err(CheckpointError::BadMagic(_))
    ));
    assert!(matches!(
        from_bytes(b"ALLB"),
        Err(CheckpointError::TruncatedHeader { .. })
    ));
}
