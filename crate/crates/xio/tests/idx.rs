use advland_xio::idx::{
    dataset_from_bytes, encode_images, encode_labels, parse_idx, parse_images, parse_labels,
    IdxError, IdxImages, IMAGES_MAGIC, LABELS_MAGIC,
};
use std::io::Write;

fn fixture() -> (IdxImages, Vec<u8>) {
    let imgs = IdxImages {
        count: 3,
        rows: 2,
        cols: 3,
        pixels: (0..18).map(|i| (i * 15) as u8).collect(),
    };
    (imgs, vec![7, 0, 9])
}

#[test]
fn single_zero_image() {
    let imgs = IdxImages {
        count: 1,
        rows: 2,
        cols: 2,
        pixels: vec![0; 4],
    };
    let d = dataset_from_bytes(&encode_images(&imgs), &encode_labels(&[7])).unwrap();
    assert_eq!(d.len(), 1);
    assert_eq!(d.dim(), 4);
    assert!(d.inputs().iter().all(|v| *v == 0.0));
    assert_eq!(d.labels(), &[7]);
}

#[test]
fn full_intensity_is_exactly_one() {
    let imgs = IdxImages {
        count: 1,
        rows: 1,
        cols: 2,
        pixels: vec![255, 51],
    };
    let d = dataset_from_bytes(&encode_images(&imgs), &encode_labels(&[1])).unwrap();
    assert_eq!(d.inputs()[[0, 0]], 1.0);
    assert_eq!(d.inputs()[[0, 1]], 0.2);
}

#[test]
fn swapped_magic_is_rejected_at_offset_zero() {
    let (imgs, labels) = fixture();
    let mut lb = encode_labels(&labels);
    lb[..4].copy_from_slice(&IMAGES_MAGIC.to_be_bytes());
    let err = parse_labels(&lb).unwrap_err();
    assert_eq!(
        err,
        IdxError::WrongMagic {
            expected: LABELS_MAGIC,
            found: IMAGES_MAGIC
        }
    );
    assert!(err.to_string().contains("wrong magic at offset 0"));
    let mut ib = encode_images(&imgs);
    ib[..4].copy_from_slice(&LABELS_MAGIC.to_be_bytes());
    assert!(matches!(
        parse_images(&ib),
        Err(IdxError::WrongMagic { .. })
    ));
}

#[test]
fn truncation_and_trailing_bytes_name_offsets() {
    let (imgs, _) = fixture();
    let bytes = encode_images(&imgs);
    assert_eq!(
        parse_images(&bytes[..bytes.len() - 1]).unwrap_err(),
        IdxError::Truncated {
            offset: 16,
            needed: 18,
            available: 17
        }
    );
    assert_eq!(
        parse_images(&bytes[..10]).unwrap_err(),
        IdxError::Truncated {
            offset: 8,
            needed: 4,
            available: 2
        }
    );
    let mut long = bytes.clone();
    long.push(0);
    assert_eq!(
        parse_images(&long).unwrap_err(),
        IdxError::TrailingBytes {
            offset: 34,
            extra: 1
        }
    );
}

#[test]
fn count_mismatch_is_rejected() {
    let (imgs, _) = fixture();
    let err = dataset_from_bytes(&encode_images(&imgs), &encode_labels(&[1, 2])).unwrap_err();
    assert!(
        err.to_string().contains("differs from label count"),
        "{err}"
    );
}

#[test]
fn every_header_byte_mutation_is_rejected() {
    let (imgs, labels) = fixture();
    let bytes = encode_images(&imgs);
    assert_eq!(parse_images(&bytes).unwrap(), imgs);
    for pos in 0..16 {
        for v in 0..=255u8 {
            if v == bytes[pos] {
                continue;
            }
            let mut b = bytes.clone();
            b[pos] = v;
            assert!(parse_images(&b).is_err(), "byte {pos} = {v:#04x} accepted");
        }
    }
    let lb = encode_labels(&labels);
    for pos in 0..8 {
        for v in 0..=255u8 {
            if v != lb[pos] {
                let mut b = lb.clone();
                b[pos] = v;
                assert!(
                    parse_labels(&b).is_err(),
                    "label byte {pos} = {v:#04x} accepted"
                );
            }
        }
    }
}

#[test]
fn gzip_and_limit() {
    let (imgs, labels) = fixture();
    let dir = tempfile::tempdir().unwrap();
    let ip = dir.path().join("img.idx.gz");
    let lp = dir.path().join("lab.idx");
    let mut gz = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
    gz.write_all(&encode_images(&imgs)).unwrap();
    std::fs::write(&ip, gz.finish().unwrap()).unwrap();
    std::fs::write(&lp, encode_labels(&labels)).unwrap();
    let full = parse_idx(&ip, &lp, None).unwrap();
    assert_eq!(full.len(), 3);
    assert_eq!(full.inputs()[[2, 5]], 1.0);
    let head = parse_idx(&ip, &lp, Some(2)).unwrap();
    assert_eq!(head.len(), 2);
    assert_eq!(head.labels(), &[7, 0]);
    assert_eq!(head.inputs().row(1), full.inputs().row(1));
}
