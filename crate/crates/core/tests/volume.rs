use fairboard_core::volume::*;
use proptest::prelude::*;

fn volume_strategy() -> impl Strategy<Value = Volume> {
    let dims = [1usize..9, 1usize..9, 1usize..7];
    let spacing = [0.3f32..3.0, 0.3f32..3.0, 0.3f32..3.0];
    (dims, spacing, 0u8..3).prop_flat_map(|(dims, spacing, kind)| {
        let n = dims[0] * dims[1] * dims[2];
        let data = match kind {
            0 => prop::collection::vec(any::<u8>(), n).prop_map(VolumeData::U8).boxed(),
            1 => prop::collection::vec(any::<i16>(), n).prop_map(VolumeData::I16).boxed(),
            _ => prop::collection::vec(-1e6f32..1e6, n).prop_map(VolumeData::F32).boxed(),
        };
        data.prop_map(move |d| Volume::new(dims, spacing, d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn roundtrip_plain_and_gzip(v in volume_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        for name in ["v.nii", "v.nii.gz"] {
            let p = dir.path().join(name);
            write_volume(&v, &p).unwrap();
            prop_assert_eq!(&read_volume(&p).unwrap(), &v);
        }
        prop_assert_eq!(decode_volume(&encode_volume(&v).unwrap()).unwrap(), v);
    }
}

#[test]
fn gzip_is_detected_by_content_not_name() {
    let v = Volume::zeros_u8([3, 4, 5], [1.0, 1.5, 2.0]);
    let dir = tempfile::tempdir().unwrap();
    let gz = dir.path().join("a.nii.gz");
    write_volume(&v, &gz).unwrap();
    let renamed = dir.path().join("a.nii");
    std::fs::rename(&gz, &renamed).unwrap();
    assert_eq!(read_volume(&renamed).unwrap(), v);
}

#[test]
fn truncated_file_is_an_error() {
    let v = Volume::zeros_u8([4, 4, 4], [1.0; 3]);
    let bytes = encode_volume(&v).unwrap();
    assert!(decode_volume(&bytes[..bytes.len() - 10]).is_err());
    assert!(decode_volume(&bytes[..100]).is_err());
}
