use std::fs;

use cns_core::bundle::{decode_points, decode_raster, encode_raster, read_bundle, write_bundle, Dtype};
use cns_core::scenesynth::{generate_scene, run_oracles, OracleConfig, SceneConfig};
use cns_core::Error;
use proptest::prelude::*;

fn small_config(objects: usize, cameras: usize) -> SceneConfig {
    SceneConfig {
        object_count: objects,
        points_per_object: 40,
        background_density: 4.0,
        camera_count: cameras,
        image_width: 20,
        image_height: 14,
        ..Default::default()
    }
}

fn small_oracles() -> OracleConfig {
    OracleConfig {
        feature_dim: 4,
        embed_dim: 32,
        ..Default::default()
    }
}

fn write_scene(dir: &std::path::Path, seed: u64) {
    let scene = generate_scene(&small_config(3, 2), seed).unwrap();
    let rendered = scene.render().unwrap();
    let oracles = run_oracles(&scene, &rendered, &small_oracles(), seed).unwrap();
    write_bundle(&scene, &oracles, dir, seed, "abcd").unwrap();
}

#[test]
fn two_point_cloud_from_known_bytes() {
    let mut bytes = b"CNSPTS v1 2 1 0\n".to_vec();
    #[rustfmt::skip]
    bytes.extend_from_slice(&[
        0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x80, 0x3f,
        0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0x40, 0x00, 0x00, 0x40, 0x40,
        0x01, 0x00, 0x00, 0x00, 0x02, 0x00, 0x00, 0x00,
    ]);
    let cloud = decode_points("points.bin", &bytes, Some(2)).unwrap();
    assert_eq!(cloud.positions, vec![[0.0, 0.0, 1.0], [1.0, 2.0, 3.0]]);
    assert_eq!(cloud.gt_labels, Some(vec![1, 2]));
    assert_eq!(cloud.object_ids, None);
    assert_eq!(cns_core::bundle::encode_points(&cloud), bytes);
}

#[test]
fn manifest_count_mismatch_names_both_values() {
    let bytes = b"CNSPTS v1 0 0 0\n".to_vec();
    let err = decode_points("points.bin", &bytes, Some(7)).unwrap_err().to_string();
    assert!(err.contains("N=7") && err.contains("N=0"), "{err}");
}

#[test]
fn truncated_raster_reports_offset() {
    let payload: Vec<u8> = (0..24).collect();
    let mut bytes = encode_raster(3, 2, 1, Dtype::F4, payload);
    let header = bytes.len() - 24;
    bytes.truncate(bytes.len() - 5);
    match decode_raster("view_0.scores.bin", &bytes).unwrap_err() {
        Error::Format { file, offset, .. } => {
            assert_eq!(file, "view_0.scores.bin");
            assert_eq!(offset, (header + 19) as u64);
        }
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn big_endian_payload_is_rejected() {
    let bytes = [b"CNSRAS v1 1 1 1 >f4\n".as_slice(), &[0x3f, 0x80, 0, 0]].concat();
    let err = decode_raster("x.bin", &bytes).unwrap_err().to_string();
    assert!(err.contains("big-endian"), "{err}");
}

#[test]
fn unknown_version_is_a_version_error() {
    let bytes = [b"CNSRAS v2 1 1 1 <f4\n".as_slice(), &[0; 4]].concat();
    assert!(matches!(decode_raster("x.bin", &bytes), Err(Error::Version { .. })));
    let dir = tempfile::tempdir().unwrap();
    write_scene(dir.path(), 1);
    let path = dir.path().join("manifest.txt");
    let text = fs::read_to_string(&path)
        .unwrap()
        .replacen("CNSBUNDLE v1", "CNSBUNDLE v9", 1);
    fs::write(&path, text).unwrap();
    assert!(matches!(read_bundle(dir.path()), Err(Error::Version { .. })));
}

#[test]
fn f64_raster_round_trip() {
    let values = [1.5f64, -0.0, f64::MIN_POSITIVE, 1e300];
    let bytes = encode_raster(
        2,
        2,
        1,
        Dtype::F8,
        values.iter().flat_map(|x| x.to_le_bytes()).collect(),
    );
    let r = decode_raster("e.bin", &bytes).unwrap();
    assert_eq!(
        r.f64s().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
        values.map(f64::to_bits).to_vec()
    );
}

#[test]
fn writes_every_declared_file_and_no_temporaries() {
    let dir = tempfile::tempdir().unwrap();
    write_scene(dir.path(), 4);
    let mut names: Vec<String> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    let mut expected = vec![
        "appearance.bin",
        "cameras.txt",
        "embeddings.bin",
        "manifest.txt",
        "points.bin",
    ]
    .into_iter()
    .map(String::from)
    .collect::<Vec<_>>();
    for k in 0..2 {
        for kind in ["feat", "labels", "masks", "scores"] {
            expected.push(format!("view_{k}.{kind}.bin"));
        }
    }
    expected.sort();
    assert_eq!(names, expected);
}

#[test]
fn same_seed_writes_identical_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    write_scene(a.path(), 9);
    write_scene(b.path(), 9);
    for entry in fs::read_dir(a.path()).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(
            fs::read(a.path().join(&name)).unwrap(),
            fs::read(b.path().join(&name)).unwrap(),
            "{name:?}"
        );
    }
}

#[test]
fn corrupted_label_raster_is_caught() {
    let dir = tempfile::tempdir().unwrap();
    write_scene(dir.path(), 2);
    let path = dir.path().join("view_1.labels.bin");
    let mut bytes = fs::read(&path).unwrap();
    let last = bytes.len() - 4;
    bytes[last..].copy_from_slice(&5i32.to_le_bytes());
    fs::write(&path, bytes).unwrap();
    let err = read_bundle(dir.path()).unwrap_err().to_string();
    assert!(err.contains("view_1.labels.bin"), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn read_inverts_write(seed in 0u64..1_000_000, objects in 0usize..5, cameras in 1usize..4) {
        let scene = generate_scene(&small_config(objects, cameras), seed).unwrap();
        let rendered = scene.render().unwrap();
        let oracles = run_oracles(&scene, &rendered, &small_oracles(), seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_bundle(&scene, &oracles, dir.path(), seed, "ffff").unwrap();
        let (scene2, oracles2, manifest2) = read_bundle(dir.path()).unwrap();
        prop_assert_eq!(scene2, scene);
        prop_assert_eq!(oracles2, oracles);
        prop_assert_eq!(manifest2, manifest);
    }
}
