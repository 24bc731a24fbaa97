//! Container round trips, corruption diagnostics, and statistical bounds on
//! the synthetic generator.

use std::fs;

use proptest::prelude::*;
use segrobust::data::{
    crop_center, generate_synthetic, read_dataset, write_dataset, zero_pad, Dataset, Provenance,
    Sample, ShapeFamily, SynthConfig, INTENSITY_MAX_DEFAULT, MANIFEST_NAME,
};
use segrobust::rng;
use segrobust::tensor::Tensor;
use segrobust::Error;

fn small_dataset() -> Dataset {
    generate_synthetic(&SynthConfig {
        count: 5,
        height: 16,
        width: 16,
        seed: 7,
        ..SynthConfig::default()
    })
    .unwrap()
}

#[test]
fn container_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset();
    write_dataset(&ds, dir.path()).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back, ds);

    // write → read → write produces byte-identical files
    let second = tempfile::tempdir().unwrap();
    write_dataset(&back, second.path()).unwrap();
    for entry in fs::read_dir(dir.path()).unwrap() {
        let name = entry.unwrap().file_name();
        let a = fs::read(dir.path().join(&name)).unwrap();
        let b = fs::read(second.path().join(&name)).unwrap();
        assert_eq!(a, b, "file {name:?} changed across a round trip");
    }
}

#[test]
fn missing_raster_file_error_names_the_sample() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&small_dataset(), dir.path()).unwrap();
    fs::remove_file(dir.path().join("sample-0002.lsbr")).unwrap();
    let err = read_dataset(dir.path()).unwrap_err();
    let msg = err.to_string();
    assert!(
        msg.contains("synthetic-0002"),
        "error should name the missing sample: {msg}"
    );
}

#[test]
fn corrupt_mask_value_is_rejected_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&small_dataset(), dir.path()).unwrap();
    let path = dir.path().join("sample-0001.lsbr");
    let mut bytes = fs::read(&path).unwrap();
    let len = bytes.len();
    bytes[len - 5] = 2;
    fs::write(&path, &bytes).unwrap();
    // refresh the checksum so the mask check itself is exercised
    let manifest_path = dir.path().join(MANIFEST_NAME);
    let mut manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&manifest_path).unwrap()).unwrap();
    use sha2::Digest;
    let digest = sha2::Sha256::digest(&bytes);
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    manifest["samples"][1]["sha256"] = serde_json::Value::String(hex);
    fs::write(&manifest_path, serde_json::to_string(&manifest).unwrap()).unwrap();

    let err = read_dataset(dir.path()).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Format { .. }), "{msg}");
    assert!(msg.contains("mask byte 2"), "{msg}");
}

#[test]
fn truncated_raster_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&small_dataset(), dir.path()).unwrap();
    let path = dir.path().join("sample-0000.lsbr");
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    let err = read_dataset(dir.path()).unwrap_err();
    // truncation trips the checksum first; both are structured format errors
    assert!(matches!(err, Error::Format { .. }), "{err}");
}

#[test]
fn checksum_mismatch_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&small_dataset(), dir.path()).unwrap();
    let path = dir.path().join("sample-0000.lsbr");
    let mut bytes = fs::read(&path).unwrap();
    let flip = bytes.len() - 1;
    bytes[flip] ^= 1;
    fs::write(&path, &bytes).unwrap();
    let err = read_dataset(dir.path()).unwrap_err();
    assert!(err.to_string().contains("checksum mismatch"), "{err}");
}

#[test]
fn missing_manifest_is_an_io_error_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let err = read_dataset(dir.path()).unwrap_err();
    assert!(err.to_string().contains(MANIFEST_NAME), "{err}");
}

#[test]
fn foreground_fraction_stays_within_generator_bounds() {
    // 1000 samples across both shape families and a few raster sizes
    let configs = [
        (ShapeFamily::EllipsePair, 32, 32, 400),
        (ShapeFamily::SingleBlob, 32, 32, 300),
        (ShapeFamily::EllipsePair, 48, 32, 200),
        (ShapeFamily::EllipsePair, 64, 64, 100),
    ];
    let mut checked = 0usize;
    for (i, (family, h, w, count)) in configs.into_iter().enumerate() {
        let ds = generate_synthetic(&SynthConfig {
            count,
            height: h,
            width: w,
            family,
            seed: 100 + i as u64,
            ..SynthConfig::default()
        })
        .unwrap();
        for s in &ds.samples {
            let fg = s.mask.data().iter().filter(|&&v| v == 1.0).count();
            let fraction = fg as f64 / (h * w) as f64;
            assert!(
                (0.01..=0.30).contains(&fraction),
                "sample {} ({h}×{w}): foreground fraction {fraction:.4}",
                s.id
            );
            checked += 1;
        }
    }
    assert_eq!(checked, 1000);
}

#[test]
fn generated_samples_satisfy_all_invariants() {
    let ds = small_dataset();
    assert_eq!(ds.provenance, Provenance::Synthetic);
    assert_eq!(ds.seed, Some(7));
    for s in &ds.samples {
        assert_eq!(s.image.shape(), s.mask.shape());
        assert!(s.image.data().iter().all(|v| (0.0..=0.2).contains(v)));
        assert!(s.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pad_then_crop_recovers_original(
        h in 1usize..12,
        w in 1usize..12,
        extra_h in 0usize..9,
        extra_w in 0usize..9,
        seed in 0u64..500,
    ) {
        let mut stream = rng::stream(seed);
        let data: Vec<f32> = (0..h * w).map(|_| rng::uniform_f32(&mut stream, -4.0, 4.0)).collect();
        let raster = Tensor::new(&[h, w], data).unwrap();
        let padded = zero_pad(&raster, (h + extra_h, w + extra_w)).unwrap();
        let back = crop_center(&padded, (h, w)).unwrap();
        prop_assert_eq!(back, raster);
    }

    #[test]
    fn sliced_volumes_always_yield_valid_samples(
        d in 1usize..5,
        h in 1usize..8,
        w in 1usize..8,
        seed in 0u64..500,
    ) {
        let mut stream = rng::stream(seed);
        let voxels: Vec<f32> = (0..d * h * w).map(|_| rng::uniform_f32(&mut stream, 0.0, 1.0)).collect();
        let masks: Vec<f32> = (0..d * h * w)
            .map(|_| if rng::unit_f32(&mut stream) < 0.3 { 1.0 } else { 0.0 })
            .collect();
        let volume = Tensor::new(&[d, h, w], voxels).unwrap();
        let mask_volume = Tensor::new(&[d, h, w], masks).unwrap();
        let samples = segrobust::data::slice_volume(&volume, &mask_volume, "fuzz").unwrap();
        prop_assert_eq!(samples.len(), d);
        for s in &samples {
            prop_assert_eq!(s.image.shape(), s.mask.shape());
            prop_assert!(s.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn scaled_rasters_always_land_in_range(
        h in 1usize..8,
        w in 1usize..8,
        seed in 0u64..500,
        lo in -100.0f32..100.0,
        span in 0.0f32..1000.0,
    ) {
        let mut stream = rng::stream(seed);
        let data: Vec<f32> = (0..h * w).map(|_| rng::uniform_f32(&mut stream, lo, lo + span)).collect();
        let raster = Tensor::new(&[h, w], data).unwrap();
        let scaled = segrobust::data::scale_to_range(&raster, INTENSITY_MAX_DEFAULT);
        prop_assert!(scaled.data().iter().all(|v| (0.0..=INTENSITY_MAX_DEFAULT).contains(v)));
    }
}

#[test]
fn sample_construction_is_fuzzed_through_dataset_validation() {
    // masks with any non-binary value must be rejected no matter the path in
    let img = Tensor::zeros(&[4, 4]);
    for bad in [-1.0f32, 0.5, 2.0, f32::NAN] {
        let mut mask = Tensor::zeros(&[4, 4]);
        mask.data_mut()[5] = bad;
        let sample = Sample {
            id: "bad".into(),
            image: img.clone(),
            mask,
        };
        assert!(
            Dataset::new(vec![sample], 0.2, Provenance::Ingested, "t", None).is_err(),
            "mask value {bad} accepted"
        );
    }
}
