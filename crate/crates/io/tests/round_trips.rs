use proptest::prelude::*;
use sms_core::synthetic::two_region;
use sms_core::{harden, run_sms, Field, ModelKind, Stack};
use sms_io::{
    decode_gray8, decode_image, emit_artifacts, encode_pgm, labels_from_ownerships, load_image,
    peek_dimensions, read_raw, write_raw, EmitOptions, RunRequest, Summary,
};

proptest! {
    #[test]
    fn raw_files_round_trip_bit_exactly(
        w in 1usize..12, h in 1usize..12, channel in 1u32..20,
        seed in prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 144)
    ) {
        let field = Field::from_fn(w, h, |x, y| f64::from(seed[y * 12 + x]));
        let back = read_raw(&write_raw(&field, channel)).unwrap();
        prop_assert_eq!(back.channel, channel);
        for (&a, &b) in field.values().iter().zip(back.field.values()) {
            prop_assert_eq!((a as f32).to_bits(), b.to_bits());
        }
    }

    #[test]
    fn pgm_values_quantize_to_nearest_level(values in prop::collection::vec(0.0f64..=1.0, 1..64)) {
        let field = Field::new(values.len(), 1, values.clone()).unwrap();
        let (_, _, data) = decode_gray8(&encode_pgm(&field)).unwrap();
        for (&v, &q) in values.iter().zip(&data) {
            prop_assert!((f64::from(q) / 255.0 - v).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    /// Quantized hardening only disagrees where the argmax margin is below
    /// one gray level.
    #[test]
    fn quantized_labels_flip_only_on_small_margins(
        raw in prop::collection::vec(0.01f64..1.0, 3 * 36)
    ) {
        let mut p = Stack::filled(3, 6, 6, 0.0);
        for idx in 0..36 {
            let cell = &raw[idx * 3..idx * 3 + 3];
            let s: f64 = cell.iter().sum();
            p.set_pixel(idx, &cell.iter().map(|c| c / s).collect::<Vec<_>>());
        }
        let exact = harden(&p);
        let quantized = labels_from_ownerships(&p);
        for idx in 0..36 {
            if exact.labels()[idx] != quantized.labels()[idx] {
                let mut v = p.pixel(idx);
                v.sort_by(|a, b| b.total_cmp(a));
                prop_assert!(v[0] - v[1] < 1.0 / 255.0);
            }
        }
    }
}

#[test]
fn color_and_gray_inputs_decode_to_bands() {
    let ppm = b"P3\n2 1\n255\n255 0 0 0 0 255\n";
    let img = decode_image(ppm).unwrap();
    assert_eq!(img.k(), 3);
    assert_eq!(img.channel(0).values(), &[1.0, 0.0]);
    assert_eq!(img.channel(2).values(), &[0.0, 1.0]);

    let pgm = b"P2\n2 2\n255\n0 51\n102 255\n";
    let img = decode_image(pgm).unwrap();
    assert_eq!(img.k(), 1);
    assert_eq!(img.channel(0).values(), &[0.0, 0.2, 0.4, 1.0]);
    assert_eq!(peek_dimensions(pgm).unwrap(), (2, 2));
    assert!(decode_image(b"").is_err());
}

#[test]
fn artifacts_land_on_disk_and_reload() {
    let dir = tempfile::TempDir::new().unwrap();
    let syn = two_region(24, 24, 0.05, 2);
    let request = RunRequest::new(2);
    let out = run_sms(&syn.image, &request.to_config().unwrap(), None).unwrap();
    let opts = EmitOptions {
        raw: true,
        ..EmitOptions::default()
    };
    let artifacts = emit_artifacts(&out, &syn.image, &request, opts).unwrap();
    artifacts.write_to(dir.path()).unwrap();

    for name in [
        "own_1.pgm", "own_2.pgm", "own_1.sofp", "own_2.sofp", "pattern_1_1.sofp",
        "pattern_2_1.sofp", "labels.png", "labels_palette.json", "trace.csv",
        "residuals.json", "summary.json",
    ] {
        assert!(dir.path().join(name).is_file(), "{name}");
    }
    let summary: Summary =
        serde_json::from_slice(&std::fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.parameters, request);
    assert_eq!(summary.parameters.to_config().unwrap().model, ModelKind::Full);
    let own = load_image(&dir.path().join("own_1.pgm")).unwrap();
    assert_eq!(own.dims(), (24, 24));

    let raw = read_raw(&std::fs::read(dir.path().join("own_2.sofp")).unwrap()).unwrap();
    let expected: Vec<f32> = out.ownerships.channel(1).values().iter().map(|&v| v as f32).collect();
    assert_eq!(raw.field.values(), expected.as_slice());
}
