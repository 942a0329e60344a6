use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sms_core::synthetic::two_region;
use sms_core::LabelMap;
use sms_io::{decode_gray8, encode_labels_png, quantize, Summary};
use tempfile::TempDir;

fn sms(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sms"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn pgm(width: usize, height: usize, f: impl Fn(usize, usize) -> u8) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    for y in 0..height {
        for x in 0..width {
            out.push(f(x, y));
        }
    }
    out
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> String {
    let path = dir.join(name);
    std::fs::write(&path, bytes).unwrap();
    path.to_str().unwrap().to_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Labels of an indexed labels.png, recovered through the gray value of
/// each palette color.
fn read_labels(bytes: &[u8], k: usize) -> Vec<u32> {
    let key = LabelMap::from_fn(k, 1, |x, _| x as u32 + 1);
    let (_, _, lumas) = decode_gray8(&encode_labels_png(&key, k).unwrap()).unwrap();
    let (_, _, data) = decode_gray8(bytes).unwrap();
    data.iter()
        .map(|v| lumas.iter().position(|l| l == v).unwrap() as u32 + 1)
        .collect()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn constant_image_converges_to_a_single_label() {
    let dir = TempDir::new().unwrap();
    let input = write(dir.path(), "flat.pgm", &pgm(64, 64, |_, _| 100));
    let out = dir.path().join("out");
    let o = sms(&["segment", "--input", &input, "--out", s(&out), "--k", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let labels = read_labels(&std::fs::read(out.join("labels.png")).unwrap(), 2);
    assert!(labels.iter().all(|&l| l == labels[0]));
    for name in ["own_1.pgm", "own_2.pgm", "trace.csv", "summary.json", "residuals.json"] {
        assert!(out.join(name).exists(), "{name} missing");
    }
}

#[test]
fn piecewise_constant_model_recovers_two_regions() {
    let dir = TempDir::new().unwrap();
    let syn = two_region(64, 64, 0.05, 4);
    let band = &syn.image.channels()[0];
    let input = write(dir.path(), "in.pgm", &pgm(64, 64, |x, y| quantize(band.get(x, y))));
    let out = dir.path().join("out");
    let o = sms(&[
        "segment", "--input", &input, "--out", s(&out), "--k", "2", "--model", "pc",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let labels = read_labels(&std::fs::read(out.join("labels.png")).unwrap(), 2);
    let got = LabelMap::new(64, 64, labels).unwrap();
    let acc = got.agreement_up_to_relabeling(&syn.truth, 2);
    assert!(acc >= 0.99, "accuracy {acc}");
}

#[test]
fn overlapping_supervision_is_rejected() {
    let dir = TempDir::new().unwrap();
    let input = write(dir.path(), "in.pgm", &pgm(32, 32, |x, _| (x * 8) as u8));
    let sup = write(
        dir.path(),
        "sup.json",
        br#"{"patches":[{"channel":1,"x":0,"y":0,"w":8,"h":8},{"channel":2,"x":4,"y":4,"w":8,"h":8}]}"#,
    );
    let out = dir.path().join("out");
    let o = sms(&[
        "segment", "--input", &input, "--out", s(&out), "--k", "2", "--supervision", &sup,
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("patches not disjoint"), "{}", stderr(&o));
}

#[test]
fn errors_have_distinct_messages() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let missing = dir.path().join("nope.pgm");
    let o = sms(&["segment", "--input", s(&missing), "--out", s(&out), "--k", "2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("unreadable input image"));

    let input = write(dir.path(), "in.pgm", &pgm(8, 8, |_, _| 0));
    let o = sms(&["segment", "--input", &input, "--out", s(&out), "--k", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("invalid configuration"));
}

#[test]
fn hitting_max_outer_exits_with_two() {
    let dir = TempDir::new().unwrap();
    let syn = two_region(32, 32, 0.1, 2);
    let band = &syn.image.channels()[0];
    let input = write(dir.path(), "in.pgm", &pgm(32, 32, |x, y| quantize(band.get(x, y))));
    let out = dir.path().join("out");
    let o = sms(&[
        "segment", "--input", &input, "--out", s(&out), "--k", "2", "--max-outer", "1",
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let summary: Summary =
        serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.iterations, 1);
}

fn segmented(dir: &Path, raw: bool) -> PathBuf {
    let syn = two_region(40, 40, 0.08, 7);
    let band = &syn.image.channels()[0];
    let input = write(dir, "in.pgm", &pgm(40, 40, |x, y| quantize(band.get(x, y))));
    let out = dir.join("out");
    let mut args = vec!["segment", "--input", &input, "--out", s(&out), "--k", "3"];
    if raw {
        args.push("--raw");
    }
    let o = sms(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    out
}

#[test]
fn harden_reproduces_segment_labels() {
    let dir = TempDir::new().unwrap();
    let out = segmented(dir.path(), false);
    let relabeled = dir.path().join("relabeled.png");
    let o = sms(&[
        "harden",
        s(&out.join("own_1.pgm")),
        s(&out.join("own_2.pgm")),
        s(&out.join("own_3.pgm")),
        "--out",
        s(&relabeled),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(relabeled).unwrap(),
        std::fs::read(out.join("labels.png")).unwrap()
    );
}

#[test]
fn harden_examples() {
    let dir = TempDir::new().unwrap();
    let full = write(dir.path(), "full.pgm", &pgm(5, 4, |_, _| 255));
    let empty = write(dir.path(), "empty.pgm", &pgm(5, 4, |_, _| 0));
    let half = write(dir.path(), "half.pgm", &pgm(5, 4, |_, _| 85));
    let labels = dir.path().join("l.png");

    assert_eq!(sms(&["harden", &full, &empty, "--out", s(&labels)]).status.code(), Some(0));
    assert!(read_labels(&std::fs::read(&labels).unwrap(), 2).iter().all(|&l| l == 1));

    assert_eq!(
        sms(&["harden", &half, &half, &half, "--out", s(&labels)]).status.code(),
        Some(0)
    );
    assert!(read_labels(&std::fs::read(&labels).unwrap(), 3).iter().all(|&l| l == 3));

    let small = write(dir.path(), "small.pgm", &pgm(4, 4, |_, _| 0));
    let o = sms(&["harden", &full, &small, "--out", s(&labels)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("dimension mismatch"));
}

fn energy_total(o: &Output) -> f64 {
    assert_eq!(o.status.code(), Some(0), "{}", stderr(o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    v["total"].as_f64().unwrap()
}

#[test]
fn energy_of_trivial_minimum_is_zero() {
    let dir = TempDir::new().unwrap();
    let image = write(dir.path(), "img.pgm", &pgm(6, 6, |_, _| 255));
    let full = write(dir.path(), "full.pgm", &pgm(6, 6, |_, _| 255));
    let empty = write(dir.path(), "empty.pgm", &pgm(6, 6, |_, _| 0));
    let o = sms(&["energy", "--image", &image, "--own", &full, &empty, "--means", "1,0"]);
    assert_eq!(energy_total(&o), 0.0);
}

#[test]
fn energy_rejects_infeasible_ownerships() {
    let dir = TempDir::new().unwrap();
    let image = write(dir.path(), "img.pgm", &pgm(6, 6, |_, _| 0));
    let p = write(dir.path(), "p.pgm", &pgm(6, 6, |_, _| 153));
    let o = sms(&["energy", "--image", &image, "--own", &p, &p, "--means", "0,1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("max |sum - 1| = 1.99"), "{}", stderr(&o));
}

#[test]
fn energy_audit_matches_summary_and_is_permutation_invariant() {
    let dir = TempDir::new().unwrap();
    let out = segmented(dir.path(), true);
    let summary: Summary =
        serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap();
    let own = |i: usize| out.join(format!("own_{i}.sofp")).to_str().unwrap().to_owned();
    let pat = |i: usize| out.join(format!("pattern_{i}_1.sofp")).to_str().unwrap().to_owned();
    let image = dir.path().join("in.pgm");
    let audit = |order: [usize; 3]| {
        let mut args = vec!["energy".to_owned(), "--image".into(), s(&image).into(), "--own".into()];
        args.extend(order.iter().map(|&i| own(i)));
        args.push("--pattern".into());
        args.extend(order.iter().map(|&i| pat(i)));
        let argv: Vec<&str> = args.iter().map(String::as_str).collect();
        energy_total(&sms(&argv))
    };
    let total = audit([1, 2, 3]);
    let want = summary.emitted_energy.total;
    assert!((total - want).abs() <= 1e-9 * want, "{total} vs {want}");
    let permuted = audit([3, 1, 2]);
    assert!((permuted - total).abs() <= 1e-12 * total);
}
