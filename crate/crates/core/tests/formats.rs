use std::fs;
use std::path::Path;

use eigendistort::fixtures::fixture_image;
use eigendistort::io::*;
use eigendistort::tensor::{gaussian_noise2, Grid2};
use eigendistort::trainer::Polarity;
use eigendistort::zoo::{CnnParams, LgnChannel, ModelSpec};
use eigendistort::Error;

fn golden(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn ramp() -> Vec<f64> {
    #[derive(serde::Deserialize)]
    struct V {
        values: Vec<f64>,
    }
    let v: V = serde_json::from_slice(&fs::read(golden("ramp_3x4_values.json")).unwrap()).unwrap();
    v.values
}

#[test]
fn pgm_golden_bytes() {
    let g = Grid2::from_vec(3, 4, ramp()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for (name, fmt) in [("ramp_3x4.pgm", ImageFormat::Pgm8), ("ramp_3x4_16.pgm", ImageFormat::Pgm16)] {
        let out = dir.path().join(name);
        save_image(&g, &out, fmt).unwrap();
        assert_eq!(fs::read(&out).unwrap(), fs::read(golden(name)).unwrap(), "{name}");
    }
    let back = load_image(&golden("ramp_3x4.pgm")).unwrap();
    assert_eq!(back.data()[1], 23.0 / 255.0);
    assert_eq!(back.data()[0], 0.0);
    assert_eq!(back.data()[11], 1.0);
}

#[test]
fn all_white_pgm_loads_as_ones() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("white.pgm");
    let mut bytes = b"P5\n3 2\n255\n".to_vec();
    bytes.extend([255u8; 6]);
    fs::write(&p, bytes).unwrap();
    assert_eq!(load_image(&p).unwrap(), Grid2::filled(2, 3, 1.0));
}

#[test]
fn raw_f32_golden_and_round_trip() {
    let g = Grid2::from_vec(3, 4, ramp()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("ramp.f32");
    save_image(&g, &p, ImageFormat::RawF32).unwrap();
    assert_eq!(fs::read(&p).unwrap(), fs::read(golden("ramp_3x4.f32")).unwrap());
    let side: serde_json::Value = serde_json::from_slice(&fs::read(sidecar_path(&p)).unwrap()).unwrap();
    assert_eq!(side["height"], 3);
    assert_eq!(side["width"], 4);
    assert_eq!(side["channels"], 1);
    assert_eq!(side["order"], "row-major");
    assert_eq!(side["endianness"], "little");

    // single-precision grids survive bit for bit, and re-saving is byte-stable
    let noise = gaussian_noise2(4, 7, 5).map(|v| v as f32 as f64);
    let q = dir.path().join("noise.f32");
    save_image(&noise, &q, ImageFormat::RawF32).unwrap();
    let back = load_image(&q).unwrap();
    assert!(back.data().iter().zip(noise.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    let q2 = dir.path().join("noise2.f32");
    save_image(&back, &q2, ImageFormat::RawF32).unwrap();
    assert_eq!(fs::read(&q).unwrap(), fs::read(&q2).unwrap());
}

#[test]
fn truncated_files_report_offsets() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("short.f32");
    save_image(&Grid2::zeros(2, 2), &p, ImageFormat::RawF32).unwrap();
    fs::write(&p, [0u8; 10]).unwrap();
    assert!(matches!(load_image(&p), Err(Error::Parse { offset: 10, .. })));
    let p = dir.path().join("short.pgm");
    fs::write(&p, b"P5\n2 2\n255\n\x01").unwrap();
    assert!(matches!(load_image(&p), Err(Error::Parse { offset: 12, .. })));
}

#[test]
fn render_counts_clipping() {
    let x = fixture_image(3, 8, 8);
    let e = gaussian_noise2(2, 8, 8);
    let e = e.scaled(1.0 / e.norm());
    let dir = tempfile::tempdir().unwrap();
    let r0 = render_distorted(&x, &e, 0.0, &dir.path().join("zero")).unwrap();
    assert_eq!(r0.clipped_pixels, 0);
    assert_eq!(load_image(&r0.files[1]).unwrap(), x.map(|v| v as f32 as f64));
    let r = render_distorted(&x, &e, 3.0, &dir.path().join("big")).unwrap();
    let y = x.add_scaled(3.0, &e);
    let brute = y.data().iter().filter(|v| **v < 0.0 || **v > 1.0).count();
    assert!(brute > 0);
    assert_eq!(r.clipped_pixels, brute);
    let side: RawSidecar = read_json(&sidecar_path(&r.files[1])).unwrap();
    assert_eq!(side.clipped_pixels, Some(brute));
}

#[test]
fn gallery_has_six_renderings() {
    let x = fixture_image(3, 8, 8);
    let unit = |s| {
        let e = gaussian_noise2(s, 8, 8);
        e.scaled(1.0 / e.norm())
    };
    let dir = tempfile::tempdir().unwrap();
    let g = render_gallery(&x, &unit(1), &unit(2), dir.path(), "img").unwrap();
    assert_eq!(g.files.len(), 6);
    assert!(g.files.iter().chain(&g.sidecars).all(|f| f.exists()));
    let on_disk = fs::read_dir(dir.path()).unwrap().count();
    assert_eq!(on_disk, g.files.len() + g.sidecars.len());
}

#[test]
fn manifest_loads_records_with_polarity() {
    let dir = tempfile::tempdir().unwrap();
    let a = fixture_image(1, 6, 6);
    let b = fixture_image(2, 6, 6);
    save_image(&a, &dir.path().join("a.pgm"), ImageFormat::Pgm8).unwrap();
    save_image(&b, &dir.path().join("b.pgm"), ImageFormat::Pgm8).unwrap();
    let m = dir.path().join("m.csv");
    write_manifest(&m, Polarity::Quality, &[("a.pgm".into(), "b.pgm".into(), 4.25)]).unwrap();
    let man = load_manifest(&m).unwrap();
    let recs = man.load_records().unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0].score, -4.25);
    assert_eq!(recs[0].reference.dims(), (6, 6));
}

#[test]
fn params_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("params.json");
    for spec in [
        ModelSpec::mse(),
        ModelSpec::lgg(&LgnChannel::default()).unwrap(),
        ModelSpec::cnn(&CnnParams::random(1, 1.0)).unwrap(),
    ] {
        let prov = Provenance::new(7, &serde_json::json!({"kind": spec.kind})).unwrap();
        save_params(&spec, &p, Some(prov)).unwrap();
        assert_eq!(load_params(&p).unwrap(), spec);
        let v: serde_json::Value = serde_json::from_slice(&fs::read(&p).unwrap()).unwrap();
        for key in ["model_type", "version", "theta", "frozen"] {
            assert!(v.get(key).is_some());
        }
        assert!(v["frozen"].get("bn_divisors").is_some());
    }
    let mut bad = ParamsFile::from_spec(&ModelSpec::lgg(&LgnChannel::default()).unwrap(), None);
    bad.theta.pop();
    assert!(bad.into_spec().is_err());
}
