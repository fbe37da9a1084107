#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hyperunmix::cube::{even_wavelengths, Units};
use hyperunmix::envi::{save_envi, Interleave};
use hyperunmix::HyperCube;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hyperunmix"))
        .args(args)
        .output()
        .expect("spawn hyperunmix")
}

pub fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "hyperunmix {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

pub fn write_json(path: &Path, value: &serde_json::Value) {
    fs::write(path, serde_json::to_string_pretty(value).unwrap()).unwrap();
}

/// sha256 of every file under `dir`, keyed by relative path.
pub fn hash_dir(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_file() {
            let digest = Sha256::digest(fs::read(&path).unwrap());
            let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
            out.insert(path.file_name().unwrap().to_string_lossy().into_owned(), hex);
        }
    }
    out
}

pub fn signatures(e: usize, bands: usize) -> Array2<f64> {
    let wl = even_wavelengths(bands, 400.0, 1000.0);
    Array2::from_shape_fn((e, bands), |(k, j)| {
        let centre = 450.0 + 500.0 * k as f64 / (e.max(2) - 1) as f64;
        0.1 + 0.6 * (-((wl[j] - centre) / 110.0f64).powi(2)).exp() + 0.03 * k as f64
    })
}

/// Blocky three-class scene with 2% multiplicative noise; labels follow a
/// diagonal stripe pattern so that mixing windows straddle boundaries.
pub fn scene(lines: usize, samples: usize, bands: usize, seed: u64) -> (HyperCube, Array2<usize>, Array2<f64>) {
    let m = signatures(3, bands);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = Array2::from_shape_fn((lines, samples), |(l, s)| (l / 5 + s / 7) % 3);
    let data = Array3::from_shape_fn((lines, samples, bands), |(l, s, b)| {
        m[[labels[[l, s]], b]] * (1.0 + rng.gen_range(-0.02..0.02))
    });
    let cube = HyperCube::new(data, even_wavelengths(bands, 400.0, 1000.0), Units::Reflectance).unwrap();
    (cube, labels, m)
}

pub fn write_cube(cube: &HyperCube, path: &Path) -> PathBuf {
    save_envi(cube, path, Interleave::Bsq).unwrap();
    path.to_path_buf()
}

pub struct CalibrationFixture {
    pub raw: PathBuf,
    pub dark: PathBuf,
    pub panels: PathBuf,
    pub reflectance: HyperCube,
}

/// Raw DN = dark + reflectance / gain, with the top three lines covered
/// by 5%, 10% and 40% panels.
pub fn calibration_fixture(dir: &Path) -> CalibrationFixture {
    let (lines, samples, bands) = (10, 8, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let panel_r = [0.05, 0.10, 0.40];
    let r = Array3::from_shape_fn((lines, samples, bands), |(l, _, _)| {
        if l < 3 {
            panel_r[l]
        } else {
            rng.gen_range(0.02..0.9)
        }
    });
    let gain: Vec<f64> = (0..bands).map(|b| 1.0 / (256.0 * (1 + b) as f64)).collect();
    let dark: Vec<f64> = (0..bands).map(|b| 100.0 + 10.0 * b as f64).collect();
    let wl = even_wavelengths(bands, 400.0, 1000.0);
    let raw = Array3::from_shape_fn((lines, samples, bands), |(l, s, b)| dark[b] + r[[l, s, b]] / gain[b]);
    let dark_cube = Array3::from_shape_fn((4, samples, bands), |(_, _, b)| dark[b]);
    let raw_path = write_cube(&HyperCube::new(raw, wl.clone(), Units::RawDn).unwrap(), &dir.join("raw.hdr"));
    let dark_path = write_cube(&HyperCube::new(dark_cube, wl.clone(), Units::RawDn).unwrap(), &dir.join("dark.hdr"));
    let panels: Vec<serde_json::Value> = (0..3)
        .map(|l| {
            let pixels: Vec<[usize; 2]> = (0..samples).map(|s| [l, s]).collect();
            serde_json::json!({ "reflectance": panel_r[l], "pixels": pixels })
        })
        .collect();
    let panels_path = dir.join("panels.json");
    write_json(&panels_path, &serde_json::Value::Array(panels));
    CalibrationFixture {
        raw: raw_path,
        dark: dark_path,
        panels: panels_path,
        reflectance: HyperCube::new(r, wl, Units::Reflectance).unwrap(),
    }
}
