//! Sliding-window linear mixing of a classified cube into a coarser cube
//! with abundance ground truth.

use std::fs;
use std::path::Path;

use ndarray::{s, Array3, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::cube::{HyperCube, Units};
use crate::envi::{load_envi, save_envi, Interleave};
use crate::error::{Error, Result};
use crate::groundtruth::{sidecar_path, ClassMap};

/// Tolerance on the per-pixel abundance sum.
pub const SIMPLEX_TOLERANCE: f64 = 1e-6;

/// `H x W x E` per-pixel mixing fractions.
#[derive(Debug, Clone, PartialEq)]
pub struct AbundanceMap {
    pub values: Array3<f64>,
    pub class_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct AbundanceSidecar {
    class_names: Vec<String>,
}

impl AbundanceMap {
    pub fn new(values: Array3<f64>, class_names: Vec<String>) -> Result<Self> {
        let (_, _, e) = values.dim();
        if class_names.len() != e {
            return Err(Error::Dimension(format!("{} names for {e} abundance planes", class_names.len())));
        }
        let (h, w, _) = values.dim();
        for l in 0..h {
            for s in 0..w {
                check_simplex(values.slice(s![l, s, ..]))
                    .map_err(|msg| Error::InvalidArgument(format!("pixel ({l}, {s}): {msg}")))?;
            }
        }
        Ok(Self { values, class_names })
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.values.dim()
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn pixel(&self, line: usize, sample: usize) -> ArrayView1<'_, f64> {
        self.values.slice(s![line, sample, ..])
    }

    /// E-band float32 ENVI file plus a `<stem>.json` sidecar with class names.
    pub fn save(&self, header_path: impl AsRef<Path>) -> Result<()> {
        let header_path = header_path.as_ref();
        let e = self.class_count();
        let wl = (0..e).map(|i| i as f64).collect();
        let cube = HyperCube::new(self.values.clone(), wl, Units::Reflectance)?;
        save_envi(&cube, header_path, Interleave::Bsq)?;
        let sidecar = sidecar_path(header_path);
        let json = serde_json::to_string_pretty(&AbundanceSidecar {
            class_names: self.class_names.clone(),
        })?;
        fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))
    }

    pub fn load(header_path: impl AsRef<Path>) -> Result<Self> {
        let header_path = header_path.as_ref();
        let cube = load_envi(header_path)?;
        let sidecar = sidecar_path(header_path);
        let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let meta: AbundanceSidecar = serde_json::from_str(&text)?;
        Self::new(cube.into_data(), meta.class_names)
    }
}

fn check_simplex(a: ArrayView1<'_, f64>) -> std::result::Result<(), String> {
    if a.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err("negative or non-finite abundance".into());
    }
    let sum: f64 = a.sum();
    if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
        return Err(format!("abundances sum to {sum}"));
    }
    Ok(())
}

/// Averages non-overlapping `kernel x kernel` windows into single pixels;
/// abundances are the class fractions inside each window. Trailing rows and
/// columns that do not fill a window are dropped.
pub fn mix_cube(cube: &HyperCube, classmap: &ClassMap, kernel: usize) -> Result<(HyperCube, AbundanceMap)> {
    let (lines, samples, bands) = cube.data().dim();
    if classmap.dim() != (lines, samples) {
        return Err(Error::Dimension(format!(
            "class map {:?} vs cube {lines}x{samples}",
            classmap.dim()
        )));
    }
    if kernel < 2 || kernel > lines.min(samples) {
        return Err(Error::InvalidArgument(format!(
            "kernel {kernel} must be in 2..={}",
            lines.min(samples)
        )));
    }
    let e = classmap.class_count();
    let (out_l, out_s) = (lines / kernel, samples / kernel);
    let window = (kernel * kernel) as f64;
    let src = cube.data();
    let mut mixed = Array3::<f64>::zeros((out_l, out_s, bands));
    let mut abundance = Array3::<f64>::zeros((out_l, out_s, e));
    for i in 0..out_l {
        for j in 0..out_s {
            let mut counts = vec![0usize; e];
            let mut acc = mixed.slice_mut(s![i, j, ..]);
            for di in 0..kernel {
                for dj in 0..kernel {
                    let (l, s) = (i * kernel + di, j * kernel + dj);
                    acc += &src.slice(s![l, s, ..]);
                    let c = classmap.labels[[l, s]];
                    if c >= e {
                        return Err(Error::Dimension(format!("label {c} >= class count {e}")));
                    }
                    counts[c] += 1;
                }
            }
            acc.mapv_inplace(|v| v / window);
            for (c, n) in counts.into_iter().enumerate() {
                abundance[[i, j, c]] = n as f64 / window;
            }
        }
    }
    let mixed = HyperCube::new(mixed, cube.wavelengths().to_vec(), cube.units())?;
    let abundance = AbundanceMap::new(abundance, classmap.class_names.clone())?;
    Ok((mixed, abundance))
}
