//! Radiometric calibration from a dark frame and reference panels of known
//! reflectance.

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::cube::{HyperCube, Units};
use crate::error::{Error, Result};

/// Panel entry of the panel description JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelSpec {
    pub reflectance: f64,
    /// `[line, sample]` coordinates of panel pixels in the raw cube.
    pub pixels: Vec<[usize; 2]>,
}

/// Spectra observed over one reference panel.
#[derive(Debug, Clone)]
pub struct PanelSample {
    /// `N x B` raw digital numbers.
    pub spectra: Array2<f64>,
    pub reflectance: f64,
}

impl PanelSample {
    /// Gathers the listed pixels from `raw`.
    pub fn from_cube(raw: &HyperCube, spec: &PanelSpec) -> Result<Self> {
        let mut spectra = Array2::<f64>::zeros((spec.pixels.len(), raw.bands()));
        for (row, &[l, s]) in spec.pixels.iter().enumerate() {
            if l >= raw.lines() || s >= raw.samples() {
                return Err(Error::InvalidArgument(format!(
                    "panel pixel ({l}, {s}) outside {}x{} cube",
                    raw.lines(),
                    raw.samples()
                )));
            }
            spectra.row_mut(row).assign(&raw.pixel(l, s));
        }
        Ok(Self {
            spectra,
            reflectance: spec.reflectance,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel {
    pub dark: Vec<f64>,
    pub gain: Vec<f64>,
    pub offset: Vec<f64>,
    /// RMS of the per-band line fit over the panels.
    pub panel_residual: Vec<f64>,
}

impl CalibrationModel {
    pub fn bands(&self) -> usize {
        self.dark.len()
    }
}

/// Fits per-band `reflectance = gain * (DN - dark) + offset` by least
/// squares over the panel means.
pub fn fit_calibration(dark_cube: &HyperCube, panels: &[PanelSample]) -> Result<CalibrationModel> {
    if dark_cube.units() != Units::RawDn {
        return Err(Error::InvalidArgument(format!(
            "dark cube must be raw_dn, got {}",
            dark_cube.units().as_str()
        )));
    }
    let bands = dark_cube.bands();
    let mut distinct: Vec<f64> = panels.iter().map(|p| p.reflectance).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Underdetermined(format!(
            "{} distinct panel reflectance(s); at least 2 required",
            distinct.len()
        )));
    }
    for (i, p) in panels.iter().enumerate() {
        if p.spectra.nrows() == 0 {
            return Err(Error::InvalidArgument(format!("panel {i} has no pixels")));
        }
        if p.spectra.ncols() != bands {
            return Err(Error::Dimension(format!(
                "panel {i} has {} bands, dark cube {bands}",
                p.spectra.ncols()
            )));
        }
    }

    let dark = dark_cube.pixels().mean_axis(Axis(0)).expect("non-empty").to_vec();
    let means: Vec<Vec<f64>> = panels
        .iter()
        .map(|p| p.spectra.mean_axis(Axis(0)).expect("non-empty").to_vec())
        .collect();
    let k = panels.len() as f64;
    let ys: Vec<f64> = panels.iter().map(|p| p.reflectance).collect();
    let y_mean = ys.iter().sum::<f64>() / k;

    let mut gain = vec![0.0; bands];
    let mut offset = vec![0.0; bands];
    let mut panel_residual = vec![0.0; bands];
    for b in 0..bands {
        let xs: Vec<f64> = means.iter().map(|m| m[b] - dark[b]).collect();
        let x_mean = xs.iter().sum::<f64>() / k;
        let sxx: f64 = xs.iter().map(|x| (x - x_mean).powi(2)).sum();
        let scale = xs.iter().map(|x| x.abs()).fold(1.0, f64::max);
        if sxx <= (1e-12 * scale).powi(2) {
            return Err(Error::SingularFit {
                band: b,
                reason: "no DN spread across panels".into(),
            });
        }
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - x_mean) * (y - y_mean)).sum();
        gain[b] = sxy / sxx;
        offset[b] = y_mean - gain[b] * x_mean;
        let sse: f64 = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| (gain[b] * x + offset[b] - y).powi(2))
            .sum();
        panel_residual[b] = (sse / k).sqrt();
    }
    Ok(CalibrationModel {
        dark,
        gain,
        offset,
        panel_residual,
    })
}

/// Converts a raw cube to reflectance; negative results are clamped to zero.
pub fn apply_calibration(model: &CalibrationModel, raw: &HyperCube) -> Result<HyperCube> {
    if raw.bands() != model.bands() {
        return Err(Error::Dimension(format!(
            "cube has {} bands, calibration {}",
            raw.bands(),
            model.bands()
        )));
    }
    if raw.units() != Units::RawDn {
        return Err(Error::InvalidArgument(format!(
            "calibration input must be raw_dn, got {}",
            raw.units().as_str()
        )));
    }
    let (lines, samples, bands) = raw.data().dim();
    let src = raw.data();
    let data = Array3::from_shape_fn((lines, samples, bands), |(l, s, b)| {
        (model.gain[b] * (src[[l, s, b]] - model.dark[b]) + model.offset[b]).max(0.0)
    });
    HyperCube::new(data, raw.wavelengths().to_vec(), Units::Reflectance)
}
