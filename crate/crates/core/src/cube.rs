//! In-memory hyperspectral cube, patch tiling and dihedral augmentation.
//!
//! Data is always held in `(line, sample, band)` order regardless of how it
//! was stored on disk.

use ndarray::{s, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Values above `1 + REFLECTANCE_TOLERANCE` in a reflectance cube are clipped.
pub const REFLECTANCE_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Units {
    RawDn,
    Radiance,
    Reflectance,
}

impl Units {
    pub fn as_str(&self) -> &'static str {
        match self {
            Units::RawDn => "raw_dn",
            Units::Radiance => "radiance",
            Units::Reflectance => "reflectance",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "raw_dn" | "dn" | "raw" => Some(Units::RawDn),
            "radiance" => Some(Units::Radiance),
            "reflectance" => Some(Units::Reflectance),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperCube {
    data: Array3<f64>,
    wavelengths: Vec<f64>,
    units: Units,
    clipped: usize,
}

impl HyperCube {
    /// Builds a cube, validating shape and wavelength metadata.
    ///
    /// Negative values are clamped to zero and reflectance values above
    /// `1 + REFLECTANCE_TOLERANCE` are clipped; both are tallied in
    /// [`HyperCube::clipped_count`].
    pub fn new(mut data: Array3<f64>, wavelengths: Vec<f64>, units: Units) -> Result<Self> {
        let (lines, samples, bands) = data.dim();
        if lines == 0 || samples == 0 || bands == 0 {
            return Err(Error::InvalidArgument(format!(
                "cube dimensions must be non-zero, got {lines}x{samples}x{bands}"
            )));
        }
        validate_wavelengths(&wavelengths, bands)?;
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite cube value {v}")));
        }
        let upper = match units {
            Units::Reflectance => 1.0 + REFLECTANCE_TOLERANCE,
            _ => f64::INFINITY,
        };
        let mut clipped = 0usize;
        data.mapv_inplace(|v| {
            if v < 0.0 {
                clipped += 1;
                0.0
            } else if v > upper {
                clipped += 1;
                upper
            } else {
                v
            }
        });
        if clipped > 0 {
            log::warn!("clipped {clipped} out-of-range values while building cube");
        }
        if !data.is_standard_layout() {
            data = data.as_standard_layout().to_owned();
        }
        Ok(Self {
            data,
            wavelengths,
            units,
            clipped,
        })
    }

    /// Cube with evenly spaced wavelengths over `[start, end]` nm.
    pub fn with_wavelength_range(data: Array3<f64>, start: f64, end: f64, units: Units) -> Result<Self> {
        let bands = data.dim().2;
        Self::new(data, even_wavelengths(bands, start, end), units)
    }

    pub fn lines(&self) -> usize {
        self.data.dim().0
    }

    pub fn samples(&self) -> usize {
        self.data.dim().1
    }

    pub fn bands(&self) -> usize {
        self.data.dim().2
    }

    pub fn pixel_count(&self) -> usize {
        self.lines() * self.samples()
    }

    pub fn data(&self) -> ArrayView3<'_, f64> {
        self.data.view()
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn wavelengths(&self) -> &[f64] {
        &self.wavelengths
    }

    pub fn units(&self) -> Units {
        self.units
    }

    /// Number of values clamped during construction.
    pub fn clipped_count(&self) -> usize {
        self.clipped
    }

    pub fn pixel(&self, line: usize, sample: usize) -> ArrayView1<'_, f64> {
        self.data.slice(s![line, sample, ..])
    }

    /// Row-major `N x B` view of all spectra.
    pub fn pixels(&self) -> ArrayView2<'_, f64> {
        let (l, s, b) = self.data.dim();
        self.data
            .view()
            .into_shape_with_order((l * s, b))
            .expect("cube storage is standard layout")
    }

    /// Copy of this cube with different data of the same shape.
    pub fn with_data(&self, data: Array3<f64>, units: Units) -> Result<Self> {
        if data.dim() != self.data.dim() {
            return Err(Error::Dimension(format!(
                "expected {:?}, got {:?}",
                self.data.dim(),
                data.dim()
            )));
        }
        Self::new(data, self.wavelengths.clone(), units)
    }

    /// Builds a cube from an `N x B` pixel matrix laid out row-major over
    /// `lines x samples`.
    pub fn from_pixels(pixels: Array2<f64>, lines: usize, samples: usize, wavelengths: Vec<f64>, units: Units) -> Result<Self> {
        let (n, b) = pixels.dim();
        if n != lines * samples {
            return Err(Error::Dimension(format!(
                "{n} pixels cannot fill {lines}x{samples}"
            )));
        }
        let data = pixels
            .into_shape_with_order((lines, samples, b))
            .map_err(|e| Error::Dimension(e.to_string()))?;
        Self::new(data, wavelengths, units)
    }
}

pub fn even_wavelengths(bands: usize, start: f64, end: f64) -> Vec<f64> {
    if bands == 1 {
        return vec![start];
    }
    let step = (end - start) / (bands - 1) as f64;
    (0..bands).map(|i| start + step * i as f64).collect()
}

pub(crate) fn validate_wavelengths(wavelengths: &[f64], bands: usize) -> Result<()> {
    if wavelengths.len() != bands {
        return Err(Error::Metadata(format!(
            "{} wavelengths for {bands} bands",
            wavelengths.len()
        )));
    }
    if wavelengths.iter().any(|w| !w.is_finite()) {
        return Err(Error::Metadata("non-finite wavelength".into()));
    }
    if let Some(i) = wavelengths.windows(2).position(|w| w[1] <= w[0]) {
        return Err(Error::Metadata(format!(
            "wavelengths not strictly increasing at band {}",
            i + 1
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadMode {
    #[default]
    Reflect,
    Zero,
}

#[derive(Debug, Clone)]
pub struct PatchSet {
    pub patches: Vec<Array3<f64>>,
    /// `(line, sample)` of each patch's top-left corner in cube coordinates.
    pub origins: Vec<(usize, usize)>,
    pub patch_size: usize,
    pub stride: usize,
    pub pad_mode: PadMode,
    pub lines: usize,
    pub samples: usize,
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Tiles the cube into `patch_size x patch_size` sub-cubes.
///
/// Origins step by `stride` from zero while they remain inside the cube;
/// patches running over the edge are filled according to `pad_mode`.
pub fn extract_patches(cube: &HyperCube, patch_size: usize, stride: usize, pad_mode: PadMode) -> Result<PatchSet> {
    if patch_size == 0 || stride == 0 {
        return Err(Error::InvalidArgument("patch size and stride must be >= 1".into()));
    }
    let (lines, samples, bands) = cube.data.dim();
    if pad_mode != PadMode::Zero && patch_size > lines && patch_size > samples {
        return Err(Error::InvalidArgument(format!(
            "patch size {patch_size} exceeds both cube dimensions {lines}x{samples} without zero padding"
        )));
    }
    let line_origins: Vec<usize> = (0..lines).step_by(stride).collect();
    let sample_origins: Vec<usize> = (0..samples).step_by(stride).collect();
    let mut patches = Vec::with_capacity(line_origins.len() * sample_origins.len());
    let mut origins = Vec::with_capacity(patches.capacity());
    for &l0 in &line_origins {
        for &s0 in &sample_origins {
            let mut patch = Array3::<f64>::zeros((patch_size, patch_size, bands));
            for i in 0..patch_size {
                for j in 0..patch_size {
                    let (l, s) = (l0 + i, s0 + j);
                    let src = match pad_mode {
                        PadMode::Zero if l >= lines || s >= samples => continue,
                        PadMode::Zero => (l, s),
                        PadMode::Reflect => (
                            reflect_index(l as isize, lines),
                            reflect_index(s as isize, samples),
                        ),
                    };
                    patch
                        .slice_mut(s![i, j, ..])
                        .assign(&cube.data.slice(s![src.0, src.1, ..]));
                }
            }
            patches.push(patch);
            origins.push((l0, s0));
        }
    }
    Ok(PatchSet {
        patches,
        origins,
        patch_size,
        stride,
        pad_mode,
        lines,
        samples,
    })
}

/// Reassembles per-patch planes (any channel count) into a `lines x samples`
/// array, cropping padding and averaging where patches overlap.
pub fn stitch_patches(planes: &[Array3<f64>], origins: &[(usize, usize)], lines: usize, samples: usize) -> Result<Array3<f64>> {
    if planes.len() != origins.len() || planes.is_empty() {
        return Err(Error::Dimension(format!(
            "{} planes for {} origins",
            planes.len(),
            origins.len()
        )));
    }
    let channels = planes[0].dim().2;
    let mut out = Array3::<f64>::zeros((lines, samples, channels));
    let mut hits = Array2::<u32>::zeros((lines, samples));
    for (plane, &(l0, s0)) in planes.iter().zip(origins) {
        let (ph, pw, c) = plane.dim();
        if c != channels {
            return Err(Error::Dimension("inconsistent channel counts".into()));
        }
        for i in 0..ph {
            for j in 0..pw {
                let (l, s) = (l0 + i, s0 + j);
                if l >= lines || s >= samples {
                    continue;
                }
                let mut dst = out.slice_mut(s![l, s, ..]);
                dst += &plane.slice(s![i, j, ..]);
                hits[[l, s]] += 1;
            }
        }
    }
    for ((l, s), &h) in hits.indexed_iter() {
        match h {
            0 => return Err(Error::Dimension(format!("pixel ({l}, {s}) not covered by any patch"))),
            1 => {}
            h => out.slice_mut(s![l, s, ..]).mapv_inplace(|v| v / h as f64),
        }
    }
    Ok(out)
}

/// Source coordinate for output `(i, j)` under dihedral transform `op`.
///
/// `op = r + 4 m`: `r` quarter turns, followed by a left-right mirror when
/// `m == 1`.
fn dihedral_source(op: u8, i: usize, j: usize, n: usize) -> (usize, usize) {
    let (i, j) = if op >= 4 { (i, n - 1 - j) } else { (i, j) };
    match op % 4 {
        0 => (i, j),
        1 => (j, n - 1 - i),
        2 => (n - 1 - i, n - 1 - j),
        _ => (n - 1 - j, i),
    }
}

/// Applies one of the eight symmetries of the square to the spatial axes.
pub fn augment(patch: ArrayView3<'_, f64>, op_code: u8) -> Result<Array3<f64>> {
    let (h, w, b) = patch.dim();
    if h != w {
        return Err(Error::InvalidArgument(format!("patch is not square: {h}x{w}")));
    }
    if op_code > 7 {
        return Err(Error::InvalidArgument(format!("augmentation code {op_code} outside 0..=7")));
    }
    let mut out = Array3::<f64>::zeros((h, w, b));
    for i in 0..h {
        for j in 0..w {
            let (si, sj) = dihedral_source(op_code, i, j, h);
            out.slice_mut(s![i, j, ..]).assign(&patch.slice(s![si, sj, ..]));
        }
    }
    Ok(out)
}

/// Mean spectrum over all pixels.
pub fn mean_spectrum(cube: &HyperCube) -> ndarray::Array1<f64> {
    cube.pixels().mean_axis(Axis(0)).expect("cube is non-empty")
}
