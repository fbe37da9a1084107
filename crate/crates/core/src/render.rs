//! False-color RGB rendering through the CIE 1931 2° observer.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Array3, ArrayView3};

use crate::cube::HyperCube;
use crate::error::{Error, Result};

const CIE_1931_2DEG_CSV: &str = include_str!("../assets/cie1931_2deg_5nm.csv");

/// XYZ to linear sRGB (D65).
const XYZ_TO_LINEAR_SRGB: [[f64; 3]; 3] = [
    [3.2404542, -1.5371385, -0.4985314],
    [-0.9692660, 1.8760108, 0.0415560],
    [0.0556434, -0.2040259, 1.0572252],
];

/// Colour-matching functions sampled at increasing wavelengths.
#[derive(Debug, Clone, PartialEq)]
pub struct CmfTable {
    pub wavelengths: Vec<f64>,
    pub xbar: Vec<f64>,
    pub ybar: Vec<f64>,
    pub zbar: Vec<f64>,
}

impl CmfTable {
    /// The embedded CIE 1931 2° standard observer, 360–830 nm at 5 nm.
    pub fn cie1931() -> Self {
        Self::from_csv(CIE_1931_2DEG_CSV).expect("embedded CMF table is valid")
    }

    /// Parses `wavelength,xbar,ybar,zbar` rows (one header line).
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut t = CmfTable {
            wavelengths: Vec::new(),
            xbar: Vec::new(),
            ybar: Vec::new(),
            zbar: Vec::new(),
        };
        for (n, line) in text.lines().enumerate().skip(1) {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let cols: Vec<f64> = line
                .split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Metadata(format!("CMF row {n}: '{line}'")))?;
            if cols.len() != 4 {
                return Err(Error::Metadata(format!("CMF row {n} has {} columns", cols.len())));
            }
            t.wavelengths.push(cols[0]);
            t.xbar.push(cols[1]);
            t.ybar.push(cols[2]);
            t.zbar.push(cols[3]);
        }
        t.validate()?;
        Ok(t)
    }

    fn validate(&self) -> Result<()> {
        let n = self.wavelengths.len();
        if n < 2 || self.xbar.len() != n || self.ybar.len() != n || self.zbar.len() != n {
            return Err(Error::Metadata("CMF columns must have equal length >= 2".into()));
        }
        crate::cube::validate_wavelengths(&self.wavelengths, n)?;
        let negative = [&self.xbar, &self.ybar, &self.zbar]
            .iter()
            .any(|c| c.iter().any(|v| *v < 0.0));
        if negative {
            return Err(Error::Metadata("CMF values must be non-negative".into()));
        }
        Ok(())
    }

    /// Linearly interpolated `(x̄, ȳ, z̄)` at `wl`; zero outside the table.
    pub fn sample(&self, wl: f64) -> [f64; 3] {
        let w = &self.wavelengths;
        if wl < w[0] || wl > w[w.len() - 1] {
            return [0.0; 3];
        }
        let hi = w.partition_point(|&x| x < wl).max(1);
        let lo = hi - 1;
        let t = (wl - w[lo]) / (w[hi] - w[lo]);
        let lerp = |c: &[f64]| c[lo] + t * (c[hi] - c[lo]);
        [lerp(&self.xbar), lerp(&self.ybar), lerp(&self.zbar)]
    }
}

/// Per-pixel tristimulus values by trapezoidal integration over the cube's
/// wavelength grid. Bands outside the CMF support contribute zero.
pub fn spectral_to_xyz(cube: &HyperCube, cmf: &CmfTable) -> Array3<f64> {
    let wl = cube.wavelengths();
    let cmf_at: Vec<[f64; 3]> = wl.iter().map(|&w| cmf.sample(w)).collect();
    let lo = cmf.wavelengths[0];
    let hi = cmf.wavelengths[cmf.wavelengths.len() - 1];
    if wl.iter().all(|&w| w < lo || w > hi) {
        log::warn!("cube wavelengths do not overlap the CMF support; XYZ is zero");
    }
    // Trapezoid weights: band k gets half of each adjacent interval.
    let mut weight = vec![0.0; wl.len()];
    for k in 0..wl.len().saturating_sub(1) {
        let h = 0.5 * (wl[k + 1] - wl[k]);
        weight[k] += h;
        weight[k + 1] += h;
    }
    let data = cube.data();
    let (lines, samples, _) = data.dim();
    let mut xyz = Array3::<f64>::zeros((lines, samples, 3));
    for l in 0..lines {
        for s in 0..samples {
            let mut acc = [0.0; 3];
            for (b, v) in data.slice(ndarray::s![l, s, ..]).iter().enumerate() {
                let wv = weight[b] * v;
                for c in 0..3 {
                    acc[c] += wv * cmf_at[b][c];
                }
            }
            for c in 0..3 {
                xyz[[l, s, c]] = acc[c];
            }
        }
    }
    xyz
}

fn srgb_encode(v: f64) -> f64 {
    if v <= 0.003_130_8 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

/// Converts XYZ to 8-bit sRGB, normalizing linear RGB by its global maximum.
pub fn xyz_to_srgb(xyz: ArrayView3<'_, f64>) -> Result<RgbImage> {
    let (lines, samples, c) = xyz.dim();
    if c != 3 {
        return Err(Error::Dimension(format!("expected 3 XYZ channels, got {c}")));
    }
    if xyz.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite XYZ value".into()));
    }
    let mut linear = Array3::<f64>::zeros((lines, samples, 3));
    for l in 0..lines {
        for s in 0..samples {
            let p = [xyz[[l, s, 0]], xyz[[l, s, 1]], xyz[[l, s, 2]]];
            for (ch, row) in XYZ_TO_LINEAR_SRGB.iter().enumerate() {
                linear[[l, s, ch]] = row[0] * p[0] + row[1] * p[1] + row[2] * p[2];
            }
        }
    }
    let peak = linear.iter().cloned().fold(0.0f64, f64::max);
    let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
    let mut img = RgbImage::new(samples as u32, lines as u32);
    for l in 0..lines {
        for s in 0..samples {
            let px = std::array::from_fn(|ch| {
                let v = (linear[[l, s, ch]] * scale).clamp(0.0, 1.0);
                (srgb_encode(v) * 255.0).round() as u8
            });
            img.put_pixel(s as u32, l as u32, Rgb(px));
        }
    }
    Ok(img)
}

/// Renders a cube to a PNG file with the embedded CIE 1931 table.
pub fn render_rgb(cube: &HyperCube, out_path: impl AsRef<Path>) -> Result<()> {
    let img = xyz_to_srgb(spectral_to_xyz(cube, &CmfTable::cie1931()).view())?;
    save_png(&img, out_path)
}

const PLOT_SIZE: (u32, u32) = (640, 400);
const PLOT_MARGIN: u32 = 24;

/// Line plot of a predicted spectrum (blue) over a class mean (orange) and
/// its `mean ± k·sigma` band (green).
pub fn plot_endmember_comparison(predicted: &[f64], mean: &[f64], sigma: &[f64], k: f64) -> Result<RgbImage> {
    let b = mean.len();
    if predicted.len() != b || sigma.len() != b {
        return Err(Error::Dimension(format!(
            "plot series lengths {}, {b}, {}",
            predicted.len(),
            sigma.len()
        )));
    }
    if b < 2 {
        return Err(Error::InvalidArgument("plot needs at least 2 bands".into()));
    }
    let lower: Vec<f64> = mean.iter().zip(sigma).map(|(m, s)| m - k * s).collect();
    let upper: Vec<f64> = mean.iter().zip(sigma).map(|(m, s)| m + k * s).collect();
    let all = predicted.iter().chain(&lower).chain(&upper);
    if all.clone().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite value in plot series".into()));
    }
    let lo = all.clone().cloned().fold(f64::INFINITY, f64::min);
    let hi = all.cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (w, h) = PLOT_SIZE;
    let (x0, x1, y0, y1) = (PLOT_MARGIN, w - PLOT_MARGIN, PLOT_MARGIN, h - PLOT_MARGIN);
    let px = |band: f64| x0 as f64 + band / (b - 1) as f64 * (x1 - x0) as f64;
    let py = |v: f64| y1 as f64 - (v - lo) / span * (y1 - y0) as f64;
    // linear interpolation of a series at a fractional band index
    let at = |series: &[f64], t: f64| {
        let i = (t.floor() as usize).min(b - 2);
        let f = t - i as f64;
        series[i] * (1.0 - f) + series[i + 1] * f
    };
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    for x in x0..=x1 {
        let t = (x - x0) as f64 / (x1 - x0) as f64 * (b - 1) as f64;
        let (top, bottom) = (py(at(&upper, t)).round() as u32, py(at(&lower, t)).round() as u32);
        for y in top.min(bottom)..=top.max(bottom) {
            img.put_pixel(x, y, Rgb([170, 220, 170]));
        }
    }
    for x in x0..=x1 {
        img.put_pixel(x, y1, Rgb([0, 0, 0]));
    }
    for y in y0..=y1 {
        img.put_pixel(x0, y, Rgb([0, 0, 0]));
    }
    for (series, colour) in [(mean, Rgb([255, 127, 14])), (predicted, Rgb([31, 119, 180]))] {
        let steps = 8 * (x1 - x0);
        for i in 0..=steps {
            let t = i as f64 / steps as f64 * (b - 1) as f64;
            let (x, y) = (px(t).round() as u32, py(at(series, t)).round() as u32);
            for dy in 0..2 {
                img.put_pixel(x, (y + dy).min(h - 1), colour);
            }
        }
    }
    Ok(img)
}

pub fn save_png(img: &RgbImage, out_path: impl AsRef<Path>) -> Result<()> {
    let out_path = out_path.as_ref();
    if let Some(parent) = out_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save_with_format(out_path, image::ImageFormat::Png)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cube::{even_wavelengths, Units};
    use proptest::prelude::*;

    fn flat_cube(value: f64, start: f64, end: f64, bands: usize) -> HyperCube {
        let data = Array3::from_elem((1, 1, bands), value);
        HyperCube::new(data, even_wavelengths(bands, start, end), Units::Reflectance).unwrap()
    }

    #[test]
    fn table_shape() {
        let t = CmfTable::cie1931();
        assert_eq!(t.wavelengths.len(), 95);
        assert_eq!(t.wavelengths[0], 360.0);
        assert_eq!(*t.wavelengths.last().unwrap(), 830.0);
        assert_eq!(t.sample(555.0)[1], 1.0);
    }

    #[test]
    fn zero_and_out_of_support() {
        let t = CmfTable::cie1931();
        let xyz = spectral_to_xyz(&flat_cube(0.0, 400.0, 700.0, 61), &t);
        assert!(xyz.iter().all(|v| *v == 0.0));
        let xyz = spectral_to_xyz(&flat_cube(1.0, 850.0, 950.0, 21), &t);
        assert!(xyz.iter().all(|v| *v == 0.0));
        let img = xyz_to_srgb(xyz.view()).unwrap();
        assert!(img.pixels().all(|p| p.0 == [0, 0, 0]));
    }

    #[test]
    fn flat_spectrum_matches_direct_table_quadrature() {
        let t = CmfTable::cie1931();
        // Oracle: trapezoid over the raw table rows between 400 and 700 nm.
        let rows: Vec<usize> = (0..t.wavelengths.len())
            .filter(|&i| (400.0..=700.0).contains(&t.wavelengths[i]))
            .collect();
        let mut expect = [0.0; 3];
        for w in rows.windows(2) {
            let (a, b) = (w[0], w[1]);
            let h = t.wavelengths[b] - t.wavelengths[a];
            expect[0] += h * (t.xbar[a] + t.xbar[b]) / 2.0;
            expect[1] += h * (t.ybar[a] + t.ybar[b]) / 2.0;
            expect[2] += h * (t.zbar[a] + t.zbar[b]) / 2.0;
        }
        let xyz = spectral_to_xyz(&flat_cube(1.0, 400.0, 700.0, 61), &t);
        for c in 0..3 {
            approx::assert_relative_eq!(xyz[[0, 0, c]], expect[c], max_relative = 1e-12);
        }
        // Y of an equal-energy spectrum over 400-700 nm is ~106.
        assert!((xyz[[0, 0, 1]] - 106.0).abs() < 1.0);
    }

    #[test]
    fn white_point_renders_gray() {
        let xyz = Array3::from_shape_vec((1, 1, 3), vec![0.95047 * 3.0, 3.0, 1.08883 * 3.0]).unwrap();
        let px = xyz_to_srgb(xyz.view()).unwrap().get_pixel(0, 0).0;
        assert!(px.iter().all(|&c| c >= 254), "{px:?}");
    }

    #[test]
    fn doubling_is_byte_identical() {
        let xyz = Array3::from_shape_fn((3, 4, 3), |(l, s, c)| 0.1 + (l * 7 + s * 3 + c) as f64 * 0.05);
        let a = xyz_to_srgb(xyz.view()).unwrap();
        let b = xyz_to_srgb((&xyz * 2.0).view()).unwrap();
        assert_eq!(a.as_raw(), b.as_raw());
        assert!(xyz_to_srgb(Array3::zeros((2, 2, 2)).view()).is_err());
    }

    #[test]
    fn comparison_plot_colours() {
        let mean = vec![0.2, 0.4, 0.6, 0.4];
        let sigma = vec![0.05; 4];
        let img = plot_endmember_comparison(&[0.2, 0.41, 0.6, 0.4], &mean, &sigma, 1.5).unwrap();
        assert_eq!(img.dimensions(), PLOT_SIZE);
        let count = |c: [u8; 3]| img.pixels().filter(|p| p.0 == c).count();
        assert!(count([170, 220, 170]) > 1000);
        assert!(count([31, 119, 180]) > 500);
        assert!(count([255, 127, 14]) > 50);
        assert!(plot_endmember_comparison(&[0.0; 3], &mean, &sigma, 1.5).is_err());
        assert!(plot_endmember_comparison(&[f64::NAN; 4], &mean, &sigma, 1.5).is_err());
        let flat = plot_endmember_comparison(&[0.5; 4], &[0.5; 4], &[0.0; 4], 1.5).unwrap();
        assert_eq!(flat.dimensions(), PLOT_SIZE);
    }

    #[test]
    fn render_writes_one_pixel_png() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.png");
        render_rgb(&flat_cube(0.5, 400.0, 1000.0, 224), &path).unwrap();
        let img = image::open(&path).unwrap();
        assert_eq!((img.width(), img.height()), (1, 1));
    }

    proptest! {
        #[test]
        fn luminance_is_monotone(base in proptest::collection::vec(0.0f64..1.0, 30), bump in proptest::collection::vec(0.0f64..0.5, 30)) {
            let t = CmfTable::cie1931();
            let wl = even_wavelengths(30, 400.0, 1000.0);
            let a = HyperCube::new(Array3::from_shape_vec((1, 1, 30), base.clone()).unwrap(), wl.clone(), Units::Radiance).unwrap();
            let raised: Vec<f64> = base.iter().zip(&bump).map(|(x, d)| x + d).collect();
            let b = HyperCube::new(Array3::from_shape_vec((1, 1, 30), raised).unwrap(), wl, Units::Radiance).unwrap();
            prop_assert!(spectral_to_xyz(&b, &t)[[0, 0, 1]] >= spectral_to_xyz(&a, &t)[[0, 0, 1]]);
        }

        #[test]
        fn scaling_changes_bytes_by_at_most_rounding(scale in 0.01f64..100.0) {
            let xyz = Array3::from_shape_fn((4, 4, 3), |(l, s, c)| 0.2 + ((l * 5 + s * 3 + c) % 7) as f64 * 0.1);
            let a = xyz_to_srgb(xyz.view()).unwrap();
            let b = xyz_to_srgb((&xyz * scale).view()).unwrap();
            for (x, y) in a.as_raw().iter().zip(b.as_raw()) {
                prop_assert!((*x as i16 - *y as i16).abs() <= 1);
            }
        }
    }
}
