//! Nearest-endmember classification, per-class spectral statistics and
//! outlier resampling used to build ground truth from field data.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cube::{HyperCube, Units};
use crate::endmember::EndmemberSet;
use crate::envi::{load_envi, save_envi_as, DataType, Interleave};
use crate::error::{Error, Result};
use crate::metrics::rmse;

/// Default width of the per-band acceptance envelope, in standard deviations.
pub const DEFAULT_SIGMA_FACTOR: f64 = 1.5;

/// Relative slack absorbing rounding in the class mean.
const ENVELOPE_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMap {
    pub labels: Array2<usize>,
    pub class_names: Vec<String>,
    /// RMSE of each pixel to its assigned endmember.
    pub rmse_map: Array2<f64>,
}

#[derive(Serialize, Deserialize)]
struct ClassMapSidecar {
    class_names: Vec<String>,
}

impl ClassMap {
    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.labels.dim()
    }

    /// Writes a single-band uint8 ENVI file plus `<stem>.json` with class
    /// names. The RMSE map is not persisted.
    pub fn save(&self, header_path: impl AsRef<Path>) -> Result<()> {
        let header_path = header_path.as_ref();
        if self.class_count() > 256 {
            return Err(Error::InvalidArgument("class maps hold at most 256 classes".into()));
        }
        let (h, w) = self.labels.dim();
        let data = Array3::from_shape_fn((h, w, 1), |(l, s, _)| self.labels[[l, s]] as f64);
        let cube = HyperCube::new(data, vec![0.0], Units::RawDn)?;
        save_envi_as(&cube, header_path, Interleave::Bsq, DataType::U8)?;
        let sidecar = sidecar_path(header_path);
        let json = serde_json::to_string_pretty(&ClassMapSidecar {
            class_names: self.class_names.clone(),
        })?;
        fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))
    }

    pub fn load(header_path: impl AsRef<Path>) -> Result<Self> {
        let header_path = header_path.as_ref();
        let cube = load_envi(header_path)?;
        if cube.bands() != 1 {
            return Err(Error::Dimension(format!("class map has {} bands", cube.bands())));
        }
        let sidecar = sidecar_path(header_path);
        let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let meta: ClassMapSidecar = serde_json::from_str(&text)?;
        let labels = cube.data().index_axis(ndarray::Axis(2), 0).mapv(|v| v as usize);
        if let Some(bad) = labels.iter().find(|&&l| l >= meta.class_names.len()) {
            return Err(Error::Metadata(format!("label {bad} without a class name")));
        }
        let rmse_map = Array2::zeros(labels.dim());
        Ok(Self {
            labels,
            class_names: meta.class_names,
            rmse_map,
        })
    }
}

pub(crate) fn sidecar_path(header_path: &Path) -> PathBuf {
    header_path.with_extension("json")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    pub mean: Array2<f64>,
    /// Population standard deviation per class and band.
    pub sigma: Array2<f64>,
    pub count: Vec<usize>,
}

impl ClassStats {
    /// Stats as an endmember set: class means with `band_sigma` filled.
    pub fn to_endmember_set(&self, names: Vec<String>, wavelengths: Vec<f64>) -> Result<EndmemberSet> {
        EndmemberSet::new(names, wavelengths, self.mean.clone(), Some(self.sigma.clone()))
    }

    /// Recovers stats from an endmember set carrying `band_sigma`.
    pub fn from_endmember_set(set: &EndmemberSet) -> Result<Self> {
        let sigma = set
            .band_sigma
            .clone()
            .ok_or_else(|| Error::InvalidArgument("endmember set has no band_sigma".into()))?;
        Ok(Self {
            mean: set.signatures.clone(),
            sigma,
            count: vec![0; set.count()],
        })
    }

    /// Per-band envelope test `|x - mean| <= k sigma`.
    pub fn band_within(&self, class: usize, band: usize, value: f64, k: f64) -> bool {
        let m = self.mean[[class, band]];
        (value - m).abs() <= k * self.sigma[[class, band]] + ENVELOPE_SLACK * m.abs().max(1.0)
    }

    pub fn pixel_within(&self, class: usize, spectrum: ArrayView1<'_, f64>, k: f64) -> bool {
        spectrum.iter().enumerate().all(|(b, &v)| self.band_within(class, b, v, k))
    }
}

/// Labels each pixel with the endmember of lowest RMSE; ties go to the
/// lowest index.
pub fn classify_cube(cube: &HyperCube, endmembers: &EndmemberSet) -> Result<ClassMap> {
    if cube.bands() != endmembers.bands() {
        return Err(Error::Dimension(format!(
            "cube has {} bands, endmembers {}",
            cube.bands(),
            endmembers.bands()
        )));
    }
    let (h, w) = (cube.lines(), cube.samples());
    let mut labels = Array2::zeros((h, w));
    let mut rmse_map = Array2::zeros((h, w));
    for l in 0..h {
        for s in 0..w {
            let px = cube.pixel(l, s);
            let mut best = (0usize, f64::INFINITY);
            for e in 0..endmembers.count() {
                let d = rmse(px.as_slice().expect("contiguous"), endmembers.signature(e).as_slice().expect("contiguous"))?;
                if d < best.1 {
                    best = (e, d);
                }
            }
            labels[[l, s]] = best.0;
            rmse_map[[l, s]] = best.1;
        }
    }
    Ok(ClassMap {
        labels,
        class_names: endmembers.names.clone(),
        rmse_map,
    })
}

fn check_shapes(cube: &HyperCube, classmap: &ClassMap) -> Result<()> {
    if classmap.dim() != (cube.lines(), cube.samples()) {
        return Err(Error::Dimension(format!(
            "class map {:?} vs cube {}x{}",
            classmap.dim(),
            cube.lines(),
            cube.samples()
        )));
    }
    if let Some(bad) = classmap.labels.iter().find(|&&l| l >= classmap.class_count()) {
        return Err(Error::Dimension(format!("label {bad} >= class count {}", classmap.class_count())));
    }
    Ok(())
}

/// Per-class band means and population standard deviations.
pub fn class_statistics(cube: &HyperCube, classmap: &ClassMap) -> Result<ClassStats> {
    check_shapes(cube, classmap)?;
    let (e, b) = (classmap.class_count(), cube.bands());
    let mut sum = Array2::<f64>::zeros((e, b));
    let mut count = vec![0usize; e];
    for ((l, s), &c) in classmap.labels.indexed_iter() {
        let mut row = sum.row_mut(c);
        row += &cube.pixel(l, s);
        count[c] += 1;
    }
    let mut mean = sum;
    for (c, &n) in count.iter().enumerate() {
        if n == 0 {
            log::warn!("class {} ({}) has no pixels", c, classmap.class_names[c]);
        } else {
            mean.row_mut(c).mapv_inplace(|v| v / n as f64);
        }
    }
    let mut var = Array2::<f64>::zeros((e, b));
    for ((l, s), &c) in classmap.labels.indexed_iter() {
        for (band, &v) in cube.pixel(l, s).iter().enumerate() {
            var[[c, band]] += (v - mean[[c, band]]).powi(2);
        }
    }
    for (c, &n) in count.iter().enumerate() {
        if n > 0 {
            var.row_mut(c).mapv_inplace(|v| v / n as f64);
        }
    }
    Ok(ClassStats {
        mean,
        sigma: var.mapv(f64::sqrt),
        count,
    })
}

/// Replaces pixels outside their class's `k`-sigma envelope (in any band)
/// with a uniformly drawn in-envelope pixel of the same class.
pub fn resample_outliers(cube: &HyperCube, classmap: &ClassMap, stats: &ClassStats, k: f64, seed: u64) -> Result<HyperCube> {
    if !(k > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma factor must be positive, got {k}")));
    }
    check_shapes(cube, classmap)?;
    if stats.mean.dim() != (classmap.class_count(), cube.bands()) {
        return Err(Error::Dimension("class statistics do not match class map and cube".into()));
    }
    let e = classmap.class_count();
    let mut inliers: Vec<Vec<(usize, usize)>> = vec![Vec::new(); e];
    let mut outliers = Vec::new();
    for ((l, s), &c) in classmap.labels.indexed_iter() {
        if stats.pixel_within(c, cube.pixel(l, s), k) {
            inliers[c].push((l, s));
        } else {
            outliers.push((l, s, c));
        }
    }
    for &(_, _, c) in &outliers {
        if inliers[c].is_empty() {
            return Err(Error::EmptyClass {
                id: c,
                name: classmap.class_names[c].clone(),
            });
        }
    }
    log::info!("resampling {} of {} pixels", outliers.len(), cube.pixel_count());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let src = cube.data();
    let mut data = src.to_owned();
    for (l, s, c) in outliers {
        let (sl, ss) = inliers[c][rng.gen_range(0..inliers[c].len())];
        data.slice_mut(ndarray::s![l, s, ..]).assign(&src.slice(ndarray::s![sl, ss, ..]));
    }
    cube.with_data(data, cube.units())
}

/// Fraction of bands where `candidate` lies inside the class envelope.
pub fn within_variance_check(candidate: &[f64], stats: &ClassStats, class_id: usize, k: f64) -> Result<f64> {
    let (e, b) = stats.mean.dim();
    if class_id >= e {
        return Err(Error::InvalidArgument(format!("class id {class_id} >= {e}")));
    }
    if candidate.len() != b {
        return Err(Error::Dimension(format!("candidate has {} bands, stats {b}", candidate.len())));
    }
    let inside = candidate
        .iter()
        .enumerate()
        .filter(|(band, &v)| stats.band_within(class_id, *band, v, k))
        .count();
    Ok(inside as f64 / b as f64)
}
