//! Unmixing quality metrics: RMSE, reconstruction error, spectral angle,
//! cosine similarity, endmember matching and the summary report.

use std::fmt::Write as _;

use ndarray::{ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::cube::HyperCube;
use crate::endmember::EndmemberSet;
use crate::error::{Error, Result};
use crate::mixer::AbundanceMap;

/// Largest endmember count accepted by [`match_endmembers`].
pub const MAX_MATCH_SIZE: usize = 20;

/// Root mean squared difference.
pub fn rmse(x: &[f64], x_hat: &[f64]) -> Result<f64> {
    if x.len() != x_hat.len() {
        return Err(Error::Dimension(format!("lengths {} and {}", x.len(), x_hat.len())));
    }
    if x.is_empty() {
        return Err(Error::InvalidArgument("rmse of empty vectors".into()));
    }
    let sse: f64 = x.iter().zip(x_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sse / x.len() as f64).sqrt())
}

/// Mean over pixels of the band-summed squared error.
pub fn reconstruction_error(truth: ArrayView3<'_, f64>, recon: ArrayView3<'_, f64>) -> Result<f64> {
    if truth.dim() != recon.dim() {
        return Err(Error::Dimension(format!("{:?} vs {:?}", truth.dim(), recon.dim())));
    }
    let (h, w, _) = truth.dim();
    if h * w == 0 {
        return Err(Error::InvalidArgument("empty cube".into()));
    }
    let sse: f64 = truth.iter().zip(recon.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sse / (h * w) as f64)
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("lengths {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 {
        return Err(Error::ZeroNorm(0));
    }
    if nb == 0.0 {
        return Err(Error::ZeroNorm(1));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Angle between two spectra in radians.
pub fn spectral_angle(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(cosine_similarity(a, b)?.acos())
}

/// Mean spectral angle over paired rows of two `R x B` matrices.
pub fn sad(truth: ArrayView2<'_, f64>, pred: ArrayView2<'_, f64>) -> Result<f64> {
    if truth.dim() != pred.dim() {
        return Err(Error::Dimension(format!("{:?} vs {:?}", truth.dim(), pred.dim())));
    }
    let r = truth.nrows();
    if r == 0 {
        return Err(Error::InvalidArgument("sad of zero spectra".into()));
    }
    let mut total = 0.0;
    for (i, (a, b)) in truth.rows().into_iter().zip(pred.rows()).enumerate() {
        let (a, b) = (a.to_vec(), b.to_vec());
        total += spectral_angle(&a, &b).map_err(|e| match e {
            Error::ZeroNorm(_) => Error::ZeroNorm(i),
            other => other,
        })?;
    }
    Ok(total / r as f64)
}

/// Exact minimum-total-SAD assignment; `result[pred] = truth`.
pub fn match_endmembers(predicted: &EndmemberSet, truth: &EndmemberSet) -> Result<Vec<usize>> {
    let e = predicted.count();
    if e != truth.count() {
        return Err(Error::Dimension(format!(
            "{e} predicted vs {} truth endmembers",
            truth.count()
        )));
    }
    if predicted.bands() != truth.bands() {
        return Err(Error::Dimension("endmember band counts differ".into()));
    }
    if e > MAX_MATCH_SIZE {
        return Err(Error::InvalidArgument(format!("cannot match more than {MAX_MATCH_SIZE} endmembers")));
    }
    let mut cost = vec![vec![0.0; e]; e];
    for (i, row) in cost.iter_mut().enumerate() {
        for (j, c) in row.iter_mut().enumerate() {
            *c = spectral_angle(
                predicted.signature(i).as_slice().expect("contiguous"),
                truth.signature(j).as_slice().expect("contiguous"),
            )?;
        }
    }
    Ok(min_cost_assignment(&cost))
}

/// Bitmask dynamic program: `best[mask]` is the cheapest way to give the
/// first `popcount(mask)` rows the columns in `mask`.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let e = cost.len();
    let full = 1usize << e;
    let mut best = vec![f64::INFINITY; full];
    let mut choice = vec![usize::MAX; full];
    best[0] = 0.0;
    for mask in 0..full {
        if !best[mask].is_finite() {
            continue;
        }
        let row = mask.count_ones() as usize;
        if row == e {
            continue;
        }
        for col in 0..e {
            if mask & (1 << col) != 0 {
                continue;
            }
            let next = mask | (1 << col);
            let c = best[mask] + cost[row][col];
            if c < best[next] {
                best[next] = c;
                choice[next] = col;
            }
        }
    }
    let mut perm = vec![0; e];
    let mut mask = full - 1;
    for row in (0..e).rev() {
        let col = choice[mask];
        perm[row] = col;
        mask &= !(1 << col);
    }
    perm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub rmse: f64,
    pub sad: f64,
    /// Fraction of bands of the predicted endmember inside the truth class
    /// envelope, when class spread is known.
    pub within_variance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    #[serde(rename = "mRMSE")]
    pub m_rmse: Option<f64>,
    #[serde(rename = "mSAD")]
    pub m_sad: Option<f64>,
    #[serde(rename = "RE")]
    pub re: f64,
    /// `permutation[predicted] = truth`.
    pub permutation: Vec<usize>,
    pub per_class: Vec<ClassMetrics>,
    pub epochs: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Matches endmembers, then scores abundances per class plane, endmembers
/// by spectral angle and the cube reconstruction.
pub fn evaluate(
    pred_a: &AbundanceMap,
    pred_m: &EndmemberSet,
    truth_a: &AbundanceMap,
    truth_m: &EndmemberSet,
    cube: &HyperCube,
    recon: &HyperCube,
) -> Result<EvalReport> {
    if pred_a.dim() != truth_a.dim() {
        return Err(Error::Dimension(format!(
            "abundance maps {:?} vs {:?}",
            pred_a.dim(),
            truth_a.dim()
        )));
    }
    if pred_a.class_count() != pred_m.count() || truth_a.class_count() != truth_m.count() {
        return Err(Error::Dimension("abundance planes and endmember counts differ".into()));
    }
    let permutation = match_endmembers(pred_m, truth_m)?;
    let re = reconstruction_error(cube.data(), recon.data())?;
    let e = truth_m.count();
    let mut inverse = vec![0; e];
    for (p, &t) in permutation.iter().enumerate() {
        inverse[t] = p;
    }
    let mut per_class = Vec::with_capacity(e);
    for (t, &p) in inverse.iter().enumerate() {
        let truth_plane: Vec<f64> = truth_a.values.index_axis(Axis(2), t).iter().cloned().collect();
        let pred_plane: Vec<f64> = pred_a.values.index_axis(Axis(2), p).iter().cloned().collect();
        per_class.push(ClassMetrics {
            name: truth_m.names[t].clone(),
            rmse: rmse(&truth_plane, &pred_plane)?,
            sad: spectral_angle(
                truth_m.signature(t).as_slice().expect("contiguous"),
                pred_m.signature(p).as_slice().expect("contiguous"),
            )?,
            within_variance: None,
        });
    }
    let m_rmse = per_class.iter().map(|c| c.rmse).sum::<f64>() / e as f64;
    let m_sad = per_class.iter().map(|c| c.sad).sum::<f64>() / e as f64;
    Ok(EvalReport {
        dataset: String::new(),
        m_rmse: Some(m_rmse),
        m_sad: Some(m_sad),
        re,
        permutation,
        per_class,
        epochs: 0,
    })
}

/// Report carrying only the reconstruction error.
pub fn evaluate_reconstruction(cube: &HyperCube, recon: &HyperCube) -> Result<EvalReport> {
    Ok(EvalReport {
        dataset: String::new(),
        m_rmse: None,
        m_sad: None,
        re: reconstruction_error(cube.data(), recon.data())?,
        permutation: Vec::new(),
        per_class: Vec::new(),
        epochs: 0,
    })
}

/// Published results for a U-Net style unmixer and a transformer unmixer,
/// kept for side-by-side reporting only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReferenceRow {
    pub dataset: &'static str,
    pub model: &'static str,
    pub m_rmse: f64,
    pub m_sad: f64,
    pub re: f64,
    pub epochs: usize,
}

pub const REFERENCE_ROWS: [ReferenceRow; 12] = [
    ReferenceRow { dataset: "Apex", model: "unet", m_rmse: 0.4705, m_sad: 0.1737, re: 0.0990, epochs: 1001 },
    ReferenceRow { dataset: "DC", model: "unet", m_rmse: 0.3971, m_sad: 0.3764, re: 0.0480, epochs: 1001 },
    ReferenceRow { dataset: "Samson", model: "unet", m_rmse: 0.4301, m_sad: 0.1507, re: 0.0526, epochs: 1001 },
    ReferenceRow { dataset: "Blueberry Cube 1", model: "unet", m_rmse: 0.3112, m_sad: 0.2737, re: 0.0752, epochs: 3001 },
    ReferenceRow { dataset: "Blueberry Cube 2", model: "unet", m_rmse: 0.3740, m_sad: 0.2591, re: 0.1263, epochs: 3001 },
    ReferenceRow { dataset: "Blueberry Cube 3", model: "unet", m_rmse: 0.3088, m_sad: 0.2214, re: 0.0978, epochs: 3001 },
    ReferenceRow { dataset: "Apex", model: "transformer", m_rmse: 0.5555, m_sad: 0.2025, re: 0.1048, epochs: 1000 },
    ReferenceRow { dataset: "DC", model: "transformer", m_rmse: 0.3918, m_sad: 0.3009, re: 0.0232, epochs: 1000 },
    ReferenceRow { dataset: "Samson", model: "transformer", m_rmse: 0.6031, m_sad: 0.2400, re: 0.1675, epochs: 1000 },
    ReferenceRow { dataset: "Blueberry Cube 1", model: "transformer", m_rmse: 0.4845, m_sad: 0.3951, re: 0.3012, epochs: 1000 },
    ReferenceRow { dataset: "Blueberry Cube 2", model: "transformer", m_rmse: 0.4511, m_sad: 0.4012, re: 0.2860, epochs: 1000 },
    ReferenceRow { dataset: "Blueberry Cube 3", model: "transformer", m_rmse: 0.4232, m_sad: 0.3852, re: 0.2645, epochs: 1000 },
];

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

/// Aligned text table with columns mRMSE, mSAD, RE, Epochs.
pub fn format_table(reports: &[EvalReport], with_reference: bool) -> String {
    let mut rows: Vec<[String; 5]> = reports
        .iter()
        .map(|r| {
            [
                r.dataset.clone(),
                cell(r.m_rmse),
                cell(r.m_sad),
                format!("{:.4}", r.re),
                r.epochs.to_string(),
            ]
        })
        .collect();
    if with_reference {
        rows.extend(REFERENCE_ROWS.iter().map(|r| {
            [
                format!("{} (reference {})", r.dataset, r.model),
                format!("{:.4}", r.m_rmse),
                format!("{:.4}", r.m_sad),
                format!("{:.4}", r.re),
                r.epochs.to_string(),
            ]
        }));
    }
    let header = ["Dataset", "mRMSE", "mSAD", "RE", "Epochs"];
    let mut widths = header.map(str::len);
    for row in &rows {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: [&str; 5]| {
        let _ = write!(out, "{:<w$}", cells[0], w = widths[0]);
        for (c, w) in cells.iter().zip(widths).skip(1) {
            let _ = write!(out, " | {c:>w$}");
        }
        out.push('\n');
    };
    line(&mut out, header);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    let _ = writeln!(out, "{}", rule.join("-+-"));
    for row in &rows {
        line(&mut out, [&row[0], &row[1], &row[2], &row[3], &row[4]]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2, Array3};
    use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2, FRAC_PI_4};

    #[test]
    fn rmse_cases() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[0.0; 4], &[1.0; 4]).unwrap(), 1.0);
        assert!((rmse(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 2.160247).abs() < 1e-6);
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn re_cases() {
        let a = Array3::from_elem((1, 1, 1), 1.0);
        let b = Array3::from_elem((1, 1, 1), 0.5);
        assert_eq!(reconstruction_error(a.view(), a.view()).unwrap(), 0.0);
        assert_eq!(reconstruction_error(a.view(), b.view()).unwrap(), 0.25);
        let x = Array3::from_shape_fn((2, 3, 4), |(i, j, k)| (i + 2 * j + 3 * k) as f64 * 0.1);
        let y = x.mapv(|v| v * 0.9 + 0.01);
        let tile = |a: &Array3<f64>| Array3::from_shape_fn((4, 6, 4), |(i, j, k)| a[[i % 2, j % 3, k]]);
        let base = reconstruction_error(x.view(), y.view()).unwrap();
        let tiled = reconstruction_error(tile(&x).view(), tile(&y).view()).unwrap();
        assert!((base - tiled).abs() < 1e-14);
    }

    #[test]
    fn angle_cases() {
        let a = array![[1.0, 0.0], [1.0, 0.0]];
        let b = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(sad(a.view(), a.view()).unwrap(), 0.0);
        assert!((sad(array![[1.0, 0.0]].view(), array![[0.0, 1.0]].view()).unwrap() - FRAC_PI_2).abs() < 1e-12);
        assert!((sad(a.view(), b.view()).unwrap() - FRAC_PI_4).abs() < 1e-12);
        assert!(matches!(sad(array![[1.0], [0.0]].view(), array![[1.0], [1.0]].view()), Err(Error::ZeroNorm(1))));
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine_similarity(&[1.0, 2.0], &[2.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    fn set(rows: Array2<f64>) -> EndmemberSet {
        let b = rows.ncols();
        EndmemberSet::unnamed((0..b).map(|i| i as f64).collect(), rows).unwrap()
    }

    #[test]
    fn matching_recovers_swaps() {
        let t = set(array![[1.0, 0.1, 0.1], [0.1, 1.0, 0.1], [0.1, 0.1, 1.0]]);
        assert_eq!(match_endmembers(&t, &t).unwrap(), vec![0, 1, 2]);
        let swapped = set(array![[0.1, 0.1, 1.0], [0.1, 1.0, 0.1], [1.0, 0.1, 0.1]]);
        assert_eq!(match_endmembers(&swapped, &t).unwrap(), vec![2, 1, 0]);
        let two = set(array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        assert!(match_endmembers(&two, &t).is_err());
    }

    #[test]
    fn table_layout() {
        let r = EvalReport {
            dataset: "synthetic".into(),
            m_rmse: Some(0.01),
            m_sad: None,
            re: 0.5,
            permutation: vec![0],
            per_class: vec![],
            epochs: 3,
        };
        let t = format_table(&[r], true);
        let header = t.lines().next().unwrap();
        let cols: Vec<&str> = header.split('|').map(str::trim).collect();
        assert_eq!(cols, vec!["Dataset", "mRMSE", "mSAD", "RE", "Epochs"]);
        assert!(t.contains("Samson (reference unet)"));
        assert!(t.lines().nth(2).unwrap().contains(" - "));
        assert_eq!(t.lines().count(), 2 + 1 + REFERENCE_ROWS.len());
    }
}
