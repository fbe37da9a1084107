use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `E x B` matrix of spectral signatures, optionally with per-band spread.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EndmemberJson", into = "EndmemberJson")]
pub struct EndmemberSet {
    pub names: Vec<String>,
    pub wavelengths: Vec<f64>,
    pub signatures: Array2<f64>,
    pub band_sigma: Option<Array2<f64>>,
}

#[derive(Clone, Serialize, Deserialize)]
struct EndmemberJson {
    names: Vec<String>,
    wavelengths: Vec<f64>,
    signatures: Vec<Vec<f64>>,
    band_sigma: Option<Vec<Vec<f64>>>,
}

fn rows_to_array(rows: &[Vec<f64>], what: &str) -> Result<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Dimension(format!("ragged {what} rows")));
    }
    Array2::from_shape_vec((rows.len(), cols), rows.concat()).map_err(|e| Error::Dimension(e.to_string()))
}

fn array_to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

impl TryFrom<EndmemberJson> for EndmemberSet {
    type Error = Error;

    fn try_from(j: EndmemberJson) -> Result<Self> {
        let signatures = rows_to_array(&j.signatures, "signature")?;
        let band_sigma = j.band_sigma.as_deref().map(|r| rows_to_array(r, "band_sigma")).transpose()?;
        Self::new(j.names, j.wavelengths, signatures, band_sigma)
    }
}

impl From<EndmemberSet> for EndmemberJson {
    fn from(e: EndmemberSet) -> Self {
        EndmemberJson {
            signatures: array_to_rows(&e.signatures),
            band_sigma: e.band_sigma.as_ref().map(array_to_rows),
            names: e.names,
            wavelengths: e.wavelengths,
        }
    }
}

impl EndmemberSet {
    pub fn new(names: Vec<String>, wavelengths: Vec<f64>, signatures: Array2<f64>, band_sigma: Option<Array2<f64>>) -> Result<Self> {
        let (e, b) = signatures.dim();
        if e == 0 {
            return Err(Error::InvalidArgument("endmember set is empty".into()));
        }
        if names.len() != e {
            return Err(Error::Dimension(format!("{} names for {e} endmembers", names.len())));
        }
        if wavelengths.len() != b {
            return Err(Error::Dimension(format!("{} wavelengths for {b} bands", wavelengths.len())));
        }
        if signatures.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument("signatures must be finite and non-negative".into()));
        }
        if let Some(sigma) = &band_sigma {
            if sigma.dim() != (e, b) {
                return Err(Error::Dimension("band_sigma shape differs from signatures".into()));
            }
            if sigma.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::InvalidArgument("band_sigma must be finite and non-negative".into()));
            }
        }
        Ok(Self {
            names,
            wavelengths,
            signatures,
            band_sigma,
        })
    }

    /// Endmembers named `endmember_0 ..`.
    pub fn unnamed(wavelengths: Vec<f64>, signatures: Array2<f64>) -> Result<Self> {
        let names = default_names(signatures.nrows());
        Self::new(names, wavelengths, signatures, None)
    }

    pub fn count(&self) -> usize {
        self.signatures.nrows()
    }

    pub fn bands(&self) -> usize {
        self.signatures.ncols()
    }

    pub fn signature(&self, e: usize) -> ArrayView1<'_, f64> {
        self.signatures.row(e)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&EndmemberJson::from(self.clone()))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let j: EndmemberJson = serde_json::from_str(text)?;
        j.try_into()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

pub fn default_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("endmember_{i}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn json_round_trip() {
        let set = EndmemberSet::new(
            vec!["soil".into(), "grass".into()],
            vec![400.0, 500.0, 600.0],
            array![[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]],
            Some(array![[0.01, 0.0, 0.02], [0.0, 0.1, 0.0]]),
        )
        .unwrap();
        assert_eq!(EndmemberSet::from_json(&set.to_json().unwrap()).unwrap(), set);
    }

    #[test]
    fn validation() {
        assert!(EndmemberSet::unnamed(vec![1.0], Array2::zeros((0, 1))).is_err());
        assert!(EndmemberSet::unnamed(vec![1.0], array![[-0.1]]).is_err());
        assert!(EndmemberSet::unnamed(vec![1.0, 2.0], array![[0.1]]).is_err());
    }
}
