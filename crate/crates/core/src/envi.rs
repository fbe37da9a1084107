//! ENVI-style cube storage: a `key = value` text header plus a headerless
//! binary in BSQ, BIL or BIP order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::cube::{even_wavelengths, HyperCube, Units};
use crate::error::{Error, Result};

/// Wavelength range assumed when a header carries no wavelength list.
pub const DEFAULT_WAVELENGTH_RANGE: (f64, f64) = (400.0, 1000.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Interleave {
    #[default]
    Bsq,
    Bil,
    Bip,
}

impl Interleave {
    pub const ALL: [Interleave; 3] = [Interleave::Bsq, Interleave::Bil, Interleave::Bip];

    pub fn as_str(&self) -> &'static str {
        match self {
            Interleave::Bsq => "bsq",
            Interleave::Bil => "bil",
            Interleave::Bip => "bip",
        }
    }

    /// Flat file offset of element `(line, sample, band)`.
    fn offset(&self, line: usize, sample: usize, band: usize, dims: (usize, usize, usize)) -> usize {
        let (lines, samples, bands) = dims;
        match self {
            Interleave::Bsq => (band * lines + line) * samples + sample,
            Interleave::Bil => (line * bands + band) * samples + sample,
            Interleave::Bip => (line * samples + sample) * bands + band,
        }
    }
}

impl FromStr for Interleave {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bsq" => Ok(Interleave::Bsq),
            "bil" => Ok(Interleave::Bil),
            "bip" => Ok(Interleave::Bip),
            other => Err(Error::UnsupportedFormat(format!("interleave '{other}'"))),
        }
    }
}

/// ENVI `data type` codes accepted by this crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataType {
    U8,
    I16,
    F32,
    U16,
}

impl DataType {
    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            1 => Ok(DataType::U8),
            2 => Ok(DataType::I16),
            4 => Ok(DataType::F32),
            12 => Ok(DataType::U16),
            other => Err(Error::UnsupportedFormat(format!("ENVI data type code {other}"))),
        }
    }

    pub fn code(&self) -> u32 {
        match self {
            DataType::U8 => 1,
            DataType::I16 => 2,
            DataType::F32 => 4,
            DataType::U16 => 12,
        }
    }

    pub fn size(&self) -> usize {
        match self {
            DataType::U8 => 1,
            DataType::I16 | DataType::U16 => 2,
            DataType::F32 => 4,
        }
    }

    fn is_integer(&self) -> bool {
        !matches!(self, DataType::F32)
    }

    fn decode(&self, bytes: &[u8], big_endian: bool) -> f64 {
        macro_rules! num {
            ($t:ty) => {{
                let arr = bytes.try_into().expect("element width");
                if big_endian {
                    <$t>::from_be_bytes(arr) as f64
                } else {
                    <$t>::from_le_bytes(arr) as f64
                }
            }};
        }
        match self {
            DataType::U8 => bytes[0] as f64,
            DataType::I16 => num!(i16),
            DataType::U16 => num!(u16),
            DataType::F32 => num!(f32),
        }
    }

    fn encode(&self, value: f64, out: &mut Vec<u8>) -> Result<()> {
        let int_in = |lo: f64, hi: f64| -> Result<f64> {
            let r = value.round();
            if r < lo || r > hi {
                Err(Error::InvalidArgument(format!(
                    "value {value} does not fit ENVI data type {}",
                    self.code()
                )))
            } else {
                Ok(r)
            }
        };
        match self {
            DataType::U8 => out.push(int_in(0.0, u8::MAX as f64)? as u8),
            DataType::I16 => out.extend_from_slice(&(int_in(i16::MIN as f64, i16::MAX as f64)? as i16).to_le_bytes()),
            DataType::U16 => out.extend_from_slice(&(int_in(0.0, u16::MAX as f64)? as u16).to_le_bytes()),
            DataType::F32 => out.extend_from_slice(&(value as f32).to_le_bytes()),
        }
        Ok(())
    }
}

/// Parsed header fields; unknown keys are kept verbatim.
#[derive(Debug, Clone, Default)]
pub struct EnviHeader {
    pub fields: BTreeMap<String, String>,
}

impl EnviHeader {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(first) if first.trim() == "ENVI" => {}
            _ => return Err(Error::Metadata("header does not start with 'ENVI'".into())),
        }
        let mut fields = BTreeMap::new();
        let mut pending: Option<(String, String)> = None;
        for line in lines {
            if let Some((key, mut value)) = pending.take() {
                value.push(' ');
                value.push_str(line.trim());
                if value.contains('}') {
                    fields.insert(key, value);
                } else {
                    pending = Some((key, value));
                }
                continue;
            }
            let line = line.trim();
            if line.is_empty() || line.starts_with(';') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Metadata(format!("malformed header line '{line}'")));
            };
            let key = key.trim().to_ascii_lowercase();
            let value = value.trim().to_string();
            if value.starts_with('{') && !value.contains('}') {
                pending = Some((key, value));
            } else {
                fields.insert(key, value);
            }
        }
        if let Some((key, _)) = pending {
            return Err(Error::Metadata(format!("unterminated brace value for '{key}'")));
        }
        Ok(Self { fields })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.get(key).map(String::as_str)
    }

    fn required<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::Metadata(format!("header is missing '{key}'")))?;
        raw.trim()
            .parse()
            .map_err(|_| Error::Metadata(format!("cannot parse '{key}' value '{raw}'")))
    }

    /// Elements of a `{a, b, c}` list value.
    pub fn list(&self, key: &str) -> Option<Vec<String>> {
        let raw = self.get(key)?;
        let inner = raw.trim().trim_start_matches('{').trim_end_matches('}');
        Some(
            inner
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect(),
        )
    }

    fn float_list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.list(key) {
            None => Ok(None),
            Some(items) => items
                .iter()
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|_| Error::Metadata(format!("bad number '{s}' in '{key}'")))
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
        }
    }
}

/// Binary file accompanying a header: same stem with one of the usual
/// extensions, or no extension at all.
pub fn data_path_for(header_path: &Path) -> Option<PathBuf> {
    ["img", "raw", "dat", "bin", ""]
        .iter()
        .map(|ext| header_path.with_extension(ext))
        .find(|p| p.is_file() && p != header_path)
}

/// Loads a cube from an ENVI header path.
pub fn load_envi(header_path: impl AsRef<Path>) -> Result<HyperCube> {
    load_envi_with_range(header_path, DEFAULT_WAVELENGTH_RANGE)
}

/// As [`load_envi`], synthesizing wavelengths evenly over `range` (nm) when
/// the header carries none.
pub fn load_envi_with_range(header_path: impl AsRef<Path>, range: (f64, f64)) -> Result<HyperCube> {
    let header_path = header_path.as_ref();
    let text = fs::read_to_string(header_path).map_err(|e| Error::io(header_path, e))?;
    let header = EnviHeader::parse(&text)?;
    let samples: usize = header.required("samples")?;
    let lines: usize = header.required("lines")?;
    let bands: usize = header.required("bands")?;
    let dtype = DataType::from_code(header.required("data type")?)?;
    let interleave: Interleave = header
        .get("interleave")
        .ok_or_else(|| Error::Metadata("header is missing 'interleave'".into()))?
        .parse()?;
    let big_endian = match header.get("byte order").map(str::trim) {
        None | Some("0") => false,
        Some("1") => true,
        Some(other) => return Err(Error::Metadata(format!("byte order '{other}'"))),
    };
    let offset: usize = match header.get("header offset") {
        Some(_) => header.required("header offset")?,
        None => 0,
    };

    let data_path = data_path_for(header_path).ok_or_else(|| {
        Error::io(
            header_path.with_extension("img"),
            std::io::Error::new(std::io::ErrorKind::NotFound, "no binary file next to header"),
        )
    })?;
    let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let expected = samples * lines * bands * dtype.size();
    if bytes.len() < offset || bytes.len() - offset != expected {
        return Err(Error::SizeMismatch(format!(
            "{} holds {} bytes after offset {offset}, header implies {expected}",
            data_path.display(),
            bytes.len().saturating_sub(offset)
        )));
    }
    let payload = &bytes[offset..];
    let dims = (lines, samples, bands);
    let width = dtype.size();
    let data = Array3::from_shape_fn(dims, |(l, s, b)| {
        let at = interleave.offset(l, s, b, dims) * width;
        dtype.decode(&payload[at..at + width], big_endian)
    });

    let mut wavelengths = match header.float_list("wavelength")? {
        Some(w) => w,
        None => even_wavelengths(bands, range.0, range.1),
    };
    if let Some(units) = header.get("wavelength units") {
        if units.trim().to_ascii_lowercase().starts_with("micro") {
            wavelengths.iter_mut().for_each(|w| *w *= 1000.0);
        }
    }
    let units = match header.get("units") {
        Some(u) => Units::parse(u).ok_or_else(|| Error::Metadata(format!("unknown units '{u}'")))?,
        None if dtype.is_integer() => Units::RawDn,
        None => Units::Reflectance,
    };
    HyperCube::new(data, wavelengths, units)
}

/// Writes `cube` as float32 little-endian; the binary goes next to the
/// header with an `.img` extension.
pub fn save_envi(cube: &HyperCube, header_path: impl AsRef<Path>, interleave: Interleave) -> Result<()> {
    save_envi_as(cube, header_path, interleave, DataType::F32)
}

pub fn save_envi_as(cube: &HyperCube, header_path: impl AsRef<Path>, interleave: Interleave, dtype: DataType) -> Result<()> {
    let header_path = header_path.as_ref();
    let (lines, samples, bands) = (cube.lines(), cube.samples(), cube.bands());
    let dims = (lines, samples, bands);
    let data = cube.data();
    let mut flat = vec![0.0f64; lines * samples * bands];
    for ((l, s, b), &v) in data.indexed_iter() {
        flat[interleave.offset(l, s, b, dims)] = v;
    }
    let mut bytes = Vec::with_capacity(flat.len() * dtype.size());
    for v in flat {
        dtype.encode(v, &mut bytes)?;
    }

    let mut text = String::from("ENVI\n");
    let _ = writeln!(text, "description = {{hyperunmix cube}}");
    let _ = writeln!(text, "samples = {samples}");
    let _ = writeln!(text, "lines = {lines}");
    let _ = writeln!(text, "bands = {bands}");
    let _ = writeln!(text, "header offset = 0");
    let _ = writeln!(text, "file type = ENVI Standard");
    let _ = writeln!(text, "data type = {}", dtype.code());
    let _ = writeln!(text, "interleave = {}", interleave.as_str());
    let _ = writeln!(text, "byte order = 0");
    let _ = writeln!(text, "units = {}", cube.units().as_str());
    let _ = writeln!(text, "wavelength units = Nanometers");
    let list: Vec<String> = cube.wavelengths().iter().map(|w| format!("{w:?}")).collect();
    let _ = writeln!(text, "wavelength = {{{}}}", list.join(", "));

    let data_path = header_path.with_extension("img");
    if let Some(parent) = header_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(header_path, text).map_err(|e| Error::io(header_path, e))?;
    fs::write(&data_path, bytes).map_err(|e| Error::io(&data_path, e))?;
    Ok(())
}
