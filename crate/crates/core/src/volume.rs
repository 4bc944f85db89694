//! Dense probability volumes and binary masks.
//!
//! Every module shares the indexing convention defined here: data is stored
//! row-major, so voxel `(z, y, x)` of a `(Z, Y, X)` volume lives at linear
//! index `z * Y * X + y * X + x` (2D: `y * X + x`). A 2D volume behaves
//! exactly like a 3D volume with a single slice.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use ndarray_npy::{ReadNpyError, ReadNpyExt, WriteNpyExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Extent of a 2D or 3D grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    zyx: [usize; 3],
    rank: usize,
}

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        let zyx = match *dims {
            [y, x] => [1, y, x],
            [z, y, x] => [z, y, x],
            _ => {
                return Err(Error::BadShape(format!(
                    "rank {} not supported, expected 2 or 3",
                    dims.len()
                )))
            }
        };
        if zyx.iter().any(|&d| d == 0) {
            return Err(Error::BadShape(format!("zero extent in {dims:?}")));
        }
        zyx.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::BadShape(format!("{dims:?} overflows")))?;
        Ok(Shape {
            zyx,
            rank: dims.len(),
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Extents as given at construction (length 2 or 3).
    pub fn dims(&self) -> &[usize] {
        &self.zyx[3 - self.rank..]
    }

    /// Extents padded to three axes; 2D shapes report `Z = 1`.
    pub fn zyx(&self) -> [usize; 3] {
        self.zyx
    }

    pub fn len(&self) -> usize {
        self.zyx.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn linear_index(&self, z: usize, y: usize, x: usize) -> usize {
        let [_, ny, nx] = self.zyx;
        (z * ny + y) * nx + x
    }

    #[inline]
    pub fn unravel(&self, index: usize) -> [usize; 3] {
        let [_, ny, nx] = self.zyx;
        [index / (ny * nx), (index / nx) % ny, index % nx]
    }

    /// Coordinates of `index` with the volume's own rank.
    pub fn coords(&self, index: usize) -> Vec<usize> {
        self.unravel(index)[3 - self.rank..].to_vec()
    }
}

/// Per-voxel lesion probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVolume {
    shape: Shape,
    data: Vec<f64>,
}

impl ProbabilityVolume {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::BadShape(format!(
                "shape {:?} needs {} values, got {}",
                shape.dims(),
                shape.len(),
                data.len()
            )));
        }
        if let Some((index, &value)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::ValueOutOfRange { index, value });
        }
        Ok(ProbabilityVolume { shape, data })
    }

    pub fn from_dims(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::new(Shape::new(dims)?, data)
    }

    pub fn zeros(shape: Shape) -> Self {
        ProbabilityVolume {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, index: usize) -> f64 {
        self.data[index]
    }

    /// Returns a copy with one voxel replaced.
    pub fn with_value(&self, index: usize, value: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::ValueOutOfRange { index, value });
        }
        let mut data = self.data.clone();
        data[index] = value;
        Ok(ProbabilityVolume {
            shape: self.shape,
            data,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    shape: Shape,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(shape: Shape, data: Vec<bool>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::BadShape(format!(
                "mask shape {:?} needs {} values, got {}",
                shape.dims(),
                shape.len(),
                data.len()
            )));
        }
        Ok(BinaryMask { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawHeader {
    shape: Vec<usize>,
    dtype: String,
    #[serde(default = "c_order")]
    order: String,
}

fn c_order() -> String {
    "C".to_string()
}

enum Format {
    Npy,
    Raw { bin: PathBuf, header: PathBuf },
}

fn detect_format(path: &Path) -> Result<Format> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("npy") => Ok(Format::Npy),
        Some("bin") | Some("json") => Ok(Format::Raw {
            bin: path.with_extension("bin"),
            header: path.with_extension("json"),
        }),
        _ => Err(Error::UnsupportedFormat(format!(
            "{}: expected a .npy file or a .bin/.json raw pair",
            path.display()
        ))),
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::unreadable(path, e))
}

fn read_header(path: &Path) -> Result<RawHeader> {
    let text = read_bytes(path)?;
    let header: RawHeader = serde_json::from_slice(&text)
        .map_err(|e| Error::UnsupportedFormat(format!("{}: {e}", path.display())))?;
    if header.order != "C" {
        return Err(Error::UnsupportedFormat(format!(
            "{}: order {:?}, only C order is supported",
            path.display(),
            header.order
        )));
    }
    Ok(header)
}

fn raw_payload<'a, const W: usize>(
    bytes: &'a [u8],
    shape: &Shape,
    path: &Path,
) -> Result<impl Iterator<Item = [u8; W]> + 'a> {
    if bytes.len() != shape.len() * W {
        return Err(Error::BadShape(format!(
            "{}: shape {:?} needs {} values of {W} bytes, payload holds {} bytes",
            path.display(),
            shape.dims(),
            shape.len(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(W)
        .map(|c| c.try_into().expect("chunk width")))
}

fn npy_error(path: &Path, err: ReadNpyError) -> Error {
    match err {
        ReadNpyError::Io(e) => Error::unreadable(path, e),
        ReadNpyError::MissingData | ReadNpyError::ExtraBytes(_) => {
            Error::BadShape(format!("{}: {err}", path.display()))
        }
        other => Error::UnsupportedFormat(format!("{}: {other}", path.display())),
    }
}

fn npy_array<T: ndarray_npy::ReadableElement>(
    bytes: &[u8],
) -> std::result::Result<ArrayD<T>, ReadNpyError> {
    ArrayD::<T>::read_npy(Cursor::new(bytes))
}

fn standard_array<T: Clone>(arr: ArrayD<T>, path: &Path) -> Result<(Shape, Vec<T>)> {
    if !arr.is_standard_layout() {
        return Err(Error::UnsupportedFormat(format!(
            "{}: Fortran-ordered arrays are not supported",
            path.display()
        )));
    }
    let shape = Shape::new(arr.shape())?;
    Ok((shape, arr.into_raw_vec_and_offset().0))
}

/// Loads a probability volume from `.npy` (`<f4`/`<f8`) or a raw
/// `.bin` + `.json` pair. Single-precision input is widened.
pub fn load_volume(path: impl AsRef<Path>) -> Result<ProbabilityVolume> {
    let path = path.as_ref();
    match detect_format(path)? {
        Format::Npy => {
            let bytes = read_bytes(path)?;
            let (shape, data) = match npy_array::<f64>(&bytes) {
                Ok(arr) => standard_array(arr, path)?,
                Err(ReadNpyError::WrongDescriptor(_)) => {
                    let arr = npy_array::<f32>(&bytes).map_err(|e| npy_error(path, e))?;
                    let (shape, data) = standard_array(arr, path)?;
                    (shape, data.into_iter().map(f64::from).collect())
                }
                Err(e) => return Err(npy_error(path, e)),
            };
            ProbabilityVolume::new(shape, data)
        }
        Format::Raw { bin, header } => {
            let head = read_header(&header)?;
            let shape = Shape::new(&head.shape)?;
            let bytes = read_bytes(&bin)?;
            let data: Vec<f64> = match head.dtype.as_str() {
                "f8" | "<f8" => raw_payload::<8>(&bytes, &shape, &bin)?
                    .map(f64::from_le_bytes)
                    .collect(),
                "f4" | "<f4" => raw_payload::<4>(&bytes, &shape, &bin)?
                    .map(|b| f64::from(f32::from_le_bytes(b)))
                    .collect(),
                other => {
                    return Err(Error::UnsupportedFormat(format!(
                        "{}: dtype {other:?}, expected f4 or f8",
                        header.display()
                    )))
                }
            };
            ProbabilityVolume::new(shape, data)
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::unwritable(path, e))
}

fn write_header(path: &Path, shape: &Shape, dtype: &str) -> Result<()> {
    let header = RawHeader {
        shape: shape.dims().to_vec(),
        dtype: dtype.to_string(),
        order: c_order(),
    };
    let text = serde_json::to_vec(&header).expect("header serializes");
    write_file(path, &text)
}

/// Writes `vol` as 64-bit floats; the format follows the file extension.
pub fn save_volume(vol: &ProbabilityVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match detect_format(path)? {
        Format::Npy => {
            let arr = ArrayD::from_shape_vec(IxDyn(vol.shape.dims()), vol.data.clone())
                .expect("shape matches data");
            let mut buf = Vec::new();
            arr.write_npy(&mut buf)
                .map_err(|e| Error::unwritable(path, e))?;
            write_file(path, &buf)
        }
        Format::Raw { bin, header } => {
            let bytes: Vec<u8> = vol.data.iter().flat_map(|v| v.to_le_bytes()).collect();
            write_file(&bin, &bytes)?;
            write_header(&header, &vol.shape, "f8")
        }
    }
}

/// Loads a boolean mask from `.npy` (`|b1`) or a raw `.bin` + `.json` pair
/// holding one byte (0 or 1) per voxel.
pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    match detect_format(path)? {
        Format::Npy => {
            let bytes = read_bytes(path)?;
            let arr = npy_array::<bool>(&bytes).map_err(|e| npy_error(path, e))?;
            let (shape, data) = standard_array(arr, path)?;
            BinaryMask::new(shape, data)
        }
        Format::Raw { bin, header } => {
            let head = read_header(&header)?;
            if !matches!(head.dtype.as_str(), "u1" | "|u1" | "b1" | "|b1") {
                return Err(Error::UnsupportedFormat(format!(
                    "{}: mask dtype {:?}, expected u1",
                    header.display(),
                    head.dtype
                )));
            }
            let shape = Shape::new(&head.shape)?;
            let bytes = read_bytes(&bin)?;
            let data = raw_payload::<1>(&bytes, &shape, &bin)?
                .enumerate()
                .map(|(i, [b])| match b {
                    0 => Ok(false),
                    1 => Ok(true),
                    _ => Err(Error::UnsupportedFormat(format!(
                        "{}: mask byte {b} at index {i}",
                        bin.display()
                    ))),
                })
                .collect::<Result<Vec<_>>>()?;
            BinaryMask::new(shape, data)
        }
    }
}

pub fn save_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match detect_format(path)? {
        Format::Npy => {
            let arr = ArrayD::from_shape_vec(IxDyn(mask.shape.dims()), mask.data.clone())
                .expect("shape matches data");
            let mut buf = Vec::new();
            arr.write_npy(&mut buf)
                .map_err(|e| Error::unwritable(path, e))?;
            write_file(path, &buf)
        }
        Format::Raw { bin, header } => {
            let bytes: Vec<u8> = mask.data.iter().map(|&b| u8::from(b)).collect();
            write_file(&bin, &bytes)?;
            write_header(&header, &mask.shape, "u1")
        }
    }
}
