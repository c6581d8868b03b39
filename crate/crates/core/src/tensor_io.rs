//! On-disk tensors: raw little-endian floats with a JSON sidecar, a
//! named-tensor container for checkpoints, and 8-bit PNG previews.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayD, ArrayView3, ArrayViewD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::{snap_to_unit_grid, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Float32,
    Float64,
}

impl DType {
    fn of<T: Scalar>() -> Self {
        if std::mem::size_of::<T>() == 4 {
            DType::Float32
        } else {
            DType::Float64
        }
    }

    fn width(self) -> usize {
        match self {
            DType::Float32 => 4,
            DType::Float64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub byte_order: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Write via a temporary sibling and rename, so readers never observe a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Corrupt {
        path: path.into(),
        reason: e.to_string(),
    })?;
    write_atomic(path, text.as_bytes())
}

pub fn read_json<V: for<'de> Deserialize<'de>>(path: &Path) -> Result<V> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Corrupt {
        path: path.into(),
        reason: e.to_string(),
    })
}

fn encode_values<T: Scalar>(values: impl Iterator<Item = T>, out: &mut Vec<u8>) {
    for v in values {
        match DType::of::<T>() {
            DType::Float32 => out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes()),
            DType::Float64 => out.extend_from_slice(&v.to_f64_lossy().to_le_bytes()),
        }
    }
}

fn decode_values<T: Scalar>(bytes: &[u8], dtype: DType) -> Vec<T> {
    match dtype {
        DType::Float32 => bytes
            .chunks_exact(4)
            .map(|c| T::lit(f64::from(f32::from_le_bytes(c.try_into().expect("chunk of 4")))))
            .collect(),
        DType::Float64 => bytes
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("chunk of 8"))))
            .collect(),
    }
}

/// Raw tensor at `path` plus `path.json` describing it.
pub fn write_tensor<T: Scalar>(path: &Path, tensor: ArrayViewD<T>) -> Result<()> {
    let mut bytes = Vec::with_capacity(tensor.len() * DType::of::<T>().width());
    encode_values(tensor.iter().copied(), &mut bytes);
    write_atomic(path, &bytes)?;
    write_json(
        &sidecar_path(path),
        &Sidecar {
            dtype: DType::of::<T>(),
            shape: tensor.shape().to_vec(),
            byte_order: "little".into(),
        },
    )
}

pub fn read_tensor<T: Scalar>(path: &Path) -> Result<ArrayD<T>> {
    let side: Sidecar = read_json(&sidecar_path(path))?;
    let bytes = read_bytes(path)?;
    let corrupt = |reason: String| Error::Corrupt {
        path: path.into(),
        reason,
    };
    if side.byte_order != "little" {
        return Err(corrupt(format!("unsupported byte order `{}`", side.byte_order)));
    }
    let count: usize = side.shape.iter().product();
    if bytes.len() != count * side.dtype.width() {
        return Err(corrupt(format!(
            "expected {} bytes for shape {:?}, found {}",
            count * side.dtype.width(),
            side.shape,
            bytes.len()
        )));
    }
    ArrayD::from_shape_vec(IxDyn(&side.shape), decode_values(&bytes, side.dtype)).map_err(|e| corrupt(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Element offset into the data file.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContainerIndex {
    pub dtype: DType,
    pub tensors: Vec<NamedEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// `<base>.bin` with every tensor back to back and `<base>.json` indexing
/// them by name.
pub fn container_paths(base: &Path) -> (PathBuf, PathBuf) {
    (base.with_extension("bin"), base.with_extension("json"))
}

pub fn write_container<T: Scalar>(base: &Path, params: &ParamStore<T>, meta: serde_json::Value) -> Result<()> {
    let (data_path, index_path) = container_paths(base);
    let mut bytes = Vec::with_capacity(params.num_scalars() * DType::of::<T>().width());
    let mut tensors = Vec::with_capacity(params.len());
    let mut offset = 0;
    for (name, t) in params.iter() {
        tensors.push(NamedEntry {
            name: name.to_string(),
            shape: [t.nrows(), t.ncols()],
            offset,
        });
        encode_values(t.iter().copied(), &mut bytes);
        offset += t.len();
    }
    write_atomic(&data_path, &bytes)?;
    write_json(
        &index_path,
        &ContainerIndex {
            dtype: DType::of::<T>(),
            tensors,
            meta,
        },
    )
}

pub fn read_container<T: Scalar>(base: &Path) -> Result<(ParamStore<T>, serde_json::Value)> {
    let (data_path, index_path) = container_paths(base);
    let index: ContainerIndex = read_json(&index_path)?;
    let bytes = read_bytes(&data_path)?;
    let values: Vec<T> = decode_values(&bytes, index.dtype);
    let corrupt = |reason: String| Error::Corrupt {
        path: data_path.clone(),
        reason,
    };
    if bytes.len() % index.dtype.width() != 0 {
        return Err(corrupt("length is not a whole number of elements".into()));
    }
    let mut params = ParamStore::new();
    for e in index.tensors {
        let n = e.shape[0] * e.shape[1];
        let slice = values
            .get(e.offset..e.offset + n)
            .ok_or_else(|| corrupt(format!("tensor `{}` runs past the end of the data", e.name)))?;
        let t = Array2::from_shape_vec((e.shape[0], e.shape[1]), slice.to_vec()).expect("length checked");
        params.insert(e.name, t);
    }
    Ok((params, index.meta))
}

/// `3 × H × W` image in `[0, 1]` as 8-bit RGB.
pub fn write_png<T: Scalar>(path: &Path, image: ArrayView3<T>) -> Result<()> {
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(Error::invalid(format!("PNG export needs 3 channels, got {c}")));
    }
    let mut data = Vec::with_capacity(h * w * 3);
    for v in 0..h {
        for u in 0..w {
            for ch in 0..3 {
                let x = image[[ch, v, u]].to_f64_lossy().clamp(0.0, 1.0);
                data.push((x * 255.0).round() as u8);
            }
        }
    }
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let png_err = |e: png::EncodingError| Error::Corrupt {
            path: path.into(),
            reason: e.to_string(),
        };
        let mut writer = enc.write_header().map_err(png_err)?;
        writer.write_image_data(&data).map_err(png_err)?;
    }
    write_atomic(path, &buf)
}

/// Any 8/16-bit PNG as `3 × H × W` in `[0, 1]`; alpha is dropped and
/// grayscale replicated.
pub fn read_png(path: &Path) -> Result<Array3<f32>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let corrupt = |reason: String| Error::Corrupt {
        path: path.into(),
        reason,
    };
    let mut reader = decoder.read_info().map_err(|e| corrupt(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| corrupt("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| corrupt(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let stride = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(corrupt("palette was not expanded".into())),
    };
    Ok(Array3::from_shape_fn((3, h, w), |(c, v, u)| {
        let px = &buf[v * info.line_size + u * stride..];
        let k = if stride < 3 { px[0] } else { px[c] };
        snap_to_unit_grid(f32::from(k) / 255.0)
    }))
}

/// Writes each `3 × H × W` slice of `views` side by side.
pub fn write_contact_sheet<T: Scalar>(path: &Path, views: &[ArrayView3<T>]) -> Result<()> {
    if views.is_empty() {
        return Err(Error::invalid("contact sheet needs at least one view"));
    }
    let (_, h, w) = views[0].dim();
    let mut sheet = Array3::<T>::zeros((3, h, w * views.len()));
    for (i, v) in views.iter().enumerate() {
        if v.dim() != (3, h, w) {
            return Err(Error::invalid("contact sheet views differ in size"));
        }
        sheet.slice_mut(ndarray::s![.., .., i * w..(i + 1) * w]).assign(v);
    }
    write_png(path, sheet.view())
}


#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn tensor_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.f32");
        let t = Array4::from_shape_fn((2, 3, 4, 5), |(a, b, c, d)| (a * 60 + b * 20 + c * 5 + d) as f32 * 0.1f32.sqrt())
            .into_dyn();
        write_tensor(&p, t.view()).unwrap();
        assert_eq!(read_tensor::<f32>(&p).unwrap(), t);
        assert!(sidecar_path(&p).exists());
    }

    #[test]
    fn truncated_tensor_is_reported_with_its_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("y.f32");
        write_tensor(&p, Array2::<f32>::ones((4, 4)).into_dyn().view()).unwrap();
        fs::write(&p, [0u8; 10]).unwrap();
        let err = read_tensor::<f32>(&p).unwrap_err().to_string();
        assert!(err.contains("y.f32"), "{err}");
        fs::remove_file(&p).unwrap();
        let err = read_tensor::<f32>(&p).unwrap_err();
        assert!(matches!(err, Error::Io { ref path, .. } if path == &p));
    }

    #[test]
    fn container_round_trip_both_dtypes() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = ParamStore::<f64>::new();
        p.insert("a.w", Array2::from_shape_fn((3, 2), |(i, j)| (i as f64 + 0.1) / (j as f64 + 3.0)));
        p.insert("b", Array2::from_elem((1, 5), std::f64::consts::PI));
        let base = dir.path().join("ckpt");
        write_container(&base, &p, serde_json::json!({"step": 7})).unwrap();
        let (back, meta) = read_container::<f64>(&base).unwrap();
        assert_eq!(back, p);
        assert_eq!(meta["step"], 7);
        let p32: ParamStore<f32> = p.cast();
        write_container(&base, &p32, serde_json::Value::Null).unwrap();
        assert_eq!(read_container::<f32>(&base).unwrap().0, p32);
    }

    #[test]
    fn png_round_trip_on_the_8bit_grid() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.png");
        let img = Array3::from_shape_fn((3, 5, 7), |(c, v, u)| ((c * 35 + v * 7 + u) * 2) as f32 / 255.0);
        write_png(&p, img.view()).unwrap();
        let back = read_png(&p).unwrap();
        for (a, b) in img.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(read_png(&dir.path().join("missing.png")).is_err());
    }
}
