// SPDX-License-Identifier: MIT OR Apache-2.0

//! Single-file tensor archives (safetensors layout, little-endian `f32`).
//!
//! Both model weights and trained lenses use this container. String metadata
//! travels in the header's `__metadata__` map.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use safetensors::tensor::{Dtype, SafeTensorError, SafeTensors, TensorView};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Archive contents held in memory as `f32` tensors.
#[derive(Debug, Clone, Default)]
pub struct Archive {
    pub tensors: BTreeMap<String, Tensor<f32>>,
    pub metadata: BTreeMap<String, String>,
}

impl Archive {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let st = match SafeTensors::deserialize(&bytes) {
            Ok(st) => st,
            Err(SafeTensorError::MetadataIncompleteBuffer) => {
                return Err(truncation_error(path, &bytes));
            }
            Err(e) => {
                return Err(Error::Archive {
                    path: path.to_owned(),
                    detail: e.to_string(),
                })
            }
        };
        let metadata = SafeTensors::read_metadata(&bytes)
            .map(|(_, m)| m.metadata().clone().unwrap_or_default())
            .unwrap_or_default()
            .into_iter()
            .collect();
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(Error::Tensor {
                    path: path.to_owned(),
                    tensor: name,
                    detail: format!("dtype {:?}, expected F32", view.dtype()),
                });
            }
            let data: Vec<f32> = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let shape = if view.shape().is_empty() {
                vec![1]
            } else {
                view.shape().to_vec()
            };
            let t = Tensor::new(shape, data).map_err(|e| Error::Tensor {
                path: path.to_owned(),
                tensor: name.clone(),
                detail: e.to_string(),
            })?;
            tensors.insert(name, t);
        }
        Ok(Self { tensors, metadata })
    }

    /// Writes to `path` via a `.partial` sibling that is renamed on success.
    pub fn write(&self, path: &Path) -> Result<()> {
        let encoded: Vec<(String, Vec<u8>, Vec<usize>)> = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let bytes = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                (name.clone(), bytes, t.shape().to_vec())
            })
            .collect();
        let mut views = Vec::with_capacity(encoded.len());
        for (name, bytes, shape) in &encoded {
            let view = TensorView::new(Dtype::F32, shape.clone(), bytes).map_err(|e| Error::Tensor {
                path: path.to_owned(),
                tensor: name.clone(),
                detail: e.to_string(),
            })?;
            views.push((name.as_str(), view));
        }
        let metadata: HashMap<String, String> = self.metadata.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let buf = safetensors::serialize(views, Some(metadata)).map_err(|e| Error::Archive {
            path: path.to_owned(),
            detail: e.to_string(),
        })?;
        write_atomically(path, &buf)
    }

    pub fn insert<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors.insert(name.into(), t.cast());
    }

    /// Looks up a tensor and checks its shape.
    pub fn expect(&self, path: &Path, name: &str, shape: &[usize]) -> Result<&Tensor<f32>> {
        let t = self.tensors.get(name).ok_or_else(|| Error::Tensor {
            path: path.to_owned(),
            tensor: name.to_owned(),
            detail: "missing from archive".into(),
        })?;
        if t.shape() != shape {
            return Err(Error::Tensor {
                path: path.to_owned(),
                tensor: name.to_owned(),
                detail: format!("shape {:?}, expected {shape:?}", t.shape()),
            });
        }
        Ok(t)
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }
}

/// Writes `bytes` to `path.partial`, then renames over `path`.
pub fn write_atomically(path: &Path, bytes: &[u8]) -> Result<()> {
    let partial = partial_path(path);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&partial, bytes).map_err(|e| Error::io(&partial, e))?;
    fs::rename(&partial, path).map_err(|e| Error::io(path, e))
}

pub fn partial_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".partial");
    PathBuf::from(s)
}

/// The header parsed fine but the payload is short: name the first tensor
/// whose byte range runs past the end of the file.
fn truncation_error(path: &Path, bytes: &[u8]) -> Error {
    let fallback = |detail: &str| Error::Archive {
        path: path.to_owned(),
        detail: detail.to_owned(),
    };
    let Some(n) = bytes
        .get(..8)
        .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize)
    else {
        return fallback("file shorter than header length prefix");
    };
    let Some(header) = bytes.get(8..8 + n) else {
        return fallback("header truncated");
    };
    let Ok(header) = serde_json::from_slice::<BTreeMap<String, serde_json::Value>>(header) else {
        return fallback("unreadable header");
    };
    let available = bytes.len().saturating_sub(8 + n);
    let mut worst: Option<(u64, &str)> = None;
    for (name, info) in &header {
        if name == "__metadata__" {
            continue;
        }
        let begin = info["data_offsets"][0].as_u64().unwrap_or(0);
        let end = info["data_offsets"][1].as_u64().unwrap_or(0);
        if end as usize > available && worst.map_or(true, |(b, _)| begin < b) {
            worst = Some((begin, name));
        }
    }
    match worst {
        Some((_, name)) => Error::Tensor {
            path: path.to_owned(),
            tensor: name.to_owned(),
            detail: format!("data truncated (file holds {available} payload bytes)"),
        },
        None => fallback("payload length does not match header"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_then_read_preserves_tensors_and_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.safetensors");
        let mut a = Archive::default();
        a.insert(
            "x",
            &Tensor::matrix(2, 3, vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
        );
        a.insert("y", &Tensor::vector(vec![0.5f64, -0.25]));
        a.metadata.insert("layer".into(), "9".into());
        a.write(&path).unwrap();
        assert!(!partial_path(&path).exists());
        let b = Archive::read(&path).unwrap();
        assert_eq!(b.tensors["x"], a.tensors["x"]);
        assert_eq!(b.tensors["y"].data(), &[0.5, -0.25]);
        assert_eq!(b.meta("layer"), Some("9"));
    }

    #[test]
    fn truncated_payload_names_the_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.safetensors");
        let mut a = Archive::default();
        a.insert("first", &Tensor::vector(vec![1.0f32; 4]));
        a.insert("second", &Tensor::vector(vec![2.0f32; 4]));
        a.write(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let err = Archive::read(&path).unwrap_err().to_string();
        assert!(err.contains("second"), "{err}");
    }

    #[test]
    fn expect_reports_shape_mismatch() {
        let mut a = Archive::default();
        a.insert("w", &Tensor::vector(vec![1.0f32; 4]));
        let err = a.expect(Path::new("m"), "w", &[5]).unwrap_err().to_string();
        assert!(err.contains("`w`") && err.contains("expected [5]"), "{err}");
        let err = a.expect(Path::new("m"), "q", &[5]).unwrap_err().to_string();
        assert!(err.contains("`q`") && err.contains("missing"), "{err}");
    }
}
