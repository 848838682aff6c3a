//! Portable tensor file: `<stem>.json` manifest (name, row-major shape, in
//! blob order) plus `<stem>.bin`, little-endian `f32` concatenated in
//! manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureMap, FeaturePyramid};
use crate::scalar::{lit, to_f64, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: String,
    tensors: Vec<ManifestEntry>,
}

const FORMAT_TAG: &str = "f32-le-row-major";

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

pub fn write_tensors(stem: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for (name, t) in tensors {
        if t.data.len() != t.len() {
            return Err(Error::Format(format!("tensor `{name}`: shape {:?} but {} values", t.shape, t.data.len())));
        }
        for x in &t.data {
            blob.extend_from_slice(&x.to_le_bytes());
        }
        entries.push(ManifestEntry { name: name.clone(), shape: t.shape.clone() });
    }
    let manifest = Manifest { format: FORMAT_TAG.into(), tensors: entries };
    let (json, bin) = paths(stem);
    fs::write(json, serde_json::to_string_pretty(&manifest)?)?;
    fs::write(bin, blob)?;
    Ok(())
}

/// Reads every tensor, keyed by name, plus the manifest order.
pub fn read_tensors(stem: &Path) -> Result<(BTreeMap<String, Tensor>, Vec<String>)> {
    let (json, bin) = paths(stem);
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(json)?)?;
    if manifest.format != FORMAT_TAG {
        return Err(Error::Format(format!("unsupported tensor format `{}`", manifest.format)));
    }
    let blob = fs::read(bin)?;
    let total: usize = manifest.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if blob.len() != 4 * total {
        return Err(Error::Format(format!("blob has {} bytes, manifest needs {}", blob.len(), 4 * total)));
    }
    let mut map = BTreeMap::new();
    let mut order = Vec::new();
    let mut at = 0;
    for e in manifest.tensors {
        let n: usize = e.shape.iter().product();
        let data = blob[at..at + 4 * n].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        at += 4 * n;
        order.push(e.name.clone());
        if map.insert(e.name.clone(), Tensor { shape: e.shape, data }).is_some() {
            return Err(Error::Format(format!("duplicate tensor `{}`", e.name)));
        }
    }
    Ok((map, order))
}

pub fn matrix_tensor<T: Real>(m: &DMatrix<T>) -> Tensor {
    let mut data = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            data.push(to_f64(m[(r, c)]) as f32);
        }
    }
    Tensor { shape: vec![m.nrows(), m.ncols()], data }
}

/// Per-view pyramids as tensors `view{v}.level{l}` of shape `rows x cols x channels`.
pub fn pyramids_to_tensors<T: Real>(pyramids: &[FeaturePyramid<T>]) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    for (v, p) in pyramids.iter().enumerate() {
        for (l, map) in p.levels.iter().enumerate() {
            let data = map.data.iter().map(|x| to_f64(*x) as f32).collect();
            out.push((format!("view{v}.level{l}"), Tensor { shape: vec![map.rows, map.cols, map.channels], data }));
        }
    }
    out
}

/// Inverse of [`pyramids_to_tensors`]; the pixel rectangles come from the caller.
pub fn pyramids_from_tensors<T: Real>(tensors: &BTreeMap<String, Tensor>, image_sizes: &[(T, T)]) -> Result<Vec<FeaturePyramid<T>>> {
    image_sizes
        .iter()
        .enumerate()
        .map(|(v, &(w, h))| {
            let levels = (0..3)
                .map(|l| {
                    let name = format!("view{v}.level{l}");
                    let t = tensors.get(&name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
                    if t.shape.len() != 3 {
                        return Err(Error::Format(format!("`{name}` must be rank 3")));
                    }
                    let mut map = FeatureMap::zeros(l, t.shape[0], t.shape[1], t.shape[2], w, h)?;
                    map.data = t.data.iter().map(|x| lit(*x as f64)).collect();
                    Ok(map)
                })
                .collect::<Result<Vec<_>>>()?;
            FeaturePyramid::new(levels)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("w");
        let t = vec![
            ("a".to_string(), Tensor { shape: vec![2, 3], data: vec![1.0, 2.0, 3.0, 4.0, 5.0, -6.5] }),
            ("b".to_string(), Tensor { shape: vec![1], data: vec![f32::MIN_POSITIVE] }),
        ];
        write_tensors(&stem, &t).unwrap();
        let (map, order) = read_tensors(&stem).unwrap();
        assert_eq!(order, vec!["a", "b"]);
        assert_eq!(map["a"], t[0].1);
        assert_eq!(map["b"], t[1].1);
        assert_eq!(fs::read(stem.with_extension("bin")).unwrap().len(), 28);
    }

    #[test]
    fn truncated_blob_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("w");
        write_tensors(&stem, &[("a".into(), Tensor { shape: vec![4], data: vec![0.0; 4] })]).unwrap();
        fs::write(stem.with_extension("bin"), [0u8; 8]).unwrap();
        assert!(matches!(read_tensors(&stem), Err(Error::Format(_))));
    }
}
