//! On-disk formats: GZTN tensors, a PLY subset, label lists and anchor banks.

mod ply;
mod tensor;

use std::fs;
use std::path::Path;

use ndarray::Array2;

pub use ply::{parse_ply, read_ply, write_ply, PlyEncoding};
pub use tensor::{decode_tensor, encode_tensor, read_tensor, read_tensors, write_tensor, write_tensors, Tensor};

use crate::anchors::AnchorSet;
use crate::error::{Error, Result};

/// One integer label per line; blank lines are skipped.
pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(k, l)| {
            l.trim().parse::<usize>().map_err(|e| {
                Error::InvalidParameter(format!("{}:{}: bad label {:?}: {e}", path.display(), k + 1, l.trim()))
            })
        })
        .collect()
}

pub fn write_labels(path: impl AsRef<Path>, labels: &[usize]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::with_capacity(labels.len() * 3);
    for l in labels {
        text.push_str(&l.to_string());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Visual anchors, geometric anchors and densities as three tensor records.
pub fn write_anchor_bank(path: impl AsRef<Path>, anchors: &AnchorSet) -> Result<()> {
    write_tensors(
        path,
        &[
            Tensor::from_matrix(&anchors.c_v),
            Tensor::from_matrix(&anchors.c_g),
            Tensor::from_vector(&anchors.density),
        ],
    )
}

pub fn read_anchor_bank(path: impl AsRef<Path>) -> Result<AnchorSet> {
    let records = read_tensors(path)?;
    let [c_v, c_g, density] = records.as_slice() else {
        return Err(Error::DimensionMismatch(format!(
            "anchor bank holds {} tensors, expected 3",
            records.len()
        )));
    };
    let (c_v, c_g): (Array2<f64>, Array2<f64>) = (c_v.to_matrix()?, c_g.to_matrix()?);
    AnchorSet::new(c_v, c_g, density.to_vector()?)
}
