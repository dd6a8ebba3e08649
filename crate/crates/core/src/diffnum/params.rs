use alloc::{format, string::String, vec::Vec};

use super::tape::Tensor;
use crate::{Error, Result};

/// A tensor with a name and shape, stored row-major.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn from_tensor(name: impl Into<String>, t: &Tensor) -> Self {
        let data = (0..t.nrows())
            .flat_map(|i| (0..t.ncols()).map(move |j| (i, j)))
            .map(|ij| t[ij])
            .collect();
        Self {
            name: name.into(),
            rows: t.nrows(),
            cols: t.ncols(),
            data,
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::dim("named tensor data", self.rows * self.cols, self.data.len()));
        }
        Ok(Tensor::from_row_slice(self.rows, self.cols, &self.data))
    }
}

/// Types whose trainable state can be exported and restored by name.
pub trait Parameterized {
    fn named_tensors(&self) -> Vec<NamedTensor>;

    /// Restores every tensor; names and shapes must match exactly.
    fn load_named(&mut self, tensors: &[NamedTensor]) -> Result<()>;
}

/// Copies `tensors` into `targets` by name, checking shapes.
pub(crate) fn load_into(targets: &mut [(String, &mut Tensor)], tensors: &[NamedTensor]) -> Result<()> {
    if targets.len() != tensors.len() {
        return Err(Error::dim("checkpoint tensors", targets.len(), tensors.len()));
    }
    for (name, t) in targets.iter_mut() {
        let src = tensors
            .iter()
            .find(|n| n.name == *name)
            .ok_or_else(|| Error::InvalidInput(format!("checkpoint lacks tensor `{name}`")))?;
        if (src.rows, src.cols) != t.shape() {
            return Err(Error::InvalidInput(format!(
                "tensor `{name}` has shape {}x{}, expected {}x{}",
                src.rows,
                src.cols,
                t.nrows(),
                t.ncols()
            )));
        }
        **t = src.to_tensor()?;
    }
    Ok(())
}
