//! JSON checkpoints: a config block plus named tensors.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorRecord {
    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }

    pub fn to_tensor(&self, name: &str) -> Result<Tensor> {
        let [rows, cols] = match self.shape[..] {
            [r, c] => [r, c],
            [n] => [1, n],
            [] => [1, 1],
            _ => {
                return Err(Error::Contract(format!(
                    "tensor `{name}` has unsupported rank {}",
                    self.shape.len()
                )))
            }
        };
        Tensor::from_vec(rows, cols, self.data.clone()).map_err(|e| Error::Contract(format!("tensor `{name}`: {e}")))
    }
}

/// Optimizer and data-order position, for bit-exact resumption.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub adam_step: u64,
    /// Epoch in progress (0-based).
    pub epoch: usize,
    /// Graphs of the current epoch already consumed.
    pub cursor: usize,
    /// Summed training loss of the current epoch so far.
    #[serde(default)]
    pub loss_sum: f64,
    /// Lowest selection loss seen at an epoch end.
    #[serde(default)]
    pub best_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: serde_json::Value,
    pub tensors: BTreeMap<String, TensorRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<TrainState>,
}

impl Checkpoint {
    pub fn new(config: serde_json::Value, tensors: &BTreeMap<String, Tensor>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            config,
            tensors: tensors
                .iter()
                .map(|(k, t)| (k.clone(), TensorRecord::from_tensor(t)))
                .collect(),
            state: None,
        }
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("checkpoint has no tensor `{name}`")))?
            .to_tensor(name)
    }

    /// Every tensor whose name starts with `prefix`, prefix kept.
    pub fn tensors_with_prefix(&self, prefix: &str) -> Result<BTreeMap<String, Tensor>> {
        self.tensors
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, r)| Ok((k.clone(), r.to_tensor(k)?)))
            .collect()
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let ckpt: Self = serde_json::from_str(text)?;
        if ckpt.format_version != FORMAT_VERSION {
            return Err(Error::Contract(format!(
                "unsupported checkpoint format_version {}",
                ckpt.format_version
            )));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "w".to_string(),
            Tensor::from_vec(2, 2, vec![0.1, -1.0 / 3.0, 1e-300, std::f64::consts::PI]).unwrap(),
        );
        let mut ckpt = Checkpoint::new(serde_json::json!({"layers": 2}), &tensors);
        ckpt.state = Some(TrainState {
            adam_step: 7,
            epoch: 1,
            cursor: 3,
            loss_sum: 0.1 + 0.2,
            best_loss: Some(1.0 / 3.0),
        });
        let back = Checkpoint::from_json_str(&ckpt.to_json_string().unwrap()).unwrap();
        assert_eq!(back, ckpt);
        let w = back.tensor("w").unwrap();
        for (a, b) in w.data().iter().zip(tensors["w"].data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn layout_matches_documented_shape() {
        let mut tensors = BTreeMap::new();
        tensors.insert("b".to_string(), Tensor::from_vec(1, 2, vec![1.0, 2.0]).unwrap());
        let text = Checkpoint::new(serde_json::json!({}), &tensors)
            .to_json_string()
            .unwrap();
        assert_eq!(
            text,
            r#"{"format_version":1,"config":{},"tensors":{"b":{"shape":[1,2],"data":[1.0,2.0]}}}"#
        );
    }

    #[test]
    fn rejects_bad_version_and_data_length() {
        let bad = r#"{"format_version":2,"config":{},"tensors":{}}"#;
        assert!(Checkpoint::from_json_str(bad).is_err());
        let short = r#"{"format_version":1,"config":{},"tensors":{"b":{"shape":[2,2],"data":[1.0]}}}"#;
        let ckpt = Checkpoint::from_json_str(short).unwrap();
        assert!(ckpt.tensor("b").is_err());
    }
}
