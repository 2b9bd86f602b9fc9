//! File formats: the JSON model and dataset manifests, raw heatmap grids, and netpbm
//! images. All parsers take untrusted bytes and return errors, never panic.

pub mod dataset;
pub mod grid;
pub mod model;
pub mod pnm;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Nested JSON arrays, outermost axis first.
pub(crate) fn tensor_to_json(t: &Tensor) -> Value {
    fn build(data: &[f64], shape: &[usize]) -> Value {
        match shape {
            [] => Value::from(data[0]),
            [_] => Value::Array(data.iter().map(|&v| Value::from(v)).collect()),
            [d, rest @ ..] => {
                let stride = data.len() / d;
                Value::Array(data.chunks(stride).map(|c| build(c, rest)).collect())
            }
        }
    }
    build(t.data(), t.shape())
}

/// Parse a rectangular nested array of exactly `rank` levels.
pub(crate) fn tensor_from_json(value: &Value, rank: usize, what: &str) -> Result<Tensor> {
    let mut shape = Vec::with_capacity(rank);
    let mut probe = value;
    for _ in 0..rank {
        match probe {
            Value::Array(items) if !items.is_empty() => {
                shape.push(items.len());
                probe = &items[0];
            }
            _ => {
                return Err(Error::Parse(format!(
                    "{what}: expected a non-empty {rank}-level nested array"
                )))
            }
        }
    }
    let mut data = Vec::new();
    collect(value, &shape, &mut data, what)?;
    Tensor::new(shape, data)
}

fn collect(value: &Value, shape: &[usize], out: &mut Vec<f64>, what: &str) -> Result<()> {
    match shape {
        [] => {
            let v = value
                .as_f64()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse(format!("{what}: expected a finite number, got {value}")))?;
            out.push(v);
            Ok(())
        }
        [d, rest @ ..] => match value {
            Value::Array(items) if items.len() == *d => {
                items.iter().try_for_each(|item| collect(item, rest, out, what))
            }
            _ => Err(Error::Parse(format!("{what}: ragged nested array"))),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_arrays_round_trip() {
        let t = Tensor::new(vec![2, 3, 1], vec![1.0, -2.5, 3.0, 0.1, 1e-300, 7.0]).unwrap();
        let v = tensor_to_json(&t);
        assert_eq!(v.to_string(), "[[[1.0],[-2.5],[3.0]],[[0.1],[1e-300],[7.0]]]");
        assert_eq!(tensor_from_json(&v, 3, "t").unwrap(), t);
    }

    #[test]
    fn ragged_and_wrong_rank_rejected() {
        let ragged: Value = serde_json::from_str("[[1, 2], [3]]").unwrap();
        assert!(tensor_from_json(&ragged, 2, "w").is_err());
        let flat: Value = serde_json::from_str("[1, 2]").unwrap();
        assert!(tensor_from_json(&flat, 2, "w").is_err());
        let deep: Value = serde_json::from_str("[[[1]]]").unwrap();
        assert!(tensor_from_json(&deep, 2, "w").is_err());
        let empty: Value = serde_json::from_str("[[]]").unwrap();
        assert!(tensor_from_json(&empty, 2, "w").is_err());
        let text: Value = serde_json::from_str(r#"[["a"]]"#).unwrap();
        assert!(tensor_from_json(&text, 2, "w").is_err());
    }
}
