//! Named-array snapshots of component parameters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Params;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayRecord {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Array name to contents, ordered by name.
pub type NamedArrays = BTreeMap<String, ArrayRecord>;

pub fn arrays_of<P: Params>(params: &P) -> NamedArrays {
    params
        .arrays()
        .into_iter()
        .map(|a| {
            (
                a.name,
                ArrayRecord {
                    shape: a.shape,
                    values: a.values.to_vec(),
                },
            )
        })
        .collect()
}

/// Overwrite every array of `params` from `arrays`, requiring an exact match of
/// names and shapes.
pub fn fill_from_arrays<P: Params>(
    params: &mut P,
    arrays: &NamedArrays,
    component: &str,
) -> Result<()> {
    let expected: Vec<(String, Vec<usize>)> = params
        .arrays()
        .into_iter()
        .map(|a| (a.name, a.shape))
        .collect();
    if expected.len() != arrays.len() {
        return Err(Error::Shape(format!(
            "component `{component}` expects {} arrays, checkpoint has {}",
            expected.len(),
            arrays.len()
        )));
    }
    for ((name, shape), dst) in expected.into_iter().zip(params.arrays_mut()) {
        let rec = arrays
            .get(&name)
            .ok_or_else(|| Error::Shape(format!("checkpoint lacks `{component}.{name}`")))?;
        if rec.shape != shape || rec.values.len() != dst.len() {
            return Err(Error::Shape(format!(
                "`{component}.{name}` has shape {:?}, expected {shape:?}",
                rec.shape
            )));
        }
        if rec.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("{component}.{name}")));
        }
        dst.copy_from_slice(&rec.values);
    }
    Ok(())
}
