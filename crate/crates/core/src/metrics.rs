//! Per-batch normalization and the compression quality measures.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bht::{decode, encode, HtRepresentation};
use crate::error::{HtError, Result};
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMethod {
    #[default]
    None,
    MaxAbs,
    UnitVec,
    ZScore,
}

impl FromStr for NormMethod {
    type Err = HtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "maxabs" => Ok(Self::MaxAbs),
            "unitvec" => Ok(Self::UnitVec),
            "zscore" => Ok(Self::ZScore),
            other => Err(HtError::InvalidArgument(format!(
                "unknown normalization {other:?} (none, maxabs, unitvec, zscore)"
            ))),
        }
    }
}

impl fmt::Display for NormMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::MaxAbs => "maxabs",
            Self::UnitVec => "unitvec",
            Self::ZScore => "zscore",
        })
    }
}

/// `normalized = (y - shift) / scale`, one pair per field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldParams {
    pub shift: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub method: NormMethod,
    /// Mode whose slices are normalized separately; `None` treats the whole
    /// tensor as one field.
    pub field_axis: Option<usize>,
    pub fields: Vec<FieldParams>,
    /// Set when a field had zero scale and 1 was substituted.
    pub floored: bool,
}

/// Number of fields and a map from linear index to field.
fn field_layout(shape: &[usize], axis: Option<usize>) -> Result<(usize, usize)> {
    match axis {
        None => Ok((1, 1)),
        Some(k) if k < shape.len() => Ok((shape[k], shape[..k].iter().product())),
        Some(k) => Err(HtError::ModeOutOfRange {
            mode: k,
            order: shape.len(),
        }),
    }
}

fn field_of(i: usize, count: usize, stride: usize) -> usize {
    (i / stride) % count
}

pub fn normalize(
    y: &DenseTensor,
    method: NormMethod,
    field_axis: Option<usize>,
) -> Result<(DenseTensor, NormalizationParams)> {
    let (count, stride) = field_layout(y.shape(), field_axis)?;
    let mut n = vec![0usize; count];
    let mut sum = vec![0.0; count];
    let mut sum_sq = vec![0.0; count];
    let mut max_abs = vec![0.0f64; count];
    for (i, &v) in y.data().iter().enumerate() {
        let f = field_of(i, count, stride);
        n[f] += 1;
        sum[f] += v;
        sum_sq[f] += v * v;
        max_abs[f] = max_abs[f].max(v.abs());
    }
    let mut floored = false;
    let fields = (0..count)
        .map(|f| {
            let (shift, scale) = match method {
                NormMethod::None => (0.0, 1.0),
                NormMethod::MaxAbs => (0.0, max_abs[f]),
                NormMethod::UnitVec => (0.0, sum_sq[f].sqrt()),
                NormMethod::ZScore => {
                    let mean = sum[f] / n[f] as f64;
                    let var = y
                        .data()
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| field_of(*i, count, stride) == f)
                        .map(|(_, v)| (v - mean) * (v - mean))
                        .sum::<f64>()
                        / n[f] as f64;
                    (mean, var.sqrt())
                }
            };
            let scale = if scale > 0.0 {
                scale
            } else {
                floored = true;
                1.0
            };
            FieldParams { shift, scale }
        })
        .collect::<Vec<_>>();
    let data = y
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let p = fields[field_of(i, count, stride)];
            (v - p.shift) / p.scale
        })
        .collect();
    let params = NormalizationParams {
        method,
        field_axis,
        fields,
        floored,
    };
    Ok((DenseTensor::new(y.shape().to_vec(), data)?, params))
}

pub fn denormalize(y: &DenseTensor, params: &NormalizationParams) -> Result<DenseTensor> {
    let (count, stride) = field_layout(y.shape(), params.field_axis)?;
    if count != params.fields.len() {
        return Err(HtError::ShapeMismatch(format!(
            "{} fields in parameters, {count} in tensor",
            params.fields.len()
        )));
    }
    let data = y
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let p = params.fields[field_of(i, count, stride)];
            v * p.scale + p.shift
        })
        .collect();
    DenseTensor::new(y.shape().to_vec(), data)
}

/// Elements of the accumulation over stored elements.
pub fn compression_ratio(h: &HtRepresentation) -> f64 {
    let full: usize = h.extents().iter().product::<usize>() * h.accumulated();
    full as f64 / h.parameter_count() as f64
}

/// Elements of one tensor over the elements of its latent slice.
pub fn reduction_ratio(h: &HtRepresentation) -> f64 {
    let (a, b) = h.root_ranks();
    h.extents().iter().product::<usize>() as f64 / (a * b) as f64
}

/// Relative reconstruction error of one tensor (zero for a zero tensor).
pub fn relative_error(h: &HtRepresentation, y: &DenseTensor) -> Result<f64> {
    let mut shape = h.extents().to_vec();
    if y.shape() != shape.as_slice() && y.shape() != [shape.as_slice(), &[1]].concat() {
        return Err(HtError::ShapeMismatch(format!(
            "test tensor {:?} does not match extents {:?}",
            y.shape(),
            h.extents()
        )));
    }
    shape.push(1);
    let y = y.clone().into_shape(shape)?;
    let (latent, _) = encode(h, &y)?;
    let back = decode(h, &latent)?;
    let norm = y.frobenius_norm();
    if norm == 0.0 {
        return Ok(0.0);
    }
    Ok(back.sub(&y)?.frobenius_norm() / norm)
}

/// Mean per-tensor relative error over a test set; `h` is not modified.
pub fn relative_test_error(h: &HtRepresentation, tests: &[DenseTensor]) -> Result<f64> {
    if tests.is_empty() {
        return Err(HtError::InvalidArgument("empty test set".into()));
    }
    let errors = tests
        .par_iter()
        .map(|y| relative_error(h, y))
        .collect::<Result<Vec<_>>>()?;
    Ok(errors.iter().sum::<f64>() / errors.len() as f64)
}
