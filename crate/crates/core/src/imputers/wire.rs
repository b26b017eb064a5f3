//! JSON bodies of the imputation protocol.
//!
//! ```text
//! POST /impute   {"values":[1.0,null,3.0],"masks":[{"start":1,"width":1}]}
//!             -> {"imputed":[1.0,2.0,3.0]}
//! GET  /health -> {"kind":"interpolating","length":1440}
//! ```
//!
//! Missing values travel as JSON `null`. Errors are answered with a non-2xx
//! status and `{"error": "..."}`.

use serde::{Deserialize, Serialize};

use crate::dataset::{MaskSpec, MaskedSeries};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImputeRequest {
    pub values: Vec<Option<f64>>,
    pub masks: Vec<MaskSpec>,
}

impl From<&MaskedSeries> for ImputeRequest {
    fn from(m: &MaskedSeries) -> Self {
        Self {
            values: m.observed.clone(),
            masks: m.masks.clone(),
        }
    }
}

/// `imputed` is decoded leniently so that a `null` from a misbehaving server
/// is reported as a model error rather than a decoding failure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImputeResponse {
    pub imputed: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub kind: String,
    pub length: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}
