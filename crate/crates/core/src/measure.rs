//! Measurement functions: scalar summaries of trained parameters.

use serde::Serialize;

use crate::data::{Dataset, Example};
use crate::error::{Error, Result};
use crate::linalg::{axpy, scale};
use crate::model::ModelFamily;

#[derive(Debug, Clone, PartialEq)]
pub enum MeasureKind {
    TestLoss(Example),
    MeanTestLoss(Dataset),
}

/// `phi(params) = scale * kind(params)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementFn {
    pub id: String,
    pub kind: MeasureKind,
    pub scale: f64,
}

/// Serializable description of a measurement, used for fingerprints.
#[derive(Serialize)]
struct MeasureFingerprint<'a> {
    id: &'a str,
    kind: &'a str,
    examples: Vec<&'a Example>,
    scale: f64,
}

impl MeasurementFn {
    pub fn test_loss(id: impl Into<String>, z: Example) -> Self {
        MeasurementFn {
            id: id.into(),
            kind: MeasureKind::TestLoss(z),
            scale: 1.0,
        }
    }

    pub fn mean_test_loss(id: impl Into<String>, data: Dataset) -> Self {
        MeasurementFn {
            id: id.into(),
            kind: MeasureKind::MeanTestLoss(data),
            scale: 1.0,
        }
    }

    pub fn scaled(mut self, c: f64) -> Self {
        self.scale *= c;
        self
    }

    pub fn measure(&self, model: &ModelFamily, params: &[f64]) -> Result<f64> {
        let raw = match &self.kind {
            MeasureKind::TestLoss(z) => model.loss(params, z)?,
            MeasureKind::MeanTestLoss(ds) => {
                let mut acc = 0.0;
                for z in ds.examples() {
                    acc += model.loss(params, z)?;
                }
                acc / ds.len() as f64
            }
        };
        let v = self.scale * raw;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite { what: "measurement" })
        }
    }

    pub fn measure_grad(&self, model: &ModelFamily, params: &[f64]) -> Result<Vec<f64>> {
        let mut g = self.unscaled_grad(model, params)?;
        scale(self.scale, &mut g);
        Ok(g)
    }

    /// Gradient of `kind(params)`, before `scale` is applied.
    pub fn unscaled_grad(&self, model: &ModelFamily, params: &[f64]) -> Result<Vec<f64>> {
        Ok(match &self.kind {
            MeasureKind::TestLoss(z) => model.grad(params, z)?,
            MeasureKind::MeanTestLoss(ds) => {
                let mut acc = vec![0.0; model.param_dim()];
                for z in ds.examples() {
                    axpy(1.0, &model.grad(params, z)?, &mut acc);
                }
                scale(1.0 / ds.len() as f64, &mut acc);
                acc
            }
        })
    }

    pub fn fingerprint_json(&self) -> String {
        let (kind, examples) = match &self.kind {
            MeasureKind::TestLoss(z) => ("test-loss", vec![z]),
            MeasureKind::MeanTestLoss(ds) => ("mean-test-loss", ds.examples().iter().collect()),
        };
        serde_json::to_string(&MeasureFingerprint {
            id: &self.id,
            kind,
            examples,
            scale: self.scale,
        })
        .expect("measurement fingerprint serializes")
    }
}
