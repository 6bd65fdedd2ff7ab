use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::batchnorm::BatchNormState;
use super::dense::{Activation, DenseLayer, DenseNet};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// One affine layer: `shape` is `[in, out]`, `weights` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub shape: [usize; 2],
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormRecord {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_momentum() -> f64 {
    0.1
}

fn default_eps() -> f64 {
    1e-5
}

/// Plain network checkpoint: layers, optional batch norm and modality order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkCheckpoint {
    pub format_version: u32,
    pub layers: Vec<LayerRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batchnorm: Option<BatchNormRecord>,
    #[serde(default)]
    pub modality_order: Vec<String>,
}

pub fn net_to_records(net: &DenseNet) -> Vec<LayerRecord> {
    net.layers()
        .iter()
        .map(|l| LayerRecord {
            shape: [l.input_dim(), l.output_dim()],
            weights: l.weight.iter().copied().collect(),
            bias: l.bias.to_vec(),
            activation: l.activation,
        })
        .collect()
}

pub fn net_from_records(records: &[LayerRecord]) -> Result<DenseNet> {
    let layers = records
        .iter()
        .map(|r| {
            let weight = Array2::from_shape_vec((r.shape[0], r.shape[1]), r.weights.clone())
                .map_err(|e| Error::ShapeError(format!("layer weights: {e}")))?;
            Ok(DenseLayer {
                weight,
                bias: Array1::from(r.bias.clone()),
                activation: r.activation,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    DenseNet::from_layers(layers)
}

impl From<&BatchNormState> for BatchNormRecord {
    fn from(bn: &BatchNormState) -> Self {
        Self {
            mean: bn.running_mean.to_vec(),
            var: bn.running_var.to_vec(),
            scale: bn.scale.to_vec(),
            shift: bn.shift.to_vec(),
            momentum: bn.momentum,
            eps: bn.eps,
        }
    }
}

impl TryFrom<&BatchNormRecord> for BatchNormState {
    type Error = Error;

    fn try_from(r: &BatchNormRecord) -> Result<Self> {
        let n = r.mean.len();
        if r.var.len() != n || r.scale.len() != n || r.shift.len() != n {
            return Err(Error::ShapeError("batch norm record lengths differ".into()));
        }
        if r.var.iter().any(|&v| v < 0.0) {
            return Err(Error::Invalid("negative running variance".into()));
        }
        Ok(BatchNormState {
            running_mean: Array1::from(r.mean.clone()),
            running_var: Array1::from(r.var.clone()),
            momentum: r.momentum,
            eps: r.eps,
            scale: Array1::from(r.scale.clone()),
            shift: Array1::from(r.shift.clone()),
        })
    }
}

impl NetworkCheckpoint {
    pub fn new(net: &DenseNet, batchnorm: Option<&BatchNormState>, modality_order: Vec<String>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            layers: net_to_records(net),
            batchnorm: batchnorm.map(BatchNormRecord::from),
            modality_order,
        }
    }

    pub fn network(&self) -> Result<DenseNet> {
        check_version(self.format_version)?;
        net_from_records(&self.layers)
    }
}

pub fn check_version(v: u32) -> Result<()> {
    if v != FORMAT_VERSION {
        return Err(Error::Parse(format!("unsupported format_version {v}")));
    }
    Ok(())
}
