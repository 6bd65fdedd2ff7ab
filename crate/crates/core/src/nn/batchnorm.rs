use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Per-feature batch normalization with running statistics.
///
/// Running variance uses the unbiased batch variance, running mean and variance
/// are updated as `running = (1 - momentum) * running + momentum * batch`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
    pub scale: Array1<f64>,
    pub shift: Array1<f64>,
}

/// Values needed to differentiate one [`BatchNormState::apply`] call.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    mode: Mode,
    normalized: Array2<f64>,
    inv_std: Array1<f64>,
    present: Option<Array2<bool>>,
}

impl BatchNormCache {
    pub fn normalized(&self) -> &Array2<f64> {
        &self.normalized
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormGrads {
    pub scale: Array1<f64>,
    pub shift: Array1<f64>,
}

impl BatchNormState {
    pub fn new(features: usize) -> Self {
        Self {
            running_mean: Array1::zeros(features),
            running_var: Array1::ones(features),
            momentum: 0.1,
            eps: 1e-5,
            scale: Array1::ones(features),
            shift: Array1::zeros(features),
        }
    }

    pub fn features(&self) -> usize {
        self.scale.len()
    }

    /// Normalizes `x` column-wise and applies scale/shift.
    ///
    /// `present` marks usable entries; absent entries are normalized to 0,
    /// i.e. they take the column mean, and never enter batch statistics.
    /// Running statistics change only in train mode.
    pub fn apply(
        &mut self,
        x: ArrayView2<f64>,
        present: Option<ArrayView2<bool>>,
        mode: Mode,
    ) -> Result<(Array2<f64>, BatchNormCache)> {
        if mode == Mode::Eval {
            return self.apply_eval(x, present);
        }
        self.check_shapes(x, present)?;
        let f = self.features();
        let mut stats = Vec::with_capacity(f);
        for j in 0..f {
            let vals: Vec<f64> = x
                .column(j)
                .iter()
                .enumerate()
                .filter(|&(i, _)| present.as_ref().is_none_or(|p| p[[i, j]]))
                .map(|(_, &v)| v)
                .collect();
            if vals.is_empty() {
                // nothing observed for this feature in this batch
                stats.push((self.running_mean[j], self.running_var[j]));
                continue;
            }
            if vals.len() < 2 {
                return Err(Error::DegenerateBatch);
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            stats.push((mean, var));
        }
        let out = self.normalize(x, present, &stats, Mode::Train);
        let m = self.momentum;
        for (j, &(mean, var)) in stats.iter().enumerate() {
            let n = present.as_ref().map_or(x.nrows(), |p| p.column(j).iter().filter(|&&b| b).count());
            if n < 2 {
                continue;
            }
            let n = n as f64;
            self.running_mean[j] = (1.0 - m) * self.running_mean[j] + m * mean;
            self.running_var[j] = (1.0 - m) * self.running_var[j] + m * var * n / (n - 1.0);
        }
        Ok(out)
    }

    /// Eval-mode normalization with the running statistics.
    pub fn apply_eval(
        &self,
        x: ArrayView2<f64>,
        present: Option<ArrayView2<bool>>,
    ) -> Result<(Array2<f64>, BatchNormCache)> {
        self.check_shapes(x, present)?;
        let stats: Vec<(f64, f64)> = self
            .running_mean
            .iter()
            .zip(self.running_var.iter())
            .map(|(&m, &v)| (m, v))
            .collect();
        Ok(self.normalize(x, present, &stats, Mode::Eval))
    }

    fn check_shapes(&self, x: ArrayView2<f64>, present: Option<ArrayView2<bool>>) -> Result<()> {
        let f = self.features();
        if x.ncols() != f {
            return Err(Error::ShapeError(format!("batch norm over {f} features, input has {}", x.ncols())));
        }
        if let Some(p) = &present {
            if p.dim() != x.dim() {
                return Err(Error::ShapeError("mask shape differs from input".into()));
            }
        }
        Ok(())
    }

    fn normalize(
        &self,
        x: ArrayView2<f64>,
        present: Option<ArrayView2<bool>>,
        stats: &[(f64, f64)],
        mode: Mode,
    ) -> (Array2<f64>, BatchNormCache) {
        let f = self.features();
        let mut normalized = Array2::zeros(x.dim());
        let mut inv_std = Array1::zeros(f);
        for (j, &(mean, var)) in stats.iter().enumerate() {
            let s = 1.0 / (var + self.eps).sqrt();
            inv_std[j] = s;
            for i in 0..x.nrows() {
                if present.as_ref().is_none_or(|p| p[[i, j]]) {
                    normalized[[i, j]] = (x[[i, j]] - mean) * s;
                }
            }
        }
        let mut y = normalized.clone();
        for mut row in y.rows_mut() {
            for j in 0..f {
                row[j] = row[j] * self.scale[j] + self.shift[j];
            }
        }
        (
            y,
            BatchNormCache {
                mode,
                normalized,
                inv_std,
                present: present.map(|p| p.to_owned()),
            },
        )
    }

    /// Gradients w.r.t. scale, shift and input given `dL/dy`.
    pub fn backward(&self, cache: &BatchNormCache, grad_out: ArrayView2<f64>) -> Result<(BatchNormGrads, Array2<f64>)> {
        if grad_out.dim() != cache.normalized.dim() {
            return Err(Error::ShapeError("batch norm gradient shape".into()));
        }
        let f = self.features();
        let rows = grad_out.nrows();
        let is_present = |i: usize, j: usize| cache.present.as_ref().is_none_or(|p| p[[i, j]]);
        let mut dscale = Array1::zeros(f);
        let mut dshift = Array1::zeros(f);
        let mut dx = Array2::zeros(grad_out.dim());
        for j in 0..f {
            for i in 0..rows {
                dscale[j] += grad_out[[i, j]] * cache.normalized[[i, j]];
                dshift[j] += grad_out[[i, j]];
            }
            let s = cache.inv_std[j];
            let idx: Vec<usize> = (0..rows).filter(|&i| is_present(i, j)).collect();
            match cache.mode {
                Mode::Eval => {
                    for &i in &idx {
                        dx[[i, j]] = grad_out[[i, j]] * self.scale[j] * s;
                    }
                }
                Mode::Train => {
                    if idx.is_empty() {
                        continue;
                    }
                    let n = idx.len() as f64;
                    let dxhat: Vec<f64> = idx.iter().map(|&i| grad_out[[i, j]] * self.scale[j]).collect();
                    let sum_d: f64 = dxhat.iter().sum();
                    let sum_dx: f64 = idx
                        .iter()
                        .zip(&dxhat)
                        .map(|(&i, d)| d * cache.normalized[[i, j]])
                        .sum();
                    for (&i, d) in idx.iter().zip(&dxhat) {
                        dx[[i, j]] = s / n * (n * d - sum_d - cache.normalized[[i, j]] * sum_dx);
                    }
                }
            }
        }
        Ok((BatchNormGrads { scale: dscale, shift: dshift }, dx))
    }
}
