//! Discriminative few-shot baselines on raw pixels: nearest class mean and
//! softmax regression.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TifError};
use crate::tensor::ImageTensor;
use crate::tif::argmax;
use crate::worldgen::FewShotTask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    Prototype,
    Linear,
}

impl BaselineMode {
    pub fn method_name(self) -> &'static str {
        match self {
            Self::Prototype => "baseline_prototype",
            Self::Linear => "baseline_linear",
        }
    }
}

/// Full-batch gradient descent for the linear mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearConfig {
    pub lr: f64,
    pub max_iters: usize,
    /// Stop once train accuracy reaches this value and the loss is below `loss_tol`.
    pub target_accuracy: f64,
    pub loss_tol: f64,
}

impl Default for LinearConfig {
    fn default() -> Self {
        Self {
            lr: 0.5,
            max_iters: 2000,
            target_accuracy: 0.99,
            loss_tol: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum BaselineModel {
    /// Row c is the mean training image of class c.
    Prototype { prototypes: Array2<f64> },
    Linear {
        weight: Array2<f64>,
        bias: Array1<f64>,
        train_accuracy: f64,
        iters: usize,
    },
}

fn design_matrix(images: &[&ImageTensor]) -> Array2<f64> {
    let d = images[0].shape().len();
    let mut x = Array2::zeros((images.len(), d));
    for (r, img) in images.iter().enumerate() {
        for (j, v) in img.data().iter().enumerate() {
            x[[r, j]] = f64::from(*v);
        }
    }
    x
}

fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
}

pub fn fit_baseline(
    task: &FewShotTask,
    mode: BaselineMode,
    cfg: &LinearConfig,
) -> Result<BaselineModel> {
    if task.train.is_empty() {
        return Err(TifError::InvalidArgument("empty train split".into()));
    }
    let k = task.k;
    let images: Vec<&ImageTensor> = task.train.iter().map(|s| &s.image).collect();
    for img in &images {
        images[0].check_same_shape(img)?;
    }
    let labels: Vec<usize> = task.train.iter().map(|s| s.class).collect();
    if let Some(&bad) = labels.iter().find(|&&c| c >= k) {
        return Err(TifError::IndexOutOfRange(format!(
            "class {bad} with K = {k}"
        )));
    }
    let x = design_matrix(&images);
    match mode {
        BaselineMode::Prototype => {
            let mut protos = Array2::zeros((k, x.ncols()));
            let mut counts = vec![0usize; k];
            for (row, &c) in x.rows().into_iter().zip(&labels) {
                let mut p = protos.row_mut(c);
                p += &row;
                counts[c] += 1;
            }
            for (c, &n) in counts.iter().enumerate() {
                if n == 0 {
                    return Err(TifError::InvalidArgument(format!(
                        "class {c} has no training images"
                    )));
                }
                protos.row_mut(c).mapv_inplace(|v| v / n as f64);
            }
            Ok(BaselineModel::Prototype { prototypes: protos })
        }
        BaselineMode::Linear => fit_linear(&x, &labels, k, cfg),
    }
}

fn fit_linear(
    x: &Array2<f64>,
    labels: &[usize],
    k: usize,
    cfg: &LinearConfig,
) -> Result<BaselineModel> {
    let n = x.nrows() as f64;
    let mut onehot = Array2::zeros((x.nrows(), k));
    for (r, &c) in labels.iter().enumerate() {
        onehot[[r, c]] = 1.0;
    }
    let mut weight = Array2::<f64>::zeros((k, x.ncols()));
    let mut bias = Array1::<f64>::zeros(k);
    let mut accuracy = 0.0;
    let mut iters = 0;
    while iters < cfg.max_iters {
        let mut p = x.dot(&weight.t()) + &bias;
        softmax_rows(&mut p);
        let loss = -p
            .rows()
            .into_iter()
            .zip(labels)
            .map(|(row, &c)| row[c].max(1e-300).ln())
            .sum::<f64>()
            / n;
        if !loss.is_finite() || p.iter().any(|v| !v.is_finite()) {
            return Err(TifError::Diverged {
                step: iters,
                detail: format!("linear baseline loss became {loss}"),
            });
        }
        let correct = p
            .rows()
            .into_iter()
            .zip(labels)
            .filter(|(row, &c)| argmax(row.as_slice().expect("row-major")) == c)
            .count();
        accuracy = correct as f64 / n;
        if accuracy >= cfg.target_accuracy && loss < cfg.loss_tol {
            break;
        }
        let residual = (p - &onehot) / n;
        weight.scaled_add(-cfg.lr, &residual.t().dot(x));
        bias.scaled_add(-cfg.lr, &residual.sum_axis(Axis(0)));
        iters += 1;
    }
    Ok(BaselineModel::Linear {
        weight,
        bias,
        train_accuracy: accuracy,
        iters,
    })
}

/// Nearest prototype in Euclidean distance, or the largest logit.
/// Ties go to the smaller class index.
pub fn classify_baseline(model: &BaselineModel, x: &ImageTensor) -> Result<usize> {
    let v: Array1<f64> = x.data().iter().map(|&p| f64::from(p)).collect();
    match model {
        BaselineModel::Prototype { prototypes } => {
            check_len(prototypes.ncols(), v.len())?;
            let neg_dist: Vec<f64> = prototypes
                .rows()
                .into_iter()
                .map(|p| {
                    -p.iter()
                        .zip(&v)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                })
                .collect();
            Ok(argmax(&neg_dist))
        }
        BaselineModel::Linear { weight, bias, .. } => {
            check_len(weight.ncols(), v.len())?;
            let logits = weight.dot(&v) + bias;
            Ok(argmax(logits.as_slice().expect("contiguous")))
        }
    }
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(TifError::LengthMismatch { expected, got })
    }
}
