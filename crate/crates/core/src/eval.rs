//! Model-level losses and calibration-set evaluation.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{CalibrationSet, ModelGraph, Precision};
use crate::tensor::Tensor;

/// Samples per forward chunk during evaluation.
pub const EVAL_CHUNK: usize = 128;

fn softmax_row(row: &[f32]) -> Vec<f64> {
    let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_softmax_row(row: &[f32]) -> Vec<f64> {
    let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let lse = row
        .iter()
        .map(|&v| (v as f64 - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    row.iter().map(|&v| v as f64 - lse).collect()
}

fn check_logits(teacher: &Tensor, student: &Tensor) -> Result<(usize, usize)> {
    if teacher.ndim() != 2 || teacher.shape() != student.shape() {
        return Err(Error::Shape(format!(
            "distillation needs matching [B, K] outputs, got {:?} and {:?}",
            teacher.shape(),
            student.shape()
        )));
    }
    Ok((teacher.dim(0), teacher.dim(1)))
}

/// Whether an output is treated as class logits or as a regression target.
pub fn is_regression(output: &Tensor) -> bool {
    output.ndim() == 2 && output.dim(1) == 1
}

/// Label-free distillation loss and its gradient w.r.t. the student output,
/// both averaged over the batch.
///
/// For logits this is `KL(softmax(teacher) ‖ softmax(student))` at
/// temperature 1, i.e. the teacher/student cross-entropy minus the teacher
/// entropy, so it vanishes when the two agree. Single-column outputs use the
/// mean squared error instead.
pub fn distillation_loss(teacher: &Tensor, student: &Tensor) -> Result<(f64, Tensor)> {
    let (b, k) = check_logits(teacher, student)?;
    if is_regression(teacher) {
        let grad = student.sub(teacher)?.scale(2.0 / b as f32);
        return Ok((student.mse(teacher), grad));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0f32; b * k];
    for i in 0..b {
        let t = softmax_row(&teacher.data()[i * k..(i + 1) * k]);
        let log_t = log_softmax_row(&teacher.data()[i * k..(i + 1) * k]);
        let log_s = log_softmax_row(&student.data()[i * k..(i + 1) * k]);
        for j in 0..k {
            if t[j] > 0.0 {
                loss += t[j] * (log_t[j] - log_s[j]);
            }
            grad[i * k + j] = ((log_s[j].exp() - t[j]) / b as f64) as f32;
        }
    }
    Ok((loss / b as f64, Tensor::new(vec![b, k], grad)?))
}

pub fn kd_loss(teacher: &Tensor, student: &Tensor) -> Result<f64> {
    Ok(distillation_loss(teacher, student)?.0)
}

/// Mean cross-entropy against integer labels.
pub fn label_cross_entropy(logits: &Tensor, labels: &[i64]) -> Result<f64> {
    if logits.ndim() != 2 || logits.dim(0) != labels.len() {
        return Err(Error::Shape(format!(
            "{:?} logits for {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let k = logits.dim(1);
    let mut total = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        if l < 0 || l as usize >= k {
            return Err(Error::Shape(format!("label {l} outside {k} classes")));
        }
        total -= log_softmax_row(&logits.data()[i * k..(i + 1) * k])[l as usize];
    }
    Ok(total / labels.len() as f64)
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.row_len();
    (0..logits.dim(0))
        .map(|i| {
            let row = &logits.data()[i * k..(i + 1) * k];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Fraction of rows whose argmax equals `targets`.
pub fn top1(logits: &Tensor, targets: &[usize]) -> f64 {
    let pred = argmax_rows(logits);
    let hits = pred.iter().zip(targets).filter(|(a, b)| a == b).count();
    hits as f64 / targets.len().max(1) as f64
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct LayerError {
    pub layer: String,
    pub mse: f64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct MetricsReport {
    /// Distillation loss against the reference outputs, or label
    /// cross-entropy when no reference is given and labels exist.
    pub loss: f64,
    /// Top-1 accuracy against labels, when present.
    pub top1: Option<f64>,
    /// Top-1 agreement with the reference model's predictions.
    pub agreement: Option<f64>,
    /// Per conv/fc layer output MSE of the quantized model against full precision.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_layer: Option<Vec<LayerError>>,
}

/// Runs the (quantized) model over `calib`.
///
/// With `reference` (typically the full-precision teacher's outputs) the
/// loss is the distillation loss against it. Without one, labels are used if
/// present; otherwise the model's own full-precision outputs are the reference.
pub fn evaluate(
    g: &ModelGraph,
    calib: &CalibrationSet,
    reference: Option<&Tensor>,
) -> Result<MetricsReport> {
    let out = g.forward_batched(&calib.inputs, Precision::Quantized, EVAL_CHUNK)?;
    let regression = is_regression(&out);
    let top1_acc = match (&calib.labels, regression) {
        (Some(l), false) => {
            let targets: Vec<usize> = l.iter().map(|&v| v.max(0) as usize).collect();
            Some(top1(&out, &targets))
        }
        _ => None,
    };
    let (loss, agreement) = match (reference, &calib.labels) {
        (Some(r), _) => (
            kd_loss(r, &out)?,
            (!regression).then(|| top1(&out, &argmax_rows(r))),
        ),
        (None, Some(l)) if !regression => (label_cross_entropy(&out, l)?, None),
        (None, _) => {
            let r = g.forward_batched(&calib.inputs, Precision::Full, EVAL_CHUNK)?;
            (
                kd_loss(&r, &out)?,
                (!regression).then(|| top1(&out, &argmax_rows(&r))),
            )
        }
    };
    Ok(MetricsReport {
        loss,
        top1: top1_acc,
        agreement,
        per_layer: None,
    })
}

/// [`evaluate`] plus per-layer output error against the full-precision pass.
pub fn evaluate_layers(
    g: &ModelGraph,
    calib: &CalibrationSet,
    reference: Option<&Tensor>,
) -> Result<MetricsReport> {
    let mut report = evaluate(g, calib, reference)?;
    let fp = g.forward_trace(&calib.inputs, Precision::Full)?;
    let q = g.forward_trace(&calib.inputs, Precision::Quantized)?;
    report.per_layer = Some(
        g.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.is_weight_layer())
            .map(|(i, n)| LayerError {
                layer: n.id.clone(),
                mse: q.output(i).mse(fp.output(i)),
            })
            .collect(),
    );
    Ok(report)
}
