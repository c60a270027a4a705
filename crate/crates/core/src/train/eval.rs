use super::metrics::{confusion_matrix, MetricsReport};
use super::trainer::{decide, infer};
use crate::data::{Dataset, LensClass, Target};
use crate::error::{Error, Result};
use crate::model::{DfcaNet, Task};
use crate::nn::Mode;
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    /// Attack score per sample; empty when the target has no bonafide class.
    pub scores: Vec<f64>,
    pub predictions: Vec<usize>,
    pub loss: f64,
}

/// Scores `data` with a model in infer mode and summarizes the errors.
///
/// For lens classification the attack score is `1 − P(normal)` and the binary
/// rates treat every non-normal class as an attack; accuracy is the argmax
/// accuracy over all classes.
pub fn evaluate<T: Scalar>(model: &DfcaNet<T>, data: &Dataset, threshold: f64, batch_size: usize) -> Result<Evaluation> {
    if model.mode() != Some(Mode::Infer) {
        return Err(Error::InvalidArgument("evaluation needs the model in infer mode".into()));
    }
    let (loss, _, probs) = infer(model, data, batch_size)?;
    let task = model.config().task;
    let k = data.target.classes();
    match (task, &data.target) {
        (Task::Pad, Target::Binary) => {
            let scores: Vec<f64> = probs.data().iter().map(|p| p.to_f64_lossy()).collect();
            let predictions = decide(task, &probs, threshold);
            let confusion = confusion_matrix(&predictions, &data.targets, 2)?;
            Ok(Evaluation {
                report: MetricsReport::from_scores(&scores, &data.targets, threshold, confusion, None)?,
                scores,
                predictions,
                loss,
            })
        }
        (Task::Lens { classes }, Target::LensClass(list)) if classes == k => {
            let predictions = decide(task, &probs, threshold);
            let confusion = confusion_matrix(&predictions, &data.targets, k)?;
            let correct = predictions.iter().zip(&data.targets).filter(|(p, t)| p == t).count();
            let accuracy = 100.0 * correct as f64 / data.len() as f64;
            let (scores, report) = match list.iter().position(|c| *c == LensClass::Normal) {
                Some(normal) => {
                    let scores: Vec<f64> = probs.data().chunks(k).map(|row| 1.0 - row[normal].to_f64_lossy()).collect();
                    let labels: Vec<usize> = data.targets.iter().map(|&t| usize::from(t != normal)).collect();
                    let report = MetricsReport::from_scores(&scores, &labels, threshold, confusion, Some(accuracy))?;
                    (scores, report)
                }
                None => (
                    Vec::new(),
                    MetricsReport {
                        samples: data.len(),
                        threshold,
                        aa: super::metrics::round2(accuracy),
                        apcer: None,
                        npcer: None,
                        acer: None,
                        eer: None,
                        det_points: Vec::new(),
                        confusion,
                    },
                ),
            };
            Ok(Evaluation {
                report,
                scores,
                predictions,
                loss,
            })
        }
        _ => Err(Error::InvalidArgument(format!(
            "model task {task:?} does not match a dataset with {k} target classes"
        ))),
    }
}
