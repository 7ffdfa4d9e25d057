//! Confusion matrix, mIoU and pixel accuracy.

use crate::data::{stack_images, Sample, IGNORE};
use crate::error::{Error, Result};
use crate::routing::RoutingNet;
use crate::tensor::Tensor;

/// `counts[t][p]`: pixels of true class `t` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            k: num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Count every pixel whose truth is not 255.
    pub fn update(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::shape("cm_update", format!("{} predictions vs {} labels", pred.len(), truth.len())));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            if t == IGNORE {
                continue;
            }
            let (p, t) = (p as usize, t as usize);
            if p >= self.k || t >= self.k {
                return Err(Error::InvalidArgument(format!(
                    "class pair (truth {t}, pred {p}) outside {} classes",
                    self.k
                )));
            }
            self.counts[t * self.k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::shape("ConfusionMatrix::merge", format!("{} vs {} classes", self.k, other.k)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU; `None` where the class never occurs in truth or
    /// prediction.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..self.k).map(|p| self.get(c, p)).sum();
                let col: u64 = (0..self.k).map(|t| self.get(t, c)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over classes with a non-empty union; 0 for an empty matrix.
    pub fn miou(&self) -> f64 {
        let ious: Vec<f64> = self.class_iou().into_iter().flatten().collect();
        if ious.is_empty() {
            0.0
        } else {
            ious.iter().sum::<f64>() / ious.len() as f64
        }
    }

    /// Diagonal over total; 0 for an empty matrix.
    pub fn pixel_accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let trace: u64 = (0..self.k).map(|c| self.get(c, c)).sum();
        trace as f64 / total as f64
    }
}

/// Per-pixel argmax of `[B,K,H,W]` logits, lowest class on ties.
pub fn argmax_classes(logits: &Tensor) -> Result<Vec<u8>> {
    let (b, k, h, w) = logits.dims4()?;
    if k > 256 {
        return Err(Error::InvalidArgument(format!("{k} classes do not fit a byte")));
    }
    let s = h * w;
    let d = logits.data();
    let mut out = Vec::with_capacity(b * s);
    for n in 0..b {
        for pos in 0..s {
            let mut best = 0;
            for c in 1..k {
                if d[(n * k + c) * s + pos] > d[(n * k + best) * s + pos] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub miou: f64,
    pub pixel_accuracy: f64,
}

/// Single-scale evaluation without augmentation, one image at a time.
pub fn evaluate(net: &RoutingNet, dataset: &[Sample]) -> Result<EvalResult> {
    Ok(confusion(net, dataset)?.into())
}

pub fn confusion(net: &RoutingNet, dataset: &[Sample]) -> Result<ConfusionMatrix> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    let mut cm = ConfusionMatrix::new(net.config().num_classes);
    for s in dataset {
        let logits = net.predict(&stack_images(&[s])?)?;
        cm.update(&argmax_classes(&logits)?, &s.mask)?;
    }
    Ok(cm)
}

impl From<ConfusionMatrix> for EvalResult {
    fn from(cm: ConfusionMatrix) -> Self {
        EvalResult {
            miou: cm.miou(),
            pixel_accuracy: cm.pixel_accuracy(),
        }
    }
}
