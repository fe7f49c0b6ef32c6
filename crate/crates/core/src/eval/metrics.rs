use crate::error::{Error, Result};
use crate::pseudolabel::IGNORE;

/// `counts[g][p]` tallies elements with ground truth `g` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<Vec<u64>>,
    pub ignored: u64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![vec![0; classes]; classes],
            ignored: 0,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.ignored += other.ignored;
    }

    /// Fraction of counted elements off the diagonal.
    pub fn error_rate(&self) -> Option<f64> {
        let total = self.total();
        if total == 0 {
            return None;
        }
        let correct: u64 = (0..self.classes).map(|c| self.counts[c][c]).sum();
        Some(1.0 - correct as f64 / total as f64)
    }
}

/// Tallies `pred` against `gt`, skipping IGNORE ground truth. Every labeled
/// element needs a class prediction.
pub fn confusion(pred: &[i32], gt: &[i32], classes: usize) -> Result<ConfusionMatrix> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} ground-truth labels",
            pred.len(),
            gt.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (&p, &g) in pred.iter().zip(gt) {
        if g == IGNORE {
            cm.ignored += 1;
            continue;
        }
        let g = usize::try_from(g)
            .ok()
            .filter(|&g| g < classes)
            .ok_or_else(|| Error::Shape(format!("ground-truth label {g} outside {classes} classes")))?;
        if p < 0 || p as usize >= classes {
            return Err(Error::Shape(format!("predicted label {p} outside {classes} classes")));
        }
        cm.counts[g][p as usize] += 1;
    }
    Ok(cm)
}

/// Per-class IoU (`None` for zero-union classes) and their mean, absent when
/// no class has a union.
pub fn miou(cm: &ConfusionMatrix) -> (Vec<Option<f64>>, Option<f64>) {
    let l = cm.classes;
    let per_class: Vec<Option<f64>> = (0..l)
        .map(|c| {
            let tp = cm.counts[c][c];
            let fn_: u64 = cm.counts[c].iter().sum::<u64>() - tp;
            let fp: u64 = (0..l).map(|g| cm.counts[g][c]).sum::<u64>() - tp;
            let union = tp + fp + fn_;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    (per_class, mean)
}

/// Mean pairwise cosine similarity between distinct elements of the same
/// object and between elements of different objects, pair-weighted.
pub fn latent_separation(latents: &[f64], dim: usize, objects: &[u32]) -> Option<(f64, f64)> {
    assert_eq!(latents.len(), dim * objects.len(), "one latent row per object id");
    let mut total = vec![0.0; dim];
    let mut per_object: std::collections::BTreeMap<u32, (Vec<f64>, u64)> = Default::default();
    for (row, &o) in latents.chunks_exact(dim).zip(objects) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-12 {
            continue;
        }
        let (sum, count) = per_object.entry(o).or_insert_with(|| (vec![0.0; dim], 0));
        for ((s, t), x) in sum.iter_mut().zip(total.iter_mut()).zip(row) {
            *s += x / n;
            *t += x / n;
        }
        *count += 1;
    }
    let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    let count: u64 = per_object.values().map(|(_, c)| c).sum();
    let (mut within_sum, mut within_pairs, mut object_sq) = (0.0, 0u64, 0.0);
    for (sum, c) in per_object.values() {
        let s = sq(sum);
        object_sq += s;
        within_sum += s - *c as f64;
        within_pairs += c * c.saturating_sub(1);
    }
    let cross_pairs = count * count - per_object.values().map(|(_, c)| c * c).sum::<u64>();
    if within_pairs == 0 || cross_pairs == 0 {
        return None;
    }
    Some((
        within_sum / within_pairs as f64,
        (sq(&total) - object_sq) / cross_pairs as f64,
    ))
}
