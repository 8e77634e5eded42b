use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// Mean over rows of `-ln p[row, target]`, with probabilities clamped at
/// [`super::PROB_FLOOR`] before the logarithm.
///
/// `targets` must be one-hot rows matching the shape of `probs`.
pub fn cross_entropy(g: &mut Graph, probs: Var, targets: &Tensor) -> Result<Var> {
    let (rows, cols) = g.value(probs).dims2()?;
    if targets.dims2()? != (rows, cols) {
        return Err(Error::Shape(format!(
            "targets {:?} vs probabilities {:?}",
            targets.shape(),
            g.shape(probs)
        )));
    }
    let pv = g.value(probs).values();
    for r in 0..rows {
        let row = &pv[r * cols..(r + 1) * cols];
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOLERANCE || row.iter().any(|&p| p < 0.0) {
            return Err(Error::InvalidDistribution(format!("row {r} sums to {s}")));
        }
        let t = &targets.values()[r * cols..(r + 1) * cols];
        let ones = t.iter().filter(|&&x| x == 1.0).count();
        let zeros = t.iter().filter(|&&x| x == 0.0).count();
        if ones != 1 || ones + zeros != cols {
            return Err(Error::InvalidDistribution(format!("target row {r} is not one-hot")));
        }
    }
    let logp = g.log(probs);
    let mask = g.constant(targets.clone())?;
    let picked = g.weighted_sum(mask, logp)?;
    Ok(g.scale(picked, -1.0 / rows as f64))
}

/// One-hot rows for class indices.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut v = vec![0.0; labels.len() * classes];
    for (r, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Index { index: l, len: classes });
        }
        v[r * classes + l] = 1.0;
    }
    Tensor::matrix(labels.len(), classes, v)
}

/// Cross-entropy against class indices.
pub fn cross_entropy_labels(g: &mut Graph, probs: Var, labels: &[usize]) -> Result<Var> {
    let (_, cols) = g.value(probs).dims2()?;
    let t = one_hot(labels, cols)?;
    cross_entropy(g, probs, &t)
}
