//! Closed-form least-squares probes and pooled R².

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Affine map `y ≈ x @ coef + intercept` fitted by ordinary least squares.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    coef: DMatrix<f64>,
}

fn design(x: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = x.len();
    let p = x.first().map_or(0, Vec::len);
    if x.iter().any(|r| r.len() != p) {
        return Err(Error::shape("ragged probe inputs"));
    }
    Ok(DMatrix::from_fn(n, p + 1, |i, j| if j == p { 1.0 } else { x[i][j] }))
}

fn targets(y: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let q = y.first().map_or(0, Vec::len);
    if y.iter().any(|r| r.len() != q) {
        return Err(Error::shape("ragged probe targets"));
    }
    Ok(DMatrix::from_fn(y.len(), q, |i, j| y[i][j]))
}

impl LinearProbe {
    pub fn fit(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<Self> {
        if x.len() != y.len() || x.len() < 2 {
            return Err(Error::contract(format!(
                "probe needs >= 2 aligned samples, got {} inputs and {} targets",
                x.len(),
                y.len()
            )));
        }
        let a = design(x)?;
        let b = targets(y)?;
        let coef = a
            .svd(true, true)
            .solve(&b, 1e-10)
            .map_err(|e| Error::numeric(format!("least squares failed: {e}")))?;
        Ok(LinearProbe { coef })
    }

    pub fn predict(&self, x: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let a = design(x)?;
        if a.ncols() != self.coef.nrows() {
            return Err(Error::shape("probe input width differs from fit"));
        }
        let p = a * &self.coef;
        Ok((0..p.nrows()).map(|i| p.row(i).iter().copied().collect()).collect())
    }

    /// Pooled `1 - ΣSSE / ΣSST` over all target dimensions.
    pub fn r2(&self, x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
        let pred = self.predict(x)?;
        pooled_r2(&pred, y)
    }
}

/// Pooled coefficient of determination, centring each column on its own mean.
pub fn pooled_r2(pred: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    if pred.len() != y.len() || y.is_empty() {
        return Err(Error::contract("r2 needs aligned, non-empty samples"));
    }
    let q = y[0].len();
    let n = y.len() as f64;
    let mut sse = 0.0;
    let mut sst = 0.0;
    for j in 0..q {
        let mean = y.iter().map(|r| r[j]).sum::<f64>() / n;
        for (p, t) in pred.iter().zip(y) {
            sse += (t[j] - p[j]).powi(2);
            sst += (t[j] - mean).powi(2);
        }
    }
    if sst <= 0.0 {
        return Err(Error::numeric("r2 undefined for constant targets"));
    }
    Ok(1.0 - sse / sst)
}

/// Fits on the first pair of sets and scores on the second.
pub fn probe_r2(
    train_x: &[Vec<f64>],
    train_y: &[Vec<f64>],
    eval_x: &[Vec<f64>],
    eval_y: &[Vec<f64>],
) -> Result<f64> {
    LinearProbe::fit(train_x, train_y)?.r2(eval_x, eval_y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_affine_map() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, (i * i % 7) as f64]).collect();
        let y: Vec<Vec<f64>> = x.iter().map(|r| vec![2.0 * r[0] - r[1] + 3.0]).collect();
        let p = LinearProbe::fit(&x, &y).unwrap();
        assert!((p.r2(&x, &y).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mean_prediction_is_zero() {
        let y = vec![vec![1.0], vec![3.0]];
        let pred = vec![vec![2.0], vec![2.0]];
        assert_eq!(pooled_r2(&pred, &y).unwrap(), 0.0);
    }
}
