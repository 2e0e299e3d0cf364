use serde::{Deserialize, Serialize};

use crate::data::dataset::Dataset;
use crate::error::{Error, Result};

/// Pearson correlation coefficient. Undefined (an error) for constant input.
pub fn pearson_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Invalid(format!(
            "pearson: need equal lengths >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Invalid(
            "pearson: constant input has no correlation".into(),
        ));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

pub fn label_correlation(a: &[u8], b: &[u8]) -> Result<f64> {
    let fa: Vec<f64> = a.iter().map(|&v| f64::from(v)).collect();
    let fb: Vec<f64> = b.iter().map(|&v| f64::from(v)).collect();
    pearson_correlation(&fa, &fb)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEntry {
    pub task_a: String,
    pub task_b: String,
    pub coefficient: f64,
}

/// Pairwise label correlations for every unordered task pair, in task order.
pub fn correlation_table(data: &Dataset, tasks: &[String]) -> Result<Vec<CorrelationEntry>> {
    let mut out = Vec::new();
    for (i, a) in tasks.iter().enumerate() {
        for b in &tasks[i + 1..] {
            out.push(CorrelationEntry {
                task_a: a.clone(),
                task_b: b.clone(),
                coefficient: label_correlation(data.labels(a)?, data.labels(b)?)?,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_and_complement() {
        let x = [0u8, 1, 1, 0, 1];
        let nx: Vec<u8> = x.iter().map(|v| 1 - v).collect();
        assert!((label_correlation(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert!((label_correlation(&x, &nx).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_is_an_error() {
        assert!(pearson_correlation(&[1.0, 1.0, 1.0], &[0.0, 1.0, 2.0]).is_err());
        assert!(pearson_correlation(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn matches_textbook_value() {
        // cross products sum to 8, squares to 10 and 10
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [2.0, 1.0, 4.0, 3.0, 5.0];
        let r = pearson_correlation(&a, &b).unwrap();
        assert!((r - 0.8).abs() < 1e-12);
    }
}
