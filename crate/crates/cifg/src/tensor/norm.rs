//! Statistic-matching batch normalization.
//!
//! Normalizes a batch to zero mean / unit variance per dimension, then
//! rescales to a target mean and standard deviation (here: the codebook
//! embedding statistics). Training mode uses batch statistics and refreshes
//! the running ones; evaluation mode applies the frozen running statistics
//! and is a pure deterministic function.

use ndarray::{Array1, ArrayD};

use super::Tensor;
use crate::error::{Error, Result};

/// Running statistics; biased variance throughout.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(dim: usize) -> BatchNorm {
        BatchNorm {
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn dim(&self) -> usize {
        self.running_mean.len()
    }
}

/// `(x - mu) / sigma * target_std + target_mean` over `[n, d]`.
///
/// Training requires `n >= 2`; running statistics move by `momentum` toward
/// the batch statistics as a side effect.
pub fn normalize_to_stats(
    x: &Tensor,
    bn: &mut BatchNorm,
    target_mean: &Array1<f64>,
    target_std: &Array1<f64>,
    training: bool,
) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 2 || s[1] != bn.dim() {
        return Err(Error::shape(format!(
            "normalize_to_stats: [n, {}] expected, got {:?}",
            bn.dim(),
            s
        )));
    }
    if target_mean.len() != s[1] || target_std.len() != s[1] {
        return Err(Error::shape("normalize_to_stats: target stats dimension"));
    }
    if target_std.iter().any(|&v| v <= 0.0) {
        return Err(Error::Parameter(
            "normalize_to_stats: target std must be positive".into(),
        ));
    }
    let tm = Tensor::constant(target_mean.clone().into_dyn());
    let ts = Tensor::constant(target_std.clone().into_dyn());
    if training {
        if s[0] < 2 {
            return Err(Error::Data(
                "normalize_to_stats: training batch must have at least 2 rows".into(),
            ));
        }
        let mu = x.mean_axis(0)?;
        let diff = x.sub_row(&mu)?;
        let var = diff.mul(&diff)?.mean_axis(0)?;
        let denom = var.add_scalar(bn.eps).sqrt()?;
        let y = diff.div_row(&denom)?.mul_row(&ts)?.add_row(&tm)?;
        // side effect: fold batch statistics into the running ones
        let mu_v = mu.value().clone().into_dimensionality::<ndarray::Ix1>().unwrap();
        let var_v = var.value().clone().into_dimensionality::<ndarray::Ix1>().unwrap();
        let m = bn.momentum;
        bn.running_mean = &bn.running_mean * (1.0 - m) + &mu_v * m;
        bn.running_var = &bn.running_var * (1.0 - m) + &var_v * m;
        Ok(y)
    } else {
        let mu = Tensor::constant(bn.running_mean.clone().into_dyn());
        let denom = Tensor::constant(
            bn.running_var
                .mapv(|v| (v + bn.eps).sqrt())
                .into_dyn(),
        );
        x.sub_row(&mu)?.div_row(&denom)?.mul_row(&ts)?.add_row(&tm)
    }
}

/// Serialize running statistics as checkpoint entries under a prefix.
pub fn bn_snapshot(bn: &BatchNorm, prefix: &str) -> Vec<(String, ArrayD<f64>)> {
    vec![
        (format!("{prefix}/running_mean"), bn.running_mean.clone().into_dyn()),
        (format!("{prefix}/running_var"), bn.running_var.clone().into_dyn()),
    ]
}

pub fn bn_restore(
    bn: &mut BatchNorm,
    prefix: &str,
    map: &std::collections::BTreeMap<String, ArrayD<f64>>,
) -> Result<()> {
    let mean = map
        .get(&format!("{prefix}/running_mean"))
        .ok_or_else(|| Error::Data(format!("checkpoint missing {prefix}/running_mean")))?;
    let var = map
        .get(&format!("{prefix}/running_var"))
        .ok_or_else(|| Error::Data(format!("checkpoint missing {prefix}/running_var")))?;
    bn.running_mean = mean
        .clone()
        .into_dimensionality::<ndarray::Ix1>()
        .map_err(|e| Error::Data(format!("bad bn mean: {e}")))?;
    bn.running_var = var
        .clone()
        .into_dimensionality::<ndarray::Ix1>()
        .map_err(|e| Error::Data(format!("bad bn var: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use ndarray::{arr1, Array2};
    use rand::{Rng, SeedableRng};

    fn rand_matrix(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((n, d), || rng.gen_range(-2.0..2.0))
    }

    /// Normalize columns to exact zero mean and unit (biased) variance.
    fn standardized(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut x = rand_matrix(n, d, seed);
        for j in 0..d {
            let mean = x.column(j).sum() / n as f64;
            let var = x.column(j).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let std = var.sqrt();
            for i in 0..n {
                x[[i, j]] = (x[[i, j]] - mean) / std;
            }
        }
        x
    }

    #[test]
    fn affine_construction_hits_target_stats() {
        let x = standardized(16, 3, 1);
        let mut bn = BatchNorm::new(3);
        let tm = arr1(&[2.0, -1.0, 0.5]);
        let ts = arr1(&[3.0, 0.5, 1.5]);
        let y = normalize_to_stats(&Tensor::constant(x.into_dyn()), &mut bn, &tm, &ts, true).unwrap();
        let y = y.value().view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
        for j in 0..3 {
            let mean = y.column(j).sum() / 16.0;
            let var = y.column(j).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!((mean - tm[j]).abs() < 1e-9, "mean {mean} vs {}", tm[j]);
            // eps inflates the denominator a whisker; the variance lands just
            // under the target
            assert!((var.sqrt() - ts[j]).abs() < 1e-4, "std {} vs {}", var.sqrt(), ts[j]);
        }
    }

    #[test]
    fn identity_targets_are_standard_batch_norm() {
        let x = rand_matrix(8, 2, 2);
        let mut bn = BatchNorm::new(2);
        let y = normalize_to_stats(
            &Tensor::constant(x.into_dyn()),
            &mut bn,
            &arr1(&[0.0, 0.0]),
            &arr1(&[1.0, 1.0]),
            true,
        )
        .unwrap();
        let y = y.value().view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
        for j in 0..2 {
            let mean = y.column(j).sum() / 8.0;
            assert!(mean.abs() < 1e-9);
        }
    }

    #[test]
    fn constant_column_stays_finite_via_eps() {
        let x = Array2::from_elem((6, 2), 3.25);
        let mut bn = BatchNorm::new(2);
        let tm = arr1(&[1.0, -1.0]);
        let ts = arr1(&[2.0, 2.0]);
        let y = normalize_to_stats(&Tensor::constant(x.into_dyn()), &mut bn, &tm, &ts, true).unwrap();
        for (i, v) in y.value().iter().enumerate() {
            assert!(v.is_finite());
            // zero-variance column: output collapses to the target mean
            let want = if i % 2 == 0 { 1.0 } else { -1.0 };
            assert!((v - want).abs() < 1e-9);
        }
    }

    #[test]
    fn training_needs_two_rows() {
        let x = Array2::from_elem((1, 2), 1.0);
        let mut bn = BatchNorm::new(2);
        let r = normalize_to_stats(
            &Tensor::constant(x.into_dyn()),
            &mut bn,
            &arr1(&[0.0, 0.0]),
            &arr1(&[1.0, 1.0]),
            true,
        );
        assert!(r.is_err());
    }

    #[test]
    fn eval_mode_uses_frozen_stats_and_is_pure() {
        let mut bn = BatchNorm::new(2);
        bn.running_mean = arr1(&[1.0, 2.0]);
        bn.running_var = arr1(&[4.0, 9.0]);
        let x = Tensor::constant(Array2::from_elem((3, 2), 5.0).into_dyn());
        let tm = arr1(&[0.0, 0.0]);
        let ts = arr1(&[1.0, 1.0]);
        let a = normalize_to_stats(&x, &mut bn, &tm, &ts, false).unwrap();
        let b = normalize_to_stats(&x, &mut bn, &tm, &ts, false).unwrap();
        assert_eq!(a.value(), b.value());
        // (5 - 1)/2 = 2 (up to eps), (5 - 2)/3 = 1
        assert!((a.value()[[0, 0]] - 2.0).abs() < 1e-5);
        assert!((a.value()[[0, 1]] - 1.0).abs() < 1e-5);
        // running stats untouched in eval mode
        assert_eq!(bn.running_mean, arr1(&[1.0, 2.0]));
    }

    #[test]
    fn running_stats_move_with_momentum() {
        let mut bn = BatchNorm::new(1);
        let x = Array2::from_shape_vec((2, 1), vec![0.0, 2.0]).unwrap();
        normalize_to_stats(
            &Tensor::constant(x.into_dyn()),
            &mut bn,
            &arr1(&[0.0]),
            &arr1(&[1.0]),
            true,
        )
        .unwrap();
        // batch mean 1.0, biased var 1.0: running = 0.9*init + 0.1*batch
        assert!((bn.running_mean[0] - 0.1).abs() < 1e-12);
        assert!((bn.running_var[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn training_path_gradient_check() {
        let tm = arr1(&[0.5, -0.5, 1.0]);
        let ts = arr1(&[2.0, 1.0, 0.3]);
        let probe = rand_matrix(5, 3, 7).into_dyn();
        let err = grad_check(
            |p| {
                let mut bn = BatchNorm::new(3);
                let y = normalize_to_stats(&p[0], &mut bn, &tm, &ts, true)?;
                Ok(y.mul(&Tensor::constant(probe.clone()))?.sum_all())
            },
            &[rand_matrix(5, 3, 6).into_dyn()],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "bn grad err={err}");
    }
}
