//! Contrastive objectives.
//!
//! The core loss is a masked, decoupled contrastive objective over a batch
//! of paired audio/image embeddings: per row, the log-ratio between the
//! related-pair (`M = 1`) exponential mass and the unrelated-pair (`M = 0`)
//! mass, averaged over both retrieval directions. The denominator excludes
//! positives entirely, so the value can be negative.
//!
//! The combined objectives are plain linear combinations of branch losses
//! with weights (λ_p, λ_c, λ_q).

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Loss combination weights; defaults follow the training recipe
/// (λ_c = λ_p = 1.0, λ_q = 0.25).
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub lambda_p: f64,
    pub lambda_c: f64,
    pub lambda_q: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_p: 1.0,
            lambda_c: 1.0,
            lambda_q: 0.25,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_p < 0.0 || self.lambda_c < 0.0 || self.lambda_q < 0.0 {
            return Err(Error::Parameter("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Matched audio/image embeddings with the relatedness indicator.
pub struct PairBatch {
    pub audio_emb: Tensor,
    pub image_emb: Tensor,
    pub relatedness: Array2<f64>,
    pub tau: Tensor,
}

impl PairBatch {
    pub fn new(
        audio_emb: Tensor,
        image_emb: Tensor,
        relatedness: Array2<f64>,
        tau: Tensor,
    ) -> Result<PairBatch> {
        let (a, i) = (audio_emb.shape(), image_emb.shape());
        if a.len() != 2 || i.len() != 2 || a != i {
            return Err(Error::shape(format!("pair batch embeddings {:?} vs {:?}", a, i)));
        }
        let b = a[0];
        if relatedness.shape() != [b, b] {
            return Err(Error::shape(format!(
                "relatedness must be [{b}, {b}], got {:?}",
                relatedness.shape()
            )));
        }
        if relatedness.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data("relatedness entries must be 0 or 1".into()));
        }
        for d in 0..b {
            if relatedness[[d, d]] != 1.0 {
                return Err(Error::Data(format!("pair {d} not marked self-related")));
            }
        }
        if tau.numel() != 1 || tau.item()? <= 0.0 {
            return Err(Error::Parameter("temperature must be a positive scalar".into()));
        }
        Ok(PairBatch {
            audio_emb,
            image_emb,
            relatedness,
            tau,
        })
    }

    pub fn batch(&self) -> usize {
        self.relatedness.shape()[0]
    }
}

/// Pairwise cosine similarities between row sets, `[b, d] x [b, d] -> [b, b]`.
pub fn cosine_matrix(a: &Tensor, i: &Tensor) -> Result<Tensor> {
    let (sa, si) = (a.shape(), i.shape());
    if sa.len() != 2 || si.len() != 2 || sa[1] != si[1] {
        return Err(Error::shape(format!("cosine_matrix: {:?} x {:?}", sa, si)));
    }
    let an = normalize_rows(a)?;
    let in_ = normalize_rows(i)?;
    an.matmul(&in_.permute(&[1, 0])?)
}

fn normalize_rows(x: &Tensor) -> Result<Tensor> {
    let norms = x.mul(x)?.sum_axis(1)?.sqrt()?;
    if norms.value().iter().any(|&v| v == 0.0) {
        return Err(Error::Numeric("cosine of a zero-norm row".into()));
    }
    x.div_col(&norms)
}

fn check_mask(m: &Array2<f64>) -> Result<()> {
    let b = m.shape()[0];
    for r in 0..b {
        let ones = m.row(r).iter().filter(|&&v| v == 1.0).count();
        if ones == 0 || ones == b {
            return Err(Error::Data(format!(
                "relatedness row {r} needs both a related and an unrelated pair"
            )));
        }
    }
    for c in 0..b {
        let ones = m.column(c).iter().filter(|&&v| v == 1.0).count();
        if ones == 0 || ones == b {
            return Err(Error::Data(format!(
                "relatedness column {c} needs both a related and an unrelated pair"
            )));
        }
    }
    Ok(())
}

/// One retrieval direction over a score matrix: mean over rows of
/// `-log(sum_pos e^s / sum_neg e^s)`, stabilized by a detached row max.
fn direction_loss(scores: &Tensor, mask: &Array2<f64>) -> Result<Tensor> {
    let b = mask.shape()[0];
    let row_max: Vec<f64> = (0..b)
        .map(|r| {
            (0..b)
                .map(|c| scores.value()[[r, c]])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let m = Tensor::constant(ndarray::Array1::from_vec(row_max).into_dyn());
    let e = scores.sub_col(&m)?.exp();
    let pos = Tensor::constant(mask.clone().into_dyn());
    let neg = Tensor::constant(mask.mapv(|v| 1.0 - v).into_dyn());
    let num = e.mul(&pos)?.sum_axis(1)?.ln()?;
    let den = e.mul(&neg)?.sum_axis(1)?.ln()?;
    Ok(num.sub(&den)?.mean_all().neg())
}

/// Masked decoupled contrastive loss over precomputed scores
/// (`cos/τ`, `[b, b]` with audio indexing rows).
pub fn masked_contrastive_from_scores(scores: &Tensor, mask: &Array2<f64>) -> Result<Tensor> {
    let s = scores.shape();
    if s.len() != 2 || s[0] != s[1] || mask.shape() != s {
        return Err(Error::shape(format!("masked contrastive scores {:?}", s)));
    }
    check_mask(mask)?;
    let a_to_i = direction_loss(scores, mask)?;
    let i_to_a = direction_loss(&scores.permute(&[1, 0])?, &mask.t().to_owned())?;
    Ok(a_to_i.add(&i_to_a)?.mul_scalar(0.5))
}

/// Masked decoupled contrastive loss over a [`PairBatch`].
pub fn masked_contrastive(pb: &PairBatch) -> Result<Tensor> {
    let cos = cosine_matrix(&pb.audio_emb, &pb.image_emb)?;
    let scores = cos.div_scalar_t(&pb.tau)?;
    masked_contrastive_from_scores(&scores, &pb.relatedness)
}

/// λ_c · L_cascaded + λ_q · L_qua.
pub fn loss_cascaded_plus(l_cascaded: &Tensor, l_qua: &Tensor, w: &LossWeights) -> Result<Tensor> {
    w.validate()?;
    l_cascaded
        .mul_scalar(w.lambda_c)
        .add(&l_qua.mul_scalar(w.lambda_q))
}

/// λ_p · L_parallel + λ_c · L_cascaded.
pub fn loss_hybrid(l_parallel: &Tensor, l_cascaded: &Tensor, w: &LossWeights) -> Result<Tensor> {
    w.validate()?;
    l_parallel
        .mul_scalar(w.lambda_p)
        .add(&l_cascaded.mul_scalar(w.lambda_c))
}

/// λ_p · L_parallel + λ_c · L_cascaded + λ_q · L_qua.
pub fn loss_hybrid_plus(
    l_parallel: &Tensor,
    l_cascaded: &Tensor,
    l_qua: &Tensor,
    w: &LossWeights,
) -> Result<Tensor> {
    loss_hybrid(l_parallel, l_cascaded, w)?.add(&l_qua.mul_scalar(w.lambda_q))
}

/// Trainable log-parameterized temperature: `exp(rho)` clamped to
/// `[1e-3, 10]`. Initialize rho at `ln(0.07)`.
pub fn temperature_from_log(rho: &Tensor) -> Result<Tensor> {
    if rho.numel() != 1 {
        return Err(Error::shape("temperature parameter must be scalar"));
    }
    Ok(rho.exp().clamp(1e-3, 10.0))
}

pub const TAU_INIT: f64 = 0.07;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use ndarray::{arr2, ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};

    fn t(m: Array2<f64>) -> Tensor {
        Tensor::constant(m.into_dyn())
    }

    #[test]
    fn cosine_matrix_basics() {
        let a = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let c = cosine_matrix(&t(a.clone()), &t(a.clone())).unwrap();
        assert_eq!(c.value(), &ndarray::Array2::<f64>::eye(2).into_dyn());

        // scale invariance of a row
        let mut scaled = a.clone();
        scaled.row_mut(0).mapv_inplace(|v| v * 5.0);
        let c2 = cosine_matrix(&t(scaled), &t(a.clone())).unwrap();
        for (x, y) in c.value().iter().zip(c2.value().iter()) {
            assert!((x - y).abs() < 1e-12);
        }

        // antiparallel pair
        let b = arr2(&[[-1.0, 0.0], [0.0, 1.0]]);
        let c3 = cosine_matrix(&t(a), &t(b)).unwrap();
        assert!((c3.value()[[0, 0]] + 1.0).abs() < 1e-12);

        // zero-norm row is a numeric error
        let z = arr2(&[[0.0, 0.0], [0.0, 1.0]]);
        assert!(cosine_matrix(&t(z), &t(arr2(&[[1.0, 0.0], [0.0, 1.0]]))).is_err());
    }

    #[test]
    fn orthonormal_matched_pairs_give_minus_one() {
        let a = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let pb = PairBatch::new(
            t(a.clone()),
            t(a),
            ndarray::Array2::eye(2),
            Tensor::scalar(1.0),
        )
        .unwrap();
        let loss = masked_contrastive(&pb).unwrap().item().unwrap();
        assert!((loss - (-1.0)).abs() < 1e-12, "loss={loss}");
    }

    #[test]
    fn equal_scores_give_log_count_ratio() {
        // every cosine identical: each row term is -log(n_pos / n_neg);
        // for b = 2 with identity mask that is -log(1/1) = 0.
        let scores = Tensor::constant(ArrayD::from_elem(IxDyn(&[2, 2]), 0.37));
        let m = ndarray::Array2::eye(2);
        let loss = masked_contrastive_from_scores(&scores, &m).unwrap();
        assert!(loss.item().unwrap().abs() < 1e-12);
    }

    #[test]
    fn degenerate_masks_are_rejected() {
        let a = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let all_ones = ndarray::Array2::from_elem((2, 2), 1.0);
        assert!(PairBatch::new(t(a.clone()), t(a.clone()), all_ones, Tensor::scalar(1.0))
            .map(|pb| masked_contrastive(&pb))
            .and_then(|r| r)
            .is_err());
        // diagonal-only 1x1 mask row cannot have a zero: b = 1 is degenerate
        let one = ndarray::Array2::eye(1);
        let v = arr2(&[[1.0, 0.0]]);
        let pb = PairBatch::new(t(v.clone()), t(v), one, Tensor::scalar(1.0)).unwrap();
        assert!(masked_contrastive(&pb).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let a0 = ArrayD::from_shape_simple_fn(IxDyn(&[4, 3]), || rng.gen_range(-1.0..1.0));
        let i0 = ArrayD::from_shape_simple_fn(IxDyn(&[4, 3]), || rng.gen_range(-1.0..1.0));
        // two scenes appear twice: a non-trivial mask
        let m = arr2(&[
            [1.0, 0.0, 1.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [1.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ]);
        let err = grad_check(
            |p| {
                let pb = PairBatch::new(p[0].clone(), p[1].clone(), m.clone(), Tensor::scalar(0.5))?;
                masked_contrastive(&pb)
            },
            &[a0, i0],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "masked contrastive grad err={err}");
    }

    #[test]
    fn loss_is_invariant_to_positive_row_rescaling() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(22);
        let a0 = Array2::from_shape_simple_fn((3, 4), || rng.gen_range(-1.0..1.0));
        let i0 = Array2::from_shape_simple_fn((3, 4), || rng.gen_range(-1.0..1.0));
        let m = arr2(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let tau = Tensor::scalar(0.3);
        let base = masked_contrastive(
            &PairBatch::new(t(a0.clone()), t(i0.clone()), m.clone(), tau.clone()).unwrap(),
        )
        .unwrap()
        .item()
        .unwrap();
        let mut a1 = a0;
        a1.row_mut(1).mapv_inplace(|v| v * 7.5);
        let rescaled = masked_contrastive(&PairBatch::new(t(a1), t(i0), m, tau).unwrap())
            .unwrap()
            .item()
            .unwrap();
        assert!((base - rescaled).abs() < 1e-12);
    }

    #[test]
    fn loss_is_symmetric_under_role_swap() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        let a0 = Array2::from_shape_simple_fn((4, 3), || rng.gen_range(-1.0..1.0));
        let i0 = Array2::from_shape_simple_fn((4, 3), || rng.gen_range(-1.0..1.0));
        let m = arr2(&[
            [1.0, 1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 1.0],
            [1.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0, 1.0],
        ]);
        let tau = Tensor::scalar(0.4);
        let ab = masked_contrastive(
            &PairBatch::new(t(a0.clone()), t(i0.clone()), m.clone(), tau.clone()).unwrap(),
        )
        .unwrap()
        .item()
        .unwrap();
        let ba = masked_contrastive(
            &PairBatch::new(t(i0), t(a0), m.t().to_owned(), tau).unwrap(),
        )
        .unwrap()
        .item()
        .unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn monotone_response_to_score_changes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(24);
        let m = arr2(&[
            [1.0, 0.0, 1.0],
            [0.0, 1.0, 0.0],
            [1.0, 0.0, 1.0],
        ]);
        for _ in 0..30 {
            let s0 = Array2::from_shape_simple_fn((3, 3), || rng.gen_range(-2.0..2.0));
            let base = masked_contrastive_from_scores(&t(s0.clone()), &m)
                .unwrap()
                .item()
                .unwrap();
            // raise one positive-pair score: loss must not increase
            let mut s_pos = s0.clone();
            s_pos[[0, 2]] += 0.5;
            let up_pos = masked_contrastive_from_scores(&t(s_pos), &m)
                .unwrap()
                .item()
                .unwrap();
            assert!(up_pos <= base + 1e-12);
            // raise one negative-pair score: loss must not decrease
            let mut s_neg = s0.clone();
            s_neg[[0, 1]] += 0.5;
            let up_neg = masked_contrastive_from_scores(&t(s_neg), &m)
                .unwrap()
                .item()
                .unwrap();
            assert!(up_neg >= base - 1e-12);
        }
    }

    #[test]
    fn combined_losses_match_hand_values() {
        let w = LossWeights::default();
        let s = |v: f64| Tensor::scalar(v);

        let c = loss_cascaded_plus(&s(1.0), &s(0.0), &w).unwrap().item().unwrap();
        assert_eq!(c, 1.0);
        let c = loss_cascaded_plus(&s(2.0), &s(4.0), &w).unwrap().item().unwrap();
        assert_eq!(c, 3.0);
        let zero = LossWeights { lambda_p: 0.0, lambda_c: 0.0, lambda_q: 0.0 };
        let c = loss_cascaded_plus(&s(5.0), &s(9.0), &zero).unwrap().item().unwrap();
        assert_eq!(c, 0.0);

        let h = loss_hybrid(&s(1.0), &s(1.0), &w).unwrap().item().unwrap();
        assert_eq!(h, 2.0);
        let h = loss_hybrid(&s(0.0), &s(0.0), &w).unwrap().item().unwrap();
        assert_eq!(h, 0.0);
        let only_p = LossWeights { lambda_p: 1.0, lambda_c: 0.0, lambda_q: 0.25 };
        let h = loss_hybrid(&s(7.0), &s(3.0), &only_p).unwrap().item().unwrap();
        assert_eq!(h, 7.0);

        let hp = loss_hybrid_plus(&s(1.0), &s(1.0), &s(4.0), &w).unwrap().item().unwrap();
        assert_eq!(hp, 3.0);
        let hp = loss_hybrid_plus(&s(0.0), &s(0.0), &s(0.0), &w).unwrap().item().unwrap();
        assert_eq!(hp, 0.0);
    }

    #[test]
    fn combinations_are_linear_and_consistent() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(25);
        for _ in 0..50 {
            let w = LossWeights {
                lambda_p: rng.gen_range(0.0..2.0),
                lambda_c: rng.gen_range(0.0..2.0),
                lambda_q: rng.gen_range(0.0..2.0),
            };
            let (p, c, q) = (
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(0.0..3.0),
            );
            let hp = loss_hybrid_plus(
                &Tensor::scalar(p),
                &Tensor::scalar(c),
                &Tensor::scalar(q),
                &w,
            )
            .unwrap()
            .item()
            .unwrap();
            let h = loss_hybrid(&Tensor::scalar(p), &Tensor::scalar(c), &w)
                .unwrap()
                .item()
                .unwrap();
            assert!((hp - (h + w.lambda_q * q)).abs() < 1e-12);
            assert!((hp - (w.lambda_p * p + w.lambda_c * c + w.lambda_q * q)).abs() < 1e-12);
            let cp = loss_cascaded_plus(&Tensor::scalar(c), &Tensor::scalar(q), &w)
                .unwrap()
                .item()
                .unwrap();
            assert!((cp - (w.lambda_c * c + w.lambda_q * q)).abs() < 1e-12);
        }
    }

    #[test]
    fn temperature_is_clamped_exp() {
        let rho = Tensor::scalar(TAU_INIT.ln());
        let tau = temperature_from_log(&rho).unwrap().item().unwrap();
        assert!((tau - 0.07).abs() < 1e-12);
        let tiny = temperature_from_log(&Tensor::scalar(-100.0)).unwrap().item().unwrap();
        assert_eq!(tiny, 1e-3);
        let big = temperature_from_log(&Tensor::scalar(100.0)).unwrap().item().unwrap();
        assert_eq!(big, 10.0);
    }
}
