//! Scalar losses and row softmax as standalone validated operations. The
//! training path runs the same math through tape nodes; these entry points
//! serve oracles, evaluation and input validation.

use crate::matrix::{Matrix, SequenceTensor};
use crate::tape;
use crate::{Error, Result};

/// Row-wise softmax with row-max subtraction; each output row sums to 1.
pub fn softmax_rows(m: &Matrix) -> Result<Matrix> {
    m.check_finite("softmax_rows")?;
    let mut out = m.clone();
    for r in 0..out.rows() {
        tape::softmax_row(out.row_mut(r));
    }
    Ok(out)
}

/// Mean negative log-softmax probability of the targets, optionally
/// restricted to masked rows.
pub fn cross_entropy_masked(
    logits: &Matrix,
    targets: &[u32],
    row_mask: Option<&[bool]>,
) -> Result<f64> {
    if logits.rows() != targets.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} logit rows vs {} targets", logits.rows(), targets.len()),
        ));
    }
    for &t in targets {
        if t as usize >= logits.cols() {
            return Err(Error::TargetOutOfVocab {
                id: t,
                vocab: logits.cols(),
            });
        }
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    for r in 0..logits.rows() {
        if row_mask.map_or(true, |m| m[r]) {
            total += tape::row_nll(logits.row(r), targets[r] as usize);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid("cross_entropy", "no scored rows"));
    }
    Ok(total / count as f64)
}

pub fn cross_entropy(logits: &Matrix, targets: &[u32]) -> Result<f64> {
    cross_entropy_masked(logits, targets, None)
}

fn check_distribution(op: &'static str, p: &[f32]) -> Result<()> {
    let mut sum = 0.0f64;
    for &v in p {
        if v < 0.0 || !v.is_finite() {
            return Err(Error::invalid(op, format!("negative or non-finite mass {v}")));
        }
        sum += v as f64;
    }
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::NotNormalized { op, sum });
    }
    Ok(())
}

/// KL(p || alpha*p + (1-alpha)*q). Inputs must be normalized distributions.
pub fn skew_kl(p: &[f32], q: &[f32], alpha: f32) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape("skew_kl", "p and q lengths differ"));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid("skew_kl", format!("alpha {alpha} not in [0,1]")));
    }
    check_distribution("skew_kl", p)?;
    check_distribution("skew_kl", q)?;
    Ok(tape::skew_kl_row(p, q, alpha))
}

/// Mean squared element difference.
pub fn mse(a: &SequenceTensor, b: &SequenceTensor) -> Result<f64> {
    if (a.batch(), a.length(), a.dim()) != (b.batch(), b.length(), b.dim()) {
        return Err(Error::shape(
            "mse",
            format!(
                "{}x{}x{} vs {}x{}x{}",
                a.batch(),
                a.length(),
                a.dim(),
                b.batch(),
                b.length(),
                b.dim()
            ),
        ));
    }
    let mut s = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x as f64 - y as f64;
        s += d * d;
    }
    Ok(s / a.data().len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, Stream};

    #[test]
    fn softmax_symmetry_and_saturation() {
        let m = Matrix::from_vec(2, 2, vec![0.0, 0.0, 1000.0, 0.0]);
        let s = softmax_rows(&m).unwrap();
        assert!((s.get(0, 0) - 0.5).abs() < 1e-7);
        assert!((s.get(0, 1) - 0.5).abs() < 1e-7);
        assert!((s.get(1, 0) - 1.0).abs() < 1e-6);
        assert!(s.get(1, 1).abs() < 1e-6);
    }

    #[test]
    fn softmax_matches_direct_oracle() {
        let m = Matrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]);
        let s = softmax_rows(&m).unwrap();
        // direct exp/sum reference in f64
        let exps: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).collect();
        let sum: f64 = exps.iter().sum();
        for j in 0..3 {
            let rel = (s.get(0, j) as f64 - exps[j] / sum).abs() / (exps[j] / sum);
            assert!(rel < 1e-6);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_under_large_magnitudes() {
        let mut rng = seeded(9, Stream::WeightInit);
        for _ in 0..200 {
            let m = Matrix::randn(4, 16, 1e4, &mut rng);
            let s = softmax_rows(&m).unwrap();
            for r in 0..4 {
                let sum: f64 = s.row(r).iter().map(|&v| v as f64).sum();
                assert!((sum - 1.0).abs() < 1e-6, "row sum {sum}");
            }
        }
    }

    #[test]
    fn cross_entropy_confident_and_uniform() {
        // one-hot aligned with huge margin -> ~0
        let logits = Matrix::from_vec(1, 4, vec![100.0, 0.0, 0.0, 0.0]);
        let ce = cross_entropy(&logits, &[0]).unwrap();
        assert!(ce < 1e-6, "ce {ce}");
        // uniform logits, V=4 -> ln 4
        let logits = Matrix::zeros(2, 4);
        let ce = cross_entropy(&logits, &[1, 3]).unwrap();
        assert!((ce - 4.0f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_matches_f64_reference() {
        let mut rng = seeded(21, Stream::WeightInit);
        let logits = Matrix::randn(5, 7, 2.0, &mut rng);
        let targets = [3u32, 0, 6, 2, 5];
        let got = cross_entropy(&logits, &targets).unwrap();
        let mut want = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            let row: Vec<f64> = logits.row(r).iter().map(|&v| v as f64).collect();
            let sum: f64 = row.iter().map(|x| x.exp()).sum();
            want += -(row[t as usize] - sum.ln());
        }
        want /= targets.len() as f64;
        assert!((got - want).abs() / want.abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_out_of_vocab() {
        let logits = Matrix::zeros(1, 4);
        assert!(matches!(
            cross_entropy(&logits, &[4]),
            Err(Error::TargetOutOfVocab { .. })
        ));
    }

    #[test]
    fn skew_kl_identical_is_zero_and_alpha_zero_is_plain_kl() {
        let p = [0.2f32, 0.3, 0.5];
        assert!(skew_kl(&p, &p, 0.7).unwrap().abs() < 1e-12);

        let q = [0.5f32, 0.25, 0.25];
        let skl = skew_kl(&p, &q, 0.0).unwrap();
        let plain: f64 = p
            .iter()
            .zip(&q)
            .map(|(&pv, &qv)| pv as f64 * ((pv as f64 / qv as f64).ln()))
            .sum();
        assert!((skl - plain).abs() < 1e-9);
    }

    #[test]
    fn skew_kl_hand_case() {
        // p=[1,0], q=[0.5,0.5], alpha=0.1 -> KL([1,0] || [0.55,0.45]) = ln(1/0.55)
        let v = skew_kl(&[1.0, 0.0], &[0.5, 0.5], 0.1).unwrap();
        assert!((v - (1.0f64 / 0.55).ln()).abs() < 1e-7, "{v}");
    }

    #[test]
    fn skew_kl_rejects_unnormalized() {
        assert!(matches!(
            skew_kl(&[0.7, 0.7], &[0.5, 0.5], 0.5),
            Err(Error::NotNormalized { .. })
        ));
    }

    #[test]
    fn skew_kl_nonnegative_over_random_pairs() {
        let mut rng = seeded(33, Stream::WeightInit);
        use rand::Rng;
        for _ in 0..1000 {
            let n = rng.gen_range(2..8);
            let mut p: Vec<f32> = (0..n).map(|_| rng.gen_range(1e-6..1.0f32)).collect();
            let mut q: Vec<f32> = (0..n).map(|_| rng.gen_range(1e-6..1.0f32)).collect();
            let sp: f32 = p.iter().sum();
            let sq: f32 = q.iter().sum();
            p.iter_mut().for_each(|v| *v /= sp);
            q.iter_mut().for_each(|v| *v /= sq);
            // renormalize exactly enough for the validator
            let alpha = rng.gen_range(0.0..=1.0f32);
            let v = skew_kl(&p, &q, alpha).unwrap();
            assert!(v >= -1e-9, "negative skew kl {v}");
        }
    }

    #[test]
    fn mse_cases() {
        let a = SequenceTensor::from_vec(1, 2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        let b = SequenceTensor::from_vec(1, 2, 3, vec![2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        assert!((mse(&a, &b).unwrap() - 1.0).abs() < 1e-12);

        let mut rng = seeded(4, Stream::WeightInit);
        let x = SequenceTensor::randn(2, 3, 4, 1.0, &mut rng);
        let y = SequenceTensor::randn(2, 3, 4, 1.0, &mut rng);
        let got = mse(&x, &y).unwrap();
        let want: f64 = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum::<f64>()
            / x.data().len() as f64;
        assert!((got - want).abs() < 1e-7 * want.abs().max(1.0));
    }

    #[test]
    fn mse_shape_mismatch() {
        let a = SequenceTensor::zeros(1, 2, 3);
        let b = SequenceTensor::zeros(1, 3, 2);
        assert!(mse(&a, &b).is_err());
    }
}
