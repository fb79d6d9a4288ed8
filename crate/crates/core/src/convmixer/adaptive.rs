use crate::error::{shape, Result};
use crate::keystream::PermutationVec;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Mixes tokens `B x h x g x g` with `U: n x n`, `n = g^2`, row-major token order.
pub fn apply_adaptive_matrix<T: Scalar>(tape: &mut Tape<T>, tokens: Var, u: Var) -> Result<Var> {
    tape.token_mix(tokens, u)
}

/// Value of the permutation penalty for a concrete matrix.
pub fn penalty_lu<T: Scalar>(u: &Tensor<T>) -> Result<T> {
    let mut tape = Tape::new();
    let v = tape.leaf(u.clone().with_grad(false));
    let p = tape.penalty_lu(v)?;
    Ok(tape.value(p).item())
}

/// Cross-entropy plus `lambda` times the penalty on `u`.
///
/// Without a matrix, or with `lambda == 0`, this is the cross-entropy node itself.
pub fn loss_total<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize], u: Option<Var>, lambda: T) -> Result<Var> {
    let ce = tape.softmax_xent(logits, labels)?;
    match u {
        Some(u) if lambda != T::zero() => {
            let pen = tape.penalty_lu(u)?;
            let weighted = tape.scale(pen, lambda);
            tape.add(ce, weighted)
        }
        _ => Ok(ce),
    }
}

/// Row-wise argmax of `U`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermutationExtraction {
    /// `argmax[t]` is the source token that output token `t` draws most from.
    pub argmax: Vec<usize>,
    /// The argmaxes are pairwise distinct.
    pub valid: bool,
}

impl PermutationExtraction {
    /// The gather map as a permutation, when valid.
    pub fn permutation(&self) -> Option<PermutationVec> {
        if self.valid {
            PermutationVec::from_vec(self.argmax.clone()).ok()
        } else {
            None
        }
    }

    /// Fraction of rows `t` with `argmax[t] == expected[t]`.
    pub fn agreement(&self, expected: &[usize]) -> f64 {
        assert_eq!(expected.len(), self.argmax.len());
        let hits = self.argmax.iter().zip(expected).filter(|(a, b)| a == b).count();
        hits as f64 / expected.len().max(1) as f64
    }
}

/// Reads a permutation off `U` by row-wise argmax (first maximum on ties).
///
/// If the cipher moved block `i` to position `pi[i]`, the matrix that undoes
/// it has its row-`i` maximum at column `pi[i]`, so a converged `U` yields
/// `argmax == pi`.
pub fn extract_permutation<T: Scalar>(u: &Tensor<T>) -> Result<PermutationExtraction> {
    let s = u.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(shape(format!("expected a square matrix, got {s:?}")));
    }
    let n = s[0];
    let argmax: Vec<usize> = u
        .data()
        .chunks(n.max(1))
        .take(n)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    let mut seen = vec![false; n];
    let valid = argmax.iter().all(|&a| !std::mem::replace(&mut seen[a], true));
    Ok(PermutationExtraction { argmax, valid })
}

/// Gather matrix of `perm`: `M[t, perm[t]] = 1`.
pub fn gather_matrix<T: Scalar>(perm: &[usize]) -> Tensor<T> {
    let n = perm.len();
    Tensor::from_fn(&[n, n], |i| if perm[i / n] == i % n { T::one() } else { T::zero() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keystream::gen_permutation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn penalty_reference_values() {
        for n in 1..6 {
            assert_eq!(penalty_lu(&Tensor::<f64>::eye(n)).unwrap(), 0.0);
            assert_eq!(penalty_lu(&Tensor::<f64>::zeros(&[n, n])).unwrap(), n as f64);
            assert_eq!(penalty_lu(&Tensor::<f64>::eye(n).map(|v| 2.0 * v)).unwrap(), 9.0 * n as f64);
        }
        assert!(penalty_lu(&Tensor::<f64>::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn loss_total_composition() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros(&[1, 10]));
        let u = tape.leaf(Tensor::zeros(&[4, 4]));
        let l = loss_total(&mut tape, logits, &[3], Some(u), 1e-4).unwrap();
        let expected = 10f64.ln() + 1e-4 * 4.0;
        assert!((tape.value(l).item() - expected).abs() < 1e-15);

        let ce = tape.softmax_xent(logits, &[3]).unwrap();
        let zero_lambda = loss_total(&mut tape, logits, &[3], Some(u), 0.0).unwrap();
        assert_eq!(tape.value(zero_lambda).item(), tape.value(ce).item());
        let eye = tape.leaf(Tensor::eye(4));
        let with_eye = loss_total(&mut tape, logits, &[3], Some(eye), 0.5).unwrap();
        assert_eq!(tape.value(with_eye).item(), tape.value(ce).item());
    }

    #[test]
    fn extraction_of_hard_and_noisy_permutations() {
        let e = extract_permutation(&Tensor::<f64>::eye(5)).unwrap();
        assert!(e.valid);
        assert!(e.permutation().unwrap().is_identity());

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..50 {
            let p = gen_permutation(trial, 12).unwrap();
            let hard = gather_matrix::<f64>(p.as_slice());
            assert_eq!(extract_permutation(&hard).unwrap().argmax, p.as_slice());
            let mut noisy = hard.clone();
            noisy.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.399..0.399));
            let e = extract_permutation(&noisy).unwrap();
            assert!(e.valid);
            assert_eq!(e.permutation().unwrap(), p);
        }
    }

    #[test]
    fn duplicate_argmax_is_invalid() {
        let u = Tensor::<f64>::new(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let e = extract_permutation(&u).unwrap();
        assert!(!e.valid);
        assert!(e.permutation().is_none());
    }

    #[test]
    fn token_mix_identity_and_permutation() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3, 2, 2], |i| i as f64));
        let eye = tape.leaf(Tensor::eye(4));
        let same = apply_adaptive_matrix(&mut tape, x, eye).unwrap();
        assert_eq!(tape.value(same), tape.value(x));

        let perm = [2, 0, 3, 1];
        let pm = tape.leaf(gather_matrix(&perm));
        let mixed = apply_adaptive_matrix(&mut tape, x, pm).unwrap();
        let (src, out) = (tape.value(x).data(), tape.value(mixed).data());
        for row in 0..6 {
            for t in 0..4 {
                assert_eq!(out[row * 4 + t], src[row * 4 + perm[t]]);
            }
        }
    }
}
