//! Adversarial objectives over discriminator scores in `(0, 1)`.
//!
//! Scores are clamped to `[ε, 1 − ε]` with `ε = 1e-7` before any logarithm.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Var};

pub const SCORE_EPS: f64 = 1e-7;

fn clamped<T: Element>(tape: &mut Tape<T>, s: Var) -> Var {
    let eps = T::from_f64_lossy(SCORE_EPS);
    tape.clamp(s, eps, T::one() - eps)
}

/// `mean(log s)` or, with `complement`, `mean(log(1 − s))`.
fn mean_log<T: Element>(tape: &mut Tape<T>, s: Var, complement: bool) -> Result<Var> {
    let c = clamped(tape, s);
    let arg = if complement { tape.one_minus(c) } else { c };
    let l = tape.ln(arg)?;
    Ok(tape.mean(l))
}

/// Binary cross-entropy against a constant target: `−mean(log s)` for
/// target 1, `−mean(log(1 − s))` for target 0.
pub fn bce<T: Element>(tape: &mut Tape<T>, scores: Var, target_real: bool) -> Result<Var> {
    let m = mean_log(tape, scores, !target_real)?;
    Ok(tape.neg(m))
}

/// Empirical `V(D, G) = mean(log D(x)) + mean(log(1 − D(G(z))))`.
pub fn minimax_value<T: Element>(tape: &mut Tape<T>, d_real: Var, d_fake: Var) -> Result<Var> {
    let a = mean_log(tape, d_real, false)?;
    let b = mean_log(tape, d_fake, true)?;
    tape.add(a, b)
}

/// Weights of the (real, true label), (real, mismatched label) and
/// (fake, true label) discriminator terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub real_true: f64,
    pub real_mismatched: f64,
    pub fake_true: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            real_true: 1.0 / 3.0,
            real_mismatched: 1.0 / 3.0,
            fake_true: 1.0 / 3.0,
        }
    }
}

impl LossWeights {
    pub fn new(real_true: f64, real_mismatched: f64, fake_true: f64) -> Result<Self> {
        let w = Self {
            real_true,
            real_mismatched,
            fake_true,
        };
        w.validate()?;
        Ok(w)
    }

    /// Non-negative and summing to one.
    pub fn validate(&self) -> Result<()> {
        let parts = [self.real_true, self.real_mismatched, self.fake_true];
        if parts.iter().any(|w| !w.is_finite() || *w < 0.0) || ((parts.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "discriminator loss weights must be non-negative and sum to 1, got {parts:?}"
            )));
        }
        Ok(())
    }
}

/// `w1·BCE(s_rt, 1) + w2·BCE(s_rf, 0) + w3·BCE(s_ft, 0)`.
pub fn discriminator_loss_threepart<T: Element>(
    tape: &mut Tape<T>,
    s_rt: Var,
    s_rf: Var,
    s_ft: Var,
    weights: &LossWeights,
) -> Result<Var> {
    weights.validate()?;
    let terms = [
        (s_rt, true, weights.real_true),
        (s_rf, false, weights.real_mismatched),
        (s_ft, false, weights.fake_true),
    ];
    let mut total: Option<Var> = None;
    for (s, target, w) in terms {
        let l = bce(tape, s, target)?;
        let l = tape.scale(l, T::from_f64_lossy(w));
        total = Some(match total {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    Ok(total.expect("three terms"))
}

/// Which generator objective to minimize.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum GeneratorObjective {
    /// `−mean(log D(G(z)))`.
    #[default]
    NonSaturating,
    /// `mean(log(1 − D(G(z))))`, the generator's side of the min-max game.
    Minimax,
}

/// Generator loss on scores of generated images paired with their true labels.
pub fn generator_loss<T: Element>(tape: &mut Tape<T>, s_fake: Var, objective: GeneratorObjective) -> Result<Var> {
    match objective {
        GeneratorObjective::NonSaturating => bce(tape, s_fake, true),
        GeneratorObjective::Minimax => mean_log(tape, s_fake, true),
    }
}

/// Joint image/text 0-1 error over a class compatibility table.
///
/// `table[i][j]` is the mean score of class-`i` images with the class-`j`
/// embedding. Images are classified by row argmax, embeddings by column
/// argmax (ties go to the lowest index); the result is the mean of the two
/// error rates, in `[0, 1]`.
pub fn structured_loss(table: &[Vec<f64>]) -> Result<f64> {
    let k = table.len();
    if k == 0 {
        return Err(Error::invalid("structured loss of an empty table"));
    }
    if table.iter().any(|row| row.len() != k) {
        return Err(Error::invalid("structured loss needs a square table"));
    }
    let argmax = |values: &mut dyn Iterator<Item = f64>| -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, v) in values.enumerate() {
            if v > best.1 {
                best = (i, v);
            }
        }
        best.0
    };
    let image_errors = (0..k)
        .filter(|&i| argmax(&mut table[i].iter().copied()) != i)
        .count();
    let text_errors = (0..k)
        .filter(|&j| argmax(&mut (0..k).map(|i| table[i][j])) != j)
        .count();
    Ok((image_errors + text_errors) as f64 / (2 * k) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check_many, Tensor};
    use proptest::prelude::*;

    fn eval(f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>, inputs: &[&[f64]]) -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|d| tape.constant(Tensor::from_f64(&[d.len(), 1], d).unwrap()))
            .collect();
        let out = f(&mut tape, &vars).unwrap();
        tape.value(out).item()
    }

    fn minimax(d_real: &[f64], d_fake: &[f64]) -> f64 {
        eval(|t, v| minimax_value(t, v[0], v[1]), &[d_real, d_fake])
    }

    fn three(s: [f64; 3], w: LossWeights) -> f64 {
        eval(
            move |t, v| discriminator_loss_threepart(t, v[0], v[1], v[2], &w),
            &[&[s[0]], &[s[1]], &[s[2]]],
        )
    }

    fn gen(s: &[f64], objective: GeneratorObjective) -> f64 {
        eval(move |t, v| generator_loss(t, v[0], objective), &[s])
    }

    #[test]
    fn minimax_anchors() {
        assert!((minimax(&[0.5; 3], &[0.5; 3]) + 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!(minimax(&[1.0, 1.0], &[0.0, 0.0]).abs() < 1e-6);
        let expected = 0.5 * (0.9f64.ln() + 0.8f64.ln()) * 2.0;
        assert!((minimax(&[0.9, 0.8], &[0.1, 0.2]) - expected).abs() < 1e-12);
        assert!((expected + 0.328504).abs() < 1e-6);
    }

    #[test]
    fn three_part_anchors() {
        let w = LossWeights::default();
        let v = three([0.9, 0.2, 0.1], w);
        let by_hand = (-(0.9f64.ln()) - 0.8f64.ln() - 0.9f64.ln()) / 3.0;
        assert!((v - by_hand).abs() < 1e-12);
        assert!((v - 0.144622).abs() < 1e-5);
        assert!(three([1.0, 0.0, 0.0], w) < 1e-6);
        assert!((three([0.5; 3], w) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn generator_anchors() {
        assert!(gen(&[1.0], GeneratorObjective::NonSaturating) < 1e-6);
        assert!((gen(&[0.5], GeneratorObjective::NonSaturating) - 2f64.ln()).abs() < 1e-12);
        let v = gen(&[0.25, 0.75], GeneratorObjective::NonSaturating);
        assert!((v - 0.5 * (4f64.ln() + (4.0f64 / 3.0).ln())).abs() < 1e-12);
        assert!((v - 0.836988).abs() < 1e-6);
        assert!((gen(&[0.5], GeneratorObjective::Minimax) + 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn weights_must_sum_to_one() {
        assert!(LossWeights::new(0.5, 0.0, 0.5).is_ok());
        assert!(LossWeights::new(0.5, 0.5, 0.5).is_err());
        assert!(LossWeights::new(1.5, -0.5, 0.0).is_err());
    }

    #[test]
    fn loss_gradients() {
        let s = |d: &[f64]| Tensor::from_f64(&[d.len(), 1], d).unwrap();
        let inputs = [s(&[0.3, 0.8]), s(&[0.6, 0.2]), s(&[0.45, 0.1])];
        let w = LossWeights::new(0.5, 0.2, 0.3).unwrap();
        let checks: Vec<Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>> = vec![
            Box::new(|t, v| minimax_value(t, v[0], v[1])),
            Box::new(move |t, v| discriminator_loss_threepart(t, v[0], v[1], v[2], &w)),
            Box::new(|t, v| generator_loss(t, v[0], GeneratorObjective::NonSaturating)),
            Box::new(|t, v| generator_loss(t, v[0], GeneratorObjective::Minimax)),
        ];
        for f in checks {
            let err = grad_check_many(f, &inputs, 1e-6).unwrap();
            assert!(err < 1e-6, "{err}");
        }
    }

    #[test]
    fn structured_loss_examples() {
        let diag = vec![vec![0.9, 0.1, 0.2], vec![0.3, 0.8, 0.1], vec![0.0, 0.2, 0.7]];
        assert_eq!(structured_loss(&diag).unwrap(), 0.0);
        assert_eq!(structured_loss(&[vec![0.4]]).unwrap(), 0.0);
        let tie = vec![vec![0.9, 0.8], vec![0.9, 0.1]];
        assert_eq!(structured_loss(&tie).unwrap(), 0.5);
        assert!(structured_loss(&[]).is_err());
    }

    proptest! {
        #[test]
        fn minimax_monotone(r in 0.01f64..0.98, f in 0.02f64..0.99, step in 0.001f64..0.01) {
            // larger d_real and smaller d_fake both raise V
            prop_assert!(minimax(&[r + step], &[f]) > minimax(&[r], &[f]));
            prop_assert!(minimax(&[r], &[f - step]) > minimax(&[r], &[f]));
        }

        #[test]
        fn target_zero_terms_commute(a in 0.01f64..0.99, b in 0.01f64..0.99, c in 0.01f64..0.99) {
            let w = LossWeights::default();
            prop_assert!((three([a, b, c], w) - three([a, c, b], w)).abs() < 1e-12);
        }

        #[test]
        fn generator_loss_strictly_decreasing(s in prop::collection::vec(0.01f64..0.98, 1..5), i in 0usize..5, step in 0.001f64..0.01) {
            let i = i % s.len();
            let mut up = s.clone();
            up[i] += step;
            prop_assert!(gen(&up, GeneratorObjective::NonSaturating) < gen(&s, GeneratorObjective::NonSaturating));
        }

        #[test]
        fn structured_loss_in_unit_interval(values in prop::collection::vec(0.0f64..1.0, 16)) {
            let table: Vec<Vec<f64>> = values.chunks(4).map(<[f64]>::to_vec).collect();
            let v = structured_loss(&table).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
            let diag_wins = (0..4).all(|i| (0..4).all(|j| j == i || (table[i][i] > table[i][j] && table[i][i] > table[j][i])));
            prop_assert_eq!(v == 0.0, diag_wins || (0..4).all(|i| {
                let row_ok = (0..4).all(|j| j == i || table[i][i] > table[i][j] || (table[i][i] == table[i][j] && i < j));
                let col_ok = (0..4).all(|j| j == i || table[i][i] > table[j][i] || (table[i][i] == table[j][i] && i < j));
                row_ok && col_ok
            }));
        }
    }
}
