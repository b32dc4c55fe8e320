//! Integrated gradients over input embeddings.
//!
//! The path runs straight from a baseline sequence to the true embeddings; the
//! path integral of each gradient is approximated with the midpoint rule. Each
//! position's attribution is the dot product of `(input - baseline)` with its
//! averaged gradient, summed over embedding dimensions. The convergence delta
//! is `sum(attributions) - (F(input) - F(baseline))`, which goes to zero as
//! the step count grows.

/// A scalar function of a sequence of embeddings with an analytic gradient.
pub trait DifferentiableScorer {
    type Target: ?Sized;

    /// Score of `target` given `context`, and its gradient with respect to
    /// every context embedding.
    fn score_with_grad(&self, context: &[Vec<f64>], target: &Self::Target) -> (f64, Vec<Vec<f64>>);

    fn score(&self, context: &[Vec<f64>], target: &Self::Target) -> f64 {
        self.score_with_grad(context, target).0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IgOutcome {
    /// Signed attribution per context position.
    pub attributions: Vec<f64>,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum IgError {
    #[error("integrated gradients needs at least one step")]
    NoSteps,
    #[error("input and baseline shapes differ")]
    Shape,
    #[error("non-finite gradient")]
    NonFinite,
}

pub fn integrated_gradients<S: DifferentiableScorer + ?Sized>(
    scorer: &S,
    inputs: &[Vec<f64>],
    baseline: &[Vec<f64>],
    target: &S::Target,
    steps: usize,
) -> Result<IgOutcome, IgError> {
    if steps == 0 {
        return Err(IgError::NoSteps);
    }
    if inputs.len() != baseline.len() || inputs.iter().zip(baseline).any(|(a, b)| a.len() != b.len()) {
        return Err(IgError::Shape);
    }
    let diff: Vec<Vec<f64>> = inputs
        .iter()
        .zip(baseline)
        .map(|(x, b)| x.iter().zip(b).map(|(x, b)| x - b).collect())
        .collect();
    let mut grad_sum: Vec<Vec<f64>> = inputs.iter().map(|x| vec![0.0; x.len()]).collect();
    let mut point: Vec<Vec<f64>> = baseline.to_vec();
    for k in 0..steps {
        let alpha = (k as f64 + 0.5) / steps as f64;
        for ((p, b), d) in point.iter_mut().zip(baseline).zip(&diff) {
            for ((p, b), d) in p.iter_mut().zip(b).zip(d) {
                *p = b + alpha * d;
            }
        }
        let (_, grad) = scorer.score_with_grad(&point, target);
        for (acc, g) in grad_sum.iter_mut().zip(&grad) {
            for (a, g) in acc.iter_mut().zip(g) {
                if !g.is_finite() {
                    return Err(IgError::NonFinite);
                }
                *a += g;
            }
        }
    }
    let attributions: Vec<f64> = diff
        .iter()
        .zip(&grad_sum)
        .map(|(d, g)| d.iter().zip(g).map(|(d, g)| d * g).sum::<f64>() / steps as f64)
        .collect();
    if attributions.iter().any(|a| !a.is_finite()) {
        return Err(IgError::NonFinite);
    }
    let gap = scorer.score(inputs, target) - scorer.score(baseline, target);
    let delta = attributions.iter().sum::<f64>() - gap;
    Ok(IgOutcome { attributions, delta })
}

/// `F(E) = sum_i w_i . e_i`; its gradient is `w_i` everywhere, so integrated
/// gradients are exactly `w_i . (x_i - b_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearScorer {
    pub weights: Vec<Vec<f64>>,
}

impl DifferentiableScorer for LinearScorer {
    type Target = ();

    fn score_with_grad(&self, context: &[Vec<f64>], _target: &()) -> (f64, Vec<Vec<f64>>) {
        let value = context
            .iter()
            .zip(&self.weights)
            .map(|(e, w)| e.iter().zip(w).map(|(e, w)| e * w).sum::<f64>())
            .sum();
        (value, self.weights[..context.len()].to_vec())
    }
}
