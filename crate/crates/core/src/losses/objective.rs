use crate::error::{Error, Result};
use crate::numkit::{log_softmax, DenseVector};

/// `−ln p[true_class]`.
pub fn nll_loss(probabilities: &DenseVector, true_class: usize) -> Result<f64> {
    let p = *probabilities
        .as_slice()
        .get(true_class)
        .ok_or(Error::Class {
            index: true_class,
            count: probabilities.dim(),
        })?;
    if p <= 0.0 {
        return Err(Error::Numeric(format!(
            "probability of true class {true_class} is {p}"
        )));
    }
    Ok(-p.ln())
}

/// `−log softmax(z)[true_class]`, computed without forming the probabilities.
pub fn nll_from_logits(logits: &DenseVector, true_class: usize) -> Result<f64> {
    if true_class >= logits.dim() {
        return Err(Error::Class {
            index: true_class,
            count: logits.dim(),
        });
    }
    Ok(-log_softmax(logits)[true_class])
}

/// An anchor image (already projected into the text space), the text of its
/// own post, and texts of posts from other classes.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub anchor: DenseVector,
    pub positive: DenseVector,
    pub negatives: Vec<DenseVector>,
}

/// Auxiliary loss value and its gradients with respect to every vector in
/// the batch.
#[derive(Clone, Debug)]
pub struct AuxGrad {
    pub loss: f64,
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
}

/// `ln(1 + eˣ)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One pair term as a function of the two distances:
/// `−log(e^{−d⁺} / (e^{−d⁺} + e^{−d⁻})) = softplus(d⁺ − d⁻)`.
pub fn pair_term(d_pos: f64, d_neg: f64) -> f64 {
    softplus(d_pos - d_neg)
}

/// `d(a, p) − d(a, n)` summed per coordinate as `(n − p)(2a − p − n)`, so
/// coordinates where the two texts agree contribute exactly zero.
fn margin(a: &[f64], p: &[f64], n: &[f64]) -> f64 {
    a.iter()
        .zip(p)
        .zip(n)
        .map(|((&a, &p), &n)| (n - p) * (2.0 * a - p - n))
        .sum()
}

pub fn aux_loss_grad(batch: &PairBatch) -> Result<AuxGrad> {
    if batch.negatives.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let dim = batch.anchor.dim();
    if batch.positive.dim() != dim {
        return Err(Error::shape("aux_loss", dim, batch.positive.dim()));
    }
    let a = batch.anchor.as_slice();
    let p = batch.positive.as_slice();

    let mut loss = 0.0;
    let mut anchor = vec![0.0; dim];
    let mut positive = vec![0.0; dim];
    let mut negatives = Vec::with_capacity(batch.negatives.len());
    for neg in &batch.negatives {
        if neg.dim() != dim {
            return Err(Error::shape("aux_loss", dim, neg.dim()));
        }
        let n = neg.as_slice();
        let m = margin(a, p, n);
        loss += softplus(m);
        // ∂term/∂d⁺ = σ(d⁺ − d⁻) = −∂term/∂d⁻
        let s = sigmoid(m);
        let mut g_neg = Vec::with_capacity(dim);
        for k in 0..dim {
            anchor[k] += 2.0 * s * (n[k] - p[k]);
            positive[k] -= 2.0 * s * (a[k] - p[k]);
            g_neg.push(2.0 * s * (a[k] - n[k]));
        }
        negatives.push(g_neg);
    }
    Ok(AuxGrad {
        loss,
        anchor,
        positive,
        negatives,
    })
}

/// `−Σⱼ log σ(d(a, nⱼ) − d(a, p))` over the batch's negatives.
pub fn aux_loss(batch: &PairBatch) -> Result<f64> {
    aux_loss_grad(batch).map(|g| g.loss)
}

/// `λ·nll + aux`.
pub fn combined_loss(lambda: f64, nll: f64, aux: f64) -> f64 {
    lambda * nll + aux
}
