//! Central finite-difference verification of the analytic gradients.

use std::collections::BTreeSet;
use std::fmt;

use serde::Serialize;

use super::backward::{evaluate_loss, loss_and_grad, GradientSet, Sample};
use crate::encoders::Dropout;
use crate::encoders::EmbeddingTable;
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, Mode, ModelInput, ModelParams};
use crate::numkit::{DenseMatrix, DenseVector, SeededRng};

/// Tensors larger than this are checked on an evenly spaced subset.
pub const MAX_COORDS_PER_TENSOR: usize = 256;

/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1e-8, analytic.abs() + numeric.abs())
}

#[derive(Clone, Debug, Serialize)]
pub struct TensorCheck {
    pub tensor: String,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub loss: f64,
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
    pub pass: bool,
}

impl GradCheckReport {
    fn from_tensors(step: f64, tolerance: f64, loss: f64, tensors: Vec<TensorCheck>) -> Self {
        let max_rel_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
        Self {
            step,
            tolerance,
            loss,
            pass: tensors.iter().all(|t| t.pass),
            max_rel_error,
            tensors,
        }
    }

    /// Tensor name and coordinate of the largest relative error.
    pub fn worst(&self) -> Option<(&str, usize)> {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
            .map(|t| (t.tensor.as_str(), t.worst_index))
    }

    /// One JSON object per tensor: name, max relative error, pass flag.
    pub fn json_lines(&self) -> String {
        self.tensors
            .iter()
            .map(|t| {
                serde_json::json!({
                    "tensor": t.tensor,
                    "max_rel_error": t.max_rel_error,
                    "pass": t.pass,
                })
                .to_string()
                    + "\n"
            })
            .collect()
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "gradient check: step {:e}, tolerance {:e}, loss {:.6}",
            self.step, self.tolerance, self.loss
        )?;
        for t in &self.tensors {
            writeln!(
                f,
                "  {:<18} {:>5} coords  max rel err {:.3e} at [{}] (analytic {:.6e}, numeric {:.6e})  {}",
                t.tensor,
                t.coords_checked,
                t.max_rel_error,
                t.worst_index,
                t.analytic,
                t.numeric,
                if t.pass { "ok" } else { "FAIL" }
            )?;
        }
        match (self.pass, self.worst()) {
            (true, _) => write!(f, "PASS (max rel err {:.3e})", self.max_rel_error),
            (false, Some((name, idx))) => write!(
                f,
                "FAIL (max rel err {:.3e} at {name}[{idx}])",
                self.max_rel_error
            ),
            (false, None) => write!(f, "FAIL"),
        }
    }
}

fn spread(candidates: Vec<usize>) -> Vec<usize> {
    if candidates.len() <= MAX_COORDS_PER_TENSOR {
        return candidates;
    }
    (0..MAX_COORDS_PER_TENSOR)
        .map(|i| candidates[i * candidates.len() / MAX_COORDS_PER_TENSOR])
        .collect()
}

fn tensor_mut<'p>(params: &'p mut ModelParams, name: &str) -> &'p mut [f64] {
    params
        .tensors_mut()
        .into_iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| t)
        .expect("tensor exists")
}

/// Checks `analytic` against central differences of the sample loss, with
/// dropout frozen to `masks`. Every coordinate of small tensors is visited;
/// embeddings are checked on the rows the sample touches.
pub fn compare_gradients(
    params: &ModelParams,
    sample: &Sample<'_>,
    config: &FusionConfig,
    analytic: &GradientSet,
    masks: &[Vec<f64>],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    if step.is_nan() || step <= 0.0 {
        return Err(Error::Config(format!("step must be positive, got {step}")));
    }
    let loss_at = |p: &ModelParams| -> Result<f64> {
        let l = evaluate_loss(sample, p, config, &mut Dropout::replay(masks))?
            .loss
            .total;
        if l.is_finite() {
            Ok(l)
        } else {
            Err(Error::Numeric(format!("non-finite loss {l}")))
        }
    };
    let base_loss = loss_at(params)?;

    let mut touched: BTreeSet<usize> = sample
        .input
        .text
        .unwrap_or_default()
        .iter()
        .copied()
        .collect();
    for neg in &sample.negatives {
        touched.extend(neg.iter().copied());
    }

    let mut work = params.clone();
    let mut checks = Vec::new();
    for (name, rows, cols, _) in params.tensors() {
        let dense = analytic
            .dense(name, params)
            .ok_or_else(|| Error::State(format!("no gradient for tensor {name}")))?;
        let candidates: Vec<usize> = if name == "embeddings" {
            touched
                .iter()
                .flat_map(|&r| r * cols..(r + 1) * cols)
                .collect()
        } else {
            (0..rows * cols).collect()
        };

        let mut check = TensorCheck {
            tensor: name.to_string(),
            coords_checked: 0,
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            pass: true,
        };
        for idx in spread(candidates) {
            let orig = tensor_mut(&mut work, name)[idx];
            tensor_mut(&mut work, name)[idx] = orig + step;
            let plus = loss_at(&work)?;
            tensor_mut(&mut work, name)[idx] = orig - step;
            let minus = loss_at(&work)?;
            tensor_mut(&mut work, name)[idx] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(dense[idx], numeric);
            check.coords_checked += 1;
            if err > check.max_rel_error || check.coords_checked == 1 {
                check.max_rel_error = err;
                check.worst_index = idx;
                check.analytic = dense[idx];
                check.numeric = numeric;
            }
        }
        check.pass = check.max_rel_error < tolerance;
        checks.push(check);
    }
    Ok(GradCheckReport::from_tensors(
        step, tolerance, base_loss, checks,
    ))
}

/// Draws dropout masks with `rng`, computes the analytic gradient, and
/// compares it with central differences under the same masks.
pub fn grad_check(
    params: &ModelParams,
    sample: &Sample<'_>,
    config: &FusionConfig,
    step: f64,
    tolerance: f64,
    rng: &mut SeededRng,
) -> Result<GradCheckReport> {
    let mut dropout = if config.dropout_p > 0.0 {
        Dropout::Train {
            p: config.dropout_p,
            rng,
        }
    } else {
        Dropout::Off
    };
    let (eval, grads) = loss_and_grad(sample, params, config, &mut dropout)?;
    compare_gradients(
        params,
        sample,
        config,
        &grads,
        &eval.masks(),
        step,
        tolerance,
    )
}

/// Central-difference check of an arbitrary scalar function.
pub fn check_function<F>(
    mut f: F,
    x: &[f64],
    analytic: &[f64],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if step.is_nan() || step <= 0.0 {
        return Err(Error::Config(format!("step must be positive, got {step}")));
    }
    if x.len() != analytic.len() {
        return Err(Error::shape("check_function", x.len(), analytic.len()));
    }
    let mut work = x.to_vec();
    let loss = f(x);
    let mut check = TensorCheck {
        tensor: "x".into(),
        coords_checked: 0,
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        pass: true,
    };
    for i in 0..x.len() {
        work[i] = x[i] + step;
        let plus = f(&work);
        work[i] = x[i] - step;
        let minus = f(&work);
        work[i] = x[i];
        if !(plus.is_finite() && minus.is_finite()) {
            return Err(Error::Numeric("non-finite function value".into()));
        }
        let numeric = (plus - minus) / (2.0 * step);
        let err = relative_error(analytic[i], numeric);
        check.coords_checked += 1;
        if err > check.max_rel_error || i == 0 {
            check.max_rel_error = err;
            check.worst_index = i;
            check.analytic = analytic[i];
            check.numeric = numeric;
        }
    }
    check.pass = check.max_rel_error < tolerance;
    Ok(GradCheckReport::from_tensors(
        step,
        tolerance,
        loss,
        vec![check],
    ))
}

const TINY_EMBEDDING_SD: f64 = 0.5;

/// Dimensions of the randomly initialized model used for self-checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct TinyDims {
    pub d: usize,
    pub h: usize,
    pub n: usize,
    pub classes: usize,
    pub g: usize,
    pub vocab: usize,
    pub tokens: usize,
}

impl Default for TinyDims {
    fn default() -> Self {
        Self {
            d: 4,
            h: 3,
            n: 6,
            classes: 3,
            g: 2,
            vocab: 12,
            tokens: 5,
        }
    }
}

/// A random model and post of [`TinyDims`] for one mode.
#[derive(Clone, Debug)]
pub struct TinyCase {
    pub config: FusionConfig,
    pub params: ModelParams,
    pub ids: Vec<usize>,
    pub image: DenseVector,
    pub label: usize,
    pub negatives: Vec<Vec<usize>>,
}

impl TinyCase {
    /// Everything drawn from `seed`: `N(0, 0.5²)` embeddings, standard-normal
    /// image, default initialization for the rest. Late fusion has no single stack.
    pub fn random(mode: Mode, dims: TinyDims, seed: u64) -> Result<Self> {
        let config = FusionConfig {
            mode,
            d: dims.d,
            h: dims.h,
            g: dims.g,
            image_dim: dims.n,
            class_count: dims.classes,
            ..FusionConfig::default()
        };
        config.validate()?;
        let mut rng = SeededRng::new(seed);
        let table = (0..dims.vocab * dims.d)
            .map(|_| rng.normal(0.0, TINY_EMBEDDING_SD))
            .collect();
        let table = EmbeddingTable::new(DenseMatrix::new(dims.vocab, dims.d, table)?);
        let params = ModelParams::init(&config, Some(table), &mut rng)?;
        let draw_ids = |rng: &mut SeededRng| {
            (0..dims.tokens)
                .map(|_| rng.below(dims.vocab))
                .collect::<Vec<_>>()
        };
        let ids = draw_ids(&mut rng);
        let negatives = (0..dims.g).map(|_| draw_ids(&mut rng)).collect();
        let image = DenseVector::new((0..dims.n).map(|_| rng.normal(0.0, 1.0)).collect())?;
        let label = rng.below(dims.classes);
        Ok(Self {
            config,
            params,
            ids,
            image,
            label,
            negatives,
        })
    }

    pub fn sample(&self) -> Sample<'_> {
        let input = ModelInput::new(Some(&self.ids), Some(&self.image));
        let input = match self.config.mode {
            Mode::TextOnly => input.text_only(),
            Mode::ImageOnly => input.image_only(),
            _ => input,
        };
        let negatives = if self.config.mode == Mode::CommonSpace {
            self.negatives.iter().map(Vec::as_slice).collect()
        } else {
            Vec::new()
        };
        Sample {
            input,
            label: self.label,
            negatives,
        }
    }

    /// [`grad_check`] with dropout masks drawn from substream 1 of `seed`.
    pub fn check(&self, seed: u64, step: f64, tolerance: f64) -> Result<GradCheckReport> {
        let mut rng = SeededRng::new(seed).substream(1);
        grad_check(
            &self.params,
            &self.sample(),
            &self.config,
            step,
            tolerance,
            &mut rng,
        )
    }
}
