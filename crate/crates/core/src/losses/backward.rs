//! Hand-derived gradients of the training objectives through softmax, the
//! hidden and head layers, pooling/concatenation, aggregation, projection and
//! the embedding table.

use std::collections::BTreeMap;

use super::objective::{aux_loss_grad, combined_loss, nll_from_logits, AuxGrad, PairBatch};
use crate::encoders::{encode_ids, Dropout, TextEncoding};
use crate::error::{Error, Result};
use crate::fusion::{
    forward, ForwardCache, FusionConfig, FusionTrace, Mode, ModelInput, ModelParams, Provenance,
};
use crate::numkit::Linear;

/// One training example: the post, its class, and vocabulary ids of the
/// negative texts drawn for it (used only by common-space fusion).
#[derive(Clone, Debug)]
pub struct Sample<'a> {
    pub input: ModelInput<'a>,
    pub label: usize,
    pub negatives: Vec<&'a [usize]>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub nll: f64,
    /// Auxiliary pair loss, when it applied to this sample.
    pub aux: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct AuxState {
    pub grads: AuxGrad,
    /// Separate encoding of the post's own text; `None` when the
    /// classification-path encoding was reused.
    pub positive: Option<TextEncoding>,
    pub negatives: Vec<TextEncoding>,
}

/// Forward state of a loss evaluation, kept for [`backward`].
#[derive(Clone, Debug)]
pub struct LossEval {
    pub loss: LossBreakdown,
    pub cache: ForwardCache,
    pub aux: Option<AuxState>,
}

impl LossEval {
    /// Every dropout mask drawn, in the order encodings were computed.
    pub fn masks(&self) -> Vec<Vec<f64>> {
        let mut out = self.cache.masks();
        if let Some(aux) = &self.aux {
            if let Some(p) = &aux.positive {
                out.extend(p.masks.clone());
            }
            out.extend(aux.negatives.iter().filter_map(|n| n.masks.clone()));
        }
        out
    }
}

/// Gradients shaped like [`ModelParams`]. Embedding gradients are kept
/// sparse: only rows touched by the sample appear, in ascending row order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub embeddings: BTreeMap<usize, Vec<f64>>,
    pub projection: Option<Linear>,
    pub hidden: Linear,
    pub head: Linear,
}

impl GradientSet {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let zeros = |l: &Linear| Linear::zeros(l.outputs(), l.inputs());
        Self {
            embeddings: BTreeMap::new(),
            projection: params.projection.as_ref().map(zeros),
            hidden: zeros(&params.hidden),
            head: zeros(&params.head),
        }
    }

    /// Dense view of one named tensor, matching [`ModelParams::tensors`].
    pub fn dense(&self, name: &str, params: &ModelParams) -> Option<Vec<f64>> {
        match name {
            "embeddings" => {
                let table = params.embeddings.as_ref()?;
                let d = table.dim();
                let mut out = vec![0.0; table.len() * d];
                for (&row, g) in &self.embeddings {
                    out[row * d..(row + 1) * d].copy_from_slice(g);
                }
                Some(out)
            }
            "projection.weight" => self
                .projection
                .as_ref()
                .map(|p| p.weight.as_slice().to_vec()),
            "projection.bias" => self.projection.as_ref().map(|p| p.bias.as_slice().to_vec()),
            "hidden.weight" => Some(self.hidden.weight.as_slice().to_vec()),
            "hidden.bias" => Some(self.hidden.bias.as_slice().to_vec()),
            "head.weight" => Some(self.head.weight.as_slice().to_vec()),
            "head.bias" => Some(self.head.bias.as_slice().to_vec()),
            _ => None,
        }
    }

    pub fn is_finite(&self) -> bool {
        let lin = |l: &Linear| {
            l.weight
                .as_slice()
                .iter()
                .chain(l.bias.iter())
                .all(|v| v.is_finite())
        };
        self.embeddings.values().flatten().all(|v| v.is_finite())
            && self.projection.as_ref().is_none_or(lin)
            && lin(&self.hidden)
            && lin(&self.head)
    }

    /// Squared Euclidean norm over all entries.
    pub fn norm_squared(&self) -> f64 {
        let lin = |l: &Linear| {
            l.weight
                .as_slice()
                .iter()
                .chain(l.bias.iter())
                .map(|v| v * v)
                .sum::<f64>()
        };
        self.embeddings
            .values()
            .flatten()
            .map(|v| v * v)
            .sum::<f64>()
            + self.projection.as_ref().map_or(0.0, lin)
            + lin(&self.hidden)
            + lin(&self.head)
    }
}

impl ModelParams {
    /// `p ← p − η·g`. Embedding rows are left alone when `freeze_embeddings`.
    pub fn sgd_step(&mut self, grads: &GradientSet, learning_rate: f64, freeze_embeddings: bool) {
        let step = |dst: &mut [f64], src: &[f64]| {
            for (p, g) in dst.iter_mut().zip(src) {
                *p -= learning_rate * g;
            }
        };
        let step_linear = |dst: &mut Linear, src: &Linear| {
            step(dst.weight.as_mut_slice(), src.weight.as_slice());
            step(dst.bias.as_mut_slice(), src.bias.as_slice());
        };
        if !freeze_embeddings {
            if let Some(table) = &mut self.embeddings {
                let m = table.matrix_mut();
                for (&row, g) in &grads.embeddings {
                    step(m.row_mut(row), g);
                }
            }
        }
        if let (Some(p), Some(g)) = (&mut self.projection, &grads.projection) {
            step_linear(p, g);
        }
        step_linear(&mut self.hidden, &grads.hidden);
        step_linear(&mut self.head, &grads.head);
    }
}

fn classification_weight(config: &FusionConfig) -> f64 {
    if config.mode == Mode::CommonSpace {
        config.lambda
    } else {
        1.0
    }
}

/// Runs the forward pass and evaluates the active objective: NLL for every
/// mode, `λ·NLL + aux` for common-space fusion when the post has both
/// modalities and negatives were supplied.
pub fn evaluate_loss(
    sample: &Sample<'_>,
    params: &ModelParams,
    config: &FusionConfig,
    dropout: &mut Dropout<'_>,
) -> Result<LossEval> {
    let (_, cache) = forward(sample.input, params, config, dropout)?;
    let nll = nll_from_logits(&cache.logits, sample.label)?;

    let mut aux = None;
    let own_text = sample.input.text.filter(|ids| !ids.is_empty());
    if config.mode == Mode::CommonSpace && !sample.negatives.is_empty() {
        if let (Some(ids), Some(anchor)) = (own_text, cache.projected_image.as_ref()) {
            let table = params
                .embeddings
                .as_ref()
                .ok_or_else(|| Error::State("common_space without embeddings".into()))?;
            let mut off = Dropout::Off;
            let pair_dropout: &mut Dropout<'_> = if config.aux_text_dropout {
                dropout
            } else {
                &mut off
            };
            let (positive_vec, positive) = if config.aux_text_dropout {
                let enc = cache.text.as_ref().expect("text encoded in forward");
                (enc.vector.clone(), None)
            } else {
                let enc = encode_ids(ids, table, config.aggregation, pair_dropout)?;
                (enc.vector.clone(), Some(enc))
            };
            let negatives = sample
                .negatives
                .iter()
                .map(|neg| encode_ids(neg, table, config.aggregation, pair_dropout))
                .collect::<Result<Vec<_>>>()?;
            let batch = PairBatch {
                anchor: anchor.clone(),
                positive: positive_vec,
                negatives: negatives.iter().map(|n| n.vector.clone()).collect(),
            };
            let grads = aux_loss_grad(&batch)?;
            aux = Some(AuxState {
                grads,
                positive,
                negatives,
            });
        }
    }

    let aux_value = aux.as_ref().map(|a| a.grads.loss);
    let total = combined_loss(classification_weight(config), nll, aux_value.unwrap_or(0.0));
    if !total.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {total}")));
    }
    Ok(LossEval {
        loss: LossBreakdown {
            nll,
            aux: aux_value,
            total,
        },
        cache,
        aux,
    })
}

/// Exact gradient of the loss evaluated in `eval` with respect to every
/// parameter.
pub fn backward(
    sample: &Sample<'_>,
    params: &ModelParams,
    config: &FusionConfig,
    eval: &LossEval,
) -> Result<GradientSet> {
    let cache = &eval.cache;
    if cache.mode != config.mode {
        return Err(Error::State(format!(
            "cache from {} forward used with {} config",
            cache.mode, config.mode
        )));
    }
    let classes = cache.probabilities.dim();
    if sample.label >= classes {
        return Err(Error::Class {
            index: sample.label,
            count: classes,
        });
    }
    let mut grads = GradientSet::zeros_like(params);

    // softmax + NLL: ∂/∂z = w·(p − e_y)
    let w = classification_weight(config);
    let mut dz: Vec<f64> = cache.probabilities.iter().map(|p| w * p).collect();
    dz[sample.label] -= w;

    grads
        .head
        .weight
        .add_outer(1.0, &dz, cache.hidden.as_slice());
    grads.head.bias.as_mut_slice().copy_from_slice(&dz);
    let dh = params.head.weight.transpose_mul(&dz);

    grads
        .hidden
        .weight
        .add_outer(1.0, &dh, cache.post.vector.as_slice());
    grads.hidden.bias.as_mut_slice().copy_from_slice(&dh);
    let dx = params.hidden.weight.transpose_mul(&dh);

    let d = config.d;
    let mut d_text: Option<Vec<f64>> = None;
    let mut d_proj: Option<Vec<f64>> = None;
    match (config.mode, &cache.trace) {
        (Mode::TextOnly, _) => d_text = Some(dx),
        (Mode::ImageOnly, _) => {}
        (Mode::Early, _) => d_text = Some(dx[config.image_dim..].to_vec()),
        (_, FusionTrace::Singleton(Provenance::TextOnly)) => d_text = Some(dx),
        (_, FusionTrace::Singleton(_)) => d_proj = Some(dx),
        (_, FusionTrace::Max(text_won)) => {
            let mut t = vec![0.0; d];
            let mut i = vec![0.0; d];
            for (k, &won) in text_won.iter().enumerate() {
                if won {
                    t[k] = dx[k];
                } else {
                    i[k] = dx[k];
                }
            }
            d_text = Some(t);
            d_proj = Some(i);
        }
        (_, FusionTrace::Avg) => {
            let half: Vec<f64> = dx.iter().map(|g| 0.5 * g).collect();
            d_text = Some(half.clone());
            d_proj = Some(half);
        }
        (_, FusionTrace::Direct) => {
            return Err(Error::State("pooled mode with direct trace".into()));
        }
    }

    if let Some(aux) = &eval.aux {
        let g = &aux.grads;
        let proj = d_proj.get_or_insert_with(|| vec![0.0; d]);
        for (a, b) in proj.iter_mut().zip(&g.anchor) {
            *a += b;
        }
        match &aux.positive {
            Some(enc) => enc.backprop(&g.positive, &mut grads.embeddings),
            None => {
                let t = d_text.get_or_insert_with(|| vec![0.0; d]);
                for (a, b) in t.iter_mut().zip(&g.positive) {
                    *a += b;
                }
            }
        }
        for (enc, g_neg) in aux.negatives.iter().zip(&g.negatives) {
            enc.backprop(g_neg, &mut grads.embeddings);
        }
    }

    if let (Some(dt), Some(enc)) = (&d_text, &cache.text) {
        enc.backprop(dt, &mut grads.embeddings);
    }
    if let Some(dp) = &d_proj {
        let image = sample
            .input
            .image
            .ok_or_else(|| Error::State("projection gradient without an image".into()))?;
        let g = grads
            .projection
            .as_mut()
            .ok_or_else(|| Error::State("projection gradient without projection".into()))?;
        g.weight.add_outer(1.0, dp, image.as_slice());
        for (b, v) in g.bias.as_mut_slice().iter_mut().zip(dp) {
            *b += v;
        }
    }

    if !grads.is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    Ok(grads)
}

/// [`evaluate_loss`] followed by [`backward`].
pub fn loss_and_grad(
    sample: &Sample<'_>,
    params: &ModelParams,
    config: &FusionConfig,
    dropout: &mut Dropout<'_>,
) -> Result<(LossEval, GradientSet)> {
    let eval = evaluate_loss(sample, params, config, dropout)?;
    let grads = backward(sample, params, config, &eval)?;
    Ok((eval, grads))
}
