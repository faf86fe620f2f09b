use serde::{Deserialize, Serialize};

use super::config::{FusionConfig, Mode};
use crate::encoders::{
    encode_ids, init_projection, Dropout, EmbeddingTable, ProjectionParams, Reduce, TextEncoding,
    Vocabulary,
};
use crate::error::{Error, Result};
use crate::numkit::{argmax, stable_softmax, DenseVector, Linear, SeededRng};

/// One post as the model sees it: vocabulary ids for the text (possibly
/// empty when every token was out of vocabulary) and the raw image feature.
#[derive(Clone, Copy, Debug, Default)]
pub struct ModelInput<'a> {
    pub text: Option<&'a [usize]>,
    pub image: Option<&'a DenseVector>,
}

impl<'a> ModelInput<'a> {
    pub fn new(text: Option<&'a [usize]>, image: Option<&'a DenseVector>) -> Self {
        Self { text, image }
    }

    pub fn text_only(self) -> Self {
        Self {
            image: None,
            ..self
        }
    }

    pub fn image_only(self) -> Self {
        Self { text: None, ..self }
    }

    /// Whether a model of this mode can classify the input.
    pub fn supports(&self, mode: Mode) -> bool {
        match mode {
            Mode::TextOnly => self.text.is_some(),
            Mode::ImageOnly => self.image.is_some(),
            Mode::Early => self.text.is_some() && self.image.is_some(),
            Mode::Late | Mode::Joint | Mode::CommonSpace => {
                self.text.is_some() || self.image.is_some()
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Both,
    TextOnly,
    ImageOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PostVector {
    pub vector: DenseVector,
    pub provenance: Provenance,
}

/// Trainable parameters of one classifier stack.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub embeddings: Option<EmbeddingTable>,
    pub projection: Option<ProjectionParams>,
    pub hidden: Linear,
    pub head: Linear,
}

impl ModelParams {
    /// Fresh parameters for a single-stack mode. `embeddings` must be given
    /// for every mode that reads text.
    pub fn init(
        config: &FusionConfig,
        embeddings: Option<EmbeddingTable>,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if config.mode == Mode::Late {
            return Err(Error::Config("late fusion has no single stack".into()));
        }
        let embeddings = if config.mode.uses_text() {
            let table = embeddings.ok_or_else(|| {
                Error::Config(format!("{} mode needs an embedding table", config.mode))
            })?;
            if table.dim() != config.d {
                return Err(Error::shape("ModelParams::init", table.dim(), config.d));
            }
            Some(table)
        } else {
            None
        };
        let projection = config
            .mode
            .is_pooled()
            .then(|| init_projection(config.d, config.image_dim, rng));
        let hidden = Linear::init_uniform(config.h, config.post_dim(), rng);
        let head = Linear::init_uniform(config.class_count, config.h, rng);
        Ok(Self {
            embeddings,
            projection,
            hidden,
            head,
        })
    }

    /// `(name, rows, cols, values)` for every tensor, in checkpoint order.
    pub fn tensors(&self) -> Vec<(&'static str, usize, usize, &[f64])> {
        let mut out = Vec::new();
        if let Some(e) = &self.embeddings {
            let m = e.matrix();
            out.push(("embeddings", m.rows(), m.cols(), m.as_slice()));
        }
        if let Some(p) = &self.projection {
            push_linear(&mut out, "projection", p);
        }
        push_linear(&mut out, "hidden", &self.hidden);
        push_linear(&mut out, "head", &self.head);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut out: Vec<(&'static str, &mut [f64])> = Vec::new();
        if let Some(e) = &mut self.embeddings {
            out.push(("embeddings", e.matrix_mut().as_mut_slice()));
        }
        if let Some(p) = &mut self.projection {
            out.push(("projection.weight", p.weight.as_mut_slice()));
            out.push(("projection.bias", p.bias.as_mut_slice()));
        }
        out.push(("hidden.weight", self.hidden.weight.as_mut_slice()));
        out.push(("hidden.bias", self.hidden.bias.as_mut_slice()));
        out.push(("head.weight", self.head.weight.as_mut_slice()));
        out.push(("head.bias", self.head.bias.as_mut_slice()));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, _, _, v)| v.iter().all(|x| x.is_finite()))
    }
}

fn push_linear<'a>(
    out: &mut Vec<(&'static str, usize, usize, &'a [f64])>,
    prefix: &'static str,
    l: &'a Linear,
) {
    let (w, b) = match prefix {
        "projection" => ("projection.weight", "projection.bias"),
        "hidden" => ("hidden.weight", "hidden.bias"),
        _ => ("head.weight", "head.bias"),
    };
    out.push((w, l.weight.rows(), l.weight.cols(), l.weight.as_slice()));
    out.push((b, l.bias.dim(), 1, l.bias.as_slice()));
}

/// How the post vector was assembled, for routing gradients back.
#[derive(Clone, Debug, PartialEq)]
pub enum FusionTrace {
    /// Unimodal stack or early-fusion concatenation.
    Direct,
    /// Pooling over a single available modality.
    Singleton(Provenance),
    /// Componentwise max; `true` where the text vector won (ties go to text).
    Max(Vec<bool>),
    Avg,
}

fn pool_pair(a: &[f64], b: &[f64], pooling: Reduce) -> (Vec<f64>, FusionTrace) {
    match pooling {
        Reduce::Max => {
            let won: Vec<bool> = a.iter().zip(b).map(|(x, y)| x >= y).collect();
            let v = a.iter().zip(b).map(|(x, y)| x.max(*y)).collect();
            (v, FusionTrace::Max(won))
        }
        Reduce::Avg => (
            a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect(),
            FusionTrace::Avg,
        ),
    }
}

fn fuse_traced(
    text: Option<&DenseVector>,
    image: Option<&DenseVector>,
    config: &FusionConfig,
) -> Result<(PostVector, FusionTrace)> {
    let check = |v: &DenseVector, want: usize, what: &'static str| {
        if v.dim() == want {
            Ok(())
        } else {
            Err(Error::shape(
                "fuse",
                format!("{what} of dim {}", v.dim()),
                format!("expected {want}"),
            ))
        }
    };
    match config.mode {
        Mode::Early => {
            let (Some(t), Some(i)) = (text, image) else {
                return Err(Error::ModalityRequired {
                    mode: "early",
                    missing: if text.is_none() { "text" } else { "image" },
                });
            };
            check(t, config.d, "text vector")?;
            check(i, config.image_dim, "image vector")?;
            let mut v = i.as_slice().to_vec();
            v.extend_from_slice(t.as_slice());
            Ok((
                PostVector {
                    vector: DenseVector::from_raw(v),
                    provenance: Provenance::Both,
                },
                FusionTrace::Direct,
            ))
        }
        Mode::Joint | Mode::CommonSpace => {
            for (v, what) in [(text, "text vector"), (image, "projected image")] {
                if let Some(v) = v {
                    check(v, config.d, what)?;
                }
            }
            match (text, image) {
                (Some(t), Some(i)) => {
                    let (v, trace) = pool_pair(t.as_slice(), i.as_slice(), config.pooling);
                    Ok((
                        PostVector {
                            vector: DenseVector::from_raw(v),
                            provenance: Provenance::Both,
                        },
                        trace,
                    ))
                }
                (Some(t), None) => Ok((
                    PostVector {
                        vector: t.clone(),
                        provenance: Provenance::TextOnly,
                    },
                    FusionTrace::Singleton(Provenance::TextOnly),
                )),
                (None, Some(i)) => Ok((
                    PostVector {
                        vector: i.clone(),
                        provenance: Provenance::ImageOnly,
                    },
                    FusionTrace::Singleton(Provenance::ImageOnly),
                )),
                (None, None) => Err(Error::EmptyPost),
            }
        }
        other => Err(Error::Config(format!(
            "fuse is not defined for {other} mode"
        ))),
    }
}

/// Builds the post vector: concatenation `[image; text]` for early fusion,
/// componentwise pooling for joint/common-space fusion. Under pooling a
/// single available modality passes through unchanged.
pub fn fuse(
    text: Option<&DenseVector>,
    image: Option<&DenseVector>,
    config: &FusionConfig,
) -> Result<PostVector> {
    fuse_traced(text, image, config).map(|(p, _)| p)
}

/// Everything backprop needs from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub mode: Mode,
    /// Present when the text branch ran on at least one in-vocabulary token.
    pub text: Option<TextEncoding>,
    /// Text was present but fully out of vocabulary; a zero vector stood in.
    pub text_substituted: bool,
    pub projected_image: Option<DenseVector>,
    pub trace: FusionTrace,
    pub post: PostVector,
    pub hidden: DenseVector,
    pub logits: DenseVector,
    pub probabilities: DenseVector,
}

impl ForwardCache {
    /// Dropout masks drawn during this pass, in encoding order.
    pub fn masks(&self) -> Vec<Vec<f64>> {
        self.text.iter().filter_map(|t| t.masks.clone()).collect()
    }
}

pub(crate) fn encode_optional_text(
    ids: &[usize],
    params: &ModelParams,
    config: &FusionConfig,
    dropout: &mut Dropout<'_>,
) -> Result<(DenseVector, Option<TextEncoding>)> {
    let table = params
        .embeddings
        .as_ref()
        .ok_or_else(|| Error::State("text input but no embedding table".into()))?;
    if ids.is_empty() {
        return Ok((DenseVector::zeros(config.d), None));
    }
    let enc = encode_ids(ids, table, config.aggregation, dropout)?;
    Ok((enc.vector.clone(), Some(enc)))
}

/// `softmax(W²(W_h x + b_h) + b²)` for one post. Dropout on the text branch
/// is active unless `dropout` is [`Dropout::Off`].
pub fn forward(
    input: ModelInput<'_>,
    params: &ModelParams,
    config: &FusionConfig,
    dropout: &mut Dropout<'_>,
) -> Result<(DenseVector, ForwardCache)> {
    let mode = config.mode;
    let missing = |missing| Error::ModalityRequired {
        mode: mode.name(),
        missing,
    };

    let mut text_enc = None;
    let mut text_substituted = false;
    let mut projected_image = None;

    let text_vec = match (mode.uses_text(), input.text) {
        (true, Some(ids)) => {
            let (v, enc) = encode_optional_text(ids, params, config, dropout)?;
            text_substituted = enc.is_none();
            text_enc = enc;
            Some(v)
        }
        _ => None,
    };

    let (post, trace) = match mode {
        Mode::TextOnly => {
            let v = text_vec.ok_or_else(|| missing("text"))?;
            (
                PostVector {
                    vector: v,
                    provenance: Provenance::TextOnly,
                },
                FusionTrace::Direct,
            )
        }
        Mode::ImageOnly => {
            let v = input.image.ok_or_else(|| missing("image"))?;
            if v.dim() != config.image_dim {
                return Err(Error::shape("forward", v.dim(), config.image_dim));
            }
            (
                PostVector {
                    vector: v.clone(),
                    provenance: Provenance::ImageOnly,
                },
                FusionTrace::Direct,
            )
        }
        Mode::Early => fuse_traced(text_vec.as_ref(), input.image, config)?,
        Mode::Joint | Mode::CommonSpace => {
            if let Some(img) = input.image {
                let proj = params
                    .projection
                    .as_ref()
                    .ok_or_else(|| Error::State("pooled mode without projection".into()))?;
                if img.dim() != config.image_dim {
                    return Err(Error::shape("forward", img.dim(), config.image_dim));
                }
                projected_image = Some(proj.forward(img)?);
            }
            fuse_traced(text_vec.as_ref(), projected_image.as_ref(), config)?
        }
        Mode::Late => return Err(Error::Config("late fusion has no single stack".into())),
    };

    let expected = config.post_dim();
    if post.vector.dim() != expected {
        return Err(Error::shape("forward", post.vector.dim(), expected));
    }

    let hidden = params.hidden.forward(&post.vector)?;
    let logits = params.head.forward(&hidden)?;
    let probabilities = stable_softmax(&logits);
    if !probabilities.is_finite() {
        return Err(Error::Numeric("non-finite class probabilities".into()));
    }
    let cache = ForwardCache {
        mode,
        text: text_enc,
        text_substituted,
        projected_image,
        trace,
        post,
        hidden,
        logits,
        probabilities: probabilities.clone(),
    };
    Ok((probabilities, cache))
}

/// Most probable class under eval-mode forward; ties go to the lowest index.
pub fn predict(
    input: ModelInput<'_>,
    params: &ModelParams,
    config: &FusionConfig,
) -> Result<usize> {
    let (p, _) = forward(input, params, config, &mut Dropout::Off)?;
    Ok(p.argmax())
}

/// Elementwise product of two class distributions and its argmax.
pub fn late_fuse(p_image: &DenseVector, p_text: &DenseVector) -> Result<(DenseVector, usize)> {
    if p_image.dim() != p_text.dim() {
        return Err(Error::shape("late_fuse", p_image.dim(), p_text.dim()));
    }
    for p in [p_image, p_text] {
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > 1e-9 || p.iter().any(|&v| v < 0.0) {
            return Err(Error::Numeric(format!(
                "late_fuse expects probability vectors, got one summing to {total}"
            )));
        }
    }
    let scores: Vec<f64> = p_image
        .iter()
        .zip(p_text.iter())
        .map(|(a, b)| a * b)
        .collect();
    let best = argmax(&scores);
    Ok((DenseVector::from_raw(scores), best))
}

#[derive(Clone, Debug, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum ModelWeights {
    Single(ModelParams),
    /// Two independently trained unimodal stacks.
    Late {
        text: ModelParams,
        image: ModelParams,
    },
}

/// A complete classifier: configuration, vocabulary, class names and weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: FusionConfig,
    pub vocabulary: Vocabulary,
    pub classes: Vec<String>,
    pub weights: ModelWeights,
}

impl Model {
    pub fn init(
        config: FusionConfig,
        vocabulary: Vocabulary,
        classes: Vec<String>,
        embeddings: Option<EmbeddingTable>,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        config.validate()?;
        if classes.len() != config.class_count {
            return Err(Error::Config(format!(
                "config declares {} classes, dataset has {}",
                config.class_count,
                classes.len()
            )));
        }
        if let Some(e) = &embeddings {
            if e.len() != vocabulary.len() {
                return Err(Error::shape("Model::init", e.len(), vocabulary.len()));
            }
        }
        let weights = match config.mode {
            Mode::Late => ModelWeights::Late {
                text: ModelParams::init(&config.with_mode(Mode::TextOnly), embeddings, rng)?,
                image: ModelParams::init(&config.with_mode(Mode::ImageOnly), None, rng)?,
            },
            _ => ModelWeights::Single(ModelParams::init(&config, embeddings, rng)?),
        };
        Ok(Self {
            config,
            vocabulary,
            classes,
            weights,
        })
    }

    /// Class scores in eval mode. For late fusion these are the unnormalized
    /// products when both modalities are present, otherwise the available
    /// branch's distribution.
    pub fn scores(&self, input: ModelInput<'_>) -> Result<DenseVector> {
        match &self.weights {
            ModelWeights::Single(params) => {
                forward(input, params, &self.config, &mut Dropout::Off).map(|(p, _)| p)
            }
            ModelWeights::Late { text, image } => {
                let p_text = input
                    .text
                    .map(|_| {
                        let cfg = self.config.with_mode(Mode::TextOnly);
                        forward(input, text, &cfg, &mut Dropout::Off).map(|(p, _)| p)
                    })
                    .transpose()?;
                let p_image = input
                    .image
                    .map(|_| {
                        let cfg = self.config.with_mode(Mode::ImageOnly);
                        forward(input, image, &cfg, &mut Dropout::Off).map(|(p, _)| p)
                    })
                    .transpose()?;
                match (p_image, p_text) {
                    (Some(pi), Some(pt)) => late_fuse(&pi, &pt).map(|(s, _)| s),
                    (Some(p), None) | (None, Some(p)) => Ok(p),
                    (None, None) => Err(Error::EmptyPost),
                }
            }
        }
    }

    pub fn predict(&self, input: ModelInput<'_>) -> Result<usize> {
        self.scores(input).map(|s| s.argmax())
    }

    pub fn is_finite(&self) -> bool {
        match &self.weights {
            ModelWeights::Single(p) => p.is_finite(),
            ModelWeights::Late { text, image } => text.is_finite() && image.is_finite(),
        }
    }
}
