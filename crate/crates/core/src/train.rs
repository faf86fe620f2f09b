//! Per-sample SGD with negative sampling and best-on-validation snapshots.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetSplit};
use crate::encoders::{build_vocabulary, load_embeddings, Dropout, EmbeddingTable, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{accuracy, EncodedPosts};
use crate::fusion::{forward, FusionConfig, Mode, Model, ModelInput, ModelParams, ModelWeights};
use crate::losses::{loss_and_grad, Sample};
use crate::numkit::{sample_distinct, squared_distance, SeededRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub validation_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    /// Parameters after the last completed epoch.
    pub model: Model,
    pub epoch: usize,
    pub rng: SeededRng,
    pub best_validation_accuracy: f64,
    /// Epoch the snapshot was taken after; 0 is the initialization.
    pub best_epoch: usize,
    pub best: Model,
    pub history: Vec<EpochStats>,
}

/// Training posts with text, grouped by class, for drawing negatives.
pub struct NegativePool {
    by_class: Vec<Vec<usize>>,
}

impl NegativePool {
    pub fn new(posts: &EncodedPosts<'_>, train: &[usize], classes: usize) -> Self {
        let mut by_class = vec![Vec::new(); classes];
        for &i in train {
            if posts.ids(i).is_some_and(|ids| !ids.is_empty()) {
                by_class[posts.label(i)].push(i);
            }
        }
        Self { by_class }
    }

    /// `g` distinct posts drawn uniformly from every class but `anchor_class`.
    pub fn sample(&self, rng: &mut SeededRng, anchor_class: usize, g: usize) -> Result<Vec<usize>> {
        if g == 0 {
            return Ok(Vec::new());
        }
        let pool: Vec<usize> = self
            .by_class
            .iter()
            .enumerate()
            .filter(|&(c, _)| c != anchor_class)
            .flat_map(|(_, posts)| posts.iter().copied())
            .collect();
        Ok(sample_distinct(rng, pool.len(), g)?
            .into_iter()
            .map(|k| pool[k])
            .collect())
    }
}

/// Vocabulary over the tokens of the given posts (every token kept).
pub fn train_vocabulary(data: &Dataset, indices: &[usize]) -> Result<Vocabulary> {
    build_vocabulary(
        indices
            .iter()
            .filter_map(|&i| data.posts[i].tokens.as_deref()),
        1,
    )
}

fn check_shapes(data: &Dataset, config: &FusionConfig) -> Result<()> {
    if data.classes.len() != config.class_count {
        return Err(Error::Config(format!(
            "class_count is {}, dataset declares {} classes",
            config.class_count,
            data.classes.len()
        )));
    }
    if config.mode.uses_image() {
        if let Some(n) = data.image_dim().filter(|&n| n != config.image_dim) {
            return Err(Error::Config(format!(
                "image_dim is {}, dataset features have {n}",
                config.image_dim
            )));
        }
    }
    Ok(())
}

/// Fresh model: vocabulary from the training split, embeddings from `embeddings`
/// when given (missing rows random), parameters from substream 0 of `seed`.
pub fn init_model(
    data: &Dataset,
    split: &DatasetSplit,
    config: &FusionConfig,
    embeddings: Option<&Path>,
    seed: u64,
) -> Result<Model> {
    config.validate()?;
    check_shapes(data, config)?;
    let mut rng = SeededRng::new(seed).substream(0);
    let vocabulary = match train_vocabulary(data, &split.train) {
        Ok(v) => v,
        Err(Error::EmptyVocabulary) if !config.mode.uses_text() => {
            Vocabulary::from_tokens(Vec::<String>::new())
        }
        Err(e) => return Err(e),
    };
    let table = if config.mode.uses_text() {
        Some(match embeddings {
            Some(path) => load_embeddings(path, &vocabulary, config.d, &mut rng)?,
            None => EmbeddingTable::random(vocabulary.len(), config.d, &mut rng),
        })
    } else {
        None
    };
    Model::init(
        config.clone(),
        vocabulary,
        data.classes.clone(),
        table,
        &mut rng,
    )
}

fn step(
    params: &mut ModelParams,
    config: &FusionConfig,
    sample: &Sample<'_>,
    rng: &mut SeededRng,
) -> Result<f64> {
    let mut dropout = if config.dropout_p > 0.0 {
        Dropout::Train {
            p: config.dropout_p,
            rng,
        }
    } else {
        Dropout::Off
    };
    let (eval, grads) = loss_and_grad(sample, params, config, &mut dropout)?;
    if !grads.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite gradient at loss {}",
            eval.loss.total
        )));
    }
    params.sgd_step(&grads, config.learning_rate, config.freeze_embeddings);
    Ok(eval.loss.total)
}

/// Runs `epochs` passes of per-sample SGD over `split.train` starting from
/// `model`. Epoch `e` draws its shuffle, dropout masks and negatives from
/// substream `e` of `seed`. After each epoch the validation accuracy is
/// measured and the parameters snapshotted when it strictly improves.
pub fn train_model(
    model: Model,
    data: &Dataset,
    split: &DatasetSplit,
    epochs: usize,
    seed: u64,
) -> Result<TrainState> {
    let mut model = model;
    let config = model.config.clone();
    let root = SeededRng::new(seed);

    let best_validation_accuracy = {
        let posts = EncodedPosts::new(data, &model)?;
        accuracy(&model, &posts, &split.validation)?
    };
    let mut state_best = model.clone();
    let mut best_acc = best_validation_accuracy;
    let mut best_epoch = 0;
    let mut history = Vec::with_capacity(epochs);
    let mut rng = root.substream(0);

    let encoded = EncodedPosts::new(data, &model)?;
    let negatives = NegativePool::new(&encoded, &split.train, model.classes.len());
    let branch_configs = (
        config.with_mode(Mode::TextOnly),
        config.with_mode(Mode::ImageOnly),
    );

    for epoch in 1..=epochs {
        rng = root.substream(epoch as u64);
        let mut order = split.train.clone();
        rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for &i in &order {
            let input = encoded.input(i);
            let label = encoded.label(i);
            let post_id = &data.posts[i].id;
            let fail = |e: Error| match e {
                Error::Numeric(msg) => {
                    Error::Numeric(format!("epoch {epoch}, post {post_id}: {msg}"))
                }
                other => other,
            };
            match &mut model.weights {
                ModelWeights::Single(params) => {
                    let input = match config.mode {
                        Mode::TextOnly => input.text_only(),
                        Mode::ImageOnly => input.image_only(),
                        _ => input,
                    };
                    if !input.supports(config.mode) {
                        continue;
                    }
                    let negs = if config.mode == Mode::CommonSpace {
                        negatives.sample(&mut rng, label, config.g)?
                    } else {
                        Vec::new()
                    };
                    let sample = Sample {
                        input,
                        label,
                        negatives: negs.iter().filter_map(|&n| encoded.ids(n)).collect(),
                    };
                    loss_sum += step(params, &config, &sample, &mut rng).map_err(fail)?;
                    steps += 1;
                }
                ModelWeights::Late { text, image } => {
                    let mut total = 0.0;
                    let mut any = false;
                    if input.text.is_some() {
                        let sample = Sample {
                            input: input.text_only(),
                            label,
                            negatives: Vec::new(),
                        };
                        total += step(text, &branch_configs.0, &sample, &mut rng).map_err(fail)?;
                        any = true;
                    }
                    if input.image.is_some() {
                        let sample = Sample {
                            input: input.image_only(),
                            label,
                            negatives: Vec::new(),
                        };
                        total += step(image, &branch_configs.1, &sample, &mut rng).map_err(fail)?;
                        any = true;
                    }
                    if any {
                        loss_sum += total;
                        steps += 1;
                    }
                }
            }
        }
        if !model.is_finite() {
            return Err(Error::Numeric(format!(
                "epoch {epoch}: parameters became non-finite"
            )));
        }

        let validation_accuracy = accuracy(&model, &encoded, &split.validation)?;
        history.push(EpochStats {
            epoch,
            mean_loss: if steps == 0 {
                0.0
            } else {
                loss_sum / steps as f64
            },
            validation_accuracy,
        });
        if validation_accuracy > best_acc {
            best_acc = validation_accuracy;
            best_epoch = epoch;
            state_best = model.clone();
        }
    }

    Ok(TrainState {
        model,
        epoch: epochs,
        rng,
        best_validation_accuracy: best_acc,
        best_epoch,
        best: state_best,
        history,
    })
}

/// [`init_model`] followed by [`train_model`].
pub fn train(
    data: &Dataset,
    split: &DatasetSplit,
    config: &FusionConfig,
    embeddings: Option<&Path>,
    epochs: usize,
    seed: u64,
) -> Result<TrainState> {
    let model = init_model(data, split, config, embeddings, seed)?;
    train_model(model, data, split, epochs, seed)
}

/// Mean squared distance between each post's projected image and its own
/// text, and between the image and `g` random other-class texts, over the
/// posts at `indices` that have both modalities. Pooled modes only.
pub fn mean_pair_distances(
    model: &Model,
    data: &Dataset,
    indices: &[usize],
    rng: &mut SeededRng,
) -> Result<(f64, f64)> {
    let ModelWeights::Single(params) = &model.weights else {
        return Err(Error::Config("pair distances need a pooled model".into()));
    };
    if !model.config.mode.is_pooled() {
        return Err(Error::Config("pair distances need a pooled model".into()));
    }
    let posts = EncodedPosts::new(data, model)?;
    let pool = NegativePool::new(&posts, indices, model.classes.len());
    let g = model.config.g.max(1);
    let encode = |input: ModelInput<'_>| {
        forward(input, params, &model.config, &mut Dropout::Off).map(|(_, c)| c)
    };

    let (mut pos, mut neg, mut n_pos, mut n_neg) = (0.0, 0.0, 0usize, 0usize);
    for &i in indices {
        let input = posts.input(i);
        let Some(ids) = input.text.filter(|t| !t.is_empty()) else {
            continue;
        };
        if input.image.is_none() {
            continue;
        }
        let image = encode(input.image_only())?.post.vector;
        let text = encode(ModelInput::new(Some(ids), None))?.post.vector;
        pos += squared_distance(&image, &text)?;
        n_pos += 1;
        for j in pool.sample(rng, posts.label(i), g)? {
            let other = encode(ModelInput::new(posts.ids(j), None))?.post.vector;
            neg += squared_distance(&image, &other)?;
            n_neg += 1;
        }
    }
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Evaluation("no image-text pairs to measure".into()));
    }
    Ok((pos / n_pos as f64, neg / n_neg as f64))
}
