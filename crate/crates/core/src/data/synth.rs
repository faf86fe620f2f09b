//! Two-bit synthetic dataset: the label is `2·b_t + b_v`, text carries `b_t`
//! and the image vector carries `b_v`, so neither modality alone suffices.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::posts::{write_posts, ImageSource, Manifest, Post};
use crate::encoders::{FeatureStore, WhitespaceTokenizer};
use crate::error::{Error, Result};
use crate::numkit::{DenseVector, SeededRng};

const SIGNAL_VOCAB: usize = 10;
const FILLER_VOCAB: usize = 50;
const SIGNAL_TOKENS: usize = 2;
const FILLER_TOKENS: usize = 4;
const FEATURE_NOISE: f64 = 0.5;
const EMBEDDING_SD: f64 = 0.1;

pub const POSTS_FILE: &str = "posts.jsonl";
pub const FEATURES_FILE: &str = "features.mmf";
pub const EMBEDDINGS_FILE: &str = "embeddings.txt";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub per_class: usize,
    pub classes: usize,
    /// Width of the word vectors written to the embeddings file.
    pub d_text: usize,
    pub n_image: usize,
    pub xor_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            per_class: 250,
            classes: 4,
            d_text: 200,
            n_image: 8,
            xor_fraction: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes != 4 {
            return Err(Error::Config(format!(
                "classes must be 4 (two latent bits), got {}",
                self.classes
            )));
        }
        if self.per_class < 25 {
            return Err(Error::Config(format!(
                "per_class must be at least 25, got {}",
                self.per_class
            )));
        }
        if !(0.0..=1.0).contains(&self.xor_fraction) {
            return Err(Error::Config(format!(
                "xor_fraction must lie in [0, 1], got {}",
                self.xor_fraction
            )));
        }
        if self.d_text == 0 || self.n_image == 0 {
            return Err(Error::Config("d_text and n_image must be positive".into()));
        }
        Ok(())
    }
}

/// In-memory synthetic dataset; [`SyntheticDataset::write`] puts it on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub config: SynthConfig,
    pub classes: Vec<String>,
    pub posts: Vec<Post>,
    pub features: FeatureStore,
    /// Word vectors for every token the generator can emit.
    pub embeddings: Vec<(String, Vec<f64>)>,
}

pub fn class_name(b_t: usize, b_v: usize) -> String {
    format!("t{b_t}v{b_v}")
}

fn signal_token(b_t: usize, i: usize) -> String {
    format!("{}{i}", if b_t == 0 { "alpha" } else { "beta" })
}

fn hint_token(b_v: usize, i: usize) -> String {
    format!("{}{i}", if b_v == 0 { "gamma" } else { "delta" })
}

fn direction(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| if rng.bernoulli(0.5) { 1.0 } else { -1.0 })
        .collect()
}

pub fn gen_synthetic(config: &SynthConfig) -> Result<SyntheticDataset> {
    config.validate()?;
    let mut rng = SeededRng::new(config.seed);
    let n = config.n_image;
    let u_v = direction(&mut rng, n);
    let u_t = direction(&mut rng, n);

    let classes: Vec<String> = (0..4).map(|k| class_name(k / 2, k % 2)).collect();
    let total = 4 * config.per_class;
    let mut labels: Vec<usize> = (0..total).map(|i| i % 4).collect();
    rng.shuffle(&mut labels);

    let mut posts = Vec::with_capacity(total);
    let mut rows = Vec::with_capacity(total);
    for (i, &k) in labels.iter().enumerate() {
        let (b_t, b_v) = (k / 2, k % 2);
        let s_t = if b_t == 0 { -1.0 } else { 1.0 };
        let s_v = if b_v == 0 { -1.0 } else { 1.0 };

        let mut tokens: Vec<String> = (0..SIGNAL_TOKENS)
            .map(|_| signal_token(b_t, rng.below(SIGNAL_VOCAB)))
            .collect();
        if !rng.bernoulli(config.xor_fraction) {
            tokens.push(hint_token(b_v, rng.below(SIGNAL_VOCAB)));
        }
        tokens.extend((0..FILLER_TOKENS).map(|_| format!("w{}", rng.below(FILLER_VOCAB))));
        rng.shuffle(&mut tokens);

        let hint_image = !rng.bernoulli(config.xor_fraction);
        let feat: Vec<f64> = (0..n)
            .map(|j| {
                let hint = if hint_image { s_t * u_t[j] } else { 0.0 };
                s_v * u_v[j] + hint + rng.normal(0.0, FEATURE_NOISE)
            })
            .collect();
        // Stored as f32 in the feature file; round now so memory matches disk.
        let feat = feat.into_iter().map(|x| x as f32 as f64).collect();
        rows.push(DenseVector::new(feat)?);

        let sort_key = rng.below(1_000_000) as i64;
        posts.push(Post::new(
            format!("s{i:05}"),
            Some(tokens.join(" ")),
            Some(ImageSource::Record(i)),
            classes[k].clone(),
            sort_key,
            &WhitespaceTokenizer,
        ));
    }

    let mut words: Vec<String> = Vec::new();
    for b in 0..2 {
        words.extend((0..SIGNAL_VOCAB).map(|i| signal_token(b, i)));
        words.extend((0..SIGNAL_VOCAB).map(|i| hint_token(b, i)));
    }
    words.extend((0..FILLER_VOCAB).map(|i| format!("w{i}")));
    let embeddings = words
        .into_iter()
        .map(|w| {
            let v = (0..config.d_text)
                .map(|_| round5(rng.normal(0.0, EMBEDDING_SD)))
                .collect();
            (w, v)
        })
        .collect();

    Ok(SyntheticDataset {
        config: config.clone(),
        classes,
        posts,
        features: FeatureStore::new(n, rows)?,
        embeddings,
    })
}

fn round5(x: f64) -> f64 {
    format!("{x:.5}").parse().expect("formatted float parses")
}

impl SyntheticDataset {
    pub fn manifest(&self) -> Manifest {
        let c = &self.config;
        Manifest {
            posts: POSTS_FILE.into(),
            features: Some(FEATURES_FILE.into()),
            embeddings: Some(EMBEDDINGS_FILE.into()),
            classes: self.classes.clone(),
            provenance: format!(
                "synthetic two-bit dataset: seed {}, per_class {}, d_text {}, n_image {}, xor_fraction {}",
                c.seed, c.per_class, c.d_text, c.n_image, c.xor_fraction
            ),
        }
    }

    /// Writes posts, features, embeddings and manifest into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_posts(&self.posts, &dir.join(POSTS_FILE))?;
        self.features.write(&dir.join(FEATURES_FILE))?;
        let mut text = String::new();
        for (word, v) in &self.embeddings {
            text.push_str(word);
            for x in v {
                write!(text, " {x:.5}").expect("write to string");
            }
            text.push('\n');
        }
        let path = dir.join(EMBEDDINGS_FILE);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        self.manifest().write(&dir.join(MANIFEST_FILE))
    }
}
