use std::collections::{HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoders::{FeatureStore, Tokenizer, WhitespaceTokenizer};
use crate::error::{Error, Result};
use crate::numkit::DenseVector;

/// Where a post's image feature vector lives.
#[derive(Clone, Debug, PartialEq)]
pub enum ImageSource {
    /// Record index into the dataset's `MMF1` feature file.
    Record(usize),
    Inline(DenseVector),
}

/// One classification unit: text, an image feature vector, or both.
#[derive(Clone, Debug, PartialEq)]
pub struct Post {
    pub id: String,
    pub text: Option<String>,
    /// Tokenized `text`; `None` when there is no text or it has no tokens.
    pub tokens: Option<Vec<String>>,
    pub image: Option<ImageSource>,
    pub label: String,
    /// Upvotes or annotator agreements; larger means more reliable.
    pub sort_key: i64,
}

impl Post {
    pub fn new(
        id: impl Into<String>,
        text: Option<String>,
        image: Option<ImageSource>,
        label: impl Into<String>,
        sort_key: i64,
        tokenizer: &dyn Tokenizer,
    ) -> Self {
        let tokens = text
            .as_deref()
            .map(|t| tokenizer.tokenize(t))
            .filter(|t| !t.is_empty());
        Self {
            id: id.into(),
            text,
            tokens,
            image,
            label: label.into(),
            sort_key,
        }
    }

    pub fn has_text(&self) -> bool {
        self.tokens.is_some()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PostRecord {
    id: String,
    label: String,
    sort_key: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feat: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feat_inline: Option<Vec<f64>>,
}

/// Posts plus the class list and, when posts reference records, the feature file.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub posts: Vec<Post>,
    pub classes: Vec<String>,
    pub features: Option<FeatureStore>,
}

impl Dataset {
    pub fn image<'a>(&'a self, post: &'a Post) -> Option<&'a DenseVector> {
        match post.image.as_ref()? {
            ImageSource::Inline(v) => Some(v),
            ImageSource::Record(i) => self.features.as_ref()?.get(*i),
        }
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }

    /// Width of the image vectors, if any post has one.
    pub fn image_dim(&self) -> Option<usize> {
        self.posts
            .iter()
            .find_map(|p| self.image(p))
            .map(DenseVector::dim)
    }
}

fn invalid(id: &str, message: impl Into<String>) -> Error {
    Error::Validation {
        id: id.to_owned(),
        message: message.into(),
    }
}

/// Reads a JSON-lines posts file and validates every record.
///
/// Classes are ordered by first appearance. A dataset uses either inline
/// feature arrays or feature-file records, never both.
pub fn load_posts(posts_path: &Path, features_path: Option<&Path>) -> Result<Dataset> {
    load_posts_with(posts_path, features_path, &WhitespaceTokenizer)
}

pub fn load_posts_with(
    posts_path: &Path,
    features_path: Option<&Path>,
    tokenizer: &dyn Tokenizer,
) -> Result<Dataset> {
    let features = features_path.map(FeatureStore::read).transpose()?;
    let file = File::open(posts_path).map_err(|e| Error::io(posts_path, e))?;

    let mut posts = Vec::new();
    let mut classes: Vec<String> = Vec::new();
    let mut seen = HashSet::new();
    let mut inline_dim: Option<usize> = None;
    let mut used_inline = false;
    let mut used_records = false;

    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(posts_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PostRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: posts_path.to_owned(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let id = rec.id.clone();
        if !seen.insert(id.clone()) {
            return Err(invalid(&id, "duplicate id"));
        }
        let image = match (rec.feat, rec.feat_inline) {
            (Some(_), Some(_)) => return Err(invalid(&id, "both feat and feat_inline given")),
            (Some(idx), None) => {
                used_records = true;
                let store = features
                    .as_ref()
                    .ok_or_else(|| invalid(&id, "feature index given but no feature file"))?;
                let idx = usize::try_from(idx).unwrap_or(usize::MAX);
                if idx >= store.len() {
                    return Err(invalid(
                        &id,
                        format!("feature index {idx} out of range ({} records)", store.len()),
                    ));
                }
                Some(ImageSource::Record(idx))
            }
            (None, Some(values)) => {
                used_inline = true;
                let v = DenseVector::new(values).map_err(|e| invalid(&id, e.to_string()))?;
                match inline_dim {
                    Some(d) if d != v.dim() => {
                        return Err(invalid(
                            &id,
                            format!("inline features of dim {}, expected {d}", v.dim()),
                        ))
                    }
                    _ => inline_dim = Some(v.dim()),
                }
                Some(ImageSource::Inline(v))
            }
            (None, None) => None,
        };
        if used_inline && used_records {
            return Err(invalid(
                &id,
                "dataset mixes inline features and feature-file records",
            ));
        }
        let post = Post::new(id, rec.text, image, rec.label, rec.sort_key, tokenizer);
        if !post.has_text() && post.image.is_none() {
            return Err(invalid(
                &post.id,
                "post has neither text nor image features",
            ));
        }
        if !classes.contains(&post.label) {
            classes.push(post.label.clone());
        }
        posts.push(post);
    }
    if posts.is_empty() {
        return Err(Error::Empty("posts file"));
    }
    Ok(Dataset {
        posts,
        classes,
        features,
    })
}

/// Writes posts as JSON lines (the inverse of [`load_posts`]).
pub fn write_posts(posts: &[Post], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in posts {
        let (feat, feat_inline) = match &p.image {
            Some(ImageSource::Record(i)) => (Some(*i as u64), None),
            Some(ImageSource::Inline(v)) => (None, Some(v.as_slice().to_vec())),
            None => (None, None),
        };
        let rec = PostRecord {
            id: p.id.clone(),
            label: p.label.clone(),
            sort_key: p.sort_key,
            text: p.text.clone(),
            feat,
            feat_inline,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Dataset manifest: file locations (relative to the manifest), the declared
/// class list, and free-form provenance notes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub posts: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
    pub classes: Vec<String>,
    #[serde(default)]
    pub provenance: String,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    fn resolve(base: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_owned()
        } else {
            base.join(p)
        }
    }

    pub fn posts_path(&self, manifest_path: &Path) -> PathBuf {
        Self::resolve(
            manifest_path.parent().unwrap_or(Path::new(".")),
            &self.posts,
        )
    }

    pub fn features_path(&self, manifest_path: &Path) -> Option<PathBuf> {
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        self.features.as_deref().map(|f| Self::resolve(base, f))
    }

    pub fn embeddings_path(&self, manifest_path: &Path) -> Option<PathBuf> {
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        self.embeddings.as_deref().map(|f| Self::resolve(base, f))
    }
}

/// Loads the dataset a manifest describes. Classes follow the manifest's
/// declared order; every label must be declared.
pub fn load_manifest(manifest_path: &Path) -> Result<(Manifest, Dataset)> {
    let manifest = Manifest::read(manifest_path)?;
    let features = manifest.features_path(manifest_path);
    let mut data = load_posts(&manifest.posts_path(manifest_path), features.as_deref())?;
    let declared: HashMap<&str, usize> = manifest
        .classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    if declared.len() != manifest.classes.len() {
        return Err(Error::Config("manifest declares a class twice".into()));
    }
    if let Some(p) = data
        .posts
        .iter()
        .find(|p| !declared.contains_key(p.label.as_str()))
    {
        return Err(invalid(
            &p.id,
            format!("label {:?} not in the manifest class list", p.label),
        ));
    }
    data.classes = manifest.classes.clone();
    Ok((manifest, data))
}
