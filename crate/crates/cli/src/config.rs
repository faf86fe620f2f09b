use std::fs;
use std::path::{Path, PathBuf};

use mmfusion::data::{load_manifest, load_posts, Dataset, Manifest};
use mmfusion::{Error, FusionConfig, Result};
use serde_json::{Map, Value};

pub const DEFAULT_EPOCHS: usize = 30;
pub const DEFAULT_SEED: u64 = 1;

/// A training run: where the data is, where outputs go, and the model config.
///
/// The JSON document is flat: the keys below plus any `FusionConfig` field.
/// `image_dim` and `class_count` are inferred from the data when omitted.
/// Relative paths resolve against the config file's directory.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub posts: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub epochs: usize,
    pub seed: u64,
    fusion: Map<String, Value>,
}

const RUN_KEYS: [&str; 8] = [
    "manifest",
    "posts",
    "features",
    "embeddings",
    "checkpoint",
    "metrics",
    "epochs",
    "seed",
];

fn take_path(map: &mut Map<String, Value>, key: &str, base: &Path) -> Result<Option<PathBuf>> {
    match map.remove(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => {
            let p = PathBuf::from(s);
            Ok(Some(if p.is_absolute() { p } else { base.join(p) }))
        }
        Some(other) => Err(Error::Config(format!(
            "{key} must be a path string, got {other}"
        ))),
    }
}

fn take_uint(map: &mut Map<String, Value>, key: &str, default: u64) -> Result<u64> {
    match map.remove(key) {
        None => Ok(default),
        Some(v) => v
            .as_u64()
            .ok_or_else(|| Error::Config(format!("{key} must be a non-negative integer, got {v}"))),
    }
}

impl RunConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_owned(),
            source: e,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let Value::Object(mut map) = serde_json::from_str(text)? else {
            return Err(Error::Config("run config must be a JSON object".into()));
        };
        let manifest = take_path(&mut map, "manifest", base)?;
        let posts = take_path(&mut map, "posts", base)?;
        let features = take_path(&mut map, "features", base)?;
        let embeddings = take_path(&mut map, "embeddings", base)?;
        let checkpoint = take_path(&mut map, "checkpoint", base)?
            .ok_or_else(|| Error::Config("run config needs a checkpoint path".into()))?;
        let metrics = take_path(&mut map, "metrics", base)?
            .ok_or_else(|| Error::Config("run config needs a metrics path".into()))?;
        let epochs = take_uint(&mut map, "epochs", DEFAULT_EPOCHS as u64)? as usize;
        let seed = take_uint(&mut map, "seed", DEFAULT_SEED)?;
        match (&manifest, &posts) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "give either manifest or posts, not both".into(),
                ))
            }
            (None, None) => {
                return Err(Error::Config(
                    "run config needs a manifest or a posts path".into(),
                ))
            }
            _ => {}
        }
        if manifest.is_some() && features.is_some() {
            return Err(Error::Config(
                "features come from the manifest; drop the features key".into(),
            ));
        }
        // Surface unknown keys now rather than after loading the data.
        serde_json::from_value::<FusionConfig>(Value::Object(map.clone()))
            .map_err(|e| Error::Config(format!("{e} (run keys: {})", RUN_KEYS.join(", "))))?;
        Ok(Self {
            manifest,
            posts,
            features,
            embeddings,
            checkpoint,
            metrics,
            epochs,
            seed,
            fusion: map,
        })
    }

    /// Loads the dataset and, for manifests, resolves the embeddings path.
    pub fn load_data(&self) -> Result<LoadedData> {
        match (&self.manifest, &self.posts) {
            (Some(m), _) => {
                let (manifest, data) = load_manifest(m)?;
                let embeddings = self
                    .embeddings
                    .clone()
                    .or_else(|| manifest.embeddings_path(m));
                Ok(LoadedData {
                    data,
                    embeddings,
                    identity_file: m.clone(),
                    manifest: Some(manifest),
                })
            }
            (None, Some(p)) => Ok(LoadedData {
                data: load_posts(p, self.features.as_deref())?,
                embeddings: self.embeddings.clone(),
                identity_file: p.clone(),
                manifest: None,
            }),
            (None, None) => unreachable!("checked in parse"),
        }
    }

    /// The effective model configuration for `data`.
    pub fn fusion_config(&self, data: &Dataset) -> Result<FusionConfig> {
        let mut map = self.fusion.clone();
        if !map.contains_key("class_count") {
            map.insert("class_count".into(), data.classes.len().into());
        }
        if !map.contains_key("image_dim") {
            if let Some(n) = data.image_dim() {
                map.insert("image_dim".into(), n.into());
            }
        }
        let config: FusionConfig = serde_json::from_value(Value::Object(map))?;
        config.validate()?;
        Ok(config)
    }
}

pub struct LoadedData {
    pub data: Dataset,
    pub embeddings: Option<PathBuf>,
    /// File whose bytes identify the dataset in the metrics output.
    pub identity_file: PathBuf,
    pub manifest: Option<Manifest>,
}
