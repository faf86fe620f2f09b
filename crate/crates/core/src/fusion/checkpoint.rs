//! `MMCK` checkpoint files.
//!
//! Layout (little-endian): magic `MMCK`, `u32` version, `u32` header length,
//! header JSON (`config`, `classes`, `vocabulary`), then tensors until end of
//! file, each as `u32` name length, name bytes, `u32` rows, `u32` cols and
//! rows×cols `f64` values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{FusionConfig, Mode};
use super::model::{Model, ModelParams, ModelWeights};
use crate::encoders::{EmbeddingTable, Vocabulary};
use crate::error::{Error, Result};
use crate::numkit::{DenseMatrix, DenseVector, Linear};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: FusionConfig,
    classes: Vec<String>,
    vocabulary: Vocabulary,
}

fn write_params(buf: &mut Vec<u8>, prefix: &str, params: &ModelParams) {
    for (name, rows, cols, values) in params.tensors() {
        let name = format!("{prefix}{name}");
        buf.extend((name.len() as u32).to_le_bytes());
        buf.extend(name.as_bytes());
        buf.extend((rows as u32).to_le_bytes());
        buf.extend((cols as u32).to_le_bytes());
        for v in values {
            buf.extend(v.to_le_bytes());
        }
    }
}

pub fn encode_checkpoint(model: &Model) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        classes: model.classes.clone(),
        vocabulary: model.vocabulary.clone(),
    })?;
    let mut buf = Vec::new();
    buf.extend(CHECKPOINT_MAGIC);
    buf.extend(CHECKPOINT_VERSION.to_le_bytes());
    buf.extend((header.len() as u32).to_le_bytes());
    buf.extend(header);
    match &model.weights {
        ModelWeights::Single(p) => write_params(&mut buf, "", p),
        ModelWeights::Late { text, image } => {
            write_params(&mut buf, "text.", text);
            write_params(&mut buf, "image.", image);
        }
    }
    Ok(buf)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

type Tensors = BTreeMap<String, (usize, usize, Vec<f64>)>;

fn take_matrix(t: &mut Tensors, name: &str) -> Result<DenseMatrix> {
    let (r, c, v) = t
        .remove(name)
        .ok_or_else(|| Error::State(format!("checkpoint lacks tensor {name}")))?;
    DenseMatrix::new(r, c, v)
}

fn take_linear(t: &mut Tensors, prefix: &str) -> Result<Linear> {
    let weight = take_matrix(t, &format!("{prefix}.weight"))?;
    let bias = take_matrix(t, &format!("{prefix}.bias"))?;
    if bias.cols() != 1 {
        return Err(Error::shape("checkpoint bias", &bias, "a column"));
    }
    Linear::new(weight, DenseVector::new(bias.as_slice().to_vec())?)
}

fn read_params(t: &mut Tensors, prefix: &str, config: &FusionConfig) -> Result<ModelParams> {
    let embeddings = config
        .mode
        .uses_text()
        .then(|| take_matrix(t, &format!("{prefix}embeddings")).map(EmbeddingTable::new))
        .transpose()?;
    let projection = config
        .mode
        .is_pooled()
        .then(|| take_linear(t, &format!("{prefix}projection")))
        .transpose()?;
    let hidden = take_linear(t, &format!("{prefix}hidden"))?;
    let head = take_linear(t, &format!("{prefix}head"))?;
    if hidden.inputs() != config.post_dim()
        || head.inputs() != hidden.outputs()
        || head.outputs() != config.class_count
    {
        return Err(Error::State("checkpoint tensor shapes do not chain".into()));
    }
    Ok(ModelParams {
        embeddings,
        projection,
        hidden,
        head,
    })
}

pub fn decode_checkpoint(bytes: &[u8], origin: &Path) -> Result<Model> {
    let bad = |message: &str| Error::Format {
        path: origin.to_owned(),
        message: message.to_owned(),
    };
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4) != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(bad("missing MMCK magic"));
    }
    let version = r.u32().ok_or_else(|| bad("truncated header"))?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
    let header: Header =
        serde_json::from_slice(r.take(len).ok_or_else(|| bad("truncated header"))?)?;
    header.config.validate()?;

    let mut tensors = Tensors::new();
    while !r.done() {
        let n = r.u32().ok_or_else(|| bad("truncated tensor name"))? as usize;
        let name = std::str::from_utf8(r.take(n).ok_or_else(|| bad("truncated tensor name"))?)
            .map_err(|_| bad("tensor name is not UTF-8"))?
            .to_owned();
        let rows = r.u32().ok_or_else(|| bad("truncated tensor shape"))? as usize;
        let cols = r.u32().ok_or_else(|| bad("truncated tensor shape"))? as usize;
        let raw = r
            .take(rows * cols * 8)
            .ok_or_else(|| bad(&format!("truncated values of {name}")))?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if tensors.insert(name.clone(), (rows, cols, values)).is_some() {
            return Err(bad(&format!("duplicate tensor {name}")));
        }
    }

    let config = header.config;
    let weights = match config.mode {
        Mode::Late => ModelWeights::Late {
            text: read_params(&mut tensors, "text.", &config.with_mode(Mode::TextOnly))?,
            image: read_params(&mut tensors, "image.", &config.with_mode(Mode::ImageOnly))?,
        },
        _ => ModelWeights::Single(read_params(&mut tensors, "", &config)?),
    };
    if let Some(extra) = tensors.keys().next() {
        return Err(bad(&format!("unexpected tensor {extra}")));
    }
    Ok(Model {
        config,
        vocabulary: header.vocabulary,
        classes: header.classes,
        weights,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::SeededRng;

    fn model(mode: Mode) -> Model {
        let config = FusionConfig {
            mode,
            d: 3,
            h: 2,
            image_dim: 4,
            class_count: 3,
            ..Default::default()
        };
        let vocab = Vocabulary::from_tokens(["a", "b"]);
        let mut rng = SeededRng::new(11);
        let table = EmbeddingTable::random(2, 3, &mut rng);
        Model::init(
            config,
            vocab,
            vec!["x".into(), "y".into(), "z".into()],
            Some(table),
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for mode in Mode::ALL {
            let m = model(mode);
            let bytes = encode_checkpoint(&m).unwrap();
            let back = decode_checkpoint(&bytes, Path::new("mem")).unwrap();
            assert_eq!(back, m, "{mode}");
            assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode_checkpoint(&model(Mode::Joint)).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3], Path::new("mem")).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(decode_checkpoint(&wrong, Path::new("mem")).is_err());
    }
}
