//! Text branch: embedding lookup, inverted dropout, then an order-invariant
//! aggregation over the looked-up rows.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::vocab::{EmbeddingTable, Vocabulary};
use crate::error::{Error, Result};
use crate::numkit::{DenseVector, SeededRng};

/// Componentwise reduction used both for aggregating word vectors and for
/// pooling modality vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduce {
    Max,
    Avg,
}

/// How dropout masks are produced for one encoding call.
pub enum Dropout<'a> {
    /// Evaluation mode: identity.
    Off,
    /// Training mode: each coordinate of each looked-up row is zeroed with
    /// probability `p` and survivors scaled by `1/(1-p)`.
    Train { p: f64, rng: &'a mut SeededRng },
    /// Reuse previously drawn scale factors (row-major, tokens × d), one
    /// entry per encoding call, consumed in order.
    Replay {
        masks: &'a [Vec<f64>],
        cursor: usize,
    },
}

impl<'a> Dropout<'a> {
    pub fn replay(masks: &'a [Vec<f64>]) -> Self {
        Dropout::Replay { masks, cursor: 0 }
    }

    pub fn is_active(&self) -> bool {
        !matches!(self, Dropout::Off)
    }

    fn masks(&mut self, len: usize) -> Result<Option<Vec<f64>>> {
        match self {
            Dropout::Off => Ok(None),
            Dropout::Train { p, rng } => {
                if !(0.0..1.0).contains(p) {
                    return Err(Error::Config(format!(
                        "dropout probability {p} not in [0, 1)"
                    )));
                }
                let keep = 1.0 / (1.0 - *p);
                Ok(Some(
                    (0..len)
                        .map(|_| if rng.bernoulli(*p) { 0.0 } else { keep })
                        .collect(),
                ))
            }
            Dropout::Replay { masks, cursor } => {
                let m = masks.get(*cursor).ok_or_else(|| {
                    Error::State(format!("no recorded dropout mask for encoding #{cursor}"))
                })?;
                *cursor += 1;
                if m.len() != len {
                    return Err(Error::State(format!(
                        "replayed dropout mask has {} entries, need {len}",
                        m.len()
                    )));
                }
                Ok(Some(m.clone()))
            }
        }
    }
}

/// An encoded text plus what backprop needs to reach the embedding rows.
#[derive(Clone, Debug)]
pub struct TextEncoding {
    pub vector: DenseVector,
    pub ids: Vec<usize>,
    /// Dropout scale factors, tokens × d, when dropout was active.
    pub masks: Option<Vec<f64>>,
    /// For max aggregation: which token position won each coordinate.
    winners: Option<Vec<usize>>,
    agg: Reduce,
}

impl TextEncoding {
    pub fn agg(&self) -> Reduce {
        self.agg
    }

    /// Adds `∂L/∂E` rows implied by `upstream = ∂L/∂vector` into `rows`.
    pub fn backprop(&self, upstream: &[f64], rows: &mut BTreeMap<usize, Vec<f64>>) {
        let d = self.vector.dim();
        debug_assert_eq!(upstream.len(), d);
        let scale = |t: usize, j: usize| self.masks.as_ref().map_or(1.0, |m| m[t * d + j]);
        match self.agg {
            Reduce::Avg => {
                let inv = 1.0 / self.ids.len() as f64;
                for (t, &id) in self.ids.iter().enumerate() {
                    let row = rows.entry(id).or_insert_with(|| vec![0.0; d]);
                    for j in 0..d {
                        row[j] += upstream[j] * scale(t, j) * inv;
                    }
                }
            }
            Reduce::Max => {
                let winners = self
                    .winners
                    .as_ref()
                    .expect("max aggregation records winners");
                for (j, &t) in winners.iter().enumerate() {
                    let g = upstream[j] * scale(t, j);
                    let row = rows.entry(self.ids[t]).or_insert_with(|| vec![0.0; d]);
                    row[j] += g;
                }
            }
        }
    }
}

/// Encodes pre-resolved vocabulary ids. Fails with `EmptyText` if `ids` is empty.
pub fn encode_ids(
    ids: &[usize],
    table: &EmbeddingTable,
    agg: Reduce,
    dropout: &mut Dropout<'_>,
) -> Result<TextEncoding> {
    if ids.is_empty() {
        return Err(Error::EmptyText);
    }
    let d = table.dim();
    if let Some(&bad) = ids.iter().find(|&&i| i >= table.len()) {
        return Err(Error::shape(
            "encode_text",
            format!("token id {bad}"),
            format!("table with {} rows", table.len()),
        ));
    }
    let masks = dropout.masks(ids.len() * d)?;
    let value = |t: usize, j: usize| {
        let e = table.row(ids[t])[j];
        masks.as_ref().map_or(e, |m| e * m[t * d + j])
    };

    let (out, winners) = match agg {
        Reduce::Avg => {
            let inv = 1.0 / ids.len() as f64;
            let out = (0..d)
                .map(|j| (0..ids.len()).map(|t| value(t, j)).sum::<f64>() * inv)
                .collect();
            (out, None)
        }
        Reduce::Max => {
            let mut out = Vec::with_capacity(d);
            let mut winners = Vec::with_capacity(d);
            for j in 0..d {
                let mut best = 0;
                let mut best_v = value(0, j);
                for t in 1..ids.len() {
                    let v = value(t, j);
                    if v > best_v {
                        best = t;
                        best_v = v;
                    }
                }
                out.push(best_v);
                winners.push(best);
            }
            (out, Some(winners))
        }
    };

    Ok(TextEncoding {
        vector: DenseVector::from_raw(out),
        ids: ids.to_vec(),
        masks,
        winners,
        agg,
    })
}

/// Looks up the in-vocabulary tokens and aggregates their rows. Unknown
/// tokens are skipped; if none remain this is an `EmptyText` error.
pub fn encode_text<S: AsRef<str>>(
    tokens: &[S],
    table: &EmbeddingTable,
    vocab: &Vocabulary,
    agg: Reduce,
    dropout: &mut Dropout<'_>,
) -> Result<DenseVector> {
    encode_ids(&vocab.ids(tokens), table, agg, dropout).map(|enc| enc.vector)
}
