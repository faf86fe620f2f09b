//! Accuracy, F-macro and F-micro over a confusion matrix, and the
//! missing-modality evaluation protocol.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fusion::{Model, ModelInput};

/// Which modalities the model is shown at evaluation time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityFilter {
    #[default]
    Both,
    TextOnly,
    ImageOnly,
}

impl ModalityFilter {
    pub const ALL: [ModalityFilter; 3] = [Self::Both, Self::TextOnly, Self::ImageOnly];

    pub fn name(self) -> &'static str {
        match self {
            Self::Both => "both",
            Self::TextOnly => "text_only",
            Self::ImageOnly => "image_only",
        }
    }

    /// The filtered input, or `None` when the post lacks the kept modality.
    pub fn apply<'a>(self, input: ModelInput<'a>) -> Option<ModelInput<'a>> {
        match self {
            Self::Both => Some(input),
            Self::TextOnly => input.text.is_some().then(|| input.text_only()),
            Self::ImageOnly => input.image.is_some().then(|| input.image_only()),
        }
    }
}

impl fmt::Display for ModalityFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModalityFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown modality filter {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub f_macro: f64,
    pub f_micro: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
    pub per_class: Vec<ClassMetrics>,
    pub evaluated: u64,
    pub skipped: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

impl MetricsReport {
    pub fn from_confusion(
        classes: &[String],
        confusion: Vec<Vec<u64>>,
        skipped: u64,
    ) -> Result<Self> {
        let k = classes.len();
        if confusion.len() != k || confusion.iter().any(|r| r.len() != k) {
            return Err(Error::shape(
                "MetricsReport::from_confusion",
                confusion.len(),
                k,
            ));
        }
        let total: u64 = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(Error::Evaluation("no evaluable posts".into()));
        }
        let correct: u64 = (0..k).map(|i| confusion[i][i]).sum();
        let mut per_class = Vec::with_capacity(k);
        let (mut tp_all, mut fp_all, mut fn_all) = (0, 0, 0);
        for (c, name) in classes.iter().enumerate() {
            let tp = confusion[c][c];
            let support: u64 = confusion[c].iter().sum();
            let predicted: u64 = confusion.iter().map(|r| r[c]).sum();
            tp_all += tp;
            fp_all += predicted - tp;
            fn_all += support - tp;
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            per_class.push(ClassMetrics {
                class: name.clone(),
                precision,
                recall,
                f1: f1(precision, recall),
                support,
            });
        }
        let f_macro = per_class.iter().map(|c| c.f1).sum::<f64>() / k as f64;
        let f_micro = f1(
            ratio(tp_all, tp_all + fp_all),
            ratio(tp_all, tp_all + fn_all),
        );
        Ok(Self {
            accuracy: ratio(correct, total),
            f_macro,
            f_micro,
            confusion,
            per_class,
            evaluated: total,
            skipped,
        })
    }

    /// Builds the report from `(true, predicted)` class pairs.
    pub fn from_pairs(classes: &[String], pairs: &[(usize, usize)], skipped: u64) -> Result<Self> {
        let k = classes.len();
        let mut confusion = vec![vec![0u64; k]; k];
        for &(t, p) in pairs {
            if t >= k || p >= k {
                return Err(Error::Class {
                    index: t.max(p),
                    count: k,
                });
            }
            confusion[t][p] += 1;
        }
        Self::from_confusion(classes, confusion, skipped)
    }

    /// Plain-text table: per-class scores, confusion matrix and totals.
    pub fn table(&self) -> String {
        let width = self
            .per_class
            .iter()
            .map(|c| c.class.len())
            .max()
            .unwrap_or(5)
            .max(5);
        let mut out = format!("{:<width$}  precision  recall     f1  support\n", "class");
        for c in &self.per_class {
            out += &format!(
                "{:<width$}  {:>9.4}  {:>6.4}  {:>5.4}  {:>7}\n",
                c.class, c.precision, c.recall, c.f1, c.support
            );
        }
        out += "\nconfusion (rows true, columns predicted)\n";
        for (c, row) in self.per_class.iter().zip(&self.confusion) {
            let cells: Vec<String> = row.iter().map(|n| format!("{n:>6}")).collect();
            out += &format!("{:<width$}{}\n", c.class, cells.join(""));
        }
        out += &format!(
            "\naccuracy {:.4}  f_macro {:.4}  f_micro {:.4}  evaluated {}  skipped {}\n",
            self.accuracy, self.f_macro, self.f_micro, self.evaluated, self.skipped
        );
        out
    }
}

/// Vocabulary ids per post, computed once for a given model vocabulary.
pub struct EncodedPosts<'d> {
    pub data: &'d Dataset,
    ids: Vec<Option<Vec<usize>>>,
    labels: Vec<usize>,
}

impl<'d> EncodedPosts<'d> {
    /// Maps tokens through `model`'s vocabulary and labels through its class list.
    pub fn new(data: &'d Dataset, model: &Model) -> Result<Self> {
        let mut labels = Vec::with_capacity(data.posts.len());
        for p in &data.posts {
            let idx = model
                .classes
                .iter()
                .position(|c| *c == p.label)
                .ok_or_else(|| Error::Validation {
                    id: p.id.clone(),
                    message: format!("label {:?} unknown to the model", p.label),
                })?;
            labels.push(idx);
        }
        let ids = data
            .posts
            .iter()
            .map(|p| p.tokens.as_ref().map(|t| model.vocabulary.ids(t)))
            .collect();
        Ok(Self { data, ids, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input(&self, i: usize) -> ModelInput<'_> {
        ModelInput::new(self.ids[i].as_deref(), self.data.image(&self.data.posts[i]))
    }

    pub fn ids(&self, i: usize) -> Option<&[usize]> {
        self.ids[i].as_deref()
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }
}

/// Classifies the posts at `indices` with the filtered inputs. Posts lacking
/// the kept modality, or that the model's mode cannot handle, are skipped.
pub fn evaluate(
    model: &Model,
    posts: &EncodedPosts<'_>,
    indices: &[usize],
    filter: ModalityFilter,
) -> Result<MetricsReport> {
    let mut pairs = Vec::with_capacity(indices.len());
    let mut skipped = 0;
    for &i in indices {
        match filter
            .apply(posts.input(i))
            .filter(|inp| inp.supports(model.config.mode))
        {
            Some(input) => pairs.push((posts.label(i), model.predict(input)?)),
            None => skipped += 1,
        }
    }
    if pairs.is_empty() {
        return Err(Error::Evaluation(format!(
            "no post among {} supports {} input for a {} model",
            indices.len(),
            filter,
            model.config.mode
        )));
    }
    MetricsReport::from_pairs(&model.classes, &pairs, skipped)
}

/// Accuracy over the supported posts at `indices`; 0 when none is supported.
pub fn accuracy(model: &Model, posts: &EncodedPosts<'_>, indices: &[usize]) -> Result<f64> {
    let mut correct = 0u64;
    let mut total = 0u64;
    for &i in indices {
        let input = posts.input(i);
        if input.supports(model.config.mode) {
            total += 1;
            correct += u64::from(model.predict(input)? == posts.label(i));
        }
    }
    Ok(ratio(correct, total))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn ten_sample_fixture() {
        let r = MetricsReport::from_confusion(&names(2), vec![vec![3, 1], vec![2, 4]], 0).unwrap();
        assert!((r.accuracy - 0.7).abs() < 1e-9);
        assert!((r.f_micro - 0.7).abs() < 1e-9);
        assert!((r.per_class[0].f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.per_class[1].f1 - 8.0 / 11.0).abs() < 1e-12);
        assert!((r.f_macro - 23.0 / 33.0).abs() < 1e-9);
    }

    #[test]
    fn perfect_predictions() {
        let pairs: Vec<(usize, usize)> = (0..12).map(|i| (i % 3, i % 3)).collect();
        let r = MetricsReport::from_pairs(&names(3), &pairs, 0).unwrap();
        assert_eq!((r.accuracy, r.f_macro, r.f_micro), (1.0, 1.0, 1.0));
    }

    #[test]
    fn absent_class_scores_zero() {
        let r = MetricsReport::from_pairs(&names(3), &[(0, 0), (1, 1)], 0).unwrap();
        assert_eq!(r.per_class[2].f1, 0.0);
        assert!((r.f_macro - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_and_out_of_range() {
        assert!(matches!(
            MetricsReport::from_pairs(&names(2), &[], 3),
            Err(Error::Evaluation(_))
        ));
        assert!(MetricsReport::from_pairs(&names(2), &[(0, 2)], 0).is_err());
    }

    #[test]
    fn filter_parses() {
        for f in ModalityFilter::ALL {
            assert_eq!(f.name().parse::<ModalityFilter>().unwrap(), f);
        }
        assert!("text".parse::<ModalityFilter>().is_err());
    }
}
