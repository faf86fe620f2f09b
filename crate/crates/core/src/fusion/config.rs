use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoders::{Reduce, DEFAULT_IMAGE_DIM};
use crate::error::{Error, Result};

/// Which modalities a model consumes and how it combines them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    TextOnly,
    ImageOnly,
    Early,
    Late,
    Joint,
    CommonSpace,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::ImageOnly,
        Mode::TextOnly,
        Mode::Late,
        Mode::Early,
        Mode::Joint,
        Mode::CommonSpace,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::TextOnly => "text_only",
            Mode::ImageOnly => "image_only",
            Mode::Early => "early",
            Mode::Late => "late",
            Mode::Joint => "joint",
            Mode::CommonSpace => "common_space",
        }
    }

    /// Joint and common-space models pool both modalities in the text space.
    pub fn is_pooled(self) -> bool {
        matches!(self, Mode::Joint | Mode::CommonSpace)
    }

    pub fn uses_text(self) -> bool {
        !matches!(self, Mode::ImageOnly)
    }

    pub fn uses_image(self) -> bool {
        !matches!(self, Mode::TextOnly)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

/// Model shape and training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub mode: Mode,
    pub pooling: Reduce,
    pub aggregation: Reduce,
    /// Word embedding width, also the width of the shared text space.
    pub d: usize,
    /// Hidden (low-rank) layer width.
    pub h: usize,
    /// Negative texts per anchor image for the auxiliary loss.
    pub g: usize,
    /// Weight of the classification term in the common-space objective.
    pub lambda: f64,
    pub dropout_p: f64,
    pub learning_rate: f64,
    pub image_dim: usize,
    pub class_count: usize,
    pub freeze_embeddings: bool,
    /// Apply dropout to the texts inside the auxiliary pair terms as well.
    pub aux_text_dropout: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            mode: Mode::CommonSpace,
            pooling: Reduce::Max,
            aggregation: Reduce::Max,
            d: 200,
            h: 100,
            g: 3,
            lambda: 3.0,
            dropout_p: 0.25,
            learning_rate: 0.01,
            image_dim: DEFAULT_IMAGE_DIM,
            class_count: 4,
            freeze_embeddings: false,
            aux_text_dropout: false,
        }
    }
}

impl FusionConfig {
    pub fn with_mode(&self, mode: Mode) -> Self {
        Self {
            mode,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.h == 0 || self.image_dim == 0 {
            return fail(format!(
                "d ({}), h ({}) and image_dim ({}) must be positive",
                self.d, self.h, self.image_dim
            ));
        }
        if self.class_count < 2 {
            return fail(format!("need at least 2 classes, got {}", self.class_count));
        }
        if self.mode == Mode::CommonSpace && self.g == 0 {
            return fail("common_space fusion needs g >= 1".into());
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda must be positive, got {}", self.lambda));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail(format!(
                "dropout_p must be in [0, 1), got {}",
                self.dropout_p
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        Ok(())
    }

    /// Width of the vector fed to the hidden layer.
    pub fn post_dim(&self) -> usize {
        match self.mode {
            Mode::TextOnly | Mode::Joint | Mode::CommonSpace => self.d,
            Mode::ImageOnly => self.image_dim,
            Mode::Early => self.image_dim + self.d,
            Mode::Late => 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_hyperparameters() {
        let c = FusionConfig::default();
        assert_eq!((c.d, c.h, c.g), (200, 100, 3));
        assert_eq!(c.lambda, 3.0);
        assert_eq!(c.dropout_p, 0.25);
        assert_eq!(c.learning_rate, 0.01);
        assert_eq!((c.pooling, c.aggregation), (Reduce::Max, Reduce::Max));
        c.validate().unwrap();
    }

    #[test]
    fn validation() {
        let mut c = FusionConfig {
            g: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c.mode = Mode::Joint;
        c.validate().unwrap();
        c.class_count = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = serde_json::from_str::<FusionConfig>(r#"{"mode":"joint","bogus":1}"#);
        assert!(err.is_err());
        let c: FusionConfig = serde_json::from_str(r#"{"mode":"early","pooling":"avg"}"#).unwrap();
        assert_eq!(c.mode, Mode::Early);
        assert_eq!(c.pooling, Reduce::Avg);
        assert_eq!(c.d, 200);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
    }
}
