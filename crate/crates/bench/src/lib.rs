//! Fixed-size workloads shared by the benchmarks.

use mmfusion::encoders::EmbeddingTable;
use mmfusion::losses::Sample;
use mmfusion::{DenseVector, FusionConfig, Mode, ModelInput, ModelParams, SeededRng};

pub const VOCAB: usize = 5_000;
pub const TOKENS: usize = 30;

/// Default-sized parameters plus one post and `g` negative texts.
pub struct Workload {
    pub config: FusionConfig,
    pub params: ModelParams,
    pub tokens: Vec<usize>,
    pub image: DenseVector,
    pub negatives: Vec<Vec<usize>>,
}

impl Workload {
    /// Panics on `Mode::Late`, which has no single parameter stack.
    pub fn new(mode: Mode, seed: u64) -> Self {
        let config = FusionConfig {
            mode,
            class_count: 16,
            ..FusionConfig::default()
        };
        let mut rng = SeededRng::new(seed);
        let table = mode
            .uses_text()
            .then(|| EmbeddingTable::random(VOCAB, config.d, &mut rng));
        let params = ModelParams::init(&config, table, &mut rng).expect("valid workload config");
        let text = |rng: &mut SeededRng| (0..TOKENS).map(|_| rng.below(VOCAB)).collect::<Vec<_>>();
        let tokens = text(&mut rng);
        let negatives = (0..config.g).map(|_| text(&mut rng)).collect();
        let image = DenseVector::new(
            (0..config.image_dim)
                .map(|_| rng.normal(0.0, 0.1))
                .collect(),
        )
        .expect("finite image");
        Self {
            config,
            params,
            tokens,
            image,
            negatives,
        }
    }

    pub fn input(&self) -> ModelInput<'_> {
        let text = self
            .config
            .mode
            .uses_text()
            .then_some(self.tokens.as_slice());
        let image = self.config.mode.uses_image().then_some(&self.image);
        ModelInput::new(text, image)
    }

    pub fn sample(&self) -> Sample<'_> {
        let negatives = if self.config.mode == Mode::CommonSpace {
            self.negatives.iter().map(Vec::as_slice).collect()
        } else {
            Vec::new()
        };
        Sample {
            input: self.input(),
            label: 3,
            negatives,
        }
    }
}

/// `count` random probability vectors of length `classes`.
pub fn distributions(classes: usize, count: usize, seed: u64) -> Vec<DenseVector> {
    let mut rng = SeededRng::new(seed);
    (0..count)
        .map(|_| {
            let z = DenseVector::new((0..classes).map(|_| rng.normal(0.0, 1.0)).collect())
                .expect("finite");
            mmfusion::numkit::stable_softmax(&z)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_single_stack_mode_builds() {
        for mode in Mode::ALL.into_iter().filter(|&m| m != Mode::Late) {
            let w = Workload::new(mode, 1);
            assert!(w.input().supports(mode), "{mode}");
        }
    }
}
