use mmfusion::data::{gen_synthetic, make_splits, Dataset, DatasetSplit, SynthConfig};
use mmfusion::eval::{accuracy, EncodedPosts};
use mmfusion::train::{init_model, mean_pair_distances, train_model, NegativePool};
use mmfusion::{evaluate, train, FusionConfig, ModalityFilter, Mode, SeededRng};

fn dataset(xor_fraction: f64, per_class: usize) -> (Dataset, DatasetSplit) {
    let s = gen_synthetic(&SynthConfig {
        seed: 3,
        per_class,
        d_text: 8,
        n_image: 8,
        xor_fraction,
        ..SynthConfig::default()
    })
    .unwrap();
    let data = Dataset {
        posts: s.posts,
        classes: s.classes,
        features: Some(s.features),
    };
    let split = make_splits(&data.posts).unwrap();
    (data, split)
}

fn config(mode: Mode) -> FusionConfig {
    FusionConfig {
        mode,
        d: 8,
        h: 8,
        image_dim: 8,
        ..FusionConfig::default()
    }
}

#[test]
fn zero_epochs_keeps_initialization() {
    let (data, split) = dataset(1.0, 25);
    for mode in Mode::ALL {
        let init = init_model(&data, &split, &config(mode), None, 5).unwrap();
        let state = train_model(init.clone(), &data, &split, 0, 5).unwrap();
        assert_eq!(state.model, init, "{mode}");
        assert_eq!(state.best, init, "{mode}");
        assert_eq!(state.best_epoch, 0);
        assert!(state.history.is_empty());
    }
}

#[test]
fn same_seed_same_model() {
    let (data, split) = dataset(1.0, 25);
    for mode in Mode::ALL {
        let a = train(&data, &split, &config(mode), None, 3, 11).unwrap();
        let b = train(&data, &split, &config(mode), None, 3, 11).unwrap();
        assert_eq!(a.model, b.model, "{mode}");
        assert_eq!(a.history, b.history, "{mode}");
        let c = train(&data, &split, &config(mode), None, 3, 12).unwrap();
        assert_ne!(a.model, c.model, "{mode}");
    }
}

#[test]
fn snapshot_is_best_on_validation() {
    let (data, split) = dataset(1.0, 50);
    for mode in [Mode::Joint, Mode::CommonSpace, Mode::Late] {
        let state = train(&data, &split, &config(mode), None, 10, 1).unwrap();
        let posts = EncodedPosts::new(&data, &state.best).unwrap();
        let best = accuracy(&state.best, &posts, &split.validation).unwrap();
        assert_eq!(best, state.best_validation_accuracy, "{mode}");
        for h in &state.history {
            assert!(h.validation_accuracy <= best, "{mode} epoch {}", h.epoch);
        }
        let last = accuracy(&state.model, &posts, &split.validation).unwrap();
        assert!(best >= last);
        if state.best_epoch > 0 {
            assert_eq!(
                state.history[state.best_epoch - 1].validation_accuracy,
                best
            );
        }
    }
}

#[test]
fn informative_modalities_are_learned() {
    let (data, split) = dataset(0.0, 50);
    for mode in [Mode::Early, Mode::Joint, Mode::CommonSpace, Mode::Late] {
        let state = train(&data, &split, &config(mode), None, 20, 1).unwrap();
        let posts = EncodedPosts::new(&data, &state.best).unwrap();
        let r = evaluate(&state.best, &posts, &split.test, ModalityFilter::Both).unwrap();
        assert!(r.accuracy >= 0.95, "{mode}: {}", r.accuracy);
    }
}

#[test]
fn loss_keeps_falling_within_a_window() {
    let (data, split) = dataset(1.0, 50);
    for mode in [Mode::Early, Mode::Joint, Mode::CommonSpace] {
        let state = train(&data, &split, &config(mode), None, 20, 1).unwrap();
        let losses: Vec<f64> = state.history.iter().map(|h| h.mean_loss).collect();
        for (e, w) in losses.windows(6).enumerate() {
            let ahead = w[1..].iter().copied().fold(f64::INFINITY, f64::min);
            assert!(
                ahead <= w[0],
                "{mode}: epoch {} loss {} never beaten: {:?}",
                e + 1,
                w[0],
                &w[1..]
            );
        }
        assert!(losses.last() < losses.first(), "{mode}");
    }
}

#[test]
fn evaluation_is_pure() {
    let (data, split) = dataset(1.0, 25);
    let state = train(&data, &split, &config(Mode::CommonSpace), None, 2, 1).unwrap();
    let before = state.best.clone();
    let posts = EncodedPosts::new(&data, &state.best).unwrap();
    let a = evaluate(&state.best, &posts, &split.test, ModalityFilter::Both).unwrap();
    let b = evaluate(&state.best, &posts, &split.test, ModalityFilter::Both).unwrap();
    assert_eq!(a, b);
    assert_eq!(state.best, before);
    assert!((a.f_micro - a.accuracy).abs() <= 1e-12);
}

#[test]
fn negatives_come_from_other_classes() {
    let (data, split) = dataset(1.0, 25);
    let model = init_model(&data, &split, &config(Mode::CommonSpace), None, 1).unwrap();
    let posts = EncodedPosts::new(&data, &model).unwrap();
    let pool = NegativePool::new(&posts, &split.train, 4);
    let mut rng = SeededRng::new(9);
    assert!(pool.sample(&mut rng, 0, 0).unwrap().is_empty());
    for anchor in 0..4 {
        for _ in 0..50 {
            let negs = pool.sample(&mut rng, anchor, 5).unwrap();
            assert_eq!(negs.len(), 5);
            let mut uniq = negs.clone();
            uniq.sort_unstable();
            uniq.dedup();
            assert_eq!(uniq.len(), 5);
            assert!(negs
                .iter()
                .all(|&n| posts.label(n) != anchor && split.train.contains(&n)));
        }
    }
    let draw = |seed| pool.sample(&mut SeededRng::new(seed), 2, 3).unwrap();
    assert_eq!(draw(4), draw(4));
    assert!(pool.sample(&mut rng, 1, 10_000).is_err());
}

#[test]
fn common_space_pulls_matching_pairs_together() {
    let (data, split) = dataset(0.0, 50);
    let state = train(&data, &split, &config(Mode::CommonSpace), None, 10, 1).unwrap();
    let (pos, neg) =
        mean_pair_distances(&state.best, &data, &split.test, &mut SeededRng::new(1)).unwrap();
    assert!(pos < neg, "d_pos {pos} d_neg {neg}");
}

#[test]
fn mismatched_shapes_rejected() {
    let (data, split) = dataset(1.0, 25);
    let bad_classes = FusionConfig {
        class_count: 3,
        ..config(Mode::Joint)
    };
    assert!(init_model(&data, &split, &bad_classes, None, 1).is_err());
    let bad_image = FusionConfig {
        image_dim: 9,
        ..config(Mode::Joint)
    };
    assert!(init_model(&data, &split, &bad_image, None, 1).is_err());
    // Text-only models never look at the image width.
    let text = FusionConfig {
        image_dim: 9,
        ..config(Mode::TextOnly)
    };
    assert!(init_model(&data, &split, &text, None, 1).is_ok());
}
