use mmfusion::encoders::Dropout;
use mmfusion::losses::{
    check_function, compare_gradients, evaluate_loss, loss_and_grad, GradientSet, TinyCase,
    TinyDims,
};
use mmfusion::numkit::SeededRng;
use mmfusion::Mode;

const CHECKED: [Mode; 5] = [
    Mode::TextOnly,
    Mode::ImageOnly,
    Mode::Early,
    Mode::Joint,
    Mode::CommonSpace,
];

#[test]
fn quadratic_probe_passes_tight_tolerance() {
    let x = [0.3, -1.2, 2.0, 0.7];
    let f = |v: &[f64]| {
        v.iter()
            .enumerate()
            .map(|(i, &a)| (i as f64 + 1.0) * a * a)
            .sum::<f64>()
    };
    let grad: Vec<f64> = x
        .iter()
        .enumerate()
        .map(|(i, &a)| 2.0 * (i as f64 + 1.0) * a)
        .collect();
    let report = check_function(f, &x, &grad, 1e-5, 1e-6).unwrap();
    assert!(report.pass, "{report}");
}

#[test]
fn every_mode_passes_on_fifty_seeds() {
    for mode in CHECKED {
        for seed in 0..50 {
            let case = TinyCase::random(mode, TinyDims::default(), seed).unwrap();
            let report = case.check(seed, 1e-5, 1e-4).unwrap();
            assert!(report.pass, "{mode} seed {seed}\n{report}");
        }
    }
}

#[test]
fn corrupted_coordinate_is_reported() {
    let case = TinyCase::random(Mode::Joint, TinyDims::default(), 3).unwrap();
    let sample = case.sample();
    let mut rng = SeededRng::new(3);
    let mut dropout = Dropout::Train {
        p: 0.25,
        rng: &mut rng,
    };
    let (eval, mut grads) =
        loss_and_grad(&sample, &case.params, &case.config, &mut dropout).unwrap();
    let target = grads
        .hidden
        .weight
        .as_slice()
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(i, _)| i)
        .unwrap();
    grads.hidden.weight.as_mut_slice()[target] *= 2.0;
    let report = compare_gradients(
        &case.params,
        &sample,
        &case.config,
        &grads,
        &eval.masks(),
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(!report.pass);
    assert_eq!(report.worst(), Some(("hidden.weight", target)));
}

#[test]
fn projection_gradient_is_zero_off_path() {
    let mut case = TinyCase::random(Mode::TextOnly, TinyDims::default(), 5).unwrap();
    let joint = TinyCase::random(Mode::Joint, TinyDims::default(), 5).unwrap();
    case.params.projection = joint.params.projection.clone();
    let (_, grads) = loss_and_grad(
        &case.sample(),
        &case.params,
        &case.config,
        &mut Dropout::Off,
    )
    .unwrap();
    let proj = grads.projection.expect("projection present");
    assert!(proj
        .weight
        .as_slice()
        .iter()
        .chain(proj.bias.as_slice())
        .all(|&g| g == 0.0));
}

#[test]
fn small_sgd_step_decreases_loss() {
    for mode in CHECKED {
        for seed in 0..100 {
            let case = TinyCase::random(mode, TinyDims::default(), seed).unwrap();
            let sample = case.sample();
            let (eval, grads) =
                loss_and_grad(&sample, &case.params, &case.config, &mut Dropout::Off).unwrap();
            let mut stepped = case.params.clone();
            stepped.sgd_step(&grads, 1e-4, false);
            let after = evaluate_loss(&sample, &stepped, &case.config, &mut Dropout::Off)
                .unwrap()
                .loss
                .total;
            if grads.norm_squared() > 1e-12 {
                assert!(
                    after < eval.loss.total,
                    "{mode} seed {seed}: {} -> {after}",
                    eval.loss.total
                );
            }
        }
    }
}

#[test]
fn frozen_embeddings_stay_put() {
    let case = TinyCase::random(Mode::CommonSpace, TinyDims::default(), 9).unwrap();
    let (_, grads) = loss_and_grad(
        &case.sample(),
        &case.params,
        &case.config,
        &mut Dropout::Off,
    )
    .unwrap();
    assert!(!grads.embeddings.is_empty());
    let mut frozen = case.params.clone();
    frozen.sgd_step(&grads, 0.1, true);
    assert_eq!(frozen.embeddings, case.params.embeddings);
    assert_ne!(frozen.hidden, case.params.hidden);
}

#[test]
fn common_space_touches_negative_rows() {
    let case = TinyCase::random(Mode::CommonSpace, TinyDims::default(), 11).unwrap();
    let (_, grads) = loss_and_grad(
        &case.sample(),
        &case.params,
        &case.config,
        &mut Dropout::Off,
    )
    .unwrap();
    let own: std::collections::BTreeSet<usize> = case.ids.iter().copied().collect();
    let touched_other = grads.embeddings.keys().any(|r| !own.contains(r));
    let neg_only: Vec<usize> = case
        .negatives
        .iter()
        .flatten()
        .copied()
        .filter(|r| !own.contains(r))
        .collect();
    assert_eq!(touched_other, !neg_only.is_empty());
    let zeros = GradientSet::zeros_like(&case.params);
    assert_eq!(zeros.norm_squared(), 0.0);
}

#[test]
fn dropout_masks_replay_to_the_same_loss() {
    let case = TinyCase::random(Mode::CommonSpace, TinyDims::default(), 13).unwrap();
    let mut config = case.config.clone();
    config.aux_text_dropout = true;
    let sample = case.sample();
    let mut rng = SeededRng::new(4);
    let first = evaluate_loss(
        &sample,
        &case.params,
        &config,
        &mut Dropout::Train {
            p: 0.25,
            rng: &mut rng,
        },
    )
    .unwrap();
    let masks = first.masks();
    let again =
        evaluate_loss(&sample, &case.params, &config, &mut Dropout::replay(&masks)).unwrap();
    assert_eq!(first.loss, again.loss);
}
