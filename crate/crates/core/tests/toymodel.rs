use ndarray::Array2;
use rand::Rng;
use sslforge::masking::{sample_mask, MaskSpec};
use sslforge::seed::rng_from;
use sslforge::toymodel::{
    grad_check, grad_check_indices, masked_accuracy, train_step, Adam, Sample,
};
use sslforge::{ToyModelConfig, ToyModelState};

struct Utt {
    features: Array2<f64>,
    labels: Vec<u32>,
    mask: MaskSpec,
}

impl Utt {
    fn sample(&self) -> Sample<'_> {
        Sample {
            features: self.features.view(),
            labels: &self.labels,
            mask: &self.mask,
        }
    }
}

/// Each utterance carries one class; its frames are the class prototype
/// plus noise.
fn separable_task(seed: u64, n: usize, t: usize, d: usize, k: usize) -> Vec<Utt> {
    let mut rng = rng_from(seed);
    let protos = Array2::from_shape_fn((k, d), |_| rng.random_range(-3.0..3.0));
    (0..n)
        .map(|_| {
            let class = rng.random_range(0..k);
            let features =
                Array2::from_shape_fn((t, d), |(_, j)| protos[[class, j]] + rng.random_range(-0.5..0.5));
            let mask = loop {
                let m = sample_mask(t, 5, 0.08, &mut rng).unwrap();
                if !m.is_empty() && m.num_masked() < t {
                    break m;
                }
            };
            Utt {
                features,
                labels: vec![class as u32; t],
                mask,
            }
        })
        .collect()
}

#[test]
fn default_config_gradients_match_finite_differences() {
    let cfg = ToyModelConfig::default();
    let state = ToyModelState::init(cfg.clone()).unwrap();
    let mut rng = rng_from(11);
    let t = 12;
    let features = Array2::from_shape_fn((t, cfg.input_dim), |_| rng.random_range(-1.0..1.0));
    let labels: Vec<u32> = (0..t).map(|_| rng.random_range(0..cfg.num_classes as u32)).collect();
    let mask = MaskSpec::from_starts(t, 3, 0.08, &[1, 7]);
    let indices = grad_check_indices(&cfg);
    assert!(indices.len() >= 2_000);
    let err = grad_check(
        &state,
        &[Sample {
            features: features.view(),
            labels: &labels,
            mask: &mask,
        }],
    )
    .unwrap();
    println!("default config max relative error {err:e} over {} coordinates", indices.len());
    assert!(err < 1e-4, "{err}");
}

#[test]
fn loss_decreases_on_fixed_tiny_dataset() {
    let k = 8;
    let data = separable_task(3, 6, 20, 6, k);
    let samples: Vec<Sample> = data.iter().map(Utt::sample).collect();
    let mut state = ToyModelState::init(ToyModelConfig {
        input_dim: 6,
        hidden_dims: vec![32, 32],
        num_classes: k,
        context: 2,
        seed: 5,
        ..Default::default()
    })
    .unwrap();
    let mut opt = Adam::for_state(&state);
    let first = train_step(&mut state, &mut opt, &samples).unwrap().loss;
    let mut last = first;
    for _ in 1..200 {
        last = train_step(&mut state, &mut opt, &samples).unwrap().loss;
    }
    assert!(last < first, "{first} -> {last}");
    assert!(state.is_finite());
}

#[test]
fn separable_task_beats_five_times_chance() {
    let k = 10;
    let d = 8;
    let mut train = separable_task(21, 128, 30, d, k);
    let held_out = train.split_off(64);
    let mut state = ToyModelState::init(ToyModelConfig {
        input_dim: d,
        hidden_dims: vec![64, 64],
        num_classes: k,
        context: 2,
        seed: 9,
        ..Default::default()
    })
    .unwrap();
    let mut opt = Adam::for_state(&state);
    let mut acc = 0.0;
    for step in 0..500 {
        let batch: Vec<Sample> = train
            .iter()
            .skip((step * 8) % train.len())
            .take(8)
            .map(Utt::sample)
            .collect();
        train_step(&mut state, &mut opt, &batch).unwrap();
        if step % 50 == 49 {
            let eval: Vec<Sample> = held_out.iter().map(Utt::sample).collect();
            acc = masked_accuracy(&state, &eval).unwrap();
            if acc > 5.0 / k as f64 {
                break;
            }
        }
    }
    assert!(acc > 5.0 / k as f64, "accuracy {acc}");
}
