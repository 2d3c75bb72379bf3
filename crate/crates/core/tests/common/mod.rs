#![allow(dead_code)]

use heatgait::data::{Condition, Keypoint, PoseFrame, PoseSequence};
use heatgait::nnkernel::{Tape, Tensor, Var};
use heatgait::rng;
use rand::Rng;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::seeded(seed);
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

/// Entries in `±[0.2, 1.0)`, well away from the ReLU kink.
pub fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::seeded(seed);
    Tensor::from_fn(shape, |_| {
        let m = r.random_range(0.2..1.0);
        if r.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Largest relative error between back-propagated and central-difference
/// gradients of `Σ w ⊙ f(inputs)` for random fixed weights `w`. Only the
/// coordinates in `sample` (per input, all if `None`) are checked.
pub fn gradcheck(
    inputs: &[Tensor],
    build: &dyn Fn(&mut Tape, &[Var]) -> heatgait::Result<Var>,
    step: f64,
    sample: Option<usize>,
    seed: u64,
) -> f64 {
    let forward = |ins: &[Tensor], weights: Option<&[f64]>| -> (Tape, Vec<Var>, Var, Vec<f64>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
        let out = build(&mut tape, &vars).expect("forward");
        let n = tape.value(out).numel();
        let w: Vec<f64> = match weights {
            Some(w) => w.to_vec(),
            None => {
                let mut r = rng::derived(seed, &[n as u64]);
                (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
            }
        };
        let root = tape.weighted_sum(out, w.clone()).expect("reduce");
        (tape, vars, root, w)
    };
    let (tape, vars, root, weights) = forward(inputs, None);
    let grads = tape.backward(root).expect("backward");
    let mut worst: f64 = 0.0;
    let mut pick = rng::derived(seed, &[0xC0FFEE]);
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).expect("input gradient").to_vec();
        let coords: Vec<usize> = match sample {
            Some(k) if k < input.numel() => (0..k).map(|_| pick.random_range(0..input.numel())).collect(),
            _ => (0..input.numel()).collect(),
        };
        for c in coords {
            let eval = |delta: f64| {
                let mut ins = inputs.to_vec();
                ins[i].data_mut()[c] += delta;
                let (tape, _, root, _) = forward(&ins, Some(&weights));
                tape.value(root).item()
            };
            let numeric = (eval(step) - eval(-step)) / (2.0 * step);
            worst = worst.max(rel_err(analytic[c], numeric));
        }
    }
    worst
}

pub fn constant_sequence(frames: usize, subject: &str, confidence: f64) -> PoseSequence {
    PoseSequence {
        frames: (0..frames)
            .map(|t| PoseFrame::new(std::array::from_fn(|j| Keypoint::new(j as f64 + t as f64, (j * j) as f64, confidence))))
            .collect(),
        subject_id: subject.into(),
        condition: Condition::NM,
        sequence_index: 1,
        view_angle: 90,
    }
}

pub fn random_sequence(frames: usize, seed: u64) -> PoseSequence {
    let mut r = rng::seeded(seed);
    let conditions = Condition::ALL;
    PoseSequence {
        frames: (0..frames)
            .map(|_| {
                PoseFrame::new(std::array::from_fn(|_| {
                    Keypoint::new(
                        r.random_range(-500.0..500.0),
                        r.random_range(-500.0..500.0),
                        r.random_range(0.0..=1.0),
                    )
                }))
            })
            .collect(),
        subject_id: format!("subject-{}", r.random_range(0..1000)),
        condition: conditions[r.random_range(0..3)],
        sequence_index: r.random_range(1..10),
        view_angle: heatgait::data::VIEW_ANGLES[r.random_range(0..11)],
    }
}
