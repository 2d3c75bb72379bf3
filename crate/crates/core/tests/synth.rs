use heatgait::data::{self, normalize_coordinates, Condition, PoseSequence, VIEW_ANGLES};
use heatgait::rng;
use heatgait::synth::{self, generate_sequence, generate_subject};
use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

const BINS: usize = 8;

/// Spectral energy of bins `1..=BINS` for every joint coordinate.
fn fft_energy(seq: &PoseSequence, planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let seq = normalize_coordinates(seq).unwrap();
    let n = seq.len();
    let fft = planner.plan_fft_forward(n);
    let mut out = Vec::new();
    for j in 0..17 {
        for axis in 0..2 {
            let mut buf: Vec<Complex<f64>> = seq
                .frames
                .iter()
                .map(|f| {
                    let k = f.keypoints[j];
                    Complex::new(if axis == 0 { k.x } else { k.y }, 0.0)
                })
                .collect();
            fft.process(&mut buf);
            out.extend(buf[1..=BINS].iter().map(|c| c.norm_sqr() / n as f64));
        }
    }
    out
}

fn sample(params: &synth::SubjectParams, count: usize, seed: u64, planner: &mut FftPlanner<f64>) -> Vec<Vec<f64>> {
    (0..count)
        .map(|i| {
            let mut r = rng::derived(seed, &[i as u64]);
            let condition = Condition::ALL[r.random_range(0..3)];
            let angle = VIEW_ANGLES[r.random_range(0..VIEW_ANGLES.len())];
            fft_energy(&generate_sequence(params, 60, condition, angle, &mut r), planner)
        })
        .collect()
}

/// Least-squares linear discriminant `w·x + b` with a ridge term, fitted to
/// targets ±1.
fn fit_linear(xs: &[Vec<f64>], ys: &[f64]) -> Vec<f64> {
    let d = xs[0].len() + 1;
    let mut a = vec![vec![0.0; d]; d];
    let mut rhs = vec![0.0; d];
    for (x, &y) in xs.iter().zip(ys) {
        let row: Vec<f64> = x.iter().copied().chain(std::iter::once(1.0)).collect();
        for i in 0..d {
            rhs[i] += row[i] * y;
            for j in 0..d {
                a[i][j] += row[i] * row[j];
            }
        }
    }
    for (i, r) in a.iter_mut().enumerate() {
        r[i] += 1e-3;
    }
    // Gaussian elimination with partial pivoting
    for col in 0..d {
        let pivot = (col..d).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, pivot);
        rhs.swap(col, pivot);
        for row in col + 1..d {
            let f = a[row][col] / a[col][col];
            for k in col..d {
                a[row][k] -= f * a[col][k];
            }
            rhs[row] -= f * rhs[col];
        }
    }
    let mut w = vec![0.0; d];
    for i in (0..d).rev() {
        let s: f64 = (i + 1..d).map(|k| a[i][k] * w[k]).sum();
        w[i] = (rhs[i] - s) / a[i][i];
    }
    w
}

#[test]
fn subjects_are_linearly_separable_by_spectral_energy() {
    let mut planner = FftPlanner::new();
    let (mut correct, mut total) = (0, 0);
    for pair in 0..10u64 {
        let a = generate_subject(2 * pair + 1);
        let b = generate_subject(2 * pair + 2);
        let train_a = sample(&a, 30, 100 + pair, &mut planner);
        let train_b = sample(&b, 30, 200 + pair, &mut planner);
        let test_a = sample(&a, 30, 300 + pair, &mut planner);
        let test_b = sample(&b, 30, 400 + pair, &mut planner);

        // standardise with training statistics
        let xs: Vec<Vec<f64>> = train_a.iter().chain(&train_b).cloned().collect();
        let d = xs[0].len();
        let mean: Vec<f64> = (0..d).map(|k| xs.iter().map(|x| x[k]).sum::<f64>() / xs.len() as f64).collect();
        let sd: Vec<f64> = (0..d)
            .map(|k| (xs.iter().map(|x| (x[k] - mean[k]).powi(2)).sum::<f64>() / xs.len() as f64).sqrt().max(1e-12))
            .collect();
        let z = |x: &Vec<f64>| -> Vec<f64> { (0..d).map(|k| (x[k] - mean[k]) / sd[k]).collect() };
        let zs: Vec<Vec<f64>> = xs.iter().map(z).collect();
        let ys: Vec<f64> = (0..xs.len()).map(|i| if i < train_a.len() { 1.0 } else { -1.0 }).collect();
        let w = fit_linear(&zs, &ys);
        let score = |x: &Vec<f64>| z(x).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + w[d];
        correct += test_a.iter().filter(|x| score(x) > 0.0).count();
        correct += test_b.iter().filter(|x| score(x) < 0.0).count();
        total += test_a.len() + test_b.len();
    }
    let accuracy = correct as f64 / total as f64;
    assert!(accuracy > 0.95, "held-out accuracy {accuracy:.3}");
}

#[test]
fn generated_corpus_passes_validation() {
    let corpus = synth::generate_dataset(3, 10, 30, 4);
    assert_eq!(corpus.len(), 30);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    data::save_keypoint_file(&corpus, &path).unwrap();
    let v = data::validate_keypoint_file(&path).unwrap();
    assert!(v.errors.is_empty(), "{:?}", v.errors);
    assert_eq!(v.sequences, corpus);
}

#[test]
fn clothing_loses_more_frames_than_normal_walking() {
    let corpus = synth::generate_dataset(8, 10, 60, 11);
    let rate = |c: Condition| {
        let seqs: Vec<&PoseSequence> = corpus.iter().filter(|s| s.condition == c).collect();
        let total: usize = seqs.iter().map(|s| s.len()).sum();
        let kept: usize = seqs
            .iter()
            .map(|s| data::filter_low_confidence(s, 0.6).map_or(0, |f| f.len()))
            .sum();
        1.0 - kept as f64 / total as f64
    };
    assert!(rate(Condition::CL) > rate(Condition::NM));
}

#[test]
fn dataset_is_deterministic() {
    assert_eq!(synth::generate_dataset(2, 5, 20, 3), synth::generate_dataset(2, 5, 20, 3));
    assert_ne!(synth::generate_dataset(2, 5, 20, 3), synth::generate_dataset(2, 5, 20, 4));
}
