//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use earlyexit::calibrate::CalibrationRecord;
use earlyexit::rng::Rng;

/// Brute-force threshold: tries every distinct score as a cut and averages
/// correctness directly over all records scoring at or above it.
pub fn threshold_oracle(records: &[CalibrationRecord], epsilon: f64) -> f64 {
    let mut candidates: Vec<f64> = records.iter().map(|r| r.score).collect();
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for &c in &candidates {
        let above: Vec<_> = records.iter().filter(|r| r.score >= c).collect();
        let correct = above.iter().filter(|r| r.correct).count();
        if correct as f64 / above.len() as f64 >= epsilon {
            return c;
        }
    }
    f64::INFINITY
}

/// Random calibration set for one head with many duplicated scores.
pub fn random_records(rng: &mut Rng, max_len: usize) -> Vec<CalibrationRecord> {
    let n = 1 + rng.below(max_len);
    let levels = 1 + rng.below(n.min(40));
    let p_correct = rng.uniform();
    (0..n)
        .map(|_| CalibrationRecord {
            head_index: 0,
            score: rng.below(levels) as f64 / levels as f64,
            correct: rng.uniform() < p_correct,
        })
        .collect()
}

/// Softmax in plain f64.
pub fn softmax64(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn entropy64(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// `(1 − λ)·CE(z, t) − λ·H(softmax z)` evaluated directly in f64.
pub fn head_loss64(z: &[f64], teacher: &[f64], lambda: f64) -> f64 {
    let p = softmax64(z);
    let ce: f64 = -teacher
        .iter()
        .zip(&p)
        .map(|(t, q)| t * q.max(1e-12).ln())
        .sum::<f64>();
    (1.0 - lambda) * ce - lambda * entropy64(&p)
}

/// Layer norm followed by a `d × v` projection, row-major, in f64.
pub fn head_logits64(hidden: &[f64], gain: &[f64], bias: &[f64], proj: &[f64], v: usize, eps: f64) -> Vec<f64> {
    let d = hidden.len();
    let mean = hidden.iter().sum::<f64>() / d as f64;
    let var = hidden.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
    let rstd = 1.0 / (var + eps).sqrt();
    let normed: Vec<f64> = (0..d).map(|i| (hidden[i] - mean) * rstd * gain[i] + bias[i]).collect();
    (0..v)
        .map(|j| (0..d).map(|i| normed[i] * proj[i * v + j]).sum())
        .collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

pub fn random_probs(rng: &mut Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.uniform() + 1e-3).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|x| x / s).collect()
}

use earlyexit::backbone::LayerNorm;
use earlyexit::heads::{ExitHead, InitMode};
use earlyexit::math::{Matrix, ProbVector};
use earlyexit::trainer::{accumulate_head_grad, head_loss_grad, HeadGrad};

/// `‖a − b‖ / max(‖a‖, ‖b‖)`.
pub fn vec_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

fn central_diff(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Logit-level check of `head_loss_grad`; returns the relative error of each
/// instance.
pub fn logit_grad_errors(instances: usize, seed: u64) -> Vec<f64> {
    let mut rng = Rng::new(seed);
    (0..instances)
        .map(|_| {
            let v = 2 + rng.below(30);
            let lambda = if rng.below(4) == 0 { rng.below(2) as f64 } else { rng.uniform() };
            let z: Vec<f32> = (0..v).map(|_| rng.normal(0.0, 2.0) as f32).collect();
            let t = random_probs(&mut rng, v);
            let teacher = ProbVector::new(t.iter().map(|&x| x as f32).collect()).unwrap();
            let t64: Vec<f64> = teacher.as_slice().iter().map(|&x| x as f64).collect();
            let analytic = head_loss_grad(&z, &teacher, lambda).unwrap();
            let z64: Vec<f64> = z.iter().map(|&x| x as f64).collect();
            let numeric = central_diff(&z64, 1e-5, |zz| head_loss64(zz, &t64, lambda));
            vec_rel_err(&analytic, &numeric)
        })
        .collect()
}

/// Parameter-level check through a head's norm and projection; returns the
/// relative error of each instance.
pub fn head_param_grad_errors(instances: usize, seed: u64) -> Vec<f64> {
    let mut rng = Rng::new(seed);
    (0..instances)
        .map(|_| {
            let d = 4 + rng.below(13);
            let v = 2 + rng.below(20);
            let lambda = rng.uniform();
            let head = ExitHead {
                tap_index: 1,
                norm: LayerNorm {
                    gain: (0..d).map(|_| rng.normal(1.0, 0.3) as f32).collect(),
                    bias: (0..d).map(|_| rng.normal(0.0, 0.3) as f32).collect(),
                },
                proj: Matrix::from_fn(d, v, |_, _| rng.normal(0.0, 0.5) as f32),
                init_mode: InitMode::Scratch,
            };
            let hidden: Vec<f32> = (0..d).map(|_| rng.normal(0.3, 1.5) as f32).collect();
            let t = random_probs(&mut rng, v);
            let teacher = ProbVector::new(t.iter().map(|&x| x as f32).collect()).unwrap();
            let t64: Vec<f64> = teacher.as_slice().iter().map(|&x| x as f64).collect();

            let mut grad = HeadGrad::zeros(&head);
            accumulate_head_grad(&head, &hidden, &teacher, lambda, 1.0, &mut grad).unwrap();
            let analytic: Vec<f64> = grad.gain.iter().chain(&grad.bias).chain(&grad.proj).copied().collect();

            let h64: Vec<f64> = hidden.iter().map(|&x| x as f64).collect();
            let params: Vec<f64> = head
                .norm
                .gain
                .iter()
                .chain(&head.norm.bias)
                .chain(head.proj.data())
                .map(|&x| x as f64)
                .collect();
            let numeric = central_diff(&params, 1e-5, |p| {
                let z = head_logits64(&h64, &p[..d], &p[d..2 * d], &p[2 * d..], v, 1e-5);
                head_loss64(&z, &t64, lambda)
            });
            vec_rel_err(&analytic, &numeric)
        })
        .collect()
}
