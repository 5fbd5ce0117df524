//! Trial preprocessing. Trials and windows are `[channel, time]` tensors.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Self-report ratings above this value are labelled "high".
pub const RATING_THRESHOLD: f64 = 5.0;

/// 1 for a high rating, 0 otherwise.
pub fn binarize_rating(rating: f64) -> u32 {
    u32::from(rating > RATING_THRESHOLD)
}

/// Subtracts the mean of the first `n_baseline` windows from every remaining
/// window.
pub fn baseline_subtract(trial: &[Tensor<f32>], n_baseline: usize) -> Result<Vec<Tensor<f32>>> {
    if n_baseline == 0 || trial.len() <= n_baseline {
        return Err(Error::contract(format!(
            "baseline subtraction needs more than {n_baseline} windows (and at least one baseline), got {}",
            trial.len()
        )));
    }
    let shape = trial[0].shape();
    if let Some(bad) = trial.iter().position(|w| w.shape() != shape) {
        return Err(Error::shape(
            "baseline_subtract",
            format!("window {bad} has shape {:?}, expected {shape:?}", trial[bad].shape()),
        ));
    }
    let mut baseline = vec![0f64; trial[0].len()];
    for w in &trial[..n_baseline] {
        for (b, &v) in baseline.iter_mut().zip(w.data()) {
            *b += f64::from(v);
        }
    }
    let inv = 1.0 / n_baseline as f64;
    let baseline: Vec<f32> = baseline.into_iter().map(|b| (b * inv) as f32).collect();
    trial[n_baseline..]
        .iter()
        .map(|w| {
            let data = w.data().iter().zip(&baseline).map(|(&v, &b)| v - b).collect();
            Tensor::new(shape.to_vec(), data)
        })
        .collect()
}

/// Scales each channel row of a `[channel, time]` trial to unit L2 norm.
pub fn l2_normalize_per_channel(trial: &Tensor<f32>) -> Result<Tensor<f32>> {
    if trial.rank() != 2 {
        return Err(Error::shape("l2_normalize", format!("expected [channel, time], got {:?}", trial.shape())));
    }
    let t = trial.shape()[1];
    let mut out = trial.data().to_vec();
    for (c, row) in out.chunks_mut(t).enumerate() {
        let norm = row.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::DegenerateChannel { channel: c });
        }
        for v in row.iter_mut() {
            *v = (f64::from(*v) / norm) as f32;
        }
    }
    Tensor::new(trial.shape().to_vec(), out)
}

/// Non-overlapping consecutive windows from the start of the trial; a
/// trailing partial window is dropped.
pub fn window_segment(trial: &Tensor<f32>, window_len: usize) -> Result<Vec<Tensor<f32>>> {
    if trial.rank() != 2 {
        return Err(Error::shape("window_segment", format!("expected [channel, time], got {:?}", trial.shape())));
    }
    let (c, t) = (trial.shape()[0], trial.shape()[1]);
    if window_len == 0 || t < window_len {
        return Err(Error::contract(format!("trial of length {t} is shorter than window {window_len}")));
    }
    let data = trial.data();
    (0..t / window_len)
        .map(|k| {
            let start = k * window_len;
            let mut w = Vec::with_capacity(c * window_len);
            for ch in 0..c {
                w.extend_from_slice(&data[ch * t + start..ch * t + start + window_len]);
            }
            Tensor::new(vec![c, window_len], w)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(c: usize, t: usize, data: Vec<f32>) -> Tensor<f32> {
        Tensor::new(vec![c, t], data).unwrap()
    }

    #[test]
    fn constant_trial_yields_zero_segments() {
        let trial: Vec<_> = (0..5).map(|_| mat(2, 3, vec![4.0; 6])).collect();
        for seg in baseline_subtract(&trial, 2).unwrap() {
            assert!(seg.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn sixty_three_windows_leave_sixty_segments() {
        let trial: Vec<_> = (0..63).map(|k| mat(1, 4, vec![k as f32; 4])).collect();
        assert_eq!(baseline_subtract(&trial, 3).unwrap().len(), 60);
    }

    #[test]
    fn baseline_arithmetic() {
        let trial: Vec<_> = [1.0, 2.0, 3.0, 5.0, 7.0].iter().map(|&v| mat(1, 1, vec![v])).collect();
        let out = baseline_subtract(&trial, 3).unwrap();
        assert_eq!(out.iter().map(|t| t.data()[0]).collect::<Vec<_>>(), vec![3.0, 5.0]);
    }

    #[test]
    fn baseline_needs_stimulus_windows() {
        let trial: Vec<_> = (0..3).map(|_| mat(1, 1, vec![0.0])).collect();
        assert!(baseline_subtract(&trial, 3).is_err());
        assert!(baseline_subtract(&trial, 0).is_err());
    }

    #[test]
    fn l2_row_three_four() {
        let out = l2_normalize_per_channel(&mat(1, 2, vec![3.0, 4.0])).unwrap();
        assert_eq!(out.data(), &[0.6, 0.8]);
    }

    #[test]
    fn l2_rows_have_unit_norm() {
        let mut rng = crate::rng::SeededRng::new(2);
        let trial = Tensor::from_fn(&[5, 17], |_| rng.normal() as f32);
        let out = l2_normalize_per_channel(&trial).unwrap();
        for row in out.data().chunks(17) {
            let n: f64 = row.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn l2_zero_row_errors() {
        let err = l2_normalize_per_channel(&mat(2, 2, vec![1.0, 1.0, 0.0, 0.0])).unwrap_err();
        assert!(matches!(err, Error::DegenerateChannel { channel: 1 }));
    }

    #[test]
    fn windows_floor_and_concatenate_to_prefix() {
        let trial = mat(2, 11, (0..22).map(|v| v as f32).collect());
        let ws = window_segment(&trial, 5).unwrap();
        assert_eq!(ws.len(), 2);
        for ch in 0..2 {
            let joined: Vec<f32> = ws.iter().flat_map(|w| w.row(ch).to_vec()).collect();
            assert_eq!(joined, trial.row(ch)[..10].to_vec());
        }
        let even = window_segment(&mat(1, 10, vec![0.0; 10]), 5).unwrap();
        assert_eq!(even.len(), 2);
    }

    #[test]
    fn window_longer_than_trial_errors() {
        assert!(window_segment(&mat(1, 4, vec![0.0; 4]), 5).is_err());
    }

    #[test]
    fn ratings_split_at_five() {
        assert_eq!(binarize_rating(5.0), 0);
        assert_eq!(binarize_rating(5.01), 1);
        assert_eq!(binarize_rating(1.0), 0);
        assert_eq!(binarize_rating(9.0), 1);
    }
}
