//! Synthetic stimulus-consistent corpus.
//!
//! Each clip `v` gets a latent signal `psi_v` (`latent_dim x n_times`) built
//! from sinusoids whose frequencies are drawn from its class's band. Each
//! subject `s` gets a mixing matrix `W_s = W_0 + mixing_scale * E_s` and a
//! per-channel offset `b_s`; the window is
//! `X_v^s = W_s psi_v + b_s + noise * N(0, 1)`.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use super::{Corpus, MIN_TIMES};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_clips: usize,
    pub n_subjects: usize,
    pub n_channels: usize,
    pub n_times: usize,
    pub n_classes: usize,
    pub latent_dim: usize,
    /// Sinusoids per latent channel.
    pub components: usize,
    /// Lowest class-0 frequency, in cycles per window.
    pub band_start: f64,
    pub band_width: f64,
    /// Spacing between consecutive class bands.
    pub band_gap: f64,
    pub mixing_scale: f64,
    pub offset_scale: f64,
    /// Amplitude of subject-specific ongoing oscillations: every subject has
    /// its own frequencies across all class bands, and their phases are
    /// redrawn for every window, so they carry no stimulus information.
    pub background: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_clips: 32,
            n_subjects: 8,
            n_channels: 4,
            n_times: 32,
            n_classes: 2,
            latent_dim: 3,
            components: 2,
            band_start: 1.0,
            band_width: 2.0,
            band_gap: 1.0,
            mixing_scale: 0.5,
            offset_scale: 0.5,
            background: 0.0,
            noise: 0.3,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_clips == 0 {
            return Err(Error::config("synthetic corpus has no clips (n_clips = 0)"));
        }
        if self.n_subjects == 0 || self.n_channels == 0 || self.latent_dim == 0 || self.components == 0 {
            return Err(Error::config("subjects, channels, latent_dim and components must be positive"));
        }
        if self.n_times < MIN_TIMES {
            return Err(Error::config(format!("n_times must be at least {MIN_TIMES}")));
        }
        if self.n_classes == 0 || self.n_clips < self.n_classes {
            return Err(Error::config(format!(
                "need n_clips ({}) >= n_classes ({}) >= 1",
                self.n_clips, self.n_classes
            )));
        }
        for (name, v) in [
            ("noise", self.noise),
            ("mixing_scale", self.mixing_scale),
            ("offset_scale", self.offset_scale),
            ("background", self.background),
            ("band_width", self.band_width),
            ("band_gap", self.band_gap),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        let (_, top) = self.band(self.n_classes - 1);
        if !(self.band_start > 0.0) || top >= self.n_times as f64 / 2.0 {
            return Err(Error::config(format!(
                "class bands reach {top} cycles per window, above the Nyquist limit {}",
                self.n_times as f64 / 2.0
            )));
        }
        Ok(())
    }

    /// Frequency band of `class`, in cycles per window.
    pub fn band(&self, class: usize) -> (f64, f64) {
        let lo = self.band_start + class as f64 * (self.band_width + self.band_gap);
        (lo, lo + self.band_width)
    }

    fn provenance(&self) -> Vec<(&'static str, String)> {
        vec![
            ("generator", "synthetic".into()),
            ("n_classes", self.n_classes.to_string()),
            ("latent_dim", self.latent_dim.to_string()),
            ("components", self.components.to_string()),
            ("band_start", self.band_start.to_string()),
            ("band_width", self.band_width.to_string()),
            ("band_gap", self.band_gap.to_string()),
            ("mixing_scale", self.mixing_scale.to_string()),
            ("offset_scale", self.offset_scale.to_string()),
            ("background", self.background.to_string()),
            ("noise", self.noise.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}

pub fn generate_synthetic_corpus(spec: &SyntheticSpec) -> Result<Corpus> {
    spec.validate()?;
    let root = SeededRng::new(spec.seed);
    let (c, m, k) = (spec.n_channels, spec.n_times, spec.latent_dim);

    let mut labels: Vec<u32> = (0..spec.n_clips).map(|v| (v % spec.n_classes) as u32).collect();
    root.substream("labels").shuffle(&mut labels);

    let mut rng = root.substream("latents");
    let latents: Vec<Vec<f64>> = labels
        .iter()
        .map(|&class| {
            let (lo, hi) = spec.band(class as usize);
            let mut psi = vec![0.0; k * m];
            for j in 0..k {
                for _ in 0..spec.components {
                    let f = rng.uniform(lo, hi);
                    let amp = rng.uniform(0.5, 1.0);
                    let phase = rng.uniform(0.0, TAU);
                    for t in 0..m {
                        psi[j * m + t] += amp * (TAU * f * t as f64 / m as f64 + phase).sin();
                    }
                }
            }
            psi
        })
        .collect();

    let mut rng = root.substream("subjects");
    let scale = 1.0 / (k as f64).sqrt();
    let shared: Vec<f64> = (0..c * k).map(|_| rng.normal() * scale).collect();
    let subjects: Vec<(Vec<f64>, Vec<f64>)> = (0..spec.n_subjects)
        .map(|_| {
            let mix = shared
                .iter()
                .map(|&w| w + spec.mixing_scale * rng.normal() * scale)
                .collect();
            let offset = (0..c).map(|_| spec.offset_scale * rng.normal()).collect();
            (mix, offset)
        })
        .collect();

    // Per subject: a private mixing matrix and `(frequency, amplitude)` per
    // background source and component.
    let mut rng = root.substream("background");
    let (lo, hi) = (spec.band_start, spec.band(spec.n_classes - 1).1);
    let rhythms: Vec<(Vec<f64>, Vec<(f64, f64)>)> = if spec.background > 0.0 {
        (0..spec.n_subjects)
            .map(|_| {
                let mix = (0..c * k).map(|_| rng.normal() * scale).collect();
                let tones = (0..k * spec.components)
                    .map(|_| (rng.uniform(lo, hi), rng.uniform(0.5, 1.0)))
                    .collect();
                (mix, tones)
            })
            .collect()
    } else {
        Vec::new()
    };
    let mut phases = root.substream("background.phase");
    let mut ongoing = vec![0.0; k * m];

    let mut noise = root.substream("noise");
    let mut data = Vec::with_capacity(spec.n_clips * spec.n_subjects * c * m);
    for psi in &latents {
        for (s, (mix, offset)) in subjects.iter().enumerate() {
            if let Some((_, tones)) = rhythms.get(s) {
                ongoing.fill(0.0);
                for (i, &(f, amp)) in tones.iter().enumerate() {
                    let j = i / spec.components;
                    let phase = phases.uniform(0.0, TAU);
                    for t in 0..m {
                        ongoing[j * m + t] += spec.background * amp * (TAU * f * t as f64 / m as f64 + phase).sin();
                    }
                }
            }
            for ch in 0..c {
                for t in 0..m {
                    let mut v = offset[ch];
                    for j in 0..k {
                        v += mix[ch * k + j] * psi[j * m + t];
                    }
                    if let Some((bg_mix, _)) = rhythms.get(s) {
                        for j in 0..k {
                            v += bg_mix[ch * k + j] * ongoing[j * m + t];
                        }
                    }
                    if spec.noise > 0.0 {
                        v += spec.noise * noise.normal();
                    }
                    data.push(v as f32);
                }
            }
        }
    }

    let mut corpus = Corpus::new(spec.n_clips, spec.n_subjects, c, m, data)?;
    corpus.set_labels(labels)?;
    for (key, value) in spec.provenance() {
        corpus.provenance.insert(key.to_string(), value);
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pearson(a: &[f32], b: &[f32]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let mb = b.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
        for (&x, &y) in a.iter().zip(b) {
            let (dx, dy) = (f64::from(x) - ma, f64::from(y) - mb);
            sab += dx * dy;
            saa += dx * dx;
            sbb += dy * dy;
        }
        sab / (saa * sbb).sqrt()
    }

    #[test]
    fn same_seed_same_corpus() {
        let spec = SyntheticSpec::default();
        assert_eq!(generate_synthetic_corpus(&spec).unwrap(), generate_synthetic_corpus(&spec).unwrap());
    }

    #[test]
    fn zero_clips_is_an_error() {
        let spec = SyntheticSpec {
            n_clips: 0,
            ..SyntheticSpec::default()
        };
        assert!(matches!(generate_synthetic_corpus(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn noise_free_shared_mixing_gives_identical_subjects() {
        let spec = SyntheticSpec {
            noise: 0.0,
            mixing_scale: 0.0,
            offset_scale: 0.0,
            n_clips: 4,
            n_subjects: 3,
            ..SyntheticSpec::default()
        };
        let c = generate_synthetic_corpus(&spec).unwrap();
        for v in 0..4 {
            assert_eq!(c.window(v, 0), c.window(v, 1));
            assert_eq!(c.window(v, 0), c.window(v, 2));
        }
    }

    #[test]
    fn every_class_is_present() {
        let spec = SyntheticSpec {
            n_clips: 7,
            n_classes: 3,
            ..SyntheticSpec::default()
        };
        let c = generate_synthetic_corpus(&spec).unwrap();
        let labels = c.labels().unwrap();
        for class in 0..3 {
            assert!(labels.contains(&class));
        }
    }

    #[test]
    fn four_clip_two_subject_correlations() {
        // sigma = 0, distinct mixing matrices.
        let spec = SyntheticSpec {
            n_clips: 4,
            n_subjects: 2,
            noise: 0.0,
            offset_scale: 0.0,
            mixing_scale: 0.5,
            seed: 3,
            ..SyntheticSpec::default()
        };
        let c = generate_synthetic_corpus(&spec).unwrap();
        let labels = c.labels().unwrap();
        let mut within = Vec::new();
        let mut across = Vec::new();
        for v in 0..4 {
            within.push(pearson(c.window(v, 0), c.window(v, 1)));
            for w in 0..4 {
                if v != w {
                    across.push(pearson(c.window(v, 0), c.window(w, 1)));
                    if labels[v] != labels[w] {
                        assert_ne!(c.window(v, 0), c.window(w, 0));
                    }
                }
            }
        }
        let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
        assert!(mean(&within) > mean(&across), "within {within:?} across {across:?}");
        let m = mean(&across);
        assert!(within.iter().all(|&r| r > m), "within {within:?} across mean {m}");
    }

    #[test]
    fn background_adds_untimed_subject_rhythms() {
        let quiet = SyntheticSpec {
            noise: 0.0,
            ..SyntheticSpec::default()
        };
        let busy = SyntheticSpec {
            background: 2.0,
            ..quiet.clone()
        };
        let (a, b) = (generate_synthetic_corpus(&quiet).unwrap(), generate_synthetic_corpus(&busy).unwrap());
        assert_eq!(a.labels(), b.labels());
        let residual = |clip: usize, subject: usize| -> Vec<f32> {
            a.window(clip, subject).iter().zip(b.window(clip, subject)).map(|(x, y)| y - x).collect()
        };
        let energy = |r: &[f32]| r.iter().map(|v| f64::from(*v).powi(2)).sum::<f64>();
        for s in 0..2 {
            let (r0, r1) = (residual(0, s), residual(1, s));
            assert!(energy(&r0) > 1.0 && energy(&r1) > 1.0);
            // Fresh phases per window: the rhythm is not locked to the clip.
            assert_ne!(r0, r1);
        }
        assert_ne!(residual(0, 0), residual(0, 1));
    }

    #[test]
    fn band_above_nyquist_rejected() {
        let spec = SyntheticSpec {
            n_times: 8,
            ..SyntheticSpec::default()
        };
        assert!(spec.validate().is_err());
    }
}
