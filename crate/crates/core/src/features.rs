//! Hand-crafted motion features: naive DFT spectra, dominant frequency,
//! per-sequence feature vectors, and a nearest-centroid classifier.
//!
//! These feed the toy Frechet metric and the frame-level class oracle.
//! Everything here is deterministic in the inputs.

use crate::error::{FloodError, Result};
use crate::motion::MotionSequence;

/// Power per DFT bin (0..=n/2) of a real series, |X_b|^2 / n^2.
pub fn power_spectrum(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let half = n / 2;
    let mut out = Vec::with_capacity(half + 1);
    for b in 0..=half {
        let w = -2.0 * std::f64::consts::PI * b as f64 / n as f64;
        let mut re = 0.0;
        let mut im = 0.0;
        for (i, &v) in x.iter().enumerate() {
            let (s, c) = (w * i as f64).sin_cos();
            re += v * c;
            im += v * s;
        }
        out.push((re * re + im * im) / (n as f64 * n as f64));
    }
    out
}

/// Channel-averaged power spectrum.
pub fn mean_spectrum(seq: &MotionSequence) -> Vec<f64> {
    let d = seq.channels();
    let mut acc = vec![0.0; seq.n_frames() / 2 + 1];
    for c in 0..d {
        let ps = power_spectrum(&seq.channel(c));
        for (a, p) in acc.iter_mut().zip(ps) {
            *a += p;
        }
    }
    for a in &mut acc {
        *a /= d as f64;
    }
    acc
}

/// Frequency (Hz) of the strongest non-DC bin.
pub fn dominant_freq(seq: &MotionSequence) -> f64 {
    let spec = mean_spectrum(seq);
    let mut best = 1;
    for b in 2..spec.len() {
        if spec[b] > spec[best] {
            best = b;
        }
    }
    best as f64 * seq.fps() / seq.n_frames() as f64
}

/// Mean absolute deviation from the per-channel mean, pooled over the
/// whole sequence. A crude oscillation-amplitude proxy.
pub fn mean_amplitude(seq: &MotionSequence) -> f64 {
    let d = seq.channels();
    let n = seq.n_frames();
    let mut total = 0.0;
    for c in 0..d {
        let ch = seq.channel(c);
        let mean: f64 = ch.iter().sum::<f64>() / n as f64;
        total += ch.iter().map(|v| (v - mean).abs()).sum::<f64>() / n as f64;
    }
    total / d as f64
}

/// The two-feature view used for the dataset separability check:
/// (dominant frequency, mean amplitude).
pub fn separability_features(seq: &MotionSequence) -> Vec<f64> {
    vec![dominant_freq(seq), mean_amplitude(seq)]
}

/// Fundamentals the window classifier projects onto; the distinct class
/// frequencies of the synthetic set.
pub const PROBE_FREQS: [f64; 4] = [0.625, 1.25, 1.875, 2.5];

/// Amplitude of the projection onto frequency f over frames [lo, hi),
/// averaged across channels. The window mean is removed first.
pub fn projection_amplitude(seq: &MotionSequence, lo: usize, hi: usize, f_hz: f64) -> f64 {
    let n = (hi - lo) as f64;
    let d = seq.channels();
    let mut total = 0.0;
    for c in 0..d {
        let mut mean = 0.0;
        for i in lo..hi {
            mean += seq.frame(i)[c] as f64;
        }
        mean /= n;
        let w = -2.0 * std::f64::consts::PI * f_hz / seq.fps();
        let mut re = 0.0;
        let mut im = 0.0;
        for i in lo..hi {
            let v = seq.frame(i)[c] as f64 - mean;
            let (s, co) = (w * (i - lo) as f64).sin_cos();
            re += v * co;
            im += v * s;
        }
        total += 2.0 * (re * re + im * im).sqrt() / n;
    }
    total / d as f64
}

fn window_std(seq: &MotionSequence, lo: usize, hi: usize) -> f64 {
    let d = seq.channels();
    let n = (hi - lo) as f64;
    let mut acc = 0.0;
    for c in 0..d {
        let mut mean = 0.0;
        for i in lo..hi {
            mean += seq.frame(i)[c] as f64;
        }
        mean /= n;
        let mut var = 0.0;
        for i in lo..hi {
            let dlt = seq.frame(i)[c] as f64 - mean;
            var += dlt * dlt;
        }
        acc += (var / n).sqrt();
    }
    acc / d as f64
}

/// Features of a frame window: projections onto the probe fundamentals
/// plus the pooled channel std.
pub fn window_features(seq: &MotionSequence, lo: usize, hi: usize) -> Vec<f64> {
    let mut f: Vec<f64> = PROBE_FREQS
        .iter()
        .map(|&fr| projection_amplitude(seq, lo, hi, fr))
        .collect();
    f.push(window_std(seq, lo, hi));
    f
}

/// Per-sequence descriptor for the toy Frechet metric: global mean/std,
/// dominant frequency, probe-band amplitudes, and difference statistics.
pub fn sequence_features(seq: &MotionSequence) -> Vec<f64> {
    let n = seq.n_frames();
    let d = seq.channels();
    let total = (n * d) as f64;
    let mean: f64 = seq.data().iter().map(|&v| v as f64).sum::<f64>() / total;
    let var: f64 = seq
        .data()
        .iter()
        .map(|&v| (v as f64 - mean) * (v as f64 - mean))
        .sum::<f64>()
        / total;
    let mut feats = vec![mean, var.sqrt(), dominant_freq(seq)];
    for &f in &PROBE_FREQS {
        feats.push(projection_amplitude(seq, 0, n, f));
    }
    // velocity and acceleration proxies
    let mut dv = 0.0;
    let mut da = 0.0;
    for c in 0..d {
        let ch = seq.channel(c);
        for i in 1..n {
            dv += (ch[i] - ch[i - 1]).abs();
        }
        for i in 2..n {
            let a2 = ch[i] - 2.0 * ch[i - 1] + ch[i - 2];
            da += a2 * a2;
        }
    }
    feats.push(dv / ((n - 1) as f64 * d as f64));
    feats.push((da / ((n - 2) as f64 * d as f64)).sqrt());
    feats
}

/// Nearest-centroid classifier over z-scored features.
#[derive(Clone, Debug)]
pub struct CentroidClassifier {
    classes: Vec<String>,
    centroids: Vec<Vec<f64>>,
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl CentroidClassifier {
    pub fn fit(labeled: &[(String, Vec<f64>)]) -> Result<Self> {
        if labeled.is_empty() {
            return Err(FloodError::Config("no training features".into()));
        }
        let dim = labeled[0].1.len();
        let n = labeled.len() as f64;
        let mut mean = vec![0.0; dim];
        for (_, f) in labeled {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v / n;
            }
        }
        let mut std = vec![0.0; dim];
        for (_, f) in labeled {
            for j in 0..dim {
                let d = f[j] - mean[j];
                std[j] += d * d / n;
            }
        }
        for s in &mut std {
            *s = s.sqrt().max(1e-9);
        }
        let mut classes: Vec<String> = Vec::new();
        let mut sums: Vec<Vec<f64>> = Vec::new();
        let mut counts: Vec<f64> = Vec::new();
        for (label, f) in labeled {
            let idx = match classes.iter().position(|c| c == label) {
                Some(i) => i,
                None => {
                    classes.push(label.clone());
                    sums.push(vec![0.0; dim]);
                    counts.push(0.0);
                    classes.len() - 1
                }
            };
            for j in 0..dim {
                sums[idx][j] += (f[j] - mean[j]) / std[j];
            }
            counts[idx] += 1.0;
        }
        let centroids = sums
            .iter()
            .zip(&counts)
            .map(|(s, &c)| s.iter().map(|v| v / c).collect())
            .collect();
        Ok(CentroidClassifier {
            classes,
            centroids,
            mean,
            std,
        })
    }

    pub fn classify(&self, features: &[f64]) -> &str {
        let z: Vec<f64> = features
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect();
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, c) in self.centroids.iter().enumerate() {
            let d: f64 = c.iter().zip(&z).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        &self.classes[best]
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }
}

/// Label every frame of a sequence by classifying a centered window.
pub fn classify_frames(
    seq: &MotionSequence,
    classifier: &CentroidClassifier,
    window: usize,
) -> Vec<String> {
    let n = seq.n_frames();
    let half = window / 2;
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half).min(n.saturating_sub(window));
            let hi = (lo + window).min(n);
            classifier.classify(&window_features(seq, lo, hi)).to_string()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{gen_synthetic, MotionClass, ALL_CLASSES};
    use crate::num::rng::Rng;

    #[test]
    fn pure_tone_peak_on_bin() {
        let n = 64;
        let f_hz = 2.5;
        let fps = 20.0;
        let x: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * f_hz * i as f64 / fps).sin())
            .collect();
        let spec = power_spectrum(&x);
        let peak = (1..spec.len()).max_by(|&a, &b| spec[a].total_cmp(&spec[b])).unwrap();
        assert_eq!(peak as f64 * fps / n as f64, 2.5);
    }

    #[test]
    fn run_is_twice_walk() {
        let mut rng = Rng::new(17);
        let walk = gen_synthetic(&mut rng, MotionClass::Walk, 64, 16, 20.0).unwrap();
        let run = gen_synthetic(&mut rng, MotionClass::Run, 64, 16, 20.0).unwrap();
        let fw = dominant_freq(&walk);
        let fr = dominant_freq(&run);
        assert_eq!(fr, 2.0 * fw, "walk {fw} Hz, run {fr} Hz");
    }

    #[test]
    fn dataset_separability_500_sequences() {
        // nearest centroid on (dominant freq, mean amplitude) must be
        // perfect on the generated training set
        let mut rng = Rng::new(40);
        let mut labeled = Vec::new();
        for class in ALL_CLASSES {
            for _ in 0..100 {
                let seq = gen_synthetic(&mut rng, class, 64, 16, 20.0).unwrap();
                labeled.push((class.name().to_string(), separability_features(&seq)));
            }
        }
        let clf = CentroidClassifier::fit(&labeled).unwrap();
        let correct = labeled
            .iter()
            .filter(|(label, f)| clf.classify(f) == label)
            .count();
        assert_eq!(correct, labeled.len());
    }

    #[test]
    fn window_classifier_on_clean_windows() {
        let mut rng = Rng::new(41);
        let mut labeled = Vec::new();
        for class in ALL_CLASSES {
            for _ in 0..20 {
                let seq = gen_synthetic(&mut rng, class, 64, 16, 20.0).unwrap();
                for lo in [0usize, 16, 32] {
                    labeled.push((class.name().to_string(), window_features(&seq, lo, lo + 32)));
                }
            }
        }
        let clf = CentroidClassifier::fit(&labeled).unwrap();
        let mut correct = 0;
        let mut total = 0;
        for class in ALL_CLASSES {
            for s in 0..10 {
                let seq = gen_synthetic(&mut Rng::new(1000 + s), class, 64, 16, 20.0).unwrap();
                let labels = classify_frames(&seq, &clf, 32);
                total += labels.len();
                correct += labels.iter().filter(|l| l.as_str() == class.name()).count();
            }
        }
        let acc = correct as f64 / total as f64;
        assert!(acc > 0.99, "window accuracy {acc}");
    }
}
