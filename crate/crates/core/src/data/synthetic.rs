use std::f64::consts::{FRAC_PI_2, TAU};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{DEFAULT_HORIZON, FRAME_RATE_HZ};
use crate::data::{write_motion, PoseSequence, SplitManifest, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{DType, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_sequences: usize,
    pub length: usize,
    pub joints: usize,
    pub joint_dim: usize,
    pub seed: u64,
    /// Model window the data is meant for; sequences must cover it plus the horizon.
    pub window: usize,
    /// Upper bound on the summed sinusoid amplitudes.
    pub max_amplitude: f64,
    /// Per-sample noise is uniform in `[-noise, noise]`.
    pub noise: f64,
    pub min_freq_hz: f64,
    pub max_freq_hz: f64,
    pub dtype: DType,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_sequences: 250,
            length: 240,
            joints: 24,
            joint_dim: 3,
            seed: 0,
            window: 120,
            max_amplitude: FRAC_PI_2,
            noise: 0.01,
            min_freq_hz: 0.1,
            max_freq_hz: 2.0,
            dtype: DType::F32,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.num_sequences == 0 || self.joints == 0 || self.joint_dim == 0 {
            errs.push("num_sequences, joints and joint_dim must be at least 1".to_string());
        }
        if self.length < self.window + DEFAULT_HORIZON {
            errs.push(format!(
                "length {} is shorter than window {} + horizon {}",
                self.length, self.window, DEFAULT_HORIZON
            ));
        }
        if !(self.max_amplitude > 0.0 && self.max_amplitude <= FRAC_PI_2) {
            errs.push("max_amplitude must be in (0, pi/2]".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            errs.push("noise must be finite and non-negative".into());
        }
        if !(self.min_freq_hz > 0.0 && self.min_freq_hz <= self.max_freq_hz) {
            errs.push("need 0 < min_freq_hz <= max_freq_hz".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

struct Component {
    freq: f64,
    phase: f64,
    amplitude: f64,
}

/// One sequence. A bank of 2 to 4 sinusoids is drawn per sequence and
/// shared by every joint; each joint gets its own phase shift per
/// component and mixing weights in `[-1, 1]` per channel.
fn sequence(spec: &SyntheticSpec, rng: &mut Rng) -> Tensor {
    let k = 2 + rng.below(3);
    let raw: Vec<f64> = (0..k).map(|_| rng.uniform_range(0.2, 1.0)).collect();
    let total: f64 = raw.iter().sum();
    let bank: Vec<Component> = raw
        .iter()
        .map(|a| Component {
            freq: rng.uniform_range(spec.min_freq_hz, spec.max_freq_hz),
            phase: rng.uniform_range(0.0, TAU),
            amplitude: a / total * spec.max_amplitude,
        })
        .collect();
    let (s, m) = (spec.joints, spec.joint_dim);
    let shifts: Vec<f64> = (0..s * k).map(|_| rng.uniform_range(0.0, TAU)).collect();
    let weights: Vec<f64> = (0..s * m * k).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    let mut noise = rng.split("noise");
    let mut data = Vec::with_capacity(spec.length * s * m);
    for t in 0..spec.length {
        let time = t as f64 / FRAME_RATE_HZ;
        for j in 0..s {
            let waves: Vec<f64> = bank
                .iter()
                .enumerate()
                .map(|(c, b)| b.amplitude * (TAU * b.freq * time + b.phase + shifts[j * k + c]).sin())
                .collect();
            for ch in 0..m {
                let w = &weights[(j * m + ch) * k..(j * m + ch + 1) * k];
                let clean: f64 = waves.iter().zip(w).map(|(x, w)| x * w).sum();
                data.push(clean + noise.uniform_range(-spec.noise, spec.noise));
            }
        }
    }
    Tensor::from_parts(vec![spec.length, s, m], data, DType::F64)
}

/// All sequences in memory, in index order.
pub fn synthesize(spec: &SyntheticSpec) -> Result<Vec<PoseSequence>> {
    spec.validate()?;
    let root = Rng::seed_from(spec.seed);
    (0..spec.num_sequences)
        .map(|i| {
            let mut rng = root.split(&format!("sequence/{i}"));
            PoseSequence::new(sequence(spec, &mut rng).to_dtype(spec.dtype))
        })
        .collect()
}

fn split_sizes(n: usize) -> (usize, usize) {
    let train = (n as f64 * 0.8).round() as usize;
    let val = ((n as f64 * 0.1).round() as usize).min(n - train);
    (train, val)
}

/// Writes one `MOTN` file per sequence plus `manifest.json` into `root`.
pub fn generate_synthetic(spec: &SyntheticSpec, root: impl AsRef<Path>) -> Result<SplitManifest> {
    let root = root.as_ref();
    let sequences = synthesize(spec)?;
    fs::create_dir_all(root).map_err(|e| Error::from(e).in_file(root))?;
    let names: Vec<String> = (0..sequences.len()).map(|i| format!("seq_{i:05}.motn")).collect();
    for (name, seq) in names.iter().zip(&sequences) {
        write_motion(root.join(name), seq, spec.dtype)?;
    }
    let mut order: Vec<usize> = (0..names.len()).collect();
    Rng::seed_from(spec.seed).split("split").shuffle(&mut order);
    let (n_train, n_val) = split_sizes(order.len());
    let pick = |idx: &[usize]| {
        let mut v: Vec<String> = idx.iter().map(|&i| names[i].clone()).collect();
        v.sort();
        v
    };
    let manifest = SplitManifest {
        seed: spec.seed,
        train: pick(&order[..n_train]),
        validation: pick(&order[n_train..n_train + n_val]),
        test: pick(&order[n_train + n_val..]),
    };
    manifest.save(root.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_split, Split};

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            num_sequences: 10,
            length: 40,
            joints: 3,
            joint_dim: 3,
            window: 8,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ma = generate_synthetic(&small(), a.path()).unwrap();
        let mb = generate_synthetic(&small(), b.path()).unwrap();
        assert_eq!(ma, mb);
        for name in ma.train.iter().chain(&ma.validation).chain(&ma.test) {
            assert_eq!(
                fs::read(a.path().join(name)).unwrap(),
                fs::read(b.path().join(name)).unwrap()
            );
        }
        let other = synthesize(&SyntheticSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(other, synthesize(&small()).unwrap());
    }

    #[test]
    fn values_are_bounded() {
        let spec = SyntheticSpec { dtype: DType::F64, ..small() };
        for seq in synthesize(&spec).unwrap() {
            let max = seq.frames.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max <= spec.max_amplitude + spec.noise + 1e-12, "{max}");
        }
    }

    #[test]
    fn split_is_80_10_10_and_disjoint() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic(&small(), dir.path()).unwrap();
        assert_eq!((m.train.len(), m.validation.len(), m.test.len()), (8, 1, 1));
        m.check_disjoint().unwrap();
        assert_eq!(split_sizes(250), (200, 25));
        let test = load_split(dir.path(), Split::Test).unwrap();
        assert_eq!(test[0].frames.shape(), &[40, 3, 3]);
    }

    #[test]
    fn joints_share_frequencies() {
        // Shared bank: the spectra of two joints of one sequence peak at the same bin.
        let spec = SyntheticSpec {
            num_sequences: 1,
            length: 600,
            joints: 2,
            joint_dim: 1,
            noise: 0.0,
            dtype: DType::F64,
            ..small()
        };
        let seq = &synthesize(&spec).unwrap()[0];
        let peak = |j: usize| {
            let x: Vec<f64> = (0..600).map(|t| seq.frames.get(&[t, j, 0])).collect();
            (1..60)
                .map(|f| {
                    let (re, im) = x.iter().enumerate().fold((0.0, 0.0), |(r, i), (t, v)| {
                        let a = TAU * f as f64 * t as f64 / 600.0;
                        (r + v * a.cos(), i + v * a.sin())
                    });
                    re * re + im * im
                })
                .collect::<Vec<f64>>()
        };
        let (a, b) = (peak(0), peak(1));
        let top = |p: &[f64]| p.iter().cloned().fold(0.0, f64::max);
        // Energy in one joint's spectrum only appears where the other also has energy.
        for f in 0..a.len() {
            if a[f] > 0.5 * top(&a) {
                assert!(b[f] > 1e-6 * top(&b));
            }
        }
    }

    #[test]
    fn too_short_is_rejected() {
        let spec = SyntheticSpec { length: 31, ..small() };
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }
}
