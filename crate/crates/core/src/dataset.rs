//! Dataset assembly: normalization statistics, fixed-length preparation,
//! weighted multi-source sampling, train/validation/test splitting, and a
//! synthetic desk-scale corpus standing in for full mocap datasets.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::audio::{self, AudioFeatureLayout, Pcm};
use crate::conditioning::{embed_text, ConditionBundle, TextEncoder};
use crate::error::{Error, Result};
use crate::features::{encode_features, EncodeSettings, FeatureLayout, FootJoints};
use crate::math::Quat;
use crate::skeleton::{Joint, MotionClip, Skeleton};

/// Per-dimension mean and standard deviation over the training split.
#[derive(Debug, Clone)]
pub struct NormStats {
    pub mean: Array1<f64>,
    /// Floored at 1e-8 so constant dimensions normalize to zero.
    pub std: Array1<f64>,
}

pub const STD_FLOOR: f64 = 1e-8;

impl NormStats {
    /// Fits statistics over every row of every entry.
    pub fn fit(entries: &[&Array2<f64>]) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("cannot fit normalization on no entries"));
        }
        let dim = entries[0].ncols();
        let mut count = 0usize;
        let mut sum = Array1::<f64>::zeros(dim);
        for e in entries {
            if e.ncols() != dim {
                return Err(Error::shape(format!(
                    "entry has {} columns, expected {dim}",
                    e.ncols()
                )));
            }
            for row in e.rows() {
                sum += &row;
                count += 1;
            }
        }
        if count < 2 {
            return Err(Error::invalid(
                "normalization needs at least 2 frames in total",
            ));
        }
        let mean = sum / count as f64;
        let mut var = Array1::<f64>::zeros(dim);
        for e in entries {
            for row in e.rows() {
                let d = &row - &mean;
                var += &(&d * &d);
            }
        }
        var /= count as f64;
        let std = var.mapv(|v| v.sqrt().max(STD_FLOOR));
        Ok(NormStats { mean, std })
    }

    pub fn apply(&self, features: &Array2<f64>) -> Array2<f64> {
        (features - &self.mean) / &self.std
    }

    pub fn invert(&self, normalized: &Array2<f64>) -> Array2<f64> {
        normalized * &self.std + &self.mean
    }
}

/// Zero-pads short sequences (marking real frames in the validity mask) or
/// takes a seeded random contiguous crop of long ones.
pub fn pad_or_crop<R: Rng>(
    features: &Array2<f64>,
    target_frames: usize,
    rng: &mut R,
) -> (Array2<f64>, Vec<bool>) {
    let frames = features.nrows();
    let cols = features.ncols();
    if frames == target_frames {
        return (features.clone(), vec![true; target_frames]);
    }
    if frames < target_frames {
        let mut out = Array2::<f64>::zeros((target_frames, cols));
        out.slice_mut(ndarray::s![..frames, ..]).assign(features);
        let mut mask = vec![false; target_frames];
        mask[..frames].fill(true);
        return (out, mask);
    }
    let start = rng.random_range(0..=frames - target_frames);
    let out = features
        .slice(ndarray::s![start..start + target_frames, ..])
        .to_owned();
    (out, vec![true; target_frames])
}

/// Infinite stream of `(source, element)` indices: each draw picks source
/// `k` with probability `w_k / sum(w)`, then a uniform element of it.
#[derive(Debug, Clone)]
pub struct WeightedSampler<R: Rng> {
    sizes: Vec<usize>,
    cumulative: Vec<f64>,
    rng: R,
}

impl<R: Rng> WeightedSampler<R> {
    pub fn new(sizes: &[usize], weights: &[f64], rng: R) -> Result<Self> {
        if sizes.len() != weights.len() || sizes.is_empty() {
            return Err(Error::invalid(
                "sampler needs matching, non-empty sizes and weights",
            ));
        }
        if weights.iter().any(|&w| !(w.is_finite() && w >= 0.0)) {
            return Err(Error::invalid("sampler weights must be non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::invalid("sampler weights must not all be zero"));
        }
        for (k, (&s, &w)) in sizes.iter().zip(weights).enumerate() {
            if w > 0.0 && s == 0 {
                return Err(Error::invalid(format!(
                    "source {k} has weight {w} but no elements"
                )));
            }
        }
        let mut cumulative = Vec::with_capacity(weights.len());
        let mut acc = 0.0;
        for w in weights {
            acc += w / total;
            cumulative.push(acc);
        }
        *cumulative.last_mut().unwrap() = 1.0;
        Ok(WeightedSampler {
            sizes: sizes.to_vec(),
            cumulative,
            rng,
        })
    }

    pub fn draw(&mut self) -> (usize, usize) {
        let u: f64 = self.rng.random();
        let source = self
            .cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.cumulative.len() - 1);
        let element = self.rng.random_range(0..self.sizes[source]);
        (source, element)
    }
}

impl<R: Rng> Iterator for WeightedSampler<R> {
    type Item = (usize, usize);

    fn next(&mut self) -> Option<(usize, usize)> {
        Some(self.draw())
    }
}

/// Split assignment for one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Seeded 8:1:1 split by sequence.
pub fn split_sequences(count: usize, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates.
    for i in (1..count).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let n_val = count / 10;
    let n_test = count / 10;
    let n_train = count - n_val - n_test;
    let mut out = vec![Split::Train; count];
    for (rank, &idx) in order.iter().enumerate() {
        out[idx] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Validation
        } else {
            Split::Test
        };
    }
    out
}

/// One prepared sequence: features at the original length plus its
/// condition. Exactly one modality is present; the other is zero-filled.
#[derive(Debug, Clone)]
pub struct CorpusEntry {
    pub features: Array2<f64>,
    pub bundle: ConditionBundle,
    pub family: String,
    pub split: Split,
}

/// Desk-scale synthetic corpus: a text-conditioned source with labeled
/// motion families and an audio-conditioned source whose arm swing follows
/// the audio energy envelope.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub skeleton: Skeleton,
    pub layout: FeatureLayout,
    pub audio_layout: AudioFeatureLayout,
    pub text_entries: Vec<CorpusEntry>,
    pub audio_entries: Vec<CorpusEntry>,
    pub frames: usize,
    pub fps: f64,
}

/// Generation knobs for the synthetic corpus.
#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    /// Model sequence length T_M; "wave" entries are generated at exactly
    /// this length so spectral checks see a full window.
    pub frames: usize,
    /// Other families draw lengths in `min_frames..=frames`.
    pub min_frames: usize,
    pub fps: f64,
    pub entries_per_family: usize,
    pub audio_entries: usize,
    /// Arm oscillation rate of the "wave" family, in Hz. Pick a multiple
    /// of `fps / frames` so it lands on an FFT bin.
    pub wave_hz: f64,
    pub walk_hz: f64,
    pub text_dim: usize,
    pub audio_layout: AudioFeatureLayout,
}

impl SyntheticConfig {
    /// Reference desk-scale configuration used by tests and examples.
    pub fn desk() -> Self {
        SyntheticConfig {
            frames: 48,
            min_frames: 40,
            fps: 20.0,
            entries_per_family: 40,
            audio_entries: 60,
            wave_hz: 1.25,
            walk_hz: 2.0 / 2.4,
            text_dim: 64,
            audio_layout: AudioFeatureLayout {
                mfcc: 13,
                mel: 20,
                pitch: 2,
                energy: 1,
                onsets: 1,
                external: 0,
            },
        }
    }
}

/// The 5-joint toy skeleton: root, head, one arm, two feet. Standing
/// height 0.9 m at the root with feet on the ground plane.
pub fn synthetic_skeleton() -> Skeleton {
    Skeleton::new(vec![
        Joint {
            name: "root".into(),
            parent: None,
            offset: [0.0, 0.0, 0.0],
            end_site: None,
        },
        Joint {
            name: "head".into(),
            parent: Some(0),
            offset: [0.0, 0.6, 0.0],
            end_site: Some([0.0, 0.2, 0.0]),
        },
        Joint {
            name: "arm".into(),
            parent: Some(0),
            offset: [0.3, 0.4, 0.0],
            end_site: Some([0.3, 0.0, 0.0]),
        },
        Joint {
            name: "foot_l".into(),
            parent: Some(0),
            offset: [-0.15, -0.9, 0.0],
            end_site: Some([0.0, 0.0, 0.1]),
        },
        Joint {
            name: "foot_r".into(),
            parent: Some(0),
            offset: [0.15, -0.9, 0.0],
            end_site: Some([0.0, 0.0, 0.1]),
        },
    ])
    .unwrap()
}

/// Foot-joint naming for [`synthetic_skeleton`].
pub fn synthetic_encode_settings() -> EncodeSettings {
    EncodeSettings {
        foot_joints: FootJoints {
            left_heel: "foot_l".into(),
            left_toe: "foot_l".into(),
            right_heel: "foot_r".into(),
            right_toe: "foot_r".into(),
        },
        contact_threshold: 0.10,
    }
}

/// Index of the oscillating arm joint in [`synthetic_skeleton`].
pub const ARM_JOINT: usize = 2;

fn rest_clip(skeleton: &Skeleton, frames: usize, fps: f64) -> MotionClip {
    MotionClip {
        fps,
        root_translation: vec![[0.0, 0.9, 0.0]; frames],
        rotations: vec![vec![Quat::IDENTITY; skeleton.len()]; frames],
    }
}

/// Arm angle series about the local X axis; the inverse of how the corpus
/// drives the arm joint.
pub fn arm_angle_series(clip: &MotionClip) -> Vec<f64> {
    clip.rotations
        .iter()
        .map(|frame| {
            let q = &frame[ARM_JOINT];
            2.0 * q.x.atan2(q.w)
        })
        .collect()
}

fn synth_text_clip(
    cfg: &SyntheticConfig,
    skeleton: &Skeleton,
    family: &str,
    rng: &mut ChaCha8Rng,
) -> MotionClip {
    let frames = if family == "wave" {
        cfg.frames
    } else {
        rng.random_range(cfg.min_frames..=cfg.frames)
    };
    let mut clip = rest_clip(skeleton, frames, cfg.fps);
    let amp_jitter = 1.0 + 0.1 * (rng.random::<f64>() * 2.0 - 1.0);
    match family {
        "still" => {}
        "wave" => {
            let amp = 0.8 * amp_jitter;
            for t in 0..frames {
                let time = t as f64 / cfg.fps;
                let angle = amp * (std::f64::consts::TAU * cfg.wave_hz * time).sin();
                clip.rotations[t][ARM_JOINT] =
                    Quat::from_axis_angle_parts([1.0, 0.0, 0.0], angle);
            }
        }
        "walk" => {
            let amp = 0.5 * amp_jitter;
            let speed = 0.5 * amp_jitter;
            for t in 0..frames {
                let time = t as f64 / cfg.fps;
                let phase = std::f64::consts::TAU * cfg.walk_hz * time;
                clip.root_translation[t][2] = speed * time;
                clip.rotations[t][3] =
                    Quat::from_axis_angle_parts([1.0, 0.0, 0.0], amp * phase.sin());
                clip.rotations[t][4] = Quat::from_axis_angle_parts(
                    [1.0, 0.0, 0.0],
                    amp * (phase + std::f64::consts::PI).sin(),
                );
            }
        }
        other => unreachable!("unknown family {other}"),
    }
    clip
}

/// Audio-conditioned entry: a 150 Hz tone with a slow amplitude envelope;
/// the arm angle tracks the envelope.
fn synth_audio_entry(
    cfg: &SyntheticConfig,
    skeleton: &Skeleton,
    settings: &EncodeSettings,
    rng: &mut ChaCha8Rng,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let frames = cfg.frames;
    let phase = rng.random::<f64>() * std::f64::consts::TAU;
    let env_hz = cfg.fps / cfg.frames as f64; // one envelope cycle per clip
    let envelope = |time: f64| 0.3 + 0.2 * (std::f64::consts::TAU * env_hz * time + phase).sin();

    let sample_count = (frames as f64 / cfg.fps * audio::SAMPLE_RATE as f64) as usize;
    let samples: Vec<f64> = (0..sample_count)
        .map(|i| {
            let time = i as f64 / audio::SAMPLE_RATE as f64;
            envelope(time) * (std::f64::consts::TAU * 150.0 * time).sin()
        })
        .collect();
    let pcm = Pcm {
        sample_rate: audio::SAMPLE_RATE,
        samples,
    };
    let raw = audio::extract_audio_features(&pcm, &cfg.audio_layout, None)?;
    let aligned = audio::align_audio_to_frames(&raw, frames)?;

    let mut clip = rest_clip(skeleton, frames, cfg.fps);
    for t in 0..frames {
        let time = t as f64 / cfg.fps;
        let angle = 2.0 * (envelope(time) - 0.3);
        clip.rotations[t][ARM_JOINT] = Quat::from_axis_angle_parts([1.0, 0.0, 0.0], angle);
    }
    let features = encode_features(skeleton, &clip, settings)?;
    Ok((features.data, aligned))
}

/// Builds the synthetic corpus. Deterministic given the seed: every entry
/// draws from its own rng stream.
pub fn make_synthetic_corpus(
    cfg: &SyntheticConfig,
    encoder: &dyn TextEncoder,
    seed: u64,
) -> Result<SyntheticCorpus> {
    if encoder.dim() != cfg.text_dim {
        return Err(Error::shape(format!(
            "text encoder dim {} does not match config text_dim {}",
            encoder.dim(),
            cfg.text_dim
        )));
    }
    let skeleton = synthetic_skeleton();
    let settings = synthetic_encode_settings();
    let layout = FeatureLayout::new(skeleton.len())?;
    let audio_dim = cfg.audio_layout.total();

    let mut stream = 0u64;
    let mut next_rng = |seed_base: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_base);
        rng.set_stream(stream);
        stream += 1;
        rng
    };

    let mut text_entries = Vec::new();
    for family in ["still", "wave", "walk"] {
        for _ in 0..cfg.entries_per_family {
            let mut rng = next_rng(seed);
            let clip = synth_text_clip(cfg, &skeleton, family, &mut rng);
            let features = encode_features(&skeleton, &clip, &settings)?;
            let bundle = ConditionBundle::new(
                Some(embed_text(family, encoder, 20)),
                None,
                cfg.text_dim,
                cfg.frames,
                audio_dim,
            )?;
            text_entries.push(CorpusEntry {
                features: features.data,
                bundle,
                family: family.to_string(),
                split: Split::Train,
            });
        }
    }

    let mut audio_entries = Vec::new();
    for _ in 0..cfg.audio_entries {
        let mut rng = next_rng(seed);
        let (features, aligned) = synth_audio_entry(cfg, &skeleton, &settings, &mut rng)?;
        let bundle = ConditionBundle::new(
            None,
            Some(aligned),
            cfg.text_dim,
            cfg.frames,
            audio_dim,
        )?;
        audio_entries.push(CorpusEntry {
            features,
            bundle,
            family: "speech".to_string(),
            split: Split::Train,
        });
    }

    // Seeded 8:1:1 split per source.
    for (salt, entries) in [(1u64, &mut text_entries), (2u64, &mut audio_entries)] {
        let splits = split_sequences(entries.len(), seed ^ salt);
        for (e, s) in entries.iter_mut().zip(splits) {
            e.split = s;
        }
    }

    Ok(SyntheticCorpus {
        skeleton,
        layout,
        audio_layout: cfg.audio_layout.clone(),
        text_entries,
        audio_entries,
        frames: cfg.frames,
        fps: cfg.fps,
    })
}

impl SyntheticCorpus {
    /// Content digest over every entry's features and conditions.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for e in self.text_entries.iter().chain(&self.audio_entries) {
            for v in e.features.iter() {
                hasher.update(v.to_le_bytes());
            }
            for v in e.bundle.text.iter() {
                hasher.update(v.to_le_bytes());
            }
            for v in e.bundle.audio.iter() {
                hasher.update(v.to_le_bytes());
            }
            hasher.update(e.family.as_bytes());
        }
        hex_string(&hasher.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
