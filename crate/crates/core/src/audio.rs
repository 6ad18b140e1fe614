//! Audio feature extraction for the speech condition.
//!
//! Input is 16 kHz mono 16-bit PCM. Analysis runs on 25 ms Hann windows
//! with a 50 ms hop (20 feature frames per second). Per frame the
//! extractor produces MFCCs, a log-mel spectrum, pitch (normalized
//! autocorrelation, zero when unvoiced, plus a voicing flag), log-RMS
//! energy, and half-wave-rectified spectral flux onsets. The external
//! embedding slice stays zero unless a pluggable embedder is supplied.

use ndarray::Array2;
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};
use crate::par;

/// Required input sample rate.
pub const SAMPLE_RATE: u32 = 16_000;
/// Analysis window: 25 ms.
pub const WINDOW: usize = 400;
/// Frame hop: 50 ms, i.e. 20 feature frames per second.
pub const HOP: usize = 800;
/// FFT length (window zero-padded).
pub const FFT_LEN: usize = 512;

const ENERGY_FLOOR: f64 = 1e-8;
const LOG_MEL_FLOOR: f64 = 1e-10;
const PITCH_MIN_HZ: f64 = 60.0;
const PITCH_MAX_HZ: f64 = 500.0;
const VOICING_THRESHOLD: f64 = 0.5;

/// Named widths of the audio feature vector, in storage order:
/// `mfcc | mel | pitch | energy | onsets | external`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AudioFeatureLayout {
    pub mfcc: usize,
    pub mel: usize,
    /// f0 in Hz plus a voicing flag.
    pub pitch: usize,
    pub energy: usize,
    pub onsets: usize,
    /// Slot for an external pretrained embedding; zero-filled by default.
    pub external: usize,
}

impl Default for AudioFeatureLayout {
    /// Widths summing to the default 1133-dim audio condition.
    fn default() -> Self {
        AudioFeatureLayout {
            mfcc: 40,
            mel: 85,
            pitch: 2,
            energy: 1,
            onsets: 1,
            external: 1004,
        }
    }
}

impl AudioFeatureLayout {
    pub fn total(&self) -> usize {
        self.mfcc + self.mel + self.pitch + self.energy + self.onsets + self.external
    }

    pub fn validate(&self) -> Result<()> {
        if self.mfcc == 0 || self.mel == 0 || self.pitch != 2 || self.energy != 1 || self.onsets != 1
        {
            return Err(Error::invalid(
                "audio layout: mfcc and mel must be positive; pitch width is 2, energy and onsets 1",
            ));
        }
        if self.mfcc > self.mel {
            return Err(Error::invalid(format!(
                "audio layout: mfcc width {} exceeds mel filter count {}",
                self.mfcc, self.mel
            )));
        }
        Ok(())
    }

    pub fn mfcc_range(&self) -> std::ops::Range<usize> {
        0..self.mfcc
    }

    pub fn mel_range(&self) -> std::ops::Range<usize> {
        let s = self.mfcc;
        s..s + self.mel
    }

    pub fn pitch_range(&self) -> std::ops::Range<usize> {
        let s = self.mfcc + self.mel;
        s..s + self.pitch
    }

    pub fn energy_range(&self) -> std::ops::Range<usize> {
        let s = self.mfcc + self.mel + self.pitch;
        s..s + self.energy
    }

    pub fn onsets_range(&self) -> std::ops::Range<usize> {
        let s = self.mfcc + self.mel + self.pitch + self.energy;
        s..s + self.onsets
    }

    pub fn external_range(&self) -> std::ops::Range<usize> {
        let s = self.mfcc + self.mel + self.pitch + self.energy + self.onsets;
        s..s + self.external
    }
}

/// Pluggable per-frame audio embedder filling the external slice.
pub trait AudioEmbedder: Sync {
    fn dim(&self) -> usize;
    /// Embeds one analysis window of raw samples; must be deterministic.
    fn embed_frame(&self, frame: &[f64], sample_rate: u32) -> Vec<f64>;
}

/// Mono PCM audio.
#[derive(Debug, Clone)]
pub struct Pcm {
    pub sample_rate: u32,
    pub samples: Vec<f64>,
}

fn chunk_id(bytes: &[u8]) -> &[u8; 4] {
    bytes[..4].try_into().expect("slice of length >= 4")
}

/// Parses a RIFF/WAVE file. Only 16-bit PCM, mono, 16 kHz is accepted.
pub fn parse_wav(bytes: &[u8]) -> Result<Pcm> {
    if bytes.len() < 12 || chunk_id(bytes) != b"RIFF" || chunk_id(&bytes[8..]) != b"WAVE" {
        return Err(Error::format("not a RIFF/WAVE file"));
    }
    let mut pos = 12usize;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = chunk_id(&bytes[pos..]);
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_end = pos + 8 + size;
        if body_end > bytes.len() {
            return Err(Error::format("WAV chunk extends past end of file"));
        }
        let body = &bytes[pos + 8..body_end];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::format("WAV fmt chunk too short"));
                }
                fmt = Some((
                    u16::from_le_bytes(body[0..2].try_into().unwrap()),
                    u16::from_le_bytes(body[2..4].try_into().unwrap()),
                    u32::from_le_bytes(body[4..8].try_into().unwrap()),
                    u16::from_le_bytes(body[14..16].try_into().unwrap()),
                ));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // Chunks are word-aligned.
        pos = body_end + (size & 1);
    }
    let (format, channels, rate, bits) =
        fmt.ok_or_else(|| Error::format("WAV file has no fmt chunk"))?;
    let data = data.ok_or_else(|| Error::format("WAV file has no data chunk"))?;
    if format != 1 || bits != 16 {
        return Err(Error::invalid(format!(
            "unsupported WAV encoding (format {format}, {bits}-bit); need 16-bit PCM"
        )));
    }
    if channels != 1 {
        return Err(Error::invalid(format!(
            "unsupported channel count {channels}; need mono"
        )));
    }
    if rate != SAMPLE_RATE {
        return Err(Error::invalid(format!(
            "unsupported sample rate {rate}; need {SAMPLE_RATE}"
        )));
    }
    let samples = data
        .chunks_exact(2)
        .map(|c| f64::from(i16::from_le_bytes([c[0], c[1]])) / 32768.0)
        .collect();
    Ok(Pcm {
        sample_rate: rate,
        samples,
    })
}

/// Serializes mono samples as a 16-bit PCM WAV file.
pub fn write_wav_mono16(samples: &[f64], sample_rate: u32) -> Vec<u8> {
    let data_len = samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (std::f64::consts::TAU * n as f64 / len as f64).cos())
        .collect()
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank over the positive-frequency bins.
fn mel_filterbank(n_mels: usize, sample_rate: u32) -> Vec<Vec<(usize, f64)>> {
    let nyquist = sample_rate as f64 / 2.0;
    let n_bins = FFT_LEN / 2 + 1;
    let mel_points: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(hz_to_mel(nyquist) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / FFT_LEN as f64;
    (0..n_mels)
        .map(|k| {
            let (lo, mid, hi) = (mel_points[k], mel_points[k + 1], mel_points[k + 2]);
            let mut taps = Vec::new();
            for bin in 0..n_bins {
                let f = bin as f64 * bin_hz;
                let w = if f > lo && f < mid {
                    (f - lo) / (mid - lo)
                } else if f >= mid && f < hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                if w > 0.0 {
                    taps.push((bin, w));
                }
            }
            taps
        })
        .collect()
}

/// Normalized autocorrelation pitch with parabolic peak refinement.
/// Returns `(f0_hz, voiced)`; unvoiced frames report 0 Hz.
fn frame_pitch(frame: &[f64], sample_rate: u32) -> (f64, f64) {
    let w = frame.len();
    let rms = (frame.iter().map(|x| x * x).sum::<f64>() / w as f64).sqrt();
    if rms < 1e-5 {
        return (0.0, 0.0);
    }
    let lag_min = (sample_rate as f64 / PITCH_MAX_HZ).floor() as usize;
    let lag_max = ((sample_rate as f64 / PITCH_MIN_HZ).ceil() as usize).min(w - 2);
    if lag_min + 1 >= lag_max {
        return (0.0, 0.0);
    }
    let nacf = |lag: usize| -> f64 {
        let n = w - lag;
        let mut num = 0.0;
        let mut e0 = 0.0;
        let mut e1 = 0.0;
        for i in 0..n {
            num += frame[i] * frame[i + lag];
            e0 += frame[i] * frame[i];
            e1 += frame[i + lag] * frame[i + lag];
        }
        let denom = (e0 * e1).sqrt();
        if denom < 1e-12 {
            0.0
        } else {
            num / denom
        }
    };
    let values: Vec<f64> = (lag_min..=lag_max).map(nacf).collect();
    let best_val = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if best_val < VOICING_THRESHOLD {
        return (0.0, 0.0);
    }
    // A periodic signal peaks at every multiple of its period; take the
    // shortest-lag local maximum near the global peak to avoid octave
    // errors toward subharmonics.
    let mut best_lag = lag_max;
    for (i, &v) in values.iter().enumerate() {
        let left_ok = i == 0 || v >= values[i - 1];
        let right_ok = i + 1 == values.len() || v >= values[i + 1];
        if left_ok && right_ok && v >= 0.9 * best_val {
            best_lag = lag_min + i;
            break;
        }
    }
    let best_val = nacf(best_lag);
    // Parabolic interpolation around the peak for sub-sample lag.
    let refined = if best_lag > lag_min && best_lag < lag_max {
        let (ym, y0, yp) = (nacf(best_lag - 1), best_val, nacf(best_lag + 1));
        let denom = ym - 2.0 * y0 + yp;
        if denom.abs() < 1e-12 {
            best_lag as f64
        } else {
            best_lag as f64 + 0.5 * (ym - yp) / denom
        }
    } else {
        best_lag as f64
    };
    (sample_rate as f64 / refined, 1.0)
}

struct FrameAnalysis {
    mfcc: Vec<f64>,
    log_mel: Vec<f64>,
    pitch: (f64, f64),
    energy: f64,
    magnitude: Vec<f64>,
    external: Vec<f64>,
}

/// Extracts the per-frame audio feature matrix (`F_a x layout.total()`).
pub fn extract_audio_features(
    pcm: &Pcm,
    layout: &AudioFeatureLayout,
    embedder: Option<&dyn AudioEmbedder>,
) -> Result<Array2<f64>> {
    layout.validate()?;
    if pcm.sample_rate != SAMPLE_RATE {
        return Err(Error::invalid(format!(
            "unsupported sample rate {}; need {SAMPLE_RATE}",
            pcm.sample_rate
        )));
    }
    if pcm.samples.len() < WINDOW {
        return Err(Error::invalid(format!(
            "audio too short: {} samples, need at least one {WINDOW}-sample window",
            pcm.samples.len()
        )));
    }
    if let Some(e) = embedder {
        if e.dim() != layout.external {
            return Err(Error::shape(format!(
                "audio embedder dim {} does not match external slice width {}",
                e.dim(),
                layout.external
            )));
        }
    }
    let n_frames = 1 + (pcm.samples.len() - WINDOW) / HOP;
    let hann = hann_window(WINDOW);
    let filters = mel_filterbank(layout.mel, pcm.sample_rate);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(FFT_LEN);

    let analyses: Vec<FrameAnalysis> = par::map_indexed(n_frames, |fi| {
        let start = fi * HOP;
        let frame = &pcm.samples[start..start + WINDOW];
        let mut buf: Vec<Complex<f64>> = frame
            .iter()
            .zip(&hann)
            .map(|(x, w)| Complex::new(x * w, 0.0))
            .chain(std::iter::repeat(Complex::new(0.0, 0.0)).take(FFT_LEN - WINDOW))
            .collect();
        fft.process(&mut buf);
        let magnitude: Vec<f64> = buf[..FFT_LEN / 2 + 1].iter().map(|c| c.norm()).collect();

        let log_mel: Vec<f64> = filters
            .iter()
            .map(|taps| {
                let power: f64 = taps
                    .iter()
                    .map(|(bin, w)| w * magnitude[*bin] * magnitude[*bin])
                    .sum();
                (power + LOG_MEL_FLOOR).ln()
            })
            .collect();

        // Orthonormal DCT-II of the log-mel energies.
        let n = layout.mel as f64;
        let mfcc: Vec<f64> = (0..layout.mfcc)
            .map(|i| {
                let scale = if i == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
                scale
                    * log_mel
                        .iter()
                        .enumerate()
                        .map(|(j, v)| {
                            v * (std::f64::consts::PI * i as f64 * (j as f64 + 0.5) / n).cos()
                        })
                        .sum::<f64>()
            })
            .collect();

        let rms = (frame.iter().map(|x| x * x).sum::<f64>() / WINDOW as f64).sqrt();
        let energy = rms.max(ENERGY_FLOOR).ln();
        let pitch = frame_pitch(frame, pcm.sample_rate);
        let external = match embedder {
            Some(e) => e.embed_frame(frame, pcm.sample_rate),
            None => vec![0.0; layout.external],
        };
        FrameAnalysis {
            mfcc,
            log_mel,
            pitch,
            energy,
            magnitude,
            external,
        }
    });

    let mut out = Array2::<f64>::zeros((n_frames, layout.total()));
    for (fi, a) in analyses.iter().enumerate() {
        let mut row = out.row_mut(fi);
        for (k, v) in a.mfcc.iter().enumerate() {
            row[layout.mfcc_range().start + k] = *v;
        }
        for (k, v) in a.log_mel.iter().enumerate() {
            row[layout.mel_range().start + k] = *v;
        }
        row[layout.pitch_range().start] = a.pitch.0;
        row[layout.pitch_range().start + 1] = a.pitch.1;
        row[layout.energy_range().start] = a.energy;
        // Half-wave-rectified spectral flux against the previous frame.
        let flux = if fi == 0 {
            0.0
        } else {
            a.magnitude
                .iter()
                .zip(&analyses[fi - 1].magnitude)
                .map(|(cur, prev)| (cur - prev).max(0.0))
                .sum()
        };
        row[layout.onsets_range().start] = flux;
        for (k, v) in a.external.iter().enumerate() {
            row[layout.external_range().start + k] = *v;
        }
    }
    Ok(out)
}

/// Resamples audio feature rows to `frames` rows by linear interpolation in
/// time; endpoints are preserved exactly.
pub fn align_audio_to_frames(features: &Array2<f64>, frames: usize) -> Result<Array2<f64>> {
    let f_a = features.nrows();
    if f_a == 0 {
        return Err(Error::invalid("cannot align an empty feature matrix"));
    }
    if frames == 0 {
        return Err(Error::invalid("target frame count must be at least 1"));
    }
    let cols = features.ncols();
    let mut out = Array2::<f64>::zeros((frames, cols));
    for t in 0..frames {
        if t == 0 || frames == 1 {
            out.row_mut(t).assign(&features.row(0));
            continue;
        }
        if t == frames - 1 {
            out.row_mut(t).assign(&features.row(f_a - 1));
            continue;
        }
        let pos = t as f64 * (f_a - 1) as f64 / (frames - 1) as f64;
        let i0 = (pos.floor() as usize).min(f_a - 1);
        let i1 = (i0 + 1).min(f_a - 1);
        let frac = pos - i0 as f64;
        let lo = features.row(i0);
        let hi = features.row(i1);
        let mut row = out.row_mut(t);
        for c in 0..cols {
            row[c] = (1.0 - frac) * lo[c] + frac * hi[c];
        }
    }
    Ok(out)
}
