use std::io::{Read, Write};
use std::path::Path;

use mixtts_tensor::{Matrix, Scalar};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{io_err, Error, Result};

pub const SAMPLE_RATE: u32 = 22050;
pub const HOP: usize = 256;
pub const WIN: usize = 1024;
pub const N_FFT: usize = 1024;
pub const N_MELS: usize = 80;
pub const F_MIN: f64 = 0.0;
pub const F_MAX: f64 = 8000.0;
/// Linear magnitudes are clamped here before `log10`.
pub const MAG_FLOOR: f64 = 1e-5;
pub const MEL_MAGIC: &[u8; 4] = b"MEL1";

/// `T×80` log10-mel magnitudes plus the fixed analysis settings.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Matrix<f32>,
    pub sample_rate: u32,
    pub hop: usize,
    pub win: usize,
}

impl MelSpectrogram {
    pub fn new(frames: Matrix<f32>) -> Result<Self> {
        if frames.cols() != N_MELS {
            return Err(Error::MelFormat(format!("expected {N_MELS} mel channels, got {}", frames.cols())));
        }
        if frames.rows() == 0 {
            return Err(Error::MelFormat("mel has no frames".into()));
        }
        if !frames.all_finite() {
            return Err(Error::MelFormat("mel contains non-finite values".into()));
        }
        Ok(Self { frames, sample_rate: SAMPLE_RATE, hop: HOP, win: WIN })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.rows()
    }

    /// Edge-replicates the last frame until the frame count is a multiple of `m`.
    pub fn pad_to_multiple(&self, m: usize) -> Self {
        let t = self.n_frames();
        let target = t.div_ceil(m) * m;
        let last = self.frames.row(t - 1).to_vec();
        let frames = Matrix::from_fn(target, N_MELS, |r, c| if r < t { self.frames[(r, c)] } else { last[c] });
        Self { frames, ..self.clone() }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.frames.len() * 4);
        out.extend_from_slice(MEL_MAGIC);
        out.extend_from_slice(&(self.n_frames() as u32).to_le_bytes());
        out.extend_from_slice(&(N_MELS as u32).to_le_bytes());
        for v in self.frames.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MEL_MAGIC {
            return Err(Error::MelFormat("missing MEL1 header".into()));
        }
        let n_frames = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let n_mels = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if n_mels != N_MELS {
            return Err(Error::MelFormat(format!("header declares {n_mels} mel channels, {N_MELS} required")));
        }
        let expected = 12 + n_frames * N_MELS * 4;
        if bytes.len() != expected {
            return Err(Error::MelFormat(format!("expected {expected} bytes for {n_frames} frames, file has {}", bytes.len())));
        }
        let data = bytes[12..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Self::new(Matrix::from_vec(n_frames, N_MELS, data))
    }
}

pub fn save_mel(mel: &MelSpectrogram, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&mel.to_bytes()).map_err(io_err(path))
}

pub fn load_mel(path: impl AsRef<Path>) -> Result<MelSpectrogram> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(io_err(path))?;
    MelSpectrogram::from_bytes(&bytes)
}

/// Reads a mono PCM (or float) WAV file into samples in `[-1, 1]`.
pub fn load_wav(path: impl AsRef<Path>) -> Result<(Vec<f32>, u32)> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path).map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Audio(format!("{}: expected mono, got {} channels", path.display(), spec.channels)));
    }
    let samples: std::result::Result<Vec<f32>, _> = match spec.sample_format {
        hound::SampleFormat::Float => reader.samples::<f32>().collect(),
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader.samples::<i32>().map(|s| s.map(|v| v as f32 * scale)).collect()
        }
    };
    let samples = samples.map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
    Ok((samples, spec.sample_rate))
}

pub fn hz_to_mel(hz: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    if hz < min_log_hz {
        hz / f_sp
    } else {
        min_log_hz / f_sp + (hz / min_log_hz).ln() / (6.4f64.ln() / 27.0)
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_mel = 1000.0 / f_sp;
    if mel < min_log_mel {
        mel * f_sp
    } else {
        1000.0 * ((mel - min_log_mel) * (6.4f64.ln() / 27.0)).exp()
    }
}

/// Slaney-style triangular filters with area normalization, `80 × (N_FFT/2+1)`.
pub fn mel_filterbank() -> Vec<Vec<f64>> {
    let n_bins = N_FFT / 2 + 1;
    let lo = hz_to_mel(F_MIN);
    let hi = hz_to_mel(F_MAX);
    let pts: Vec<f64> = (0..N_MELS + 2).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (N_MELS + 1) as f64)).collect();
    let bin_hz = |k: usize| k as f64 * SAMPLE_RATE as f64 / N_FFT as f64;
    (0..N_MELS)
        .map(|m| {
            let enorm = 2.0 / (pts[m + 2] - pts[m]);
            (0..n_bins)
                .map(|k| {
                    let f = bin_hz(k);
                    let lower = (f - pts[m]) / (pts[m + 1] - pts[m]);
                    let upper = (pts[m + 2] - f) / (pts[m + 2] - pts[m + 1]);
                    lower.min(upper).max(0.0) * enorm
                })
                .collect()
        })
        .collect()
}

pub fn hann_window() -> Vec<f64> {
    (0..WIN).map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / WIN as f64).cos()).collect()
}

/// Index into a signal extended by mirror reflection without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Log-mel analysis. Frames are centered: the signal is reflect-padded by
/// `N_FFT/2` on both sides, giving `T = floor(N/256) + 1`.
pub fn extract_mel(samples: &[f32], sample_rate: u32) -> Result<MelSpectrogram> {
    if sample_rate != SAMPLE_RATE {
        return Err(Error::SampleRate { expected: SAMPLE_RATE, got: sample_rate });
    }
    if samples.is_empty() {
        return Err(Error::Audio("empty audio".into()));
    }
    let n = samples.len();
    let t = n / HOP + 1;
    let window = hann_window();
    let fb = mel_filterbank();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(N_FFT);
    let half = (N_FFT / 2) as isize;
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    let mut mag = vec![0.0f64; N_FFT / 2 + 1];
    let mut frames = Matrix::<f32>::zeros(t, N_MELS);
    for f in 0..t {
        let start = (f * HOP) as isize - half;
        for (k, b) in buf.iter_mut().enumerate() {
            let s = samples[reflect(start + k as isize, n)] as f64;
            *b = Complex::new(s * window[k], 0.0);
        }
        fft.process(&mut buf);
        for (m, b) in mag.iter_mut().zip(&buf) {
            *m = b.norm();
        }
        for (c, filt) in fb.iter().enumerate() {
            let e: f64 = filt.iter().zip(&mag).map(|(w, m)| w * m).sum();
            frames[(f, c)] = e.max(MAG_FLOOR).log10() as f32;
        }
    }
    MelSpectrogram::new(frames)
}

/// Per-channel mean and standard deviation of log-mels across a corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct MelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl MelStats {
    pub const MIN_STD: f64 = 1e-2;

    pub fn identity() -> Self {
        Self { mean: vec![0.0; N_MELS], std: vec![1.0; N_MELS] }
    }

    pub fn from_mels<'a>(mels: impl IntoIterator<Item = &'a Matrix<f32>>) -> Self {
        let mut sum = vec![0.0; N_MELS];
        let mut sq = vec![0.0; N_MELS];
        let mut n = 0usize;
        for m in mels {
            for r in 0..m.rows() {
                for (c, &v) in m.row(r).iter().enumerate() {
                    sum[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
                n += 1;
            }
        }
        if n == 0 {
            return Self::identity();
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq.iter().zip(&mean).map(|(s, m)| (s / n as f64 - m * m).max(0.0).sqrt().max(Self::MIN_STD)).collect();
        Self { mean, std }
    }

    pub fn normalize<F: Scalar>(&self, m: &Matrix<f32>) -> Matrix<F> {
        Matrix::from_fn(m.rows(), m.cols(), |r, c| F::c((m[(r, c)] as f64 - self.mean[c]) / self.std[c]))
    }

    pub fn denormalize<F: Scalar>(&self, m: &Matrix<F>) -> Matrix<f32> {
        Matrix::from_fn(m.rows(), m.cols(), |r, c| (m[(r, c)].f64() * self.std[c] + self.mean[c]) as f32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn frame_count_law() {
        let one_sec = vec![0.0f32; 22050];
        assert_eq!(extract_mel(&one_sec, SAMPLE_RATE).unwrap().n_frames(), 87);
        for n in [1, 255, 256, 257, 1000, 5000] {
            let x = vec![0.1f32; n];
            assert_eq!(extract_mel(&x, SAMPLE_RATE).unwrap().n_frames(), n / 256 + 1);
        }
    }

    #[test]
    fn silence_hits_the_floor() {
        let mel = extract_mel(&vec![0.0; 4000], SAMPLE_RATE).unwrap();
        let floor = MAG_FLOOR.log10() as f32;
        assert!(mel.frames.as_slice().iter().all(|&v| v == floor));
    }

    #[test]
    fn rejects_wrong_rate() {
        assert!(matches!(extract_mel(&[0.0; 100], 16000), Err(Error::SampleRate { got: 16000, .. })));
    }

    #[test]
    fn matches_a_direct_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f32> = (0..1500).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let mel = extract_mel(&x, SAMPLE_RATE).unwrap();
        let fb = mel_filterbank();
        let w = hann_window();
        let frame = 3;
        let start = frame as isize * HOP as isize - (N_FFT / 2) as isize;
        let seg: Vec<f64> = (0..N_FFT).map(|k| x[reflect(start + k as isize, x.len())] as f64 * w[k]).collect();
        let mag: Vec<f64> = (0..=N_FFT / 2)
            .map(|b| {
                let (mut re, mut im) = (0.0, 0.0);
                for (k, s) in seg.iter().enumerate() {
                    let ang = -2.0 * std::f64::consts::PI * (b * k) as f64 / N_FFT as f64;
                    re += s * ang.cos();
                    im += s * ang.sin();
                }
                (re * re + im * im).sqrt()
            })
            .collect();
        for c in 0..N_MELS {
            let e: f64 = fb[c].iter().zip(&mag).map(|(a, b)| a * b).sum();
            let want = e.max(MAG_FLOOR).log10();
            assert!((mel.frames[(frame, c)] as f64 - want).abs() < 1e-4, "channel {c}");
        }
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-4, 5), 4);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(-9, 5), 1);
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mel = MelSpectrogram::new(Matrix::randn(13, 80, 2.0, &mut rng)).unwrap();
        let p = dir.path().join("a.mel1");
        save_mel(&mel, &p).unwrap();
        let back = load_mel(&p).unwrap();
        assert!(mel.frames.as_slice().iter().zip(back.frames.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()));

        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_mel(&p), Err(Error::MelFormat(_))));
        let mut bad = bytes.clone();
        bad[8..12].copy_from_slice(&81u32.to_le_bytes());
        assert!(matches!(MelSpectrogram::from_bytes(&bad), Err(Error::MelFormat(_))));
    }

    #[test]
    fn padding_replicates_edges() {
        let m = MelSpectrogram::new(Matrix::from_fn(5, 80, |r, c| (r * 80 + c) as f32)).unwrap();
        let p = m.pad_to_multiple(4);
        assert_eq!(p.n_frames(), 8);
        assert_eq!(p.frames.row(7), m.frames.row(4));
        assert_eq!(m.pad_to_multiple(5), m);
    }

    #[test]
    fn stats_normalize_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = Matrix::<f32>::randn(30, 80, 3.0, &mut rng);
        let s = MelStats::from_mels([&m]);
        let z: Matrix<f64> = s.normalize(&m);
        for c in 0..80 {
            let col: f64 = (0..30).map(|r| z[(r, c)]).sum::<f64>() / 30.0;
            assert!(col.abs() < 1e-6);
        }
        assert!(s.denormalize(&z).max_abs_diff(&m) < 1e-4);
    }

    #[test]
    fn extraction_is_deterministic() {
        let x: Vec<f32> = (0..3000).map(|i| (i as f32 * 0.01).sin()).collect();
        assert_eq!(extract_mel(&x, SAMPLE_RATE).unwrap(), extract_mel(&x, SAMPLE_RATE).unwrap());
    }
}
