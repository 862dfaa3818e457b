//! Per-frame processing time of the streaming path.

use std::fmt;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::synth;
use crate::error::{Error, Result};
use crate::model::Dccrn;

/// Frames processed before timing starts.
const WARMUP: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyReport {
    pub frames: usize,
    pub mean_ms: f64,
    pub p95_ms: f64,
    pub hop_ms: f64,
    pub lookahead_frames: usize,
    pub lookahead_ms: f64,
}

impl LatencyReport {
    /// Mean frame time over the hop.
    pub fn rtf(&self) -> f64 {
        self.mean_ms / self.hop_ms
    }
}

impl fmt::Display for LatencyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "frames            {}", self.frames)?;
        writeln!(f, "mean per frame    {:.3} ms", self.mean_ms)?;
        writeln!(f, "p95 per frame     {:.3} ms", self.p95_ms)?;
        writeln!(f, "hop               {:.3} ms", self.hop_ms)?;
        writeln!(f, "real-time factor  {:.3}", self.rtf())?;
        write!(f, "look-ahead        {:.2} ms ({} frames)", self.lookahead_ms, self.lookahead_frames)
    }
}

/// Streams `seconds` of synthetic noisy speech through `model` one hop at
/// a time and times each hop.
pub fn measure(model: &Dccrn<f32>, seconds: f64) -> Result<LatencyReport> {
    let cfg = model.config();
    let hop = cfg.stft.hop;
    let frames = (seconds * cfg.stft.sample_rate as f64 / hop as f64).round() as usize;
    if frames == 0 {
        return Err(Error::InvalidArgument(format!("{seconds} s is shorter than one hop")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let len = (frames + WARMUP) * hop;
    let speech = synth::speech(&mut rng, len, cfg.stft.sample_rate, 0.1);
    let noise = synth::noise(&mut rng, synth::NoiseKind::White, len, cfg.stft.sample_rate, 0.05);
    let x: Vec<f32> = speech.iter().zip(&noise).map(|(s, n)| s + n).collect();
    let mut stream = model.wave_stream()?;
    let mut times = Vec::with_capacity(frames);
    for (i, chunk) in x.chunks_exact(hop).enumerate() {
        let t = Instant::now();
        std::hint::black_box(stream.push_frame(model, chunk)?);
        if i >= WARMUP {
            times.push(t.elapsed().as_secs_f64() * 1e3);
        }
    }
    let mean_ms = times.iter().sum::<f64>() / times.len() as f64;
    times.sort_by(f64::total_cmp);
    let p95_ms = times[((times.len() as f64 * 0.95).ceil() as usize).clamp(1, times.len()) - 1];
    Ok(LatencyReport {
        frames: times.len(),
        mean_ms,
        p95_ms,
        hop_ms: cfg.stft.hop_ms(),
        lookahead_frames: cfg.lookahead_frames,
        lookahead_ms: cfg.lookahead_ms(),
    })
}
