use std::fmt;

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::stft::{StftConfig, Window};
use crate::tensor::ConvGeometry;

/// How the estimated mask is applied to the noisy spectrogram.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Real and imaginary planes masked independently.
    R,
    /// Complex product.
    C,
    /// Polar form with a tanh-bounded magnitude.
    E,
    /// As `E`, with a complex LSTM and complex dense layer.
    CL,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::R, Variant::C, Variant::E, Variant::CL];

    pub fn name(self) -> &'static str {
        match self {
            Variant::R => "R",
            Variant::C => "C",
            Variant::E => "E",
            Variant::CL => "CL",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "R" => Ok(Variant::R),
            "C" => Ok(Variant::C),
            "E" => Ok(Variant::E),
            "CL" => Ok(Variant::CL),
            _ => Err(Error::Config(format!("unknown variant `{s}` (expected R, C, E or CL)"))),
        }
    }

    pub fn complex_lstm(self) -> bool {
        self == Variant::CL
    }

    pub fn polar_mask(self) -> bool {
        matches!(self, Variant::E | Variant::CL)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Architecture description. Channel counts count both planes, so 32
/// channels are 16 complex channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub encoder_channels: Vec<usize>,
    /// `(frequency, time)` kernel size.
    pub kernel: (usize, usize),
    /// `(frequency, time)` stride; time stride must be 1.
    pub stride: (usize, usize),
    pub lstm_layers: usize,
    /// Real units per layer, or units per plane for the complex LSTM.
    pub lstm_units: usize,
    /// Output width of the dense layer after the LSTM (both planes).
    pub dense_units: usize,
    pub lookahead_frames: usize,
    pub stft: StftConfig,
}

/// Upper bound on algorithmic look-ahead.
pub const MAX_LOOKAHEAD_MS: f64 = 40.0;

impl ModelConfig {
    pub fn default_for(variant: Variant) -> Self {
        let (encoder_channels, lstm_units) = match variant {
            Variant::CL => (vec![32, 64, 128, 256, 256, 256], 128),
            _ => (vec![32, 64, 128, 128, 256, 256], 256),
        };
        Self {
            variant,
            encoder_channels,
            kernel: (5, 2),
            stride: (2, 1),
            lstm_layers: 2,
            lstm_units,
            dense_units: 1024,
            lookahead_frames: 6,
            stft: StftConfig::default(),
        }
    }

    /// Two-layer model for quick experiments and tests.
    pub fn tiny(variant: Variant) -> Self {
        Self {
            encoder_channels: vec![16, 32],
            lstm_units: if variant.complex_lstm() { 32 } else { 64 },
            lstm_layers: 2,
            dense_units: 2048,
            lookahead_frames: 2,
            ..Self::default_for(variant)
        }
    }

    pub fn depth(&self) -> usize {
        self.encoder_channels.len()
    }

    /// Complex channel counts of the encoder outputs.
    pub fn complex_channels(&self) -> Vec<usize> {
        self.encoder_channels.iter().map(|c| c / 2).collect()
    }

    /// Time context of one kernel, `kT − 1`.
    pub fn time_context(&self) -> usize {
        self.kernel.1 - 1
    }

    /// Number of leading decoder layers that look one kernel context ahead.
    pub fn lookahead_layers(&self) -> usize {
        match self.time_context() {
            0 => 0,
            p => self.lookahead_frames / p,
        }
    }

    pub fn lookahead_ms(&self) -> f64 {
        self.lookahead_frames as f64 * self.stft.hop_ms()
    }

    /// Frequency size at each encoder input plus the bottleneck,
    /// DC bin excluded: `[F', ..., F_bottleneck]`.
    pub fn freq_sizes(&self) -> Result<Vec<usize>> {
        let mut f = self.stft.fft_len / 2;
        let mut out = vec![f];
        for _ in 0..self.depth() {
            f = self.encoder_geometry().out_f(f)?;
            out.push(f);
        }
        Ok(out)
    }

    pub fn encoder_geometry(&self) -> ConvGeometry {
        ConvGeometry {
            kernel_f: self.kernel.0,
            kernel_t: self.kernel.1,
            stride_f: self.stride.0,
            pad_f: (self.kernel.0 - 1) / 2,
            pad_t: (self.time_context(), 0),
        }
    }

    /// Geometry of decoder layer `j` (0 = first after the recurrent core).
    pub fn decoder_geometry(&self, j: usize) -> ConvGeometry {
        let p = self.time_context();
        let pad_t = if j < self.lookahead_layers() { (p, 0) } else { (0, p) };
        ConvGeometry {
            pad_t,
            ..self.encoder_geometry()
        }
    }

    /// Width of the recurrent core's input/output per time step, both planes.
    pub fn bottleneck_width(&self) -> Result<usize> {
        let f = *self.freq_sizes()?.last().expect("non-empty");
        Ok(self.encoder_channels.last().copied().unwrap_or(0) * f)
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.encoder_channels.is_empty() {
            return bad("model.encoder_channels must not be empty".into());
        }
        if let Some(c) = self.encoder_channels.iter().find(|&&c| c < 2 || c % 2 != 0) {
            return bad(format!("model.encoder_channels entries must be even and >= 2 (re/im pairs), got {c}"));
        }
        if self.kernel.0 % 2 == 0 || self.kernel.1 == 0 {
            return bad(format!("model.kernel needs an odd frequency size and time size >= 1, got {:?}", self.kernel));
        }
        if self.stride.1 != 1 || self.stride.0 == 0 {
            return bad(format!("model.stride must be (s, 1) with s >= 1, got {:?}", self.stride));
        }
        if self.lstm_layers == 0 || self.lstm_units == 0 {
            return bad("model.lstm_layers and model.lstm_units must be positive".into());
        }
        let sizes = self.freq_sizes()?;
        if sizes.contains(&0) {
            return bad(format!("frequency axis collapses to zero: {sizes:?}"));
        }
        let width = self.bottleneck_width()?;
        if self.dense_units != width {
            return bad(format!(
                "model.dense_units must equal the bottleneck width {width} (channels x frequency), got {}",
                self.dense_units
            ));
        }
        let p = self.time_context();
        let max = p * self.depth();
        if (p == 0 && self.lookahead_frames != 0) || (p > 0 && self.lookahead_frames % p != 0) || self.lookahead_frames > max {
            return bad(format!(
                "model.lookahead_frames must be a multiple of {p} and at most {max}, got {}",
                self.lookahead_frames
            ));
        }
        if self.lookahead_ms() > MAX_LOOKAHEAD_MS + 1e-9 {
            return bad(format!(
                "look-ahead of {} frames is {:.2} ms, above the {MAX_LOOKAHEAD_MS} ms limit",
                self.lookahead_frames,
                self.lookahead_ms()
            ));
        }
        Ok(())
    }

    /// Reads `model.*` and `stft.*` keys, starting from the defaults of
    /// the configured variant.
    pub fn from_kv(kv: &mut KvMap) -> Result<Self> {
        let variant = Variant::parse(&kv.take("model.variant").unwrap_or_else(|| "E".into()))?;
        let mut c = if kv.take_parsed::<bool>("model.tiny")?.unwrap_or(false) {
            Self::tiny(variant)
        } else {
            Self::default_for(variant)
        };
        if let Some(v) = kv.take_list("model.encoder_channels")? {
            c.encoder_channels = v;
        }
        let pair = |v: Vec<usize>, key: &str| -> Result<(usize, usize)> {
            match v.as_slice() {
                [a, b] => Ok((*a, *b)),
                _ => Err(Error::Config(format!("{key} needs two values, got {v:?}"))),
            }
        };
        if let Some(v) = kv.take_list("model.kernel")? {
            c.kernel = pair(v, "model.kernel")?;
        }
        if let Some(v) = kv.take_list("model.stride")? {
            c.stride = pair(v, "model.stride")?;
        }
        if let Some(v) = kv.take_parsed("model.lstm_layers")? {
            c.lstm_layers = v;
        }
        if let Some(v) = kv.take_parsed("model.lstm_units")? {
            c.lstm_units = v;
        }
        if let Some(v) = kv.take_parsed("model.dense_units")? {
            c.dense_units = v;
        }
        if let Some(v) = kv.take_parsed("model.lookahead_frames")? {
            c.lookahead_frames = v;
        }
        if let Some(v) = kv.take_parsed("stft.sample_rate")? {
            c.stft.sample_rate = v;
        }
        if let Some(v) = kv.take_parsed("stft.win_len")? {
            c.stft.win_len = v;
        }
        if let Some(v) = kv.take_parsed("stft.hop")? {
            c.stft.hop = v;
        }
        if let Some(v) = kv.take_parsed("stft.fft_len")? {
            c.stft.fft_len = v;
        }
        if let Some(v) = kv.take("stft.window") {
            c.stft.window = Window::parse(&v)?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Every key, in a fixed order, as written to checkpoint headers.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        vec![
            ("model.variant".into(), self.variant.to_string()),
            ("model.encoder_channels".into(), list(&self.encoder_channels)),
            ("model.kernel".into(), list(&[self.kernel.0, self.kernel.1])),
            ("model.stride".into(), list(&[self.stride.0, self.stride.1])),
            ("model.lstm_layers".into(), self.lstm_layers.to_string()),
            ("model.lstm_units".into(), self.lstm_units.to_string()),
            ("model.dense_units".into(), self.dense_units.to_string()),
            ("model.lookahead_frames".into(), self.lookahead_frames.to_string()),
            ("stft.sample_rate".into(), self.stft.sample_rate.to_string()),
            ("stft.win_len".into(), self.stft.win_len.to_string()),
            ("stft.hop".into(), self.stft.hop.to_string()),
            ("stft.fft_len".into(), self.stft.fft_len.to_string()),
            ("stft.window".into(), self.stft.window.name().to_string()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        for v in Variant::ALL {
            ModelConfig::default_for(v).validate().unwrap();
            ModelConfig::tiny(v).validate().unwrap();
        }
    }

    #[test]
    fn default_frequency_sizes_halve_to_four() {
        let c = ModelConfig::default_for(Variant::E);
        assert_eq!(c.freq_sizes().unwrap(), vec![256, 128, 64, 32, 16, 8, 4]);
        assert_eq!(c.bottleneck_width().unwrap() / 2, 512);
        assert_eq!(c.lookahead_layers(), 6);
        assert!((c.lookahead_ms() - 37.5).abs() < 1e-12);
    }

    #[test]
    fn lookahead_rules() {
        let mut c = ModelConfig::default_for(Variant::E);
        c.lookahead_frames = 7;
        assert!(c.validate().is_err());
        c.lookahead_frames = 0;
        c.validate().unwrap();
        let mut t = ModelConfig::tiny(Variant::E);
        t.lookahead_frames = 3;
        assert!(t.validate().is_err());
        // 7 frames of 6.25 ms would pass the depth rule but not the 40 ms rule.
        let mut d = ModelConfig::default_for(Variant::E);
        d.encoder_channels.push(256);
        d.dense_units = 256 * 2;
        d.lookahead_frames = 7;
        assert!(d.validate().unwrap_err().to_string().contains("40"));
    }

    #[test]
    fn inconsistent_dense_width_is_rejected() {
        let mut c = ModelConfig::default_for(Variant::R);
        c.dense_units = 1000;
        assert!(c.validate().is_err());
        c = ModelConfig::default_for(Variant::R);
        c.encoder_channels[2] = 31;
        assert!(c.validate().is_err());
    }

    #[test]
    fn kv_round_trip() {
        let c = ModelConfig::tiny(Variant::CL);
        let mut kv = KvMap::default();
        for (k, v) in c.to_kv() {
            kv.insert(k, v);
        }
        assert_eq!(ModelConfig::from_kv(&mut kv).unwrap(), c);
        kv.finish().unwrap();
    }
}
