//! Checkpoint container: a text header followed by raw tensors.
//!
//! ```text
//! DCCRN-CHECKPOINT
//! format_version = 1
//! model.variant = E
//! ...
//! mask.activation = tanh
//! bn.ready = true
//! tensor encoder.0.conv.weight 2,16,1,5,2
//! ...
//! end
//! <little-endian f32 data of every tensor, in header order>
//! ```
//!
//! Norm running statistics are stored as `<norm>.running_mean` `[2, C]` and
//! `<norm>.running_cov` `[3, C]` after the trainable tensors.

use std::path::Path;

use ndarray::{Array2, ArrayD, IxDyn};

use super::dccrn::Dccrn;
use super::mask::MaskActivation;
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::tensor::Scalar;

pub const MAGIC: &str = "DCCRN-CHECKPOINT";
pub const FORMAT_VERSION: u32 = 1;
const END: &str = "end";

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn dims(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
}

impl<T: Scalar> Dccrn<T> {
    /// Every stored tensor in file order, as `(name, shape, values)`.
    fn tensors(&self) -> Vec<(String, Vec<usize>, Vec<T>)> {
        let mut out: Vec<_> = self
            .params()
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.shape().to_vec(), p.value.iter().copied().collect()))
            .collect();
        for (name, s) in self.bn_names().into_iter().zip(self.bn_stats()) {
            out.push((format!("{name}.running_mean"), s.mean.shape().to_vec(), s.mean.iter().copied().collect()));
            out.push((format!("{name}.running_cov"), s.cov.shape().to_vec(), s.cov.iter().copied().collect()));
        }
        out
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let tensors = self.tensors();
        let mut head = format!("{MAGIC}\nformat_version = {FORMAT_VERSION}\n");
        for (k, v) in self.config().to_kv() {
            head += &format!("{k} = {v}\n");
        }
        let act = match self.activation() {
            MaskActivation::Tanh => "tanh",
            MaskActivation::Identity => "identity",
        };
        head += &format!("mask.activation = {act}\n");
        head += &format!("bn.ready = {}\n", self.bn_stats().iter().all(|s| s.ready));
        for (name, shape, _) in &tensors {
            head += &format!("tensor {name} {}\n", dims(shape));
        }
        head += END;
        head.push('\n');
        let mut bytes = head.into_bytes();
        for (_, _, values) in &tensors {
            for v in values {
                bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        bytes
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut lines = Vec::new();
        let mut pos = 0;
        loop {
            let nl = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("header is not terminated by `end`"))?;
            let line = std::str::from_utf8(&bytes[pos..pos + nl]).map_err(|_| bad("header is not UTF-8"))?;
            pos += nl + 1;
            if line == END {
                break;
            }
            lines.push(line);
            if lines.len() == 1 && line != MAGIC {
                return Err(bad(format!("not a checkpoint (expected `{MAGIC}`)")));
            }
        }
        if lines.is_empty() {
            return Err(bad(format!("not a checkpoint (expected `{MAGIC}`)")));
        }
        let (kv_lines, tensor_lines): (Vec<&str>, Vec<&str>) =
            lines[1..].iter().partition(|l| !l.starts_with("tensor "));
        let mut kv = KvMap::parse(&kv_lines.join("\n"))?;
        let version = kv.take("format_version").ok_or_else(|| bad("missing format_version"))?;
        if version.parse::<u32>().ok() != Some(FORMAT_VERSION) {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let activation = match kv.take("mask.activation").as_deref() {
            Some("tanh") | None => MaskActivation::Tanh,
            Some("identity") => MaskActivation::Identity,
            Some(other) => return Err(bad(format!("unknown mask.activation `{other}`"))),
        };
        let ready = kv.take_parsed::<bool>("bn.ready")?.unwrap_or(false);
        let config = ModelConfig::from_kv(&mut kv)?;
        kv.finish()?;

        let mut model = Dccrn::<T>::build(&config, 0)?;
        model.set_activation(activation);
        let expected = model.tensors();
        if tensor_lines.len() != expected.len() {
            return Err(bad(format!(
                "{} tensors listed, the configuration needs {}",
                tensor_lines.len(),
                expected.len()
            )));
        }
        let mut data = &bytes[pos..];
        let mut values = Vec::with_capacity(expected.len());
        for (line, (name, shape, _)) in tensor_lines.iter().zip(&expected) {
            let want = format!("tensor {name} {}", dims(shape));
            if *line != want {
                return Err(bad(format!("expected `{want}`, found `{line}`")));
            }
            let n: usize = shape.iter().product();
            if data.len() < 4 * n {
                return Err(bad(format!("data truncated in {name}")));
            }
            let (chunk, rest) = data.split_at(4 * n);
            data = rest;
            let v: Vec<T> = chunk
                .chunks_exact(4)
                .map(|b| T::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
                .collect();
            values.push(ArrayD::from_shape_vec(IxDyn(shape), v).expect("sized above"));
        }
        if !data.is_empty() {
            return Err(bad(format!("{} trailing bytes after the last tensor", data.len())));
        }
        let mut it = values.into_iter();
        let ids: Vec<_> = model.params().ids().collect();
        for id in ids {
            model.params_mut().set(id, it.next().expect("counted"))?;
        }
        let stats: Vec<ArrayD<T>> = it.collect();
        for (s, pair) in model.bn_stats_mut().iter_mut().zip(stats.chunks_exact(2)) {
            let two = |a: &ArrayD<T>| -> Array2<T> { a.clone().into_dimensionality().expect("2-D stats") };
            s.mean = two(&pair[0]);
            s.cov = two(&pair[1]);
            s.ready = ready;
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}
