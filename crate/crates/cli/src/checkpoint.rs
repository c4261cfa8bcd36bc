//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "VOXSEGCK"
//! version      u32
//! header_len   u64
//! header       JSON (config echo, epoch, schedule, weights, RNG, history)
//! tensor_count u32
//! per tensor   name_len u32, name, rank u32, extents u64 x rank, f32 payload
//! checksum     u64      FNV-1a over every preceding byte
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use voxseg::hash::Fnv64;
use voxseg::{AdamConfig, AdamState, AdaptiveWeights, LossReport, LrSchedule, ParamStore, Tensor};

use crate::config::ExperimentConfig;
use crate::error::CliError;

pub const MAGIC: &[u8; 8] = b"VOXSEGCK";
pub const VERSION: u32 = 1;
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

/// Position of a ChaCha8 stream; restores the generator exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng, String> {
        if self.seed.len() != 64 {
            return Err(format!("rng seed has {} hex digits, expected 64", self.seed.len()));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|e| format!("rng seed: {e}"))?;
        }
        let pos: u128 = self.word_pos.parse().map_err(|e| format!("rng word_pos: {e}"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ExperimentConfig,
    /// Last completed epoch.
    pub epoch: usize,
    pub lr_schedule: LrSchedule,
    /// Fusion weights for the next epoch.
    pub next_weights: AdaptiveWeights,
    pub last_report: LossReport,
    pub adam_config: AdamConfig,
    pub adam_step: u64,
    pub rng: RngState,
    pub best_val_dsc: Option<f64>,
    /// Metrics CSV rows written so far, without the header line.
    pub history: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore<f32>,
    pub adam: AdamState<f32>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.rank() as u32);
    for &e in t.shape() {
        put_u64(out, e as u64);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        put_u64(&mut out, header.len() as u64);
        out.extend_from_slice(&header);
        put_u32(&mut out, 3 * self.params.len() as u32);
        for (name, t) in self.params.iter() {
            put_tensor(&mut out, name, t);
        }
        for (prefix, moments) in [(ADAM_M, &self.adam.m), (ADAM_V, &self.adam.v)] {
            for (name, t) in self.params.names().iter().zip(moments) {
                put_tensor(&mut out, &format!("{prefix}{name}"), t);
            }
        }
        let sum = Fnv64::digest(&out);
        put_u64(&mut out, sum);
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self, CliError> {
        let fail = |reason: String| CliError::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 8 + 4 + 8 + 4 + 8 {
            return Err(fail(format!("file is truncated ({} bytes)", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(fail("not a voxseg checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(fail(format!("format version {version}, this build reads {VERSION}")));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        if Fnv64::digest(body) != stored {
            return Err(fail("checksum mismatch; the file is truncated or corrupted".into()));
        }

        let mut r = Cursor { bytes: body, pos: 12 };
        let header_len = r.u64().ok_or_else(|| fail("truncated header length".into()))? as usize;
        let header_bytes = r.take(header_len).ok_or_else(|| fail("truncated header".into()))?;
        let header: CheckpointHeader =
            serde_json::from_slice(header_bytes).map_err(|e| fail(format!("malformed header: {e}")))?;
        let count = r.u32().ok_or_else(|| fail("truncated tensor count".into()))? as usize;
        let mut tensors = Vec::with_capacity(count);
        for i in 0..count {
            tensors.push(r.tensor().ok_or_else(|| fail(format!("tensor record {i} is malformed")))?);
        }
        if r.pos != body.len() {
            return Err(fail(format!("{} trailing bytes after tensor records", body.len() - r.pos)));
        }
        if !count.is_multiple_of(3) {
            return Err(fail(format!("{count} tensors cannot split into parameters and two moments")));
        }
        let n = count / 3;
        let mut params = ParamStore::new();
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        let mut it = tensors.into_iter();
        let names: Vec<String> = (0..n)
            .map(|_| {
                let (name, t) = it.next().unwrap();
                params.push(name.clone(), t);
                name
            })
            .collect();
        for (prefix, dst) in [(ADAM_M, &mut m), (ADAM_V, &mut v)] {
            for (i, name) in names.iter().enumerate() {
                let (got, t) = it.next().unwrap();
                if got != format!("{prefix}{name}") || t.shape() != params.get(i).shape() {
                    return Err(fail(format!("tensor `{got}` does not match parameter `{name}`")));
                }
                dst.push(t);
            }
        }
        let adam = AdamState {
            config: header.adam_config,
            step: header.adam_step,
            m,
            v,
        };
        header.rng.restore().map_err(fail)?;
        Ok(Self { header, params, adam })
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        // Write then rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.encode()).map_err(|e| CliError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    fn tensor(&mut self) -> Option<(String, Tensor<f32>)> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec()).ok()?;
        let rank = self.u32()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| self.u64().map(|e| e as usize)).collect::<Option<_>>()?;
        let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e))?;
        let raw = self.take(n.checked_mul(4)?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Some((name, Tensor::new(shape, data).ok()?))
    }
}
