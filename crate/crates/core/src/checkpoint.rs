//! Versioned binary checkpoints.
//!
//! Layout (little endian): magic, version `u32`, then length-prefixed
//! sections (config echo as JSON, trainer state as JSON, parameters, optimizer
//! moments) and a trailing CRC-32 of everything before it.

use std::fs;
use std::path::Path;

use irstd_nn::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

pub const MAGIC: &[u8; 8] = b"IRSTDCKP";
pub const VERSION: u32 = 1;

/// Position of a ChaCha generator: enough to continue its stream exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &rand_chacha::ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> rand_chacha::ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything besides tensors that a resumed run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub step: u64,
    pub rng: RngState,
    pub opt_step: u64,
    /// `(step, iou)` of the best periodic evaluation so far.
    pub best: Option<(u64, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    model: ModelConfig,
    state: TrainerState,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub state: TrainerState,
    pub params: ParamStore<f32>,
    /// AdamW first and second moments, one per parameter; empty for
    /// inference-only checkpoints.
    pub moments: Vec<(Tensor<f32>, Tensor<f32>)>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn tensor(&mut self, t: &Tensor<f32>) {
        self.u32(t.rank() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} overflows")))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }
    fn tensor(&mut self) -> Result<Tensor<f32>> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("tensor rank {rank} is implausible")));
        }
        let shape = (0..rank).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint("tensor size overflows".into()))?;
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor size overflows".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Tensor::from_vec(shape, data))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        let header = Header {
            config: self.config.clone(),
            model: self.model.clone(),
            state: self.state.clone(),
        };
        w.bytes(&serde_json::to_vec(&header)?);
        w.u64(self.params.len() as u64);
        for (_, name, t) in self.params.iter() {
            w.bytes(name.as_bytes());
            w.tensor(t);
        }
        w.u64(self.moments.len() as u64);
        for (m, v) in &self.moments {
            w.tensor(m);
            w.tensor(v);
        }
        let crc = crc32fast::hash(&w.0);
        w.u32(crc);
        Ok(w.0)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < MAGIC.len() + 8 || &buf[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let mut r = Reader {
            buf,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: VERSION,
            });
        }
        let (body, tail) = buf.split_at(buf.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Checkpoint("checksum mismatch (corrupt file)".into()));
        }
        let mut r = Reader { buf: body, pos: r.pos };
        let header: Header = serde_json::from_slice(r.bytes()?)?;
        let n = r.len()?;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let name = String::from_utf8(r.bytes()?.to_vec())
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            params.push(name, r.tensor()?);
        }
        let n = r.len()?;
        if n != 0 && n != params.len() {
            return Err(Error::Checkpoint(format!(
                "{n} optimizer moments for {} parameters",
                params.len()
            )));
        }
        let moments = (0..n)
            .map(|_| Ok((r.tensor()?, r.tensor()?)))
            .collect::<Result<Vec<_>>>()?;
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self {
            config: header.config,
            model: header.model,
            state: header.state,
            params,
            moments,
        })
    }

    /// Writes through a temporary file so a crash never leaves half a
    /// checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&buf)
    }

    /// Copies the stored parameters into `target`, checking names and shapes.
    pub fn copy_params_into(&self, target: &mut ParamStore<f32>) -> Result<()> {
        if target.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                target.len()
            )));
        }
        let ids: Vec<_> = target.ids().collect();
        for ((_, name, t), id) in self.params.iter().zip(ids) {
            if target.name(id) != name || target.get(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` {:?} does not match model `{}` {:?}",
                    t.shape(),
                    target.name(id),
                    target.get(id).shape()
                )));
            }
            *target.get_mut(id) = t.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use rand::{RngCore, SeedableRng};

    use super::*;
    use crate::model::IrstdDiff;

    fn sample() -> Checkpoint {
        let config = TrainConfig::default();
        let model = ModelConfig::scaled(64, 8).unwrap();
        let net = IrstdDiff::new(model.clone(), 3).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        rng.next_u64();
        let moments = net
            .params
            .iter()
            .map(|(_, _, t)| (t.scale(0.5), t.map(|v| v * v)))
            .collect();
        Checkpoint {
            config,
            model,
            state: TrainerState {
                step: 12,
                rng: RngState::capture(&rng),
                opt_step: 12,
                best: Some((10, 0.25)),
            },
            params: net.params,
            moments,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.state, ck.state);
        assert_eq!(back.config, ck.config);
        assert_eq!(back.model, ck.model);
        for ((_, na, a), (_, nb, b)) in ck.params.iter().zip(back.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(a, b);
        }
        assert_eq!(back.moments.len(), ck.moments.len());
        assert!(back.moments.iter().zip(&ck.moments).all(|(x, y)| x == y));
        let mut a = ck.state.rng.restore();
        let mut b = back.state.rng.restore();
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn version_and_corruption_errors() {
        let bytes = sample().to_bytes().unwrap();
        let mut wrong = bytes.clone();
        wrong[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&wrong),
            Err(Error::CheckpointVersion { found: 7, expected: VERSION })
        ));
        let mut flipped = bytes.clone();
        let k = flipped.len() / 2;
        flipped[k] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Checkpoint(_))));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 9]).is_err());
        assert!(Checkpoint::from_bytes(b"nonsense").is_err());
    }

    #[test]
    fn params_copy_checks_layout() {
        let ck = sample();
        let mut net = IrstdDiff::new(ck.model.clone(), 99).unwrap();
        ck.copy_params_into(&mut net.params).unwrap();
        let other = IrstdDiff::new(ModelConfig::scaled(64, 4).unwrap(), 0).unwrap();
        let mut p = other.params.clone();
        assert!(ck.copy_params_into(&mut p).is_err());
    }
}
