//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "ANMTCKPT" | u32 version
//! model config     | u64 src_vocab, tgt_vocab, embed, hidden, layers, max_decode_len | u8 attention
//! train config     | u64 epochs, batch_size | f64 lr, clip_norm | u64 seed, checkpoint_every
//!                  | u8 optimizer | u8 has_max_steps | u64 max_steps
//! train state      | u64 step, epoch, batch_in_epoch | f64 epoch_loss | u64 epoch_tokens | f64 best_ppl
//! f64 val_split | [u8; 32] source vocab hash | [u8; 32] target vocab hash
//! u32 tensor count, then per tensor:
//!     u32 name length | name (UTF-8) | u32 rank | u64 dims[rank] | f64 values
//! [u8; 32] SHA-256 of every preceding byte
//! ```
//!
//! Tensors are the model parameters in canonical order, followed by the Adam
//! moments as `adam.m.<name>` and `adam.v.<name>` when present.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::attention::AttentionMode;
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::math::{ParamSet, Tensor};
use crate::model::{ModelConfig, ModelParams, TranslationModel};
use crate::train::{Optimizer, TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"ANMTCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: TranslationModel,
    pub train_config: TrainConfig,
    pub state: TrainState,
    /// Fraction of the shuffled corpus held out for validation.
    pub val_split: f64,
    pub src_vocab_hash: [u8; 32],
    pub tgt_vocab_hash: [u8; 32],
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn tensor(&mut self, name: &str, t: &Tensor) {
        self.u32(name.len() as u32);
        self.0.extend_from_slice(name.as_bytes());
        self.u32(t.rank() as u32);
        for &d in t.shape() {
            self.usize(d);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corruption(format!(
                "unexpected end of data at byte {}",
                self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Schema("integer field does not fit this platform".into()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn hash(&mut self) -> Result<[u8; 32]> {
        Ok(self.take(32)?.try_into().unwrap())
    }
    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| Error::Corruption("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(self.usize()?);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= self.buf.len() - self.pos))
            .ok_or_else(|| Error::Corruption(format!("tensor {name} overruns the file")))?;
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(self.f64()?);
        }
        let t = Tensor::new(&shape, data).map_err(|e| Error::Schema(format!("tensor {name}: {e}")))?;
        Ok((name, t))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION);

        let c = &self.model.config;
        for v in [
            c.src_vocab_size,
            c.tgt_vocab_size,
            c.embed_dim,
            c.hidden,
            c.layers,
            c.max_decode_len,
        ] {
            w.usize(v);
        }
        w.u8(c.attention.code());

        let t = &self.train_config;
        w.usize(t.epochs);
        w.usize(t.batch_size);
        w.f64(t.learning_rate);
        w.f64(t.clip_norm);
        w.u64(t.seed);
        w.usize(t.checkpoint_every);
        w.u8(t.optimizer.code());
        w.u8(u8::from(t.max_steps.is_some()));
        w.u64(t.max_steps.unwrap_or(0));

        let s = &self.state;
        w.u64(s.step);
        w.usize(s.epoch);
        w.usize(s.batch_in_epoch);
        w.f64(s.epoch_loss);
        w.usize(s.epoch_tokens);
        w.f64(s.best_perplexity);

        w.f64(self.val_split);
        w.0.extend_from_slice(&self.src_vocab_hash);
        w.0.extend_from_slice(&self.tgt_vocab_hash);

        let params = self.model.params.params();
        let moments = if s.adam_m.is_empty() { 0 } else { 2 * params.len() };
        w.u32((params.len() + moments) as u32);
        for p in &params {
            w.tensor(&p.name, &p.value);
        }
        if moments > 0 {
            for (p, m) in params.iter().zip(&s.adam_m) {
                w.tensor(&format!("adam.m.{}", p.name), m);
            }
            for (p, v) in params.iter().zip(&s.adam_v) {
                w.tensor(&format!("adam.v.{}", p.name), v);
            }
        }
        let digest = Sha256::digest(&w.0);
        w.0.extend_from_slice(&digest);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Corruption("not a checkpoint (bad magic bytes)".into()));
        }
        if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN {
            return Err(Error::Corruption("checkpoint is truncated".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Corruption("checksum mismatch".into()));
        }

        let mut r = Reader { buf: body, pos: 12 };
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = r.usize()?;
        }
        let attention =
            AttentionMode::from_code(r.u8()?).ok_or_else(|| Error::Schema("unknown attention mode".into()))?;
        let config = ModelConfig {
            src_vocab_size: dims[0],
            tgt_vocab_size: dims[1],
            embed_dim: dims[2],
            hidden: dims[3],
            layers: dims[4],
            max_decode_len: dims[5],
            attention,
        };
        config.validate().map_err(|e| Error::Schema(e.to_string()))?;

        let epochs = r.usize()?;
        let batch_size = r.usize()?;
        let learning_rate = r.f64()?;
        let clip_norm = r.f64()?;
        let seed = r.u64()?;
        let checkpoint_every = r.usize()?;
        let optimizer = Optimizer::from_code(r.u8()?).ok_or_else(|| Error::Schema("unknown optimizer".into()))?;
        let has_max = r.u8()? != 0;
        let max = r.u64()?;
        let train_config = TrainConfig {
            epochs,
            batch_size,
            learning_rate,
            clip_norm,
            seed,
            checkpoint_every,
            optimizer,
            max_steps: has_max.then_some(max),
        };

        let mut state = TrainState {
            step: r.u64()?,
            epoch: r.usize()?,
            batch_in_epoch: r.usize()?,
            epoch_loss: r.f64()?,
            epoch_tokens: r.usize()?,
            best_perplexity: r.f64()?,
            adam_m: Vec::new(),
            adam_v: Vec::new(),
        };
        let val_split = r.f64()?;
        let src_vocab_hash = r.hash()?;
        let tgt_vocab_hash = r.hash()?;

        let shapes = config.param_shapes();
        let count = r.u32()? as usize;
        if count != shapes.len() && count != 3 * shapes.len() {
            return Err(Error::Schema(format!(
                "{count} tensors stored, config implies {} parameters",
                shapes.len()
            )));
        }
        let mut params = ModelParams::zeros(&config);
        let expect = |r: &mut Reader, name: &str, shape: &[usize]| -> Result<Tensor> {
            let (got, t) = r.tensor()?;
            if got != name || t.shape() != shape {
                return Err(Error::Schema(format!(
                    "tensor {got} {:?} where {name} {shape:?} was expected",
                    t.shape()
                )));
            }
            Ok(t)
        };
        for (p, (name, shape)) in params.params_mut().into_iter().zip(&shapes) {
            p.value = expect(&mut r, name, shape)?;
        }
        if count > shapes.len() {
            for (name, shape) in &shapes {
                state.adam_m.push(expect(&mut r, &format!("adam.m.{name}"), shape)?);
            }
            for (name, shape) in &shapes {
                state.adam_v.push(expect(&mut r, &format!("adam.v.{name}"), shape)?);
            }
        }
        if r.pos != body.len() {
            return Err(Error::Corruption(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Checkpoint {
            model: TranslationModel::from_params(config, params)?,
            train_config,
            state,
            val_split,
            src_vocab_hash,
            tgt_vocab_hash,
        })
    }

    /// Writes to a temporary sibling file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = Path::new(&tmp);
        let mut f = fs::File::create(tmp).map_err(|e| Error::io(tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(tmp, e))?;
        f.sync_all().map_err(|e| Error::io(tmp, e))?;
        drop(f);
        fs::rename(tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Fails unless `src` and `tgt` are the vocabularies the model was
    /// trained with.
    pub fn check_vocabularies(&self, src: &Vocabulary, tgt: &Vocabulary) -> Result<()> {
        if self.src_vocab_hash != src.content_hash() || self.tgt_vocab_hash != tgt.content_hash() {
            return Err(Error::Schema(
                "vocabulary files differ from the ones the model was trained with".into(),
            ));
        }
        Ok(())
    }
}
