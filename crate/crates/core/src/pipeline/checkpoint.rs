use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_xoshiro::Xoshiro256PlusPlus;

use super::train::TrainState;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::tensor::{AdamState, ParameterStore};

const META_MAGIC: &[u8; 4] = b"SPMD";

/// Parameters plus the metadata needed to resume or reproduce a run.
///
/// On disk: the `SPWT` parameter block, then `SPMD`, the config hash (u64),
/// the epoch (u32), the PRNG state (4×u64) and the config text (u32 length
/// followed by UTF-8), all little-endian.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ParameterStore,
    pub config: Config,
    pub epoch: u32,
    pub rng_state: [u64; 4],
}

fn rng_words(rng: &Xoshiro256PlusPlus) -> [u64; 4] {
    let value = serde_json::to_value(rng).expect("generator state serializes");
    serde_json::from_value(value["s"].clone()).expect("generator state is four words")
}

fn rng_from_words(words: [u64; 4]) -> Result<Xoshiro256PlusPlus> {
    serde_json::from_value(serde_json::json!({ "s": words }))
        .map_err(|e| Error::Format(format!("invalid generator state: {e}")))
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, cfg: &Config) -> Self {
        Self {
            params: state.params.clone(),
            config: cfg.clone(),
            epoch: state.epoch,
            rng_state: rng_words(&state.rng),
        }
    }

    /// Training state to continue from. Optimizer moments are not stored,
    /// so they restart from zero.
    pub fn to_state(&self) -> Result<TrainState> {
        Ok(TrainState {
            params: self.params.clone(),
            adam: AdamState::new(self.config.lr, self.config.weight_decay),
            rng: rng_from_words(self.rng_state)?,
            epoch: self.epoch,
        })
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        self.params.write_to(w)?;
        w.write_all(META_MAGIC)?;
        w.write_all(&self.config.hash().to_le_bytes())?;
        w.write_all(&self.epoch.to_le_bytes())?;
        for word in self.rng_state {
            w.write_all(&word.to_le_bytes())?;
        }
        let text = self.config.to_text();
        let len = u32::try_from(text.len()).map_err(|_| Error::Format("config text too long".into()))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(text.as_bytes())?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let params = ParameterStore::read_from(r)?;
        let mut magic = [0u8; 4];
        read(r, &mut magic)?;
        if &magic != META_MAGIC {
            return Err(Error::Format("checkpoint metadata block missing".into()));
        }
        let mut b8 = [0u8; 8];
        let mut b4 = [0u8; 4];
        read(r, &mut b8)?;
        let hash = u64::from_le_bytes(b8);
        read(r, &mut b4)?;
        let epoch = u32::from_le_bytes(b4);
        let mut rng_state = [0u64; 4];
        for word in &mut rng_state {
            read(r, &mut b8)?;
            *word = u64::from_le_bytes(b8);
        }
        read(r, &mut b4)?;
        let mut text = vec![0u8; u32::from_le_bytes(b4) as usize];
        read(r, &mut text)?;
        let text = String::from_utf8(text).map_err(|_| Error::Format("checkpoint config is not UTF-8".into()))?;
        let config = Config::parse(&text)?;
        if config.hash() != hash {
            return Err(Error::Format(format!(
                "checkpoint config hash {hash:016x} does not match its config text ({:016x})",
                config.hash()
            )));
        }
        Ok(Self {
            params,
            config,
            epoch,
            rng_state,
        })
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut bytes)
    }
}

fn read(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated checkpoint".into()),
        _ => Error::Io(e),
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    ckpt.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::read_from(&mut BufReader::new(File::open(path)?))
}
