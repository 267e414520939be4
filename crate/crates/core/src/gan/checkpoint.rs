use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Discriminator, GanConfig, Generator};
use crate::error::{Error, Result};
use crate::nn::{self, read_tensors, write_tensors};

pub const CHECKPOINT_FORMAT: &str = "emojigan-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to rebuild both networks and interpret their inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub arch: GanConfig,
    /// Conditioning words in class order.
    pub class_words: Vec<String>,
    /// Optimizer steps taken when the snapshot was made.
    pub step: u64,
}

/// A generator/discriminator pair with its header.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
}

impl Checkpoint {
    pub fn new(generator: Generator<f32>, discriminator: Discriminator<f32>, class_words: Vec<String>, step: u64) -> Result<Self> {
        if generator.config() != discriminator.config() {
            return Err(Error::invalid("generator and discriminator architectures differ"));
        }
        Ok(Self {
            header: CheckpointHeader {
                format: CHECKPOINT_FORMAT.to_owned(),
                version: CHECKPOINT_VERSION,
                arch: generator.config().clone(),
                class_words,
                step,
            },
            generator,
            discriminator,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = nn::state_dict(&self.generator);
        tensors.extend(nn::state_dict(&self.discriminator));
        write_tensors(&self.header, &tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, tensors): (CheckpointHeader, _) = read_tensors(bytes)?;
        if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported checkpoint {} v{}",
                header.format, header.version
            )));
        }
        let (gen, disc): (Vec<_>, Vec<_>) = tensors.into_iter().partition(|(n, _)| n.starts_with("gen."));
        let mut generator = Generator::uninit(&header.arch)?;
        nn::load_state_dict(&mut generator, &gen)?;
        let mut discriminator = Discriminator::uninit(&header.arch)?;
        nn::load_state_dict(&mut discriminator, &disc)?;
        Ok(Self {
            header,
            generator,
            discriminator,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
