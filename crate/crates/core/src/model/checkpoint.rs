//! Binary checkpoint: a magic line, the manifest length, a JSON manifest,
//! then every parameter as little-endian f64 in manifest order.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::network::Model;
use crate::ctc::Alphabet;
use crate::error::{Error, Result};
use crate::numerics::Grid;
use crate::scalar::Real;

pub const CHECKPOINT_MAGIC: &str = "CTCSEQ-CHECKPOINT v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ModelConfig,
    pub alphabet: String,
    pub params: Vec<ParamEntry>,
}

pub fn write_checkpoint<S: Real>(model: &Model<S>, alphabet: &Alphabet, mut w: impl Write) -> Result<()> {
    if alphabet.len() != model.config().num_classes {
        return Err(Error::Contract(format!(
            "alphabet of {} letters for a {}-class model",
            alphabet.len(),
            model.config().num_classes
        )));
    }
    let mut offset = 0;
    let params = model
        .params()
        .iter()
        .map(|p| {
            let entry = ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset,
            };
            offset += p.value.len() * 8;
            entry
        })
        .collect();
    let manifest = Manifest {
        config: model.config().clone(),
        alphabet: alphabet.as_string(),
        params,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    writeln!(w, "{CHECKPOINT_MAGIC}")?;
    writeln!(w, "{}", json.len())?;
    w.write_all(&json)?;
    for p in model.params().iter() {
        for &v in p.value.values() {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_line(r: &mut impl BufRead) -> Result<String> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    Ok(line.trim_end_matches('\n').to_string())
}

pub fn read_checkpoint<S: Real>(mut r: impl BufRead) -> Result<(Model<S>, Alphabet)> {
    let magic = read_line(&mut r)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("not a checkpoint (header {magic:?})")));
    }
    let len: usize = read_line(&mut r)?
        .parse()
        .map_err(|e| Error::Format(format!("manifest length: {e}")))?;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let manifest: Manifest =
        serde_json::from_slice(&json).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    let alphabet = Alphabet::from_str_letters(&manifest.alphabet)?;
    if alphabet.len() != manifest.config.num_classes {
        return Err(Error::Format("alphabet size disagrees with config".into()));
    }
    let mut model = Model::<S>::new(manifest.config.clone(), 0)?;
    if model.params().len() != manifest.params.len() {
        return Err(Error::Format(format!(
            "checkpoint lists {} parameters, config implies {}",
            manifest.params.len(),
            model.params().len()
        )));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let mut expected_offset = 0;
    for (p, entry) in model.params_mut().iter_mut().zip(&manifest.params) {
        if p.name != entry.name || p.value.shape() != entry.shape.as_slice() {
            return Err(Error::Format(format!(
                "parameter {} {:?} does not match checkpoint entry {} {:?}",
                p.name,
                p.value.shape(),
                entry.name,
                entry.shape
            )));
        }
        if entry.offset != expected_offset {
            return Err(Error::Format(format!("bad offset for {}", entry.name)));
        }
        let n = p.value.len();
        let bytes = payload
            .get(entry.offset..entry.offset + 8 * n)
            .ok_or_else(|| Error::Format(format!("payload truncated at {}", entry.name)))?;
        let values = bytes
            .chunks_exact(8)
            .map(|b| S::lit(f64::from_le_bytes(b.try_into().expect("8-byte chunk"))))
            .collect();
        p.value = Grid::new(entry.shape.clone(), values)?;
        expected_offset += 8 * n;
    }
    if payload.len() != expected_offset {
        return Err(Error::Format(format!(
            "payload has {} bytes, expected {expected_offset}",
            payload.len()
        )));
    }
    Ok((model, alphabet))
}

pub fn save_checkpoint<S: Real>(model: &Model<S>, alphabet: &Alphabet, path: &std::path::Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(model, alphabet, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<S: Real>(path: &std::path::Path) -> Result<(Model<S>, Alphabet)> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}
