//! On-disk dataset layout: `alphabet.txt`, one index file per partition
//! (`train.tsv`, `dev.tsv`, `test.tsv`) and one tensor file per clip.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::container::{read_tensor, write_tensor, DType};
use super::synth::{DatasetSplit, FrameStack, Handedness, SyntheticClip};
use crate::ctc::Alphabet;
use crate::error::{Error, Result};

pub const ALPHABET_FILE: &str = "alphabet.txt";
pub const CLIP_DIR: &str = "clips";
pub const SIGNER_DISJOINT_MARKER: &str = "signer_disjoint";

pub fn write_clip(path: &Path, frames: &FrameStack) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_tensor(&mut w, &frames.shape(), DType::U8, frames.bytes())?;
    w.flush()?;
    Ok(())
}

pub fn read_clip(path: &Path) -> Result<FrameStack> {
    let raw = read_tensor(BufReader::new(fs::File::open(path)?))?;
    if raw.dtype != DType::U8 {
        return Err(Error::Format(format!("{}: clip frames must be u8", path.display())));
    }
    let shape: [usize; 4] = raw
        .shape
        .as_slice()
        .try_into()
        .map_err(|_| Error::Format(format!("{}: clip must be 4-D", path.display())))?;
    FrameStack::new(shape, raw.payload)
}

/// Writes the dataset under `dir`, which must already exist.
pub fn write_dataset(split: &DatasetSplit, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join(CLIP_DIR))?;
    let letters: String = split.alphabet.letters().iter().map(|c| format!("{c}\n")).collect();
    fs::write(dir.join(ALPHABET_FILE), letters)?;
    if split.signer_disjoint {
        fs::write(dir.join(SIGNER_DISJOINT_MARKER), "")?;
    }
    for (name, clips) in split.partitions() {
        let mut index = BufWriter::new(fs::File::create(dir.join(format!("{name}.tsv")))?);
        for clip in clips {
            let rel = format!("{CLIP_DIR}/{}.tensor", clip.id);
            write_clip(&dir.join(&rel), &clip.frames)?;
            writeln!(
                index,
                "{rel}\t{}\t{}\t{}",
                split.alphabet.decode(&clip.target),
                clip.signer_id,
                clip.handedness.as_str()
            )?;
        }
        index.flush()?;
    }
    Ok(())
}

pub fn read_alphabet(dir: &Path) -> Result<Alphabet> {
    let text = fs::read_to_string(dir.join(ALPHABET_FILE))?;
    let letters: Vec<char> = text
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            let mut cs = l.chars();
            match (cs.next(), cs.next()) {
                (Some(c), None) => Ok(c),
                _ => Err(Error::Format(format!("alphabet line {l:?} is not one letter"))),
            }
        })
        .collect::<Result<_>>()?;
    Alphabet::new(letters)
}

/// Reads one partition index; a missing file is an empty partition.
pub fn read_partition(dir: &Path, name: &str, alphabet: &Alphabet) -> Result<Vec<SyntheticClip>> {
    let path = dir.join(format!("{name}.tsv"));
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut clips = Vec::new();
    for (n, line) in BufReader::new(fs::File::open(&path)?).lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [rel, target, signer, hand] = fields[..] else {
            return Err(Error::Format(format!("{}:{}: expected 4 fields", path.display(), n + 1)));
        };
        let id = Path::new(rel)
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Format(format!("bad clip path {rel:?}")))?
            .to_string();
        clips.push(SyntheticClip {
            id,
            frames: read_clip(&dir.join(rel))?,
            target: alphabet.encode(target)?,
            signer_id: signer
                .parse()
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?,
            handedness: Handedness::parse(hand)?,
        });
    }
    Ok(clips)
}

pub fn read_dataset(dir: &Path) -> Result<DatasetSplit> {
    let alphabet = read_alphabet(dir)?;
    Ok(DatasetSplit {
        train: read_partition(dir, "train", &alphabet)?,
        dev: read_partition(dir, "dev", &alphabet)?,
        test: read_partition(dir, "test", &alphabet)?,
        signer_disjoint: dir.join(SIGNER_DISJOINT_MARKER).exists(),
        alphabet,
    })
}
