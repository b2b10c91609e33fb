//! JSONL dataset files and seeded batch iteration.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::synth::{generate_samples, ImageSpec, SyntheticSample, TaskMix};
use super::vocab::Vocabulary;
use crate::error::{Error, Result};

/// Writes samples as JSONL, one object per line with fields
/// `pixels`, `instruction`, `response`.
pub fn write_jsonl(path: &Path, samples: &[SyntheticSample]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut out, s).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Generates a corpus and writes it to `path`.
pub fn generate_corpus(
    path: &Path,
    seed: u64,
    n_samples: usize,
    spec: &ImageSpec,
    vocab: &Vocabulary,
    mix: TaskMix,
) -> Result<()> {
    let samples = generate_samples(seed, n_samples, spec, vocab, mix)?;
    write_jsonl(path, &samples)
}

/// Reads a JSONL dataset, checking every sample against the image layout
/// and vocabulary size.
pub fn load_jsonl(path: &Path, spec: &ImageSpec, vocab_size: usize) -> Result<Vec<SyntheticSample>> {
    let file = File::open(path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    let mut samples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let s: SyntheticSample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        if s.pixels.len() != spec.num_values() {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected {} pixel values, found {}", spec.num_values(), s.pixels.len()),
            });
        }
        if let Some(&id) = s.instruction.iter().chain(&s.response).find(|&&id| id >= vocab_size) {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("token id {id} outside vocabulary of size {vocab_size}"),
            });
        }
        samples.push(s);
    }
    Ok(samples)
}

/// File names written by [`write_corpus_dir`].
pub const CAPTION_FILE: &str = "caption.jsonl";
pub const INSTRUCT_FILE: &str = "instruct.jsonl";
pub const HELDOUT_FILE: &str = "heldout.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";

/// Generates the standard corpus directory: `total` images, the last
/// `holdout` of which form the evaluation split (describe prompts); the
/// rest are written once as caption samples and once as an instruction mix.
pub fn write_corpus_dir(
    dir: &Path,
    seed: u64,
    total: usize,
    holdout: usize,
    spec: &ImageSpec,
    vocab: &Vocabulary,
) -> Result<()> {
    if holdout >= total {
        return Err(Error::Config(format!(
            "held-out split ({holdout}) must be smaller than the corpus ({total})"
        )));
    }
    fs::create_dir_all(dir)?;
    let train = total - holdout;
    for (file, mix) in [(CAPTION_FILE, TaskMix::Caption), (INSTRUCT_FILE, TaskMix::Instruction)] {
        let samples = generate_samples(seed, total, spec, vocab, mix)?;
        write_jsonl(&dir.join(file), &samples[..train])?;
    }
    if holdout > 0 {
        let samples = generate_samples(seed, total, spec, vocab, TaskMix::Describe)?;
        write_jsonl(&dir.join(HELDOUT_FILE), &samples[train..])?;
    }
    vocab.save(&dir.join(VOCAB_FILE))
}

/// Seeded per-epoch shuffling over sample indices.
#[derive(Debug, Clone)]
pub struct BatchIterator {
    n_samples: usize,
    batch_size: usize,
    seed: u64,
    drop_last: bool,
}

impl BatchIterator {
    pub fn new(n_samples: usize, batch_size: usize, seed: u64, drop_last: bool) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(BatchIterator {
            n_samples,
            batch_size,
            seed,
            drop_last,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        if self.drop_last {
            self.n_samples / self.batch_size
        } else {
            self.n_samples.div_ceil(self.batch_size)
        }
    }

    /// The permutation visited in `epoch`.
    pub fn permutation(&self, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..self.n_samples).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Batches of sample indices for `epoch`.
    pub fn epoch(&self, epoch: usize) -> impl Iterator<Item = Vec<usize>> {
        let order = self.permutation(epoch);
        let bs = self.batch_size;
        let keep = self.batches_per_epoch();
        (0..keep).map(move |b| order[b * bs..((b + 1) * bs).min(order.len())].to_vec())
    }
}
