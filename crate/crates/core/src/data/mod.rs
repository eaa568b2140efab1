//! Datasets: the synthetic task generator, JSONL storage and batching.

pub mod synth;
pub mod vocab;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vlm::ToyImage;

pub const SCHEMA: &str = "akd-dataset";
pub const SCHEMA_VERSION: u32 = 1;

/// One image with its prompt and target response.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: ToyImage,
    pub prompt_ids: Vec<u32>,
    pub response_ids: Vec<u32>,
}

impl Sample {
    /// Prompt followed by response.
    pub fn full_text(&self) -> Vec<u32> {
        let mut t = self.prompt_ids.clone();
        t.extend_from_slice(&self.response_ids);
        t
    }

    /// Teacher-forced view: model input is the full text minus its last token.
    pub fn teacher_forced(&self) -> TeacherForced {
        let text = self.full_text();
        let n = text.len();
        let input = text[..n - 1].to_vec();
        let targets = text[1..].to_vec();
        let mask = (1..n).map(|i| i >= self.prompt_ids.len()).collect();
        TeacherForced { input, targets, mask }
    }
}

/// `targets[i]` is the token after `input[i]`; `mask[i]` marks response targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TeacherForced {
    pub input: Vec<u32>,
    pub targets: Vec<u32>,
    pub mask: Vec<bool>,
}

impl TeacherForced {
    /// Targets and mask over the whole `[vision ; text]` sequence.
    pub fn sequence_targets(&self, n_vision: usize) -> (Vec<usize>, Vec<bool>) {
        let mut targets = vec![0usize; n_vision];
        targets.extend(self.targets.iter().map(|&t| t as usize));
        let mut mask = vec![false; n_vision];
        mask.extend_from_slice(&self.mask);
        (targets, mask)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema: String,
    version: u32,
    /// Generator seed, when the file was synthesised.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    image_patches: Vec<Vec<f32>>,
    prompt_ids: Vec<u32>,
    response_ids: Vec<u32>,
}

pub(crate) fn write_jsonl<W: Write>(mut w: W, samples: &[Sample], seed: Option<u64>) -> Result<()> {
    let io = |e: std::io::Error| Error::io("<dataset>", e);
    let header = Header { schema: SCHEMA.into(), version: SCHEMA_VERSION, seed };
    writeln!(w, "{}", serde_json::to_string(&header).expect("serialisable")).map_err(io)?;
    for s in samples {
        let rec = Record {
            image_patches: s.image.patch_features.chunks(s.image.d_patch).map(<[f32]>::to_vec).collect(),
            prompt_ids: s.prompt_ids.clone(),
            response_ids: s.response_ids.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&rec).expect("serialisable")).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn write_dataset(path: &Path, samples: &[Sample], seed: Option<u64>) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_jsonl(BufWriter::new(f), samples, seed).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

fn parse_error(line: usize, msg: impl ToString) -> Error {
    Error::Parse { line, msg: msg.to_string() }
}

/// Parse JSONL text. Line numbers in errors are 1-based.
pub fn parse_dataset<R: BufRead>(reader: R, vocab_size: usize) -> Result<Vec<Sample>> {
    let mut lines = reader.lines().enumerate();
    let header_line = loop {
        match lines.next() {
            None => return Err(Error::EmptyDataset),
            Some((i, line)) => {
                let line = line.map_err(|e| parse_error(i + 1, e))?;
                if !line.trim().is_empty() {
                    break (i + 1, line);
                }
            }
        }
    };
    let header: Header = serde_json::from_str(&header_line.1).map_err(|e| parse_error(header_line.0, e))?;
    if header.schema != SCHEMA || header.version != SCHEMA_VERSION {
        return Err(parse_error(header_line.0, format!("unsupported schema {} v{}", header.schema, header.version)));
    }
    let mut samples = Vec::new();
    for (i, line) in lines {
        let no = i + 1;
        let line = line.map_err(|e| parse_error(no, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse_error(no, e))?;
        if let Some(&id) = rec.prompt_ids.iter().chain(&rec.response_ids).find(|&&id| id as usize >= vocab_size) {
            return Err(Error::InvalidTokenId { id: id as usize, vocab: vocab_size });
        }
        if rec.prompt_ids.is_empty() || rec.response_ids.is_empty() {
            return Err(parse_error(no, "prompt_ids and response_ids must be nonempty"));
        }
        let n_patches = rec.image_patches.len();
        let d_patch = rec.image_patches.first().map_or(0, Vec::len);
        if n_patches == 0 || d_patch == 0 || rec.image_patches.iter().any(|r| r.len() != d_patch) {
            return Err(parse_error(no, "image_patches must be a nonempty rectangular array"));
        }
        let image = ToyImage::new(rec.image_patches.concat(), n_patches, d_patch).map_err(|e| parse_error(no, e))?;
        samples.push(Sample { image, prompt_ids: rec.prompt_ids, response_ids: rec.response_ids });
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(samples)
}

pub fn read_dataset(path: &Path, vocab_size: usize) -> Result<Vec<Sample>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(BufReader::new(f), vocab_size)
}

/// A padded group of samples ready for one forward pass.
#[derive(Debug, Clone)]
pub struct DistillBatch {
    pub images: Vec<ToyImage>,
    pub prompt_ids: Vec<Vec<u32>>,
    pub response_ids: Vec<Vec<u32>>,
    /// Per sample, over prompt then response tokens: true on response tokens.
    pub loss_mask: Vec<Vec<bool>>,
}

impl DistillBatch {
    pub fn from_samples(samples: &[&Sample]) -> Self {
        DistillBatch {
            images: samples.iter().map(|s| s.image.clone()).collect(),
            prompt_ids: samples.iter().map(|s| s.prompt_ids.clone()).collect(),
            response_ids: samples.iter().map(|s| s.response_ids.clone()).collect(),
            loss_mask: samples
                .iter()
                .map(|s| {
                    let mut m = vec![false; s.prompt_ids.len()];
                    m.extend(vec![true; s.response_ids.len()]);
                    m
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn samples(&self) -> Vec<Sample> {
        (0..self.len())
            .map(|i| Sample {
                image: self.images[i].clone(),
                prompt_ids: self.prompt_ids[i].clone(),
                response_ids: self.response_ids[i].clone(),
            })
            .collect()
    }
}

/// Sample order of one epoch under `seed`.
pub fn shuffled_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// Shuffle with `seed`, then cut into batches of at most `batch_size`.
pub fn batches(samples: &[Sample], batch_size: usize, seed: u64) -> Result<Vec<DistillBatch>> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let order = shuffled_order(samples.len(), seed);
    Ok(order
        .chunks(batch_size)
        .map(|chunk| DistillBatch::from_samples(&chunk.iter().map(|&i| &samples[i]).collect::<Vec<_>>()))
        .collect())
}

/// Load a dataset file and batch it.
pub fn load_dataset(path: &Path, vocab_size: usize, batch_size: usize, seed: u64) -> Result<Vec<DistillBatch>> {
    batches(&read_dataset(path, vocab_size)?, batch_size, seed)
}
