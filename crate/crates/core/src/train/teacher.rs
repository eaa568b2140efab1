use std::collections::HashMap;
use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::losses::TeacherSignals;
use crate::scalar::{Precision, Scalar};
use crate::vlm::Vlm;

/// Content hash of a sample, used as the teacher-signal cache key.
pub fn sample_key(s: &Sample) -> String {
    let mut h = Sha256::new();
    for v in &s.image.patch_features {
        h.update(v.to_le_bytes());
    }
    h.update((s.prompt_ids.len() as u64).to_le_bytes());
    for id in s.prompt_ids.iter().chain(&s.response_ids) {
        h.update(id.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// A frozen teacher plus memoised per-sample signals. Because the teacher never
/// changes, a memoised signal is identical to a fresh forward pass. With a
/// disk directory set, signals are also persisted one file per sample.
pub struct Teacher<S: Scalar> {
    pub model: Vlm<S>,
    memo: HashMap<String, TeacherSignals<S>>,
    pub disk: Option<PathBuf>,
    /// Teacher forward passes actually run.
    pub forwards: usize,
}

impl<S: Scalar> Teacher<S> {
    pub fn new(mut model: Vlm<S>, disk: Option<PathBuf>) -> Result<Self> {
        model.freeze();
        if let Some(dir) = &disk {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        Ok(Teacher { model, memo: HashMap::new(), disk, forwards: 0 })
    }

    pub fn memo_len(&self) -> usize {
        self.memo.len()
    }

    fn disk_path(&self, key: &str) -> Option<PathBuf> {
        self.disk.as_ref().map(|d| d.join(format!("{key}.akd")))
    }

    fn load_disk(&self, key: &str, with_last: bool) -> Result<Option<TeacherSignals<S>>> {
        let Some(path) = self.disk_path(key) else { return Ok(None) };
        if !path.exists() {
            return Ok(None);
        }
        let ck = Checkpoint::open(&path)?;
        let attn_last = match ck.tensor("attn_last") {
            Some(t) => Some(t.to_tensor()?),
            None if with_last => return Ok(None),
            None => None,
        };
        Ok(Some(TeacherSignals {
            attn_first: ck.load("attn_first")?,
            attn_last,
            vision: ck.load("vision")?,
            logits: ck.load("logits")?,
        }))
    }

    fn store_disk(&self, key: &str, sig: &TeacherSignals<S>) -> Result<()> {
        let Some(path) = self.disk_path(key) else { return Ok(()) };
        let mut ck = Checkpoint::default();
        ck.set("kind", "teacher_signals");
        ck.set("precision", Precision::of::<S>());
        ck.push("attn_first", &sig.attn_first);
        if let Some(a) = &sig.attn_last {
            ck.push("attn_last", a);
        }
        ck.push("vision", &sig.vision);
        ck.push("logits", &sig.logits);
        ck.save(&path)
    }

    /// Signals for every sample, running the teacher only on cache misses.
    pub fn signals(&mut self, samples: &[&Sample], with_last: bool) -> Result<Vec<TeacherSignals<S>>> {
        let keys: Vec<String> = samples.iter().map(|s| sample_key(s)).collect();
        let mut missing = Vec::new();
        for (i, key) in keys.iter().enumerate() {
            let hit = self.memo.get(key).is_some_and(|s| !with_last || s.attn_last.is_some());
            if hit {
                continue;
            }
            if let Some(sig) = self.load_disk(key, with_last)? {
                self.memo.insert(key.clone(), sig);
                continue;
            }
            if !missing.contains(&i) && !keys[..i].contains(key) {
                missing.push(i);
            }
        }
        if !missing.is_empty() {
            let images: Vec<_> = missing.iter().map(|&i| samples[i].image.clone()).collect();
            let forced: Vec<_> = missing.iter().map(|&i| samples[i].teacher_forced()).collect();
            let inputs: Vec<_> = forced.iter().map(|f| f.input.clone()).collect();
            let trace = self.model.forward_batch(&images, &inputs, with_last)?;
            self.forwards += 1;
            for (b, &i) in missing.iter().enumerate() {
                let (_, mask) = forced[b].sequence_targets(trace.n_vision);
                let rows: Vec<usize> = mask.iter().enumerate().filter_map(|(r, &m)| m.then_some(r)).collect();
                let sig = TeacherSignals {
                    attn_first: trace.sample_attn_first(b)?.detach(),
                    attn_last: trace.sample_attn_last(b)?.map(|a| a.detach()),
                    vision: trace.sample_vision(b)?.detach(),
                    logits: trace.sample_logits(b)?.index_select(0, &rows)?.detach(),
                };
                self.store_disk(&keys[i], &sig)?;
                self.memo.insert(keys[i].clone(), sig);
            }
        }
        Ok(keys.iter().map(|k| self.memo[k].clone()).collect())
    }
}
