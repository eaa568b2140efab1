use crate::data::vocab::EOS;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::vlm::Vlm;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Mean negative log-likelihood over every response token.
    pub cross_entropy: f64,
    /// Share of samples whose greedy continuation equals the response.
    pub exact_match: f64,
    pub n_samples: usize,
    pub n_tokens: usize,
}

const EVAL_BATCH: usize = 16;

/// Masked cross-entropy summed in 64-bit, plus greedy exact match.
pub fn evaluate<S: Scalar>(model: &Vlm<S>, samples: &[Sample]) -> Result<EvalReport> {
    let (nll, n_tokens) = response_nll(model, samples)?;
    let mut hits = 0usize;
    for s in samples {
        let budget = model.cfg.max_text_tokens.saturating_sub(s.prompt_ids.len());
        if model.generate_greedy(&s.image, &s.prompt_ids, budget, EOS)? == s.response_ids {
            hits += 1;
        }
    }
    Ok(EvalReport {
        cross_entropy: nll / n_tokens as f64,
        exact_match: hits as f64 / samples.len() as f64,
        n_samples: samples.len(),
        n_tokens,
    })
}

/// Summed response-token negative log-likelihood and token count.
pub fn response_nll<S: Scalar>(model: &Vlm<S>, samples: &[Sample]) -> Result<(f64, usize)> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let v = model.cfg.vocab_size;
    let mut nll = 0.0;
    let mut count = 0usize;
    for chunk in samples.chunks(EVAL_BATCH) {
        let forced: Vec<_> = chunk.iter().map(|s| s.teacher_forced()).collect();
        let images: Vec<_> = chunk.iter().map(|s| s.image.clone()).collect();
        let inputs: Vec<_> = forced.iter().map(|f| f.input.clone()).collect();
        let trace = model.forward_batch(&images, &inputs, false)?;
        for (b, f) in forced.iter().enumerate() {
            let logits = trace.sample_logits(b)?.to_f64_vec();
            let (targets, mask) = f.sequence_targets(trace.n_vision);
            for (row, (&t, &m)) in targets.iter().zip(&mask).enumerate() {
                if !m {
                    continue;
                }
                let x = &logits[row * v..(row + 1) * v];
                let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + x.iter().map(|&z| (z - mx).exp()).sum::<f64>().ln();
                nll += lse - x[t];
                count += 1;
            }
        }
    }
    Ok((nll, count))
}
