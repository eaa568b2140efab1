//! Layer-wise similarity probes over recorded hidden states.

use std::fmt::Write as _;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::vlm::{ForwardTrace, Vlm};

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// Cosine of flattened consecutive hidden states, `n_layers` values.
pub fn adjacent_layer_cosine<S: Scalar>(trace: &ForwardTrace<S>) -> Result<Vec<f64>> {
    if trace.hidden.len() < 2 {
        return Err(Error::shape("need at least two hidden states"));
    }
    let flat: Vec<Vec<f64>> = trace.hidden.iter().map(|h| h.to_f64_vec()).collect();
    flat.windows(2).map(|w| cosine(&w[0], &w[1])).collect()
}

/// Mean of the vision rows and mean of the text rows of every hidden state.
fn segment_means<S: Scalar>(trace: &ForwardTrace<S>) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let (nv, nt) = (trace.n_vision, trace.n_text);
    if nv == 0 || nt == 0 {
        return Err(Error::BadPartition { n_vision: nv, len: nv + nt });
    }
    trace
        .hidden
        .iter()
        .map(|h| {
            let d = *h.shape().last().expect("rank 2");
            let data = h.to_f64_vec();
            if data.len() != (nv + nt) * d {
                return Err(Error::shape("hidden state length differs from n_vision + n_text"));
            }
            let mean = |rows: std::ops::Range<usize>| {
                let n = rows.len() as f64;
                let mut acc = vec![0.0; d];
                for r in rows {
                    for (a, &x) in acc.iter_mut().zip(&data[r * d..(r + 1) * d]) {
                        *a += x;
                    }
                }
                acc.iter_mut().for_each(|a| *a /= n);
                acc
            };
            Ok((mean(0..nv), mean(nv..nv + nt)))
        })
        .collect()
}

/// Cosine between the pooled vision segment and the pooled text segment, per hidden state.
pub fn segment_cosine_per_layer<S: Scalar>(trace: &ForwardTrace<S>) -> Result<Vec<f64>> {
    segment_means(trace)?.iter().map(|(v, t)| cosine(v, t)).collect()
}

/// Euclidean distance between pooled segments divided by `sqrt(d_model)`.
pub fn segment_distance_per_layer<S: Scalar>(trace: &ForwardTrace<S>) -> Result<Vec<f64>> {
    Ok(segment_means(trace)?
        .iter()
        .map(|(v, t)| {
            let sq: f64 = v.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
            (sq / v.len() as f64).sqrt()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    /// One value per layer transition.
    pub adjacent_cos: Vec<f64>,
    /// One value per hidden state.
    pub segment_cos: Vec<f64>,
    pub segment_dist: Vec<f64>,
    pub sample_count: usize,
}

impl ProbeReport {
    pub const CSV_HEADER: &'static str = "layer_index,adjacent_cos,segment_cos,segment_dist";

    pub fn from_trace<S: Scalar>(trace: &ForwardTrace<S>) -> Result<Self> {
        Ok(ProbeReport {
            adjacent_cos: adjacent_layer_cosine(trace)?,
            segment_cos: segment_cosine_per_layer(trace)?,
            segment_dist: segment_distance_per_layer(trace)?,
            sample_count: 1,
        })
    }

    /// CSV with a leading `#` metadata line. Row `i` carries the transition
    /// from hidden state `i` to `i + 1`; the last row has no transition and
    /// leaves `adjacent_cos` empty. `meta` pairs are appended to the `#` line.
    pub fn to_csv(&self, meta: &[(&str, &str)]) -> String {
        let mut out = format!("# sample_count={}", self.sample_count);
        for (k, v) in meta {
            write!(out, " {k}={v}").expect("string write");
        }
        out.push('\n');
        out.push_str(Self::CSV_HEADER);
        out.push('\n');
        for i in 0..self.segment_cos.len() {
            let adj = self.adjacent_cos.get(i).map_or(String::new(), |v| format!("{v:.12}"));
            writeln!(out, "{i},{adj},{:.12},{:.12}", self.segment_cos[i], self.segment_dist[i]).expect("string write");
        }
        out
    }
}

/// Arithmetic mean of per-sample metrics over the first `max_samples` samples,
/// in dataset order. Each sample is fed as prompt followed by response.
pub fn probe_aggregate<S: Scalar>(model: &Vlm<S>, samples: &[Sample], max_samples: usize) -> Result<ProbeReport> {
    let n = samples.len().min(max_samples);
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut sum: Option<ProbeReport> = None;
    for s in &samples[..n] {
        let trace = model.forward_batch(std::slice::from_ref(&s.image), &[s.full_text()], false)?.sample(0)?;
        let r = ProbeReport::from_trace(&trace)?;
        sum = Some(match sum {
            None => r,
            Some(mut acc) => {
                for (a, b) in [
                    (&mut acc.adjacent_cos, &r.adjacent_cos),
                    (&mut acc.segment_cos, &r.segment_cos),
                    (&mut acc.segment_dist, &r.segment_dist),
                ] {
                    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                }
                acc
            }
        });
    }
    let mut report = sum.expect("n > 0");
    let inv = 1.0 / n as f64;
    for v in [&mut report.adjacent_cos, &mut report.segment_cos, &mut report.segment_dist] {
        v.iter_mut().for_each(|x| *x *= inv);
    }
    report.sample_count = n;
    Ok(report)
}
