//! Finite-difference audit of every distillation loss term, run end to end
//! through a tiny student and teacher in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Sample;
use crate::error::Result;
use crate::losses::{sample_losses, AttnBlock, KdProjectors, LossConfig, LossTerms, StudentSignals};
use crate::tensor::{grad_check, Tensor};
use crate::train::Teacher;
use crate::vlm::{ToyImage, Vlm, VlmConfig};

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub tolerance: f64,
    pub step: f64,
    pub seed: u64,
    /// Replace the backward of `l_sup` with a wrong derivative. Negative control.
    pub inject_faulty_backward: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions { tolerance: 1e-5, step: 1e-6, seed: 0, inject_faulty_backward: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteCase {
    pub name: String,
    pub n_checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// 2-layer d=8 student, 3-layer d=16 teacher, 4 vision tokens.
pub fn suite_configs() -> (VlmConfig, VlmConfig) {
    let student = VlmConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        vocab_size: 16,
        patch_grid: (2, 4),
        d_patch: 4,
        n_vision_tokens: 4,
        max_text_tokens: 8,
        ffn_mult: 2,
        seed: 11,
        frozen_seed: 0x5eed,
    };
    let teacher = VlmConfig { d_model: 16, n_heads: 2, n_layers: 3, seed: 12, ..student.clone() };
    (student, teacher)
}

fn suite_samples(cfg: &VlmConfig, seed: u64) -> Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lens = [(3, 3), (2, 4)];
    lens.iter()
        .map(|&(np, nr)| {
            let feats = (0..cfg.n_patches() * cfg.d_patch).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let image = ToyImage::new(feats, cfg.n_patches(), cfg.d_patch)?;
            let mut tok = || rng.random_range(1..cfg.vocab_size as u32);
            let prompt_ids = (0..np).map(|_| tok()).collect();
            let response_ids = (0..nr).map(|_| tok()).collect();
            Ok(Sample { image, prompt_ids, response_ids })
        })
        .collect()
}

/// One row per loss term plus the full composite; attention blocks are each
/// checked separately.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<SuiteCase>> {
    let (scfg, tcfg) = suite_configs();
    let student = Vlm::<f64>::new(&scfg)?;
    let mut teacher = Teacher::new(Vlm::<f64>::new(&tcfg)?, None)?;
    let proj = KdProjectors::new(&scfg, &tcfg, opts.seed);
    let samples = suite_samples(&scfg, opts.seed)?;
    let refs: Vec<&Sample> = samples.iter().collect();
    let signals = teacher.signals(&refs, true)?;

    let mut params: Vec<Tensor<f64>> = student.trainable().into_iter().map(|p| p.tensor).collect();
    params.extend(proj.named().into_iter().map(|(_, t)| t));

    let base = LossConfig { k: 2, rkld_floor: 0.0, ..LossConfig::default() };
    let only = |f: fn(&mut LossConfig)| {
        let mut c = LossConfig { enable_rkld: false, enable_attn_tv: false, enable_v_all: false, enable_v_focus: false, ..base.clone() };
        f(&mut c);
        c
    };
    type Pick = fn(&LossTerms<f64>) -> Tensor<f64>;
    let mut cases: Vec<(String, LossConfig, Pick)> = vec![
        ("l_sup".into(), only(|_| {}), |t| t.l_sup.clone()),
    ];
    for block in AttnBlock::ALL {
        let mut c = only(|c| c.enable_attn_tv = true);
        c.attn_block = block;
        cases.push((format!("l_attn[{block}]"), c, |t| t.l_attn_tv.clone()));
    }
    cases.push(("l_v_all".into(), only(|c| c.enable_v_all = true), |t| t.l_v_all.clone()));
    cases.push(("l_v_focus".into(), only(|c| c.enable_v_focus = true), |t| t.l_v_focus.clone()));
    cases.push(("l_rkld".into(), only(|c| c.enable_rkld = true), |t| t.l_rkld.clone()));
    cases.push(("l_rkld[floor]".into(), only(|c| { c.enable_rkld = true; c.rkld_floor = 1e-8 }), |t| t.l_rkld.clone()));
    cases.push(("total".into(), base.clone(), |t| t.total.clone()));
    cases.push(("total[all_plus_last]".into(), LossConfig { attn_block: AttnBlock::AllPlusLast, ..base.clone() }, |t| t.total.clone()));

    let faulty = opts.inject_faulty_backward;
    let mut out = Vec::new();
    for (name, cfg, pick) in cases {
        cfg.validate(scfg.n_vision_tokens)?;
        let with_last = cfg.needs_last_attention();
        let f = || -> Result<Tensor<f64>> {
            let images: Vec<_> = samples.iter().map(|s| s.image.clone()).collect();
            let forced: Vec<_> = samples.iter().map(|s| s.teacher_forced()).collect();
            let inputs: Vec<_> = forced.iter().map(|f| f.input.clone()).collect();
            let trace = student.forward_batch(&images, &inputs, with_last)?;
            let mut acc: Option<Tensor<f64>> = None;
            for (b, f) in forced.iter().enumerate() {
                let s = StudentSignals {
                    attn_first: trace.sample_attn_first(b)?,
                    attn_last: trace.sample_attn_last(b)?,
                    vision: trace.sample_vision(b)?,
                    logits: trace.sample_logits(b)?,
                    n_vision: trace.n_vision,
                };
                let (targets, mask) = f.sequence_targets(trace.n_vision);
                let mut terms = sample_losses(&s, Some(&signals[b]), &targets, &mask, &proj, &cfg)?;
                if faulty {
                    terms.l_sup = terms.l_sup.map_with_grad(|x| x, |_| 2.0);
                    terms.total = terms.total.add(&terms.l_sup.sub(&terms.l_sup.detach())?)?;
                }
                let v = pick(&terms);
                acc = Some(match acc {
                    Some(a) => a.add(&v)?,
                    None => v,
                });
            }
            Ok(acc.expect("suite has samples").scale(1.0 / samples.len() as f64))
        };
        let report = grad_check(f, &params, opts.step, opts.tolerance)?;
        for p in &params {
            p.zero_grad();
        }
        out.push(SuiteCase {
            name,
            n_checked: report.entries.len(),
            max_rel_error: report.max_rel_error(),
            passed: report.passed(),
        });
    }
    Ok(out)
}
