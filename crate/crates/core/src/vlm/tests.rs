use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::scalar::Precision;
use crate::tensor::Tensor;

fn tiny_cfg() -> VlmConfig {
    VlmConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        vocab_size: 16,
        patch_grid: (2, 4),
        d_patch: 3,
        n_vision_tokens: 4,
        max_text_tokens: 6,
        ffn_mult: 2,
        seed: 11,
        frozen_seed: 12,
    }
}

fn random_image(cfg: &VlmConfig, rng: &mut ChaCha8Rng) -> ToyImage {
    let data = (0..cfg.n_patches() * cfg.d_patch).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    ToyImage::new(data, cfg.n_patches(), cfg.d_patch).unwrap()
}

/// Randomise every trainable tensor so biases and gains are exercised too.
fn scramble(model: &Vlm<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in model.trainable() {
        for v in p.tensor.data_mut().iter_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
}

type Mat = Vec<Vec<f64>>;

fn mat(t: &Tensor<f64>) -> Mat {
    let cols = *t.shape().last().unwrap();
    t.to_vec().chunks(cols).map(<[f64]>::to_vec).collect()
}

fn vecof(t: &Tensor<f64>) -> Vec<f64> {
    t.to_vec()
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    let mut out = vec![vec![0.0; b[0].len()]; a.len()];
    for i in 0..a.len() {
        for j in 0..b[0].len() {
            for k in 0..b.len() {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

fn ln(x: &Mat, g: &[f64], b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let s = (var + 1e-5).sqrt();
            row.iter().enumerate().map(|(j, v)| (v - mean) / s * g[j] + b[j]).collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Reference decoder written one scalar at a time. Returns (logits, attn_first).
fn reference_forward(m: &Vlm<f64>, x0: Mat) -> (Mat, Vec<Mat>) {
    let cfg = &m.cfg;
    let (h, dh) = (cfg.n_heads, cfg.head_dim());
    let l = x0.len();
    let mut x = x0;
    let mut first = Vec::new();
    for (li, b) in m.blocks.iter().enumerate() {
        let xn = ln(&x, &vecof(&b.ln1_gain), &vecof(&b.ln1_bias));
        let q = mm(&xn, &mat(&b.wq));
        let k = mm(&xn, &mat(&b.wk));
        let v = mm(&xn, &mat(&b.wv));
        let mut ctx = vec![vec![0.0; cfg.d_model]; l];
        for head in 0..h {
            let mut a = vec![vec![0.0; l]; l];
            for i in 0..l {
                let mut s = vec![f64::NEG_INFINITY; l];
                for j in 0..=i {
                    let mut dot = 0.0;
                    for e in 0..dh {
                        dot += q[i][head * dh + e] * k[j][head * dh + e];
                    }
                    s[j] = dot / (dh as f64).sqrt();
                }
                let mx = s[..=i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s[..=i].iter().map(|v| (v - mx).exp()).sum();
                for j in 0..=i {
                    a[i][j] = (s[j] - mx).exp() / z;
                }
                for j in 0..=i {
                    for e in 0..dh {
                        ctx[i][head * dh + e] += a[i][j] * v[j][head * dh + e];
                    }
                }
            }
            if li == 0 {
                first.push(a);
            }
        }
        let o = mm(&ctx, &mat(&b.wo));
        for i in 0..l {
            for j in 0..cfg.d_model {
                x[i][j] += o[i][j];
            }
        }
        let xn = ln(&x, &vecof(&b.ln2_gain), &vecof(&b.ln2_bias));
        let mut hdn = mm(&xn, &mat(&b.w1));
        let b1 = vecof(&b.b1);
        for row in &mut hdn {
            for (j, v) in row.iter_mut().enumerate() {
                *v = gelu(*v + b1[j]);
            }
        }
        let f = mm(&hdn, &mat(&b.w2));
        let b2 = vecof(&b.b2);
        for i in 0..l {
            for j in 0..cfg.d_model {
                x[i][j] += f[i][j] + b2[j];
            }
        }
    }
    let xf = ln(&x, &vecof(&m.final_gain), &vecof(&m.final_bias));
    let table = mat(&m.text.table);
    let scale = 1.0 / (cfg.d_model as f64).sqrt();
    let logits = xf
        .iter()
        .map(|row| table.iter().map(|t| row.iter().zip(t).map(|(a, b)| a * b).sum::<f64>() * scale).collect())
        .collect();
    (logits, first)
}

#[test]
fn forward_matches_reference_implementation() {
    let cfg = VlmConfig { n_vision_tokens: 2, ..tiny_cfg() };
    let model = Vlm::<f64>::new(&cfg).unwrap();
    scramble(&model, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let img = random_image(&cfg, &mut rng);
    let ids = [1u32, 7, 3, 9];
    let vision = model.project_vision(&model.embed_image(&img).unwrap()).unwrap();
    let text = model.embed_text(&ids).unwrap();
    let trace = model.forward(&vision, &text, true).unwrap();
    assert_eq!(trace.logits.shape(), [6, 16]);
    let x0: Mat = mat(&vision).into_iter().chain(mat(&text)).collect();
    let (logits, first) = reference_forward(&model, x0);
    let got = mat(&trace.logits);
    for i in 0..6 {
        for j in 0..16 {
            assert!((got[i][j] - logits[i][j]).abs() <= 1e-10, "logit ({i},{j})");
        }
    }
    let attn = trace.attn_first.to_vec();
    for h in 0..2 {
        for i in 0..6 {
            for j in 0..6 {
                assert!((attn[(h * 6 + i) * 6 + j] - first[h][i][j]).abs() <= 1e-10);
            }
        }
    }
}

#[test]
fn trace_shapes_and_invariants() {
    let cfg = tiny_cfg();
    let model = Vlm::<f64>::new(&cfg).unwrap();
    let img = random_image(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
    let vision = model.project_vision(&model.embed_image(&img).unwrap()).unwrap();
    let text = model.embed_text(&[1, 2, 3]).unwrap();
    let trace = model.forward(&vision, &text, false).unwrap();
    assert_eq!(trace.hidden.len(), cfg.n_layers + 1);
    assert_eq!(trace.attn_first.shape(), [2, 7, 7]);
    assert!(trace.attn_last.is_none());
    assert_eq!((trace.n_vision, trace.n_text), (4, 3));
    let x0 = Tensor::concat(&[vision, text], 0).unwrap();
    assert!(trace.hidden[0].bit_eq(&x0));
    let a = trace.attn_first.to_vec();
    for h in 0..2 {
        for i in 0..7 {
            let row = &a[(h * 7 + i) * 7..(h * 7 + i + 1) * 7];
            assert!(row[i + 1..].iter().all(|&v| v == 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
    let with_last = model.forward(&trace.hidden[0].narrow(0, 0, 4).unwrap(), &model.embed_text(&[1, 2, 3]).unwrap(), true).unwrap();
    assert_eq!(with_last.attn_last.unwrap().shape(), [2, 7, 7]);
}

#[test]
fn single_token_attends_only_to_itself() {
    let cfg = tiny_cfg();
    let model = Vlm::<f64>::new(&cfg).unwrap();
    let text = model.embed_text(&[5]).unwrap().reshape(&[1, 1, cfg.d_model]).unwrap();
    let vision = Tensor::<f64>::zeros(&[1, 1, cfg.d_model]);
    let trace = model.forward_embedded(&vision, &text, vec![1], false).unwrap();
    let a = trace.sample_attn_first(0).unwrap().to_vec();
    assert_eq!(&a[..2], &[1.0, 0.0]);
    assert!((a[2] + a[3] - 1.0).abs() < 1e-12);
}

#[test]
fn perturbing_a_later_token_leaves_earlier_logits_unchanged() {
    let cfg = tiny_cfg();
    let model = Vlm::<f64>::new(&cfg).unwrap();
    scramble(&model, 9);
    let img = random_image(&cfg, &mut ChaCha8Rng::seed_from_u64(2));
    let a = model.forward_batch(&[img.clone()], &[vec![1, 4, 5, 6]], false).unwrap();
    let b = model.forward_batch(&[img], &[vec![1, 4, 11, 6]], false).unwrap();
    let (la, lb) = (a.logits.to_vec(), b.logits.to_vec());
    let cut = (cfg.n_vision_tokens + 2) * cfg.vocab_size;
    assert_eq!(la[..cut], lb[..cut]);
    assert_ne!(la[cut..], lb[cut..]);
}

#[test]
fn padded_batch_matches_individual_forwards() {
    let cfg = tiny_cfg();
    let model = Vlm::<f64>::new(&cfg).unwrap();
    scramble(&model, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let imgs = [random_image(&cfg, &mut rng), random_image(&cfg, &mut rng)];
    let texts = [vec![1u32, 2], vec![3u32, 4, 5, 6]];
    let batch = model.forward_batch(&imgs, &texts, true).unwrap();
    for b in 0..2 {
        let single = model.forward_batch(&imgs[b..b + 1], &texts[b..b + 1], true).unwrap().sample(0).unwrap();
        let from_batch = batch.sample(b).unwrap();
        for (x, y) in from_batch.logits.to_vec().iter().zip(single.logits.to_vec()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(from_batch.attn_first.shape(), single.attn_first.shape());
        assert_eq!(from_batch.hidden.len(), single.hidden.len());
    }
}

#[test]
fn embed_image_trivial_cases() {
    let cfg = tiny_cfg();
    let model = Vlm::<f64>::new(&cfg).unwrap();
    model.image.pos.data_mut().iter_mut().for_each(|v| *v = 0.0);
    let zero = model.embed_image(&ToyImage::zeros(&cfg)).unwrap();
    assert!(zero.to_vec().iter().all(|&v| v == 0.0));

    let model = Vlm::<f64>::new(&cfg).unwrap();
    {
        let mut w = model.image.weight.data_mut();
        w.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..cfg.d_patch {
            w[i * cfg.d_patch + i] = 1.0;
        }
    }
    let img = random_image(&cfg, &mut ChaCha8Rng::seed_from_u64(8));
    let out = model.embed_image(&img).unwrap().to_vec();
    let pos = model.image.pos.to_vec();
    for i in 0..out.len() {
        assert_eq!(out[i], img.patch_features[i] as f64 + pos[i]);
    }

    let again = Vlm::<f64>::new(&cfg).unwrap();
    let m1 = Vlm::<f64>::new(&cfg).unwrap();
    assert!(m1.embed_image(&img).unwrap().bit_eq(&again.embed_image(&img).unwrap()));
    assert!(!m1.embed_image(&img).unwrap().requires_grad());

    let wrong = ToyImage::new(vec![0.0; 6], 2, 3).unwrap();
    assert!(matches!(m1.embed_image(&wrong), Err(Error::ShapeMismatch(_))));
}

#[test]
fn project_vision_trivial_cases() {
    let cfg = tiny_cfg();
    let model = Vlm::<f64>::new(&cfg).unwrap();
    let v = [0.5, -1.0, 2.0];
    let patches = Tensor::from_f64(&v.repeat(cfg.n_patches()), &[cfg.n_patches(), 3]).unwrap();
    let out = model.project_vision(&patches).unwrap();
    let mapped = Tensor::from_f64(&v, &[1, 3]).unwrap().matmul(&model.projector.weight).unwrap();
    let mapped = mapped.add(&model.projector.bias).unwrap().to_vec();
    for row in out.to_vec().chunks(cfg.d_model) {
        for (a, b) in row.iter().zip(&mapped) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    let full = VlmConfig { n_vision_tokens: cfg.n_patches(), ..cfg.clone() };
    let model = Vlm::<f64>::new(&full).unwrap();
    let patches = Tensor::<f64>::randn(&[8, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    let direct = patches.matmul(&model.projector.weight).unwrap().add(&model.projector.bias).unwrap();
    assert!(model.project_vision(&patches).unwrap().bit_eq(&direct));

    let err = model.projector.project(&Tensor::<f64>::zeros(&[6, 3]), &full);
    assert!(matches!(err, Err(Error::IndivisibleGrouping { .. })));
}

#[test]
fn project_vision_matches_pool_affine_loop() {
    let cfg = tiny_cfg();
    let model = Vlm::<f64>::new(&cfg).unwrap();
    scramble(&model, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let patches = Tensor::<f64>::randn(&[8, 3], 1.0, &mut rng);
    let out = model.project_vision(&patches).unwrap().to_vec();
    let (p, w, b) = (patches.to_vec(), model.projector.weight.to_vec(), model.projector.bias.to_vec());
    let group = 8 / cfg.n_vision_tokens;
    for t in 0..cfg.n_vision_tokens {
        let mut pooled = [0.0; 3];
        for r in t * group..(t + 1) * group {
            for e in 0..3 {
                pooled[e] += p[r * 3 + e];
            }
        }
        for e in &mut pooled {
            *e /= group as f64;
        }
        for j in 0..cfg.d_model {
            let mut acc = b[j];
            for e in 0..3 {
                acc += pooled[e] * w[e * cfg.d_model + j];
            }
            assert!((out[t * cfg.d_model + j] - acc).abs() <= 1e-12);
        }
    }
    model.project_vision(&patches).unwrap().sum().backward().unwrap();
    assert!(model.projector.weight.grad().is_some());
}

#[test]
fn embed_text_cases() {
    let cfg = tiny_cfg();
    let model = Vlm::<f64>::new(&cfg).unwrap();
    let e = model.embed_text(&[5, 5]).unwrap().to_vec();
    let pos = model.text.pos.to_vec();
    let d = cfg.d_model;
    for j in 0..d {
        assert!(((e[j] - pos[j]) - (e[d + j] - pos[d + j])).abs() < 1e-12);
    }
    let ids = [3u32, 0, 15, 7];
    let got = model.embed_text(&ids).unwrap().to_vec();
    let table = model.text.table.to_vec();
    for (i, &id) in ids.iter().enumerate() {
        for j in 0..d {
            assert_eq!(got[i * d + j], table[id as usize * d + j] + pos[i * d + j]);
        }
    }
    assert!(matches!(model.embed_text(&[]), Err(Error::EmptySequence)));
    assert!(matches!(model.embed_text(&[1; 7]), Err(Error::SequenceTooLong { len: 7, max: 6 })));
    assert!(matches!(model.embed_text(&[16]), Err(Error::InvalidTokenId { id: 16, vocab: 16 })));
}

#[test]
fn text_positions_continue_after_vision() {
    let cfg = tiny_cfg();
    let model = Vlm::<f64>::new(&cfg).unwrap();
    let expected = sinusoid_table(1, cfg.d_model, cfg.n_vision_tokens);
    assert_eq!(model.text.pos.to_vec()[..cfg.d_model], expected[..]);
}

#[test]
fn generate_greedy_cases() {
    let cfg = tiny_cfg();
    let model = Vlm::<f64>::new(&cfg).unwrap();
    let img = random_image(&cfg, &mut ChaCha8Rng::seed_from_u64(6));
    assert!(model.generate_greedy(&img, &[1], 0, 2).unwrap().is_empty());
    assert!(matches!(model.generate_greedy(&img, &[], 3, 2), Err(Error::EmptySequence)));

    // Collapse the final norm so every position emits the same logits, then
    // make token 3 the favourite.
    model.final_gain.data_mut().iter_mut().for_each(|v| *v = 0.0);
    {
        let mut table = model.text.table.data_mut();
        for v in &mut table[3 * cfg.d_model..4 * cfg.d_model] {
            *v *= 10.0;
        }
    }
    let row3: Vec<f64> = model.text.table.to_vec()[3 * cfg.d_model..4 * cfg.d_model].to_vec();
    model.final_bias.data_mut().copy_from_slice(&row3);
    assert_eq!(model.generate_greedy(&img, &[1], 4, 2).unwrap(), vec![3, 3, 3, 3]);
    // Capped by the text budget.
    assert_eq!(model.generate_greedy(&img, &[1, 1, 1, 1], 10, 2).unwrap(), vec![3, 3]);
    // Stops at the end-of-sequence id, which is included.
    assert_eq!(model.generate_greedy(&img, &[1], 4, 3).unwrap(), vec![3]);
}

#[test]
fn checkpoint_roundtrip_preserves_outputs() {
    let cfg = tiny_cfg();
    let model = Vlm::<f32>::new(&cfg).unwrap();
    let ck = model.to_checkpoint(Precision::F32);
    let bytes = ck.to_bytes();
    let back = Vlm::<f32>::from_checkpoint(&crate::checkpoint::Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    for (a, b) in model.named_tensors().iter().zip(back.named_tensors()) {
        assert_eq!(a.name, b.name);
        assert!(a.tensor.bit_eq(&b.tensor), "{}", a.name);
    }
    assert_eq!(back.cfg, cfg);
}

#[test]
fn identity_layers_pass_input_through() {
    let cfg = tiny_cfg();
    let model = Vlm::<f64>::new(&cfg).unwrap();
    model.zero_residual_branches();
    let img = random_image(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
    let trace = model.forward_batch(&[img], &[vec![1, 2]], false).unwrap();
    for h in &trace.hidden[1..] {
        assert!(h.bit_eq(&trace.hidden[0]));
    }
}

#[test]
fn deep_clone_is_independent() {
    let model = Vlm::<f64>::new(&tiny_cfg()).unwrap();
    let copy = model.deep_clone().unwrap();
    copy.final_bias.data_mut()[0] = 9.0;
    assert_eq!(model.final_bias.to_vec()[0], 0.0);
    assert!(copy.blocks[1].wq.bit_eq(&model.blocks[1].wq));
}

#[test]
fn parameter_groups() {
    let model = Vlm::<f32>::new(&tiny_cfg()).unwrap();
    let named = model.named_tensors();
    assert_eq!(named.iter().filter(|t| t.group == ParamGroup::Frozen).count(), 4);
    assert_eq!(named.iter().filter(|t| t.group == ParamGroup::Projector).count(), 2);
    assert!(model.frozen().iter().all(|t| !t.tensor.requires_grad()));
    assert!(model.trainable().iter().all(|t| t.tensor.requires_grad()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn attention_is_causal_and_normalised(seed in 0u64..1000, n_text in 1usize..6) {
        let cfg = VlmConfig { seed, ..tiny_cfg() };
        let model = Vlm::<f64>::new(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = random_image(&cfg, &mut rng);
        let ids: Vec<u32> = (0..n_text).map(|_| rng.random_range(0..16)).collect();
        let trace = model.forward_batch(&[img], &[ids], true).unwrap().sample(0).unwrap();
        let l = cfg.n_vision_tokens + n_text;
        for attn in [trace.attn_first, trace.attn_last.unwrap()] {
            let a = attn.to_vec();
            for h in 0..cfg.n_heads {
                for i in 0..l {
                    let row = &a[(h * l + i) * l..(h * l + i + 1) * l];
                    prop_assert!(row[i + 1..].iter().all(|&v| v == 0.0));
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
        }
    }
}
