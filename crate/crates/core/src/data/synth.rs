//! Procedural colored-shape scenes with templated questions.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::vocab::*;
use super::{write_dataset, Sample};
use crate::error::{Error, Result};
use crate::vlm::ToyImage;

/// Patches per slot; a slot is one pooling group of the default model.
pub const PATCHES_PER_SLOT: usize = 4;
pub const N_PATCHES: usize = N_SLOTS * PATCHES_PER_SLOT;
pub const D_PATCH: usize = 16;
pub const PATCH_GRID: (usize, usize) = (8, 8);

const RENDER_SEED: u64 = 0xa11_9e;
const NOISE_STD: f64 = 0.25;
const MAX_OBJECTS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Caption,
    AttributeQuery,
    PositionQuery,
}

/// Relative frequency of each task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskMix {
    pub caption: f64,
    pub attribute_query: f64,
    pub position_query: f64,
}

impl Default for TaskMix {
    fn default() -> Self {
        TaskMix { caption: 1.0, attribute_query: 1.0, position_query: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    /// Samples drawn before over-long prompts are dropped.
    pub n_samples: usize,
    pub seed: u64,
    pub max_prompt_tokens: usize,
    /// Upper bound on random filler tokens padded into each prompt.
    pub max_filler: usize,
    pub mix: TaskMix,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec { n_samples: 1000, seed: 0, max_prompt_tokens: 16, max_filler: 6, mix: TaskMix::default() }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let w = [self.mix.caption, self.mix.attribute_query, self.mix.position_query];
        if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("task mix weights must be nonnegative with a positive sum".into()));
        }
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Object {
    pub slot: usize,
    pub shape: usize,
    pub color: usize,
}

/// Objects sorted by slot; shapes are distinct within a scene.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scene {
    pub objects: Vec<Object>,
}

/// Fixed prototypes turning scenes into patch features and back.
#[derive(Debug, Clone)]
pub struct Renderer {
    /// `[shape][patch_in_slot][D_PATCH]`
    shape_proto: Vec<Vec<Vec<f64>>>,
    /// `[color][D_PATCH]`
    color_proto: Vec<Vec<f64>>,
}

impl Default for Renderer {
    fn default() -> Self {
        Self::new()
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

impl Renderer {
    pub fn new() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(RENDER_SEED);
        let mut vec = |n: usize| (0..n).map(|_| gauss(&mut rng)).collect::<Vec<f64>>();
        let shape_proto = (0..N_SHAPES).map(|_| (0..PATCHES_PER_SLOT).map(|_| vec(D_PATCH)).collect()).collect();
        let color_proto = (0..N_COLORS).map(|_| vec(D_PATCH)).collect();
        Renderer { shape_proto, color_proto }
    }

    fn template(&self, obj: Option<(usize, usize)>, j: usize, e: usize) -> f64 {
        match obj {
            Some((shape, color)) => self.shape_proto[shape][j][e] + self.color_proto[color][e],
            None => 0.0,
        }
    }

    /// Noisy features, rounded to three decimals so they survive a text roundtrip.
    pub fn render(&self, scene: &Scene, rng: &mut ChaCha8Rng) -> ToyImage {
        let mut data = Vec::with_capacity(N_PATCHES * D_PATCH);
        for slot in 0..N_SLOTS {
            let obj = scene.objects.iter().find(|o| o.slot == slot).map(|o| (o.shape, o.color));
            for j in 0..PATCHES_PER_SLOT {
                for e in 0..D_PATCH {
                    let v = self.template(obj, j, e) + NOISE_STD * gauss(rng);
                    data.push(((v * 1000.0).round() / 1000.0) as f32);
                }
            }
        }
        ToyImage { n_patches: N_PATCHES, d_patch: D_PATCH, patch_features: data }
    }

    /// Nearest-template reading of every slot.
    pub fn decode(&self, img: &ToyImage) -> Result<Scene> {
        if img.n_patches != N_PATCHES || img.d_patch != D_PATCH {
            return Err(Error::shape(format!("renderer expects {N_PATCHES}x{D_PATCH} images")));
        }
        let mut objects = Vec::new();
        for slot in 0..N_SLOTS {
            let patch = |j: usize, e: usize| img.patch_features[(slot * PATCHES_PER_SLOT + j) * D_PATCH + e] as f64;
            let dist = |obj: Option<(usize, usize)>| {
                let mut d = 0.0;
                for j in 0..PATCHES_PER_SLOT {
                    for e in 0..D_PATCH {
                        let x = patch(j, e) - self.template(obj, j, e);
                        d += x * x;
                    }
                }
                d
            };
            let mut best = (dist(None), None);
            for shape in 0..N_SHAPES {
                for color in 0..N_COLORS {
                    let d = dist(Some((shape, color)));
                    if d < best.0 {
                        best = (d, Some((shape, color)));
                    }
                }
            }
            if let Some((shape, color)) = best.1 {
                objects.push(Object { slot, shape, color });
            }
        }
        Ok(Scene { objects })
    }
}

fn random_scene(rng: &mut ChaCha8Rng) -> Scene {
    let n = rng.random_range(1..=MAX_OBJECTS);
    let mut slots: Vec<usize> = (0..N_SLOTS).collect();
    slots.shuffle(rng);
    let mut shapes: Vec<usize> = (0..N_SHAPES).collect();
    shapes.shuffle(rng);
    let mut objects: Vec<Object> = (0..n)
        .map(|i| Object { slot: slots[i], shape: shapes[i], color: rng.random_range(0..N_COLORS) })
        .collect();
    objects.sort_by_key(|o| o.slot);
    Scene { objects }
}

/// Question tokens (without the leading BOS or filler) and the answer.
pub fn question_and_answer(task: Task, scene: &Scene, target: usize) -> (Vec<u32>, Vec<u32>) {
    let obj = scene.objects[target];
    match task {
        Task::Caption => {
            let mut answer = Vec::new();
            for o in &scene.objects {
                answer.extend([color_token(o.color), shape_token(o.shape), position_token(o.slot)]);
            }
            answer.push(EOS);
            (vec![DESCRIBE, THE, IMAGE, SEP], answer)
        }
        Task::AttributeQuery => (
            vec![WHAT, COLOR, IS, THE, shape_token(obj.shape), QUESTION, SEP],
            vec![color_token(obj.color), EOS],
        ),
        Task::PositionQuery => (
            vec![WHERE, IS, THE, color_token(obj.color), shape_token(obj.shape), QUESTION, SEP],
            vec![position_token(obj.slot), EOS],
        ),
    }
}

/// Prompt = BOS, random filler words, optional PLEASE, then the question.
fn build_prompt(question: &[u32], n_filler: usize, please: bool, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let mut prompt = vec![BOS];
    prompt.extend((0..n_filler).map(|_| FILLER_BASE + rng.random_range(0..N_FILLER)));
    if please {
        prompt.push(PLEASE);
    }
    prompt.extend_from_slice(question);
    prompt
}

/// Task of a prompt, read from its question word.
pub fn task_of(prompt: &[u32]) -> Option<Task> {
    prompt.iter().find_map(|&t| match t {
        DESCRIBE => Some(Task::Caption),
        WHAT => Some(Task::AttributeQuery),
        WHERE => Some(Task::PositionQuery),
        _ => None,
    })
}

/// Deterministic sample list. Prompts longer than `max_prompt_tokens` are dropped.
pub fn synth_samples(spec: &SynthSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let renderer = Renderer::new();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let weights = [spec.mix.caption, spec.mix.attribute_query, spec.mix.position_query];
    let total: f64 = weights.iter().sum();
    let mut out = Vec::new();
    let mut dropped = 0usize;
    for _ in 0..spec.n_samples {
        let scene = random_scene(&mut rng);
        let image = renderer.render(&scene, &mut rng);
        let mut u = rng.random_range(0.0..total);
        let mut task = Task::PositionQuery;
        for (t, w) in [Task::Caption, Task::AttributeQuery, Task::PositionQuery].into_iter().zip(weights) {
            if u < w {
                task = t;
                break;
            }
            u -= w;
        }
        let target = rng.random_range(0..scene.objects.len());
        let (question, answer) = question_and_answer(task, &scene, target);
        let n_filler = rng.random_range(0..=spec.max_filler);
        let please = rng.random_bool(0.5);
        let prompt = build_prompt(&question, n_filler, please, &mut rng);
        if prompt.len() > spec.max_prompt_tokens {
            dropped += 1;
            continue;
        }
        out.push(Sample { image, prompt_ids: prompt, response_ids: answer });
    }
    if out.is_empty() {
        log::warn!("all {} generated samples exceeded max_prompt_tokens={}", spec.n_samples, spec.max_prompt_tokens);
    } else if dropped > 0 {
        log::info!("dropped {dropped} samples with over-long prompts");
    }
    Ok(out)
}

/// Generate a dataset file. Returns the number of samples written.
pub fn synth_generate(spec: &SynthSpec, path: &Path) -> Result<usize> {
    let samples = synth_samples(spec)?;
    write_dataset(path, &samples, Some(spec.seed))?;
    Ok(samples.len())
}

/// Recover every answer from the image alone and compare with the label.
pub fn self_check(samples: &[Sample]) -> Result<usize> {
    let renderer = Renderer::new();
    let mut failures = 0;
    for s in samples {
        let scene = renderer.decode(&s.image)?;
        let ok = match task_of(&s.prompt_ids) {
            Some(Task::Caption) => {
                let (_, answer) = question_and_answer(Task::Caption, &scene, 0);
                answer == s.response_ids
            }
            Some(Task::AttributeQuery) => {
                let shape = s.prompt_ids[s.prompt_ids.len() - 3];
                scene.objects.iter().any(|o| {
                    shape_token(o.shape) == shape && s.response_ids == [color_token(o.color), EOS]
                })
            }
            Some(Task::PositionQuery) => {
                let (color, shape) = (s.prompt_ids[s.prompt_ids.len() - 4], s.prompt_ids[s.prompt_ids.len() - 3]);
                scene.objects.iter().any(|o| {
                    color_token(o.color) == color
                        && shape_token(o.shape) == shape
                        && s.response_ids == [position_token(o.slot), EOS]
                })
            }
            None => false,
        };
        if !ok {
            failures += 1;
        }
    }
    Ok(failures)
}
