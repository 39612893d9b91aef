//! Synthetic stand-ins for transcription, speaker and utterance-class tasks.
//!
//! Every sequence is drawn from one generative "world": a token path
//! (content), a per-speaker offset, and a class envelope modulating the
//! whole sequence. The task kind only decides which factor is the label;
//! the others stay present as nuisance, scaled by `nuisance`.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::backbone::PretrainSequence;
use crate::heads::collapse;
use crate::model::Target;
use crate::rng::{normal, SeedStream};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// CTC transcription of the token path.
    FrameContent,
    /// Which speaker offset was added.
    UtteranceSpeaker,
    /// Which temporal envelope modulates the sequence.
    UtteranceClass,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::FrameContent, TaskKind::UtteranceSpeaker, TaskKind::UtteranceClass];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::FrameContent => "frame_content",
            TaskKind::UtteranceSpeaker => "utterance_speaker",
            TaskKind::UtteranceClass => "utterance_class",
        }
    }

    /// Name of the (lower is better) evaluation metric.
    pub fn metric_name(self) -> &'static str {
        match self {
            TaskKind::FrameContent => "wer",
            TaskKind::UtteranceSpeaker => "eer",
            TaskKind::UtteranceClass => "1-wa",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").to_ascii_lowercase().as_str() {
            "frame_content" | "content" | "asr" => Ok(TaskKind::FrameContent),
            "utterance_speaker" | "speaker" | "asv" => Ok(TaskKind::UtteranceSpeaker),
            "utterance_class" | "class" | "er" => Ok(TaskKind::UtteranceClass),
            other => Err(Error::Parse(format!("unknown task kind {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTaskSpec {
    pub kind: TaskKind,
    pub input_dim: usize,
    /// Non-blank tokens.
    pub vocab: usize,
    pub num_speakers: usize,
    pub num_classes: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Standard deviation of per-frame Gaussian noise.
    pub noise: f64,
    /// Scale of the factors that are not this task's label.
    pub nuisance: f64,
    pub speaker_scale: f64,
    pub envelope_depth: f64,
    /// Seeds the codebooks (tokens, speakers, envelopes), shared by every
    /// task drawn from the same world.
    pub world_seed: u64,
    pub train_size: usize,
    pub test_size: usize,
    /// Held-out utterances used as the s-norm cohort.
    pub cohort_size: usize,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            kind: TaskKind::FrameContent,
            input_dim: 16,
            vocab: 6,
            num_speakers: 8,
            num_classes: 4,
            min_len: 20,
            max_len: 40,
            noise: 0.3,
            nuisance: 1.0,
            speaker_scale: 0.6,
            envelope_depth: 0.6,
            world_seed: 0,
            train_size: 256,
            test_size: 64,
            cohort_size: 32,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn new(kind: TaskKind) -> Self {
        SyntheticTaskSpec {
            kind,
            ..SyntheticTaskSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m));
        if self.input_dim == 0 || self.vocab == 0 || self.num_speakers == 0 || self.num_classes == 0 {
            return bad("task sizes must be positive");
        }
        if self.min_len < 4 || self.min_len > self.max_len {
            return bad("sequence lengths must satisfy 4 <= min_len <= max_len");
        }
        if !(self.noise >= 0.0 && self.nuisance >= 0.0 && self.speaker_scale >= 0.0 && self.envelope_depth >= 0.0) {
            return bad("noise and scales must be non-negative");
        }
        if self.envelope_depth >= 1.0 {
            return bad("envelope_depth must be below 1");
        }
        if self.train_size == 0 || self.test_size == 0 {
            return bad("train and test sets must be non-empty");
        }
        Ok(())
    }

    /// Number of output classes of the classification head (or CTC vocab).
    pub fn label_count(&self) -> usize {
        match self.kind {
            TaskKind::FrameContent => self.vocab,
            TaskKind::UtteranceSpeaker => self.num_speakers,
            TaskKind::UtteranceClass => self.num_classes,
        }
    }
}

/// Fixed codebooks of one world.
#[derive(Clone, Debug)]
pub struct World {
    /// `vocab + 1` rows; row 0 (silence) is all zeros.
    pub tokens: Vec<Vec<f64>>,
    pub speakers: Vec<Vec<f64>>,
    /// (cycles per sequence, phase) per class.
    pub envelopes: Vec<(f64, f64)>,
}

impl World {
    pub fn new(spec: &SyntheticTaskSpec) -> Self {
        let seeds = SeedStream::new(spec.world_seed);
        let mut r = seeds.rng("tokens");
        let d = spec.input_dim;
        let mut tokens = vec![vec![0.0; d]];
        for _ in 0..spec.vocab {
            tokens.push((0..d).map(|_| normal(&mut r)).collect());
        }
        let mut r = seeds.rng("speakers");
        let speakers = (0..spec.num_speakers)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| normal(&mut r)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.iter().map(|x| x / n * (d as f64).sqrt() * spec.speaker_scale).collect()
            })
            .collect();
        let mut r = seeds.rng("envelopes");
        let envelopes = (0..spec.num_classes)
            .map(|c| (c as f64 + 1.0, r.random::<f64>() * std::f64::consts::TAU))
            .collect();
        World {
            tokens,
            speakers,
            envelopes,
        }
    }

    pub fn envelope(&self, class: usize, t: usize, len: usize, depth: f64) -> f64 {
        let (cycles, phase) = self.envelopes[class];
        1.0 + depth * (std::f64::consts::TAU * cycles * t as f64 / len as f64 + phase).sin()
    }

    /// Nearest codebook row (silence included) for one frame.
    pub fn nearest_token(&self, frame: &[f64]) -> usize {
        let dist = |v: &[f64]| v.iter().zip(frame).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        (0..self.tokens.len())
            .min_by(|&a, &b| dist(&self.tokens[a]).total_cmp(&dist(&self.tokens[b])))
            .expect("non-empty codebook")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub features: Tensor<f32>,
    pub target: Target,
    /// Per-frame token path (0 = silence).
    pub path: Vec<usize>,
    pub speaker: usize,
    pub class: usize,
}

impl Example {
    pub fn content(&self) -> Vec<usize> {
        collapse(&self.path)
    }
}

#[derive(Clone, Debug)]
pub struct TaskData {
    pub spec: SyntheticTaskSpec,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    pub cohort: Vec<Example>,
}

/// Frame labels: silence gaps of 1–2 frames around token runs of 2–5.
fn draw_path<R: Rng>(r: &mut R, len: usize, vocab: usize) -> Vec<usize> {
    let mut path = Vec::with_capacity(len);
    while path.len() < len {
        let gap = r.random_range(1..=2);
        path.extend(std::iter::repeat_n(0, gap));
        let tok = r.random_range(1..=vocab);
        let run = r.random_range(2..=5);
        path.extend(std::iter::repeat_n(tok, run));
    }
    path.truncate(len);
    path
}

/// Draws one sequence from the world.
pub fn draw_example<R: Rng>(spec: &SyntheticTaskSpec, world: &World, r: &mut R, id: String) -> Example {
    let len = r.random_range(spec.min_len..=spec.max_len);
    let path = draw_path(r, len, spec.vocab);
    let speaker = r.random_range(0..spec.num_speakers);
    let class = r.random_range(0..spec.num_classes);
    let (content_w, speaker_w, class_w) = match spec.kind {
        TaskKind::FrameContent => (1.0, spec.nuisance, spec.nuisance),
        TaskKind::UtteranceSpeaker => (spec.nuisance, 1.0, spec.nuisance),
        TaskKind::UtteranceClass => (spec.nuisance, spec.nuisance, 1.0),
    };
    let d = spec.input_dim;
    let mut data = Vec::with_capacity(len * d);
    for (t, &tok) in path.iter().enumerate() {
        let env = 1.0 + class_w * (world.envelope(class, t, len, spec.envelope_depth) - 1.0);
        for j in 0..d {
            let x = env * (content_w * world.tokens[tok][j] + speaker_w * world.speakers[speaker][j])
                + spec.noise * normal(r);
            data.push(x as f32);
        }
    }
    let target = match spec.kind {
        TaskKind::FrameContent => Target::Sequence(collapse(&path)),
        TaskKind::UtteranceSpeaker => Target::Class(speaker),
        TaskKind::UtteranceClass => Target::Class(class),
    };
    Example {
        id,
        features: Tensor::new(vec![len, d], data).expect("finite features"),
        target,
        path,
        speaker,
        class,
    }
}

/// Train, test and cohort splits, reproducible from `(spec, seed)`.
pub fn generate_task(spec: &SyntheticTaskSpec, seed: u64) -> Result<TaskData> {
    spec.validate()?;
    let world = World::new(spec);
    let seeds = SeedStream::new(seed).split(spec.kind.name());
    let draw = |label: &str, n: usize| {
        let mut r = seeds.rng(label);
        (0..n)
            .map(|i| draw_example(spec, &world, &mut r, format!("{label}{i:04}")))
            .collect::<Vec<_>>()
    };
    Ok(TaskData {
        spec: spec.clone(),
        train: draw("train", spec.train_size),
        test: draw("test", spec.test_size),
        cohort: draw("cohort", spec.cohort_size),
    })
}

/// Clean content frames of a token path: codebook rows with no speaker
/// offset, envelope or noise.
pub fn content_frames(world: &World, path: &[usize]) -> Tensor<f32> {
    let d = world.tokens[0].len();
    let data = path.iter().flat_map(|&t| world.tokens[t].iter().map(|&v| v as f32)).collect();
    Tensor::new(vec![path.len(), d], data).expect("path-sized buffer")
}

/// Unlabelled sequences with every factor at full strength, for
/// pretraining the backbone. Masked frames are regressed onto their clean
/// content, so like unit-prediction objectives the pretext task rewards
/// content and is indifferent to speaker and envelope.
pub fn pretraining_corpus(spec: &SyntheticTaskSpec, size: usize, seed: u64) -> Result<Vec<PretrainSequence>> {
    spec.validate()?;
    let world_spec = SyntheticTaskSpec {
        nuisance: 1.0,
        ..spec.clone()
    };
    let world = World::new(&world_spec);
    let mut r = SeedStream::new(seed).rng("pretrain_corpus");
    (0..size)
        .map(|i| {
            let ex = draw_example(&world_spec, &world, &mut r, format!("pre{i}"));
            PretrainSequence::new(ex.features, content_frames(&world, &ex.path))
        })
        .collect()
}
