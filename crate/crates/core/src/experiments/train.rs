//! Single downstream runs: configuration, pretraining, the training loop
//! and task evaluation.

use std::path::PathBuf;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tasks::{generate_task, pretraining_corpus, Example, SyntheticTaskSpec, TaskData, TaskKind};
use crate::adapters::{count_learnable_params, AdaptationStrategy, LAdapterConfig, LAdapterVariant, ParamReport};
use crate::autodiff::{Adam, Graph, ParamStore};
use crate::backbone::{pretrain_toy_with_eval, Backbone, BackboneConfig, Checkpoint, PretrainOptions, PretrainReport};
use crate::heads::{greedy_decode, HeadConfig};
use crate::metrics::{
    adaptive_s_norm, corpus_wer, cosine, default_top_k, eer, weighted_accuracy, MetricReport, TrialScore,
};
use crate::model::{AdaptedModel, ModelConfig};
use crate::nn::Activation;
use crate::rng::SeedStream;
use crate::{Error, Result};

/// Learning rates considered by grid search.
pub const LR_GRID: [f64; 5] = [1e-3, 5e-4, 1e-4, 5e-5, 1e-5];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    #[default]
    Toy,
    WavlmBase,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "toy" => Ok(Preset::Toy),
            "wavlm-base" => Ok(Preset::WavlmBase),
            other => Err(Error::Parse(format!("unknown preset {other}"))),
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Preset::Toy => "toy",
            Preset::WavlmBase => "wavlm-base",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub mask_prob: f64,
    pub corpus_size: usize,
    pub held_out_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 800,
            lr: 2e-3,
            batch_size: 8,
            mask_prob: 0.15,
            corpus_size: 256,
            held_out_size: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub preset: Preset,
    /// Encoder depth of the toy preset.
    pub num_layers: usize,
    pub strategy: AdaptationStrategy,
    pub variant: LAdapterVariant,
    /// Adapter activation; by default GELU for content and ReLU otherwise.
    pub activation: Option<Activation>,
    pub task: SyntheticTaskSpec,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    /// Restricts `lr` to [`LR_GRID`].
    pub grid_mode: bool,
    /// Training examples scored before and after training.
    pub probe_size: usize,
    pub pretrain: PretrainConfig,
    /// Load the frozen backbone from here instead of pretraining.
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: Preset::Toy,
            num_layers: 4,
            strategy: AdaptationStrategy::proposed_full(4),
            variant: LAdapterVariant::Base,
            activation: None,
            task: SyntheticTaskSpec::default(),
            steps: 2000,
            lr: 1e-3,
            batch_size: 8,
            seeds: vec![0],
            grid_mode: false,
            probe_size: 32,
            pretrain: PretrainConfig::default(),
            checkpoint: None,
            out: None,
        }
    }
}

impl RunConfig {
    pub fn backbone_config(&self) -> BackboneConfig {
        match self.preset {
            Preset::Toy => BackboneConfig {
                num_layers: self.num_layers,
                input_dim: self.task.input_dim,
                ..BackboneConfig::toy()
            },
            Preset::WavlmBase => BackboneConfig::wavlm_base(),
        }
    }

    pub fn head_config(&self) -> HeadConfig {
        let d = self.backbone_config().d_model;
        match self.task.kind {
            TaskKind::FrameContent => HeadConfig::Ctc { vocab: self.task.vocab },
            _ => HeadConfig::Cls {
                hidden: d,
                classes: self.task.label_count(),
            },
        }
    }

    pub fn activation(&self) -> Activation {
        self.activation.unwrap_or(match self.task.kind {
            TaskKind::FrameContent => Activation::Gelu,
            _ => Activation::Relu,
        })
    }

    pub fn model_config(&self) -> ModelConfig {
        let base = match self.preset {
            Preset::Toy => {
                let mut c = ModelConfig::toy(self.strategy, self.head_config());
                c.backbone = self.backbone_config();
                c.l_adapter = LAdapterConfig::toy(self.variant);
                c
            }
            Preset::WavlmBase => ModelConfig::wavlm_base(self.strategy, self.variant, self.head_config()),
        };
        base.with_activation(self.activation())
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        let mc = self.model_config();
        mc.backbone.validate()?;
        mc.strategy.validate(mc.backbone.num_layers)?;
        mc.l_adapter.validate(mc.backbone.d_model)?;
        if self.task.max_len > mc.backbone.max_seq_len {
            return Err(Error::config("task sequences exceed the backbone max_seq_len"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("lr must be positive"));
        }
        if self.grid_mode && !LR_GRID.contains(&self.lr) {
            return Err(Error::config(format!("lr {} is not in the grid {LR_GRID:?}", self.lr)));
        }
        if self.batch_size == 0 || self.probe_size == 0 {
            return Err(Error::config("batch_size and probe_size must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seed list is empty"));
        }
        Ok(())
    }

    /// Loads a JSON or TOML file (by extension; JSON otherwise).
    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::Parse(e.to_string()))
        } else {
            Ok(serde_json::from_str(&text)?)
        }
    }
}

/// A frozen backbone ready for downstream runs.
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub backbone: Backbone,
    pub store: ParamStore<f32>,
    pub report: Option<PretrainReport>,
}

/// Pretrains a toy backbone on unlabelled sequences from the task world,
/// or loads one from `cfg.checkpoint`.
pub fn pretrain(cfg: &RunConfig) -> Result<Pretrained> {
    let bb_cfg = cfg.backbone_config();
    if let Some(path) = &cfg.checkpoint {
        let ck = Checkpoint::load(path)?;
        let (backbone, mut store) = Backbone::init::<f32>(ck.config.clone().unwrap_or(bb_cfg), 0)?;
        if ck.load_into(&mut store)? != store.len() {
            return Err(Error::config("checkpoint does not cover every backbone parameter"));
        }
        return Ok(Pretrained {
            backbone,
            store,
            report: None,
        });
    }
    if cfg.preset != Preset::Toy {
        return Err(Error::config("only the toy preset can be trained"));
    }
    let p = &cfg.pretrain;
    let corpus = pretraining_corpus(&cfg.task, p.corpus_size, p.seed)?;
    let held_out = pretraining_corpus(&cfg.task, p.held_out_size, p.seed.wrapping_add(1))?;
    let opts = PretrainOptions {
        steps: p.steps,
        lr: p.lr,
        batch_size: p.batch_size,
        mask_prob: p.mask_prob,
        seed: p.seed,
    };
    let (backbone, store, report) = pretrain_toy_with_eval(bb_cfg, &corpus, &held_out, &opts)?;
    Ok(Pretrained {
        backbone,
        store,
        report: Some(report),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub task: TaskKind,
    pub strategy: AdaptationStrategy,
    pub variant: LAdapterVariant,
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    pub num_layers: usize,
    /// Mean batch loss per step; stops at the first non-finite step.
    pub losses: Vec<f64>,
    /// Mean loss over the fixed probe set before and after training.
    pub initial_loss: f64,
    pub final_loss: Option<f64>,
    pub initial_metric: MetricReport,
    pub final_metric: Option<MetricReport>,
    pub params: ParamReport,
    /// Normalized layer weights, bottom to top.
    pub layer_weights: Option<Vec<f64>>,
    /// 1-based encoder layer index of each weight.
    pub weighted_layers: Vec<usize>,
    /// `Σ l·w_l / L`.
    pub centroid: Option<f64>,
    pub frozen_digest: String,
    pub diverged: bool,
    pub wall_clock_secs: f64,
}

impl RunReport {
    /// Probe loss decreased and stayed finite.
    pub fn converged(&self) -> bool {
        !self.diverged && self.final_loss.is_some_and(|f| f.is_finite() && f < self.initial_loss)
    }

    pub fn final_value(&self) -> Option<f64> {
        self.final_metric.as_ref().map(|m| m.value)
    }
}

/// `Σ l·w_l / L` for 1-based layer indices.
pub fn weight_centroid(layers: &[usize], weights: &[f64], num_layers: usize) -> f64 {
    layers.iter().zip(weights).map(|(&l, &w)| l as f64 * w).sum::<f64>() / num_layers as f64
}

fn mean_loss(model: &AdaptedModel, store: &ParamStore<f32>, examples: &[&Example]) -> Result<f64> {
    let mut total = 0.0;
    for ex in examples {
        let mut g = Graph::new();
        let l = model.loss(&mut g, store, &ex.features, &ex.target)?;
        total += g.value(l).item() as f64;
    }
    Ok(total / examples.len() as f64)
}

/// Task metric on the test split; lower is better for every task.
pub fn evaluate(model: &AdaptedModel, store: &ParamStore<f32>, data: &TaskData) -> Result<MetricReport> {
    let kind = data.spec.kind;
    let mut report = MetricReport {
        task: kind.name().to_string(),
        metric: kind.metric_name().to_string(),
        value: f64::NAN,
        aux: Default::default(),
    };
    match kind {
        TaskKind::FrameContent => {
            let mut pairs = Vec::with_capacity(data.test.len());
            for ex in &data.test {
                let mut g = Graph::new();
                let logits = model.ctc_logits(&mut g, store, &ex.features)?;
                pairs.push((ex.content(), greedy_decode(g.value(logits))));
            }
            report.value = corpus_wer(&pairs)?;
        }
        TaskKind::UtteranceClass => {
            let mut pred = Vec::with_capacity(data.test.len());
            for ex in &data.test {
                let mut g = Graph::new();
                let out = model.classify(&mut g, store, &ex.features)?;
                pred.push(argmax(g.value(out.logits).data()));
            }
            let gold: Vec<usize> = data.test.iter().map(|e| e.class).collect();
            let wa = weighted_accuracy(&pred, &gold, data.spec.num_classes)?;
            report.value = 1.0 - wa;
            report.aux.insert("accuracy".into(), crate::metrics::accuracy(&pred, &gold)?);
        }
        TaskKind::UtteranceSpeaker => {
            let embed = |exs: &[Example]| -> Result<Vec<Vec<f64>>> {
                exs.iter()
                    .map(|ex| {
                        let mut g = Graph::new();
                        let out = model.classify(&mut g, store, &ex.features)?;
                        Ok(g.value(out.embedding).to_f64_vec())
                    })
                    .collect()
            };
            let test = embed(&data.test)?;
            let cohort = embed(&data.cohort)?;
            let k = default_top_k(cohort.len());
            let cohort_scores: Vec<Vec<f64>> = test.iter().map(|e| cohort.iter().map(|c| cosine(e, c)).collect()).collect();
            let mut raw = Vec::new();
            let mut normed = Vec::new();
            for i in 0..test.len() {
                for j in i + 1..test.len() {
                    let same = data.test[i].speaker == data.test[j].speaker;
                    let s = cosine(&test[i], &test[j]);
                    raw.push(TrialScore::new(&data.test[i].id, &data.test[j].id, s, same));
                    if let Ok(n) = adaptive_s_norm(s, &cohort_scores[i], &cohort_scores[j], k) {
                        normed.push(TrialScore::new(&data.test[i].id, &data.test[j].id, n, same));
                    }
                }
            }
            let raw_eer = eer(&raw)?.rate;
            report.aux.insert("eer_raw".into(), raw_eer);
            // A degenerate cohort (e.g. collapsed embeddings) leaves raw scores.
            report.value = if normed.len() == raw.len() { eer(&normed)?.rate } else { raw_eer };
        }
    }
    Ok(report)
}

fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. })
}

/// A finished run together with the trained model.
#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub report: RunReport,
    pub model: AdaptedModel,
    /// Parameters before training (backbone plus freshly attached adapters).
    pub initial: ParamStore<f32>,
    pub store: ParamStore<f32>,
}

/// One downstream run on an already generated task. Non-finite losses end
/// the run early and are flagged in the report rather than returned as
/// errors.
pub fn train_on(cfg: &RunConfig, pre: &Pretrained, data: &TaskData, seed: u64) -> Result<RunReport> {
    Ok(train_model(cfg, pre, data, seed)?.report)
}

/// [`train_on`] that also returns the model and its parameters.
pub fn train_model(cfg: &RunConfig, pre: &Pretrained, data: &TaskData, seed: u64) -> Result<TrainedRun> {
    cfg.validate()?;
    let started = Instant::now();
    let mc = cfg.model_config();
    let (model, mut store, _) = AdaptedModel::build(&pre.backbone, &pre.store, mc.clone(), seed)?;

    let params = count_learnable_params(&mc)?;
    if params.trainable != store.trainable_numel() || params.total != store.total_numel() {
        return Err(Error::config(format!(
            "parameter accounting mismatch: closed form {}/{} vs enumerated {}/{}",
            params.trainable,
            params.total,
            store.trainable_numel(),
            store.total_numel()
        )));
    }

    let seeds = SeedStream::new(seed).split("train");
    let probe: Vec<&Example> = data.train.iter().take(cfg.probe_size).collect();
    let initial_loss = mean_loss(&model, &store, &probe)?;
    let initial_metric = evaluate(&model, &store, data)?;
    let digest = store.frozen_digest();
    let initial = store.clone();

    let mut opt = Adam::new(cfg.lr);
    let mut rng = seeds.rng("batches");
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut diverged = false;
    for _ in 0..cfg.steps {
        let mut g = Graph::new();
        let step = (|| -> Result<f64> {
            let mut terms = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                let ex = &data.train[rng.random_range(0..data.train.len())];
                terms.push(model.loss(&mut g, &store, &ex.features, &ex.target)?);
            }
            let loss = g.mean_scalars(&terms)?;
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite { op: "train_loss" });
            }
            let grads = g.backward(loss)?;
            opt.step(&mut store, &grads);
            Ok(value)
        })();
        match step {
            Ok(v) => losses.push(v),
            Err(e) if is_divergence(&e) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        }
    }

    if store.frozen_digest() != digest {
        return Err(Error::config("frozen parameters changed during training"));
    }

    let (final_loss, final_metric) = if diverged {
        (None, None)
    } else {
        let fl = match mean_loss(&model, &store, &probe) {
            Ok(v) if v.is_finite() => Some(v),
            Ok(_) => None,
            Err(e) if is_divergence(&e) => None,
            Err(e) => return Err(e),
        };
        let fm = match evaluate(&model, &store, data) {
            Ok(m) => Some(m),
            Err(e) if is_divergence(&e) => None,
            Err(e) => return Err(e),
        };
        (fl, fm)
    };
    let diverged = diverged || final_loss.is_none();

    let layer_weights = model.layer_weights(&store);
    let weighted_layers = model.weighted_layers();
    let centroid = layer_weights
        .as_ref()
        .map(|w| weight_centroid(&weighted_layers, w, mc.backbone.num_layers));
    let report = RunReport {
        task: cfg.task.kind,
        strategy: cfg.strategy,
        variant: cfg.variant,
        lr: cfg.lr,
        steps: cfg.steps,
        seed,
        num_layers: mc.backbone.num_layers,
        losses,
        initial_loss,
        final_loss,
        initial_metric,
        final_metric,
        params,
        layer_weights,
        weighted_layers,
        centroid,
        frozen_digest: digest,
        diverged,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok(TrainedRun {
        report,
        model,
        initial,
        store,
    })
}

/// Generates the task for `seed` and trains on it.
pub fn train(cfg: &RunConfig, pre: &Pretrained, seed: u64) -> Result<RunReport> {
    let data = generate_task(&cfg.task, seed)?;
    train_on(cfg, pre, &data, seed)
}
