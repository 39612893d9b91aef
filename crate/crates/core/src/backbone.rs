//! Transformer encoder standing in for the pretrained speech model.
//!
//! A linear frontend with sinusoidal positions replaces the convolutional
//! waveform encoder; layers are post-LN (residual add, then LayerNorm).
//! [`Backbone::forward`] keeps every layer output so L-adapters can tap them.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::Bottleneck;
use crate::autodiff::{Adam, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::nn::{Init, Linear, Norm, ParamSink, StoreSink};
use crate::rng::SeedStream;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ffn: usize,
    pub input_dim: usize,
    pub max_seq_len: usize,
}

impl BackboneConfig {
    /// Desk-scale encoder used for every trained experiment.
    pub fn toy() -> Self {
        BackboneConfig {
            num_layers: 4,
            d_model: 32,
            num_heads: 2,
            d_ffn: 64,
            input_dim: 16,
            max_seq_len: 64,
        }
    }

    /// WavLM Base dimensions; only used for parameter accounting. The
    /// 512-wide input matches the output width of its convolutional encoder.
    pub fn wavlm_base() -> Self {
        BackboneConfig {
            num_layers: 12,
            d_model: 768,
            num_heads: 8,
            d_ffn: 3072,
            input_dim: 512,
            max_seq_len: 4096,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("d_model", self.d_model),
            ("num_heads", self.num_heads),
            ("d_ffn", self.d_ffn),
            ("input_dim", self.input_dim),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::config(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    /// Scalars in one encoder layer: four attention projections, the
    /// two-layer FFN and two LayerNorms.
    pub fn layer_param_count(&self) -> usize {
        let d = self.d_model;
        4 * Linear::param_count(d, d)
            + Linear::param_count(d, self.d_ffn)
            + Linear::param_count(self.d_ffn, d)
            + 2 * Norm::param_count(d)
    }

    pub fn layer_norm_param_count(&self) -> usize {
        2 * Norm::param_count(self.d_model)
    }

    pub fn param_count(&self) -> usize {
        Linear::param_count(self.input_dim, self.d_model) + self.num_layers * self.layer_param_count()
    }
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: Attention,
    pub ln1: Norm,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub ln2: Norm,
}

impl EncoderLayer {
    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = Vec::new();
        for l in [&self.attn.q, &self.attn.k, &self.attn.v, &self.attn.out, &self.ffn1, &self.ffn2] {
            v.extend(l.ids());
        }
        v.extend(self.ln1.ids());
        v.extend(self.ln2.ids());
        v
    }

    pub fn norm_ids(&self) -> Vec<ParamId> {
        self.ln1.ids().into_iter().chain(self.ln2.ids()).collect()
    }
}

/// Adapters hooked into one encoder layer. The E-adapter occupies
/// `after_ffn`; the conventional baseline fills both slots.
#[derive(Clone, Copy, Debug, Default)]
pub struct LayerHooks<'a> {
    pub after_attention: Option<&'a Bottleneck>,
    pub after_ffn: Option<&'a Bottleneck>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub frontend: Linear,
    pub layers: Vec<EncoderLayer>,
}

/// Frontend output plus every layer output `h₁…h_L`, in order.
#[derive(Clone, Debug)]
pub struct BackboneOutput {
    pub frontend: Var,
    pub layers: Vec<Var>,
}

impl BackboneOutput {
    pub fn top(&self) -> Var {
        *self.layers.last().expect("at least one layer")
    }
}

/// Sinusoidal absolute position table `[T×d]`.
pub fn sinusoidal_positions<S: Scalar>(len: usize, d: usize) -> Tensor<S> {
    let mut data = Vec::with_capacity(len * d);
    for t in 0..len {
        for j in 0..d {
            let i = (j / 2) as f64;
            let angle = t as f64 / 10_000f64.powf(2.0 * i / d as f64);
            data.push(S::of(if j % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::from_parts(vec![len, d], data)
}

impl Backbone {
    pub fn declare(config: BackboneConfig, sink: &mut dyn ParamSink) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let frontend = Linear::declare(sink, "frontend", config.input_dim, d)?;
        let mut layers = Vec::with_capacity(config.num_layers);
        for i in 0..config.num_layers {
            let p = format!("layers.{i}");
            layers.push(EncoderLayer {
                attn: Attention {
                    q: Linear::declare(sink, &format!("{p}.attn.q"), d, d)?,
                    k: Linear::declare(sink, &format!("{p}.attn.k"), d, d)?,
                    v: Linear::declare(sink, &format!("{p}.attn.v"), d, d)?,
                    out: Linear::declare(sink, &format!("{p}.attn.out"), d, d)?,
                },
                ln1: Norm::declare(sink, &format!("{p}.ln1"), d)?,
                ffn1: Linear::declare(sink, &format!("{p}.ffn.w1"), d, config.d_ffn)?,
                ffn2: Linear::declare(sink, &format!("{p}.ffn.w2"), config.d_ffn, d)?,
                ln2: Norm::declare(sink, &format!("{p}.ln2"), d)?,
            });
        }
        Ok(Backbone {
            config,
            frontend,
            layers,
        })
    }

    /// Allocates a randomly initialized backbone into a fresh store.
    pub fn init<S: Scalar>(config: BackboneConfig, seed: u64) -> Result<(Self, ParamStore<S>)> {
        let mut store = ParamStore::new();
        let mut rng = SeedStream::new(seed).rng("backbone");
        let bb = Backbone::declare(
            config,
            &mut StoreSink {
                store: &mut store,
                rng: &mut rng,
            },
        )?;
        Ok((bb, store))
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.frontend.ids().to_vec();
        for l in &self.layers {
            v.extend(l.ids());
        }
        v
    }

    /// Linear projection plus positions. With `mask`, the projected rows it
    /// selects are replaced by the `fill` vector before positions are added.
    pub fn frontend_forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        features: Var,
        mask: Option<(&[bool], Var)>,
    ) -> Result<Var> {
        let shape = g.shape(features).to_vec();
        let t = match shape[..] {
            [t, f] if f == self.config.input_dim => t,
            _ => {
                return Err(Error::Shape {
                    op: "frontend",
                    left: shape,
                    right: vec![0, self.config.input_dim],
                })
            }
        };
        if t == 0 {
            return Err(Error::EmptySequence { op: "frontend" });
        }
        if t > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: t,
                max: self.config.max_seq_len,
            });
        }
        let mut x = self.frontend.forward(g, store, features)?;
        if let Some((rows, fill)) = mask {
            x = g.replace_rows(x, fill, rows)?;
        }
        let pe = g.constant(sinusoidal_positions(t, self.config.d_model))?;
        g.add(x, pe)
    }

    fn attention<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, attn: &Attention, h: Var) -> Result<Var> {
        let q = attn.q.forward(g, store, h)?;
        let k = attn.k.forward(g, store, h)?;
        let v = attn.v.forward(g, store, h)?;
        let dh = self.config.head_dim();
        let scale = S::of(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(self.config.num_heads);
        for i in 0..self.config.num_heads {
            let qh = g.slice_cols(q, i * dh, dh)?;
            let kh = g.slice_cols(k, i * dh, dh)?;
            let vh = g.slice_cols(v, i * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale)?;
            let probs = g.softmax(scores, 1)?;
            heads.push(g.matmul(probs, vh)?);
        }
        let ctx = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        attn.out.forward(g, store, ctx)
    }

    /// One post-LN layer: `h₁ = LN(h + A(MHSA(h)))`, `out = LN(h₁ + E(FFN(h₁)))`
    /// where `A` and `E` are the optional hooks.
    pub fn layer_forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        index: usize,
        h: Var,
        hooks: LayerHooks<'_>,
    ) -> Result<Var> {
        let layer = &self.layers[index];
        let mut a = self.attention(g, store, &layer.attn, h)?;
        if let Some(ad) = hooks.after_attention {
            a = ad.forward(g, store, a)?;
        }
        let r = g.add(h, a)?;
        let h1 = layer.ln1.forward(g, store, r)?;
        let f = layer.ffn1.forward(g, store, h1)?;
        let f = g.gelu(f)?;
        let mut f = layer.ffn2.forward(g, store, f)?;
        if let Some(ad) = hooks.after_ffn {
            f = ad.forward(g, store, f)?;
        }
        let r = g.add(h1, f)?;
        layer.ln2.forward(g, store, r)
    }

    /// Runs the whole encoder. `hooks` is either empty or has one entry per
    /// layer.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        features: Var,
        hooks: &[LayerHooks<'_>],
    ) -> Result<BackboneOutput> {
        self.forward_masked(g, store, features, hooks, None)
    }

    pub fn forward_masked<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        features: Var,
        hooks: &[LayerHooks<'_>],
        mask: Option<(&[bool], Var)>,
    ) -> Result<BackboneOutput> {
        if !hooks.is_empty() && hooks.len() != self.layers.len() {
            return Err(Error::config(format!(
                "{} layer hooks for {} layers",
                hooks.len(),
                self.layers.len()
            )));
        }
        let frontend = self.frontend_forward(g, store, features, mask)?;
        let mut h = frontend;
        let mut layers = Vec::with_capacity(self.layers.len());
        for i in 0..self.layers.len() {
            let hk = hooks.get(i).copied().unwrap_or_default();
            h = self.layer_forward(g, store, i, h, hk)?;
            layers.push(h);
        }
        Ok(BackboneOutput { frontend, layers })
    }
}

/// Masked-frame reconstruction head used only while pretraining.
#[derive(Clone, Debug)]
pub struct PretrainHead {
    pub mask_embedding: ParamId,
    pub proj: Linear,
}

impl PretrainHead {
    pub fn declare(config: &BackboneConfig, sink: &mut dyn ParamSink) -> Result<Self> {
        Ok(PretrainHead {
            mask_embedding: sink.declare("pretrain.mask_embedding", &[config.d_model], Init::Normal(0.1))?,
            proj: Linear::declare(sink, "pretrain.proj", config.d_model, config.input_dim)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOptions {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub mask_prob: f64,
    pub seed: u64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions {
            steps: 300,
            lr: 1e-3,
            batch_size: 8,
            mask_prob: 0.15,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
    /// Mean masked loss on held-out sequences before and after training,
    /// with identical masks for both measurements.
    pub held_out: Option<(f64, f64)>,
}

/// Masked-frame objective for one sequence: the selected frames are
/// replaced by the mask embedding after projection, and the top layer must
/// regress `target` at those frames.
pub fn masked_reconstruction_loss<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    backbone: &Backbone,
    head: &PretrainHead,
    features: &Tensor<S>,
    target: &Tensor<S>,
    mask: &[bool],
) -> Result<Var> {
    let x = g.constant(features.clone())?;
    let fill = g.param(store, head.mask_embedding)?;
    let out = backbone.forward_masked(g, store, x, &[], Some((mask, fill)))?;
    let pred = head.proj.forward(g, store, out.top())?;
    g.masked_mse(pred, target, mask)
}

/// An input sequence and the per-frame regression target used at masked
/// positions. The target has the input's shape.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainSequence {
    pub input: Tensor<f32>,
    pub target: Tensor<f32>,
}

impl PretrainSequence {
    pub fn new(input: Tensor<f32>, target: Tensor<f32>) -> Result<Self> {
        if input.shape() != target.shape() {
            return Err(Error::Shape {
                op: "pretrain_sequence",
                left: input.shape().to_vec(),
                right: target.shape().to_vec(),
            });
        }
        Ok(PretrainSequence { input, target })
    }

    /// Plain reconstruction: the target is the input itself.
    pub fn autoencode(input: Tensor<f32>) -> Self {
        PretrainSequence {
            target: input.clone(),
            input,
        }
    }
}

/// Draws a frame mask with the given probability.
pub fn draw_mask<R: Rng + ?Sized>(rng: &mut R, len: usize, prob: f64) -> Vec<bool> {
    (0..len).map(|_| rng.random::<f64>() < prob).collect()
}

/// Pretrains every backbone parameter on masked-frame reconstruction and
/// returns the backbone alone (pretraining-only parameters are dropped).
pub fn pretrain_toy(
    config: BackboneConfig,
    corpus: &[Tensor<f32>],
    opts: &PretrainOptions,
) -> Result<(Backbone, ParamStore<f32>, PretrainReport)> {
    let corpus: Vec<PretrainSequence> = corpus.iter().cloned().map(PretrainSequence::autoencode).collect();
    pretrain_toy_with_eval(config, &corpus, &[], opts)
}

/// [`pretrain_toy`] that also scores `held_out` before and after training.
pub fn pretrain_toy_with_eval(
    config: BackboneConfig,
    corpus: &[PretrainSequence],
    held_out: &[PretrainSequence],
    opts: &PretrainOptions,
) -> Result<(Backbone, ParamStore<f32>, PretrainReport)> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let seeds = SeedStream::new(opts.seed);
    let mut store = ParamStore::<f32>::new();
    let mut rng = seeds.rng("init");
    let (backbone, head) = {
        let mut sink = StoreSink {
            store: &mut store,
            rng: &mut rng,
        };
        let bb = Backbone::declare(config, &mut sink)?;
        let head = PretrainHead::declare(&bb.config, &mut sink)?;
        (bb, head)
    };
    for id in store.iter().map(|(id, _)| id).collect::<Vec<_>>() {
        store.set_trainable(id, true);
    }
    let eval_mask_prob = if opts.mask_prob > 0.0 { opts.mask_prob } else { 0.15 };
    let eval = |store: &ParamStore<f32>| -> Result<f64> {
        let mut rng = seeds.rng("held_out");
        let mut total = 0.0;
        for seq in held_out {
            let len = seq.input.shape()[0];
            let mut mask = draw_mask(&mut rng, len, eval_mask_prob);
            mask[len / 2] = true;
            let mut g = Graph::new();
            let l = masked_reconstruction_loss(&mut g, store, &backbone, &head, &seq.input, &seq.target, &mask)?;
            total += g.value(l).item() as f64;
        }
        Ok(total / held_out.len().max(1) as f64)
    };
    let before = if held_out.is_empty() { None } else { Some(eval(&store)?) };
    let mut opt = Adam::new(opts.lr);
    let mut batch_rng = seeds.rng("batches");
    let mut losses = Vec::with_capacity(opts.steps);
    for _ in 0..opts.steps {
        let mut g = Graph::new();
        let mut terms = Vec::with_capacity(opts.batch_size);
        for _ in 0..opts.batch_size.max(1) {
            let seq = &corpus[batch_rng.random_range(0..corpus.len())];
            let mask = draw_mask(&mut batch_rng, seq.input.shape()[0], opts.mask_prob);
            terms.push(masked_reconstruction_loss(&mut g, &store, &backbone, &head, &seq.input, &seq.target, &mask)?);
        }
        let loss = g.mean_scalars(&terms)?;
        losses.push(g.value(loss).item() as f64);
        let grads = g.backward(loss)?;
        opt.step(&mut store, &grads);
    }
    let held_out = match before {
        Some(b) => Some((b, eval(&store)?)),
        None => None,
    };
    // The backbone was declared first, so its ids are the leading indices
    // and stay valid in the extracted store.
    let mut ids = backbone.ids();
    ids.sort_unstable();
    debug_assert!(ids.iter().enumerate().all(|(i, id)| id.index() == i));
    let fresh = extract(&store, &ids);
    Ok((backbone, fresh, PretrainReport { losses, held_out }))
}

fn extract<S: Scalar>(store: &ParamStore<S>, ids: &[ParamId]) -> ParamStore<S> {
    let mut out = ParamStore::new();
    for &id in ids {
        let p = store.get(id);
        out.insert(p.path.clone(), p.value.clone(), false).expect("unique paths");
    }
    out
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

/// JSON parameter checkpoint: `path → {shape, values}` in row-major order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    #[serde(default)]
    pub config: Option<BackboneConfig>,
    pub params: BTreeMap<String, CheckpointEntry>,
}

impl Checkpoint {
    pub fn from_store<S: Scalar>(store: &ParamStore<S>) -> Self {
        let params = store
            .iter()
            .map(|(_, p)| {
                (
                    p.path.clone(),
                    CheckpointEntry {
                        shape: p.value.shape().to_vec(),
                        values: p.value.data().iter().map(|v| v.as_f64() as f32).collect(),
                    },
                )
            })
            .collect();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: None,
            params,
        }
    }

    pub fn with_config(mut self, config: BackboneConfig) -> Self {
        self.config = Some(config);
        self
    }

    /// Overwrites every store parameter that has a checkpoint entry; shapes
    /// must agree. Returns how many parameters were loaded.
    pub fn load_into<S: Scalar>(&self, store: &mut ParamStore<S>) -> Result<usize> {
        let mut loaded = 0;
        for (path, entry) in &self.params {
            let Some(id) = store.id(path) else { continue };
            let t = Tensor::new(entry.shape.clone(), entry.values.iter().map(|&v| S::of(v as f64)).collect())?;
            if t.shape() != store.value(id).shape() {
                return Err(Error::Shape {
                    op: "checkpoint",
                    left: store.value(id).shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            *store.value_mut(id) = t;
            loaded += 1;
        }
        Ok(loaded)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let ck: Checkpoint = serde_json::from_reader(f)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint version {}", ck.version)));
        }
        Ok(ck)
    }
}
