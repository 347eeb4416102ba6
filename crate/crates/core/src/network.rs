//! The segmentation network: encoder, memory, fusion and a U-Net decoder
//! ending in a two-class head.
//!
//! Decoder schedule for input side `S` (bottleneck `f4` at `S/32`):
//!
//! | level | resolution | skip | width |
//! |-------|------------|------|-------|
//! | 0 | S/16 | w3 | `decoder_widths[0]` |
//! | 1 | S/8  | w2 | `decoder_widths[1]` |
//! | 2 | S/4  | w1 | `decoder_widths[2]` |
//! | 3 | S/2  |    | `decoder_widths[3]` |
//! | head | S |    | 2 |
//!
//! Each level upsamples bilinearly and applies two conv-BN-ReLU blocks; the
//! skip is concatenated between them. The head is one conv-BN-ReLU block and
//! a 1×1 convolution to two channels; the anomaly probability is softmax
//! channel 1.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{BnObservation, Graph, Var};
use crate::data_io::{load_checkpoint, save_checkpoint, Checkpoint, Image, ImageSource};
use crate::encoder::{Encoder, EncoderConfig, FeaturePyramid};
use crate::error::{shape_err, Error, Result};
use crate::fusion::{apply_spatial_attention, FusionFlags, Msff};
use crate::layers::{update_running_stats, Conv2d, ConvBnRelu};
use crate::memory::{attention_maps, build_pool, concat_info, select_best, unit_maps, ArgminMode, MemoryPool};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

/// Component switches. Everything on is the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub memory: bool,
    pub multi_scale: bool,
    pub spatial_attention: bool,
    pub coord_attention: bool,
    pub argmin: ArgminMode,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            memory: true,
            multi_scale: true,
            spatial_attention: true,
            coord_attention: true,
            argmin: ArgminMode::Global,
        }
    }
}

impl Ablation {
    /// Short human-readable summary, e.g. `memory=on multi_scale=off ...`.
    pub fn describe(&self) -> String {
        let f = |b: bool| if b { "on" } else { "off" };
        format!(
            "memory={} multi_scale={} spatial_attention={} coord_attention={} argmin={:?}",
            f(self.memory),
            f(self.multi_scale),
            f(self.spatial_attention),
            f(self.coord_attention),
            self.argmin
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub image_size: usize,
    /// Decoder widths at S/16, S/8, S/4 and S/2.
    pub decoder_widths: [usize; 4],
    /// Coordinate attention channel reduction.
    pub ca_reduction: usize,
    /// Number of memory samples.
    pub memory_size: usize,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            image_size: 256,
            decoder_widths: [256, 128, 64, 48],
            ca_reduction: 16,
            memory_size: 30,
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(Error::InvalidConfig(format!(
                "image_size {} must be a positive multiple of 32",
                self.image_size
            )));
        }
        if self.decoder_widths.contains(&0) || self.encoder.widths().contains(&0) {
            return Err(Error::InvalidConfig("channel widths must be positive".into()));
        }
        if self.memory_size == 0 || self.ca_reduction == 0 {
            return Err(Error::InvalidConfig("memory_size and ca_reduction must be positive".into()));
        }
        Ok(())
    }
}

/// Per-pixel anomaly probability at input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyMap {
    pub probs: Array2<f64>,
}

impl AnomalyMap {
    pub fn from_tensor(t: &Tensor, n: usize) -> AnomalyMap {
        let [_, _, h, w] = t.shape();
        AnomalyMap {
            probs: Array2::from_shape_vec((h, w), t.item(n)[..h * w].to_vec()).expect("plane size"),
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.probs.dim()
    }
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    first: ConvBnRelu,
    second: ConvBnRelu,
}

#[derive(Clone, Debug)]
struct Decoder {
    levels: Vec<DecoderLevel>,
    last: ConvBnRelu,
    head: Conv2d,
}

impl Decoder {
    fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, bottleneck: usize, skips: [usize; 3], widths: [usize; 4]) -> Self {
        let t = ParamKind::Trainable;
        let mut in_c = bottleneck;
        let mut levels = Vec::new();
        for (i, &d) in widths.iter().enumerate() {
            let skip = if i < 3 { skips[2 - i] } else { 0 };
            let p = format!("decoder.up{i}");
            levels.push(DecoderLevel {
                first: ConvBnRelu::init(store, rng, &format!("{p}.0"), in_c, d, 3, 1, t),
                second: ConvBnRelu::init(store, rng, &format!("{p}.1"), d + skip, d, 3, 1, t),
            });
            in_c = d;
        }
        Decoder {
            levels,
            last: ConvBnRelu::init(store, rng, "decoder.last", in_c, in_c, 3, 1, t),
            head: Conv2d::init(store, rng, "decoder.head", in_c, 2, 1, 1, true, t),
        }
    }

    /// Two-channel logits at input resolution.
    fn forward(&self, g: &mut Graph, store: &ParamStore, bottleneck: Var, skips: [Var; 3]) -> Result<Var> {
        let mut x = bottleneck;
        for (i, level) in self.levels.iter().enumerate() {
            x = g.upsample2(x);
            x = level.first.forward(g, store, x)?;
            if i < 3 {
                x = g.concat(&[x, skips[2 - i]], 1)?;
            }
            x = level.second.forward(g, store, x)?;
        }
        let x = g.upsample2(x);
        let x = self.last.forward(g, store, x)?;
        self.head.forward(g, store, x)
    }
}

/// Everything the trainable part needs, computed from frozen features only.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub pyramid: FeaturePyramid,
    pub ci: [Tensor; 3],
    pub maps: [Tensor; 3],
}

/// Graph nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub logits: Var,
    /// Anomaly probability, `[N, 1, H, W]`.
    pub probs: Var,
}

#[derive(Clone, Debug)]
pub struct SegModel {
    config: ModelConfig,
    encoder: Encoder,
    pool: MemoryPool,
    store: ParamStore,
    fusion: Msff,
    decoder: Decoder,
}

impl SegModel {
    /// Assemble a model with freshly initialised fusion and decoder weights.
    pub fn new(config: ModelConfig, encoder: Encoder, pool: MemoryPool, seed: u64) -> Result<Self> {
        config.validate()?;
        if encoder.config() != &config.encoder {
            return Err(Error::InvalidConfig("encoder does not match model config".into()));
        }
        let s = config.image_size;
        let [c1, c2, c3, c4] = encoder.widths();
        let expect = [[1, c1, s / 4, s / 4], [1, c2, s / 8, s / 8], [1, c3, s / 16, s / 16]];
        if pool.shapes() != expect {
            return Err(shape_err(format!(
                "memory pool shapes {:?} do not fit {s}x{s} inputs ({expect:?})",
                pool.shapes()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ci = [2 * c1, 2 * c2, 2 * c3];
        let fusion = Msff::init(&mut store, &mut rng, "fusion", ci, config.ca_reduction);
        let decoder = Decoder::init(&mut store, &mut rng, c4, ci, config.decoder_widths);
        Ok(SegModel {
            config,
            encoder,
            pool,
            store,
            fusion,
            decoder,
        })
    }

    /// Build the encoder from the config and the memory pool from `train`.
    pub fn build<S: ImageSource + ?Sized>(config: ModelConfig, train: &S, seed: u64) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(&config.encoder)?;
        let pool = build_pool(&encoder, train, config.memory_size, seed)?;
        Self::new(config, encoder, pool, seed)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn pool(&self) -> &MemoryPool {
        &self.pool
    }

    /// Replace the memory pool (shapes must match).
    pub fn set_pool(&mut self, pool: MemoryPool) -> Result<()> {
        if pool.shapes() != self.pool.shapes() {
            return Err(shape_err("replacement pool has different shapes"));
        }
        self.pool = pool;
        Ok(())
    }

    pub fn ablation(&self) -> Ablation {
        self.config.ablation
    }

    pub fn set_ablation(&mut self, ablation: Ablation) {
        self.config.ablation = ablation;
    }

    /// Fusion and decoder parameters (the encoder keeps its own store).
    pub fn head_store(&self) -> &ParamStore {
        &self.store
    }

    /// Names of every parameter updated by training: fusion, attention,
    /// decoder and encoder stage 4.
    pub fn trainable_parameters(&self) -> BTreeSet<String> {
        self.encoder
            .store()
            .names_of(ParamKind::Trainable)
            .chain(self.store.names_of(ParamKind::Trainable))
            .map(str::to_owned)
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.encoder.store().count(ParamKind::Trainable) + self.store.count(ParamKind::Trainable)
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        if self.encoder.store().contains(name) {
            self.encoder.store().get(name)
        } else {
            self.store.get(name)
        }
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        if self.encoder.store().contains(name) {
            self.encoder.store_mut().get_mut(name)
        } else {
            self.store.get_mut(name)
        }
    }

    /// Per-tensor digests over encoder and head stores.
    pub fn tensor_digests(&self) -> BTreeMap<String, String> {
        let mut d = self.encoder.store().tensor_digests();
        d.extend(self.store.tensor_digests());
        d
    }

    /// Fold training-mode batch statistics into running averages.
    pub fn apply_bn_observations(&mut self, obs: &[BnObservation]) -> Result<()> {
        for o in obs {
            let store = if self.encoder.store().contains(&format!("{}.running_mean", o.prefix)) {
                self.encoder.store_mut()
            } else {
                &mut self.store
            };
            update_running_stats(store, &o.prefix, &o.mean, &o.var)?;
        }
        Ok(())
    }

    fn check_batch(&self, images: &Tensor) -> Result<()> {
        let s = self.config.image_size;
        let [_, c, h, w] = images.shape();
        if c != 3 || h != s || w != s {
            return Err(shape_err(format!("model expects [N, 3, {s}, {s}] input, got {:?}", images.shape())));
        }
        Ok(())
    }

    /// Frozen features, memory matching, `CI` and attention maps.
    pub fn prepare(&self, images: &Tensor) -> Result<Prepared> {
        self.check_batch(images)?;
        let pyramid = self.encoder.extract_pyramid(images)?;
        let ab = self.config.ablation;
        let (ci, maps) = if ab.memory {
            let di = select_best(&self.pool, &pyramid, ab.argmin)?;
            let ci = concat_info(&pyramid, &di)?;
            let maps = if ab.spatial_attention {
                attention_maps(&di)
            } else {
                unit_maps(&pyramid)
            };
            (ci, maps)
        } else {
            let ci = pyramid
                .levels
                .each_ref()
                .map(|t| Tensor::concat_channels(&[t, t]).expect("same tensor twice"));
            (ci, unit_maps(&pyramid))
        };
        Ok(Prepared { pyramid, ci, maps })
    }

    /// Trainable part of the forward pass.
    pub fn forward_prepared(&self, g: &mut Graph, p: &Prepared) -> Result<ForwardVars> {
        let ab = self.config.ablation;
        let ci = p.ci.each_ref().map(|t| g.input(t.clone()));
        let f3 = g.input(p.pyramid.levels[2].clone());
        let f4 = self.encoder.forward_top(g, f3)?;
        let flags = FusionFlags {
            multi_scale: ab.multi_scale,
            coord_attention: ab.coord_attention,
        };
        let fused = self.fusion.forward(g, &self.store, ci, flags)?;
        let weighted = if ab.memory && ab.spatial_attention {
            let maps = p.maps.each_ref().map(|t| g.input(t.clone()));
            apply_spatial_attention(g, fused, maps)?
        } else {
            fused
        };
        let logits = self.decoder.forward(g, &self.store, f4, weighted)?;
        let soft = g.softmax_channels(logits);
        let probs = g.slice(soft, 1, 1..2)?;
        Ok(ForwardVars { logits, probs })
    }

    pub fn forward(&self, g: &mut Graph, images: &Tensor) -> Result<ForwardVars> {
        let p = self.prepare(images)?;
        self.forward_prepared(g, &p)
    }

    /// Inference-mode anomaly probabilities, `[N, 1, H, W]`.
    pub fn predict_tensor(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(false);
        let out = self.forward(&mut g, images)?;
        Ok(g.into_value(out.probs))
    }

    pub fn predict(&self, image: &Image) -> Result<AnomalyMap> {
        Ok(AnomalyMap::from_tensor(&self.predict_tensor(&image.to_tensor())?, 0))
    }

    pub fn predict_batch(&self, images: &[Image]) -> Result<Vec<AnomalyMap>> {
        let t = Tensor::stack(&images.iter().map(Image::to_tensor).collect::<Vec<_>>())?;
        let probs = self.predict_tensor(&t)?;
        Ok((0..images.len()).map(|n| AnomalyMap::from_tensor(&probs, n)).collect())
    }

    /// Checkpoint holding every non-frozen tensor, the memory pool, the
    /// encoder tag and the configurations. `run_config` is stored verbatim.
    pub fn to_checkpoint(&self, run_config: &str) -> Result<Checkpoint> {
        let mut c = Checkpoint::default();
        for store in [self.encoder.store(), &self.store] {
            for (name, e) in store.iter().filter(|(_, e)| e.kind != ParamKind::Frozen) {
                c.tensors.insert(name.to_owned(), e.value.clone());
            }
        }
        for (i, item) in self.pool.items().iter().enumerate() {
            for (k, t) in item.levels.iter().enumerate() {
                c.tensors.insert(format!("memory.{i:04}.f{}", k + 1), t.clone());
            }
        }
        c.metadata.insert("encoder_tag".into(), self.encoder.tag().to_owned());
        c.metadata.insert("model_config".into(), to_json(&self.config)?);
        c.metadata.insert("memory_sources".into(), to_json(&self.pool.sources())?);
        c.metadata.insert("memory_seed".into(), self.pool.seed().to_string());
        c.metadata.insert("run_config".into(), run_config.to_owned());
        Ok(c)
    }

    /// Rebuild a model from a checkpoint. The encoder is reconstructed from
    /// `encoder` if given (otherwise from the stored config) and its tag
    /// must equal the stored one.
    pub fn from_checkpoint(c: &Checkpoint, encoder: Option<&EncoderConfig>) -> Result<Self> {
        let mut config: ModelConfig =
            serde_json::from_str(c.meta("model_config")?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if let Some(e) = encoder {
            config.encoder = e.clone();
        }
        let enc = Encoder::new(&config.encoder)?;
        let stored = c.meta("encoder_tag")?;
        if enc.tag() != stored {
            return Err(Error::EncoderMismatch {
                checkpoint: stored.to_owned(),
                provided: enc.tag().to_owned(),
            });
        }
        let sources: Vec<String> =
            serde_json::from_str(c.meta("memory_sources")?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let seed = c
            .meta("memory_seed")?
            .parse()
            .map_err(|_| Error::Checkpoint("memory_seed is not an integer".into()))?;
        let items = (0..sources.len())
            .map(|i| {
                let level = |k: usize| c.tensor(&format!("memory.{i:04}.f{k}")).cloned();
                Ok(FeaturePyramid {
                    levels: [level(1)?, level(2)?, level(3)?],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let pool = MemoryPool::new(items, sources, seed)?;
        let mut model = SegModel::new(config, enc, pool, 0)?;
        let names: Vec<String> = [model.encoder.store(), &model.store]
            .iter()
            .flat_map(|s| s.iter().filter(|(_, e)| e.kind != ParamKind::Frozen).map(|(n, _)| n.to_owned()))
            .collect();
        for name in names {
            let src = c.tensor(&name)?;
            let dst = model.param_mut(&name)?;
            if src.shape() != dst.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: stored shape {:?}, model expects {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src.clone();
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path, run_config: &str) -> Result<()> {
        save_checkpoint(&self.to_checkpoint(run_config)?, path)
    }

    pub fn load(path: &Path, encoder: Option<&EncoderConfig>) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint(path)?, encoder)
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Checkpoint(e.to_string()))
}
