//! Feature extraction: three frozen stages feeding the memory module and a
//! trainable fourth stage feeding the decoder bottleneck.
//!
//! Two backbones share one contract. `ResNet18` loads torchvision-style
//! weights from a local safetensors file. `Toy` is a small randomly
//! initialised convolution stack used by tests and by desk-scale runs; it
//! never needs external files.
//!
//! Stage strides are 4, 8, 16 and 32 for both backbones.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data_io::read_safetensors;
use crate::error::{Error, Result};
use crate::layers::{BatchNorm2d, Conv2d};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{max_pool2d, Tensor};

/// Per-channel mean and std of the natural-image corpus the backbone was
/// pretrained on.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum EncoderConfig {
    Toy {
        /// Output channels of stages 1 to 4.
        widths: [usize; 4],
        seed: u64,
    },
    Resnet18 {
        weights: PathBuf,
    },
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig::Toy {
            widths: [64, 128, 256, 512],
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn widths(&self) -> [usize; 4] {
        match self {
            EncoderConfig::Toy { widths, .. } => *widths,
            EncoderConfig::Resnet18 { .. } => [64, 128, 256, 512],
        }
    }
}

/// Frozen features `f1..f3` of a batch, at strides 4, 8 and 16.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: [Tensor; 3],
}

impl FeaturePyramid {
    pub fn batch(&self) -> usize {
        self.levels[0].batch()
    }

    /// The pyramid of batch item `n` (batch size 1).
    pub fn item(&self, n: usize) -> FeaturePyramid {
        FeaturePyramid {
            levels: self.levels.clone().map(|t| t.item_tensor(n)),
        }
    }

    pub fn stack(items: &[FeaturePyramid]) -> Result<FeaturePyramid> {
        let level = |k: usize| Tensor::stack(&items.iter().map(|p| p.levels[k].clone()).collect::<Vec<_>>());
        Ok(FeaturePyramid {
            levels: [level(0)?, level(1)?, level(2)?],
        })
    }

    pub fn shapes(&self) -> [[usize; 4]; 3] {
        [self.levels[0].shape(), self.levels[1].shape(), self.levels[2].shape()]
    }
}

#[derive(Clone, Debug)]
struct ResidualBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    down: Option<(Conv2d, BatchNorm2d)>,
}

impl ResidualBlock {
    fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, in_c: usize, out_c: usize, stride: usize, kind: ParamKind) -> Self {
        let conv1 = Conv2d::init(store, rng, &format!("{prefix}.conv1"), in_c, out_c, 3, stride, false, kind);
        let bn1 = BatchNorm2d::init(store, &format!("{prefix}.bn1"), out_c, kind);
        let conv2 = Conv2d::init(store, rng, &format!("{prefix}.conv2"), out_c, out_c, 3, 1, false, kind);
        let bn2 = BatchNorm2d::init(store, &format!("{prefix}.bn2"), out_c, kind);
        let down = (stride != 1 || in_c != out_c).then(|| {
            (
                Conv2d::init(store, rng, &format!("{prefix}.downsample.0"), in_c, out_c, 1, stride, false, kind),
                BatchNorm2d::init(store, &format!("{prefix}.downsample.1"), out_c, kind),
            )
        });
        ResidualBlock {
            conv1,
            bn1,
            conv2,
            bn2,
            down,
        }
    }

    fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let y = self.bn1.apply(store, &self.conv1.apply(store, x)?)?.map(relu);
        let y = self.bn2.apply(store, &self.conv2.apply(store, &y)?)?;
        let skip = match &self.down {
            Some((c, b)) => b.apply(store, &c.apply(store, x)?)?,
            None => x.clone(),
        };
        Ok(y.zip_map(&skip, |a, b| relu(a + b))?)
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.conv1.forward(g, store, x)?;
        let y = self.bn1.forward(g, store, y)?;
        let y = g.relu(y);
        let y = self.conv2.forward(g, store, y)?;
        let y = self.bn2.forward(g, store, y)?;
        let skip = match &self.down {
            Some((c, b)) => {
                let s = c.forward(g, store, x)?;
                b.forward(g, store, s)?
            }
            None => x,
        };
        let y = g.add(y, skip)?;
        Ok(g.relu(y))
    }
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

#[derive(Clone, Debug)]
enum Stages {
    Toy {
        frozen: Vec<Vec<Conv2d>>,
        top: Conv2d,
        top_bn: BatchNorm2d,
    },
    Resnet {
        stem: (Conv2d, BatchNorm2d),
        layers: [Vec<ResidualBlock>; 4],
    },
}

/// A backbone with its parameters. Names are prefixed `encoder.`.
#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    stages: Stages,
    store: ParamStore,
    tag: String,
}

const PREFIX: &str = "encoder";

impl Encoder {
    pub fn new(config: &EncoderConfig) -> Result<Encoder> {
        match config {
            EncoderConfig::Toy { widths, seed } => Ok(make_toy_encoder(*widths, *seed)),
            EncoderConfig::Resnet18 { weights } => load_resnet18(weights),
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Backbone name plus a hash of the frozen weights.
    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn widths(&self) -> [usize; 4] {
        self.config.widths()
    }

    /// Hex SHA-256 of stages 1 to 3.
    pub fn frozen_digest(&self) -> String {
        self.store.digest(ParamKind::Frozen)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let [_, c, h, w] = x.shape();
        if c != 3 || h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(Error::ShapeMismatch(format!(
                "encoder expects 3-channel input with sides divisible by 32, got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    /// Frozen stages on a `[N, 3, H, W]` batch in `[0, 1]` pixel space.
    pub fn extract_pyramid(&self, images: &Tensor) -> Result<FeaturePyramid> {
        self.check_input(images)?;
        let x = normalize(images);
        let s = &self.store;
        let levels = match &self.stages {
            Stages::Toy { frozen, .. } => {
                let mut out = Vec::with_capacity(3);
                let mut y = x;
                for stage in frozen {
                    for conv in stage {
                        y = conv.apply(s, &y)?.map(relu);
                    }
                    out.push(y.clone());
                }
                out
            }
            Stages::Resnet { stem, layers } => {
                let y = stem.1.apply(s, &stem.0.apply(s, &x)?)?.map(relu);
                let mut y = max_pool2d(&y, 3, 2, 1);
                let mut out = Vec::with_capacity(3);
                for layer in &layers[..3] {
                    for block in layer {
                        y = block.apply(s, &y)?;
                    }
                    out.push(y.clone());
                }
                out
            }
        };
        let [a, b, c]: [Tensor; 3] = levels.try_into().expect("three frozen stages");
        Ok(FeaturePyramid { levels: [a, b, c] })
    }

    /// Trainable stage 4 on top of `f3` (already a graph node).
    pub fn forward_top(&self, g: &mut Graph, f3: Var) -> Result<Var> {
        let s = &self.store;
        match &self.stages {
            Stages::Toy { top, top_bn, .. } => {
                let y = top.forward(g, s, f3)?;
                let y = top_bn.forward(g, s, y)?;
                Ok(g.relu(y))
            }
            Stages::Resnet { layers, .. } => {
                let mut y = f3;
                for block in &layers[3] {
                    y = block.forward(g, s, y)?;
                }
                Ok(y)
            }
        }
    }
}

fn normalize(images: &Tensor) -> Tensor {
    let mut x = images.clone();
    let [n, _, h, w] = x.shape();
    let plane = h * w;
    for b in 0..n {
        let item = x.item_mut(b);
        for c in 0..3 {
            for v in &mut item[c * plane..(c + 1) * plane] {
                *v = (*v - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
            }
        }
    }
    x
}

fn tag_for(name: &str, store: &ParamStore) -> String {
    format!("{name}:{}", &store.digest(ParamKind::Frozen)[..16])
}

/// Small random conv stack: two stride-2 convs for stage 1, one each for
/// stages 2 and 3 (all frozen), and a trainable conv + batch norm for
/// stage 4. Deterministic per seed.
pub fn make_toy_encoder(widths: [usize; 4], seed: u64) -> Encoder {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let f = ParamKind::Frozen;
    let [c1, c2, c3, c4] = widths;
    let stem = (c1 / 2).max(1);
    let frozen = vec![
        vec![
            Conv2d::init(&mut store, &mut rng, &format!("{PREFIX}.stage1.0"), 3, stem, 3, 2, true, f),
            Conv2d::init(&mut store, &mut rng, &format!("{PREFIX}.stage1.1"), stem, c1, 3, 2, true, f),
        ],
        vec![Conv2d::init(&mut store, &mut rng, &format!("{PREFIX}.stage2.0"), c1, c2, 3, 2, true, f)],
        vec![Conv2d::init(&mut store, &mut rng, &format!("{PREFIX}.stage3.0"), c2, c3, 3, 2, true, f)],
    ];
    let t = ParamKind::Trainable;
    let top = Conv2d::init(&mut store, &mut rng, &format!("{PREFIX}.stage4.conv"), c3, c4, 3, 2, false, t);
    let top_bn = BatchNorm2d::init(&mut store, &format!("{PREFIX}.stage4.bn"), c4, t);
    let tag = tag_for("toy", &store);
    Encoder {
        config: EncoderConfig::Toy { widths, seed },
        stages: Stages::Toy { frozen, top, top_bn },
        store,
        tag,
    }
}

/// Build the 18-layer residual network and fill it from a torchvision
/// state dict saved as safetensors (`conv1.weight`, `layer1.0.bn1.weight`,
/// ...). Layers 1 to 3 and the stem are frozen; layer 4 is trainable.
pub fn load_resnet18(path: &Path) -> Result<Encoder> {
    // shapes come from this skeleton; values are all overwritten below
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let f = ParamKind::Frozen;
    let stem = (
        Conv2d::init(&mut store, &mut rng, &format!("{PREFIX}.conv1"), 3, 64, 7, 2, false, f),
        BatchNorm2d::init(&mut store, &format!("{PREFIX}.bn1"), 64, f),
    );
    let widths = [64, 128, 256, 512];
    let layers: [Vec<ResidualBlock>; 4] = std::array::from_fn(|i| {
        let kind = if i == 3 { ParamKind::Trainable } else { f };
        let in_c = if i == 0 { 64 } else { widths[i - 1] };
        let stride = if i == 0 { 1 } else { 2 };
        let p = format!("{PREFIX}.layer{}", i + 1);
        vec![
            ResidualBlock::init(&mut store, &mut rng, &format!("{p}.0"), in_c, widths[i], stride, kind),
            ResidualBlock::init(&mut store, &mut rng, &format!("{p}.1"), widths[i], widths[i], 1, kind),
        ]
    });

    let (_, raw) = read_safetensors(path)?;
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_owned()).collect();
    for name in names {
        let key = &name[PREFIX.len() + 1..];
        let (shape, data) = raw
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("{} lacks tensor {key}", path.display())))?;
        let slot = store.get_mut(&name)?;
        if data.len() != slot.len() {
            return Err(Error::ShapeMismatch(format!(
                "{key}: file shape {shape:?} does not fit {:?}",
                slot.shape()
            )));
        }
        slot.data_mut().copy_from_slice(data);
    }
    let tag = tag_for("resnet18", &store);
    Ok(Encoder {
        config: EncoderConfig::Resnet18 {
            weights: path.to_owned(),
        },
        stages: Stages::Resnet { stem, layers },
        store,
        tag,
    })
}
