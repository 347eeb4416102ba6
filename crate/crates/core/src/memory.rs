//! Memory pool of normal feature pyramids and the difference features
//! derived from it.
//!
//! For an input pyramid `II` and memory pyramids `MI_1..MI_N`:
//!
//! * `DI_i = |MI_i − II|` elementwise at every scale;
//! * `DI*` is the `DI_i` with the smallest total sum over all three scales
//!   (lowest index on ties);
//! * `CI_n = concat(II_n, DI*_n)` along channels, input first;
//! * `M3 = mean_c(DI*_3)`, `M2 = mean_c(DI*_2) ⊙ up(M3)`,
//!   `M1 = mean_c(DI*_1) ⊙ up(M2)`, with bilinear upsampling.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_io::{Image, ImageSource};
use crate::encoder::{Encoder, FeaturePyramid};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// How `DI*` is chosen among the memory samples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArgminMode {
    /// One sample for all scales, by the sum over every scale.
    #[default]
    Global,
    /// An independent choice at each scale.
    PerScale,
}

/// Frozen pyramids of `N` normal images, each with batch size 1.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryPool {
    items: Vec<FeaturePyramid>,
    sources: Vec<String>,
    seed: u64,
}

impl MemoryPool {
    pub fn new(items: Vec<FeaturePyramid>, sources: Vec<String>, seed: u64) -> Result<Self> {
        let first = items.first().ok_or(Error::NotEnoughItems { needed: 1, got: 0 })?;
        let shapes = first.shapes();
        if shapes.iter().any(|s| s[0] != 1) {
            return Err(shape_err("memory pyramids must have batch size 1"));
        }
        if let Some(bad) = items.iter().find(|p| p.shapes() != shapes) {
            return Err(shape_err(format!(
                "memory pyramid shapes differ: {:?} vs {:?}",
                shapes,
                bad.shapes()
            )));
        }
        if sources.len() != items.len() {
            return Err(shape_err("one source id per memory item required"));
        }
        Ok(MemoryPool { items, sources, seed })
    }

    /// Encode the given images into a pool.
    pub fn from_images(enc: &Encoder, images: &[Image], sources: Vec<String>, seed: u64) -> Result<Self> {
        let items = images
            .iter()
            .map(|img| enc.extract_pyramid(&img.to_tensor()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(items, sources, seed)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[FeaturePyramid] {
        &self.items
    }

    pub fn sources(&self) -> &[String] {
        &self.sources
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn shapes(&self) -> [[usize; 4]; 3] {
        self.items[0].shapes()
    }
}

/// Indices of `n` distinct items out of `len`, in ascending order,
/// determined by `seed`.
pub fn select_memory_indices(len: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n == 0 || n > len {
        return Err(Error::NotEnoughItems { needed: n.max(1), got: len });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, len, n).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Sample `n` training images without replacement and store their frozen
/// pyramids.
pub fn build_pool<S: ImageSource + ?Sized>(enc: &Encoder, train: &S, n: usize, seed: u64) -> Result<MemoryPool> {
    let idx = select_memory_indices(train.len(), n, seed)?;
    let items = idx
        .par_iter()
        .map(|&i| enc.extract_pyramid(&train.load(i)?.to_tensor()))
        .collect::<Result<Vec<_>>>()?;
    let sources = idx.iter().map(|&i| train.id(i)).collect();
    MemoryPool::new(items, sources, seed)
}

fn check_compatible(pool: &MemoryPool, ii: &FeaturePyramid) -> Result<()> {
    if ii.shapes() != pool.shapes() {
        return Err(shape_err(format!(
            "input pyramid {:?} does not match memory {:?}",
            ii.shapes(),
            pool.shapes()
        )));
    }
    Ok(())
}

fn abs_diff(a: &Tensor, b: &Tensor) -> Tensor {
    a.zip_map(b, |x, y| (x - y).abs()).expect("shapes checked")
}

/// `DI_i = |MI_i − II|` for every memory sample. `ii` has batch size 1.
pub fn difference_all(pool: &MemoryPool, ii: &FeaturePyramid) -> Result<Vec<[Tensor; 3]>> {
    check_compatible(pool, ii)?;
    Ok(pool
        .items
        .par_iter()
        .map(|m| std::array::from_fn(|k| abs_diff(&m.levels[k], &ii.levels[k])))
        .collect())
}

/// The selected difference features `DI*` (batch size 1 per item, or
/// stacked).
#[derive(Clone, Debug, PartialEq)]
pub struct DifferenceInfo {
    pub levels: [Tensor; 3],
    /// Selected memory index per batch item and scale.
    pub indices: Vec<[usize; 3]>,
}

impl DifferenceInfo {
    /// Selected memory index of the first item under global selection.
    pub fn index(&self) -> usize {
        self.indices[0][0]
    }

    pub fn zeros_like(ii: &FeaturePyramid) -> Self {
        DifferenceInfo {
            levels: ii.levels.clone().map(|t| Tensor::zeros(t.shape())),
            indices: vec![[0; 3]; ii.batch()],
        }
    }

    pub fn stack(items: &[DifferenceInfo]) -> Result<Self> {
        let level = |k: usize| Tensor::stack(&items.iter().map(|d| d.levels[k].clone()).collect::<Vec<_>>());
        Ok(DifferenceInfo {
            levels: [level(0)?, level(1)?, level(2)?],
            indices: items.iter().flat_map(|d| d.indices.iter().copied()).collect(),
        })
    }
}

fn argmin(sums: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, s) in sums.enumerate() {
        // strict comparison keeps the lowest index on ties
        if s < best.1 {
            best = (i, s);
        }
    }
    best.0
}

/// Pick `DI*` from precomputed differences.
pub fn best_difference(dis: &[[Tensor; 3]], mode: ArgminMode) -> Result<DifferenceInfo> {
    if dis.is_empty() {
        return Err(Error::NotEnoughItems { needed: 1, got: 0 });
    }
    let sums: Vec<[f64; 3]> = dis.iter().map(|d| d.each_ref().map(Tensor::sum)).collect();
    let indices = choose(&sums, mode);
    Ok(DifferenceInfo {
        levels: std::array::from_fn(|k| dis[indices[k]][k].clone()),
        indices: vec![indices],
    })
}

fn choose(sums: &[[f64; 3]], mode: ArgminMode) -> [usize; 3] {
    match mode {
        ArgminMode::Global => [argmin(sums.iter().map(|s| s[0] + s[1] + s[2])); 3],
        ArgminMode::PerScale => std::array::from_fn(|k| argmin(sums.iter().map(|s| s[k]))),
    }
}

/// `best_difference(difference_all(..))` without materialising all `N`
/// difference pyramids. `ii` may hold a batch; each item is matched
/// independently.
pub fn select_best(pool: &MemoryPool, ii: &FeaturePyramid, mode: ArgminMode) -> Result<DifferenceInfo> {
    let per_item = (0..ii.batch())
        .map(|n| {
            let item = ii.item(n);
            check_compatible(pool, &item)?;
            let sums: Vec<[f64; 3]> = pool
                .items
                .par_iter()
                .map(|m| {
                    std::array::from_fn(|k| {
                        m.levels[k]
                            .data()
                            .iter()
                            .zip(item.levels[k].data())
                            .map(|(a, b)| (a - b).abs())
                            .sum()
                    })
                })
                .collect();
            let indices = choose(&sums, mode);
            Ok(DifferenceInfo {
                levels: std::array::from_fn(|k| abs_diff(&pool.items[indices[k]].levels[k], &item.levels[k])),
                indices: vec![indices],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    DifferenceInfo::stack(&per_item)
}

/// `CI_n = concat(II_n, DI*_n)` along channels.
pub fn concat_info(ii: &FeaturePyramid, di: &DifferenceInfo) -> Result<[Tensor; 3]> {
    let mut out = Vec::with_capacity(3);
    for k in 0..3 {
        out.push(Tensor::concat_channels(&[&ii.levels[k], &di.levels[k]])?);
    }
    Ok(out.try_into().expect("three scales"))
}

/// Spatial attention maps `[M1, M2, M3]`, each `[N, 1, h, w]`.
pub fn attention_maps(di: &DifferenceInfo) -> [Tensor; 3] {
    let m3 = di.levels[2].channel_mean();
    let cascade = |d: &Tensor, coarse: &Tensor| {
        let up = coarse.resize_bilinear(d.height(), d.width());
        d.channel_mean().zip_map(&up, |a, b| a * b).expect("same spatial size")
    };
    let m2 = cascade(&di.levels[1], &m3);
    let m1 = cascade(&di.levels[0], &m2);
    [m1, m2, m3]
}

/// Attention maps equal to one everywhere, for the ablated network.
pub fn unit_maps(ii: &FeaturePyramid) -> [Tensor; 3] {
    ii.levels.each_ref().map(|t| {
        let [n, _, h, w] = t.shape();
        Tensor::full([n, 1, h, w], 1.0)
    })
}
