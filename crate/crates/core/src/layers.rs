//! Parameterised building blocks. Each layer owns only the names of its
//! tensors; values live in a [`ParamStore`].

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::{kaiming_normal, uniform_bias, ParamKind, ParamStore};
use crate::tensor::{conv2d, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: String,
    pub bias: Option<String>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        kind: ParamKind,
    ) -> Self {
        let weight = format!("{prefix}.weight");
        store.insert(&weight, kaiming_normal(rng, [out_c, in_c, kernel, kernel]), kind);
        let bias = bias.then(|| {
            let name = format!("{prefix}.bias");
            store.insert(&name, uniform_bias(rng, out_c, in_c * kernel * kernel), kind);
            name
        });
        Conv2d {
            weight,
            bias,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(&self.weight, store.get(&self.weight)?);
        let b = match &self.bias {
            Some(name) => Some(g.param(name, store.get(name)?)),
            None => None,
        };
        g.conv2d(x, w, b, self.stride, self.pad)
    }

    /// Graph-free evaluation, used for frozen stages.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let b = match &self.bias {
            Some(name) => Some(store.get(name)?),
            None => None,
        };
        conv2d(x, store.get(&self.weight)?, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub prefix: String,
}

impl BatchNorm2d {
    /// Affine parameters get `kind`; running statistics are always buffers.
    pub fn init(store: &mut ParamStore, prefix: &str, channels: usize, kind: ParamKind) -> Self {
        let shape = [1, channels, 1, 1];
        store.insert(format!("{prefix}.weight"), Tensor::full(shape, 1.0), kind);
        store.insert(format!("{prefix}.bias"), Tensor::zeros(shape), kind);
        let buf_kind = if kind == ParamKind::Frozen {
            ParamKind::Frozen
        } else {
            ParamKind::Buffer
        };
        store.insert(format!("{prefix}.running_mean"), Tensor::zeros(shape), buf_kind);
        store.insert(format!("{prefix}.running_var"), Tensor::full(shape, 1.0), buf_kind);
        BatchNorm2d {
            prefix: prefix.to_owned(),
        }
    }

    fn name(&self, field: &str) -> String {
        format!("{}.{field}", self.prefix)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (wn, bn) = (self.name("weight"), self.name("bias"));
        let gamma = g.param(&wn, store.get(&wn)?);
        let beta = g.param(&bn, store.get(&bn)?);
        let mean = store.get(&self.name("running_mean"))?;
        let var = store.get(&self.name("running_var"))?;
        g.batch_norm(x, gamma, beta, (mean, var), BN_EPS, &self.prefix)
    }

    /// Inference-mode evaluation without a graph.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let gamma = store.get(&self.name("weight"))?.data();
        let beta = store.get(&self.name("bias"))?.data();
        let mean = store.get(&self.name("running_mean"))?.data();
        let var = store.get(&self.name("running_var"))?.data();
        let [n, c, h, w] = x.shape();
        let plane = h * w;
        let mut out = x.clone();
        for b in 0..n {
            let item = out.item_mut(b);
            for ch in 0..c {
                let scale = gamma[ch] / (var[ch] + BN_EPS).sqrt();
                let shift = beta[ch] - mean[ch] * scale;
                item[ch * plane..(ch + 1) * plane]
                    .iter_mut()
                    .for_each(|v| *v = *v * scale + shift);
            }
        }
        Ok(out)
    }
}

/// Fold observed batch statistics into running averages
/// (`running ← (1 − m)·running + m·batch`).
pub fn update_running_stats(store: &mut ParamStore, prefix: &str, mean: &[f64], var: &[f64]) -> Result<()> {
    let rm = store.get_mut(&format!("{prefix}.running_mean"))?;
    for (r, &m) in rm.data_mut().iter_mut().zip(mean) {
        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
    }
    let rv = store.get_mut(&format!("{prefix}.running_var"))?;
    for (r, &v) in rv.data_mut().iter_mut().zip(var) {
        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
    }
    Ok(())
}

/// Convolution, batch norm, ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        kind: ParamKind,
    ) -> Self {
        ConvBnRelu {
            conv: Conv2d::init(store, rng, &format!("{prefix}.conv"), in_c, out_c, kernel, stride, false, kind),
            bn: BatchNorm2d::init(store, &format!("{prefix}.bn"), out_c, kind),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, store, x)?;
        let y = self.bn.forward(g, store, y)?;
        Ok(g.relu(y))
    }
}

/// Coordinate attention: direction-aware channel reweighting.
///
/// The input is average-pooled along each spatial axis, the two descriptors
/// share a 1×1 bottleneck (conv, batch norm, hard-swish), and two 1×1
/// projections followed by a sigmoid produce row and column gates. The
/// output is `x · gate_rows · gate_cols`, the same shape as `x`.
#[derive(Clone, Debug)]
pub struct CoordAttention {
    pub reduce: Conv2d,
    pub bn: BatchNorm2d,
    pub gate_h: Conv2d,
    pub gate_w: Conv2d,
}

impl CoordAttention {
    pub fn hidden_channels(channels: usize, reduction: usize) -> usize {
        (channels / reduction.max(1)).max(8)
    }

    pub fn init<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, channels: usize, reduction: usize) -> Self {
        let mip = Self::hidden_channels(channels, reduction);
        let t = ParamKind::Trainable;
        CoordAttention {
            reduce: Conv2d::init(store, rng, &format!("{prefix}.reduce"), channels, mip, 1, 1, false, t),
            bn: BatchNorm2d::init(store, &format!("{prefix}.bn"), mip, t),
            gate_h: Conv2d::init(store, rng, &format!("{prefix}.gate_h"), mip, channels, 1, 1, true, t),
            gate_w: Conv2d::init(store, rng, &format!("{prefix}.gate_w"), mip, channels, 1, 1, true, t),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let [n, c, h, w] = g.value(x).shape();
        let rows = g.mean_axis(x, 3)?; // n,c,h,1
        let cols = g.mean_axis(x, 2)?; // n,c,1,w
        let cols = g.reshape(cols, [n, c, w, 1])?;
        let y = g.concat(&[rows, cols], 2)?;
        let y = self.reduce.forward(g, store, y)?;
        let y = self.bn.forward(g, store, y)?;
        let y = g.hard_swish(y);
        let mip = g.value(y).channels();
        let yh = g.slice(y, 2, 0..h)?;
        let yw = g.slice(y, 2, h..h + w)?;
        let yw = g.reshape(yw, [n, mip, 1, w])?;
        let ah = self.gate_h.forward(g, store, yh)?;
        let ah = g.sigmoid(ah);
        let aw = self.gate_w.forward(g, store, yw)?;
        let aw = g.sigmoid(aw);
        let out = g.mul(x, ah)?;
        g.mul(out, aw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn coordinate_attention_preserves_shape_and_gates_in_unit_interval() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ca = CoordAttention::init(&mut store, &mut rng, "ca", 16, 4);
        let x0 = Tensor::from_fn([2, 16, 5, 7], |[b, c, y, x]| ((b + 2 * c + 3 * y + 5 * x) as f64).sin() + 1.5);
        let mut g = Graph::new(true);
        let x = g.input(x0.clone());
        let y = ca.forward(&mut g, &store, x).unwrap();
        let out = g.value(y);
        assert_eq!(out.shape(), x0.shape());
        // positive input, gates in (0,1): output strictly between 0 and input
        for (o, i) in out.data().iter().zip(x0.data()) {
            assert!(*o > 0.0 && o < i);
        }
    }

    #[test]
    fn frozen_batch_norm_statistics_stay_frozen() {
        let mut store = ParamStore::new();
        BatchNorm2d::init(&mut store, "bn", 3, ParamKind::Frozen);
        assert_eq!(store.kind("bn.running_mean"), Some(ParamKind::Frozen));
        let mut store = ParamStore::new();
        BatchNorm2d::init(&mut store, "bn", 3, ParamKind::Trainable);
        assert_eq!(store.kind("bn.running_var"), Some(ParamKind::Buffer));
    }

    #[test]
    fn bn_apply_matches_eval_graph() {
        let mut store = ParamStore::new();
        let bn = BatchNorm2d::init(&mut store, "bn", 2, ParamKind::Trainable);
        *store.get_mut("bn.running_mean").unwrap() = Tensor::from_vec([1, 2, 1, 1], vec![0.5, -1.0]).unwrap();
        *store.get_mut("bn.running_var").unwrap() = Tensor::from_vec([1, 2, 1, 1], vec![2.0, 0.25]).unwrap();
        let x0 = Tensor::from_fn([1, 2, 2, 2], |[_, c, y, x]| (c * 4 + y * 2 + x) as f64);
        let mut g = Graph::new(false);
        let x = g.input(x0.clone());
        let y = bn.forward(&mut g, &store, x).unwrap();
        let direct = bn.apply(&store, &x0).unwrap();
        for (a, b) in g.value(y).data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
