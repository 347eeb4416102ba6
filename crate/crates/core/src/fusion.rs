//! Multi-scale feature fusion of the concatenated information.
//!
//! Per scale `h_n = CA(conv3×3(CI_n))`, then top-down:
//! `g3 = h3`, `g2 = h2 + conv1×1(up(g3))`, `g1 = h1 + conv1×1(up(g2))`.
//! Afterwards every `g_n` is weighted by its spatial attention map.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::layers::{Conv2d, CoordAttention};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionFlags {
    pub multi_scale: bool,
    pub coord_attention: bool,
}

impl Default for FusionFlags {
    fn default() -> Self {
        FusionFlags {
            multi_scale: true,
            coord_attention: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Msff {
    pub convs: [Conv2d; 3],
    pub attention: [CoordAttention; 3],
    /// `proj[0]` maps scale 2 channels to scale 1, `proj[1]` scale 3 to 2.
    pub proj: [Conv2d; 2],
}

fn zero_bias(store: &mut ParamStore, conv: &Conv2d) {
    if let Some(b) = &conv.bias {
        let t = store.get_mut(b).expect("bias just inserted");
        t.data_mut().fill(0.0);
    }
}

impl Msff {
    /// `channels` are the CI channel counts per scale. Convolution biases
    /// start at zero.
    pub fn init<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, channels: [usize; 3], reduction: usize) -> Self {
        let t = ParamKind::Trainable;
        let convs: [Conv2d; 3] = std::array::from_fn(|k| {
            let c = channels[k];
            Conv2d::init(store, rng, &format!("{prefix}.conv{}", k + 1), c, c, 3, 1, true, t)
        });
        let attention: [CoordAttention; 3] =
            std::array::from_fn(|k| CoordAttention::init(store, rng, &format!("{prefix}.ca{}", k + 1), channels[k], reduction));
        let proj: [Conv2d; 2] = std::array::from_fn(|k| {
            Conv2d::init(store, rng, &format!("{prefix}.proj{}", k + 1), channels[k + 1], channels[k], 1, 1, true, t)
        });
        for c in convs.iter().chain(&proj) {
            zero_bias(store, c);
        }
        Msff { convs, attention, proj }
    }

    /// Fused features `[g1, g2, g3]` before attention weighting.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, ci: [Var; 3], flags: FusionFlags) -> Result<[Var; 3]> {
        let mut h = Vec::with_capacity(3);
        for k in 0..3 {
            let y = self.convs[k].forward(g, store, ci[k])?;
            let y = if flags.coord_attention {
                self.attention[k].forward(g, store, y)?
            } else {
                y
            };
            h.push(y);
        }
        if !flags.multi_scale {
            return Ok([h[0], h[1], h[2]]);
        }
        let g3 = h[2];
        let g2 = self.top_down(g, store, 1, h[1], g3)?;
        let g1 = self.top_down(g, store, 0, h[0], g2)?;
        Ok([g1, g2, g3])
    }

    fn top_down(&self, g: &mut Graph, store: &ParamStore, k: usize, fine: Var, coarse: Var) -> Result<Var> {
        let [_, _, h, w] = g.value(fine).shape();
        let up = g.resize_bilinear(coarse, h, w);
        let up = self.proj[k].forward(g, store, up)?;
        g.add(fine, up)
    }
}

/// `w_n = g_n ⊙ M_n`, maps broadcast across channels.
pub fn apply_spatial_attention(g: &mut Graph, fused: [Var; 3], maps: [Var; 3]) -> Result<[Var; 3]> {
    Ok([
        g.mul(fused[0], maps[0])?,
        g.mul(fused[1], maps[1])?,
        g.mul(fused[2], maps[2])?,
    ])
}

/// Graph-free form of [`apply_spatial_attention`] for one scale.
pub fn weight_by_map(features: &Tensor, map: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new(false);
    let f = g.input(features.clone());
    let m = g.input(map.clone());
    let out = g.mul(f, m)?;
    Ok(g.into_value(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamStore, Msff) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = Msff::init(&mut store, &mut rng, "fusion", [4, 8, 16], 16);
        (store, m)
    }

    fn inputs(g: &mut Graph, value: impl Fn([usize; 4]) -> f64 + Copy) -> [Var; 3] {
        [
            g.input(Tensor::from_fn([2, 4, 8, 8], value)),
            g.input(Tensor::from_fn([2, 8, 4, 4], value)),
            g.input(Tensor::from_fn([2, 16, 2, 2], value)),
        ]
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let (store, m) = setup();
        let mut g = Graph::new(false);
        let ci = inputs(&mut g, |_| 0.0);
        for v in m.forward(&mut g, &store, ci, FusionFlags::default()).unwrap() {
            assert_eq!(g.value(v).max_abs(), 0.0);
        }
    }

    #[test]
    fn shapes_are_preserved() {
        let (store, m) = setup();
        let mut g = Graph::new(true);
        let ci = inputs(&mut g, |[b, c, y, x]| ((b + c * y + x) as f64).cos());
        let out = m.forward(&mut g, &store, ci, FusionFlags::default()).unwrap();
        for k in 0..3 {
            assert_eq!(g.value(out[k]).shape(), g.value(ci[k]).shape());
        }
    }

    #[test]
    fn without_multi_scale_each_output_depends_on_its_own_scale_only() {
        let (store, m) = setup();
        let flags = FusionFlags {
            multi_scale: false,
            coord_attention: true,
        };
        let mut g = Graph::new(false);
        let ci = inputs(&mut g, |[_, c, y, x]| ((c + y * x) as f64).sin());
        let a = m.forward(&mut g, &store, ci, flags).unwrap();
        let mut g2 = Graph::new(false);
        let mut ci2 = inputs(&mut g2, |[_, c, y, x]| ((c + y * x) as f64).sin());
        ci2[2] = g2.input(Tensor::full([2, 16, 2, 2], 3.0));
        let b = m.forward(&mut g2, &store, ci2, flags).unwrap();
        assert_eq!(g.value(a[0]), g2.value(b[0]));
        assert_eq!(g.value(a[1]), g2.value(b[1]));
    }

    #[test]
    fn spatial_attention_is_broadcast_product() {
        let f = Tensor::from_fn([1, 3, 2, 2], |[_, c, y, x]| (c * 4 + y * 2 + x) as f64);
        let m = Tensor::from_fn([1, 1, 2, 2], |[_, _, y, x]| (y * 2 + x) as f64 * 0.5);
        let w = weight_by_map(&f, &m).unwrap();
        for c in 0..3 {
            for y in 0..2 {
                for x in 0..2 {
                    assert_eq!(w.get([0, c, y, x]), f.get([0, c, y, x]) * m.get([0, 0, y, x]));
                }
            }
        }
        assert_eq!(weight_by_map(&f, &Tensor::full([1, 1, 2, 2], 1.0)).unwrap(), f);
    }
}
