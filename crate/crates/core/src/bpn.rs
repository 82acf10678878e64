//! Boundary predict network: maps one pooled boundary feature `[d, k, k]` to a
//! per-category displacement for one box side.
//!
//! Per side: two 3×3 convs, an attention map (grouped 3×3 conv to
//! `attention_groups` channels, 1×1 conv to one channel, softmax along the
//! boundary-parallel axis), attention-weighted sum along that axis giving a
//! `d×1×k` vector, two 1×3 convs, and a final fully connected layer with one
//! unit per category.
//!
//! Features are oriented so the boundary-parallel direction is always the
//! row axis (H): left/right areas pass through, up/bottom areas are transposed.

use crate::boxgeom::Side;
use crate::nn::{flatten, Conv2d, Init, Linear};
use crate::tensor::{Bound, ConvSpec, Graph, ParamStore, Result, Scalar, TensorError, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BpnConfig {
    pub channels: usize,
    pub pool: usize,
    pub num_categories: usize,
    pub attention_groups: usize,
}

impl BpnConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TensorError::Invalid { op: "bpn config", msg });
        if self.attention_groups == 0 || self.channels % self.attention_groups != 0 {
            return bad(format!("channels {} not divisible by attention_groups {}", self.channels, self.attention_groups));
        }
        if self.pool < 3 {
            return bad(format!("pool size {} < 3", self.pool));
        }
        if self.num_categories == 0 {
            return bad("num_categories must be > 0".into());
        }
        Ok(())
    }
}

/// Parameters of one side's network.
#[derive(Debug, Clone, Copy)]
pub struct SideNet {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub att_group: Conv2d,
    pub att_proj: Conv2d,
    pub conv3: Conv2d,
    pub conv4: Conv2d,
    pub fc: Linear,
}

impl SideNet {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: &BpnConfig, rng: &mut R) -> Self {
        let d = cfg.channels;
        let ag = cfg.attention_groups;
        let n = |s: &str| format!("{prefix}.{s}");
        SideNet {
            conv1: Conv2d::new(store, &n("conv1"), d, d, (3, 3), ConvSpec::SAME3, Init::FanIn, rng),
            conv2: Conv2d::new(store, &n("conv2"), d, d, (3, 3), ConvSpec::SAME3, Init::FanIn, rng),
            att_group: Conv2d::new(store, &n("att_group"), d, ag, (3, 3), ConvSpec::SAME3.grouped(ag), Init::FanIn, rng),
            att_proj: Conv2d::new(store, &n("att_proj"), ag, 1, (1, 1), ConvSpec::POINT, Init::FanIn, rng),
            conv3: Conv2d::new(store, &n("conv3"), d, d, (1, 3), ConvSpec::ROW3, Init::FanIn, rng),
            conv4: Conv2d::new(store, &n("conv4"), d, d, (1, 3), ConvSpec::ROW3, Init::FanIn, rng),
            fc: Linear::new(store, &n("fc"), d * cfg.pool, cfg.num_categories, Init::Zero, rng),
        }
    }
}

/// Four mirrored side networks (left, right, up, bottom); no sharing across sides.
#[derive(Debug, Clone, Copy)]
pub struct BpnParams {
    pub sides: [SideNet; 4],
}

impl BpnParams {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: &BpnConfig, rng: &mut R) -> Self {
        let sides = Side::ALL.map(|s| SideNet::new(store, &format!("{prefix}.{}", s.name()), cfg, rng));
        BpnParams { sides }
    }

    pub fn side(&self, side: Side) -> &SideNet {
        &self.sides[side_index(side)]
    }
}

pub fn side_index(side: Side) -> usize {
    match side {
        Side::Left => 0,
        Side::Right => 1,
        Side::Up => 2,
        Side::Bottom => 3,
    }
}

/// Puts the boundary-parallel direction on the row axis.
pub fn orient_feature<T: Scalar>(g: &mut Graph<T>, x: Var, side: Side) -> Result<Var> {
    if side.is_vertical() {
        Ok(x)
    } else {
        g.transpose_hw(x)
    }
}

/// Attention map `[N,1,k,k]`, each column summing to one along the row axis.
pub fn attention<T: Scalar>(g: &mut Graph<T>, p: &Bound, net: &SideNet, x: Var) -> Result<Var> {
    let a = net.att_group.forward(g, p, x)?;
    let a = net.att_proj.forward(g, p, a)?;
    g.softmax(a, 2)
}

/// Runs the side network on oriented-or-not features `[N,d,k,k]`; returns `[N, num_categories]`.
pub fn bpn_forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    feature: Var,
    side: Side,
    params: &BpnParams,
    cfg: &BpnConfig,
) -> Result<Var> {
    let s = g.shape(feature);
    if s.len() != 4 || s[1] != cfg.channels || s[2] != cfg.pool || s[3] != cfg.pool {
        return Err(TensorError::Shape {
            op: "bpn_forward",
            left: s.to_vec(),
            right: vec![0, cfg.channels, cfg.pool, cfg.pool],
        });
    }
    let net = params.side(side);
    let x = orient_feature(g, feature, side)?;
    let x = net.conv1.forward(g, p, x)?;
    let x = g.relu(x);
    let x = net.conv2.forward(g, p, x)?;
    let x = g.relu(x);
    let att = attention(g, p, net, x)?;
    let x = g.mul_channels(x, att)?;
    let x = g.sum_axis(x, 2)?;
    let x = net.conv3.forward(g, p, x)?;
    let x = g.relu(x);
    let x = net.conv4.forward(g, p, x)?;
    let x = g.relu(x);
    let x = flatten(g, x)?;
    net.fc.forward(g, p, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tensor, ParamId};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> BpnConfig {
        BpnConfig { channels: 8, pool: 7, num_categories: 3, attention_groups: 4 }
    }

    fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f32) {
        for p in store.iter_mut() {
            for v in p.value.data_mut() {
                *v = rng.gen_range(-scale..scale);
            }
        }
    }

    fn input(rng: &mut ChaCha8Rng, n: usize, c: &BpnConfig) -> Tensor<f64> {
        let len = n * c.channels * c.pool * c.pool;
        Tensor::new(vec![n, c.channels, c.pool, c.pool], (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        assert!(BpnConfig { attention_groups: 3, ..cfg() }.validate().is_err());
        assert!(BpnConfig { pool: 2, ..cfg() }.validate().is_err());
    }

    #[test]
    fn zero_fc_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = cfg();
        let mut store = ParamStore::new();
        let params = BpnParams::new(&mut store, "bpn", &c, &mut rng);
        let mut g = Graph::<f64>::new();
        let p = store.bind(&mut g);
        let x = g.constant(input(&mut rng, 2, &c));
        for side in Side::ALL {
            let out = bpn_forward(&mut g, &p, x, side, &params, &c).unwrap();
            assert_eq!(g.shape(out), &[2, 3]);
            assert!(g.value(out).data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn attention_columns_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = cfg();
        let mut store = ParamStore::new();
        let params = BpnParams::new(&mut store, "bpn", &c, &mut rng);
        randomize(&mut store, &mut rng, 0.5);
        let mut g = Graph::<f64>::new();
        let p = store.bind(&mut g);
        let x = g.constant(input(&mut rng, 3, &c));
        let a = attention(&mut g, &p, params.side(Side::Left), x).unwrap();
        assert_eq!(g.shape(a), &[3, 1, 7, 7]);
        let v = g.value(a).data();
        for n in 0..3 {
            for col in 0..7 {
                let s: f64 = (0..7).map(|row| v[n * 49 + row * 7 + col]).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn orientation_is_an_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::<f64>::new();
        let x = g.constant(input(&mut rng, 1, &cfg()));
        let l = orient_feature(&mut g, x, Side::Left).unwrap();
        assert_eq!(l, x);
        let u = orient_feature(&mut g, x, Side::Up).unwrap();
        let back = orient_feature(&mut g, u, Side::Up).unwrap();
        assert_eq!(g.value(back), g.value(x));
        let xv = g.value(x).data();
        let uv = g.value(u).data();
        assert_eq!(uv[1 * 7 + 4], xv[4 * 7 + 1]);
    }

    #[test]
    fn category_permutation_permutes_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = cfg();
        let mut store = ParamStore::new();
        let params = BpnParams::new(&mut store, "bpn", &c, &mut rng);
        randomize(&mut store, &mut rng, 0.3);
        let xin = input(&mut rng, 2, &c);
        let run = |store: &ParamStore| {
            let mut g = Graph::<f64>::new();
            let p = store.bind(&mut g);
            let x = g.constant(xin.clone());
            let out = bpn_forward(&mut g, &p, x, Side::Right, &params, &c).unwrap();
            g.value(out).data().to_vec()
        };
        let base = run(&store);
        // swap categories 0 and 2 in the right side's final layer
        let fc = params.side(Side::Right).fc;
        let mut swapped = store.clone();
        let din = c.channels * c.pool;
        let wp = swapped.get_mut(fc.w);
        let w = wp.value.data_mut();
        for j in 0..din {
            w.swap(j, 2 * din + j);
        }
        swapped.get_mut(fc.b).value.data_mut().swap(0, 2);
        let perm = run(&swapped);
        for n in 0..2 {
            assert_eq!(perm[n * 3], base[n * 3 + 2]);
            assert_eq!(perm[n * 3 + 1], base[n * 3 + 1]);
            assert_eq!(perm[n * 3 + 2], base[n * 3]);
        }
        let _ = ParamId(0);
    }

    #[test]
    fn rejects_wrong_feature_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = cfg();
        let mut store = ParamStore::new();
        let params = BpnParams::new(&mut store, "bpn", &c, &mut rng);
        let mut g = Graph::<f64>::new();
        let p = store.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[1, 4, 7, 7]));
        assert!(bpn_forward(&mut g, &p, x, Side::Left, &params, &c).is_err());
    }
}
