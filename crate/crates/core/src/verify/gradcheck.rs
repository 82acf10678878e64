//! Central finite-difference checks of reverse-mode gradients.

use crate::boxgeom::{BBox, Side};
use crate::bpn::{bpn_forward, BpnConfig, BpnParams};
use crate::nn::fan_in_uniform;
use crate::pyramid::{push_roi, PoolSpec};
use crate::tensor::{Bound, ConvSpec, Graph, ParamStore, Result, RoiTaps, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`; zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Values in `±[0.2, 1]`, keeping relu/abs kinks out of finite-difference reach.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(0.2..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

/// Loss `Σ r ⊙ f(x…)` for fixed random `r`, plus gradients w.r.t. every input.
fn weighted_loss(build: &Build<'_>, inputs: &[Tensor<f64>], weights: &Tensor<f64>, grads: bool) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
    let y = build(&mut g, &vars)?;
    let w = g.constant(weights.clone().reshape(g.shape(y))?);
    let prod = g.mul(y, w)?;
    let loss = g.sum_all(prod);
    let value = g.value(loss).item();
    if !grads {
        return Ok((value, Vec::new()));
    }
    let gr = g.backward(loss)?;
    Ok((value, vars.iter().map(|v| gr.get(*v).expect("input grad").into_data()).collect()))
}

/// Relative error between analytic and central-difference gradients of one op, in f64.
pub fn check_op(seed: u64, inputs: Vec<Tensor<f64>>, build: &Build<'_>) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out_shape = {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
        let y = build(&mut g, &vars)?;
        g.shape(y).to_vec()
    };
    let weights = random_tensor(&mut rng, &out_shape, -1.0, 1.0);
    let (_, analytic) = weighted_loss(build, &inputs, &weights, true)?;
    let h = 1e-6;
    let mut a_all = Vec::new();
    let mut n_all = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        for e in 0..t.numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[e] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[e] -= h;
            let lp = weighted_loss(build, &plus, &weights, false)?.0;
            let lm = weighted_loss(build, &minus, &weights, false)?.0;
            n_all.push((lp - lm) / (2.0 * h));
            a_all.push(analytic[i][e]);
        }
    }
    Ok(rel_err(&a_all, &n_all))
}

/// Every differentiable op of the engine, each checked in f64. Returns `(name, rel_err)`.
pub fn op_checks(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();
    let mut run = |name: &'static str, inputs: Vec<Tensor<f64>>, build: &Build<'_>| -> Result<()> {
        out.push((name, check_op(seed ^ name.len() as u64, inputs, build)?));
        Ok(())
    };

    let conv_case = |spec: ConvSpec, cin: usize, cout: usize, k: (usize, usize), hw: (usize, usize), r: &mut ChaCha8Rng| {
        vec![
            random_tensor(r, &[2, cin, hw.0, hw.1], -1.0, 1.0),
            random_tensor(r, &[cout, cin / spec.groups, k.0, k.1], -1.0, 1.0),
            random_tensor(r, &[cout], -1.0, 1.0),
        ]
    };
    let conv_build = |spec: ConvSpec| move |g: &mut Graph<f64>, v: &[Var]| g.conv2d(v[0], v[1], Some(v[2]), spec);
    run("conv2d 3x3", conv_case(ConvSpec::SAME3, 3, 4, (3, 3), (5, 6), r), &conv_build(ConvSpec::SAME3))?;
    run("conv2d 3x3 stride 2", conv_case(ConvSpec::DOWN3, 2, 3, (3, 3), (6, 5), r), &conv_build(ConvSpec::DOWN3))?;
    run("conv2d grouped", conv_case(ConvSpec::SAME3.grouped(2), 4, 2, (3, 3), (4, 4), r), &conv_build(ConvSpec::SAME3.grouped(2)))?;
    run("conv2d 1x3", conv_case(ConvSpec::ROW3, 3, 2, (1, 3), (1, 7), r), &conv_build(ConvSpec::ROW3))?;
    run("conv2d 1x1", conv_case(ConvSpec::POINT, 3, 2, (1, 1), (3, 3), r), &conv_build(ConvSpec::POINT))?;
    run(
        "linear",
        vec![random_tensor(r, &[3, 5], -1.0, 1.0), random_tensor(r, &[4, 5], -1.0, 1.0), random_tensor(r, &[4], -1.0, 1.0)],
        &|g, v| g.linear(v[0], v[1], Some(v[2])),
    )?;
    run("relu", vec![away_from_zero(r, &[3, 4])], &|g, v| Ok(g.relu(v[0])))?;
    run("add", vec![random_tensor(r, &[2, 3], -1.0, 1.0), random_tensor(r, &[2, 3], -1.0, 1.0)], &|g, v| g.add(v[0], v[1]))?;
    run("mul", vec![random_tensor(r, &[2, 3], -1.0, 1.0), random_tensor(r, &[2, 3], -1.0, 1.0)], &|g, v| g.mul(v[0], v[1]))?;
    run(
        "mul_channels",
        vec![random_tensor(r, &[2, 3, 4, 5], -1.0, 1.0), random_tensor(r, &[2, 1, 4, 5], -1.0, 1.0)],
        &|g, v| g.mul_channels(v[0], v[1]),
    )?;
    run("softmax axis 2", vec![random_tensor(r, &[2, 1, 4, 3], -2.0, 2.0)], &|g, v| g.softmax(v[0], 2))?;
    run("softmax axis 1", vec![random_tensor(r, &[3, 5], -2.0, 2.0)], &|g, v| g.softmax(v[0], 1))?;
    run("sum_axis", vec![random_tensor(r, &[2, 3, 4, 5], -1.0, 1.0)], &|g, v| g.sum_axis(v[0], 2))?;
    run("reshape", vec![random_tensor(r, &[2, 3, 4], -1.0, 1.0)], &|g, v| g.reshape(v[0], &[6, 4]))?;
    run("transpose_hw", vec![random_tensor(r, &[2, 3, 4, 5], -1.0, 1.0)], &|g, v| g.transpose_hw(v[0]))?;
    run("concat", vec![random_tensor(r, &[2, 3], -1.0, 1.0), random_tensor(r, &[1, 3], -1.0, 1.0)], &|g, v| g.concat(&[v[0], v[1]]))?;
    run("upsample2x", vec![random_tensor(r, &[1, 2, 3, 2], -1.0, 1.0)], &|g, v| g.upsample2x(v[0]))?;
    run("gather", vec![random_tensor(r, &[3, 4], -1.0, 1.0)], &|g, v| g.gather(v[0], vec![0, 5, 5, 11, 3], &[5]))?;
    run("scale", vec![random_tensor(r, &[2, 3], -1.0, 1.0)], &|g, v| Ok(g.scale(v[0], 0.37)))?;
    run("sum_all", vec![random_tensor(r, &[2, 3], -1.0, 1.0)], &|g, v| Ok(g.sum_all(v[0])))?;
    let target: Vec<f64> = vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    // |d| values kept away from 0 and from β = 1
    let sl1_in = Tensor::new(vec![6], vec![0.3, -0.6, 1.7, -2.4, 0.85, -1.3]).expect("shape");
    run("smooth_l1", vec![sl1_in], &move |g, v| g.smooth_l1(v[0], target.clone(), 1.0))?;
    run("cross_entropy", vec![random_tensor(r, &[4, 3], -2.0, 2.0)], &|g, v| g.cross_entropy(v[0], &[0, 2, 1, 2]))?;
    let boxes = [BBox { x1: 3.3, y1: 2.1, x2: 17.9, y2: 20.4 }, BBox { x1: -2.0, y1: 10.0, x2: 9.5, y2: 30.7 }];
    run("roi_align", vec![random_tensor(r, &[2, 2, 6, 7], -1.0, 1.0)], &move |g, v| {
        let mut taps = RoiTaps::new(3);
        for (b, bx) in boxes.iter().enumerate() {
            push_roi(&mut taps, b, bx, 2, (6, 7), PoolSpec { out: 3, sampling: 2 }).map_err(|e| {
                crate::tensor::TensorError::Invalid { op: "roi_align", msg: e.to_string() }
            })?;
        }
        g.roi_align(v[0], taps)
    })?;
    Ok(out)
}

/// BPN with every weight randomized (including the output layer).
pub fn random_bpn(seed: u64, cfg: &BpnConfig) -> (ParamStore, BpnParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let params = BpnParams::new(&mut store, "bpn", cfg, &mut rng);
    for p in store.iter_mut() {
        let shape = p.value.shape().to_vec();
        let fan_in = if shape.len() > 1 { shape[1..].iter().product() } else { 4 };
        p.value = fan_in_uniform(&mut rng, &shape, fan_in);
    }
    (store, params)
}

fn bpn_loss<T: Scalar>(store: &ParamStore, values: Option<&[Tensor<f64>]>, params: &BpnParams, cfg: &BpnConfig, feats: &[Tensor<f64>; 4], weights: &[Tensor<f64>; 4]) -> Result<(Graph<T>, Bound, Vec<Var>, Var)> {
    let mut g = Graph::<T>::new();
    let bound = match values {
        Some(v) => Bound::from_vars(v.iter().map(|t| g.param(t.cast())).collect()),
        None => store.bind(&mut g),
    };
    let mut inputs = Vec::new();
    let mut total: Option<Var> = None;
    for (k, side) in Side::ALL.into_iter().enumerate() {
        let x = g.input(feats[k].cast(), true);
        inputs.push(x);
        let y = bpn_forward(&mut g, &bound, x, side, params, cfg)?;
        let w = g.constant(weights[k].cast());
        let l = g.mul(y, w)?;
        let l = g.sum_all(l);
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    Ok((g, bound, inputs, total.expect("four sides")))
}

/// Composed BPN check over all four sides: analytic gradients in `T` against
/// f64 central differences, w.r.t. every parameter and the input features.
pub fn bpn_check<T: Scalar>(seed: u64, cfg: &BpnConfig, rois: usize) -> Result<f64> {
    let (store, params) = random_bpn(seed, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB9);
    let shape = [rois, cfg.channels, cfg.pool, cfg.pool];
    let feats: [Tensor<f64>; 4] = std::array::from_fn(|_| random_tensor(&mut rng, &shape, -1.0, 1.0));
    let weights: [Tensor<f64>; 4] = std::array::from_fn(|_| random_tensor(&mut rng, &[rois, cfg.num_categories], -1.0, 1.0));

    let (g, bound, inputs, loss) = bpn_loss::<T>(&store, None, &params, cfg, &feats, &weights)?;
    let gr = g.backward(loss)?;
    let mut analytic: Vec<f64> = Vec::new();
    for v in bound.vars().iter().chain(&inputs) {
        analytic.extend(gr.get(*v).expect("grad").data().iter().map(|x| x.as_f64()));
    }

    let base: Vec<Tensor<f64>> = store.iter().map(|p| p.value.cast()).collect();
    let eval = |vals: &[Tensor<f64>], fs: &[Tensor<f64>; 4]| -> Result<f64> {
        let (g, _, _, loss) = bpn_loss::<f64>(&store, Some(vals), &params, cfg, fs, &weights)?;
        Ok(g.value(loss).item())
    };
    let h = 1e-6;
    let mut numeric = Vec::with_capacity(analytic.len());
    for i in 0..base.len() {
        for e in 0..base[i].numel() {
            let mut plus = base.clone();
            plus[i].data_mut()[e] += h;
            let mut minus = base.clone();
            minus[i].data_mut()[e] -= h;
            numeric.push((eval(&plus, &feats)? - eval(&minus, &feats)?) / (2.0 * h));
        }
    }
    for k in 0..4 {
        for e in 0..feats[k].numel() {
            let mut plus = feats.clone();
            plus[k].data_mut()[e] += h;
            let mut minus = feats.clone();
            minus[k].data_mut()[e] -= h;
            numeric.push((eval(&base, &plus)? - eval(&base, &minus)?) / (2.0 * h));
        }
    }
    Ok(rel_err(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_basics() {
        assert_eq!(rel_err(&[0.0], &[0.0]), 0.0);
        assert!((rel_err(&[1.0, 0.0], &[1.0, 0.1]) - 0.1 / 1.01f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // y = x·x where the second factor is copied into a constant, hiding half the gradient
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let err = check_op(1, vec![x], &|g, v| {
            let c = g.constant(g.value(v[0]).clone());
            g.mul(v[0], c)
        })
        .unwrap();
        assert!(err > 0.1, "{err}");
    }
}
