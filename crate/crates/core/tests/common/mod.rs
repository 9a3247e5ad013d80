//! Reference implementations used as independent oracles. Everything here is
//! written as plain loop nests over the textbook definitions and shares no
//! code with the library kernels.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tno::autodiff::{Activation, BnMode, Tape, Var};
use std::f64::consts::PI;

use tno::data::{
    coordinate_grid, grf_sample, max_stable_dt, solve_advdiff2d, solve_heat2d, Boundary, CoefficientField, Grf,
};
use tno::model::{Session, TnoConfig, TnoModel, Variant};
use tno::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).unwrap()
}

pub fn random_tensor_f32(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0f32..1.0)).unwrap()
}

/// Six-deep loop nest: out[n,o,i,j] = b[o] + sum_{c,p,q} x[n,c,i*s+p-pad,j*s+q-pad] w[o,c,p,q].
pub fn naive_conv2d(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 4],
    b: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [bn, cin, h, wd] = xs;
    let [cout, _, kh, kw] = ws;
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; bn * cout * ho * wo];
    for n in 0..bn {
        for o in 0..cout {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = b[o];
                    for c in 0..cin {
                        for p in 0..kh {
                            for q in 0..kw {
                                let ii = (i * stride + p) as i64 - pad as i64;
                                let jj = (j * stride + q) as i64 - pad as i64;
                                if ii < 0 || jj < 0 || ii >= h as i64 || jj >= wd as i64 {
                                    continue;
                                }
                                let xv = x[((n * cin + c) * h + ii as usize) * wd + jj as usize];
                                acc += xv * w[((o * cin + c) * kh + p) * kw + q];
                            }
                        }
                    }
                    out[((n * cout + o) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    (out, [bn, cout, ho, wo])
}

/// Scatter-add definition of the transposed convolution.
pub fn naive_conv_transpose2d(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 4],
    b: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [bn, cin, h, wd] = xs;
    let [_, cout, kh, kw] = ws;
    let ho = (h - 1) * stride + kh - 2 * pad;
    let wo = (wd - 1) * stride + kw - 2 * pad;
    let mut out = vec![0.0; bn * cout * ho * wo];
    for n in 0..bn {
        for o in 0..cout {
            for v in out[(n * cout + o) * ho * wo..(n * cout + o + 1) * ho * wo].iter_mut() {
                *v = b[o];
            }
        }
        for c in 0..cin {
            for i in 0..h {
                for j in 0..wd {
                    let xv = x[((n * cin + c) * h + i) * wd + j];
                    for o in 0..cout {
                        for p in 0..kh {
                            for q in 0..kw {
                                let oi = (i * stride + p) as i64 - pad as i64;
                                let oj = (j * stride + q) as i64 - pad as i64;
                                if oi < 0 || oj < 0 || oi >= ho as i64 || oj >= wo as i64 {
                                    continue;
                                }
                                out[((n * cout + o) * ho + oi as usize) * wo + oj as usize] +=
                                    xv * w[((c * cout + o) * kh + p) * kw + q];
                            }
                        }
                    }
                }
            }
        }
    }
    (out, [bn, cout, ho, wo])
}

/// Window `[floor(i*H/S), ceil((i+1)*H/S))` averaged with exact integer bounds.
pub fn naive_adaptive_pool(x: &[f64], planes: usize, h: usize, w: usize, s: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(planes * s * s);
    for p in 0..planes {
        for i in 0..s {
            let r0 = (i * h) / s;
            let r1 = ((i + 1) * h + s - 1) / s;
            for j in 0..s {
                let c0 = (j * w) / s;
                let c1 = ((j + 1) * w + s - 1) / s;
                let mut acc = 0.0;
                let mut cnt = 0.0;
                for r in r0..r1 {
                    for c in c0..c1 {
                        acc += x[(p * h + r) * w + c];
                        cnt += 1.0;
                    }
                }
                out.push(acc / cnt);
            }
        }
    }
    out
}

/// Per-pixel bilinear interpolation with half-pixel centres.
pub fn naive_bilinear(x: &[f64], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let sample = |plane: usize, r: usize, c: usize| x[(plane * h + r) * w + c];
    let coord = |d: usize, src: usize, dst: usize| -> (usize, usize, f64) {
        let mut pos = (d as f64 + 0.5) * src as f64 / dst as f64 - 0.5;
        if pos < 0.0 {
            pos = 0.0;
        }
        let lo = (pos.floor() as usize).min(src - 1);
        let hi = if lo + 1 < src { lo + 1 } else { lo };
        (lo, hi, pos - lo as f64)
    };
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        for i in 0..oh {
            let (r0, r1, fr) = coord(i, h, oh);
            for j in 0..ow {
                let (c0, c1, fc) = coord(j, w, ow);
                let top = sample(p, r0, c0) * (1.0 - fc) + sample(p, r0, c1) * fc;
                let bot = sample(p, r1, c0) * (1.0 - fc) + sample(p, r1, c1) * fc;
                out.push(top * (1.0 - fr) + bot * fr);
            }
        }
    }
    out
}

pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs() / scale))
}

/// Norm-wise relative error between analytic and finite-difference gradients
/// of `f` for every input, using central differences with step `h`.
pub fn gradcheck(
    inputs: &[Tensor<f64>],
    h: f64,
    f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var,
) -> Vec<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let eval = |perturbed: &[Tensor<f64>]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
        let l = f(&mut t, &vs);
        t.value(l).data()[0]
    };
    let mut errs = Vec::new();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        let mut numeric = vec![0.0; inputs[k].numel()];
        let mut work = inputs.to_vec();
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let up = eval(&work);
            work[k].data_mut()[i] = orig - h;
            let down = eval(&work);
            work[k].data_mut()[i] = orig;
            numeric[i] = (up - down) / (2.0 * h);
        }
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt()
            + numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
        errs.push(if norm < 1e-12 { diff } else { diff / norm });
    }
    errs
}

/// Reduces a tensor-valued output to a scalar through a fixed random projection.
pub fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Var {
    let shape = tape.value(out).shape().to_vec();
    let mut r = rng(seed);
    let proj = random_tensor(&mut r, &shape);
    let p = tape.constant(proj);
    let prod = tape.hadamard(out, p).unwrap();
    tape.sum(prod)
}

/// Norm-wise gradient errors of every layer kernel on one random
/// configuration, labelled by layer.
pub fn layer_gradcheck(seed: u64) -> Vec<(String, f64)> {
    let worst = |e: &[f64]| e.iter().fold(0.0f64, |m, &x| m.max(x));
    let mut out = Vec::new();
    let mut r = rng(1000 + seed);
    let h = r.gen_range(2..=8usize);
    let w = r.gen_range(2..=8usize);
    let x = random_tensor(&mut r, &[2, 2, h, w]);

    let errs = gradcheck(
        &[x.clone(), random_tensor(&mut r, &[3, 2, 3, 3]), random_tensor(&mut r, &[3])],
        1e-5,
        &|tape, v| {
            let y = tape.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap();
            project(tape, y, seed)
        },
    );
    out.push(("conv2d".to_string(), worst(&errs)));

    let errs = gradcheck(
        &[x.clone(), random_tensor(&mut r, &[2, 3, 4, 4]), random_tensor(&mut r, &[3])],
        1e-5,
        &|tape, v| {
            let y = tape.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1).unwrap();
            project(tape, y, seed)
        },
    );
    out.push(("deconv".to_string(), worst(&errs)));

    let errs = gradcheck(
        &[x.clone(), random_tensor(&mut r, &[2]), random_tensor(&mut r, &[2])],
        1e-5,
        &|tape, v| {
            let (y, _) = tape
                .batch_norm2d(v[0], v[1], v[2], (&[0.0; 2], &[1.0; 2]), BnMode::Train, 1e-5)
                .unwrap();
            project(tape, y, seed)
        },
    );
    out.push(("bn".to_string(), worst(&errs)));

    let s = r.gen_range(1..=h.min(w));
    let errs = gradcheck(&[x.clone()], 1e-5, &|tape, v| {
        let y = tape.adaptive_avg_pool2d(v[0], s).unwrap();
        project(tape, y, seed)
    });
    out.push(("pool".to_string(), errs[0]));

    let (oh, ow) = (r.gen_range(1..=8usize), r.gen_range(1..=8usize));
    let errs = gradcheck(&[x.clone()], 1e-5, &|tape, v| {
        let y = tape.bilinear_upsample2d(v[0], oh, ow).unwrap();
        project(tape, y, seed)
    });
    out.push(("bilinear".to_string(), errs[0]));

    for kind in [
        Activation::Silu,
        Activation::Tanh,
        Activation::Relu,
        Activation::LeakyRelu,
        Activation::Sigmoid,
    ] {
        let errs = gradcheck(&[x.clone()], 1e-5, &|tape, v| {
            let y = tape.activation(v[0], kind);
            project(tape, y, seed)
        });
        out.push(("{kind:?}".to_string(), errs[0]));
    }

    let errs = gradcheck(
        &[x.clone(), random_tensor(&mut r, &[4, 2]), random_tensor(&mut r, &[4])],
        1e-5,
        &|tape, v| {
            let y = tape.channel_linear(v[0], v[1], Some(v[2])).unwrap();
            project(tape, y, seed)
        },
    );
    out.push(("linear".to_string(), worst(&errs)));

    let target = random_tensor(&mut r, &[2, 2, h, w]);
    let mask = Tensor::from_fn(&[2, 2, h, w], |i| if i % 3 == 0 { 0.0 } else { 1.0 }).unwrap();
    let errs = gradcheck(&[x.clone()], 1e-5, &|tape, v| tape.masked_mse(v[0], &target, &mask).unwrap());
    out.push(("mse".to_string(), errs[0]));

    let errs = gradcheck(
        &[random_tensor(&mut r, &[2, 6, 1, 1]), random_tensor(&mut r, &[2, 3, h, w])],
        1e-5,
        &|tape, v| {
            let y = tape.latent_contract(v[0], v[1]).unwrap();
            project(tape, y, seed)
        },
    );
    out.push(("contract".to_string(), worst(&errs)));

    let errs = gradcheck(
        &[x.clone(), random_tensor(&mut r, &[2, 1, h, w])],
        1e-5,
        &|tape, v| {
            let c = tape.concat_channels(v[0], v[1]).unwrap();
            let s = tape.slice_channels(c, 1, 2).unwrap();
            project(tape, s, seed)
        },
    );
    out.push(("concat".to_string(), worst(&errs)));
    out
}

pub fn small(variant: Variant, seed: u64) -> TnoConfig {
    TnoConfig {
        history: 1,
        bundle: 2,
        latent: 3,
        pool_size: 8,
        unet_base_channels: 2,
        trunk_hidden: vec![4],
        decoder_hidden: vec![5, 5],
        deeponet_hidden: vec![6],
        seed,
        ..TnoConfig::default()
    }
    .for_variant(variant)
}

pub fn grid(b: usize, h: usize, w: usize, t: f64) -> Tensor<f64> {
    let g = coordinate_grid(h, w, t);
    Tensor::stack(&vec![g; b]).unwrap()
}

pub struct Inputs {
    pub v: Tensor<f64>,
    pub hist: Tensor<f64>,
    pub grid: Tensor<f64>,
}

pub fn inputs(cfg: &TnoConfig, b: usize, h: usize, w: usize, seed: u64) -> Inputs {
    let mut r = rng(seed);
    Inputs {
        v: random_tensor(&mut r, &[b, cfg.input_channels, h, w]),
        hist: random_tensor(&mut r, &[b, cfg.history, h, w]),
        grid: grid(b, h, w, r.gen_range(-1.0..1.0)),
    }
}

pub fn forward(model: &TnoModel<f64>, x: &Inputs, mode: BnMode) -> Tensor<f64> {
    let mut s = Session::new(model, mode, false);
    let (v, h, g) = (s.input(&x.v), s.input(&x.hist), s.input(&x.grid));
    let out = s.forward(v, h, g).unwrap();
    s.tape.value(out).clone()
}

pub fn randomize(model: &mut TnoModel<f64>, seed: u64) {
    let mut r = rng(seed);
    for p in model.params_mut() {
        for x in p.data_mut() {
            *x = r.gen_range(-0.8..0.8);
        }
    }
}

pub fn loss_and_grads(model: &TnoModel<f64>, x: &Inputs, target: &Tensor<f64>) -> (f64, Vec<Vec<f64>>) {
    let mut s = Session::train(model);
    let (v, h, g) = (s.input(&x.v), s.input(&x.hist), s.input(&x.grid));
    let out = s.forward(v, h, g).unwrap();
    let mask = Tensor::ones(target.shape()).unwrap();
    let loss = s.tape.masked_mse(out, target, &mask).unwrap();
    let value = s.tape.value(loss).data()[0];
    (value, s.finish(loss).unwrap().grads)
}

pub fn loss_only(model: &TnoModel<f64>, x: &Inputs, target: &Tensor<f64>) -> f64 {
    let mut s = Session::new(model, BnMode::Train, false);
    let (v, h, g) = (s.input(&x.v), s.input(&x.hist), s.input(&x.grid));
    let out = s.forward(v, h, g).unwrap();
    let mask = Tensor::ones(target.shape()).unwrap();
    let loss = s.tape.masked_mse(out, target, &mask).unwrap();
    s.tape.value(loss).data()[0]
}

/// Norm-wise relative error between the analytic gradient and central
/// differences, worst over parameter tensors, on a 4×4 grid.
pub fn model_gradcheck(cfg: TnoConfig, seed: u64) -> f64 {
    let mut model = TnoModel::<f64>::new(cfg.clone()).unwrap();
    randomize(&mut model, seed);
    let x = inputs(&cfg, 2, 4, 4, seed + 100);
    let target = random_tensor(&mut rng(seed + 200), &[2, cfg.bundle, 4, 4]);
    let (_, grads) = loss_and_grads(&model, &x, &target);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for k in 0..model.params().len() {
        let mut numeric = vec![0.0; model.params()[k].numel()];
        for i in 0..numeric.len() {
            let orig = model.params()[k].data()[i];
            model.params_mut()[k].data_mut()[i] = orig + h;
            let up = loss_only(&model, &x, &target);
            model.params_mut()[k].data_mut()[i] = orig - h;
            let down = loss_only(&model, &x, &target);
            model.params_mut()[k].data_mut()[i] = orig;
            numeric[i] = (up - down) / (2.0 * h);
        }
        let diff = grads[k].iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let norm = grads[k].iter().map(|a| a * a).sum::<f64>().sqrt()
            + numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
        // The bottleneck conv sits in front of a 1x1, batch-of-2 BN, so its
        // gradient is ~1e-8 and the finite-difference noise (~1e-10 summed)
        // would dominate a relative measure. Compare absolutely below 1e-5.
        let err = diff / norm.max(1e-5);
        worst = worst.max(err);
    }
    worst
}

pub fn tiny(variant: Variant) -> TnoConfig {
    TnoConfig {
        latent: 2,
        unet_base_channels: 1,
        trunk_hidden: vec![3],
        decoder_hidden: vec![3],
        deeponet_hidden: vec![4],
        ..small(variant, 0)
    }
    .for_variant(variant)
}


#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kernel {
    Conv2d,
    ConvTranspose2d,
    AdaptivePool,
    Bilinear,
}

impl Kernel {
    pub const ALL: [Kernel; 4] = [Kernel::Conv2d, Kernel::ConvTranspose2d, Kernel::AdaptivePool, Kernel::Bilinear];
}

/// Relative difference between the library kernel and its loop-nest
/// reference on one random shape drawn from `seed`. Shapes include strides,
/// padding, non-square planes and pool sizes that do not divide the input.
pub fn kernel_oracle(kernel: Kernel, seed: u64) -> f64 {
    let mut r = rng(seed);
    let b = r.gen_range(1..=3usize);
    let c = r.gen_range(1..=4usize);
    let h = r.gen_range(3..=12usize);
    let w = r.gen_range(3..=12usize);
    let x = random_tensor(&mut r, &[b, c, h, w]);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    match kernel {
        Kernel::Conv2d | Kernel::ConvTranspose2d => {
            let cout = r.gen_range(1..=4usize);
            let k = r.gen_range(1..=4usize).min(h).min(w);
            let stride = r.gen_range(1..=2usize);
            let pad = r.gen_range(0..k);
            let bias = random_tensor(&mut r, &[cout]);
            let bv = tape.constant(bias.clone());
            let (y, (want, shape)) = if kernel == Kernel::Conv2d {
                let wt = random_tensor(&mut r, &[cout, c, k, k]);
                let wv = tape.constant(wt.clone());
                let y = tape.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
                (y, naive_conv2d(x.data(), [b, c, h, w], wt.data(), [cout, c, k, k], bias.data(), stride, pad))
            } else {
                let wt = random_tensor(&mut r, &[c, cout, k, k]);
                let wv = tape.constant(wt.clone());
                let y = tape.conv_transpose2d(xv, wv, Some(bv), stride, pad).unwrap();
                let want = naive_conv_transpose2d(x.data(), [b, c, h, w], wt.data(), [c, cout, k, k], bias.data(), stride, pad);
                (y, want)
            };
            if tape.value(y).shape() != shape {
                return f64::INFINITY;
            }
            max_rel_diff(tape.value(y).data(), &want)
        }
        Kernel::AdaptivePool => {
            let s = r.gen_range(1..=h.min(w) + 3);
            let y = tape.adaptive_avg_pool2d(xv, s).unwrap();
            max_rel_diff(tape.value(y).data(), &naive_adaptive_pool(x.data(), b * c, h, w, s))
        }
        Kernel::Bilinear => {
            let (oh, ow) = (r.gen_range(1..=24usize), r.gen_range(1..=24usize));
            let y = tape.bilinear_upsample2d(xv, oh, ow).unwrap();
            max_rel_diff(tape.value(y).data(), &naive_bilinear(x.data(), b * c, h, w, oh, ow))
        }
    }
}

/// Largest relative change of the spatial sum between consecutive steps of a
/// periodic heat (or, with `velocity`, advection-diffusion) run.
pub fn periodic_mass_drift(n: usize, velocity: Option<(f64, f64)>, steps: usize, seed: u64) -> f64 {
    let coeff = grf_sample(n, n, 0.15, 0.002, 0.01, seed).unwrap();
    let u0 = Grf::new(0.1, seed + 1).unwrap().eval_standardized(n, n).unwrap().map(|v| v + 3.0);
    let vel = velocity.unwrap_or((0.0, 0.0));
    let dt = 0.9 * max_stable_dt(coeff.max(), vel, 1.0 / n as f64, 1.0 / n as f64);
    let traj = match velocity {
        None => solve_heat2d(&u0, &coeff, dt, steps, Boundary::Periodic).unwrap(),
        Some(v) => solve_advdiff2d(&u0, &coeff, v, dt, steps).unwrap(),
    };
    let sums: Vec<f64> = traj.u.data().chunks(n * n).map(|c| c.iter().sum()).collect();
    sums.windows(2).map(|w| ((w[1] - w[0]) / w[0]).abs()).fold(0.0, f64::max)
}

pub fn sine_mode(n: usize) -> Tensor<f64> {
    Tensor::from_fn(&[n, n], |k| {
        let (i, j) = (k / n, k % n);
        let x = (j as f64 + 0.5) / n as f64;
        let y = (i as f64 + 0.5) / n as f64;
        (2.0 * PI * x).sin() * (2.0 * PI * y).sin()
    })
    .unwrap()
}

/// Projection coefficient of `u` on `reference`.
pub fn amplitude(u: &[f64], reference: &[f64]) -> f64 {
    let num: f64 = u.iter().zip(reference).map(|(a, b)| a * b).sum();
    let den: f64 = reference.iter().map(|b| b * b).sum();
    num / den
}

/// Relative error of the decayed `sin(2πx) sin(2πy)` amplitude against
/// `exp(-8π²κt)` at the time the exact amplitude halves.
pub fn mode_decay_error(n: usize, kappa: f64, steps: usize) -> f64 {
    let coeff = CoefficientField::constant(n, n, kappa).unwrap();
    let u0 = sine_mode(n);
    let half_time = 2f64.ln() / (8.0 * PI * PI * kappa);
    let traj = solve_heat2d(&u0, &coeff, half_time / steps as f64, steps, Boundary::Periodic).unwrap();
    let a = amplitude(traj.snapshot(steps).unwrap().data(), u0.data());
    let exact = (-8.0 * PI * PI * kappa * half_time).exp();
    (a - exact).abs() / exact
}

/// Pure advection at unit Courant number along x and along y: number of
/// values over `steps` steps that differ from the integer-shifted field.
pub fn cfl_shift_mismatches(n: usize, steps: usize) -> usize {
    let coeff = CoefficientField::constant(n, n, 0.0).unwrap();
    let u0 = Grf::new(0.1, 9).unwrap().eval(n, n).unwrap();
    let dt = 1.0 / (2 * n) as f64;
    let mut bad = 0;
    for (vel, di, dj) in [((2.0, 0.0), 0usize, 1usize), ((0.0, 2.0), 1, 0)] {
        let traj = solve_advdiff2d(&u0, &coeff, vel, dt, steps).unwrap();
        for s in 1..=steps {
            let got = traj.snapshot(s).unwrap();
            for i in 0..n {
                for j in 0..n {
                    let src = u0.at(&[(i + n - (s * di) % n) % n, (j + n - (s * dj) % n) % n]);
                    bad += usize::from(got.at(&[i, j]) != src);
                }
            }
        }
    }
    bad
}
