#![allow(dead_code)]

use std::sync::Arc;

use mgpde_core::network::{Mode, ModelState, UNetSpec};
use mgpde_core::problem::{apply_bc, energy_loss, BoundaryMasks, GridSpec};
use mgpde_core::tensor::{
    add, affine_field, batchnorm, concat_channels, conv_transpose_with, conv_with, downsample2, leaky_relu, mean, mul,
    scale, sigmoid, sum, BnStats, ConvAlgo, Pool, StatReducer, Tape, Tensor, Var,
};
use mgpde_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// `||a - b|| / ||b||`, or the absolute norm when `b` vanishes.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if den > 1e-300 {
        num / den
    } else {
        num
    }
}

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

fn eval(inputs: &[Tensor], f: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let root = f(&mut tape, &vars).expect("forward");
    tape.value(root).item()
}

/// Relative error between the autodiff gradient of the scalar `f` and its
/// central finite difference, over all inputs taken together. Inputs whose
/// exact gradient vanishes (a bias feeding batch norm) are thus measured
/// against the scale of the others instead of against rounding noise.
pub fn fd_check(inputs: &[Tensor], f: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let root = f(&mut tape, &vars).expect("forward");
    let grads = tape.backward(root).expect("backward");
    let (mut ad, mut fd) = (Vec::new(), Vec::new());
    for (k, input) in inputs.iter().enumerate() {
        ad.extend_from_slice(grads.get(vars[k]).expect("gradient of every input").data());
        for i in 0..input.len() {
            let mut shifted = inputs.to_vec();
            shifted[k].data_mut()[i] += FD_STEP;
            let up = eval(&shifted, f);
            shifted[k].data_mut()[i] -= 2.0 * FD_STEP;
            let down = eval(&shifted, f);
            fd.push((up - down) / (2.0 * FD_STEP));
        }
    }
    rel_err(&ad, &fd)
}

/// Contracts `out` with a fixed random cotangent so every output entry matters.
pub fn contract(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let w = random(tape.value(out).shape(), &mut rng(seed));
    let w = tape.constant(w);
    let p = mul(tape, out, w)?;
    Ok(sum(tape, p))
}

/// Values at least 0.1 away from zero, for ops with a kink there.
fn away_from_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

struct SumReducer;

impl StatReducer for SumReducer {
    fn sum_across(&self, local: &[f64]) -> Result<Vec<f64>> {
        Ok(local.to_vec())
    }
}

/// Gradient error of every differentiable operation, by name.
pub fn op_gradient_suite() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut r = rng(11);
    for algo in [ConvAlgo::Direct, ConvAlgo::Im2col] {
        for (rank, stride, pad, ext) in [(2, 1, 1, 5), (2, 2, 1, 5), (2, 1, 0, 4), (3, 1, 1, 3), (3, 2, 1, 4)] {
            let mut xs = vec![2, 2];
            xs.extend(std::iter::repeat_n(ext, rank));
            let mut ks = vec![3, 2];
            ks.extend(std::iter::repeat_n(3, rank));
            let inputs = [random(&xs, &mut r), random(&ks, &mut r), random(&[3], &mut r)];
            let e = fd_check(&inputs, &|t, v| {
                let y = conv_with(algo, t, v[0], v[1], v[2], stride, pad)?;
                contract(t, y, 1)
            });
            out.push((format!("conv {algo:?} rank {rank} stride {stride} pad {pad}"), e));

            let mut ys = vec![2, 3];
            ys.extend(std::iter::repeat_n(ext, rank));
            let inputs = [random(&ys, &mut r), random(&ks, &mut r), random(&[2], &mut r)];
            let e = fd_check(&inputs, &|t, v| {
                let y = conv_transpose_with(algo, t, v[0], v[1], v[2], stride, pad)?;
                contract(t, y, 2)
            });
            out.push((format!("conv_transpose {algo:?} rank {rank} stride {stride} pad {pad}"), e));
        }
    }
    // sum(conv) on a 2x2x5x5 input with a 3x3x2x2 kernel.
    let inputs = [random(&[2, 2, 5, 5], &mut r), random(&[2, 2, 3, 3], &mut r), random(&[2], &mut r)];
    out.push((
        "sum of conv".into(),
        fd_check(&inputs, &|t, v| {
            let y = conv_with(ConvAlgo::Direct, t, v[0], v[1], v[2], 1, 1)?;
            Ok(sum(t, y))
        }),
    ));
    for (name, reducer) in [("batchnorm train", None), ("batchnorm train reduced", Some(Arc::new(SumReducer) as Arc<dyn StatReducer>))] {
        let inputs = [random(&[2, 3, 4, 4], &mut r), random(&[3], &mut r), random(&[3], &mut r)];
        let e = fd_check(&inputs, &|t, v| {
            let mut stats = BnStats::new(3);
            let y = batchnorm(t, v[0], v[1], v[2], &mut stats, true, 0.1, reducer.as_ref())?;
            contract(t, y, 3)
        });
        out.push((name.into(), e));
    }
    let inputs = [random(&[2, 3, 4, 4], &mut r), random(&[3], &mut r), random(&[3], &mut r)];
    out.push((
        "batchnorm eval".into(),
        fd_check(&inputs, &|t, v| {
            let mut stats = BnStats {
                mean: vec![0.1, -0.2, 0.3],
                var: vec![0.5, 1.5, 2.0],
            };
            let y = batchnorm(t, v[0], v[1], v[2], &mut stats, false, 0.1, None)?;
            contract(t, y, 4)
        }),
    ));
    let x = away_from_zero(&[2, 2, 4, 4], &mut r);
    out.push((
        "leaky_relu".into(),
        fd_check(&[x], &|t, v| {
            let y = leaky_relu(t, v[0], 0.01);
            contract(t, y, 5)
        }),
    ));
    let x = random(&[2, 2, 4, 4], &mut r).map(|v| 3.0 * v);
    out.push((
        "sigmoid".into(),
        fd_check(&[x], &|t, v| {
            let y = sigmoid(t, v[0]);
            contract(t, y, 6)
        }),
    ));
    for (rank, shape) in [(2, vec![2, 2, 4, 6]), (3, vec![1, 2, 4, 2, 4])] {
        let x = random(&shape, &mut r);
        out.push((
            format!("downsample2 mean rank {rank}"),
            fd_check(&[x], &|t, v| {
                let y = downsample2(t, v[0], Pool::Mean)?;
                contract(t, y, 7)
            }),
        ));
    }
    // Distinct, well separated values so the max is stable under the step.
    let n = 2 * 2 * 4 * 4;
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, r.gen_range(0..=i));
    }
    let x = Tensor::from_fn(&[2, 2, 4, 4], |i| perm[i] as f64 * 0.01);
    out.push((
        "downsample2 max".into(),
        fd_check(&[x], &|t, v| {
            let y = downsample2(t, v[0], Pool::Max)?;
            contract(t, y, 8)
        }),
    ));
    let inputs = [random(&[2, 1, 4, 4], &mut r), random(&[2, 3, 4, 4], &mut r)];
    out.push((
        "concat_channels".into(),
        fd_check(&inputs, &|t, v| {
            let y = concat_channels(t, v[0], v[1])?;
            contract(t, y, 9)
        }),
    ));
    let (a, b) = (random(&[1, 1, 4, 4], &mut r), random(&[1, 1, 4, 4], &mut r));
    out.push((
        "affine_field".into(),
        fd_check(&[random(&[3, 1, 4, 4], &mut r)], &|t, v| {
            let y = affine_field(t, v[0], &a, &b)?;
            contract(t, y, 10)
        }),
    ));
    let inputs = [random(&[2, 2, 3, 3], &mut r), random(&[2, 2, 3, 3], &mut r)];
    out.push((
        "add, mul, scale, mean".into(),
        fd_check(&inputs, &|t, v| {
            let s = add(t, v[0], v[1])?;
            let p = mul(t, s, v[1])?;
            let q = scale(t, p, -1.7);
            Ok(mean(t, q))
        }),
    ));
    for rank in [2, 3] {
        let grid = GridSpec::new(4, rank).unwrap();
        let masks = BoundaryMasks::new(&grid);
        let nu = Tensor::from_fn(&grid.field_shape(2), |_| r.gen_range(0.5..2.0));
        out.push((
            format!("boundary masking and energy rank {rank}"),
            fd_check(&[random(&grid.field_shape(2), &mut r)], &|t, v| {
                let u = apply_bc(t, v[0], &masks)?;
                let nu = t.constant(nu.clone());
                energy_loss(t, u, nu, &grid)
            }),
        ));
    }
    let inputs = [random(&[2, 1, 4, 4], &mut r), random(&[3, 1, 3, 3], &mut r), random(&[3], &mut r), random(&[3], &mut r), random(&[3], &mut r)];
    out.push((
        "conv, batchnorm, leaky_relu, sum".into(),
        fd_check(&inputs, &|t, v| {
            let mut stats = BnStats::new(3);
            let c = conv_with(ConvAlgo::Direct, t, v[0], v[1], v[2], 1, 1)?;
            let n = batchnorm(t, c, v[3], v[4], &mut stats, true, 0.1, None)?;
            let a = leaky_relu(t, n, 0.01);
            Ok(sum(t, a))
        }),
    ));
    out
}

/// Gradient error of `mean(forward(x))` with respect to every parameter of
/// a freshly built network, in training mode.
pub fn unet_gradient_error(spec: &UNetSpec, resolution: usize, batch: usize, seed: u64) -> f64 {
    let model = ModelState::build(spec, seed).unwrap();
    let mut shape = vec![batch, 1];
    shape.extend(std::iter::repeat_n(resolution, spec.spatial_rank));
    let x = Tensor::from_fn(&shape, {
        let mut r = rng(seed ^ 0x5eed);
        move |_| r.gen_range(0.2..3.0)
    });
    let ad: Vec<f64> = {
        let mut m = model.clone();
        let mut tape = Tape::new();
        let input = tape.constant(x.clone());
        let rec = m.record(&mut tape, input, &Mode::Train(None)).unwrap();
        let root = mean(&mut tape, rec.output);
        let g = tape.backward(root).unwrap();
        rec.params.iter().flat_map(|&v| g.get(v).unwrap().data().to_vec()).collect()
    };
    let theta = model.flat_params();
    let mut fd = vec![0.0; theta.len()];
    let mut m = model.clone();
    let mut value_at = |theta: &[f64]| {
        m.set_flat_params(theta).unwrap();
        let mut tape = Tape::new();
        let input = tape.constant(x.clone());
        let rec = m.record(&mut tape, input, &Mode::Train(None)).unwrap();
        let root = mean(&mut tape, rec.output);
        tape.value(root).item()
    };
    let mut t = theta.clone();
    for i in 0..theta.len() {
        t[i] = theta[i] + FD_STEP;
        let up = value_at(&t);
        t[i] = theta[i] - FD_STEP;
        let down = value_at(&t);
        t[i] = theta[i];
        fd[i] = (up - down) / (2.0 * FD_STEP);
    }
    rel_err(&ad, &fd)
}

/// Checks every partition invariant for one `(N_s, b_s, p)` case against a
/// single-worker partition of the adjusted sizes.
pub fn check_partition(n_s: usize, b_s: usize, p: usize) -> std::result::Result<(), String> {
    let part = mgpde_core::parallel::partition(n_s, b_s, p).map_err(|e| e.to_string())?;
    let fail = |what: &str| Err(format!("({n_s}, {b_s}, {p}): {what}"));
    if p * part.local_batch != part.batch_size || p * part.local_samples != part.samples {
        return fail("local sizes do not scale to global sizes");
    }
    if part.samples < n_s || part.samples >= n_s + p || part.batch_size > b_s || part.batch_size + p <= b_s {
        return fail("adjustment is not minimal");
    }
    if (part.samples % part.batch_size) % p != 0 {
        return fail("remainder batch not divisible by p");
    }
    let oracle = mgpde_core::parallel::partition(part.samples, part.batch_size, 1).map_err(|e| e.to_string())?;
    if oracle.batches != part.batches {
        return fail("batch count differs from one worker");
    }
    let mut covered = 0;
    for n in 0..part.batches {
        let locals: Vec<_> = (0..p).map(|r| part.local_batch(n, r)).collect();
        if locals[0].is_empty() || locals.iter().any(|l| l.len() != locals[0].len()) {
            return fail("unequal local batches");
        }
        // Contiguous blocks in rank order must tile the global batch exactly.
        let g = oracle.global_batch(n);
        let tiles = locals[0].start == g.start
            && locals.windows(2).all(|w| w[0].end == w[1].start)
            && locals[p - 1].end == g.end;
        if !tiles {
            return fail("union differs from the single-worker batch");
        }
        covered += g.len();
    }
    if covered != part.samples || (0..part.samples).any(|pos| part.sample_at(pos) >= n_s) {
        return fail("batches do not cover the padded sample set");
    }
    Ok(())
}
