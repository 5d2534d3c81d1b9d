//! Central-difference checks of tape gradients in `f64`.
//!
//! Every case draws fresh inputs per draw, reduces the output to a scalar with
//! fixed pseudo-random weights, and compares the tape gradient of each input
//! with `(L(x + h) − L(x − h)) / 2h`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::denoiser::{Conditioning, Denoiser, DenoiserConfig, PredictionTarget};
use crate::engine::stream_rng;
use crate::error::{GmdError, Result};
use crate::goals::{
    composite_goal, keyframe_goal, obstacle_goal, trajectory_goal, Keyframe, KeyframeSet, Obstacle, SdfMap,
};
use crate::guidance::{dense_gradient, GroundReadout};
use crate::data::NormStats;
use crate::projection::EmphasisProjector;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

const STEP: f64 = 1e-6;

/// Worst relative error of one case over its draws.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub draws: usize,
    pub max_rel_err: f64,
}

type Build<'f> = dyn Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var> + 'f;

fn reduce(tape: &mut Tape<'_, f64>, out: Var) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let n: usize = shape.iter().product();
    if n == 1 {
        return Ok(out);
    }
    let w = Tensor::new(shape, (0..n).map(|i| (1.3 * i as f64 + 0.7).sin()).collect())?;
    let wv = tape.constant(w);
    let p = tape.mul(out, wv)?;
    tape.sum(p)
}

fn loss_at(inputs: &[Tensor<f64>], f: &Build<'_>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = f(&mut tape, &vars)?;
    let l = reduce(&mut tape, out)?;
    Ok(tape.value(l).data()[0])
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-8)
}

/// Largest relative error over all inputs of one evaluation.
pub fn check_fn(inputs: &[Tensor<f64>], f: &Build<'_>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let l = reduce(&mut tape, out)?;
    let grads = tape.backward(l)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(v)).collect();
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let mut a = Vec::with_capacity(input.len());
        let mut n = Vec::with_capacity(input.len());
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            n.push((loss_at(&plus, f)? - loss_at(&minus, f)?) / (2.0 * STEP));
            a.push(analytic[i].data()[j]);
        }
        worst = worst.max(rel_err(&a, &n));
    }
    if !worst.is_finite() {
        return Err(GmdError::numeric("finite-difference check produced a non-finite error"));
    }
    Ok(worst)
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, rng)
}

/// Values whose magnitude stays at least `gap` away from zero.
fn away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    randn(shape, rng).map(|v| if v >= 0.0 { v + gap } else { v - gap })
}

type Make = dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>;

struct Case {
    name: &'static str,
    /// Inputs for one draw.
    make: Box<Make>,
    build: Box<Build<'static>>,
}

fn case(
    name: &'static str,
    make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>> + 'static,
    build: impl Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case { name, make: Box::new(make), build: Box::new(build) }
}

fn primitive_cases() -> Vec<Case> {
    vec![
        case("add", |r| vec![randn(&[3, 4], r), randn(&[3, 4], r)], |t, v| t.add(v[0], v[1])),
        case("sub", |r| vec![randn(&[3, 4], r), randn(&[3, 4], r)], |t, v| t.sub(v[0], v[1])),
        case("mul", |r| vec![randn(&[3, 4], r), randn(&[3, 4], r)], |t, v| t.mul(v[0], v[1])),
        case("scale", |r| vec![randn(&[2, 5], r)], |t, v| t.scale(v[0], -1.7)),
        case("matmul", |r| vec![randn(&[3, 4], r), randn(&[4, 5], r)], |t, v| t.matmul(v[0], v[1])),
        case(
            "conv1d",
            |r| vec![randn(&[3, 8], r), randn(&[4, 3, 5], r), randn(&[4], r)],
            |t, v| t.conv1d(v[0], v[1], Some(v[2])),
        ),
        case("conv1d_no_bias", |r| vec![randn(&[2, 6], r), randn(&[3, 2, 3], r)], |t, v| t.conv1d(v[0], v[1], None)),
        case("group_norm", |r| vec![randn(&[4, 6], r)], |t, v| t.group_norm(v[0], 2)),
        case(
            "affine_modulate",
            |r| vec![randn(&[3, 5], r), randn(&[3], r), randn(&[3], r)],
            |t, v| t.affine_modulate(v[0], v[1], v[2]),
        ),
        case("add_channel", |r| vec![randn(&[3, 5], r), randn(&[3, 1], r)], |t, v| t.add_channel(v[0], v[1])),
        case("mish", |r| vec![randn(&[3, 5], r).scale(2.0)], |t, v| t.mish(v[0])),
        case("sum", |r| vec![randn(&[3, 5], r)], |t, v| t.sum(v[0])),
        case("mean", |r| vec![randn(&[3, 5], r)], |t, v| t.mean(v[0])),
        case("l1_norm", |r| vec![away_from_zero(&[3, 5], 0.05, r)], |t, v| t.l1_norm(v[0])),
        case("l2_norm_squared", |r| vec![randn(&[3, 5], r)], |t, v| t.l2_norm_squared(v[0])),
        case("sqrt", |r| vec![randn(&[3, 5], r).map(|x| x.abs() + 0.2)], |t, v| t.sqrt(v[0])),
        case(
            "clip_max",
            |r| vec![away_from_zero(&[3, 5], 0.05, r).map(|x| x + 0.3)],
            |t, v| t.clip_max(v[0], 0.3),
        ),
        case(
            "mask_select",
            |r| vec![randn(&[3, 4], r)],
            |t, v| t.mask_select(v[0], &Tensor::from_fn2(3, 4, |i, j| ((i + j) % 2) as f64)),
        ),
        case("gather_channels", |r| vec![randn(&[4, 3], r)], |t, v| t.gather_channels(v[0], &[2, 0, 2])),
        case("concat_channels", |r| vec![randn(&[2, 3], r), randn(&[3, 3], r)], |t, v| t.concat_channels(v[0], v[1])),
        case("avg_pool2", |r| vec![randn(&[3, 8], r)], |t, v| t.avg_pool2(v[0])),
        case("upsample2", |r| vec![randn(&[3, 4], r)], |t, v| t.upsample2(v[0])),
        case("embedding_lookup", |r| vec![randn(&[4, 3], r)], |t, v| t.embedding_lookup(v[0], 2)),
        case("column_norms", |r| vec![away_from_zero(&[3, 5], 0.1, r)], |t, v| t.column_norms(v[0])),
        case(
            "point_field",
            |r| vec![randn(&[2, 6], r).scale(2.0)],
            |t, v| {
                t.point_field(v[0], |x, z| {
                    let d = (x * x + z * z).sqrt();
                    (d * d * 0.5 - x * z, (x - z, z - x))
                })
            },
        ),
    ]
}

fn run_cases(cases: &[Case], draws: usize, seed: u64) -> Result<Vec<CheckReport>> {
    cases
        .iter()
        .enumerate()
        .map(|(ci, c)| {
            let mut worst = 0.0f64;
            for d in 0..draws {
                let mut rng = stream_rng(seed + ci as u64, d as u64);
                let inputs = (c.make)(&mut rng);
                worst = worst.max(check_fn(&inputs, &*c.build)?);
            }
            Ok(CheckReport { name: c.name.to_string(), draws, max_rel_err: worst })
        })
        .collect()
}

/// Every differentiable tape primitive.
pub fn primitive_suite(draws: usize) -> Result<Vec<CheckReport>> {
    run_cases(&primitive_cases(), draws, 100)
}

fn tiny_config(target: PredictionTarget) -> DenoiserConfig {
    DenoiserConfig {
        in_channels: 3,
        base_channels: 4,
        channel_multipliers: vec![1.0, 2.0],
        groups: 2,
        prediction_target: target,
        cond_vocab: 3,
        cond_dim: 4,
        time_dim: 4,
    }
}

/// Gradient of the whole network output with respect to its input and to a
/// sample of parameter entries, for both heads and with classifier-free
/// mixing.
pub fn denoiser_suite(draws: usize) -> Result<Vec<CheckReport>> {
    let sched = NoiseSchedule::cosine(1000)?;
    let mut reports = Vec::new();
    for (name, target, label) in [
        ("denoiser_eps_unconditional", PredictionTarget::Epsilon, None),
        ("denoiser_x0_cfg", PredictionTarget::X0, Some(1usize)),
    ] {
        let cond = Conditioning { label, cfg_weight: 2.5 };
        let mut worst = 0.0f64;
        for d in 0..draws {
            let mut rng = stream_rng(200, d as u64);
            let net = Denoiser::<f64>::init(tiny_config(target), d as u64)?;
            let t = rng.gen_range(1..=1000);
            let x = randn(&[3, 8], &mut rng);
            let weights = Tensor::from_fn(&[3, 8], |i| (1.3 * i as f64 + 0.7).sin());
            let loss = |net: &Denoiser<f64>, x: &Tensor<f64>| -> Result<f64> {
                Ok(net.predict_x0(x, t, cond, &sched)?.mul(&weights)?.sum())
            };

            let mut tape = Tape::new();
            let p = net.bind(&mut tape, true);
            let xv = tape.leaf(x.clone(), true);
            let out = net.predict_x0_on(&mut tape, &p, xv, t, cond, &sched)?;
            let wv = tape.constant(weights.clone());
            let prod = tape.mul(out, wv)?;
            let l = tape.sum(prod)?;
            let grads = tape.backward(l)?;

            let gx = grads.wrt(xv);
            let mut n = Vec::with_capacity(x.len());
            for j in 0..x.len() {
                let mut a = x.clone();
                a.data_mut()[j] += STEP;
                let mut b = x.clone();
                b.data_mut()[j] -= STEP;
                n.push((loss(&net, &a)? - loss(&net, &b)?) / (2.0 * STEP));
            }
            worst = worst.max(rel_err(gx.data(), &n));

            let names: Vec<String> = net.params.tensors.keys().cloned().collect();
            let mut a = Vec::new();
            let mut n = Vec::new();
            for _ in 0..16 {
                let name = &names[rng.gen_range(0..names.len())];
                let j = rng.gen_range(0..net.params.tensors[name].len());
                a.push(grads.wrt(p.var(name)?).data()[j]);
                let mut plus = net.clone();
                plus.params.tensors.get_mut(name).expect("known name").data_mut()[j] += STEP;
                let mut minus = net.clone();
                minus.params.tensors.get_mut(name).expect("known name").data_mut()[j] -= STEP;
                n.push((loss(&plus, &x)? - loss(&minus, &x)?) / (2.0 * STEP));
            }
            worst = worst.max(rel_err(&a, &n));
        }
        reports.push(CheckReport { name: name.into(), draws, max_rel_err: worst });
    }
    Ok(reports)
}

fn random_keys(rng: &mut ChaCha8Rng, m: usize) -> Result<KeyframeSet> {
    let mut frames: Vec<usize> = (0..m).filter(|_| rng.gen_bool(0.4)).collect();
    if frames.is_empty() {
        frames.push(m / 2);
    }
    KeyframeSet::new(frames.into_iter().map(|f| Keyframe { frame: f, x: rng.gen_range(-2.0..2.0), z: rng.gen_range(-2.0..2.0) }).collect())
}

/// Every goal on its own, a weighted mix, and the dense gradient through a
/// projected network.
pub fn goal_suite(draws: usize) -> Result<Vec<CheckReport>> {
    let m = 8;
    let mut reports = Vec::new();
    let names = ["goal_trajectory_l1", "goal_trajectory_l2", "goal_keyframe_l1", "goal_keyframe_l2", "goal_obstacle", "goal_composite"];
    for (gi, name) in names.iter().enumerate() {
        let mut worst = 0.0f64;
        for d in 0..draws {
            let mut rng = stream_rng(300 + gi as u64, d as u64);
            let z = randn(&[2, m], &mut rng).scale(1.5);
            let map = SdfMap::new(vec![
                Obstacle::Circle { center: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)], radius: rng.gen_range(0.3..0.8) },
                Obstacle::Box { min: [0.5, -1.5], max: [1.5, -0.4] },
            ])?;
            let goal = match gi {
                0 => trajectory_goal(randn(&[2, m], &mut rng), 1)?,
                1 => trajectory_goal(randn(&[2, m], &mut rng), 2)?,
                2 => keyframe_goal(random_keys(&mut rng, m)?, 1)?,
                3 => keyframe_goal(random_keys(&mut rng, m)?, 2)?,
                4 => obstacle_goal(map, 10.0)?,
                _ => composite_goal(
                    vec![keyframe_goal(random_keys(&mut rng, m)?, 2)?, obstacle_goal(map, 10.0)?],
                    vec![0.7, 1.9],
                )?,
            };
            let build = move |tape: &mut Tape<'_, f64>, v: &[Var]| goal.record(tape, v[0]);
            worst = worst.max(check_fn(&[z], &build)?);
        }
        reports.push(CheckReport { name: name.to_string(), draws, max_rel_err: worst });
    }

    let sched = NoiseSchedule::cosine(1000)?;
    let mut worst = 0.0f64;
    for d in 0..draws {
        let mut rng = stream_rng(400, d as u64);
        let proj = EmphasisProjector::build(5, &[0, 1, 2], 3.0, d as u64)?;
        let mut cfg = tiny_config(PredictionTarget::Epsilon);
        cfg.in_channels = 5;
        let net = Denoiser::<f64>::init(cfg, d as u64)?;
        let stats = NormStats { mean: vec![0.3, -0.2], std: vec![1.4, 0.8] };
        let readout = GroundReadout { proj: Some(&proj), rows: [1, 2], stats };
        let goal = keyframe_goal(random_keys(&mut rng, m)?, 2)?;
        let t = rng.gen_range(20..=400);
        let x = randn(&[5, m], &mut rng);
        let analytic = dense_gradient(&net, &sched, &x, t, Conditioning::unconditional(), &goal, &readout)?.grad;
        let value = |x: &Tensor<f64>| -> Result<f64> {
            let x0 = net.predict_x0(x, t, Conditioning::unconditional(), &sched)?;
            goal.value(&readout.ground(&proj.unproject_tensor(&x0)?)?)
        };
        let mut n = Vec::with_capacity(x.len());
        for j in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[j] += STEP;
            let mut q = x.clone();
            q.data_mut()[j] -= STEP;
            n.push((value(&p)? - value(&q)?) / (2.0 * STEP));
        }
        worst = worst.max(rel_err(analytic.data(), &n));
    }
    reports.push(CheckReport { name: "dense_gradient_projected".into(), draws, max_rel_err: worst });
    Ok(reports)
}
