//! Central finite-difference checks for every differentiable op and the
//! three loss paths.

use crtcl_core::losses::{critic_loss, cross_entropy, generator_loss, Partition, Reduction};
use crtcl_core::models::{ConvBlock, CriticConfig, CriticNet, GeneratorConfig, GeneratorNet, ImageShape, TapSet};
use crtcl_core::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const CASES_PER_OP: usize = 6;

#[derive(Debug, Clone)]
pub struct Case {
    pub name: String,
    pub error: f64,
}

type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

/// `‖a − n‖ / (‖a‖ + ‖n‖)`, with a floor on the denominator.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()) + norm(&mut numeric.iter().copied());
    diff / scale.max(1e-8)
}

fn evaluate(inputs: &[Tensor], f: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let root = f(&mut tape, &vars).expect("forward");
    tape.value(root).item().expect("scalar root")
}

/// Relative error between the tape gradient of `f` and central differences,
/// over every element of every input.
pub fn check(inputs: &[Tensor], f: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let root = f(&mut tape, &vars).expect("forward");
    tape.backward(root).expect("backward");
    let analytic: Vec<f64> = vars
        .iter()
        .zip(inputs)
        .flat_map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let mut work = inputs.to_vec();
    let mut numeric = Vec::with_capacity(analytic.len());
    for i in 0..work.len() {
        for j in 0..work[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + STEP;
            let up = evaluate(&work, f);
            work[i].data_mut()[j] = orig - STEP;
            let down = evaluate(&work, f);
            work[i].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * STEP));
        }
    }
    relative_error(&analytic, &numeric)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero so kinks stay out of the difference stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduces a tensor of any shape to a scalar with fixed random weights.
fn project(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let r = uniform(&mut rng, tape.shape(x), -1.0, 1.0);
    let r = tape.constant(r);
    let m = tape.mul(x, r)?;
    tape.sum(m)
}

fn dims(rng: &mut ChaCha8Rng, n: usize, lo: usize, hi: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(lo..=hi)).collect()
}

fn op_cases(name: &str, mut make: impl FnMut(&mut ChaCha8Rng, u64) -> (Vec<Tensor>, Box<Build>)) -> Vec<Case> {
    (0..CASES_PER_OP as u64)
        .map(|i| {
            let seed = i + 1000 * name.len() as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (inputs, f) = make(&mut rng, seed);
            Case {
                name: format!("{name}#{i}"),
                error: check(&inputs, f.as_ref()),
            }
        })
        .collect()
}

pub fn op_suite() -> Vec<Case> {
    let mut out = Vec::new();
    out.extend(op_cases("matmul", |rng, s| {
        let d = dims(rng, 3, 1, 4);
        let a = uniform(rng, &[d[0], d[1]], -1.0, 1.0);
        let b = uniform(rng, &[d[1], d[2]], -1.0, 1.0);
        (vec![a, b], Box::new(move |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, s)
        }))
    }));
    out.extend(op_cases("add", |rng, s| {
        let d = dims(rng, 3, 1, 3);
        let a = uniform(rng, &d, -1.0, 1.0);
        let b = uniform(rng, &d, -1.0, 1.0);
        (vec![a, b], Box::new(move |t, v| {
            let y = t.add(v[0], v[1])?;
            let y = t.mul(y, y)?;
            project(t, y, s)
        }))
    }));
    out.extend(op_cases("add_row", |rng, s| {
        let d = dims(rng, 2, 1, 4);
        let a = uniform(rng, &[d[0], d[1]], -1.0, 1.0);
        let b = uniform(rng, &[d[1]], -1.0, 1.0);
        (vec![a, b], Box::new(move |t, v| {
            let y = t.add_row(v[0], v[1])?;
            let y = t.mul(y, y)?;
            project(t, y, s)
        }))
    }));
    out.extend(op_cases("mul", |rng, s| {
        let d = dims(rng, 2, 1, 4);
        let a = uniform(rng, &d, -1.0, 1.0);
        let b = uniform(rng, &d, -1.0, 1.0);
        (vec![a, b], Box::new(move |t, v| {
            let y = t.mul(v[0], v[1])?;
            project(t, y, s)
        }))
    }));
    out.extend(op_cases("scale", |rng, s| {
        let d = dims(rng, 2, 1, 4);
        let a = uniform(rng, &d, -1.0, 1.0);
        let k = rng.random_range(-2.0..2.0);
        (vec![a], Box::new(move |t, v| {
            let y = t.scale(v[0], k)?;
            let y = t.mul(y, y)?;
            project(t, y, s)
        }))
    }));
    out.extend(op_cases("relu", |rng, s| {
        let d = dims(rng, 2, 1, 5);
        (vec![away_from_zero(rng, &d)], Box::new(move |t, v| {
            let y = t.relu(v[0])?;
            project(t, y, s)
        }))
    }));
    out.extend(op_cases("sigmoid", |rng, s| {
        let d = dims(rng, 2, 1, 5);
        (vec![uniform(rng, &d, -3.0, 3.0)], Box::new(move |t, v| {
            let y = t.sigmoid(v[0])?;
            project(t, y, s)
        }))
    }));
    out.extend(op_cases("conv2d", |rng, s| {
        let (b, c, o) = (rng.random_range(1..=2), rng.random_range(1..=2), rng.random_range(1..=2));
        let k = rng.random_range(1..=3);
        let pad = rng.random_range(0..=1);
        let h = rng.random_range(k.max(2)..=4);
        let w = rng.random_range(k.max(2)..=4);
        let x = uniform(rng, &[b, c, h, w], -1.0, 1.0);
        let wt = uniform(rng, &[o, c, k, k], -1.0, 1.0);
        let bias = uniform(rng, &[o], -1.0, 1.0);
        (vec![x, wt, bias], Box::new(move |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], pad)?;
            project(t, y, s)
        }))
    }));
    out.extend(op_cases("max_pool2d", |rng, s| {
        let size = rng.random_range(1..=2);
        let (b, c) = (rng.random_range(1..=2), rng.random_range(1..=2));
        let h = size * rng.random_range(1..=3);
        let w = size * rng.random_range(1..=3);
        (vec![uniform(rng, &[b, c, h, w], -1.0, 1.0)], Box::new(move |t, v| {
            let y = t.max_pool2d(v[0], size)?;
            project(t, y, s)
        }))
    }));
    out.extend(op_cases("global_avg_pool", |rng, s| {
        let d = dims(rng, 4, 1, 3);
        (vec![uniform(rng, &d, -1.0, 1.0)], Box::new(move |t, v| {
            let y = t.global_avg_pool(v[0])?;
            let y = t.mul(y, y)?;
            project(t, y, s)
        }))
    }));
    out.extend(op_cases("concat", |rng, s| {
        let rows = rng.random_range(1..=3);
        let parts = rng.random_range(1..=3);
        let inputs = (0..parts)
            .map(|_| {
                let cols = rng.random_range(1..=3);
                uniform(rng, &[rows, cols], -1.0, 1.0)
            })
            .collect();
        (inputs, Box::new(move |t, v| {
            let y = t.concat(v)?;
            let y = t.mul(y, y)?;
            project(t, y, s)
        }))
    }));
    out.extend(op_cases("softmax", |rng, s| {
        let d = dims(rng, 2, 1, 5);
        (vec![uniform(rng, &d, -2.0, 2.0)], Box::new(move |t, v| {
            let y = t.softmax(v[0])?;
            project(t, y, s)
        }))
    }));
    out.extend(op_cases("log", |rng, s| {
        let d = dims(rng, 2, 1, 4);
        (vec![uniform(rng, &d, 0.2, 2.0)], Box::new(move |t, v| {
            let y = t.log(v[0], 0.0)?;
            project(t, y, s)
        }))
    }));
    out.extend(op_cases("sum", |rng, _| {
        let d = dims(rng, 3, 1, 3);
        (vec![uniform(rng, &d, -1.0, 1.0)], Box::new(|t, v| {
            let y = t.mul(v[0], v[0])?;
            t.sum(y)
        }))
    }));
    out.extend(op_cases("mean", |rng, _| {
        let d = dims(rng, 3, 1, 3);
        (vec![uniform(rng, &d, -1.0, 1.0)], Box::new(|t, v| {
            let y = t.mul(v[0], v[0])?;
            t.mean(y)
        }))
    }));
    out.extend(op_cases("gather", |rng, s| {
        let d = dims(rng, 2, 1, 4);
        let index: Vec<usize> = (0..d[0]).map(|_| rng.random_range(0..d[1])).collect();
        (vec![uniform(rng, &d, -1.0, 1.0)], Box::new(move |t, v| {
            let y = t.mul(v[0], v[0])?;
            let y = t.gather(y, &index)?;
            project(t, y, s)
        }))
    }));
    out.extend(op_cases("transpose", |rng, s| {
        let d = dims(rng, 2, 1, 4);
        (vec![uniform(rng, &d, -1.0, 1.0)], Box::new(move |t, v| {
            let y = t.transpose(v[0])?;
            let y = t.mul(y, y)?;
            project(t, y, s)
        }))
    }));
    out.extend(op_cases("reshape", |rng, s| {
        let d = dims(rng, 2, 1, 4);
        (vec![uniform(rng, &d, -1.0, 1.0)], Box::new(move |t, v| {
            let y = t.reshape(v[0], &[d[0] * d[1]])?;
            let y = t.mul(y, y)?;
            project(t, y, s)
        }))
    }));
    out.extend(op_cases("linear", |rng, s| {
        let d = dims(rng, 3, 1, 4);
        let x = uniform(rng, &[d[0], d[1]], -1.0, 1.0);
        let w = uniform(rng, &[d[2], d[1]], -1.0, 1.0);
        let b = uniform(rng, &[d[2]], -1.0, 1.0);
        (vec![x, w, b], Box::new(move |t, v| {
            let y = t.linear(v[0], v[1], v[2])?;
            project(t, y, s)
        }))
    }));
    out
}

/// 1×4×4 input, one 3×3 block of two channels, three classes.
pub fn tiny_generator(seed: u64) -> GeneratorNet {
    let cfg = GeneratorConfig {
        input: ImageShape {
            channels: 1,
            height: 4,
            width: 4,
        },
        blocks: vec![ConvBlock {
            out_channels: 2,
            kernel: 3,
            pad: 1,
            pool: 2,
        }],
        classes: 3,
        taps: TapSet {
            image: false,
            blocks: vec![0],
            output: true,
        },
    };
    GeneratorNet::new(cfg, seed).unwrap()
}

fn tiny_critic(gen: &GeneratorNet, seed: u64) -> CriticNet {
    let cfg = CriticConfig::for_generator(gen.config(), 0.5).unwrap();
    let mut c = CriticNet::new(cfg, seed).unwrap();
    // Positive biases keep most projections away from the ReLU kink.
    for p in c.params.iter_mut().filter(|p| p.name.ends_with("bias")) {
        p.value.data_mut().iter_mut().for_each(|b| *b = 0.3);
    }
    c
}

fn param_values(params: &crtcl_core::ParamSet) -> Vec<Tensor> {
    params.iter().map(|p| p.value.clone()).collect()
}

pub fn loss_suite() -> Vec<Case> {
    let mut out = Vec::new();
    for i in 0..CASES_PER_OP as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(77 + i);
        let gen = tiny_generator(i);
        let batch = 3;
        let x = uniform(&mut rng, &[batch, 1, 4, 4], -1.0, 1.0);
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..3)).collect();
        let critic = tiny_critic(&gen, 100 + i);

        for reduction in [Reduction::Sum, Reduction::Mean] {
            let (g, x, y) = (gen.clone(), x.clone(), labels.clone());
            let f = move |t: &mut Tape, v: &[Var]| {
                let xv = t.constant(x.clone());
                let pass = g.forward(t, v, xv)?;
                cross_entropy(t, pass.probs, &y, reduction)
            };
            out.push(Case {
                name: format!("cross_entropy/{reduction:?}#{i}"),
                error: check(&param_values(&gen.params), &f),
            });
        }

        let inf = gen.infer(x.clone()).unwrap();
        let mut partition = Partition::new(&inf.probs, &labels).unwrap();
        if partition.correct.is_empty() || partition.incorrect.is_empty() {
            partition.correct = vec![0];
            partition.incorrect = (1..batch).collect();
        }
        for log_variant in [false, true] {
            let (c, feats, part) = (critic.clone(), inf.features.clone(), partition.clone());
            let f = move |t: &mut Tape, v: &[Var]| {
                let fv: Vec<Var> = feats.iter().map(|f| t.constant(f.clone())).collect();
                let scores = c.forward(t, v, &fv)?;
                critic_loss(t, scores, &part, log_variant)
            };
            out.push(Case {
                name: format!("critic_loss/log={log_variant}#{i}"),
                error: check(&param_values(&critic.params), &f),
            });
        }

        for log_variant in [false, true] {
            // Detached taps are constants of the routed objective, so they
            // stay at their unperturbed values under the stencil.
            let (g, c, x, fixed) = (gen.clone(), critic.clone(), x.clone(), inf.features.clone());
            let f = move |t: &mut Tape, v: &[Var]| {
                let frozen = c.bind(t, false);
                let xv = t.constant(x.clone());
                let pass = g.forward(t, v, xv)?;
                let last = pass.features.len() - 1;
                let routed: Vec<Var> = pass
                    .features
                    .iter()
                    .enumerate()
                    .map(|(k, &f)| if k == last { f } else { t.constant(fixed[k].clone()) })
                    .collect();
                let scores = c.forward(t, &frozen, &routed)?;
                let loss = generator_loss(t, scores, log_variant)?;
                t.scale(loss, 0.04)
            };
            out.push(Case {
                name: format!("generator_loss/log={log_variant}#{i}"),
                error: check(&param_values(&gen.params), &f),
            });
        }
    }
    out
}

pub fn all() -> Vec<Case> {
    let mut cases = op_suite();
    cases.extend(loss_suite());
    cases
}
