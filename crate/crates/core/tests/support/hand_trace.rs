//! One labeled batch through the trainer, replayed in scalar arithmetic.
//!
//! Two classes, 1×2×2 images, a 1×1 convolution with a single channel
//! followed by 2×2 max pooling (so the embedding is one number `h`), and a
//! linear head. The critic taps `h` and `z`.

use crtcl_core::data::{Dataset, SampleId, SamplePools};
use crtcl_core::losses::{critic_loss, Partition, Reduction};
use crtcl_core::models::{ConvBlock, CriticConfig, CriticNet, GeneratorConfig, GeneratorNet, ImageShape, TapSet};
use crtcl_core::optim::AdamWConfig;
use crtcl_core::trainer::{TrainConfig, Trainer};
use crtcl_core::{Tape, Tensor};

pub const TOLERANCE: f64 = 1e-12;
const P: usize = 128;
const LR: f64 = 0.1;
const MOMENTUM: f64 = 0.9;
const GAMMA: f64 = 0.04;
const CLIP: f64 = 0.01;

const LABELED: [([f64; 4], usize); 2] = [([0.5, -0.2, 0.9, 0.1], 0), ([-0.3, 0.7, 0.2, 0.4], 1)];
const UNLABELED: [[f64; 4]; 2] = [[0.3, 0.6, -0.4, 0.2], [0.1, -0.5, 0.8, 0.05]];

#[derive(Debug, Clone, Copy, PartialEq)]
struct Theta {
    a: f64,
    beta: f64,
    w: [f64; 2],
    d: [f64; 2],
}

impl Theta {
    fn flat(&self) -> Vec<f64> {
        vec![self.a, self.beta, self.w[0], self.w[1], self.d[0], self.d[1]]
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Phi {
    u: Vec<f64>,
    e: Vec<f64>,
    v: Vec<[f64; 2]>,
    f: Vec<f64>,
    o: Vec<f64>,
    ob: f64,
}

impl Phi {
    fn hand_set() -> Self {
        let j = |k: usize| k as f64;
        Self {
            u: (0..P).map(|k| 0.009 * (j(k) + 1.0).sin()).collect(),
            e: (0..P).map(|k| 0.002 * j(k).cos()).collect(),
            v: (0..P)
                .map(|k| [0.009 * (2.0 * j(k) + 0.5).sin(), 0.009 * (2.0 * j(k) + 1.5).sin()])
                .collect(),
            f: (0..P).map(|k| 0.001 * (3.0 * j(k)).sin()).collect(),
            o: (0..2 * P).map(|k| 0.0095 * (0.7 * j(k)).cos()).collect(),
            ob: 0.001,
        }
    }

    fn flat(&self) -> Vec<f64> {
        let mut out = self.u.clone();
        out.extend(&self.e);
        out.extend(self.v.iter().flatten());
        out.extend(&self.f);
        out.extend(&self.o);
        out.push(self.ob);
        out
    }

    fn zeros() -> Self {
        Self {
            u: vec![0.0; P],
            e: vec![0.0; P],
            v: vec![[0.0; 2]; P],
            f: vec![0.0; P],
            o: vec![0.0; 2 * P],
            ob: 0.0,
        }
    }
}

struct GenOut {
    h: f64,
    /// Pixel that won the pool, and whether its pre-activation was positive.
    pixel: f64,
    active: bool,
    z: [f64; 2],
}

fn gen_forward(t: &Theta, x: &[f64; 4]) -> GenOut {
    let pre: Vec<f64> = x.iter().map(|p| t.a * p + t.beta).collect();
    let mut best = 0;
    for k in 1..4 {
        if pre[k].max(0.0) > pre[best].max(0.0) {
            best = k;
        }
    }
    let h = pre[best].max(0.0);
    let l = [t.w[0] * h + t.d[0], t.w[1] * h + t.d[1]];
    let m = l[0].max(l[1]);
    let e = [(l[0] - m).exp(), (l[1] - m).exp()];
    let s = e[0] + e[1];
    GenOut {
        h,
        pixel: x[best],
        active: pre[best] > 0.0,
        z: [e[0] / s, e[1] / s],
    }
}

/// Accumulates the θ-gradient given `∂L/∂logits`.
fn backprop_logits(t: &Theta, g: &GenOut, dl: [f64; 2], grad: &mut Theta) {
    for c in 0..2 {
        grad.w[c] += dl[c] * g.h;
        grad.d[c] += dl[c];
    }
    let dh = dl[0] * t.w[0] + dl[1] * t.w[1];
    if g.active {
        grad.a += dh * g.pixel;
        grad.beta += dh;
    }
}

struct CriticOut {
    pre0: Vec<f64>,
    pre1: Vec<f64>,
    score: f64,
}

fn critic_forward(phi: &Phi, h: f64, z: [f64; 2]) -> CriticOut {
    let pre0: Vec<f64> = (0..P).map(|j| phi.u[j] * h + phi.e[j]).collect();
    let pre1: Vec<f64> = (0..P)
        .map(|j| phi.v[j][0] * z[0] + phi.v[j][1] * z[1] + phi.f[j])
        .collect();
    let mut score = phi.ob;
    for j in 0..P {
        score += phi.o[j] * pre0[j].max(0.0) + phi.o[P + j] * pre1[j].max(0.0);
    }
    CriticOut { pre0, pre1, score }
}

fn zero_theta() -> Theta {
    Theta {
        a: 0.0,
        beta: 0.0,
        w: [0.0; 2],
        d: [0.0; 2],
    }
}

fn theta0() -> Theta {
    Theta {
        a: 0.8,
        beta: -0.1,
        w: [1.0, -0.5],
        d: [0.0, 0.2],
    }
}

/// Expected parameters after one batch, plus the number of critic
/// coordinates that had to be clipped.
struct Expected {
    theta_after_ce: Theta,
    theta_final: Theta,
    phi_final: Phi,
    clipped: usize,
}

fn expected() -> Expected {
    let th0 = theta0();
    let phi0 = Phi::hand_set();

    // Cross-entropy (sum reduction) on θ.
    let mut g_ce = zero_theta();
    let outs: Vec<GenOut> = LABELED.iter().map(|(x, _)| gen_forward(&th0, x)).collect();
    for (g, &(_, y)) in outs.iter().zip(&LABELED) {
        let dl = [g.z[0] - f64::from(y == 0), g.z[1] - f64::from(y == 1)];
        backprop_logits(&th0, g, dl, &mut g_ce);
    }
    let step = |t: &Theta, v: &Theta| Theta {
        a: t.a - LR * v.a,
        beta: t.beta - LR * v.beta,
        w: [t.w[0] - LR * v.w[0], t.w[1] - LR * v.w[1]],
        d: [t.d[0] - LR * v.d[0], t.d[1] - LR * v.d[1]],
    };
    let th1 = step(&th0, &g_ce);

    // Critic loss on the pre-update features: +1 incorrect, −1 correct.
    let mut g_phi = Phi::zeros();
    for (g, &(_, y)) in outs.iter().zip(&LABELED) {
        let pred = usize::from(g.z[1] > g.z[0]);
        let sign = if pred == y { -1.0 } else { 1.0 };
        let c = critic_forward(&phi0, g.h, g.z);
        g_phi.ob += sign;
        for j in 0..P {
            let (q, s) = (c.pre0[j].max(0.0), c.pre1[j].max(0.0));
            g_phi.o[j] += sign * q;
            g_phi.o[P + j] += sign * s;
            if c.pre0[j] > 0.0 {
                g_phi.u[j] += sign * phi0.o[j] * g.h;
                g_phi.e[j] += sign * phi0.o[j];
            }
            if c.pre1[j] > 0.0 {
                for k in 0..2 {
                    g_phi.v[j][k] += sign * phi0.o[P + j] * g.z[k];
                }
                g_phi.f[j] += sign * phi0.o[P + j];
            }
        }
    }
    // First AdamW step: the bias-corrected moments are g and g².
    let adam = AdamWConfig::default();
    let mut clipped = 0;
    let mut update = |w: f64, g: f64| {
        let raw = w - adam.lr * g / (g.abs() + adam.eps) - adam.lr * adam.weight_decay * w;
        if raw.abs() > CLIP {
            clipped += 1;
        }
        raw.clamp(-CLIP, CLIP)
    };
    let phi1 = Phi {
        u: (0..P).map(|j| update(phi0.u[j], g_phi.u[j])).collect(),
        e: (0..P).map(|j| update(phi0.e[j], g_phi.e[j])).collect(),
        v: (0..P)
            .map(|j| [update(phi0.v[j][0], g_phi.v[j][0]), update(phi0.v[j][1], g_phi.v[j][1])])
            .collect(),
        f: (0..P).map(|j| update(phi0.f[j], g_phi.f[j])).collect(),
        o: (0..2 * P).map(|j| update(phi0.o[j], g_phi.o[j])).collect(),
        ob: update(phi0.ob, g_phi.ob),
    };

    // Semi-supervised pass with θ1 and the updated critic; only z carries
    // gradient into the critic.
    let mut g_g = zero_theta();
    for x in &UNLABELED {
        let g = gen_forward(&th1, x);
        let c = critic_forward(&phi1, g.h, g.z);
        let mut dz = [0.0; 2];
        for j in 0..P {
            if c.pre1[j] > 0.0 {
                for k in 0..2 {
                    dz[k] -= phi1.o[P + j] * phi1.v[j][k];
                }
            }
        }
        let dot = dz[0] * g.z[0] + dz[1] * g.z[1];
        let dl = [g.z[0] * (dz[0] - dot), g.z[1] * (dz[1] - dot)];
        backprop_logits(&th1, &g, dl, &mut g_g);
    }
    let velocity = Theta {
        a: MOMENTUM * g_ce.a + GAMMA * g_g.a,
        beta: MOMENTUM * g_ce.beta + GAMMA * g_g.beta,
        w: [
            MOMENTUM * g_ce.w[0] + GAMMA * g_g.w[0],
            MOMENTUM * g_ce.w[1] + GAMMA * g_g.w[1],
        ],
        d: [
            MOMENTUM * g_ce.d[0] + GAMMA * g_g.d[0],
            MOMENTUM * g_ce.d[1] + GAMMA * g_g.d[1],
        ],
    };
    Expected {
        theta_after_ce: th1,
        theta_final: step(&th1, &velocity),
        phi_final: phi1,
        clipped,
    }
}

fn generator() -> GeneratorNet {
    let cfg = GeneratorConfig {
        input: ImageShape {
            channels: 1,
            height: 2,
            width: 2,
        },
        blocks: vec![ConvBlock {
            out_channels: 1,
            kernel: 1,
            pad: 0,
            pool: 2,
        }],
        classes: 2,
        taps: TapSet {
            image: false,
            blocks: vec![0],
            output: true,
        },
    };
    let mut g = GeneratorNet::new(cfg, 0).unwrap();
    let t = theta0();
    let set = |g: &mut GeneratorNet, name: &str, shape: &[usize], data: Vec<f64>| {
        g.params.get_mut(name).unwrap().value = Tensor::new(shape.to_vec(), data).unwrap();
    };
    set(&mut g, "block0.weight", &[1, 1, 1, 1], vec![t.a]);
    set(&mut g, "block0.bias", &[1], vec![t.beta]);
    set(&mut g, "head.weight", &[2, 1], t.w.to_vec());
    set(&mut g, "head.bias", &[2], t.d.to_vec());
    g
}

fn critic(gen: &GeneratorNet) -> CriticNet {
    let cfg = CriticConfig::for_generator(gen.config(), CLIP).unwrap();
    let mut c = CriticNet::new(cfg, 0).unwrap();
    let phi = Phi::hand_set();
    let set = |c: &mut CriticNet, name: &str, shape: &[usize], data: Vec<f64>| {
        c.params.get_mut(name).unwrap().value = Tensor::new(shape.to_vec(), data).unwrap();
    };
    set(&mut c, "tap0.weight", &[P, 1], phi.u.clone());
    set(&mut c, "tap0.bias", &[P], phi.e.clone());
    set(&mut c, "tap1.weight", &[P, 2], phi.v.iter().flatten().copied().collect());
    set(&mut c, "tap1.bias", &[P], phi.f.clone());
    set(&mut c, "out.weight", &[1, 2 * P], phi.o.clone());
    set(&mut c, "out.bias", &[1], vec![phi.ob]);
    c
}

fn pools() -> SamplePools {
    let mut train: Vec<(Vec<f64>, usize)> = LABELED.iter().map(|(x, y)| (x.to_vec(), *y)).collect();
    train.extend(UNLABELED.iter().map(|x| (x.to_vec(), 0)));
    let ds = Dataset {
        shape: ImageShape {
            channels: 1,
            height: 2,
            width: 2,
        },
        classes: 2,
        train,
        test: vec![(LABELED[0].0.to_vec(), 0)],
    };
    let mut p = SamplePools::from_dataset(ds).unwrap();
    p.reveal(SampleId(0), 0).unwrap();
    p.reveal(SampleId(1), 1).unwrap();
    p
}

fn config(semi: bool, critic: bool) -> TrainConfig {
    TrainConfig {
        epochs: 1,
        stop_epoch: 1,
        lr: LR,
        momentum: MOMENTUM,
        gamma: GAMMA,
        clip: CLIP,
        batch_size: 2,
        use_critic_loss: critic,
        use_semi_supervised: semi,
        reduction: Reduction::Sum,
        augment: false,
        ..TrainConfig::default()
    }
}

fn values(params: &crtcl_core::ParamSet) -> Vec<f64> {
    params.iter().flat_map(|p| p.value.data().to_vec()).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[derive(Debug, Clone)]
pub struct Outcome {
    /// Largest deviation between trainer and hand trace over θ and φ.
    pub max_deviation: f64,
    /// θ after a batch with the critic step equals θ after plain CE.
    pub theta_isolated: bool,
    /// φ after a batch with the semi-supervised pass equals φ without it.
    pub phi_isolated: bool,
    /// No generator parameter receives gradient from the critic loss.
    pub tape_isolated: bool,
    pub max_abs_phi: f64,
    pub clipped: usize,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.max_deviation <= TOLERANCE
            && self.theta_isolated
            && self.phi_isolated
            && self.tape_isolated
            && self.max_abs_phi <= CLIP
            && self.clipped > 0
    }
}

pub fn run() -> Outcome {
    let exp = expected();
    let pools = pools();
    let labeled = [SampleId(0), SampleId(1)];
    let unlabeled = [SampleId(2), SampleId(3)];
    let gen = generator();
    let crit = critic(&gen);

    let mut full = Trainer::new(gen.clone(), crit.clone(), config(true, true)).unwrap();
    full.train_batch(&pools, &labeled, Some(&unlabeled), 0).unwrap();
    let mut no_semi = Trainer::new(gen.clone(), crit.clone(), config(false, true)).unwrap();
    no_semi.train_batch(&pools, &labeled, Some(&unlabeled), 0).unwrap();
    let mut plain = Trainer::new(gen.clone(), crit.clone(), config(false, false)).unwrap();
    plain.train_batch(&pools, &labeled, None, 0).unwrap();

    let deviation = [
        max_diff(&values(&full.gen.params), &exp.theta_final.flat()),
        max_diff(&values(&full.critic.params), &exp.phi_final.flat()),
        max_diff(&values(&no_semi.gen.params), &exp.theta_after_ce.flat()),
    ]
    .into_iter()
    .fold(0.0, f64::max);

    let mut tape = Tape::new();
    let gv = gen.bind(&mut tape, true);
    let x = tape.constant(pools.batch(&labeled, None).unwrap());
    let pass = gen.forward(&mut tape, &gv, x).unwrap();
    let detached: Vec<_> = pass.features.iter().map(|&f| tape.detach(f)).collect();
    let cv = crit.bind(&mut tape, true);
    let scores = crit.forward(&mut tape, &cv, &detached).unwrap();
    let part = Partition::new(tape.value(pass.probs), &[0, 1]).unwrap();
    let loss = critic_loss(&mut tape, scores, &part, false).unwrap();
    tape.backward(loss).unwrap();
    let tape_isolated = gv
        .iter()
        .all(|&v| tape.grad(v).is_some_and(|g| g.iter().all(|&d| d == 0.0)));

    Outcome {
        max_deviation: deviation,
        theta_isolated: values(&no_semi.gen.params) == values(&plain.gen.params),
        phi_isolated: values(&full.critic.params) == values(&no_semi.critic.params),
        tape_isolated,
        max_abs_phi: full.critic.params.max_abs(),
        clipped: exp.clipped,
    }
}
