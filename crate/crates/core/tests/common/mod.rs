//! Finite-difference gradient checking and reference oracles shared by the
//! integration and acceptance suites.
#![allow(dead_code)]

pub mod oracles;

use dceseg_core::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
/// Below this magnitude gradients are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Values bounded away from zero (kink-free for ReLU).
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values separated by well over the finite-difference step.
pub fn distinct_values(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// Central differences at `h`, `h/2` and `h/4` disagreeing by more than this
/// (relatively) means the segment crosses a ReLU or max-pool switch.
pub const KINK_DISAGREEMENT: f64 = 1e-5;

pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Probes rejected because the function is not smooth on the segment.
    pub kinked: usize,
}

/// Which coordinates to probe.
#[derive(Clone, Copy)]
pub enum Probe {
    All,
    /// This many random coordinates where the function is smooth on
    /// `[x - h, x + h]`, drawing at most four times as many candidates.
    SmoothSample(usize),
}

/// Compares tape gradients of `Σ R ⊙ f(inputs)` (fixed random `R`, or `f`
/// itself when it is scalar) against central differences with step
/// [`FD_STEP`].
pub fn check_gradients(
    inputs: &[Tensor<f64>],
    f: &mut dyn FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
    probe: Probe,
    seed: u64,
) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights: Option<Tensor<f64>> = None;
    let mut objective = |tape: &mut Tape<f64>, vars: &[Var], weights: &mut Option<Tensor<f64>>, rng: &mut ChaCha8Rng| {
        let y = f(tape, vars).unwrap();
        if tape.value(y).numel() == 1 {
            return y;
        }
        let shape = tape.value(y).shape().to_vec();
        let r = weights.get_or_insert_with(|| random_tensor(rng, &shape, 1.0)).clone();
        let r = tape.constant(r);
        let prod = tape.mul(y, r).unwrap();
        tape.sum(prod).unwrap()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_requires_grad(true))).collect();
    let loss = objective(&mut tape, &vars, &mut weights, &mut rng);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or(vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let mut eval = |perturbed: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = objective(&mut tape, &vars, &mut weights, &mut rng);
        tape.value(loss).item().unwrap()
    };

    let all: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    let (candidates, wanted) = match probe {
        Probe::SmoothSample(k) => {
            let mut sample_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5151);
            let c: Vec<(usize, usize)> = (0..4 * k).map(|_| all[sample_rng.random_range(0..all.len())]).collect();
            (c, k)
        }
        Probe::All => {
            let n = all.len();
            (all, n)
        }
    };
    let smooth_only = matches!(probe, Probe::SmoothSample(_));

    let mut work = inputs.to_vec();
    let mut central = |work: &mut [Tensor<f64>], i: usize, j: usize, h: f64| {
        let x0 = work[i].data()[j];
        work[i].data_mut()[j] = x0 + h;
        let up = eval(work);
        work[i].data_mut()[j] = x0 - h;
        let down = eval(work);
        work[i].data_mut()[j] = x0;
        (up - down) / (2.0 * h)
    };
    let mut max_rel_err: f64 = 0.0;
    let (mut checked, mut kinked) = (0, 0);
    for (i, j) in candidates {
        if checked == wanted {
            break;
        }
        let numeric = central(&mut work, i, j, FD_STEP);
        if smooth_only {
            let finer = [central(&mut work, i, j, FD_STEP / 2.0), central(&mut work, i, j, FD_STEP / 4.0)];
            let disagree =
                |a: f64, b: f64| (a - b).abs() > KINK_DISAGREEMENT * a.abs().max(b.abs()).max(REL_FLOOR);
            if finer.iter().any(|&f| disagree(numeric, f)) {
                kinked += 1;
                continue;
            }
        }
        max_rel_err = max_rel_err.max(rel_err(analytic[i][j], numeric));
        checked += 1;
    }
    GradCheck {
        max_rel_err,
        checked,
        kinked,
    }
}

use dceseg_core::models::{Architecture, InputConfig, Network, NetworkSpec};
use dceseg_core::{BatchNormState, Mode};

pub const INSTANCES: u64 = 20;

fn worst(seed_base: u64, mut one: impl FnMut(u64) -> GradCheck) -> GradCheck {
    let mut out = GradCheck {
        max_rel_err: 0.0,
        checked: 0,
        kinked: 0,
    };
    for k in 0..INSTANCES {
        let g = one(seed_base * 1000 + k);
        out.max_rel_err = out.max_rel_err.max(g.max_rel_err);
        out.checked += g.checked;
        out.kinked += g.kinked;
    }
    out
}

pub fn conv2d_suite() -> GradCheck {
    worst(1, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, c, k) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
        let (h, w) = (rng.random_range(3..8), rng.random_range(3..8));
        let ksize = if seed % 4 == 3 { 1 } else { 3 };
        let dilation = rng.random_range(1..4);
        let inputs = [
            random_tensor(&mut rng, &[n, c, h, w], 1.0),
            random_tensor(&mut rng, &[k, c, ksize, ksize], 1.0),
            random_tensor(&mut rng, &[k], 1.0),
        ];
        check_gradients(&inputs, &mut |t, v| t.conv2d(v[0], v[1], v[2], dilation), Probe::All, seed)
    })
}

pub fn conv_transpose_suite() -> GradCheck {
    worst(2, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, c, k) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
        let (h, w) = (rng.random_range(1..5), rng.random_range(1..5));
        let inputs = [
            random_tensor(&mut rng, &[n, c, h, w], 1.0),
            random_tensor(&mut rng, &[c, k, 2, 2], 1.0),
            random_tensor(&mut rng, &[k], 1.0),
        ];
        check_gradients(&inputs, &mut |t, v| t.conv_transpose2d(v[0], v[1], v[2]), Probe::All, seed)
    })
}

pub fn maxpool_suite() -> GradCheck {
    worst(3, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [rng.random_range(1..3), rng.random_range(1..4), 2 * rng.random_range(1..4), 2 * rng.random_range(1..4)];
        let inputs = [distinct_values(&mut rng, &shape)];
        check_gradients(&inputs, &mut |t, v| t.maxpool2x2(v[0]), Probe::All, seed)
    })
}

pub fn batchnorm_train_suite() -> GradCheck {
    worst(4, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, c) = (rng.random_range(1..4), rng.random_range(1..4));
        let (h, w) = (rng.random_range(2..5), rng.random_range(2..5));
        let inputs = [
            random_tensor(&mut rng, &[n, c, h, w], 2.0),
            random_tensor(&mut rng, &[c], 1.5),
            random_tensor(&mut rng, &[c], 1.0),
        ];
        check_gradients(
            &inputs,
            &mut |t, v| t.batchnorm2d(v[0], v[1], v[2], &mut BatchNormState::new(c), Mode::Train),
            Probe::All,
            seed,
        )
    })
}

pub fn batchnorm_eval_suite() -> GradCheck {
    worst(5, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, c, h, w) = (rng.random_range(1..3), rng.random_range(1..4), 3, 3);
        let state = BatchNormState {
            running_mean: (0..c).map(|_| rng.random_range(-1.0..1.0)).collect(),
            running_var: (0..c).map(|_| rng.random_range(0.5..2.0)).collect(),
            initialized: true,
        };
        let inputs = [
            random_tensor(&mut rng, &[n, c, h, w], 2.0),
            random_tensor(&mut rng, &[c], 1.5),
            random_tensor(&mut rng, &[c], 1.0),
        ];
        check_gradients(
            &inputs,
            &mut |t, v| t.batchnorm2d(v[0], v[1], v[2], &mut state.clone(), Mode::Eval),
            Probe::All,
            seed,
        )
    })
}

pub fn relu_suite() -> GradCheck {
    worst(6, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..3);
        let inputs = [away_from_zero(&mut rng, &[n, 2, 3, 4])];
        check_gradients(&inputs, &mut |t, v| t.relu(v[0]), Probe::All, seed)
    })
}

pub fn softmax_suite() -> GradCheck {
    worst(7, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..3);
        let inputs = [random_tensor(&mut rng, &[n, 2, 3, 4], 3.0)];
        check_gradients(&inputs, &mut |t, v| t.softmax_channels(v[0]), Probe::All, seed)
    })
}

pub fn concat_suite() -> GradCheck {
    worst(8, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let parts = rng.random_range(1..4);
        let inputs: Vec<_> = (0..parts)
            .map(|_| {
                let c = rng.random_range(1..4);
                random_tensor(&mut rng, &[2, c, 3, 3], 1.0)
            })
            .collect();
        check_gradients(&inputs, &mut |t, v| t.concat_channels(v), Probe::All, seed)
    })
}

pub fn reshape_select_suite() -> GradCheck {
    worst(9, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ch = rng.random_range(0..3);
        let inputs = [random_tensor(&mut rng, &[2, 3, 2, 4], 1.0)];
        check_gradients(
            &inputs,
            &mut |t, v| {
                let r = t.reshape(v[0], &[1, 6, 2, 4])?;
                let r = t.reshape(r, &[2, 3, 2, 4])?;
                t.select_channel(r, ch)
            },
            Probe::All,
            seed,
        )
    })
}

pub fn mul_sum_suite() -> GradCheck {
    worst(10, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [random_tensor(&mut rng, &[1, 2, 3, 3], 1.0), random_tensor(&mut rng, &[1, 2, 3, 3], 1.0)];
        check_gradients(
            &inputs,
            &mut |t, v| {
                let p = t.mul(v[0], v[1])?;
                let q = t.mul(p, v[0])?;
                t.sum(q)
            },
            Probe::All,
            seed,
        )
    })
}

pub fn dice_loss_suite() -> GradCheck {
    worst(11, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [1, 1, rng.random_range(2..6), rng.random_range(2..6)];
        let target = Tensor::from_fn(&shape, |_| if rng.random_bool(0.4) { 1.0 } else { 0.0 });
        let inputs = [Tensor::from_fn(&shape, |_| rng.random_range(0.0..1.0))];
        check_gradients(&inputs, &mut |t, v| t.dice_loss(v[0], &target, 1e-5), Probe::All, seed)
    })
}

/// Probed coordinates per network instance.
pub const NETWORK_COORDS: usize = 120;

/// Soft Dice loss through a whole (narrow) network in training mode, for
/// every architecture and input configuration.
pub fn network_suite() -> GradCheck {
    worst(12, |seed| {
        let arch = Architecture::ALL[(seed % 2) as usize];
        let input = [InputConfig::single_default(), InputConfig::SeparatePhases, InputConfig::MultiChannel][(seed / 2 % 3) as usize];
        let divisor = match arch {
            Architecture::DilatedFcn => 8,
            Architecture::Unet => 4,
        };
        let mut net = Network::build(NetworkSpec::new(arch, input).with_width_divisor(divisor), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (16, 16);
        let mut inputs: Vec<Tensor<f64>> = net.params().iter().map(|p| p.value.cast::<f64>()).collect();
        inputs.push(random_tensor(&mut rng, &[1, input.in_channels(), h, w], 2.0));
        let target = Tensor::from_fn(&[1, 1, h, w], |i| {
            let (y, x) = ((i / w) as f64 - 7.5, (i % w) as f64 - 6.0);
            if y * y / 30.0 + x * x / 16.0 <= 1.0 {
                1.0
            } else {
                0.0
            }
        });
        let np = net.params().len();
        check_gradients(
            &inputs,
            &mut |t, v| {
                let probs = net.forward(t, &v[..np], v[np], Mode::Train)?;
                let fg = t.select_channel(probs, 1)?;
                t.dice_loss(fg, &target, 1e-5)
            },
            Probe::SmoothSample(NETWORK_COORDS),
            seed,
        )
    })
}

pub type Suite = (&'static str, fn() -> GradCheck);

pub const SUITES: [Suite; 12] = [
    ("conv2d", conv2d_suite),
    ("conv_transpose2d", conv_transpose_suite),
    ("maxpool2x2", maxpool_suite),
    ("batchnorm2d/train", batchnorm_train_suite),
    ("batchnorm2d/eval", batchnorm_eval_suite),
    ("relu", relu_suite),
    ("softmax_channels", softmax_suite),
    ("concat_channels", concat_suite),
    ("reshape+select_channel", reshape_select_suite),
    ("mul+sum", mul_sum_suite),
    ("dice_loss", dice_loss_suite),
    ("network dice loss", network_suite),
];

/// Bounding box (height, width) of input pixels with a non-zero gradient on
/// the centre output pixel's foreground probability, and the number of such
/// pixels. BN is initialized by one training forward; the probe runs in
/// evaluation mode.
pub fn gradient_footprint(net: &mut Network, size: usize, seed: u64) -> (usize, usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let channels = net.spec().input.in_channels();
    let image = random_tensor(&mut rng, &[1, channels, size, size], 1.0);

    let mut warm = Tape::<f64>::new();
    let params = net.bind(&mut warm, false);
    let x = warm.constant(image.clone());
    net.forward(&mut warm, &params, x, Mode::Train).unwrap();

    let mut tape = Tape::<f64>::new();
    let params = net.bind(&mut tape, false);
    let x = tape.leaf(image.with_requires_grad(true));
    let probs = net.forward(&mut tape, &params, x, Mode::Eval).unwrap();
    let fg = tape.select_channel(probs, 1).unwrap();
    let c = size / 2;
    let pick = tape.constant(Tensor::from_fn(&[1, 1, size, size], |i| if i == c * size + c { 1.0 } else { 0.0 }));
    let centre = tape.mul(fg, pick).unwrap();
    let out = tape.sum(centre).unwrap();
    tape.backward(out).unwrap();

    let grad = tape.grad(x).unwrap();
    let (mut y0, mut y1, mut x0, mut x1, mut count) = (usize::MAX, 0, usize::MAX, 0, 0);
    for ch in 0..channels {
        for y in 0..size {
            for xx in 0..size {
                if grad[(ch * size + y) * size + xx] != 0.0 {
                    y0 = y0.min(y);
                    y1 = y1.max(y);
                    x0 = x0.min(xx);
                    x1 = x1.max(xx);
                }
            }
        }
    }
    for y in 0..size {
        for xx in 0..size {
            if (0..channels).any(|ch| grad[(ch * size + y) * size + xx] != 0.0) {
                count += 1;
            }
        }
    }
    if count == 0 {
        return (0, 0, 0);
    }
    (y1 - y0 + 1, x1 - x0 + 1, count)
}
