use rand_chacha::ChaCha8Rng;

use crate::data::volume::{ProbabilityMap, VolumeSeries};
use crate::error::{Error, Result};
use crate::models::spec::{
    Architecture, DilatedFcnSpec, InputConfig, NetworkSpec, UNetSpec, NUM_PHASES,
};
use crate::nn::{glorot_uniform, GlorotUniformInit, Param};
use crate::tape::{BatchNormState, Mode, Tape, Var};
use crate::tensor::{Element, Tensor};

/// Number of output classes (background, liver).
pub const NUM_CLASSES: usize = 2;

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: usize,
    beta: usize,
    state: usize,
}

/// Convolution, optionally followed by batch norm and ReLU.
#[derive(Clone, Copy, Debug)]
struct Conv {
    weight: usize,
    bias: usize,
    dilation: usize,
    norm: Option<Norm>,
}

#[derive(Clone, Copy, Debug)]
struct UpConv {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Debug)]
enum Trunk {
    Fcn(Vec<Conv>),
    Unet {
        encoder: Vec<Vec<Conv>>,
        up: Vec<UpConv>,
        decoder: Vec<Vec<Conv>>,
    },
}

/// Running statistics of one batch-norm layer, with its checkpoint name.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedNorm {
    pub name: String,
    pub state: BatchNormState,
}

/// An instantiated segmentation network: parameters, batch-norm state, and
/// the wiring that connects them.
#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    params: Vec<Param>,
    norms: Vec<NamedNorm>,
    trunk: Trunk,
    merge: Option<Conv>,
    head: Conv,
    trunk_width: usize,
}

struct Builder {
    params: Vec<Param>,
    norms: Vec<NamedNorm>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn push(&mut self, name: String, value: Tensor<f32>) -> usize {
        self.params.push(Param::new(name, value));
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, dilation: usize, norm: bool) -> Result<Conv> {
        let w = glorot_uniform(&[cout, cin, k, k], cin * k * k, cout * k * k, &mut self.rng)?;
        let weight = self.push(format!("{name}.weight"), w);
        let bias = self.push(format!("{name}.bias"), Tensor::zeros(&[cout]));
        let norm = norm.then(|| {
            let gamma = self.push(format!("{name}.bn.gamma"), Tensor::full(&[cout], 1.0));
            let beta = self.push(format!("{name}.bn.beta"), Tensor::zeros(&[cout]));
            self.norms.push(NamedNorm {
                name: format!("{name}.bn"),
                state: BatchNormState::new(cout),
            });
            Norm {
                gamma,
                beta,
                state: self.norms.len() - 1,
            }
        });
        Ok(Conv {
            weight,
            bias,
            dilation,
            norm,
        })
    }

    fn up(&mut self, name: &str, cin: usize, cout: usize) -> Result<UpConv> {
        let w = glorot_uniform(&[cin, cout, 2, 2], cin * 4, cout * 4, &mut self.rng)?;
        let weight = self.push(format!("{name}.weight"), w);
        let bias = self.push(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Ok(UpConv { weight, bias })
    }
}

/// Dilated FCN at full width.
pub fn build_dilated_fcn(input: InputConfig, seed: u64) -> Result<Network> {
    Network::build(NetworkSpec::new(Architecture::DilatedFcn, input), seed)
}

/// Modified U-net at full width.
pub fn build_unet(input: InputConfig, seed: u64) -> Result<Network> {
    Network::build(NetworkSpec::new(Architecture::Unet, input), seed)
}

impl Network {
    /// Builds the network with Glorot-uniform weights drawn from `seed`,
    /// zero biases, and unit/zero batch-norm affine parameters.
    pub fn build(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut b = Builder {
            params: Vec::new(),
            norms: Vec::new(),
            rng: GlorotUniformInit::new(seed).rng(),
        };
        let cin = spec.input.trunk_in_channels();
        let (trunk, trunk_width) = match spec.architecture {
            Architecture::DilatedFcn => {
                let fcn = DilatedFcnSpec::with_divisor(spec.width_divisor)?;
                let mut layers = Vec::new();
                let mut c = cin;
                for (i, &d) in fcn.dilations.iter().enumerate() {
                    layers.push(b.conv(&format!("trunk.conv{}", i + 1), c, fcn.width, 3, d, true)?);
                    c = fcn.width;
                }
                (Trunk::Fcn(layers), fcn.width)
            }
            Architecture::Unet => {
                let u = UNetSpec::with_divisor(spec.width_divisor)?;
                let mut encoder = Vec::new();
                let mut c = cin;
                for (s, &w) in u.widths.iter().enumerate() {
                    let mut stage = Vec::new();
                    for j in 0..u.convs_per_stage {
                        stage.push(b.conv(&format!("trunk.enc{}.conv{}", s + 1, j + 1), c, w, 3, 1, true)?);
                        c = w;
                    }
                    encoder.push(stage);
                }
                let mut up = Vec::new();
                let mut decoder = Vec::new();
                for s in (0..u.widths.len() - 1).rev() {
                    let w = u.widths[s];
                    up.push(b.up(&format!("trunk.up{}", s + 1), c, w)?);
                    let mut stage = Vec::new();
                    let mut dc = 2 * w;
                    for j in 0..u.convs_per_stage {
                        stage.push(b.conv(&format!("trunk.dec{}.conv{}", s + 1, j + 1), dc, w, 3, 1, true)?);
                        dc = w;
                    }
                    decoder.push(stage);
                    c = w;
                }
                (
                    Trunk::Unet {
                        encoder,
                        up,
                        decoder,
                    },
                    u.widths[0],
                )
            }
        };
        let (merge, head_in) = match spec.input {
            InputConfig::SeparatePhases => (
                Some(b.conv("merge.conv", NUM_PHASES * trunk_width, trunk_width, 1, 1, true)?),
                trunk_width,
            ),
            _ => (None, trunk_width),
        };
        let head = b.conv("head.conv", head_in, NUM_CLASSES, 1, 1, false)?;
        Ok(Network {
            spec,
            params: b.params,
            norms: b.norms,
            trunk,
            merge,
            head,
            trunk_width,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn norms(&self) -> &[NamedNorm] {
        &self.norms
    }

    pub fn norms_mut(&mut self) -> &mut [NamedNorm] {
        &mut self.norms
    }

    /// Channel width of the trunk's final feature maps.
    pub fn trunk_width(&self) -> usize {
        self.trunk_width
    }

    /// Learned scalars: conv weights and biases plus batch-norm gamma/beta.
    pub fn count_params(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Records every parameter on `tape` as a leaf, in parameter order.
    pub fn bind<T: Element>(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.cast::<T>().with_requires_grad(requires_grad)))
            .collect()
    }

    /// Selects the network input from a `[N, P, H, W]` phase stack.
    pub fn prepare_input(&self, phases: &Tensor<f32>) -> Result<Tensor<f32>> {
        let [n, p, h, w] = phases.dims4()?;
        match self.spec.input {
            InputConfig::SinglePhase { phase } => {
                if phase >= p {
                    return Err(Error::shape(format!(
                        "configuration I uses phase {phase}, input has {p} phases"
                    )));
                }
                let plane = h * w;
                let mut out = Vec::with_capacity(n * plane);
                for ni in 0..n {
                    out.extend_from_slice(&phases.data()[(ni * p + phase) * plane..][..plane]);
                }
                Tensor::new(vec![n, 1, h, w], out)
            }
            cfg => {
                if p != NUM_PHASES {
                    return Err(Error::shape(format!(
                        "configuration {cfg} needs {NUM_PHASES} phases, input has {p}"
                    )));
                }
                Ok(phases.clone())
            }
        }
    }

    fn check_input<T: Element>(&self, tape: &Tape<T>, input: Var) -> Result<[usize; 4]> {
        let dims @ [_, c, h, w] = tape.value(input).dims4()?;
        let expected = self.spec.input.in_channels();
        if c != expected {
            return Err(Error::shape(format!(
                "{} configuration {} expects {expected} input channels, got {c}",
                self.spec.architecture, self.spec.input
            )));
        }
        if self.spec.architecture == Architecture::Unet
            && (h % UNetSpec::SIZE_MULTIPLE != 0 || w % UNetSpec::SIZE_MULTIPLE != 0)
        {
            return Err(Error::shape(format!(
                "U-net input {h}x{w} must be divisible by {}",
                UNetSpec::SIZE_MULTIPLE
            )));
        }
        Ok(dims)
    }

    /// Trunk feature maps for a trunk-shaped input (`[N, trunk_in, H, W]`).
    pub fn trunk_features<T: Element>(&mut self, tape: &mut Tape<T>, params: &[Var], x: Var, mode: Mode) -> Result<Var> {
        let Network { trunk, norms, .. } = self;
        match trunk {
            Trunk::Fcn(layers) => {
                let mut h = x;
                for conv in layers.iter() {
                    h = apply_conv(tape, params, norms, conv, h, mode)?;
                }
                Ok(h)
            }
            Trunk::Unet {
                encoder,
                up,
                decoder,
            } => {
                let mut skips = Vec::new();
                let mut h = x;
                let depth = encoder.len();
                for (s, stage) in encoder.iter().enumerate() {
                    for conv in stage {
                        h = apply_conv(tape, params, norms, conv, h, mode)?;
                    }
                    if s + 1 < depth {
                        skips.push(h);
                        h = tape.maxpool2x2(h)?;
                    }
                }
                for (u, stage) in up.iter().zip(decoder.iter()) {
                    let upsampled = tape.conv_transpose2d(h, params[u.weight], params[u.bias])?;
                    let skip = skips.pop().expect("one skip per up-sampling");
                    h = tape.concat_channels(&[skip, upsampled])?;
                    for conv in stage {
                        h = apply_conv(tape, params, norms, conv, h, mode)?;
                    }
                }
                Ok(h)
            }
        }
    }

    /// Merge layer (configuration II only) and the softmax classifier applied
    /// to trunk features.
    pub fn classify<T: Element>(&mut self, tape: &mut Tape<T>, params: &[Var], features: Var, mode: Mode) -> Result<Var> {
        let mut h = features;
        if let Some(merge) = self.merge {
            h = apply_conv(tape, params, &mut self.norms, &merge, h, mode)?;
        }
        let logits = apply_conv(tape, params, &mut self.norms, &self.head, h, mode)?;
        tape.softmax_channels(logits)
    }

    /// Full forward pass to per-pixel class probabilities `[N, 2, H, W]`.
    /// In configuration II the phases run through the shared trunk as one
    /// batch of `N·6` single-channel images.
    pub fn forward<T: Element>(&mut self, tape: &mut Tape<T>, params: &[Var], input: Var, mode: Mode) -> Result<Var> {
        if params.len() != self.params.len() {
            return Err(Error::invalid(format!(
                "{} parameter handles bound, network has {}",
                params.len(),
                self.params.len()
            )));
        }
        let [n, c, h, w] = self.check_input(tape, input)?;
        let features = match self.spec.input {
            InputConfig::SeparatePhases => {
                let stacked = tape.reshape(input, &[n * c, 1, h, w])?;
                let f = self.trunk_features(tape, params, stacked, mode)?;
                tape.reshape(f, &[n, c * self.trunk_width, h, w])?
            }
            _ => self.trunk_features(tape, params, input, mode)?,
        };
        self.classify(tape, params, features, mode)
    }

    /// Foreground probabilities for a `[N, P, H, W]` phase stack in eval mode.
    pub fn predict(&mut self, phases: &Tensor<f32>) -> Result<Tensor<f32>> {
        let input = self.prepare_input(phases)?;
        let mut tape = Tape::<f32>::new();
        let params = self.bind(&mut tape, false);
        let x = tape.constant(input);
        let probs = self.forward(&mut tape, &params, x, Mode::Eval)?;
        let fg = tape.select_channel(probs, 1)?;
        Ok(tape.value(fg).clone())
    }

    /// Slice-by-slice prediction of a phase-averaged, normalized series.
    pub fn predict_volume(&mut self, series: &VolumeSeries) -> Result<ProbabilityMap> {
        let [t, z, y, x] = series.dims();
        let plane = y * x;
        let mut out = Vec::with_capacity(z * plane);
        let mut phases = Vec::with_capacity(t * plane);
        for zi in 0..z {
            phases.clear();
            for ti in 0..t {
                phases.extend_from_slice(series.slice(ti, zi));
            }
            let input = Tensor::new(vec![1, t, y, x], phases.clone())?;
            out.extend_from_slice(self.predict(&input)?.data());
        }
        ProbabilityMap::new([z, y, x], series.spacing_mm(), out)
    }
}

fn apply_conv<T: Element>(
    tape: &mut Tape<T>,
    params: &[Var],
    norms: &mut [NamedNorm],
    conv: &Conv,
    x: Var,
    mode: Mode,
) -> Result<Var> {
    let y = tape.conv2d(x, params[conv.weight], params[conv.bias], conv.dilation)?;
    match conv.norm {
        Some(n) => {
            let y = tape.batchnorm2d(
                y,
                params[n.gamma],
                params[n.beta],
                &mut norms[n.state].state,
                mode,
            )?;
            tape.relu(y)
        }
        None => Ok(y),
    }
}
