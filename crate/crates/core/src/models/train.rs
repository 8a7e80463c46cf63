use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::dataset::SliceSample;
use crate::error::{Error, Result};
use crate::models::network::Network;
use crate::nn::{AdamConfig, AdamState, DiceLossConfig};
use crate::tape::{Mode, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainSchedule {
    pub iterations: u64,
    pub seed: u64,
    pub learning_rate: f64,
    /// Invoke the checkpoint callback every this many iterations.
    pub checkpoint_every: Option<u64>,
}

impl TrainSchedule {
    pub fn new(iterations: u64, seed: u64) -> Self {
        TrainSchedule {
            iterations,
            seed,
            learning_rate: AdamConfig::default().lr,
            checkpoint_every: None,
        }
    }
}

/// Network input and target for one slice, prepared for a given input
/// configuration.
#[derive(Clone, Debug)]
pub struct TrainingExample {
    pub input: Tensor<f32>,
    pub target: Tensor<f32>,
}

/// Converts slices into the input layout the network expects.
pub fn prepare_examples(network: &Network, slices: &[SliceSample]) -> Result<Vec<TrainingExample>> {
    slices
        .iter()
        .map(|s| {
            Ok(TrainingExample {
                input: network.prepare_input(&s.phases)?,
                target: s.mask.clone(),
            })
        })
        .collect()
}

/// Single-slice Adam training on the soft Dice loss.
pub struct Trainer {
    network: Network,
    adam: AdamState,
    sampler: ChaCha8Rng,
    dice: DiceLossConfig,
    loss_trace: Vec<(u64, f32)>,
}

impl Trainer {
    pub fn new(network: Network, adam: AdamConfig, seed: u64) -> Self {
        let state = AdamState::new(adam, network.params());
        Trainer {
            network,
            adam: state,
            sampler: ChaCha8Rng::seed_from_u64(seed),
            dice: DiceLossConfig::default(),
            loss_trace: Vec::new(),
        }
    }

    /// Continues a run from a restored network and optimizer state. The
    /// sampler is fast-forwarded past the `adam.t` slices already drawn.
    pub fn resume(network: Network, adam: AdamState, seed: u64, num_examples: usize) -> Result<Self> {
        if num_examples == 0 {
            return Err(Error::invalid("cannot resume training on an empty dataset"));
        }
        let mut sampler = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..adam.t {
            sampler.random_range(0..num_examples);
        }
        Ok(Trainer {
            network,
            adam,
            sampler,
            dice: DiceLossConfig::default(),
            loss_trace: Vec::new(),
        })
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn into_network(self) -> Network {
        self.network
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn iteration(&self) -> u64 {
        self.adam.t
    }

    /// `(iteration, loss)` for every step taken by this trainer.
    pub fn loss_trace(&self) -> &[(u64, f32)] {
        &self.loss_trace
    }

    /// Draws one slice uniformly (with replacement), takes one Adam step on
    /// `1 - dice_similarity`, and returns the loss before the update.
    pub fn step(&mut self, examples: &[TrainingExample]) -> Result<f32> {
        if examples.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        let ex = &examples[self.sampler.random_range(0..examples.len())];
        let mut tape = Tape::<f32>::new();
        let params = self.network.bind(&mut tape, true);
        let x = tape.constant(ex.input.clone());
        let probs = self.network.forward(&mut tape, &params, x, Mode::Train)?;
        let fg = tape.select_channel(probs, 1)?;
        let loss = tape.dice_loss(fg, &ex.target, self.dice.smoothing as f32)?;
        let loss_value = tape.value(loss).item()?;
        tape.backward(loss)?;
        let grads: Vec<Vec<f32>> = params
            .iter()
            .map(|&v| match tape.grad(v) {
                Some(g) => g.to_vec(),
                None => vec![0.0; tape.value(v).numel()],
            })
            .collect();
        let grad_refs: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
        self.adam.step(self.network.params_mut(), &grad_refs)?;
        self.loss_trace.push((self.adam.t, loss_value));
        Ok(loss_value)
    }
}

/// Result of [`train`].
pub struct TrainOutcome {
    pub network: Network,
    pub adam: AdamState,
    pub loss_trace: Vec<(u64, f32)>,
}

/// Runs `schedule.iterations` steps from scratch. `on_checkpoint` is called
/// with the trainer every `checkpoint_every` iterations.
pub fn train(
    network: Network,
    slices: &[SliceSample],
    schedule: TrainSchedule,
    mut on_checkpoint: impl FnMut(&Trainer) -> Result<()>,
) -> Result<TrainOutcome> {
    if schedule.iterations == 0 {
        return Err(Error::invalid("training needs at least one iteration"));
    }
    if !(schedule.learning_rate > 0.0 && schedule.learning_rate.is_finite()) {
        return Err(Error::invalid(format!(
            "learning rate must be positive, got {}",
            schedule.learning_rate
        )));
    }
    if slices.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let examples = prepare_examples(&network, slices)?;
    let adam = AdamConfig {
        lr: schedule.learning_rate,
        ..AdamConfig::default()
    };
    let mut trainer = Trainer::new(network, adam, schedule.seed);
    run_until(&mut trainer, &examples, schedule.iterations, schedule.checkpoint_every, &mut on_checkpoint)?;
    let Trainer {
        network,
        adam,
        loss_trace,
        ..
    } = trainer;
    Ok(TrainOutcome {
        network,
        adam,
        loss_trace,
    })
}

/// Steps `trainer` until its iteration counter reaches `until`.
pub fn run_until(
    trainer: &mut Trainer,
    examples: &[TrainingExample],
    until: u64,
    checkpoint_every: Option<u64>,
    on_checkpoint: &mut impl FnMut(&Trainer) -> Result<()>,
) -> Result<()> {
    while trainer.iteration() < until {
        trainer.step(examples)?;
        if let Some(every) = checkpoint_every.filter(|&e| e > 0) {
            if trainer.iteration() % every == 0 {
                on_checkpoint(trainer)?;
            }
        }
    }
    Ok(())
}

/// Mean of the last `window` losses.
pub fn smoothed_loss(trace: &[(u64, f32)], window: usize) -> Option<f64> {
    if trace.is_empty() || window == 0 {
        return None;
    }
    let tail = &trace[trace.len().saturating_sub(window)..];
    Some(tail.iter().map(|&(_, l)| l as f64).sum::<f64>() / tail.len() as f64)
}
