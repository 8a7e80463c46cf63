//! End-to-end phantom studies: generate cases, preprocess, train, segment and
//! score held-out cases.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::dataset::{extract_slices, Case, SliceSample};
use crate::data::preprocess::{normalize, NormalizationParams};
use crate::data::volume::{BinaryMask3D, VolumeSeries};
use crate::error::{Error, Result};
use crate::eval::{dsc, hd95, postprocess, MetricsReport, MetricsRow, DEFAULT_THRESHOLD};
use crate::models::{train, Checkpoint, Network, NetworkSpec, TrainSchedule};
use crate::nn::AdamState;
use crate::phantom::{generate_phantom, PhantomSpec};

/// Phantom seeds for `count` cases drawn from one study seed.
pub fn case_seeds(study_seed: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(study_seed ^ 0xbb67_ae85_84ca_a73b);
    (0..count).map(|_| rng.random()).collect()
}

pub fn case_id(index: usize) -> String {
    format!("case_{index:03}")
}

/// Generates `count` phantom cases named `case_000`, `case_001`, ...
pub fn generate_cases(spec: &PhantomSpec, study_seed: u64, count: usize) -> Result<Vec<Case>> {
    case_seeds(study_seed, count)
        .into_iter()
        .enumerate()
        .map(|(i, seed)| {
            let (series, mask) = generate_phantom(&spec.with_seed(seed))?;
            Case::new(case_id(i), series, mask)
        })
        .collect()
}

/// Intensity normalization with the default percentile clip.
pub fn preprocess_series(series: &VolumeSeries) -> Result<VolumeSeries> {
    Ok(normalize(series, &NormalizationParams::default())?.0)
}

/// Normalizes every case and cuts it into axial training slices.
pub fn training_slices(cases: &[Case]) -> Result<Vec<SliceSample>> {
    let mut slices = Vec::new();
    for c in cases {
        slices.extend(extract_slices(&c.id, &preprocess_series(&c.series)?, &c.mask)?);
    }
    Ok(slices)
}

/// Forward pass over a normalized series followed by threshold, hole filling
/// and largest-component selection.
pub fn segment(network: &mut Network, normalized: &VolumeSeries) -> Result<BinaryMask3D> {
    postprocess(&network.predict_volume(normalized)?, DEFAULT_THRESHOLD)
}

pub fn score(case: &str, prediction: &BinaryMask3D, truth: &BinaryMask3D) -> Result<MetricsRow> {
    Ok(MetricsRow {
        case: case.to_string(),
        dsc: dsc(prediction, truth)?,
        hd95_mm: hd95(prediction, truth, truth.spacing_mm())?,
    })
}

/// A train/test phantom experiment at desk scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomStudy {
    pub phantom: PhantomSpec,
    pub network: NetworkSpec,
    pub train_cases: usize,
    pub test_cases: usize,
    pub iterations: u64,
    pub learning_rate: f64,
    /// Drives case generation, weight initialization and slice sampling.
    pub seed: u64,
}

pub struct StudyOutcome {
    pub network: Network,
    pub adam: AdamState,
    pub loss_trace: Vec<(u64, f32)>,
    /// Held-out cases that produced a non-empty segmentation.
    pub metrics: MetricsReport,
    /// Held-out cases whose segmentation came out empty (DSC 0).
    pub empty_cases: Vec<String>,
}

impl StudyOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_network(&self.network, Some(&self.adam))
    }

    /// Mean held-out DSC, counting empty segmentations as 0.
    pub fn mean_dsc(&self) -> f64 {
        let n = self.metrics.rows().len() + self.empty_cases.len();
        self.metrics.dsc_values().iter().sum::<f64>() / n as f64
    }
}

impl PhantomStudy {
    pub fn run(&self) -> Result<StudyOutcome> {
        if self.train_cases == 0 || self.test_cases == 0 {
            return Err(Error::invalid("a study needs at least one training and one test case"));
        }
        let cases = generate_cases(&self.phantom, self.seed, self.train_cases + self.test_cases)?;
        let (train_set, test_set) = cases.split_at(self.train_cases);
        let slices = training_slices(train_set)?;
        let network = Network::build(self.network, self.seed)?;
        let schedule = TrainSchedule {
            learning_rate: self.learning_rate,
            ..TrainSchedule::new(self.iterations, self.seed)
        };
        let trained = train(network, &slices, schedule, |_| Ok(()))?;
        let mut network = trained.network;

        let mut rows = Vec::new();
        let mut empty_cases = Vec::new();
        for case in test_set {
            match segment(&mut network, &preprocess_series(&case.series)?) {
                Ok(pred) => rows.push(score(&case.id, &pred, &case.mask)?),
                Err(Error::Degenerate(_)) => empty_cases.push(case.id.clone()),
                Err(e) => return Err(e),
            }
        }
        Ok(StudyOutcome {
            network,
            adam: trained.adam,
            loss_trace: trained.loss_trace,
            metrics: MetricsReport::new(rows)?,
            empty_cases,
        })
    }
}
