#![allow(dead_code)]

use calireg::calib::PredictionRecord;
use calireg::data::{generate_synthetic, prepare_splits, Dataset, SplitFractions, SynthConfig, TargetTransform};
use calireg::net::{train, RegressorModel, TrainOutcome};
use calireg::pipeline::{build_model, predict_records, weight_scheme, RunConfig};

pub struct Trained {
    pub outcome: TrainOutcome,
    pub transform: TargetTransform,
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

impl Trained {
    pub fn model(&self) -> &RegressorModel {
        &self.outcome.model
    }

    pub fn records(&self, ds: &Dataset) -> Vec<PredictionRecord> {
        predict_records(self.model(), ds).unwrap()
    }

    /// Fresh samples from the same generator under another seed, in the
    /// training transform.
    pub fn extra_test(&self, cfg: &RunConfig, n: usize, seed: u64) -> Dataset {
        let synth = SynthConfig { n_samples: n, seed, ..cfg.synth.clone() };
        generate_synthetic(&synth).unwrap().with_transform(self.transform).unwrap()
    }
}

pub fn run_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.synth.seed = seed;
    cfg.model.seed = seed;
    cfg.train.seed = seed;
    cfg
}

pub fn train_in_memory(cfg: &RunConfig) -> Trained {
    let pool = generate_synthetic(&cfg.synth).unwrap();
    let (tr, va, te) = prepare_splits(&pool, cfg.transform, SplitFractions::default()).unwrap();
    let model = build_model(cfg, tr.series_len).unwrap();
    let ws = weight_scheme(cfg, &tr).unwrap();
    let outcome = train(model, &tr, Some(&va), &cfg.train, &ws).unwrap();
    Trained { outcome, transform: tr.transform, train: tr, valid: va, test: te }
}
