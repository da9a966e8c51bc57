//! Seeded toy classification fixtures: a generated image world, its train
//! and test splits and a network trained on the train split.

use std::path::Path;

use anyhow::Result;
use gptq_core::tensor::{accuracy, save_dataset, save_network, train_toy, ToyArch, TrainSettings};
use gptq_core::{make_dataset, CalibrationSet, DatasetKind, NetworkRecord, WorldSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    pub arch: ToyArch,
    pub classes: usize,
    pub noise: f64,
    pub train_size: usize,
    pub test_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            arch: ToyArch::Cnn,
            classes: 8,
            noise: WorldSpec::image(8, 0).noise,
            train_size: 2048,
            test_size: 4096,
            epochs: TrainSettings::default().epochs,
            seed: 0,
        }
    }
}

impl FixtureSpec {
    pub fn seeded(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }
}

pub struct Fixture {
    pub net: NetworkRecord,
    pub train: CalibrationSet,
    pub test: CalibrationSet,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

pub fn build_fixture(spec: &FixtureSpec) -> Result<Fixture> {
    let world = WorldSpec {
        noise: spec.noise,
        ..WorldSpec::image(spec.classes, spec.seed)
    };
    let train = make_dataset(&world, DatasetKind::TrainSplit, spec.train_size, spec.seed)?;
    let test = make_dataset(&world, DatasetKind::TestSplit, spec.test_size, spec.seed)?;
    let settings = TrainSettings {
        epochs: spec.epochs,
        seed: spec.seed,
        ..TrainSettings::default()
    };
    let outcome = train_toy(spec.arch, &train, &settings)?;
    let test_accuracy = accuracy(&outcome.net, &test)?;
    Ok(Fixture {
        net: outcome.net,
        train,
        test,
        train_accuracy: outcome.train_accuracy,
        test_accuracy,
    })
}

/// Writes `dir/model`, `dir/train` and `dir/test`.
pub fn write_fixture(f: &Fixture, dir: &Path) -> Result<()> {
    save_network(&f.net, &dir.join("model"))?;
    save_dataset(&f.train, &dir.join("train"))?;
    save_dataset(&f.test, &dir.join("test"))?;
    Ok(())
}
