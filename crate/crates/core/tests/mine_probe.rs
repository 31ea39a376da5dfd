mod common;

use mist::eval::{mi_probe, ProbeConfig, ProbeSource};
use mist::data::{Dataset, DatasetConfig};
use mist::train::TrainConfig;

fn setup() -> (Dataset, mist::train::PretrainOutcome) {
    let ds = Dataset::generate(&DatasetConfig::default()).unwrap();
    let pre = common::pretrained(&ds, &TrainConfig { pretrain_epochs: 20, ..TrainConfig::default() });
    (ds, pre)
}

#[test]
fn independent_noise_stays_near_zero() {
    let (ds, pre) = setup();
    let curve = mi_probe(&pre.content, None, &ds.splits.train, &ProbeConfig::default(), ProbeSource::IndependentNoise).unwrap();
    assert_eq!(curve.epochs.len(), 50);
    for (e, v) in curve.epochs.iter().enumerate() {
        assert!(v.abs() <= 0.05, "epoch {}: {v}", e + 1);
    }
}

#[test]
fn copy_exceeds_one_nat_within_fifty_epochs() {
    let (ds, pre) = setup();
    let curve = mi_probe(&pre.content, None, &ds.splits.train, &ProbeConfig::default(), ProbeSource::Copy).unwrap();
    let best = curve.epochs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert!(best > 1.0, "{:?}", curve.epochs);
}

#[test]
fn probe_is_deterministic() {
    let ds = common::small_dataset(3);
    let pre = common::pretrained(&ds, &common::short_train(3));
    let cfg = ProbeConfig { epochs: 3, ..ProbeConfig::default() };
    let a = mi_probe(&pre.content, None, &ds.splits.train, &cfg, ProbeSource::Copy).unwrap();
    let b = mi_probe(&pre.content, None, &ds.splits.train, &cfg, ProbeSource::Copy).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.csv().lines().next(), Some("epoch,mi"));
}
