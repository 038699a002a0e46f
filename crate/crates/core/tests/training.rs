use tepose::checkpoint;
use tepose::config::RunConfig;
use tepose::dataset::Dataset;
use tepose::kinematics::KinematicModel;
use tepose::params::Parameters;
use tepose::synth::build_dataset;
use tepose::train::{Trainer, TrainerState};
use tepose::Error;

fn tiny() -> RunConfig {
    let mut c = RunConfig::desk();
    c.synth.train_3d = 4;
    c.synth.train_2d = 4;
    c.synth.test = 2;
    c.synth.real = 4;
    c.synth.length = (12, 20);
    c.loader.max_len = 20;
    c.loader.batch = 4;
    c.loader.epoch_fraction = 0.5;
    c.predictor.hidden = 12;
    c.predictor.regressor_width = 12;
    c
}

fn data(c: &RunConfig) -> Dataset {
    build_dataset(&c.synth, &KinematicModel::default_body()).unwrap()
}

fn param_bits(s: &TrainerState) -> Vec<u64> {
    let p = s.predictor.params.tensors().into_iter();
    let d = s.discriminator.params.tensors().into_iter();
    p.chain(d)
        .flat_map(|(_, t)| t.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect()
}

#[test]
fn identical_seeds_give_identical_runs() {
    let c = tiny();
    let d = data(&c);
    let mut a = Trainer::new(c.clone(), &d).unwrap();
    let mut b = Trainer::new(c, &d).unwrap();
    a.run(30).unwrap();
    b.run(30).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(param_bits(&a.state()), param_bits(&b.state()));
}

#[test]
fn different_seeds_diverge() {
    let c = tiny();
    let d = data(&c);
    let mut a = Trainer::new(c.clone(), &d).unwrap();
    let mut b = Trainer::new(c.with_overrides(&["seed=9".into()]).unwrap(), &d).unwrap();
    a.run(3).unwrap();
    b.run(3).unwrap();
    assert_ne!(param_bits(&a.state()), param_bits(&b.state()));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let c = tiny();
    let d = data(&c);
    let mut straight = Trainer::new(c.clone(), &d).unwrap();
    straight.run(47).unwrap();

    let mut first = Trainer::new(c.clone(), &d).unwrap();
    // stop mid-epoch so the cache and active sets must survive the round trip
    first.run(27).unwrap();
    let bytes = checkpoint::to_bytes(&c, &first.state()).unwrap();
    let (config, state) = checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(config, c);
    let mut resumed = Trainer::resume(config, &d, state).unwrap();
    assert_eq!(resumed.iteration(), 27);
    resumed.run(47).unwrap();

    assert_eq!(&straight.history[27..], &resumed.history[..]);
    assert_eq!(param_bits(&straight.state()), param_bits(&resumed.state()));
    let (x, y) = (straight.evaluate_test().unwrap(), resumed.evaluate_test().unwrap());
    assert_eq!(x.mpjpe.to_bits(), y.mpjpe.to_bits());
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let c = tiny();
    let d = data(&c);
    let mut t = Trainer::new(c.clone(), &d).unwrap();
    t.run(2).unwrap();
    let bytes = checkpoint::to_bytes(&c, &t.state()).unwrap();
    assert!(checkpoint::from_bytes(&bytes).is_ok());

    let mut magic = bytes.clone();
    magic[0] = b'X';
    let mut version = bytes.clone();
    version[4] = 99;
    let mut trailing = bytes.clone();
    trailing.push(0);
    for bad in [magic, version, bytes[..bytes.len() - 3].to_vec(), trailing, Vec::new()] {
        assert!(matches!(checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
    }
}

#[test]
fn trainer_rejects_a_dataset_for_another_body() {
    let mut wrong = data(&tiny());
    for v in &mut wrong.videos {
        for m in &mut v.gt_joints2d {
            *m = m.clone().insert_row(0, 0.0);
        }
    }
    assert!(matches!(Trainer::new(tiny(), &wrong), Err(Error::Config(_))));
}
