use otrcl::checkpoint::Checkpoint;
use otrcl::data::{generate, Dataset, SynthConfig};
use otrcl::experiment::evaluate_checkpoint;
use otrcl::model::{train, Mode, TrainConfig};

fn data(noise: f64, spread: f64) -> Dataset {
    generate(&SynthConfig {
        n: 400,
        n_val: 100,
        n_test: 100,
        k: 4,
        d_v: 12,
        d_t: 10,
        cluster_spread: spread,
        noise_ratio: noise,
        seed: 5,
        ..Default::default()
    })
    .unwrap()
}

fn config(mode: Mode, epochs: usize) -> TrainConfig {
    TrainConfig { mode, epochs, batch_size: 50, hidden: 16, embed_dim: 8, seed: 9, ..Default::default() }
}

#[test]
fn warmup_only_run_is_plain_cross_entropy() {
    let d = data(0.4, 0.2);
    let full = train(&d, &TrainConfig { warmup_epochs: 2, ..config(Mode::Full, 2) }).unwrap();
    let ce = train(&d, &TrainConfig { warmup_epochs: 2, ..config(Mode::CeBaseline, 2) }).unwrap();
    assert_eq!(full.counters.partial_ot_solves, 0);
    assert_eq!(full.counters.relation_ot_solves, 0);
    assert_eq!(full.state, ce.state);
    assert_eq!(full.log.final_test, ce.log.final_test);
}

#[test]
fn training_is_deterministic() {
    let d = data(0.4, 0.2);
    let c = config(Mode::Full, 5);
    let a = train(&d, &c).unwrap();
    let b = train(&d, &c).unwrap();
    assert!(a.counters.partial_ot_solves > 0 && a.counters.relation_ot_solves > 0);
    assert_eq!(a.state, b.state);
    assert_eq!(serde_json::to_string(&a.log.epochs).unwrap(), serde_json::to_string(&b.log.epochs).unwrap());
}

#[test]
fn checkpoint_reproduces_final_validation() {
    let d = data(0.4, 0.2);
    let out = train(&d, &config(Mode::Full, 4)).unwrap();
    let bytes = Checkpoint::from_outcome(&out).encode();
    let report = evaluate_checkpoint(&Checkpoint::decode(&bytes).unwrap(), &d).unwrap();
    let last = out.log.epochs.last().unwrap();
    assert_eq!(report.val_map_i2t, last.val_map_i2t);
    assert_eq!(report.val_map_t2i, last.val_map_t2i);
    assert_eq!(report.map_i2t, last.test_map_i2t);
}

#[test]
fn clean_separated_data_does_not_hurt() {
    let d = data(0.0, 0.1);
    let val = |mode| {
        let out = train(&d, &config(mode, 12)).unwrap();
        let last = out.log.epochs.last().unwrap().clone();
        0.5 * (last.val_map_i2t.unwrap() + last.val_map_t2i.unwrap())
    };
    let (full, ce) = (val(Mode::Full), val(Mode::CeBaseline));
    assert!(full >= ce - 0.01, "full {full} vs ce {ce}");
}

#[test]
fn ablations_switch_off_their_solvers() {
    let d = data(0.4, 0.2);
    let plc = train(&d, &config(Mode::AblatePlc, 4)).unwrap();
    assert_eq!(plc.counters.partial_ot_solves, 0);
    assert!(plc.counters.relation_ot_solves > 0);
    let bhg = train(&d, &config(Mode::AblateBhg, 4)).unwrap();
    assert!(bhg.counters.partial_ot_solves > 0);
    assert_eq!(bhg.counters.relation_ot_solves, 0);
}
