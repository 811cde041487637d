use evacmob::classify::{EvacClass, OutcomeRow};
use evacmob::pipeline::{run_in_memory, Params};
use evacmob::synth::{generate_scenario, inferred_labels, scenario_buckets, score_recovery, truth_labels, SynthConfig};

fn recover(cfg: &SynthConfig) -> evacmob::synth::Confusion {
    let p = Params::default();
    let s = generate_scenario(cfg, &p.classify, &p.buffer).unwrap();
    let run = run_in_memory(scenario_buckets(&s), &s.zonemap, &p);
    let rows: Vec<OutcomeRow> = run.outcomes.iter().map(|o| o.row()).collect();
    let truth = truth_labels(&s);
    score_recovery(&truth, &inferred_labels(&truth, &rows)).unwrap()
}

#[test]
fn five_per_class_recovered_exactly() {
    let c = recover(&SynthConfig::uniform(7, 5));
    assert_eq!(c.total(), 35);
    assert!(c.is_diagonal(), "{:?}", c.matrix);
    for class in EvacClass::ALL {
        assert_eq!(c.matrix[class.index()][class.index()], 5);
    }
}

#[test]
fn same_seed_same_outcomes() {
    let p = Params::default();
    let cfg = SynthConfig {
        noise_sigma_m: 10.0,
        gap_prob: 0.3,
        ..SynthConfig::uniform(99, 2)
    };
    let run = || {
        let s = generate_scenario(&cfg, &p.classify, &p.buffer).unwrap();
        run_in_memory(scenario_buckets(&s), &s.zonemap, &p).outcomes
    };
    assert_eq!(run(), run());
}
