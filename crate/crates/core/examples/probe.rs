use std::time::Instant;

use grasp_stabilizer::eval::{
    run_trial, summarize_log, Condition, ConditionModels,
};
use grasp_stabilizer::model::{PredictiveModel, TrainConfig};
use grasp_stabilizer::search::{build_pairs, collect, split, SearchConfig, SearchMode};
use grasp_stabilizer::sim::{HandSim, PhysicsConfig, ScenarioKind};
use grasp_stabilizer::stabilizer::StabilizerConfig;
use grasp_stabilizer::types::HORIZON;

fn train_one(mode: SearchMode, seed: u64) -> (PredictiveModel, f64, f64) {
    let physics = PhysicsConfig::default();
    let mut sim = HandSim::new(physics, seed);
    let log = collect(&mut sim, &SearchConfig::new(mode, 900, seed));
    assert_eq!(log.len(), 900, "collection must survive");
    let pairs = build_pairs(&log, HORIZON).unwrap();
    let (train, test) = split(&pairs, seed).unwrap();
    let mut model = PredictiveModel::standard(seed);
    let cfg = TrainConfig { seed, ..TrainConfig::default() };
    let t0 = Instant::now();
    let curve = model.train(&train, &test, &cfg).unwrap();
    let first = curve.first().unwrap().test_loss.unwrap();
    let last = curve.last().unwrap().test_loss.unwrap();
    println!(
        "trained {mode:?}: epoch1 test {first:.5} final test {last:.5} ratio {:.3} ({:.1}s)",
        last / first,
        t0.elapsed().as_secs_f64()
    );
    (model, first, last)
}

fn main() {
    let seed = 103;
    let (vm, _vf, vl) = train_one(SearchMode::Variable, seed);
    let (cm, _cf, cl) = train_one(SearchMode::Constant, seed);
    println!("variable final {vl:.5} vs constant final {cl:.5} (ratio {:.3})", vl / cl);

    let physics = PhysicsConfig::default();
    let stab = StabilizerConfig::default();
    let models = ConditionModels { variable: Some(vm), constant: Some(cm) };

    for scenario in [ScenarioKind::Hammer, ScenarioKind::Broom] {
        println!("--- {scenario} 60s x5 seeds");
        let mut drops = std::collections::BTreeMap::new();
        for cond in [Condition::VariableStabilizer, Condition::ConstantStabilizer, Condition::NoStabilizer] {
            let mut line = format!("{cond:>9}: ");
            let mut d = 0;
            for trial in 0..5u64 {
                let t0 = Instant::now();
                let log = run_trial(scenario, cond, 300 + trial, 60.0, &physics, &models, &stab).unwrap();
                let stats = summarize_log(&log, 60.0).unwrap();
                line += &format!(
                    "[ma60 {:.3}{} {:.0}s] ",
                    stats.ma_checkpoints[2],
                    if stats.dropped { " DROP" } else { "" },
                    t0.elapsed().as_secs_f64()
                );
                if stats.dropped { d += 1; }
            }
            drops.insert(format!("{cond}"), d);
            println!("{line}");
        }
        println!("drops: {drops:?}");
    }
}
