use grasp_stabilizer::eval::{run_trial, summarize_log, Condition, ConditionModels};
use grasp_stabilizer::model::{PredictiveModel, TrainConfig};
use grasp_stabilizer::search::{build_pairs, collect, split, SearchConfig, SearchMode};
use grasp_stabilizer::sim::{HandSim, PhysicsConfig, ScenarioKind};
use grasp_stabilizer::stabilizer::StabilizerConfig;
use grasp_stabilizer::types::HORIZON;

fn main() {
    let seed = 103;
    let physics = PhysicsConfig::default();
    let mut sim = HandSim::new(physics.clone(), seed);
    let log = collect(&mut sim, &SearchConfig::new(SearchMode::Variable, 900, seed));
    let pairs = build_pairs(&log, HORIZON).unwrap();
    let (train, test) = split(&pairs, seed).unwrap();
    let mut vm = PredictiveModel::standard(seed);
    vm.train(&train, &test, &TrainConfig { seed, ..TrainConfig::default() }).unwrap();
    vm.save(std::path::Path::new("/tmp/vm103.json"), None).unwrap();

    let models = ConditionModels { variable: Some(vm), constant: None };
    let stab = StabilizerConfig::default();
    for scen in [ScenarioKind::Quiet, ScenarioKind::Hammer] {
        for cond in [Condition::NoStabilizer, Condition::VariableStabilizer] {
            let log = run_trial(scen, cond, 777, 60.0, &physics, &models, &stab).unwrap();
            let stats = summarize_log(&log, 60.0).unwrap();
            let series = log.l_eval_series();
            let ma = grasp_stabilizer::eval::moving_average(&series, 10).unwrap();
            let probe: Vec<String> = [0.0, 10.0, 20.0, 30.0, 45.0, 60.0]
                .iter()
                .map(|t| format!("{:.4}", grasp_stabilizer::eval::value_at_time(&ma, *t)))
                .collect();
            let cmd_scale: f64 = log.ticks.iter().map(|t| t.command_mm.iter().map(|v| v.abs()).sum::<f64>()).sum::<f64>() / log.ticks.len() as f64;
            println!(
                "{scen} {cond}: ma@[0,10,20,30,45,60]={probe:?} dropped={} |u|avg={cmd_scale:.2}mm",
                stats.dropped
            );
        }
    }
}
