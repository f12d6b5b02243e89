use grasp_stabilizer::search::{collect, SearchConfig, SearchMode};
use grasp_stabilizer::sim::{HandSim, PhysicsConfig};

fn main() {
    for seed in 100u64..140 {
        let both: Vec<bool> = [SearchMode::Variable, SearchMode::Constant]
            .into_iter()
            .map(|mode| {
                let mut sim = HandSim::new(PhysicsConfig::default(), seed);
                let log = collect(&mut sim, &SearchConfig::new(mode, 900, seed));
                !log.truncated_by_drop
            })
            .collect();
        if both.iter().all(|b| *b) {
            print!("{seed} ");
        }
    }
    println!();
}
