//! Trains one MLP on one task of a synthetic blob dataset and prints the loss curve.

use wsim::net::{train_with_history, Activation, NetSpec, TrainConfig};
use wsim::tasks::{partition_into_tasks, synth_gaussian_dataset, TaskData};

fn main() -> wsim::Result<()> {
    let dataset = synth_gaussian_dataset(8, 16, 60, 1.0, 1)?;
    let suite = partition_into_tasks(&dataset, 4, 2, 2)?;
    let data = TaskData::materialize(&dataset, &suite.tasks[0])?;
    let spec = NetSpec::mlp(&[16, 16, 16, 4], Activation::Relu);
    let cfg = TrainConfig::with_default_decay(30, 16, 0.05, 0.9).with_weight_decay(5e-3);
    let out = train_with_history(&spec, &data, &cfg, 42)?;
    for (e, loss) in out.epoch_losses.iter().enumerate().step_by(5) {
        println!("epoch {e:2}: loss {loss:.4}");
    }
    println!(
        "task {} classes {:?}: train acc {:.3}, test acc {:.3}",
        suite.tasks[0].task_id,
        suite.tasks[0].class_ids,
        out.weights.final_train_acc,
        out.weights.final_test_acc
    );
    Ok(())
}
