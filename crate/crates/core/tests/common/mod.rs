#![allow(dead_code)]

use bsde_stopping::config::{self, ExperimentConfig};
use bsde_stopping::neural::{Checkpoint, CheckpointMeta, Mode, StepNetwork};
use bsde_stopping::problem::Problem;

/// Small geometric-basket setup that trains in well under a second.
pub fn tiny_config(steps: usize) -> ExperimentConfig {
    let mut c = config::preset("geobask-d3").unwrap();
    c.name = "tiny".into();
    c.steps = steps;
    c.horizon = 0.5;
    c.batch = 256;
    c.steps_per_epoch = 8;
    c.widths = vec![8, 8];
    c.lower_paths = 4096;
    c.upper_paths = 512;
    c.substeps = 4;
    c.refine_levels = vec![1, 4];
    c.validate().unwrap();
    c
}

/// Networks with constant value head `c` and constant gradient head `grad`.
pub fn constant_checkpoint(problem: &Problem, c: f64, grad: f64) -> Checkpoint {
    let d = problem.dim();
    let mut ck = Checkpoint::new(CheckpointMeta {
        dim: d,
        widths: vec![4, 4],
        input_norm: false,
        steps: problem.steps(),
        horizon: problem.grid.horizon(),
        seed: 0,
        config_hash: "constant".into(),
        objective: "bsde".into(),
    });
    for k in 1..problem.steps() {
        let mut net = StepNetwork::new(d, &[4, 4], false);
        net.value.output.bias.fill(c);
        net.gradient.output.bias.fill(grad);
        net.set_mode(Mode::Evaluation);
        ck.set(k, net);
    }
    ck
}
