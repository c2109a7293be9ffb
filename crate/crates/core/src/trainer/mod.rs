//! Composite objective, optimisation loop and checkpointed runs.

pub mod config;
pub mod optim;
pub mod run;
pub mod state;

pub use config::ExperimentConfig;
pub use optim::{cosine_lr, Sgd};
pub use run::{run_experiment, Artifacts, RunOptions, RunOutcome};
pub use state::{total_loss, train_step, LossBreakdown, TrainState};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// Mean softmax cross-entropy of `[n, classes]` logits.
pub fn task_loss<'t>(logits: &Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Shape {
            op: "task_loss",
            lhs: shape,
            rhs: vec![labels.len()],
        });
    }
    let (n, classes) = (shape[0], shape[1]);
    let mut onehot = vec![0.0; n * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::LabelOutOfRange {
                label: y,
                n_classes: classes,
            });
        }
        onehot[i * classes + y] = 1.0;
    }
    let onehot = logits.tape().constant(Tensor::new(vec![n, classes], onehot)?);
    Ok(logits.log_softmax().mul(&onehot)?.sum().scale(-1.0 / n as f64))
}
