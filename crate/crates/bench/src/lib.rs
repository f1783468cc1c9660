//! Fixed workloads shared by the criterion benches.

use deepnorm_core::gains::ArchShape;
use deepnorm_core::init::xavier_normal;
use deepnorm_core::model::{build_model, InitScheme, ModelConfig, NormKind, TransformerModel};
use deepnorm_core::rng::rng_for;
use deepnorm_core::train::{TaskKind, TaskSpec, TrainConfig};
use deepnorm_core::Tensor;

/// Xavier-scaled `[rows × cols]` matrix drawn from the named stream.
pub fn matrix(rows: usize, cols: usize, name: &str) -> Tensor {
    xavier_normal(rows, cols, 1.0, &mut rng_for(0, name))
}

/// The desk-scale model used by the training sweeps, at `depth` layer pairs.
pub fn desk_model(depth: usize, norm: NormKind) -> TransformerModel {
    let init = if norm == NormKind::DeepNorm { InitScheme::DeepnormInit } else { InitScheme::XavierGain1 };
    let cfg = ModelConfig { max_seq_len: 16, ..ModelConfig::desk(ArchShape::encoder_decoder(depth, depth), norm, init, 1) };
    build_model(&cfg).expect("desk config is valid")
}

/// Copy task, batch 8 of length 8, Adam at 5e-4.
pub fn desk_train(steps: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        task: TaskSpec { kind: TaskKind::Copy, vocab_size: 32, seq_len: 8 },
        record_interval: steps.max(1),
        ..TrainConfig::desk(5e-4, steps, 1)
    }
}
