//! Finite-difference check of the whole pre-training loss with respect to
//! sampled model parameters, in 64-bit.

use crate::corpus::{EegSample, SubjectTag};
use crate::error::Result;
use crate::grouping::AugmentedBatch;
use crate::network::{BlockSpec, EncoderConfig, Model, ModelConfig, ProjectorConfig};
use crate::numerics::{ErrorTally, PoolKind, ATOL, FD_STEP, RTOL};
use crate::rng::SeededRng;

use super::loss::LossConfig;
use super::pretrain::contrastive_forward;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckReport {
    pub checked: usize,
    pub failures: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// Parameter holding the largest relative error.
    pub worst: String,
}

impl ModelCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }
}

/// A small encoder and projector that still exercise every layer kind.
pub fn check_model_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            stem_kernel: 3,
            stem_width: 3,
            stem_stride: 1,
            stem_pool: true,
            blocks: vec![BlockSpec::new(3, 3, 1), BlockSpec::new(3, 4, 2)],
            output_dim: 5,
        },
        projector: ProjectorConfig {
            hidden: vec![6, 4],
            pool: PoolKind::Max,
            dropout: 0.5,
        },
        classifier: None,
    }
}

fn random_batch(p: usize, q: usize, c: usize, m: usize, rng: &mut SeededRng) -> Result<AugmentedBatch> {
    let mut side = |clip: usize| -> Result<Vec<EegSample>> {
        (0..q)
            .map(|s| {
                let values = (0..c * m).map(|_| rng.normal() as f32).collect();
                EegSample::new(c, m, values, clip as u32, SubjectTag::Single(s as u32))
            })
            .collect()
    };
    let mut pairs = Vec::with_capacity(p);
    for clip in 0..p {
        let a = side(clip)?;
        let b = side(clip)?;
        pairs.push((a, b));
    }
    Ok(AugmentedBatch {
        pairs,
        split_position: m / 2,
    })
}

/// Compares the analytic gradient of the train-mode group NT-Xent loss with
/// central differences for `per_param` sampled entries of every parameter.
pub fn model_grad_check(seed: u64, per_param: usize) -> Result<ModelCheckReport> {
    let root = SeededRng::new(seed);
    let mut model: Model<f64> = Model::new(check_model_config(), seed)?;
    let aug = random_batch(3, 2, 4, 16, &mut root.substream("batch"))?;
    let loss_cfg = LossConfig { temperature: 0.5 };
    let dropout_seed = root.substream("dropout").next_u64();

    let (trace, _, loss) = contrastive_forward(&model, &aug, &loss_cfg, true, dropout_seed)?;
    let grads = trace.gradients(loss)?;

    let mut pick = root.substream("entries");
    let mut tally = ErrorTally::default();
    let mut worst = (0.0, String::new());
    for (name, grad) in &grads {
        let n = grad.len();
        let entries = pick.choose_distinct(n, per_param.min(n));
        for i in entries {
            let orig = model.store.param(name)?.data()[i];
            let mut eval = |v: f64| -> Result<f64> {
                model.store.param_mut(name)?.data_mut()[i] = v;
                let (t, _, l) = contrastive_forward(&model, &aug, &loss_cfg, true, dropout_seed)?;
                Ok(t.graph.value(l).item())
            };
            let up = eval(orig + FD_STEP)?;
            let down = eval(orig - FD_STEP)?;
            model.store.param_mut(name)?.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let before = tally.max_rel;
            tally.record(grad.data()[i], numeric, RTOL, ATOL);
            if tally.max_rel > before && tally.max_rel > worst.0 {
                worst = (tally.max_rel, name.clone());
            }
        }
    }
    Ok(ModelCheckReport {
        checked: tally.checked,
        failures: tally.failures,
        max_abs_err: tally.max_abs,
        max_rel_err: tally.max_rel,
        worst: worst.1,
    })
}
