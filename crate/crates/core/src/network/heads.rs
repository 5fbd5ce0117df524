//! Group projector and classifier.

use serde::{Deserialize, Serialize};

use super::layers::Forward;
use super::store::ParamStore;
use crate::error::{Error, Result};
use crate::numerics::{NodeId, Op, PoolKind, Scalar};
use crate::rng::SeededRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectorConfig {
    /// Widths of the three layers of the per-member MLP; the last is `H`.
    pub hidden: Vec<usize>,
    pub pool: PoolKind,
    pub dropout: f64,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        Self {
            hidden: vec![1024, 2048, 4096],
            pool: PoolKind::Max,
            dropout: 0.5,
        }
    }
}

impl ProjectorConfig {
    pub fn output_dim(&self) -> usize {
        self.hidden.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config("projector hidden widths must be nonempty and positive"));
        }
        check_rate(self.dropout)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub hidden: Vec<usize>,
    pub n_classes: usize,
    pub dropout: f64,
}

impl ClassifierConfig {
    pub fn new(n_classes: usize) -> Self {
        Self {
            hidden: vec![512, 256, 128],
            n_classes,
            dropout: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::config(format!("classifier needs at least 2 classes, got {}", self.n_classes)));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("classifier hidden widths must be positive"));
        }
        check_rate(self.dropout)
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(())
}

fn init_mlp<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, input: usize, widths: &[usize], rng: &mut SeededRng) {
    let mut fan_in = input;
    for (i, &w) in widths.iter().enumerate() {
        store.init_weight(format!("{prefix}.fc{i}.w"), &[w, fan_in], fan_in, rng);
        store.init_bias(format!("{prefix}.fc{i}.b"), w, fan_in, rng);
        fan_in = w;
    }
}

/// Linear layers named `{prefix}.fc{i}`, each followed by BN, ReLU, and
/// dropout except the last when `plain_last` is set.
fn mlp<T: Scalar>(f: &mut Forward<'_, T>, prefix: &str, x: NodeId, layers: usize, plain_last: bool, dropout: f64) -> Result<NodeId> {
    let mut h = x;
    for i in 0..layers {
        h = f.linear(h, &format!("{prefix}.fc{i}"))?;
        if plain_last && i + 1 == layers {
            break;
        }
        h = f.batch_norm(h, &format!("{prefix}.bn{i}"))?;
        h = f.relu(h)?;
        h = f.dropout(h, dropout)?;
    }
    Ok(h)
}

pub fn build_projector<T: Scalar>(config: &ProjectorConfig, input_dim: usize, rng: &mut SeededRng) -> Result<ParamStore<T>> {
    config.validate()?;
    let mut store = ParamStore::new();
    init_mlp(&mut store, "projector", input_dim, &config.hidden, rng);
    for (i, &w) in config.hidden[..config.hidden.len() - 1].iter().enumerate() {
        store.init_batch_norm(&format!("projector.bn{i}"), w);
    }
    Ok(store)
}

/// Per-member MLP `l` on `[G * Q, D]` rows, without pooling.
pub fn project_members<T: Scalar>(f: &mut Forward<'_, T>, config: &ProjectorConfig, h: NodeId) -> Result<NodeId> {
    mlp(f, "projector", h, config.hidden.len(), true, config.dropout)
}

/// `[G * Q, D]` member representations, `Q` consecutive rows per group, to
/// `[G, H]` group representations.
pub fn project_groups<T: Scalar>(f: &mut Forward<'_, T>, config: &ProjectorConfig, h: NodeId, q: usize) -> Result<NodeId> {
    let rows = f.value(h).shape()[0];
    if q == 0 || rows == 0 {
        return Err(Error::contract("cannot project an empty group"));
    }
    let members = project_members(f, config, h)?;
    f.apply(Op::SetPool { kind: config.pool, group_size: q }, &[members])
}

pub fn build_classifier<T: Scalar>(config: &ClassifierConfig, input_dim: usize, rng: &mut SeededRng) -> Result<ParamStore<T>> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut widths = config.hidden.clone();
    widths.push(config.n_classes);
    init_mlp(&mut store, "classifier", input_dim, &widths, rng);
    for (i, &w) in config.hidden.iter().enumerate() {
        store.init_batch_norm(&format!("classifier.bn{i}"), w);
    }
    Ok(store)
}

/// `[N, D]` representations to `[N, n_classes]` logits.
pub fn classify<T: Scalar>(f: &mut Forward<'_, T>, config: &ClassifierConfig, h: NodeId) -> Result<NodeId> {
    mlp(f, "classifier", h, config.hidden.len() + 1, true, config.dropout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn small() -> ProjectorConfig {
        ProjectorConfig {
            hidden: vec![6, 5, 4],
            pool: PoolKind::Max,
            dropout: 0.5,
        }
    }

    fn members_and_group(config: &ProjectorConfig, x: Tensor<f32>, q: usize) -> (Tensor<f32>, Tensor<f32>) {
        let store = build_projector::<f32>(config, x.shape()[1], &mut SeededRng::new(5)).unwrap();
        let mut f = Forward::new(&store, false, 0);
        let xi = f.input(x);
        let members = project_members(&mut f, config, xi).unwrap();
        let z = f.apply(Op::SetPool { kind: config.pool, group_size: q }, &[members]).unwrap();
        (f.value(members).clone(), f.value(z).clone())
    }

    #[test]
    fn max_pool_is_member_maximum() {
        let mut rng = SeededRng::new(0);
        let x = Tensor::from_fn(&[3, 7], |_| rng.normal() as f32);
        let (m, z) = members_and_group(&small(), x, 3);
        for d in 0..4 {
            let want = (0..3).map(|r| m.row(r)[d]).fold(f32::NEG_INFINITY, f32::max);
            assert_eq!(z.data()[d], want);
        }
    }

    #[test]
    fn singleton_group_is_member_output() {
        let mut rng = SeededRng::new(1);
        let x = Tensor::from_fn(&[1, 7], |_| rng.normal() as f32);
        for pool in [PoolKind::Max, PoolKind::Avg, PoolKind::Min] {
            let config = ProjectorConfig { pool, ..small() };
            let (m, z) = members_and_group(&config, x.clone(), 1);
            assert_eq!(m.data(), z.data());
        }
    }

    #[test]
    fn logits_width_and_softmax_rows() {
        let config = ClassifierConfig {
            hidden: vec![8, 6, 4],
            ..ClassifierConfig::new(3)
        };
        let store = build_classifier::<f32>(&config, 5, &mut SeededRng::new(2)).unwrap();
        let mut rng = SeededRng::new(3);
        let mut f = Forward::new(&store, false, 0);
        let x = f.input(Tensor::from_fn(&[4, 5], |_| rng.normal() as f32));
        let logits = classify(&mut f, &config, x).unwrap();
        assert_eq!(f.value(logits).shape(), &[4, 3]);
        let p = f.apply(Op::Softmax, &[logits]).unwrap();
        for r in 0..4 {
            let s: f32 = f.value(p).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn classifier_dimension_mismatch_errors() {
        let config = ClassifierConfig::new(2);
        let store = build_classifier::<f32>(&config, 5, &mut SeededRng::new(2)).unwrap();
        let mut f = Forward::new(&store, false, 0);
        let x = f.input(Tensor::zeros(&[2, 6]));
        assert!(classify(&mut f, &config, x).is_err());
    }

    #[test]
    fn one_class_rejected() {
        assert!(ClassifierConfig::new(1).validate().is_err());
    }
}
