//! Base encoder, group projector, classifier, and the model bundle that ties
//! their parameters to a configuration and to checkpoints.

mod checkpoint;
mod encoder;
mod heads;
mod layers;
mod store;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use checkpoint::{config_digest, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use encoder::{build_encoder, encode, BlockSpec, EncoderConfig};
pub use heads::{
    build_classifier, build_projector, classify, project_groups, project_members, ClassifierConfig, ProjectorConfig,
};
pub use layers::{BnBatchStats, Forward, Trace, BN_EPS, BN_MOMENTUM};
pub use store::ParamStore;

use crate::corpus::EegSample;
use crate::error::{Error, Result};
use crate::numerics::{Moments, Op, Scalar, Tensor};
use crate::rng::SeededRng;

/// Rows per forward pass when encoding large sample sets in eval mode.
const EVAL_CHUNK: usize = 256;

/// Stacks windows into an `[N, 1, C, M]` encoder input.
pub fn samples_to_tensor<'a, T: Scalar>(samples: impl IntoIterator<Item = &'a EegSample>) -> Result<Tensor<T>> {
    let mut iter = samples.into_iter().peekable();
    let Some(first) = iter.peek().copied() else {
        return Err(Error::contract("cannot encode an empty sample set"));
    };
    let (c, m) = (first.n_channels, first.n_times);
    let mut data = Vec::new();
    let mut n = 0;
    for s in iter {
        if !s.same_shape(first) {
            return Err(Error::contract(format!(
                "sample {n} is {}x{}, expected {c}x{m}",
                s.n_channels, s.n_times
            )));
        }
        data.extend(s.values.iter().map(|&v| T::of(f64::from(v))));
        n += 1;
    }
    Tensor::new(vec![n, 1, c, m], data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub projector: ProjectorConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classifier: Option<ClassifierConfig>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.projector.validate()?;
        if let Some(c) = &self.classifier {
            c.validate()?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::config(format!("model config: {e}")))?;
        c.validate()?;
        Ok(c)
    }
}

/// Parameters plus the configuration that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar = f32> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    /// Fresh parameters from the `init.*` substreams of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let root = SeededRng::new(seed);
        let mut store = build_encoder(&config.encoder, &mut root.substream("init.encoder"))?;
        let d = config.encoder.output_dim;
        store.absorb(build_projector(&config.projector, d, &mut root.substream("init.projector"))?);
        if let Some(c) = &config.classifier {
            store.absorb(build_classifier(c, d, &mut root.substream("init.classifier"))?);
        }
        Ok(Self { config, store })
    }

    /// Replaces any classifier with freshly initialized layers.
    pub fn attach_classifier(&mut self, config: ClassifierConfig, seed: u64) -> Result<()> {
        let mut rng = SeededRng::new(seed).substream("init.classifier");
        let fresh = build_classifier(&config, self.config.encoder.output_dim, &mut rng)?;
        let mut kept = self.store.clone();
        kept.retain_prefix("encoder.");
        let mut projector = self.store.clone();
        projector.retain_prefix("projector.");
        kept.absorb(projector);
        kept.absorb(fresh);
        self.store = kept;
        self.config.classifier = Some(config);
        Ok(())
    }

    pub fn representation_dim(&self) -> usize {
        self.config.encoder.output_dim
    }

    /// Eval-mode representations `[N, D]`.
    pub fn encode_samples(&self, samples: &[EegSample]) -> Result<Tensor<T>> {
        let d = self.representation_dim();
        let mut out = Vec::with_capacity(samples.len() * d);
        for chunk in samples.chunks(EVAL_CHUNK) {
            let mut f = Forward::new(&self.store, false, 0);
            let x = f.input(samples_to_tensor(chunk)?);
            let h = encode(&mut f, &self.config.encoder, x)?;
            out.extend_from_slice(f.value(h).data());
        }
        Tensor::new(vec![samples.len(), d], out)
    }

    /// Eval-mode group representation of `[Q, D]` member representations.
    pub fn project_group(&self, reps: &Tensor<T>) -> Result<Tensor<T>> {
        if reps.rank() != 2 || reps.shape()[0] == 0 {
            return Err(Error::contract(format!("expected [Q, D] with Q >= 1, got {:?}", reps.shape())));
        }
        if reps.shape()[1] != self.representation_dim() {
            return Err(Error::contract(format!(
                "representation width {} does not match D = {}",
                reps.shape()[1],
                self.representation_dim()
            )));
        }
        let q = reps.shape()[0];
        let mut f = Forward::new(&self.store, false, 0);
        let x = f.input(reps.clone());
        let z = project_groups(&mut f, &self.config.projector, x, q)?;
        f.value(z).reshaped(vec![self.config.projector.output_dim()])
    }

    /// Eval-mode logits `[N, n_classes]`.
    pub fn logits(&self, samples: &[EegSample]) -> Result<Tensor<T>> {
        let Some(cc) = &self.config.classifier else {
            return Err(Error::contract("model has no classifier"));
        };
        let k = cc.n_classes;
        let mut out = Vec::with_capacity(samples.len() * k);
        for chunk in samples.chunks(EVAL_CHUNK) {
            let mut f = Forward::new(&self.store, false, 0);
            let x = f.input(samples_to_tensor(chunk)?);
            let h = encode(&mut f, &self.config.encoder, x)?;
            let y = classify(&mut f, cc, h)?;
            out.extend_from_slice(f.value(y).data());
        }
        Tensor::new(vec![samples.len(), k], out)
    }

    /// Arg-max class per sample (lowest index on ties).
    pub fn predict(&self, samples: &[EegSample]) -> Result<Vec<usize>> {
        let logits = self.logits(samples)?;
        let k = logits.shape()[1];
        Ok((0..samples.len())
            .map(|r| {
                let row = logits.row(r);
                (1..k).fold(0, |best, c| if row[c] > row[best] { c } else { best })
            })
            .collect())
    }

    /// Row-wise class probabilities.
    pub fn probabilities(&self, samples: &[EegSample]) -> Result<Tensor<T>> {
        let logits = self.logits(samples)?;
        crate::numerics::primitive_forward(&Op::Softmax, &[&logits])
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
        }
    }
}

impl Model<f32> {
    /// Checkpoint with parameters, buffers, and optional optimizer moments.
    pub fn to_checkpoint(&self, state_text: String, moments: Option<&BTreeMap<String, Moments<f32>>>) -> Checkpoint {
        let mut tensors = BTreeMap::new();
        for (k, v) in self.store.params() {
            tensors.insert(format!("param/{k}"), v.clone());
        }
        for (k, v) in self.store.buffers() {
            tensors.insert(format!("buffer/{k}"), v.clone());
        }
        for (k, mo) in moments.into_iter().flatten() {
            tensors.insert(format!("adam.m/{k}"), mo.m.clone());
            tensors.insert(format!("adam.v/{k}"), mo.v.clone());
        }
        Checkpoint {
            config_text: self.config.to_text(),
            state_text,
            tensors,
        }
    }

    /// Rebuilds a model from a checkpoint, checking every tensor against the
    /// shapes its configuration implies. Returns any optimizer moments.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, BTreeMap<String, Moments<f32>>)> {
        let config = ModelConfig::from_text(&ckpt.config_text)?;
        let mut model = Self::new(config, 0)?;
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        let mut seen = 0;
        for (key, t) in &ckpt.tensors {
            let (kind, name) = key
                .split_once('/')
                .ok_or_else(|| Error::format(0, format!("checkpoint tensor {key:?} has no kind prefix")))?;
            let slot = match kind {
                "param" => {
                    seen += 1;
                    model.store.param_mut(name)?
                }
                "buffer" => model.store.buffer_mut(name)?,
                "adam.m" => {
                    m.insert(name.to_string(), t.clone());
                    continue;
                }
                "adam.v" => {
                    v.insert(name.to_string(), t.clone());
                    continue;
                }
                other => return Err(Error::format(0, format!("unknown checkpoint tensor kind {other:?}"))),
            };
            if slot.shape() != t.shape() {
                return Err(Error::format(
                    0,
                    format!("{key}: shape {:?} does not match configured {:?}", t.shape(), slot.shape()),
                ));
            }
            *slot = t.clone();
        }
        if seen != model.store.params().len() {
            return Err(Error::format(0, "checkpoint lacks some configured parameters"));
        }
        let mut moments = BTreeMap::new();
        for (name, mt) in m {
            let vt = v
                .remove(&name)
                .ok_or_else(|| Error::format(0, format!("adam moments for {name:?} are incomplete")))?;
            moments.insert(name, Moments { m: mt, v: vt });
        }
        Ok((model, moments))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SubjectTag;
    use crate::numerics::PoolKind;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig::tiny(),
            projector: ProjectorConfig {
                hidden: vec![16, 16, 8],
                pool: PoolKind::Max,
                dropout: 0.5,
            },
            classifier: Some(ClassifierConfig {
                hidden: vec![8, 8, 4],
                ..ClassifierConfig::new(2)
            }),
        }
    }

    fn samples(n: usize, seed: u64) -> Vec<EegSample> {
        let mut rng = SeededRng::new(seed);
        (0..n)
            .map(|i| {
                let values = (0..4 * 16).map(|_| rng.normal() as f32).collect();
                EegSample::new(4, 16, values, i as u32, SubjectTag::Single(0)).unwrap()
            })
            .collect()
    }

    #[test]
    fn config_text_round_trip() {
        let c = tiny_config();
        assert_eq!(ModelConfig::from_text(&c.to_text()).unwrap(), c);
        let p = ModelConfig {
            encoder: EncoderConfig::full(),
            projector: ProjectorConfig::default(),
            classifier: None,
        };
        assert_eq!(ModelConfig::from_text(&p.to_text()).unwrap(), p);
    }

    #[test]
    fn checkpoint_round_trip_restores_model() {
        let model = Model::<f32>::new(tiny_config(), 3).unwrap();
        let ckpt = model.to_checkpoint("epoch=1\n".into(), None);
        let (back, moments) = Model::from_checkpoint(&Checkpoint::decode(&ckpt.encode()).unwrap()).unwrap();
        assert_eq!(back, model);
        assert!(moments.is_empty());
        let xs = samples(3, 0);
        assert_eq!(back.encode_samples(&xs).unwrap(), model.encode_samples(&xs).unwrap());
    }

    #[test]
    fn group_of_q_members_gives_one_vector() {
        let model = Model::<f32>::new(tiny_config(), 0).unwrap();
        let reps = model.encode_samples(&samples(3, 1)).unwrap();
        assert_eq!(reps.shape(), &[3, model.representation_dim()]);
        assert_eq!(model.project_group(&reps).unwrap().shape(), &[8]);
    }

    #[test]
    fn predictions_are_valid_classes() {
        let model = Model::<f32>::new(tiny_config(), 0).unwrap();
        let xs = samples(5, 2);
        assert!(model.predict(&xs).unwrap().iter().all(|&c| c < 2));
        let p = model.probabilities(&xs).unwrap();
        for r in 0..5 {
            assert!((p.row(r).iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn attaching_classifier_keeps_encoder() {
        let mut model = Model::<f32>::new(tiny_config(), 0).unwrap();
        let before = model.encode_samples(&samples(2, 4)).unwrap();
        model.attach_classifier(ClassifierConfig::new(3), 9).unwrap();
        assert_eq!(model.encode_samples(&samples(2, 4)).unwrap(), before);
        assert_eq!(model.logits(&samples(2, 4)).unwrap().shape(), &[2, 3]);
    }

    #[test]
    fn mismatched_window_shapes_rejected() {
        let mut xs = samples(2, 0);
        xs.push(EegSample::new(2, 8, vec![0.0; 16], 0, SubjectTag::Single(0)).unwrap());
        assert!(samples_to_tensor::<f32>(&xs).is_err());
    }
}
