use std::collections::BTreeSet;

use proptest::prelude::*;

use sgmc::corpus::{decode_corpus, encode_corpus, split_by_clip, Corpus, EegSample, SubjectTag};
use sgmc::grouping::{crossover, meiosis_traced, AugmentKind};
use sgmc::network::{BlockSpec, Checkpoint, EncoderConfig, Model, ModelConfig, ProjectorConfig};
use sgmc::numerics::{AdamConfig, AdamState, CustomOp, PoolKind, Tensor};
use sgmc::objective::{group_ntxent_loss, LossConfig, NtXent};
use sgmc::rng::SeededRng;

fn window(c: usize, m: usize, values: Vec<f32>, subject: u32) -> EegSample {
    EegSample::new(c, m, values, 0, SubjectTag::Single(subject)).unwrap()
}

/// `2Q` windows of shape `[C, M]` from distinct subjects.
fn group_strategy() -> impl Strategy<Value = Vec<EegSample>> {
    (1usize..5, 1usize..4, 4usize..20).prop_flat_map(|(q, c, m)| {
        prop::collection::vec(prop::collection::vec(-10f32..10.0, c * m), 2 * q).prop_map(move |vals| {
            vals.into_iter()
                .enumerate()
                .map(|(s, v)| window(c, m, v, s as u32))
                .collect()
        })
    })
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-3f64..3.0, rows * cols)
        .prop_filter("rows need a usable norm", move |d| {
            d.chunks(cols).all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-2)
        })
        .prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn sides() -> impl Strategy<Value = (Tensor<f64>, Tensor<f64>)> {
    (2usize..6, 1usize..6).prop_flat_map(|(p, h)| (matrix(p, h), matrix(p, h)))
}

fn small_model(pool: PoolKind) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            stem_kernel: 3,
            stem_width: 4,
            stem_stride: 1,
            stem_pool: false,
            blocks: vec![BlockSpec::new(3, 4, 1)],
            output_dim: 6,
        },
        projector: ProjectorConfig {
            hidden: vec![8, 5],
            pool,
            dropout: 0.0,
        },
        classifier: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn meiosis_conserves_every_time_point(group in group_strategy(), seed in any::<u64>(), frac in 0.0f64..1.0) {
        let m = group[0].n_times;
        let c = 2 + ((m - 4) as f64 * frac).round() as usize;
        let out = meiosis_traced(&group, c, AugmentKind::Crossover, &mut SeededRng::new(seed)).unwrap();
        let q = group.len() / 2;
        prop_assert_eq!(out.group_a.len(), q);
        prop_assert_eq!(out.group_b.len(), q);

        let used: BTreeSet<usize> = out.pairs.iter().flat_map(|&(i, j)| [i, j]).collect();
        prop_assert_eq!(used.len(), group.len());

        // Each pair keeps, position by position, exactly the two input values.
        for (k, &(i, j)) in out.pairs.iter().enumerate() {
            for idx in 0..group[0].values.len() {
                let mut got = [out.group_a[k].values[idx], out.group_b[k].values[idx]];
                let mut want = [group[i].values[idx], group[j].values[idx]];
                got.sort_by(f32::total_cmp);
                want.sort_by(f32::total_cmp);
                prop_assert_eq!(got, want);
            }
        }
        let tags: BTreeSet<_> = out.group_a.iter().chain(&out.group_b).map(|s| s.subject).collect();
        prop_assert_eq!(tags.len(), group.len());
    }

    #[test]
    fn meiosis_is_seed_deterministic(group in group_strategy(), seed in any::<u64>()) {
        let kind = AugmentKind::Mixup;
        let a = meiosis_traced(&group, 2, kind, &mut SeededRng::new(seed)).unwrap();
        let b = meiosis_traced(&group, 2, kind, &mut SeededRng::new(seed)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn crossover_twice_restores_inputs(group in group_strategy(), frac in 0.0f64..1.0) {
        let (a, b) = (&group[0], &group[1]);
        let c = 2 + ((a.n_times - 4) as f64 * frac).round() as usize;
        let (x, y) = crossover(a, b, c).unwrap();
        let (a2, b2) = crossover(&x, &y, c).unwrap();
        prop_assert_eq!(&a2.values, &a.values);
        prop_assert_eq!(&b2.values, &b.values);
        prop_assert_eq!(a2.subject, a.subject);
        prop_assert_eq!(b2.subject, b.subject);
    }

    #[test]
    fn projector_ignores_member_order(
        q in 1usize..6,
        seed in any::<u64>(),
        avg in any::<bool>(),
        vals in prop::collection::vec(-2f64..2.0, 5 * 6),
        perm_seed in any::<u64>(),
    ) {
        let pool = if avg { PoolKind::Avg } else { PoolKind::Max };
        let model: Model<f64> = Model::new(small_model(pool), seed).unwrap();
        let reps = Tensor::new(vec![q, 6], vals[..q * 6].to_vec()).unwrap();
        let mut order: Vec<usize> = (0..q).collect();
        SeededRng::new(perm_seed).shuffle(&mut order);
        let permuted: Vec<f64> = order.iter().flat_map(|&r| reps.row(r).to_vec()).collect();
        let z = model.project_group(&reps).unwrap();
        let zp = model.project_group(&Tensor::new(vec![q, 6], permuted).unwrap()).unwrap();
        for (x, y) in z.data().iter().zip(zp.data()) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()), "{} vs {}", x, y);
        }
    }

    #[test]
    fn loss_is_symmetric_in_sides((za, zb) in sides(), tau in 0.05f64..2.0) {
        let cfg = LossConfig { temperature: tau };
        let l1 = group_ntxent_loss(&za, &zb, &cfg).unwrap();
        let l2 = group_ntxent_loss(&zb, &za, &cfg).unwrap();
        prop_assert!((l1 - l2).abs() <= 1e-10 * (1.0 + l1.abs()));
    }

    #[test]
    fn loss_ignores_row_scale((za, zb) in sides(), scales in prop::collection::vec(0.1f64..10.0, 12)) {
        let cfg = LossConfig { temperature: 0.3 };
        let h = za.shape()[1];
        let scaled = |z: &Tensor<f64>, off: usize| {
            let d = z.data().iter().enumerate().map(|(i, x)| x * scales[(off + i / h) % 12]).collect();
            Tensor::new(z.shape().to_vec(), d).unwrap()
        };
        let l1 = group_ntxent_loss(&za, &zb, &cfg).unwrap();
        let l2 = group_ntxent_loss(&scaled(&za, 0), &scaled(&zb, 6), &cfg).unwrap();
        prop_assert!((l1 - l2).abs() <= 1e-9 * (1.0 + l1.abs()));
    }

    #[test]
    fn loss_is_bounded_below((za, zb) in sides(), tau in 0.05f64..2.0) {
        // Each term is a negative log-probability.
        let l = group_ntxent_loss(&za, &zb, &LossConfig { temperature: tau }).unwrap();
        prop_assert!(l.is_finite() && l > 0.0);
    }

    #[test]
    fn adam_descends_the_loss(z in (2usize..6, 2usize..6).prop_flat_map(|(p, h)| matrix(2 * p, h))) {
        let op = NtXent { temperature: 0.5 };
        let mut param = z;
        let mut adam: AdamState<f64> = AdamState::new(AdamConfig::with_lr(1e-2)).unwrap();
        let start = CustomOp::<f64>::forward(&op, &[&param]).unwrap().item();
        for _ in 0..20 {
            let out = CustomOp::<f64>::forward(&op, &[&param]).unwrap();
            let grad = op.backward(&[&param], &out, &Tensor::scalar(1.0)).unwrap().remove(0);
            adam.step([("z", &mut param, &grad)]).unwrap();
        }
        let end = CustomOp::<f64>::forward(&op, &[&param]).unwrap().item();
        prop_assert!(end < start, "{} -> {}", start, end);
    }

    #[test]
    fn corpus_round_trips(
        (n, s, c, m) in (3usize..7, 1usize..4, 1usize..3, 4usize..9),
        seed in any::<u64>(),
    ) {
        let mut rng = SeededRng::new(seed);
        let data: Vec<f32> = (0..n * s * c * m).map(|_| rng.normal() as f32).collect();
        let mut corpus = Corpus::new(n, s, c, m, data).unwrap();
        corpus.set_labels((0..n as u32).map(|i| i % 2).collect()).unwrap();
        let corpus = split_by_clip(&corpus, [0.5, 0.25, 0.25], seed).unwrap();
        let (bytes, meta) = encode_corpus(&corpus);
        let back = decode_corpus(&bytes, Some(&meta)).unwrap();
        prop_assert_eq!(&back, &corpus);
        prop_assert_eq!(encode_corpus(&back), (bytes, meta));
    }

    #[test]
    fn checkpoint_round_trips(seed in any::<u64>(), state in "[a-z=0-9\n]{0,40}") {
        let model: Model<f32> = Model::new(small_model(PoolKind::Max), seed).unwrap();
        let ckpt = model.to_checkpoint(state, None);
        let bytes = ckpt.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(back.encode(), bytes);
        let (restored, _) = Model::<f32>::from_checkpoint(&back).unwrap();
        prop_assert_eq!(restored, model);
    }
}
