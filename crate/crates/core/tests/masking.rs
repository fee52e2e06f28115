use std::collections::BTreeSet;

use biofuse::masking::*;
use biofuse::model::*;
use biofuse::signal::Modality;
use biofuse::stats::Significance;
use biofuse::Error;
use biofuse_tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const A: Tag = Tag::Stream(0);
const B: Tag = Tag::Stream(1);

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent edge counts: brute force over ordered pairs.
fn count_by_hand(tags: &[Tag]) -> (usize, usize, usize) {
    let (mut uni, mut cross, mut cls) = (0, 0, 0);
    for a in tags {
        for b in tags {
            if *a == Tag::Cls || *b == Tag::Cls {
                cls += 1;
            } else if a == b {
                uni += 1;
            } else {
                cross += 1;
            }
        }
    }
    (uni, cross, cls)
}

#[test]
fn edge_partition_counts() {
    let tags = [Tag::Cls, A, A, B, B];
    let p = classify_edges(&tags).unwrap();
    assert_eq!(p.count(EdgeClass::Unimodal), 8);
    assert_eq!(p.count(EdgeClass::CrossModal), 8);
    assert_eq!(p.count(EdgeClass::Cls), 9);
    assert_eq!(count_by_hand(&tags), (8, 8, 9));

    let p = classify_edges(&[Tag::Cls, A, B]).unwrap();
    assert_eq!(p.edges(EdgeClass::Unimodal), vec![(1, 1), (2, 2)]);
    assert_eq!(p.edges(EdgeClass::CrossModal), vec![(1, 2), (2, 1)]);

    let mut r = rng(1);
    for _ in 0..50 {
        let n = r.random_range(1..12);
        let mut tags = vec![Tag::Cls];
        tags.extend((0..n).map(|_| Tag::Stream(r.random_range(0..3))));
        let p = classify_edges(&tags).unwrap();
        let (u, c, k) = count_by_hand(&tags);
        assert_eq!((p.count(EdgeClass::Unimodal), p.count(EdgeClass::CrossModal), p.count(EdgeClass::Cls)), (u, c, k));
        assert_eq!(u + c + k, tags.len() * tags.len());
    }

    let p = classify_edges(&[Tag::Cls, A, A, A]).unwrap();
    assert_eq!(p.count(EdgeClass::CrossModal), 0);
}

#[test]
fn partition_needs_one_leading_cls() {
    assert!(matches!(classify_edges(&[A, B]), Err(Error::Usage(_))));
    assert!(matches!(classify_edges(&[Tag::Cls, A, Tag::Cls]), Err(Error::Usage(_))));
    assert!(matches!(classify_edges(&[A, Tag::Cls]), Err(Error::Usage(_))));
}

fn spec(mode: MaskMode, t: MaskType, layer: usize) -> EdgeMaskSpec {
    EdgeMaskSpec::new(mode, t, layer, 5).unwrap()
}

#[test]
fn layer_selection_boundaries() {
    let set = |m, l| layers_for(&spec(m, MaskType::Unimodal, l));
    assert_eq!(set(MaskMode::Individual, 3), BTreeSet::from([3]));
    assert_eq!(set(MaskMode::Rfb, 1), set(MaskMode::Individual, 1));
    assert_eq!(set(MaskMode::Rfe, 5), set(MaskMode::Individual, 5));
    assert_eq!(set(MaskMode::Rfb, 5), set(MaskMode::Rfe, 1));
    assert_eq!(set(MaskMode::Rfb, 5), (1..=5).collect());
    for l in 1..5 {
        assert!(set(MaskMode::Rfb, l).is_subset(&set(MaskMode::Rfb, l + 1)));
        assert!(set(MaskMode::Rfe, l + 1).is_subset(&set(MaskMode::Rfe, l)));
    }
    assert!(EdgeMaskSpec::new(MaskMode::Rfb, MaskType::Unimodal, 0, 5).is_err());
    assert!(EdgeMaskSpec::new(MaskMode::Rfb, MaskType::Unimodal, 6, 5).is_err());
}

#[test]
fn materialized_masks() {
    let p = classify_edges(&[Tag::Cls, A, A, B, B]).unwrap();
    let masks = materialize_mask(&spec(MaskMode::Individual, MaskType::Unimodal, 2), &p, 2, 5, 5).unwrap();
    assert_eq!(masks.len(), 5);
    for (l, m) in masks.iter().enumerate() {
        assert_eq!(m.shape(), [2, 5, 5]);
        if l + 1 == 2 {
            assert_eq!(m.count(), 2 * 8);
            for (i, j) in p.edges(EdgeClass::Unimodal) {
                assert!(m.bits()[i * 5 + j] && m.bits()[25 + i * 5 + j]);
            }
        } else {
            assert!(!m.any());
        }
    }
    // masks never touch the CLS row or column
    let masks = materialize_mask(&spec(MaskMode::Rfb, MaskType::CrossModal, 5), &p, 1, 5, 5).unwrap();
    for m in &masks {
        assert_eq!(m.count(), 8);
        assert!((0..5).all(|k| !m.bits()[k] && !m.bits()[k * 5]));
    }

    let single = classify_edges(&[Tag::Cls, A, A, A]).unwrap();
    let masks = materialize_mask(&spec(MaskMode::Rfb, MaskType::CrossModal, 5), &single, 2, 4, 5).unwrap();
    assert!(masks.iter().all(|m| !m.any()));

    let a = materialize_mask(&spec(MaskMode::Rfb, MaskType::Unimodal, 1), &p, 2, 5, 5).unwrap();
    let b = materialize_mask(&spec(MaskMode::Individual, MaskType::Unimodal, 1), &p, 2, 5, 5).unwrap();
    assert_eq!(a, b);
    assert!(materialize_mask(&spec(MaskMode::Rfb, MaskType::Unimodal, 1), &p, 2, 6, 5).is_err());
}

#[test]
fn relative_change() {
    assert!((delta_percent(0.636, 0.914).unwrap() - -30.4).abs() < 0.05);
    assert!((delta_percent(0.289, 0.914).unwrap() - -68.4).abs() < 0.05);
    assert_eq!(delta_percent(0.7, 0.7).unwrap(), 0.0);
    assert!(delta_percent(0.5, 0.0).is_err());
}

fn two_stream_model(layers: usize, seed: u64) -> (Model, Batch) {
    let inputs = InputSpec {
        streams: vec![
            StreamShape {
                name: "emg".into(),
                modality: Modality::Emg,
                channels: 3,
                samples: 6,
            },
            StreamShape {
                name: "acc".into(),
                modality: Modality::Acc,
                channels: 2,
                samples: 6,
            },
        ],
        classes: 3,
    };
    let cfg = ModelConfig {
        family: Family::IsoNet,
        embed_dim: 8,
        heads: 2,
        layers,
        ffn_dim: 8,
        dropout: 0.0,
        anneal_horizon: 1,
        epochs: 1,
        ..ModelConfig::default()
    };
    let model = Model::new(cfg, inputs.clone(), &mut rng(seed)).unwrap();
    let mut r = rng(seed + 100);
    let n = 36;
    let streams = inputs
        .streams
        .iter()
        .map(|s| Tensor::from_fn([n, s.channels, s.samples], |_| r.random_range(-1.0..1.0)))
        .collect();
    let batch = Batch {
        streams,
        labels: (0..n).map(|i| i % 3).collect(),
        subjects: (0..n).map(|i| (i % 6) as u32).collect(),
    };
    (model, batch)
}

fn traced_weights(model: &Model, batch: &Batch, hook: &dyn AttentionHook) -> Vec<(usize, Vec<Tag>, Tensor)> {
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g);
    let xs: Vec<Var> = batch.streams.iter().map(|t| g.constant(t.clone())).collect();
    let mut r = rng(0);
    let mut pass = Pass::eval(&mut r).with_hook(Some(hook)).with_trace();
    let f = model.forward(&mut g, &bound, &xs, &mut pass).unwrap();
    f.traces.iter().map(|t| (t.layer, t.tags.clone(), g.value(t.weights).clone())).collect()
}

#[test]
fn masked_edges_carry_exactly_zero_weight() {
    let (model, batch) = two_stream_model(3, 1);
    let before = model.params.checksum();
    for m in MaskMode::ALL {
        for t in MaskType::ALL {
            for l in 1..=3 {
                let s = EdgeMaskSpec::new(m, t, l, 3).unwrap();
                let selected = layers_for(&s);
                let class = match t {
                    MaskType::Unimodal => EdgeClass::Unimodal,
                    MaskType::CrossModal => EdgeClass::CrossModal,
                };
                for (layer, tags, w) in traced_weights(&model, &batch, &SpecHook(s)) {
                    let p = classify_edges(&tags).unwrap();
                    let tt = tags.len();
                    for row in w.data().chunks(tt * tt) {
                        for (i, j) in p.edges(class) {
                            let v = row[i * tt + j];
                            if selected.contains(&layer) {
                                assert_eq!(v, 0.0);
                            } else {
                                assert!(v > 0.0);
                            }
                        }
                    }
                }
            }
        }
    }
    assert_eq!(model.params.checksum(), before);
}

#[test]
fn masking_every_edge_class_silences_attention() {
    let (model, batch) = two_stream_model(2, 2);
    let hook = EdgeSetHook {
        layers: (1..=2).collect(),
        classes: vec![EdgeClass::Unimodal, EdgeClass::CrossModal, EdgeClass::Cls],
    };
    for (_, _, w) in traced_weights(&model, &batch, &hook) {
        assert!(w.data().iter().all(|v| *v == 0.0));
    }
    // every sample then sees the same attention output, so predictions only
    // depend on the residual path
    assert!(predict(&model, &batch, Some(&hook)).is_ok());
}

#[test]
fn ablation_suite_grid() {
    let (model, batch) = two_stream_model(5, 3);
    let before = model.params.checksum();
    let report = run_ablation_suite(&model, &batch, &MaskMode::ALL, &MaskType::ALL, None, 1).unwrap();
    assert_eq!(report.cells.len(), 30);
    assert_eq!(report.bonferroni_factor, 30);
    assert_eq!(report.weights_checksum, before);
    assert_eq!(model.params.checksum(), before);
    assert_eq!(report.baseline.per_subject.len(), 6);
    check_boundaries(&report).unwrap();
    for c in &report.cells {
        let p = c.p_raw.unwrap();
        assert!((c.p_corr.unwrap() - (30.0 * p).min(1.0)).abs() < 1e-15);
        let expect = 100.0 * (c.mean - report.baseline.mean) / report.baseline.mean;
        assert!((c.delta_pct.unwrap() - expect).abs() < 1e-9);
    }
    let jsonl = report.to_jsonl();
    assert_eq!(jsonl.lines().count(), 31);
    let first: AblationCell = serde_json::from_str(jsonl.lines().nth(1).unwrap()).unwrap();
    assert_eq!(first, report.cells[0]);
    let table = report.render_table();
    assert!(table.contains("Baseline") && table.contains("RFE") && table.contains("L5"));

    let threaded = run_ablation_suite(&model, &batch, &MaskMode::ALL, &MaskType::ALL, Some(10), 3).unwrap();
    assert_eq!(threaded.bonferroni_factor, 10);
    for (a, b) in report.cells.iter().zip(&threaded.cells) {
        assert_eq!(a.per_subject, b.per_subject);
        assert!((b.p_corr.unwrap() - (10.0 * b.p_raw.unwrap()).min(1.0)).abs() < 1e-15);
    }
}

#[test]
fn cross_masking_a_single_modality_model_is_a_no_op() {
    let (model, batch) = two_stream_model(2, 4);
    let mut inputs = model.inputs.clone();
    inputs.streams.truncate(1);
    let single = Model::new(model.config.clone(), inputs, &mut rng(4)).unwrap();
    let batch = batch.only_stream(0).unwrap();
    let report = run_ablation_suite(&single, &batch, &MaskMode::ALL, &[MaskType::CrossModal], None, 1).unwrap();
    for c in &report.cells {
        assert_eq!(c.per_subject, report.baseline.per_subject);
        assert_eq!(c.delta_pct, Some(0.0));
        assert_eq!(c.symbol, Some(Significance::Ns));
    }
}

#[test]
fn suite_rejects_models_without_attention() {
    let (model, batch) = two_stream_model(2, 5);
    let mut cfg = model.config.clone();
    cfg.family = Family::Mmmlp;
    let mlp = Model::new(cfg, model.inputs.clone(), &mut rng(5)).unwrap();
    assert!(run_ablation_suite(&mlp, &batch, &MaskMode::ALL, &MaskType::ALL, None, 1).is_err());
}
