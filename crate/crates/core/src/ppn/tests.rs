use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dataset::{SceneObject, TargetSpec};
use crate::geometry::Point2;
use crate::localiser::LocaliserConfig;
use crate::tensor::gradcheck;

const KB: &str = "AtLocation\tbed\tbedroom\t3.0
AtLocation\tlamp\tbedroom\t2.0
UsedFor\tbed\tsleeping\t2.5
UsedFor\tpillow\tsleeping\t2.2
AtLocation\tpillow\tbedroom\t2.8
AtLocation\tdesk\toffice\t2.1
AtLocation\tdesk\tstore\t0.5
";

fn scene(n: usize, seed: u64) -> SceneRecord {
    let cats = ["bed", "desk", "lamp", "chair", "sofa", "lamp", "rug", "bed"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SceneRecord {
        scene_id: format!("t{seed}_0"),
        completeness: 0.5,
        objects: (0..n)
            .map(|i| SceneObject {
                id: i as u32,
                category: cats[i % cats.len()].into(),
                position: Point2::new(rng.random_range(0.0..5.0), rng.random_range(0.0..5.0)),
            })
            .collect(),
        targets: vec![TargetSpec { category: "pillow".into(), gt_positions: vec![Point2::new(1.0, 2.0)] }],
    }
}

fn table(dim: usize) -> EmbeddingTable {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut t = EmbeddingTable::new(dim);
    for tok in ["bed", "desk", "lamp", "chair", "sofa", "rug", "pillow", "bedroom", "sleeping", "office"] {
        t.insert(tok, (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect());
    }
    t
}

fn small(mode: EmbeddingMode) -> PpnConfig {
    PpnConfig {
        input_dim: 8,
        widths: vec![8, 16],
        heads: 2,
        mlp_hidden: vec![12],
        embedding_mode: mode,
        seed: 5,
        ..PpnConfig::default()
    }
}

fn kb() -> KnowledgeSnapshot {
    KnowledgeSnapshot::parse(KB).unwrap()
}

fn vocab() -> Vec<String> {
    ["bed", "desk", "lamp", "pillow", "bedroom", "sleeping"].map(String::from).to_vec()
}

#[test]
fn dimensional_arithmetic() {
    let cfg = PpnConfig { input_dim: 16, widths: vec![32, 64], heads: 4, mlp_hidden: vec![20], ..PpnConfig::default() };
    let model = PpnModel::new(cfg, &[]).unwrap();
    assert_eq!(model.params().get("head.0.weight").unwrap().shape(), (160, 20));
    assert_eq!(model.params().get("round1.w_q").unwrap().shape(), (32, 64));
    assert_eq!(model.params().get("round0.w_e").unwrap().shape(), (4, 32));
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false).unwrap();
    let t = table(16);
    let g = model.case_graph(&scene(3, 1), "pillow", Some(&kb())).unwrap();
    let pass = model.forward(&mut tape, &vars, &g, Some(&t)).unwrap();
    assert_eq!(tape.value(pass.states).shape(), (g.len(), 80));
    assert_eq!(tape.value(pass.distances).shape(), (3, 1));
    assert_eq!(pass.anchors, vec![0, 1, 2]);

    let flat = PpnModel::new(PpnConfig { concat_final: false, ..model.config().clone() }, &[]).unwrap();
    let mut tape = Tape::new();
    let vars = flat.bind(&mut tape, false).unwrap();
    let pass = flat.forward(&mut tape, &vars, &g, Some(&t)).unwrap();
    assert_eq!(tape.value(pass.states).cols(), 64);
}

#[test]
fn pretrained_features_are_table_rows() {
    let cfg = PpnConfig { widths: vec![8], concat_final: true, ..small(EmbeddingMode::Pretrained) };
    let model = PpnModel::new(cfg, &[]).unwrap();
    let t = table(8);
    let g = model.case_graph(&scene(4, 2), "pillow", Some(&kb())).unwrap();
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false).unwrap();
    let pass = model.forward(&mut tape, &vars, &g, Some(&t)).unwrap();
    let states = tape.value(pass.states);
    for (i, n) in g.nodes().iter().enumerate() {
        assert_eq!(&states.row_slice(i)[..8], t.embed(n.token()));
    }
    assert!(matches!(model.predict(&g, None), Err(PpnError::MissingEmbeddings)));
    assert!(matches!(model.predict(&g, Some(&table(4))), Err(PpnError::EmbeddingDim { expected: 8, found: 4 })));
}

#[test]
fn learned_rows_are_shared_across_graphs() {
    let model = PpnModel::new(small(EmbeddingMode::Learned), &vocab()).unwrap();
    assert_eq!(model.vocab()[0], UNKNOWN_TOKEN);
    let emb = model.params().get("embedding").unwrap();
    assert!(emb.data().iter().all(|v| v.abs() <= 0.05));
    let rows = |g: &SpatialCommonsenseGraph| {
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, false).unwrap();
        let pass = model.forward(&mut tape, &vars, g, None).unwrap();
        let s = tape.value(pass.states).clone();
        (0..g.len()).map(|i| s.row_slice(i)[..8].to_vec()).collect::<Vec<_>>()
    };
    let g1 = model.case_graph(&scene(3, 3), "pillow", None).unwrap();
    let g2 = model.case_graph(&scene(5, 4), "pillow", None).unwrap();
    let (r1, r2) = (rows(&g1), rows(&g2));
    assert_eq!(r1[0], r2[0]);
    assert_eq!(r1[3], r2[5]);
    // "chair" is out of vocabulary and "sofa" too: both map to the unknown row
    assert_eq!(r2[3], r2[4]);
}

#[test]
fn singleton_and_uniform_attention() {
    let cfg = PpnConfig { widths: vec![8], ..small(EmbeddingMode::Pretrained) };
    let mut model = PpnModel::new(cfg, &[]).unwrap();
    for name in ["round0.w_q", "round0.w_k", "round0.w_e"] {
        let id = model.params().id(name).unwrap();
        model.params_mut().tensor_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let g = model.case_graph(&scene(4, 6), "pillow", Some(&kb())).unwrap();
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false).unwrap();
    let pass = model.forward(&mut tape, &vars, &g, Some(&table(8))).unwrap();
    let alpha = tape.value(pass.attention[0]);
    for (e, &d) in pass.destinations.iter().enumerate() {
        let degree = pass.destinations.iter().filter(|&&x| x == d).count() as f64;
        for h in 0..2 {
            assert!((alpha.get(e, h) - 1.0 / degree).abs() < 1e-15);
        }
    }
    // concept nodes linked to a single object see only that neighbour
    let office = g.nodes().iter().position(|n| n.token() == "office").unwrap();
    let row = pass.destinations.iter().position(|&d| d == office).unwrap();
    assert_eq!(alpha.get(row, 0), 1.0);
}

#[test]
fn attention_normalises_per_node_and_head() {
    let model = PpnModel::new(PpnConfig { widths: vec![8, 16, 16], ..small(EmbeddingMode::Pretrained) }, &[]).unwrap();
    let t = table(8);
    for seed in 0..10 {
        let g = model.case_graph(&scene(3 + seed as usize % 6, seed), "pillow", Some(&kb())).unwrap();
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, false).unwrap();
        let pass = model.forward(&mut tape, &vars, &g, Some(&t)).unwrap();
        assert_eq!(pass.attention.len(), 3);
        for &a in &pass.attention {
            let alpha = tape.value(a);
            let mut sums = vec![[0.0; 2]; g.len()];
            for (e, &d) in pass.destinations.iter().enumerate() {
                for (h, s) in sums[d].iter_mut().enumerate() {
                    *s += alpha.get(e, h);
                }
            }
            for s in sums.iter().flatten() {
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn predictions_invariant_to_node_order() {
    let model = PpnModel::new(small(EmbeddingMode::Pretrained), &[]).unwrap();
    let t = table(8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for seed in 0..5 {
        let g = model.case_graph(&scene(6, seed), "pillow", Some(&kb())).unwrap();
        let base = model.predict(&g, Some(&t)).unwrap();
        let mut perm: Vec<usize> = (0..g.len()).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let moved = model.predict(&g.relabel(&perm), Some(&t)).unwrap();
        assert_eq!(moved.target_node, perm[base.target_node]);
        for a in &base.anchors {
            let b = moved.anchors.iter().find(|b| b.node == perm[a.node]).unwrap();
            assert!((a.distance - b.distance).abs() < 1e-9);
            assert!(a.distance >= 0.0);
        }
    }
}

#[test]
fn full_loss_gradient_matches_finite_differences() {
    let cfg = PpnConfig { widths: vec![4, 8], heads: 2, mlp_hidden: vec![6], ..small(EmbeddingMode::Learned) };
    let model = PpnModel::new(cfg, &vocab()).unwrap();
    // 5 observed objects + target = 6 object nodes
    let mut record = scene(5, 12);
    record.targets[0].gt_positions.push(Point2::new(4.0, 0.5));
    let g = model.case_graph(&record, "pillow", None).unwrap();
    assert_eq!(g.len(), 6);
    let positions: Vec<Point2> = record.objects.iter().map(|o| o.position).collect();
    let gt = record.targets[0].gt_positions.clone();
    let loc = LocaliserConfig::default();
    let f = |tape: &mut Tape, vars: &[Var]| -> Result<Var, TensorError> {
        let pass = model.forward(tape, vars, &g, None).map_err(|e| match e {
            PpnError::Tensor(t) => t,
            other => panic!("{other}"),
        })?;
        let (loss, _) = case_loss(tape, pass.distances, &positions, &gt, "pillow", InstanceSelection::DistanceError, &loc).unwrap();
        Ok(loss)
    };
    let report = gradcheck(f, model.params(), 1e-6, 1e-4).unwrap();
    assert!(report.passed(), "{report:#?}");
    assert!(report.tensors.iter().map(|t| t.checked).sum::<usize>() > 100);
}

#[test]
fn proximity_only_learned_variant() {
    let cfg = PpnConfig { edge_kinds: vec![EdgeKind::Proximity], ..small(EmbeddingMode::Learned) };
    let model = PpnModel::new(cfg, &vocab()).unwrap();
    let g = model.case_graph(&scene(5, 7), "pillow", Some(&kb())).unwrap();
    assert_eq!(g.concept_count(), 0);
    let p = model.predict(&g, None).unwrap();
    assert_eq!(p.anchors.len(), 5);
    assert!(p.anchors.iter().all(|a| a.distance.is_finite() && a.distance >= 0.0));
}

fn pass_with(tape: &mut Tape, values: &[f64]) -> Var {
    tape.leaf(Tensor::column(values), true).unwrap()
}

#[test]
fn loss_examples() {
    let anchors = [Point2::new(0.0, 0.0), Point2::new(4.0, 0.0), Point2::new(0.0, 3.0)];
    let truth = [Point2::new(1.0, 1.0)];
    let loc = LocaliserConfig::default();
    let exact = [2f64.sqrt(), 10f64.sqrt(), 5f64.sqrt()];
    let mut tape = Tape::new();
    let pass = pass_with(&mut tape, &exact);
    let (l, g) = case_loss(&mut tape, pass, &anchors, &truth, "pillow", InstanceSelection::Localised, &loc).unwrap();
    assert_eq!((tape.value(l).item(), g), (0.0, 0));

    let mut tape = Tape::new();
    let pass = pass_with(&mut tape, &exact.map(|d| d + 0.5));
    let (l, _) = case_loss(&mut tape, pass, &anchors, &truth, "pillow", InstanceSelection::Localised, &loc).unwrap();
    assert!((tape.value(l).item() - 0.25).abs() < 1e-15);

    let mut tape = Tape::new();
    let pass = pass_with(&mut tape, &exact);
    assert!(matches!(
        case_loss(&mut tape, pass, &anchors, &[], "pillow", InstanceSelection::Localised, &loc),
        Err(PpnError::NoInstance(t)) if t == "pillow"
    ));
}

#[test]
fn instance_selection_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let loc = LocaliserConfig::default();
    for _ in 0..30 {
        let anchors: Vec<Point2> = (0..5).map(|_| Point2::new(rng.random_range(0.0..6.0), rng.random_range(0.0..6.0))).collect();
        let instances: Vec<Point2> = (0..3).map(|_| Point2::new(rng.random_range(0.0..6.0), rng.random_range(0.0..6.0))).collect();
        let which = rng.random_range(0..3);
        let predicted: Vec<f64> = supervision_distances(&anchors, instances[which])
            .iter()
            .map(|d| d + rng.random_range(-0.05..0.05))
            .collect();
        let (p, ..) = crate::localiser::localise_anchors(
            &anchors.iter().copied().zip(predicted.iter().copied()).collect::<Vec<_>>(),
            &loc,
        )
        .unwrap();
        let mut oracle = 0;
        for g in 1..instances.len() {
            if p.distance(&instances[g]) < p.distance(&instances[oracle]) {
                oracle = g;
            }
        }
        let got = select_instance(&predicted, &anchors, &instances, InstanceSelection::Localised, &loc).unwrap();
        assert_eq!(got, oracle);
        let mut errs: Vec<(f64, usize)> = instances
            .iter()
            .enumerate()
            .map(|(g, &q)| (supervision_distances(&anchors, q).iter().zip(&predicted).map(|(a, b)| (a - b).powi(2)).sum(), g))
            .collect();
        errs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let got = select_instance(&predicted, &anchors, &instances, InstanceSelection::DistanceError, &loc).unwrap();
        assert_eq!(got, errs[0].1);
    }
    let anchors = [Point2::new(0.0, 0.0), Point2::new(4.0, 0.0), Point2::new(0.0, 3.0)];
    let twins = [Point2::new(1.0, 1.0), Point2::new(1.0, 1.0)];
    let d = supervision_distances(&anchors, twins[0]);
    assert_eq!(select_instance(&d, &anchors, &twins, InstanceSelection::Localised, &loc).unwrap(), 0);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    for mode in [EmbeddingMode::Pretrained, EmbeddingMode::Learned] {
        let model = PpnModel::new(small(mode), &vocab()).unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("kb".to_string(), "/tmp/kb.tsv".to_string());
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &model, &meta).unwrap();
        let (back, meta_back) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, model);
        assert_eq!(meta_back, meta);
        for ((_, a), (_, b)) in model.params().iter().zip(back.params().iter()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        buf.truncate(buf.len() - 1);
        assert!(matches!(read_checkpoint(buf.as_slice()), Err(PpnError::Checkpoint(_))));
    }
    assert!(matches!(read_checkpoint(&b"hello\n"[..]), Err(PpnError::Checkpoint(_))));
}

#[test]
fn initialisation_is_seeded() {
    let a = PpnModel::new(small(EmbeddingMode::Learned), &vocab()).unwrap();
    let b = PpnModel::new(small(EmbeddingMode::Learned), &vocab()).unwrap();
    assert_eq!(a, b);
    let c = PpnModel::new(PpnConfig { seed: 6, ..small(EmbeddingMode::Learned) }, &vocab()).unwrap();
    assert_ne!(a.params(), c.params());
    assert!(a.params().get("round0.b_v").unwrap().data().iter().all(|&v| v == 0.0));
    assert!(a.params().get("round0.ln_gamma").unwrap().data().iter().all(|&v| v == 1.0));
}
