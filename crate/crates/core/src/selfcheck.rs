//! Finite-difference verification of every tape operation and of the full
//! network loss, runnable outside the test harness.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{SceneObject, SceneRecord, TargetSpec};
use crate::geometry::Point2;
use crate::graph::EdgeKind;
use crate::knowledge::{EmbeddingTable, KnowledgeSnapshot, Triple};
use crate::localiser::LocaliserConfig;
use crate::ppn::{case_loss, EmbeddingMode, InstanceSelection, PpnConfig, PpnError, PpnModel};
use crate::tensor::{gradcheck, GradCheckReport, ParameterSet, Tape, Tensor, TensorError, Var};

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn inputs(seed: u64, shapes: &[(usize, usize)]) -> ParameterSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ParameterSet::new();
    for (i, &(r, c)) in shapes.iter().enumerate() {
        set.insert(format!("x{i}"), random(&mut rng, r, c), true);
    }
    set
}

type OpCase = (&'static str, Vec<(usize, usize)>, fn(&mut Tape, &[Var]) -> Result<Var, TensorError>);

fn op_cases() -> Vec<OpCase> {
    vec![
        ("matmul+add_row", vec![(3, 4), (4, 2), (1, 2)], |t, v| {
            let m = t.matmul(v[0], v[1])?;
            let a = t.add_row(m, v[2])?;
            t.sum(a)
        }),
        ("add+sub+mul", vec![(3, 2), (3, 2), (3, 2)], |t, v| {
            let a = t.add(v[0], v[1])?;
            let b = t.sub(a, v[2])?;
            let c = t.mul(b, v[1])?;
            t.sum(c)
        }),
        ("mul_col+scale+affine", vec![(4, 3), (4, 1)], |t, v| {
            let a = t.mul_col(v[0], v[1])?;
            let b = t.scale(a, -1.7)?;
            let c = t.affine(b, 0.5, 2.0)?;
            let d = t.mul(c, c)?;
            t.sum(d)
        }),
        ("concat+gather", vec![(3, 2), (3, 1), (2, 3)], |t, v| {
            let a = t.concat_cols(&[v[0], v[1]])?;
            let b = t.concat_rows(&[a, v[2]])?;
            let g = t.gather_rows(b, Rc::from(vec![4, 0, 0, 2]))?;
            let s = t.mul(g, g)?;
            t.sum(s)
        }),
        ("segment_softmax+segment_sum", vec![(6, 2), (6, 2)], |t, v| {
            let seg: Rc<[usize]> = Rc::from(vec![0, 2, 0, 1, 2, 2]);
            let a = t.segment_softmax(v[0], seg.clone(), 3)?;
            let b = t.mul(a, v[1])?;
            let c = t.segment_sum(b, seg, 3)?;
            let d = t.mul(c, c)?;
            t.sum(d)
        }),
        ("sigmoid+softplus+relu", vec![(4, 3)], |t, v| {
            let a = t.sigmoid(v[0])?;
            let b = t.softplus(v[0])?;
            let c = t.relu(v[0])?;
            let d = t.mul(a, b)?;
            let e = t.add(d, c)?;
            t.sum(e)
        }),
        ("row_softmax", vec![(3, 4), (3, 4)], |t, v| {
            let a = t.row_softmax(v[0])?;
            let b = t.mul(a, v[1])?;
            t.sum(b)
        }),
        ("layer_norm", vec![(3, 5), (1, 5), (1, 5), (3, 5)], |t, v| {
            let a = t.layer_norm(v[0], v[1], v[2])?;
            let b = t.mul(a, v[3])?;
            t.sum(b)
        }),
        ("mse", vec![(5, 1), (5, 1)], |t, v| t.mse(v[0], v[1])),
    ]
}

fn check_scene() -> (SceneRecord, KnowledgeSnapshot, EmbeddingTable) {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cats = ["bed", "desk", "lamp", "chair", "bed"];
    let scene = SceneRecord {
        scene_id: "check_0".into(),
        completeness: 0.5,
        objects: cats
            .iter()
            .enumerate()
            .map(|(i, c)| SceneObject {
                id: i as u32,
                category: c.to_string(),
                position: Point2::new(rng.random_range(0.0..5.0), rng.random_range(0.0..5.0)),
            })
            .collect(),
        targets: vec![TargetSpec {
            category: "pillow".into(),
            gt_positions: vec![Point2::new(1.0, 2.0), Point2::new(4.0, 0.5)],
        }],
    };
    let mut kb = KnowledgeSnapshot::new();
    for (rel, s, c, w) in [
        (EdgeKind::AtLocation, "pillow", "bedroom", 2.8),
        (EdgeKind::AtLocation, "bed", "bedroom", 3.0),
        (EdgeKind::UsedFor, "pillow", "sleeping", 2.2),
        (EdgeKind::UsedFor, "desk", "working", 0.7),
    ] {
        kb.insert(Triple { relation: rel, subject: s.into(), concept: c.into(), weight: w });
    }
    let mut table = EmbeddingTable::new(6);
    for tok in ["bed", "desk", "lamp", "chair", "pillow", "bedroom", "sleeping"] {
        table.insert(tok, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect());
    }
    (scene, kb, table)
}

/// Gradient check of the full loss for a small network on a graph with
/// `scene.objects.len() + 1` object nodes.
pub fn ppn_loss_check(model: &PpnModel, scene: &SceneRecord, kb: Option<&KnowledgeSnapshot>, table: Option<&EmbeddingTable>) -> Result<GradCheckReport, PpnError> {
    let target = &scene.targets[0];
    let graph = model.case_graph(scene, &target.category, kb)?;
    let positions: Vec<Point2> = scene.objects.iter().map(|o| o.position).collect();
    let loc = LocaliserConfig::default();
    let f = |tape: &mut Tape, vars: &[Var]| -> Result<Var, TensorError> {
        let pass = model.forward(tape, vars, &graph, table).map_err(|e| match e {
            PpnError::Tensor(t) => t,
            other => TensorError::Callback(other.to_string()),
        })?;
        let (loss, _) = case_loss(tape, pass.distances, &positions, &target.gt_positions, &target.category, InstanceSelection::DistanceError, &loc)
            .map_err(|e| TensorError::Callback(e.to_string()))?;
        Ok(loss)
    };
    Ok(gradcheck(f, model.params(), STEP, TOLERANCE)?)
}

/// Every check by name, in a fixed order.
pub fn run_suite() -> Result<Vec<(String, GradCheckReport)>, PpnError> {
    let mut out = Vec::new();
    for (i, (name, shapes, f)) in op_cases().into_iter().enumerate() {
        out.push((name.to_string(), gradcheck(f, &inputs(i as u64, &shapes), STEP, TOLERANCE)?));
    }
    let (scene, kb, table) = check_scene();
    let small = PpnConfig { input_dim: 6, widths: vec![4, 8], heads: 2, mlp_hidden: vec![6], seed: 3, ..PpnConfig::default() };
    let learned = PpnConfig { embedding_mode: EmbeddingMode::Learned, edge_kinds: vec![EdgeKind::Proximity], ..small.clone() };
    let vocab: Vec<String> = ["bed", "desk", "lamp", "chair", "pillow"].map(String::from).to_vec();
    let model = PpnModel::new(learned, &vocab)?;
    out.push(("ppn loss, learned, proximity".into(), ppn_loss_check(&model, &scene, None, None)?));
    let model = PpnModel::new(small, &[])?;
    out.push(("ppn loss, pretrained, all edges".into(), ppn_loss_check(&model, &scene, Some(&kb), Some(&table))?));
    Ok(out)
}
