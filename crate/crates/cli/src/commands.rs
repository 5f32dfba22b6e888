use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::info;
use serde::Serialize;
use sha2::{Digest, Sha256};

use scg_core::baselines::{record_categories, MlpInput, PairStatsTable, PairwiseMlp, Statistic};
use scg_core::dataset::{cases, generate, read_scenes, split, write_scenes, DatasetError, GeneratorSpec, SceneRecord};
use scg_core::evaluation::{evaluate as score, EvalError};
use scg_core::geometry::Point2;
use scg_core::graph::EdgeKind;
use scg_core::knowledge::{load_embeddings, load_snapshot, write_embeddings, write_snapshot, EmbeddingTable, KnowledgeSnapshot};
use scg_core::localiser::{localise as locate, LocaliseError};
use scg_core::metrics::EvaluationReport;
use scg_core::model::{scene_predictions, DistancePredictor, PpnPredictor};
use scg_core::ppn::{learned_vocabulary, load_checkpoint, parse_edge_kinds, save_checkpoint, EmbeddingMode, PpnConfig, PpnError, PpnModel};
use scg_core::selfcheck;
use scg_core::tensor::TensorError;
use scg_core::trainer::{train as fit, TrainError};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::{BaselineArgs, BaselineKind, EvaluateArgs, GenSynthArgs, LocaliseArgs, ModelFlags, TrainArgs};

fn ppn_error(e: PpnError) -> CliError {
    match e {
        PpnError::Config(_) | PpnError::MissingEmbeddings | PpnError::EmbeddingDim { .. } => CliError::Config(e.to_string()),
        PpnError::Tensor(TensorError::NonFinite { .. }) | PpnError::Localise(LocaliseError::DegenerateGeometry { .. }) => {
            CliError::Numerical(e.to_string())
        }
        _ => CliError::Data(e.to_string()),
    }
}

fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::NonFiniteGradient(_) => CliError::Numerical(e.to_string()),
        TrainError::Model { scene, source } => match ppn_error(source) {
            CliError::Numerical(m) => CliError::Numerical(format!("scene `{scene}`: {m}")),
            CliError::Config(m) => CliError::Config(m),
            other => CliError::Data(format!("scene `{scene}`: {other}")),
        },
        TrainError::Eval(e) => eval_error(e),
        _ => CliError::Data(e.to_string()),
    }
}

fn eval_error(e: EvalError) -> CliError {
    match e {
        EvalError::Case { scene, target, source } => match ppn_error(source) {
            CliError::Numerical(m) => CliError::Numerical(format!("scene `{scene}`, target `{target}`: {m}")),
            CliError::Config(m) => CliError::Config(m),
            other => CliError::Data(format!("scene `{scene}`, target `{target}`: {other}")),
        },
        EvalError::Metrics(m) => CliError::Data(m.to_string()),
    }
}

fn dataset_error(e: DatasetError) -> CliError {
    match e {
        DatasetError::Spec(_) => CliError::Config(e.to_string()),
        _ => CliError::Data(e.to_string()),
    }
}

fn scenes(path: &Path) -> Result<Vec<SceneRecord>, CliError> {
    read_scenes(path).map_err(|e| match e {
        DatasetError::Io { .. } => CliError::Data(e.to_string()),
        other => CliError::data(path, other),
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::data(path, e))
}

fn sha256(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::data(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// `dir/stem.<suffix>` next to `path`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn kinds_text(kinds: &[EdgeKind]) -> String {
    kinds.iter().map(|k| k.to_string().to_ascii_lowercase()).collect::<Vec<_>>().join(",")
}

fn parse_kinds(list: &str) -> Result<Vec<EdgeKind>, CliError> {
    let kinds = parse_edge_kinds(list)
        .ok_or_else(|| CliError::Config(format!("--ablate-edges: unknown edge kind in `{list}`")))?;
    if !kinds.contains(&EdgeKind::Proximity) {
        return Err(CliError::Config("--ablate-edges must keep proximity edges".into()));
    }
    Ok(kinds)
}

/// Knowledge and embeddings required by `ppn`, loaded from the configured paths.
fn model_inputs(cfg: &RunConfig, ppn: &PpnConfig, kinds: &[EdgeKind]) -> Result<(Option<Arc<KnowledgeSnapshot>>, Option<Arc<EmbeddingTable>>), CliError> {
    let kb = match (kinds.iter().any(|k| k.is_semantic()), &cfg.kb) {
        (false, _) => None,
        (true, Some(p)) => Some(Arc::new(load_snapshot(p).map_err(|e| CliError::data(p, e))?)),
        (true, None) => {
            return Err(CliError::Config(format!(
                "edge kinds `{}` need a knowledge snapshot: pass --kb or set paths.kb",
                kinds_text(kinds)
            )))
        }
    };
    let emb = match (ppn.embedding_mode, &cfg.emb) {
        (EmbeddingMode::Learned, _) => None,
        (EmbeddingMode::Pretrained, Some(p)) => Some(Arc::new(load_embeddings(p).map_err(|e| CliError::data(p, e))?)),
        (EmbeddingMode::Pretrained, None) => {
            return Err(CliError::Config("pretrained embeddings needed: pass --emb or set paths.emb".into()))
        }
    };
    Ok((kb, emb))
}

fn input_hashes(inputs: &[(&str, Option<&PathBuf>)]) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (name, path) in inputs {
        if let Some(p) = path {
            out.push((format!("input.{name}.sha256"), sha256(p)?));
        }
    }
    Ok(out)
}

fn log_config(cfg: &RunConfig) {
    for (k, v) in cfg.to_pairs() {
        info!("config {k} = {v}");
    }
}

pub fn gen_synth(a: &GenSynthArgs) -> Result<(), CliError> {
    let spec = GeneratorSpec { seed: a.seed, ..GeneratorSpec::default() };
    let corpus = generate(&spec, 0, a.scenes + a.test_scenes).map_err(dataset_error)?;
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::data(&a.out, e))?;
    let (train, test) = corpus.records.split_at(a.scenes);
    for (name, records) in [("train.jsonl", train), ("test.jsonl", test)] {
        let p = a.out.join(name);
        write_scenes(&p, records).map_err(dataset_error)?;
    }
    let kb_path = a.out.join("knowledge.tsv");
    write_snapshot(&kb_path, &corpus.knowledge).map_err(|e| CliError::data(&kb_path, e))?;
    let emb_path = a.out.join("embeddings.txt");
    write_embeddings(&emb_path, &corpus.embeddings).map_err(|e| CliError::data(&emb_path, e))?;
    println!(
        "wrote {} train and {} test scenes, {} triples, {} embeddings to {}",
        train.len(),
        test.len(),
        corpus.knowledge.len(),
        corpus.embeddings.len(),
        a.out.display()
    );
    Ok(())
}

fn apply_model_flags(cfg: &mut RunConfig, flags: &ModelFlags) -> Result<(), CliError> {
    cfg.apply_overrides(&flags.overrides)?;
    if let Some(p) = &flags.kb {
        cfg.kb = Some(p.clone());
    }
    if let Some(p) = &flags.emb {
        cfg.emb = Some(p.clone());
    }
    if let Some(list) = &flags.ablate_edges {
        let kinds = parse_kinds(list)?;
        cfg.set("ppn.edge_kinds", &kinds_text(&kinds))?;
    }
    if flags.no_concat {
        cfg.set("ppn.concat_final", "false")?;
    }
    if let Some(l) = flags.layers {
        if l == 0 {
            return Err(CliError::Config("--layers must be at least 1".into()));
        }
        let base = cfg.ppn.widths.first().copied().unwrap_or(PpnConfig::default().widths[0]);
        let widths = PpnConfig::round_widths(base, l);
        cfg.set("ppn.widths", &widths.iter().map(usize::to_string).collect::<Vec<_>>().join(","))?;
    }
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    apply_model_flags(&mut cfg, &a.model)?;
    if let Some(s) = a.seed {
        cfg.set("train.seed", &s.to_string())?;
        cfg.set("ppn.seed", &s.to_string())?;
    }
    if let Some(e) = a.epochs {
        cfg.set("train.epochs", &e.to_string())?;
    }
    if let Some(p) = &a.data {
        cfg.data = Some(p.clone());
    }
    if let Some(p) = &a.out {
        cfg.out = Some(p.clone());
    }
    let data = cfg.data.clone().ok_or_else(|| CliError::Config("no training data: pass --data or set paths.data".into()))?;
    let out = cfg.out.clone().ok_or_else(|| CliError::Config("no output path: pass --out or set paths.out".into()))?;
    let records = scenes(&data)?;
    let kinds = cfg.ppn.edge_kinds.clone();
    let (kb, emb) = model_inputs(&cfg, &cfg.ppn, &kinds)?;
    if let Some(t) = &emb {
        if !cfg.is_explicit("ppn.input_dim") {
            cfg.set("ppn.input_dim", &t.dim().to_string())?;
        }
    }
    cfg.validate()?;
    log_config(&cfg);
    let resolved = sibling(&out, "config");
    write_text(&resolved, &cfg.to_text())?;

    let (tr, va) = split(&records, cfg.train.val_fraction, cfg.train.seed);
    info!("{} training and {} validation scenes", tr.len(), va.len());
    let vocab = match cfg.ppn.embedding_mode {
        EmbeddingMode::Learned => learned_vocabulary(&tr, kb.as_deref(), &kinds),
        EmbeddingMode::Pretrained => Vec::new(),
    };
    let model = PpnModel::new(cfg.ppn.clone(), &vocab).map_err(ppn_error)?;
    let log_path = sibling(&out, "log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| CliError::data(&log_path, e))?);
    let outcome = fit(PpnPredictor::new(model, kb, emb), &tr, &va, &cfg.train, |r, _| {
        let line = r.to_json_line();
        writeln!(log, "{line}").and_then(|_| log.flush()).map_err(|e| TrainError::Callback(format!("{}: {e}", log_path.display())))?;
        info!("{line}");
        Ok(())
    })
    .map_err(train_error)?;

    let mut meta: BTreeMap<String, String> = cfg.to_pairs().into_iter().filter(|(k, _)| !k.starts_with("ppn.") && k != "paths.out").collect();
    meta.extend(input_hashes(&[("data", cfg.data.as_ref()), ("kb", cfg.kb.as_ref()), ("emb", cfg.emb.as_ref())])?);
    meta.insert("best_epoch".into(), outcome.best_epoch.to_string());
    save_checkpoint(&out, &outcome.best.model, &meta).map_err(|e| CliError::data(&out, e))?;
    let last = sibling(&out, "last.ckpt");
    meta.insert("best_epoch".into(), cfg.train.epochs.to_string());
    save_checkpoint(&last, &outcome.last.model, &meta).map_err(|e| CliError::data(&last, e))?;
    let best = &outcome.log[outcome.best_epoch];
    println!(
        "best epoch {} (val lsr@1 {}); wrote {}, {}, {} and {}",
        outcome.best_epoch,
        best.val_lsr.map_or("NA".into(), |v| v.to_string()),
        out.display(),
        last.display(),
        log_path.display(),
        resolved.display()
    );
    Ok(())
}

/// Checkpoint plus the run configuration it was trained with, after
/// command-line overrides.
fn load_model(path: &Path, flags: &ModelFlags) -> Result<(PpnPredictor, RunConfig), CliError> {
    let (model, meta) = load_checkpoint(path).map_err(|e| CliError::data(path, e))?;
    let mut cfg = RunConfig::default();
    cfg.ppn = model.config().clone();
    for (k, v) in &meta {
        if k.starts_with("train.") || k.starts_with("localiser.") || k == "paths.kb" || k == "paths.emb" {
            cfg.set(k, v).map_err(|e| CliError::data(path, e))?;
        }
    }
    if let Some(bad) = flags.overrides.iter().find(|o| o.trim_start().starts_with("ppn.")) {
        return Err(CliError::Config(format!("`{bad}`: model keys are fixed by the checkpoint")));
    }
    cfg.apply_overrides(&flags.overrides)?;
    let rounds = model.config().rounds();
    if let Some(l) = flags.layers {
        if l != rounds {
            return Err(CliError::Config(format!("--layers {l} does not match the checkpoint's {rounds} rounds")));
        }
    }
    if flags.no_concat && model.config().concat_final {
        return Err(CliError::Config("--no-concat given but the checkpoint was trained with concatenated states".into()));
    }
    if let Some(p) = &flags.kb {
        cfg.kb = Some(p.clone());
    }
    if let Some(p) = &flags.emb {
        cfg.emb = Some(p.clone());
    }
    let filter = match &flags.ablate_edges {
        Some(list) => {
            let kinds = parse_kinds(list)?;
            if let Some(k) = kinds.iter().find(|k| !model.config().edge_kinds.contains(k)) {
                return Err(CliError::Config(format!("--ablate-edges: the checkpoint was not trained with {k} edges")));
            }
            Some(kinds)
        }
        None => None,
    };
    let kinds = filter.clone().unwrap_or_else(|| model.config().edge_kinds.clone());
    let (kb, emb) = model_inputs(&cfg, model.config(), &kinds)?;
    let mut predictor = PpnPredictor::new(model, kb, emb);
    predictor.edge_filter = filter;
    Ok((predictor, cfg))
}

fn write_report(path: &Path, report: &EvaluationReport, extra: &[(String, String)]) -> Result<(), CliError> {
    write_text(path, &report.to_text(extra))?;
    let bins = with_suffix(path, ".bins.tsv");
    write_text(&bins, &report.bins_tsv())?;
    println!(
        "cases {}  mppe {:.4}  lsr@1 {:.4}  lsr@2 {:.4}  lsr@3 {:.4}  msle {}",
        report.cases,
        report.mppe,
        report.lsr[0],
        report.lsr[1],
        report.lsr[2],
        report.msle.map_or("NA".into(), |v| format!("{v:.4}"))
    );
    println!("wrote {} and {}", path.display(), bins.display());
    Ok(())
}

pub fn evaluate(a: &EvaluateArgs) -> Result<(), CliError> {
    let (predictor, cfg) = load_model(&a.model, &a.flags)?;
    log_config(&cfg);
    let records = scenes(&a.data)?;
    let report = score(&predictor, &cases(&records), &cfg.train.localiser).map_err(eval_error)?;
    let kinds = predictor.edge_filter.clone().unwrap_or_else(|| predictor.model.config().edge_kinds.clone());
    let mut extra: Vec<(String, String)> = cfg.to_pairs().into_iter().filter(|(k, _)| !k.starts_with("train.")).collect();
    extra.push(("evaluate.edge_kinds".into(), kinds_text(&kinds)));
    extra.push(("evaluate.data".into(), a.data.display().to_string()));
    extra.push(("evaluate.model".into(), a.model.display().to_string()));
    extra.extend(input_hashes(&[
        ("data", Some(&a.data)),
        ("model", Some(&a.model)),
        ("kb", cfg.kb.as_ref().filter(|_| predictor.kb.is_some())),
        ("emb", cfg.emb.as_ref().filter(|_| predictor.embeddings.is_some())),
    ])?);
    write_report(&a.report, &report, &extra)
}

#[derive(Debug, Serialize)]
struct AnchorRecord {
    id: u32,
    category: String,
    position: Point2,
    distance: f64,
    used: bool,
    residual: Option<f64>,
}

#[derive(Debug, Serialize)]
struct LocaliseRecord {
    scene_id: String,
    target: String,
    source: String,
    position: Point2,
    cost: f64,
    anchors_used: usize,
    /// Distance to the nearest ground-truth instance, when the scene lists one.
    error: Option<f64>,
    anchors: Vec<AnchorRecord>,
}

pub fn localise(a: &LocaliseArgs) -> Result<(), CliError> {
    let records = scenes(&a.scene)?;
    let scene = records
        .iter()
        .find(|r| r.scene_id == a.scene_id)
        .ok_or_else(|| CliError::Data(format!("{}: no scene `{}`", a.scene.display(), a.scene_id)))?;
    let truth = scene.target(&a.target).map(|t| t.gt_positions.clone());
    let (preds, cfg, source) = match &a.model {
        Some(path) => {
            let (predictor, cfg) = load_model(path, &a.flags)?;
            let preds = predictor.predict(scene, &a.target).map_err(ppn_error)?;
            (preds, cfg, path.display().to_string())
        }
        None => {
            let mut cfg = RunConfig::default();
            cfg.apply_overrides(&a.flags.overrides)?;
            let gt = truth
                .as_ref()
                .and_then(|g| g.get(a.instance).copied())
                .ok_or_else(|| CliError::Data(format!("scene `{}` has no instance {} of `{}`", a.scene_id, a.instance, a.target)))?;
            let d: Vec<f64> = scene.objects.iter().map(|o| o.position.distance(&gt)).collect();
            (scene_predictions(scene, &a.target, &d), cfg, "oracle".to_string())
        }
    };
    let result = locate(&preds, &cfg.train.localiser).map_err(|e| match e {
        LocaliseError::DegenerateGeometry { .. } => CliError::Numerical(e.to_string()),
        _ => CliError::Data(format!("scene `{}`: {e}", a.scene_id)),
    })?;
    let residuals: BTreeMap<usize, f64> = result.residuals.iter().copied().collect();
    let anchors: Vec<AnchorRecord> = preds
        .anchors
        .iter()
        .map(|p| AnchorRecord {
            id: scene.objects[p.node].id,
            category: p.category.clone(),
            position: p.position,
            distance: p.distance,
            used: residuals.contains_key(&p.node),
            residual: residuals.get(&p.node).copied(),
        })
        .collect();
    let error = truth.as_ref().and_then(|g| g.iter().map(|q| q.distance(&result.position)).min_by(f64::total_cmp));
    println!("position {} {}", result.position.x, result.position.y);
    println!("cost {}", result.cost);
    println!("anchors_used {}", result.anchors_used);
    if let Some(e) = error {
        println!("error {e}");
    }
    println!("id\tcategory\tx\ty\tdistance\tresidual");
    for r in &anchors {
        println!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.id,
            r.category,
            r.position.x,
            r.position.y,
            r.distance,
            r.residual.map_or("unused".into(), |v| v.to_string())
        );
    }
    let record = LocaliseRecord {
        scene_id: a.scene_id.clone(),
        target: a.target.clone(),
        source,
        position: result.position,
        cost: result.cost,
        anchors_used: result.anchors_used,
        error,
        anchors,
    };
    let path = a.record.clone().unwrap_or_else(|| PathBuf::from(format!("{}.{}.localise.json", a.scene_id, a.target)));
    let json = serde_json::to_string_pretty(&record).expect("record serialises");
    write_text(&path, &(json + "\n"))
}

pub fn baseline(a: &BaselineArgs) -> Result<(), CliError> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&a.overrides)?;
    if let Some(s) = a.seed {
        cfg.set("train.seed", &s.to_string())?;
    }
    if let Some(e) = a.epochs {
        cfg.set("train.epochs", &e.to_string())?;
    }
    if let Some(p) = &a.kb {
        cfg.kb = Some(p.clone());
    }
    let train_records = scenes(&a.train)?;
    let test = cases(&scenes(&a.data)?);
    let loc = cfg.train.localiser;
    let stat = match a.kind {
        BaselineKind::Mean => Some(Statistic::Mean),
        BaselineKind::Median => Some(Statistic::Median),
        BaselineKind::Mode => Some(Statistic::Mode),
        BaselineKind::Mlp | BaselineKind::MlpCs => None,
    };
    let report = match stat {
        Some(stat) => {
            let table = PairStatsTable::fit(&train_records).map_err(|e| CliError::data(&a.train, e))?;
            if let Some(p) = &a.table {
                write_text(p, &table.to_tsv())?;
            }
            score(&table.predictor(stat), &test, &loc).map_err(eval_error)?
        }
        None => {
            let (input, kb) = if a.kind == BaselineKind::MlpCs {
                let p = cfg.kb.clone().ok_or_else(|| CliError::Config("mlp-cs needs a knowledge snapshot: pass --kb".into()))?;
                (MlpInput::WithCommonsense, Some(load_snapshot(&p).map_err(|e| CliError::data(&p, e))?))
            } else {
                (MlpInput::Plain, None)
            };
            let cats = record_categories(&train_records);
            let mlp = PairwiseMlp::new(input, &cats, kb.as_ref(), &a.hidden, cfg.train.seed).map_err(|e| CliError::data(&a.train, e))?;
            let (tr, va) = split(&train_records, cfg.train.val_fraction, cfg.train.seed);
            log_config(&cfg);
            let outcome = fit(mlp, &tr, &va, &cfg.train, |r, _| {
                info!("{}", r.to_json_line());
                Ok(())
            })
            .map_err(train_error)?;
            score(&outcome.best, &test, &loc).map_err(eval_error)?
        }
    };
    let kind = match a.kind {
        BaselineKind::Mlp => "mlp".to_string(),
        BaselineKind::MlpCs => "mlp-cs".to_string(),
        _ => stat.expect("statistics kind").to_string(),
    };
    let mut extra = vec![("baseline.kind".to_string(), kind)];
    if stat.is_none() {
        extra.push(("baseline.hidden".into(), a.hidden.iter().map(usize::to_string).collect::<Vec<_>>().join(",")));
    }
    extra.extend(cfg.to_pairs().into_iter().filter(|(k, _)| {
        k.starts_with("localiser.") || (stat.is_none() && k.starts_with("train.")) || (a.kind == BaselineKind::MlpCs && k == "paths.kb")
    }));
    extra.extend(input_hashes(&[
        ("train", Some(&a.train)),
        ("data", Some(&a.data)),
        ("kb", cfg.kb.as_ref().filter(|_| a.kind == BaselineKind::MlpCs)),
    ])?);
    write_report(&a.report, &report, &extra)
}

pub fn gradcheck() -> Result<(), CliError> {
    let results = selfcheck::run_suite().map_err(ppn_error)?;
    let mut failed = Vec::new();
    for (name, r) in &results {
        let checked: usize = r.tensors.iter().map(|t| t.checked).sum();
        let kinks: usize = r.tensors.iter().map(|t| t.kinks).sum();
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        println!("{verdict} {name}: max relative error {:.3e} over {checked} entries ({kinks} kinks skipped)", r.max_rel_error());
        if !r.passed() {
            failed.push(name.clone());
        }
    }
    if failed.is_empty() {
        println!("all {} checks passed (tolerance {:e})", results.len(), selfcheck::TOLERANCE);
        Ok(())
    } else {
        Err(CliError::Numerical(format!("gradient check failed: {}", failed.join(", "))))
    }
}
