//! Subcommand implementations. Each returns its run directory.

use std::path::{Path, PathBuf};

use idhnet::checkpoint::read_checkpoint;
use idhnet::interpret::{export_overlay, saliency, tumor_focus};
use idhnet::phantom::generate_dataset;
use idhnet::trainer::{
    cross_validate, depth_grid, fold_rows_csv, module_grid, predict_cases, predict_ensemble_files, run_ablation, score_predictions,
    stratified_folds, summary_csv, train_fold, AblationCell, CasePrediction,
};
use idhnet::volume::{load_manifest, preprocess, Case, Sequence, Split};
use idhnet_stats::{anova_posthoc, binary_metrics, delong_ci, delong_paired_test, ConfusionCounts, ScoredSet};
use serde::Serialize;

use crate::config::{parse_config, RunConfig};
use crate::rundir::{create_run_dir, write_run_record, write_text};
use crate::{CliError, Command, Common};

struct Ctx {
    cfg: RunConfig,
    dir: PathBuf,
    jobs: usize,
}

fn setup(common: &Common, command: &str, extra: &[String]) -> Result<Ctx, CliError> {
    let mut overrides = common.overrides.clone();
    overrides.extend_from_slice(extra);
    if let Some(s) = common.seed {
        overrides.push(format!("train.seed={s}"));
        overrides.push(format!("data.phantom.master_seed={s}"));
    }
    let cfg = parse_config(common.config.as_deref(), &overrides)?;
    if common.jobs == 0 {
        return Err(CliError::Config("--jobs must be >= 1".into()));
    }
    let _ = rayon::ThreadPoolBuilder::new().num_threads(common.jobs).build_global();
    let dir = create_run_dir(&common.out, command)?;
    let argv: Vec<String> = std::env::args().collect();
    write_run_record(&dir, &cfg, command, &argv)?;
    Ok(Ctx { cfg, dir, jobs: common.jobs })
}

fn csv_string<T: Serialize>(rows: &[T]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Io(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("utf-8"))
}

/// Preprocessed cases with their split tags.
fn load_cases(cfg: &RunConfig) -> Result<Vec<(Case, Split)>, CliError> {
    let size = cfg.crop_size();
    let raw: Vec<(Case, Split)> = match &cfg.data.manifest {
        Some(path) => {
            let m = load_manifest(path)?;
            m.rows.iter().map(|r| Ok((m.load_row(r)?, r.split))).collect::<Result<_, idhnet::Error>>()?
        }
        None => cfg.data.phantom.generate()?.into_iter().map(|c| (c, Split::Unassigned)).collect(),
    };
    Ok(raw.into_iter().map(|(c, s)| (preprocess(&c, cfg.data.norm_region, size), s)).collect())
}

fn without_test(cases: Vec<(Case, Split)>) -> Vec<Case> {
    cases.into_iter().filter(|(_, s)| *s != Split::Test).map(|(c, _)| c).collect()
}

#[derive(Serialize)]
struct MetricsRow {
    acc: f64,
    f1: f64,
    mcc: f64,
    auc: Option<f64>,
}

#[derive(Serialize)]
struct FoldPrediction<'a> {
    fold: usize,
    case_id: &'a str,
    label: u8,
    prob: f64,
}

fn phantom(common: &Common, n: Option<usize>) -> Result<PathBuf, CliError> {
    let extra: Vec<String> = n.map(|n| format!("data.phantom.n_cases={n}")).into_iter().collect();
    let ctx = setup(common, "phantom", &extra)?;
    let manifest = generate_dataset(&ctx.cfg.data.phantom, &common.out)?;
    write_text(&ctx.dir.join("manifest.csv"), &manifest.to_csv())?;
    Ok(ctx.dir)
}

fn train(common: &Common, fold: usize) -> Result<PathBuf, CliError> {
    let ctx = setup(common, "train", &[])?;
    let cases = load_cases(&ctx.cfg)?;
    let has_val = cases.iter().any(|(_, s)| *s == Split::Val);
    let (train, val): (Vec<Case>, Vec<Case>) = if has_val {
        let val = cases.iter().filter(|(_, s)| *s == Split::Val).map(|(c, _)| c.clone()).collect();
        let train = cases.into_iter().filter(|(_, s)| matches!(s, Split::Train | Split::Unassigned)).map(|(c, _)| c).collect();
        (train, val)
    } else {
        let pool = without_test(cases);
        let k = ctx.cfg.data.folds;
        if fold >= k {
            return Err(CliError::Config(format!("--fold {fold} with data.folds = {k}")));
        }
        let labels: Vec<u8> = pool.iter().map(|c| c.idh_label.unwrap_or(0)).collect();
        let assign = stratified_folds(&labels, k, ctx.cfg.train.seed)?;
        let (mut t, mut v) = (Vec::new(), Vec::new());
        for (c, a) in pool.into_iter().zip(assign) {
            if a == fold { v.push(c) } else { t.push(c) }
        }
        (t, v)
    };
    let r = train_fold(&train, &val, &ctx.cfg.experiment(), fold, Some(&ctx.dir))?;
    let preds: Vec<FoldPrediction> = r
        .val_predictions
        .iter()
        .map(|p| FoldPrediction { fold, case_id: &p.case_id, label: p.label, prob: p.prob })
        .collect();
    write_text(&ctx.dir.join("val_predictions.csv"), &csv_string(&preds)?)?;
    let m = score_predictions(&r.val_predictions)?;
    write_text(&ctx.dir.join("metrics.csv"), &csv_string(&[MetricsRow { acc: m.acc, f1: m.f1, mcc: m.mcc, auc: m.auc }])?)?;
    Ok(ctx.dir)
}

fn crossval(common: &Common) -> Result<PathBuf, CliError> {
    let ctx = setup(common, "crossval", &[])?;
    let cases = without_test(load_cases(&ctx.cfg)?);
    let cv = cross_validate(&cases, ctx.cfg.data.folds, &ctx.cfg.experiment(), ctx.jobs, Some(&ctx.dir))?;
    write_text(&ctx.dir.join("folds.csv"), &fold_rows_csv(&idhnet::trainer::fold_rows("cv", &cv)))?;
    write_text(&ctx.dir.join("summary.csv"), &summary_csv(std::slice::from_ref(&cv.summary)))?;
    let preds: Vec<FoldPrediction> = cv
        .folds
        .iter()
        .flat_map(|f| f.val_predictions.iter().map(move |p| FoldPrediction { fold: f.fold_index, case_id: &p.case_id, label: p.label, prob: p.prob }))
        .collect();
    write_text(&ctx.dir.join("predictions.csv"), &csv_string(&preds)?)?;
    Ok(ctx.dir)
}

fn load_grid(spec: &str) -> Result<Vec<AblationCell>, CliError> {
    match spec {
        "modules" => Ok(module_grid()),
        "depth" => Ok(depth_grid()),
        path => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{path}: {e}")))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{path}: {e}")))
        }
    }
}

fn ablate(common: &Common, grid: &str) -> Result<PathBuf, CliError> {
    let cells = load_grid(grid)?;
    let ctx = setup(common, "ablate", &[])?;
    write_text(&ctx.dir.join("grid.json"), &serde_json::to_string_pretty(&cells).expect("json"))?;
    let cases = without_test(load_cases(&ctx.cfg)?);
    let table = run_ablation(&cases, &cells, ctx.cfg.data.folds, &ctx.cfg.experiment(), ctx.jobs, Some(&ctx.dir))?;
    write_text(&ctx.dir.join("fold_metrics.csv"), &fold_rows_csv(&table.fold_rows))?;
    write_text(&ctx.dir.join("summary.csv"), &summary_csv(&table.rows))?;
    if cells.len() >= 2 {
        let groups: Vec<Vec<f64>> = cells
            .iter()
            .map(|c| table.fold_rows.iter().filter(|r| r.config == c.name).filter_map(|r| r.auc).collect())
            .collect();
        if groups.iter().all(|g| g.len() >= 2) {
            let a = anova_posthoc(&groups)?;
            let pairs: Vec<_> = a
                .pairwise
                .iter()
                .map(|(i, j, r)| serde_json::json!({"a": cells[*i].name, "b": cells[*j].name, "diff": r.estimate, "p": r.p_value}))
                .collect();
            let doc = serde_json::json!({"f": a.f, "df_between": a.df_between, "df_within": a.df_within, "p": a.p_value, "pairwise": pairs});
            write_text(&ctx.dir.join("auc_anova.json"), &serde_json::to_string_pretty(&doc).expect("json"))?;
        }
    }
    Ok(ctx.dir)
}

#[derive(Serialize)]
struct EvalRow {
    n: usize,
    acc: f64,
    f1: f64,
    mcc: f64,
    auc: f64,
    auc_ci_low: f64,
    auc_ci_high: f64,
}

#[derive(Serialize)]
struct ComparisonRow {
    auc_model: f64,
    auc_reference: f64,
    diff: f64,
    z: f64,
    p_value: f64,
    ci_low: f64,
    ci_high: f64,
}

fn read_reference_scores(path: &Path, cases: &[Case]) -> Result<Vec<f64>, CliError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut map = std::collections::HashMap::new();
    for rec in rdr.deserialize::<(String, f64)>() {
        let (id, s) = rec.map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        map.insert(id, s);
    }
    cases
        .iter()
        .map(|c| map.get(&c.id).copied().ok_or_else(|| CliError::Data(format!("reference scores lack case {}", c.id))))
        .collect()
}

fn evaluate(common: &Common, checkpoints: &[PathBuf], reference: Option<&Path>) -> Result<PathBuf, CliError> {
    let ctx = setup(common, "evaluate", &[])?;
    let all = load_cases(&ctx.cfg)?;
    let has_test = all.iter().any(|(_, s)| *s == Split::Test);
    let cases: Vec<Case> = all.into_iter().filter(|(_, s)| !has_test || *s == Split::Test).map(|(c, _)| c).collect();
    let labels: Vec<u8> = cases
        .iter()
        .map(|c| c.idh_label.ok_or_else(|| CliError::Data(format!("case {} has no label", c.id))))
        .collect::<Result<_, _>>()?;
    let ens = predict_ensemble_files(checkpoints, &cases, ctx.cfg.train.eval_batch_size)?;
    let scores: Vec<f64> = ens.mean.iter().map(|p| p[1]).collect();
    let preds: Vec<CasePrediction> = cases
        .iter()
        .zip(&scores)
        .map(|(c, &prob)| CasePrediction { case_id: c.id.clone(), label: c.idh_label.unwrap_or(0), prob })
        .collect();
    write_text(&ctx.dir.join("predictions.csv"), &csv_string(&preds)?)?;
    let set = ScoredSet::new(scores.clone(), labels.clone())?;
    let b = binary_metrics(&ConfusionCounts::from_scores(&scores, &labels, 0.5))?;
    let ci = delong_ci(&set, ctx.cfg.metrics.ci_level)?;
    let row = EvalRow { n: cases.len(), acc: b.acc, f1: b.f1, mcc: b.mcc, auc: ci.estimate, auc_ci_low: ci.ci_low, auc_ci_high: ci.ci_high };
    write_text(&ctx.dir.join("metrics.csv"), &csv_string(&[row])?)?;
    if let Some(path) = reference {
        let ref_scores = read_reference_scores(path, &cases)?;
        let ref_set = ScoredSet::new(ref_scores, labels)?;
        let t = delong_paired_test(&set, &ref_set)?;
        let row = ComparisonRow {
            auc_model: ci.estimate,
            auc_reference: idhnet_stats::auc(&ref_set)?,
            diff: t.estimate,
            z: t.statistic,
            p_value: t.p_value,
            ci_low: t.ci_low,
            ci_high: t.ci_high,
        };
        write_text(&ctx.dir.join("comparison.csv"), &csv_string(&[row])?)?;
    }
    Ok(ctx.dir)
}

#[derive(Serialize)]
struct FocusRow<'a> {
    case_id: &'a str,
    label: u8,
    prob_true_class: f64,
    saliency_inside: f64,
    saliency_outside: f64,
    slice: usize,
}

fn occlusion(common: &Common, checkpoint: &Path, case_id: &str, slice: Option<usize>, sequence: &str, alpha: f64) -> Result<PathBuf, CliError> {
    let seq = Sequence::parse(sequence).ok_or_else(|| CliError::Config(format!("unknown sequence {sequence:?}")))?;
    let ctx = setup(common, "occlusion", &[])?;
    let net = read_checkpoint(checkpoint)?.into_network()?;
    let case = load_cases(&ctx.cfg)?
        .into_iter()
        .map(|(c, _)| c)
        .find(|c| c.id == case_id)
        .ok_or_else(|| CliError::Data(format!("case {case_id} not found")))?;
    let sal = saliency(&net, &case, &ctx.cfg.occlusion)?;
    let z = slice.unwrap_or_else(|| {
        case.mask
            .as_ref()
            .and_then(|m| m.centroid())
            .map(|c| c[0].round() as usize)
            .unwrap_or(case.dims()[0] / 2)
    });
    export_overlay(&sal, &case, seq, z, alpha, &ctx.dir.join("overlay.png"))?;
    let (inside, outside) = tumor_focus(&sal, &case).unwrap_or((f64::NAN, f64::NAN));
    let prob = predict_cases(&net, std::slice::from_ref(&case), 1)?[0].prob;
    let label = case.idh_label.unwrap_or(0);
    let prob_true = if label == 1 { prob } else { 1.0 - prob };
    let row = FocusRow { case_id, label, prob_true_class: prob_true, saliency_inside: inside, saliency_outside: outside, slice: z };
    write_text(&ctx.dir.join("focus.csv"), &csv_string(&[row])?)?;
    Ok(ctx.dir)
}

pub fn dispatch(cmd: Command) -> Result<PathBuf, CliError> {
    match &cmd {
        Command::Phantom { common, n } => phantom(common, *n),
        Command::Train { common, fold } => train(common, *fold),
        Command::Crossval { common } => crossval(common),
        Command::Ablate { common, grid } => ablate(common, grid),
        Command::Evaluate { common, checkpoints, reference_scores } => evaluate(common, checkpoints, reference_scores.as_deref()),
        Command::Occlusion { common, checkpoint, case, slice, sequence, alpha } => {
            occlusion(common, checkpoint, case, *slice, sequence, *alpha)
        }
    }
}
