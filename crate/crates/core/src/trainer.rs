//! Single-fold training with early stopping on validation accuracy,
//! stratified k-fold cross-validation, checkpoint ensembles and ablation
//! grids.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use idhnet_stats::{auc, binary_metrics, report, ConfusionCounts, FoldScores, ModelScores, ReportRow, ScoredSet, StdMode};
use idhnet_tensor::{rng::derive_seed, Adam, Graph, ParamStore, SeededRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentConfig};
use crate::backbone::BackboneConfig;
use crate::checkpoint::{read_checkpoint, save_checkpoint};
use crate::cmd::CmdConfig;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::{mask_labels, ModelConfig, ModuleSwitches, Network};
use crate::tafe::TafeConfig;
use crate::volume::Case;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    pub patience: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub modules: ModuleSwitches,
    /// Oversample the minority class to a 1:1 epoch composition.
    pub balance_classes: bool,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 100,
            batch_size: 2,
            learning_rate: 1e-4,
            adam: AdamConfig::default(),
            patience: 5,
            seed: 0,
            augment: AugmentConfig::default(),
            modules: ModuleSwitches::default(),
            balance_classes: true,
            eval_batch_size: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 || self.batch_size == 0 || self.max_epochs == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("patience, batch_size, max_epochs and eval_batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        Ok(())
    }
}

/// Everything needed to train one model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub backbone: BackboneConfig,
    pub tafe: TafeConfig,
    pub cmd: CmdConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl Experiment {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            tafe: self.tafe.clone(),
            cmd: self.cmd.clone(),
            modules: self.train.modules.clone(),
        }
        .resolved()
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.loss.validate()?;
        self.train.validate()
    }

    pub fn with_modules(&self, modules: ModuleSwitches) -> Self {
        let mut e = self.clone();
        e.train.modules = modules;
        e
    }
}

/// Early stopping on a maximised metric: stop once `patience` epochs have
/// passed without a strict improvement.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::NEG_INFINITY, best_epoch: 0, epoch: 0 }
    }

    /// Records the next epoch's value; returns whether it is a new best.
    pub fn observe(&mut self, value: f64) -> bool {
        self.epoch += 1;
        if value > self.best {
            self.best = value;
            self.best_epoch = self.epoch;
            true
        } else {
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.epoch - self.best_epoch >= self.patience
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn epochs(&self) -> usize {
        self.epoch
    }
}

/// `(epochs_run, best_epoch)` for a validation trace under early stopping
/// with an epoch cap.
pub fn run_early_stopping(trace: &[f64], patience: usize, max_epochs: usize) -> (usize, usize) {
    let mut es = EarlyStopping::new(patience);
    for &v in trace.iter().take(max_epochs) {
        es.observe(v);
        if es.should_stop() {
            break;
        }
    }
    (es.epochs(), es.best_epoch())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    #[serde(rename = "L_seg")]
    pub l_seg: Option<f64>,
    #[serde(rename = "L_cla")]
    pub l_cla: f64,
    pub val_acc: f64,
    pub val_auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CasePrediction {
    pub case_id: String,
    pub label: u8,
    /// Positive-class (mutant) probability.
    pub prob: f64,
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub fold_index: usize,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub history: Vec<EpochRecord>,
    pub checkpoint: Option<PathBuf>,
    /// Validation predictions of the best-epoch parameters.
    pub val_predictions: Vec<CasePrediction>,
    pub network: Network<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub acc: f64,
    pub f1: f64,
    pub mcc: f64,
    pub auc: Option<f64>,
}

pub fn score_predictions(preds: &[CasePrediction]) -> Result<FoldMetrics> {
    let scores: Vec<f64> = preds.iter().map(|p| p.prob).collect();
    let labels: Vec<u8> = preds.iter().map(|p| p.label).collect();
    let m = binary_metrics(&ConfusionCounts::from_scores(&scores, &labels, 0.5))?;
    let set = ScoredSet::new(scores, labels)?;
    Ok(FoldMetrics { acc: m.acc, f1: m.f1, mcc: m.mcc, auc: auc(&set).ok() })
}

fn labels_of(cases: &[Case]) -> Result<Vec<u8>> {
    cases
        .iter()
        .map(|c| c.idh_label.ok_or_else(|| Error::MissingLabel(c.id.clone())))
        .collect()
}

/// Indices for one epoch: every case once, plus minority cases re-drawn
/// (cycling through a shuffled list) until both classes are equally
/// represented.
pub fn epoch_order(labels: &[u8], balance: bool, rng: &mut SeededRng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..labels.len()).collect();
    if balance {
        let pos: Vec<usize> = order.iter().copied().filter(|&i| labels[i] == 1).collect();
        let neg: Vec<usize> = order.iter().copied().filter(|&i| labels[i] != 1).collect();
        let (mut minority, majority) = if pos.len() < neg.len() { (pos, neg) } else { (neg, pos) };
        if !minority.is_empty() && minority.len() < majority.len() {
            rng.shuffle(&mut minority);
            let extra = majority.len() - minority.len();
            order.extend(minority.iter().cycle().take(extra));
        }
    }
    rng.shuffle(&mut order);
    order
}

pub fn predict_cases(net: &Network<f32>, cases: &[Case], batch: usize) -> Result<Vec<CasePrediction>> {
    let refs: Vec<&Case> = cases.iter().collect();
    let probs = net.predict(&refs, batch)?;
    Ok(cases
        .iter()
        .zip(probs)
        .map(|(c, p)| CasePrediction { case_id: c.id.clone(), label: c.idh_label.unwrap_or(0), prob: p[1] })
        .collect())
}

fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::write(path, e))?;
    for rec in history {
        writeln!(f, "{}", serde_json::to_string(rec).expect("record serializes")).map_err(|e| Error::write(path, e))?;
    }
    Ok(())
}

/// Trains on `train`, selecting the epoch with the best validation accuracy.
/// Writes `history.jsonl` and `best.ckpt` into `out_dir` when given.
pub fn train_fold(train: &[Case], val: &[Case], exp: &Experiment, fold_index: usize, out_dir: Option<&Path>) -> Result<FoldResult> {
    exp.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptySplit(format!("fold {fold_index}: {} train / {} val cases", train.len(), val.len())));
    }
    let train_ids: HashSet<&str> = train.iter().map(|c| c.id.as_str()).collect();
    if let Some(c) = val.iter().find(|c| train_ids.contains(c.id.as_str())) {
        return Err(Error::Data(format!("case {} is in both train and validation sets", c.id)));
    }
    let train_labels = labels_of(train)?;
    labels_of(val)?;
    let tc = &exp.train;
    let model_cfg = exp.model_config();
    let mut net: Network<f32> = Network::new(&model_cfg, derive_seed(tc.seed, 1))?;
    let mut opt = Adam::with_betas(&net.params, tc.learning_rate, tc.adam.beta1, tc.adam.beta2, tc.adam.eps);
    let mut data_rng = SeededRng::new(derive_seed(tc.seed, 2));
    let mut dropout_rng = SeededRng::new(derive_seed(tc.seed, 3));
    let needs_masks = model_cfg.modules.seg_supervision_on && exp.loss.alpha > 0.0;

    let mut stopper = EarlyStopping::new(tc.patience);
    let mut best: Option<ParamStore<f32>> = None;
    let mut history = Vec::new();
    for epoch in 1..=tc.max_epochs {
        let order = epoch_order(&train_labels, tc.balance_classes, &mut data_rng);
        let (mut sum_total, mut sum_seg, mut sum_cla, mut batches) = (0.0, 0.0, 0.0, 0usize);
        let mut any_seg = false;
        for (bi, chunk) in order.chunks(tc.batch_size).enumerate() {
            let batch: Vec<Case> = chunk.iter().map(|&i| augment(&train[i], &tc.augment, &mut data_rng)).collect();
            let refs: Vec<&Case> = batch.iter().collect();
            let x = net.input_tensor(&refs)?;
            let masks = if needs_masks {
                Some(mask_labels(&refs).ok_or_else(|| Error::Data("segmentation supervision needs masks on every training case".into()))?)
            } else {
                None
            };
            let labels: Vec<u8> = chunk.iter().map(|&i| train_labels[i]).collect();
            let mut g = Graph::new();
            let p = net.params.bind(&mut g);
            let xv = g.constant(x);
            let out = net.forward(&mut g, &p, xv, Some(&mut dropout_rng));
            let terms = net.loss(&mut g, &out, masks.as_deref(), &labels, &exp.loss)?;
            let total = g.value(terms.total).item() as f64;
            if !total.is_finite() {
                return Err(Error::Divergence(format!(
                    "fold {fold_index} epoch {epoch} batch {bi}: L_total = {total} (L_cla = {})",
                    g.value(terms.cla).item()
                )));
            }
            sum_total += total;
            sum_cla += g.value(terms.cla).item() as f64;
            if let Some(s) = terms.seg {
                sum_seg += g.value(s).item() as f64;
                any_seg = true;
            }
            batches += 1;
            let grads = g.backward(terms.total);
            let grads = p.gradients(&grads, &net.params);
            opt.step(&mut net.params, &grads);
        }
        let preds = predict_cases(&net, val, tc.eval_batch_size)?;
        let m = score_predictions(&preds)?;
        let nb = batches as f64;
        log::info!("fold {fold_index} epoch {epoch}: L_total {:.4} val_acc {:.3} val_auc {:?}", sum_total / nb, m.acc, m.auc);
        history.push(EpochRecord {
            epoch,
            l_total: sum_total / nb,
            l_seg: any_seg.then(|| sum_seg / nb),
            l_cla: sum_cla / nb,
            val_acc: m.acc,
            val_auc: m.auc,
        });
        if stopper.observe(m.acc) {
            best = Some(net.params.clone());
        }
        if stopper.should_stop() {
            break;
        }
    }
    net.params = best.expect("at least one epoch ran");
    let val_predictions = predict_cases(&net, val, tc.eval_batch_size)?;
    let mut checkpoint = None;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::write(dir, e))?;
        write_history(&dir.join("history.jsonl"), &history)?;
        let path = dir.join("best.ckpt");
        save_checkpoint(&net, &path)?;
        checkpoint = Some(path);
    }
    Ok(FoldResult {
        fold_index,
        best_epoch: stopper.best_epoch(),
        epochs_run: stopper.epochs(),
        history,
        checkpoint,
        val_predictions,
        network: net,
    })
}

/// Seeded stratified fold assignment: each class is shuffled and dealt
/// round-robin, continuing the deal across classes so fold sizes differ by
/// at most one.
pub fn stratified_folds(labels: &[u8], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 || k > labels.len() {
        return Err(Error::Stratification(format!("{k} folds for {} cases", labels.len())));
    }
    let mut rng = SeededRng::new(derive_seed(seed, 0x5EED));
    let mut fold = vec![0; labels.len()];
    let mut next = 0;
    for class in [1u8, 0u8] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| (labels[i] == 1) == (class == 1)).collect();
        rng.shuffle(&mut idx);
        for i in idx {
            fold[i] = next % k;
            next += 1;
        }
    }
    Ok(fold)
}

#[derive(Clone, Debug)]
pub struct CvResult {
    pub folds: Vec<FoldResult>,
    pub fold_metrics: Vec<FoldMetrics>,
    /// Mean ± std of ACC/F1/MCC/AUC over folds.
    pub summary: ReportRow,
}

impl CvResult {
    pub fn mean_auc(&self) -> f64 {
        self.summary.auc_mean
    }
}

fn fold_scores(folds: &[FoldResult]) -> Vec<FoldScores> {
    folds
        .iter()
        .map(|f| FoldScores {
            case_ids: f.val_predictions.iter().map(|p| p.case_id.clone()).collect(),
            scores: f.val_predictions.iter().map(|p| p.prob).collect(),
            labels: f.val_predictions.iter().map(|p| p.label).collect(),
        })
        .collect()
}

fn with_pool<R: Send>(jobs: usize, f: impl FnOnce() -> R + Send) -> R {
    match rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

/// Stratified k-fold cross-validation. Fold `f` trains with seed
/// `derive_seed(train.seed, f + 1)`; folds run on up to `jobs` threads and the
/// results do not depend on `jobs`.
pub fn cross_validate(cases: &[Case], k: usize, exp: &Experiment, jobs: usize, out_dir: Option<&Path>) -> Result<CvResult> {
    exp.validate()?;
    let labels = labels_of(cases)?;
    let minority = labels.iter().filter(|&&l| l == 1).count().min(labels.iter().filter(|&&l| l != 1).count());
    if k > minority {
        return Err(Error::Stratification(format!("{k} folds but the minority class has {minority} cases")));
    }
    let assign = stratified_folds(&labels, k, exp.train.seed)?;
    let run = |f: usize| -> Result<FoldResult> {
        let train: Vec<Case> = cases.iter().zip(&assign).filter(|(_, &a)| a != f).map(|(c, _)| c.clone()).collect();
        let val: Vec<Case> = cases.iter().zip(&assign).filter(|(_, &a)| a == f).map(|(c, _)| c.clone()).collect();
        let mut e = exp.clone();
        e.train.seed = derive_seed(exp.train.seed, f as u64 + 1);
        let dir = out_dir.map(|d| d.join(format!("fold{f}")));
        train_fold(&train, &val, &e, f, dir.as_deref())
    };
    let folds: Vec<FoldResult> = with_pool(jobs, || (0..k).into_par_iter().map(run).collect::<Result<Vec<_>>>())?;
    let fold_metrics = folds.iter().map(|f| score_predictions(&f.val_predictions)).collect::<Result<Vec<_>>>()?;
    let rep = report(&[ModelScores { name: "cv".into(), folds: fold_scores(&folds) }], None, StdMode::Sample)?;
    Ok(CvResult { folds, fold_metrics, summary: rep.rows.into_iter().next().expect("one model row") })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsemblePrediction {
    /// Per case, class probabilities averaged over members.
    pub mean: Vec<Vec<f64>>,
    /// Per member, per case class probabilities.
    pub members: Vec<Vec<Vec<f64>>>,
}

/// Arithmetic mean of member softmax outputs. Members must share one
/// architecture digest.
pub fn predict_ensemble(nets: &[Network<f32>], cases: &[Case], batch: usize) -> Result<EnsemblePrediction> {
    let first = nets.first().ok_or_else(|| Error::Config("ensemble needs at least one model".into()))?;
    let digest = first.cfg.digest();
    if let Some(n) = nets.iter().find(|n| n.cfg.digest() != digest) {
        return Err(Error::CheckpointMismatch(format!("ensemble digest {} vs {digest}", n.cfg.digest())));
    }
    let refs: Vec<&Case> = cases.iter().collect();
    let members = nets.iter().map(|n| n.predict(&refs, batch)).collect::<Result<Vec<_>>>()?;
    let mean = (0..cases.len())
        .map(|i| {
            let k = members[0][i].len();
            (0..k)
                .map(|j| members.iter().map(|m| m[i][j]).sum::<f64>() / members.len() as f64)
                .collect()
        })
        .collect();
    Ok(EnsemblePrediction { mean, members })
}

/// Loads checkpoints and ensembles them; see [`predict_ensemble`].
pub fn predict_ensemble_files(paths: &[PathBuf], cases: &[Case], batch: usize) -> Result<EnsemblePrediction> {
    let nets = paths
        .iter()
        .map(|p| read_checkpoint(p)?.into_network())
        .collect::<Result<Vec<_>>>()?;
    predict_ensemble(&nets, cases, batch)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationCell {
    pub name: String,
    pub modules: ModuleSwitches,
}

/// TAFE only / CMD only / TAFE + CMD.
pub fn module_grid() -> Vec<AblationCell> {
    let cell = |name: &str, tafe_on, cmd_on| AblationCell {
        name: name.into(),
        modules: ModuleSwitches { tafe_on, cmd_on, tafe_depth: None, seg_supervision_on: true },
    };
    vec![cell("TAFE", true, false), cell("CMD", false, true), cell("TAFE+CMD", true, true)]
}

/// TAFE-k (segmentation-supervised) and SwinT-k (α = 0, CMD off), k = 1..4.
pub fn depth_grid() -> Vec<AblationCell> {
    let mut cells = Vec::new();
    for k in 1..=4 {
        for (name, seg) in [("TAFE", true), ("SwinT", false)] {
            cells.push(AblationCell {
                name: format!("{name}-{k}"),
                modules: ModuleSwitches { tafe_on: true, cmd_on: false, tafe_depth: Some(k), seg_supervision_on: seg },
            });
        }
    }
    cells
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldRow {
    pub config: String,
    pub fold: usize,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub acc: f64,
    pub f1: f64,
    pub mcc: f64,
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<ReportRow>,
    pub fold_rows: Vec<FoldRow>,
}

pub fn fold_rows(config: &str, cv: &CvResult) -> Vec<FoldRow> {
    cv.folds
        .iter()
        .zip(&cv.fold_metrics)
        .map(|(f, m)| FoldRow {
            config: config.to_string(),
            fold: f.fold_index,
            best_epoch: f.best_epoch,
            epochs_run: f.epochs_run,
            acc: m.acc,
            f1: m.f1,
            mcc: m.mcc,
            auc: m.auc,
        })
        .collect()
}

/// Cross-validates every grid cell with the same seed (hence the same
/// folds and initial streams).
pub fn run_ablation(cases: &[Case], grid: &[AblationCell], k: usize, exp: &Experiment, jobs: usize, out_dir: Option<&Path>) -> Result<AblationTable> {
    let mut table = AblationTable::default();
    for cell in grid {
        let e = exp.with_modules(cell.modules.clone());
        let dir = out_dir.map(|d| d.join(sanitize(&cell.name)));
        let cv = cross_validate(cases, k, &e, jobs, dir.as_deref())?;
        table.fold_rows.extend(fold_rows(&cell.name, &cv));
        let mut row = cv.summary.clone();
        row.model = cell.name.clone();
        table.rows.push(row);
    }
    Ok(table)
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

pub fn fold_rows_csv(rows: &[FoldRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory csv");
    }
    if rows.is_empty() {
        return "config,fold,best_epoch,epochs_run,acc,f1,mcc,auc\n".into();
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
}

pub fn summary_csv(rows: &[ReportRow]) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(["config", "folds", "acc_mean", "acc_std", "f1_mean", "f1_std", "mcc_mean", "mcc_std", "auc_mean", "auc_std"])
        .expect("in-memory csv");
    for r in rows {
        w.write_record([
            r.model.clone(),
            r.folds.to_string(),
            r.acc_mean.to_string(),
            r.acc_std.to_string(),
            r.f1_mean.to_string(),
            r.f1_std.to_string(),
            r.mcc_mean.to_string(),
            r.mcc_std.to_string(),
            r.auc_mean.to_string(),
            r.auc_std.to_string(),
        ])
        .expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn early_stopping_worked_trace() {
        assert_eq!(run_early_stopping(&[0.6, 0.7, 0.7, 0.7, 0.7, 0.7, 0.7], 5, 100), (7, 2));
        assert_eq!(run_early_stopping(&[0.5, 0.6], 5, 2), (2, 2));
    }

    #[test]
    fn balanced_epoch_order() {
        let labels = [1, 0, 0, 0, 0, 1, 0];
        let mut rng = SeededRng::new(4);
        let order = epoch_order(&labels, true, &mut rng);
        assert_eq!(order.len(), 10);
        assert_eq!(order.iter().filter(|&&i| labels[i] == 1).count(), 5);
        for i in 0..labels.len() {
            assert!(order.contains(&i));
        }
    }

    #[test]
    fn stratified_small_examples() {
        let folds = stratified_folds(&[1, 0, 1, 0], 2, 3).unwrap();
        for f in 0..2 {
            let members: Vec<usize> = (0..4).filter(|&i| folds[i] == f).collect();
            assert_eq!(members.len(), 2);
            assert_eq!(members.iter().filter(|&&i| [1, 0, 1, 0][i] == 1).count(), 1);
        }
        let labels = [1, 1, 1, 0, 0, 0, 0, 0, 0, 0];
        let folds = stratified_folds(&labels, 5, 9).unwrap();
        for f in 0..5 {
            assert!(folds.contains(&f));
        }
        assert_eq!(folds, stratified_folds(&labels, 5, 9).unwrap());
    }
}
