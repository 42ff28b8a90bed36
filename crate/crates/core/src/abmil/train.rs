//! Training loop, early stopping and Monte Carlo cross-validation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::{adam_step, AdamState};
use super::model::{
    attention_forward, bce, loss_and_gradients, sigmoid, AttentionModel, DEFAULT_ATTENTION_DIM,
};
use crate::data::{EmbeddingMatrix, KeyMatrix};
use crate::error::{Error, Result};
use crate::eval::roc_auc;
use crate::keylearn::{build_key_matrix, KeyLearnConfig};
use crate::sii::{sii_bag, SiiConfig};

const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;
const SPLIT_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub attention_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            weight_decay: 1e-5,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            attention_dim: DEFAULT_ATTENTION_DIM,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.attention_dim == 0 {
            return Err(Error::Config(
                "attention dimension must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// A bag with its bag-level label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBag {
    pub id: String,
    pub label: u8,
    pub instances: EmbeddingMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auc: Option<f64>,
}

/// Stops once `patience` epochs pass without a strictly lower validation loss.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best_loss: f64,
    best_epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_loss: f64::INFINITY,
            best_epoch: 0,
        }
    }

    /// Records an epoch's validation loss; returns true when it is a new minimum.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> bool {
        if val_loss < self.best_loss {
            self.best_loss = val_loss;
            self.best_epoch = epoch;
            true
        } else {
            false
        }
    }

    pub fn should_stop(&self, epoch: usize) -> bool {
        epoch - self.best_epoch >= self.patience
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Debug, Clone)]
pub struct FoldTraining {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: AttentionModel,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl FoldTraining {
    pub fn stopped_epoch(&self) -> usize {
        self.log.last().map_or(0, |r| r.epoch)
    }
}

fn has_both_classes(bags: &[LabeledBag]) -> bool {
    bags.iter().any(|b| b.label == 0) && bags.iter().any(|b| b.label == 1)
}

/// Mean loss and AUC of a model over a set of bags.
pub fn evaluate_bags(model: &AttentionModel, bags: &[LabeledBag]) -> Result<(f64, Option<f64>)> {
    let mut loss = 0.0;
    let mut probs = Vec::with_capacity(bags.len());
    let mut labels = Vec::with_capacity(bags.len());
    for b in bags {
        let f = attention_forward(&b.instances, model)?;
        loss += bce(f.logit, b.label);
        probs.push(sigmoid(f.logit));
        labels.push(b.label);
    }
    let auc = if has_both_classes(bags) {
        Some(roc_auc(&probs, &labels)?)
    } else {
        None
    };
    Ok((loss / bags.len() as f64, auc))
}

pub fn train_fold(
    train: &[LabeledBag],
    val: &[LabeledBag],
    cfg: &TrainConfig,
) -> Result<FoldTraining> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Invalid(
            "training and validation splits must be non-empty".into(),
        ));
    }
    if !has_both_classes(train) {
        return Err(Error::SingleClass);
    }
    let dim = train[0].instances.dim();
    if let Some(b) = train.iter().chain(val).find(|b| b.instances.dim() != dim) {
        return Err(Error::DimMismatch {
            expected: dim,
            found: b.instances.dim(),
        });
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_rng.set_stream(INIT_STREAM);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);

    let mut model = AttentionModel::init(dim, cfg.attention_dim, &mut init_rng)?;
    let mut state = AdamState::for_model(&model);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.clone();
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut train_loss = 0.0;
        for &i in &order {
            let bag = &train[i];
            let (loss, grads) = loss_and_gradients(&bag.instances, bag.label, &model)?;
            train_loss += loss;
            adam_step(
                &mut model,
                &grads,
                &mut state,
                cfg.learning_rate,
                cfg.weight_decay,
            );
        }
        let (val_loss, val_auc) = evaluate_bags(&model, val)?;
        log.push(EpochRecord {
            epoch,
            train_loss: train_loss / train.len() as f64,
            val_loss,
            val_auc,
        });
        if stopper.observe(epoch, val_loss) {
            best = model.clone();
        }
        if stopper.should_stop(epoch) {
            break;
        }
    }
    Ok(FoldTraining {
        model: best,
        log,
        best_epoch: stopper.best_epoch(),
    })
}

/// Random train/validation split, stratified by label. Each class puts
/// `round(val_frac * n_class)` bags in validation, clamped so both sides
/// keep at least one bag of the class.
pub fn stratified_split(
    labels: &[u8],
    val_frac: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(val_frac > 0.0 && val_frac < 1.0) {
        return Err(Error::Config(format!(
            "val_frac must be in (0, 1), got {val_frac}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SPLIT_STREAM);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.len() < 2 {
            return Err(Error::Invalid(format!(
                "class {class} has {} bags; at least 2 are needed to split",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let n_val = ((val_frac * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvConfig {
    pub folds: usize,
    pub val_frac: f64,
    pub seed: u64,
    pub keys: KeyLearnConfig,
    /// `None` trains on whole bags.
    pub sii: Option<SiiConfig>,
    pub train: TrainConfig,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            val_frac: 0.1,
            seed: 0,
            keys: KeyLearnConfig::default(),
            sii: Some(SiiConfig::default()),
            train: TrainConfig::default(),
        }
    }
}

impl CvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds == 0 {
            return Err(Error::Config("folds must be at least 1".into()));
        }
        if !(self.val_frac > 0.0 && self.val_frac < 1.0) {
            return Err(Error::Config(format!(
                "val_frac must be in (0, 1), got {}",
                self.val_frac
            )));
        }
        self.keys.validate()?;
        if let Some(s) = &self.sii {
            s.validate()?;
        }
        self.train.validate()
    }
}

#[derive(Debug, Clone)]
pub struct FoldReport {
    pub fold: usize,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub keys: Option<KeyMatrix>,
    pub training: FoldTraining,
    /// Validation AUC of the restored (best-loss) model.
    pub val_auc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct CvResult {
    pub folds: Vec<FoldReport>,
    pub selected: usize,
}

impl CvResult {
    pub fn selected_fold(&self) -> &FoldReport {
        &self.folds[self.selected]
    }

    pub fn mean_val_auc(&self) -> Option<f64> {
        let aucs: Option<Vec<f64>> = self.folds.iter().map(|f| f.val_auc).collect();
        aucs.map(|a| a.iter().sum::<f64>() / a.len() as f64)
    }

    /// Epoch log CSV `fold,epoch,train_loss,val_loss,val_auc`.
    pub fn epoch_log_csv(&self) -> String {
        let mut out = String::from("fold,epoch,train_loss,val_loss,val_auc\n");
        for f in &self.folds {
            for r in &f.training.log {
                let auc = r.val_auc.map(|a| a.to_string()).unwrap_or_default();
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    f.fold, r.epoch, r.train_loss, r.val_loss, auc
                ));
            }
        }
        out
    }
}

/// Applies salient instance inference (when configured) to every bag, with
/// the selected instances kept in their original order.
pub fn prepare_bags(
    bags: &[&LabeledBag],
    keys: Option<&KeyMatrix>,
    sii: Option<&SiiConfig>,
) -> Result<Vec<LabeledBag>> {
    bags.iter()
        .map(|b| {
            let instances = match (keys, sii) {
                (Some(k), Some(cfg)) => sii_bag(&b.instances, k, cfg, &b.id)?.in_source_order(),
                _ => b.instances.clone(),
            };
            Ok(LabeledBag {
                id: b.id.clone(),
                label: b.label,
                instances,
            })
        })
        .collect()
}

/// Runs one fold: keys from the fold's training negatives, inference on
/// both splits, training.
pub fn run_fold(bags: &[LabeledBag], fold: usize, cfg: &CvConfig) -> Result<FoldReport> {
    let fold_seed = cfg.seed.wrapping_add(fold as u64);
    let labels: Vec<u8> = bags.iter().map(|b| b.label).collect();
    let (train_idx, val_idx) = stratified_split(&labels, cfg.val_frac, fold_seed)?;
    let train_raw: Vec<&LabeledBag> = train_idx.iter().map(|&i| &bags[i]).collect();
    let val_raw: Vec<&LabeledBag> = val_idx.iter().map(|&i| &bags[i]).collect();

    let keys = match &cfg.sii {
        Some(_) => {
            let negatives: Vec<EmbeddingMatrix> = train_raw
                .iter()
                .filter(|b| b.label == 0)
                .map(|b| b.instances.clone())
                .collect();
            Some(build_key_matrix(&negatives, &cfg.keys)?)
        }
        None => None,
    };
    let train = prepare_bags(&train_raw, keys.as_ref(), cfg.sii.as_ref())?;
    let val = prepare_bags(&val_raw, keys.as_ref(), cfg.sii.as_ref())?;
    let train_cfg = TrainConfig {
        seed: fold_seed,
        ..cfg.train
    };
    let training = train_fold(&train, &val, &train_cfg)?;
    let (_, val_auc) = evaluate_bags(&training.model, &val)?;
    Ok(FoldReport {
        fold,
        train_ids: train.iter().map(|b| b.id.clone()).collect(),
        val_ids: val.iter().map(|b| b.id.clone()).collect(),
        keys,
        training,
        val_auc,
    })
}

/// Repeated stratified random splits; the fold with the best validation AUC
/// is selected (lowest fold index on ties).
pub fn monte_carlo_cv(bags: &[LabeledBag], cfg: &CvConfig) -> Result<CvResult> {
    cfg.validate()?;
    let folds = (0..cfg.folds)
        .map(|f| run_fold(bags, f, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut selected = 0;
    for (i, f) in folds.iter().enumerate() {
        let best = folds[selected].val_auc.unwrap_or(f64::NEG_INFINITY);
        if f.val_auc.unwrap_or(f64::NEG_INFINITY) > best {
            selected = i;
        }
    }
    Ok(CvResult { folds, selected })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn early_stopping_arithmetic() {
        let losses = [
            1.0, 0.8, 0.5, 0.5, 0.6, 0.5, 0.7, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5,
        ];
        let mut s = EarlyStopping::new(10);
        let mut stopped = None;
        for (i, &l) in losses.iter().enumerate() {
            let epoch = i + 1;
            s.observe(epoch, l);
            if s.should_stop(epoch) {
                stopped = Some(epoch);
                break;
            }
        }
        assert_eq!(s.best_epoch(), 3);
        assert_eq!(stopped, Some(13));
    }

    #[test]
    fn split_sizes() {
        let labels: Vec<u8> = (0..20).map(|i| (i % 2) as u8).collect();
        let (train, val) = stratified_split(&labels, 0.1, 3).unwrap();
        assert_eq!((train.len(), val.len()), (18, 2));
        assert_eq!(val.iter().filter(|&&i| labels[i] == 1).count(), 1);
        assert_eq!(stratified_split(&labels, 0.1, 3).unwrap(), (train, val));
    }

    #[test]
    fn split_needs_two_per_class() {
        assert!(stratified_split(&[0, 0, 1], 0.1, 0).is_err());
        assert!(stratified_split(&[0, 0, 1, 1], 0.0, 0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig {
            learning_rate: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            patience: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            max_epochs: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(CvConfig {
            folds: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(CvConfig::default().validate().is_ok());
    }
}
