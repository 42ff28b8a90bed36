//! End-to-end helpers shared by the CLI and experiments.

use rayon::prelude::*;

use crate::abmil::model::{attention_forward, AttentionModel};
use crate::abmil::train::{monte_carlo_cv, prepare_bags, CvConfig, CvResult, LabeledBag};
use crate::data::{read_embeddings, KeyMatrix, Manifest};
use crate::error::{Error, Result};
use crate::keylearn::KeyLearnConfig;
use crate::sii::SiiConfig;

/// A trained model with the key matrix and inference settings it was
/// trained with.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub model: AttentionModel,
    pub keys: Option<KeyMatrix>,
    pub sii: Option<SiiConfig>,
}

impl Pipeline {
    pub fn from_cv(result: &CvResult, cfg: &CvConfig) -> Self {
        let fold = result.selected_fold();
        Self {
            model: fold.training.model.clone(),
            keys: fold.keys.clone(),
            sii: cfg.sii,
        }
    }

    /// Positive-class probability per bag.
    pub fn predict(&self, bags: &[LabeledBag]) -> Result<Vec<f64>> {
        let refs: Vec<&LabeledBag> = bags.iter().collect();
        let prepared = prepare_bags(&refs, self.keys.as_ref(), self.sii.as_ref())?;
        prepared
            .par_iter()
            .map(|b| Ok(attention_forward(&b.instances, &self.model)?.probability()))
            .collect()
    }
}

/// Cross-validated training followed by prediction on held-out bags.
pub fn fit_predict(
    train: &[LabeledBag],
    test: &[LabeledBag],
    cfg: &CvConfig,
) -> Result<(CvResult, Vec<f64>)> {
    let cv = monte_carlo_cv(train, cfg)?;
    let scores = Pipeline::from_cv(&cv, cfg).predict(test)?;
    Ok((cv, scores))
}

/// Reads every bag listed in a manifest.
pub fn load_bags(manifest: &Manifest) -> Result<Vec<LabeledBag>> {
    manifest
        .records
        .iter()
        .map(|r| {
            Ok(LabeledBag {
                id: r.bag_id.clone(),
                label: r.label,
                instances: read_embeddings(&r.embedding_path)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationRow {
    pub t_per_bag: usize,
    pub top_k: usize,
    pub keep_ratio: f64,
    pub mean_val_auc: f64,
}

/// Cross-validates every `(t, K, r)` combination with otherwise identical
/// settings, in grid order (t outermost).
pub fn ablate(
    bags: &[LabeledBag],
    grid_t: &[usize],
    grid_k: &[usize],
    grid_r: &[f64],
    base: &CvConfig,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &t in grid_t {
        for &k in grid_k {
            for &r in grid_r {
                let cfg = CvConfig {
                    keys: KeyLearnConfig {
                        t_per_bag: t,
                        ..base.keys
                    },
                    sii: Some(SiiConfig {
                        top_k: k,
                        keep_ratio: r,
                    }),
                    ..*base
                };
                let cv = monte_carlo_cv(bags, &cfg)?;
                let mean_val_auc = cv.mean_val_auc().ok_or(Error::SingleClass)?;
                rows.push(AblationRow {
                    t_per_bag: t,
                    top_k: k,
                    keep_ratio: r,
                    mean_val_auc,
                });
            }
        }
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("t_per_bag,top_k,keep_ratio,mean_val_auc\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.t_per_bag, r.top_k, r.keep_ratio, r.mean_val_auc
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abmil::TrainConfig;
    use crate::synth::{generate_dataset, InstanceCount, SynthConfig};

    fn small_bags() -> Vec<LabeledBag> {
        generate_dataset(&SynthConfig {
            dim: 4,
            bags_per_class: 6,
            instances: InstanceCount::Fixed(60),
            positive_rates: vec![0.2],
            ..Default::default()
        })
        .unwrap()
    }

    fn quick() -> CvConfig {
        CvConfig {
            folds: 2,
            val_frac: 0.2,
            train: TrainConfig {
                max_epochs: 2,
                attention_dim: 4,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn predictions_are_probabilities_in_input_order() {
        let bags = small_bags();
        let (cv, scores) = fit_predict(&bags, &bags, &quick()).unwrap();
        assert_eq!(scores.len(), bags.len());
        assert!(scores.iter().all(|p| (0.0..=1.0).contains(p)));
        let pipe = Pipeline::from_cv(&cv, &quick());
        assert_eq!(pipe.predict(&bags[3..4]).unwrap(), vec![scores[3]]);
        assert!(pipe.keys.is_some());
    }

    #[test]
    fn ablation_rows_follow_grid_order() {
        let rows = ablate(&small_bags(), &[5, 10], &[3], &[0.5, 1.0], &quick()).unwrap();
        let grid: Vec<(usize, f64)> = rows.iter().map(|r| (r.t_per_bag, r.keep_ratio)).collect();
        assert_eq!(grid, vec![(5, 0.5), (5, 1.0), (10, 0.5), (10, 1.0)]);
        let csv = ablation_csv(&rows);
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.lines().nth(1).unwrap().starts_with("5,3,0.5,"));
    }
}
