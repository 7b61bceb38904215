use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::{accumulate, adam_step, AdamConfig, AdamState, ParameterSet};

/// Mini-batch Adam with early stopping on the validation loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    /// Stop after this many epochs without a new validation minimum.
    pub patience: usize,
    /// Hard cap on the number of epochs.
    pub max_epochs: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 10,
            patience: 200,
            max_epochs: 5000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub epochs: usize,
    /// 0 when the initial parameters were never beaten.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Mean training loss during the best epoch.
    pub train_loss_at_best: Option<f64>,
    pub initial_val_loss: f64,
    /// `(train, validation)` loss per epoch.
    pub history: Vec<(f64, f64)>,
}

/// Trains `params` on the samples `train`, keeping the parameters with the
/// smallest mean loss over `val`. `loss_grad(p, i)` returns the loss of
/// sample `i` and its gradient; `loss(p, i)` only the loss.
pub(crate) fn fit<P, LG, L>(
    mut params: P,
    train: &[usize],
    val: &[usize],
    cfg: &FitConfig,
    shuffle_seed: u64,
    mut loss_grad: LG,
    mut loss: L,
) -> Result<(P, FitReport)>
where
    P: ParameterSet + Clone,
    LG: FnMut(&P, usize) -> Result<(f64, P)>,
    L: FnMut(&P, usize) -> Result<f64>,
{
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("training needs non-empty training and validation splits".into()));
    }
    if cfg.batch_size == 0 || cfg.max_epochs == 0 {
        return Err(Error::Config("batch_size and max_epochs must be positive".into()));
    }
    let mut val_loss = |p: &P| -> Result<f64> {
        let mut total = 0.0;
        for &i in val {
            total += loss(p, i)?;
        }
        Ok(total / val.len() as f64)
    };
    let initial = val_loss(&params)?;
    let mut best = (params.clone(), initial, 0usize, None);
    let mut state = AdamState::new(params.n_params());
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    let mut order = train.to_vec();
    let mut history = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut train_total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Option<P> = None;
            let w = 1.0 / batch.len() as f64;
            for &i in batch {
                let (l, g) = loss_grad(&params, i)?;
                train_total += l;
                match &mut grads {
                    None => {
                        let mut g0 = g;
                        for s in g0.slices_mut() {
                            s.iter_mut().for_each(|x| *x *= w);
                        }
                        grads = Some(g0);
                    }
                    Some(acc) => accumulate(acc, &g, w),
                }
            }
            adam_step(&mut params, grads.as_ref().expect("batch is non-empty"), &mut state, &cfg.adam)?;
        }
        let train_loss = train_total / order.len() as f64;
        let v = val_loss(&params)?;
        if !v.is_finite() {
            return Err(Error::numerical(format!("validation loss became {v} at epoch {epoch}")));
        }
        history.push((train_loss, v));
        if v < best.1 {
            best = (params.clone(), v, epoch, Some(train_loss));
        }
        log::debug!("epoch {epoch}: train {train_loss:.4e}, validation {v:.4e}");
        if epoch - best.2 >= cfg.patience {
            break;
        }
    }
    let report = FitReport {
        epochs: history.len(),
        best_epoch: best.2,
        best_val_loss: best.1,
        train_loss_at_best: best.3,
        initial_val_loss: initial,
        history,
    };
    Ok((best.0, report))
}
