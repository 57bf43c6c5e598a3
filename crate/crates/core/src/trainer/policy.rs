//! Behavior cloning of the policy variants.

use super::{fit, Objective, StepRef, TrainOutcome};
use crate::config::RunConfig;
use crate::datastore::{image_tensor, split_train_val, step_refs, Dataset};
use crate::diffcore::{ParamStore, Rng, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::gazenet::crop_fovea;
use crate::policynet::{behavior_clone_loss, match_param_counts, ModelConfig, PolicyInput, PolicyNet, Variant, ACTION_DIM};

pub struct PolicyObjective<'a> {
    pub net: PolicyNet,
    pub data: &'a Dataset,
}

impl Objective for PolicyObjective<'_> {
    fn store(&self) -> &ParamStore {
        &self.net.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.net.store
    }

    fn batch_loss(&self, tape: &mut Tape, batch: &[StepRef], rng: Option<&mut Rng>) -> Result<Var> {
        let f = self.net.config.fovea_size;
        let steps: Vec<_> = batch.iter().map(|&(e, s)| &self.data.episodes[e].steps[s]).collect();
        let foveas: Vec<Tensor> = steps
            .iter()
            .map(|s| crop_fovea(&image_tensor(&s.image, self.data.height, self.data.width)?, s.gaze, f))
            .collect::<Result<_>>()?;
        let inputs: Vec<PolicyInput> = foveas
            .iter()
            .zip(&steps)
            .map(|(fovea, s)| PolicyInput { fovea, state: s.state() })
            .collect();
        let deltas: Vec<[f64; ACTION_DIM]> = steps.iter().map(|s| self.net.config.normalize_action(&s.action)).collect();
        let flags: Vec<[f64; 2]> = steps.iter().map(|s| s.grip.map(f64::from)).collect();
        let fwd = self.net.forward(tape, &inputs, rng)?;
        behavior_clone_loss(tape, fwd.output, &deltas, &flags)
    }
}

/// Model config for `variant`; baselines get their hidden width matched to
/// the transformer built from the same settings. Returns the config and the
/// reference parameter count.
pub fn policy_config_for(base: &ModelConfig, variant: Variant) -> Result<(ModelConfig, usize)> {
    let reference = ModelConfig {
        variant: Variant::Transformer,
        ..base.clone()
    };
    let ref_params = reference.param_count()?;
    if variant == Variant::Transformer {
        return Ok((reference, ref_params));
    }
    let target = ModelConfig {
        variant,
        ..base.clone()
    };
    let m = match_param_counts(&reference, &target)?;
    if !m.within_tolerance {
        return Err(Error::Config(format!(
            "no {} width matches {} parameters",
            variant.name(),
            ref_params
        )));
    }
    Ok((m.config, ref_params))
}

/// Per-dimension mean and population std of the action deltas over `refs`.
/// Dimensions that never vary get a vanishing scale, so their raw
/// prediction stays at the constant.
pub fn action_stats(data: &Dataset, refs: &[StepRef]) -> (Vec<f64>, Vec<f64>) {
    let n = refs.len().max(1) as f64;
    let action = |&(e, s): &StepRef| data.episodes[e].steps[s].action;
    let mut mean = vec![0.0; ACTION_DIM];
    for r in refs {
        for (m, a) in mean.iter_mut().zip(action(r)) {
            *m += a / n;
        }
    }
    let mut var = vec![0.0; ACTION_DIM];
    for r in refs {
        for ((v, a), m) in var.iter_mut().zip(action(r)).zip(&mean) {
            *v += (a - m).powi(2) / n;
        }
    }
    let scale = var.iter().map(|v| v.sqrt().max(1e-9)).collect();
    (mean, scale)
}

pub struct PolicyRun {
    pub net: PolicyNet,
    pub outcome: TrainOutcome,
    pub reference_params: usize,
    pub train_episodes: Vec<usize>,
    pub val_episodes: Vec<usize>,
}

/// Behavior cloning on recorded `(state, action)` pairs, cropping the fovea
/// at the recorded gaze. The data order depends only on `cfg.seed`, so all
/// variants see identical batches.
pub fn train_policy(
    data: &Dataset,
    cfg: &RunConfig,
    variant: Variant,
    on_epoch: impl FnMut(&super::EpochMetrics),
) -> Result<PolicyRun> {
    cfg.validate()?;
    let (mut model, reference_params) = policy_config_for(&cfg.model, variant)?;
    if model.fovea_size > data.height.min(data.width) {
        return Err(Error::Data(format!(
            "fovea {} larger than the {}×{} dataset images",
            model.fovea_size, data.height, data.width
        )));
    }
    let (train_eps, val_eps) = split_train_val(data.episodes.len(), cfg.train.train_fraction, cfg.seed)?;
    let train = step_refs(data, &train_eps);
    let val = step_refs(data, &val_eps);
    if cfg.train.normalize_actions {
        (model.action_mean, model.action_scale) = action_stats(data, &train);
    }
    let mut obj = PolicyObjective {
        net: PolicyNet::new(model, cfg.seed)?,
        data,
    };
    let outcome = fit(&mut obj, &train, &val, &cfg.train, cfg.seed, on_epoch)?;
    Ok(PolicyRun {
        net: obj.net,
        outcome,
        reference_params,
        train_episodes: train_eps,
        val_episodes: val_eps,
    })
}
