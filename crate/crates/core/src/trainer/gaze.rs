//! Gaze predictor training.

use rand::Rng as _;

use super::{fit, Objective, StepRef, TrainOutcome};
use crate::config::RunConfig;
use crate::datastore::{image_tensor, split_train_val, step_refs, Dataset};
use crate::diffcore::{ParamStore, Rng, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::gazenet::{select_gaze, GazeInput, GazeNet};

pub struct GazeObjective<'a> {
    pub net: GazeNet,
    pub data: &'a Dataset,
    /// Lower end, radians, of the open-angle resampling; `None` disables it.
    pub grip_jitter: Option<f64>,
}

impl GazeObjective<'_> {
    fn images(&self, batch: &[StepRef]) -> Result<Vec<Tensor>> {
        batch
            .iter()
            .map(|&(e, s)| image_tensor(&self.data.episodes[e].steps[s].image, self.data.height, self.data.width))
            .collect()
    }
}

impl Objective for GazeObjective<'_> {
    fn store(&self) -> &ParamStore {
        &self.net.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.net.store
    }

    fn batch_loss(&self, tape: &mut Tape, batch: &[StepRef], mut rng: Option<&mut Rng>) -> Result<Var> {
        let images = self.images(batch)?;
        let steps: Vec<_> = batch.iter().map(|&(e, s)| &self.data.episodes[e].steps[s]).collect();
        let inputs: Vec<GazeInput> = images
            .iter()
            .zip(&steps)
            .map(|(image, st)| {
                let mut grippers = st.grippers();
                if let (Some(lo), Some(rng)) = (self.grip_jitter, rng.as_deref_mut()) {
                    // a gripper only grasps once nearly shut, so the label
                    // does not depend on how far open it is
                    for g in grippers.iter_mut().filter(|g| **g > lo) {
                        *g = rng.random_range(lo..=*g);
                    }
                }
                GazeInput { image, grippers }
            })
            .collect();
        let targets: Vec<[f64; 2]> = steps.iter().map(|s| s.gaze).collect();
        self.net.loss(tape, &inputs, &targets)
    }
}

pub struct GazeRun {
    pub net: GazeNet,
    pub outcome: TrainOutcome,
    pub train_episodes: Vec<usize>,
    pub val_episodes: Vec<usize>,
}

/// Trains the gaze predictor on recorded gaze labels.
pub fn train_gaze(
    data: &Dataset,
    cfg: &RunConfig,
    on_epoch: impl FnMut(&super::EpochMetrics),
) -> Result<GazeRun> {
    cfg.validate()?;
    if data.height != cfg.sim.image_size || data.width != cfg.sim.image_size {
        return Err(Error::Data(format!(
            "dataset images are {}×{}, config image_size is {}",
            data.height, data.width, cfg.sim.image_size
        )));
    }
    let (train_eps, val_eps) = split_train_val(data.episodes.len(), cfg.train.train_fraction, cfg.seed)?;
    let train = step_refs(data, &train_eps);
    let val = step_refs(data, &val_eps);
    let jitter = cfg.train.gaze_grip_jitter_deg;
    let mut obj = GazeObjective {
        net: GazeNet::new(cfg.gaze.clone(), cfg.seed)?,
        data,
        grip_jitter: (jitter > 0.0).then(|| jitter.to_radians()),
    };
    let outcome = fit(&mut obj, &train, &val, &cfg.train.for_gaze(), cfg.seed, on_epoch)?;
    Ok(GazeRun {
        net: obj.net,
        outcome,
        train_episodes: train_eps,
        val_episodes: val_eps,
    })
}

/// Distance between the selected gaze and the recorded label for each step,
/// in normalized image units (the image spans 2).
pub fn gaze_errors(net: &GazeNet, data: &Dataset, refs: &[StepRef]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(refs.len());
    for chunk in refs.chunks(64) {
        let images: Vec<Tensor> = chunk
            .iter()
            .map(|&(e, s)| image_tensor(&data.episodes[e].steps[s].image, data.height, data.width))
            .collect::<Result<_>>()?;
        let inputs: Vec<GazeInput> = images
            .iter()
            .zip(chunk)
            .map(|(image, &(e, s))| GazeInput {
                image,
                grippers: data.episodes[e].steps[s].grippers(),
            })
            .collect();
        for (p, &(e, s)) in net.predict(&inputs)?.iter().zip(chunk) {
            let g = select_gaze(p);
            let t = data.episodes[e].steps[s].gaze;
            out.push((g[0] - t[0]).hypot(g[1] - t[1]));
        }
    }
    Ok(out)
}
