//! SGD training loop.

use std::fmt::Write as _;

use super::config::DetectionConfig;
use super::model::Network;
use super::objective::{batch_loss, LossParts};
use super::scene::SyntheticScene;
use crate::error::{Error, Result};
use crate::rng::Rng;

const SHUFFLE_STREAM: u64 = 0x5eed;

/// Parameters plus optimizer state. Owned by the training loop; evaluation
/// works on clones.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: DetectionConfig,
    pub net: Network,
    pub velocity: Network,
    pub step: usize,
}

impl ModelState {
    pub fn new(config: &DetectionConfig) -> Result<Self> {
        config.validate()?;
        let net = Network::init(config);
        Ok(Self {
            config: config.clone(),
            velocity: net.zeros_like(),
            net,
            step: 0,
        })
    }

    /// One momentum-SGD update: `v ← μv + g + λw`, `w ← w − ηv`. Weight
    /// decay applies to weights, not biases.
    pub fn sgd_step(&mut self, grads: &Network) -> Result<()> {
        let (lr, mu, wd) = (
            self.config.learning_rate,
            self.config.momentum,
            self.config.weight_decay,
        );
        let g = grads.tensors();
        let mut v = self.velocity.tensors_mut();
        let mut p = self.net.tensors_mut();
        if g.len() != p.len() || v.len() != p.len() {
            return Err(Error::Shape("gradient does not match the network".into()));
        }
        for (((name, p), (_, v)), (_, g)) in p.iter_mut().zip(v.iter_mut()).zip(&g) {
            p.check_same_shape(g)?;
            let decay = if name.ends_with(".weight") { wd } else { 0.0 };
            for ((pv, vv), gv) in p
                .data_mut()
                .iter_mut()
                .zip(v.data_mut().iter_mut())
                .zip(g.data())
            {
                *vv = mu * *vv + gv + decay * *pv;
                *pv -= lr * *vv;
            }
        }
        self.step += 1;
        Ok(())
    }
}

/// Scene order for training: consecutive batches walk through a fresh
/// shuffle of the training set each epoch.
pub struct BatchSampler {
    rng: Rng,
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
}

impl BatchSampler {
    pub fn new(seed: u64, n_scenes: usize, batch: usize) -> Self {
        Self {
            rng: Rng::derive(seed, SHUFFLE_STREAM),
            order: (0..n_scenes).collect(),
            cursor: n_scenes,
            batch,
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        (0..self.batch)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.rng.shuffle(&mut self.order);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

/// Trains from the config's initialization for `n_steps`. `on_step` sees
/// every step's loss. Stops with [`Error::Diverged`] as soon as the loss or
/// a parameter becomes non-finite.
pub fn train(
    config: &DetectionConfig,
    scenes: &[SyntheticScene],
    n_steps: usize,
    mut on_step: impl FnMut(usize, &LossParts),
) -> Result<(ModelState, Vec<LossParts>)> {
    if scenes.is_empty() {
        return Err(Error::Contract("training needs at least one scene".into()));
    }
    let mut state = ModelState::new(config)?;
    let mut sampler = BatchSampler::new(config.seed, scenes.len(), config.batch_size);
    let mut curve = Vec::with_capacity(n_steps);
    for step in 0..n_steps {
        let batch: Vec<&SyntheticScene> = sampler
            .next_batch()
            .into_iter()
            .map(|i| &scenes[i])
            .collect();
        let out = batch_loss(&state.net, config, &batch, None).map_err(|e| Error::Diverged {
            step,
            detail: e.to_string(),
        })?;
        state.sgd_step(&out.grads)?;
        if !state.net.all_finite() {
            return Err(Error::Diverged {
                step,
                detail: "a parameter became non-finite".into(),
            });
        }
        on_step(step, &out.parts);
        curve.push(out.parts);
    }
    Ok((state, curve))
}

/// `step,total,dpm_cls,dpm_reg,adm_cls,adm_reg,dpm_pos,adm_pos` rows.
pub fn loss_curve_csv(curve: &[LossParts]) -> String {
    let mut out = String::from("step,total,dpm_cls,dpm_reg,adm_cls,adm_reg,dpm_pos,adm_pos\n");
    for (k, p) in curve.iter().enumerate() {
        writeln!(
            out,
            "{k},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{},{}",
            p.total, p.dpm_cls, p.dpm_reg, p.adm_cls, p.adm_reg, p.dpm_positives, p.adm_positives
        )
        .expect("write to string");
    }
    out
}
