//! Noise-regression training with Adam and a step-halving learning rate.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{q_sample, NoisePredictor};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{images_to_tensor, EpsilonPredictor, NetworkConfig, Tensor};
use crate::schedule::{ScheduleSpec, VarianceSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWeighting {
    /// Plain mean squared error on the noise.
    #[default]
    Simplified,
    /// Each element scaled by `beta_t / (2 alpha_t (1 - abar_t))`, the
    /// weight the variational bound puts on the noise error when the reverse
    /// variance is `beta_t`.
    Eq8Weighted,
}

impl LossWeighting {
    pub fn weight(self, t: usize, sched: &VarianceSchedule) -> f64 {
        match self {
            LossWeighting::Simplified => 1.0,
            LossWeighting::Eq8Weighted => {
                sched.beta(t) / (2.0 * sched.alpha(t) * (1.0 - sched.alpha_bar(t)))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub lr_halving_period_epochs: usize,
    pub schedule: ScheduleSpec,
    pub loss_weighting: LossWeighting,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            batch_size: 2,
            initial_lr: 1e-4,
            lr_halving_period_epochs: 5,
            schedule: ScheduleSpec::OCT,
            loss_weighting: LossWeighting::Simplified,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.lr_halving_period_epochs == 0 {
            return Err(Error::Config(
                "batch_size and lr_halving_period_epochs must be positive".into(),
            ));
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::Config(format!(
                "initial_lr must be positive, got {}",
                self.initial_lr
            )));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam parameters {a:?}")));
        }
        self.schedule.build().map(drop)
    }
}

/// `initial_lr * 0.5^floor(epoch / period)`.
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> f64 {
    let halvings = (epoch / config.lr_halving_period_epochs.max(1)).min(i32::MAX as usize) as i32;
    config.initial_lr * 0.5f64.powi(halvings)
}

/// Adam with bias-corrected moments, one moment pair per parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[Tensor<f32>]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.len()]).collect();
        Adam {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, params: &mut [Tensor<f32>], grads: &[Tensor<f32>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Contract("optimizer state does not match the parameters".into()));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step.min(i32::MAX as u64) as i32);
        let c2 = 1.0 - beta2.powi(self.step.min(i32::MAX as u64) as i32);
        let step_size = (lr / c1) as f32;
        let (b1, b2, eps, c2) = (beta1 as f32, beta2 as f32, eps as f32, c2 as f32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step_size * *m / ((*v / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Draws `(t, eps, x_t)` for each element of a batch: `t` uniform on
/// `1..=T`, then `eps` standard normal.
fn noised_batch<R: Rng + ?Sized>(
    batch: &[Image],
    sched: &VarianceSchedule,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<Image>, Vec<Image>)> {
    let mut ts = Vec::with_capacity(batch.len());
    let mut eps = Vec::with_capacity(batch.len());
    let mut xt = Vec::with_capacity(batch.len());
    for x0 in batch {
        let t = rng.random_range(1..=sched.steps());
        let e = Image::randn(x0.height(), x0.width(), rng);
        xt.push(q_sample(x0, t, &e, sched)?);
        ts.push(t);
        eps.push(e);
    }
    Ok((ts, eps, xt))
}

fn check_batch(batch: &[Image]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Contract("empty training batch".into()));
    }
    if let Some(i) = batch.iter().position(|x| !x.is_normalized(crate::sampler::INPUT_TOLERANCE)) {
        return Err(Error::Contract(format!("batch element {i} is not normalized to [-1, 1]")));
    }
    Ok(())
}

/// The training objective for any predictor, without an update.
pub fn noise_regression_loss<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    batch: &[Image],
    model: &P,
    sched: &VarianceSchedule,
    weighting: LossWeighting,
    rng: &mut R,
) -> Result<f64> {
    check_batch(batch)?;
    let (ts, eps, xt) = noised_batch(batch, sched, rng)?;
    let pred = model.predict_batch(&xt, &ts)?;
    let mut loss = 0.0;
    for (i, ((p, e), &t)) in pred.iter().zip(&eps).zip(&ts).enumerate() {
        let l = weighting.weight(t, sched) * p.mse(e)?;
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss { t, batch_index: i });
        }
        loss += l;
    }
    Ok(loss / batch.len() as f64)
}

/// One optimizer update on `batch`; returns the pre-update loss.
pub fn training_step<R: Rng + ?Sized>(
    batch: &[Image],
    model: &mut EpsilonPredictor,
    optimizer: &mut Adam,
    sched: &VarianceSchedule,
    weighting: LossWeighting,
    lr: f64,
    rng: &mut R,
) -> Result<f64> {
    check_batch(batch)?;
    let (h, w) = batch[0].shape();
    model.config().check_input(h, w)?;
    let (ts, eps, xt) = noised_batch(batch, sched, rng)?;
    let weights: Vec<f64> = ts.iter().map(|&t| weighting.weight(t, sched)).collect();
    let xt = images_to_tensor::<f32>(&xt)?;
    let eps = images_to_tensor::<f32>(&eps)?;
    let (loss, grads) = model.loss_and_grads(&xt, &ts, &eps, &weights)?;
    if !loss.is_finite() || grads.iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
        let out = model.forward_tensor(&xt, &ts)?;
        let bad = (0..out.batch())
            .find(|&i| out.item(i).iter().any(|v| !v.is_finite()))
            .unwrap_or(0);
        return Err(Error::NonFiniteLoss { t: ts[bad], batch_index: bad });
    }
    optimizer.update(model.params_mut().tensors_mut(), &grads, lr)?;
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

pub fn write_loss_log(records: &[LossRecord], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let mut put = |s: String| f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e));
    put("epoch,step,loss,lr\n".into())?;
    for r in records {
        put(format!("{},{},{:.9e},{:.6e}\n", r.epoch, r.step, r.loss, r.lr))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

/// Resumable training state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub network: EpsilonPredictor,
    pub train: TrainConfig,
    /// Epochs completed.
    pub epoch: usize,
    pub step: u64,
    pub optimizer: Adam,
    /// Position in the training RNG stream (seeded from `train.seed`).
    pub rng_word_pos: u128,
}

impl Checkpoint {
    pub fn new(network: EpsilonPredictor, train: TrainConfig) -> Result<Self> {
        train.validate()?;
        let optimizer = Adam::new(train.adam, network.params().tensors());
        Ok(Checkpoint {
            network,
            train,
            epoch: 0,
            step: 0,
            optimizer,
            rng_word_pos: 0,
        })
    }

    pub fn network_config(&self) -> &NetworkConfig {
        self.network.config()
    }

    pub fn schedule(&self) -> Result<VarianceSchedule> {
        self.train.schedule.build()
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.train.seed);
        rng.set_word_pos(self.rng_word_pos);
        rng
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::checkpoint::save(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::checkpoint::load(path)
    }
}

/// Owns the parameters, optimizer state and RNG for one training run.
pub struct Trainer {
    state: Checkpoint,
    sched: VarianceSchedule,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(state: Checkpoint) -> Result<Self> {
        state.train.validate()?;
        let sched = state.schedule()?;
        let rng = state.rng();
        Ok(Trainer { state, sched, rng })
    }

    pub fn state(&self) -> &Checkpoint {
        &self.state
    }

    pub fn schedule(&self) -> &VarianceSchedule {
        &self.sched
    }

    /// One pass over `dataset` in a freshly shuffled order.
    pub fn run_epoch(&mut self, dataset: &[Image]) -> Result<Vec<LossRecord>> {
        if dataset.is_empty() {
            return Err(Error::Config("training dataset is empty".into()));
        }
        let epoch = self.state.epoch;
        let lr = lr_schedule(epoch, &self.state.train);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut self.rng);
        let mut records = Vec::new();
        for chunk in order.chunks(self.state.train.batch_size) {
            let batch: Vec<Image> = chunk.iter().map(|&i| dataset[i].clone()).collect();
            let loss = training_step(
                &batch,
                &mut self.state.network,
                &mut self.state.optimizer,
                &self.sched,
                self.state.train.loss_weighting,
                lr,
                &mut self.rng,
            )?;
            self.state.step += 1;
            records.push(LossRecord {
                epoch,
                step: self.state.step,
                loss,
                lr,
            });
        }
        self.state.epoch += 1;
        self.state.rng_word_pos = self.rng.get_word_pos();
        Ok(records)
    }

    /// Train until `train.epochs` epochs have completed; `on_epoch` sees each
    /// epoch's records as they finish.
    pub fn run(
        &mut self,
        dataset: &[Image],
        mut on_epoch: impl FnMut(&Checkpoint, &[LossRecord]),
    ) -> Result<Vec<LossRecord>> {
        if dataset.is_empty() {
            return Err(Error::Config("training dataset is empty".into()));
        }
        let mut log = Vec::new();
        while self.state.epoch < self.state.train.epochs {
            let recs = self.run_epoch(dataset)?;
            on_epoch(&self.state, &recs);
            log.extend(recs);
        }
        Ok(log)
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.state
    }
}

/// Train a fresh network; returns the final state and the per-step log.
pub fn train(
    dataset: &[Image],
    config: &TrainConfig,
    network: EpsilonPredictor,
) -> Result<(Checkpoint, Vec<LossRecord>)> {
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let mut trainer = Trainer::new(Checkpoint::new(network, config.clone())?)?;
    let log = trainer.run(dataset, |state, recs| {
        let mean = recs.iter().map(|r| r.loss).sum::<f64>() / recs.len() as f64;
        log::info!("epoch {} loss {mean:.6} lr {:.3e}", state.epoch, recs[0].lr);
    })?;
    Ok((trainer.into_checkpoint(), log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ZeroPredictor;

    fn tiny_net() -> EpsilonPredictor {
        EpsilonPredictor::new(NetworkConfig::tiny(), 1).unwrap()
    }

    fn dataset(n: usize) -> Vec<Image> {
        (0..n)
            .map(|k| Image::from_fn(8, 8, |(r, c)| (((r + k) as f32 * 0.7).sin() * (c as f32 * 0.4).cos()) * 0.9))
            .collect()
    }

    #[test]
    fn lr_values() {
        let c = TrainConfig::default();
        assert_eq!(lr_schedule(0, &c), 1e-4);
        assert_eq!(lr_schedule(4, &c), 1e-4);
        assert_eq!(lr_schedule(5, &c), 5e-5);
        assert_eq!(lr_schedule(12, &c), 2.5e-5);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { initial_lr: 0.0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let cfg: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "loss_weighting": "eq8_weighted"}"#).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.batch_size, 2);
        assert_eq!(cfg.loss_weighting, LossWeighting::Eq8Weighted);
    }

    #[test]
    fn eq8_weight_matches_formula() {
        let s = VarianceSchedule::oct();
        for t in [1, 50, 100] {
            let w = LossWeighting::Eq8Weighted.weight(t, &s);
            let expect = s.beta(t).powi(2) / (2.0 * s.beta(t) * s.alpha(t) * (1.0 - s.alpha_bar(t)));
            assert!((w - expect).abs() <= 1e-12 * expect);
        }
    }

    #[test]
    fn zero_model_loss_is_unit_variance() {
        let s = VarianceSchedule::oct();
        let data = dataset(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 400;
        let mean: f64 = (0..n)
            .map(|_| noise_regression_loss(&data, &ZeroPredictor, &s, LossWeighting::Simplified, &mut rng).unwrap())
            .sum::<f64>()
            / n as f64;
        // 800 images of 64 unit normals: standard error ~ sqrt(2 / 51200).
        assert!((mean - 1.0).abs() < 0.03, "{mean}");
    }

    #[test]
    fn step_is_deterministic() {
        let s = VarianceSchedule::oct();
        let data = dataset(2);
        let run = || {
            let mut net = tiny_net();
            let mut adam = Adam::new(AdamConfig::default(), net.params().tensors());
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let loss = training_step(&data, &mut net, &mut adam, &s, LossWeighting::Simplified, 1e-3, &mut rng).unwrap();
            (loss, net.params().clone())
        };
        let (l1, p1) = run();
        let (l2, p2) = run();
        assert_eq!(l1, l2);
        assert_eq!(p1, p2);
        assert!(p1 != tiny_net().params().clone());
    }

    #[test]
    fn rejects_bad_input() {
        let s = VarianceSchedule::oct();
        let mut net = tiny_net();
        let mut adam = Adam::new(AdamConfig::default(), net.params().tensors());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let loud = vec![Image::filled(8, 8, 3.0)];
        assert!(training_step(&loud, &mut net, &mut adam, &s, LossWeighting::Simplified, 1e-3, &mut rng).is_err());
        let odd = vec![Image::filled(7, 8, 0.0)];
        assert!(training_step(&odd, &mut net, &mut adam, &s, LossWeighting::Simplified, 1e-3, &mut rng).is_err());
        assert!(train(&[], &TrainConfig::default(), tiny_net()).is_err());
    }

    #[test]
    fn non_finite_loss_aborts() {
        let s = VarianceSchedule::oct();
        let mut net = tiny_net();
        net.params_mut().tensors_mut()[0].data_mut()[0] = f32::NAN;
        let mut adam = Adam::new(AdamConfig::default(), net.params().tensors());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = training_step(&dataset(2), &mut net, &mut adam, &s, LossWeighting::Simplified, 1e-3, &mut rng);
        assert!(matches!(err, Err(Error::NonFiniteLoss { .. })), "{err:?}");
    }

    #[test]
    fn zero_epochs_is_identity() {
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let (ckpt, log) = train(&dataset(1), &cfg, tiny_net()).unwrap();
        assert!(log.is_empty());
        assert_eq!(ckpt.network.params(), tiny_net().params());
        assert_eq!(ckpt.epoch, 0);
    }

    #[test]
    fn reproducible_and_resumable() {
        let cfg = TrainConfig { epochs: 4, batch_size: 2, initial_lr: 1e-3, seed: 11, ..TrainConfig::default() };
        let data = dataset(3);
        let (a, log_a) = train(&data, &cfg, tiny_net()).unwrap();
        let (_, log_b) = train(&data, &cfg, tiny_net()).unwrap();
        assert_eq!(log_a, log_b);
        assert_eq!(log_a.len(), 8);
        assert!(log_a.iter().all(|r| r.loss >= 0.0));

        let half = TrainConfig { epochs: 2, ..cfg.clone() };
        let (mid, _) = train(&data, &half, tiny_net()).unwrap();
        let mut resumed = mid.clone();
        resumed.train.epochs = 4;
        let mut tr = Trainer::new(resumed).unwrap();
        let tail = tr.run(&data, |_, _| {}).unwrap();
        assert_eq!(&log_a[4..], &tail[..]);
        assert_eq!(tr.into_checkpoint().network.params(), a.network.params());
    }
}
