//! Subgradient training of min-max affine models.
//!
//! The model is linear in the active piece, so the gradient of the loss with
//! respect to the parameters touches a single `(a_ij, b_ij)` per sample: the
//! lowest-index active piece of the lowest-index minimizing component.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::model::MinMaxModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    /// `(g(x) - t)^2`.
    Mse,
    /// `log(1 + exp(-t g(x)))` with targets `t` in `{-1, +1}`.
    Logistic,
}

impl Loss {
    /// Loss and its derivative with respect to the model output.
    fn eval(self, g: f64, t: f64) -> (f64, f64) {
        match self {
            Loss::Mse => {
                let r = g - t;
                (r * r, 2.0 * r)
            }
            Loss::Logistic => {
                let z = -t * g;
                // softplus(z) and its derivative sigmoid(z), both overflow-safe
                let loss = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
                let sig = if z >= 0.0 {
                    1.0 / (1.0 + (-z).exp())
                } else {
                    let e = z.exp();
                    e / (1.0 + e)
                };
                (loss, -t * sig)
            }
        }
    }
}

/// Linearly growing training radius for adversarial examples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversarialSchedule {
    pub start_radius: f64,
    pub end_radius: f64,
    pub ramp_epochs: usize,
    #[serde(default = "default_pgd_steps")]
    pub pgd_steps: usize,
}

fn default_pgd_steps() -> usize {
    PGD_STEPS
}

impl AdversarialSchedule {
    pub fn radius(&self, epoch: usize) -> f64 {
        if self.ramp_epochs == 0 || epoch >= self.ramp_epochs {
            return self.end_radius;
        }
        let frac = epoch as f64 / self.ramp_epochs as f64;
        self.start_radius + (self.end_radius - self.start_radius) * frac
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    pub seed: u64,
    pub loss: Loss,
    /// Adversarial examples are generated for samples with positive target only.
    #[serde(default)]
    pub adversarial: Option<AdversarialSchedule>,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl TrainConfig {
    pub fn new(epochs: usize, learning_rate: f64, batch_size: usize, seed: u64, loss: Loss) -> Self {
        Self {
            epochs,
            learning_rate,
            batch_size,
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            seed,
            loss,
            adversarial: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("beta1/beta2", "moment parameters must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::invalid("adam_eps", "must be positive"));
        }
        if let Some(s) = &self.adversarial {
            if !(s.start_radius >= 0.0 && s.start_radius <= s.end_radius && s.end_radius.is_finite()) {
                return Err(Error::invalid("adversarial", "need 0 <= start_radius <= end_radius"));
            }
        }
        Ok(())
    }
}

/// Regression/classification samples `(x, target)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<f64>) -> Result<Self> {
        if inputs.len() != targets.len() {
            return Err(Error::shape(
                "targets",
                format!("{} targets for {} inputs", targets.len(), inputs.len()),
            ));
        }
        if let Some(d) = inputs.first().map(Vec::len) {
            if let Some(k) = inputs.iter().position(|x| x.len() != d) {
                return Err(Error::shape("inputs", format!("row {k} has length {}, expected {d}", inputs[k].len())));
            }
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.inputs.first().map(Vec::len)
    }

    /// Rows `x_1,...,x_d,target`, no header.
    pub fn from_csv<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(reader);
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Parse {
                line: line + 1,
                column: 0,
                message: e.to_string(),
            })?;
            let mut row = Vec::with_capacity(rec.len());
            for (col, field) in rec.iter().enumerate() {
                let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                    line: line + 1,
                    column: col + 1,
                    message: format!("`{field}` is not a number"),
                })?;
                row.push(v);
            }
            if row.len() < 2 {
                return Err(Error::Parse {
                    line: line + 1,
                    column: 1,
                    message: "need at least one input and a target".into(),
                });
            }
            targets.push(row.pop().expect("nonempty"));
            inputs.push(row);
        }
        Self::new(inputs, targets)
    }

    pub fn to_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
        for (x, t) in self.inputs.iter().zip(&self.targets) {
            let row: Vec<String> = x.iter().chain(std::iter::once(t)).map(|v| format!("{v:?}")).collect();
            w.write_record(&row).map_err(|e| Error::Io(e.into()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv(std::fs::File::open(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_csv(std::fs::File::create(path)?)
    }
}

/// Slopes i.i.d. `N(0, 1/d)`, offsets uniform over the target range.
pub fn init_model(d: usize, m: usize, n: usize, data: &Dataset, seed: u64) -> Result<MinMaxModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (d as f64).sqrt();
    let a: Vec<f64> = (0..m * n * d)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let (lo, hi) = data
        .targets
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &t| (lo.min(t), hi.max(t)));
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (-1.0, 1.0) };
    let b: Vec<f64> = (0..m * n).map(|_| rng.gen_range(lo..=hi)).collect();
    MinMaxModel::from_flat(d, m, n, a, b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub model: MinMaxModel,
    /// Mean training loss per epoch (on the possibly perturbed samples).
    pub epoch_losses: Vec<f64>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [&mut f64], grad: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (k, p) in params.iter_mut().enumerate() {
            let g = grad[k];
            self.m[k] = cfg.beta1 * self.m[k] + (1.0 - cfg.beta1) * g;
            self.v[k] = cfg.beta2 * self.v[k] + (1.0 - cfg.beta2) * g * g;
            let mh = self.m[k] / c1;
            let vh = self.v[k] / c2;
            **p -= cfg.learning_rate * mh / (vh.sqrt() + cfg.adam_eps);
        }
    }
}

/// Minibatch Adam on the configured loss. Deterministic for a fixed seed.
pub fn train(init: &MinMaxModel, data: &Dataset, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset("training set has no samples".into()));
    }
    check_dim(init.dim(), data.dim().expect("nonempty"))?;
    let mut model = init.clone();
    let d = model.dim();
    let na = model.slopes_flat().len();
    let mut adam = Adam::new(na + model.offsets_flat().len());
    let mut grad = vec![0.0; adam.m.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let radius = config.adversarial.map(|s| s.radius(epoch)).unwrap_or(0.0);
        let steps = config.adversarial.map(|s| s.pgd_steps).unwrap_or(PGD_STEPS);
        let mut total = 0.0;
        for (batch_no, batch) in order.chunks(config.batch_size).enumerate() {
            let samples: Vec<Vec<f64>> = batch
                .par_iter()
                .map(|&k| {
                    let x = &data.inputs[k];
                    if radius > 0.0 && data.targets[k] > 0.0 {
                        pgd_attack(&model, x, radius, steps, radius / 4.0)
                    } else {
                        x.clone()
                    }
                })
                .collect();
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut batch_loss = 0.0;
            let scale = 1.0 / batch.len() as f64;
            for (x, &k) in samples.iter().zip(batch) {
                let tr = model.trace_unchecked(x);
                let (loss, dl) = config.loss.eval(tr.value, data.targets[k]);
                batch_loss += loss * scale;
                let idx = tr.argmin_i * model.num_pieces() + tr.argmax_j;
                for (g, xv) in grad[idx * d..(idx + 1) * d].iter_mut().zip(x) {
                    *g += dl * xv * scale;
                }
                grad[na + idx] += dl * scale;
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                });
            }
            total += batch_loss * batch.len() as f64;
            let (a, b) = model.params_mut();
            let mut params: Vec<&mut f64> = a.iter_mut().chain(b.iter_mut()).collect();
            adam.step(&mut params, &grad, config);
        }
        epoch_losses.push(total / data.len() as f64);
    }
    Ok(TrainReport { model, epoch_losses })
}

/// Mean loss of `model` over `data`.
pub fn evaluate_loss(model: &MinMaxModel, data: &Dataset, loss: Loss) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("evaluation set has no samples".into()));
    }
    let mut total = 0.0;
    for (x, &t) in data.inputs.iter().zip(&data.targets) {
        total += loss.eval(model.evaluate(x)?, t).0;
    }
    Ok(total / data.len() as f64)
}

/// Fraction of samples with `sign(g(x))` matching the sign of the target
/// (`g >= 0` predicts the positive class).
pub fn sign_accuracy(model: &MinMaxModel, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("evaluation set has no samples".into()));
    }
    let mut hits = 0usize;
    for (x, &t) in data.inputs.iter().zip(&data.targets) {
        if (model.evaluate(x)? >= 0.0) == (t > 0.0) {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

pub const PGD_STEPS: usize = 10;

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Projected sign-subgradient descent on `g` over the L-infinity ball
/// around `center`. Returns the lowest-valued iterate, so the result never
/// scores above the center.
pub fn pgd_attack(model: &MinMaxModel, center: &[f64], eps: f64, steps: usize, step_size: f64) -> Vec<f64> {
    let mut best = center.to_vec();
    if !(eps > 0.0) {
        return best;
    }
    let mut best_val = model.trace_unchecked(center).value;
    let mut x = best.clone();
    for _ in 0..steps {
        let t = model.trace_unchecked(&x);
        let s = model.slope(t.argmin_i, t.argmax_j);
        for ((xr, &sr), &cr) in x.iter_mut().zip(s).zip(center) {
            *xr = (*xr - step_size * sign(sr)).clamp(cr - eps, cr + eps);
        }
        let v = model.trace_unchecked(&x).value;
        if v < best_val {
            best_val = v;
            best.copy_from_slice(&x);
        }
    }
    best
}

/// `pgd_attack` with the default schedule: 10 steps of size `eps / 4`.
pub fn pgd_attack_default(model: &MinMaxModel, center: &[f64], eps: f64) -> Vec<f64> {
    pgd_attack(model, center, eps, PGD_STEPS, eps / 4.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certify::{certify, CertifyOptions};
    use crate::{AttackSet, Norm};

    fn abs_data() -> Dataset {
        let xs: Vec<Vec<f64>> = (0..200).map(|k| vec![-2.0 + 4.0 * k as f64 / 199.0]).collect();
        let ts = xs.iter().map(|x| x[0].abs()).collect();
        Dataset::new(xs, ts).unwrap()
    }

    #[test]
    fn fits_absolute_value() {
        let data = abs_data();
        let init = init_model(1, 2, 2, &data, 3).unwrap();
        let cfg = TrainConfig::new(300, 0.01, 20, 3, Loss::Mse);
        let report = train(&init, &data, &cfg).unwrap();
        let mse = evaluate_loss(&report.model, &data, Loss::Mse).unwrap();
        assert!(mse <= 1e-3, "mse {mse}");
        assert_eq!(report.epoch_losses.len(), 300);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let data = abs_data();
        let init = init_model(1, 3, 2, &data, 9).unwrap();
        let report = train(&init, &data, &TrainConfig::new(0, 0.01, 8, 0, Loss::Mse)).unwrap();
        assert_eq!(report.model, init);
        assert!(report.epoch_losses.is_empty());
    }

    #[test]
    fn separable_logistic_reaches_full_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut xs = Vec::new();
        let mut ts = Vec::new();
        for k in 0..200 {
            let t = if k % 2 == 0 { 1.0 } else { -1.0 };
            let margin = rng.gen_range(0.5..2.0);
            xs.push(vec![t * margin, rng.gen_range(-3.0..3.0)]);
            ts.push(t);
        }
        let data = Dataset::new(xs, ts).unwrap();
        let init = init_model(2, 2, 2, &data, 1).unwrap();
        let report = train(&init, &data, &TrainConfig::new(50, 0.05, 16, 1, Loss::Logistic)).unwrap();
        assert_eq!(sign_accuracy(&report.model, &data).unwrap(), 1.0);
    }

    #[test]
    fn fixed_seed_is_bitwise_reproducible() {
        let data = abs_data();
        let init = init_model(1, 2, 3, &data, 4).unwrap();
        let mut cfg = TrainConfig::new(5, 0.01, 7, 11, Loss::Mse);
        cfg.adversarial = Some(AdversarialSchedule {
            start_radius: 0.0,
            end_radius: 0.1,
            ramp_epochs: 3,
            pgd_steps: 5,
        });
        let r1 = train(&init, &data, &cfg).unwrap();
        let r2 = train(&init, &data, &cfg).unwrap();
        assert_eq!(r1.model.to_json(), r2.model.to_json());
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&r1.epoch_losses), bits(&r2.epoch_losses));
    }

    #[test]
    fn nan_loss_aborts() {
        let data = Dataset::new(vec![vec![1.0], vec![f64::NAN]], vec![1.0, 1.0]).unwrap();
        let init = MinMaxModel::affine(vec![1.0], 0.0).unwrap();
        let err = train(&init, &data, &TrainConfig::new(1, 0.01, 2, 0, Loss::Mse)).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { epoch: 0, batch: 0 }));
    }

    #[test]
    fn schedule_interpolates() {
        let s = AdversarialSchedule {
            start_radius: 0.0,
            end_radius: 0.3,
            ramp_epochs: 3,
            pgd_steps: 10,
        };
        assert_eq!(s.radius(0), 0.0);
        assert!((s.radius(1) - 0.1).abs() < 1e-15);
        assert_eq!(s.radius(3), 0.3);
        assert_eq!(s.radius(10), 0.3);
    }

    #[test]
    fn pgd_on_linear_model_is_exact() {
        let g = MinMaxModel::affine(vec![2.0, -1.0, 0.0], 0.5).unwrap();
        let c = [0.3, 0.1, -0.2];
        let eps = 0.25;
        let x = pgd_attack_default(&g, &c, eps);
        assert_eq!(x, vec![0.3 - eps, 0.1 + eps, -0.2]);
        let expected = g.evaluate(&c).unwrap() - eps * 3.0;
        assert!((g.evaluate(&x).unwrap() - expected).abs() < 1e-12);
        assert_eq!(pgd_attack_default(&g, &c, 0.0), c.to_vec());
    }

    #[test]
    fn pgd_stays_in_ball_and_never_beats_certify() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let (d, m, n) = (2, rng.gen_range(1..4), rng.gen_range(1..4));
            let a = (0..m * n * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let b = (0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let g = MinMaxModel::from_flat(d, m, n, a, b).unwrap();
            let c: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let eps = rng.gen_range(0.05..1.0);
            let x = pgd_attack_default(&g, &c, eps);
            assert!(x.iter().zip(&c).all(|(p, q)| (p - q).abs() <= eps));
            let gx = g.evaluate(&x).unwrap();
            assert!(gx <= g.evaluate(&c).unwrap());
            let set = AttackSet::ball(Norm::LInf, c.clone(), eps).unwrap();
            let r = certify(&g, &set, &CertifyOptions::default()).unwrap();
            assert!(r.p_star <= gx + 1e-6);
        }
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let data = Dataset::new(vec![vec![0.1, 1.0 / 3.0], vec![-2.0, 5e-300]], vec![1.0, -1.0]).unwrap();
        let mut buf = Vec::new();
        data.to_csv(&mut buf).unwrap();
        assert_eq!(Dataset::from_csv(&buf[..]).unwrap(), data);
        let err = Dataset::from_csv(&b"1,2\n3,x\n"[..]).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, column: 2, .. }), "{err:?}");
    }

    #[test]
    fn config_json_uses_defaults() {
        let cfg: TrainConfig = crate::json::from_str(r#"{"epochs":2,"learning_rate":0.01,"batch_size":4,"seed":1,"loss":"mse"}"#).unwrap();
        assert_eq!(cfg, TrainConfig::new(2, 0.01, 4, 1, Loss::Mse));
        let bad = TrainConfig { batch_size: 0, ..cfg };
        assert!(bad.validate().is_err());
    }
}
