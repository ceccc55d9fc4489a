//! Binary digit classification with certified accuracy curves.
//!
//! The sensitive class maps to target `+1` and is predicted when `g >= 0`;
//! certification asks that `g` stays nonnegative over an L-infinity ball.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attack_set::Norm;
use crate::certify::{certified_accuracy_curve, certify_ball, CertStatus, CertifyOptions};
use crate::datasets::{downsample, filter_binary, synthetic_digits, LabeledSet};
use crate::error::{Error, Result};
use crate::model::MinMaxModel;
use crate::train::{init_model, train, AdversarialSchedule, Loss, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyConfig {
    pub seed: u64,
    pub sensitive: u8,
    pub other: u8,
    pub downsample: usize,
    pub m: usize,
    pub n: usize,
    pub train: TrainConfig,
    /// Sensitive-class test points certified per radius.
    pub eval_points: usize,
    pub eps_grid: Vec<f64>,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        let mut train = TrainConfig::new(30, 0.01, 16, 0, Loss::Logistic);
        train.adversarial = Some(AdversarialSchedule {
            start_radius: 0.0,
            end_radius: 0.05,
            ramp_epochs: 15,
            pgd_steps: 10,
        });
        Self {
            seed: 0,
            sensitive: 3,
            other: 8,
            downsample: 4,
            m: 15,
            n: 15,
            train,
            eval_points: 20,
            eps_grid: (0..=10).map(|k| k as f64 * 0.01).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub eps: f64,
    pub certified_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct ClassifyReport {
    pub model: MinMaxModel,
    pub dim: usize,
    pub train_accuracy: f64,
    /// Fraction of sensitive test points classified as sensitive.
    pub clean_sensitive_accuracy: f64,
    pub curve: Vec<CurvePoint>,
    /// Wall time of one certification at the largest radius.
    pub certify_seconds: f64,
    pub certify_status: CertStatus,
}

impl ClassifyReport {
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("eps,certified_accuracy\n");
        for p in &self.curve {
            out.push_str(&format!("{:.16e},{:.16e}\n", p.eps, p.certified_accuracy));
        }
        out
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Out<'a> {
            dim: usize,
            m: usize,
            n: usize,
            train_accuracy: f64,
            clean_sensitive_accuracy: f64,
            curve: &'a [CurvePoint],
            certify_status: CertStatus,
        }
        crate::json::to_string(&Out {
            dim: self.dim,
            m: self.model.num_components(),
            n: self.model.num_pieces(),
            train_accuracy: self.train_accuracy,
            clean_sensitive_accuracy: self.clean_sensitive_accuracy,
            curve: &self.curve,
            certify_status: self.certify_status,
        })
    }
}

/// Procedurally rendered train/test splits of the two classes.
pub fn synthetic_split(seed: u64, train_per_class: usize, test_per_class: usize, a: u8, b: u8) -> Result<(LabeledSet, LabeledSet)> {
    let (img, lab) = synthetic_digits(seed, train_per_class, &[a, b])?;
    let train = LabeledSet::from_idx(&img, &lab)?;
    let (img, lab) = synthetic_digits(seed.wrapping_add(0x9e37_79b9), test_per_class, &[a, b])?;
    let test = LabeledSet::from_idx(&img, &lab)?;
    Ok((train, test))
}

/// Filters, pools, trains and evaluates; `train_set`/`test_set` hold raw images.
pub fn run_classification(
    train_set: &LabeledSet,
    test_set: &LabeledSet,
    cfg: &ClassifyConfig,
    opts: &CertifyOptions,
) -> Result<ClassifyReport> {
    let prep = |s: &LabeledSet| -> Result<LabeledSet> {
        downsample(&filter_binary(s, cfg.sensitive, cfg.other)?, cfg.downsample)
    };
    let train_set = prep(train_set)?;
    let test_set = prep(test_set)?;
    let data = train_set.to_dataset()?;
    let dim = train_set.dim();
    let init = init_model(dim, cfg.m, cfg.n, &data, cfg.seed)?;
    let trained = train(&init, &data, &cfg.train)?;
    let model = trained.model;
    let train_accuracy = crate::train::sign_accuracy(&model, &data)?;

    let sensitive: Vec<(Vec<f64>, u8)> = test_set
        .pairs()
        .into_iter()
        .filter(|(_, l)| *l == cfg.sensitive)
        .take(cfg.eval_points)
        .collect();
    if sensitive.is_empty() {
        return Err(Error::EmptyDataset(format!("no test samples of class {}", cfg.sensitive)));
    }
    let mut clean_hits = 0;
    for (x, _) in &sensitive {
        if model.evaluate(x)? >= 0.0 {
            clean_hits += 1;
        }
    }
    let clean_sensitive_accuracy = clean_hits as f64 / sensitive.len() as f64;

    let accs = certified_accuracy_curve(&model, &sensitive, &cfg.eps_grid, Norm::LInf, &cfg.sensitive, opts)?;
    let curve = cfg
        .eps_grid
        .iter()
        .zip(accs)
        .map(|(&eps, certified_accuracy)| CurvePoint { eps, certified_accuracy })
        .collect();

    let eps_timed = cfg.eps_grid.iter().copied().fold(0.0, f64::max);
    let start = Instant::now();
    let r = certify_ball(&model, &sensitive[0].0, Norm::LInf, eps_timed, opts)?;
    let certify_seconds = start.elapsed().as_secs_f64();

    Ok(ClassifyReport {
        model,
        dim,
        train_accuracy,
        clean_sensitive_accuracy,
        curve,
        certify_seconds,
        certify_status: r.status,
    })
}
