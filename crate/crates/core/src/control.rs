//! Intersection-crossing demo with double-integrator vehicles.
//!
//! An uncontrolled eastbound vehicle `(x, xdot)` and the northbound ego
//! vehicle `(y, ydot)` approach an intersection centered at the origin. A
//! hand-written expert brakes the ego to a stop before the intersection,
//! waits for the eastbound vehicle to clear it and then accelerates. A
//! min-max policy `pi` is fitted to the expert (ego input `u = -pi`) and
//! certified to brake everywhere on the approach set.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack_set::AttackSet;
use crate::certify::{certify, enumerate_oracle, CertStatus, CertificationResult, CertifyOptions};
use crate::error::{Error, Result};
use crate::model::MinMaxModel;
use crate::train::{init_model, train, Dataset, Loss, TrainConfig};

/// Model input order is `(x, xdot, y, ydot)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub xdot: f64,
    pub y: f64,
    pub ydot: f64,
}

impl VehicleState {
    pub fn new(x: f64, xdot: f64, y: f64, ydot: f64) -> Self {
        Self { x, xdot, y, ydot }
    }

    pub fn to_vec(self) -> Vec<f64> {
        vec![self.x, self.xdot, self.y, self.ydot]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub steps: usize,
    pub delta: f64,
    pub u_max: f64,
    /// Half-width of the intersection.
    pub half_width: f64,
    pub vehicle_length: f64,
    pub vehicle_width: f64,
    /// Initial-state box `[lo, hi]` per coordinate of `(x, xdot, y, ydot)`.
    pub init_lo: [f64; 4],
    pub init_hi: [f64; 4],
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.05,
            steps: 100,
            delta: 0.1,
            u_max: 1.0,
            half_width: 0.75,
            vehicle_length: 1.0,
            vehicle_width: 0.5,
            init_lo: [-3.0, 0.5, -3.0, 0.0],
            init_hi: [-2.0, 2.5, -2.0, 2.0],
        }
    }
}

impl SimConfig {
    /// Ordinate where the ego's center stops, `delta` before the intersection.
    pub fn y_stop(&self) -> f64 {
        -self.half_width - self.delta
    }

    /// States approaching or inside the intersection on which braking is certified.
    pub fn certified_box(&self) -> ([f64; 4], [f64; 4]) {
        let d = self.delta;
        (
            [self.init_lo[0] + d, self.init_lo[1] + d, self.init_lo[2] + d, self.init_lo[3] + d],
            [self.half_width, self.init_hi[1] - d, -self.half_width, self.init_hi[3] - d],
        )
    }

    pub fn in_intersection(&self, position: f64) -> bool {
        position.abs() < self.half_width
    }

    /// Both vehicle centers inside the intersection at once.
    pub fn collision(&self, s: &VehicleState) -> bool {
        self.in_intersection(s.x) && self.in_intersection(s.y)
    }
}

/// One step of the double integrators; the ego input is clamped to `[-1, 1]`.
pub fn step(s: &VehicleState, u: f64, dt: f64) -> VehicleState {
    let u = u.clamp(-1.0, 1.0);
    VehicleState {
        x: s.x + s.xdot * dt,
        xdot: s.xdot,
        y: s.y + s.ydot * dt + 0.5 * u * dt * dt,
        ydot: s.ydot + u * dt,
    }
}

/// Stop `delta` before the intersection with constant deceleration, wait
/// until the eastbound tail is `delta` past the intersection, then go.
pub fn expert_policy(s: &VehicleState, cfg: &SimConfig) -> f64 {
    let tail = s.x - cfg.vehicle_length / 2.0;
    if tail > cfg.half_width + cfg.delta {
        return cfg.u_max;
    }
    if s.ydot <= 1e-9 {
        return 0.0;
    }
    let dist = cfg.y_stop() - s.y;
    if dist <= 0.0 {
        return -cfg.u_max;
    }
    let a = -s.ydot * s.ydot / (2.0 * dist);
    // never brake past standstill within one step
    let a = a.max(-s.ydot / cfg.dt);
    a.clamp(-cfg.u_max, cfg.u_max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<VehicleState>,
    pub inputs: Vec<f64>,
    pub collided: bool,
}

/// Closed-loop rollout under `policy`; stops at the first collision.
pub fn simulate(init: VehicleState, cfg: &SimConfig, policy: impl Fn(&VehicleState) -> f64) -> Trajectory {
    let mut states = Vec::with_capacity(cfg.steps);
    let mut inputs = Vec::with_capacity(cfg.steps);
    let mut s = init;
    let mut collided = cfg.collision(&s);
    for _ in 0..cfg.steps {
        if collided {
            break;
        }
        let u = policy(&s);
        states.push(s);
        inputs.push(u);
        s = step(&s, u, cfg.dt);
        collided = cfg.collision(&s);
    }
    Trajectory {
        states,
        inputs,
        collided,
    }
}

fn sample_init(rng: &mut impl Rng, cfg: &SimConfig) -> VehicleState {
    let mut v = [0.0; 4];
    for (k, slot) in v.iter_mut().enumerate() {
        *slot = rng.gen_range(cfg.init_lo[k]..=cfg.init_hi[k]);
    }
    VehicleState::new(v[0], v[1], v[2], v[3])
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertData {
    pub trajectories: Vec<Trajectory>,
    /// Initial states discarded because the expert could not avoid a collision.
    pub rejected: usize,
}

/// Collision-free expert trajectories from uniform initial states.
/// Initial states whose expert rollout collides are redrawn.
pub fn expert_trajectories(seed: u64, count: usize, cfg: &SimConfig) -> Result<ExpertData> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trajectories = Vec::with_capacity(count);
    let mut rejected = 0;
    let limit = 100 * count.max(1);
    while trajectories.len() < count {
        let t = simulate(sample_init(&mut rng, cfg), cfg, |s| expert_policy(s, cfg));
        if t.collided {
            rejected += 1;
            if rejected > limit {
                return Err(Error::invalid("init box", "expert collides on almost every initial state"));
            }
        } else {
            trajectories.push(t);
        }
    }
    Ok(ExpertData { trajectories, rejected })
}

/// Imitation targets `pi = -u` for every visited state.
pub fn imitation_dataset(data: &ExpertData) -> Result<Dataset> {
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for t in &data.trajectories {
        for (s, &u) in t.states.iter().zip(&t.inputs) {
            inputs.push(s.to_vec());
            targets.push(-u);
        }
    }
    Dataset::new(inputs, targets)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoConfig {
    pub seed: u64,
    pub trajectories: usize,
    pub m: usize,
    pub n: usize,
    pub train: TrainConfig,
    pub grid_y: usize,
    pub grid_ydot: usize,
    pub sim: SimConfig,
}

/// Seed and batch size of the shipped policy; see the README.
pub const DEMO_SEED: u64 = 2;
pub const DEMO_BATCH: usize = 4;

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            seed: DEMO_SEED,
            trajectories: 500,
            m: 10,
            n: 10,
            train: TrainConfig::new(20, 0.01, DEMO_BATCH, DEMO_SEED, Loss::Mse),
            grid_y: 20,
            grid_ydot: 20,
            sim: SimConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub y: f64,
    pub ydot: f64,
    pub worst_u: f64,
}

#[derive(Debug, Clone)]
pub struct DemoReport {
    pub policy: MinMaxModel,
    pub epoch_losses: Vec<f64>,
    pub rejected: usize,
    pub samples: usize,
    pub certificate: CertificationResult,
    pub sweep: Vec<SweepRow>,
    /// Adjacent grid pairs where a closer or faster ego got a *larger* worst-case input.
    pub monotone_violations: usize,
}

impl DemoReport {
    /// Braking certified: `min_X pi > 0`, i.e. worst-case `u < 0`.
    pub fn certified_braking(&self) -> bool {
        self.certificate.status == CertStatus::CertifiedRobust && self.certificate.p_star > 0.0
    }

    pub fn sweep_csv(&self) -> String {
        let mut out = String::from("y,ydot,worst_u\n");
        for r in &self.sweep {
            out.push_str(&format!("{:.16e},{:.16e},{:.16e}\n", r.y, r.ydot, r.worst_u));
        }
        out
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Out<'a> {
            status: CertStatus,
            certified_braking: bool,
            min_policy: f64,
            worst_u: f64,
            gap: f64,
            slater: crate::certify::SlaterStatus,
            attack: &'a [f64],
            samples: usize,
            rejected_initial_states: usize,
            final_train_loss: f64,
            sweep_points: usize,
            monotone_violations: usize,
        }
        crate::json::to_string(&Out {
            status: self.certificate.status,
            certified_braking: self.certified_braking(),
            min_policy: self.certificate.p_star,
            worst_u: -self.certificate.p_star,
            gap: self.certificate.gap,
            slater: self.certificate.slater,
            attack: &self.certificate.attack,
            samples: self.samples,
            rejected_initial_states: self.rejected,
            final_train_loss: self.epoch_losses.last().copied().unwrap_or(f64::NAN),
            sweep_points: self.sweep.len(),
            monotone_violations: self.monotone_violations,
        })
    }
}

fn linspace(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    if k <= 1 {
        return vec![lo];
    }
    (0..k).map(|s| lo + (hi - lo) * s as f64 / (k - 1) as f64).collect()
}

/// The approach set as an attack set.
pub fn certified_set(cfg: &SimConfig) -> Result<AttackSet> {
    let (lo, hi) = cfg.certified_box();
    AttackSet::boxed(&lo, &hi)
}

/// Worst-case ego input `max u = -min pi` over all eastbound states in the
/// approach set, with the ego fixed at `(y, ydot)`.
pub fn slice_worst_input(
    policy: &MinMaxModel,
    cfg: &SimConfig,
    y: f64,
    ydot: f64,
    opts: &CertifyOptions,
) -> Result<f64> {
    let (lo, hi) = cfg.certified_box();
    let slice = policy.fix_coordinates(&[(2, y), (3, ydot)])?;
    let set = AttackSet::boxed(&lo[..2], &hi[..2])?;
    let r = certify(&slice, &set, opts)?;
    if r.status == CertStatus::Indeterminate {
        return Err(Error::Indeterminate(format!(
            "slice (y, ydot) = ({y}, {ydot}): {}",
            r.diagnostics.reason.unwrap_or_default()
        )));
    }
    Ok(-r.p_star)
}

/// The same quantity through enumeration on the full 4-D set with the ego
/// coordinates pinned by a degenerate box.
pub fn slice_worst_input_oracle(policy: &MinMaxModel, cfg: &SimConfig, y: f64, ydot: f64) -> Result<f64> {
    let (mut lo, mut hi) = cfg.certified_box();
    lo[2] = y;
    hi[2] = y;
    lo[3] = ydot;
    hi[3] = ydot;
    let set = AttackSet::boxed(&lo, &hi)?;
    Ok(-enumerate_oracle(policy, &set, &opts_solve())?)
}

fn opts_solve() -> crate::conic::SolveOptions {
    crate::conic::SolveOptions::default()
}

pub fn sweep(policy: &MinMaxModel, cfg: &SimConfig, ny: usize, nydot: usize, opts: &CertifyOptions) -> Result<Vec<SweepRow>> {
    let (lo, hi) = cfg.certified_box();
    let ys = linspace(lo[2], hi[2], ny);
    let yds = linspace(lo[3], hi[3], nydot);
    let grid: Vec<(f64, f64)> = ys.iter().flat_map(|&y| yds.iter().map(move |&yd| (y, yd))).collect();
    grid.par_iter()
        .map(|&(y, ydot)| {
            Ok(SweepRow {
                y,
                ydot,
                worst_u: slice_worst_input(policy, cfg, y, ydot, opts)?,
            })
        })
        .collect()
}

fn count_monotone_violations(rows: &[SweepRow], ny: usize, nydot: usize) -> usize {
    let at = |a: usize, b: usize| rows[a * nydot + b].worst_u;
    let mut bad = 0;
    for a in 0..ny {
        for b in 0..nydot {
            if a + 1 < ny && at(a + 1, b) > at(a, b) + 1e-6 {
                bad += 1;
            }
            if b + 1 < nydot && at(a, b + 1) > at(a, b) + 1e-6 {
                bad += 1;
            }
        }
    }
    bad
}

/// Expert data, imitation training, certification over the approach set
/// and the `(y, ydot)` sweep.
pub fn run_demo(cfg: &DemoConfig, opts: &CertifyOptions) -> Result<DemoReport> {
    let data = expert_trajectories(cfg.seed, cfg.trajectories, &cfg.sim)?;
    let dataset = imitation_dataset(&data)?;
    let init = init_model(4, cfg.m, cfg.n, &dataset, cfg.seed)?;
    let trained = train(&init, &dataset, &cfg.train)?;
    let policy = trained.model;
    let certificate = certify(&policy, &certified_set(&cfg.sim)?, opts)?;
    let rows = sweep(&policy, &cfg.sim, cfg.grid_y, cfg.grid_ydot, opts)?;
    let monotone_violations = count_monotone_violations(&rows, cfg.grid_y, cfg.grid_ydot);
    Ok(DemoReport {
        policy,
        epoch_losses: trained.epoch_losses,
        rejected: data.rejected,
        samples: dataset.len(),
        certificate,
        sweep: rows,
        monotone_violations,
    })
}
