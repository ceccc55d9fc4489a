//! Exact certification of `p* = inf_{x in X} g(x)`.
//!
//! The nonconvex problem is solved through two convex programs:
//!
//! * the *primal* over weighted atoms: variables `lambda_i, eta_i, x_i` with
//!   `persp c_k(x_i, lambda_i) <= 0`, `a_ij . x_i + b_ij lambda_i <= eta_i`,
//!   `lambda` in the simplex, minimizing `sum eta_i`;
//! * the *dual*: maximize `-alpha` subject to, for each component `i`,
//!   `g_i*(y_i) + sum_k persp c_k*(z_ik, beta_ik) <= alpha` and
//!   `y_i + sum_k z_ik = 0`. The conjugate `g_i*` is never formed; its
//!   epigraph is described by one nonnegative multiplier vector `nu_ij` per
//!   piece together with simplex weights `theta_i` placing `y_i` in the hull
//!   of the slopes.
//!
//! Under boundedness of `X`, nonredundant components and a Slater point for
//! the dual, both optimal values equal `p*`, and every primal atom
//! `x_i / lambda_i` with `lambda_i > 0` is a worst-case attack.

use serde::Serialize;

use crate::attack_set::{encode_membership, AttackSet, ConstraintFn, Norm};
use crate::conic::{ConicProgram, ConicSolution, ProgramBuilder, Sense, SolveOptions, SolveStatus, Var};
use crate::error::{check_dim, Error, Result};
use crate::json;
use crate::model::MinMaxModel;

/// Atoms with weight at or below this are treated as numerical noise.
pub const LAMBDA_MIN: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CertifyOptions {
    pub solve: SolveOptions,
    /// Tightening applied to the dual's cone constraints in the Slater check.
    pub slater_eps: f64,
    pub lambda_min: f64,
    /// Relative primal/dual agreement required, `tol * (1 + |primal|)`.
    pub duality_tol: f64,
    /// Relative agreement between `g(attack)` and the primal value.
    pub value_tol: f64,
    /// Constraint slack allowed for the extracted attack.
    pub containment_tol: f64,
    /// Skip redundancy pruning (the caller already pruned the model).
    pub assume_pruned: bool,
    /// Components whose primal weight falls below this are pinned to zero
    /// and the primal re-solved; the restricted solution replaces the first
    /// one when the objective agrees within `value_tol`. Zero disables.
    pub purify_weight: f64,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        Self {
            solve: SolveOptions::default(),
            slater_eps: 1e-6,
            lambda_min: LAMBDA_MIN,
            duality_tol: 1e-5,
            value_tol: 1e-6,
            containment_tol: 1e-6,
            assume_pruned: false,
            purify_weight: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SlaterStatus {
    Ok,
    Fail,
    Indeterminate,
}

impl SlaterStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SlaterStatus::Ok => "ok",
            SlaterStatus::Fail => "fail",
            SlaterStatus::Indeterminate => "indeterminate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CertStatus {
    #[serde(rename = "certified")]
    CertifiedRobust,
    #[serde(rename = "falsified")]
    Falsified,
    #[serde(rename = "indeterminate")]
    Indeterminate,
}

impl CertStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            CertStatus::CertifiedRobust => "certified",
            CertStatus::Falsified => "falsified",
            CertStatus::Indeterminate => "indeterminate",
        }
    }
}

// ---------------------------------------------------------------------------
// Redundancy pruning

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PruneReport {
    /// `(i, j)` pairs of the input model that were dropped.
    pub removed: Vec<(usize, usize)>,
    /// Pieces whose activity LP did not solve cleanly; kept.
    pub undecided: Vec<(usize, usize)>,
}

/// Whether piece `j` of component `i` attains the component maximum
/// somewhere: feasibility of `(a_il - a_ij) . x + (b_il - b_ij) <= 0` for all `l`.
pub fn piece_is_active(model: &MinMaxModel, i: usize, j: usize, opts: &SolveOptions) -> Option<bool> {
    let d = model.dim();
    let mut pb = ProgramBuilder::new();
    let x = pb.add_variables(d);
    let aj = model.slope(i, j);
    for l in 0..model.num_pieces() {
        if l == j {
            continue;
        }
        let al = model.slope(i, l);
        let terms: Vec<(Var, f64)> = (0..d).map(|r| (x[r], al[r] - aj[r])).collect();
        pb.add_le(&terms, model.offset(i, j) - model.offset(i, l)).ok()?;
    }
    pb.set_objective(Sense::Minimize, &[], 0.0);
    match pb.finish().ok()?.solve(opts).status {
        SolveStatus::Optimal => Some(true),
        SolveStatus::Infeasible => Some(false),
        _ => None,
    }
}

/// Drops affine pieces that are never active. The result represents the
/// same function and every retained piece is active somewhere.
pub fn prune_redundant(model: &MinMaxModel, opts: &SolveOptions) -> Result<(MinMaxModel, PruneReport)> {
    let mut report = PruneReport::default();
    let mut keep = Vec::with_capacity(model.num_components());
    for i in 0..model.num_components() {
        let mut row = Vec::new();
        for j in 0..model.num_pieces() {
            match piece_is_active(model, i, j, opts) {
                Some(true) => row.push(j),
                Some(false) => report.removed.push((i, j)),
                None => {
                    report.undecided.push((i, j));
                    row.push(j);
                }
            }
        }
        if row.is_empty() {
            return Err(Error::Solver(format!("every piece of component {i} was reported inactive")));
        }
        keep.push(row);
    }
    if report.removed.is_empty() {
        return Ok((model.clone(), report));
    }
    Ok((model.select_pieces(&keep)?, report))
}

fn check_instance(model: &MinMaxModel, set: &AttackSet) -> Result<()> {
    check_dim(model.dim(), set.dim())
}

fn ensure_bounded(set: &AttackSet) -> Result<()> {
    if set.verify_bounded()? {
        Ok(())
    } else {
        Err(Error::UnboundedSet)
    }
}

// ---------------------------------------------------------------------------
// Primal program

/// The primal program together with the handles needed to read it back.
#[derive(Debug, Clone)]
pub struct PrimalProgram {
    pub program: ConicProgram,
    lambda: Vec<Var>,
    eta: Vec<Var>,
    atoms: Vec<Vec<Var>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrimalSolution {
    pub lambda: Vec<f64>,
    pub eta: Vec<f64>,
    /// The scaled atoms `x_i` (not yet divided by `lambda_i`).
    pub x_atoms: Vec<Vec<f64>>,
    pub objective: f64,
}

impl PrimalProgram {
    pub fn read(&self, sol: &ConicSolution) -> PrimalSolution {
        PrimalSolution {
            lambda: sol.values(&self.lambda),
            eta: sol.values(&self.eta),
            x_atoms: self.atoms.iter().map(|xi| sol.values(xi)).collect(),
            objective: sol.objective,
        }
    }
}

fn primal_program(model: &MinMaxModel, set: &AttackSet) -> Result<PrimalProgram> {
    primal_program_pinned(model, set, &[])
}

/// The primal with `lambda_i = 0` imposed for every `i` in `pinned`.
fn primal_program_pinned(model: &MinMaxModel, set: &AttackSet, pinned: &[usize]) -> Result<PrimalProgram> {
    check_instance(model, set)?;
    let (d, m, n) = (model.dim(), model.num_components(), model.num_pieces());
    let mut pb = ProgramBuilder::new();
    let lambda = pb.add_nonneg_variables(m);
    let eta = pb.add_variables(m);
    let atoms: Vec<Vec<Var>> = (0..m).map(|_| pb.add_variables(d)).collect();

    let simplex: Vec<(Var, f64)> = lambda.iter().map(|&l| (l, 1.0)).collect();
    pb.add_equality(&simplex, 1.0)?;
    for &i in pinned {
        pb.add_equality(&[(lambda[i], 1.0)], 0.0)?;
    }

    for i in 0..m {
        for c in set.constraints() {
            encode_membership(&mut pb, c, &atoms[i], lambda[i])?;
        }
        for j in 0..n {
            let a = model.slope(i, j);
            let mut terms: Vec<(Var, f64)> = atoms[i].iter().copied().zip(a.iter().copied()).collect();
            terms.push((lambda[i], model.offset(i, j)));
            terms.push((eta[i], -1.0));
            pb.add_le(&terms, 0.0)?;
        }
    }
    let objective: Vec<(Var, f64)> = eta.iter().map(|&e| (e, 1.0)).collect();
    pb.set_objective(Sense::Minimize, &objective, 0.0);
    Ok(PrimalProgram {
        program: pb.finish()?,
        lambda,
        eta,
        atoms,
    })
}

/// Interior-point optima spread a gap-sized weight over near-optimal
/// components, and dividing by such a weight magnifies solver error in the
/// atom. Re-solving with those components pinned to zero gives another
/// optimal solution whose atoms all carry real weight.
fn purify(
    model: &MinMaxModel,
    set: &AttackSet,
    sol: &PrimalSolution,
    opts: &CertifyOptions,
) -> Result<Option<PrimalSolution>> {
    if !(opts.purify_weight > 0.0) {
        return Ok(None);
    }
    let pinned: Vec<usize> = (0..sol.lambda.len()).filter(|&i| sol.lambda[i] < opts.purify_weight).collect();
    if pinned.is_empty() || pinned.len() == sol.lambda.len() {
        return Ok(None);
    }
    let program = primal_program_pinned(model, set, &pinned)?;
    let re = program.program.solve(&opts.solve);
    if re.status != SolveStatus::Optimal
        || (re.objective - sol.objective).abs() > opts.value_tol * (1.0 + sol.objective.abs())
    {
        return Ok(None);
    }
    Ok(Some(program.read(&re)))
}

/// Builds the primal (atom) program. Rejects unbounded attack sets.
pub fn build_primal(model: &MinMaxModel, set: &AttackSet) -> Result<PrimalProgram> {
    check_instance(model, set)?;
    ensure_bounded(set)?;
    primal_program(model, set)
}

// ---------------------------------------------------------------------------
// Dual program

#[derive(Debug, Clone)]
pub struct DualProgram {
    pub program: ConicProgram,
    alpha: Var,
    y: Vec<Vec<Var>>,
    theta: Vec<Vec<Var>>,
    nu: Vec<Vec<Vec<Var>>>,
    z: Vec<Vec<Vec<Var>>>,
    beta: Vec<Vec<Var>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualSolution {
    pub alpha: f64,
    /// `y[i]`, length `d`.
    pub y: Vec<Vec<f64>>,
    /// `theta[i]`, simplex weights of length `n`.
    pub theta: Vec<Vec<f64>>,
    /// `nu[i][j]`, length `n`.
    pub nu: Vec<Vec<Vec<f64>>>,
    /// `z[i][k]`, length `d`.
    pub z: Vec<Vec<Vec<f64>>>,
    /// `beta[i][k]`.
    pub beta: Vec<Vec<f64>>,
    pub objective: f64,
}

impl DualProgram {
    pub fn read(&self, sol: &ConicSolution) -> DualSolution {
        DualSolution {
            alpha: sol.value(self.alpha),
            y: self.y.iter().map(|v| sol.values(v)).collect(),
            theta: self.theta.iter().map(|v| sol.values(v)).collect(),
            nu: self.nu.iter().map(|row| row.iter().map(|v| sol.values(v)).collect()).collect(),
            z: self.z.iter().map(|row| row.iter().map(|v| sol.values(v)).collect()).collect(),
            beta: self.beta.iter().map(|v| sol.values(v)).collect(),
            objective: sol.objective,
        }
    }
}

/// Adds `||z||_* <= beta - tighten` for a norm-ball constraint, or
/// `z = beta * psi` for a half-space, and returns the linear terms of the
/// perspective conjugate (`z . center + radius * beta` or `-omega * beta`).
fn encode_conjugate_term(
    pb: &mut ProgramBuilder,
    c: &ConstraintFn,
    z: &[Var],
    beta: Var,
    tighten: f64,
) -> Result<Vec<(Var, f64)>> {
    match c {
        ConstraintFn::HalfSpace { psi, omega } => {
            for (&zr, &pr) in z.iter().zip(psi) {
                pb.add_equality(&[(zr, 1.0), (beta, -pr)], 0.0)?;
            }
            Ok(vec![(beta, -omega)])
        }
        ConstraintFn::NormBall { norm, center, radius } => {
            match norm.dual() {
                Norm::L2 => {
                    let t = pb.add_variable();
                    pb.add_equality(&[(t, 1.0), (beta, -1.0)], -tighten)?;
                    pb.add_soc(t, z)?;
                }
                Norm::LInf => {
                    for &zr in z {
                        pb.add_le(&[(zr, 1.0), (beta, -1.0)], -tighten)?;
                        pb.add_le(&[(zr, -1.0), (beta, -1.0)], -tighten)?;
                    }
                }
                Norm::L1 => {
                    let w = pb.add_variables(z.len());
                    for (&zr, &wr) in z.iter().zip(&w) {
                        pb.add_le(&[(zr, 1.0), (wr, -1.0)], 0.0)?;
                        pb.add_le(&[(zr, -1.0), (wr, -1.0)], 0.0)?;
                    }
                    let mut terms: Vec<(Var, f64)> = w.iter().map(|&wr| (wr, 1.0)).collect();
                    terms.push((beta, -1.0));
                    pb.add_le(&terms, -tighten)?;
                }
            }
            let mut terms: Vec<(Var, f64)> = z.iter().copied().zip(center.iter().copied()).collect();
            terms.push((beta, *radius));
            Ok(terms)
        }
    }
}

fn dual_program(model: &MinMaxModel, set: &AttackSet, tighten: f64) -> Result<DualProgram> {
    check_instance(model, set)?;
    let (d, m, n) = (model.dim(), model.num_components(), model.num_pieces());
    let kk = set.constraints().len();
    let mut pb = ProgramBuilder::new();
    let alpha = pb.add_variable();
    let mut y_all = Vec::with_capacity(m);
    let mut theta_all = Vec::with_capacity(m);
    let mut nu_all = Vec::with_capacity(m);
    let mut z_all = Vec::with_capacity(m);
    let mut beta_all = Vec::with_capacity(m);

    for i in 0..m {
        let y = pb.add_variables(d);

        // y_i = sum_j theta_ij a_ij with theta_i in the simplex
        let theta = pb.add_nonneg_variables(n);
        let ones: Vec<(Var, f64)> = theta.iter().map(|&t| (t, 1.0)).collect();
        pb.add_equality(&ones, 1.0)?;
        for r in 0..d {
            let mut terms = vec![(y[r], 1.0)];
            terms.extend((0..n).map(|j| (theta[j], -model.slope(i, j)[r])));
            pb.add_equality(&terms, 0.0)?;
        }

        // perspective-conjugate terms of the attack set
        let mut z_i = Vec::with_capacity(kk);
        let mut beta_i = Vec::with_capacity(kk);
        let mut conj_terms: Vec<(Var, f64)> = Vec::new();
        for c in set.constraints() {
            let z = pb.add_variables(d);
            let beta = pb.add_nonneg_variable();
            let tighten_k = if c.is_polyhedral() { 0.0 } else { tighten };
            conj_terms.extend(encode_conjugate_term(&mut pb, c, &z, beta, tighten_k)?);
            z_i.push(z);
            beta_i.push(beta);
        }

        // y_i + sum_k z_ik = 0
        for r in 0..d {
            let mut terms = vec![(y[r], 1.0)];
            terms.extend(z_i.iter().map(|z| (z[r], 1.0)));
            pb.add_equality(&terms, 0.0)?;
        }

        // conjugate epigraph of g_i, one multiplier vector per piece
        let mut nu_i = Vec::with_capacity(n);
        for j in 0..n {
            let nu = pb.add_nonneg_variables(n);
            let aj = model.slope(i, j);
            for r in 0..d {
                let mut terms = vec![(y[r], 1.0)];
                for l in 0..n {
                    let coef = aj[r] - model.slope(i, l)[r];
                    if coef != 0.0 {
                        terms.push((nu[l], coef));
                    }
                }
                pb.add_equality(&terms, aj[r])?;
            }
            let bj = model.offset(i, j);
            let mut terms: Vec<(Var, f64)> = Vec::with_capacity(n + conj_terms.len() + 1);
            for l in 0..n {
                let coef = bj - model.offset(i, l);
                if coef != 0.0 {
                    terms.push((nu[l], coef));
                }
            }
            terms.extend(conj_terms.iter().copied());
            terms.push((alpha, -1.0));
            pb.add_le(&terms, bj)?;
            nu_i.push(nu);
        }

        y_all.push(y);
        theta_all.push(theta);
        nu_all.push(nu_i);
        z_all.push(z_i);
        beta_all.push(beta_i);
    }

    pb.set_objective(Sense::Maximize, &[(alpha, -1.0)], 0.0);
    Ok(DualProgram {
        program: pb.finish()?,
        alpha,
        y: y_all,
        theta: theta_all,
        nu: nu_all,
        z: z_all,
        beta: beta_all,
    })
}

/// Builds the dual program. Rejects unbounded attack sets.
pub fn build_dual(model: &MinMaxModel, set: &AttackSet) -> Result<DualProgram> {
    check_instance(model, set)?;
    ensure_bounded(set)?;
    dual_program(model, set, 0.0)
}

/// Solves the dual with every cone constraint tightened by `eps`.
/// Purely polyhedral sets only need plain dual feasibility.
pub fn verify_slater(model: &MinMaxModel, set: &AttackSet, eps: f64, opts: &SolveOptions) -> Result<SlaterStatus> {
    check_instance(model, set)?;
    if !(eps > 0.0) {
        return Err(Error::invalid("slater_eps", "must be positive"));
    }
    Ok(slater_from_program(&dual_program(model, set, eps)?, opts))
}

fn slater_from_program(program: &DualProgram, opts: &SolveOptions) -> SlaterStatus {
    match program.program.solve(opts).status {
        SolveStatus::Optimal => SlaterStatus::Ok,
        SolveStatus::Infeasible | SolveStatus::Unbounded => SlaterStatus::Fail,
        SolveStatus::Inaccurate => SlaterStatus::Indeterminate,
    }
}

// ---------------------------------------------------------------------------
// Attack extraction

#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub component: usize,
    pub weight: f64,
    pub point: Vec<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractedAttack {
    pub attack: Vec<f64>,
    pub value: f64,
    pub atom_weights: Vec<f64>,
    /// Every atom above the weight threshold.
    pub atoms: Vec<Atom>,
}

/// Recovers a worst-case attack from a primal solution: among the atoms
/// `x_i / lambda_i` with `lambda_i > lambda_min` that lie in `X`, the one
/// with the smallest model value.
pub fn extract_attack(
    primal: &PrimalSolution,
    model: &MinMaxModel,
    set: &AttackSet,
    opts: &CertifyOptions,
) -> Result<ExtractedAttack> {
    check_instance(model, set)?;
    let mut atoms = Vec::new();
    for (i, (&w, xi)) in primal.lambda.iter().zip(&primal.x_atoms).enumerate() {
        if w > opts.lambda_min {
            let point: Vec<f64> = xi.iter().map(|v| v / w).collect();
            let value = model.evaluate(&point)?;
            atoms.push(Atom {
                component: i,
                weight: w,
                point,
                value,
            });
        }
    }
    if atoms.is_empty() {
        return Err(Error::Degenerate(format!(
            "no atom weight exceeds {:e} (weights {:?})",
            opts.lambda_min, primal.lambda
        )));
    }
    let mut best: Option<&Atom> = None;
    for atom in &atoms {
        if !set.contains(&atom.point, opts.containment_tol)? {
            continue;
        }
        if best.map_or(true, |b| atom.value < b.value) {
            best = Some(atom);
        }
    }
    let best = best.ok_or_else(|| {
        Error::Degenerate(format!(
            "no atom lies in the attack set within {:e}",
            opts.containment_tol
        ))
    })?;
    Ok(ExtractedAttack {
        attack: best.point.clone(),
        value: best.value,
        atom_weights: primal.lambda.clone(),
        atoms: atoms.clone(),
    })
}

// ---------------------------------------------------------------------------
// Certification

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub primal_status: SolveStatus,
    pub dual_status: SolveStatus,
    pub primal_value: f64,
    pub dual_value: f64,
    pub pruned_pieces: usize,
    /// Whether the atoms come from the purified re-solve.
    pub purified: bool,
    pub atoms: Vec<Atom>,
    /// Why the result is indeterminate, when it is.
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertificationResult {
    pub p_star: f64,
    pub gap: f64,
    pub attack: Vec<f64>,
    pub atom_weights: Vec<f64>,
    pub status: CertStatus,
    pub slater: SlaterStatus,
    pub diagnostics: Diagnostics,
}

#[derive(Serialize)]
struct CertificateJson<'a> {
    p_star: f64,
    gap: f64,
    status: CertStatus,
    attack: &'a [f64],
    atom_weights: &'a [f64],
    slater: SlaterStatus,
}

impl CertificationResult {
    pub fn is_certified(&self) -> bool {
        self.status == CertStatus::CertifiedRobust
    }

    /// `{"p_star", "gap", "status", "attack", "atom_weights", "slater"}`.
    pub fn to_json(&self) -> String {
        json::to_string(&CertificateJson {
            p_star: self.p_star,
            gap: self.gap,
            status: self.status,
            attack: &self.attack,
            atom_weights: &self.atom_weights,
            slater: self.slater,
        })
    }
}

/// Certifies `inf_{x in X} g(x) >= 0` or produces a worst-case attack.
///
/// The model is pruned first. The result is `Indeterminate` whenever the
/// Slater check does not pass, either program fails to solve, the two values
/// disagree beyond `duality_tol`, or the extracted attack does not reproduce
/// the primal value; otherwise the sign of `g(attack)` decides between
/// `CertifiedRobust` and `Falsified`.
pub fn certify(model: &MinMaxModel, set: &AttackSet, opts: &CertifyOptions) -> Result<CertificationResult> {
    check_instance(model, set)?;
    ensure_bounded(set)?;
    let (pruned, report) = if opts.assume_pruned {
        (model.clone(), PruneReport::default())
    } else {
        prune_redundant(model, &opts.solve)?
    };

    let primal = primal_program(&pruned, set)?;
    let dual = dual_program(&pruned, set, 0.0)?;
    let slater_prog = if set.is_polyhedral() {
        None
    } else {
        Some(dual_program(&pruned, set, opts.slater_eps)?)
    };

    let ((primal_sol, dual_sol), slater_sol) = rayon::join(
        || rayon::join(|| primal.program.solve(&opts.solve), || dual.program.solve(&opts.solve)),
        || slater_prog.as_ref().map(|p| slater_from_program(p, &opts.solve)),
    );
    let slater = slater_sol.unwrap_or(match dual_sol.status {
        SolveStatus::Optimal => SlaterStatus::Ok,
        SolveStatus::Infeasible | SolveStatus::Unbounded => SlaterStatus::Fail,
        SolveStatus::Inaccurate => SlaterStatus::Indeterminate,
    });

    let primal_value = primal_sol.objective;
    let dual_value = dual_sol.objective;
    let gap = (primal_value - dual_value).abs();
    let mut diagnostics = Diagnostics {
        primal_status: primal_sol.status,
        dual_status: dual_sol.status,
        primal_value,
        dual_value,
        pruned_pieces: report.removed.len(),
        purified: false,
        atoms: Vec::new(),
        reason: None,
    };
    let indeterminate = |p_star: f64, gap: f64, diagnostics: Diagnostics, attack: Vec<f64>, weights: Vec<f64>| {
        CertificationResult {
            p_star,
            gap,
            attack,
            atom_weights: weights,
            status: CertStatus::Indeterminate,
            slater,
            diagnostics,
        }
    };

    if primal_sol.status != SolveStatus::Optimal {
        diagnostics.reason = Some(format!("primal program {}", primal_sol.status.as_str()));
        let fallback = if dual_sol.is_optimal() { dual_value } else { f64::NAN };
        return Ok(indeterminate(fallback, f64::NAN, diagnostics, Vec::new(), Vec::new()));
    }
    let mut primal_solution = primal.read(&primal_sol);
    if let Some(p) = purify(&pruned, set, &primal_solution, opts)? {
        primal_solution = p;
        diagnostics.purified = true;
    }
    let extracted = extract_attack(&primal_solution, &pruned, set, opts);
    let (attack, weights) = match &extracted {
        Ok(e) => (e.attack.clone(), e.atom_weights.clone()),
        Err(_) => (Vec::new(), primal_solution.lambda.clone()),
    };
    if let Ok(e) = &extracted {
        diagnostics.atoms = e.atoms.clone();
    }

    let scale = 1.0 + primal_value.abs();
    let reason = if dual_sol.status != SolveStatus::Optimal {
        Some(format!("dual program {}", dual_sol.status.as_str()))
    } else if slater != SlaterStatus::Ok {
        Some(format!("Slater check {}", slater.as_str()))
    } else if gap > opts.duality_tol * scale {
        Some(format!("primal {primal_value} and dual {dual_value} disagree"))
    } else if let Err(e) = &extracted {
        Some(e.to_string())
    } else {
        let e = extracted.as_ref().expect("checked above");
        if (e.value - primal_value).abs() > opts.value_tol * scale {
            Some(format!("attack value {} does not match primal value {primal_value}", e.value))
        } else {
            None
        }
    };
    let gap_out = if dual_sol.is_optimal() { gap } else { f64::NAN };
    if reason.is_some() {
        diagnostics.reason = reason;
        return Ok(indeterminate(primal_value, gap_out, diagnostics, attack, weights));
    }

    let value_at_attack = extracted.expect("checked above").value;
    let status = if value_at_attack >= 0.0 {
        CertStatus::CertifiedRobust
    } else {
        CertStatus::Falsified
    };
    Ok(CertificationResult {
        p_star: primal_value,
        gap,
        attack,
        atom_weights: weights,
        status,
        slater,
        diagnostics,
    })
}

// ---------------------------------------------------------------------------
// Oracles

/// `min_{x in X} g_i(x)` as a direct conic solve; returns value and minimizer.
pub fn minimize_component(
    model: &MinMaxModel,
    i: usize,
    set: &AttackSet,
    opts: &SolveOptions,
) -> Result<(f64, Vec<f64>)> {
    check_instance(model, set)?;
    let d = model.dim();
    let mut pb = ProgramBuilder::new();
    let x = pb.add_variables(d);
    let t = pb.add_variable();
    let one = pb.add_variable();
    pb.add_equality(&[(one, 1.0)], 1.0)?;
    for c in set.constraints() {
        encode_membership(&mut pb, c, &x, one)?;
    }
    for j in 0..model.num_pieces() {
        let mut terms: Vec<(Var, f64)> = x.iter().copied().zip(model.slope(i, j).iter().copied()).collect();
        terms.push((t, -1.0));
        pb.add_le(&terms, -model.offset(i, j))?;
    }
    pb.set_objective(Sense::Minimize, &[(t, 1.0)], 0.0);
    let sol = pb.finish()?.solve(opts);
    match sol.status {
        SolveStatus::Optimal => Ok((sol.objective, sol.values(&x))),
        SolveStatus::Infeasible => Err(Error::InfeasibleSet),
        SolveStatus::Unbounded => Err(Error::UnboundedSet),
        SolveStatus::Inaccurate => Err(Error::Solver(format!("component {i} subproblem inaccurate"))),
    }
}

/// `p*` by enumerating the min-index: `min_i min_{x in X} g_i(x)`.
pub fn enumerate_oracle(model: &MinMaxModel, set: &AttackSet, opts: &SolveOptions) -> Result<f64> {
    check_instance(model, set)?;
    ensure_bounded(set)?;
    let mut best = f64::INFINITY;
    for i in 0..model.num_components() {
        best = best.min(minimize_component(model, i, set, opts)?.0);
    }
    Ok(best)
}

/// Feasibility of the multiplier system describing `g_i*(y) <= h`: `y` in
/// the hull of the slopes of component `i` and, for every piece `j`, some
/// `nu_j >= 0` with `y - a_ij + sum_l nu_jl (a_ij - a_il) = 0` and
/// `-b_ij + sum_l nu_jl (b_ij - b_il) <= h`. The component must be nonredundant.
pub fn conjugate_bound_feasible(
    model: &MinMaxModel,
    i: usize,
    y: &[f64],
    h: f64,
    opts: &SolveOptions,
) -> Result<bool> {
    check_dim(model.dim(), y.len())?;
    let (d, n) = (model.dim(), model.num_pieces());
    let mut pb = ProgramBuilder::new();
    let theta = pb.add_nonneg_variables(n);
    let ones: Vec<(Var, f64)> = theta.iter().map(|&t| (t, 1.0)).collect();
    pb.add_equality(&ones, 1.0)?;
    for r in 0..d {
        let terms: Vec<(Var, f64)> = (0..n).map(|j| (theta[j], model.slope(i, j)[r])).collect();
        pb.add_equality(&terms, y[r])?;
    }
    for j in 0..n {
        let nu = pb.add_nonneg_variables(n);
        let aj = model.slope(i, j);
        for r in 0..d {
            let terms: Vec<(Var, f64)> = (0..n).map(|l| (nu[l], aj[r] - model.slope(i, l)[r])).collect();
            pb.add_equality(&terms, aj[r] - y[r])?;
        }
        let bj = model.offset(i, j);
        let terms: Vec<(Var, f64)> = (0..n).map(|l| (nu[l], bj - model.offset(i, l))).collect();
        pb.add_le(&terms, h + bj)?;
    }
    pb.set_objective(Sense::Minimize, &[], 0.0);
    match pb.finish()?.solve(opts).status {
        SolveStatus::Optimal => Ok(true),
        SolveStatus::Infeasible => Ok(false),
        other => Err(Error::Solver(format!("multiplier system {}", other.as_str()))),
    }
}

// ---------------------------------------------------------------------------
// Radius search and certified accuracy

/// Certifies over `{x : ||x - center|| <= eps}`; `eps = 0` evaluates at the center.
pub fn certify_ball(
    model: &MinMaxModel,
    center: &[f64],
    norm: Norm,
    eps: f64,
    opts: &CertifyOptions,
) -> Result<CertificationResult> {
    check_dim(model.dim(), center.len())?;
    if eps > 0.0 {
        let set = AttackSet::ball(norm, center.to_vec(), eps)?;
        return certify(model, &set, opts);
    }
    if eps < 0.0 || eps.is_nan() {
        return Err(Error::invalid("eps", format!("radius must be nonnegative, got {eps}")));
    }
    let value = model.evaluate(center)?;
    Ok(CertificationResult {
        p_star: value,
        gap: 0.0,
        attack: center.to_vec(),
        atom_weights: vec![1.0],
        status: if value >= 0.0 {
            CertStatus::CertifiedRobust
        } else {
            CertStatus::Falsified
        },
        slater: SlaterStatus::Ok,
        diagnostics: Diagnostics {
            primal_status: SolveStatus::Optimal,
            dual_status: SolveStatus::Optimal,
            primal_value: value,
            dual_value: value,
            pruned_pieces: 0,
            purified: false,
            atoms: Vec::new(),
            reason: None,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadiusOptions {
    pub eps_max: f64,
    pub tol: f64,
    pub certify: CertifyOptions,
}

impl Default for RadiusOptions {
    fn default() -> Self {
        Self {
            eps_max: 1.0,
            tol: 1e-3,
            certify: CertifyOptions::default(),
        }
    }
}

/// Largest radius in `[0, eps_max]` found certified by bisection to `tol`.
/// Returns the largest *certified* probe; 0 if the center itself is outside
/// the sensitive regime.
pub fn certified_radius(model: &MinMaxModel, center: &[f64], norm: Norm, opts: &RadiusOptions) -> Result<f64> {
    if model.evaluate(center)? < 0.0 {
        return Ok(0.0);
    }
    let (model, certify_opts) = &pruned_once(model, &opts.certify)?;
    let probe = |eps: f64| -> Result<bool> {
        let r = certify_ball(model, center, norm, eps, certify_opts)?;
        match r.status {
            CertStatus::CertifiedRobust => Ok(true),
            CertStatus::Falsified => Ok(false),
            CertStatus::Indeterminate => Err(Error::Indeterminate(format!(
                "radius probe at eps = {eps}: {}",
                r.diagnostics.reason.unwrap_or_default()
            ))),
        }
    };
    if probe(opts.eps_max)? {
        return Ok(opts.eps_max);
    }
    let (mut lo, mut hi) = (0.0, opts.eps_max);
    while hi - lo > opts.tol {
        let mid = 0.5 * (lo + hi);
        if probe(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Fraction of points labelled `sensitive_label` that are classified as
/// sensitive (`g >= 0`) and certified over the `eps`-ball. Indeterminate
/// certifications count as not certified.
pub fn certified_accuracy<L: PartialEq + Sync>(
    model: &MinMaxModel,
    points: &[(Vec<f64>, L)],
    eps: f64,
    norm: Norm,
    sensitive_label: &L,
    opts: &CertifyOptions,
) -> Result<f64> {
    use rayon::prelude::*;
    if eps < 0.0 {
        return Err(Error::invalid("eps", "radius must be nonnegative"));
    }
    let (model, opts) = &pruned_once(model, opts)?;
    let sensitive: Vec<&Vec<f64>> = points
        .iter()
        .filter(|(_, l)| l == sensitive_label)
        .map(|(x, _)| x)
        .collect();
    if sensitive.is_empty() {
        return Ok(0.0);
    }
    let flags: Vec<bool> = sensitive
        .par_iter()
        .map(|x| -> Result<bool> {
            if model.evaluate(x)? < 0.0 {
                return Ok(false);
            }
            Ok(certify_ball(model, x, norm, eps, opts)?.is_certified())
        })
        .collect::<Result<_>>()?;
    Ok(flags.iter().filter(|&&f| f).count() as f64 / sensitive.len() as f64)
}

fn pruned_once(model: &MinMaxModel, opts: &CertifyOptions) -> Result<(MinMaxModel, CertifyOptions)> {
    if opts.assume_pruned {
        return Ok((model.clone(), *opts));
    }
    let (pruned, _) = prune_redundant(model, &opts.solve)?;
    Ok((pruned, CertifyOptions { assume_pruned: true, ..*opts }))
}

/// Certified accuracy at every radius of an ascending grid. A point
/// falsified at one radius has its attack inside every larger ball, so it
/// is not certified again.
pub fn certified_accuracy_curve<L: PartialEq + Sync>(
    model: &MinMaxModel,
    points: &[(Vec<f64>, L)],
    eps_grid: &[f64],
    norm: Norm,
    sensitive_label: &L,
    opts: &CertifyOptions,
) -> Result<Vec<f64>> {
    use rayon::prelude::*;
    if eps_grid.windows(2).any(|w| !(w[0] <= w[1])) || eps_grid.first().is_some_and(|&e| !(e >= 0.0)) {
        return Err(Error::invalid("eps", "radius grid must be nonnegative and ascending"));
    }
    let (model, opts) = &pruned_once(model, opts)?;
    let sensitive: Vec<&Vec<f64>> = points
        .iter()
        .filter(|(_, l)| l == sensitive_label)
        .map(|(x, _)| x)
        .collect();
    if sensitive.is_empty() {
        return Ok(vec![0.0; eps_grid.len()]);
    }
    let mut alive: Vec<bool> = sensitive
        .iter()
        .map(|x| model.evaluate(x).map(|v| v >= 0.0))
        .collect::<Result<_>>()?;
    let mut curve = Vec::with_capacity(eps_grid.len());
    for &eps in eps_grid {
        let outcome: Vec<Option<CertStatus>> = sensitive
            .par_iter()
            .zip(&alive)
            .map(|(x, &live)| -> Result<Option<CertStatus>> {
                if !live {
                    return Ok(None);
                }
                Ok(Some(certify_ball(model, x, norm, eps, opts)?.status))
            })
            .collect::<Result<_>>()?;
        let mut hits = 0;
        for (live, status) in alive.iter_mut().zip(&outcome) {
            match status {
                Some(CertStatus::CertifiedRobust) => hits += 1,
                Some(CertStatus::Falsified) => *live = false,
                _ => {}
            }
        }
        curve.push(hits as f64 / sensitive.len() as f64);
    }
    Ok(curve)
}
