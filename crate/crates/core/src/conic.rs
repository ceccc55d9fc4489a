//! Linear-objective conic programs over free variables, linear equalities,
//! the nonnegative orthant and second-order cones.
//!
//! Programs are assembled with [`ProgramBuilder`], frozen into an immutable
//! [`ConicProgram`] and solved by an interior-point backend (Clarabel). Only
//! the contract "solve to tolerances, report status and residuals" is relied
//! on elsewhere in the crate.

use std::fmt::Write as _;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EqualityId(usize);

impl EqualityId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct InequalityId(usize);

impl InequalityId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Minimize,
    Maximize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConeKind {
    Nonnegative,
    /// First variable bounds the Euclidean norm of the rest.
    SecondOrder,
}

#[derive(Debug, Clone)]
struct Cone {
    kind: ConeKind,
    vars: Vec<usize>,
}

/// One linear row `terms = rhs` (or `<= rhs` for inequalities).
#[derive(Debug, Clone)]
struct Equality {
    terms: Vec<(usize, f64)>,
    rhs: f64,
}

#[derive(Debug, Clone)]
pub struct ProgramBuilder {
    num_vars: usize,
    equalities: Vec<Equality>,
    inequalities: Vec<Equality>,
    cones: Vec<Cone>,
    cone_of: Vec<Option<usize>>,
    sense: Sense,
    objective: Vec<(usize, f64)>,
    objective_constant: f64,
}

impl Default for ProgramBuilder {
    fn default() -> Self {
        Self::new()
    }
}

impl ProgramBuilder {
    pub fn new() -> Self {
        Self {
            num_vars: 0,
            equalities: Vec::new(),
            inequalities: Vec::new(),
            cones: Vec::new(),
            cone_of: Vec::new(),
            sense: Sense::Minimize,
            objective: Vec::new(),
            objective_constant: 0.0,
        }
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn add_variable(&mut self) -> Var {
        self.num_vars += 1;
        self.cone_of.push(None);
        Var(self.num_vars - 1)
    }

    pub fn add_variables(&mut self, count: usize) -> Vec<Var> {
        (0..count).map(|_| self.add_variable()).collect()
    }

    /// A fresh variable constrained to be `>= 0`.
    pub fn add_nonneg_variable(&mut self) -> Var {
        let v = self.add_variable();
        self.add_nonneg(&[v]).expect("fresh variable has no cone");
        v
    }

    pub fn add_nonneg_variables(&mut self, count: usize) -> Vec<Var> {
        let vs = self.add_variables(count);
        if count > 0 {
            self.add_nonneg(&vs).expect("fresh variables have no cone");
        }
        vs
    }

    fn check_var(&self, v: Var) -> Result<()> {
        if v.0 < self.num_vars {
            Ok(())
        } else {
            Err(Error::Builder(format!(
                "variable index {} out of range ({} variables)",
                v.0, self.num_vars
            )))
        }
    }

    fn make_row(&self, terms: &[(Var, f64)], rhs: f64) -> Result<Equality> {
        for &(v, c) in terms {
            self.check_var(v)?;
            if !c.is_finite() {
                return Err(Error::Builder(format!("non-finite coefficient {c}")));
            }
        }
        if !rhs.is_finite() {
            return Err(Error::Builder(format!("non-finite right-hand side {rhs}")));
        }
        Ok(Equality {
            terms: terms.iter().map(|&(v, c)| (v.0, c)).collect(),
            rhs,
        })
    }

    /// `sum coef * var = rhs`. Repeated variables are summed.
    pub fn add_equality(&mut self, terms: &[(Var, f64)], rhs: f64) -> Result<EqualityId> {
        let row = self.make_row(terms, rhs)?;
        self.equalities.push(row);
        Ok(EqualityId(self.equalities.len() - 1))
    }

    /// `sum coef * var <= rhs`.
    pub fn add_le(&mut self, terms: &[(Var, f64)], rhs: f64) -> Result<InequalityId> {
        let row = self.make_row(terms, rhs)?;
        self.inequalities.push(row);
        Ok(InequalityId(self.inequalities.len() - 1))
    }

    /// `sum coef * var >= rhs`.
    pub fn add_ge(&mut self, terms: &[(Var, f64)], rhs: f64) -> Result<InequalityId> {
        let neg: Vec<(Var, f64)> = terms.iter().map(|&(v, c)| (v, -c)).collect();
        self.add_le(&neg, -rhs)
    }

    fn add_cone(&mut self, kind: ConeKind, vars: &[Var]) -> Result<ConeId> {
        let id = self.cones.len();
        for (pos, &v) in vars.iter().enumerate() {
            self.check_var(v)?;
            if self.cone_of[v.0].is_some() || vars[..pos].contains(&v) {
                return Err(Error::Builder(format!("variable {} is already in a cone", v.0)));
            }
        }
        for &v in vars {
            self.cone_of[v.0] = Some(id);
        }
        self.cones.push(Cone {
            kind,
            vars: vars.iter().map(|v| v.0).collect(),
        });
        Ok(ConeId(id))
    }

    pub fn add_nonneg(&mut self, vars: &[Var]) -> Result<ConeId> {
        if vars.is_empty() {
            return Err(Error::Builder("empty nonnegative cone".into()));
        }
        self.add_cone(ConeKind::Nonnegative, vars)
    }

    /// `||vector|| <= bound`.
    pub fn add_soc(&mut self, bound: Var, vector: &[Var]) -> Result<ConeId> {
        let mut vars = Vec::with_capacity(vector.len() + 1);
        vars.push(bound);
        vars.extend_from_slice(vector);
        self.add_cone(ConeKind::SecondOrder, &vars)
    }

    pub fn set_objective(&mut self, sense: Sense, terms: &[(Var, f64)], constant: f64) {
        self.sense = sense;
        self.objective = terms.iter().map(|&(v, c)| (v.0, c)).collect();
        self.objective_constant = constant;
    }

    pub fn finish(self) -> Result<ConicProgram> {
        for &(v, c) in &self.objective {
            self.check_var(Var(v))?;
            if !c.is_finite() {
                return Err(Error::Builder(format!("non-finite objective coefficient {c}")));
            }
        }
        Ok(ConicProgram {
            num_vars: self.num_vars,
            equalities: self.equalities,
            inequalities: self.inequalities,
            cones: self.cones,
            sense: self.sense,
            objective: self.objective,
            objective_constant: self.objective_constant,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub feas_tol: f64,
    pub gap_tol: f64,
    pub max_iter: u32,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            feas_tol: 1e-8,
            gap_tol: 1e-8,
            max_iter: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    Inaccurate,
}

impl SolveStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::Unbounded => "unbounded",
            SolveStatus::Inaccurate => "inaccurate",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConicSolution {
    pub status: SolveStatus,
    pub x: Vec<f64>,
    /// Multipliers of the equality rows, in insertion order.
    pub equality_duals: Vec<f64>,
    /// Objective in the program's own sense, constant included.
    pub objective: f64,
    pub dual_objective: f64,
    /// Backend-normalized primal residual.
    pub primal_residual: f64,
    /// Relative primal-dual gap.
    pub gap: f64,
    /// Largest unscaled violation of any equality row or cone.
    pub max_violation: f64,
    pub iterations: u32,
    pub backend_status: String,
}

impl ConicSolution {
    pub fn value(&self, v: Var) -> f64 {
        self.x[v.0]
    }

    pub fn values(&self, vs: &[Var]) -> Vec<f64> {
        vs.iter().map(|&v| self.x[v.0]).collect()
    }

    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }
}

/// A finalized program; immutable and safe to solve from several threads.
#[derive(Debug, Clone)]
pub struct ConicProgram {
    num_vars: usize,
    equalities: Vec<Equality>,
    inequalities: Vec<Equality>,
    cones: Vec<Cone>,
    sense: Sense,
    objective: Vec<(usize, f64)>,
    objective_constant: f64,
}

impl ConicProgram {
    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn num_equalities(&self) -> usize {
        self.equalities.len()
    }

    pub fn num_inequalities(&self) -> usize {
        self.inequalities.len()
    }

    pub fn solve(&self, opts: &SolveOptions) -> ConicSolution {
        let n = self.num_vars;
        let flip = match self.sense {
            Sense::Minimize => 1.0,
            Sense::Maximize => -1.0,
        };
        let mut q = vec![0.0; n];
        for &(v, c) in &self.objective {
            q[v] += flip * c;
        }

        let mut rows = Vec::new();
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        let mut b = Vec::new();
        let mut cones = Vec::new();

        for eq in &self.equalities {
            let r = b.len();
            for &(v, c) in &eq.terms {
                rows.push(r);
                cols.push(v);
                vals.push(c);
            }
            b.push(eq.rhs);
        }
        if !self.equalities.is_empty() {
            cones.push(SupportedConeT::ZeroConeT(self.equalities.len()));
        }
        // Inequality rows a.x + s = rhs come first in the orthant block,
        // followed by s = x on the cone variables (rows -x_v + s = 0).
        for ineq in &self.inequalities {
            let r = b.len();
            for &(v, c) in &ineq.terms {
                rows.push(r);
                cols.push(v);
                vals.push(c);
            }
            b.push(ineq.rhs);
        }
        let nonneg: Vec<usize> = self
            .cones
            .iter()
            .filter(|c| c.kind == ConeKind::Nonnegative)
            .flat_map(|c| c.vars.iter().copied())
            .collect();
        let mut push_identity = |vars: &[usize], b: &mut Vec<f64>| {
            for &v in vars {
                rows.push(b.len());
                cols.push(v);
                vals.push(-1.0);
                b.push(0.0);
            }
        };
        push_identity(&nonneg, &mut b);
        let orthant = self.inequalities.len() + nonneg.len();
        if orthant > 0 {
            cones.push(SupportedConeT::NonnegativeConeT(orthant));
        }
        for c in self.cones.iter().filter(|c| c.kind == ConeKind::SecondOrder) {
            push_identity(&c.vars, &mut b);
            if c.vars.len() == 1 {
                cones.push(SupportedConeT::NonnegativeConeT(1));
            } else {
                cones.push(SupportedConeT::SecondOrderConeT(c.vars.len()));
            }
        }

        let p = CscMatrix::<f64>::zeros((n, n));
        let a = CscMatrix::new_from_triplets(b.len(), n, rows, cols, vals);
        let settings = DefaultSettings {
            verbose: false,
            max_iter: opts.max_iter,
            tol_feas: opts.feas_tol,
            tol_gap_abs: opts.gap_tol,
            tol_gap_rel: opts.gap_tol,
            ..DefaultSettings::default()
        };

        // Degenerate programs (many optimal multipliers) can stall just short
        // of the tolerances; one retry with stronger static regularization
        // usually finishes them. Tolerances are unchanged.
        let retry = DefaultSettings {
            static_regularization_constant: 1e-7,
            ..settings.clone()
        };
        let mut solver = match DefaultSolver::new(&p, &q, &a, &b, &cones, settings) {
            Ok(s) => s,
            Err(e) => return self.failed(format!("backend setup: {e:?}")),
        };
        solver.solve();
        if matches!(
            solver.solution.status,
            SolverStatus::AlmostSolved
                | SolverStatus::MaxIterations
                | SolverStatus::InsufficientProgress
                | SolverStatus::NumericalError
        ) {
            if let Ok(mut again) = DefaultSolver::new(&p, &q, &a, &b, &cones, retry) {
                again.solve();
                if again.solution.status == SolverStatus::Solved {
                    solver = again;
                }
            }
        }

        let sol = &solver.solution;
        let status = match sol.status {
            SolverStatus::Solved => SolveStatus::Optimal,
            SolverStatus::PrimalInfeasible => SolveStatus::Infeasible,
            SolverStatus::DualInfeasible => SolveStatus::Unbounded,
            _ => SolveStatus::Inaccurate,
        };
        let x = sol.x.clone();
        let equality_duals = sol.z[..self.equalities.len()].to_vec();
        let objective = flip * sol.obj_val + self.objective_constant;
        let dual_objective = flip * sol.obj_val_dual + self.objective_constant;
        let max_violation = self.max_violation(&x);
        ConicSolution {
            status,
            x,
            equality_duals,
            objective,
            dual_objective,
            primal_residual: solver.info.res_primal,
            gap: solver.info.gap_rel,
            max_violation,
            iterations: sol.iterations,
            backend_status: format!("{:?}", sol.status),
        }
    }

    fn failed(&self, reason: String) -> ConicSolution {
        ConicSolution {
            status: SolveStatus::Inaccurate,
            x: vec![f64::NAN; self.num_vars],
            equality_duals: vec![f64::NAN; self.equalities.len()],
            objective: f64::NAN,
            dual_objective: f64::NAN,
            primal_residual: f64::INFINITY,
            gap: f64::INFINITY,
            max_violation: f64::INFINITY,
            iterations: 0,
            backend_status: reason,
        }
    }

    /// Largest violation of any equality row or cone membership at `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for eq in &self.equalities {
            let lhs: f64 = eq.terms.iter().map(|&(v, c)| c * x[v]).sum();
            worst = worst.max((lhs - eq.rhs).abs());
        }
        for ineq in &self.inequalities {
            let lhs: f64 = ineq.terms.iter().map(|&(v, c)| c * x[v]).sum();
            worst = worst.max(lhs - ineq.rhs);
        }
        for c in &self.cones {
            match c.kind {
                ConeKind::Nonnegative => {
                    for &v in &c.vars {
                        worst = worst.max(-x[v]);
                    }
                }
                ConeKind::SecondOrder => {
                    let norm = c.vars[1..].iter().map(|&v| x[v] * x[v]).sum::<f64>().sqrt();
                    worst = worst.max(norm - x[c.vars[0]]);
                }
            }
        }
        worst
    }

    /// Plain-text listing of objective, equalities and cones, for diagnosis.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let sense = match self.sense {
            Sense::Minimize => "minimize",
            Sense::Maximize => "maximize",
        };
        let _ = writeln!(out, "variables: {}", self.num_vars);
        let _ = write!(out, "objective: {sense}");
        for &(v, c) in &self.objective {
            let _ = write!(out, " {c:+} x{v}");
        }
        let _ = writeln!(out, " {:+}", self.objective_constant);
        let _ = writeln!(out, "equalities: {}", self.equalities.len());
        for (r, eq) in self.equalities.iter().enumerate() {
            let _ = write!(out, "  e{r}:");
            for &(v, c) in &eq.terms {
                let _ = write!(out, " {c:+} x{v}");
            }
            let _ = writeln!(out, " = {}", eq.rhs);
        }
        let _ = writeln!(out, "inequalities: {}", self.inequalities.len());
        for (r, ineq) in self.inequalities.iter().enumerate() {
            let _ = write!(out, "  i{r}:");
            for &(v, c) in &ineq.terms {
                let _ = write!(out, " {c:+} x{v}");
            }
            let _ = writeln!(out, " <= {}", ineq.rhs);
        }
        let _ = writeln!(out, "cones: {}", self.cones.len());
        for c in &self.cones {
            let kind = match c.kind {
                ConeKind::Nonnegative => "nonneg",
                ConeKind::SecondOrder => "soc",
            };
            let vars: Vec<String> = c.vars.iter().map(|v| format!("x{v}")).collect();
            let _ = writeln!(out, "  {kind} ({})", vars.join(", "));
        }
        out
    }
}
