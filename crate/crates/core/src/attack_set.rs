//! Convex attack sets `X = {x : c_k(x) <= 0}` built from norm balls and
//! half-spaces, with closed forms for perspectives and conjugates.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conic::{ProgramBuilder, Sense, SolveOptions, SolveStatus, Var};
use crate::error::{check_dim, Error, Result};
use crate::json;
use crate::model::dot;

/// Tolerance for the `z = psi` test in direct half-space conjugate evaluation.
pub const HALF_SPACE_MATCH_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L1,
    L2,
    #[serde(rename = "linf")]
    LInf,
}

impl Norm {
    pub fn eval(self, v: &[f64]) -> f64 {
        match self {
            Norm::L1 => v.iter().map(|x| x.abs()).sum(),
            Norm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            Norm::LInf => v.iter().fold(0.0, |acc, x| acc.max(x.abs())),
        }
    }

    pub fn dual(self) -> Norm {
        match self {
            Norm::L1 => Norm::LInf,
            Norm::L2 => Norm::L2,
            Norm::LInf => Norm::L1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Norm::L1 => "l1",
            Norm::L2 => "l2",
            Norm::LInf => "linf",
        }
    }
}

impl std::str::FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(Norm::L1),
            "l2" => Ok(Norm::L2),
            "linf" | "inf" => Ok(Norm::LInf),
            other => Err(Error::invalid("norm", format!("unknown norm `{other}` (expected l1, l2 or linf)"))),
        }
    }
}

/// `||z||_*` for the dual of `norm`.
pub fn dual_norm(norm: Norm, z: &[f64]) -> f64 {
    norm.dual().eval(z)
}

/// A value in `R ∪ {+inf}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExtReal {
    Finite(f64),
    PosInf,
}

impl ExtReal {
    pub fn is_finite(self) -> bool {
        matches!(self, ExtReal::Finite(_))
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            ExtReal::Finite(v) => Some(v),
            ExtReal::PosInf => None,
        }
    }

    /// `self <= bound` with `+inf <= b` false for every real `b`.
    pub fn le(self, bound: f64) -> bool {
        match self {
            ExtReal::Finite(v) => v <= bound,
            ExtReal::PosInf => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintFn {
    /// `c(x) = ||x - center|| - radius`
    NormBall {
        norm: Norm,
        center: Vec<f64>,
        radius: f64,
    },
    /// `c(x) = psi . x + omega`
    HalfSpace { psi: Vec<f64>, omega: f64 },
}

impl ConstraintFn {
    pub fn norm_ball(norm: Norm, center: Vec<f64>, radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::invalid("radius", format!("norm-ball radius must be positive and finite, got {radius}")));
        }
        if center.is_empty() || center.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("center", "center must be a nonempty finite vector"));
        }
        Ok(ConstraintFn::NormBall { norm, center, radius })
    }

    pub fn half_space(psi: Vec<f64>, omega: f64) -> Result<Self> {
        if psi.is_empty() || psi.iter().any(|v| !v.is_finite()) || !omega.is_finite() {
            return Err(Error::invalid("psi", "half-space data must be finite and nonempty"));
        }
        if psi.iter().all(|&v| v == 0.0) {
            return Err(Error::invalid("psi", "half-space normal must not be all zero"));
        }
        Ok(ConstraintFn::HalfSpace { psi, omega })
    }

    pub fn dim(&self) -> usize {
        match self {
            ConstraintFn::NormBall { center, .. } => center.len(),
            ConstraintFn::HalfSpace { psi, .. } => psi.len(),
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, ConstraintFn::HalfSpace { .. })
    }

    /// Whether the 0-sublevel set is a polyhedron (half-spaces, L1 and
    /// L-infinity balls); such constraints need no strict feasibility.
    pub fn is_polyhedral(&self) -> bool {
        match self {
            ConstraintFn::HalfSpace { .. } => true,
            ConstraintFn::NormBall { norm, .. } => *norm != Norm::L2,
        }
    }

    /// `c(x)`.
    pub fn value(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        Ok(match self {
            ConstraintFn::NormBall { norm, center, radius } => {
                let diff: Vec<f64> = x.iter().zip(center).map(|(a, b)| a - b).collect();
                norm.eval(&diff) - radius
            }
            ConstraintFn::HalfSpace { psi, omega } => dot(psi, x) + omega,
        })
    }

    /// Perspective `t * c(x / t)`, closed at `t = 0`.
    pub fn perspective(&self, x: &[f64], t: f64) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        check_t(t)?;
        Ok(match self {
            ConstraintFn::NormBall { norm, center, radius } => {
                let diff: Vec<f64> = x.iter().zip(center).map(|(a, c)| a - t * c).collect();
                norm.eval(&diff) - radius * t
            }
            ConstraintFn::HalfSpace { psi, omega } => dot(psi, x) + omega * t,
        })
    }

    /// Convex conjugate `c*(z) = sup_x (z . x - c(x))`.
    pub fn conjugate(&self, z: &[f64]) -> Result<ExtReal> {
        check_dim(self.dim(), z.len())?;
        Ok(match self {
            ConstraintFn::NormBall { norm, center, radius } => {
                if dual_norm(*norm, z) <= 1.0 {
                    ExtReal::Finite(dot(z, center) + radius)
                } else {
                    ExtReal::PosInf
                }
            }
            ConstraintFn::HalfSpace { psi, omega } => {
                if matches_within(z, psi, 1.0) {
                    ExtReal::Finite(-omega)
                } else {
                    ExtReal::PosInf
                }
            }
        })
    }

    /// Perspective of the conjugate, `t * c*(z / t)` closed at `t = 0`.
    pub fn perspective_conjugate(&self, z: &[f64], t: f64) -> Result<ExtReal> {
        check_dim(self.dim(), z.len())?;
        check_t(t)?;
        Ok(match self {
            ConstraintFn::NormBall { norm, center, radius } => {
                if dual_norm(*norm, z) <= t {
                    ExtReal::Finite(dot(z, center) + radius * t)
                } else {
                    ExtReal::PosInf
                }
            }
            ConstraintFn::HalfSpace { psi, omega } => {
                if matches_within(z, psi, t) {
                    ExtReal::Finite(-omega * t)
                } else {
                    ExtReal::PosInf
                }
            }
        })
    }
}

fn check_t(t: f64) -> Result<()> {
    if t >= 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid("t", format!("perspective parameter must be nonnegative, got {t}")))
    }
}

// z == t * psi up to HALF_SPACE_MATCH_TOL in every coordinate
fn matches_within(z: &[f64], psi: &[f64], t: f64) -> bool {
    z.iter().zip(psi).all(|(a, p)| (a - t * p).abs() <= HALF_SPACE_MATCH_TOL)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackSet {
    d: usize,
    constraints: Vec<ConstraintFn>,
}

impl AttackSet {
    pub fn new(constraints: Vec<ConstraintFn>) -> Result<Self> {
        let d = constraints
            .first()
            .map(ConstraintFn::dim)
            .ok_or_else(|| Error::invalid("constraints", "attack set needs at least one constraint"))?;
        for c in &constraints {
            check_dim(d, c.dim())?;
        }
        Ok(Self { d, constraints })
    }

    pub fn ball(norm: Norm, center: Vec<f64>, radius: f64) -> Result<Self> {
        Self::new(vec![ConstraintFn::norm_ball(norm, center, radius)?])
    }

    /// Axis-aligned box as `2d` half-spaces `x_r <= hi_r`, `-x_r <= -lo_r`.
    pub fn boxed(lo: &[f64], hi: &[f64]) -> Result<Self> {
        Self::new(box_half_spaces(lo, hi)?)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn constraints(&self) -> &[ConstraintFn] {
        &self.constraints
    }

    pub fn is_polyhedral(&self) -> bool {
        self.constraints.iter().all(ConstraintFn::is_polyhedral)
    }

    /// `c_k(x) <= tol` for every `k`.
    pub fn contains(&self, x: &[f64], tol: f64) -> Result<bool> {
        check_dim(self.d, x.len())?;
        for c in &self.constraints {
            if c.value(x)? > tol {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Largest constraint value at `x` (`<= 0` inside the set).
    pub fn max_violation(&self, x: &[f64]) -> Result<f64> {
        let mut worst = f64::NEG_INFINITY;
        for c in &self.constraints {
            worst = worst.max(c.value(x)?);
        }
        Ok(worst)
    }

    /// Boundedness check. Any norm ball bounds the set; sets of half-spaces
    /// are probed with `max/min x_r` LPs.
    pub fn verify_bounded(&self) -> Result<bool> {
        if self.constraints.iter().any(|c| matches!(c, ConstraintFn::NormBall { .. })) {
            return Ok(true);
        }
        Ok(self.coordinate_extremes(&SolveOptions::default())?.is_some())
    }

    /// Per-coordinate `(min x_r, max x_r)` over the set, or `None` if some
    /// coordinate is unbounded. An empty set is an error.
    pub fn coordinate_extremes(&self, opts: &SolveOptions) -> Result<Option<Vec<(f64, f64)>>> {
        let mut out = Vec::with_capacity(self.d);
        for r in 0..self.d {
            let mut pair = [0.0; 2];
            for (slot, sense) in [Sense::Minimize, Sense::Maximize].into_iter().enumerate() {
                let mut pb = ProgramBuilder::new();
                let x = pb.add_variables(self.d);
                let one = pb.add_variable();
                pb.add_equality(&[(one, 1.0)], 1.0)?;
                for c in &self.constraints {
                    encode_membership(&mut pb, c, &x, one)?;
                }
                pb.set_objective(sense, &[(x[r], 1.0)], 0.0);
                let sol = pb.finish()?.solve(opts);
                match sol.status {
                    SolveStatus::Optimal => pair[slot] = sol.objective,
                    SolveStatus::Unbounded => return Ok(None),
                    SolveStatus::Infeasible => return Err(Error::InfeasibleSet),
                    SolveStatus::Inaccurate => {
                        return Err(Error::Solver(format!("bounding-box probe for coordinate {r} was inaccurate")))
                    }
                }
            }
            out.push((pair[0], pair[1]));
        }
        Ok(Some(out))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        json::from_str::<AttackSetFile>(text)?.into_set()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_file(&self) -> AttackSetFile {
        AttackSetFile {
            d: self.d,
            constraints: self
                .constraints
                .iter()
                .map(|c| match c {
                    ConstraintFn::NormBall { norm, center, radius } => ConstraintSpec::NormBall {
                        norm: *norm,
                        center: center.clone(),
                        radius: *radius,
                    },
                    ConstraintFn::HalfSpace { psi, omega } => ConstraintSpec::HalfSpace {
                        psi: psi.clone(),
                        omega: *omega,
                    },
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        json::to_string(&self.to_file())
    }
}

fn box_half_spaces(lo: &[f64], hi: &[f64]) -> Result<Vec<ConstraintFn>> {
    check_dim(lo.len(), hi.len())?;
    if lo.is_empty() {
        return Err(Error::invalid("lo", "box needs at least one coordinate"));
    }
    let d = lo.len();
    let mut out = Vec::with_capacity(2 * d);
    for r in 0..d {
        if !(lo[r] <= hi[r]) {
            return Err(Error::invalid("lo", format!("lo[{r}] = {} exceeds hi[{r}] = {}", lo[r], hi[r])));
        }
        let mut e = vec![0.0; d];
        e[r] = 1.0;
        out.push(ConstraintFn::half_space(e.clone(), -hi[r])?);
        e[r] = -1.0;
        out.push(ConstraintFn::half_space(e, lo[r])?);
    }
    Ok(out)
}

/// Adds the perspective constraint `persp c(x, scale) <= 0` to `pb`.
///
/// L2 balls become one second-order cone; L-infinity balls become `2d`
/// linear inequalities; L1 balls use `d` auxiliary magnitude variables.
pub(crate) fn encode_membership(
    pb: &mut ProgramBuilder,
    c: &ConstraintFn,
    x: &[Var],
    scale: Var,
) -> Result<()> {
    match c {
        ConstraintFn::HalfSpace { psi, omega } => {
            let mut terms: Vec<(Var, f64)> = x.iter().copied().zip(psi.iter().copied()).collect();
            terms.push((scale, *omega));
            pb.add_le(&terms, 0.0)?;
        }
        ConstraintFn::NormBall { norm, center, radius } => {
            let r_eff = *radius;
            match norm {
                Norm::L2 => {
                    let t = pb.add_variable();
                    pb.add_equality(&[(t, 1.0), (scale, -r_eff)], 0.0)?;
                    let v = pb.add_variables(x.len());
                    for ((&vr, &xr), &cr) in v.iter().zip(x).zip(center) {
                        pb.add_equality(&[(vr, 1.0), (xr, -1.0), (scale, cr)], 0.0)?;
                    }
                    pb.add_soc(t, &v)?;
                }
                Norm::LInf => {
                    for (&xr, &cr) in x.iter().zip(center) {
                        pb.add_le(&[(xr, 1.0), (scale, -cr - r_eff)], 0.0)?;
                        pb.add_le(&[(xr, -1.0), (scale, cr - r_eff)], 0.0)?;
                    }
                }
                Norm::L1 => {
                    let u = pb.add_variables(x.len());
                    for ((&ur, &xr), &cr) in u.iter().zip(x).zip(center) {
                        pb.add_le(&[(xr, 1.0), (scale, -cr), (ur, -1.0)], 0.0)?;
                        pb.add_le(&[(xr, -1.0), (scale, cr), (ur, -1.0)], 0.0)?;
                    }
                    let mut terms: Vec<(Var, f64)> = u.iter().map(|&ur| (ur, 1.0)).collect();
                    terms.push((scale, -r_eff));
                    pb.add_le(&terms, 0.0)?;
                }
            }
        }
    }
    Ok(())
}

/// `{"d": int, "constraints": [...]}`
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSetFile {
    pub d: usize,
    pub constraints: Vec<ConstraintSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConstraintSpec {
    NormBall { norm: Norm, center: Vec<f64>, radius: f64 },
    HalfSpace { psi: Vec<f64>, omega: f64 },
    Box { lo: Vec<f64>, hi: Vec<f64> },
}

impl AttackSetFile {
    pub fn into_set(self) -> Result<AttackSet> {
        let mut constraints = Vec::new();
        for (k, spec) in self.constraints.into_iter().enumerate() {
            let field = format!("constraints[{k}]");
            let dim_err = |len: usize| Error::shape(&field, format!("expected dimension {}, found {len}", self.d));
            match spec {
                ConstraintSpec::NormBall { norm, center, radius } => {
                    if center.len() != self.d {
                        return Err(dim_err(center.len()));
                    }
                    constraints.push(ConstraintFn::norm_ball(norm, center, radius)?);
                }
                ConstraintSpec::HalfSpace { psi, omega } => {
                    if psi.len() != self.d {
                        return Err(dim_err(psi.len()));
                    }
                    constraints.push(ConstraintFn::half_space(psi, omega)?);
                }
                ConstraintSpec::Box { lo, hi } => {
                    if lo.len() != self.d || hi.len() != self.d {
                        return Err(dim_err(lo.len().max(hi.len())));
                    }
                    constraints.extend(box_half_spaces(&lo, &hi)?);
                }
            }
        }
        AttackSet::new(constraints)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ball(norm: Norm, center: &[f64], radius: f64) -> ConstraintFn {
        ConstraintFn::norm_ball(norm, center.to_vec(), radius).unwrap()
    }

    fn random_vec(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vec<f64> {
        (0..d).map(|_| rng.gen_range(-scale..scale)).collect()
    }

    fn random_constraints(rng: &mut ChaCha8Rng, d: usize) -> Vec<ConstraintFn> {
        let mut out: Vec<ConstraintFn> = [Norm::L1, Norm::L2, Norm::LInf]
            .into_iter()
            .map(|n| ball(n, &random_vec(rng, d, 2.0), rng.gen_range(0.1..2.0)))
            .collect();
        out.push(ConstraintFn::half_space(random_vec(rng, d, 2.0), rng.gen_range(-1.0..1.0)).unwrap());
        out
    }

    #[test]
    fn perspective_at_zero_is_the_norm() {
        let c = ball(Norm::L2, &[1.0, 0.0], 0.5);
        assert_eq!(c.perspective(&[1.0, 0.0], 0.0).unwrap(), 1.0);
    }

    #[test]
    fn perspective_linf_example() {
        let c = ball(Norm::LInf, &[2.0, 2.0], 1.0);
        assert_eq!(c.perspective(&[1.0, 1.0], 0.5).unwrap(), -0.5);
    }

    #[test]
    fn perspective_at_one_is_the_function() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for c in random_constraints(&mut rng, 3) {
            for _ in 0..20 {
                let x = random_vec(&mut rng, 3, 4.0);
                assert_eq!(c.perspective(&x, 1.0).unwrap(), c.value(&x).unwrap());
            }
        }
    }

    #[test]
    fn negative_t_is_rejected() {
        let c = ball(Norm::L1, &[0.0], 1.0);
        assert!(c.perspective(&[0.0], -1e-3).is_err());
        assert!(c.perspective_conjugate(&[0.0], -1.0).is_err());
    }

    #[test]
    fn conjugate_examples() {
        let c = ball(Norm::L2, &[1.0, 1.0], 0.5);
        let v = c.conjugate(&[0.6, 0.0]).unwrap().finite().unwrap();
        assert!((v - 1.1).abs() < 1e-15);
        assert_eq!(c.conjugate(&[0.8, 0.8]).unwrap(), ExtReal::PosInf);
        assert_eq!(c.conjugate(&[0.0, 0.0]).unwrap(), ExtReal::Finite(0.5));
        for norm in [Norm::L1, Norm::LInf] {
            let c = ball(norm, &[3.0, -1.0], 2.0);
            assert_eq!(c.conjugate(&[0.0, 0.0]).unwrap(), ExtReal::Finite(2.0));
            assert_eq!(c.conjugate(&[1.5, 0.0]).unwrap(), ExtReal::PosInf);
        }
    }

    #[test]
    fn half_space_conjugates() {
        let c = ConstraintFn::half_space(vec![1.0, -2.0], 0.5).unwrap();
        assert_eq!(c.perspective(&[1.0, 1.0], 2.0).unwrap(), 1.0 - 2.0 + 1.0);
        assert_eq!(c.conjugate(&[1.0, -2.0]).unwrap(), ExtReal::Finite(-0.5));
        assert_eq!(c.conjugate(&[1.0, -2.0 + 1e-6]).unwrap(), ExtReal::PosInf);
        assert_eq!(c.perspective_conjugate(&[3.0, -6.0], 3.0).unwrap(), ExtReal::Finite(-1.5));
        assert_eq!(c.perspective_conjugate(&[3.0, -6.0], 2.0).unwrap(), ExtReal::PosInf);
        assert_eq!(c.perspective_conjugate(&[0.0, 0.0], 0.0).unwrap(), ExtReal::Finite(0.0));
    }

    #[test]
    fn perspective_conjugate_examples() {
        let c = ball(Norm::L2, &[1.0, 2.0], 0.7);
        assert_eq!(c.perspective_conjugate(&[0.0, 0.0], 0.0).unwrap(), ExtReal::Finite(0.0));
        assert_eq!(c.perspective_conjugate(&[1e-12, 0.0], 0.0).unwrap(), ExtReal::PosInf);
        let c = ball(Norm::L1, &[1.0, 0.0], 2.0);
        assert_eq!(c.perspective_conjugate(&[1.0, 1.0], 2.0).unwrap(), ExtReal::Finite(5.0));
    }

    #[test]
    fn dual_norm_examples() {
        assert_eq!(Norm::L2.eval(&[3.0, 4.0]), 5.0);
        assert_eq!(dual_norm(Norm::L2, &[3.0, 4.0]), 5.0);
        assert_eq!(dual_norm(Norm::LInf, &[1.0, -2.0, 3.0]), 6.0);
        assert_eq!(dual_norm(Norm::L1, &[1.0, -2.0]), 2.0);
    }

    #[test]
    fn positive_homogeneity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for c in random_constraints(&mut rng, 3) {
            for _ in 0..50 {
                let x = random_vec(&mut rng, 3, 3.0);
                let t = rng.gen_range(0.0..2.0);
                let s = rng.gen_range(0.1..5.0);
                let xs: Vec<f64> = x.iter().map(|v| s * v).collect();
                let lhs = c.perspective(&xs, s * t).unwrap();
                let rhs = s * c.perspective(&x, t).unwrap();
                assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
                match (c.perspective_conjugate(&xs, s * t).unwrap(), c.perspective_conjugate(&x, t).unwrap()) {
                    (ExtReal::Finite(l), ExtReal::Finite(r)) => assert!((l - s * r).abs() <= 1e-12 * (1.0 + r.abs())),
                    (ExtReal::PosInf, ExtReal::PosInf) => {}
                    // boundary of the dual-norm cone can flip under rounding
                    (l, r) => {
                        let dn = match &c {
                            ConstraintFn::NormBall { norm, .. } => dual_norm(*norm, &x),
                            ConstraintFn::HalfSpace { .. } => continue,
                        };
                        assert!((dn - t).abs() < 1e-12, "{l:?} vs {r:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn fenchel_young_inequality() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for c in random_constraints(&mut rng, 3) {
            let mut finite_pairs = 0;
            for _ in 0..10_000 {
                let x = random_vec(&mut rng, 3, 5.0);
                let z = match &c {
                    ConstraintFn::HalfSpace { psi, .. } => psi.clone(),
                    _ => random_vec(&mut rng, 3, 1.0),
                };
                if let ExtReal::Finite(cz) = c.conjugate(&z).unwrap() {
                    finite_pairs += 1;
                    let cx = c.value(&x).unwrap();
                    assert!(cx + cz >= dot(&z, &x) - 1e-12);
                }
            }
            assert!(finite_pairs > 100);
        }
    }

    #[test]
    fn fenchel_young_equality_at_subgradient_witness() {
        // For z on the dual unit sphere and x = center + s * w with w a
        // maximizer of z . w over the primal unit ball, c(x) + c*(z) = z . x.
        let center = [0.3, -1.2];
        for (norm, z, w) in [
            (Norm::L2, vec![0.6, 0.8], vec![0.6, 0.8]),
            (Norm::LInf, vec![0.25, -0.75], vec![1.0, -1.0]),
            (Norm::L1, vec![1.0, 0.4], vec![1.0, 0.0]),
        ] {
            let c = ball(norm, &center, 0.5);
            for s in [0.0, 0.5, 3.0] {
                let x: Vec<f64> = center.iter().zip(&w).map(|(c, w)| c + s * w).collect();
                let lhs = c.value(&x).unwrap() + c.conjugate(&z).unwrap().finite().unwrap();
                assert!((lhs - dot(&z, &x)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn perspective_limit_as_t_vanishes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for c in random_constraints(&mut rng, 3) {
            for _ in 0..20 {
                let x = random_vec(&mut rng, 3, 3.0);
                let at_zero = c.perspective(&x, 0.0).unwrap();
                for k in 4..=8 {
                    let t = 10f64.powi(-k);
                    // t * c(x / t) evaluated through the unscaled definition
                    let xs: Vec<f64> = x.iter().map(|v| v / t).collect();
                    let approx = t * c.value(&xs).unwrap();
                    assert!((approx - at_zero).abs() <= 1e-3 * (1.0 + at_zero.abs()));
                }
            }
        }
    }

    #[test]
    fn conjugate_grid_oracle() {
        // sup over a fine grid of z.x - c(x) approaches c*(z) from below
        let c = ball(Norm::L2, &[0.4, -0.2], 0.8);
        let h = 0.01;
        for z in [[0.3, -0.4], [0.0, 0.0], [-0.9, 0.1]] {
            let exact = c.conjugate(&z).unwrap().finite().unwrap();
            let mut best = f64::NEG_INFINITY;
            for p in -300..=300 {
                for q in -300..=300 {
                    let x = [p as f64 * h, q as f64 * h];
                    best = best.max(dot(&z, &x) - c.value(&x).unwrap());
                }
            }
            assert!(best <= exact + 1e-12);
            assert!(exact - best <= 2.0 * h);
        }
        let c1 = ball(Norm::L1, &[0.0], 1.0);
        let exact = c1.conjugate(&[0.5]).unwrap().finite().unwrap();
        let best = (-2000..=2000)
            .map(|p| {
                let x = p as f64 * 1e-3;
                0.5 * x - c1.value(&[x]).unwrap()
            })
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((exact - best).abs() < 1e-9);
    }

    #[test]
    fn contains_examples() {
        let tol = 1e-6;
        let set = AttackSet::ball(Norm::LInf, vec![1.0, 2.0], 0.5).unwrap();
        assert!(set.contains(&[1.0, 2.0], tol).unwrap());
        assert!(!set.contains(&[1.0 + 0.5 + 2.0 * tol, 2.0], tol).unwrap());
    }

    #[test]
    fn contains_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let set = AttackSet::new(random_constraints(&mut rng, 2)).unwrap();
        for _ in 0..1000 {
            let x = random_vec(&mut rng, 2, 3.0);
            let direct = set.constraints().iter().all(|c| match c {
                ConstraintFn::NormBall { norm, center, radius } => {
                    let diff = [x[0] - center[0], x[1] - center[1]];
                    norm.eval(&diff) - radius <= 0.0
                }
                ConstraintFn::HalfSpace { psi, omega } => psi[0] * x[0] + psi[1] * x[1] + omega <= 0.0,
            });
            assert_eq!(set.contains(&x, 0.0).unwrap(), direct);
        }
    }

    #[test]
    fn boundedness() {
        assert!(AttackSet::ball(Norm::LInf, vec![0.0, 0.0], 1.0).unwrap().verify_bounded().unwrap());
        let half = AttackSet::new(vec![ConstraintFn::half_space(vec![1.0, 0.0], -1.0).unwrap()]).unwrap();
        assert!(!half.verify_bounded().unwrap());
        let bx = AttackSet::boxed(&[-1.0, 0.5], &[2.0, 3.0]).unwrap();
        assert!(bx.verify_bounded().unwrap());
        let ext = bx.coordinate_extremes(&SolveOptions::default()).unwrap().unwrap();
        for ((lo, hi), (elo, ehi)) in ext.iter().zip([(-1.0, 2.0), (0.5, 3.0)]) {
            assert!((lo - elo).abs() < 1e-7 && (hi - ehi).abs() < 1e-7, "{lo} {hi}");
        }
    }

    #[test]
    fn infeasible_polyhedron_is_reported() {
        let set = AttackSet::new(vec![
            ConstraintFn::half_space(vec![1.0], -1.0).unwrap(), // x <= 1
            ConstraintFn::half_space(vec![-1.0], 2.0).unwrap(), // x >= 2
        ])
        .unwrap();
        assert!(matches!(set.verify_bounded(), Err(Error::InfeasibleSet)));
    }

    #[test]
    fn invariants_enforced_at_construction() {
        assert!(ConstraintFn::norm_ball(Norm::L2, vec![0.0], 0.0).is_err());
        assert!(ConstraintFn::half_space(vec![0.0, 0.0], 1.0).is_err());
        assert!(AttackSet::new(vec![]).is_err());
        assert!(AttackSet::new(vec![ball(Norm::L2, &[0.0], 1.0), ball(Norm::L2, &[0.0, 0.0], 1.0)]).is_err());
    }

    #[test]
    fn json_schema_with_box_sugar() {
        let text = r#"{"d": 2, "constraints": [
            {"type": "norm_ball", "norm": "l2", "center": [0, 0], "radius": 1.5},
            {"type": "half_space", "psi": [1, 1], "omega": -1},
            {"type": "box", "lo": [-1, -2], "hi": [1, 2]}]}"#;
        let set = AttackSet::from_json(text).unwrap();
        assert_eq!(set.constraints().len(), 2 + 4);
        assert!(!set.is_polyhedral());
        let back = AttackSet::from_json(&set.to_json()).unwrap();
        assert_eq!(back, set);
        let bad = r#"{"d": 2, "constraints": [{"type": "norm_ball", "norm": "l3", "center": [0, 0], "radius": 1}]}"#;
        assert!(AttackSet::from_json(bad).is_err());
        let wrong_dim = r#"{"d": 3, "constraints": [{"type": "half_space", "psi": [1, 1], "omega": 0}]}"#;
        assert!(matches!(AttackSet::from_json(wrong_dim), Err(Error::Shape { .. })));
    }
}
