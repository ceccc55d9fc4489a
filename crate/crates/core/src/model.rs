//! Min-max affine models `g(x) = min_i max_j (a_ij . x + b_ij)`.
//!
//! Coefficients live in flat row-major buffers: slope `a_ij` occupies
//! `a[(i * n + j) * d..][..d]` and offset `b_ij` is `b[i * n + j]`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::json;

#[derive(Debug, Clone, PartialEq)]
pub struct MinMaxModel {
    d: usize,
    m: usize,
    n: usize,
    a: Vec<f64>,
    b: Vec<f64>,
}

/// Value of the model at a point together with the active indices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalTrace {
    pub value: f64,
    pub argmin_i: usize,
    pub argmax_j: usize,
}

/// One affine function `slope . x + offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinePiece {
    pub slope: Vec<f64>,
    pub offset: f64,
}

impl AffinePiece {
    pub fn new(slope: Vec<f64>, offset: f64) -> Self {
        Self { slope, offset }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        dot(&self.slope, x) + self.offset
    }
}

#[inline]
pub(crate) fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(p, q)| p * q).sum()
}

impl MinMaxModel {
    /// Builds a model from flat buffers (`a` has `m*n*d` entries, `b` has `m*n`).
    pub fn from_flat(d: usize, m: usize, n: usize, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(Error::invalid("d", "input dimension must be positive"));
        }
        if m == 0 {
            return Err(Error::invalid("m", "need at least one min-component"));
        }
        if n == 0 {
            return Err(Error::invalid("n", "need at least one max-component"));
        }
        if a.len() != m * n * d {
            return Err(Error::shape("a", format!("expected {} entries, found {}", m * n * d, a.len())));
        }
        if b.len() != m * n {
            return Err(Error::shape("b", format!("expected {} entries, found {}", m * n, b.len())));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("a", "all slopes must be finite"));
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("b", "all offsets must be finite"));
        }
        Ok(Self { d, m, n, a, b })
    }

    /// Builds a model from nested `a[i][j][r]` and `b[i][j]`.
    pub fn from_nested(a: &[Vec<Vec<f64>>], b: &[Vec<f64>]) -> Result<Self> {
        let m = a.len();
        let n = a.first().map_or(0, Vec::len);
        let d = a.first().and_then(|row| row.first()).map_or(0, Vec::len);
        let raw = ModelFile {
            d,
            m,
            n,
            a: a.to_vec(),
            b: b.to_vec(),
        };
        raw.into_model()
    }

    /// A single-piece model `g(x) = slope . x + offset`.
    pub fn affine(slope: Vec<f64>, offset: f64) -> Result<Self> {
        let d = slope.len();
        Self::from_flat(d, 1, 1, slope, vec![offset])
    }

    /// The constant model `g = value` on `R^d`.
    pub fn constant(d: usize, value: f64) -> Result<Self> {
        Self::affine(vec![0.0; d], value)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn num_components(&self) -> usize {
        self.m
    }

    pub fn num_pieces(&self) -> usize {
        self.n
    }

    pub fn slope(&self, i: usize, j: usize) -> &[f64] {
        let start = (i * self.n + j) * self.d;
        &self.a[start..start + self.d]
    }

    pub fn offset(&self, i: usize, j: usize) -> f64 {
        self.b[i * self.n + j]
    }

    pub fn slopes_flat(&self) -> &[f64] {
        &self.a
    }

    pub fn offsets_flat(&self) -> &[f64] {
        &self.b
    }

    pub(crate) fn params_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.a, &mut self.b)
    }

    #[inline]
    pub fn piece_value(&self, i: usize, j: usize, x: &[f64]) -> f64 {
        dot(self.slope(i, j), x) + self.offset(i, j)
    }

    /// Value of the convex component `g_i(x) = max_j (a_ij . x + b_ij)`.
    pub fn component(&self, i: usize, x: &[f64]) -> f64 {
        self.component_argmax(i, x).0
    }

    /// Perspective `t g_i(x / t) = max_j (a_ij . x + b_ij t)`; at `t = 0` the
    /// recession function `max_j a_ij . x`.
    pub fn component_perspective(&self, i: usize, x: &[f64], t: f64) -> Result<f64> {
        check_dim(self.d, x.len())?;
        if i >= self.m {
            return Err(Error::invalid("i", format!("component {i} out of range (m = {})", self.m)));
        }
        if !(t >= 0.0) {
            return Err(Error::invalid("t", format!("perspective needs t >= 0, got {t}")));
        }
        Ok((0..self.n)
            .map(|j| dot(self.slope(i, j), x) + self.offset(i, j) * t)
            .fold(f64::NEG_INFINITY, f64::max))
    }

    fn component_argmax(&self, i: usize, x: &[f64]) -> (f64, usize) {
        let mut best = (self.piece_value(i, 0, x), 0);
        for j in 1..self.n {
            let v = self.piece_value(i, j, x);
            if v > best.0 {
                best = (v, j);
            }
        }
        best
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        Ok(self.trace(x)?.value)
    }

    /// Evaluation with the active indices; ties go to the lowest index.
    pub fn trace(&self, x: &[f64]) -> Result<EvalTrace> {
        check_dim(self.d, x.len())?;
        Ok(self.trace_unchecked(x))
    }

    pub(crate) fn trace_unchecked(&self, x: &[f64]) -> EvalTrace {
        let (mut value, mut argmax_j) = self.component_argmax(0, x);
        let mut argmin_i = 0;
        for i in 1..self.m {
            let (v, j) = self.component_argmax(i, x);
            if v < value {
                value = v;
                argmin_i = i;
                argmax_j = j;
            }
        }
        EvalTrace {
            value,
            argmin_i,
            argmax_j,
        }
    }

    /// Slope of the lowest-index active piece at `x`.
    pub fn subgradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let t = self.trace(x)?;
        Ok(self.slope(t.argmin_i, t.argmax_j).to_vec())
    }

    /// Largest `||a_ij||_1` over all pieces (an L-infinity Lipschitz bound).
    pub fn max_slope_l1(&self) -> f64 {
        self.a
            .chunks(self.d)
            .map(|s| s.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Largest `||a_ij||_2` over all pieces.
    pub fn max_slope_l2(&self) -> f64 {
        self.a
            .chunks(self.d)
            .map(|s| s.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// Pieces of component `i` as owned affine functions.
    pub fn component_pieces(&self, i: usize) -> Vec<AffinePiece> {
        (0..self.n)
            .map(|j| AffinePiece::new(self.slope(i, j).to_vec(), self.offset(i, j)))
            .collect()
    }

    /// The model with coordinates in `fixed` frozen to the given values,
    /// as a function of the remaining coordinates (in their original order).
    pub fn fix_coordinates(&self, fixed: &[(usize, f64)]) -> Result<Self> {
        let mut frozen = vec![None; self.d];
        for &(r, v) in fixed {
            if r >= self.d {
                return Err(Error::invalid("fixed", format!("coordinate {r} out of range for d = {}", self.d)));
            }
            frozen[r] = Some(v);
        }
        let free: Vec<usize> = (0..self.d).filter(|&r| frozen[r].is_none()).collect();
        if free.is_empty() {
            return Err(Error::invalid("fixed", "at least one coordinate must stay free"));
        }
        let mut a = Vec::with_capacity(self.m * self.n * free.len());
        let mut b = Vec::with_capacity(self.m * self.n);
        for i in 0..self.m {
            for j in 0..self.n {
                let s = self.slope(i, j);
                a.extend(free.iter().map(|&r| s[r]));
                let shift: f64 = frozen
                    .iter()
                    .enumerate()
                    .filter_map(|(r, v)| v.map(|v| s[r] * v))
                    .sum();
                b.push(self.offset(i, j) + shift);
            }
        }
        Self::from_flat(free.len(), self.m, self.n, a, b)
    }

    /// Keeps only the listed pieces of each component. Rows may have
    /// different lengths; the result is padded back to a common `n`.
    pub(crate) fn select_pieces(&self, keep: &[Vec<usize>]) -> Result<Self> {
        let ragged: Vec<Vec<AffinePiece>> = keep
            .iter()
            .enumerate()
            .map(|(i, js)| {
                js.iter()
                    .map(|&j| AffinePiece::new(self.slope(i, j).to_vec(), self.offset(i, j)))
                    .collect()
            })
            .collect();
        normalize_components(self.d, &ragged)
    }

    pub fn to_file(&self) -> ModelFile {
        let a = (0..self.m)
            .map(|i| (0..self.n).map(|j| self.slope(i, j).to_vec()).collect())
            .collect();
        let b = (0..self.m)
            .map(|i| (0..self.n).map(|j| self.offset(i, j)).collect())
            .collect();
        ModelFile {
            d: self.d,
            m: self.m,
            n: self.n,
            a,
            b,
        }
    }

    pub fn to_json(&self) -> String {
        json::to_string(&self.to_file())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        json::from_str::<ModelFile>(text)?.into_model()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

/// On-disk layout: `{"d", "m", "n", "a": [m][n][d], "b": [m][n]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub d: usize,
    pub m: usize,
    pub n: usize,
    pub a: Vec<Vec<Vec<f64>>>,
    pub b: Vec<Vec<f64>>,
}

impl ModelFile {
    pub fn into_model(self) -> Result<MinMaxModel> {
        let ModelFile { d, m, n, a, b } = self;
        if a.len() != m {
            return Err(Error::shape("a", format!("expected {m} rows, found {}", a.len())));
        }
        for (i, row) in a.iter().enumerate() {
            if row.len() != n {
                return Err(Error::shape("a", format!("row {i}: expected {n} pieces, found {}", row.len())));
            }
            for (j, slope) in row.iter().enumerate() {
                if slope.len() != d {
                    return Err(Error::shape(
                        "a",
                        format!("a[{i}][{j}]: expected length {d}, found {}", slope.len()),
                    ));
                }
            }
        }
        if b.len() != m {
            return Err(Error::shape("b", format!("expected {m} rows, found {}", b.len())));
        }
        for (i, row) in b.iter().enumerate() {
            if row.len() != n {
                return Err(Error::shape("b", format!("row {i}: expected {n} entries, found {}", row.len())));
            }
        }
        let a = a.into_iter().flatten().flatten().collect();
        let b = b.into_iter().flatten().collect();
        MinMaxModel::from_flat(d, m, n, a, b)
    }
}

/// Pads ragged components `g_i = max_{j in J_i}` to a common piece count.
///
/// Missing pieces of `g_i` are filled with the affine minorant
/// `x -> v_i . x + g_i(0)`, where `v_i` is the slope of the lowest-index piece
/// attaining `max_j b_ij` (a subgradient of `g_i` at the origin). Values are
/// unchanged everywhere.
pub fn normalize_components(d: usize, components: &[Vec<AffinePiece>]) -> Result<MinMaxModel> {
    if components.is_empty() {
        return Err(Error::invalid("components", "need at least one component"));
    }
    let n = components.iter().map(Vec::len).max().unwrap_or(0);
    let m = components.len();
    let mut a = Vec::with_capacity(m * n * d);
    let mut b = Vec::with_capacity(m * n);
    for (i, pieces) in components.iter().enumerate() {
        if pieces.is_empty() {
            return Err(Error::invalid("components", format!("component {i} has no pieces")));
        }
        for p in pieces {
            check_dim(d, p.slope.len())?;
            a.extend_from_slice(&p.slope);
            b.push(p.offset);
        }
        let mut star = 0;
        for (j, p) in pieces.iter().enumerate() {
            if p.offset > pieces[star].offset {
                star = j;
            }
        }
        let pad = &pieces[star];
        for _ in pieces.len()..n {
            a.extend_from_slice(&pad.slope);
            b.push(pad.offset);
        }
    }
    MinMaxModel::from_flat(d, m, n, a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn m_abs() -> MinMaxModel {
        // min(|x|, |x - 1|)
        MinMaxModel::from_nested(
            &[vec![vec![1.0], vec![-1.0]], vec![vec![1.0], vec![-1.0]]],
            &[vec![0.0, 0.0], vec![-1.0, 1.0]],
        )
        .unwrap()
    }

    #[test]
    fn component_perspective_formula() {
        let g = m_abs();
        // g_1 = max(x - 1, 1 - x)
        assert_eq!(g.component_perspective(1, &[2.0], 1.0).unwrap(), g.component(1, &[2.0]));
        assert_eq!(g.component_perspective(1, &[2.0], 0.0).unwrap(), 2.0);
        assert_eq!(g.component_perspective(1, &[3.0], 2.0).unwrap(), 2.0 * g.component(1, &[1.5]));
        assert!(g.component_perspective(1, &[1.0], -1.0).is_err());
        assert!(g.component_perspective(2, &[1.0], 1.0).is_err());
    }

    fn random_model(rng: &mut ChaCha8Rng, d: usize, m: usize, n: usize) -> MinMaxModel {
        let a = (0..m * n * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b = (0..m * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        MinMaxModel::from_flat(d, m, n, a, b).unwrap()
    }

    // Independent double loop over nested coefficient arrays.
    fn naive_eval(file: &ModelFile, x: &[f64]) -> f64 {
        let mut outer = f64::INFINITY;
        for i in 0..file.m {
            let mut inner = f64::NEG_INFINITY;
            for j in 0..file.n {
                let mut v = file.b[i][j];
                for r in 0..file.d {
                    v += file.a[i][j][r] * x[r];
                }
                inner = inner.max(v);
            }
            outer = outer.min(inner);
        }
        outer
    }

    #[test]
    fn single_affine_piece() {
        let g = MinMaxModel::from_nested(&[vec![vec![2.0]]], &[vec![3.0]]).unwrap();
        assert_eq!(g.evaluate(&[2.0]).unwrap(), 7.0);
    }

    #[test]
    fn m_abs_value() {
        assert_eq!(m_abs().evaluate(&[0.75]).unwrap(), 0.25);
    }

    #[test]
    fn matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = random_model(&mut rng, 3, 4, 5);
        let file = g.to_file();
        for _ in 0..100 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let v = g.evaluate(&x).unwrap();
            assert!((v - naive_eval(&file, &x)).abs() <= 1e-12);
        }
    }

    #[test]
    fn trace_reports_active_piece() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = random_model(&mut rng, 2, 3, 4);
        for _ in 0..50 {
            let x = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
            let t = g.trace(&x).unwrap();
            assert_eq!(t.value, g.piece_value(t.argmin_i, t.argmax_j, &x));
            // min property: below every component, equal to one of them
            for i in 0..3 {
                assert!(t.value <= g.component(i, &x));
            }
            assert_eq!(t.value, g.component(t.argmin_i, &x));
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let err = m_abs().evaluate(&[1.0, 2.0]).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { expected: 1, got: 2 }));
        assert!(m_abs().subgradient(&[]).is_err());
    }

    #[test]
    fn subgradient_examples() {
        let g = m_abs();
        assert_eq!(g.subgradient(&[2.0]).unwrap(), vec![1.0]);
        assert_eq!(g.subgradient(&[-1.0]).unwrap(), vec![-1.0]);
    }

    #[test]
    fn subgradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = random_model(&mut rng, 3, 3, 4);
        let h = 1e-6;
        let mut checked = 0;
        while checked < 100 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect();
            // resample near ties of the min or the max
            let t = g.trace(&x).unwrap();
            let other_component = (0..3)
                .any(|i| i != t.argmin_i && (g.component(i, &x) - t.value).abs() < 1e-4);
            let other_piece = (0..4)
                .any(|j| j != t.argmax_j && (g.piece_value(t.argmin_i, j, &x) - t.value).abs() < 1e-4);
            let near_tie = other_component || other_piece;
            if near_tie {
                continue;
            }
            let u: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let xp: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a + h * b).collect();
            let fd = (g.evaluate(&xp).unwrap() - t.value) / h;
            let an = dot(&g.subgradient(&x).unwrap(), &u);
            assert!((fd - an).abs() <= 1e-5, "fd {fd} vs {an}");
            checked += 1;
        }
    }

    #[test]
    fn normalize_common_j_is_identity() {
        let g = m_abs();
        let ragged: Vec<Vec<AffinePiece>> = (0..2).map(|i| g.component_pieces(i)).collect();
        assert_eq!(normalize_components(1, &ragged).unwrap(), g);
    }

    #[test]
    fn normalize_pads_with_subgradient_at_origin() {
        let ragged = vec![
            vec![AffinePiece::new(vec![1.0], 0.0)],
            vec![AffinePiece::new(vec![1.0], 0.0), AffinePiece::new(vec![-1.0], 0.0)],
        ];
        let g = normalize_components(1, &ragged).unwrap();
        assert_eq!(g.num_pieces(), 2);
        assert_eq!(g.slope(0, 1), &[1.0]);
        assert_eq!(g.offset(0, 1), 0.0);
        for x in [-2.0, -0.5, 0.0, 0.3, 4.0] {
            assert_eq!(g.component(0, &[x]), x);
        }
    }

    #[test]
    fn normalize_preserves_values_on_random_ragged_models() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let d = rng.gen_range(1..4);
            let m = rng.gen_range(1..5);
            let ragged: Vec<Vec<AffinePiece>> = (0..m)
                .map(|_| {
                    (0..rng.gen_range(1..6))
                        .map(|_| {
                            AffinePiece::new(
                                (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                                rng.gen_range(-2.0..2.0),
                            )
                        })
                        .collect()
                })
                .collect();
            let g = normalize_components(d, &ragged).unwrap();
            for _ in 0..1000 {
                let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-10.0..10.0)).collect();
                let direct = ragged
                    .iter()
                    .map(|ps| ps.iter().map(|p| p.eval(&x)).fold(f64::NEG_INFINITY, f64::max))
                    .fold(f64::INFINITY, f64::min);
                assert!((g.evaluate(&x).unwrap() - direct).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn save_load_round_trip_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let g = random_model(&mut rng, 3, 2, 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        g.save(&path).unwrap();
        let back = MinMaxModel::load(&path).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(back.slopes_flat()), bits(g.slopes_flat()));
        assert_eq!(bits(back.offsets_flat()), bits(g.offsets_flat()));
    }

    #[test]
    fn wrong_b_shape_names_field() {
        let text = r#"{"d":1,"m":2,"n":2,"a":[[[1],[-1]],[[1],[-1]]],"b":[[0,0]]}"#;
        match MinMaxModel::from_json(text).unwrap_err() {
            Error::Shape { field, .. } => assert_eq!(field, "b"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_json_reports_position() {
        let err = MinMaxModel::from_json("{\"d\": 1,\n \"m\": }").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err:?}");
    }

    #[test]
    fn hand_written_m_abs() {
        let text = r#"{"d": 1, "m": 2, "n": 2,
            "a": [[[1], [-1]], [[1], [-1]]],
            "b": [[0, 0], [-1, 1]]}"#;
        let g = MinMaxModel::from_json(text).unwrap();
        assert_eq!(g.evaluate(&[0.75]).unwrap(), 0.25);
    }

    #[test]
    fn fixing_coordinates_restricts_the_function() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let g = random_model(&mut rng, 4, 3, 3);
        let r = g.fix_coordinates(&[(1, 0.5), (3, -1.25)]).unwrap();
        assert_eq!(r.dim(), 2);
        for _ in 0..50 {
            let (u, v) = (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            let full = g.evaluate(&[u, 0.5, v, -1.25]).unwrap();
            assert!((r.evaluate(&[u, v]).unwrap() - full).abs() < 1e-12);
        }
    }
}
