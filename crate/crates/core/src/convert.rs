//! Exact conversion of one-hidden-layer scalar ReLU networks.
//!
//! Write `f = p - q` with `p = b2 + sum_{w_k > 0} w_k relu(u_k)` and
//! `q = sum_{w_k < 0} |w_k| relu(u_k)`. Since `relu(u) = max(0, u)`, each
//! sum of relus is a max over subsets of which units are switched on, so
//! `p = max_S p_S` and `q = max_T q_T`, hence `f = min_T max_S (p_S - q_T)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::json;
use crate::model::MinMaxModel;

pub const DEFAULT_CAP: usize = 14;

#[derive(Debug, Clone, PartialEq)]
pub struct ReluNet1H {
    d: usize,
    w1: Vec<Vec<f64>>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetFile {
    d: usize,
    h: usize,
    #[serde(rename = "W1")]
    w1: Vec<Vec<f64>>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: f64,
}

impl ReluNet1H {
    pub fn new(w1: Vec<Vec<f64>>, b1: Vec<f64>, w2: Vec<f64>, b2: f64) -> Result<Self> {
        let h = w1.len();
        if h == 0 {
            return Err(Error::shape("W1", "network needs at least one hidden unit"));
        }
        let d = w1[0].len();
        if d == 0 {
            return Err(Error::shape("W1", "input dimension must be positive"));
        }
        if let Some(k) = w1.iter().position(|row| row.len() != d) {
            return Err(Error::shape("W1", format!("row {k} has length {}, expected {d}", w1[k].len())));
        }
        if b1.len() != h {
            return Err(Error::shape("b1", format!("length {}, expected {h}", b1.len())));
        }
        if w2.len() != h {
            return Err(Error::shape("w2", format!("length {}, expected {h}", w2.len())));
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !w1.iter().all(|r| finite(r)) {
            return Err(Error::invalid("W1", "entries must be finite"));
        }
        if !finite(&b1) {
            return Err(Error::invalid("b1", "entries must be finite"));
        }
        if !finite(&w2) {
            return Err(Error::invalid("w2", "entries must be finite"));
        }
        if !b2.is_finite() {
            return Err(Error::invalid("b2", "must be finite"));
        }
        Ok(Self { d, w1, b1, w2, b2 })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn hidden(&self) -> usize {
        self.w1.len()
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        crate::error::check_dim(self.d, x.len())?;
        let mut out = self.b2;
        for ((row, b), w) in self.w1.iter().zip(&self.b1).zip(&self.w2) {
            let pre: f64 = row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b;
            out += w * pre.max(0.0);
        }
        Ok(out)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: NetFile = json::from_str(text)?;
        if f.w1.len() != f.h {
            return Err(Error::shape("W1", format!("{} rows, but h = {}", f.w1.len(), f.h)));
        }
        let net = Self::new(f.w1, f.b1, f.w2, f.b2)?;
        if net.d != f.d {
            return Err(Error::shape("W1", format!("rows have length {}, but d = {}", net.d, f.d)));
        }
        Ok(net)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        json::to_string(&NetFile {
            d: self.d,
            h: self.hidden(),
            w1: self.w1.clone(),
            b1: self.b1.clone(),
            w2: self.w2.clone(),
            b2: self.b2,
        })
    }
}

/// Sum of the affine pre-activations selected by `mask`, each scaled by its weight.
fn subset_affine(net: &ReluNet1H, units: &[(usize, f64)], mask: usize, slope: &mut [f64]) -> f64 {
    slope.iter_mut().for_each(|s| *s = 0.0);
    let mut offset = 0.0;
    for (bit, &(k, w)) in units.iter().enumerate() {
        if mask >> bit & 1 == 1 {
            for (s, a) in slope.iter_mut().zip(&net.w1[k]) {
                *s += w * a;
            }
            offset += w * net.b1[k];
        }
    }
    offset
}

/// Converts `net` into an equal min-max affine model with `2^|N|` components
/// of `2^|P|` pieces, `P`/`N` the units with positive/negative output weight.
pub fn relu_to_minmax(net: &ReluNet1H, cap: usize) -> Result<MinMaxModel> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (k, &w) in net.w2.iter().enumerate() {
        if w > 0.0 {
            pos.push((k, w));
        } else if w < 0.0 {
            neg.push((k, -w));
        }
    }
    for (sign, units) in [("positive", &pos), ("negative", &neg)] {
        if units.len() > cap {
            let size = 1u128 << units.len().min(127);
            return Err(Error::CapExceeded {
                sign,
                units: units.len(),
                size,
                cap,
            });
        }
    }
    let d = net.d;
    let (m, n) = (1usize << neg.len(), 1usize << pos.len());

    let mut p_slope = vec![0.0; n * d];
    let mut p_off = vec![0.0; n];
    let mut buf = vec![0.0; d];
    for s in 0..n {
        p_off[s] = subset_affine(net, &pos, s, &mut buf) + net.b2;
        p_slope[s * d..(s + 1) * d].copy_from_slice(&buf);
    }
    let mut a = Vec::with_capacity(m * n * d);
    let mut b = Vec::with_capacity(m * n);
    for t in 0..m {
        let q_off = subset_affine(net, &neg, t, &mut buf);
        for s in 0..n {
            a.extend(p_slope[s * d..(s + 1) * d].iter().zip(&buf).map(|(p, q)| p - q));
            b.push(p_off[s] - q_off);
        }
    }
    MinMaxModel::from_flat(d, m, n, a, b)
}
