//! Image datasets: IDX containers, class filtering, pooling and generators.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::train::Dataset;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Raw `u8` images as stored in an IDX file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn image(&self, k: usize) -> &[u8] {
        let sz = self.rows * self.cols;
        &self.pixels[k * sz..(k + 1) * sz]
    }
}

fn read_header(bytes: &[u8], magic: u32, dims: usize) -> Result<Vec<usize>> {
    let head = 4 + 4 * dims;
    if bytes.len() < 4 {
        return Err(Error::Idx(format!("file too short for a magic number ({} bytes)", bytes.len())));
    }
    let got = u32::from_be_bytes(bytes[0..4].try_into().expect("4 bytes"));
    if got != magic {
        return Err(Error::Idx(format!("bad magic 0x{got:08x}, expected 0x{magic:08x}")));
    }
    if bytes.len() < head {
        return Err(Error::Truncated {
            expected: head,
            actual: bytes.len(),
        });
    }
    Ok((0..dims)
        .map(|k| u32::from_be_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().expect("4 bytes")) as usize)
        .collect())
}

fn check_payload(bytes: &[u8], head: usize, payload: usize) -> Result<()> {
    let expected = head + payload;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    Ok(())
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let dims = read_header(bytes, IMAGE_MAGIC, 3)?;
    let (count, rows, cols) = (dims[0], dims[1], dims[2]);
    let payload = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::Idx("image dimensions overflow".into()))?;
    check_payload(bytes, 16, payload)?;
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: bytes[16..].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let count = read_header(bytes, LABEL_MAGIC, 1)?[0];
    check_payload(bytes, 8, count)?;
    Ok(bytes[8..].to_vec())
}

pub fn write_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    for v in [images.count, images.rows, images.cols] {
        out.extend_from_slice(&(v as u32).to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Images flattened row-major with pixels scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub points: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
    pub rows: usize,
    pub cols: usize,
    /// The class whose predictions are certified.
    pub sensitive: Option<u8>,
}

impl LabeledSet {
    pub fn from_idx(images: &IdxImages, labels: &[u8]) -> Result<Self> {
        if images.count != labels.len() {
            return Err(Error::Idx(format!(
                "{} images but {} labels",
                images.count,
                labels.len()
            )));
        }
        let points = (0..images.count)
            .map(|k| images.image(k).iter().map(|&p| p as f64 / 255.0).collect())
            .collect();
        Ok(Self {
            points,
            labels: labels.to_vec(),
            rows: images.rows,
            cols: images.cols,
            sensitive: None,
        })
    }

    pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Self> {
        let img = parse_idx_images(&std::fs::read(images)?)?;
        let lab = parse_idx_labels(&std::fs::read(labels)?)?;
        Self::from_idx(&img, &lab)
    }

    pub fn dim(&self) -> usize {
        self.rows * self.cols
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Targets `+1` for the sensitive class and `-1` otherwise.
    pub fn to_dataset(&self) -> Result<Dataset> {
        let s = self
            .sensitive
            .ok_or_else(|| Error::invalid("sensitive", "no sensitive class recorded"))?;
        let targets = self.labels.iter().map(|&l| if l == s { 1.0 } else { -1.0 }).collect();
        Dataset::new(self.points.clone(), targets)
    }

    /// `(point, label)` pairs.
    pub fn pairs(&self) -> Vec<(Vec<f64>, u8)> {
        self.points.iter().cloned().zip(self.labels.iter().copied()).collect()
    }

    pub fn take(&self, count: usize) -> Self {
        Self {
            points: self.points.iter().take(count).cloned().collect(),
            labels: self.labels.iter().take(count).copied().collect(),
            ..self.clone()
        }
    }

    /// First `count` samples of each listed class, order preserved.
    pub fn take_per_class(&self, count: usize, classes: &[u8]) -> Self {
        let mut seen = [0usize; 256];
        let keep: Vec<usize> = (0..self.len())
            .filter(|&k| {
                let l = self.labels[k];
                if classes.contains(&l) && seen[l as usize] < count {
                    seen[l as usize] += 1;
                    true
                } else {
                    false
                }
            })
            .collect();
        Self {
            points: keep.iter().map(|&k| self.points[k].clone()).collect(),
            labels: keep.iter().map(|&k| self.labels[k]).collect(),
            rows: self.rows,
            cols: self.cols,
            sensitive: self.sensitive,
        }
    }
}

/// Keeps classes `a` and `b`; `a` becomes the sensitive class.
pub fn filter_binary(set: &LabeledSet, a: u8, b: u8) -> Result<LabeledSet> {
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (x, &l) in set.points.iter().zip(&set.labels) {
        if l == a || l == b {
            points.push(x.clone());
            labels.push(l);
        }
    }
    if points.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no samples of class {a} or {b} among {} inputs",
            set.len()
        )));
    }
    Ok(LabeledSet {
        points,
        labels,
        rows: set.rows,
        cols: set.cols,
        sensitive: Some(a),
    })
}

/// Mean pooling over `factor x factor` windows; edge windows are partial.
pub fn downsample(set: &LabeledSet, factor: usize) -> Result<LabeledSet> {
    if factor == 0 {
        return Err(Error::invalid("factor", "must be positive"));
    }
    let rows = set.rows.div_ceil(factor);
    let cols = set.cols.div_ceil(factor);
    let points = set
        .points
        .iter()
        .map(|img| {
            let mut out = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for c in 0..cols {
                    let (r0, r1) = (r * factor, ((r + 1) * factor).min(set.rows));
                    let (c0, c1) = (c * factor, ((c + 1) * factor).min(set.cols));
                    let mut sum = 0.0;
                    for rr in r0..r1 {
                        for cc in c0..c1 {
                            sum += img[rr * set.cols + cc];
                        }
                    }
                    out.push(sum / ((r1 - r0) * (c1 - c0)) as f64);
                }
            }
            out
        })
        .collect();
    Ok(LabeledSet {
        points,
        labels: set.labels.clone(),
        rows,
        cols,
        sensitive: set.sensitive,
    })
}

/// Two unit-variance spherical clusters at `-sep/2 e_1` (label 0) and
/// `+sep/2 e_1` (label 1), alternating labels.
pub fn synth_two_gaussians(seed: u64, n: usize, d: usize, separation: f64) -> Result<LabeledSet> {
    if d == 0 {
        return Err(Error::invalid("d", "must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for k in 0..n {
        let label = (k % 2) as u8;
        let mut x: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        x[0] += if label == 1 { separation / 2.0 } else { -separation / 2.0 };
        points.push(x);
        labels.push(label);
    }
    Ok(LabeledSet {
        points,
        labels,
        rows: 1,
        cols: d,
        sensitive: Some(1),
    })
}

// ---------------------------------------------------------------------------
// Procedural handwritten-style digits

const SIDE: usize = 28;

/// Stroke skeleton of a digit as arcs `(cx, cy, rx, ry, from_deg, to_deg)` in
/// a `[-1, 1]^2` frame with `y` pointing down.
fn skeleton(digit: u8) -> Option<Vec<(f64, f64, f64, f64, f64, f64)>> {
    let s = match digit {
        0 => vec![(0.0, 0.0, 0.6, 0.95, 0.0, 360.0)],
        1 => vec![(0.0, 0.0, 0.0, 0.95, -90.0, 90.0), (-0.15, -0.8, 0.15, 0.15, -90.0, 0.0)],
        3 => vec![
            (0.0, -0.48, 0.5, 0.47, -160.0, 90.0),
            (0.0, 0.48, 0.55, 0.5, -90.0, 160.0),
        ],
        8 => vec![
            (0.0, -0.48, 0.45, 0.47, 0.0, 360.0),
            (0.0, 0.48, 0.55, 0.5, 0.0, 360.0),
        ],
        _ => return None,
    };
    Some(s)
}

/// One 28x28 grayscale rendering of `digit` with random pose and stroke.
pub fn render_digit(digit: u8, rng: &mut impl Rng) -> Result<Vec<u8>> {
    let arcs = skeleton(digit).ok_or_else(|| Error::invalid("digit", format!("no renderer for {digit}")))?;
    let rot: f64 = rng.gen_range(-0.25..0.25);
    let scale: f64 = rng.gen_range(7.5..9.5);
    let slant: f64 = rng.gen_range(-0.2..0.2);
    let (dx, dy): (f64, f64) = (rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5));
    let thick: f64 = rng.gen_range(1.0..1.7);
    let (sn, cs) = rot.sin_cos();

    let mut pts = Vec::new();
    for &(cx, cy, rx, ry, a0, a1) in &arcs {
        let wobble: f64 = rng.gen_range(0.9..1.1);
        let steps = 96;
        for s in 0..=steps {
            let t = (a0 + (a1 - a0) * s as f64 / steps as f64).to_radians();
            let (x, y) = (cx + rx * wobble * t.cos(), cy + ry * t.sin());
            let x = x + slant * y;
            let (xr, yr) = (cs * x - sn * y, sn * x + cs * y);
            pts.push((13.5 + dx + scale * xr, 13.5 + dy + scale * yr));
        }
    }
    let mut img = vec![0u8; SIDE * SIDE];
    for r in 0..SIDE {
        for c in 0..SIDE {
            let (px, py) = (c as f64, r as f64);
            let dist2 = pts
                .iter()
                .map(|&(x, y)| (x - px).powi(2) + (y - py).powi(2))
                .fold(f64::INFINITY, f64::min);
            let v = (-dist2 / (thick * thick)).exp() * 1.3;
            let noise: f64 = rng.gen_range(-0.03..0.03);
            let v = if v > 0.05 { (v + noise).clamp(0.0, 1.0) } else { 0.0 };
            img[r * SIDE + c] = (v * 255.0).round() as u8;
        }
    }
    Ok(img)
}

/// `per_class` renderings of each digit, interleaved class by class.
pub fn synthetic_digits(seed: u64, per_class: usize, digits: &[u8]) -> Result<(IdxImages, Vec<u8>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(per_class * digits.len() * SIDE * SIDE);
    let mut labels = Vec::with_capacity(per_class * digits.len());
    for _ in 0..per_class {
        for &d in digits {
            pixels.extend(render_digit(d, &mut rng)?);
            labels.push(d);
        }
    }
    Ok((
        IdxImages {
            count: labels.len(),
            rows: SIDE,
            cols: SIDE,
            pixels,
        },
        labels,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_header_arithmetic() {
        let mut bytes = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        bytes.extend([0, 255, 10, 20, 30, 40, 50, 60]);
        let img = parse_idx_images(&bytes).unwrap();
        assert_eq!((img.count, img.rows, img.cols), (2, 2, 2));
        assert_eq!(img.image(1), &[30, 40, 50, 60]);
        assert_eq!(write_idx_images(&img), bytes);
    }

    #[test]
    fn label_header_arithmetic() {
        let bytes = [0, 0, 8, 1, 0, 0, 0, 3, 3, 8, 1];
        assert_eq!(parse_idx_labels(&bytes).unwrap(), vec![3, 8, 1]);
        assert_eq!(write_idx_labels(&[3, 8, 1]), bytes);
    }

    #[test]
    fn truncation_and_magic_errors() {
        let bytes = [0, 0, 8, 1, 0, 0, 0, 3, 3, 8];
        match parse_idx_labels(&bytes).unwrap_err() {
            Error::Truncated { expected, actual } => assert_eq!((expected, actual), (11, 10)),
            e => panic!("{e:?}"),
        }
        let bytes = [0, 0, 8, 1, 0, 0, 0, 1, 3, 8];
        assert!(matches!(parse_idx_labels(&bytes), Err(Error::Truncated { expected: 9, actual: 10 })));
        assert!(matches!(parse_idx_images(&[0, 0, 8, 1, 0, 0, 0, 0]), Err(Error::Idx(_))));
        assert!(matches!(parse_idx_labels(&[0, 0, 8]), Err(Error::Idx(_))));
    }

    #[test]
    fn pixel_scaling_is_exact() {
        let img = IdxImages {
            count: 1,
            rows: 1,
            cols: 2,
            pixels: vec![0, 255],
        };
        let set = LabeledSet::from_idx(&img, &[3]).unwrap();
        assert_eq!(set.points[0], vec![0.0, 1.0]);
    }

    fn toy() -> LabeledSet {
        let labels: Vec<u8> = (0..30).map(|k| (k % 10) as u8).collect();
        LabeledSet {
            points: labels.iter().map(|&l| vec![l as f64 / 9.0]).collect(),
            labels,
            rows: 1,
            cols: 1,
            sensitive: None,
        }
    }

    #[test]
    fn filtering() {
        let set = toy();
        let f = filter_binary(&set, 3, 8).unwrap();
        assert!(f.labels.iter().all(|&l| l == 3 || l == 8));
        let direct = set.labels.iter().filter(|&&l| l == 3 || l == 8).count();
        assert_eq!(f.len(), direct);
        assert_eq!(f.sensitive, Some(3));
        let none = LabeledSet { labels: vec![0; 30], ..set };
        assert!(matches!(filter_binary(&none, 3, 8), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn per_class_cap() {
        let t = toy().take_per_class(2, &[3, 8]);
        assert_eq!(t.labels, vec![3, 8, 3, 8]);
        assert_eq!(t.points[2], vec![3.0 / 9.0]);
        assert_eq!(toy().take_per_class(5, &[1]).len(), 3);
    }

    fn image_set(img: Vec<f64>, rows: usize, cols: usize) -> LabeledSet {
        LabeledSet {
            points: vec![img],
            labels: vec![3],
            rows,
            cols,
            sensitive: Some(3),
        }
    }

    #[test]
    fn pooling() {
        let c = image_set(vec![0.4; 28 * 28], 28, 28);
        let p = downsample(&c, 4).unwrap();
        assert_eq!((p.rows, p.cols), (7, 7));
        assert!(p.points[0].iter().all(|&v| (v - 0.4).abs() < 1e-15));
        assert_eq!(downsample(&c, 1).unwrap(), c);

        let checker: Vec<f64> = (0..16).map(|k| ((k / 4 + k % 4) % 2) as f64).collect();
        let p = downsample(&image_set(checker, 4, 4), 2).unwrap();
        assert_eq!(p.points[0], vec![0.5; 4]);

        let p = downsample(&image_set(vec![1.0; 9], 3, 3), 2).unwrap();
        assert_eq!((p.rows, p.cols), (2, 2));
        assert_eq!(p.points[0], vec![1.0; 4]);
    }

    #[test]
    fn gaussians() {
        let s = synth_two_gaussians(1, 0, 2, 10.0).unwrap();
        assert!(s.is_empty());
        let s = synth_two_gaussians(1, 2000, 3, 10.0).unwrap();
        assert_eq!(s, synth_two_gaussians(1, 2000, 3, 10.0).unwrap());
        let mean = |lab: u8, r: usize| {
            let v: Vec<f64> = s.points.iter().zip(&s.labels).filter(|(_, &l)| l == lab).map(|(x, _)| x[r]).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!((mean(1, 0) - mean(0, 0) - 10.0).abs() < 0.2);
        assert!((mean(1, 1) - mean(0, 1)).abs() < 0.2);
    }

    #[test]
    fn separated_gaussians_are_learnable() {
        use crate::train::{init_model, sign_accuracy, train, Loss, TrainConfig};
        let s = synth_two_gaussians(2, 200, 2, 10.0).unwrap();
        let data = s.to_dataset().unwrap();
        let init = init_model(2, 1, 1, &data, 0).unwrap();
        let r = train(&init, &data, &TrainConfig::new(30, 0.05, 16, 0, Loss::Logistic)).unwrap();
        assert_eq!(sign_accuracy(&r.model, &data).unwrap(), 1.0);
    }

    #[test]
    fn rendered_digits_round_trip_through_idx() {
        let (img, labels) = synthetic_digits(7, 3, &[3, 8]).unwrap();
        assert_eq!(img.count, 6);
        let back = parse_idx_images(&write_idx_images(&img)).unwrap();
        assert_eq!(back, img);
        assert_eq!(parse_idx_labels(&write_idx_labels(&labels)).unwrap(), labels);
        // some ink, not saturated everywhere
        for k in 0..img.count {
            let ink = img.image(k).iter().filter(|&&p| p > 128).count();
            assert!(ink > 20 && ink < 400, "image {k} has {ink} dark pixels");
        }
        assert_eq!(synthetic_digits(7, 3, &[3, 8]).unwrap().0, img);
        assert!(render_digit(5, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
