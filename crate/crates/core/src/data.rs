//! Synthetic generators, IDX and CSV loaders, and image rotation.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::net::MapShape;
use crate::numerics::DenseMatrix;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Standard deviation of the toy-regression noise.
pub const TOY_NOISE_STD: f64 = 0.1;
/// Input domain of the toy regression before any gap is removed.
pub const TOY_DOMAIN: (f64, f64) = (0.0, 6.5);
/// Per-coordinate noise of the banana generator.
pub const BANANA_NOISE_STD: f64 = 0.15;

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// N×K real targets.
    Real(DenseMatrix),
    Classes { labels: Vec<usize>, num_classes: usize },
}

/// Inputs are N rows of `shape.volume()` values each.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: DenseMatrix,
    pub shape: MapShape,
    pub targets: Targets,
    pub split: String,
}

impl Dataset {
    pub fn new(inputs: DenseMatrix, shape: MapShape, targets: Targets, split: impl Into<String>) -> Result<Self> {
        if inputs.cols() != shape.volume() {
            return Err(Error::dims(format!("inputs have {} columns, shape {shape:?}", inputs.cols())));
        }
        let n = match &targets {
            Targets::Real(y) => y.rows(),
            Targets::Classes { labels, num_classes } => {
                if let Some(&bad) = labels.iter().find(|&&l| l >= *num_classes) {
                    return Err(Error::dims(format!("label {bad} with {num_classes} classes")));
                }
                labels.len()
            }
        };
        if n != inputs.rows() {
            return Err(Error::dims(format!("{} inputs but {n} targets", inputs.rows())));
        }
        Ok(Self { inputs, shape, targets, split: split.into() })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Classes { labels, .. } => Some(labels),
            Targets::Real(_) => None,
        }
    }

    pub fn num_classes(&self) -> Option<usize> {
        match &self.targets {
            Targets::Classes { num_classes, .. } => Some(*num_classes),
            Targets::Real(_) => None,
        }
    }

    /// Rows `idx` in the given order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        let inputs = crate::net::model::select_rows(&self.inputs, idx);
        let targets = match &self.targets {
            Targets::Real(y) => Targets::Real(crate::net::model::select_rows(y, idx)),
            Targets::Classes { labels, num_classes } => {
                Targets::Classes { labels: idx.iter().map(|&i| labels[i]).collect(), num_classes: *num_classes }
            }
        };
        Self { inputs, shape: self.shape, targets, split: self.split.clone() }
    }

    /// The first `n` rows (or all of them).
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Examples whose label is `class`.
    pub fn filter_class(&self, class: usize) -> Self {
        let idx: Vec<usize> = match self.labels() {
            Some(l) => (0..l.len()).filter(|&i| l[i] == class).collect(),
            None => Vec::new(),
        };
        self.subset(&idx)
    }

    /// Same examples with different inputs (e.g. after a perturbation).
    pub fn with_inputs(&self, inputs: DenseMatrix) -> Result<Self> {
        Self::new(inputs, self.shape, self.targets.clone(), self.split.clone())
    }
}

/// The toy regression function `sin(2x) + 0.2x`.
pub fn toy_function(x: f64) -> f64 {
    (2.0 * x).sin() + 0.2 * x
}

/// `n` inputs uniform on `[0, 6.5]` minus the open `gap`, with targets
/// `sin(2x) + 0.2x + ε`, `ε ~ N(0, 0.01)`.
pub fn gen_toy_regression(n: usize, gap: Option<(f64, f64)>, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::Config(format!("toy regression needs n >= 2, got {n}")));
    }
    let (lo, hi) = TOY_DOMAIN;
    let (g0, g1) = match gap {
        Some((a, b)) if a < b => (a.clamp(lo, hi), b.clamp(lo, hi)),
        Some((a, b)) => return Err(Error::Config(format!("gap ({a}, {b}) is empty"))),
        None => (hi, hi),
    };
    let kept = (hi - lo) - (g1 - g0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, TOY_NOISE_STD).expect("valid std");
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        // map a uniform draw on the kept length onto [lo, g0] ∪ [g1, hi]
        let u = rng.random_range(0.0..kept);
        let xi = if lo + u <= g0 { lo + u } else { g1 + (u - (g0 - lo)) };
        x.push(xi);
        y.push(toy_function(xi) + noise.sample(&mut rng));
    }
    Dataset::new(DenseMatrix::column(&x), MapShape::dense(1), Targets::Real(DenseMatrix::column(&y)), "train")
}

/// Two interleaved crescents: class 0 is `(cos t, sin t)`, class 1 is
/// `(1 − cos t, 0.5 − sin t)`, `t ~ U[0, π]`, plus `N(0, 0.15²)` noise per
/// coordinate. Labels alternate, so classes differ in size by at most one.
pub fn gen_banana(n: usize, seed: u64) -> Result<Dataset> {
    if n < 2 || !n.is_multiple_of(2) {
        return Err(Error::Config(format!("banana needs an even n >= 2, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, BANANA_NOISE_STD).expect("valid std");
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let t = rng.random_range(0.0..std::f64::consts::PI);
        let class = i % 2;
        let (a, b) = if class == 0 { (t.cos(), t.sin()) } else { (1.0 - t.cos(), 0.5 - t.sin()) };
        data.push(a + noise.sample(&mut rng));
        data.push(b + noise.sample(&mut rng));
        labels.push(class);
    }
    Dataset::new(
        DenseMatrix::new(n, 2, data)?,
        MapShape::dense(2),
        Targets::Classes { labels, num_classes: 2 },
        "train",
    )
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut f = File::open(path)?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)?;
    Ok(buf)
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::TruncatedFile { path: path.to_path_buf(), detail: format!("header ends before byte {}", at + 4) })
}

/// Reads an IDX image/label pair; pixels are scaled to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = read_all(images_path)?;
    let magic = be_u32(&img, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic { found: magic, expected: IDX_IMAGES_MAGIC });
    }
    let n = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    let need = 16 + n * rows * cols;
    if img.len() < need {
        return Err(Error::TruncatedFile {
            path: images_path.to_path_buf(),
            detail: format!("{} bytes, header promises {need}", img.len()),
        });
    }
    let lab = read_all(labels_path)?;
    let magic = be_u32(&lab, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic { found: magic, expected: IDX_LABELS_MAGIC });
    }
    let nl = be_u32(&lab, 4, labels_path)? as usize;
    if nl != n {
        return Err(Error::CountMismatch { images: n, labels: nl });
    }
    if lab.len() < 8 + n {
        return Err(Error::TruncatedFile {
            path: labels_path.to_path_buf(),
            detail: format!("{} bytes, header promises {}", lab.len(), 8 + n),
        });
    }
    let pixels: Vec<f64> = img[16..need].iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = lab[8..8 + n].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(10, |&m| (m + 1).max(10));
    Dataset::new(
        DenseMatrix::new(n, rows * cols, pixels)?,
        MapShape::new(rows, cols, 1),
        Targets::Classes { labels, num_classes },
        "idx",
    )
}

/// Writes an IDX pair from raw bytes (`n·rows·cols` pixels).
pub fn write_idx(
    images_path: &Path,
    labels_path: &Path,
    pixels: &[u8],
    rows: usize,
    cols: usize,
    labels: &[u8],
) -> Result<()> {
    let n = labels.len();
    if pixels.len() != n * rows * cols {
        return Err(Error::dims(format!("{} pixels for {n} images of {rows}x{cols}", pixels.len())));
    }
    let mut w = BufWriter::new(File::create(images_path)?);
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        w.write_all(&v.to_be_bytes())?;
    }
    w.write_all(pixels)?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(labels_path)?);
    for v in [IDX_LABELS_MAGIC, n as u32] {
        w.write_all(&v.to_be_bytes())?;
    }
    w.write_all(labels)?;
    w.flush()?;
    Ok(())
}

/// Loads a headed CSV; `target` names the target column, every other
/// column becomes an input feature.
pub fn load_csv(path: &Path, target: &str) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let t = headers
        .iter()
        .position(|h| h == target)
        .ok_or_else(|| Error::Config(format!("column {target:?} not in {:?}", headers.iter().collect::<Vec<_>>())))?;
    let d = headers.len() - 1;
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("row {}: {field:?} is not a number", line + 2)))?;
            if j == t {
                y.push(v);
            } else {
                x.push(v);
            }
        }
    }
    if y.is_empty() {
        return Err(Error::EmptyData);
    }
    let n = y.len();
    Dataset::new(DenseMatrix::new(n, d, x)?, MapShape::dense(d), Targets::Real(DenseMatrix::column(&y)), "csv")
}

/// Rotates every image counterclockwise (as displayed, row 0 on top) by
/// `angle` degrees about the image centre, bilinear with zero fill.
pub fn rotate_images(batch: &DenseMatrix, shape: MapShape, angle: f64) -> Result<DenseMatrix> {
    if shape.height != shape.width {
        return Err(Error::dims(format!("rotation needs square images, got {}x{}", shape.height, shape.width)));
    }
    if batch.cols() != shape.volume() {
        return Err(Error::dims(format!("images have {} values, shape {shape:?}", batch.cols())));
    }
    let turns = angle.rem_euclid(360.0);
    if turns == 0.0 {
        return Ok(batch.clone());
    }
    let (s, c) = turns.to_radians().sin_cos();
    let (h, w, ch) = (shape.height, shape.width, shape.channels);
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    // source coordinates and bilinear taps are shared by every image
    let mut taps: Vec<[(usize, f64); 4]> = Vec::with_capacity(h * w);
    let snap = |v: f64| if (v - v.round()).abs() < 1e-9 { v.round() } else { v };
    for r in 0..h {
        for q in 0..w {
            let xp = q as f64 - cx;
            let yp = cy - r as f64;
            let x = snap(cx + (xp * c + yp * s));
            let y = snap(cy - (-xp * s + yp * c));
            let (r0, q0) = (y.floor(), x.floor());
            let (fy, fx) = (y - r0, x - q0);
            let mut t = [(usize::MAX, 0.0); 4];
            for (k, (dr, dq, wt)) in [
                (0.0, 0.0, (1.0 - fy) * (1.0 - fx)),
                (0.0, 1.0, (1.0 - fy) * fx),
                (1.0, 0.0, fy * (1.0 - fx)),
                (1.0, 1.0, fy * fx),
            ]
            .into_iter()
            .enumerate()
            {
                let (rr, qq) = (r0 + dr, q0 + dq);
                if rr >= 0.0 && qq >= 0.0 && (rr as usize) < h && (qq as usize) < w && wt != 0.0 {
                    t[k] = ((rr as usize) * w + qq as usize, wt);
                }
            }
            taps.push(t);
        }
    }
    let mut out = DenseMatrix::zeros(batch.rows(), batch.cols());
    for b in 0..batch.rows() {
        let src = batch.row(b);
        let dst = out.row_mut(b);
        for (p, t) in taps.iter().enumerate() {
            for k in 0..ch {
                dst[p * ch + k] = t
                    .iter()
                    .filter(|(i, _)| *i != usize::MAX)
                    .map(|&(i, wt)| wt * src[i * ch + k])
                    .sum();
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_regression_contract() {
        let d = gen_toy_regression(500, Some((2.0, 4.0)), 1).unwrap();
        assert!(d.inputs.data().iter().all(|&x| !(x > 2.0 && x < 4.0)));
        assert!(d.inputs.data().iter().all(|&x| (0.0..=6.5).contains(&x)));
        assert_eq!(d, gen_toy_regression(500, Some((2.0, 4.0)), 1).unwrap());
        assert_ne!(d, gen_toy_regression(500, Some((2.0, 4.0)), 2).unwrap());
        let d = gen_toy_regression(1000, None, 3).unwrap();
        let Targets::Real(y) = &d.targets else { panic!() };
        let res: Vec<f64> = (0..1000).map(|i| y.get(i, 0) - toy_function(d.inputs.get(i, 0))).collect();
        let mean = res.iter().sum::<f64>() / 1000.0;
        let var = res.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / 999.0;
        assert!((var - 0.01).abs() <= 0.002, "{var}");
        assert!(gen_toy_regression(1, None, 0).is_err());
    }

    /// Best accuracy over all lines through a fine grid of directions.
    fn best_linear_accuracy(d: &Dataset) -> f64 {
        let labels = d.labels().unwrap();
        let n = d.len();
        let mut best: f64 = 0.0;
        for k in 0..720 {
            let th = k as f64 * std::f64::consts::PI / 360.0;
            let (s, c) = th.sin_cos();
            let mut proj: Vec<(f64, usize)> =
                (0..n).map(|i| (d.inputs.get(i, 0) * c + d.inputs.get(i, 1) * s, labels[i])).collect();
            proj.sort_by(|a, b| a.0.total_cmp(&b.0));
            // sweep the threshold; count class-1 points above it
            let total1 = labels.iter().filter(|&&l| l == 1).count();
            let mut below0 = 0;
            let mut below1 = 0;
            for i in 0..=n {
                let correct = below0 + (total1 - below1);
                best = best.max(correct as f64 / n as f64).max((n - correct) as f64 / n as f64);
                if i < n {
                    if proj[i].1 == 0 {
                        below0 += 1;
                    } else {
                        below1 += 1;
                    }
                }
            }
        }
        best
    }

    #[test]
    fn banana_contract() {
        let d = gen_banana(1000, 4).unwrap();
        let l = d.labels().unwrap();
        let ones = l.iter().filter(|&&x| x == 1).count();
        assert!((1000 - 2 * ones as i64).abs() <= 1);
        assert_eq!(d, gen_banana(1000, 4).unwrap());
        let acc = best_linear_accuracy(&d);
        assert!(acc < 0.95, "{acc}");
        assert!(gen_banana(5, 0).is_err());
    }

    #[test]
    fn idx_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        let pixels: Vec<u8> = (0..18).map(|i| (i * 14) as u8).collect();
        write_idx(&ip, &lp, &pixels, 3, 3, &[7, 2]).unwrap();
        let d = load_idx(&ip, &lp).unwrap();
        assert_eq!(d.shape, MapShape::new(3, 3, 1));
        assert_eq!(d.labels().unwrap(), &[7, 2]);
        for (a, &b) in d.inputs.data().iter().zip(&pixels) {
            assert_eq!(*a, b as f64 / 255.0);
        }
        assert!(d.inputs.data().iter().all(|&v| (0.0..=1.0).contains(&v)));

        write_idx(&ip, &lp, &pixels[..9], 3, 3, &[1]).unwrap();
        let mut bad = std::fs::read(&lp).unwrap();
        bad[3] = 0x03;
        let bad_path = dir.path().join("bad");
        std::fs::write(&bad_path, &bad).unwrap();
        assert!(matches!(load_idx(&ip, &bad_path), Err(Error::BadMagic { found: 0x803, .. })));

        let lp2 = dir.path().join("lab2");
        let ip2 = dir.path().join("img2");
        write_idx(&ip2, &lp2, &pixels, 3, 3, &[1, 2]).unwrap();
        assert!(matches!(load_idx(&ip, &lp2), Err(Error::CountMismatch { images: 1, labels: 2 })));

        let img = std::fs::read(&ip2).unwrap();
        std::fs::write(&ip2, &img[..img.len() - 1]).unwrap();
        assert!(matches!(load_idx(&ip2, &lp2), Err(Error::TruncatedFile { .. })));
    }

    #[test]
    fn csv_loader() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "x,y\n0.5,1.0\n1.5,-2.25\n").unwrap();
        let d = load_csv(&p, "y").unwrap();
        assert_eq!(d.inputs, DenseMatrix::column(&[0.5, 1.5]));
        assert_eq!(d.targets, Targets::Real(DenseMatrix::column(&[1.0, -2.25])));
        assert!(load_csv(&p, "z").is_err());
    }

    #[test]
    fn rotation_properties() {
        let shape = MapShape::new(5, 5, 1);
        let img = DenseMatrix::from_fn(2, 25, |b, i| ((b * 25 + i) % 7) as f64 / 7.0);
        assert_eq!(rotate_images(&img, shape, 0.0).unwrap(), img);
        let twice = rotate_images(&rotate_images(&img, shape, 180.0).unwrap(), shape, 180.0).unwrap();
        let mad = twice.data().iter().zip(img.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / 50.0;
        assert!(mad <= 1e-6);
        let full = rotate_images(&img, shape, 360.0).unwrap();
        assert_eq!(full, img);

        // a delta at (row 0, col 3) turns counterclockwise to (row 1, col 0)
        let mut delta = DenseMatrix::zeros(1, 25);
        delta.set(0, 3, 1.0);
        let r = rotate_images(&delta, shape, 90.0).unwrap();
        let (rr, cc) = (0usize, 3usize);
        let target = (4 - cc) * 5 + rr;
        assert!((r.get(0, target) - 1.0).abs() < 1e-9);
        assert!((r.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(rotate_images(&DenseMatrix::zeros(1, 6), MapShape::new(2, 3, 1), 10.0).is_err());
    }
}
