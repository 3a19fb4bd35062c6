//! Datasets: rotated Gaussian blobs, MNIST IDX ingestion with image
//! rotation, the 80/20 split, and the paired source/target minibatch stream.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::gradients::Tensor;
use crate::scalar::Scalar;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const MNIST_SIDE: usize = 28;

/// Environment variable naming the dataset cache directory.
pub const DATA_DIR_ENV: &str = "KLDA_DATA_DIR";

/// `$KLDA_DATA_DIR`, or `data/mnist` relative to the working directory.
pub fn cache_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data/mnist"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub domain: String,
    pub angle_deg: f64,
    pub seed: u64,
}

/// `N x d_x` inputs with optional labels in `[0, classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    inputs: Tensor<T>,
    labels: Option<Vec<usize>>,
    classes: usize,
    pub meta: DatasetMeta,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(inputs: Tensor<T>, labels: Option<Vec<usize>>, classes: usize, meta: DatasetMeta) -> Result<Self> {
        ensure!(inputs.is_finite(), "dataset inputs must be finite");
        if let Some(l) = &labels {
            ensure!(l.len() == inputs.rows(), "{} labels for {} inputs", l.len(), inputs.rows());
            ensure!(l.iter().all(|&y| y < classes), "label out of range for {classes} classes");
        }
        Ok(Self { inputs, labels, classes, meta })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn inputs(&self) -> &Tensor<T> {
        &self.inputs
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.is_some()
    }

    /// Copy with labels removed.
    pub fn unlabeled(&self) -> Self {
        Self { inputs: self.inputs.clone(), labels: None, classes: self.classes, meta: self.meta.clone() }
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select_rows(idx),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            classes: self.classes,
            meta: self.meta.clone(),
        }
    }

    /// Writes `x0..x{d-1},label`; the label column is empty when unlabeled.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let header: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).chain(["label".to_string()]).collect();
        writeln!(w, "{}", header.join(","))?;
        for r in 0..self.len() {
            for v in self.inputs.row_slice(r) {
                write!(w, "{},", v.as_f64())?;
            }
            match &self.labels {
                Some(l) => writeln!(w, "{}", l[r])?,
                None => writeln!(w)?,
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Inverse of [`Dataset::write_csv`]. Values round-trip exactly for `f64`.
    pub fn read_csv(path: &Path, classes: usize, meta: DatasetMeta) -> Result<Self> {
        let fmt_err = |message: String| Error::Format { path: path.display().to_string(), message };
        let reader = BufReader::new(File::open(path)?);
        let mut lines = reader.lines();
        let header = lines.next().ok_or_else(|| fmt_err("empty file".into()))??;
        let cols: Vec<&str> = header.split(',').collect();
        ensure!(cols.last() == Some(&"label"), "CSV header must end with `label`");
        let d = cols.len() - 1;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut any_label = false;
        let mut rows = 0;
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != d + 1 {
                return Err(fmt_err(format!("row {} has {} fields, expected {}", rows + 1, fields.len(), d + 1)));
            }
            for f in &fields[..d] {
                let v: f64 = f.parse().map_err(|_| fmt_err(format!("bad number `{f}`")))?;
                data.push(T::lit(v));
            }
            let last = fields[d].trim();
            if last.is_empty() {
                labels.push(None);
            } else {
                any_label = true;
                labels.push(Some(last.parse::<usize>().map_err(|_| fmt_err(format!("bad label `{last}`")))?));
            }
            rows += 1;
        }
        let labels = if any_label {
            Some(labels.into_iter().collect::<Option<Vec<_>>>().ok_or_else(|| fmt_err("partially labeled CSV".into()))?)
        } else {
            None
        };
        Self::new(Tensor::from_vec(rows, d, data), labels, classes, meta)
    }
}

/// Labeled source domain and a target domain whose labels are reserved for
/// evaluation.
#[derive(Clone, Debug)]
pub struct DomainPair<T> {
    source: Dataset<T>,
    target: Dataset<T>,
}

/// The four disjoint sets of the 80/20 protocol. `target_train` carries no
/// labels.
#[derive(Clone, Debug)]
pub struct DomainSplit<T> {
    pub source_train: Dataset<T>,
    pub source_val: Dataset<T>,
    pub target_train: Dataset<T>,
    pub target_test: Dataset<T>,
}

impl<T: Scalar> DomainPair<T> {
    pub fn new(source: Dataset<T>, target: Dataset<T>) -> Result<Self> {
        ensure!(source.is_labeled(), "source domain must be labeled");
        ensure!(source.dim() == target.dim(), "domains differ in input dimension");
        ensure!(source.classes() == target.classes(), "domains differ in class count");
        Ok(Self { source, target })
    }

    pub fn source(&self) -> &Dataset<T> {
        &self.source
    }

    /// Target inputs without labels.
    pub fn target_unlabeled(&self) -> Dataset<T> {
        self.target.unlabeled()
    }

    /// Splits both domains 80/20. Target labels survive only in `target_test`.
    pub fn split(&self, seed: u64) -> Result<DomainSplit<T>> {
        let (source_train, source_val) = split_80_20(&self.source, seed)?;
        let (target_train, target_test) = split_80_20(&self.target, seed.wrapping_add(1))?;
        Ok(DomainSplit { source_train, source_val, target_train: target_train.unlabeled(), target_test })
    }
}

fn rotate_points<T: Scalar>(points: &Tensor<T>, angle_deg: f64) -> Tensor<T> {
    let (s, c) = angle_deg.to_radians().sin_cos();
    let (s, c) = (T::lit(s), T::lit(c));
    let mut out = points.clone();
    for r in 0..out.rows() {
        let row = out.row_slice_mut(r);
        let (x, y) = (row[0], row[1]);
        row[0] = c * x - s * y;
        row[1] = s * x + c * y;
    }
    out
}

/// Rotates the 2-D inputs of a dataset counter-clockwise.
pub fn rotate_dataset<T: Scalar>(d: &Dataset<T>, angle_deg: f64) -> Result<Dataset<T>> {
    ensure!(d.dim() == 2, "point rotation needs 2-D inputs");
    let mut out = d.clone();
    out.inputs = rotate_points(&d.inputs, angle_deg);
    out.meta.angle_deg = d.meta.angle_deg + angle_deg;
    Ok(out)
}

/// `classes` isotropic clusters centred at `radius * (cos 2pi k/C, sin 2pi k/C)`,
/// then rotated counter-clockwise by `angle_deg`. Rows are class-major.
pub fn make_rotated_blobs<T: Scalar>(
    n_per_class: usize,
    classes: usize,
    radius: f64,
    spread: f64,
    angle_deg: f64,
    seed: u64,
) -> Result<Dataset<T>> {
    ensure!(classes >= 2, "need at least two classes");
    ensure!(n_per_class >= 1, "need at least one point per class");
    ensure!(spread > 0.0 && spread.is_finite(), "spread must be positive");
    ensure!(radius.is_finite() && angle_deg.is_finite(), "radius and angle must be finite");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n_per_class * classes * 2);
    let mut labels = Vec::with_capacity(n_per_class * classes);
    for k in 0..classes {
        let theta = 2.0 * std::f64::consts::PI * k as f64 / classes as f64;
        let (cx, cy) = (radius * theta.cos(), radius * theta.sin());
        for _ in 0..n_per_class {
            let nx: f64 = rng.sample(StandardNormal);
            let ny: f64 = rng.sample(StandardNormal);
            data.push(T::lit(cx + spread * nx));
            data.push(T::lit(cy + spread * ny));
            labels.push(k);
        }
    }
    let base = Tensor::from_vec(n_per_class * classes, 2, data);
    let meta = DatasetMeta { domain: format!("blobs-{angle_deg}"), angle_deg, seed };
    Dataset::new(rotate_points(&base, angle_deg), Some(labels), classes, meta)
}

fn open_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

/// Raw IDX image file: `(count, rows, cols, pixels)`.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = open_maybe_gz(path)?;
    let err = |message: String| Error::Format { path: path.display().to_string(), message };
    if bytes.len() < 4 {
        return Err(err(format!("truncated header: {} bytes", bytes.len())));
    }
    let magic = be_u32(&bytes, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(err(format!("wrong magic number: expected {IDX_IMAGES_MAGIC} (0x{IDX_IMAGES_MAGIC:08x}), found {magic} (0x{magic:08x})")));
    }
    if bytes.len() < 16 {
        return Err(err(format!("truncated header: {} bytes, expected at least 16", bytes.len())));
    }
    let (n, rows, cols) = (be_u32(&bytes, 4) as usize, be_u32(&bytes, 8) as usize, be_u32(&bytes, 12) as usize);
    let want = 16 + n * rows * cols;
    if bytes.len() < want {
        return Err(err(format!("truncated file: {} bytes, header implies {want}", bytes.len())));
    }
    Ok((n, rows, cols, bytes[16..want].to_vec()))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = open_maybe_gz(path)?;
    let err = |message: String| Error::Format { path: path.display().to_string(), message };
    if bytes.len() < 4 {
        return Err(err(format!("truncated header: {} bytes", bytes.len())));
    }
    let magic = be_u32(&bytes, 0);
    if magic != IDX_LABELS_MAGIC {
        return Err(err(format!("wrong magic number: expected {IDX_LABELS_MAGIC} (0x{IDX_LABELS_MAGIC:08x}), found {magic} (0x{magic:08x})")));
    }
    if bytes.len() < 8 {
        return Err(err(format!("truncated header: {} bytes, expected at least 8", bytes.len())));
    }
    let n = be_u32(&bytes, 4) as usize;
    if bytes.len() < 8 + n {
        return Err(err(format!("truncated file: {} bytes, header implies {}", bytes.len(), 8 + n)));
    }
    Ok(bytes[8..8 + n].to_vec())
}

/// Loads an IDX image/label pair (optionally gzipped) as flattened pixel
/// vectors scaled to `[0, 1]`.
pub fn load_idx<T: Scalar>(images_path: &Path, labels_path: &Path) -> Result<Dataset<T>> {
    let (n, rows, cols, pixels) = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    ensure!(labels.len() == n, "{} labels for {n} images", labels.len());
    let classes = 10;
    ensure!(labels.iter().all(|&y| (y as usize) < classes), "label outside 0..10");
    let data = pixels.iter().map(|&p| T::lit(f64::from(p) / 255.0)).collect();
    let meta = DatasetMeta { domain: "mnist".into(), angle_deg: 0.0, seed: 0 };
    Dataset::new(
        Tensor::from_vec(n, rows * cols, data),
        Some(labels.into_iter().map(usize::from).collect()),
        classes,
        meta,
    )
}

/// Serializes images and labels to the IDX format (uncompressed).
pub fn write_idx(images_path: &Path, labels_path: &Path, side: usize, pixels: &[u8], labels: &[u8]) -> Result<()> {
    ensure!(pixels.len() == labels.len() * side * side, "pixel buffer does not match label count");
    let mut img = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, labels.len() as u32, side as u32, side as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(pixels);
    std::fs::write(images_path, img)?;
    let mut lab = Vec::with_capacity(8 + labels.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    std::fs::write(labels_path, lab)?;
    Ok(())
}

/// Counter-clockwise rotation of a square `side x side` row-major image about
/// its centre, bilinear interpolation, zero outside the frame.
pub fn rotate_image<T: Scalar>(img: &[T], side: usize, degrees: f64) -> Vec<T> {
    assert_eq!(img.len(), side * side, "image is not {side}x{side}");
    let (s, c) = degrees.to_radians().sin_cos();
    let centre = (side as f64 - 1.0) / 2.0;
    let at = |r: isize, col: isize| -> f64 {
        if r < 0 || col < 0 || r >= side as isize || col >= side as isize {
            0.0
        } else {
            img[r as usize * side + col as usize].as_f64()
        }
    };
    let mut out = vec![T::zero(); side * side];
    for row in 0..side {
        for col in 0..side {
            // Output offset in y-up coordinates, mapped back by the inverse rotation.
            let u = col as f64 - centre;
            let v = centre - row as f64;
            let su = c * u + s * v;
            let sv = -s * u + c * v;
            let x = centre + su;
            let y = centre - sv;
            let (x0, y0) = (x.floor(), y.floor());
            let (fx, fy) = (x - x0, y - y0);
            let (xi, yi) = (x0 as isize, y0 as isize);
            let val = (1.0 - fy) * ((1.0 - fx) * at(yi, xi) + fx * at(yi, xi + 1))
                + fy * ((1.0 - fx) * at(yi + 1, xi) + fx * at(yi + 1, xi + 1));
            out[row * side + col] = T::lit(val.clamp(0.0, 1.0));
        }
    }
    out
}

/// Disjoint rotated domains from one image pool: a seeded shuffle, then
/// consecutive chunks of `per_domain` images, chunk `i` rotated by
/// `angles[i]`.
pub fn rotated_mnist_domains<T: Scalar>(pool: &Dataset<T>, angles: &[f64], per_domain: usize, seed: u64) -> Result<Vec<Dataset<T>>> {
    ensure!(pool.dim() == MNIST_SIDE * MNIST_SIDE, "pool must hold 28x28 images");
    ensure!(
        angles.len() * per_domain <= pool.len(),
        "{} domains of {per_domain} need {} images, pool has {}",
        angles.len(),
        angles.len() * per_domain,
        pool.len()
    );
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = Vec::with_capacity(angles.len());
    for (i, &angle) in angles.iter().enumerate() {
        let chunk = &idx[i * per_domain..(i + 1) * per_domain];
        let mut d = pool.subset(chunk);
        let mut data = Vec::with_capacity(per_domain * pool.dim());
        for r in 0..d.len() {
            data.extend(rotate_image(d.inputs.row_slice(r), MNIST_SIDE, angle));
        }
        d.inputs = Tensor::from_vec(per_domain, pool.dim(), data);
        d.meta = DatasetMeta { domain: format!("M{angle}"), angle_deg: angle, seed };
        out.push(d);
    }
    Ok(out)
}

/// Seeded shuffle, then split at `floor(0.8 N)`.
pub fn split_80_20<T: Scalar>(d: &Dataset<T>, seed: u64) -> Result<(Dataset<T>, Dataset<T>)> {
    ensure!(d.len() >= 5, "80/20 split needs at least 5 items, got {}", d.len());
    let mut idx: Vec<usize> = (0..d.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = d.len() * 4 / 5;
    Ok((d.subset(&idx[..cut]), d.subset(&idx[cut..])))
}

/// Row indices of one paired minibatch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchIndices {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

/// One epoch of paired minibatches: `floor(n_source / B)` source batches
/// from a fresh permutation (ragged tail dropped), each paired with `B`
/// target indices drawn from successive independent target permutations.
pub fn minibatch_stream(n_source: usize, n_target: usize, batch: usize, epoch_seed: u64) -> Result<Vec<BatchIndices>> {
    ensure!(batch >= 1, "batch size must be positive");
    ensure!(
        batch <= n_source && batch <= n_target,
        "batch size {batch} exceeds training set sizes ({n_source} source, {n_target} target)"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    let mut src: Vec<usize> = (0..n_source).collect();
    src.shuffle(&mut rng);
    let mut tgt_perm: Vec<usize> = (0..n_target).collect();
    tgt_perm.shuffle(&mut rng);
    let mut cursor = 0;
    let mut out = Vec::with_capacity(n_source / batch);
    for chunk in src.chunks_exact(batch) {
        let mut target = Vec::with_capacity(batch);
        while target.len() < batch {
            if cursor == n_target {
                tgt_perm.shuffle(&mut rng);
                cursor = 0;
            }
            target.push(tgt_perm[cursor]);
            cursor += 1;
        }
        out.push(BatchIndices { source: chunk.to_vec(), target });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_turn_reproduces_unrotated_blobs() {
        let a = make_rotated_blobs::<f64>(20, 3, 2.0, 0.3, 0.0, 4).unwrap();
        let b = make_rotated_blobs::<f64>(20, 3, 2.0, 0.3, 360.0, 4).unwrap();
        for (x, y) in a.inputs().data().iter().zip(b.inputs().data()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(a.labels(), b.labels());
    }

    #[test]
    fn class_means_sit_on_the_circle() {
        let (n, c, r, s) = (2000, 4, 3.0, 0.5);
        let d = make_rotated_blobs::<f64>(n, c, r, s, 0.0, 8).unwrap();
        for k in 0..c {
            let rows: Vec<usize> = (0..d.len()).filter(|&i| d.labels().unwrap()[i] == k).collect();
            let mx = rows.iter().map(|&i| d.inputs().get(i, 0)).sum::<f64>() / n as f64;
            let my = rows.iter().map(|&i| d.inputs().get(i, 1)).sum::<f64>() / n as f64;
            let th = 2.0 * std::f64::consts::PI * k as f64 / c as f64;
            let tol = 3.0 * s / (n as f64).sqrt();
            assert!((mx - r * th.cos()).abs() < tol && (my - r * th.sin()).abs() < tol);
        }
    }

    #[test]
    fn rotating_generated_points_matches_generation_at_angle() {
        let base = make_rotated_blobs::<f64>(15, 3, 2.0, 0.4, 0.0, 21).unwrap();
        let gen = make_rotated_blobs::<f64>(15, 3, 2.0, 0.4, 45.0, 21).unwrap();
        let rot = rotate_dataset(&base, 45.0).unwrap();
        assert_eq!(rot.inputs(), gen.inputs());
    }

    #[test]
    fn blob_parameter_validation() {
        assert!(make_rotated_blobs::<f64>(10, 1, 1.0, 0.1, 0.0, 0).is_err());
        assert!(make_rotated_blobs::<f64>(0, 3, 1.0, 0.1, 0.0, 0).is_err());
        assert!(make_rotated_blobs::<f64>(10, 3, 1.0, 0.0, 0.0, 0).is_err());
    }

    fn asym_image(side: usize) -> Vec<f64> {
        (0..side * side).map(|k| ((k * 37 + k / side * 11) % 97) as f64 / 96.0).collect()
    }

    #[test]
    fn zero_rotation_is_identity() {
        let img = asym_image(28);
        let out = rotate_image(&img, 28, 0.0);
        for (a, b) in img.iter().zip(&out) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn quarter_turn_is_an_index_permutation() {
        let side = 28;
        let img = asym_image(side);
        let out = rotate_image(&img, side, 90.0);
        // Counter-clockwise quarter turn: the top row becomes the left column,
        // read bottom to top.
        for r in 0..side {
            for c in 0..side {
                let want = img[c * side + (side - 1 - r)];
                assert!((out[r * side + c] - want).abs() < 1e-9, "({r},{c})");
            }
        }
    }

    #[test]
    fn small_rotation_round_trip_is_close_in_interior() {
        let side = 28;
        // smooth blob so bilinear resampling is accurate
        let img: Vec<f64> = (0..side * side)
            .map(|k| {
                let (r, c) = ((k / side) as f64 - 13.5, (k % side) as f64 - 11.0);
                (-(r * r / 40.0 + c * c / 18.0)).exp()
            })
            .collect();
        let back = rotate_image(&rotate_image(&img, side, 15.0), side, -15.0);
        let mut dev = 0.0;
        for r in 4..24 {
            for c in 4..24 {
                dev += (back[r * side + c] - img[r * side + c]).abs();
            }
        }
        assert!(dev / 400.0 < 0.02, "mean abs deviation {}", dev / 400.0);
    }

    #[test]
    fn split_sizes_and_partition() {
        let d = make_rotated_blobs::<f64>(5, 2, 1.0, 0.1, 0.0, 3).unwrap();
        let (tr, te) = split_80_20(&d, 9).unwrap();
        assert_eq!((tr.len(), te.len()), (8, 2));
        let mut all: Vec<usize> = tr.labels().unwrap().iter().chain(te.labels().unwrap()).copied().collect();
        all.sort_unstable();
        let mut orig = d.labels().unwrap().to_vec();
        orig.sort_unstable();
        assert_eq!(all, orig);
        let (tr2, _) = split_80_20(&d, 9).unwrap();
        assert_eq!(tr.inputs(), tr2.inputs());
        let (tr3, _) = split_80_20(&d, 10).unwrap();
        assert_ne!(tr.inputs(), tr3.inputs());
        let tiny = d.subset(&[0, 1, 2, 3]);
        assert!(split_80_20(&tiny, 0).is_err());
    }

    #[test]
    fn stream_shape_and_determinism() {
        let s = minibatch_stream(512, 300, 256, 1).unwrap();
        assert_eq!(s.len(), 2);
        assert!(s.iter().all(|b| b.source.len() == 256 && b.target.len() == 256));
        let mut seen: Vec<usize> = s.iter().flat_map(|b| b.source.iter().copied()).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 512);
        assert_eq!(s, minibatch_stream(512, 300, 256, 1).unwrap());
        assert_ne!(s, minibatch_stream(512, 300, 256, 2).unwrap());
        assert!(minibatch_stream(100, 300, 256, 1).is_err());
    }

    #[test]
    fn idx_fixture_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        let pixels: Vec<u8> = (0..28 * 28).map(|k| (k % 256) as u8).collect();
        write_idx(&ip, &lp, 28, &pixels, &[7]).unwrap();
        let raw = std::fs::read(&ip).unwrap();
        assert_eq!(&raw[..4], &[0, 0, 8, 3]);
        assert_eq!(&std::fs::read(&lp).unwrap()[..4], &[0, 0, 8, 1]);
        let d = load_idx::<f64>(&ip, &lp).unwrap();
        assert_eq!((d.len(), d.dim()), (1, 784));
        assert_eq!(d.labels().unwrap(), &[7]);
        for (k, &v) in d.inputs().data().iter().enumerate() {
            assert_eq!(v, (k % 256) as f64 / 255.0);
        }
    }

    #[test]
    fn idx_rejects_wrong_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        write_idx(&ip, &lp, 28, &[0u8; 784 * 2], &[1, 2]).unwrap();
        // labels file passed as images: magic mismatch
        match load_idx::<f64>(&lp, &lp) {
            Err(Error::Format { message, .. }) => assert!(message.contains("2051") && message.contains("2049"), "{message}"),
            other => panic!("{other:?}"),
        }
        let raw = std::fs::read(&ip).unwrap();
        std::fs::write(&ip, &raw[..raw.len() - 10]).unwrap();
        match load_idx::<f64>(&ip, &lp) {
            Err(Error::Format { message, .. }) => assert!(message.contains("truncated"), "{message}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let d = make_rotated_blobs::<f64>(4, 3, 2.0, 0.7, 30.0, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        d.write_csv(&p).unwrap();
        let back = Dataset::<f64>::read_csv(&p, 3, d.meta.clone()).unwrap();
        assert_eq!(back, d);
        let header = std::fs::read_to_string(&p).unwrap();
        assert!(header.starts_with("x0,x1,label\n"));
    }
}
