//! Dataset ingestion: IDX files, image directories with CSV labels, and
//! a built-in synthetic sign-glyph set for self-contained runs.
//!
//! Images are `(H, W, C)` tensors in [0, 1]; the 0-255 integer domain
//! exists only at these IO boundaries.

use std::fs;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Labeled images plus the class count.
#[derive(Debug, Clone)]
pub struct LabeledSet {
    pub items: Vec<(Tensor, usize)>,
    pub n_classes: usize,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn image_shape(&self) -> Option<&[usize]> {
        self.items.first().map(|(t, _)| t.shape())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DatasetFormat {
    /// Directory with the four standard IDX files
    /// (`train-images-idx3-ubyte` etc.).
    Idx,
    /// Directory with `train.csv` and `test.csv`, each `path,label` rows
    /// referencing image files relative to the directory.
    ImageDirCsv,
    /// Procedurally generated sign glyphs; no files involved.
    BuiltinSynthetic { train: usize, test: usize, seed: u64 },
}

pub fn load_dataset(path: &Path, format: &DatasetFormat) -> Result<(LabeledSet, LabeledSet)> {
    match format {
        DatasetFormat::Idx => {
            let train = load_idx_pair(
                &path.join("train-images-idx3-ubyte"),
                &path.join("train-labels-idx1-ubyte"),
            )?;
            let test = load_idx_pair(
                &path.join("t10k-images-idx3-ubyte"),
                &path.join("t10k-labels-idx1-ubyte"),
            )?;
            Ok(unify_classes(train, test))
        }
        DatasetFormat::ImageDirCsv => {
            let train = load_image_csv(path, "train.csv")?;
            let test = load_image_csv(path, "test.csv")?;
            Ok(unify_classes(train, test))
        }
        DatasetFormat::BuiltinSynthetic { train, test, seed } => Ok((
            synthetic_signs(*train, crate::seeds::derive(*seed, 2)),
            synthetic_signs(*test, crate::seeds::derive(*seed, 3)),
        )),
    }
}

fn unify_classes(mut train: LabeledSet, mut test: LabeledSet) -> (LabeledSet, LabeledSet) {
    let n = train.n_classes.max(test.n_classes);
    train.n_classes = n;
    test.n_classes = n;
    (train, test)
}

// ---------------------------------------------------------------------
// IDX
// ---------------------------------------------------------------------

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Loads one images/labels IDX pair. Big-endian magic and dims, unsigned
/// byte payload, exactly as the standard layout prescribes.
pub fn load_idx_pair(images_path: &Path, labels_path: &Path) -> Result<LabeledSet> {
    let images = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if images.len() != labels.len() {
        return Err(Error::CountMismatch {
            path: images_path.display().to_string(),
            detail: format!("{} images vs {} labels", images.len(), labels.len()),
        });
    }
    let n_classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    Ok(LabeledSet {
        items: images
            .into_iter()
            .zip(labels)
            .map(|(img, l)| (img, l as usize))
            .collect(),
        n_classes,
    })
}

pub fn read_idx_images(path: &Path) -> Result<Vec<Tensor>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut cursor = IdxCursor::new(&bytes, path);
    let magic = cursor.u32_be()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            path: path.display().to_string(),
            detail: format!("expected {IDX_IMAGES_MAGIC:#010x}, got {magic:#010x}"),
        });
    }
    let n = cursor.u32_be()? as usize;
    let rows = cursor.u32_be()? as usize;
    let cols = cursor.u32_be()? as usize;
    let pixels = cursor.bytes(n * rows * cols)?;
    cursor.finish()?;
    Ok(pixels
        .chunks_exact(rows * cols)
        .map(|chunk| {
            Tensor::from_fn(&[rows, cols, 1], |i| chunk[i] as f64 / 255.0)
        })
        .collect())
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut cursor = IdxCursor::new(&bytes, path);
    let magic = cursor.u32_be()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            path: path.display().to_string(),
            detail: format!("expected {IDX_LABELS_MAGIC:#010x}, got {magic:#010x}"),
        });
    }
    let n = cursor.u32_be()? as usize;
    let labels = cursor.bytes(n)?.to_vec();
    cursor.finish()?;
    Ok(labels)
}

/// Writes images back out in IDX layout, quantizing to `round(255 * v)`.
/// Reading a file and writing it again reproduces it byte for byte.
pub fn write_idx_images(path: &Path, images: &[Tensor]) -> Result<()> {
    let (rows, cols) = match images.first().map(|t| t.shape()) {
        Some([r, c, 1]) => (*r, *c),
        Some(other) => {
            return Err(Error::usage(format!(
                "IDX images must be (H, W, 1), got {other:?}"
            )))
        }
        None => (0, 0),
    };
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    for img in images {
        if img.shape() != [rows, cols, 1] {
            return Err(Error::usage("IDX images must share one shape"));
        }
        out.extend(img.data().iter().map(|&v| (v * 255.0).round() as u8));
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

struct IdxCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> IdxCursor<'a> {
    fn new(bytes: &'a [u8], path: &Path) -> Self {
        IdxCursor {
            bytes,
            pos: 0,
            path: path.display().to_string(),
        }
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                path: self.path.clone(),
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32_be(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::CountMismatch {
                path: self.path.clone(),
                detail: format!("{} trailing bytes", self.bytes.len() - self.pos),
            });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------
// Image directory + CSV labels
// ---------------------------------------------------------------------

fn load_image_csv(dir: &Path, csv_name: &str) -> Result<LabeledSet> {
    let csv_path = dir.join(csv_name);
    let file = fs::File::open(&csv_path)
        .map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let mut items = Vec::new();
    let mut expected_shape: Option<Vec<usize>> = None;
    for record in reader.records() {
        let record =
            record.map_err(|e| Error::CorruptRecord(format!("{}: {e}", csv_path.display())))?;
        let rel = record
            .get(0)
            .ok_or_else(|| Error::CorruptRecord(format!("{}: missing path", csv_path.display())))?;
        let label: usize = record
            .get(1)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| {
                Error::CorruptRecord(format!("{}: bad label for {rel}", csv_path.display()))
            })?;
        let img = load_image_tensor(&dir.join(rel))?;
        if let Some(shape) = &expected_shape {
            if img.shape() != shape.as_slice() {
                return Err(Error::CountMismatch {
                    path: rel.to_string(),
                    detail: format!("image shape {:?} differs from {:?}", img.shape(), shape),
                });
            }
        } else {
            expected_shape = Some(img.shape().to_vec());
        }
        items.push((img, label));
    }
    let n_classes = items.iter().map(|(_, l)| l + 1).max().unwrap_or(0);
    Ok(LabeledSet { items, n_classes })
}

fn load_image_tensor(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::CorruptRecord(format!("{}: {e}", path.display())))?;
    Ok(match img {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            Tensor::from_fn(&[h, w, 1], |i| {
                g.get_pixel((i % w) as u32, (i / w) as u32)[0] as f64 / 255.0
            })
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            Tensor::from_fn(&[h, w, 3], |i| {
                let c = i % 3;
                let x = (i / 3) % w;
                let y = i / (3 * w);
                rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
            })
        }
    })
}

/// Uniform sample of `count` seed images (without replacement) from a
/// set. Returns the chosen indices alongside the pairs so evaluation
/// sets can exclude them later.
pub fn sample_seeds(
    set: &LabeledSet,
    count: usize,
    seed: u64,
) -> Result<(Vec<usize>, Vec<(Tensor, usize)>)> {
    if count > set.len() {
        return Err(Error::usage(format!(
            "cannot sample {count} seeds from {} images",
            set.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..set.len()).collect();
    for k in 0..count {
        let j = rng.gen_range(k..indices.len());
        indices.swap(k, j);
    }
    indices.truncate(count);
    let pairs = indices.iter().map(|&i| set.items[i].clone()).collect();
    Ok((indices, pairs))
}

// ---------------------------------------------------------------------
// Built-in synthetic sign glyphs
// ---------------------------------------------------------------------

pub const SYNTHETIC_CLASSES: usize = 10;
pub const SYNTHETIC_SIZE: usize = 28;

/// 10 classes of geometric sign glyphs on 28x28 RGB canvases with color,
/// position, scale and rotation jitter plus pixel noise. Shape alone
/// carries the class; colors are uninformative by construction.
pub fn synthetic_signs(count: usize, seed: u64) -> LabeledSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % SYNTHETIC_CLASSES;
        items.push((render_sign(class, &mut rng), class));
    }
    LabeledSet {
        items,
        n_classes: SYNTHETIC_CLASSES,
    }
}

fn render_sign(class: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let n = SYNTHETIC_SIZE;
    let glyph = [
        rng.gen_range(0.55..1.0),
        rng.gen_range(0.55..1.0),
        rng.gen_range(0.55..1.0),
    ];
    let bg = [
        rng.gen_range(0.0..0.35),
        rng.gen_range(0.0..0.35),
        rng.gen_range(0.0..0.35),
    ];
    let cx = rng.gen_range(-0.18..0.18);
    let cy = rng.gen_range(-0.18..0.18);
    let scale = rng.gen_range(0.7..1.05);
    let theta: f64 = rng.gen_range(-0.26..0.26); // about 15 degrees
    let noise_amp: f64 = rng.gen_range(0.03..0.09);
    let (sin, cos) = theta.sin_cos();

    let mut img = Tensor::zeros(&[n, n, 3]);
    for y in 0..n {
        for x in 0..n {
            // Normalized coordinates in [-1, 1], then inverse jitter.
            let u0 = (x as f64 / (n - 1) as f64) * 2.0 - 1.0 - cx;
            let v0 = (y as f64 / (n - 1) as f64) * 2.0 - 1.0 - cy;
            let u = (u0 * cos - v0 * sin) / scale;
            let v = (u0 * sin + v0 * cos) / scale;
            let inside = glyph_hit(class, u, v);
            for c in 0..3 {
                let base = if inside { glyph[c] } else { bg[c] };
                let noisy = base + rng.gen_range(-noise_amp..noise_amp);
                let idx = img.idx3(y, x, c);
                img.data_mut()[idx] = noisy.clamp(0.0, 1.0);
            }
        }
    }
    img
}

fn glyph_hit(class: usize, u: f64, v: f64) -> bool {
    let r = (u * u + v * v).sqrt();
    match class {
        0 => (r - 0.58).abs() < 0.14,                       // ring
        1 => r < 0.62,                                      // disc
        2 => {
            let m = u.abs().max(v.abs());
            (m - 0.58).abs() < 0.14                         // square outline
        }
        3 => u.abs().max(v.abs()) < 0.60,                   // filled square
        4 => (-0.62..=0.62).contains(&v) && u.abs() <= (v + 0.62) * 0.55, // triangle up
        5 => (-0.62..=0.62).contains(&v) && u.abs() <= (0.62 - v) * 0.55, // triangle down
        6 => u.abs() + v.abs() < 0.72,                      // diamond
        7 => (u.abs() < 0.18 && v.abs() < 0.72) || (v.abs() < 0.18 && u.abs() < 0.72), // plus
        8 => ((u - v).abs() < 0.22 || (u + v).abs() < 0.22) && r < 0.85, // X
        9 => v.abs() < 0.20 && u.abs() < 0.72,              // horizontal bar
        _ => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn temp_dir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("deeprobe-dataset-{tag}"));
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn hand_crafted_idx_round_trips_exactly() {
        // Two 2x2 images, built byte by byte.
        let mut file = Vec::new();
        file.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        file.extend_from_slice(&2u32.to_be_bytes());
        file.extend_from_slice(&2u32.to_be_bytes());
        file.extend_from_slice(&2u32.to_be_bytes());
        file.extend_from_slice(&[0, 64, 128, 255, 10, 20, 30, 40]);

        let dir = temp_dir("roundtrip");
        let img_path = dir.join("imgs");
        fs::write(&img_path, &file).unwrap();
        let images = read_idx_images(&img_path).unwrap();
        assert_eq!(images.len(), 2);
        assert_eq!(images[0].shape(), &[2, 2, 1]);
        assert_eq!(images[0].data()[3], 1.0);
        assert_eq!(images[1].data()[0], 10.0 / 255.0);

        let out_path = dir.join("imgs-out");
        write_idx_images(&out_path, &images).unwrap();
        assert_eq!(fs::read(&out_path).unwrap(), file);

        let mut labels = Vec::new();
        labels.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        labels.extend_from_slice(&2u32.to_be_bytes());
        labels.extend_from_slice(&[1, 0]);
        let lbl_path = dir.join("lbls");
        fs::write(&lbl_path, &labels).unwrap();
        let set = load_idx_pair(&img_path, &lbl_path).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.items[0].1, 1);

        let lbl_out = dir.join("lbls-out");
        write_idx_labels(&lbl_out, &[1, 0]).unwrap();
        assert_eq!(fs::read(&lbl_out).unwrap(), labels);
    }

    #[test]
    fn empty_file_is_truncated_error() {
        let dir = temp_dir("empty");
        let path = dir.join("nothing");
        fs::write(&path, []).unwrap();
        assert!(matches!(
            read_idx_images(&path),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn wrong_magic_is_distinct_error() {
        let dir = temp_dir("magic");
        let path = dir.join("bad");
        let mut file = Vec::new();
        file.extend_from_slice(&0xdeadbeefu32.to_be_bytes());
        file.extend_from_slice(&0u32.to_be_bytes());
        file.extend_from_slice(&0u32.to_be_bytes());
        file.extend_from_slice(&0u32.to_be_bytes());
        fs::write(&path, &file).unwrap();
        assert!(matches!(
            read_idx_images(&path),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn image_label_count_mismatch_is_distinct_error() {
        let dir = temp_dir("mismatch");
        let img_path = dir.join("imgs");
        let mut file = Vec::new();
        file.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        file.extend_from_slice(&1u32.to_be_bytes());
        file.extend_from_slice(&2u32.to_be_bytes());
        file.extend_from_slice(&2u32.to_be_bytes());
        file.extend_from_slice(&[0, 0, 0, 0]);
        fs::write(&img_path, &file).unwrap();

        let lbl_path = dir.join("lbls");
        let mut labels = Vec::new();
        labels.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        labels.extend_from_slice(&2u32.to_be_bytes());
        labels.extend_from_slice(&[0, 1]);
        fs::write(&lbl_path, &labels).unwrap();

        assert!(matches!(
            load_idx_pair(&img_path, &lbl_path),
            Err(Error::CountMismatch { .. })
        ));
    }

    #[test]
    fn synthetic_is_deterministic_per_seed() {
        let a = synthetic_signs(30, 99);
        let b = synthetic_signs(30, 99);
        let c = synthetic_signs(30, 100);
        assert_eq!(a.items.len(), 30);
        for ((ia, la), (ib, lb)) in a.items.iter().zip(&b.items) {
            assert_eq!(la, lb);
            assert_eq!(ia, ib);
        }
        assert!(a.items.iter().zip(&c.items).any(|((ia, _), (ic, _))| ia != ic));
    }

    #[test]
    fn synthetic_covers_all_classes_in_range() {
        let set = synthetic_signs(40, 5);
        assert_eq!(set.n_classes, 10);
        for class in 0..10 {
            assert!(set.items.iter().any(|(_, l)| *l == class));
        }
        for (img, _) in &set.items {
            assert_eq!(img.shape(), &[28, 28, 3]);
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
