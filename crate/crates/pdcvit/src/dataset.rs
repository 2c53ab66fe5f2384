//! Dataset ingestion: directory-per-class scanning, deterministic stratified
//! splits, center-crop loading, and the manifest text format.
//!
//! Manifest layout (tab-separated):
//! ```text
//! seed<TAB>7
//! classes<TAB>cam00<TAB>cam01
//! <path><TAB><class index><TAB><train|test>
//! ```

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use pdcvit_core::rng::{component_seed, seeded};
use pdcvit_core::Tensor;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::imageio;

pub const DEFAULT_CROP: usize = 224;
pub const TEST_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone)]
pub struct ManifestItem {
    pub path: PathBuf,
    pub class_index: usize,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub items: Vec<ManifestItem>,
    pub seed: u64,
}

impl DatasetManifest {
    /// Scans `root/<class>/<images>`. Classes are the subdirectory names in
    /// alphabetical order; items are ordered by (class, filename). Every item
    /// starts in the train split until `split` runs.
    pub fn scan(root: &Path) -> Result<Self> {
        let mut class_dirs: Vec<PathBuf> = fs::read_dir(root)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", root.display())))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_dir())
            .collect();
        class_dirs.sort();
        if class_dirs.is_empty() {
            return Err(Error::Data(format!("no class directories under {}", root.display())));
        }
        let mut classes = Vec::new();
        let mut items = Vec::new();
        for (idx, dir) in class_dirs.iter().enumerate() {
            let name = dir
                .file_name()
                .and_then(|n| n.to_str())
                .ok_or_else(|| Error::Data(format!("unreadable class name in {}", dir.display())))?
                .to_string();
            let mut files: Vec<PathBuf> = fs::read_dir(dir)
                .map_err(|e| Error::Data(format!("cannot read {}: {e}", dir.display())))?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.is_file() && imageio::is_supported_extension(p))
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(Error::Data(format!("class '{name}' has no image files")));
            }
            for path in files {
                items.push(ManifestItem { path, class_index: idx, split: Split::Train });
            }
            classes.push(name);
        }
        Ok(DatasetManifest { classes, items, seed: 0 })
    }

    /// Stratified 80/20 split with a seeded shuffle per class. Classes with
    /// fewer than 5 items produce a warning (returned, not printed); the test
    /// split always gets at least one item per class.
    pub fn split(&mut self, seed: u64) -> Vec<String> {
        let mut rng = seeded(component_seed(seed, "split"));
        self.seed = seed;
        let mut warnings = Vec::new();
        for (idx, class) in self.classes.iter().enumerate() {
            let mut members: Vec<usize> = self
                .items
                .iter()
                .enumerate()
                .filter(|(_, it)| it.class_index == idx)
                .map(|(i, _)| i)
                .collect();
            let n = members.len();
            if n < 5 {
                warnings.push(format!(
                    "class '{class}' has only {n} items; the 80/20 split is degenerate"
                ));
            }
            members.shuffle(&mut rng);
            let test_count = ((n as f64 * TEST_FRACTION).round() as usize).clamp(1, n);
            for (rank, &item_idx) in members.iter().enumerate() {
                self.items[item_idx].split =
                    if rank < test_count { Split::Test } else { Split::Train };
            }
        }
        warnings
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn items_in(&self, split: Split) -> impl Iterator<Item = &ManifestItem> {
        self.items.iter().filter(move |it| it.split == split)
    }

    pub fn count_in(&self, split: Split) -> usize {
        self.items_in(split).count()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(&format!("seed\t{}\n", self.seed));
        out.push_str("classes");
        for c in &self.classes {
            out.push('\t');
            out.push_str(c);
        }
        out.push('\n');
        for it in &self.items {
            out.push_str(&format!("{}\t{}\t{}\n", it.path.display(), it.class_index, it.split));
        }
        let mut f = fs::File::create(path)?;
        f.write_all(out.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", path.display())))?;
        let mut lines = text.lines();
        let seed_line = lines.next().ok_or_else(|| Error::Data("empty manifest".into()))?;
        let seed = seed_line
            .strip_prefix("seed\t")
            .and_then(|s| s.parse::<u64>().ok())
            .ok_or_else(|| Error::Data(format!("bad manifest seed line: {seed_line}")))?;
        let class_line = lines.next().ok_or_else(|| Error::Data("manifest missing class line".into()))?;
        let mut fields = class_line.split('\t');
        if fields.next() != Some("classes") {
            return Err(Error::Data(format!("bad manifest class line: {class_line}")));
        }
        let classes: Vec<String> = fields.map(|s| s.to_string()).collect();
        if classes.is_empty() {
            return Err(Error::Data("manifest has no classes".into()));
        }
        let mut items = Vec::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 {
                return Err(Error::Data(format!("bad manifest row: {line}")));
            }
            let class_index: usize = parts[1]
                .parse()
                .map_err(|_| Error::Data(format!("bad class index in row: {line}")))?;
            if class_index >= classes.len() {
                return Err(Error::Data(format!("class index out of range in row: {line}")));
            }
            let split = match parts[2] {
                "train" => Split::Train,
                "test" => Split::Test,
                other => return Err(Error::Data(format!("bad split '{other}' in row: {line}"))),
            };
            items.push(ManifestItem { path: PathBuf::from(parts[0]), class_index, split });
        }
        Ok(DatasetManifest { classes, items, seed })
    }
}

/// Decodes an image and center-crops it to `crop`×`crop` with floor offsets.
/// `crop == 0` skips cropping. Undersized images are an error.
pub fn load_and_crop(path: &Path, crop: usize) -> Result<Tensor> {
    let img = imageio::load_image(path)?;
    if crop == 0 {
        return Ok(img);
    }
    let (h, w) = (img.shape()[1], img.shape()[2]);
    if h < crop || w < crop {
        return Err(Error::Image {
            path: path.to_path_buf(),
            detail: format!("{h}x{w} smaller than crop {crop}"),
        });
    }
    if h == crop && w == crop {
        return Ok(img);
    }
    let (y0, x0) = ((h - crop) / 2, (w - crop) / 2);
    let mut data = vec![0.0f64; 3 * crop * crop];
    for c in 0..3 {
        for y in 0..crop {
            for x in 0..crop {
                data[(c * crop + y) * crop + x] = img.data()[(c * h + y0 + y) * w + x0 + x];
            }
        }
    }
    Ok(Tensor::from_vec(&[3, crop, crop], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageio::save_image;

    fn flat_image(h: usize, w: usize, v: f64) -> Tensor {
        Tensor::full(&[3, h, w], v)
    }

    fn build_tree(root: &Path, spec: &[(&str, usize)]) {
        for (class, count) in spec {
            let dir = root.join(class);
            fs::create_dir_all(&dir).unwrap();
            for i in 0..*count {
                save_image(&dir.join(format!("img_{i:03}.png")), &flat_image(6, 6, 0.5)).unwrap();
            }
        }
    }

    #[test]
    fn scan_three_classes_thirty_items() {
        let dir = tempfile::tempdir().unwrap();
        build_tree(dir.path(), &[("b_cam", 10), ("a_cam", 10), ("c_cam", 10)]);
        let m = DatasetManifest::scan(dir.path()).unwrap();
        assert_eq!(m.classes, vec!["a_cam", "b_cam", "c_cam"]);
        assert_eq!(m.items.len(), 30);
        // Deterministic: scanning twice gives the identical manifest.
        let m2 = DatasetManifest::scan(dir.path()).unwrap();
        let rows: Vec<_> = m.items.iter().map(|i| (i.path.clone(), i.class_index)).collect();
        let rows2: Vec<_> = m2.items.iter().map(|i| (i.path.clone(), i.class_index)).collect();
        assert_eq!(rows, rows2);
    }

    #[test]
    fn empty_class_directory_is_an_error_naming_the_class() {
        let dir = tempfile::tempdir().unwrap();
        build_tree(dir.path(), &[("cam0", 3)]);
        fs::create_dir_all(dir.path().join("empty_cam")).unwrap();
        let err = DatasetManifest::scan(dir.path()).unwrap_err();
        assert!(err.to_string().contains("empty_cam"), "{err}");
    }

    #[test]
    fn split_is_stratified_and_seed_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        build_tree(dir.path(), &[("cam0", 10), ("cam1", 15)]);
        let mut m = DatasetManifest::scan(dir.path()).unwrap();
        let warnings = m.split(7);
        assert!(warnings.is_empty());
        let count = |m: &DatasetManifest, class: usize, split: Split| {
            m.items
                .iter()
                .filter(|i| i.class_index == class && i.split == split)
                .count()
        };
        assert_eq!(count(&m, 0, Split::Test), 2);
        assert_eq!(count(&m, 0, Split::Train), 8);
        assert_eq!(count(&m, 1, Split::Test), 3);
        assert_eq!(count(&m, 1, Split::Train), 12);

        // Same seed, same assignment.
        let mut m2 = DatasetManifest::scan(dir.path()).unwrap();
        m2.split(7);
        let splits: Vec<_> = m.items.iter().map(|i| i.split).collect();
        let splits2: Vec<_> = m2.items.iter().map(|i| i.split).collect();
        assert_eq!(splits, splits2);

        // Different seed: same per-class counts, different permutation.
        let mut m3 = DatasetManifest::scan(dir.path()).unwrap();
        m3.split(8);
        assert_eq!(count(&m3, 0, Split::Test), 2);
        let splits3: Vec<_> = m3.items.iter().map(|i| i.split).collect();
        assert_ne!(splits, splits3);
    }

    #[test]
    fn tiny_class_warns_but_keeps_one_test_item() {
        let dir = tempfile::tempdir().unwrap();
        build_tree(dir.path(), &[("cam0", 3)]);
        let mut m = DatasetManifest::scan(dir.path()).unwrap();
        let warnings = m.split(7);
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("cam0"));
        assert_eq!(m.count_in(Split::Test), 1);
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        build_tree(dir.path(), &[("cam0", 6), ("cam1", 5)]);
        let mut m = DatasetManifest::scan(dir.path()).unwrap();
        m.split(42);
        let path = dir.path().join("manifest.tsv");
        m.save(&path).unwrap();
        let back = DatasetManifest::load(&path).unwrap();
        assert_eq!(back.seed, 42);
        assert_eq!(back.classes, m.classes);
        assert_eq!(back.items.len(), m.items.len());
        for (a, b) in m.items.iter().zip(&back.items) {
            assert_eq!(a.path, b.path);
            assert_eq!(a.class_index, b.class_index);
            assert_eq!(a.split, b.split);
        }
    }

    #[test]
    fn center_crop_uses_floor_offsets() {
        // A 300×400 image center-cropped to 224 starts at (38, 88).
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.png");
        let (h, w) = (300usize, 400usize);
        let mut data = vec![0.0f64; 3 * h * w];
        for (i, v) in data.iter_mut().enumerate() {
            *v = ((i * 31) % 256) as f64 / 255.0;
        }
        let img = Tensor::from_vec(&[3, h, w], data).unwrap();
        save_image(&path, &img).unwrap();
        let cropped = load_and_crop(&path, 224).unwrap();
        assert_eq!(cropped.shape(), &[3, 224, 224]);
        let (y0, x0) = ((300 - 224) / 2, (400 - 224) / 2);
        assert_eq!((y0, x0), (38, 88));
        for c in 0..3 {
            for y in [0usize, 100, 223] {
                for x in [0usize, 150, 223] {
                    assert_eq!(
                        cropped.data()[(c * 224 + y) * 224 + x],
                        img.data()[(c * h + y0 + y) * w + x0 + x],
                    );
                }
            }
        }
    }

    #[test]
    fn exact_size_crop_is_identity_and_small_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exact.png");
        save_image(&path, &flat_image(32, 32, 0.25)).unwrap();
        // Crop at the exact stored size is the identity on decoded pixels.
        let uncropped = crate::imageio::load_image(&path).unwrap();
        let loaded = load_and_crop(&path, 32).unwrap();
        assert_eq!(loaded.data(), uncropped.data());

        let small = dir.path().join("small.png");
        save_image(&small, &flat_image(10, 10, 0.5)).unwrap();
        let err = load_and_crop(&small, 32).unwrap_err();
        assert!(err.to_string().contains("small.png"));
    }
}
