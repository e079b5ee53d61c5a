use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};

use super::format::{read_image, read_mask, Mask};
use super::stats::BandStats;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidArgument(format!("unknown split {s:?}"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchEntry {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
}

/// One multispectral patch and its label raster.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    pub id: String,
    /// `bands × H × W`.
    pub image: Tensor<f32>,
    pub mask: Mask,
}

impl PatchSample {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, mask: Mask, num_classes: usize) -> Result<Self> {
        let [_, h, w] = *image.shape() else {
            return Err(Error::shape("patch", format!("image must be bands×H×W, got {:?}", image.shape())));
        };
        if (h, w) != (mask.height, mask.width) {
            return Err(Error::ExtentMismatch {
                image: (h, w),
                mask: (mask.height, mask.width),
            });
        }
        mask.validate(num_classes)?;
        Ok(PatchSample {
            id: id.into(),
            image,
            mask,
        })
    }

    pub fn bands(&self) -> usize {
        self.image.shape()[0]
    }
}

/// Reads an `MSP1` image and `MSK1` mask pair and validates them together.
pub fn read_patch(image: impl AsRef<Path>, mask: impl AsRef<Path>, num_classes: usize) -> Result<PatchSample> {
    let id = image
        .as_ref()
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let img = read_image(image.as_ref())?;
    let m = read_mask(mask.as_ref())?;
    PatchSample::new(id, img, m, num_classes)
}

/// Dataset description. Relative patch paths resolve against the directory
/// the manifest was loaded from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub classes: Vec<String>,
    pub band_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats: Option<BandStats>,
    pub patches: Vec<PatchEntry>,
    #[serde(skip)]
    root: PathBuf,
}

impl Manifest {
    pub fn new(classes: Vec<String>, band_count: usize, patches: Vec<PatchEntry>) -> Result<Self> {
        let m = Manifest {
            classes,
            band_count,
            stats: None,
            patches,
            root: PathBuf::new(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.classes.len() > u8::MAX as usize {
            return Err(Error::Config(format!(
                "manifest needs 1..=255 classes, has {}",
                self.classes.len()
            )));
        }
        if self.band_count == 0 {
            return Err(Error::Config("manifest band_count must be positive".into()));
        }
        let mut paths = HashSet::new();
        let mut ids = HashSet::new();
        for p in &self.patches {
            if !ids.insert(&p.id) {
                return Err(Error::Config(format!("duplicate patch id {:?}", p.id)));
            }
            for path in [&p.image, &p.mask] {
                if !paths.insert(path) {
                    return Err(Error::Config(format!("duplicate patch path {}", path.display())));
                }
            }
        }
        if let Some(stats) = &self.stats {
            if stats.mean.len() != self.band_count || stats.std.len() != self.band_count {
                return Err(Error::Config(format!(
                    "stats cover {}/{} bands, manifest has {}",
                    stats.mean.len(),
                    stats.std.len(),
                    self.band_count
                )));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest = serde_json::from_str(&text)?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn set_root(&mut self, root: impl Into<PathBuf>) {
        self.root = root.into();
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Entries of `split` in manifest order.
    pub fn entries(&self, split: Split) -> impl Iterator<Item = &PatchEntry> {
        self.patches.iter().filter(move |p| p.split == split)
    }

    pub fn read_entry(&self, entry: &PatchEntry) -> Result<PatchSample> {
        let mut s = read_patch(self.resolve(&entry.image), self.resolve(&entry.mask), self.num_classes())?;
        if s.bands() != self.band_count {
            return Err(Error::shape(
                "patch",
                format!("{} has {} bands, manifest declares {}", entry.id, s.bands(), self.band_count),
            ));
        }
        s.id = entry.id.clone();
        Ok(s)
    }

    /// Reads every patch of `split` in manifest order.
    pub fn load_split(&self, split: Split) -> Result<Vec<PatchSample>> {
        let samples = self.iter_split(split, 0).collect::<Result<Vec<_>>>()?;
        if samples.is_empty() {
            return Err(Error::Empty(format!("{split} split")));
        }
        Ok(samples)
    }

    /// Streams the patches of `split` in manifest order. With `prefetch > 0`
    /// a background reader stays up to `prefetch` patches ahead.
    pub fn iter_split(&self, split: Split, prefetch: usize) -> Box<dyn Iterator<Item = Result<PatchSample>> + '_> {
        if prefetch == 0 {
            return Box::new(self.entries(split).map(|e| self.read_entry(e)));
        }
        let jobs: Vec<PatchEntry> = self.entries(split).cloned().collect();
        let manifest = self.clone();
        let (tx, rx) = mpsc::sync_channel(prefetch);
        std::thread::spawn(move || {
            for e in &jobs {
                if tx.send(manifest.read_entry(e)).is_err() {
                    break;
                }
            }
        });
        Box::new(rx.into_iter())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::format::{write_image, write_mask};

    fn entry(id: &str, split: Split) -> PatchEntry {
        PatchEntry {
            id: id.into(),
            image: format!("{id}.msp").into(),
            mask: format!("{id}.msk").into(),
            split,
        }
    }

    #[test]
    fn duplicate_paths_are_rejected() {
        let mut b = entry("b", Split::Val);
        b.image = "a.msp".into();
        let err = Manifest::new(vec!["x".into()], 1, vec![entry("a", Split::Train), b]);
        assert!(err.is_err());
    }

    #[test]
    fn split_strings() {
        assert_eq!("val".parse::<Split>().unwrap(), Split::Val);
        assert!("dev".parse::<Split>().is_err());
        assert_eq!(serde_json::to_string(&Split::Test).unwrap(), "\"test\"");
    }

    #[test]
    fn prefetch_preserves_manifest_order() {
        let dir = tempfile::tempdir().unwrap();
        let ids = ["p3", "p1", "p4", "p0", "p2"];
        for (i, id) in ids.iter().enumerate() {
            write_image(dir.path().join(format!("{id}.msp")), &Tensor::full(&[1, 2, 2], i as f32)).unwrap();
            write_mask(dir.path().join(format!("{id}.msk")), &Mask::new(2, 2, vec![1; 4]).unwrap()).unwrap();
        }
        let mut m = Manifest::new(vec!["c".into()], 1, ids.iter().map(|id| entry(id, Split::Train)).collect()).unwrap();
        m.set_root(dir.path());
        for depth in [0, 1, 3] {
            let got: Vec<String> = m.iter_split(Split::Train, depth).map(|s| s.unwrap().id).collect();
            assert_eq!(got, ids);
        }
        assert!(matches!(m.load_split(Split::Test), Err(Error::Empty(_))));
    }

    #[test]
    fn mismatched_extents_are_rejected() {
        let mask = Mask::new(2, 3, vec![0; 6]).unwrap();
        let err = PatchSample::new("x", Tensor::zeros(&[1, 3, 2]), mask, 2).unwrap_err();
        assert!(matches!(err, Error::ExtentMismatch { .. }));
    }
}
