//! Tab-separated dataset manifests.
//!
//! One record per line: `image<TAB>vein_mask<TAB>contour_mask<TAB>class_id<TAB>split`.
//! Paths are relative to the manifest's directory; `#` starts a comment.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::mask::binarize_image;
use crate::synth::netpbm::{read_image, write_image};
use crate::synth::{Sample, Split};

pub const MANIFEST_NAME: &str = "manifest.tsv";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub image: PathBuf,
    pub vein_mask: PathBuf,
    pub contour_mask: PathBuf,
    pub class_id: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn parse(text: &str, root: impl Into<PathBuf>, file: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                file: file.to_string(),
                line: i + 1,
                message,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(err(format!(
                    "expected 5 tab-separated fields, found {}",
                    fields.len()
                )));
            }
            let class_id = fields[3]
                .trim()
                .parse()
                .map_err(|_| err(format!("bad class id {:?}", fields[3])))?;
            let split = fields[4]
                .trim()
                .parse()
                .map_err(|e: Error| err(e.to_string()))?;
            records.push(ManifestRecord {
                image: fields[0].trim().into(),
                vein_mask: fields[1].trim().into(),
                contour_mask: fields[2].trim().into(),
                class_id,
                split,
            });
        }
        Ok(Self {
            root: root.into(),
            records,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest = Self::parse(&text, root, &path.display().to_string())?;
        for r in &manifest.records {
            for p in [&r.image, &r.vein_mask, &r.contour_mask] {
                let full = manifest.root.join(p);
                if !full.is_file() {
                    return Err(Error::io(
                        full,
                        std::io::Error::new(
                            std::io::ErrorKind::NotFound,
                            "listed in manifest but missing",
                        ),
                    ));
                }
            }
        }
        Ok(manifest)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# image\tvein_mask\tcontour_mask\tclass_id\tsplit\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                r.image.display(),
                r.vein_mask.display(),
                r.contour_mask.display(),
                r.class_id,
                r.split.name()
            );
        }
        out
    }

    /// Checks that every class has as many training as test records.
    pub fn check_balanced_split(&self) -> Result<()> {
        let mut counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for r in &self.records {
            let e = counts.entry(r.class_id).or_default();
            match r.split {
                Split::Train => e.0 += 1,
                Split::Test => e.1 += 1,
            }
        }
        for (class, (train, test)) in counts {
            if train != test {
                return Err(Error::Config(format!(
                    "class {class} has {train} train and {test} test records; split must be 1:1"
                )));
            }
        }
        Ok(())
    }

    pub fn class_count(&self) -> usize {
        self.records
            .iter()
            .map(|r| r.class_id + 1)
            .max()
            .unwrap_or(0)
    }

    /// Reads every referenced image; masks are binarized at 0.5.
    pub fn load_samples(&self) -> Result<Vec<Sample>> {
        self.records
            .iter()
            .map(|r| {
                let image = read_image(self.root.join(&r.image))?;
                let image = if image.channels == 3 {
                    image
                } else {
                    return Err(Error::Config(format!(
                        "{} must be an RGB (P6) image",
                        r.image.display()
                    )));
                };
                let vein = binarize_image(&read_image(self.root.join(&r.vein_mask))?, 0.5)?;
                let contour = binarize_image(&read_image(self.root.join(&r.contour_mask))?, 0.5)?;
                Ok(Sample {
                    image,
                    vein,
                    contour,
                    class_id: r.class_id,
                    split: r.split,
                })
            })
            .collect()
    }
}

/// Writes every sample as PPM/PGM files under `dir` plus a manifest, and
/// returns the manifest path.
pub fn write_dataset(samples: &[Sample], dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let images = dir.join("images");
    let masks = dir.join("masks");
    for d in [&images, &masks] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut per_class: BTreeMap<usize, usize> = BTreeMap::new();
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let idx = per_class.entry(s.class_id).or_default();
        let stem = format!("c{:03}_{:02}", s.class_id, idx);
        *idx += 1;
        let record = ManifestRecord {
            image: PathBuf::from(format!("images/{stem}.ppm")),
            vein_mask: PathBuf::from(format!("masks/{stem}_vein.pgm")),
            contour_mask: PathBuf::from(format!("masks/{stem}_contour.pgm")),
            class_id: s.class_id,
            split: s.split,
        };
        write_image(dir.join(&record.image), &s.image)?;
        write_image(dir.join(&record.vein_mask), &s.vein.to_image())?;
        write_image(dir.join(&record.contour_mask), &s.contour.to_image())?;
        records.push(record);
    }
    let manifest = DatasetManifest {
        root: dir.to_path_buf(),
        records,
    };
    let path = dir.join(MANIFEST_NAME);
    std::fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
