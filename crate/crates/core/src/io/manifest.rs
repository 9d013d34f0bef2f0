//! Dataset directories: `images/NNN.pgm`, `masks/NNN.pgm` and a
//! `manifest.csv` with columns `id,image,mask,fold` (paths relative to the
//! manifest's directory).

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::image::{Image, LabelMask, NUM_CLASSES};
use crate::synth::{Folds, Sample};

use super::raster::{load_image, load_mask, save_image_pgm, save_mask_pgm};

pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Fold {
    Train,
    Val,
    Test,
}

impl fmt::Display for Fold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fold::Train => "train",
            Fold::Val => "val",
            Fold::Test => "test",
        })
    }
}

impl FromStr for Fold {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Fold::Train),
            "val" => Ok(Fold::Val),
            "test" => Ok(Fold::Test),
            _ => Err(Error::Format(format!("unknown fold '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub fold: Fold,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// Directory the relative paths are resolved against.
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
}

/// A loaded manifest entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub id: String,
    pub fold: Fold,
    pub image: Image,
    pub mask: LabelMask,
}

impl Manifest {
    /// Read `path`, or `path/manifest.csv` when `path` is a directory.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let mut path = path.as_ref().to_path_buf();
        if path.is_dir() {
            path = path.join(MANIFEST_FILE);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut reader = csv::Reader::from_path(&path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let headers = reader.headers().map_err(|e| Error::Format(format!("{}: {e}", path.display())))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["id", "image", "mask", "fold"] {
            return Err(Error::Format(format!("{}: header must be id,image,mask,fold", path.display())));
        }
        let mut rows = Vec::new();
        let mut seen = HashSet::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            let id = rec[0].to_string();
            if !seen.insert(id.clone()) {
                return Err(Error::Format(format!("{}: duplicate id '{id}'", path.display())));
            }
            rows.push(ManifestRow { id, image: PathBuf::from(&rec[1]), mask: PathBuf::from(&rec[2]), fold: rec[3].parse()? });
        }
        Ok(Manifest { root, rows })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let fail = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
        w.write_record(["id", "image", "mask", "fold"]).map_err(fail)?;
        for r in &self.rows {
            w.write_record([r.id.as_str(), &r.image.to_string_lossy(), &r.mask.to_string_lossy(), &r.fold.to_string()]).map_err(fail)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Load every row (optionally only one fold), resizing to the working size.
    pub fn load(&self, fold: Option<Fold>) -> Result<Vec<Record>> {
        self.rows
            .iter()
            .filter(|r| fold.map_or(true, |f| r.fold == f))
            .map(|r| {
                Ok(Record {
                    id: r.id.clone(),
                    fold: r.fold,
                    image: load_image(self.root.join(&r.image))?,
                    mask: load_mask(self.root.join(&r.mask), NUM_CLASSES)?,
                })
            })
            .collect()
    }
}

/// Write samples and their fold assignment as a dataset directory.
pub fn write_dataset(dir: impl AsRef<Path>, samples: &[Sample], folds: &Folds) -> Result<Manifest> {
    let dir = dir.as_ref();
    let mut fold_of = vec![Fold::Train; samples.len()];
    for &i in &folds.val {
        fold_of[i] = Fold::Val;
    }
    for &i in &folds.test {
        fold_of[i] = Fold::Test;
    }
    let mut rows = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let name = format!("{:03}.pgm", s.id);
        let (image, mask) = (Path::new("images").join(&name), Path::new("masks").join(&name));
        save_image_pgm(dir.join(&image), &s.image)?;
        save_mask_pgm(dir.join(&mask), &s.mask)?;
        rows.push(ManifestRow { id: format!("{:03}", s.id), image, mask, fold: fold_of[i] });
    }
    let manifest = Manifest { root: dir.to_path_buf(), rows };
    manifest.write(dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Records converted back into samples (ids are positions).
pub fn records_to_samples(records: &[Record]) -> Vec<Sample> {
    records.iter().enumerate().map(|(id, r)| Sample { id, image: r.image.clone(), mask: r.mask.clone() }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, split, SynthSpec, SPLIT_FRACTIONS};

    #[test]
    fn dataset_round_trip() {
        let dir = std::env::temp_dir().join(format!("acreg-manifest-{}", std::process::id()));
        let data = generate(&SynthSpec { count: 10, ..SynthSpec::default() }).unwrap();
        let folds = split(10, SPLIT_FRACTIONS, 0).unwrap();
        write_dataset(&dir, &data, &folds).unwrap();
        let m = Manifest::read(&dir).unwrap();
        assert_eq!(m.rows.len(), 10);
        let test = m.load(Some(Fold::Test)).unwrap();
        assert_eq!(test.len(), 2);
        let all = m.load(None).unwrap();
        for (r, s) in all.iter().zip(&data) {
            assert_eq!(r.mask, s.mask);
            for (a, b) in r.image.data.iter().zip(&s.image.data) {
                assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
        std::fs::write(dir.join("dup.csv"), "id,image,mask,fold\na,x,y,train\na,x,y,val\n").unwrap();
        assert!(Manifest::read(dir.join("dup.csv")).is_err());
    }
}
