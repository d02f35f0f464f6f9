//! Digit one-class tasks drawn from a labelled image pool.
//!
//! The pool is a CSV with a `label` column (digit) and pixel columns
//! `f0..f{d-1}` holding raw 0-255 intensities. Each draw takes, per digit, a
//! handful of training positives and a block of test images; every task is
//! then evaluated on the full test block with its own digit as the targets.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{DatasetBundle, Provenance, Split};
use crate::error::{Error, Result};
use crate::linalg::Mat;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MnistRecipe {
    pub pool: PathBuf,
    pub train_per_digit: usize,
    pub test_per_digit: usize,
    pub digits: Vec<usize>,
    /// Multiplier applied to raw pixel values.
    pub scale: f64,
}

impl Default for MnistRecipe {
    fn default() -> Self {
        Self {
            pool: PathBuf::from("data/mnist_pool.csv"),
            train_per_digit: 15,
            test_per_digit: 150,
            digits: (0..10).collect(),
            scale: 1.0 / 255.0,
        }
    }
}

impl MnistRecipe {
    pub fn validate(&self) -> Result<()> {
        if self.digits.len() < 2 {
            return Err(Error::param("need at least two digits"));
        }
        let mut sorted = self.digits.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.digits.len() {
            return Err(Error::param("digits must be distinct"));
        }
        if self.train_per_digit == 0 || self.test_per_digit == 0 {
            return Err(Error::param("per-digit counts must be positive"));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::param("scale must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePool {
    pub features: Mat,
    pub labels: Vec<usize>,
    pub source: String,
}

pub fn load_pool(path: &Path) -> Result<ImagePool> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(std::fs::File::open(path).map_err(Error::io_at(path))?);
    let header = reader
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let label_col = header
        .iter()
        .position(|h| h == "label")
        .ok_or_else(|| Error::Schema("image pool needs a label column".into()))?;
    let d = header.len() - 1;
    for (j, name) in header.iter().filter(|&h| h != "label").enumerate() {
        if name != format!("f{j}") {
            return Err(Error::Schema(format!("expected column f{j}, found {name:?}")));
        }
    }

    let mut values = Vec::new();
    let mut labels = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: 0,
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let bad = |message: String| Error::Parse { line, message };
        for (pos, field) in rec.iter().enumerate() {
            if pos == label_col {
                labels.push(field.parse().map_err(|_| bad(format!("bad label {field:?}")))?);
            } else {
                values.push(field.parse::<f64>().map_err(|_| bad(format!("bad pixel {field:?}")))?);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::Schema("image pool is empty".into()));
    }
    Ok(ImagePool {
        features: Mat::from_row_slice(labels.len(), d, &values),
        labels,
        source: path.display().to_string(),
    })
}

/// One random draw of the recipe. Training rows are task-contiguous in digit
/// order; task `t` is `recipe.digits[t]`.
pub fn mnist_bundle(pool: &ImagePool, recipe: &MnistRecipe, seed: u64) -> Result<DatasetBundle> {
    recipe.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let need = recipe.train_per_digit + recipe.test_per_digit;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for &digit in &recipe.digits {
        let mut rows: Vec<usize> = (0..pool.labels.len()).filter(|&i| pool.labels[i] == digit).collect();
        if rows.len() < need {
            return Err(Error::input(format!(
                "digit {digit} has {} images, recipe needs {need}",
                rows.len()
            )));
        }
        rows.shuffle(&mut rng);
        train.push(rows[..recipe.train_per_digit].to_vec());
        test.extend(rows[recipe.train_per_digit..need].iter().map(|&i| (i, digit)));
    }

    let tasks = recipe.digits.len();
    let mut source_rows = Vec::new();
    let mut task_ids = Vec::new();
    let mut split = Vec::new();
    let mut labels = Vec::new();
    for (t, rows) in train.iter().enumerate() {
        for &i in rows {
            source_rows.push(i);
            task_ids.push(t);
            split.push(Split::Train);
            labels.push(Some(true));
        }
    }
    for (t, &digit) in recipe.digits.iter().enumerate() {
        for &(i, d) in &test {
            source_rows.push(i);
            task_ids.push(t);
            split.push(Split::Test);
            labels.push(Some(d == digit));
        }
    }
    let features = pool.features.select_rows(&source_rows) * recipe.scale;
    let provenance = Provenance {
        source: pool.source.clone(),
        seed: Some(seed),
        permutation: source_rows,
    };
    let bundle = DatasetBundle {
        tasks,
        features,
        task_ids,
        split,
        labels,
        provenance,
    };
    bundle.validate()?;
    Ok(bundle)
}
