//! Dataset bundles and their CSV form.
//!
//! A CSV has a header row with feature columns `f0..f{d-1}` and the columns
//! `task` (integer), `split` (`train` or `test`) and `label` (`target` or
//! `nontarget`, test rows only). Column order is free.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub seed: Option<u64>,
    /// `permutation[i]` is the original data-row index of bundle row `i`.
    pub permutation: Vec<usize>,
}

/// Training rows come first, sorted by task; test rows follow. A test row's
/// `task` names the task whose test set it belongs to and `label` says whether
/// it is a target of that task.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub features: Mat,
    pub task_ids: Vec<usize>,
    pub split: Vec<Split>,
    pub labels: Vec<Option<bool>>,
    pub tasks: usize,
    pub provenance: Provenance,
}

/// One task's evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSet {
    pub rows: Vec<usize>,
    pub features: Mat,
    pub labels: Vec<bool>,
}

impl DatasetBundle {
    /// Builds a bundle from rows in any order, moving training rows to the
    /// front grouped by task (stable) and recording the permutation.
    pub fn from_rows(
        features: Mat,
        task_ids: Vec<usize>,
        split: Vec<Split>,
        labels: Vec<Option<bool>>,
        provenance: Provenance,
    ) -> Result<Self> {
        let n = features.nrows();
        if task_ids.len() != n || split.len() != n || labels.len() != n {
            return Err(Error::input("bundle columns have different lengths"));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| match split[i] {
            Split::Train => (0, task_ids[i]),
            Split::Test => (1, 0),
        });
        let tasks = task_ids.iter().max().map_or(0, |m| m + 1);
        let bundle = DatasetBundle {
            features: features.select_rows(&order),
            task_ids: order.iter().map(|&i| task_ids[i]).collect(),
            split: order.iter().map(|&i| split[i]).collect(),
            labels: order.iter().map(|&i| labels[i]).collect(),
            tasks,
            provenance: Provenance {
                permutation: order
                    .iter()
                    .map(|&i| provenance.permutation.get(i).copied().unwrap_or(i))
                    .collect(),
                ..provenance
            },
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks == 0 {
            return Err(Error::input("bundle has no tasks"));
        }
        let train = self.train_rows();
        if !train.windows(2).all(|w| w[1] == w[0] + 1) || train.first().is_some_and(|&i| i != 0) {
            return Err(Error::input("training rows must precede test rows"));
        }
        if !train.windows(2).all(|w| self.task_ids[w[0]] <= self.task_ids[w[1]]) {
            return Err(Error::input("training rows are not sorted by task"));
        }
        for t in 0..self.tasks {
            if !train.iter().any(|&i| self.task_ids[i] == t) {
                return Err(Error::input(format!("task {t} has no training positives")));
            }
        }
        for i in 0..self.features.nrows() {
            match (self.split[i], self.labels[i]) {
                (Split::Train, Some(false)) => {
                    return Err(Error::input(format!("training row {i} is labelled non-target")))
                }
                (Split::Test, None) => return Err(Error::input(format!("test row {i} has no label"))),
                _ => {}
            }
        }
        Ok(())
    }

    /// Every task's test set holds at least one target and one non-target.
    pub fn validate_for_evaluation(&self) -> Result<()> {
        for t in 0..self.tasks {
            let labels: Vec<bool> = self
                .test_rows(t)
                .iter()
                .map(|&i| self.labels[i] == Some(true))
                .collect();
            if !labels.contains(&true) || !labels.contains(&false) {
                return Err(Error::input(format!(
                    "test set of task {t} needs both target and non-target samples"
                )));
            }
        }
        Ok(())
    }

    pub fn train_rows(&self) -> Vec<usize> {
        (0..self.split.len())
            .filter(|&i| self.split[i] == Split::Train)
            .collect()
    }

    pub fn test_rows(&self, task: usize) -> Vec<usize> {
        (0..self.split.len())
            .filter(|&i| self.split[i] == Split::Test && self.task_ids[i] == task)
            .collect()
    }

    pub fn train_features(&self) -> Mat {
        self.features.select_rows(&self.train_rows())
    }

    pub fn train_task_ids(&self) -> Vec<usize> {
        self.train_rows().iter().map(|&i| self.task_ids[i]).collect()
    }

    pub fn test_set(&self, task: usize) -> TestSet {
        let rows = self.test_rows(task);
        TestSet {
            features: self.features.select_rows(&rows),
            labels: rows.iter().map(|&i| self.labels[i] == Some(true)).collect(),
            rows,
        }
    }
}

const REQUIRED: [&str; 3] = ["task", "split", "label"];

pub fn load_csv(path: &Path) -> Result<DatasetBundle> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(std::fs::File::open(path).map_err(Error::io_at(path))?);
    let header = reader.headers().map_err(csv_io)?.clone();

    let find = |name: &str| header.iter().position(|h| h == name);
    let [task_col, split_col, label_col] = REQUIRED.map(find);
    let (task_col, split_col, label_col) = match (task_col, split_col, label_col) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => {
            let missing: Vec<&str> = REQUIRED.into_iter().filter(|c| find(c).is_none()).collect();
            return Err(Error::Schema(format!(
                "missing required column(s): {}",
                missing.join(", ")
            )));
        }
    };
    let mut feature_cols = Vec::new();
    for (pos, name) in header.iter().enumerate() {
        if REQUIRED.contains(&name) {
            continue;
        }
        let idx = name
            .strip_prefix('f')
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::Schema(format!("unexpected column {name:?}")))?;
        feature_cols.push((idx, pos));
    }
    feature_cols.sort_unstable();
    if feature_cols.is_empty() {
        return Err(Error::Schema("no feature columns".into()));
    }
    if feature_cols.iter().enumerate().any(|(i, &(idx, _))| idx != i) {
        return Err(Error::Schema("feature columns must be f0..f{d-1} without gaps".into()));
    }

    let d = feature_cols.len();
    let mut values = Vec::new();
    let mut task_ids = Vec::new();
    let mut split = Vec::new();
    let mut labels = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(csv_io)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let bad = |message: String| Error::Parse { line, message };
        if rec.len() != header.len() {
            return Err(bad(format!("expected {} fields, found {}", header.len(), rec.len())));
        }
        for &(idx, pos) in &feature_cols {
            let v: f64 = rec[pos]
                .parse()
                .map_err(|_| bad(format!("feature f{idx} is not a number: {:?}", &rec[pos])))?;
            if !v.is_finite() {
                return Err(bad(format!("feature f{idx} is not finite")));
            }
            values.push(v);
        }
        task_ids.push(
            rec[task_col]
                .parse::<usize>()
                .map_err(|_| bad(format!("task is not a nonnegative integer: {:?}", &rec[task_col])))?,
        );
        let s = match &rec[split_col] {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(bad(format!("split must be train or test, got {other:?}"))),
        };
        let l = match (s, &rec[label_col]) {
            (_, "target") => Some(true),
            (Split::Test, "nontarget") => Some(false),
            (Split::Train, "") => None,
            (Split::Train, "nontarget") => return Err(bad("training rows cannot be non-targets".into())),
            (_, other) => return Err(bad(format!("label must be target or nontarget, got {other:?}"))),
        };
        split.push(s);
        labels.push(l);
    }
    if task_ids.is_empty() {
        return Err(Error::Schema("file has no data rows".into()));
    }
    let features = Mat::from_row_slice(task_ids.len(), d, &values);
    let provenance = Provenance {
        source: path.display().to_string(),
        seed: None,
        permutation: Vec::new(),
    };
    DatasetBundle::from_rows(features, task_ids, split, labels, provenance)
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        csv::ErrorKind::Utf8 { pos, err } => Error::Parse {
            line: pos.map_or(0, |p| p.line() as usize),
            message: err.to_string(),
        },
        other => Error::Parse {
            line: 0,
            message: format!("{other:?}"),
        },
    }
}

pub fn write_csv(bundle: &DatasetBundle, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
    let mut header: Vec<String> = (0..bundle.dim()).map(|j| format!("f{j}")).collect();
    header.extend(REQUIRED.iter().map(|s| s.to_string()));
    w.write_record(&header).map_err(csv_io)?;
    for i in 0..bundle.features.nrows() {
        let mut row: Vec<String> = bundle.features.row(i).iter().map(|v| v.to_string()).collect();
        row.push(bundle.task_ids[i].to_string());
        row.push(
            match bundle.split[i] {
                Split::Train => "train",
                Split::Test => "test",
            }
            .into(),
        );
        row.push(
            match bundle.labels[i] {
                Some(true) => "target",
                Some(false) => "nontarget",
                None => "",
            }
            .into(),
        );
        w.write_record(&row).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}
