//! Confusion counts, precision/recall/F1 and per-class reports.

use std::fmt::Write as _;

use thiserror::Error;

use crate::raster::Grid;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction and truth are not aligned (differing: {0})")]
    Geometry(String),
    #[error("report line {line}: {message}")]
    Format { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// The same counts seen from the other class.
    pub fn swapped(&self) -> Self {
        Self {
            tp: self.tn,
            fp: self.fn_,
            fn_: self.fp,
            tn: self.tp,
        }
    }
}

/// Precision, recall and F1. A 0/0 ratio is reported as 0 with its flag set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub f1_undefined: bool,
}

/// Confusion counts over pixels valid in both grids.
pub fn confusion(pred: &Grid, truth: &Grid, positive_class: u8) -> Result<Confusion, EvalError> {
    let diff = pred.geometry_diff(truth);
    if !diff.is_empty() {
        return Err(EvalError::Geometry(diff.join(", ")));
    }
    let positive = f64::from(positive_class);
    let mut c = Confusion::default();
    for (&p, &t) in pred.values.iter().zip(&truth.values) {
        if pred.is_nodata(p) || truth.is_nodata(t) {
            continue;
        }
        match (p == positive, t == positive) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn precision_recall_f1(c: &Confusion) -> Scores {
    let ratio = |num: u64, den: u64| {
        if den == 0 {
            (0.0, true)
        } else {
            (num as f64 / den as f64, false)
        }
    };
    let (precision, precision_undefined) = ratio(c.tp, c.tp + c.fp);
    let (recall, recall_undefined) = ratio(c.tp, c.tp + c.fn_);
    // Harmonic mean of P and R, written over the counts so it is rounded once.
    let (f1, f1_undefined) = if c.tp == 0 {
        (0.0, true)
    } else {
        ((2 * c.tp) as f64 / (2 * c.tp + c.fp + c.fn_) as f64, false)
    };
    Scores {
        precision,
        recall,
        f1,
        precision_undefined,
        recall_undefined,
        f1_undefined,
    }
}

pub const CLASS_NAMES: [&str; 2] = ["dry", "flood"];

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    /// Indexed by class: dry then flood.
    pub classes: [Scores; 2],
    pub average_f1: f64,
}

/// `(class, P, R, F1)` as read back from the machine-readable form.
pub type MachineRow = (String, f64, f64, f64);

impl Report {
    pub fn from_confusion(flood: &Confusion) -> Self {
        let dry = precision_recall_f1(&flood.swapped());
        let flood = precision_recall_f1(flood);
        Self {
            classes: [dry, flood],
            average_f1: 0.5 * (dry.f1 + flood.f1),
        }
    }

    /// Aligned table, two decimals.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<6} {:>5} {:>5} {:>5} {:>10}",
            "Class", "P", "R", "F1", "Average F1"
        );
        for (c, s) in self.classes.iter().enumerate() {
            let name = if c == 0 { "Dry" } else { "Flood" };
            let avg = if c == 0 {
                format!("{:.2}", self.average_f1)
            } else {
                String::new()
            };
            let _ = writeln!(
                out,
                "{:<6} {:>5.2} {:>5.2} {:>5.2} {:>10}",
                name, s.precision, s.recall, s.f1, avg
            );
        }
        out
    }

    /// `class P R F1` lines at full precision followed by `average_f1 value`.
    pub fn to_machine(&self) -> String {
        let mut out = String::new();
        for (name, s) in CLASS_NAMES.iter().zip(&self.classes) {
            let _ = writeln!(out, "{name} {} {} {}", s.precision, s.recall, s.f1);
        }
        let _ = writeln!(out, "average_f1 {}", self.average_f1);
        out
    }

    /// Parse the machine-readable form back into `(class, P, R, F1)` rows and
    /// the average F1.
    pub fn parse_machine(text: &str) -> Result<(Vec<MachineRow>, f64), EvalError> {
        let mut rows = Vec::new();
        let mut average = None;
        for (idx, line) in text.lines().enumerate() {
            let err = |message: String| EvalError::Format {
                line: idx + 1,
                message,
            };
            let tokens: Vec<&str> = line.split_whitespace().collect();
            let num = |t: &str| {
                t.parse::<f64>()
                    .map_err(|_| err(format!("bad number {t:?}")))
            };
            match tokens.as_slice() {
                [] => {}
                ["average_f1", v] => average = Some(num(v)?),
                [name, p, r, f] => rows.push((name.to_string(), num(p)?, num(r)?, num(f)?)),
                _ => return Err(err(format!("unexpected line {line:?}"))),
            }
        }
        let average = average.ok_or_else(|| EvalError::Format {
            line: text.lines().count(),
            message: "missing average_f1".into(),
        })?;
        Ok((rows, average))
    }
}

pub fn report(pred: &Grid, truth: &Grid) -> Result<Report, EvalError> {
    Ok(Report::from_confusion(&confusion(pred, truth, 1)?))
}
