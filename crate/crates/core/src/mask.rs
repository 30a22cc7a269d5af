use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Result};

/// Pipeline stage that produced a mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Stage {
    Btp,
    Qtp,
    Combined,
    Ctp,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Btp => "BTP",
            Stage::Qtp => "QTP",
            Stage::Combined => "COMBINED",
            Stage::Ctp => "CTP",
        })
    }
}

impl FromStr for Stage {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "BTP" => Ok(Stage::Btp),
            "QTP" => Ok(Stage::Qtp),
            "COMBINED" => Ok(Stage::Combined),
            "CTP" => Ok(Stage::Ctp),
            other => Err(invalid("stage", format!("unknown stage {other:?}"))),
        }
    }
}

/// Keep/drop decision per grid cell, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMask {
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
    stage: Stage,
}

impl TokenMask {
    pub fn new(rows: usize, cols: usize, keep: Vec<bool>, stage: Stage) -> Result<Self> {
        if keep.len() != rows * cols {
            return Err(mismatch("mask length", rows * cols, keep.len()));
        }
        Ok(Self {
            rows,
            cols,
            keep,
            stage,
        })
    }

    pub fn filled(rows: usize, cols: usize, value: bool, stage: Stage) -> Self {
        Self {
            rows,
            cols,
            keep: vec![value; rows * cols],
            stage,
        }
    }

    /// Build a mask from the indices of kept cells.
    pub fn from_kept(rows: usize, cols: usize, kept: &[usize], stage: Stage) -> Result<Self> {
        let mut keep = vec![false; rows * cols];
        for &i in kept {
            let slot = keep
                .get_mut(i)
                .ok_or_else(|| invalid("kept", format!("index {i} out of range for {rows}x{cols}")))?;
            if *slot {
                return Err(invalid("kept", format!("duplicate index {i}")));
            }
            *slot = true;
        }
        Ok(Self {
            rows,
            cols,
            keep,
            stage,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn with_stage(mut self, stage: Stage) -> Self {
        self.stage = stage;
        self
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn is_kept(&self, row: usize, col: usize) -> bool {
        self.keep[row * self.cols + col]
    }

    pub fn kept_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    /// Ascending indices of kept cells.
    pub fn kept_indices(&self) -> Vec<usize> {
        self.keep
            .iter()
            .enumerate()
            .filter_map(|(i, &k)| k.then_some(i))
            .collect()
    }

    pub fn drop_rate(&self) -> f64 {
        if self.keep.is_empty() {
            return 0.0;
        }
        (self.len() - self.kept_count()) as f64 / self.len() as f64
    }
}
