use crate::error::{Error, Result};

/// Training pairs `(x0, cond)` with optional family labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x0: Vec<Vec<f64>>,
    pub cond: Vec<Vec<f64>>,
    pub labels: Vec<String>,
}

impl Dataset {
    pub fn new(x0: Vec<Vec<f64>>, cond: Vec<Vec<f64>>, labels: Vec<String>) -> Result<Self> {
        if x0.is_empty() {
            return Err(Error::config("dataset", "dataset is empty"));
        }
        if cond.len() != x0.len() || (!labels.is_empty() && labels.len() != x0.len()) {
            return Err(Error::config("dataset", "x0, cond and labels lengths differ"));
        }
        let dim = x0[0].len();
        let cdim = cond[0].len();
        if x0.iter().any(|x| x.len() != dim) || cond.iter().any(|c| c.len() != cdim) {
            return Err(Error::config("dataset", "ragged sample dimensions"));
        }
        Ok(Self { x0, cond, labels })
    }

    /// Unconditional dataset (empty condition vectors).
    pub fn unconditional(x0: Vec<Vec<f64>>) -> Result<Self> {
        let cond = vec![Vec::new(); x0.len()];
        Self::new(x0, cond, Vec::new())
    }

    pub fn len(&self) -> usize {
        self.x0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.is_empty()
    }

    pub fn data_dim(&self) -> usize {
        self.x0[0].len()
    }

    pub fn cond_dim(&self) -> usize {
        self.cond[0].len()
    }
}
