use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// `sqrt(mean((yhat - y)^2))` over all entries.
pub fn rmse(yhat: &Tensor, y: &Tensor) -> Result<f64> {
    if yhat.shape() != y.shape() {
        return Err(Error::Contract(format!(
            "rmse of {:?} against {:?}",
            yhat.shape(),
            y.shape()
        )));
    }
    if y.numel() == 0 {
        return Err(Error::Contract("rmse over an empty range".into()));
    }
    let sq: f64 = yhat
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((sq / y.numel() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    ParseError,
    VerifyError,
    RuntimeError,
}

impl Status {
    pub fn is_bug(self) -> bool {
        self != Status::Ok
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Status::Ok => "ok",
            Status::ParseError => "parse_error",
            Status::VerifyError => "verify_error",
            Status::RuntimeError => "runtime_error",
        }
    }
}

/// One generation attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub g: usize,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunRecord {
    pub fn ok(g: usize, v: f64) -> Self {
        Self {
            g,
            status: Status::Ok,
            v: Some(v),
            error: None,
        }
    }

    pub fn failed(g: usize, status: Status, error: impl Into<String>) -> Self {
        Self {
            g,
            status,
            v: None,
            error: Some(error.into()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<RunRecord>,
}

impl RunLog {
    pub fn push(&mut self, record: RunRecord) {
        self.records.push(record);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Failures in the last `window` records, per status.
    pub fn breakdown(&self, window: usize) -> Vec<(Status, usize)> {
        let tail = &self.records[self.records.len().saturating_sub(window)..];
        [Status::ParseError, Status::VerifyError, Status::RuntimeError]
            .into_iter()
            .map(|s| (s, tail.iter().filter(|r| r.status == s).count()))
            .collect()
    }
}

/// Failed attempts among the last `min(window, len)` records.
pub fn bug_counts_at(log: &RunLog, window: usize) -> usize {
    let start = log.records.len().saturating_sub(window);
    log.records[start..].iter().filter(|r| r.status.is_bug()).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_examples() {
        let y = Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
        let yhat = Tensor::new(vec![2, 1], vec![3.0, 5.0]).unwrap();
        assert!((rmse(&yhat, &y).unwrap() - 10f64.sqrt()).abs() < 1e-15);
        assert_eq!(rmse(&y, &y).unwrap(), 0.0);
        let shifted = y.map(|v| v - 2.5);
        assert_eq!(rmse(&shifted, &y).unwrap(), 2.5);
        assert_eq!(rmse(&y, &Tensor::zeros(&[1, 2])).unwrap_err().code(), "CONTRACT_ERROR");
    }

    fn log_with(statuses: &[Status]) -> RunLog {
        let mut log = RunLog::default();
        for (g, s) in statuses.iter().enumerate() {
            log.push(if *s == Status::Ok {
                RunRecord::ok(g, 1.0)
            } else {
                RunRecord::failed(g, *s, "x")
            });
        }
        log
    }

    #[test]
    fn bug_count_examples() {
        let mut s = vec![Status::Ok; 20];
        s[2] = Status::ParseError;
        s[9] = Status::VerifyError;
        s[19] = Status::RuntimeError;
        assert_eq!(bug_counts_at(&log_with(&s), 20), 3);
        assert_eq!(bug_counts_at(&RunLog::default(), 20), 0);
        let mut s = vec![Status::RuntimeError; 10];
        s.extend(vec![Status::Ok; 20]);
        assert_eq!(bug_counts_at(&log_with(&s), 20), 0);
    }

    #[test]
    fn record_json_omits_absent_fields() {
        let json = serde_json::to_string(&RunRecord::ok(3, 2.5)).unwrap();
        assert_eq!(json, r#"{"g":3,"status":"ok","v":2.5}"#);
        let json = serde_json::to_string(&RunRecord::failed(4, Status::ParseError, "E")).unwrap();
        assert_eq!(json, r#"{"g":4,"status":"parse_error","error":"E"}"#);
    }
}
