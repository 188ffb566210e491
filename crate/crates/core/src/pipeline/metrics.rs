use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Offline,
    Online,
    Eval,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Offline => "offline",
            Phase::Online => "online",
            Phase::Eval => "eval",
        })
    }
}

/// One line of the metrics log. Absent values serialize as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub phase: Phase,
    pub loss_q: Option<f64>,
    pub loss_flow: Option<f64>,
    pub loss_pi: Option<f64>,
    pub entropy: Option<f64>,
    pub xi: f64,
    #[serde(rename = "return")]
    pub mean_return: Option<f64>,
    pub success: Option<f64>,
    /// Seconds since the phase started. Not written to the log so that
    /// seeded runs produce identical files.
    #[serde(skip)]
    pub wall_clock: f64,
}

impl MetricsRecord {
    pub fn new(step: u64, phase: Phase, xi: f64) -> Self {
        Self {
            step,
            phase,
            loss_q: None,
            loss_flow: None,
            loss_pi: None,
            entropy: None,
            xi,
            mean_return: None,
            success: None,
            wall_clock: 0.0,
        }
    }
}

pub fn write_metrics<W: Write>(records: &[MetricsRecord], mut w: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Decode(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_metrics<R: BufRead>(r: R) -> Result<Vec<MetricsRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Decode(format!("metrics line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

/// Steps strictly increase within each phase.
pub fn steps_are_monotone(records: &[MetricsRecord]) -> bool {
    [Phase::Offline, Phase::Online, Phase::Eval]
        .iter()
        .all(|p| {
            let steps: Vec<u64> = records
                .iter()
                .filter(|r| r.phase == *p)
                .map(|r| r.step)
                .collect();
            steps.windows(2).all(|w| w[0] < w[1])
        })
}

/// Running mean of the three losses between log events.
#[derive(Debug, Clone, Default)]
pub(crate) struct LossAccumulator {
    q: f64,
    flow: f64,
    pi: f64,
    n: usize,
}

impl LossAccumulator {
    pub(crate) fn add(&mut self, q: f64, flow: f64, pi: f64) {
        self.q += q;
        self.flow += flow;
        self.pi += pi;
        self.n += 1;
    }

    pub(crate) fn drain_into(&mut self, record: &mut MetricsRecord) {
        if self.n > 0 {
            let n = self.n as f64;
            record.loss_q = Some(self.q / n);
            record.loss_flow = Some(self.flow / n);
            record.loss_pi = Some(self.pi / n);
        }
        *self = Self::default();
    }
}
