use std::collections::BTreeMap;

use super::metrics::{DetPoint, MetricsReport};
use super::trainer::EpochStats;
use crate::error::{Error, Result};

pub const DET_SECTION: &str = "[det]";
pub const DET_HEADER: &str = "threshold,apcer,npcer";
pub const HISTORY_HEADER: &str = "epoch,train_loss,val_loss,val_acc";

fn rate(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.2}"))
}

/// `key=value` lines, then `extra` lines, then the DET block.
pub fn format_report(r: &MetricsReport, extra: &[(String, String)]) -> String {
    let mut out = String::new();
    let mut kv = |k: &str, v: String| out.push_str(&format!("{k}={v}\n"));
    kv("samples", r.samples.to_string());
    kv("threshold", r.threshold.to_string());
    kv("aa", format!("{:.2}", r.aa));
    kv("apcer", rate(r.apcer));
    kv("npcer", rate(r.npcer));
    kv("acer", rate(r.acer));
    kv("eer", rate(r.eer));
    for (i, row) in r.confusion.iter().enumerate() {
        kv(&format!("confusion.{i}"), row.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","));
    }
    for (k, v) in extra {
        kv(k, v.clone());
    }
    out.push_str(DET_SECTION);
    out.push('\n');
    out.push_str(DET_HEADER);
    out.push('\n');
    for p in &r.det_points {
        out.push_str(&format!("{},{},{}\n", p.threshold, p.apcer, p.npcer));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedReport {
    pub values: BTreeMap<String, String>,
    pub det: Vec<DetPoint>,
}

impl ParsedReport {
    /// A numeric value; `None` for "undefined".
    pub fn rate(&self, key: &str) -> Result<Option<f64>> {
        let v = self.values.get(key).ok_or_else(|| Error::Data(format!("report lacks {key}")))?;
        if v == "undefined" {
            return Ok(None);
        }
        v.parse().map(Some).map_err(|_| Error::Data(format!("report {key}={v} is not a number")))
    }
}

pub fn parse_report(text: &str) -> Result<ParsedReport> {
    let mut values = BTreeMap::new();
    let mut lines = text.lines();
    for line in lines.by_ref() {
        if line == DET_SECTION {
            break;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Data(format!("report line {line:?} is not key=value")))?;
        values.insert(k.to_string(), v.to_string());
    }
    let mut det = Vec::new();
    if let Some(h) = lines.next() {
        if h != DET_HEADER {
            return Err(Error::Data(format!("DET header {h:?}")));
        }
        for line in lines {
            let f: Vec<f64> = line
                .split(',')
                .map(|x| x.parse::<f64>().map_err(|_| Error::Data(format!("DET row {line:?}"))))
                .collect::<Result<_>>()?;
            if f.len() != 3 {
                return Err(Error::Data(format!("DET row {line:?}")));
            }
            det.push(DetPoint {
                threshold: f[0],
                apcer: f[1],
                npcer: f[2],
            });
        }
    }
    Ok(ParsedReport { values, det })
}

pub fn format_history(history: &[EpochStats]) -> String {
    let mut out = format!("{HISTORY_HEADER}\n");
    for h in history {
        out.push_str(&format!("{},{},{},{}\n", h.epoch, h.train_loss, h.val_loss, h.val_acc));
    }
    out
}
