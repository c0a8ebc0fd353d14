use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::objectives::LossBreakdown;

pub const HISTORY_HEADER: [&str; 8] = ["round", "ll", "kl", "ms", "total_inference", "total_model", "src_acc", "tgt_acc"];

/// One logged round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub round: usize,
    pub ll: f64,
    pub kl: f64,
    pub ms: f64,
    pub total_inference: f64,
    pub total_model: f64,
    pub src_acc: Option<f64>,
    pub tgt_acc: Option<f64>,
}

impl TrainRecord {
    pub fn from_losses(round: usize, l: &LossBreakdown) -> Self {
        Self {
            round,
            ll: l.ll,
            kl: l.kl,
            ms: l.ms,
            total_inference: l.total_inference,
            total_model: l.total_model,
            src_acc: None,
            tgt_acc: None,
        }
    }
}

/// Per-round records with strictly increasing round numbers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    records: Vec<TrainRecord>,
}

impl TrainHistory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics if `record.round` does not exceed the last logged round.
    pub fn push(&mut self, record: TrainRecord) {
        if let Some(last) = self.records.last() {
            assert!(record.round > last.round, "history rounds must increase");
        }
        self.records.push(record);
    }

    pub fn records(&self) -> &[TrainRecord] {
        &self.records
    }

    pub fn last(&self) -> Option<&TrainRecord> {
        self.records.last()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
        w.write_record(HISTORY_HEADER)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            w.write_record([
                r.round.to_string(),
                r.ll.to_string(),
                r.kl.to_string(),
                r.ms.to_string(),
                r.total_inference.to_string(),
                r.total_model.to_string(),
                opt(r.src_acc),
                opt(r.tgt_acc),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self, csv::Error> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut out = Self::new();
        let bad = |what: &str| {
            csv::Error::from(std::io::Error::new(std::io::ErrorKind::InvalidData, format!("bad history field `{what}`")))
        };
        for rec in rdr.records() {
            let rec = rec?;
            let num = |i: usize| rec[i].parse::<f64>().map_err(|_| bad(&rec[i]));
            let opt = |i: usize| -> Result<Option<f64>, csv::Error> {
                if rec[i].is_empty() {
                    Ok(None)
                } else {
                    num(i).map(Some)
                }
            };
            out.records.push(TrainRecord {
                round: rec[0].parse().map_err(|_| bad(&rec[0]))?,
                ll: num(1)?,
                kl: num(2)?,
                ms: num(3)?,
                total_inference: num(4)?,
                total_model: num(5)?,
                src_acc: opt(6)?,
                tgt_acc: opt(7)?,
            });
        }
        Ok(out)
    }
}
