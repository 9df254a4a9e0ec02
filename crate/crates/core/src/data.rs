//! Measurement sets and the long-format CSV (`time,channel,value`) they are read from.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::model::Selection;

/// All values taken at one measurement time.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub time: f64,
    /// State components observed, ascending.
    pub channels: Vec<usize>,
    pub values: Vec<f64>,
}

impl Measurement {
    pub fn values(&self) -> DVector<f64> {
        DVector::from_vec(self.values.clone())
    }
}

/// Measurements grouped by time. Channels may follow independent schedules, so
/// the dimension of each record varies.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementSet {
    records: Vec<Measurement>,
}

/// A single scalar observation before grouping.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample {
    pub time: f64,
    pub channel: usize,
    pub value: f64,
    /// Source line, used in error messages (0 when not read from a file).
    pub line: usize,
}

impl MeasurementSet {
    /// Groups samples by time; times closer than `1e-12` of the total span are merged.
    pub fn from_samples(mut samples: Vec<Sample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("no measurements".into()));
        }
        for s in &samples {
            if !s.time.is_finite() || !s.value.is_finite() {
                return Err(Error::Ingest { line: s.line, message: "non-finite time or value".into() });
            }
        }
        samples.sort_by(|a, b| a.time.total_cmp(&b.time));
        let span = samples[samples.len() - 1].time - samples[0].time;
        let tol = 1e-12 * span.abs();
        let mut records: Vec<(Measurement, Vec<usize>)> = Vec::new();
        for s in samples {
            let start_new = match records.last() {
                Some((m, _)) => s.time - m.time > tol,
                None => true,
            };
            if start_new {
                records.push((Measurement { time: s.time, channels: Vec::new(), values: Vec::new() }, Vec::new()));
            }
            let (m, lines) = records.last_mut().unwrap();
            if m.channels.contains(&s.channel) {
                return Err(Error::Ingest { line: s.line, message: format!("duplicate measurement of channel {} at t = {}", s.channel, s.time) });
            }
            m.channels.push(s.channel);
            m.values.push(s.value);
            lines.push(s.line);
        }
        let records = records
            .into_iter()
            .map(|(mut m, _)| {
                let mut order: Vec<usize> = (0..m.channels.len()).collect();
                order.sort_by_key(|&k| m.channels[k]);
                m.channels = order.iter().map(|&k| m.channels[k]).collect();
                m.values = order.iter().map(|&k| m.values[k]).collect();
                m
            })
            .collect();
        Ok(MeasurementSet { records })
    }

    pub fn from_records(records: Vec<Measurement>) -> Result<Self> {
        let samples =
            records.iter().flat_map(|m| m.channels.iter().zip(&m.values).map(move |(&c, &v)| Sample { time: m.time, channel: c, value: v, line: 0 })).collect();
        Self::from_samples(samples)
    }

    pub fn records(&self) -> &[Measurement] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.records.iter().map(|m| m.time).collect()
    }

    /// Total number of scalar values.
    pub fn n_values(&self) -> usize {
        self.records.iter().map(|m| m.values.len()).sum()
    }

    pub fn selection(&self, n_x: usize) -> Result<Selection> {
        Selection::new(n_x, self.times(), self.records.iter().map(|m| m.channels.clone()).collect())
    }

    /// Splits into a leading block holding `fraction` of the records and the
    /// trailing remainder. The two blocks share no measurement.
    pub fn split_contiguous(&self, fraction: f64) -> Result<(MeasurementSet, MeasurementSet)> {
        let n = self.records.len();
        let k = ((n as f64) * fraction).round() as usize;
        if k < 2 || n - k < 2 {
            return Err(Error::Config(format!("split fraction {fraction} leaves fewer than two measurement times in a block")));
        }
        Ok((MeasurementSet { records: self.records[..k].to_vec() }, MeasurementSet { records: self.records[k..].to_vec() }))
    }

    /// Reads a long-format CSV with header `time,channel,value`. Channel names
    /// are looked up in `channel_names`; position in that list is the state index.
    pub fn read_csv(path: &Path, channel_names: &[String]) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::parse_csv(file, channel_names)
    }

    pub fn parse_csv<R: std::io::Read>(reader: R, channel_names: &[String]) -> Result<Self> {
        let lookup: HashMap<&str, usize> = channel_names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers().map_err(|e| Error::Ingest { line: 1, message: e.to_string() })?;
        if header.iter().collect::<Vec<_>>() != ["time", "channel", "value"] {
            return Err(Error::Ingest { line: 1, message: format!("expected header time,channel,value, found {:?}", header) });
        }
        let mut samples = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Ingest { line: e.position().map_or(0, |p| p.line() as usize), message: e.to_string() })?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            if rec.len() != 3 {
                return Err(Error::Ingest { line, message: format!("expected 3 fields, found {}", rec.len()) });
            }
            let time: f64 = rec[0].parse().map_err(|_| Error::Ingest { line, message: format!("bad time {:?}", &rec[0]) })?;
            let channel = *lookup.get(&rec[1]).ok_or_else(|| Error::Ingest { line, message: format!("unknown channel {:?}", &rec[1]) })?;
            let value: f64 = rec[2].parse().map_err(|_| Error::Ingest { line, message: format!("bad value {:?}", &rec[2]) })?;
            samples.push(Sample { time, channel, value, line });
        }
        if samples.is_empty() {
            return Err(Error::Ingest { line: 1, message: "file contains no measurements".into() });
        }
        Self::from_samples(samples)
    }

    pub fn write_csv(&self, path: &Path, channel_names: &[String]) -> Result<()> {
        let mut out = String::from("time,channel,value\n");
        for m in &self.records {
            for (&c, &v) in m.channels.iter().zip(&m.values) {
                out.push_str(&format!("{},{},{}\n", m.time, channel_names[c], v));
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// `x1, x2, ...`
pub fn default_channel_names(n_x: usize) -> Vec<String> {
    (1..=n_x).map(|i| format!("x{i}")).collect()
}
