//! Success-rate tables as CSV and as a static SVG bar chart.
//!
//! The average column is the plain mean of the per-task percentages, not a
//! trial-weighted mean. On the reference fixture the rows average to 28.53
//! and 57.41 this way; weighting by trials would give 29.19 for the first.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::sim::{Task, TrialReport};

use super::train::csv_err;

#[derive(Clone, Debug, PartialEq)]
pub struct Column {
    pub task: Task,
    pub trials: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub policy: String,
    /// Percentages aligned with the table's columns.
    pub rates: Vec<f64>,
}

impl Row {
    pub fn average(&self) -> f64 {
        if self.rates.is_empty() {
            return 0.0;
        }
        self.rates.iter().sum::<f64>() / self.rates.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub columns: Vec<Column>,
    pub rows: Vec<Row>,
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

impl Table {
    pub fn new(columns: Vec<Column>) -> Self {
        Table { columns, rows: Vec::new() }
    }

    pub fn total_trials(&self) -> usize {
        self.columns.iter().map(|c| c.trials).sum()
    }

    pub fn push_reports(&mut self, policy: &str, reports: &[TrialReport]) -> Result<()> {
        if reports.len() != self.columns.len()
            || reports.iter().zip(&self.columns).any(|(r, c)| r.task != c.task || r.trials() != c.trials)
        {
            return Err(Error::Shape(format!("{policy}: trial reports do not match the table columns")));
        }
        self.rows.push(Row { policy: policy.to_string(), rates: reports.iter().map(TrialReport::rate).collect() });
        Ok(())
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["policy".to_string()];
        h.extend(self.columns.iter().map(|c| format!("{} ({})", c.task, c.trials)));
        h.push(format!("average ({})", self.total_trials()));
        h
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.header()).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![r.policy.clone()];
            rec.extend(r.rates.iter().map(|v| format!("{:.2}", round2(*v))));
            // average the printed rates so the row is consistent on its face
            let shown = r.rates.iter().map(|v| round2(*v)).sum::<f64>() / r.rates.len().max(1) as f64;
            rec.push(format!("{:.2}", round2(shown)));
            w.write_record(rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    /// Parses a table written by [`Table::to_csv`] (or by hand in the same
    /// layout). The average column must agree with the per-task rates.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let header: Vec<String> = rd.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
        if header.len() < 3 || header[0] != "policy" || !header[header.len() - 1].starts_with("average") {
            return Err(Error::Format(format!("unexpected report header {header:?}")));
        }
        let columns = header[1..header.len() - 1].iter().map(|h| parse_column(h)).collect::<Result<Vec<_>>>()?;
        let mut table = Table::new(columns);
        if parse_count(&header[header.len() - 1])? != table.total_trials() {
            return Err(Error::Format("average column trial count is not the sum of the task columns".into()));
        }
        for rec in rd.records() {
            let rec = rec.map_err(csv_err)?;
            if rec.len() != header.len() {
                return Err(Error::Format(format!("row has {} fields, header has {}", rec.len(), header.len())));
            }
            let num = |s: &str| -> Result<f64> {
                let v: f64 = s.trim_end_matches('%').parse().map_err(|_| Error::Format(format!("`{s}` is not a number")))?;
                if !(0.0..=100.0).contains(&v) {
                    return Err(Error::Format(format!("rate {v} outside 0..=100")));
                }
                Ok(v)
            };
            let rates = (1..rec.len() - 1).map(|i| num(&rec[i])).collect::<Result<Vec<_>>>()?;
            let row = Row { policy: rec[0].to_string(), rates };
            let stated = num(&rec[rec.len() - 1])?;
            if (round2(row.average()) - stated).abs() > 0.005 + 1e-9 {
                return Err(Error::Format(format!(
                    "{}: stated average {stated:.2} but the task rates average to {:.2}",
                    row.policy,
                    row.average()
                )));
            }
            table.rows.push(row);
        }
        Ok(table)
    }

    /// Grouped bar chart: one group per column plus the average.
    pub fn to_svg(&self) -> String {
        const PALETTE: [&str; 6] = ["#8c8c8c", "#d95f02", "#1b9e77", "#7570b3", "#e7298a", "#66a61e"];
        let labels: Vec<String> = self.header()[1..].to_vec();
        let groups = labels.len();
        let n = self.rows.len().max(1);
        let (left, top, plot_h, bar_w, gap) = (50.0, 40.0, 220.0, 18.0, 24.0);
        let group_w = n as f64 * bar_w + gap;
        let width = left + groups as f64 * group_w + 20.0;
        let height = top + plot_h + 70.0;
        let y = |v: f64| top + plot_h * (1.0 - v / 100.0);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        for tick in (0..=100).step_by(20) {
            let ty = y(tick as f64);
            let _ = writeln!(
                s,
                r##"<line x1="{left}" y1="{ty:.1}" x2="{:.1}" y2="{ty:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{tick}%</text>"##,
                width - 20.0,
                left - 4.0,
                ty + 4.0
            );
        }
        for (gi, label) in labels.iter().enumerate() {
            let gx = left + gi as f64 * group_w + gap / 2.0;
            for (ri, row) in self.rows.iter().enumerate() {
                let v = if gi < row.rates.len() { row.rates[gi] } else { row.average() };
                let v = round2(v);
                let x = gx + ri as f64 * bar_w;
                let _ = writeln!(
                    s,
                    r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}"><title>{}: {v:.2}%</title></rect>"#,
                    y(v),
                    bar_w - 2.0,
                    top + plot_h - y(v),
                    PALETTE[ri % PALETTE.len()],
                    escape(&row.policy)
                );
                let _ = writeln!(
                    s,
                    r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="8">{v:.2}</text>"#,
                    x + (bar_w - 2.0) / 2.0,
                    y(v) - 3.0
                );
            }
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                gx + n as f64 * bar_w / 2.0,
                top + plot_h + 16.0,
                escape(label)
            );
        }
        for (ri, row) in self.rows.iter().enumerate() {
            let lx = left + ri as f64 * 150.0;
            let ly = top + plot_h + 44.0;
            let _ = writeln!(
                s,
                r#"<rect x="{lx:.1}" y="{:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{ly:.1}">{}</text>"#,
                ly - 9.0,
                PALETTE[ri % PALETTE.len()],
                lx + 14.0,
                escape(&row.policy)
            );
        }
        let _ = writeln!(s, r#"<text x="{left}" y="20" font-size="13">Success rate per task</text>"#);
        s.push_str("</svg>\n");
        s
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn parse_count(h: &str) -> Result<usize> {
    let open = h.find('(').ok_or_else(|| Error::Format(format!("column `{h}` lacks a trial count")))?;
    h[open + 1..]
        .trim_end_matches(')')
        .trim()
        .parse()
        .map_err(|_| Error::Format(format!("column `{h}` has a bad trial count")))
}

fn parse_column(h: &str) -> Result<Column> {
    let name = h.split('(').next().unwrap_or("").trim().to_ascii_lowercase();
    let id = name
        .strip_prefix("task")
        .and_then(|d| d.trim().parse::<u8>().ok())
        .ok_or_else(|| Error::Format(format!("column `{h}` is not a task")))?;
    Ok(Column { task: Task::from_id(id)?, trials: parse_count(h)? })
}
