//! Output formats: CSV report rows, OBJ geometry, JSON helpers.

use serde::{Deserialize, Serialize};
use std::fmt::Write;

/// One CSV row of the experiment ladder schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub experiment_id: String,
    pub quantity: String,
    pub s: f64,
    pub p: f64,
    pub sigma: f64,
    pub value: f64,
    pub stderr: f64,
    pub samples: u64,
    pub seed: u64,
}

pub const CSV_HEADER: &str = "experiment_id,quantity,s,p,sigma,value,stderr,samples,seed";

impl CsvRow {
    pub fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{:e},{:e},{},{}",
            self.experiment_id, self.quantity, self.s, self.p, self.sigma, self.value, self.stderr, self.samples, self.seed
        )
    }
}

pub fn csv_string(rows: &[CsvRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_line());
        out.push('\n');
    }
    out
}

/// Minimal OBJ writer: vertices are padded to three coordinates.
pub struct ObjWriter {
    buf: String,
    nv: usize,
}

impl ObjWriter {
    pub fn new(name: &str) -> Self {
        Self { buf: format!("# sobomap geometry\no {name}\n"), nv: 0 }
    }

    pub fn group(&mut self, name: &str) {
        let _ = writeln!(self.buf, "g {name}");
    }

    fn vertex(&mut self, p: &[f64]) -> usize {
        let c = |i: usize| p.get(i).copied().unwrap_or(0.0);
        let _ = writeln!(self.buf, "v {:.9} {:.9} {:.9}", c(0), c(1), c(2));
        self.nv += 1;
        self.nv
    }

    pub fn point(&mut self, p: &[f64]) {
        let a = self.vertex(p);
        let _ = writeln!(self.buf, "p {a}");
    }

    pub fn polyline(&mut self, pts: &[Vec<f64>]) {
        if pts.len() < 2 {
            if let Some(p) = pts.first() {
                self.point(p);
            }
            return;
        }
        let ids: Vec<usize> = pts.iter().map(|p| self.vertex(p)).collect();
        let line: Vec<String> = ids.iter().map(|i| i.to_string()).collect();
        let _ = writeln!(self.buf, "l {}", line.join(" "));
    }

    pub fn quad(&mut self, q: [&Vec<f64>; 4]) {
        let ids: Vec<usize> = q.iter().map(|p| self.vertex(p)).collect();
        let _ = writeln!(self.buf, "f {} {} {} {}", ids[0], ids[1], ids[2], ids[3]);
    }

    pub fn triangle(&mut self, t: [&[f64]; 3]) {
        let ids: Vec<usize> = t.iter().map(|p| self.vertex(p)).collect();
        let _ = writeln!(self.buf, "f {} {} {}", ids[0], ids[1], ids[2]);
    }

    pub fn finish(self) -> String {
        self.buf
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_schema() {
        let r = CsvRow {
            experiment_id: "e".into(),
            quantity: "q".into(),
            s: 1.0,
            p: 1.5,
            sigma: 0.0,
            value: 2.0,
            stderr: 0.1,
            samples: 10,
            seed: 3,
        };
        let s = csv_string(&[r]);
        assert!(s.starts_with(CSV_HEADER));
        assert_eq!(s.lines().nth(1).unwrap().split(',').count(), 9);
    }

    #[test]
    fn obj_records() {
        let mut w = ObjWriter::new("t");
        w.group("a");
        w.polyline(&[vec![0.0, 0.0], vec![1.0, 0.0]]);
        let s = w.finish();
        assert!(s.contains("v 1.000000000 0.000000000 0.000000000"));
        assert!(s.contains("l 1 2"));
    }
}
