//! CSV writers and readers for search histories and evaluation results.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::search::{FitnessRecord, SearchHistory};
use crate::supernet::PathEncoding;

use super::methods::{EpisodeResult, Method};
use super::stats::{confidence_interval, BitCorrelation};

fn writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().has_headers(false).from_writer(w)
}

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn write_history_rows<'a, W: Write>(
    provenance: &str,
    rows: impl Iterator<Item = &'a FitnessRecord>,
    mut w: W,
) -> Result<()> {
    w.write_all(provenance.as_bytes())?;
    let mut out = writer(w);
    out.write_record(["generation", "path_bits", "fitness"])?;
    for r in rows {
        out.write_record([r.generation.to_string(), r.path.to_bit_string(), fmt_f64(r.fitness)])?;
    }
    out.flush()?;
    Ok(())
}

/// Every evaluation in the order the search produced it.
pub fn write_history<W: Write>(history: &SearchHistory, provenance: &str, w: W) -> Result<()> {
    write_history_rows(provenance, history.evaluations().iter(), w)
}

/// Reads a file written by [`write_history`] or [`export_snapshots`].
/// Lines starting with `#` are skipped.
pub fn read_history<R: Read>(r: R) -> Result<SearchHistory> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["generation", "path_bits", "fitness"] {
        return Err(Error::InvalidArgument(format!("unexpected history columns {headers:?}")));
    }
    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let bad = |what: &str| Error::InvalidArgument(format!("history row {}: bad {what}", i + 1));
        records.push(FitnessRecord {
            generation: row[0].parse().map_err(|_| bad("generation"))?,
            path: PathEncoding::parse(&row[1])?,
            fitness: row[2].parse().map_err(|_| bad("fitness"))?,
        });
    }
    SearchHistory::from_evaluations(records)
}

/// Every evaluation sorted by generation, then by fitness (best first),
/// then by bit string. Input for external projection plots.
pub fn export_snapshots<W: Write>(history: &SearchHistory, provenance: &str, w: W) -> Result<()> {
    if history.is_empty() {
        return Err(Error::InvalidArgument("nothing to export: empty history".into()));
    }
    let mut rows: Vec<&FitnessRecord> = history.evaluations().iter().collect();
    rows.sort_by(|a, b| {
        a.generation
            .cmp(&b.generation)
            .then(b.fitness.total_cmp(&a.fitness))
            .then_with(|| a.path.cmp(&b.path))
    });
    write_history_rows(provenance, rows.into_iter(), w)
}

pub fn write_results<W: Write>(results: &[EpisodeResult], provenance: &str, mut w: W) -> Result<()> {
    w.write_all(provenance.as_bytes())?;
    let mut out = writer(w);
    out.write_record(EpisodeResult::HEADER)?;
    for r in results {
        out.write_record(r.record())?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_point_biserial<W: Write>(corr: &[BitCorrelation], provenance: &str, mut w: W) -> Result<()> {
    w.write_all(provenance.as_bytes())?;
    let mut out = writer(w);
    out.write_record(["bit", "layer", "decision", "r", "defined"])?;
    for (i, c) in corr.iter().enumerate() {
        let decision = if i % 2 == 0 { "adapter" } else { "finetune" };
        out.write_record([i.to_string(), (i / 2).to_string(), decision.into(), fmt_f64(c.r), c.defined.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub method: Method,
    /// The path the method used on every episode, if it never varied.
    pub path: Option<PathEncoding>,
    /// `(mean, 95% half-width)` per domain, then over all episodes.
    pub cells: Vec<(f64, f64)>,
}

/// Method × domain accuracy table.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub domains: Vec<String>,
    pub rows: Vec<ReportRow>,
}

impl AblationReport {
    /// Aggregates per-episode results. With a single episode per domain the
    /// half-width is reported as NaN.
    pub fn from_results(methods: &[Method], domains: &[String], results: &[EpisodeResult]) -> Result<Self> {
        let ci = |v: &[f64]| -> Result<(f64, f64)> {
            match v.len() {
                0 => Err(Error::InvalidArgument("no episodes to report".into())),
                1 => Ok((v[0], f64::NAN)),
                _ => confidence_interval(v),
            }
        };
        let mut rows = Vec::with_capacity(methods.len());
        for &m in methods {
            let mine: Vec<&EpisodeResult> = results.iter().filter(|r| r.method == m).collect();
            let mut cells = Vec::with_capacity(domains.len() + 1);
            for d in domains {
                let acc: Vec<f64> = mine.iter().filter(|r| &r.domain_id == d).map(|r| r.query_accuracy).collect();
                cells.push(ci(&acc)?);
            }
            let all: Vec<f64> = mine.iter().map(|r| r.query_accuracy).collect();
            cells.push(ci(&all)?);
            let path = mine.first().map(|r| r.path.clone()).filter(|p| mine.iter().all(|r| &r.path == p));
            rows.push(ReportRow { method: m, path, cells });
        }
        Ok(Self {
            domains: domains.to_vec(),
            rows,
        })
    }

    pub fn row(&self, m: Method) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == m)
    }

    /// Mean accuracy over all episodes.
    pub fn average(&self, m: Method) -> Option<f64> {
        self.row(m).and_then(|r| r.cells.last()).map(|c| c.0)
    }

    pub fn write_csv<W: Write>(&self, provenance: &str, mut w: W) -> Result<()> {
        w.write_all(provenance.as_bytes())?;
        let mut out = writer(w);
        let mut header = vec!["method".to_string(), "path_bits".to_string()];
        for d in self.domains.iter().map(String::as_str).chain(["average"]) {
            header.push(format!("{d}_mean"));
            header.push(format!("{d}_ci95"));
        }
        out.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                r.method.tag().to_string(),
                r.path.as_ref().map_or_else(|| "*".to_string(), PathEncoding::to_bit_string),
            ];
            for &(m, hw) in &r.cells {
                rec.push(fmt_f64(m));
                rec.push(fmt_f64(hw));
            }
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Fixed-width text table, accuracies in percent.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<14}", "method");
        for d in self.domains.iter().map(String::as_str).chain(["average"]) {
            s.push_str(&format!(" {d:>14}"));
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("{:<14}", r.method.label()));
            for &(m, hw) in &r.cells {
                s.push_str(&format!(" {:>14}", format!("{:.1}±{:.1}", 100.0 * m, 100.0 * hw)));
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::methods::Corner;

    fn rec(g: usize, bits: &str, f: f64) -> FitnessRecord {
        FitnessRecord {
            path: PathEncoding::parse(bits).unwrap(),
            fitness: f,
            generation: g,
        }
    }

    fn sample_history() -> SearchHistory {
        SearchHistory::from_evaluations(vec![
            rec(0, "1010", 0.4),
            rec(0, "0110", 0.7),
            rec(0, "1111", 0.1 + 0.2),
            rec(1, "1010", 0.9),
            rec(1, "0001", 0.2),
        ])
        .unwrap()
    }

    #[test]
    fn history_round_trip() {
        let h = sample_history();
        let mut buf = Vec::new();
        write_history(&h, "# seed = 1\n", &mut buf).unwrap();
        let back = read_history(buf.as_slice()).unwrap();
        assert_eq!(back, h);
        assert_eq!(back.generations().len(), 2);
        assert_eq!(back.best_fitness(&PathEncoding::parse("1010").unwrap()), Some(0.9));
    }

    #[test]
    fn snapshot_rows_and_order() {
        let h = sample_history();
        let mut buf = Vec::new();
        export_snapshots(&h, "# x = 1\n", &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
        assert_eq!(rows.len(), h.evaluations().len());
        assert_eq!(rows[0], "0,0110,0.7");
        assert_eq!(rows[3], "1,1010,0.9");
        assert!(rows.iter().all(|r| r.split(',').nth(1).unwrap().len() == 4));
        let mut again = Vec::new();
        export_snapshots(&h, "# x = 1\n", &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn empty_snapshot_is_an_error() {
        assert!(export_snapshots(&SearchHistory::new(), "", Vec::new()).is_err());
    }

    #[test]
    fn out_of_order_generations_are_rejected() {
        assert!(SearchHistory::from_evaluations(vec![rec(1, "10", 0.1), rec(0, "10", 0.1)]).is_err());
    }

    #[test]
    fn report_shape() {
        let methods: Vec<Method> = Corner::ALL
            .map(Method::Corner)
            .into_iter()
            .chain([Method::Nfts1, Method::NftsN])
            .collect();
        let domains = vec!["a".to_string(), "b".to_string()];
        let mut results = Vec::new();
        for (e, d) in [(0, "a"), (1, "a"), (0, "b"), (1, "b")] {
            for &m in &methods {
                results.push(EpisodeResult {
                    episode_id: e,
                    domain_id: d.into(),
                    method: m,
                    path: PathEncoding::all_ones(1),
                    support_loss: 0.5,
                    query_accuracy: e as f64,
                });
            }
        }
        let report = AblationReport::from_results(&methods, &domains, &results).unwrap();
        assert_eq!(report.rows.len(), 6);
        assert!(report.rows.iter().all(|r| r.cells.len() == 3));
        assert_eq!(report.average(Method::Nfts1), Some(0.5));
        let mut buf = Vec::new();
        report.write_csv("", &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 7);
        assert!(text.starts_with("method,path_bits,a_mean,a_ci95,b_mean,b_ci95,average_mean,average_ci95\n"));
    }
}
