use std::collections::HashMap;
use std::io::{Read, Write};

use super::{Job, Panel, PanelError, PanelSet};

const RESERVED: [&str; 4] = ["panel_id", "job_index", "a", "y"];

/// Reads panels from CSV.
///
/// The header must contain `panel_id`, `job_index`, `a`, `y` and every name in
/// `schema`. When `schema` is empty, all remaining columns are used as features in
/// header order. Panels keep the order in which their ids first appear; jobs are
/// sorted by `job_index`, which must run 1..K without gaps or repeats.
pub fn parse_panels<R: Read>(reader: R, schema: &[String]) -> Result<PanelSet, PanelError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| PanelError::MissingColumn(name.to_string()))
    };
    let id_col = find("panel_id")?;
    let idx_col = find("job_index")?;
    let a_col = find("a")?;
    let y_col = find("y")?;
    let feature_names: Vec<String> = if schema.is_empty() {
        header
            .iter()
            .filter(|h| !RESERVED.contains(h))
            .map(str::to_string)
            .collect()
    } else {
        schema.to_vec()
    };
    let feature_cols = feature_names
        .iter()
        .map(|n| find(n))
        .collect::<Result<Vec<_>, _>>()?;

    let mut order: Vec<String> = Vec::new();
    let mut grouped: HashMap<String, Vec<(u64, u64, Job)>> = HashMap::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| record.get(i).unwrap_or("");
        let number = |i: usize, column: &str| -> Result<f64, PanelError> {
            let raw = field(i);
            let v: f64 = raw.parse().map_err(|_| PanelError::Malformed {
                line,
                column: column.to_string(),
                value: raw.to_string(),
            })?;
            if !v.is_finite() {
                return Err(PanelError::NonFiniteValue {
                    line,
                    column: column.to_string(),
                    value: raw.to_string(),
                });
            }
            Ok(v)
        };

        let id = field(id_col).to_string();
        let raw_idx = field(idx_col);
        let job_index: u64 = raw_idx.parse().map_err(|_| PanelError::Malformed {
            line,
            column: "job_index".into(),
            value: raw_idx.to_string(),
        })?;
        let raw_a = field(a_col);
        let a = match raw_a.parse::<f64>() {
            Ok(0.0) => 0,
            Ok(1.0) => 1,
            _ => {
                return Err(PanelError::NonBinaryDecision {
                    line,
                    value: raw_a.to_string(),
                })
            }
        };
        let y = number(y_col, "y")?;
        let x = feature_cols
            .iter()
            .zip(&feature_names)
            .map(|(&c, name)| number(c, name))
            .collect::<Result<Vec<_>, _>>()?;

        let entry = grouped.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Vec::new()
        });
        entry.push((job_index, line, Job::new(x, a, y)));
    }

    let mut panels = Vec::with_capacity(order.len());
    for id in order {
        let mut jobs = grouped.remove(&id).unwrap_or_default();
        jobs.sort_by_key(|(k, _, _)| *k);
        for (expected, (k, line, _)) in jobs.iter().enumerate() {
            if *k != expected as u64 + 1 {
                return Err(PanelError::NonContiguousIndex {
                    panel: id,
                    line: *line,
                });
            }
        }
        panels.push(Panel::new(id, jobs.into_iter().map(|(_, _, j)| j).collect()));
    }
    PanelSet::new(panels, feature_names)
}

/// Writes panels in the CSV layout read by [`parse_panels`].
///
/// Numbers use the shortest representation that parses back to the same `f64`.
pub fn write_panels<W: Write>(panels: &PanelSet, writer: W) -> Result<(), PanelError> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = RESERVED.to_vec();
    header.extend(panels.column_names().iter().map(String::as_str));
    wtr.write_record(&header)?;
    let mut record: Vec<String> = Vec::with_capacity(header.len());
    for panel in panels.panels() {
        for (i, job) in panel.jobs.iter().enumerate() {
            record.clear();
            record.push(panel.id.clone());
            record.push((i + 1).to_string());
            record.push(job.a.to_string());
            record.push(format!("{:?}", job.y));
            record.extend(job.x.iter().map(|v| format!("{v:?}")));
            wtr.write_record(&record)?;
        }
    }
    wtr.flush().map_err(|e| PanelError::Csv(e.into()))?;
    Ok(())
}
