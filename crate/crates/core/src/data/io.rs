use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::{RawDataset, RawSeries};
use crate::error::{Error, Result};

/// Reads a samples CSV (`series_id,t,<features...>`, empty field = missing)
/// and an optional labels CSV (`series_id,label`). Series come back sorted
/// by id with time steps ascending.
pub fn read_csv<R: Read, L: Read>(samples: R, labels: Option<L>) -> Result<RawDataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(samples);
    let header = reader.headers()?.clone();
    if header.len() < 3 || &header[0] != "series_id" || &header[1] != "t" {
        return Err(Error::Format(
            "samples header must be `series_id,t,<feature names>`".into(),
        ));
    }
    let feature_names: Vec<String> = header.iter().skip(2).map(str::to_string).collect();
    let m = feature_names.len();

    let mut grouped: BTreeMap<String, BTreeMap<i64, Vec<Option<f64>>>> = BTreeMap::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != m + 2 {
            return Err(Error::Format(format!(
                "row {} has {} fields, expected {}",
                line + 2,
                record.len(),
                m + 2
            )));
        }
        let id = record[0].to_string();
        let t: i64 = record[1]
            .trim()
            .parse()
            .map_err(|_| Error::Format(format!("row {}: bad time step {:?}", line + 2, &record[1])))?;
        let values = record
            .iter()
            .skip(2)
            .map(|f| {
                let f = f.trim();
                if f.is_empty() {
                    Ok(None)
                } else {
                    f.parse::<f64>()
                        .map(Some)
                        .map_err(|_| Error::Format(format!("row {}: bad value {f:?}", line + 2)))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let steps = grouped.entry(id.clone()).or_default();
        if steps.insert(t, values).is_some() {
            return Err(Error::Format(format!("duplicate row for series {id} at t={t}")));
        }
    }

    let mut series: Vec<RawSeries> = grouped
        .into_iter()
        .map(|(series_id, rows)| {
            let steps = rows.keys().copied().collect();
            let values = rows.into_values().flatten().collect();
            RawSeries {
                series_id,
                steps,
                values,
                label: None,
            }
        })
        .collect();

    if let Some(labels) = labels {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(labels);
        let header = reader.headers()?.clone();
        if header.len() != 2 || &header[0] != "series_id" || &header[1] != "label" {
            return Err(Error::Format("labels header must be `series_id,label`".into()));
        }
        let mut seen = HashSet::new();
        for record in reader.records() {
            let record = record?;
            let id = &record[0];
            let label: usize = record[1]
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("bad label {:?} for {id}", &record[1])))?;
            if !seen.insert(id.to_string()) {
                return Err(Error::Format(format!("series {id} labeled twice")));
            }
            let s = series
                .binary_search_by(|s| s.series_id.as_str().cmp(id))
                .map_err(|_| Error::Format(format!("label references unknown series {id}")))?;
            series[s].label = Some(label);
        }
    }

    Ok(RawDataset {
        feature_names,
        series,
    })
}

pub fn load_csv(samples_path: &Path, labels_path: Option<&Path>) -> Result<RawDataset> {
    let samples = File::open(samples_path)?;
    let labels = labels_path.map(File::open).transpose()?;
    read_csv(samples, labels)
}

/// Writes `raw` in the format [`read_csv`] accepts. Labels are written only
/// when `labels` is given, one row per labeled series.
pub fn write_csv<W: Write, L: Write>(raw: &RawDataset, samples: W, labels: Option<L>) -> Result<()> {
    let mut w = csv::Writer::from_writer(samples);
    let mut header = vec!["series_id".to_string(), "t".to_string()];
    header.extend(raw.feature_names.iter().cloned());
    w.write_record(&header)?;
    let m = raw.channels();
    for s in &raw.series {
        for (k, t) in s.steps.iter().enumerate() {
            let mut row = vec![s.series_id.clone(), t.to_string()];
            row.extend(
                s.values[k * m..(k + 1) * m]
                    .iter()
                    .map(|v| v.map(|x| x.to_string()).unwrap_or_default()),
            );
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    if let Some(labels) = labels {
        let mut lw = csv::Writer::from_writer(labels);
        lw.write_record(["series_id", "label"])?;
        for s in &raw.series {
            if let Some(label) = s.label {
                lw.write_record([s.series_id.as_str(), &label.to_string()])?;
            }
        }
        lw.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read(samples: &str, labels: Option<&str>) -> Result<RawDataset> {
        read_csv(samples.as_bytes(), labels.map(str::as_bytes))
    }

    #[test]
    fn fully_observed_series() {
        let raw = read("series_id,t,hr\na,0,1.5\na,1,2.5\n", None).unwrap();
        assert_eq!(raw.feature_names, ["hr"]);
        assert_eq!(raw.series.len(), 1);
        assert_eq!(raw.series[0].values, vec![Some(1.5), Some(2.5)]);
    }

    #[test]
    fn empty_field_is_missing() {
        let raw = read("series_id,t,hr,sbp\na,0,1,\na,1,,3\n", None).unwrap();
        assert_eq!(raw.series[0].values, vec![Some(1.0), None, None, Some(3.0)]);
    }

    #[test]
    fn row_order_does_not_matter() {
        let sorted = "series_id,t,x\na,0,1\na,1,2\nb,0,3\nb,1,4\n";
        let shuffled = "series_id,t,x\nb,1,4\na,1,2\nb,0,3\na,0,1\n";
        assert_eq!(read(sorted, None).unwrap(), read(shuffled, None).unwrap());
    }

    #[test]
    fn duplicate_step_is_rejected() {
        assert!(matches!(
            read("series_id,t,x\na,0,1\na,0,2\n", None),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn labels_attach_and_unknown_ids_fail() {
        let samples = "series_id,t,x\na,0,1\nb,0,2\n";
        let raw = read(samples, Some("series_id,label\nb,1\n")).unwrap();
        assert_eq!(raw.series[0].label, None);
        assert_eq!(raw.series[1].label, Some(1));
        assert!(matches!(
            read(samples, Some("series_id,label\nzz,1\n")),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn write_then_read() {
        let raw = read(
            "series_id,t,x,y\na,0,1.25,\na,3,,-2\nb,1,0.1,0.2\n",
            Some("series_id,label\na,0\nb,1\n"),
        )
        .unwrap();
        let (mut s, mut l) = (Vec::new(), Vec::new());
        write_csv(&raw, &mut s, Some(&mut l)).unwrap();
        assert_eq!(read_csv(s.as_slice(), Some(l.as_slice())).unwrap(), raw);
    }
}
