//! Panel data: subjects, their time-ordered trips, and CSV interchange.
//!
//! A panel is one CSV file with a header row and one row per trip. The
//! required columns are `subject,time,offset,count`; an optional
//! `trip_index` column fixes the order of trips recorded at the same time.
//! Subject-level covariates are repeated on every row of a subject and must
//! be constant within it.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One trip: exposure, trip-level covariates and the observed event count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripRecord {
    /// 1-based ordinal within the subject.
    pub trip_index: u32,
    /// Trip time, rescaled to `[0, 1]`.
    pub time: f64,
    /// Exposure (mileage), strictly positive.
    pub offset: f64,
    /// Trip-level covariates `X_ij`.
    pub covariates: Vec<f64>,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: String,
    /// Subject-level covariates `Z_i`.
    pub covariates: Vec<f64>,
    /// Trips sorted by `(time, trip_index)`.
    pub trips: Vec<TripRecord>,
}

impl Subject {
    pub fn len(&self) -> usize {
        self.trips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trips.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.trips.iter().map(|t| t.time).collect()
    }

    pub fn total_count(&self) -> u64 {
        self.trips.iter().map(|t| t.count).sum()
    }
}

/// A validated, immutable collection of subjects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Panel {
    subjects: Vec<Subject>,
    z_names: Vec<String>,
    x_names: Vec<String>,
}

impl Panel {
    /// Builds a panel, checking every structural invariant.
    pub fn new(subjects: Vec<Subject>, z_names: Vec<String>, x_names: Vec<String>) -> Result<Self> {
        let p_z = z_names.len();
        let p_x = x_names.len();
        let mut seen = HashMap::with_capacity(subjects.len());
        for s in &subjects {
            if seen.insert(s.id.as_str(), ()).is_some() {
                return Err(Error::InvalidPanel(format!("duplicate subject id `{}`", s.id)));
            }
            if s.trips.is_empty() {
                return Err(Error::InvalidPanel(format!("subject `{}` has no trips", s.id)));
            }
            if s.covariates.len() != p_z || s.covariates.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidPanel(format!(
                    "subject `{}`: expected {p_z} finite subject covariates",
                    s.id
                )));
            }
            for (j, t) in s.trips.iter().enumerate() {
                check_trip(t).map_err(|m| Error::InvalidPanel(format!("subject `{}` trip {}: {m}", s.id, j + 1)))?;
                if t.covariates.len() != p_x {
                    return Err(Error::InvalidPanel(format!(
                        "subject `{}` trip {}: expected {p_x} trip covariates",
                        s.id,
                        j + 1
                    )));
                }
            }
            for w in s.trips.windows(2) {
                let ordered = w[0].time < w[1].time
                    || (w[0].time == w[1].time && w[0].trip_index < w[1].trip_index);
                if !ordered {
                    return Err(Error::InvalidPanel(format!(
                        "subject `{}`: trips not sorted by (time, trip_index)",
                        s.id
                    )));
                }
            }
        }
        Ok(Panel {
            subjects,
            z_names,
            x_names,
        })
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    /// Total number of trips `N`.
    pub fn n_obs(&self) -> usize {
        self.subjects.iter().map(Subject::len).sum()
    }

    pub fn p_z(&self) -> usize {
        self.z_names.len()
    }

    pub fn p_x(&self) -> usize {
        self.x_names.len()
    }

    pub fn z_names(&self) -> &[String] {
        &self.z_names
    }

    pub fn x_names(&self) -> &[String] {
        &self.x_names
    }

    pub fn min_trips(&self) -> usize {
        self.subjects.iter().map(Subject::len).min().unwrap_or(0)
    }

    /// Returns a panel with every offset multiplied by `factor`.
    pub fn with_scaled_offsets(&self, factor: f64) -> Result<Panel> {
        let mut subjects = self.subjects.clone();
        for s in &mut subjects {
            for t in &mut s.trips {
                t.offset *= factor;
            }
        }
        Panel::new(subjects, self.z_names.clone(), self.x_names.clone())
    }
}

fn check_trip(t: &TripRecord) -> std::result::Result<(), String> {
    if !(t.offset > 0.0 && t.offset.is_finite()) {
        return Err(format!("offset must be positive, got {}", t.offset));
    }
    if !(0.0..=1.0).contains(&t.time) {
        return Err(format!("time must lie in [0, 1], got {}", t.time));
    }
    if t.covariates.iter().any(|v| !v.is_finite()) {
        return Err("non-finite trip covariate".into());
    }
    Ok(())
}

/// Column names used when reading a panel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PanelSchema {
    pub subject: String,
    pub time: String,
    pub offset: String,
    pub count: String,
    /// Used when present in the header; otherwise trips are numbered in
    /// time order (file order breaks ties).
    pub trip_index: String,
    pub z_cols: Vec<String>,
    pub x_cols: Vec<String>,
}

impl Default for PanelSchema {
    fn default() -> Self {
        PanelSchema {
            subject: "subject".into(),
            time: "time".into(),
            offset: "offset".into(),
            count: "count".into(),
            trip_index: "trip_index".into(),
            z_cols: Vec::new(),
            x_cols: Vec::new(),
        }
    }
}

impl PanelSchema {
    pub fn with_covariates(z_cols: Vec<String>, x_cols: Vec<String>) -> Self {
        PanelSchema {
            z_cols,
            x_cols,
            ..PanelSchema::default()
        }
    }
}

/// Reads a panel from a CSV file.
pub fn load_panel(path: impl AsRef<Path>, schema: &PanelSchema) -> Result<Panel> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_panel(file, schema)
}

/// Reads a panel from any CSV source. Row numbers in errors count data rows
/// from 1, excluding the header.
pub fn read_panel<R: Read>(reader: R, schema: &PanelSchema) -> Result<Panel> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let c_subject = col(&schema.subject)?;
    let c_time = col(&schema.time)?;
    let c_offset = col(&schema.offset)?;
    let c_count = col(&schema.count)?;
    let c_index = headers.iter().position(|h| h == schema.trip_index);
    let c_z = schema.z_cols.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;
    let c_x = schema.x_cols.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;

    struct Pending {
        row: usize,
        index: Option<u32>,
        trip: TripRecord,
    }
    let mut order: Vec<String> = Vec::new();
    let mut by_subject: HashMap<String, (Vec<f64>, usize, Vec<Pending>)> = HashMap::new();

    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let real = |c: usize, name: &str| -> Result<f64> {
            field(c).parse::<f64>().map_err(|_| Error::Row {
                row,
                message: format!("column `{name}`: `{}` is not a number", field(c)),
            })
        };
        let id = field(c_subject).to_string();
        if id.is_empty() {
            return Err(Error::Row {
                row,
                message: "empty subject id".into(),
            });
        }
        let time = real(c_time, &schema.time)?;
        let offset = real(c_offset, &schema.offset)?;
        let count = parse_count(field(c_count)).ok_or_else(|| Error::Row {
            row,
            message: format!("column `{}`: `{}` is not a nonnegative integer", schema.count, field(c_count)),
        })?;
        let index = match c_index {
            Some(c) => Some(field(c).parse::<u32>().map_err(|_| Error::Row {
                row,
                message: format!("column `{}`: `{}` is not a positive integer", schema.trip_index, field(c)),
            })?),
            None => None,
        };
        let z = c_z
            .iter()
            .zip(&schema.z_cols)
            .map(|(&c, n)| real(c, n))
            .collect::<Result<Vec<_>>>()?;
        let x = c_x
            .iter()
            .zip(&schema.x_cols)
            .map(|(&c, n)| real(c, n))
            .collect::<Result<Vec<_>>>()?;
        let trip = TripRecord {
            trip_index: index.unwrap_or(0),
            time,
            offset,
            covariates: x,
            count,
        };
        check_trip(&trip).map_err(|message| Error::Row { row, message })?;

        let entry = by_subject.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            (z.clone(), row, Vec::new())
        });
        if entry.0 != z {
            return Err(Error::Row {
                row,
                message: format!(
                    "subject `{id}`: subject-level covariates differ from row {}",
                    entry.1
                ),
            });
        }
        entry.2.push(Pending { row, index, trip });
    }

    let mut subjects = Vec::with_capacity(order.len());
    for id in order {
        let (z, _, mut pending) = by_subject.remove(&id).expect("subject recorded in order");
        let explicit = c_index.is_some();
        // stable: ties keep file order when no index column is present
        pending.sort_by(|a, b| {
            a.trip
                .time
                .total_cmp(&b.trip.time)
                .then_with(|| a.index.cmp(&b.index))
        });
        if !explicit {
            for (j, p) in pending.iter_mut().enumerate() {
                p.trip.trip_index = (j + 1) as u32;
            }
        }
        for w in pending.windows(2) {
            if w[0].trip.time == w[1].trip.time && w[0].trip.trip_index == w[1].trip.trip_index {
                return Err(Error::Row {
                    row: w[1].row,
                    message: format!(
                        "duplicate (subject, time, trip_index) = ({id}, {}, {})",
                        w[1].trip.time, w[1].trip.trip_index
                    ),
                });
            }
        }
        subjects.push(Subject {
            id,
            covariates: z,
            trips: pending.into_iter().map(|p| p.trip).collect(),
        });
    }
    Panel::new(subjects, schema.z_cols.clone(), schema.x_cols.clone())
}

fn parse_count(s: &str) -> Option<u64> {
    if let Ok(v) = s.parse::<u64>() {
        return Some(v);
    }
    let v = s.parse::<f64>().ok()?;
    (v >= 0.0 && v.fract() == 0.0 && v < 9.0e15).then_some(v as u64)
}

/// Formats a real with 17 significant digits, enough to round-trip any f64.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes a panel as CSV to `path`.
pub fn write_panel(panel: &Panel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_panel_to(panel, std::io::BufWriter::new(file))
}

/// Writes a panel as CSV to any sink. Columns are
/// `subject,trip_index,time,offset,count`, then the subject covariates, then
/// the trip covariates.
pub fn write_panel_to<W: Write>(panel: &Panel, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = vec!["subject", "trip_index", "time", "offset", "count"];
    header.extend(panel.z_names.iter().map(String::as_str));
    header.extend(panel.x_names.iter().map(String::as_str));
    w.write_record(&header)?;
    let mut row: Vec<String> = Vec::with_capacity(header.len());
    for s in &panel.subjects {
        for t in &s.trips {
            row.clear();
            row.push(s.id.clone());
            row.push(t.trip_index.to_string());
            row.push(fmt_real(t.time));
            row.push(fmt_real(t.offset));
            row.push(t.count.to_string());
            row.extend(s.covariates.iter().map(|&v| fmt_real(v)));
            row.extend(t.covariates.iter().map(|&v| fmt_real(v)));
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::io("<panel output>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read(s: &str, schema: &PanelSchema) -> Result<Panel> {
        read_panel(s.as_bytes(), schema)
    }

    #[test]
    fn minimal_three_row_panel() {
        let csv = "subject,time,offset,count\nA,0.1,1.0,0\nA,0.5,2.0,2\nA,0.9,1.5,1\n";
        let p = read(csv, &PanelSchema::default()).unwrap();
        assert_eq!(p.n_subjects(), 1);
        assert_eq!(p.n_obs(), 3);
        let counts: Vec<u64> = p.subjects()[0].trips.iter().map(|t| t.count).collect();
        assert_eq!(counts, vec![0, 2, 1]);
        let idx: Vec<u32> = p.subjects()[0].trips.iter().map(|t| t.trip_index).collect();
        assert_eq!(idx, vec![1, 2, 3]);
    }

    #[test]
    fn zero_offset_names_the_row() {
        let csv = "subject,time,offset,count\n\
                   A,0.1,1,0\nA,0.2,1,0\nA,0.3,1,0\nA,0.4,1,0\nA,0.5,0,1\n";
        let err = read(csv, &PanelSchema::default()).unwrap_err();
        match err {
            Error::Row { row, ref message } => {
                assert_eq!(row, 5);
                assert!(message.contains("offset"));
            }
            other => panic!("unexpected error {other}"),
        }
        assert!(err.to_string().contains("row 5"));
    }

    #[test]
    fn shuffled_rows_are_sorted_within_subject() {
        let shuffled = "subject,time,offset,count,x\n\
            B,0.7,1,3,7\nA,0.4,2,1,4\nB,0.1,1,0,1\nA,0.2,1,0,2\nB,0.3,1,1,3\nA,0.9,1,2,9\nB,0.5,3,0,5\nA,0.6,1,1,6\n";
        let sorted = "subject,time,offset,count,x\n\
            B,0.1,1,0,1\nB,0.3,1,1,3\nB,0.5,3,0,5\nB,0.7,1,3,7\n\
            A,0.2,1,0,2\nA,0.4,2,1,4\nA,0.6,1,1,6\nA,0.9,1,2,9\n";
        let schema = PanelSchema::with_covariates(vec![], vec!["x".into()]);
        let a = read(shuffled, &schema).unwrap();
        let b = read(sorted, &schema).unwrap();
        assert_eq!(a, b);
        for s in a.subjects() {
            assert!(s.trips.windows(2).all(|w| w[0].time < w[1].time));
        }
    }

    #[test]
    fn errors_for_bad_input() {
        let schema = PanelSchema::default();
        assert!(matches!(
            read("subject,time,count\nA,0.1,1\n", &schema),
            Err(Error::MissingColumn(c)) if c == "offset"
        ));
        assert!(matches!(
            read("subject,time,offset,count\nA,abc,1,1\n", &schema),
            Err(Error::Row { row: 1, .. })
        ));
        assert!(matches!(
            read("subject,time,offset,count\nA,1.5,1,1\n", &schema),
            Err(Error::Row { row: 1, .. })
        ));
        assert!(matches!(
            read("subject,time,offset,count\nA,0.5,1,-1\n", &schema),
            Err(Error::Row { row: 1, .. })
        ));
        let dup = "subject,trip_index,time,offset,count\nA,1,0.5,1,1\nA,1,0.5,1,2\n";
        assert!(matches!(read(dup, &schema), Err(Error::Row { row: 2, .. })));
    }

    #[test]
    fn inconsistent_subject_covariate_is_rejected() {
        let schema = PanelSchema::with_covariates(vec!["z".into()], vec![]);
        let csv = "subject,time,offset,count,z\nA,0.1,1,0,1\nA,0.2,1,0,0\n";
        assert!(matches!(read(csv, &schema), Err(Error::Row { row: 2, .. })));
    }

    #[test]
    fn equal_times_are_ordered_by_trip_index() {
        let csv = "subject,trip_index,time,offset,count\nA,2,0.5,1,7\nA,1,0.5,1,3\n";
        let p = read(csv, &PanelSchema::default()).unwrap();
        let counts: Vec<u64> = p.subjects()[0].trips.iter().map(|t| t.count).collect();
        assert_eq!(counts, vec![3, 7]);
    }

    #[test]
    fn three_row_round_trip() {
        let csv = "subject,time,offset,count\nA,0.1,1.0,0\nA,0.5,2.0,2\nA,0.9,1.5,1\n";
        let p = read(csv, &PanelSchema::default()).unwrap();
        let mut buf = Vec::new();
        write_panel_to(&p, &mut buf).unwrap();
        let q = read_panel(buf.as_slice(), &PanelSchema::default()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let csv = "subject,time,offset,count\nA,0.1,1.0,0\n";
        let p = read(csv, &PanelSchema::default()).unwrap();
        let err = write_panel(&p, "/nonexistent-dir/x/panel.csv").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
