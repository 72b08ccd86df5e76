//! CSV exchange formats.
//!
//! Long format: `id,start,stop,event` followed by the time-independent and
//! then the time-dependent covariate columns. Each subject contributes one
//! row per visit covering `[visit, next visit)` up to the end of follow-up,
//! carrying the values recorded at the row's start; `event` is 1 on the row
//! whose `stop` is the treatment initiation time.
//!
//! Subject format: `id,T,Gamma,C,deltaC,Y`, with `inf` for times that were
//! not observed and an empty `Y` for censored subjects.

use std::collections::HashMap;
use std::io::{Read, Write};

use crate::data::{SubjectRecord, Trajectory};
use crate::error::{Error, Result};

pub const LONG_PREFIX: [&str; 4] = ["id", "start", "stop", "event"];
pub const SUBJECT_HEADER: [&str; 6] = ["id", "T", "Gamma", "C", "deltaC", "Y"];

fn fmt(v: f64) -> String {
    format!("{v}")
}

pub fn write_long_csv<W: Write>(
    subjects: &[SubjectRecord],
    ti_names: &[String],
    td_names: &[String],
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = LONG_PREFIX.iter().map(|s| s.to_string()).collect();
    header.extend(ti_names.iter().cloned());
    header.extend(td_names.iter().cloned());
    w.write_record(&header)?;
    for s in subjects {
        let traj = &s.trajectory;
        if traj.time_independent().len() != ti_names.len()
            || traj.n_time_dependent() != td_names.len()
        {
            return Err(Error::Schema(format!(
                "subject {}: covariate count differs from header",
                s.id
            )));
        }
        let times = traj.visit_times();
        for (j, &start) in times.iter().enumerate() {
            let stop = times.get(j + 1).copied().unwrap_or(s.followup_end);
            if stop <= start {
                continue;
            }
            let event = s.treated && s.treatment_time == stop;
            let mut rec = vec![
                s.id.clone(),
                fmt(start),
                fmt(stop),
                u8::from(event).to_string(),
            ];
            rec.extend(traj.time_independent().iter().map(|&v| fmt(v)));
            rec.extend(traj.covariates_at_visit()[j].iter().map(|&v| fmt(v)));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_subject_csv<W: Write>(subjects: &[SubjectRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUBJECT_HEADER)?;
    for s in subjects {
        w.write_record([
            s.id.clone(),
            fmt(s.treatment_time),
            u8::from(s.treated).to_string(),
            fmt(s.censor_time),
            u8::from(s.uncensored).to_string(),
            s.outcome.map(fmt).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn parse_num(field: &str, what: &str, line: u64) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| Error::Schema(format!("line {line}: {what} '{field}' is not a number")))
}

fn parse_flag(field: &str, what: &str, line: u64) -> Result<bool> {
    match field.trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(Error::Schema(format!(
            "line {line}: {what} '{other}' must be 0 or 1"
        ))),
    }
}

struct LongRow {
    start: f64,
    stop: f64,
    event: bool,
    ti: Vec<f64>,
    td: Vec<f64>,
}

struct SubjectRow {
    t: f64,
    gamma: bool,
    c: f64,
    delta_c: bool,
    y: Option<f64>,
}

fn column_positions(header: &csv::StringRecord, names: &[String]) -> Result<Vec<usize>> {
    names
        .iter()
        .map(|n| {
            header
                .iter()
                .position(|h| h == n)
                .ok_or_else(|| Error::Schema(format!("long-format file has no column '{n}'")))
        })
        .collect()
}

/// Reads a dataset from its long-format and subject-level CSVs. Subjects come
/// out in order of first appearance in the long file.
pub fn read_dataset<R1: Read, R2: Read>(
    long: R1,
    subjects: R2,
    tau: f64,
    ti_names: &[String],
    td_names: &[String],
) -> Result<Vec<SubjectRecord>> {
    let mut rdr = csv::Reader::from_reader(long);
    let header = rdr.headers()?.clone();
    if header.len() < 4 || header.iter().take(4).ne(LONG_PREFIX) {
        return Err(Error::Schema(format!(
            "long-format header must start with {}",
            LONG_PREFIX.join(",")
        )));
    }
    let ti_pos = column_positions(&header, ti_names)?;
    let td_pos = column_positions(&header, td_names)?;
    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<LongRow>> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let id = rec[0].to_string();
        let row = LongRow {
            start: parse_num(&rec[1], "start", line)?,
            stop: parse_num(&rec[2], "stop", line)?,
            event: parse_flag(&rec[3], "event", line)?,
            ti: ti_pos
                .iter()
                .map(|&p| parse_num(&rec[p], &header[p], line))
                .collect::<Result<_>>()?,
            td: td_pos
                .iter()
                .map(|&p| parse_num(&rec[p], &header[p], line))
                .collect::<Result<_>>()?,
        };
        if !(row.start < row.stop) {
            return Err(Error::Schema(format!(
                "line {line}: start must be before stop"
            )));
        }
        rows.entry(id.clone())
            .or_insert_with(|| {
                order.push(id);
                Vec::new()
            })
            .push(row);
    }

    let mut rdr = csv::Reader::from_reader(subjects);
    let header = rdr.headers()?.clone();
    if header.iter().ne(SUBJECT_HEADER) {
        return Err(Error::Schema(format!(
            "subject file header must be {}",
            SUBJECT_HEADER.join(",")
        )));
    }
    let mut info: HashMap<String, SubjectRow> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let y = rec[5].trim();
        let row = SubjectRow {
            t: parse_num(&rec[1], "T", line)?,
            gamma: parse_flag(&rec[2], "Gamma", line)?,
            c: parse_num(&rec[3], "C", line)?,
            delta_c: parse_flag(&rec[4], "deltaC", line)?,
            y: if y.is_empty() {
                None
            } else {
                Some(parse_num(y, "Y", line)?)
            },
        };
        if info.insert(rec[0].to_string(), row).is_some() {
            return Err(Error::Schema(format!(
                "line {line}: duplicate subject '{}'",
                &rec[0]
            )));
        }
    }
    if info.len() != order.len() {
        return Err(Error::Schema(format!(
            "{} subjects in the subject file but {} in the long file",
            info.len(),
            order.len()
        )));
    }

    order
        .into_iter()
        .map(|id| {
            let mut rs = rows.remove(&id).expect("grouped above");
            let si = info.remove(&id).ok_or_else(|| {
                Error::Schema(format!("subject '{id}' missing from the subject file"))
            })?;
            rs.sort_by(|a, b| a.start.total_cmp(&b.start));
            if rs.windows(2).any(|w| w[0].stop > w[1].start) {
                return Err(Error::Schema(format!("subject '{id}': overlapping rows")));
            }
            if rs.iter().any(|r| r.ti != rs[0].ti) {
                return Err(Error::Schema(format!(
                    "subject '{id}': time-independent covariate varies"
                )));
            }
            let event_stop: Vec<f64> = rs.iter().filter(|r| r.event).map(|r| r.stop).collect();
            let consistent = match (si.gamma, event_stop.as_slice()) {
                (true, [t]) => *t == si.t,
                (true, []) => si.t <= rs[0].start,
                (false, []) => true,
                _ => false,
            };
            if !consistent || si.gamma != si.t.is_finite() || si.delta_c != (si.c >= tau) {
                return Err(Error::Schema(format!(
                    "subject '{id}': event columns disagree"
                )));
            }
            let mut times: Vec<f64> = rs.iter().map(|r| r.start).collect();
            let mut values: Vec<Vec<f64>> = rs.iter().map(|r| r.td.clone()).collect();
            if si.gamma && !times.contains(&si.t) {
                // initiation at the end of follow-up has no row of its own
                let j = times.partition_point(|&t| t < si.t).saturating_sub(1);
                times.push(si.t);
                values.push(values[j].clone());
            }
            let traj = Trajectory::new(times, values, rs[0].ti.clone())?;
            SubjectRecord::new(id, traj, si.t, si.c, tau, si.y)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names() -> (Vec<String>, Vec<String>) {
        (vec!["L_TI".into()], vec!["L_TD".into()])
    }

    fn sample() -> Vec<SubjectRecord> {
        let t1 = Trajectory::new(
            vec![0.0, 0.5, 0.7],
            vec![vec![0.1], vec![-0.3], vec![-0.3]],
            vec![1.0],
        )
        .unwrap();
        let t2 = Trajectory::new(
            vec![0.0, 0.5, 1.0],
            vec![vec![1.25], vec![2.0], vec![0.5]],
            vec![0.0],
        )
        .unwrap();
        vec![
            SubjectRecord::new("1", t1, 0.7, f64::INFINITY, 2.0, Some(20.5)).unwrap(),
            SubjectRecord::new("2", t2, f64::INFINITY, 1.3, 2.0, None).unwrap(),
        ]
    }

    #[test]
    fn round_trip() {
        let (ti, td) = names();
        let subjects = sample();
        let mut long = Vec::new();
        let mut subj = Vec::new();
        write_long_csv(&subjects, &ti, &td, &mut long).unwrap();
        write_subject_csv(&subjects, &mut subj).unwrap();
        let text = String::from_utf8(long.clone()).unwrap();
        assert!(text
            .starts_with("id,start,stop,event,L_TI,L_TD\n1,0,0.5,0,1,0.1\n1,0.5,0.7,1,1,-0.3\n"));
        let back = read_dataset(&long[..], &subj[..], 2.0, &ti, &td).unwrap();
        assert_eq!(back, subjects);
    }

    #[test]
    fn schema_errors() {
        let (ti, td) = names();
        let subj = "id,T,Gamma,C,deltaC,Y\n1,inf,0,inf,1,3\n";
        let bad_header = "id,begin,stop,event,L_TI,L_TD\n1,0,2,0,1,1\n";
        assert!(matches!(
            read_dataset(bad_header.as_bytes(), subj.as_bytes(), 2.0, &ti, &td),
            Err(Error::Schema(_))
        ));
        let missing_col = "id,start,stop,event,L_TI\n1,0,2,0,1\n";
        assert!(matches!(
            read_dataset(missing_col.as_bytes(), subj.as_bytes(), 2.0, &ti, &td),
            Err(Error::Schema(_))
        ));
        let good = "id,start,stop,event,L_TI,L_TD\n1,0,2,0,1,1\n";
        assert_eq!(
            read_dataset(good.as_bytes(), subj.as_bytes(), 2.0, &ti, &td)
                .unwrap()
                .len(),
            1
        );
        let wrong_event = "id,start,stop,event,L_TI,L_TD\n1,0,2,1,1,1\n";
        assert!(matches!(
            read_dataset(wrong_event.as_bytes(), subj.as_bytes(), 2.0, &ti, &td),
            Err(Error::Schema(_))
        ));
        let not_number = "id,start,stop,event,L_TI,L_TD\n1,0,2,0,x,1\n";
        assert!(matches!(
            read_dataset(not_number.as_bytes(), subj.as_bytes(), 2.0, &ti, &td),
            Err(Error::Schema(_))
        ));
    }
}
