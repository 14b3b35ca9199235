//! CSV files written by `dpc run` and read back by `dpc plot`.
//!
//! | file               | columns                                         |
//! |--------------------|-------------------------------------------------|
//! | `trajectories.csv` | `agent,k,y1,y2`                                 |
//! | `metrics.csv`      | one row per agent and step, see [`write_metrics`] |
//! | `global_w.csv`     | `k,w2,subsampled`                               |
//! | `reference.csv`    | `x,y,weight`                                    |
//!
//! Floats are written in shortest round-trip form, so reading a file back
//! reproduces the in-memory values exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::distribution::SampleCloud;
use crate::engine::{GlobalWRecord, RunResult, StageTimes, StepRecord};
use crate::{Error, Point, Result};

pub const TRAJECTORIES: &str = "trajectories.csv";
pub const METRICS: &str = "metrics.csv";
pub const GLOBAL_W: &str = "global_w.csv";
pub const REFERENCE: &str = "reference.csv";

fn num(v: f64) -> String {
    format!("{v:?}")
}

fn flag(b: bool) -> &'static str {
    if b {
        "true"
    } else {
        "false"
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w)
}

pub fn write_trajectories<W: Write>(w: W, result: &RunResult) -> Result<()> {
    let mut out = csv_writer(w);
    out.write_record(["agent", "k", "y1", "y2"])?;
    for rec in &result.records {
        out.write_record([rec.agent.to_string(), rec.k.to_string(), num(rec.y.x), num(rec.y.y)])?;
    }
    out.flush().map_err(|e| Error::io("trajectories", e))?;
    Ok(())
}

fn metrics_header(m: usize) -> Vec<String> {
    let mut h: Vec<String> = vec!["agent".into(), "k".into()];
    h.extend((1..=m).map(|i| format!("u{i}")));
    h.extend((1..=m).map(|i| format!("u_free{i}")));
    h.extend(
        [
            "delta_w",
            "delta_w_free",
            "local_w",
            "local_w_ahead",
            "in_range",
            "range_nonempty",
            "comm_events",
            "stageA_ms",
            "stageB_ms",
            "stageC_ms",
            "bound_violation",
            "window_violation",
            "constraint_active",
            "exhausted",
            "y1",
            "y2",
        ]
        .map(String::from),
    );
    for i in 1..=m {
        h.extend((1..=m).map(|j| format!("d1_{i}{j}")));
    }
    h.extend((1..=m).map(|i| format!("d2_{i}")));
    h.push("d3".into());
    h
}

/// Writes `metrics.csv`. With `m` inputs the columns are
/// `agent,k,u1..um,u_free1..u_freem,delta_w,delta_w_free,local_w,
/// local_w_ahead,in_range,range_nonempty,comm_events,stageA_ms,stageB_ms,
/// stageC_ms,bound_violation,window_violation,constraint_active,exhausted,
/// y1,y2,d1_11..d1_mm,d2_1..d2_m,d3`. Timing cells are empty unless timings
/// were recorded.
pub fn write_metrics<W: Write>(w: W, records: &[StepRecord]) -> Result<()> {
    let m = records.first().map_or(0, |r| r.u.len());
    let mut out = csv_writer(w);
    out.write_record(metrics_header(m))?;
    for r in records {
        if r.u.len() != m {
            return Err(Error::invalid("metrics: agents differ in input dimension"));
        }
        let mut row: Vec<String> = vec![r.agent.to_string(), r.k.to_string()];
        row.extend(r.u.iter().copied().map(num));
        row.extend(r.u_unconstrained.iter().copied().map(num));
        row.extend([
            num(r.delta_w),
            num(r.delta_w_unconstrained),
            num(r.local_w),
            opt(r.local_w_ahead),
            flag(r.in_range).into(),
            flag(r.range_nonempty).into(),
            r.comm_events.to_string(),
            opt(r.timings.map(|t| t.stage_a_ms)),
            opt(r.timings.map(|t| t.stage_b_ms)),
            opt(r.timings.map(|t| t.stage_c_ms)),
            flag(r.bound_violation).into(),
            flag(r.window_violation).into(),
            flag(r.constraint_active).into(),
            flag(r.exhausted).into(),
            num(r.y.x),
            num(r.y.y),
        ]);
        row.extend(r.d1.iter().copied().map(num));
        row.extend(r.d2.iter().copied().map(num));
        row.push(num(r.d3));
        out.write_record(row)?;
    }
    out.flush().map_err(|e| Error::io("metrics", e))?;
    Ok(())
}

pub fn write_global_w<W: Write>(w: W, series: &[GlobalWRecord]) -> Result<()> {
    let mut out = csv_writer(w);
    out.write_record(["k", "w2", "subsampled"])?;
    for g in series {
        out.write_record([g.k.to_string(), num(g.w2), flag(g.subsampled).into()])?;
    }
    out.flush().map_err(|e| Error::io("global_w", e))?;
    Ok(())
}

pub fn write_reference<W: Write>(w: W, cloud: &SampleCloud) -> Result<()> {
    let mut out = csv_writer(w);
    out.write_record(["x", "y", "weight"])?;
    for (p, wt) in cloud.positions().iter().zip(cloud.weights()) {
        out.write_record([num(p.x), num(p.y), num(*wt)])?;
    }
    out.flush().map_err(|e| Error::io("reference", e))?;
    Ok(())
}

/// Writes all run outputs into `dir`. Files are staged in a scratch
/// directory and moved into place only once every file is complete.
pub fn write_run(dir: &Path, result: &RunResult, reference: &SampleCloud) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let staging = dir.join(".dpc-partial");
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    fs::create_dir(&staging).map_err(|e| Error::io(&staging, e))?;
    let written = (|| -> Result<Vec<&str>> {
        let create = |name: &str| -> Result<std::io::BufWriter<fs::File>> {
            let p = staging.join(name);
            Ok(std::io::BufWriter::new(
                fs::File::create(&p).map_err(|e| Error::io(p, e))?,
            ))
        };
        write_trajectories(create(TRAJECTORIES)?, result)?;
        write_metrics(create(METRICS)?, &result.records)?;
        write_global_w(create(GLOBAL_W)?, &result.global_w)?;
        write_reference(create(REFERENCE)?, reference)?;
        Ok(vec![TRAJECTORIES, METRICS, GLOBAL_W, REFERENCE])
    })();
    let moved = written.and_then(|names| {
        for name in names {
            fs::rename(staging.join(name), dir.join(name)).map_err(|e| Error::io(dir.join(name), e))?;
        }
        Ok(())
    });
    let _ = fs::remove_dir_all(&staging);
    moved
}

fn open(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

fn parse<T: std::str::FromStr>(rec: &csv::StringRecord, idx: usize, what: &str) -> Result<T> {
    rec.get(idx).and_then(|s| s.trim().parse().ok()).ok_or_else(|| {
        Error::invalid(format!(
            "bad or missing `{what}` in row {:?}",
            rec.position().map(|p| p.line())
        ))
    })
}

fn parse_opt(rec: &csv::StringRecord, idx: usize, what: &str) -> Result<Option<f64>> {
    match rec.get(idx).map(str::trim) {
        Some("") | None => Ok(None),
        Some(_) => parse(rec, idx, what).map(Some),
    }
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::invalid(format!("missing column `{name}`")))
}

/// `(agent, k, y)` rows of `trajectories.csv`.
pub fn read_trajectories(path: &Path) -> Result<Vec<(usize, usize, Point)>> {
    let mut rd = open(path)?;
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        out.push((
            parse(&rec, 0, "agent")?,
            parse(&rec, 1, "k")?,
            Point::new(parse(&rec, 2, "y1")?, parse(&rec, 3, "y2")?),
        ));
    }
    Ok(out)
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let mut rd = open(path)?;
    let headers = rd.headers()?.clone();
    let m = headers
        .iter()
        .filter(|h| h.starts_with('u') && h[1..].parse::<usize>().is_ok())
        .count();
    let col = |name: &str| column(&headers, name);
    let (c_dw, c_dwf, c_lw, c_lwa) = (
        col("delta_w")?,
        col("delta_w_free")?,
        col("local_w")?,
        col("local_w_ahead")?,
    );
    let (c_in, c_ne, c_ce) = (col("in_range")?, col("range_nonempty")?, col("comm_events")?);
    let (c_ta, c_tb, c_tc) = (col("stageA_ms")?, col("stageB_ms")?, col("stageC_ms")?);
    let (c_bv, c_wv, c_ca, c_ex) = (
        col("bound_violation")?,
        col("window_violation")?,
        col("constraint_active")?,
        col("exhausted")?,
    );
    let (c_y1, c_y2, c_d3) = (col("y1")?, col("y2")?, col("d3")?);
    let c_u = col("u1").ok();
    let c_uf = col("u_free1").ok();
    let c_d1 = col("d1_11").ok();
    let c_d2 = col("d2_1").ok();
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let vec_at = |start: Option<usize>, len: usize, what: &str| -> Result<Vec<f64>> {
            match start {
                None => Ok(Vec::new()),
                Some(s) => (s..s + len).map(|i| parse(&rec, i, what)).collect(),
            }
        };
        let times = match (
            parse_opt(&rec, c_ta, "stageA_ms")?,
            parse_opt(&rec, c_tb, "stageB_ms")?,
            parse_opt(&rec, c_tc, "stageC_ms")?,
        ) {
            (Some(a), Some(b), Some(c)) => Some(StageTimes {
                stage_a_ms: a,
                stage_b_ms: b,
                stage_c_ms: c,
            }),
            _ => None,
        };
        out.push(StepRecord {
            agent: parse(&rec, 0, "agent")?,
            k: parse(&rec, 1, "k")?,
            y: Point::new(parse(&rec, c_y1, "y1")?, parse(&rec, c_y2, "y2")?),
            u: vec_at(c_u, m, "u")?,
            u_unconstrained: vec_at(c_uf, m, "u_free")?,
            delta_w: parse(&rec, c_dw, "delta_w")?,
            delta_w_unconstrained: parse(&rec, c_dwf, "delta_w_free")?,
            local_w: parse(&rec, c_lw, "local_w")?,
            local_w_ahead: parse_opt(&rec, c_lwa, "local_w_ahead")?,
            in_range: parse(&rec, c_in, "in_range")?,
            range_nonempty: parse(&rec, c_ne, "range_nonempty")?,
            comm_events: parse(&rec, c_ce, "comm_events")?,
            timings: times,
            bound_violation: parse(&rec, c_bv, "bound_violation")?,
            window_violation: parse(&rec, c_wv, "window_violation")?,
            constraint_active: parse(&rec, c_ca, "constraint_active")?,
            exhausted: parse(&rec, c_ex, "exhausted")?,
            d1: vec_at(c_d1, m * m, "d1")?,
            d2: vec_at(c_d2, m, "d2")?,
            d3: parse(&rec, c_d3, "d3")?,
        });
    }
    Ok(out)
}

pub fn read_global_w(path: &Path) -> Result<Vec<GlobalWRecord>> {
    let mut rd = open(path)?;
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        out.push(GlobalWRecord {
            k: parse(&rec, 0, "k")?,
            w2: parse(&rec, 1, "w2")?,
            subsampled: parse(&rec, 2, "subsampled")?,
        });
    }
    Ok(out)
}

pub fn read_reference(path: &Path) -> Result<Vec<(Point, f64)>> {
    let mut rd = open(path)?;
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        out.push((
            Point::new(parse(&rec, 0, "x")?, parse(&rec, 1, "y")?),
            parse(&rec, 2, "weight")?,
        ));
    }
    Ok(out)
}
