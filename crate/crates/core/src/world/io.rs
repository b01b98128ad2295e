//! Trace CSV: `vehicle_id,t,x_m,y_m,heading_rad`, one row per sample, sorted
//! by `(vehicle_id, t)` with `t` running 0, 1, 2, ... for every vehicle.
//!
//! The timestep is not part of the file and is supplied when loading.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Point2;

use super::{TraceSample, TraceSet, VehicleTrack};

pub const TRACE_HEADER: [&str; 5] = ["vehicle_id", "t", "x_m", "y_m", "heading_rad"];

pub fn save_traces(traces: &TraceSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let write_err = |e| Error::io(path, e);
    writeln!(out, "{}", TRACE_HEADER.join(",")).map_err(write_err)?;
    for track in &traces.tracks {
        for (t, s) in track.samples.iter().enumerate() {
            writeln!(out, "{},{},{},{},{}", track.id, t, s.pos.x, s.pos.y, s.heading).map_err(write_err)?;
        }
    }
    out.flush().map_err(write_err)
}

pub fn load_traces(path: impl AsRef<Path>, dt: f64) -> Result<TraceSet> {
    let path = path.as_ref();
    let parse_err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => parse_err(1, format!("{other:?}")),
        })?;
    let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != TRACE_HEADER {
        return Err(parse_err(1, format!("expected header `{}`", TRACE_HEADER.join(","))));
    }

    let mut tracks: Vec<VehicleTrack> = Vec::new();
    // first line of the current vehicle block, for length errors
    let mut block_start = 2;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != TRACE_HEADER.len() {
            return Err(parse_err(
                line,
                format!("expected {} columns, found {}", TRACE_HEADER.len(), record.len()),
            ));
        }
        let field = |i: usize| record.get(i).unwrap_or("").trim();
        let id: u32 = field(0)
            .parse()
            .map_err(|_| parse_err(line, format!("bad vehicle_id `{}`", field(0))))?;
        let t: usize = field(1).parse().map_err(|_| parse_err(line, format!("bad timestep `{}`", field(1))))?;
        let num = |i: usize| -> Result<f64> {
            let v: f64 = field(i)
                .parse()
                .map_err(|_| parse_err(line, format!("bad {} `{}`", TRACE_HEADER[i], field(i))))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(parse_err(line, format!("non-finite {}", TRACE_HEADER[i])))
            }
        };
        let sample = TraceSample { pos: Point2::new(num(2)?, num(3)?), heading: num(4)? };

        match tracks.last_mut() {
            Some(track) if track.id == id => {
                if t != track.samples.len() {
                    return Err(parse_err(
                        line,
                        format!("vehicle {id}: timestep {t} out of order, expected {}", track.samples.len()),
                    ));
                }
                track.samples.push(sample);
            }
            prev => {
                if let Some(track) = prev {
                    if id < track.id {
                        return Err(parse_err(line, format!("vehicle {id} follows vehicle {}", track.id)));
                    }
                }
                if t != 0 {
                    return Err(parse_err(line, format!("vehicle {id} starts at timestep {t}, expected 0")));
                }
                if let (Some(first), Some(last)) = (tracks.first(), tracks.last()) {
                    if first.samples.len() != last.samples.len() {
                        return Err(parse_err(
                            block_start,
                            format!(
                                "vehicle {} has {} samples, expected {}",
                                last.id,
                                last.samples.len(),
                                first.samples.len()
                            ),
                        ));
                    }
                }
                block_start = line;
                tracks.push(VehicleTrack { id, samples: vec![sample] });
            }
        }
    }
    if let (Some(first), Some(last)) = (tracks.first(), tracks.last()) {
        if first.samples.len() != last.samples.len() {
            return Err(parse_err(
                block_start,
                format!("vehicle {} has {} samples, expected {}", last.id, last.samples.len(), first.samples.len()),
            ));
        }
    }
    TraceSet::new(dt, tracks)
}
