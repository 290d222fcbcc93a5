//! Extended-XYZ trajectory files.
//!
//! Each frame is an atom-count line, a comment line `t=<frame> dt=<dt>`
//! optionally followed by further `key=value` tokens, and one line per atom
//! `SYMBOL x y z vx vy vz`. Velocity columns may be omitted for every atom of
//! a file, in which case they are rebuilt from backward frame differences.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{atomic_number, element_symbol, Conformation, Trajectory, Vec3};
use crate::{Error, Result};

pub fn write_xyz<W: Write>(traj: &Trajectory, mut out: W) -> Result<()> {
    let extra: String = traj
        .meta
        .iter()
        .filter(|(k, _)| k.as_str() != "t" && k.as_str() != "dt")
        .map(|(k, v)| format!(" {}={}", k, v.replace(char::is_whitespace, "_")))
        .collect();
    let symbols: Vec<String> = traj.atom_numbers().iter().map(|&z| element_symbol(z)).collect();
    for (t, frame) in traj.frames.iter().enumerate() {
        writeln!(out, "{}", frame.len())?;
        writeln!(out, "t={} dt={}{}", t, traj.dt, extra)?;
        for ((sym, x), v) in symbols.iter().zip(&frame.positions).zip(&frame.velocities) {
            writeln!(out, "{} {} {} {} {} {} {}", sym, x.x, x.y, x.z, v.x, v.y, v.z)?;
        }
    }
    Ok(())
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_xyz_file(traj: &Trajectory, path: &Path) -> Result<()> {
    let tmp = path.with_extension("xyz.tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        write_xyz(traj, &mut w)?;
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_xyz_file(path: &Path) -> Result<Trajectory> {
    read_xyz(BufReader::new(File::open(path)?))
}

fn parse_err(line: usize, reason: impl Into<String>) -> Error {
    Error::Parse { line, reason: reason.into() }
}

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    tok.parse().map_err(|_| parse_err(line, format!("bad number {tok:?}")))
}

pub fn read_xyz<R: BufRead>(input: R) -> Result<Trajectory> {
    let lines: Vec<String> = input.lines().collect::<std::io::Result<_>>()?;
    let mut i = 0;
    let mut frames = Vec::new();
    let mut dt = None;
    let mut meta = std::collections::BTreeMap::new();
    let mut has_velocities = None;

    while i < lines.len() {
        if lines[i].trim().is_empty() {
            i += 1;
            continue;
        }
        let n: usize = lines[i]
            .trim()
            .parse()
            .map_err(|_| parse_err(i + 1, format!("expected atom count, got {:?}", lines[i])))?;
        let comment = lines.get(i + 1).ok_or_else(|| parse_err(i + 2, "missing comment line"))?;
        for tok in comment.split_whitespace() {
            if let Some((k, v)) = tok.split_once('=') {
                match k {
                    "dt" if dt.is_none() => dt = Some(parse_f64(v, i + 2)?),
                    "t" | "dt" => {}
                    _ => {
                        meta.entry(k.to_string()).or_insert_with(|| v.to_string());
                    }
                }
            }
        }
        let mut positions = Vec::with_capacity(n);
        let mut velocities = Vec::with_capacity(n);
        let mut numbers = Vec::with_capacity(n);
        for a in 0..n {
            let ln = i + 2 + a;
            let line = lines.get(ln).ok_or_else(|| parse_err(ln + 1, "truncated frame"))?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            let with_v = match toks.len() {
                4 => false,
                7 => true,
                k => return Err(parse_err(ln + 1, format!("expected 4 or 7 columns, got {k}"))),
            };
            if *has_velocities.get_or_insert(with_v) != with_v {
                return Err(parse_err(ln + 1, "inconsistent velocity columns"));
            }
            let z = atomic_number(toks[0]).ok_or_else(|| parse_err(ln + 1, format!("unknown element {:?}", toks[0])))?;
            let f = |k: usize| parse_f64(toks[k], ln + 1);
            positions.push(Vec3::new(f(1)?, f(2)?, f(3)?));
            velocities.push(if with_v { Vec3::new(f(4)?, f(5)?, f(6)?) } else { Vec3::zeros() });
            numbers.push(z);
        }
        frames.push(Conformation::new(positions, velocities, numbers)?);
        i += 2 + n;
    }
    if frames.is_empty() {
        return Err(parse_err(1, "no frames"));
    }
    let mut traj = Trajectory::new(frames, dt.unwrap_or(1.0))?;
    traj.meta = meta;
    if has_velocities == Some(false) {
        traj = traj.with_frame_difference_velocities();
    }
    Ok(traj)
}
