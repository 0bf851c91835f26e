//! Binary and CSV formats for emission records and detector time tags.
//!
//! All integers are little-endian.
//!
//! Emission file: `"QLT1"`, `u64` record count, then per record
//! `u64 time_ps, u32 pulse_index, f64 detuning, u8 flags`.
//!
//! Tag file: `"QTT1"`, 32-byte manifest hash, `u64` duration in ps, `u64`
//! record count, then per record `u8 channel, u64 time_ps`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::emitter::{EmissionEvent, FLAG_DOUBLET_SECOND, FLAG_MULTI_PARTNER};
use crate::error::{Error, Result};
use crate::tags::TimeTagStream;

pub const EMISSION_MAGIC: &[u8; 4] = b"QLT1";
pub const TAG_MAGIC: &[u8; 4] = b"QTT1";
const EMISSION_RECORD: usize = 8 + 4 + 8 + 1;
const TAG_RECORD: usize = 1 + 8;

pub fn write_emission_binary<W: Write>(events: &[EmissionEvent], w: W) -> Result<()> {
    let mut w = BufWriter::new(w);
    w.write_all(EMISSION_MAGIC)?;
    w.write_all(&(events.len() as u64).to_le_bytes())?;
    for e in events {
        let idx = u32::try_from(e.pulse_index)
            .map_err(|_| Error::Range(format!("pulse index {} does not fit the u32 record field", e.pulse_index)))?;
        w.write_all(&e.time.to_le_bytes())?;
        w.write_all(&idx.to_le_bytes())?;
        w.write_all(&e.detuning.to_le_bytes())?;
        w.write_all(&[e.flags()])?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact_or_format<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated {what}")),
        _ => Error::Io(e),
    })
}

fn check_magic<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<()> {
    let mut m = [0u8; 4];
    read_exact_or_format(r, &mut m, "header")?;
    if &m != magic {
        return Err(Error::Format(format!(
            "expected magic {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&m)
        )));
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact_or_format(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

fn events_from_flags(flags: u8) -> Result<(bool, bool)> {
    if flags & !(FLAG_MULTI_PARTNER | FLAG_DOUBLET_SECOND) != 0 {
        return Err(Error::Format(format!("unknown flag bits {flags:#04x}")));
    }
    Ok((flags & FLAG_MULTI_PARTNER != 0, flags & FLAG_DOUBLET_SECOND != 0))
}

pub fn read_emission_binary<R: Read>(r: R) -> Result<Vec<EmissionEvent>> {
    let mut r = BufReader::new(r);
    check_magic(&mut r, EMISSION_MAGIC)?;
    let n = read_u64(&mut r, "record count")?;
    let mut out = Vec::with_capacity(n.min(1 << 24) as usize);
    let mut rec = [0u8; EMISSION_RECORD];
    for _ in 0..n {
        read_exact_or_format(&mut r, &mut rec, "emission record")?;
        let (is_multi_partner, from_doublet_second) = events_from_flags(rec[20])?;
        out.push(EmissionEvent {
            time: u64::from_le_bytes(rec[0..8].try_into().expect("8 bytes")),
            pulse_index: u32::from_le_bytes(rec[8..12].try_into().expect("4 bytes")) as u64,
            detuning: f64::from_le_bytes(rec[12..20].try_into().expect("8 bytes")),
            is_multi_partner,
            from_doublet_second,
        });
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(Error::Format("trailing bytes after the last emission record".into()));
    }
    Ok(out)
}

pub fn write_emission_csv<W: Write>(events: &[EmissionEvent], w: W) -> Result<()> {
    let mut w = BufWriter::new(w);
    writeln!(w, "time_ps,pulse_index,detuning,flags")?;
    for e in events {
        writeln!(w, "{},{},{:e},{}", e.time, e.pulse_index, e.detuning, e.flags())?;
    }
    w.flush()?;
    Ok(())
}

/// Contents of one tag file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagFile {
    pub manifest_hash: [u8; 32],
    pub duration: u64,
    pub streams: Vec<TimeTagStream>,
}

impl TagFile {
    pub fn channel(&self, ch: u8) -> Option<&TimeTagStream> {
        self.streams.iter().find(|s| s.channel == ch)
    }

    pub fn total_tags(&self) -> usize {
        self.streams.iter().map(|s| s.len()).sum()
    }
}

/// Writes the streams channel by channel; every stream must share `duration`.
pub fn write_tags_binary<W: Write>(streams: &[&TimeTagStream], manifest_hash: &[u8; 32], w: W) -> Result<()> {
    let duration = streams.iter().map(|s| s.duration).max().unwrap_or(0);
    let mut w = BufWriter::new(w);
    w.write_all(TAG_MAGIC)?;
    w.write_all(manifest_hash)?;
    w.write_all(&duration.to_le_bytes())?;
    let n: usize = streams.iter().map(|s| s.len()).sum();
    w.write_all(&(n as u64).to_le_bytes())?;
    for s in streams {
        for &t in &s.tags {
            w.write_all(&[s.channel])?;
            w.write_all(&t.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_tags_binary<R: Read>(r: R) -> Result<TagFile> {
    let mut r = BufReader::new(r);
    check_magic(&mut r, TAG_MAGIC)?;
    let mut manifest_hash = [0u8; 32];
    read_exact_or_format(&mut r, &mut manifest_hash, "manifest hash")?;
    let duration = read_u64(&mut r, "duration")?;
    let n = read_u64(&mut r, "record count")?;
    let mut per_channel: Vec<(u8, Vec<u64>)> = Vec::new();
    let mut rec = [0u8; TAG_RECORD];
    for _ in 0..n {
        read_exact_or_format(&mut r, &mut rec, "tag record")?;
        let ch = rec[0];
        let t = u64::from_le_bytes(rec[1..9].try_into().expect("8 bytes"));
        match per_channel.iter_mut().find(|(c, _)| *c == ch) {
            Some((_, v)) => v.push(t),
            None => per_channel.push((ch, vec![t])),
        }
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(Error::Format("trailing bytes after the last tag record".into()));
    }
    let streams = per_channel
        .into_iter()
        .map(|(ch, tags)| TimeTagStream::new(ch, tags, duration).map_err(|e| Error::Format(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    Ok(TagFile { manifest_hash, duration, streams })
}

pub fn write_tags_csv<W: Write>(streams: &[&TimeTagStream], w: W) -> Result<()> {
    let mut w = BufWriter::new(w);
    writeln!(w, "channel,time_ps")?;
    for s in streams {
        for &t in &s.tags {
            writeln!(w, "{},{}", s.channel, t)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_tags_path(path: &Path) -> Result<TagFile> {
    let f = File::open(path)?;
    read_tags_binary(f).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Reads numeric columns from a CSV file with a header line. Lines starting
/// with `#` are skipped.
pub fn read_numeric_csv<R: Read>(r: R, columns: usize) -> Result<Vec<Vec<f64>>> {
    let r = BufReader::new(r);
    let mut out = vec![Vec::new(); columns];
    let mut header_seen = false;
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !header_seen {
            header_seen = true;
            if line.split(',').next().is_some_and(|f| f.trim().parse::<f64>().is_err()) {
                continue;
            }
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < columns {
            return Err(Error::Format(format!("line {}: expected {columns} columns", lineno + 1)));
        }
        for (c, col) in out.iter_mut().enumerate() {
            col.push(
                fields[c]
                    .trim()
                    .parse()
                    .map_err(|_| Error::Format(format!("line {}: `{}` is not a number", lineno + 1, fields[c])))?,
            );
        }
    }
    Ok(out)
}
