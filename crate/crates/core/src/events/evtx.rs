//! EVTX event files.
//!
//! Binary layout: a 16-byte header (`"EVTX"`, version `u16 = 1`, width `u16`,
//! height `u16`, 6 reserved zero bytes) followed by 16-byte little-endian records
//! `(t: u64, x: u16, y: u16, p: i8, pad: [u8; 3])`.
//!
//! Text layout: a header line `# evtx v1 <width> <height>` followed by one
//! `t,x,y,p` line per event with `p` in `{1, -1}`.
//!
//! Neither layout stores the stream interval; readers reconstruct it as
//! `[0, t_last + 1)` (`[0, 1)` for an empty file).

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Event, EventStream, Polarity};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"EVTX";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 16;
const RECORD_LEN: usize = 16;
const TEXT_PREFIX: &str = "# evtx v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventFormat {
    Binary,
    Text,
}

impl EventFormat {
    /// Picks the text layout for `.txt`/`.csv` paths, binary otherwise.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("txt") | Some("csv") => EventFormat::Text,
            _ => EventFormat::Binary,
        }
    }
}

pub fn write_events(path: &Path, stream: &EventStream, format: EventFormat) -> Result<()> {
    let bytes = match format {
        EventFormat::Binary => write_events_binary(stream)?,
        EventFormat::Text => write_events_text(stream)?.into_bytes(),
    };
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Reads either layout, detected from the leading bytes.
pub fn read_events(path: &Path) -> Result<EventStream> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(MAGIC) {
        read_events_binary(&bytes)
    } else if bytes.starts_with(TEXT_PREFIX.as_bytes()) {
        let text = std::str::from_utf8(&bytes)
            .map_err(|e| Error::format(e.valid_up_to() as u64, "file is not valid UTF-8"))?;
        read_events_text(text)
    } else {
        Err(Error::format(0, "unrecognized magic bytes"))
    }
}

pub fn write_events_binary(stream: &EventStream) -> Result<Vec<u8>> {
    stream.check()?;
    let mut out = Vec::with_capacity(HEADER_LEN + RECORD_LEN * stream.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&stream.width.to_le_bytes());
    out.extend_from_slice(&stream.height.to_le_bytes());
    out.extend_from_slice(&[0u8; 6]);
    for ev in &stream.events {
        out.extend_from_slice(&ev.t.to_le_bytes());
        out.extend_from_slice(&ev.x.to_le_bytes());
        out.extend_from_slice(&ev.y.to_le_bytes());
        out.push(ev.p.sign() as u8);
        out.extend_from_slice(&[0u8; 3]);
    }
    Ok(out)
}

pub fn read_events_binary(bytes: &[u8]) -> Result<EventStream> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(bytes.len() as u64, "truncated header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(0, "bad magic bytes, expected EVTX"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let width = u16::from_le_bytes([bytes[6], bytes[7]]);
    let height = u16::from_le_bytes([bytes[8], bytes[9]]);
    if width == 0 || height == 0 {
        return Err(Error::format(6, format!("zero sensor geometry {width}x{height}")));
    }
    let body = &bytes[HEADER_LEN..];
    if body.len() % RECORD_LEN != 0 {
        let offset = HEADER_LEN + body.len() / RECORD_LEN * RECORD_LEN;
        return Err(Error::format(offset as u64, "truncated record"));
    }

    let mut events = Vec::with_capacity(body.len() / RECORD_LEN);
    for (i, rec) in body.chunks_exact(RECORD_LEN).enumerate() {
        let offset = (HEADER_LEN + i * RECORD_LEN) as u64;
        let t = u64::from_le_bytes(rec[0..8].try_into().unwrap());
        let x = u16::from_le_bytes([rec[8], rec[9]]);
        let y = u16::from_le_bytes([rec[10], rec[11]]);
        let p = Polarity::from_sign(rec[12] as i8 as i64)
            .ok_or_else(|| Error::format(offset + 12, format!("invalid polarity byte {}", rec[12])))?;
        let ev = Event::new(x, y, t, p);
        check_record(&ev, events.last(), width, height, offset)?;
        events.push(ev);
    }
    Ok(finish(events, width, height))
}

pub fn write_events_text(stream: &EventStream) -> Result<String> {
    stream.check()?;
    let mut out = format!("{TEXT_PREFIX} {} {}\n", stream.width, stream.height);
    for ev in &stream.events {
        out.push_str(&format!("{},{},{},{}\n", ev.t, ev.x, ev.y, ev.p.sign()));
    }
    Ok(out)
}

pub fn read_events_text(text: &str) -> Result<EventStream> {
    let mut offset = 0u64;
    let mut lines = text.split_inclusive('\n');
    let header = lines.next().ok_or_else(|| Error::format(0, "missing header line"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 5 || fields[0] != "#" || fields[1] != "evtx" || fields[2] != "v1" {
        return Err(Error::format(0, "malformed header, expected `# evtx v1 <width> <height>`"));
    }
    let parse_dim = |s: &str| -> Result<u16> {
        s.parse::<u16>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::format(0, format!("bad sensor dimension {s:?}")))
    };
    let width = parse_dim(fields[3])?;
    let height = parse_dim(fields[4])?;
    offset += header.len() as u64;

    let mut events: Vec<Event> = Vec::new();
    for raw in lines {
        let line = raw.trim_end_matches(['\n', '\r']);
        if line.is_empty() || line.starts_with('#') {
            offset += raw.len() as u64;
            continue;
        }
        let ev = parse_text_record(line).ok_or_else(|| Error::format(offset, format!("malformed record {line:?}")))?;
        check_record(&ev, events.last(), width, height, offset)?;
        events.push(ev);
        offset += raw.len() as u64;
    }
    Ok(finish(events, width, height))
}

fn parse_text_record(line: &str) -> Option<Event> {
    let mut it = line.split(',').map(str::trim);
    let t = it.next()?.parse().ok()?;
    let x = it.next()?.parse().ok()?;
    let y = it.next()?.parse().ok()?;
    let p = Polarity::from_sign(it.next()?.parse().ok()?)?;
    if it.next().is_some() {
        return None;
    }
    Some(Event::new(x, y, t, p))
}

fn check_record(ev: &Event, prev: Option<&Event>, width: u16, height: u16, offset: u64) -> Result<()> {
    if ev.x >= width || ev.y >= height {
        return Err(Error::format(
            offset,
            format!("pixel ({}, {}) outside {width}x{height} sensor", ev.x, ev.y),
        ));
    }
    if let Some(prev) = prev {
        if prev.sort_key() > ev.sort_key() {
            return Err(Error::format(offset, "records are not sorted by (t, y, x, p)"));
        }
    }
    Ok(())
}

fn finish(events: Vec<Event>, width: u16, height: u16) -> EventStream {
    let t_end = events.last().map_or(1, |e| e.t + 1);
    EventStream {
        events,
        width,
        height,
        t_start: 0,
        t_end,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stream_strategy() -> impl Strategy<Value = EventStream> {
        (1u16..64, 1u16..64)
            .prop_flat_map(|(w, h)| {
                let ev = (0..w, 0..h, 0u64..1_000_000, any::<bool>()).prop_map(|(x, y, t, pos)| {
                    Event::new(x, y, t, if pos { Polarity::Positive } else { Polarity::Negative })
                });
                (Just(w), Just(h), prop::collection::vec(ev, 0..200))
            })
            .prop_map(|(w, h, events)| {
                let t_end = events.iter().map(|e| e.t + 1).max().unwrap_or(1);
                EventStream::new(events, w, h, 0, t_end).unwrap()
            })
    }

    proptest! {
        #[test]
        fn binary_and_text_round_trip(s in stream_strategy()) {
            let bin = read_events_binary(&write_events_binary(&s).unwrap()).unwrap();
            let txt = read_events_text(&write_events_text(&s).unwrap()).unwrap();
            prop_assert_eq!(&bin, &s);
            prop_assert_eq!(&txt, &s);
        }
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let mut bytes = write_events_binary(&EventStream::empty(4, 4, 0, 1).unwrap()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(read_events_binary(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn truncated_record_reports_its_offset() {
        let s = EventStream::new(
            vec![Event::new(1, 1, 5, Polarity::Positive), Event::new(2, 1, 6, Polarity::Negative)],
            4,
            4,
            0,
            7,
        )
        .unwrap();
        let bytes = write_events_binary(&s).unwrap();
        match read_events_binary(&bytes[..bytes.len() - 3]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 32),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unsorted_records_are_rejected() {
        let text = "# evtx v1 4 4\n10,0,0,1\n5,0,0,1\n";
        match read_events_text(text) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 23),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn header_only_file_is_empty_stream() {
        let s = read_events_text("# evtx v1 8 6\n").unwrap();
        assert!(s.is_empty());
        assert_eq!((s.width, s.height), (8, 6));
        let b = write_events_binary(&s).unwrap();
        assert_eq!(b.len(), HEADER_LEN);
    }
}
