//! Events, event streams and the binned `(polarity, bin, y, x)` count tensor.

mod evtx;

pub use evtx::{read_events, read_events_binary, read_events_text, write_events, write_events_binary, write_events_text, EventFormat};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    /// Tensor layout index: positive events occupy plane 0, negative plane 1.
    pub fn index(self) -> usize {
        match self {
            Polarity::Positive => 0,
            Polarity::Negative => 1,
        }
    }

    pub fn sign(self) -> i8 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => -1,
        }
    }

    pub fn from_sign(sign: i64) -> Option<Self> {
        match sign {
            1 => Some(Polarity::Positive),
            -1 => Some(Polarity::Negative),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    /// Timestamp in microseconds.
    pub t: u64,
    pub p: Polarity,
}

impl Event {
    pub fn new(x: u16, y: u16, t: u64, p: Polarity) -> Self {
        Event { x, y, t, p }
    }

    fn sort_key(&self) -> (u64, u16, u16, Polarity) {
        (self.t, self.y, self.x, self.p)
    }
}

/// Events over the half-open interval `[t_start, t_end)` on a `width x height` sensor.
///
/// Fields are public so streams can be assembled freely; [`validate_sort`] (or
/// [`EventStream::new`]) establishes the ordering and range invariants.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    pub events: Vec<Event>,
    pub width: u16,
    pub height: u16,
    pub t_start: u64,
    pub t_end: u64,
}

impl EventStream {
    pub fn new(events: Vec<Event>, width: u16, height: u16, t_start: u64, t_end: u64) -> Result<Self> {
        validate_sort(EventStream {
            events,
            width,
            height,
            t_start,
            t_end,
        })
    }

    pub fn empty(width: u16, height: u16, t_start: u64, t_end: u64) -> Result<Self> {
        Self::new(Vec::new(), width, height, t_start, t_end)
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Checks every invariant without reordering.
    pub fn check(&self) -> Result<()> {
        self.check_geometry()?;
        for (index, ev) in self.events.iter().enumerate() {
            self.check_event(index, ev)?;
        }
        if let Some(index) = self
            .events
            .windows(2)
            .position(|w| w[0].sort_key() > w[1].sort_key())
        {
            return Err(Error::InvalidEvent {
                index: index + 1,
                reason: "events are not sorted by (t, y, x, p)".into(),
            });
        }
        Ok(())
    }

    /// Substream holding only events of one polarity.
    pub fn filter_polarity(&self, p: Polarity) -> EventStream {
        EventStream {
            events: self.events.iter().copied().filter(|e| e.p == p).collect(),
            width: self.width,
            height: self.height,
            t_start: self.t_start,
            t_end: self.t_end,
        }
    }

    fn check_geometry(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidGeometry(format!(
                "sensor geometry {}x{} has zero extent",
                self.width, self.height
            )));
        }
        if self.t_start >= self.t_end {
            return Err(Error::InvalidGeometry(format!(
                "empty interval [{}, {})",
                self.t_start, self.t_end
            )));
        }
        Ok(())
    }

    fn check_event(&self, index: usize, ev: &Event) -> Result<()> {
        if ev.x >= self.width || ev.y >= self.height {
            return Err(Error::InvalidEvent {
                index,
                reason: format!(
                    "pixel ({}, {}) outside {}x{} sensor",
                    ev.x, ev.y, self.width, self.height
                ),
            });
        }
        if ev.t < self.t_start || ev.t >= self.t_end {
            return Err(Error::InvalidEvent {
                index,
                reason: format!(
                    "timestamp {} outside [{}, {})",
                    ev.t, self.t_start, self.t_end
                ),
            });
        }
        Ok(())
    }
}

/// Validates coordinates and timestamps, then sorts by `(t, y, x, p)`. Idempotent.
pub fn validate_sort(mut stream: EventStream) -> Result<EventStream> {
    stream.check_geometry()?;
    for (index, ev) in stream.events.iter().enumerate() {
        stream.check_event(index, ev)?;
    }
    stream.events.sort_by_key(Event::sort_key);
    Ok(stream)
}

/// Event counts laid out as `(polarity, time bin, y, x)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventTensor {
    counts: Vec<u32>,
    bins: usize,
    height: usize,
    width: usize,
}

impl EventTensor {
    pub fn zeros(bins: usize, height: usize, width: usize) -> Self {
        EventTensor {
            counts: vec![0; 2 * bins * height * width],
            bins,
            height,
            width,
        }
    }

    pub fn from_counts(counts: Vec<u32>, bins: usize, height: usize, width: usize) -> Result<Self> {
        let expected = 2 * bins * height * width;
        if counts.len() != expected || bins == 0 {
            return Err(Error::shape(
                "EventTensor::from_counts",
                format!("[2, {bins}, {height}, {width}]"),
                format!("{} values", counts.len()),
            ));
        }
        Ok(EventTensor {
            counts,
            bins,
            height,
            width,
        })
    }

    pub fn shape(&self) -> [usize; 4] {
        [2, self.bins, self.height, self.width]
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    fn offset(&self, p: usize, bin: usize, y: usize, x: usize) -> usize {
        ((p * self.bins + bin) * self.height + y) * self.width + x
    }

    pub fn get(&self, p: Polarity, bin: usize, y: usize, x: usize) -> u32 {
        self.counts[self.offset(p.index(), bin, y, x)]
    }

    pub fn add(&mut self, p: Polarity, bin: usize, y: usize, x: usize, n: u32) {
        let o = self.offset(p.index(), bin, y, x);
        self.counts[o] += n;
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    /// Counts of one polarity plane, shape `(bins, height, width)`.
    pub fn plane(&self, p: Polarity) -> &[u32] {
        let n = self.bins * self.height * self.width;
        &self.counts[p.index() * n..(p.index() + 1) * n]
    }

    /// Flattened `(2 * bins, height, width)` channel stack as reals.
    pub fn to_channels(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64).collect()
    }
}

/// Time bin of `t` within `[t_start, t_end)`, computed in exact integer arithmetic.
pub fn time_bin(t: u64, t_start: u64, t_end: u64, bins: usize) -> usize {
    let span = (t_end - t_start) as u128;
    let tau = ((t - t_start) as u128 * bins as u128 / span) as usize;
    tau.min(bins - 1)
}

pub fn bin_events(stream: &EventStream, bins: usize) -> Result<EventTensor> {
    if bins == 0 {
        return Err(Error::InvalidGeometry("bin count must be at least 1".into()));
    }
    stream.check_geometry()?;
    let mut tensor = EventTensor::zeros(bins, stream.height as usize, stream.width as usize);
    for (index, ev) in stream.events.iter().enumerate() {
        stream.check_event(index, ev)?;
        let tau = time_bin(ev.t, stream.t_start, stream.t_end, bins);
        tensor.add(ev.p, tau, ev.y as usize, ev.x as usize, 1);
    }
    Ok(tensor)
}
