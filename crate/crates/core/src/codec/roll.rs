use crate::error::{Error, Result};

pub const PITCHES: usize = 128;
pub const CHANNELS: usize = 2;
pub const STEPS_PER_BEAT: u32 = 4;
pub const STEPS_PER_BAR: u32 = 16;
pub const SEGMENT_BARS: u32 = 8;
pub const SEGMENT_STEPS: usize = 128;
pub const DEFAULT_VELOCITY: u8 = 80;

const ONSET: usize = 0;
const SUSTAIN: usize = 1;

/// A quantized note. Times are in sixteenth-note steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NoteEvent {
    pub pitch: u8,
    pub onset_step: u32,
    pub duration_steps: u32,
    pub velocity: u8,
}

impl NoteEvent {
    pub fn new(pitch: u8, onset_step: u32, duration_steps: u32, velocity: u8) -> Self {
        debug_assert!(pitch < 128 && duration_steps >= 1 && (1..=127).contains(&velocity));
        Self {
            pitch,
            onset_step,
            duration_steps,
            velocity,
        }
    }

    pub fn end_step(&self) -> u32 {
        self.onset_step + self.duration_steps
    }

    fn is_valid(&self) -> bool {
        (self.pitch as usize) < PITCHES && self.duration_steps >= 1
    }
}

/// Binary `2 x steps x 128` tensor. Channel 0 marks note onsets, channel 1
/// marks the steps a note keeps sounding after its onset.
///
/// Rolls built by [`events_to_roll`] always satisfy the channel invariants;
/// rolls assembled from raw data (e.g. thresholded model output) may not, and
/// are normalized by [`roll_to_events`] / [`PianoRoll::repaired`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PianoRoll {
    steps: usize,
    data: Vec<u8>,
}

impl Default for PianoRoll {
    fn default() -> Self {
        Self::zeros()
    }
}

impl PianoRoll {
    /// An empty eight-bar roll.
    pub fn zeros() -> Self {
        Self::with_steps(SEGMENT_STEPS)
    }

    pub fn with_steps(steps: usize) -> Self {
        Self {
            steps,
            data: vec![0; CHANNELS * steps * PITCHES],
        }
    }

    /// Wraps raw channel-major data. Every entry must be 0 or 1.
    pub fn from_raw(steps: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != CHANNELS * steps * PITCHES {
            return Err(Error::Shape(format!(
                "roll with {steps} steps needs {} entries, got {}",
                CHANNELS * steps * PITCHES,
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Shape("piano roll entries must be 0 or 1".into()));
        }
        Ok(Self { steps, data })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn bars(&self) -> usize {
        self.steps / STEPS_PER_BAR as usize
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    fn index(&self, channel: usize, step: usize, pitch: usize) -> usize {
        (channel * self.steps + step) * PITCHES + pitch
    }

    #[inline]
    pub fn get(&self, channel: usize, step: usize, pitch: usize) -> bool {
        self.data[self.index(channel, step, pitch)] != 0
    }

    #[inline]
    pub fn set(&mut self, channel: usize, step: usize, pitch: usize, on: bool) {
        let i = self.index(channel, step, pitch);
        self.data[i] = on as u8;
    }

    pub fn is_onset(&self, step: usize, pitch: usize) -> bool {
        self.get(ONSET, step, pitch)
    }

    pub fn is_sustain(&self, step: usize, pitch: usize) -> bool {
        self.get(SUSTAIN, step, pitch)
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Number of set entries over both channels.
    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn onset_count(&self) -> usize {
        self.data[..self.steps * PITCHES].iter().filter(|&&v| v != 0).count()
    }

    /// Checks the onset/sustain invariants: channels are exclusive and every
    /// sustain continues an onset or another sustain on the previous step.
    pub fn is_valid(&self) -> bool {
        for p in 0..PITCHES {
            for t in 0..self.steps {
                let on = self.is_onset(t, p);
                let su = self.is_sustain(t, p);
                if on && su {
                    return false;
                }
                if su && (t == 0 || !(self.is_onset(t - 1, p) || self.is_sustain(t - 1, p))) {
                    return false;
                }
            }
        }
        true
    }

    /// Returns a valid roll plus the number of entries that had to be fixed.
    pub fn repaired(&self) -> (PianoRoll, usize) {
        let decoded = roll_to_events(self);
        (
            events_to_roll_steps(&decoded.events, 0, self.steps),
            decoded.repairs,
        )
    }

    /// Fraction of entries equal between two rolls of the same length.
    pub fn agreement(&self, other: &PianoRoll) -> f64 {
        assert_eq!(self.steps, other.steps, "roll lengths differ");
        let same = self
            .data
            .iter()
            .zip(&other.data)
            .filter(|(a, b)| a == b)
            .count();
        same as f64 / self.data.len() as f64
    }
}

/// Encodes the notes overlapping `[start_step, start_step + 128)`.
pub fn events_to_roll(events: &[NoteEvent], start_step: u32) -> PianoRoll {
    events_to_roll_steps(events, start_step, SEGMENT_STEPS)
}

/// [`events_to_roll`] with an arbitrary window length.
///
/// A new onset on a pitch cuts off any note still sounding on that pitch.
pub fn events_to_roll_steps(events: &[NoteEvent], start_step: u32, steps: usize) -> PianoRoll {
    let mut roll = PianoRoll::with_steps(steps);
    let mut notes: Vec<NoteEvent> = events.iter().copied().filter(NoteEvent::is_valid).collect();
    notes.sort_by_key(|n| (n.pitch, n.onset_step, n.duration_steps));

    let start = start_step as u64;
    let stop = start + steps as u64;
    for (i, note) in notes.iter().enumerate() {
        let mut end = note.end_step() as u64;
        if let Some(next) = notes.get(i + 1).filter(|n| n.pitch == note.pitch) {
            end = end.min(next.onset_step as u64);
        }
        let onset = note.onset_step as u64;
        if end <= onset {
            continue;
        }
        let p = note.pitch as usize;
        for s in onset.max(start)..end.min(stop) {
            let channel = if s == onset { ONSET } else { SUSTAIN };
            roll.set(channel, (s - start) as usize, p, true);
        }
    }
    roll
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RollDecode {
    pub events: Vec<NoteEvent>,
    /// Cells that violated the channel invariants: orphan sustains promoted
    /// to onsets, plus cells with both channels set (the onset wins).
    pub repairs: usize,
}

/// Decodes a roll into notes with [`DEFAULT_VELOCITY`], sorted by onset then
/// pitch.
pub fn roll_to_events(roll: &PianoRoll) -> RollDecode {
    let mut events = Vec::new();
    let mut repairs = 0;
    for p in 0..PITCHES {
        let mut active: Option<usize> = None;
        let close = |active: &mut Option<usize>, t: usize, events: &mut Vec<NoteEvent>| {
            if let Some(s) = active.take() {
                events.push(NoteEvent::new(p as u8, s as u32, (t - s) as u32, DEFAULT_VELOCITY));
            }
        };
        for t in 0..roll.steps() {
            let on = roll.is_onset(t, p);
            let su = roll.is_sustain(t, p);
            if on {
                if su {
                    repairs += 1;
                }
                close(&mut active, t, &mut events);
                active = Some(t);
            } else if su {
                if active.is_none() {
                    repairs += 1;
                    active = Some(t);
                }
            } else {
                close(&mut active, t, &mut events);
            }
        }
        close(&mut active, roll.steps(), &mut events);
    }
    events.sort_by_key(|n| (n.onset_step, n.pitch));
    RollDecode { events, repairs }
}

/// An eight-bar window cut from a longer piece.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub roll: PianoRoll,
    pub source_id: String,
    pub bar_offset: u32,
}

/// Cuts a piece into eight-bar windows every `hop_bars` bars. The last
/// windows are zero-padded past the end of the music; no window starts at or
/// after the end of the last note.
pub fn segment_corpus(source_id: &str, events: &[NoteEvent], hop_bars: u32) -> Result<Vec<Segment>> {
    if hop_bars == 0 {
        return Err(Error::Config("hop_bars must be at least 1".into()));
    }
    let total = events.iter().map(NoteEvent::end_step).max().unwrap_or(0);
    let hop = hop_bars * STEPS_PER_BAR;
    let count = total.div_ceil(hop);
    Ok((0..count)
        .map(|i| Segment {
            roll: events_to_roll(events, i * hop),
            source_id: source_id.to_string(),
            bar_offset: i * hop_bars,
        })
        .collect())
}
