use super::roll::{NoteEvent, STEPS_PER_BEAT};
use crate::error::{Error, Result};

pub const WRITE_TICKS_PER_BEAT: u16 = 480;
const DEFAULT_TEMPO: u32 = 500_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TempoChange {
    pub step: u32,
    pub micros_per_beat: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeSignature {
    pub step: u32,
    pub numerator: u8,
    pub denominator: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedMidi {
    pub format: u16,
    pub ticks_per_beat: u16,
    /// Notes from every track, sorted by onset then pitch.
    pub notes: Vec<NoteEvent>,
    pub tempo_map: Vec<TempoChange>,
    pub time_signatures: Vec<TimeSignature>,
    pub warnings: Vec<String>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Midi {
            offset: self.pos,
            message: message.into(),
        })
    }

    fn u8(&mut self) -> Result<u8> {
        match self.bytes.get(self.pos) {
            Some(&b) => {
                self.pos += 1;
                Ok(b)
            }
            None => self.err("unexpected end of data"),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.err(format!(
                "need {n} bytes, only {} left",
                self.bytes.len() - self.pos
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn varlen(&mut self) -> Result<u32> {
        let start = self.pos;
        let mut value = 0u32;
        for _ in 0..4 {
            let b = self.u8()?;
            value = (value << 7) | (b & 0x7f) as u32;
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        self.pos = start;
        self.err("variable-length quantity longer than 4 bytes")
    }
}

/// Nearest sixteenth-note step, ties rounding up.
fn quantize(tick: u64, ticks_per_beat: u16) -> u32 {
    let tpb = ticks_per_beat as u64;
    let steps = STEPS_PER_BEAT as u64;
    ((2 * steps * tick + tpb) / (2 * tpb)) as u32
}

/// Parses an SMF (format 0 or 1) and merges all tracks into one note list.
///
/// Note-ons that are never released produce a warning and end at the
/// track's end-of-track event.
pub fn parse_midi(bytes: &[u8]) -> Result<ParsedMidi> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(b"MThd".as_slice()) {
        r.pos = 0;
        return r.err("missing MThd header");
    }
    let header_len = r.u32()? as usize;
    if header_len < 6 {
        return r.err(format!("header length {header_len} is shorter than 6"));
    }
    let header_start = r.pos;
    let format = r.u16()?;
    let ntracks = r.u16()?;
    let division = r.u16()?;
    r.pos = header_start + header_len;
    match format {
        0 | 1 => {}
        2 => return Err(Error::UnsupportedMidiFormat(2)),
        f => {
            r.pos = header_start;
            return r.err(format!("unknown SMF format {f}"));
        }
    }
    if division & 0x8000 != 0 || division == 0 {
        r.pos = header_start + 4;
        return r.err("SMPTE or zero time division is not supported");
    }
    let tpb = division;

    let mut raw = Vec::new();
    let mut tempos: Vec<(u64, u32)> = Vec::new();
    let mut signatures: Vec<(u64, u8, u32)> = Vec::new();
    let mut warnings = Vec::new();
    let mut tracks_read = 0;
    while tracks_read < ntracks {
        if r.pos >= bytes.len() {
            return r.err(format!("expected {ntracks} tracks, found {tracks_read}"));
        }
        let id = r.take(4)?;
        let len = r.u32()? as usize;
        let body_start = r.pos;
        let body = r.take(len)?;
        if id != b"MTrk" {
            continue;
        }
        parse_track(
            body,
            body_start,
            tracks_read,
            &mut raw,
            &mut tempos,
            &mut signatures,
            &mut warnings,
        )?;
        tracks_read += 1;
    }

    if let Some(&(_, numerator, denominator)) =
        signatures.iter().find(|&&(_, n, d)| (n, d) != (4, 4))
    {
        return Err(Error::UnsupportedTimeSignature {
            numerator,
            denominator,
        });
    }

    let mut notes: Vec<NoteEvent> = raw
        .into_iter()
        .map(|(on, off, pitch, vel)| {
            let s = quantize(on, tpb);
            let e = quantize(off, tpb);
            NoteEvent::new(pitch, s, e.saturating_sub(s).max(1), vel)
        })
        .collect();
    notes.sort_by_key(|n| (n.onset_step, n.pitch, n.duration_steps));
    tempos.sort_by_key(|t| t.0);
    signatures.sort_by_key(|s| s.0);

    Ok(ParsedMidi {
        format,
        ticks_per_beat: tpb,
        notes,
        tempo_map: tempos
            .into_iter()
            .map(|(tick, micros_per_beat)| TempoChange {
                step: quantize(tick, tpb),
                micros_per_beat,
            })
            .collect(),
        time_signatures: signatures
            .into_iter()
            .map(|(tick, numerator, denominator)| TimeSignature {
                step: quantize(tick, tpb),
                numerator,
                denominator,
            })
            .collect(),
        warnings,
    })
}

type RawNote = (u64, u64, u8, u8);

fn parse_track(
    body: &[u8],
    base: usize,
    track: u16,
    notes: &mut Vec<RawNote>,
    tempos: &mut Vec<(u64, u32)>,
    signatures: &mut Vec<(u64, u8, u32)>,
    warnings: &mut Vec<String>,
) -> Result<()> {
    let mut r = Reader { bytes: body, pos: 0 };
    let offset_err = |r: &Reader, message: String| Error::Midi {
        offset: base + r.pos,
        message,
    };
    // Pending note-ons per (channel, pitch), released first-in first-out.
    let mut pending: Vec<Vec<(u64, u8)>> = vec![Vec::new(); 16 * 128];
    let mut tick = 0u64;
    let mut running: Option<u8> = None;
    let mut ended = false;

    while r.pos < body.len() {
        let delta = r.varlen().map_err(|_| offset_err(&r, "bad delta time".into()))?;
        tick += delta as u64;
        let first = r.u8().map_err(|_| offset_err(&r, "missing event".into()))?;
        let status = if first & 0x80 != 0 {
            first
        } else {
            r.pos -= 1;
            running.ok_or_else(|| offset_err(&r, "data byte without running status".into()))?
        };
        let wrap = |e: Error, r: &Reader| match e {
            Error::Midi { message, .. } => offset_err(r, message),
            e => e,
        };
        match status {
            0x80..=0xEF => {
                running = Some(status);
                let kind = status & 0xF0;
                let channel = (status & 0x0F) as usize;
                let a = r.u8().map_err(|e| wrap(e, &r))?;
                let b = if matches!(kind, 0xC0 | 0xD0) {
                    0
                } else {
                    r.u8().map_err(|e| wrap(e, &r))?
                };
                if a > 127 || b > 127 {
                    return Err(offset_err(&r, "data byte has the high bit set".into()));
                }
                let slot = channel * 128 + a as usize;
                match kind {
                    0x90 if b > 0 => pending[slot].push((tick, b)),
                    0x80 | 0x90
                        if !pending[slot].is_empty() => {
                            let (on, vel) = pending[slot].remove(0);
                            notes.push((on, tick, a, vel));
                        }
                    _ => {}
                }
            }
            0xF0 | 0xF7 => {
                running = None;
                let len = r.varlen().map_err(|e| wrap(e, &r))? as usize;
                r.take(len).map_err(|e| wrap(e, &r))?;
            }
            0xFF => {
                running = None;
                let kind = r.u8().map_err(|e| wrap(e, &r))?;
                let len = r.varlen().map_err(|e| wrap(e, &r))? as usize;
                let data = r.take(len).map_err(|e| wrap(e, &r))?;
                match kind {
                    0x2F => {
                        ended = true;
                        break;
                    }
                    0x51 if len == 3 => {
                        let us = u32::from_be_bytes([0, data[0], data[1], data[2]]);
                        tempos.push((tick, us));
                    }
                    0x58 if len >= 2 => {
                        let denominator = 1u32.checked_shl(data[1] as u32).unwrap_or(0);
                        signatures.push((tick, data[0], denominator));
                    }
                    _ => {}
                }
            }
            s => {
                r.pos -= 1;
                return Err(offset_err(&r, format!("invalid status byte {s:#04x}")));
            }
        }
    }
    if !ended {
        warnings.push(format!("track {track}: missing end-of-track event"));
    }
    let mut dangling = 0;
    for (slot, queue) in pending.iter().enumerate() {
        for &(on, vel) in queue {
            notes.push((on, tick.max(on), (slot % 128) as u8, vel));
            dangling += 1;
        }
    }
    if dangling > 0 {
        warnings.push(format!(
            "track {track}: {dangling} note(s) never released, closed at end of track"
        ));
    }
    Ok(())
}

fn push_varlen(out: &mut Vec<u8>, mut value: u32) {
    let mut buf = [0u8; 4];
    let mut n = 0;
    loop {
        buf[n] = (value & 0x7f) as u8;
        n += 1;
        value >>= 7;
        if value == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        out.push(if i > 0 { buf[i] | 0x80 } else { buf[i] });
    }
}

/// Writes a format-0 file at 480 ticks per beat, 120 BPM, 4/4, channel 0.
pub fn write_midi(events: &[NoteEvent]) -> Vec<u8> {
    let ticks_per_step = (WRITE_TICKS_PER_BEAT as u32) / STEPS_PER_BEAT;
    // (tick, note-off before note-on, pitch, velocity)
    let mut timeline: Vec<(u32, u8, u8, u8)> = Vec::with_capacity(events.len() * 2);
    for n in events {
        timeline.push((n.onset_step * ticks_per_step, 1, n.pitch, n.velocity.max(1)));
        timeline.push((n.end_step() * ticks_per_step, 0, n.pitch, 64));
    }
    timeline.sort();

    let mut track = Vec::new();
    track.extend_from_slice(&[0x00, 0xFF, 0x51, 0x03]);
    track.extend_from_slice(&DEFAULT_TEMPO.to_be_bytes()[1..]);
    track.extend_from_slice(&[0x00, 0xFF, 0x58, 0x04, 4, 2, 24, 8]);
    let mut last = 0;
    for (tick, is_on, pitch, vel) in timeline {
        push_varlen(&mut track, tick - last);
        last = tick;
        track.extend_from_slice(&[if is_on == 1 { 0x90 } else { 0x80 }, pitch, vel]);
    }
    track.extend_from_slice(&[0x00, 0xFF, 0x2F, 0x00]);

    let mut out = Vec::with_capacity(track.len() + 22);
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&WRITE_TICKS_PER_BEAT.to_be_bytes());
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(track.len() as u32).to_be_bytes());
    out.extend_from_slice(&track);
    out
}
