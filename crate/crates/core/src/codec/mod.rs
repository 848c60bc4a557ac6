//! Standard MIDI File I/O and the two-channel onset/sustain piano roll.
//!
//! Time is measured in steps of a sixteenth note (four steps per beat). A
//! segment is eight 4/4 bars, i.e. 128 steps, over all 128 MIDI pitches.

mod midi;
mod roll;

pub use midi::{parse_midi, write_midi, ParsedMidi, TempoChange, TimeSignature, WRITE_TICKS_PER_BEAT};
pub use roll::{
    events_to_roll, events_to_roll_steps, roll_to_events, segment_corpus, NoteEvent, PianoRoll,
    RollDecode, Segment, CHANNELS, DEFAULT_VELOCITY, PITCHES, SEGMENT_BARS, SEGMENT_STEPS,
    STEPS_PER_BAR, STEPS_PER_BEAT,
};
