#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use bgm_core::codec::{write_midi, NoteEvent};
use bgm_core::conditioning::{synth_condition, write_tensor, SynthProfile};
use bgm_core::denoiser::ArchDescriptor;

/// Toy-sized network keys for config files.
pub const TOY_ARCH: &str = "channels=4,8\nsteps=16\npitch_lo=56\npitches=16\nd_model=8\nd_cond=8\nd_key=8\nd_fv=6\nd_fl=10\n";

/// A two-segment melody inside the toy pitch band, varied by `variant`.
pub fn melody(variant: u32) -> Vec<NoteEvent> {
    (0..32u32)
        .map(|i| {
            let pitch = 58 + ((i * (variant + 2) + variant) % 12) as u8;
            NoteEvent::new(pitch, i * 8, 1 + (i + variant) % 4, 90)
        })
        .collect()
}

/// Writes `n` items (MIDI, fv, fl) plus `manifest.jsonl` into `dir`.
pub fn write_corpus(dir: &Path, n: u32) -> PathBuf {
    let arch = ArchDescriptor::toy();
    let mut manifest = String::new();
    for i in 0..n {
        let id = format!("clip{i:02}");
        fs::write(dir.join(format!("{id}.mid")), write_midi(&melody(i))).unwrap();
        let cond = synth_condition(24, arch.d_fv, arch.d_fl, 100 + u64::from(i), SynthProfile::Blocky { k: 3 });
        write_tensor(&cond.fv, dir.join(format!("{id}.fv"))).unwrap();
        write_tensor(&cond.fl, dir.join(format!("{id}.fl"))).unwrap();
        manifest += &format!(
            "{{\"id\":\"{id}\",\"midi_path\":\"{id}.mid\",\"fv_path\":\"{id}.fv\",\"fl_path\":\"{id}.fl\"}}\n"
        );
    }
    let path = dir.join("manifest.jsonl");
    fs::write(&path, manifest).unwrap();
    path
}

/// Writes `run.cfg` next to the corpus, with `extra` lines appended.
pub fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.cfg");
    let text = format!("seed=11\nmanifest=manifest.jsonl\nout=out\nn=60\nt0=12\n{TOY_ARCH}{extra}");
    fs::write(&path, text).unwrap();
    path
}
