use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::json;

use bgm_core::checkpoint::{load_checkpoint, save_checkpoint};
use bgm_core::codec::{
    events_to_roll, events_to_roll_steps, parse_midi, roll_to_events, segment_corpus, write_midi, NoteEvent,
    CHANNELS, PITCHES, SEGMENT_BARS, SEGMENT_STEPS, STEPS_PER_BAR,
};
use bgm_core::conditioning::{load_condition, read_manifest, read_tensor, write_tensor, ManifestEntry};
use bgm_core::denoiser::{train, DenoiserNet, TrainFailure, TrainItem};
use bgm_core::diffusion::generate as sample;
use bgm_core::metrics::{
    extract_feature, gps, pche, retrieval_precision, sc, si_default, split_diversity, RetrievalConfig,
    RetrievalResult,
};
use bgm_core::rng::derive_seed;
use bgm_core::{ArchDescriptor, Error, PianoRoll, Tensor};

use crate::config::RunConfig;

/// Failure of a command, carrying its exit status.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Input(#[from] Error),
    #[error("{0}")]
    Divergence(Error),
    #[error("evaluation input: {0}")]
    Evaluation(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Evaluation(_) => 4,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn read(path: &Path) -> Result<Vec<u8>, Error> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_notes(path: &Path) -> Result<Vec<NoteEvent>, Error> {
    Ok(parse_midi(&read(path)?)?.notes)
}

/// Whole-bar roll long enough for every note, at least one segment.
fn roll_for(notes: &[NoteEvent]) -> PianoRoll {
    let end = notes.iter().map(NoteEvent::end_step).max().unwrap_or(0);
    let steps = (end.div_ceil(STEPS_PER_BAR) * STEPS_PER_BAR).max(SEGMENT_STEPS as u32);
    events_to_roll_steps(notes, 0, steps as usize)
}

/// MIDI file to a `2 x steps x 128` tensor of zeros and ones.
pub fn encode(midi: &Path, out: &Path) -> CliResult<usize> {
    let notes = read_notes(midi)?;
    let roll = roll_for(&notes);
    let data = roll.data().iter().map(|&v| f64::from(v)).collect();
    let tensor = Tensor::from_vec(&[CHANNELS, roll.steps(), PITCHES], data)?;
    write_tensor(&tensor, out)?;
    Ok(notes.len())
}

/// Roll tensor (thresholded at 0.5) to a MIDI file; returns the note count
/// and the number of repaired cells.
pub fn decode(tensor: &Path, out: &Path) -> CliResult<(usize, usize)> {
    let t = read_tensor(tensor)?;
    let steps = match *t.shape() {
        [CHANNELS, steps, PITCHES] => steps,
        _ => return Err(Error::Shape(format!("expected a 2 x steps x 128 tensor, got {:?}", t.shape())).into()),
    };
    if !t.all_finite() {
        return Err(Error::NonFinite(tensor.display().to_string()).into());
    }
    let cells = t.data().iter().map(|&v| u8::from(v > 0.5)).collect();
    let decoded = roll_to_events(&PianoRoll::from_raw(steps, cells)?);
    write(out, write_midi(&decoded.events))?;
    Ok((decoded.events.len(), decoded.repairs))
}

fn output_dir(cfg: &RunConfig, flag: Option<&Path>) -> CliResult<PathBuf> {
    Ok(flag.map(Path::to_path_buf).map_or_else(|| cfg.require(&cfg.out, "out").map(Path::to_path_buf), Ok)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub segments: usize,
    pub dropped_notes: usize,
    pub losses: Vec<f64>,
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
}

fn training_corpus(cfg: &RunConfig, entries: &[ManifestEntry]) -> CliResult<(Vec<TrainItem>, usize)> {
    let arch = &cfg.arch;
    let mut items = Vec::new();
    let mut dropped = 0;
    for entry in entries {
        let notes = read_notes(&entry.midi_path)?;
        let segments = segment_corpus(&entry.id, &notes, SEGMENT_BARS)?;
        let cond = if arch.conditional { Some(load_condition(entry)?) } else { None };
        let span = (segments.len() as u32 * SEGMENT_BARS).max(1) as f64;
        for seg in segments {
            if !arch.covers(&seg.roll) {
                dropped += onsets_outside(arch, &seg.roll);
            }
            let condition = match &cond {
                Some(c) => {
                    let from = f64::from(seg.bar_offset) / span;
                    let to = f64::from(seg.bar_offset + SEGMENT_BARS) / span;
                    Some(c.window(from, to, arch.steps)?)
                }
                None => None,
            };
            items.push(TrainItem {
                x0: arch.window(&seg.roll)?,
                condition,
            });
        }
    }
    Ok((items, dropped))
}

fn onsets_outside(arch: &ArchDescriptor, roll: &PianoRoll) -> usize {
    let band = arch.pitch_lo..arch.pitch_lo + arch.pitches;
    (0..roll.steps())
        .flat_map(|s| (0..PITCHES).map(move |p| (s, p)))
        .filter(|&(s, p)| roll.is_onset(s, p) && (s >= arch.steps || !band.contains(&p)))
        .count()
}

/// Trains a fresh net on the manifest corpus. The checkpoint and a
/// `step<TAB>loss` log are written even when training diverges.
pub fn train_cmd(cfg: &RunConfig, out: Option<&Path>) -> CliResult<TrainReport> {
    let seed = cfg.seed()?;
    let out = output_dir(cfg, out)?;
    let manifest = cfg.require(&cfg.manifest, "manifest")?;
    let entries = read_manifest(manifest)?;
    let (items, dropped_notes) = training_corpus(cfg, &entries)?;
    let mut net = DenoiserNet::new(cfg.arch.clone(), derive_seed(seed, "init"))?;
    let checkpoint = cfg.checkpoint.clone().unwrap_or_else(|| out.join("model.ckpt"));
    let loss_log = out.join("loss.log");
    let mut log = String::new();
    let result = if cfg.train_steps == 0 {
        Ok(Vec::new())
    } else {
        train(&mut net, &items, &cfg.schedule, &cfg.train_config(derive_seed(seed, "train")), |step, loss| {
            let _ = writeln!(log, "{step}\t{loss}");
        })
    };
    save_checkpoint_at(&checkpoint, &net, cfg)?;
    let report = |losses| TrainReport {
        segments: items.len(),
        dropped_notes,
        losses,
        checkpoint: checkpoint.clone(),
        loss_log: loss_log.clone(),
    };
    match result {
        Ok(losses) => {
            write(&loss_log, &log)?;
            Ok(report(losses))
        }
        Err(TrainFailure { error, losses }) => {
            if let Some(last) = losses.last() {
                let _ = writeln!(log, "{}\t{last}", losses.len() - 1);
            }
            write(&loss_log, &log)?;
            match error {
                e @ Error::Divergence { .. } => Err(CliError::Divergence(e)),
                e => Err(e.into()),
            }
        }
    }
}

fn save_checkpoint_at(path: &Path, net: &DenoiserNet, cfg: &RunConfig) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save_checkpoint(path, net, &cfg.schedule)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerateReport {
    pub written: Vec<String>,
    pub failed: Vec<(String, String)>,
}

fn pool(threads: usize) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")).into())
}

/// Samples one segment per manifest item into `{id}.mid`. Items whose
/// conditions fail to load are listed in `summary.json` and skipped.
pub fn generate_cmd(cfg: &RunConfig, out: Option<&Path>) -> CliResult<GenerateReport> {
    let seed = cfg.seed()?;
    let out = output_dir(cfg, out)?;
    let (net, sched) = load_checkpoint(cfg.require(&cfg.checkpoint, "checkpoint")?)?;
    let entries = read_manifest(cfg.require(&cfg.manifest, "manifest")?)?;
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let arch = net.arch().clone();
    let results: Vec<Result<Vec<u8>, Error>> = pool(cfg.threads)?.install(|| {
        entries
            .par_iter()
            .map(|entry| {
                let cond = if arch.conditional {
                    Some(load_condition(entry)?.window(0.0, 1.0, arch.steps)?)
                } else {
                    None
                };
                let roll = sample(&net, cond.as_ref(), &sched, derive_seed(seed, &entry.id))?;
                Ok(write_midi(&roll_to_events(&roll).events))
            })
            .collect()
    });
    let mut report = GenerateReport {
        written: Vec::new(),
        failed: Vec::new(),
    };
    for (entry, result) in entries.iter().zip(results) {
        match result {
            Ok(bytes) => {
                write(&out.join(format!("{}.mid", entry.id)), bytes)?;
                report.written.push(entry.id.clone());
            }
            Err(e) => report.failed.push((entry.id.clone(), e.to_string())),
        }
    }
    let failed: Vec<_> = report.failed.iter().map(|(id, e)| json!({"id": id, "error": e})).collect();
    let summary = json!({"seed": seed, "generated": report.written, "failed": failed});
    write(&out.join("summary.json"), format!("{summary:#}\n"))?;
    Ok(report)
}

/// Mean of the present values and how many there were.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricMean {
    pub value: Option<f64>,
    pub count: usize,
}

impl MetricMean {
    fn of(values: impl Iterator<Item = Option<f64>>) -> Self {
        let present: Vec<f64> = values.flatten().collect();
        let value = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
        Self {
            value,
            count: present.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub items: usize,
    pub pche: MetricMean,
    pub gps: MetricMean,
    pub si: MetricMean,
    pub sc: MetricMean,
    pub diversity: Option<f64>,
    pub reference_diversity: Option<f64>,
    /// Absent when the pool is smaller than the candidate count.
    pub retrieval: Option<RetrievalResult>,
    pub retrieval_config: RetrievalConfig,
}

/// First segment of a MIDI file.
fn segment_roll(path: &Path) -> Result<PianoRoll, Error> {
    Ok(events_to_roll(&read_notes(path)?, 0))
}

/// Scores `{id}.mid` files in the generated directory against the
/// manifest's ground truth.
pub fn evaluate_cmd(cfg: &RunConfig, out: Option<&Path>) -> CliResult<EvaluationReport> {
    let eval = |e: Error| CliError::Evaluation(e.to_string());
    let seed = cfg.seed()?;
    let out = output_dir(cfg, out)?;
    let generated_dir = cfg.generated.clone().unwrap_or_else(|| out.clone());
    let entries = read_manifest(cfg.require(&cfg.manifest, "manifest")?).map_err(eval)?;
    let present: Vec<&ManifestEntry> = entries
        .iter()
        .filter(|e| generated_dir.join(format!("{}.mid", e.id)).is_file())
        .collect();
    if present.is_empty() {
        return Err(CliError::Evaluation(format!(
            "no generated MIDI matching the manifest in {}",
            generated_dir.display()
        )));
    }
    let truth: Vec<PianoRoll> = pool(cfg.threads)?
        .install(|| entries.par_iter().map(|e| segment_roll(&e.midi_path)).collect::<Result<_, _>>())
        .map_err(eval)?;
    let generated: Vec<PianoRoll> = present
        .iter()
        .map(|e| segment_roll(&generated_dir.join(format!("{}.mid", e.id))))
        .collect::<Result<_, _>>()
        .map_err(eval)?;

    let split_seed = derive_seed(seed, "diversity");
    let gen_vecs: Vec<_> = generated.iter().map(extract_feature).collect();
    let truth_vecs: Vec<_> = truth.iter().map(extract_feature).collect();
    let pool_map: BTreeMap<String, _> = entries.iter().map(|e| e.id.clone()).zip(truth_vecs.iter().copied()).collect();
    let retrieval_config = RetrievalConfig {
        seed: derive_seed(seed, "retrieval"),
        ..cfg.retrieval.clone()
    };
    let retrieval = if pool_map.len() >= retrieval_config.m {
        let queries: Vec<_> = gen_vecs.iter().copied().zip(present.iter().map(|e| e.id.clone())).collect();
        Some(retrieval_precision(&queries, &pool_map, &retrieval_config).map_err(eval)?)
    } else {
        None
    };
    let report = EvaluationReport {
        items: generated.len(),
        pche: MetricMean::of(generated.iter().map(|r| Some(pche(r)))),
        gps: MetricMean::of(generated.iter().map(gps)),
        si: MetricMean::of(generated.iter().map(si_default)),
        sc: MetricMean::of(generated.iter().map(sc)),
        diversity: split_diversity(&gen_vecs, split_seed),
        reference_diversity: split_diversity(&truth_vecs, split_seed),
        retrieval,
        retrieval_config,
    };
    write_report(&report, &out)?;
    Ok(report)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".to_string(), |x| format!("{x}"))
}

fn write_report(r: &EvaluationReport, out: &Path) -> Result<(), Error> {
    let mut text = String::new();
    let n = r.items;
    for (name, m) in [("pche", r.pche), ("gps", r.gps), ("si", r.si), ("sc", r.sc)] {
        let _ = writeln!(text, "metric={name} value={} count={} config=per-segment-mean", fmt_opt(m.value), m.count);
    }
    let _ = writeln!(text, "metric=diversity value={} count={n} config=seeded-half-split", fmt_opt(r.diversity));
    let _ = writeln!(
        text,
        "metric=reference_diversity value={} count={} config=seeded-half-split",
        fmt_opt(r.reference_diversity),
        r.retrieval_config.m
    );
    let cfg = &r.retrieval_config;
    for (i, k) in cfg.ks.iter().enumerate() {
        let value = r.retrieval.as_ref().map(|res| res.precision[i]);
        let _ = writeln!(text, "metric=p@{k} value={} count={n} config=M={}", fmt_opt(value), cfg.m);
    }
    write(&out.join("report.txt"), text)?;
    let metric = |m: MetricMean| json!({"value": m.value, "count": m.count});
    let precision: serde_json::Map<String, serde_json::Value> = cfg
        .ks
        .iter()
        .enumerate()
        .map(|(i, k)| (format!("p@{k}"), json!(r.retrieval.as_ref().map(|res| res.precision[i]))))
        .collect();
    let summary = json!({
        "items": n,
        "pche": metric(r.pche),
        "gps": metric(r.gps),
        "si": metric(r.si),
        "sc": metric(r.sc),
        "diversity": r.diversity,
        "reference_diversity": r.reference_diversity,
        "retrieval": {"m": cfg.m, "ks": cfg.ks, "precision": precision},
    });
    write(&out.join("summary.json"), format!("{summary:#}\n"))
}
