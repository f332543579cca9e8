//! Speech-Commands-style corpus ingestion.
//!
//! The expected layout is `<root>/<word>/<speaker>_nohash_<n>.wav` plus
//! background recordings in `<root>/_background_noise_/*.wav`. Building a
//! manifest assigns every file to exactly one split, strips labels from a
//! configured fraction of the training files, and synthesizes silence clips
//! from the background recordings.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub const SAMPLE_RATE: u32 = 16_000;
pub const SILENCE_WORD: &str = "_silence_";
pub const NOISE_DIR: &str = "_background_noise_";

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub source_path: Option<String>,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
            source_path: None,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassLabel {
    Yes,
    No,
    Up,
    Down,
    Left,
    Right,
    Stop,
    Go,
    On,
    Off,
    Unknown,
    Silence,
}

impl ClassLabel {
    pub const COUNT: usize = 12;

    pub const ALL: [ClassLabel; 12] = [
        ClassLabel::Yes,
        ClassLabel::No,
        ClassLabel::Up,
        ClassLabel::Down,
        ClassLabel::Left,
        ClassLabel::Right,
        ClassLabel::Stop,
        ClassLabel::Go,
        ClassLabel::On,
        ClassLabel::Off,
        ClassLabel::Unknown,
        ClassLabel::Silence,
    ];

    /// The ten command words, in code order.
    pub const TARGETS: [ClassLabel; 10] = [
        ClassLabel::Yes,
        ClassLabel::No,
        ClassLabel::Up,
        ClassLabel::Down,
        ClassLabel::Left,
        ClassLabel::Right,
        ClassLabel::Stop,
        ClassLabel::Go,
        ClassLabel::On,
        ClassLabel::Off,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Yes => "yes",
            ClassLabel::No => "no",
            ClassLabel::Up => "up",
            ClassLabel::Down => "down",
            ClassLabel::Left => "left",
            ClassLabel::Right => "right",
            ClassLabel::Stop => "stop",
            ClassLabel::Go => "go",
            ClassLabel::On => "on",
            ClassLabel::Off => "off",
            ClassLabel::Unknown => "unknown",
            ClassLabel::Silence => "silence",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Total on strings: the ten command words map to themselves, the silence
/// marker to `Silence`, everything else to `Unknown`.
pub fn map_word_to_class(word: &str) -> ClassLabel {
    if word == SILENCE_WORD {
        return ClassLabel::Silence;
    }
    ClassLabel::TARGETS
        .iter()
        .copied()
        .find(|c| c.name() == word)
        .unwrap_or(ClassLabel::Unknown)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    TrainLabeled,
    TrainUnlabeled,
    Holdout,
    Validation,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::TrainLabeled => "train_labeled",
            Split::TrainUnlabeled => "train_unlabeled",
            Split::Holdout => "holdout",
            Split::Validation => "validation",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train_labeled" => Ok(Split::TrainLabeled),
            "train_unlabeled" => Ok(Split::TrainUnlabeled),
            "holdout" => Ok(Split::Holdout),
            "validation" => Ok(Split::Validation),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub word: Option<String>,
    pub label: Option<ClassLabel>,
    pub split: Split,
}

// ---------------------------------------------------------------------------
// WAV I/O
// ---------------------------------------------------------------------------

/// Read a PCM or float WAV, keep the first channel, scale to [-1, 1] and
/// linearly resample to `target_rate` when the file rate differs.
pub fn load_wav(path: &Path, target_rate: u32) -> Result<AudioClip> {
    let reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    if spec.channels == 0 || spec.sample_rate == 0 {
        return Err(Error::Format {
            path: path.into(),
            reason: "zero channels or zero sample rate".into(),
        });
    }
    let channels = spec.channels as usize;
    let raw: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Int => {
            if spec.bits_per_sample == 0 || spec.bits_per_sample > 32 {
                return Err(Error::Unsupported {
                    path: path.into(),
                    reason: format!("{}-bit integer PCM", spec.bits_per_sample),
                });
            }
            let scale = (1u64 << (spec.bits_per_sample - 1)) as f64;
            let mut out = Vec::new();
            for (i, s) in reader.into_samples::<i32>().enumerate() {
                let s = s.map_err(|e| wav_error(path, e))?;
                if i % channels == 0 {
                    out.push((s as f64 / scale) as f32);
                }
            }
            out
        }
        hound::SampleFormat::Float => {
            if spec.bits_per_sample != 32 {
                return Err(Error::Unsupported {
                    path: path.into(),
                    reason: format!("{}-bit float", spec.bits_per_sample),
                });
            }
            let mut out = Vec::new();
            for (i, s) in reader.into_samples::<f32>().enumerate() {
                let s = s.map_err(|e| wav_error(path, e))?;
                if !s.is_finite() {
                    return Err(Error::Format {
                        path: path.into(),
                        reason: "non-finite float sample".into(),
                    });
                }
                if i % channels == 0 {
                    out.push(s.clamp(-1.0, 1.0));
                }
            }
            out
        }
    };
    let mut clip = AudioClip {
        samples: raw,
        sample_rate: spec.sample_rate,
        source_path: Some(path.display().to_string()),
    };
    if clip.sample_rate != target_rate {
        clip = resample_linear(&clip, target_rate);
    }
    Ok(clip)
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        hound::Error::FormatError(reason) => Error::Format {
            path: path.into(),
            reason: reason.into(),
        },
        hound::Error::Unsupported => Error::Unsupported {
            path: path.into(),
            reason: "encoding not supported".into(),
        },
        other => Error::Format {
            path: path.into(),
            reason: other.to_string(),
        },
    }
}

/// Write a clip as 16-bit PCM mono.
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    for &s in &clip.samples {
        let v = (s.clamp(-1.0, 1.0) as f64 * 32767.0).round() as i16;
        w.write_sample(v).map_err(|e| wav_error(path, e))?;
    }
    w.finalize().map_err(|e| wav_error(path, e))
}

/// Linear-interpolation resampler.
pub fn resample_linear(clip: &AudioClip, target_rate: u32) -> AudioClip {
    let ratio = clip.sample_rate as f64 / target_rate as f64;
    let n_out = ((clip.len() as f64) / ratio).round() as usize;
    AudioClip {
        samples: resample_to_len(&clip.samples, n_out, ratio),
        sample_rate: target_rate,
        source_path: clip.source_path.clone(),
    }
}

/// Read `src` at positions `i * step` for `i in 0..n_out`, interpolating linearly.
pub(crate) fn resample_to_len(src: &[f32], n_out: usize, step: f64) -> Vec<f32> {
    if src.is_empty() {
        return vec![0.0; n_out];
    }
    let last = src.len() - 1;
    (0..n_out)
        .map(|i| {
            let pos = i as f64 * step;
            let i0 = pos.floor() as usize;
            if i0 >= last {
                return src[last];
            }
            let frac = pos - i0 as f64;
            ((1.0 - frac) * src[i0] as f64 + frac * src[i0 + 1] as f64) as f32
        })
        .collect()
}

/// Force a clip to exactly one second at `target_rate`: longer clips are
/// center-cropped, shorter ones zero-padded symmetrically (extra sample on
/// the right).
pub fn standardize_clip(clip: &AudioClip, target_rate: u32) -> AudioClip {
    let clip = if clip.sample_rate != target_rate {
        resample_linear(clip, target_rate)
    } else {
        clip.clone()
    };
    let target = target_rate as usize;
    let len = clip.len();
    let samples = if len == target {
        clip.samples
    } else if len > target {
        let start = (len - target) / 2;
        clip.samples[start..start + target].to_vec()
    } else {
        let left = (target - len) / 2;
        let mut out = vec![0.0f32; target];
        out[left..left + len].copy_from_slice(&clip.samples);
        out
    };
    AudioClip {
        samples,
        sample_rate: target_rate,
        source_path: clip.source_path,
    }
}

// ---------------------------------------------------------------------------
// Silence synthesis
// ---------------------------------------------------------------------------

/// Where a synthesized silence clip comes from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SilenceCrop {
    pub noise_index: usize,
    pub start: usize,
    pub gain: f32,
}

fn silence_crops(noise_lens: &[usize], clip_len: usize, count: usize, rng_seed: u64) -> Result<Vec<SilenceCrop>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let eligible: Vec<usize> = (0..noise_lens.len())
        .filter(|&i| noise_lens[i] >= clip_len)
        .collect();
    if eligible.is_empty() {
        return Err(Error::InsufficientNoise);
    }
    let mut rng = seed::rng(rng_seed);
    Ok((0..count)
        .map(|_| {
            let noise_index = eligible[rng.gen_range(0..eligible.len())];
            let start = rng.gen_range(0..=noise_lens[noise_index] - clip_len);
            let gain = rng.gen_range(0.0f32..=1.0);
            SilenceCrop {
                noise_index,
                start,
                gain,
            }
        })
        .collect())
}

fn apply_crop(noise: &AudioClip, crop: &SilenceCrop, clip_len: usize) -> AudioClip {
    AudioClip {
        samples: noise.samples[crop.start..crop.start + clip_len]
            .iter()
            .map(|s| s * crop.gain)
            .collect(),
        sample_rate: noise.sample_rate,
        source_path: None,
    }
}

/// Random one-second crops of random noise clips, each scaled by a random
/// gain in [0, 1].
pub fn make_silence_clips(noise_clips: &[AudioClip], count: usize, rng_seed: u64) -> Result<Vec<AudioClip>> {
    let Some(first) = noise_clips.first() else {
        return if count == 0 {
            Ok(Vec::new())
        } else {
            Err(Error::InsufficientNoise)
        };
    };
    let clip_len = first.sample_rate as usize;
    let lens: Vec<usize> = noise_clips.iter().map(AudioClip::len).collect();
    let crops = silence_crops(&lens, clip_len, count, rng_seed)?;
    Ok(crops
        .iter()
        .map(|c| apply_crop(&noise_clips[c.noise_index], c, clip_len))
        .collect())
}

/// Manifest path of a silence crop: `_silence_/<noise file>@<start>@<gain>`.
fn silence_path(noise_rel: &str, crop: &SilenceCrop) -> String {
    format!("{SILENCE_WORD}/{noise_rel}@{}@{:?}", crop.start, crop.gain)
}

fn parse_silence_path(path: &str) -> Option<(&str, usize, f32)> {
    let rest = path.strip_prefix(SILENCE_WORD)?.strip_prefix('/')?;
    let mut parts = rest.rsplitn(3, '@');
    let gain = parts.next()?.parse().ok()?;
    let start = parts.next()?.parse().ok()?;
    let noise = parts.next()?;
    Some((noise, start, gain))
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManifestConfig {
    pub seed: u64,
    /// Fraction of labelable training files that keep their label.
    pub labeled_fraction: f64,
    pub holdout_fraction: f64,
    /// Speaker-hash validation fraction; ignored when `validation_list` is set.
    pub validation_fraction: f64,
    pub validation_list: Option<PathBuf>,
    /// Out-of-vocabulary words whose training files all go to the unlabeled
    /// pool. `None` routes every out-of-vocabulary word there.
    pub unlabeled_only_words: Option<Vec<String>>,
    /// Number of silence clips to synthesize; `None` uses the mean file
    /// count of the command-word directories.
    pub silence_count: Option<usize>,
    pub sample_rate: u32,
}

impl Default for ManifestConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            labeled_fraction: 1.0,
            holdout_fraction: 0.1,
            validation_fraction: 0.1,
            validation_list: None,
            unlabeled_only_words: None,
            silence_count: None,
            sample_rate: SAMPLE_RATE,
        }
    }
}

impl ManifestConfig {
    fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.labeled_fraction) {
            return Err(Error::Config("labeled_fraction must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) || !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("split fractions must lie in [0, 1)".into()));
        }
        if self.holdout_fraction + self.validation_fraction >= 1.0 {
            return Err(Error::Config("holdout + validation fractions must be < 1".into()));
        }
        Ok(())
    }
}

/// Speaker id of a Speech-Commands file name (`<speaker>_nohash_<n>.wav`).
pub fn speaker_id(file_name: &str) -> &str {
    let stem = file_name.strip_suffix(".wav").unwrap_or(file_name);
    if let Some(i) = stem.find("_nohash_") {
        return &stem[..i];
    }
    stem.split('_').next().unwrap_or(stem)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(e.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_entries(dir)?
        .into_iter()
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
        .collect())
}

fn rel_path(root: &Path, p: &Path) -> String {
    p.strip_prefix(root)
        .unwrap_or(p)
        .components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

struct Candidate {
    path: String,
    word: String,
    speaker: String,
}

/// Build a deterministic manifest for the corpus under `root`.
pub fn build_manifest(root: &Path, config: &ManifestConfig) -> Result<Vec<ManifestEntry>> {
    config.validate()?;
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root not found"),
        ));
    }

    let mut files = Vec::new();
    let mut target_counts: BTreeMap<String, usize> = BTreeMap::new();
    for dir in sorted_entries(root)? {
        if !dir.is_dir() {
            continue;
        }
        let word = dir.file_name().unwrap().to_string_lossy().into_owned();
        if word.starts_with('_') {
            continue;
        }
        for f in wav_files(&dir)? {
            let name = f.file_name().unwrap().to_string_lossy().into_owned();
            if map_word_to_class(&word) != ClassLabel::Unknown {
                *target_counts.entry(word.clone()).or_default() += 1;
            }
            files.push(Candidate {
                path: rel_path(root, &f),
                speaker: speaker_id(&name).to_string(),
                word: word.clone(),
            });
        }
    }
    if files.is_empty() {
        return Err(Error::EmptyDataset(root.into()));
    }

    let noise_dir = root.join(NOISE_DIR);
    let silence_count = match config.silence_count {
        Some(n) => n,
        None if target_counts.is_empty() => 0,
        None => {
            let total: usize = target_counts.values().sum();
            (total as f64 / target_counts.len() as f64).round() as usize
        }
    };
    if silence_count > 0 {
        let noise_files = if noise_dir.is_dir() { wav_files(&noise_dir)? } else { Vec::new() };
        let mut lens = Vec::new();
        for f in &noise_files {
            lens.push(load_wav(f, config.sample_rate)?.len());
        }
        let crops = silence_crops(
            &lens,
            config.sample_rate as usize,
            silence_count,
            seed::derive(config.seed, &[0x5117]),
        )?;
        for crop in crops {
            let path = silence_path(&rel_path(root, &noise_files[crop.noise_index]), &crop);
            files.push(Candidate {
                speaker: path.clone(),
                path,
                word: SILENCE_WORD.to_string(),
            });
        }
    }

    let validation_paths: Option<BTreeSet<String>> = match &config.validation_list {
        Some(list) => {
            let text = fs::read_to_string(list).map_err(|e| Error::io(list, e))?;
            Some(
                text.lines()
                    .map(str::trim)
                    .filter(|l| !l.is_empty())
                    .map(String::from)
                    .collect(),
            )
        }
        None => None,
    };
    let validation_speakers: BTreeSet<&str> = match &validation_paths {
        Some(v) => files
            .iter()
            .filter(|c| v.contains(&c.path))
            .map(|c| c.speaker.as_str())
            .collect(),
        None => BTreeSet::new(),
    };

    let mut entries = Vec::with_capacity(files.len());
    let mut labelable: BTreeMap<ClassLabel, Vec<usize>> = BTreeMap::new();
    let mut train: Vec<(usize, bool)> = Vec::new();
    for (i, c) in files.iter().enumerate() {
        let label = map_word_to_class(&c.word);
        let u = seed::unit_hash(&c.speaker, config.seed);
        let split = if validation_paths.is_some() {
            if validation_speakers.contains(c.speaker.as_str()) {
                Some(Split::Validation)
            } else if u < config.holdout_fraction {
                Some(Split::Holdout)
            } else {
                None
            }
        } else if u < config.holdout_fraction {
            Some(Split::Holdout)
        } else if u < config.holdout_fraction + config.validation_fraction {
            Some(Split::Validation)
        } else {
            None
        };
        match split {
            Some(s) => entries.push(ManifestEntry {
                path: c.path.clone(),
                word: Some(c.word.clone()),
                label: Some(label),
                split: s,
            }),
            None => {
                let unlabeled_only = label == ClassLabel::Unknown
                    && match &config.unlabeled_only_words {
                        None => true,
                        Some(words) => words.iter().any(|w| w == &c.word),
                    };
                if !unlabeled_only {
                    labelable.entry(label).or_default().push(i);
                }
                train.push((i, unlabeled_only));
            }
        }
    }

    let keep = labeled_quotas(&labelable, config.labeled_fraction);
    let mut labeled: BTreeSet<usize> = BTreeSet::new();
    for (class, idxs) in &labelable {
        let mut idxs = idxs.clone();
        idxs.shuffle(&mut seed::rng(seed::derive(config.seed, &[0x1abe1, class.code() as u64])));
        labeled.extend(idxs.into_iter().take(keep[class]));
    }
    for (i, _) in train {
        let c = &files[i];
        let is_labeled = labeled.contains(&i);
        entries.push(ManifestEntry {
            path: c.path.clone(),
            word: Some(c.word.clone()),
            label: is_labeled.then(|| map_word_to_class(&c.word)),
            split: if is_labeled { Split::TrainLabeled } else { Split::TrainUnlabeled },
        });
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(entries)
}

/// Largest-remainder apportionment of `round(fraction * total)` labels
/// across classes in proportion to their sizes.
fn labeled_quotas(pools: &BTreeMap<ClassLabel, Vec<usize>>, fraction: f64) -> HashMap<ClassLabel, usize> {
    let total: usize = pools.values().map(Vec::len).sum();
    let want = (fraction * total as f64).round() as usize;
    let mut quotas: HashMap<ClassLabel, usize> = HashMap::new();
    let mut rema: Vec<(f64, ClassLabel)> = Vec::new();
    let mut assigned = 0;
    for (&class, idxs) in pools {
        let exact = fraction * idxs.len() as f64;
        let base = (exact.floor() as usize).min(idxs.len());
        quotas.insert(class, base);
        assigned += base;
        rema.push((exact - base as f64, class));
    }
    rema.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for (_, class) in rema {
        if assigned >= want {
            break;
        }
        let q = quotas.get_mut(&class).unwrap();
        if *q < pools[&class].len() {
            *q += 1;
            assigned += 1;
        }
    }
    quotas
}

pub fn write_manifest<W: Write>(mut w: W, entries: &[ManifestEntry]) -> Result<()> {
    for e in entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n").map_err(|e| Error::io("<manifest>", e))?;
    }
    Ok(())
}

pub fn manifest_to_string(entries: &[ManifestEntry]) -> String {
    let mut buf = Vec::new();
    write_manifest(&mut buf, entries).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("serde_json emits UTF-8")
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Loads manifest entries into standardized one-second clips, resolving
/// synthesized silence paths against the background recordings.
pub struct ClipLoader {
    root: PathBuf,
    sample_rate: u32,
    noise_cache: HashMap<String, AudioClip>,
}

impl ClipLoader {
    pub fn new(root: impl Into<PathBuf>, sample_rate: u32) -> Self {
        Self {
            root: root.into(),
            sample_rate,
            noise_cache: HashMap::new(),
        }
    }

    pub fn load(&mut self, entry: &ManifestEntry) -> Result<AudioClip> {
        if let Some((noise, start, gain)) = parse_silence_path(&entry.path) {
            if !self.noise_cache.contains_key(noise) {
                let clip = load_wav(&self.root.join(noise), self.sample_rate)?;
                self.noise_cache.insert(noise.to_string(), clip);
            }
            let src = &self.noise_cache[noise];
            let len = self.sample_rate as usize;
            if start + len > src.len() {
                return Err(Error::InsufficientNoise);
            }
            let mut clip = apply_crop(src, &SilenceCrop { noise_index: 0, start, gain }, len);
            clip.source_path = Some(entry.path.clone());
            return Ok(clip);
        }
        let clip = load_wav(&self.root.join(&entry.path), self.sample_rate)?;
        Ok(standardize_clip(&clip, self.sample_rate))
    }
}

/// Every recording under `_background_noise_`, sorted by path. Empty when
/// the directory is absent.
pub fn load_noise_bank(root: &Path, sample_rate: u32) -> Result<Vec<AudioClip>> {
    let dir = root.join(NOISE_DIR);
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    wav_files(&dir)?.iter().map(|f| load_wav(f, sample_rate)).collect()
}
