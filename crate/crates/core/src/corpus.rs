//! Deterministic synthetic corpus of bonafide and spoofed feature-sequence
//! clips with named attack families and held-out out-of-domain families.
//!
//! Bonafide clips are a smooth AR(1) process (coefficient 0.9) plus two
//! low-frequency sinusoidal components per dimension on top of a fixed
//! per-dimension offset profile. Spoof families corrupt that base:
//!
//!   A01  additive high-frequency ripple: an alternating-sign component
//!        (amplitude 0.3) across the feature bins of every frame
//!   A02  amplitude quantization to 8 fixed levels (floor grid)
//!   A03  moving-average temporal smear, window 5, zero-padded edges
//!   A04  a fixed contiguous band of 4 dimensions zeroed
//!   A05  constant offset +0.5 on all dimensions
//!
//! A01-A03 are the in-domain training families; A04 and A05 only appear in
//! the out-of-domain evaluation split.

use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{hash_str, Rng};
use crate::tensor::Tensor;

pub const FAMILY_BONA: &str = "bona";
pub const SPOOF_FAMILIES: [&str; 5] = ["A01", "A02", "A03", "A04", "A05"];
pub const SPLITS: [&str; 4] = ["train", "dev", "eval_id", "eval_ood"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Bonafide,
    Spoof,
}

impl Label {
    pub fn code(self) -> u8 {
        match self {
            Label::Bonafide => 0,
            Label::Spoof => 1,
        }
    }

    pub fn from_code(c: u8) -> Result<Label> {
        match c {
            0 => Ok(Label::Bonafide),
            1 => Ok(Label::Spoof),
            other => Err(Error::Format(format!("unknown label code {other}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Bonafide => "bonafide",
            Label::Spoof => "spoof",
        }
    }
}

pub fn family_code(family: &str) -> Result<u8> {
    if family == FAMILY_BONA {
        return Ok(0);
    }
    SPOOF_FAMILIES
        .iter()
        .position(|f| *f == family)
        .map(|i| (i + 1) as u8)
        .ok_or_else(|| Error::Validation(format!("unknown family '{family}'")))
}

pub fn family_from_code(code: u8) -> Result<&'static str> {
    match code {
        0 => Ok(FAMILY_BONA),
        c if (c as usize) <= SPOOF_FAMILIES.len() => Ok(SPOOF_FAMILIES[c as usize - 1]),
        other => Err(Error::Format(format!("unknown family code {other}"))),
    }
}

#[derive(Debug, Clone)]
pub struct Clip {
    pub id: String,
    pub frames: Vec<f64>, // row-major [t, d_in], f32-representable values
    pub t: usize,
    pub d_in: usize,
    pub label: Label,
    pub family: String,
    pub split: String,
}

impl Clip {
    pub fn frames_tensor(&self) -> Tensor {
        Tensor::from_vec(&[self.t, self.d_in], self.frames.clone()).expect("clip shape is valid")
    }
}

/// Generation constants; serialized into the manifest so a dataset can be
/// regenerated bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub ar_coeff: f64,
    pub ar_noise_std: f64,
    /// per-dimension offset, except inside the zeroed band where it is 0
    pub dc_offset: f64,
    pub sin1_amp: f64,
    pub sin1_freq_lo: f64,
    pub sin1_freq_hi: f64,
    pub sin2_amp: f64,
    pub sin2_freq_lo: f64,
    pub sin2_freq_hi: f64,
    pub ripple_amp: f64,
    pub quant_levels: usize,
    pub quant_lo: f64,
    pub quant_step: f64,
    pub smear_window: usize,
    pub band_start: usize,
    pub band_len: usize,
    pub const_offset: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            ar_coeff: 0.9,
            ar_noise_std: 0.1,
            dc_offset: 6.0,
            sin1_amp: 0.4,
            sin1_freq_lo: 0.02,
            sin1_freq_hi: 0.05,
            sin2_amp: 0.8,
            sin2_freq_lo: 0.12,
            sin2_freq_hi: 0.2,
            ripple_amp: 0.3,
            quant_levels: 8,
            quant_lo: -2.8,
            quant_step: 1.6,
            smear_window: 5,
            band_start: 6,
            band_len: 4,
            const_offset: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub name: String,
    pub bona: usize,
    /// (family, count) pairs for the spoof side
    pub spoof: Vec<(String, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: u32,
    pub seed: u64,
    pub d_in: usize,
    pub t_min: usize,
    pub t_max: usize,
    pub splits: Vec<SplitSpec>,
    pub gen: GenParams,
}

impl CorpusManifest {
    /// Spec-default corpus: 2000 train (A01-A03), 400 dev, 400 in-domain
    /// eval, 400 out-of-domain eval (A04-A05 plus bonafide for scoring).
    pub fn default_with_seed(seed: u64) -> CorpusManifest {
        CorpusManifest::sized(seed, 2000, 400, 400)
    }

    /// Same structure with custom split sizes (each split half bonafide).
    pub fn sized(seed: u64, train: usize, dev: usize, eval: usize) -> CorpusManifest {
        let id_families = ["A01", "A02", "A03"];
        let ood_families = ["A04", "A05"];
        let spread = |total: usize, fams: &[&str]| -> Vec<(String, usize)> {
            let base = total / fams.len();
            let extra = total % fams.len();
            fams.iter()
                .enumerate()
                .map(|(i, f)| (f.to_string(), base + usize::from(i < extra)))
                .collect()
        };
        CorpusManifest {
            version: 1,
            seed,
            d_in: 16,
            t_min: 40,
            t_max: 120,
            splits: vec![
                SplitSpec {
                    name: "train".into(),
                    bona: train / 2,
                    spoof: spread(train - train / 2, &id_families),
                },
                SplitSpec {
                    name: "dev".into(),
                    bona: dev / 2,
                    spoof: spread(dev - dev / 2, &id_families),
                },
                SplitSpec {
                    name: "eval_id".into(),
                    bona: eval / 2,
                    spoof: spread(eval - eval / 2, &id_families),
                },
                SplitSpec {
                    name: "eval_ood".into(),
                    bona: eval / 2,
                    spoof: spread(eval - eval / 2, &ood_families),
                },
            ],
            gen: GenParams::default(),
        }
    }

    pub fn total_clips(&self) -> usize {
        self.splits
            .iter()
            .map(|s| s.bona + s.spoof.iter().map(|(_, c)| c).sum::<usize>())
            .sum()
    }
}

/// Bonafide base process for one clip.
fn gen_base(t: usize, d_in: usize, gp: &GenParams, rng: &mut Rng) -> Vec<f64> {
    let mut frames = vec![0.0; t * d_in];
    let band = gp.band_start..(gp.band_start + gp.band_len).min(d_in);
    for dim in 0..d_in {
        let dc = if band.contains(&dim) { 0.0 } else { gp.dc_offset };
        let f1 = rng.uniform(gp.sin1_freq_lo, gp.sin1_freq_hi);
        let p1 = rng.uniform(0.0, std::f64::consts::TAU);
        let f2 = rng.uniform(gp.sin2_freq_lo, gp.sin2_freq_hi);
        let p2 = rng.uniform(0.0, std::f64::consts::TAU);
        // start at the stationary distribution
        let stationary_std = gp.ar_noise_std / (1.0 - gp.ar_coeff * gp.ar_coeff).sqrt();
        let mut ar = rng.normal(0.0, stationary_std);
        for ti in 0..t {
            if ti > 0 {
                ar = gp.ar_coeff * ar + rng.normal(0.0, gp.ar_noise_std);
            }
            let s1 = gp.sin1_amp * (std::f64::consts::TAU * f1 * ti as f64 + p1).sin();
            let s2 = gp.sin2_amp * (std::f64::consts::TAU * f2 * ti as f64 + p2).sin();
            frames[ti * d_in + dim] = dc + ar + s1 + s2;
        }
    }
    frames
}

fn apply_family(frames: &mut [f64], t: usize, d_in: usize, family: &str, gp: &GenParams) -> Result<()> {
    match family {
        "bona" => {}
        "A01" => {
            // spectral ripple: alternating sign across feature bins
            for ti in 0..t {
                for dim in 0..d_in {
                    let sign = if dim % 2 == 0 { 1.0 } else { -1.0 };
                    frames[ti * d_in + dim] += gp.ripple_amp * sign;
                }
            }
        }
        "A02" => {
            let top = gp.quant_lo + (gp.quant_levels - 1) as f64 * gp.quant_step;
            for v in frames.iter_mut() {
                let level = ((*v - gp.quant_lo) / gp.quant_step).floor();
                *v = (gp.quant_lo + level * gp.quant_step).clamp(gp.quant_lo, top);
            }
        }
        "A03" => {
            let w = gp.smear_window;
            let half = w / 2;
            let mut smeared = vec![0.0; t * d_in];
            for ti in 0..t {
                for dim in 0..d_in {
                    let mut acc = 0.0;
                    for off in 0..w {
                        let src = ti as isize + off as isize - half as isize;
                        if src >= 0 && (src as usize) < t {
                            acc += frames[src as usize * d_in + dim];
                        }
                        // out-of-range taps contribute zero
                    }
                    smeared[ti * d_in + dim] = acc / w as f64;
                }
            }
            frames.copy_from_slice(&smeared);
        }
        "A04" => {
            let band = gp.band_start..(gp.band_start + gp.band_len).min(d_in);
            for ti in 0..t {
                for dim in band.clone() {
                    frames[ti * d_in + dim] = 0.0;
                }
            }
        }
        "A05" => {
            for v in frames.iter_mut() {
                *v += gp.const_offset;
            }
        }
        other => return Err(Error::Validation(format!("unknown family '{other}'"))),
    }
    Ok(())
}

/// Generate one clip. Deterministic in (family, t, rng state); values are
/// rounded to f32 precision so in-memory clips match the on-disk format.
pub fn gen_clip(family: &str, t: usize, d_in: usize, gp: &GenParams, rng: &mut Rng) -> Result<Vec<f64>> {
    family_code(family)?;
    if t == 0 || d_in == 0 {
        return Err(Error::Validation("empty clip dimensions".into()));
    }
    let mut frames = gen_base(t, d_in, gp, rng);
    apply_family(&mut frames, t, d_in, family, gp)?;
    for v in frames.iter_mut() {
        *v = *v as f32 as f64;
    }
    Ok(frames)
}

/// Generate the full corpus in manifest order. Each clip draws from an
/// independent substream keyed by its id, so generation is order-free and
/// parallelizable per clip.
pub fn gen_dataset(manifest: &CorpusManifest) -> Result<Vec<Clip>> {
    let base = Rng::new(manifest.seed);
    let mut clips = Vec::with_capacity(manifest.total_clips());
    for split in &manifest.splits {
        let emit = |family: &str, count: usize, clips: &mut Vec<Clip>| -> Result<()> {
            for i in 0..count {
                let id = format!("{}_{}_{:05}", split.name, family, i);
                let mut rng = base.derive(hash_str(&id));
                let t = rng.int_range(manifest.t_min, manifest.t_max);
                let frames = gen_clip(family, t, manifest.d_in, &manifest.gen, &mut rng)?;
                clips.push(Clip {
                    id,
                    frames,
                    t,
                    d_in: manifest.d_in,
                    label: if family == FAMILY_BONA {
                        Label::Bonafide
                    } else {
                        Label::Spoof
                    },
                    family: family.to_string(),
                    split: split.name.clone(),
                });
            }
            Ok(())
        };
        emit(FAMILY_BONA, split.bona, &mut clips)?;
        for (family, count) in &split.spoof {
            emit(family, *count, &mut clips)?;
        }
    }
    Ok(clips)
}

// ── on-disk dataset format ───────────────────────────────────────────

pub fn manifest_json(manifest: &CorpusManifest) -> Result<String> {
    serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Format(format!("manifest serialization: {e}")))
}

/// Directory layout: manifest.json + clips.bin + splits.csv.
pub fn save_dataset(dir: &Path, manifest: &CorpusManifest, clips: &[Clip]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;

    let bin_path = dir.join("clips.bin");
    let mut bin: Vec<u8> = Vec::new();
    for clip in clips {
        bin.extend_from_slice(&(clip.id.len() as u32).to_le_bytes());
        bin.extend_from_slice(clip.id.as_bytes());
        bin.extend_from_slice(&(clip.t as u32).to_le_bytes());
        bin.extend_from_slice(&(clip.d_in as u32).to_le_bytes());
        bin.push(clip.label.code());
        bin.push(family_code(&clip.family)?);
        for v in &clip.frames {
            bin.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(&bin_path, bin).map_err(|e| Error::io(&bin_path, e))?;

    let csv_path = dir.join("splits.csv");
    let mut csv = String::from("id,split,family,label\n");
    for clip in clips {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            clip.id,
            clip.split,
            clip.family,
            clip.label.as_str()
        ));
    }
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<(CorpusManifest, Vec<Clip>)> {
    let manifest_path = dir.join("manifest.json");
    let json = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: CorpusManifest =
        serde_json::from_str(&json).map_err(|e| Error::Format(format!("manifest parse: {e}")))?;

    // split assignment comes from splits.csv
    let csv_path = dir.join("splits.csv");
    let csv = fs::read_to_string(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let mut split_of = std::collections::HashMap::new();
    for line in csv.lines().skip(1) {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let id = parts
            .next()
            .ok_or_else(|| Error::Format(format!("bad splits.csv line '{line}'")))?;
        let split = parts
            .next()
            .ok_or_else(|| Error::Format(format!("bad splits.csv line '{line}'")))?;
        split_of.insert(id.to_string(), split.to_string());
    }

    let bin_path = dir.join("clips.bin");
    let mut file = fs::File::open(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)
        .map_err(|e| Error::io(&bin_path, e))?;

    let mut clips = Vec::new();
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<std::ops::Range<usize>> {
        if *pos + n > bytes.len() {
            return Err(Error::Format("clips.bin truncated".into()));
        }
        let r = *pos..*pos + n;
        *pos += n;
        Ok(r)
    };
    while pos < bytes.len() {
        let id_len = u32::from_le_bytes(bytes[take(&mut pos, 4)?].try_into().unwrap()) as usize;
        let id = String::from_utf8(bytes[take(&mut pos, id_len)?].to_vec())
            .map_err(|e| Error::Format(format!("clip id not utf-8: {e}")))?;
        let t = u32::from_le_bytes(bytes[take(&mut pos, 4)?].try_into().unwrap()) as usize;
        let d_in = u32::from_le_bytes(bytes[take(&mut pos, 4)?].try_into().unwrap()) as usize;
        let label = Label::from_code(bytes[take(&mut pos, 1)?][0])?;
        let family = family_from_code(bytes[take(&mut pos, 1)?][0])?.to_string();
        let mut frames = Vec::with_capacity(t * d_in);
        for _ in 0..t * d_in {
            let raw = f32::from_le_bytes(bytes[take(&mut pos, 4)?].try_into().unwrap());
            frames.push(raw as f64);
        }
        let split = split_of
            .get(&id)
            .cloned()
            .ok_or_else(|| Error::Format(format!("clip '{id}' missing from splits.csv")))?;
        clips.push(Clip {
            id,
            frames,
            t,
            d_in,
            label,
            family,
            split,
        });
    }
    Ok((manifest, clips))
}

/// Convenience view over a loaded dataset.
pub struct Dataset {
    pub manifest: CorpusManifest,
    pub clips: Vec<Clip>,
}

impl Dataset {
    pub fn generate(manifest: &CorpusManifest) -> Result<Dataset> {
        Ok(Dataset {
            manifest: manifest.clone(),
            clips: gen_dataset(manifest)?,
        })
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let (manifest, clips) = load_dataset(dir)?;
        Ok(Dataset { manifest, clips })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_dataset(dir, &self.manifest, &self.clips)
    }

    pub fn split(&self, name: &str) -> Vec<&Clip> {
        self.clips.iter().filter(|c| c.split == name).collect()
    }

    pub fn split_names(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for c in &self.clips {
            if !names.contains(&c.split) {
                names.push(c.split.clone());
            }
        }
        names
    }
}

// ── learnability probe ───────────────────────────────────────────────

/// Logistic regression on per-clip time-mean features. Used as a built-in
/// sanity oracle: the train families must be separable from bonafide while
/// the held-out families must not be (by this linear probe).
pub struct LogisticProbe {
    weights: Vec<f64>, // d_in features then bias
    feat_mean: Vec<f64>,
    feat_std: Vec<f64>,
}

fn mean_features(clip: &Clip) -> Vec<f64> {
    let mut f = vec![0.0; clip.d_in];
    for row in clip.frames.chunks_exact(clip.d_in) {
        for (acc, v) in f.iter_mut().zip(row) {
            *acc += v;
        }
    }
    for v in f.iter_mut() {
        *v /= clip.t as f64;
    }
    f
}

impl LogisticProbe {
    /// Full-batch gradient descent on a linear logistic model over z-scored
    /// time-mean features. Standardization is an affine reparameterization,
    /// so the decision function stays linear in the raw pooled features.
    pub fn fit(clips: &[&Clip], epochs: usize, lr: f64) -> Result<LogisticProbe> {
        if clips.is_empty() {
            return Err(Error::Validation("probe training set is empty".into()));
        }
        let d = clips[0].d_in;
        let raw: Vec<Vec<f64>> = clips.iter().map(|c| mean_features(c)).collect();
        let n = clips.len() as f64;
        let mut feat_mean = vec![0.0; d];
        for f in &raw {
            for (m, v) in feat_mean.iter_mut().zip(f) {
                *m += v / n;
            }
        }
        let mut feat_std = vec![0.0; d];
        for f in &raw {
            for ((s, v), m) in feat_std.iter_mut().zip(f).zip(&feat_mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        for s in feat_std.iter_mut() {
            *s = s.sqrt().max(1e-9);
        }
        let feats: Vec<Vec<f64>> = raw
            .iter()
            .map(|f| {
                f.iter()
                    .zip(&feat_mean)
                    .zip(&feat_std)
                    .map(|((v, m), s)| (v - m) / s)
                    .collect()
            })
            .collect();
        let labels: Vec<f64> = clips
            .iter()
            .map(|c| if c.label == Label::Spoof { 1.0 } else { 0.0 })
            .collect();
        let mut w = vec![0.0; d + 1];
        for _ in 0..epochs {
            let mut grad = vec![0.0; d + 1];
            for (x, y) in feats.iter().zip(&labels) {
                let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + w[d];
                let p = 1.0 / (1.0 + (-z).exp());
                let err = p - y;
                for (g, xv) in grad.iter_mut().zip(x) {
                    *g += err * xv / n;
                }
                grad[d] += err / n;
            }
            for (wv, g) in w.iter_mut().zip(&grad) {
                *wv -= lr * g;
            }
        }
        Ok(LogisticProbe {
            weights: w,
            feat_mean,
            feat_std,
        })
    }

    pub fn predict_spoof(&self, clip: &Clip) -> bool {
        let d = clip.d_in;
        let x = mean_features(clip);
        let z: f64 = x
            .iter()
            .zip(&self.feat_mean)
            .zip(&self.feat_std)
            .zip(&self.weights)
            .map(|(((v, m), s), w)| (v - m) / s * w)
            .sum::<f64>()
            + self.weights[d];
        z > 0.0
    }

    pub fn accuracy(&self, clips: &[&Clip]) -> f64 {
        if clips.is_empty() {
            return 0.0;
        }
        let correct = clips
            .iter()
            .filter(|c| self.predict_spoof(c) == (c.label == Label::Spoof))
            .count();
        correct as f64 / clips.len() as f64
    }
}
