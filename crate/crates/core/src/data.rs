//! Rated-clip datasets: JSONL reading and writing, train/validation
//! splitting, and a synthetic generator with system-level quality structure.
//!
//! One sample per line:
//!
//! ```text
//! {"clip_id":"sys00_clip000","system_id":"sys00","features":[0.1,-0.3],"scores":{"MI":3.2,"TA":2.9}}
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatedSample {
    pub clip_id: String,
    pub system_id: String,
    pub features: Vec<f64>,
    /// Ground-truth MOS per dimension; serialized in sorted key order.
    pub scores: BTreeMap<String, f64>,
}

/// Closed interval of valid ratings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatingScale {
    pub min: f64,
    pub max: f64,
}

impl Default for RatingScale {
    fn default() -> Self {
        Self { min: 1.0, max: 5.0 }
    }
}

impl RatingScale {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min < max) || !min.is_finite() || !max.is_finite() {
            return Err(Error::domain(format!(
                "invalid rating scale [{min}, {max}]"
            )));
        }
        Ok(Self { min, max })
    }

    pub fn contains(&self, y: f64) -> bool {
        (self.min..=self.max).contains(&y)
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.min + self.max)
    }
}

/// Dimension names shared by every sample, in sorted order.
pub fn dimension_names(samples: &[RatedSample]) -> Vec<String> {
    samples
        .first()
        .map(|s| s.scores.keys().cloned().collect())
        .unwrap_or_default()
}

/// Row-major feature matrix of the samples.
pub fn feature_matrix(samples: &[RatedSample]) -> Array2<f64> {
    let width = samples.first().map_or(0, |s| s.features.len());
    Array2::from_shape_fn((samples.len(), width), |(r, c)| samples[r].features[c])
}

/// Ground-truth score vector per requested dimension.
pub fn score_vectors<S: AsRef<str>>(samples: &[RatedSample], dims: &[S]) -> Vec<Vec<f64>> {
    dims.iter()
        .map(|d| samples.iter().map(|s| s.scores[d.as_ref()]).collect())
        .collect()
}

/// Checks one sample against the dataset-wide shape taken from the first sample.
fn validate_sample(
    sample: &RatedSample,
    reference: Option<&RatedSample>,
    scale: RatingScale,
) -> std::result::Result<(), String> {
    if sample.features.is_empty() {
        return Err("field `features` is empty".into());
    }
    if let Some(k) = sample.features.iter().position(|v| !v.is_finite()) {
        return Err(format!("field `features[{k}]` is not finite"));
    }
    if sample.scores.is_empty() {
        return Err("field `scores` is empty".into());
    }
    for (dim, &y) in &sample.scores {
        if !y.is_finite() || !scale.contains(y) {
            return Err(format!(
                "field `scores.{dim}` = {y} outside rating scale [{}, {}]",
                scale.min, scale.max
            ));
        }
    }
    if let Some(first) = reference {
        if sample.features.len() != first.features.len() {
            return Err(format!(
                "field `features` has length {}, expected {}",
                sample.features.len(),
                first.features.len()
            ));
        }
        if !sample.scores.keys().eq(first.scores.keys()) {
            return Err(format!(
                "field `scores` has dimensions {:?}, expected {:?}",
                sample.scores.keys().collect::<Vec<_>>(),
                first.scores.keys().collect::<Vec<_>>()
            ));
        }
    }
    Ok(())
}

/// Parses and validates JSONL from any reader. Blank lines are skipped;
/// reported line numbers are 1-based.
pub fn read_dataset<R: BufRead>(
    reader: R,
    source: &Path,
    scale: RatingScale,
) -> Result<Vec<RatedSample>> {
    let mut samples: Vec<RatedSample> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: source.to_path_buf(),
            line: idx + 1,
            message,
        };
        let sample: RatedSample =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        validate_sample(&sample, samples.first(), scale).map_err(parse_err)?;
        samples.push(sample);
    }
    if samples.is_empty() {
        return Err(Error::domain(format!(
            "empty dataset: {}",
            source.display()
        )));
    }
    Ok(samples)
}

pub fn load_dataset(path: impl AsRef<Path>, scale: RatingScale) -> Result<Vec<RatedSample>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(BufReader::new(file), path, scale)
}

pub fn write_dataset<W: Write>(mut writer: W, samples: &[RatedSample]) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut writer, s)?;
        writer
            .write_all(b"\n")
            .map_err(|e| Error::io("<dataset>", e))?;
    }
    writer.flush().map_err(|e| Error::io("<dataset>", e))
}

pub fn save_dataset(path: impl AsRef<Path>, samples: &[RatedSample]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_dataset(BufWriter::new(file), samples).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// Splits into `(train, val)`, preserving input order inside each side.
///
/// With `by_system`, `round(val_fraction * n_systems)` whole systems are held
/// out. Otherwise each system contributes `round(val_fraction * n_clips)` of
/// its clips to validation.
pub fn split_dataset(
    samples: &[RatedSample],
    val_fraction: f64,
    seed: u64,
    by_system: bool,
) -> Result<(Vec<RatedSample>, Vec<RatedSample>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::domain(format!(
            "val_fraction {val_fraction} must lie in (0, 1)"
        )));
    }
    let mut by_sys: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (k, s) in samples.iter().enumerate() {
        by_sys.entry(s.system_id.as_str()).or_default().push(k);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_val = vec![false; samples.len()];
    if by_system {
        let mut systems: Vec<&str> = by_sys.keys().copied().collect();
        systems.shuffle(&mut rng);
        let n_val = (val_fraction * systems.len() as f64).round() as usize;
        for sys in &systems[..n_val.min(systems.len())] {
            for &k in &by_sys[sys] {
                is_val[k] = true;
            }
        }
    } else {
        for clips in by_sys.values() {
            let mut clips = clips.clone();
            clips.shuffle(&mut rng);
            let n_val = (val_fraction * clips.len() as f64).round() as usize;
            for &k in &clips[..n_val.min(clips.len())] {
                is_val[k] = true;
            }
        }
    }
    let (val, train): (Vec<_>, Vec<_>) =
        samples.iter().cloned().zip(&is_val).partition(|(_, &v)| v);
    let train: Vec<RatedSample> = train.into_iter().map(|(s, _)| s).collect();
    let val: Vec<RatedSample> = val.into_iter().map(|(s, _)| s).collect();
    if train.is_empty() || val.is_empty() {
        return Err(Error::domain(format!(
            "split with val_fraction {val_fraction} leaves {} train and {} validation samples",
            train.len(),
            val.len()
        )));
    }
    Ok((train, val))
}

/// Parameters of the synthetic MOS dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_systems: usize,
    pub clips_per_system: usize,
    pub feature_dim: usize,
    pub dimension_names: Vec<String>,
    /// Distance between the lowest and highest latent system level.
    pub system_quality_spread: f64,
    /// Standard deviation of per-clip rating noise around the system level.
    pub clip_noise_sd: f64,
    /// Share of each feature's variance carried by the scores.
    pub signal_to_noise: f64,
    pub scale: RatingScale,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_systems: 8,
            clips_per_system: 25,
            feature_dim: 16,
            dimension_names: vec!["MI".into(), "TA".into()],
            system_quality_spread: 2.0,
            clip_noise_sd: 0.5,
            signal_to_noise: 0.5,
            scale: RatingScale::default(),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_systems == 0 || self.clips_per_system == 0 || self.feature_dim == 0 {
            return Err(Error::domain(
                "n_systems, clips_per_system and feature_dim must be >= 1",
            ));
        }
        if self.dimension_names.is_empty() {
            return Err(Error::domain("at least one score dimension is required"));
        }
        let unique: BTreeSet<&String> = self.dimension_names.iter().collect();
        if unique.len() != self.dimension_names.len() {
            return Err(Error::domain("dimension names must be unique"));
        }
        if !(self.system_quality_spread >= 0.0) || !(self.clip_noise_sd >= 0.0) {
            return Err(Error::domain("spread and clip noise must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.signal_to_noise) {
            return Err(Error::domain("signal_to_noise must lie in [0, 1]"));
        }
        RatingScale::new(self.scale.min, self.scale.max)?;
        Ok(())
    }

    /// Latent system levels for one dimension, evenly spaced around the
    /// scale midpoint. Index `k` is the `k`-th lowest level.
    pub fn levels(&self) -> Vec<f64> {
        let mid = self.scale.midpoint();
        if self.n_systems == 1 {
            return vec![mid];
        }
        (0..self.n_systems)
            .map(|k| {
                mid + self.system_quality_spread * (k as f64 / (self.n_systems - 1) as f64 - 0.5)
            })
            .collect()
    }
}

/// Generated samples together with the latent level of every system.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub samples: Vec<RatedSample>,
    /// `latent_levels[d][s]`: latent level of system `s` on dimension `d`.
    pub latent_levels: Vec<Vec<f64>>,
}

pub fn system_id(k: usize) -> String {
    format!("sys{k:02}")
}

/// Generates a synthetic dataset.
///
/// System `s` gets, per dimension, a latent level from [`SynthSpec::levels`]
/// (ascending in `s` for the first dimension, a seeded permutation for the
/// others). A clip's score is its system level plus Gaussian noise, clipped
/// to the scale. Features are `sqrt(snr) * L z + sqrt(1 - snr) * e`, where `z`
/// holds the clip's standardized scores, `L` is a fixed Gaussian loading
/// matrix scaled so the informative part has unit variance, and `e` is
/// standard normal distractor noise.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_dims = spec.dimension_names.len();
    let base = spec.levels();

    let latent_levels: Vec<Vec<f64>> = (0..n_dims)
        .map(|d| {
            let mut lv = base.clone();
            if d > 0 {
                lv.shuffle(&mut rng);
            }
            lv
        })
        .collect();

    let load_scale = 1.0 / (n_dims as f64).sqrt();
    let loadings: Vec<Vec<f64>> = (0..n_dims)
        .map(|_| {
            (0..spec.feature_dim)
                .map(|_| load_scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect::<Vec<f64>>()
        })
        .collect();

    // z normalizes a score by the spread a clip score has across the dataset
    let level_var = if spec.n_systems > 1 {
        let mean = base.iter().sum::<f64>() / base.len() as f64;
        base.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / base.len() as f64
    } else {
        0.0
    };
    let score_sd = (level_var + spec.clip_noise_sd.powi(2)).sqrt();
    let score_sd = if score_sd > 0.0 { score_sd } else { 1.0 };
    let mid = spec.scale.midpoint();

    let signal = spec.signal_to_noise.sqrt();
    let distractor = (1.0 - spec.signal_to_noise).sqrt();

    let mut samples = Vec::with_capacity(spec.n_systems * spec.clips_per_system);
    for sys in 0..spec.n_systems {
        for clip in 0..spec.clips_per_system {
            let scores: Vec<f64> = latent_levels
                .iter()
                .map(|levels| {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    (levels[sys] + spec.clip_noise_sd * noise).clamp(spec.scale.min, spec.scale.max)
                })
                .collect();
            let features = (0..spec.feature_dim)
                .map(|k| {
                    let informative: f64 = scores
                        .iter()
                        .zip(&loadings)
                        .map(|(y, l)| (y - mid) / score_sd * l[k])
                        .sum();
                    let e: f64 = StandardNormal.sample(&mut rng);
                    signal * informative + distractor * e
                })
                .collect();
            samples.push(RatedSample {
                clip_id: format!("{}_clip{clip:03}", system_id(sys)),
                system_id: system_id(sys),
                features,
                scores: spec.dimension_names.iter().cloned().zip(scores).collect(),
            });
        }
    }
    Ok(SynthDataset {
        samples,
        latent_levels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(text: &str) -> Result<Vec<RatedSample>> {
        read_dataset(
            text.as_bytes(),
            Path::new("mem.jsonl"),
            RatingScale::default(),
        )
    }

    const LINE_A: &str =
        r#"{"clip_id":"c1","system_id":"s1","features":[0.5,1.0],"scores":{"MI":3.5,"TA":2.0}}"#;
    const LINE_B: &str =
        r#"{"clip_id":"c2","system_id":"s2","features":[-0.5,0.25],"scores":{"TA":4.0,"MI":1.0}}"#;

    #[test]
    fn parses_valid_lines() {
        let s = parse(&format!("{LINE_A}\n{LINE_B}\n")).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[1].system_id, "s2");
        assert_eq!(s[1].features, vec![-0.5, 0.25]);
        assert_eq!(s[1].scores["TA"], 4.0);
    }

    #[test]
    fn empty_input_is_rejected() {
        let err = parse("").unwrap_err();
        assert!(err.to_string().contains("empty dataset"), "{err}");
        assert!(parse("\n\n").is_err());
    }

    #[test]
    fn out_of_range_score_names_line_and_field() {
        let bad = LINE_B.replace("4.0", "6.0");
        let err = parse(&format!("{LINE_A}\n{bad}\n")).unwrap_err();
        match &err {
            Error::Parse { line, message, .. } => {
                assert_eq!(*line, 2);
                assert!(message.contains("scores.TA"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn inconsistent_rows_are_rejected() {
        let short = LINE_B.replace("[-0.5,0.25]", "[-0.5]");
        assert!(matches!(
            parse(&format!("{LINE_A}\n{short}")),
            Err(Error::Parse { line: 2, .. })
        ));
        let other_dims = LINE_B.replace("\"TA\"", "\"PQ\"");
        assert!(matches!(
            parse(&format!("{LINE_A}\n{other_dims}")),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse("{not json"),
            Err(Error::Parse { line: 1, .. })
        ));
        let extra = LINE_A.replace("}}", "},\"x\":1}");
        assert!(matches!(parse(&extra), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn writer_uses_sorted_keys() {
        let s = parse(LINE_B).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &s).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "{\"clip_id\":\"c2\",\"system_id\":\"s2\",\"features\":[-0.5,0.25],\"scores\":{\"MI\":1.0,\"TA\":4.0}}\n"
        );
    }

    fn ten_systems() -> Vec<RatedSample> {
        generate_synthetic(&SynthSpec {
            n_systems: 10,
            clips_per_system: 5,
            feature_dim: 3,
            ..Default::default()
        })
        .unwrap()
        .samples
    }

    #[test]
    fn system_split_holds_out_whole_systems() {
        let samples = ten_systems();
        let (train, val) = split_dataset(&samples, 0.2, 4, true).unwrap();
        let ts: BTreeSet<_> = train.iter().map(|s| &s.system_id).collect();
        let vs: BTreeSet<_> = val.iter().map(|s| &s.system_id).collect();
        assert_eq!(vs.len(), 2);
        assert!(ts.is_disjoint(&vs));
        assert_eq!(train.len() + val.len(), samples.len());
    }

    #[test]
    fn clip_split_is_stratified_and_deterministic() {
        let samples = ten_systems();
        let a = split_dataset(&samples, 0.2, 4, false).unwrap();
        let b = split_dataset(&samples, 0.2, 4, false).unwrap();
        assert_eq!(a, b);
        let mut per_sys: BTreeMap<&str, usize> = BTreeMap::new();
        for s in &a.1 {
            *per_sys.entry(&s.system_id).or_default() += 1;
        }
        assert_eq!(per_sys.len(), 10);
        assert!(per_sys.values().all(|&c| c == 1));
        assert_ne!(a, split_dataset(&samples, 0.2, 5, false).unwrap());
    }

    #[test]
    fn split_errors() {
        let samples = ten_systems();
        assert!(split_dataset(&samples, 0.0, 0, false).is_err());
        assert!(split_dataset(&samples, 1.0, 0, true).is_err());
        // 0.01 of 10 systems rounds to zero held-out systems
        assert!(split_dataset(&samples, 0.01, 0, true).is_err());
    }

    #[test]
    fn synthetic_counts() {
        let d = generate_synthetic(&SynthSpec::default()).unwrap();
        assert_eq!(d.samples.len(), 200);
        let systems: BTreeSet<_> = d.samples.iter().map(|s| s.system_id.clone()).collect();
        assert_eq!(systems.len(), 8);
        assert!(d.samples.iter().all(|s| s.features.len() == 16));
    }

    #[test]
    fn noiseless_system_means_equal_latent_levels() {
        let spec = SynthSpec {
            clip_noise_sd: 0.0,
            ..Default::default()
        };
        let d = generate_synthetic(&spec).unwrap();
        for (di, dim) in spec.dimension_names.iter().enumerate() {
            for sys in 0..spec.n_systems {
                let id = system_id(sys);
                for s in d.samples.iter().filter(|s| s.system_id == id) {
                    assert_eq!(s.scores[dim], d.latent_levels[di][sys]);
                }
            }
        }
    }

    #[test]
    fn generator_validation() {
        let bad = [
            SynthSpec {
                n_systems: 0,
                ..Default::default()
            },
            SynthSpec {
                signal_to_noise: 1.5,
                ..Default::default()
            },
            SynthSpec {
                clip_noise_sd: -1.0,
                ..Default::default()
            },
            SynthSpec {
                dimension_names: vec!["A".into(), "A".into()],
                ..Default::default()
            },
            SynthSpec {
                dimension_names: vec![],
                ..Default::default()
            },
        ];
        for spec in bad {
            assert!(generate_synthetic(&spec).is_err(), "{spec:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn jsonl_round_trips_bit_exactly(seed in any::<u64>(), dims in 1usize..4) {
            let spec = SynthSpec {
                n_systems: 3,
                clips_per_system: 4,
                feature_dim: 5,
                dimension_names: (0..dims).map(|d| format!("D{d}")).collect(),
                seed,
                ..Default::default()
            };
            let samples = generate_synthetic(&spec).unwrap().samples;
            let mut buf = Vec::new();
            write_dataset(&mut buf, &samples).unwrap();
            let back = read_dataset(buf.as_slice(), Path::new("mem"), spec.scale).unwrap();
            prop_assert_eq!(back, samples);
        }
    }
}
