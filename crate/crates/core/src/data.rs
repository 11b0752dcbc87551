//! Datasets: the synthetic few-shot task and folder-per-class ingestion.
//!
//! On disk a dataset is a directory with `train/<class>/*.png` and
//! `test/<class>/*.png` (8-bit grayscale), a `captions.json` mapping each
//! class name to its descriptions, and an optional `synonyms.json` used by
//! the synonym-replacement perturbation. Class ids are the positions of
//! the class names in sorted order.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{read_caption_file, CaptionFile};
use crate::seed;
use crate::tensor::Matrix;
use crate::text::{words, Vocab};

const NAMES: [&str; 16] = [
    "apple", "bicycle", "camel", "dolphin", "eagle", "falcon", "giraffe", "harbor", "island",
    "jaguar", "kettle", "lantern", "mountain", "needle", "orchid", "penguin",
];

const ATTRIBUTES: [(&str, &str); 16] = [
    ("red", "crimson"),
    ("blue", "azure"),
    ("green", "emerald"),
    ("striped", "banded"),
    ("spotted", "dotted"),
    ("shiny", "glossy"),
    ("small", "tiny"),
    ("large", "huge"),
    ("round", "circular"),
    ("dark", "dim"),
    ("bright", "vivid"),
    ("soft", "fluffy"),
    ("rough", "coarse"),
    ("pale", "faded"),
    ("tall", "lofty"),
    ("flat", "level"),
];

const TEMPLATES: [&str; 8] = [
    "a photo of a {name}",
    "a {a} {name}",
    "a {name} that looks {b}",
    "a blurry photo of a {a} {name}",
    "the {name} is {a} and {b}",
    "a close view of the {b} {name}",
    "a picture of one {a} {name}",
    "a {b} {name} in the scene",
];

const WORD_SYNONYMS: [(&str, &str); 5] = [
    ("photo", "picture"),
    ("picture", "image"),
    ("blurry", "fuzzy"),
    ("close", "near"),
    ("scene", "frame"),
];

/// Parameters of the synthetic task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Standard deviation of the per-pixel noise added to each prototype.
    pub noise_std: f64,
    pub captions_per_class: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 8,
            train_per_class: 16,
            test_per_class: 16,
            noise_std: 0.15,
            captions_per_class: 6,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("dataset.synthetic.num_classes", "needs at least two classes"));
        }
        if self.train_per_class == 0 {
            return Err(Error::config("dataset.synthetic.train_per_class", "must be positive"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("dataset.synthetic.noise_std", "must be a nonnegative number"));
        }
        if self.captions_per_class < 2 {
            return Err(Error::Cache(format!(
                "{} captions per class requested; at least two are needed",
                self.captions_per_class
            )));
        }
        if self.captions_per_class > TEMPLATES.len() {
            return Err(Error::config(
                "dataset.synthetic.captions_per_class",
                format!("at most {} templates are available", TEMPLATES.len()),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Matrix,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    /// Sorted class names; the label of a class is its index here.
    pub class_names: Vec<String>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub captions: CaptionFile,
    pub synonyms: BTreeMap<String, Vec<String>>,
    pub synthetic: Option<SyntheticSpec>,
}

fn class_name(i: usize) -> String {
    NAMES.get(i).map_or_else(|| format!("class{i:03}"), |s| s.to_string())
}

/// Builds the synthetic task. Deterministic in `seed`.
pub fn generate_synthetic(spec: &SyntheticSpec, image_size: [usize; 2], seed: u64) -> Result<DatasetBundle> {
    spec.validate()?;
    let [h, w] = image_size;
    let mut names: Vec<String> = (0..spec.num_classes).map(class_name).collect();
    names.sort();
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("finite std");
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut captions = CaptionFile::new();
    for (label, name) in names.iter().enumerate() {
        let mut rng = seed::rng(&[seed, 0xDA7A, label as u64]);
        let proto: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| {
            let data = proto
                .iter()
                .map(|&p| if spec.noise_std > 0.0 { p + noise.sample(rng) } else { p })
                .collect();
            Matrix::from_vec(h, w, data).expect("shape")
        };
        for _ in 0..spec.train_per_class {
            train.push(Sample {
                image: draw(&mut rng),
                label,
            });
        }
        for _ in 0..spec.test_per_class {
            test.push(Sample {
                image: draw(&mut rng),
                label,
            });
        }
        let (a, _) = ATTRIBUTES[(2 * label) % ATTRIBUTES.len()];
        let (b, _) = ATTRIBUTES[(2 * label + 1) % ATTRIBUTES.len()];
        let lines = TEMPLATES[..spec.captions_per_class]
            .iter()
            .map(|t| t.replace("{name}", name).replace("{a}", a).replace("{b}", b))
            .collect();
        captions.insert(name.clone(), lines);
    }
    let mut synonyms = BTreeMap::new();
    for (word, syn) in ATTRIBUTES.iter().chain(WORD_SYNONYMS.iter()) {
        synonyms.insert(word.to_string(), vec![syn.to_string()]);
    }
    Ok(DatasetBundle {
        class_names: names,
        train,
        test,
        captions,
        synonyms,
        synthetic: Some(spec.clone()),
    })
}

impl DatasetBundle {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Vocabulary over captions, class names, synonyms and `extra` text.
    pub fn vocab(&self, extra: &[&str], capacity: usize) -> Result<Vocab> {
        let mut texts: Vec<&str> = self.class_names.iter().map(String::as_str).collect();
        texts.extend(self.captions.values().flatten().map(String::as_str));
        for (k, v) in &self.synonyms {
            texts.push(k);
            texts.extend(v.iter().map(String::as_str));
        }
        texts.extend_from_slice(extra);
        Vocab::build(texts, capacity)
    }

    /// Up to `shots` training samples per class, in dataset order.
    pub fn few_shot(&self, shots: usize) -> Vec<&Sample> {
        let mut taken = vec![0usize; self.num_classes()];
        self.train
            .iter()
            .filter(|s| {
                let keep = taken[s.label] < shots;
                taken[s.label] += 1;
                keep
            })
            .collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for (split, samples) in [("train", &self.train), ("test", &self.test)] {
            let mut counts = vec![0usize; self.num_classes()];
            for name in &self.class_names {
                let d = dir.join(split).join(name);
                std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            }
            for s in samples.iter() {
                let path = dir
                    .join(split)
                    .join(&self.class_names[s.label])
                    .join(format!("{:03}.png", counts[s.label]));
                counts[s.label] += 1;
                write_gray_png(&path, &s.image)?;
            }
        }
        write_json(&dir.join("captions.json"), &self.captions)?;
        write_json(&dir.join("synonyms.json"), &self.synonyms)?;
        if let Some(spec) = &self.synthetic {
            write_json(&dir.join("synthetic.json"), spec)?;
        }
        Ok(())
    }

    /// Reads a folder-per-class dataset.
    pub fn load(dir: &Path) -> Result<Self> {
        let train_dir = dir.join("train");
        let mut names = BTreeSet::new();
        for entry in std::fs::read_dir(&train_dir).map_err(|e| Error::io(&train_dir, e))? {
            let entry = entry.map_err(|e| Error::io(&train_dir, e))?;
            if entry.path().is_dir() {
                names.insert(entry.file_name().to_string_lossy().into_owned());
            }
        }
        let class_names: Vec<String> = names.into_iter().collect();
        if class_names.len() < 2 {
            return Err(Error::Input(format!(
                "{} holds {} class folders; at least two are needed",
                train_dir.display(),
                class_names.len()
            )));
        }
        let read_split = |split: &str| -> Result<Vec<Sample>> {
            let mut out = Vec::new();
            for (label, name) in class_names.iter().enumerate() {
                let d = dir.join(split).join(name);
                if !d.exists() {
                    continue;
                }
                let mut files: Vec<_> = std::fs::read_dir(&d)
                    .map_err(|e| Error::io(&d, e))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|x| x == "png"))
                    .collect();
                files.sort();
                for f in files {
                    out.push(Sample {
                        image: read_gray_png(&f)?,
                        label,
                    });
                }
            }
            Ok(out)
        };
        let train = read_split("train")?;
        let test = read_split("test")?;
        let captions = read_caption_file(&dir.join("captions.json"))?;
        let syn_path = dir.join("synonyms.json");
        let synonyms = if syn_path.exists() {
            read_caption_file(&syn_path)?
        } else {
            BTreeMap::new()
        };
        let spec_path = dir.join("synthetic.json");
        let synthetic = if spec_path.exists() {
            let text = std::fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
            Some(serde_json::from_str(&text).map_err(|e| Error::Parse {
                location: spec_path.display().to_string(),
                reason: e.to_string(),
            })?)
        } else {
            None
        };
        Ok(Self {
            class_names,
            train,
            test,
            captions,
            synonyms,
            synthetic,
        })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes a matrix of intensities in `[0, 1]` (clamped) as 8-bit gray.
pub fn write_gray_png(path: &Path, image: &Matrix) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), image.cols() as u32, image.rows() as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let png_err = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&bytes).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

/// Reads an 8-bit grayscale PNG as intensities in `[0, 1]`.
pub fn read_gray_png(path: &Path) -> Result<Matrix> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Parse {
        location: path.display().to_string(),
        reason,
    };
    let mut reader = png::Decoder::new(BufReader::new(file))
        .read_info()
        .map_err(|e| bad(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| bad("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(bad(format!(
            "expected 8-bit grayscale, found {:?} at {:?}",
            info.color_type, info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let data = buf[..w * h].iter().map(|&b| b as f64 / 255.0).collect();
    Matrix::from_vec(h, w, data)
}

/// Whether every caption word is known to `vocab`.
pub fn captions_covered(captions: &CaptionFile, vocab: &Vocab) -> bool {
    captions
        .values()
        .flatten()
        .all(|c| words(c).all(|w| vocab.id(&w).is_some()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_classes_four_samples() {
        let spec = SyntheticSpec {
            num_classes: 2,
            train_per_class: 4,
            test_per_class: 0,
            ..Default::default()
        };
        let d = generate_synthetic(&spec, [16, 16], 0).unwrap();
        assert_eq!(d.train.len(), 8);
        let labels: Vec<usize> = d.train.iter().map(|s| s.label).collect();
        assert_eq!(labels, vec![0, 0, 0, 0, 1, 1, 1, 1]);
    }

    #[test]
    fn same_seed_same_bundle() {
        let spec = SyntheticSpec::default();
        let a = generate_synthetic(&spec, [16, 16], 7).unwrap();
        let b = generate_synthetic(&spec, [16, 16], 7).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&spec, [16, 16], 8).unwrap();
        assert_ne!(a.train[0].image, c.train[0].image);
    }

    #[test]
    fn class_names_are_sorted_and_captioned() {
        let d = generate_synthetic(&SyntheticSpec::default(), [16, 16], 0).unwrap();
        let mut sorted = d.class_names.clone();
        sorted.sort();
        assert_eq!(sorted, d.class_names);
        for name in &d.class_names {
            let caps = &d.captions[name];
            assert_eq!(caps.len(), 6);
            assert!(caps.iter().all(|c| c.contains(name.as_str())));
        }
        let vocab = d.vocab(&["a photo of a"], 256).unwrap();
        assert!(captions_covered(&d.captions, &vocab));
    }

    #[test]
    fn too_few_captions_is_a_cache_error() {
        let spec = SyntheticSpec {
            captions_per_class: 1,
            ..Default::default()
        };
        assert!(matches!(generate_synthetic(&spec, [16, 16], 0), Err(Error::Cache(_))));
    }

    #[test]
    fn nearest_prototype_oracle_is_perfect_when_noise_is_small() {
        let spec = SyntheticSpec {
            noise_std: 0.01,
            ..Default::default()
        };
        let d = generate_synthetic(&spec, [16, 16], 3).unwrap();
        // class means of the training images stand in for the prototypes
        let k = d.num_classes();
        let mut means = vec![vec![0.0; 256]; k];
        let mut counts = vec![0.0; k];
        for s in &d.train {
            for (m, x) in means[s.label].iter_mut().zip(s.image.data()) {
                *m += x;
            }
            counts[s.label] += 1.0;
        }
        for (m, c) in means.iter_mut().zip(&counts) {
            m.iter_mut().for_each(|x| *x /= c);
        }
        let correct = d
            .test
            .iter()
            .filter(|s| {
                let dist = |m: &Vec<f64>| -> f64 {
                    m.iter().zip(s.image.data()).map(|(a, b)| (a - b) * (a - b)).sum()
                };
                let best = (0..k)
                    .min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b])))
                    .unwrap();
                best == s.label
            })
            .count();
        assert_eq!(correct, d.test.len());
    }

    #[test]
    fn few_shot_caps_each_class() {
        let d = generate_synthetic(&SyntheticSpec::default(), [16, 16], 0).unwrap();
        let shots = d.few_shot(3);
        assert_eq!(shots.len(), 3 * 8);
        for c in 0..8 {
            assert_eq!(shots.iter().filter(|s| s.label == c).count(), 3);
        }
    }

    #[test]
    fn disk_round_trip() {
        let spec = SyntheticSpec {
            num_classes: 3,
            train_per_class: 2,
            test_per_class: 1,
            noise_std: 0.0,
            captions_per_class: 3,
        };
        let d = generate_synthetic(&spec, [8, 8], 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.write(dir.path()).unwrap();
        let back = DatasetBundle::load(dir.path()).unwrap();
        assert_eq!(back.class_names, d.class_names);
        assert_eq!(back.captions, d.captions);
        assert_eq!(back.synonyms, d.synonyms);
        assert_eq!(back.synthetic, d.synthetic);
        assert_eq!(back.train.len(), 6);
        assert_eq!(back.test.len(), 3);
        for (a, b) in back.train.iter().zip(&d.train) {
            assert_eq!(a.label, b.label);
            assert!(a.image.max_abs_diff(&b.image) <= 0.5 / 255.0 + 1e-12);
        }
    }
}
