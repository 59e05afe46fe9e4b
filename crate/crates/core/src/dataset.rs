//! Identity-grouped image/landmark datasets, the TOML manifest, and hybrid
//! same/cross identity pair sampling.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use toml::Spanned;

use crate::error::{Error, Result};
use crate::imageio::{self, Image};
use crate::landmarks::{line_of, LandmarkSet};

#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Image,
    pub landmarks: LandmarkSet,
    pub image_path: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct Identity {
    pub name: String,
    pub samples: Vec<Sample>,
}

/// Read-only after construction.
#[derive(Debug, Clone)]
pub struct Dataset {
    identities: Vec<Identity>,
    resolution: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub source_image: Image,
    pub source_landmarks: LandmarkSet,
    pub condition_image: Image,
    pub condition_landmarks: LandmarkSet,
    pub same_identity: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    identity: Vec<IdentityEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct IdentityEntry {
    name: Spanned<String>,
    sample: Vec<SampleEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleEntry {
    image: Spanned<String>,
    landmarks: Spanned<String>,
}

impl Dataset {
    pub fn new(identities: Vec<Identity>) -> Result<Self> {
        let first = identities
            .iter()
            .flat_map(|i| i.samples.first())
            .next()
            .ok_or_else(|| Error::Dataset("no samples".into()))?;
        let s = first.image.shape();
        let resolution = (s[1], s[2]);
        for id in &identities {
            if id.samples.is_empty() {
                return Err(Error::Dataset(format!("identity `{}` has no samples", id.name)));
            }
            for sample in &id.samples {
                let s = sample.image.shape();
                if s[0] != 3 || (s[1], s[2]) != resolution {
                    return Err(Error::Dataset(format!(
                        "identity `{}`: image shape {:?}, expected (3, {}, {})",
                        id.name, s, resolution.0, resolution.1
                    )));
                }
            }
        }
        Ok(Dataset {
            identities,
            resolution,
        })
    }

    pub fn identities(&self) -> &[Identity] {
        &self.identities
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.resolution
    }

    pub fn len(&self) -> usize {
        self.identities.iter().map(|i| i.samples.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Loads a TOML manifest of `[[identity]]` tables, each holding
    /// `[[identity.sample]]` entries with `image` and `landmarks` paths
    /// relative to the manifest directory.
    pub fn load_manifest(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile {
                path: path.to_path_buf(),
                what: "dataset manifest".into(),
            },
            _ => Error::Io(e),
        })?;
        let at = |byte: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_of(&text, byte),
            message,
        };
        let file: ManifestFile = toml::from_str(&text)
            .map_err(|e| at(e.span().map(|s| s.start).unwrap_or(0), e.message().to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut identities = Vec::with_capacity(file.identity.len());
        for entry in file.identity {
            if entry.sample.is_empty() {
                return Err(at(entry.name.span().start, format!("identity `{}` has no samples", entry.name.get_ref())));
            }
            let mut samples = Vec::with_capacity(entry.sample.len());
            for s in entry.sample {
                let image_path = base.join(s.image.get_ref());
                if !image_path.exists() {
                    return Err(at(s.image.span().start, format!("image not found: {}", image_path.display())));
                }
                let lm_path = base.join(s.landmarks.get_ref());
                if !lm_path.exists() {
                    return Err(at(s.landmarks.span().start, format!("landmark file not found: {}", lm_path.display())));
                }
                let image = imageio::load_png(&image_path)?;
                let landmarks = LandmarkSet::load(&lm_path)?;
                samples.push(Sample {
                    image,
                    landmarks,
                    image_path: Some(image_path),
                });
            }
            identities.push(Identity {
                name: entry.name.into_inner(),
                samples,
            });
        }
        Self::new(identities).map_err(|e| at(0, e.to_string()))
    }

    /// Scans `<root>/<identity>/<image>.png` with `.landmarks` siblings.
    pub fn from_directory(root: &Path) -> Result<Self> {
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        let mut identities = Vec::new();
        for dir in dirs {
            let mut pngs: Vec<PathBuf> = std::fs::read_dir(&dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "png"))
                .collect();
            pngs.sort();
            let mut samples = Vec::new();
            for png in pngs {
                let lm = png.with_extension("landmarks");
                samples.push(Sample {
                    image: imageio::load_png(&png)?,
                    landmarks: LandmarkSet::load(&lm)?,
                    image_path: Some(png),
                });
            }
            if !samples.is_empty() {
                identities.push(Identity {
                    name: dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
                    samples,
                });
            }
        }
        Self::new(identities)
    }

    /// Writes images, landmark files and `manifest.toml` under `root`.
    pub fn write(&self, root: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(root)?;
        let mut manifest = String::new();
        for id in &self.identities {
            std::fs::create_dir_all(root.join(&id.name))?;
            manifest.push_str(&format!("[[identity]]\nname = \"{}\"\n\n", id.name));
            for (i, s) in id.samples.iter().enumerate() {
                let rel_img = format!("{}/{:03}.png", id.name, i);
                let rel_lm = format!("{}/{:03}.landmarks", id.name, i);
                imageio::save_png(&s.image, &root.join(&rel_img))?;
                s.landmarks.save(&root.join(&rel_lm))?;
                manifest.push_str(&format!(
                    "[[identity.sample]]\nimage = \"{rel_img}\"\nlandmarks = \"{rel_lm}\"\n\n"
                ));
            }
        }
        let path = root.join("manifest.toml");
        std::fs::write(&path, manifest)?;
        Ok(path)
    }
}

/// `round_half_up(batch_size * fraction)`.
pub fn same_pair_count(batch_size: usize, fraction: f64) -> usize {
    (batch_size as f64 * fraction + 0.5).floor() as usize
}

/// Draws `batch_size` pairs of which exactly
/// `round_half_up(batch_size * same_pair_fraction)` reuse one image as both
/// source and condition; the rest pair two different identities.
pub fn sample_batch(dataset: &Dataset, batch_size: usize, same_pair_fraction: f64, seed: u64) -> Result<Vec<TrainingPair>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be > 0".into()));
    }
    if !(0.0..=1.0).contains(&same_pair_fraction) {
        return Err(Error::InvalidArgument(format!(
            "same_pair_fraction {same_pair_fraction} outside [0, 1]"
        )));
    }
    let ids = dataset.identities();
    if same_pair_fraction < 1.0 && ids.len() < 2 {
        return Err(Error::Dataset(
            "cross-identity pairs need at least two identities".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_same = same_pair_count(batch_size, same_pair_fraction);
    let mut kinds: Vec<bool> = (0..batch_size).map(|i| i < n_same).collect();
    kinds.shuffle(&mut rng);

    let pick = |rng: &mut ChaCha8Rng, id: usize| -> &Sample {
        let samples = &ids[id].samples;
        &samples[rng.gen_range(0..samples.len())]
    };
    let mut pairs = Vec::with_capacity(batch_size);
    for same in kinds {
        if same {
            let id = rng.gen_range(0..ids.len());
            let s = pick(&mut rng, id);
            pairs.push(TrainingPair {
                source_image: s.image.clone(),
                source_landmarks: s.landmarks.clone(),
                condition_image: s.image.clone(),
                condition_landmarks: s.landmarks.clone(),
                same_identity: true,
            });
        } else {
            let a = rng.gen_range(0..ids.len());
            let mut b = rng.gen_range(0..ids.len() - 1);
            if b >= a {
                b += 1;
            }
            let src = pick(&mut rng, a);
            let cond = pick(&mut rng, b);
            pairs.push(TrainingPair {
                source_image: src.image.clone(),
                source_landmarks: src.landmarks.clone(),
                condition_image: cond.image.clone(),
                condition_landmarks: cond.landmarks.clone(),
                same_identity: false,
            });
        }
    }
    Ok(pairs)
}
