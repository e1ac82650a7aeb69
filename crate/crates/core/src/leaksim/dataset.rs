//! Dataset layout on disk: `manifest.json` beside a `latents.plnk` container.
//!
//! Records reference tensors by index into the container. Closed classes are
//! split train/val/test; open and real classes are test-only. Each closed
//! test sample additionally gets perturbed variants at levels 1–3, recorded
//! with `source` naming the unperturbed sample.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::spectral::Spectral;
use super::{make_profiles, perturb, sample_with, ClassRole, GenConfig, MAX_LEVEL};
use crate::container;
use crate::error::{Error, Result};
use crate::rng;
use crate::schedule::LatentTensor;

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LATENT_FILE: &str = "latents.plnk";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassEntry {
    pub class_id: usize,
    pub name: String,
    pub role: ClassRole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub sample_id: String,
    pub class_id: usize,
    pub tensor_index: usize,
    pub perturbation_level: u8,
    /// Generation seed of the underlying clean sample; also keys its diffusion noise.
    pub seed: u64,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub generator: GenConfig,
    pub latent_file: String,
    pub classes: Vec<ClassEntry>,
    pub records: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn class(&self, class_id: usize) -> Option<&ClassEntry> {
        self.classes.iter().find(|c| c.class_id == class_id)
    }

    pub fn closed_class_ids(&self) -> Vec<usize> {
        self.classes.iter().filter(|c| c.role == ClassRole::Closed).map(|c| c.class_id).collect()
    }

    /// Checks the structural invariants against `tensor_count` stored tensors.
    pub fn validate(&self, tensor_count: usize) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "manifest schema version {} (supported: {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let mut class_ids = HashSet::new();
        for c in &self.classes {
            if !class_ids.insert(c.class_id) {
                return Err(Error::Data(format!("duplicate class id {}", c.class_id)));
            }
        }
        let closed = self.closed_class_ids();
        if closed.len() < 2 {
            return Err(Error::Data("manifest needs at least two closed classes".into()));
        }
        // closed ids must be 0..C so they double as label indices
        if closed.iter().enumerate().any(|(i, &c)| i != c) {
            return Err(Error::Data("closed class ids must be 0..C".into()));
        }
        let mut ids = HashSet::new();
        let mut seed_split: BTreeMap<u64, Split> = BTreeMap::new();
        let mut present: HashSet<(usize, Split)> = HashSet::new();
        for r in &self.records {
            if !ids.insert(r.sample_id.as_str()) {
                return Err(Error::Data(format!("duplicate sample id {}", r.sample_id)));
            }
            let class = self
                .class(r.class_id)
                .ok_or_else(|| Error::Data(format!("{}: unknown class {}", r.sample_id, r.class_id)))?;
            if r.tensor_index >= tensor_count {
                return Err(Error::Data(format!(
                    "{}: tensor index {} beyond {tensor_count} stored tensors",
                    r.sample_id, r.tensor_index
                )));
            }
            if r.perturbation_level > MAX_LEVEL {
                return Err(Error::Data(format!("{}: perturbation level {}", r.sample_id, r.perturbation_level)));
            }
            if class.role != ClassRole::Closed && r.split != Split::Test {
                return Err(Error::Data(format!("{}: {:?} class outside the test split", r.sample_id, class.role)));
            }
            if *seed_split.entry(r.seed).or_insert(r.split) != r.split {
                return Err(Error::Data(format!("{}: generation seed shared across splits", r.sample_id)));
            }
            present.insert((r.class_id, r.split));
        }
        for &c in &closed {
            for s in [Split::Train, Split::Val, Split::Test] {
                if !present.contains(&(c, s)) {
                    return Err(Error::Data(format!("closed class {c} missing from {s:?} split")));
                }
            }
        }
        Ok(())
    }
}

/// A manifest with its decoded latents.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub latents: Vec<LatentTensor>,
}

impl Dataset {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", mpath.display())))?;
        let stored = container::read_file(dir.join(&manifest.latent_file))?;
        manifest.validate(stored.len())?;
        let latents = stored.iter().map(LatentTensor::from_stored).collect::<Result<Vec<_>>>()?;
        Ok(Dataset { manifest, latents })
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let stored: Vec<_> = self.latents.iter().map(|l| l.to_stored()).collect();
        container::write_file(dir.join(&self.manifest.latent_file), &stored)?;
        let mpath = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        text.push('\n');
        fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))
    }

    pub fn num_closed(&self) -> usize {
        self.manifest.closed_class_ids().len()
    }

    pub fn role(&self, r: &SampleRecord) -> ClassRole {
        self.manifest.class(r.class_id).map(|c| c.role).unwrap_or(ClassRole::Open)
    }

    pub fn latent(&self, r: &SampleRecord) -> &LatentTensor {
        &self.latents[r.tensor_index]
    }

    /// Records passing `keep`, in manifest order.
    pub fn select(&self, keep: impl Fn(&SampleRecord, ClassRole) -> bool) -> Vec<&SampleRecord> {
        self.manifest.records.iter().filter(|r| keep(r, self.role(r))).collect()
    }

    /// Closed-class records of `split` at perturbation `level`.
    pub fn closed(&self, split: Split, level: u8) -> Vec<&SampleRecord> {
        self.select(|r, role| role == ClassRole::Closed && r.split == split && r.perturbation_level == level)
    }
}

/// Builds the full corpus in memory. Latents are rounded through f32 so the
/// result equals what [`Dataset::load`] returns after [`Dataset::write`].
pub fn generate(cfg: &GenConfig) -> Result<Dataset> {
    let profiles = make_profiles(cfg, cfg.seed)?;
    let spec = Spectral::new();
    let mut classes = Vec::new();
    let mut records = Vec::new();
    let mut latents = Vec::new();
    let counts = cfg.split_counts();
    let push = |records: &mut Vec<SampleRecord>, latents: &mut Vec<LatentTensor>, mut rec: SampleRecord, l: LatentTensor| {
        rec.tensor_index = latents.len();
        latents.push(l.quantized());
        records.push(rec);
    };
    for p in &profiles {
        let c = p.class_id;
        let (name, n) = match p.role {
            ClassRole::Closed => (format!("gen-{c}"), cfg.per_class),
            ClassRole::Open => (format!("open-{}", c - cfg.closed_classes), cfg.open_per_class),
            ClassRole::Real => ("real".to_string(), cfg.open_per_class),
        };
        classes.push(ClassEntry {
            class_id: c,
            name,
            role: p.role,
        });
        let mut splits = vec![Split::Test; n];
        if p.role == ClassRole::Closed {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng::stream(cfg.seed, &[rng::tag("split"), c as u64]));
            for (rank, &i) in order.iter().enumerate() {
                splits[i] = if rank < counts[0] {
                    Split::Train
                } else if rank < counts[0] + counts[1] {
                    Split::Val
                } else {
                    Split::Test
                };
            }
        }
        let mut variants = Vec::new();
        for (i, &split) in splits.iter().enumerate() {
            let seed = rng::derive_seed(cfg.seed, &[rng::tag("sample"), c as u64, i as u64]);
            let id = format!("c{c}-{i:04}");
            let latent = sample_with(p, seed, &spec);
            if p.role == ClassRole::Closed && split == Split::Test {
                for level in 1..=MAX_LEVEL {
                    let pseed = rng::derive_seed(cfg.seed, &[rng::tag("perturb"), c as u64, i as u64, level as u64]);
                    variants.push((
                        SampleRecord {
                            sample_id: format!("{id}-p{level}"),
                            class_id: c,
                            tensor_index: 0,
                            perturbation_level: level,
                            seed,
                            split,
                            source: Some(id.clone()),
                        },
                        perturb(&latent.quantized(), level, pseed)?,
                    ));
                }
            }
            let rec = SampleRecord {
                sample_id: id,
                class_id: c,
                tensor_index: 0,
                perturbation_level: 0,
                seed,
                split,
                source: None,
            };
            push(&mut records, &mut latents, rec, latent);
        }
        for (rec, l) in variants {
            push(&mut records, &mut latents, rec, l);
        }
    }
    let manifest = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        generator: cfg.clone(),
        latent_file: LATENT_FILE.to_string(),
        classes,
        records,
    };
    manifest.validate(latents.len())?;
    Ok(Dataset { manifest, latents })
}

pub fn build_dataset(cfg: &GenConfig, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let ds = generate(cfg)?;
    ds.write(out_dir)?;
    Ok(ds.manifest)
}
