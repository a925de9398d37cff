//! Phantom dataset layout: `DIR/{sim,seg,real}/*.png` plus `DIR/index.json`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io;
use crate::phantom::{self, FanGeometry, Palette, RenderStyle, SceneParams};
use crate::seed;
use crate::types::{DomainLabel, Image, SemanticMap};

pub const INDEX_FILE: &str = "index.json";
pub const INDEX_VERSION: u32 = 1;
pub const MIN_COUNT: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn of_index(i: usize, n_train: usize, n_val: usize) -> Split {
        if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Generator settings beyond `(count, seed, size)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub num_tissue_classes: u8,
    pub sim_fan: FanGeometry,
    pub real_fan: FanGeometry,
    pub sim_style: RenderStyle,
    pub real_style: RenderStyle,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            num_tissue_classes: phantom::DEFAULT_TISSUE_CLASSES,
            sim_fan: FanGeometry::sim_default(),
            real_fan: FanGeometry::real_default(),
            sim_style: RenderStyle::sim(),
            real_style: RenderStyle::real(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitFiles {
    /// Basenames shared by `sim/` and `seg/`.
    pub sim: Vec<String>,
    pub real: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub version: u32,
    pub seed: u64,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: u8,
    pub palette: Palette,
    pub config: PhantomConfig,
    pub train: SplitFiles,
    pub val: SplitFiles,
    pub test: SplitFiles,
    #[serde(skip)]
    pub root: PathBuf,
}

/// Split sizes for `count` items: validation and test each take a rounded tenth.
pub fn split_sizes(count: usize) -> Result<(usize, usize, usize)> {
    if count < MIN_COUNT {
        return Err(Error::Dataset(format!("need at least {MIN_COUNT} scenes to split, got {count}")));
    }
    let tenth = (count as f64 / 10.0).round() as usize;
    Ok((count - 2 * tenth, tenth, tenth))
}

pub fn sim_name(i: usize) -> String {
    format!("scene_{i:05}.png")
}

pub fn real_name(i: usize) -> String {
    format!("real_{i:05}.png")
}

/// Writes the dataset and its index; existing files are overwritten with identical bytes.
pub fn build_dataset(
    out: &Path,
    count: usize,
    seed: u64,
    size: (usize, usize),
    cfg: &PhantomConfig,
) -> Result<DatasetIndex> {
    let (n_train, n_val, _) = split_sizes(count)?;
    let palette = Palette::for_classes(cfg.num_tissue_classes);
    let sim_params =
        SceneParams { fan: cfg.sim_fan.clone(), num_tissue_classes: cfg.num_tissue_classes, ..Default::default() };
    let real_params = SceneParams { fan: cfg.real_fan.clone(), ..sim_params.clone() };
    for sub in ["sim", "seg", "real"] {
        for split in Split::ALL {
            let d = out.join(sub).join(split.as_str());
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
    }
    for i in 0..count {
        let dir = |sub: &str| out.join(sub).join(Split::of_index(i, n_train, n_val).as_str());
        // Even and odd derived seeds keep sim and real scenes disjoint.
        let sim_scene = phantom::generate_scene_with(seed::derive(seed, 2 * i as u64), size, &sim_params)?;
        let name = sim_name(i);
        io::write_image(&dir("sim").join(&name), &phantom::render(&sim_scene, &cfg.sim_style, &palette))?;
        io::write_semantic_map(&dir("seg").join(&name), &phantom::render_seg(&sim_scene))?;
        let real_scene = phantom::generate_scene_with(seed::derive(seed, 2 * i as u64 + 1), size, &real_params)?;
        io::write_image(&dir("real").join(real_name(i)), &phantom::render(&real_scene, &cfg.real_style, &palette))?;
    }
    let range =
        |a: usize, b: usize| SplitFiles { sim: (a..b).map(sim_name).collect(), real: (a..b).map(real_name).collect() };
    let index = DatasetIndex {
        version: INDEX_VERSION,
        seed,
        count,
        height: size.0,
        width: size.1,
        num_classes: cfg.num_tissue_classes + 1,
        palette,
        config: cfg.clone(),
        train: range(0, n_train),
        val: range(n_train, n_train + n_val),
        test: range(n_train + n_val, count),
        root: out.to_path_buf(),
    };
    let path = out.join(INDEX_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

impl DatasetIndex {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(INDEX_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut index: DatasetIndex = serde_json::from_str(&text)?;
        if index.version != INDEX_VERSION {
            return Err(Error::Dataset(format!("unsupported index version {}", index.version)));
        }
        index.root = dir.to_path_buf();
        Ok(index)
    }

    pub fn split(&self, split: Split) -> &SplitFiles {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Directory holding one domain of a split.
    pub fn dir(&self, split: Split, domain: DomainLabel) -> PathBuf {
        self.root.join(domain.as_str()).join(split.as_str())
    }

    /// File paths of one domain within a split; `Seg` paths align with `Sim`.
    pub fn paths(&self, split: Split, domain: DomainLabel) -> Vec<PathBuf> {
        let files = self.split(split);
        let names = if domain == DomainLabel::Real { &files.real } else { &files.sim };
        let dir = self.dir(split, domain);
        names.iter().map(|n| dir.join(n)).collect()
    }

    pub fn load_split(&self, split: Split) -> Result<SplitData> {
        let sim = self.paths(split, DomainLabel::Sim).iter().map(|p| io::read_image(p)).collect::<Result<Vec<_>>>()?;
        let seg = self
            .paths(split, DomainLabel::Seg)
            .iter()
            .map(|p| io::read_semantic_map(p, self.num_classes))
            .collect::<Result<Vec<_>>>()?;
        let real =
            self.paths(split, DomainLabel::Real).iter().map(|p| io::read_image(p)).collect::<Result<Vec<_>>>()?;
        Ok(SplitData { sim, seg, real })
    }

    /// SHA-256 over the index and every referenced file, in index order.
    pub fn content_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self)?);
        for split in Split::ALL {
            for domain in DomainLabel::ALL {
                for p in self.paths(split, domain) {
                    h.update(std::fs::read(&p).map_err(|e| Error::io(&p, e))?);
                }
            }
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }
}

/// Decoded images of one split.
#[derive(Clone, Debug)]
pub struct SplitData {
    pub sim: Vec<Image>,
    /// Aligned with `sim`.
    pub seg: Vec<SemanticMap>,
    pub real: Vec<Image>,
}

impl SplitData {
    /// Network-ready images of a domain; semantic maps use the label encoding.
    pub fn images(&self, domain: DomainLabel) -> Result<Vec<Image>> {
        match domain {
            DomainLabel::Sim => Ok(self.sim.clone()),
            DomainLabel::Real => Ok(self.real.clone()),
            DomainLabel::Seg => self.seg.iter().map(SemanticMap::to_image).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_follow_tenths() {
        assert_eq!(split_sizes(100).unwrap(), (80, 10, 10));
        assert_eq!(split_sizes(10).unwrap(), (8, 1, 1));
        assert_eq!(split_sizes(300).unwrap(), (240, 30, 30));
        assert!(split_sizes(5).is_err());
    }

    #[test]
    fn build_small_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PhantomConfig::default();
        let idx = build_dataset(dir.path(), 10, 4, (32, 44), &cfg).unwrap();
        assert_eq!((idx.train.sim.len(), idx.val.sim.len(), idx.test.sim.len()), (8, 1, 1));
        let hash = idx.content_hash().unwrap();

        let loaded = DatasetIndex::load(dir.path()).unwrap();
        assert_eq!(loaded, idx);
        let data = loaded.load_split(Split::Train).unwrap();
        assert_eq!(data.sim.len(), 8);
        // Seg maps share the sim fan support.
        let mask = phantom::generate_scene(seed::derive(4, 0), (32, 44)).unwrap().fan_mask();
        for (i, inside) in mask.iter().enumerate() {
            if !inside {
                assert_eq!(data.seg[0].labels()[i], 0);
                assert_eq!(data.sim[0].data()[i], -1.0);
            }
        }

        build_dataset(dir.path(), 10, 4, (32, 44), &cfg).unwrap();
        assert_eq!(DatasetIndex::load(dir.path()).unwrap().content_hash().unwrap(), hash);
    }

    #[test]
    fn count_below_minimum_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(build_dataset(dir.path(), 5, 1, (32, 44), &PhantomConfig::default()), Err(Error::Dataset(_))));
    }
}
