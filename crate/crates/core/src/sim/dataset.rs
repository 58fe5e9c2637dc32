//! Train/validation/test trajectory sets and their on-disk format.
//!
//! One file per split, little-endian:
//!
//! ```text
//! "TULD" | version u32 | n_traj u32 | n_particles u32 | n_steps u32
//! effective_dt f64 | normalization f64 x 4
//! per trajectory:
//!   springs  upper-triangle pairs (0,1),(0,2),..., packed LSB-first, byte padded
//!   charges  one bit per particle, packed LSB-first, byte padded
//!   states   f32 [n_steps x n_particles x 4] ordered (x, y, v_x, v_y)
//! ```
//!
//! States are quantised to `f32` at generation time so that a written and
//! re-read dataset is bitwise identical to the in-memory one.

use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{
    sample_initial_conditions, sample_interaction_graph, simulate_trajectory, InteractionGraph,
    PhasePoint, SimConfig, SimError, Trajectory,
};

pub const DATASET_MAGIC: &[u8; 4] = b"TULD";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.tuld",
            Split::Validation => "valid.tuld",
            Split::Test => "test.tuld",
        }
    }

    fn stream_id(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Validation => 1,
            Split::Test => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Validation => self.validation,
            Split::Test => self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub trajectories: Vec<Trajectory>,
    /// Per-coordinate max-absolute scale factors for `(x, y, v_x, v_y)`.
    pub normalization: [f64; 4],
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn n_particles(&self) -> usize {
        self.trajectories
            .first()
            .map_or(0, |t| t.graph.n_particles())
    }

    pub fn n_steps(&self) -> usize {
        self.trajectories.first().map_or(0, |t| t.n_steps())
    }

    pub fn effective_dt(&self) -> f64 {
        self.trajectories.first().map_or(0.0, |t| t.effective_dt)
    }

    /// Normalised states of one trajectory, flat `[step][particle][coord]`.
    pub fn normalized(&self, index: usize) -> Vec<f64> {
        let tr = &self.trajectories[index];
        let mut out = Vec::with_capacity(tr.n_steps() * tr.graph.n_particles() * 4);
        for st in &tr.states {
            for p in &st.particles {
                for c in 0..4 {
                    out.push(p[c] / self.normalization[c]);
                }
            }
        }
        out
    }

    /// Largest `|coordinate| / factor` over the whole split.
    pub fn max_abs_normalized(&self) -> f64 {
        let mut m: f64 = 0.0;
        for tr in &self.trajectories {
            for st in &tr.states {
                for p in &st.particles {
                    for c in 0..4 {
                        m = m.max((p[c] / self.normalization[c]).abs());
                    }
                }
            }
        }
        m
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), SimError> {
        let n = self.n_particles();
        let steps = self.n_steps();
        w.write_all(DATASET_MAGIC)?;
        for v in [DATASET_VERSION, self.len() as u32, n as u32, steps as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.effective_dt().to_le_bytes())?;
        for f in self.normalization {
            w.write_all(&f.to_le_bytes())?;
        }
        for tr in &self.trajectories {
            if tr.graph.n_particles() != n || tr.n_steps() != steps {
                return Err(SimError::Format(
                    "trajectories in one file must share particle and step counts".into(),
                ));
            }
            let springs: Vec<bool> = InteractionGraph::upper_pairs(n)
                .map(|(i, j)| tr.graph.spring(i, j))
                .collect();
            w.write_all(&pack_bits(&springs))?;
            w.write_all(&pack_bits(tr.graph.charges()))?;
            let mut buf = Vec::with_capacity(steps * n * 16);
            for st in &tr.states {
                for p in &st.particles {
                    for v in p {
                        buf.extend_from_slice(&(*v as f32).to_le_bytes());
                    }
                }
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R, split: Split) -> Result<Self, SimError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(SimError::Format("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != DATASET_VERSION {
            return Err(SimError::Format(format!("unsupported version {version}")));
        }
        let n_traj = read_u32(&mut r)? as usize;
        let n = read_u32(&mut r)? as usize;
        let steps = read_u32(&mut r)? as usize;
        let effective_dt = read_f64(&mut r)?;
        let mut normalization = [0.0; 4];
        for f in normalization.iter_mut() {
            *f = read_f64(&mut r)?;
        }
        if normalization.iter().any(|f| !(*f > 0.0)) {
            return Err(SimError::Format(
                "normalization factors must be positive".into(),
            ));
        }
        let n_pairs = n * n.saturating_sub(1) / 2;
        let mut trajectories = Vec::with_capacity(n_traj);
        let mut spring_bytes = vec![0u8; n_pairs.div_ceil(8)];
        let mut charge_bytes = vec![0u8; n.div_ceil(8)];
        let mut state_bytes = vec![0u8; steps * n * 16];
        for _ in 0..n_traj {
            r.read_exact(&mut spring_bytes)?;
            r.read_exact(&mut charge_bytes)?;
            r.read_exact(&mut state_bytes)?;
            let springs = unpack_bits(&spring_bytes, n_pairs);
            let pairs: Vec<(usize, usize)> = InteractionGraph::upper_pairs(n)
                .zip(&springs)
                .filter(|(_, on)| **on)
                .map(|(p, _)| p)
                .collect();
            let graph = InteractionGraph::from_parts(n, &pairs, unpack_bits(&charge_bytes, n));
            let values: Vec<f64> = state_bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            let states = values
                .chunks_exact(n * 4)
                .map(|step| PhasePoint {
                    particles: step
                        .chunks_exact(4)
                        .map(|p| [p[0], p[1], p[2], p[3]])
                        .collect(),
                })
                .collect();
            trajectories.push(Trajectory {
                states,
                graph,
                effective_dt,
            });
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(SimError::Format(
                "trailing bytes after last trajectory".into(),
            ));
        }
        Ok(Dataset {
            split,
            trajectories,
            normalization,
        })
    }

    /// Writes to a temporary sibling and renames into place.
    pub fn save(&self, path: &Path) -> Result<(), SimError> {
        let tmp = tmp_path(path);
        let result = (|| {
            let mut w = BufWriter::new(fs::File::create(&tmp)?);
            self.write_to(&mut w)?;
            w.flush()?;
            drop(w);
            fs::rename(&tmp, path)?;
            Ok(())
        })();
        if result.is_err() {
            let _ = fs::remove_file(&tmp);
        }
        result
    }

    pub fn load(path: &Path, split: Split) -> Result<Self, SimError> {
        Dataset::read_from(BufReader::new(fs::File::open(path)?), split)
    }
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    path.with_file_name(name)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

impl DatasetSplits {
    pub fn get(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    pub fn write_dir(&self, dir: &Path) -> Result<(), SimError> {
        fs::create_dir_all(dir)?;
        for split in Split::ALL {
            self.get(split).save(&dir.join(split.file_name()))?;
        }
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self, SimError> {
        Ok(DatasetSplits {
            train: Dataset::load(&dir.join(Split::Train.file_name()), Split::Train)?,
            validation: Dataset::load(&dir.join(Split::Validation.file_name()), Split::Validation)?,
            test: Dataset::load(&dir.join(Split::Test.file_name()), Split::Test)?,
        })
    }
}

/// Independent random-stream seed for simulation `index` of `split`.
pub fn stream_seed(seed: u64, split: Split, index: usize) -> u64 {
    let mut z = seed
        ^ split.stream_id().wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    // splitmix64 finaliser
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn quantize(tr: &mut Trajectory) {
    for st in &mut tr.states {
        for p in &mut st.particles {
            for v in p.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

fn simulate_split(
    cfg: &SimConfig,
    count: usize,
    split: Split,
    seed: u64,
) -> Result<Vec<Trajectory>, SimError> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, split, i));
            let graph = sample_interaction_graph(cfg, &mut rng);
            let init = sample_initial_conditions(cfg, &mut rng);
            let mut tr = simulate_trajectory(&graph, &init, cfg)?;
            quantize(&mut tr);
            Ok(tr)
        })
        .collect()
}

/// Max-absolute value per coordinate; a coordinate that is identically zero
/// gets factor 1 so factors stay strictly positive.
fn normalization_factors(trajectories: &[Trajectory]) -> [f64; 4] {
    let mut f = [0.0f64; 4];
    for tr in trajectories {
        for st in &tr.states {
            for p in &st.particles {
                for c in 0..4 {
                    f[c] = f[c].max(p[c].abs());
                }
            }
        }
    }
    f.map(|v| if v > 0.0 { v } else { 1.0 })
}

/// Simulates every split; normalisation comes from the train split alone.
pub fn generate_dataset(
    cfg: &SimConfig,
    counts: SplitCounts,
    seed: u64,
) -> Result<DatasetSplits, SimError> {
    cfg.validate()?;
    if counts.train == 0 || counts.validation == 0 || counts.test == 0 {
        return Err(SimError::InvalidConfig(
            "every split needs at least one trajectory".into(),
        ));
    }
    let train = simulate_split(cfg, counts.train, Split::Train, seed)?;
    let validation = simulate_split(cfg, counts.validation, Split::Validation, seed)?;
    let test = simulate_split(cfg, counts.test, Split::Test, seed)?;
    let normalization = normalization_factors(&train);
    let make = |split, trajectories| Dataset {
        split,
        trajectories,
        normalization,
    };
    Ok(DatasetSplits {
        train: make(Split::Train, train),
        validation: make(Split::Validation, validation),
        test: make(Split::Test, test),
    })
}

fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SimConfig {
        SimConfig {
            n_sampled_steps: 20,
            sample_every: 20,
            ..SimConfig::default()
        }
    }

    fn counts() -> SplitCounts {
        SplitCounts {
            train: 10,
            validation: 2,
            test: 2,
        }
    }

    #[test]
    fn split_sizes_and_normalization() {
        let ds = generate_dataset(&small_cfg(), counts(), 7).unwrap();
        assert_eq!(ds.train.len(), 10);
        assert_eq!(ds.validation.len(), 2);
        assert_eq!(ds.test.len(), 2);
        assert_eq!(ds.train.max_abs_normalized(), 1.0);
        assert_eq!(ds.train.normalization, ds.test.normalization);
        assert!(ds.train.normalization.iter().all(|f| *f > 0.0));
    }

    #[test]
    fn file_round_trip_is_bitwise() {
        let ds = generate_dataset(&small_cfg(), counts(), 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.write_dir(dir.path()).unwrap();
        let back = DatasetSplits::read_dir(dir.path()).unwrap();
        assert_eq!(back, ds);
        let bytes = fs::read(dir.path().join("train.tuld")).unwrap();
        assert_eq!(&bytes[..4], b"TULD");
        // header 4 + 16 + 8 + 32, then per trajectory 2 + 1 + 20*5*16 bytes
        assert_eq!(bytes.len(), 60 + 10 * (2 + 1 + 20 * 5 * 16));
    }

    #[test]
    fn generation_is_reproducible() {
        let a = generate_dataset(&small_cfg(), counts(), 99).unwrap();
        let b = generate_dataset(&small_cfg(), counts(), 99).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&small_cfg(), counts(), 100).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn zero_count_rejected() {
        let c = SplitCounts {
            train: 0,
            ..counts()
        };
        assert!(generate_dataset(&small_cfg(), c, 1).is_err());
    }

    #[test]
    fn truncated_file_rejected() {
        let ds = generate_dataset(&small_cfg(), counts(), 3).unwrap();
        let mut buf = Vec::new();
        ds.test.write_to(&mut buf).unwrap();
        assert!(Dataset::read_from(&buf[..buf.len() - 1], Split::Test).is_err());
        buf.push(0);
        assert!(Dataset::read_from(&buf[..], Split::Test).is_err());
    }

    #[test]
    fn failed_write_leaves_no_file() {
        let ds = generate_dataset(&small_cfg(), counts(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("no_such_dir").join("train.tuld");
        assert!(ds.train.save(&missing).is_err());
        assert!(!missing.exists());
    }

    #[test]
    fn bit_packing() {
        let bits = [
            true, false, true, true, false, false, false, false, true, true,
        ];
        let packed = pack_bits(&bits);
        assert_eq!(packed, vec![0b0000_1101, 0b0000_0011]);
        assert_eq!(unpack_bits(&packed, 10), bits);
    }
}
