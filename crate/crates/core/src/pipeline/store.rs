//! Storage of per-frame inversion trajectories.
//!
//! On-disk layout of a cache directory:
//!
//! ```text
//! manifest.json             InversionManifest
//! frame_00000.lat           "LELT", u32 levels, u32 C, u32 h, u32 w, then
//!                           levels*C*h*w little-endian f64 (level-major)
//! frame_00000.maps.json     CrossAttnMapStack, only when maps were captured
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::attention::CrossAttnMapStack;
use crate::config::Resolution;
use crate::diffusion::Latent;
use crate::error::{Error, Result};

/// Inversion of one source frame.
#[derive(Debug, Clone, PartialEq)]
pub struct InversionRecord {
    pub frame: usize,
    /// `trajectory[level]`: level 0 is the encoded frame, the last entry the
    /// noise endpoint.
    pub trajectory: Vec<Latent>,
    /// Object-token attention captured on the way, if requested.
    pub maps: Option<CrossAttnMapStack>,
}

impl InversionRecord {
    pub fn num_steps(&self) -> usize {
        self.trajectory.len() - 1
    }

    pub fn noise_latent(&self) -> &Latent {
        self.trajectory.last().expect("trajectory is never empty")
    }

    pub fn latent_bytes(&self) -> usize {
        self.trajectory.iter().map(|z| z.len() * std::mem::size_of::<f64>()).sum()
    }
}

/// What a set of records was computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionManifest {
    pub format: u32,
    pub backbone: String,
    pub source_prompt: String,
    pub num_steps: usize,
    pub resolution: Resolution,
    pub latent_shape: (usize, usize, usize),
    pub frames: usize,
    pub captured_maps: bool,
}

pub const MANIFEST_FORMAT: u32 = 1;

pub trait InversionStore: Send + Sync {
    fn manifest(&self) -> &InversionManifest;

    fn put(&self, record: InversionRecord) -> Result<()>;

    fn get(&self, frame: usize) -> Result<InversionRecord>;

    /// Bytes of latents held in memory by the store itself.
    fn resident_bytes(&self) -> usize;

    fn describe(&self) -> String;
}

fn missing(frame: usize) -> Error {
    Error::OutOfRange {
        what: "inversion record",
        detail: format!("frame {frame} has not been inverted"),
    }
}

/// Keeps every record in memory.
#[derive(Debug)]
pub struct MemoryStore {
    manifest: InversionManifest,
    records: Mutex<BTreeMap<usize, InversionRecord>>,
}

impl MemoryStore {
    pub fn new(manifest: InversionManifest) -> Self {
        Self {
            manifest,
            records: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.records.lock().expect("store lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl InversionStore for MemoryStore {
    fn manifest(&self) -> &InversionManifest {
        &self.manifest
    }

    fn put(&self, record: InversionRecord) -> Result<()> {
        self.records.lock().expect("store lock").insert(record.frame, record);
        Ok(())
    }

    fn get(&self, frame: usize) -> Result<InversionRecord> {
        self.records
            .lock()
            .expect("store lock")
            .get(&frame)
            .cloned()
            .ok_or_else(|| missing(frame))
    }

    fn resident_bytes(&self) -> usize {
        self.records
            .lock()
            .expect("store lock")
            .values()
            .map(InversionRecord::latent_bytes)
            .sum()
    }

    fn describe(&self) -> String {
        "memory".into()
    }
}

/// Spills records to a cache directory and reads them back on demand.
#[derive(Debug)]
pub struct DiskStore {
    dir: PathBuf,
    manifest: InversionManifest,
}

const MAGIC: &[u8; 4] = b"LELT";

impl DiskStore {
    /// Creates (or reuses) `dir` and writes the manifest.
    pub fn create(dir: &Path, manifest: InversionManifest) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Serde(e.to_string()))?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    /// Opens a directory written by [`DiskStore::create`].
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: InversionManifest =
            serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(Error::Unsupported(format!(
                "{}: cache format {} (expected {MANIFEST_FORMAT})",
                path.display(),
                manifest.format
            )));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn latent_path(&self, frame: usize) -> PathBuf {
        self.dir.join(format!("frame_{frame:05}.lat"))
    }

    fn maps_path(&self, frame: usize) -> PathBuf {
        self.dir.join(format!("frame_{frame:05}.maps.json"))
    }
}

fn write_trajectory(path: &Path, trajectory: &[Latent]) -> Result<()> {
    let (c, h, w) = trajectory[0].dim();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    out.write_all(MAGIC).map_err(io)?;
    for n in [trajectory.len(), c, h, w] {
        out.write_all(&(n as u32).to_le_bytes()).map_err(io)?;
    }
    for z in trajectory {
        if z.dim() != (c, h, w) {
            return Err(Error::shape((c, h, w), z.dim()));
        }
        for v in z.iter() {
            out.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

fn read_trajectory(path: &Path) -> Result<Vec<Latent>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut input = BufReader::new(file);
    let io = |e| Error::io(path, e);
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::Decode(format!("{}: not a latent trajectory file", path.display())));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        let mut b = [0u8; 4];
        input.read_exact(&mut b).map_err(io)?;
        *d = u32::from_le_bytes(b) as usize;
    }
    let [levels, c, h, w] = dims;
    let mut buf = [0u8; 8];
    (0..levels)
        .map(|_| {
            let mut data = Vec::with_capacity(c * h * w);
            for _ in 0..c * h * w {
                input.read_exact(&mut buf).map_err(io)?;
                data.push(f64::from_le_bytes(buf));
            }
            Latent::from_shape_vec((c, h, w), data).map_err(|e| Error::Decode(e.to_string()))
        })
        .collect()
}

impl InversionStore for DiskStore {
    fn manifest(&self) -> &InversionManifest {
        &self.manifest
    }

    fn put(&self, record: InversionRecord) -> Result<()> {
        if record.trajectory.is_empty() {
            return Err(Error::InvalidArgument("empty trajectory".into()));
        }
        write_trajectory(&self.latent_path(record.frame), &record.trajectory)?;
        if let Some(maps) = &record.maps {
            let path = self.maps_path(record.frame);
            let json = serde_json::to_string(maps).map_err(|e| Error::Serde(e.to_string()))?;
            std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    fn get(&self, frame: usize) -> Result<InversionRecord> {
        let path = self.latent_path(frame);
        if !path.exists() {
            return Err(missing(frame));
        }
        let trajectory = read_trajectory(&path)?;
        let maps_path = self.maps_path(frame);
        let maps = if maps_path.exists() {
            let text = std::fs::read_to_string(&maps_path).map_err(|e| Error::io(&maps_path, e))?;
            Some(serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", maps_path.display())))?)
        } else {
            None
        };
        Ok(InversionRecord {
            frame,
            trajectory,
            maps,
        })
    }

    fn resident_bytes(&self) -> usize {
        0
    }

    fn describe(&self) -> String {
        format!("disk:{}", self.dir.display())
    }
}
