//! Bit-exact binary checkpoints of the parameter store and Adam moments.
//!
//! Format (little-endian):
//!   magic  b"NPLF"
//!   version u32
//!   model   feature_dim, k_neighbors, l_dir, l_feat, hidden (u32 each)
//!   shape   num_feature_rows u64, num_frames u64
//!   values  len u64, then len f64
//!   adam    m (len f64), v (len f64), step u64

use std::io::{Read, Write};
use std::path::Path;

use super::adam::AdamState;
use super::store::{ParameterStore, SegmentLayout};
use super::TrainError;
use crate::lightfield::ModelConfig;

const MAGIC: &[u8; 4] = b"NPLF";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn dump_checkpoint(
    store: &ParameterStore,
    adam: &AdamState,
    path: &Path,
) -> Result<(), TrainError> {
    let l = &store.layout;
    let mut buf: Vec<u8> = Vec::with_capacity(store.values.len() * 24 + 64);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [
        l.model.feature_dim,
        l.model.k_neighbors,
        l.model.l_dir,
        l.model.l_feat,
        l.model.hidden,
    ] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(l.num_feature_rows as u64).to_le_bytes());
    buf.extend_from_slice(&(l.num_frames as u64).to_le_bytes());
    buf.extend_from_slice(&(store.values.len() as u64).to_le_bytes());
    for v in &store.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in adam.m.iter().chain(&adam.v) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&adam.step.to_le_bytes());

    let mut file = std::fs::File::create(path).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })?;
    file.write_all(&buf).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        if self.at + n > self.bytes.len() {
            return Err(TrainError::CheckpointTruncated {
                path: self.path.display().to_string(),
            });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64_vec(&mut self, len: usize) -> Result<Vec<f64>, TrainError> {
        let raw = self.take(len * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(ParameterStore, AdamState), TrainError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })?;
    let mut r = Reader {
        bytes: &bytes,
        at: 0,
        path,
    };
    if r.take(4)? != MAGIC {
        return Err(TrainError::CheckpointBadMagic {
            path: path.display().to_string(),
        });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::CheckpointVersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let model = ModelConfig {
        feature_dim: r.u32()? as usize,
        k_neighbors: r.u32()? as usize,
        l_dir: r.u32()? as usize,
        l_feat: r.u32()? as usize,
        hidden: r.u32()? as usize,
    };
    let num_feature_rows = r.u64()? as usize;
    let num_frames = r.u64()? as usize;
    let layout = SegmentLayout::new(model, num_feature_rows, num_frames);
    let len = r.u64()? as usize;
    if len != layout.total_len() {
        return Err(TrainError::CheckpointTruncated {
            path: path.display().to_string(),
        });
    }
    let values = r.f64_vec(len)?;
    let m = r.f64_vec(len)?;
    let v = r.f64_vec(len)?;
    let step = r.u64()?;
    Ok((
        ParameterStore::from_values(layout, values),
        AdamState { m, v, step },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo() -> (ParameterStore, AdamState) {
        let model = ModelConfig {
            feature_dim: 3,
            k_neighbors: 4,
            l_dir: 2,
            l_feat: 3,
            hidden: 8,
        };
        let layout = SegmentLayout::new(model, 17, 5);
        let mut store = ParameterStore::init(layout, 42);
        let mut adam = AdamState::new(store.values.len());
        for (i, v) in store.values.iter_mut().enumerate() {
            *v += i as f64 * 1e-6;
        }
        for (i, m) in adam.m.iter_mut().enumerate() {
            *m = (i as f64 * 0.3).sin();
        }
        for (i, v) in adam.v.iter_mut().enumerate() {
            *v = (i as f64 * 0.7).cos().abs();
        }
        adam.step = 1234;
        (store, adam)
    }

    #[test]
    fn round_trip_is_bitwise_exact() {
        let (store, adam) = demo();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        dump_checkpoint(&store, &adam, &path).unwrap();
        let (loaded_store, loaded_adam) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded_store.values, store.values);
        assert_eq!(loaded_store.layout, store.layout);
        assert_eq!(loaded_adam, adam);
    }

    #[test]
    fn segment_offsets_match_fresh_layout_after_reload() {
        let (store, adam) = demo();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        dump_checkpoint(&store, &adam, &path).unwrap();
        let (loaded, _) = load_checkpoint(&path).unwrap();
        let fresh = SegmentLayout::new(
            store.layout.model,
            store.layout.num_feature_rows,
            store.layout.num_frames,
        );
        assert_eq!(loaded.layout.point_features, fresh.point_features);
        assert_eq!(loaded.layout.mlp, fresh.mlp);
        assert_eq!(loaded.layout.attention, fresh.attention);
        assert_eq!(loaded.layout.pose_deltas, fresh.pose_deltas);
    }

    #[test]
    fn truncated_file_is_an_error_not_a_crash() {
        let (store, adam) = demo();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        dump_checkpoint(&store, &adam, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(TrainError::CheckpointTruncated { .. })
        ));
    }

    #[test]
    fn version_mismatch_is_detected() {
        let (store, adam) = demo();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        dump_checkpoint(&store, &adam, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(TrainError::CheckpointVersionMismatch { found: 99, .. })
        ));
    }

    #[test]
    fn wrong_magic_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        std::fs::write(&path, b"JUNKJUNKJUNK").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(TrainError::CheckpointBadMagic { .. })
        ));
    }
}
