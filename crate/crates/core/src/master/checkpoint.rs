//! Versioned shard snapshots on disk.
//!
//! ```text
//! <root>/<model_id>/v<version>/shard-<k>.ckpt        binary body
//! <root>/<model_id>/v<version>/shard-<k>.meta.json   per-shard meta, written after the body is synced
//! <root>/<model_id>/v<version>/manifest.json         written once every shard succeeded
//! ```
//! A version without `manifest.json` is incomplete and never loaded.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xxhash_rust::xxh3::xxh3_64;

use super::table::{owner, TableEntry, TableSnapshot};
use crate::clock::unix_millis;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::SchemaKind;
use crate::plog::codec::{decode_slot, encode_slot, Reader};

const MAGIC: &[u8; 8] = b"WPSCKPT1";
const MANIFEST: &str = "manifest.json";

/// Storage tier a checkpoint is written to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointDest {
    Local,
    RemoteSim,
}

impl CheckpointDest {
    pub fn as_str(self) -> &'static str {
        match self {
            CheckpointDest::Local => "local",
            CheckpointDest::RemoteSim => "remote-sim",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model_id: String,
    pub shard_id: u32,
    pub num_shards: u32,
    pub version: u64,
    pub schema: SchemaKind,
    pub created_at_ms: u64,
    pub epoch: u64,
    /// Tail of every log partition when the snapshot was taken.
    #[serde(with = "crate::wire::int_keys")]
    pub log_offsets: BTreeMap<u32, u64>,
    pub param_count: u64,
    /// XXH3-64 of the body file, lower-case hex.
    pub content_digest: String,
    pub body_bytes: u64,
}

/// Marks a version complete; lists every shard's meta.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VersionManifest {
    pub model_id: String,
    pub version: u64,
    pub num_shards: u32,
    pub created_at_ms: u64,
    pub shards: Vec<CheckpointMeta>,
}

impl VersionManifest {
    pub fn new(model_id: &str, version: u64, mut shards: Vec<CheckpointMeta>) -> Result<Self> {
        shards.sort_by_key(|m| m.shard_id);
        let num_shards = shards.first().map(|m| m.num_shards).unwrap_or(0);
        let complete = num_shards > 0
            && shards.len() == num_shards as usize
            && shards.iter().enumerate().all(|(i, m)| {
                m.shard_id == i as u32
                    && m.num_shards == num_shards
                    && m.version == version
                    && m.model_id == model_id
            });
        if !complete {
            return Err(Error::IncompleteCheckpoint {
                version,
                reason: format!("{} shard metas do not form a full set", shards.len()),
            });
        }
        Ok(VersionManifest {
            model_id: model_id.to_string(),
            version,
            num_shards,
            created_at_ms: unix_millis(),
            shards,
        })
    }

    /// Per-partition offset a consumer of this version resumes from: the
    /// earliest tail any shard captured, so no shard's later updates are skipped.
    pub fn replay_offsets(&self) -> BTreeMap<u32, u64> {
        let mut out: BTreeMap<u32, u64> = BTreeMap::new();
        for m in &self.shards {
            for (&p, &o) in &m.log_offsets {
                out.entry(p).and_modify(|x| *x = (*x).min(o)).or_insert(o);
            }
        }
        out
    }

    pub fn param_count(&self) -> u64 {
        self.shards.iter().map(|m| m.param_count).sum()
    }
}

pub fn encode_body(snap: &TableSnapshot) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + snap.entries.len() * 48);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&snap.shard_id.to_le_bytes());
    out.extend_from_slice(&snap.num_shards.to_le_bytes());
    out.extend_from_slice(&snap.epoch.to_le_bytes());
    out.extend_from_slice(&(snap.entries.len() as u64).to_le_bytes());
    for (id, e) in &snap.entries {
        out.extend_from_slice(&id.to_le_bytes());
        out.extend_from_slice(&e.epoch.to_le_bytes());
        encode_slot(&e.slot, &mut out);
    }
    out
}

pub fn decode_body(buf: &[u8]) -> Result<TableSnapshot> {
    let mut rd = Reader::new(buf);
    if rd.take(8)? != MAGIC {
        return Err(Error::Decode("bad checkpoint magic".into()));
    }
    let shard_id = rd.u32()?;
    let num_shards = rd.u32()?;
    let epoch = rd.u64()?;
    let count = rd.u64()?;
    let mut entries = Vec::with_capacity(count.min(1 << 24) as usize);
    for _ in 0..count {
        let id = rd.u64()?;
        let e = rd.u64()?;
        let slot = decode_slot(&mut rd)?;
        entries.push((id, TableEntry { slot, epoch: e }));
    }
    if !rd.is_empty() {
        return Err(Error::Decode("trailing bytes after checkpoint body".into()));
    }
    Ok(TableSnapshot {
        shard_id,
        num_shards,
        epoch,
        entries,
    })
}

fn write_synced(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = OpenOptions::new().create(true).truncate(true).write(true).open(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    if let Some(dir) = path.parent() {
        File::open(dir)?.sync_all()?;
    }
    Ok(())
}

/// The local and remote-sim tiers together.
#[derive(Clone, Debug)]
pub struct CheckpointStores {
    pub local: CheckpointStore,
    pub remote: CheckpointStore,
}

impl CheckpointStores {
    pub fn new(local: impl Into<PathBuf>, remote: impl Into<PathBuf>) -> Self {
        CheckpointStores {
            local: CheckpointStore::new(local),
            remote: CheckpointStore::new(remote),
        }
    }

    pub fn get(&self, dest: CheckpointDest) -> &CheckpointStore {
        match dest {
            CheckpointDest::Local => &self.local,
            CheckpointDest::RemoteSim => &self.remote,
        }
    }

    /// Tier holding a complete copy of `version`, local first.
    pub fn locate(&self, model_id: &str, version: u64) -> Option<CheckpointDest> {
        [CheckpointDest::Local, CheckpointDest::RemoteSim]
            .into_iter()
            .find(|d| self.get(*d).read_manifest(model_id, version).is_ok())
    }

    /// Complete versions across both tiers, ascending and deduplicated.
    pub fn complete_versions(&self, model_id: &str) -> Vec<u64> {
        let mut v = self.local.complete_versions(model_id);
        v.extend(self.remote.complete_versions(model_id));
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// One storage tier rooted at a directory.
#[derive(Clone, Debug)]
pub struct CheckpointStore {
    root: PathBuf,
}

impl CheckpointStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        CheckpointStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn version_dir(&self, model_id: &str, version: u64) -> PathBuf {
        self.root.join(model_id).join(format!("v{version}"))
    }

    pub fn shard_path(&self, model_id: &str, version: u64, shard: u32) -> PathBuf {
        self.version_dir(model_id, version).join(format!("shard-{shard}.ckpt"))
    }

    pub fn meta_path(&self, model_id: &str, version: u64, shard: u32) -> PathBuf {
        self.version_dir(model_id, version).join(format!("shard-{shard}.meta.json"))
    }

    pub fn manifest_path(&self, model_id: &str, version: u64) -> PathBuf {
        self.version_dir(model_id, version).join(MANIFEST)
    }

    /// Writes body, syncs it, then writes the meta. The previous version is
    /// never touched, so a failure here leaves it valid.
    pub fn write_shard(
        &self,
        model_id: &str,
        version: u64,
        schema: SchemaKind,
        snap: &TableSnapshot,
        log_offsets: BTreeMap<u32, u64>,
    ) -> Result<CheckpointMeta> {
        let fail = |what: &str, e: std::io::Error| {
            Error::CheckpointFailed(format!("{model_id} v{version} shard {}: {what}: {e}", snap.shard_id))
        };
        fs::create_dir_all(self.version_dir(model_id, version)).map_err(|e| fail("mkdir", e))?;
        let body = encode_body(snap);
        write_synced(&self.shard_path(model_id, version, snap.shard_id), &body)
            .map_err(|e| fail("body", e))?;
        let meta = CheckpointMeta {
            model_id: model_id.to_string(),
            shard_id: snap.shard_id,
            num_shards: snap.num_shards,
            version,
            schema,
            created_at_ms: unix_millis(),
            epoch: snap.epoch,
            log_offsets,
            param_count: snap.entries.len() as u64,
            content_digest: format!("{:016x}", xxh3_64(&body)),
            body_bytes: body.len() as u64,
        };
        let json = serde_json::to_vec_pretty(&meta)?;
        write_synced(&self.meta_path(model_id, version, snap.shard_id), &json)
            .map_err(|e| fail("meta", e))?;
        Ok(meta)
    }

    pub fn read_meta(&self, model_id: &str, version: u64, shard: u32) -> Result<CheckpointMeta> {
        let path = self.meta_path(model_id, version, shard);
        let bytes = fs::read(&path).map_err(|e| Error::IncompleteCheckpoint {
            version,
            reason: format!("{}: {e}", path.display()),
        })?;
        serde_json::from_slice(&bytes).map_err(|e| Error::CorruptCheckpoint {
            version,
            shard,
            reason: format!("meta: {e}"),
        })
    }

    /// Reads and verifies one shard body against its meta.
    pub fn read_shard(&self, meta: &CheckpointMeta) -> Result<TableSnapshot> {
        let (version, shard) = (meta.version, meta.shard_id);
        let path = self.shard_path(&meta.model_id, version, shard);
        let body = fs::read(&path).map_err(|e| Error::IncompleteCheckpoint {
            version,
            reason: format!("{}: {e}", path.display()),
        })?;
        let corrupt = |reason: String| Error::CorruptCheckpoint {
            version,
            shard,
            reason,
        };
        let digest = format!("{:016x}", xxh3_64(&body));
        if digest != meta.content_digest {
            return Err(corrupt(format!("digest {digest} != {}", meta.content_digest)));
        }
        let snap = decode_body(&body).map_err(|e| corrupt(e.to_string()))?;
        if snap.shard_id != shard || snap.num_shards != meta.num_shards {
            return Err(corrupt("body header disagrees with meta".into()));
        }
        Ok(snap)
    }

    pub fn write_manifest(&self, manifest: &VersionManifest) -> Result<()> {
        let path = self.manifest_path(&manifest.model_id, manifest.version);
        write_synced(&path, &serde_json::to_vec_pretty(manifest)?)
            .map_err(|e| Error::CheckpointFailed(format!("manifest: {e}")))
    }

    pub fn read_manifest(&self, model_id: &str, version: u64) -> Result<VersionManifest> {
        let path = self.manifest_path(model_id, version);
        let bytes = fs::read(&path).map_err(|_| Error::IncompleteCheckpoint {
            version,
            reason: "no manifest".into(),
        })?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// Every version directory, complete or not, ascending.
    pub fn all_versions(&self, model_id: &str) -> Vec<u64> {
        let mut out: Vec<u64> = fs::read_dir(self.root.join(model_id))
            .into_iter()
            .flatten()
            .flatten()
            .filter_map(|e| e.file_name().to_str()?.strip_prefix('v')?.parse().ok())
            .collect();
        out.sort_unstable();
        out
    }

    /// Versions with a manifest, ascending.
    pub fn complete_versions(&self, model_id: &str) -> Vec<u64> {
        self.all_versions(model_id)
            .into_iter()
            .filter(|&v| self.manifest_path(model_id, v).exists())
            .collect()
    }

    pub fn next_version(&self, model_id: &str) -> u64 {
        self.all_versions(model_id).last().map_or(1, |v| v + 1)
    }

    /// Reads every shard of a complete version, verifying digests.
    pub fn load_set(
        &self,
        model_id: &str,
        version: u64,
        exec: Exec,
    ) -> Result<(VersionManifest, Vec<TableSnapshot>)> {
        let manifest = self.read_manifest(model_id, version)?;
        let snaps = exec.try_map(&manifest.shards, |m| self.read_shard(m))?;
        Ok((manifest, snaps))
    }

    /// One target shard's slice of `version`, re-routed to `target_shards`.
    /// Reads only the matching file when the shard count is unchanged.
    pub fn load_slice(
        &self,
        model_id: &str,
        version: u64,
        shard_id: u32,
        target_shards: u32,
        exec: Exec,
    ) -> Result<(VersionManifest, TableSnapshot)> {
        let manifest = self.read_manifest(model_id, version)?;
        if manifest.num_shards == target_shards {
            let meta = &manifest.shards[shard_id as usize];
            let snap = self.read_shard(meta)?;
            return Ok((manifest, snap));
        }
        let snaps = exec.try_map(&manifest.shards, |m| self.read_shard(m))?;
        let slice = reshard_one(&snaps, shard_id, target_shards);
        Ok((manifest, slice))
    }

    /// Flips one byte in a shard body (fault injection).
    pub fn corrupt_shard(&self, model_id: &str, version: u64, shard: u32) -> Result<()> {
        let path = self.shard_path(model_id, version, shard);
        let mut bytes = fs::read(&path)?;
        let at = bytes.len() / 2;
        if let Some(b) = bytes.get_mut(at) {
            *b ^= 0xA5;
        }
        fs::write(&path, bytes)?;
        Ok(())
    }
}

fn reshard_one(snaps: &[TableSnapshot], target: u32, target_shards: u32) -> TableSnapshot {
    let mut entries: Vec<(u64, TableEntry)> = snaps
        .iter()
        .flat_map(|s| s.entries.iter())
        .filter(|(id, _)| owner(*id, target_shards) == target)
        .cloned()
        .collect();
    entries.sort_unstable_by_key(|(id, _)| *id);
    TableSnapshot {
        shard_id: target,
        num_shards: target_shards,
        epoch: snaps.iter().map(|s| s.epoch).max().unwrap_or(0),
        entries,
    }
}

/// Re-routes a full snapshot set to `target_shards` shards by `id mod n`.
pub fn reshard(snaps: &[TableSnapshot], target_shards: u32, exec: Exec) -> Vec<TableSnapshot> {
    assert!(target_shards >= 1);
    exec.map_range(target_shards as usize, |t| reshard_one(snaps, t as u32, target_shards))
}
